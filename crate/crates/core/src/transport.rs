//! Deterministic in-process pub/sub broker with a simple impairment model.
//!
//! Every publish is routed to each matching subscription. Per routed copy the
//! broker draws, in order: loss, latency, duplication and (if duplicated) a
//! second independent latency. All draws come from one seeded stream, and
//! equal-time deliveries are processed in insertion order, so a scenario
//! replays to the same trace every time.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TransportError {
    #[error("pattern {0:?} is already subscribed")]
    DuplicateSubscription(String),
    #[error("invalid topic pattern {0:?}")]
    InvalidPattern(String),
    #[error("invalid network model: {0}")]
    InvalidModel(&'static str),
}

/// Latency, loss and duplication parameters for one broker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    pub base_latency_ms: f64,
    pub jitter_std_ms: f64,
    pub loss_prob: f64,
    pub dup_prob: f64,
    pub seed: u64,
}

impl NetworkModel {
    pub fn lossless(base_latency_ms: f64, seed: u64) -> Self {
        Self {
            base_latency_ms,
            jitter_std_ms: 0.0,
            loss_prob: 0.0,
            dup_prob: 0.0,
            seed,
        }
    }

    /// Latency moments observed for the static-key path (283 ± 183 ms).
    pub fn psk_preset(seed: u64) -> Self {
        Self {
            base_latency_ms: 283.0,
            jitter_std_ms: 183.0,
            ..Self::lossless(0.0, seed)
        }
    }

    /// Latency moments observed for the session-key path (360 ± 130 ms).
    pub fn dsekp_preset(seed: u64) -> Self {
        Self {
            base_latency_ms: 360.0,
            jitter_std_ms: 130.0,
            ..Self::lossless(0.0, seed)
        }
    }

    pub fn validate(&self) -> Result<(), TransportError> {
        let finite_nonneg = |x: f64| x.is_finite() && x >= 0.0;
        if !finite_nonneg(self.base_latency_ms) {
            return Err(TransportError::InvalidModel("base latency must be >= 0"));
        }
        if !finite_nonneg(self.jitter_std_ms) {
            return Err(TransportError::InvalidModel("jitter std must be >= 0"));
        }
        if !(0.0..=1.0).contains(&self.loss_prob) {
            return Err(TransportError::InvalidModel("loss probability must be in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.dup_prob) {
            return Err(TransportError::InvalidModel("duplication probability must be in [0, 1]"));
        }
        Ok(())
    }

    /// Mean of `max(0, N(base, jitter^2))`, the latency distribution actually
    /// sampled (before rounding to whole milliseconds).
    pub fn expected_latency_ms(&self) -> f64 {
        let (mu, sigma) = (self.base_latency_ms, self.jitter_std_ms);
        if sigma == 0.0 {
            return mu.max(0.0);
        }
        let z = mu / sigma;
        let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let cdf = 0.5 * erfc(-z / std::f64::consts::SQRT_2);
        mu * cdf + sigma * pdf
    }
}

/// Monotone virtual time in epoch milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VirtualClock {
    now_ms: u64,
}

impl VirtualClock {
    pub fn new(start_ms: u64) -> Self {
        Self { now_ms: start_ms }
    }

    pub fn now_ms(&self) -> u64 {
        self.now_ms
    }

    /// Moves time forward; earlier targets leave the clock unchanged.
    pub fn advance_to(&mut self, t_ms: u64) {
        self.now_ms = self.now_ms.max(t_ms);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Honest,
    Adversary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubscriptionId(pub usize);

/// One message handed to a subscriber.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Delivery {
    pub id: u64,
    pub deliver_at: u64,
    pub published_at: u64,
    pub topic: String,
    pub subscription: SubscriptionId,
    pub origin: Origin,
    /// True for the extra copy created by duplication.
    pub duplicate: bool,
    #[serde(with = "body_text")]
    pub body: Vec<u8>,
}

pub(crate) mod body_text {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(body: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&String::from_utf8_lossy(body))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        Ok(String::deserialize(d)?.into_bytes())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicStats {
    /// Copies routed to a subscriber (one per publish per matching subscription).
    pub routed: u64,
    pub duplicates: u64,
    pub drops: u64,
    pub deliveries: u64,
    /// Publishes that matched no subscription.
    pub unrouted: u64,
}

/// Minimal pub/sub surface, so a real broker client could stand in for [`Broker`].
pub trait PubSub {
    fn subscribe(&mut self, pattern: &str) -> Result<SubscriptionId, TransportError>;
    fn publish(&mut self, topic: &str, body: Vec<u8>, at_ms: u64, origin: Origin);
}

/// Exact match, with `+` matching one whole segment.
pub fn topic_matches(pattern: &str, topic: &str) -> bool {
    let mut p = pattern.split('/');
    let mut t = topic.split('/');
    loop {
        match (p.next(), t.next()) {
            (None, None) => return true,
            (Some("+"), Some(seg)) if !seg.is_empty() => {}
            (Some(a), Some(b)) if a == b => {}
            _ => return false,
        }
    }
}

#[derive(Debug, PartialEq, Eq, PartialOrd, Ord)]
struct QueueKey {
    at: u64,
    id: u64,
}

pub struct Broker {
    model: NetworkModel,
    rng: ChaCha8Rng,
    jitter: Option<Normal<f64>>,
    subscriptions: Vec<String>,
    queue: BinaryHeap<Reverse<QueueKey>>,
    pending: BTreeMap<u64, Delivery>,
    next_id: u64,
    stats: BTreeMap<String, TopicStats>,
}

impl Broker {
    pub fn new(model: NetworkModel) -> Result<Self, TransportError> {
        model.validate()?;
        let jitter = (model.jitter_std_ms > 0.0)
            .then(|| Normal::new(0.0, model.jitter_std_ms).expect("validated std"));
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(model.seed),
            model,
            jitter,
            subscriptions: Vec::new(),
            queue: BinaryHeap::new(),
            pending: BTreeMap::new(),
            next_id: 0,
            stats: BTreeMap::new(),
        })
    }

    pub fn model(&self) -> &NetworkModel {
        &self.model
    }

    pub fn stats(&self) -> &BTreeMap<String, TopicStats> {
        &self.stats
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn next_delivery_at(&self) -> Option<u64> {
        self.queue.peek().map(|Reverse(k)| k.at)
    }

    fn sample_latency(&mut self) -> u64 {
        let jitter = match &self.jitter {
            Some(n) => n.sample(&mut self.rng),
            None => 0.0,
        };
        (self.model.base_latency_ms + jitter).max(0.0).round() as u64
    }

    fn enqueue(&mut self, mut d: Delivery) {
        d.id = self.next_id;
        self.next_id += 1;
        self.queue.push(Reverse(QueueKey {
            at: d.deliver_at,
            id: d.id,
        }));
        self.pending.insert(d.id, d);
    }

    /// Schedules a copy that bypasses the impairment model and arrives at
    /// exactly `deliver_at`.
    pub fn inject(&mut self, topic: &str, body: Vec<u8>, deliver_at: u64, origin: Origin) {
        let subs = self.matching(topic);
        let stats = self.stats.entry(topic.to_owned()).or_default();
        if subs.is_empty() {
            stats.unrouted += 1;
        }
        stats.routed += subs.len() as u64;
        for sub in subs {
            self.enqueue(Delivery {
                id: 0,
                deliver_at,
                published_at: deliver_at,
                topic: topic.to_owned(),
                subscription: sub,
                origin,
                duplicate: false,
                body: body.clone(),
            });
        }
    }

    fn matching(&self, topic: &str) -> Vec<SubscriptionId> {
        self.subscriptions
            .iter()
            .enumerate()
            .filter(|(_, p)| topic_matches(p, topic))
            .map(|(i, _)| SubscriptionId(i))
            .collect()
    }

    /// Pops and hands deliveries to `handler` in (time, insertion) order until
    /// the queue is empty or the next delivery is later than `t_end`. The
    /// handler may publish; those messages are processed in the same call if
    /// they fall due by `t_end`. Returns the deliveries made, in order.
    pub fn run_until<F>(&mut self, clock: &mut VirtualClock, t_end: u64, mut handler: F) -> Vec<Delivery>
    where
        F: FnMut(&mut Broker, &Delivery),
    {
        let mut trace = Vec::new();
        while let Some(Reverse(key)) = self.queue.peek() {
            if key.at > t_end {
                break;
            }
            let Reverse(key) = self.queue.pop().expect("peeked");
            let d = self.pending.remove(&key.id).expect("queued delivery is pending");
            clock.advance_to(d.deliver_at);
            self.stats.entry(d.topic.clone()).or_default().deliveries += 1;
            handler(self, &d);
            trace.push(d);
        }
        clock.advance_to(t_end);
        trace
    }
}

impl PubSub for Broker {
    fn subscribe(&mut self, pattern: &str) -> Result<SubscriptionId, TransportError> {
        if pattern.is_empty() || pattern.split('/').any(|s| s.is_empty() || (s.contains('+') && s != "+") || s.contains('#')) {
            return Err(TransportError::InvalidPattern(pattern.to_owned()));
        }
        if self.subscriptions.iter().any(|p| p == pattern) {
            return Err(TransportError::DuplicateSubscription(pattern.to_owned()));
        }
        self.subscriptions.push(pattern.to_owned());
        Ok(SubscriptionId(self.subscriptions.len() - 1))
    }

    fn publish(&mut self, topic: &str, body: Vec<u8>, at_ms: u64, origin: Origin) {
        assert!(!topic.is_empty(), "publish to an empty topic");
        let subs = self.matching(topic);
        if subs.is_empty() {
            self.stats.entry(topic.to_owned()).or_default().unrouted += 1;
            return;
        }
        for sub in subs {
            self.stats.entry(topic.to_owned()).or_default().routed += 1;
            if self.rng.gen::<f64>() < self.model.loss_prob {
                self.stats.get_mut(topic).expect("entry").drops += 1;
                continue;
            }
            let latency = self.sample_latency();
            let copy = Delivery {
                id: 0,
                deliver_at: at_ms + latency,
                published_at: at_ms,
                topic: topic.to_owned(),
                subscription: sub,
                origin,
                duplicate: false,
                body: body.clone(),
            };
            let dup = self.rng.gen::<f64>() < self.model.dup_prob;
            self.enqueue(copy.clone());
            if dup {
                let latency = self.sample_latency();
                self.stats.get_mut(topic).expect("entry").duplicates += 1;
                self.enqueue(Delivery {
                    deliver_at: at_ms + latency,
                    duplicate: true,
                    ..copy
                });
            }
        }
    }
}

/// Writes deliveries as JSON lines.
pub fn write_trace<W: Write>(mut out: W, trace: &[Delivery]) -> std::io::Result<()> {
    for d in trace {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}
