//! End-to-end simulated runs: devices, edge and broker driven by one
//! deterministic event loop.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{DeviceIdentity, AES_KEY_LEN};
use crate::device::{DeviceConfig, DeviceState, Phase, PskDevice, SensorSource, TimerAction};
use crate::edge::{DataRejection, EdgeConfig, EdgeSessionStore, InitRejection, PskEdge};
use crate::metrics::{
    self, iso_timestamp, ClientLogRecord, MetricsError, RunSummary, ServerLogRecord, Variant,
};
use crate::transport::{self, Broker, Delivery, NetworkModel, Origin, PubSub, TransportError, VirtualClock};
use crate::wire::{self, AckStatus, WireMessage};

/// Virtual time at which every run starts (2023-11-14T22:13:20Z).
pub const EPOCH_START_MS: u64 = 1_700_000_000_000;
/// How long after the last scheduled reading the loop keeps running to let
/// pending handshakes and deliveries complete.
pub const DRAIN_WINDOW_MS: u64 = 120_000;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown profile key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("profile line {0} is not key=value")]
    BadLine(usize),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("transport: {0}")]
    Transport(#[from] TransportError),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("metrics: {0}")]
    Metrics(#[from] MetricsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkPreset {
    Psk,
    Dsekp,
    Lossless,
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunProfile {
    pub mode: Variant,
    /// Readings per device.
    pub packets: u64,
    pub interval_ms: u64,
    pub devices: u32,
    pub network: NetworkModel,
    pub reboot_every: Option<u64>,
    /// Proactive rotation; `None` disables it.
    pub session_timeout_s: Option<u64>,
    pub seed: u64,
    /// Where artifacts go; not part of the recorded profile so outputs do
    /// not depend on the location.
    #[serde(skip)]
    pub out_dir: PathBuf,
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 over (seed, stream)
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RunProfile {
    pub fn new(mode: Variant, seed: u64) -> Self {
        let mut p = Self {
            mode,
            packets: 100,
            interval_ms: 2_000,
            devices: 1,
            network: NetworkModel::lossless(0.0, 0),
            reboot_every: None,
            session_timeout_s: Some(3_600),
            seed,
            out_dir: PathBuf::from("out"),
        };
        p.set_preset(match mode {
            Variant::Psk => NetworkPreset::Psk,
            Variant::Dsekp => NetworkPreset::Dsekp,
        });
        p
    }

    /// Replaces the latency/jitter moments, keeping loss and duplication.
    pub fn set_preset(&mut self, preset: NetworkPreset) {
        let seed = derive_seed(self.seed, 0xB0);
        let base = match preset {
            NetworkPreset::Psk => NetworkModel::psk_preset(seed),
            NetworkPreset::Dsekp => NetworkModel::dsekp_preset(seed),
            NetworkPreset::Lossless => NetworkModel::lossless(self.network.base_latency_ms, seed),
        };
        self.network = NetworkModel {
            loss_prob: self.network.loss_prob,
            dup_prob: self.network.dup_prob,
            ..base
        };
    }

    /// Sets one profile key. Keys use the CLI flag spelling without dashes
    /// prefix (`interval-ms`); underscores are accepted as well.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
        where
            T::Err: std::fmt::Display,
        {
            value.trim().parse().map_err(|e: T::Err| ConfigError::BadValue {
                key: key.to_owned(),
                value: value.to_owned(),
                reason: e.to_string(),
            })
        }
        let norm = key.trim().replace('_', "-");
        match norm.as_str() {
            "mode" => {
                self.mode = value.trim().parse().map_err(|reason| ConfigError::BadValue {
                    key: key.into(),
                    value: value.into(),
                    reason,
                })?
            }
            "packets" => self.packets = parse(key, value)?,
            "interval-ms" => self.interval_ms = parse(key, value)?,
            "devices" => self.devices = parse(key, value)?,
            "seed" => {
                self.seed = parse(key, value)?;
                self.network.seed = derive_seed(self.seed, 0xB0);
            }
            "latency-base-ms" => self.network.base_latency_ms = parse(key, value)?,
            "latency-jitter-ms" => self.network.jitter_std_ms = parse(key, value)?,
            "loss" => self.network.loss_prob = parse(key, value)?,
            "dup" => self.network.dup_prob = parse(key, value)?,
            "reboot-every" => {
                let k: u64 = parse(key, value)?;
                self.reboot_every = (k > 0).then_some(k);
            }
            "session-timeout-s" => {
                let s: u64 = parse(key, value)?;
                self.session_timeout_s = (s > 0).then_some(s);
            }
            "network-preset" => {
                let preset = match value.trim() {
                    "psk" => NetworkPreset::Psk,
                    "dsekp" => NetworkPreset::Dsekp,
                    "lossless" => NetworkPreset::Lossless,
                    other => {
                        return Err(ConfigError::BadValue {
                            key: key.into(),
                            value: other.into(),
                            reason: "expected psk, dsekp or lossless".into(),
                        })
                    }
                };
                self.set_preset(preset);
            }
            "out" => self.out_dir = PathBuf::from(value.trim()),
            _ => return Err(ConfigError::UnknownKey(key.to_owned())),
        }
        Ok(())
    }

    /// Applies a `key=value` profile file. Blank lines and `#` comments are
    /// ignored.
    pub fn apply_file(&mut self, text: &str) -> Result<(), ConfigError> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::BadLine(i + 1))?;
            pairs.push((k.trim().to_owned(), v.trim().to_owned()));
        }
        self.apply_pairs(pairs)
    }

    /// Applies several keys. `mode`, `seed` and `network-preset` go first so
    /// the latency preset they select does not clobber explicit latency keys.
    pub fn apply_pairs(&mut self, mut pairs: Vec<(String, String)>) -> Result<(), ConfigError> {
        pairs.sort_by_key(|(k, _)| match k.replace('_', "-").as_str() {
            "mode" => 0,
            "seed" => 1,
            "network-preset" => 2,
            _ => 3,
        });
        for (k, v) in pairs {
            if k == "mode" {
                let before = self.mode;
                self.apply(&k, &v)?;
                if self.mode != before {
                    self.set_preset(match self.mode {
                        Variant::Psk => NetworkPreset::Psk,
                        Variant::Dsekp => NetworkPreset::Dsekp,
                    });
                }
            } else {
                self.apply(&k, &v)?;
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.packets < 1 {
            return Err(ConfigError::Invalid("packets must be >= 1".into()));
        }
        if self.interval_ms < 1 {
            return Err(ConfigError::Invalid("interval-ms must be >= 1".into()));
        }
        if self.devices < 1 {
            return Err(ConfigError::Invalid("devices must be >= 1".into()));
        }
        self.network
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn device_config(&self) -> DeviceConfig {
        DeviceConfig {
            session_timeout_ms: self.session_timeout_s.map(|s| s * 1000),
            ..DeviceConfig::default()
        }
    }
}

/// Credentials provisioned out-of-band for one simulated device.
#[derive(Debug, Clone)]
pub struct Provisioned {
    pub identity: DeviceIdentity,
    pub psk: [u8; AES_KEY_LEN],
}

/// Deterministic credentials for device `index` (0-based) under `seed`.
pub fn provision(seed: u64, index: u32) -> Provisioned {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x1000 + index as u64));
    let mut dev_secret = [0u8; 32];
    let mut edge_salt = [0u8; 16];
    let mut psk = [0u8; AES_KEY_LEN];
    rng.fill_bytes(&mut dev_secret);
    rng.fill_bytes(&mut edge_salt);
    rng.fill_bytes(&mut psk);
    Provisioned {
        identity: DeviceIdentity::new(format!("esp32-{:02}", index + 1), dev_secret, edge_salt)
            .expect("generated identity is valid"),
        psk,
    }
}

/// What the edge did with one delivered message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "reason")]
pub enum EdgeOutcome {
    InitAccepted,
    InitRejected(InitRejection),
    DataAccepted,
    /// Baseline only: accepted again although already seen.
    DataDuplicate,
    DataRejected(DataRejection),
    Malformed,
}

impl EdgeOutcome {
    pub fn is_accepted(self) -> bool {
        matches!(
            self,
            EdgeOutcome::InitAccepted | EdgeOutcome::DataAccepted | EdgeOutcome::DataDuplicate
        )
    }

    /// Rejection label, or `None` for acceptances.
    pub fn reason(self) -> Option<&'static str> {
        match self {
            EdgeOutcome::InitRejected(r) => Some(match r {
                InitRejection::UnknownDevice => "unknown_device",
                InitRejection::BadProof => "bad_proof",
                InitRejection::StaleTimestamp => "stale_timestamp",
                InitRejection::DuplicateCtr => "duplicate_ctr",
            }),
            EdgeOutcome::DataRejected(r) => Some(match r {
                DataRejection::UnknownSession => "unknown_session",
                DataRejection::Replay => "replay",
                DataRejection::AuthFailure => "auth_failure",
            }),
            EdgeOutcome::Malformed => Some("malformed"),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub delivery_id: u64,
    pub at: u64,
    pub origin: Origin,
    pub topic: String,
    pub outcome: EdgeOutcome,
}

/// Counters gathered during a run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunStats {
    pub readings: u64,
    pub sent: u64,
    pub unsent: u64,
    pub sessions_started: u64,
    pub init_publishes: u64,
    pub init_resends: u64,
    pub acks_ok: u64,
    pub acks_rejected: u64,
    pub device_ack_errors: u64,
    pub sessions_established: u64,
    pub psk_duplicates: u64,
    pub rejections: BTreeMap<String, u64>,
}

/// Hook that sees every honest publish before the broker does and may
/// return extra messages to deliver at the same instant, ahead of the
/// honest copy.
pub trait Interceptor {
    fn on_publish(&mut self, topic: &str, body: &[u8], at_ms: u64) -> Vec<(String, Vec<u8>)>;
}

// A handful of nodes per run; boxing the state buys nothing.
#[allow(clippy::large_enum_variant)]
enum Node {
    Session {
        state: DeviceState,
        sent_in_session: u64,
        /// Readings waiting for an active session.
        pending: VecDeque<String>,
    },
    Baseline {
        device: PskDevice,
    },
}

struct SimDevice {
    node: Node,
    sensor: SensorSource,
    next_tick: u64,
    ticks_left: u64,
}

#[derive(Default)]
struct Audit {
    /// (dev_id, session ordinal) -> last seq emitted. Counters can recur
    /// across a long run, so sessions are told apart by ordinal.
    last_seq: BTreeMap<(String, u64), u64>,
    ivs: BTreeMap<(String, u64), BTreeSet<[u8; 12]>>,
    violation: Option<String>,
}

impl Audit {
    fn fail(&mut self, msg: String) {
        self.violation.get_or_insert(msg);
    }
}

struct Shared<'a> {
    profile: &'a RunProfile,
    edge: &'a mut EdgeSessionStore,
    psk_edge: &'a mut PskEdge,
    client_logs: &'a mut Vec<ClientLogRecord>,
    server_logs: &'a mut Vec<ServerLogRecord>,
    outcomes: &'a mut Vec<OutcomeRecord>,
    stats: &'a mut RunStats,
    audit: &'a mut Audit,
    interceptor: Option<&'a mut Box<dyn Interceptor>>,
}

impl Shared<'_> {
    fn publish(&mut self, broker: &mut Broker, topic: &str, body: Vec<u8>, at: u64) {
        if let Some(i) = self.interceptor.as_deref_mut() {
            for (t, b) in i.on_publish(topic, &body, at) {
                broker.inject(&t, b, at, Origin::Adversary);
            }
        }
        broker.publish(topic, body, at, Origin::Honest);
    }

    fn publish_init(&mut self, broker: &mut Broker, init: wire::InitMessage, at: u64) {
        self.stats.init_publishes += 1;
        let body = wire::encode(&WireMessage::Init(init));
        self.publish(broker, wire::INIT_TOPIC, body, at);
    }

    #[allow(clippy::too_many_arguments)]
    fn client_record(
        &mut self,
        seq: u64,
        ctr: Option<u16>,
        dev_id: &str,
        plaintext: &str,
        env: (&[u8; 12], &[u8; 16], &[u8]),
        now: u64,
        size: usize,
    ) {
        self.client_logs.push(ClientLogRecord {
            seq,
            sessctr_id: ctr,
            timestamp: iso_timestamp(now),
            dev_id: dev_id.to_owned(),
            plaintext: plaintext.to_owned(),
            iv: hex::encode(env.0),
            tag: hex::encode(env.1),
            ciphertext: hex::encode(env.2),
            sendts_ms: now,
            payload_size: size,
        });
        self.stats.sent += 1;
    }

    /// Sends queued readings while the session allows it, rotating when the
    /// reboot budget is used up.
    fn pump(&mut self, broker: &mut Broker, dev: &mut SimDevice, now: u64) {
        let Node::Session {
            state,
            sent_in_session,
            pending,
        } = &mut dev.node
        else {
            return;
        };
        while let Some(reading) = pending.front() {
            match state.phase() {
                Phase::AwaitAck => break,
                Phase::Idle => {
                    *sent_in_session = 0;
                    let init = state.begin_session(now);
                    self.publish_init(broker, init, now);
                    break;
                }
                Phase::Active => {
                    if self.profile.reboot_every.is_some_and(|k| *sent_in_session >= k) {
                        state.simulate_reboot();
                        continue;
                    }
                    let pkt = state
                        .next_data_packet(reading.as_bytes(), now)
                        .expect("phase checked");
                    let key = (pkt.dev_id.clone(), state.sessions_started());
                    let last = self.audit.last_seq.insert(key.clone(), pkt.seq).unwrap_or(0);
                    if pkt.seq != last + 1 {
                        self.audit.fail(format!(
                            "{} session {}: seq {} after {}",
                            pkt.dev_id, pkt.sessctr_id, pkt.seq, last
                        ));
                    }
                    if !self.audit.ivs.entry(key).or_default().insert(pkt.iv) {
                        self.audit.fail(format!(
                            "{} session {}: iv reused at seq {}",
                            pkt.dev_id, pkt.sessctr_id, pkt.seq
                        ));
                    }
                    let body = wire::encode(&WireMessage::DsekpData(pkt.clone()));
                    let reading = pending.pop_front().expect("front exists");
                    self.client_record(
                        pkt.seq,
                        Some(pkt.sessctr_id),
                        &pkt.dev_id,
                        &reading,
                        (&pkt.iv, &pkt.tag, &pkt.ciphertext),
                        now,
                        body.len(),
                    );
                    *sent_in_session += 1;
                    self.publish(broker, wire::DATA_TOPIC, body, now);
                }
            }
        }
    }

    fn tick(&mut self, broker: &mut Broker, dev: &mut SimDevice, now: u64) {
        let reading = dev.sensor.next_reading();
        self.stats.readings += 1;
        match &mut dev.node {
            Node::Baseline { device } => {
                let pkt = device.next_psk_packet(reading.as_bytes(), now);
                let body = wire::encode(&WireMessage::PskData(pkt.clone()));
                self.client_record(
                    pkt.seq,
                    None,
                    &pkt.dev_id,
                    &reading,
                    (&pkt.iv, &pkt.tag, &pkt.ciphertext),
                    now,
                    body.len(),
                );
                self.publish(broker, wire::PSK_DATA_TOPIC, body, now);
            }
            Node::Session { pending, .. } => {
                pending.push_back(reading);
                self.pump(broker, dev, now);
            }
        }
    }

    fn timers(&mut self, broker: &mut Broker, dev: &mut SimDevice, now: u64) {
        let Node::Session {
            state,
            sent_in_session,
            ..
        } = &mut dev.node
        else {
            return;
        };
        match state.poll_timers(now) {
            Some(TimerAction::Resend(init)) => {
                self.stats.init_resends += 1;
                self.publish_init(broker, init, now);
            }
            Some(TimerAction::Restart(init)) => {
                *sent_in_session = 0;
                self.publish_init(broker, init, now);
            }
            None => {}
        }
    }

    fn record(&mut self, d: &Delivery, outcome: EdgeOutcome) {
        if let Some(reason) = outcome.reason() {
            *self.stats.rejections.entry(reason.to_owned()).or_default() += 1;
        }
        self.outcomes.push(OutcomeRecord {
            delivery_id: d.id,
            at: d.deliver_at,
            origin: d.origin,
            topic: d.topic.clone(),
            outcome,
        });
    }

    fn deliver(&mut self, broker: &mut Broker, devices: &mut [SimDevice], d: &Delivery) {
        let now = d.deliver_at;
        let msg = match wire::decode(&d.topic, &d.body) {
            Ok(m) => m,
            Err(_) => {
                if !d.topic.starts_with(wire::ACK_TOPIC_PREFIX) {
                    self.record(d, EdgeOutcome::Malformed);
                }
                return;
            }
        };
        match msg {
            WireMessage::Init(init) => {
                let out = self.edge.handle_init(&init, now);
                let outcome = match out.result {
                    Ok(_) => EdgeOutcome::InitAccepted,
                    Err(r) => EdgeOutcome::InitRejected(r),
                };
                if let Err(e) = self.edge.check_invariants() {
                    self.audit.fail(e);
                }
                self.record(d, outcome);
                match out.ack.status {
                    AckStatus::Ok => self.stats.acks_ok += 1,
                    AckStatus::Rejected => self.stats.acks_rejected += 1,
                }
                let topic = wire::ack_topic(&out.ack.dev_id);
                broker.publish(&topic, wire::encode(&WireMessage::Ack(out.ack)), now, Origin::Honest);
            }
            WireMessage::DsekpData(pkt) => {
                let outcome = match self.edge.handle_data(&pkt, d.body.len(), now) {
                    Ok(rec) => {
                        self.server_logs.push(rec);
                        EdgeOutcome::DataAccepted
                    }
                    Err(r) => EdgeOutcome::DataRejected(r),
                };
                self.record(d, outcome);
            }
            WireMessage::PskData(pkt) => {
                let outcome = match self.psk_edge.handle_psk_data(&pkt, d.body.len(), now) {
                    Ok(acc) => {
                        self.server_logs.push(acc.record);
                        if acc.duplicate {
                            self.stats.psk_duplicates += 1;
                            EdgeOutcome::DataDuplicate
                        } else {
                            EdgeOutcome::DataAccepted
                        }
                    }
                    Err(r) => EdgeOutcome::DataRejected(r),
                };
                self.record(d, outcome);
            }
            WireMessage::Ack(ack) => {
                let Some(dev) = devices.iter_mut().find(|dev| match &dev.node {
                    Node::Session { state, .. } => state.dev_id() == ack.dev_id,
                    Node::Baseline { .. } => false,
                }) else {
                    return;
                };
                let Node::Session { state, .. } = &mut dev.node else {
                    unreachable!()
                };
                match state.on_ack(&ack, now) {
                    Ok(()) => {
                        self.stats.sessions_established += 1;
                        self.pump(broker, dev, now);
                    }
                    Err(_) => self.stats.device_ack_errors += 1,
                }
            }
        }
    }
}

/// Artifacts of one run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub profile: RunProfile,
    pub client_logs: Vec<ClientLogRecord>,
    pub server_logs: Vec<ServerLogRecord>,
    pub trace: Vec<Delivery>,
    pub outcomes: Vec<OutcomeRecord>,
    pub stats: RunStats,
    pub topic_stats: BTreeMap<String, transport::TopicStats>,
    /// Persisted edge session store (session mode only).
    pub sessions_json: Option<String>,
}

impl RunOutput {
    pub fn summary(&self) -> Result<RunSummary, MetricsError> {
        RunSummary::from_records(self.profile.mode, &self.server_logs, Some(self.stats.sent))
    }

    /// Number of deliveries on `topic` in the trace.
    pub fn trace_count(&self, topic: &str) -> usize {
        self.trace.iter().filter(|d| d.topic == topic).count()
    }

    /// Ok-acks delivered to devices.
    pub fn trace_ok_acks(&self) -> usize {
        self.trace
            .iter()
            .filter(|d| d.topic.starts_with(wire::ACK_TOPIC_PREFIX))
            .filter(|d| {
                matches!(
                    wire::decode(&d.topic, &d.body),
                    Ok(WireMessage::Ack(a)) if a.status == AckStatus::Ok
                )
            })
            .count()
    }

    /// Writes `client_logs.csv`, `server_logs.csv`, `summary.json`,
    /// `trace.jsonl` and `sessions.json` into `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<(), SimError> {
        fs::create_dir_all(dir)?;
        let variant = self.profile.mode;
        metrics::write_client_csv(
            fs::File::create(dir.join("client_logs.csv"))?,
            &self.client_logs,
            variant,
        )?;
        metrics::write_csv(&self.server_logs, &dir.join("server_logs.csv"), variant)?;
        let summary = RunReport {
            profile: &self.profile,
            stats: &self.stats,
            topics: &self.topic_stats,
            summary: self.summary().ok(),
        };
        fs::write(
            dir.join("summary.json"),
            serde_json::to_string_pretty(&summary).expect("plain data serializes") + "\n",
        )?;
        transport::write_trace(
            std::io::BufWriter::new(fs::File::create(dir.join("trace.jsonl"))?),
            &self.trace,
        )?;
        fs::write(
            dir.join("sessions.json"),
            self.sessions_json.clone().unwrap_or_else(|| "[]".into()) + "\n",
        )?;
        Ok(())
    }
}

#[derive(Serialize)]
struct RunReport<'a> {
    profile: &'a RunProfile,
    stats: &'a RunStats,
    topics: &'a BTreeMap<String, transport::TopicStats>,
    summary: Option<RunSummary>,
}

/// A configured run that can be driven, attacked and inspected.
pub struct Simulation {
    profile: RunProfile,
    broker: Broker,
    clock: VirtualClock,
    devices: Vec<SimDevice>,
    edge: EdgeSessionStore,
    psk_edge: PskEdge,
    client_logs: Vec<ClientLogRecord>,
    server_logs: Vec<ServerLogRecord>,
    trace: Vec<Delivery>,
    outcomes: Vec<OutcomeRecord>,
    stats: RunStats,
    audit: Audit,
    interceptor: Option<Box<dyn Interceptor>>,
}

impl Simulation {
    pub fn new(profile: RunProfile) -> Result<Self, SimError> {
        profile.validate()?;
        let mut broker = Broker::new(profile.network)?;
        let mut edge = EdgeSessionStore::new(EdgeConfig::default());
        let mut psk_edge = PskEdge::new();
        match profile.mode {
            Variant::Psk => {
                broker.subscribe(wire::PSK_DATA_TOPIC)?;
            }
            Variant::Dsekp => {
                broker.subscribe(wire::INIT_TOPIC)?;
                broker.subscribe(wire::DATA_TOPIC)?;
                broker.subscribe(wire::ACK_TOPIC_PATTERN)?;
            }
        }
        let stagger = profile.interval_ms / profile.devices as u64;
        let devices = (0..profile.devices)
            .map(|i| {
                let p = provision(profile.seed, i);
                let device_seed = derive_seed(profile.seed, 0x2000 + i as u64);
                let node = match profile.mode {
                    Variant::Psk => {
                        psk_edge.register(p.identity.dev_id(), p.psk);
                        Node::Baseline {
                            device: PskDevice::new(p.identity.dev_id(), p.psk, device_seed),
                        }
                    }
                    Variant::Dsekp => {
                        edge.register(p.identity.clone());
                        Node::Session {
                            state: DeviceState::new(p.identity, profile.device_config(), device_seed),
                            sent_in_session: 0,
                            pending: VecDeque::new(),
                        }
                    }
                };
                SimDevice {
                    node,
                    sensor: SensorSource::new(derive_seed(profile.seed, 0x3000 + i as u64)),
                    next_tick: EPOCH_START_MS + i as u64 * stagger,
                    ticks_left: profile.packets,
                }
            })
            .collect();
        Ok(Self {
            broker,
            clock: VirtualClock::new(EPOCH_START_MS),
            devices,
            edge,
            psk_edge,
            client_logs: Vec::new(),
            server_logs: Vec::new(),
            trace: Vec::new(),
            outcomes: Vec::new(),
            stats: RunStats::default(),
            audit: Audit::default(),
            interceptor: None,
            profile,
        })
    }

    pub fn profile(&self) -> &RunProfile {
        &self.profile
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    pub fn edge(&self) -> &EdgeSessionStore {
        &self.edge
    }

    pub fn trace(&self) -> &[Delivery] {
        &self.trace
    }

    pub fn outcomes(&self) -> &[OutcomeRecord] {
        &self.outcomes
    }

    pub fn stats(&self) -> &RunStats {
        &self.stats
    }

    pub fn server_logs(&self) -> &[ServerLogRecord] {
        &self.server_logs
    }

    pub fn set_interceptor(&mut self, interceptor: Box<dyn Interceptor>) {
        self.interceptor = Some(interceptor);
    }

    /// Schedules an adversarial message to arrive at `deliver_at`.
    pub fn inject(&mut self, topic: &str, body: Vec<u8>, deliver_at: u64) {
        self.broker
            .inject(topic, body, deliver_at.max(self.clock.now_ms()), Origin::Adversary);
    }

    fn next_device_event(&self, drain_deadline: u64) -> Option<u64> {
        self.devices
            .iter()
            .filter_map(|d| {
                let tick = (d.ticks_left > 0).then_some(d.next_tick);
                let timer = match &d.node {
                    Node::Session { state, pending, .. }
                        if d.ticks_left > 0 || !pending.is_empty() =>
                    {
                        state.next_deadline().filter(|&t| t <= drain_deadline)
                    }
                    _ => None,
                };
                match (tick, timer) {
                    (Some(a), Some(b)) => Some(a.min(b)),
                    (a, b) => a.or(b),
                }
            })
            .min()
    }

    fn drain_deadline(&self) -> u64 {
        let last_tick = EPOCH_START_MS
            + (self.profile.packets.saturating_sub(1)) * self.profile.interval_ms
            + self.profile.interval_ms;
        last_tick + DRAIN_WINDOW_MS
    }

    /// Runs until every device has produced its readings and all traffic
    /// has settled.
    pub fn run(&mut self) -> Result<(), SimError> {
        let drain_deadline = self.drain_deadline().max(self.clock.now_ms() + DRAIN_WINDOW_MS);
        loop {
            let next_dev = self.next_device_event(drain_deadline);
            let next_msg = self.broker.next_delivery_at();
            if next_dev.is_none() && next_msg.is_none() {
                break;
            }
            let t_end = match (next_dev, next_msg) {
                (Some(a), _) => a,
                (None, Some(b)) => b,
                (None, None) => unreachable!(),
            };
            let Simulation {
                profile,
                broker,
                clock,
                devices,
                edge,
                psk_edge,
                client_logs,
                server_logs,
                trace,
                outcomes,
                stats,
                audit,
                interceptor,
            } = self;
            let mut shared = Shared {
                profile,
                edge,
                psk_edge,
                client_logs,
                server_logs,
                outcomes,
                stats,
                audit,
                interceptor: interceptor.as_mut(),
            };
            let delivered = broker.run_until(clock, t_end, |b, d| shared.deliver(b, devices, d));
            trace.extend(delivered);
            if let Some(now) = next_dev {
                for dev in devices.iter_mut() {
                    if dev.node_has_deadline(now) {
                        shared.timers(broker, dev, now);
                    }
                    if dev.ticks_left > 0 && dev.next_tick == now {
                        dev.ticks_left -= 1;
                        dev.next_tick += profile.interval_ms;
                        shared.tick(broker, dev, now);
                    }
                }
            }
            if let Some(v) = &audit.violation {
                return Err(SimError::Invariant(v.clone()));
            }
        }
        Ok(())
    }

    /// Consumes the simulation into its artifacts.
    pub fn finish(mut self) -> RunOutput {
        self.stats.unsent = self.devices.iter().map(|d| match &d.node {
            Node::Session { pending, .. } => pending.len() as u64,
            Node::Baseline { .. } => 0,
        }).sum();
        self.stats.sessions_started = self
            .devices
            .iter()
            .map(|d| match &d.node {
                Node::Session { state, .. } => state.sessions_started(),
                Node::Baseline { .. } => 0,
            })
            .sum();
        metrics::annotate_throughput(&mut self.server_logs);
        RunOutput {
            sessions_json: (self.profile.mode == Variant::Dsekp).then(|| self.edge.to_json()),
            topic_stats: self.broker.stats().clone(),
            profile: self.profile,
            client_logs: self.client_logs,
            server_logs: self.server_logs,
            trace: self.trace,
            outcomes: self.outcomes,
            stats: self.stats,
        }
    }
}

impl SimDevice {
    fn node_has_deadline(&self, now: u64) -> bool {
        match &self.node {
            Node::Session { state, .. } => state.next_deadline().is_some_and(|t| t <= now),
            Node::Baseline { .. } => false,
        }
    }
}

/// Runs a profile to completion.
pub fn run(profile: RunProfile) -> Result<RunOutput, SimError> {
    let mut sim = Simulation::new(profile)?;
    sim.run()?;
    Ok(sim.finish())
}
