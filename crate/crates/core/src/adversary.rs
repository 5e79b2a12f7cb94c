//! Network adversary: passive capture plus replay, tampering, forgery and
//! splicing against a running simulation.

use std::collections::{BTreeMap, BTreeSet};
use std::str::FromStr;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{DEV_NONCE_LEN, PROOF_LEN};
use crate::metrics::Variant;
use crate::sim::{self, Interceptor, RunProfile, SimError, Simulation};
use crate::transport::{Delivery, Origin};
use crate::wire::{self, InitMessage, WireMessage};

/// Spacing between archive-based injections.
const INJECT_SPACING_MS: u64 = 10;
/// Reboot cadence forced for splicing when the profile has none.
const SPLICE_REBOOT_EVERY: u64 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    ReplayData,
    ReplayInit,
    TamperBitflip,
    ForgeInit,
    CrossSessionSplice,
}

impl AttackKind {
    pub const ALL: [AttackKind; 5] = [
        AttackKind::ReplayData,
        AttackKind::ReplayInit,
        AttackKind::TamperBitflip,
        AttackKind::ForgeInit,
        AttackKind::CrossSessionSplice,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::ReplayData => "replay_data",
            AttackKind::ReplayInit => "replay_init",
            AttackKind::TamperBitflip => "tamper_bitflip",
            AttackKind::ForgeInit => "forge_init",
            AttackKind::CrossSessionSplice => "cross_session_splice",
        }
    }

    /// Live attacks act on packets as they are published; the others work
    /// from the capture after honest traffic ends.
    pub fn is_live(self) -> bool {
        matches!(self, AttackKind::TamperBitflip | AttackKind::CrossSessionSplice)
    }
}

impl FromStr for AttackKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AttackKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown attack {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackScenario {
    pub kind: AttackKind,
    pub count: u64,
    pub seed: u64,
}

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("capture holds no {0} messages to replay")]
    EmptyArchive(&'static str),
    #[error("{0} does not apply to the {1} variant")]
    NotApplicable(&'static str, &'static str),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// One captured message.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Captured {
    pub topic: String,
    pub at: u64,
    #[serde(with = "crate::transport::body_text")]
    pub body: Vec<u8>,
}

/// Everything the adversary observed on the broker.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PacketArchive {
    pub messages: Vec<Captured>,
}

impl PacketArchive {
    pub fn on_topic<'a>(&'a self, topic: &'a str) -> impl Iterator<Item = &'a Captured> + 'a {
        self.messages.iter().filter(move |m| m.topic == topic)
    }
}

/// Passive capture of every delivery in a trace.
pub fn capture(trace: &[Delivery]) -> PacketArchive {
    PacketArchive {
        messages: trace
            .iter()
            .map(|d| Captured {
                topic: d.topic.clone(),
                at: d.deliver_at,
                body: d.body.clone(),
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub kind: AttackKind,
    pub variant: Variant,
    pub injected: u64,
    pub accepted: u64,
    pub rejected_by_reason: BTreeMap<String, u64>,
    pub honest_sent: u64,
    pub honest_accepted: u64,
    pub honest_reliability_pct: f64,
}

/// Flips one random bit of the iv, ciphertext or tag of data packets.
struct BitFlipper {
    rng: ChaCha8Rng,
    budget: u64,
}

fn flip_bit(rng: &mut ChaCha8Rng, iv: &mut [u8], ct: &mut [u8], tag: &mut [u8]) {
    let total = (iv.len() + ct.len() + tag.len()) * 8;
    let mut bit = rng.gen_range(0..total);
    for field in [iv, ct, tag] {
        if bit < field.len() * 8 {
            field[bit / 8] ^= 1 << (bit % 8);
            return;
        }
        bit -= field.len() * 8;
    }
}

impl Interceptor for BitFlipper {
    fn on_publish(&mut self, topic: &str, body: &[u8], _at_ms: u64) -> Vec<(String, Vec<u8>)> {
        if self.budget == 0 {
            return Vec::new();
        }
        let Ok(mut msg) = wire::decode(topic, body) else {
            return Vec::new();
        };
        match &mut msg {
            WireMessage::DsekpData(p) => flip_bit(&mut self.rng, &mut p.iv, &mut p.ciphertext, &mut p.tag),
            WireMessage::PskData(p) => flip_bit(&mut self.rng, &mut p.iv, &mut p.ciphertext, &mut p.tag),
            _ => return Vec::new(),
        }
        self.budget -= 1;
        vec![(topic.to_owned(), wire::encode(&msg))]
    }
}

/// Re-labels a packet from an earlier session with the current session
/// counter and sequence number.
struct Splicer {
    rng: ChaCha8Rng,
    budget: u64,
    /// dev_id -> packets seen so far, oldest first
    seen: BTreeMap<String, Vec<wire::DsekpDataPacket>>,
}

impl Interceptor for Splicer {
    fn on_publish(&mut self, topic: &str, body: &[u8], _at_ms: u64) -> Vec<(String, Vec<u8>)> {
        let Ok(WireMessage::DsekpData(pkt)) = wire::decode(topic, body) else {
            return Vec::new();
        };
        let seen = self.seen.entry(pkt.dev_id.clone()).or_default();
        let older: Vec<&wire::DsekpDataPacket> =
            seen.iter().filter(|p| p.sessctr_id != pkt.sessctr_id).collect();
        let mut out = Vec::new();
        if self.budget > 0 && !older.is_empty() {
            let donor = older[self.rng.gen_range(0..older.len())];
            let spliced = wire::DsekpDataPacket {
                sessctr_id: pkt.sessctr_id,
                seq: pkt.seq,
                ..donor.clone()
            };
            self.budget -= 1;
            out.push((topic.to_owned(), wire::encode(&WireMessage::DsekpData(spliced))));
        }
        seen.push(pkt);
        out
    }
}

fn forged_init(rng: &mut ChaCha8Rng, dev_id: &str, now_ms: u64) -> InitMessage {
    let mut dev_nonce = [0u8; DEV_NONCE_LEN];
    let mut init_proof = [0u8; PROOF_LEN];
    rng.fill_bytes(&mut dev_nonce);
    rng.fill_bytes(&mut init_proof);
    InitMessage {
        dev_id: dev_id.to_owned(),
        sess_ctr: rng.gen(),
        timestamp_t: (now_ms / 1000) as u32,
        dev_nonce,
        init_proof,
    }
}

/// Arms the simulation for a live attack. Archive-based attacks need no
/// preparation.
pub fn prepare(scenario: &AttackScenario, sim: &mut Simulation) {
    let rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    match scenario.kind {
        AttackKind::TamperBitflip => sim.set_interceptor(Box::new(BitFlipper {
            rng,
            budget: scenario.count,
        })),
        AttackKind::CrossSessionSplice => sim.set_interceptor(Box::new(Splicer {
            rng,
            budget: scenario.count,
            seen: BTreeMap::new(),
        })),
        _ => {}
    }
}

/// Injects archive-based attack traffic after the honest run, drains the
/// simulation and tallies what the edge did with adversarial deliveries.
pub fn execute(
    scenario: &AttackScenario,
    archive: &PacketArchive,
    sim: &mut Simulation,
) -> Result<AttackReport, AttackError> {
    let variant = sim.profile().mode;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed ^ 0xA77A_C4ED);
    let start = sim.now_ms() + 1_000;
    let mut injections: Vec<(String, Vec<u8>)> = Vec::new();
    match scenario.kind {
        AttackKind::ReplayData => {
            let topic = match variant {
                Variant::Psk => wire::PSK_DATA_TOPIC,
                Variant::Dsekp => wire::DATA_TOPIC,
            };
            let pool: Vec<&Captured> = archive.on_topic(topic).collect();
            if pool.is_empty() {
                return Err(AttackError::EmptyArchive("data"));
            }
            for i in 0..scenario.count as usize {
                injections.push((topic.to_owned(), pool[i % pool.len()].body.clone()));
            }
        }
        AttackKind::ReplayInit => {
            if variant == Variant::Psk {
                return Err(AttackError::NotApplicable("replay_init", "psk"));
            }
            let pool: Vec<&Captured> = archive.on_topic(wire::INIT_TOPIC).collect();
            if pool.is_empty() {
                return Err(AttackError::EmptyArchive("init"));
            }
            for i in 0..scenario.count as usize {
                injections.push((wire::INIT_TOPIC.to_owned(), pool[i % pool.len()].body.clone()));
            }
        }
        AttackKind::ForgeInit => {
            if variant == Variant::Psk {
                return Err(AttackError::NotApplicable("forge_init", "psk"));
            }
            let devices = sim.profile().devices;
            for i in 0..scenario.count {
                let dev_id = sim::provision(sim.profile().seed, (i % devices as u64) as u32)
                    .identity
                    .dev_id()
                    .to_owned();
                let at = start + i * INJECT_SPACING_MS;
                let msg = forged_init(&mut rng, &dev_id, at);
                injections.push((wire::INIT_TOPIC.to_owned(), wire::encode(&WireMessage::Init(msg))));
            }
        }
        AttackKind::TamperBitflip | AttackKind::CrossSessionSplice => {}
    }
    for (i, (topic, body)) in injections.into_iter().enumerate() {
        sim.inject(&topic, body, start + i as u64 * INJECT_SPACING_MS);
    }
    sim.run()?;
    Ok(tally(scenario.kind, sim))
}

fn tally(kind: AttackKind, sim: &Simulation) -> AttackReport {
    let mut report = AttackReport {
        kind,
        variant: sim.profile().mode,
        injected: 0,
        accepted: 0,
        rejected_by_reason: BTreeMap::new(),
        honest_sent: sim.stats().sent,
        honest_accepted: 0,
        honest_reliability_pct: 0.0,
    };
    for o in sim.outcomes().iter().filter(|o| o.origin == Origin::Adversary) {
        report.injected += 1;
        match o.outcome.reason() {
            None => report.accepted += 1,
            Some(r) => *report.rejected_by_reason.entry(r.to_owned()).or_default() += 1,
        }
    }
    // Accepted honest data packets, counted once per (device, session, seq).
    let accepted_unique: BTreeSet<_> = sim
        .server_logs()
        .iter()
        .map(|r| r.packet_key())
        .collect();
    let honest_client: BTreeSet<_> = sim
        .trace()
        .iter()
        .filter(|d| d.origin == Origin::Honest)
        .filter_map(|d| match wire::decode(&d.topic, &d.body) {
            Ok(WireMessage::DsekpData(p)) => Some((p.dev_id, Some(p.sessctr_id), p.seq)),
            Ok(WireMessage::PskData(p)) => Some((p.dev_id, None, p.seq)),
            _ => None,
        })
        .collect();
    report.honest_accepted = accepted_unique.intersection(&honest_client).count() as u64;
    if report.honest_sent > 0 {
        report.honest_reliability_pct =
            100.0 * report.honest_accepted as f64 / report.honest_sent as f64;
    }
    report
}

/// Runs an honest simulation of `profile` under `scenario` and reports the
/// outcome. Live attacks get enough honest traffic to use their budget.
pub fn run_attack(profile: RunProfile, scenario: &AttackScenario) -> Result<AttackReport, AttackError> {
    let mut profile = profile;
    if scenario.kind == AttackKind::CrossSessionSplice {
        if profile.mode == Variant::Psk {
            return Err(AttackError::NotApplicable("cross_session_splice", "psk"));
        }
        let k = *profile.reboot_every.get_or_insert(SPLICE_REBOOT_EVERY);
        let per_device = scenario.count.div_ceil(profile.devices as u64);
        profile.packets = profile.packets.max(per_device + k);
    } else if scenario.kind == AttackKind::TamperBitflip {
        profile.packets = profile.packets.max(scenario.count.div_ceil(profile.devices as u64));
    }
    let mut sim = Simulation::new(profile)?;
    prepare(scenario, &mut sim);
    sim.run()?;
    let archive = capture(sim.trace());
    execute(scenario, &archive, &mut sim)
}
