//! Edge-side verifier: session establishment, replay protection, bounded
//! per-device session storage and decryption.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::crypto::{
    self, AeadEnvelope, DeviceIdentity, SessionParams, SessionSecret, AES_KEY_LEN, DEV_NONCE_LEN,
};
use crate::metrics::{iso_timestamp, ServerLogRecord};
use crate::wire::{DsekpDataPacket, InitAck, InitMessage, PskDataPacket};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeConfig {
    /// Sessions retained per device; inserting beyond this evicts the oldest.
    pub capacity: usize,
    /// Accepted distance between an init timestamp and edge time, in seconds.
    pub max_skew_s: u64,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        Self {
            capacity: 5,
            max_skew_s: 120,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Error, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitRejection {
    #[error("unknown device")]
    UnknownDevice,
    #[error("init proof does not verify")]
    BadProof,
    #[error("init timestamp outside the freshness window")]
    StaleTimestamp,
    #[error("session counter already in use")]
    DuplicateCtr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Error, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataRejection {
    #[error("no live session for this device and counter")]
    UnknownSession,
    #[error("sequence number not above the highest accepted")]
    Replay,
    #[error("authentication failed")]
    AuthFailure,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("malformed session store: {0}")]
    Format(#[from] serde_json::Error),
    #[error("session store references unregistered device {0:?}")]
    UnknownDevice(String),
    #[error("bad dev_nonce_hex for {0:?}")]
    BadNonce(String),
    #[error("session store violates invariants: {0}")]
    Invariant(String),
}

#[derive(Debug, Clone)]
pub struct EdgeSessionEntry {
    pub params: SessionParams,
    pub secret: SessionSecret,
    /// 0 until the first packet is accepted.
    pub highest_seq_seen: u64,
    pub established_at: u64,
}

/// Change made to the store by an accepted init.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StoreDelta {
    pub inserted_ctr: u16,
    pub evicted_ctr: Option<u16>,
}

/// Result of handling an init: the ack to publish plus what happened.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InitOutcome {
    pub ack: InitAck,
    pub result: Result<StoreDelta, InitRejection>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PersistedSession {
    dev_id: String,
    sess_ctr: u16,
    t: u32,
    dev_nonce_hex: String,
    established_at: u64,
    highest_seq_seen: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct SeenInit {
    params: SessionParams,
}

#[derive(Debug, Clone)]
pub struct EdgeSessionStore {
    config: EdgeConfig,
    registry: BTreeMap<String, DeviceIdentity>,
    /// Most recent first.
    sessions: BTreeMap<String, VecDeque<EdgeSessionEntry>>,
    /// Accepted inits still inside the freshness window, so an evicted
    /// session cannot be re-established by replaying its init.
    recent_inits: BTreeMap<String, VecDeque<SeenInit>>,
}

#[allow(clippy::too_many_arguments)]
fn server_record(
    seq: u64,
    dev_id: &str,
    sessctr_id: Option<u16>,
    env: &AeadEnvelope,
    plaintext: &[u8],
    sendts_ms: u64,
    payload_size: usize,
    now_ms: u64,
) -> ServerLogRecord {
    ServerLogRecord {
        seq,
        timestamp: iso_timestamp(now_ms),
        dev_id: dev_id.to_owned(),
        sessctr_id,
        ciphertext: hex::encode(&env.ciphertext),
        iv: hex::encode(env.iv),
        tag: hex::encode(env.tag),
        plaintext: String::from_utf8_lossy(plaintext).into_owned(),
        recvts_ms: now_ms,
        latency_ms: now_ms as f64 - sendts_ms as f64,
        payload_size,
        bin_1s: now_ms / 1000,
        throughput: 0.0,
    }
}

impl EdgeSessionStore {
    pub fn new(config: EdgeConfig) -> Self {
        Self {
            config,
            registry: BTreeMap::new(),
            sessions: BTreeMap::new(),
            recent_inits: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &EdgeConfig {
        &self.config
    }

    pub fn register(&mut self, identity: DeviceIdentity) {
        self.registry.insert(identity.dev_id().to_owned(), identity);
    }

    pub fn session_count(&self, dev_id: &str) -> usize {
        self.sessions.get(dev_id).map_or(0, VecDeque::len)
    }

    /// Live session counters for a device, most recent first.
    pub fn session_ctrs(&self, dev_id: &str) -> Vec<u16> {
        self.sessions
            .get(dev_id)
            .map(|q| q.iter().map(|e| e.params.sess_ctr).collect())
            .unwrap_or_default()
    }

    pub fn session(&self, dev_id: &str, sess_ctr: u16) -> Option<&EdgeSessionEntry> {
        self.sessions
            .get(dev_id)?
            .iter()
            .find(|e| e.params.sess_ctr == sess_ctr)
    }

    fn prune_recent(&mut self, dev_id: &str, now_s: u64) {
        let skew = self.config.max_skew_s;
        if let Some(q) = self.recent_inits.get_mut(dev_id) {
            q.retain(|s| now_s.abs_diff(s.params.timestamp_t as u64) <= skew);
        }
    }

    /// Verifies an init and, if valid, stores the new session.
    pub fn handle_init(&mut self, msg: &InitMessage, now_ms: u64) -> InitOutcome {
        let result = self.try_init(msg, now_ms);
        let ack = match (&result, self.session(&msg.dev_id, msg.sess_ctr)) {
            (Ok(_), Some(entry)) => InitAck::accepted(&msg.dev_id, &entry.params, &entry.secret)
                .expect("dev_id validated by the wire decoder"),
            _ => InitAck::rejected(&msg.dev_id, msg.sess_ctr),
        };
        InitOutcome { ack, result }
    }

    fn try_init(&mut self, msg: &InitMessage, now_ms: u64) -> Result<StoreDelta, InitRejection> {
        let identity = self
            .registry
            .get(&msg.dev_id)
            .ok_or(InitRejection::UnknownDevice)?;
        let now_s = now_ms / 1000;
        if now_s.abs_diff(msg.timestamp_t as u64) > self.config.max_skew_s {
            return Err(InitRejection::StaleTimestamp);
        }
        let params = msg.params();
        let secret = crypto::derive_session_secret(identity, &params);
        let payload = msg.payload().map_err(|_| InitRejection::BadProof)?;
        if !crypto::verify_hmac_proof(&secret, &payload, &msg.init_proof) {
            return Err(InitRejection::BadProof);
        }

        self.prune_recent(&msg.dev_id, now_s);
        let live = self.session(&msg.dev_id, msg.sess_ctr).is_some();
        let replayed = self
            .recent_inits
            .get(&msg.dev_id)
            .is_some_and(|q| q.iter().any(|s| s.params == params));
        if live || replayed {
            return Err(InitRejection::DuplicateCtr);
        }

        self.recent_inits
            .entry(msg.dev_id.clone())
            .or_default()
            .push_back(SeenInit { params });
        let queue = self.sessions.entry(msg.dev_id.clone()).or_default();
        queue.push_front(EdgeSessionEntry {
            params,
            secret,
            highest_seq_seen: 0,
            established_at: now_ms,
        });
        let evicted_ctr = if queue.len() > self.config.capacity {
            queue.pop_back().map(|e| e.params.sess_ctr)
        } else {
            None
        };
        Ok(StoreDelta {
            inserted_ctr: msg.sess_ctr,
            evicted_ctr,
        })
    }

    /// Decrypts a session data packet. `payload_size` is the length of the
    /// packet as received on the wire.
    pub fn handle_data(
        &mut self,
        pkt: &DsekpDataPacket,
        payload_size: usize,
        now_ms: u64,
    ) -> Result<ServerLogRecord, DataRejection> {
        let entry = self
            .sessions
            .get_mut(&pkt.dev_id)
            .and_then(|q| q.iter_mut().find(|e| e.params.sess_ctr == pkt.sessctr_id))
            .ok_or(DataRejection::UnknownSession)?;
        if pkt.seq <= entry.highest_seq_seen {
            return Err(DataRejection::Replay);
        }
        let env = AeadEnvelope {
            iv: pkt.iv,
            ciphertext: pkt.ciphertext.clone(),
            tag: pkt.tag,
        };
        let aad = crypto::session_aad(&pkt.dev_id, pkt.sessctr_id, pkt.seq);
        let plaintext = crypto::aead_open(&entry.secret.aes_key(), &env, &aad)
            .map_err(|_| DataRejection::AuthFailure)?;
        entry.highest_seq_seen = pkt.seq;
        Ok(server_record(
            pkt.seq,
            &pkt.dev_id,
            Some(pkt.sessctr_id),
            &env,
            &plaintext,
            pkt.sendts_ms,
            payload_size,
            now_ms,
        ))
    }

    /// Checks the per-device bounds: at most `capacity` entries and no
    /// repeated counter.
    pub fn check_invariants(&self) -> Result<(), String> {
        for (dev, q) in &self.sessions {
            if q.len() > self.config.capacity {
                return Err(format!("{dev}: {} sessions exceed capacity {}", q.len(), self.config.capacity));
            }
            let ctrs: BTreeSet<u16> = q.iter().map(|e| e.params.sess_ctr).collect();
            if ctrs.len() != q.len() {
                return Err(format!("{dev}: repeated session counter"));
            }
        }
        Ok(())
    }

    /// Serializes session metadata. Secrets are not written; they are
    /// re-derived from the registry on load.
    pub fn to_json(&self) -> String {
        let rows: Vec<PersistedSession> = self
            .sessions
            .iter()
            .flat_map(|(dev, q)| {
                q.iter().map(move |e| PersistedSession {
                    dev_id: dev.clone(),
                    sess_ctr: e.params.sess_ctr,
                    t: e.params.timestamp_t,
                    dev_nonce_hex: hex::encode(e.params.dev_nonce),
                    established_at: e.established_at,
                    highest_seq_seen: e.highest_seq_seen,
                })
            })
            .collect();
        serde_json::to_string_pretty(&rows).expect("plain data serializes")
    }

    /// Restores sessions written by [`Self::to_json`] into a store whose
    /// registry is already populated.
    pub fn load_json(&mut self, json: &str) -> Result<(), StoreError> {
        let rows: Vec<PersistedSession> = serde_json::from_str(json)?;
        let mut sessions: BTreeMap<String, VecDeque<EdgeSessionEntry>> = BTreeMap::new();
        for r in rows {
            let identity = self
                .registry
                .get(&r.dev_id)
                .ok_or_else(|| StoreError::UnknownDevice(r.dev_id.clone()))?;
            let dev_nonce: [u8; DEV_NONCE_LEN] = hex::decode(&r.dev_nonce_hex)
                .ok()
                .and_then(|v| v.try_into().ok())
                .ok_or_else(|| StoreError::BadNonce(r.dev_id.clone()))?;
            let params = SessionParams {
                dev_nonce,
                sess_ctr: r.sess_ctr,
                timestamp_t: r.t,
            };
            sessions.entry(r.dev_id).or_default().push_back(EdgeSessionEntry {
                secret: crypto::derive_session_secret(identity, &params),
                params,
                highest_seq_seen: r.highest_seq_seen,
                established_at: r.established_at,
            });
        }
        let previous = std::mem::replace(&mut self.sessions, sessions);
        if let Err(e) = self.check_invariants() {
            self.sessions = previous;
            return Err(StoreError::Invariant(e));
        }
        Ok(())
    }
}

/// Accepted baseline packet. Duplicates are accepted but flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct PskAccepted {
    pub record: ServerLogRecord,
    pub duplicate: bool,
}

/// Baseline receiver: one static key per device, no replay rule.
#[derive(Debug, Clone, Default)]
pub struct PskEdge {
    keys: BTreeMap<String, [u8; AES_KEY_LEN]>,
    seen: BTreeMap<String, BTreeSet<u64>>,
}

impl PskEdge {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, dev_id: impl Into<String>, psk: [u8; AES_KEY_LEN]) {
        self.keys.insert(dev_id.into(), psk);
    }

    pub fn handle_psk_data(
        &mut self,
        pkt: &PskDataPacket,
        payload_size: usize,
        now_ms: u64,
    ) -> Result<PskAccepted, DataRejection> {
        let key = self.keys.get(&pkt.dev_id).ok_or(DataRejection::UnknownSession)?;
        let env = AeadEnvelope {
            iv: pkt.iv,
            ciphertext: pkt.ciphertext.clone(),
            tag: pkt.tag,
        };
        let plaintext = crypto::aead_open(key, &env, &crypto::psk_aad(&pkt.dev_id, pkt.seq))
            .map_err(|_| DataRejection::AuthFailure)?;
        let duplicate = !self.seen.entry(pkt.dev_id.clone()).or_default().insert(pkt.seq);
        Ok(PskAccepted {
            record: server_record(
                pkt.seq,
                &pkt.dev_id,
                None,
                &env,
                &plaintext,
                pkt.sendts_ms,
                payload_size,
                now_ms,
            ),
            duplicate,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::device::{DeviceConfig, DeviceState, PskDevice};
    use crate::wire::AckStatus;

    const T0: u64 = 1_700_000_000_000;

    fn identity() -> DeviceIdentity {
        DeviceIdentity::new("esp32-01", [7u8; 32], [9u8; 16]).unwrap()
    }

    fn setup() -> (EdgeSessionStore, DeviceState) {
        let mut edge = EdgeSessionStore::new(EdgeConfig::default());
        edge.register(identity());
        (edge, DeviceState::new(identity(), DeviceConfig::default(), 1))
    }

    fn establish(edge: &mut EdgeSessionStore, dev: &mut DeviceState, now: u64) -> u16 {
        let init = dev.begin_session(now);
        let out = edge.handle_init(&init, now + 100);
        assert!(out.result.is_ok(), "{:?}", out.result);
        dev.on_ack(&out.ack, now + 200).unwrap();
        init.sess_ctr
    }

    #[test]
    fn honest_init_is_acked() {
        let (mut edge, mut dev) = setup();
        assert_eq!(edge.session_count("esp32-01"), 0);
        establish(&mut edge, &mut dev, T0);
        assert_eq!(edge.session_count("esp32-01"), 1);
    }

    #[test]
    fn wrong_secret_is_bad_proof() {
        let (mut edge, _) = setup();
        let imposter = DeviceIdentity::new("esp32-01", [8u8; 32], [9u8; 16]).unwrap();
        let mut dev = DeviceState::new(imposter, DeviceConfig::default(), 2);
        let out = edge.handle_init(&dev.begin_session(T0), T0);
        assert_eq!(out.result, Err(InitRejection::BadProof));
        assert_eq!(out.ack.status, AckStatus::Rejected);
        assert_eq!(out.ack.ack_proof, None);
        assert_eq!(edge.session_count("esp32-01"), 0);
    }

    #[test]
    fn unknown_device_and_stale_timestamp() {
        let (mut edge, mut dev) = setup();
        let init = dev.begin_session(T0);
        let mut stranger = init.clone();
        stranger.dev_id = "other".into();
        assert_eq!(edge.handle_init(&stranger, T0).result, Err(InitRejection::UnknownDevice));
        assert_eq!(
            edge.handle_init(&init, T0 + 121_000).result,
            Err(InitRejection::StaleTimestamp)
        );
        assert_eq!(
            edge.handle_init(&init, T0 - 121_000).result,
            Err(InitRejection::StaleTimestamp)
        );
        assert!(edge.handle_init(&init, T0 + 120_000).result.is_ok());
    }

    #[test]
    fn duplicate_init_does_not_add_entry() {
        let (mut edge, mut dev) = setup();
        let init = dev.begin_session(T0);
        assert!(edge.handle_init(&init, T0).result.is_ok());
        assert_eq!(edge.handle_init(&init, T0 + 1).result, Err(InitRejection::DuplicateCtr));
        assert_eq!(edge.session_count("esp32-01"), 1);
    }

    #[test]
    fn sixth_session_evicts_first() {
        let (mut edge, mut dev) = setup();
        let ctrs: Vec<u16> = (0..6).map(|i| establish(&mut edge, &mut dev, T0 + i * 1000)).collect();
        assert_eq!(edge.session_count("esp32-01"), 5);
        let mut expect: Vec<u16> = ctrs[1..].to_vec();
        expect.reverse();
        assert_eq!(edge.session_ctrs("esp32-01"), expect);
    }

    #[test]
    fn evicted_init_replay_inside_window_is_rejected() {
        let (mut edge, mut dev) = setup();
        let first = dev.begin_session(T0);
        edge.handle_init(&first, T0);
        for i in 1..6 {
            establish(&mut edge, &mut dev, T0 + i * 1000);
        }
        assert!(edge.session(&first.dev_id, first.sess_ctr).is_none());
        assert_eq!(edge.handle_init(&first, T0 + 7000).result, Err(InitRejection::DuplicateCtr));
    }

    #[test]
    fn data_accept_replay_and_eviction() {
        let (mut edge, mut dev) = setup();
        establish(&mut edge, &mut dev, T0);
        let p1 = dev.next_data_packet(b"T=21.0C,H=40.0%", T0 + 2000).unwrap();
        let rec = edge.handle_data(&p1, 170, T0 + 2283).unwrap();
        assert_eq!(rec.latency_ms, 283.0);
        assert_eq!(rec.plaintext, "T=21.0C,H=40.0%");
        assert_eq!(rec.bin_1s, (T0 + 2283) / 1000);
        assert_eq!(edge.handle_data(&p1, 170, T0 + 2300), Err(DataRejection::Replay));

        for i in 1..=5 {
            dev.simulate_reboot();
            establish(&mut edge, &mut dev, T0 + 10_000 * i);
        }
        assert_eq!(edge.handle_data(&p1, 170, T0 + 60_000), Err(DataRejection::UnknownSession));
    }

    #[test]
    fn failed_auth_does_not_advance_window() {
        let (mut edge, mut dev) = setup();
        establish(&mut edge, &mut dev, T0);
        let p = dev.next_data_packet(b"abc", T0).unwrap();
        let mut bad = p.clone();
        bad.tag[3] ^= 1;
        assert_eq!(edge.handle_data(&bad, 1, T0), Err(DataRejection::AuthFailure));
        assert!(edge.handle_data(&p, 1, T0).is_ok());
    }

    #[test]
    fn persistence_roundtrip_rederives_secrets() {
        let (mut edge, mut dev) = setup();
        for i in 0..3 {
            establish(&mut edge, &mut dev, T0 + i * 1000);
        }
        let p = dev.next_data_packet(b"x", T0 + 5000).unwrap();
        edge.handle_data(&p, 1, T0 + 5100).unwrap();
        let json = edge.to_json();
        assert!(!json.contains(&hex::encode(edge.session("esp32-01", p.sessctr_id).unwrap().secret.bytes())));

        let mut restored = EdgeSessionStore::new(EdgeConfig::default());
        restored.register(identity());
        restored.load_json(&json).unwrap();
        assert_eq!(restored.session_ctrs("esp32-01"), edge.session_ctrs("esp32-01"));
        assert_eq!(restored.handle_data(&p, 1, T0 + 6000), Err(DataRejection::Replay));
        let p2 = dev.next_data_packet(b"y", T0 + 7000).unwrap();
        assert!(restored.handle_data(&p2, 1, T0 + 7100).is_ok());
        assert_eq!(restored.to_json().len(), json.len());

        let mut empty = EdgeSessionStore::new(EdgeConfig::default());
        assert!(matches!(empty.load_json(&json), Err(StoreError::UnknownDevice(_))));
    }

    #[test]
    fn psk_duplicates_flagged_not_rejected() {
        let mut edge = PskEdge::new();
        edge.register("esp32-01", [3; 16]);
        let mut dev = PskDevice::new("esp32-01", [3; 16], 5);
        let p = dev.next_psk_packet(b"hello", T0);
        assert!(!edge.handle_psk_data(&p, 10, T0 + 5).unwrap().duplicate);
        assert!(edge.handle_psk_data(&p, 10, T0 + 9).unwrap().duplicate);
        let mut bad = p.clone();
        bad.tag[0] ^= 0x01;
        assert_eq!(edge.handle_psk_data(&bad, 10, T0), Err(DataRejection::AuthFailure));
    }
}
