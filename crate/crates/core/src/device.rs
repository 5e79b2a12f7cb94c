//! Device-side protocol state machine.
//!
//! A device moves `Idle -> AwaitAck -> Active` and back to `Idle` on reboot
//! or rotation. Only one session is live at a time, and data is only ever
//! sealed under an acknowledged session.

use std::collections::VecDeque;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::crypto::{
    self, DeviceIdentity, SessionParams, SessionSecret, AES_KEY_LEN, IV_LEN, IV_PREFIX_LEN,
};
use crate::wire::{self, AckStatus, DsekpDataPacket, InitAck, InitMessage, PskDataPacket};

/// How many of its own recent counters a device avoids when drawing a new one.
const RECENT_CTRS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeviceConfig {
    /// Time to wait for an ack before re-sending the init.
    pub ack_timeout_ms: u64,
    /// Re-sends of the same init before starting over with fresh parameters.
    pub max_init_resends: u32,
    /// Proactive rotation after this long in one session; `None` disables it.
    pub session_timeout_ms: Option<u64>,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self {
            ack_timeout_ms: 5_000,
            max_init_resends: 3,
            session_timeout_ms: Some(3_600_000),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Idle,
    AwaitAck,
    Active,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AckError {
    #[error("ack proof does not verify")]
    BadProof,
    #[error("ack is for session counter {got}, current is {expected}")]
    CtrMismatch { expected: u16, got: u16 },
    #[error("edge rejected the session")]
    Rejected,
    #[error("no ack is pending (phase {0:?})")]
    NotAwaiting(Phase),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DeviceError {
    #[error("device has no active session (phase {0:?})")]
    NotActive(Phase),
}

#[derive(Debug, Clone)]
pub struct SessionContext {
    pub params: SessionParams,
    pub secret: SessionSecret,
    pub iv_prefix: [u8; IV_PREFIX_LEN],
    /// Next sequence number to send; starts at 1.
    pub msg_seq: u64,
    pub init_sent_at: u64,
    pub established_at: Option<u64>,
    pub init: InitMessage,
    pub resends: u32,
}

/// What a device wants to do after a timer check.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TimerAction {
    /// Re-send the pending init unchanged.
    Resend(InitMessage),
    /// A fresh session was started; publish its init.
    Restart(InitMessage),
}

/// DHT11-style synthetic readings, `T=<t.t>C,H=<h.h>%`.
#[derive(Debug, Clone)]
pub struct SensorSource {
    rng: ChaCha8Rng,
}

impl SensorSource {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_reading(&mut self) -> String {
        let t: f64 = self.rng.gen_range(20.0..35.0);
        let h: f64 = self.rng.gen_range(30.0..90.0);
        format!("T={t:.1}C,H={h:.1}%")
    }
}

#[derive(Debug, Clone)]
pub struct DeviceState {
    identity: DeviceIdentity,
    config: DeviceConfig,
    phase: Phase,
    session: Option<SessionContext>,
    rng: ChaCha8Rng,
    recent_ctrs: VecDeque<u16>,
    sessions_started: u64,
}

impl DeviceState {
    pub fn new(identity: DeviceIdentity, config: DeviceConfig, seed: u64) -> Self {
        Self {
            identity,
            config,
            phase: Phase::Idle,
            session: None,
            rng: ChaCha8Rng::seed_from_u64(seed),
            recent_ctrs: VecDeque::with_capacity(RECENT_CTRS),
            sessions_started: 0,
        }
    }

    pub fn identity(&self) -> &DeviceIdentity {
        &self.identity
    }

    pub fn dev_id(&self) -> &str {
        self.identity.dev_id()
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn session(&self) -> Option<&SessionContext> {
        self.session.as_ref()
    }

    pub fn sessions_started(&self) -> u64 {
        self.sessions_started
    }

    fn fresh_ctr(&mut self) -> u16 {
        loop {
            let ctr: u16 = self.rng.gen();
            if !self.recent_ctrs.contains(&ctr) {
                if self.recent_ctrs.len() == RECENT_CTRS {
                    self.recent_ctrs.pop_front();
                }
                self.recent_ctrs.push_back(ctr);
                return ctr;
            }
        }
    }

    /// Starts a new session from any phase, discarding the current one.
    /// Returns the init message to publish on `dsekp/init`.
    pub fn begin_session(&mut self, now_ms: u64) -> InitMessage {
        let mut dev_nonce = [0u8; crypto::DEV_NONCE_LEN];
        self.rng.fill_bytes(&mut dev_nonce);
        let sess_ctr = self.fresh_ctr();
        let mut iv_prefix = [0u8; IV_PREFIX_LEN];
        self.rng.fill_bytes(&mut iv_prefix);
        let params = SessionParams {
            dev_nonce,
            sess_ctr,
            timestamp_t: (now_ms / 1000) as u32,
        };
        let secret = crypto::derive_session_secret(&self.identity, &params);
        let init = InitMessage::sign(self.identity.dev_id(), &params, &secret)
            .expect("identity dev_id is validated at construction");
        self.session = Some(SessionContext {
            params,
            secret,
            iv_prefix,
            msg_seq: 1,
            init_sent_at: now_ms,
            established_at: None,
            init: init.clone(),
            resends: 0,
        });
        self.phase = Phase::AwaitAck;
        self.sessions_started += 1;
        init
    }

    pub fn on_ack(&mut self, ack: &InitAck, now_ms: u64) -> Result<(), AckError> {
        if self.phase != Phase::AwaitAck {
            return Err(AckError::NotAwaiting(self.phase));
        }
        let session = self.session.as_mut().expect("AwaitAck implies a session");
        if ack.dev_id != self.identity.dev_id() || ack.sess_ctr != session.params.sess_ctr {
            return Err(AckError::CtrMismatch {
                expected: session.params.sess_ctr,
                got: ack.sess_ctr,
            });
        }
        if ack.status == AckStatus::Rejected {
            return Err(AckError::Rejected);
        }
        let payload = wire::ack_proof_payload(self.identity.dev_id(), &session.params)
            .expect("identity dev_id is validated at construction");
        let proof = ack.ack_proof.as_ref().ok_or(AckError::BadProof)?;
        if !crypto::verify_hmac_proof(&session.secret, &payload, proof) {
            return Err(AckError::BadProof);
        }
        session.established_at = Some(now_ms);
        self.phase = Phase::Active;
        Ok(())
    }

    /// Seals `plaintext` under the active session.
    pub fn next_data_packet(
        &mut self,
        plaintext: &[u8],
        now_ms: u64,
    ) -> Result<DsekpDataPacket, DeviceError> {
        if self.phase != Phase::Active {
            return Err(DeviceError::NotActive(self.phase));
        }
        let session = self.session.as_mut().expect("Active implies a session");
        let seq = session.msg_seq;
        let iv = crypto::make_iv(&session.iv_prefix, seq);
        let aad = crypto::session_aad(self.identity.dev_id(), session.params.sess_ctr, seq);
        let env = crypto::aead_seal(&session.secret.aes_key(), &iv, &aad, plaintext);
        session.msg_seq += 1;
        Ok(DsekpDataPacket {
            seq,
            dev_id: self.identity.dev_id().to_owned(),
            sessctr_id: session.params.sess_ctr,
            ciphertext: env.ciphertext,
            iv: env.iv,
            tag: env.tag,
            sendts_ms: now_ms,
        })
    }

    /// Drops any session; the next `begin_session` derives a new key.
    pub fn simulate_reboot(&mut self) {
        self.session = None;
        self.phase = Phase::Idle;
    }

    /// Earliest time at which [`Self::poll_timers`] may act.
    pub fn next_deadline(&self) -> Option<u64> {
        let s = self.session.as_ref()?;
        match self.phase {
            Phase::AwaitAck => Some(s.init_sent_at + self.config.ack_timeout_ms),
            Phase::Active => self
                .config
                .session_timeout_ms
                .map(|t| s.established_at.expect("active session is established") + t),
            Phase::Idle => None,
        }
    }

    /// Applies the ack-timeout and session-timeout policies.
    pub fn poll_timers(&mut self, now_ms: u64) -> Option<TimerAction> {
        let deadline = self.next_deadline()?;
        if now_ms < deadline {
            return None;
        }
        match self.phase {
            Phase::AwaitAck => {
                let max = self.config.max_init_resends;
                let s = self.session.as_mut().expect("AwaitAck implies a session");
                if s.resends < max {
                    s.resends += 1;
                    s.init_sent_at = now_ms;
                    Some(TimerAction::Resend(s.init.clone()))
                } else {
                    self.simulate_reboot();
                    Some(TimerAction::Restart(self.begin_session(now_ms)))
                }
            }
            Phase::Active => {
                self.simulate_reboot();
                Some(TimerAction::Restart(self.begin_session(now_ms)))
            }
            Phase::Idle => None,
        }
    }
}

/// Baseline device sealing every packet under one static key.
#[derive(Debug, Clone)]
pub struct PskDevice {
    dev_id: String,
    psk: [u8; AES_KEY_LEN],
    next_seq: u64,
    rng: ChaCha8Rng,
}

impl PskDevice {
    pub fn new(dev_id: impl Into<String>, psk: [u8; AES_KEY_LEN], seed: u64) -> Self {
        Self {
            dev_id: dev_id.into(),
            psk,
            next_seq: 1,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dev_id(&self) -> &str {
        &self.dev_id
    }

    /// Random 12-byte IV per packet; `seq` runs for the device's lifetime.
    pub fn next_psk_packet(&mut self, plaintext: &[u8], now_ms: u64) -> PskDataPacket {
        let mut iv = [0u8; IV_LEN];
        self.rng.fill_bytes(&mut iv);
        let seq = self.next_seq;
        self.next_seq += 1;
        let env = crypto::aead_seal(&self.psk, &iv, &crypto::psk_aad(&self.dev_id, seq), plaintext);
        PskDataPacket {
            seq,
            dev_id: self.dev_id.clone(),
            ciphertext: env.ciphertext,
            iv: env.iv,
            tag: env.tag,
            sendts_ms: now_ms,
        }
    }
}
