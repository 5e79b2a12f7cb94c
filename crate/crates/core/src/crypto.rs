//! Symmetric primitives and per-session key derivation.
//!
//! A session secret is derived with HKDF-SHA256 from the device's long-term
//! secret and fresh per-session entropy:
//!
//! ```text
//! IKM           = dev_secret || dev_nonce (12) || sess_ctr (2, BE) || t (4, BE)
//! SessionSecret = HKDF-SHA256(salt = edge_salt, ikm = IKM, info = "", L = 32)
//! AES key       = SessionSecret[0..16]
//! ```
//!
//! Everything in here is a pure function of its inputs.

use std::fmt;

use aes_gcm::aead::{AeadInPlace, KeyInit};
use aes_gcm::{Aes128Gcm, Nonce, Tag};
use hkdf::Hkdf;
use hmac::{Hmac, Mac};
use sha2::Sha256;
use subtle::ConstantTimeEq;
use thiserror::Error;

pub const DEV_NONCE_LEN: usize = 12;
pub const SESSION_SECRET_LEN: usize = 32;
pub const AES_KEY_LEN: usize = 16;
pub const IV_LEN: usize = 12;
pub const IV_PREFIX_LEN: usize = 4;
pub const TAG_LEN: usize = 16;
pub const PROOF_LEN: usize = 32;
/// Minimum length of `dev_secret` and `edge_salt`.
pub const MIN_SECRET_LEN: usize = 16;

type HmacSha256 = Hmac<Sha256>;

pub type Proof = [u8; PROOF_LEN];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CryptoError {
    #[error("invalid device id {0:?}: must be non-empty with no '/', '#', '+', NUL or whitespace")]
    InvalidDeviceId(String),
    #[error("{field} must be at least {min} bytes, got {len}")]
    ShortSecret {
        field: &'static str,
        min: usize,
        len: usize,
    },
    #[error("authentication failed")]
    AuthFailure,
    #[error("HKDF output of {0} bytes exceeds 8160")]
    OutputLength(usize),
}

/// Returns true if `dev_id` can be used as a single pub/sub topic segment.
pub fn is_valid_dev_id(dev_id: &str) -> bool {
    !dev_id.is_empty()
        && !dev_id
            .chars()
            .any(|c| matches!(c, '/' | '#' | '+' | '\0') || c.is_whitespace())
}

/// Long-term credentials shared out-of-band between a device and the edge.
#[derive(Clone, PartialEq, Eq)]
pub struct DeviceIdentity {
    dev_id: String,
    dev_secret: Vec<u8>,
    edge_salt: Vec<u8>,
}

impl DeviceIdentity {
    pub fn new(
        dev_id: impl Into<String>,
        dev_secret: impl Into<Vec<u8>>,
        edge_salt: impl Into<Vec<u8>>,
    ) -> Result<Self, CryptoError> {
        let dev_id = dev_id.into();
        let dev_secret = dev_secret.into();
        let edge_salt = edge_salt.into();
        if !is_valid_dev_id(&dev_id) {
            return Err(CryptoError::InvalidDeviceId(dev_id));
        }
        if dev_secret.len() < MIN_SECRET_LEN {
            return Err(CryptoError::ShortSecret {
                field: "dev_secret",
                min: MIN_SECRET_LEN,
                len: dev_secret.len(),
            });
        }
        if edge_salt.len() < MIN_SECRET_LEN {
            return Err(CryptoError::ShortSecret {
                field: "edge_salt",
                min: MIN_SECRET_LEN,
                len: edge_salt.len(),
            });
        }
        Ok(Self {
            dev_id,
            dev_secret,
            edge_salt,
        })
    }

    pub fn dev_id(&self) -> &str {
        &self.dev_id
    }

    pub fn dev_secret(&self) -> &[u8] {
        &self.dev_secret
    }

    pub fn edge_salt(&self) -> &[u8] {
        &self.edge_salt
    }
}

impl fmt::Debug for DeviceIdentity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DeviceIdentity")
            .field("dev_id", &self.dev_id)
            .field("dev_secret", &"<redacted>")
            .field("edge_salt", &"<redacted>")
            .finish()
    }
}

/// Per-session entropy chosen by the device at session start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SessionParams {
    pub dev_nonce: [u8; DEV_NONCE_LEN],
    pub sess_ctr: u16,
    /// Seconds since the Unix epoch.
    pub timestamp_t: u32,
}

/// The 32-byte HKDF output for one session.
#[derive(Clone, PartialEq, Eq)]
pub struct SessionSecret {
    bytes: [u8; SESSION_SECRET_LEN],
}

impl SessionSecret {
    pub fn from_bytes(bytes: [u8; SESSION_SECRET_LEN]) -> Self {
        Self { bytes }
    }

    pub fn bytes(&self) -> &[u8; SESSION_SECRET_LEN] {
        &self.bytes
    }

    /// AES-128 key: the first 16 bytes of the secret.
    pub fn aes_key(&self) -> [u8; AES_KEY_LEN] {
        let mut key = [0u8; AES_KEY_LEN];
        key.copy_from_slice(&self.bytes[..AES_KEY_LEN]);
        key
    }
}

impl fmt::Debug for SessionSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SessionSecret(<redacted>)")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AeadEnvelope {
    pub iv: [u8; IV_LEN],
    pub ciphertext: Vec<u8>,
    pub tag: [u8; TAG_LEN],
}

/// `dev_secret || dev_nonce || sess_ctr (BE) || timestamp_t (BE)`.
pub fn build_ikm(identity: &DeviceIdentity, params: &SessionParams) -> Vec<u8> {
    let mut ikm = Vec::with_capacity(identity.dev_secret.len() + DEV_NONCE_LEN + 2 + 4);
    ikm.extend_from_slice(&identity.dev_secret);
    ikm.extend_from_slice(&params.dev_nonce);
    ikm.extend_from_slice(&params.sess_ctr.to_be_bytes());
    ikm.extend_from_slice(&params.timestamp_t.to_be_bytes());
    ikm
}

/// HKDF-SHA256 extract step.
pub fn hkdf_extract(salt: &[u8], ikm: &[u8]) -> [u8; 32] {
    let (prk, _) = Hkdf::<Sha256>::extract(Some(salt), ikm);
    prk.into()
}

/// Full HKDF-SHA256. `out_len` may be at most 255 * 32.
pub fn hkdf_sha256(salt: &[u8], ikm: &[u8], info: &[u8], out_len: usize) -> Result<Vec<u8>, CryptoError> {
    let mut okm = vec![0u8; out_len];
    Hkdf::<Sha256>::new(Some(salt), ikm)
        .expand(info, &mut okm)
        .map_err(|_| CryptoError::OutputLength(out_len))?;
    Ok(okm)
}

/// HKDF-SHA256 with `salt = edge_salt`, empty info and a 32-byte output.
pub fn derive_session_secret(identity: &DeviceIdentity, params: &SessionParams) -> SessionSecret {
    let ikm = build_ikm(identity, params);
    let okm = hkdf_sha256(&identity.edge_salt, &ikm, &[], SESSION_SECRET_LEN)
        .expect("32 bytes is a valid HKDF-SHA256 output length");
    let mut bytes = [0u8; SESSION_SECRET_LEN];
    bytes.copy_from_slice(&okm);
    SessionSecret { bytes }
}

/// HMAC-SHA256 keyed with the full 32-byte session secret.
pub fn compute_hmac_proof(secret: &SessionSecret, payload: &[u8]) -> Proof {
    hmac_sha256(&secret.bytes, payload)
}

/// Constant-time check of a proof produced by [`compute_hmac_proof`].
pub fn verify_hmac_proof(secret: &SessionSecret, payload: &[u8], proof: &[u8]) -> bool {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(&secret.bytes).expect("HMAC accepts any key length");
    mac.update(payload);
    mac.verify_slice(proof).is_ok()
}

pub fn hmac_sha256(key: &[u8], data: &[u8]) -> Proof {
    let mut mac = <HmacSha256 as Mac>::new_from_slice(key).expect("HMAC accepts any key length");
    mac.update(data);
    mac.finalize().into_bytes().into()
}

/// Constant-time byte-string equality.
pub fn ct_eq(a: &[u8], b: &[u8]) -> bool {
    a.ct_eq(b).into()
}

/// AES-128-GCM encryption with a detached tag.
pub fn aead_seal(
    key: &[u8; AES_KEY_LEN],
    iv: &[u8; IV_LEN],
    aad: &[u8],
    plaintext: &[u8],
) -> AeadEnvelope {
    let cipher = Aes128Gcm::new(key.into());
    let mut buf = plaintext.to_vec();
    let tag = cipher
        .encrypt_in_place_detached(Nonce::from_slice(iv), aad, &mut buf)
        .expect("plaintext within AES-GCM length limits");
    AeadEnvelope {
        iv: *iv,
        ciphertext: buf,
        tag: tag.into(),
    }
}

/// AES-128-GCM decryption. No plaintext is returned unless the tag verifies.
pub fn aead_open(
    key: &[u8; AES_KEY_LEN],
    envelope: &AeadEnvelope,
    aad: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    let cipher = Aes128Gcm::new(key.into());
    let mut buf = envelope.ciphertext.clone();
    cipher
        .decrypt_in_place_detached(
            Nonce::from_slice(&envelope.iv),
            aad,
            &mut buf,
            Tag::from_slice(&envelope.tag),
        )
        .map_err(|_| CryptoError::AuthFailure)?;
    Ok(buf)
}

/// `prefix (4) || msg_seq (8, BE)`.
pub fn make_iv(prefix: &[u8; IV_PREFIX_LEN], msg_seq: u64) -> [u8; IV_LEN] {
    let mut iv = [0u8; IV_LEN];
    iv[..IV_PREFIX_LEN].copy_from_slice(prefix);
    iv[IV_PREFIX_LEN..].copy_from_slice(&msg_seq.to_be_bytes());
    iv
}

/// Associated data bound to every session data packet:
/// `dev_id || 0x00 || sess_ctr (BE) || msg_seq (BE)`.
pub fn session_aad(dev_id: &str, sess_ctr: u16, msg_seq: u64) -> Vec<u8> {
    let mut aad = Vec::with_capacity(dev_id.len() + 1 + 2 + 8);
    aad.extend_from_slice(dev_id.as_bytes());
    aad.push(0);
    aad.extend_from_slice(&sess_ctr.to_be_bytes());
    aad.extend_from_slice(&msg_seq.to_be_bytes());
    aad
}

/// Associated data for baseline packets: `dev_id || 0x00 || seq (BE)`.
pub fn psk_aad(dev_id: &str, seq: u64) -> Vec<u8> {
    let mut aad = Vec::with_capacity(dev_id.len() + 1 + 8);
    aad.extend_from_slice(dev_id.as_bytes());
    aad.push(0);
    aad.extend_from_slice(&seq.to_be_bytes());
    aad
}
