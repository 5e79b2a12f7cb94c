//! On-wire messages and their canonical JSON encodings.
//!
//! Every message is a single-line JSON object with a fixed key order. Binary
//! fields are lowercase hex, integers are unquoted decimals. Decoding is
//! strict: the key set must match exactly and every fixed-size field must
//! decode to its declared length.

use serde_json::{Map, Value};
use thiserror::Error;

use crate::crypto::{
    self, is_valid_dev_id, Proof, SessionParams, SessionSecret, DEV_NONCE_LEN, IV_LEN, PROOF_LEN,
    TAG_LEN,
};

pub const PSK_DATA_TOPIC: &str = "psk/data";
pub const INIT_TOPIC: &str = "dsekp/init";
pub const ACK_TOPIC_PREFIX: &str = "dsekp/init/ack/";
pub const ACK_TOPIC_PATTERN: &str = "dsekp/init/ack/+";
pub const DATA_TOPIC: &str = "dsekp/data";

const ACK_LABEL: &[u8] = b"ACK";

const PSK_KEYS: &[&str] = &["seq", "dev_id", "ciphertext", "iv", "tag", "sendts_ms"];
const DSEKP_KEYS: &[&str] = &[
    "seq",
    "dev_id",
    "sessctr_id",
    "ciphertext",
    "iv",
    "tag",
    "sendts_ms",
];
const INIT_KEYS: &[&str] = &["dev_id", "sessctr_id", "t", "dev_nonce", "init_proof"];
const ACK_OK_KEYS: &[&str] = &["dev_id", "sessctr_id", "status", "ack_proof"];
const ACK_REJECTED_KEYS: &[&str] = &["dev_id", "sessctr_id", "status"];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("unknown topic {0:?}")]
    UnknownTopic(String),
    #[error("malformed JSON: {0}")]
    BadJson(String),
    #[error("wrong key set: expected {expected:?}, found {found:?}")]
    WrongKeySet {
        expected: Vec<&'static str>,
        found: Vec<String>,
    },
    #[error("field {field}: expected {expected} bytes, got {actual}")]
    WrongFieldLength {
        field: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("field {0}: not lowercase hex")]
    BadHex(&'static str),
    #[error("field {field}: {reason}")]
    BadField {
        field: &'static str,
        reason: &'static str,
    },
    #[error("topic {topic:?} does not match dev_id {dev_id:?}")]
    TopicMismatch { topic: String, dev_id: String },
    #[error("invalid device id {0:?}")]
    InvalidDeviceId(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AckStatus {
    Ok,
    Rejected,
}

impl AckStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            AckStatus::Ok => "ok",
            AckStatus::Rejected => "rejected",
        }
    }
}

/// Session initialization request published on `dsekp/init`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InitMessage {
    pub dev_id: String,
    pub sess_ctr: u16,
    pub timestamp_t: u32,
    pub dev_nonce: [u8; DEV_NONCE_LEN],
    pub init_proof: Proof,
}

impl InitMessage {
    /// Builds the message and its proof for an already-derived secret.
    pub fn sign(
        dev_id: &str,
        params: &SessionParams,
        secret: &SessionSecret,
    ) -> Result<Self, WireError> {
        let payload = canonical_init_payload(dev_id, params)?;
        Ok(Self {
            dev_id: dev_id.to_owned(),
            sess_ctr: params.sess_ctr,
            timestamp_t: params.timestamp_t,
            dev_nonce: params.dev_nonce,
            init_proof: crypto::compute_hmac_proof(secret, &payload),
        })
    }

    pub fn params(&self) -> SessionParams {
        SessionParams {
            dev_nonce: self.dev_nonce,
            sess_ctr: self.sess_ctr,
            timestamp_t: self.timestamp_t,
        }
    }

    pub fn payload(&self) -> Result<Vec<u8>, WireError> {
        canonical_init_payload(&self.dev_id, &self.params())
    }
}

/// Edge reply published on `dsekp/init/ack/{dev_id}`. `ack_proof` is present
/// iff `status` is ok.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InitAck {
    pub dev_id: String,
    pub sess_ctr: u16,
    pub status: AckStatus,
    pub ack_proof: Option<Proof>,
}

impl InitAck {
    pub fn accepted(
        dev_id: &str,
        params: &SessionParams,
        secret: &SessionSecret,
    ) -> Result<Self, WireError> {
        let payload = ack_proof_payload(dev_id, params)?;
        Ok(Self {
            dev_id: dev_id.to_owned(),
            sess_ctr: params.sess_ctr,
            status: AckStatus::Ok,
            ack_proof: Some(crypto::compute_hmac_proof(secret, &payload)),
        })
    }

    pub fn rejected(dev_id: &str, sess_ctr: u16) -> Self {
        Self {
            dev_id: dev_id.to_owned(),
            sess_ctr,
            status: AckStatus::Rejected,
            ack_proof: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PskDataPacket {
    pub seq: u64,
    pub dev_id: String,
    pub ciphertext: Vec<u8>,
    pub iv: [u8; IV_LEN],
    pub tag: [u8; TAG_LEN],
    pub sendts_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DsekpDataPacket {
    pub seq: u64,
    pub dev_id: String,
    pub sessctr_id: u16,
    pub ciphertext: Vec<u8>,
    pub iv: [u8; IV_LEN],
    pub tag: [u8; TAG_LEN],
    pub sendts_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WireMessage {
    Init(InitMessage),
    Ack(InitAck),
    PskData(PskDataPacket),
    DsekpData(DsekpDataPacket),
}

impl WireMessage {
    pub fn topic(&self) -> String {
        match self {
            WireMessage::Init(_) => INIT_TOPIC.to_owned(),
            WireMessage::Ack(a) => ack_topic(&a.dev_id),
            WireMessage::PskData(_) => PSK_DATA_TOPIC.to_owned(),
            WireMessage::DsekpData(_) => DATA_TOPIC.to_owned(),
        }
    }
}

pub fn ack_topic(dev_id: &str) -> String {
    format!("{ACK_TOPIC_PREFIX}{dev_id}")
}

/// `dev_id || 0x00 || sess_ctr (BE) || timestamp_t (BE) || dev_nonce`.
pub fn canonical_init_payload(dev_id: &str, params: &SessionParams) -> Result<Vec<u8>, WireError> {
    if dev_id.as_bytes().contains(&0) {
        return Err(WireError::InvalidDeviceId(dev_id.to_owned()));
    }
    let mut out = Vec::with_capacity(dev_id.len() + 1 + 2 + 4 + DEV_NONCE_LEN);
    out.extend_from_slice(dev_id.as_bytes());
    out.push(0);
    out.extend_from_slice(&params.sess_ctr.to_be_bytes());
    out.extend_from_slice(&params.timestamp_t.to_be_bytes());
    out.extend_from_slice(&params.dev_nonce);
    Ok(out)
}

/// `"ACK" || canonical_init_payload`, the input of the edge's ack proof.
pub fn ack_proof_payload(dev_id: &str, params: &SessionParams) -> Result<Vec<u8>, WireError> {
    let mut out = ACK_LABEL.to_vec();
    out.extend(canonical_init_payload(dev_id, params)?);
    Ok(out)
}

struct ObjectWriter {
    buf: String,
    first: bool,
}

impl ObjectWriter {
    fn new() -> Self {
        Self {
            buf: String::from("{"),
            first: true,
        }
    }

    fn key(&mut self, key: &str) {
        if !self.first {
            self.buf.push(',');
        }
        self.first = false;
        self.buf.push('"');
        self.buf.push_str(key);
        self.buf.push_str("\":");
    }

    fn uint(&mut self, key: &str, v: u64) -> &mut Self {
        self.key(key);
        self.buf.push_str(&v.to_string());
        self
    }

    fn string(&mut self, key: &str, v: &str) -> &mut Self {
        self.key(key);
        self.buf
            .push_str(&serde_json::to_string(v).expect("strings always serialize"));
        self
    }

    fn hex(&mut self, key: &str, v: &[u8]) -> &mut Self {
        self.key(key);
        self.buf.push('"');
        self.buf.push_str(&hex::encode(v));
        self.buf.push('"');
        self
    }

    fn finish(&mut self) -> Vec<u8> {
        self.buf.push('}');
        std::mem::take(&mut self.buf).into_bytes()
    }
}

pub fn encode(msg: &WireMessage) -> Vec<u8> {
    let mut w = ObjectWriter::new();
    match msg {
        WireMessage::Init(m) => w
            .string("dev_id", &m.dev_id)
            .uint("sessctr_id", m.sess_ctr.into())
            .uint("t", m.timestamp_t.into())
            .hex("dev_nonce", &m.dev_nonce)
            .hex("init_proof", &m.init_proof)
            .finish(),
        WireMessage::Ack(a) => {
            w.string("dev_id", &a.dev_id)
                .uint("sessctr_id", a.sess_ctr.into())
                .string("status", a.status.as_str());
            if let Some(proof) = &a.ack_proof {
                w.hex("ack_proof", proof);
            }
            w.finish()
        }
        WireMessage::PskData(p) => w
            .uint("seq", p.seq)
            .string("dev_id", &p.dev_id)
            .hex("ciphertext", &p.ciphertext)
            .hex("iv", &p.iv)
            .hex("tag", &p.tag)
            .uint("sendts_ms", p.sendts_ms)
            .finish(),
        WireMessage::DsekpData(p) => w
            .uint("seq", p.seq)
            .string("dev_id", &p.dev_id)
            .uint("sessctr_id", p.sessctr_id.into())
            .hex("ciphertext", &p.ciphertext)
            .hex("iv", &p.iv)
            .hex("tag", &p.tag)
            .uint("sendts_ms", p.sendts_ms)
            .finish(),
    }
}

struct Fields(Map<String, Value>);

impl Fields {
    fn parse(body: &[u8], expected: &[&'static str]) -> Result<Self, WireError> {
        let value: Value =
            serde_json::from_slice(body).map_err(|e| WireError::BadJson(e.to_string()))?;
        let Value::Object(map) = value else {
            return Err(WireError::BadJson("top-level value is not an object".into()));
        };
        let fields = Fields(map);
        fields.expect_keys(expected)?;
        Ok(fields)
    }

    fn expect_keys(&self, expected: &[&'static str]) -> Result<(), WireError> {
        let exact = self.0.len() == expected.len() && expected.iter().all(|k| self.0.contains_key(*k));
        if exact {
            Ok(())
        } else {
            Err(WireError::WrongKeySet {
                expected: expected.to_vec(),
                found: self.0.keys().cloned().collect(),
            })
        }
    }

    fn uint(&self, field: &'static str) -> Result<u64, WireError> {
        self.0[field].as_u64().ok_or(WireError::BadField {
            field,
            reason: "not an unsigned integer",
        })
    }

    fn u16(&self, field: &'static str) -> Result<u16, WireError> {
        u16::try_from(self.uint(field)?).map_err(|_| WireError::BadField {
            field,
            reason: "out of range for 16 bits",
        })
    }

    fn u32(&self, field: &'static str) -> Result<u32, WireError> {
        u32::try_from(self.uint(field)?).map_err(|_| WireError::BadField {
            field,
            reason: "out of range for 32 bits",
        })
    }

    fn str(&self, field: &'static str) -> Result<&str, WireError> {
        self.0[field].as_str().ok_or(WireError::BadField {
            field,
            reason: "not a string",
        })
    }

    fn dev_id(&self) -> Result<String, WireError> {
        let id = self.str("dev_id")?;
        if !is_valid_dev_id(id) {
            return Err(WireError::InvalidDeviceId(id.to_owned()));
        }
        Ok(id.to_owned())
    }

    fn bytes(&self, field: &'static str) -> Result<Vec<u8>, WireError> {
        let s = self.str(field)?;
        if s.bytes().any(|b| b.is_ascii_uppercase()) {
            return Err(WireError::BadHex(field));
        }
        hex::decode(s).map_err(|_| WireError::BadHex(field))
    }

    fn array<const N: usize>(&self, field: &'static str) -> Result<[u8; N], WireError> {
        let v = self.bytes(field)?;
        v.as_slice()
            .try_into()
            .map_err(|_| WireError::WrongFieldLength {
                field,
                expected: N,
                actual: v.len(),
            })
    }
}

/// Parses `body` according to the message type implied by `topic`.
pub fn decode(topic: &str, body: &[u8]) -> Result<WireMessage, WireError> {
    match topic {
        PSK_DATA_TOPIC => {
            let f = Fields::parse(body, PSK_KEYS)?;
            Ok(WireMessage::PskData(PskDataPacket {
                seq: f.uint("seq")?,
                dev_id: f.dev_id()?,
                ciphertext: f.bytes("ciphertext")?,
                iv: f.array::<IV_LEN>("iv")?,
                tag: f.array::<TAG_LEN>("tag")?,
                sendts_ms: f.uint("sendts_ms")?,
            }))
        }
        DATA_TOPIC => {
            let f = Fields::parse(body, DSEKP_KEYS)?;
            Ok(WireMessage::DsekpData(DsekpDataPacket {
                seq: f.uint("seq")?,
                dev_id: f.dev_id()?,
                sessctr_id: f.u16("sessctr_id")?,
                ciphertext: f.bytes("ciphertext")?,
                iv: f.array::<IV_LEN>("iv")?,
                tag: f.array::<TAG_LEN>("tag")?,
                sendts_ms: f.uint("sendts_ms")?,
            }))
        }
        INIT_TOPIC => {
            let f = Fields::parse(body, INIT_KEYS)?;
            Ok(WireMessage::Init(InitMessage {
                dev_id: f.dev_id()?,
                sess_ctr: f.u16("sessctr_id")?,
                timestamp_t: f.u32("t")?,
                dev_nonce: f.array::<DEV_NONCE_LEN>("dev_nonce")?,
                init_proof: f.array::<PROOF_LEN>("init_proof")?,
            }))
        }
        _ => match topic.strip_prefix(ACK_TOPIC_PREFIX) {
            Some(topic_dev) if is_valid_dev_id(topic_dev) => decode_ack(topic, topic_dev, body),
            _ => Err(WireError::UnknownTopic(topic.to_owned())),
        },
    }
}

fn decode_ack(topic: &str, topic_dev: &str, body: &[u8]) -> Result<WireMessage, WireError> {
    let value: Value =
        serde_json::from_slice(body).map_err(|e| WireError::BadJson(e.to_string()))?;
    let Value::Object(map) = value else {
        return Err(WireError::BadJson("top-level value is not an object".into()));
    };
    let f = Fields(map);
    let status = match f.0.get("status").and_then(Value::as_str) {
        Some("ok") => AckStatus::Ok,
        Some("rejected") => AckStatus::Rejected,
        Some(_) => {
            return Err(WireError::BadField {
                field: "status",
                reason: "expected \"ok\" or \"rejected\"",
            })
        }
        None => {
            f.expect_keys(ACK_OK_KEYS)?;
            return Err(WireError::BadField {
                field: "status",
                reason: "not a string",
            });
        }
    };
    let ack_proof = match status {
        AckStatus::Ok => {
            f.expect_keys(ACK_OK_KEYS)?;
            Some(f.array::<PROOF_LEN>("ack_proof")?)
        }
        AckStatus::Rejected => {
            f.expect_keys(ACK_REJECTED_KEYS)?;
            None
        }
    };
    let dev_id = f.dev_id()?;
    if dev_id != topic_dev {
        return Err(WireError::TopicMismatch {
            topic: topic.to_owned(),
            dev_id,
        });
    }
    Ok(WireMessage::Ack(InitAck {
        dev_id,
        sess_ctr: f.u16("sessctr_id")?,
        status,
        ack_proof,
    }))
}
