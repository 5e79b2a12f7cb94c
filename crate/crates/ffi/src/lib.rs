//! C ABI over the `dsekp` core.
//!
//! Handles are opaque pointers created by `*_new` and released by `*_free`.
//! Every function returns a [`DsekpStatus`]; on failure a description is
//! available from [`dsekp_last_error_message`] on the same thread. Strings
//! returned through out-parameters are owned by the caller and must be
//! released with [`dsekp_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use dsekp::crypto::{
    self, AeadEnvelope, DeviceIdentity, SessionParams, AES_KEY_LEN, DEV_NONCE_LEN, IV_LEN,
    SESSION_SECRET_LEN, TAG_LEN,
};
use dsekp::device::{DeviceConfig, DeviceState};
use dsekp::edge::{EdgeConfig, EdgeSessionStore};
use dsekp::wire::{self, AckStatus, WireMessage};

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DsekpStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Malformed = 3,
    AuthFailure = 4,
    /// The edge refused an init or a data packet; see the error message.
    Rejected = 5,
    WrongState = 6,
    Internal = 7,
}

/// Device-side session state machine.
pub struct DsekpDevice {
    state: DeviceState,
}

/// Edge-side session store.
pub struct DsekpEdge {
    store: EdgeSessionStore,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).ok());
}

struct Fail(DsekpStatus, String);

fn fail<T>(status: DsekpStatus, msg: impl Into<String>) -> Result<T, Fail> {
    Err(Fail(status, msg.into()))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DsekpStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DsekpStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            DsekpStatus::Internal
        }
    }
}

unsafe fn bytes<'a>(p: *const u8, len: usize, what: &str) -> Result<&'a [u8], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return fail(DsekpStatus::NullPointer, format!("{what} is null"));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn array<const N: usize>(p: *const u8, what: &str) -> Result<[u8; N], Fail> {
    if p.is_null() {
        return fail(DsekpStatus::NullPointer, format!("{what} is null"));
    }
    let mut out = [0u8; N];
    out.copy_from_slice(slice::from_raw_parts(p, N));
    Ok(out)
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return fail(DsekpStatus::NullPointer, format!("{what} is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .or_else(|_| fail(DsekpStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut()
        .ok_or_else(|| Fail(DsekpStatus::NullPointer, format!("{what} is null")))
}

/// `"<reason>: <description>"` for a serde-labelled rejection.
fn rejection<R: serde::Serialize + std::fmt::Display>(r: R) -> String {
    match serde_json::to_value(&r) {
        Ok(serde_json::Value::String(label)) => format!("{label}: {r}"),
        _ => r.to_string(),
    }
}

fn c_string(s: String) -> *mut c_char {
    CString::new(s).expect("JSON has no interior NUL").into_raw()
}

unsafe fn identity(
    dev_id: *const c_char,
    secret: *const u8,
    secret_len: usize,
    salt: *const u8,
    salt_len: usize,
) -> Result<DeviceIdentity, Fail> {
    let dev_id = text(dev_id, "dev_id")?;
    let secret = bytes(secret, secret_len, "dev_secret")?;
    let salt = bytes(salt, salt_len, "edge_salt")?;
    DeviceIdentity::new(dev_id, secret, salt)
        .or_else(|e| fail(DsekpStatus::InvalidArgument, e.to_string()))
}

/// Message describing the last failure on this thread, or null. The pointer
/// stays valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn dsekp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Releases a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed already.
#[no_mangle]
pub unsafe extern "C" fn dsekp_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Derives the 32-byte session secret into `out_secret`.
///
/// # Safety
/// Pointers must reference buffers of the stated lengths; `dev_nonce` is 12
/// bytes and `out_secret` 32 bytes.
#[no_mangle]
pub unsafe extern "C" fn dsekp_derive_session_secret(
    dev_secret: *const u8,
    dev_secret_len: usize,
    edge_salt: *const u8,
    edge_salt_len: usize,
    dev_nonce: *const u8,
    sess_ctr: u16,
    timestamp_t: u32,
    out_secret: *mut u8,
) -> DsekpStatus {
    guard(|| {
        let secret = bytes(dev_secret, dev_secret_len, "dev_secret")?;
        let salt = bytes(edge_salt, edge_salt_len, "edge_salt")?;
        // The device id does not enter the key schedule.
        let id = DeviceIdentity::new("ffi", secret, salt)
            .or_else(|e| fail(DsekpStatus::InvalidArgument, e.to_string()))?;
        let params = SessionParams {
            dev_nonce: array::<DEV_NONCE_LEN>(dev_nonce, "dev_nonce")?,
            sess_ctr,
            timestamp_t,
        };
        if out_secret.is_null() {
            return fail(DsekpStatus::NullPointer, "out_secret is null");
        }
        let s = crypto::derive_session_secret(&id, &params);
        ptr::copy_nonoverlapping(s.bytes().as_ptr(), out_secret, SESSION_SECRET_LEN);
        Ok(())
    })
}

/// AES-128-GCM encryption. `out_ciphertext` receives `plaintext_len` bytes
/// and `out_tag` 16 bytes.
///
/// # Safety
/// `key` is 16 bytes, `iv` 12 bytes; other pointers reference buffers of the
/// stated lengths.
#[no_mangle]
pub unsafe extern "C" fn dsekp_aead_seal(
    key: *const u8,
    iv: *const u8,
    aad: *const u8,
    aad_len: usize,
    plaintext: *const u8,
    plaintext_len: usize,
    out_ciphertext: *mut u8,
    out_tag: *mut u8,
) -> DsekpStatus {
    guard(|| {
        let key = array::<AES_KEY_LEN>(key, "key")?;
        let iv = array::<IV_LEN>(iv, "iv")?;
        let aad = bytes(aad, aad_len, "aad")?;
        let pt = bytes(plaintext, plaintext_len, "plaintext")?;
        if out_tag.is_null() || (plaintext_len > 0 && out_ciphertext.is_null()) {
            return fail(DsekpStatus::NullPointer, "output buffer is null");
        }
        let env = crypto::aead_seal(&key, &iv, aad, pt);
        ptr::copy_nonoverlapping(env.ciphertext.as_ptr(), out_ciphertext, env.ciphertext.len());
        ptr::copy_nonoverlapping(env.tag.as_ptr(), out_tag, TAG_LEN);
        Ok(())
    })
}

/// AES-128-GCM decryption. `out_plaintext` receives `ciphertext_len` bytes
/// only when the tag verifies; otherwise `AuthFailure` is returned.
///
/// # Safety
/// `key` is 16 bytes, `iv` 12 bytes, `tag` 16 bytes; other pointers
/// reference buffers of the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn dsekp_aead_open(
    key: *const u8,
    iv: *const u8,
    aad: *const u8,
    aad_len: usize,
    ciphertext: *const u8,
    ciphertext_len: usize,
    tag: *const u8,
    out_plaintext: *mut u8,
) -> DsekpStatus {
    guard(|| {
        let key = array::<AES_KEY_LEN>(key, "key")?;
        let env = AeadEnvelope {
            iv: array::<IV_LEN>(iv, "iv")?,
            ciphertext: bytes(ciphertext, ciphertext_len, "ciphertext")?.to_vec(),
            tag: array::<TAG_LEN>(tag, "tag")?,
        };
        let aad = bytes(aad, aad_len, "aad")?;
        if ciphertext_len > 0 && out_plaintext.is_null() {
            return fail(DsekpStatus::NullPointer, "out_plaintext is null");
        }
        let pt = crypto::aead_open(&key, &env, aad)
            .or_else(|e| fail(DsekpStatus::AuthFailure, e.to_string()))?;
        ptr::copy_nonoverlapping(pt.as_ptr(), out_plaintext, pt.len());
        Ok(())
    })
}

/// Creates a device. `seed` drives its nonces, counters and IV prefixes.
///
/// # Safety
/// `dev_id` is a NUL-terminated string; buffers have the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn dsekp_device_new(
    dev_id: *const c_char,
    dev_secret: *const u8,
    dev_secret_len: usize,
    edge_salt: *const u8,
    edge_salt_len: usize,
    seed: u64,
    out_device: *mut *mut DsekpDevice,
) -> DsekpStatus {
    guard(|| {
        let slot = out(out_device, "out_device")?;
        let id = identity(dev_id, dev_secret, dev_secret_len, edge_salt, edge_salt_len)?;
        let state = DeviceState::new(id, DeviceConfig::default(), seed);
        *slot = Box::into_raw(Box::new(DsekpDevice { state }));
        Ok(())
    })
}

/// # Safety
/// `device` comes from [`dsekp_device_new`] and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dsekp_device_free(device: *mut DsekpDevice) {
    if !device.is_null() {
        drop(Box::from_raw(device));
    }
}

/// Starts a session and returns the init message body (JSON) to publish.
///
/// # Safety
/// `device` is a live handle; `out_init_json` is writable.
#[no_mangle]
pub unsafe extern "C" fn dsekp_device_begin_session(
    device: *mut DsekpDevice,
    now_ms: u64,
    out_init_json: *mut *mut c_char,
) -> DsekpStatus {
    guard(|| {
        let dev = out(device, "device")?;
        let slot = out(out_init_json, "out_init_json")?;
        let init = dev.state.begin_session(now_ms);
        *slot = c_string(String::from_utf8(wire::encode(&WireMessage::Init(init))).expect("JSON"));
        Ok(())
    })
}

/// Feeds an ack body received on the device's ack topic.
///
/// # Safety
/// `device` is a live handle; `body` has `body_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn dsekp_device_on_ack(
    device: *mut DsekpDevice,
    body: *const u8,
    body_len: usize,
    now_ms: u64,
) -> DsekpStatus {
    guard(|| {
        let dev = out(device, "device")?;
        let body = bytes(body, body_len, "body")?;
        let topic = wire::ack_topic(dev.state.dev_id());
        let ack = match wire::decode(&topic, body) {
            Ok(WireMessage::Ack(a)) => a,
            Ok(_) => return fail(DsekpStatus::Malformed, "not an ack"),
            Err(e) => return fail(DsekpStatus::Malformed, e.to_string()),
        };
        dev.state.on_ack(&ack, now_ms).or_else(|e| {
            let status = match e {
                dsekp::device::AckError::BadProof => DsekpStatus::AuthFailure,
                dsekp::device::AckError::Rejected => DsekpStatus::Rejected,
                _ => DsekpStatus::WrongState,
            };
            fail(status, e.to_string())
        })
    })
}

/// Seals a reading under the active session and returns the data packet
/// body (JSON) for `dsekp/data`.
///
/// # Safety
/// `device` is a live handle; `plaintext` has `plaintext_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn dsekp_device_seal(
    device: *mut DsekpDevice,
    plaintext: *const u8,
    plaintext_len: usize,
    now_ms: u64,
    out_packet_json: *mut *mut c_char,
) -> DsekpStatus {
    guard(|| {
        let dev = out(device, "device")?;
        let pt = bytes(plaintext, plaintext_len, "plaintext")?;
        let slot = out(out_packet_json, "out_packet_json")?;
        let pkt = dev
            .state
            .next_data_packet(pt, now_ms)
            .or_else(|e| fail(DsekpStatus::WrongState, e.to_string()))?;
        *slot = c_string(String::from_utf8(wire::encode(&WireMessage::DsekpData(pkt))).expect("JSON"));
        Ok(())
    })
}

/// Creates an edge store. Zero arguments select the defaults (5 sessions,
/// 120 s skew).
///
/// # Safety
/// `out_edge` is writable.
#[no_mangle]
pub unsafe extern "C" fn dsekp_edge_new(
    capacity: u32,
    max_skew_s: u32,
    out_edge: *mut *mut DsekpEdge,
) -> DsekpStatus {
    guard(|| {
        let slot = out(out_edge, "out_edge")?;
        let d = EdgeConfig::default();
        let config = EdgeConfig {
            capacity: if capacity == 0 { d.capacity } else { capacity as usize },
            max_skew_s: if max_skew_s == 0 { d.max_skew_s } else { max_skew_s as u64 },
        };
        *slot = Box::into_raw(Box::new(DsekpEdge {
            store: EdgeSessionStore::new(config),
        }));
        Ok(())
    })
}

/// # Safety
/// `edge` comes from [`dsekp_edge_new`] and is not used afterwards.
#[no_mangle]
pub unsafe extern "C" fn dsekp_edge_free(edge: *mut DsekpEdge) {
    if !edge.is_null() {
        drop(Box::from_raw(edge));
    }
}

/// Registers a device's provisioned credentials.
///
/// # Safety
/// `edge` is a live handle; `dev_id` is NUL-terminated; buffers have the
/// stated lengths.
#[no_mangle]
pub unsafe extern "C" fn dsekp_edge_register(
    edge: *mut DsekpEdge,
    dev_id: *const c_char,
    dev_secret: *const u8,
    dev_secret_len: usize,
    edge_salt: *const u8,
    edge_salt_len: usize,
) -> DsekpStatus {
    guard(|| {
        let edge = out(edge, "edge")?;
        let id = identity(dev_id, dev_secret, dev_secret_len, edge_salt, edge_salt_len)?;
        edge.store.register(id);
        Ok(())
    })
}

/// Handles an init body from `dsekp/init`. The ack body is always written
/// to `out_ack_json`; the status is `Rejected` when its status is
/// `rejected`.
///
/// # Safety
/// `edge` is a live handle; `body` has `body_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn dsekp_edge_handle_init(
    edge: *mut DsekpEdge,
    body: *const u8,
    body_len: usize,
    now_ms: u64,
    out_ack_json: *mut *mut c_char,
) -> DsekpStatus {
    guard(|| {
        let edge = out(edge, "edge")?;
        let body = bytes(body, body_len, "body")?;
        let slot = out(out_ack_json, "out_ack_json")?;
        let init = match wire::decode(wire::INIT_TOPIC, body) {
            Ok(WireMessage::Init(m)) => m,
            Ok(_) => return fail(DsekpStatus::Malformed, "not an init"),
            Err(e) => return fail(DsekpStatus::Malformed, e.to_string()),
        };
        let outcome = edge.store.handle_init(&init, now_ms);
        let status = outcome.ack.status;
        *slot = c_string(String::from_utf8(wire::encode(&WireMessage::Ack(outcome.ack))).expect("JSON"));
        match (status, outcome.result) {
            (AckStatus::Ok, _) => Ok(()),
            (_, Err(r)) => fail(DsekpStatus::Rejected, rejection(r)),
            (_, Ok(_)) => fail(DsekpStatus::Internal, "rejected ack for accepted init"),
        }
    })
}

/// Handles a data body from `dsekp/data`. On success the accepted record is
/// written to `out_record_json` as `{"dev_id", "sessctr_id", "seq",
/// "plaintext", "latency_ms"}`.
///
/// # Safety
/// `edge` is a live handle; `body` has `body_len` bytes.
#[no_mangle]
pub unsafe extern "C" fn dsekp_edge_handle_data(
    edge: *mut DsekpEdge,
    body: *const u8,
    body_len: usize,
    now_ms: u64,
    out_record_json: *mut *mut c_char,
) -> DsekpStatus {
    guard(|| {
        let edge = out(edge, "edge")?;
        let body = bytes(body, body_len, "body")?;
        let slot = out(out_record_json, "out_record_json")?;
        let pkt = match wire::decode(wire::DATA_TOPIC, body) {
            Ok(WireMessage::DsekpData(p)) => p,
            Ok(_) => return fail(DsekpStatus::Malformed, "not a data packet"),
            Err(e) => return fail(DsekpStatus::Malformed, e.to_string()),
        };
        let rec = edge
            .store
            .handle_data(&pkt, body.len(), now_ms)
            .or_else(|r| fail(DsekpStatus::Rejected, rejection(r)))?;
        let json = serde_json::json!({
            "dev_id": rec.dev_id,
            "sessctr_id": rec.sessctr_id,
            "seq": rec.seq,
            "plaintext": rec.plaintext,
            "latency_ms": rec.latency_ms,
        });
        *slot = c_string(json.to_string());
        Ok(())
    })
}

/// Number of sessions the edge holds for `dev_id`.
///
/// # Safety
/// `edge` is a live handle; `dev_id` is NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dsekp_edge_session_count(
    edge: *const DsekpEdge,
    dev_id: *const c_char,
    out_count: *mut usize,
) -> DsekpStatus {
    guard(|| {
        let edge = edge
            .as_ref()
            .ok_or_else(|| Fail(DsekpStatus::NullPointer, "edge is null".into()))?;
        let dev_id = text(dev_id, "dev_id")?;
        *out(out_count, "out_count")? = edge.store.session_count(dev_id);
        Ok(())
    })
}
