use std::ffi::{c_char, CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use dsekp_ffi::*;

const T0: u64 = 1_700_000_000_000;
const SECRET: [u8; 32] = [0x11; 32];
const SALT: [u8; 16] = [0x22; 16];

fn take(s: *mut c_char) -> String {
    assert!(!s.is_null());
    let out = unsafe { CStr::from_ptr(s) }.to_str().unwrap().to_owned();
    unsafe { dsekp_string_free(s) };
    out
}

fn last_error() -> String {
    let p = dsekp_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

struct Pair {
    device: *mut DsekpDevice,
    edge: *mut DsekpEdge,
}

impl Drop for Pair {
    fn drop(&mut self) {
        unsafe {
            dsekp_device_free(self.device);
            dsekp_edge_free(self.edge);
        }
    }
}

fn pair(seed: u64) -> Pair {
    let id = CString::new("esp32-01").unwrap();
    let mut device = ptr::null_mut();
    let mut edge = ptr::null_mut();
    unsafe {
        assert_eq!(
            dsekp_device_new(id.as_ptr(), SECRET.as_ptr(), 32, SALT.as_ptr(), 16, seed, &mut device),
            DsekpStatus::Ok
        );
        assert_eq!(dsekp_edge_new(0, 0, &mut edge), DsekpStatus::Ok);
        assert_eq!(
            dsekp_edge_register(edge, id.as_ptr(), SECRET.as_ptr(), 32, SALT.as_ptr(), 16),
            DsekpStatus::Ok
        );
    }
    Pair { device, edge }
}

fn handshake(p: &Pair, now: u64) {
    unsafe {
        let mut init = ptr::null_mut();
        assert_eq!(dsekp_device_begin_session(p.device, now, &mut init), DsekpStatus::Ok);
        let init = take(init);
        let mut ack = ptr::null_mut();
        assert_eq!(
            dsekp_edge_handle_init(p.edge, init.as_ptr(), init.len(), now + 100, &mut ack),
            DsekpStatus::Ok
        );
        let ack = take(ack);
        assert_eq!(dsekp_device_on_ack(p.device, ack.as_ptr(), ack.len(), now + 200), DsekpStatus::Ok);
    }
}

fn seal(p: &Pair, pt: &[u8], now: u64) -> String {
    let mut pkt = ptr::null_mut();
    assert_eq!(
        unsafe { dsekp_device_seal(p.device, pt.as_ptr(), pt.len(), now, &mut pkt) },
        DsekpStatus::Ok
    );
    take(pkt)
}

#[test]
fn handshake_and_data_through_handles() {
    let p = pair(1);
    handshake(&p, T0);
    let pkt = seal(&p, b"T=21.5C,H=40.0%", T0 + 1_000);
    let mut rec = ptr::null_mut();
    let st = unsafe { dsekp_edge_handle_data(p.edge, pkt.as_ptr(), pkt.len(), T0 + 1_250, &mut rec) };
    assert_eq!(st, DsekpStatus::Ok);
    let rec: serde_json::Value = serde_json::from_str(&take(rec)).unwrap();
    assert_eq!(rec["plaintext"], "T=21.5C,H=40.0%");
    assert_eq!(rec["seq"], 1);
    assert_eq!(rec["latency_ms"], 250.0);

    // Same packet again is a replay.
    let mut rec = ptr::null_mut();
    let st = unsafe { dsekp_edge_handle_data(p.edge, pkt.as_ptr(), pkt.len(), T0 + 1_300, &mut rec) };
    assert_eq!(st, DsekpStatus::Rejected);
    assert!(rec.is_null());
    assert!(last_error().starts_with("replay: "), "{}", last_error());

    let id = CString::new("esp32-01").unwrap();
    let mut n = 0usize;
    assert_eq!(unsafe { dsekp_edge_session_count(p.edge, id.as_ptr(), &mut n) }, DsekpStatus::Ok);
    assert_eq!(n, 1);
}

#[test]
fn edge_capacity_applies() {
    let p = pair(2);
    for i in 0..8 {
        handshake(&p, T0 + i * 1_000);
    }
    let id = CString::new("esp32-01").unwrap();
    let mut n = 0usize;
    unsafe { dsekp_edge_session_count(p.edge, id.as_ptr(), &mut n) };
    assert_eq!(n, 5);
}

#[test]
fn status_codes() {
    let p = pair(3);
    let mut pkt = ptr::null_mut();
    let st = unsafe { dsekp_device_seal(p.device, b"x".as_ptr(), 1, T0, &mut pkt) };
    assert_eq!(st, DsekpStatus::WrongState);
    assert!(last_error().contains("no active session"));

    let junk = b"{\"dev_id\":1}";
    let mut ack = ptr::null_mut();
    let st = unsafe { dsekp_edge_handle_init(p.edge, junk.as_ptr(), junk.len(), T0, &mut ack) };
    assert_eq!(st, DsekpStatus::Malformed);

    let mut dev = ptr::null_mut();
    let st = unsafe { dsekp_device_new(ptr::null(), SECRET.as_ptr(), 32, SALT.as_ptr(), 16, 0, &mut dev) };
    assert_eq!(st, DsekpStatus::NullPointer);
    let id = CString::new("esp32-01").unwrap();
    let st = unsafe { dsekp_device_new(id.as_ptr(), SECRET.as_ptr(), 4, SALT.as_ptr(), 16, 0, &mut dev) };
    assert_eq!(st, DsekpStatus::InvalidArgument);

    // Stale init: the ack is still produced, marked rejected.
    let mut init = ptr::null_mut();
    unsafe { dsekp_device_begin_session(p.device, T0, &mut init) };
    let init = take(init);
    let st = unsafe { dsekp_edge_handle_init(p.edge, init.as_ptr(), init.len(), T0 + 121_000, &mut ack) };
    assert_eq!(st, DsekpStatus::Rejected);
    let ack = take(ack);
    assert!(ack.contains("\"status\":\"rejected\""));
    assert!(last_error().starts_with("stale_timestamp: "), "{}", last_error());
    let st = unsafe { dsekp_device_on_ack(p.device, ack.as_ptr(), ack.len(), T0 + 121_100) };
    assert_eq!(st, DsekpStatus::Rejected);

    unsafe {
        dsekp_device_free(ptr::null_mut());
        dsekp_edge_free(ptr::null_mut());
        dsekp_string_free(ptr::null_mut());
    }
}

#[test]
fn primitives_match_core() {
    let nonce = [7u8; 12];
    let mut secret = [0u8; 32];
    let st = unsafe {
        dsekp_derive_session_secret(SECRET.as_ptr(), 32, SALT.as_ptr(), 16, nonce.as_ptr(), 513, 1_700_000_000, secret.as_mut_ptr())
    };
    assert_eq!(st, DsekpStatus::Ok);
    let id = dsekp::crypto::DeviceIdentity::new("esp32-01", SECRET, SALT).unwrap();
    let params = dsekp::crypto::SessionParams { dev_nonce: nonce, sess_ctr: 513, timestamp_t: 1_700_000_000 };
    assert_eq!(&secret, dsekp::crypto::derive_session_secret(&id, &params).bytes());

    let key = [3u8; 16];
    let iv = [9u8; 12];
    let pt = b"hello sensor";
    let mut ct = [0u8; 12];
    let mut tag = [0u8; 16];
    let st = unsafe {
        dsekp_aead_seal(key.as_ptr(), iv.as_ptr(), b"aad".as_ptr(), 3, pt.as_ptr(), pt.len(), ct.as_mut_ptr(), tag.as_mut_ptr())
    };
    assert_eq!(st, DsekpStatus::Ok);
    let mut back = [0u8; 12];
    let st = unsafe {
        dsekp_aead_open(key.as_ptr(), iv.as_ptr(), b"aad".as_ptr(), 3, ct.as_ptr(), ct.len(), tag.as_ptr(), back.as_mut_ptr())
    };
    assert_eq!(st, DsekpStatus::Ok);
    assert_eq!(&back, pt);
    tag[0] ^= 1;
    let st = unsafe {
        dsekp_aead_open(key.as_ptr(), iv.as_ptr(), b"aad".as_ptr(), 3, ct.as_ptr(), ct.len(), tag.as_ptr(), back.as_mut_ptr())
    };
    assert_eq!(st, DsekpStatus::AuthFailure);
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/dsekp.h")).unwrap();
    for sym in [
        "typedef struct DsekpDevice DsekpDevice;",
        "typedef struct DsekpEdge DsekpEdge;",
        "DSEKP_STATUS_AUTH_FAILURE = 4",
        "dsekp_last_error_message(void)",
        "dsekp_string_free(",
        "dsekp_derive_session_secret(",
        "dsekp_aead_seal(",
        "dsekp_aead_open(",
        "dsekp_device_new(",
        "dsekp_device_free(",
        "dsekp_device_begin_session(",
        "dsekp_device_on_ack(",
        "dsekp_device_seal(",
        "dsekp_edge_new(",
        "dsekp_edge_free(",
        "dsekp_edge_register(",
        "dsekp_edge_handle_init(",
        "dsekp_edge_handle_data(",
        "dsekp_edge_session_count(",
    ] {
        assert!(header.contains(sym), "header lacks {sym}");
    }
}

#[test]
fn header_compiles_as_c() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("check.c");
    std::fs::write(
        &src,
        "#include \"dsekp.h\"\nint main(void) { DsekpEdge *e = 0; return dsekp_edge_new(0, 0, &e) == DSEKP_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let status = match Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-fsyntax-only")
        .arg("-I")
        .arg(&dir)
        .arg(&src)
        .status()
    {
        Ok(s) => s,
        Err(_) => {
            eprintln!("no C compiler available; skipping");
            return;
        }
    };
    assert!(status.success());
}
