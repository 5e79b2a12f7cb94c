mod common;

use proptest::prelude::*;

use dsekp::crypto::{self, AeadEnvelope, DeviceIdentity, SessionParams};

use common::*;

#[test]
fn hkdf_vectors() {
    let cases = read_vectors("hkdf_sha256_rfc5869.txt");
    assert_eq!(cases.len(), 3);
    for c in &cases {
        let (salt, ikm, info) = (hex_field(c, "salt"), hex_field(c, "IKM"), hex_field(c, "info"));
        let len: usize = c["L"].parse().unwrap();
        assert_eq!(crypto::hkdf_extract(&salt, &ikm).to_vec(), hex_field(c, "PRK"), "case {}", c["Case"]);
        assert_eq!(crypto::hkdf_sha256(&salt, &ikm, &info, len).unwrap(), hex_field(c, "OKM"), "case {}", c["Case"]);
    }
}

#[test]
fn hmac_vectors() {
    let cases = read_vectors("hmac_sha256_rfc4231.txt");
    assert_eq!(cases.len(), 7);
    for c in &cases {
        let mac = crypto::hmac_sha256(&hex_field(c, "Key"), &hex_field(c, "Data"));
        let want = hex_field(c, "Mac");
        assert_eq!(&mac[..want.len()], &want[..], "case {}", c["Case"]);
    }
}

#[test]
fn gcm_vectors() {
    let cases = read_vectors("aes128_gcm_kat.txt");
    assert_eq!(cases.len(), 4);
    for c in &cases {
        let key: [u8; 16] = hex_field(c, "Key").try_into().unwrap();
        let iv: [u8; 12] = hex_field(c, "IV").try_into().unwrap();
        let aad = hex_field(c, "AAD");
        let env = crypto::aead_seal(&key, &iv, &aad, &hex_field(c, "PT"));
        assert_eq!(env.ciphertext, hex_field(c, "CT"), "count {}", c["Count"]);
        assert_eq!(env.tag.to_vec(), hex_field(c, "Tag"), "count {}", c["Count"]);
        assert_eq!(crypto::aead_open(&key, &env, &aad).unwrap(), hex_field(c, "PT"));
    }
}

#[test]
fn hkdf_rejects_oversized_output() {
    assert!(crypto::hkdf_sha256(b"s", b"k", b"", 255 * 32).is_ok());
    assert!(crypto::hkdf_sha256(b"s", b"k", b"", 255 * 32 + 1).is_err());
}

fn identity(secret: Vec<u8>, salt: Vec<u8>) -> DeviceIdentity {
    DeviceIdentity::new("esp32-07", secret, salt).unwrap()
}

proptest! {
    #[test]
    fn hmac_matches_oracle(key in prop::collection::vec(any::<u8>(), 0..150), data in prop::collection::vec(any::<u8>(), 0..300)) {
        prop_assert_eq!(crypto::hmac_sha256(&key, &data), oracle_hmac(&key, &data));
    }

    #[test]
    fn hkdf_matches_oracle(
        salt in prop::collection::vec(any::<u8>(), 1..80),
        ikm in prop::collection::vec(any::<u8>(), 0..80),
        info in prop::collection::vec(any::<u8>(), 0..40),
        len in 1usize..200,
    ) {
        prop_assert_eq!(crypto::hkdf_sha256(&salt, &ikm, &info, len).unwrap(), oracle_hkdf(&salt, &ikm, &info, len));
    }

    #[test]
    fn session_secret_matches_oracle(
        secret in prop::collection::vec(any::<u8>(), 32),
        salt in prop::collection::vec(any::<u8>(), 16),
        nonce in any::<[u8; 12]>(),
        ctr in any::<u16>(),
        t in any::<u32>(),
    ) {
        let id = identity(secret.clone(), salt.clone());
        let params = SessionParams { dev_nonce: nonce, sess_ctr: ctr, timestamp_t: t };
        let mut ikm = secret;
        ikm.extend_from_slice(&nonce);
        ikm.extend_from_slice(&ctr.to_be_bytes());
        ikm.extend_from_slice(&t.to_be_bytes());
        let want = oracle_hkdf(&salt, &ikm, &[], 32);
        prop_assert_eq!(crypto::derive_session_secret(&id, &params).bytes().to_vec(), want);
    }

    #[test]
    fn proof_verifies_only_its_payload(payload in prop::collection::vec(any::<u8>(), 0..100), flip in any::<prop::sample::Index>()) {
        let id = identity(vec![1; 32], vec![2; 16]);
        let params = SessionParams { dev_nonce: [3; 12], sess_ctr: 9, timestamp_t: 1 };
        let secret = crypto::derive_session_secret(&id, &params);
        let proof = crypto::compute_hmac_proof(&secret, &payload);
        prop_assert!(crypto::verify_hmac_proof(&secret, &payload, &proof));
        let mut bad = proof;
        let i = flip.index(bad.len());
        bad[i] ^= 1;
        prop_assert!(!crypto::verify_hmac_proof(&secret, &payload, &bad));
        prop_assert!(!crypto::verify_hmac_proof(&secret, &payload, &proof[..31]));
    }

    #[test]
    fn aead_roundtrip_and_tamper(
        key in any::<[u8; 16]>(),
        seq in any::<u64>(),
        pt in prop::collection::vec(any::<u8>(), 0..200),
        bit in any::<prop::sample::Index>(),
    ) {
        let iv = crypto::make_iv(&[0xaa, 0xbb, 0xcc, 0xdd], seq);
        prop_assert_eq!(&iv[4..], &seq.to_be_bytes()[..]);
        let aad = crypto::session_aad("esp32-01", 4, seq);
        let env = crypto::aead_seal(&key, &iv, &aad, &pt);
        prop_assert_eq!(env.ciphertext.len(), pt.len());
        prop_assert_eq!(crypto::aead_open(&key, &env, &aad).unwrap(), pt.clone());

        // one flipped bit anywhere in iv || ct || tag fails authentication
        let total = (12 + env.ciphertext.len() + 16) * 8;
        let b = bit.index(total);
        let mut bytes: Vec<u8> = env.iv.iter().chain(&env.ciphertext).chain(&env.tag).copied().collect();
        bytes[b / 8] ^= 1 << (b % 8);
        let n = env.ciphertext.len();
        let bad = AeadEnvelope {
            iv: bytes[..12].try_into().unwrap(),
            ciphertext: bytes[12..12 + n].to_vec(),
            tag: bytes[12 + n..].try_into().unwrap(),
        };
        prop_assert!(crypto::aead_open(&key, &bad, &aad).is_err());
        // the same packet under another position in the session fails too
        prop_assert!(crypto::aead_open(&key, &env, &crypto::session_aad("esp32-01", 4, seq ^ 1)).is_err());
    }

    #[test]
    fn ct_eq_agrees_with_eq(a in prop::collection::vec(any::<u8>(), 0..40), b in prop::collection::vec(any::<u8>(), 0..40)) {
        prop_assert_eq!(crypto::ct_eq(&a, &b), a == b);
        prop_assert!(crypto::ct_eq(&a, &a));
    }
}
