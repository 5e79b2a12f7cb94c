//! Reference implementations used as test oracles. They share no code with
//! the library beyond the SHA-256 compression function.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

// ---------------------------------------------------------------- vectors

/// Blocks of `key = value` lines separated by blank lines; `#` starts a
/// comment line.
pub fn read_vectors(name: &str) -> Vec<BTreeMap<String, String>> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/vectors").join(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let mut out = Vec::new();
    let mut cur = BTreeMap::new();
    for line in text.lines().map(str::trim) {
        if line.starts_with('#') {
            continue;
        }
        if line.is_empty() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            continue;
        }
        let (k, v) = line.split_once('=').expect("key = value");
        cur.insert(k.trim().to_owned(), v.trim().to_owned());
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

pub fn hex_field(block: &BTreeMap<String, String>, key: &str) -> Vec<u8> {
    hex::decode(&block[key]).unwrap_or_else(|e| panic!("{key}: {e}"))
}

// ------------------------------------------------------------ HMAC / HKDF

/// HMAC-SHA256 written out from the definition (block size 64).
pub fn oracle_hmac(key: &[u8], data: &[u8]) -> [u8; 32] {
    let mut k = [0u8; 64];
    if key.len() > 64 {
        k[..32].copy_from_slice(&Sha256::digest(key));
    } else {
        k[..key.len()].copy_from_slice(key);
    }
    let ipad: Vec<u8> = k.iter().map(|b| b ^ 0x36).collect();
    let opad: Vec<u8> = k.iter().map(|b| b ^ 0x5c).collect();
    let inner = Sha256::new().chain_update(&ipad).chain_update(data).finalize();
    Sha256::new().chain_update(&opad).chain_update(inner).finalize().into()
}

/// Extract-then-expand; an empty salt means 32 zero bytes.
pub fn oracle_hkdf(salt: &[u8], ikm: &[u8], info: &[u8], len: usize) -> Vec<u8> {
    let salt = if salt.is_empty() { vec![0u8; 32] } else { salt.to_vec() };
    let prk = oracle_hmac(&salt, ikm);
    let mut okm = Vec::new();
    let mut t: Vec<u8> = Vec::new();
    let mut i = 1u8;
    while okm.len() < len {
        let mut msg = t.clone();
        msg.extend_from_slice(info);
        msg.push(i);
        t = oracle_hmac(&prk, &msg).to_vec();
        okm.extend_from_slice(&t);
        i += 1;
    }
    okm.truncate(len);
    okm
}

// ------------------------------------------------------------- statistics

pub fn o_mean(xs: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in xs {
        s += x;
    }
    s / xs.len() as f64
}

pub fn o_var(xs: &[f64]) -> f64 {
    let m = o_mean(xs);
    let mut s = 0.0;
    for x in xs {
        s += (x - m) * (x - m);
    }
    s / (xs.len() as f64 - 1.0)
}

fn o_sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    // insertion sort, deliberately naive
    for i in 1..v.len() {
        let mut j = i;
        while j > 0 && v[j - 1] > v[j] {
            v.swap(j - 1, j);
            j -= 1;
        }
    }
    v
}

pub fn o_median(xs: &[f64]) -> f64 {
    let s = o_sorted(xs);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

/// Smallest sample value whose empirical CDF reaches `per_mille / 1000`,
/// compared in exact integer arithmetic.
pub fn o_percentile(xs: &[f64], per_mille: u64) -> f64 {
    let s = o_sorted(xs);
    let n = s.len() as u64;
    for &x in &s {
        let at_or_below = xs.iter().filter(|&&y| y <= x).count() as u64;
        if at_or_below * 1000 >= per_mille * n {
            return x;
        }
    }
    s[s.len() - 1]
}

/// Lanczos approximation (g = 7, n = 9).
pub fn ln_gamma(x: f64) -> f64 {
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        return (std::f64::consts::PI / (std::f64::consts::PI * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + 7.5;
    for (i, c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, eps: f64) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = (a + b) / 2.0;
        let fm = f(m);
        (m, fm, (b - a) / 6.0 * (fa + 4.0 * fm + fb))
    }
    #[allow(clippy::too_many_arguments)]
    fn rec(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        eps: f64,
        whole: f64,
        m: f64,
        fm: f64,
        depth: u32,
    ) -> f64 {
        let (lm, flm, left) = simpson(f, a, fa, m, fm);
        let (rm, frm, right) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * eps {
            return left + right + delta / 15.0;
        }
        rec(f, a, fa, m, fm, eps / 2.0, left, lm, flm, depth - 1)
            + rec(f, m, fm, b, fb, eps / 2.0, right, rm, frm, depth - 1)
    }
    let (fa, fb) = (f(a), f(b));
    let (m, fm, whole) = simpson(f, a, fa, b, fb);
    rec(f, a, fa, b, fb, eps, whole, m, fm, 50)
}

/// Two-sided tail probability of Student's t by integrating the density.
pub fn o_t_two_sided(t: f64, df: f64) -> f64 {
    let c = (ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0)).exp() / (df * std::f64::consts::PI).sqrt();
    let pdf = move |x: f64| c * (1.0 + x * x / df).powf(-(df + 1.0) / 2.0);
    let inner = adaptive_simpson(&pdf, 0.0, t.abs(), 1e-13);
    (1.0 - 2.0 * inner).clamp(0.0, 1.0)
}

pub fn o_normal_two_sided(z: f64) -> f64 {
    let c = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
    let pdf = move |x: f64| c * (-x * x / 2.0).exp();
    let inner = adaptive_simpson(&pdf, 0.0, z.abs(), 1e-13);
    (1.0 - 2.0 * inner).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy)]
pub struct OracleSig {
    pub t_stat: f64,
    pub welch_df: f64,
    pub t_p: f64,
    pub u_stat: f64,
    pub ranksum_p: f64,
    pub cohens_d: f64,
    pub cliffs_delta: f64,
}

pub fn o_significance(a: &[f64], b: &[f64]) -> OracleSig {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (o_mean(a), o_mean(b));
    let (va, vb) = (o_var(a), o_var(b));
    let se2 = va / na + vb / nb;
    let t_stat = (ma - mb) / se2.sqrt();
    let welch_df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let t_p = o_t_two_sided(t_stat, welch_df);

    let (mut gt, mut lt, mut eq) = (0.0, 0.0, 0.0);
    for x in a {
        for y in b {
            if x > y {
                gt += 1.0;
            } else if x < y {
                lt += 1.0;
            } else {
                eq += 1.0;
            }
        }
    }
    let u_stat = gt + eq / 2.0;
    let cliffs_delta = (gt - lt) / (na * nb);

    // tie groups over the pooled sample, by exact value
    let mut groups: BTreeMap<u64, f64> = BTreeMap::new();
    for x in a.iter().chain(b) {
        *groups.entry(x.to_bits()).or_default() += 1.0;
    }
    let n = na + nb;
    let tie: f64 = groups.values().map(|t| t * t * t - t).sum();
    let sigma = (na * nb / 12.0 * ((n + 1.0) - tie / (n * (n - 1.0)))).sqrt();
    let ranksum_p = o_normal_two_sided((u_stat - na * nb / 2.0) / sigma);

    let pooled = (((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0)).sqrt();
    OracleSig {
        t_stat,
        welch_df,
        t_p,
        u_stat,
        ranksum_p,
        cohens_d: (ma - mb) / pooled,
        cliffs_delta,
    }
}

/// Random sample of size 2..=20 with a fair chance of ties.
pub fn random_sample(rng: &mut impl rand::Rng) -> Vec<f64> {
    let n = rng.gen_range(2..=20);
    let tied = rng.gen_bool(0.5);
    let shift: f64 = rng.gen_range(-50.0..50.0);
    loop {
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                if tied {
                    rng.gen_range(0..8) as f64 * 10.0 + shift
                } else {
                    rng.gen_range(0.0..500.0) + shift
                }
            })
            .collect();
        if o_var(&xs) > 0.0 {
            return xs;
        }
    }
}

/// `|a - b| <= tol`, scaled by the magnitude once it exceeds 1.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}
