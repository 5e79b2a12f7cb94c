//! Packet logs and the comparison statistics computed from them.
//!
//! Client and server logs are CSV files whose column order is fixed per
//! variant. The analysis side works on the server log: latency
//! distribution, 1-second throughput bins, payload size, reliability and the
//! two-sample significance block used to compare the baseline with session
//! rekeying.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};
use thiserror::Error;

/// Latencies above this many milliseconds are excluded from analysis.
pub const OUTLIER_THRESHOLD_MS: f64 = 10_000.0;
const Z_95: f64 = 1.96;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("baseline mean payload must be positive, got {0}")]
    DivisionDomain(f64),
    #[error("both samples have zero variance but different means")]
    ZeroVariance,
    #[error("accepted count {accepted} exceeds sent count {sent}")]
    InvalidCounts { sent: u64, accepted: u64 },
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Psk,
    Dsekp,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Psk => "psk",
            Variant::Dsekp => "dsekp",
        }
    }

    pub fn client_columns(self) -> &'static [&'static str] {
        match self {
            Variant::Psk => &[
                "seq",
                "timestamp",
                "dev_id",
                "plaintext",
                "iv",
                "tag",
                "ciphertext",
                "sendts_ms",
                "payload_size",
            ],
            Variant::Dsekp => &[
                "seq",
                "sessctr_id",
                "timestamp",
                "dev_id",
                "plaintext",
                "iv",
                "tag",
                "ciphertext",
                "sendts_ms",
                "payload_size",
            ],
        }
    }

    pub fn server_columns(self) -> &'static [&'static str] {
        match self {
            Variant::Psk => &[
                "seq",
                "timestamp",
                "dev_id",
                "ciphertext",
                "iv",
                "tag",
                "plaintext",
                "recvts_ms",
                "latency_ms",
                "payload_size",
                "bin_1s",
                "throughput",
            ],
            Variant::Dsekp => &[
                "seq",
                "timestamp",
                "dev_id",
                "sessctr_id",
                "ciphertext",
                "iv",
                "tag",
                "plaintext",
                "recvts_ms",
                "latency_ms",
                "payload_size",
                "bin_1s",
                "throughput",
            ],
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "psk" => Ok(Variant::Psk),
            "dsekp" => Ok(Variant::Dsekp),
            other => Err(format!("unknown mode {other:?} (expected psk or dsekp)")),
        }
    }
}

/// ISO-8601 UTC with millisecond precision.
pub fn iso_timestamp(epoch_ms: u64) -> String {
    chrono::DateTime::from_timestamp_millis(epoch_ms as i64)
        .map(|t| t.format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string())
        .unwrap_or_default()
}

/// One row of `client_logs.csv`. Binary fields are lowercase hex.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientLogRecord {
    pub seq: u64,
    pub sessctr_id: Option<u16>,
    pub timestamp: String,
    pub dev_id: String,
    pub plaintext: String,
    pub iv: String,
    pub tag: String,
    pub ciphertext: String,
    pub sendts_ms: u64,
    pub payload_size: usize,
}

/// One row of `server_logs.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerLogRecord {
    pub seq: u64,
    pub timestamp: String,
    pub dev_id: String,
    pub sessctr_id: Option<u16>,
    pub ciphertext: String,
    pub iv: String,
    pub tag: String,
    pub plaintext: String,
    pub recvts_ms: u64,
    pub latency_ms: f64,
    pub payload_size: usize,
    pub bin_1s: u64,
    /// Bits per second of the record's 1-second bin.
    pub throughput: f64,
}

impl ServerLogRecord {
    /// Identity used for duplicate accounting.
    pub fn packet_key(&self) -> (String, Option<u16>, u64) {
        (self.dev_id.clone(), self.sessctr_id, self.seq)
    }
}

fn check_variant(has_ctr: bool, variant: Variant) -> Result<(), MetricsError> {
    match (has_ctr, variant) {
        (true, Variant::Dsekp) | (false, Variant::Psk) => Ok(()),
        _ => Err(MetricsError::SchemaMismatch(format!(
            "record {} sessctr_id for the {} schema",
            if has_ctr { "has" } else { "lacks" },
            variant.as_str()
        ))),
    }
}

pub fn write_client_csv<W: Write>(
    out: W,
    records: &[ClientLogRecord],
    variant: Variant,
) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(variant.client_columns())?;
    for r in records {
        check_variant(r.sessctr_id.is_some(), variant)?;
        let mut row = vec![r.seq.to_string()];
        if let Some(ctr) = r.sessctr_id {
            row.push(ctr.to_string());
        }
        row.extend([
            r.timestamp.clone(),
            r.dev_id.clone(),
            r.plaintext.clone(),
            r.iv.clone(),
            r.tag.clone(),
            r.ciphertext.clone(),
            r.sendts_ms.to_string(),
            r.payload_size.to_string(),
        ]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_server_csv<W: Write>(
    out: W,
    records: &[ServerLogRecord],
    variant: Variant,
) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(variant.server_columns())?;
    for r in records {
        check_variant(r.sessctr_id.is_some(), variant)?;
        let mut row = vec![r.seq.to_string(), r.timestamp.clone(), r.dev_id.clone()];
        if let Some(ctr) = r.sessctr_id {
            row.push(ctr.to_string());
        }
        row.extend([
            r.ciphertext.clone(),
            r.iv.clone(),
            r.tag.clone(),
            r.plaintext.clone(),
            r.recvts_ms.to_string(),
            format!("{:.3}", r.latency_ms),
            r.payload_size.to_string(),
            r.bin_1s.to_string(),
            format!("{:.1}", r.throughput),
        ]);
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a server log file; an empty slice yields a header-only file.
pub fn write_csv(
    records: &[ServerLogRecord],
    path: &Path,
    variant: Variant,
) -> Result<(), MetricsError> {
    write_server_csv(File::create(path)?, records, variant)
}

fn detect(header: &csv::StringRecord, pick: fn(Variant) -> &'static [&'static str]) -> Option<Variant> {
    [Variant::Psk, Variant::Dsekp]
        .into_iter()
        .find(|v| header.iter().eq(pick(*v).iter().copied()))
}

fn field<T: std::str::FromStr>(row: &csv::StringRecord, idx: usize, name: &str) -> Result<T, MetricsError> {
    row.get(idx)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| MetricsError::SchemaMismatch(format!("bad {name} value in row {:?}", row.position().map(|p| p.line()))))
}

fn text(row: &csv::StringRecord, idx: usize) -> String {
    row.get(idx).unwrap_or_default().to_owned()
}

pub fn read_server_csv<R: Read>(input: R) -> Result<(Variant, Vec<ServerLogRecord>), MetricsError> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    let variant = detect(&header, Variant::server_columns).ok_or_else(|| {
        MetricsError::SchemaMismatch(format!("unrecognized server log header {:?}", header))
    })?;
    let off = usize::from(variant == Variant::Dsekp);
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row?;
        records.push(ServerLogRecord {
            seq: field(&row, 0, "seq")?,
            timestamp: text(&row, 1),
            dev_id: text(&row, 2),
            sessctr_id: if off == 1 {
                Some(field(&row, 3, "sessctr_id")?)
            } else {
                None
            },
            ciphertext: text(&row, 3 + off),
            iv: text(&row, 4 + off),
            tag: text(&row, 5 + off),
            plaintext: text(&row, 6 + off),
            recvts_ms: field(&row, 7 + off, "recvts_ms")?,
            latency_ms: field(&row, 8 + off, "latency_ms")?,
            payload_size: field(&row, 9 + off, "payload_size")?,
            bin_1s: field(&row, 10 + off, "bin_1s")?,
            throughput: field(&row, 11 + off, "throughput")?,
        });
    }
    Ok((variant, records))
}

pub fn read_client_csv<R: Read>(input: R) -> Result<(Variant, Vec<ClientLogRecord>), MetricsError> {
    let mut rdr = csv::Reader::from_reader(input);
    let header = rdr.headers()?.clone();
    let variant = detect(&header, Variant::client_columns).ok_or_else(|| {
        MetricsError::SchemaMismatch(format!("unrecognized client log header {:?}", header))
    })?;
    let off = usize::from(variant == Variant::Dsekp);
    let mut records = Vec::new();
    for row in rdr.records() {
        let row = row?;
        records.push(ClientLogRecord {
            seq: field(&row, 0, "seq")?,
            sessctr_id: if off == 1 {
                Some(field(&row, 1, "sessctr_id")?)
            } else {
                None
            },
            timestamp: text(&row, 1 + off),
            dev_id: text(&row, 2 + off),
            plaintext: text(&row, 3 + off),
            iv: text(&row, 4 + off),
            tag: text(&row, 5 + off),
            ciphertext: text(&row, 6 + off),
            sendts_ms: field(&row, 7 + off, "sendts_ms")?,
            payload_size: field(&row, 8 + off, "payload_size")?,
        });
    }
    Ok((variant, records))
}

/// Drops latencies above [`OUTLIER_THRESHOLD_MS`]; returns the kept samples
/// and the number excluded.
pub fn filter_outliers(latencies: &[f64]) -> (Vec<f64>, usize) {
    let kept: Vec<f64> = latencies
        .iter()
        .copied()
        .filter(|&l| l <= OUTLIER_THRESHOLD_MS)
        .collect();
    let excluded = latencies.len() - kept.len();
    (kept, excluded)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub n: usize,
    pub mean: f64,
    pub median: f64,
    pub std: f64,
    pub ci95_low: f64,
    pub ci95_high: f64,
    pub p95: f64,
    pub p99: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
fn variance(xs: &[f64], m: f64) -> f64 {
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Nearest-rank percentile: the `ceil(q * n)`-th order statistic.
pub fn percentile_nearest_rank(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    // tolerate representation error in q * n, e.g. 0.95 * 20
    let rank = ((q * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    sorted[rank - 1]
}

pub fn latency_stats(latencies: &[f64]) -> Result<LatencyStats, MetricsError> {
    let n = latencies.len();
    if n < 2 {
        return Err(MetricsError::TooFewSamples { need: 2, got: n });
    }
    let s = sorted(latencies);
    let m = mean(latencies);
    let std = variance(latencies, m).sqrt();
    let median = if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    };
    let half = Z_95 * std / (n as f64).sqrt();
    Ok(LatencyStats {
        n,
        mean: m,
        median,
        std,
        ci95_low: m - half,
        ci95_high: m + half,
        p95: percentile_nearest_rank(&s, 0.95),
        p99: percentile_nearest_rank(&s, 0.99),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThroughputBin {
    pub bin_1s: u64,
    pub pps: u64,
    pub bps: u64,
}

/// Groups records by `bin_1s`. Bins without packets are absent.
pub fn throughput_bins(records: &[ServerLogRecord]) -> Vec<ThroughputBin> {
    let mut bins: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
    for r in records {
        let e = bins.entry(r.bin_1s).or_default();
        e.0 += 1;
        e.1 += 8 * r.payload_size as u64;
    }
    bins.into_iter()
        .map(|(bin_1s, (pps, bps))| ThroughputBin { bin_1s, pps, bps })
        .collect()
}

/// Fills each record's `throughput` with the bit rate of its bin.
pub fn annotate_throughput(records: &mut [ServerLogRecord]) {
    let bins: BTreeMap<u64, u64> = throughput_bins(records)
        .into_iter()
        .map(|b| (b.bin_1s, b.bps))
        .collect();
    for r in records {
        r.throughput = bins[&r.bin_1s] as f64;
    }
}

pub fn payload_overhead_pct(mean_psk_bytes: f64, mean_dsekp_bytes: f64) -> Result<f64, MetricsError> {
    if mean_psk_bytes.is_nan() || mean_psk_bytes <= 0.0 {
        return Err(MetricsError::DivisionDomain(mean_psk_bytes));
    }
    Ok(100.0 * (mean_dsekp_bytes - mean_psk_bytes) / mean_psk_bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reliability {
    pub sent: u64,
    pub accepted: u64,
    pub duplicates: u64,
    pub losses: u64,
    pub pct: f64,
}

/// `accepted` counts distinct packets accepted; `duplicates` counts extra
/// copies on top of those.
pub fn reliability(sent: u64, accepted: u64, duplicates: u64) -> Result<Reliability, MetricsError> {
    if accepted > sent {
        return Err(MetricsError::InvalidCounts { sent, accepted });
    }
    let pct = if sent == 0 {
        0.0
    } else {
        100.0 * accepted as f64 / sent as f64
    };
    Ok(Reliability {
        sent,
        accepted,
        duplicates,
        losses: sent - accepted,
        pct,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub t_stat: f64,
    pub welch_df: f64,
    pub t_p: f64,
    pub u_stat: f64,
    pub ranksum_p: f64,
    pub cohens_d: f64,
    pub cliffs_delta: f64,
}

/// Average ranks (1-based) of the pooled sample, plus the tie-group sizes.
fn pooled_ranks(a: &[f64], b: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let mut pooled: Vec<(f64, usize)> = a
        .iter()
        .chain(b)
        .copied()
        .enumerate()
        .map(|(i, x)| (x, i))
        .collect();
    pooled.sort_by(|x, y| x.0.total_cmp(&y.0));
    let mut ranks = vec![0.0; pooled.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < pooled.len() {
        let mut j = i;
        while j + 1 < pooled.len() && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for p in &pooled[i..=j] {
            ranks[p.1] = avg;
        }
        if j > i {
            ties.push(j - i + 1);
        }
        i = j + 1;
    }
    (ranks, ties)
}

/// Two-sample comparison of `a` against `b`. Signs follow `a - b`: a faster
/// (lower-latency) `a` yields negative `cohens_d` and `cliffs_delta`.
///
/// - Welch t-test, two-sided p from the Student t distribution.
/// - Mann-Whitney U (rank-sum), two-sided p from the tie-corrected normal
///   approximation without continuity correction.
/// - Cohen's d with the pooled standard deviation.
/// - Cliff's delta, `(#(a > b) - #(a < b)) / (n_a * n_b)`.
pub fn significance(a: &[f64], b: &[f64]) -> Result<Significance, MetricsError> {
    for xs in [a, b] {
        if xs.len() < 2 {
            return Err(MetricsError::TooFewSamples { need: 2, got: xs.len() });
        }
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a), mean(b));
    let (va, vb) = (variance(a, ma), variance(b, mb));

    let se2 = va / na + vb / nb;
    let (t_stat, welch_df, t_p) = if se2 == 0.0 {
        if ma != mb {
            return Err(MetricsError::ZeroVariance);
        }
        (0.0, na + nb - 2.0, 1.0)
    } else {
        let t = (ma - mb) / se2.sqrt();
        let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
        let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
        (t, df, (2.0 * dist.sf(t.abs())).min(1.0))
    };

    let pooled_sd = (((na - 1.0) * va + (nb - 1.0) * vb) / (na + nb - 2.0)).sqrt();
    let cohens_d = if pooled_sd == 0.0 { 0.0 } else { (ma - mb) / pooled_sd };

    let (ranks, ties) = pooled_ranks(a, b);
    let rank_sum_a: f64 = ranks[..a.len()].iter().sum();
    let u_stat = rank_sum_a - na * (na + 1.0) / 2.0;
    let n = na + nb;
    let tie_term: f64 = ties.iter().map(|&t| (t as f64).powi(3) - t as f64).sum();
    let sigma2 = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    let ranksum_p = if sigma2 <= 0.0 {
        1.0
    } else {
        let z = (u_stat - na * nb / 2.0) / sigma2.sqrt();
        let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
        (2.0 * std_normal.sf(z.abs())).min(1.0)
    };
    // U counts ties as one half, so 2U - n_a n_b = #(a > b) - #(a < b)
    let cliffs_delta = (2.0 * u_stat - na * nb) / (na * nb);

    Ok(Significance {
        t_stat,
        welch_df,
        t_p,
        u_stat,
        ranksum_p,
        cohens_d,
        cliffs_delta,
    })
}

/// Analysis of one run's server log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: Variant,
    pub packets_logged: usize,
    pub outliers_excluded: usize,
    pub latency: LatencyStats,
    pub mean_payload_bytes: f64,
    /// Mean of the per-bin packet counts over non-empty 1-second bins.
    pub mean_pps: f64,
    /// Distinct packets divided by the span of receive times, in seconds.
    pub interval_rate_pps: f64,
    pub mean_bps: f64,
    /// Present when the number of sent packets is known.
    pub reliability: Option<Reliability>,
    pub duplicates: u64,
}

impl RunSummary {
    pub fn from_records(
        variant: Variant,
        records: &[ServerLogRecord],
        sent: Option<u64>,
    ) -> Result<Self, MetricsError> {
        let latencies: Vec<f64> = records.iter().map(|r| r.latency_ms).collect();
        let (kept, outliers_excluded) = filter_outliers(&latencies);
        let latency = latency_stats(&kept)?;
        let mean_payload_bytes =
            records.iter().map(|r| r.payload_size as f64).sum::<f64>() / records.len() as f64;

        let bins = throughput_bins(records);
        let mean_pps = bins.iter().map(|b| b.pps as f64).sum::<f64>() / bins.len() as f64;
        let mean_bps = bins.iter().map(|b| b.bps as f64).sum::<f64>() / bins.len() as f64;

        let unique: BTreeSet<_> = records.iter().map(ServerLogRecord::packet_key).collect();
        let duplicates = (records.len() - unique.len()) as u64;
        let first = records.iter().map(|r| r.recvts_ms).min().unwrap_or(0);
        let last = records.iter().map(|r| r.recvts_ms).max().unwrap_or(0);
        let span_s = (last - first) as f64 / 1000.0;
        let interval_rate_pps = if span_s > 0.0 {
            (unique.len() as f64 - 1.0) / span_s
        } else {
            0.0
        };
        let reliability = sent
            .map(|s| reliability(s, unique.len() as u64, duplicates))
            .transpose()?;

        Ok(Self {
            variant,
            packets_logged: records.len(),
            outliers_excluded,
            latency,
            mean_payload_bytes,
            mean_pps,
            interval_rate_pps,
            mean_bps,
            reliability,
            duplicates,
        })
    }
}

/// Side-by-side comparison of two runs, `a` being the reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: RunSummary,
    pub b: RunSummary,
    pub latency_delta_ms: f64,
    pub payload_overhead_pct: f64,
    pub significance: Option<Significance>,
}

impl Comparison {
    pub fn new(
        a: RunSummary,
        b: RunSummary,
        a_latencies: &[f64],
        b_latencies: &[f64],
    ) -> Result<Self, MetricsError> {
        let payload_overhead_pct = payload_overhead_pct(a.mean_payload_bytes, b.mean_payload_bytes)?;
        let (a_kept, _) = filter_outliers(a_latencies);
        let (b_kept, _) = filter_outliers(b_latencies);
        let significance = match significance(&a_kept, &b_kept) {
            Ok(s) => Some(s),
            Err(MetricsError::ZeroVariance) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            latency_delta_ms: b.latency.mean - a.latency.mean,
            payload_overhead_pct,
            significance,
            a,
            b,
        })
    }

    /// Row labels of the text table, top to bottom.
    pub const ROW_LABELS: [&'static str; 8] = [
        "Mean latency (ms)",
        "Median latency (ms)",
        "Latency p95 / p99 (ms)",
        "Mean payload (bytes)",
        "Mean packet rate (pps)",
        "Payload overhead (%)",
        "t-test p / rank-sum p",
        "Cohen's d / Cliff's delta",
    ];

    /// Aligned text table with one row per entry of [`Self::ROW_LABELS`].
    pub fn render_table(&self) -> String {
        let (a, b) = (&self.a, &self.b);
        let sig = self.significance.as_ref();
        let rows: [(String, String); 8] = [
            (format!("{:.2}", a.latency.mean), format!("{:.2}", b.latency.mean)),
            (format!("{:.2}", a.latency.median), format!("{:.2}", b.latency.median)),
            (
                format!("{:.2} / {:.2}", a.latency.p95, a.latency.p99),
                format!("{:.2} / {:.2}", b.latency.p95, b.latency.p99),
            ),
            (
                format!("{:.1}", a.mean_payload_bytes),
                format!("{:.1}", b.mean_payload_bytes),
            ),
            (format!("{:.2}", a.mean_pps), format!("{:.2}", b.mean_pps)),
            ("--".into(), format!("{:.2}", self.payload_overhead_pct)),
            (
                sig.map_or("n/a".into(), |s| format!("{:.3e} / {:.3e}", s.t_p, s.ranksum_p)),
                String::new(),
            ),
            (
                sig.map_or("n/a".into(), |s| format!("{:.3} / {:.3}", s.cohens_d, s.cliffs_delta)),
                String::new(),
            ),
        ];
        let head_a = a.variant.as_str().to_uppercase();
        let head_b = b.variant.as_str().to_uppercase();
        let w0 = Self::ROW_LABELS.iter().map(|l| l.len()).max().unwrap_or(0).max(6);
        let w1 = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(head_a.len());
        let w2 = rows.iter().map(|r| r.1.len()).max().unwrap_or(0).max(head_b.len());
        let mut out = format!("{:<w0$}  {:>w1$}  {:>w2$}\n", "Metric", head_a, head_b);
        out.push_str(&format!("{}\n", "-".repeat(w0 + w1 + w2 + 4)));
        for (label, (x, y)) in Self::ROW_LABELS.iter().zip(rows) {
            out.push_str(format!("{label:<w0$}  {x:>w1$}  {y:>w2$}").trim_end());
            out.push('\n');
        }
        out
    }
}

/// Empirical CDF points `(latency, fraction <= latency)`, one per distinct value.
pub fn cdf_series(latencies: &[f64]) -> Vec<(f64, f64)> {
    let s = sorted(latencies);
    let n = s.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, x) in s.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == *x => last.1 = frac,
            _ => out.push((*x, frac)),
        }
    }
    out
}

/// Boxplot five-number summary (min, q1, median, q3, max) with nearest-rank quartiles.
pub fn boxplot_quartiles(latencies: &[f64]) -> Option<[f64; 5]> {
    if latencies.is_empty() {
        return None;
    }
    let s = sorted(latencies);
    Some([
        s[0],
        percentile_nearest_rank(&s, 0.25),
        percentile_nearest_rank(&s, 0.5),
        percentile_nearest_rank(&s, 0.75),
        s[s.len() - 1],
    ])
}

/// Payload size histogram: size in bytes to packet count.
pub fn payload_histogram(records: &[ServerLogRecord]) -> BTreeMap<usize, u64> {
    let mut h = BTreeMap::new();
    for r in records {
        *h.entry(r.payload_size).or_default() += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(seq: u64, ctr: Option<u16>, recv: u64, latency: f64, size: usize) -> ServerLogRecord {
        ServerLogRecord {
            seq,
            timestamp: iso_timestamp(recv),
            dev_id: "esp32-01".into(),
            sessctr_id: ctr,
            ciphertext: "00ff".into(),
            iv: "00".repeat(12),
            tag: "11".repeat(16),
            plaintext: "T=25.0C,H=40.0%".into(),
            recvts_ms: recv,
            latency_ms: latency,
            payload_size: size,
            bin_1s: recv / 1000,
            throughput: 0.0,
        }
    }

    #[test]
    fn outlier_threshold() {
        assert_eq!(filter_outliers(&[100.0, 200.0, 11000.0]), (vec![100.0, 200.0], 1));
        assert_eq!(filter_outliers(&[10_000.0, 1.0]), (vec![10_000.0, 1.0], 0));
    }

    #[test]
    fn basic_latency_stats() {
        let s = latency_stats(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.median), (2.0, 2.0));
        let c = latency_stats(&[5.0; 4]).unwrap();
        assert_eq!((c.std, c.p95, c.p99), (0.0, 5.0, 5.0));
        assert!(matches!(
            latency_stats(&[1.0]),
            Err(MetricsError::TooFewSamples { need: 2, got: 1 })
        ));
    }

    #[test]
    fn nearest_rank_boundaries() {
        let xs: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(percentile_nearest_rank(&xs, 0.95), 19.0);
        assert_eq!(percentile_nearest_rank(&xs, 0.99), 20.0);
        let hundred: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile_nearest_rank(&hundred, 0.95), 95.0);
        assert_eq!(percentile_nearest_rank(&hundred, 0.99), 99.0);
    }

    #[test]
    fn single_bin_throughput() {
        let recs: Vec<_> = (0..10).map(|i| rec(i, None, 5_000 + i * 10, 1.0, 155)).collect();
        assert_eq!(
            throughput_bins(&recs),
            vec![ThroughputBin {
                bin_1s: 5,
                pps: 10,
                bps: 12_400
            }]
        );
    }

    #[test]
    fn empty_bins_are_absent() {
        let recs = vec![rec(1, None, 1_000, 1.0, 10), rec(2, None, 3_500, 1.0, 10)];
        let bins: Vec<u64> = throughput_bins(&recs).iter().map(|b| b.bin_1s).collect();
        assert_eq!(bins, vec![1, 3]);
    }

    #[test]
    fn overhead_arithmetic() {
        assert!((payload_overhead_pct(154.8, 170.8).unwrap() - 10.34).abs() < 0.01);
        assert_eq!(payload_overhead_pct(120.0, 120.0).unwrap(), 0.0);
        assert!((payload_overhead_pct(100.0, 116.0).unwrap() - 16.0).abs() < 1e-12);
        assert!(matches!(payload_overhead_pct(0.0, 1.0), Err(MetricsError::DivisionDomain(_))));
    }

    #[test]
    fn reliability_values() {
        assert_eq!(reliability(1000, 1000, 0).unwrap().pct, 100.0);
        let r = reliability(1000, 996, 0).unwrap();
        assert!((r.pct - 99.6).abs() < 1e-12);
        assert_eq!(r.losses, 4);
        assert!(reliability(1, 2, 0).is_err());
    }

    #[test]
    fn dominance_and_symmetry() {
        let s = significance(&[1.0, 2.0], &[3.0, 4.0]).unwrap();
        assert_eq!(s.cliffs_delta, -1.0);
        assert!(s.cohens_d < 0.0);
        let xs = [3.0, 1.0, 4.0, 1.0, 5.0];
        let same = significance(&xs, &xs).unwrap();
        assert_eq!((same.cohens_d, same.cliffs_delta), (0.0, 0.0));
        assert!((same.t_p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_cases() {
        let s = significance(&[5.0, 5.0], &[5.0, 5.0]).unwrap();
        assert_eq!((s.t_p, s.ranksum_p, s.cohens_d), (1.0, 1.0, 0.0));
        assert!(matches!(
            significance(&[1.0, 1.0], &[2.0, 2.0]),
            Err(MetricsError::ZeroVariance)
        ));
    }

    #[test]
    fn empty_run_writes_header_only() {
        let mut buf = Vec::new();
        write_server_csv(&mut buf, &[], Variant::Dsekp).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "seq,timestamp,dev_id,sessctr_id,ciphertext,iv,tag,plaintext,recvts_ms,latency_ms,payload_size,bin_1s,throughput\n"
        );
    }

    #[test]
    fn server_csv_roundtrip_is_identity() {
        let mut recs = vec![
            rec(1, Some(77), 1_700_000_000_283, 283.0, 171),
            rec(2, Some(77), 1_700_000_002_290, 290.0, 171),
        ];
        annotate_throughput(&mut recs);
        let mut first = Vec::new();
        write_server_csv(&mut first, &recs, Variant::Dsekp).unwrap();
        let (variant, back) = read_server_csv(first.as_slice()).unwrap();
        assert_eq!(variant, Variant::Dsekp);
        assert_eq!(back, recs);
        let mut second = Vec::new();
        write_server_csv(&mut second, &back, Variant::Dsekp).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn variant_mismatch_is_rejected() {
        let recs = vec![rec(1, Some(1), 1000, 1.0, 10)];
        assert!(matches!(
            write_server_csv(Vec::new(), &recs, Variant::Psk),
            Err(MetricsError::SchemaMismatch(_))
        ));
        assert!(matches!(
            read_server_csv("a,b\n1,2\n".as_bytes()),
            Err(MetricsError::SchemaMismatch(_))
        ));
    }

    #[test]
    fn iso_format() {
        assert_eq!(iso_timestamp(1_700_000_000_123), "2023-11-14T22:13:20.123Z");
    }

    #[test]
    fn summary_counts_duplicates() {
        let recs = vec![
            rec(1, None, 1_000, 10.0, 100),
            rec(1, None, 1_100, 12.0, 100),
            rec(2, None, 3_000, 11.0, 100),
        ];
        let s = RunSummary::from_records(Variant::Psk, &recs, Some(2)).unwrap();
        assert_eq!(s.duplicates, 1);
        assert_eq!(s.reliability.unwrap().pct, 100.0);
        assert_eq!(s.mean_pps, 1.5);
    }

    #[test]
    fn table_has_fixed_rows() {
        let recs: Vec<_> = (0..5).map(|i| rec(i, None, i * 2000, 100.0 + i as f64, 150)).collect();
        let s = RunSummary::from_records(Variant::Psk, &recs, None).unwrap();
        let lat: Vec<f64> = recs.iter().map(|r| r.latency_ms).collect();
        let c = Comparison::new(s.clone(), s, &lat, &lat).unwrap();
        let table = c.render_table();
        let labels: Vec<&str> = table.lines().skip(2).collect();
        assert_eq!(labels.len(), Comparison::ROW_LABELS.len());
        for (line, label) in labels.iter().zip(Comparison::ROW_LABELS) {
            assert!(line.starts_with(label), "{line}");
        }
        assert_eq!(c.payload_overhead_pct, 0.0);
    }

    #[test]
    fn cdf_and_quartiles() {
        let xs = [3.0, 1.0, 2.0, 2.0];
        assert_eq!(cdf_series(&xs), vec![(1.0, 0.25), (2.0, 0.75), (3.0, 1.0)]);
        assert_eq!(boxplot_quartiles(&xs), Some([1.0, 1.0, 2.0, 2.0, 3.0]));
        assert_eq!(boxplot_quartiles(&[]), None);
    }
}
