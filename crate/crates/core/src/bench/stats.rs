use std::fmt;
use std::str::FromStr;

use super::BenchError;

pub const DEFAULT_LEVEL: f64 = 0.99;

/// Indices `(low, high)` into `sorted` bounding the median at `level`
/// confidence, from the binomial(n, 1/2) law of order statistics.
///
/// When `n` is too small to reach `level` the widest interval is returned;
/// [`ci_coverage`] tells the actual coverage.
pub fn ci_median<T: PartialOrd>(sorted: &[T], level: f64) -> Result<(usize, usize), BenchError> {
    if sorted.is_empty() {
        return Err(BenchError::Usage("no samples".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(BenchError::Usage(format!("confidence level {level} outside (0, 1)")));
    }
    if sorted.windows(2).any(|w| !(w[0] <= w[1])) {
        return Err(BenchError::Unsorted);
    }
    let n = sorted.len();
    let l = lower_rank(n as u64, (1.0 - level) / 2.0) as usize;
    if l == 0 {
        return Ok((0, n - 1));
    }
    Ok((l - 1, n - l))
}

/// Largest `l` with `P(B <= l - 1) <= tail` for `B ~ Bin(n, 1/2)`, or 0.
fn lower_rank(n: u64, tail: f64) -> u64 {
    let log_tail = tail.ln();
    let mut log_pmf = -(n as f64) * std::f64::consts::LN_2;
    let mut log_cdf = f64::NEG_INFINITY;
    let mut l = 0;
    for k in 0..=n / 2 {
        log_cdf = log_add(log_cdf, log_pmf);
        if log_cdf > log_tail {
            break;
        }
        l = k + 1;
        log_pmf += ((n - k) as f64).ln() - ((k + 1) as f64).ln();
    }
    l
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Probability that the interval from [`ci_median`] with lower index `low`
/// covers the median of `n` samples.
pub fn ci_coverage(n: usize, low: usize) -> f64 {
    let n = n as u64;
    let mut log_pmf = -(n as f64) * std::f64::consts::LN_2;
    let mut log_cdf = f64::NEG_INFINITY;
    for k in 0..=(low as u64).min(n) {
        log_cdf = log_add(log_cdf, log_pmf);
        log_pmf += ((n - k) as f64).ln() - ((k + 1) as f64).ln();
    }
    1.0 - 2.0 * log_cdf.exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LatencyMode {
    RawTransport,
    Hot,
    Warm,
}

impl fmt::Display for LatencyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::RawTransport => "raw_transport",
            Self::Hot => "hot",
            Self::Warm => "warm",
        })
    }
}

impl FromStr for LatencyMode {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "raw" | "raw_transport" => Ok(Self::RawTransport),
            "hot" => Ok(Self::Hot),
            "warm" => Ok(Self::Warm),
            other => Err(BenchError::Usage(format!("unknown latency mode {other:?}"))),
        }
    }
}

/// Round-trip statistics in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencySummary {
    pub mode: LatencyMode,
    pub size: usize,
    pub reps: usize,
    pub median: f64,
    pub mean: f64,
    pub p99: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Too few samples for the requested confidence level.
    pub ci_saturated: bool,
}

impl LatencySummary {
    pub fn from_samples_ns(mode: LatencyMode, size: usize, samples_ns: &[u64], level: f64) -> Result<Self, BenchError> {
        let mut sorted = samples_ns.to_vec();
        sorted.sort_unstable();
        let (lo, hi) = ci_median(&sorted, level)?;
        let n = sorted.len();
        let secs = |ns: u64| ns as f64 / 1e9;
        Ok(Self {
            mode,
            size,
            reps: n,
            median: median_sorted(&sorted) / 1e9,
            mean: sorted.iter().map(|&v| v as f64).sum::<f64>() / n as f64 / 1e9,
            p99: secs(sorted[(n * 99).div_ceil(100).max(1) - 1]),
            ci_low: secs(sorted[lo]),
            ci_high: secs(sorted[hi]),
            ci_saturated: ci_coverage(n, lo) < level,
        })
    }
}

pub fn median_sorted(sorted: &[u64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] as f64 + sorted[n / 2] as f64) / 2.0
    }
}

pub fn median_of(values: &[u64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_unstable();
    median_sorted(&v)
}
