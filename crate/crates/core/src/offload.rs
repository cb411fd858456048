//! Offload decision model: how many tasks to keep local so that remote
//! round trips are hidden, how many invocations the link can feed, and
//! how to split a batch of independent tasks.
//!
//! Durations are integer nanoseconds so that thresholds are exact.

use std::fmt;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum OffloadError {
    #[error("{0} must be positive")]
    NonPositive(&'static str),
    #[error("need at least {needed} samples per size, got {got}")]
    InsufficientSamples { needed: usize, got: usize },
    #[error("samples do not determine a positive bandwidth")]
    DegenerateFit,
    #[error("malformed sample line {line}: {text:?}")]
    Parse { line: usize, text: String },
}

pub const MIN_SAMPLES: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelSource {
    Measured,
    Configured,
}

/// Latency/bandwidth parameters in seconds and bytes per second.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkModel {
    pub latency: f64,
    pub bandwidth: f64,
    pub o_send: f64,
    pub o_recv: f64,
    pub source: ModelSource,
}

impl NetworkModel {
    pub fn configured(latency: f64, bandwidth: f64) -> Result<Self, OffloadError> {
        if !(latency > 0.0) {
            return Err(OffloadError::NonPositive("latency"));
        }
        if !(bandwidth > 0.0) {
            return Err(OffloadError::NonPositive("bandwidth"));
        }
        Ok(Self {
            latency,
            bandwidth,
            o_send: 0.0,
            o_recv: 0.0,
            source: ModelSource::Configured,
        })
    }

    pub fn latency_ns(&self) -> u64 {
        (self.latency * 1e9).round() as u64
    }
}

/// Round-trip samples (seconds) for one message size (bytes).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LatencySamples {
    pub size: u64,
    pub rtts: Vec<f64>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Estimates the model from measurements. `throughput` holds bytes/second
/// samples from a saturation run and may be empty, in which case bandwidth
/// comes from the largest message size.
pub fn fit_network_model(latency: &[LatencySamples], throughput: &[f64]) -> Result<NetworkModel, OffloadError> {
    let fewest = latency.iter().map(|s| s.rtts.len()).min().unwrap_or(0);
    if fewest < MIN_SAMPLES {
        return Err(OffloadError::InsufficientSamples {
            needed: MIN_SAMPLES,
            got: fewest,
        });
    }
    let smallest = latency.iter().min_by_key(|s| s.size).expect("non-empty");
    let largest = latency.iter().max_by_key(|s| s.size).expect("non-empty");
    let l = median(&smallest.rtts);
    if !(l > 0.0) {
        return Err(OffloadError::NonPositive("latency"));
    }

    // least-squares line through per-size medians
    let points: Vec<(f64, f64)> = latency.iter().map(|s| (s.size as f64, median(&s.rtts))).collect();
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;

    let bandwidth = if !throughput.is_empty() {
        median(throughput)
    } else {
        let rates: Vec<f64> = largest
            .rtts
            .iter()
            .filter(|&&r| r > l)
            .map(|r| largest.size as f64 / (r - l))
            .collect();
        if largest.size > smallest.size && !rates.is_empty() {
            median(&rates)
        } else if slope > 0.0 {
            1.0 / slope
        } else {
            return Err(OffloadError::DegenerateFit);
        }
    };
    if !(bandwidth > 0.0) || !bandwidth.is_finite() {
        return Err(OffloadError::DegenerateFit);
    }
    let o = (intercept - l).max(0.0) / 2.0;
    Ok(NetworkModel {
        latency: l,
        bandwidth,
        o_send: o,
        o_recv: o,
        source: ModelSource::Measured,
    })
}

/// Median of calibration runs of the remote function, in nanoseconds.
pub fn estimate_t_inv(calibration_ns: &[u64]) -> Result<u64, OffloadError> {
    if calibration_ns.len() < MIN_SAMPLES {
        return Err(OffloadError::InsufficientSamples {
            needed: MIN_SAMPLES,
            got: calibration_ns.len(),
        });
    }
    let mut v = calibration_ns.to_vec();
    v.sort_unstable();
    Ok(v[v.len() / 2])
}

/// Smallest `N` with `N * t_local >= t_inv + latency`.
pub fn n_local_threshold(t_local_ns: u64, t_inv_ns: u64, latency_ns: u64) -> Result<u64, OffloadError> {
    if t_local_ns == 0 {
        return Err(OffloadError::NonPositive("T_local"));
    }
    if t_inv_ns == 0 {
        return Err(OffloadError::NonPositive("T_inv"));
    }
    if latency_ns == 0 {
        return Err(OffloadError::NonPositive("L"));
    }
    Ok((t_inv_ns + latency_ns).div_ceil(t_local_ns))
}

/// Invocations per second that saturate the link.
pub fn n_remote_saturation(bandwidth: f64, data_per_invocation: u64) -> Result<u64, OffloadError> {
    if data_per_invocation == 0 {
        return Err(OffloadError::NonPositive("data per invocation"));
    }
    if !(bandwidth > 0.0) {
        return Err(OffloadError::NonPositive("bandwidth"));
    }
    Ok((bandwidth / data_per_invocation as f64).floor() as u64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanInput {
    pub total_tasks: u64,
    pub t_local_ns: u64,
    pub t_inv_ns: u64,
    pub latency_ns: u64,
    pub bandwidth: f64,
    pub data_per_invocation: u64,
    pub remote_workers: u64,
    /// Caller-supplied bound on concurrently offloadable tasks.
    pub width: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OffloadPlan {
    pub n_local: u64,
    pub n_remote: u64,
    pub predicted_makespan_ns: u64,
}

impl fmt::Display for OffloadPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "n_local={}", self.n_local)?;
        writeln!(f, "n_remote={}", self.n_remote)?;
        write!(f, "predicted_makespan_ns={}", self.predicted_makespan_ns)
    }
}

impl PlanInput {
    /// Transfer time of one request over the shared link.
    pub fn transfer_ns(&self) -> u64 {
        ((self.data_per_invocation as f64) * 1e9 / self.bandwidth).ceil() as u64
    }

    /// Completion time of the last of `n_remote` offloaded tasks. Requests
    /// go round-robin to workers, one at a time over the shared link, and a
    /// worker accepts its next request only after returning the previous one.
    pub fn remote_finish_ns(&self, n_remote: u64) -> u64 {
        if n_remote == 0 {
            return 0;
        }
        let tau = self.transfer_ns();
        let round_trip = self.t_inv_ns + self.latency_ns;
        let workers = self.remote_workers.min(n_remote);
        let mut worker_free = vec![0u64; workers as usize];
        let mut link_free = 0u64;
        let mut last = 0;
        for j in 0..n_remote {
            let slot = (j % workers) as usize;
            let start = link_free.max(worker_free[slot]);
            link_free = start + tau;
            worker_free[slot] = start + round_trip;
            last = last.max(worker_free[slot]);
        }
        last
    }

    fn saturation_cap(&self, horizon_ns: u64) -> u64 {
        let per_second = self.bandwidth / self.data_per_invocation as f64;
        (per_second * horizon_ns as f64 / 1e9).floor() as u64
    }

    fn feasible(&self, n_local: u64) -> bool {
        let n_remote = self.total_tasks - n_local;
        if n_remote == 0 {
            return true;
        }
        let local_ns = n_local * self.t_local_ns;
        n_remote <= self.width.unwrap_or(u64::MAX)
            && n_remote <= self.saturation_cap(local_ns)
            && self.remote_finish_ns(n_remote) <= local_ns
    }
}

/// Keeps the fewest tasks local such that every offloaded result is back
/// before local work runs out.
pub fn plan_split(input: &PlanInput) -> Result<OffloadPlan, OffloadError> {
    if input.total_tasks == 0 {
        return Err(OffloadError::NonPositive("total tasks"));
    }
    let threshold = n_local_threshold(input.t_local_ns, input.t_inv_ns, input.latency_ns)?;
    if input.data_per_invocation == 0 {
        return Err(OffloadError::NonPositive("data per invocation"));
    }
    if !(input.bandwidth > 0.0) {
        return Err(OffloadError::NonPositive("bandwidth"));
    }
    let all_local = OffloadPlan {
        n_local: input.total_tasks,
        n_remote: 0,
        predicted_makespan_ns: input.total_tasks * input.t_local_ns,
    };
    if input.remote_workers == 0 || input.total_tasks <= threshold {
        return Ok(all_local);
    }
    // feasibility is monotone in n_local
    let (mut lo, mut hi) = (threshold, input.total_tasks);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if input.feasible(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let n_remote = input.total_tasks - lo;
    Ok(OffloadPlan {
        n_local: lo,
        n_remote,
        predicted_makespan_ns: (lo * input.t_local_ns).max(input.remote_finish_ns(n_remote)),
    })
}

/// Parses `size=<bytes> rtt_ns=<ns>` and `throughput_bps=<f64>` lines;
/// other keys on a line are ignored, as are blank lines and `#` comments.
pub fn parse_samples(text: &str) -> Result<(Vec<LatencySamples>, Vec<f64>), OffloadError> {
    let mut by_size: Vec<LatencySamples> = Vec::new();
    let mut throughput = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = || OffloadError::Parse {
            line: i + 1,
            text: line.to_string(),
        };
        let mut size = None;
        let mut rtt = None;
        let mut bps = None;
        for pair in line.split_whitespace() {
            let (k, v) = pair.split_once('=').ok_or_else(err)?;
            match k {
                "size" => size = Some(v.parse::<u64>().map_err(|_| err())?),
                "rtt_ns" => rtt = Some(v.parse::<f64>().map_err(|_| err())?),
                "throughput_bps" => bps = Some(v.parse::<f64>().map_err(|_| err())?),
                _ => {}
            }
        }
        match (size, rtt, bps) {
            (Some(size), Some(rtt), _) => {
                let rtt = rtt / 1e9;
                match by_size.iter_mut().find(|s| s.size == size) {
                    Some(s) => s.rtts.push(rtt),
                    None => by_size.push(LatencySamples { size, rtts: vec![rtt] }),
                }
            }
            (None, None, Some(b)) => throughput.push(b),
            _ => return Err(err()),
        }
    }
    Ok((by_size, throughput))
}
