use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::time::Instant;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use super::report::{Record, ToRecord};
use super::runs::demo_code;
use super::stack::Target;
use super::BenchError;
use crate::client::{InputBuffer, InvocationFuture, Invoker, ModeHint, OutputBuffer, WaitMode};
use crate::functions::{
    black_scholes_call, bytes_to_f64s, encode_jacobi_full, encode_mmm_request, f64s_to_bytes, jacobi_rows,
    matmul_rows, OptionParams,
};

const BLACKSCHOLES: u16 = 1;
const MMM: u16 = 2;
const JACOBI: u16 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Demo {
    BlackScholes,
    Mmm,
    Jacobi,
}

impl fmt::Display for Demo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::BlackScholes => "blackscholes",
            Self::Mmm => "mmm",
            Self::Jacobi => "jacobi",
        })
    }
}

impl FromStr for Demo {
    type Err = BenchError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "blackscholes" => Ok(Self::BlackScholes),
            "mmm" => Ok(Self::Mmm),
            "jacobi" => Ok(Self::Jacobi),
            other => Err(BenchError::Usage(format!("unknown demo {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffloadParams {
    pub demo: Demo,
    /// Fraction of the index space sent to remote workers.
    pub split: f64,
    pub remote_workers: usize,
    /// Options for Black-Scholes, matrix dimension otherwise.
    pub size: usize,
    /// Jacobi sweeps.
    pub iterations: usize,
    pub seed: u64,
}

impl OffloadParams {
    pub fn new(demo: Demo, split: f64) -> Self {
        let size = match demo {
            Demo::BlackScholes => 100_000,
            Demo::Mmm => 128,
            Demo::Jacobi => 64,
        };
        Self {
            demo,
            split,
            remote_workers: 1,
            size,
            iterations: 100,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OffloadOutcome {
    pub demo: Demo,
    pub split: f64,
    pub remote_workers: usize,
    pub size: usize,
    pub local_s: f64,
    pub hybrid_s: f64,
    /// Hybrid result equals the local-only one bit for bit.
    pub exact: bool,
    /// Jacobi residuals `max |Ax - b|`, zero for the other demos.
    pub residual_local: f64,
    pub residual_hybrid: f64,
    /// Largest request after the first Jacobi sweep, and `|x|` in bytes.
    pub steady_request_bytes: usize,
    pub x_bytes: usize,
}

impl OffloadOutcome {
    pub fn speedup(&self) -> f64 {
        self.local_s / self.hybrid_s
    }
}

impl ToRecord for OffloadOutcome {
    const KIND: &'static str = "offload";

    fn to_record(&self) -> Record {
        Record::new(Self::KIND)
            .with("demo", self.demo)
            .with("split", self.split)
            .with("remote_workers", self.remote_workers)
            .with("size", self.size)
            .with("local_s", self.local_s)
            .with("hybrid_s", self.hybrid_s)
            .with("speedup", self.speedup())
            .with("exact", self.exact)
            .with("residual_local", self.residual_local)
            .with("residual_hybrid", self.residual_hybrid)
            .with("steady_request_bytes", self.steady_request_bytes)
            .with("x_bytes", self.x_bytes)
    }

    fn from_record(r: &Record) -> Result<Self, BenchError> {
        Ok(Self {
            demo: r.parse("demo")?,
            split: r.parse("split")?,
            remote_workers: r.parse("remote_workers")?,
            size: r.parse("size")?,
            local_s: r.parse("local_s")?,
            hybrid_s: r.parse("hybrid_s")?,
            exact: r.parse("exact")?,
            residual_local: r.parse("residual_local")?,
            residual_hybrid: r.parse("residual_hybrid")?,
            steady_request_bytes: r.parse("steady_request_bytes")?,
            x_bytes: r.parse("x_bytes")?,
        })
    }
}

/// Contiguous, nearly equal pieces of `0..total`.
pub fn chunks(total: usize, parts: usize) -> Vec<Range<usize>> {
    let parts = parts.max(1);
    (0..parts)
        .map(|i| total * i / parts..total * (i + 1) / parts)
        .filter(|r| !r.is_empty())
        .collect()
}

pub fn random_options(n: usize, seed: u64) -> Vec<OptionParams> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..n)
        .map(|_| OptionParams {
            spot: rng.random_range(10.0..200.0),
            strike: rng.random_range(10.0..200.0),
            rate: rng.random_range(0.0..0.1),
            volatility: rng.random_range(0.05..0.6),
            expiry: rng.random_range(0.1..3.0),
        })
        .collect()
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut StdRng) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Random strictly diagonally dominant system `(A, b)`.
pub fn dominant_system(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut a = random_matrix(n, n, &mut rng);
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| a[i * n + j].abs()).sum();
        a[i * n + i] = off + 1.0 + rng.random_range(0.0..1.0);
    }
    let b = random_matrix(n, 1, &mut rng);
    (a, b)
}

pub fn residual_inf(a: &[f64], b: &[f64], x: &[f64]) -> f64 {
    let n = x.len();
    (0..n)
        .map(|i| ((0..n).map(|j| a[i * n + j] * x[j]).sum::<f64>() - b[i]).abs())
        .fold(0.0, f64::max)
}

pub fn jacobi_local(a: &[f64], b: &[f64], iterations: usize) -> Vec<f64> {
    let n = b.len();
    let mut x = vec![0.0; n];
    for _ in 0..iterations {
        x = jacobi_rows(a, b, &x, 0..n);
    }
    x
}

struct Remote {
    inv: Invoker,
    slots: Vec<(InputBuffer, OutputBuffer)>,
}

impl Remote {
    fn new(target: &Target, workers: usize, in_bytes: usize, out_bytes: usize) -> Result<Self, BenchError> {
        let inv = target.invoker(true)?;
        inv.allocate(&demo_code(), in_bytes, ModeHint::AlwaysHot, workers as u32)?;
        let slots = (0..workers)
            .map(|_| Ok((inv.input(in_bytes)?, inv.output(out_bytes.max(1))?)))
            .collect::<Result<_, BenchError>>()?;
        Ok(Self { inv, slots })
    }

    fn submit(&self, worker: usize, function: u16, payload: &[u8]) -> Result<InvocationFuture, BenchError> {
        let (input, output) = &self.slots[worker];
        let n = input.fill(payload);
        Ok(self.inv.submit_to(worker, function, input, n, output)?)
    }

    fn collect(&self, worker: usize, fut: &InvocationFuture) -> Result<Vec<f64>, BenchError> {
        let n = fut.get(WaitMode::Blocking)?;
        Ok(bytes_to_f64s(&self.slots[worker].1.data()[..n]))
    }
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn remote_count(total: usize, split: f64) -> Result<usize, BenchError> {
    if !(0.0..=1.0).contains(&split) {
        return Err(BenchError::Usage(format!("split {split} outside [0, 1]")));
    }
    Ok((total as f64 * split).floor() as usize)
}

/// Runs `params.demo` all-local and hybrid and compares the results.
pub fn bench_offload(target: &Target, params: &OffloadParams) -> Result<OffloadOutcome, BenchError> {
    if params.size == 0 || params.remote_workers == 0 {
        return Err(BenchError::Usage("size and remote workers must be positive".into()));
    }
    match params.demo {
        Demo::BlackScholes => blackscholes(target, params),
        Demo::Mmm => mmm(target, params),
        Demo::Jacobi => jacobi(target, params),
    }
}

fn outcome(params: &OffloadParams, local_s: f64, hybrid_s: f64, exact: bool) -> OffloadOutcome {
    OffloadOutcome {
        demo: params.demo,
        split: params.split,
        remote_workers: params.remote_workers,
        size: params.size,
        local_s,
        hybrid_s,
        exact,
        residual_local: 0.0,
        residual_hybrid: 0.0,
        steady_request_bytes: 0,
        x_bytes: 0,
    }
}

fn blackscholes(target: &Target, p: &OffloadParams) -> Result<OffloadOutcome, BenchError> {
    let options = random_options(p.size, p.seed);
    let t = Instant::now();
    let local: Vec<f64> = options.iter().map(black_scholes_call).collect();
    let local_s = t.elapsed().as_secs_f64();

    let r = remote_count(p.size, p.split)?;
    let parts = chunks(r, p.remote_workers);
    let widest = parts.iter().map(|c| c.len()).max().unwrap_or(0);
    let remote = (r > 0)
        .then(|| Remote::new(target, parts.len(), widest * 40, widest * 8))
        .transpose()?;
    let t = Instant::now();
    let mut hybrid = vec![0.0; p.size];
    let mut futures = Vec::new();
    if let Some(remote) = &remote {
        for (w, c) in parts.iter().enumerate() {
            futures.push(remote.submit(w, BLACKSCHOLES, &OptionParams::encode_batch(&options[c.clone()]))?);
        }
    }
    for i in r..p.size {
        hybrid[i] = black_scholes_call(&options[i]);
    }
    if let Some(remote) = &remote {
        for (w, (c, fut)) in parts.iter().zip(&futures).enumerate() {
            hybrid[c.clone()].copy_from_slice(&remote.collect(w, fut)?);
        }
    }
    let hybrid_s = t.elapsed().as_secs_f64();
    Ok(outcome(p, local_s, hybrid_s, bits(&local) == bits(&hybrid)))
}

fn mmm(target: &Target, p: &OffloadParams) -> Result<OffloadOutcome, BenchError> {
    let d = p.size;
    let mut rng = StdRng::seed_from_u64(p.seed);
    let a = random_matrix(d, d, &mut rng);
    let b = random_matrix(d, d, &mut rng);
    let t = Instant::now();
    let local = matmul_rows(&a, &b, d, d, 0..d);
    let local_s = t.elapsed().as_secs_f64();

    let r = remote_count(d, p.split)?;
    let parts = chunks(r, p.remote_workers);
    let widest = parts.iter().map(|c| c.len()).max().unwrap_or(0);
    let request_bytes = encode_mmm_request(d, d, d, &a, &b, 0..0).len();
    let remote = (r > 0)
        .then(|| Remote::new(target, parts.len(), request_bytes, widest * d * 8))
        .transpose()?;
    let t = Instant::now();
    let mut hybrid = vec![0.0; d * d];
    let mut futures = Vec::new();
    if let Some(remote) = &remote {
        for (w, c) in parts.iter().enumerate() {
            futures.push(remote.submit(w, MMM, &encode_mmm_request(d, d, d, &a, &b, c.clone()))?);
        }
    }
    hybrid[r * d..].copy_from_slice(&matmul_rows(&a, &b, d, d, r..d));
    if let Some(remote) = &remote {
        for (w, (c, fut)) in parts.iter().zip(&futures).enumerate() {
            hybrid[c.start * d..c.end * d].copy_from_slice(&remote.collect(w, fut)?);
        }
    }
    let hybrid_s = t.elapsed().as_secs_f64();
    Ok(outcome(p, local_s, hybrid_s, bits(&local) == bits(&hybrid)))
}

fn jacobi(target: &Target, p: &OffloadParams) -> Result<OffloadOutcome, BenchError> {
    let n = p.size;
    let (a, b) = dominant_system(n, p.seed);
    let t = Instant::now();
    let local = jacobi_local(&a, &b, p.iterations);
    let local_s = t.elapsed().as_secs_f64();

    let r = remote_count(n, p.split)?;
    let parts = chunks(r, p.remote_workers);
    let widest = parts.iter().map(|c| c.len()).max().unwrap_or(0);
    let full_bytes = encode_jacobi_full(n, 0..0, &a, &b, &vec![0.0; n]).len();
    let remote = (r > 0)
        .then(|| Remote::new(target, parts.len(), full_bytes, widest * 8))
        .transpose()?;
    let t = Instant::now();
    let mut x = vec![0.0; n];
    let mut steady = 0;
    for it in 0..p.iterations {
        let mut futures = Vec::new();
        if let Some(remote) = &remote {
            for (w, c) in parts.iter().enumerate() {
                let payload = if it == 0 {
                    encode_jacobi_full(n, c.clone(), &a, &b, &x)
                } else {
                    f64s_to_bytes(&x)
                };
                if it > 0 {
                    steady = steady.max(payload.len());
                }
                futures.push(remote.submit(w, JACOBI, &payload)?);
            }
        }
        let mut next = vec![0.0; n];
        next[r..].copy_from_slice(&jacobi_rows(&a, &b, &x, r..n));
        if let Some(remote) = &remote {
            for (w, (c, fut)) in parts.iter().zip(&futures).enumerate() {
                next[c.clone()].copy_from_slice(&remote.collect(w, fut)?);
            }
        }
        x = next;
    }
    let hybrid_s = t.elapsed().as_secs_f64();
    let mut out = outcome(p, local_s, hybrid_s, bits(&local) == bits(&x));
    out.residual_local = residual_inf(&a, &b, &local);
    out.residual_hybrid = residual_inf(&a, &b, &x);
    out.steady_request_bytes = steady;
    out.x_bytes = n * 8;
    Ok(out)
}
