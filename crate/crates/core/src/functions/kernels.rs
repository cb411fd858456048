//! Numeric kernels and their little-endian payload formats.

use super::{FunctionFailure, WorkerCache};

pub(crate) fn read_f64(bytes: &[u8], i: usize) -> f64 {
    f64::from_le_bytes(bytes[i * 8..i * 8 + 8].try_into().expect("8 bytes"))
}

fn read_u32(bytes: &[u8], i: usize) -> u32 {
    u32::from_le_bytes(bytes[i * 4..i * 4 + 4].try_into().expect("4 bytes"))
}

fn write_f64s(out: &mut [u8], values: impl ExactSizeIterator<Item = f64>) -> Result<usize, FunctionFailure> {
    let len = values.len() * 8;
    if len > out.len() {
        return Err(FunctionFailure::OutputTooSmall);
    }
    for (chunk, v) in out.chunks_exact_mut(8).zip(values) {
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    Ok(len)
}

pub fn f64s_to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn bytes_to_f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect()
}

pub fn echo(_: &mut WorkerCache, input: &[u8], out: &mut [u8]) -> Result<usize, FunctionFailure> {
    let dst = out
        .get_mut(..input.len())
        .ok_or(FunctionFailure::OutputTooSmall)?;
    dst.copy_from_slice(input);
    Ok(input.len())
}

/// European call option parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptionParams {
    pub spot: f64,
    pub strike: f64,
    pub rate: f64,
    pub volatility: f64,
    pub expiry: f64,
}

pub const OPTION_TUPLE_BYTES: usize = 40;

impl OptionParams {
    pub fn encode_batch(options: &[OptionParams]) -> Vec<u8> {
        let flat: Vec<f64> = options
            .iter()
            .flat_map(|o| [o.spot, o.strike, o.rate, o.volatility, o.expiry])
            .collect();
        f64s_to_bytes(&flat)
    }
}

fn norm_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

pub fn black_scholes_call(o: &OptionParams) -> f64 {
    let sqrt_t = o.expiry.sqrt();
    let d1 = ((o.spot / o.strike).ln() + (o.rate + 0.5 * o.volatility * o.volatility) * o.expiry)
        / (o.volatility * sqrt_t);
    let d2 = d1 - o.volatility * sqrt_t;
    o.spot * norm_cdf(d1) - o.strike * (-o.rate * o.expiry).exp() * norm_cdf(d2)
}

/// Input: n tuples of five f64 `(S, K, r, sigma, T)`. Output: n call prices.
pub fn blackscholes_batch(
    _: &mut WorkerCache,
    input: &[u8],
    out: &mut [u8],
) -> Result<usize, FunctionFailure> {
    if input.len() % OPTION_TUPLE_BYTES != 0 {
        return Err(FunctionFailure::BadInput("length is not a multiple of the option tuple"));
    }
    let n = input.len() / OPTION_TUPLE_BYTES;
    let prices = (0..n).map(|i| {
        black_scholes_call(&OptionParams {
            spot: read_f64(input, i * 5),
            strike: read_f64(input, i * 5 + 1),
            rate: read_f64(input, i * 5 + 2),
            volatility: read_f64(input, i * 5 + 3),
            expiry: read_f64(input, i * 5 + 4),
        })
    });
    write_f64s(out, prices)
}

pub const MMM_HEADER_BYTES: usize = 20;

/// Request for rows `row_begin..row_end` of `A (m x k) * B (k x n)`.
pub fn encode_mmm_request(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    rows: std::ops::Range<usize>,
) -> Vec<u8> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    let mut out = Vec::with_capacity(MMM_HEADER_BYTES + (a.len() + b.len()) * 8);
    for v in [m, k, n, rows.start, rows.end] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend(f64s_to_bytes(a));
    out.extend(f64s_to_bytes(b));
    out
}

/// Row block of a matrix product, computed in i-l-j order.
pub fn matmul_rows(a: &[f64], b: &[f64], k: usize, n: usize, rows: std::ops::Range<usize>) -> Vec<f64> {
    let mut c = vec![0.0; rows.len() * n];
    for (ci, i) in rows.enumerate() {
        let row = &mut c[ci * n..(ci + 1) * n];
        for l in 0..k {
            let a_il = a[i * k + l];
            for (j, cell) in row.iter_mut().enumerate() {
                *cell += a_il * b[l * n + j];
            }
        }
    }
    c
}

pub fn mmm_half(_: &mut WorkerCache, input: &[u8], out: &mut [u8]) -> Result<usize, FunctionFailure> {
    if input.len() < MMM_HEADER_BYTES {
        return Err(FunctionFailure::BadInput("missing matrix header"));
    }
    let [m, k, n, begin, end] = std::array::from_fn(|i| read_u32(input, i) as usize);
    if begin > end || end > m {
        return Err(FunctionFailure::BadInput("row range outside matrix"));
    }
    let body = &input[MMM_HEADER_BYTES..];
    if body.len() != (m * k + k * n) * 8 {
        return Err(FunctionFailure::BadInput("matrix payload size mismatch"));
    }
    if (end - begin) * n * 8 > out.len() {
        return Err(FunctionFailure::OutputTooSmall);
    }
    let values = bytes_to_f64s(body);
    let (a, b) = values.split_at(m * k);
    let c = matmul_rows(a, b, k, n, begin..end);
    write_f64s(out, c.into_iter())
}

pub const JACOBI_MAGIC: u32 = 0x4A41_4342;
pub const JACOBI_HEADER_BYTES: usize = 16;

/// State retained by a worker after the first Jacobi call.
#[derive(Debug, Clone)]
pub struct JacobiCache {
    pub n: usize,
    pub rows: std::ops::Range<usize>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub generation: u64,
}

/// First-call payload: header, `A` (n x n), `b` and `x`.
pub fn encode_jacobi_full(n: usize, rows: std::ops::Range<usize>, a: &[f64], b: &[f64], x: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(JACOBI_HEADER_BYTES + (n * n + 2 * n) * 8);
    for v in [JACOBI_MAGIC, n as u32, rows.start as u32, rows.end as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend(f64s_to_bytes(a));
    out.extend(f64s_to_bytes(b));
    out.extend(f64s_to_bytes(x));
    out
}

/// One Jacobi update for rows of `x' = D^-1 (b - R x)`.
pub fn jacobi_rows(a: &[f64], b: &[f64], x: &[f64], rows: std::ops::Range<usize>) -> Vec<f64> {
    let n = x.len();
    rows.map(|i| {
        let mut sigma = 0.0;
        for j in 0..n {
            if j != i {
                sigma += a[i * n + j] * x[j];
            }
        }
        (b[i] - sigma) / a[i * n + i]
    })
    .collect()
}

pub fn jacobi_step(
    cache: &mut WorkerCache,
    input: &[u8],
    out: &mut [u8],
) -> Result<usize, FunctionFailure> {
    if let Some(state) = &cache.jacobi {
        if input.len() == state.n * 8 {
            let x = bytes_to_f64s(input);
            return write_f64s(out, jacobi_rows(&state.a, &state.b, &x, state.rows.clone()).into_iter());
        }
    }
    if input.len() < JACOBI_HEADER_BYTES || read_u32(input, 0) != JACOBI_MAGIC {
        return Err(FunctionFailure::BadInput("solution-only call without cached system"));
    }
    let n = read_u32(input, 1) as usize;
    let rows = read_u32(input, 2) as usize..read_u32(input, 3) as usize;
    if rows.start > rows.end || rows.end > n {
        return Err(FunctionFailure::BadInput("row range outside system"));
    }
    let body = &input[JACOBI_HEADER_BYTES..];
    if body.len() != (n * n + 2 * n) * 8 {
        return Err(FunctionFailure::BadInput("system payload size mismatch"));
    }
    let values = bytes_to_f64s(body);
    let a = values[..n * n].to_vec();
    let b = values[n * n..n * n + n].to_vec();
    let x = &values[n * n + n..];
    let result = jacobi_rows(&a, &b, x, rows.clone());
    let generation = cache.jacobi.as_ref().map_or(0, |c| c.generation + 1);
    cache.jacobi = Some(JacobiCache { n, rows, a, b, generation });
    write_f64s(out, result.into_iter())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_times_matrix() {
        let i2 = [1.0, 0.0, 0.0, 1.0];
        let m = [3.0, 4.0, 5.0, 6.0];
        assert_eq!(matmul_rows(&i2, &m, 2, 2, 1..2), vec![5.0, 6.0]);
    }

    #[test]
    fn blackscholes_rejects_ragged_input() {
        let mut out = [0u8; 64];
        let r = blackscholes_batch(&mut WorkerCache::default(), &[0u8; 41], &mut out);
        assert!(matches!(r, Err(FunctionFailure::BadInput(_))));
        assert_eq!(blackscholes_batch(&mut WorkerCache::default(), &[], &mut out), Ok(0));
    }

    #[test]
    fn jacobi_needs_cache_for_short_calls() {
        let mut out = [0u8; 64];
        let r = jacobi_step(&mut WorkerCache::default(), &[0u8; 32], &mut out);
        assert!(matches!(r, Err(FunctionFailure::BadInput(_))));
    }
}
