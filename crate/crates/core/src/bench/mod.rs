//! Measurement harness: latency distributions with order-statistic
//! confidence intervals, cold-start breakdown, bandwidth and parallel
//! scaling, and the hybrid offload demos.
//!
//! Every run yields values that render to [`Report`] lines and parse back.

mod demos;
mod report;
mod runs;
mod stack;
mod stats;

pub use demos::{
    bench_offload, chunks, dominant_system, jacobi_local, random_matrix, random_options, residual_inf, Demo,
    OffloadOutcome, OffloadParams,
};
pub use report::{Record, Report, ToRecord};
pub use runs::{
    bench_bandwidth, bench_cold, bench_echo, bench_latency, bench_latency_paired, bench_parallel, bench_parallel_point,
    demo_code, invocation_samples, median_spread, raw_saturation, raw_transport_samples, BandwidthPoint, ColdBreakdown,
    ColdStats, EchoOutcome, PairedLatency, ParallelPoint, COLD_STEPS, DEFAULT_WARMUPS,
};
pub use stack::{Stack, StackConfig, Target};
pub use stats::{ci_coverage, ci_median, median_of, median_sorted, LatencyMode, LatencySummary, DEFAULT_LEVEL};

use crate::client::{ClientError, InvocationError};
use crate::transport::TransportError;

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("samples are not sorted")]
    Unsorted,
    #[error("stack: {0}")]
    Stack(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("invocation failed: {0}")]
    Invocation(#[from] InvocationError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("cannot parse results: {0}")]
    Parse(String),
    #[error("property violated: {0}")]
    Violation(String),
}
