use num_bigint::BigUint;
use proptest::prelude::*;
use spotlease::bench::{
    bench_cold, bench_echo, bench_latency, bench_offload, bench_parallel, ci_median, raw_saturation, BandwidthPoint,
    BenchError, ColdBreakdown, Demo, EchoOutcome, LatencyMode, LatencySummary, OffloadOutcome, OffloadParams,
    ParallelPoint, Record, Report, Stack, StackConfig, ToRecord,
};
use spotlease::transport::BackendKind;

/// Lower order-statistic rank by exact rational arithmetic: the largest `l`
/// with `sum_{i < l} C(n, i) / 2^n <= num / den`.
fn exact_lower_rank(n: u64, num: u64, den: u64) -> u64 {
    let total = BigUint::from(1u8) << n;
    let bound = &total * num;
    let mut c = BigUint::from(1u8);
    let mut cdf = BigUint::from(0u8);
    let mut l = 0;
    for i in 0..=n {
        cdf += &c;
        if &cdf * den > bound {
            break;
        }
        l = i + 1;
        c = c * (n - i) / (i + 1);
    }
    l
}

fn oracle_interval(n: u64, num: u64, den: u64) -> (usize, usize) {
    let l = exact_lower_rank(n, num, den) as usize;
    if l == 0 {
        (0, n as usize - 1)
    } else {
        (l - 1, n as usize - l)
    }
}

#[test]
fn ci_median_matches_exact_binomial() {
    let sizes: Vec<u64> = (1..=400).chain([999, 1000, 1001, 4096, 9999, 10_000]).collect();
    for n in sizes {
        let samples = vec![0u8; n as usize];
        assert_eq!(ci_median(&samples, 0.99).unwrap(), oracle_interval(n, 1, 200), "n={n} level=0.99");
        assert_eq!(ci_median(&samples, 0.95).unwrap(), oracle_interval(n, 1, 40), "n={n} level=0.95");
    }
}

#[test]
fn ci_half_width_scales_with_sqrt_n() {
    let n = 10_000usize;
    let (lo, hi) = ci_median(&vec![0u8; n], 0.99).unwrap();
    let half = (hi - lo) as f64 / 2.0;
    assert!((half - 1.29 * (n as f64).sqrt()).abs() < 2.0, "half width {half}");
    assert_eq!(lo + hi, n - 1);
}

#[test]
fn ci_median_small_and_bad_inputs() {
    assert_eq!(ci_median(&[1.0, 2.0, 3.0], 0.99).unwrap(), (0, 2));
    assert!(matches!(ci_median(&[2.0, 1.0], 0.99), Err(BenchError::Unsorted)));
    assert!(matches!(ci_median(&[1.0], 1.5), Err(BenchError::Usage(_))));
}

fn finite() -> impl Strategy<Value = f64> {
    prop::num::f64::NORMAL | prop::num::f64::ZERO | prop::num::f64::SUBNORMAL
}

fn round_trip<T: ToRecord + PartialEq + std::fmt::Debug>(value: &T) -> Result<(), TestCaseError> {
    let mut report = Report::default();
    report.push(value);
    report.summarize("verdict", "pass");
    let parsed = Report::parse(&report.render()).map_err(|e| TestCaseError::fail(e.to_string()))?;
    let back: Vec<T> = parsed.decode().map_err(|e| TestCaseError::fail(e.to_string()))?;
    prop_assert_eq!(back.len(), 1);
    prop_assert_eq!(&back[0], value);
    prop_assert_eq!(parsed.summary_value("verdict"), Some("pass"));
    Ok(())
}

proptest! {
    #[test]
    fn latency_records_round_trip(
        mode in prop_oneof![Just(LatencyMode::RawTransport), Just(LatencyMode::Hot), Just(LatencyMode::Warm)],
        size in any::<usize>(),
        reps in any::<usize>(),
        v in prop::array::uniform5(finite()),
        saturated in any::<bool>(),
    ) {
        round_trip(&LatencySummary {
            mode, size, reps,
            median: v[0], mean: v[1], p99: v[2], ci_low: v[3], ci_high: v[4],
            ci_saturated: saturated,
        })?;
    }

    #[test]
    fn cold_records_round_trip(v in prop::array::uniform5(finite())) {
        round_trip(&ColdBreakdown {
            connect_manager: v[0], lease_grant: v[1], submit_code: v[2], spawn_workers: v[3], first_invocation: v[4],
        })?;
    }

    #[test]
    fn other_records_round_trip(
        a in any::<usize>(), b in any::<usize>(), c in any::<usize>(), d in any::<u64>(),
        x in finite(), y in finite(), z in finite(), exact in any::<bool>(),
        demo in prop_oneof![Just(Demo::BlackScholes), Just(Demo::Mmm), Just(Demo::Jacobi)],
    ) {
        round_trip(&ParallelPoint { workers: a, size: b, rounds: c, median: x, throughput: y })?;
        round_trip(&BandwidthPoint { size: a, median: x, throughput: y })?;
        round_trip(&EchoOutcome { size: a, reps: b, mismatches: c, losses: a ^ b, elapsed_ms: d })?;
        round_trip(&OffloadOutcome {
            demo, split: x, remote_workers: a, size: b, local_s: y, hybrid_s: z, exact,
            residual_local: x, residual_hybrid: z, steady_request_bytes: c, x_bytes: b,
        })?;
    }

    #[test]
    fn record_lines_round_trip(kind in "[a-z]{1,8}", fields in prop::collection::vec(("[a-z_]{1,8}", "[!-<>-~]{1,12}"), 0..6)) {
        let mut record = Record::new(kind);
        for (k, v) in &fields {
            record = record.with(k, v);
        }
        let report = Report { records: vec![record], summary: vec![] };
        prop_assert_eq!(Report::parse(&report.render()).unwrap(), report);
    }
}

fn stack(backend: BackendKind, cores: Vec<u32>) -> Stack {
    Stack::start(&StackConfig::new(backend, cores)).unwrap()
}

#[test]
fn latency_runs_produce_valid_summaries() {
    let s = stack(BackendKind::Loopback, vec![1]);
    let t = s.target();
    for mode in [LatencyMode::RawTransport, LatencyMode::Hot, LatencyMode::Warm] {
        let sum = bench_latency(&t, mode, 1024, 300, 20).unwrap();
        assert_eq!(sum.reps, 300);
        assert_eq!(sum.mode, mode);
        assert!(sum.ci_low <= sum.median && sum.median <= sum.ci_high);
        assert!(sum.median > 0.0 && sum.p99 >= sum.median);
    }
    assert!(matches!(bench_latency(&t, LatencyMode::Hot, 8, 0, 0), Err(BenchError::Usage(_))));
    s.shutdown();
}

#[test]
fn echo_run_is_clean_on_tcp() {
    let s = stack(BackendKind::Tcp, vec![1]);
    let out = bench_echo(&s.target(), 100_000, 50).unwrap();
    assert!(out.clean(), "{out:?}");
    assert!(bench_echo(&s.target(), 0, 1).is_err());
    s.shutdown();
}

#[test]
fn cold_breakdown_totals_its_steps() {
    let s = stack(BackendKind::Loopback, vec![1]);
    let stats = bench_cold(&s.target(), 3).unwrap();
    assert_eq!(stats.trials.len(), 3);
    for t in &stats.trials {
        assert!(t.steps().iter().all(|&v| v >= 0.0));
        assert!((t.total() - t.steps().iter().sum::<f64>()).abs() < 1e-12);
    }
    assert!(stats.median.first_invocation > 0.0);
    assert!(matches!(bench_cold(&s.target(), 0), Err(BenchError::Usage(_))));
    s.shutdown();
}

#[test]
fn parallel_sweep_and_raw_saturation() {
    let s = stack(BackendKind::Loopback, vec![4]);
    let points = bench_parallel(&s.target(), &[1, 4], 1024, 20, 2).unwrap();
    assert_eq!(points.iter().map(|p| p.workers).collect::<Vec<_>>(), vec![1, 4]);
    assert!(points.iter().all(|p| p.throughput > 0.0 && p.median > 0.0));
    assert!(matches!(bench_parallel(&s.target(), &[0], 8, 1, 0), Err(BenchError::Usage(_))));
    assert!(raw_saturation(&s.fabric, 4, 4096, 20, 2).unwrap() > 0.0);
    s.shutdown();
}

#[test]
fn offload_demos_match_local_results() {
    let s = stack(BackendKind::Loopback, vec![2]);
    let t = s.target();
    for demo in [Demo::BlackScholes, Demo::Mmm, Demo::Jacobi] {
        for split in [0.0, 0.5] {
            let mut p = OffloadParams::new(demo, split);
            p.size = match demo {
                Demo::BlackScholes => 2000,
                _ => 24,
            };
            p.remote_workers = 2;
            p.iterations = 40;
            let out = bench_offload(&t, &p).unwrap();
            assert!(out.exact, "{demo} split={split}");
            if demo == Demo::Jacobi && split > 0.0 {
                assert_eq!(out.steady_request_bytes, out.x_bytes);
                assert_eq!(out.residual_local, out.residual_hybrid);
            }
        }
    }
    assert!(bench_offload(&t, &OffloadParams::new(Demo::Mmm, 1.5)).is_err());
    s.shutdown();
}
