use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use spotlease::client::{ClientError, InvocationError, Invoker, InvokerConfig, ModeHint, WaitMode};
use spotlease::executor::{ExecutorConfig, ExecutorService};
use spotlease::manager::{AllowAll, BillingRates, ManagerConfig, ManagerService};
use spotlease::protocol::{CodeSubmission, ErrorCode};
use spotlease::transport::Fabric;

fn manager(fabric: &Fabric, oversub: f64) -> ManagerService {
    let config = ManagerConfig {
        oversubscription: oversub,
        rates: BillingRates::from_dollars(1e-5, 1e-4, 5e-5),
        heartbeat_interval: Duration::from_millis(100),
        ..ManagerConfig::default()
    };
    ManagerService::start(fabric, config, Arc::new(AllowAll)).unwrap()
}

fn executor(fabric: &Fabric, mgr: &ManagerService, cores: u32) -> ExecutorService {
    let mut cfg = ExecutorConfig::new(mgr.address(), cores, 64 * 1024);
    cfg.heartbeat_interval = Duration::from_millis(100);
    cfg.pin = false;
    ExecutorService::start(fabric, cfg).unwrap()
}

fn invoker(fabric: &Fabric, mgr: &ManagerService) -> Invoker {
    Invoker::new(fabric.clone(), InvokerConfig::new(mgr.address())).unwrap()
}

fn testing_code() -> CodeSubmission {
    CodeSubmission::builtin("testing", &["echo", "sleep", "trap", "fill"])
}

fn both_backends(f: impl Fn(Fabric)) {
    f(Fabric::loopback());
    f(Fabric::tcp());
}

fn wait_until(timeout: Duration, mut f: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        if f() {
            return true;
        }
        thread::sleep(Duration::from_millis(10));
    }
    f()
}

fn free_cores(mgr: &ManagerService) -> u32 {
    mgr.with_state(|m| m.executors().map(|e| e.free_cores).sum())
}

#[test]
fn echo_round_trip() {
    both_backends(|fabric| {
        let mgr = manager(&fabric, 1.0);
        let _ex = executor(&fabric, &mgr, 1);
        let inv = invoker(&fabric, &mgr);
        let report = inv.allocate(&testing_code(), 4096, ModeHint::WarmOk, 1).unwrap();
        assert_eq!(report.workers, 1);
        assert!(report.cold.total_us >= report.cold.lease_us);

        let input = inv.input(4096).unwrap();
        let output = inv.output(4096).unwrap();
        let payload: Vec<u8> = (0..1024u32).map(|i| (i * 7) as u8).collect();
        let n = input.fill(&payload);
        let fut = inv.submit(0u16, &input, n, &output).unwrap();
        assert_eq!(fut.get(WaitMode::Blocking).unwrap(), 1024);
        assert_eq!(&output.data()[..1024], &payload[..]);

        let fut = inv.submit("echo", &input, 3, &output).unwrap();
        assert_eq!(fut.get(WaitMode::Busy).unwrap(), 3);
        assert!(matches!(
            inv.submit("nope", &input, 3, &output),
            Err(InvocationError::UnknownName(_))
        ));
    });
}

#[test]
fn buffer_layout() {
    let fabric = Fabric::loopback();
    let mgr = manager(&fabric, 1.0);
    let inv = invoker(&fabric, &mgr);
    let input = inv.input_for::<f64>(256).unwrap();
    assert_eq!(input.capacity(), 2048);
    assert_eq!(input.region_len(), 2060);
    assert_eq!(input.data().len(), 2048);
    let output = inv.output_for::<f64>(256).unwrap();
    assert_eq!(output.capacity(), 2048);
    assert!(matches!(inv.output(0), Err(ClientError::InvalidBuffer(_))));
    let other = inv.input(16).unwrap();
    assert_ne!(input.remote_key(), other.remote_key());
    assert_ne!(input.remote_key(), output.remote_key());
}

#[test]
fn allocation_spans_executors() {
    let fabric = Fabric::loopback();
    let mgr = manager(&fabric, 1.0);
    let _a = executor(&fabric, &mgr, 2);
    let _b = executor(&fabric, &mgr, 2);
    let inv = invoker(&fabric, &mgr);
    let report = inv.allocate(&testing_code(), 256, ModeHint::AlwaysWarm, 4).unwrap();
    assert_eq!(report.workers, 4);
    assert_eq!(report.leases.len(), 2);
    assert_ne!(report.leases[0].executor_id, report.leases[1].executor_id);
    let workers = inv.workers();
    assert_eq!(workers.len(), 4);
    assert!(workers.iter().all(|w| w.healthy));
    assert_eq!(free_cores(&mgr), 0);

    inv.deallocate();
    inv.deallocate();
    assert!(inv.workers().is_empty());
    assert!(wait_until(Duration::from_secs(2), || free_cores(&mgr) == 4));
}

#[test]
fn empty_pool_is_insufficient() {
    let fabric = Fabric::loopback();
    let mgr = manager(&fabric, 1.0);
    let _a = executor(&fabric, &mgr, 1);
    let first = invoker(&fabric, &mgr);
    first.allocate(&testing_code(), 256, ModeHint::AlwaysWarm, 1).unwrap();
    let second = invoker(&fabric, &mgr);
    let err = second.allocate(&testing_code(), 256, ModeHint::AlwaysWarm, 1).unwrap_err();
    assert_eq!(err.code(), Some(ErrorCode::InsufficientResources));
    assert!(second.workers().is_empty());
}

#[test]
fn concurrent_submits_complete() {
    let fabric = Fabric::loopback();
    let mgr = manager(&fabric, 1.0);
    let _ex = executor(&fabric, &mgr, 32);
    let inv = invoker(&fabric, &mgr);
    inv.allocate(&testing_code(), 64, ModeHint::AlwaysWarm, 32).unwrap();
    let pairs: Vec<_> = (0..32u8)
        .map(|i| {
            let input = inv.input(64).unwrap();
            let output = inv.output(64).unwrap();
            input.fill(&[i; 64]);
            (input, output)
        })
        .collect();
    let futures: Vec<_> = pairs
        .iter()
        .map(|(input, output)| inv.submit(0u16, input, 64, output).unwrap())
        .collect();
    let mut workers: Vec<usize> = futures.iter().map(|f| f.worker()).collect();
    workers.sort();
    workers.dedup();
    assert_eq!(workers.len(), 32);
    let mut ids: Vec<u16> = futures.iter().map(|f| f.id()).collect();
    ids.sort();
    ids.dedup();
    assert_eq!(ids.len(), 32);
    for (i, (f, (_, output))) in futures.iter().zip(&pairs).enumerate() {
        assert_eq!(f.get(WaitMode::Blocking).unwrap(), 64);
        assert!(output.data().iter().all(|&b| b == i as u8));
    }
    assert_eq!(inv.pending(), 0);
}

#[test]
fn submits_from_many_threads() {
    let fabric = Fabric::tcp();
    let mgr = manager(&fabric, 1.0);
    let _ex = executor(&fabric, &mgr, 4);
    let inv = Arc::new(invoker(&fabric, &mgr));
    inv.allocate(&testing_code(), 128, ModeHint::AlwaysWarm, 4).unwrap();
    let handles: Vec<_> = (0..4u8)
        .map(|t| {
            let inv = inv.clone();
            thread::spawn(move || {
                let input = inv.input(128).unwrap();
                let output = inv.output(128).unwrap();
                for k in 0..50u8 {
                    let n = input.fill(&[t ^ k; 100]);
                    let got = inv.submit(0u16, &input, n, &output).unwrap().get(WaitMode::Blocking).unwrap();
                    assert_eq!(got, 100);
                    assert!(output.data()[..100].iter().all(|&b| b == t ^ k));
                }
            })
        })
        .collect();
    handles.into_iter().for_each(|h| h.join().unwrap());
}

#[test]
fn manual_progress() {
    let fabric = Fabric::loopback();
    let mgr = manager(&fabric, 1.0);
    let _ex = executor(&fabric, &mgr, 1);
    let mut cfg = InvokerConfig::new(mgr.address());
    cfg.background_progress = false;
    let inv = Invoker::new(fabric.clone(), cfg).unwrap();
    assert_eq!(inv.progress(), 0);
    inv.allocate(&testing_code(), 64, ModeHint::WarmOk, 1).unwrap();
    assert_eq!(inv.progress(), 0);
    let input = inv.input(64).unwrap();
    let output = inv.output(64).unwrap();
    let n = input.fill(b"abc");
    let fut = inv.submit(0u16, &input, n, &output).unwrap();
    assert_eq!(fut.get(WaitMode::Blocking).unwrap(), 3);
    let fut = inv.submit(0u16, &input, n, &output).unwrap();
    let deadline = Instant::now() + Duration::from_secs(5);
    while !fut.is_done() && Instant::now() < deadline {
        inv.progress();
        thread::yield_now();
    }
    assert_eq!(fut.try_get(), Some(Ok(3)));
}

#[test]
fn input_larger_than_buffer_is_refused() {
    let fabric = Fabric::loopback();
    let mgr = manager(&fabric, 1.0);
    let _ex = executor(&fabric, &mgr, 1);
    let inv = invoker(&fabric, &mgr);
    inv.allocate(&testing_code(), 64, ModeHint::WarmOk, 1).unwrap();
    let input = inv.input(128).unwrap();
    let output = inv.output(128).unwrap();
    assert!(matches!(
        inv.submit(0u16, &input, 100, &output),
        Err(InvocationError::InputTooLarge { len: 100, capacity: 64 })
    ));
}

#[test]
fn killed_executor_fails_pending_invocation() {
    let fabric = Fabric::tcp();
    let mgr = manager(&fabric, 1.0);
    let ex = executor(&fabric, &mgr, 1);
    let inv = invoker(&fabric, &mgr);
    inv.allocate(&testing_code(), 64, ModeHint::WarmOk, 1).unwrap();
    let input = inv.input(64).unwrap();
    let output = inv.output(64).unwrap();
    let n = input.fill(&3000u64.to_le_bytes());
    let fut = inv.submit(1u16, &input, n, &output).unwrap();
    thread::sleep(Duration::from_millis(100));
    ex.kill();
    let r = fut.get_timeout(WaitMode::Blocking, Duration::from_secs(2));
    assert_eq!(r, Some(Err(InvocationError::Disconnected)));
    assert!(wait_until(Duration::from_secs(1), || inv.workers().iter().all(|w| !w.healthy)));
}

#[test]
fn failover_moves_past_a_rejection() {
    let fabric = Fabric::loopback();
    let mgr = manager(&fabric, 2.0);
    let a = executor(&fabric, &mgr, 1);
    let _b = executor(&fabric, &mgr, 1);

    // A hot worker of another client holds A's only core.
    let holder = invoker(&fabric, &mgr);
    let grant = holder.allocate(&testing_code(), 64, ModeHint::AlwaysHot, 1).unwrap();
    assert_eq!(grant.leases[0].executor_id, a.executor_id());
    let hin = holder.input(64).unwrap();
    let hout = holder.output(64).unwrap();
    let n = hin.fill(b"x");
    holder.submit(0u16, &hin, n, &hout).unwrap().get(WaitMode::Blocking).unwrap();
    assert_ne!(a.core_holder(0), 0);

    let inv = invoker(&fabric, &mgr);
    inv.allocate(&testing_code(), 64, ModeHint::WarmOk, 1).unwrap();
    inv.allocate(&testing_code(), 64, ModeHint::WarmOk, 1).unwrap();
    let workers = inv.workers();
    assert_ne!(workers[0].executor_id, a.executor_id());
    assert_eq!(workers[1].executor_id, a.executor_id());

    let input = inv.input(64).unwrap();
    let output = inv.output(64).unwrap();
    let n = input.fill(b"hello");
    inv.submit_to(0, 0u16, &input, n, &output).unwrap().get(WaitMode::Blocking).unwrap();
    assert_eq!(inv.invoke_with_failover(0u16, &input, n, &output).unwrap(), 5);
    let lease = workers[1].lease_id;
    let stats = a.worker_stats(lease).unwrap();
    assert_eq!(stats[0].rejections, 1);
    assert_eq!(&output.data()[..5], b"hello");
}

#[test]
fn failover_gives_up_after_retry_limit() {
    let fabric = Fabric::loopback();
    let mgr = manager(&fabric, 1.0);
    let ex = executor(&fabric, &mgr, 2);
    let inv = invoker(&fabric, &mgr);
    assert_eq!(inv.config().retry_limit, 3);
    let report = inv.allocate(&testing_code(), 64, ModeHint::AlwaysWarm, 2).unwrap();
    let input = inv.input(64).unwrap();
    let output = inv.output(64).unwrap();
    match inv.invoke_with_failover("trap", &input, 0, &output) {
        Err(InvocationError::Exhausted(errors)) => {
            assert_eq!(errors, vec![InvocationError::FunctionError; 3]);
        }
        other => panic!("{other:?}"),
    }
    let total: u64 = ex
        .worker_stats(report.leases[0].lease_id)
        .unwrap()
        .iter()
        .map(|s| s.invocations)
        .sum();
    assert_eq!(total, 3);

    let n = input.fill(b"ok");
    assert_eq!(inv.invoke_with_failover(0u16, &input, n, &output).unwrap(), 2);
}

#[test]
fn deallocate_cancels_pending() {
    let fabric = Fabric::loopback();
    let mgr = manager(&fabric, 1.0);
    let _ex = executor(&fabric, &mgr, 1);
    let inv = invoker(&fabric, &mgr);
    inv.allocate(&testing_code(), 64, ModeHint::WarmOk, 1).unwrap();
    let input = inv.input(64).unwrap();
    let output = inv.output(64).unwrap();
    let n = input.fill(&500u64.to_le_bytes());
    let fut = inv.submit(1u16, &input, n, &output).unwrap();
    inv.deallocate();
    assert_eq!(fut.try_get(), Some(Err(InvocationError::Cancelled)));
    assert!(matches!(inv.submit(0u16, &input, 1, &output), Err(InvocationError::NoWorkers)));
    assert!(wait_until(Duration::from_secs(2), || free_cores(&mgr) == 1));
}

#[test]
fn expired_lease_has_no_workers() {
    let fabric = Fabric::loopback();
    let mgr = manager(&fabric, 1.0);
    let _ex = executor(&fabric, &mgr, 1);
    let mut cfg = InvokerConfig::new(mgr.address());
    cfg.lease_timeout_s = 1;
    cfg.retry_limit = 1;
    let inv = Invoker::new(fabric.clone(), cfg).unwrap();
    inv.allocate(&testing_code(), 64, ModeHint::WarmOk, 1).unwrap();
    thread::sleep(Duration::from_millis(1100));
    let input = inv.input(64).unwrap();
    let output = inv.output(64).unwrap();
    assert!(matches!(inv.submit(0u16, &input, 1, &output), Err(InvocationError::NoWorkers)));
}

#[test]
fn request_and_result_move_without_copies() {
    let fabric = Fabric::loopback();
    let trace = match &fabric {
        Fabric::Loopback(f) => f.enable_trace(),
        _ => unreachable!(),
    };
    let mgr = manager(&fabric, 1.0);
    let _ex = executor(&fabric, &mgr, 1);
    let inv = invoker(&fabric, &mgr);
    inv.allocate(&testing_code(), 4096, ModeHint::WarmOk, 1).unwrap();
    let input = inv.input(4096).unwrap();
    let output = inv.output(4096).unwrap();
    let n = input.fill(&[9; 4000]);
    trace.clear();
    inv.submit(0u16, &input, n, &output).unwrap().get(WaitMode::Blocking).unwrap();
    let writes = trace.entries();
    assert_eq!(writes.len(), 2, "{writes:?}");
    assert_eq!(writes[0].src_region, input.registered().region_id());
    assert_eq!(writes[0].len, 4012);
    assert_eq!(writes[1].dst_region, output.registered().region_id());
    assert_eq!(writes[1].len, 4000);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn echo_returns_any_payload(payload in prop::collection::vec(any::<u8>(), 1..(1usize << 20))) {
        let fabric = Fabric::loopback();
        let mgr = manager(&fabric, 1.0);
        let _ex = executor(&fabric, &mgr, 1);
        let inv = invoker(&fabric, &mgr);
        inv.allocate(&testing_code(), 1 << 20, ModeHint::WarmOk, 1).unwrap();
        let input = inv.input(1 << 20).unwrap();
        let output = inv.output(1 << 20).unwrap();
        let n = input.fill(&payload);
        let got = inv.submit(0u16, &input, n, &output).unwrap().get(WaitMode::Blocking).unwrap();
        prop_assert_eq!(got, payload.len());
        prop_assert_eq!(&output.data()[..got], &payload[..]);
    }
}
