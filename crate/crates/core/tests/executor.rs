use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use spotlease::executor::{ExecutorConfig, ExecutorService, SandboxKind, HOT_TIMEOUT_DEFAULT};
use spotlease::manager::{AllowAll, BillingRates, ManagerConfig, ManagerService};
use spotlease::protocol::{
    pack_request, AllocationRequest, CodeSubmission, ControlMessage, ErrorCode, InvocationHeader, InvocationImmediate,
    LeaseGrant, ResultImmediate, ResultStatus, WorkerInfo,
};
use spotlease::transport::{
    CompletionKind, CompletionQueue, CompletionStatus, Endpoint, Fabric, MemoryDomain, PollMode, RegisteredBuffer,
};

const CLIENT: u64 = 42;

fn manager(fabric: &Fabric, oversub: f64) -> ManagerService {
    let config = ManagerConfig {
        oversubscription: oversub,
        rates: BillingRates::from_dollars(1e-5, 1e-4, 5e-5),
        heartbeat_interval: Duration::from_millis(100),
        ..ManagerConfig::default()
    };
    ManagerService::start(fabric, config, Arc::new(AllowAll)).unwrap()
}

fn executor(fabric: &Fabric, mgr: &ManagerService, cores: u32, tweak: impl FnOnce(&mut ExecutorConfig)) -> ExecutorService {
    let mut cfg = ExecutorConfig::new(mgr.address(), cores, 4096);
    cfg.heartbeat_interval = Duration::from_millis(100);
    cfg.pin = false;
    tweak(&mut cfg);
    ExecutorService::start(fabric, cfg).unwrap()
}

struct Session {
    domain: MemoryDomain,
    cq: CompletionQueue,
    manager: Endpoint,
    lease: LeaseGrant,
    executor: Option<Endpoint>,
}

fn recv(cq: &CompletionQueue, from: &Endpoint, timeout: Duration) -> Option<ControlMessage> {
    let deadline = Instant::now() + timeout;
    while Instant::now() < deadline {
        for ev in cq.poll(PollMode::Blocking(Duration::from_millis(20))).unwrap() {
            if ev.endpoint == from.id() && ev.kind == CompletionKind::Recv && ev.status == CompletionStatus::Ok {
                return Some(ControlMessage::decode(&ev.payload.unwrap()).unwrap());
            }
        }
    }
    None
}

impl Session {
    fn lease(fabric: &Fabric, mgr: &ManagerService, cores: u32, timeout_s: u32) -> Self {
        let domain = MemoryDomain::new();
        let cq = CompletionQueue::new();
        let manager = fabric.connect(mgr.address(), &domain, &cq).unwrap();
        let request = AllocationRequest {
            cores,
            memory_mb: 2048,
            timeout_s,
            token: vec![],
        };
        manager
            .send(&ControlMessage::RequestLease { client_id: CLIENT, request }.encode())
            .unwrap();
        let lease = match recv(&cq, &manager, Duration::from_secs(5)) {
            Some(ControlMessage::LeaseGranted(g)) => g,
            other => panic!("no lease: {other:?}"),
        };
        Self {
            domain,
            cq,
            manager,
            lease,
            executor: None,
        }
    }

    fn allocate(&mut self, fabric: &Fabric, code: CodeSubmission, hot_timeout_ms: u32) -> ControlMessage {
        let addr = self.lease.executor_endpoints[0].address.clone();
        let ep = fabric.connect(&addr, &self.domain, &self.cq).unwrap();
        ep.send(
            &ControlMessage::AllocateSandbox {
                lease_id: self.lease.lease_id,
                client_id: CLIENT,
                hot_timeout_ms,
                buffer_bytes: 1 << 16,
                code,
            }
            .encode(),
        )
        .unwrap();
        let reply = recv(&self.cq, &ep, Duration::from_secs(10)).expect("allocation reply");
        self.executor = Some(ep);
        reply
    }

    fn workers(&mut self, fabric: &Fabric, code: CodeSubmission, hot_timeout_ms: u32) -> Vec<WorkerConn> {
        match self.allocate(fabric, code, hot_timeout_ms) {
            ControlMessage::SandboxReady { workers, .. } => {
                workers.into_iter().map(|w| WorkerConn::connect(fabric, w)).collect()
            }
            other => panic!("allocation failed: {other:?}"),
        }
    }
}

struct WorkerConn {
    info: WorkerInfo,
    domain: MemoryDomain,
    cq: CompletionQueue,
    ep: Endpoint,
    input: RegisteredBuffer,
    output: RegisteredBuffer,
    next_id: u16,
}

impl WorkerConn {
    fn connect(fabric: &Fabric, info: WorkerInfo) -> Self {
        let domain = MemoryDomain::new();
        let cq = CompletionQueue::new();
        let ep = fabric.connect(&info.address, &domain, &cq).unwrap();
        Self {
            info,
            ep,
            input: domain.alloc_registered(1 << 16).unwrap(),
            output: domain.alloc_registered(1 << 16).unwrap(),
            domain,
            cq,
            next_id: 1,
        }
    }

    fn submit_into(&mut self, function: u16, payload: &[u8], out: &RegisteredBuffer) -> u16 {
        let header = InvocationHeader::from(out.remote_ref());
        let n = pack_request(&header, payload, &mut self.input.write()).unwrap();
        let id = self.next_id;
        self.next_id = self.next_id.wrapping_add(1);
        let imm = InvocationImmediate {
            invocation_id: id,
            function_index: function,
        };
        self.ep
            .write_with_imm(&self.input, 0, n, self.info.request_buffer, imm.pack())
            .unwrap();
        id
    }

    fn wait(&self, timeout: Duration) -> Option<(ResultImmediate, usize)> {
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            for ev in self.cq.poll(PollMode::Blocking(Duration::from_millis(10))).unwrap() {
                if ev.kind == CompletionKind::WriteReceived {
                    return Some((ResultImmediate::unpack(ev.immediate.unwrap()), ev.byte_len as usize));
                }
                if ev.kind == CompletionKind::Recv && ev.status == CompletionStatus::Disconnected {
                    return None;
                }
            }
        }
        None
    }

    fn invoke(&mut self, function: u16, payload: &[u8]) -> (ResultStatus, Vec<u8>) {
        let out = self.output.clone();
        let id = self.submit_into(function, payload, &out);
        let (imm, len) = self.wait(Duration::from_secs(10)).expect("result");
        assert_eq!(imm.invocation_id, id);
        (imm.status, self.output.read()[..len].to_vec())
    }
}

fn testing_code() -> CodeSubmission {
    CodeSubmission::builtin("testing", &["echo", "sleep", "trap", "fill"])
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

fn both_backends(test: impl Fn(Fabric)) {
    test(Fabric::loopback());
    test(Fabric::tcp());
}

#[test]
fn sandbox_serves_echo_on_every_worker() {
    both_backends(|fabric| {
        let mgr = manager(&fabric, 1.0);
        let ex = executor(&fabric, &mgr, 4, |_| {});
        let mut s = Session::lease(&fabric, &mgr, 2, 30);
        let mut workers = s.workers(&fabric, testing_code(), HOT_TIMEOUT_DEFAULT);
        assert_eq!(workers.len(), 2);
        assert_ne!(workers[0].info.request_buffer, workers[1].info.request_buffer);
        let payload: Vec<u8> = (0..1024u32).map(|i| (i * 7) as u8).collect();
        for w in &mut workers {
            let (status, out) = w.invoke(0, &payload);
            assert_eq!(status, ResultStatus::Ok);
            assert_eq!(out, payload);
        }
        assert!(ex.has_sandbox(s.lease.lease_id));
    });
}

#[test]
fn worker_error_statuses() {
    both_backends(|fabric| {
        let mgr = manager(&fabric, 1.0);
        let _ex = executor(&fabric, &mgr, 2, |_| {});
        let mut s = Session::lease(&fabric, &mgr, 1, 30);
        let mut w = s.workers(&fabric, testing_code(), HOT_TIMEOUT_DEFAULT).remove(0);

        assert_eq!(w.invoke(9, b"x").0, ResultStatus::UnknownFunction);
        assert_eq!(w.invoke(2, b"boom").0, ResultStatus::FunctionError);
        // Larger than the worker's own output region.
        assert_eq!(w.invoke(3, &(1u32 << 20).to_le_bytes()).0, ResultStatus::OutputOverflow);

        // Larger than the client's result buffer: nothing lands there.
        let small = w.domain.alloc_registered(16).unwrap();
        w.submit_into(3, &64u32.to_le_bytes(), &small);
        let (imm, len) = w.wait(Duration::from_secs(5)).unwrap();
        assert_eq!((imm.status, len), (ResultStatus::OutputOverflow, 0));
        assert!(small.read().iter().all(|&b| b == 0));

        // The worker is still healthy afterwards.
        let (status, out) = w.invoke(0, b"still here");
        assert_eq!((status, out.as_slice()), (ResultStatus::Ok, &b"still here"[..]));
    });
}

#[test]
fn back_to_back_invocations_run_hot() {
    both_backends(|fabric| {
        let mgr = manager(&fabric, 1.0);
        let ex = executor(&fabric, &mgr, 2, |_| {});
        let mut s = Session::lease(&fabric, &mgr, 1, 30);
        let mut w = s.workers(&fabric, testing_code(), 2_000);
        let lease = s.lease.lease_id;
        assert_eq!(w[0].invoke(0, b"a").0, ResultStatus::Ok);
        let before = ex.worker_stats(lease).unwrap()[0];
        assert_eq!(w[0].invoke(0, b"b").0, ResultStatus::Ok);
        let after = ex.worker_stats(lease).unwrap()[0];
        assert_eq!(after.blocking_waits, before.blocking_waits);
        assert_eq!(after.warm_invocations, 1);
        assert_eq!(after.hot_invocations, 1);
    });
}

#[test]
fn warm_only_when_hot_timeout_is_zero() {
    let fabric = Fabric::loopback();
    let mgr = manager(&fabric, 1.0);
    let ex = executor(&fabric, &mgr, 1, |_| {});
    let mut s = Session::lease(&fabric, &mgr, 1, 30);
    let mut w = s.workers(&fabric, testing_code(), 0);
    for _ in 0..5 {
        assert_eq!(w[0].invoke(0, b"w").0, ResultStatus::Ok);
    }
    let st = ex.worker_stats(s.lease.lease_id).unwrap()[0];
    assert_eq!((st.warm_invocations, st.hot_invocations, st.hot_ns), (5, 0, 0));
    assert_eq!(st.admission_checks, 5);
}

#[test]
fn oversubscribed_core_rejects_warm_invocation() {
    both_backends(|fabric| {
        let mgr = manager(&fabric, 2.0);
        let ex = executor(&fabric, &mgr, 1, |_| {});
        let mut s = Session::lease(&fabric, &mgr, 2, 30);
        let mut w = s.workers(&fabric, testing_code(), 400);
        let lease = s.lease.lease_id;
        // Worker 0 goes hot and keeps the only core.
        assert_eq!(w[0].invoke(0, b"hot").0, ResultStatus::Ok);
        let (status, out) = w[1].invoke(0, b"warm");
        assert_eq!(status, ResultStatus::Rejected);
        assert!(out.is_empty());
        // Hot worker keeps admitting.
        for _ in 0..20 {
            assert_eq!(w[0].invoke(0, b"burst").0, ResultStatus::Ok);
        }
        assert_eq!(ex.worker_stats(lease).unwrap()[0].rejections, 0);
        // Once worker 0 falls back to warm the core is free again.
        assert!(wait_until(Duration::from_secs(3), || ex.core_holder(0) == 0));
        assert_eq!(w[1].invoke(0, b"warm").0, ResultStatus::Ok);
        assert_eq!(ex.worker_stats(lease).unwrap()[1].rejections, 1);
    });
}

#[test]
fn usage_reaches_the_ledger() {
    both_backends(|fabric| {
        let mgr = manager(&fabric, 1.0);
        let ex = executor(&fabric, &mgr, 2, |c| c.flush_interval = Duration::from_millis(100));
        let mut s = Session::lease(&fabric, &mgr, 1, 30);
        let mut w = s.workers(&fabric, testing_code(), 200);
        let lease = s.lease.lease_id;
        let started = Instant::now();
        assert_eq!(w[0].invoke(1, &300u64.to_le_bytes()).0, ResultStatus::Ok);
        thread::sleep(Duration::from_millis(500));
        s.manager
            .send(&ControlMessage::ReleaseLease { lease_id: lease }.encode())
            .unwrap();
        assert!(wait_until(Duration::from_secs(3), || !ex.lease_ids().contains(&lease)));
        let alive_ms = started.elapsed().as_millis() as u64;
        thread::sleep(Duration::from_millis(300));
        let usage = mgr.with_state(|m| m.usage(CLIENT)).unwrap();
        assert!((300..400).contains(&usage.t_c_ms), "t_c {}", usage.t_c_ms);
        assert!((150..260).contains(&usage.t_h_ms), "t_h {}", usage.t_h_ms);
        // 2048 MiB: two milli-GB-s per millisecond alive.
        assert!(usage.t_a_milli_gbs <= 2 * (alive_ms + 100), "t_a {} alive {alive_ms}", usage.t_a_milli_gbs);
        assert!(usage.t_a_milli_gbs >= 2 * 750, "t_a {}", usage.t_a_milli_gbs);
        assert!(ex.flushes() > 0);
    });
}

#[test]
fn lease_expiry_tears_down_after_inflight_invocation() {
    both_backends(|fabric| {
        let mgr = manager(&fabric, 1.0);
        let ex = executor(&fabric, &mgr, 2, |_| {});
        let mut s = Session::lease(&fabric, &mgr, 1, 1);
        let mut w = s.workers(&fabric, testing_code(), HOT_TIMEOUT_DEFAULT);
        let lease = s.lease.lease_id;
        let until_expiry = s.lease.expiry_ms.saturating_sub(spotlease::unix_time_ms());
        thread::sleep(Duration::from_millis(until_expiry.saturating_sub(300)));
        // Straddles the expiry deadline.
        let (status, _) = w[0].invoke(1, &700u64.to_le_bytes());
        assert_eq!(status, ResultStatus::Ok);
        assert!(wait_until(Duration::from_secs(2), || !ex.lease_ids().contains(&lease)));
        assert!(w[0].wait(Duration::from_secs(2)).is_none());
        assert!(wait_until(Duration::from_secs(2), || mgr.with_state(|m| {
            m.executor(ex.executor_id()).unwrap().free_cores == 2
        })));
    });
}

#[test]
fn idle_sandbox_is_reclaimed() {
    let fabric = Fabric::loopback();
    let mgr = manager(&fabric, 1.0);
    let ex = executor(&fabric, &mgr, 2, |c| c.idle_timeout = Duration::from_millis(300));
    let mut s = Session::lease(&fabric, &mgr, 2, 30);
    let mut w = s.workers(&fabric, testing_code(), HOT_TIMEOUT_DEFAULT);
    assert_eq!(w[0].invoke(0, b"x").0, ResultStatus::Ok);
    let lease = s.lease.lease_id;
    assert!(wait_until(Duration::from_secs(2), || !ex.lease_ids().contains(&lease)));
    assert!(wait_until(Duration::from_secs(2), || mgr.with_state(|m| {
        m.executor(ex.executor_id()).unwrap().free_cores == 2
    })));
    // The client hears about it from the manager.
    match recv(&s.cq, &s.manager, Duration::from_secs(2)) {
        Some(ControlMessage::LeaseTerminated { lease_id, .. }) => assert_eq!(lease_id, lease),
        other => panic!("expected termination notice, got {other:?}"),
    }
}

#[test]
fn allocation_errors() {
    let fabric = Fabric::tcp();
    let mgr = manager(&fabric, 1.0);
    let _ex = executor(&fabric, &mgr, 2, |c| {
        c.sandbox = SandboxKind::Process {
            program: "/nonexistent/sandbox".into(),
            args: vec![],
        }
    });
    let mut s = Session::lease(&fabric, &mgr, 2, 30);
    match s.allocate(&fabric, testing_code(), HOT_TIMEOUT_DEFAULT) {
        ControlMessage::Error { code, .. } => assert_eq!(code, ErrorCode::SpawnFailed),
        other => panic!("expected spawn failure, got {other:?}"),
    }
    assert!(wait_until(Duration::from_secs(2), || mgr.with_state(|m| m.leases().count() == 0
        || m.leases().all(|l| l.state != spotlease::manager::LeaseState::Active))));

    let mut s = Session::lease(&fabric, &mgr, 1, 30);
    let bad = CodeSubmission::builtin("testing", &["nope"]);
    s.executor = None;
    match s.allocate(&fabric, bad, HOT_TIMEOUT_DEFAULT) {
        ControlMessage::Error { code, .. } => assert_eq!(code, ErrorCode::SpawnFailed),
        other => panic!("expected error, got {other:?}"),
    }
}

#[test]
fn inline_sandbox_rejects_loopback_process_config() {
    let fabric = Fabric::loopback();
    let mgr = manager(&fabric, 1.0);
    let mut cfg = ExecutorConfig::new(mgr.address(), 1, 1024);
    cfg.sandbox = SandboxKind::Process {
        program: "/bin/true".into(),
        args: vec![],
    };
    assert!(ExecutorService::start(&fabric, cfg).is_err());
}
