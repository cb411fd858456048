use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use spotlease::transport::{
    BackendKind, CompletionEvent, CompletionKind, CompletionQueue, CompletionStatus, Endpoint,
    Fabric, MemoryDomain, PollMode, TransportError,
};

struct Pair {
    a: Endpoint,
    a_domain: MemoryDomain,
    a_cq: CompletionQueue,
    b: Endpoint,
    b_domain: MemoryDomain,
    b_cq: CompletionQueue,
}

fn pair(fabric: &Fabric) -> Pair {
    let (a_domain, b_domain) = (MemoryDomain::new(), MemoryDomain::new());
    let (a_cq, b_cq) = (CompletionQueue::new(), CompletionQueue::new());
    let listener = fabric
        .listen(fabric.any_address(), &b_domain, &b_cq)
        .unwrap();
    let addr = listener.local_addr();
    let (a, b) = thread::scope(|s| {
        let acceptor = s.spawn(|| listener.accept(Some(Duration::from_secs(5))).unwrap());
        let a = fabric.connect(&addr, &a_domain, &a_cq).unwrap();
        (a, acceptor.join().unwrap())
    });
    Pair {
        a,
        a_domain,
        a_cq,
        b,
        b_domain,
        b_cq,
    }
}

fn wait_for(
    cq: &CompletionQueue,
    pred: impl Fn(&CompletionEvent) -> bool,
) -> CompletionEvent {
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        for ev in cq.poll(PollMode::Blocking(Duration::from_millis(50))).unwrap() {
            if pred(&ev) {
                return ev;
            }
        }
        assert!(Instant::now() < deadline, "timed out waiting for completion");
    }
}

fn backends() -> [Fabric; 2] {
    [Fabric::loopback(), Fabric::tcp()]
}

#[test]
fn write_with_imm_delivers_bytes_and_immediate() {
    for fabric in backends() {
        let p = pair(&fabric);
        let src = p.a_domain.alloc_registered(100).unwrap();
        src.write().copy_from_slice(&[0x5A; 100]);
        let dst = p.b_domain.alloc_registered(4096).unwrap();
        p.a.write_with_imm(&src, 0, 100, dst.remote_ref(), 7).unwrap();

        let got = wait_for(&p.b_cq, |e| e.kind == CompletionKind::WriteReceived);
        assert_eq!((got.byte_len, got.immediate), (100, Some(7)));
        let done = wait_for(&p.a_cq, |e| e.kind == CompletionKind::WriteDone);
        assert_eq!(done.status, CompletionStatus::Ok);
        assert_eq!(done.immediate, Some(7));
        assert_eq!(&dst.read()[..100], &[0x5A; 100]);
        assert!(dst.read()[100..].iter().all(|&b| b == 0));
        assert_eq!(p.a_domain.metrics().snapshot().inlined_sends, 1);
    }
}

#[test]
fn inline_limit_is_128_bytes() {
    for fabric in backends() {
        let p = pair(&fabric);
        let src = p.a_domain.alloc_registered(256).unwrap();
        let dst = p.b_domain.alloc_registered(256).unwrap();
        for len in [1usize, 127, 128, 129, 256] {
            p.a.write_with_imm(&src, 0, len, dst.remote_ref(), len as u32).unwrap();
            wait_for(&p.b_cq, |e| e.immediate == Some(len as u32));
        }
        let m = p.a_domain.metrics().snapshot();
        assert_eq!(m.writes, 5);
        assert_eq!(m.inlined_sends, 3, "{fabric:?}");
    }
}

#[test]
fn stale_key_yields_remote_access_error() {
    for fabric in backends() {
        let p = pair(&fabric);
        let src = p.a_domain.alloc_registered(64).unwrap();
        let dst = p.b_domain.alloc_registered(64).unwrap();
        let stale = dst.remote_ref();
        drop(dst);
        p.a.write_with_imm(&src, 0, 64, stale, 1).unwrap();
        let done = wait_for(&p.a_cq, |e| e.kind == CompletionKind::WriteDone);
        assert_eq!(done.status, CompletionStatus::RemoteAccessError);
        // the connection stays usable
        let fresh = p.b_domain.alloc_registered(64).unwrap();
        p.a.write_with_imm(&src, 0, 64, fresh.remote_ref(), 2).unwrap();
        let ok = wait_for(&p.b_cq, |e| e.kind == CompletionKind::WriteReceived);
        assert_eq!(ok.immediate, Some(2));
    }
}

#[test]
fn out_of_bounds_write_never_touches_memory() {
    for fabric in backends() {
        let p = pair(&fabric);
        let src = p.a_domain.alloc_registered(8192).unwrap();
        src.write().fill(0xFF);
        let region = p.b_domain.allocate(8192);
        let small = p.b_domain.register(&region, 0, 4096).unwrap();
        let mut lying = small.remote_ref();
        lying.length = 8192;
        p.a.write_with_imm(&src, 0, 8192, lying, 3).unwrap();
        let done = wait_for(&p.a_cq, |e| e.kind == CompletionKind::WriteDone);
        assert_eq!(done.status, CompletionStatus::RemoteAccessError);
        assert!(region.read().iter().all(|&b| b == 0));
    }
}

#[test]
fn writes_are_observed_in_issue_order() {
    for fabric in backends() {
        let p = pair(&fabric);
        let src = p.a_domain.alloc_registered(4096).unwrap();
        let dst = p.b_domain.alloc_registered(4096).unwrap();
        for i in 0..200u32 {
            p.a.write_with_imm(&src, 0, (i as usize % 64) + 1, dst.remote_ref(), i).unwrap();
        }
        let mut seen = Vec::new();
        while seen.len() < 200 {
            for ev in p.b_cq.poll(PollMode::Blocking(Duration::from_secs(5))).unwrap() {
                if ev.kind == CompletionKind::WriteReceived {
                    seen.push(ev.immediate.unwrap());
                }
            }
        }
        assert_eq!(seen, (0..200).collect::<Vec<_>>());
    }
}

#[test]
fn payload_sizes_up_to_five_mib_round_trip() {
    for fabric in backends() {
        let p = pair(&fabric);
        let max = 5 << 20;
        let src = p.a_domain.alloc_registered(max).unwrap();
        {
            let mut view = src.write();
            for (i, b) in view.iter_mut().enumerate() {
                *b = (i.wrapping_mul(2_654_435_761) >> 13) as u8;
            }
        }
        let dst = p.b_domain.alloc_registered(max).unwrap();
        for len in [1usize, 1024, 128 * 1024, 1 << 20, max] {
            dst.write().fill(0);
            p.a.write_with_imm(&src, 0, len, dst.remote_ref(), len as u32).unwrap();
            let ev = wait_for(&p.b_cq, |e| e.kind == CompletionKind::WriteReceived);
            assert_eq!(ev.byte_len as usize, len);
            assert_eq!(&dst.read()[..len], &src.read()[..len]);
        }
    }
}

#[test]
fn blocking_poll_is_woken_by_peer_write() {
    for fabric in backends() {
        let p = pair(&fabric);
        let src = p.a_domain.alloc_registered(16).unwrap();
        let dst = p.b_domain.alloc_registered(16).unwrap();
        let target = dst.remote_ref();
        let a = p.a.clone();
        let writer = thread::spawn(move || {
            thread::sleep(Duration::from_millis(20));
            a.write_with_imm(&src, 0, 16, target, 0xBEEF).unwrap();
        });
        let events = p.b_cq.poll(PollMode::Blocking(Duration::from_secs(5))).unwrap();
        writer.join().unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].kind, CompletionKind::WriteReceived);
        assert_eq!(events[0].immediate, Some(0xBEEF));
    }
}

#[test]
fn busy_poll_after_completed_write_yields_one_write_done() {
    let fabric = Fabric::loopback();
    let p = pair(&fabric);
    let src = p.a_domain.alloc_registered(16).unwrap();
    let dst = p.b_domain.alloc_registered(16).unwrap();
    p.a.write_with_imm(&src, 0, 16, dst.remote_ref(), 1).unwrap();
    let events = p.a_cq.poll(PollMode::Busy).unwrap();
    assert_eq!(events.len(), 1);
    assert_eq!(events[0].kind, CompletionKind::WriteDone);
}

#[test]
fn send_delivers_payload() {
    for fabric in backends() {
        let p = pair(&fabric);
        p.a.send(b"hello").unwrap();
        let ev = wait_for(&p.b_cq, |e| e.kind == CompletionKind::Recv);
        assert_eq!(ev.payload.as_deref(), Some(&b"hello"[..]));
        assert_eq!(ev.endpoint, p.b.id());
    }
}

#[test]
fn fetch_and_add_returns_previous_value() {
    for fabric in backends() {
        let p = pair(&fabric);
        let slot = p.b_domain.alloc_registered(8).unwrap();
        let r = slot.remote_ref();
        assert_eq!(p.a.fetch_and_add(r, 5).unwrap(), 0);
        assert_eq!(slot.read_u64(0), 5);
        assert_eq!(p.a.fetch_and_add(r, 0).unwrap(), 5);
        assert_eq!(slot.read_u64(0), 5);
        let mut misaligned = r;
        misaligned.address += 3;
        assert!(matches!(
            p.a.fetch_and_add(misaligned, 1),
            Err(TransportError::Alignment { .. })
        ));
    }
}

#[test]
fn concurrent_fetch_and_add_matches_sequential_counter() {
    for fabric in backends() {
        let owner = MemoryDomain::new();
        let owner_cq = CompletionQueue::new();
        let listener = fabric
            .listen(fabric.any_address(), &owner, &owner_cq)
            .unwrap();
        let addr = listener.local_addr();
        let slot = owner.alloc_registered(8).unwrap();
        let target = slot.remote_ref();
        let (writers, adds) = (8, 1000u64);
        let accepted = Arc::new(parking_lot::Mutex::new(Vec::new()));
        let handles: Vec<_> = (0..writers)
            .map(|_| {
                let (fabric, addr) = (fabric.clone(), addr.clone());
                thread::spawn(move || {
                    let domain = MemoryDomain::new();
                    let cq = CompletionQueue::new();
                    let ep = fabric.connect(&addr, &domain, &cq).unwrap();
                    let mut prevs = Vec::new();
                    for _ in 0..adds {
                        prevs.push(ep.fetch_and_add(target, 1).unwrap());
                    }
                    prevs
                })
            })
            .collect();
        for _ in 0..writers {
            accepted
                .lock()
                .push(listener.accept(Some(Duration::from_secs(5))).unwrap());
        }
        let mut all_prev: Vec<u64> = handles
            .into_iter()
            .flat_map(|h| h.join().unwrap())
            .collect();
        // sequential oracle: each add observes a distinct prior count
        let oracle: Vec<u64> = (0..writers as u64 * adds).collect();
        all_prev.sort_unstable();
        assert_eq!(all_prev, oracle);
        assert_eq!(slot.read_u64(0), writers as u64 * adds);
    }
}

#[test]
fn disconnect_is_observed_by_peer() {
    for fabric in backends() {
        let p = pair(&fabric);
        p.a.disconnect();
        let ev = wait_for(&p.b_cq, |e| e.status == CompletionStatus::Disconnected);
        assert_eq!(ev.endpoint, p.b.id());
        assert!(!p.a.is_connected());
        let buf = p.b_domain.alloc_registered(8).unwrap();
        let deadline = Instant::now() + Duration::from_secs(2);
        while p.b.is_connected() && Instant::now() < deadline {
            thread::sleep(Duration::from_millis(1));
        }
        assert!(matches!(
            p.b.write_with_imm(&buf, 0, 8, buf.remote_ref(), 0),
            Err(TransportError::Disconnected)
        ));
        let _ = &p.a_cq;
    }
}

#[test]
fn dropping_endpoint_disconnects() {
    for fabric in backends() {
        let Pair { a, b, b_cq, .. } = pair(&fabric);
        drop(a);
        wait_for(&b_cq, |e| e.status == CompletionStatus::Disconnected);
        assert!(!b.is_connected());
    }
}

#[test]
fn connect_to_missing_listener_fails() {
    let domain = MemoryDomain::new();
    let cq = CompletionQueue::new();
    let err = Fabric::loopback()
        .connect("nowhere", &domain, &cq)
        .unwrap_err();
    assert!(matches!(err, TransportError::Connect { .. }));

    // grab a free port, then close it
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let err = Fabric::tcp()
        .connect(&format!("127.0.0.1:{port}"), &domain, &cq)
        .unwrap_err();
    assert!(matches!(err, TransportError::Connect { .. }));
}

/// Runs one scripted operation sequence and reports what each side observed.
fn scripted_trace(fabric: &Fabric) -> (Vec<(CompletionKind, u32, Option<u32>, CompletionStatus)>, Vec<u8>) {
    let p = pair(fabric);
    let src = p.a_domain.alloc_registered(512).unwrap();
    for (i, b) in src.write().iter_mut().enumerate() {
        *b = i as u8;
    }
    let dst = p.b_domain.alloc_registered(300).unwrap();
    let slot = p.b_domain.alloc_registered(8).unwrap();
    p.a.write_with_imm(&src, 0, 100, dst.remote_ref(), 1).unwrap();
    p.a.write_with_imm(&src, 200, 200, dst.remote_ref().slice(100, 200).unwrap(), 2).unwrap();
    p.a.write_with_imm(&src, 0, 400, dst.remote_ref(), 3).unwrap();
    p.a.send(b"ctl").unwrap();
    p.a.fetch_and_add(slot.remote_ref(), 9).unwrap();
    let mut trace = Vec::new();
    let deadline = Instant::now() + Duration::from_secs(5);
    while trace.len() < 3 + 3 && Instant::now() < deadline {
        for ev in p.b_cq.poll(PollMode::Blocking(Duration::from_millis(20))).unwrap() {
            trace.push((ev.kind, ev.byte_len, ev.immediate, ev.status));
        }
        for ev in p.a_cq.poll(PollMode::Busy).unwrap() {
            if ev.kind == CompletionKind::WriteDone {
                trace.push((ev.kind, ev.byte_len, ev.immediate, ev.status));
            }
        }
    }
    trace.sort_by_key(|t| (t.0 as u8, t.2));
    let bytes = dst.read().to_vec();
    (trace, bytes)
}

#[test]
fn loopback_and_tcp_are_observationally_equivalent() {
    let (lt, lb) = scripted_trace(&Fabric::loopback());
    let (tt, tb) = scripted_trace(&Fabric::tcp());
    assert_eq!(lt, tt);
    assert_eq!(lb, tb);
    assert_eq!(Fabric::loopback().kind(), BackendKind::Loopback);
}
