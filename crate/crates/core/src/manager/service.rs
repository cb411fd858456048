use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;

use super::state::{Notice, Recipient, ResourceManager};
use super::{ManagerConfig, ManagerError, TokenVerifier};
use crate::protocol::{ControlMessage, ErrorCode};
use crate::transport::{
    CompletionKind, CompletionQueue, CompletionStatus, EndpointId, Endpoint, Fabric, MemoryDomain, PollMode,
    TransportError,
};
use crate::unix_time_ms;

/// Counts of control messages by message name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ManagerStats {
    pub received: HashMap<&'static str, u64>,
    pub sent: HashMap<&'static str, u64>,
}

impl ManagerStats {
    pub fn total(&self) -> u64 {
        self.received.values().sum()
    }

    pub fn count(&self, name: &str) -> u64 {
        self.received.get(name).copied().unwrap_or(0)
    }

    /// Everything except executor heartbeats.
    pub fn non_heartbeat(&self) -> u64 {
        self.total() - self.count("Heartbeat")
    }

    pub fn total_sent(&self) -> u64 {
        self.sent.values().sum()
    }
}

fn message_name(m: &ControlMessage) -> &'static str {
    match m {
        ControlMessage::RegisterExecutor(_) => "RegisterExecutor",
        ControlMessage::ExecutorRegistered { .. } => "ExecutorRegistered",
        ControlMessage::DeregisterExecutor { .. } => "DeregisterExecutor",
        ControlMessage::Heartbeat { .. } => "Heartbeat",
        ControlMessage::RequestLease { .. } => "RequestLease",
        ControlMessage::LeaseGranted(_) => "LeaseGranted",
        ControlMessage::ReleaseLease { .. } => "ReleaseLease",
        ControlMessage::LeaseReleased { .. } => "LeaseReleased",
        ControlMessage::LeaseAssigned { .. } => "LeaseAssigned",
        ControlMessage::LeaseTerminated { .. } => "LeaseTerminated",
        ControlMessage::AllocateSandbox { .. } => "AllocateSandbox",
        ControlMessage::SandboxReady { .. } => "SandboxReady",
        ControlMessage::UsageReport { .. } => "UsageReport",
        ControlMessage::BillingQuery { .. } => "BillingQuery",
        ControlMessage::BillingReport { .. } => "BillingReport",
        ControlMessage::Error { .. } => "Error",
    }
}

struct Shared {
    state: Mutex<ResourceManager>,
    endpoints: Mutex<HashMap<EndpointId, Endpoint>>,
    executor_eps: Mutex<HashMap<u64, EndpointId>>,
    client_eps: Mutex<HashMap<u64, EndpointId>>,
    stats: Mutex<ManagerStats>,
    revocations: Mutex<Vec<u64>>,
    verifying: AtomicUsize,
    verifier: Arc<dyn TokenVerifier>,
    stop: AtomicBool,
}

/// The manager process: a listener, an accept thread and one serialized
/// service loop that owns all state transitions.
pub struct ManagerService {
    address: String,
    shared: Arc<Shared>,
    cq: CompletionQueue,
    threads: Vec<JoinHandle<()>>,
}

impl std::fmt::Debug for ManagerService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ManagerService").field("address", &self.address).finish()
    }
}

impl ManagerService {
    pub fn start(
        fabric: &Fabric,
        config: ManagerConfig,
        verifier: Arc<dyn TokenVerifier>,
    ) -> Result<Self, TransportError> {
        let domain = MemoryDomain::new();
        let cq = CompletionQueue::new();
        let listen_addr = if config.listen.is_empty() {
            fabric.any_address().to_string()
        } else {
            config.listen.clone()
        };
        let listener = fabric.listen(&listen_addr, &domain, &cq)?;
        let address = listener.local_addr();
        let shared = Arc::new(Shared {
            state: Mutex::new(ResourceManager::new(config, domain)),
            endpoints: Mutex::new(HashMap::new()),
            executor_eps: Mutex::new(HashMap::new()),
            client_eps: Mutex::new(HashMap::new()),
            stats: Mutex::new(ManagerStats::default()),
            revocations: Mutex::new(Vec::new()),
            verifying: AtomicUsize::new(0),
            verifier,
            stop: AtomicBool::new(false),
        });

        let accept_shared = shared.clone();
        let acceptor = std::thread::Builder::new()
            .name("manager-accept".into())
            .spawn(move || {
                while !accept_shared.stop.load(Ordering::Acquire) {
                    let result = listener.accept_then(Some(Duration::from_millis(50)), |ep| {
                        accept_shared.endpoints.lock().insert(ep.id(), ep.clone());
                    });
                    match result {
                        Ok(_) | Err(TransportError::Timeout) => {}
                        Err(e) => log::debug!("manager accept: {e}"),
                    }
                }
            })
            .expect("spawn accept thread");

        let loop_shared = shared.clone();
        let loop_cq = cq.clone();
        let service = std::thread::Builder::new()
            .name("manager-loop".into())
            .spawn(move || service_loop(&loop_shared, &loop_cq))
            .expect("spawn manager loop");

        log::info!("manager listening on {address}");
        Ok(Self {
            address,
            shared,
            cq,
            threads: vec![acceptor, service],
        })
    }

    pub fn address(&self) -> &str {
        &self.address
    }

    pub fn stats(&self) -> ManagerStats {
        self.shared.stats.lock().clone()
    }

    /// Read access to the live state machine.
    pub fn with_state<R>(&self, f: impl FnOnce(&ResourceManager) -> R) -> R {
        f(&self.shared.state.lock())
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.stop.store(true, Ordering::Release);
        self.cq.close();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        for (_, ep) in self.shared.endpoints.lock().drain() {
            ep.disconnect();
        }
    }
}

impl Drop for ManagerService {
    fn drop(&mut self) {
        self.stop();
    }
}

fn service_loop(shared: &Arc<Shared>, cq: &CompletionQueue) {
    let mut events = Vec::new();
    loop {
        let now = unix_time_ms();
        let notices = {
            let mut state = shared.state.lock();
            let mut n = state.expire_leases(now);
            n.extend(state.liveness_sweep(now));
            for lease_id in shared.revocations.lock().drain(..) {
                match state.revoke_lease(lease_id) {
                    Ok(more) => n.extend(more),
                    Err(e) => log::debug!("revocation of lease {lease_id}: {e}"),
                }
            }
            n
        };
        deliver(shared, &notices);

        let next = shared.state.lock().next_deadline_ms();
        let mut wait = next.map_or(1000, |d| d.saturating_sub(unix_time_ms())).clamp(1, 1000);
        if shared.verifying.load(Ordering::Acquire) > 0 {
            wait = wait.min(5);
        }
        events.clear();
        match cq.poll_into(PollMode::Blocking(Duration::from_millis(wait)), &mut events) {
            Ok(_) => {}
            Err(_) => return,
        }
        for ev in events.drain(..) {
            match (ev.kind, ev.status) {
                (CompletionKind::Recv, CompletionStatus::Disconnected) => {
                    shared.endpoints.lock().remove(&ev.endpoint);
                }
                (CompletionKind::Recv, CompletionStatus::Ok) => {
                    let Some(ep) = shared.endpoints.lock().get(&ev.endpoint).cloned() else {
                        continue;
                    };
                    let payload = ev.payload.unwrap_or_default();
                    match ControlMessage::decode(&payload) {
                        Ok(msg) => handle(shared, &ep, msg),
                        Err(e) => {
                            log::warn!("bad control frame from endpoint {}: {e}", ev.endpoint);
                            reply(shared, &ep, &ControlMessage::error(ErrorCode::BadRequest, e.to_string()));
                        }
                    }
                }
                _ => {}
            }
        }
    }
}

fn count_sent(shared: &Shared, msg: &ControlMessage) {
    *shared.stats.lock().sent.entry(message_name(msg)).or_default() += 1;
}

fn reply(shared: &Shared, ep: &Endpoint, msg: &ControlMessage) {
    count_sent(shared, msg);
    if let Err(e) = ep.send(&msg.encode()) {
        log::debug!("manager reply to endpoint {} failed: {e}", ep.id());
    }
}

fn error_reply(shared: &Shared, ep: &Endpoint, e: &ManagerError) {
    reply(shared, ep, &ControlMessage::error(e.code(), e.to_string()));
}

fn send_to(shared: &Shared, to: Recipient, msg: &ControlMessage) -> bool {
    let ep_id = match to {
        Recipient::Executor(id) => shared.executor_eps.lock().get(&id).copied(),
        Recipient::Client(id) => shared.client_eps.lock().get(&id).copied(),
    };
    let ep = ep_id.and_then(|id| shared.endpoints.lock().get(&id).cloned());
    match ep {
        Some(ep) => {
            count_sent(shared, msg);
            ep.send(&msg.encode()).is_ok()
        }
        None => false,
    }
}

fn deliver(shared: &Shared, notices: &[Notice]) {
    for n in notices {
        let msg = ControlMessage::LeaseTerminated {
            lease_id: n.lease_id,
            reason: n.reason,
        };
        if !send_to(shared, n.to, &msg) {
            log::debug!("termination notice for lease {} to {:?} not delivered", n.lease_id, n.to);
        }
    }
}

fn handle(shared: &Arc<Shared>, ep: &Endpoint, msg: ControlMessage) {
    *shared.stats.lock().received.entry(message_name(&msg)).or_default() += 1;
    let now = unix_time_ms();
    match msg {
        ControlMessage::RegisterExecutor(desc) => {
            let result = shared.state.lock().register_executor(now, desc);
            match result {
                Ok(executor_id) => {
                    shared.executor_eps.lock().insert(executor_id, ep.id());
                    reply(shared, ep, &ControlMessage::ExecutorRegistered { executor_id });
                }
                Err(e) => error_reply(shared, ep, &e),
            }
        }
        ControlMessage::DeregisterExecutor { executor_id } => {
            let result = shared.state.lock().deregister_executor(executor_id);
            match result {
                Ok(notices) => {
                    deliver(shared, &notices);
                    shared.executor_eps.lock().remove(&executor_id);
                }
                Err(e) => error_reply(shared, ep, &e),
            }
        }
        ControlMessage::Heartbeat {
            executor_id,
            free_cores,
            free_memory_mb,
        } => {
            if let Err(e) = shared.state.lock().heartbeat(now, executor_id, free_cores, free_memory_mb) {
                error_reply(shared, ep, &e);
            }
        }
        ControlMessage::RequestLease { client_id, request } => {
            shared.client_eps.lock().insert(client_id, ep.id());
            let verifier = shared.verifier.clone();
            if !verifier.optimistic() && !verifier.verify(client_id, &request.token) {
                error_reply(shared, ep, &ManagerError::AuthRejected);
                return;
            }
            let granted = {
                let mut state = shared.state.lock();
                state.request_lease(now, client_id, &request).map(|grant| {
                    let slots = state.billing_slots(client_id).expect("opened by grant");
                    (grant, slots)
                })
            };
            let (grant, billing) = match granted {
                Ok(g) => g,
                Err(e) => return error_reply(shared, ep, &e),
            };
            let assigned = ControlMessage::LeaseAssigned {
                lease_id: grant.lease_id,
                client_id,
                cores: request.cores,
                memory_mb: request.memory_mb,
                expiry_ms: grant.expiry_ms,
                billing,
            };
            if !send_to(shared, Recipient::Executor(grant.executor_id), &assigned) {
                log::warn!("executor {} unreachable for lease {}", grant.executor_id, grant.lease_id);
            }
            let lease_id = grant.lease_id;
            reply(shared, ep, &ControlMessage::LeaseGranted(grant));
            if verifier.optimistic() {
                shared.verifying.fetch_add(1, Ordering::AcqRel);
                let bg = shared.clone();
                let token = request.token;
                std::thread::spawn(move || {
                    if !bg.verifier.verify(client_id, &token) {
                        bg.revocations.lock().push(lease_id);
                    }
                    bg.verifying.fetch_sub(1, Ordering::AcqRel);
                });
            }
        }
        ControlMessage::ReleaseLease { lease_id } => {
            let result = shared.state.lock().release_lease(lease_id);
            match result {
                Ok(notices) => {
                    deliver(shared, &notices);
                    reply(shared, ep, &ControlMessage::LeaseReleased { lease_id });
                }
                Err(e) => error_reply(shared, ep, &e),
            }
        }
        ControlMessage::LeaseTerminated { lease_id, reason } => {
            let result = shared.state.lock().lease_ended_by_executor(lease_id, reason);
            match result {
                Ok(notices) => deliver(shared, &notices),
                Err(e) => log::debug!("executor ended lease {lease_id}: {e}"),
            }
        }
        ControlMessage::BillingQuery { client_id } => {
            let state = shared.state.lock();
            match state.usage(client_id) {
                Ok(u) => {
                    let report = ControlMessage::BillingReport {
                        client_id,
                        t_a_milli_gbs: u.t_a_milli_gbs,
                        t_c_ms: u.t_c_ms,
                        t_h_ms: u.t_h_ms,
                        cost_femto: u.cost_femto(&state.ledger().rates()),
                    };
                    drop(state);
                    reply(shared, ep, &report);
                }
                Err(e) => {
                    drop(state);
                    error_reply(shared, ep, &e);
                }
            }
        }
        other => {
            log::warn!("manager ignores {}", message_name(&other));
            reply(shared, ep, &ControlMessage::error(ErrorCode::BadRequest, "unexpected message"));
        }
    }
}
