//! Spot executor: registers with the manager, accepts sandbox allocations
//! for leases placed on it, runs hot/warm workers and flushes usage into the
//! manager's billing ledger.

mod accounting;
mod sandbox;
mod worker;

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::Mutex;

pub use accounting::{milli_gb_seconds, LeaseAccount};
pub use sandbox::{read_frame, run_child, write_frame, SandboxKind, SandboxPlan};
pub use worker::{pin_current_thread, CoreTable, Placement, WorkerStats, WorkerStatsSnapshot};

use sandbox::Sandbox;
use crate::protocol::{ControlMessage, ErrorCode, ExecutorDescriptor, TerminationReason};
use crate::transport::{
    BackendKind, CompletionKind, CompletionQueue, CompletionStatus, Endpoint, EndpointId, Fabric, MemoryDomain,
    PollMode, RemoteBufferRef, TransportError,
};
use crate::unix_time_ms;

pub const DEFAULT_HOT_TIMEOUT_MS: u64 = 100;
pub const DEFAULT_IDLE_TIMEOUT_S: u64 = 30;
/// `AllocateSandbox.hot_timeout_ms` value asking for the executor default.
pub const HOT_TIMEOUT_DEFAULT: u32 = u32::MAX;

const LOOP_WAIT: Duration = Duration::from_millis(20);
const DEFER_LIMIT: Duration = Duration::from_secs(2);
const REGISTER_TIMEOUT: Duration = Duration::from_secs(5);
const DRAIN_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, thiserror::Error)]
pub enum ExecutorError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("registration refused: {0}")]
    Refused(String),
    #[error("invalid configuration: {0}")]
    Config(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct ExecutorConfig {
    pub manager: String,
    pub listen: String,
    pub cores: u32,
    pub memory_mb: u32,
    pub hot_timeout: Duration,
    pub idle_timeout: Duration,
    pub sandbox: SandboxKind,
    pub heartbeat_interval: Duration,
    pub flush_interval: Duration,
    pub pin: bool,
}

impl ExecutorConfig {
    pub fn new(manager: impl Into<String>, cores: u32, memory_mb: u32) -> Self {
        Self {
            manager: manager.into(),
            listen: String::new(),
            cores,
            memory_mb,
            hot_timeout: Duration::from_millis(DEFAULT_HOT_TIMEOUT_MS),
            idle_timeout: Duration::from_secs(DEFAULT_IDLE_TIMEOUT_S),
            sandbox: SandboxKind::Inline,
            heartbeat_interval: Duration::from_millis(crate::manager::DEFAULT_HEARTBEAT_MS),
            flush_interval: Duration::from_secs(1),
            pin: true,
        }
    }
}

struct LeaseEntry {
    client_id: u64,
    cores: u32,
    memory_mb: u32,
    expiry_ms: u64,
    account: LeaseAccount,
    sandbox: Option<Sandbox>,
    placements: Vec<Placement>,
}

struct Draining {
    lease_id: u64,
    sandbox: Sandbox,
    account: LeaseAccount,
    since: Instant,
}

struct Deferred {
    endpoint: EndpointId,
    message: ControlMessage,
    received: Instant,
}

#[derive(Default)]
struct AllocState {
    leases: HashMap<u64, LeaseEntry>,
    draining: Vec<Draining>,
    deferred: Vec<Deferred>,
    core_load: Vec<u32>,
    next_tag: u32,
}

impl AllocState {
    fn place(&mut self, n: u32) -> Vec<Placement> {
        (0..n)
            .map(|_| {
                let core = (0..self.core_load.len())
                    .min_by_key(|&c| (self.core_load[c], c))
                    .expect("at least one core");
                self.core_load[core] += 1;
                self.next_tag = self.next_tag.wrapping_add(1).max(1);
                Placement {
                    core: core as u32,
                    tag: self.next_tag,
                }
            })
            .collect()
    }

    fn unplace(&mut self, placements: &[Placement]) {
        for p in placements {
            let load = &mut self.core_load[p.core as usize];
            *load = load.saturating_sub(1);
        }
    }
}

struct Shared {
    config: ExecutorConfig,
    fabric: Fabric,
    executor_id: u64,
    manager: Endpoint,
    endpoints: Mutex<HashMap<EndpointId, Endpoint>>,
    state: Mutex<AllocState>,
    cores: Arc<CoreTable>,
    stop: AtomicBool,
    flushes: AtomicU64,
}

/// A running executor daemon.
pub struct ExecutorService {
    address: String,
    shared: Arc<Shared>,
    cq: CompletionQueue,
    threads: Vec<JoinHandle<()>>,
    stopped: bool,
}

impl std::fmt::Debug for ExecutorService {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExecutorService")
            .field("address", &self.address)
            .field("executor_id", &self.shared.executor_id)
            .finish()
    }
}

impl ExecutorService {
    pub fn start(fabric: &Fabric, config: ExecutorConfig) -> Result<Self, ExecutorError> {
        if config.cores == 0 || config.memory_mb == 0 {
            return Err(ExecutorError::Config("cores and memory must be positive"));
        }
        if matches!(config.sandbox, SandboxKind::Process { .. }) && fabric.kind() != BackendKind::Tcp {
            return Err(ExecutorError::Config("process sandboxes need the tcp backend"));
        }
        let domain = MemoryDomain::new();
        let cq = CompletionQueue::new();
        let listen_addr = if config.listen.is_empty() {
            fabric.any_address().to_string()
        } else {
            config.listen.clone()
        };
        let listener = fabric.listen(&listen_addr, &domain, &cq)?;
        let address = listener.local_addr();
        let manager = fabric.connect(&config.manager, &domain, &cq)?;
        let desc = ExecutorDescriptor::new(address.clone(), config.cores, config.memory_mb);
        manager.send(&ControlMessage::RegisterExecutor(desc).encode())?;
        let executor_id = await_registration(&cq, &manager)?;
        let cores = Arc::new(CoreTable::create(config.cores as usize)?);
        let state = AllocState {
            core_load: vec![0; config.cores as usize],
            ..AllocState::default()
        };
        let shared = Arc::new(Shared {
            config,
            fabric: fabric.clone(),
            executor_id,
            manager,
            endpoints: Mutex::new(HashMap::new()),
            state: Mutex::new(state),
            cores,
            stop: AtomicBool::new(false),
            flushes: AtomicU64::new(0),
        });

        let accept_shared = shared.clone();
        let acceptor = std::thread::Builder::new()
            .name("executor-accept".into())
            .spawn(move || {
                while !accept_shared.stop.load(Ordering::Acquire) {
                    let r = listener.accept_then(Some(Duration::from_millis(50)), |ep| {
                        accept_shared.endpoints.lock().insert(ep.id(), ep.clone());
                    });
                    match r {
                        Ok(_) | Err(TransportError::Timeout) => {}
                        Err(e) => log::debug!("executor accept: {e}"),
                    }
                }
            })
            .expect("spawn accept thread");

        let hb_shared = shared.clone();
        let heartbeat = std::thread::Builder::new()
            .name("executor-heartbeat".into())
            .spawn(move || heartbeat_loop(&hb_shared))
            .expect("spawn heartbeat thread");

        let loop_shared = shared.clone();
        let loop_cq = cq.clone();
        let allocator = std::thread::Builder::new()
            .name("executor-allocator".into())
            .spawn(move || allocator_loop(&loop_shared, &loop_cq))
            .expect("spawn allocator");

        log::info!("executor {executor_id} listening on {address}");
        Ok(Self {
            address,
            shared,
            cq,
            threads: vec![acceptor, heartbeat, allocator],
            stopped: false,
        })
    }

    pub fn address(&self) -> &str {
        &self.address
    }

    pub fn executor_id(&self) -> u64 {
        self.shared.executor_id
    }

    pub fn lease_ids(&self) -> Vec<u64> {
        let mut ids: Vec<u64> = self.shared.state.lock().leases.keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    pub fn has_sandbox(&self, lease_id: u64) -> bool {
        self.shared
            .state
            .lock()
            .leases
            .get(&lease_id)
            .is_some_and(|l| l.sandbox.is_some())
    }

    pub fn worker_stats(&self, lease_id: u64) -> Option<Vec<WorkerStatsSnapshot>> {
        let state = self.shared.state.lock();
        state.leases.get(&lease_id)?.sandbox.as_ref()?.worker_stats()
    }

    pub fn sandbox_pid(&self, lease_id: u64) -> Option<u32> {
        let state = self.shared.state.lock();
        state.leases.get(&lease_id)?.sandbox.as_ref()?.pid()
    }

    /// Local totals `[t_a, t_c, t_h]` and how much of them reached the ledger.
    pub fn account(&self, lease_id: u64) -> Option<([u64; 3], [u64; 3])> {
        let state = self.shared.state.lock();
        let acc = &state.leases.get(&lease_id)?.account;
        Some((acc.totals(), acc.flushed()))
    }

    /// Number of completed flush rounds.
    pub fn flushes(&self) -> u64 {
        self.shared.flushes.load(Ordering::Relaxed)
    }

    pub fn core_holder(&self, core: u32) -> u32 {
        self.shared.cores.holder(core)
    }

    /// Orderly exit: drain sandboxes, flush usage, deregister.
    pub fn shutdown(mut self) {
        self.stop(true);
    }

    /// Abrupt exit with no final flush and no deregistration; the manager
    /// only learns of it through missed heartbeats.
    pub fn kill(mut self) {
        self.stop(false);
    }

    fn stop(&mut self, orderly: bool) {
        if self.stopped {
            return;
        }
        self.stopped = true;
        self.shared.stop.store(true, Ordering::Release);
        self.cq.close();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        let shared = &self.shared;
        let mut state = shared.state.lock();
        let ids: Vec<u64> = state.leases.keys().copied().collect();
        for id in ids {
            retire(&mut state, &shared.cores, id);
        }
        if orderly {
            let deadline = Instant::now() + DRAIN_TIMEOUT;
            while !state.draining.iter_mut().all(|d| d.sandbox.is_finished()) && Instant::now() < deadline {
                std::thread::sleep(Duration::from_millis(5));
            }
            for d in &mut state.draining {
                d.account.stop(Instant::now());
                let (busy, hot) = d.sandbox.usage();
                d.account.observe(busy, hot);
                flush_account(&shared.manager, &mut d.account);
            }
            let _ = shared.manager.send(
                &ControlMessage::DeregisterExecutor {
                    executor_id: shared.executor_id,
                }
                .encode(),
            );
        } else {
            state.draining.iter_mut().for_each(|d| d.sandbox.kill());
        }
        state.draining.clear();
        drop(state);
        for (_, ep) in shared.endpoints.lock().drain() {
            ep.disconnect();
        }
        shared.manager.disconnect();
    }
}

impl Drop for ExecutorService {
    fn drop(&mut self) {
        self.stop(true);
    }
}

fn await_registration(cq: &CompletionQueue, manager: &Endpoint) -> Result<u64, ExecutorError> {
    let deadline = Instant::now() + REGISTER_TIMEOUT;
    let mut events = Vec::new();
    while Instant::now() < deadline {
        events.clear();
        cq.poll_into(PollMode::Blocking(Duration::from_millis(50)), &mut events)?;
        for ev in events.drain(..) {
            if ev.endpoint != manager.id() || ev.kind != CompletionKind::Recv {
                continue;
            }
            if ev.status != CompletionStatus::Ok {
                return Err(TransportError::Disconnected.into());
            }
            match ControlMessage::decode(&ev.payload.unwrap_or_default()) {
                Ok(ControlMessage::ExecutorRegistered { executor_id }) => return Ok(executor_id),
                Ok(ControlMessage::Error { message, .. }) => return Err(ExecutorError::Refused(message)),
                Ok(other) => log::debug!("executor ignores {other:?} before registration"),
                Err(e) => log::warn!("bad frame from manager: {e}"),
            }
        }
    }
    Err(TransportError::Timeout.into())
}

fn heartbeat_loop(shared: &Shared) {
    let mut next = Instant::now();
    while !shared.stop.load(Ordering::Acquire) {
        if Instant::now() >= next {
            let (used_cores, used_mem) = {
                let state = shared.state.lock();
                state
                    .leases
                    .values()
                    .fold((0u32, 0u32), |(c, m), l| (c.saturating_add(l.cores), m.saturating_add(l.memory_mb)))
            };
            let hb = ControlMessage::Heartbeat {
                executor_id: shared.executor_id,
                free_cores: shared.config.cores.saturating_sub(used_cores),
                free_memory_mb: shared.config.memory_mb.saturating_sub(used_mem),
            };
            if let Err(e) = shared.manager.send(&hb.encode()) {
                log::debug!("heartbeat failed: {e}");
            }
            next += shared.config.heartbeat_interval;
        }
        std::thread::sleep(Duration::from_millis(10).min(shared.config.heartbeat_interval));
    }
}

fn reply(ep: &Endpoint, msg: &ControlMessage) {
    if let Err(e) = ep.send(&msg.encode()) {
        log::debug!("executor reply failed: {e}");
    }
}

fn flush_account(manager: &Endpoint, account: &mut LeaseAccount) -> bool {
    match account.flush_with(|slot: RemoteBufferRef, delta| manager.fetch_and_add(slot, delta)) {
        Ok(()) => true,
        Err(e) => {
            log::debug!("usage flush deferred: {e}");
            false
        }
    }
}

/// Moves a lease's sandbox into the draining list and frees its cores.
fn retire(state: &mut AllocState, cores: &CoreTable, lease_id: u64) -> bool {
    let Some(mut entry) = state.leases.remove(&lease_id) else {
        return false;
    };
    state.unplace(&entry.placements);
    for p in &entry.placements {
        cores.release(p.core, p.tag);
    }
    if let Some(mut sandbox) = entry.sandbox.take() {
        sandbox.begin_stop();
        state.draining.push(Draining {
            lease_id,
            sandbox,
            account: entry.account,
            since: Instant::now(),
        });
    }
    true
}

fn allocator_loop(shared: &Arc<Shared>, cq: &CompletionQueue) {
    let mut events = Vec::new();
    let mut last_flush = Instant::now();
    loop {
        if shared.stop.load(Ordering::Acquire) {
            return;
        }
        enforce_limits(shared);
        retry_deferred(shared);
        if last_flush.elapsed() >= shared.config.flush_interval {
            flush_all(shared);
            last_flush = Instant::now();
        }
        reap_draining(shared);

        events.clear();
        if cq.poll_into(PollMode::Blocking(LOOP_WAIT), &mut events).is_err() {
            return;
        }
        for ev in events.drain(..) {
            if ev.kind != CompletionKind::Recv {
                continue;
            }
            if ev.status == CompletionStatus::Disconnected {
                if ev.endpoint == shared.manager.id() {
                    log::warn!("executor {}: manager connection lost", shared.executor_id);
                } else {
                    shared.endpoints.lock().remove(&ev.endpoint);
                }
                continue;
            }
            let payload = ev.payload.unwrap_or_default();
            match ControlMessage::decode(&payload) {
                Ok(msg) => handle(shared, ev.endpoint, msg, Instant::now()),
                Err(e) => {
                    log::warn!("executor: bad control frame: {e}");
                    if let Some(ep) = endpoint(shared, ev.endpoint) {
                        reply(&ep, &ControlMessage::error(ErrorCode::BadRequest, e.to_string()));
                    }
                }
            }
        }
    }
}

fn endpoint(shared: &Shared, id: EndpointId) -> Option<Endpoint> {
    if id == shared.manager.id() {
        return Some(shared.manager.clone());
    }
    shared.endpoints.lock().get(&id).cloned()
}

fn handle(shared: &Arc<Shared>, from: EndpointId, msg: ControlMessage, received: Instant) {
    match msg {
        ControlMessage::LeaseAssigned {
            lease_id,
            client_id,
            cores,
            memory_mb,
            expiry_ms,
            billing,
        } => {
            let mut state = shared.state.lock();
            state.leases.entry(lease_id).or_insert_with(|| LeaseEntry {
                client_id,
                cores,
                memory_mb,
                expiry_ms,
                account: LeaseAccount::new(memory_mb, billing),
                sandbox: None,
                placements: Vec::new(),
            });
        }
        ControlMessage::LeaseTerminated { lease_id, reason } => {
            log::debug!("lease {lease_id} terminated by manager: {reason:?}");
            let mut state = shared.state.lock();
            retire(&mut state, &shared.cores, lease_id);
            state.deferred.retain(|d| !matches!(d.message, ControlMessage::AllocateSandbox { lease_id: l, .. } if l == lease_id));
        }
        msg @ ControlMessage::AllocateSandbox { .. } => allocate(shared, from, msg, received),
        ControlMessage::Error { code, message } => log::warn!("executor got error {code:?}: {message}"),
        other => {
            if let Some(ep) = endpoint(shared, from) {
                reply(&ep, &ControlMessage::error(ErrorCode::BadRequest, "unexpected message"));
            }
            log::debug!("executor ignores {other:?}");
        }
    }
}

fn allocate(shared: &Arc<Shared>, from: EndpointId, msg: ControlMessage, received: Instant) {
    let ControlMessage::AllocateSandbox {
        lease_id,
        client_id,
        hot_timeout_ms,
        buffer_bytes,
        code,
    } = msg
    else {
        return;
    };
    let Some(ep) = endpoint(shared, from) else {
        return;
    };
    let fail = |code: ErrorCode, text: String| reply(&ep, &ControlMessage::error(code, text));

    let mut state = shared.state.lock();
    let Some(entry) = state.leases.get(&lease_id) else {
        if received.elapsed() < DEFER_LIMIT {
            state.deferred.push(Deferred {
                endpoint: from,
                message: ControlMessage::AllocateSandbox {
                    lease_id,
                    client_id,
                    hot_timeout_ms,
                    buffer_bytes,
                    code,
                },
                received,
            });
        } else {
            drop(state);
            fail(ErrorCode::UnknownLease, format!("lease {lease_id} not assigned here"));
        }
        return;
    };
    if entry.client_id != client_id {
        drop(state);
        return fail(ErrorCode::AuthRejected, format!("lease {lease_id} belongs to another client"));
    }
    if unix_time_ms() >= entry.expiry_ms {
        drop(state);
        return fail(ErrorCode::LeaseExpired, format!("lease {lease_id} expired"));
    }
    if entry.sandbox.is_some() {
        drop(state);
        return fail(ErrorCode::BadRequest, format!("lease {lease_id} already has a sandbox"));
    }
    if buffer_bytes == 0 {
        drop(state);
        return fail(ErrorCode::BadRequest, "buffer_bytes must be positive".into());
    }
    if let Err(e) = code.validate() {
        drop(state);
        return fail(ErrorCode::BadRequest, e.to_string());
    }
    let cores = entry.cores;
    let placements = state.place(cores);
    let hot_timeout = if hot_timeout_ms == HOT_TIMEOUT_DEFAULT {
        shared.config.hot_timeout
    } else {
        Duration::from_millis(hot_timeout_ms as u64)
    };
    let plan = SandboxPlan {
        lease_id,
        hot_timeout,
        buffer_bytes,
        code,
        placements: placements.clone(),
        pin: shared.config.pin,
    };
    let allocate_us = received.elapsed().as_micros() as u64;
    match Sandbox::spawn(&shared.config.sandbox, &shared.fabric, &plan, &shared.cores) {
        Ok(spawned) => {
            let entry = state.leases.get_mut(&lease_id).expect("checked above");
            entry.sandbox = Some(spawned.sandbox);
            entry.placements = placements;
            entry.account.start(Instant::now());
            drop(state);
            let mut timings = spawned.timings;
            timings.allocate_us = allocate_us;
            reply(
                &ep,
                &ControlMessage::SandboxReady {
                    lease_id,
                    workers: spawned.workers,
                    timings,
                },
            );
        }
        Err(e) => {
            log::warn!("sandbox for lease {lease_id} failed: {e}");
            state.unplace(&placements);
            state.leases.remove(&lease_id);
            drop(state);
            fail(ErrorCode::SpawnFailed, e);
            let _ = shared.manager.send(
                &ControlMessage::LeaseTerminated {
                    lease_id,
                    reason: TerminationReason::Evicted,
                }
                .encode(),
            );
        }
    }
}

fn retry_deferred(shared: &Arc<Shared>) {
    let ready: Vec<Deferred> = {
        let mut state = shared.state.lock();
        if state.deferred.is_empty() {
            return;
        }
        let (ready, waiting): (Vec<_>, Vec<_>) = std::mem::take(&mut state.deferred).into_iter().partition(|d| {
            let known = matches!(&d.message, ControlMessage::AllocateSandbox { lease_id, .. } if state.leases.contains_key(lease_id));
            known || d.received.elapsed() >= DEFER_LIMIT
        });
        state.deferred = waiting;
        ready
    };
    for d in ready {
        allocate(shared, d.endpoint, d.message, d.received);
    }
}

fn enforce_limits(shared: &Shared) {
    let now_ms = unix_time_ms();
    let idle_ms = shared.config.idle_timeout.as_millis() as u64;
    let mut ended = Vec::new();
    {
        let mut state = shared.state.lock();
        let doomed: Vec<(u64, TerminationReason)> = state
            .leases
            .iter()
            .filter_map(|(&id, l)| {
                if now_ms >= l.expiry_ms {
                    Some((id, TerminationReason::Expired))
                } else {
                    let idle = l.sandbox.as_ref()?.last_activity_ms();
                    (now_ms.saturating_sub(idle) >= idle_ms).then_some((id, TerminationReason::IdleTimeout))
                }
            })
            .collect();
        for (id, reason) in doomed {
            retire(&mut state, &shared.cores, id);
            ended.push((id, reason));
        }
    }
    for (lease_id, reason) in ended {
        log::debug!("lease {lease_id} ended locally: {reason:?}");
        let _ = shared
            .manager
            .send(&ControlMessage::LeaseTerminated { lease_id, reason }.encode());
    }
}

fn flush_all(shared: &Shared) {
    let now = Instant::now();
    let mut state = shared.state.lock();
    let state = &mut *state;
    for l in state.leases.values_mut() {
        let Some(sandbox) = &l.sandbox else { continue };
        l.account.tick(now);
        let (busy, hot) = sandbox.usage();
        l.account.observe(busy, hot);
        flush_account(&shared.manager, &mut l.account);
    }
    for d in &mut state.draining {
        d.account.tick(now);
        let (busy, hot) = d.sandbox.usage();
        d.account.observe(busy, hot);
        flush_account(&shared.manager, &mut d.account);
    }
    shared.flushes.fetch_add(1, Ordering::Relaxed);
}

fn reap_draining(shared: &Shared) {
    let mut state = shared.state.lock();
    let mut i = 0;
    while i < state.draining.len() {
        let d = &mut state.draining[i];
        let timed_out = d.since.elapsed() >= DRAIN_TIMEOUT;
        if d.sandbox.is_finished() || timed_out {
            if timed_out {
                log::warn!("lease {}: sandbox did not stop, killing it", d.lease_id);
                d.sandbox.kill();
            }
            let mut d = state.draining.swap_remove(i);
            d.account.stop(Instant::now());
            let (busy, hot) = d.sandbox.usage();
            d.account.observe(busy, hot);
            if !flush_account(&shared.manager, &mut d.account) {
                log::warn!("lease {}: final usage flush failed", d.lease_id);
            }
        } else {
            i += 1;
        }
    }
}
