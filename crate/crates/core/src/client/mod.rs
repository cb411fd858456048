//! Client SDK: lease acquisition, sandbox setup, header-prefixed buffers,
//! invocation futures and failover.
//!
//! ```no_run
//! use spotlease::client::{Invoker, InvokerConfig, ModeHint, WaitMode};
//! use spotlease::protocol::CodeSubmission;
//! use spotlease::Fabric;
//!
//! let invoker = Invoker::new(Fabric::tcp(), InvokerConfig::new("127.0.0.1:7000")).unwrap();
//! invoker
//!     .allocate(&CodeSubmission::builtin("demo", &["echo"]), 1 << 20, ModeHint::WarmOk, 1)
//!     .unwrap();
//! let input = invoker.input(1024).unwrap();
//! let output = invoker.output(1024).unwrap();
//! let n = input.fill(b"hello");
//! let fut = invoker.submit("echo", &input, n, &output).unwrap();
//! assert_eq!(fut.get(WaitMode::Blocking).unwrap(), 5);
//! invoker.deallocate();
//! ```

mod buffers;
mod future;

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex, RwLock};

pub use buffers::{InputBuffer, OutputBuffer};
pub use future::{InvocationFuture, WaitMode};

use future::Slot;
use crate::executor::HOT_TIMEOUT_DEFAULT;
use crate::protocol::{
    AllocationRequest, CodeSubmission, ControlMessage, ErrorCode, InvocationHeader, InvocationImmediate, LeaseGrant,
    ResultImmediate, ResultStatus, WorkerInfo, INVOCATION_HEADER_LEN,
};
use crate::transport::{
    CompletionEvent, CompletionKind, CompletionQueue, CompletionStatus, Endpoint, EndpointId, Fabric, MemoryDomain,
    PollMode, TransportError,
};
use crate::unix_time_ms;

/// Ids are 16 bits wide; one value is kept free so ids stay unambiguous.
pub const MAX_PENDING: usize = (1 << 16) - 1;

const INBOX_LIMIT: usize = 1024;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum InvocationError {
    #[error("rejected by an oversubscribed executor")]
    Rejected,
    #[error("function failed")]
    FunctionError,
    #[error("unknown function")]
    UnknownFunction,
    #[error("result does not fit the output buffer")]
    OutputOverflow,
    #[error("worker answered with status {0}")]
    Status(u16),
    #[error("worker disconnected")]
    Disconnected,
    #[error("cancelled")]
    Cancelled,
    #[error("no live worker; allocate again")]
    NoWorkers,
    #[error("too many pending invocations")]
    TooManyPending,
    #[error("input of {len} bytes exceeds capacity {capacity}")]
    InputTooLarge { len: usize, capacity: usize },
    #[error("unknown function name {0:?}")]
    UnknownName(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("gave up after {n} attempts: {0:?}", n = .0.len())]
    Exhausted(Vec<InvocationError>),
}

impl InvocationError {
    fn from_status(status: ResultStatus) -> Self {
        match status {
            ResultStatus::Rejected => Self::Rejected,
            ResultStatus::FunctionError => Self::FunctionError,
            ResultStatus::UnknownFunction => Self::UnknownFunction,
            ResultStatus::OutputOverflow => Self::OutputOverflow,
            other => Self::Status(other.code()),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("manager refused: {code:?}: {message}")]
    Manager { code: ErrorCode, message: String },
    #[error("executor refused: {code:?}: {message}")]
    Executor { code: ErrorCode, message: String },
    #[error("no reply while waiting for {0}")]
    Timeout(&'static str),
    #[error("unexpected reply {0}")]
    Unexpected(String),
    #[error("invalid buffer: {0}")]
    InvalidBuffer(&'static str),
    #[error("invalid request: {0}")]
    Invalid(&'static str),
}

impl ClientError {
    pub fn code(&self) -> Option<ErrorCode> {
        match self {
            Self::Manager { code, .. } | Self::Executor { code, .. } => Some(*code),
            _ => None,
        }
    }
}

/// How workers should wait for requests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeHint {
    /// Busy-poll for the whole lease.
    AlwaysHot,
    /// Executor default: hot after each invocation, warm after its timeout.
    WarmOk,
    /// Never poll; every invocation is warm.
    AlwaysWarm,
}

impl ModeHint {
    pub fn hot_timeout_ms(self) -> u32 {
        match self {
            Self::AlwaysHot => u32::MAX - 1,
            Self::WarmOk => HOT_TIMEOUT_DEFAULT,
            Self::AlwaysWarm => 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct InvokerConfig {
    pub manager: String,
    pub client_id: u64,
    pub retry_limit: u32,
    pub lease_timeout_s: u32,
    pub memory_mb: u32,
    pub token: Vec<u8>,
    /// Run a completion thread; otherwise callers drive [`Invoker::progress`].
    pub background_progress: bool,
    pub control_timeout: Duration,
    /// How long `submit` waits for an idle worker.
    pub submit_timeout: Duration,
}

impl InvokerConfig {
    pub fn new(manager: impl Into<String>) -> Self {
        static SEQ: AtomicU64 = AtomicU64::new(0);
        let nanos = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_nanos() as u64);
        let client_id = nanos ^ ((std::process::id() as u64) << 40) ^ SEQ.fetch_add(1, Ordering::Relaxed).rotate_left(20);
        Self {
            manager: manager.into(),
            client_id: client_id.max(1),
            retry_limit: 3,
            lease_timeout_s: 600,
            memory_mb: 1024,
            token: Vec::new(),
            background_progress: true,
            control_timeout: Duration::from_secs(30),
            submit_timeout: Duration::from_secs(30),
        }
    }
}

/// Client-side cold-start breakdown of one `allocate` call, in microseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ColdBreakdown {
    pub connect_us: u64,
    pub lease_us: u64,
    pub allocate_us: u64,
    pub submit_code_us: u64,
    pub spawn_workers_us: u64,
    pub total_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocationReport {
    pub leases: Vec<LeaseGrant>,
    pub workers: usize,
    pub cold: ColdBreakdown,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerView {
    pub index: usize,
    pub lease_id: u64,
    pub executor_id: u64,
    pub worker_id: u32,
    pub address: String,
    pub healthy: bool,
}

pub enum Function<'a> {
    Index(u16),
    Name(&'a str),
}

impl From<u16> for Function<'_> {
    fn from(i: u16) -> Self {
        Self::Index(i)
    }
}

impl<'a> From<&'a str> for Function<'a> {
    fn from(n: &'a str) -> Self {
        Self::Name(n)
    }
}

struct WorkerConn {
    lease_id: u64,
    executor_id: u64,
    info: WorkerInfo,
    ep: Endpoint,
    expiry_ms: u64,
    busy: AtomicBool,
    healthy: AtomicBool,
}

impl WorkerConn {
    fn usable(&self, now_ms: u64) -> bool {
        self.healthy.load(Ordering::Acquire) && now_ms < self.expiry_ms
    }
}

struct PendingEntry {
    slot: Arc<Slot>,
    endpoint: EndpointId,
    worker: usize,
}

#[derive(Default)]
struct PendingTable {
    entries: HashMap<u16, PendingEntry>,
    next: u16,
}

struct Inbox {
    messages: VecDeque<(EndpointId, Option<ControlMessage>)>,
}

struct LastAllocation {
    code: CodeSubmission,
    buffer_bytes: usize,
    mode: ModeHint,
}

pub(crate) struct Inner {
    fabric: Fabric,
    config: InvokerConfig,
    domain: MemoryDomain,
    data_cq: CompletionQueue,
    ctl_cq: CompletionQueue,
    manager: Mutex<Option<Endpoint>>,
    executors: Mutex<HashMap<String, Endpoint>>,
    control: Mutex<()>,
    inbox: Mutex<Inbox>,
    inbox_ready: Condvar,
    workers: RwLock<Vec<Arc<WorkerConn>>>,
    leases: Mutex<Vec<LeaseGrant>>,
    terminated: Mutex<Vec<u64>>,
    last_allocation: Mutex<Option<LastAllocation>>,
    pending: Mutex<PendingTable>,
    rr: AtomicUsize,
    progress_thread: AtomicBool,
    stop: AtomicBool,
}

impl Inner {
    pub(crate) fn has_progress_thread(&self) -> bool {
        self.progress_thread.load(Ordering::Acquire)
    }

    /// Drains completions and control traffic; returns the number of data
    /// events handled.
    pub(crate) fn progress(&self, mode: PollMode) -> usize {
        let mut events = Vec::new();
        if self.data_cq.poll_into(mode, &mut events).is_err() {
            return 0;
        }
        let n = events.len();
        for ev in events {
            self.dispatch(ev);
        }
        if !self.ctl_cq.is_empty() {
            self.pump_control(PollMode::Busy);
        }
        n
    }

    fn dispatch(&self, ev: CompletionEvent) {
        match (ev.kind, ev.status) {
            (CompletionKind::WriteReceived, CompletionStatus::Ok) => {
                let Some(raw) = ev.immediate else { return };
                let imm = ResultImmediate::unpack(raw);
                let result = match imm.status {
                    ResultStatus::Ok => Ok(ev.byte_len as usize),
                    s => Err(InvocationError::from_status(s)),
                };
                self.finish(imm.invocation_id, Some(ev.endpoint), result);
            }
            (CompletionKind::WriteDone, status) if status != CompletionStatus::Ok => {
                let Some(raw) = ev.immediate else { return };
                let imm = InvocationImmediate::unpack(raw);
                let err = match status {
                    CompletionStatus::Disconnected => InvocationError::Disconnected,
                    _ => InvocationError::Transport("request write refused".into()),
                };
                self.finish(imm.invocation_id, Some(ev.endpoint), Err(err));
            }
            (CompletionKind::Recv, CompletionStatus::Disconnected) => self.endpoint_lost(ev.endpoint),
            _ => {}
        }
    }

    fn finish(&self, id: u16, endpoint: Option<EndpointId>, result: Result<usize, InvocationError>) {
        let entry = {
            let mut pending = self.pending.lock();
            match pending.entries.get(&id) {
                Some(e) if endpoint.is_none_or(|ep| ep == e.endpoint) => pending.entries.remove(&id),
                _ => None,
            }
        };
        let Some(entry) = entry else {
            log::debug!("completion for unknown invocation {id} dropped");
            return;
        };
        if let Some(w) = self.workers.read().get(entry.worker) {
            w.busy.store(false, Ordering::Release);
        }
        entry.slot.complete(result);
    }

    fn endpoint_lost(&self, endpoint: EndpointId) {
        for w in self.workers.read().iter() {
            if w.ep.id() == endpoint {
                w.healthy.store(false, Ordering::Release);
            }
        }
        let failed: Vec<PendingEntry> = {
            let mut pending = self.pending.lock();
            let ids: Vec<u16> = pending
                .entries
                .iter()
                .filter(|(_, e)| e.endpoint == endpoint)
                .map(|(&id, _)| id)
                .collect();
            ids.iter().filter_map(|id| pending.entries.remove(id)).collect()
        };
        for e in failed {
            e.slot.complete(Err(InvocationError::Disconnected));
        }
    }

    fn pump_control(&self, mode: PollMode) {
        let mut events = Vec::new();
        if self.ctl_cq.poll_into(mode, &mut events).is_err() {
            return;
        }
        let mut inbox = self.inbox.lock();
        let before = inbox.messages.len();
        for ev in events {
            if ev.kind != CompletionKind::Recv {
                continue;
            }
            if ev.status == CompletionStatus::Disconnected {
                inbox.messages.push_back((ev.endpoint, None));
                continue;
            }
            match ControlMessage::decode(&ev.payload.unwrap_or_default()) {
                Ok(ControlMessage::LeaseTerminated { lease_id, reason }) => {
                    log::debug!("lease {lease_id} terminated: {reason:?}");
                    self.terminated.lock().push(lease_id);
                    for w in self.workers.read().iter().filter(|w| w.lease_id == lease_id) {
                        w.healthy.store(false, Ordering::Release);
                    }
                }
                Ok(msg) => inbox.messages.push_back((ev.endpoint, Some(msg))),
                Err(e) => log::warn!("bad control frame: {e}"),
            }
        }
        while inbox.messages.len() > INBOX_LIMIT {
            inbox.messages.pop_front();
        }
        if inbox.messages.len() != before {
            self.inbox_ready.notify_all();
        }
    }

    fn await_reply(&self, from: &Endpoint, what: &'static str) -> Result<ControlMessage, ClientError> {
        let deadline = Instant::now() + self.config.control_timeout;
        loop {
            {
                let mut inbox = self.inbox.lock();
                if let Some(pos) = inbox.messages.iter().position(|(ep, _)| *ep == from.id()) {
                    let (_, msg) = inbox.messages.remove(pos).expect("position is valid");
                    return msg.ok_or(ClientError::Transport(TransportError::Disconnected));
                }
            }
            if Instant::now() >= deadline {
                return Err(ClientError::Timeout(what));
            }
            if self.has_progress_thread() {
                let mut inbox = self.inbox.lock();
                if !inbox.messages.iter().any(|(ep, _)| *ep == from.id()) {
                    self.inbox_ready.wait_for(&mut inbox, Duration::from_millis(10));
                }
                drop(inbox);
                self.pump_control(PollMode::Busy);
            } else {
                self.pump_control(PollMode::Blocking(Duration::from_millis(10)));
            }
        }
    }

    fn manager(&self) -> Result<(Endpoint, u64), ClientError> {
        let mut slot = self.manager.lock();
        if let Some(ep) = slot.as_ref().filter(|ep| ep.is_connected()) {
            return Ok((ep.clone(), 0));
        }
        let t = Instant::now();
        let ep = self.fabric.connect(&self.config.manager, &self.domain, &self.ctl_cq)?;
        *slot = Some(ep.clone());
        Ok((ep, t.elapsed().as_micros() as u64))
    }

    fn executor(&self, address: &str) -> Result<(Endpoint, u64), ClientError> {
        let mut map = self.executors.lock();
        if let Some(ep) = map.get(address).filter(|ep| ep.is_connected()) {
            return Ok((ep.clone(), 0));
        }
        let t = Instant::now();
        let ep = self.fabric.connect(address, &self.domain, &self.ctl_cq)?;
        map.insert(address.to_string(), ep.clone());
        Ok((ep, t.elapsed().as_micros() as u64))
    }

    fn request_lease(&self, manager: &Endpoint, cores: u32) -> Result<LeaseGrant, ClientError> {
        let request = AllocationRequest {
            cores,
            memory_mb: self.config.memory_mb,
            timeout_s: self.config.lease_timeout_s,
            token: self.config.token.clone(),
        };
        manager.send(
            &ControlMessage::RequestLease {
                client_id: self.config.client_id,
                request,
            }
            .encode(),
        )?;
        match self.await_reply(manager, "lease grant")? {
            ControlMessage::LeaseGranted(g) => Ok(g),
            ControlMessage::Error { code, message } => Err(ClientError::Manager { code, message }),
            other => Err(ClientError::Unexpected(format!("{other:?}"))),
        }
    }

    fn release_lease(&self, manager: &Endpoint, lease_id: u64) {
        if manager.send(&ControlMessage::ReleaseLease { lease_id }.encode()).is_err() {
            return;
        }
        match self.await_reply(manager, "lease release") {
            Ok(ControlMessage::LeaseReleased { .. }) => {}
            Ok(other) => log::debug!("release of lease {lease_id}: {other:?}"),
            Err(e) => log::debug!("release of lease {lease_id}: {e}"),
        }
    }

    fn pick_worker(&self, avoid: Option<usize>) -> Result<usize, InvocationError> {
        let deadline = Instant::now() + self.config.submit_timeout;
        loop {
            {
                let workers = self.workers.read();
                let now = unix_time_ms();
                let n = workers.len();
                if !workers.iter().any(|w| w.usable(now)) {
                    return Err(InvocationError::NoWorkers);
                }
                let start = self.rr.load(Ordering::Relaxed);
                let others_usable = workers.iter().enumerate().any(|(i, w)| Some(i) != avoid && w.usable(now));
                for k in 0..n {
                    let i = (start + k) % n;
                    let w = &workers[i];
                    if (others_usable && Some(i) == avoid) || !w.usable(now) {
                        continue;
                    }
                    if w.busy.compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire).is_ok() {
                        self.rr.store(i + 1, Ordering::Relaxed);
                        return Ok(i);
                    }
                }
            }
            if Instant::now() >= deadline {
                return Err(InvocationError::Transport("no idle worker".into()));
            }
            if self.progress(PollMode::Busy) == 0 {
                std::thread::yield_now();
            }
        }
    }

    fn resolve(&self, function: Function<'_>) -> Result<u16, InvocationError> {
        match function {
            Function::Index(i) => Ok(i),
            Function::Name(name) => self
                .last_allocation
                .lock()
                .as_ref()
                .and_then(|a| a.code.index_of(name))
                .ok_or_else(|| InvocationError::UnknownName(name.to_string())),
        }
    }

    fn submit_on(
        self: &Arc<Self>,
        worker: usize,
        function: u16,
        input: &InputBuffer,
        len: usize,
        output: &OutputBuffer,
    ) -> Result<InvocationFuture, InvocationError> {
        let conn = self.workers.read().get(worker).cloned().ok_or(InvocationError::NoWorkers)?;
        let release = |e| {
            conn.busy.store(false, Ordering::Release);
            Err(e)
        };
        let capacity = input.capacity().min((conn.info.request_buffer.length as usize).saturating_sub(INVOCATION_HEADER_LEN));
        if len > capacity {
            return release(InvocationError::InputTooLarge { len, capacity });
        }
        let slot = Arc::new(Slot::new(input.in_flight().clone()));
        let id = {
            let mut pending = self.pending.lock();
            if pending.entries.len() >= MAX_PENDING {
                drop(pending);
                slot.complete(Err(InvocationError::TooManyPending));
                return release(InvocationError::TooManyPending);
            }
            let mut id = pending.next;
            while pending.entries.contains_key(&id) {
                id = id.wrapping_add(1);
            }
            pending.next = id.wrapping_add(1);
            pending.entries.insert(
                id,
                PendingEntry {
                    slot: slot.clone(),
                    endpoint: conn.ep.id(),
                    worker,
                },
            );
            id
        };
        input.set_header(&InvocationHeader::from(output.remote_ref()));
        let imm = InvocationImmediate {
            invocation_id: id,
            function_index: function,
        };
        let future = InvocationFuture {
            id,
            worker,
            slot,
            inner: self.clone(),
        };
        if let Err(e) = conn.ep.write_with_imm(
            input.registered(),
            0,
            INVOCATION_HEADER_LEN + len,
            conn.info.request_buffer,
            imm.pack(),
        ) {
            let err = match e {
                TransportError::Disconnected => {
                    conn.healthy.store(false, Ordering::Release);
                    InvocationError::Disconnected
                }
                other => InvocationError::Transport(other.to_string()),
            };
            self.finish(id, None, Err(err));
        }
        Ok(future)
    }

    fn fail_all_pending(&self, err: InvocationError) {
        let drained: Vec<PendingEntry> = self.pending.lock().entries.drain().map(|(_, e)| e).collect();
        for e in drained {
            e.slot.complete(Err(err.clone()));
        }
    }
}

/// Entry point of the SDK. Owns connections, leases and the pending table.
pub struct Invoker {
    inner: Arc<Inner>,
    progress: Option<JoinHandle<()>>,
}

impl std::fmt::Debug for Invoker {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Invoker")
            .field("client_id", &self.inner.config.client_id)
            .field("workers", &self.inner.workers.read().len())
            .finish()
    }
}

impl Invoker {
    pub fn new(fabric: Fabric, config: InvokerConfig) -> Result<Self, ClientError> {
        if config.retry_limit == 0 {
            return Err(ClientError::Invalid("retry_limit must be at least 1"));
        }
        let background = config.background_progress;
        let inner = Arc::new(Inner {
            fabric,
            config,
            domain: MemoryDomain::new(),
            data_cq: CompletionQueue::new(),
            ctl_cq: CompletionQueue::new(),
            manager: Mutex::new(None),
            executors: Mutex::new(HashMap::new()),
            control: Mutex::new(()),
            inbox: Mutex::new(Inbox {
                messages: VecDeque::new(),
            }),
            inbox_ready: Condvar::new(),
            workers: RwLock::new(Vec::new()),
            leases: Mutex::new(Vec::new()),
            terminated: Mutex::new(Vec::new()),
            last_allocation: Mutex::new(None),
            pending: Mutex::new(PendingTable::default()),
            rr: AtomicUsize::new(0),
            progress_thread: AtomicBool::new(background),
            stop: AtomicBool::new(false),
        });
        let progress = background.then(|| {
            let bg = inner.clone();
            std::thread::Builder::new()
                .name("invoker-progress".into())
                .spawn(move || {
                    while !bg.stop.load(Ordering::Acquire) {
                        bg.progress(PollMode::Blocking(Duration::from_millis(20)));
                        bg.pump_control(PollMode::Busy);
                    }
                })
                .expect("spawn progress thread")
        });
        Ok(Self { inner, progress })
    }

    pub fn client_id(&self) -> u64 {
        self.inner.config.client_id
    }

    pub fn config(&self) -> &InvokerConfig {
        &self.inner.config
    }

    pub fn domain(&self) -> &MemoryDomain {
        &self.inner.domain
    }

    /// Leases `workers` cores, possibly across several executors, sets up
    /// one sandbox per lease and connects to every worker.
    ///
    /// A request the pool cannot satisfy in one piece is retried with half
    /// as many cores until the total is covered.
    pub fn allocate(
        &self,
        code: &CodeSubmission,
        buffer_bytes: usize,
        mode: ModeHint,
        workers: u32,
    ) -> Result<AllocationReport, ClientError> {
        if workers == 0 {
            return Err(ClientError::Invalid("workers must be at least 1"));
        }
        if buffer_bytes == 0 || buffer_bytes > u32::MAX as usize {
            return Err(ClientError::InvalidBuffer("buffer size out of range"));
        }
        code.validate().map_err(|_| ClientError::Invalid("bad function table"))?;
        let inner = &self.inner;
        let _serial = inner.control.lock();
        let t0 = Instant::now();
        let mut cold = ColdBreakdown::default();
        let (manager, connect_us) = inner.manager()?;
        cold.connect_us += connect_us;

        let t_lease = Instant::now();
        let mut grants: Vec<LeaseGrant> = Vec::new();
        let mut remaining = workers;
        let mut ask = workers;
        while remaining > 0 {
            match inner.request_lease(&manager, ask.min(remaining)) {
                Ok(g) => {
                    remaining = remaining.saturating_sub(g.executor_endpoints.len() as u32);
                    grants.push(g);
                }
                Err(ClientError::Manager {
                    code: ErrorCode::InsufficientResources,
                    ..
                }) if ask > 1 => ask /= 2,
                Err(e) => {
                    grants.iter().for_each(|g| inner.release_lease(&manager, g.lease_id));
                    return Err(e);
                }
            }
        }
        cold.lease_us = t_lease.elapsed().as_micros() as u64;

        let mut connected: Vec<Arc<WorkerConn>> = Vec::new();
        for grant in &grants {
            match self.setup_sandbox(grant, code, buffer_bytes, mode, &mut cold) {
                Ok(ws) => connected.extend(ws),
                Err(e) => {
                    connected.iter().for_each(|w| w.ep.disconnect());
                    grants.iter().for_each(|g| inner.release_lease(&manager, g.lease_id));
                    return Err(e);
                }
            }
        }
        let count = connected.len();
        inner.workers.write().extend(connected);
        inner.leases.lock().extend(grants.iter().cloned());
        *inner.last_allocation.lock() = Some(LastAllocation {
            code: code.clone(),
            buffer_bytes,
            mode,
        });
        cold.total_us = t0.elapsed().as_micros() as u64;
        Ok(AllocationReport {
            leases: grants,
            workers: count,
            cold,
        })
    }

    fn setup_sandbox(
        &self,
        grant: &LeaseGrant,
        code: &CodeSubmission,
        buffer_bytes: usize,
        mode: ModeHint,
        cold: &mut ColdBreakdown,
    ) -> Result<Vec<Arc<WorkerConn>>, ClientError> {
        let inner = &self.inner;
        let address = grant
            .executor_endpoints
            .first()
            .map(|s| s.address.clone())
            .ok_or(ClientError::Unexpected("grant without endpoints".into()))?;
        let (exec, connect_us) = inner.executor(&address)?;
        cold.connect_us += connect_us;
        exec.send(
            &ControlMessage::AllocateSandbox {
                lease_id: grant.lease_id,
                client_id: inner.config.client_id,
                hot_timeout_ms: mode.hot_timeout_ms(),
                buffer_bytes: buffer_bytes as u32,
                code: code.clone(),
            }
            .encode(),
        )?;
        let infos = match inner.await_reply(&exec, "sandbox")? {
            ControlMessage::SandboxReady { workers, timings, .. } => {
                cold.allocate_us += timings.allocate_us;
                cold.submit_code_us += timings.submit_code_us;
                cold.spawn_workers_us += timings.spawn_workers_us;
                workers
            }
            ControlMessage::Error { code, message } => return Err(ClientError::Executor { code, message }),
            other => return Err(ClientError::Unexpected(format!("{other:?}"))),
        };
        let t = Instant::now();
        let mut out = Vec::with_capacity(infos.len());
        for info in infos {
            let ep = match inner.fabric.connect(&info.address, &inner.domain, &inner.data_cq) {
                Ok(ep) => ep,
                Err(e) => {
                    out.iter().for_each(|w: &Arc<WorkerConn>| w.ep.disconnect());
                    return Err(e.into());
                }
            };
            out.push(Arc::new(WorkerConn {
                lease_id: grant.lease_id,
                executor_id: grant.executor_id,
                info,
                ep,
                expiry_ms: grant.expiry_ms,
                busy: AtomicBool::new(false),
                healthy: AtomicBool::new(true),
            }));
        }
        cold.connect_us += t.elapsed().as_micros() as u64;
        Ok(out)
    }

    /// Request buffer with room for `bytes` of user data after the hidden
    /// header slot.
    pub fn input(&self, bytes: usize) -> Result<InputBuffer, ClientError> {
        Ok(InputBuffer::new(
            self.inner.domain.alloc_registered(INVOCATION_HEADER_LEN + bytes)?,
        ))
    }

    pub fn input_for<T>(&self, count: usize) -> Result<InputBuffer, ClientError> {
        self.input(count * std::mem::size_of::<T>())
    }

    pub fn output(&self, bytes: usize) -> Result<OutputBuffer, ClientError> {
        if bytes == 0 {
            return Err(ClientError::InvalidBuffer("result buffer must not be empty"));
        }
        Ok(OutputBuffer::new(self.inner.domain.alloc_registered(bytes)?))
    }

    pub fn output_for<T>(&self, count: usize) -> Result<OutputBuffer, ClientError> {
        self.output(count * std::mem::size_of::<T>())
    }

    /// Sends `input[..len]` to the next idle worker and returns at once.
    pub fn submit<'a>(
        &self,
        function: impl Into<Function<'a>>,
        input: &InputBuffer,
        len: usize,
        output: &OutputBuffer,
    ) -> Result<InvocationFuture, InvocationError> {
        let index = self.inner.resolve(function.into())?;
        let worker = self.inner.pick_worker(None)?;
        self.inner.submit_on(worker, index, input, len, output)
    }

    /// Like [`Invoker::submit`] but on a chosen worker; waits while that
    /// worker has an invocation outstanding.
    pub fn submit_to<'a>(
        &self,
        worker: usize,
        function: impl Into<Function<'a>>,
        input: &InputBuffer,
        len: usize,
        output: &OutputBuffer,
    ) -> Result<InvocationFuture, InvocationError> {
        let index = self.inner.resolve(function.into())?;
        let deadline = Instant::now() + self.inner.config.submit_timeout;
        loop {
            let conn = self.inner.workers.read().get(worker).cloned().ok_or(InvocationError::NoWorkers)?;
            if !conn.usable(unix_time_ms()) {
                return Err(InvocationError::NoWorkers);
            }
            if conn.busy.compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire).is_ok() {
                self.inner.rr.store(worker + 1, Ordering::Relaxed);
                return self.inner.submit_on(worker, index, input, len, output);
            }
            if Instant::now() >= deadline {
                return Err(InvocationError::Transport("worker stayed busy".into()));
            }
            if self.inner.progress(PollMode::Busy) == 0 {
                std::thread::yield_now();
            }
        }
    }

    /// Submits and waits, moving to another worker after a rejection,
    /// disconnect or failure. Makes at most `retry_limit` attempts and
    /// leases again only when no cached worker is usable.
    pub fn invoke_with_failover<'a>(
        &self,
        function: impl Into<Function<'a>>,
        input: &InputBuffer,
        len: usize,
        output: &OutputBuffer,
    ) -> Result<usize, InvocationError> {
        let index = self.inner.resolve(function.into())?;
        let mut errors = Vec::new();
        let mut avoid = None;
        for _ in 0..self.inner.config.retry_limit {
            let worker = match self.inner.pick_worker(avoid) {
                Ok(w) => Ok(w),
                Err(InvocationError::NoWorkers) => self.relocate().and_then(|_| self.inner.pick_worker(None)),
                Err(e) => Err(e),
            };
            let fut = match worker.and_then(|w| self.inner.submit_on(w, index, input, len, output)) {
                Ok(f) => f,
                Err(e) => {
                    errors.push(e);
                    continue;
                }
            };
            match fut.get(WaitMode::Blocking) {
                Ok(n) => return Ok(n),
                Err(e) => {
                    avoid = Some(fut.worker());
                    errors.push(e);
                }
            }
        }
        Err(InvocationError::Exhausted(errors))
    }

    fn relocate(&self) -> Result<(), InvocationError> {
        let (code, buffer_bytes, mode) = {
            let last = self.inner.last_allocation.lock();
            let last = last.as_ref().ok_or(InvocationError::NoWorkers)?;
            (last.code.clone(), last.buffer_bytes, last.mode)
        };
        self.allocate(&code, buffer_bytes, mode, 1)
            .map(|_| ())
            .map_err(|e| InvocationError::Transport(format!("re-lease failed: {e}")))
    }

    /// Handles completions without blocking; returns how many arrived.
    pub fn progress(&self) -> usize {
        self.inner.progress(PollMode::Busy)
    }

    pub fn workers(&self) -> Vec<WorkerView> {
        let now = unix_time_ms();
        self.inner
            .workers
            .read()
            .iter()
            .enumerate()
            .map(|(index, w)| WorkerView {
                index,
                lease_id: w.lease_id,
                executor_id: w.executor_id,
                worker_id: w.info.worker_id,
                address: w.info.address.clone(),
                healthy: w.usable(now),
            })
            .collect()
    }

    pub fn leases(&self) -> Vec<LeaseGrant> {
        self.inner.leases.lock().clone()
    }

    /// Leases the manager reported as ended.
    pub fn terminated_leases(&self) -> Vec<u64> {
        self.inner.pump_control(PollMode::Busy);
        self.inner.terminated.lock().clone()
    }

    pub fn pending(&self) -> usize {
        self.inner.pending.lock().entries.len()
    }

    /// Releases every lease, drops all connections and cancels pending
    /// invocations. Calling it again does nothing.
    pub fn deallocate(&self) {
        let inner = &self.inner;
        let _serial = inner.control.lock();
        let leases = std::mem::take(&mut *inner.leases.lock());
        if !leases.is_empty() {
            if let Ok((manager, _)) = inner.manager() {
                for l in &leases {
                    inner.release_lease(&manager, l.lease_id);
                }
            }
        }
        inner.fail_all_pending(InvocationError::Cancelled);
        let workers = std::mem::take(&mut *inner.workers.write());
        for w in workers {
            w.ep.disconnect();
        }
        for (_, ep) in inner.executors.lock().drain() {
            ep.disconnect();
        }
        inner.rr.store(0, Ordering::Relaxed);
    }
}

impl Drop for Invoker {
    fn drop(&mut self) {
        self.deallocate();
        self.inner.stop.store(true, Ordering::Release);
        if let Some(t) = self.progress.take() {
            let _ = t.join();
        }
        if let Some(ep) = self.inner.manager.lock().take() {
            ep.disconnect();
        }
        self.inner.data_cq.close();
        self.inner.ctl_cq.close();
    }
}
