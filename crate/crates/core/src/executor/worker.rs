use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU32, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::functions::{FunctionTable, InvokeError, WorkerFunctions};
use crate::protocol::{
    InvocationHeader, InvocationImmediate, ResultImmediate, ResultStatus, WorkerInfo, INVOCATION_HEADER_LEN,
};
use crate::transport::{
    CompletionEvent, CompletionKind, CompletionQueue, CompletionStatus, Endpoint, Fabric, Listener, MemoryDomain,
    PollMode, RegisteredBuffer, RemoteBufferRef, TransportError,
};
use crate::unix_time_ms;

const SLOT_STRIDE: usize = 64;
const WARM_WAIT: Duration = Duration::from_millis(50);
const ACCEPT_WAIT: Duration = Duration::from_millis(50);
const HOT_TICK: Duration = Duration::from_millis(1);

/// One occupancy word per executor core, in a file-backed shared mapping so
/// that sandbox processes and the allocator see the same table.
pub struct CoreTable {
    base: *mut u8,
    slots: usize,
    path: PathBuf,
    _file: Option<tempfile::NamedTempFile>,
}

// SAFETY: the mapping is only accessed through atomics.
unsafe impl Send for CoreTable {}
unsafe impl Sync for CoreTable {}

impl std::fmt::Debug for CoreTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CoreTable")
            .field("slots", &self.slots)
            .field("path", &self.path)
            .finish()
    }
}

impl CoreTable {
    pub fn create(slots: usize) -> std::io::Result<Self> {
        let file = tempfile::Builder::new().prefix("spotlease-cores-").tempfile()?;
        file.as_file().set_len((slots.max(1) * SLOT_STRIDE) as u64)?;
        let path = file.path().to_path_buf();
        let mut table = Self::map(&path, slots)?;
        table._file = Some(file);
        Ok(table)
    }

    /// Maps a table created by another process.
    pub fn open(path: &Path, slots: usize) -> std::io::Result<Self> {
        Self::map(path, slots)
    }

    fn map(path: &Path, slots: usize) -> std::io::Result<Self> {
        use std::os::fd::AsRawFd;
        let file = OpenOptions::new().read(true).write(true).open(path)?;
        let len = slots.max(1) * SLOT_STRIDE;
        if file.metadata()?.len() < len as u64 {
            return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "core table too short"));
        }
        // SAFETY: fresh shared mapping of a file we just checked is long enough.
        let base = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                len,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_SHARED,
                file.as_raw_fd(),
                0,
            )
        };
        if base == libc::MAP_FAILED {
            return Err(std::io::Error::last_os_error());
        }
        Ok(Self {
            base: base as *mut u8,
            slots,
            path: path.to_path_buf(),
            _file: None,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    fn slot(&self, core: u32) -> &AtomicU32 {
        let i = core as usize % self.slots.max(1);
        // SAFETY: in bounds, page-aligned base, stride keeps 4-byte alignment.
        unsafe { &*(self.base.add(i * SLOT_STRIDE) as *const AtomicU32) }
    }

    /// Claims `core` for `tag` unless someone else holds it.
    pub fn try_acquire(&self, core: u32, tag: u32) -> bool {
        let slot = self.slot(core);
        match slot.compare_exchange(0, tag, Ordering::AcqRel, Ordering::Acquire) {
            Ok(_) => true,
            Err(holder) => holder == tag,
        }
    }

    pub fn release(&self, core: u32, tag: u32) {
        let _ = self.slot(core).compare_exchange(tag, 0, Ordering::AcqRel, Ordering::Acquire);
    }

    pub fn holder(&self, core: u32) -> u32 {
        self.slot(core).load(Ordering::Acquire)
    }
}

impl Drop for CoreTable {
    fn drop(&mut self) {
        // SAFETY: unmapping exactly what `map` mapped.
        unsafe {
            libc::munmap(self.base as *mut libc::c_void, self.slots.max(1) * SLOT_STRIDE);
        }
    }
}

/// Pins the calling thread; returns false where the OS refuses.
pub fn pin_current_thread(core: u32) -> bool {
    #[cfg(target_os = "linux")]
    {
        let n = std::thread::available_parallelism().map_or(1, |n| n.get());
        // SAFETY: plain affinity syscall on a zeroed set.
        unsafe {
            let mut set: libc::cpu_set_t = std::mem::zeroed();
            libc::CPU_SET(core as usize % n, &mut set);
            libc::sched_setaffinity(0, std::mem::size_of::<libc::cpu_set_t>(), &set) == 0
        }
    }
    #[cfg(not(target_os = "linux"))]
    {
        let _ = core;
        false
    }
}

#[derive(Debug, Default)]
pub struct WorkerStats {
    pub busy_ns: AtomicU64,
    pub hot_ns: AtomicU64,
    pub invocations: AtomicU64,
    pub hot_invocations: AtomicU64,
    pub warm_invocations: AtomicU64,
    pub rejections: AtomicU64,
    pub blocking_waits: AtomicU64,
    pub admission_checks: AtomicU64,
    pub last_activity_ms: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WorkerStatsSnapshot {
    pub busy_ns: u64,
    pub hot_ns: u64,
    pub invocations: u64,
    pub hot_invocations: u64,
    pub warm_invocations: u64,
    pub rejections: u64,
    pub blocking_waits: u64,
    pub admission_checks: u64,
    pub last_activity_ms: u64,
}

impl WorkerStats {
    pub fn snapshot(&self) -> WorkerStatsSnapshot {
        let l = |a: &AtomicU64| a.load(Ordering::Relaxed);
        WorkerStatsSnapshot {
            busy_ns: l(&self.busy_ns),
            hot_ns: l(&self.hot_ns),
            invocations: l(&self.invocations),
            hot_invocations: l(&self.hot_invocations),
            warm_invocations: l(&self.warm_invocations),
            rejections: l(&self.rejections),
            blocking_waits: l(&self.blocking_waits),
            admission_checks: l(&self.admission_checks),
            last_activity_ms: l(&self.last_activity_ms),
        }
    }

    fn add(counter: &AtomicU64, v: u64) {
        counter.fetch_add(v, Ordering::Relaxed);
    }
}

/// Which core a worker runs on and the tag it writes into the core table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Placement {
    pub core: u32,
    pub tag: u32,
}

#[derive(Debug, Clone)]
pub struct WorkerSetup {
    pub worker_id: u32,
    pub placement: Placement,
    pub hot_timeout: Duration,
    pub buffer_bytes: usize,
    pub pin: bool,
}

/// A running worker thread with its own endpoint, buffers and queue.
pub struct Worker {
    info: WorkerInfo,
    stats: Arc<WorkerStats>,
    current: Arc<parking_lot::Mutex<Option<Endpoint>>>,
    thread: Option<JoinHandle<()>>,
}

impl Worker {
    pub fn spawn(
        fabric: &Fabric,
        setup: WorkerSetup,
        table: Arc<FunctionTable>,
        cores: Arc<CoreTable>,
        stop: Arc<AtomicBool>,
    ) -> Result<Self, TransportError> {
        let domain = MemoryDomain::new();
        let cq = CompletionQueue::new();
        let listener = fabric.listen(fabric.any_address(), &domain, &cq)?;
        let request = domain.alloc_registered(setup.buffer_bytes + INVOCATION_HEADER_LEN)?;
        let output = domain.alloc_registered(setup.buffer_bytes.max(1))?;
        let info = WorkerInfo {
            worker_id: setup.worker_id,
            address: listener.local_addr(),
            request_buffer: request.remote_ref(),
        };
        let stats = Arc::new(WorkerStats::default());
        stats.last_activity_ms.store(unix_time_ms(), Ordering::Relaxed);
        let current = Arc::new(parking_lot::Mutex::new(None));
        let mut ctx = WorkerLoop {
            setup,
            current: current.clone(),
            cq,
            request,
            output,
            cores,
            stop,
            stats: stats.clone(),
            holds_core: false,
        };
        let name = format!("worker-{}", ctx.setup.worker_id);
        let thread = std::thread::Builder::new()
            .name(name)
            .spawn(move || ctx.run(listener, WorkerFunctions::new(table)))
            .map_err(TransportError::Io)?;
        Ok(Self {
            info,
            stats,
            current,
            thread: Some(thread),
        })
    }

    pub fn info(&self) -> &WorkerInfo {
        &self.info
    }

    pub fn stats(&self) -> &Arc<WorkerStats> {
        &self.stats
    }

    /// Drops the client connection at once, even mid-invocation.
    pub fn abort(&self) {
        if let Some(ep) = self.current.lock().take() {
            ep.disconnect();
        }
    }

    pub fn is_finished(&self) -> bool {
        self.thread.as_ref().is_none_or(|t| t.is_finished())
    }

    pub fn join(&mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

struct WorkerLoop {
    setup: WorkerSetup,
    current: Arc<parking_lot::Mutex<Option<Endpoint>>>,
    cq: CompletionQueue,
    request: RegisteredBuffer,
    output: RegisteredBuffer,
    cores: Arc<CoreTable>,
    stop: Arc<AtomicBool>,
    stats: Arc<WorkerStats>,
    holds_core: bool,
}

impl WorkerLoop {
    fn run(&mut self, listener: Listener, mut functions: WorkerFunctions) {
        if self.setup.pin && !pin_current_thread(self.setup.placement.core) {
            log::debug!("worker {}: pinning unavailable", self.setup.worker_id);
        }
        while !self.stop.load(Ordering::Acquire) {
            match listener.accept(Some(ACCEPT_WAIT)) {
                Ok(ep) => {
                    *self.current.lock() = Some(ep.clone());
                    if !self.stop.load(Ordering::Acquire) {
                        self.serve(&ep, &mut functions);
                    }
                    self.current.lock().take();
                    ep.disconnect();
                    self.release_core();
                }
                Err(TransportError::Timeout) => {}
                Err(e) => {
                    log::warn!("worker {}: accept failed: {e}", self.setup.worker_id);
                    break;
                }
            }
        }
        self.release_core();
    }

    fn acquire_core(&mut self) -> bool {
        if !self.holds_core {
            self.holds_core = self.cores.try_acquire(self.setup.placement.core, self.setup.placement.tag);
        }
        self.holds_core
    }

    fn release_core(&mut self) {
        if self.holds_core {
            self.cores.release(self.setup.placement.core, self.setup.placement.tag);
            self.holds_core = false;
        }
    }

    fn serve(&mut self, ep: &Endpoint, functions: &mut WorkerFunctions) {
        let mut events: Vec<CompletionEvent> = Vec::with_capacity(16);
        let mut hot_until: Option<Instant> = None;
        let mut mark = Instant::now();
        let mut last_target: Option<RemoteBufferRef> = None;
        loop {
            if self.stop.load(Ordering::Acquire) {
                return;
            }
            events.clear();
            if let Some(deadline) = hot_until {
                if self.cq.poll_into(PollMode::Busy, &mut events).is_err() {
                    return;
                }
                let now = Instant::now();
                if events.is_empty() {
                    if now >= deadline {
                        WorkerStats::add(&self.stats.hot_ns, (now - mark).as_nanos() as u64);
                        hot_until = None;
                        self.release_core();
                    } else if now - mark >= HOT_TICK {
                        WorkerStats::add(&self.stats.hot_ns, (now - mark).as_nanos() as u64);
                        mark = now;
                    }
                    std::thread::yield_now();
                    continue;
                }
                WorkerStats::add(&self.stats.hot_ns, (now - mark).as_nanos() as u64);
                mark = now;
            } else {
                WorkerStats::add(&self.stats.blocking_waits, 1);
                if self.cq.poll_into(PollMode::Blocking(WARM_WAIT), &mut events).is_err() {
                    return;
                }
            }
            for ev in events.drain(..) {
                match (ev.kind, ev.status) {
                    (CompletionKind::WriteReceived, CompletionStatus::Ok) => {
                        if self.handle(ep, functions, &ev, hot_until.is_some(), &mut last_target) {
                            let now = Instant::now();
                            if self.setup.hot_timeout.is_zero() {
                                self.release_core();
                            } else {
                                hot_until = Some(now + self.setup.hot_timeout);
                            }
                            mark = now;
                        }
                    }
                    (CompletionKind::WriteDone, CompletionStatus::RemoteAccessError) => {
                        let failed = ResultImmediate::unpack(ev.immediate.unwrap_or(0));
                        if failed.status == ResultStatus::Ok {
                            if let Some(target) = last_target {
                                self.answer(ep, target, 0, failed.invocation_id, ResultStatus::OutputOverflow);
                            }
                        }
                    }
                    (CompletionKind::Recv, CompletionStatus::Disconnected) => return,
                    _ => {}
                }
            }
        }
    }

    /// Returns whether the invocation ran.
    fn handle(
        &mut self,
        ep: &Endpoint,
        functions: &mut WorkerFunctions,
        ev: &CompletionEvent,
        hot: bool,
        last_target: &mut Option<RemoteBufferRef>,
    ) -> bool {
        let imm = InvocationImmediate::unpack(ev.immediate.unwrap_or(0));
        let len = ev.byte_len as usize;
        if len < INVOCATION_HEADER_LEN || len > self.request.len() {
            log::warn!("worker {}: dropping {len}-byte request", self.setup.worker_id);
            return false;
        }
        let header = match InvocationHeader::decode(&self.request.read()[..INVOCATION_HEADER_LEN]) {
            Ok(h) => h,
            Err(e) => {
                log::warn!("worker {}: bad header: {e}", self.setup.worker_id);
                return false;
            }
        };
        let target = header.result_target();
        *last_target = Some(target);
        if !hot {
            WorkerStats::add(&self.stats.admission_checks, 1);
            if !self.acquire_core() {
                WorkerStats::add(&self.stats.rejections, 1);
                self.answer(ep, target, 0, imm.invocation_id, ResultStatus::Rejected);
                return false;
            }
        }
        let start = Instant::now();
        let result = {
            let input = self.request.read();
            let mut out = self.output.write();
            functions.invoke(imm.function_index, &input[INVOCATION_HEADER_LEN..len], &mut out)
        };
        WorkerStats::add(&self.stats.busy_ns, start.elapsed().as_nanos() as u64);
        WorkerStats::add(&self.stats.invocations, 1);
        WorkerStats::add(
            if hot { &self.stats.hot_invocations } else { &self.stats.warm_invocations },
            1,
        );
        self.stats.last_activity_ms.store(unix_time_ms(), Ordering::Relaxed);
        let (n, status) = match result {
            Ok(n) => (n, ResultStatus::Ok),
            Err(InvokeError::UnknownFunction(_)) => (0, ResultStatus::UnknownFunction),
            Err(InvokeError::OutputTooSmall) => (0, ResultStatus::OutputOverflow),
            Err(InvokeError::Failed(msg)) => {
                log::debug!("worker {}: function {} failed: {msg}", self.setup.worker_id, imm.function_index);
                (0, ResultStatus::FunctionError)
            }
        };
        self.answer(ep, target, n, imm.invocation_id, status);
        true
    }

    fn answer(&self, ep: &Endpoint, target: RemoteBufferRef, len: usize, invocation_id: u16, status: ResultStatus) {
        let imm = ResultImmediate { invocation_id, status }.pack();
        if let Err(e) = ep.write_with_imm(&self.output, 0, len, target, imm) {
            log::debug!("worker {}: result write failed: {e}", self.setup.worker_id);
        }
    }
}
