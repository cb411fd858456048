//! Sandboxes host the workers of one lease.
//!
//! An inline sandbox runs the workers as threads of the executor. A process
//! sandbox runs them in a child process started from a configured program,
//! which must call [`run_child`] on its stdin and stdout. Parent and child
//! exchange length-prefixed frames:
//!
//! * parent to child: a `key=value` spec frame, then an encoded
//!   `AllocateSandbox`; closing stdin asks the child to stop;
//! * child to parent: `SandboxReady` or `Error`, then `UsageReport` frames
//!   carrying cumulative totals until the child exits.
//!
//! A child whose parent dies exits at once, dropping its connections.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::worker::{CoreTable, Placement, Worker, WorkerSetup, WorkerStatsSnapshot};
use crate::functions::FunctionTable;
use crate::protocol::{CodeSubmission, ColdTimings, ControlMessage, ErrorCode, WorkerInfo};
use crate::transport::Fabric;
use crate::unix_time_ms;

const REPORT_INTERVAL: Duration = Duration::from_millis(250);
const READY_TIMEOUT: Duration = Duration::from_secs(20);
const MAX_FRAME: usize = 64 << 20;
const ORPHAN_CHECK: Duration = Duration::from_millis(20);

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SandboxKind {
    Inline,
    Process { program: PathBuf, args: Vec<String> },
}

#[derive(Debug, Clone)]
pub struct SandboxPlan {
    pub lease_id: u64,
    pub hot_timeout: Duration,
    pub buffer_bytes: u32,
    pub code: CodeSubmission,
    pub placements: Vec<Placement>,
    pub pin: bool,
}

pub fn write_frame(w: &mut impl Write, bytes: &[u8]) -> std::io::Result<()> {
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    w.flush()
}

/// `Ok(None)` on a clean end of stream.
pub fn read_frame(r: &mut impl Read) -> std::io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_le_bytes(len) as usize;
    if len > MAX_FRAME {
        return Err(invalid("frame too large"));
    }
    let mut buf = vec![0; len];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

fn invalid(msg: impl Into<String>) -> std::io::Error {
    std::io::Error::new(std::io::ErrorKind::InvalidData, msg.into())
}

/// Workers of one sandbox running in the current process.
pub struct Runtime {
    workers: Vec<Worker>,
    stop: Arc<AtomicBool>,
    started_ms: u64,
}

pub struct Started {
    pub runtime: Runtime,
    pub workers: Vec<WorkerInfo>,
    pub submit_code_us: u64,
    pub spawn_workers_us: u64,
}

impl Runtime {
    pub fn start(fabric: &Fabric, plan: &SandboxPlan, cores: Arc<CoreTable>) -> Result<Started, String> {
        let t0 = Instant::now();
        let table = FunctionTable::load(&plan.code).map_err(|e| e.to_string())?;
        let submit_code_us = t0.elapsed().as_micros() as u64;
        let t1 = Instant::now();
        let stop = Arc::new(AtomicBool::new(false));
        let mut workers = Vec::with_capacity(plan.placements.len());
        for (i, placement) in plan.placements.iter().enumerate() {
            let setup = WorkerSetup {
                worker_id: i as u32,
                placement: *placement,
                hot_timeout: plan.hot_timeout,
                buffer_bytes: plan.buffer_bytes as usize,
                pin: plan.pin,
            };
            match Worker::spawn(fabric, setup, table.clone(), cores.clone(), stop.clone()) {
                Ok(w) => workers.push(w),
                Err(e) => {
                    stop.store(true, Ordering::Release);
                    workers.iter_mut().for_each(Worker::join);
                    return Err(format!("worker {i}: {e}"));
                }
            }
        }
        let infos = workers.iter().map(|w| w.info().clone()).collect();
        Ok(Started {
            runtime: Self {
                workers,
                stop,
                started_ms: unix_time_ms(),
            },
            workers: infos,
            submit_code_us,
            spawn_workers_us: t1.elapsed().as_micros() as u64,
        })
    }

    /// Cumulative `(busy_ns, hot_ns)` over all workers.
    pub fn usage(&self) -> (u64, u64) {
        self.workers.iter().fold((0, 0), |(b, h), w| {
            let s = w.stats();
            (b + s.busy_ns.load(Ordering::Relaxed), h + s.hot_ns.load(Ordering::Relaxed))
        })
    }

    pub fn last_activity_ms(&self) -> u64 {
        self.workers
            .iter()
            .map(|w| w.stats().last_activity_ms.load(Ordering::Relaxed))
            .max()
            .unwrap_or(self.started_ms)
    }

    pub fn stats(&self) -> Vec<WorkerStatsSnapshot> {
        self.workers.iter().map(|w| w.stats().snapshot()).collect()
    }

    pub fn begin_stop(&self) {
        self.stop.store(true, Ordering::Release);
    }

    pub fn abort(&self) {
        self.begin_stop();
        self.workers.iter().for_each(Worker::abort);
    }

    pub fn is_finished(&self) -> bool {
        self.workers.iter().all(Worker::is_finished)
    }

    pub fn join(&mut self) {
        self.begin_stop();
        self.workers.iter_mut().for_each(Worker::join);
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        self.join();
    }
}

#[derive(Default)]
struct ProcessUsage {
    busy_ns: AtomicU64,
    hot_ns: AtomicU64,
    last_activity_ms: AtomicU64,
    closed: AtomicBool,
}

pub struct ProcessSandbox {
    child: Child,
    stdin: Option<ChildStdin>,
    usage: Arc<ProcessUsage>,
    reader: Option<JoinHandle<()>>,
}

impl ProcessSandbox {
    fn spawn(
        program: &Path,
        args: &[String],
        plan: &SandboxPlan,
        cores: &CoreTable,
    ) -> Result<(Self, Vec<WorkerInfo>, u64), String> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| format!("spawn {}: {e}", program.display()))?;
        let mut stdin = child.stdin.take().expect("piped stdin");
        let mut stdout = child.stdout.take().expect("piped stdout");
        let placements: Vec<String> = plan.placements.iter().map(|p| format!("{}:{}", p.core, p.tag)).collect();
        let spec = format!(
            "core_table={}\ncore_slots={}\npin={}\nplacements={}\n",
            cores.path().display(),
            cores.slots(),
            plan.pin as u8,
            placements.join(","),
        );
        let alloc = ControlMessage::AllocateSandbox {
            lease_id: plan.lease_id,
            client_id: 0,
            hot_timeout_ms: plan.hot_timeout.as_millis().min(u32::MAX as u128 - 1) as u32,
            buffer_bytes: plan.buffer_bytes,
            code: plan.code.clone(),
        };
        let sent = write_frame(&mut stdin, spec.as_bytes()).and_then(|_| write_frame(&mut stdin, &alloc.encode()));
        if let Err(e) = sent {
            let _ = child.kill();
            let _ = child.wait();
            return Err(format!("sandbox setup: {e}"));
        }

        let usage = Arc::new(ProcessUsage::default());
        usage.last_activity_ms.store(unix_time_ms(), Ordering::Relaxed);
        let (ready_tx, ready_rx) = mpsc::channel();
        let reader_usage = usage.clone();
        let reader = std::thread::Builder::new()
            .name(format!("sandbox-{}", plan.lease_id))
            .spawn(move || {
                let mut ready = Some(ready_tx);
                loop {
                    let frame = match read_frame(&mut stdout) {
                        Ok(Some(f)) => f,
                        Ok(None) => break,
                        Err(e) => {
                            log::debug!("sandbox pipe: {e}");
                            break;
                        }
                    };
                    let msg = match ControlMessage::decode(&frame) {
                        Ok(m) => m,
                        Err(e) => {
                            log::warn!("sandbox sent bad frame: {e}");
                            break;
                        }
                    };
                    match msg {
                        ControlMessage::UsageReport { busy_ns, hot_ns, .. } => {
                            let prev = reader_usage.busy_ns.swap(busy_ns, Ordering::Relaxed);
                            reader_usage.hot_ns.store(hot_ns, Ordering::Relaxed);
                            if busy_ns != prev {
                                reader_usage.last_activity_ms.store(unix_time_ms(), Ordering::Relaxed);
                            }
                        }
                        other => {
                            if let Some(tx) = ready.take() {
                                let _ = tx.send(other);
                            }
                        }
                    }
                }
                reader_usage.closed.store(true, Ordering::Release);
            })
            .map_err(|e| e.to_string())?;

        let mut sandbox = Self {
            child,
            stdin: Some(stdin),
            usage,
            reader: Some(reader),
        };
        match ready_rx.recv_timeout(READY_TIMEOUT) {
            Ok(ControlMessage::SandboxReady { workers, timings, .. }) => Ok((sandbox, workers, timings.submit_code_us)),
            Ok(ControlMessage::Error { message, .. }) => {
                sandbox.kill();
                Err(message)
            }
            Ok(other) => {
                sandbox.kill();
                Err(format!("unexpected sandbox reply {other:?}"))
            }
            Err(_) => {
                sandbox.kill();
                Err("sandbox did not become ready".into())
            }
        }
    }

    fn begin_stop(&mut self) {
        self.stdin.take();
    }

    fn is_finished(&mut self) -> bool {
        self.usage.closed.load(Ordering::Acquire) && matches!(self.child.try_wait(), Ok(Some(_)))
    }

    pub fn pid(&self) -> u32 {
        self.child.id()
    }

    fn kill(&mut self) {
        self.stdin.take();
        let _ = self.child.kill();
        let _ = self.child.wait();
        if let Some(r) = self.reader.take() {
            let _ = r.join();
        }
    }
}

impl Drop for ProcessSandbox {
    fn drop(&mut self) {
        self.begin_stop();
        let deadline = Instant::now() + Duration::from_secs(2);
        while Instant::now() < deadline {
            if let Ok(Some(_)) = self.child.try_wait() {
                break;
            }
            std::thread::sleep(Duration::from_millis(5));
        }
        self.kill();
    }
}

pub enum Sandbox {
    Inline(Runtime),
    Process(ProcessSandbox),
}

pub struct Spawned {
    pub sandbox: Sandbox,
    pub workers: Vec<WorkerInfo>,
    pub timings: ColdTimings,
}

impl Sandbox {
    pub fn spawn(kind: &SandboxKind, fabric: &Fabric, plan: &SandboxPlan, cores: &Arc<CoreTable>) -> Result<Spawned, String> {
        let t0 = Instant::now();
        match kind {
            SandboxKind::Inline => {
                let s = Runtime::start(fabric, plan, cores.clone())?;
                Ok(Spawned {
                    sandbox: Sandbox::Inline(s.runtime),
                    workers: s.workers,
                    timings: ColdTimings {
                        allocate_us: 0,
                        submit_code_us: s.submit_code_us,
                        spawn_workers_us: s.spawn_workers_us,
                    },
                })
            }
            SandboxKind::Process { program, args } => {
                let (sandbox, workers, submit_code_us) = ProcessSandbox::spawn(program, args, plan, cores)?;
                let total = t0.elapsed().as_micros() as u64;
                Ok(Spawned {
                    sandbox: Sandbox::Process(sandbox),
                    workers,
                    timings: ColdTimings {
                        allocate_us: 0,
                        submit_code_us,
                        spawn_workers_us: total.saturating_sub(submit_code_us),
                    },
                })
            }
        }
    }

    pub fn usage(&self) -> (u64, u64) {
        match self {
            Self::Inline(r) => r.usage(),
            Self::Process(p) => (
                p.usage.busy_ns.load(Ordering::Relaxed),
                p.usage.hot_ns.load(Ordering::Relaxed),
            ),
        }
    }

    pub fn last_activity_ms(&self) -> u64 {
        match self {
            Self::Inline(r) => r.last_activity_ms(),
            Self::Process(p) => p.usage.last_activity_ms.load(Ordering::Relaxed),
        }
    }

    /// Per-worker counters; only inline sandboxes expose them.
    pub fn worker_stats(&self) -> Option<Vec<WorkerStatsSnapshot>> {
        match self {
            Self::Inline(r) => Some(r.stats()),
            Self::Process(_) => None,
        }
    }

    pub fn pid(&self) -> Option<u32> {
        match self {
            Self::Inline(_) => None,
            Self::Process(p) => Some(p.pid()),
        }
    }

    pub fn begin_stop(&mut self) {
        match self {
            Self::Inline(r) => r.begin_stop(),
            Self::Process(p) => p.begin_stop(),
        }
    }

    pub fn is_finished(&mut self) -> bool {
        match self {
            Self::Inline(r) => r.is_finished(),
            Self::Process(p) => p.is_finished(),
        }
    }

    pub fn kill(&mut self) {
        match self {
            Self::Inline(r) => r.abort(),
            Self::Process(p) => p.kill(),
        }
    }
}

struct ChildSpec {
    core_table: PathBuf,
    core_slots: usize,
    pin: bool,
    placements: Vec<Placement>,
}

fn parse_child_spec(text: &str) -> std::io::Result<ChildSpec> {
    let mut spec = ChildSpec {
        core_table: PathBuf::new(),
        core_slots: 0,
        pin: false,
        placements: Vec::new(),
    };
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| invalid(format!("bad spec line {line:?}")))?;
        match k {
            "core_table" => spec.core_table = PathBuf::from(v),
            "core_slots" => spec.core_slots = v.parse().map_err(|_| invalid("core_slots"))?,
            "pin" => spec.pin = v == "1",
            "placements" => {
                for p in v.split(',').filter(|p| !p.is_empty()) {
                    let (c, t) = p.split_once(':').ok_or_else(|| invalid("placement"))?;
                    spec.placements.push(Placement {
                        core: c.parse().map_err(|_| invalid("placement core"))?,
                        tag: t.parse().map_err(|_| invalid("placement tag"))?,
                    });
                }
            }
            _ => return Err(invalid(format!("unknown spec key {k:?}"))),
        }
    }
    Ok(spec)
}

fn exit_when_orphaned() {
    let parent = std::os::unix::process::parent_id();
    std::thread::spawn(move || loop {
        std::thread::sleep(ORPHAN_CHECK);
        if std::os::unix::process::parent_id() != parent {
            std::process::exit(1);
        }
    });
}

/// Body of a process sandbox. Serves workers over TCP until `input` closes.
pub fn run_child<R, W>(mut input: R, mut output: W) -> std::io::Result<()>
where
    R: Read + Send + 'static,
    W: Write,
{
    exit_when_orphaned();
    let spec = read_frame(&mut input)?.ok_or_else(|| invalid("missing spec"))?;
    let spec = parse_child_spec(std::str::from_utf8(&spec).map_err(|_| invalid("spec not utf-8"))?)?;
    let alloc = read_frame(&mut input)?.ok_or_else(|| invalid("missing allocation"))?;
    let (lease_id, hot_timeout_ms, buffer_bytes, code) =
        match ControlMessage::decode(&alloc).map_err(|e| invalid(e.to_string()))? {
            ControlMessage::AllocateSandbox {
                lease_id,
                hot_timeout_ms,
                buffer_bytes,
                code,
                ..
            } => (lease_id, hot_timeout_ms, buffer_bytes, code),
            _ => return Err(invalid("expected AllocateSandbox")),
        };
    let cores = Arc::new(CoreTable::open(&spec.core_table, spec.core_slots)?);
    let plan = SandboxPlan {
        lease_id,
        hot_timeout: Duration::from_millis(hot_timeout_ms as u64),
        buffer_bytes,
        code,
        placements: spec.placements,
        pin: spec.pin,
    };
    let mut started = match Runtime::start(&Fabric::tcp(), &plan, cores) {
        Ok(s) => s,
        Err(e) => {
            write_frame(&mut output, &ControlMessage::error(ErrorCode::SpawnFailed, e).encode())?;
            return Ok(());
        }
    };
    let ready = ControlMessage::SandboxReady {
        lease_id,
        workers: std::mem::take(&mut started.workers),
        timings: ColdTimings {
            allocate_us: 0,
            submit_code_us: started.submit_code_us,
            spawn_workers_us: started.spawn_workers_us,
        },
    };
    write_frame(&mut output, &ready.encode())?;

    let (eof_tx, eof_rx) = mpsc::channel::<()>();
    std::thread::spawn(move || {
        let mut sink = [0u8; 256];
        while matches!(input.read(&mut sink), Ok(n) if n > 0) {}
        let _ = eof_tx.send(());
    });
    let mut runtime = started.runtime;
    let report = |runtime: &Runtime, output: &mut W| {
        let (busy_ns, hot_ns) = runtime.usage();
        write_frame(output, &ControlMessage::UsageReport { lease_id, busy_ns, hot_ns }.encode())
    };
    loop {
        match eof_rx.recv_timeout(REPORT_INTERVAL) {
            Err(mpsc::RecvTimeoutError::Timeout) => {
                if report(&runtime, &mut output).is_err() {
                    break;
                }
            }
            _ => break,
        }
    }
    runtime.join();
    let _ = report(&runtime, &mut output);
    Ok(())
}
