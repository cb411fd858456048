use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::report::{Record, ToRecord};
use super::stack::Target;
use super::stats::{median_of, LatencyMode, LatencySummary, DEFAULT_LEVEL};
use super::BenchError;
use crate::client::{ClientError, InvocationError, Invoker, ModeHint, WaitMode};
use crate::protocol::{CodeSubmission, ErrorCode, INVOCATION_HEADER_LEN};
use crate::transport::{
    CompletionEvent, CompletionKind, CompletionQueue, CompletionStatus, Endpoint, Fabric, MemoryDomain, PollMode,
    RegisteredBuffer, RemoteBufferRef,
};

pub const DEFAULT_WARMUPS: usize = 100;
const ACCEPT_TIMEOUT: Duration = Duration::from_secs(10);
const ROUND_TIMEOUT: Duration = Duration::from_secs(60);

pub fn demo_code() -> CodeSubmission {
    CodeSubmission::builtin("demo", &["echo", "blackscholes_batch", "mmm_half", "jacobi_step"])
}

fn encode_ref(r: RemoteBufferRef) -> Vec<u8> {
    let mut out = r.address.to_le_bytes().to_vec();
    out.extend_from_slice(&r.rkey.to_le_bytes());
    out.extend_from_slice(&r.length.to_le_bytes());
    out
}

fn decode_ref(b: &[u8]) -> Option<RemoteBufferRef> {
    (b.len() == 16).then(|| {
        RemoteBufferRef::new(
            u64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
            u32::from_le_bytes(b[8..12].try_into().expect("4 bytes")),
            u32::from_le_bytes(b[12..].try_into().expect("4 bytes")),
        )
    })
}

fn poll(cq: &CompletionQueue, mode: PollMode, out: &mut Vec<CompletionEvent>) -> Result<(), BenchError> {
    out.clear();
    cq.poll_into(mode, out)?;
    if out.is_empty() && mode == PollMode::Busy {
        thread::yield_now();
    }
    Ok(())
}

fn recv_message(cq: &CompletionQueue, ep: &Endpoint) -> Result<Vec<u8>, BenchError> {
    let deadline = Instant::now() + ACCEPT_TIMEOUT;
    let mut events = Vec::new();
    while Instant::now() < deadline {
        poll(cq, PollMode::Blocking(Duration::from_millis(20)), &mut events)?;
        for ev in events.drain(..) {
            if ev.endpoint == ep.id() && ev.kind == CompletionKind::Recv {
                if ev.status != CompletionStatus::Ok {
                    return Err(BenchError::Stack("raw peer went away".into()));
                }
                return Ok(ev.payload.unwrap_or_default());
            }
        }
    }
    Err(BenchError::Stack("raw peer handshake timed out".into()))
}

/// Echo server speaking only the transport: each request written into its
/// buffer is written straight back, without function dispatch or copies.
struct RawPeer {
    thread: Option<JoinHandle<()>>,
}

impl RawPeer {
    fn spawn(fabric: &Fabric, size: usize, mode: PollMode) -> Result<(Self, String), BenchError> {
        let domain = MemoryDomain::new();
        let cq = CompletionQueue::new();
        let listener = fabric.listen(fabric.any_address(), &domain, &cq)?;
        let address = listener.local_addr();
        let request = domain.alloc_registered(size + INVOCATION_HEADER_LEN)?;
        let thread = thread::Builder::new()
            .name("raw-peer".into())
            .spawn(move || {
                let Ok(ep) = listener.accept(Some(ACCEPT_TIMEOUT)) else { return };
                let _ = Self::serve(&ep, &cq, &request, mode);
                ep.disconnect();
            })
            .map_err(|e| BenchError::Stack(e.to_string()))?;
        Ok((Self { thread: Some(thread) }, address))
    }

    fn serve(ep: &Endpoint, cq: &CompletionQueue, request: &RegisteredBuffer, mode: PollMode) -> Result<(), BenchError> {
        let target = decode_ref(&recv_message(cq, ep)?).ok_or(BenchError::Stack("bad raw handshake".into()))?;
        ep.send(&encode_ref(request.remote_ref()))?;
        let mut events = Vec::new();
        loop {
            poll(cq, mode, &mut events)?;
            for ev in &events {
                match (ev.kind, ev.status) {
                    (CompletionKind::WriteReceived, CompletionStatus::Ok) => {
                        let len = (ev.byte_len as usize).saturating_sub(INVOCATION_HEADER_LEN);
                        ep.write_with_imm(request, INVOCATION_HEADER_LEN, len, target, ev.immediate.unwrap_or(0))?;
                    }
                    (CompletionKind::Recv, CompletionStatus::Disconnected) => return Ok(()),
                    _ => {}
                }
            }
        }
    }
}

impl Drop for RawPeer {
    fn drop(&mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

/// Client side of one raw connection.
struct RawLink {
    ep: Endpoint,
    request: RegisteredBuffer,
    _response: RegisteredBuffer,
    peer: RemoteBufferRef,
    _server: RawPeer,
}

impl RawLink {
    fn open(fabric: &Fabric, domain: &MemoryDomain, cq: &CompletionQueue, size: usize, mode: PollMode) -> Result<Self, BenchError> {
        let (server, address) = RawPeer::spawn(fabric, size, mode)?;
        let ep = fabric.connect(&address, domain, cq)?;
        let request = domain.alloc_registered(size + INVOCATION_HEADER_LEN)?;
        let response = domain.alloc_registered(size.max(1))?;
        ep.send(&encode_ref(response.remote_ref()))?;
        let peer = decode_ref(&recv_message(cq, &ep)?).ok_or(BenchError::Stack("bad raw handshake".into()))?;
        Ok(Self {
            ep,
            request,
            _response: response,
            peer,
            _server: server,
        })
    }

    fn post(&self, size: usize, imm: u32) -> Result<(), BenchError> {
        Ok(self
            .ep
            .write_with_imm(&self.request, 0, size + INVOCATION_HEADER_LEN, self.peer, imm)?)
    }
}

impl Drop for RawLink {
    fn drop(&mut self) {
        self.ep.disconnect();
    }
}

/// Write round trips of `size` bytes (plus the invocation header) against a
/// busy-polling transport echo.
pub fn raw_transport_samples(fabric: &Fabric, size: usize, reps: usize, warmups: usize) -> Result<Vec<u64>, BenchError> {
    let domain = MemoryDomain::new();
    let cq = CompletionQueue::new();
    let link = RawLink::open(fabric, &domain, &cq, size, PollMode::Busy)?;
    link.request.write()[INVOCATION_HEADER_LEN..].fill(0x5A);
    let mut samples = Vec::with_capacity(reps);
    let mut events = Vec::new();
    for i in 0..warmups + reps {
        let t = Instant::now();
        link.post(size, i as u32)?;
        'wait: loop {
            poll(&cq, PollMode::Busy, &mut events)?;
            for ev in &events {
                match (ev.kind, ev.status) {
                    (CompletionKind::WriteReceived, CompletionStatus::Ok) if ev.immediate == Some(i as u32) => {
                        break 'wait;
                    }
                    (CompletionKind::Recv, CompletionStatus::Disconnected) => {
                        return Err(BenchError::Stack("raw peer went away".into()))
                    }
                    (CompletionKind::WriteDone, s) if s != CompletionStatus::Ok => {
                        return Err(BenchError::Stack(format!("raw write failed: {s:?}")))
                    }
                    _ => {}
                }
            }
            if t.elapsed() > ROUND_TIMEOUT {
                return Err(BenchError::Stack("raw round trip timed out".into()));
            }
        }
        if i >= warmups {
            samples.push(t.elapsed().as_nanos() as u64);
        }
    }
    Ok(samples)
}

fn mode_hint(mode: LatencyMode) -> Result<ModeHint, BenchError> {
    match mode {
        LatencyMode::Hot => Ok(ModeHint::AlwaysHot),
        LatencyMode::Warm => Ok(ModeHint::AlwaysWarm),
        LatencyMode::RawTransport => Err(BenchError::Usage("raw transport has no workers".into())),
    }
}

fn check_len(got: Result<usize, InvocationError>, want: usize) -> Result<(), BenchError> {
    match got {
        Ok(n) if n == want => Ok(()),
        Ok(n) => Err(BenchError::Violation(format!("echo returned {n} of {want} bytes"))),
        Err(e) => Err(e.into()),
    }
}

/// Echo round trips through one worker in `mode`.
pub fn invocation_samples(
    target: &Target,
    mode: LatencyMode,
    size: usize,
    reps: usize,
    warmups: usize,
) -> Result<Vec<u64>, BenchError> {
    let hint = mode_hint(mode)?;
    let inv = target.invoker(false)?;
    inv.allocate(&demo_code(), size, hint, 1)?;
    let input = inv.input(size)?;
    let output = inv.output(size.max(1))?;
    input.data_mut().fill(0x5A);
    let mut samples = Vec::with_capacity(reps);
    for i in 0..warmups + reps {
        let t = Instant::now();
        let fut = inv.submit(0u16, &input, size, &output)?;
        check_len(fut.get(WaitMode::Busy), size)?;
        if i >= warmups {
            samples.push(t.elapsed().as_nanos() as u64);
        }
    }
    inv.deallocate();
    Ok(samples)
}

pub fn bench_latency(
    target: &Target,
    mode: LatencyMode,
    size: usize,
    reps: usize,
    warmups: usize,
) -> Result<LatencySummary, BenchError> {
    if reps == 0 {
        return Err(BenchError::Usage("reps must be at least 1".into()));
    }
    let samples = match mode {
        LatencyMode::RawTransport => raw_transport_samples(&target.fabric, size, reps, warmups)?,
        _ => invocation_samples(target, mode, size, reps, warmups)?,
    };
    LatencySummary::from_samples_ns(mode, size, &samples, DEFAULT_LEVEL)
}

/// Raw, hot and warm runs of the same size back to back.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedLatency {
    pub raw: LatencySummary,
    pub hot: LatencySummary,
    pub warm: LatencySummary,
}

impl PairedLatency {
    pub fn ordered(&self) -> bool {
        self.raw.median <= self.hot.median && self.hot.median <= self.warm.median
    }

    /// Dispatch overhead of a hot invocation over the bare transport.
    pub fn overhead(&self) -> f64 {
        self.hot.median - self.raw.median
    }
}

pub fn bench_latency_paired(target: &Target, size: usize, reps: usize, warmups: usize) -> Result<PairedLatency, BenchError> {
    Ok(PairedLatency {
        raw: bench_latency(target, LatencyMode::RawTransport, size, reps, warmups)?,
        hot: bench_latency(target, LatencyMode::Hot, size, reps, warmups)?,
        warm: bench_latency(target, LatencyMode::Warm, size, reps, warmups)?,
    })
}

impl ToRecord for LatencySummary {
    const KIND: &'static str = "latency";

    fn to_record(&self) -> Record {
        Record::new(Self::KIND)
            .with("mode", self.mode)
            .with("size", self.size)
            .with("reps", self.reps)
            .with("median_s", self.median)
            .with("mean_s", self.mean)
            .with("p99_s", self.p99)
            .with("ci_low_s", self.ci_low)
            .with("ci_high_s", self.ci_high)
            .with("ci_saturated", self.ci_saturated)
    }

    fn from_record(r: &Record) -> Result<Self, BenchError> {
        Ok(Self {
            mode: r.parse("mode")?,
            size: r.parse("size")?,
            reps: r.parse("reps")?,
            median: r.parse("median_s")?,
            mean: r.parse("mean_s")?,
            p99: r.parse("p99_s")?,
            ci_low: r.parse("ci_low_s")?,
            ci_high: r.parse("ci_high_s")?,
            ci_saturated: r.parse("ci_saturated")?,
        })
    }
}

/// Bit-exactness tally of an echo run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EchoOutcome {
    pub size: usize,
    pub reps: usize,
    pub mismatches: usize,
    pub losses: usize,
    pub elapsed_ms: u64,
}

impl EchoOutcome {
    pub fn clean(&self) -> bool {
        self.mismatches == 0 && self.losses == 0
    }
}

/// Sends `reps` distinct payloads of `size` bytes and checks every reply.
pub fn bench_echo(target: &Target, size: usize, reps: usize) -> Result<EchoOutcome, BenchError> {
    if size == 0 || reps == 0 {
        return Err(BenchError::Usage("size and reps must be at least 1".into()));
    }
    let t0 = Instant::now();
    let inv = target.invoker(false)?;
    inv.allocate(&demo_code(), size, ModeHint::WarmOk, 1)?;
    let input = inv.input(size)?;
    let output = inv.output(size)?;
    {
        let mut data = input.data_mut();
        for (i, b) in data.iter_mut().enumerate() {
            *b = (i as u32).wrapping_mul(2_654_435_761).to_le_bytes()[3];
        }
    }
    let mut outcome = EchoOutcome {
        size,
        reps,
        mismatches: 0,
        losses: 0,
        elapsed_ms: 0,
    };
    for rep in 0..reps as u64 {
        {
            let mut data = input.data_mut();
            let stamp = rep.to_le_bytes();
            let k = stamp.len().min(size);
            data[..k].copy_from_slice(&stamp[..k]);
            data[size - k..].copy_from_slice(&stamp[..k]);
        }
        match inv.submit(0u16, &input, size, &output).map(|f| f.get(WaitMode::Busy)) {
            Ok(Ok(n)) if n == size => {
                if output.data()[..size] != input.data()[..size] {
                    outcome.mismatches += 1;
                }
            }
            Ok(Ok(_)) => outcome.mismatches += 1,
            _ => outcome.losses += 1,
        }
    }
    inv.deallocate();
    outcome.elapsed_ms = t0.elapsed().as_millis() as u64;
    Ok(outcome)
}

impl ToRecord for EchoOutcome {
    const KIND: &'static str = "echo";

    fn to_record(&self) -> Record {
        Record::new(Self::KIND)
            .with("size", self.size)
            .with("reps", self.reps)
            .with("mismatches", self.mismatches)
            .with("losses", self.losses)
            .with("elapsed_ms", self.elapsed_ms)
    }

    fn from_record(r: &Record) -> Result<Self, BenchError> {
        Ok(Self {
            size: r.parse("size")?,
            reps: r.parse("reps")?,
            mismatches: r.parse("mismatches")?,
            losses: r.parse("losses")?,
            elapsed_ms: r.parse("elapsed_ms")?,
        })
    }
}

/// Cold-start steps of one trial, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ColdBreakdown {
    pub connect_manager: f64,
    pub lease_grant: f64,
    pub submit_code: f64,
    pub spawn_workers: f64,
    pub first_invocation: f64,
}

pub const COLD_STEPS: [&str; 5] = [
    "connect_manager",
    "lease_grant",
    "submit_code",
    "spawn_workers",
    "first_invocation",
];

impl ColdBreakdown {
    pub fn steps(&self) -> [f64; 5] {
        [
            self.connect_manager,
            self.lease_grant,
            self.submit_code,
            self.spawn_workers,
            self.first_invocation,
        ]
    }

    fn from_steps(s: [f64; 5]) -> Self {
        Self {
            connect_manager: s[0],
            lease_grant: s[1],
            submit_code: s[2],
            spawn_workers: s[3],
            first_invocation: s[4],
        }
    }

    pub fn total(&self) -> f64 {
        self.steps().iter().sum()
    }

    /// Name of the longest step.
    pub fn largest_step(&self) -> &'static str {
        let s = self.steps();
        let i = (0..s.len()).fold(0, |best, i| if s[i] > s[best] { i } else { best });
        COLD_STEPS[i]
    }
}

impl ToRecord for ColdBreakdown {
    const KIND: &'static str = "cold";

    fn to_record(&self) -> Record {
        COLD_STEPS
            .iter()
            .zip(self.steps())
            .fold(Record::new(Self::KIND), |r, (k, v)| r.with(&format!("{k}_s"), v))
            .with("total_s", self.total())
    }

    fn from_record(r: &Record) -> Result<Self, BenchError> {
        let mut s = [0.0; 5];
        for (slot, k) in s.iter_mut().zip(COLD_STEPS) {
            *slot = r.parse(&format!("{k}_s"))?;
        }
        Ok(Self::from_steps(s))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ColdStats {
    pub trials: Vec<ColdBreakdown>,
    /// Per-step medians.
    pub median: ColdBreakdown,
}

fn median_f64(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn us(v: u64) -> f64 {
    v as f64 * 1e-6
}

/// Each trial takes a fresh lease and sandbox for one worker and makes one
/// invocation.
pub fn bench_cold(target: &Target, trials: usize) -> Result<ColdStats, BenchError> {
    if trials == 0 {
        return Err(BenchError::Usage("trials must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        let inv = target.invoker(false)?;
        let report = allocate_retrying(&inv, 64, ModeHint::WarmOk, 1)?;
        let input = inv.input(1)?;
        let output = inv.output(1)?;
        let t = Instant::now();
        check_len(inv.submit(0u16, &input, 1, &output)?.get(WaitMode::Busy), 1)?;
        let first = t.elapsed().as_secs_f64();
        inv.deallocate();
        let c = report.cold;
        out.push(ColdBreakdown {
            connect_manager: us(c.connect_us),
            lease_grant: us(c.lease_us),
            submit_code: us(c.submit_code_us),
            spawn_workers: us(c.spawn_workers_us),
            first_invocation: first,
        });
    }
    let mut med = [0.0; 5];
    for (i, m) in med.iter_mut().enumerate() {
        *m = median_f64(out.iter().map(|t| t.steps()[i]));
    }
    Ok(ColdStats {
        trials: out,
        median: ColdBreakdown::from_steps(med),
    })
}

/// Sandboxes of a released lease are torn down asynchronously; a new
/// request may briefly find the pool short.
fn allocate_retrying(
    inv: &Invoker,
    buffer: usize,
    hint: ModeHint,
    workers: u32,
) -> Result<crate::client::AllocationReport, BenchError> {
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        match inv.allocate(&demo_code(), buffer, hint, workers) {
            Err(e) if e.code() == Some(ErrorCode::InsufficientResources) && Instant::now() < deadline => {
                thread::sleep(Duration::from_millis(5));
            }
            other => return Ok(other?),
        }
    }
}

/// One point of a parallel-scaling sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelPoint {
    pub workers: usize,
    pub size: usize,
    pub rounds: usize,
    /// Median per-invocation latency in seconds.
    pub median: f64,
    /// Payload bytes per second in one direction.
    pub throughput: f64,
}

impl ToRecord for ParallelPoint {
    const KIND: &'static str = "parallel";

    fn to_record(&self) -> Record {
        Record::new(Self::KIND)
            .with("workers", self.workers)
            .with("size", self.size)
            .with("rounds", self.rounds)
            .with("median_s", self.median)
            .with("throughput_bps", self.throughput)
    }

    fn from_record(r: &Record) -> Result<Self, BenchError> {
        Ok(Self {
            workers: r.parse("workers")?,
            size: r.parse("size")?,
            rounds: r.parse("rounds")?,
            median: r.parse("median_s")?,
            throughput: r.parse("throughput_bps")?,
        })
    }
}

/// Relative spread `max / min - 1` of the medians.
pub fn median_spread(points: &[ParallelPoint]) -> f64 {
    let min = points.iter().map(|p| p.median).fold(f64::INFINITY, f64::min);
    let max = points.iter().map(|p| p.median).fold(0.0, f64::max);
    max / min - 1.0
}

/// Rounds of `n` concurrent hot echo invocations, one per worker, issued
/// from a single thread.
pub fn bench_parallel_point(target: &Target, n: usize, size: usize, rounds: usize, warmups: usize) -> Result<ParallelPoint, BenchError> {
    if n == 0 {
        return Err(BenchError::Usage("worker count must be at least 1".into()));
    }
    let inv = target.invoker(false)?;
    allocate_retrying(&inv, size, ModeHint::AlwaysHot, n as u32)?;
    let pairs: Vec<_> = (0..n)
        .map(|_| Ok((inv.input(size)?, inv.output(size.max(1))?)))
        .collect::<Result<_, ClientError>>()?;
    let mut latencies = Vec::with_capacity(n * rounds);
    let mut stamps = vec![None; n];
    let mut started = Instant::now();
    for round in 0..warmups + rounds {
        if round == warmups {
            started = Instant::now();
        }
        let mut futures = Vec::with_capacity(n);
        for (input, output) in &pairs {
            futures.push((Instant::now(), inv.submit(0u16, input, size, output)?));
        }
        stamps.iter_mut().for_each(|s| *s = None);
        let mut left = n;
        let deadline = Instant::now() + ROUND_TIMEOUT;
        while left > 0 {
            if inv.progress() == 0 {
                thread::yield_now();
            }
            for (i, (t, fut)) in futures.iter().enumerate() {
                if stamps[i].is_none() && fut.is_done() {
                    stamps[i] = Some(t.elapsed());
                    left -= 1;
                }
            }
            if Instant::now() > deadline {
                return Err(BenchError::Stack("parallel round timed out".into()));
            }
        }
        for (_, fut) in &futures {
            check_len(fut.get(WaitMode::Busy), size)?;
        }
        if round >= warmups {
            latencies.extend(stamps.iter().map(|s| s.expect("stamped").as_nanos() as u64));
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    inv.deallocate();
    Ok(ParallelPoint {
        workers: n,
        size,
        rounds,
        median: median_of(&latencies) * 1e-9,
        throughput: (n * rounds * size) as f64 / elapsed,
    })
}

pub fn bench_parallel(target: &Target, ns: &[usize], size: usize, rounds: usize, warmups: usize) -> Result<Vec<ParallelPoint>, BenchError> {
    if ns.is_empty() || ns.contains(&0) {
        return Err(BenchError::Usage("worker counts must be at least 1".into()));
    }
    ns.iter().map(|&n| bench_parallel_point(target, n, size, rounds, warmups)).collect()
}

/// Same traffic pattern as [`bench_parallel_point`] over `n` bare transport
/// connections to busy-polling echo peers.
pub fn raw_saturation(fabric: &Fabric, n: usize, size: usize, rounds: usize, warmups: usize) -> Result<f64, BenchError> {
    if n == 0 {
        return Err(BenchError::Usage("connection count must be at least 1".into()));
    }
    let domain = MemoryDomain::new();
    let cq = CompletionQueue::new();
    let links: Vec<RawLink> = (0..n)
        .map(|_| RawLink::open(fabric, &domain, &cq, size, PollMode::Busy))
        .collect::<Result<_, _>>()?;
    let mut events = Vec::new();
    let mut started = Instant::now();
    for round in 0..warmups + rounds {
        if round == warmups {
            started = Instant::now();
        }
        for (i, l) in links.iter().enumerate() {
            l.post(size, i as u32)?;
        }
        let mut left = n;
        let deadline = Instant::now() + ROUND_TIMEOUT;
        while left > 0 {
            poll(&cq, PollMode::Busy, &mut events)?;
            for ev in &events {
                match (ev.kind, ev.status) {
                    (CompletionKind::WriteReceived, CompletionStatus::Ok) => left -= 1,
                    (CompletionKind::Recv, CompletionStatus::Disconnected) => {
                        return Err(BenchError::Stack("raw peer went away".into()))
                    }
                    _ => {}
                }
            }
            if Instant::now() > deadline {
                return Err(BenchError::Stack("raw round timed out".into()));
            }
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    Ok((n * rounds * size) as f64 / elapsed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BandwidthPoint {
    pub size: usize,
    pub median: f64,
    /// `size / median` in bytes per second.
    pub throughput: f64,
}

impl ToRecord for BandwidthPoint {
    const KIND: &'static str = "bandwidth";

    fn to_record(&self) -> Record {
        Record::new(Self::KIND)
            .with("size", self.size)
            .with("median_s", self.median)
            .with("throughput_bps", self.throughput)
    }

    fn from_record(r: &Record) -> Result<Self, BenchError> {
        Ok(Self {
            size: r.parse("size")?,
            median: r.parse("median_s")?,
            throughput: r.parse("throughput_bps")?,
        })
    }
}

/// Hot echo latency over a range of payload sizes.
pub fn bench_bandwidth(target: &Target, sizes: &[usize], reps: usize, warmups: usize) -> Result<Vec<BandwidthPoint>, BenchError> {
    sizes
        .iter()
        .map(|&size| {
            let s = bench_latency(target, LatencyMode::Hot, size, reps, warmups)?;
            Ok(BandwidthPoint {
                size,
                median: s.median,
                throughput: size as f64 / s.median,
            })
        })
        .collect()
}
