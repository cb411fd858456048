//! Remote-memory transport with verbs-like semantics.
//!
//! Nodes register page-aligned memory in a [`MemoryDomain`] and talk over
//! reliable, ordered [`Endpoint`]s. Supported operations are
//! write-with-immediate into a peer's registered memory, two-sided send,
//! and remote fetch-and-add on 8-byte slots. Completions land in the
//! endpoint's [`CompletionQueue`].
//!
//! Two software backends are provided: an in-process loopback (channels and
//! shared memory) and TCP (one stream per endpoint, framed per [`wire`]).
//! Both produce the same completion events for the same operations; a
//! hardware verbs backend would slot in as a third [`Fabric`] variant.

mod cq;
mod loopback;
mod memory;
mod metrics;
mod tcp;
pub mod wire;

use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};
use std::sync::Arc;
use std::time::Duration;

pub use cq::{CompletionEvent, CompletionKind, CompletionQueue, CompletionStatus, PollMode};
pub use loopback::{LoopbackFabric, WriteTrace, WriteTraceEntry};
pub use memory::{MemoryDomain, MemoryRegion, RegisteredBuffer, RemoteBufferRef, PAGE_SIZE};
pub use metrics::{MetricsSnapshot, TransportMetrics};
pub use tcp::TcpFabric;

/// Default size under which a message counts as inlined.
pub const DEFAULT_INLINE_LIMIT: usize = 128;

pub type EndpointId = u64;

static NEXT_ENDPOINT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) fn next_endpoint_id() -> EndpointId {
    NEXT_ENDPOINT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("address {address:#x} is not suitably aligned")]
    Alignment { address: u64 },
    #[error("invalid argument: {0}")]
    InvalidArgument(&'static str),
    #[error("remote access error")]
    RemoteAccess,
    #[error("endpoint is not connected")]
    Disconnected,
    #[error("completion queue closed")]
    QueueClosed,
    #[error("connect to {addr} failed: {reason}")]
    Connect { addr: String, reason: String },
    #[error("operation timed out")]
    Timeout,
    #[error("address {0} already in use")]
    AddressInUse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EndpointState {
    Init,
    Connected,
    Closed,
}

impl EndpointState {
    fn from_u8(v: u8) -> Self {
        match v {
            0 => Self::Init,
            1 => Self::Connected,
            _ => Self::Closed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BackendKind {
    Loopback,
    Tcp,
}

impl std::fmt::Display for BackendKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Loopback => "loopback",
            Self::Tcp => "tcp",
        })
    }
}

impl std::str::FromStr for BackendKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "loopback" => Ok(Self::Loopback),
            "tcp" => Ok(Self::Tcp),
            other => Err(format!("unknown backend {other:?}")),
        }
    }
}

/// State shared between an endpoint handle and its backend machinery.
pub(crate) struct LinkCore {
    pub(crate) id: EndpointId,
    state: AtomicU8,
    pub(crate) domain: MemoryDomain,
    pub(crate) cq: CompletionQueue,
    pub(crate) inline_limit: usize,
}

impl LinkCore {
    pub(crate) fn new(domain: &MemoryDomain, cq: &CompletionQueue, inline_limit: usize) -> Self {
        Self {
            id: next_endpoint_id(),
            state: AtomicU8::new(0),
            domain: domain.clone(),
            cq: cq.clone(),
            inline_limit,
        }
    }

    pub(crate) fn state(&self) -> EndpointState {
        EndpointState::from_u8(self.state.load(Ordering::Acquire))
    }

    pub(crate) fn set_state(&self, s: EndpointState) {
        self.state.store(s as u8, Ordering::Release);
    }

    /// Moves to `Closed`; returns whether this call did the transition.
    pub(crate) fn close(&self) -> bool {
        self.state.swap(EndpointState::Closed as u8, Ordering::AcqRel) != EndpointState::Closed as u8
    }
}

enum Link {
    Loopback(loopback::LoopLink),
    Tcp(tcp::TcpLink),
}

struct EndpointShared {
    core: Arc<LinkCore>,
    link: Link,
}

impl Drop for EndpointShared {
    fn drop(&mut self) {
        self.shutdown();
    }
}

impl EndpointShared {
    fn shutdown(&self) {
        if !self.core.close() {
            return;
        }
        match &self.link {
            Link::Loopback(l) => l.disconnect(),
            Link::Tcp(t) => t.disconnect(),
        }
    }
}

/// A reliable, ordered connection to exactly one peer.
///
/// Clones share the connection; it is torn down by [`Endpoint::disconnect`]
/// or when the last clone is dropped. The peer observes teardown as a
/// `Recv` completion with status `Disconnected`.
#[derive(Clone)]
pub struct Endpoint {
    shared: Arc<EndpointShared>,
}

impl std::fmt::Debug for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Endpoint")
            .field("id", &self.id())
            .field("state", &self.state())
            .finish()
    }
}

impl Endpoint {
    fn from_parts(core: Arc<LinkCore>, link: Link) -> Self {
        Self {
            shared: Arc::new(EndpointShared { core, link }),
        }
    }

    pub fn id(&self) -> EndpointId {
        self.shared.core.id
    }

    pub fn state(&self) -> EndpointState {
        self.shared.core.state()
    }

    pub fn is_connected(&self) -> bool {
        self.state() == EndpointState::Connected
    }

    pub fn inline_limit(&self) -> usize {
        self.shared.core.inline_limit
    }

    pub fn domain(&self) -> &MemoryDomain {
        &self.shared.core.domain
    }

    pub fn completion_queue(&self) -> &CompletionQueue {
        &self.shared.core.cq
    }

    fn metrics(&self) -> &TransportMetrics {
        self.shared.core.domain.metrics()
    }

    fn ensure_connected(&self) -> Result<(), TransportError> {
        match self.state() {
            EndpointState::Connected => Ok(()),
            _ => Err(TransportError::Disconnected),
        }
    }

    /// Writes `len` bytes starting at `src_offset` of `src` into `dst` on the
    /// peer and delivers `imm` with the write.
    ///
    /// The peer gets a `WriteReceived` completion; this side later gets a
    /// `WriteDone` carrying the same immediate and the outcome.
    pub fn write_with_imm(
        &self,
        src: &RegisteredBuffer,
        src_offset: usize,
        len: usize,
        dst: RemoteBufferRef,
        imm: u32,
    ) -> Result<(), TransportError> {
        if src_offset.checked_add(len).is_none_or(|end| end > src.len()) {
            return Err(TransportError::InvalidArgument("source range outside buffer"));
        }
        let core = &self.shared.core;
        if self.ensure_connected().is_err() {
            core.cq.push(
                CompletionEvent::new(CompletionKind::WriteDone, core.id, len as u32)
                    .with_imm(imm)
                    .with_status(CompletionStatus::Disconnected),
            );
            return Err(TransportError::Disconnected);
        }
        self.metrics().record_write();
        self.metrics().record_tx(len, len <= core.inline_limit);
        if len > dst.length as usize {
            core.cq.push(
                CompletionEvent::new(CompletionKind::WriteDone, core.id, len as u32)
                    .with_imm(imm)
                    .with_status(CompletionStatus::RemoteAccessError),
            );
            return Ok(());
        }
        match &self.shared.link {
            Link::Loopback(l) => l.write_with_imm(core, src, src_offset, len, dst, imm),
            Link::Tcp(t) => t.write_with_imm(src, src_offset, len, dst, imm),
        }
    }

    /// Two-sided message; the peer receives a `Recv` completion with the bytes.
    pub fn send(&self, data: &[u8]) -> Result<(), TransportError> {
        let core = &self.shared.core;
        self.ensure_connected()?;
        self.metrics().record_send();
        self.metrics().record_tx(data.len(), data.len() <= core.inline_limit);
        match &self.shared.link {
            Link::Loopback(l) => l.send(core, data)?,
            Link::Tcp(t) => t.send(data)?,
        }
        core.cq
            .push(CompletionEvent::new(CompletionKind::SendDone, core.id, data.len() as u32));
        Ok(())
    }

    /// Atomically adds `delta` to the remote 8-byte slot and returns its
    /// previous value.
    pub fn fetch_and_add(&self, dst: RemoteBufferRef, delta: u64) -> Result<u64, TransportError> {
        if dst.address % 8 != 0 {
            return Err(TransportError::Alignment {
                address: dst.address,
            });
        }
        self.ensure_connected()?;
        let core = &self.shared.core;
        self.metrics().record_atomic();
        self.metrics().record_tx(8, true);
        let prev = match &self.shared.link {
            Link::Loopback(l) => l.fetch_and_add(dst, delta)?,
            Link::Tcp(t) => t.fetch_and_add(dst, delta)?,
        };
        core.cq
            .push(CompletionEvent::new(CompletionKind::AtomicDone, core.id, 8));
        Ok(prev)
    }

    pub fn disconnect(&self) {
        self.shared.shutdown();
    }
}

/// Accepts incoming endpoints; accepted endpoints share the listener's
/// domain and completion queue.
pub struct Listener {
    inner: ListenerKind,
}

enum ListenerKind {
    Loopback(loopback::LoopListener),
    Tcp(tcp::TcpListenerHandle),
}

impl std::fmt::Debug for Listener {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Listener")
            .field("addr", &self.local_addr())
            .finish()
    }
}

impl Listener {
    pub fn local_addr(&self) -> String {
        match &self.inner {
            ListenerKind::Loopback(l) => l.name(),
            ListenerKind::Tcp(t) => t.addr(),
        }
    }

    /// Waits up to `timeout` (forever if `None`) for a connection.
    pub fn accept(&self, timeout: Option<Duration>) -> Result<Endpoint, TransportError> {
        self.accept_then(timeout, |_| {})
    }

    /// Like [`Listener::accept`], but runs `on_accept` before any completion
    /// of the new endpoint can be delivered.
    pub fn accept_then(
        &self,
        timeout: Option<Duration>,
        on_accept: impl FnOnce(&Endpoint),
    ) -> Result<Endpoint, TransportError> {
        match &self.inner {
            ListenerKind::Loopback(l) => l.accept(timeout, on_accept),
            ListenerKind::Tcp(t) => t.accept(timeout, on_accept),
        }
    }
}

/// Backend selector. Cheap to clone; all nodes of one deployment share it.
#[derive(Clone, Debug)]
pub enum Fabric {
    Loopback(LoopbackFabric),
    Tcp(TcpFabric),
}

impl Fabric {
    pub fn loopback() -> Self {
        Self::Loopback(LoopbackFabric::new())
    }

    pub fn tcp() -> Self {
        Self::Tcp(TcpFabric::default())
    }

    pub fn for_backend(kind: BackendKind) -> Self {
        match kind {
            BackendKind::Loopback => Self::loopback(),
            BackendKind::Tcp => Self::tcp(),
        }
    }

    pub fn kind(&self) -> BackendKind {
        match self {
            Self::Loopback(_) => BackendKind::Loopback,
            Self::Tcp(_) => BackendKind::Tcp,
        }
    }

    /// Address a listener should bind when the caller has no preference.
    pub fn any_address(&self) -> &'static str {
        match self {
            Self::Loopback(_) => "",
            Self::Tcp(_) => "127.0.0.1:0",
        }
    }

    pub fn listen(
        &self,
        addr: &str,
        domain: &MemoryDomain,
        cq: &CompletionQueue,
    ) -> Result<Listener, TransportError> {
        let inner = match self {
            Self::Loopback(f) => ListenerKind::Loopback(f.listen(addr, domain, cq)?),
            Self::Tcp(f) => ListenerKind::Tcp(f.listen(addr, domain, cq)?),
        };
        Ok(Listener { inner })
    }

    pub fn connect(
        &self,
        addr: &str,
        domain: &MemoryDomain,
        cq: &CompletionQueue,
    ) -> Result<Endpoint, TransportError> {
        match self {
            Self::Loopback(f) => f.connect(addr, domain, cq),
            Self::Tcp(f) => f.connect(addr, domain, cq),
        }
    }
}
