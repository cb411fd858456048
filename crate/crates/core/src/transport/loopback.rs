//! In-process backend. Remote writes are performed synchronously by the
//! issuing thread directly into the peer's registered memory.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, OnceLock, Weak};
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use super::{
    CompletionEvent, CompletionKind, CompletionQueue, CompletionStatus, Endpoint, EndpointState,
    Link, LinkCore, MemoryDomain, RegisteredBuffer, RemoteBufferRef, TransportError,
    DEFAULT_INLINE_LIMIT,
};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);

/// One recorded remote write: which region the bytes came from and which
/// region they landed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteTraceEntry {
    pub src_region: u64,
    pub dst_region: u64,
    pub len: usize,
}

/// Buffer-identity instrumentation for zero-copy assertions.
#[derive(Debug, Default)]
pub struct WriteTrace {
    entries: Mutex<Vec<WriteTraceEntry>>,
}

impl WriteTrace {
    pub fn entries(&self) -> Vec<WriteTraceEntry> {
        self.entries.lock().clone()
    }

    pub fn clear(&self) {
        self.entries.lock().clear();
    }
}

struct FabricInner {
    listeners: Mutex<HashMap<String, Arc<ListenerShared>>>,
    next_name: AtomicU64,
    inline_limit: usize,
    trace: OnceLock<Arc<WriteTrace>>,
}

#[derive(Clone)]
pub struct LoopbackFabric {
    inner: Arc<FabricInner>,
}

impl std::fmt::Debug for LoopbackFabric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LoopbackFabric")
            .field("listeners", &self.inner.listeners.lock().len())
            .finish()
    }
}

impl Default for LoopbackFabric {
    fn default() -> Self {
        Self::new()
    }
}

impl LoopbackFabric {
    pub fn new() -> Self {
        Self::with_inline_limit(DEFAULT_INLINE_LIMIT)
    }

    pub fn with_inline_limit(inline_limit: usize) -> Self {
        Self {
            inner: Arc::new(FabricInner {
                listeners: Mutex::new(HashMap::new()),
                next_name: AtomicU64::new(1),
                inline_limit,
                trace: OnceLock::new(),
            }),
        }
    }

    /// Starts recording source/destination regions of every write.
    pub fn enable_trace(&self) -> Arc<WriteTrace> {
        self.inner.trace.get_or_init(Default::default).clone()
    }

    pub(crate) fn listen(
        &self,
        addr: &str,
        domain: &MemoryDomain,
        cq: &CompletionQueue,
    ) -> Result<LoopListener, TransportError> {
        let name = if addr.is_empty() || addr == "*" {
            format!(
                "loop-{}",
                self.inner.next_name.fetch_add(1, Ordering::Relaxed)
            )
        } else {
            addr.to_string()
        };
        let mut listeners = self.inner.listeners.lock();
        if listeners.contains_key(&name) {
            return Err(TransportError::AddressInUse(name));
        }
        let shared = Arc::new(ListenerShared {
            name: name.clone(),
            domain: domain.clone(),
            cq: cq.clone(),
            backlog: Mutex::new(VecDeque::new()),
            arrived: Condvar::new(),
        });
        listeners.insert(name, shared.clone());
        Ok(LoopListener {
            shared,
            fabric: self.inner.clone(),
        })
    }

    pub(crate) fn connect(
        &self,
        addr: &str,
        domain: &MemoryDomain,
        cq: &CompletionQueue,
    ) -> Result<Endpoint, TransportError> {
        let listener = self
            .inner
            .listeners
            .lock()
            .get(addr)
            .cloned()
            .ok_or_else(|| TransportError::Connect {
                addr: addr.to_string(),
                reason: "no listener".into(),
            })?;
        let core = Arc::new(LinkCore::new(domain, cq, self.inner.inline_limit));
        let pending = Arc::new(PendingConn {
            client: core.clone(),
            result: Mutex::new(None),
            done: Condvar::new(),
        });
        listener.backlog.lock().push_back(pending.clone());
        listener.arrived.notify_one();

        let deadline = Instant::now() + CONNECT_TIMEOUT;
        let mut result = pending.result.lock();
        while result.is_none() {
            if pending.done.wait_until(&mut result, deadline).timed_out() && result.is_none() {
                drop(result);
                listener
                    .backlog
                    .lock()
                    .retain(|p| !Arc::ptr_eq(p, &pending));
                return Err(TransportError::Connect {
                    addr: addr.to_string(),
                    reason: "accept timed out".into(),
                });
            }
        }
        let peer = result.take().expect("checked above");
        let link = LoopLink {
            peer: OnceLock::from(peer),
            fabric: self.inner.clone(),
        };
        Ok(Endpoint::from_parts(core, Link::Loopback(link)))
    }
}

struct PendingConn {
    client: Arc<LinkCore>,
    result: Mutex<Option<Weak<LinkCore>>>,
    done: Condvar,
}

struct ListenerShared {
    name: String,
    domain: MemoryDomain,
    cq: CompletionQueue,
    backlog: Mutex<VecDeque<Arc<PendingConn>>>,
    arrived: Condvar,
}

pub(crate) struct LoopListener {
    shared: Arc<ListenerShared>,
    fabric: Arc<FabricInner>,
}

impl Drop for LoopListener {
    fn drop(&mut self) {
        self.fabric.listeners.lock().remove(&self.shared.name);
    }
}

impl LoopListener {
    pub(crate) fn name(&self) -> String {
        self.shared.name.clone()
    }

    pub(crate) fn accept(
        &self,
        timeout: Option<Duration>,
        on_accept: impl FnOnce(&Endpoint),
    ) -> Result<Endpoint, TransportError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        let pending = {
            let mut backlog = self.shared.backlog.lock();
            loop {
                if let Some(p) = backlog.pop_front() {
                    break p;
                }
                match deadline {
                    Some(d) => {
                        if self.shared.arrived.wait_until(&mut backlog, d).timed_out()
                            && backlog.is_empty()
                        {
                            return Err(TransportError::Timeout);
                        }
                    }
                    None => self.shared.arrived.wait(&mut backlog),
                }
            }
        };
        let core = Arc::new(LinkCore::new(
            &self.shared.domain,
            &self.shared.cq,
            self.fabric.inline_limit,
        ));
        let link = LoopLink {
            peer: OnceLock::from(Arc::downgrade(&pending.client)),
            fabric: self.fabric.clone(),
        };
        core.set_state(EndpointState::Connected);
        pending.client.set_state(EndpointState::Connected);
        let ep = Endpoint::from_parts(core.clone(), Link::Loopback(link));
        on_accept(&ep);
        *pending.result.lock() = Some(Arc::downgrade(&core));
        pending.done.notify_one();
        Ok(ep)
    }
}

pub(crate) struct LoopLink {
    peer: OnceLock<Weak<LinkCore>>,
    fabric: Arc<FabricInner>,
}

impl LoopLink {
    fn live_peer(&self) -> Option<Arc<LinkCore>> {
        self.peer
            .get()
            .and_then(Weak::upgrade)
            .filter(|p| p.state() == EndpointState::Connected)
    }

    pub(crate) fn write_with_imm(
        &self,
        core: &LinkCore,
        src: &RegisteredBuffer,
        src_offset: usize,
        len: usize,
        dst: RemoteBufferRef,
        imm: u32,
    ) -> Result<(), TransportError> {
        let done = CompletionEvent::new(CompletionKind::WriteDone, core.id, len as u32).with_imm(imm);
        let Some(peer) = self.live_peer() else {
            core.cq.push(done.with_status(CompletionStatus::Disconnected));
            return Err(TransportError::Disconnected);
        };
        match peer
            .domain
            .remote_write_from(dst.address, dst.rkey, src, src_offset, len)
        {
            Ok(dst_region) => {
                if let Some(trace) = self.fabric.trace.get() {
                    trace.entries.lock().push(WriteTraceEntry {
                        src_region: src.region_id(),
                        dst_region,
                        len,
                    });
                }
                peer.domain.metrics().record_rx(len);
                peer.cq.push(
                    CompletionEvent::new(CompletionKind::WriteReceived, peer.id, len as u32)
                        .with_imm(imm),
                );
                core.cq.push(done);
            }
            Err(_) => core
                .cq
                .push(done.with_status(CompletionStatus::RemoteAccessError)),
        }
        Ok(())
    }

    pub(crate) fn send(&self, _core: &LinkCore, data: &[u8]) -> Result<(), TransportError> {
        let peer = self.live_peer().ok_or(TransportError::Disconnected)?;
        peer.domain.metrics().record_rx(data.len());
        let mut ev = CompletionEvent::new(CompletionKind::Recv, peer.id, data.len() as u32);
        ev.payload = Some(data.to_vec());
        peer.cq.push(ev);
        Ok(())
    }

    pub(crate) fn fetch_and_add(
        &self,
        dst: RemoteBufferRef,
        delta: u64,
    ) -> Result<u64, TransportError> {
        let peer = self.live_peer().ok_or(TransportError::Disconnected)?;
        peer.domain.metrics().record_rx(8);
        peer.domain.remote_fetch_add(dst.address, dst.rkey, delta)
    }

    pub(crate) fn disconnect(&self) {
        if let Some(peer) = self.peer.get().and_then(Weak::upgrade) {
            if peer.close() {
                peer.cq.push(CompletionEvent::disconnected(peer.id));
            }
        }
    }
}
