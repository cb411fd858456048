//! Completion queues.
//!
//! A queue is shared by an endpoint group (one per worker) and drained by a
//! single consumer, either by busy polling or by parking on a condition
//! variable until an event arrives.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use super::{EndpointId, TransportError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CompletionKind {
    SendDone,
    WriteDone,
    /// A two-sided message arrived, or the connection was torn down
    /// (status `Disconnected`, no payload).
    Recv,
    WriteReceived,
    AtomicDone,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CompletionStatus {
    Ok,
    RemoteAccessError,
    Disconnected,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompletionEvent {
    pub kind: CompletionKind,
    pub endpoint: EndpointId,
    pub byte_len: u32,
    pub immediate: Option<u32>,
    pub status: CompletionStatus,
    /// Message body for `Recv` events.
    pub payload: Option<Vec<u8>>,
}

impl CompletionEvent {
    pub(crate) fn new(kind: CompletionKind, endpoint: EndpointId, byte_len: u32) -> Self {
        Self {
            kind,
            endpoint,
            byte_len,
            immediate: None,
            status: CompletionStatus::Ok,
            payload: None,
        }
    }

    pub(crate) fn with_imm(mut self, imm: u32) -> Self {
        self.immediate = Some(imm);
        self
    }

    pub(crate) fn with_status(mut self, status: CompletionStatus) -> Self {
        self.status = status;
        self
    }

    pub(crate) fn disconnected(endpoint: EndpointId) -> Self {
        Self::new(CompletionKind::Recv, endpoint, 0).with_status(CompletionStatus::Disconnected)
    }

    pub fn is_ok(&self) -> bool {
        self.status == CompletionStatus::Ok
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PollMode {
    /// Return immediately, possibly with no events.
    Busy,
    /// Park until at least one event arrives or the timeout elapses.
    Blocking(Duration),
}

#[derive(Default)]
struct CqInner {
    queue: Mutex<VecDeque<CompletionEvent>>,
    ready: Condvar,
    pending: AtomicUsize,
    waiters: AtomicUsize,
    closed: AtomicBool,
}

#[derive(Clone, Default)]
pub struct CompletionQueue {
    inner: Arc<CqInner>,
}

impl std::fmt::Debug for CompletionQueue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CompletionQueue")
            .field("pending", &self.len())
            .field("closed", &self.is_closed())
            .finish()
    }
}

impl CompletionQueue {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn push(&self, event: CompletionEvent) {
        let mut q = self.inner.queue.lock();
        q.push_back(event);
        self.inner.pending.fetch_add(1, Ordering::Release);
        if self.inner.waiters.load(Ordering::Relaxed) > 0 {
            self.inner.ready.notify_one();
        }
    }

    pub fn len(&self) -> usize {
        self.inner.pending.load(Ordering::Acquire)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn close(&self) {
        let _q = self.inner.queue.lock();
        self.inner.closed.store(true, Ordering::Release);
        self.inner.ready.notify_all();
    }

    pub fn is_closed(&self) -> bool {
        self.inner.closed.load(Ordering::Acquire)
    }

    pub fn poll(&self, mode: PollMode) -> Result<Vec<CompletionEvent>, TransportError> {
        let mut out = Vec::new();
        self.poll_into(mode, &mut out)?;
        Ok(out)
    }

    /// Appends available events to `out` and returns how many were added.
    /// Remaining events are still delivered after `close`; once the queue
    /// is closed and drained every poll fails.
    pub fn poll_into(
        &self,
        mode: PollMode,
        out: &mut Vec<CompletionEvent>,
    ) -> Result<usize, TransportError> {
        if self.inner.pending.load(Ordering::Acquire) == 0 {
            match mode {
                PollMode::Busy => {
                    return if self.is_closed() {
                        Err(TransportError::QueueClosed)
                    } else {
                        Ok(0)
                    }
                }
                PollMode::Blocking(timeout) => {
                    let deadline = Instant::now() + timeout;
                    let mut q = self.inner.queue.lock();
                    while q.is_empty() {
                        if self.is_closed() {
                            return Err(TransportError::QueueClosed);
                        }
                        self.inner.waiters.fetch_add(1, Ordering::Relaxed);
                        let timed_out = self.inner.ready.wait_until(&mut q, deadline).timed_out();
                        self.inner.waiters.fetch_sub(1, Ordering::Relaxed);
                        if timed_out && q.is_empty() {
                            return if self.is_closed() {
                                Err(TransportError::QueueClosed)
                            } else {
                                Ok(0)
                            };
                        }
                    }
                    return Ok(self.drain(&mut q, out));
                }
            }
        }
        let mut q = self.inner.queue.lock();
        Ok(self.drain(&mut q, out))
    }

    fn drain(&self, q: &mut VecDeque<CompletionEvent>, out: &mut Vec<CompletionEvent>) -> usize {
        let n = q.len();
        out.extend(q.drain(..));
        self.inner.pending.fetch_sub(n, Ordering::Release);
        n
    }
}
