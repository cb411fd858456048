use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use super::{Inner, InvocationError};
use crate::transport::PollMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WaitMode {
    /// Spin on the completion queue from the calling thread.
    Busy,
    /// Sleep until the result arrives.
    Blocking,
}

pub(crate) struct Slot {
    result: Mutex<Option<Result<usize, InvocationError>>>,
    ready: Condvar,
    done: AtomicBool,
    input_in_flight: Arc<AtomicU32>,
}

impl Slot {
    pub(crate) fn new(input_in_flight: Arc<AtomicU32>) -> Self {
        input_in_flight.fetch_add(1, Ordering::AcqRel);
        Self {
            result: Mutex::new(None),
            ready: Condvar::new(),
            done: AtomicBool::new(false),
            input_in_flight,
        }
    }

    /// First completion wins; later ones are ignored.
    pub(crate) fn complete(&self, r: Result<usize, InvocationError>) -> bool {
        let mut slot = self.result.lock();
        if slot.is_some() {
            return false;
        }
        *slot = Some(r);
        self.input_in_flight.fetch_sub(1, Ordering::AcqRel);
        self.done.store(true, Ordering::Release);
        self.ready.notify_all();
        true
    }

    fn get(&self) -> Option<Result<usize, InvocationError>> {
        if !self.done.load(Ordering::Acquire) {
            return None;
        }
        self.result.lock().clone()
    }
}

/// Result of a submitted invocation: the number of bytes written into the
/// output buffer, or why there are none.
#[derive(Clone)]
pub struct InvocationFuture {
    pub(crate) id: u16,
    pub(crate) worker: usize,
    pub(crate) slot: Arc<Slot>,
    pub(crate) inner: Arc<Inner>,
}

impl std::fmt::Debug for InvocationFuture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InvocationFuture")
            .field("id", &self.id)
            .field("worker", &self.worker)
            .field("done", &self.is_done())
            .finish()
    }
}

impl InvocationFuture {
    pub fn id(&self) -> u16 {
        self.id
    }

    /// Index of the worker the invocation went to.
    pub fn worker(&self) -> usize {
        self.worker
    }

    pub fn is_done(&self) -> bool {
        self.slot.done.load(Ordering::Acquire)
    }

    pub fn try_get(&self) -> Option<Result<usize, InvocationError>> {
        self.slot.get()
    }

    pub fn get(&self, mode: WaitMode) -> Result<usize, InvocationError> {
        loop {
            if let Some(r) = self.get_timeout(mode, Duration::from_secs(3600)) {
                return r;
            }
        }
    }

    pub fn get_timeout(&self, mode: WaitMode, timeout: Duration) -> Option<Result<usize, InvocationError>> {
        let deadline = Instant::now() + timeout;
        loop {
            if let Some(r) = self.slot.get() {
                return Some(r);
            }
            if Instant::now() >= deadline {
                return None;
            }
            match mode {
                WaitMode::Busy => {
                    if self.inner.progress(PollMode::Busy) == 0 {
                        std::thread::yield_now();
                    }
                }
                WaitMode::Blocking if self.inner.has_progress_thread() => {
                    let mut r = self.slot.result.lock();
                    if r.is_none() {
                        let wait = deadline.saturating_duration_since(Instant::now()).min(Duration::from_millis(50));
                        self.slot.ready.wait_for(&mut r, wait);
                    }
                }
                WaitMode::Blocking => {
                    let wait = deadline.saturating_duration_since(Instant::now()).min(Duration::from_millis(20));
                    self.inner.progress(PollMode::Blocking(wait));
                }
            }
        }
    }
}
