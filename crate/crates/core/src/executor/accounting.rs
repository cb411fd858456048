use std::time::Instant;

use crate::transport::RemoteBufferRef;

const NS_PER_MS: u64 = 1_000_000;

/// Fixed-point milli-GB-seconds for `memory_mb` held for `ns` nanoseconds.
pub fn milli_gb_seconds(memory_mb: u64, ns: u128) -> u64 {
    (memory_mb as u128 * ns / (1024 * NS_PER_MS as u128)) as u64
}

/// Usage of one lease on this executor and what has already reached the
/// manager's ledger.
///
/// Local totals only grow; each flush pushes `floor(total) - flushed` so a
/// failed flush simply leaves the difference for the next one.
#[derive(Debug, Clone)]
pub struct LeaseAccount {
    pub memory_mb: u64,
    pub billing: [RemoteBufferRef; 3],
    mb_ns: u128,
    clock: Option<Instant>,
    busy_ns: u64,
    hot_ns: u64,
    flushed: [u64; 3],
}

impl LeaseAccount {
    pub fn new(memory_mb: u32, billing: [RemoteBufferRef; 3]) -> Self {
        Self {
            memory_mb: memory_mb as u64,
            billing,
            mb_ns: 0,
            clock: None,
            busy_ns: 0,
            hot_ns: 0,
            flushed: [0; 3],
        }
    }

    /// Starts charging allocation time.
    pub fn start(&mut self, now: Instant) {
        if self.clock.is_none() {
            self.clock = Some(now);
        }
    }

    pub fn tick(&mut self, now: Instant) {
        if let Some(since) = self.clock {
            let dt = now.saturating_duration_since(since).as_nanos();
            self.mb_ns += self.memory_mb as u128 * dt;
            self.clock = Some(now.max(since));
        }
    }

    pub fn stop(&mut self, now: Instant) {
        self.tick(now);
        self.clock = None;
    }

    /// Cumulative execution and hot-polling time reported by the sandbox.
    pub fn observe(&mut self, busy_ns: u64, hot_ns: u64) {
        self.busy_ns = self.busy_ns.max(busy_ns);
        self.hot_ns = self.hot_ns.max(hot_ns);
    }

    pub fn add_alloc_ns(&mut self, ns: u128) {
        self.mb_ns += self.memory_mb as u128 * ns;
    }

    /// Whole units accrued so far: `[t_a milli-GB-s, t_c ms, t_h ms]`.
    pub fn totals(&self) -> [u64; 3] {
        [
            (self.mb_ns / (1024 * NS_PER_MS as u128)) as u64,
            self.busy_ns / NS_PER_MS,
            self.hot_ns / NS_PER_MS,
        ]
    }

    pub fn pending(&self) -> [u64; 3] {
        let t = self.totals();
        std::array::from_fn(|i| t[i] - self.flushed[i])
    }

    pub fn flushed(&self) -> [u64; 3] {
        self.flushed
    }

    pub fn mark_flushed(&mut self, slot: usize, delta: u64) {
        self.flushed[slot] += delta;
    }

    /// Pushes pending deltas with `faa`; stops at the first failure.
    /// Returns whether everything pending was delivered.
    pub fn flush_with<E>(&mut self, mut faa: impl FnMut(RemoteBufferRef, u64) -> Result<u64, E>) -> Result<(), E> {
        let pending = self.pending();
        for (slot, delta) in pending.into_iter().enumerate() {
            if delta == 0 {
                continue;
            }
            faa(self.billing[slot], delta)?;
            self.mark_flushed(slot, delta);
        }
        Ok(())
    }
}
