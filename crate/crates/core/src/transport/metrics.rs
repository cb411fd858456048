use std::sync::atomic::{AtomicU64, Ordering};

/// Per-node transport counters. All counters only grow.
#[derive(Debug, Default)]
pub struct TransportMetrics {
    inlined_sends: AtomicU64,
    writes: AtomicU64,
    sends: AtomicU64,
    atomics: AtomicU64,
    bytes_tx: AtomicU64,
    bytes_rx: AtomicU64,
    messages_rx: AtomicU64,
}

/// Point-in-time copy of [`TransportMetrics`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MetricsSnapshot {
    pub inlined_sends: u64,
    pub writes: u64,
    pub sends: u64,
    pub atomics: u64,
    pub bytes_tx: u64,
    pub bytes_rx: u64,
    pub messages_rx: u64,
}

impl TransportMetrics {
    pub(crate) fn record_tx(&self, bytes: usize, inlined: bool) {
        if inlined {
            self.inlined_sends.fetch_add(1, Ordering::Relaxed);
        }
        self.bytes_tx.fetch_add(bytes as u64, Ordering::Relaxed);
    }

    pub(crate) fn record_write(&self) {
        self.writes.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn record_send(&self) {
        self.sends.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn record_atomic(&self) {
        self.atomics.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn record_rx(&self, bytes: usize) {
        self.messages_rx.fetch_add(1, Ordering::Relaxed);
        self.bytes_rx.fetch_add(bytes as u64, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> MetricsSnapshot {
        MetricsSnapshot {
            inlined_sends: self.inlined_sends.load(Ordering::Relaxed),
            writes: self.writes.load(Ordering::Relaxed),
            sends: self.sends.load(Ordering::Relaxed),
            atomics: self.atomics.load(Ordering::Relaxed),
            bytes_tx: self.bytes_tx.load(Ordering::Relaxed),
            bytes_rx: self.bytes_rx.load(Ordering::Relaxed),
            messages_rx: self.messages_rx.load(Ordering::Relaxed),
        }
    }
}
