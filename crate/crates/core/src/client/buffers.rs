use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;

use parking_lot::{MappedRwLockReadGuard, MappedRwLockWriteGuard};

use crate::protocol::{write_header, InvocationHeader, INVOCATION_HEADER_LEN};
use crate::transport::{RegisteredBuffer, RemoteBufferRef};

/// Request memory: a hidden header slot followed by the user's data.
#[derive(Clone)]
pub struct InputBuffer {
    buf: RegisteredBuffer,
    in_flight: Arc<AtomicU32>,
}

impl std::fmt::Debug for InputBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("InputBuffer").field("capacity", &self.capacity()).finish()
    }
}

impl InputBuffer {
    pub(crate) fn new(buf: RegisteredBuffer) -> Self {
        Self {
            buf,
            in_flight: Arc::new(AtomicU32::new(0)),
        }
    }

    /// Usable bytes, excluding the header slot.
    pub fn capacity(&self) -> usize {
        self.buf.len() - INVOCATION_HEADER_LEN
    }

    /// Size of the registered region including the header slot.
    pub fn region_len(&self) -> usize {
        self.buf.len()
    }

    pub fn remote_key(&self) -> u32 {
        self.buf.remote_key()
    }

    pub fn registered(&self) -> &RegisteredBuffer {
        &self.buf
    }

    pub fn data(&self) -> MappedRwLockReadGuard<'_, [u8]> {
        MappedRwLockReadGuard::map(self.buf.read(), |s| &s[INVOCATION_HEADER_LEN..])
    }

    /// Mutable view of the user data. The buffer must not be changed while
    /// an invocation reading it is pending; debug builds check this.
    pub fn data_mut(&self) -> MappedRwLockWriteGuard<'_, [u8]> {
        debug_assert_eq!(
            self.in_flight.load(Ordering::Acquire),
            0,
            "input buffer modified while an invocation is pending"
        );
        MappedRwLockWriteGuard::map(self.buf.write(), |s| &mut s[INVOCATION_HEADER_LEN..])
    }

    /// Copies `bytes` to the start of the data view and returns its length.
    pub fn fill(&self, bytes: &[u8]) -> usize {
        self.data_mut()[..bytes.len()].copy_from_slice(bytes);
        bytes.len()
    }

    pub(crate) fn set_header(&self, header: &InvocationHeader) {
        write_header(&mut self.buf.write(), header).expect("region holds the header slot");
    }

    pub(crate) fn in_flight(&self) -> &Arc<AtomicU32> {
        &self.in_flight
    }
}

/// Result memory the worker writes into directly.
#[derive(Clone)]
pub struct OutputBuffer {
    buf: RegisteredBuffer,
}

impl std::fmt::Debug for OutputBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OutputBuffer").field("capacity", &self.capacity()).finish()
    }
}

impl OutputBuffer {
    pub(crate) fn new(buf: RegisteredBuffer) -> Self {
        Self { buf }
    }

    pub fn capacity(&self) -> usize {
        self.buf.len()
    }

    pub fn remote_ref(&self) -> RemoteBufferRef {
        self.buf.remote_ref()
    }

    pub fn remote_key(&self) -> u32 {
        self.buf.remote_key()
    }

    pub fn registered(&self) -> &RegisteredBuffer {
        &self.buf
    }

    pub fn data(&self) -> MappedRwLockReadGuard<'_, [u8]> {
        self.buf.read()
    }
}
