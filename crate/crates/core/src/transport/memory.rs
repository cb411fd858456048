//! Registered memory: page-aligned regions addressable by remote writes.
//!
//! Every node owns one [`MemoryDomain`]. Regions are allocated inside the
//! domain's virtual address space and become remotely reachable once a
//! page-aligned window of them is registered. A registration hands out a
//! fresh `(local_key, remote_key)` pair; remote operations must present the
//! remote key and stay inside the registered window.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, AtomicU64, Ordering};
use std::sync::{Arc, Weak};

use parking_lot::{
    MappedRwLockReadGuard, MappedRwLockWriteGuard, RwLock, RwLockReadGuard, RwLockWriteGuard,
};

use super::metrics::TransportMetrics;
use super::TransportError;

/// Alignment required for every registration.
pub const PAGE_SIZE: usize = 4096;

/// First virtual address handed out by a domain. Keeps zero invalid.
const ADDRESS_BASE: u64 = 0x1000_0000;

static NEXT_DOMAIN_ID: AtomicU64 = AtomicU64::new(1);
static NEXT_REGION_ID: AtomicU64 = AtomicU64::new(1);

/// Names a remotely writable window: `(address, access key, length)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct RemoteBufferRef {
    pub address: u64,
    pub rkey: u32,
    pub length: u32,
}

impl RemoteBufferRef {
    pub const fn new(address: u64, rkey: u32, length: u32) -> Self {
        Self {
            address,
            rkey,
            length,
        }
    }

    /// Sub-window starting `offset` bytes into this one.
    pub fn slice(&self, offset: u32, length: u32) -> Option<Self> {
        let end = offset.checked_add(length)?;
        (end <= self.length).then(|| Self::new(self.address + offset as u64, self.rkey, length))
    }
}

struct RegionInner {
    id: u64,
    address: u64,
    data: RwLock<Box<[u8]>>,
}

/// A zero-initialised, page-aligned allocation owned by a domain.
#[derive(Clone)]
pub struct MemoryRegion {
    inner: Arc<RegionInner>,
}

impl std::fmt::Debug for MemoryRegion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MemoryRegion")
            .field("id", &self.inner.id)
            .field("address", &format_args!("{:#x}", self.inner.address))
            .field("len", &self.len())
            .finish()
    }
}

impl MemoryRegion {
    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn address(&self) -> u64 {
        self.inner.address
    }

    pub fn len(&self) -> usize {
        self.inner.data.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn read(&self) -> RwLockReadGuard<'_, Box<[u8]>> {
        self.inner.data.read()
    }

    pub fn write(&self) -> RwLockWriteGuard<'_, Box<[u8]>> {
        self.inner.data.write()
    }
}

struct Registration {
    region: Arc<RegionInner>,
    address: u64,
    length: usize,
}

struct DomainInner {
    id: u64,
    next_address: AtomicU64,
    next_key: AtomicU32,
    registrations: RwLock<HashMap<u32, Registration>>,
    metrics: Arc<TransportMetrics>,
}

/// Per-node registered-memory table. Cheap to clone.
#[derive(Clone)]
pub struct MemoryDomain {
    inner: Arc<DomainInner>,
}

impl std::fmt::Debug for MemoryDomain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MemoryDomain")
            .field("id", &self.inner.id)
            .field("registrations", &self.inner.registrations.read().len())
            .finish()
    }
}

impl Default for MemoryDomain {
    fn default() -> Self {
        Self::new()
    }
}

impl MemoryDomain {
    pub fn new() -> Self {
        let id = NEXT_DOMAIN_ID.fetch_add(1, Ordering::Relaxed);
        Self {
            inner: Arc::new(DomainInner {
                id,
                next_address: AtomicU64::new(ADDRESS_BASE),
                // Keys of different domains start apart so that a key from
                // one node is never accidentally valid on another in tests.
                next_key: AtomicU32::new(((id as u32) << 20) | 1),
                registrations: RwLock::new(HashMap::new()),
                metrics: Arc::new(TransportMetrics::default()),
            }),
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn metrics(&self) -> &Arc<TransportMetrics> {
        &self.inner.metrics
    }

    /// Allocates a zeroed region of at least `len` bytes at a page-aligned
    /// virtual address.
    pub fn allocate(&self, len: usize) -> MemoryRegion {
        let span = len.max(1).div_ceil(PAGE_SIZE) * PAGE_SIZE;
        let address = self
            .inner
            .next_address
            .fetch_add(span as u64 + PAGE_SIZE as u64, Ordering::Relaxed);
        MemoryRegion {
            inner: Arc::new(RegionInner {
                id: NEXT_REGION_ID.fetch_add(1, Ordering::Relaxed),
                address,
                data: RwLock::new(vec![0u8; len].into_boxed_slice()),
            }),
        }
    }

    /// Registers `[offset, offset + len)` of `region` for local and remote access.
    pub fn register(
        &self,
        region: &MemoryRegion,
        offset: usize,
        len: usize,
    ) -> Result<RegisteredBuffer, TransportError> {
        if len == 0 {
            return Err(TransportError::InvalidArgument("empty registration"));
        }
        let address = region.address() + offset as u64;
        if address % PAGE_SIZE as u64 != 0 {
            return Err(TransportError::Alignment { address });
        }
        if offset.checked_add(len).is_none_or(|end| end > region.len()) {
            return Err(TransportError::InvalidArgument(
                "registration exceeds region",
            ));
        }
        let local_key = self.fresh_key();
        let remote_key = self.fresh_key();
        self.inner.registrations.write().insert(
            remote_key,
            Registration {
                region: region.inner.clone(),
                address,
                length: len,
            },
        );
        Ok(RegisteredBuffer {
            inner: Arc::new(BufferInner {
                region: region.clone(),
                domain: Arc::downgrade(&self.inner),
                offset,
                address,
                length: len,
                local_key,
                remote_key,
            }),
        })
    }

    /// Convenience: allocate and register a whole region in one step.
    pub fn alloc_registered(&self, len: usize) -> Result<RegisteredBuffer, TransportError> {
        let region = self.allocate(len);
        self.register(&region, 0, len)
    }

    fn fresh_key(&self) -> u32 {
        self.inner.next_key.fetch_add(1, Ordering::Relaxed)
    }

    pub fn is_registered(&self, rkey: u32) -> bool {
        self.inner.registrations.read().contains_key(&rkey)
    }

    /// Runs `f` on the destination window of a remote write after checking
    /// the access key and bounds. Returns the target region id.
    pub(crate) fn with_remote_target<R>(
        &self,
        address: u64,
        rkey: u32,
        len: usize,
        f: impl FnOnce(&mut [u8]) -> R,
    ) -> Result<(u64, R), TransportError> {
        let regs = self.inner.registrations.read();
        let reg = regs.get(&rkey).ok_or(TransportError::RemoteAccess)?;
        let start = address
            .checked_sub(reg.address)
            .ok_or(TransportError::RemoteAccess)? as usize;
        if start.checked_add(len).is_none_or(|end| end > reg.length) {
            return Err(TransportError::RemoteAccess);
        }
        let region = reg.region.clone();
        drop(regs);
        let at = (address - region.address) as usize;
        let mut data = region.data.write();
        let out = f(&mut data[at..at + len]);
        Ok((region.id, out))
    }

    /// Copies `len` bytes from a local buffer into a registered window of
    /// this domain. Handles source and target sharing one region.
    pub(crate) fn remote_write_from(
        &self,
        address: u64,
        rkey: u32,
        src: &RegisteredBuffer,
        src_offset: usize,
        len: usize,
    ) -> Result<u64, TransportError> {
        let regs = self.inner.registrations.read();
        let reg = regs.get(&rkey).ok_or(TransportError::RemoteAccess)?;
        let start = address
            .checked_sub(reg.address)
            .ok_or(TransportError::RemoteAccess)? as usize;
        if start.checked_add(len).is_none_or(|end| end > reg.length) {
            return Err(TransportError::RemoteAccess);
        }
        let region = reg.region.clone();
        drop(regs);
        let at = (address - region.address) as usize;
        let from = src.inner.offset + src_offset;
        if Arc::ptr_eq(&region, &src.inner.region.inner) {
            region.data.write().copy_within(from..from + len, at);
        } else {
            let source = src.inner.region.inner.data.read();
            region.data.write()[at..at + len].copy_from_slice(&source[from..from + len]);
        }
        Ok(region.id)
    }

    /// Atomic fetch-and-add on an 8-byte aligned registered slot.
    pub(crate) fn remote_fetch_add(
        &self,
        address: u64,
        rkey: u32,
        delta: u64,
    ) -> Result<u64, TransportError> {
        if address % 8 != 0 {
            return Err(TransportError::Alignment { address });
        }
        self.with_remote_target(address, rkey, 8, |slot| {
            let prev = u64::from_le_bytes(slot[..8].try_into().expect("8-byte slot"));
            slot.copy_from_slice(&prev.wrapping_add(delta).to_le_bytes());
            prev
        })
        .map(|(_, prev)| prev)
    }
}

struct BufferInner {
    region: MemoryRegion,
    domain: Weak<DomainInner>,
    offset: usize,
    address: u64,
    length: usize,
    local_key: u32,
    remote_key: u32,
}

impl Drop for BufferInner {
    fn drop(&mut self) {
        if let Some(domain) = self.domain.upgrade() {
            domain.registrations.write().remove(&self.remote_key);
        }
    }
}

/// A registered window of a region. Deregistered when the last clone drops.
#[derive(Clone)]
pub struct RegisteredBuffer {
    inner: Arc<BufferInner>,
}

impl std::fmt::Debug for RegisteredBuffer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RegisteredBuffer")
            .field("address", &format_args!("{:#x}", self.inner.address))
            .field("length", &self.inner.length)
            .field("lkey", &self.inner.local_key)
            .field("rkey", &self.inner.remote_key)
            .finish()
    }
}

impl RegisteredBuffer {
    /// Opaque handle, unique per registration.
    pub fn id(&self) -> u32 {
        self.inner.remote_key
    }

    /// Offset of the window inside its region.
    pub fn base(&self) -> usize {
        self.inner.offset
    }

    pub fn address(&self) -> u64 {
        self.inner.address
    }

    pub fn len(&self) -> usize {
        self.inner.length
    }

    pub fn is_empty(&self) -> bool {
        self.inner.length == 0
    }

    pub fn local_key(&self) -> u32 {
        self.inner.local_key
    }

    pub fn remote_key(&self) -> u32 {
        self.inner.remote_key
    }

    pub fn region(&self) -> &MemoryRegion {
        &self.inner.region
    }

    pub fn region_id(&self) -> u64 {
        self.inner.region.id()
    }

    pub fn remote_ref(&self) -> RemoteBufferRef {
        RemoteBufferRef::new(self.inner.address, self.inner.remote_key, self.inner.length as u32)
    }

    /// Read view of the registered window.
    pub fn read(&self) -> MappedRwLockReadGuard<'_, [u8]> {
        let (start, len) = (self.inner.offset, self.inner.length);
        RwLockReadGuard::map(self.inner.region.inner.data.read(), |d| &d[start..start + len])
    }

    /// Write view of the registered window. Must not be held while an
    /// operation targeting this buffer is in flight.
    pub fn write(&self) -> MappedRwLockWriteGuard<'_, [u8]> {
        let (start, len) = (self.inner.offset, self.inner.length);
        RwLockWriteGuard::map(self.inner.region.inner.data.write(), |d| {
            &mut d[start..start + len]
        })
    }

    /// Reads a little-endian u64 at `offset` bytes into the window.
    pub fn read_u64(&self, offset: usize) -> u64 {
        let view = self.read();
        u64::from_le_bytes(view[offset..offset + 8].try_into().expect("8 bytes"))
    }
}
