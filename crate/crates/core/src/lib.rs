//! Lease-based serverless functions over a remote-memory transport.
//!
//! Clients obtain a [`manager`] lease once, then invoke functions on spot
//! [`executor`] workers by writing requests straight into worker memory
//! through the [`transport`]. Workers answer by writing results into the
//! client's registered buffers, so the resource manager never sits on the
//! invocation path.
//!
//! * [`transport`]: registered memory, endpoints, completion queues; loopback and TCP backends.
//! * [`protocol`]: invocation ABI and control-plane messages.
//! * [`manager`]: executor registry, leases, heartbeats, billing ledger.
//! * [`executor`]: spot-executor daemon, sandboxes and hot/warm workers.
//! * [`client`]: invoker SDK with futures and failover.
//! * [`functions`]: built-in function library.
//! * [`offload`]: analytical offload model.
//! * [`bench`]: measurement harness.

pub mod bench;
pub mod client;
pub mod executor;
pub mod functions;
pub mod manager;
pub mod offload;
pub mod protocol;
pub mod transport;

pub use client::{InputBuffer, InvocationFuture, Invoker, InvokerConfig, OutputBuffer};
pub use protocol::{InvocationHeader, InvocationImmediate, ResultImmediate, ResultStatus};
pub use transport::{BackendKind, Fabric, MemoryDomain, RemoteBufferRef};

/// Milliseconds since the Unix epoch.
pub fn unix_time_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}
