//! Wire formats: the invocation ABI used on the data plane and the
//! control-plane messages exchanged with the manager and executors.
//!
//! Every layout is fixed and little-endian. A request written into a
//! worker's buffer is a 12-byte [`InvocationHeader`] followed by the raw
//! payload; the 32-bit immediate of that write carries an
//! [`InvocationImmediate`]. Results come back the same way with a
//! [`ResultImmediate`].
//!
//! Control messages travel as two-sided sends framed as
//!
//! ```text
//! magic u16 (0x7FAC) | type u8 | reserved u8 | body_len u32 | body
//! ```

use crate::transport::RemoteBufferRef;

pub const INVOCATION_HEADER_LEN: usize = 12;
pub const CONTROL_MAGIC: u16 = 0x7FAC;
pub const CONTROL_HEADER_LEN: usize = 8;

#[derive(Debug, thiserror::Error, Clone, PartialEq, Eq)]
pub enum ProtocolError {
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("bad control magic {0:#06x}")]
    BadMagic(u16),
    #[error("unknown message type {0}")]
    UnknownType(u8),
    #[error("invalid field: {0}")]
    Invariant(&'static str),
    #[error("string field is not valid UTF-8")]
    Utf8,
    #[error("{0} trailing bytes after message body")]
    TrailingBytes(usize),
    #[error("buffer too small: need {needed}, capacity {capacity}")]
    BufferTooSmall { needed: usize, capacity: usize },
}

/// Where the worker must write the result: the client's registered buffer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct InvocationHeader {
    pub result_address: u64,
    pub result_key: u32,
}

impl InvocationHeader {
    pub fn encode(&self) -> [u8; INVOCATION_HEADER_LEN] {
        let mut out = [0u8; INVOCATION_HEADER_LEN];
        out[..8].copy_from_slice(&self.result_address.to_le_bytes());
        out[8..].copy_from_slice(&self.result_key.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, ProtocolError> {
        if bytes.len() < INVOCATION_HEADER_LEN {
            return Err(ProtocolError::Truncated {
                needed: INVOCATION_HEADER_LEN,
                available: bytes.len(),
            });
        }
        Ok(Self {
            result_address: u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")),
            result_key: u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")),
        })
    }

    /// Remote window the result may be written to. The header carries no
    /// length, so the bound is enforced by the owner's registration.
    pub fn result_target(&self) -> RemoteBufferRef {
        RemoteBufferRef::new(self.result_address, self.result_key, u32::MAX)
    }
}

impl From<RemoteBufferRef> for InvocationHeader {
    fn from(r: RemoteBufferRef) -> Self {
        Self {
            result_address: r.address,
            result_key: r.rkey,
        }
    }
}

/// Writes the header into the first 12 bytes of `out`.
pub fn write_header(out: &mut [u8], header: &InvocationHeader) -> Result<(), ProtocolError> {
    if out.len() < INVOCATION_HEADER_LEN {
        return Err(ProtocolError::BufferTooSmall {
            needed: INVOCATION_HEADER_LEN,
            capacity: out.len(),
        });
    }
    out[..INVOCATION_HEADER_LEN].copy_from_slice(&header.encode());
    Ok(())
}

/// Lays out `header ++ payload` in `out` and returns the message length.
pub fn pack_request(
    header: &InvocationHeader,
    payload: &[u8],
    out: &mut [u8],
) -> Result<usize, ProtocolError> {
    let needed = INVOCATION_HEADER_LEN + payload.len();
    if out.len() < needed {
        return Err(ProtocolError::BufferTooSmall {
            needed,
            capacity: out.len(),
        });
    }
    write_header(out, header)?;
    out[INVOCATION_HEADER_LEN..needed].copy_from_slice(payload);
    Ok(needed)
}

/// Splits a received request into its header and a borrowed payload view.
pub fn unpack_request(message: &[u8]) -> Result<(InvocationHeader, &[u8]), ProtocolError> {
    let header = InvocationHeader::decode(message)?;
    Ok((header, &message[INVOCATION_HEADER_LEN..]))
}

/// Immediate of a request write: invocation id in the high half, function
/// index in the low half.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct InvocationImmediate {
    pub invocation_id: u16,
    pub function_index: u16,
}

impl InvocationImmediate {
    pub const fn pack(self) -> u32 {
        (self.invocation_id as u32) << 16 | self.function_index as u32
    }

    pub const fn unpack(raw: u32) -> Self {
        Self {
            invocation_id: (raw >> 16) as u16,
            function_index: raw as u16,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResultStatus {
    Ok,
    Rejected,
    FunctionError,
    UnknownFunction,
    OutputOverflow,
    /// Code outside the known enumeration, kept verbatim.
    Other(u16),
}

impl ResultStatus {
    pub const fn code(self) -> u16 {
        match self {
            Self::Ok => 0,
            Self::Rejected => 1,
            Self::FunctionError => 2,
            Self::UnknownFunction => 3,
            Self::OutputOverflow => 4,
            Self::Other(c) => c,
        }
    }

    pub const fn from_code(code: u16) -> Self {
        match code {
            0 => Self::Ok,
            1 => Self::Rejected,
            2 => Self::FunctionError,
            3 => Self::UnknownFunction,
            4 => Self::OutputOverflow,
            c => Self::Other(c),
        }
    }
}

/// Immediate of a result write: invocation id high, status code low.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ResultImmediate {
    pub invocation_id: u16,
    pub status: ResultStatus,
}

impl ResultImmediate {
    pub const fn pack(self) -> u32 {
        (self.invocation_id as u32) << 16 | self.status.code() as u32
    }

    pub const fn unpack(raw: u32) -> Self {
        Self {
            invocation_id: (raw >> 16) as u16,
            status: ResultStatus::from_code(raw as u16),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AllocationRequest {
    pub cores: u32,
    pub memory_mb: u32,
    pub timeout_s: u32,
    pub token: Vec<u8>,
}

impl AllocationRequest {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.cores == 0 {
            return Err(ProtocolError::Invariant("cores must be at least 1"));
        }
        if self.memory_mb == 0 {
            return Err(ProtocolError::Invariant("memory_mb must be at least 1"));
        }
        if self.timeout_s == 0 {
            return Err(ProtocolError::Invariant("timeout_s must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerSlot {
    pub address: String,
    pub worker_id: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeaseGrant {
    pub lease_id: u64,
    pub executor_id: u64,
    pub executor_endpoints: Vec<WorkerSlot>,
    /// Deadline in milliseconds since the Unix epoch.
    pub expiry_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutorDescriptor {
    pub executor_id: u64,
    pub address: String,
    pub total_cores: u32,
    pub total_memory_mb: u32,
    pub free_cores: u32,
    pub free_memory_mb: u32,
}

impl ExecutorDescriptor {
    pub fn new(address: impl Into<String>, cores: u32, memory_mb: u32) -> Self {
        Self {
            executor_id: 0,
            address: address.into(),
            total_cores: cores,
            total_memory_mb: memory_mb,
            free_cores: cores,
            free_memory_mb: memory_mb,
        }
    }

    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.free_cores > self.total_cores || self.free_memory_mb > self.total_memory_mb {
            return Err(ProtocolError::Invariant("free capacity exceeds total"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CodeKind {
    /// A platform dynamic-load object, shipped as bytes.
    CodeObject(Vec<u8>),
    /// A function library compiled into the executor, selected by name.
    BuiltinRegistry(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionSymbol {
    pub index: u16,
    pub symbol: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeSubmission {
    pub flib_id: u64,
    pub code: CodeKind,
    pub functions: Vec<FunctionSymbol>,
}

fn symbols(names: &[&str]) -> Vec<FunctionSymbol> {
    names
        .iter()
        .enumerate()
        .map(|(i, n)| FunctionSymbol {
            index: i as u16,
            symbol: n.to_string(),
        })
        .collect()
}

impl CodeSubmission {
    pub fn builtin(registry: &str, names: &[&str]) -> Self {
        Self {
            flib_id: 0,
            code: CodeKind::BuiltinRegistry(registry.to_string()),
            functions: symbols(names),
        }
    }

    /// A shared object's bytes; `names` are its exported entry symbols.
    pub fn code_object(flib_id: u64, bytes: Vec<u8>, names: &[&str]) -> Self {
        Self {
            flib_id,
            code: CodeKind::CodeObject(bytes),
            functions: symbols(names),
        }
    }

    /// Function indices must be exactly `0..n` in some order.
    pub fn validate(&self) -> Result<(), ProtocolError> {
        let mut seen = vec![false; self.functions.len()];
        for f in &self.functions {
            match seen.get_mut(f.index as usize) {
                Some(slot) if !*slot => *slot = true,
                _ => return Err(ProtocolError::Invariant("function indices not dense and unique")),
            }
        }
        Ok(())
    }

    pub fn index_of(&self, symbol: &str) -> Option<u16> {
        self.functions
            .iter()
            .find(|f| f.symbol == symbol)
            .map(|f| f.index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorkerInfo {
    pub worker_id: u32,
    pub address: String,
    pub request_buffer: RemoteBufferRef,
}

/// Executor-side cold-start timings in microseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ColdTimings {
    pub allocate_us: u64,
    pub submit_code_us: u64,
    pub spawn_workers_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TerminationReason {
    Expired,
    Released,
    Evicted,
    ExecutorDead,
    AuthRejected,
    IdleTimeout,
}

impl TerminationReason {
    const fn code(self) -> u8 {
        match self {
            Self::Expired => 0,
            Self::Released => 1,
            Self::Evicted => 2,
            Self::ExecutorDead => 3,
            Self::AuthRejected => 4,
            Self::IdleTimeout => 5,
        }
    }

    fn from_code(code: u8) -> Result<Self, ProtocolError> {
        Ok(match code {
            0 => Self::Expired,
            1 => Self::Released,
            2 => Self::Evicted,
            3 => Self::ExecutorDead,
            4 => Self::AuthRejected,
            5 => Self::IdleTimeout,
            _ => return Err(ProtocolError::Invariant("termination reason")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum ErrorCode {
    InsufficientResources = 1,
    AuthRejected = 2,
    UnknownLease = 3,
    UnknownExecutor = 4,
    DuplicateExecutor = 5,
    LeaseExpired = 6,
    SpawnFailed = 7,
    BadRequest = 8,
    UnknownClient = 9,
}

impl ErrorCode {
    fn from_code(code: u16) -> Result<Self, ProtocolError> {
        Ok(match code {
            1 => Self::InsufficientResources,
            2 => Self::AuthRejected,
            3 => Self::UnknownLease,
            4 => Self::UnknownExecutor,
            5 => Self::DuplicateExecutor,
            6 => Self::LeaseExpired,
            7 => Self::SpawnFailed,
            8 => Self::BadRequest,
            9 => Self::UnknownClient,
            _ => return Err(ProtocolError::Invariant("error code")),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ControlMessage {
    RegisterExecutor(ExecutorDescriptor),
    ExecutorRegistered {
        executor_id: u64,
    },
    DeregisterExecutor {
        executor_id: u64,
    },
    Heartbeat {
        executor_id: u64,
        free_cores: u32,
        free_memory_mb: u32,
    },
    RequestLease {
        client_id: u64,
        request: AllocationRequest,
    },
    LeaseGranted(LeaseGrant),
    ReleaseLease {
        lease_id: u64,
    },
    LeaseReleased {
        lease_id: u64,
    },
    /// Manager tells an executor about a lease placed on it.
    LeaseAssigned {
        lease_id: u64,
        client_id: u64,
        cores: u32,
        memory_mb: u32,
        expiry_ms: u64,
        billing: [RemoteBufferRef; 3],
    },
    LeaseTerminated {
        lease_id: u64,
        reason: TerminationReason,
    },
    AllocateSandbox {
        lease_id: u64,
        client_id: u64,
        hot_timeout_ms: u32,
        buffer_bytes: u32,
        code: CodeSubmission,
    },
    SandboxReady {
        lease_id: u64,
        workers: Vec<WorkerInfo>,
        timings: ColdTimings,
    },
    UsageReport {
        lease_id: u64,
        busy_ns: u64,
        hot_ns: u64,
    },
    BillingQuery {
        client_id: u64,
    },
    BillingReport {
        client_id: u64,
        t_a_milli_gbs: u64,
        t_c_ms: u64,
        t_h_ms: u64,
        cost_femto: u128,
    },
    Error {
        code: ErrorCode,
        message: String,
    },
}

impl ControlMessage {
    fn type_byte(&self) -> u8 {
        match self {
            Self::RegisterExecutor(_) => 1,
            Self::ExecutorRegistered { .. } => 2,
            Self::DeregisterExecutor { .. } => 3,
            Self::Heartbeat { .. } => 4,
            Self::RequestLease { .. } => 5,
            Self::LeaseGranted(_) => 6,
            Self::ReleaseLease { .. } => 7,
            Self::LeaseReleased { .. } => 8,
            Self::LeaseAssigned { .. } => 9,
            Self::LeaseTerminated { .. } => 10,
            Self::AllocateSandbox { .. } => 11,
            Self::SandboxReady { .. } => 12,
            Self::UsageReport { .. } => 13,
            Self::BillingQuery { .. } => 14,
            Self::BillingReport { .. } => 15,
            Self::Error { .. } => 16,
        }
    }

    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        Self::Error {
            code,
            message: message.into(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut body = Encoder::default();
        match self {
            Self::RegisterExecutor(d) => body.descriptor(d),
            Self::ExecutorRegistered { executor_id } | Self::DeregisterExecutor { executor_id } => {
                body.u64(*executor_id)
            }
            Self::Heartbeat {
                executor_id,
                free_cores,
                free_memory_mb,
            } => {
                body.u64(*executor_id);
                body.u32(*free_cores);
                body.u32(*free_memory_mb);
            }
            Self::RequestLease { client_id, request } => {
                body.u64(*client_id);
                body.u32(request.cores);
                body.u32(request.memory_mb);
                body.u32(request.timeout_s);
                body.bytes(&request.token);
            }
            Self::LeaseGranted(g) => {
                body.u64(g.lease_id);
                body.u64(g.executor_id);
                body.u64(g.expiry_ms);
                body.u32(g.executor_endpoints.len() as u32);
                for slot in &g.executor_endpoints {
                    body.str(&slot.address);
                    body.u32(slot.worker_id);
                }
            }
            Self::ReleaseLease { lease_id } | Self::LeaseReleased { lease_id } => {
                body.u64(*lease_id)
            }
            Self::LeaseAssigned {
                lease_id,
                client_id,
                cores,
                memory_mb,
                expiry_ms,
                billing,
            } => {
                body.u64(*lease_id);
                body.u64(*client_id);
                body.u32(*cores);
                body.u32(*memory_mb);
                body.u64(*expiry_ms);
                for slot in billing {
                    body.remote(slot);
                }
            }
            Self::LeaseTerminated { lease_id, reason } => {
                body.u64(*lease_id);
                body.u8(reason.code());
            }
            Self::AllocateSandbox {
                lease_id,
                client_id,
                hot_timeout_ms,
                buffer_bytes,
                code,
            } => {
                body.u64(*lease_id);
                body.u64(*client_id);
                body.u32(*hot_timeout_ms);
                body.u32(*buffer_bytes);
                body.u64(code.flib_id);
                match &code.code {
                    CodeKind::CodeObject(bytes) => {
                        body.u8(0);
                        body.bytes(bytes);
                    }
                    CodeKind::BuiltinRegistry(name) => {
                        body.u8(1);
                        body.str(name);
                    }
                }
                body.u32(code.functions.len() as u32);
                for f in &code.functions {
                    body.u16(f.index);
                    body.str(&f.symbol);
                }
            }
            Self::SandboxReady {
                lease_id,
                workers,
                timings,
            } => {
                body.u64(*lease_id);
                body.u64(timings.allocate_us);
                body.u64(timings.submit_code_us);
                body.u64(timings.spawn_workers_us);
                body.u32(workers.len() as u32);
                for w in workers {
                    body.u32(w.worker_id);
                    body.str(&w.address);
                    body.remote(&w.request_buffer);
                }
            }
            Self::UsageReport {
                lease_id,
                busy_ns,
                hot_ns,
            } => {
                body.u64(*lease_id);
                body.u64(*busy_ns);
                body.u64(*hot_ns);
            }
            Self::BillingQuery { client_id } => body.u64(*client_id),
            Self::BillingReport {
                client_id,
                t_a_milli_gbs,
                t_c_ms,
                t_h_ms,
                cost_femto,
            } => {
                body.u64(*client_id);
                body.u64(*t_a_milli_gbs);
                body.u64(*t_c_ms);
                body.u64(*t_h_ms);
                body.u128(*cost_femto);
            }
            Self::Error { code, message } => {
                body.u16(*code as u16);
                body.str(message);
            }
        }
        let body = body.0;
        let mut frame = Vec::with_capacity(CONTROL_HEADER_LEN + body.len());
        frame.extend_from_slice(&CONTROL_MAGIC.to_le_bytes());
        frame.push(self.type_byte());
        frame.push(0);
        frame.extend_from_slice(&(body.len() as u32).to_le_bytes());
        frame.extend_from_slice(&body);
        frame
    }

    pub fn decode(frame: &[u8]) -> Result<Self, ProtocolError> {
        if frame.len() < CONTROL_HEADER_LEN {
            return Err(ProtocolError::Truncated {
                needed: CONTROL_HEADER_LEN,
                available: frame.len(),
            });
        }
        let magic = u16::from_le_bytes([frame[0], frame[1]]);
        if magic != CONTROL_MAGIC {
            return Err(ProtocolError::BadMagic(magic));
        }
        let kind = frame[2];
        let body_len = u32::from_le_bytes(frame[4..8].try_into().expect("4 bytes")) as usize;
        let needed = CONTROL_HEADER_LEN + body_len;
        if frame.len() < needed {
            return Err(ProtocolError::Truncated {
                needed,
                available: frame.len(),
            });
        }
        if frame.len() > needed {
            return Err(ProtocolError::TrailingBytes(frame.len() - needed));
        }
        let mut d = Decoder(&frame[CONTROL_HEADER_LEN..]);
        let msg = match kind {
            1 => {
                let desc = d.descriptor()?;
                desc.validate()?;
                Self::RegisterExecutor(desc)
            }
            2 => Self::ExecutorRegistered {
                executor_id: d.u64()?,
            },
            3 => Self::DeregisterExecutor {
                executor_id: d.u64()?,
            },
            4 => Self::Heartbeat {
                executor_id: d.u64()?,
                free_cores: d.u32()?,
                free_memory_mb: d.u32()?,
            },
            5 => {
                let client_id = d.u64()?;
                let request = AllocationRequest {
                    cores: d.u32()?,
                    memory_mb: d.u32()?,
                    timeout_s: d.u32()?,
                    token: d.bytes()?,
                };
                request.validate()?;
                Self::RequestLease { client_id, request }
            }
            6 => {
                let lease_id = d.u64()?;
                let executor_id = d.u64()?;
                let expiry_ms = d.u64()?;
                let n = d.count()?;
                let mut executor_endpoints = Vec::with_capacity(n);
                for _ in 0..n {
                    executor_endpoints.push(WorkerSlot {
                        address: d.string()?,
                        worker_id: d.u32()?,
                    });
                }
                Self::LeaseGranted(LeaseGrant {
                    lease_id,
                    executor_id,
                    executor_endpoints,
                    expiry_ms,
                })
            }
            7 => Self::ReleaseLease { lease_id: d.u64()? },
            8 => Self::LeaseReleased { lease_id: d.u64()? },
            9 => Self::LeaseAssigned {
                lease_id: d.u64()?,
                client_id: d.u64()?,
                cores: d.u32()?,
                memory_mb: d.u32()?,
                expiry_ms: d.u64()?,
                billing: [d.remote()?, d.remote()?, d.remote()?],
            },
            10 => Self::LeaseTerminated {
                lease_id: d.u64()?,
                reason: TerminationReason::from_code(d.u8()?)?,
            },
            11 => {
                let lease_id = d.u64()?;
                let client_id = d.u64()?;
                let hot_timeout_ms = d.u32()?;
                let buffer_bytes = d.u32()?;
                let flib_id = d.u64()?;
                let code = match d.u8()? {
                    0 => CodeKind::CodeObject(d.bytes()?),
                    1 => CodeKind::BuiltinRegistry(d.string()?),
                    _ => return Err(ProtocolError::Invariant("code kind")),
                };
                let n = d.count()?;
                let mut functions = Vec::with_capacity(n);
                for _ in 0..n {
                    functions.push(FunctionSymbol {
                        index: d.u16()?,
                        symbol: d.string()?,
                    });
                }
                let code = CodeSubmission {
                    flib_id,
                    code,
                    functions,
                };
                code.validate()?;
                Self::AllocateSandbox {
                    lease_id,
                    client_id,
                    hot_timeout_ms,
                    buffer_bytes,
                    code,
                }
            }
            12 => {
                let lease_id = d.u64()?;
                let timings = ColdTimings {
                    allocate_us: d.u64()?,
                    submit_code_us: d.u64()?,
                    spawn_workers_us: d.u64()?,
                };
                let n = d.count()?;
                let mut workers = Vec::with_capacity(n);
                for _ in 0..n {
                    workers.push(WorkerInfo {
                        worker_id: d.u32()?,
                        address: d.string()?,
                        request_buffer: d.remote()?,
                    });
                }
                Self::SandboxReady {
                    lease_id,
                    workers,
                    timings,
                }
            }
            13 => Self::UsageReport {
                lease_id: d.u64()?,
                busy_ns: d.u64()?,
                hot_ns: d.u64()?,
            },
            14 => Self::BillingQuery {
                client_id: d.u64()?,
            },
            15 => Self::BillingReport {
                client_id: d.u64()?,
                t_a_milli_gbs: d.u64()?,
                t_c_ms: d.u64()?,
                t_h_ms: d.u64()?,
                cost_femto: d.u128()?,
            },
            16 => Self::Error {
                code: ErrorCode::from_code(d.u16()?)?,
                message: d.string()?,
            },
            other => return Err(ProtocolError::UnknownType(other)),
        };
        if !d.0.is_empty() {
            return Err(ProtocolError::TrailingBytes(d.0.len()));
        }
        Ok(msg)
    }
}

#[derive(Default)]
struct Encoder(Vec<u8>);

impl Encoder {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len() as u32);
        self.0.extend_from_slice(b);
    }
    fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }
    fn remote(&mut self, r: &RemoteBufferRef) {
        self.u64(r.address);
        self.u32(r.rkey);
        self.u32(r.length);
    }
    fn descriptor(&mut self, d: &ExecutorDescriptor) {
        self.u64(d.executor_id);
        self.str(&d.address);
        self.u32(d.total_cores);
        self.u32(d.total_memory_mb);
        self.u32(d.free_cores);
        self.u32(d.free_memory_mb);
    }
}

struct Decoder<'a>(&'a [u8]);

impl<'a> Decoder<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ProtocolError> {
        if self.0.len() < n {
            return Err(ProtocolError::Truncated {
                needed: n,
                available: self.0.len(),
            });
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N], ProtocolError> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }
    fn u8(&mut self) -> Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, ProtocolError> {
        self.array().map(u16::from_le_bytes)
    }
    fn u32(&mut self) -> Result<u32, ProtocolError> {
        self.array().map(u32::from_le_bytes)
    }
    fn u64(&mut self) -> Result<u64, ProtocolError> {
        self.array().map(u64::from_le_bytes)
    }
    fn u128(&mut self) -> Result<u128, ProtocolError> {
        self.array().map(u128::from_le_bytes)
    }
    /// Element count, bounded by the remaining bytes so a corrupt length
    /// cannot trigger a huge allocation.
    fn count(&mut self) -> Result<usize, ProtocolError> {
        let n = self.u32()? as usize;
        if n > self.0.len() {
            return Err(ProtocolError::Truncated {
                needed: n,
                available: self.0.len(),
            });
        }
        Ok(n)
    }
    fn bytes(&mut self) -> Result<Vec<u8>, ProtocolError> {
        let n = self.u32()? as usize;
        Ok(self.take(n)?.to_vec())
    }
    fn string(&mut self) -> Result<String, ProtocolError> {
        String::from_utf8(self.bytes()?).map_err(|_| ProtocolError::Utf8)
    }
    fn remote(&mut self) -> Result<RemoteBufferRef, ProtocolError> {
        Ok(RemoteBufferRef::new(self.u64()?, self.u32()?, self.u32()?))
    }
    fn descriptor(&mut self) -> Result<ExecutorDescriptor, ProtocolError> {
        Ok(ExecutorDescriptor {
            executor_id: self.u64()?,
            address: self.string()?,
            total_cores: self.u32()?,
            total_memory_mb: self.u32()?,
            free_cores: self.u32()?,
            free_memory_mb: self.u32()?,
        })
    }
}

/// Generators for property tests.
#[cfg(any(test, feature = "strategies"))]
pub mod strategies {
    use super::*;
    use proptest::collection::vec;
    use proptest::prelude::*;

    fn remote() -> impl Strategy<Value = RemoteBufferRef> {
        (any::<u64>(), any::<u32>(), any::<u32>()).prop_map(|(a, k, l)| RemoteBufferRef::new(a, k, l))
    }

    fn reason() -> impl Strategy<Value = TerminationReason> {
        prop_oneof![
            Just(TerminationReason::Expired),
            Just(TerminationReason::Released),
            Just(TerminationReason::Evicted),
            Just(TerminationReason::ExecutorDead),
            Just(TerminationReason::AuthRejected),
            Just(TerminationReason::IdleTimeout),
        ]
    }

    fn error_code() -> impl Strategy<Value = ErrorCode> {
        (1u16..=9).prop_map(|c| ErrorCode::from_code(c).unwrap())
    }

    fn descriptor() -> impl Strategy<Value = ExecutorDescriptor> {
        (any::<u64>(), ".{0,24}", any::<u32>(), any::<u32>(), any::<u32>(), any::<u32>()).prop_map(
            |(id, address, tc, tm, fc, fm)| ExecutorDescriptor {
                executor_id: id,
                address,
                total_cores: tc,
                total_memory_mb: tm,
                free_cores: fc.min(tc),
                free_memory_mb: fm.min(tm),
            },
        )
    }

    fn code() -> impl Strategy<Value = CodeSubmission> {
        (
            any::<u64>(),
            prop_oneof![
                vec(any::<u8>(), 0..64).prop_map(CodeKind::CodeObject),
                "[a-z]{0,12}".prop_map(CodeKind::BuiltinRegistry),
            ],
            vec("[a-z_]{1,12}", 0..6),
        )
            .prop_map(|(flib_id, code, names)| CodeSubmission {
                flib_id,
                code,
                functions: names
                    .into_iter()
                    .enumerate()
                    .rev()
                    .map(|(i, symbol)| FunctionSymbol {
                        index: i as u16,
                        symbol,
                    })
                    .collect(),
            })
    }

    pub fn control_message() -> impl Strategy<Value = ControlMessage> {
        prop_oneof![
            descriptor().prop_map(ControlMessage::RegisterExecutor),
            any::<u64>().prop_map(|executor_id| ControlMessage::ExecutorRegistered { executor_id }),
            any::<u64>().prop_map(|executor_id| ControlMessage::DeregisterExecutor { executor_id }),
            (any::<u64>(), any::<u32>(), any::<u32>()).prop_map(|(executor_id, c, m)| {
                ControlMessage::Heartbeat {
                    executor_id,
                    free_cores: c,
                    free_memory_mb: m,
                }
            }),
            (any::<u64>(), 1u32.., 1u32.., 1u32.., vec(any::<u8>(), 0..32)).prop_map(
                |(client_id, cores, memory_mb, timeout_s, token)| ControlMessage::RequestLease {
                    client_id,
                    request: AllocationRequest {
                        cores,
                        memory_mb,
                        timeout_s,
                        token,
                    },
                }
            ),
            (
                any::<u64>(),
                any::<u64>(),
                any::<u64>(),
                vec((".{0,16}", any::<u32>()), 0..8)
            )
                .prop_map(|(lease_id, executor_id, expiry_ms, eps)| {
                    ControlMessage::LeaseGranted(LeaseGrant {
                        lease_id,
                        executor_id,
                        expiry_ms,
                        executor_endpoints: eps
                            .into_iter()
                            .map(|(address, worker_id)| WorkerSlot { address, worker_id })
                            .collect(),
                    })
                }),
            any::<u64>().prop_map(|lease_id| ControlMessage::ReleaseLease { lease_id }),
            any::<u64>().prop_map(|lease_id| ControlMessage::LeaseReleased { lease_id }),
            (
                any::<u64>(),
                any::<u64>(),
                any::<u32>(),
                any::<u32>(),
                any::<u64>(),
                [remote(), remote(), remote()]
            )
                .prop_map(|(lease_id, client_id, cores, memory_mb, expiry_ms, billing)| {
                    ControlMessage::LeaseAssigned {
                        lease_id,
                        client_id,
                        cores,
                        memory_mb,
                        expiry_ms,
                        billing,
                    }
                }),
            (any::<u64>(), reason())
                .prop_map(|(lease_id, reason)| ControlMessage::LeaseTerminated { lease_id, reason }),
            (any::<u64>(), any::<u64>(), any::<u32>(), any::<u32>(), code()).prop_map(
                |(lease_id, client_id, hot_timeout_ms, buffer_bytes, code)| {
                    ControlMessage::AllocateSandbox {
                        lease_id,
                        client_id,
                        hot_timeout_ms,
                        buffer_bytes,
                        code,
                    }
                }
            ),
            (
                any::<u64>(),
                vec((any::<u32>(), ".{0,16}", remote()), 0..8),
                any::<(u64, u64, u64)>()
            )
                .prop_map(|(lease_id, ws, (a, s, p))| ControlMessage::SandboxReady {
                    lease_id,
                    workers: ws
                        .into_iter()
                        .map(|(worker_id, address, request_buffer)| WorkerInfo {
                            worker_id,
                            address,
                            request_buffer,
                        })
                        .collect(),
                    timings: ColdTimings {
                        allocate_us: a,
                        submit_code_us: s,
                        spawn_workers_us: p,
                    },
                }),
            (any::<u64>(), any::<u64>(), any::<u64>()).prop_map(|(lease_id, busy_ns, hot_ns)| {
                ControlMessage::UsageReport {
                    lease_id,
                    busy_ns,
                    hot_ns,
                }
            }),
            any::<u64>().prop_map(|client_id| ControlMessage::BillingQuery { client_id }),
            (any::<u64>(), any::<u64>(), any::<u64>(), any::<u64>(), any::<u128>()).prop_map(
                |(client_id, a, c, h, cost)| ControlMessage::BillingReport {
                    client_id,
                    t_a_milli_gbs: a,
                    t_c_ms: c,
                    t_h_ms: h,
                    cost_femto: cost,
                }
            ),
            (error_code(), ".{0,40}")
                .prop_map(|(code, message)| ControlMessage::Error { code, message }),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn allocation_request_round_trips() {
        let msg = ControlMessage::RequestLease {
            client_id: 9,
            request: AllocationRequest {
                cores: 4,
                memory_mb: 512,
                timeout_s: 30,
                token: vec![],
            },
        };
        assert_eq!(ControlMessage::decode(&msg.encode()).unwrap(), msg);
    }

    #[test]
    fn zero_cores_is_rejected_on_decode() {
        let msg = ControlMessage::RequestLease {
            client_id: 1,
            request: AllocationRequest {
                cores: 0,
                memory_mb: 512,
                timeout_s: 30,
                token: vec![],
            },
        };
        assert_eq!(
            ControlMessage::decode(&msg.encode()),
            Err(ProtocolError::Invariant("cores must be at least 1"))
        );
    }

    #[test]
    fn short_fragments_are_truncated() {
        assert!(matches!(
            InvocationHeader::decode(&[0u8; 11]),
            Err(ProtocolError::Truncated { needed: 12, available: 11 })
        ));
        let frame = ControlMessage::ReleaseLease { lease_id: 5 }.encode();
        assert!(matches!(
            ControlMessage::decode(&frame[..11]),
            Err(ProtocolError::Truncated { .. })
        ));
    }

    #[test]
    fn bad_magic_and_unknown_type() {
        let mut frame = ControlMessage::ReleaseLease { lease_id: 5 }.encode();
        frame[2] = 200;
        assert_eq!(ControlMessage::decode(&frame), Err(ProtocolError::UnknownType(200)));
        frame[0] ^= 0xFF;
        assert!(matches!(ControlMessage::decode(&frame), Err(ProtocolError::BadMagic(_))));
    }

    #[test]
    fn sparse_function_table_is_rejected() {
        let mut code = CodeSubmission::builtin("demo", &["echo", "mmm_half"]);
        code.functions[1].index = 2;
        assert!(code.validate().is_err());
        code.functions[1].index = 0;
        assert!(code.validate().is_err());
    }

    #[test]
    fn request_layout() {
        let header = InvocationHeader {
            result_address: 0x1000,
            result_key: 0xAB,
        };
        let mut out = [0u8; 64];
        let n = pack_request(&header, b"hi", &mut out).unwrap();
        assert_eq!(n, 14);
        assert_eq!(&out[..12], &[0, 0x10, 0, 0, 0, 0, 0, 0, 0xAB, 0, 0, 0]);
        let (h, payload) = unpack_request(&out[..n]).unwrap();
        assert_eq!(h, header);
        assert_eq!(payload, b"hi");
        // payload view borrows from the message
        assert_eq!(payload.as_ptr(), out[12..].as_ptr());
    }

    #[test]
    fn inline_boundary_payload() {
        let header = InvocationHeader {
            result_address: 0,
            result_key: 0,
        };
        let mut out = [0u8; 256];
        assert_eq!(pack_request(&header, &[1u8; 116], &mut out).unwrap(), 128);
        assert_eq!(pack_request(&header, &[], &mut out).unwrap(), 12);
        assert!(matches!(
            pack_request(&header, &[0u8; 245], &mut out),
            Err(ProtocolError::BufferTooSmall { .. })
        ));
    }

    #[test]
    fn immediate_layout() {
        let imm = InvocationImmediate {
            invocation_id: 1,
            function_index: 0,
        };
        assert_eq!(imm.pack(), 0x0001_0000);
        assert_eq!(InvocationImmediate::unpack(0x0001_0000), imm);
        let max = InvocationImmediate {
            invocation_id: 0xFFFF,
            function_index: 0xFFFF,
        };
        assert_eq!(max.pack(), 0xFFFF_FFFF);
        let r = ResultImmediate {
            invocation_id: 3,
            status: ResultStatus::Rejected,
        };
        assert_eq!(r.pack(), 0x0003_0001);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn immediates_are_bijective(raw: u32) {
            prop_assert_eq!(InvocationImmediate::unpack(raw).pack(), raw);
            prop_assert_eq!(ResultImmediate::unpack(raw).pack(), raw);
        }

        #[test]
        fn control_messages_round_trip(msg in strategies::control_message()) {
            prop_assert_eq!(ControlMessage::decode(&msg.encode()).unwrap(), msg);
        }

        #[test]
        fn request_frames_are_twelve_bytes_longer(payload in proptest::collection::vec(any::<u8>(), 0..512), addr: u64, key: u32) {
            let header = InvocationHeader { result_address: addr, result_key: key };
            let mut out = vec![0u8; 524];
            let n = pack_request(&header, &payload, &mut out).unwrap();
            prop_assert_eq!(n, payload.len() + 12);
            let (h, p) = unpack_request(&out[..n]).unwrap();
            prop_assert_eq!(h, header);
            prop_assert_eq!(p, &payload[..]);
        }
    }
}
