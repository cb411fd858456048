//! TCP backend: one stream per endpoint.
//!
//! Each endpoint runs a receive thread that plays the role of the NIC:
//! incoming writes are applied straight into registered memory after the
//! key and bounds check, then acknowledged. Outgoing frames go through a
//! per-endpoint writer thread so that acknowledgements never wait behind a
//! large payload on a blocked socket.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use parking_lot::{Condvar, Mutex};

use super::wire::{ack_status, flags, FrameHeader, FrameType, HEADER_LEN};
use super::{
    CompletionEvent, CompletionKind, CompletionQueue, CompletionStatus, Endpoint, EndpointState,
    Link, LinkCore, MemoryDomain, RegisteredBuffer, RemoteBufferRef, TransportError,
    DEFAULT_INLINE_LIMIT,
};

const ATOMIC_TIMEOUT: Duration = Duration::from_secs(5);
const ACCEPT_POLL: Duration = Duration::from_millis(1);

#[derive(Debug, Clone)]
pub struct TcpFabric {
    pub inline_limit: usize,
    pub connect_timeout: Duration,
}

impl Default for TcpFabric {
    fn default() -> Self {
        Self {
            inline_limit: DEFAULT_INLINE_LIMIT,
            connect_timeout: Duration::from_secs(2),
        }
    }
}

impl TcpFabric {
    pub(crate) fn listen(
        &self,
        addr: &str,
        domain: &MemoryDomain,
        cq: &CompletionQueue,
    ) -> Result<TcpListenerHandle, TransportError> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?.to_string();
        Ok(TcpListenerHandle {
            listener,
            addr,
            domain: domain.clone(),
            cq: cq.clone(),
            inline_limit: self.inline_limit,
        })
    }

    pub(crate) fn connect(
        &self,
        addr: &str,
        domain: &MemoryDomain,
        cq: &CompletionQueue,
    ) -> Result<Endpoint, TransportError> {
        let connect_err = |reason: String| TransportError::Connect {
            addr: addr.to_string(),
            reason,
        };
        let target = addr
            .to_socket_addrs()
            .map_err(|e| connect_err(e.to_string()))?
            .next()
            .ok_or_else(|| connect_err("unresolvable".into()))?;
        let stream = TcpStream::connect_timeout(&target, self.connect_timeout)
            .map_err(|e| connect_err(e.to_string()))?;
        establish(stream, domain, cq, self.inline_limit, |_| {}).map_err(TransportError::from)
    }
}

pub(crate) struct TcpListenerHandle {
    listener: TcpListener,
    addr: String,
    domain: MemoryDomain,
    cq: CompletionQueue,
    inline_limit: usize,
}

impl TcpListenerHandle {
    pub(crate) fn addr(&self) -> String {
        self.addr.clone()
    }

    pub(crate) fn accept(
        &self,
        timeout: Option<Duration>,
        on_accept: impl FnOnce(&Endpoint),
    ) -> Result<Endpoint, TransportError> {
        let deadline = timeout.map(|t| Instant::now() + t);
        loop {
            match self.listener.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(false)?;
                    return Ok(establish(
                        stream,
                        &self.domain,
                        &self.cq,
                        self.inline_limit,
                        on_accept,
                    )?);
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if deadline.is_some_and(|d| Instant::now() >= d) {
                        return Err(TransportError::Timeout);
                    }
                    thread::sleep(ACCEPT_POLL);
                }
                Err(e) => return Err(e.into()),
            }
        }
    }
}

enum Payload {
    None,
    Owned(Vec<u8>),
    Buffer {
        buf: RegisteredBuffer,
        offset: usize,
        len: usize,
    },
}

enum Outgoing {
    Frame(FrameHeader, Payload),
    Disconnect,
}

struct TcpShared {
    stream: TcpStream,
    tx: Mutex<Sender<Outgoing>>,
    atomic_lock: Mutex<()>,
    atomic_reply: Mutex<Option<Result<u64, TransportError>>>,
    atomic_ready: Condvar,
}

impl TcpShared {
    fn enqueue(&self, msg: Outgoing) -> Result<(), TransportError> {
        self.tx
            .lock()
            .send(msg)
            .map_err(|_| TransportError::Disconnected)
    }

    fn complete_atomic(&self, result: Result<u64, TransportError>) {
        *self.atomic_reply.lock() = Some(result);
        self.atomic_ready.notify_all();
    }
}

pub(crate) struct TcpLink {
    shared: Arc<TcpShared>,
}

fn establish(
    stream: TcpStream,
    domain: &MemoryDomain,
    cq: &CompletionQueue,
    inline_limit: usize,
    on_accept: impl FnOnce(&Endpoint),
) -> io::Result<Endpoint> {
    stream.set_nodelay(true)?;
    let core = Arc::new(LinkCore::new(domain, cq, inline_limit));
    core.set_state(EndpointState::Connected);
    let (tx, rx) = mpsc::channel();
    let shared = Arc::new(TcpShared {
        stream: stream.try_clone()?,
        tx: Mutex::new(tx),
        atomic_lock: Mutex::new(()),
        atomic_reply: Mutex::new(None),
        atomic_ready: Condvar::new(),
    });
    let writer_stream = stream.try_clone()?;
    thread::Builder::new()
        .name(format!("tcp-tx-{}", core.id))
        .spawn(move || writer_loop(writer_stream, rx))?;

    let ep = Endpoint::from_parts(
        core.clone(),
        Link::Tcp(TcpLink {
            shared: shared.clone(),
        }),
    );
    on_accept(&ep);
    thread::Builder::new()
        .name(format!("tcp-rx-{}", core.id))
        .spawn(move || reader_loop(stream, core, shared))?;
    Ok(ep)
}

fn write_frame(w: &mut impl Write, header: &FrameHeader, payload: &Payload) -> io::Result<()> {
    w.write_all(&header.encode())?;
    match payload {
        Payload::None => Ok(()),
        Payload::Owned(bytes) => w.write_all(bytes),
        Payload::Buffer { buf, offset, len } => {
            let view = buf.read();
            w.write_all(&view[*offset..*offset + *len])
        }
    }
}

fn writer_loop(stream: TcpStream, rx: Receiver<Outgoing>) {
    let mut w = BufWriter::with_capacity(64 * 1024, stream);
    let handle = |msg: Outgoing, w: &mut BufWriter<TcpStream>| -> io::Result<bool> {
        match msg {
            Outgoing::Frame(h, p) => write_frame(w, &h, &p).map(|_| true),
            Outgoing::Disconnect => {
                write_frame(w, &FrameHeader::new(FrameType::Disconnect), &Payload::None)?;
                w.flush()?;
                let _ = w.get_ref().shutdown(Shutdown::Write);
                Ok(false)
            }
        }
    };
    while let Ok(msg) = rx.recv() {
        let mut keep_going = match handle(msg, &mut w) {
            Ok(k) => k,
            Err(_) => break,
        };
        while keep_going {
            match rx.try_recv() {
                Ok(next) => match handle(next, &mut w) {
                    Ok(k) => keep_going = k,
                    Err(_) => return,
                },
                Err(_) => break,
            }
        }
        if !keep_going || w.flush().is_err() {
            break;
        }
    }
}

fn discard(r: &mut impl Read, len: usize) -> io::Result<()> {
    let copied = io::copy(&mut r.take(len as u64), &mut io::sink())?;
    if copied as usize != len {
        return Err(io::ErrorKind::UnexpectedEof.into());
    }
    Ok(())
}

fn reader_loop(stream: TcpStream, core: Arc<LinkCore>, shared: Arc<TcpShared>) {
    let mut r = BufReader::with_capacity(64 * 1024, stream);
    let mut raw = [0u8; HEADER_LEN];
    let _ = (|| -> io::Result<()> {
        loop {
            r.read_exact(&mut raw)?;
            let h = FrameHeader::decode(&raw)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
            let len = h.len as usize;
            match h.kind {
                FrameType::WriteImm if h.flags & flags::ACK != 0 => {
                    let status = if h.rkey == ack_status::OK {
                        CompletionStatus::Ok
                    } else {
                        CompletionStatus::RemoteAccessError
                    };
                    core.cq.push(
                        CompletionEvent::new(CompletionKind::WriteDone, core.id, h.dst_addr as u32)
                            .with_imm(h.imm)
                            .with_status(status),
                    );
                }
                FrameType::WriteImm => {
                    let applied = core
                        .domain
                        .with_remote_target(h.dst_addr, h.rkey, len, |dst| r.read_exact(dst));
                    let status = match applied {
                        Ok((_, Ok(()))) => {
                            core.domain.metrics().record_rx(len);
                            core.cq.push(
                                CompletionEvent::new(
                                    CompletionKind::WriteReceived,
                                    core.id,
                                    h.len,
                                )
                                .with_imm(h.imm),
                            );
                            ack_status::OK
                        }
                        Ok((_, Err(e))) => return Err(e),
                        Err(_) => {
                            discard(&mut r, len)?;
                            ack_status::REMOTE_ACCESS
                        }
                    };
                    let mut ack = FrameHeader::new(FrameType::WriteImm);
                    ack.flags = flags::ACK;
                    ack.dst_addr = h.len as u64;
                    ack.rkey = status;
                    ack.imm = h.imm;
                    if shared.enqueue(Outgoing::Frame(ack, Payload::None)).is_err() {
                        return Ok(());
                    }
                }
                FrameType::Send => {
                    let mut body = vec![0u8; len];
                    r.read_exact(&mut body)?;
                    core.domain.metrics().record_rx(len);
                    let mut ev = CompletionEvent::new(CompletionKind::Recv, core.id, h.len);
                    ev.payload = Some(body);
                    core.cq.push(ev);
                }
                FrameType::AtomicFaa => {
                    let mut delta = [0u8; 8];
                    r.read_exact(&mut delta)?;
                    discard(&mut r, len.saturating_sub(8))?;
                    core.domain.metrics().record_rx(8);
                    let mut reply = FrameHeader::new(FrameType::AtomicReply);
                    reply.len = 8;
                    let prev = match core.domain.remote_fetch_add(
                        h.dst_addr,
                        h.rkey,
                        u64::from_le_bytes(delta),
                    ) {
                        Ok(prev) => prev,
                        Err(_) => {
                            reply.flags = flags::ACCESS_ERROR;
                            0
                        }
                    };
                    let payload = Payload::Owned(prev.to_le_bytes().to_vec());
                    if shared.enqueue(Outgoing::Frame(reply, payload)).is_err() {
                        return Ok(());
                    }
                }
                FrameType::AtomicReply => {
                    let mut prev = [0u8; 8];
                    r.read_exact(&mut prev)?;
                    discard(&mut r, len.saturating_sub(8))?;
                    shared.complete_atomic(if h.flags & flags::ACCESS_ERROR != 0 {
                        Err(TransportError::RemoteAccess)
                    } else {
                        Ok(u64::from_le_bytes(prev))
                    });
                }
                FrameType::Disconnect => return Ok(()),
            }
        }
    })();
    shared.complete_atomic(Err(TransportError::Disconnected));
    if core.close() {
        core.cq.push(CompletionEvent::disconnected(core.id));
    }
    let _ = shared.stream.shutdown(Shutdown::Both);
}

impl TcpLink {
    pub(crate) fn write_with_imm(
        &self,
        src: &RegisteredBuffer,
        src_offset: usize,
        len: usize,
        dst: RemoteBufferRef,
        imm: u32,
    ) -> Result<(), TransportError> {
        let mut h = FrameHeader::new(FrameType::WriteImm);
        h.dst_addr = dst.address;
        h.rkey = dst.rkey;
        h.imm = imm;
        h.len = len as u32;
        self.shared.enqueue(Outgoing::Frame(
            h,
            Payload::Buffer {
                buf: src.clone(),
                offset: src_offset,
                len,
            },
        ))
    }

    pub(crate) fn send(&self, data: &[u8]) -> Result<(), TransportError> {
        let mut h = FrameHeader::new(FrameType::Send);
        h.len = data.len() as u32;
        self.shared
            .enqueue(Outgoing::Frame(h, Payload::Owned(data.to_vec())))
    }

    pub(crate) fn fetch_and_add(
        &self,
        dst: RemoteBufferRef,
        delta: u64,
    ) -> Result<u64, TransportError> {
        let _one_at_a_time = self.shared.atomic_lock.lock();
        *self.shared.atomic_reply.lock() = None;
        let mut h = FrameHeader::new(FrameType::AtomicFaa);
        h.dst_addr = dst.address;
        h.rkey = dst.rkey;
        h.len = 8;
        self.shared.enqueue(Outgoing::Frame(
            h,
            Payload::Owned(delta.to_le_bytes().to_vec()),
        ))?;
        let deadline = Instant::now() + ATOMIC_TIMEOUT;
        let mut reply = self.shared.atomic_reply.lock();
        loop {
            if let Some(result) = reply.take() {
                return result;
            }
            if self
                .shared
                .atomic_ready
                .wait_until(&mut reply, deadline)
                .timed_out()
            {
                return reply.take().unwrap_or(Err(TransportError::Timeout));
            }
        }
    }

    pub(crate) fn disconnect(&self) {
        if self.shared.enqueue(Outgoing::Disconnect).is_err() {
            let _ = self.shared.stream.shutdown(Shutdown::Both);
        }
    }
}
