//! Neighbor-to-neighbor message delivery with round barriers.
//!
//! An endpoint buffers everything that arrives early, so `recv_round` only
//! returns once every listed neighbor's message for the requested
//! `(kind, time_step)` is in, whatever the interleaving across streams.

use std::collections::{BTreeMap, HashMap};
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use super::wire::{self, DecodeError, MAX_FRAME};
use super::{MessageKind, ProtocolMessage};

pub const DEFAULT_ROUND_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("peer {0} disconnected")]
    PeerDisconnected(usize),
    #[error("agent {0} is not a known peer")]
    UnknownPeer(usize),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error("round {kind:?}@{time_step} timed out waiting for {missing:?}")]
    RoundTimeout {
        kind: MessageKind,
        time_step: u64,
        missing: Vec<usize>,
    },
    #[error("stream ({sender}, {kind:?}) went from step {last} to {got}")]
    NonMonotone {
        sender: usize,
        kind: MessageKind,
        last: u64,
        got: u64,
    },
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

pub trait Endpoint: Send {
    fn id(&self) -> usize;

    fn send(&mut self, to: usize, msg: &ProtocolMessage) -> Result<(), TransportError>;

    /// Blocks until the `(kind, time_step)` message of every agent in `from`
    /// has arrived; returned in the order of `from`.
    fn recv_round(
        &mut self,
        kind: MessageKind,
        time_step: u64,
        from: &[usize],
    ) -> Result<Vec<ProtocolMessage>, TransportError>;

    fn broadcast(&mut self, to: &[usize], msg: &ProtocolMessage) -> Result<(), TransportError> {
        for &j in to {
            self.send(j, msg)?;
        }
        Ok(())
    }
}

enum Incoming {
    Message(ProtocolMessage),
    Failed(DecodeError),
    Closed(usize),
}

/// Receive side shared by both transports.
struct Inbox {
    rx: Receiver<Incoming>,
    pending: Vec<ProtocolMessage>,
    last_seen: HashMap<(usize, MessageKind), u64>,
    closed: Vec<usize>,
    timeout: Duration,
}

impl Inbox {
    fn new(rx: Receiver<Incoming>, timeout: Duration) -> Self {
        Self {
            rx,
            pending: Vec::new(),
            last_seen: HashMap::new(),
            closed: Vec::new(),
            timeout,
        }
    }

    fn accept(&mut self, msg: ProtocolMessage) -> Result<(), TransportError> {
        let key = (msg.sender, msg.kind);
        if let Some(&last) = self.last_seen.get(&key) {
            if msg.time_step <= last {
                return Err(TransportError::NonMonotone {
                    sender: msg.sender,
                    kind: msg.kind,
                    last,
                    got: msg.time_step,
                });
            }
        }
        self.last_seen.insert(key, msg.time_step);
        self.pending.push(msg);
        Ok(())
    }

    fn recv_round(
        &mut self,
        kind: MessageKind,
        time_step: u64,
        from: &[usize],
    ) -> Result<Vec<ProtocolMessage>, TransportError> {
        let deadline = Instant::now() + self.timeout;
        let mut slots: Vec<Option<ProtocolMessage>> = vec![None; from.len()];
        loop {
            let mut i = 0;
            while i < self.pending.len() {
                let m = &self.pending[i];
                let slot = (m.kind == kind && m.time_step == time_step)
                    .then(|| from.iter().position(|&s| s == m.sender))
                    .flatten();
                match slot {
                    Some(p) if slots[p].is_none() => slots[p] = Some(self.pending.remove(i)),
                    _ => i += 1,
                }
            }
            let missing: Vec<usize> = from
                .iter()
                .zip(&slots)
                .filter(|(_, s)| s.is_none())
                .map(|(j, _)| *j)
                .collect();
            if missing.is_empty() {
                return Ok(slots.into_iter().map(|s| s.expect("filled")).collect());
            }
            if let Some(j) = missing.iter().find(|j| self.closed.contains(j)) {
                return Err(TransportError::PeerDisconnected(*j));
            }
            let now = Instant::now();
            if now >= deadline {
                return Err(TransportError::RoundTimeout {
                    kind,
                    time_step,
                    missing,
                });
            }
            match self.rx.recv_timeout(deadline - now) {
                Ok(Incoming::Message(m)) => self.accept(m)?,
                Ok(Incoming::Failed(e)) => return Err(e.into()),
                Ok(Incoming::Closed(j)) => self.closed.push(j),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(TransportError::PeerDisconnected(missing[0]));
                }
            }
        }
    }
}

/// Loss-free in-memory endpoint backed by channels.
pub struct InProcEndpoint {
    id: usize,
    peers: BTreeMap<usize, Sender<Incoming>>,
    inbox: Inbox,
}

/// Fully wired endpoints for the given agents; every agent may reach every
/// other one, neighbor filtering is left to the caller.
pub fn inproc_mesh(ids: &[usize], timeout: Duration) -> Vec<InProcEndpoint> {
    let channels: Vec<(Sender<Incoming>, Receiver<Incoming>)> =
        ids.iter().map(|_| mpsc::channel()).collect();
    let senders: BTreeMap<usize, Sender<Incoming>> = ids
        .iter()
        .zip(&channels)
        .map(|(&id, (tx, _))| (id, tx.clone()))
        .collect();
    ids.iter()
        .zip(channels)
        .map(|(&id, (_, rx))| InProcEndpoint {
            id,
            peers: senders
                .iter()
                .filter(|(j, _)| **j != id)
                .map(|(j, s)| (*j, s.clone()))
                .collect(),
            inbox: Inbox::new(rx, timeout),
        })
        .collect()
}

impl Endpoint for InProcEndpoint {
    fn id(&self) -> usize {
        self.id
    }

    fn send(&mut self, to: usize, msg: &ProtocolMessage) -> Result<(), TransportError> {
        let tx = self.peers.get(&to).ok_or(TransportError::UnknownPeer(to))?;
        tx.send(Incoming::Message(msg.clone()))
            .map_err(|_| TransportError::PeerDisconnected(to))
    }

    fn recv_round(
        &mut self,
        kind: MessageKind,
        time_step: u64,
        from: &[usize],
    ) -> Result<Vec<ProtocolMessage>, TransportError> {
        self.inbox.recv_round(kind, time_step, from)
    }
}

/// Reconnect schedule for outbound TCP links.
#[derive(Debug, Clone, Copy)]
pub struct Backoff {
    pub initial: Duration,
    pub max: Duration,
    pub give_up_after: Duration,
}

impl Default for Backoff {
    fn default() -> Self {
        Self {
            initial: Duration::from_millis(10),
            max: Duration::from_millis(500),
            give_up_after: Duration::from_secs(10),
        }
    }
}

/// TCP endpoint: one listening socket, one outbound stream per peer, one
/// reader thread per inbound stream.
pub struct TcpEndpoint {
    id: usize,
    addr: SocketAddr,
    out: BTreeMap<usize, TcpStream>,
    inbox: Inbox,
    tx: Sender<Incoming>,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
}

fn read_frame(stream: &mut TcpStream) -> io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match stream.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let n = u32::from_be_bytes(len);
    if n > MAX_FRAME {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("frame of {n} bytes"),
        ));
    }
    let mut body = vec![0u8; n as usize];
    stream.read_exact(&mut body)?;
    Ok(Some(body))
}

fn reader_loop(mut stream: TcpStream, tx: Sender<Incoming>) {
    let mut peer = None;
    loop {
        let item = match read_frame(&mut stream) {
            Ok(Some(body)) => match wire::decode_body(&body) {
                Ok(m) => {
                    peer = Some(m.sender);
                    Incoming::Message(m)
                }
                Err(e) => Incoming::Failed(e),
            },
            Ok(None) | Err(_) => {
                if let Some(j) = peer {
                    let _ = tx.send(Incoming::Closed(j));
                }
                return;
            }
        };
        let failed = matches!(item, Incoming::Failed(_));
        if tx.send(item).is_err() || failed {
            return;
        }
    }
}

impl TcpEndpoint {
    /// Binds the listening socket (port 0 picks a free port) and starts
    /// accepting peers.
    pub fn bind(id: usize, addr: SocketAddr, timeout: Duration) -> Result<Self, TransportError> {
        let listener = TcpListener::bind(addr)?;
        let addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let (tx, rx) = mpsc::channel();
        let stop = Arc::new(AtomicBool::new(false));
        let acceptor = {
            let tx = tx.clone();
            let stop = stop.clone();
            thread::Builder::new()
                .name(format!("accept-{id}"))
                .spawn(move || {
                    while !stop.load(Ordering::Relaxed) {
                        match listener.accept() {
                            Ok((stream, _)) => {
                                if stream.set_nonblocking(false).is_err() {
                                    continue;
                                }
                                let _ = stream.set_nodelay(true);
                                let tx = tx.clone();
                                let _ = thread::Builder::new()
                                    .name(format!("read-{id}"))
                                    .spawn(move || reader_loop(stream, tx));
                            }
                            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                                thread::sleep(Duration::from_millis(2));
                            }
                            Err(e) => {
                                log::warn!("agent {id}: accept failed: {e}");
                                thread::sleep(Duration::from_millis(20));
                            }
                        }
                    }
                })?
        };
        Ok(Self {
            id,
            addr,
            out: BTreeMap::new(),
            inbox: Inbox::new(rx, timeout),
            tx,
            stop,
            acceptor: Some(acceptor),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Opens the outbound link to every peer, retrying with exponential
    /// backoff while the peer is not listening yet.
    pub fn connect(
        &mut self,
        peers: &[(usize, SocketAddr)],
        backoff: Backoff,
    ) -> Result<(), TransportError> {
        for &(j, addr) in peers {
            let start = Instant::now();
            let mut wait = backoff.initial;
            let stream = loop {
                match TcpStream::connect(addr) {
                    Ok(s) => break s,
                    Err(e) if start.elapsed() >= backoff.give_up_after => {
                        log::warn!("agent {}: giving up on peer {j} at {addr}: {e}", self.id);
                        return Err(TransportError::PeerDisconnected(j));
                    }
                    Err(e) => {
                        log::debug!(
                            "agent {}: peer {j} not reachable yet ({e}), retrying in {wait:?}",
                            self.id
                        );
                        thread::sleep(wait);
                        wait = (wait * 2).min(backoff.max);
                    }
                }
            };
            stream.set_nodelay(true)?;
            self.out.insert(j, stream);
        }
        Ok(())
    }
}

impl Drop for TcpEndpoint {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for s in self.out.values() {
            let _ = s.shutdown(std::net::Shutdown::Both);
        }
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

impl Endpoint for TcpEndpoint {
    fn id(&self) -> usize {
        self.id
    }

    fn send(&mut self, to: usize, msg: &ProtocolMessage) -> Result<(), TransportError> {
        if to == self.id {
            // loopback skips the socket
            return self
                .tx
                .send(Incoming::Message(msg.clone()))
                .map_err(|_| TransportError::PeerDisconnected(to));
        }
        let stream = self
            .out
            .get_mut(&to)
            .ok_or(TransportError::UnknownPeer(to))?;
        stream
            .write_all(&wire::encode(msg))
            .map_err(|_| TransportError::PeerDisconnected(to))
    }

    fn recv_round(
        &mut self,
        kind: MessageKind,
        time_step: u64,
        from: &[usize],
    ) -> Result<Vec<ProtocolMessage>, TransportError> {
        self.inbox.recv_round(kind, time_step, from)
    }
}

/// Endpoints on `host` (ports from `base_port + index`, or free ports when
/// `base_port` is `None`), each connected to its neighbors.
pub fn tcp_mesh(
    ids: &[usize],
    neighbors: &BTreeMap<usize, Vec<usize>>,
    host: std::net::IpAddr,
    base_port: Option<u16>,
    timeout: Duration,
) -> Result<Vec<TcpEndpoint>, TransportError> {
    let mut eps = Vec::with_capacity(ids.len());
    for (idx, &id) in ids.iter().enumerate() {
        let port = match base_port {
            Some(p) => p.checked_add(idx as u16).ok_or_else(|| {
                io::Error::new(io::ErrorKind::InvalidInput, "port range overflow")
            })?,
            None => 0,
        };
        eps.push(TcpEndpoint::bind(id, SocketAddr::new(host, port), timeout)?);
    }
    let addrs: BTreeMap<usize, SocketAddr> = eps.iter().map(|e| (e.id, e.local_addr())).collect();
    for ep in &mut eps {
        let peers: Vec<(usize, SocketAddr)> = neighbors
            .get(&ep.id)
            .map(|ns| ns.iter().map(|j| (*j, addrs[j])).collect())
            .unwrap_or_default();
        ep.connect(&peers, Backoff::default())?;
    }
    Ok(eps)
}
