//! Cross-cluster forwarding daemon.
//!
//! A relay owns the port range of its cluster and keeps links to peer
//! relays owning disjoint ranges. A local client opens a connection with a
//! `LOCATION` hello naming the final destination; the relay routes by the
//! destination port: into its own range it proxies directly, into a peer's
//! range it forwards whole frames over the peer link as a virtual circuit.
//! Circuits are bidirectional and byte-transparent: the two endpoints see
//! exactly the frame stream they would have exchanged over a direct
//! connection, in order.
//!
//! On the peer link every forwarded frame travels as a two-frame unit:
//! a `LOCATION` header carrying the circuit key and destination, then the
//! frame itself. A header with an empty host and port 0 closes the
//! circuit.
//!
//! Scheduling prefers sending over receiving: each pump round first
//! flushes writable outbound buffers, then accepts and reads inbound data
//! only while the aggregate of pending outbound bytes stays under the
//! buffer limit. A relay under backpressure stops reading but keeps
//! writing, and resumes reading once the aggregate drops below the limit,
//! so the aggregate never exceeds the limit by more than one in-flight
//! forwarding unit.

use std::collections::{HashMap, VecDeque};
use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::codec::{encode_frame, Frame, FrameDecoder};

/// Default pending-buffer limit in bytes (3 MB).
pub const DEFAULT_BUFFER_LIMIT: usize = 3_145_728;

#[derive(Debug, Clone)]
pub struct PeerConfig {
    pub name: String,
    pub addr: String,
    /// Inclusive port range owned by this peer's cluster.
    pub range: (u16, u16),
}

#[derive(Debug, Clone)]
pub struct RelayConfig {
    pub name: String,
    /// Address the relay listens on for local clients and peer links.
    pub listen: String,
    /// Inclusive port range owned by the local cluster.
    pub local_range: (u16, u16),
    pub peers: Vec<PeerConfig>,
    pub buffer_limit: usize,
}

impl RelayConfig {
    pub fn new(
        name: impl Into<String>,
        listen: impl Into<String>,
        local_range: (u16, u16),
    ) -> Self {
        RelayConfig {
            name: name.into(),
            listen: listen.into(),
            local_range,
            peers: Vec::new(),
            buffer_limit: DEFAULT_BUFFER_LIMIT,
        }
    }

    pub fn with_peer(
        mut self,
        name: impl Into<String>,
        addr: impl Into<String>,
        range: (u16, u16),
    ) -> Self {
        self.peers.push(PeerConfig {
            name: name.into(),
            addr: addr.into(),
            range,
        });
        self
    }

    pub fn validate(&self) -> Result<(), RelayError> {
        if self.buffer_limit == 0 {
            return Err(RelayError::BadConfig(
                "buffer limit must be positive".into(),
            ));
        }
        let mut ranges = vec![("local", self.local_range)];
        for peer in &self.peers {
            if peer.name == self.name {
                return Err(RelayError::BadConfig(format!(
                    "peer name {} matches the relay's own name",
                    peer.name
                )));
            }
            ranges.push((peer.name.as_str(), peer.range));
        }
        for (name, (lo, hi)) in &ranges {
            if lo > hi {
                return Err(RelayError::BadConfig(format!(
                    "range {lo}:{hi} of {name} is empty"
                )));
            }
        }
        for i in 0..ranges.len() {
            for j in i + 1..ranges.len() {
                let (na, (alo, ahi)) = ranges[i];
                let (nb, (blo, bhi)) = ranges[j];
                if alo <= bhi && blo <= ahi {
                    return Err(RelayError::BadConfig(format!(
                        "port ranges of {na} and {nb} overlap"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum RelayError {
    #[error("no route for destination port {0}")]
    NoRoute(u16),
    #[error("bad relay configuration: {0}")]
    BadConfig(String),
}

/// Where a destination port routes to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Route {
    Local,
    Peer(usize),
}

/// Routes by destination port: local iff it falls in the local range,
/// a peer iff it falls in that peer's range.
pub fn route(config: &RelayConfig, dst_port: u16) -> Result<Route, RelayError> {
    let (lo, hi) = config.local_range;
    if dst_port >= lo && dst_port <= hi {
        return Ok(Route::Local);
    }
    for (idx, peer) in config.peers.iter().enumerate() {
        if dst_port >= peer.range.0 && dst_port <= peer.range.1 {
            return Ok(Route::Peer(idx));
        }
    }
    Err(RelayError::NoRoute(dst_port))
}

/// Live counters, readable while the relay runs.
#[derive(Debug, Default, Clone)]
pub struct RelayStats {
    pub aggregate_pending: u64,
    pub max_aggregate_pending: u64,
    pub frames_forwarded: u64,
    pub circuits_opened: u64,
}

#[derive(Default)]
struct StatsInner {
    aggregate: AtomicU64,
    max_aggregate: AtomicU64,
    frames: AtomicU64,
    circuits: AtomicU64,
}

/// Handle to a running relay.
pub struct Relay {
    stats: Arc<StatsInner>,
    stop: Arc<AtomicBool>,
    local_addr: SocketAddr,
    thread: Option<JoinHandle<()>>,
}

impl Relay {
    pub fn start(config: RelayConfig) -> Result<Relay, RelayStartError> {
        config.validate()?;
        let listener = TcpListener::bind(&config.listen)?;
        listener.set_nonblocking(true)?;
        let local_addr = listener.local_addr()?;
        let stats = Arc::new(StatsInner::default());
        let stop = Arc::new(AtomicBool::new(false));
        let mut state = RelayState::new(config, listener, stats.clone(), stop.clone());
        let thread = thread::Builder::new()
            .name("relay".into())
            .spawn(move || state.run())
            .expect("spawn relay thread");
        Ok(Relay {
            stats,
            stop,
            local_addr,
            thread: Some(thread),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn stats(&self) -> RelayStats {
        RelayStats {
            aggregate_pending: self.stats.aggregate.load(Ordering::Acquire),
            max_aggregate_pending: self.stats.max_aggregate.load(Ordering::Acquire),
            frames_forwarded: self.stats.frames.load(Ordering::Acquire),
            circuits_opened: self.stats.circuits.load(Ordering::Acquire),
        }
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Release);
        if let Some(thread) = self.thread.take() {
            let _ = thread.join();
        }
    }
}

impl Drop for Relay {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[derive(Debug, Error)]
pub enum RelayStartError {
    #[error(transparent)]
    Config(#[from] RelayError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// One end of a circuit: a connection on this relay or a peer link.
#[derive(Debug, Clone, Copy, PartialEq)]
enum FlowEnd {
    Conn(usize),
    Peer(usize),
}

struct Flow {
    key: Option<String>,
    dst: (String, u16),
    ends: [FlowEnd; 2],
}

enum ConnKind {
    /// Inbound connection whose hello has not arrived yet.
    Handshake,
    /// Local end of a circuit; `side` indexes into the flow's ends.
    FlowEnd { flow: u64, side: usize },
    /// Link to the peer at this index in the config.
    Peer(usize),
}

struct Conn {
    stream: TcpStream,
    decoder: FrameDecoder,
    outbuf: VecDeque<u8>,
    kind: ConnKind,
    read_closed: bool,
    close_when_flushed: bool,
}

struct PeerLink {
    conn: Option<usize>,
    /// Header of the unit currently in transit on this link.
    pending: Option<(String, String, u16)>,
    next_dial: Instant,
}

struct RelayState {
    config: RelayConfig,
    listener: TcpListener,
    stats: Arc<StatsInner>,
    stop: Arc<AtomicBool>,
    conns: Vec<Option<Conn>>,
    flows: HashMap<u64, Flow>,
    /// (peer index, circuit key) -> flow id, for demultiplexing.
    keys: HashMap<(usize, String), u64>,
    peers: Vec<PeerLink>,
    next_flow: u64,
    next_key: u64,
    aggregate: usize,
}

impl RelayState {
    fn new(
        config: RelayConfig,
        listener: TcpListener,
        stats: Arc<StatsInner>,
        stop: Arc<AtomicBool>,
    ) -> RelayState {
        let peers = config
            .peers
            .iter()
            .map(|_| PeerLink {
                conn: None,
                pending: None,
                next_dial: Instant::now(),
            })
            .collect();
        RelayState {
            config,
            listener,
            stats,
            stop,
            conns: Vec::new(),
            flows: HashMap::new(),
            keys: HashMap::new(),
            peers,
            next_flow: 0,
            next_key: 0,
            aggregate: 0,
        }
    }

    fn run(&mut self) {
        while !self.stop.load(Ordering::Acquire) {
            let progress = self.pump();
            if progress == 0 {
                thread::sleep(Duration::from_micros(200));
            }
        }
    }

    /// One scheduling round: dial missing peer links, flush writable
    /// outbound buffers, then accept/read while under the buffer limit.
    /// Returns a progress measure (bytes moved plus events).
    fn pump(&mut self) -> usize {
        let mut progress = 0;
        progress += self.dial_peers();
        progress += self.flush_writes();
        progress += self.drain_decoders();
        if self.aggregate < self.config.buffer_limit {
            progress += self.accept_new();
            progress += self.read_sockets();
        }
        self.sweep_closed();
        debug_assert_eq!(
            self.aggregate,
            self.conns
                .iter()
                .flatten()
                .map(|c| c.outbuf.len())
                .sum::<usize>()
        );
        progress
    }

    /// The lexicographically smaller name initiates each peer link.
    fn dial_peers(&mut self) -> usize {
        let mut progress = 0;
        for idx in 0..self.peers.len() {
            if self.peers[idx].conn.is_some()
                || self.config.name >= self.config.peers[idx].name
                || Instant::now() < self.peers[idx].next_dial
            {
                continue;
            }
            self.peers[idx].next_dial = Instant::now() + Duration::from_millis(500);
            let addr = self.config.peers[idx].addr.clone();
            if let Ok(stream) = dial(&addr) {
                let hello = encode_frame(&Frame::Register {
                    name: self.config.name.clone(),
                    host: String::new(),
                    port: 0,
                })
                .expect("encode peer hello");
                let conn_id = self.add_conn(stream, ConnKind::Peer(idx));
                self.enqueue(conn_id, &hello);
                self.peers[idx].conn = Some(conn_id);
                progress += 1;
            }
        }
        progress
    }

    fn flush_writes(&mut self) -> usize {
        let mut written_total = 0;
        for id in 0..self.conns.len() {
            let Some(conn) = self.conns[id].as_mut() else {
                continue;
            };
            let mut failed = false;
            while !conn.outbuf.is_empty() {
                let (front, _) = conn.outbuf.as_slices();
                match conn.stream.write(front) {
                    Ok(0) => {
                        failed = true;
                        break;
                    }
                    Ok(n) => {
                        conn.outbuf.drain(..n);
                        written_total += n;
                        self.aggregate -= n;
                    }
                    Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => break,
                    Err(_) => {
                        failed = true;
                        break;
                    }
                }
            }
            self.stats
                .aggregate
                .store(self.aggregate as u64, Ordering::Release);
            if failed {
                self.fail_conn(id, "write failed");
            } else if self.conns[id]
                .as_ref()
                .map(|c| c.close_when_flushed && c.outbuf.is_empty())
                .unwrap_or(false)
            {
                self.close_conn(id);
            }
        }
        written_total
    }

    /// Forwards frames already sitting decoded in connection buffers,
    /// stopping as soon as the aggregate crosses the limit.
    fn drain_decoders(&mut self) -> usize {
        let mut progress = 0;
        for id in 0..self.conns.len() {
            progress += self.drain_one(id);
        }
        progress
    }

    fn drain_one(&mut self, id: usize) -> usize {
        let mut progress = 0;
        loop {
            if self.aggregate >= self.config.buffer_limit {
                return progress;
            }
            let Some(conn) = self.conns[id].as_mut() else {
                return progress;
            };
            if conn.close_when_flushed {
                return progress;
            }
            let frame = match conn.decoder.try_decode() {
                Ok(Some(frame)) => frame,
                Ok(None) => return progress,
                Err(err) => {
                    let reason = format!("protocol error: {err}");
                    self.fail_conn(id, &reason);
                    return progress;
                }
            };
            progress += 1;
            self.handle_frame(id, frame);
        }
    }

    fn accept_new(&mut self) -> usize {
        let mut progress = 0;
        loop {
            match self.listener.accept() {
                Ok((stream, _)) => {
                    if stream.set_nonblocking(true).is_err() {
                        continue;
                    }
                    self.add_conn(stream, ConnKind::Handshake);
                    progress += 1;
                }
                Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => break,
                Err(_) => break,
            }
        }
        progress
    }

    fn read_sockets(&mut self) -> usize {
        let mut read_total = 0;
        let mut chunk = vec![0u8; 256 * 1024];
        for id in 0..self.conns.len() {
            if self.aggregate >= self.config.buffer_limit {
                break;
            }
            let Some(conn) = self.conns[id].as_ref() else {
                continue;
            };
            if conn.read_closed || conn.close_when_flushed {
                continue;
            }
            // Do not read from a circuit whose peer link is down; its
            // client waits until the link comes up.
            if let ConnKind::FlowEnd { flow, side } = conn.kind {
                if let Some(flow) = self.flows.get(&flow) {
                    if let FlowEnd::Peer(p) = flow.ends[1 - side] {
                        if self.peers[p].conn.is_none() {
                            continue;
                        }
                    }
                }
            }
            let conn = self.conns[id].as_mut().unwrap();
            match conn.stream.read(&mut chunk) {
                Ok(0) => {
                    conn.read_closed = true;
                    self.end_of_stream(id);
                }
                Ok(n) => {
                    conn.decoder.feed(&chunk[..n]);
                    read_total += n;
                    self.drain_one(id);
                }
                Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {}
                Err(_) => {
                    self.fail_conn(id, "read failed");
                }
            }
        }
        read_total
    }

    fn add_conn(&mut self, stream: TcpStream, kind: ConnKind) -> usize {
        let _ = stream.set_nonblocking(true);
        let conn = Conn {
            stream,
            decoder: FrameDecoder::new(),
            outbuf: VecDeque::new(),
            kind,
            read_closed: false,
            close_when_flushed: false,
        };
        for (id, slot) in self.conns.iter_mut().enumerate() {
            if slot.is_none() {
                *slot = Some(conn);
                return id;
            }
        }
        self.conns.push(Some(conn));
        self.conns.len() - 1
    }

    fn enqueue(&mut self, id: usize, bytes: &[u8]) {
        if let Some(conn) = self.conns[id].as_mut() {
            conn.outbuf.extend(bytes);
            self.aggregate += bytes.len();
            self.stats
                .aggregate
                .store(self.aggregate as u64, Ordering::Release);
            self.stats
                .max_aggregate
                .fetch_max(self.aggregate as u64, Ordering::AcqRel);
        }
    }

    fn handle_frame(&mut self, id: usize, frame: Frame) {
        enum Ctx {
            Hello,
            Flow(u64, usize),
            Peer(usize),
        }
        let ctx = match self.conns[id].as_ref().map(|c| &c.kind) {
            Some(ConnKind::Handshake) => Ctx::Hello,
            Some(ConnKind::FlowEnd { flow, side }) => Ctx::Flow(*flow, *side),
            Some(ConnKind::Peer(p)) => Ctx::Peer(*p),
            None => return,
        };
        match ctx {
            Ctx::Hello => self.handle_hello(id, frame),
            Ctx::Flow(flow, side) => self.forward(flow, 1 - side, frame),
            Ctx::Peer(peer_idx) => self.handle_peer_frame(id, peer_idx, frame),
        }
    }

    /// First frame on an inbound connection: LOCATION opens a circuit,
    /// REGISTER with a peer's name attaches the peer link.
    fn handle_hello(&mut self, id: usize, frame: Frame) {
        match frame {
            Frame::Location { host, port, .. } => match route(&self.config, port) {
                Ok(Route::Local) => match dial(&format!("{host}:{port}")) {
                    Ok(stream) => {
                        let flow_id = self.next_flow;
                        self.next_flow += 1;
                        let dst_id = self.add_conn(
                            stream,
                            ConnKind::FlowEnd {
                                flow: flow_id,
                                side: 1,
                            },
                        );
                        if let Some(conn) = self.conns[id].as_mut() {
                            conn.kind = ConnKind::FlowEnd {
                                flow: flow_id,
                                side: 0,
                            };
                        }
                        self.flows.insert(
                            flow_id,
                            Flow {
                                key: None,
                                dst: (host, port),
                                ends: [FlowEnd::Conn(id), FlowEnd::Conn(dst_id)],
                            },
                        );
                        self.stats.circuits.fetch_add(1, Ordering::AcqRel);
                        self.drain_one(id);
                    }
                    Err(err) => {
                        self.reject(id, &format!("cannot reach {host}:{port}: {err}"));
                    }
                },
                Ok(Route::Peer(peer_idx)) => {
                    let key = format!("{}:{}", self.config.name, self.next_key);
                    self.next_key += 1;
                    let flow_id = self.next_flow;
                    self.next_flow += 1;
                    if let Some(conn) = self.conns[id].as_mut() {
                        conn.kind = ConnKind::FlowEnd {
                            flow: flow_id,
                            side: 0,
                        };
                    }
                    self.flows.insert(
                        flow_id,
                        Flow {
                            key: Some(key.clone()),
                            dst: (host, port),
                            ends: [FlowEnd::Conn(id), FlowEnd::Peer(peer_idx)],
                        },
                    );
                    self.keys.insert((peer_idx, key), flow_id);
                    self.stats.circuits.fetch_add(1, Ordering::AcqRel);
                    self.drain_one(id);
                }
                Err(err) => {
                    self.reject(id, &err.to_string());
                }
            },
            Frame::Register { name, .. } => {
                match self.config.peers.iter().position(|p| p.name == name) {
                    Some(peer_idx) => {
                        if let Some(old) = self.peers[peer_idx].conn {
                            self.close_conn(old);
                        }
                        if let Some(conn) = self.conns[id].as_mut() {
                            conn.kind = ConnKind::Peer(peer_idx);
                        }
                        self.peers[peer_idx].conn = Some(id);
                        self.peers[peer_idx].pending = None;
                        self.drain_one(id);
                    }
                    None => self.reject(id, &format!("unknown peer {name}")),
                }
            }
            other => {
                self.reject(
                    id,
                    &format!("bad hello: unexpected opcode {:#04x}", other.opcode()),
                );
            }
        }
    }

    fn handle_peer_frame(&mut self, id: usize, peer_idx: usize, frame: Frame) {
        match self.peers[peer_idx].pending.take() {
            None => match frame {
                Frame::Location { name, host, port } => {
                    if host.is_empty() && port == 0 {
                        // Circuit close marker.
                        if let Some(flow_id) = self.keys.remove(&(peer_idx, name)) {
                            self.close_flow_from_peer(flow_id);
                        }
                    } else {
                        self.peers[peer_idx].pending = Some((name, host, port));
                    }
                }
                _ => {
                    self.fail_conn(id, "peer link protocol error: expected circuit header");
                }
            },
            Some((key, host, port)) => {
                let flow_id = match self.keys.get(&(peer_idx, key.clone())) {
                    Some(flow_id) => *flow_id,
                    None => match self.open_peer_flow(peer_idx, &key, host, port) {
                        Some(flow_id) => flow_id,
                        None => return,
                    },
                };
                let side = {
                    let flow = &self.flows[&flow_id];
                    if flow.ends[0] == FlowEnd::Peer(peer_idx) {
                        0
                    } else {
                        1
                    }
                };
                self.forward(flow_id, 1 - side, frame);
            }
        }
    }

    /// Creates the local end of a circuit initiated by a peer.
    fn open_peer_flow(
        &mut self,
        peer_idx: usize,
        key: &str,
        host: String,
        port: u16,
    ) -> Option<u64> {
        match route(&self.config, port) {
            Ok(Route::Local) => match dial(&format!("{host}:{port}")) {
                Ok(stream) => {
                    let flow_id = self.next_flow;
                    self.next_flow += 1;
                    let dst_id = self.add_conn(
                        stream,
                        ConnKind::FlowEnd {
                            flow: flow_id,
                            side: 1,
                        },
                    );
                    self.flows.insert(
                        flow_id,
                        Flow {
                            key: Some(key.to_string()),
                            dst: (host, port),
                            ends: [FlowEnd::Peer(peer_idx), FlowEnd::Conn(dst_id)],
                        },
                    );
                    self.keys.insert((peer_idx, key.to_string()), flow_id);
                    self.stats.circuits.fetch_add(1, Ordering::AcqRel);
                    Some(flow_id)
                }
                Err(_) => {
                    self.send_close_marker(peer_idx, key);
                    None
                }
            },
            Ok(Route::Peer(next)) if next != peer_idx => {
                // Pass-through to another peer, same key.
                let flow_id = self.next_flow;
                self.next_flow += 1;
                self.flows.insert(
                    flow_id,
                    Flow {
                        key: Some(key.to_string()),
                        dst: (host, port),
                        ends: [FlowEnd::Peer(peer_idx), FlowEnd::Peer(next)],
                    },
                );
                self.keys.insert((peer_idx, key.to_string()), flow_id);
                self.keys.insert((next, key.to_string()), flow_id);
                self.stats.circuits.fetch_add(1, Ordering::AcqRel);
                Some(flow_id)
            }
            _ => {
                self.send_close_marker(peer_idx, key);
                None
            }
        }
    }

    /// Forwards one frame to the given end of a circuit.
    fn forward(&mut self, flow_id: u64, to_side: usize, frame: Frame) {
        let Some(flow) = self.flows.get(&flow_id) else {
            return;
        };
        let end = flow.ends[to_side];
        let dst = flow.dst.clone();
        let key = flow.key.clone();
        let bytes = match encode_frame(&frame) {
            Ok(bytes) => bytes,
            Err(_) => return,
        };
        match end {
            FlowEnd::Conn(conn_id) => {
                self.enqueue(conn_id, &bytes);
            }
            FlowEnd::Peer(peer_idx) => {
                let Some(link_conn) = self.peers[peer_idx].conn else {
                    self.teardown_flow(flow_id, "peer link is down");
                    return;
                };
                let header = encode_frame(&Frame::Location {
                    name: key.unwrap_or_default(),
                    host: dst.0,
                    port: dst.1,
                })
                .expect("encode circuit header");
                self.enqueue(link_conn, &header);
                self.enqueue(link_conn, &bytes);
            }
        }
        self.stats.frames.fetch_add(1, Ordering::AcqRel);
    }

    fn send_close_marker(&mut self, peer_idx: usize, key: &str) {
        if let Some(link_conn) = self.peers[peer_idx].conn {
            let marker = encode_frame(&Frame::Location {
                name: key.to_string(),
                host: String::new(),
                port: 0,
            })
            .expect("encode close marker");
            self.enqueue(link_conn, &marker);
        }
    }

    /// A connection signalled end-of-stream.
    fn end_of_stream(&mut self, id: usize) {
        enum Ctx {
            Flow(u64, usize),
            Peer(usize),
            Other,
        }
        let ctx = match self.conns[id].as_ref().map(|c| &c.kind) {
            Some(ConnKind::FlowEnd { flow, side }) => Ctx::Flow(*flow, *side),
            Some(ConnKind::Peer(p)) => Ctx::Peer(*p),
            _ => Ctx::Other,
        };
        match ctx {
            Ctx::Flow(flow_id, side) => {
                // Close the other side once its pending bytes flush.
                if let Some(flow) = self.flows.get(&flow_id) {
                    let other = flow.ends[1 - side];
                    let key = flow.key.clone();
                    match other {
                        FlowEnd::Conn(other_id) => {
                            if let Some(conn) = self.conns[other_id].as_mut() {
                                conn.close_when_flushed = true;
                            }
                        }
                        FlowEnd::Peer(peer_idx) => {
                            if let Some(key) = key {
                                self.keys.remove(&(peer_idx, key.clone()));
                                self.send_close_marker(peer_idx, &key);
                            }
                        }
                    }
                }
                self.flows.remove(&flow_id);
                if let Some(conn) = self.conns[id].as_mut() {
                    conn.close_when_flushed = true;
                }
            }
            Ctx::Peer(peer_idx) => self.peer_link_down(peer_idx),
            Ctx::Other => self.close_conn(id),
        }
    }

    /// Peer link lost: abort every circuit that crossed it.
    fn peer_link_down(&mut self, peer_idx: usize) {
        if let Some(conn_id) = self.peers[peer_idx].conn.take() {
            self.close_conn(conn_id);
        }
        self.peers[peer_idx].pending = None;
        self.peers[peer_idx].next_dial = Instant::now() + Duration::from_millis(500);
        let affected: Vec<u64> = self
            .flows
            .iter()
            .filter(|(_, flow)| flow.ends.contains(&FlowEnd::Peer(peer_idx)))
            .map(|(id, _)| *id)
            .collect();
        for flow_id in affected {
            self.teardown_flow(flow_id, "peer link lost");
        }
    }

    /// Closes both ends of a circuit, sending an ABORT to local senders.
    fn teardown_flow(&mut self, flow_id: u64, reason: &str) {
        let Some(flow) = self.flows.remove(&flow_id) else {
            return;
        };
        self.keys.retain(|_, v| *v != flow_id);
        if let Some(key) = &flow.key {
            for end in flow.ends {
                if let FlowEnd::Peer(peer_idx) = end {
                    self.send_close_marker(peer_idx, key);
                }
            }
        }
        let abort = encode_frame(&Frame::Abort {
            reason: format!("relay {}: {reason}", self.config.name),
        })
        .expect("encode abort");
        for end in flow.ends {
            if let FlowEnd::Conn(conn_id) = end {
                self.enqueue(conn_id, &abort);
                if let Some(conn) = self.conns[conn_id].as_mut() {
                    conn.close_when_flushed = true;
                }
            }
        }
    }

    /// A close marker arrived for this circuit from its peer side.
    fn close_flow_from_peer(&mut self, flow_id: u64) {
        let Some(flow) = self.flows.remove(&flow_id) else {
            return;
        };
        self.keys.retain(|_, v| *v != flow_id);
        for end in flow.ends {
            match end {
                FlowEnd::Conn(conn_id) => {
                    if let Some(conn) = self.conns[conn_id].as_mut() {
                        conn.close_when_flushed = true;
                    }
                }
                FlowEnd::Peer(peer_idx) => {
                    if let Some(key) = &flow.key {
                        self.keys.remove(&(peer_idx, key.clone()));
                        self.send_close_marker(peer_idx, key);
                    }
                }
            }
        }
    }

    fn reject(&mut self, id: usize, reason: &str) {
        let abort = encode_frame(&Frame::Abort {
            reason: reason.to_string(),
        })
        .expect("encode abort");
        self.enqueue(id, &abort);
        if let Some(conn) = self.conns[id].as_mut() {
            conn.close_when_flushed = true;
            conn.read_closed = true;
        }
    }

    fn fail_conn(&mut self, id: usize, reason: &str) {
        enum Ctx {
            Flow(u64),
            Peer(usize),
            Other,
        }
        let ctx = match self.conns[id].as_ref().map(|c| &c.kind) {
            Some(ConnKind::FlowEnd { flow, .. }) => Ctx::Flow(*flow),
            Some(ConnKind::Peer(p)) => Ctx::Peer(*p),
            _ => Ctx::Other,
        };
        match ctx {
            Ctx::Flow(flow_id) => {
                self.teardown_flow(flow_id, reason);
                self.close_conn(id);
            }
            Ctx::Peer(peer_idx) => self.peer_link_down(peer_idx),
            Ctx::Other => self.close_conn(id),
        }
    }

    fn close_conn(&mut self, id: usize) {
        if let Some(conn) = self.conns[id].take() {
            self.aggregate -= conn.outbuf.len();
            self.stats
                .aggregate
                .store(self.aggregate as u64, Ordering::Release);
            let _ = conn.stream.shutdown(Shutdown::Both);
        }
    }

    /// Removes connections that are fully finished.
    fn sweep_closed(&mut self) {
        for id in 0..self.conns.len() {
            let done = match self.conns[id].as_ref() {
                Some(conn) => conn.read_closed && conn.outbuf.is_empty() && conn.close_when_flushed,
                None => false,
            };
            if done {
                self.close_conn(id);
            }
        }
    }
}

fn dial(addr: &str) -> std::io::Result<TcpStream> {
    let resolved = addr
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, "no address"))?;
    let stream = TcpStream::connect_timeout(&resolved, Duration::from_secs(3))?;
    stream.set_nonblocking(true)?;
    Ok(stream)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config() -> RelayConfig {
        RelayConfig::new("a", "127.0.0.1:0", (9000, 9099)).with_peer(
            "b",
            "127.0.0.1:1",
            (9100, 9199),
        )
    }

    #[test]
    fn routes_by_port_range() {
        let cfg = config();
        assert_eq!(route(&cfg, 9050), Ok(Route::Local));
        assert_eq!(route(&cfg, 9150), Ok(Route::Peer(0)));
        assert_eq!(route(&cfg, 8000), Err(RelayError::NoRoute(8000)));
        assert_eq!(route(&cfg, 9000), Ok(Route::Local));
        assert_eq!(route(&cfg, 9099), Ok(Route::Local));
    }

    #[test]
    fn overlapping_ranges_rejected() {
        let cfg = RelayConfig::new("a", "127.0.0.1:0", (9000, 9099)).with_peer(
            "b",
            "x",
            (9050, 9150),
        );
        assert!(matches!(cfg.validate(), Err(RelayError::BadConfig(_))));
    }

    #[test]
    fn empty_range_rejected() {
        let cfg = RelayConfig::new("a", "127.0.0.1:0", (9099, 9000));
        assert!(matches!(cfg.validate(), Err(RelayError::BadConfig(_))));
    }

    #[test]
    fn zero_buffer_limit_rejected() {
        let mut cfg = config();
        cfg.buffer_limit = 0;
        assert!(matches!(cfg.validate(), Err(RelayError::BadConfig(_))));
    }

    #[test]
    fn peer_name_collision_rejected() {
        let cfg = RelayConfig::new("a", "127.0.0.1:0", (9000, 9099)).with_peer(
            "a",
            "x",
            (9100, 9199),
        );
        assert!(matches!(cfg.validate(), Err(RelayError::BadConfig(_))));
    }
}
