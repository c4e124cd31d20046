//! The simulation manager served over TCP, and its client side.
//!
//! Every inbound connection opens with one frame. A `REGISTER` naming a
//! known manager id turns the connection into that manager's notification
//! channel (the server later pushes `ABORT` or `FIN` down it); any other
//! frame is a single request answered on the same connection:
//!
//! * `REGISTER name host port` -> `REGISTER_ACK` (duplicate registration
//!   aborts the whole run)
//! * `LOOKUP name` -> `LOCATION`, blocking until the name registers
//! * `DEREGISTER name` -> `REGISTER_ACK`
//! * `ABORT reason` -> fail-fast broadcast
//!
//! Failed requests are answered with an `ABORT` frame carrying the reason.

use std::collections::BTreeSet;
use std::io::Write;
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::codec::{encode_frame, read_frame, Frame, FrameDecoder};
use crate::transport::AbortToken;

use super::registry::{Registry, RegistryError, RegistryOutcome};
use super::RuntimeError;

fn write_frame(stream: &mut TcpStream, frame: &Frame) -> std::io::Result<()> {
    let bytes = encode_frame(frame)
        .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
    stream.write_all(&bytes)
}

struct ServerShared {
    registry: Arc<Registry>,
    manager_ids: BTreeSet<String>,
    abort: AbortToken,
    notify: Mutex<Vec<TcpStream>>,
    stop: AtomicBool,
    conns: Mutex<Vec<TcpStream>>,
}

impl ServerShared {
    fn global_abort(&self, reason: &str) {
        self.registry.abort(reason);
        self.abort.abort(reason);
        let channels = self.notify.lock().unwrap();
        for stream in channels.iter() {
            if let Ok(mut s) = stream.try_clone() {
                let _ = write_frame(&mut s, &Frame::Abort { reason: reason.into() });
            }
        }
    }

    fn broadcast_fin(&self) {
        let channels = self.notify.lock().unwrap();
        for stream in channels.iter() {
            if let Ok(mut s) = stream.try_clone() {
                let _ = write_frame(&mut s, &Frame::Fin);
            }
        }
    }

    fn track(&self, stream: &TcpStream) {
        if let Ok(clone) = stream.try_clone() {
            self.conns.lock().unwrap().push(clone);
        }
    }

    fn close_all(&self) {
        for stream in self.conns.lock().unwrap().iter() {
            let _ = stream.shutdown(Shutdown::Both);
        }
    }
}

/// Handle to a running simulation manager server.
pub struct SimManagerServer {
    shared: Arc<ServerShared>,
    accept_thread: Option<JoinHandle<()>>,
    monitor_thread: Option<JoinHandle<()>>,
    local_addr: std::net::SocketAddr,
}

impl SimManagerServer {
    pub fn start(
        bind: &str,
        registry: Arc<Registry>,
        manager_ids: BTreeSet<String>,
        abort: AbortToken,
    ) -> Result<SimManagerServer, RuntimeError> {
        let listener = TcpListener::bind(bind)?;
        let local_addr = listener.local_addr()?;
        listener.set_nonblocking(true)?;
        let shared = Arc::new(ServerShared {
            registry,
            manager_ids,
            abort,
            notify: Mutex::new(Vec::new()),
            stop: AtomicBool::new(false),
            conns: Mutex::new(Vec::new()),
        });

        let accept_shared = shared.clone();
        let accept_thread = thread::Builder::new()
            .name("sim-manager-accept".into())
            .spawn(move || {
                while !accept_shared.stop.load(Ordering::Acquire) {
                    match listener.accept() {
                        Ok((stream, _peer)) => {
                            accept_shared.track(&stream);
                            let conn_shared = accept_shared.clone();
                            let _ = thread::Builder::new()
                                .name("sim-manager-conn".into())
                                .spawn(move || handle_connection(conn_shared, stream));
                        }
                        Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                            thread::sleep(Duration::from_millis(5));
                        }
                        Err(_) => break,
                    }
                }
            })
            .expect("spawn sim manager accept loop");

        // Pushes FIN or ABORT to the manager notification channels as soon
        // as the run has an outcome. The outcome check comes first so a
        // stop request arriving together with completion still broadcasts.
        let monitor_shared = shared.clone();
        let monitor_thread = thread::Builder::new()
            .name("sim-manager-monitor".into())
            .spawn(move || loop {
                match monitor_shared
                    .registry
                    .wait_outcome(Duration::from_millis(50))
                {
                    RegistryOutcome::Complete => {
                        monitor_shared.broadcast_fin();
                        return;
                    }
                    RegistryOutcome::Aborted(reason) => {
                        monitor_shared.global_abort(&reason);
                        return;
                    }
                    RegistryOutcome::TimedOut => {
                        if monitor_shared.stop.load(Ordering::Acquire) {
                            return;
                        }
                    }
                }
            })
            .expect("spawn sim manager monitor");

        Ok(SimManagerServer {
            shared,
            accept_thread: Some(accept_thread),
            monitor_thread: Some(monitor_thread),
            local_addr,
        })
    }

    pub fn local_addr(&self) -> std::net::SocketAddr {
        self.local_addr
    }

    /// Stops accepting, closes all connections, and joins the server
    /// threads. Notification pushes for an already-decided outcome are
    /// sent by the monitor before it exits.
    pub fn stop(mut self) {
        self.shared.stop.store(true, Ordering::Release);
        if let Some(monitor) = self.monitor_thread.take() {
            let _ = monitor.join();
        }
        self.shared.close_all();
        if let Some(accept) = self.accept_thread.take() {
            let _ = accept.join();
        }
    }
}

fn handle_connection(shared: Arc<ServerShared>, mut stream: TcpStream) {
    let mut decoder = FrameDecoder::new();
    let first = match read_frame(&mut stream, &mut decoder) {
        Ok(Some(frame)) => frame,
        _ => return,
    };
    match first {
        Frame::Register { name, .. } if shared.manager_ids.contains(&name) => {
            manager_channel(shared, stream, decoder, name)
        }
        Frame::Register { name, host, port } => {
            let reply = match shared.registry.register(&name, &host, port) {
                Ok(()) => Frame::RegisterAck { ok: true },
                Err(err @ RegistryError::DuplicateRegistration(_)) => {
                    shared.global_abort(&err.to_string());
                    Frame::Abort {
                        reason: err.to_string(),
                    }
                }
                Err(err) => Frame::Abort {
                    reason: err.to_string(),
                },
            };
            let _ = write_frame(&mut stream, &reply);
        }
        Frame::Lookup { name } => {
            let reply = match shared.registry.resolve(&name) {
                Ok((host, port)) => Frame::Location { name, host, port },
                Err(err) => Frame::Abort {
                    reason: err.to_string(),
                },
            };
            let _ = write_frame(&mut stream, &reply);
        }
        Frame::Deregister { name } => {
            let reply = match shared.registry.deregister(&name) {
                Ok(_complete) => Frame::RegisterAck { ok: true },
                Err(err) => Frame::Abort {
                    reason: err.to_string(),
                },
            };
            let _ = write_frame(&mut stream, &reply);
        }
        Frame::Abort { reason } => {
            shared.global_abort(&reason);
        }
        Frame::Fin => {}
        other => {
            shared.global_abort(&format!(
                "bad handshake at simulation manager: unexpected {:?} frame",
                other.opcode()
            ));
        }
    }
}

/// Keeps a manager's notification channel open. Frames from the manager
/// side escalate aborts; a disconnect before the run finished is itself a
/// fail-fast condition.
fn manager_channel(
    shared: Arc<ServerShared>,
    mut stream: TcpStream,
    mut decoder: FrameDecoder,
    manager_id: String,
) {
    if write_frame(&mut stream, &Frame::RegisterAck { ok: true }).is_err() {
        return;
    }
    {
        let mut channels = shared.notify.lock().unwrap();
        if let Ok(clone) = stream.try_clone() {
            channels.push(clone);
        }
    }
    loop {
        match read_frame(&mut stream, &mut decoder) {
            Ok(Some(Frame::Abort { reason })) => {
                shared.global_abort(&reason);
            }
            Ok(Some(Frame::Fin)) | Ok(None) => {
                if shared.registry.outcome().is_none() && !shared.stop.load(Ordering::Acquire) {
                    shared.global_abort(&format!("manager {manager_id} disconnected"));
                }
                return;
            }
            Ok(Some(_)) => {}
            Err(_) => {
                if shared.registry.outcome().is_none() && !shared.stop.load(Ordering::Acquire) {
                    shared.global_abort(&format!("manager {manager_id} connection failed"));
                }
                return;
            }
        }
    }
}

/// Client side of the simulation manager protocol, used by local managers
/// in other processes. Request operations open one connection each; a
/// persistent notification channel receives ABORT/FIN pushes.
pub struct RemoteRegistry {
    sim_addr: String,
    abort: AbortToken,
    outcome: Arc<(Mutex<Option<RegistryOutcome>>, Condvar)>,
}

impl RemoteRegistry {
    /// Connects the notification channel and spawns its reader.
    pub fn connect(
        sim_addr: &str,
        manager_id: &str,
        abort: AbortToken,
    ) -> Result<RemoteRegistry, RuntimeError> {
        let mut stream = connect_with_retry(sim_addr, Duration::from_secs(10))?;
        abort.watch_socket(&stream);
        write_frame(
            &mut stream,
            &Frame::Register {
                name: manager_id.to_string(),
                host: String::new(),
                port: 0,
            },
        )?;
        let mut decoder = FrameDecoder::new();
        match read_frame(&mut stream, &mut decoder) {
            Ok(Some(Frame::RegisterAck { ok: true })) => {}
            other => {
                return Err(RuntimeError::Protocol(format!(
                    "manager hello rejected: {other:?}"
                )))
            }
        }
        let outcome = Arc::new((Mutex::new(None), Condvar::new()));
        let reader_outcome = outcome.clone();
        let reader_abort = abort.clone();
        let label = manager_id.to_string();
        thread::Builder::new()
            .name(format!("sim-manager-notify-{label}"))
            .spawn(move || {
                let set = |value: RegistryOutcome| {
                    let (lock, cond) = &*reader_outcome;
                    let mut slot = lock.lock().unwrap();
                    if slot.is_none() {
                        *slot = Some(value);
                        cond.notify_all();
                    }
                };
                loop {
                    match read_frame(&mut stream, &mut decoder) {
                        Ok(Some(Frame::Fin)) => {
                            set(RegistryOutcome::Complete);
                            return;
                        }
                        Ok(Some(Frame::Abort { reason })) => {
                            reader_abort.abort(&reason);
                            set(RegistryOutcome::Aborted(reason));
                            return;
                        }
                        Ok(Some(_)) => {}
                        Ok(None) | Err(_) => {
                            let reason = "simulation manager connection lost".to_string();
                            if !reader_abort.is_aborted() {
                                reader_abort.abort(&reason);
                            }
                            set(RegistryOutcome::Aborted(
                                reader_abort.reason().unwrap_or(reason),
                            ));
                            return;
                        }
                    }
                }
            })
            .expect("spawn notification reader");
        Ok(RemoteRegistry {
            sim_addr: sim_addr.to_string(),
            abort,
            outcome,
        })
    }

    fn request(&self, frame: Frame) -> Result<Frame, RuntimeError> {
        let mut stream = TcpStream::connect(&self.sim_addr)?;
        self.abort.watch_socket(&stream);
        write_frame(&mut stream, &frame)?;
        let mut decoder = FrameDecoder::new();
        match read_frame(&mut stream, &mut decoder) {
            Ok(Some(reply)) => Ok(reply),
            Ok(None) => Err(RuntimeError::Protocol(
                "simulation manager closed the connection".into(),
            )),
            Err(err) => Err(RuntimeError::Protocol(err.to_string())),
        }
    }

    pub fn register(&self, name: &str, host: &str, port: u16) -> Result<(), RuntimeError> {
        match self.request(Frame::Register {
            name: name.to_string(),
            host: host.to_string(),
            port,
        })? {
            Frame::RegisterAck { ok: true } => Ok(()),
            Frame::Abort { reason } => Err(RuntimeError::Aborted(reason)),
            other => Err(RuntimeError::Protocol(format!(
                "unexpected reply to REGISTER: opcode {:#04x}",
                other.opcode()
            ))),
        }
    }

    pub fn resolve(&self, name: &str) -> Result<(String, u16), RuntimeError> {
        match self.request(Frame::Lookup {
            name: name.to_string(),
        })? {
            Frame::Location { host, port, .. } => Ok((host, port)),
            Frame::Abort { reason } => Err(RuntimeError::Aborted(reason)),
            other => Err(RuntimeError::Protocol(format!(
                "unexpected reply to LOOKUP: opcode {:#04x}",
                other.opcode()
            ))),
        }
    }

    pub fn deregister(&self, name: &str) -> Result<(), RuntimeError> {
        match self.request(Frame::Deregister {
            name: name.to_string(),
        })? {
            Frame::RegisterAck { ok: true } => Ok(()),
            Frame::Abort { reason } => Err(RuntimeError::Aborted(reason)),
            other => Err(RuntimeError::Protocol(format!(
                "unexpected reply to DEREGISTER: opcode {:#04x}",
                other.opcode()
            ))),
        }
    }

    pub fn abort_all(&self, reason: &str) {
        self.abort.abort(reason);
        if let Ok(mut stream) = TcpStream::connect(&self.sim_addr) {
            let _ = write_frame(
                &mut stream,
                &Frame::Abort {
                    reason: reason.to_string(),
                },
            );
        }
    }

    pub fn wait_outcome(&self, timeout: Duration) -> RegistryOutcome {
        let (lock, cond) = &*self.outcome;
        let deadline = Instant::now() + timeout;
        let mut slot = lock.lock().unwrap();
        loop {
            if let Some(outcome) = slot.clone() {
                return outcome;
            }
            let now = Instant::now();
            if now >= deadline {
                return RegistryOutcome::TimedOut;
            }
            let (next, _) = cond.wait_timeout(slot, deadline - now).unwrap();
            slot = next;
        }
    }
}

/// Connects with retries so managers may start in any order.
pub(crate) fn connect_with_retry(
    addr: &str,
    timeout: Duration,
) -> Result<TcpStream, std::io::Error> {
    let deadline = Instant::now() + timeout;
    loop {
        match TcpStream::connect(addr) {
            Ok(stream) => return Ok(stream),
            Err(err) => {
                if Instant::now() >= deadline {
                    return Err(err);
                }
                thread::sleep(Duration::from_millis(25));
            }
        }
    }
}
