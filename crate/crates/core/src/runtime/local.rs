//! The local manager: starts the instances placed on it, routes their
//! messages, serves inter-manager data links, and bridges external
//! processes into the run.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;
use std::net::{Shutdown, TcpListener, TcpStream};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::codec::{encode_frame, read_frame, Frame, FrameDecoder};
use crate::kernel::{self, InstanceImpl, InstancePorts, KernelError, MessageOutbound, SelOptions};
use crate::topology::{Endpoint, FilterSpec, InstanceKind, InstanceSpec};
use crate::transport::{
    channel, AbortToken, FrameWriter, Message, MessageReceiver, MessageSender, ReceiveError,
    SendError,
};

use super::sim_server::connect_with_retry;
use super::{
    ImplRegistry, InstanceOutcome, InstanceReport, RegistryConn, RelayClientCfg, RunOptions,
    RunPlan, RuntimeError, EXTERNAL_IMPL_ID,
};

/// Outbound inter-manager links, keyed by destination listener address.
/// Connections open lazily on first use and stay open until shutdown.
struct Links {
    manager_id: String,
    abort: AbortToken,
    relay: Option<RelayClientCfg>,
    closing: AtomicBool,
    map: Mutex<HashMap<(String, u16), FrameWriter>>,
}

impl Links {
    fn get_or_connect(&self, host: &str, port: u16) -> Result<FrameWriter, SendError> {
        let key = (host.to_string(), port);
        let mut map = self.map.lock().unwrap();
        if let Some(writer) = map.get(&key) {
            return Ok(writer.clone());
        }
        let writer = self
            .open(host, port)
            .map_err(|e| SendError::PeerUnreachable(format!("{host}:{port}: {e}")))?;
        map.insert(key, writer.clone());
        Ok(writer)
    }

    fn open(&self, host: &str, port: u16) -> Result<FrameWriter, RuntimeError> {
        let mut stream = self.dial(host, port)?;
        self.abort.watch_socket(&stream);
        let hello = encode_frame(&Frame::Register {
            name: self.manager_id.clone(),
            host: String::new(),
            port: 0,
        })
        .expect("encode hello");
        stream.write_all(&hello)?;
        let mut decoder = FrameDecoder::new();
        match read_frame(&mut stream, &mut decoder) {
            Ok(Some(Frame::RegisterAck { ok: true })) => {}
            other => {
                return Err(RuntimeError::Protocol(format!(
                    "data link to {host}:{port} rejected: {other:?}"
                )))
            }
        }
        // Watch for aborts pushed back down the link.
        let watch_stream = stream.try_clone()?;
        let abort = self.abort.clone();
        let label = format!("{host}:{port}");
        thread::Builder::new()
            .name(format!("link-watch-{label}"))
            .spawn(move || {
                let mut stream = watch_stream;
                let mut decoder = decoder;
                loop {
                    match read_frame(&mut stream, &mut decoder) {
                        Ok(Some(Frame::Abort { reason })) => {
                            abort.abort(&reason);
                            return;
                        }
                        Ok(Some(Frame::Fin)) | Ok(None) | Err(_) => return,
                        Ok(Some(_)) => {}
                    }
                }
            })
            .expect("spawn link watchdog");
        Ok(FrameWriter::spawn(
            stream,
            self.abort.clone(),
            format!("link-{}-{label}", self.manager_id),
        ))
    }

    /// Destinations whose port lies outside the local range are dialed
    /// through the configured relay with a LOCATION circuit hello.
    fn dial(&self, host: &str, port: u16) -> Result<TcpStream, RuntimeError> {
        if let Some(relay) = &self.relay {
            let (lo, hi) = relay.local_ports;
            if port < lo || port > hi {
                let mut stream = connect_with_retry(&relay.addr, Duration::from_secs(5))?;
                let hello = encode_frame(&Frame::Location {
                    name: String::new(),
                    host: host.to_string(),
                    port,
                })
                .expect("encode relay hello");
                stream.write_all(&hello)?;
                return Ok(stream);
            }
        }
        Ok(connect_with_retry(
            &format!("{host}:{port}"),
            Duration::from_secs(5),
        )?)
    }

    fn shutdown_all(&self) {
        self.closing.store(true, Ordering::Release);
        let map = self.map.lock().unwrap();
        for writer in map.values() {
            writer.set_quiet();
            let _ = writer.send(Frame::Fin);
            writer.shutdown();
        }
    }
}

/// Sends messages to an instance hosted by another manager by framing
/// them onto the link to that manager.
struct RemoteSender {
    links: Arc<Links>,
    host: String,
    port: u16,
}

impl MessageOutbound for RemoteSender {
    fn send(&self, message: Message) -> Result<(), SendError> {
        let writer = self.links.get_or_connect(&self.host, self.port)?;
        writer.send(Frame::Data {
            src: message.src,
            dst: message.dst,
            timestamp: message.timestamp,
            payload: message.payload,
        })
    }
}

/// Everything the manager's threads share.
struct LmCore {
    manager_id: String,
    placement: BTreeMap<String, String>,
    manager_ids: BTreeSet<String>,
    abort: AbortToken,
    conn: RegistryConn,
    links: Arc<Links>,
    advertise: (String, u16),
    /// Senders for local in-port queues whose source is not a local
    /// thread (a remote instance or a locally attached external process).
    inbound: Mutex<HashMap<Endpoint, MessageSender>>,
    /// src instance -> local in-port endpoints it feeds; used to close
    /// queues when a DEREGISTER marker for that instance arrives.
    src_feeds: HashMap<String, Vec<Endpoint>>,
    /// Conduit routing for locally attached external instances:
    /// src endpoint -> (destination, filter chain).
    ext_routes: HashMap<Endpoint, (Endpoint, Vec<FilterSpec>)>,
    /// Parked in-port receivers for external instances, taken at attach.
    ext_ports: Mutex<HashMap<String, BTreeMap<String, MessageReceiver>>>,
    /// Remote destination instances per external instance, for markers.
    ext_remote_dsts: HashMap<String, BTreeSet<String>>,
    /// Out-conduits with a remote destination, per locally threaded
    /// instance: (out port, destination endpoint, filter chain).
    remote_out_conduits: HashMap<String, Vec<(String, Endpoint, Vec<FilterSpec>)>>,
    externals: BTreeSet<String>,
    ext_done: Mutex<BTreeSet<String>>,
    ext_cond: Condvar,
    resolve_cache: Mutex<HashMap<String, (String, u16)>>,
    closing: AtomicBool,
    aux_threads: Mutex<Vec<JoinHandle<()>>>,
    conn_socks: Mutex<Vec<TcpStream>>,
}

impl LmCore {
    fn fail_fast(&self, reason: &str) {
        if !self.abort.is_aborted() {
            self.conn.abort_all(reason);
        }
    }

    fn resolve_cached(&self, instance: &str) -> Result<(String, u16), RuntimeError> {
        if let Some(found) = self.resolve_cache.lock().unwrap().get(instance) {
            return Ok(found.clone());
        }
        let location = self.conn.resolve(instance)?;
        self.resolve_cache
            .lock()
            .unwrap()
            .insert(instance.to_string(), location.clone());
        Ok(location)
    }

    /// Closes every local queue fed by `src`: its messages have all been
    /// delivered (the marker travels in-band behind them).
    fn drop_senders_from(&self, src: &str) {
        if let Some(endpoints) = self.src_feeds.get(src) {
            let mut inbound = self.inbound.lock().unwrap();
            for endpoint in endpoints {
                inbound.remove(endpoint);
            }
        }
    }

    fn deliver_local(&self, message: Message) -> Result<(), SendError> {
        let inbound = self.inbound.lock().unwrap();
        match inbound.get(&message.dst) {
            Some(sender) => sender.send(message),
            None => Err(SendError::ChannelClosed),
        }
    }

    fn mark_external_done(&self, name: &str) {
        self.ext_done.lock().unwrap().insert(name.to_string());
        self.ext_cond.notify_all();
    }

    fn spawn_aux<F: FnOnce() + Send + 'static>(&self, name: &str, f: F) {
        let handle = thread::Builder::new()
            .name(name.to_string())
            .spawn(f)
            .expect("spawn runtime thread");
        self.aux_threads.lock().unwrap().push(handle);
    }

    fn track_conn(&self, stream: &TcpStream) {
        self.abort.watch_socket(stream);
        if let Ok(clone) = stream.try_clone() {
            self.conn_socks.lock().unwrap().push(clone);
        }
    }
}

pub(super) fn run_local_manager(
    plan: &RunPlan,
    manager_id: &str,
    conn: RegistryConn,
    impls: &ImplRegistry,
    abort: AbortToken,
    options: &RunOptions,
) -> Result<Vec<InstanceReport>, RuntimeError> {
    let cfg = plan
        .managers
        .get(manager_id)
        .ok_or_else(|| RuntimeError::Plan(format!("unknown manager {manager_id}")))?;
    let topology = &plan.doc.topology;
    let is_local = |instance: &str| plan.placement.get(instance).map(String::as_str) == Some(manager_id);

    let mut local_specs: Vec<InstanceSpec> = topology
        .instances
        .iter()
        .filter(|i| is_local(&i.name))
        .cloned()
        .collect();
    if let Some(order) = &options.start_order {
        let rank = |name: &str| {
            order
                .iter()
                .position(|n| n == name)
                .unwrap_or(usize::MAX)
        };
        local_specs.sort_by_key(|spec| rank(&spec.name));
    }
    let externals: BTreeSet<String> = local_specs
        .iter()
        .filter(|s| s.impl_id == EXTERNAL_IMPL_ID)
        .map(|s| s.name.clone())
        .collect();

    // Create every local implementation up front so an unknown or failing
    // implementation is a startup error, before any instance runs.
    let mut created: BTreeMap<String, InstanceImpl> = BTreeMap::new();
    for spec in &local_specs {
        created.insert(spec.name.clone(), impls.create(spec)?);
    }

    let needs_listener = plan.managers.len() > 1 || !externals.is_empty();
    let listener = if needs_listener {
        let listener = TcpListener::bind(&cfg.bind)?;
        listener.set_nonblocking(true)?;
        Some(listener)
    } else {
        None
    };
    let advertise = match &listener {
        Some(l) => {
            let addr = l.local_addr()?;
            (addr.ip().to_string(), addr.port())
        }
        None => ("local".to_string(), 0),
    };

    // Build the in-port queues for every conduit that ends here. Senders
    // for locally threaded sources are handed to those threads; all other
    // senders go to the inbound routing table.
    let mut receivers: HashMap<String, BTreeMap<String, MessageReceiver>> = HashMap::new();
    let mut thread_out: HashMap<String, Vec<(String, Endpoint, Vec<FilterSpec>, MessageSender)>> =
        HashMap::new();
    let mut inbound: HashMap<Endpoint, MessageSender> = HashMap::new();
    let mut src_feeds: HashMap<String, Vec<Endpoint>> = HashMap::new();
    for conduit in &topology.conduits {
        if !is_local(&conduit.to.instance) {
            continue;
        }
        let (tx, rx) = channel(&abort);
        receivers
            .entry(conduit.to.instance.clone())
            .or_default()
            .insert(conduit.to.port.clone(), rx);
        let src = &conduit.from.instance;
        if is_local(src) && !externals.contains(src) {
            thread_out.entry(src.clone()).or_default().push((
                conduit.from.port.clone(),
                conduit.to.clone(),
                conduit.filters.clone(),
                tx,
            ));
        } else {
            inbound.insert(conduit.to.clone(), tx);
            src_feeds
                .entry(src.clone())
                .or_default()
                .push(conduit.to.clone());
        }
    }

    let mut ext_routes = HashMap::new();
    let mut ext_remote_dsts: HashMap<String, BTreeSet<String>> = HashMap::new();
    let mut remote_out_conduits: HashMap<String, Vec<(String, Endpoint, Vec<FilterSpec>)>> =
        HashMap::new();
    for name in &externals {
        ext_remote_dsts.entry(name.clone()).or_default();
    }
    for conduit in &topology.conduits {
        if externals.contains(&conduit.from.instance) {
            ext_routes.insert(
                conduit.from.clone(),
                (conduit.to.clone(), conduit.filters.clone()),
            );
            if !is_local(&conduit.to.instance) {
                ext_remote_dsts
                    .entry(conduit.from.instance.clone())
                    .or_default()
                    .insert(conduit.to.instance.clone());
            }
        } else if is_local(&conduit.from.instance) && !is_local(&conduit.to.instance) {
            remote_out_conduits
                .entry(conduit.from.instance.clone())
                .or_default()
                .push((
                    conduit.from.port.clone(),
                    conduit.to.clone(),
                    conduit.filters.clone(),
                ));
        }
    }

    let ext_ports: HashMap<String, BTreeMap<String, MessageReceiver>> = externals
        .iter()
        .map(|name| (name.clone(), receivers.remove(name).unwrap_or_default()))
        .collect();

    let links = Arc::new(Links {
        manager_id: manager_id.to_string(),
        abort: abort.clone(),
        relay: cfg.relay.clone(),
        closing: AtomicBool::new(false),
        map: Mutex::new(HashMap::new()),
    });

    let core = Arc::new(LmCore {
        manager_id: manager_id.to_string(),
        placement: plan.placement.clone(),
        manager_ids: plan.managers.keys().cloned().collect(),
        abort: abort.clone(),
        conn: conn.clone(),
        links,
        advertise,
        inbound: Mutex::new(inbound),
        src_feeds,
        ext_routes,
        ext_ports: Mutex::new(ext_ports),
        ext_remote_dsts,
        remote_out_conduits,
        externals: externals.clone(),
        ext_done: Mutex::new(BTreeSet::new()),
        ext_cond: Condvar::new(),
        resolve_cache: Mutex::new(HashMap::new()),
        closing: AtomicBool::new(false),
        aux_threads: Mutex::new(Vec::new()),
        conn_socks: Mutex::new(Vec::new()),
    });

    if let Some(listener) = listener {
        let core = core.clone();
        core.clone().spawn_aux("lm-accept", move || accept_loop(core, listener));
    }

    // Start the locally threaded instances in the requested order.
    let mut handles = Vec::new();
    for spec in &local_specs {
        if externals.contains(&spec.name) {
            continue;
        }
        let imp = created.remove(&spec.name).expect("created above");
        let outs = thread_out.remove(&spec.name).unwrap_or_default();
        let ins = receivers.remove(&spec.name).unwrap_or_default();
        let core = core.clone();
        let spec = spec.clone();
        let handle = thread::Builder::new()
            .name(format!("instance-{}", spec.name))
            .spawn(move || run_instance_thread(core, spec, imp, outs, ins))
            .expect("spawn instance thread");
        handles.push(handle);
    }

    let mut reports: Vec<InstanceReport> = handles
        .into_iter()
        .map(|handle| handle.join().unwrap_or_else(|_| InstanceReport {
            name: "unknown".into(),
            outcome: InstanceOutcome::Failed("instance thread panicked".into()),
            wall: Duration::ZERO,
        }))
        .collect();

    // Wait for locally placed external instances to finish (or abort).
    {
        let mut done = core.ext_done.lock().unwrap();
        while done.len() < core.externals.len() && !abort.is_aborted() {
            let (next, _) = core
                .ext_cond
                .wait_timeout(done, Duration::from_millis(50))
                .unwrap();
            done = next;
        }
        for name in &core.externals {
            reports.push(InstanceReport {
                name: name.clone(),
                outcome: if done.contains(name) {
                    InstanceOutcome::Completed(Default::default())
                } else {
                    InstanceOutcome::Aborted
                },
                wall: Duration::ZERO,
            });
        }
    }

    // Everything local is finished; wait for the global outcome before
    // tearing down, so late traffic from other managers still routes.
    if !abort.is_aborted() {
        conn.wait_outcome(options.fin_grace);
    }

    core.closing.store(true, Ordering::Release);
    core.links.shutdown_all();
    for stream in core.conn_socks.lock().unwrap().iter() {
        let _ = stream.shutdown(Shutdown::Both);
    }
    let aux = std::mem::take(&mut *core.aux_threads.lock().unwrap());
    for handle in aux {
        let _ = handle.join();
    }
    Ok(reports)
}

/// Body of one instance thread: register, resolve destinations, run the
/// kernel driver, flush completion markers, deregister. Any error
/// escalates fail-fast.
fn run_instance_thread(
    core: Arc<LmCore>,
    spec: InstanceSpec,
    imp: InstanceImpl,
    outs: Vec<(String, Endpoint, Vec<FilterSpec>, MessageSender)>,
    ins: BTreeMap<String, MessageReceiver>,
) -> InstanceReport {
    let start = Instant::now();
    let name = spec.name.clone();
    let result = instance_body(&core, &spec, imp, outs, ins);
    let outcome = match result {
        Ok(stats) => InstanceOutcome::Completed(stats),
        Err(err) => {
            let text = err.to_string();
            let was_abort = core.abort.is_aborted()
                || matches!(
                    err,
                    RuntimeError::Kernel(KernelError::Receive(ReceiveError::Aborted))
                        | RuntimeError::Aborted(_)
                );
            if was_abort {
                InstanceOutcome::Aborted
            } else {
                core.fail_fast(&format!("instance {name} failed: {text}"));
                InstanceOutcome::Failed(text)
            }
        }
    };
    InstanceReport {
        name,
        outcome,
        wall: start.elapsed(),
    }
}

fn instance_body(
    core: &Arc<LmCore>,
    spec: &InstanceSpec,
    imp: InstanceImpl,
    outs: Vec<(String, Endpoint, Vec<FilterSpec>, MessageSender)>,
    ins: BTreeMap<String, MessageReceiver>,
) -> Result<kernel::RunStats, RuntimeError> {
    core.conn
        .register(&spec.name, &core.advertise.0, core.advertise.1)?;

    let sel_options = SelOptions::from_params(spec);
    let phased = spec.kind == InstanceKind::Submodel;
    let mut ports = InstancePorts::new(spec.name.clone(), phased, sel_options.strict);
    for (port, dst, filters, sender) in outs {
        ports.add_out(port, dst, filters, Box::new(sender));
    }
    // Destinations on other managers: resolve now (blocking until they
    // register), so later sends never wait on the registry.
    let mut remote_addrs: BTreeSet<(String, u16)> = BTreeSet::new();
    let mut remote_conduits = Vec::new();
    for (port, dst, filters) in spec_conduits(core, &spec.name) {
        let (host, tcp_port) = core.resolve_cached(&dst.instance)?;
        remote_addrs.insert((host.clone(), tcp_port));
        remote_conduits.push((port, dst, filters, host, tcp_port));
    }
    for (port, dst, filters, host, tcp_port) in remote_conduits {
        ports.add_out(
            port,
            dst,
            filters,
            Box::new(RemoteSender {
                links: core.links.clone(),
                host,
                port: tcp_port,
            }),
        );
    }
    for (port, receiver) in ins {
        ports.add_in(port, receiver);
    }

    let stats = match catch_unwind(AssertUnwindSafe(|| {
        kernel::run_instance(&mut ports, spec, imp, &sel_options)
    })) {
        Ok(result) => result?,
        Err(_) => {
            return Err(RuntimeError::Protocol(format!(
                "instance {} panicked",
                spec.name
            )))
        }
    };

    // Completion markers follow the instance's data in-band on each link,
    // then the local queues close by dropping the port senders.
    for (host, port) in &remote_addrs {
        core.links
            .get_or_connect(host, *port)
            .and_then(|writer| {
                writer.send(Frame::Deregister {
                    name: spec.name.clone(),
                })
            })
            .map_err(KernelError::Send)?;
    }
    drop(ports);
    core.conn.deregister(&spec.name)?;
    Ok(stats)
}

/// Out-conduits of `instance` whose destination lives on another manager.
fn spec_conduits(
    core: &LmCore,
    instance: &str,
) -> Vec<(String, Endpoint, Vec<FilterSpec>)> {
    core.remote_out_conduits
        .get(instance)
        .cloned()
        .unwrap_or_default()
}

fn accept_loop(core: Arc<LmCore>, listener: TcpListener) {
    loop {
        if core.closing.load(Ordering::Acquire) || core.abort.is_aborted() {
            return;
        }
        match listener.accept() {
            Ok((stream, _peer)) => {
                core.track_conn(&stream);
                let conn_core = core.clone();
                core.spawn_aux("lm-conn", move || handle_connection(conn_core, stream));
            }
            Err(ref e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(3));
            }
            Err(_) => return,
        }
    }
}

fn handle_connection(core: Arc<LmCore>, mut stream: TcpStream) {
    let mut decoder = FrameDecoder::new();
    let first = match read_frame(&mut stream, &mut decoder) {
        Ok(Some(frame)) => frame,
        _ => return,
    };
    match first {
        Frame::Register { name, .. } if core.manager_ids.contains(&name) => {
            data_link_session(core, stream, decoder, name)
        }
        Frame::Register { name, .. } if core.externals.contains(&name) => {
            attach_session(core, stream, decoder, name)
        }
        other => {
            core.fail_fast(&format!(
                "bad handshake on data listener: first frame has opcode {:#04x}",
                other.opcode()
            ));
        }
    }
}

fn write_ack(stream: &mut TcpStream) -> bool {
    let bytes = encode_frame(&Frame::RegisterAck { ok: true }).expect("encode ack");
    stream.write_all(&bytes).is_ok()
}

/// Serves one inter-manager data link: DATA frames route into local
/// queues, DEREGISTER markers close the queues fed by that instance.
fn data_link_session(
    core: Arc<LmCore>,
    mut stream: TcpStream,
    mut decoder: FrameDecoder,
    peer: String,
) {
    if !write_ack(&mut stream) {
        return;
    }
    loop {
        match read_frame(&mut stream, &mut decoder) {
            Ok(Some(Frame::Data {
                src,
                dst,
                timestamp,
                payload,
            })) => {
                let message = Message {
                    src,
                    dst,
                    timestamp,
                    payload,
                };
                if let Err(err) = core.deliver_local(message) {
                    core.fail_fast(&format!(
                        "data link from {peer}: cannot deliver message: {err}"
                    ));
                    return;
                }
            }
            Ok(Some(Frame::Deregister { name })) => core.drop_senders_from(&name),
            Ok(Some(Frame::Abort { reason })) => {
                core.fail_fast(&reason);
                return;
            }
            Ok(Some(Frame::Fin)) | Ok(None) => return,
            Ok(Some(other)) => {
                core.fail_fast(&format!(
                    "unexpected frame opcode {:#04x} on data link from {peer}",
                    other.opcode()
                ));
                return;
            }
            Err(_) => {
                if !core.closing.load(Ordering::Acquire) {
                    core.fail_fast(&format!("data link from {peer} failed"));
                }
                return;
            }
        }
    }
}

/// Bridges an external process into the runtime. Its DATA frames are
/// routed as if sent by an in-process instance (conduit filters included);
/// messages addressed to it are forwarded down the connection; FIN
/// triggers deregistration; a dropped connection aborts the run.
fn attach_session(
    core: Arc<LmCore>,
    mut stream: TcpStream,
    mut decoder: FrameDecoder,
    name: String,
) {
    let ports = core.ext_ports.lock().unwrap().remove(&name);
    let Some(ports) = ports else {
        core.fail_fast(&format!("duplicate attach for external instance {name}"));
        return;
    };
    if let Err(err) = core
        .conn
        .register(&name, &core.advertise.0, core.advertise.1)
    {
        core.fail_fast(&format!("external instance {name}: {err}"));
        return;
    }
    if !write_ack(&mut stream) {
        core.fail_fast(&format!("external instance {name}: connection lost"));
        return;
    }

    let writer = match stream.try_clone() {
        Ok(clone) => FrameWriter::spawn(clone, core.abort.clone(), format!("attach-{name}")),
        Err(_) => {
            core.fail_fast(&format!("external instance {name}: connection lost"));
            return;
        }
    };
    // One bridge per in-port forwards queued messages down the wire; each
    // finishes when its upstream closes.
    for (port, receiver) in ports {
        let writer = writer.clone();
        let label = format!("bridge-{name}-{port}");
        core.spawn_aux(&label, move || loop {
            match receiver.receive() {
                Ok(message) => {
                    if writer
                        .send(Frame::Data {
                            src: message.src,
                            dst: message.dst,
                            timestamp: message.timestamp,
                            payload: message.payload,
                        })
                        .is_err()
                    {
                        return;
                    }
                }
                Err(_) => return,
            }
        });
    }

    loop {
        match read_frame(&mut stream, &mut decoder) {
            Ok(Some(Frame::Data {
                src,
                timestamp,
                payload,
                ..
            })) => {
                if src.instance != name {
                    core.fail_fast(&format!(
                        "external instance {name} sent a frame claiming source {}",
                        src.instance
                    ));
                    return;
                }
                let Some((dst, filters)) = core.ext_routes.get(&src) else {
                    core.fail_fast(&format!("external instance {name}: port {} is not connected", src.port));
                    return;
                };
                let payload = match kernel::apply_filter_chain(filters, payload) {
                    Ok(p) => p,
                    Err(err) => {
                        core.fail_fast(&format!("external instance {name}: {err}"));
                        return;
                    }
                };
                let message = Message {
                    src: src.clone(),
                    dst: dst.clone(),
                    timestamp,
                    payload,
                };
                let delivered = if core
                    .placement
                    .get(&dst.instance)
                    .map(String::as_str)
                    == Some(core.manager_id.as_str())
                {
                    core.deliver_local(message).map_err(RuntimeError::from_send)
                } else {
                    core.resolve_cached(&dst.instance).and_then(|(host, port)| {
                        core.links
                            .get_or_connect(&host, port)
                            .and_then(|writer| {
                                writer.send(Frame::Data {
                                    src: message.src,
                                    dst: message.dst,
                                    timestamp: message.timestamp,
                                    payload: message.payload,
                                })
                            })
                            .map_err(RuntimeError::from_send)
                    })
                };
                if let Err(err) = delivered {
                    core.fail_fast(&format!("external instance {name}: {err}"));
                    return;
                }
            }
            Ok(Some(Frame::Fin)) => {
                let result = external_completion(&core, &name);
                if let Err(err) = result {
                    core.fail_fast(&format!("external instance {name}: {err}"));
                }
                return;
            }
            Ok(Some(Frame::Abort { reason })) => {
                core.fail_fast(&reason);
                return;
            }
            Ok(Some(other)) => {
                core.fail_fast(&format!(
                    "external instance {name} sent unexpected opcode {:#04x}",
                    other.opcode()
                ));
                return;
            }
            Ok(None) | Err(_) => {
                if !core.closing.load(Ordering::Acquire) && !core.abort.is_aborted() {
                    core.fail_fast(&format!(
                        "external instance {name} disconnected without FIN"
                    ));
                }
                return;
            }
        }
    }
}

fn external_completion(core: &Arc<LmCore>, name: &str) -> Result<(), RuntimeError> {
    if let Some(dsts) = core.ext_remote_dsts.get(name) {
        for dst_instance in dsts {
            let (host, port) = core.resolve_cached(dst_instance)?;
            core.links
                .get_or_connect(&host, port)
                .and_then(|writer| {
                    writer.send(Frame::Deregister {
                        name: name.to_string(),
                    })
                })
                .map_err(RuntimeError::from_send)?;
        }
    }
    core.drop_senders_from(name);
    core.conn.deregister(name)?;
    core.mark_external_done(name);
    Ok(())
}

impl RuntimeError {
    fn from_send(err: SendError) -> RuntimeError {
        RuntimeError::Kernel(KernelError::Send(err))
    }
}
