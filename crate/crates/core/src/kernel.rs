//! The instance-facing API: the submodel execution loop, phase-checked
//! port I/O, mappers, terminals, and conduit filters.
//!
//! A submodel runs `init`, then alternates an intermediate observation and
//! a solve step until its local time reaches the configured total time,
//! then runs a final observation. The loop restarts when a message is
//! pending on the designated restart in-port. In strict mode (the default)
//! output is only allowed during observations and input only during init
//! and solve steps.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::codec::Payload;
use crate::topology::{Endpoint, FilterSpec, InstanceKind, InstanceSpec, ScaleSpec};
use crate::transport::{Message, MessageReceiver, MessageSender, ReceiveError, SendError};

/// Phase of the submodel execution loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelPhase {
    Init,
    ObservationIntermediate,
    Solve,
    ObservationFinal,
    Done,
}

impl SelPhase {
    /// Legal phase transitions of the loop, including the restart edge
    /// from the final observation back to init.
    pub fn can_transition(from: SelPhase, to: SelPhase) -> bool {
        use SelPhase::*;
        matches!(
            (from, to),
            (Init, ObservationIntermediate)
                | (ObservationIntermediate, Solve)
                | (ObservationIntermediate, ObservationFinal)
                | (Solve, ObservationIntermediate)
                | (ObservationFinal, Done)
                | (ObservationFinal, Init)
        )
    }

    /// Whether sending on an out-port is allowed in this phase.
    pub fn allows_send(self) -> bool {
        matches!(
            self,
            SelPhase::ObservationIntermediate | SelPhase::ObservationFinal
        )
    }

    /// Whether receiving on an in-port is allowed in this phase.
    pub fn allows_receive(self) -> bool {
        matches!(self, SelPhase::Init | SelPhase::Solve)
    }
}

impl fmt::Display for SelPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            SelPhase::Init => "init",
            SelPhase::ObservationIntermediate => "intermediate observation",
            SelPhase::Solve => "solve",
            SelPhase::ObservationFinal => "final observation",
            SelPhase::Done => "done",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum KernelError {
    #[error("phase violation: {operation} on port {port} during {phase}")]
    PhaseViolation {
        port: String,
        phase: SelPhase,
        operation: &'static str,
    },
    #[error("port {0} is not connected to a conduit")]
    UnconnectedPort(String),
    #[error("timestamp regression on port {port}: last {last}, got {t}")]
    TimestampRegression { port: String, last: f64, t: f64 },
    #[error("timestamp {0} is not finite and non-negative")]
    InvalidTimestamp(f64),
    #[error("filter {filter} cannot apply to {payload} payload")]
    TypeMismatch {
        filter: &'static str,
        payload: &'static str,
    },
    #[error("malformed filter input: {0}")]
    MalformedFilterInput(String),
    #[error("implementation kind does not match instance kind {expected}")]
    KindMismatch { expected: InstanceKind },
    #[error(transparent)]
    Send(#[from] SendError),
    #[error(transparent)]
    Receive(#[from] ReceiveError),
    #[error("{0}")]
    Failed(String),
}

impl KernelError {
    /// Convenience for instance implementations reporting their own errors.
    pub fn failed(msg: impl Into<String>) -> Self {
        KernelError::Failed(msg.into())
    }
}

/// Per-in-port monotonicity check: accepts timestamps iff they do not
/// decrease, updating the last-seen value.
#[derive(Debug, Default, Clone)]
pub struct TimestampGuard {
    last: Option<f64>,
}

impl TimestampGuard {
    pub fn check(&mut self, port: &str, t: f64) -> Result<(), KernelError> {
        if let Some(last) = self.last {
            if !(t >= last) {
                return Err(KernelError::TimestampRegression {
                    port: port.to_string(),
                    last,
                    t,
                });
            }
        }
        self.last = Some(t);
        Ok(())
    }
}

/// Destination for outgoing messages: an in-process channel or a handle
/// into the socket layer.
pub trait MessageOutbound: Send {
    fn send(&self, message: Message) -> Result<(), SendError>;
}

impl MessageOutbound for MessageSender {
    fn send(&self, message: Message) -> Result<(), SendError> {
        MessageSender::send(self, message)
    }
}

struct OutPort {
    dst: Endpoint,
    filters: Vec<FilterSpec>,
    sender: Box<dyn MessageOutbound>,
}

struct InPort {
    receiver: MessageReceiver,
    guard: TimestampGuard,
    pushback: Option<(Payload, f64)>,
}

/// The ports of one running instance, with the phase state machine for
/// submodels. All operations are called from the instance's own thread.
pub struct InstancePorts {
    instance: String,
    outs: BTreeMap<String, OutPort>,
    ins: BTreeMap<String, InPort>,
    /// `Some` for submodels (phase-checked), `None` for mappers/terminals.
    phase: Option<SelPhase>,
    strict: bool,
    sent: u64,
    received: u64,
}

impl InstancePorts {
    pub fn new(instance: impl Into<String>, phased: bool, strict: bool) -> Self {
        InstancePorts {
            instance: instance.into(),
            outs: BTreeMap::new(),
            ins: BTreeMap::new(),
            phase: phased.then_some(SelPhase::Init),
            strict,
            sent: 0,
            received: 0,
        }
    }

    pub fn instance_name(&self) -> &str {
        &self.instance
    }

    pub fn add_out(
        &mut self,
        port: impl Into<String>,
        dst: Endpoint,
        filters: Vec<FilterSpec>,
        sender: Box<dyn MessageOutbound>,
    ) {
        self.outs.insert(port.into(), OutPort { dst, filters, sender });
    }

    pub fn add_in(&mut self, port: impl Into<String>, receiver: MessageReceiver) {
        self.ins.insert(
            port.into(),
            InPort {
                receiver,
                guard: TimestampGuard::default(),
                pushback: None,
            },
        );
    }

    pub fn has_out_port(&self, port: &str) -> bool {
        self.outs.contains_key(port)
    }

    pub fn has_in_port(&self, port: &str) -> bool {
        self.ins.contains_key(port)
    }

    pub fn in_port_names(&self) -> Vec<String> {
        self.ins.keys().cloned().collect()
    }

    pub fn out_port_names(&self) -> Vec<String> {
        self.outs.keys().cloned().collect()
    }

    pub fn messages_sent(&self) -> u64 {
        self.sent
    }

    pub fn messages_received(&self) -> u64 {
        self.received
    }

    pub fn phase(&self) -> Option<SelPhase> {
        self.phase
    }

    fn set_phase(&mut self, next: SelPhase) {
        if let Some(current) = self.phase {
            assert!(
                SelPhase::can_transition(current, next),
                "illegal phase transition {current} -> {next}"
            );
            self.phase = Some(next);
        }
    }

    fn check_phase(&self, port: &str, operation: &'static str) -> Result<(), KernelError> {
        let Some(phase) = self.phase else {
            return Ok(());
        };
        if !self.strict {
            return Ok(());
        }
        let allowed = match operation {
            "send" => phase.allows_send(),
            _ => phase.allows_receive(),
        };
        if allowed {
            Ok(())
        } else {
            Err(KernelError::PhaseViolation {
                port: port.to_string(),
                phase,
                operation,
            })
        }
    }

    /// Sends a payload through the port's conduit: the filter chain is
    /// applied, the result is wrapped in a message stamped with `t`, and
    /// handed to the transport without blocking.
    pub fn send(&mut self, port: &str, payload: Payload, t: f64) -> Result<(), KernelError> {
        self.check_phase(port, "send")?;
        if !(t.is_finite() && t >= 0.0) {
            return Err(KernelError::InvalidTimestamp(t));
        }
        let out = self
            .outs
            .get(port)
            .ok_or_else(|| KernelError::UnconnectedPort(port.to_string()))?;
        let payload = apply_filter_chain(&out.filters, payload)?;
        out.sender.send(Message {
            src: Endpoint::new(self.instance.clone(), port),
            dst: out.dst.clone(),
            timestamp: t,
            payload,
        })?;
        self.sent += 1;
        Ok(())
    }

    /// Blocking receive on an in-port, followed by the timestamp
    /// monotonicity check.
    pub fn receive(&mut self, port: &str) -> Result<(Payload, f64), KernelError> {
        self.check_phase(port, "receive")?;
        let in_port = self
            .ins
            .get_mut(port)
            .ok_or_else(|| KernelError::UnconnectedPort(port.to_string()))?;
        let (payload, t) = match in_port.pushback.take() {
            Some(stashed) => stashed,
            None => {
                let message = in_port.receiver.receive()?;
                (message.payload, message.timestamp)
            }
        };
        in_port.guard.check(port, t)?;
        self.received += 1;
        Ok((payload, t))
    }

    /// Non-blocking receive; `Ok(None)` when nothing is queued.
    pub fn try_receive(&mut self, port: &str) -> Result<Option<(Payload, f64)>, KernelError> {
        self.check_phase(port, "receive")?;
        let in_port = self
            .ins
            .get_mut(port)
            .ok_or_else(|| KernelError::UnconnectedPort(port.to_string()))?;
        let (payload, t) = match in_port.pushback.take() {
            Some(stashed) => stashed,
            None => match in_port.receiver.try_receive()? {
                Some(message) => (message.payload, message.timestamp),
                None => return Ok(None),
            },
        };
        in_port.guard.check(port, t)?;
        self.received += 1;
        Ok(Some((payload, t)))
    }

    /// Blocks until a message is pending on `port` and leaves it queued
    /// for the next `receive`. Returns false if the queue closed instead.
    /// Used by the loop driver to arm a restart.
    fn peek_blocking(&mut self, port: &str) -> Result<bool, KernelError> {
        let in_port = self
            .ins
            .get_mut(port)
            .ok_or_else(|| KernelError::UnconnectedPort(port.to_string()))?;
        if in_port.pushback.is_some() {
            return Ok(true);
        }
        match in_port.receiver.receive() {
            Ok(message) => {
                in_port.pushback = Some((message.payload, message.timestamp));
                Ok(true)
            }
            Err(ReceiveError::QueueClosed) => Ok(false),
            Err(err) => Err(err.into()),
        }
    }
}

/// Callbacks of a formal submodel.
pub trait Submodel: Send {
    fn init(&mut self, ports: &mut InstancePorts, t: f64) -> Result<(), KernelError>;
    fn intermediate_observation(
        &mut self,
        ports: &mut InstancePorts,
        t: f64,
    ) -> Result<(), KernelError>;
    fn solve_step(&mut self, ports: &mut InstancePorts, t: f64, dt: f64)
        -> Result<(), KernelError>;
    fn final_observation(&mut self, ports: &mut InstancePorts, t: f64)
        -> Result<(), KernelError>;
}

/// Messages collected for one mapper activation, keyed by in-port.
#[derive(Debug, Default)]
pub struct MapperInputs {
    messages: BTreeMap<String, (Payload, f64)>,
}

impl MapperInputs {
    pub fn get(&self, port: &str) -> Option<&(Payload, f64)> {
        self.messages.get(port)
    }

    pub fn take(&mut self, port: &str) -> Option<(Payload, f64)> {
        self.messages.remove(port)
    }

    pub fn ports(&self) -> impl Iterator<Item = &str> {
        self.messages.keys().map(|s| s.as_str())
    }
}

/// A mapper combines or splits messages: it is activated once every time
/// all of its in-ports have a pending message, and may write any subset of
/// its out-ports.
pub trait Mapper: Send {
    fn activate(
        &mut self,
        inputs: &mut MapperInputs,
        ports: &mut InstancePorts,
    ) -> Result<(), KernelError>;
}

/// A source injects external data; `produce` returns false when exhausted.
pub trait Source: Send {
    fn produce(&mut self, ports: &mut InstancePorts) -> Result<bool, KernelError>;
}

/// A sink consumes observations until all of its in-ports close.
pub trait Sink: Send {
    fn consume(&mut self, port: &str, payload: Payload, t: f64) -> Result<(), KernelError>;
}

/// One registered implementation, matching the instance kind it drives.
pub enum InstanceImpl {
    Submodel(Box<dyn Submodel>),
    Mapper(Box<dyn Mapper>),
    Source(Box<dyn Source>),
    Sink(Box<dyn Sink>),
    /// Provided by an external process attaching over the frame protocol.
    External,
}

impl InstanceImpl {
    pub fn kind_matches(&self, kind: InstanceKind) -> bool {
        matches!(
            (self, kind),
            (InstanceImpl::Submodel(_), InstanceKind::Submodel)
                | (InstanceImpl::Mapper(_), InstanceKind::Mapper)
                | (InstanceImpl::Source(_), InstanceKind::Source)
                | (InstanceImpl::Sink(_), InstanceKind::Sink)
                | (InstanceImpl::External, _)
        )
    }
}

/// Driver options for one instance.
#[derive(Debug, Clone)]
pub struct SelOptions {
    /// Enforce the phase rules on port operations. On by default.
    pub strict: bool,
    /// In-port that arms a loop restart when a message is pending on it
    /// after the final observation.
    pub restart_port: String,
}

impl Default for SelOptions {
    fn default() -> Self {
        SelOptions {
            strict: true,
            restart_port: "restart".into(),
        }
    }
}

impl SelOptions {
    /// Reads the reserved instance params `strict_phases` and
    /// `restart_port`, falling back to the defaults.
    pub fn from_params(spec: &InstanceSpec) -> Self {
        let mut options = SelOptions::default();
        if let Some(value) = spec.params.get("strict_phases") {
            options.strict = value != "false";
        }
        if let Some(port) = spec.params.get("restart_port") {
            options.restart_port = port.clone();
        }
        options
    }
}

/// Counters reported by the instance drivers.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct RunStats {
    pub passes: u64,
    pub solve_steps: u64,
    pub intermediate_observations: u64,
    pub final_observations: u64,
    pub activations: u64,
    pub messages_sent: u64,
    pub messages_received: u64,
}

/// Drives one instance to completion, dispatching on its kind.
pub fn run_instance(
    ports: &mut InstancePorts,
    spec: &InstanceSpec,
    imp: InstanceImpl,
    options: &SelOptions,
) -> Result<RunStats, KernelError> {
    if !imp.kind_matches(spec.kind) {
        return Err(KernelError::KindMismatch {
            expected: spec.kind,
        });
    }
    match imp {
        InstanceImpl::Submodel(mut submodel) => {
            let scale = spec
                .scale
                .ok_or_else(|| KernelError::failed(format!("submodel {} has no scale", spec.name)))?;
            run_submodel(ports, &scale, submodel.as_mut(), options)
        }
        InstanceImpl::Mapper(mut mapper) => run_mapper(ports, mapper.as_mut()),
        InstanceImpl::Source(mut source) => run_source(ports, source.as_mut()),
        InstanceImpl::Sink(mut sink) => run_sink(ports, sink.as_mut()),
        InstanceImpl::External => Err(KernelError::failed(
            "external instances are driven by the runtime, not the kernel",
        )),
    }
}

fn finish_stats(stats: &mut RunStats, ports: &InstancePorts) {
    stats.messages_sent = ports.messages_sent();
    stats.messages_received = ports.messages_received();
}

/// Runs the submodel execution loop: init at t = 0, then ceil(T/dt) pairs
/// of intermediate observation and solve step with t advancing by dt, then
/// the final observation. Restarts when a message is pending on the
/// restart port; finishes when that port closes or is not connected.
pub fn run_submodel(
    ports: &mut InstancePorts,
    scale: &ScaleSpec,
    submodel: &mut dyn Submodel,
    options: &SelOptions,
) -> Result<RunStats, KernelError> {
    let mut stats = RunStats::default();
    let steps = scale.step_count();
    loop {
        submodel.init(ports, 0.0)?;
        for i in 0..steps {
            let t = i as f64 * scale.dt;
            ports.set_phase(SelPhase::ObservationIntermediate);
            submodel.intermediate_observation(ports, t)?;
            stats.intermediate_observations += 1;
            ports.set_phase(SelPhase::Solve);
            submodel.solve_step(ports, t, scale.dt)?;
            stats.solve_steps += 1;
        }
        let t_final = steps as f64 * scale.dt;
        if steps > 0 {
            ports.set_phase(SelPhase::ObservationIntermediate);
        }
        ports.set_phase(SelPhase::ObservationFinal);
        submodel.final_observation(ports, t_final)?;
        stats.final_observations += 1;
        stats.passes += 1;

        if !ports.has_in_port(&options.restart_port) {
            break;
        }
        if !ports.peek_blocking(&options.restart_port)? {
            break;
        }
        ports.set_phase(SelPhase::Init);
    }
    ports.set_phase(SelPhase::Done);
    finish_stats(&mut stats, ports);
    Ok(stats)
}

/// Activates the mapper whenever every declared in-port has a pending
/// message (join semantics); finishes cleanly when any in-port closes.
pub fn run_mapper(ports: &mut InstancePorts, mapper: &mut dyn Mapper) -> Result<RunStats, KernelError> {
    let mut stats = RunStats::default();
    let in_ports = ports.in_port_names();
    if in_ports.is_empty() {
        return Ok(stats);
    }
    'rounds: loop {
        let mut inputs = MapperInputs::default();
        for port in &in_ports {
            match ports.receive(port) {
                Ok((payload, t)) => {
                    inputs.messages.insert(port.clone(), (payload, t));
                }
                Err(KernelError::Receive(ReceiveError::QueueClosed)) => break 'rounds,
                Err(err) => return Err(err),
            }
        }
        mapper.activate(&mut inputs, ports)?;
        stats.activations += 1;
    }
    finish_stats(&mut stats, ports);
    Ok(stats)
}

/// Invokes `produce` until the source reports exhaustion.
pub fn run_source(ports: &mut InstancePorts, source: &mut dyn Source) -> Result<RunStats, KernelError> {
    let mut stats = RunStats::default();
    while source.produce(ports)? {
        stats.activations += 1;
    }
    finish_stats(&mut stats, ports);
    Ok(stats)
}

/// Delivers messages from every in-port to the sink until all close.
pub fn run_sink(ports: &mut InstancePorts, sink: &mut dyn Sink) -> Result<RunStats, KernelError> {
    let mut stats = RunStats::default();
    let in_ports = ports.in_port_names();
    if in_ports.is_empty() {
        return Ok(stats);
    }
    'rounds: loop {
        for port in &in_ports {
            match ports.receive(port) {
                Ok((payload, t)) => {
                    sink.consume(port, payload, t)?;
                    stats.activations += 1;
                }
                Err(KernelError::Receive(ReceiveError::QueueClosed)) => break 'rounds,
                Err(err) => return Err(err),
            }
        }
    }
    finish_stats(&mut stats, ports);
    Ok(stats)
}

/// Applies a filter chain left to right; the empty chain is the identity.
pub fn apply_filter_chain(
    filters: &[FilterSpec],
    payload: Payload,
) -> Result<Payload, KernelError> {
    let mut current = payload;
    for filter in filters {
        current = apply_filter(filter, current)?;
    }
    Ok(current)
}

fn payload_type_name(payload: &Payload) -> &'static str {
    match payload {
        Payload::Raw(_) => "raw",
        Payload::F64(_) => "f64",
        Payload::F32(_) => "f32",
        Payload::I32(_) => "i32",
        Payload::I64(_) => "i64",
        Payload::Bool(_) => "bool",
        Payload::Str(_) => "string",
    }
}

fn apply_filter(filter: &FilterSpec, payload: Payload) -> Result<Payload, KernelError> {
    match filter {
        FilterSpec::Affine { scale, offset } => match payload {
            Payload::F64(values) => Ok(Payload::F64(
                values.into_iter().map(|x| scale * x + offset).collect(),
            )),
            other => Err(KernelError::TypeMismatch {
                filter: "affine",
                payload: payload_type_name(&other),
            }),
        },
        FilterSpec::Compress => match payload {
            Payload::Raw(bytes) => Ok(Payload::Raw(rle_compress(&bytes))),
            other => Err(KernelError::TypeMismatch {
                filter: "compress",
                payload: payload_type_name(&other),
            }),
        },
        FilterSpec::Decompress => match payload {
            Payload::Raw(bytes) => Ok(Payload::Raw(rle_decompress(&bytes)?)),
            other => Err(KernelError::TypeMismatch {
                filter: "decompress",
                payload: payload_type_name(&other),
            }),
        },
    }
}

/// Byte-level run-length encoding: each maximal run of equal bytes becomes
/// a `(count - 1, value)` pair, with runs capped at 256 bytes. Note that
/// incompressible data expands to twice its size.
pub fn rle_compress(bytes: &[u8]) -> Vec<u8> {
    let mut out = Vec::new();
    let mut iter = bytes.iter().copied();
    let Some(mut current) = iter.next() else {
        return out;
    };
    let mut run: u32 = 1;
    for byte in iter {
        if byte == current && run < 256 {
            run += 1;
        } else {
            out.push((run - 1) as u8);
            out.push(current);
            current = byte;
            run = 1;
        }
    }
    out.push((run - 1) as u8);
    out.push(current);
    out
}

/// Exact inverse of [`rle_compress`]. The input must be an even number of
/// bytes.
pub fn rle_decompress(bytes: &[u8]) -> Result<Vec<u8>, KernelError> {
    if bytes.len() % 2 != 0 {
        return Err(KernelError::MalformedFilterInput(format!(
            "run-length data has odd length {}",
            bytes.len()
        )));
    }
    let mut out = Vec::new();
    for pair in bytes.chunks_exact(2) {
        let count = pair[0] as usize + 1;
        out.extend(std::iter::repeat(pair[1]).take(count));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::{channel, AbortToken};

    /// Records callback invocations; optionally misbehaves for the strict
    /// mode tests.
    #[derive(Default)]
    struct Counting {
        inits: u64,
        intermediates: u64,
        solves: u64,
        finals: u64,
        send_during_solve: bool,
        receive_during_final: bool,
    }

    impl Submodel for Counting {
        fn init(&mut self, _ports: &mut InstancePorts, t: f64) -> Result<(), KernelError> {
            assert_eq!(t, 0.0);
            self.inits += 1;
            Ok(())
        }
        fn intermediate_observation(
            &mut self,
            _ports: &mut InstancePorts,
            _t: f64,
        ) -> Result<(), KernelError> {
            self.intermediates += 1;
            Ok(())
        }
        fn solve_step(
            &mut self,
            ports: &mut InstancePorts,
            _t: f64,
            _dt: f64,
        ) -> Result<(), KernelError> {
            self.solves += 1;
            if self.send_during_solve {
                ports.send("out", Payload::Raw(vec![]), 0.0)?;
            }
            Ok(())
        }
        fn final_observation(
            &mut self,
            ports: &mut InstancePorts,
            _t: f64,
        ) -> Result<(), KernelError> {
            self.finals += 1;
            if self.receive_during_final {
                ports.receive("inp")?;
            }
            Ok(())
        }
    }

    fn bare_ports(phased: bool, strict: bool) -> InstancePorts {
        InstancePorts::new("test", phased, strict)
    }

    #[test]
    fn sel_counts_ten_steps() {
        let mut submodel = Counting::default();
        let mut ports = bare_ports(true, true);
        let stats = run_submodel(
            &mut ports,
            &ScaleSpec::new(1.0, 10.0),
            &mut submodel,
            &SelOptions::default(),
        )
        .unwrap();
        assert_eq!(submodel.solves, 10);
        assert_eq!(submodel.intermediates, 10);
        assert_eq!(submodel.finals, 1);
        assert_eq!(stats.solve_steps, 10);
        assert_eq!(stats.passes, 1);
        assert_eq!(ports.phase(), Some(SelPhase::Done));
    }

    #[test]
    fn sel_minimal_loop() {
        let mut submodel = Counting::default();
        let mut ports = bare_ports(true, true);
        run_submodel(
            &mut ports,
            &ScaleSpec::new(2.5, 2.5),
            &mut submodel,
            &SelOptions::default(),
        )
        .unwrap();
        assert_eq!(submodel.solves, 1);
        assert_eq!(submodel.intermediates, 1);
        assert_eq!(submodel.finals, 1);
    }

    #[test]
    fn sel_step_count_matches_replay_oracle() {
        // Oracle: replay the loop definition with exact dyadic arithmetic,
        // counting iterations of `while t < T { t += dt }`.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let dt = rng.gen_range(1u32..64) as f64 / 16.0;
            let whole: u32 = rng.gen_range(1..50);
            let fractional = if rng.gen_bool(0.5) { dt / 2.0 } else { 0.0 };
            let total = dt * whole as f64 + fractional;
            let expected = {
                let mut count = 0u64;
                let mut t = 0.0;
                while t < total {
                    count += 1;
                    t += dt;
                }
                count
            };
            let mut submodel = Counting::default();
            let mut ports = bare_ports(true, true);
            let stats = run_submodel(
                &mut ports,
                &ScaleSpec::new(dt, total),
                &mut submodel,
                &SelOptions::default(),
            )
            .unwrap();
            assert_eq!(stats.solve_steps, expected, "dt={dt} T={total}");
            assert_eq!(stats.solve_steps, ScaleSpec::new(dt, total).step_count());
            assert_eq!(stats.intermediate_observations, expected);
            assert_eq!(stats.final_observations, 1);
        }
    }

    #[test]
    fn strict_mode_send_during_solve_is_violation() {
        let abort = AbortToken::new();
        let (tx, _rx) = channel(&abort);
        let mut ports = bare_ports(true, true);
        ports.add_out("out", Endpoint::new("peer", "inp"), vec![], Box::new(tx));
        let mut submodel = Counting {
            send_during_solve: true,
            ..Default::default()
        };
        let err = run_submodel(
            &mut ports,
            &ScaleSpec::new(1.0, 1.0),
            &mut submodel,
            &SelOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, KernelError::PhaseViolation { .. }));
    }

    #[test]
    fn strict_mode_receive_during_final_is_violation() {
        let abort = AbortToken::new();
        let (tx, rx) = channel(&abort);
        tx.send(Message {
            src: Endpoint::new("peer", "o"),
            dst: Endpoint::new("test", "inp"),
            timestamp: 0.0,
            payload: Payload::Raw(vec![]),
        })
        .unwrap();
        let mut ports = bare_ports(true, true);
        ports.add_in("inp", rx);
        let mut submodel = Counting {
            receive_during_final: true,
            ..Default::default()
        };
        let options = SelOptions {
            restart_port: "none".into(),
            ..Default::default()
        };
        let err = run_submodel(
            &mut ports,
            &ScaleSpec::new(1.0, 1.0),
            &mut submodel,
            &options,
        )
        .unwrap_err();
        assert!(matches!(err, KernelError::PhaseViolation { .. }));
    }

    #[test]
    fn non_strict_mode_allows_unguarded_io() {
        let abort = AbortToken::new();
        let (tx, _rx_keep) = channel(&abort);
        let mut ports = bare_ports(true, false);
        ports.add_out("out", Endpoint::new("peer", "inp"), vec![], Box::new(tx));
        let mut submodel = Counting {
            send_during_solve: true,
            ..Default::default()
        };
        run_submodel(
            &mut ports,
            &ScaleSpec::new(1.0, 1.0),
            &mut submodel,
            &SelOptions::default(),
        )
        .unwrap();
    }

    #[test]
    fn conforming_submodel_sees_no_violation() {
        // Sends at observations, receives at solve steps: the full legal cycle.
        struct PingPong;
        impl Submodel for PingPong {
            fn init(&mut self, _p: &mut InstancePorts, _t: f64) -> Result<(), KernelError> {
                Ok(())
            }
            fn intermediate_observation(
                &mut self,
                ports: &mut InstancePorts,
                t: f64,
            ) -> Result<(), KernelError> {
                ports.send("out", Payload::I64(vec![t as i64]), t)
            }
            fn solve_step(
                &mut self,
                ports: &mut InstancePorts,
                _t: f64,
                _dt: f64,
            ) -> Result<(), KernelError> {
                ports.receive("inp").map(|_| ())
            }
            fn final_observation(
                &mut self,
                _p: &mut InstancePorts,
                _t: f64,
            ) -> Result<(), KernelError> {
                Ok(())
            }
        }
        let abort = AbortToken::new();
        let (tx_out, rx_out) = channel(&abort);
        let (tx_in, rx_in) = channel(&abort);
        let mut ports = bare_ports(true, true);
        ports.add_out("out", Endpoint::new("peer", "inp"), vec![], Box::new(tx_out));
        ports.add_in("inp", rx_in);
        // Echo thread: bounce everything back.
        let echo = std::thread::spawn(move || {
            while let Ok(m) = rx_out.receive() {
                if tx_in.send(m).is_err() {
                    break;
                }
            }
        });
        let options = SelOptions {
            restart_port: "none".into(),
            ..Default::default()
        };
        let stats = run_submodel(
            &mut ports,
            &ScaleSpec::new(1.0, 5.0),
            &mut PingPong,
            &options,
        )
        .unwrap();
        assert_eq!(stats.solve_steps, 5);
        assert_eq!(stats.messages_sent, 5);
        assert_eq!(stats.messages_received, 5);
        drop(ports);
        echo.join().unwrap();
    }

    #[test]
    fn restart_runs_second_pass() {
        struct Restartable {
            inits: u64,
        }
        impl Submodel for Restartable {
            fn init(&mut self, ports: &mut InstancePorts, _t: f64) -> Result<(), KernelError> {
                self.inits += 1;
                ports.receive("restart").map(|_| ())
            }
            fn intermediate_observation(
                &mut self,
                _p: &mut InstancePorts,
                _t: f64,
            ) -> Result<(), KernelError> {
                Ok(())
            }
            fn solve_step(
                &mut self,
                _p: &mut InstancePorts,
                _t: f64,
                _dt: f64,
            ) -> Result<(), KernelError> {
                Ok(())
            }
            fn final_observation(
                &mut self,
                _p: &mut InstancePorts,
                _t: f64,
            ) -> Result<(), KernelError> {
                Ok(())
            }
        }
        let abort = AbortToken::new();
        let (tx, rx) = channel(&abort);
        let mut ports = bare_ports(true, true);
        ports.add_in("restart", rx);
        for t in [0.0, 1.0] {
            tx.send(Message {
                src: Endpoint::new("up", "o"),
                dst: Endpoint::new("test", "restart"),
                timestamp: t,
                payload: Payload::F64(vec![t]),
            })
            .unwrap();
        }
        drop(tx);
        let mut submodel = Restartable { inits: 0 };
        let stats = run_submodel(
            &mut ports,
            &ScaleSpec::new(1.0, 3.0),
            &mut submodel,
            &SelOptions::default(),
        )
        .unwrap();
        assert_eq!(stats.passes, 2);
        assert_eq!(submodel.inits, 2);
        assert_eq!(stats.solve_steps, 6);
        assert_eq!(stats.final_observations, 2);
    }

    #[test]
    fn timestamp_guard_accepts_monotone() {
        let mut guard = TimestampGuard::default();
        for t in [0.0, 0.0, 1.0, 5.0] {
            guard.check("p", t).unwrap();
        }
    }

    #[test]
    fn timestamp_guard_rejects_regression() {
        let mut guard = TimestampGuard::default();
        guard.check("p", 5.0).unwrap();
        let err = guard.check("p", 4.0).unwrap_err();
        assert_eq!(
            err,
            KernelError::TimestampRegression {
                port: "p".into(),
                last: 5.0,
                t: 4.0
            }
        );
    }

    #[test]
    fn timestamp_guard_sorted_replay() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut stamps: Vec<f64> = (0..1000).map(|_| rng.gen_range(0.0..1e6)).collect();
        stamps.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut guard = TimestampGuard::default();
        for t in stamps {
            guard.check("p", t).unwrap();
        }
    }

    #[test]
    fn send_on_unconnected_port_fails() {
        let mut ports = bare_ports(false, true);
        let err = ports.send("nowhere", Payload::Raw(vec![]), 0.0).unwrap_err();
        assert_eq!(err, KernelError::UnconnectedPort("nowhere".into()));
    }

    #[test]
    fn empty_filter_chain_is_identity() {
        let payload = Payload::F64(vec![1.0, 2.0]);
        assert_eq!(
            apply_filter_chain(&[], payload.clone()).unwrap(),
            payload
        );
    }

    #[test]
    fn affine_filter_transforms_elementwise() {
        let out = apply_filter_chain(
            &[FilterSpec::Affine {
                scale: 2.0,
                offset: 1.0,
            }],
            Payload::F64(vec![1.0, 2.0]),
        )
        .unwrap();
        assert_eq!(out, Payload::F64(vec![3.0, 5.0]));
    }

    #[test]
    fn affine_on_non_f64_is_type_mismatch() {
        let err = apply_filter_chain(
            &[FilterSpec::Affine {
                scale: 2.0,
                offset: 1.0,
            }],
            Payload::I32(vec![1]),
        )
        .unwrap_err();
        assert!(matches!(err, KernelError::TypeMismatch { .. }));
    }

    #[test]
    fn chain_application_matches_sequential_application() {
        let chain = [
            FilterSpec::Affine { scale: 2.0, offset: 1.0 },
            FilterSpec::Affine { scale: -1.0, offset: 0.5 },
        ];
        let input = Payload::F64(vec![0.0, 1.0, -3.25]);
        let chained = apply_filter_chain(&chain, input.clone()).unwrap();
        let step1 = apply_filter_chain(&chain[..1], input).unwrap();
        let step2 = apply_filter_chain(&chain[1..], step1).unwrap();
        assert_eq!(chained, step2);
    }

    #[test]
    fn rle_kilobyte_of_zeros() {
        let compressed = rle_compress(&[0u8; 1024]);
        assert_eq!(compressed, vec![0xFF, 0x00, 0xFF, 0x00, 0xFF, 0x00, 0xFF, 0x00]);
        assert_eq!(rle_decompress(&compressed).unwrap(), vec![0u8; 1024]);
    }

    #[test]
    fn rle_empty_input() {
        assert_eq!(rle_compress(&[]), Vec::<u8>::new());
        assert_eq!(rle_decompress(&[]).unwrap(), Vec::<u8>::new());
    }

    #[test]
    fn rle_odd_length_rejected() {
        assert!(matches!(
            rle_decompress(&[1]),
            Err(KernelError::MalformedFilterInput(_))
        ));
    }

    #[test]
    fn compress_decompress_round_trip() {
        let chain = [FilterSpec::Compress, FilterSpec::Decompress];
        let bytes: Vec<u8> = (0..2000).map(|i| ((i / 7) % 5) as u8).collect();
        let out = apply_filter_chain(&chain, Payload::Raw(bytes.clone())).unwrap();
        assert_eq!(out, Payload::Raw(bytes));
    }

    #[test]
    fn mapper_activates_min_of_inputs() {
        struct Join;
        impl Mapper for Join {
            fn activate(
                &mut self,
                inputs: &mut MapperInputs,
                ports: &mut InstancePorts,
            ) -> Result<(), KernelError> {
                let (a, ta) = inputs.take("a").unwrap();
                let (b, _tb) = inputs.take("b").unwrap();
                let (Payload::F64(a), Payload::F64(b)) = (a, b) else {
                    return Err(KernelError::failed("expected f64 inputs"));
                };
                let combined: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
                ports.send("out", Payload::F64(combined), ta)
            }
        }
        let abort = AbortToken::new();
        let (tx_a, rx_a) = channel(&abort);
        let (tx_b, rx_b) = channel(&abort);
        let (tx_out, rx_out) = channel(&abort);
        let mut ports = InstancePorts::new("join", false, true);
        ports.add_in("a", rx_a);
        ports.add_in("b", rx_b);
        ports.add_out("out", Endpoint::new("down", "inp"), vec![], Box::new(tx_out));
        let send = |tx: &crate::transport::MessageSender, port: &str, v: f64| {
            tx.send(Message {
                src: Endpoint::new("up", "o"),
                dst: Endpoint::new("join", port),
                timestamp: v,
                payload: Payload::F64(vec![v]),
            })
            .unwrap();
        };
        for i in 0..5 {
            send(&tx_a, "a", i as f64);
        }
        for i in 0..3 {
            send(&tx_b, "b", i as f64 * 10.0);
        }
        drop(tx_a);
        drop(tx_b);
        let stats = run_mapper(&mut ports, &mut Join).unwrap();
        assert_eq!(stats.activations, 3);
        for i in 0..3 {
            let m = rx_out.receive().unwrap();
            assert_eq!(m.payload, Payload::F64(vec![i as f64 + i as f64 * 10.0]));
        }
        drop(ports);
        assert_eq!(rx_out.receive(), Err(ReceiveError::QueueClosed));
    }

    #[test]
    fn source_runs_until_exhausted() {
        struct Numbers {
            next: i64,
        }
        impl Source for Numbers {
            fn produce(&mut self, ports: &mut InstancePorts) -> Result<bool, KernelError> {
                if self.next >= 4 {
                    return Ok(false);
                }
                ports.send("out", Payload::I64(vec![self.next]), self.next as f64)?;
                self.next += 1;
                Ok(true)
            }
        }
        let abort = AbortToken::new();
        let (tx, rx) = channel(&abort);
        let mut ports = InstancePorts::new("src", false, true);
        ports.add_out("out", Endpoint::new("down", "inp"), vec![], Box::new(tx));
        let stats = run_source(&mut ports, &mut Numbers { next: 0 }).unwrap();
        assert_eq!(stats.activations, 4);
        drop(ports);
        let mut seen = Vec::new();
        while let Ok(m) = rx.receive() {
            seen.push(m.timestamp);
        }
        assert_eq!(seen, vec![0.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn sink_consumes_until_closed() {
        struct Collect(Vec<f64>);
        impl Sink for Collect {
            fn consume(&mut self, _port: &str, _payload: Payload, t: f64) -> Result<(), KernelError> {
                self.0.push(t);
                Ok(())
            }
        }
        let abort = AbortToken::new();
        let (tx, rx) = channel(&abort);
        let mut ports = InstancePorts::new("snk", false, true);
        ports.add_in("inp", rx);
        for i in 0..3 {
            tx.send(Message {
                src: Endpoint::new("up", "o"),
                dst: Endpoint::new("snk", "inp"),
                timestamp: i as f64,
                payload: Payload::Raw(vec![]),
            })
            .unwrap();
        }
        drop(tx);
        let mut sink = Collect(Vec::new());
        let stats = run_sink(&mut ports, &mut sink).unwrap();
        assert_eq!(stats.activations, 3);
        assert_eq!(sink.0, vec![0.0, 1.0, 2.0]);
    }

    #[test]
    fn kind_mismatch_rejected() {
        struct Noop;
        impl Source for Noop {
            fn produce(&mut self, _p: &mut InstancePorts) -> Result<bool, KernelError> {
                Ok(false)
            }
        }
        let spec = InstanceSpec::new("a", InstanceKind::Sink, "x");
        let mut ports = InstancePorts::new("a", false, true);
        let err = run_instance(
            &mut ports,
            &spec,
            InstanceImpl::Source(Box::new(Noop)),
            &SelOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, KernelError::KindMismatch { .. }));
    }

    #[test]
    fn phase_transition_table() {
        use SelPhase::*;
        let legal = [
            (Init, ObservationIntermediate),
            (ObservationIntermediate, Solve),
            (ObservationIntermediate, ObservationFinal),
            (Solve, ObservationIntermediate),
            (ObservationFinal, Done),
            (ObservationFinal, Init),
        ];
        let all = [Init, ObservationIntermediate, Solve, ObservationFinal, Done];
        for from in all {
            for to in all {
                let expected = legal.contains(&(from, to));
                assert_eq!(SelPhase::can_transition(from, to), expected, "{from} -> {to}");
            }
        }
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn rle_round_trip(bytes in proptest::collection::vec(any::<u8>(), 0..2048)) {
                let compressed = rle_compress(&bytes);
                prop_assert_eq!(rle_decompress(&compressed).unwrap(), bytes);
            }

            #[test]
            fn rle_runs_capped_at_256(len in 0usize..4096) {
                let bytes = vec![0xABu8; len];
                let compressed = rle_compress(&bytes);
                let expected_pairs = len.div_ceil(256);
                prop_assert_eq!(compressed.len(), expected_pairs * 2);
            }
        }
    }
}
