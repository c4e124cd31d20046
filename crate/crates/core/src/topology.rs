//! In-memory model of a coupled multiscale topology and its validation rules.
//!
//! A [`Topology`] is a set of named instances (submodels, mappers, sources
//! and sinks) wired together by directed [`ConduitSpec`]s between ports.
//! Construction is unchecked; [`validate_topology`] reports every rule
//! violation as a value, and [`classify_coupling`] distinguishes acyclic
//! from cyclic coupling graphs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

/// Returns true if `s` is a valid name token: `[A-Za-z_][A-Za-z0-9_]*`.
pub fn is_token(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// One end of a conduit: an instance name plus a port name on it.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Endpoint {
    pub instance: String,
    pub port: String,
}

impl Endpoint {
    pub fn new(instance: impl Into<String>, port: impl Into<String>) -> Self {
        Endpoint {
            instance: instance.into(),
            port: port.into(),
        }
    }
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.instance, self.port)
    }
}

/// Time scale of a submodel: timestep and total simulated time, in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleSpec {
    /// Timestep in seconds. Must be > 0.
    pub dt: f64,
    /// Total simulated time in seconds. Must be >= dt.
    pub total_time: f64,
}

impl ScaleSpec {
    pub fn new(dt: f64, total_time: f64) -> Self {
        ScaleSpec { dt, total_time }
    }

    /// Number of solve steps a submodel with this scale performs per pass.
    pub fn step_count(&self) -> u64 {
        (self.total_time / self.dt).ceil() as u64
    }
}

/// The role an instance plays in the coupling graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InstanceKind {
    Submodel,
    Mapper,
    Source,
    Sink,
}

impl InstanceKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            InstanceKind::Submodel => "submodel",
            InstanceKind::Mapper => "mapper",
            InstanceKind::Source => "source",
            InstanceKind::Sink => "sink",
        }
    }

    pub fn parse(s: &str) -> Option<InstanceKind> {
        match s {
            "submodel" => Some(InstanceKind::Submodel),
            "mapper" => Some(InstanceKind::Mapper),
            "source" => Some(InstanceKind::Source),
            "sink" => Some(InstanceKind::Sink),
            _ => None,
        }
    }
}

impl fmt::Display for InstanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Declaration of one instance: its name, kind, implementation id,
/// free-form parameters, and (for submodels) its time scale.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceSpec {
    pub name: String,
    pub kind: InstanceKind,
    pub impl_id: String,
    pub params: BTreeMap<String, String>,
    pub scale: Option<ScaleSpec>,
}

impl InstanceSpec {
    pub fn new(name: impl Into<String>, kind: InstanceKind, impl_id: impl Into<String>) -> Self {
        InstanceSpec {
            name: name.into(),
            kind,
            impl_id: impl_id.into(),
            params: BTreeMap::new(),
            scale: None,
        }
    }

    pub fn with_scale(mut self, dt: f64, total_time: f64) -> Self {
        self.scale = Some(ScaleSpec::new(dt, total_time));
        self
    }

    pub fn with_param(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.params.insert(key.into(), value.into());
        self
    }
}

/// A per-conduit payload transformation. Arity is fixed by construction.
#[derive(Debug, Clone, PartialEq)]
pub enum FilterSpec {
    /// Run-length encode a raw-byte payload.
    Compress,
    /// Inverse of `Compress`.
    Decompress,
    /// Elementwise `scale * x + offset` on an f64 payload.
    Affine { scale: f64, offset: f64 },
}

impl fmt::Display for FilterSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FilterSpec::Compress => f.write_str("compress"),
            FilterSpec::Decompress => f.write_str("decompress"),
            FilterSpec::Affine { scale, offset } => write!(f, "affine({},{})", scale, offset),
        }
    }
}

/// A one-way link from an out-port to an in-port, with an ordered filter chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ConduitSpec {
    pub from: Endpoint,
    pub to: Endpoint,
    pub filters: Vec<FilterSpec>,
}

impl ConduitSpec {
    pub fn new(from: Endpoint, to: Endpoint) -> Self {
        ConduitSpec {
            from,
            to,
            filters: Vec::new(),
        }
    }
}

/// The whole coupled model: instances plus conduits, in declaration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Topology {
    pub instances: Vec<InstanceSpec>,
    pub conduits: Vec<ConduitSpec>,
}

impl Topology {
    pub fn instance(&self, name: &str) -> Option<&InstanceSpec> {
        self.instances.iter().find(|i| i.name == name)
    }

    /// Conduits whose source instance is `name`.
    pub fn conduits_from<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a ConduitSpec> {
        self.conduits.iter().filter(move |c| c.from.instance == name)
    }

    /// Conduits whose destination instance is `name`.
    pub fn conduits_to<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a ConduitSpec> {
        self.conduits.iter().filter(move |c| c.to.instance == name)
    }
}

/// A single validation failure, naming the rule and the offending element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    BadInstanceName { name: String },
    DuplicateInstance { name: String },
    BadImplId { instance: String, impl_id: String },
    BadParamKey { instance: String, key: String },
    MissingScale { instance: String },
    BadScale { instance: String, reason: String },
    BadPortName { endpoint: String },
    UnknownInstance { conduit: usize, name: String },
    SelfConduit { conduit: usize, instance: String },
    DuplicateInPort { endpoint: String },
    DuplicateOutPort { endpoint: String },
    SourceHasInPort { endpoint: String },
    SinkHasOutPort { endpoint: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::BadInstanceName { name } => {
                write!(f, "bad instance name: {name:?}")
            }
            Violation::DuplicateInstance { name } => {
                write!(f, "duplicate instance: {name}")
            }
            Violation::BadImplId { instance, impl_id } => {
                write!(f, "bad impl id on instance {instance}: {impl_id:?}")
            }
            Violation::BadParamKey { instance, key } => {
                write!(f, "bad param key on instance {instance}: {key:?}")
            }
            Violation::MissingScale { instance } => {
                write!(f, "submodel {instance} has no scale")
            }
            Violation::BadScale { instance, reason } => {
                write!(f, "bad scale on instance {instance}: {reason}")
            }
            Violation::BadPortName { endpoint } => {
                write!(f, "bad port name: {endpoint}")
            }
            Violation::UnknownInstance { conduit, name } => {
                write!(f, "conduit {conduit} references unknown instance {name}")
            }
            Violation::SelfConduit { conduit, instance } => {
                write!(f, "conduit {conduit} connects instance {instance} to itself")
            }
            Violation::DuplicateInPort { endpoint } => {
                write!(f, "in-port {endpoint} is the target of more than one conduit")
            }
            Violation::DuplicateOutPort { endpoint } => {
                write!(f, "out-port {endpoint} is the source of more than one conduit")
            }
            Violation::SourceHasInPort { endpoint } => {
                write!(f, "source {endpoint} is used as a conduit target")
            }
            Violation::SinkHasOutPort { endpoint } => {
                write!(f, "sink {endpoint} is used as a conduit source")
            }
        }
    }
}

/// Error from operations that require a valid topology.
#[derive(Debug, Clone, Error)]
pub enum TopologyError {
    #[error("invalid topology: {}", format_violations(.0))]
    InvalidTopology(Vec<Violation>),
}

fn format_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

/// Checks every topology invariant and returns the violations in
/// declaration order. An empty list means the topology is valid.
///
/// Validation is pure and deterministic; violations are values, not errors.
pub fn validate_topology(t: &Topology) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut seen_names: BTreeSet<&str> = BTreeSet::new();

    for inst in &t.instances {
        if !is_token(&inst.name) {
            violations.push(Violation::BadInstanceName {
                name: inst.name.clone(),
            });
        }
        if seen_names.contains(inst.name.as_str()) {
            violations.push(Violation::DuplicateInstance {
                name: inst.name.clone(),
            });
        } else {
            seen_names.insert(&inst.name);
        }
        if !is_impl_id(&inst.impl_id) {
            violations.push(Violation::BadImplId {
                instance: inst.name.clone(),
                impl_id: inst.impl_id.clone(),
            });
        }
        for key in inst.params.keys() {
            if !is_token(key) {
                violations.push(Violation::BadParamKey {
                    instance: inst.name.clone(),
                    key: key.clone(),
                });
            }
        }
        match (&inst.kind, &inst.scale) {
            (InstanceKind::Submodel, None) => violations.push(Violation::MissingScale {
                instance: inst.name.clone(),
            }),
            (_, Some(scale)) => {
                if !(scale.dt > 0.0) || !scale.dt.is_finite() {
                    violations.push(Violation::BadScale {
                        instance: inst.name.clone(),
                        reason: format!("dt must be a positive finite duration, got {}", scale.dt),
                    });
                } else if !(scale.total_time >= scale.dt) || !scale.total_time.is_finite() {
                    violations.push(Violation::BadScale {
                        instance: inst.name.clone(),
                        reason: format!(
                            "total time {} must be finite and >= dt {}",
                            scale.total_time, scale.dt
                        ),
                    });
                }
            }
            _ => {}
        }
    }

    let kinds: BTreeMap<&str, InstanceKind> = t
        .instances
        .iter()
        .map(|i| (i.name.as_str(), i.kind))
        .collect();

    let mut in_ports: BTreeSet<(&str, &str)> = BTreeSet::new();
    let mut out_ports: BTreeSet<(&str, &str)> = BTreeSet::new();

    for (idx, conduit) in t.conduits.iter().enumerate() {
        for endpoint in [&conduit.from, &conduit.to] {
            if !is_token(&endpoint.port) {
                violations.push(Violation::BadPortName {
                    endpoint: endpoint.to_string(),
                });
            }
            if !kinds.contains_key(endpoint.instance.as_str()) {
                violations.push(Violation::UnknownInstance {
                    conduit: idx,
                    name: endpoint.instance.clone(),
                });
            }
        }
        if conduit.from.instance == conduit.to.instance {
            violations.push(Violation::SelfConduit {
                conduit: idx,
                instance: conduit.from.instance.clone(),
            });
        }
        match kinds.get(conduit.from.instance.as_str()) {
            Some(InstanceKind::Sink) => violations.push(Violation::SinkHasOutPort {
                endpoint: conduit.from.to_string(),
            }),
            _ => {}
        }
        match kinds.get(conduit.to.instance.as_str()) {
            Some(InstanceKind::Source) => violations.push(Violation::SourceHasInPort {
                endpoint: conduit.to.to_string(),
            }),
            _ => {}
        }
        let out_key = (conduit.from.instance.as_str(), conduit.from.port.as_str());
        if !out_ports.insert(out_key) {
            violations.push(Violation::DuplicateOutPort {
                endpoint: conduit.from.to_string(),
            });
        }
        let in_key = (conduit.to.instance.as_str(), conduit.to.port.as_str());
        if !in_ports.insert(in_key) {
            violations.push(Violation::DuplicateInPort {
                endpoint: conduit.to.to_string(),
            });
        }
    }

    violations
}

// Impl ids may be dotted paths of tokens, e.g. "demo.macro".
fn is_impl_id(s: &str) -> bool {
    !s.is_empty() && s.split('.').all(is_token)
}

/// Whether the directed instance graph contains a cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coupling {
    Acyclic,
    Cyclic,
}

/// Classifies the coupling of a valid topology by collapsing ports and
/// looking for a directed cycle between instances.
pub fn classify_coupling(t: &Topology) -> Result<Coupling, TopologyError> {
    let violations = validate_topology(t);
    if !violations.is_empty() {
        return Err(TopologyError::InvalidTopology(violations));
    }

    let index: BTreeMap<&str, usize> = t
        .instances
        .iter()
        .enumerate()
        .map(|(i, inst)| (inst.name.as_str(), i))
        .collect();
    let mut adjacency: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); t.instances.len()];
    for conduit in &t.conduits {
        let from = index[conduit.from.instance.as_str()];
        let to = index[conduit.to.instance.as_str()];
        adjacency[from].insert(to);
    }

    // Iterative three-color depth-first search.
    #[derive(Clone, Copy, PartialEq)]
    enum Color {
        White,
        Gray,
        Black,
    }
    let mut color = vec![Color::White; t.instances.len()];
    for start in 0..t.instances.len() {
        if color[start] != Color::White {
            continue;
        }
        let mut stack: Vec<(usize, Vec<usize>)> =
            vec![(start, adjacency[start].iter().copied().collect())];
        color[start] = Color::Gray;
        while let Some((node, pending)) = stack.last_mut() {
            match pending.pop() {
                Some(next) => match color[next] {
                    Color::Gray => return Ok(Coupling::Cyclic),
                    Color::White => {
                        color[next] = Color::Gray;
                        stack.push((next, adjacency[next].iter().copied().collect()));
                    }
                    Color::Black => {}
                },
                None => {
                    color[*node] = Color::Black;
                    stack.pop();
                }
            }
        }
    }
    Ok(Coupling::Acyclic)
}
