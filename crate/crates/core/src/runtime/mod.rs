//! The runtime environment: simulation manager (registry), local managers
//! (instance launchers), external instance attachment and fail-fast
//! shutdown.
//!
//! A run has one simulation manager and one or more local managers. The
//! simulation manager keeps track of which instances have started and
//! where they listen; local managers start the instances placed on them
//! and route their traffic, directly between instances where possible.
//! Instances start computing immediately and block as soon as they need a
//! message that has not been sent or a location that has not registered.
//!
//! Everything speaks the frame protocol of [`crate::codec`]. Connections
//! to a local manager's data listener open with a `REGISTER` handshake:
//! a manager id introduces an inter-manager data link, the name of a
//! locally placed instance with the `external` implementation attaches an
//! external process. `DATA` frames flow only after that handshake. A
//! sending instance's completion travels in-band as a `DEREGISTER` marker
//! so receivers observe all of its messages first.
//!
//! Error handling is fail-fast throughout: any instance error aborts the
//! whole simulation rather than risking deadlock or wasted compute.

mod external;
mod local;
mod registry;
mod sim_server;

pub use external::{ExternalEvent, ExternalInstance};
pub use registry::{EntryState, Registry, RegistryEntry, RegistryError, RegistryOutcome};
pub use sim_server::SimManagerServer;

use std::collections::BTreeMap;
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::codec::Payload;
use crate::config::ConfigDocument;
use crate::kernel::{InstanceImpl, InstancePorts, KernelError, RunStats, Submodel};
use crate::topology::{validate_topology, InstanceSpec, is_token};
use crate::transport::AbortToken;

/// Environment variable that carries the attach address (`host:port`) for
/// external instances.
pub const MANAGER_ENV_VAR: &str = "COUPLET_MANAGER";

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("invalid run plan: {0}")]
    Plan(String),
    #[error("unknown implementation id {0}")]
    UnknownImpl(String),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("aborted: {0}")]
    Aborted(String),
}

/// Client-side relay configuration for one local manager: destinations
/// whose port falls outside `local_ports` are reached through the relay
/// at `addr`.
#[derive(Debug, Clone)]
pub struct RelayClientCfg {
    pub addr: String,
    pub local_ports: (u16, u16),
}

/// Per-manager settings in a run plan.
#[derive(Debug, Clone)]
pub struct ManagerCfg {
    /// Bind address of the manager's data listener; port 0 picks an
    /// ephemeral port, advertised through the registry.
    pub bind: String,
    pub relay: Option<RelayClientCfg>,
}

impl Default for ManagerCfg {
    fn default() -> Self {
        ManagerCfg {
            bind: "127.0.0.1:0".into(),
            relay: None,
        }
    }
}

/// A validated description of one run: the document, the placement of
/// every instance onto a manager, and the managers themselves.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub doc: ConfigDocument,
    /// instance name -> manager id; every instance placed exactly once.
    pub placement: BTreeMap<String, String>,
    pub managers: BTreeMap<String, ManagerCfg>,
}

impl RunPlan {
    /// Plan that runs every instance on a single manager called `main`.
    pub fn single(doc: ConfigDocument) -> Self {
        let placement = doc
            .topology
            .instances
            .iter()
            .map(|i| (i.name.clone(), "main".to_string()))
            .collect();
        let mut managers = BTreeMap::new();
        managers.insert("main".to_string(), ManagerCfg::default());
        RunPlan {
            doc,
            placement,
            managers,
        }
    }

    pub fn validate(&self, impls: &ImplRegistry) -> Result<(), RuntimeError> {
        let violations = validate_topology(&self.doc.topology);
        if !violations.is_empty() {
            return Err(RuntimeError::Plan(format!(
                "topology does not validate: {violations:?}"
            )));
        }
        for inst in &self.doc.topology.instances {
            let manager = self.placement.get(&inst.name).ok_or_else(|| {
                RuntimeError::Plan(format!("instance {} is not placed", inst.name))
            })?;
            if !self.managers.contains_key(manager) {
                return Err(RuntimeError::Plan(format!(
                    "instance {} placed on unknown manager {manager}",
                    inst.name
                )));
            }
            if !impls.contains(&inst.impl_id) {
                return Err(RuntimeError::UnknownImpl(inst.impl_id.clone()));
            }
        }
        for name in self.placement.keys() {
            if self.doc.topology.instance(name).is_none() {
                return Err(RuntimeError::Plan(format!(
                    "placement references unknown instance {name}"
                )));
            }
        }
        for id in self.managers.keys() {
            if !is_token(id) {
                return Err(RuntimeError::Plan(format!("bad manager id {id:?}")));
            }
            if self.doc.topology.instance(id).is_some() {
                return Err(RuntimeError::Plan(format!(
                    "manager id {id} collides with an instance name"
                )));
            }
        }
        Ok(())
    }

    /// True if any instance on `manager` uses the external implementation.
    pub fn has_external_on(&self, manager: &str) -> bool {
        self.doc.topology.instances.iter().any(|i| {
            i.impl_id == EXTERNAL_IMPL_ID
                && self.placement.get(&i.name).map(|m| m.as_str()) == Some(manager)
        })
    }
}

/// Implementation id reserved for instances provided by external
/// processes over the frame protocol.
pub const EXTERNAL_IMPL_ID: &str = "external";

type ImplFactory =
    Box<dyn Fn(&InstanceSpec) -> Result<InstanceImpl, RuntimeError> + Send + Sync>;

/// Registered instance implementations, looked up by the `impl_id` tokens
/// that configurations reference.
#[derive(Default)]
pub struct ImplRegistry {
    factories: BTreeMap<String, ImplFactory>,
}

impl ImplRegistry {
    pub fn new() -> Self {
        ImplRegistry::default()
    }

    /// Registry with the built-in implementations: `external` plus the
    /// `demo.macro` / `demo.micro` pair described in the README.
    pub fn with_builtins() -> Self {
        let mut registry = ImplRegistry::new();
        registry.register(EXTERNAL_IMPL_ID, |_| Ok(InstanceImpl::External));
        registry.register("demo.macro", |_| {
            Ok(InstanceImpl::Submodel(Box::new(DemoMacro)))
        });
        registry.register("demo.micro", |_| {
            Ok(InstanceImpl::Submodel(Box::new(DemoMicro { origin: 0.0 })))
        });
        registry
    }

    pub fn register<F>(&mut self, impl_id: impl Into<String>, factory: F)
    where
        F: Fn(&InstanceSpec) -> Result<InstanceImpl, RuntimeError> + Send + Sync + 'static,
    {
        self.factories.insert(impl_id.into(), Box::new(factory));
    }

    pub fn contains(&self, impl_id: &str) -> bool {
        self.factories.contains_key(impl_id)
    }

    pub fn create(&self, spec: &InstanceSpec) -> Result<InstanceImpl, RuntimeError> {
        let factory = self
            .factories
            .get(&spec.impl_id)
            .ok_or_else(|| RuntimeError::UnknownImpl(spec.impl_id.clone()))?;
        factory(spec)
    }
}

/// Demo submodel: observes its state onto every out-port each step and
/// consumes one message per in-port each solve step.
struct DemoMacro;

impl Submodel for DemoMacro {
    fn init(&mut self, _ports: &mut InstancePorts, _t: f64) -> Result<(), KernelError> {
        Ok(())
    }

    fn intermediate_observation(
        &mut self,
        ports: &mut InstancePorts,
        t: f64,
    ) -> Result<(), KernelError> {
        for port in ports.out_port_names() {
            ports.send(&port, Payload::F64(vec![t]), t)?;
        }
        Ok(())
    }

    fn solve_step(&mut self, ports: &mut InstancePorts, _t: f64, _dt: f64) -> Result<(), KernelError> {
        for port in ports.in_port_names() {
            ports.receive(&port)?;
        }
        Ok(())
    }

    fn final_observation(&mut self, _ports: &mut InstancePorts, _t: f64) -> Result<(), KernelError> {
        Ok(())
    }
}

/// Demo submodel: takes its initial condition from the in-ports during
/// init, runs its pass, and reports a result from the final observation,
/// stamped with origin time plus local time.
struct DemoMicro {
    origin: f64,
}

impl Submodel for DemoMicro {
    fn init(&mut self, ports: &mut InstancePorts, _t: f64) -> Result<(), KernelError> {
        for port in ports.in_port_names() {
            let (_payload, t) = ports.receive(&port)?;
            self.origin = self.origin.max(t);
        }
        Ok(())
    }

    fn intermediate_observation(
        &mut self,
        _ports: &mut InstancePorts,
        _t: f64,
    ) -> Result<(), KernelError> {
        Ok(())
    }

    fn solve_step(&mut self, _ports: &mut InstancePorts, _t: f64, _dt: f64) -> Result<(), KernelError> {
        Ok(())
    }

    fn final_observation(&mut self, ports: &mut InstancePorts, t: f64) -> Result<(), KernelError> {
        let stamp = self.origin + t;
        for port in ports.out_port_names() {
            ports.send(&port, Payload::F64(vec![stamp]), stamp)?;
        }
        Ok(())
    }
}

/// Options controlling one run.
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Order in which each local manager starts its instances; names not
    /// listed keep declaration order after the listed ones.
    pub start_order: Option<Vec<String>>,
    /// How long a manager waits for the simulation manager's FIN after
    /// its last instance deregistered.
    pub fin_grace: Duration,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            start_order: None,
            fin_grace: Duration::from_secs(30),
        }
    }
}

/// Final status of one instance.
#[derive(Debug, Clone, PartialEq)]
pub enum InstanceOutcome {
    Completed(RunStats),
    Failed(String),
    Aborted,
}

#[derive(Debug, Clone)]
pub struct InstanceReport {
    pub name: String,
    pub outcome: InstanceOutcome,
    pub wall: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunOutcome {
    Completed,
    Aborted { reason: String },
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub outcome: RunOutcome,
    pub instances: Vec<InstanceReport>,
    pub wall: Duration,
}

impl RunReport {
    pub fn success(&self) -> bool {
        matches!(self.outcome, RunOutcome::Completed)
    }
}

/// Connection from a local manager to the simulation manager: direct
/// calls when they share a process, the frame protocol over TCP otherwise.
#[derive(Clone)]
pub enum RegistryConn {
    Local {
        registry: Arc<Registry>,
        abort: AbortToken,
    },
    Remote(Arc<sim_server::RemoteRegistry>),
}

impl RegistryConn {
    pub fn register(&self, name: &str, host: &str, port: u16) -> Result<(), RuntimeError> {
        match self {
            RegistryConn::Local { registry, .. } => Ok(registry.register(name, host, port)?),
            RegistryConn::Remote(remote) => remote.register(name, host, port),
        }
    }

    pub fn resolve(&self, name: &str) -> Result<(String, u16), RuntimeError> {
        match self {
            RegistryConn::Local { registry, .. } => Ok(registry.resolve(name)?),
            RegistryConn::Remote(remote) => remote.resolve(name),
        }
    }

    pub fn deregister(&self, name: &str) -> Result<(), RuntimeError> {
        match self {
            RegistryConn::Local { registry, .. } => {
                registry.deregister(name)?;
                Ok(())
            }
            RegistryConn::Remote(remote) => remote.deregister(name),
        }
    }

    /// Broadcast abort: trips the local token and tells the simulation
    /// manager, which relays it to every other manager. Best-effort and
    /// idempotent.
    pub fn abort_all(&self, reason: &str) {
        match self {
            RegistryConn::Local { registry, abort } => {
                abort.abort(reason);
                registry.abort(reason);
            }
            RegistryConn::Remote(remote) => remote.abort_all(reason),
        }
    }

    pub fn wait_outcome(&self, timeout: Duration) -> RegistryOutcome {
        match self {
            RegistryConn::Local { registry, .. } => registry.wait_outcome(timeout),
            RegistryConn::Remote(remote) => remote.wait_outcome(timeout),
        }
    }
}

/// Bridges an abort token to a registry so blocked resolvers wake up when
/// the token trips, and exits once the run has an outcome either way.
fn spawn_abort_bridge(registry: Arc<Registry>, abort: AbortToken) {
    thread::Builder::new()
        .name("abort-bridge".into())
        .spawn(move || loop {
            if let Some(reason) = abort.wait_timeout(Duration::from_millis(25)) {
                registry.abort(&reason);
                return;
            }
            if registry.outcome().is_some() {
                return;
            }
        })
        .expect("spawn abort bridge");
}

/// Runs a whole plan inside this process: the registry is shared directly
/// and one local manager thread runs per plan manager (instances exchange
/// data over real sockets whenever the plan has more than one manager).
pub fn run_simulation(
    plan: &RunPlan,
    impls: &ImplRegistry,
    options: &RunOptions,
) -> Result<RunReport, RuntimeError> {
    plan.validate(impls)?;
    let start = Instant::now();
    let abort = AbortToken::new();
    let registry = Arc::new(Registry::new(
        plan.doc.topology.instances.iter().map(|i| i.name.clone()),
    ));
    spawn_abort_bridge(registry.clone(), abort.clone());
    let conn = RegistryConn::Local {
        registry: registry.clone(),
        abort: abort.clone(),
    };

    let mut instances = Vec::new();
    thread::scope(|scope| {
        let mut handles = Vec::new();
        for manager_id in plan.managers.keys() {
            let conn = conn.clone();
            let abort = abort.clone();
            handles.push(scope.spawn(move || {
                let result =
                    local::run_local_manager(plan, manager_id, conn.clone(), impls, abort, options);
                if let Err(err) = &result {
                    // Abort immediately so sibling managers do not block
                    // forever on instances this manager failed to start.
                    conn.abort_all(&format!("local manager {manager_id} failed: {err}"));
                }
                result
            }));
        }
        for handle in handles {
            match handle.join() {
                Ok(Ok(reports)) => instances.extend(reports),
                Ok(Err(_)) => {}
                Err(_) => conn.abort_all("local manager panicked"),
            }
        }
    });

    let outcome = match registry.wait_outcome(Duration::ZERO) {
        RegistryOutcome::Complete => RunOutcome::Completed,
        RegistryOutcome::Aborted(reason) => RunOutcome::Aborted { reason },
        RegistryOutcome::TimedOut => RunOutcome::Aborted {
            reason: abort
                .reason()
                .unwrap_or_else(|| "run ended without completing".into()),
        },
    };
    Ok(RunReport {
        outcome,
        instances,
        wall: start.elapsed(),
    })
}

/// The role one OS process plays in a distributed run.
#[derive(Debug, Clone)]
pub struct ProcessRole {
    /// Which plan manager this process runs.
    pub manager_id: String,
    /// Address of the simulation manager (`host:port`).
    pub sim_manager: String,
    /// Whether this process also serves the simulation manager.
    pub serve_sim_manager: bool,
}

/// Runs one manager of a distributed plan in this process, optionally
/// serving the simulation manager as well.
pub fn run_manager(
    plan: &RunPlan,
    impls: &ImplRegistry,
    role: &ProcessRole,
    options: &RunOptions,
) -> Result<RunReport, RuntimeError> {
    plan.validate(impls)?;
    if !plan.managers.contains_key(&role.manager_id) {
        return Err(RuntimeError::Plan(format!(
            "unknown manager id {}",
            role.manager_id
        )));
    }
    let start = Instant::now();
    let abort = AbortToken::new();

    let mut server = None;
    let conn = if role.serve_sim_manager {
        let registry = Arc::new(Registry::new(
            plan.doc.topology.instances.iter().map(|i| i.name.clone()),
        ));
        spawn_abort_bridge(registry.clone(), abort.clone());
        let manager_ids = plan.managers.keys().cloned().collect();
        server = Some(SimManagerServer::start(
            &role.sim_manager,
            registry.clone(),
            manager_ids,
            abort.clone(),
        )?);
        RegistryConn::Local {
            registry,
            abort: abort.clone(),
        }
    } else {
        RegistryConn::Remote(Arc::new(sim_server::RemoteRegistry::connect(
            &role.sim_manager,
            &role.manager_id,
            abort.clone(),
        )?))
    };

    let reports = local::run_local_manager(
        plan,
        &role.manager_id,
        conn.clone(),
        impls,
        abort.clone(),
        options,
    );

    let instances = match reports {
        Ok(reports) => reports,
        Err(err) => {
            conn.abort_all(&format!("local manager failed: {err}"));
            Vec::new()
        }
    };

    let outcome = match conn.wait_outcome(options.fin_grace) {
        RegistryOutcome::Complete => RunOutcome::Completed,
        RegistryOutcome::Aborted(reason) => RunOutcome::Aborted { reason },
        RegistryOutcome::TimedOut => RunOutcome::Aborted {
            reason: "timed out waiting for the simulation manager".into(),
        },
    };
    if let Some(server) = server {
        server.stop();
    }
    Ok(RunReport {
        outcome,
        instances,
        wall: start.elapsed(),
    })
}
