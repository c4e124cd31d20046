//! Measurement harness: startup-overhead regression over submodel and
//! conduit counts, and ping-pong latency/throughput with linear fits.
//!
//! Per message size, a payload is bounced between two echo instances for a
//! fixed number of round trips (plus one untimed warm-up trip to exclude
//! lazy connection establishment); the one-way time of a message is the
//! mean round-trip time divided by two, latency is the minimum one-way
//! time, and throughput is the reciprocal slope of the time-versus-size
//! line. Overhead runs start n submodels wired by m conduits, each
//! sending and receiving one empty message per conduit, and fit the total
//! wall time to `a + b*n + c*m`.

use std::fmt::Write as _;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::codec::Payload;
use crate::config::ConfigDocument;
use crate::kernel::{InstanceImpl, InstancePorts, KernelError, Submodel};
use crate::relay::{Relay, RelayConfig};
use crate::runtime::{
    run_simulation, ImplRegistry, ManagerCfg, RelayClientCfg, RunOptions, RunPlan, RuntimeError,
};
use crate::topology::{ConduitSpec, Endpoint, InstanceKind, InstanceSpec, Topology};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("degenerate input: need at least two distinct x values")]
    DegenerateInput,
    #[error("rank-deficient design: the samples do not determine a, b and c")]
    RankDeficient,
    #[error("bad arguments: {0}")]
    BadArgs(String),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("run aborted: {0}")]
    Aborted(String),
}

/// Ordinary least-squares line fit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Coefficient of determination, 1 when the total sum of squares is 0.
    pub r2: f64,
}

/// Fits `y = slope * x + intercept` by ordinary least squares.
pub fn fit_line(points: &[(f64, f64)]) -> Result<LineFit, BenchError> {
    let n = points.len();
    if n < 2 || points.iter().all(|(x, _)| *x == points[0].0) {
        return Err(BenchError::DegenerateInput);
    }
    let mean_x = points.iter().map(|(x, _)| x).sum::<f64>() / n as f64;
    let mean_y = points.iter().map(|(_, y)| y).sum::<f64>() / n as f64;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in points {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
    }
    let slope = sxy / sxx;
    let intercept = mean_y - slope * mean_x;
    let mut ss_res = 0.0;
    let mut ss_tot = 0.0;
    for (x, y) in points {
        let predicted = slope * x + intercept;
        ss_res += (y - predicted) * (y - predicted);
        ss_tot += (y - mean_y) * (y - mean_y);
    }
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(LineFit {
        slope,
        intercept,
        r2,
    })
}

/// Least-squares fit of run times to `a + b*n + c*m`, plus the minimal
/// overhead statistic (the smallest time encountered).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverheadFit {
    /// Baseline seconds.
    pub a: f64,
    /// Seconds per submodel.
    pub b: f64,
    /// Seconds per conduit.
    pub c: f64,
    /// Minimum time encountered across all samples.
    pub min_t: f64,
}

/// Fits `(n, m, T)` samples to the plane `T = a + b*n + c*m`.
pub fn fit_overhead(samples: &[(usize, usize, f64)]) -> Result<OverheadFit, BenchError> {
    if samples.len() < 3 {
        return Err(BenchError::RankDeficient);
    }
    // Normal equations for the design matrix with rows [1, n, m].
    let mut ata = [[0.0f64; 3]; 3];
    let mut aty = [0.0f64; 3];
    for &(n, m, t) in samples {
        let row = [1.0, n as f64, m as f64];
        for i in 0..3 {
            for j in 0..3 {
                ata[i][j] += row[i] * row[j];
            }
            aty[i] += row[i] * t;
        }
    }
    let coefficients = solve3(ata, aty).ok_or(BenchError::RankDeficient)?;
    let min_t = samples
        .iter()
        .map(|&(_, _, t)| t)
        .fold(f64::INFINITY, f64::min);
    Ok(OverheadFit {
        a: coefficients[0],
        b: coefficients[1],
        c: coefficients[2],
        min_t,
    })
}

/// Gaussian elimination with partial pivoting on a 3x3 system.
fn solve3(mut a: [[f64; 3]; 3], mut y: [f64; 3]) -> Option<[f64; 3]> {
    let scale = a.iter().flatten().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return None;
    }
    for col in 0..3 {
        let pivot_row = (col..3)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot_row][col].abs() < 1e-12 * scale {
            return None;
        }
        a.swap(col, pivot_row);
        y.swap(col, pivot_row);
        for row in col + 1..3 {
            let factor = a[row][col] / a[col][col];
            for k in col..3 {
                a[row][k] -= factor * a[col][k];
            }
            y[row] -= factor * y[col];
        }
    }
    let mut x = [0.0f64; 3];
    for row in (0..3).rev() {
        let mut acc = y[row];
        for k in row + 1..3 {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

/// Which delivery path the ping-pong exercises.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchTransport {
    /// Both instances on one manager, in-process channels.
    InProcess,
    /// Two managers in one process, framed TCP on loopback.
    Socket,
    /// Two managers, each dialing through its own relay.
    Relay,
}

impl BenchTransport {
    pub fn as_str(&self) -> &'static str {
        match self {
            BenchTransport::InProcess => "in-process",
            BenchTransport::Socket => "socket",
            BenchTransport::Relay => "relay",
        }
    }

    pub fn parse(s: &str) -> Option<BenchTransport> {
        match s {
            "in-process" | "in_process" => Some(BenchTransport::InProcess),
            "socket" => Some(BenchTransport::Socket),
            "relay" => Some(BenchTransport::Relay),
            _ => None,
        }
    }
}

/// Per-size timing row: one-way times in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeedRow {
    pub size_bytes: usize,
    pub mean_one_way: f64,
    pub min_one_way: f64,
}

/// Ping-pong measurement across message sizes.
#[derive(Debug, Clone)]
pub struct SpeedReport {
    pub transport: BenchTransport,
    pub round_trips: usize,
    pub rows: Vec<SpeedRow>,
    /// Minimum one-way time observed at any size.
    pub latency: f64,
    /// Least-squares fit of mean one-way time against message size;
    /// absent with fewer than two distinct sizes.
    pub fit: Option<LineFit>,
}

impl SpeedReport {
    /// Bytes per second: the reciprocal slope of the time-size fit.
    pub fn throughput(&self) -> Option<f64> {
        self.fit.map(|fit| 1.0 / fit.slope)
    }
}

/// The default size grid: 0 bytes, then 2^i KiB while at most `max_bytes`.
pub fn default_sizes(max_bytes: usize) -> Vec<usize> {
    let mut sizes = vec![0];
    let mut size = 1024;
    while size <= max_bytes {
        sizes.push(size);
        size *= 2;
    }
    sizes
}

#[derive(Default)]
struct PingState {
    rtts: Vec<Duration>,
    started: Option<Instant>,
}

/// Sends one payload per observation and times the echo received in the
/// following solve step. The first trip is the untimed warm-up.
struct Pinger {
    payload: Vec<u8>,
    state: Arc<Mutex<PingState>>,
    trip: usize,
}

impl Submodel for Pinger {
    fn init(&mut self, _ports: &mut InstancePorts, _t: f64) -> Result<(), KernelError> {
        Ok(())
    }

    fn intermediate_observation(
        &mut self,
        ports: &mut InstancePorts,
        t: f64,
    ) -> Result<(), KernelError> {
        self.state.lock().unwrap().started = Some(Instant::now());
        ports.send("ping", Payload::Raw(self.payload.clone()), t)
    }

    fn solve_step(&mut self, ports: &mut InstancePorts, _t: f64, _dt: f64) -> Result<(), KernelError> {
        let (payload, _t) = ports.receive("pong")?;
        let elapsed = {
            let mut state = self.state.lock().unwrap();
            state.started.take().map(|s| s.elapsed())
        };
        match payload {
            Payload::Raw(bytes) if bytes == self.payload => {}
            _ => {
                return Err(KernelError::failed(
                    "echoed payload differs from the original",
                ))
            }
        }
        if self.trip > 0 {
            if let Some(rtt) = elapsed {
                self.state.lock().unwrap().rtts.push(rtt);
            }
        }
        self.trip += 1;
        Ok(())
    }

    fn final_observation(&mut self, _ports: &mut InstancePorts, _t: f64) -> Result<(), KernelError> {
        Ok(())
    }
}

/// Receives a payload each solve step and returns it at the next
/// observation; the last echo goes out with the final observation.
struct Echoer {
    stash: Option<(Payload, f64)>,
}

impl Submodel for Echoer {
    fn init(&mut self, _ports: &mut InstancePorts, _t: f64) -> Result<(), KernelError> {
        Ok(())
    }

    fn intermediate_observation(
        &mut self,
        ports: &mut InstancePorts,
        _t: f64,
    ) -> Result<(), KernelError> {
        if let Some((payload, t)) = self.stash.take() {
            ports.send("pong", payload, t)?;
        }
        Ok(())
    }

    fn solve_step(&mut self, ports: &mut InstancePorts, _t: f64, _dt: f64) -> Result<(), KernelError> {
        let (payload, t) = ports.receive("ping")?;
        self.stash = Some((payload, t));
        Ok(())
    }

    fn final_observation(&mut self, ports: &mut InstancePorts, _t: f64) -> Result<(), KernelError> {
        if let Some((payload, t)) = self.stash.take() {
            ports.send("pong", payload, t)?;
        }
        Ok(())
    }
}

fn pingpong_topology(trips: usize) -> Topology {
    Topology {
        instances: vec![
            InstanceSpec::new("pinger", InstanceKind::Submodel, "bench.pinger")
                .with_scale(1.0, trips as f64),
            InstanceSpec::new("echoer", InstanceKind::Submodel, "bench.echoer")
                .with_scale(1.0, trips as f64),
        ],
        conduits: vec![
            ConduitSpec::new(
                Endpoint::new("pinger", "ping"),
                Endpoint::new("echoer", "ping"),
            ),
            ConduitSpec::new(
                Endpoint::new("echoer", "pong"),
                Endpoint::new("pinger", "pong"),
            ),
        ],
    }
}

fn free_port() -> std::io::Result<u16> {
    Ok(std::net::TcpListener::bind("127.0.0.1:0")?
        .local_addr()?
        .port())
}

/// Builds a run plan that places `left` on manager m1 and `right` on
/// manager m2, wired for the requested transport. For the relay
/// transport, two single-port relays are started and returned; they must
/// outlive the run.
pub fn split_plan(
    doc: ConfigDocument,
    left: &str,
    right: &str,
    transport: BenchTransport,
) -> Result<(RunPlan, Vec<Relay>), BenchError> {
    match transport {
        BenchTransport::InProcess => Ok((RunPlan::single(doc), Vec::new())),
        BenchTransport::Socket => {
            let mut plan = RunPlan::single(doc);
            plan.placement.insert(left.into(), "m1".into());
            plan.placement.insert(right.into(), "m2".into());
            plan.managers.clear();
            plan.managers.insert("m1".into(), ManagerCfg::default());
            plan.managers.insert("m2".into(), ManagerCfg::default());
            Ok((plan, Vec::new()))
        }
        BenchTransport::Relay => {
            let port_a = free_port()?;
            let port_b = free_port()?;
            let relay_b = Relay::start(
                RelayConfig::new("rb", "127.0.0.1:0", (port_b, port_b)).with_peer(
                    "ra",
                    "127.0.0.1:1",
                    (port_a, port_a),
                ),
            )
            .map_err(|e| BenchError::BadArgs(e.to_string()))?;
            let relay_a = Relay::start(
                RelayConfig::new("ra", "127.0.0.1:0", (port_a, port_a)).with_peer(
                    "rb",
                    relay_b.local_addr().to_string(),
                    (port_b, port_b),
                ),
            )
            .map_err(|e| BenchError::BadArgs(e.to_string()))?;
            let mut plan = RunPlan::single(doc);
            plan.placement.insert(left.into(), "m1".into());
            plan.placement.insert(right.into(), "m2".into());
            plan.managers.clear();
            plan.managers.insert(
                "m1".into(),
                ManagerCfg {
                    bind: format!("127.0.0.1:{port_a}"),
                    relay: Some(RelayClientCfg {
                        addr: relay_a.local_addr().to_string(),
                        local_ports: (port_a, port_a),
                    }),
                },
            );
            plan.managers.insert(
                "m2".into(),
                ManagerCfg {
                    bind: format!("127.0.0.1:{port_b}"),
                    relay: Some(RelayClientCfg {
                        addr: relay_b.local_addr().to_string(),
                        local_ports: (port_b, port_b),
                    }),
                },
            );
            Ok((plan, vec![relay_a, relay_b]))
        }
    }
}

/// Runs the ping-pong experiment: per size, `round_trips` timed round
/// trips preceded by one untimed warm-up trip.
pub fn run_pingpong(
    transport: BenchTransport,
    sizes: &[usize],
    round_trips: usize,
) -> Result<SpeedReport, BenchError> {
    if sizes.is_empty() || round_trips == 0 {
        return Err(BenchError::BadArgs(
            "need at least one size and one round trip".into(),
        ));
    }
    let mut rows = Vec::new();
    for &size in sizes {
        let rtts = run_one_size(transport, size, round_trips)?;
        let mean = rtts.iter().map(|d| d.as_secs_f64()).sum::<f64>() / rtts.len() as f64;
        let min = rtts
            .iter()
            .map(|d| d.as_secs_f64())
            .fold(f64::INFINITY, f64::min);
        rows.push(SpeedRow {
            size_bytes: size,
            mean_one_way: mean / 2.0,
            min_one_way: min / 2.0,
        });
    }
    let latency = rows
        .iter()
        .map(|r| r.min_one_way)
        .fold(f64::INFINITY, f64::min);
    let points: Vec<(f64, f64)> = rows
        .iter()
        .map(|r| (r.size_bytes as f64, r.mean_one_way))
        .collect();
    let fit = fit_line(&points).ok();
    Ok(SpeedReport {
        transport,
        round_trips,
        rows,
        latency,
        fit,
    })
}

fn run_one_size(
    transport: BenchTransport,
    size: usize,
    round_trips: usize,
) -> Result<Vec<Duration>, BenchError> {
    let trips = round_trips + 1; // extra warm-up trip
    let payload: Vec<u8> = (0..size).map(|i| (i % 253) as u8).collect();
    let state = Arc::new(Mutex::new(PingState::default()));

    let mut impls = ImplRegistry::new();
    {
        let state = state.clone();
        let payload = payload.clone();
        impls.register("bench.pinger", move |_| {
            Ok(InstanceImpl::Submodel(Box::new(Pinger {
                payload: payload.clone(),
                state: state.clone(),
                trip: 0,
            })))
        });
    }
    impls.register("bench.echoer", |_| {
        Ok(InstanceImpl::Submodel(Box::new(Echoer { stash: None })))
    });

    let doc = ConfigDocument {
        topology: pingpong_topology(trips),
        raw_params: Vec::new(),
    };
    let (plan, relays) = split_plan(doc, "pinger", "echoer", transport)?;
    let report = run_simulation(&plan, &impls, &RunOptions::default())?;
    for relay in relays {
        relay.stop();
    }
    if !report.success() {
        return Err(BenchError::Aborted(format!("{:?}", report.outcome)));
    }
    let rtts = std::mem::take(&mut state.lock().unwrap().rtts);
    if rtts.len() != round_trips {
        return Err(BenchError::Aborted(format!(
            "expected {round_trips} timed round trips, recorded {}",
            rtts.len()
        )));
    }
    Ok(rtts)
}

/// Submodel for the overhead experiment: sends one empty message through
/// each out-conduit, receives one through each in-conduit, and exits.
struct OverheadNode;

impl Submodel for OverheadNode {
    fn init(&mut self, _ports: &mut InstancePorts, _t: f64) -> Result<(), KernelError> {
        Ok(())
    }

    fn intermediate_observation(
        &mut self,
        ports: &mut InstancePorts,
        t: f64,
    ) -> Result<(), KernelError> {
        for port in ports.out_port_names() {
            ports.send(&port, Payload::Raw(Vec::new()), t)?;
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

/// Generates the overhead topology: `n` submodels where submodel `i` adds
/// a conduit to each of the following `m/n` submodels (the first `m % n`
/// submodels take one extra), wrapping around to the first submodel. At
/// most `n - 1` distinct targets per submodel, so the generated conduit
/// count is `min(m, n*(n-1))`.
pub fn generate_overhead_topology(n: usize, m: usize) -> Topology {
    let mut topology = Topology::default();
    for i in 0..n {
        topology.instances.push(
            InstanceSpec::new(format!("node{i}"), InstanceKind::Submodel, "bench.node")
                .with_scale(1.0, 1.0),
        );
    }
    let base = m / n;
    let extra = m % n;
    let mut conduit_idx = 0usize;
    for i in 0..n {
        let count = (base + usize::from(i < extra)).min(n.saturating_sub(1));
        for j in 1..=count {
            let target = (i + j) % n;
            topology.conduits.push(ConduitSpec::new(
                Endpoint::new(format!("node{i}"), format!("o{conduit_idx}")),
                Endpoint::new(format!("node{target}"), format!("i{conduit_idx}")),
            ));
            conduit_idx += 1;
        }
    }
    topology
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverheadSample {
    pub n: usize,
    pub m: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct OverheadReport {
    pub samples: Vec<OverheadSample>,
    pub fit: OverheadFit,
}

/// Runs the overhead experiment over the cross product of `n_values` and
/// `m_values`, timing each configuration `repeats` times and keeping the
/// median, then fits the plane.
pub fn run_overhead_experiment(
    n_values: &[usize],
    m_values: &[usize],
    repeats: usize,
) -> Result<OverheadReport, BenchError> {
    if n_values.iter().any(|&n| n == 0) {
        return Err(BenchError::BadArgs(
            "submodel counts must be at least 1".into(),
        ));
    }
    if n_values.is_empty() || m_values.is_empty() || repeats == 0 {
        return Err(BenchError::BadArgs("empty experiment grid".into()));
    }
    let mut impls = ImplRegistry::new();
    impls.register("bench.node", |_| {
        Ok(InstanceImpl::Submodel(Box::new(OverheadNode)))
    });

    let mut samples = Vec::new();
    for &n in n_values {
        for &m in m_values {
            let topology = generate_overhead_topology(n, m);
            let actual_m = topology.conduits.len();
            let doc = ConfigDocument {
                topology,
                raw_params: Vec::new(),
            };
            let plan = RunPlan::single(doc);
            let mut times = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                let start = Instant::now();
                let report = run_simulation(&plan, &impls, &RunOptions::default())?;
                let elapsed = start.elapsed().as_secs_f64();
                if !report.success() {
                    return Err(BenchError::Aborted(format!("{:?}", report.outcome)));
                }
                times.push(elapsed);
            }
            times.sort_by(f64::total_cmp);
            let median = times[times.len() / 2];
            samples.push(OverheadSample {
                n,
                m: actual_m,
                seconds: median,
            });
        }
    }
    let fit = fit_overhead(
        &samples
            .iter()
            .map(|s| (s.n, s.m, s.seconds))
            .collect::<Vec<_>>(),
    )?;
    Ok(OverheadReport { samples, fit })
}

/// CSV with columns `transport,size_bytes,mean_s,min_s`.
pub fn speed_csv(report: &SpeedReport) -> String {
    let mut out = String::from("transport,size_bytes,mean_s,min_s\n");
    for row in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            report.transport.as_str(),
            row.size_bytes,
            row.mean_one_way,
            row.min_one_way
        );
    }
    out
}

/// Plain-text table with the latency and throughput summary.
pub fn speed_table(report: &SpeedReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "ping-pong over {} ({} round trips per size)",
        report.transport.as_str(),
        report.round_trips
    );
    let _ = writeln!(out, "{:>12}  {:>14}  {:>14}", "size_bytes", "mean_s", "min_s");
    for row in &report.rows {
        let _ = writeln!(
            out,
            "{:>12}  {:>14.9}  {:>14.9}",
            row.size_bytes, row.mean_one_way, row.min_one_way
        );
    }
    let _ = writeln!(out, "latency: {:.9} s", report.latency);
    match report.throughput() {
        Some(throughput) => {
            let _ = writeln!(out, "throughput: {:.3} MB/s", throughput / 1e6);
        }
        None => {
            let _ = writeln!(out, "throughput: undefined (fewer than two distinct sizes)");
        }
    }
    out
}

/// CSV with columns `n,m,T_s`.
pub fn overhead_csv(report: &OverheadReport) -> String {
    let mut out = String::from("n,m,T_s\n");
    for sample in &report.samples {
        let _ = writeln!(out, "{},{},{}", sample.n, sample.m, sample.seconds);
    }
    out
}

/// Plain-text table with the fitted coefficients.
pub fn overhead_table(report: &OverheadReport) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>6}  {:>8}  {:>12}", "n", "m", "T_s");
    for sample in &report.samples {
        let _ = writeln!(
            out,
            "{:>6}  {:>8}  {:>12.6}",
            sample.n, sample.m, sample.seconds
        );
    }
    let fit = &report.fit;
    let _ = writeln!(
        out,
        "fit: T = {:.6} + {:.9}*n + {:.9}*m   (min T = {:.6} s)",
        fit.a, fit.b, fit.c, fit.min_t
    );
    out
}
