//! A desk-scale canal analog: a 1-D explicit diffusion stencil run
//! monolithically and as two coupled sections (left/right) that exchange
//! their boundary cells through the runtime each iteration.
//!
//! Both paths perform exactly the same arithmetic per cell: each
//! iteration a section observes its edge cell, receives the neighbor's
//! edge as its halo, and updates `cells[i] += k*(left + right - 2*cells[i])`.
//! The coupled final field therefore matches the monolithic one exactly,
//! which is the module's core correctness oracle. The efficiency report
//! compares wall-clock times: eps = T_mono / T_coupled.

use std::fmt::Write as _;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::bench::{split_plan, BenchError, BenchTransport};
use crate::codec::Payload;
use crate::config::ConfigDocument;
use crate::kernel::{InstanceImpl, InstancePorts, KernelError, Submodel};
use crate::runtime::{run_simulation, ImplRegistry, InstanceOutcome, RunOptions, RuntimeError};
use crate::topology::{ConduitSpec, Endpoint, InstanceKind, InstanceSpec, Topology};

#[derive(Debug, Error)]
pub enum CanalError {
    #[error("bad canal spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Bench(#[from] BenchError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error("coupled run aborted: {0}")]
    Aborted(String),
}

/// Problem description: a canal of `length_m` metres resolved at
/// `points_per_metre` grid points per metre.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CanalSpec {
    pub length_m: f64,
    pub points_per_metre: f64,
    pub iterations: usize,
    /// Dimensionless stencil coefficient, in (0, 0.5] for stability.
    pub diffusion_coeff: f64,
}

impl CanalSpec {
    pub fn grid_size(&self) -> usize {
        (self.length_m * self.points_per_metre).round() as usize
    }

    pub fn validate(&self) -> Result<(), CanalError> {
        if !(self.length_m.is_finite() && self.length_m > 0.0)
            || !(self.points_per_metre.is_finite() && self.points_per_metre > 0.0)
        {
            return Err(CanalError::BadSpec(
                "length and resolution must be positive".into(),
            ));
        }
        if !(self.diffusion_coeff > 0.0 && self.diffusion_coeff <= 0.5) {
            return Err(CanalError::BadSpec(format!(
                "diffusion coefficient {} outside (0, 0.5]",
                self.diffusion_coeff
            )));
        }
        let grid = self.grid_size();
        if grid < 4 {
            return Err(CanalError::BadSpec(format!(
                "grid of {grid} points is too small (need at least 4)"
            )));
        }
        if grid % 2 != 0 {
            return Err(CanalError::BadSpec(format!(
                "grid of {grid} points cannot be split equally"
            )));
        }
        Ok(())
    }
}

impl Default for CanalSpec {
    fn default() -> Self {
        CanalSpec {
            length_m: 600.0,
            points_per_metre: 4.0,
            iterations: 500,
            diffusion_coeff: 0.25,
        }
    }
}

/// One section's field plus the halo values at its two edges.
#[derive(Debug, Clone, PartialEq)]
pub struct SectionState {
    pub cells: Vec<f64>,
    pub left_halo: f64,
    pub right_halo: f64,
}

impl SectionState {
    pub fn new(cells: Vec<f64>) -> Self {
        SectionState {
            cells,
            left_halo: 0.0,
            right_halo: 0.0,
        }
    }
}

/// One explicit stencil update:
/// `cells'[i] = cells[i] + k*(left + right - 2*cells[i])`
/// with the halos standing in for the missing neighbors at the edges.
/// Halos are left unchanged.
pub fn step_section(state: &SectionState, k: f64) -> SectionState {
    let cells = &state.cells;
    let n = cells.len();
    let mut next = Vec::with_capacity(n);
    for i in 0..n {
        let left = if i == 0 { state.left_halo } else { cells[i - 1] };
        let right = if i + 1 == n { state.right_halo } else { cells[i + 1] };
        next.push(cells[i] + k * (left + right - 2.0 * cells[i]));
    }
    SectionState {
        cells: next,
        left_halo: state.left_halo,
        right_halo: state.right_halo,
    }
}

/// Default initial condition: a unit impulse at the midpoint (the first
/// cell of the right section), so the split boundary is exercised
/// immediately.
pub fn initial_field(grid: usize) -> Vec<f64> {
    let mut field = vec![0.0; grid];
    if grid > 0 {
        field[grid / 2] = 1.0;
    }
    field
}

/// Runs the full grid in one loop with fixed zero halos at the global
/// ends. Returns the final field and the wall-clock time.
pub fn run_monolithic(spec: &CanalSpec) -> Result<(Vec<f64>, Duration), CanalError> {
    spec.validate()?;
    let mut state = SectionState::new(initial_field(spec.grid_size()));
    let start = Instant::now();
    for _ in 0..spec.iterations {
        state = step_section(&state, spec.diffusion_coeff);
    }
    Ok((state.cells, start.elapsed()))
}

/// Per-phase timers of one coupled section.
#[derive(Debug, Clone, Copy, Default)]
pub struct SectionTimers {
    pub compute: Duration,
    pub exchange: Duration,
}

/// Result of a coupled run.
#[derive(Debug, Clone)]
pub struct CoupledRun {
    pub field: Vec<f64>,
    pub wall: Duration,
    /// Boundary messages sent by each section (left, right).
    pub messages_sent: (u64, u64),
    pub timers: (SectionTimers, SectionTimers),
}

#[derive(Clone, Copy, PartialEq)]
enum Side {
    Left,
    Right,
}

#[derive(Default)]
struct SectionResult {
    field: Option<Vec<f64>>,
    timers: SectionTimers,
}

/// One half of the canal as a submodel: each iteration it observes its
/// edge cell onto the `edge` port, receives the neighbor's edge on the
/// `halo` port, and steps its half of the grid.
struct Section {
    side: Side,
    state: SectionState,
    k: f64,
    result: Arc<Mutex<SectionResult>>,
    timers: SectionTimers,
}

impl Submodel for Section {
    fn init(&mut self, _ports: &mut InstancePorts, _t: f64) -> Result<(), KernelError> {
        Ok(())
    }

    fn intermediate_observation(
        &mut self,
        ports: &mut InstancePorts,
        t: f64,
    ) -> Result<(), KernelError> {
        let started = Instant::now();
        let edge = match self.side {
            Side::Left => *self.state.cells.last().expect("non-empty section"),
            Side::Right => self.state.cells[0],
        };
        ports.send("edge", Payload::F64(vec![edge]), t)?;
        self.timers.exchange += started.elapsed();
        Ok(())
    }

    fn solve_step(&mut self, ports: &mut InstancePorts, _t: f64, _dt: f64) -> Result<(), KernelError> {
        let started = Instant::now();
        let (payload, _t) = ports.receive("halo")?;
        let halo = match payload {
            Payload::F64(values) if values.len() == 1 => values[0],
            other => {
                return Err(KernelError::failed(format!(
                    "expected a single f64 halo value, got {other:?}"
                )))
            }
        };
        match self.side {
            Side::Left => self.state.right_halo = halo,
            Side::Right => self.state.left_halo = halo,
        }
        self.timers.exchange += started.elapsed();
        let started = Instant::now();
        self.state = step_section(&self.state, self.k);
        self.timers.compute += started.elapsed();
        Ok(())
    }

    fn final_observation(&mut self, _ports: &mut InstancePorts, _t: f64) -> Result<(), KernelError> {
        let mut result = self.result.lock().unwrap();
        result.field = Some(self.state.cells.clone());
        result.timers = self.timers;
        Ok(())
    }
}

fn coupled_topology(iterations: usize) -> Topology {
    Topology {
        instances: vec![
            InstanceSpec::new("left", InstanceKind::Submodel, "canal.section")
                .with_scale(1.0, iterations as f64),
            InstanceSpec::new("right", InstanceKind::Submodel, "canal.section")
                .with_scale(1.0, iterations as f64),
        ],
        conduits: vec![
            ConduitSpec::new(Endpoint::new("left", "edge"), Endpoint::new("right", "halo")),
            ConduitSpec::new(Endpoint::new("right", "edge"), Endpoint::new("left", "halo")),
        ],
    }
}

/// Runs the canal split equally into `left` and `right` sections over the
/// runtime. The concatenated final field is returned with the wall-clock
/// time of the whole coupled run.
pub fn run_coupled(spec: &CanalSpec, transport: BenchTransport) -> Result<CoupledRun, CanalError> {
    spec.validate()?;
    let grid = spec.grid_size();
    let field = initial_field(grid);
    let half = grid / 2;
    let left_init = field[..half].to_vec();
    let right_init = field[half..].to_vec();
    let left_result = Arc::new(Mutex::new(SectionResult::default()));
    let right_result = Arc::new(Mutex::new(SectionResult::default()));

    let mut impls = ImplRegistry::new();
    {
        let k = spec.diffusion_coeff;
        let left_result = left_result.clone();
        let right_result = right_result.clone();
        impls.register("canal.section", move |inst_spec| {
            let (side, cells, result) = match inst_spec.name.as_str() {
                "left" => (Side::Left, left_init.clone(), left_result.clone()),
                "right" => (Side::Right, right_init.clone(), right_result.clone()),
                other => {
                    return Err(RuntimeError::Plan(format!(
                        "canal.section instance must be `left` or `right`, got {other}"
                    )))
                }
            };
            Ok(InstanceImpl::Submodel(Box::new(Section {
                side,
                state: SectionState::new(cells),
                k,
                result,
                timers: SectionTimers::default(),
            })))
        });
    }

    let doc = ConfigDocument {
        topology: coupled_topology(spec.iterations),
        raw_params: Vec::new(),
    };
    let (plan, relays) = split_plan(doc, "left", "right", transport)?;
    let start = Instant::now();
    let report = run_simulation(&plan, &impls, &RunOptions::default())?;
    let wall = start.elapsed();
    for relay in relays {
        relay.stop();
    }
    if !report.success() {
        return Err(CanalError::Aborted(format!("{:?}", report.outcome)));
    }
    let sent = |name: &str| -> u64 {
        report
            .instances
            .iter()
            .find(|i| i.name == name)
            .and_then(|i| match &i.outcome {
                InstanceOutcome::Completed(stats) => Some(stats.messages_sent),
                _ => None,
            })
            .unwrap_or(0)
    };
    let left = left_result.lock().unwrap();
    let right = right_result.lock().unwrap();
    let (Some(left_field), Some(right_field)) = (&left.field, &right.field) else {
        return Err(CanalError::Aborted(
            "sections reported no final field".into(),
        ));
    };
    let mut field = left_field.clone();
    field.extend_from_slice(right_field);
    Ok(CoupledRun {
        field,
        wall,
        messages_sent: (sent("left"), sent("right")),
        timers: (left.timers, right.timers),
    })
}

/// One row of the efficiency report.
#[derive(Debug, Clone, Copy)]
pub struct EfficiencyRow {
    pub points_per_metre: f64,
    pub grid: usize,
    pub t_mono: f64,
    pub t_local: f64,
    /// T_mono / T_local.
    pub eps_local: f64,
    /// Populated only when the coupled run spans two processes.
    pub t_distr: Option<f64>,
    pub eps_distr: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct EfficiencyReport {
    pub rows: Vec<EfficiencyRow>,
}

/// The default resolution grid: 0.5 to 4 points per metre in steps of 0.5.
pub fn default_resolutions() -> Vec<f64> {
    (1..=8).map(|i| i as f64 * 0.5).collect()
}

/// Runs monolithic and coupled (in-process) per resolution, three repeats
/// each, and reports median times and the efficiency ratio. One untimed
/// warm-up pair per resolution excludes allocator and page-fault noise
/// from the first timed repeat.
pub fn efficiency_sweep(
    resolutions: &[f64],
    template: &CanalSpec,
) -> Result<EfficiencyReport, CanalError> {
    const REPEATS: usize = 3;
    let mut rows = Vec::new();
    for &n in resolutions {
        let spec = CanalSpec {
            points_per_metre: n,
            ..*template
        };
        spec.validate()?;
        let _ = run_monolithic(&spec)?;
        let _ = run_coupled(&spec, BenchTransport::InProcess)?;
        let mut mono_times = Vec::new();
        let mut local_times = Vec::new();
        for _ in 0..REPEATS {
            let (_, t_mono) = run_monolithic(&spec)?;
            mono_times.push(t_mono.as_secs_f64());
            let coupled = run_coupled(&spec, BenchTransport::InProcess)?;
            local_times.push(coupled.wall.as_secs_f64());
        }
        mono_times.sort_by(f64::total_cmp);
        local_times.sort_by(f64::total_cmp);
        let t_mono = mono_times[REPEATS / 2];
        let t_local = local_times[REPEATS / 2];
        rows.push(EfficiencyRow {
            points_per_metre: n,
            grid: spec.grid_size(),
            t_mono,
            t_local,
            eps_local: t_mono / t_local,
            t_distr: None,
            eps_distr: None,
        });
    }
    Ok(EfficiencyReport { rows })
}

/// CSV with columns `N,grid,T_mono_s,T_local_s,eps_local`.
pub fn efficiency_csv(report: &EfficiencyReport) -> String {
    let mut out = String::from("N,grid,T_mono_s,T_local_s,eps_local\n");
    for row in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            row.points_per_metre, row.grid, row.t_mono, row.t_local, row.eps_local
        );
    }
    out
}

pub fn efficiency_table(report: &EfficiencyReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:>6}  {:>8}  {:>12}  {:>12}  {:>10}",
        "N", "grid", "T_mono_s", "T_local_s", "eps_local"
    );
    for row in &report.rows {
        let _ = writeln!(
            out,
            "{:>6}  {:>8}  {:>12.6}  {:>12.6}  {:>10.4}",
            row.points_per_metre, row.grid, row.t_mono, row.t_local, row.eps_local
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CanalSpec {
        CanalSpec {
            length_m: 100.0,
            points_per_metre: 1.0,
            iterations: 50,
            diffusion_coeff: 0.25,
        }
    }

    #[test]
    fn uniform_field_is_equilibrium() {
        let state = SectionState {
            cells: vec![2.0; 8],
            left_halo: 2.0,
            right_halo: 2.0,
        };
        let next = step_section(&state, 0.5);
        assert_eq!(next.cells, vec![2.0; 8]);
    }

    #[test]
    fn hand_computed_step() {
        // cells [0,1,0], halos 0, k=0.5 -> [0.5, 0, 0.5]
        let state = SectionState::new(vec![0.0, 1.0, 0.0]);
        let next = step_section(&state, 0.5);
        assert_eq!(next.cells, vec![0.5, 0.0, 0.5]);
    }

    #[test]
    fn halos_unchanged_by_step() {
        let state = SectionState {
            cells: vec![1.0, 2.0],
            left_halo: 3.0,
            right_halo: 4.0,
        };
        let next = step_section(&state, 0.25);
        assert_eq!(next.left_halo, 3.0);
        assert_eq!(next.right_halo, 4.0);
    }

    #[test]
    fn mass_is_conserved_including_boundary_flux() {
        // sum(cells) plus the accumulated outflow through the fixed zero
        // halos stays constant.
        let spec = CanalSpec {
            length_m: 50.0,
            points_per_metre: 2.0,
            iterations: 1000,
            diffusion_coeff: 0.25,
        };
        let k = spec.diffusion_coeff;
        let mut state = SectionState::new(initial_field(spec.grid_size()));
        let initial_mass: f64 = state.cells.iter().sum();
        let mut outflow = 0.0;
        for _ in 0..spec.iterations {
            outflow += k * (state.cells[0] - state.left_halo);
            outflow += k * (state.cells[state.cells.len() - 1] - state.right_halo);
            state = step_section(&state, k);
        }
        let mass: f64 = state.cells.iter().sum();
        let relative = ((mass + outflow) - initial_mass).abs() / initial_mass;
        assert!(relative <= 1e-9, "relative drift {relative}");
    }

    #[test]
    fn impulse_spreads_symmetrically() {
        let mut state = SectionState::new({
            let mut f = vec![0.0; 9];
            f[4] = 1.0;
            f
        });
        for _ in 0..3 {
            state = step_section(&state, 0.25);
        }
        for i in 0..4 {
            assert_eq!(state.cells[i], state.cells[8 - i], "asymmetry at {i}");
        }
    }

    #[test]
    fn zero_iterations_returns_initial_field() {
        let spec = CanalSpec {
            iterations: 0,
            ..small_spec()
        };
        let (field, _) = run_monolithic(&spec).unwrap();
        assert_eq!(field, initial_field(spec.grid_size()));
    }

    #[test]
    fn odd_grid_rejected() {
        let spec = CanalSpec {
            length_m: 25.0,
            points_per_metre: 1.0,
            iterations: 1,
            diffusion_coeff: 0.25,
        };
        assert!(matches!(spec.validate(), Err(CanalError::BadSpec(_))));
    }

    #[test]
    fn unstable_coefficient_rejected() {
        let spec = CanalSpec {
            diffusion_coeff: 0.6,
            ..small_spec()
        };
        assert!(matches!(spec.validate(), Err(CanalError::BadSpec(_))));
    }

    #[test]
    fn coupled_equals_monolithic_exactly() {
        let spec = small_spec();
        let (mono, _) = run_monolithic(&spec).unwrap();
        let coupled = run_coupled(&spec, BenchTransport::InProcess).unwrap();
        assert_eq!(coupled.field.len(), mono.len());
        for (i, (a, b)) in coupled.field.iter().zip(&mono).enumerate() {
            assert_eq!(a, b, "cell {i} differs");
        }
    }

    #[test]
    fn one_iteration_propagates_across_the_split() {
        // The impulse sits at the first cell of the right section; after
        // one exchange the left section's last cell must feel it.
        let spec = CanalSpec {
            length_m: 8.0,
            points_per_metre: 1.0,
            iterations: 1,
            diffusion_coeff: 0.25,
        };
        let (mono, _) = run_monolithic(&spec).unwrap();
        let coupled = run_coupled(&spec, BenchTransport::InProcess).unwrap();
        assert_eq!(coupled.field, mono);
        assert!(coupled.field[3] > 0.0, "impulse did not cross the split");
    }

    #[test]
    fn communication_volume_is_constant_per_iteration() {
        for n in [0.5, 2.0] {
            let spec = CanalSpec {
                length_m: 100.0,
                points_per_metre: n,
                iterations: 30,
                diffusion_coeff: 0.25,
            };
            let coupled = run_coupled(&spec, BenchTransport::InProcess).unwrap();
            // One f64 each way per iteration, independent of grid size.
            assert_eq!(coupled.messages_sent, (30, 30));
        }
    }
}
