//! Stochastic plant simulation, scenario runs, Monte Carlo aggregation and
//! the brute-force admissibility oracle.
//!
//! Every run owns a `ChaCha8Rng` seeded with `seed_from_u64(base_seed + run_index)`.
//! Uniforms are `(next_u64 >> 11) * 2^-53`; each Gaussian consumes two of them
//! through Box-Muller (`sqrt(-2 ln(1 - u1)) cos(2π u2)`). Per step the draws are
//! taken in the order ω, ξ, ζ, ς, each as a standard normal vector multiplied
//! by a fixed square-root factor of its covariance.

use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::admissible::{AdmissibleSet, ConstrainedLoop};
use crate::aorg::{self, AorgPlan};
use crate::error::{dims, Error, Result};
use crate::linalg;
use crate::math;
use crate::model::{ClosedLoop, ConstraintSpec, ModeGraph, ModeModel, OutputMaps};
use crate::polytope::Polytope;
use crate::stochastics;
use crate::{Matrix, Vector};

/// Seeded uniform and Gaussian stream.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    rng: ChaCha8Rng,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        NoiseSource { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn for_run(base_seed: u64, run_index: usize) -> Self {
        Self::new(run_seed(base_seed, run_index))
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn gaussian(&mut self) -> f64 {
        let u1 = self.uniform();
        let u2 = self.uniform();
        math::sqrt(-2.0 * math::ln(1.0 - u1)) * math::cos(2.0 * core::f64::consts::PI * u2)
    }

    pub fn standard_normal(&mut self, len: usize) -> Vector {
        Vector::from_iterator(len, (0..len).map(|_| self.gaussian()))
    }

    /// `F w` with `w ~ N(0, I)`; all entries are drawn even when `F = 0`.
    pub fn correlated(&mut self, factor: &Matrix) -> Vector {
        let w = self.standard_normal(factor.ncols());
        factor * w
    }
}

pub fn run_seed(base_seed: u64, run_index: usize) -> u64 {
    base_seed.wrapping_add(run_index as u64)
}

/// Square-root factors of the four noise covariances.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseFactors {
    pub omega: Matrix,
    pub xi: Matrix,
    pub zeta: Matrix,
    pub varsigma: Matrix,
}

impl NoiseFactors {
    pub fn new(mode: &ModeModel, spec: &ConstraintSpec) -> Result<Self> {
        Ok(NoiseFactors {
            omega: linalg::psd_factor(&mode.h_omega)?,
            xi: linalg::psd_factor(&mode.h_xi)?,
            zeta: linalg::psd_factor(&spec.h_zeta)?,
            varsigma: linalg::psd_factor(&spec.h_varsigma)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub omega: Vector,
    pub xi: Vector,
    pub zeta: Vector,
    pub varsigma: Vector,
}

impl NoiseDraw {
    pub fn draw(factors: &NoiseFactors, src: &mut NoiseSource) -> Self {
        let omega = src.correlated(&factors.omega);
        let xi = src.correlated(&factors.xi);
        let zeta = src.correlated(&factors.zeta);
        let varsigma = src.correlated(&factors.varsigma);
        NoiseDraw { omega, xi, zeta, varsigma }
    }
}

/// True plant `mode` running under some gains.
#[derive(Debug, Clone, PartialEq)]
pub struct Plant {
    pub mode_id: usize,
    pub sys: ClosedLoop,
    pub c: Matrix,
    pub maps: OutputMaps,
    pub noise: NoiseFactors,
}

impl Plant {
    pub fn new(true_mode: &ModeModel, gains: &ModeModel, spec: &ConstraintSpec) -> Result<Self> {
        Ok(Plant {
            mode_id: true_mode.mode_id,
            sys: true_mode.loop_with_gains(&gains.k, &gains.g),
            c: true_mode.c.clone(),
            maps: spec.output_maps(&gains.k, &gains.g),
            noise: NoiseFactors::new(true_mode, spec)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub x_next: Vector,
    pub y: Vector,
    pub z1: Vector,
    pub z2: Vector,
}

/// Outputs at the current step and the next state for an already drawn noise.
pub fn apply_step(plant: &Plant, x: &Vector, v: &Vector, noise: &NoiseDraw) -> StepOutput {
    StepOutput {
        x_next: &plant.sys.a * x + &plant.sys.b * v + &noise.omega,
        y: &plant.c * x + &noise.xi,
        z1: &plant.maps.lx * x + &plant.maps.lv * v + &noise.zeta,
        z2: &plant.maps.fx * x + &plant.maps.fv * v + &noise.varsigma,
    }
}

/// Draws ω, ξ, ζ, ς and applies one step.
pub fn simulate_step(plant: &Plant, x: &Vector, v: &Vector, src: &mut NoiseSource) -> StepOutput {
    let noise = NoiseDraw::draw(&plant.noise, src);
    apply_step(plant, x, v, &noise)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Phase {
    Tracking,
    Transient,
    Steady,
    Holding,
    Recovering,
}

impl Phase {
    pub fn as_str(&self) -> &'static str {
        match self {
            Phase::Tracking => "tracking",
            Phase::Transient => "transient",
            Phase::Steady => "steady",
            Phase::Holding => "holding",
            Phase::Recovering => "recovering",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Event {
    Plan { horizon: usize, objective: f64 },
    Hold,
    SolverHold(String),
    Fault { mode: usize },
    Detection { mode: usize, posterior: f64 },
    Confirmation { mode: usize },
    Reconfiguration { mode: usize, horizon: usize },
    RecoveryComplete { mode: usize },
    PhaseChange { from: Phase, to: Phase },
}

impl Event {
    pub fn describe(&self) -> String {
        match self {
            Event::Plan { horizon, objective } => format!("plan(T={horizon},obj={objective:.6})"),
            Event::Hold => "hold".into(),
            Event::SolverHold(msg) => format!("solver_hold({msg})"),
            Event::Fault { mode } => format!("fault(mode={mode})"),
            Event::Detection { mode, posterior } => format!("detect(mode={mode},p={posterior:.6})"),
            Event::Confirmation { mode } => format!("confirm(mode={mode})"),
            Event::Reconfiguration { mode, horizon } => format!("reconfigure(mode={mode},T_r={horizon})"),
            Event::RecoveryComplete { mode } => format!("recovered(mode={mode})"),
            Event::PhaseChange { from, to } => format!("phase({}->{})", from.as_str(), to.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub t: usize,
    pub true_mode: usize,
    pub believed_mode: usize,
    pub phase: Phase,
    pub x: Vector,
    pub v: Vector,
    pub r: Vector,
    pub y: Vector,
    pub z1: Vector,
    pub z2: Vector,
    /// `z1` without its measurement noise, used for extension bookkeeping.
    pub z1_clean: Vector,
    pub z2_clean: Vector,
    pub posteriors: Vec<(usize, f64)>,
    pub events: Vec<Event>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub steps: usize,
    /// First step from which `||v - r|| < tol` holds to the end.
    pub convergence_step: Option<usize>,
    pub monotone_progress: bool,
    pub plans: usize,
    pub holds: usize,
    pub max_hold_length: usize,
    pub z1_nominal_violations: usize,
    pub z2_nominal_violations: usize,
    pub z1_plus_violations: usize,
    pub z2_plus_violations: usize,
    pub max_extension_episode: usize,
    /// Steps at which a (correct or not) detection was recorded.
    pub detections: Vec<(usize, usize)>,
    pub fault_time: Option<usize>,
    pub confirmation_time: Option<usize>,
    pub confirmed_mode: Option<usize>,
    pub recovery_complete_time: Option<usize>,
    /// Relative tracking error `||r - v|| / ||r - v(-1)||` at the end of the first interval.
    pub first_interval_error: Option<f64>,
    pub kappa_sum: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub run_index: usize,
    pub seed: u64,
    pub records: Vec<TraceRecord>,
    pub summary: RunSummary,
}

/// Which governor drives the plant in a pure tracking run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrackingGovernor {
    /// Interval planning, replanned after `T + 1` steps.
    AtOnce,
    /// Horizon-0 governor replanned every step.
    Conventional,
}

/// Everything a run needs, in core types.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub graph: ModeGraph,
    pub spec: ConstraintSpec,
    pub steps: usize,
    pub initial_mode: usize,
    pub true_initial_mode: usize,
    pub x0: Vector,
    pub x0_spread: Option<Vector>,
    pub v_init: Vector,
    pub reference: Vec<(usize, Vector)>,
    pub faults: Vec<(usize, usize)>,
    pub base_seed: u64,
    pub convergence_tol: f64,
}

impl Scenario {
    /// Reference in force at step `t`.
    pub fn reference_at(&self, t: usize) -> &Vector {
        let mut r = &self.reference[0].1;
        for (start, value) in &self.reference {
            if *start <= t {
                r = value;
            }
        }
        r
    }

    pub fn preview(&self, t: usize, len: usize) -> Vec<Vector> {
        (0..len).map(|i| self.reference_at(t + i).clone()).collect()
    }

    /// Plant mode at step `t` given the fault schedule.
    pub fn true_mode_at(&self, t: usize) -> usize {
        let mut mode = self.true_initial_mode;
        for (time, m) in &self.faults {
            if *time <= t {
                mode = *m;
            }
        }
        mode
    }

    pub fn check(&self) -> Result<()> {
        if self.reference.is_empty() {
            return Err(Error::InvalidArgument("scenario needs a reference".into()));
        }
        let mode = self.graph.require(self.initial_mode)?;
        linalg::ensure_len(&self.x0, mode.n(), "x0")?;
        linalg::ensure_len(&self.v_init, mode.m(), "v_init")?;
        for (_, r) in &self.reference {
            linalg::ensure_len(r, mode.m(), "reference")?;
        }
        if let Some(s) = &self.x0_spread {
            linalg::ensure_len(s, mode.n(), "x0_spread")?;
        }
        for (_, m) in &self.faults {
            self.graph.require(*m)?;
        }
        Ok(())
    }

    pub fn initial_state(&self, src: &mut NoiseSource) -> Vector {
        match &self.x0_spread {
            Some(s) => {
                let w = src.standard_normal(s.len());
                &self.x0 + s.component_mul(&w)
            }
            None => self.x0.clone(),
        }
    }
}

/// Pure tracking under one mode (no detector), AORG or the horizon-0 baseline.
pub fn run_tracking(
    scenario: &Scenario,
    oinf: &AdmissibleSet,
    governor: TrackingGovernor,
    run_index: usize,
) -> Result<Trace> {
    scenario.check()?;
    if governor == TrackingGovernor::Conventional && oinf.horizon_t != 0 {
        return Err(Error::InvalidArgument("the conventional governor needs a horizon-0 set".into()));
    }
    let seed = run_seed(scenario.base_seed, run_index);
    let mut src = NoiseSource::new(seed);
    let mode = scenario.graph.require(scenario.initial_mode)?;
    let mut x = scenario.initial_state(&mut src);
    let mut v_prev = scenario.v_init.clone();
    let mut plan: Option<(AorgPlan, usize)> = None;
    let mut records = Vec::with_capacity(scenario.steps);
    let mut monotone = true;
    let mut kappa_sum = 0.0;
    let mut plant_mode = usize::MAX;
    let mut plant: Option<Plant> = None;
    for t in 0..scenario.steps {
        let true_mode = scenario.true_mode_at(t);
        if true_mode != plant_mode {
            plant = Some(Plant::new(scenario.graph.require(true_mode)?, mode, &scenario.spec)?);
            plant_mode = true_mode;
        }
        let plant = plant.as_ref().expect("plant set above");
        let noise = NoiseDraw::draw(&plant.noise, &mut src);
        let mut events = Vec::new();
        if t > 0 && scenario.faults.iter().any(|(time, _)| *time == t) {
            events.push(Event::Fault { mode: true_mode });
        }
        let needs_plan = match &plan {
            None => true,
            Some((p, cursor)) => *cursor >= p.v_seq.len(),
        };
        if needs_plan {
            plan = None;
            let len = match governor {
                TrackingGovernor::AtOnce => oinf.horizon_t + 1,
                TrackingGovernor::Conventional => 1,
            };
            let preview = scenario.preview(t, len);
            match aorg::plan_interval(oinf, &x, &v_prev, &preview) {
                Ok(p) => {
                    monotone &= plan_is_monotone(&p, &v_prev, &preview);
                    kappa_sum += p.objective;
                    events.push(Event::Plan { horizon: p.v_seq.len() - 1, objective: p.objective });
                    plan = Some((p, 0));
                }
                Err(Error::InfeasibleStart) => events.push(Event::Hold),
                Err(e) => events.push(Event::SolverHold(format!("{e}"))),
            }
        }
        let v = match &mut plan {
            Some((p, cursor)) => {
                let v = p.v_seq[*cursor].clone();
                *cursor += 1;
                v
            }
            None => v_prev.clone(),
        };
        let out = apply_step(plant, &x, &v, &noise);
        let z1_clean = &out.z1 - &noise.zeta;
        let z2_clean = &out.z2 - &noise.varsigma;
        records.push(TraceRecord {
            t,
            true_mode,
            believed_mode: mode.mode_id,
            phase: if plan.is_some() { Phase::Tracking } else { Phase::Holding },
            x: x.clone(),
            v: v.clone(),
            r: scenario.reference_at(t).clone(),
            y: out.y,
            z1: out.z1,
            z2: out.z2,
            z1_clean,
            z2_clean,
            posteriors: Vec::new(),
            events,
        });
        x = out.x_next;
        v_prev = v;
    }
    let first_interval_end = match governor {
        TrackingGovernor::AtOnce => oinf.horizon_t,
        TrackingGovernor::Conventional => 5.min(scenario.steps.saturating_sub(1)),
    };
    let mut summary = summarize(&records, &scenario.spec, scenario.convergence_tol, &scenario.v_init, first_interval_end);
    summary.monotone_progress = monotone;
    summary.kappa_sum = kappa_sum;
    Ok(Trace { run_index, seed, records, summary })
}

/// Per-coordinate distance to the previewed reference never increases.
pub fn plan_is_monotone(plan: &AorgPlan, v_prev: &Vector, preview: &[Vector]) -> bool {
    let full = match aorg::fit_preview(preview, plan.v_seq.len()) {
        Ok(f) => f,
        Err(_) => return false,
    };
    let mut prev = v_prev.clone();
    for (v, r) in plan.v_seq.iter().zip(&full) {
        for j in 0..v.len() {
            if (r[j] - v[j]).abs() > (r[j] - prev[j]).abs() + 1e-12 {
                return false;
            }
        }
        prev = v.clone();
    }
    true
}

fn outside(set: &Polytope, z: &Vector) -> bool {
    set.max_violation(z) > 0.0
}

/// Recomputes a run summary from its records.
pub fn summarize(
    records: &[TraceRecord],
    spec: &ConstraintSpec,
    tol: f64,
    v_init: &Vector,
    first_interval_end: usize,
) -> RunSummary {
    let mut s = RunSummary { steps: records.len(), monotone_progress: true, ..Default::default() };
    let mut hold_run = 0usize;
    let mut ext_run = 0usize;
    let mut converged_from: Option<usize> = None;
    for rec in records {
        for e in &rec.events {
            match e {
                Event::Plan { .. } => s.plans += 1,
                Event::Hold | Event::SolverHold(_) => s.holds += 1,
                Event::Fault { .. } if s.fault_time.is_none() => s.fault_time = Some(rec.t),
                Event::Detection { mode, .. } => s.detections.push((rec.t, *mode)),
                Event::Confirmation { mode } if s.confirmation_time.is_none() => {
                    s.confirmation_time = Some(rec.t);
                    s.confirmed_mode = Some(*mode);
                }
                Event::RecoveryComplete { .. } if s.recovery_complete_time.is_none() => {
                    s.recovery_complete_time = Some(rec.t)
                }
                _ => {}
            }
        }
        if rec.phase == Phase::Holding {
            hold_run += 1;
            s.max_hold_length = s.max_hold_length.max(hold_run);
        } else {
            hold_run = 0;
        }
        s.z1_nominal_violations += outside(&spec.z1, &rec.z1) as usize;
        s.z2_nominal_violations += outside(&spec.z2, &rec.z2) as usize;
        s.z1_plus_violations += outside(&spec.z1_plus, &rec.z1) as usize;
        s.z2_plus_violations += outside(&spec.z2_plus, &rec.z2) as usize;
        if outside(&spec.z1, &rec.z1_clean) || outside(&spec.z2, &rec.z2_clean) {
            ext_run += 1;
            s.max_extension_episode = s.max_extension_episode.max(ext_run);
        } else {
            ext_run = 0;
        }
        let err = linalg::euclid(&(&rec.v - &rec.r));
        if err < tol {
            converged_from.get_or_insert(rec.t);
        } else {
            converged_from = None;
        }
        if rec.t == first_interval_end {
            let den = linalg::euclid(&(&rec.r - v_init));
            s.first_interval_error = Some(if den > 0.0 { err / den } else { 0.0 });
        }
    }
    s.convergence_step = converged_from;
    s
}

/// Noise-free simulation oracle for membership in the admissible set.
///
/// Rolls `(x, v_0..v_T)` forward for `horizon_mult * max(k*, 1) + T` steps with
/// `v_T` held, checking every output against `Z1` and `Z2` tightened by the
/// covariance of that step, then checks strict steady-state admissibility of
/// `v_T` from a long simulated settle. Covariances come from direct
/// propagation and steady states from simulation.
pub fn brute_force_admissibility_oracle(
    mode: &ModeModel,
    spec: &ConstraintSpec,
    set: &AdmissibleSet,
    point: &Vector,
    horizon_mult: usize,
) -> Result<bool> {
    let n = mode.n();
    let m = mode.m();
    if n > 3 || set.horizon_t > 3 {
        return Err(Error::DimensionTooLarge("oracle supports n <= 3 and T <= 3"));
    }
    linalg::ensure_len(point, n + m * (set.horizon_t + 1), "oracle point")?;
    let x0 = point.rows(0, n).into_owned();
    let v_seq: Vec<Vector> = (0..=set.horizon_t).map(|i| point.rows(n + i * m, m).into_owned()).collect();
    let maps = spec.maps_for(mode);
    let sys = mode.closed_loop();
    let steps = horizon_mult * set.k_star.max(1) + set.horizon_t;
    let pred = stochastics::split_prediction(&sys, &maps, &x0, &v_seq, steps)?;
    let q = stochastics::chi2_quantile(spec.beta, maps.fx.nrows().max(1))?;
    let at = sys.a.transpose();
    let mut sigma = Matrix::zeros(n, n);
    let mut limit_gamma = Matrix::zeros(maps.fx.nrows(), maps.fx.nrows());
    for k in 0..=steps {
        if spec.z1.max_violation(&pred.z1[k]) > 1e-9 {
            return Ok(false);
        }
        let gamma = &maps.fx * &sigma * maps.fx.transpose() + &spec.h_varsigma;
        for i in 0..spec.z2.nrows() {
            let a = spec.z2.normals().row(i).transpose();
            let margin = math::sqrt(q * a.dot(&(&gamma * &a)).max(0.0));
            if a.dot(&pred.z2[k]) > spec.z2.offsets()[i] - margin + 1e-9 {
                return Ok(false);
            }
        }
        sigma = &sys.a * &sigma * &at + &mode.h_omega;
        limit_gamma = gamma;
    }
    // settle further for the limiting covariance and the steady state
    let v_t = &v_seq[set.horizon_t];
    let mut xs = pred.x[steps].clone();
    for _ in 0..20_000 {
        let next = &sys.a * &xs + &sys.b * v_t;
        let moved = linalg::inf_norm(&(&next - &xs));
        xs = next;
        sigma = &sys.a * &sigma * &at + &mode.h_omega;
        if moved < 1e-14 {
            break;
        }
    }
    for _ in 0..20_000 {
        let next = &sys.a * &sigma * &at + &mode.h_omega;
        let moved = (&next - &sigma).amax();
        sigma = next;
        if moved < 1e-13 {
            break;
        }
    }
    limit_gamma = limit_gamma.sup(&(&maps.fx * &sigma * maps.fx.transpose() + &spec.h_varsigma));
    let z1s = &maps.lx * &xs + &maps.lv * v_t;
    let z2s = &maps.fx * &xs + &maps.fv * v_t;
    for i in 0..spec.z1.nrows() {
        let a = spec.z1.normals().row(i).transpose();
        if a.dot(&z1s) > spec.z1.offsets()[i] - set.eps * linalg::euclid(&a) - 1e-9 {
            return Ok(false);
        }
    }
    for i in 0..spec.z2.nrows() {
        let a = spec.z2.normals().row(i).transpose();
        let margin = math::sqrt(q * a.dot(&(&limit_gamma * &a)).max(0.0));
        if a.dot(&z2s) > spec.z2.offsets()[i] - margin - set.eps * linalg::euclid(&a) - 1e-9 {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Per-step statistics across runs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Aggregate {
    pub runs: usize,
    pub steps: usize,
    /// `[step][row]` fraction of runs whose `z2` violated row `i` of `Z2`.
    pub z2_row_violation_rate: Vec<Vec<f64>>,
    /// `[step][row]` same against `Z2+`.
    pub z2_plus_row_violation_rate: Vec<Vec<f64>>,
    /// `[step][row]` mean and standard error of `a_i z1 - b_i` for `Z1`.
    pub z1_margin_mean: Vec<Vec<f64>>,
    pub z1_margin_se: Vec<Vec<f64>>,
    /// Mean `||v - r||` per step.
    pub tracking_error: Vec<f64>,
    pub max_chance_violation_rate: f64,
    pub expectation_violations: usize,
    pub converged_runs: usize,
    pub monotone_runs: usize,
    pub mean_first_interval_error: Option<f64>,
    pub mean_kappa_sum: f64,
    pub max_hold_length: usize,
    pub max_extension_episode: usize,
}

/// Deterministic reduction over traces in the given order.
pub fn aggregate(traces: &[Trace], spec: &ConstraintSpec) -> Aggregate {
    let runs = traces.len();
    let steps = traces.iter().map(|t| t.records.len()).max().unwrap_or(0);
    let r2 = spec.z2.nrows();
    let r1 = spec.z1.nrows();
    let mut z2_viol = vec![vec![0usize; r2]; steps];
    let mut z2p_viol = vec![vec![0usize; spec.z2_plus.nrows()]; steps];
    let mut z1_sum = vec![vec![0.0; r1]; steps];
    let mut z1_sq = vec![vec![0.0; r1]; steps];
    let mut counts = vec![0usize; steps];
    let mut err = vec![0.0; steps];
    for tr in traces {
        for rec in &tr.records {
            let k = rec.t;
            counts[k] += 1;
            for i in 0..r2 {
                let a = spec.z2.normals().row(i);
                z2_viol[k][i] += ((a * &rec.z2)[0] > spec.z2.offsets()[i]) as usize;
            }
            for i in 0..spec.z2_plus.nrows() {
                let a = spec.z2_plus.normals().row(i);
                z2p_viol[k][i] += ((a * &rec.z2)[0] > spec.z2_plus.offsets()[i]) as usize;
            }
            for i in 0..r1 {
                let g = (spec.z1.normals().row(i) * &rec.z1)[0] - spec.z1.offsets()[i];
                z1_sum[k][i] += g;
                z1_sq[k][i] += g * g;
            }
            err[k] += linalg::euclid(&(&rec.v - &rec.r));
        }
    }
    let mut agg = Aggregate { runs, steps, ..Default::default() };
    for k in 0..steps {
        let c = counts[k].max(1) as f64;
        agg.z2_row_violation_rate.push(z2_viol[k].iter().map(|v| *v as f64 / c).collect());
        agg.z2_plus_row_violation_rate.push(z2p_viol[k].iter().map(|v| *v as f64 / c).collect());
        let mean: Vec<f64> = z1_sum[k].iter().map(|s| s / c).collect();
        let se: Vec<f64> = z1_sq[k]
            .iter()
            .zip(&mean)
            .map(|(sq, mu)| {
                let var = if c > 1.0 { ((sq / c) - mu * mu).max(0.0) * c / (c - 1.0) } else { 0.0 };
                math::sqrt(var / c)
            })
            .collect();
        agg.expectation_violations += mean.iter().zip(&se).filter(|(mu, s)| **mu - 2.0 * **s > 0.0).count();
        agg.z1_margin_mean.push(mean);
        agg.z1_margin_se.push(se);
        agg.tracking_error.push(err[k] / c);
    }
    agg.max_chance_violation_rate =
        agg.z2_row_violation_rate.iter().flat_map(|r| r.iter().copied()).fold(0.0, f64::max);
    agg.converged_runs = traces.iter().filter(|t| t.summary.convergence_step.is_some()).count();
    agg.monotone_runs = traces.iter().filter(|t| t.summary.monotone_progress).count();
    let fie: Vec<f64> = traces.iter().filter_map(|t| t.summary.first_interval_error).collect();
    if !fie.is_empty() {
        agg.mean_first_interval_error = Some(fie.iter().sum::<f64>() / fie.len() as f64);
    }
    if runs > 0 {
        agg.mean_kappa_sum = traces.iter().map(|t| t.summary.kappa_sum).sum::<f64>() / runs as f64;
    }
    agg.max_hold_length = traces.iter().map(|t| t.summary.max_hold_length).max().unwrap_or(0);
    agg.max_extension_episode = traces.iter().map(|t| t.summary.max_extension_episode).max().unwrap_or(0);
    agg
}

/// Builds the nominal constrained loop for a mode with `Σ(0) = 0`.
pub fn nominal_loop(mode: &ModeModel, spec: &ConstraintSpec, horizon: usize) -> Result<ConstrainedLoop> {
    ConstrainedLoop::nominal(mode, spec, &Matrix::zeros(mode.n(), mode.n()), horizon + 1)
}

pub fn stack_point(x: &Vector, v_seq: &[Vector]) -> Vector {
    let n = x.len();
    let m = v_seq.first().map_or(0, |v| v.len());
    let mut y = Vector::zeros(n + m * v_seq.len());
    y.rows_mut(0, n).copy_from(x);
    for (i, v) in v_seq.iter().enumerate() {
        y.rows_mut(n + i * m, m).copy_from(v);
    }
    y
}

pub fn check_same_dims(a: &Vector, b: &Vector) -> Result<()> {
    if a.len() != b.len() {
        return Err(dims("vector lengths differ"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::admissible::tests::scalar_loop;
    use crate::admissible::{admissible_set_for_mode, AdmissibleOptions};
    use alloc::collections::BTreeMap;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn uniform_and_gaussian_stream_is_reproducible() {
        let mut a = NoiseSource::new(7);
        let mut b = NoiseSource::new(7);
        for _ in 0..100 {
            assert_eq!(a.gaussian().to_bits(), b.gaussian().to_bits());
        }
        let mut c = NoiseSource::new(8);
        assert_ne!(a.uniform(), c.uniform());
        let u = NoiseSource::new(1).uniform();
        assert!((0.0..1.0).contains(&u));
    }

    #[test]
    fn omega_sample_mean_is_centred() {
        let (mode, spec) = scalar_loop(0.5, 0.5, 1.0);
        let mut mode = mode;
        mode.h_omega = dmatrix![0.25];
        let factors = NoiseFactors::new(&mode, &spec).unwrap();
        let mut src = NoiseSource::new(3);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sq = 0.0;
        for _ in 0..n {
            let d = NoiseDraw::draw(&factors, &mut src);
            sum += d.omega[0];
            sq += d.omega[0] * d.omega[0];
        }
        let mean = sum / n as f64;
        assert!(mean.abs() < 4.0 * 0.5 / (n as f64).sqrt());
        assert!((sq / n as f64 - 0.25).abs() < 0.01);
    }

    #[test]
    fn noise_free_step_matches_prediction() {
        let (mode, spec) = scalar_loop(0.5, 0.5, 1.0);
        let mut mode = mode;
        mode.h_omega = dmatrix![0.0];
        mode.h_xi = dmatrix![0.0];
        let plant = Plant::new(&mode, &mode, &spec).unwrap();
        let mut src = NoiseSource::new(1);
        let out = simulate_step(&plant, &dvector![0.4], &dvector![0.2], &mut src);
        let pred =
            stochastics::split_prediction(&mode.closed_loop(), &spec.maps_for(&mode), &dvector![0.4], &[dvector![0.2]], 1)
                .unwrap();
        assert_eq!(out.x_next, pred.x[1]);
        assert_eq!(out.z1, pred.z1[0]);
        assert_eq!(out.z2, pred.z2[0]);
    }

    fn scalar_scenario(steps: usize) -> (Scenario, AdmissibleSet) {
        let (mode, spec) = scalar_loop(0.5, 0.5, 1.0);
        let opts = AdmissibleOptions { eps: Some(0.01), ..Default::default() };
        let (set, _) = admissible_set_for_mode(&mode, &spec, 2, &opts).unwrap();
        let mut successors = BTreeMap::new();
        successors.insert(1, vec![]);
        let scenario = Scenario {
            graph: ModeGraph { modes: vec![mode], successors, priors: dvector![1.0] },
            spec,
            steps,
            initial_mode: 1,
            true_initial_mode: 1,
            x0: dvector![0.0],
            x0_spread: None,
            v_init: dvector![0.0],
            reference: vec![(0, dvector![0.8])],
            faults: vec![],
            base_seed: 11,
            convergence_tol: 1e-3,
        };
        (scenario, set)
    }

    #[test]
    fn tracking_converges_and_is_deterministic() {
        let (scenario, set) = scalar_scenario(30);
        let a = run_tracking(&scenario, &set, TrackingGovernor::AtOnce, 0).unwrap();
        let b = run_tracking(&scenario, &set, TrackingGovernor::AtOnce, 0).unwrap();
        assert_eq!(a, b);
        assert!(a.summary.convergence_step.is_some());
        assert!(a.summary.monotone_progress);
        assert_eq!(a.records.len(), 30);
        assert!(run_tracking(&scenario, &set, TrackingGovernor::Conventional, 0).is_err());
        let (mode, spec) = scalar_loop(0.5, 0.5, 1.0);
        let opts = AdmissibleOptions { eps: Some(0.01), ..Default::default() };
        let (set0, _) = admissible_set_for_mode(&mode, &spec, 0, &opts).unwrap();
        let rg = run_tracking(&scenario, &set0, TrackingGovernor::Conventional, 0).unwrap();
        assert_eq!(rg.summary.plans, 30);
    }

    #[test]
    fn empty_horizon_gives_empty_trace() {
        let (scenario, set) = scalar_scenario(0);
        let tr = run_tracking(&scenario, &set, TrackingGovernor::AtOnce, 0).unwrap();
        assert!(tr.records.is_empty());
        assert_eq!(tr.summary.steps, 0);
        let agg = aggregate(&[tr], &scenario.spec);
        assert_eq!(agg.steps, 0);
    }

    #[test]
    fn single_run_aggregate_matches_summary() {
        let (scenario, set) = scalar_scenario(20);
        let tr = run_tracking(&scenario, &set, TrackingGovernor::AtOnce, 2).unwrap();
        let agg = aggregate(core::slice::from_ref(&tr), &scenario.spec);
        assert_eq!(agg.runs, 1);
        assert_eq!(agg.converged_runs, tr.summary.convergence_step.is_some() as usize);
        assert_eq!(agg.mean_kappa_sum, tr.summary.kappa_sum);
        let z2_total: f64 = agg.z2_row_violation_rate.iter().flatten().sum();
        assert!(z2_total <= tr.summary.z2_nominal_violations as f64 * 2.0);
    }

    #[test]
    fn oracle_examples() {
        let (mode, spec) = scalar_loop(0.5, 0.5, 1.0);
        let opts = AdmissibleOptions { eps: Some(0.01), ..Default::default() };
        let (set, _) = admissible_set_for_mode(&mode, &spec, 1, &opts).unwrap();
        let origin = Vector::zeros(3);
        assert!(brute_force_admissibility_oracle(&mode, &spec, &set, &origin, 3).unwrap());
        // z1 = x = 2 violates |z1| <= 1 at k = 0
        assert!(!brute_force_admissibility_oracle(&mode, &spec, &set, &dvector![2.0, 0.0, 0.0], 3).unwrap());
        let mut big = mode.clone();
        big.a = Matrix::zeros(4, 4);
        assert!(matches!(
            brute_force_admissibility_oracle(&big, &spec, &set, &origin, 3),
            Err(Error::DimensionTooLarge(_))
        ));
    }
}
