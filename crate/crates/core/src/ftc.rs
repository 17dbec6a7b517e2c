//! Fault-tolerant orchestration: detection-aware interval planning, detection
//! confirmation and reconfiguration.
//!
//! Planning intervals and detection intervals coincide and have length `T_d`,
//! so the admissible sets used here have horizon `T = T_d - 1`. The decision
//! vector of one interval is `(x, v_0, ..., v_{T_d-1}, aux)` where `aux` holds
//! one recovery witness per successor mode.

use alloc::string::ToString;
use alloc::vec::Vec;
use alloc::{format, vec};
use core::f64::consts::PI;

use crate::admissible::{admissible_set_for_mode, AdmissibleOptions, AdmissibleSet, ConstrainedLoop, StateMaps};
use crate::aorg::{self, PLAN_TOL};
use crate::error::{dims, Error, Result};
use crate::linalg;
use crate::lp::{self, LpOutcome};
use crate::math;
use crate::mmae::{self, DetectionBound, Hypothesis, MmaeState};
use crate::model::{ConstraintSpec, ModeGraph};
use crate::polytope::Polytope;
use crate::qp::{self, Qp, QpOutcome};
use crate::recovery::{self, RecoveryProblem};
use crate::sim::{self, apply_step, Event, NoiseDraw, NoiseSource, Phase, Plant, Scenario, Trace, TraceRecord};
use crate::{Matrix, Vector};

/// Sides of the polygon standing in for the `ϑ`-ball when `m = 2`.
pub const BALL_POLYGON_SIDES: usize = 16;

const MAX_LOCAL_ITERS: usize = 80;

#[derive(Debug, Clone, PartialEq)]
pub struct FtcConfig {
    pub omega: f64,
    pub vartheta: f64,
    pub t_d: usize,
    pub t_r: usize,
    pub t_e: usize,
    /// Steady-state weight `R`.
    pub r_weight: Matrix,
    /// Weight of the recovery program.
    pub recovery_weight: Matrix,
    pub confirm_intervals: usize,
    pub multistart: usize,
    pub opt_tol: f64,
    /// Accept `T_r >= T_e - 2 T_d` with a warning instead of an error.
    pub paper_literal_timing: bool,
}

impl FtcConfig {
    pub fn check(&self, m: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.omega) {
            return Err(Error::InvalidArgument(format!("Omega must lie in [0, 1], got {}", self.omega)));
        }
        if !(self.vartheta >= 0.0) {
            return Err(Error::InvalidArgument(format!("vartheta must be nonnegative, got {}", self.vartheta)));
        }
        if self.t_d == 0 {
            return Err(Error::InvalidArgument("T_d must be positive".into()));
        }
        if self.confirm_intervals == 0 || self.multistart == 0 {
            return Err(Error::InvalidArgument("confirm_intervals and multistart must be positive".into()));
        }
        linalg::ensure_shape(&self.r_weight, m, m, "R")?;
        linalg::ensure_shape(&self.recovery_weight, m, m, "recovery R")?;
        if !linalg::is_pd(&self.r_weight) {
            return Err(Error::NonPdInput("R"));
        }
        if !linalg::is_pd(&self.recovery_weight) {
            return Err(Error::NonPdInput("recovery R"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimingCheck {
    /// `T_r < T_e - 2 T_d` holds.
    pub satisfied: bool,
}

pub fn validate_timing(cfg: &FtcConfig) -> Result<TimingCheck> {
    let satisfied = cfg.t_r + 2 * cfg.t_d < cfg.t_e;
    if satisfied || cfg.paper_literal_timing {
        Ok(TimingCheck { satisfied })
    } else {
        Err(Error::TimingViolation { t_r: cfg.t_r, t_e: cfg.t_e, t_d: cfg.t_d })
    }
}

/// `Õ∞,μ` intersected with the successor-robustness rows, over
/// `(x, v_0..v_{T_d-1}, aux)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanningSet {
    pub mode_id: usize,
    pub n: usize,
    pub m: usize,
    pub t_d: usize,
    pub aux_dim: usize,
    pub set: Polytope,
}

impl PlanningSet {
    pub fn v_dim(&self) -> usize {
        self.m * self.t_d
    }

    pub fn dim(&self) -> usize {
        self.n + self.v_dim() + self.aux_dim
    }

    /// Rows over `(v, aux)` with the state fixed at `x`.
    pub fn slice(&self, x: &Vector) -> Result<(Matrix, Vector)> {
        linalg::ensure_len(x, self.n, "x")?;
        let a = self.set.normals();
        let b = self.set.offsets() - a.columns(0, self.n) * x;
        Ok((a.columns(self.n, self.dim() - self.n).into_owned(), b))
    }
}

fn pick_v(n: usize, m: usize, t_d: usize, i: usize, d: usize) -> Matrix {
    let mut e = Matrix::zeros(m, d);
    let i = i.min(t_d - 1);
    for j in 0..m {
        e[(j, n + m * i + j)] = 1.0;
    }
    e
}

/// Builds the planning set of `believed`. `recovery` must hold a problem for
/// every successor of `believed`.
pub fn build_planning_set(
    graph: &ModeGraph,
    spec: &ConstraintSpec,
    believed: usize,
    oinf: &AdmissibleSet,
    recovery: &[RecoveryProblem],
) -> Result<PlanningSet> {
    let gains = graph.require(believed)?;
    let n = gains.n();
    let m = gains.m();
    let t_d = oinf.horizon_t + 1;
    if oinf.mode_id != believed {
        return Err(Error::InvalidArgument("admissible set belongs to another mode".into()));
    }
    let succ = graph.successors_of(believed);
    let mut problems = Vec::with_capacity(succ.len());
    for s in succ {
        let p = recovery
            .iter()
            .find(|p| p.target_mode == *s)
            .ok_or_else(|| Error::InvalidArgument(format!("no recovery problem for mode {s}")))?;
        problems.push(p);
    }
    let aux_dim: usize = problems.iter().map(|p| p.aux_dim()).sum();
    let d = n + m * t_d + aux_dim;
    let mut set = oinf.set.lift(d, 0)?;
    let mut aux_at = n + m * t_d;
    for (s, p) in succ.iter().zip(&problems) {
        let plant = graph.require(*s)?;
        let cl = ConstrainedLoop::relaxed(plant, gains, spec, &Matrix::zeros(n, n), t_d + 1)?;
        let mut maps = StateMaps::new(&cl.sys, crate::admissible::x_selector(n, d));
        for k in 0..=t_d {
            let v = pick_v(n, m, t_d, k, d);
            let (a, b) = cl.rows_at(maps.state(), &v, k);
            set = set.with_rows(&a, &b)?;
            if k < t_d {
                maps.advance(&v);
            }
        }
        let (a_y, a_aux, b) = p.rows_with_state_map(maps.state());
        let mut a = a_y;
        a.view_mut((0, aux_at), (a_aux.nrows(), a_aux.ncols())).copy_from(&a_aux);
        set = set.with_rows(&a, &b)?;
        aux_at += p.aux_dim();
    }
    Ok(PlanningSet { mode_id: believed, n, m, t_d, aux_dim, set })
}

/// A planned interval.
#[derive(Debug, Clone, PartialEq)]
pub struct FtcPlan {
    pub v_seq: Vec<Vector>,
    /// Present for transient plans.
    pub kappas: Option<Matrix>,
    pub kappa_sum: f64,
    /// `Ĵd` of the returned sequence, when a bound was supplied.
    pub detection_bound: Option<f64>,
    /// Value of the planning objective (maximized for transient plans,
    /// minimized for steady ones).
    pub objective: f64,
    pub starts: usize,
}

/// `c·v + ½ vᵀQv + w Ĵd(v)`, minimized over `y = (v, aux)`.
struct Objective<'a> {
    lin: Vector,
    quad: Option<Matrix>,
    weight: f64,
    bound: Option<&'a DetectionBound>,
    nv: usize,
}

impl Objective<'_> {
    fn value_grad(&self, y: &Vector) -> Result<(f64, Vector)> {
        let v = y.rows(0, self.nv).into_owned();
        let mut f = self.lin.dot(&v);
        let mut g = Vector::zeros(y.len());
        g.rows_mut(0, self.nv).copy_from(&self.lin);
        if let Some(q) = &self.quad {
            let qv = q * &v;
            f += 0.5 * v.dot(&qv);
            let mut gv = g.rows_mut(0, self.nv);
            gv += &qv;
        }
        if let (Some(b), true) = (self.bound, self.weight > 0.0) {
            let (j, gj) = b.value_and_gradient(&v)?;
            f += self.weight * j;
            let mut gv = g.rows_mut(0, self.nv);
            gv += gj * self.weight;
        }
        Ok((f, g))
    }

    fn convex(&self) -> bool {
        self.weight == 0.0 || self.bound.is_none()
    }
}

fn scaled_violation(a: &Matrix, b: &Vector, y: &Vector) -> f64 {
    let s = a * y - b;
    (0..a.nrows())
        .map(|i| {
            let norm = a.row(i).norm();
            if norm > 0.0 {
                s[i] / norm
            } else {
                s[i]
            }
        })
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Exact minimizer when the objective is convex (no detection term).
fn solve_convex(obj: &Objective, a: &Matrix, b: &Vector) -> Result<Vector> {
    let d = a.ncols();
    let mut c = Vector::zeros(d);
    c.rows_mut(0, obj.nv).copy_from(&obj.lin);
    match &obj.quad {
        None => match lp::minimize(a, b, &c)? {
            LpOutcome::Optimal { point, .. } => Ok(point),
            LpOutcome::Infeasible => Err(Error::InfeasibleStart),
            LpOutcome::Unbounded => Err(Error::SolverError("planning program unbounded")),
        },
        Some(q) => {
            let mut h = Matrix::zeros(d, d);
            h.view_mut((0, 0), (obj.nv, obj.nv)).copy_from(q);
            let ridge = 1e-8 * q.amax().max(1.0);
            for i in 0..d {
                h[(i, i)] += ridge;
            }
            match qp::solve(&Qp { h: &h, f: &c, a, b, eq: None })? {
                QpOutcome::Optimal { point, .. } => Ok(point),
                QpOutcome::Infeasible => Err(Error::InfeasibleStart),
            }
        }
    }
}

/// Trust-region sequential linear (or quadratic, when `Q` is present)
/// programming from a feasible start. Every iterate stays feasible.
fn local_search(obj: &Objective, a: &Matrix, b: &Vector, y0: Vector, delta_max: f64, opt_tol: f64) -> Result<(Vector, f64)> {
    let d = a.ncols();
    let nv = obj.nv;
    let mut y = y0;
    let (mut f, mut g) = obj.value_grad(&y)?;
    let mut delta = 0.5 * delta_max;
    // rows: A d <= b - A y, |d_v| <= Δ
    let rows = a.nrows() + 2 * nv;
    let mut sa = Matrix::zeros(rows, d);
    sa.view_mut((0, 0), (a.nrows(), d)).copy_from(a);
    for i in 0..nv {
        sa[(a.nrows() + 2 * i, i)] = 1.0;
        sa[(a.nrows() + 2 * i + 1, i)] = -1.0;
    }
    for _ in 0..MAX_LOCAL_ITERS {
        let mut sb = Vector::zeros(rows);
        let slack = b - a * &y;
        for i in 0..a.nrows() {
            sb[i] = slack[i].max(0.0);
        }
        for i in 0..2 * nv {
            sb[a.nrows() + i] = delta;
        }
        let step = match &obj.quad {
            None => match lp::minimize(&sa, &sb, &g)? {
                LpOutcome::Optimal { point, .. } => point,
                _ => break,
            },
            Some(q) => {
                let mut h = Matrix::zeros(d, d);
                h.view_mut((0, 0), (nv, nv)).copy_from(q);
                // proximal term scaled so the unconstrained step is ~10^3 Δ
                let rho = (g.amax() / (1e3 * delta)).max(1e-8 * q.amax().max(1.0));
                for i in 0..d {
                    h[(i, i)] += rho;
                }
                match qp::solve(&Qp { h: &h, f: &g, a: &sa, b: &sb, eq: None })? {
                    QpOutcome::Optimal { point, .. } => point,
                    QpOutcome::Infeasible => break,
                }
            }
        };
        let sv = step.rows(0, nv).into_owned();
        let mut pred = -g.dot(&step);
        if let Some(q) = &obj.quad {
            pred -= 0.5 * sv.dot(&(q * &sv));
        }
        if pred <= opt_tol * (1.0 + f.abs()) {
            break;
        }
        let y_new = &y + &step;
        let (f_new, g_new) = obj.value_grad(&y_new)?;
        let ratio = (f - f_new) / pred;
        if ratio >= 0.1 {
            y = y_new;
            f = f_new;
            g = g_new;
            if ratio > 0.75 && sv.amax() >= 0.99 * delta {
                delta = (2.0 * delta).min(delta_max);
            }
        } else {
            delta *= 0.25;
        }
        if delta < 1e-9 * delta_max.max(1e-12) {
            break;
        }
    }
    Ok((y, f))
}

/// Multi-start driver. Starts: the solution without the detection term, the
/// `ϑ`-ball centre `v ≡ r` when feasible, then random feasible points.
fn multistart(
    obj: &Objective,
    a: &Matrix,
    b: &Vector,
    centre: &Vector,
    budget: usize,
    delta_max: f64,
    opt_tol: f64,
    seed: u64,
) -> Result<(Vector, f64, usize)> {
    let convex = Objective { lin: obj.lin.clone(), quad: obj.quad.clone(), weight: 0.0, bound: None, nv: obj.nv };
    let base = solve_convex(&convex, a, b)?;
    if obj.convex() {
        let (f, _) = obj.value_grad(&base)?;
        return Ok((base, f, 1));
    }
    let nv = obj.nv;
    let d = a.ncols();
    let mut starts = vec![base.clone()];
    if budget > 1 {
        let poly = Polytope::new(a.clone(), b.clone())?;
        if let Some(p) = poly.feasible_partial_fix(centre)?.point {
            starts.push(p);
        }
    }
    let mut src = NoiseSource::new(seed);
    let mut tries = 0;
    while starts.len() < budget && tries < 4 * budget {
        tries += 1;
        let dir = src.standard_normal(nv);
        let mut c = Vector::zeros(d);
        c.rows_mut(0, nv).copy_from(&dir);
        let s = src.uniform();
        if let LpOutcome::Optimal { point, .. } = lp::maximize(a, b, &c)? {
            starts.push(&base + (point - &base) * s);
        }
    }
    let mut best: Option<(Vector, f64)> = None;
    let used = starts.len();
    for y0 in starts {
        let (y, f) = local_search(obj, a, b, y0, delta_max, opt_tol)?;
        let better = match &best {
            None => true,
            Some((_, bf)) => f < *bf - 1e-12 * (1.0 + bf.abs()),
        };
        if better {
            best = Some((y, f));
        }
    }
    let (y, f) = best.expect("at least one start");
    Ok((y, f, used))
}

fn check_plan_point(a: &Matrix, b: &Vector, y: &Vector) -> Result<()> {
    if scaled_violation(a, b, y) > PLAN_TOL * (1.0 + y.amax()) {
        return Err(Error::SolverError("interval plan left the planning set"));
    }
    Ok(())
}

fn use_bound<'a>(bound: Option<&'a DetectionBound>, omega: f64) -> Option<&'a DetectionBound> {
    bound.filter(|b| b.modes.len() > 1 && omega < 1.0)
}

/// Transient interval plan: maximizes `Ω Σκ - (1-Ω) Ĵd` along the segments
/// toward the previewed reference. `Σκ` enters the program through its
/// normalized-progress surrogate, as in [`aorg::plan_interval`].
pub fn plan_transient(
    cfg: &FtcConfig,
    planning: &PlanningSet,
    oinf: &AdmissibleSet,
    bound: Option<&DetectionBound>,
    x_t: &Vector,
    v_prev: &Vector,
    r_preview: &[Vector],
    seed: u64,
) -> Result<FtcPlan> {
    let m = planning.m;
    linalg::ensure_len(v_prev, m, "v_prev")?;
    let preview = aorg::fit_preview(r_preview, planning.t_d)?;
    if linalg::euclid(&(v_prev - &preview[0])) <= cfg.vartheta {
        return Err(Error::InvalidArgument("transient planning needs ||v_prev - r|| > vartheta".into()));
    }
    if !oinf.admits(x_t, v_prev)?.feasible {
        return Err(Error::InfeasibleStart);
    }
    let (a_set, b_set) = planning.slice(x_t)?;
    let (a_seg, b_seg, signs) = aorg::segment_rows(v_prev, &preview);
    let (a, b) = aorg::stack(&a_set, &b_set, &a_seg, &b_seg);
    let progress = aorg::progress_objective(v_prev, &preview, &signs);
    let bound = use_bound(bound, cfg.omega);
    let omega = if bound.is_some() { cfg.omega } else { 1.0 };
    let obj = Objective { lin: -progress * omega, quad: None, weight: 1.0 - omega, bound, nv: planning.v_dim() };
    let centre = mmae::stack_seq(&preview);
    let span = preview.iter().map(|r| (r - v_prev).amax()).fold(0.0, f64::max);
    let (y, f, starts) = multistart(&obj, &a, &b, &centre, cfg.multistart, span.max(1e-6), cfg.opt_tol, seed)?;
    let raw = aorg::unstack(&y.rows(0, planning.v_dim()).into_owned(), m);
    let snapped = aorg::snap_to_segments(raw, v_prev, &preview);
    let mut y_snap = y.clone();
    y_snap.rows_mut(0, planning.v_dim()).copy_from(&mmae::stack_seq(&snapped));
    let (y, v_seq) = if check_plan_point(&a, &b, &y_snap).is_ok() {
        (y_snap, snapped)
    } else {
        check_plan_point(&a, &b, &y)?;
        let v = aorg::unstack(&y.rows(0, planning.v_dim()).into_owned(), m);
        (y, v)
    };
    let kappas = aorg::sequence_to_kappas(v_prev, &preview, &v_seq);
    let kappa_sum = kappas.iter().sum();
    let detection_bound = match bound {
        Some(bd) => Some(bd.value(&y.rows(0, planning.v_dim()).into_owned())?),
        None => None,
    };
    Ok(FtcPlan { v_seq, kappas: Some(kappas), kappa_sum, detection_bound, objective: -f, starts })
}

/// Rows of `||v_i - r|| <= ϑ` for every `i`, over the stacked `v`. Exact for
/// `m = 1`, an inscribed regular polygon for `m = 2` and an inscribed box
/// otherwise, so every feasible `v_i` lies in the ball.
pub fn ball_rows(r: &Vector, t_d: usize, vartheta: f64, d: usize) -> (Matrix, Vector) {
    let m = r.len();
    let dirs: Vec<(Vector, f64)> = match m {
        1 => vec![(Vector::from_element(1, 1.0), vartheta), (Vector::from_element(1, -1.0), vartheta)],
        2 => (0..BALL_POLYGON_SIDES)
            .map(|k| {
                let th = 2.0 * PI * k as f64 / BALL_POLYGON_SIDES as f64;
                (Vector::from_vec(vec![math::cos(th), math::sin(th)]), vartheta * math::cos(PI / BALL_POLYGON_SIDES as f64))
            })
            .collect(),
        _ => {
            let h = vartheta / math::sqrt(m as f64);
            (0..2 * m)
                .map(|k| {
                    let mut e = Vector::zeros(m);
                    e[k / 2] = if k % 2 == 0 { 1.0 } else { -1.0 };
                    (e, h)
                })
                .collect()
        }
    };
    let rows = dirs.len() * t_d;
    let mut a = Matrix::zeros(rows, d);
    let mut b = Vector::zeros(rows);
    for i in 0..t_d {
        for (k, (nrm, off)) in dirs.iter().enumerate() {
            let row = i * dirs.len() + k;
            for j in 0..m {
                a[(row, i * m + j)] = nrm[j];
            }
            b[row] = off + nrm.dot(r);
        }
    }
    (a, b)
}

/// Steady interval plan: minimizes `Ω Σ ||v_i - r||²_R + (1-Ω) Ĵd` inside the `ϑ`-ball.
pub fn plan_steady(
    cfg: &FtcConfig,
    planning: &PlanningSet,
    oinf: &AdmissibleSet,
    bound: Option<&DetectionBound>,
    x_t: &Vector,
    v_prev: &Vector,
    r: &Vector,
    seed: u64,
) -> Result<FtcPlan> {
    let m = planning.m;
    let t_d = planning.t_d;
    linalg::ensure_len(v_prev, m, "v_prev")?;
    linalg::ensure_len(r, m, "r")?;
    if linalg::euclid(&(v_prev - r)) > cfg.vartheta {
        return Err(Error::InvalidArgument("steady planning needs ||v_prev - r|| <= vartheta".into()));
    }
    if !oinf.admits(x_t, v_prev)?.feasible {
        return Err(Error::InfeasibleStart);
    }
    let (a_set, b_set) = planning.slice(x_t)?;
    let (a_ball, b_ball) = ball_rows(r, t_d, cfg.vartheta, a_set.ncols());
    let (a, b) = aorg::stack(&a_set, &b_set, &a_ball, &b_ball);
    let bound = use_bound(bound, cfg.omega);
    let omega = if bound.is_some() { cfg.omega } else { 1.0 };
    let nv = planning.v_dim();
    let mut q = Matrix::zeros(nv, nv);
    let mut lin = Vector::zeros(nv);
    let two_r = &cfg.r_weight * (2.0 * omega);
    let rr = -(&two_r * r);
    for i in 0..t_d {
        q.view_mut((i * m, i * m), (m, m)).copy_from(&two_r);
        lin.rows_mut(i * m, m).copy_from(&rr);
    }
    let constant = omega * t_d as f64 * r.dot(&(&cfg.r_weight * r));
    let quad = if omega > 0.0 { Some(q) } else { None };
    let obj = Objective { lin, quad, weight: 1.0 - omega, bound, nv };
    let centre = mmae::stack_seq(&vec![r.clone(); t_d]);
    let (y, f, starts) = multistart(&obj, &a, &b, &centre, cfg.multistart, cfg.vartheta.max(1e-9), cfg.opt_tol, seed)?;
    check_plan_point(&a, &b, &y)?;
    let v = y.rows(0, nv).into_owned();
    let v_seq = aorg::unstack(&v, m);
    let detection_bound = match bound {
        Some(bd) => Some(bd.value(&v)?),
        None => None,
    };
    Ok(FtcPlan { v_seq, kappas: None, kappa_sum: 0.0, detection_bound, objective: f + constant, starts })
}

/// Everything the orchestrator needs about one mode.
#[derive(Debug, Clone)]
pub struct ModeContext {
    pub mode_id: usize,
    pub oinf: AdmissibleSet,
    pub planning: PlanningSet,
    /// This mode as a recovery target, if it is anyone's successor.
    pub recovery: Option<RecoveryProblem>,
    /// `{μ} ∪ successors(μ)` under `μ`'s gains.
    pub hyps: Vec<Hypothesis>,
    pub priors: Vector,
}

#[derive(Debug, Clone)]
pub struct FtcModel {
    pub graph: ModeGraph,
    pub spec: ConstraintSpec,
    pub cfg: FtcConfig,
    pub timing: TimingCheck,
    pub contexts: Vec<ModeContext>,
}

impl FtcModel {
    pub fn build(graph: &ModeGraph, spec: &ConstraintSpec, cfg: &FtcConfig, opts: &AdmissibleOptions) -> Result<Self> {
        let timing = validate_timing(cfg)?;
        let first = graph.modes.first().ok_or_else(|| dims("empty mode graph"))?;
        cfg.check(first.m())?;
        let mut spec = spec.clone();
        spec.t_e = cfg.t_e;
        let mut sets = Vec::new();
        for mode in &graph.modes {
            let (set, _) = admissible_set_for_mode(mode, &spec, cfg.t_d - 1, opts)?;
            sets.push(set);
        }
        let mut problems = Vec::new();
        for (mode, set) in graph.modes.iter().zip(&sets) {
            let is_target = graph.modes.iter().any(|g| graph.successors_of(g.mode_id).contains(&mode.mode_id));
            if is_target {
                problems.push(RecoveryProblem::new(mode, &spec, set, cfg.t_r, cfg.recovery_weight.clone())?);
            }
        }
        let mut contexts = Vec::new();
        for (mode, set) in graph.modes.iter().zip(sets) {
            let planning = build_planning_set(graph, &spec, mode.mode_id, &set, &problems)?;
            let hyps = mmae::hypotheses_for(graph, mode.mode_id, mode.mode_id)?;
            let ids: Vec<usize> = hyps.iter().map(|h| h.mode_id).collect();
            contexts.push(ModeContext {
                mode_id: mode.mode_id,
                oinf: set,
                planning,
                recovery: problems.iter().find(|p| p.target_mode == mode.mode_id).cloned(),
                hyps,
                priors: graph.restricted_priors(&ids),
            });
        }
        Ok(FtcModel { graph: graph.clone(), spec, cfg: cfg.clone(), timing, contexts })
    }

    pub fn context(&self, mode_id: usize) -> Result<&ModeContext> {
        self.contexts
            .iter()
            .find(|c| c.mode_id == mode_id)
            .ok_or(Error::IndexOutOfRange { index: mode_id, len: self.contexts.len() })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDecision {
    pub v: Vector,
    pub events: Vec<Event>,
}

/// Per-run orchestrator state machine.
#[derive(Debug, Clone)]
pub struct Orchestrator<'a> {
    model: &'a FtcModel,
    pub believed: usize,
    pub gains_mode: usize,
    pub phase: Phase,
    pub v_prev: Vector,
    plan: Option<(Vec<Vector>, usize)>,
    bank: Option<(MmaeState, usize)>,
    last_detection: Option<usize>,
    /// Candidate mode and the number of consecutive detections of it.
    pub pending: Option<(usize, usize)>,
    recovering: bool,
    recovery_done: bool,
    seed: u64,
    pub kappa_sum: f64,
    pub monotone: bool,
}

impl<'a> Orchestrator<'a> {
    pub fn new(model: &'a FtcModel, believed: usize, v_init: Vector, seed: u64) -> Result<Self> {
        let ctx = model.context(believed)?;
        linalg::ensure_len(&v_init, ctx.oinf.m, "v_init")?;
        Ok(Orchestrator {
            model,
            believed,
            gains_mode: believed,
            phase: Phase::Transient,
            v_prev: v_init,
            plan: None,
            bank: None,
            last_detection: None,
            pending: None,
            recovering: false,
            recovery_done: false,
            seed,
            kappa_sum: 0.0,
            monotone: true,
        })
    }

    pub fn posteriors(&self) -> Vec<(usize, f64)> {
        match &self.bank {
            Some((b, _)) => b.modes().into_iter().zip(b.posteriors.iter().copied()).collect(),
            None => Vec::new(),
        }
    }

    pub fn is_recovering(&self) -> bool {
        self.recovering
    }

    fn set_phase(&mut self, to: Phase, events: &mut Vec<Event>) {
        if to != self.phase {
            events.push(Event::PhaseChange { from: self.phase, to });
            self.phase = to;
        }
    }

    fn exhausted(&self) -> bool {
        match &self.plan {
            None => true,
            Some((seq, cursor)) => *cursor >= seq.len(),
        }
    }

    /// One control step at time `t` with known state `x` and measurement `y`.
    /// Returns the reference to apply now.
    pub fn step(&mut self, t: usize, x: &Vector, y: &Vector, preview: &[Vector]) -> Result<StepDecision> {
        let mut events = Vec::new();
        let model = self.model;
        let r = preview.first().ok_or_else(|| dims("empty reference preview"))?;
        if let Some((bank, start)) = &mut self.bank {
            if t > *start {
                let ctx = model.context(self.believed)?;
                bank.step(&ctx.hyps, &self.v_prev, y)?;
            }
        }
        if self.recovering {
            let ctx = model.context(self.believed)?;
            if !self.recovery_done && ctx.oinf.admits(x, &self.v_prev)?.feasible {
                events.push(Event::RecoveryComplete { mode: self.believed });
                self.recovery_done = true;
            }
            if self.exhausted() {
                if self.plan.is_some() {
                    self.recovering = false;
                    self.plan = None;
                } else {
                    self.start_recovery(x, r, &mut events)?;
                }
            }
        }
        if !self.recovering && self.exhausted() {
            if self.detect(t, &mut events)? {
                self.start_recovery(x, r, &mut events)?;
            } else {
                self.replan(t, x, preview, &mut events)?;
            }
        }
        let v = match &mut self.plan {
            Some((seq, cursor)) if *cursor < seq.len() => {
                let v = seq[*cursor].clone();
                *cursor += 1;
                v
            }
            _ => self.v_prev.clone(),
        };
        self.v_prev = v.clone();
        Ok(StepDecision { v, events })
    }

    /// Runs the detector if a fresh window is available. Returns `true` on
    /// confirmation, after switching the believed mode and the gains.
    fn detect(&mut self, t: usize, events: &mut Vec<Event>) -> Result<bool> {
        let t_d = self.model.cfg.t_d;
        let Some((bank, _)) = &self.bank else { return Ok(false) };
        if bank.window < t_d || self.last_detection.is_some_and(|l| t < l + t_d) {
            return Ok(false);
        }
        let mode = mmae::detect_mode(bank)?;
        let posterior = bank.modes().iter().position(|&id| id == mode).map_or(0.0, |i| bank.posteriors[i]);
        events.push(Event::Detection { mode, posterior });
        self.last_detection = Some(t);
        if mode == self.believed {
            self.pending = None;
            return Ok(false);
        }
        let count = match self.pending {
            Some((c, k)) if c == mode => k + 1,
            _ => 1,
        };
        self.pending = Some((mode, count));
        if count < self.model.cfg.confirm_intervals {
            return Ok(false);
        }
        events.push(Event::Confirmation { mode });
        events.push(Event::Reconfiguration { mode, horizon: self.model.cfg.t_r });
        self.believed = mode;
        self.gains_mode = mode;
        self.pending = None;
        self.bank = None;
        self.recovering = true;
        self.recovery_done = false;
        self.plan = None;
        Ok(true)
    }

    fn start_recovery(&mut self, x: &Vector, r: &Vector, events: &mut Vec<Event>) -> Result<()> {
        let ctx = self.model.context(self.believed)?;
        let problem = ctx
            .recovery
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("mode {} is no recovery target", self.believed)))?;
        if !self.recovery_done && ctx.oinf.admits(x, &self.v_prev)?.feasible {
            events.push(Event::RecoveryComplete { mode: self.believed });
            self.recovery_done = true;
        }
        match recovery::plan_recovery(problem, x, r) {
            Ok(p) => {
                self.plan = Some((p.v_seq, 0));
                self.set_phase(Phase::Recovering, events);
            }
            Err(Error::InfeasibleRecovery) => {
                events.push(Event::Hold);
                self.plan = None;
                self.set_phase(Phase::Holding, events);
            }
            Err(e) => {
                events.push(Event::SolverHold(e.to_string()));
                self.plan = None;
                self.set_phase(Phase::Holding, events);
            }
        }
        Ok(())
    }

    fn replan(&mut self, t: usize, x: &Vector, preview: &[Vector], events: &mut Vec<Event>) -> Result<()> {
        let model = self.model;
        let cfg = &model.cfg;
        let ctx = model.context(self.believed)?;
        let r = &preview[0];
        let n = ctx.oinf.n;
        let bound = if ctx.hyps.len() > 1 && cfg.omega < 1.0 {
            Some(DetectionBound::new(&ctx.hyps, &ctx.priors, x, &Matrix::zeros(n, n), cfg.t_d)?)
        } else {
            None
        };
        let seed = self.seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let transient = linalg::euclid(&(&self.v_prev - r)) > cfg.vartheta;
        let result = if transient {
            plan_transient(cfg, &ctx.planning, &ctx.oinf, bound.as_ref(), x, &self.v_prev, preview, seed)
        } else {
            plan_steady(cfg, &ctx.planning, &ctx.oinf, bound.as_ref(), x, &self.v_prev, r, seed)
        };
        match result {
            Ok(p) => {
                if transient {
                    let full = aorg::fit_preview(preview, p.v_seq.len())?;
                    let as_aorg = aorg::AorgPlan {
                        kappas: p.kappas.clone().unwrap_or_default(),
                        v_seq: p.v_seq.clone(),
                        objective: p.kappa_sum,
                        feasible_start: true,
                    };
                    self.monotone &= sim::plan_is_monotone(&as_aorg, &self.v_prev, &full);
                    self.kappa_sum += p.kappa_sum;
                }
                events.push(Event::Plan { horizon: p.v_seq.len() - 1, objective: if transient { p.kappa_sum } else { p.objective } });
                self.plan = Some((p.v_seq, 0));
                self.bank = Some((MmaeState::reset(&ctx.hyps, x, &Matrix::zeros(n, n), &ctx.priors, cfg.t_d)?, t));
                self.set_phase(if transient { Phase::Transient } else { Phase::Steady }, events);
            }
            Err(e) => {
                events.push(match e {
                    Error::InfeasibleStart => Event::Hold,
                    other => Event::SolverHold(other.to_string()),
                });
                self.plan = None;
                if self.bank.is_none() {
                    self.bank = Some((MmaeState::reset(&ctx.hyps, x, &Matrix::zeros(n, n), &ctx.priors, cfg.t_d)?, t));
                }
                self.set_phase(Phase::Holding, events);
            }
        }
        Ok(())
    }
}

/// Fault-tolerant closed-loop run: orchestrator, detector and plant.
pub fn run_ftc(scenario: &Scenario, model: &FtcModel, run_index: usize) -> Result<Trace> {
    scenario.check()?;
    let seed = sim::run_seed(scenario.base_seed, run_index);
    let mut src = NoiseSource::new(seed);
    let mut x = scenario.initial_state(&mut src);
    let mut orch = Orchestrator::new(model, scenario.initial_mode, scenario.v_init.clone(), seed)?;
    let mut records = Vec::with_capacity(scenario.steps);
    let mut plant_key = (usize::MAX, usize::MAX);
    let mut plant: Option<Plant> = None;
    let graph = &model.graph;
    for t in 0..scenario.steps {
        let true_mode = scenario.true_mode_at(t);
        if plant_key != (true_mode, orch.gains_mode) {
            plant = Some(Plant::new(graph.require(true_mode)?, graph.require(orch.gains_mode)?, &model.spec)?);
            plant_key = (true_mode, orch.gains_mode);
        }
        let noise = NoiseDraw::draw(&plant.as_ref().expect("plant set above").noise, &mut src);
        let y = &plant.as_ref().expect("plant set above").c * &x + &noise.xi;
        let preview = scenario.preview(t, model.cfg.t_d);
        let mut decision = orch.step(t, &x, &y, &preview)?;
        if t > 0 && scenario.faults.iter().any(|(time, _)| *time == t) {
            decision.events.insert(0, Event::Fault { mode: true_mode });
        }
        if plant_key != (true_mode, orch.gains_mode) {
            plant = Some(Plant::new(graph.require(true_mode)?, graph.require(orch.gains_mode)?, &model.spec)?);
            plant_key = (true_mode, orch.gains_mode);
        }
        let out = apply_step(plant.as_ref().expect("plant set above"), &x, &decision.v, &noise);
        let z1_clean = &out.z1 - &noise.zeta;
        let z2_clean = &out.z2 - &noise.varsigma;
        records.push(TraceRecord {
            t,
            true_mode,
            believed_mode: orch.believed,
            phase: orch.phase,
            x: x.clone(),
            v: decision.v,
            r: scenario.reference_at(t).clone(),
            y: out.y,
            z1: out.z1,
            z2: out.z2,
            z1_clean,
            z2_clean,
            posteriors: orch.posteriors(),
            events: decision.events,
        });
        x = out.x_next;
    }
    let mut summary =
        sim::summarize(&records, &model.spec, scenario.convergence_tol, &scenario.v_init, model.cfg.t_d - 1);
    summary.monotone_progress = orch.monotone;
    summary.kappa_sum = orch.kappa_sum;
    Ok(Trace { run_index, seed, records, summary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::admissible::tests::scalar_loop;
    use crate::model::tests::{scalar_mode, scalar_spec};
    use crate::model::ModeModel;
    use alloc::collections::BTreeMap;
    use nalgebra::{dmatrix, dvector};

    fn cfg(omega: f64, vartheta: f64, t_d: usize) -> FtcConfig {
        FtcConfig {
            omega,
            vartheta,
            t_d,
            t_r: 3,
            t_e: 20,
            r_weight: dmatrix![1.0],
            recovery_weight: dmatrix![1.0],
            confirm_intervals: 2,
            multistart: 6,
            opt_tol: 1e-9,
            paper_literal_timing: false,
        }
    }

    /// Two scalar modes with different poles and the same input gain.
    fn two_modes() -> (ModeGraph, ConstraintSpec) {
        let mut m1 = scalar_mode(1, 0.5, 0.5, 0.0, 1.0).unwrap();
        let mut m2 = scalar_mode(2, -0.3, 0.5, 0.0, 1.0).unwrap();
        for m in [&mut m1, &mut m2] {
            m.h_omega = dmatrix![0.01];
            m.h_xi = dmatrix![0.01];
        }
        let mut spec = scalar_spec(2.0, 2.0);
        spec.t_e = 20;
        let graph = ModeGraph { modes: vec![m1, m2], successors: BTreeMap::from([(1, vec![2]), (2, vec![])]), priors: dvector![0.5, 0.5] };
        (graph, spec)
    }

    fn model(omega: f64, vartheta: f64, t_d: usize) -> FtcModel {
        let (graph, spec) = two_modes();
        let opts = AdmissibleOptions { eps: Some(0.01), ..Default::default() };
        FtcModel::build(&graph, &spec, &cfg(omega, vartheta, t_d), &opts).unwrap()
    }

    fn bound_for(model: &FtcModel, x: &Vector) -> DetectionBound {
        let ctx = model.context(1).unwrap();
        DetectionBound::new(&ctx.hyps, &ctx.priors, x, &dmatrix![0.0], model.cfg.t_d).unwrap()
    }

    #[test]
    fn timing_examples() {
        let mut c = cfg(1.0, 0.0, 6);
        c.t_r = 13;
        c.t_e = 25;
        assert_eq!(validate_timing(&c), Err(Error::TimingViolation { t_r: 13, t_e: 25, t_d: 6 }));
        c.paper_literal_timing = true;
        assert_eq!(validate_timing(&c), Ok(TimingCheck { satisfied: false }));
        c.paper_literal_timing = false;
        c.t_d = 2;
        assert_eq!(validate_timing(&c), Ok(TimingCheck { satisfied: true }));
        // boundary: 13 < 25 - 12 is false, 12 < 13 true
        c.t_d = 6;
        c.t_r = 12;
        assert!(validate_timing(&c).is_ok());
    }

    #[test]
    fn config_ranges() {
        assert!(cfg(1.5, 0.1, 2).check(1).is_err());
        assert!(cfg(0.5, -0.1, 2).check(1).is_err());
        assert!(cfg(0.5, 0.1, 2).check(1).is_ok());
        assert!(cfg(0.5, 0.1, 2).check(2).is_err());
    }

    #[test]
    fn ball_rows_are_inscribed() {
        let r = dvector![1.0, -2.0];
        let (a, b) = ball_rows(&r, 1, 0.5, 2);
        for k in 0..64 {
            let th = 2.0 * PI * k as f64 / 64.0;
            let inside = &r + dvector![th.cos(), th.sin()] * 0.5 * (PI / 16.0).cos();
            assert!((&a * &inside - &b).max() <= 1e-12);
            let outside = &r + dvector![th.cos(), th.sin()] * 0.5001;
            assert!((&a * &outside - &b).max() > 0.0);
        }
        let (a3, b3) = ball_rows(&dvector![0.0, 0.0, 0.0], 2, 0.3, 6);
        assert_eq!(a3.nrows(), 12);
        // corner of the inscribed box lies on the sphere
        let c = Vector::from_element(6, 0.3 / 3f64.sqrt());
        let s3 = &a3 * &c - &b3;
        assert!(s3.max() < 1e-12 && s3.max() > -1e-12);
    }

    #[test]
    fn omega_one_transient_matches_interval_planning_without_successors() {
        let m = model(1.0, 0.05, 2);
        let ctx = m.context(2).unwrap();
        assert_eq!(ctx.planning.aux_dim, 0);
        let x = dvector![0.1];
        let v_prev = dvector![0.0];
        let r = vec![dvector![1.5]];
        let p = plan_transient(&m.cfg, &ctx.planning, &ctx.oinf, None, &x, &v_prev, &r, 1).unwrap();
        let a = aorg::plan_interval(&ctx.oinf, &x, &v_prev, &r).unwrap();
        for (u, w) in p.v_seq.iter().zip(&a.v_seq) {
            assert!((u - w).amax() < 1e-8, "{u} vs {w}");
        }
        assert!((p.kappa_sum - a.objective).abs() < 1e-8);
    }

    #[test]
    fn successor_rows_restrict_the_plan() {
        let m = model(1.0, 0.05, 2);
        let ctx = m.context(1).unwrap();
        assert!(ctx.planning.aux_dim > 0);
        let x = dvector![0.0];
        let v_prev = dvector![0.0];
        let r = vec![dvector![1.9]];
        let p = plan_transient(&m.cfg, &ctx.planning, &ctx.oinf, None, &x, &v_prev, &r, 1).unwrap();
        let plain = aorg::plan_interval(&ctx.oinf, &x, &v_prev, &r).unwrap();
        assert!(p.kappa_sum <= plain.objective + 1e-9);
        // every returned plan satisfies the successor rows
        let y = ctx.oinf.stack(&x, &p.v_seq).unwrap();
        let prefix = y.rows(0, ctx.planning.n + ctx.planning.v_dim()).into_owned();
        assert!(ctx.planning.set.feasible_partial_fix(&prefix).unwrap().feasible);
    }

    #[test]
    fn detection_term_lowers_the_bound() {
        let om1 = model(1.0, 0.05, 3);
        let om0 = model(0.0, 0.05, 3);
        // moving toward r cancels the free-response separation of x
        let x = dvector![-1.0];
        let v_prev = dvector![0.0];
        let r = vec![dvector![0.3]];
        let ctx1 = om1.context(1).unwrap();
        let ctx0 = om0.context(1).unwrap();
        let b = bound_for(&om0, &x);
        let p1 = plan_transient(&om1.cfg, &ctx1.planning, &ctx1.oinf, Some(&b), &x, &v_prev, &r, 3).unwrap();
        let p0 = plan_transient(&om0.cfg, &ctx0.planning, &ctx0.oinf, Some(&b), &x, &v_prev, &r, 3).unwrap();
        let j1 = b.value(&mmae::stack_seq(&p1.v_seq)).unwrap();
        let j0 = p0.detection_bound.unwrap();
        assert!(j0 < j1 - 1e-6, "{j0} vs {j1}");
        assert!(p0.kappa_sum <= p1.kappa_sum + 1e-9);
    }

    #[test]
    fn steady_omega_one_holds_the_reference() {
        let m = model(1.0, 0.1, 2);
        let ctx = m.context(1).unwrap();
        let r = dvector![0.5];
        let p = plan_steady(&m.cfg, &ctx.planning, &ctx.oinf, None, &dvector![0.5], &r, &r, 1).unwrap();
        assert!(p.v_seq.iter().all(|v| (v - &r).amax() < 1e-6));
        assert!(p.objective.abs() < 1e-8);
    }

    #[test]
    fn steady_zero_ball_forces_the_reference() {
        let m = model(0.0, 0.0, 2);
        let ctx = m.context(1).unwrap();
        let r = dvector![0.5];
        let x = dvector![0.5];
        let b = bound_for(&m, &x);
        let p = plan_steady(&m.cfg, &ctx.planning, &ctx.oinf, Some(&b), &x, &r, &r, 1).unwrap();
        assert!(p.v_seq.iter().all(|v| (v - &r).amax() < 1e-9));
    }

    #[test]
    fn steady_excitation_matches_grid_search() {
        let vartheta = 0.3;
        let m = model(0.0, vartheta, 2);
        let ctx = m.context(1).unwrap();
        let r = dvector![0.5];
        let x = dvector![0.5];
        let b = bound_for(&m, &x);
        let p = plan_steady(&m.cfg, &ctx.planning, &ctx.oinf, Some(&b), &x, &r, &r, 5).unwrap();
        for v in &p.v_seq {
            assert!((v - &r).amax() <= vartheta + 1e-9);
        }
        let mut best = f64::INFINITY;
        let steps = 120;
        for i in 0..=steps {
            for j in 0..=steps {
                let v0 = 0.5 - vartheta + 2.0 * vartheta * i as f64 / steps as f64;
                let v1 = 0.5 - vartheta + 2.0 * vartheta * j as f64 / steps as f64;
                let seq = [dvector![v0], dvector![v1]];
                let y = ctx.oinf.stack(&x, &seq).unwrap();
                let prefix = y.rows(0, 1 + 2).into_owned();
                if !ctx.planning.set.feasible_partial_fix(&prefix).unwrap().feasible {
                    continue;
                }
                best = best.min(b.value(&dvector![v0, v1]).unwrap());
            }
        }
        let got = p.detection_bound.unwrap();
        assert!(got <= best + 1e-6, "planner {got} vs grid {best}");
        assert!(got < b.value(&dvector![0.5, 0.5]).unwrap());
    }

    #[test]
    fn planning_preconditions() {
        let m = model(1.0, 0.1, 2);
        let ctx = m.context(1).unwrap();
        let r = dvector![0.5];
        assert!(matches!(
            plan_transient(&m.cfg, &ctx.planning, &ctx.oinf, None, &dvector![0.5], &r, &[r.clone()], 1),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            plan_steady(&m.cfg, &ctx.planning, &ctx.oinf, None, &dvector![0.5], &dvector![0.0], &r, 1),
            Err(Error::InvalidArgument(_))
        ));
        assert_eq!(
            plan_transient(&m.cfg, &ctx.planning, &ctx.oinf, None, &dvector![40.0], &dvector![0.0], &[r], 1),
            Err(Error::InfeasibleStart)
        );
    }

    fn scenario(graph: &ModeGraph, spec: &ConstraintSpec, faults: Vec<(usize, usize)>, steps: usize) -> Scenario {
        Scenario {
            graph: graph.clone(),
            spec: spec.clone(),
            steps,
            initial_mode: 1,
            true_initial_mode: 1,
            x0: dvector![0.0],
            x0_spread: None,
            v_init: dvector![0.0],
            reference: vec![(0, dvector![1.0])],
            faults,
            base_seed: 11,
            convergence_tol: 1e-3,
        }
    }

    #[test]
    fn nominal_run_keeps_mode_and_constraints() {
        let m = model(1.0, 0.05, 2);
        let sc = scenario(&m.graph, &m.spec, vec![], 30);
        let tr = run_ftc(&sc, &m, 0).unwrap();
        assert!(tr.records.iter().all(|r| r.believed_mode == 1));
        assert!(tr.summary.confirmation_time.is_none());
        assert_eq!(tr.summary.z1_nominal_violations, 0);
        let phases: Vec<Phase> = tr.records.iter().map(|r| r.phase).collect();
        assert!(phases.contains(&Phase::Transient) && phases.contains(&Phase::Steady));
        assert!(tr.summary.convergence_step.is_some());
    }

    #[test]
    fn fault_is_confirmed_and_recovered() {
        let m = model(1.0, 0.05, 3);
        let sc = scenario(&m.graph, &m.spec, vec![(4, 2)], 40);
        let tr = run_ftc(&sc, &m, 0).unwrap();
        let conf = tr.summary.confirmation_time.expect("confirmed");
        assert_eq!(tr.summary.confirmed_mode, Some(2));
        assert!(conf <= 4 + 2 * 3 + 3, "confirmed at {conf}");
        let rec = tr.summary.recovery_complete_time.expect("recovered");
        assert!(rec >= conf && rec <= conf + m.cfg.t_r);
        assert_eq!(tr.records.last().unwrap().believed_mode, 2);
        // gains switch only at confirmation
        assert!(tr.records.iter().filter(|r| r.t < conf).all(|r| r.believed_mode == 1));
    }

    #[test]
    fn single_misdetection_does_not_reconfigure() {
        let m = model(1.0, 0.05, 2);
        let ctx = m.context(1).unwrap();
        let mut orch = Orchestrator::new(&m, 1, dvector![0.0], 1).unwrap();
        let x = dvector![0.0];
        let _ = orch.step(0, &x, &dvector![0.0], &[dvector![1.0]]).unwrap();
        // detector says mode 2 once, then mode 1
        let mut ev = Vec::new();
        let mut bank = MmaeState::reset(&ctx.hyps, &x, &dmatrix![0.0], &dvector![0.001, 0.999], 2).unwrap();
        bank.window = 2;
        orch.bank = Some((bank, 0));
        assert!(!orch.detect(2, &mut ev).unwrap());
        assert_eq!(orch.pending, Some((2, 1)));
        let mut bank = MmaeState::reset(&ctx.hyps, &x, &dmatrix![0.0], &dvector![0.999, 0.001], 2).unwrap();
        bank.window = 2;
        orch.bank = Some((bank, 2));
        assert!(!orch.detect(4, &mut ev).unwrap());
        assert_eq!(orch.pending, None);
        assert_eq!(orch.believed, 1);
        assert!(!ev.iter().any(|e| matches!(e, Event::Confirmation { .. })));
    }

    #[test]
    fn repeated_detection_confirms() {
        let m = model(1.0, 0.05, 2);
        let ctx = m.context(1).unwrap();
        let mut orch = Orchestrator::new(&m, 1, dvector![0.0], 1).unwrap();
        let x = dvector![0.0];
        let mut ev = Vec::new();
        for t in [2, 4] {
            let mut bank = MmaeState::reset(&ctx.hyps, &x, &dmatrix![0.0], &dvector![0.001, 0.999], 2).unwrap();
            bank.window = 2;
            orch.bank = Some((bank, t - 2));
            let confirmed = orch.detect(t, &mut ev).unwrap();
            assert_eq!(confirmed, t == 4);
        }
        assert_eq!(orch.believed, 2);
        assert_eq!(orch.gains_mode, 2);
        // detections closer than T_d apart are not counted
        let mut orch = Orchestrator::new(&m, 1, dvector![0.0], 1).unwrap();
        let mut bank = MmaeState::reset(&ctx.hyps, &x, &dmatrix![0.0], &dvector![0.001, 0.999], 2).unwrap();
        bank.window = 2;
        orch.bank = Some((bank, 0));
        assert!(!orch.detect(2, &mut ev).unwrap());
        assert!(!orch.detect(3, &mut ev).unwrap());
        assert_eq!(orch.pending, Some((2, 1)));
    }

    #[test]
    fn recovery_target_must_exist() {
        let (mode, spec) = scalar_loop(0.5, 0.5, 1.0);
        let graph = ModeGraph { modes: vec![mode.clone()], successors: BTreeMap::from([(1, vec![])]), priors: dvector![1.0] };
        let opts = AdmissibleOptions { eps: Some(0.01), ..Default::default() };
        let (set, _) = admissible_set_for_mode(&mode, &spec, 1, &opts).unwrap();
        let ok = build_planning_set(&graph, &spec, 1, &set, &[]).unwrap();
        assert_eq!(ok.aux_dim, 0);
        let _: &ModeModel = &mode;
        let graph2 = ModeGraph { modes: vec![mode.clone()], successors: BTreeMap::from([(1, vec![1])]), priors: dvector![1.0] };
        assert!(build_planning_set(&graph2, &spec, 1, &set, &[]).is_err());
    }
}
