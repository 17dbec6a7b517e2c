//! Recoverable sets under relaxed constraints and the reconfiguration plan.
//!
//! Decision vector: `(x, w_0, ..., w_{T_r-1}, u_1, ..., u_T)`. The `w_i` are the
//! recovery references applied under the target mode's own loop, and
//! `(x(T_r), w_{T_r-1}, u_1, ..., u_T)` must lie in the target's admissible set,
//! so `u` is the free tail that witnesses `(x(T_r), w_{T_r-1}) ∈ Proj Õ∞`.

use alloc::vec::Vec;

use crate::admissible::{AdmissibleSet, ConstrainedLoop, StateMaps};
use crate::error::{Error, Result};
use crate::linalg;
use crate::lp::{self, LpOutcome};
use crate::model::{ConstraintSpec, ModeModel};
use crate::polytope::{FeasibilityWitness, Polytope};
use crate::qp::{self, Qp, QpOutcome};
use crate::sim::NoiseSource;
use crate::{Matrix, Vector};

/// Ridge on the free tail so the program stays strictly convex.
const TAIL_REGULARIZATION: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryProblem {
    pub target_mode: usize,
    pub t_r: usize,
    pub weight: Matrix,
    pub n: usize,
    pub m: usize,
    /// Terminal horizon `T` of the target's admissible set.
    pub tail_horizon: usize,
    pub set: Polytope,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryPlan {
    pub v_seq: Vec<Vector>,
    pub tail: Vec<Vector>,
    pub cost: f64,
}

impl RecoveryProblem {
    /// Builds the recoverable-set polytope for `target` (plant and gains of
    /// that mode) against the extended sets of `spec`.
    pub fn new(target: &ModeModel, spec: &ConstraintSpec, terminal: &AdmissibleSet, t_r: usize, weight: Matrix) -> Result<Self> {
        if t_r == 0 || t_r >= spec.t_e {
            return Err(Error::InvalidArgument(alloc::format!("recovery time must satisfy 0 < T_r < T_e (T_r = {t_r})")));
        }
        if terminal.mode_id != target.mode_id {
            return Err(Error::InvalidArgument("terminal set belongs to another mode".into()));
        }
        let n = target.n();
        let m = target.m();
        linalg::ensure_shape(&weight, m, m, "R")?;
        if !linalg::is_pd(&weight) {
            return Err(Error::NonPdInput("R"));
        }
        let cl = ConstrainedLoop::relaxed(target, target, spec, &Matrix::zeros(n, n), t_r)?;
        let tail = terminal.horizon_t;
        let d = n + m * t_r + m * tail;
        let w_sel = |i: usize| {
            let mut e = Matrix::zeros(m, d);
            for j in 0..m {
                e[(j, n + i * m + j)] = 1.0;
            }
            e
        };
        let mut x_sel = Matrix::zeros(n, d);
        for j in 0..n {
            x_sel[(j, j)] = 1.0;
        }
        let mut maps = StateMaps::new(&cl.sys, x_sel);
        let mut set = Polytope::universe(d);
        for k in 0..t_r {
            let v = w_sel(k);
            let (a, b) = cl.rows_at(maps.state(), &v, k);
            set = set.with_rows(&a, &b)?;
            maps.advance(&v);
        }
        // (x(T_r), w_{T_r-1}, u_1..u_T) ∈ Õ∞
        let dt = terminal.dim();
        let mut embed = Matrix::zeros(dt, d);
        embed.view_mut((0, 0), (n, d)).copy_from(maps.state());
        embed.view_mut((n, 0), (m, d)).copy_from(&w_sel(t_r - 1));
        for i in 0..tail * m {
            embed[(n + m + i, n + m * t_r + i)] = 1.0;
        }
        let term = terminal.set.preimage(&embed, &Vector::zeros(dt))?;
        set = set.intersect(&term)?;
        Ok(RecoveryProblem { target_mode: target.mode_id, t_r, weight, n, m, tail_horizon: tail, set })
    }

    pub fn dim(&self) -> usize {
        self.set.dim()
    }

    pub fn aux_dim(&self) -> usize {
        self.dim() - self.n
    }

    /// Rows over `(x, aux)` with `x = state_map · y` for some outer decision
    /// `y`: returns `(rows on y, rows on aux, offsets)`.
    pub fn rows_with_state_map(&self, state_map: &Matrix) -> (Matrix, Matrix, Vector) {
        let a = self.set.normals();
        let ax = a.columns(0, self.n);
        let aux = a.columns(self.n, self.aux_dim()).into_owned();
        (ax * state_map, aux, self.set.offsets().clone())
    }
}

pub fn in_recoverable_set(problem: &RecoveryProblem, x: &Vector) -> Result<FeasibilityWitness> {
    linalg::ensure_len(x, problem.n, "x")?;
    problem.set.feasible_partial_fix(x)
}

/// `min Σ_i ||w_i - r||²_R` over the recovery references from `x`.
pub fn plan_recovery(problem: &RecoveryProblem, x: &Vector, r: &Vector) -> Result<RecoveryPlan> {
    linalg::ensure_len(x, problem.n, "x")?;
    linalg::ensure_len(r, problem.m, "r")?;
    if !in_recoverable_set(problem, x)?.feasible {
        return Err(Error::InfeasibleRecovery);
    }
    let (n, m, t_r) = (problem.n, problem.m, problem.t_r);
    let da = problem.aux_dim();
    let a = problem.set.normals();
    let a_aux = a.columns(n, da).into_owned();
    let b = problem.set.offsets() - a.columns(0, n) * x;
    let mut h = Matrix::zeros(da, da);
    let mut f = Vector::zeros(da);
    let two_r = &problem.weight * 2.0;
    let r_lin = -(&two_r * r);
    for i in 0..t_r {
        h.view_mut((i * m, i * m), (m, m)).copy_from(&two_r);
        f.rows_mut(i * m, m).copy_from(&r_lin);
    }
    for i in t_r * m..da {
        h[(i, i)] = 2.0 * TAIL_REGULARIZATION;
    }
    let y = match qp::solve(&Qp { h: &h, f: &f, a: &a_aux, b: &b, eq: None })? {
        QpOutcome::Optimal { point, .. } => point,
        QpOutcome::Infeasible => return Err(Error::InfeasibleRecovery),
    };
    let v_seq: Vec<Vector> = (0..t_r).map(|i| y.rows(i * m, m).into_owned()).collect();
    let tail = (0..problem.tail_horizon).map(|i| y.rows((t_r + i) * m, m).into_owned()).collect();
    let cost = v_seq.iter().map(|v| {
        let e = v - r;
        e.dot(&(&problem.weight * &e))
    }).sum();
    Ok(RecoveryPlan { v_seq, tail, cost })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContainmentReport {
    pub samples: usize,
    pub covered: usize,
    /// Sampled states of `Proj_x Õ∞,μ` that are not recoverable.
    pub violations: Vec<Vector>,
    /// Always `true`: the certificate is a sample, not a proof.
    pub sampled: bool,
}

/// Sampled check of `Proj_x Õ∞,μ ⊆ R_μ̄^{T_r}`.
///
/// Each sample maximizes a random direction over the state part of `Õ∞,μ`
/// (a boundary point) and is then pulled toward the running centroid of
/// the samples by a random factor in `[0, 1)` for one sample in four.
pub fn check_recoverability_containment(
    oinf_mu: &AdmissibleSet,
    problem: &RecoveryProblem,
    n_check: usize,
    seed: u64,
) -> Result<ContainmentReport> {
    let mut src = NoiseSource::new(seed);
    let n = oinf_mu.n;
    let d = oinf_mu.dim();
    let mut points: Vec<Vector> = Vec::with_capacity(n_check);
    let mut centre = Vector::zeros(n);
    for k in 0..n_check {
        let dir = src.standard_normal(n);
        let mut c = Vector::zeros(d);
        c.rows_mut(0, n).copy_from(&dir);
        let x = match lp::maximize(oinf_mu.set.normals(), oinf_mu.set.offsets(), &c)? {
            LpOutcome::Optimal { point, .. } => point.rows(0, n).into_owned(),
            LpOutcome::Infeasible => return Err(Error::EmptySet("admissible set")),
            LpOutcome::Unbounded => return Err(Error::UnboundedSet),
        };
        centre += &x;
        let x = if k % 4 == 3 {
            let c = &centre / (k + 1) as f64;
            let s = src.uniform();
            &c + (x - &c) * s
        } else {
            x
        };
        points.push(x);
    }
    let mut violations = Vec::new();
    for x in &points {
        if !in_recoverable_set(problem, x)?.feasible {
            violations.push(x.clone());
        }
    }
    Ok(ContainmentReport { samples: n_check, covered: n_check - violations.len(), violations, sampled: true })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::admissible::tests::scalar_loop;
    use crate::admissible::{admissible_set_for_mode, AdmissibleOptions};
    use nalgebra::{dmatrix, dvector};

    fn problem(t_r: usize, z1_plus: f64) -> (RecoveryProblem, AdmissibleSet, ModeModel, ConstraintSpec) {
        let (mode, mut spec) = scalar_loop(0.5, 0.5, 1.0);
        spec.z1_plus = Polytope::symmetric_box(&[z1_plus]).unwrap();
        spec.t_e = 20;
        let opts = AdmissibleOptions { eps: Some(0.01), ..Default::default() };
        let (set, _) = admissible_set_for_mode(&mode, &spec, 1, &opts).unwrap();
        let p = RecoveryProblem::new(&mode, &spec, &set, t_r, dmatrix![1.0]).unwrap();
        (p, set, mode, spec)
    }

    #[test]
    fn states_of_the_admissible_set_are_recoverable() {
        let (p, set, _, _) = problem(3, 1.5);
        assert!(in_recoverable_set(&p, &dvector![0.5]).unwrap().feasible);
        let report = check_recoverability_containment(&set, &p, 60, 4).unwrap();
        assert!(report.violations.is_empty(), "{:?}", report.violations);
        assert_eq!(report.covered, 60);
    }

    #[test]
    fn far_states_are_not_recoverable() {
        let (p, _, _, _) = problem(3, 1.5);
        assert!(!in_recoverable_set(&p, &dvector![50.0]).unwrap().feasible);
        assert_eq!(plan_recovery(&p, &dvector![50.0], &dvector![0.0]), Err(Error::InfeasibleRecovery));
    }

    #[test]
    fn relaxed_state_outside_nominal_is_recoverable() {
        // |x| <= 1 nominally, 1.4 is inside the relaxed bound only
        let (p, set, _, _) = problem(3, 1.5);
        assert!(!set.set.feasible_partial_fix(&dvector![1.4]).unwrap().feasible);
        assert!(in_recoverable_set(&p, &dvector![1.4]).unwrap().feasible);
        let plan = plan_recovery(&p, &dvector![1.4], &dvector![0.5]).unwrap();
        // noise-free landing in the projection at T_r
        let mut x = 1.4;
        for v in &plan.v_seq {
            x = 0.5 * x + 0.5 * v[0];
        }
        let last = plan.v_seq.last().unwrap();
        assert!(set.admits(&dvector![x], last).unwrap().feasible);
    }

    #[test]
    fn admissible_target_gives_zero_cost() {
        let (p, _, _, _) = problem(2, 1.5);
        let plan = plan_recovery(&p, &dvector![0.3], &dvector![0.3]).unwrap();
        assert!(plan.cost < 1e-10);
        assert!(plan.v_seq.iter().all(|v| (v[0] - 0.3).abs() < 1e-5));
    }

    #[test]
    fn weight_scaling_keeps_minimizer() {
        let (p, _, _, _) = problem(3, 1.5);
        let mut q = p.clone();
        q.weight *= 7.0;
        let a = plan_recovery(&p, &dvector![1.4], &dvector![0.9]).unwrap();
        let b = plan_recovery(&q, &dvector![1.4], &dvector![0.9]).unwrap();
        for (va, vb) in a.v_seq.iter().zip(&b.v_seq) {
            assert!((va - vb).amax() < 1e-6);
        }
    }

    #[test]
    fn binding_constraint_matches_grid_search() {
        // z1 = x, x0 = 1.4, unreachable target r = 3
        let (p, set, _, _) = problem(1, 1.5);
        let plan = plan_recovery(&p, &dvector![1.4], &dvector![3.0]).unwrap();
        assert!(plan.cost > 0.0);
        // one recovery step: feasible w are those with (x(1), w) in Proj Õ∞
        let mut best = f64::INFINITY;
        let mut best_w = 0.0;
        for i in 0..=40_000 {
            let w = -1.0 + 2.0 * i as f64 / 40_000.0;
            let x1 = 0.5 * 1.4 + 0.5 * w;
            if set.admits(&dvector![x1], &dvector![w]).unwrap().feasible {
                let c = (w - 3.0) * (w - 3.0);
                if c < best {
                    best = c;
                    best_w = w;
                }
            }
        }
        assert!((plan.v_seq[0][0] - best_w).abs() < 1e-3, "{} vs {best_w}", plan.v_seq[0][0]);
        // binding row: x(1) = 0.7 + 0.5 w <= 1
        assert!((plan.v_seq[0][0] - 0.6).abs() < 1e-6);
    }

    #[test]
    fn longer_recovery_keeps_recoverability() {
        for x in [0.9, 1.2, 1.45] {
            let (p2, _, _, _) = problem(2, 1.5);
            let (p4, _, _, _) = problem(4, 1.5);
            if in_recoverable_set(&p2, &dvector![x]).unwrap().feasible {
                assert!(in_recoverable_set(&p4, &dvector![x]).unwrap().feasible);
            }
        }
    }

    #[test]
    fn larger_relaxation_keeps_recoverability() {
        for x in [1.2, 1.45, 1.6] {
            let (small, _, _, _) = problem(2, 1.5);
            let (large, _, _, _) = problem(2, 1.8);
            if in_recoverable_set(&small, &dvector![x]).unwrap().feasible {
                assert!(in_recoverable_set(&large, &dvector![x]).unwrap().feasible);
            }
        }
    }

    #[test]
    fn invalid_horizons_are_rejected() {
        let (mode, mut spec) = scalar_loop(0.5, 0.5, 1.0);
        spec.t_e = 5;
        let opts = AdmissibleOptions { eps: Some(0.01), ..Default::default() };
        let (set, _) = admissible_set_for_mode(&mode, &spec, 1, &opts).unwrap();
        assert!(RecoveryProblem::new(&mode, &spec, &set, 0, dmatrix![1.0]).is_err());
        assert!(RecoveryProblem::new(&mode, &spec, &set, 5, dmatrix![1.0]).is_err());
        assert!(RecoveryProblem::new(&mode, &spec, &set, 4, dmatrix![1.0]).is_ok());
    }
}
