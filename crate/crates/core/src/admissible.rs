//! Constraint-admissible sets over `(x, v_0, ..., v_T)`.
//!
//! The decision vector stacks the state at the start of a planning interval
//! and the `T + 1` references applied over it, `v_T` being held afterwards.
//! Every constrained output at every prediction step is linear in that vector,
//! so all sets here are polytopes assembled from those rows.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::linalg;
use crate::lp::{self, LpOutcome};
use crate::model::{ClosedLoop, ConstraintSpec, ModeModel, OutputMaps};
use crate::polytope::{FeasibilityWitness, Polytope, INCLUSION_TOL};
use crate::stochastics::{self, TightenedConstraintSequence};
use crate::{Matrix, Vector};

pub const DEFAULT_K_CAP: usize = 500;
pub const DEFAULT_REDUNDANCY_CAP: usize = 2000;

/// A closed loop together with the constraint sets it must respect and the
/// chance-constraint tightening along the prediction horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstrainedLoop {
    pub sys: ClosedLoop,
    pub maps: OutputMaps,
    pub z1: Polytope,
    pub z2: Polytope,
    pub tightening: TightenedConstraintSequence,
}

impl ConstrainedLoop {
    /// `mode` under its own gains against the nominal sets.
    pub fn nominal(mode: &ModeModel, spec: &ConstraintSpec, sigma0: &Matrix, k_max: usize) -> Result<Self> {
        Self::assemble(
            mode.closed_loop(),
            spec.maps_for(mode),
            spec.z1.clone(),
            spec.z2.clone(),
            &mode.h_omega,
            spec,
            sigma0,
            k_max,
        )
    }

    /// Plant `plant` driven by `gains`' feedback against the extended sets.
    pub fn relaxed(
        plant: &ModeModel,
        gains: &ModeModel,
        spec: &ConstraintSpec,
        sigma0: &Matrix,
        k_max: usize,
    ) -> Result<Self> {
        Self::assemble(
            plant.loop_with_gains(&gains.k, &gains.g),
            spec.output_maps(&gains.k, &gains.g),
            spec.z1_plus.clone(),
            spec.z2_plus.clone(),
            &plant.h_omega,
            spec,
            sigma0,
            k_max,
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        sys: ClosedLoop,
        maps: OutputMaps,
        z1: Polytope,
        z2: Polytope,
        h_omega: &Matrix,
        spec: &ConstraintSpec,
        sigma0: &Matrix,
        k_max: usize,
    ) -> Result<Self> {
        let tightening = stochastics::tightened_sequence(
            &z2,
            &maps.fx,
            &sys.a,
            h_omega,
            &spec.h_varsigma,
            sigma0,
            spec.beta,
            k_max,
        )?;
        Ok(ConstrainedLoop { sys, maps, z1, z2, tightening })
    }

    pub fn n(&self) -> usize {
        self.sys.n()
    }

    pub fn m(&self) -> usize {
        self.sys.m()
    }

    /// Rows of `ẑ1 ∈ Z1` and `ẑ2 ∈ Z2 ∼ P_beta(step)` given the state and
    /// reference at that step as linear maps of a decision vector.
    pub fn rows_at(&self, state_map: &Matrix, v_map: &Matrix, step: usize) -> (Matrix, Vector) {
        self.rows_with_margins(state_map, v_map, self.tightening.margins_at(step))
    }

    /// Same rows with the limiting (largest) tightening.
    pub fn rows_limit(&self, state_map: &Matrix, v_map: &Matrix) -> (Matrix, Vector) {
        self.rows_with_margins(state_map, v_map, &self.tightening.limit_margins)
    }

    fn rows_with_margins(&self, state_map: &Matrix, v_map: &Matrix, margins: &Vector) -> (Matrix, Vector) {
        let z1_map = &self.maps.lx * state_map + &self.maps.lv * v_map;
        let z2_map = &self.maps.fx * state_map + &self.maps.fv * v_map;
        let r1 = self.z1.nrows();
        let r2 = self.z2.nrows();
        let d = state_map.ncols();
        let mut a = Matrix::zeros(r1 + r2, d);
        let mut b = Vector::zeros(r1 + r2);
        a.view_mut((0, 0), (r1, d)).copy_from(&(self.z1.normals() * z1_map));
        b.rows_mut(0, r1).copy_from(self.z1.offsets());
        a.view_mut((r1, 0), (r2, d)).copy_from(&(self.z2.normals() * z2_map));
        b.rows_mut(r1, r2).copy_from(&(self.z2.offsets() - margins));
        (a, b)
    }

    /// Steady-state images `(L_x (I-A)^-1 B + L_v)` and the `F` analogue.
    pub fn steady_maps(&self) -> Result<(Matrix, Matrix)> {
        let ss = linalg::steady_state_gain(&self.sys.a, &self.sys.b)?;
        Ok((&self.maps.lx * &ss + &self.maps.lv, &self.maps.fx * &ss + &self.maps.fv))
    }

    /// Rows forcing the held reference `v_map y` to be strictly steady-state
    /// admissible with ball radius `eps`.
    pub fn steady_rows(&self, v_map: &Matrix, eps: f64) -> Result<(Matrix, Vector)> {
        let (s1, s2) = self.steady_maps()?;
        let z1s = self.z1.shrink_by_ball(eps);
        let z2s = self.z2.shrink_by_ball(eps);
        let r1 = z1s.nrows();
        let r2 = z2s.nrows();
        let d = v_map.ncols();
        let mut a = Matrix::zeros(r1 + r2, d);
        let mut b = Vector::zeros(r1 + r2);
        a.view_mut((0, 0), (r1, d)).copy_from(&(z1s.normals() * &s1 * v_map));
        b.rows_mut(0, r1).copy_from(z1s.offsets());
        a.view_mut((r1, 0), (r2, d)).copy_from(&(z2s.normals() * &s2 * v_map));
        b.rows_mut(r1, r2).copy_from(&(z2s.offsets() - &self.tightening.limit_margins));
        Ok((a, b))
    }
}

/// Linear maps from a decision vector to the predicted state, advanced one
/// step at a time.
#[derive(Debug, Clone)]
pub struct StateMaps<'a> {
    sys: &'a ClosedLoop,
    current: Matrix,
    step: usize,
}

impl<'a> StateMaps<'a> {
    pub fn new(sys: &'a ClosedLoop, initial: Matrix) -> Self {
        StateMaps { sys, current: initial, step: 0 }
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn state(&self) -> &Matrix {
        &self.current
    }

    /// `M <- A M + B V`, where `V` maps the decision to the reference applied now.
    pub fn advance(&mut self, v_map: &Matrix) {
        self.current = &self.sys.a * &self.current + &self.sys.b * v_map;
        self.step += 1;
    }
}

/// Selector picking `v_i` from the stacked `(x, v_0, ..., v_T)` vector.
pub fn v_selector(n: usize, m: usize, horizon: usize, i: usize) -> Matrix {
    let d = n + m * (horizon + 1);
    let mut e = Matrix::zeros(m, d);
    let i = i.min(horizon);
    for j in 0..m {
        e[(j, n + m * i + j)] = 1.0;
    }
    e
}

pub fn x_selector(n: usize, d: usize) -> Matrix {
    let mut e = Matrix::zeros(n, d);
    for j in 0..n {
        e[(j, j)] = 1.0;
    }
    e
}

/// Output maps at prediction step `step`: the coefficients of `ẑ1` and `ẑ2`
/// as linear functions of `(x, v_0, ..., v_T)`, holding `v_T` past `T`.
pub fn predicted_output_rows(cl: &ConstrainedLoop, horizon: usize, step: usize) -> (Matrix, Matrix) {
    let n = cl.n();
    let m = cl.m();
    let d = n + m * (horizon + 1);
    let mut maps = StateMaps::new(&cl.sys, x_selector(n, d));
    for s in 0..step {
        maps.advance(&v_selector(n, m, horizon, s));
    }
    let v = v_selector(n, m, horizon, step);
    (
        &cl.maps.lx * maps.state() + &cl.maps.lv * &v,
        &cl.maps.fx * maps.state() + &cl.maps.fv * &v,
    )
}

/// Default ball radius: `1e-3` times the smallest `offset / ||normal||` of `Z1`.
pub fn default_eps(spec: &ConstraintSpec) -> f64 {
    1e-3 * spec.z1.min_scaled_offset()
}

/// The set `Φ̄`: in-horizon rows for steps `0..=T` plus strict steady-state
/// admissibility of `v_T`.
pub fn build_phi_bar(cl: &ConstrainedLoop, horizon: usize, eps: f64) -> Result<Polytope> {
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("eps must be positive".into()));
    }
    let n = cl.n();
    let m = cl.m();
    let d = n + m * (horizon + 1);
    let mut maps = StateMaps::new(&cl.sys, x_selector(n, d));
    let mut set = Polytope::universe(d);
    for s in 0..=horizon {
        let v = v_selector(n, m, horizon, s);
        let (a, b) = cl.rows_at(maps.state(), &v, s);
        set = set.with_rows(&a, &b)?;
        maps.advance(&v);
    }
    let (a, b) = cl.steady_rows(&v_selector(n, m, horizon, horizon), eps)?;
    set = set.with_rows(&a, &b)?;
    if set.is_empty()? {
        return Err(Error::EmptySet("no strictly steady-state admissible terminal reference"));
    }
    Ok(set)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdmissibleOptions {
    pub eps: Option<f64>,
    pub k_cap: usize,
    pub redundancy_cap: usize,
    pub sigma0: Option<Matrix>,
}

impl Default for AdmissibleOptions {
    fn default() -> Self {
        AdmissibleOptions { eps: None, k_cap: DEFAULT_K_CAP, redundancy_cap: DEFAULT_REDUNDANCY_CAP, sigma0: None }
    }
}

/// Finitely determined `Õ∞` with its determination index.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmissibleSet {
    pub set: Polytope,
    pub horizon_t: usize,
    pub k_star: usize,
    pub eps: f64,
    pub mode_id: usize,
    pub n: usize,
    pub m: usize,
}

impl AdmissibleSet {
    pub fn dim(&self) -> usize {
        self.n + self.m * (self.horizon_t + 1)
    }

    pub fn stack(&self, x: &Vector, v_seq: &[Vector]) -> Result<Vector> {
        linalg::ensure_len(x, self.n, "x")?;
        if v_seq.len() != self.horizon_t + 1 {
            return Err(crate::error::dims("reference sequence must have T + 1 entries"));
        }
        let mut y = Vector::zeros(self.dim());
        y.rows_mut(0, self.n).copy_from(x);
        for (i, v) in v_seq.iter().enumerate() {
            linalg::ensure_len(v, self.m, "v")?;
            y.rows_mut(self.n + i * self.m, self.m).copy_from(v);
        }
        Ok(y)
    }

    pub fn contains_plan(&self, x: &Vector, v_seq: &[Vector]) -> Result<bool> {
        self.set.contains(&self.stack(x, v_seq)?)
    }

    /// `(x, v0) ∈ Proj_{(x, v0)} Õ∞`.
    pub fn admits(&self, x: &Vector, v0: &Vector) -> Result<FeasibilityWitness> {
        linalg::ensure_len(x, self.n, "x")?;
        linalg::ensure_len(v0, self.m, "v0")?;
        let mut prefix = Vector::zeros(self.n + self.m);
        prefix.rows_mut(0, self.n).copy_from(x);
        prefix.rows_mut(self.n, self.m).copy_from(v0);
        self.set.feasible_partial_fix(&prefix)
    }
}

/// Runs `Õ_{k+1} = Õ_k ∩ Φ_{k+1}` from `Õ_0 = Φ_0 ∩ Φ̄`.
///
/// Row `Φ_k` constrains the outputs at absolute prediction step `T + k`, tightened
/// with that step's covariance. A candidate row is appended only if some point
/// of the current set violates it, so `Õ_{k+1} = Õ_k` as sets exactly when
/// nothing is appended. The recursion stops at the first such step whose rows
/// are also implied under the limiting tightening, which covers every later
/// step as the covariance settles.
pub fn build_admissible_set(
    mode_id: usize,
    cl: &ConstrainedLoop,
    horizon: usize,
    opts: &AdmissibleOptions,
    eps: f64,
) -> Result<AdmissibleSet> {
    let n = cl.n();
    let m = cl.m();
    let d = n + m * (horizon + 1);
    let mut set = build_phi_bar(cl, horizon, eps)?;
    let mut maps = StateMaps::new(&cl.sys, x_selector(n, d));
    for s in 0..=horizon {
        maps.advance(&v_selector(n, m, horizon, s));
    }
    let v_t = v_selector(n, m, horizon, horizon);
    for k in 1..=opts.k_cap {
        let step = horizon + k;
        let (a, b) = cl.rows_at(maps.state(), &v_t, step);
        let (_, b_lim) = cl.rows_limit(maps.state(), &v_t);
        let mut add_rows: Vec<usize> = Vec::new();
        let mut settled = true;
        for i in 0..a.nrows() {
            let row = a.row(i).transpose();
            let scale = linalg::euclid(&row);
            if scale <= 1e-14 {
                if b[i] < -INCLUSION_TOL {
                    return Err(Error::EmptySet("admissible set"));
                }
                continue;
            }
            match lp::maximize(set.normals(), set.offsets(), &row)? {
                LpOutcome::Optimal { value, .. } => {
                    if (value - b[i]) / scale > INCLUSION_TOL {
                        add_rows.push(i);
                        settled = false;
                    } else if (value - b_lim[i]) / scale > INCLUSION_TOL {
                        settled = false;
                    }
                }
                LpOutcome::Unbounded => {
                    add_rows.push(i);
                    settled = false;
                }
                LpOutcome::Infeasible => return Err(Error::EmptySet("admissible set")),
            }
        }
        if settled {
            return Ok(AdmissibleSet { set, horizon_t: horizon, k_star: k - 1, eps, mode_id, n, m });
        }
        if !add_rows.is_empty() {
            let mut na = Matrix::zeros(add_rows.len(), d);
            let mut nb = Vector::zeros(add_rows.len());
            for (r, &i) in add_rows.iter().enumerate() {
                na.set_row(r, &a.row(i));
                nb[r] = b[i];
            }
            set = set.with_rows(&na, &nb)?;
            if set.nrows() > opts.redundancy_cap {
                set = set.remove_redundant()?;
            }
        }
        maps.advance(&v_t);
    }
    Err(Error::NotDeterminedWithinCap { cap: opts.k_cap })
}

/// Builds `Õ∞` for a mode under its own gains with nominal constraints.
pub fn admissible_set_for_mode(
    mode: &ModeModel,
    spec: &ConstraintSpec,
    horizon: usize,
    opts: &AdmissibleOptions,
) -> Result<(AdmissibleSet, ConstrainedLoop)> {
    let sigma0 = opts.sigma0.clone().unwrap_or_else(|| Matrix::zeros(mode.n(), mode.n()));
    let cl = ConstrainedLoop::nominal(mode, spec, &sigma0, horizon + 1)?;
    let eps = opts.eps.unwrap_or_else(|| default_eps(spec));
    let set = build_admissible_set(mode.mode_id, &cl, horizon, opts, eps)?;
    Ok((set, cl))
}

/// `(L_x (I-A)^-1 B + L_v) r ⊕ B_eps ⊂ Z1` and the tightened `F` analogue.
pub fn is_steady_state_admissible(cl: &ConstrainedLoop, r: &Vector, eps: f64) -> Result<bool> {
    linalg::ensure_len(r, cl.m(), "r")?;
    let (a, b) = cl.steady_rows(&Matrix::identity(cl.m(), cl.m()), eps)?;
    let s = &a * r - b;
    Ok(s.iter().all(|&v| v < 0.0))
}
