//! Operating modes, closed-loop construction and standing-assumption checks.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;

use crate::error::{dims, Error, Result};
use crate::linalg;
use crate::polytope::Polytope;
use crate::{Matrix, Vector};

/// Default margin below one for the strict Schur test.
pub const SCHUR_MARGIN: f64 = 1e-9;

/// Closed-loop pair `x+ = A x + B v`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoop {
    pub a: Matrix,
    pub b: Matrix,
}

impl ClosedLoop {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }
}

/// One operating mode: open-loop plant, gains and noise statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeModel {
    pub mode_id: usize,
    pub a_o: Matrix,
    pub b_o: Matrix,
    pub c: Matrix,
    pub k: Matrix,
    pub g: Matrix,
    pub a: Matrix,
    pub b: Matrix,
    pub h_omega: Matrix,
    pub h_xi: Matrix,
}

/// Open-loop data handed to [`build_closed_loop`].
#[derive(Debug, Clone, PartialEq)]
pub struct OpenLoopMode {
    pub mode_id: usize,
    pub a_o: Matrix,
    pub b_o: Matrix,
    pub c: Matrix,
    pub h_omega: Matrix,
    pub h_xi: Matrix,
}

/// Closes the loop with `u = K x + G v` and checks the result is strictly Schur.
pub fn build_closed_loop(open: OpenLoopMode, k: Matrix, g: Matrix, schur_margin: f64) -> Result<ModeModel> {
    let n = linalg::ensure_square(&open.a_o, "A_o")?;
    let p = open.b_o.ncols();
    linalg::ensure_shape(&open.b_o, n, p, "B_o")?;
    let m = open.c.nrows();
    linalg::ensure_shape(&open.c, m, n, "C")?;
    linalg::ensure_shape(&k, p, n, "K")?;
    linalg::ensure_shape(&g, p, m, "G")?;
    linalg::ensure_shape(&open.h_omega, n, n, "H_omega")?;
    linalg::ensure_shape(&open.h_xi, m, m, "H_xi")?;
    if !linalg::all_finite(&k) || !linalg::all_finite(&g) {
        return Err(Error::InvalidArgument("gains must be finite".into()));
    }
    if !linalg::is_psd(&open.h_omega) {
        return Err(Error::NonPsdInput("H_omega"));
    }
    if !linalg::is_psd(&open.h_xi) {
        return Err(Error::NonPsdInput("H_xi"));
    }
    let a = &open.a_o + &open.b_o * &k;
    let b = &open.b_o * &g;
    let rho = linalg::spectral_radius(&a);
    if !(rho < 1.0 - schur_margin) {
        return Err(Error::NotSchur { spectral_radius: rho });
    }
    Ok(ModeModel {
        mode_id: open.mode_id,
        a_o: open.a_o,
        b_o: open.b_o,
        c: open.c,
        k,
        g,
        a,
        b,
        h_omega: open.h_omega,
        h_xi: open.h_xi,
    })
}

impl ModeModel {
    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn p(&self) -> usize {
        self.b_o.ncols()
    }

    pub fn closed_loop(&self) -> ClosedLoop {
        ClosedLoop { a: self.a.clone(), b: self.b.clone() }
    }

    /// This plant driven by another mode's gains: `(A_o + B_o K', B_o G')`.
    pub fn loop_with_gains(&self, k: &Matrix, g: &Matrix) -> ClosedLoop {
        ClosedLoop { a: &self.a_o + &self.b_o * k, b: &self.b_o * g }
    }

    /// Recomputes `A`, `B` from the stored open-loop data and gains.
    pub fn rebuilt(&self) -> ClosedLoop {
        self.loop_with_gains(&self.k, &self.g)
    }
}

/// Zeroes column `actuator_index` (1-based) of `B_o`.
pub fn apply_actuator_fault(b_o: &Matrix, actuator_index: usize) -> Result<Matrix> {
    let p = b_o.ncols();
    if actuator_index == 0 || actuator_index > p {
        return Err(Error::IndexOutOfRange { index: actuator_index, len: p });
    }
    let mut out = b_o.clone();
    out.column_mut(actuator_index - 1).fill(0.0);
    Ok(out)
}

/// Constrained outputs `z1 = L_x x + L_u u + L_v v + zeta` and
/// `z2 = F_x x + F_u u + F_v v + varsigma` with their admissible sets.
///
/// `L_u`, `F_u` may be empty (zero rows are assumed); they let input bounds be
/// written against `u = K x + G v` with whatever gains are applied.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSpec {
    pub l_x: Matrix,
    pub l_u: Option<Matrix>,
    pub l_v: Matrix,
    pub z1: Polytope,
    pub f_x: Matrix,
    pub f_u: Option<Matrix>,
    pub f_v: Matrix,
    pub z2: Polytope,
    pub h_zeta: Matrix,
    pub h_varsigma: Matrix,
    pub beta: f64,
    pub z1_plus: Polytope,
    pub z2_plus: Polytope,
    pub t_e: usize,
}

/// Output maps with the input coupling folded in for a particular gain pair.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputMaps {
    pub lx: Matrix,
    pub lv: Matrix,
    pub fx: Matrix,
    pub fv: Matrix,
}

impl OutputMaps {
    pub fn n_e(&self) -> usize {
        self.lx.nrows()
    }

    pub fn n_c(&self) -> usize {
        self.fx.nrows()
    }
}

impl ConstraintSpec {
    pub fn n_e(&self) -> usize {
        self.l_x.nrows()
    }

    pub fn n_c(&self) -> usize {
        self.f_x.nrows()
    }

    /// Folds `u = K x + G v` into the output maps.
    pub fn output_maps(&self, k: &Matrix, g: &Matrix) -> OutputMaps {
        let mut lx = self.l_x.clone();
        let mut lv = self.l_v.clone();
        if let Some(lu) = &self.l_u {
            lx += lu * k;
            lv += lu * g;
        }
        let mut fx = self.f_x.clone();
        let mut fv = self.f_v.clone();
        if let Some(fu) = &self.f_u {
            fx += fu * k;
            fv += fu * g;
        }
        OutputMaps { lx, lv, fx, fv }
    }

    pub fn maps_for(&self, mode: &ModeModel) -> OutputMaps {
        self.output_maps(&mode.k, &mode.g)
    }

    /// Shape and semantic checks against state, reference and input sizes.
    pub fn check(&self, n: usize, m: usize, p: usize) -> Result<()> {
        let ne = self.n_e();
        let nc = self.n_c();
        linalg::ensure_shape(&self.l_x, ne, n, "L_x")?;
        linalg::ensure_shape(&self.l_v, ne, m, "L_v")?;
        linalg::ensure_shape(&self.f_x, nc, n, "F_x")?;
        linalg::ensure_shape(&self.f_v, nc, m, "F_v")?;
        if let Some(lu) = &self.l_u {
            linalg::ensure_shape(lu, ne, p, "L_u")?;
        }
        if let Some(fu) = &self.f_u {
            linalg::ensure_shape(fu, nc, p, "F_u")?;
        }
        linalg::ensure_shape(&self.h_zeta, ne, ne, "H_zeta")?;
        linalg::ensure_shape(&self.h_varsigma, nc, nc, "H_varsigma")?;
        for (set, dim, what) in [
            (&self.z1, ne, "Z1"),
            (&self.z1_plus, ne, "Z1+"),
            (&self.z2, nc, "Z2"),
            (&self.z2_plus, nc, "Z2+"),
        ] {
            if set.dim() != dim {
                return Err(dims(format!("{what} lives in dimension {}, expected {dim}", set.dim())));
            }
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::InvalidProbability(self.beta));
        }
        if !linalg::is_psd(&self.h_zeta) {
            return Err(Error::NonPsdInput("H_zeta"));
        }
        if !linalg::is_psd(&self.h_varsigma) {
            return Err(Error::NonPsdInput("H_varsigma"));
        }
        if self.t_e < 2 {
            return Err(Error::InvalidArgument("T_e must be at least 2".into()));
        }
        Ok(())
    }
}

/// Modes, successor relation and prior probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ModeGraph {
    pub modes: Vec<ModeModel>,
    pub successors: BTreeMap<usize, Vec<usize>>,
    pub priors: Vector,
}

impl ModeGraph {
    pub fn mode(&self, id: usize) -> Option<&ModeModel> {
        self.modes.iter().find(|m| m.mode_id == id)
    }

    pub fn require(&self, id: usize) -> Result<&ModeModel> {
        self.mode(id).ok_or_else(|| Error::InvalidArgument(format!("unknown mode id {id}")))
    }

    pub fn successors_of(&self, id: usize) -> &[usize] {
        self.successors.get(&id).map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// `{id} ∪ successors(id)` in that order.
    pub fn hypotheses(&self, id: usize) -> Vec<usize> {
        let mut out = alloc::vec![id];
        for &s in self.successors_of(id) {
            if !out.contains(&s) {
                out.push(s);
            }
        }
        out
    }

    pub fn prior_of(&self, id: usize) -> f64 {
        self.modes
            .iter()
            .position(|m| m.mode_id == id)
            .map(|i| self.priors[i])
            .unwrap_or(0.0)
    }

    /// Priors restricted to `ids` and renormalized; uniform if they sum to zero.
    pub fn restricted_priors(&self, ids: &[usize]) -> Vector {
        let raw = Vector::from_iterator(ids.len(), ids.iter().map(|&i| self.prior_of(i)));
        let s = raw.sum();
        if s > 0.0 {
            raw / s
        } else {
            Vector::from_element(ids.len(), 1.0 / ids.len() as f64)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModeCheck {
    pub mode_id: usize,
    pub spectral_radius: f64,
    pub schur: bool,
    pub rank_lx: usize,
    pub rank_fx: usize,
    pub observable_lx: bool,
    pub observable_fx: bool,
    pub closed_loop_consistent: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub modes: Vec<ModeCheck>,
    pub prior_sum: f64,
    pub priors_ok: bool,
    pub successors_ok: bool,
    pub origin_inside: bool,
    pub extended_sets_ok: bool,
    pub bounded_sets: bool,
    pub messages: Vec<alloc::string::String>,
}

impl ValidationReport {
    pub fn all_pass(&self) -> bool {
        self.priors_ok
            && self.successors_ok
            && self.origin_inside
            && self.extended_sets_ok
            && self.bounded_sets
            && self.modes.iter().all(|m| {
                m.schur && m.observable_lx && m.observable_fx && m.closed_loop_consistent
            })
    }
}

/// Reports Schur, observability and prior sanity for every mode. Never fails:
/// problems are collected in the report.
pub fn validate_mode_graph(graph: &ModeGraph, spec: &ConstraintSpec) -> ValidationReport {
    let mut messages = Vec::new();
    let mut modes = Vec::new();
    for mode in &graph.modes {
        let rho = linalg::spectral_radius(&mode.a);
        let maps = spec.maps_for(mode);
        let n = mode.n();
        let rank_lx = linalg::rank(&linalg::observability_matrix(&maps.lx, &mode.a));
        let rank_fx = linalg::rank(&linalg::observability_matrix(&maps.fx, &mode.a));
        let rebuilt = mode.rebuilt();
        let consistent = (&rebuilt.a - &mode.a).amax() <= 1e-12 * mode.a.amax().max(1.0)
            && (&rebuilt.b - &mode.b).amax() <= 1e-12 * mode.b.amax().max(1.0);
        let check = ModeCheck {
            mode_id: mode.mode_id,
            spectral_radius: rho,
            schur: rho < 1.0 - SCHUR_MARGIN,
            rank_lx,
            rank_fx,
            observable_lx: rank_lx == n,
            observable_fx: rank_fx == n,
            closed_loop_consistent: consistent,
        };
        if !check.schur {
            messages.push(format!("mode {}: spectral radius {rho:.6} is not below 1", mode.mode_id));
        }
        if !check.observable_lx {
            messages.push(format!("mode {}: (L_x, A) observability rank {rank_lx} < {n}", mode.mode_id));
        }
        if !check.observable_fx {
            messages.push(format!("mode {}: (F_x, A) observability rank {rank_fx} < {n}", mode.mode_id));
        }
        modes.push(check);
    }
    let prior_sum = graph.priors.sum();
    let priors_ok = graph.priors.len() == graph.modes.len()
        && graph.priors.iter().all(|&p| p >= 0.0)
        && (prior_sum - 1.0).abs() <= 1e-9;
    if !priors_ok {
        messages.push(format!("priors must be nonnegative and sum to 1 (sum = {prior_sum})"));
    }
    let successors_ok = graph
        .successors
        .iter()
        .all(|(from, to)| graph.mode(*from).is_some() && to.iter().all(|t| graph.mode(*t).is_some()));
    if !successors_ok {
        messages.push("successor map references unknown mode ids".into());
    }
    let zero_e = Vector::zeros(spec.n_e());
    let zero_c = Vector::zeros(spec.n_c());
    let origin_inside = spec.z1.max_violation(&zero_e) < 0.0 && spec.z2.max_violation(&zero_c) < 0.0;
    if !origin_inside {
        messages.push("Z1 and Z2 must contain the origin in their interior".into());
    }
    let extended_sets_ok = matches!(spec.z1.is_subset_of(&spec.z1_plus), Ok(true))
        && matches!(spec.z2.is_subset_of(&spec.z2_plus), Ok(true));
    if !extended_sets_ok {
        messages.push("extended sets must contain the nominal sets".into());
    }
    let bounded_sets = [&spec.z1, &spec.z2].iter().all(|p| is_bounded(p));
    if !bounded_sets {
        messages.push("Z1 and Z2 must be bounded".into());
    }
    ValidationReport {
        modes,
        prior_sum,
        priors_ok,
        successors_ok,
        origin_inside,
        extended_sets_ok,
        bounded_sets,
        messages,
    }
}

fn is_bounded(p: &Polytope) -> bool {
    for j in 0..p.dim() {
        for s in [1.0, -1.0] {
            let mut e = Vector::zeros(p.dim());
            e[j] = s;
            if !matches!(p.support(&e), Ok(Some(_))) {
                return false;
            }
        }
    }
    true
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use proptest::prelude::*;

    pub fn scalar_mode(id: usize, a_o: f64, b_o: f64, k: f64, g: f64) -> Result<ModeModel> {
        build_closed_loop(
            OpenLoopMode {
                mode_id: id,
                a_o: dmatrix![a_o],
                b_o: dmatrix![b_o],
                c: dmatrix![1.0],
                h_omega: dmatrix![0.0],
                h_xi: dmatrix![0.01],
            },
            dmatrix![k],
            dmatrix![g],
            SCHUR_MARGIN,
        )
    }

    pub fn scalar_spec(z1: f64, z2: f64) -> ConstraintSpec {
        ConstraintSpec {
            l_x: dmatrix![1.0],
            l_u: None,
            l_v: dmatrix![0.0],
            z1: Polytope::symmetric_box(&[z1]).unwrap(),
            f_x: dmatrix![1.0],
            f_u: None,
            f_v: dmatrix![0.0],
            z2: Polytope::symmetric_box(&[z2]).unwrap(),
            h_zeta: dmatrix![0.0],
            h_varsigma: dmatrix![0.0],
            beta: 0.95,
            z1_plus: Polytope::symmetric_box(&[z1 * 1.5]).unwrap(),
            z2_plus: Polytope::symmetric_box(&[z2 * 1.5]).unwrap(),
            t_e: 10,
        }
    }

    #[test]
    fn zero_gain_identity() {
        let open = OpenLoopMode {
            mode_id: 1,
            a_o: dmatrix![0.5, 0.1; 0.0, 0.4],
            b_o: dmatrix![1.0, 0.0; 0.0, 1.0],
            c: Matrix::identity(2, 2),
            h_omega: Matrix::zeros(2, 2),
            h_xi: Matrix::identity(2, 2),
        };
        let m = build_closed_loop(open.clone(), Matrix::zeros(2, 2), Matrix::identity(2, 2), SCHUR_MARGIN).unwrap();
        assert_eq!(m.a, open.a_o);
        assert_eq!(m.b, open.b_o);
    }

    #[test]
    fn scalar_stabilization() {
        let m = scalar_mode(1, 1.2, 1.0, -0.9, 1.0).unwrap();
        assert!((m.a[(0, 0)] - 0.3).abs() < 1e-15);
        assert_eq!(m.b[(0, 0)], 1.0);
        assert!(matches!(scalar_mode(1, 1.2, 1.0, 0.0, 1.0), Err(Error::NotSchur { .. })));
    }

    #[test]
    fn dimension_errors() {
        let open = OpenLoopMode {
            mode_id: 1,
            a_o: dmatrix![0.5],
            b_o: dmatrix![1.0],
            c: dmatrix![1.0],
            h_omega: dmatrix![0.0],
            h_xi: dmatrix![1.0],
        };
        let r = build_closed_loop(open, dmatrix![1.0, 2.0], dmatrix![1.0], SCHUR_MARGIN);
        assert!(matches!(r, Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn actuator_fault_examples() {
        let i2 = Matrix::identity(2, 2);
        assert_eq!(apply_actuator_fault(&i2, 1).unwrap(), dmatrix![0.0, 0.0; 0.0, 1.0]);
        let z = dmatrix![1.0, 0.0; 3.0, 0.0];
        assert_eq!(apply_actuator_fault(&z, 2).unwrap(), z);
        assert_eq!(apply_actuator_fault(&dmatrix![1.0, 2.0; 3.0, 4.0], 2).unwrap(), dmatrix![1.0, 0.0; 3.0, 0.0]);
        assert!(matches!(apply_actuator_fault(&i2, 3), Err(Error::IndexOutOfRange { index: 3, len: 2 })));
        assert!(apply_actuator_fault(&i2, 0).is_err());
    }

    fn graph_of(modes: Vec<ModeModel>, priors: Vector) -> ModeGraph {
        ModeGraph { modes, successors: BTreeMap::new(), priors }
    }

    #[test]
    fn validation_reports() {
        let spec = scalar_spec(1.0, 1.0);
        let g = graph_of(alloc::vec![scalar_mode(1, 0.5, 1.0, 0.0, 1.0).unwrap()], Vector::from_element(1, 1.0));
        let report = validate_mode_graph(&g, &spec);
        assert!(report.all_pass(), "{:?}", report.messages);

        let mut blind = spec.clone();
        blind.l_x = dmatrix![0.0];
        let report = validate_mode_graph(&g, &blind);
        assert!(!report.modes[0].observable_lx);
        assert!(!report.all_pass());

        let g2 = graph_of(
            alloc::vec![
                scalar_mode(1, 0.5, 1.0, 0.0, 1.0).unwrap(),
                scalar_mode(2, 0.4, 1.0, 0.0, 1.0).unwrap()
            ],
            Vector::from_vec(alloc::vec![0.6, 0.6]),
        );
        let before = g2.clone();
        let report = validate_mode_graph(&g2, &spec);
        assert!(!report.priors_ok);
        assert_eq!(g2, before);
    }

    #[test]
    fn input_coupling_folds_gains() {
        let mut spec = scalar_spec(1.0, 1.0);
        spec.l_u = Some(dmatrix![2.0]);
        let maps = spec.output_maps(&dmatrix![-0.5], &dmatrix![3.0]);
        assert_eq!(maps.lx, dmatrix![0.0]);
        assert_eq!(maps.lv, dmatrix![6.0]);
    }

    proptest! {
        #[test]
        fn fault_is_idempotent_and_commutes(vals in prop::collection::vec(-5.0..5.0f64, 6), i in 1usize..4, j in 1usize..4) {
            let b = Matrix::from_row_slice(2, 3, &vals);
            let once = apply_actuator_fault(&b, i).unwrap();
            prop_assert_eq!(apply_actuator_fault(&once, i).unwrap(), once.clone());
            let ij = apply_actuator_fault(&once, j).unwrap();
            let ji = apply_actuator_fault(&apply_actuator_fault(&b, j).unwrap(), i).unwrap();
            prop_assert_eq!(ij, ji);
        }

        #[test]
        fn rebuild_reproduces_closed_loop(a in -0.9..0.9f64, bo in 0.1..2.0f64, k in -0.2..0.2f64, g in -2.0..2.0f64) {
            prop_assume!((a + bo * k).abs() < 0.99);
            let m = scalar_mode(1, a, bo, k, g).unwrap();
            let r = m.rebuilt();
            prop_assert_eq!(r.a, m.a);
            prop_assert_eq!(r.b, m.b);
        }
    }
}
