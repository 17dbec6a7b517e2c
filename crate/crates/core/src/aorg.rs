//! At-once reference governor.
//!
//! Each interval the governor picks `v_0..v_T` with `v_i` on the segment from
//! `v_{i-1}` to the previewed reference `r_i`, so that `(x, v_0..v_T)` lies in
//! the admissible set. The gains `κ_j^i` are recovered from the plan afterwards.

use alloc::vec;
use alloc::vec::Vec;

use crate::admissible::AdmissibleSet;
use crate::error::{dims, Error, Result};
use crate::linalg;
use crate::lp::{self, LpOutcome};
use crate::{Matrix, Vector};

/// Tolerance on plan membership and on the segment constraints.
pub const PLAN_TOL: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct AorgPlan {
    /// `(T + 1) × m`, row `i` holds `κ^i`.
    pub kappas: Matrix,
    pub v_seq: Vec<Vector>,
    /// `Σ κ` of the returned plan.
    pub objective: f64,
    pub feasible_start: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HoldDecision {
    pub held_v: Vector,
    pub recheck_next_step: bool,
}

/// `v_i = v_{i-1} + diag(κ^i) (r_i - v_{i-1})`.
pub fn kappa_to_sequence(v_prev: &Vector, r_preview: &[Vector], kappas: &Matrix) -> Result<Vec<Vector>> {
    let m = v_prev.len();
    if kappas.nrows() != r_preview.len() || kappas.ncols() != m {
        return Err(dims("kappas must be (T + 1) × m matching the preview"));
    }
    let mut out = Vec::with_capacity(r_preview.len());
    let mut prev = v_prev.clone();
    for (i, r) in r_preview.iter().enumerate() {
        linalg::ensure_len(r, m, "reference")?;
        let mut v = prev.clone();
        for j in 0..m {
            let k = kappas[(i, j)];
            if !(0.0..=1.0).contains(&k) {
                return Err(Error::KappaOutOfRange(k));
            }
            v[j] = prev[j] + k * (r[j] - prev[j]);
        }
        out.push(v.clone());
        prev = v;
    }
    Ok(out)
}

/// Inverse of [`kappa_to_sequence`]; zero displacement counts as `κ = 1`.
pub fn sequence_to_kappas(v_prev: &Vector, r_preview: &[Vector], v_seq: &[Vector]) -> Matrix {
    let m = v_prev.len();
    let mut k = Matrix::zeros(v_seq.len(), m);
    let mut prev = v_prev.clone();
    for (i, (v, r)) in v_seq.iter().zip(r_preview).enumerate() {
        for j in 0..m {
            let d = r[j] - prev[j];
            k[(i, j)] = if d.abs() <= 1e-12 { 1.0 } else { ((v[j] - prev[j]) / d).clamp(0.0, 1.0) };
        }
        prev = v.clone();
    }
    k
}

/// Pads or truncates a preview to `len` entries by holding the last one.
pub fn fit_preview(r_preview: &[Vector], len: usize) -> Result<Vec<Vector>> {
    let last = r_preview.last().ok_or_else(|| dims("empty reference preview"))?;
    Ok((0..len).map(|i| r_preview.get(i).unwrap_or(last).clone()).collect())
}

/// Rows `N_v y <= b - N_x x` of the admissible set with the state fixed,
/// over the stacked `y = (v_0, ..., v_T)`.
pub fn slice_at_state(oinf: &AdmissibleSet, x: &Vector) -> Result<(Matrix, Vector)> {
    linalg::ensure_len(x, oinf.n, "x")?;
    let a = oinf.set.normals();
    let n = oinf.n;
    let dv = a.ncols() - n;
    let nx = a.columns(0, n);
    let b = oinf.set.offsets() - nx * x;
    Ok((a.columns(n, dv).into_owned(), b))
}

/// Segment rows keeping each `v_{i,j}` between `v_{i-1,j}` and `r_{i,j}`,
/// oriented by the sign of `r_{i,j} - v_prev_j`. Coordinates with zero
/// displacement are pinned to the reference.
pub fn segment_rows(v_prev: &Vector, r_preview: &[Vector]) -> (Matrix, Vector, Vec<f64>) {
    let m = v_prev.len();
    let steps = r_preview.len();
    let d = m * steps;
    let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
    let mut signs = vec![0.0; d];
    for (i, r) in r_preview.iter().enumerate() {
        for j in 0..m {
            let idx = i * m + j;
            let disp = r[j] - v_prev[j];
            let s = if disp.abs() <= 1e-12 { 0.0 } else { disp.signum() };
            signs[idx] = s;
            if s == 0.0 {
                rows.push((vec![(idx, 1.0)], r[j]));
                rows.push((vec![(idx, -1.0)], -r[j]));
                continue;
            }
            // s (v_{i-1} - v_i) <= 0
            if i == 0 {
                rows.push((vec![(idx, -s)], -s * v_prev[j]));
            } else {
                rows.push((vec![(idx, -s), (idx - m, s)], 0.0));
            }
            // s (v_i - r_i) <= 0
            rows.push((vec![(idx, s)], s * r[j]));
        }
    }
    let mut a = Matrix::zeros(rows.len(), d);
    let mut b = Vector::zeros(rows.len());
    for (k, (coefs, rhs)) in rows.into_iter().enumerate() {
        for (c, v) in coefs {
            a[(k, c)] = v;
        }
        b[k] = rhs;
    }
    (a, b, signs)
}

pub fn stack(a1: &Matrix, b1: &Vector, a2: &Matrix, b2: &Vector) -> (Matrix, Vector) {
    let d = a1.ncols().max(a2.ncols());
    let mut a = Matrix::zeros(a1.nrows() + a2.nrows(), d);
    a.view_mut((0, 0), (a1.nrows(), a1.ncols())).copy_from(a1);
    a.view_mut((a1.nrows(), 0), (a2.nrows(), a2.ncols())).copy_from(a2);
    let mut b = Vector::zeros(b1.len() + b2.len());
    b.rows_mut(0, b1.len()).copy_from(b1);
    b.rows_mut(b1.len(), b2.len()).copy_from(b2);
    (a, b)
}

/// Cumulative normalized progress `Σ_i Σ_j s_ij (v_ij - v_prev_j) / |r_ij - v_prev_j|`.
pub fn progress_objective(v_prev: &Vector, r_preview: &[Vector], signs: &[f64]) -> Vector {
    let m = v_prev.len();
    let mut c = Vector::zeros(signs.len());
    for (i, r) in r_preview.iter().enumerate() {
        for j in 0..m {
            let s = signs[i * m + j];
            if s != 0.0 {
                c[i * m + j] = s / (r[j] - v_prev[j]).abs();
            }
        }
    }
    c
}

pub fn unstack(y: &Vector, m: usize) -> Vec<Vector> {
    (0..y.len() / m).map(|i| y.rows(i * m, m).into_owned()).collect()
}

/// Plans `v_0..v_T` for the interval starting at `x_t`.
///
/// The preview is padded with its last entry (or truncated) to `T + 1` terms.
/// Returns [`Error::InfeasibleStart`] when `(x_t, v_prev)` admits no plan.
pub fn plan_interval(oinf: &AdmissibleSet, x_t: &Vector, v_prev: &Vector, r_preview: &[Vector]) -> Result<AorgPlan> {
    linalg::ensure_len(v_prev, oinf.m, "v_prev")?;
    let preview = fit_preview(r_preview, oinf.horizon_t + 1)?;
    if !oinf.admits(x_t, v_prev)?.feasible {
        return Err(Error::InfeasibleStart);
    }
    let (a_set, b_set) = slice_at_state(oinf, x_t)?;
    let (a_seg, b_seg, signs) = segment_rows(v_prev, &preview);
    let (a, b) = stack(&a_set, &b_set, &a_seg, &b_seg);
    let c = progress_objective(v_prev, &preview, &signs);
    let y = match lp::maximize(&a, &b, &c)? {
        LpOutcome::Optimal { point, .. } => point,
        LpOutcome::Infeasible => return Err(Error::InfeasibleStart),
        LpOutcome::Unbounded => return Err(Error::SolverError("governor program unbounded")),
    };
    let v_seq = snap_to_segments(unstack(&y, oinf.m), v_prev, &preview);
    let plan_point = oinf.stack(x_t, &v_seq)?;
    if oinf.set.max_violation(&plan_point) > PLAN_TOL {
        return Err(Error::SolverError("governor plan left the admissible set"));
    }
    let kappas = sequence_to_kappas(v_prev, &preview, &v_seq);
    let objective = kappas.iter().sum();
    Ok(AorgPlan { kappas, v_seq, objective, feasible_start: true })
}

/// Removes solver round-off so each `v_i` lies exactly on its segment.
pub(crate) fn snap_to_segments(mut v_seq: Vec<Vector>, v_prev: &Vector, preview: &[Vector]) -> Vec<Vector> {
    let mut prev = v_prev.clone();
    for (v, r) in v_seq.iter_mut().zip(preview) {
        for j in 0..v.len() {
            let (lo, hi) = if prev[j] <= r[j] { (prev[j], r[j]) } else { (r[j], prev[j]) };
            v[j] = v[j].clamp(lo, hi);
            if (v[j] - r[j]).abs() <= 1e-11 {
                v[j] = r[j];
            }
        }
        prev = v.clone();
    }
    v_seq
}

/// One-step hold when no admissible plan starts at `(x_now, v_prev)`.
pub fn handle_infeasible(oinf: &AdmissibleSet, x_now: &Vector, v_prev: &Vector) -> Result<HoldDecision> {
    if oinf.admits(x_now, v_prev)?.feasible {
        return Err(Error::InvalidArgument("hold requested at a feasible start".into()));
    }
    Ok(HoldDecision { held_v: v_prev.clone(), recheck_next_step: true })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::admissible::tests::scalar_loop;
    use crate::admissible::{admissible_set_for_mode, AdmissibleOptions};
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    fn scalar_set(horizon: usize) -> AdmissibleSet {
        let (mode, spec) = scalar_loop(0.5, 0.5, 1.0);
        let opts = AdmissibleOptions { eps: Some(0.01), ..Default::default() };
        admissible_set_for_mode(&mode, &spec, horizon, &opts).unwrap().0
    }

    #[test]
    fn kappa_recursion_examples() {
        let v = kappa_to_sequence(&dvector![0.0], &vec![dvector![1.0]; 3], &dmatrix![0.5; 0.5; 0.5]).unwrap();
        assert_eq!(v, vec![dvector![0.5], dvector![0.75], dvector![0.875]]);
        let zero = kappa_to_sequence(&dvector![0.2], &vec![dvector![1.0]; 2], &Matrix::zeros(2, 1)).unwrap();
        assert_eq!(zero, vec![dvector![0.2]; 2]);
        let one = kappa_to_sequence(&dvector![0.2], &[dvector![1.0], dvector![-1.0]], &Matrix::from_element(2, 1, 1.0));
        assert_eq!(one.unwrap(), vec![dvector![1.0], dvector![-1.0]]);
        assert!(matches!(
            kappa_to_sequence(&dvector![0.0], &[dvector![1.0]], &dmatrix![1.5]),
            Err(Error::KappaOutOfRange(_))
        ));
    }

    #[test]
    fn reachable_reference_gives_unit_kappas() {
        let set = scalar_set(2);
        let plan = plan_interval(&set, &dvector![0.5], &dvector![0.5], &[dvector![0.6]]).unwrap();
        assert_eq!(plan.kappas, Matrix::from_element(3, 1, 1.0));
        assert_eq!(plan.v_seq, vec![dvector![0.6]; 3]);
        assert_eq!(plan.objective, 3.0);
    }

    #[test]
    fn zero_displacement_gives_unit_kappas() {
        let set = scalar_set(2);
        let plan = plan_interval(&set, &dvector![0.0], &dvector![0.3], &[dvector![0.3]]).unwrap();
        assert_eq!(plan.kappas, Matrix::from_element(3, 1, 1.0));
        assert_eq!(plan.v_seq, vec![dvector![0.3]; 3]);
    }

    #[test]
    fn pinned_slice_gives_zero_kappas() {
        // |v| <= 0.99 steady state, and z1 = v_0 <= 0.99, so from v_prev = 0.99
        // nothing beyond it is admissible.
        let set = scalar_set(1);
        let plan = plan_interval(&set, &dvector![0.99], &dvector![0.99], &[dvector![5.0]]).unwrap();
        assert!(plan.kappas.iter().all(|&k| k.abs() < 1e-9), "{}", plan.kappas);
        assert!(plan.v_seq.iter().all(|v| (v[0] - 0.99).abs() < 1e-9));
    }

    #[test]
    fn infeasible_start_and_hold() {
        let set = scalar_set(1);
        let r = plan_interval(&set, &dvector![0.0], &dvector![3.0], &[dvector![0.0]]);
        assert_eq!(r, Err(Error::InfeasibleStart));
        let hold = handle_infeasible(&set, &dvector![0.0], &dvector![3.0]).unwrap();
        assert_eq!(hold.held_v, dvector![3.0]);
        assert!(hold.recheck_next_step);
        assert!(handle_infeasible(&set, &dvector![0.0], &dvector![0.0]).is_err());
    }

    proptest! {
        #[test]
        fn plans_are_admissible_and_monotone(
            x in -1.5f64..1.5, vp in -0.98f64..0.98, r0 in -3.0f64..3.0, r1 in -3.0f64..3.0
        ) {
            let set = scalar_set(2);
            let preview = [dvector![r0], dvector![r1]];
            match plan_interval(&set, &dvector![x], &dvector![vp], &preview) {
                Ok(plan) => {
                    prop_assert!(set.contains_plan(&dvector![x], &plan.v_seq).unwrap());
                    let full = fit_preview(&preview, 3).unwrap();
                    let again = kappa_to_sequence(&dvector![vp], &full, &plan.kappas).unwrap();
                    for (a, b) in again.iter().zip(&plan.v_seq) {
                        prop_assert!((a[0] - b[0]).abs() < 1e-9);
                    }
                    let mut prev = vp;
                    for (v, r) in plan.v_seq.iter().zip(&full) {
                        prop_assert!((r[0] - v[0]).abs() <= (r[0] - prev).abs() + 1e-12);
                        prev = v[0];
                    }
                }
                Err(Error::InfeasibleStart) => {}
                Err(e) => prop_assert!(false, "{e}"),
            }
        }
    }
}
