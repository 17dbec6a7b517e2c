//! Strictly convex quadratic programs by the dual active-set method of
//! Goldfarb and Idnani.
//!
//! Solves `min 1/2 y^T H y + f^T y` subject to `E y = e` and `A y <= b` with `H`
//! symmetric positive definite. The unconstrained minimizer is the starting
//! point; the most violated inequality is added each major iteration and
//! constraints whose multipliers would turn negative are dropped on the way.
//! Dense and recomputed from scratch per step, which is fine for the few dozen
//! variables the governor and the recovery planner produce.

use alloc::vec::Vec;

use crate::error::{dims, Error, Result};
use crate::math;
use crate::{Matrix, Vector};

const VIOL_TOL: f64 = 1e-9;
const ZERO_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum QpOutcome {
    Optimal { point: Vector, value: f64 },
    Infeasible,
}

impl QpOutcome {
    pub fn point(&self) -> Option<&Vector> {
        match self {
            QpOutcome::Optimal { point, .. } => Some(point),
            QpOutcome::Infeasible => None,
        }
    }
}

/// Problem data. Row `i` of `a` reads `a_i^T y <= b_i`.
pub struct Qp<'a> {
    pub h: &'a Matrix,
    pub f: &'a Vector,
    pub a: &'a Matrix,
    pub b: &'a Vector,
    pub eq: Option<(&'a Matrix, &'a Vector)>,
}

pub fn solve(qp: &Qp<'_>) -> Result<QpOutcome> {
    let d = qp.f.len();
    if qp.h.nrows() != d || qp.h.ncols() != d {
        return Err(dims("qp: Hessian shape"));
    }
    if qp.a.ncols() != d || qp.a.nrows() != qp.b.len() {
        return Err(dims("qp: inequality shape"));
    }
    if let Some((e, ev)) = qp.eq {
        if e.ncols() != d || e.nrows() != ev.len() {
            return Err(dims("qp: equality shape"));
        }
    }
    let sym = (qp.h + qp.h.transpose()) * 0.5;
    let ginv = sym
        .clone()
        .cholesky()
        .ok_or(Error::NonPdInput("qp Hessian"))?
        .inverse();

    // Internally constraints are normalized and written as n^T y >= c.
    let mut normals: Vec<Vector> = Vec::new();
    let mut rhs: Vec<f64> = Vec::new();
    let mut is_eq: Vec<bool> = Vec::new();
    if let Some((e, ev)) = qp.eq {
        for i in 0..e.nrows() {
            let row = e.row(i).transpose();
            let nrm = math::sqrt(row.dot(&row));
            if nrm <= ZERO_TOL {
                if ev[i].abs() > VIOL_TOL {
                    return Ok(QpOutcome::Infeasible);
                }
                continue;
            }
            normals.push(row / nrm);
            rhs.push(ev[i] / nrm);
            is_eq.push(true);
        }
    }
    for i in 0..qp.a.nrows() {
        let row = qp.a.row(i).transpose();
        let nrm = math::sqrt(row.dot(&row));
        if nrm <= ZERO_TOL {
            if qp.b[i] < -VIOL_TOL {
                return Ok(QpOutcome::Infeasible);
            }
            continue;
        }
        normals.push(-row / nrm);
        rhs.push(-qp.b[i] / nrm);
        is_eq.push(false);
    }

    let mut y = -(&ginv * qp.f);
    let mut active: Vec<usize> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let n_eq = is_eq.iter().filter(|&&e| e).count();
    let max_iter = 20 * (normals.len() + d) + 100;
    let mut iter = 0;

    // Equalities first, then the most violated inequality each round.
    let mut eq_cursor = 0;
    loop {
        iter += 1;
        if iter > max_iter {
            return Err(Error::SolverError("qp iteration limit"));
        }
        let p = if eq_cursor < n_eq {
            eq_cursor += 1;
            Some(eq_cursor - 1)
        } else {
            let mut best: Option<(usize, f64)> = None;
            for (i, n) in normals.iter().enumerate() {
                if is_eq[i] || active.contains(&i) {
                    continue;
                }
                let s = n.dot(&y) - rhs[i];
                if s < -VIOL_TOL * (1.0 + rhs[i].abs().min(1e3)) && best.map_or(true, |(_, v)| s < v) {
                    best = Some((i, s));
                }
            }
            best.map(|(i, _)| i)
        };
        let Some(p) = p else {
            let value = 0.5 * y.dot(&(&sym * &y)) + qp.f.dot(&y);
            return Ok(QpOutcome::Optimal { point: y, value });
        };
        if is_eq[p] && normals[p].dot(&y) - rhs[p] > 0.0 {
            normals[p] = -normals[p].clone();
            rhs[p] = -rhs[p];
        }
        let np = normals[p].clone();
        let mut u_plus = 0.0;
        loop {
            iter += 1;
            if iter > max_iter {
                return Err(Error::SolverError("qp iteration limit"));
            }
            let (z, r) = directions(&ginv, &normals, &active, &np)?;
            let s_p = np.dot(&y) - rhs[p];
            // Partial step: largest dual move keeping inequality multipliers >= 0.
            let mut t1 = f64::INFINITY;
            let mut drop_at = None;
            for (j, &k) in active.iter().enumerate() {
                if is_eq[k] || r[j] <= ZERO_TOL {
                    continue;
                }
                let ratio = u[j] / r[j];
                if ratio < t1 {
                    t1 = ratio;
                    drop_at = Some(j);
                }
            }
            let zn = z.dot(&np);
            let t2 = if zn <= ZERO_TOL { f64::INFINITY } else { (-s_p / zn).max(0.0) };
            let t = t1.min(t2);
            if !t.is_finite() {
                return Ok(QpOutcome::Infeasible);
            }
            if t2.is_finite() {
                y += &z * t;
            }
            for (j, uj) in u.iter_mut().enumerate() {
                *uj -= t * r[j];
            }
            u_plus += t;
            if t2 <= t1 {
                active.push(p);
                u.push(u_plus);
                break;
            }
            let j = drop_at.expect("finite partial step has an index");
            active.remove(j);
            u.remove(j);
        }
    }
}

/// Primal step direction `z = H n` and dual direction `r = N* n` for the active set.
fn directions(ginv: &Matrix, normals: &[Vector], active: &[usize], np: &Vector) -> Result<(Vector, Vector)> {
    let d = np.len();
    let q = active.len();
    if q == 0 {
        return Ok((ginv * np, Vector::zeros(0)));
    }
    let mut nmat = Matrix::zeros(d, q);
    for (j, &k) in active.iter().enumerate() {
        nmat.set_column(j, &normals[k]);
    }
    let gn = ginv * &nmat;
    let m = nmat.transpose() * &gn;
    let minv = m
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .or_else(|| m.try_inverse())
        .ok_or(Error::SolverError("qp active set became dependent"))?;
    let gnp = ginv * np;
    let r = &minv * (gn.transpose() * np);
    let z = &gnp - &gn * &r;
    Ok((z, r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lp;
    use nalgebra::{dmatrix, dvector};

    fn solve_ineq(h: &Matrix, f: &Vector, a: &Matrix, b: &Vector) -> QpOutcome {
        solve(&Qp { h, f, a, b, eq: None }).unwrap()
    }

    #[test]
    fn unconstrained_minimum() {
        let h = dmatrix![2.0, 0.0; 0.0, 4.0];
        let f = dvector![-2.0, -4.0];
        let a = Matrix::zeros(0, 2);
        let b = Vector::zeros(0);
        let p = solve_ineq(&h, &f, &a, &b);
        assert!((p.point().unwrap() - dvector![1.0, 1.0]).amax() < 1e-12);
    }

    #[test]
    fn projection_onto_halfplane() {
        // project (2, 2) onto x + y <= 1 -> (0.5, 0.5)
        let h = Matrix::identity(2, 2);
        let f = dvector![-2.0, -2.0];
        let a = dmatrix![1.0, 1.0];
        let b = dvector![1.0];
        let p = solve_ineq(&h, &f, &a, &b);
        assert!((p.point().unwrap() - dvector![0.5, 0.5]).amax() < 1e-10);
    }

    #[test]
    fn projection_onto_box_corner() {
        let h = Matrix::identity(2, 2);
        let f = dvector![-3.0, 5.0];
        let a = dmatrix![1.0, 0.0; -1.0, 0.0; 0.0, 1.0; 0.0, -1.0];
        let b = dvector![1.0, 1.0, 1.0, 1.0];
        let p = solve_ineq(&h, &f, &a, &b);
        assert!((p.point().unwrap() - dvector![1.0, -1.0]).amax() < 1e-10);
    }

    #[test]
    fn equality_and_inequality() {
        // min x^2 + y^2 + z^2 s.t. x + y + z = 3, x <= 0.5
        let h = Matrix::identity(3, 3) * 2.0;
        let f = Vector::zeros(3);
        let e = dmatrix![1.0, 1.0, 1.0];
        let ev = dvector![3.0];
        let a = dmatrix![1.0, 0.0, 0.0];
        let b = dvector![0.5];
        let out = solve(&Qp { h: &h, f: &f, a: &a, b: &b, eq: Some((&e, &ev)) }).unwrap();
        let p = out.point().unwrap();
        assert!((p - dvector![0.5, 1.25, 1.25]).amax() < 1e-10);
    }

    #[test]
    fn infeasible_system() {
        let h = Matrix::identity(1, 1);
        let f = Vector::zeros(1);
        let a = dmatrix![1.0; -1.0];
        let b = dvector![-1.0, -1.0];
        assert_eq!(solve_ineq(&h, &f, &a, &b), QpOutcome::Infeasible);
    }

    #[test]
    fn matches_lp_vertex_for_steep_linear_term() {
        // a tiny quadratic with a huge linear pull lands on the LP vertex
        let a = dmatrix![-1.0, 0.0; 0.0, -1.0; 1.0, 2.0; 3.0, 1.0];
        let b = dvector![0.0, 0.0, 4.0, 6.0];
        let c = dvector![1.0, 1.0];
        let h = Matrix::identity(2, 2) * 1e-6;
        let p = solve_ineq(&h, &(-&c), &a, &b);
        let lp_pt = lp::maximize(&a, &b, &c).unwrap();
        assert!((p.point().unwrap() - lp_pt.point().unwrap()).amax() < 1e-5);
    }

    #[test]
    fn redundant_duplicate_rows() {
        let h = Matrix::identity(2, 2);
        let f = dvector![-2.0, -2.0];
        let a = dmatrix![1.0, 1.0; 2.0, 2.0; 1.0, 1.0];
        let b = dvector![1.0, 2.0, 1.0];
        let p = solve_ineq(&h, &f, &a, &b);
        assert!((p.point().unwrap() - dvector![0.5, 0.5]).amax() < 1e-10);
    }
}
