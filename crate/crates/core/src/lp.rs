//! Dense linear programming over halfspace systems.
//!
//! Solves `max c^T y  s.t.  A y <= b` with `y` free. The solver works on the dual
//! `min b^T l  s.t.  A^T l = c, l >= 0` with a revised simplex whose basis holds
//! `dim` rows of `A`. Every row is normalized to unit length and the system is
//! closed by a far bounding box, so the box rows give a dual-feasible starting
//! basis and no phase one is needed. A box row carrying a positive multiplier at
//! the optimum means the original program is unbounded.
//!
//! Each pivot brings in the most violated row at the current basic point, so on
//! these problems (few variables, many rows) the solver behaves like a cutting
//! plane method and typically terminates after a small multiple of `dim` pivots.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{dims, Error, Result};
use crate::math;
use crate::{Matrix, Vector};

/// Primal feasibility tolerance on normalized rows.
pub const FEAS_TOL: f64 = 1e-9;
const PIVOT_TOL: f64 = 1e-9;
const DUAL_TOL: f64 = 1e-9;
const REFACTOR_EVERY: usize = 20;
const BLAND_AFTER: usize = 40;

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { point: Vector, value: f64 },
    Infeasible,
    Unbounded,
}

impl LpOutcome {
    pub fn point(&self) -> Option<&Vector> {
        match self {
            LpOutcome::Optimal { point, .. } => Some(point),
            _ => None,
        }
    }
}

/// Normalized copy of a halfspace system with degenerate rows resolved.
struct Rows {
    a: Matrix,
    b: Vector,
    /// Set when a zero row has a negative offset.
    trivially_infeasible: bool,
}

fn normalize(a: &Matrix, b: &Vector) -> Rows {
    let d = a.ncols();
    let mut keep = Vec::with_capacity(a.nrows());
    let mut infeasible = false;
    for i in 0..a.nrows() {
        let norm = math::sqrt(a.row(i).iter().map(|x| x * x).sum::<f64>());
        if norm <= 1e-14 {
            if b[i] < -FEAS_TOL {
                infeasible = true;
            }
            continue;
        }
        keep.push((i, norm));
    }
    let mut an = Matrix::zeros(keep.len(), d);
    let mut bn = Vector::zeros(keep.len());
    for (r, &(i, norm)) in keep.iter().enumerate() {
        for j in 0..d {
            an[(r, j)] = a[(i, j)] / norm;
        }
        bn[r] = b[i] / norm;
    }
    Rows { a: an, b: bn, trivially_infeasible: infeasible }
}

/// `max c^T y` subject to `a y <= b`.
pub fn maximize(a: &Matrix, b: &Vector, c: &Vector) -> Result<LpOutcome> {
    if a.nrows() != b.len() {
        return Err(dims("lp: rows of A and length of b differ"));
    }
    if a.ncols() != c.len() {
        return Err(dims("lp: columns of A and length of c differ"));
    }
    let rows = normalize(a, b);
    if rows.trivially_infeasible {
        return Ok(LpOutcome::Infeasible);
    }
    let d = c.len();
    if d == 0 {
        return Ok(LpOutcome::Optimal { point: Vector::zeros(0), value: 0.0 });
    }
    if c.amax() == 0.0 {
        return Ok(match solve_feasibility(&rows)? {
            Some(point) => LpOutcome::Optimal { point, value: 0.0 },
            None => LpOutcome::Infeasible,
        });
    }
    let (solver, status) = solve(&rows, c)?;
    match status {
        Status::Infeasible => Ok(LpOutcome::Infeasible),
        Status::Optimal => {
            if solver.box_binding() {
                return Ok(LpOutcome::Unbounded);
            }
            let y = solver.point();
            let value = c.dot(&y);
            Ok(LpOutcome::Optimal { point: y, value })
        }
    }
}

/// Runs the simplex, falling back to Bland's rule throughout and then to a
/// slightly perturbed objective when the basis degrades numerically.
fn solve<'a>(rows: &'a Rows, c: &'a Vector) -> Result<(DualSimplex<'a>, Status)> {
    let mut solver = DualSimplex::new(&rows.a, &rows.b, c);
    match solver.run(false) {
        Ok(s) => return Ok((solver, s)),
        Err(Error::SolverError(_)) => {}
        Err(e) => return Err(e),
    }
    let mut solver = DualSimplex::new(&rows.a, &rows.b, c);
    match solver.run(true) {
        Ok(s) => Ok((solver, s)),
        Err(Error::SolverError(_)) => {
            // the perturbed optimum is kept: its objective gap is O(1e-7 |c|)
            let scale = 1e-7 * c.amax().max(1e-12);
            let pc = c + irregular(c.len()) * scale;
            let mut solver = DualSimplex::new(&rows.a, &rows.b, &pc);
            let s = solver.run(false)?;
            let mut out = DualSimplex::new(&rows.a, &rows.b, c);
            out.basis = solver.basis;
            out.in_basis = solver.in_basis;
            out.binv = solver.binv;
            Ok((out, s))
        }
        Err(e) => Err(e),
    }
}

/// Fixed objective with irregular, nonzero entries.
fn irregular(d: usize) -> Vector {
    Vector::from_iterator(d, (0..d).map(|j| {
        let f = (j as f64 + 1.0) * 0.618_033_988_749_895;
        let f = f - math::floor(f);
        if j % 2 == 0 { 0.5 + f } else { -0.5 - f }
    }))
}

fn solve_feasibility(rows: &Rows) -> Result<Option<Vector>> {
    let c = irregular(rows.a.ncols());
    let (solver, status) = solve(rows, &c)?;
    Ok(match status {
        Status::Infeasible => None,
        Status::Optimal => Some(solver.point()),
    })
}

/// `min c^T y` subject to `a y <= b`.
pub fn minimize(a: &Matrix, b: &Vector, c: &Vector) -> Result<LpOutcome> {
    Ok(match maximize(a, b, &(-c))? {
        LpOutcome::Optimal { point, value } => LpOutcome::Optimal { point, value: -value },
        other => other,
    })
}

/// A point of `{y : a y <= b}` or `None` when the system is infeasible.
///
/// A zero objective makes every dual pivot degenerate, so the search runs
/// under a fixed irregular objective and keeps the optimum even when the
/// bounding box is active there.
pub fn feasible_point(a: &Matrix, b: &Vector) -> Result<Option<Vector>> {
    if a.nrows() != b.len() {
        return Err(dims("lp: rows of A and length of b differ"));
    }
    let rows = normalize(a, b);
    if rows.trivially_infeasible {
        return Ok(None);
    }
    let d = a.ncols();
    if d == 0 {
        return Ok(Some(Vector::zeros(0)));
    }
    solve_feasibility(&rows)
}

enum Status {
    Optimal,
    Infeasible,
}

struct DualSimplex<'a> {
    a: &'a Matrix,
    b: &'a Vector,
    c: &'a Vector,
    dim: usize,
    m: usize,
    box_size: f64,
    basis: Vec<usize>,
    in_basis: Vec<bool>,
    binv: Matrix,
}

impl<'a> DualSimplex<'a> {
    fn new(a: &'a Matrix, b: &'a Vector, c: &'a Vector) -> Self {
        let dim = c.len();
        let m = a.nrows();
        let bmax = b.iter().fold(1.0_f64, |acc, x| acc.max(x.abs()));
        let box_size = 1e5 * bmax;
        let mut basis = Vec::with_capacity(dim);
        let mut binv = Matrix::zeros(dim, dim);
        for j in 0..dim {
            if c[j] >= 0.0 {
                basis.push(m + 2 * j);
                binv[(j, j)] = 1.0;
            } else {
                basis.push(m + 2 * j + 1);
                binv[(j, j)] = -1.0;
            }
        }
        let mut in_basis = vec![false; m + 2 * dim];
        for &k in &basis {
            in_basis[k] = true;
        }
        DualSimplex { a, b, c, dim, m, box_size, basis, in_basis, binv }
    }

    fn row(&self, k: usize) -> Vector {
        if k < self.m {
            self.a.row(k).transpose()
        } else {
            let j = (k - self.m) / 2;
            let mut e = Vector::zeros(self.dim);
            e[j] = if (k - self.m) % 2 == 0 { 1.0 } else { -1.0 };
            e
        }
    }

    fn rhs(&self, k: usize) -> f64 {
        if k < self.m {
            self.b[k]
        } else {
            self.box_size
        }
    }

    fn basic_rhs(&self) -> Vector {
        Vector::from_iterator(self.dim, self.basis.iter().map(|&k| self.rhs(k)))
    }

    fn point(&self) -> Vector {
        &self.binv * self.basic_rhs()
    }

    fn multipliers(&self) -> Vector {
        self.binv.transpose() * self.c
    }

    fn box_binding(&self) -> bool {
        let lam = self.multipliers();
        self.basis
            .iter()
            .zip(lam.iter())
            .any(|(&k, &l)| k >= self.m && l > DUAL_TOL * (1.0 + self.c.amax()))
    }

    fn refactor(&mut self) -> Result<()> {
        let mut mat = Matrix::zeros(self.dim, self.dim);
        for (r, &k) in self.basis.iter().enumerate() {
            mat.set_row(r, &self.row(k).transpose());
        }
        self.binv = mat.try_inverse().ok_or(Error::SolverError("singular simplex basis"))?;
        Ok(())
    }

    /// Largest violation among nonbasic rows; Bland mode picks the lowest index instead.
    fn price(&self, y: &Vector, bland: bool) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for k in 0..self.m + 2 * self.dim {
            if self.in_basis[k] {
                continue;
            }
            let lhs = if k < self.m {
                self.a.row(k).transpose().dot(y)
            } else {
                let j = (k - self.m) / 2;
                if (k - self.m) % 2 == 0 { y[j] } else { -y[j] }
            };
            let viol = lhs - self.rhs(k);
            if viol > FEAS_TOL * (1.0 + self.rhs(k).abs().min(1e3)) {
                if bland {
                    return Some(k);
                }
                if best.map_or(true, |(_, v)| viol > v) {
                    best = Some((k, viol));
                }
            }
        }
        best.map(|(k, _)| k)
    }

    /// Two-pass ratio test: bound the step with a small dual slack, then take
    /// the largest pivot among the rows that fit under that bound.
    fn ratio_harris(&self, lam: &Vector, w: &Vector) -> Option<(usize, f64, f64)> {
        let wmax = w.amax().max(1.0);
        let slack = DUAL_TOL * (1.0 + self.c.amax());
        let mut bound = f64::INFINITY;
        for r in 0..self.dim {
            if w[r] > PIVOT_TOL * wmax {
                bound = bound.min((lam[r].max(0.0) + slack) / w[r]);
            }
        }
        if !bound.is_finite() {
            return self.ratio_bland(lam, w);
        }
        let mut best: Option<(usize, f64, f64)> = None;
        for r in 0..self.dim {
            if w[r] <= PIVOT_TOL * wmax {
                continue;
            }
            let ratio = lam[r].max(0.0) / w[r];
            if ratio <= bound && best.map_or(true, |(_, _, bw)| w[r] > bw) {
                best = Some((r, ratio, w[r]));
            }
        }
        best
    }

    fn ratio_bland(&self, lam: &Vector, w: &Vector) -> Option<(usize, f64, f64)> {
        let mut leave: Option<(usize, f64, f64)> = None;
        for r in 0..self.dim {
            if w[r] <= PIVOT_TOL {
                continue;
            }
            let ratio = lam[r].max(0.0) / w[r];
            let better = match leave {
                None => true,
                Some((lr, best, _)) => {
                    ratio < best - 1e-14 || (ratio <= best + 1e-14 && self.basis[r] < self.basis[lr])
                }
            };
            if better {
                leave = Some((r, ratio, w[r]));
            }
        }
        leave
    }

    fn run(&mut self, always_bland: bool) -> Result<Status> {
        let max_iter = 50 * (self.m + 2 * self.dim) + 1000;
        let mut since_refactor = 0;
        let mut degenerate_run = 0;
        for _ in 0..max_iter {
            let y = self.point();
            let bland = always_bland || degenerate_run >= BLAND_AFTER;
            let Some(enter) = self.price(&y, bland) else {
                return Ok(Status::Optimal);
            };
            let lam = self.multipliers();
            let w = self.binv.transpose() * self.row(enter);
            let leave = if bland { self.ratio_bland(&lam, &w) } else { self.ratio_harris(&lam, &w) };
            let Some((r, ratio, wr)) = leave else {
                return Ok(Status::Infeasible);
            };
            if ratio <= 1e-14 {
                degenerate_run += 1;
            } else {
                degenerate_run = 0;
            }
            // Row replacement in the basis matrix: rank-one update of its inverse.
            let col = self.binv.column(r).clone_owned();
            let mut u = w.clone();
            u[r] -= 1.0;
            self.binv -= (col * u.transpose()) / wr;
            self.in_basis[self.basis[r]] = false;
            self.basis[r] = enter;
            self.in_basis[enter] = true;
            since_refactor += 1;
            if since_refactor >= REFACTOR_EVERY {
                self.refactor()?;
                since_refactor = 0;
            }
        }
        Err(Error::SolverError("simplex iteration limit"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn unit_box(d: usize) -> (Matrix, Vector) {
        let mut a = Matrix::zeros(2 * d, d);
        for j in 0..d {
            a[(2 * j, j)] = 1.0;
            a[(2 * j + 1, j)] = -1.0;
        }
        (a, Vector::from_element(2 * d, 1.0))
    }

    #[test]
    fn box_corner() {
        let (a, b) = unit_box(3);
        let out = maximize(&a, &b, &dvector![1.0, -2.0, 0.5]).unwrap();
        let LpOutcome::Optimal { point, value } = out else { panic!() };
        assert!((value - 3.5).abs() < 1e-9);
        assert!((point - dvector![1.0, -1.0, 1.0]).amax() < 1e-9);
    }

    #[test]
    fn triangle_optimum() {
        // x >= 0, y >= 0, x + 2y <= 4, 3x + y <= 6 ; max x + y -> (1.6, 1.2)
        let a = dmatrix![-1.0, 0.0; 0.0, -1.0; 1.0, 2.0; 3.0, 1.0];
        let b = dvector![0.0, 0.0, 4.0, 6.0];
        let out = maximize(&a, &b, &dvector![1.0, 1.0]).unwrap();
        let p = out.point().unwrap();
        assert!((p - dvector![1.6, 1.2]).amax() < 1e-9);
    }

    #[test]
    fn detects_infeasible() {
        let a = dmatrix![1.0; -1.0];
        let b = dvector![0.0, -1.0];
        assert_eq!(maximize(&a, &b, &dvector![1.0]).unwrap(), LpOutcome::Infeasible);
        assert!(feasible_point(&a, &b).unwrap().is_none());
    }

    #[test]
    fn detects_unbounded() {
        let a = dmatrix![-1.0, 0.0; 0.0, -1.0];
        let b = dvector![0.0, 0.0];
        assert_eq!(maximize(&a, &b, &dvector![1.0, 0.0]).unwrap(), LpOutcome::Unbounded);
        // bounded direction over the same cone
        let out = maximize(&a, &b, &dvector![-1.0, -1.0]).unwrap();
        assert!(matches!(out, LpOutcome::Optimal { value, .. } if value.abs() < 1e-9));
    }

    #[test]
    fn zero_rows_are_screened() {
        let a = dmatrix![0.0, 0.0; 1.0, 0.0; -1.0, 0.0; 0.0, 1.0; 0.0, -1.0];
        let b = dvector![-1.0, 1.0, 1.0, 1.0, 1.0];
        assert_eq!(maximize(&a, &b, &dvector![1.0, 0.0]).unwrap(), LpOutcome::Infeasible);
    }

    #[test]
    fn degenerate_vertex() {
        // Many constraints through the same optimal vertex (1, 1).
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        for k in 0..20 {
            let t = k as f64 / 19.0;
            rows.extend_from_slice(&[t, 1.0 - t]);
            rhs.push(1.0);
        }
        rows.extend_from_slice(&[-1.0, 0.0, 0.0, -1.0]);
        rhs.extend_from_slice(&[0.0, 0.0]);
        let a = Matrix::from_row_slice(22, 2, &rows);
        let b = Vector::from_vec(rhs);
        let out = maximize(&a, &b, &dvector![1.0, 1.0]).unwrap();
        let p = out.point().unwrap();
        assert!((p - dvector![1.0, 1.0]).amax() < 1e-9);
    }
}
