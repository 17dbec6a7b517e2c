//! Convex polyhedra in halfspace form `{y : N y <= c}`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{dims, Error, Result};
use crate::lp::{self, LpOutcome};
use crate::math;
use crate::{Matrix, Vector};

/// Membership tolerance of [`Polytope::contains`].
pub const CONTAINS_TOL: f64 = 1e-9;
/// Inclusion, redundancy and witness tolerance.
pub const INCLUSION_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    normals: Matrix,
    offsets: Vector,
}

/// Result of a feasibility query; `point` is set exactly when `feasible`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeasibilityWitness {
    pub feasible: bool,
    pub point: Option<Vector>,
}

impl FeasibilityWitness {
    fn infeasible() -> Self {
        FeasibilityWitness { feasible: false, point: None }
    }
}

impl Polytope {
    pub fn new(normals: Matrix, offsets: Vector) -> Result<Self> {
        if normals.nrows() != offsets.len() {
            return Err(dims(format!(
                "polytope has {} normals but {} offsets",
                normals.nrows(),
                offsets.len()
            )));
        }
        if !normals.iter().chain(offsets.iter()).all(|x| x.is_finite()) {
            return Err(Error::InvalidArgument("polytope entries must be finite".into()));
        }
        Ok(Polytope { normals, offsets })
    }

    /// The whole space `R^dim` (no rows).
    pub fn universe(dim: usize) -> Self {
        Polytope { normals: Matrix::zeros(0, dim), offsets: Vector::zeros(0) }
    }

    /// `{y : lo <= y <= hi}`.
    pub fn from_box(lo: &Vector, hi: &Vector) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(dims("box bounds differ in length"));
        }
        let d = lo.len();
        let mut n = Matrix::zeros(2 * d, d);
        let mut c = Vector::zeros(2 * d);
        for j in 0..d {
            n[(2 * j, j)] = 1.0;
            c[2 * j] = hi[j];
            n[(2 * j + 1, j)] = -1.0;
            c[2 * j + 1] = -lo[j];
        }
        Polytope::new(n, c)
    }

    /// `{y : |y_j| <= bound_j}`.
    pub fn symmetric_box(bounds: &[f64]) -> Result<Self> {
        let hi = Vector::from_column_slice(bounds);
        Polytope::from_box(&(-&hi), &hi)
    }

    pub fn dim(&self) -> usize {
        self.normals.ncols()
    }

    pub fn nrows(&self) -> usize {
        self.normals.nrows()
    }

    pub fn normals(&self) -> &Matrix {
        &self.normals
    }

    pub fn offsets(&self) -> &Vector {
        &self.offsets
    }

    pub fn row_norm(&self, i: usize) -> f64 {
        math::sqrt(self.normals.row(i).iter().map(|x| x * x).sum::<f64>())
    }

    /// Row concatenation.
    pub fn intersect(&self, other: &Polytope) -> Result<Polytope> {
        if self.dim() != other.dim() {
            return Err(dims(format!("intersect: dimensions {} and {}", self.dim(), other.dim())));
        }
        let r = self.nrows() + other.nrows();
        let mut n = Matrix::zeros(r, self.dim());
        n.view_mut((0, 0), (self.nrows(), self.dim())).copy_from(&self.normals);
        n.view_mut((self.nrows(), 0), (other.nrows(), self.dim())).copy_from(&other.normals);
        let mut c = Vector::zeros(r);
        c.rows_mut(0, self.nrows()).copy_from(&self.offsets);
        c.rows_mut(self.nrows(), other.nrows()).copy_from(&other.offsets);
        Ok(Polytope { normals: n, offsets: c })
    }

    /// Appends rows `a y <= b`.
    pub fn with_rows(&self, a: &Matrix, b: &Vector) -> Result<Polytope> {
        self.intersect(&Polytope::new(a.clone(), b.clone())?)
    }

    /// Pontryagin difference with the Euclidean ball of radius `eps`.
    pub fn shrink_by_ball(&self, eps: f64) -> Polytope {
        let mut c = self.offsets.clone();
        for i in 0..self.nrows() {
            c[i] -= eps * self.row_norm(i);
        }
        Polytope { normals: self.normals.clone(), offsets: c }
    }

    pub fn contains(&self, y: &Vector) -> Result<bool> {
        if y.len() != self.dim() {
            return Err(dims(format!("contains: point of length {} in dimension {}", y.len(), self.dim())));
        }
        Ok(self.max_violation(y) <= CONTAINS_TOL)
    }

    /// Largest `N y - c` entry (negative when strictly inside).
    pub fn max_violation(&self, y: &Vector) -> f64 {
        let s = &self.normals * y - &self.offsets;
        s.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_empty(&self) -> Result<bool> {
        Ok(lp::feasible_point(&self.normals, &self.offsets)?.is_none())
    }

    /// `max a^T y` over the set; `Ok(None)` for an empty set, `UnboundedSet` when unbounded.
    pub fn support(&self, a: &Vector) -> Result<Option<(f64, Vector)>> {
        if a.len() != self.dim() {
            return Err(dims("support direction length"));
        }
        match lp::maximize(&self.normals, &self.offsets, a)? {
            LpOutcome::Optimal { point, value } => Ok(Some((value, point))),
            LpOutcome::Infeasible => Ok(None),
            LpOutcome::Unbounded => Err(Error::UnboundedSet),
        }
    }

    /// `self ⊆ other`, decided row by row on `other` with one LP each.
    pub fn is_subset_of(&self, other: &Polytope) -> Result<bool> {
        if self.dim() != other.dim() {
            return Err(dims("inclusion: dimensions differ"));
        }
        if self.is_empty()? {
            return Ok(true);
        }
        for i in 0..other.nrows() {
            let a = other.normals.row(i).transpose();
            let scale = other.row_norm(i).max(1e-300);
            match self.support(&a)? {
                Some((value, _)) => {
                    if (value - other.offsets[i]) / scale > INCLUSION_TOL {
                        return Ok(false);
                    }
                }
                None => return Ok(true),
            }
        }
        Ok(true)
    }

    pub fn set_equal(&self, other: &Polytope) -> Result<bool> {
        Ok(self.is_subset_of(other)? && other.is_subset_of(self)?)
    }

    /// Drops rows implied by the others. Each kept row is tested against the
    /// rows kept so far plus those not yet visited.
    pub fn remove_redundant(&self) -> Result<Polytope> {
        let r = self.nrows();
        let mut keep: Vec<bool> = (0..r).map(|i| self.row_norm(i) > 0.0 || self.offsets[i] < 0.0).collect();
        for i in 0..r {
            if !keep[i] {
                continue;
            }
            keep[i] = false;
            let rest = self.select(&keep);
            let a = self.normals.row(i).transpose();
            let scale = self.row_norm(i).max(1e-300);
            let redundant = match lp::maximize(rest.normals(), rest.offsets(), &a)? {
                LpOutcome::Optimal { value, .. } => (value - self.offsets[i]) / scale <= INCLUSION_TOL,
                LpOutcome::Infeasible => true,
                LpOutcome::Unbounded => false,
            };
            keep[i] = !redundant;
        }
        Ok(self.select(&keep))
    }

    fn select(&self, keep: &[bool]) -> Polytope {
        let idx: Vec<usize> = keep.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect();
        let mut n = Matrix::zeros(idx.len(), self.dim());
        let mut c = Vector::zeros(idx.len());
        for (r, &i) in idx.iter().enumerate() {
            n.set_row(r, &self.normals.row(i));
            c[r] = self.offsets[i];
        }
        Polytope { normals: n, offsets: c }
    }

    /// Decides whether some completion of the free trailing coordinates puts
    /// `(prefix, free)` in the set. Realizes projection membership without
    /// computing the projection.
    pub fn feasible_partial_fix(&self, prefix: &Vector) -> Result<FeasibilityWitness> {
        let d = self.dim();
        let p = prefix.len();
        if p > d {
            return Err(dims(format!("prefix of length {p} exceeds dimension {d}")));
        }
        if p == d {
            let ok = self.max_violation(prefix) <= INCLUSION_TOL;
            return Ok(FeasibilityWitness { feasible: ok, point: ok.then(|| prefix.clone()) });
        }
        let fixed = self.normals.columns(0, p) * prefix;
        let rhs = &self.offsets - fixed;
        let free = self.normals.columns(p, d - p).clone_owned();
        match lp::feasible_point(&free, &rhs) {
            Ok(Some(tail)) => {
                let mut point = Vector::zeros(d);
                point.rows_mut(0, p).copy_from(prefix);
                point.rows_mut(p, d - p).copy_from(&tail);
                Ok(FeasibilityWitness { feasible: true, point: Some(point) })
            }
            Ok(None) => Ok(FeasibilityWitness::infeasible()),
            Err(e) => Err(e),
        }
    }

    /// `{y : N (M y + s) <= c}` for an affine map `y -> M y + s` into this set's space.
    pub fn preimage(&self, m: &Matrix, shift: &Vector) -> Result<Polytope> {
        if m.nrows() != self.dim() || shift.len() != self.dim() {
            return Err(dims("preimage: map does not land in the polytope's space"));
        }
        let n = &self.normals * m;
        let c = &self.offsets - &self.normals * shift;
        Ok(Polytope { normals: n, offsets: c })
    }

    /// Embeds the set into a larger space, placing its coordinates at `offset`.
    pub fn lift(&self, total_dim: usize, offset: usize) -> Result<Polytope> {
        if offset + self.dim() > total_dim {
            return Err(dims("lift: target space too small"));
        }
        let mut n = Matrix::zeros(self.nrows(), total_dim);
        n.view_mut((0, offset), (self.nrows(), self.dim())).copy_from(&self.normals);
        Ok(Polytope { normals: n, offsets: self.offsets.clone() })
    }

    /// Smallest `offset / ||normal||` over the rows: the inradius about the origin.
    pub fn min_scaled_offset(&self) -> f64 {
        (0..self.nrows())
            .filter(|&i| self.row_norm(i) > 0.0)
            .map(|i| self.offsets[i] / self.row_norm(i))
            .fold(f64::INFINITY, f64::min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    fn interval(lo: f64, hi: f64) -> Polytope {
        Polytope::from_box(&dvector![lo], &dvector![hi]).unwrap()
    }

    fn unit_box(d: usize) -> Polytope {
        Polytope::symmetric_box(&alloc::vec![1.0; d]).unwrap()
    }

    #[test]
    fn intersect_examples() {
        let p = unit_box(2);
        assert!(p.intersect(&p).unwrap().set_equal(&p).unwrap());
        let i = interval(-1.0, 1.0).intersect(&interval(0.0, 2.0)).unwrap();
        assert!(i.set_equal(&interval(0.0, 1.0)).unwrap());
        let far = Polytope::from_box(&dvector![3.0, 3.0], &dvector![4.0, 4.0]).unwrap();
        assert!(p.intersect(&far).unwrap().is_empty().unwrap());
        assert!(p.intersect(&interval(0.0, 1.0)).is_err());
    }

    #[test]
    fn shrink_examples() {
        let s = unit_box(2).shrink_by_ball(0.1);
        let expect = Polytope::symmetric_box(&[0.9, 0.9]).unwrap();
        assert!(s.set_equal(&expect).unwrap());
        assert!(unit_box(2).shrink_by_ball(1.5).is_empty().unwrap());
        let p = Polytope::new(dmatrix![2.0], dvector![2.0]).unwrap().shrink_by_ball(0.1);
        assert!((p.offsets()[0] - (2.0 - 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn contains_examples() {
        let p = unit_box(2);
        assert!(p.contains(&dvector![0.0, 0.0]).unwrap());
        assert!(p.contains(&dvector![1.0, -1.0]).unwrap());
        assert!(!p.contains(&dvector![2.0, 0.0]).unwrap());
        assert!(p.contains(&dvector![0.0]).is_err());
    }

    #[test]
    fn set_equal_examples() {
        let p = unit_box(2);
        let extra = p.with_rows(&dmatrix![1.0, 1.0], &dvector![5.0]).unwrap();
        assert!(p.set_equal(&extra).unwrap());
        assert!(!interval(0.0, 1.0).set_equal(&interval(0.0, 2.0)).unwrap());
        let permuted = Polytope::new(
            dmatrix![0.0, -1.0; 1.0, 0.0; 0.0, 1.0; -1.0, 0.0],
            dvector![1.0, 1.0, 1.0, 1.0],
        )
        .unwrap();
        assert!(p.set_equal(&permuted).unwrap());
        let half = Polytope::new(dmatrix![1.0, 0.0], dvector![1.0]).unwrap();
        assert_eq!(half.is_subset_of(&p), Err(Error::UnboundedSet));
    }

    #[test]
    fn partial_fix_examples() {
        let p = unit_box(3);
        let w = p.feasible_partial_fix(&dvector![0.5]).unwrap();
        assert!(w.feasible);
        assert!(p.max_violation(w.point.as_ref().unwrap()) <= INCLUSION_TOL);
        assert!(!p.feasible_partial_fix(&dvector![1.5]).unwrap().feasible);
        assert!(p.feasible_partial_fix(&dvector![0.5, 0.5, 0.5]).unwrap().feasible);
        assert!(!p.feasible_partial_fix(&dvector![0.5, 0.5, 1.5]).unwrap().feasible);
        assert!(p.feasible_partial_fix(&Vector::zeros(0)).unwrap().feasible);
    }

    #[test]
    fn redundancy_removal_keeps_set() {
        let p = unit_box(2)
            .with_rows(&dmatrix![1.0, 1.0; 1.0, 0.0; 2.0, 0.0], &dvector![5.0, 1.0, 2.0])
            .unwrap();
        let q = p.remove_redundant().unwrap();
        assert_eq!(q.nrows(), 4);
        assert!(q.set_equal(&p).unwrap());
    }

    #[test]
    fn preimage_of_box_under_scaling() {
        let p = unit_box(1);
        let q = p.preimage(&dmatrix![2.0], &dvector![1.0]).unwrap();
        // -1 <= 2y + 1 <= 1  <=>  -1 <= y <= 0
        assert!(q.set_equal(&interval(-1.0, 0.0)).unwrap());
    }

    fn arb_box() -> impl Strategy<Value = Polytope> {
        (prop::collection::vec(-2.0..0.0f64, 2), prop::collection::vec(0.1..2.0f64, 2)).prop_map(|(lo, hi)| {
            Polytope::from_box(&Vector::from_vec(lo), &Vector::from_vec(hi)).unwrap()
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn shrink_composes(a in 0.01..0.3f64, b in 0.01..0.3f64, p in arb_box()) {
            let twice = p.shrink_by_ball(a).shrink_by_ball(b);
            let once = p.shrink_by_ball(a + b);
            prop_assert!((twice.offsets() - once.offsets()).amax() < 1e-12);
        }

        #[test]
        fn intersect_commutes_and_associates(p in arb_box(), q in arb_box(), r in arb_box()) {
            let pq = p.intersect(&q).unwrap();
            let qp = q.intersect(&p).unwrap();
            prop_assert!(pq.set_equal(&qp).unwrap());
            let left = pq.intersect(&r).unwrap();
            let right = p.intersect(&q.intersect(&r).unwrap()).unwrap();
            prop_assert!(left.set_equal(&right).unwrap());
        }

        #[test]
        fn empty_prefix_matches_nonemptiness(p in arb_box(), s in 0.0..3.0f64) {
            let q = p.shrink_by_ball(s);
            let w = q.feasible_partial_fix(&Vector::zeros(0)).unwrap();
            prop_assert_eq!(w.feasible, !q.is_empty().unwrap());
        }
    }
}
