//! Covariance propagation, chi-square quantiles and chance-constraint tightening.

use alloc::vec::Vec;

use crate::error::{dims, Error, Result};
use crate::linalg;
use crate::math;
use crate::model::{ClosedLoop, OutputMaps};
use crate::polytope::Polytope;
use crate::{Matrix, Vector};

/// Convergence threshold for the covariance recursion's fixed point.
pub const LYAPUNOV_TOL: f64 = 1e-10;
const LYAPUNOV_MAX_STEPS: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceTrajectory {
    pub sigmas: Vec<Matrix>,
}

/// `Sigma(k+1) = A Sigma(k) A^T + H_omega` for `k = 0..k_max`.
pub fn propagate_covariance(a: &Matrix, h_omega: &Matrix, sigma0: &Matrix, k_max: usize) -> Result<CovarianceTrajectory> {
    let n = linalg::ensure_square(a, "A")?;
    linalg::ensure_shape(h_omega, n, n, "H_omega")?;
    linalg::ensure_shape(sigma0, n, n, "Sigma(0)")?;
    if !linalg::is_psd(sigma0) {
        return Err(Error::NonPsdInput("Sigma(0)"));
    }
    if !linalg::is_psd(h_omega) {
        return Err(Error::NonPsdInput("H_omega"));
    }
    let mut sigmas = Vec::with_capacity(k_max + 1);
    sigmas.push(sigma0.clone());
    let at = a.transpose();
    for k in 0..k_max {
        let next = a * &sigmas[k] * &at + h_omega;
        sigmas.push(next);
    }
    Ok(CovarianceTrajectory { sigmas })
}

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = Vec::with_capacity(order);
    let mut weights = Vec::with_capacity(order);
    let nf = order as f64;
    for i in 0..order {
        let mut x = math::cos(core::f64::consts::PI * (i as f64 + 0.75) / (nf + 0.5));
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for j in 2..=order {
                let jf = j as f64;
                let p2 = ((2.0 * jf - 1.0) * x * p1 - (jf - 1.0) * p0) / jf;
                p0 = p1;
                p1 = p2;
            }
            dp = nf * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes.push(x);
        weights.push(2.0 / ((1.0 - x * x) * dp * dp));
    }
    (nodes, weights)
}

/// Chi-square CDF by quadrature. The substitution `t = s^2` turns the density
/// into the smooth integrand `2 s^(k-1) exp(-s^2/2) / (2^(k/2) Gamma(k/2))`.
pub fn chi2_cdf(x: f64, dof: usize) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let k = dof as f64;
    let log_norm = core::f64::consts::LN_2 - 0.5 * k * core::f64::consts::LN_2 - math::lgamma(0.5 * k);
    let integrand = |s: f64| -> f64 {
        if s <= 0.0 {
            return if dof == 1 { math::exp(log_norm) } else { 0.0 };
        }
        math::exp(log_norm + (k - 1.0) * math::ln(s) - 0.5 * s * s)
    };
    let upper = math::sqrt(x);
    let (nodes, weights) = gauss_legendre(20);
    let panels = (math::ceil(upper / 0.125) as usize).max(1);
    let h = upper / panels as f64;
    let mut total = 0.0;
    for p in 0..panels {
        let mid = (p as f64 + 0.5) * h;
        let half = 0.5 * h;
        let mut acc = 0.0;
        for (xi, wi) in nodes.iter().zip(weights.iter()) {
            acc += wi * integrand(mid + half * xi);
        }
        total += acc * half;
    }
    total.min(1.0)
}

/// Inverse chi-square CDF by bisection on [`chi2_cdf`].
pub fn chi2_quantile(beta: f64, dof: usize) -> Result<f64> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidProbability(beta));
    }
    if dof == 0 {
        return Err(Error::InvalidArgument("chi-square degrees of freedom must be positive".into()));
    }
    let mut lo = 0.0;
    let mut hi = 1.0;
    while chi2_cdf(hi, dof) < beta {
        lo = hi;
        hi *= 2.0;
        if hi > 1e8 {
            return Err(Error::SolverError("chi-square quantile bracket"));
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if chi2_cdf(mid, dof) < beta {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// `Gamma = F_x Sigma F_x^T + H_varsigma`.
pub fn output_covariance(f_x: &Matrix, sigma: &Matrix, h_varsigma: &Matrix) -> Matrix {
    f_x * sigma * f_x.transpose() + h_varsigma
}

/// Row-wise margins `sqrt(q a^T Gamma a)`: the support of the confidence
/// ellipsoid `{z : z^T Gamma^-1 z <= q}` in each row direction. For axis rows
/// this is `sqrt(q Gamma_ii)`.
pub fn tightening_margins(z2: &Polytope, gamma: &Matrix, quantile: f64) -> Vector {
    let n = z2.normals();
    Vector::from_iterator(
        z2.nrows(),
        (0..z2.nrows()).map(|i| {
            let a = n.row(i).transpose();
            let var = a.dot(&(gamma * &a)).max(0.0);
            math::sqrt(quantile * var)
        }),
    )
}

fn shifted(z2: &Polytope, margins: &Vector) -> Result<Polytope> {
    Polytope::new(z2.normals().clone(), z2.offsets() - margins)
}

/// `Z2 ∼ P_beta(k)` for covariance `sigma_k`.
pub fn tighten_chance_set(
    z2: &Polytope,
    f_x: &Matrix,
    sigma_k: &Matrix,
    h_varsigma: &Matrix,
    beta: f64,
) -> Result<Polytope> {
    let nc = f_x.nrows();
    if z2.dim() != nc {
        return Err(dims("Z2 dimension differs from the rows of F_x"));
    }
    linalg::ensure_shape(sigma_k, f_x.ncols(), f_x.ncols(), "Sigma(k)")?;
    linalg::ensure_shape(h_varsigma, nc, nc, "H_varsigma")?;
    let q = chi2_quantile(beta, nc.max(1))?;
    let gamma = output_covariance(f_x, sigma_k, h_varsigma);
    let out = shifted(z2, &tightening_margins(z2, &gamma, q))?;
    if out.is_empty()? {
        return Err(Error::EmptyTightenedSet);
    }
    Ok(out)
}

/// Tightened sets for `k = 0..=k_max` plus the limiting intersection.
#[derive(Debug, Clone, PartialEq)]
pub struct TightenedConstraintSequence {
    pub margins: Vec<Vector>,
    pub sets: Vec<Polytope>,
    pub limit_margins: Vector,
    pub limit: Polytope,
    /// Step at which the covariance recursion settled.
    pub k_lyap: usize,
}

impl TightenedConstraintSequence {
    /// Margins at step `k`; past the stored horizon the limit is used.
    pub fn margins_at(&self, k: usize) -> &Vector {
        self.margins.get(k).unwrap_or(&self.limit_margins)
    }
}

/// Builds the per-step tightening for `k = 0..=k_max`, extended until the
/// covariance has settled, and the limit `∩_k (Z2 ∼ P_beta(k))`. The covariance recursion is run until
/// `||Sigma(k+1) - Sigma(k)|| <= LYAPUNOV_TOL`; the limit uses, row by row, the
/// largest margin seen up to that point (for `Sigma(0) = 0` this is the fixed
/// point's margin, since the recursion is monotone).
pub fn tightened_sequence(
    z2: &Polytope,
    f_x: &Matrix,
    a: &Matrix,
    h_omega: &Matrix,
    h_varsigma: &Matrix,
    sigma0: &Matrix,
    beta: f64,
    k_max: usize,
) -> Result<TightenedConstraintSequence> {
    let nc = f_x.nrows();
    if z2.dim() != nc {
        return Err(dims("Z2 dimension differs from the rows of F_x"));
    }
    let q = chi2_quantile(beta, nc.max(1))?;
    let n = linalg::ensure_square(a, "A")?;
    linalg::ensure_shape(sigma0, n, n, "Sigma(0)")?;
    if !linalg::is_psd(sigma0) {
        return Err(Error::NonPsdInput("Sigma(0)"));
    }
    if !linalg::is_psd(h_omega) {
        return Err(Error::NonPsdInput("H_omega"));
    }
    let at = a.transpose();
    let mut sigma = sigma0.clone();
    let mut margins = Vec::with_capacity(k_max + 1);
    let mut sets = Vec::with_capacity(k_max + 1);
    let mut limit_margins = Vector::zeros(z2.nrows());
    let mut k = 0;
    let mut k_lyap = None;
    loop {
        let m = tightening_margins(z2, &output_covariance(f_x, &sigma, h_varsigma), q);
        for i in 0..m.len() {
            limit_margins[i] = limit_margins[i].max(m[i]);
        }
        if k <= k_max || k_lyap.is_none() {
            sets.push(shifted(z2, &m)?);
            margins.push(m);
        }
        let next = a * &sigma * &at + h_omega;
        let delta = (&next - &sigma).amax();
        sigma = next;
        if k_lyap.is_none() && delta <= LYAPUNOV_TOL {
            k_lyap = Some(k + 1);
        }
        if k_lyap.is_some() && k >= k_max {
            // one last margin at the settled covariance
            let m = tightening_margins(z2, &output_covariance(f_x, &sigma, h_varsigma), q);
            for i in 0..m.len() {
                limit_margins[i] = limit_margins[i].max(m[i]);
            }
            break;
        }
        k += 1;
        if k > LYAPUNOV_MAX_STEPS {
            return Err(Error::SolverError("covariance recursion did not settle"));
        }
    }
    let limit = shifted(z2, &limit_margins)?;
    if limit.is_empty()? {
        return Err(Error::EmptyTightenedSet);
    }
    Ok(TightenedConstraintSequence { margins, sets, limit_margins, limit, k_lyap: k_lyap.unwrap_or(0) })
}

/// Noise-free predictions `x̂(k|t)`, `ẑ1(k|t)`, `ẑ2(k|t)` for `k = 0..=k_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub x: Vec<Vector>,
    pub z1: Vec<Vector>,
    pub z2: Vec<Vector>,
}

/// Rolls the closed loop forward from `x_t` with `v(t+k) = v_seq[k]`, the last
/// entry held beyond the sequence's length.
pub fn split_prediction(
    sys: &ClosedLoop,
    maps: &OutputMaps,
    x_t: &Vector,
    v_seq: &[Vector],
    k_max: usize,
) -> Result<Prediction> {
    let n = sys.n();
    let m = sys.m();
    linalg::ensure_len(x_t, n, "x_t")?;
    if v_seq.is_empty() {
        return Err(dims("split_prediction needs at least one reference value"));
    }
    for v in v_seq {
        linalg::ensure_len(v, m, "v")?;
    }
    let mut x = Vec::with_capacity(k_max + 1);
    let mut z1 = Vec::with_capacity(k_max + 1);
    let mut z2 = Vec::with_capacity(k_max + 1);
    let mut xk = x_t.clone();
    for k in 0..=k_max {
        let v = &v_seq[k.min(v_seq.len() - 1)];
        z1.push(&maps.lx * &xk + &maps.lv * v);
        z2.push(&maps.fx * &xk + &maps.fv * v);
        let next = &sys.a * &xk + &sys.b * v;
        x.push(xk);
        xk = next;
    }
    Ok(Prediction { x, z1, z2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};
    use proptest::prelude::*;

    /// Regularized lower incomplete gamma P(a, x): series below a + 1,
    /// Lentz continued fraction above.
    fn gamma_p(a: f64, x: f64) -> f64 {
        if x <= 0.0 {
            return 0.0;
        }
        let gln = libm::lgamma(a);
        if x < a + 1.0 {
            let mut ap = a;
            let mut sum = 1.0 / a;
            let mut del = sum;
            for _ in 0..10_000 {
                ap += 1.0;
                del *= x / ap;
                sum += del;
                if del.abs() < sum.abs() * 1e-17 {
                    break;
                }
            }
            sum * libm::exp(-x + a * libm::log(x) - gln)
        } else {
            let tiny = 1e-300;
            let mut b = x + 1.0 - a;
            let mut c = 1.0 / tiny;
            let mut d = 1.0 / b;
            let mut h = d;
            for i in 1..10_000 {
                let an = -(i as f64) * (i as f64 - a);
                b += 2.0;
                d = an * d + b;
                if d.abs() < tiny {
                    d = tiny;
                }
                c = b + an / c;
                if c.abs() < tiny {
                    c = tiny;
                }
                d = 1.0 / d;
                let del = d * c;
                h *= del;
                if (del - 1.0).abs() < 1e-17 {
                    break;
                }
            }
            1.0 - libm::exp(-x + a * libm::log(x) - gln) * h
        }
    }

    fn chi2_cdf_oracle(x: f64, dof: usize) -> f64 {
        gamma_p(0.5 * dof as f64, 0.5 * x)
    }

    #[test]
    fn covariance_recursion_examples() {
        let a = dmatrix![0.5];
        let h = dmatrix![1.0];
        let tr = propagate_covariance(&a, &h, &dmatrix![0.0], 200).unwrap();
        assert_eq!(tr.sigmas[1][(0, 0)], 1.0);
        assert_eq!(tr.sigmas[2][(0, 0)], 1.25);
        assert!((tr.sigmas[200][(0, 0)] - 4.0 / 3.0).abs() < 1e-12);
        let tr0 = propagate_covariance(&a, &dmatrix![0.0], &dmatrix![0.0], 10).unwrap();
        assert!(tr0.sigmas.iter().all(|s| s[(0, 0)] == 0.0));
        assert!(matches!(
            propagate_covariance(&a, &h, &dmatrix![-1.0], 3),
            Err(Error::NonPsdInput(_))
        ));
    }

    #[test]
    fn chi2_quantile_known_values() {
        let q1 = chi2_quantile(0.95, 1).unwrap();
        assert!((q1 - 3.841458820694124).abs() < 1e-9);
        let q2 = chi2_quantile(0.95, 2).unwrap();
        assert!((q2 - (-2.0 * libm::log(0.05))).abs() < 1e-9);
        assert!(chi2_quantile(1e-12, 3).unwrap() < 1e-6);
        assert!(matches!(chi2_quantile(1.0, 2), Err(Error::InvalidProbability(_))));
        assert!(matches!(chi2_quantile(0.0, 2), Err(Error::InvalidProbability(_))));
    }

    #[test]
    fn chi2_quantile_against_incomplete_gamma() {
        for dof in 1..=8 {
            for &beta in &[0.01, 0.1, 0.5, 0.9, 0.95, 0.99, 0.999] {
                let x = chi2_quantile(beta, dof).unwrap();
                let f = chi2_cdf_oracle(x, dof);
                assert!(((f - beta) / beta).abs() < 1e-10, "dof {dof} beta {beta}: F = {f}");
            }
        }
    }

    #[test]
    fn tightening_examples() {
        let z2 = Polytope::symmetric_box(&[5.0]).unwrap();
        let fx = dmatrix![1.0];
        let same = tighten_chance_set(&z2, &fx, &dmatrix![0.0], &dmatrix![0.0], 0.95).unwrap();
        assert_eq!(same.offsets(), z2.offsets());
        let t = tighten_chance_set(&z2, &fx, &dmatrix![1.0], &dmatrix![0.0], 0.95).unwrap();
        let expect = 5.0 - libm::sqrt(3.841458820694124);
        assert!((t.offsets()[0] - expect).abs() < 1e-9);
        assert!((expect - 3.0400).abs() < 1e-4);
        let t99 = tighten_chance_set(&z2, &fx, &dmatrix![1.0], &dmatrix![0.0], 0.99).unwrap();
        assert!(t99.is_subset_of(&t).unwrap());
        assert!(matches!(
            tighten_chance_set(&z2, &fx, &dmatrix![100.0], &dmatrix![0.0], 0.95),
            Err(Error::EmptyTightenedSet)
        ));
    }

    #[test]
    fn limit_is_fixed_point_margin() {
        let z2 = Polytope::symmetric_box(&[5.0]).unwrap();
        let seq = tightened_sequence(
            &z2,
            &dmatrix![1.0],
            &dmatrix![0.5],
            &dmatrix![0.1],
            &dmatrix![0.0],
            &dmatrix![0.0],
            0.95,
            5,
        )
        .unwrap();
        let q = chi2_quantile(0.95, 1).unwrap();
        let fixed = libm::sqrt(q * 0.1 / 0.75);
        assert!((seq.limit_margins[0] - fixed).abs() < 1e-9);
        for s in &seq.sets {
            assert!(seq.limit.is_subset_of(s).unwrap());
            assert!(s.is_subset_of(&z2).unwrap());
        }
        assert_eq!(seq.sets.len(), 5.max(seq.k_lyap - 1) + 1);
        assert!(seq.k_lyap > 6);
    }

    #[test]
    fn prediction_examples() {
        let sys = ClosedLoop { a: dmatrix![0.5], b: dmatrix![0.5] };
        let maps = OutputMaps { lx: dmatrix![1.0], lv: dmatrix![0.0], fx: dmatrix![1.0], fv: dmatrix![0.0] };
        let p = split_prediction(&sys, &maps, &dvector![0.0], &[dvector![1.0]], 60).unwrap();
        assert_eq!(p.x[1][0], 0.5);
        assert_eq!(p.x[2][0], 0.75);
        assert!((p.x[60][0] - 1.0).abs() < 1e-12);
        let zero = split_prediction(&sys, &maps, &dvector![0.0], &[dvector![0.0]], 5).unwrap();
        assert!(zero.z1.iter().all(|z| z[0] == 0.0));
        let x0 = dvector![0.3];
        let one = split_prediction(&sys, &maps, &x0, &[dvector![0.7]], 1).unwrap();
        assert_eq!(one.x[1], &sys.a * &x0 + &sys.b * dvector![0.7]);
    }

    /// Monte Carlo check of the chance-constraint guarantee on the noise-driven model.
    #[test]
    fn tightening_covers_noise_driven_output() {
        use rand_chacha::rand_core::{RngCore, SeedableRng};
        let a = dmatrix![0.6, 0.2; -0.1, 0.7];
        let h = dmatrix![0.3, 0.05; 0.05, 0.2];
        let fx = dmatrix![1.0, 0.0; 0.5, 1.0];
        let hs = dmatrix![0.02, 0.0; 0.0, 0.02];
        let z2 = Polytope::symmetric_box(&[4.0, 4.0]).unwrap();
        let beta = 0.9;
        let seq = tightened_sequence(&z2, &fx, &a, &h, &hs, &Matrix::zeros(2, 2), beta, 6).unwrap();
        let fh = crate::linalg::psd_factor(&h).unwrap();
        let fs = crate::linalg::psd_factor(&hs).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut gauss = || {
            let u1 = ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64);
            let u2 = ((rng.next_u64() >> 11) as f64) * (1.0 / (1u64 << 53) as f64);
            libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
        };
        let trials = 10_000;
        let mut inside = [0usize; 7];
        for _ in 0..trials {
            let mut x = Vector::zeros(2);
            for k in 0..=6 {
                let s = &fs * dvector![gauss(), gauss()];
                let z = &fx * &x + s;
                // the deviation must stay inside the margins for every row
                let ok = (0..z2.nrows()).all(|i| z2.normals().row(i).transpose().dot(&z) <= seq.margins[k][i]);
                if ok {
                    inside[k] += 1;
                }
                let w = &fh * dvector![gauss(), gauss()];
                x = &a * &x + w;
            }
        }
        for k in 0..=6 {
            let freq = inside[k] as f64 / trials as f64;
            assert!(freq >= beta - 0.02, "step {k}: coverage {freq}");
        }
    }

    proptest! {
        #[test]
        fn tightening_is_antitone(b1 in 0.5..0.98f64, db in 0.001..0.019f64, g in 0.0..0.5f64, dg in 0.0..0.5f64) {
            let z2 = Polytope::symmetric_box(&[5.0, 3.0]).unwrap();
            let fx = Matrix::identity(2, 2);
            let s1 = Matrix::identity(2, 2) * g;
            let s2 = Matrix::identity(2, 2) * (g + dg);
            let hz = Matrix::zeros(2, 2);
            let lo = tighten_chance_set(&z2, &fx, &s1, &hz, b1).unwrap();
            let hi_beta = tighten_chance_set(&z2, &fx, &s1, &hz, b1 + db).unwrap();
            let hi_var = tighten_chance_set(&z2, &fx, &s2, &hz, b1).unwrap();
            prop_assert!(hi_beta.offsets().iter().zip(lo.offsets().iter()).all(|(a, b)| a <= b));
            prop_assert!(hi_var.offsets().iter().zip(lo.offsets().iter()).all(|(a, b)| a <= b));
        }

        #[test]
        fn prediction_composes(x0 in -2.0..2.0f64, v in -1.0..1.0f64, j in 0usize..5, k in 0usize..5) {
            let sys = ClosedLoop { a: dmatrix![0.8, 0.1; 0.0, 0.6], b: dmatrix![0.2; 0.4] };
            let maps = OutputMaps { lx: dmatrix![1.0, 0.0], lv: dmatrix![0.0], fx: dmatrix![0.0, 1.0], fv: dmatrix![0.0] };
            let vs = [dvector![v]];
            let full = split_prediction(&sys, &maps, &dvector![x0, -x0], &vs, j + k).unwrap();
            let mid = split_prediction(&sys, &maps, &full.x[j], &vs, k).unwrap();
            prop_assert!((&full.x[j + k] - &mid.x[k]).amax() < 1e-12);
        }
    }
}
