//! Kalman filter bank, Bayesian mode posteriors and the misidentification bound.

use alloc::vec::Vec;

use nalgebra::Cholesky;

use crate::error::{dims, Error, Result};
use crate::linalg;
use crate::math;
use crate::model::{ClosedLoop, ModeGraph};
use crate::{Matrix, Vector};

pub const POSTERIOR_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One hypothesis as seen by the detector: plant `mode_id` under the gains
/// currently applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub mode_id: usize,
    pub sys: ClosedLoop,
    pub c: Matrix,
    pub h_omega: Matrix,
    pub h_xi: Matrix,
}

/// Hypotheses `{μ} ∪ successors(μ)` under the gains of `gains_mode`.
pub fn hypotheses_for(graph: &ModeGraph, believed: usize, gains_mode: usize) -> Result<Vec<Hypothesis>> {
    let gains = graph.require(gains_mode)?;
    graph
        .hypotheses(believed)
        .into_iter()
        .map(|id| {
            let plant = graph.require(id)?;
            Ok(Hypothesis {
                mode_id: id,
                sys: plant.loop_with_gains(&gains.k, &gains.g),
                c: plant.c.clone(),
                h_omega: plant.h_omega.clone(),
                h_xi: plant.h_xi.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub hypothesis_mode: usize,
    pub x_hat: Vector,
    pub p: Matrix,
    pub last_residual: Vector,
    pub last_residual_cov: Matrix,
    pub last_likelihood: f64,
    pub last_log_likelihood: f64,
}

impl FilterState {
    pub fn new(hypothesis_mode: usize, x_hat: Vector, p: Matrix, outputs: usize) -> Self {
        FilterState {
            hypothesis_mode,
            x_hat,
            p,
            last_residual: Vector::zeros(outputs),
            last_residual_cov: Matrix::zeros(outputs, outputs),
            last_likelihood: 1.0,
            last_log_likelihood: 0.0,
        }
    }
}

/// `ln N(r; 0, S)`.
pub fn gaussian_log_density(residual: &Vector, s: &Matrix) -> Result<f64> {
    let chol = Cholesky::new(s.clone()).ok_or(Error::SingularResidualCovariance)?;
    let w = chol.solve(residual);
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| math::ln(*d)).sum::<f64>();
    if !log_det.is_finite() {
        return Err(Error::SingularResidualCovariance);
    }
    Ok(-0.5 * (residual.dot(&w) + log_det + residual.len() as f64 * LN_2PI))
}

/// Predict with the hypothesis' closed loop and `v_applied`, then correct with
/// `y_meas`.
pub fn kalman_step(filter: &FilterState, hyp: &Hypothesis, v_applied: &Vector, y_meas: &Vector) -> Result<FilterState> {
    let n = hyp.sys.n();
    linalg::ensure_len(&filter.x_hat, n, "x_hat")?;
    linalg::ensure_len(v_applied, hyp.sys.m(), "v")?;
    linalg::ensure_len(y_meas, hyp.c.nrows(), "y")?;
    let a = &hyp.sys.a;
    let x_pred = a * &filter.x_hat + &hyp.sys.b * v_applied;
    let p_pred = a * &filter.p * a.transpose() + &hyp.h_omega;
    let residual = y_meas - &hyp.c * &x_pred;
    let s = &hyp.c * &p_pred * hyp.c.transpose() + &hyp.h_xi;
    let s = (&s + s.transpose()) * 0.5;
    let chol = Cholesky::new(s.clone()).ok_or(Error::SingularResidualCovariance)?;
    let log_lik = gaussian_log_density(&residual, &s)?;
    // K = P⁻ Cᵀ S⁻¹
    let pct = &p_pred * hyp.c.transpose();
    let gain = chol.solve(&pct.transpose()).transpose();
    let x_hat = &x_pred + &gain * &residual;
    // Joseph form keeps P symmetric PSD.
    let ikc = Matrix::identity(n, n) - &gain * &hyp.c;
    let p = &ikc * &p_pred * ikc.transpose() + &gain * &hyp.h_xi * gain.transpose();
    let p = (&p + p.transpose()) * 0.5;
    Ok(FilterState {
        hypothesis_mode: filter.hypothesis_mode,
        x_hat,
        p,
        last_residual: residual,
        last_residual_cov: s,
        last_likelihood: math::exp(log_lik),
        last_log_likelihood: log_lik,
    })
}

/// Clamps entries below `floor` to it and rescales the rest to keep unit sum.
pub fn apply_floor(p: &mut Vector, floor: f64) {
    let k = p.len();
    if k == 0 || floor * k as f64 >= 1.0 {
        return;
    }
    let mut clamped = alloc::vec![false; k];
    loop {
        let fixed = clamped.iter().filter(|c| **c).count() as f64 * floor;
        let free_mass: f64 = p.iter().zip(&clamped).filter(|(_, c)| !**c).map(|(v, _)| *v).sum();
        let scale = (1.0 - fixed) / free_mass;
        let mut changed = false;
        for i in 0..k {
            if clamped[i] {
                p[i] = floor;
            } else {
                p[i] *= scale;
                if p[i] < floor {
                    clamped[i] = true;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }
}

/// `p_i' ∝ p_i ℓ_i`, renormalized and floored.
pub fn posterior_update(posteriors: &Vector, likelihoods: &Vector) -> Result<Vector> {
    if posteriors.len() != likelihoods.len() {
        return Err(dims("posterior and likelihood counts differ"));
    }
    if likelihoods.iter().any(|l| !(*l >= 0.0)) {
        return Err(Error::InvalidArgument("likelihoods must be nonnegative".into()));
    }
    let mut p = posteriors.component_mul(likelihoods);
    let total: f64 = p.iter().sum();
    if !(total > 0.0) {
        return Err(Error::AllZeroLikelihoods);
    }
    p /= total;
    apply_floor(&mut p, POSTERIOR_FLOOR);
    Ok(p)
}

/// Same update from log-likelihoods with max subtraction.
pub fn posterior_update_log(posteriors: &Vector, log_likelihoods: &Vector) -> Result<Vector> {
    if posteriors.len() != log_likelihoods.len() {
        return Err(dims("posterior and likelihood counts differ"));
    }
    let scores: Vec<f64> = posteriors.iter().zip(log_likelihoods.iter()).map(|(p, l)| math::ln(*p) + l).collect();
    let top = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::AllZeroLikelihoods);
    }
    let mut p = Vector::from_iterator(scores.len(), scores.iter().map(|s| math::exp(s - top)));
    let total: f64 = p.iter().sum();
    p /= total;
    apply_floor(&mut p, POSTERIOR_FLOOR);
    Ok(p)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmaeState {
    pub filters: Vec<FilterState>,
    pub posteriors: Vector,
    pub window: usize,
    pub t_d: usize,
}

impl MmaeState {
    /// Fresh bank at an interval start: exact state, given covariance, priors.
    pub fn reset(hyps: &[Hypothesis], x: &Vector, sigma0: &Matrix, priors: &Vector, t_d: usize) -> Result<Self> {
        if priors.len() != hyps.len() {
            return Err(dims("one prior per hypothesis"));
        }
        let filters = hyps
            .iter()
            .map(|h| FilterState::new(h.mode_id, x.clone(), sigma0.clone(), h.c.nrows()))
            .collect();
        let mut posteriors = priors.clone();
        apply_floor(&mut posteriors, POSTERIOR_FLOOR);
        Ok(MmaeState { filters, posteriors, window: 0, t_d })
    }

    /// Consumes one `(v, y)` pair. The window saturates at `T_d`.
    pub fn step(&mut self, hyps: &[Hypothesis], v_applied: &Vector, y_meas: &Vector) -> Result<()> {
        let mut logs = Vector::zeros(hyps.len());
        for (i, (f, h)) in self.filters.iter_mut().zip(hyps).enumerate() {
            *f = kalman_step(f, h, v_applied, y_meas)?;
            logs[i] = f.last_log_likelihood;
        }
        self.posteriors = posterior_update_log(&self.posteriors, &logs)?;
        self.window = (self.window + 1).min(self.t_d);
        Ok(())
    }

    pub fn modes(&self) -> Vec<usize> {
        self.filters.iter().map(|f| f.hypothesis_mode).collect()
    }
}

/// Maximum a posteriori mode, lowest id on ties.
pub fn detect_mode(state: &MmaeState) -> Result<usize> {
    if state.window < state.t_d {
        return Err(Error::IntervalIncomplete { window: state.window, t_d: state.t_d });
    }
    argmax_mode(&state.modes(), &state.posteriors)
}

pub fn argmax_mode(modes: &[usize], posteriors: &Vector) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (&id, &p) in modes.iter().zip(posteriors.iter()) {
        best = match best {
            None => Some((id, p)),
            Some((bid, bp)) if p > bp || (p == bp && id < bid) => Some((id, p)),
            keep => keep,
        };
    }
    best.map(|(id, _)| id).ok_or_else(|| dims("no hypotheses"))
}

/// Bhattacharyya distance between `N(η_a, Ψ_a)` and `N(η_b, Ψ_b)`.
pub fn bhattacharyya_rho(eta_a: &Vector, eta_b: &Vector, psi_a: &Matrix, psi_b: &Matrix) -> Result<f64> {
    let pair = PairTerm::new(psi_a, psi_b)?;
    Ok(pair.rho(&(eta_a - eta_b)))
}

/// Covariance-dependent parts of one `ρ`.
#[derive(Debug, Clone)]
struct PairTerm {
    chol_sum: Cholesky<f64, nalgebra::Dyn>,
    log_term: f64,
}

impl PairTerm {
    fn new(psi_a: &Matrix, psi_b: &Matrix) -> Result<Self> {
        if psi_a.shape() != psi_b.shape() {
            return Err(dims("Ψ shapes differ"));
        }
        let la = linalg::log_det_pd(psi_a, "Ψ_a")?;
        let lb = linalg::log_det_pd(psi_b, "Ψ_b")?;
        let sum = psi_a + psi_b;
        let chol_sum = Cholesky::new(sum.clone()).ok_or(Error::NonPdInput("Ψ_a + Ψ_b"))?;
        let k = sum.nrows() as f64;
        // ln det((Ψa + Ψb) / 2)
        let l_half = 2.0 * chol_sum.l().diagonal().iter().map(|d| math::ln(*d)).sum::<f64>() - k * core::f64::consts::LN_2;
        let log_term = (0.5 * (l_half - 0.5 * (la + lb))).max(0.0);
        Ok(PairTerm { chol_sum, log_term })
    }

    fn rho(&self, delta: &Vector) -> f64 {
        let w = self.chol_sum.solve(delta);
        (0.25 * delta.dot(&w) + self.log_term).max(0.0)
    }
}

/// `Ĵd(v_0..v_{T_d-1})` for a fixed bank, start state and priors.
///
/// Predicted outputs are `η_h = E_h x + D_h v` over steps `0..=T_d` and the
/// covariance `Ψ_h` is block diagonal with blocks `C Σ_h(k) Cᵀ + H_ξ`.
#[derive(Debug, Clone)]
pub struct DetectionBound {
    pub modes: Vec<usize>,
    pub priors: Vector,
    pub t_d: usize,
    pub m: usize,
    free: Vec<Vector>,
    forced: Vec<Matrix>,
    psi: Vec<Matrix>,
    pairs: Vec<(usize, usize, PairTerm)>,
}

impl DetectionBound {
    pub fn new(hyps: &[Hypothesis], priors: &Vector, x_t: &Vector, sigma0: &Matrix, t_d: usize) -> Result<Self> {
        if hyps.is_empty() || priors.len() != hyps.len() {
            return Err(dims("one prior per hypothesis"));
        }
        let m = hyps[0].sys.m();
        let mut free = Vec::new();
        let mut forced = Vec::new();
        let mut psi = Vec::new();
        for h in hyps {
            let n = h.sys.n();
            let p = h.c.nrows();
            let rows = p * (t_d + 1);
            let mut e = Vector::zeros(rows);
            let mut d = Matrix::zeros(rows, m * t_d);
            let mut blocks = Vec::with_capacity(t_d + 1);
            // state map: x(k) = Ak x + Σ Φ_i v_i
            let mut ax = x_t.clone();
            let mut bv = Matrix::zeros(n, m * t_d);
            let mut sigma = sigma0.clone();
            for k in 0..=t_d {
                e.rows_mut(k * p, p).copy_from(&(&h.c * &ax));
                d.view_mut((k * p, 0), (p, m * t_d)).copy_from(&(&h.c * &bv));
                let blk = &h.c * &sigma * h.c.transpose() + &h.h_xi;
                blocks.push((&blk + blk.transpose()) * 0.5);
                if k < t_d {
                    ax = &h.sys.a * ax;
                    bv = &h.sys.a * bv;
                    bv.view_mut((0, k * m), (n, m)).copy_from(&h.sys.b);
                    sigma = &h.sys.a * &sigma * h.sys.a.transpose() + &h.h_omega;
                }
            }
            free.push(e);
            forced.push(d);
            psi.push(linalg::block_diag(&blocks));
        }
        let mut pairs = Vec::new();
        for a in 0..hyps.len() {
            for b in (a + 1)..hyps.len() {
                pairs.push((a, b, PairTerm::new(&psi[a], &psi[b])?));
            }
        }
        Ok(DetectionBound { modes: hyps.iter().map(|h| h.mode_id).collect(), priors: priors.clone(), t_d, m, free, forced, psi, pairs })
    }

    pub fn eta(&self, h: usize, v: &Vector) -> Vector {
        &self.free[h] + &self.forced[h] * v
    }

    pub fn psi(&self, h: usize) -> &Matrix {
        &self.psi[h]
    }

    fn check_len(&self, v: &Vector) -> Result<()> {
        linalg::ensure_len(v, self.m * self.t_d, "stacked v")
    }

    /// Includes the `a = b` terms of the double sum, so the value is at least `Σ p / 2`.
    pub fn value(&self, v: &Vector) -> Result<f64> {
        self.check_len(v)?;
        let diag: f64 = self.priors.iter().sum();
        let mut off = 0.0;
        for (a, b, pair) in &self.pairs {
            let delta = self.eta(*a, v) - self.eta(*b, v);
            off += math::sqrt(self.priors[*a] * self.priors[*b]) * math::exp(-pair.rho(&delta));
        }
        Ok(0.5 * (diag + 2.0 * off))
    }

    pub fn value_and_gradient(&self, v: &Vector) -> Result<(f64, Vector)> {
        self.check_len(v)?;
        let diag: f64 = self.priors.iter().sum();
        let mut off = 0.0;
        let mut grad = Vector::zeros(v.len());
        for (a, b, pair) in &self.pairs {
            let delta = self.eta(*a, v) - self.eta(*b, v);
            let weight = math::sqrt(self.priors[*a] * self.priors[*b]) * math::exp(-pair.rho(&delta));
            off += weight;
            // ∇ρ = ½ D_abᵀ S⁻¹ Δ
            let d_ab = &self.forced[*a] - &self.forced[*b];
            let s_delta = pair.chol_sum.solve(&delta);
            grad -= (d_ab.transpose() * s_delta) * (0.5 * weight);
        }
        Ok((0.5 * (diag + 2.0 * off), grad))
    }
}

/// Stacks `v_0..v_{k-1}` into one vector.
pub fn stack_seq(v_seq: &[Vector]) -> Vector {
    let m = v_seq.first().map_or(0, |v| v.len());
    let mut out = Vector::zeros(m * v_seq.len());
    for (i, v) in v_seq.iter().enumerate() {
        out.rows_mut(i * m, m).copy_from(v);
    }
    out
}
