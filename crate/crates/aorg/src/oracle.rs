//! Independent checks: admissible set against the simulation oracle, and the
//! misidentification bound against Monte Carlo detection.

use aorg_core::admissible::AdmissibleSet;
use aorg_core::linalg;
use aorg_core::mmae::{detect_mode, hypotheses_for, stack_seq, DetectionBound, MmaeState};
use aorg_core::model::{ConstraintSpec, ModeGraph, ModeModel};
use aorg_core::sim::{brute_force_admissibility_oracle, NoiseSource};
use aorg_core::{Matrix, Vector};
use serde::{Deserialize, Serialize};

use crate::error::AppError;

/// Fallback half-width when the set is unbounded along an axis.
const OPEN_AXIS_HALF_WIDTH: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetOracleReport {
    pub mode_id: usize,
    pub horizon: usize,
    pub k_star: usize,
    pub points: usize,
    pub inside: usize,
    pub disagreements: usize,
}

/// Bounding box of the set along each coordinate.
fn bounding_box(set: &AdmissibleSet) -> Result<(Vector, Vector), AppError> {
    let d = set.dim();
    let mut lo = Vector::from_element(d, -OPEN_AXIS_HALF_WIDTH);
    let mut hi = Vector::from_element(d, OPEN_AXIS_HALF_WIDTH);
    for i in 0..d {
        let mut e = Vector::zeros(d);
        e[i] = 1.0;
        if let Some((v, _)) = set.set.support(&e)? {
            hi[i] = v;
        }
        e[i] = -1.0;
        if let Some((v, _)) = set.set.support(&e)? {
            lo[i] = -v;
        }
    }
    Ok((lo, hi))
}

/// Half the points are uniform in the bounding box grown by 30%, half are
/// on rays from the box centre at radii near the boundary.
pub fn sample_points(set: &AdmissibleSet, count: usize, src: &mut NoiseSource) -> Result<Vec<Vector>, AppError> {
    let (lo, hi) = bounding_box(set)?;
    let centre = (&lo + &hi) * 0.5;
    let half = (&hi - &lo) * 0.65;
    let d = set.dim();
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        if k % 2 == 0 {
            out.push(Vector::from_fn(d, |i, _| centre[i] + half[i] * (2.0 * src.uniform() - 1.0)));
        } else {
            let dir = src.standard_normal(d).component_mul(&half);
            // largest s with centre + s dir in the set
            let mut s_max = f64::INFINITY;
            let a = set.set.normals();
            let b = set.set.offsets();
            for r in 0..a.nrows() {
                let ad = a.row(r).dot(&dir.transpose());
                if ad > 0.0 {
                    s_max = s_max.min((b[r] - a.row(r).dot(&centre.transpose())) / ad);
                }
            }
            let s_max = if s_max.is_finite() && s_max > 0.0 { s_max } else { 1.0 };
            let scale = 0.7 + 0.6 * src.uniform();
            out.push(&centre + dir * (s_max * scale));
        }
    }
    Ok(out)
}

pub fn check_set_against_oracle(
    mode: &ModeModel,
    spec: &ConstraintSpec,
    set: &AdmissibleSet,
    points: usize,
    seed: u64,
) -> Result<SetOracleReport, AppError> {
    let mut src = NoiseSource::new(seed);
    let mut inside = 0;
    let mut disagreements = 0;
    for p in sample_points(set, points, &mut src)? {
        let by_set = set.set.contains(&p)?;
        let by_oracle = brute_force_admissibility_oracle(mode, spec, set, &p, 3)?;
        inside += by_set as usize;
        disagreements += (by_set != by_oracle) as usize;
    }
    Ok(SetOracleReport {
        mode_id: set.mode_id,
        horizon: set.horizon_t,
        k_star: set.k_star,
        points,
        inside,
        disagreements,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionCase {
    pub label: String,
    pub x: Vec<f64>,
    /// `T_d` inputs, each of length `m`.
    pub v_seq: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub label: String,
    pub trials: usize,
    pub errors: usize,
    pub rate: f64,
    /// Binomial standard error of `rate`.
    pub sigma: f64,
    /// The bound including its `a = b` terms.
    pub bound: f64,
    /// Off-diagonal part only, the pairwise Bhattacharyya bound.
    pub pairwise_bound: f64,
    pub within_bound: bool,
    pub within_pairwise_bound: bool,
}

/// Draws the true mode from the priors, simulates `T_d` steps under the gains
/// of `believed` starting from `x`, runs a fresh filter bank and counts
/// wrong decisions.
pub fn check_detection_bound(
    graph: &ModeGraph,
    believed: usize,
    case: &DetectionCase,
    trials: usize,
    seed: u64,
) -> Result<DetectionReport, AppError> {
    let hyps = hypotheses_for(graph, believed, believed)?;
    let ids: Vec<usize> = hyps.iter().map(|h| h.mode_id).collect();
    let priors = graph.restricted_priors(&ids);
    let x0 = Vector::from_column_slice(&case.x);
    let n = x0.len();
    let t_d = case.v_seq.len();
    let v_seq: Vec<Vector> = case.v_seq.iter().map(|v| Vector::from_column_slice(v)).collect();
    let sigma0 = Matrix::zeros(n, n);
    let bound = DetectionBound::new(&hyps, &priors, &x0, &sigma0, t_d)?.value(&stack_seq(&v_seq))?;
    let pairwise_bound = bound - 0.5 * priors.iter().sum::<f64>();
    let factors: Vec<(Matrix, Matrix)> = hyps
        .iter()
        .map(|h| Ok((linalg::psd_factor(&h.h_omega)?, linalg::psd_factor(&h.h_xi)?)))
        .collect::<Result<_, aorg_core::Error>>()?;
    let mut src = NoiseSource::new(seed);
    let mut errors = 0;
    for _ in 0..trials {
        let u = src.uniform();
        let mut acc = 0.0;
        let mut truth = hyps.len() - 1;
        for (i, p) in priors.iter().enumerate() {
            acc += p;
            if u < acc {
                truth = i;
                break;
            }
        }
        let h = &hyps[truth];
        let (f_omega, f_xi) = &factors[truth];
        let mut bank = MmaeState::reset(&hyps, &x0, &sigma0, &priors, t_d)?;
        let mut x = x0.clone();
        for v in &v_seq {
            x = &h.sys.a * &x + &h.sys.b * v + src.correlated(f_omega);
            let y = &h.c * &x + src.correlated(f_xi);
            bank.step(&hyps, v, &y)?;
        }
        errors += (detect_mode(&bank)? != h.mode_id) as usize;
    }
    let rate = errors as f64 / trials as f64;
    let sigma = (rate * (1.0 - rate) / trials as f64).sqrt();
    Ok(DetectionReport {
        label: case.label.clone(),
        trials,
        errors,
        rate,
        sigma,
        bound,
        pairwise_bound,
        within_bound: rate <= bound + 2.0 * sigma,
        within_pairwise_bound: rate <= pairwise_bound + 2.0 * sigma,
    })
}

/// Input sequences of length `t_d` for an `m`-input system: zero, constant,
/// alternating, ramp and a seeded random one.
pub fn default_detection_cases(n: usize, m: usize, t_d: usize, seed: u64) -> Vec<DetectionCase> {
    let mut src = NoiseSource::new(seed);
    let zero_x = vec![0.0; n];
    let seq = |f: &dyn Fn(usize) -> f64| (0..t_d).map(|k| vec![f(k); m]).collect::<Vec<_>>();
    let random: Vec<Vec<f64>> = (0..t_d).map(|_| (0..m).map(|_| 2.0 * src.uniform() - 1.0).collect()).collect();
    vec![
        DetectionCase { label: "zero".into(), x: zero_x.clone(), v_seq: seq(&|_| 0.0) },
        DetectionCase { label: "constant".into(), x: zero_x.clone(), v_seq: seq(&|_| 1.0) },
        DetectionCase {
            label: "alternating".into(),
            x: zero_x.clone(),
            v_seq: seq(&|k| if k % 2 == 0 { 1.0 } else { -1.0 }),
        },
        DetectionCase { label: "ramp".into(), x: zero_x.clone(), v_seq: seq(&|k| (k + 1) as f64 / t_d as f64) },
        DetectionCase { label: "random".into(), x: zero_x, v_seq: random },
        DetectionCase { label: "offset-state".into(), x: vec![1.0; n], v_seq: seq(&|_| 0.5) },
    ]
}
