//! Scenario execution and Monte Carlo aggregation.
//!
//! Run `i` draws from its own stream seeded with `run_seed(base_seed, i)`, so
//! traces do not depend on how runs are spread over workers. Results are
//! collected in run-index order before any reduction.

use aorg_core::admissible::{admissible_set_for_mode, AdmissibleSet};
use aorg_core::ftc::{run_ftc, FtcModel};
use aorg_core::model::ConstraintSpec;
use aorg_core::sim::{aggregate, run_tracking, Phase, Scenario, Trace, TrackingGovernor};
use aorg_core::Vector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Config, Governor, Problem};
use crate::error::AppError;
use crate::io::Stamp;

/// Relative slack when testing sample means against a set.
pub const MEAN_ROUNDING_TOL: f64 = 1e-9;

pub enum Engine {
    Tracking { set: AdmissibleSet, governor: TrackingGovernor },
    Ftc(Box<FtcModel>),
}

/// A scenario with its sets built, ready to run any number of seeds.
pub struct Prepared {
    pub scenario: Scenario,
    pub engine: Engine,
    pub governor: Governor,
}

impl Prepared {
    pub fn new(cfg: &Config, problem: &Problem) -> Result<Self, AppError> {
        let scenario = cfg.scenario(problem)?;
        let governor = cfg.scenario.governor;
        let engine = match governor {
            Governor::Aorg | Governor::Rg => {
                let (horizon, gov) = match governor {
                    Governor::Aorg => (cfg.horizons.t, TrackingGovernor::AtOnce),
                    _ => (0, TrackingGovernor::Conventional),
                };
                let mode = problem.graph.require(scenario.initial_mode)?;
                let (set, _) = admissible_set_for_mode(mode, &problem.spec, horizon, &cfg.admissible_options())?;
                Engine::Tracking { set, governor: gov }
            }
            Governor::Ftc => {
                let m = problem.graph.modes[0].m();
                let fc = cfg.ftc_config(m)?;
                Engine::Ftc(Box::new(FtcModel::build(&problem.graph, &problem.spec, &fc, &cfg.admissible_options())?))
            }
        };
        Ok(Prepared { scenario, engine, governor })
    }

    pub fn spec(&self) -> &ConstraintSpec {
        match &self.engine {
            Engine::Ftc(model) => &model.spec,
            Engine::Tracking { .. } => &self.scenario.spec,
        }
    }

    pub fn run(&self, run_index: usize) -> Result<Trace, AppError> {
        let trace = match &self.engine {
            Engine::Tracking { set, governor } => run_tracking(&self.scenario, set, *governor, run_index)?,
            Engine::Ftc(model) => run_ftc(&self.scenario, model, run_index)?,
        };
        Ok(trace)
    }

    /// Runs `0..runs` on `jobs` workers (all cores when `None`).
    pub fn run_many(&self, runs: usize, jobs: Option<usize>) -> Result<Vec<Trace>, AppError> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.unwrap_or(0))
            .build()
            .map_err(|e| AppError::io(format!("worker pool: {e}")))?;
        pool.install(|| (0..runs).into_par_iter().map(|i| self.run(i)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationRate {
    pub true_mode: usize,
    pub runs: usize,
    pub correct: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub count: usize,
    pub mean: Option<f64>,
    pub p50: Option<usize>,
    pub p90: Option<usize>,
    pub max: Option<usize>,
}

impl Distribution {
    pub fn of(values: &[usize]) -> Self {
        let mut v = values.to_vec();
        v.sort_unstable();
        let rank = |q: f64| -> Option<usize> {
            if v.is_empty() {
                return None;
            }
            let idx = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len()) - 1;
            Some(v[idx])
        };
        Distribution {
            count: v.len(),
            mean: (!v.is_empty()).then(|| v.iter().sum::<usize>() as f64 / v.len() as f64),
            p50: rank(0.5),
            p90: rank(0.9),
            max: v.last().copied(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub scenario: String,
    pub governor: Governor,
    pub runs: usize,
    pub steps: usize,
    pub beta: f64,
    pub omega: Option<f64>,
    pub t_d: usize,
    pub t_r: usize,
    pub t_e: usize,
    /// Worst per-step frequency of `z2` outside a row of `Z2`.
    pub max_chance_violation_rate: f64,
    /// Same against `Z2+`.
    pub max_relaxed_chance_violation_rate: f64,
    /// Worst row frequency per step.
    pub chance_violation_by_step: Vec<f64>,
    /// `(step, row)` cells whose mean `z1` exceeds `Z1` by more than two standard errors.
    pub expectation_violations: usize,
    /// Steps whose mean `z1` lies outside `Z1+`.
    pub relaxed_expectation_violations: usize,
    pub tracking_error: Vec<f64>,
    pub converged_runs: usize,
    pub monotone_runs: usize,
    pub mean_first_interval_error: Option<f64>,
    pub mean_kappa_sum: f64,
    pub max_hold_length: usize,
    pub max_extension_episode: usize,
    pub identification: Vec<IdentificationRate>,
    pub undetected_runs: usize,
    /// Confirmation time minus fault time.
    pub detection_latency: Distribution,
    pub confirmed_runs: usize,
    /// Recovery complete within `T_r` of confirmation.
    pub recovered_runs: usize,
    pub recovery_steps: usize,
    /// Worst per-step frequency of `z2` outside `Z2+` among runs recovering at that step.
    pub recovery_relaxed_chance_rate: f64,
}

/// First detection at or after the first fault (or from the start) and the
/// plant mode at that step.
pub fn first_detection(trace: &Trace) -> Option<(usize, usize, usize)> {
    let from = trace.summary.fault_time.unwrap_or(0);
    trace
        .summary
        .detections
        .iter()
        .find(|(t, _)| *t >= from)
        .map(|(t, mode)| (*t, *mode, trace.records[*t].true_mode))
}

pub fn summarize_runs(
    traces: &[Trace],
    spec: &ConstraintSpec,
    cfg: &Config,
    stamp: &Stamp,
) -> McSummary {
    let agg = aggregate(traces, spec);
    let steps = agg.steps;
    let mut z1_sum = vec![Vector::zeros(spec.z1.dim()); steps];
    let mut count = vec![0usize; steps];
    let mut rec_total = vec![0usize; steps];
    let mut rec_viol = vec![0usize; steps];
    for tr in traces {
        for rec in &tr.records {
            z1_sum[rec.t] += &rec.z1;
            count[rec.t] += 1;
            if rec.phase == Phase::Recovering {
                rec_total[rec.t] += 1;
                rec_viol[rec.t] += (spec.z2_plus.max_violation(&rec.z2) > 0.0) as usize;
            }
        }
    }
    // averaging alone can push a mean that sits on a face just outside it
    let mean_tol = MEAN_ROUNDING_TOL * (1.0 + spec.z1_plus.offsets().amax());
    let relaxed_expectation_violations = (0..steps)
        .filter(|&k| count[k] > 0 && spec.z1_plus.max_violation(&(&z1_sum[k] / count[k] as f64)) > mean_tol)
        .count();
    let recovery_relaxed_chance_rate = (0..steps)
        .filter(|&k| rec_total[k] > 0)
        .map(|k| rec_viol[k] as f64 / rec_total[k] as f64)
        .fold(0.0, f64::max);

    let mut modes: Vec<usize> = Vec::new();
    let mut ident: Vec<(usize, usize)> = Vec::new();
    let mut undetected_runs = 0;
    let mut latencies = Vec::new();
    let mut confirmed_runs = 0;
    let mut recovered_runs = 0;
    for tr in traces {
        match first_detection(tr) {
            Some((_, detected, truth)) => {
                let slot = match modes.iter().position(|m| *m == truth) {
                    Some(i) => i,
                    None => {
                        modes.push(truth);
                        ident.push((0, 0));
                        modes.len() - 1
                    }
                };
                ident[slot].0 += 1;
                ident[slot].1 += (detected == truth) as usize;
            }
            None => undetected_runs += 1,
        }
        let s = &tr.summary;
        if let Some(tc) = s.confirmation_time {
            confirmed_runs += 1;
            if let Some(tf) = s.fault_time {
                latencies.push(tc.saturating_sub(tf));
            }
            if s.recovery_complete_time.is_some_and(|t| t >= tc && t - tc <= cfg.horizons.t_r) {
                recovered_runs += 1;
            }
        }
    }
    let mut identification: Vec<IdentificationRate> = modes
        .iter()
        .zip(&ident)
        .map(|(&true_mode, &(runs, correct))| IdentificationRate {
            true_mode,
            runs,
            correct,
            rate: correct as f64 / runs as f64,
        })
        .collect();
    identification.sort_by_key(|r| r.true_mode);

    McSummary {
        stamp: stamp.clone(),
        scenario: cfg.scenario.name.clone(),
        governor: cfg.scenario.governor,
        runs: traces.len(),
        steps,
        beta: spec.beta,
        omega: (cfg.scenario.governor == Governor::Ftc).then_some(cfg.ftc.omega),
        t_d: cfg.horizons.t_d,
        t_r: cfg.horizons.t_r,
        t_e: cfg.horizons.t_e,
        max_chance_violation_rate: agg.max_chance_violation_rate,
        max_relaxed_chance_violation_rate: agg
            .z2_plus_row_violation_rate
            .iter()
            .flat_map(|r| r.iter().copied())
            .fold(0.0, f64::max),
        chance_violation_by_step: agg
            .z2_row_violation_rate
            .iter()
            .map(|r| r.iter().copied().fold(0.0, f64::max))
            .collect(),
        expectation_violations: agg.expectation_violations,
        relaxed_expectation_violations,
        tracking_error: agg.tracking_error,
        converged_runs: agg.converged_runs,
        monotone_runs: agg.monotone_runs,
        mean_first_interval_error: agg.mean_first_interval_error,
        mean_kappa_sum: agg.mean_kappa_sum,
        max_hold_length: agg.max_hold_length,
        max_extension_episode: agg.max_extension_episode,
        identification,
        undetected_runs,
        detection_latency: Distribution::of(&latencies),
        confirmed_runs,
        recovered_runs,
        recovery_steps: rec_total.iter().sum(),
        recovery_relaxed_chance_rate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distribution_uses_nearest_rank() {
        let d = Distribution::of(&[10, 16, 10, 11, 22]);
        assert_eq!((d.count, d.p50, d.p90, d.max), (5, Some(11), Some(22), Some(22)));
        assert_eq!(d.mean, Some(13.8));
        assert_eq!(Distribution::of(&[]).p50, None);
    }
}
