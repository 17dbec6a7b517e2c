//! TOML configuration schema.
//!
//! Matrices are row-major nested arrays. Every field that has a default can be
//! omitted; unknown keys are rejected.

use std::collections::BTreeMap;
use std::path::Path;

use aorg_core::admissible::AdmissibleOptions;
use aorg_core::ftc::FtcConfig;
use aorg_core::model::{self, ConstraintSpec, ModeGraph, ModeModel, OpenLoopMode};
use aorg_core::polytope::Polytope;
use aorg_core::sim::Scenario;
use aorg_core::{Matrix, Vector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::AppError;

pub type Rows = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub modes: Vec<ModeConfig>,
    pub constraints: ConstraintConfig,
    #[serde(default)]
    pub horizons: Horizons,
    #[serde(default)]
    pub admissible: AdmissibleConfig,
    #[serde(default)]
    pub ftc: FtcSection,
    #[serde(default)]
    pub recovery: RecoverySection,
    #[serde(default)]
    pub scenario: ScenarioSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModeConfig {
    pub id: usize,
    pub prior: f64,
    #[serde(default)]
    pub successors: Vec<usize>,
    pub a_o: Rows,
    pub b_o: Rows,
    pub c: Rows,
    pub k: Rows,
    pub g: Rows,
    pub h_omega: Rows,
    pub h_xi: Rows,
}

/// Either a symmetric box `|z_i| <= box_i` or explicit half-spaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetConfig {
    #[serde(default, rename = "box", skip_serializing_if = "Option::is_none")]
    pub half_widths: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normals: Option<Rows>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offsets: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintConfig {
    pub l_x: Rows,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_u: Option<Rows>,
    pub l_v: Rows,
    pub z1: SetConfig,
    pub z1_plus: SetConfig,
    pub f_x: Rows,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_u: Option<Rows>,
    pub f_v: Rows,
    pub z2: SetConfig,
    pub z2_plus: SetConfig,
    pub h_zeta: Rows,
    pub h_varsigma: Rows,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Horizons {
    /// AORG horizon for pure tracking.
    pub t: usize,
    pub t_d: usize,
    pub t_r: usize,
    pub t_e: usize,
}

impl Default for Horizons {
    fn default() -> Self {
        Horizons { t: 5, t_d: 6, t_r: 13, t_e: 25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdmissibleConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eps: Option<f64>,
    pub k_cap: usize,
    pub redundancy_cap: usize,
}

impl Default for AdmissibleConfig {
    fn default() -> Self {
        AdmissibleConfig { eps: None, k_cap: 500, redundancy_cap: 2000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FtcSection {
    pub omega: f64,
    /// Steady-state threshold; `0.05 ||r||` when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vartheta: Option<f64>,
    pub confirm_intervals: usize,
    /// Steady-state weight; identity when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_weight: Option<Rows>,
    pub multistart: usize,
    pub opt_tol: f64,
    pub paper_literal_timing: bool,
}

impl Default for FtcSection {
    fn default() -> Self {
        FtcSection {
            omega: 1.0,
            vartheta: None,
            confirm_intervals: 2,
            r_weight: None,
            multistart: 8,
            opt_tol: 1e-6,
            paper_literal_timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecoverySection {
    /// Recovery weight; identity when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r_weight: Option<Rows>,
    pub n_check: usize,
}

impl Default for RecoverySection {
    fn default() -> Self {
        RecoverySection { r_weight: None, n_check: 500 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Governor {
    /// Interval planning over the tracking horizon `t`.
    Aorg,
    /// Conventional governor: horizon 0, replanned every step.
    Rg,
    /// Fault-tolerant orchestrator with detection intervals of length `t_d`.
    Ftc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultEvent {
    pub time: usize,
    pub mode: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceStep {
    pub time: usize,
    pub r: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioSection {
    pub name: String,
    pub governor: Governor,
    pub steps: usize,
    pub initial_mode: usize,
    /// Mode the plant runs in from `t = 0`; defaults to `initial_mode`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub true_initial_mode: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0: Option<Vec<f64>>,
    /// Per-state standard deviation of a Gaussian perturbation of `x0`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub x0_spread: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub v_init: Option<Vec<f64>>,
    /// Constant reference.
    pub reference: Vec<f64>,
    /// Optional piecewise-constant schedule overriding `reference` from each `time`.
    pub reference_schedule: Vec<ReferenceStep>,
    pub faults: Vec<FaultEvent>,
    pub seed: u64,
    pub runs: usize,
    /// Threshold on `||v - r||` for the convergence step.
    pub convergence_tol: f64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        ScenarioSection {
            name: "scenario".into(),
            governor: Governor::Aorg,
            steps: 60,
            initial_mode: 1,
            true_initial_mode: None,
            x0: None,
            x0_spread: None,
            v_init: None,
            reference: Vec::new(),
            reference_schedule: Vec::new(),
            faults: Vec::new(),
            seed: 1,
            runs: 1,
            convergence_tol: 1e-3,
        }
    }
}

pub fn matrix(rows: &Rows, what: &str) -> Result<Matrix, AppError> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(AppError::config(format!("{what}: ragged matrix")));
    }
    Ok(Matrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn rows_of(m: &Matrix) -> Rows {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl SetConfig {
    pub fn polytope(&self, what: &str) -> Result<Polytope, AppError> {
        match (&self.half_widths, &self.normals, &self.offsets) {
            (Some(w), None, None) => Polytope::symmetric_box(w).map_err(|e| AppError::config(format!("{what}: {e}"))),
            (None, Some(a), Some(b)) => Polytope::new(matrix(a, what)?, Vector::from_column_slice(b))
                .map_err(|e| AppError::config(format!("{what}: {e}"))),
            _ => Err(AppError::config(format!("{what}: give either `box` or `normals` and `offsets`"))),
        }
    }
}

/// Fully assembled problem data.
#[derive(Debug, Clone)]
pub struct Problem {
    pub graph: ModeGraph,
    pub spec: ConstraintSpec,
}

impl Config {
    pub fn load(path: &Path) -> Result<(Config, String), AppError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::config(format!("cannot read {}: {e}", path.display())))?;
        let cfg = Config::parse(&text)?;
        Ok((cfg, text))
    }

    pub fn parse(text: &str) -> Result<Config, AppError> {
        toml::from_str(text).map_err(|e| AppError::config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, AppError> {
        toml::to_string(self).map_err(|e| AppError::config(e.to_string()))
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn hash(&self) -> String {
        let canonical = self.to_toml().unwrap_or_default();
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn problem(&self) -> Result<Problem, AppError> {
        if self.modes.is_empty() {
            return Err(AppError::config("no modes defined"));
        }
        let mut modes = Vec::new();
        let mut successors = BTreeMap::new();
        let mut priors = Vec::new();
        for mc in &self.modes {
            let what = format!("mode {}", mc.id);
            let open = OpenLoopMode {
                mode_id: mc.id,
                a_o: matrix(&mc.a_o, &what)?,
                b_o: matrix(&mc.b_o, &what)?,
                c: matrix(&mc.c, &what)?,
                h_omega: matrix(&mc.h_omega, &what)?,
                h_xi: matrix(&mc.h_xi, &what)?,
            };
            let mode: ModeModel =
                model::build_closed_loop(open, matrix(&mc.k, &what)?, matrix(&mc.g, &what)?, model::SCHUR_MARGIN)
                    .map_err(|e| AppError::config(format!("{what}: {e}")))?;
            modes.push(mode);
            successors.insert(mc.id, mc.successors.clone());
            priors.push(mc.prior);
        }
        let c = &self.constraints;
        let spec = ConstraintSpec {
            l_x: matrix(&c.l_x, "l_x")?,
            l_u: c.l_u.as_ref().map(|m| matrix(m, "l_u")).transpose()?,
            l_v: matrix(&c.l_v, "l_v")?,
            z1: c.z1.polytope("z1")?,
            f_x: matrix(&c.f_x, "f_x")?,
            f_u: c.f_u.as_ref().map(|m| matrix(m, "f_u")).transpose()?,
            f_v: matrix(&c.f_v, "f_v")?,
            z2: c.z2.polytope("z2")?,
            h_zeta: matrix(&c.h_zeta, "h_zeta")?,
            h_varsigma: matrix(&c.h_varsigma, "h_varsigma")?,
            beta: c.beta,
            z1_plus: c.z1_plus.polytope("z1_plus")?,
            z2_plus: c.z2_plus.polytope("z2_plus")?,
            t_e: self.horizons.t_e,
        };
        let m0 = &modes[0];
        spec.check(m0.n(), m0.m(), m0.p()).map_err(|e| AppError::config(e.to_string()))?;
        for mode in &modes[1..] {
            if (mode.n(), mode.m(), mode.p()) != (m0.n(), m0.m(), m0.p()) {
                return Err(AppError::config(format!("mode {} dimensions differ from mode {}", mode.mode_id, m0.mode_id)));
            }
        }
        let graph = ModeGraph { modes, successors, priors: Vector::from_vec(priors) };
        for id in graph.successors.values().flatten() {
            if graph.mode(*id).is_none() {
                return Err(AppError::config(format!("successor {id} is not a defined mode")));
            }
        }
        if graph.mode(self.scenario.initial_mode).is_none() {
            return Err(AppError::config(format!("initial mode {} is not defined", self.scenario.initial_mode)));
        }
        Ok(Problem { graph, spec })
    }

    pub fn r_weight(&self, rows: &Option<Rows>, m: usize, what: &str) -> Result<Matrix, AppError> {
        match rows {
            Some(r) => matrix(r, what),
            None => Ok(Matrix::identity(m, m)),
        }
    }

    pub fn admissible_options(&self) -> AdmissibleOptions {
        AdmissibleOptions {
            eps: self.admissible.eps,
            k_cap: self.admissible.k_cap,
            redundancy_cap: self.admissible.redundancy_cap,
            sigma0: None,
        }
    }

    /// Largest reference norm over the schedule, used for the default `ϑ`.
    fn reference_scale(&self) -> f64 {
        let sc = &self.scenario;
        std::iter::once(&sc.reference)
            .chain(sc.reference_schedule.iter().map(|s| &s.r))
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    pub fn ftc_config(&self, m: usize) -> Result<FtcConfig, AppError> {
        let f = &self.ftc;
        let h = &self.horizons;
        let cfg = FtcConfig {
            omega: f.omega,
            vartheta: f.vartheta.unwrap_or(0.05 * self.reference_scale()),
            t_d: h.t_d,
            t_r: h.t_r,
            t_e: h.t_e,
            r_weight: self.r_weight(&f.r_weight, m, "ftc.r_weight")?,
            recovery_weight: self.r_weight(&self.recovery.r_weight, m, "recovery.r_weight")?,
            confirm_intervals: f.confirm_intervals,
            multistart: f.multistart,
            opt_tol: f.opt_tol,
            paper_literal_timing: f.paper_literal_timing,
        };
        cfg.check(m).map_err(|e| AppError::config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn scenario(&self, problem: &Problem) -> Result<Scenario, AppError> {
        let sc = &self.scenario;
        let mode = problem.graph.require(sc.initial_mode).map_err(|e| AppError::config(e.to_string()))?;
        let (n, m) = (mode.n(), mode.m());
        let vec_or = |v: &Option<Vec<f64>>, len: usize| v.as_ref().map_or_else(|| Vector::zeros(len), |v| Vector::from_column_slice(v));
        let mut reference = vec![(0, Vector::from_column_slice(&sc.reference))];
        for step in &sc.reference_schedule {
            reference.push((step.time, Vector::from_column_slice(&step.r)));
        }
        reference.sort_by_key(|(t, _)| *t);
        let scenario = Scenario {
            graph: problem.graph.clone(),
            spec: problem.spec.clone(),
            steps: sc.steps,
            initial_mode: sc.initial_mode,
            true_initial_mode: sc.true_initial_mode.unwrap_or(sc.initial_mode),
            x0: vec_or(&sc.x0, n),
            x0_spread: sc.x0_spread.as_ref().map(|v| Vector::from_column_slice(v)),
            v_init: vec_or(&sc.v_init, m),
            reference,
            faults: sc.faults.iter().map(|f| (f.time, f.mode)).collect(),
            base_seed: sc.seed,
            convergence_tol: sc.convergence_tol,
        };
        scenario.check().map_err(|e| AppError::config(e.to_string()))?;
        Ok(scenario)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SCALAR: &str = r#"
[[modes]]
id = 1
prior = 1.0
a_o = [[0.5]]
b_o = [[0.5]]
c = [[1.0]]
k = [[0.0]]
g = [[1.0]]
h_omega = [[0.01]]
h_xi = [[0.01]]

[constraints]
l_x = [[0.0]]
l_v = [[1.0]]
z1 = { box = [1.0] }
z1_plus = { box = [1.5] }
f_x = [[1.0]]
f_v = [[0.0]]
z2 = { normals = [[1.0], [-1.0]], offsets = [2.0, 2.0] }
z2_plus = { box = [3.0] }
h_zeta = [[0.0]]
h_varsigma = [[0.0]]
beta = 0.9

[scenario]
reference = [0.5]
"#;

    #[test]
    fn round_trip_is_lossless() {
        let cfg = Config::parse(SCALAR).unwrap();
        let again = Config::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.hash(), again.hash());
        let p = cfg.problem().unwrap();
        assert_eq!(p.spec.z2.nrows(), 2);
        assert_eq!(p.graph.modes[0].a[(0, 0)], 0.5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = SCALAR.replace("beta = 0.9", "beta = 0.9\ngamma = 1.0");
        assert!(Config::parse(&text).is_err());
    }

    #[test]
    fn awkward_floats_round_trip() {
        let text = SCALAR.replace("a_o = [[0.5]]", "a_o = [[0.1234567890123456789]]");
        let cfg = Config::parse(&text).unwrap();
        let again = Config::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg.modes[0].a_o[0][0].to_bits(), again.modes[0].a_o[0][0].to_bits());
    }

    #[test]
    fn bad_set_is_a_config_error() {
        let text = SCALAR.replace("z1 = { box = [1.0] }", "z1 = { offsets = [1.0] }");
        let cfg = Config::parse(&text).unwrap();
        assert!(cfg.problem().is_err());
    }
}
