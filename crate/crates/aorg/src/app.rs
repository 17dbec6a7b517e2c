//! Command implementations behind the binary.
//!
//! Output layout under `--out`:
//!
//! ```text
//! sets/manifest.json            content key and per-file digests
//! sets/oinf_mode<id>_T<h>.json  admissible sets
//! sets/recoverable_mode<id>_T<h>.json
//! traces/run_<index>.csv        one row per step
//! traces/run_<index>.json       run summary
//! reports/validate.json
//! reports/monte_carlo.json
//! reports/oracle_check.json
//! reports/report.md
//! ```
//!
//! Everything is written to `<out>/.staging` first and moved into place only
//! when the command succeeds.

use std::fs;
use std::path::{Path, PathBuf};

use aorg_core::admissible::admissible_set_for_mode;
use aorg_core::ftc::{validate_timing, FtcModel};
use aorg_core::model::validate_mode_graph;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{Config, Governor, Problem};
use crate::error::AppError;
use crate::io::{self, SetFile, Staging, Stamp, SummaryRecord};
use crate::mc::{summarize_runs, McSummary, Prepared};
use crate::oracle::{self, DetectionReport, SetOracleReport};
use crate::report;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub runs: Option<usize>,
    pub omega: Option<f64>,
    pub beta: Option<f64>,
    pub paper_literal_timing: bool,
}

/// Loaded configuration with overrides applied.
pub struct Session {
    pub cfg: Config,
    pub problem: Problem,
    pub stamp: Stamp,
}

impl Session {
    pub fn load(path: &Path, ov: &Overrides) -> Result<Self, AppError> {
        let (cfg, _) = Config::load(path)?;
        Session::new(cfg, ov)
    }

    pub fn new(mut cfg: Config, ov: &Overrides) -> Result<Self, AppError> {
        if let Some(s) = ov.seed {
            cfg.scenario.seed = s;
        }
        if let Some(r) = ov.runs {
            if r == 0 {
                return Err(AppError::config("--runs must be at least 1"));
            }
            cfg.scenario.runs = r;
        }
        if let Some(o) = ov.omega {
            cfg.ftc.omega = o;
        }
        if let Some(b) = ov.beta {
            cfg.constraints.beta = b;
        }
        if ov.paper_literal_timing {
            cfg.ftc.paper_literal_timing = true;
        }
        let problem = cfg.problem()?;
        let stamp = Stamp { config_hash: cfg.hash(), seed: cfg.scenario.seed };
        Ok(Session { cfg, problem, stamp })
    }
}

/// What a command produced.
#[derive(Debug, Default)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub message: String,
}

pub fn validate(s: &Session, out: &Path) -> Result<Outcome, AppError> {
    let rep = validate_mode_graph(&s.problem.graph, &s.problem.spec);
    let fc = s.cfg.ftc_config(s.problem.graph.modes[0].m())?;
    let timing = validate_timing(&fc);
    let uses_timing = s.cfg.scenario.governor == Governor::Ftc;
    let modes: Vec<_> = rep
        .modes
        .iter()
        .map(|m| {
            json!({
                "mode_id": m.mode_id,
                "spectral_radius": m.spectral_radius,
                "schur": m.schur,
                "rank_lx": m.rank_lx,
                "rank_fx": m.rank_fx,
                "observable_lx": m.observable_lx,
                "observable_fx": m.observable_fx,
                "closed_loop_consistent": m.closed_loop_consistent,
            })
        })
        .collect();
    let all_pass = rep.all_pass() && (timing.is_ok() || !uses_timing);
    let doc = json!({
        "config_hash": s.stamp.config_hash,
        "seed": s.stamp.seed,
        "modes": modes,
        "prior_sum": rep.prior_sum,
        "priors_ok": rep.priors_ok,
        "successors_ok": rep.successors_ok,
        "origin_inside": rep.origin_inside,
        "extended_sets_ok": rep.extended_sets_ok,
        "bounded_sets": rep.bounded_sets,
        "timing_satisfied": timing.as_ref().map(|t| t.satisfied).unwrap_or(false),
        "paper_literal_timing": fc.paper_literal_timing,
        "messages": rep.messages,
        "all_pass": all_pass,
    });
    if uses_timing {
        timing?;
    }
    if !all_pass {
        return Err(AppError::config(format!("mode graph validation failed: {}", rep.messages.join("; "))));
    }
    let mut st = Staging::new(out)?;
    st.write("reports/validate.json", &io::to_json(&doc)?)?;
    Ok(Outcome { files: st.commit()?, message: "validate: all checks pass".into() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub content_key: String,
    pub files: Vec<ManifestEntry>,
}

fn cached(out: &Path, key: &str) -> bool {
    let Ok(manifest) = io::read_json::<Manifest>(&out.join("sets/manifest.json")) else {
        return false;
    };
    manifest.content_key == key
        && manifest
            .files
            .iter()
            .all(|f| fs::read(out.join(&f.path)).is_ok_and(|bytes| io::sha256_hex(&bytes) == f.sha256))
}

pub fn set_files(s: &Session) -> Result<Vec<(String, SetFile)>, AppError> {
    let mut files = Vec::new();
    let cfg = &s.cfg;
    let opts = cfg.admissible_options();
    match cfg.scenario.governor {
        Governor::Aorg | Governor::Rg => {
            let horizon = if cfg.scenario.governor == Governor::Aorg { cfg.horizons.t } else { 0 };
            for mode in &s.problem.graph.modes {
                let (set, _) = admissible_set_for_mode(mode, &s.problem.spec, horizon, &opts)?;
                files.push((format!("sets/oinf_mode{}_T{horizon}.json", mode.mode_id), SetFile::admissible(&set, &s.stamp)));
            }
        }
        Governor::Ftc => {
            let fc = cfg.ftc_config(s.problem.graph.modes[0].m())?;
            let model = FtcModel::build(&s.problem.graph, &s.problem.spec, &fc, &opts)?;
            for ctx in &model.contexts {
                let h = ctx.oinf.horizon_t;
                files.push((format!("sets/oinf_mode{}_T{h}.json", ctx.mode_id), SetFile::admissible(&ctx.oinf, &s.stamp)));
                if let Some(rec) = &ctx.recovery {
                    files.push((
                        format!("sets/recoverable_mode{}_T{}.json", ctx.mode_id, rec.t_r),
                        SetFile::recovery(rec, &s.stamp),
                    ));
                }
            }
        }
    }
    Ok(files)
}

pub fn build_sets(s: &Session, out: &Path) -> Result<Outcome, AppError> {
    let key = io::sha256_hex(format!("sets-v1:{}", s.stamp.config_hash).as_bytes());
    if cached(out, &key) {
        return Ok(Outcome { files: Vec::new(), message: "build-sets: cache hit".into() });
    }
    let mut st = Staging::new(out)?;
    let mut entries = Vec::new();
    let mut lines = Vec::new();
    for (path, file) in set_files(s)? {
        let bytes = io::to_json(&file)?;
        entries.push(ManifestEntry { path: path.clone(), sha256: io::sha256_hex(&bytes) });
        lines.push(format!(
            "{path}: {} rows{}",
            file.rows,
            file.k_star.map_or(String::new(), |k| format!(", k* = {k}"))
        ));
        st.write(&path, &bytes)?;
    }
    let manifest = Manifest { stamp: s.stamp.clone(), content_key: key, files: entries };
    st.write("sets/manifest.json", &io::to_json(&manifest)?)?;
    Ok(Outcome { files: st.commit()?, message: format!("build-sets:\n{}", lines.join("\n")) })
}

fn write_trace(st: &mut Staging, s: &Session, trace: &aorg_core::sim::Trace) -> Result<(), AppError> {
    let ids: Vec<usize> = s.problem.graph.modes.iter().map(|m| m.mode_id).collect();
    let base = io::trace_name(trace.run_index);
    st.write(&format!("{base}.csv"), &io::trace_csv(trace, &ids, &s.stamp)?)?;
    st.write(&format!("{base}.json"), &io::to_json(&SummaryRecord::new(trace, &s.stamp))?)?;
    Ok(())
}

pub fn run(s: &Session, out: &Path) -> Result<Outcome, AppError> {
    let prepared = Prepared::new(&s.cfg, &s.problem)?;
    let trace = prepared.run(0)?;
    let mut st = Staging::new(out)?;
    write_trace(&mut st, s, &trace)?;
    let summary = serde_json::to_string(&SummaryRecord::new(&trace, &s.stamp)).map_err(|e| AppError::io(e.to_string()))?;
    Ok(Outcome { files: st.commit()?, message: summary })
}

pub fn monte_carlo(s: &Session, out: &Path, jobs: Option<usize>) -> Result<(Outcome, McSummary), AppError> {
    let prepared = Prepared::new(&s.cfg, &s.problem)?;
    let traces = prepared.run_many(s.cfg.scenario.runs, jobs)?;
    let summary = summarize_runs(&traces, prepared.spec(), &s.cfg, &s.stamp);
    let mut st = Staging::new(out)?;
    for trace in &traces {
        write_trace(&mut st, s, trace)?;
    }
    st.write("reports/monte_carlo.json", &io::to_json(&summary)?)?;
    let mut message = format!(
        "monte-carlo: {} runs, max chance violation rate {:.4}",
        summary.runs, summary.max_chance_violation_rate
    );
    for r in &summary.identification {
        message += &format!("\n  true mode {}: correct {}/{} ({:.3})", r.true_mode, r.correct, r.runs, r.rate);
    }
    Ok((Outcome { files: st.commit()?, message }, summary))
}

pub fn report(out: &Path, check: bool) -> Result<Outcome, AppError> {
    let summary: McSummary = io::read_json(&out.join("reports/monte_carlo.json"))?;
    let checks = report::checks(&summary);
    let md = report::markdown(&summary, &checks);
    let mut st = Staging::new(out)?;
    st.write("reports/report.md", md.as_bytes())?;
    let files = st.commit()?;
    let failed: Vec<&str> = checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    if check && !failed.is_empty() {
        return Err(AppError::acceptance(format!("failed checks: {}", failed.join(", "))));
    }
    Ok(Outcome { files, message: md })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleCheck {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub sets: Vec<SetOracleReport>,
    pub skipped: Vec<String>,
    pub detection: Vec<DetectionReport>,
}

impl OracleCheck {
    pub fn pass(&self) -> bool {
        self.sets.iter().all(|r| r.disagreements == 0)
            && self.detection.iter().all(|d| d.within_bound && d.within_pairwise_bound)
    }
}

pub fn oracle_check(s: &Session, out: &Path, points: usize, trials: usize) -> Result<Outcome, AppError> {
    let cfg = &s.cfg;
    let graph = &s.problem.graph;
    let mut sets = Vec::new();
    let mut skipped = Vec::new();
    for mode in &graph.modes {
        let horizon = cfg.horizons.t;
        if mode.n() > 3 || horizon > 3 {
            skipped.push(format!("mode {}: n = {}, T = {horizon} too large for the oracle", mode.mode_id, mode.n()));
            continue;
        }
        let (set, _) = admissible_set_for_mode(mode, &s.problem.spec, horizon, &cfg.admissible_options())?;
        sets.push(oracle::check_set_against_oracle(mode, &s.problem.spec, &set, points, cfg.scenario.seed)?);
    }
    let mut detection = Vec::new();
    let believed = cfg.scenario.initial_mode;
    if graph.hypotheses(believed).len() > 1 {
        let mode = graph.require(believed)?;
        for (i, case) in oracle::default_detection_cases(mode.n(), mode.m(), cfg.horizons.t_d, cfg.scenario.seed)
            .iter()
            .enumerate()
        {
            let seed = cfg.scenario.seed.wrapping_add(1000 * (i as u64 + 1));
            detection.push(oracle::check_detection_bound(graph, believed, case, trials, seed)?);
        }
    } else {
        skipped.push(format!("mode {believed} has no successors: no detection check"));
    }
    let doc = OracleCheck { stamp: s.stamp.clone(), sets, skipped, detection };
    let mut st = Staging::new(out)?;
    st.write("reports/oracle_check.json", &io::to_json(&doc)?)?;
    let files = st.commit()?;
    let mut message = String::from("oracle-check:");
    for r in &doc.sets {
        message += &format!(
            "\n  mode {} T={} k*={}: {} points, {} inside, {} disagreements",
            r.mode_id, r.horizon, r.k_star, r.points, r.inside, r.disagreements
        );
    }
    for d in &doc.detection {
        message += &format!(
            "\n  {}: misidentification {:.4} (sigma {:.4}) bound {:.4} pairwise {:.4}",
            d.label, d.rate, d.sigma, d.bound, d.pairwise_bound
        );
    }
    for sk in &doc.skipped {
        message += &format!("\n  skipped {sk}");
    }
    if !doc.pass() {
        return Err(AppError::acceptance(message));
    }
    Ok(Outcome { files, message })
}
