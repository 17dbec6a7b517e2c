//! Trace CSV, run summaries, set files and staged output directories.
//!
//! Trace CSV columns, in order:
//!
//! `t, true_mode, believed_mode, phase, x_0.., v_0.., r_0.., y_0.., z1_0.., z2_0..,
//! p_<id>.. (one per mode in the graph, empty when the mode is not in the bank),
//! events` with events joined by `;`.
//!
//! The first line is a `#` comment carrying the config hash, base seed, run
//! seed and run index. Floats use Rust's shortest round-trip formatting.

use std::fs;
use std::path::{Path, PathBuf};

use aorg_core::admissible::AdmissibleSet;
use aorg_core::recovery::RecoveryProblem;
use aorg_core::sim::{RunSummary, Trace};
use aorg_core::{Matrix, Vector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{rows_of, Rows};
use crate::error::AppError;

/// Provenance stamped on every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stamp {
    pub config_hash: String,
    pub seed: u64,
}

fn push_vec(out: &mut Vec<String>, v: &Vector) {
    out.extend(v.iter().map(|x| x.to_string()));
}

fn names(prefix: &str, len: usize) -> impl Iterator<Item = String> + '_ {
    (0..len).map(move |i| format!("{prefix}_{i}"))
}

pub fn trace_header(trace: &Trace, mode_ids: &[usize]) -> Vec<String> {
    let mut h: Vec<String> = ["t", "true_mode", "believed_mode", "phase"].iter().map(|s| s.to_string()).collect();
    if let Some(r) = trace.records.first() {
        h.extend(names("x", r.x.len()));
        h.extend(names("v", r.v.len()));
        h.extend(names("r", r.r.len()));
        h.extend(names("y", r.y.len()));
        h.extend(names("z1", r.z1.len()));
        h.extend(names("z2", r.z2.len()));
    }
    h.extend(mode_ids.iter().map(|id| format!("p_{id}")));
    h.push("events".into());
    h
}

pub fn trace_csv(trace: &Trace, mode_ids: &[usize], stamp: &Stamp) -> Result<Vec<u8>, AppError> {
    let mut buf = format!(
        "# config_hash={} base_seed={} run_seed={} run_index={}\n",
        stamp.config_hash, stamp.seed, trace.seed, trace.run_index
    )
    .into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let header = trace_header(trace, mode_ids);
        w.write_record(&header).map_err(csv_err)?;
        for rec in &trace.records {
            let mut row = vec![
                rec.t.to_string(),
                rec.true_mode.to_string(),
                rec.believed_mode.to_string(),
                rec.phase.as_str().to_string(),
            ];
            for v in [&rec.x, &rec.v, &rec.r, &rec.y, &rec.z1, &rec.z2] {
                push_vec(&mut row, v);
            }
            for id in mode_ids {
                row.push(rec.posteriors.iter().find(|(m, _)| m == id).map_or(String::new(), |(_, p)| p.to_string()));
            }
            row.push(rec.events.iter().map(|e| e.describe()).collect::<Vec<_>>().join(";"));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush()?;
    }
    Ok(buf)
}

fn csv_err(e: csv::Error) -> AppError {
    AppError::io(e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub run_index: usize,
    pub run_seed: u64,
    pub steps: usize,
    pub convergence_step: Option<usize>,
    pub monotone_progress: bool,
    pub plans: usize,
    pub holds: usize,
    pub max_hold_length: usize,
    pub z1_nominal_violations: usize,
    pub z2_nominal_violations: usize,
    pub z1_plus_violations: usize,
    pub z2_plus_violations: usize,
    pub max_extension_episode: usize,
    pub detections: Vec<(usize, usize)>,
    pub fault_time: Option<usize>,
    pub confirmation_time: Option<usize>,
    pub confirmed_mode: Option<usize>,
    pub recovery_complete_time: Option<usize>,
    pub first_interval_error: Option<f64>,
    pub kappa_sum: f64,
}

impl SummaryRecord {
    pub fn new(trace: &Trace, stamp: &Stamp) -> Self {
        let s: &RunSummary = &trace.summary;
        SummaryRecord {
            stamp: stamp.clone(),
            run_index: trace.run_index,
            run_seed: trace.seed,
            steps: s.steps,
            convergence_step: s.convergence_step,
            monotone_progress: s.monotone_progress,
            plans: s.plans,
            holds: s.holds,
            max_hold_length: s.max_hold_length,
            z1_nominal_violations: s.z1_nominal_violations,
            z2_nominal_violations: s.z2_nominal_violations,
            z1_plus_violations: s.z1_plus_violations,
            z2_plus_violations: s.z2_plus_violations,
            max_extension_episode: s.max_extension_episode,
            detections: s.detections.clone(),
            fault_time: s.fault_time,
            confirmation_time: s.confirmation_time,
            confirmed_mode: s.confirmed_mode,
            recovery_complete_time: s.recovery_complete_time,
            first_interval_error: s.first_interval_error,
            kappa_sum: s.kappa_sum,
        }
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>, AppError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| AppError::io(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, AppError> {
    let bytes = fs::read(path).map_err(|e| AppError::io(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| AppError::io(format!("{}: {e}", path.display())))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Half-space description `normals * y <= offsets` of a cached set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetFile {
    #[serde(flatten)]
    pub stamp: Stamp,
    pub kind: String,
    pub mode_id: usize,
    pub horizon: usize,
    pub k_star: Option<usize>,
    pub eps: Option<f64>,
    pub n: usize,
    pub m: usize,
    pub rows: usize,
    pub normals: Rows,
    pub offsets: Vec<f64>,
}

impl SetFile {
    pub fn admissible(set: &AdmissibleSet, stamp: &Stamp) -> Self {
        SetFile {
            stamp: stamp.clone(),
            kind: "admissible".into(),
            mode_id: set.mode_id,
            horizon: set.horizon_t,
            k_star: Some(set.k_star),
            eps: Some(set.eps),
            n: set.n,
            m: set.m,
            rows: set.set.nrows(),
            normals: rows_of(set.set.normals()),
            offsets: set.set.offsets().iter().copied().collect(),
        }
    }

    /// Variables are `(x, v_0..v_{T_r-1}, tail)`.
    pub fn recovery(problem: &RecoveryProblem, stamp: &Stamp) -> Self {
        SetFile {
            stamp: stamp.clone(),
            kind: "recoverable".into(),
            mode_id: problem.target_mode,
            horizon: problem.t_r,
            k_star: None,
            eps: None,
            n: problem.n,
            m: problem.m,
            rows: problem.set.nrows(),
            normals: rows_of(problem.set.normals()),
            offsets: problem.set.offsets().iter().copied().collect(),
        }
    }

    pub fn normals_matrix(&self) -> Matrix {
        let cols = self.normals.first().map_or(0, Vec::len);
        Matrix::from_fn(self.normals.len(), cols, |i, j| self.normals[i][j])
    }
}

/// Files are written under `<out>/.staging` and moved into place by
/// [`Staging::commit`]. Dropping an uncommitted stage removes it.
pub struct Staging {
    out: PathBuf,
    stage: PathBuf,
    files: Vec<PathBuf>,
    committed: bool,
}

impl Staging {
    pub fn new(out: &Path) -> Result<Self, AppError> {
        let stage = out.join(".staging");
        if stage.exists() {
            fs::remove_dir_all(&stage)?;
        }
        fs::create_dir_all(&stage)?;
        Ok(Staging { out: out.to_path_buf(), stage, files: Vec::new(), committed: false })
    }

    /// `rel` is relative to the output directory, e.g. `traces/run_00000.csv`.
    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<(), AppError> {
        let path = self.stage.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.files.push(PathBuf::from(rel));
        Ok(())
    }

    pub fn commit(mut self) -> Result<Vec<PathBuf>, AppError> {
        for rel in &self.files {
            let dest = self.out.join(rel);
            if let Some(parent) = dest.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::rename(self.stage.join(rel), &dest)?;
        }
        fs::remove_dir_all(&self.stage)?;
        self.committed = true;
        Ok(std::mem::take(&mut self.files))
    }
}

impl Drop for Staging {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.stage);
        }
    }
}

pub fn trace_name(run_index: usize) -> String {
    format!("traces/run_{run_index:05}")
}
