//! Markdown summaries and the `--check` thresholds.

use std::fmt::Write;

use crate::config::Governor;
use crate::mc::McSummary;

/// Slack on the chance-violation frequency over `1 - β`.
pub const CHANCE_SLACK: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub value: String,
    pub limit: String,
    pub pass: bool,
}

/// Checks that apply to every Monte Carlo summary. Fault-tolerant runs are
/// held to the relaxed sets, tracking runs to the nominal ones.
pub fn checks(s: &McSummary) -> Vec<Check> {
    let limit = (1.0 - s.beta) + CHANCE_SLACK;
    let mut out = Vec::new();
    if s.governor == Governor::Ftc {
        out.push(Check {
            name: "relaxed chance violation rate".into(),
            value: format!("{:.4}", s.max_relaxed_chance_violation_rate),
            limit: format!("<= {limit:.4}"),
            pass: s.max_relaxed_chance_violation_rate <= limit,
        });
        out.push(Check {
            name: "steps with mean z1 outside Z1+".into(),
            value: s.relaxed_expectation_violations.to_string(),
            limit: "= 0".into(),
            pass: s.relaxed_expectation_violations == 0,
        });
        out.push(Check {
            name: "longest extension episode".into(),
            value: s.max_extension_episode.to_string(),
            limit: format!("<= {}", s.t_e),
            pass: s.max_extension_episode <= s.t_e,
        });
        if s.confirmed_runs > 0 {
            out.push(Check {
                name: "recovery within T_r of confirmation".into(),
                value: format!("{}/{}", s.recovered_runs, s.confirmed_runs),
                limit: "all".into(),
                pass: s.recovered_runs == s.confirmed_runs,
            });
        }
    } else {
        out.push(Check {
            name: "chance violation rate".into(),
            value: format!("{:.4}", s.max_chance_violation_rate),
            limit: format!("<= {limit:.4}"),
            pass: s.max_chance_violation_rate <= limit,
        });
        out.push(Check {
            name: "expectation cells outside Z1".into(),
            value: s.expectation_violations.to_string(),
            limit: "= 0".into(),
            pass: s.expectation_violations == 0,
        });
    }
    out
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "-".into(), |v| v.to_string())
}

pub fn markdown(s: &McSummary, checks: &[Check]) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# {}\n", s.scenario);
    let _ = writeln!(md, "config hash `{}`, base seed {}, {} runs of {} steps\n", s.config_hash(), s.stamp.seed, s.runs, s.steps);
    let _ = writeln!(md, "| metric | value |\n|---|---|");
    let _ = writeln!(md, "| governor | {:?} |", s.governor);
    let _ = writeln!(md, "| beta | {} |", s.beta);
    if let Some(o) = s.omega {
        let _ = writeln!(md, "| Omega | {o} |");
    }
    let _ = writeln!(md, "| max chance violation rate (Z2) | {:.4} |", s.max_chance_violation_rate);
    let _ = writeln!(md, "| max chance violation rate (Z2+) | {:.4} |", s.max_relaxed_chance_violation_rate);
    let _ = writeln!(md, "| expectation cells outside Z1 | {} |", s.expectation_violations);
    let _ = writeln!(md, "| converged runs | {} |", s.converged_runs);
    let _ = writeln!(md, "| monotone runs | {} |", s.monotone_runs);
    let _ = writeln!(md, "| mean first-interval error | {} |", opt(s.mean_first_interval_error.map(|v| format!("{v:.5}"))));
    let _ = writeln!(md, "| mean kappa sum | {:.4} |", s.mean_kappa_sum);
    let _ = writeln!(md, "| longest hold | {} |", s.max_hold_length);
    let _ = writeln!(md, "| longest extension episode | {} |", s.max_extension_episode);
    if !s.identification.is_empty() {
        let _ = writeln!(md, "\n| true mode | runs | correct | rate |\n|---|---|---|---|");
        for r in &s.identification {
            let _ = writeln!(md, "| {} | {} | {} | {:.3} |", r.true_mode, r.runs, r.correct, r.rate);
        }
        let _ = writeln!(md, "\nundetected runs: {}", s.undetected_runs);
    }
    if s.confirmed_runs > 0 {
        let d = &s.detection_latency;
        let _ = writeln!(md, "\n| latency | count | mean | p50 | p90 | max |\n|---|---|---|---|---|---|");
        let _ = writeln!(
            md,
            "| confirmation - fault | {} | {} | {} | {} | {} |",
            d.count,
            opt(d.mean.map(|v| format!("{v:.2}"))),
            opt(d.p50),
            opt(d.p90),
            opt(d.max)
        );
        let _ = writeln!(md, "\nrecovered within T_r: {}/{}", s.recovered_runs, s.confirmed_runs);
    }
    let _ = writeln!(md, "\n| check | value | limit | result |\n|---|---|---|---|");
    for c in checks {
        let _ = writeln!(md, "| {} | {} | {} | {} |", c.name, c.value, c.limit, if c.pass { "pass" } else { "FAIL" });
    }
    md
}

impl McSummary {
    pub fn config_hash(&self) -> &str {
        &self.stamp.config_hash
    }
}
