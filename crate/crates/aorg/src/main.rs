//! `aorg` command line. Every flag can also be set through an `AORG_*`
//! environment variable (`AORG_CONFIG`, `AORG_SEED`, `AORG_RUNS`, `AORG_OMEGA`,
//! `AORG_BETA`, `AORG_OUT`, `AORG_PAPER_LITERAL_TIMING`, `AORG_JOBS`).
//!
//! Exit codes: 0 ok, 2 configuration or IO error, 3 solver error, 4 failed
//! check. Errors are printed to stderr as one JSON record.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aorg::app::{self, Overrides, Session};
use aorg::AppError;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aorg", version, about = "At-once reference governor toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long, env = "AORG_CONFIG")]
    config: PathBuf,
    #[arg(long, env = "AORG_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "AORG_RUNS")]
    runs: Option<usize>,
    #[arg(long, env = "AORG_OMEGA")]
    omega: Option<f64>,
    #[arg(long, env = "AORG_BETA")]
    beta: Option<f64>,
    #[arg(long, env = "AORG_OUT", default_value = "out")]
    out: PathBuf,
    /// Accept T_r >= T_e - 2 T_d with a warning.
    #[arg(long, env = "AORG_PAPER_LITERAL_TIMING")]
    paper_literal_timing: bool,
    /// Worker threads; all cores by default.
    #[arg(long, env = "AORG_JOBS")]
    jobs: Option<usize>,
}

impl Common {
    fn session(&self) -> Result<Session, AppError> {
        let ov = Overrides {
            seed: self.seed,
            runs: self.runs,
            omega: self.omega,
            beta: self.beta,
            paper_literal_timing: self.paper_literal_timing,
        };
        Session::load(&self.config, &ov)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check the mode graph, constraint sets and timing.
    Validate(Common),
    /// Build and cache the admissible and recoverable sets.
    BuildSets(Common),
    /// Simulate one run of the configured scenario.
    Run(Common),
    /// Simulate `runs` seeds and write aggregate metrics.
    MonteCarlo(Common),
    /// Compare sets and the detection bound against independent oracles.
    OracleCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 500)]
        points: usize,
        #[arg(long, default_value_t = 500)]
        trials: usize,
    },
    /// Render reports/monte_carlo.json as markdown.
    Report {
        #[arg(long, env = "AORG_OUT", default_value = "out")]
        out: PathBuf,
        /// Exit with status 4 when a check fails.
        #[arg(long)]
        check: bool,
    },
}

fn execute(cmd: &Command) -> Result<app::Outcome, AppError> {
    let out = |c: &Common| -> Result<PathBuf, AppError> {
        std::fs::create_dir_all(&c.out)?;
        Ok(c.out.clone())
    };
    match cmd {
        Command::Validate(c) => app::validate(&c.session()?, &out(c)?),
        Command::BuildSets(c) => app::build_sets(&c.session()?, &out(c)?),
        Command::Run(c) => app::run(&c.session()?, &out(c)?),
        Command::MonteCarlo(c) => app::monte_carlo(&c.session()?, &out(c)?, c.jobs).map(|(o, _)| o),
        Command::OracleCheck { common, points, trials } => {
            app::oracle_check(&common.session()?, &out(common)?, *points, *trials)
        }
        Command::Report { out, check } => app::report(Path::new(out), *check),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let err = AppError::config(e.to_string().trim_end());
            eprintln!("{}", err.record());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match execute(&cli.command) {
        Ok(outcome) => {
            println!("{}", outcome.message);
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.record());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
