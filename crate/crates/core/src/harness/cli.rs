//! `thin-channels` command line.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use super::config::{load_config, StudyConfig};
use super::study::{
    macro_and_write, micro_and_write, rederive_report, report_csv, resolve_out, run_and_write, verify_operators,
};
use crate::Error;

/// Identity residual accepted by `verify-operators`.
pub const IDENTITY_TOLERANCE: f64 = 1e-12;
const IDENTITY_SAMPLES: usize = 100;

#[derive(Debug, Parser)]
#[command(name = "thin-channels", version, about = "Thin-channel micro/macro solvers and two-scale diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Study config (JSON)
    config: Option<PathBuf>,
    #[arg(long = "config", value_name = "PATH")]
    config_flag: Option<PathBuf>,
    /// Output directory (overrides the config)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for independent runs
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// RNG seed (overrides the config)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Full study: micro runs for every ε, macro run, report and fields
    Run(Common),
    /// Unfolding identity suite on random fields
    VerifyOperators(Common),
    /// Micro runs only
    Micro(Common),
    /// Macro run only
    Macro(Common),
    /// Re-derive report.csv from the stored fields of a run directory
    Report { dir: PathBuf },
}

fn load(c: &Common) -> Result<StudyConfig, Error> {
    let path = match (&c.config_flag, &c.config) {
        (Some(a), Some(b)) if a != b => {
            return Err(Error::Validation("config given twice with different paths".into()))
        }
        (Some(p), _) | (None, Some(p)) => p,
        (None, None) => return Err(Error::Validation("a config path is required".into())),
    };
    let mut cfg = load_config(path)?;
    if let Some(seed) = c.seed {
        cfg.seed = seed;
        cfg.echo.seed = Some(seed);
    }
    if let Some(out) = &c.out {
        cfg.output = out.display().to_string();
        cfg.echo.output = Some(cfg.output.clone());
    }
    Ok(cfg)
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<i32, Error> {
    match cmd {
        Command::Run(c) => {
            let cfg = load(&c)?;
            let dir = resolve_out(&cfg, c.out.clone());
            let result = run_and_write(&cfg, &dir, c.threads)?;
            write!(out, "{}", report_csv(&result.rows))?;
            writeln!(out, "wrote {}", dir.display())?;
        }
        Command::VerifyOperators(c) => {
            let cfg = load(&c)?;
            let checks = verify_operators(&cfg, cfg.seed, IDENTITY_SAMPLES)?;
            let mut worst: f64 = 0.0;
            for k in &checks {
                let r = k.residuals.max();
                worst = worst.max(r);
                writeln!(
                    out,
                    "eps={} max_residual={:.3e} trace_constant={:.6} trace_ratio={:.6}",
                    k.eps, r, k.trace_constant, k.trace_ratio
                )?;
            }
            writeln!(out, "max identity residual: {worst:.3e}")?;
            if worst > IDENTITY_TOLERANCE || checks.iter().any(|k| k.trace_ratio > 1.0) {
                return Err(Error::Numerical(format!(
                    "identity residual {worst:e} exceeds {IDENTITY_TOLERANCE:e} or trace inequality failed"
                )));
            }
        }
        Command::Micro(c) => {
            let cfg = load(&c)?;
            let dir = resolve_out(&cfg, c.out.clone());
            let runs = micro_and_write(&cfg, &dir, c.threads)?;
            for r in &runs {
                writeln!(out, "eps={} snapshots={}", r.eps, r.traj.snapshots.len())?;
            }
            writeln!(out, "wrote {}", dir.display())?;
        }
        Command::Macro(c) => {
            let cfg = load(&c)?;
            let dir = resolve_out(&cfg, c.out.clone());
            let run = macro_and_write(&cfg, &dir)?;
            writeln!(out, "macro snapshots={}", run.traj.snapshots.len())?;
            writeln!(out, "wrote {}", dir.display())?;
        }
        Command::Report { dir } => {
            let (stored, fresh) = rederive_report(&dir)?;
            write!(out, "{fresh}")?;
            if stored != fresh {
                return Err(Error::Numerical("re-derived report differs from report.csv".into()));
            }
            writeln!(out, "report.csv reproduced bit-exactly")?;
        }
    }
    Ok(0)
}

/// Runs the command line on `args` (including the program name) and
/// returns the exit status.
pub fn run(args: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = if code == 0 {
                write!(out, "{e}")
            } else {
                write!(err, "{}", e.render())
            };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
