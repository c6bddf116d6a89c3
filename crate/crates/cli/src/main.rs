//! `mfbsde`: configuration-driven experiment runner.
//!
//! Exit codes: 0 pass / solved, 2 fail / unsolvable (inverted for
//! `nonsolvable-demo`, which exits 0 iff the instance is unsolvable),
//! 1 on any error. Every run writes `manifest.json` into the output directory.

mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Parser, Subcommand};
use mfbsde::acceptance::Scale;
use mfbsde::{Error, Result};
use serde_json::json;

use commands::{Run, Verdict};
use config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "mfbsde", version, about = "Mean-field FBSDEs with jumps: solver and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML experiment configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    particles: Option<usize>,
    #[arg(long, global = true)]
    steps: Option<usize>,
}

#[derive(Subcommand, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Solve an uncontrolled instance by continuation.
    Solve,
    /// Check monotonicity constants and probe the assembled field.
    CheckMono,
    /// Stochastic maximum principle residual of a control instance.
    Smp,
    /// Riccati system, first-order condition and optimality gap of the portfolio problem.
    Portfolio,
    /// Fixed point, Riccati system and optimality gap of the linear-quadratic problem.
    Lq,
    /// Continuity sweep over the terminal coefficient.
    SweepAlpha,
    /// Solve the instance without adapted solution; succeeds iff it is reported unsolvable.
    NonsolvableDemo,
    /// Run the acceptance suite.
    Selftest {
        /// Documented sizes instead of the reduced smoke-test sizes.
        #[arg(long)]
        full: bool,
    },
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Solve => "solve",
            Command::CheckMono => "check-mono",
            Command::Smp => "smp",
            Command::Portfolio => "portfolio",
            Command::Lq => "lq",
            Command::SweepAlpha => "sweep-alpha",
            Command::NonsolvableDemo => "nonsolvable-demo",
            Command::Selftest { .. } => "selftest",
        }
    }

    fn default_problem(self) -> &'static str {
        match self {
            Command::Smp | Command::Lq => "lq",
            Command::Portfolio => "portfolio",
            Command::NonsolvableDemo => "example_3_2",
            _ => "example_3_1",
        }
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::ConfigParse(_) => "ConfigParse",
        Error::UnknownProblem(_) => "UnknownProblem",
        Error::Io(_) => "IoFailure",
        Error::NonContracting { .. } => "NonContracting",
        Error::FixedPointDiverged { .. } => "FixedPointDiverged",
        Error::DegenerateRiccati { .. } => "DegenerateRiccati",
        Error::NotSolved(_) => "NotSolved",
        _ => "InvalidInput",
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::for_problem(cli.command.default_problem()),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(p) = cli.particles {
        cfg.particles = p;
    }
    if let Some(n) = cli.steps {
        cfg.grid.steps = n;
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(command: Command, cfg: &ExperimentConfig, out: &Path) -> Result<Run> {
    match command {
        Command::Solve => commands::solve(cfg, out),
        Command::CheckMono => commands::check_mono(cfg, out),
        Command::Smp => commands::smp(cfg, out),
        Command::Portfolio => commands::portfolio(cfg, out),
        Command::Lq => commands::lq(cfg, out),
        Command::SweepAlpha => commands::sweep_alpha(cfg, out),
        Command::NonsolvableDemo => commands::nonsolvable_demo(cfg, out),
        Command::Selftest { full } => {
            let scale = if full { Scale::Full } else { cfg.options.scale };
            commands::selftest(scale, out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let started = Instant::now();
    let stamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{}", json!({ "error": error_kind(&e), "message": e.to_string() }));
            return ExitCode::from(1);
        }
    };
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let result = std::fs::create_dir_all(&out)
        .map_err(Error::from)
        .and_then(|_| cfg.to_toml())
        .and_then(|text| Ok(std::fs::write(out.join("config.toml"), text)?))
        .and_then(|_| dispatch(cli.command, &cfg, &out));
    let (code, status, summary, generator) = match result {
        Ok(run) => {
            let code = match run.verdict {
                Verdict::Pass => 0,
                Verdict::Fail => 2,
            };
            (code, run.status, run.summary, run.generator)
        }
        Err(e) => {
            let diag = json!({ "error": error_kind(&e), "message": e.to_string() });
            eprintln!("{diag}");
            (1, "Error".to_string(), diag, None)
        }
    };
    let manifest = json!({
        "command": cli.command.name(),
        "config": cfg,
        "seed": cfg.seed,
        "generator": generator,
        "versions": { "mfbsde": env!("CARGO_PKG_VERSION") },
        "started_unix": stamp,
        "wall_time_seconds": started.elapsed().as_secs_f64(),
        "status": status,
        "exit_code": code,
        "summary": summary,
    });
    if let Err(e) = mfbsde::report::write_json(&out.join("manifest.json"), &manifest) {
        eprintln!("{}", json!({ "error": "IoFailure", "message": e.to_string() }));
        return ExitCode::from(1);
    }
    if code == 0 || code == 2 {
        println!("{} {}: {status}", cli.command.name(), cfg.problem);
    }
    ExitCode::from(code)
}
