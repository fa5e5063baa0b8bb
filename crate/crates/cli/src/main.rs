//! `riskeig`: batch front-end for the Dirichlet eigenvalue solvers and the
//! Monte Carlo verification battery.
//!
//! Exit codes: 0 success, 1 a check failed or a solver gave up, 2 usage or
//! validation error, 3 infrastructure failure (I/O, thread pool).

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod output;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use config::{ExperimentConfig, Overrides, Plan};
use output::{sha256_hex, to_json_bytes, write_json, Manifest, OutDir};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] riskeig_core::Error),
    #[error("{0}")]
    Infra(String),
    #[error("{failed} of {total} checks failed")]
    ChecksFailed { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use riskeig_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) => match e {
                E::InvalidModel(_) | E::UnknownModel(_) | E::InvalidArgument(_) | E::Resource { .. } => 2,
                E::Monotonicity { .. } => 2,
                _ => 1,
            },
            CliError::Infra(_) => 3,
            CliError::ChecksFailed { .. } => 1,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Core(_) if self.exit_code() == 2 => "validation",
            CliError::Core(_) => "solver",
            CliError::Infra(_) => "infrastructure",
            CliError::ChecksFailed { .. } => "checks_failed",
        }
    }

    fn to_json(&self) -> serde_json::Value {
        let mut v = json!({
            "error": {
                "kind": self.kind(),
                "message": self.to_string(),
                "exit_code": self.exit_code(),
            }
        });
        if let CliError::Core(riskeig_core::Error::Sweep { radius, partial, .. }) = self {
            v["error"]["radius"] = json!(radius);
            v["error"]["partial_rows"] = serde_json::to_value(partial).unwrap_or_default();
        }
        v
    }
}

#[derive(Parser, Debug)]
#[command(name = "riskeig", version, about = "Risk-sensitive control via Dirichlet principal eigenvalues")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// One Dirichlet HJB solve on the largest radius.
    Solve(Common),
    /// Eigenvalues over the radius schedule and the extrapolated limit.
    Sweep(Common),
    /// Ground state and its ergodicity classification.
    Certify(Common),
    /// Runs a verification suite and reports pass/fail per check.
    Verify(Common),
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Built-in model name (ou_quadratic, lq_clamped, double_well, bounded_nm).
    #[arg(long)]
    model: Option<String>,
    /// JSON experiment file; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated radius schedule.
    #[arg(long, value_delimiter = ',')]
    radii: Option<Vec<f64>>,
    /// Single radius (replaces the schedule).
    #[arg(long)]
    r: Option<f64>,
    /// Grid spacing.
    #[arg(long)]
    h: Option<f64>,
    /// Eigensolver tolerance.
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (default: available cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Verification suite (verify only).
    #[arg(long)]
    suite: Option<String>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            model: self.model.clone(),
            radii: self.radii.clone(),
            r: self.r,
            h: self.h,
            tol: self.tol,
            paths: self.paths,
            dt: self.dt,
            horizon: self.horizon,
            seed: self.seed,
            out: self.out.clone(),
            suite: self.suite.clone(),
        }
    }
}

fn run(name: &str, common: &Common) -> Result<(), CliError> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    cfg.apply(&common.overrides());
    if name != "verify" && cfg.suite.is_some() {
        return Err(CliError::Usage("--suite only applies to verify".into()));
    }
    let plan = Plan::resolve(cfg)?;

    let threads = match common.threads {
        Some(0) => return Err(CliError::Usage("--threads must be positive".into())),
        Some(n) => n,
        None => std::thread::available_parallelism().map_or(1, |n| n.get()),
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Infra(format!("thread pool: {e}")))?;

    let out = OutDir::create(&plan.out)?;
    let config_value = commands::to_value(&plan.config)?;
    let config_bytes = to_json_bytes(&config_value)?;
    write_json(
        &out.path("manifest.json"),
        &Manifest {
            tool: "riskeig",
            version: env!("CARGO_PKG_VERSION"),
            command: name,
            config_sha256: sha256_hex(&config_bytes),
            seed: plan.sim.seed,
            threads,
            config: &config_value,
        },
    )?;

    let outcome = match name {
        "solve" => commands::solve(&plan, &out)?,
        "sweep" => commands::sweep_cmd(&plan, &out)?,
        "certify" => commands::certify(&plan, &out)?,
        "verify" => verify::verify(&plan, &out)?,
        _ => unreachable!("clap rejects unknown subcommands"),
    };
    write_json(&out.path("result.json"), &outcome.result)?;

    if name == "verify" {
        print_checks(&outcome.result);
    } else {
        let summary = summary(&outcome.result);
        let bytes = to_json_bytes(&summary)?;
        print!("{}", String::from_utf8_lossy(&bytes));
    }
    if outcome.failed_checks > 0 {
        return Err(CliError::ChecksFailed {
            failed: outcome.failed_checks,
            total: outcome.total_checks,
        });
    }
    Ok(())
}

/// The report without long arrays; nodal vectors stay in the files.
fn summary(result: &serde_json::Value) -> serde_json::Value {
    const MAX_LEN: usize = 16;
    match result {
        serde_json::Value::Object(map) => map
            .iter()
            .filter(|(_, v)| v.as_array().is_none_or(|a| a.len() <= MAX_LEN))
            .map(|(k, v)| (k.clone(), summary(v)))
            .collect::<serde_json::Map<_, _>>()
            .into(),
        other => other.clone(),
    }
}

fn print_checks(result: &serde_json::Value) {
    let Some(checks) = result["checks"].as_array() else {
        return;
    };
    for c in checks {
        println!(
            "{:<4} {:<20} measured {:<24} expected {}",
            if c["passed"].as_bool() == Some(true) { "PASS" } else { "FAIL" },
            c["name"].as_str().unwrap_or("?"),
            c["measured"],
            c["expected"].as_str().unwrap_or("?"),
        );
    }
    println!("{} of {} checks failed", result["failed"], result["total"]);
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (name, common) = match &cli.command {
        Command::Solve(c) => ("solve", c),
        Command::Sweep(c) => ("sweep", c),
        Command::Certify(c) => ("certify", c),
        Command::Verify(c) => ("verify", c),
    };
    match run(name, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code())
        }
    }
}
