use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use spde_control::experiment::{self, Check, Method};
use spde_control::{Error, ExperimentConfig};

const EXIT_CONFIG: u8 = 2;
const EXIT_NOT_CONVERGED: u8 = 3;
const EXIT_CHECK_FAILED: u8 = 4;

#[derive(Parser, Debug)]
#[command(name = "spde-control", version, about = "Simulate, verify and optimize the controlled stochastic Stokes system")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration; omitted fields keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one field by dotted path, e.g. `--set grid.n_steps=512`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Ensemble seed (overrides `ensemble.seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Uncontrolled ensemble with per-mode statistics.
    Simulate,
    /// Run the named checks, or `all`.
    Verify {
        #[arg(required = true)]
        checks: Vec<String>,
    },
    /// Optimal controls by `picard` or `gd`.
    Optimize {
        #[arg(default_value = "picard")]
        method: String,
    },
    /// Regularization gaps over `sweep.lambdas`.
    Sweep,
    /// Print the resolved configuration and its hash.
    ShowConfig,
}

fn fail(code: u8, msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(code)
}

fn load(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let text = match &cli.config {
        Some(p) => Some(
            std::fs::read_to_string(p)
                .map_err(|e| Error::InvalidConfig {
                    field: "--config".into(),
                    reason: format!("{}: {e}", p.display()),
                })?,
        ),
        None => None,
    };
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("ensemble.seed={s}"));
    }
    if let Some(o) = &cli.out {
        overrides.push(format!(
            "output.dir={}",
            serde_json::Value::String(o.display().to_string())
        ));
    }
    ExperimentConfig::load(text.as_deref(), &overrides)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            return fail(EXIT_CONFIG, "--threads must be at least 1");
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            return fail(1, e);
        }
    }
    let cfg = match load(&cli) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG, e),
    };
    let out = PathBuf::from(&cfg.output.dir);
    match run(&cli.command, &cfg, &out) {
        Ok(code) => code,
        Err(e) => {
            let code = match e {
                Error::InvalidConfig { .. } | Error::StabilityViolation { .. } | Error::Unsupported(_) => EXIT_CONFIG,
                _ => 1,
            };
            fail(code, e)
        }
    }
}

fn run(cmd: &Command, cfg: &ExperimentConfig, out: &std::path::Path) -> Result<ExitCode, Error> {
    match cmd {
        Command::Simulate => {
            experiment::simulate(cfg, out)?;
            println!("simulate: wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { checks } => {
            let list: Vec<Check> = if checks.iter().any(|c| c == "all") {
                Check::ALL.to_vec()
            } else {
                checks.iter().map(|c| c.parse()).collect::<Result<_, _>>()?
            };
            let mut all = true;
            for c in list {
                let v = experiment::verify(cfg, c, out)?;
                println!(
                    "{} {}: value {:.3e} tolerance {:.3e}",
                    if v.pass { "PASS" } else { "FAIL" },
                    v.check,
                    v.value,
                    v.tolerance
                );
                all &= v.pass;
            }
            Ok(if all { ExitCode::SUCCESS } else { ExitCode::from(EXIT_CHECK_FAILED) })
        }
        Command::Optimize { method } => {
            let m: Method = method.parse()?;
            let rep = experiment::optimize(cfg, m, out)?;
            println!(
                "optimize {}: {} after {} iterations, cost {:.10e}, residual {:.3e}",
                m.name(),
                if rep.converged { "converged" } else { "not converged" },
                rep.iterations,
                rep.final_cost(),
                rep.final_residual()
            );
            Ok(if rep.converged { ExitCode::SUCCESS } else { ExitCode::from(EXIT_NOT_CONVERGED) })
        }
        Command::Sweep => {
            let s = experiment::sweep(cfg, out)?;
            for i in 0..s.lambdas.len() {
                println!(
                    "lambda {:.1e}: fwd_u {:.3e} fwd_v {:.3e} bwd_z {:.3e} bwd_phi {:.3e}",
                    s.lambdas[i],
                    s.errors_forward_u[i],
                    s.errors_forward_v[i],
                    s.errors_backward_z[i],
                    s.errors_backward_phi[i]
                );
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::ShowConfig => {
            println!("{}", cfg.to_json_pretty());
            println!("hash {}", cfg.hash());
            Ok(ExitCode::SUCCESS)
        }
    }
}
