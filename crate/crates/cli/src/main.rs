//! `kfp`: batch runner for the kinetic Fokker-Planck solver and certificates.
//!
//! Exit codes: 0 success, 2 invalid configuration, 3 runtime failure (the
//! report still records what went wrong).

mod config;
mod experiments;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use kfp_core::checkpoint;
use kfp_core::solver::Observation;
use kfp_core::KfpError;
use serde_json::{json, Value};

use config::{Config, Experiment, HarrisSection, Problems, SubsolutionSection};
use experiments::Outcome;

#[derive(Parser)]
#[command(name = "kfp", version, about = "Kinetic Fokker-Planck experiments: simulation, certificates and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Artifact directory (created if missing).
    #[arg(long, default_value = "kfp-out")]
    out: PathBuf,
    /// Overrides `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Evolve an initial datum and record mass and weighted norms.
    Simulate(Common),
    /// Certify the Lyapunov and zero-order conditions on a sampling box.
    Verify(Common),
    /// Run the Harris constant chain.
    HarrisRate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        b: Option<f64>,
        #[arg(long)]
        t: Option<f64>,
        #[arg(long)]
        mu_mass: Option<f64>,
        #[arg(long)]
        m_of_r: Option<f64>,
    },
    /// Build the barrier constants and sample the subsolution inequality.
    Subsolution {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        m: Option<f64>,
        #[arg(long)]
        v: Option<f64>,
        #[arg(long)]
        r: Option<f64>,
        #[arg(long)]
        tau: Option<f64>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Short-time L¹(m) → L²(m) regularization probe.
    Regularize(Common),
    /// Compute the discrete steady state.
    SteadyState(Common),
    /// Run the experiments listed in `report.experiments` into one bundle.
    Report(Common),
}

fn pick<T>(flag: Option<T>, cfg: Option<T>) -> Option<T> {
    flag.or(cfg)
}

/// Parses the config and folds the command-line overrides into it.
fn load(cmd: Command) -> Result<(Experiment, Common, Config), Problems> {
    let (exp, common) = match &cmd {
        Command::Simulate(c) => (Experiment::Simulate, c.clone()),
        Command::Verify(c) => (Experiment::Verify, c.clone()),
        Command::HarrisRate { common, .. } => (Experiment::HarrisRate, common.clone()),
        Command::Subsolution { common, .. } => (Experiment::Subsolution, common.clone()),
        Command::Regularize(c) => (Experiment::Regularize, c.clone()),
        Command::SteadyState(c) => (Experiment::SteadyState, c.clone()),
        Command::Report(c) => (Experiment::Report, c.clone()),
    };
    let mut cfg = match &common.config {
        None => Config::default(),
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Problems(vec![format!("config: cannot read {}: {e}", path.display())]))?;
            Config::parse(&text)?
        }
    };
    if let Some(seed) = common.seed {
        cfg.run.seed = Some(seed);
    }
    match cmd {
        Command::HarrisRate {
            alpha,
            b,
            t,
            mu_mass,
            m_of_r,
            ..
        } => {
            let h = cfg.harris.take().unwrap_or_default();
            cfg.harris = Some(HarrisSection {
                alpha: pick(alpha, h.alpha),
                b: pick(b, h.b),
                t: pick(t, h.t),
                mu_mass: pick(mu_mass, h.mu_mass),
                m_of_r: pick(m_of_r, h.m_of_r),
            });
        }
        Command::Subsolution {
            m,
            v,
            r,
            tau,
            alpha,
            samples,
            ..
        } => {
            let s = cfg.subsolution.take().unwrap_or_default();
            cfg.subsolution = Some(SubsolutionSection {
                m: pick(m, s.m),
                v: pick(v, s.v),
                r: pick(r, s.r),
                tau: pick(tau, s.tau),
                alpha: pick(alpha, s.alpha),
                samples: pick(samples, s.samples),
            });
        }
        _ => {}
    }
    let mut problems = Problems::default();
    cfg.validate(exp, &mut problems);
    if problems.is_empty() {
        Ok((exp, common, cfg))
    } else {
        Err(problems)
    }
}

fn error_kind(e: &KfpError) -> &'static str {
    match e {
        KfpError::Domain(_) => "domain",
        KfpError::Contract(_) => "contract",
        KfpError::Validation(_) => "validation",
        KfpError::Precondition(_) => "precondition",
        KfpError::Cfl { .. } => "cfl",
        KfpError::Range(_) => "range",
        KfpError::BudgetExceeded { .. } => "budget-exceeded",
        KfpError::Unsupported(_) => "unsupported",
        KfpError::Internal(_) => "internal",
        KfpError::Format(_) => "format",
        KfpError::UnsupportedVersion(_) => "unsupported-version",
        KfpError::Io(_) => "io",
    }
}

fn unix_now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn execute(exp: Experiment, common: &Common, cfg: &Config) -> std::io::Result<bool> {
    let out = &common.out;
    std::fs::create_dir_all(out)?;
    let started = unix_now();
    let plan: Vec<Experiment> = match exp {
        Experiment::Report => cfg.report.as_ref().map(|r| r.experiments.clone()).unwrap_or_default(),
        e => vec![e],
    };
    let bundled = exp == Experiment::Report;

    let mut bundle = output::Bundle::default();
    let mut observations: Vec<Observation> = Vec::new();
    let mut plots = Vec::new();
    let mut failed = false;
    let mut error = None;
    for e in plan {
        match experiments::run(e, cfg) {
            Ok(Outcome {
                section,
                observations: obs,
                plots: p,
                checkpoints,
                failed: f,
            }) => {
                failed |= f;
                bundle.insert(e.name(), section);
                let prefix = |name: &str| if bundled { format!("{e}/{name}") } else { name.to_string() };
                observations.extend(obs.into_iter().map(|o| Observation {
                    observable: prefix(&o.observable),
                    ..o
                }));
                plots.extend(p.into_iter().map(|(n, s)| (prefix(&n), s)));
                if !checkpoints.is_empty() {
                    let dir = out.join("checkpoints");
                    std::fs::create_dir_all(&dir)?;
                    for (name, field) in checkpoints {
                        let path = dir.join(format!("{e}_{name}.txt"));
                        if let Err(err) = checkpoint::save(&field, &path) {
                            bundle.warn(format!("checkpoint {}: {err}", path.display()));
                        }
                    }
                }
            }
            Err(err) => {
                error = Some(json!({ "experiment": e.name(), "kind": error_kind(&err), "message": err.to_string() }));
                break;
            }
        }
    }

    std::fs::write(out.join("observations.csv"), output::observations_csv(&observations))?;
    if !plots.is_empty() {
        std::fs::write(out.join("decay.svg"), output::decay_svg(&format!("kfp {exp}"), &plots))?;
    }
    let mut provenance = json!({
        "generator": format!("kfp {}", env!("CARGO_PKG_VERSION")),
        "seed": cfg.seed(),
        "grid_hash": cfg.grid().and_then(|g| g.ok()).map(|g| output::grid_hash(&g)),
    });
    if cfg.run.timestamps {
        provenance["timestamps"] = json!({ "started_unix": started, "finished_unix": unix_now() });
    }
    let status = if error.is_some() {
        "error"
    } else if failed {
        "failed"
    } else {
        "ok"
    };
    let config = serde_json::to_value(cfg).unwrap_or(Value::Null);
    let ok = status == "ok";
    output::write_json(&out.join("report.json"), &bundle.finish(config, provenance, status, error))?;
    if !ok {
        eprintln!("kfp {exp}: {status}; see {}", out.join("report.json").display());
    }
    Ok(ok)
}

fn report_problems(p: &Problems) {
    eprintln!("error: invalid configuration");
    for line in &p.0 {
        eprintln!("  {line}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (exp, common, cfg) = match load(cli.command) {
        Ok(v) => v,
        Err(p) => {
            report_problems(&p);
            return ExitCode::from(2);
        }
    };
    match execute(exp, &common, &cfg) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: writing artifacts to {}: {e}", Path::new(&common.out).display());
            ExitCode::from(3)
        }
    }
}
