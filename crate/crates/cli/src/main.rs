//! `vpd`: train, verify, compare and re-render.
//!
//! Exit codes: 0 success, 1 config error, 2 runtime failure, 3 oracle-check
//! failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vpd_core::checks::{run_suite, SuiteConfig};
use vpd_core::report::{compare, render_charts, resume_experiment, run_experiment};
use vpd_core::trainer::{Method, TrainConfig};
use vpd_core::Error;

const PRESETS: &[(&str, &str)] = &[
    ("vpd_keyedcopy", include_str!("../../../configs/vpd_keyedcopy.toml")),
    ("modsum", include_str!("../../../configs/modsum.toml")),
    ("modsum_allfail", include_str!("../../../configs/modsum_allfail.toml")),
    ("oracle_toy", include_str!("../../../configs/oracle_toy.toml")),
    ("smoke", include_str!("../../../configs/smoke.toml")),
];

#[derive(Parser)]
#[command(name = "vpd", version, about = "Variational policy distillation on toy environments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Config file path, or the name of a built-in preset.
    #[arg(long)]
    config: String,
    /// Dotted override, e.g. `--set hybrid.omega_rl=0.3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed override applied before any `--set`.
    #[arg(long, env = "VPD_SEED", hide_env_values = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one configuration and write a run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue a run from `<out>/checkpoint`.
    Resume {
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact identities, the BCO bound and finite-difference gradients.
    OracleCheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Write the JSON records here.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 50)]
        gradient_instances: usize,
        /// Test fixture: scale beta on one side of the named identity.
        #[arg(long, hide = true)]
        corrupt_beta: Option<String>,
    },
    /// Run every (method, seed) cell and tabulate final eval accuracy.
    Compare {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        methods: Vec<String>,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-render charts from an existing run directory.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// List the built-in presets.
    Presets,
}

enum Failure {
    Config(String),
    Runtime(String),
    Oracle(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::EnumerationCap { .. } => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn load(args: &ConfigArgs) -> Result<TrainConfig, Failure> {
    let path = Path::new(&args.config);
    let text = if path.is_file() {
        fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?
    } else if let Some((_, t)) = PRESETS.iter().find(|(n, _)| *n == args.config) {
        t.to_string()
    } else {
        return Err(Failure::Config(format!(
            "`{}` is neither a file nor a preset ({})",
            args.config,
            PRESETS.iter().map(|p| p.0).collect::<Vec<_>>().join(", ")
        )));
    };
    let mut overrides = Vec::new();
    if let Some(s) = args.seed {
        overrides.push(format!("seed={s}"));
    }
    overrides.extend(args.set.iter().cloned());
    Ok(TrainConfig::from_toml_with_overrides(&text, &overrides)?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Train { cfg, out } => {
            let cfg = load(&cfg)?;
            print!("{}", cfg.to_toml());
            let summary = run_experiment(cfg, &out)?;
            println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
        }
        Cmd::Resume { out } => {
            let summary = resume_experiment(&out)?;
            println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
        }
        Cmd::OracleCheck {
            cfg,
            out,
            trials,
            gradient_instances,
            corrupt_beta,
        } => {
            let cfg = load(&cfg)?;
            let mut suite = SuiteConfig::new(cfg.env.clone(), cfg.beta, cfg.seed);
            suite.trials = trials;
            suite.gradient_instances = gradient_instances;
            suite.corrupt = corrupt_beta;
            let records = run_suite(&suite)?;
            for r in &records {
                println!(
                    "{} {:<26} max_residual={:.3e} tolerance={:.0e}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.max_residual,
                    r.tolerance
                );
            }
            if let Some(out) = out {
                fs::write(&out, serde_json::to_string_pretty(&records).expect("records serialize"))
                    .map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
            }
            let failed: Vec<&str> = records.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
            if !failed.is_empty() {
                return Err(Failure::Oracle(format!("failed: {}", failed.join(", "))));
            }
        }
        Cmd::Compare {
            cfg,
            methods,
            seeds,
            out,
        } => {
            let cfg = load(&cfg)?;
            let methods = methods
                .iter()
                .map(|m| Method::parse(m))
                .collect::<vpd_core::Result<Vec<_>>>()?;
            let cmp = compare(&cfg, &methods, &seeds, &out)?;
            print!("{}", cmp.table());
        }
        Cmd::Report { run } => render_charts(&run)?,
        Cmd::Presets => {
            for (name, _) in PRESETS {
                println!("{name}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Oracle(m)) => {
            eprintln!("oracle check failed: {m}");
            ExitCode::from(3)
        }
    }
}
