use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use stochastic_action::experiment::{
    parse_config, run_experiment, write_config_error, ConfigError, ExitStatus, ExperimentConfig, ExperimentKind, OutputFormat,
    Violation,
};

#[derive(Parser)]
#[command(name = "stochastic-action", version, about = "Stochastic-action measurement experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Outcome statistics of a von Neumann measurement ensemble.
    Born(Flags),
    /// Trajectory export and equivariance against |Ψ(t_M)|².
    Trajectories(Flags),
    /// Monte Carlo average of the pre-measurement actual observable.
    PriorAverage(Flags),
    /// Effective collapse followed by a second measurement.
    Repeatability(Flags),
    /// Metric Hamiltonian, hydrodynamic residuals and the classical limit.
    Appendix(Flags),
    /// Schrödinger evolution at |λ| = (1 + δ)ħ.
    LambdaSweep(Flags),
    /// Deviation sampler and separability checks.
    StochasticCheck(Flags),
}

#[derive(Args)]
struct Flags {
    /// TOML experiment description; a built-in fixture is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads, 0 for one per core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    #[arg(long, value_enum)]
    format: Option<Format>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Format {
    Csv,
    Json,
}

const MEASUREMENT: &str = r#"
seed = 42

[physical]
g = 1.0
t_m = 1.0
sigma = 0.05
sep_factor = 8.0

[ensemble]
n_trials = 10000

[state]
modes = [
    { l = -1, weight = 0.5 },
    { l = 0, weight = 0.3 },
    { l = 1, weight = 0.2 },
]
"#;

const APPENDIX: &str = r#"
seed = 42

[appendix]
system = { dim = 1, metric = ["1 + 0.5*exp(-x^2/4)"], vector = ["0"], potential = "0.5*x^2" }
axes = [{ min = -10.0, max = 10.0, n = 512 }]
initial = { center = [1.0], width = [0.7], momentum = [0.5] }
dt = 1e-3
n_steps = 500

[sweep]
deltas = [-0.2, -0.1, 0.0, 0.1, 0.2]
dt = 1e-2
n_steps = 500
record_stride = 10
"#;

fn builtin(kind: ExperimentKind) -> String {
    let body = match kind {
        ExperimentKind::Appendix | ExperimentKind::LambdaSweep => APPENDIX,
        ExperimentKind::StochasticCheck => "seed = 42\n",
        _ => MEASUREMENT,
    };
    format!("kind = \"{}\"\n{body}", kind.name())
}

fn load(kind: ExperimentKind, flags: &Flags) -> Result<ExperimentConfig, ConfigError> {
    let text = match &flags.config {
        Some(path) => std::fs::read_to_string(path).map_err(|e| ConfigError {
            violations: vec![Violation { path: String::new(), message: format!("{}: {e}", path.display()) }],
        })?,
        None => builtin(kind),
    };
    let mut cfg = parse_config(&text)?;
    if cfg.kind != kind {
        return Err(ConfigError {
            violations: vec![Violation {
                path: "kind".into(),
                message: format!("config describes `{}` but the `{}` subcommand was invoked", cfg.kind.name(), kind.name()),
            }],
        });
    }
    if let Some(seed) = flags.seed {
        cfg.seed = seed;
    }
    if let Some(n) = flags.trials {
        cfg.ensemble.n_trials = n;
    }
    if let Some(f) = flags.format {
        cfg.format = match f {
            Format::Csv => OutputFormat::Csv,
            Format::Json => OutputFormat::Json,
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (kind, flags) = match cli.command {
        Command::Born(f) => (ExperimentKind::Born, f),
        Command::Trajectories(f) => (ExperimentKind::Trajectories, f),
        Command::PriorAverage(f) => (ExperimentKind::PriorAverage, f),
        Command::Repeatability(f) => (ExperimentKind::Repeatability, f),
        Command::Appendix(f) => (ExperimentKind::Appendix, f),
        Command::LambdaSweep(f) => (ExperimentKind::LambdaSweep, f),
        Command::StochasticCheck(f) => (ExperimentKind::StochasticCheck, f),
    };
    let out = flags.out.clone();
    let cfg = match load(kind, &flags) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("invalid configuration:\n{e}");
            if let Err(io) = write_config_error(&out, &e) {
                eprintln!("could not write error.json: {io}");
            }
            return code(ExitStatus::Validation);
        }
    };
    match run_experiment(&cfg, &out, flags.threads) {
        Ok(summary) => {
            if let Some(m) = &summary.manifest {
                for c in &m.assertions.checks {
                    eprintln!("{:<5} {} = {} (required {})", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.requirement);
                }
            }
            if let Some(msg) = &summary.message {
                eprintln!("{msg}");
            }
            eprintln!("results in {}", summary.out_dir.display());
            code(summary.status)
        }
        Err(e) => {
            eprintln!("error: {e}");
            code(ExitStatus::Runtime)
        }
    }
}

fn code(s: ExitStatus) -> ExitCode {
    ExitCode::from(s.code() as u8)
}
