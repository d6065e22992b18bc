//! Pipeline front end: dataset generation, uncertainty and policy
//! training, benchmarking, noise sweeps, single episodes, and SVG export.
//! Exit codes: 0 success, 2 configuration error (also used by clap for
//! usage errors), 3 runtime error, 4 acceptance threshold not met.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;
pub const EXIT_ACCEPTANCE: u8 = 4;

/// One failure type per exit code; every command funnels into this.
#[derive(Debug)]
pub enum Failure {
    Config(String),
    Runtime(String),
    Acceptance(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => EXIT_CONFIG,
            Failure::Runtime(_) => EXIT_RUNTIME,
            Failure::Acceptance(_) => EXIT_ACCEPTANCE,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Config(m) | Failure::Runtime(m) | Failure::Acceptance(m) => m,
        }
    }
}

pub fn config_err(msg: impl std::fmt::Display) -> Failure {
    Failure::Config(msg.to_string())
}

pub fn runtime_err(msg: impl std::fmt::Display) -> Failure {
    Failure::Runtime(msg.to_string())
}

#[derive(Parser)]
#[command(
    name = "socnav",
    version,
    about = "Crowd navigation with pedestrian unpredictability estimates",
    after_help = "Configuration layers, weakest first: built-in defaults, --config file, \
                  SOCNAV_* environment variables (SOCNAV_TRAINER__HP__GAMMA=0.9; '__' \
                  separates path segments), --set overrides (--set trainer.hp.gamma=0.9). \
                  The resolved config is echoed to <outdir>/config.echo."
)]
struct Cli {
    /// TOML config file; sections mirror the pipeline stages.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed; all randomness derives from it through named substreams.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,

    /// Output directory for artifacts (config.echo, logs, checkpoints).
    #[arg(long, global = true, default_value = "out")]
    outdir: PathBuf,

    /// Worker threads for trial and training fan-out; 1 keeps everything
    /// on the calling thread.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    /// Config override, repeatable: --set trainer.peds=10
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out noisy crowds and write per-horizon deviation datasets.
    GenUncertaintyData {
        /// Crowd episodes to roll out (default from config).
        #[arg(long)]
        episodes: Option<usize>,
        /// Deviation ceiling for the recorded crowds.
        #[arg(long)]
        rho_max: Option<f64>,
        #[arg(long)]
        peds: Option<usize>,
    },
    /// Train the 20-horizon deviation estimator ensemble and save the bank.
    TrainUncertainty {
        /// Directory with windows_tNN.bin files from gen-uncertainty-data;
        /// omitted, datasets are generated in process.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train a value network variant end to end.
    TrainPolicy {
        /// sarl | training | model | reward
        #[arg(long)]
        variant: Option<String>,
        /// Value-iteration episodes (default from config).
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Benchmark a trained policy (plus optional baselines) on mixed crowds.
    Evaluate {
        /// Trained value network checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Uncertainty bank directory for deviation estimates.
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Extra reference policies, repeatable: orca | social_force
        #[arg(long)]
        baseline: Vec<String>,
        #[arg(long)]
        trials: Option<u64>,
        /// Also write per-trial trajectory logs.
        #[arg(long)]
        record_trajectories: bool,
        /// Fail (exit 4) if the learned policy's success rate lands below
        /// this fraction.
        #[arg(long)]
        min_success_rate: Option<f64>,
    },
    /// Outcome rates across a grid of crowd deviation ceilings.
    SweepNoise {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Comma-separated rho_max grid.
        #[arg(long, default_value = "0.0,0.1,0.2,0.3,0.4,0.5")]
        grid: String,
        #[arg(long)]
        baseline: Vec<String>,
        #[arg(long)]
        trials: Option<u64>,
    },
    /// Run one episode and write its trajectory log.
    Simulate {
        /// circle | outgoing | oncoming | perpendicular | random | perpetual
        /// (full snake_case names also accepted).
        #[arg(long)]
        scenario: Option<String>,
        #[arg(long)]
        peds: Option<usize>,
        /// Robot policy: orca | social_force | learned
        #[arg(long)]
        policy: Option<String>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        bank: Option<PathBuf>,
        /// Crowd deviation ceiling for this episode.
        #[arg(long)]
        rho_max: Option<f64>,
    },
    /// Render a trajectory log to SVG.
    Plot {
        /// Trajectory CSV written by simulate or evaluate.
        #[arg(long)]
        input: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    let app = config::load_config(cli.config.as_deref(), std::env::vars(), &cli.set)
        .map_err(config_err)?;

    std::fs::create_dir_all(&cli.outdir)
        .map_err(|e| runtime_err(format!("cannot create {}: {e}", cli.outdir.display())))?;
    let echo = config::render_echo(&app).map_err(config_err)?;
    std::fs::write(cli.outdir.join("config.echo"), echo)
        .map_err(|e| runtime_err(format!("cannot write config echo: {e}")))?;

    socnav_core::par::configure_threads(cli.jobs);
    let mode = socnav_core::par::ExecMode::from_jobs(cli.jobs);

    let ctx = commands::Ctx {
        app,
        seed: cli.seed,
        outdir: cli.outdir,
        mode,
    };

    match cli.command {
        Command::GenUncertaintyData {
            episodes,
            rho_max,
            peds,
        } => commands::gen_uncertainty_data(ctx, episodes, rho_max, peds),
        Command::TrainUncertainty { data, epochs } => {
            commands::train_uncertainty(ctx, data.as_deref(), epochs)
        }
        Command::TrainPolicy { variant, episodes } => {
            commands::train_policy(ctx, variant.as_deref(), episodes)
        }
        Command::Evaluate {
            checkpoint,
            bank,
            baseline,
            trials,
            record_trajectories,
            min_success_rate,
        } => commands::evaluate(
            ctx,
            checkpoint.as_deref(),
            bank.as_deref(),
            &baseline,
            trials,
            record_trajectories,
            min_success_rate,
        ),
        Command::SweepNoise {
            checkpoint,
            bank,
            grid,
            baseline,
            trials,
        } => commands::sweep_noise(
            ctx,
            checkpoint.as_deref(),
            bank.as_deref(),
            &grid,
            &baseline,
            trials,
        ),
        Command::Simulate {
            scenario,
            peds,
            policy,
            checkpoint,
            bank,
            rho_max,
        } => commands::simulate(
            ctx,
            scenario.as_deref(),
            peds,
            policy.as_deref(),
            checkpoint.as_deref(),
            bank.as_deref(),
            rho_max,
        ),
        Command::Plot { input } => commands::plot(ctx, &input),
    }
}
