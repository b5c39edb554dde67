//! `dfgo`: simulate urban-canyon GNSS data, train the learned weighting,
//! evaluate learned or classical weighting through the same solver, and run
//! the gradient audit.
//!
//! Exit codes: 0 success, 1 validation error (bad flags, config, or file
//! versions), 2 runtime/numerical error.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use dfgo_core::config::RunConfig;
use dfgo_core::dataset::{self, Dataset};
use dfgo_core::error::Error;
use dfgo_core::eval::{self, EvalMethod};
use dfgo_core::gradcheck::{self, Corruption};
use dfgo_core::sim;
use dfgo_core::trainer::{self, Objective, TrainConfig};
use dfgo_core::weight_net::ModelCheckpoint;
use dfgo_core::weighting::WeightScheme;

/// Environment variable providing the default output directory for `eval`.
const OUT_DIR_ENV: &str = "DFGO_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "dfgo",
    about = "GNSS factor-graph positioning with learned, credibility-supervised weighting",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic urban-canyon dataset.
    Simulate {
        /// Difficulty preset: medium | deep | harsh.
        #[arg(long, default_value = "harsh")]
        preset: String,
        /// Run configuration file overriding the preset scenario.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of epochs (overrides preset/config).
        #[arg(long)]
        epochs: Option<usize>,
        /// Scenario seed (overrides preset/config).
        #[arg(long)]
        seed: Option<u64>,
        /// Output dataset path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the weighting network on a labeled dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Objective: mae | nll | es | combined.
        #[arg(long, default_value = "combined")]
        objective: String,
        /// Run configuration file for trainer/loss/arch settings.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training seed (overrides config).
        #[arg(long)]
        seed: Option<u64>,
        /// Passes over the training windows (overrides config).
        #[arg(long)]
        passes: Option<usize>,
        /// Window stride (overrides config).
        #[arg(long)]
        stride: Option<usize>,
        /// Output model checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Training-state checkpoint to resume from (pass boundary).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Where to write the full training state (for later resumption).
        #[arg(long)]
        state_out: Option<PathBuf>,
        /// Training-log CSV path.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a trained model or a classical scheme on a dataset.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        /// Model checkpoint (mutually exclusive with --scheme).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Classical scheme: elevation | sigma-eps | gogps.
        #[arg(long)]
        scheme: Option<String>,
        /// Output directory (falls back to $DFGO_OUT_DIR, then "./dfgo-out").
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Additionally export per-satellite weight/skyplot files for this
        /// epoch index.
        #[arg(long)]
        diagnose_epoch: Option<usize>,
    },
    /// Run the finite-difference gradient audit on a dataset's first window.
    Gradcheck {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, default_value_t = 5)]
        seed: u64,
        /// Negative-control hook: corrupt the analytic information
        /// gradient so the audit must fail.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Simulate { preset, config, epochs, seed, out } => {
            let mut scenario = match &config {
                Some(_) => load_config(&config)?.scenario,
                None => sim::preset_by_name(&preset)?,
            };
            if let Some(n) = epochs {
                scenario.n_epochs = n;
            }
            if let Some(s) = seed {
                scenario.seed = s;
            }
            scenario.validate()?;
            let run = sim::generate(&scenario)?;
            let n = run.epochs.len();
            dataset::write_dataset(&Dataset::from_run(run), &out)?;
            println!("wrote {n} epochs to {}", out.display());
            Ok(())
        }
        Command::Train {
            dataset: dataset_path,
            objective,
            config,
            seed,
            passes,
            stride,
            out,
            resume,
            state_out,
            log,
        } => {
            let data = dataset::read_dataset(&dataset_path)?;
            if !data.has_truth() {
                return Err(Error::MissingTruth {
                    context: Some(format!(
                        "dataset {} has epochs without ground truth",
                        dataset_path.display()
                    )),
                });
            }
            let cfg = load_config(&config)?;
            let mut train_cfg = TrainConfig {
                objective: Objective::parse(&objective)?,
                loss: cfg.loss,
                ..cfg.train
            };
            if let Some(s) = seed {
                train_cfg.seed = s;
            }
            if let Some(p) = passes {
                train_cfg.epochs_over_data = p;
            }
            if let Some(s) = stride {
                train_cfg.window_stride = s;
            }
            train_cfg.validate()?;

            let resume_state = match resume {
                Some(p) => Some(trainer::TrainCheckpoint::load(&p)?.state),
                None => None,
            };
            let report =
                trainer::train(&data.epochs, &data.origin, cfg.arch, &train_cfg, resume_state)?;
            trainer::save_model(trainer::best_or_final(&report), &out)?;
            println!(
                "trained {} steps over {} passes; best validation {:.4}; model -> {}",
                report.state.step,
                report.state.completed_passes,
                report.state.best_validation.unwrap_or(f64::NAN),
                out.display()
            );
            if let Some(p) = state_out {
                trainer::TrainCheckpoint {
                    format_version: trainer::TRAIN_CHECKPOINT_VERSION,
                    state: report.state.clone(),
                    config: train_cfg,
                }
                .save(&p)?;
            }
            if let Some(p) = log {
                trainer::write_log_csv(&report.log, &p)?;
            }
            Ok(())
        }
        Command::Eval { dataset: dataset_path, checkpoint, scheme, out_dir, diagnose_epoch } => {
            let data = dataset::read_dataset(&dataset_path)?;
            let model;
            let method = match (&checkpoint, &scheme) {
                (Some(path), None) => {
                    model = ModelCheckpoint::load(path)?;
                    EvalMethod::Learned(&model)
                }
                (None, Some(name)) => EvalMethod::Classical(parse_scheme(name)?),
                _ => {
                    return Err(Error::InvalidConfig {
                        path: "eval".into(),
                        message: "exactly one of --checkpoint or --scheme is required".into(),
                    })
                }
            };
            let out_dir = out_dir
                .or_else(|| std::env::var(OUT_DIR_ENV).ok().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("dfgo-out"));
            let (evaluation, solutions) = eval::evaluate_run(&method, &data.epochs, &data.origin)?;
            let files = eval::export_artifacts(&evaluation, &out_dir)?;
            for f in &files {
                println!("wrote {}", f.display());
            }
            if let Some(target) = diagnose_epoch {
                let idx = data
                    .epochs
                    .iter()
                    .position(|e| e.epoch_index == target)
                    .ok_or_else(|| Error::InvalidConfig {
                        path: "eval.diagnose_epoch".into(),
                        message: format!("epoch {target} not present in the dataset"),
                    })?;
                let prepared = trainer::prepare_epochs(&data.epochs, &data.origin)?;
                let diags = eval::satellite_diagnostics(
                    &data.epochs[idx],
                    &solutions[idx].weights,
                    &prepared[idx].wls,
                    &solutions[idx].state,
                    &data.origin,
                )?;
                let files = eval::export_epoch_diagnostics(
                    &diags,
                    target,
                    solutions[idx].hdop,
                    &out_dir,
                )?;
                for f in &files {
                    println!("wrote {}", f.display());
                }
            }
            let m = &evaluation.metrics;
            println!(
                "{}: mean {:.2} m | p50 {:.2} m | p95 {:.2} m | NLL {:.2} | ES {:.2}",
                evaluation.method,
                m.mean_horizontal_m,
                m.p50_horizontal_m,
                m.p95_horizontal_m,
                m.mean_nll,
                m.mean_es
            );
            Ok(())
        }
        Command::Gradcheck { dataset: dataset_path, seed, corrupt } => {
            let data = dataset::read_dataset(&dataset_path)?;
            let corruption =
                if corrupt { Corruption::InformationGradient } else { Corruption::None };
            let report = gradcheck::run_audit(&data.epochs, &data.origin, seed, corruption)?;
            print!("{}", report.render());
            if report.passed() {
                println!("gradient audit passed");
                Ok(())
            } else {
                Err(Error::Malformed {
                    what: "gradient audit",
                    message: "one or more gradient groups exceeded tolerance".into(),
                })
            }
        }
    }
}

fn parse_scheme(name: &str) -> Result<WeightScheme, Error> {
    match name {
        "elevation" => Ok(WeightScheme::elevation_default()),
        "sigma-eps" => Ok(WeightScheme::sigma_eps_default()),
        "gogps" => Ok(WeightScheme::gogps_default()),
        other => Err(Error::InvalidConfig {
            path: "eval.scheme".into(),
            message: format!("unknown scheme '{other}' (elevation|sigma-eps|gogps)"),
        }),
    }
}
