//! End-to-end training: sliding-window batching, forward through network ->
//! solver -> loss, manual reverse pass back to the network parameters, Adam
//! updates with gradient clipping, checkpointing, and the MAE baseline
//! objective.
//!
//! Determinism contract: for a fixed (seed, config, dataset) the parameter
//! trajectory is bit-identical on one platform. All stochasticity is
//! derived statelessly: window shuffling from (seed, pass) and Monte-Carlo
//! loss sampling from (seed, step, window start), so training can be
//! interrupted at a pass boundary and resumed exactly.

use nalgebra::{Matrix2, Vector2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::Geodetic;
use crate::losses::{self, EnPredictive, LossConfig};
use crate::obs::{EpochObservations, EpochState};
use crate::solver::{self, WindowProblem, GN_MAX_ITER, GN_TOL, WINDOW_LEN};
use crate::weight_net::{
    self, ArchConfig, FeatureStats, ModelCheckpoint, WeightNet, WeightNetParams,
};
use crate::weighting::{solve_wls, WeightScheme, WlsSolution};

/// Training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Mean EN Euclidean error; position-only, the covariance path is
    /// never touched (the learned-weighting baseline).
    Mae,
    Nll,
    Es,
    Combined,
}

impl Objective {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "mae" => Ok(Objective::Mae),
            "nll" => Ok(Objective::Nll),
            "es" => Ok(Objective::Es),
            "combined" => Ok(Objective::Combined),
            other => Err(Error::InvalidConfig {
                path: "train.objective".into(),
                message: format!("unknown objective '{other}' (mae|nll|es|combined)"),
            }),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Objective::Mae => "mae",
            Objective::Nll => "nll",
            Objective::Es => "es",
            Objective::Combined => "combined",
        }
    }
}

/// Trainer configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    /// Windows per optimizer step.
    pub batch_size: usize,
    /// Passes over the training windows.
    pub epochs_over_data: usize,
    pub grad_clip_norm: f64,
    pub seed: u64,
    pub window_stride: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Combined,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            batch_size: 8,
            epochs_over_data: 30,
            grad_clip_norm: 10.0,
            seed: 0,
            window_stride: 1,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |path: &str, message: &str| {
            Err(Error::InvalidConfig { path: format!("train.{path}"), message: message.into() })
        };
        if self.learning_rate <= 0.0 {
            return fail("learning_rate", "must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be at least 1");
        }
        if self.epochs_over_data == 0 {
            return fail("epochs_over_data", "must be at least 1");
        }
        if self.window_stride == 0 {
            return fail("window_stride", "must be at least 1");
        }
        self.loss.validate()
    }
}

/// A window of the run, identified by its first epoch index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub start: usize,
}

/// Enumerate sliding windows of `length` epochs at the given stride.
pub fn make_windows(run_len: usize, length: usize, stride: usize) -> Result<Vec<WindowSpec>> {
    if run_len < length {
        return Err(Error::RunTooShort { epochs: run_len, minimum: length });
    }
    Ok((0..=run_len - length)
        .step_by(stride.max(1))
        .map(|start| WindowSpec { start })
        .collect())
}

/// Precomputed per-epoch inputs shared by every window that touches the
/// epoch: the GoGPS preliminary WLS (feature + warm start) and the raw
/// feature rows.
pub struct PreparedEpoch {
    pub wls: WlsSolution,
    pub raw_features: Vec<[f64; weight_net::N_FEATURES]>,
}

/// Run the preliminary WLS and feature extraction once per epoch.
///
/// Epochs must already be in canonical observation order (the simulator and
/// dataset reader guarantee it); otherwise per-epoch features would not
/// line up with the window's factor indexing.
pub fn prepare_epochs(
    epochs: &[EpochObservations],
    origin: &Geodetic,
) -> Result<Vec<PreparedEpoch>> {
    let scheme = WeightScheme::gogps_default();
    epochs
        .iter()
        .map(|epoch| {
            let mut canonical = epoch.clone();
            canonical.canonicalize();
            if canonical.observations != epoch.observations {
                return Err(Error::Malformed {
                    what: "epoch observations",
                    message: format!(
                        "epoch {} is not in canonical satellite order",
                        epoch.epoch_index
                    ),
                });
            }
            let wls = solve_wls(epoch, &scheme, &EpochState::origin(), origin)?;
            let raw = weight_net::raw_features(epoch, &wls, origin)?;
            Ok(PreparedEpoch { wls, raw_features: raw })
        })
        .collect()
}

/// Estimate normalization statistics from prepared epochs (training split
/// only).
pub fn estimate_stats(prepared: &[PreparedEpoch]) -> FeatureStats {
    let rows: Vec<[f64; weight_net::N_FEATURES]> =
        prepared.iter().flat_map(|p| p.raw_features.iter().copied()).collect();
    FeatureStats::estimate(&rows)
}

/// Adam state plus bookkeeping. Serialized whole for exact resumption.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub model: WeightNet,
    pub adam_m: WeightNetParams,
    pub adam_v: WeightNetParams,
    pub step: usize,
    pub completed_passes: usize,
    pub skipped_steps: usize,
    pub best_validation: Option<f64>,
    pub best_model: Option<WeightNet>,
    pub loss_history: Vec<f64>,
}

impl TrainState {
    pub fn new(model: WeightNet) -> Self {
        let zeros = model.params.zeros_like();
        Self {
            adam_m: zeros.clone(),
            adam_v: zeros,
            model,
            step: 0,
            completed_passes: 0,
            skipped_steps: 0,
            best_validation: None,
            best_model: None,
            loss_history: Vec::new(),
        }
    }
}

/// Versioned training-state checkpoint (model + optimizer moments + step
/// counters), sufficient for bit-exact resumption at a pass boundary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainCheckpoint {
    pub format_version: u32,
    pub state: TrainState,
    pub config: TrainConfig,
}

pub const TRAIN_CHECKPOINT_VERSION: u32 = 1;

impl TrainCheckpoint {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<TrainCheckpoint> {
        let ckpt: TrainCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ckpt.format_version != TRAIN_CHECKPOINT_VERSION {
            return Err(Error::FormatVersion {
                found: ckpt.format_version,
                expected: TRAIN_CHECKPOINT_VERSION,
                what: "training checkpoint",
            });
        }
        Ok(ckpt)
    }
}

/// Per-window loss seed: stateless mix of the global seed, optimizer step,
/// and window start so resumed runs draw identical samples.
pub fn window_seed(global_seed: u64, step: usize, window_start: usize) -> u64 {
    let mut h = global_seed
        ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (window_start as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    h
}

/// One window's forward+backward: returns the loss value and accumulates
/// parameter gradients.
struct WindowOutcome {
    loss: f64,
    gradients: WeightNetParams,
    /// Mean learned weight over factors, for diagnostics.
    mean_weight: f64,
    solver_converged: bool,
}

fn run_window(
    model: &WeightNet,
    epochs: &[EpochObservations],
    prepared: &[PreparedEpoch],
    spec: WindowSpec,
    origin: &Geodetic,
    objective: Objective,
    loss_cfg: &LossConfig,
    seed: u64,
) -> Result<WindowOutcome> {
    let window_epochs: Vec<EpochObservations> =
        epochs[spec.start..spec.start + WINDOW_LEN].to_vec();

    // Network forward per epoch, collecting the factor information in
    // canonical window order.
    let mut information = Vec::new();
    let mut caches = Vec::with_capacity(WINDOW_LEN);
    let mut weight_sum = 0.0;
    for (k, epoch) in window_epochs.iter().enumerate() {
        let prep = &prepared[spec.start + k];
        let features =
            weight_net::assemble_features(epoch, &prep.wls, &model.stats, origin)?;
        let (weights, cache) = weight_net::forward(model, &features);
        weight_sum += weights.weight.iter().sum::<f64>();
        information.extend_from_slice(&weights.information);
        caches.push(cache);
    }
    let factor_count = information.len();
    let mean_weight = weight_sum / factor_count as f64;

    // Warm start from the per-epoch WLS states.
    let init_states: Vec<EpochState> = (0..WINDOW_LEN)
        .map(|k| prepared[spec.start + k].wls.state)
        .collect();
    let init = WindowProblem::stack_states(&init_states);

    let problem = solver::assemble_window(window_epochs, *origin, information)?;
    let (output, tape) = solver::gauss_newton_solve_traced(&problem, &init, GN_MAX_ITER, GN_TOL)?;

    // Per-epoch loss on the EN predictive; window loss is their mean.
    let mut loss_value = 0.0;
    let mut d_mean = vec![Vector2::zeros(); WINDOW_LEN];
    let mut d_cov = vec![Matrix2::zeros(); WINDOW_LEN];
    let scale = 1.0 / WINDOW_LEN as f64;
    for e in 0..WINDOW_LEN {
        let truth = problem.epochs[e].truth_position.ok_or(Error::MissingTruth {
            context: Some(format!("epoch {}", problem.epochs[e].epoch_index)),
        })?;
        let en = &output.per_epoch_en[e];
        let pred = EnPredictive {
            mean: en.mean,
            covariance: en.covariance,
            ground_truth: Vector2::new(truth.e, truth.n),
        };
        match objective {
            Objective::Mae => {
                let diff = pred.mean - pred.ground_truth;
                let norm = diff.norm().max(1e-12);
                loss_value += scale * norm;
                d_mean[e] = scale * diff / norm;
                // position-only: d_cov stays zero
            }
            Objective::Nll => {
                let v = losses::nll(&pred)?;
                loss_value += scale * v.value;
                d_mean[e] = scale * v.d_mean;
                d_cov[e] = scale * v.d_cov;
            }
            Objective::Es => {
                let v = losses::energy_score_mc(&pred, loss_cfg.mc_samples, seed ^ e as u64)?;
                loss_value += scale * v.value;
                d_mean[e] = scale * v.d_mean;
                d_cov[e] = scale * v.d_cov;
            }
            Objective::Combined => {
                let cfg = LossConfig { rng_seed: seed ^ e as u64, ..*loss_cfg };
                let v = losses::combined(&pred, &cfg)?;
                loss_value += scale * v.value;
                d_mean[e] = scale * v.d_mean;
                d_cov[e] = scale * v.d_cov;
            }
        }
    }

    // Solver reverse pass, then the network reverse pass per epoch; the
    // factor gradient slices follow the canonical epoch-major order.
    let solver_grads = solver::backward(&problem, &tape, &d_mean, &d_cov)?;
    let mut gradients = model.params.zeros_like();
    let mut offset = 0;
    for (e, cache) in caches.iter().enumerate() {
        let count = problem.epochs[e].observations.len();
        let slice = &solver_grads.d_information[offset..offset + count];
        let g = weight_net::backward(model, cache, slice);
        gradients.axpy(1.0, &g.params);
        offset += count;
    }

    Ok(WindowOutcome {
        loss: loss_value,
        gradients,
        mean_weight,
        solver_converged: output.converged,
    })
}

/// Loss of one window without gradients (validation).
fn eval_window_loss(
    model: &WeightNet,
    epochs: &[EpochObservations],
    prepared: &[PreparedEpoch],
    spec: WindowSpec,
    origin: &Geodetic,
    objective: Objective,
    loss_cfg: &LossConfig,
    seed: u64,
) -> Result<f64> {
    run_window(model, epochs, prepared, spec, origin, objective, loss_cfg, seed)
        .map(|o| o.loss)
}

/// Statistics of one optimizer step.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub loss: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    pub skipped: bool,
    pub mean_weight: f64,
    pub non_converged_windows: usize,
}

/// One Adam step over a batch of windows. Gradients are averaged over the
/// batch in input order (deterministic reduction), clipped by global norm,
/// then applied.
/// The config is validated by [`train`] (or the CLI); `train_step` itself
/// accepts any finite values, including a zero learning rate, which leaves
/// the parameters bit-exactly unchanged.
pub fn train_step(
    state: &mut TrainState,
    epochs: &[EpochObservations],
    prepared: &[PreparedEpoch],
    batch: &[WindowSpec],
    origin: &Geodetic,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    let mut total_loss = 0.0;
    let mut grads = state.model.params.zeros_like();
    let mut mean_weight = 0.0;
    let mut non_converged = 0usize;
    let step_for_seed = state.step;

    for spec in batch {
        let seed = window_seed(cfg.seed, step_for_seed, spec.start);
        let outcome = run_window(
            &state.model,
            epochs,
            prepared,
            *spec,
            origin,
            cfg.objective,
            &cfg.loss,
            seed,
        )?;
        total_loss += outcome.loss;
        mean_weight += outcome.mean_weight;
        if !outcome.solver_converged {
            non_converged += 1;
        }
        grads.axpy(1.0 / batch.len() as f64, &outcome.gradients);
    }
    let loss = total_loss / batch.len() as f64;
    mean_weight /= batch.len() as f64;

    if !loss.is_finite() {
        state.skipped_steps += 1;
        state.step += 1;
        return Ok(StepStats {
            loss,
            grad_norm: f64::NAN,
            clipped: false,
            skipped: true,
            mean_weight,
            non_converged_windows: non_converged,
        });
    }

    let grad_norm = grads.global_norm();
    let mut clipped = false;
    if grad_norm > cfg.grad_clip_norm {
        grads.scale(cfg.grad_clip_norm / grad_norm);
        clipped = true;
    }

    // Adam with bias correction.
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - cfg.adam_beta1.powf(t);
    let bc2 = 1.0 - cfg.adam_beta2.powf(t);
    let g_slices = grads.tensor_slices();
    let mut m_slices = state.adam_m.tensor_slices_mut();
    let mut v_slices = state.adam_v.tensor_slices_mut();
    let mut p_slices = state.model.params.tensor_slices_mut();
    for i in 0..g_slices.len() {
        let g = g_slices[i].1;
        let m = &mut m_slices[i].1;
        let v = &mut v_slices[i].1;
        let p = &mut p_slices[i].1;
        for k in 0..g.len() {
            m[k] = cfg.adam_beta1 * m[k] + (1.0 - cfg.adam_beta1) * g[k];
            v[k] = cfg.adam_beta2 * v[k] + (1.0 - cfg.adam_beta2) * g[k] * g[k];
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            p[k] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
        }
    }

    state.loss_history.push(loss);
    Ok(StepStats {
        loss,
        grad_norm,
        clipped,
        skipped: false,
        mean_weight,
        non_converged_windows: non_converged,
    })
}

/// One row of the training log.
#[derive(Debug, Clone)]
pub struct TrainLogRow {
    pub step: usize,
    pub pass: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub skipped_steps: usize,
    pub validation: Option<f64>,
}

/// Training report: final state plus the log.
pub struct TrainReport {
    pub state: TrainState,
    pub log: Vec<TrainLogRow>,
    pub validation_trace: Vec<f64>,
}

/// Split windows into train/validation: the validation split is the last
/// contiguous ~10% block of window indices, which limits leakage between
/// overlapping windows.
pub fn split_windows(windows: &[WindowSpec]) -> (Vec<WindowSpec>, Vec<WindowSpec>) {
    let n_val = (windows.len() / 10).max(1).min(windows.len().saturating_sub(1));
    let split = windows.len() - n_val;
    (windows[..split].to_vec(), windows[split..].to_vec())
}

/// Full training loop over a labeled run. Normalization statistics are
/// estimated from the training epochs; the best-validation model is kept.
/// `resume` continues from a saved state at a pass boundary.
pub fn train(
    epochs: &[EpochObservations],
    origin: &Geodetic,
    arch: ArchConfig,
    cfg: &TrainConfig,
    resume: Option<TrainState>,
) -> Result<TrainReport> {
    cfg.validate()?;
    for e in epochs {
        if e.truth_position.is_none() {
            return Err(Error::MissingTruth {
                context: Some(format!("epoch {} has no ground truth", e.epoch_index)),
            });
        }
    }
    let windows = make_windows(epochs.len(), WINDOW_LEN, cfg.window_stride)?;
    let (train_windows, val_windows) = split_windows(&windows);
    let prepared = prepare_epochs(epochs, origin)?;

    let mut state = match resume {
        Some(s) => s,
        None => {
            let stats = estimate_stats(&prepared);
            TrainState::new(WeightNet::seeded(arch, stats, cfg.seed))
        }
    };

    let mut log = Vec::new();
    let mut validation_trace = Vec::new();
    let start_pass = state.completed_passes;
    for pass in start_pass..cfg.epochs_over_data {
        // Deterministic shuffle derived from (seed, pass) alone.
        let mut order = train_windows.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (pass as u64).wrapping_mul(0x9E37));
        order.shuffle(&mut rng);

        for batch in order.chunks(cfg.batch_size) {
            let stats = train_step(&mut state, epochs, &prepared, batch, origin, cfg)?;
            log.push(TrainLogRow {
                step: state.step,
                pass,
                loss: stats.loss,
                grad_norm: stats.grad_norm,
                skipped_steps: state.skipped_steps,
                validation: None,
            });
        }

        // Validation at the pass boundary.
        let mut val = 0.0;
        for spec in &val_windows {
            let seed = window_seed(cfg.seed ^ 0x5EED_u64, usize::MAX - pass, spec.start);
            val += eval_window_loss(
                &state.model,
                epochs,
                &prepared,
                *spec,
                origin,
                cfg.objective,
                &cfg.loss,
                seed,
            )?;
        }
        val /= val_windows.len() as f64;
        validation_trace.push(val);
        if state.best_validation.map_or(true, |b| val < b) {
            state.best_validation = Some(val);
            state.best_model = Some(state.model.clone());
        }
        state.completed_passes = pass + 1;
        if let Some(last) = log.last_mut() {
            last.validation = Some(val);
        }
    }

    Ok(TrainReport { state, log, validation_trace })
}

/// Write the training log as CSV (step, pass, objective value, grad norm,
/// skipped-step count, validation when present).
pub fn write_log_csv(log: &[TrainLogRow], path: &std::path::Path) -> Result<()> {
    let mut text = String::from("step,pass,loss,grad_norm,skipped_steps,validation\n");
    for row in log {
        let val = row.validation.map(|v| v.to_string()).unwrap_or_default();
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.step, row.pass, row.loss, row.grad_norm, row.skipped_steps, val
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Convenience: save the trained model (best validation if available,
/// otherwise final).
pub fn best_or_final(report: &TrainReport) -> &WeightNet {
    report.state.best_model.as_ref().unwrap_or(&report.state.model)
}

/// Save just the model part for inference.
pub fn save_model(model: &WeightNet, path: &std::path::Path) -> Result<()> {
    ModelCheckpoint::new(model.clone()).save(path)
}
