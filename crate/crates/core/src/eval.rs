//! Test-time metrics and diagnostics: horizontal-error percentiles,
//! run-level NLL/ES, per-axis exceedance and in-envelope coverage,
//! normalized weights, single-differenced pseudorange errors, and the
//! CSV/SVG/JSON artifact exports.
//!
//! Evaluation runs the same windowed solver as training. The per-epoch
//! estimate is taken from the window in which the epoch is the *last*
//! (causal, real-time convention); the first `WINDOW_LEN - 1` epochs of a
//! run come from the first window.

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geo::{self, Geodetic};
use crate::losses::{self, EnPredictive, ES_EVAL_SAMPLES};
use crate::obs::{EpochObservations, EpochState};
use crate::solver::{self, WindowProblem, GN_MAX_ITER, GN_TOL, WINDOW_LEN};
use crate::trainer::{self, PreparedEpoch};
use crate::weight_net::{self, WeightNet};
use crate::weighting::{scheme_variance, WeightScheme};

/// Fixed evaluation seed so reported tables are reproducible.
pub const EVAL_SEED: u64 = 0x5EED_0E7A;

/// One epoch's evaluation record.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch_index: usize,
    pub time: f64,
    /// Estimate minus truth, East and North (meters).
    pub error_east: f64,
    pub error_north: f64,
    /// Reported EN covariance entries.
    pub cov_ee: f64,
    pub cov_en: f64,
    pub cov_nn: f64,
    pub nll: f64,
    pub es: f64,
}

impl EpochRecord {
    pub fn sigma_east(&self) -> f64 {
        self.cov_ee.max(0.0).sqrt()
    }

    pub fn sigma_north(&self) -> f64 {
        self.cov_nn.max(0.0).sqrt()
    }

    pub fn horizontal_error(&self) -> f64 {
        (self.error_east * self.error_east + self.error_north * self.error_north).sqrt()
    }
}

/// Aggregate accuracy and credibility metrics of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunMetrics {
    pub mean_horizontal_m: f64,
    pub p50_horizontal_m: f64,
    pub p95_horizontal_m: f64,
    /// Means over epochs (the aggregation convention used throughout).
    pub mean_nll: f64,
    pub mean_es: f64,
}

/// Per-axis exceedance/coverage at one k.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AxisDiagnostics {
    pub k: f64,
    pub exceedance_east: f64,
    pub exceedance_north: f64,
    pub coverage_east: f64,
    pub coverage_north: f64,
}

/// Full evaluation of one run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunEvaluation {
    pub method: String,
    pub records: Vec<EpochRecord>,
    pub metrics: RunMetrics,
    pub diagnostics: Vec<AxisDiagnostics>,
}

/// Nearest-rank percentile (1-indexed rank `ceil(p/100 * n)`).
pub fn nearest_rank_percentile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty());
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

/// Mean, median, and 95th percentile of the horizontal errors.
pub fn horizontal_errors(errors: &[f64]) -> Result<(f64, f64, f64)> {
    if errors.is_empty() {
        return Err(Error::EmptyRun);
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let mut sorted = errors.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok((
        mean,
        nearest_rank_percentile(&sorted, 50.0),
        nearest_rank_percentile(&sorted, 95.0),
    ))
}

/// Per-axis exceedance and coverage from per-epoch errors and reported
/// sigmas, at each k in `k_list`. A zero sigma with nonzero error counts
/// as exceedance.
pub fn credibility_diagnostics(records: &[EpochRecord], k_list: &[f64]) -> Vec<AxisDiagnostics> {
    let n = records.len().max(1) as f64;
    k_list
        .iter()
        .map(|&k| {
            let mut exc_e = 0usize;
            let mut exc_n = 0usize;
            for r in records {
                if r.error_east.abs() > k * r.sigma_east() {
                    exc_e += 1;
                }
                if r.error_north.abs() > k * r.sigma_north() {
                    exc_n += 1;
                }
            }
            AxisDiagnostics {
                k,
                exceedance_east: exc_e as f64 / n,
                exceedance_north: exc_n as f64 / n,
                coverage_east: 1.0 - exc_e as f64 / n,
                coverage_north: 1.0 - exc_n as f64 / n,
            }
        })
        .collect()
}

/// Normalize per-factor weights to sum to one.
pub fn normalized_weights(weights: &[f64]) -> Result<Vec<f64>> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 {
        return Err(Error::ZeroWeights);
    }
    Ok(weights.iter().map(|w| w / sum).collect())
}

/// Per-satellite single-differenced pseudorange error entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SdError {
    pub sat_id: String,
    pub constellation: crate::obs::Constellation,
    /// Ground-truth-referenced error differenced against the reference
    /// satellite of the same constellation.
    pub value: f64,
    pub is_reference: bool,
    /// False when the constellation has no second satellite (flagged
    /// "no reference" and excluded from plots).
    pub has_reference: bool,
}

/// Ground-truth-referenced single-differenced errors. The per-constellation
/// reference is the highest-cn0 satellite; differencing cancels the
/// receiver clock within each constellation, so any clock vector consistent
/// with the epoch gives identical results.
pub fn single_diff_errors(
    epoch: &EpochObservations,
    truth: &crate::geo::EnuPoint,
    clock: &[f64; 4],
    origin: &Geodetic,
) -> Result<Vec<SdError>> {
    let truth_ecef = geo::enu_to_ecef(truth, origin)?;
    let mut raw = Vec::with_capacity(epoch.observations.len());
    for ob in &epoch.observations {
        let range = ob.sat_pos.distance_to(&truth_ecef);
        let eps =
            ob.pseudorange_obs - (range + clock[ob.constellation.bias_index()] + ob.correction_sum);
        raw.push(eps);
    }
    // Reference per constellation: highest cn0.
    let mut reference: [Option<usize>; 4] = [None; 4];
    for (i, ob) in epoch.observations.iter().enumerate() {
        let slot = ob.constellation.bias_index();
        match reference[slot] {
            None => reference[slot] = Some(i),
            Some(j) if ob.cn0 > epoch.observations[j].cn0 => reference[slot] = Some(i),
            _ => {}
        }
    }
    let mut counts = [0usize; 4];
    for ob in &epoch.observations {
        counts[ob.constellation.bias_index()] += 1;
    }
    Ok(epoch
        .observations
        .iter()
        .enumerate()
        .map(|(i, ob)| {
            let slot = ob.constellation.bias_index();
            let ref_idx = reference[slot].unwrap();
            let has_reference = counts[slot] >= 2;
            SdError {
                sat_id: ob.sat_id.clone(),
                constellation: ob.constellation,
                value: if has_reference { raw[i] - raw[ref_idx] } else { 0.0 },
                is_reference: i == ref_idx,
                has_reference,
            }
        })
        .collect())
}

/// How factor information is produced during evaluation.
pub enum EvalMethod<'a> {
    Learned(&'a WeightNet),
    Classical(WeightScheme),
}

impl EvalMethod<'_> {
    pub fn name(&self) -> String {
        match self {
            EvalMethod::Learned(_) => "learned".to_string(),
            EvalMethod::Classical(s) => s.name().to_string(),
        }
    }
}

/// Per-epoch solver artifacts kept for the diagnostic exports.
pub struct EpochSolution {
    pub weights: Vec<f64>,
    pub information: Vec<f64>,
    pub hdop: Option<f64>,
    pub state: EpochState,
}

fn epoch_information(
    method: &EvalMethod,
    epoch: &EpochObservations,
    prep: &PreparedEpoch,
    origin: &Geodetic,
) -> Result<(Vec<f64>, Vec<f64>)> {
    match method {
        EvalMethod::Learned(model) => {
            let features = weight_net::assemble_features(epoch, &prep.wls, &model.stats, origin)?;
            let (w, _) = weight_net::forward(model, &features);
            Ok((w.information, w.weight))
        }
        EvalMethod::Classical(scheme) => {
            let rx = geo::enu_to_ecef(&prep.wls.state.position, origin)?;
            let mut info = Vec::with_capacity(epoch.observations.len());
            let mut weights = Vec::with_capacity(epoch.observations.len());
            for ob in &epoch.observations {
                let sky = geo::sky_direction(&ob.sat_pos, &rx, origin)?;
                let var = scheme_variance(scheme, sky.elevation.max(1e-3), ob.cn0)?;
                info.push(1.0 / var);
                weights.push(1.0 / var.sqrt());
            }
            Ok((info, weights))
        }
    }
}

/// Evaluate a method over a labeled run: causal per-epoch EN predictives,
/// accuracy and credibility metrics, diagnostics at k = 1 and 3, and the
/// per-epoch solver artifacts for exports.
pub fn evaluate_run(
    method: &EvalMethod,
    epochs: &[EpochObservations],
    origin: &Geodetic,
) -> Result<(RunEvaluation, Vec<EpochSolution>)> {
    if epochs.len() < WINDOW_LEN {
        return Err(Error::RunTooShort { epochs: epochs.len(), minimum: WINDOW_LEN });
    }
    for e in epochs {
        if e.truth_position.is_none() {
            return Err(Error::MissingTruth {
                context: Some(format!("epoch {} has no ground truth", e.epoch_index)),
            });
        }
    }
    let prepared = trainer::prepare_epochs(epochs, origin)?;

    // Factor information per epoch, computed once.
    let mut info: Vec<Vec<f64>> = Vec::with_capacity(epochs.len());
    let mut weights: Vec<Vec<f64>> = Vec::with_capacity(epochs.len());
    for (epoch, prep) in epochs.iter().zip(&prepared) {
        let (i, w) = epoch_information(method, epoch, prep, origin)?;
        info.push(i);
        weights.push(w);
    }

    let mut records = Vec::with_capacity(epochs.len());
    let mut solutions: Vec<EpochSolution> = Vec::with_capacity(epochs.len());

    let solve_window = |start: usize| -> Result<(solver::SolverOutput, WindowProblem)> {
        let window_epochs: Vec<EpochObservations> =
            epochs[start..start + WINDOW_LEN].to_vec();
        let window_info: Vec<f64> =
            (start..start + WINDOW_LEN).flat_map(|k| info[k].iter().copied()).collect();
        let init_states: Vec<EpochState> =
            (start..start + WINDOW_LEN).map(|k| prepared[k].wls.state).collect();
        let init = WindowProblem::stack_states(&init_states);
        let problem = solver::assemble_window(window_epochs, *origin, window_info)?;
        let out = solver::gauss_newton_solve(&problem, &init, GN_MAX_ITER, GN_TOL)?;
        Ok((out, problem))
    };

    // First window covers its five epochs; afterwards each epoch is scored
    // from the window that ends on it.
    let record_epoch = |t: usize,
                            slot: usize,
                            out: &solver::SolverOutput,
                            problem: &WindowProblem|
     -> Result<(EpochRecord, EpochSolution)> {
        let epoch = &epochs[t];
        let truth = epoch.truth_position.unwrap();
        let en = &out.per_epoch_en[slot];
        let err = en.mean - Vector2::new(truth.e, truth.n);
        let pred = EnPredictive {
            mean: en.mean,
            covariance: en.covariance,
            ground_truth: Vector2::new(truth.e, truth.n),
        };
        let nll = losses::nll_eval(&pred)?;
        let es = losses::es_eval(&pred, ES_EVAL_SAMPLES, EVAL_SEED ^ t as u64)?;
        let hdop = solver::weighted_hdop(problem, &problem.information, slot, &out.state_hat).ok();
        let base = slot * crate::obs::STATE_DIM;
        let state = EpochState::from_vector(&nalgebra::SVector::<f64, 7>::from_fn(|k, _| {
            out.state_hat[base + k]
        }));
        Ok((
            EpochRecord {
                epoch_index: epoch.epoch_index,
                time: epoch.time,
                error_east: err.x,
                error_north: err.y,
                cov_ee: en.covariance[(0, 0)],
                cov_en: en.covariance[(0, 1)],
                cov_nn: en.covariance[(1, 1)],
                nll,
                es,
            },
            EpochSolution {
                weights: weights[t].clone(),
                information: info[t].clone(),
                hdop,
                state,
            },
        ))
    };

    let (first_out, first_problem) = solve_window(0)?;
    for slot in 0..WINDOW_LEN - 1 {
        let (rec, sol) = record_epoch(slot, slot, &first_out, &first_problem)?;
        records.push(rec);
        solutions.push(sol);
    }
    for t in WINDOW_LEN - 1..epochs.len() {
        let start = t + 1 - WINDOW_LEN;
        let (out, problem) = solve_window(start)?;
        let (rec, sol) = record_epoch(t, WINDOW_LEN - 1, &out, &problem)?;
        records.push(rec);
        solutions.push(sol);
    }

    let errors: Vec<f64> = records.iter().map(|r| r.horizontal_error()).collect();
    let (mean, p50, p95) = horizontal_errors(&errors)?;
    let mean_nll = records.iter().map(|r| r.nll).sum::<f64>() / records.len() as f64;
    let mean_es = records.iter().map(|r| r.es).sum::<f64>() / records.len() as f64;
    let diagnostics = credibility_diagnostics(&records, &[1.0, 3.0]);

    Ok((
        RunEvaluation {
            method: method.name(),
            records,
            metrics: RunMetrics {
                mean_horizontal_m: mean,
                p50_horizontal_m: p50,
                p95_horizontal_m: p95,
                mean_nll,
                mean_es,
            },
            diagnostics,
        },
        solutions,
    ))
}

// ---------------------------------------------------------------------------
// Artifact exports: CSV is the contract, SVG a rendering convenience.
// ---------------------------------------------------------------------------

/// Write the per-axis error + envelope time series.
///
/// Columns: `epoch,time,error_east,error_north,sigma_east,sigma_north`.
pub fn write_envelope_csv(records: &[EpochRecord], path: &Path) -> Result<()> {
    let mut text = String::from("epoch,time,error_east,error_north,sigma_east,sigma_north\n");
    for r in records {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch_index,
            r.time,
            r.error_east,
            r.error_north,
            r.sigma_east(),
            r.sigma_north()
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Parse an envelope CSV back (round-trip support).
pub fn read_envelope_csv(path: &Path) -> Result<Vec<(usize, f64, f64, f64, f64, f64)>> {
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if k == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Malformed {
                what: "envelope CSV",
                message: format!("line {} has {} fields", k + 1, fields.len()),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| Error::Malformed {
                what: "envelope CSV",
                message: format!("line {}: {e}", k + 1),
            })
        };
        rows.push((
            fields[0].parse::<usize>().map_err(|e| Error::Malformed {
                what: "envelope CSV",
                message: format!("line {}: {e}", k + 1),
            })?,
            parse(fields[1])?,
            parse(fields[2])?,
            parse(fields[3])?,
            parse(fields[4])?,
            parse(fields[5])?,
        ));
    }
    Ok(rows)
}

/// Per-satellite diagnostic row for one epoch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SatelliteDiagnostics {
    pub sat_id: String,
    pub constellation: crate::obs::Constellation,
    pub elevation_deg: f64,
    pub azimuth_deg: f64,
    pub normalized_weight: f64,
    pub sd_error: f64,
    pub wls_residual: f64,
    pub is_reference: bool,
    pub has_reference: bool,
}

/// Assemble the per-satellite diagnostics of one epoch: normalized weights,
/// single-differenced errors (simulator truth clock when available,
/// otherwise the estimate), WLS residuals, and sky geometry.
pub fn satellite_diagnostics(
    epoch: &EpochObservations,
    weights: &[f64],
    wls: &crate::weighting::WlsSolution,
    estimated_state: &EpochState,
    origin: &Geodetic,
) -> Result<Vec<SatelliteDiagnostics>> {
    let truth = epoch.truth_position.ok_or(Error::MissingTruth {
        context: Some(format!("epoch {}", epoch.epoch_index)),
    })?;
    let clock = epoch.truth_clock_biases.unwrap_or(estimated_state.clock_biases);
    let sd = single_diff_errors(epoch, &truth, &clock, origin)?;
    let norm = normalized_weights(weights)?;
    let truth_ecef = geo::enu_to_ecef(&truth, origin)?;
    let mut out = Vec::with_capacity(epoch.observations.len());
    for (i, ob) in epoch.observations.iter().enumerate() {
        let sky = geo::sky_direction(&ob.sat_pos, &truth_ecef, origin)?;
        out.push(SatelliteDiagnostics {
            sat_id: ob.sat_id.clone(),
            constellation: ob.constellation,
            elevation_deg: sky.elevation.to_degrees(),
            azimuth_deg: sky.azimuth.to_degrees(),
            normalized_weight: norm[i],
            sd_error: sd[i].value,
            wls_residual: wls.residuals[i],
            is_reference: sd[i].is_reference,
            has_reference: sd[i].has_reference,
        });
    }
    Ok(out)
}

/// Columns: `sat_id,constellation,elevation_deg,azimuth_deg,
/// normalized_weight,sd_error,wls_residual,is_reference,has_reference`.
pub fn write_satellite_csv(diags: &[SatelliteDiagnostics], path: &Path) -> Result<()> {
    let mut text = String::from(
        "sat_id,constellation,elevation_deg,azimuth_deg,normalized_weight,sd_error,wls_residual,is_reference,has_reference\n",
    );
    for d in diags {
        text.push_str(&format!(
            "{},{:?},{},{},{},{},{},{},{}\n",
            d.sat_id,
            d.constellation,
            d.elevation_deg,
            d.azimuth_deg,
            d.normalized_weight,
            d.sd_error,
            d.wls_residual,
            d.is_reference,
            d.has_reference
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Columns: `sat_id,azimuth_deg,elevation_deg,normalized_weight`.
pub fn write_skyplot_csv(diags: &[SatelliteDiagnostics], path: &Path) -> Result<()> {
    let mut text = String::from("sat_id,azimuth_deg,elevation_deg,normalized_weight\n");
    for d in diags {
        text.push_str(&format!(
            "{},{},{},{}\n",
            d.sat_id, d.azimuth_deg, d.elevation_deg, d.normalized_weight
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Summary JSON mirroring the metric table (Mean, 50%, 95%, NLL, ES) plus
/// the axis diagnostics. `aggregation` documents that run-level NLL/ES are
/// per-epoch means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub method: String,
    pub epochs: usize,
    pub aggregation: String,
    pub mean_horizontal_m: f64,
    pub p50_horizontal_m: f64,
    pub p95_horizontal_m: f64,
    pub mean_nll: f64,
    pub mean_es: f64,
    pub diagnostics: Vec<AxisDiagnostics>,
}

impl MetricsSummary {
    pub fn from_evaluation(eval: &RunEvaluation) -> Self {
        Self {
            method: eval.method.clone(),
            epochs: eval.records.len(),
            aggregation: "mean over epochs".to_string(),
            mean_horizontal_m: eval.metrics.mean_horizontal_m,
            p50_horizontal_m: eval.metrics.p50_horizontal_m,
            p95_horizontal_m: eval.metrics.p95_horizontal_m,
            mean_nll: eval.metrics.mean_nll,
            mean_es: eval.metrics.mean_es,
            diagnostics: eval.diagnostics.clone(),
        }
    }
}

/// Write all standard artifacts of a run evaluation into `out_dir`:
/// `metrics.json`, `envelope.csv`, and `envelope.svg`. Returns the list of
/// files written.
pub fn export_artifacts(
    eval: &RunEvaluation,
    out_dir: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let metrics_path = out_dir.join("metrics.json");
    std::fs::write(
        &metrics_path,
        serde_json::to_string_pretty(&MetricsSummary::from_evaluation(eval))?,
    )?;
    written.push(metrics_path);

    let envelope_path = out_dir.join("envelope.csv");
    write_envelope_csv(&eval.records, &envelope_path)?;
    written.push(envelope_path);

    let svg_path = out_dir.join("envelope.svg");
    std::fs::write(&svg_path, render_envelope_svg(&eval.records))?;
    written.push(svg_path);

    Ok(written)
}

/// Write the per-satellite artifacts for one diagnosed epoch:
/// `satellites_<epoch>.csv`, `skyplot_<epoch>.csv`, `weights_<epoch>.svg`,
/// `skyplot_<epoch>.svg`.
pub fn export_epoch_diagnostics(
    diags: &[SatelliteDiagnostics],
    epoch_index: usize,
    hdop: Option<f64>,
    out_dir: &Path,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let sat_path = out_dir.join(format!("satellites_{epoch_index}.csv"));
    write_satellite_csv(diags, &sat_path)?;
    written.push(sat_path);

    let sky_path = out_dir.join(format!("skyplot_{epoch_index}.csv"));
    write_skyplot_csv(diags, &sky_path)?;
    written.push(sky_path);

    let weights_svg = out_dir.join(format!("weights_{epoch_index}.svg"));
    std::fs::write(&weights_svg, render_weights_svg(diags, hdop))?;
    written.push(weights_svg);

    let skyplot_svg = out_dir.join(format!("skyplot_{epoch_index}.svg"));
    std::fs::write(&skyplot_svg, render_skyplot_svg(diags))?;
    written.push(skyplot_svg);

    Ok(written)
}

// --- dependency-free SVG rendering -----------------------------------------

fn svg_header(width: f64, height: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\">\n<rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n"
    )
}

fn polyline(points: &[(f64, f64)], stroke: &str, width: f64) -> String {
    let pts: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{stroke}\" stroke-width=\"{width}\"/>\n",
        pts.join(" ")
    )
}

fn polygon(points: &[(f64, f64)], fill: &str, opacity: f64) -> String {
    let pts: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    format!(
        "<polygon points=\"{}\" fill=\"{fill}\" opacity=\"{opacity}\" stroke=\"none\"/>\n",
        pts.join(" ")
    )
}

/// Two stacked panels (East, North): error curve, zero line, +-3 sigma
/// envelope band.
pub fn render_envelope_svg(records: &[EpochRecord]) -> String {
    let w = 900.0;
    let panel_h = 220.0;
    let margin = 40.0;
    let h = 2.0 * panel_h + 3.0 * margin;
    let mut svg = svg_header(w, h);
    if records.is_empty() {
        svg.push_str("</svg>\n");
        return svg;
    }
    let n = records.len() as f64;
    for (panel, axis) in ["East", "North"].iter().enumerate() {
        let y0 = margin + panel as f64 * (panel_h + margin);
        let values: Vec<(f64, f64)> = records
            .iter()
            .map(|r| {
                if panel == 0 {
                    (r.error_east, r.sigma_east())
                } else {
                    (r.error_north, r.sigma_north())
                }
            })
            .collect();
        let max_abs = values
            .iter()
            .map(|(e, s)| e.abs().max(3.0 * s))
            .fold(1e-6_f64, f64::max);
        let to_xy = |i: usize, v: f64| -> (f64, f64) {
            (
                margin + (w - 2.0 * margin) * i as f64 / (n - 1.0).max(1.0),
                y0 + panel_h / 2.0 - v / max_abs * (panel_h / 2.0 - 4.0),
            )
        };
        // Envelope band: upper edge forward, lower edge backward.
        let mut band: Vec<(f64, f64)> =
            values.iter().enumerate().map(|(i, (_, s))| to_xy(i, 3.0 * s)).collect();
        band.extend(
            values.iter().enumerate().rev().map(|(i, (_, s))| to_xy(i, -3.0 * s)),
        );
        svg.push_str(&polygon(&band, "#7fb3d5", 0.35));
        let zero: Vec<(f64, f64)> = vec![to_xy(0, 0.0), to_xy(records.len() - 1, 0.0)];
        svg.push_str(&polyline(&zero, "black", 1.0));
        let err: Vec<(f64, f64)> =
            values.iter().enumerate().map(|(i, (e, _))| to_xy(i, *e)).collect();
        svg.push_str(&polyline(&err, "#c0392b", 1.2));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"14\">{} error with +-3 sigma envelope (max +-{:.1} m)</text>\n",
            margin,
            y0 - 8.0,
            axis,
            max_abs
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Bar chart of normalized weights with the single-differenced error and
/// WLS residual magnitudes overlaid.
pub fn render_weights_svg(diags: &[SatelliteDiagnostics], hdop: Option<f64>) -> String {
    let w = 900.0;
    let h = 320.0;
    let margin = 50.0;
    let mut svg = svg_header(w, h);
    if diags.is_empty() {
        svg.push_str("</svg>\n");
        return svg;
    }
    let n = diags.len() as f64;
    let bar_w = (w - 2.0 * margin) / n * 0.7;
    let max_w = diags.iter().map(|d| d.normalized_weight).fold(1e-9_f64, f64::max);
    let max_err = diags
        .iter()
        .map(|d| d.sd_error.abs().max(d.wls_residual.abs()))
        .fold(1e-9_f64, f64::max);
    let base_y = h - margin;
    let plot_h = h - 2.0 * margin;
    for (i, d) in diags.iter().enumerate() {
        let x = margin + (w - 2.0 * margin) * (i as f64 + 0.15) / n;
        let bh = d.normalized_weight / max_w * plot_h;
        svg.push_str(&format!(
            "<rect x=\"{x:.2}\" y=\"{:.2}\" width=\"{bar_w:.2}\" height=\"{bh:.2}\" fill=\"#2e86c1\"/>\n",
            base_y - bh
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\" text-anchor=\"middle\">{}</text>\n",
            x + bar_w / 2.0,
            base_y + 14.0,
            d.sat_id
        ));
    }
    let err_curve: Vec<(f64, f64)> = diags
        .iter()
        .enumerate()
        .filter(|(_, d)| d.has_reference && !d.is_reference)
        .map(|(i, d)| {
            (
                margin + (w - 2.0 * margin) * (i as f64 + 0.5) / n,
                base_y - d.sd_error.abs() / max_err * plot_h,
            )
        })
        .collect();
    if err_curve.len() >= 2 {
        svg.push_str(&polyline(&err_curve, "black", 1.5));
    }
    let res_curve: Vec<(f64, f64)> = diags
        .iter()
        .enumerate()
        .map(|(i, d)| {
            (
                margin + (w - 2.0 * margin) * (i as f64 + 0.5) / n,
                base_y - d.wls_residual.abs() / max_err * plot_h,
            )
        })
        .collect();
    svg.push_str(&polyline(&res_curve, "#8e44ad", 1.0));
    let title = match hdop {
        Some(v) => format!(
            "normalized weights (bars), |single-diff error| (black), |WLS residual| (purple); weighted HDOP {v:.2}"
        ),
        None => "normalized weights (bars), |single-diff error| (black), |WLS residual| (purple)".to_string(),
    };
    svg.push_str(&format!(
        "<text x=\"{margin}\" y=\"24\" font-size=\"14\">{title}</text>\n"
    ));
    svg.push_str("</svg>\n");
    svg
}

/// Polar skyplot: zenith at the center, North up, azimuth clockwise;
/// marker color encodes the normalized weight (dark = low trust).
pub fn render_skyplot_svg(diags: &[SatelliteDiagnostics]) -> String {
    let size = 520.0;
    let c = size / 2.0;
    let radius = c - 40.0;
    let mut svg = svg_header(size, size);
    for frac in [1.0, 2.0 / 3.0, 1.0 / 3.0] {
        svg.push_str(&format!(
            "<circle cx=\"{c}\" cy=\"{c}\" r=\"{:.2}\" fill=\"none\" stroke=\"#bbb\"/>\n",
            radius * frac
        ));
    }
    svg.push_str(&format!(
        "<line x1=\"{c}\" y1=\"{:.2}\" x2=\"{c}\" y2=\"{:.2}\" stroke=\"#bbb\"/>\n",
        c - radius,
        c + radius
    ));
    svg.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{c}\" x2=\"{:.2}\" y2=\"{c}\" stroke=\"#bbb\"/>\n",
        c - radius,
        c + radius
    ));
    let max_w = diags.iter().map(|d| d.normalized_weight).fold(1e-9_f64, f64::max);
    for d in diags {
        let r = radius * (1.0 - d.elevation_deg / 90.0).clamp(0.0, 1.0);
        let az = d.azimuth_deg.to_radians();
        let x = c + r * az.sin();
        let y = c - r * az.cos();
        // Blue = trusted, red = suppressed.
        let t = (d.normalized_weight / max_w).clamp(0.0, 1.0);
        let red = (220.0 * (1.0 - t)) as u8;
        let blue = (40.0 + 180.0 * t) as u8;
        svg.push_str(&format!(
            "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"9\" fill=\"rgb({red},60,{blue})\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" font-size=\"10\" text-anchor=\"middle\">{}</text>\n",
            x,
            y - 12.0,
            d.sat_id
        ));
    }
    svg.push_str(
        "<text x=\"20\" y=\"24\" font-size=\"14\">skyplot: marker color encodes normalized weight</text>\n",
    );
    svg.push_str("</svg>\n");
    svg
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::obs::Constellation;
    use crate::sim;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn percentiles_nearest_rank() {
        let errors: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let (mean, p50, p95) = horizontal_errors(&errors).unwrap();
        assert!((mean - 50.5).abs() < 1e-12);
        assert_eq!(p50, 50.0);
        assert_eq!(p95, 95.0);

        assert!(matches!(horizontal_errors(&[]), Err(Error::EmptyRun)));
        let zeros = vec![0.0; 7];
        let (m, a, b) = horizontal_errors(&zeros).unwrap();
        assert_eq!((m, a, b), (0.0, 0.0, 0.0));
    }

    #[test]
    fn percentiles_match_sort_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.random_range(5..400);
            let errors: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..50.0)).collect();
            let (_, p50, p95) = horizontal_errors(&errors).unwrap();
            let mut sorted = errors.clone();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let oracle = |p: f64| -> f64 {
                let rank = ((p / 100.0) * n as f64).ceil().max(1.0) as usize;
                sorted[rank.min(n) - 1]
            };
            assert!((p50 - oracle(50.0)).abs() < 1e-12);
            assert!((p95 - oracle(95.0)).abs() < 1e-12);
        }
    }

    fn record(err_e: f64, err_n: f64, sig: f64) -> EpochRecord {
        EpochRecord {
            epoch_index: 0,
            time: 0.0,
            error_east: err_e,
            error_north: err_n,
            cov_ee: sig * sig,
            cov_en: 0.0,
            cov_nn: sig * sig,
            nll: 0.0,
            es: 0.0,
        }
    }

    #[test]
    fn diagnostics_basic_cases() {
        // All-zero errors: exceedance 0, coverage 1 at every k.
        let records: Vec<EpochRecord> = (0..10).map(|_| record(0.0, 0.0, 1.0)).collect();
        for d in credibility_diagnostics(&records, &[1.0, 3.0]) {
            assert_eq!(d.exceedance_east, 0.0);
            assert_eq!(d.coverage_north, 1.0);
        }
        // Zero sigma with nonzero error counts as exceedance.
        let records = vec![record(0.5, 0.0, 0.0)];
        let d = &credibility_diagnostics(&records, &[3.0])[0];
        assert_eq!(d.exceedance_east, 1.0);
        assert_eq!(d.exceedance_north, 0.0);
    }

    #[test]
    fn diagnostics_complementarity_and_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let records: Vec<EpochRecord> = (0..500)
            .map(|_| {
                record(
                    rng.random_range(-3.0..3.0),
                    rng.random_range(-3.0..3.0),
                    rng.random_range(0.3..2.0),
                )
            })
            .collect();
        let ks = [0.5, 1.0, 2.0, 3.0, 4.0];
        let diags = credibility_diagnostics(&records, &ks);
        for d in &diags {
            assert!((d.exceedance_east + d.coverage_east - 1.0).abs() < 1e-12);
            assert!((d.exceedance_north + d.coverage_north - 1.0).abs() < 1e-12);
        }
        for pair in diags.windows(2) {
            assert!(pair[1].exceedance_east <= pair[0].exceedance_east + 1e-12);
            assert!(pair[1].coverage_east + 1e-12 >= pair[0].coverage_east);
        }
    }

    #[test]
    fn hand_counted_fractions_on_twenty_records() {
        // 20 records with sigma = 1 on both axes. East errors: 4 exceed 3
        // (3.5, 4.0, 3.01, 5.0) and 13 lie within 1. North errors: 2 exceed
        // 3 and 15 lie within 1. Hand-counted fractions: exc3 = 4/20 and
        // 2/20, cov1 = 13/20 and 15/20.
        let east = [
            3.5, 4.0, 3.01, 5.0, 2.0, 1.5, 2.5, 0.9, 0.5, 0.1, 0.2, 0.3, 0.4, 0.6, 0.7, 0.8,
            0.99, 0.05, 0.15, 0.25,
        ];
        let north = [
            3.2, 4.1, 2.0, 1.2, 2.9, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.99,
            0.05, 0.15, 0.25, 0.35,
        ];
        let records: Vec<EpochRecord> = east
            .iter()
            .zip(&north)
            .map(|(&e, &n)| record(e, n, 1.0))
            .collect();
        let d = credibility_diagnostics(&records, &[1.0, 3.0]);
        assert_eq!(d[1].exceedance_east, 4.0 / 20.0);
        assert_eq!(d[1].exceedance_north, 2.0 / 20.0);
        assert_eq!(d[0].coverage_east, 13.0 / 20.0);
        assert_eq!(d[0].coverage_north, 15.0 / 20.0);
    }

    #[test]
    fn self_sampled_gaussian_hits_nominal_rates() {
        // Data drawn from its own reported Gaussian: the 3-sigma exceedance
        // and 1-sigma coverage must sit at the Gaussian nominals within
        // binomial noise over 1e5 samples.
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        let records: Vec<EpochRecord> = (0..100_000)
            .map(|_| {
                let sig_e: f64 = rng.random_range(0.5..3.0);
                let sig_n: f64 = rng.random_range(0.5..3.0);
                let ze: f64 = Distribution::<f64>::sample(&StandardNormal, &mut rng);
                let zn: f64 = Distribution::<f64>::sample(&StandardNormal, &mut rng);
                EpochRecord {
                    epoch_index: 0,
                    time: 0.0,
                    error_east: sig_e * ze,
                    error_north: sig_n * zn,
                    cov_ee: sig_e * sig_e,
                    cov_en: 0.0,
                    cov_nn: sig_n * sig_n,
                    nll: 0.0,
                    es: 0.0,
                }
            })
            .collect();
        let diags = credibility_diagnostics(&records, &[1.0, 3.0]);
        assert!((diags[1].exceedance_east - 0.0027).abs() < 0.0006);
        assert!((diags[1].exceedance_north - 0.0027).abs() < 0.0006);
        assert!((diags[0].coverage_east - 0.6827).abs() < 0.005);
        assert!((diags[0].coverage_north - 0.6827).abs() < 0.005);
    }

    #[test]
    fn normalized_weights_basics() {
        let w = normalized_weights(&[1.0; 5]).unwrap();
        assert!(w.iter().all(|v| (v - 0.2).abs() < 1e-15));
        let w = normalized_weights(&[0.2, 0.3, 0.5]).unwrap();
        assert_eq!(w, vec![0.2, 0.3, 0.5]);
        let sum: f64 = normalized_weights(&[0.31, 2.8, 0.07, 1.4]).unwrap().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(matches!(normalized_weights(&[0.0, 0.0]), Err(Error::ZeroWeights)));
    }

    fn clean_epoch() -> (sim::ScenarioConfig, EpochObservations) {
        let (_, _, mut cfg) = sim::presets();
        cfg.nlos.clear();
        cfg.canyon.clear();
        cfg.noise_sigma0_m = 1e-9;
        cfg.n_epochs = 1;
        let run = sim::generate(&cfg).unwrap();
        (cfg, run.epochs.into_iter().next().unwrap())
    }

    #[test]
    fn single_diff_errors_on_clean_epoch_are_zero() {
        let (cfg, epoch) = clean_epoch();
        let truth = epoch.truth_position.unwrap();
        let clock = epoch.truth_clock_biases.unwrap();
        let sd = single_diff_errors(&epoch, &truth, &clock, &cfg.origin).unwrap();
        for e in &sd {
            assert!(e.value.abs() < 1e-6, "{} -> {}", e.sat_id, e.value);
        }
    }

    #[test]
    fn single_diff_injection_and_clock_cancellation() {
        let (cfg, mut epoch) = clean_epoch();
        let truth = epoch.truth_position.unwrap();
        let clock = epoch.truth_clock_biases.unwrap();

        // Find a non-reference satellite: any one that is not the max-cn0
        // of its constellation.
        let base = single_diff_errors(&epoch, &truth, &clock, &cfg.origin).unwrap();
        let victim = base
            .iter()
            .position(|e| !e.is_reference && e.has_reference)
            .expect("need a non-reference satellite");
        epoch.observations[victim].pseudorange_obs += 25.0;
        let sd = single_diff_errors(&epoch, &truth, &clock, &cfg.origin).unwrap();
        assert!((sd[victim].value - (base[victim].value + 25.0)).abs() < 1e-9);
        for (i, (a, b)) in base.iter().zip(&sd).enumerate() {
            if i != victim {
                assert!((a.value - b.value).abs() < 1e-9, "{} moved", a.sat_id);
            }
        }

        // Shifting a whole constellation's clock leaves all values fixed.
        let mut shifted = clock;
        shifted[Constellation::GpsQzss.bias_index()] += 777.0;
        let mut epoch2 = epoch.clone();
        for ob in &mut epoch2.observations {
            if ob.constellation == Constellation::GpsQzss {
                ob.pseudorange_obs += 777.0;
            }
        }
        let sd2 = single_diff_errors(&epoch2, &truth, &shifted, &cfg.origin).unwrap();
        for (a, b) in sd.iter().zip(&sd2) {
            assert!((a.value - b.value).abs() < 1e-9);
        }
    }

    #[test]
    fn singleton_constellation_flagged_no_reference() {
        let (cfg, mut epoch) = clean_epoch();
        // Keep exactly one BeiDou satellite.
        let mut seen = false;
        epoch.observations.retain(|o| {
            if o.constellation == Constellation::BeiDou {
                if seen {
                    return false;
                }
                seen = true;
            }
            true
        });
        let truth = epoch.truth_position.unwrap();
        let clock = epoch.truth_clock_biases.unwrap();
        let sd = single_diff_errors(&epoch, &truth, &clock, &cfg.origin).unwrap();
        let lone = sd.iter().find(|e| e.constellation == Constellation::BeiDou).unwrap();
        assert!(!lone.has_reference);
        assert_eq!(lone.value, 0.0);
    }

    #[test]
    fn envelope_csv_round_trip() {
        let records: Vec<EpochRecord> = (0..20)
            .map(|i| EpochRecord {
                epoch_index: i,
                time: i as f64 * 0.5,
                error_east: (i as f64) * 0.31 - 3.0,
                error_north: (i as f64) * -0.17 + 1.0,
                cov_ee: 1.5 + i as f64 * 0.01,
                cov_en: 0.1,
                cov_nn: 2.5 - i as f64 * 0.02,
                nll: 0.0,
                es: 0.0,
            })
            .collect();
        let dir = std::env::temp_dir().join("dfgo_eval_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("envelope.csv");
        write_envelope_csv(&records, &path).unwrap();
        let rows = read_envelope_csv(&path).unwrap();
        assert_eq!(rows.len(), records.len());
        for (row, r) in rows.iter().zip(&records) {
            assert_eq!(row.0, r.epoch_index);
            assert_eq!(row.1, r.time);
            assert_eq!(row.2, r.error_east);
            assert_eq!(row.3, r.error_north);
            assert_eq!(row.4, r.sigma_east());
            assert_eq!(row.5, r.sigma_north());
        }
        std::fs::remove_file(&path).ok();

        // Headers-only file for empty input.
        let empty = dir.join("empty.csv");
        write_envelope_csv(&[], &empty).unwrap();
        let text = std::fs::read_to_string(&empty).unwrap();
        assert_eq!(text.lines().count(), 1);
        std::fs::remove_file(&empty).ok();
    }

    #[test]
    fn evaluate_run_classical_on_clean_data() {
        let (_, _, mut cfg) = sim::presets();
        cfg.nlos.clear();
        cfg.canyon.clear();
        cfg.noise_sigma0_m = 0.5;
        cfg.n_epochs = 12;
        let run = sim::generate(&cfg).unwrap();
        let method = EvalMethod::Classical(WeightScheme::gogps_default());
        let (eval, solutions) = evaluate_run(&method, &run.epochs, &cfg.origin).unwrap();
        assert_eq!(eval.records.len(), 12);
        assert_eq!(solutions.len(), 12);
        assert!(eval.metrics.mean_horizontal_m < 5.0);
        assert!(eval.metrics.mean_nll.is_finite());
        // Two evaluations are identical (fixed eval seed).
        let (eval2, _) = evaluate_run(&method, &run.epochs, &cfg.origin).unwrap();
        assert_eq!(
            serde_json::to_string(&MetricsSummary::from_evaluation(&eval)).unwrap(),
            serde_json::to_string(&MetricsSummary::from_evaluation(&eval2)).unwrap()
        );
    }

    #[test]
    fn export_artifact_files() {
        let (_, _, mut cfg) = sim::presets();
        cfg.n_epochs = 8;
        cfg.noise_sigma0_m = 0.5;
        let run = sim::generate(&cfg).unwrap();
        let method = EvalMethod::Classical(WeightScheme::elevation_default());
        let (eval, solutions) = evaluate_run(&method, &run.epochs, &cfg.origin).unwrap();
        let dir = std::env::temp_dir().join("dfgo_export_test");
        let files = export_artifacts(&eval, &dir).unwrap();
        assert_eq!(files.len(), 3);
        for f in &files {
            assert!(f.exists());
        }
        // Envelope CSV row count equals epoch count.
        let rows = read_envelope_csv(&dir.join("envelope.csv")).unwrap();
        assert_eq!(rows.len(), eval.records.len());

        // Per-epoch diagnostics export.
        let prepared = trainer::prepare_epochs(&run.epochs, &cfg.origin).unwrap();
        let diags = satellite_diagnostics(
            &run.epochs[5],
            &solutions[5].weights,
            &prepared[5].wls,
            &solutions[5].state,
            &cfg.origin,
        )
        .unwrap();
        let files = export_epoch_diagnostics(&diags, 5, solutions[5].hdop, &dir).unwrap();
        assert_eq!(files.len(), 4);
        for f in &files {
            assert!(f.exists());
            std::fs::remove_file(f).ok();
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
