//! Training objectives on the East-North predictive Gaussian: negative
//! log-likelihood, a Monte-Carlo Energy Score with reparameterized
//! gradients, and their convex combination.
//!
//! Both scores are strictly proper for the 2-D Gaussian predictive family:
//! their expected value is minimized exactly when the reported mean and
//! covariance match the distribution the errors are actually drawn from.
//! Gradients are returned with respect to the mean and (Frobenius
//! convention, symmetric) the covariance so the solver backward pass can
//! consume them directly.

use nalgebra::{Matrix2, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Jitter added to the covariance diagonal before Cholesky.
pub const COVARIANCE_JITTER: f64 = 1e-9;

/// A 2-D Gaussian predictive distribution paired with its ground truth.
#[derive(Debug, Clone, Copy)]
pub struct EnPredictive {
    pub mean: Vector2<f64>,
    pub covariance: Matrix2<f64>,
    pub ground_truth: Vector2<f64>,
}

/// Loss configuration: combination weights, Monte-Carlo sample count, seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub mc_samples: usize,
    pub rng_seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.5, beta: 0.5, mc_samples: 2048, rng_seed: 0 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.alpha + self.beta <= 0.0 {
            return Err(Error::InvalidConfig {
                path: "loss.alpha/beta".into(),
                message: "weights must be non-negative with a positive sum".into(),
            });
        }
        if self.mc_samples < 2 {
            return Err(Error::InvalidConfig {
                path: "loss.mc_samples".into(),
                message: "need at least 2 Monte-Carlo samples".into(),
            });
        }
        Ok(())
    }
}

/// Scalar loss value plus gradients wrt the predictive mean and covariance.
#[derive(Debug, Clone, Copy)]
pub struct LossValue {
    pub value: f64,
    pub d_mean: Vector2<f64>,
    pub d_cov: Matrix2<f64>,
}

struct Chol2 {
    l11: f64,
    l21: f64,
    l22: f64,
}

fn try_cholesky2(a: f64, b: f64, c: f64) -> Option<Chol2> {
    if a <= 0.0 {
        return None;
    }
    let l11 = a.sqrt();
    let l21 = b / l11;
    let rest = c - l21 * l21;
    if rest <= 0.0 {
        return None;
    }
    Some(Chol2 { l11, l21, l22: rest.sqrt() })
}

/// Factor the covariance; the jitter is a fallback applied only when the
/// raw matrix fails, so comfortably positive-definite inputs are scored
/// exactly. A failure above the jitter is a hard error, never a clamp.
fn cholesky2(cov: &Matrix2<f64>) -> Result<Chol2> {
    let a = cov[(0, 0)];
    let c = cov[(1, 1)];
    let b = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
    if !(a.is_finite() && b.is_finite() && c.is_finite()) {
        return Err(Error::NonFinite { context: "predictive covariance" });
    }
    try_cholesky2(a, b, c)
        .or_else(|| try_cholesky2(a + COVARIANCE_JITTER, b, c + COVARIANCE_JITTER))
        .ok_or(Error::NotPositiveDefinite { context: "EN covariance" })
}

/// Pull a gradient wrt the lower Cholesky factor back to a symmetric
/// gradient wrt the covariance (Frobenius convention: off-diagonal entries
/// each carry half the sensitivity to the shared element).
fn chol2_backward(l: &Chol2, g11: f64, g21: f64, g22: f64) -> Matrix2<f64> {
    let a = l.l11 * l.l11;
    // dl11/da, dl21/da, dl22/da and friends, from the closed forms
    // l11 = sqrt(a), l21 = b/l11, l22 = sqrt(c - b^2/a).
    let da = g11 / (2.0 * l.l11) - g21 * l.l21 / (2.0 * a)
        + g22 * l.l21 * l.l21 / (2.0 * a * l.l22);
    let db = g21 / l.l11 - g22 * l.l21 / (l.l11 * l.l22);
    let dc = g22 / (2.0 * l.l22);
    Matrix2::new(da, 0.5 * db, 0.5 * db, dc)
}

/// Negative log-likelihood of the Gaussian predictive at the ground truth,
/// with analytic gradients.
///
/// `L = 1/2 [ log|S| + e^T S^-1 e + 2 log 2pi ]`, `e = truth - mean`.
pub fn nll(pred: &EnPredictive) -> Result<LossValue> {
    let l = cholesky2(&pred.covariance)?;
    let e = pred.ground_truth - pred.mean;
    // Solve S w = e through the Cholesky factors.
    let y0 = e[0] / l.l11;
    let y1 = (e[1] - l.l21 * y0) / l.l22;
    let w1 = y1 / l.l22;
    let w0 = (y0 - l.l21 * w1) / l.l11;
    let w = Vector2::new(w0, w1);
    let log_det = 2.0 * (l.l11.ln() + l.l22.ln());
    let quad = e.dot(&w);
    let value = 0.5 * (log_det + quad + 2.0 * (2.0 * std::f64::consts::PI).ln());

    // S^-1 from the factors.
    let det = (l.l11 * l.l22).powi(2);
    let a = l.l11 * l.l11;
    let b = l.l11 * l.l21;
    let c = l.l21 * l.l21 + l.l22 * l.l22;
    let inv = Matrix2::new(c / det, -b / det, -b / det, a / det);

    let d_mean = -w;
    let d_cov = 0.5 * (inv - w * w.transpose());
    Ok(LossValue { value, d_mean, d_cov })
}

/// Draw the K standard-normal pairs for a given seed. Shared between the
/// estimator and its finite-difference oracle so same-seed checks are exact.
fn standard_pairs(k: usize, seed: u64) -> Vec<Vector2<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..k)
        .map(|_| {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            Vector2::new(a, b)
        })
        .collect()
}

/// Monte-Carlo Energy Score with reparameterized gradients.
///
/// Samples `y_k = mean + L eps_k` with `L` the lower Cholesky factor. The
/// estimator is `mean_k ||y_k - gt|| - (1/K) sum_pairs ||y_(2j-1) - y_(2j)||`
/// over the K/2 non-overlapping consecutive pairs, which makes the second
/// term an unbiased estimate of `(1/2) E||y - y'||`.
pub fn energy_score_mc(pred: &EnPredictive, k: usize, seed: u64) -> Result<LossValue> {
    if k < 2 {
        return Err(Error::InvalidConfig {
            path: "loss.mc_samples".into(),
            message: "energy score needs at least 2 samples".into(),
        });
    }
    let l = cholesky2(&pred.covariance)?;
    let eps = standard_pairs(k, seed);
    let kf = k as f64;

    let mut value = 0.0;
    let mut d_mean = Vector2::zeros();
    let mut g11 = 0.0;
    let mut g21 = 0.0;
    let mut g22 = 0.0;

    let transform = |e: &Vector2<f64>| -> Vector2<f64> {
        Vector2::new(l.l11 * e[0], l.l21 * e[0] + l.l22 * e[1])
    };

    // Attraction term: mean distance from samples to the ground truth.
    for e in &eps {
        let y = pred.mean + transform(e);
        let diff = y - pred.ground_truth;
        let norm = diff.norm().max(1e-300);
        value += norm / kf;
        let u = diff / norm;
        d_mean += u / kf;
        // dy/dL through the reparameterization: y = mean + L e.
        g11 += u[0] * e[0] / kf;
        g21 += u[1] * e[0] / kf;
        g22 += u[1] * e[1] / kf;
    }

    // Spread term over non-overlapping consecutive pairs.
    for pair in eps.chunks_exact(2) {
        let de = pair[0] - pair[1];
        let dy = transform(&de);
        let norm = dy.norm().max(1e-300);
        value -= norm / kf;
        let u = dy / norm;
        g11 -= u[0] * de[0] / kf;
        g21 -= u[1] * de[0] / kf;
        g22 -= u[1] * de[1] / kf;
    }

    let d_cov = chol2_backward(&l, g11, g21, g22);
    Ok(LossValue { value, d_mean, d_cov })
}

/// Convex combination `alpha * NLL + beta * ES` of values and gradients.
pub fn combined(pred: &EnPredictive, cfg: &LossConfig) -> Result<LossValue> {
    cfg.validate()?;
    let mut value = 0.0;
    let mut d_mean = Vector2::zeros();
    let mut d_cov = Matrix2::zeros();
    if cfg.alpha != 0.0 {
        let n = nll(pred)?;
        value += cfg.alpha * n.value;
        d_mean += cfg.alpha * n.d_mean;
        d_cov += cfg.alpha * n.d_cov;
    }
    if cfg.beta != 0.0 {
        let e = energy_score_mc(pred, cfg.mc_samples, cfg.rng_seed)?;
        value += cfg.beta * e.value;
        d_mean += cfg.beta * e.d_mean;
        d_cov += cfg.beta * e.d_cov;
    }
    Ok(LossValue { value, d_mean, d_cov })
}

/// Sample count for evaluation-time energy scores.
pub const ES_EVAL_SAMPLES: usize = 8192;

/// Evaluation-mode NLL (value only).
pub fn nll_eval(pred: &EnPredictive) -> Result<f64> {
    Ok(nll(pred)?.value)
}

/// Evaluation-mode energy score (value only) at a fixed seed.
pub fn es_eval(pred: &EnPredictive, k_eval: usize, seed: u64) -> Result<f64> {
    Ok(energy_score_mc(pred, k_eval, seed)?.value)
}
