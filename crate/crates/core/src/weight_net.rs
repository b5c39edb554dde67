//! The per-satellite weighting network: feature assembly and normalization,
//! a projection layer, two single-head self-attention encoder layers, an MLP
//! head, and the shifted-sigmoid weight mapping, with a full manual backward
//! pass.
//!
//! Per satellite the input is the 4-vector
//! `[elevation, pseudorange_obs, cn0, wls_residual]`, normalized with
//! training-set statistics. Attention mixes the satellites of one epoch (no
//! positional encoding, so outputs are permutation-equivariant). The scalar
//! head score `z_i` maps to a reliability weight `w_i = sigmoid(z_i) + w_min`
//! and the factor information `Omega_i = w_i^2` consumed by the solver.
//!
//! Everything is f64 and hand-differentiated so the whole pipeline
//! (network -> solver -> loss) forms one self-contained reverse-mode chain.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{self, Geodetic};
use crate::obs::EpochObservations;
use crate::weighting::WlsSolution;

/// Number of per-satellite input features.
pub const N_FEATURES: usize = 4;

/// Architecture hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub d_model: usize,
    pub ff_width: usize,
    pub leaky_slope: f64,
    pub layer_norm_eps: f64,
    pub n_layers: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            ff_width: 64,
            leaky_slope: 0.01,
            layer_norm_eps: 1e-5,
            n_layers: 2,
        }
    }
}

/// Per-feature normalization statistics, estimated from the training split
/// only.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: [f64; N_FEATURES],
    pub std: [f64; N_FEATURES],
}

impl FeatureStats {
    /// Identity statistics (mean 0, std 1).
    pub fn identity() -> Self {
        Self { mean: [0.0; N_FEATURES], std: [1.0; N_FEATURES] }
    }

    /// Estimate mean/std per feature; std is floored at 1e-9 so constant
    /// features cannot divide by zero.
    pub fn estimate(rows: &[[f64; N_FEATURES]]) -> Self {
        let n = rows.len().max(1) as f64;
        let mut mean = [0.0; N_FEATURES];
        for r in rows {
            for k in 0..N_FEATURES {
                mean[k] += r[k];
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = [0.0; N_FEATURES];
        for r in rows {
            for k in 0..N_FEATURES {
                var[k] += (r[k] - mean[k]).powi(2);
            }
        }
        let mut std = [0.0; N_FEATURES];
        for k in 0..N_FEATURES {
            std[k] = (var[k] / n).sqrt().max(1e-9);
        }
        Self { mean, std }
    }
}

/// Normalized per-satellite feature matrix of one epoch, with a validity
/// mask. Masked rows are zero-filled and excluded from attention; their
/// outputs are zeroed and must not be consumed as factors.
#[derive(Debug, Clone)]
pub struct SatelliteFeatures {
    /// n_sats x N_FEATURES, normalized.
    pub rows: DMatrix<f64>,
    pub mask: Vec<bool>,
}

impl SatelliteFeatures {
    pub fn n_sats(&self) -> usize {
        self.rows.nrows()
    }
}

/// Raw (unnormalized) feature rows of one epoch in canonical satellite
/// order: `[elevation, pseudorange_obs, cn0, wls_residual]`.
pub fn raw_features(
    epoch: &EpochObservations,
    wls: &WlsSolution,
    origin: &Geodetic,
) -> Result<Vec<[f64; N_FEATURES]>> {
    if wls.residuals.len() != epoch.observations.len() {
        return Err(Error::Malformed {
            what: "satellite features",
            message: format!(
                "WLS residual count {} does not cover epoch {} with {} observations",
                wls.residuals.len(),
                epoch.epoch_index,
                epoch.observations.len()
            ),
        });
    }
    let rx_ecef = geo::enu_to_ecef(&wls.state.position, origin)?;
    let mut rows = Vec::with_capacity(epoch.observations.len());
    for (ob, &res) in epoch.observations.iter().zip(&wls.residuals) {
        let sky = geo::sky_direction(&ob.sat_pos, &rx_ecef, origin)?;
        rows.push([sky.elevation, ob.pseudorange_obs, ob.cn0, res]);
    }
    Ok(rows)
}

/// Normalize raw features with the stored statistics and stack them.
pub fn assemble_features(
    epoch: &EpochObservations,
    wls: &WlsSolution,
    stats: &FeatureStats,
    origin: &Geodetic,
) -> Result<SatelliteFeatures> {
    let raw = raw_features(epoch, wls, origin)?;
    let n = raw.len();
    let mut rows = DMatrix::zeros(n, N_FEATURES);
    for (i, r) in raw.iter().enumerate() {
        for k in 0..N_FEATURES {
            rows[(i, k)] = (r[k] - stats.mean[k]) / stats.std[k];
        }
    }
    Ok(SatelliteFeatures { rows, mask: vec![true; n] })
}

/// A dense layer `y = x W + b` (rows are satellites).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl LinearLayer {
    fn seeded(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Self {
            weight: DMatrix::from_fn(in_dim, out_dim, |_, _| rng.random_range(-bound..bound)),
            bias: DVector::from_fn(out_dim, |_, _| rng.random_range(-bound..bound)),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: DMatrix::zeros(self.weight.nrows(), self.weight.ncols()),
            bias: DVector::zeros(self.bias.nrows()),
        }
    }

    fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x * &self.weight;
        for mut row in y.row_iter_mut() {
            row += self.bias.transpose();
        }
        y
    }

    /// Accumulate parameter gradients and return the input cotangent.
    fn backward(
        &self,
        x: &DMatrix<f64>,
        y_bar: &DMatrix<f64>,
        grad: &mut LinearLayer,
    ) -> DMatrix<f64> {
        grad.weight += x.transpose() * y_bar;
        for row in y_bar.row_iter() {
            grad.bias += row.transpose();
        }
        y_bar * self.weight.transpose()
    }
}

/// One post-norm encoder layer: single-head self-attention plus a two-layer
/// feed-forward block, each followed by a residual connection and layer
/// normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderLayer {
    pub wq: LinearLayer,
    /// Key projection carries no bias: a shared key offset shifts every
    /// attention score of a row equally, which the softmax cancels, so a
    /// key bias could never receive gradient.
    pub wk_weight: DMatrix<f64>,
    pub wv: LinearLayer,
    pub wo: LinearLayer,
    pub ln1_gamma: DVector<f64>,
    pub ln1_beta: DVector<f64>,
    pub ff1: LinearLayer,
    pub ff2: LinearLayer,
    pub ln2_gamma: DVector<f64>,
    pub ln2_beta: DVector<f64>,
}

impl EncoderLayer {
    fn seeded(arch: &ArchConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = arch.d_model;
        let bound = 1.0 / (d as f64).sqrt();
        Self {
            wq: LinearLayer::seeded(d, d, rng),
            wk_weight: DMatrix::from_fn(d, d, |_, _| rng.random_range(-bound..bound)),
            wv: LinearLayer::seeded(d, d, rng),
            wo: LinearLayer::seeded(d, d, rng),
            ln1_gamma: DVector::from_element(d, 1.0),
            ln1_beta: DVector::zeros(d),
            ff1: LinearLayer::seeded(d, arch.ff_width, rng),
            ff2: LinearLayer::seeded(arch.ff_width, d, rng),
            ln2_gamma: DVector::from_element(d, 1.0),
            ln2_beta: DVector::zeros(d),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            wq: self.wq.zeros_like(),
            wk_weight: DMatrix::zeros(self.wk_weight.nrows(), self.wk_weight.ncols()),
            wv: self.wv.zeros_like(),
            wo: self.wo.zeros_like(),
            ln1_gamma: DVector::zeros(self.ln1_gamma.nrows()),
            ln1_beta: DVector::zeros(self.ln1_beta.nrows()),
            ff1: self.ff1.zeros_like(),
            ff2: self.ff2.zeros_like(),
            ln2_gamma: DVector::zeros(self.ln2_gamma.nrows()),
            ln2_beta: DVector::zeros(self.ln2_beta.nrows()),
        }
    }
}

/// All learnable tensors. The gradient container reuses this type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightNetParams {
    pub proj: LinearLayer,
    pub layers: Vec<EncoderLayer>,
    pub head_hidden: LinearLayer,
    pub head_out: LinearLayer,
}

impl WeightNetParams {
    pub fn zeros_like(&self) -> Self {
        Self {
            proj: self.proj.zeros_like(),
            layers: self.layers.iter().map(|l| l.zeros_like()).collect(),
            head_hidden: self.head_hidden.zeros_like(),
            head_out: self.head_out.zeros_like(),
        }
    }

    /// Named flat views over every tensor, in a fixed order.
    pub fn tensor_slices(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("proj.weight".into(), self.proj.weight.as_slice()),
            ("proj.bias".into(), self.proj.bias.as_slice()),
        ];
        for (k, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{k}.wq.weight"), l.wq.weight.as_slice()));
            out.push((format!("layer{k}.wq.bias"), l.wq.bias.as_slice()));
            out.push((format!("layer{k}.wk.weight"), l.wk_weight.as_slice()));
            out.push((format!("layer{k}.wv.weight"), l.wv.weight.as_slice()));
            out.push((format!("layer{k}.wv.bias"), l.wv.bias.as_slice()));
            out.push((format!("layer{k}.wo.weight"), l.wo.weight.as_slice()));
            out.push((format!("layer{k}.wo.bias"), l.wo.bias.as_slice()));
            out.push((format!("layer{k}.ln1.gamma"), l.ln1_gamma.as_slice()));
            out.push((format!("layer{k}.ln1.beta"), l.ln1_beta.as_slice()));
            out.push((format!("layer{k}.ff1.weight"), l.ff1.weight.as_slice()));
            out.push((format!("layer{k}.ff1.bias"), l.ff1.bias.as_slice()));
            out.push((format!("layer{k}.ff2.weight"), l.ff2.weight.as_slice()));
            out.push((format!("layer{k}.ff2.bias"), l.ff2.bias.as_slice()));
            out.push((format!("layer{k}.ln2.gamma"), l.ln2_gamma.as_slice()));
            out.push((format!("layer{k}.ln2.beta"), l.ln2_beta.as_slice()));
        }
        out.push(("head_hidden.weight".into(), self.head_hidden.weight.as_slice()));
        out.push(("head_hidden.bias".into(), self.head_hidden.bias.as_slice()));
        out.push(("head_out.weight".into(), self.head_out.weight.as_slice()));
        out.push(("head_out.bias".into(), self.head_out.bias.as_slice()));
        out
    }

    /// Mutable counterpart of [`Self::tensor_slices`], same order.
    pub fn tensor_slices_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("proj.weight".into(), self.proj.weight.as_mut_slice()),
            ("proj.bias".into(), self.proj.bias.as_mut_slice()),
        ];
        for (k, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{k}.wq.weight"), l.wq.weight.as_mut_slice()));
            out.push((format!("layer{k}.wq.bias"), l.wq.bias.as_mut_slice()));
            out.push((format!("layer{k}.wk.weight"), l.wk_weight.as_mut_slice()));
            out.push((format!("layer{k}.wv.weight"), l.wv.weight.as_mut_slice()));
            out.push((format!("layer{k}.wv.bias"), l.wv.bias.as_mut_slice()));
            out.push((format!("layer{k}.wo.weight"), l.wo.weight.as_mut_slice()));
            out.push((format!("layer{k}.wo.bias"), l.wo.bias.as_mut_slice()));
            out.push((format!("layer{k}.ln1.gamma"), l.ln1_gamma.as_mut_slice()));
            out.push((format!("layer{k}.ln1.beta"), l.ln1_beta.as_mut_slice()));
            out.push((format!("layer{k}.ff1.weight"), l.ff1.weight.as_mut_slice()));
            out.push((format!("layer{k}.ff1.bias"), l.ff1.bias.as_mut_slice()));
            out.push((format!("layer{k}.ff2.weight"), l.ff2.weight.as_mut_slice()));
            out.push((format!("layer{k}.ff2.bias"), l.ff2.bias.as_mut_slice()));
            out.push((format!("layer{k}.ln2.gamma"), l.ln2_gamma.as_mut_slice()));
            out.push((format!("layer{k}.ln2.beta"), l.ln2_beta.as_mut_slice()));
        }
        out.push(("head_hidden.weight".into(), self.head_hidden.weight.as_mut_slice()));
        out.push(("head_hidden.bias".into(), self.head_hidden.bias.as_mut_slice()));
        out.push(("head_out.weight".into(), self.head_out.weight.as_mut_slice()));
        out.push(("head_out.bias".into(), self.head_out.bias.as_mut_slice()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensor_slices().iter().map(|(_, s)| s.len()).sum()
    }

    /// Global L2 norm over every tensor.
    pub fn global_norm(&self) -> f64 {
        self.tensor_slices()
            .iter()
            .map(|(_, s)| s.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, s) in self.tensor_slices_mut() {
            for v in s {
                *v *= factor;
            }
        }
    }

    /// `self += factor * other` elementwise (shapes must match).
    pub fn axpy(&mut self, factor: f64, other: &Self) {
        let theirs = other.tensor_slices();
        for ((_, mine), (_, other)) in self.tensor_slices_mut().into_iter().zip(theirs) {
            for (a, b) in mine.iter_mut().zip(other.iter()) {
                *a += factor * b;
            }
        }
    }
}

/// The weighting network: architecture, parameters, normalization
/// statistics, and the weight-mapping lower bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightNet {
    pub arch: ArchConfig,
    pub params: WeightNetParams,
    pub stats: FeatureStats,
    /// Lower bound of the shifted sigmoid; 0 in all experiments here.
    pub w_min: f64,
}

impl WeightNet {
    /// Fresh network with uniform +-1/sqrt(fan_in) initialization.
    pub fn seeded(arch: ArchConfig, stats: FeatureStats, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = WeightNetParams {
            proj: LinearLayer::seeded(N_FEATURES, arch.d_model, &mut rng),
            layers: (0..arch.n_layers).map(|_| EncoderLayer::seeded(&arch, &mut rng)).collect(),
            head_hidden: LinearLayer::seeded(arch.d_model, arch.d_model, &mut rng),
            head_out: LinearLayer::seeded(arch.d_model, 1, &mut rng),
        };
        Self { arch, params, stats, w_min: 0.0 }
    }
}

/// Per-factor network outputs: score, weight, sigma, information.
#[derive(Debug, Clone)]
pub struct FactorWeights {
    pub score: Vec<f64>,
    pub weight: Vec<f64>,
    pub sigma: Vec<f64>,
    pub information: Vec<f64>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

fn leaky_grad(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        slope
    }
}

struct LayerNormCache {
    normalized: DMatrix<f64>,
    inv_std: DVector<f64>,
}

fn layer_norm(
    x: &DMatrix<f64>,
    gamma: &DVector<f64>,
    beta: &DVector<f64>,
    eps: f64,
) -> (DMatrix<f64>, LayerNormCache) {
    let (n, d) = x.shape();
    let mut out = DMatrix::zeros(n, d);
    let mut normalized = DMatrix::zeros(n, d);
    let mut inv_std = DVector::zeros(n);
    for i in 0..n {
        let mean = x.row(i).sum() / d as f64;
        let mut var = 0.0;
        for k in 0..d {
            var += (x[(i, k)] - mean).powi(2);
        }
        var /= d as f64;
        let s = 1.0 / (var + eps).sqrt();
        inv_std[i] = s;
        for k in 0..d {
            let xn = (x[(i, k)] - mean) * s;
            normalized[(i, k)] = xn;
            out[(i, k)] = gamma[k] * xn + beta[k];
        }
    }
    (out, LayerNormCache { normalized, inv_std })
}

fn layer_norm_backward(
    cache: &LayerNormCache,
    gamma: &DVector<f64>,
    y_bar: &DMatrix<f64>,
    gamma_bar: &mut DVector<f64>,
    beta_bar: &mut DVector<f64>,
) -> DMatrix<f64> {
    let (n, d) = y_bar.shape();
    let mut x_bar = DMatrix::zeros(n, d);
    for i in 0..n {
        let mut g_mean = 0.0;
        let mut gx_mean = 0.0;
        for k in 0..d {
            let g = gamma[k] * y_bar[(i, k)];
            g_mean += g;
            gx_mean += g * cache.normalized[(i, k)];
            gamma_bar[k] += y_bar[(i, k)] * cache.normalized[(i, k)];
            beta_bar[k] += y_bar[(i, k)];
        }
        g_mean /= d as f64;
        gx_mean /= d as f64;
        let s = cache.inv_std[i];
        for k in 0..d {
            let g = gamma[k] * y_bar[(i, k)];
            x_bar[(i, k)] = s * (g - g_mean - cache.normalized[(i, k)] * gx_mean);
        }
    }
    x_bar
}

struct AttentionCache {
    input: DMatrix<f64>,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    probs: DMatrix<f64>,
    context: DMatrix<f64>,
}

struct EncoderCache {
    attn: AttentionCache,
    ln1: LayerNormCache,
    ln1_out: DMatrix<f64>,
    ff1_pre: DMatrix<f64>,
    ff1_post: DMatrix<f64>,
    ln2: LayerNormCache,
}

/// Everything the backward pass needs from one forward evaluation.
pub struct ForwardCache {
    features: SatelliteFeatures,
    proj_pre: DMatrix<f64>,
    encoders: Vec<EncoderCache>,
    head_input: DMatrix<f64>,
    head_pre: DMatrix<f64>,
    head_post: DMatrix<f64>,
    weight: Vec<f64>,
}

const MASKED_SCORE: f64 = -1.0e30;

fn attention(
    layer: &EncoderLayer,
    x: &DMatrix<f64>,
    mask: &[bool],
) -> (DMatrix<f64>, AttentionCache) {
    let n = x.nrows();
    let d = x.ncols() as f64;
    let q = layer.wq.forward(x);
    let k = x * &layer.wk_weight;
    let v = layer.wv.forward(x);
    let scale = 1.0 / d.sqrt();
    let mut scores = &q * k.transpose() * scale;
    for (j, &alive) in mask.iter().enumerate() {
        if !alive {
            for i in 0..n {
                scores[(i, j)] = MASKED_SCORE;
            }
        }
    }
    // Row softmax with the usual max subtraction.
    let mut probs = DMatrix::zeros(n, n);
    for i in 0..n {
        let row_max = scores.row(i).max();
        let mut sum = 0.0;
        for j in 0..n {
            let e = (scores[(i, j)] - row_max).exp();
            probs[(i, j)] = e;
            sum += e;
        }
        for j in 0..n {
            probs[(i, j)] /= sum;
        }
    }
    let context = &probs * &v;
    let out = layer.wo.forward(&context);
    (
        out,
        AttentionCache { input: x.clone(), q, k, v, probs, context },
    )
}

fn attention_backward(
    layer: &EncoderLayer,
    cache: &AttentionCache,
    out_bar: &DMatrix<f64>,
    grad: &mut EncoderLayer,
) -> DMatrix<f64> {
    let d = cache.input.ncols() as f64;
    let scale = 1.0 / d.sqrt();
    let ctx_bar = layer.wo.backward(&cache.context, out_bar, &mut grad.wo);
    let probs_bar = &ctx_bar * cache.v.transpose();
    let v_bar = cache.probs.transpose() * &ctx_bar;
    // Softmax rows: s_bar = p .* (p_bar - rowdot(p_bar, p)).
    let n = cache.probs.nrows();
    let mut scores_bar = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut dot = 0.0;
        for j in 0..n {
            dot += probs_bar[(i, j)] * cache.probs[(i, j)];
        }
        for j in 0..n {
            scores_bar[(i, j)] = cache.probs[(i, j)] * (probs_bar[(i, j)] - dot);
        }
    }
    let q_bar = &scores_bar * &cache.k * scale;
    let k_bar = scores_bar.transpose() * &cache.q * scale;
    let mut x_bar = layer.wq.backward(&cache.input, &q_bar, &mut grad.wq);
    grad.wk_weight += cache.input.transpose() * &k_bar;
    x_bar += &k_bar * layer.wk_weight.transpose();
    x_bar += layer.wv.backward(&cache.input, &v_bar, &mut grad.wv);
    x_bar
}

/// Forward pass. Returns the factor weights plus the cache for
/// [`backward`]; masked rows come out with zero score and zero information.
pub fn forward(model: &WeightNet, features: &SatelliteFeatures) -> (FactorWeights, ForwardCache) {
    assert!(
        features.mask.iter().any(|&m| m),
        "at least one unmasked satellite required"
    );
    let slope = model.arch.leaky_slope;
    let eps = model.arch.layer_norm_eps;

    // Zero-fill masked rows so they cannot leak through value projections.
    let mut x = features.rows.clone();
    for (i, &alive) in features.mask.iter().enumerate() {
        if !alive {
            x.row_mut(i).fill(0.0);
        }
    }

    let proj_pre = model.params.proj.forward(&x);
    let mut u = proj_pre.map(|v| leaky(v, slope));
    let mut encoders = Vec::with_capacity(model.params.layers.len());
    for layer in &model.params.layers {
        let (attn_out, attn_cache) = attention(layer, &u, &features.mask);
        let residual1 = &u + &attn_out;
        let (ln1_out, ln1) = layer_norm(&residual1, &layer.ln1_gamma, &layer.ln1_beta, eps);
        drop(residual1);
        let ff1_pre = layer.ff1.forward(&ln1_out);
        let ff1_post = ff1_pre.map(|v| leaky(v, slope));
        let ff2_out = layer.ff2.forward(&ff1_post);
        let residual2 = &ln1_out + &ff2_out;
        let (ln2_out, ln2) = layer_norm(&residual2, &layer.ln2_gamma, &layer.ln2_beta, eps);
        drop(residual2);
        encoders.push(EncoderCache {
            attn: attn_cache,
            ln1,
            ln1_out,
            ff1_pre,
            ff1_post,
            ln2,
        });
        u = ln2_out;
    }

    let head_input = u;
    let head_pre = model.params.head_hidden.forward(&head_input);
    let head_post = head_pre.map(|v| leaky(v, slope));
    let z_mat = model.params.head_out.forward(&head_post);

    let n = features.n_sats();
    let mut score = vec![0.0; n];
    let mut weight = vec![0.0; n];
    let mut sigma = vec![0.0; n];
    let mut information = vec![0.0; n];
    for i in 0..n {
        if !features.mask[i] {
            continue;
        }
        let z = z_mat[(i, 0)];
        let w = sigmoid(z) + model.w_min;
        score[i] = z;
        weight[i] = w;
        sigma[i] = 1.0 / w;
        information[i] = w * w;
    }
    (
        FactorWeights { score, weight: weight.clone(), sigma, information },
        ForwardCache {
            features: features.clone(),
            proj_pre,
            encoders,
            head_input,
            head_pre,
            head_post,
            weight,
        },
    )
}

/// Backward pass: loss gradients wrt each factor's information in,
/// parameter gradients out. Masked rows receive zero gradient.
pub fn backward(
    model: &WeightNet,
    cache: &ForwardCache,
    d_loss_d_information: &[f64],
) -> WeightNetGradients {
    let slope = model.arch.leaky_slope;
    let n = cache.features.n_sats();
    assert_eq!(d_loss_d_information.len(), n);
    let mut grads = WeightNetGradients { params: model.params.zeros_like() };

    // Chain Omega -> w -> z: dz = dOmega * 2w * sigmoid'(z), with
    // sigmoid'(z) = (w - w_min)(1 - (w - w_min)).
    let mut z_bar = DMatrix::zeros(n, 1);
    for i in 0..n {
        if !cache.features.mask[i] {
            continue;
        }
        let w = cache.weight[i];
        let s = w - model.w_min;
        z_bar[(i, 0)] = d_loss_d_information[i] * 2.0 * w * s * (1.0 - s);
    }

    let mut u_bar = {
        let h_post_bar =
            model.params.head_out.backward(&cache.head_post, &z_bar, &mut grads.params.head_out);
        let h_pre_bar = DMatrix::from_fn(n, model.arch.d_model, |i, k| {
            h_post_bar[(i, k)] * leaky_grad(cache.head_pre[(i, k)], slope)
        });
        model.params.head_hidden.backward(
            &cache.head_input,
            &h_pre_bar,
            &mut grads.params.head_hidden,
        )
    };

    for (idx, layer) in model.params.layers.iter().enumerate().rev() {
        let ec = &cache.encoders[idx];
        let gl = &mut grads.params.layers[idx];
        let resid2_bar = layer_norm_backward(
            &ec.ln2,
            &layer.ln2_gamma,
            &u_bar,
            &mut gl.ln2_gamma,
            &mut gl.ln2_beta,
        );
        // residual2 = ln1_out + ff2(ff1(ln1_out))
        let ff2_bar = resid2_bar.clone();
        let ff1_post_bar = layer.ff2.backward(&ec.ff1_post, &ff2_bar, &mut gl.ff2);
        let ff1_pre_bar = DMatrix::from_fn(n, model.arch.ff_width, |i, k| {
            ff1_post_bar[(i, k)] * leaky_grad(ec.ff1_pre[(i, k)], slope)
        });
        let mut ln1_out_bar = layer.ff1.backward(&ec.ln1_out, &ff1_pre_bar, &mut gl.ff1);
        ln1_out_bar += resid2_bar;

        let resid1_bar = layer_norm_backward(
            &ec.ln1,
            &layer.ln1_gamma,
            &ln1_out_bar,
            &mut gl.ln1_gamma,
            &mut gl.ln1_beta,
        );
        // residual1 = u + attention(u)
        let attn_in_bar = attention_backward(layer, &ec.attn, &resid1_bar, gl);
        u_bar = resid1_bar + attn_in_bar;
    }

    // Projection + activation.
    let proj_pre_bar = DMatrix::from_fn(n, model.arch.d_model, |i, k| {
        u_bar[(i, k)] * leaky_grad(cache.proj_pre[(i, k)], slope)
    });
    let mut x = cache.features.rows.clone();
    for (i, &alive) in cache.features.mask.iter().enumerate() {
        if !alive {
            x.row_mut(i).fill(0.0);
        }
    }
    let _ = model.params.proj.backward(&x, &proj_pre_bar, &mut grads.params.proj);
    grads
}

/// Parameter gradients, shaped exactly like the parameters.
#[derive(Debug, Clone)]
pub struct WeightNetGradients {
    pub params: WeightNetParams,
}

/// Versioned JSON checkpoint: architecture, normalization statistics,
/// `w_min`, and every parameter tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub format_version: u32,
    pub model: WeightNet,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl ModelCheckpoint {
    pub fn new(model: WeightNet) -> Self {
        Self { format_version: CHECKPOINT_VERSION, model }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<WeightNet> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: ModelCheckpoint = serde_json::from_str(&text)?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::FormatVersion {
                found: ckpt.format_version,
                expected: CHECKPOINT_VERSION,
                what: "model checkpoint",
            });
        }
        Ok(ckpt.model)
    }
}
