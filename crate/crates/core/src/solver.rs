//! Windowed weighted Gauss-Newton factor-graph solver with exact
//! reverse-mode gradients of both the converged state and the Laplace
//! posterior covariance with respect to the per-factor information weights.
//!
//! The solver minimizes `1/2 * sum_i Omega_i * f_i(X)^2` over the stacked
//! five-epoch state by iterating the normal equations
//! `(J^T Omega J + lambda_reg I) dX = -J^T Omega r`, recording every iterate
//! on a tape. The reported covariance inverts `J^T Omega J + lambda_cov I`
//! at the converged state (`lambda_cov` is a tiny positive-definiteness
//! jitter, not the step regularizer).
//!
//! The reverse pass replays the tape: the covariance path applies the
//! inverse-matrix identity `dSigma = -Sigma dH Sigma` plus the sensitivity of
//! the converged-state Jacobian, and the position path backpropagates through
//! each recorded iteration, including the curvature of the pseudorange rows
//! (the only second derivative in the model is the 3x3
//! `-(I - u u^T)/range` block per factor).

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::geo::Geodetic;
use crate::obs::{self, EpochObservations, EpochState, STATE_DIM};

/// Sliding-window length in epochs.
pub const WINDOW_LEN: usize = 5;
/// Stacked state dimension of a window.
pub const WINDOW_STATE_DIM: usize = WINDOW_LEN * STATE_DIM;
/// Default Gauss-Newton iteration cap; doubles as the unroll depth.
pub const GN_MAX_ITER: usize = 10;
/// Default step-norm convergence tolerance in meters.
pub const GN_TOL: f64 = 1e-4;
/// Levenberg-style regularization added to the normal matrix for the linear
/// solve only.
pub const STEP_REGULARIZATION: f64 = 1e-6;
/// Jitter added to `J^T Omega J` before inverting for the reported
/// covariance.
pub const COVARIANCE_JITTER: f64 = 1e-9;
/// Information of the weak prior pinning clock biases of constellations
/// absent at an epoch.
pub const PRIOR_INFORMATION: f64 = 1e-6;

/// A nonlinear least-squares model the solver can run on: learned factors
/// plus optional single-slot damping-prior rows with fixed information.
pub trait FactorModel {
    fn state_dim(&self) -> usize;
    /// Number of learned factors (rows whose information the caller owns).
    fn factor_count(&self) -> usize;
    /// State slots that receive a weak damping prior. The prior residual is
    /// identically zero (it re-anchors at the current iterate), so it never
    /// biases the solution: it only bounds steps along weakly observed
    /// directions and keeps the information matrix positive definite.
    fn prior_slots(&self) -> &[usize] {
        &[]
    }
    /// Residuals and Jacobian of the learned factors at `x`.
    fn eval(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)>;
    /// Accumulate `(dJ/dx)^T : jbar` into `xbar`, where `jbar` has one row
    /// per learned factor. Models with constant Jacobians leave this empty.
    fn curvature_vjp(
        &self,
        _x: &DVector<f64>,
        _jbar: &DMatrix<f64>,
        _xbar: &mut DVector<f64>,
    ) -> Result<()> {
        Ok(())
    }
}

/// A purely linear model `r(x) = offset + J x`. Used by oracle tests and the
/// acceptance suite; the solver must reproduce closed-form weighted least
/// squares on it.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub jacobian: DMatrix<f64>,
    pub offset: DVector<f64>,
}

impl FactorModel for LinearModel {
    fn state_dim(&self) -> usize {
        self.jacobian.ncols()
    }

    fn factor_count(&self) -> usize {
        self.jacobian.nrows()
    }

    fn eval(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        Ok((&self.offset + &self.jacobian * x, self.jacobian.clone()))
    }
}

/// Index of one pseudorange factor inside a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FactorRef {
    /// Epoch slot within the window (0..WINDOW_LEN).
    pub epoch: usize,
    /// Observation index within the canonicalized epoch.
    pub obs: usize,
}

/// A five-epoch stacked factor-graph instance. Factors are ordered
/// epoch-major, then constellation, then satellite id; no inter-epoch
/// factors exist.
#[derive(Debug, Clone)]
pub struct WindowProblem {
    pub epochs: Vec<EpochObservations>,
    pub origin: Geodetic,
    pub factor_index: Vec<FactorRef>,
    /// Per-factor information Omega_i >= 0, aligned with `factor_index`.
    pub information: Vec<f64>,
    pub state_dim: usize,
    prior_slots: Vec<usize>,
}

/// Build a window problem from epochs already carrying their observations.
/// Epochs are canonicalized here, so any input satellite order yields the
/// same factor indexing.
pub fn assemble_window(
    mut epochs: Vec<EpochObservations>,
    origin: Geodetic,
    information: Vec<f64>,
) -> Result<WindowProblem> {
    if epochs.len() != WINDOW_LEN {
        return Err(Error::WindowLength { expected: WINDOW_LEN, got: epochs.len() });
    }
    let mut factor_index = Vec::new();
    let mut prior_slots = Vec::new();
    for (e, epoch) in epochs.iter_mut().enumerate() {
        epoch.canonicalize();
        epoch.validate()?;
        for o in 0..epoch.observations.len() {
            factor_index.push(FactorRef { epoch: e, obs: o });
        }
        // Every clock bias gets a damping prior. Constellations absent at an
        // epoch would make the information matrix singular without one, and
        // a singleton constellation (one satellite carrying both geometry
        // and its own bias) leaves it nearly so.
        for c in 0..4 {
            prior_slots.push(e * STATE_DIM + 3 + c);
        }
    }
    if information.len() != factor_index.len() {
        return Err(Error::InformationLength {
            expected: factor_index.len(),
            got: information.len(),
        });
    }
    Ok(WindowProblem {
        epochs,
        origin,
        factor_index,
        information,
        state_dim: WINDOW_STATE_DIM,
        prior_slots,
    })
}

impl WindowProblem {
    /// Map a factor back to its (epoch slot, satellite id).
    pub fn factor_satellite(&self, factor: usize) -> (usize, &str) {
        let r = self.factor_index[factor];
        (r.epoch, self.epochs[r.epoch].observations[r.obs].sat_id.as_str())
    }

    /// Factor indices belonging to one epoch slot.
    pub fn epoch_factors(&self, epoch: usize) -> impl Iterator<Item = usize> + '_ {
        self.factor_index
            .iter()
            .enumerate()
            .filter(move |(_, r)| r.epoch == epoch)
            .map(|(i, _)| i)
    }

    fn epoch_state(x: &DVector<f64>, epoch: usize) -> EpochState {
        let mut v = obs::StateVector::zeros();
        for k in 0..STATE_DIM {
            v[k] = x[epoch * STATE_DIM + k];
        }
        EpochState::from_vector(&v)
    }

    /// Stack per-epoch states into a window state vector.
    pub fn stack_states(states: &[EpochState]) -> DVector<f64> {
        let mut x = DVector::zeros(WINDOW_STATE_DIM);
        for (e, s) in states.iter().enumerate() {
            let v = s.as_vector();
            for k in 0..STATE_DIM {
                x[e * STATE_DIM + k] = v[k];
            }
        }
        x
    }

    fn validate_information(&self) -> Result<()> {
        for &w in &self.information {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::NonFinite { context: "factor information" });
            }
        }
        for e in 0..WINDOW_LEN {
            let any_positive = self.epoch_factors(e).any(|i| self.information[i] > 0.0);
            if !any_positive {
                return Err(Error::InsufficientObservations {
                    epoch_index: self.epochs[e].epoch_index,
                    count: 0,
                    minimum: 1,
                });
            }
        }
        Ok(())
    }
}

impl FactorModel for WindowProblem {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn factor_count(&self) -> usize {
        self.factor_index.len()
    }

    fn prior_slots(&self) -> &[usize] {
        &self.prior_slots
    }

    fn eval(&self, x: &DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let m = self.factor_count();
        let mut r = DVector::zeros(m);
        let mut j = DMatrix::zeros(m, self.state_dim);
        let mut states = Vec::with_capacity(WINDOW_LEN);
        for e in 0..WINDOW_LEN {
            states.push(Self::epoch_state(x, e));
        }
        for (i, fr) in self.factor_index.iter().enumerate() {
            let epoch = &self.epochs[fr.epoch];
            let ob = &epoch.observations[fr.obs];
            let state = &states[fr.epoch];
            r[i] = obs::residual(state, ob, &self.origin)?;
            let row = obs::residual_jacobian(state, ob, &self.origin)?;
            for k in 0..STATE_DIM {
                j[(i, fr.epoch * STATE_DIM + k)] = row[k];
            }
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "window residuals" });
        }
        Ok((r, j))
    }

    fn curvature_vjp(
        &self,
        x: &DVector<f64>,
        jbar: &DMatrix<f64>,
        xbar: &mut DVector<f64>,
    ) -> Result<()> {
        let mut states = Vec::with_capacity(WINDOW_LEN);
        for e in 0..WINDOW_LEN {
            states.push(Self::epoch_state(x, e));
        }
        for (i, fr) in self.factor_index.iter().enumerate() {
            let epoch = &self.epochs[fr.epoch];
            let ob = &epoch.observations[fr.obs];
            let curv =
                obs::residual_position_curvature(&states[fr.epoch], ob, &self.origin)?;
            let base = fr.epoch * STATE_DIM;
            let row_bar =
                nalgebra::Vector3::new(jbar[(i, base)], jbar[(i, base + 1)], jbar[(i, base + 2)]);
            let contrib = curv * row_bar;
            for a in 0..3 {
                xbar[base + a] += contrib[a];
            }
        }
        Ok(())
    }
}

/// East-North marginal of one window epoch.
#[derive(Debug, Clone, Copy)]
pub struct EnMarginal {
    pub mean: Vector2<f64>,
    pub covariance: Matrix2<f64>,
}

/// Converged solver result for one window.
#[derive(Debug, Clone)]
pub struct SolverOutput {
    pub state_hat: DVector<f64>,
    pub covariance_hat: DMatrix<f64>,
    pub per_epoch_en: Vec<EnMarginal>,
    pub converged: bool,
    pub gn_iterations: usize,
}

/// Per-factor loss gradients wrt the information weights.
#[derive(Debug, Clone)]
pub struct SolverGradients {
    pub d_information: Vec<f64>,
}

struct IterationRecord {
    x: DVector<f64>,
    residuals: DVector<f64>,
    jacobian: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    delta: DVector<f64>,
    step_scale: f64,
}

impl SolverTape {
    /// Step scales actually applied per iteration (1.0 unless the
    /// divergence safety net halved a step).
    pub fn step_scales(&self) -> Vec<f64> {
        self.iterations.iter().map(|r| r.step_scale).collect()
    }
}

/// Forward tape of one solve; everything the reverse pass needs.
pub struct SolverTape {
    iterations: Vec<IterationRecord>,
    x_hat: DVector<f64>,
    jac_hat: DMatrix<f64>,
    covariance: DMatrix<f64>,
    omega_ext: DVector<f64>,
    learned_count: usize,
}

fn extended_system<M: FactorModel>(
    model: &M,
    information: &[f64],
    x: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>, DVector<f64>)> {
    let (r, j) = model.eval(x)?;
    let m = model.factor_count();
    let slots = model.prior_slots();
    let p = slots.len();
    let n = model.state_dim();
    let mut r_ext = DVector::zeros(m + p);
    let mut j_ext = DMatrix::zeros(m + p, n);
    let mut omega_ext = DVector::zeros(m + p);
    r_ext.rows_mut(0, m).copy_from(&r);
    j_ext.rows_mut(0, m).copy_from(&j);
    for (i, &w) in information.iter().enumerate() {
        omega_ext[i] = w;
    }
    // Damping priors: zero residual (re-anchored at the linearization
    // point), unit row at the pinned slot.
    for (k, &slot) in slots.iter().enumerate() {
        j_ext[(m + k, slot)] = -1.0;
        omega_ext[m + k] = PRIOR_INFORMATION;
    }
    Ok((r_ext, j_ext, omega_ext))
}

fn weighted_cost(r: &DVector<f64>, omega: &DVector<f64>) -> f64 {
    0.5 * r.iter().zip(omega.iter()).map(|(ri, wi)| wi * ri * ri).sum::<f64>()
}

fn normal_matrix(j: &DMatrix<f64>, omega: &DVector<f64>, diag: f64) -> DMatrix<f64> {
    let n = j.ncols();
    let mut h = DMatrix::zeros(n, n);
    for i in 0..j.nrows() {
        let w = omega[i];
        if w == 0.0 {
            continue;
        }
        let row = j.row(i);
        // h += w * row^T row
        for a in 0..n {
            let ra = w * row[a];
            if ra == 0.0 {
                continue;
            }
            for b in 0..n {
                h[(a, b)] += ra * row[b];
            }
        }
    }
    for k in 0..n {
        h[(k, k)] += diag;
    }
    h
}

fn condition_estimate(h: &DMatrix<f64>) -> f64 {
    let eig = h.clone().symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.iter().cloned().fold(f64::MAX, f64::min);
    if min.abs() < f64::MIN_POSITIVE {
        f64::INFINITY
    } else {
        (max / min).abs()
    }
}

/// Run the damped Gauss-Newton iteration on any [`FactorModel`] and record
/// the unrolled tape. `tol = 0` disables early stopping so the unroll depth
/// is always `max_iter` (the gradient audit relies on this).
pub fn solve_model<M: FactorModel>(
    model: &M,
    information: &[f64],
    init: &DVector<f64>,
    max_iter: usize,
    tol: f64,
) -> Result<(DVector<f64>, DMatrix<f64>, bool, usize, SolverTape)> {
    if information.len() != model.factor_count() {
        return Err(Error::InformationLength {
            expected: model.factor_count(),
            got: information.len(),
        });
    }
    let mut x = init.clone();
    let mut iterations = Vec::new();
    let mut converged = false;

    for _ in 0..max_iter {
        let (r, j, omega) = extended_system(model, information, &x)?;
        let h = normal_matrix(&j, &omega, STEP_REGULARIZATION);
        let chol = h.clone().cholesky().ok_or(Error::SingularNormalMatrix {
            condition: condition_estimate(&h),
            context: "Gauss-Newton normal matrix",
        })?;
        let mut g = DVector::zeros(model.state_dim());
        for i in 0..j.nrows() {
            let wr = omega[i] * r[i];
            if wr == 0.0 {
                continue;
            }
            g.axpy(wr, &j.row(i).transpose(), 1.0);
        }
        let delta = -chol.solve(&g);

        // Safety net: halve a divergent step (cost blowing up 10x) at most
        // four times. The scale is recorded so the reverse pass replays it.
        let cost_before = weighted_cost(&r, &omega);
        let mut step_scale = 1.0;
        for _ in 0..4 {
            let x_try = &x + &delta * step_scale;
            let (r_try, _, omega_try) = extended_system(model, information, &x_try)?;
            if weighted_cost(&r_try, &omega_try) <= 10.0 * cost_before.max(1e-12) {
                break;
            }
            step_scale *= 0.5;
        }

        let x_before = x.clone();
        let applied = &delta * step_scale;
        x += &applied;
        iterations.push(IterationRecord {
            x: x_before,
            residuals: r,
            jacobian: j,
            chol,
            delta,
            step_scale,
        });
        if tol > 0.0 && applied.norm() < tol {
            converged = true;
            break;
        }
    }

    // Laplace covariance at the converged state: invert J^T Omega J plus a
    // tiny jitter; the step regularizer stays out of the reported matrix.
    let (_r_hat, j_hat, omega_ext) = extended_system(model, information, &x)?;
    let m_cov = normal_matrix(&j_hat, &omega_ext, COVARIANCE_JITTER);
    let chol_cov = m_cov.clone().cholesky().ok_or(Error::SingularNormalMatrix {
        condition: condition_estimate(&m_cov),
        context: "posterior information matrix",
    })?;
    let mut covariance = chol_cov.inverse();
    // Exact symmetry for downstream block extraction.
    for a in 0..covariance.nrows() {
        for b in 0..a {
            let s = 0.5 * (covariance[(a, b)] + covariance[(b, a)]);
            covariance[(a, b)] = s;
            covariance[(b, a)] = s;
        }
    }

    let gn_iterations = iterations.len();
    let tape = SolverTape {
        iterations,
        x_hat: x.clone(),
        jac_hat: j_hat,
        covariance: covariance.clone(),
        omega_ext,
        learned_count: model.factor_count(),
    };
    Ok((x, covariance, converged, gn_iterations, tape))
}

fn en_marginals(x: &DVector<f64>, cov: &DMatrix<f64>) -> Vec<EnMarginal> {
    (0..WINDOW_LEN)
        .map(|e| {
            let b = e * STATE_DIM;
            EnMarginal {
                mean: Vector2::new(x[b], x[b + 1]),
                covariance: Matrix2::new(
                    cov[(b, b)],
                    cov[(b, b + 1)],
                    cov[(b + 1, b)],
                    cov[(b + 1, b + 1)],
                ),
            }
        })
        .collect()
}

/// Solve a window and keep the tape for a later [`backward`] call.
pub fn gauss_newton_solve_traced(
    problem: &WindowProblem,
    init: &DVector<f64>,
    max_iter: usize,
    tol: f64,
) -> Result<(SolverOutput, SolverTape)> {
    problem.validate_information()?;
    let (x, cov, converged, iterations, tape) =
        solve_model(problem, &problem.information, init, max_iter, tol)?;
    let per_epoch_en = en_marginals(&x, &cov);
    Ok((
        SolverOutput {
            state_hat: x,
            covariance_hat: cov,
            per_epoch_en,
            converged,
            gn_iterations: iterations,
        },
        tape,
    ))
}

/// Solve a window, discarding the tape.
pub fn gauss_newton_solve(
    problem: &WindowProblem,
    init: &DVector<f64>,
    max_iter: usize,
    tol: f64,
) -> Result<SolverOutput> {
    gauss_newton_solve_traced(problem, init, max_iter, tol).map(|(out, _)| out)
}

/// Reverse pass over a recorded solve for any model: given gradients of the
/// loss wrt the converged state and the full covariance (Frobenius
/// convention), return gradients wrt each learned information weight.
pub fn backward_model<M: FactorModel>(
    model: &M,
    tape: &SolverTape,
    state_bar: &DVector<f64>,
    cov_bar: &DMatrix<f64>,
) -> Result<SolverGradients> {
    let n = model.state_dim();
    let m = tape.learned_count;
    let m_ext = tape.omega_ext.len();
    let mut omega_bar = DVector::<f64>::zeros(m_ext);

    // --- covariance path: Sigma = M^-1, M = J^T Omega J + jitter at x_hat.
    let sigma = &tape.covariance;
    let m_bar = -(sigma * cov_bar * sigma);
    let m_bar_sym = &m_bar + m_bar.transpose();

    // Omega sensitivity of M (per extended row).
    let w_tmp = &tape.jac_hat * &m_bar; // m_ext x n
    for i in 0..m_ext {
        omega_bar[i] += w_tmp.row(i).dot(&tape.jac_hat.row(i));
    }

    // Jacobian sensitivity of M, then its state sensitivity via curvature.
    let mut jbar_hat = DMatrix::zeros(m_ext, n);
    for i in 0..m_ext {
        if tape.omega_ext[i] == 0.0 {
            continue;
        }
        let row = tape.jac_hat.row(i) * &m_bar_sym;
        jbar_hat.row_mut(i).copy_from(&(row * tape.omega_ext[i]));
    }
    let mut x_bar = state_bar.clone();
    let jbar_learned = jbar_hat.rows(0, m).into_owned();
    model.curvature_vjp(&tape.x_hat, &jbar_learned, &mut x_bar)?;

    // --- unrolled iterations, newest first.
    for rec in tape.iterations.iter().rev() {
        let delta_bar = &x_bar * rec.step_scale;
        let b_bar = -rec.chol.solve(&delta_bar);

        let jb = &rec.jacobian * &b_bar; // J b_bar, per extended row
        let jd = &rec.jacobian * &rec.delta; // J delta

        // Information gradients from A = J^T Omega J and b = J^T Omega r.
        for i in 0..m_ext {
            omega_bar[i] += jb[i] * (jd[i] + rec.residuals[i]);
        }

        // Row-wise Jacobian cotangent:
        //   Jbar_i = Omega_i [ (J_i b_bar) delta + (J_i delta + r_i) b_bar ].
        let mut jbar = DMatrix::zeros(m_ext, n);
        for i in 0..m_ext {
            let w = tape.omega_ext[i];
            if w == 0.0 {
                continue;
            }
            let coeff_delta = w * jb[i];
            let coeff_b = w * (jd[i] + rec.residuals[i]);
            for k in 0..n {
                jbar[(i, k)] = coeff_delta * rec.delta[k] + coeff_b * b_bar[k];
            }
        }

        // Residual cotangent r_bar = Omega J b_bar, pulled back through
        // dr/dx = J. Prior rows are excluded: their residual re-anchors at
        // the linearization point, so it is identically zero in x.
        let mut r_bar = DVector::zeros(m_ext);
        for i in 0..m {
            r_bar[i] = tape.omega_ext[i] * jb[i];
        }
        x_bar += rec.jacobian.transpose() * &r_bar;

        // Curvature of the learned rows.
        let jbar_learned = jbar.rows(0, m).into_owned();
        model.curvature_vjp(&rec.x, &jbar_learned, &mut x_bar)?;
    }

    let mut d_information = Vec::with_capacity(m);
    for i in 0..m {
        let g = omega_bar[i];
        if !g.is_finite() {
            return Err(Error::NonFinite { context: "information gradient" });
        }
        d_information.push(g);
    }
    Ok(SolverGradients { d_information })
}

/// Window-level reverse pass: per-epoch East-North mean and covariance
/// cotangents in, per-factor information gradients out.
pub fn backward(
    problem: &WindowProblem,
    tape: &SolverTape,
    d_loss_d_en_mean: &[Vector2<f64>],
    d_loss_d_en_cov: &[Matrix2<f64>],
) -> Result<SolverGradients> {
    assert_eq!(d_loss_d_en_mean.len(), WINDOW_LEN);
    assert_eq!(d_loss_d_en_cov.len(), WINDOW_LEN);
    let mut state_bar = DVector::zeros(WINDOW_STATE_DIM);
    let mut cov_bar = DMatrix::zeros(WINDOW_STATE_DIM, WINDOW_STATE_DIM);
    for e in 0..WINDOW_LEN {
        let b = e * STATE_DIM;
        state_bar[b] = d_loss_d_en_mean[e].x;
        state_bar[b + 1] = d_loss_d_en_mean[e].y;
        cov_bar[(b, b)] = d_loss_d_en_cov[e][(0, 0)];
        cov_bar[(b, b + 1)] = d_loss_d_en_cov[e][(0, 1)];
        cov_bar[(b + 1, b)] = d_loss_d_en_cov[e][(1, 0)];
        cov_bar[(b + 1, b + 1)] = d_loss_d_en_cov[e][(1, 1)];
    }
    backward_model(problem, tape, &state_bar, &cov_bar)
}

/// Weighted horizontal dilution of precision of one epoch inside a window.
///
/// Formula (the source literature leaves it implicit): restrict the
/// Jacobian to the epoch's factors and its own 7 states, drop clock columns
/// of constellations with no active (positive-weight) factor, rescale the
/// weights to unit mean over the active factors so that the measurement
/// variance level cancels, and form `M = G^T diag(w) G`. The East-North
/// block of `M^-1` is computed via the Schur complement
/// `S = M_EN - B C^+ B^T` (pseudo-inverse over the Up/clock block) and
/// `HDOP = sqrt(trace(S^-1))`.
pub fn weighted_hdop(
    problem: &WindowProblem,
    information: &[f64],
    epoch: usize,
    state: &DVector<f64>,
) -> Result<f64> {
    assert!(epoch < WINDOW_LEN);
    if information.len() != problem.factor_count() {
        return Err(Error::InformationLength {
            expected: problem.factor_count(),
            got: information.len(),
        });
    }
    let factors: Vec<usize> = problem
        .epoch_factors(epoch)
        .filter(|&i| information[i] > 0.0)
        .collect();
    if factors.is_empty() {
        return Err(Error::ZeroWeights);
    }
    let mean_w = factors.iter().map(|&i| information[i]).sum::<f64>() / factors.len() as f64;

    let epoch_state = WindowProblem::epoch_state(state, epoch);
    let ep = &problem.epochs[epoch];
    let mut present = [false; 4];
    for &i in &factors {
        present[ep.observations[problem.factor_index[i].obs].constellation.bias_index()] = true;
    }
    let clock_cols: Vec<usize> = (0..4).filter(|&c| present[c]).collect();
    let ncols = 3 + clock_cols.len();

    let mut g = DMatrix::zeros(factors.len(), ncols);
    for (row, &i) in factors.iter().enumerate() {
        let ob = &ep.observations[problem.factor_index[i].obs];
        let j = obs::residual_jacobian(&epoch_state, ob, &problem.origin)?;
        for k in 0..3 {
            g[(row, k)] = j[k];
        }
        for (col, &c) in clock_cols.iter().enumerate() {
            g[(row, 3 + col)] = j[3 + c];
        }
    }
    let mut m = DMatrix::<f64>::zeros(ncols, ncols);
    for (row, &i) in factors.iter().enumerate() {
        let w = information[i] / mean_w;
        for a in 0..ncols {
            for b in 0..ncols {
                m[(a, b)] += w * g[(row, a)] * g[(row, b)];
            }
        }
    }

    // EN block of M^-1 via Schur complement with a pseudo-inverse over the
    // (Up, clocks) block, which may be rank-deficient for symmetric
    // geometries (all satellites at one elevation).
    let m_en = m.view((0, 0), (2, 2)).into_owned();
    let b = m.view((0, 2), (2, ncols - 2)).into_owned();
    let c = m.view((2, 2), (ncols - 2, ncols - 2)).into_owned();
    let c_pinv = c
        .svd(true, true)
        .pseudo_inverse(1e-10)
        .map_err(|_| Error::SingularNormalMatrix { condition: f64::INFINITY, context: "HDOP" })?;
    let s: DMatrix<f64> = m_en - &b * c_pinv * b.transpose();
    let det = s[(0, 0)] * s[(1, 1)] - s[(0, 1)] * s[(1, 0)];
    let tr = s[(0, 0)] + s[(1, 1)];
    let min_eig = 0.5 * (tr - (tr * tr - 4.0 * det).max(0.0).sqrt());
    if min_eig <= 1e-9 {
        return Err(Error::SingularNormalMatrix {
            condition: condition_estimate(&s),
            context: "HDOP East-North geometry",
        });
    }
    let q_ee = s[(1, 1)] / det;
    let q_nn = s[(0, 0)] / det;
    Ok((q_ee + q_nn).sqrt())
}
