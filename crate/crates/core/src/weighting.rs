//! Classical per-satellite weighting schemes and the single-epoch weighted
//! least squares used both as a baseline and to supply the residual feature
//! for the weighting network.
//!
//! The three schemes:
//!
//! * `Elevation`: sigma^2 = a^2 / sin^2(el)
//! * `SigmaEps`:  sigma^2 = a + b * 10^(-cn0/10)
//! * `GoGps`:     sigma^2 = base * q(cn0) / sin^2(el), where q is the goGPS
//!   piecewise SNR variance factor with q(cn0 >= s1) = 1 and
//!   q(s) = 10^(-(s-s1)/a) * ((A * 10^((s0-s1)/a) - 1) * (s-s1)/(s0-s1) + 1)
//!   for s < s1 (defaults s1 = 50, s0 = 10, a = 30, A = 30).
//!
//! All coefficients are configuration-overridable; the defaults live in the
//! scheme constructors.

use nalgebra::{SMatrix, SVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{self, Geodetic};
use crate::obs::{EpochObservations, EpochState, STATE_DIM};

/// Weak prior information (1/m^2) pinning clock biases of constellations
/// absent at an epoch; without it the per-epoch normal matrix is singular.
pub const CLOCK_PRIOR_INFORMATION: f64 = 1e-6;

/// Baseline weighting scheme with its coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WeightScheme {
    /// sigma^2 = a^2 / sin^2(el); `a` in meters.
    Elevation { a: f64 },
    /// sigma^2 = a + b * 10^(-cn0/10); `a`, `b` in m^2.
    SigmaEps { a: f64, b: f64 },
    /// goGPS SNR factor divided by sin^2(el), scaled by `base_variance` m^2.
    GoGps {
        s1: f64,
        s0: f64,
        a: f64,
        big_a: f64,
        base_variance: f64,
    },
}

impl WeightScheme {
    pub fn elevation_default() -> Self {
        WeightScheme::Elevation { a: 1.5 }
    }

    pub fn sigma_eps_default() -> Self {
        WeightScheme::SigmaEps { a: 0.5, b: 1.0e4 }
    }

    pub fn gogps_default() -> Self {
        WeightScheme::GoGps {
            s1: 50.0,
            s0: 10.0,
            a: 30.0,
            big_a: 30.0,
            base_variance: 1.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            WeightScheme::Elevation { .. } => "elevation",
            WeightScheme::SigmaEps { .. } => "sigma-eps",
            WeightScheme::GoGps { .. } => "gogps",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            WeightScheme::Elevation { a } => a > 0.0,
            WeightScheme::SigmaEps { a, b } => a > 0.0 && b > 0.0,
            WeightScheme::GoGps { s1, s0, a, big_a, base_variance } => {
                s1 > s0 && s0 > 0.0 && a > 0.0 && big_a > 0.0 && base_variance > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig {
                path: format!("schemes.{}", self.name()),
                message: "all scheme parameters must be strictly positive".into(),
            })
        }
    }
}

/// Measurement variance (m^2) assigned by `scheme` to a satellite at the
/// given elevation (rad) and cn0 (dB-Hz).
pub fn scheme_variance(scheme: &WeightScheme, elevation: f64, cn0: f64) -> Result<f64> {
    if elevation <= 0.0 || elevation > std::f64::consts::FRAC_PI_2 {
        return Err(Error::BelowHorizon { elevation_rad: elevation });
    }
    let sin2 = elevation.sin().powi(2);
    let var = match *scheme {
        WeightScheme::Elevation { a } => a * a / sin2,
        WeightScheme::SigmaEps { a, b } => a + b * 10f64.powf(-cn0 / 10.0),
        WeightScheme::GoGps { s1, s0, a, big_a, base_variance } => {
            let q = if cn0 >= s1 {
                1.0
            } else {
                let lead = 10f64.powf(-(cn0 - s1) / a);
                let slope = (big_a / 10f64.powf(-(s0 - s1) / a) - 1.0) / (s0 - s1);
                lead * (slope * (cn0 - s1) + 1.0)
            };
            base_variance * q / sin2
        }
    };
    debug_assert!(var > 0.0);
    Ok(var)
}

/// Result of the preliminary single-epoch weighted least squares.
#[derive(Debug, Clone)]
pub struct WlsSolution {
    pub state: EpochState,
    /// Residuals at the converged state, in canonical observation order.
    pub residuals: Vec<f64>,
    /// Scheme variances used as the diagonal weight matrix, same order.
    pub weight_variances: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
}

const WLS_TOL: f64 = 1e-4;
const WLS_MAX_ITER: usize = 10;

/// Iterated Gauss-Newton on a single epoch with scheme-derived diagonal
/// weights. Clock biases of absent constellations are pinned to the initial
/// value by a weak prior.
pub fn solve_wls(
    epoch: &EpochObservations,
    scheme: &WeightScheme,
    init: &EpochState,
    origin: &Geodetic,
) -> Result<WlsSolution> {
    epoch.validate()?;
    scheme.validate()?;

    // Per-observation information from the scheme (elevation computed at the
    // initial position; a few km of receiver error does not move elevations).
    let mut information = Vec::with_capacity(epoch.observations.len());
    let mut variances = Vec::with_capacity(epoch.observations.len());
    for obs in &epoch.observations {
        let rx_ecef = geo::enu_to_ecef(&init.position, origin)?;
        let sky = geo::sky_direction(&obs.sat_pos, &rx_ecef, origin)?;
        let var = scheme_variance(scheme, sky.elevation.max(1e-3), obs.cn0)?;
        variances.push(var);
        information.push(1.0 / var);
    }

    let mut x = init.as_vector();
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..WLS_MAX_ITER {
        iterations += 1;
        let state = EpochState::from_vector(&x);
        let mut h = SMatrix::<f64, STATE_DIM, STATE_DIM>::zeros();
        let mut g = SVector::<f64, STATE_DIM>::zeros();
        for (obs, &w) in epoch.observations.iter().zip(&information) {
            let r = crate::obs::residual(&state, obs, origin)?;
            let j = crate::obs::residual_jacobian(&state, obs, origin)?;
            h += w * j * j.transpose();
            g += w * r * j;
        }
        // Damping priors on every clock bias (zero residual: they bound
        // steps along weakly observed bias directions without biasing the
        // fit; an absent or singleton constellation leaves the pure normal
        // matrix singular or nearly so).
        for c in 0..4 {
            h[(3 + c, 3 + c)] += CLOCK_PRIOR_INFORMATION;
        }
        let chol = h.cholesky().ok_or(Error::SingularNormalMatrix {
            condition: condition_estimate(&h),
            context: "single-epoch WLS",
        })?;
        let delta = -chol.solve(&g);
        x += delta;
        if delta.norm() < WLS_TOL {
            converged = true;
            break;
        }
    }

    let state = EpochState::from_vector(&x);
    let mut residuals = Vec::with_capacity(epoch.observations.len());
    for obs in &epoch.observations {
        residuals.push(crate::obs::residual(&state, obs, origin)?);
    }
    Ok(WlsSolution {
        state,
        residuals,
        weight_variances: variances,
        converged,
        iterations,
    })
}

fn condition_estimate(h: &SMatrix<f64, STATE_DIM, STATE_DIM>) -> f64 {
    let eig = h.symmetric_eigenvalues();
    let max = eig.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.iter().cloned().fold(f64::MAX, f64::min);
    if min.abs() < f64::MIN_POSITIVE {
        f64::INFINITY
    } else {
        (max / min).abs()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{enu_to_ecef, EnuPoint};
    use crate::obs::{predict_pseudorange, Constellation, SatelliteObservation, StateVector};
    use nalgebra::{DMatrix, DVector};
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn origin() -> Geodetic {
        Geodetic::from_degrees(22.302, 114.177, 10.0)
    }

    fn spread_epoch(truth: &EpochState, n: usize) -> EpochObservations {
        spread_epoch_ids(
            truth,
            n,
            &["G01", "G02", "E01", "E02", "R01", "R02", "C01", "C02", "G03", "E03"],
        )
    }

    fn spread_epoch_ids(truth: &EpochState, n: usize, ids: &[&str]) -> EpochObservations {
        let o = origin();
        let mut observations = Vec::new();
        for (k, id) in ids.iter().take(n).enumerate() {
            let az = 2.0 * std::f64::consts::PI * (k as f64) / (n as f64);
            let el = 0.3 + 0.5 * ((k % 3) as f64) / 3.0 + 0.2;
            // Shell kept at 2.2e6 m: the oracle-equality tolerances below sit
            // under the f64 rounding floor of residuals at true GNSS ranges.
            let r = 2.2e6;
            let sat_enu = EnuPoint::new(
                r * el.cos() * az.sin(),
                r * el.cos() * az.cos(),
                r * el.sin(),
            );
            let mut obs = SatelliteObservation {
                sat_id: id.to_string(),
                constellation: Constellation::from_sat_id(id).unwrap(),
                sat_pos: enu_to_ecef(&sat_enu, &o).unwrap(),
                pseudorange_obs: 1.0,
                cn0: 45.0,
                correction_sum: 0.0,
                truth_contamination: None,
            };
            obs.pseudorange_obs = predict_pseudorange(truth, &obs, &o).unwrap();
            observations.push(obs);
        }
        let mut epoch = EpochObservations {
            epoch_index: 0,
            time: 0.0,
            observations,
            truth_position: Some(truth.position),
            truth_clock_biases: Some(truth.clock_biases),
        };
        epoch.canonicalize();
        epoch
    }

    #[test]
    fn elevation_scheme_at_zenith() {
        let s = WeightScheme::elevation_default();
        let v = scheme_variance(&s, std::f64::consts::FRAC_PI_2, 45.0).unwrap();
        assert!((v - 1.5 * 1.5).abs() < 1e-12);
    }

    #[test]
    fn sigma_eps_limit_at_high_cn0() {
        let s = WeightScheme::sigma_eps_default();
        let v = scheme_variance(&s, 0.7, 200.0).unwrap();
        assert!((v - 0.5).abs() < 1e-9);
    }

    #[test]
    fn gogps_matches_hand_evaluation() {
        // Hand evaluation of the adopted closed form at el = 30 deg,
        // cn0 = 35 dB-Hz with the published defaults.
        let s = WeightScheme::gogps_default();
        let el = 30f64.to_radians();
        let got = scheme_variance(&s, el, 35.0).unwrap();

        let lead = 10f64.powf(-(35.0 - 50.0) / 30.0); // 10^0.5
        let slope = (30.0 / 10f64.powf(-(10.0 - 50.0) / 30.0) - 1.0) / (10.0 - 50.0);
        let q = lead * (slope * (35.0 - 50.0) + 1.0);
        let expect = q / el.sin().powi(2);
        assert!((got - expect).abs() < 1e-12, "got {got}, expect {expect}");
        // Sanity: the factor itself is ~3.63, the variance ~14.5 m^2.
        assert!((q - 3.6276).abs() < 1e-3);
        assert!((got - 14.5106).abs() < 2e-3);
    }

    #[test]
    fn gogps_saturates_above_s1() {
        let s = WeightScheme::gogps_default();
        let el = 1.0;
        let a = scheme_variance(&s, el, 50.0).unwrap();
        let b = scheme_variance(&s, el, 60.0).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn monotonicity_on_grids() {
        let schemes = [
            WeightScheme::elevation_default(),
            WeightScheme::sigma_eps_default(),
            WeightScheme::gogps_default(),
        ];
        for s in &schemes {
            // Non-increasing in elevation at fixed cn0.
            let mut prev = f64::INFINITY;
            for k in 1..=60 {
                let el = std::f64::consts::FRAC_PI_2 * (k as f64) / 60.0;
                let v = scheme_variance(s, el, 38.0).unwrap();
                assert!(v <= prev + 1e-12, "{} not monotone in elevation", s.name());
                prev = v;
            }
        }
        for s in &schemes[1..] {
            // Non-increasing in cn0 at fixed elevation.
            let mut prev = f64::INFINITY;
            for k in 0..=70 {
                let v = scheme_variance(s, 0.6, k as f64).unwrap();
                assert!(v <= prev + 1e-12, "{} not monotone in cn0", s.name());
                prev = v;
            }
        }
    }

    #[test]
    fn below_horizon_rejected() {
        let s = WeightScheme::elevation_default();
        assert!(matches!(
            scheme_variance(&s, 0.0, 45.0),
            Err(Error::BelowHorizon { .. })
        ));
        assert!(matches!(
            scheme_variance(&s, -0.1, 45.0),
            Err(Error::BelowHorizon { .. })
        ));
    }

    #[test]
    fn wls_recovers_noiseless_epoch() {
        let truth = EpochState {
            position: EnuPoint::new(800.0, -300.0, 20.0),
            clock_biases: [120.0, -45.0, 60.0, 15.0],
        };
        let epoch = spread_epoch(&truth, 8);
        let sol = solve_wls(&epoch, &WeightScheme::gogps_default(), &EpochState::origin(), &origin())
            .unwrap();
        assert!(sol.converged);
        let err = (sol.state.position.as_vector() - truth.position.as_vector()).norm();
        assert!(err < 1e-3, "position error {err}");
    }

    #[test]
    fn wls_matches_dense_normal_equation_oracle() {
        // 6-satellite epoch with one contaminated observation; compare the
        // converged state against an independently coded dense oracle that
        // iterates the same normal equations with DMatrix algebra.
        let o = origin();
        let truth = EpochState {
            position: EnuPoint::new(-400.0, 950.0, -10.0),
            clock_biases: [80.0, 30.0, -20.0, 55.0],
        };
        let mut epoch = spread_epoch_ids(
            &truth,
            6,
            &["G01", "G02", "G03", "E01", "E02", "E03"],
        );
        epoch.observations[2].pseudorange_obs += 35.0; // contamination
        let scheme = WeightScheme::gogps_default();
        let init = EpochState::origin();
        let sol = solve_wls(&epoch, &scheme, &init, &o).unwrap();

        // Dense oracle.
        let m = epoch.observations.len();
        let mut w = DVector::zeros(m);
        for (i, obs) in epoch.observations.iter().enumerate() {
            let rx = enu_to_ecef(&init.position, &o).unwrap();
            let sky = geo::sky_direction(&obs.sat_pos, &rx, &o).unwrap();
            w[i] = 1.0 / scheme_variance(&scheme, sky.elevation.max(1e-3), obs.cn0).unwrap();
        }
        let mut x = init.as_vector();
        for _ in 0..WLS_MAX_ITER {
            let state = EpochState::from_vector(&x);
            let mut jm = DMatrix::zeros(m, STATE_DIM);
            let mut r = DVector::zeros(m);
            for (i, obs) in epoch.observations.iter().enumerate() {
                r[i] = crate::obs::residual(&state, obs, &o).unwrap();
                let row = crate::obs::residual_jacobian(&state, obs, &o).unwrap();
                for k in 0..STATE_DIM {
                    jm[(i, k)] = row[k];
                }
            }
            let wmat = DMatrix::from_diagonal(&w);
            let mut h = jm.transpose() * &wmat * &jm;
            let g = jm.transpose() * &wmat * &r;
            for c in 0..4 {
                h[(3 + c, 3 + c)] += CLOCK_PRIOR_INFORMATION;
            }
            let delta = h.clone().lu().solve(&(-g)).unwrap();
            for k in 0..STATE_DIM {
                x[k] += delta[k];
            }
            if delta.norm() < WLS_TOL {
                break;
            }
        }
        let diff = (sol.state.as_vector() - x).norm();
        assert!(diff < 1e-8, "solver vs oracle differ by {diff}");
    }

    #[test]
    fn linear_problem_solves_in_one_iteration() {
        // With satellites effectively at infinity the problem is linear; the
        // first iterate must equal the closed form (J^T W J)^-1 J^T W r and
        // the solver should stop right after.
        let truth = EpochState {
            position: EnuPoint::new(0.002, -0.001, 0.0005),
            clock_biases: [0.001, 0.0, 0.0, 0.0],
        };
        let epoch = spread_epoch(&truth, 8);
        let sol = solve_wls(&epoch, &WeightScheme::gogps_default(), &EpochState::origin(), &origin())
            .unwrap();
        assert!(sol.iterations <= 2);
        let err = (sol.state.position.as_vector() - truth.position.as_vector()).norm();
        assert!(err < 1e-6);
    }

    #[test]
    fn weight_scale_invariance() {
        // Scaling all variances by a common positive constant must leave the
        // estimate unchanged.
        let truth = EpochState {
            position: EnuPoint::new(250.0, 420.0, 5.0),
            clock_biases: [10.0, 20.0, 30.0, 40.0],
        };
        let mut epoch = spread_epoch(&truth, 8);
        epoch.observations[1].pseudorange_obs += 12.0;
        epoch.observations[5].pseudorange_obs -= 7.0;
        let a = solve_wls(
            &epoch,
            &WeightScheme::Elevation { a: 1.5 },
            &EpochState::origin(),
            &origin(),
        )
        .unwrap();
        let b = solve_wls(
            &epoch,
            &WeightScheme::Elevation { a: 1.5 * 10.0 },
            &EpochState::origin(),
            &origin(),
        )
        .unwrap();
        // Equality holds at the fixed point exactly; iterates agree to the
        // convergence tolerance's residual uncertainty.
        let diff = (a.state.as_vector() - b.state.as_vector()).norm();
        assert!(diff < 1e-5, "estimates differ by {diff}");
    }

    #[test]
    fn converged_residuals_orthogonal_to_weighted_columns() {
        let o = origin();
        let truth = EpochState {
            position: EnuPoint::new(100.0, -80.0, 12.0),
            clock_biases: [5.0, -3.0, 8.0, 2.0],
        };
        let mut epoch = spread_epoch(&truth, 9);
        let mut rng = StdRng::seed_from_u64(23);
        for obs in &mut epoch.observations {
            obs.pseudorange_obs += rng.random_range(-3.0..3.0);
        }
        let scheme = WeightScheme::gogps_default();
        let sol = solve_wls(&epoch, &scheme, &EpochState::origin(), &o).unwrap();
        assert!(sol.converged);
        let mut jtwr = StateVector::zeros();
        for (obs, (&r, &var)) in epoch
            .observations
            .iter()
            .zip(sol.residuals.iter().zip(&sol.weight_variances))
        {
            let j = crate::obs::residual_jacobian(&sol.state, obs, &o).unwrap();
            jtwr += (r / var) * j;
        }
        // Position block must vanish; clock entries of observed
        // constellations too (unobserved ones are held by the prior).
        let present = epoch.present_constellations();
        for k in 0..3 {
            assert!(jtwr[k].abs() < 1e-6, "J^T W r [{k}] = {}", jtwr[k]);
        }
        for c in 0..4 {
            if present[c] {
                assert!(jtwr[3 + c].abs() < 1e-6);
            }
        }
    }
}
