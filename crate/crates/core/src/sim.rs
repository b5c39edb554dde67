//! Synthetic urban-canyon GNSS scenario generator.
//!
//! Satellites ride circular shells (GPS/QZSS 20,200 km, Galileo 23,222 km,
//! GLONASS 19,100 km, BeiDou 21,528 km) with per-system inclinations and
//! drift slowly across epochs. A waypoint trajectory, azimuth-sector canyon
//! blockage, elevation-dependent noise, and lognormal NLOS contamination
//! with a cn0 penalty produce epochs that look like a deep street canyon.
//! Every observation carries its injected contamination as a label, so
//! weighting behavior can be audited against ground truth.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{self, EnuPoint, Geodetic};
use crate::obs::{Constellation, EpochObservations, SatelliteObservation, MIN_OBSERVATIONS};

/// Azimuth sector of sky blockage: satellites inside `[az_start, az_end)`
/// below `max_blocked_elevation` are invisible. Radians; sectors may wrap
/// through 2*pi when `az_start > az_end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CanyonSector {
    pub az_start: f64,
    pub az_end: f64,
    pub max_blocked_elevation: f64,
}

impl CanyonSector {
    pub fn contains_azimuth(&self, az: f64) -> bool {
        if self.az_start <= self.az_end {
            az >= self.az_start && az < self.az_end
        } else {
            az >= self.az_start || az < self.az_end
        }
    }
}

/// NLOS contamination sector: inside it, each visible satellite is
/// independently contaminated with `probability` per epoch; the injected
/// bias is lognormal (always positive, pseudorange lengthening).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NlosSector {
    pub az_start: f64,
    pub az_end: f64,
    pub probability: f64,
    /// Median of the lognormal bias in meters (mu = ln(median)).
    pub bias_median_m: f64,
    /// Lognormal shape parameter.
    pub bias_sigma: f64,
}

impl NlosSector {
    pub fn contains_azimuth(&self, az: f64) -> bool {
        if self.az_start <= self.az_end {
            az >= self.az_start && az < self.az_end
        } else {
            az >= self.az_start || az < self.az_end
        }
    }
}

/// Per-system satellite counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstellationSizes {
    pub gps_qzss: usize,
    pub galileo: usize,
    pub glonass: usize,
    pub beidou: usize,
}

impl Default for ConstellationSizes {
    fn default() -> Self {
        Self { gps_qzss: 20, galileo: 14, glonass: 14, beidou: 16 }
    }
}

/// Full scenario configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub n_epochs: usize,
    pub epoch_interval_s: f64,
    /// ENU origin shared by every epoch of the run.
    pub origin: Geodetic,
    /// Waypoints of the ground-truth trajectory in ENU meters.
    pub waypoints: Vec<EnuPoint>,
    pub speed_mps: f64,
    pub constellation_sizes: ConstellationSizes,
    pub elevation_mask_deg: f64,
    pub canyon: Vec<CanyonSector>,
    /// Base pseudorange noise at zenith; sigma(el) = sigma0 / sin(el).
    pub noise_sigma0_m: f64,
    pub nlos: Vec<NlosSector>,
    /// cn0 penalty range (dB) applied to contaminated satellites.
    pub nlos_cn0_penalty_db: (f64, f64),
    /// Receiver clock random walk, meters per sqrt(second), per system.
    pub clock_walk_m_per_sqrt_s: f64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |path: &str, message: &str| {
            Err(Error::InvalidConfig { path: format!("scenario.{path}"), message: message.into() })
        };
        if self.n_epochs == 0 {
            return fail("n_epochs", "must be positive");
        }
        if self.epoch_interval_s <= 0.0 {
            return fail("epoch_interval_s", "must be positive");
        }
        if self.waypoints.len() < 2 {
            return fail("waypoints", "need at least two waypoints");
        }
        if self.speed_mps <= 0.0 {
            return fail("speed_mps", "must be positive");
        }
        if self.noise_sigma0_m <= 0.0 {
            return fail("noise_sigma0_m", "must be positive");
        }
        if self.clock_walk_m_per_sqrt_s <= 0.0 {
            return fail("clock_walk_m_per_sqrt_s", "must be positive");
        }
        let two_pi = 2.0 * std::f64::consts::PI;
        for s in &self.canyon {
            if !(0.0..two_pi).contains(&s.az_start) || !(0.0..two_pi).contains(&s.az_end) {
                return fail("canyon", "sector azimuths must lie in [0, 2pi)");
            }
        }
        for s in &self.nlos {
            if !(0.0..=1.0).contains(&s.probability) {
                return fail("nlos.probability", "must lie in [0, 1]");
            }
            if s.bias_median_m <= 0.0 || s.bias_sigma <= 0.0 {
                return fail("nlos.bias", "lognormal parameters must be positive");
            }
            if !(0.0..two_pi).contains(&s.az_start) || !(0.0..two_pi).contains(&s.az_end) {
                return fail("nlos", "sector azimuths must lie in [0, 2pi)");
            }
        }
        Ok(())
    }
}

/// A generated run: epochs with truth labels plus the scenario metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedRun {
    pub config: ScenarioConfig,
    pub epochs: Vec<EpochObservations>,
}

const DEG: f64 = std::f64::consts::PI / 180.0;
/// Mean Earth radius used for the circular shells.
const SHELL_BASE_M: f64 = 6_371_000.0;

struct Shell {
    constellation: Constellation,
    radius_m: f64,
    inclination: f64,
    count: usize,
    planes: usize,
}

fn shells(sizes: &ConstellationSizes) -> Vec<Shell> {
    vec![
        Shell {
            constellation: Constellation::GpsQzss,
            radius_m: SHELL_BASE_M + 20_200_000.0,
            inclination: 55.0 * DEG,
            count: sizes.gps_qzss,
            planes: 6,
        },
        Shell {
            constellation: Constellation::Galileo,
            radius_m: SHELL_BASE_M + 23_222_000.0,
            inclination: 56.0 * DEG,
            count: sizes.galileo,
            planes: 3,
        },
        Shell {
            constellation: Constellation::Glonass,
            radius_m: SHELL_BASE_M + 19_100_000.0,
            inclination: 64.8 * DEG,
            count: sizes.glonass,
            planes: 3,
        },
        Shell {
            constellation: Constellation::BeiDou,
            radius_m: SHELL_BASE_M + 21_528_000.0,
            inclination: 55.0 * DEG,
            count: sizes.beidou,
            planes: 3,
        },
    ]
}

/// Earth gravitational parameter, m^3/s^2.
const MU_EARTH: f64 = 3.986_004_418e14;

struct SimSatellite {
    sat_id: String,
    constellation: Constellation,
    radius_m: f64,
    inclination: f64,
    raan: f64,
    phase0: f64,
    angular_rate: f64,
    /// Smooth correction-term parameters (amplitude, period, phase).
    corr_amp: f64,
    corr_period: f64,
    corr_phase: f64,
}

impl SimSatellite {
    fn position_ecef(&self, t: f64) -> geo::EcefPoint {
        let u = self.phase0 + self.angular_rate * t;
        let (su, cu) = u.sin_cos();
        let (si, ci) = self.inclination.sin_cos();
        let (sr, cr) = self.raan.sin_cos();
        // Orbit-plane coordinates rotated by inclination then node.
        let x_orb = cu;
        let y_orb = su * ci;
        let z_orb = su * si;
        geo::EcefPoint::new(
            self.radius_m * (cr * x_orb - sr * y_orb),
            self.radius_m * (sr * x_orb + cr * y_orb),
            self.radius_m * z_orb,
        )
    }

    fn correction(&self, t: f64) -> f64 {
        self.corr_amp * (2.0 * std::f64::consts::PI * t / self.corr_period + self.corr_phase).sin()
    }
}

fn build_satellites(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Vec<SimSatellite> {
    let mut sats = Vec::new();
    for shell in shells(&cfg.constellation_sizes) {
        let rate = (MU_EARTH / shell.radius_m.powi(3)).sqrt();
        for k in 0..shell.count {
            let plane = k % shell.planes;
            let raan = 2.0 * std::f64::consts::PI * plane as f64 / shell.planes as f64
                + rng.random_range(-0.05..0.05);
            let phase0 = 2.0 * std::f64::consts::PI * (k / shell.planes) as f64
                / (shell.count as f64 / shell.planes as f64).max(1.0)
                + rng.random_range(0.0..2.0 * std::f64::consts::PI);
            sats.push(SimSatellite {
                sat_id: format!("{}{:02}", shell.constellation.letter(), k + 1),
                constellation: shell.constellation,
                radius_m: shell.radius_m,
                inclination: shell.inclination,
                raan,
                phase0,
                angular_rate: rate,
                corr_amp: rng.random_range(1.0..6.0),
                corr_period: rng.random_range(1800.0..7200.0),
                corr_phase: rng.random_range(0.0..2.0 * std::f64::consts::PI),
            });
        }
    }
    sats
}

/// Ground-truth position at time `t` along the waypoint polyline; the
/// trajectory stops at the last waypoint.
fn trajectory_position(cfg: &ScenarioConfig, t: f64) -> EnuPoint {
    let mut remaining = cfg.speed_mps * t;
    for pair in cfg.waypoints.windows(2) {
        let a = pair[0].as_vector();
        let b = pair[1].as_vector();
        let leg = (b - a).norm();
        if remaining <= leg {
            let v = a + (b - a) * (remaining / leg).clamp(0.0, 1.0);
            return EnuPoint::from_vector(&v);
        }
        remaining -= leg;
    }
    *cfg.waypoints.last().unwrap()
}

/// Generate a full run. Deterministic for a given config (all stochastic
/// draws come from one seeded generator in a fixed order).
pub fn generate(cfg: &ScenarioConfig) -> Result<SimulatedRun> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let satellites = build_satellites(cfg, &mut rng);

    // Receiver clock biases: random start, random walk per system.
    let mut clock = [0.0f64; 4];
    for c in clock.iter_mut() {
        *c = 100.0 * Distribution::<f64>::sample(&StandardNormal, &mut rng);
    }
    let walk_sigma = cfg.clock_walk_m_per_sqrt_s * cfg.epoch_interval_s.sqrt();

    let mask = cfg.elevation_mask_deg * DEG;
    let mut epochs = Vec::with_capacity(cfg.n_epochs);
    for e in 0..cfg.n_epochs {
        let t = e as f64 * cfg.epoch_interval_s;
        let truth_pos = trajectory_position(cfg, t);
        let truth_ecef = geo::enu_to_ecef(&truth_pos, &cfg.origin)?;
        if e > 0 {
            for c in clock.iter_mut() {
                *c += walk_sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng);
            }
        }

        let mut observations = Vec::new();
        for sat in &satellites {
            let sat_pos = sat.position_ecef(t);
            let sky = geo::sky_direction(&sat_pos, &truth_ecef, &cfg.origin)?;
            if sky.elevation < mask {
                continue;
            }
            if cfg
                .canyon
                .iter()
                .any(|s| s.contains_azimuth(sky.azimuth) && sky.elevation < s.max_blocked_elevation)
            {
                continue;
            }

            let range = sat_pos.distance_to(&truth_ecef);
            let correction = sat.correction(t);
            let sigma = cfg.noise_sigma0_m / sky.elevation.sin();
            let noise = sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng);

            // NLOS contamination: sector-gated Bernoulli, lognormal bias.
            let mut contamination = 0.0;
            let mut cn0_penalty = 0.0;
            for sector in &cfg.nlos {
                if sector.contains_azimuth(sky.azimuth) {
                    if rng.random_range(0.0..1.0) < sector.probability {
                        let z: f64 = Distribution::<f64>::sample(&StandardNormal, &mut rng);
                        contamination =
                            (sector.bias_median_m.ln() + sector.bias_sigma * z).exp();
                        cn0_penalty = rng
                            .random_range(cfg.nlos_cn0_penalty_db.0..cfg.nlos_cn0_penalty_db.1);
                    }
                    break;
                }
            }

            let cn0_noise: f64 = Distribution::<f64>::sample(&StandardNormal, &mut rng);
            let cn0 = (45.0 + 10.0 * sky.elevation.sin().log10() + cn0_noise - cn0_penalty)
                .clamp(0.0, 70.0);

            let pseudorange = range
                + clock[sat.constellation.bias_index()]
                + correction
                + noise
                + contamination;

            observations.push(SatelliteObservation {
                sat_id: sat.sat_id.clone(),
                constellation: sat.constellation,
                sat_pos,
                pseudorange_obs: pseudorange,
                cn0,
                correction_sum: correction,
                truth_contamination: Some(contamination),
            });
        }

        if observations.len() < MIN_OBSERVATIONS {
            return Err(Error::VisibilityShortfall {
                epoch_index: e,
                count: observations.len(),
                minimum: MIN_OBSERVATIONS,
            });
        }
        let mut epoch = EpochObservations {
            epoch_index: e,
            time: t,
            observations,
            truth_position: Some(truth_pos),
            truth_clock_biases: Some(clock),
        };
        epoch.canonicalize();
        epochs.push(epoch);
    }
    Ok(SimulatedRun { config: cfg.clone(), epochs })
}

fn base_config(name: &str) -> ScenarioConfig {
    ScenarioConfig {
        name: name.to_string(),
        seed: 1,
        n_epochs: 500,
        epoch_interval_s: 1.0,
        origin: Geodetic::from_degrees(22.302, 114.177, 10.0),
        waypoints: vec![
            EnuPoint::new(0.0, 0.0, 2.0),
            EnuPoint::new(450.0, 120.0, 2.0),
            EnuPoint::new(800.0, -260.0, 2.0),
            EnuPoint::new(300.0, -700.0, 2.0),
            EnuPoint::new(-400.0, -400.0, 2.0),
            EnuPoint::new(-600.0, 300.0, 2.0),
            EnuPoint::new(0.0, 0.0, 2.0),
        ],
        speed_mps: 8.0,
        constellation_sizes: ConstellationSizes::default(),
        elevation_mask_deg: 10.0,
        canyon: Vec::new(),
        noise_sigma0_m: 1.0,
        nlos: Vec::new(),
        nlos_cn0_penalty_db: (6.0, 12.0),
        clock_walk_m_per_sqrt_s: 0.5,
    }
}

/// Built-in difficulty presets with increasing blockage, NLOS probability
/// (0.05 / 0.15 / 0.30) and bias scale (10 / 20 / 40 m median).
pub fn presets() -> (ScenarioConfig, ScenarioConfig, ScenarioConfig) {
    let mut medium = base_config("medium");
    medium.noise_sigma0_m = 2.0;
    medium.canyon = vec![
        CanyonSector { az_start: 0.35, az_end: 1.25, max_blocked_elevation: 25.0 * DEG },
        CanyonSector { az_start: 3.49, az_end: 4.39, max_blocked_elevation: 25.0 * DEG },
    ];
    medium.nlos = vec![
        NlosSector {
            az_start: 0.25,
            az_end: 1.45,
            probability: 0.05,
            bias_median_m: 10.0,
            bias_sigma: 0.5,
        },
        NlosSector {
            az_start: 3.39,
            az_end: 4.59,
            probability: 0.05,
            bias_median_m: 10.0,
            bias_sigma: 0.5,
        },
    ];

    let mut deep = base_config("deep");
    deep.noise_sigma0_m = 2.5;
    deep.canyon = vec![
        CanyonSector { az_start: 0.35, az_end: 1.40, max_blocked_elevation: 40.0 * DEG },
        CanyonSector { az_start: 2.10, az_end: 2.80, max_blocked_elevation: 30.0 * DEG },
        CanyonSector { az_start: 3.49, az_end: 4.54, max_blocked_elevation: 40.0 * DEG },
    ];
    deep.nlos = vec![
        NlosSector {
            az_start: 0.25,
            az_end: 1.60,
            probability: 0.15,
            bias_median_m: 20.0,
            bias_sigma: 0.5,
        },
        NlosSector {
            az_start: 3.39,
            az_end: 4.74,
            probability: 0.15,
            bias_median_m: 20.0,
            bias_sigma: 0.5,
        },
        NlosSector {
            az_start: 1.90,
            az_end: 3.00,
            probability: 0.10,
            bias_median_m: 15.0,
            bias_sigma: 0.5,
        },
    ];

    let mut harsh = base_config("harsh");
    harsh.noise_sigma0_m = 3.0;
    harsh.canyon = vec![
        CanyonSector { az_start: 0.35, az_end: 1.50, max_blocked_elevation: 45.0 * DEG },
        CanyonSector { az_start: 2.00, az_end: 2.90, max_blocked_elevation: 35.0 * DEG },
        CanyonSector { az_start: 3.49, az_end: 4.64, max_blocked_elevation: 45.0 * DEG },
        CanyonSector { az_start: 5.20, az_end: 5.90, max_blocked_elevation: 35.0 * DEG },
    ];
    // Reflections come off the canyon walls: the NLOS sectors sit on and
    // just beyond the blocked azimuth ranges, so suppressing contaminated
    // satellites hollows out exactly the directions that are already thin.
    harsh.nlos = vec![
        NlosSector {
            az_start: 0.25,
            az_end: 1.70,
            probability: 0.30,
            bias_median_m: 40.0,
            bias_sigma: 0.5,
        },
        NlosSector {
            az_start: 3.39,
            az_end: 4.84,
            probability: 0.30,
            bias_median_m: 40.0,
            bias_sigma: 0.5,
        },
        NlosSector {
            az_start: 1.90,
            az_end: 3.00,
            probability: 0.15,
            bias_median_m: 30.0,
            bias_sigma: 0.5,
        },
        NlosSector {
            az_start: 5.10,
            az_end: 6.00,
            probability: 0.15,
            bias_median_m: 30.0,
            bias_sigma: 0.5,
        },
    ];

    (medium, deep, harsh)
}

/// Look up a preset by name.
pub fn preset_by_name(name: &str) -> Result<ScenarioConfig> {
    let (medium, deep, harsh) = presets();
    match name {
        "medium" => Ok(medium),
        "deep" => Ok(deep),
        "harsh" => Ok(harsh),
        other => Err(Error::InvalidConfig {
            path: "preset".into(),
            message: format!("unknown preset '{other}' (expected medium|deep|harsh)"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::obs::EpochState;
    use crate::weighting::{solve_wls, WeightScheme};

    #[test]
    fn same_seed_is_bit_identical() {
        let (_, _, mut harsh) = presets();
        harsh.n_epochs = 50;
        let a = generate(&harsh).unwrap();
        let b = generate(&harsh).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn noiseless_run_recovered_by_wls() {
        let mut cfg = base_config("clean");
        cfg.n_epochs = 25;
        cfg.noise_sigma0_m = 1e-9;
        cfg.nlos.clear();
        let run = generate(&cfg).unwrap();
        for epoch in &run.epochs {
            let sol = solve_wls(
                epoch,
                &WeightScheme::gogps_default(),
                &EpochState::origin(),
                &cfg.origin,
            )
            .unwrap();
            let truth = epoch.truth_position.unwrap();
            let err = (sol.state.position.as_vector() - truth.as_vector()).norm();
            assert!(err < 1e-3, "epoch {} error {err}", epoch.epoch_index);
        }
    }

    #[test]
    fn contamination_is_nonnegative_and_labeled() {
        let (_, _, mut harsh) = presets();
        harsh.n_epochs = 100;
        let run = generate(&harsh).unwrap();
        let mut contaminated = 0usize;
        for epoch in &run.epochs {
            for ob in &epoch.observations {
                let c = ob.truth_contamination.unwrap();
                assert!(c >= 0.0);
                if c > 0.0 {
                    contaminated += 1;
                }
            }
        }
        assert!(contaminated > 0, "harsh preset produced no contamination");
    }

    #[test]
    fn nlos_frequency_matches_configured_probability() {
        // One full-sky sector with p = 0.3; law of large numbers over all
        // satellite-epochs in the sector.
        let mut cfg = base_config("nlos-rate");
        cfg.n_epochs = 2000;
        cfg.nlos = vec![NlosSector {
            az_start: 0.0,
            az_end: 2.0 * std::f64::consts::PI - 1e-9,
            probability: 0.3,
            bias_median_m: 20.0,
            bias_sigma: 0.5,
        }];
        let run = generate(&cfg).unwrap();
        let mut total = 0usize;
        let mut hit = 0usize;
        for epoch in &run.epochs {
            for ob in &epoch.observations {
                total += 1;
                if ob.truth_contamination.unwrap() > 0.0 {
                    hit += 1;
                }
            }
        }
        let freq = hit as f64 / total as f64;
        assert!(
            (freq - 0.3).abs() < 0.02,
            "empirical contamination frequency {freq} over {total} samples"
        );
    }

    #[test]
    fn presets_keep_visibility_above_minimum() {
        let (medium, deep, harsh) = presets();
        for cfg in [&medium, &deep, &harsh] {
            let mut c = cfg.clone();
            c.n_epochs = 500;
            let run = generate(&c).expect("preset must keep >= 5 satellites visible");
            for epoch in &run.epochs {
                assert!(epoch.observations.len() >= MIN_OBSERVATIONS);
            }
        }
    }

    #[test]
    fn harsh_sees_fewer_satellites_than_medium() {
        let (mut medium, _, mut harsh) = presets();
        medium.n_epochs = 500;
        harsh.n_epochs = 500;
        let avg = |cfg: &ScenarioConfig| -> f64 {
            let run = generate(cfg).unwrap();
            run.epochs.iter().map(|e| e.observations.len()).sum::<usize>() as f64
                / run.epochs.len() as f64
        };
        let m = avg(&medium);
        let h = avg(&harsh);
        assert!(h < m, "harsh {h} vs medium {m}");
    }

    #[test]
    fn clean_noise_scales_with_inverse_sine_elevation() {
        // Bin clean-observation errors by elevation; empirical sigma per bin
        // must track sigma0/sin(el) within 10%.
        let mut cfg = base_config("noise-profile");
        cfg.n_epochs = 1500;
        cfg.nlos.clear();
        cfg.noise_sigma0_m = 1.5;
        let run = generate(&cfg).unwrap();
        let mut bins: Vec<Vec<f64>> = vec![Vec::new(); 8];
        for epoch in &run.epochs {
            let truth = epoch.truth_position.unwrap();
            let truth_ecef = geo::enu_to_ecef(&truth, &cfg.origin).unwrap();
            let clock = epoch.truth_clock_biases.unwrap();
            for ob in &epoch.observations {
                let sky = geo::sky_direction(&ob.sat_pos, &truth_ecef, &cfg.origin).unwrap();
                let range = ob.sat_pos.distance_to(&truth_ecef);
                let err = ob.pseudorange_obs
                    - range
                    - clock[ob.constellation.bias_index()]
                    - ob.correction_sum;
                let bin = (((sky.elevation / std::f64::consts::FRAC_PI_2) * 8.0) as usize).min(7);
                // Normalize by the model sigma profile; residual sigma
                // should then be sigma0 in every bin.
                bins[bin].push(err * sky.elevation.sin());
            }
        }
        for (k, bin) in bins.iter().enumerate() {
            if bin.len() < 10_000 {
                continue;
            }
            let var = bin.iter().map(|e| e * e).sum::<f64>() / bin.len() as f64;
            let sigma = var.sqrt();
            assert!(
                (sigma - cfg.noise_sigma0_m).abs() / cfg.noise_sigma0_m < 0.10,
                "bin {k}: normalized sigma {sigma} vs {}",
                cfg.noise_sigma0_m
            );
        }
    }

    #[test]
    fn too_little_visibility_names_the_epoch() {
        let mut cfg = base_config("blocked");
        cfg.n_epochs = 3;
        // Block the whole sky above the mask.
        cfg.canyon = vec![CanyonSector {
            az_start: 0.0,
            az_end: 2.0 * std::f64::consts::PI - 1e-9,
            max_blocked_elevation: std::f64::consts::FRAC_PI_2,
        }];
        match generate(&cfg) {
            Err(Error::VisibilityShortfall { epoch_index: 0, .. }) => {}
            other => panic!("expected visibility shortfall, got {other:?}"),
        }
    }
}
