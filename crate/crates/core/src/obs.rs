//! Multi-constellation pseudorange model.
//!
//! A per-epoch state is 7-dimensional: East/North/Up position plus four
//! constellation clock biases in meters (GPS and QZSS share one bias; the
//! others are Galileo, GLONASS and BeiDou). Predicted pseudorange is the
//! geometric range plus the selected clock bias plus a precomputed correction
//! sum; corrections (satellite clock, atmosphere) arrive as input data and
//! are never modeled here.

use nalgebra::{SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{self, EcefPoint, EnuPoint, Geodetic};

/// Number of scalar unknowns per epoch (3 position + 4 clock biases).
pub const STATE_DIM: usize = 7;
/// Minimum observations for a solvable epoch; enforced at ingestion.
pub const MIN_OBSERVATIONS: usize = 5;

pub type StateVector = SVector<f64, STATE_DIM>;

/// Constellation grouping for clock-bias selection. GPS and QZSS share the
/// first slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Constellation {
    GpsQzss,
    Galileo,
    Glonass,
    BeiDou,
}

pub const CONSTELLATIONS: [Constellation; 4] = [
    Constellation::GpsQzss,
    Constellation::Galileo,
    Constellation::Glonass,
    Constellation::BeiDou,
];

impl Constellation {
    /// Clock-bias slot of this constellation in the per-epoch state.
    pub fn bias_index(&self) -> usize {
        match self {
            Constellation::GpsQzss => 0,
            Constellation::Galileo => 1,
            Constellation::Glonass => 2,
            Constellation::BeiDou => 3,
        }
    }

    /// Constellation from the leading letter of a satellite id ("G08", "J01",
    /// "E11", "R09", "C23").
    pub fn from_sat_id(sat_id: &str) -> Option<Self> {
        match sat_id.chars().next()? {
            'G' | 'J' => Some(Constellation::GpsQzss),
            'E' => Some(Constellation::Galileo),
            'R' => Some(Constellation::Glonass),
            'C' => Some(Constellation::BeiDou),
            _ => None,
        }
    }

    pub fn letter(&self) -> char {
        match self {
            Constellation::GpsQzss => 'G',
            Constellation::Galileo => 'E',
            Constellation::Glonass => 'R',
            Constellation::BeiDou => 'C',
        }
    }
}

/// One satellite's measurement and metadata at a single epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SatelliteObservation {
    pub sat_id: String,
    pub constellation: Constellation,
    pub sat_pos: EcefPoint,
    /// Observed pseudorange in meters.
    pub pseudorange_obs: f64,
    /// Carrier-to-noise density ratio in dB-Hz.
    pub cn0: f64,
    /// Precomputed sum of standard corrections in meters (satellite clock,
    /// atmosphere); added to the prediction so it cancels against the
    /// matching term in the observation.
    pub correction_sum: f64,
    /// Simulator-only label: injected range contamination in meters
    /// (0 for a clean observation, `None` on real data).
    pub truth_contamination: Option<f64>,
}

/// Receiver state at one epoch: ENU position and the four clock biases in
/// meters, ordered [GpsQzss, Galileo, Glonass, BeiDou].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochState {
    pub position: EnuPoint,
    pub clock_biases: [f64; 4],
}

impl EpochState {
    pub fn origin() -> Self {
        Self {
            position: EnuPoint::new(0.0, 0.0, 0.0),
            clock_biases: [0.0; 4],
        }
    }

    pub fn as_vector(&self) -> StateVector {
        StateVector::from_column_slice(&[
            self.position.e,
            self.position.n,
            self.position.u,
            self.clock_biases[0],
            self.clock_biases[1],
            self.clock_biases[2],
            self.clock_biases[3],
        ])
    }

    pub fn from_vector(v: &StateVector) -> Self {
        Self {
            position: EnuPoint::new(v[0], v[1], v[2]),
            clock_biases: [v[3], v[4], v[5], v[6]],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position.is_finite() && self.clock_biases.iter().all(|b| b.is_finite())
    }
}

/// All satellite measurements at one GNSS epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochObservations {
    pub epoch_index: usize,
    /// Epoch time in seconds from the start of the run.
    pub time: f64,
    pub observations: Vec<SatelliteObservation>,
    pub truth_position: Option<EnuPoint>,
    /// Simulator truth clock biases (meters), when available.
    pub truth_clock_biases: Option<[f64; 4]>,
}

impl EpochObservations {
    /// Sort observations into the canonical factor order: constellation,
    /// then satellite id lexicographic.
    pub fn canonicalize(&mut self) {
        self.observations
            .sort_by(|a, b| (a.constellation, &a.sat_id).cmp(&(b.constellation, &b.sat_id)));
    }

    /// Validate invariants: minimum count, unique ids, finite fields.
    pub fn validate(&self) -> Result<()> {
        if self.observations.len() < MIN_OBSERVATIONS {
            return Err(Error::InsufficientObservations {
                epoch_index: self.epoch_index,
                count: self.observations.len(),
                minimum: MIN_OBSERVATIONS,
            });
        }
        let mut ids: Vec<&str> = self.observations.iter().map(|o| o.sat_id.as_str()).collect();
        ids.sort_unstable();
        for pair in ids.windows(2) {
            if pair[0] == pair[1] {
                return Err(Error::DuplicateSatellite {
                    sat_id: pair[0].to_string(),
                    epoch_index: self.epoch_index,
                });
            }
        }
        for o in &self.observations {
            if !(o.sat_pos.is_finite()
                && o.pseudorange_obs.is_finite()
                && o.pseudorange_obs > 0.0
                && o.cn0.is_finite()
                && o.correction_sum.is_finite())
            {
                return Err(Error::NonFinite { context: "satellite observation" });
            }
        }
        Ok(())
    }

    /// Constellations with at least one observation at this epoch.
    pub fn present_constellations(&self) -> [bool; 4] {
        let mut present = [false; 4];
        for o in &self.observations {
            present[o.constellation.bias_index()] = true;
        }
        present
    }
}

/// Predicted pseudorange: geometric range + selected clock bias + correction
/// sum.
pub fn predict_pseudorange(
    state: &EpochState,
    obs: &SatelliteObservation,
    origin: &Geodetic,
) -> Result<f64> {
    let sat_enu = geo::ecef_to_enu(&obs.sat_pos, origin)?;
    let range = (state.position.as_vector() - sat_enu.as_vector()).norm();
    Ok(range + state.clock_biases[obs.constellation.bias_index()] + obs.correction_sum)
}

/// Measurement residual, observed minus predicted.
pub fn residual(state: &EpochState, obs: &SatelliteObservation, origin: &Geodetic) -> Result<f64> {
    Ok(obs.pseudorange_obs - predict_pseudorange(state, obs, origin)?)
}

/// Row of the residual Jacobian over the 7 per-epoch unknowns:
/// `[-u_los^T, -onehot(constellation)^T]`.
pub fn residual_jacobian(
    state: &EpochState,
    obs: &SatelliteObservation,
    origin: &Geodetic,
) -> Result<StateVector> {
    let los = geo::unit_los(&obs.sat_pos, &state.position, origin)?;
    let mut row = StateVector::zeros();
    row[0] = -los.x;
    row[1] = -los.y;
    row[2] = -los.z;
    row[3 + obs.constellation.bias_index()] = -1.0;
    Ok(row)
}

/// Second derivative of the residual wrt the receiver position block:
/// `-(I - u u^T) / range`, with `u` the unit line of sight. Clock-bias terms
/// are linear, so this 3x3 block is the only curvature in the model. Used by
/// the solver's reverse pass.
pub fn residual_position_curvature(
    state: &EpochState,
    obs: &SatelliteObservation,
    origin: &Geodetic,
) -> Result<nalgebra::Matrix3<f64>> {
    let sat_enu = geo::ecef_to_enu(&obs.sat_pos, origin)?;
    let d: Vector3<f64> = state.position.as_vector() - sat_enu.as_vector();
    let range = d.norm();
    if range <= 1.0 {
        return Err(Error::CoincidentPoints { separation_m: range });
    }
    let u = d / range;
    Ok(-(nalgebra::Matrix3::identity() - u * u.transpose()) / range)
}
