//! Coordinate frames and satellite geometry.
//!
//! ECEF <-> local East-North-Up conversion on the WGS-84 ellipsoid, plus the
//! elevation/azimuth and unit line-of-sight helpers the pseudorange model and
//! the skyplot export build on. All angles are radians, all distances meters.
//!
//! Azimuth follows the skyplot convention: measured clockwise from North,
//! in `[0, 2*pi)`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// WGS-84 semi-major axis in meters.
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS-84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
/// WGS-84 first eccentricity squared.
pub const WGS84_E2: f64 = 2.0 * WGS84_F - WGS84_F * WGS84_F;

/// Earth-centered Earth-fixed position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EcefPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl EcefPoint {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.z)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn distance_to(&self, other: &EcefPoint) -> f64 {
        (self.as_vector() - other.as_vector()).norm()
    }
}

/// Local East-North-Up position in meters, relative to a declared origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnuPoint {
    pub e: f64,
    pub n: f64,
    pub u: f64,
}

impl EnuPoint {
    pub fn new(e: f64, n: f64, u: f64) -> Self {
        Self { e, n, u }
    }

    pub fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.e, self.n, self.u)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn is_finite(&self) -> bool {
        self.e.is_finite() && self.n.is_finite() && self.u.is_finite()
    }

    pub fn horizontal_distance_to(&self, other: &EnuPoint) -> f64 {
        ((self.e - other.e).powi(2) + (self.n - other.n).powi(2)).sqrt()
    }
}

/// Elevation/azimuth pair for a tracked satellite.
///
/// Elevation is in `[0, pi/2]` for anything above the horizon (the simulator
/// masks below-horizon satellites before they reach any consumer); azimuth is
/// clockwise from North in `[0, 2*pi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SkyDirection {
    pub elevation: f64,
    pub azimuth: f64,
}

/// Geodetic origin of a scenario's ENU frame (latitude/longitude in radians,
/// ellipsoidal height in meters). All epochs of a run share one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geodetic {
    pub lat: f64,
    pub lon: f64,
    pub height: f64,
}

impl Geodetic {
    pub fn new(lat: f64, lon: f64, height: f64) -> Self {
        Self { lat, lon, height }
    }

    pub fn from_degrees(lat_deg: f64, lon_deg: f64, height: f64) -> Self {
        Self::new(lat_deg.to_radians(), lon_deg.to_radians(), height)
    }

    /// ECEF position of this geodetic point.
    pub fn to_ecef(&self) -> EcefPoint {
        let sin_lat = self.lat.sin();
        let cos_lat = self.lat.cos();
        let n = WGS84_A / (1.0 - WGS84_E2 * sin_lat * sin_lat).sqrt();
        EcefPoint::new(
            (n + self.height) * cos_lat * self.lon.cos(),
            (n + self.height) * cos_lat * self.lon.sin(),
            (n * (1.0 - WGS84_E2) + self.height) * sin_lat,
        )
    }

    /// Rotation taking ECEF deltas into the local ENU frame (rows: e, n, u).
    pub fn enu_rotation(&self) -> Matrix3<f64> {
        let (sin_lat, cos_lat) = (self.lat.sin(), self.lat.cos());
        let (sin_lon, cos_lon) = (self.lon.sin(), self.lon.cos());
        Matrix3::new(
            -sin_lon,
            cos_lon,
            0.0,
            -sin_lat * cos_lon,
            -sin_lat * sin_lon,
            cos_lat,
            cos_lat * cos_lon,
            cos_lat * sin_lon,
            sin_lat,
        )
    }

    fn validate(&self) -> Result<()> {
        if !(self.lat.is_finite() && self.lon.is_finite() && self.height.is_finite()) {
            return Err(Error::NonFinite { context: "geodetic origin" });
        }
        if !(-std::f64::consts::FRAC_PI_2..=std::f64::consts::FRAC_PI_2).contains(&self.lat) {
            return Err(Error::InvalidLatitude { lat_rad: self.lat });
        }
        Ok(())
    }
}

/// Convert an ECEF point into the ENU frame anchored at `origin`.
pub fn ecef_to_enu(p: &EcefPoint, origin: &Geodetic) -> Result<EnuPoint> {
    origin.validate()?;
    if !p.is_finite() {
        return Err(Error::NonFinite { context: "ecef_to_enu input" });
    }
    let d = p.as_vector() - origin.to_ecef().as_vector();
    Ok(EnuPoint::from_vector(&(origin.enu_rotation() * d)))
}

/// Convert an ENU point back to ECEF. Inverse of [`ecef_to_enu`].
pub fn enu_to_ecef(p: &EnuPoint, origin: &Geodetic) -> Result<EcefPoint> {
    origin.validate()?;
    if !p.is_finite() {
        return Err(Error::NonFinite { context: "enu_to_ecef input" });
    }
    let v = origin.enu_rotation().transpose() * p.as_vector() + origin.to_ecef().as_vector();
    Ok(EcefPoint::new(v.x, v.y, v.z))
}

const MIN_SEPARATION_M: f64 = 1.0;

/// Elevation and azimuth of `sat` as seen from `receiver`, both ECEF.
///
/// Elevation is `asin` of the up-component of the unit line of sight in the
/// receiver-local ENU frame (negative below the horizon); azimuth is
/// clockwise from North.
pub fn sky_direction(
    sat: &EcefPoint,
    receiver: &EcefPoint,
    origin: &Geodetic,
) -> Result<SkyDirection> {
    origin.validate()?;
    if !sat.is_finite() || !receiver.is_finite() {
        return Err(Error::NonFinite { context: "sky_direction input" });
    }
    let d = sat.as_vector() - receiver.as_vector();
    let norm = d.norm();
    if norm <= MIN_SEPARATION_M {
        return Err(Error::CoincidentPoints { separation_m: norm });
    }
    let los = origin.enu_rotation() * (d / norm);
    // atan2 form stays well conditioned at the zenith, where asin is not.
    let elevation = los.z.atan2((los.x * los.x + los.y * los.y).sqrt());
    let mut azimuth = los.x.atan2(los.y);
    if azimuth < 0.0 {
        azimuth += 2.0 * std::f64::consts::PI;
    }
    // atan2(0-ish, ...) can land exactly on 2*pi after the wrap
    if azimuth >= 2.0 * std::f64::consts::PI {
        azimuth = 0.0;
    }
    Ok(SkyDirection { elevation, azimuth })
}

/// Unit vector from the satellite toward the receiver, expressed in ENU.
///
/// This is d||p - s||/dp, the position block of the pseudorange Jacobian up
/// to sign.
pub fn unit_los(sat: &EcefPoint, receiver: &EnuPoint, origin: &Geodetic) -> Result<Vector3<f64>> {
    origin.validate()?;
    if !sat.is_finite() || !receiver.is_finite() {
        return Err(Error::NonFinite { context: "unit_los input" });
    }
    let sat_enu = ecef_to_enu(sat, origin)?;
    let d = receiver.as_vector() - sat_enu.as_vector();
    let norm = d.norm();
    if norm <= MIN_SEPARATION_M {
        return Err(Error::CoincidentPoints { separation_m: norm });
    }
    Ok(d / norm)
}
