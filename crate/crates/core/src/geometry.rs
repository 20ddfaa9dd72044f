//! Coordinate frames rooted at the base-station antenna, the radial range
//! array, and the angular/radial binning shared by featurization and the
//! correlogram.
//!
//! Conventions: `phi` is the azimuth in `(-pi, pi]` measured from +x towards
//! +y, `theta` is the inclination from the +z axis in `[0, pi]`.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{RemError, Result};

/// Default angular bin width, radians.
pub const DEFAULT_ANGULAR_RES: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartesianPoint {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl CartesianPoint {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn distance(&self, other: &CartesianPoint) -> f64 {
        let (dx, dy, dz) = (self.x - other.x, self.y - other.y, self.z - other.z);
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalPoint {
    pub rho: f64,
    pub phi: f64,
    pub theta: f64,
}

impl SphericalPoint {
    /// Builds a point, rejecting values outside the canonical ranges.
    pub fn new(rho: f64, phi: f64, theta: f64) -> Result<Self> {
        if !(rho >= 0.0 && rho.is_finite()) {
            return Err(RemError::Domain(format!("rho must be finite and >= 0, got {rho}")));
        }
        if !(phi > -PI && phi <= PI) {
            return Err(RemError::Domain(format!("phi must lie in (-pi, pi], got {phi}")));
        }
        if !(0.0..=PI).contains(&theta) {
            return Err(RemError::Domain(format!("theta must lie in [0, pi], got {theta}")));
        }
        Ok(Self { rho, phi, theta })
    }

    pub fn direction(&self) -> Direction {
        Direction { phi: self.phi, theta: self.theta }
    }
}

/// A propagation direction out of the base station.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    pub phi: f64,
    pub theta: f64,
}

impl Direction {
    pub const fn new(phi: f64, theta: f64) -> Self {
        Self { phi, theta }
    }

    /// Unit vector along the direction.
    pub fn unit(&self) -> (f64, f64, f64) {
        let (st, ct) = self.theta.sin_cos();
        let (sp, cp) = self.phi.sin_cos();
        (st * cp, st * sp, ct)
    }
}

pub fn to_spherical(p: &CartesianPoint) -> Result<SphericalPoint> {
    let rho = p.norm();
    if rho == 0.0 || !rho.is_finite() {
        return Err(RemError::UndefinedDirection);
    }
    // Azimuth is pinned to 0 on the polar axis.
    let phi = if p.x == 0.0 && p.y == 0.0 {
        0.0
    } else {
        let a = p.y.atan2(p.x);
        if a <= -PI {
            PI
        } else {
            a
        }
    };
    let theta = (p.z / rho).clamp(-1.0, 1.0).acos();
    Ok(SphericalPoint { rho, phi, theta })
}

pub fn to_cartesian(s: &SphericalPoint) -> CartesianPoint {
    let (ux, uy, uz) = s.direction().unit();
    CartesianPoint::new(s.rho * ux, s.rho * uy, s.rho * uz)
}

/// Ascending radii `[step, 2 step, ..., r_max]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RangeSpec", into = "RangeSpec")]
pub struct RangeArray {
    r_max: f64,
    step: f64,
    values: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
struct RangeSpec {
    r_max: f64,
    step: f64,
}

impl TryFrom<RangeSpec> for RangeArray {
    type Error = RemError;
    fn try_from(s: RangeSpec) -> Result<Self> {
        RangeArray::new(s.r_max, s.step)
    }
}

impl From<RangeArray> for RangeSpec {
    fn from(r: RangeArray) -> Self {
        RangeSpec { r_max: r.r_max, step: r.step }
    }
}

impl RangeArray {
    pub fn new(r_max: f64, step: f64) -> Result<Self> {
        if !(step > 0.0 && step.is_finite() && r_max > 0.0 && r_max.is_finite()) {
            return Err(RemError::Domain(format!(
                "range array needs positive r_max and step, got r_max={r_max}, step={step}"
            )));
        }
        let ratio = r_max / step;
        let len = ratio.round();
        if (ratio - len).abs() > 1e-9 * ratio.max(1.0) || len < 1.0 {
            return Err(RemError::Domain(format!(
                "r_max ({r_max}) must be an integer multiple of step ({step})"
            )));
        }
        let len = len as usize;
        let mut values: Vec<f64> = (1..=len).map(|j| j as f64 * step).collect();
        values[len - 1] = r_max;
        Ok(Self { r_max, step, values })
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Largest radius accepted by [`radial_bin`].
    pub fn limit(&self) -> f64 {
        self.r_max + 0.5 * self.step
    }
}

/// Index of the nearest radius in `delta`; exact ties resolve to the smaller index.
pub fn radial_bin(rho: f64, delta: &RangeArray) -> Result<usize> {
    if !(rho > 0.0 && rho <= delta.limit()) {
        return Err(RemError::OutsideRegion { rho, limit: delta.limit() });
    }
    let t = rho / delta.step;
    let k = (t - 0.5).ceil() as i64 - 1;
    Ok(k.clamp(0, delta.len() as i64 - 1) as usize)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AngularBinIndex {
    pub phi_bin: usize,
    pub theta_bin: usize,
}

/// Number of (azimuth, inclination) bins at a resolution.
pub fn angular_bin_counts(res: f64) -> (usize, usize) {
    ((2.0 * PI / res).ceil() as usize, (PI / res).ceil() as usize)
}

pub fn angular_bin(s: &SphericalPoint, res: f64) -> Result<AngularBinIndex> {
    if !(res > 0.0 && res.is_finite()) {
        return Err(RemError::Domain(format!("angular resolution must be > 0, got {res}")));
    }
    let (n_phi, n_theta) = angular_bin_counts(res);
    let phi_bin = (((s.phi + PI) / res).floor().max(0.0) as usize).min(n_phi - 1);
    let theta_bin = ((s.theta / res).floor().max(0.0) as usize).min(n_theta - 1);
    Ok(AngularBinIndex { phi_bin, theta_bin })
}
