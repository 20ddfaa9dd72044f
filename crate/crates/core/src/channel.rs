//! Deterministic channel model: free-space path loss, a base-station antenna
//! pattern and optional spatially correlated shadowing.
//!
//! Stage-1 pretraining targets use only path loss and antenna gain. Shadowing
//! and receiver noise exist so that synthetic evaluation worlds can stand in
//! for measurement campaigns.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{RemError, Result};
use crate::geometry::{to_spherical, CartesianPoint, Direction, RangeArray};

/// Free-space gain constant for a carrier expressed in Hz.
pub const FSPL_CONSTANT_DB: f64 = 147.55;

pub const DEFAULT_TX_POWER_DBM: f64 = 40.0;
pub const DEFAULT_CARRIER_HZ: f64 = 3.51e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    #[serde(default = "default_tx_power")]
    pub tx_power_dbm: f64,
    #[serde(default = "default_carrier")]
    pub carrier_hz: f64,
    #[serde(default)]
    pub antenna: AntennaPattern,
    #[serde(default)]
    pub shadowing: Option<ShadowingConfig>,
}

fn default_tx_power() -> f64 {
    DEFAULT_TX_POWER_DBM
}

fn default_carrier() -> f64 {
    DEFAULT_CARRIER_HZ
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            tx_power_dbm: DEFAULT_TX_POWER_DBM,
            carrier_hz: DEFAULT_CARRIER_HZ,
            antenna: AntennaPattern::Isotropic,
            shadowing: None,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.carrier_hz > 0.0 && self.carrier_hz.is_finite()) {
            errs.push(format!("channel.carrier_hz must be > 0, got {}", self.carrier_hz));
        }
        if !self.tx_power_dbm.is_finite() {
            errs.push("channel.tx_power_dbm must be finite".to_string());
        }
        errs.extend(self.antenna.problems());
        if let Some(sh) = &self.shadowing {
            errs.extend(sh.problems());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(RemError::Config(errs))
        }
    }

    /// Same world with shadowing removed (the stage-1 target model).
    pub fn deterministic(&self) -> Self {
        Self { shadowing: None, ..self.clone() }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| RemError::Config(vec![e.to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("channel config is always representable")
    }
}

/// Base-station antenna gain over the sphere of directions.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AntennaPattern {
    #[default]
    Isotropic,
    /// Single-lobe quadratic pattern, attenuation capped at the front-to-back ratio.
    Parametric {
        peak_gain_dbi: f64,
        boresight_phi: f64,
        boresight_theta: f64,
        beamwidth_az: f64,
        beamwidth_el: f64,
        front_to_back_db: f64,
    },
    /// Gain samples on a regular grid. Azimuth samples sit at
    /// `-pi + i * 2pi / n_phi` and wrap around; inclination samples sit at
    /// `j * pi / (n_theta - 1)`. `gains_db` is row-major by inclination.
    Table { n_phi: usize, n_theta: usize, gains_db: Vec<f64> },
}

impl AntennaPattern {
    fn problems(&self) -> Vec<String> {
        let mut errs = Vec::new();
        match self {
            AntennaPattern::Isotropic => {}
            AntennaPattern::Parametric { beamwidth_az, beamwidth_el, front_to_back_db, .. } => {
                if !(*beamwidth_az > 0.0 && *beamwidth_el > 0.0) {
                    errs.push("antenna beamwidths must be > 0".to_string());
                }
                if !(*front_to_back_db >= 0.0) {
                    errs.push("antenna.front_to_back_db must be >= 0".to_string());
                }
            }
            AntennaPattern::Table { n_phi, n_theta, gains_db } => {
                if *n_phi < 1 || *n_theta < 2 {
                    errs.push("antenna table needs n_phi >= 1 and n_theta >= 2".to_string());
                } else if gains_db.len() != n_phi * n_theta {
                    errs.push(format!(
                        "antenna table has {} gains, expected {}",
                        gains_db.len(),
                        n_phi * n_theta
                    ));
                }
                if gains_db.iter().any(|g| !g.is_finite()) {
                    errs.push("antenna table gains must be finite".to_string());
                }
            }
        }
        errs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShadowingConfig {
    pub sigma_db: f64,
    pub corr_length_m: f64,
    pub seed: u64,
}

impl ShadowingConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.sigma_db >= 0.0) {
            errs.push("shadowing.sigma_db must be >= 0".to_string());
        }
        if !(self.corr_length_m > 0.0) {
            errs.push("shadowing.corr_length_m must be > 0".to_string());
        }
        errs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub sigma_db: f64,
}

/// Free-space gain (a negative number at useful ranges) added to the transmit power.
pub fn fspl_gain_db(rho: f64, carrier_hz: f64) -> Result<f64> {
    if !(rho > 0.0) || !(carrier_hz > 0.0) {
        return Err(RemError::Domain(format!(
            "free-space gain needs rho > 0 and carrier > 0, got rho={rho}, carrier={carrier_hz}"
        )));
    }
    Ok(FSPL_CONSTANT_DB - 20.0 * rho.log10() - 20.0 * carrier_hz.log10())
}

fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w == -PI {
        PI
    } else {
        w
    }
}

pub fn antenna_gain(pattern: &AntennaPattern, phi: f64, theta: f64) -> f64 {
    match pattern {
        AntennaPattern::Isotropic => 0.0,
        AntennaPattern::Parametric {
            peak_gain_dbi,
            boresight_phi,
            boresight_theta,
            beamwidth_az,
            beamwidth_el,
            front_to_back_db,
        } => {
            let d_az = wrap_angle(phi - boresight_phi) / beamwidth_az;
            let d_el = (theta - boresight_theta) / beamwidth_el;
            let atten = 12.0 * (d_az * d_az + d_el * d_el);
            peak_gain_dbi - atten.min(*front_to_back_db)
        }
        AntennaPattern::Table { n_phi, n_theta, gains_db } => {
            let (n_phi, n_theta) = (*n_phi, *n_theta);
            let u = (phi + PI).rem_euclid(2.0 * PI) / (2.0 * PI) * n_phi as f64;
            let i0 = (u.floor() as usize) % n_phi;
            let i1 = (i0 + 1) % n_phi;
            let fu = u - u.floor();
            let v = (theta.clamp(0.0, PI) / PI) * (n_theta - 1) as f64;
            let j0 = (v.floor() as usize).min(n_theta - 2);
            let fv = v - j0 as f64;
            let g = |j: usize, i: usize| gains_db[j * n_phi + i];
            let lo = g(j0, i0) * (1.0 - fu) + g(j0, i1) * fu;
            let hi = g(j0 + 1, i0) * (1.0 - fu) + g(j0 + 1, i1) * fu;
            lo * (1.0 - fv) + hi * fv
        }
    }
}

/// Received power along one direction at every radius of `delta`.
pub fn rsrp_sequence(direction: Direction, delta: &RangeArray, cfg: &ChannelConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let gain = antenna_gain(&cfg.antenna, direction.phi, direction.theta);
    let mut out = delta
        .values()
        .iter()
        .map(|&r| fspl_gain_db(r, cfg.carrier_hz).map(|pl| cfg.tx_power_dbm + pl + gain))
        .collect::<Result<Vec<_>>>()?;
    if let Some(sh) = &cfg.shadowing {
        let (ux, uy, uz) = direction.unit();
        let pts: Vec<_> = delta.values().iter().map(|&r| CartesianPoint::new(r * ux, r * uy, r * uz)).collect();
        for (o, s) in out.iter_mut().zip(sample_shadow_field(&pts, sh)?) {
            *o += s;
        }
    }
    Ok(out)
}

/// Deterministic part of the received power at a point.
pub fn rsrp_at(p: &CartesianPoint, cfg: &ChannelConfig) -> Result<f64> {
    let s = to_spherical(p)?;
    Ok(cfg.tx_power_dbm + fspl_gain_db(s.rho, cfg.carrier_hz)? + antenna_gain(&cfg.antenna, s.phi, s.theta))
}

/// Jointly Gaussian shadowing with covariance `sigma^2 exp(-d / L)`, drawn by
/// Cholesky factorization. Coincident points share one draw.
pub fn sample_shadow_field(points: &[CartesianPoint], cfg: &ShadowingConfig) -> Result<Vec<f64>> {
    if let Some(e) = cfg.problems().into_iter().next() {
        return Err(RemError::Config(vec![e]));
    }
    if points.iter().any(|p| !p.is_finite()) {
        return Err(RemError::Domain("shadow field points must be finite".to_string()));
    }
    if cfg.sigma_db == 0.0 || points.is_empty() {
        return Ok(vec![0.0; points.len()]);
    }

    let mut unique: Vec<CartesianPoint> = Vec::new();
    let mut slot = Vec::with_capacity(points.len());
    let mut seen = std::collections::HashMap::new();
    for p in points {
        let key = (p.x.to_bits(), p.y.to_bits(), p.z.to_bits());
        let idx = *seen.entry(key).or_insert_with(|| {
            unique.push(*p);
            unique.len() - 1
        });
        slot.push(idx);
    }

    let n = unique.len();
    let var = cfg.sigma_db * cfg.sigma_db;
    let cov = DMatrix::from_fn(n, n, |i, j| var * (-unique[i].distance(&unique[j]) / cfg.corr_length_m).exp());
    let chol = cholesky_with_jitter(cov, var)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
    let field = chol * z;
    Ok(slot.into_iter().map(|i| field[i]).collect())
}

fn cholesky_with_jitter(cov: DMatrix<f64>, scale: f64) -> Result<DMatrix<f64>> {
    let mut jitter = 0.0;
    for _ in 0..6 {
        let mut m = cov.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += jitter;
        }
        if let Some(c) = m.cholesky() {
            return Ok(c.l());
        }
        jitter = if jitter == 0.0 { 1e-12 * scale } else { jitter * 100.0 };
    }
    Err(RemError::Numerical("shadow covariance is not positive definite after jitter".to_string()))
}

/// Measured-like received power: deterministic model plus shadowing plus receiver noise.
pub fn sample_world(
    points: &[CartesianPoint],
    cfg: &ChannelConfig,
    noise: &NoiseConfig,
    noise_seed: u64,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut out = points.iter().map(|p| rsrp_at(p, cfg)).collect::<Result<Vec<_>>>()?;
    if let Some(sh) = &cfg.shadowing {
        for (o, s) in out.iter_mut().zip(sample_shadow_field(points, sh)?) {
            *o += s;
        }
    }
    if noise.sigma_db > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        for o in out.iter_mut() {
            let n: f64 = StandardNormal.sample(&mut rng);
            *o += noise.sigma_db * n;
        }
    }
    Ok(out)
}
