//! Synthetic worlds and sampling layouts used by tests, benches and `rem synth`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::channel::{antenna_gain, sample_world, AntennaPattern, ChannelConfig, NoiseConfig, ShadowingConfig};
use crate::error::{RemError, Result};
use crate::geometry::CartesianPoint;
use crate::io::{Measurement, MeasurementSet};

/// Down-tilted sector antenna: the pattern the stage-1 model is trained on.
pub fn sector_antenna() -> AntennaPattern {
    AntennaPattern::Parametric {
        peak_gain_dbi: 8.0,
        boresight_phi: 0.0,
        boresight_theta: PI / 2.0 + 0.1,
        beamwidth_az: 1.2,
        beamwidth_el: 0.7,
        front_to_back_db: 20.0,
    }
}

/// Extra lobe pointing steeply upward.
pub fn upward_lobe() -> AntennaPattern {
    AntennaPattern::Parametric {
        peak_gain_dbi: 8.0,
        boresight_phi: 0.0,
        boresight_theta: 0.0,
        beamwidth_az: 100.0,
        beamwidth_el: 0.55,
        front_to_back_db: 30.0,
    }
}

/// Power sum of two patterns, tabulated on an `n_phi x n_theta` grid.
pub fn combine_patterns(a: &AntennaPattern, b: &AntennaPattern, n_phi: usize, n_theta: usize) -> AntennaPattern {
    let mut gains_db = Vec::with_capacity(n_phi * n_theta);
    for j in 0..n_theta {
        let theta = j as f64 * PI / (n_theta - 1) as f64;
        for i in 0..n_phi {
            let phi = -PI + i as f64 * 2.0 * PI / n_phi as f64;
            let lin = 10f64.powf(antenna_gain(a, phi, theta) / 10.0) + 10f64.powf(antenna_gain(b, phi, theta) / 10.0);
            gains_db.push(10.0 * lin.log10());
        }
    }
    AntennaPattern::Table { n_phi, n_theta, gains_db }
}

/// World seen by stage 1: free space with the sector antenna.
pub fn sector_world() -> ChannelConfig {
    ChannelConfig { antenna: sector_antenna(), ..Default::default() }
}

/// Sector antenna plus an upward lobe the stage-1 world does not contain.
pub fn uptilt_world(shadowing: Option<ShadowingConfig>) -> ChannelConfig {
    ChannelConfig {
        antenna: combine_patterns(&sector_antenna(), &upward_lobe(), 72, 91),
        shadowing,
        ..Default::default()
    }
}

/// Power pattern of a uniform vertical array with half-wavelength spacing,
/// electrically steered to `tilt_theta`, in dB relative to the main lobe.
pub fn vertical_array_factor_db(theta: f64, n_elements: usize, tilt_theta: f64, floor_db: f64) -> f64 {
    let psi = PI * (theta.cos() - tilt_theta.cos());
    let n = n_elements as f64;
    let den = n * (psi / 2.0).sin();
    let af = if den.abs() < 1e-12 { 1.0 } else { ((n * psi / 2.0).sin() / den).powi(2) };
    (10.0 * af.max(1e-30).log10()).max(floor_db)
}

/// Sector element times an 8-element vertical array (sidelobes and nulls
/// toward the sky), power-summed with the upward lobe.
pub fn aerial_antenna() -> AntennaPattern {
    let (n_phi, n_theta) = (72, 361);
    let tilt = PI / 2.0 + 0.1;
    let mut gains_db = Vec::with_capacity(n_phi * n_theta);
    for j in 0..n_theta {
        let theta = j as f64 * PI / (n_theta - 1) as f64;
        for i in 0..n_phi {
            let phi = -PI + i as f64 * 2.0 * PI / n_phi as f64;
            let main = antenna_gain(&sector_antenna(), phi, theta) + vertical_array_factor_db(theta, 8, tilt, -30.0);
            let up = antenna_gain(&upward_lobe(), phi, theta);
            gains_db.push(10.0 * (10f64.powf(main / 10.0) + 10f64.powf(up / 10.0)).log10());
        }
    }
    AntennaPattern::Table { n_phi, n_theta, gains_db }
}

pub fn aerial_world(shadowing: Option<ShadowingConfig>) -> ChannelConfig {
    ChannelConfig { antenna: aerial_antenna(), shadowing, ..Default::default() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Layout {
    /// Uniform in volume over `rho_min <= rho <= rho_max`, `theta <= theta_max`.
    Shell { count: usize, rho_min: f64, rho_max: f64, theta_max: f64 },
    /// Horizontal discs at fixed altitudes, labelled `A`, `B`, ... in order.
    Slices { altitudes: Vec<f64>, per_slice: usize, radius: f64 },
}

pub fn slice_label(i: usize) -> String {
    char::from(b'A' + (i % 26) as u8).to_string()
}

/// Points and labels for a layout.
pub fn sample_layout(layout: &Layout, seed: u64) -> Result<Vec<(CartesianPoint, Option<String>)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match layout {
        Layout::Shell { count, rho_min, rho_max, theta_max } => {
            if !(0.0 < *rho_min && rho_min < rho_max) {
                return Err(RemError::Config(vec!["layout: need 0 < rho_min < rho_max".into()]));
            }
            let cos_min = theta_max.clamp(0.0, PI).cos();
            Ok((0..*count)
                .map(|_| {
                    let u: f64 = rng.random();
                    let rho = (rho_min.powi(3) + u * (rho_max.powi(3) - rho_min.powi(3))).cbrt();
                    let cos_t = 1.0 - rng.random::<f64>() * (1.0 - cos_min);
                    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
                    let phi = PI - rng.random::<f64>() * 2.0 * PI;
                    (CartesianPoint::new(rho * sin_t * phi.cos(), rho * sin_t * phi.sin(), rho * cos_t), None)
                })
                .collect())
        }
        Layout::Slices { altitudes, per_slice, radius } => {
            if !(*radius > 0.0) || altitudes.iter().any(|a| !(*a > 0.0)) {
                return Err(RemError::Config(vec!["layout: need radius > 0 and positive altitudes".into()]));
            }
            let mut out = Vec::with_capacity(altitudes.len() * per_slice);
            for (i, &z) in altitudes.iter().enumerate() {
                for _ in 0..*per_slice {
                    let r = radius * rng.random::<f64>().sqrt();
                    let a = rng.random::<f64>() * 2.0 * PI;
                    out.push((CartesianPoint::new(r * a.cos(), r * a.sin(), z), Some(slice_label(i))));
                }
            }
            Ok(out)
        }
    }
}

/// Everything needed to regenerate a synthetic measurement set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub world: ChannelConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    pub layout: Layout,
}

impl Scenario {
    pub fn generate(&self, seed: u64) -> Result<MeasurementSet> {
        let pts = sample_layout(&self.layout, seed)?;
        let positions: Vec<CartesianPoint> = pts.iter().map(|p| p.0).collect();
        let mut world = self.world.clone();
        if let Some(sh) = world.shadowing.as_mut() {
            sh.seed ^= seed;
        }
        let values = sample_world(&positions, &world, &self.noise, seed.wrapping_add(0x006e_6f69_7365))?;
        Ok(MeasurementSet::from_records(
            pts.into_iter()
                .zip(values)
                .map(|((p, label), v)| Measurement { position: p, rsrp_dbm: v, altitude_label: label, timestamp: None })
                .collect(),
        ))
    }
}

/// Zero-mean field that is correlated only along rays from the base station:
/// each ray carries an independent Gauss-Markov process in range with
/// covariance `sigma^2 exp(-|d_rho| / corr_length_m)`. Rays pass through the
/// centers of distinct angular bins of width `angular_res` above the horizon.
pub fn radial_markov_field(
    n_rays: usize,
    per_ray: usize,
    rho_max: f64,
    corr_length_m: f64,
    sigma: f64,
    angular_res: f64,
    seed: u64,
) -> Result<MeasurementSet> {
    use crate::geometry::{angular_bin_counts, to_cartesian, SphericalPoint};
    use rand::seq::index::sample;
    use rand_distr::{Distribution, StandardNormal};

    let (n_phi, n_theta) = angular_bin_counts(angular_res);
    let upper = ((PI / 2.0) / angular_res).floor() as usize;
    let available = n_phi * upper.min(n_theta);
    if n_rays > available || !(corr_length_m > 0.0 && rho_max > 0.0) {
        return Err(RemError::Config(vec![format!(
            "radial field: need n_rays <= {available}, corr_length_m > 0 and rho_max > 0"
        )]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::with_capacity(n_rays * per_ray);
    for b in sample(&mut rng, available, n_rays).into_iter() {
        let phi = -PI + ((b % n_phi) as f64 + 0.5) * angular_res;
        let theta = ((b / n_phi) as f64 + 0.5) * angular_res;
        let mut rhos: Vec<f64> = (0..per_ray).map(|_| rho_max * (1.0 - rng.random::<f64>())).collect();
        rhos.sort_by(f64::total_cmp);
        let mut z = 0.0;
        let mut prev: Option<f64> = None;
        for rho in rhos {
            let e: f64 = StandardNormal.sample(&mut rng);
            z = match prev {
                None => sigma * e,
                Some(p) => {
                    let a = (-(rho - p) / corr_length_m).exp();
                    a * z + sigma * (1.0 - a * a).sqrt() * e
                }
            };
            prev = Some(rho);
            let pos = to_cartesian(&SphericalPoint::new(rho, phi, theta)?);
            records.push(Measurement::new(pos, z));
        }
    }
    Ok(MeasurementSet::from_records(records))
}
