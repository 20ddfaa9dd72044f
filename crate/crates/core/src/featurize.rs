//! Radial propagation feature sequences, masks and training examples.
//!
//! A direction out of the base station becomes a `6 x Rmax` matrix whose
//! columns are the radial bins and whose rows are
//! `[log10(radius), theta, phi, x, y, z]`.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::autodiff::Tensor;
use crate::channel::{rsrp_sequence, ChannelConfig};
use crate::error::{RemError, Result};
use crate::geometry::{radial_bin, to_spherical, CartesianPoint, Direction, RangeArray};

pub const FEATURE_ROWS: usize = 6;

/// Value written into masked feature entries (after normalization).
pub const MASK_SENTINEL: f64 = 0.0;

/// Value stored in target entries that carry no supervision.
pub const TARGET_SENTINEL: f64 = 0.0;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    /// `6 x Rmax`
    pub gamma: Tensor,
    pub direction: Direction,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.gamma.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.gamma.cols() == 0
    }
}

pub fn build_features(direction: Direction, delta: &RangeArray) -> FeatureSequence {
    let n = delta.len();
    let (ux, uy, uz) = direction.unit();
    let mut gamma = Tensor::zeros(FEATURE_ROWS, n);
    for (j, &r) in delta.values().iter().enumerate() {
        gamma.set(0, j, r.log10());
        gamma.set(1, j, direction.theta);
        gamma.set(2, j, direction.phi);
        gamma.set(3, j, r * ux);
        gamma.set(4, j, r * uy);
        gamma.set(5, j, r * uz);
    }
    FeatureSequence { gamma, direction }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskSpec {
    RandomPositions { mask_ratio: f64, seed: u64 },
    AllButK { k: usize },
}

/// Builds the visibility vector for a sequence of `len` columns (`true` = visible).
pub fn visibility(len: usize, spec: &MaskSpec) -> Result<Vec<bool>> {
    match *spec {
        MaskSpec::RandomPositions { mask_ratio, seed } => {
            if !(0.0..=1.0).contains(&mask_ratio) {
                return Err(RemError::Domain(format!("mask_ratio must lie in [0, 1], got {mask_ratio}")));
            }
            let count = (mask_ratio * len as f64).floor() as usize;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut vis = vec![true; len];
            for i in index::sample(&mut rng, len, count.min(len)) {
                vis[i] = false;
            }
            Ok(vis)
        }
        MaskSpec::AllButK { k } => {
            if k >= len {
                return Err(RemError::Domain(format!("mask column {k} outside sequence of {len}")));
            }
            let mut vis = vec![false; len];
            vis[k] = true;
            Ok(vis)
        }
    }
}

/// Overwrites hidden columns of a `rows x len` matrix with the sentinel.
pub fn mask_columns(features: &mut Tensor, visible: &[bool]) {
    let len = features.cols();
    for r in 0..features.rows() {
        for (c, &v) in visible.iter().enumerate().take(len) {
            if !v {
                features.set(r, c, MASK_SENTINEL);
            }
        }
    }
}

pub fn apply_mask(features: &Tensor, spec: &MaskSpec) -> Result<(Tensor, Vec<bool>)> {
    let vis = visibility(features.cols(), spec)?;
    let mut out = features.clone();
    mask_columns(&mut out, &vis);
    Ok((out, vis))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub features: FeatureSequence,
    pub input_mask: Vec<bool>,
    pub target: Vec<f64>,
    pub target_mask: Vec<bool>,
}

/// Which positions of a stage-1 example contribute to the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSupport {
    #[default]
    AllPositions,
    MaskedOnly,
}

/// Per-example seed derived from a base seed.
pub fn example_seed(base_seed: u64, index: usize) -> u64 {
    base_seed ^ index as u64
}

pub fn make_stage1_example(
    direction: Direction,
    delta: &RangeArray,
    cfg: &ChannelConfig,
    mask_ratio: f64,
    seed: u64,
    support: LossSupport,
) -> Result<TrainingExample> {
    let features = build_features(direction, delta);
    let target = rsrp_sequence(direction, delta, &cfg.deterministic())?;
    let input_mask = visibility(delta.len(), &MaskSpec::RandomPositions { mask_ratio, seed })?;
    let target_mask = match support {
        LossSupport::AllPositions => vec![true; delta.len()],
        LossSupport::MaskedOnly => input_mask.iter().map(|v| !v).collect(),
    };
    Ok(TrainingExample { features, input_mask, target, target_mask })
}

/// Single-measurement example: only the column of the sample's radial bin is
/// visible and supervised.
pub fn make_stage2_example(point: &CartesianPoint, rsrp_dbm: f64, delta: &RangeArray) -> Result<TrainingExample> {
    let s = to_spherical(point)?;
    let k = radial_bin(s.rho, delta)?;
    let features = build_features(s.direction(), delta);
    let input_mask = visibility(delta.len(), &MaskSpec::AllButK { k })?;
    let mut target = vec![TARGET_SENTINEL; delta.len()];
    target[k] = rsrp_dbm;
    Ok(TrainingExample { features, target_mask: input_mask.clone(), input_mask, target })
}

/// Uniform directions over the spherical cap `theta <= theta_max`.
pub fn sample_directions(n: usize, theta_max: f64, seed: u64) -> Vec<Direction> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cos_min = theta_max.clamp(0.0, PI).cos();
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let cos_t = 1.0 - u * (1.0 - cos_min);
            let mut phi = PI - rng.random::<f64>() * 2.0 * PI;
            if phi <= -PI {
                phi = PI;
            }
            Direction::new(phi, cos_t.clamp(-1.0, 1.0).acos())
        })
        .collect()
}

/// Per-row feature statistics, frozen after stage 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: [f64; FEATURE_ROWS],
    pub std: [f64; FEATURE_ROWS],
}

impl Default for FeatureStats {
    fn default() -> Self {
        Self { mean: [0.0; FEATURE_ROWS], std: [1.0; FEATURE_ROWS] }
    }
}

impl FeatureStats {
    pub fn fit<'a>(seqs: impl IntoIterator<Item = &'a FeatureSequence>) -> Result<Self> {
        let mut sum = [0.0; FEATURE_ROWS];
        let mut sq = [0.0; FEATURE_ROWS];
        let mut n = 0usize;
        for s in seqs {
            for r in 0..FEATURE_ROWS {
                for &v in s.gamma.row(r) {
                    sum[r] += v;
                    sq[r] += v * v;
                }
            }
            n += s.len();
        }
        if n == 0 {
            return Err(RemError::Empty("no feature columns to fit statistics on".to_string()));
        }
        let mut out = Self::default();
        for r in 0..FEATURE_ROWS {
            let m = sum[r] / n as f64;
            let var = (sq[r] / n as f64 - m * m).max(0.0);
            out.mean[r] = m;
            out.std[r] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
        }
        Ok(out)
    }

    /// Normalizes a `6 x len` matrix and writes the sentinel into hidden columns.
    /// Returns the transposed `len x 6` layout the encoder consumes.
    pub fn normalize_masked(&self, seq: &FeatureSequence, visible: &[bool]) -> Result<Tensor> {
        if visible.len() != seq.len() {
            return Err(RemError::Shape(format!(
                "mask length {} for a sequence of {}",
                visible.len(),
                seq.len()
            )));
        }
        let len = seq.len();
        let mut out = Tensor::zeros(len, FEATURE_ROWS);
        for j in 0..len {
            if !visible[j] {
                continue;
            }
            for r in 0..FEATURE_ROWS {
                out.set(j, r, (seq.gamma.get(r, j) - self.mean[r]) / self.std[r]);
            }
        }
        Ok(out)
    }
}

/// Z-score statistics of the target (dBm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TargetStats {
    pub mean: f64,
    pub std: f64,
}

impl Default for TargetStats {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

impl TargetStats {
    pub fn fit<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<Self> {
        let (mut s, mut sq, mut n) = (0.0, 0.0, 0usize);
        for &v in values {
            s += v;
            sq += v * v;
            n += 1;
        }
        if n == 0 {
            return Err(RemError::Empty("no targets to fit statistics on".to_string()));
        }
        let m = s / n as f64;
        let sd = (sq / n as f64 - m * m).max(0.0).sqrt();
        Ok(Self { mean: m, std: if sd > 1e-12 { sd } else { 1.0 } })
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.std + self.mean
    }
}
