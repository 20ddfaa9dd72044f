//! Encoder-only transformer that maps a masked radial feature sequence to
//! received power at every radial bin.
//!
//! Layout per sequence of length `L`: the `L x 6` normalized features are
//! projected to `L x d_model`, a fixed sinusoidal table indexed by radial bin
//! is added, then `n_layers` post-norm encoder blocks run
//! (self-attention, add & norm, GELU feed-forward, add & norm). A linear head
//! emits one normalized value per position, which is mapped back to dBm with
//! the frozen target statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{RemError, Result};
use crate::featurize::{
    build_features, visibility, FeatureSequence, FeatureStats, MaskSpec, TargetStats, FEATURE_ROWS,
};
use crate::geometry::{radial_bin, to_spherical, CartesianPoint, RangeArray};
use crate::parallel;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Gelu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub activation: Activation,
    pub positional_encoding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 6,
            n_heads: 8,
            d_ff: 256,
            dropout: 0.1,
            activation: Activation::Gelu,
            positional_encoding: true,
        }
    }
}

impl ModelConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 || self.n_layers == 0 {
            errs.push("model dimensions, heads and layers must be > 0".to_string());
        } else if !self.d_model.is_multiple_of(self.n_heads) {
            errs.push(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        if self.d_model == 1 {
            errs.push("model.d_model must be >= 2 for layer normalization".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            errs.push(format!("model.dropout must lie in [0, 1), got {}", self.dropout));
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        let errs = self.problems();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(RemError::Config(errs))
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Trainable scalar count for a given configuration.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * (d * d + d) + 2 * 2 * d + (d * self.d_ff + self.d_ff) + (self.d_ff * d + d);
        (FEATURE_ROWS * d + d) + self.n_layers * per_layer + (d + 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

impl LayerParams {
    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv, &self.wo, &self.bo, &self.ln1_gain,
            &self.ln1_bias, &self.w1, &self.b1, &self.w2, &self.b2, &self.ln2_gain, &self.ln2_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: ModelConfig,
    pub delta: RangeArray,
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub layers: Vec<LayerParams>,
    pub w_out: Tensor,
    pub b_out: Tensor,
    pub feature_stats: FeatureStats,
    pub target_stats: TargetStats,
    positional: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    pub rsrp_dbm: Vec<f64>,
    /// Mirrors the input mask: `true` where the column was visible.
    pub visible: Vec<bool>,
}

/// Which loss a training example is scored with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    SmoothL1 { beta: f64 },
}

/// Sinusoidal table indexed by radial bin.
pub fn positional_table(len: usize, d_model: usize) -> Tensor {
    let mut t = Tensor::zeros(len, d_model);
    for pos in 0..len {
        for i in (0..d_model).step_by(2) {
            let freq = 1.0 / 10000f64.powf(i as f64 / d_model as f64);
            let a = pos as f64 * freq;
            t.set(pos, i, a.sin());
            if i + 1 < d_model {
                t.set(pos, i + 1, a.cos());
            }
        }
    }
    t
}

fn xavier(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_vec(fan_in, fan_out, data).expect("sized")
}

/// Parameter vars of one forward pass, in [`EncoderModel::params`] order.
pub struct ParamVars(pub Vec<Var>);

pub fn init_model(cfg: &ModelConfig, delta: &RangeArray, seed: u64) -> Result<EncoderModel> {
    cfg.validate()?;
    let d = cfg.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w_in = xavier(&mut rng, FEATURE_ROWS, d);
    let layers = (0..cfg.n_layers)
        .map(|_| LayerParams {
            wq: xavier(&mut rng, d, d),
            bq: Tensor::zeros(1, d),
            wk: xavier(&mut rng, d, d),
            bk: Tensor::zeros(1, d),
            wv: xavier(&mut rng, d, d),
            bv: Tensor::zeros(1, d),
            wo: xavier(&mut rng, d, d),
            bo: Tensor::zeros(1, d),
            ln1_gain: Tensor::filled(1, d, 1.0),
            ln1_bias: Tensor::zeros(1, d),
            w1: xavier(&mut rng, d, cfg.d_ff),
            b1: Tensor::zeros(1, cfg.d_ff),
            w2: xavier(&mut rng, cfg.d_ff, d),
            b2: Tensor::zeros(1, d),
            ln2_gain: Tensor::filled(1, d, 1.0),
            ln2_bias: Tensor::zeros(1, d),
        })
        .collect();
    let w_out = xavier(&mut rng, d, 1);
    Ok(EncoderModel {
        config: cfg.clone(),
        delta: delta.clone(),
        w_in,
        b_in: Tensor::zeros(1, d),
        layers,
        w_out,
        b_out: Tensor::zeros(1, 1),
        feature_stats: FeatureStats::default(),
        target_stats: TargetStats::default(),
        positional: positional_table(delta.len(), d),
    })
}

impl EncoderModel {
    /// Reassembles a model from stored parts (used by the checkpoint reader).
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_parts(
        config: ModelConfig,
        delta: RangeArray,
        params: Vec<Tensor>,
        feature_stats: FeatureStats,
        target_stats: TargetStats,
    ) -> Result<Self> {
        let mut model = init_model(&config, &delta, 0)?;
        let expect: Vec<[usize; 2]> = model.params().iter().map(|t| t.shape()).collect();
        if params.len() != expect.len() || params.iter().zip(&expect).any(|(p, s)| p.shape() != *s) {
            return Err(RemError::Checkpoint("parameter blocks do not match the stored config".to_string()));
        }
        for (dst, src) in model.params_mut().into_iter().zip(params) {
            *dst = src;
        }
        model.feature_stats = feature_stats;
        model.target_stats = target_stats;
        Ok(model)
    }

    pub fn seq_len(&self) -> usize {
        self.delta.len()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.w_in, &self.b_in];
        for l in &self.layers {
            v.extend(l.tensors());
        }
        v.push(&self.w_out);
        v.push(&self.b_out);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![&mut self.w_in, &mut self.b_in];
        for l in &mut self.layers {
            v.extend(l.tensors_mut());
        }
        v.push(&mut self.w_out);
        v.push(&mut self.b_out);
        v
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|t| t.len()).sum()
    }

    /// Records the encoder on `tape`. Returns the parameter vars and the
    /// normalized output column for `positions` (all positions when `None`).
    pub fn record(
        &self,
        tape: &mut Tape,
        input: &Tensor,
        positions: Option<&[usize]>,
        mut dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(ParamVars, Var)> {
        let len = self.seq_len();
        if input.shape() != [len, FEATURE_ROWS] {
            return Err(RemError::Shape(format!(
                "encoder input must be {len}x{FEATURE_ROWS}, got {}x{}",
                input.rows(),
                input.cols()
            )));
        }
        if let Some(p) = positions {
            if p.iter().any(|&k| k >= len) {
                return Err(RemError::Shape(format!("output position beyond sequence of {len}")));
            }
        }
        let vars: Vec<Var> = self.params().into_iter().map(|t| tape.param(t.clone())).collect();
        let cfg = &self.config;
        let (d, dh) = (cfg.d_model, cfg.head_dim());
        let p_drop = if dropout_rng.is_some() { cfg.dropout } else { 0.0 };

        let x = tape.constant(input.clone());
        let mut h = tape.matmul(x, vars[0])?;
        h = tape.add_row(h, vars[1])?;
        if cfg.positional_encoding {
            let pe = tape.constant(self.positional.clone());
            h = tape.add(h, pe)?;
        }

        let scale = 1.0 / (dh as f64).sqrt();
        for (li, _) in self.layers.iter().enumerate() {
            let lv = &vars[2 + 16 * li..2 + 16 * (li + 1)];
            let last = li + 1 == self.layers.len();
            // The final block only needs the rows that are read out.
            let query_src = match (last, positions) {
                (true, Some(p)) => tape.select_rows(h, p)?,
                _ => h,
            };
            let q = tape.matmul(query_src, lv[0])?;
            let q = tape.add_row(q, lv[1])?;
            let k = tape.matmul(h, lv[2])?;
            let k = tape.add_row(k, lv[3])?;
            let v = tape.matmul(h, lv[4])?;
            let v = tape.add_row(v, lv[5])?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for hd in 0..cfg.n_heads {
                let qh = tape.slice_cols(q, hd * dh, dh)?;
                let kh = tape.slice_cols(k, hd * dh, dh)?;
                let vh = tape.slice_cols(v, hd * dh, dh)?;
                let s = tape.matmul_t(qh, kh)?;
                let s = tape.scale(s, scale);
                let a = tape.softmax_rows(s);
                heads.push(tape.matmul(a, vh)?);
            }
            let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
            let mut att = tape.matmul(cat, lv[6])?;
            att = tape.add_row(att, lv[7])?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                att = dropout(tape, att, p_drop, rng)?;
            }
            let r1 = tape.add(query_src, att)?;
            let h1 = tape.layer_norm(r1, lv[8], lv[9], LAYER_NORM_EPS)?;
            let f = tape.matmul(h1, lv[10])?;
            let f = tape.add_row(f, lv[11])?;
            let f = tape.gelu(f);
            let mut f = tape.matmul(f, lv[12])?;
            f = tape.add_row(f, lv[13])?;
            if let Some(rng) = dropout_rng.as_deref_mut() {
                f = dropout(tape, f, p_drop, rng)?;
            }
            let r2 = tape.add(h1, f)?;
            h = tape.layer_norm(r2, lv[14], lv[15], LAYER_NORM_EPS)?;
        }
        debug_assert_eq!(tape.value(h).cols(), d);
        let n = vars.len();
        let out = tape.matmul(h, vars[n - 2])?;
        let out = tape.add_row(out, vars[n - 1])?;
        Ok((ParamVars(vars), out))
    }

    /// Normalized, sentinel-masked `L x 6` encoder input.
    pub fn prepare_input(&self, seq: &FeatureSequence, visible: &[bool]) -> Result<Tensor> {
        if seq.len() != self.seq_len() {
            return Err(RemError::Shape(format!(
                "sequence of {} for a model of length {}",
                seq.len(),
                self.seq_len()
            )));
        }
        self.feature_stats.normalize_masked(seq, visible)
    }

    /// Inference over every position. `masked_features` is the `L x 6` output of
    /// [`EncoderModel::prepare_input`].
    pub fn forward(&self, masked_features: &Tensor, input_mask: &[bool]) -> Result<PredictionResult> {
        if input_mask.len() != self.seq_len() {
            return Err(RemError::Shape("input mask length".to_string()));
        }
        let mut tape = Tape::new();
        let (_, out) = self.record(&mut tape, masked_features, None, None)?;
        let ts = self.target_stats;
        let rsrp_dbm = tape.value(out).data().iter().map(|&v| ts.denormalize(v)).collect();
        Ok(PredictionResult { rsrp_dbm, visible: input_mask.to_vec() })
    }

    /// Outputs at selected positions only.
    pub fn forward_at(&self, masked_features: &Tensor, positions: &[usize]) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let (_, out) = self.record(&mut tape, masked_features, Some(positions), None)?;
        let ts = self.target_stats;
        Ok(tape.value(out).data().iter().map(|&v| ts.denormalize(v)).collect())
    }

    /// Single-shot estimate at a point: only the point's radial bin is visible.
    pub fn predict_point(&self, p: &CartesianPoint) -> Result<f64> {
        let s = to_spherical(p)?;
        let k = radial_bin(s.rho, &self.delta)?;
        let seq = build_features(s.direction(), &self.delta);
        let vis = visibility(self.seq_len(), &MaskSpec::AllButK { k })?;
        let x = self.prepare_input(&seq, &vis)?;
        Ok(self.forward_at(&x, &[k])?[0])
    }

    pub fn predict_points(&self, points: &[CartesianPoint]) -> Result<Vec<f64>> {
        parallel::map_collect(points, |p| self.predict_point(p))
    }

    /// Loss and per-parameter gradients for one example.
    pub fn loss_and_grads(
        &self,
        input: &Tensor,
        target: &[f64],
        target_mask: &[bool],
        loss: LossKind,
        dropout_seed: Option<u64>,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let len = self.seq_len();
        if target.len() != len || target_mask.len() != len {
            return Err(RemError::Shape("target length".to_string()));
        }
        let support: Vec<usize> = (0..len).filter(|&i| target_mask[i]).collect();
        if support.is_empty() {
            return Err(RemError::Empty("example has no supervised positions".to_string()));
        }
        let positions = if support.len() == len { None } else { Some(support.as_slice()) };
        let mut rng = dropout_seed.filter(|_| self.config.dropout > 0.0).map(ChaCha8Rng::seed_from_u64);
        let mut tape = Tape::new();
        let (vars, out) = self.record(&mut tape, input, positions, rng.as_mut())?;
        let ts = self.target_stats;
        let pred = tape.affine(out, ts.std, ts.mean);
        let (t, m): (Vec<f64>, Vec<bool>) = match positions {
            None => (target.to_vec(), target_mask.to_vec()),
            Some(p) => (p.iter().map(|&i| target[i]).collect(), vec![true; p.len()]),
        };
        let l = match loss {
            LossKind::Mse => tape.mse_loss(pred, &t, &m)?,
            LossKind::SmoothL1 { beta } => tape.smooth_l1_loss(pred, &t, &m, beta)?,
        };
        let value = tape.value(l).data()[0];
        tape.backward(l)?;
        let grads = vars
            .0
            .iter()
            .map(|&v| tape.take_grad(v).unwrap_or_else(|| vec![0.0; tape.value(v).len()]))
            .collect();
        Ok((value, grads))
    }
}

fn dropout(tape: &mut Tape, x: Var, p: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let mask = (0..tape.value(x).len()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
    tape.mask_scale(x, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featurize::{sample_directions, TargetStats};
    use crate::geometry::Direction;
    use approx::assert_abs_diff_eq;

    fn tiny() -> ModelConfig {
        ModelConfig { d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, dropout: 0.0, ..Default::default() }
    }

    fn tiny_model(seed: u64) -> EncoderModel {
        let delta = RangeArray::new(16.0, 1.0).unwrap();
        let mut m = init_model(&tiny(), &delta, seed).unwrap();
        let seqs: Vec<_> = sample_directions(8, 1.6, 1).into_iter().map(|d| build_features(d, &delta)).collect();
        m.feature_stats = FeatureStats::fit(&seqs).unwrap();
        m.target_stats = TargetStats { mean: -60.0, std: 8.0 };
        m
    }

    #[test]
    fn config_checks() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.head_dim(), 8);
        assert!(cfg.validate().is_ok());
        let bad = ModelConfig { d_model: 65, ..ModelConfig::default() };
        assert!(matches!(bad.validate(), Err(RemError::Config(_))));
        let delta = RangeArray::new(16.0, 1.0).unwrap();
        assert!(init_model(&bad, &delta, 1).is_err());
    }

    #[test]
    fn init_is_seeded_and_sized() {
        let a = tiny_model(3);
        assert_eq!(a, tiny_model(3));
        assert_ne!(a.w_in, tiny_model(4).w_in);
        assert_eq!(a.parameter_count(), tiny().parameter_count());
        let full = init_model(&ModelConfig::default(), &RangeArray::new(64.0, 1.0).unwrap(), 0).unwrap();
        assert_eq!(full.parameter_count(), ModelConfig::default().parameter_count());
        let bound = (6.0f64 / (6 + 64) as f64).sqrt();
        assert!(full.w_in.data().iter().all(|v| v.abs() <= bound));
        assert!(full.layers.iter().all(|l| l.bq.data().iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn zero_head_predicts_target_mean() {
        let mut m = tiny_model(1);
        m.w_out = Tensor::zeros(m.config.d_model, 1);
        let seq = build_features(Direction::new(0.3, 1.0), &m.delta);
        let vis = vec![true; 16];
        let x = m.prepare_input(&seq, &vis).unwrap();
        let out = m.forward(&x, &vis).unwrap();
        assert!(out.rsrp_dbm.iter().all(|&v| v == -60.0));
    }

    #[test]
    fn attention_is_permutation_equivariant_without_positions() {
        let mut m = tiny_model(2);
        let seq = build_features(Direction::new(0.3, 1.0), &m.delta);
        let vis = vec![true; 16];
        let x = m.prepare_input(&seq, &vis).unwrap();
        let mut swapped = x.clone();
        for c in 0..6 {
            swapped.set(2, c, x.get(9, c));
            swapped.set(9, c, x.get(2, c));
        }
        let a = m.forward(&x, &vis).unwrap().rsrp_dbm;
        let b = m.forward(&swapped, &vis).unwrap().rsrp_dbm;
        assert!((a[2] - b[9]).abs() > 1e-9 || (a[9] - b[2]).abs() > 1e-9);

        m.config.positional_encoding = false;
        let a = m.forward(&x, &vis).unwrap().rsrp_dbm;
        let b = m.forward(&swapped, &vis).unwrap().rsrp_dbm;
        assert_abs_diff_eq!(a[2], b[9], epsilon = 1e-10);
        assert_abs_diff_eq!(a[9], b[2], epsilon = 1e-10);
        assert_abs_diff_eq!(a[5], b[5], epsilon = 1e-10);
    }

    #[test]
    fn selected_positions_match_full_forward() {
        let m = tiny_model(5);
        let seq = build_features(Direction::new(-1.0, 0.4), &m.delta);
        let vis = visibility(16, &MaskSpec::AllButK { k: 7 }).unwrap();
        let x = m.prepare_input(&seq, &vis).unwrap();
        let full = m.forward(&x, &vis).unwrap().rsrp_dbm;
        let part = m.forward_at(&x, &[7, 3]).unwrap();
        assert_abs_diff_eq!(full[7], part[0], epsilon = 1e-10);
        assert_abs_diff_eq!(full[3], part[1], epsilon = 1e-10);
    }

    #[test]
    fn batch_prediction_equals_single() {
        let m = tiny_model(6);
        let pts: Vec<_> = (1..9).map(|i| CartesianPoint::new(i as f64, 1.0, 2.0)).collect();
        let batch = m.predict_points(&pts).unwrap();
        for (p, b) in pts.iter().zip(batch) {
            assert_eq!(m.predict_point(p).unwrap(), b);
        }
        assert!(m.predict_point(&CartesianPoint::new(0.0, 0.0, 0.0)).is_err());
        assert!(m.predict_point(&CartesianPoint::new(100.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn dropout_only_when_seeded() {
        let mut m = tiny_model(7);
        m.config.dropout = 0.5;
        let seq = build_features(Direction::new(0.2, 0.9), &m.delta);
        let vis = vec![true; 16];
        let x = m.prepare_input(&seq, &vis).unwrap();
        let t = vec![-60.0; 16];
        let mask = vec![true; 16];
        let (a, _) = m.loss_and_grads(&x, &t, &mask, LossKind::Mse, None).unwrap();
        let (b, _) = m.loss_and_grads(&x, &t, &mask, LossKind::Mse, None).unwrap();
        assert_eq!(a, b);
        let (c, _) = m.loss_and_grads(&x, &t, &mask, LossKind::Mse, Some(1)).unwrap();
        let (d, _) = m.loss_and_grads(&x, &t, &mask, LossKind::Mse, Some(1)).unwrap();
        assert_eq!(c, d);
        assert_ne!(a, c);
    }
}
