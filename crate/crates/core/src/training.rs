//! Two-stage training: masked pretraining on synthetic free-space sequences,
//! then fine-tuning on sparse measurements where each example exposes a
//! single radial bin.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::io::Write;
use std::time::Instant;

use crate::autodiff::Tensor;
use crate::channel::ChannelConfig;
use crate::error::{RemError, Result};
use crate::featurize::{
    build_features, example_seed, make_stage2_example, sample_directions, visibility, FeatureSequence,
    FeatureStats, LossSupport, MaskSpec, TargetStats,
};
use crate::io::{Measurement, MeasurementSet};
use crate::model::{EncoderModel, LossKind};
use crate::parallel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossName {
    Mse,
    SmoothL1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleName {
    /// Linear warm-up followed by square-root decay.
    Lwsrd,
    StepDecay,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub loss: LossName,
    pub lr_schedule: ScheduleName,
    pub lr_max: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stage 1 only.
    pub mask_ratio: f64,
    pub loss_support: LossSupport,
    pub warmup_frac: f64,
    pub n_drops: usize,
    pub smooth_l1_beta: f64,
    pub grad_clip: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl StageConfig {
    pub fn pretrain() -> Self {
        Self {
            stage: Stage::Pretrain,
            loss: LossName::Mse,
            lr_schedule: ScheduleName::Lwsrd,
            lr_max: 5e-4,
            lr_min: 1e-4,
            batch_size: 16,
            epochs: 10,
            mask_ratio: 0.3,
            loss_support: LossSupport::AllPositions,
            warmup_frac: 0.1,
            n_drops: 4,
            smooth_l1_beta: 1.0,
            grad_clip: 1.0,
            val_fraction: 0.05,
            seed: 0,
        }
    }

    pub fn finetune() -> Self {
        Self {
            stage: Stage::Finetune,
            loss: LossName::SmoothL1,
            lr_schedule: ScheduleName::StepDecay,
            lr_max: 5e-5,
            lr_min: 1e-5,
            batch_size: 4,
            epochs: 100,
            ..Self::pretrain()
        }
    }

    pub fn problems(&self, prefix: &str) -> Vec<String> {
        let mut e = Vec::new();
        if !(self.lr_max > 0.0 && self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            e.push(format!("{prefix}.lr_max/lr_min must satisfy 0 < lr_min <= lr_max"));
        }
        if self.batch_size == 0 {
            e.push(format!("{prefix}.batch_size must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.mask_ratio) {
            e.push(format!("{prefix}.mask_ratio must lie in [0, 1]"));
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac <= 1.0) {
            e.push(format!("{prefix}.warmup_frac must lie in (0, 1]"));
        }
        if self.n_drops == 0 {
            e.push(format!("{prefix}.n_drops must be >= 1"));
        }
        if !(self.smooth_l1_beta > 0.0) {
            e.push(format!("{prefix}.smooth_l1_beta must be > 0"));
        }
        if !(self.grad_clip > 0.0) {
            e.push(format!("{prefix}.grad_clip must be > 0"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            e.push(format!("{prefix}.val_fraction must lie in [0, 1)"));
        }
        e
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.problems("stage");
        if e.is_empty() {
            Ok(())
        } else {
            Err(RemError::Config(e))
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        match self.loss {
            LossName::Mse => LossKind::Mse,
            LossName::SmoothL1 => LossKind::SmoothL1 { beta: self.smooth_l1_beta },
        }
    }
}

/// Linear warm-up to `lr_max`, then `lr_max * sqrt(warmup / step)` floored at `lr_min`.
pub fn lr_lwsrd(step: usize, total_steps: usize, lr_max: f64, lr_min: f64, warmup_frac: f64) -> f64 {
    let warmup = warmup_steps(total_steps, warmup_frac);
    if step < warmup {
        lr_max * step as f64 / warmup as f64
    } else {
        (lr_max * (warmup as f64 / step as f64).sqrt()).max(lr_min)
    }
}

pub fn warmup_steps(total_steps: usize, warmup_frac: f64) -> usize {
    ((warmup_frac * total_steps as f64).round() as usize).max(1)
}

/// Piecewise-constant geometric decay: `n_drops + 1` equal epoch intervals,
/// the first at `lr_max`, the last at `lr_min`.
pub fn lr_step_decay(epoch: usize, epochs: usize, lr_max: f64, lr_min: f64, n_drops: usize) -> f64 {
    let n_drops = n_drops.max(1);
    let epochs = epochs.max(1);
    let level = ((epoch.min(epochs - 1) * (n_drops + 1)) / epochs).min(n_drops);
    lr_max * (lr_min / lr_max).powf(level as f64 / n_drops as f64)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &EncoderModel) -> Self {
        let zeros: Vec<Vec<f64>> = model.params().iter().map(|t| vec![0.0; t.len()]).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, model: &mut EncoderModel, grads: &[Vec<f64>], lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (((p, g), m), v) in model.params_mut().into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let update = lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                p.data_mut()[i] -= update;
            }
        }
    }
}

fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// Learning rate in effect at the last step of each epoch.
    pub lr: Vec<f64>,
    /// Learning rate used at every optimizer step.
    pub lr_steps: Vec<f64>,
    pub best_epoch: Option<usize>,
    pub wall_time_s: f64,
}

impl TrainReport {
    /// Everything but wall time, for reproducibility checks.
    pub fn same_run(&self, other: &TrainReport) -> bool {
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        bits(&self.train_loss) == bits(&other.train_loss)
            && bits(&self.val_loss) == bits(&other.val_loss)
            && bits(&self.lr) == bits(&other.lr)
            && bits(&self.lr_steps) == bits(&other.lr_steps)
            && self.best_epoch == other.best_epoch
    }

    /// `epoch,train_loss,val_loss,lr`
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "epoch,train_loss,val_loss,lr")?;
        for e in 0..self.train_loss.len() {
            writeln!(w, "{},{},{},{}", e, self.train_loss[e], self.val_loss[e], self.lr[e])?;
        }
        Ok(())
    }
}

/// One prepared example: normalized masked input and its supervision.
struct Prepared {
    input: Tensor,
    target: Vec<f64>,
    target_mask: Vec<bool>,
}

/// Runs one optimizer step over `batch` and returns the mean loss.
fn train_batch(
    model: &mut EncoderModel,
    opt: &mut Adam,
    batch: &[Prepared],
    loss: LossKind,
    lr: f64,
    grad_clip: f64,
    dropout_base: u64,
) -> Result<f64> {
    let results = {
        let m: &EncoderModel = model;
        parallel::map_range(batch.len(), |i| {
            let ex = &batch[i];
            m.loss_and_grads(&ex.input, &ex.target, &ex.target_mask, loss, Some(example_seed(dropout_base, i)))
        })?
    };
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut grads: Vec<Vec<f64>> = model.params().iter().map(|t| vec![0.0; t.len()]).collect();
    for (l, g) in results {
        total += l;
        for (acc, gi) in grads.iter_mut().zip(g) {
            for (a, b) in acc.iter_mut().zip(gi) {
                *a += b * scale;
            }
        }
    }
    let mean = total * scale;
    if !mean.is_finite() {
        return Err(RemError::Numerical("non-finite batch loss".to_string()));
    }
    clip_global_norm(&mut grads, grad_clip);
    opt.step(model, &grads, lr);
    Ok(mean)
}

fn evaluate_loss(model: &EncoderModel, set: &[Prepared], loss: LossKind) -> Result<f64> {
    if set.is_empty() {
        return Ok(f64::NAN);
    }
    let losses = parallel::map_collect(set, |ex| {
        let support: Vec<usize> = (0..ex.target.len()).filter(|&i| ex.target_mask[i]).collect();
        let pred = model.forward_at(&ex.input, &support)?;
        let n = pred.len() as f64;
        Ok(pred
            .iter()
            .zip(&support)
            .map(|(p, &i)| {
                let d = p - ex.target[i];
                match loss {
                    LossKind::Mse => d * d,
                    LossKind::SmoothL1 { beta } => crate::autodiff::smooth_l1(d, beta).0,
                }
            })
            .sum::<f64>()
            / n)
    })?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Directions drawn for stage 1: uniform over the cap `theta <= theta_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DirectionSampling {
    pub count: usize,
    pub theta_max: f64,
    pub seed: u64,
}

impl Default for DirectionSampling {
    fn default() -> Self {
        Self { count: 2000, theta_max: PI / 2.0 + 0.1, seed: 1 }
    }
}

struct Stage1Item {
    seq: FeatureSequence,
    target: Vec<f64>,
}

/// Masked pretraining on deterministic sequences of `world`. Refits the
/// model's normalization statistics on the training directions and returns
/// the parameters with the best validation loss.
pub fn pretrain(
    model: &EncoderModel,
    world: &ChannelConfig,
    directions: &DirectionSampling,
    cfg: &StageConfig,
) -> Result<(EncoderModel, TrainReport)> {
    cfg.validate()?;
    world.validate()?;
    let started = Instant::now();
    if cfg.epochs == 0 {
        return Ok((model.clone(), TrainReport::default()));
    }
    let delta = model.delta.clone();
    let world = world.deterministic();
    let dirs = sample_directions(directions.count, directions.theta_max, directions.seed);
    let items = parallel::map_collect(&dirs, |&d| {
        Ok(Stage1Item {
            seq: build_features(d, &delta),
            target: crate::channel::rsrp_sequence(d, &delta, &world)?,
        })
    })?;
    let n_val = ((cfg.val_fraction * items.len() as f64).round() as usize).min(items.len().saturating_sub(1));
    let (val_items, train_items) = items.split_at(n_val);
    if train_items.is_empty() {
        return Err(RemError::Empty("no stage-1 training directions".to_string()));
    }

    let mut model = model.clone();
    model.feature_stats = FeatureStats::fit(train_items.iter().map(|i| &i.seq))?;
    model.target_stats = TargetStats::fit(train_items.iter().flat_map(|i| i.target.iter()))?;

    let len = delta.len();
    let prepare = |m: &EncoderModel, item: &Stage1Item, seed: u64| -> Result<Prepared> {
        let vis = visibility(len, &MaskSpec::RandomPositions { mask_ratio: cfg.mask_ratio, seed })?;
        let target_mask = match cfg.loss_support {
            LossSupport::AllPositions => vec![true; len],
            LossSupport::MaskedOnly => vis.iter().map(|v| !v).collect(),
        };
        Ok(Prepared { input: m.prepare_input(&item.seq, &vis)?, target: item.target.clone(), target_mask })
    };
    let val_seed = cfg.seed ^ 0x5eed_0000_0000_0001;
    let val: Vec<Prepared> = val_items
        .iter()
        .enumerate()
        .map(|(i, it)| prepare(&model, it, example_seed(val_seed, i)))
        .collect::<Result<_>>()?;

    let loss = cfg.loss_kind();
    let batches_per_epoch = train_items.len().div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.epochs;
    let mut opt = Adam::new(&model);
    let mut report = TrainReport::default();
    let mut best: Option<(f64, EncoderModel)> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_items.len()).collect();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut lr = cfg.lr_max;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            lr = match cfg.lr_schedule {
                ScheduleName::Lwsrd => lr_lwsrd(step, total_steps, cfg.lr_max, cfg.lr_min, cfg.warmup_frac),
                ScheduleName::StepDecay => lr_step_decay(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min, cfg.n_drops),
            };
            // fresh masks every iteration
            let mask_base = cfg.seed.wrapping_add((step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let batch: Vec<Prepared> = chunk
                .iter()
                .map(|&i| prepare(&model, &train_items[i], example_seed(mask_base, i)))
                .collect::<Result<_>>()?;
            let l = train_batch(&mut model, &mut opt, &batch, loss, lr, cfg.grad_clip, mask_base ^ b as u64)
                .map_err(|_| RemError::Diverged { epoch })?;
            epoch_loss += l * batch.len() as f64;
            report.lr_steps.push(lr);
            step += 1;
        }
        let train_loss = epoch_loss / train_items.len() as f64;
        let val_loss = if val.is_empty() { train_loss } else { evaluate_loss(&model, &val, loss)? };
        if !val_loss.is_finite() {
            return Err(RemError::Diverged { epoch });
        }
        log::info!("stage1 epoch {epoch}: train {train_loss:.5} val {val_loss:.5} lr {lr:.2e}");
        report.train_loss.push(train_loss);
        report.val_loss.push(val_loss);
        report.lr.push(lr);
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, model.clone()));
            report.best_epoch = Some(epoch);
        }
    }
    report.wall_time_s = started.elapsed().as_secs_f64();
    let (_, best_model) = best.expect("at least one epoch ran");
    Ok((best_model, report))
}

fn in_region(model: &EncoderModel, records: &[Measurement]) -> (Vec<Measurement>, usize) {
    let set = MeasurementSet::from_records(records.to_vec());
    let (inside, skipped) = set.partition_in_region(&model.delta);
    (inside.records, skipped)
}

fn prepare_measurements(model: &EncoderModel, records: &[Measurement]) -> Result<Vec<Prepared>> {
    parallel::map_collect(records, |r| {
        let ex = make_stage2_example(&r.position, r.rsrp_dbm, &model.delta)?;
        Ok(Prepared {
            input: model.prepare_input(&ex.features, &ex.input_mask)?,
            target: ex.target,
            target_mask: ex.target_mask,
        })
    })
}

/// Fine-tunes on measurements, carving `cfg.val_fraction` of them out for
/// model selection. Keeps the model's frozen normalization statistics.
pub fn finetune(model: &EncoderModel, data: &MeasurementSet, cfg: &StageConfig) -> Result<(EncoderModel, TrainReport)> {
    cfg.validate()?;
    if data.records.is_empty() {
        return Err(RemError::Empty("fine-tuning set is empty".to_string()));
    }
    let n = data.records.len();
    let n_val = ((cfg.val_fraction * n as f64).round() as usize).min(n - 1);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0f1e_2d3c_4b5a_6978));
    let val: Vec<Measurement> = idx[..n_val].iter().map(|&i| data.records[i].clone()).collect();
    let train: Vec<Measurement> = idx[n_val..].iter().map(|&i| data.records[i].clone()).collect();
    finetune_split(model, &train, &val, cfg)
}

/// Fine-tuning with an explicit validation set (may be empty, in which case
/// the training loss drives model selection).
pub fn finetune_split(
    model: &EncoderModel,
    train: &[Measurement],
    val: &[Measurement],
    cfg: &StageConfig,
) -> Result<(EncoderModel, TrainReport)> {
    cfg.validate()?;
    let started = Instant::now();
    if cfg.epochs == 0 {
        return Ok((model.clone(), TrainReport::default()));
    }
    if train.is_empty() {
        return Err(RemError::Empty("fine-tuning set is empty".to_string()));
    }
    let mut model = model.clone();
    let (train, skipped) = in_region(&model, train);
    if skipped > 0 {
        log::warn!("skipping {skipped} training measurements outside the radial range");
    }
    if train.is_empty() {
        return Err(RemError::Empty("no fine-tuning measurements inside the radial range".to_string()));
    }
    let (val, _) = in_region(&model, val);
    let train_p = prepare_measurements(&model, &train)?;
    let val_p = prepare_measurements(&model, &val)?;
    let loss = cfg.loss_kind();
    let batches_per_epoch = train_p.len().div_ceil(cfg.batch_size);
    let total_steps = batches_per_epoch * cfg.epochs;

    let mut opt = Adam::new(&model);
    let mut report = TrainReport::default();
    let mut best: Option<(f64, EncoderModel)> = None;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_p.len()).collect();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut lr = cfg.lr_max;
        for chunk in order.chunks(cfg.batch_size) {
            lr = match cfg.lr_schedule {
                ScheduleName::Lwsrd => lr_lwsrd(step, total_steps, cfg.lr_max, cfg.lr_min, cfg.warmup_frac),
                ScheduleName::StepDecay => lr_step_decay(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min, cfg.n_drops),
            };
            let batch: Vec<Prepared> = chunk
                .iter()
                .map(|&i| Prepared {
                    input: train_p[i].input.clone(),
                    target: train_p[i].target.clone(),
                    target_mask: train_p[i].target_mask.clone(),
                })
                .collect();
            let dropout_base = cfg.seed.wrapping_add((step as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let l = train_batch(&mut model, &mut opt, &batch, loss, lr, cfg.grad_clip, dropout_base)
                .map_err(|_| RemError::Diverged { epoch })?;
            epoch_loss += l * batch.len() as f64;
            report.lr_steps.push(lr);
            step += 1;
        }
        let train_loss = epoch_loss / train_p.len() as f64;
        let val_loss = if val_p.is_empty() { train_loss } else { evaluate_loss(&model, &val_p, loss)? };
        if !val_loss.is_finite() {
            return Err(RemError::Diverged { epoch });
        }
        log::info!("stage2 epoch {epoch}: train {train_loss:.5} val {val_loss:.5} lr {lr:.2e}");
        report.train_loss.push(train_loss);
        report.val_loss.push(val_loss);
        report.lr.push(lr);
        if best.as_ref().is_none_or(|(b, _)| val_loss < *b) {
            best = Some((val_loss, model.clone()));
            report.best_epoch = Some(epoch);
        }
    }
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok((best.expect("at least one epoch ran").1, report))
}

/// Sizes of a three-way split; the test share absorbs rounding.
pub fn split_sizes(n: usize, ratios: [f64; 3]) -> Result<[usize; 3]> {
    let sum: f64 = ratios.iter().sum();
    if ratios.iter().any(|r| !(*r >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(RemError::Domain(format!("split ratios must be non-negative and sum to 1, got {ratios:?}")));
    }
    let a = ((ratios[0] * n as f64).round() as usize).min(n);
    let b = ((ratios[1] * n as f64).round() as usize).min(n - a);
    Ok([a, b, n - a - b])
}

/// Seeded uniform partition of `0..n` into train/validation/test index sets.
pub fn split_indices(n: usize, ratios: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    let [a, b, _] = split_sizes(n, ratios)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = idx.split_off(a + b);
    let val = idx.split_off(a);
    Ok([idx, val, test])
}

pub fn split_dataset(data: &MeasurementSet, ratios: [f64; 3], seed: u64) -> Result<[MeasurementSet; 3]> {
    let parts = split_indices(data.records.len(), ratios, seed)?;
    Ok(parts.map(|ix| data.subset(&ix)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RangeArray;
    use crate::model::{init_model, ModelConfig};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn lwsrd_reference_points() {
        let total = 1000;
        let w = warmup_steps(total, 0.1);
        assert_eq!(w, 100);
        assert_eq!(lr_lwsrd(0, total, 5e-4, 1e-4, 0.1), 0.0);
        assert_abs_diff_eq!(lr_lwsrd(50, total, 5e-4, 1e-4, 0.1), 2.5e-4, epsilon = 1e-18);
        assert_eq!(lr_lwsrd(w, total, 5e-4, 1e-4, 0.1), 5e-4);
        assert_abs_diff_eq!(lr_lwsrd(4 * w, total, 5e-4, 1e-4, 0.1), 2.5e-4, epsilon = 1e-18);
        assert_abs_diff_eq!(lr_lwsrd(999, total, 5e-4, 1e-4, 0.1), 5e-4 * (100.0f64 / 999.0).sqrt(), epsilon = 1e-18);
        assert_eq!(lr_lwsrd(2600, 3000, 5e-4, 1e-4, 0.1 / 3.0), 1e-4);
        assert_eq!(lr_lwsrd(10_000_000, 20_000_000, 5e-4, 1e-4, 1e-6), 1e-4);
    }

    #[test]
    fn step_decay_reference_points() {
        assert_eq!(lr_step_decay(0, 100, 5e-5, 1e-5, 4), 5e-5);
        assert_abs_diff_eq!(lr_step_decay(99, 100, 5e-5, 1e-5, 4), 1e-5, epsilon = 1e-20);
        let levels: Vec<f64> = [0, 20, 40, 60, 80].iter().map(|&e| lr_step_decay(e, 100, 5e-5, 1e-5, 4)).collect();
        for w in levels.windows(2) {
            assert_abs_diff_eq!(w[1] / w[0], 0.668_740_304_976_422, epsilon = 1e-12);
        }
        assert_eq!(lr_step_decay(19, 100, 5e-5, 1e-5, 4), 5e-5);
    }

    #[test]
    fn adam_ignores_zero_gradient() {
        let delta = RangeArray::new(8.0, 1.0).unwrap();
        let cfg = ModelConfig { d_model: 4, n_layers: 1, n_heads: 2, d_ff: 4, ..Default::default() };
        let mut m = init_model(&cfg, &delta, 1).unwrap();
        let before = m.clone();
        let mut opt = Adam::new(&m);
        let zeros: Vec<Vec<f64>> = m.params().iter().map(|t| vec![0.0; t.len()]).collect();
        opt.step(&mut m, &zeros, 1e-3);
        assert_eq!(m, before);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = vec![vec![3.0, 4.0], vec![0.0]];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert_abs_diff_eq!(g[0][0], 0.6, epsilon = 1e-15);
        let mut small = vec![vec![0.1]];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0][0], 0.1);
    }

    #[test]
    fn split_counts() {
        assert_eq!(split_sizes(1000, [0.75, 0.05, 0.2]).unwrap(), [750, 50, 200]);
        assert!(split_sizes(10, [0.5, 0.5, 0.5]).is_err());
        assert!(split_sizes(10, [1.2, -0.2, 0.0]).is_err());
        let [a, b, c] = split_indices(1000, [0.75, 0.05, 0.2], 3).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (750, 50, 200));
        let mut all: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
        all.sort();
        assert_eq!(all, (0..1000).collect::<Vec<_>>());
        assert_eq!(split_indices(1000, [0.75, 0.05, 0.2], 3).unwrap(), [a, b, c]);
    }

    #[test]
    fn batch_count_for_case_study_size() {
        assert_eq!(8881usize.div_ceil(4), 2221);
    }

    proptest! {
        #[test]
        fn split_sizes_within_one(n in 1usize..5000, a in 0.0..1.0f64, b in 0.0..1.0f64) {
            let (a, b) = if a + b > 1.0 { (a / (a + b), b / (a + b)) } else { (a, b) };
            let c = (1.0 - a - b).max(0.0);
            let sizes = split_sizes(n, [a, b, c]).unwrap();
            prop_assert_eq!(sizes.iter().sum::<usize>(), n);
            prop_assert!((sizes[0] as f64 - a * n as f64).abs() <= 1.0);
            prop_assert!((sizes[1] as f64 - b * n as f64).abs() <= 1.0);
            prop_assert!((sizes[2] as f64 - c * n as f64).abs() <= 1.0 + 1e-9);
        }

        #[test]
        fn lwsrd_stays_in_range(step in 0usize..10_000) {
            let lr = lr_lwsrd(step, 10_000, 5e-4, 1e-4, 0.1);
            prop_assert!(lr <= 5e-4);
            if step >= 1000 {
                prop_assert!(lr >= 1e-4);
            }
        }
    }
}
