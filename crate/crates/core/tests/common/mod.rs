//! Central finite-difference checks shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rem_core::autodiff::{Tape, Tensor, Var};
use rem_core::model::{EncoderModel, LossKind};
use rem_core::Result;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

/// Relative error with a floor on the scale so that gradients which are
/// zero up to rounding do not divide by zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

pub fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Builds `sum(w * op(inputs))` with fixed random weights `w`, so every
/// output element contributes to the checked gradient.
fn weighted<F>(inputs: &[Tensor], op: &F, weights_seed: u64) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = op(&mut tape, &vars)?;
    let shape = tape.value(out).shape();
    let mut rng = ChaCha8Rng::seed_from_u64(weights_seed);
    let w = tape.constant(random_tensor(shape[0], shape[1], &mut rng));
    let prod = tape.mul(out, w)?;
    let s = tape.sum(prod);
    Ok((tape, vars, s))
}

/// Worst relative error between backpropagated and central-difference
/// gradients over every input element.
pub fn op_gradient_error<F>(inputs: &[Tensor], op: F) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, s) = weighted(inputs, &op, 99).unwrap();
    tape.backward(s).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for i in 0..inputs[k].len() {
            let eval = |delta: f64| {
                let mut moved = inputs.to_vec();
                moved[k].data_mut()[i] += delta;
                let (t, _, s) = weighted(&moved, &op, 99).unwrap();
                t.value(s).data()[0]
            };
            let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    worst
}

/// Worst relative error of the encoder's parameter gradients for one example.
pub fn model_gradient_error(model: &EncoderModel, input: &Tensor, target: &[f64], mask: &[bool], loss: LossKind) -> f64 {
    let (_, grads) = model.loss_and_grads(input, target, mask, loss, None).unwrap();
    let mut worst = 0.0f64;
    let mut probe = model.clone();
    for (p, g) in grads.iter().enumerate() {
        for i in 0..g.len() {
            let orig = probe.params()[p].data()[i];
            let mut eval = |x: f64| {
                probe.params_mut()[p].data_mut()[i] = x;
                probe.loss_and_grads(input, target, mask, loss, None).unwrap().0
            };
            let numeric = (eval(orig + FD_STEP) - eval(orig - FD_STEP)) / (2.0 * FD_STEP);
            eval(orig);
            worst = worst.max(rel_err(g[i], numeric));
        }
    }
    worst
}

/// The tiny encoder from the gradient criterion: d_model 8, one layer, two
/// heads, sequence length 16, with every parameter jittered so that no
/// gradient is trivially zero. Returns the model and one example.
pub fn tiny_encoder_example(seed: u64) -> (EncoderModel, Tensor, Vec<f64>, Vec<bool>) {
    use rem_core::featurize::{build_features, sample_directions, visibility, FeatureStats, MaskSpec, TargetStats};
    use rem_core::geometry::RangeArray;
    use rem_core::model::{init_model, ModelConfig};

    let delta = RangeArray::new(16.0, 1.0).unwrap();
    let cfg = ModelConfig { d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, dropout: 0.0, ..Default::default() };
    let mut m = init_model(&cfg, &delta, seed).unwrap();
    let dirs = sample_directions(8, 1.6, seed);
    let seqs: Vec<_> = dirs.iter().map(|d| build_features(*d, &delta)).collect();
    m.feature_stats = FeatureStats::fit(&seqs).unwrap();
    m.target_stats = TargetStats { mean: -60.0, std: 8.0 };
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in m.params_mut() {
        for x in p.data_mut() {
            *x += r.random_range(-0.3..0.3);
        }
    }
    let vis = visibility(16, &MaskSpec::RandomPositions { mask_ratio: 0.5, seed }).unwrap();
    let input = m.prepare_input(&seqs[0], &vis).unwrap();
    let target: Vec<f64> = (0..16).map(|_| -60.0 + 8.0 * r.random_range(-1.0..1.0)).collect();
    (m, input, target, vec![true; 16])
}
