use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{mse_loss, TrainError};
use crate::model::{build_flashlight, initialize, ArchConfig, Mode, ModelGraph, Op};
use crate::tensor::{DType, Scalar, Tensor};

/// Minimum number of sampled parameter elements.
pub const GRADCHECK_SAMPLES: usize = 256;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max of `|a - n| / max(|a|, |n|, 1e-12)` over the sampled elements.
    pub max_rel_error: f64,
    /// Same ratio with the denominator floored at 1e-3 times the RMS of the
    /// checked analytic gradients. Elements whose gradient is orders of
    /// magnitude below typical are dominated by cancellation error in single
    /// precision; this figure measures error at the scale of the gradient
    /// vector instead.
    pub max_scaled_error: f64,
    /// Parameter name and flat index where `max_rel_error` occurred.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst element.
    pub worst_pair: (f64, f64),
    pub checked: usize,
    /// Draws rejected because the perturbation crossed a ReLU kink.
    pub kink_skips: usize,
    /// Shifts removed by a later batch norm have an identically zero
    /// gradient, so relative error is meaningless there. They are excluded
    /// from sampling; this is their largest analytic magnitude.
    pub max_abs_shift_invariant_grad: f64,
}

/// Whether every path from node `i` reaches a train-mode batch norm through
/// additions only, so a per-channel constant added at `i` is normalized away.
fn normalized_away<T: Scalar>(g: &ModelGraph<T>, i: usize) -> bool {
    let nodes = g.nodes();
    let mut consumers = nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| n.inputs.iter().any(|x| x.0 == i))
        .peekable();
    consumers.peek().is_some()
        && consumers.all(|(j, n)| match n.op {
            Op::BatchNorm { .. } => true,
            Op::Add => normalized_away(g, j),
            _ => false,
        })
}

/// Conv biases and batch-norm shifts whose gradient is identically zero in
/// train mode because a later batch norm removes per-channel constants.
pub fn shift_invariant_params<T: Scalar>(g: &ModelGraph<T>) -> Vec<usize> {
    g.nodes()
        .iter()
        .enumerate()
        .filter_map(|(i, node)| match node.op {
            Op::Conv { bias, .. } => Some((i, bias)),
            Op::BatchNorm { beta, .. } => Some((i, beta)),
            _ => None,
        })
        .filter(|&(i, _)| normalized_away(g, i))
        .map(|(_, p)| p)
        .collect()
}

/// Loss and ReLU pattern of a train-mode forward.
fn probe(g: &mut ModelGraph<f64>, z: &Tensor<f64>, y: &Tensor<f64>) -> Result<(f64, u64), TrainError> {
    let (out, cache) = g.forward(z, Mode::Train)?;
    Ok((mse_loss(&out, y)?.0, g.relu_pattern(&cache)))
}

/// Compare the backward pass of `g` on MSE(g(z), y) against central
/// differences with step `eps` on `samples` randomly chosen trainable
/// elements.
///
/// Differences are taken in f64 on a widened copy of the parameters, so an
/// f32 model is checked against a reference that resolves steps its own
/// arithmetic cannot. Elements whose perturbation flips any ReLU are
/// replaced by fresh draws (the loss is not differentiable across the kink),
/// as are [`shift_invariant_params`].
pub fn check_graph_gradients<T: Scalar, R: Rng + ?Sized>(
    g: &mut ModelGraph<T>,
    z: &Tensor<T>,
    y: &Tensor<T>,
    eps: f64,
    samples: usize,
    rng: &mut R,
) -> Result<GradCheckReport, TrainError> {
    let (out, cache) = g.forward(z, Mode::Train)?;
    let (_, grad_out) = mse_loss(&out, y)?;
    let grads = g.backward(&cache, &grad_out)?;
    drop(cache);

    let skipped = shift_invariant_params(g);
    let mut max_abs_shift_invariant_grad = 0.0f64;
    for &b in &skipped {
        if let Some(t) = grads.get(b) {
            max_abs_shift_invariant_grad = max_abs_shift_invariant_grad.max(t.max_abs());
        }
    }

    let mut reference = g.cast::<f64>();
    let (z, y) = (z.cast::<f64>(), y.cast::<f64>());
    let (_, base_pattern) = probe(&mut reference, &z, &y)?;

    // Flat address space over the eligible trainable elements, visited in a
    // random order.
    let mut pool: Vec<(usize, usize)> = Vec::new();
    for (idx, entry) in reference.params().iter().enumerate() {
        if entry.kind.is_trainable() && !skipped.contains(&idx) {
            pool.extend((0..entry.tensor.len()).map(|k| (idx, k)));
        }
    }
    let order = index::sample(rng, pool.len(), pool.len());
    let mut pairs = Vec::with_capacity(samples);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_scaled_error: 0.0,
        worst: None,
        worst_pair: (0.0, 0.0),
        checked: 0,
        kink_skips: 0,
        max_abs_shift_invariant_grad,
    };
    for i in order {
        if report.checked == samples {
            break;
        }
        let (idx, k) = pool[i];
        let analytic = grads.get(idx).expect("trainable entries have gradients").data()[k].as_f64();
        let original = reference.params().tensor(idx).data()[k];
        reference.params_mut().tensor_mut(idx).data_mut()[k] = original + eps;
        let (plus, p_pattern) = probe(&mut reference, &z, &y)?;
        reference.params_mut().tensor_mut(idx).data_mut()[k] = original - eps;
        let (minus, m_pattern) = probe(&mut reference, &z, &y)?;
        reference.params_mut().tensor_mut(idx).data_mut()[k] = original;
        if p_pattern != base_pattern || m_pattern != base_pattern {
            report.kink_skips += 1;
            continue;
        }
        let numeric = (plus - minus) / (2.0 * eps);
        pairs.push((analytic, numeric));
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12);
        if report.worst.is_none() || rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = Some((reference.params().entry(idx).name.clone(), k));
            report.worst_pair = (analytic, numeric);
        }
        report.checked += 1;
    }
    let rms = (pairs.iter().map(|(a, _)| a * a).sum::<f64>() / pairs.len().max(1) as f64).sqrt();
    let floor = (1e-3 * rms).max(1e-12);
    report.max_scaled_error = pairs
        .iter()
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max);
    Ok(report)
}

fn run<T: Scalar>(arch: ArchConfig, (h, w): (usize, usize), eps: f64, seed: u64) -> Result<GradCheckReport, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = build_flashlight::<T>(arch);
    initialize(&mut g, &mut rng);
    let z = Tensor::from_fn([2, 1, h, w], |_| T::of(rng.random::<f64>()));
    let y = Tensor::from_fn([2, 1, h, w], |_| T::of(rng.random::<f64>()));
    check_graph_gradients(&mut g, &z, &y, eps, GRADCHECK_SAMPLES, &mut rng)
}

/// Gradient check of a freshly initialized FlashLight network on a random
/// batch of two `h x w` inputs with a random target.
pub fn gradient_check(
    arch: ArchConfig,
    input_size: (usize, usize),
    eps: f64,
    dtype: DType,
    seed: u64,
) -> Result<GradCheckReport, TrainError> {
    match dtype {
        DType::F32 => run::<f32>(arch, input_size, eps, seed),
        DType::F64 => run::<f64>(arch, input_size, eps, seed),
    }
}
