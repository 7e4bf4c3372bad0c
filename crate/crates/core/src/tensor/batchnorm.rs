use super::{check_finite, Result, Scalar, Tensor, TensorError};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Infer,
}

/// Per-channel affine parameters and running statistics of a batch norm.
///
/// The caller owns this value; a train-mode forward updates the running
/// statistics in place.
#[derive(Debug, Clone, PartialEq)]
pub struct BnParams<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Option<Vec<T>>,
    pub running_var: Option<Vec<T>>,
    pub momentum: f64,
    pub epsilon: f64,
}

impl<T: Scalar> BnParams<T> {
    /// gamma = 1, beta = 0, running mean 0 and variance 1.
    pub fn new(channels: usize) -> Self {
        BnParams {
            gamma: vec![T::one(); channels],
            beta: vec![T::zero(); channels],
            running_mean: Some(vec![T::zero(); channels]),
            running_var: Some(vec![T::one(); channels]),
            momentum: DEFAULT_MOMENTUM,
            epsilon: DEFAULT_EPSILON,
        }
    }

    /// Like [`BnParams::new`] but with no running statistics yet.
    pub fn uninitialized(channels: usize) -> Self {
        BnParams {
            running_mean: None,
            running_var: None,
            ..Self::new(channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    fn validate(&self) -> Result<()> {
        let c = self.gamma.len();
        let running_ok = |v: &Option<Vec<T>>| v.as_ref().is_none_or(|v| v.len() == c);
        if self.beta.len() != c || !running_ok(&self.running_mean) || !running_ok(&self.running_var)
        {
            return Err(TensorError::InvalidParams(
                "batch norm vectors differ in length".into(),
            ));
        }
        if !(self.momentum > 0.0 && self.momentum < 1.0) || !(self.epsilon > 0.0) {
            return Err(TensorError::InvalidParams(format!(
                "batch norm momentum {} / epsilon {} out of range",
                self.momentum, self.epsilon
            )));
        }
        Ok(())
    }
}

/// State kept by a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub enum BnCache<T> {
    Train {
        normalized: Tensor<T>,
        inv_std: Vec<f64>,
        gamma: Vec<T>,
    },
    Infer,
}

/// Per-channel `gamma * (x - mean) / sqrt(var + eps) + beta`.
pub fn batchnorm_forward<T: Scalar>(
    input: &Tensor<T>,
    p: &mut BnParams<T>,
    mode: BnMode,
) -> Result<(Tensor<T>, BnCache<T>)> {
    p.validate()?;
    let [n, c, h, w] = input.shape();
    if c != p.channels() {
        return Err(TensorError::ChannelMismatch {
            expected: p.channels(),
            found: c,
        });
    }
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut out = Tensor::zeros(input.shape());

    let (mean, var) = match mode {
        BnMode::Infer => {
            let (Some(rm), Some(rv)) = (&p.running_mean, &p.running_var) else {
                return Err(TensorError::UninitializedRunningStats);
            };
            (
                rm.iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
                rv.iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
            )
        }
        BnMode::Train => {
            if count == 0.0 {
                return Err(TensorError::EmptySpatial { h, w });
            }
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    s += channel(input, b, ch).iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mu = s / count;
                let mut ss = 0.0;
                for b in 0..n {
                    ss += channel(input, b, ch)
                        .iter()
                        .map(|v| {
                            let d = v.as_f64() - mu;
                            d * d
                        })
                        .sum::<f64>();
                }
                mean[ch] = mu;
                var[ch] = ss / count;
            }
            (mean, var)
        }
    };

    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + p.epsilon).sqrt()).collect();
    let mut normalized = match mode {
        BnMode::Train => Some(Tensor::zeros(input.shape())),
        BnMode::Infer => None,
    };
    for b in 0..n {
        for ch in 0..c {
            let (mu, is) = (mean[ch], inv_std[ch]);
            let (g, be) = (p.gamma[ch].as_f64(), p.beta[ch].as_f64());
            let base = (b * c + ch) * plane;
            let src = &input.data()[base..base + plane];
            let dst = &mut out.data_mut()[base..base + plane];
            match normalized.as_mut() {
                Some(xhat) => {
                    let xh = &mut xhat.data_mut()[base..base + plane];
                    for ((o, h), &x) in dst.iter_mut().zip(xh.iter_mut()).zip(src) {
                        let v = (x.as_f64() - mu) * is;
                        *h = T::of(v);
                        *o = T::of(g * v + be);
                    }
                }
                None => {
                    for (o, &x) in dst.iter_mut().zip(src) {
                        *o = T::of(g * (x.as_f64() - mu) * is + be);
                    }
                }
            }
        }
    }
    check_finite("batchnorm_forward", out.data())?;

    match normalized {
        Some(normalized) => {
            let m = p.momentum;
            let rm = p.running_mean.get_or_insert_with(|| vec![T::zero(); c]);
            for (r, &bm) in rm.iter_mut().zip(&mean) {
                *r = T::of((1.0 - m) * r.as_f64() + m * bm);
            }
            let rv = p.running_var.get_or_insert_with(|| vec![T::one(); c]);
            for (r, &bv) in rv.iter_mut().zip(&var) {
                *r = T::of((1.0 - m) * r.as_f64() + m * bv);
            }
            Ok((
                out,
                BnCache::Train {
                    normalized,
                    inv_std,
                    gamma: p.gamma.clone(),
                },
            ))
        }
        None => Ok((out, BnCache::Infer)),
    }
}

/// Gradients of the train-mode map, including the dependence of the batch
/// mean and variance on the input. Returns `(grad_input, grad_gamma, grad_beta)`.
pub fn batchnorm_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    cache: &BnCache<T>,
) -> Result<(Tensor<T>, Vec<T>, Vec<T>)> {
    let BnCache::Train {
        normalized,
        inv_std,
        gamma,
    } = cache
    else {
        return Err(TensorError::InferenceCache);
    };
    if grad_out.shape() != normalized.shape() {
        return Err(TensorError::ShapeMismatch {
            left: grad_out.shape(),
            right: normalized.shape(),
        });
    }
    let [n, c, h, w] = grad_out.shape();
    let plane = h * w;
    let count = (n * plane) as f64;
    let mut grad_in = Tensor::zeros(grad_out.shape());
    let mut grad_gamma = Vec::with_capacity(c);
    let mut grad_beta = Vec::with_capacity(c);

    for ch in 0..c {
        let mut sum_g = 0.0;
        let mut sum_gx = 0.0;
        for b in 0..n {
            for (&g, &xh) in channel(grad_out, b, ch).iter().zip(channel(normalized, b, ch)) {
                sum_g += g.as_f64();
                sum_gx += g.as_f64() * xh.as_f64();
            }
        }
        grad_gamma.push(T::of(sum_gx));
        grad_beta.push(T::of(sum_g));

        let scale = gamma[ch].as_f64() * inv_std[ch] / count;
        for b in 0..n {
            let base = (b * c + ch) * plane;
            let gy = &grad_out.data()[base..base + plane];
            let xh = &normalized.data()[base..base + plane];
            let dst = &mut grad_in.data_mut()[base..base + plane];
            for ((d, &g), &x) in dst.iter_mut().zip(gy).zip(xh) {
                *d = T::of(scale * (count * g.as_f64() - sum_g - x.as_f64() * sum_gx));
            }
        }
    }
    check_finite("batchnorm_backward", grad_in.data())?;
    Ok((grad_in, grad_gamma, grad_beta))
}

fn channel<T: Scalar>(t: &Tensor<T>, b: usize, ch: usize) -> &[T] {
    let plane = t.h() * t.w();
    let base = (b * t.c() + ch) * plane;
    &t.data()[base..base + plane]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let x = Tensor::<f64>::full([2, 1, 3, 3], 7.0);
        let mut p = BnParams::new(1);
        let (out, _) = batchnorm_forward(&x, &mut p, BnMode::Train).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_point_channel() {
        let x = Tensor::from_vec([1, 1, 1, 4], vec![-1.0f64, 1.0, -1.0, 1.0]).unwrap();
        let mut p = BnParams::new(1);
        p.gamma = vec![2.0];
        p.beta = vec![3.0];
        let (out, _) = batchnorm_forward(&x, &mut p, BnMode::Train).unwrap();
        let s = 1.0 / (1.0 + DEFAULT_EPSILON).sqrt();
        let expect = [3.0 - 2.0 * s, 3.0 + 2.0 * s, 3.0 - 2.0 * s, 3.0 + 2.0 * s];
        for (o, e) in out.data().iter().zip(expect) {
            assert!((o - e).abs() < 1e-12);
        }
        assert!((out.data()[0] - 1.0).abs() < 1e-4 && (out.data()[1] - 5.0).abs() < 1e-4);
        // Running stats moved 10% of the way to (0, 1): mean stays 0, var stays 1.
        assert_eq!(p.running_mean.as_deref(), Some(&[0.0][..]));
        assert!((p.running_var.as_ref().unwrap()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn running_stats_update() {
        let x = Tensor::from_vec([1, 1, 1, 2], vec![4.0f64, 6.0]).unwrap();
        let mut p = BnParams::new(1);
        batchnorm_forward(&x, &mut p, BnMode::Train).unwrap();
        // batch mean 5, biased var 1
        assert!((p.running_mean.as_ref().unwrap()[0] - 0.5).abs() < 1e-15);
        assert!((p.running_var.as_ref().unwrap()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identity_statistics_in_infer_mode() {
        let x = Tensor::from_fn([2, 3, 4, 4], |[b, c, y, x]| {
            // |x| < 0.2 keeps the 1/sqrt(1 + eps) scaling error below 1e-6
            (b as f64 - 0.5) * 0.1 + c as f64 * 0.03 - (y * x) as f64 * 0.01
        });
        let mut p = BnParams::new(3);
        let (out, cache) = batchnorm_forward(&x, &mut p, BnMode::Infer).unwrap();
        for (o, i) in out.data().iter().zip(x.data()) {
            assert!((o - i).abs() < 1e-6);
        }
        assert!(matches!(cache, BnCache::Infer));
        assert_eq!(
            batchnorm_backward(&out, &cache).unwrap_err(),
            TensorError::InferenceCache
        );
    }

    #[test]
    fn errors() {
        let x = Tensor::<f32>::zeros([1, 2, 2, 2]);
        let mut p = BnParams::new(3);
        assert!(matches!(
            batchnorm_forward(&x, &mut p, BnMode::Train),
            Err(TensorError::ChannelMismatch { expected: 3, found: 2 })
        ));
        let mut p = BnParams::uninitialized(2);
        assert_eq!(
            batchnorm_forward(&x, &mut p, BnMode::Infer).unwrap_err(),
            TensorError::UninitializedRunningStats
        );
        // Train mode initializes missing running stats.
        batchnorm_forward(&x, &mut p, BnMode::Train).unwrap();
        assert!(p.running_mean.is_some() && p.running_var.is_some());
    }

    #[test]
    fn zero_and_beta_gradients() {
        let x = Tensor::from_fn([2, 2, 3, 3], |[b, c, y, x]| ((b * 7 + c * 5 + y * 3 + x) % 4) as f64);
        let mut p = BnParams::new(2);
        let (_, cache) = batchnorm_forward(&x, &mut p, BnMode::Train).unwrap();
        let (gi, gg, gb) = batchnorm_backward(&Tensor::zeros(x.shape()), &cache).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gg.iter().chain(&gb).all(|&v| v == 0.0));

        let gy = Tensor::from_fn(x.shape(), |[b, c, y, x]| (b + c) as f64 * 0.5 - (y + x) as f64);
        let (_, _, gb) = batchnorm_backward(&gy, &cache).unwrap();
        for ch in 0..2 {
            let mut s = 0.0;
            for b in 0..2 {
                for y in 0..3 {
                    for xx in 0..3 {
                        s += gy.at([b, ch, y, xx]);
                    }
                }
            }
            assert!((gb[ch] - s).abs() < 1e-12);
        }
    }
}
