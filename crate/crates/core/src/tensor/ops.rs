use super::{check_finite, ensure_same_shape, Result, Scalar, Tensor, TensorError};

pub fn relu_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes `grad_out` where `input > 0`; the subgradient at zero is zero.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_same_shape(grad_out.shape(), input.shape())?;
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(grad_out.shape(), data)
}

/// Stack tensors along the channel axis in list order.
pub fn concat_channels<T: Scalar>(inputs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = inputs.first().ok_or(TensorError::EmptyConcat)?;
    let [n, _, h, w] = first.shape();
    for t in inputs {
        let [tn, _, th, tw] = t.shape();
        if (tn, th, tw) != (n, h, w) {
            return Err(TensorError::ShapeMismatch {
                left: first.shape(),
                right: t.shape(),
            });
        }
    }
    let c_total: usize = inputs.iter().map(|t| t.c()).sum();
    let mut data = Vec::with_capacity(n * c_total * h * w);
    for b in 0..n {
        for t in inputs {
            data.extend_from_slice(t.sample(b));
        }
    }
    Tensor::from_vec([n, c_total, h, w], data)
}

/// Slice a channel-concatenated cotangent back into per-input pieces.
pub fn concat_backward<T: Scalar>(grad_out: &Tensor<T>, splits: &[usize]) -> Result<Vec<Tensor<T>>> {
    let [n, c, h, w] = grad_out.shape();
    if splits.iter().sum::<usize>() != c {
        return Err(TensorError::ChannelMismatch {
            expected: splits.iter().sum(),
            found: c,
        });
    }
    let plane = h * w;
    let mut parts: Vec<Vec<T>> = splits.iter().map(|&s| Vec::with_capacity(n * s * plane)).collect();
    for b in 0..n {
        let sample = grad_out.sample(b);
        let mut offset = 0;
        for (part, &s) in parts.iter_mut().zip(splits) {
            part.extend_from_slice(&sample[offset * plane..(offset + s) * plane]);
            offset += s;
        }
    }
    parts
        .into_iter()
        .zip(splits)
        .map(|(data, &s)| Tensor::from_vec([n, s, h, w], data))
        .collect()
}

pub fn elementwise_add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    ensure_same_shape(a.shape(), b.shape())?;
    let data: Vec<T> = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    check_finite("elementwise_add", &data)?;
    Tensor::from_vec(a.shape(), data)
}

/// The cotangent of `a + b` flows unchanged to both operands.
pub fn add_backward<T: Scalar>(grad_out: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (grad_out.clone(), grad_out.clone())
}
