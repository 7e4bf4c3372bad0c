use super::TrainError;
use crate::tensor::{Scalar, Tensor, TensorError};

/// Mean squared error over every element and its gradient `2 (ŷ - y) / N`.
/// The sum is accumulated in f64.
pub fn mse_loss<T: Scalar>(y_hat: &Tensor<T>, y: &Tensor<T>) -> Result<(f64, Tensor<T>), TrainError> {
    if y_hat.shape() != y.shape() {
        return Err(TensorError::ShapeMismatch {
            left: y_hat.shape(),
            right: y.shape(),
        }
        .into());
    }
    let n = y.len().max(1) as f64;
    let scale = T::of(2.0 / n);
    let mut sum = 0.0f64;
    let grad: Vec<T> = y_hat
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = a - b;
            sum += d.as_f64() * d.as_f64();
            d * scale
        })
        .collect();
    Ok((sum / n, Tensor::from_vec(y.shape(), grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_inputs() {
        let y = Tensor::from_fn([2, 1, 3, 3], |[b, _, r, c]| (b + r * c) as f64);
        let (loss, g) = mse_loss(&y, &y).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_offset() {
        let y = Tensor::from_fn([1, 1, 4, 5], |[_, _, r, c]| (r + c) as f64 * 0.1);
        let y_hat = y.map(|v| v + 0.25);
        let (loss, g) = mse_loss(&y_hat, &y).unwrap();
        assert!((loss - 0.0625).abs() < 1e-15);
        assert!(g.data().iter().all(|&v| (v - 0.5 / 20.0).abs() < 1e-15));
    }

    #[test]
    fn mismatch() {
        let a = Tensor::<f32>::zeros([1, 1, 2, 2]);
        let b = Tensor::<f32>::zeros([1, 1, 2, 3]);
        assert!(mse_loss(&a, &b).is_err());
    }
}
