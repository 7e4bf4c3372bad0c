use rand::Rng;
use rand_distr::StandardNormal;

use super::TrainError;
use crate::tensor::{Scalar, Tensor};

/// `clean + g` with `g ~ N(0, (sigma_255 / 255)^2)` drawn element by element
/// in storage order. The result is not clipped.
pub fn add_awgn<T: Scalar, R: Rng + ?Sized>(
    clean: &Tensor<T>,
    sigma_255: f64,
    rng: &mut R,
) -> Result<Tensor<T>, TrainError> {
    if !(sigma_255 >= 0.0) {
        return Err(TrainError::NegativeSigma(sigma_255));
    }
    if sigma_255 == 0.0 {
        return Ok(clean.clone());
    }
    let std = sigma_255 / 255.0;
    let data = clean
        .data()
        .iter()
        .map(|v| {
            let g: f64 = rng.sample(StandardNormal);
            T::of(v.as_f64() + std * g)
        })
        .collect();
    Ok(Tensor::from_vec(clean.shape(), data)?)
}
