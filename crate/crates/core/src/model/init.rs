use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use super::graph::ModelGraph;
use super::params::ParamKind;
use crate::tensor::{Scalar, Tensor};

/// Orthogonal initialization with unit gain.
///
/// The weight is viewed as a `(c_out, c_in * k * k)` matrix filled with
/// standard normals and orthogonalized by QR, with column signs fixed by the
/// diagonal of R. Rows come out orthonormal when `c_out <= c_in * k * k`,
/// columns otherwise.
pub fn orthogonal_init<T: Scalar, R: Rng + ?Sized>(shape: [usize; 4], rng: &mut R) -> Tensor<T> {
    let rows = shape[0];
    let cols = shape[1] * shape[2] * shape[3];
    if rows == 0 || cols == 0 {
        return Tensor::zeros(shape);
    }
    let flat: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    let mut a = DMatrix::from_row_slice(rows, cols, &flat);
    let wide = rows < cols;
    if wide {
        a = a.transpose();
    }
    // a is tall (or square): QR gives Q with orthonormal columns.
    let qr = a.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..q.ncols() {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if wide {
        q = q.transpose();
    }
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            data.push(T::of(q[(i, j)]));
        }
    }
    Tensor::from_vec(shape, data).expect("orthogonal matrix matches the weight shape")
}

/// Reset every parameter: orthogonal conv weights drawn from `rng` in store
/// order, zero biases, unit gamma, zero beta, running mean 0 and variance 1.
pub fn initialize<T: Scalar, R: Rng + ?Sized>(graph: &mut ModelGraph<T>, rng: &mut R) {
    for entry in graph.params_mut().iter_mut() {
        let shape = entry.tensor.shape();
        entry.tensor = match entry.kind {
            ParamKind::Weight => orthogonal_init(shape, rng),
            ParamKind::Bias | ParamKind::BnBeta | ParamKind::BnRunningMean => Tensor::zeros(shape),
            ParamKind::BnGamma | ParamKind::BnRunningVar => Tensor::full(shape, T::one()),
        };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gram(t: &Tensor<f64>, rows_major: bool) -> DMatrix<f64> {
        let r = t.shape()[0];
        let c = t.len() / r;
        let m = DMatrix::from_row_slice(r, c, t.data());
        if rows_major {
            &m * m.transpose()
        } else {
            m.transpose() * &m
        }
    }

    fn assert_identity(g: &DMatrix<f64>) {
        let id = DMatrix::<f64>::identity(g.nrows(), g.ncols());
        assert!((g - id).abs().max() < 1e-5);
    }

    #[test]
    fn square_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w: Tensor<f64> = orthogonal_init([4, 4, 1, 1], &mut rng);
        assert_identity(&gram(&w, false));
        assert_identity(&gram(&w, true));
    }

    #[test]
    fn wide_has_orthonormal_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w: Tensor<f64> = orthogonal_init([32, 64, 1, 1], &mut rng);
        assert_identity(&gram(&w, true));
        let w: Tensor<f64> = orthogonal_init([64, 64, 5, 5], &mut rng);
        assert_identity(&gram(&w, true));
    }

    #[test]
    fn tall_has_orthonormal_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Tensor<f64> = orthogonal_init([64, 1, 3, 3], &mut rng);
        assert_identity(&gram(&w, false));
    }

    #[test]
    fn seeded_determinism() {
        let a: Tensor<f32> = orthogonal_init([8, 3, 3, 3], &mut ChaCha8Rng::seed_from_u64(7));
        let b: Tensor<f32> = orthogonal_init([8, 3, 3, 3], &mut ChaCha8Rng::seed_from_u64(7));
        let c: Tensor<f32> = orthogonal_init([8, 3, 3, 3], &mut ChaCha8Rng::seed_from_u64(8));
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }
}
