use super::TrainError;
use crate::model::{Gradients, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// First and second moment estimates, one pair per trainable tensor.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl<T: Scalar> AdamState<T> {
    /// Zero moments for tensors of the given shapes.
    pub fn new(shapes: &[[usize; 4]]) -> Self {
        AdamState {
            m: shapes.iter().map(|&s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|&s| Tensor::zeros(s)).collect(),
            t: 0,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
        }
    }

    /// State mirroring the trainable entries of `params`, in store order.
    pub fn for_params(params: &ParamStore<T>) -> Self {
        let shapes: Vec<_> = params
            .iter()
            .filter(|e| e.kind.is_trainable())
            .map(|e| e.tensor.shape())
            .collect();
        Self::new(&shapes)
    }

    /// One bias-corrected Adam update of `params` with `grads`, element-wise
    /// in f64.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<T>],
        grads: &[&Tensor<T>],
        lr: f64,
    ) -> Result<(), TrainError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TrainError::MisalignedGradients(format!(
                "{} parameters and {} gradients for {} moment slots",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.shape() != self.m[i].shape() {
                return Err(TrainError::MisalignedGradients(format!(
                    "slot {i}: parameter {:?}, gradient {:?}, moments {:?}",
                    p.shape(),
                    g.shape(),
                    self.m[i].shape()
                )));
            }
        }
        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let c1 = 1.0 - b1.powf(self.t as f64);
        let c2 = 1.0 - b2.powf(self.t as f64);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((theta, &gk), mk), vk) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gk = gk.as_f64();
                let m_new = b1 * mk.as_f64() + (1.0 - b1) * gk;
                let v_new = b2 * vk.as_f64() + (1.0 - b2) * gk * gk;
                *mk = T::of(m_new);
                *vk = T::of(v_new);
                if lr != 0.0 {
                    let update = lr * (m_new / c1) / ((v_new / c2).sqrt() + eps);
                    *theta = T::of(theta.as_f64() - update);
                }
            }
        }
        Ok(())
    }
}

/// Apply one Adam step to every trainable entry of `params`. `grads` must
/// hold a gradient exactly for the trainable entries.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut AdamState<T>,
    lr: f64,
) -> Result<(), TrainError> {
    if grads.per_param.len() != params.len() {
        return Err(TrainError::MisalignedGradients(format!(
            "{} gradient slots for {} parameters",
            grads.per_param.len(),
            params.len()
        )));
    }
    let mut ps = Vec::new();
    let mut gs = Vec::new();
    for (entry, g) in params.iter_mut().zip(&grads.per_param) {
        match (entry.kind.is_trainable(), g) {
            (true, Some(g)) => {
                ps.push(&mut entry.tensor);
                gs.push(g);
            }
            (false, None) => {}
            (true, None) => {
                return Err(TrainError::MisalignedGradients(format!(
                    "missing gradient for `{}`",
                    entry.name
                )))
            }
            (false, Some(_)) => {
                return Err(TrainError::MisalignedGradients(format!(
                    "unexpected gradient for state `{}`",
                    entry.name
                )))
            }
        }
    }
    state.step(&mut ps, &gs, lr)
}
