//! Declarative network graphs and their forward/backward executors.

use std::sync::atomic::{AtomicU64, Ordering};

use super::params::{ParamKind, ParamStore};
use super::{Architecture, ModelError};
use crate::tensor::{
    batchnorm_backward, batchnorm_forward, concat_backward, concat_channels, conv2d_backward,
    conv2d_forward, elementwise_add, relu_backward, relu_forward, BnCache, BnMode, BnParams,
    ConvParams, Scalar, Tensor, DEFAULT_EPSILON, DEFAULT_MOMENTUM,
};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

/// Primitive operation of a node. Parameter fields index the [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Op {
    Input,
    Conv {
        weight: usize,
        bias: usize,
        kernel: usize,
    },
    BatchNorm {
        gamma: usize,
        beta: usize,
        running_mean: usize,
        running_var: usize,
    },
    Relu,
    Concat,
    Add,
    /// `inputs[0] - inputs[1]`: the global residual `z - f(z)`.
    SubtractFromInput,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub channels: usize,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// Incrementally builds a topologically ordered graph; every edge can only
/// reference an already created node.
#[derive(Debug)]
pub struct GraphBuilder<T> {
    nodes: Vec<Node>,
    params: ParamStore<T>,
}

impl<T: Scalar> Default for GraphBuilder<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GraphBuilder<T> {
    pub fn new() -> Self {
        GraphBuilder {
            nodes: Vec::new(),
            params: ParamStore::new(),
        }
    }

    pub fn channels_of(&self, id: NodeId) -> Result<usize, ModelError> {
        self.nodes
            .get(id.0)
            .map(|n| n.channels)
            .ok_or_else(|| ModelError::InvalidGraph(format!("unknown node {}", id.0)))
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, channels: usize, label: String) -> NodeId {
        self.nodes.push(Node {
            op,
            inputs,
            channels,
            label,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, channels: usize) -> Result<NodeId, ModelError> {
        if !self.nodes.is_empty() {
            return Err(ModelError::InvalidGraph(
                "the input must be the first node".into(),
            ));
        }
        Ok(self.push(Op::Input, vec![], channels, "input".into()))
    }

    /// Same-padded `k x k` convolution with bias; parameters are
    /// `{prefix}.weight` and `{prefix}.bias`.
    pub fn conv(
        &mut self,
        prefix: &str,
        x: NodeId,
        out_channels: usize,
        kernel: usize,
    ) -> Result<NodeId, ModelError> {
        let c_in = self.channels_of(x)?;
        let weight = self.params.push(
            format!("{prefix}.weight"),
            ParamKind::Weight,
            Tensor::zeros([out_channels, c_in, kernel, kernel]),
        )?;
        let bias = self.params.push(
            format!("{prefix}.bias"),
            ParamKind::Bias,
            Tensor::vector(vec![T::zero(); out_channels]),
        )?;
        Ok(self.push(
            Op::Conv {
                weight,
                bias,
                kernel,
            },
            vec![x],
            out_channels,
            prefix.to_string(),
        ))
    }

    pub fn batch_norm(&mut self, prefix: &str, x: NodeId) -> Result<NodeId, ModelError> {
        let c = self.channels_of(x)?;
        let mut add = |suffix: &str, kind, value: T| {
            self.params.push(
                format!("{prefix}.{suffix}"),
                kind,
                Tensor::vector(vec![value; c]),
            )
        };
        let gamma = add("gamma", ParamKind::BnGamma, T::one())?;
        let beta = add("beta", ParamKind::BnBeta, T::zero())?;
        let running_mean = add("running_mean", ParamKind::BnRunningMean, T::zero())?;
        let running_var = add("running_var", ParamKind::BnRunningVar, T::one())?;
        Ok(self.push(
            Op::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            },
            vec![x],
            c,
            prefix.to_string(),
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, ModelError> {
        let c = self.channels_of(x)?;
        Ok(self.push(Op::Relu, vec![x], c, "relu".into()))
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId, ModelError> {
        if xs.is_empty() {
            return Err(ModelError::InvalidGraph("empty concat".into()));
        }
        let c = xs
            .iter()
            .map(|&x| self.channels_of(x))
            .sum::<Result<usize, _>>()?;
        Ok(self.push(Op::Concat, xs.to_vec(), c, "concat".into()))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, ModelError> {
        let (ca, cb) = (self.channels_of(a)?, self.channels_of(b)?);
        if ca != cb {
            return Err(ModelError::InvalidGraph(format!(
                "add of {ca} and {cb} channels"
            )));
        }
        Ok(self.push(Op::Add, vec![a, b], ca, "add".into()))
    }

    /// Global residual node `z - f`, where `z` is the graph input.
    pub fn subtract_from_input(&mut self, f: NodeId) -> Result<NodeId, ModelError> {
        let z = NodeId(0);
        if self.nodes.first().map(|n| &n.op) != Some(&Op::Input) {
            return Err(ModelError::InvalidGraph("graph has no input node".into()));
        }
        let (cz, cf) = (self.channels_of(z)?, self.channels_of(f)?);
        if cz != cf {
            return Err(ModelError::InvalidGraph(format!(
                "residual path emits {cf} channels for a {cz}-channel input"
            )));
        }
        Ok(self.push(Op::SubtractFromInput, vec![z, f], cz, "residual".into()))
    }

    /// Finish a denoiser graph. The last node must be the single global
    /// residual subtraction.
    pub fn finish(self, arch: Architecture) -> Result<ModelGraph<T>, ModelError> {
        let residuals = self
            .nodes
            .iter()
            .filter(|n| n.op == Op::SubtractFromInput)
            .count();
        if residuals != 1 || self.nodes.last().map(|n| &n.op) != Some(&Op::SubtractFromInput) {
            return Err(ModelError::InvalidGraph(
                "a denoiser graph must end in exactly one global residual node".into(),
            ));
        }
        let output = NodeId(self.nodes.len() - 1);
        self.finish_with_output(arch, output)
    }

    /// Finish a graph whose result is `output`, without requiring the global
    /// residual (used for sub-networks such as a lone inception layer).
    pub fn finish_with_output(
        self,
        arch: Architecture,
        output: NodeId,
    ) -> Result<ModelGraph<T>, ModelError> {
        if self.nodes.first().map(|n| &n.op) != Some(&Op::Input) {
            return Err(ModelError::InvalidGraph("graph has no input node".into()));
        }
        if output.0 >= self.nodes.len() {
            return Err(ModelError::InvalidGraph("output node out of range".into()));
        }
        Ok(ModelGraph {
            arch,
            nodes: self.nodes,
            output,
            params: self.params,
            bn_epsilon: DEFAULT_EPSILON,
            bn_momentum: DEFAULT_MOMENTUM,
            sigma: None,
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
        })
    }
}

/// A built network: topologically ordered nodes plus their parameters.
#[derive(Debug, Clone)]
pub struct ModelGraph<T> {
    arch: Architecture,
    nodes: Vec<Node>,
    output: NodeId,
    params: ParamStore<T>,
    pub(crate) bn_epsilon: f64,
    pub(crate) bn_momentum: f64,
    /// Training noise level on the 0-255 scale, when known.
    pub sigma: Option<f64>,
    id: u64,
    generation: u64,
}

/// Activations and batch-norm state recorded by a forward pass.
#[derive(Debug)]
pub struct ForwardCache<T> {
    values: Vec<Option<Tensor<T>>>,
    bn: Vec<Option<BnCache<T>>>,
    mode: Mode,
    graph_id: u64,
    generation: u64,
}

/// Parameter gradients aligned with the [`ParamStore`] entries; running
/// statistics have no gradient.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub per_param: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, idx: usize) -> Option<&Tensor<T>> {
        self.per_param.get(idx).and_then(|g| g.as_ref())
    }

    /// Every gradient element in store order (for norms and comparisons).
    pub fn flat(&self) -> Vec<T> {
        self.per_param
            .iter()
            .flatten()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }
}

impl<T: Scalar> ModelGraph<T> {
    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn input_channels(&self) -> usize {
        self.nodes[0].channels
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    /// Mutable parameter access. Invalidates forward caches taken earlier.
    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        self.generation += 1;
        &mut self.params
    }

    pub fn bn_epsilon(&self) -> f64 {
        self.bn_epsilon
    }

    pub fn bn_momentum(&self) -> f64 {
        self.bn_momentum
    }

    /// `(trainable, total)` parameter counts.
    pub fn count_params(&self) -> (usize, usize) {
        self.params.count()
    }

    /// Receptive field of the output: kernels composed along the widest path.
    pub fn receptive_field(&self) -> usize {
        let mut rf = vec![1usize; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            let widest = node.inputs.iter().map(|x| rf[x.0]).max().unwrap_or(1);
            rf[i] = match node.op {
                Op::Conv { kernel, .. } => widest + kernel - 1,
                _ => widest,
            };
        }
        rf[self.output.0]
    }

    /// Copy with parameters converted to another element type. The copy is a
    /// distinct graph: caches of one are rejected by the other.
    pub fn cast<U: Scalar>(&self) -> ModelGraph<U> {
        ModelGraph {
            arch: self.arch,
            nodes: self.nodes.clone(),
            output: self.output,
            params: self.params.cast(),
            bn_epsilon: self.bn_epsilon,
            bn_momentum: self.bn_momentum,
            sigma: self.sigma,
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
        }
    }

    /// Digest of which ReLU outputs are positive in a train-mode cache. Two
    /// forwards with equal digests lie on the same linear piece of every
    /// ReLU (up to hash collisions).
    pub fn relu_pattern(&self, cache: &ForwardCache<T>) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (i, node) in self.nodes.iter().enumerate() {
            if node.op != Op::Relu {
                continue;
            }
            let Some(v) = cache.values.get(i).and_then(|v| v.as_ref()) else {
                continue;
            };
            for chunk in v.data().chunks(64) {
                let bits = chunk
                    .iter()
                    .enumerate()
                    .fold(0u64, |acc, (j, x)| acc | (u64::from(*x > T::zero()) << j));
                h = (h ^ bits).wrapping_mul(0x0000_0100_0000_01b3);
                h ^= h >> 29;
            }
        }
        h
    }

    fn check_input(&self, z: &Tensor<T>) -> Result<(), ModelError> {
        let expected = self.input_channels();
        if z.c() != expected {
            return Err(ModelError::InputChannels {
                expected,
                found: z.c(),
            });
        }
        Ok(())
    }

    fn bn_params(&self, op: &Op) -> BnParams<T> {
        let Op::BatchNorm {
            gamma,
            beta,
            running_mean,
            running_var,
        } = *op
        else {
            unreachable!("bn_params on a non-BN node")
        };
        BnParams {
            gamma: self.params.tensor(gamma).data().to_vec(),
            beta: self.params.tensor(beta).data().to_vec(),
            running_mean: Some(self.params.tensor(running_mean).data().to_vec()),
            running_var: Some(self.params.tensor(running_var).data().to_vec()),
            momentum: self.bn_momentum,
            epsilon: self.bn_epsilon,
        }
    }

    fn eval_node(
        &self,
        node: &Node,
        values: &[Option<Tensor<T>>],
        bn_mode: BnMode,
    ) -> Result<(Tensor<T>, Option<BnParams<T>>, Option<BnCache<T>>), ModelError> {
        let arg = |k: usize| -> &Tensor<T> {
            values[node.inputs[k].0]
                .as_ref()
                .expect("input value freed before its last use")
        };
        Ok(match &node.op {
            Op::Input => unreachable!("input is seeded by the caller"),
            Op::Conv { weight, bias, .. } => {
                let p = ConvParams::new(self.params.tensor(*weight), self.params.tensor(*bias).data())?;
                (conv2d_forward(arg(0), &p)?, None, None)
            }
            Op::BatchNorm { .. } => {
                let mut p = self.bn_params(&node.op);
                let (out, cache) = batchnorm_forward(arg(0), &mut p, bn_mode)?;
                (out, Some(p), Some(cache))
            }
            Op::Relu => (relu_forward(arg(0)), None, None),
            Op::Concat => {
                let xs: Vec<&Tensor<T>> = (0..node.inputs.len()).map(arg).collect();
                (concat_channels(&xs)?, None, None)
            }
            Op::Add => (elementwise_add(arg(0), arg(1))?, None, None),
            Op::SubtractFromInput => {
                let (z, f) = (arg(0), arg(1));
                if z.shape() != f.shape() {
                    return Err(crate::tensor::TensorError::ShapeMismatch {
                        left: z.shape(),
                        right: f.shape(),
                    }
                    .into());
                }
                let data = z.data().iter().zip(f.data()).map(|(&a, &b)| a - b).collect();
                (Tensor::from_vec(z.shape(), data)?, None, None)
            }
        })
    }

    /// Run the network on `z`. Train mode normalizes with batch statistics,
    /// updates the running statistics and keeps every activation for
    /// [`ModelGraph::backward`].
    pub fn forward(
        &mut self,
        z: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, ForwardCache<T>), ModelError> {
        if mode == Mode::Infer {
            let out = self.infer(z)?;
            return Ok((
                out,
                ForwardCache {
                    values: Vec::new(),
                    bn: Vec::new(),
                    mode,
                    graph_id: self.id,
                    generation: self.generation,
                },
            ));
        }
        self.check_input(z)?;
        let mut values: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        let mut bn = vec![None; self.nodes.len()];
        values[0] = Some(z.clone());
        for i in 1..self.nodes.len() {
            let (out, updated, cache) = self.eval_node(&self.nodes[i], &values, BnMode::Train)?;
            if let (Some(p), Op::BatchNorm {
                running_mean,
                running_var,
                ..
            }) = (updated, &self.nodes[i].op)
            {
                let (rm, rv) = (*running_mean, *running_var);
                let mean = p.running_mean.expect("train mode sets running mean");
                let var = p.running_var.expect("train mode sets running var");
                self.params.tensor_mut(rm).data_mut().copy_from_slice(&mean);
                self.params.tensor_mut(rv).data_mut().copy_from_slice(&var);
            }
            values[i] = Some(out);
            bn[i] = cache;
        }
        let out = values[self.output.0].clone().expect("output computed");
        Ok((
            out,
            ForwardCache {
                values,
                bn,
                mode,
                graph_id: self.id,
                generation: self.generation,
            },
        ))
    }

    /// Inference-mode forward pass. Intermediate activations are released as
    /// soon as their last consumer has run.
    pub fn infer(&self, z: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.check_input(z)?;
        let mut remaining = vec![0usize; self.nodes.len()];
        for node in &self.nodes {
            for x in &node.inputs {
                remaining[x.0] += 1;
            }
        }
        let mut values: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        values[0] = Some(z.clone());
        for i in 1..=self.output.0 {
            let node = &self.nodes[i];
            let (out, _, _) = self.eval_node(node, &values, BnMode::Infer)?;
            values[i] = Some(out);
            for x in &node.inputs {
                remaining[x.0] -= 1;
                if remaining[x.0] == 0 && *x != self.output {
                    values[x.0] = None;
                }
            }
        }
        Ok(values[self.output.0].take().expect("output computed"))
    }

    /// Reverse-mode gradients of a scalar loss whose gradient with respect to
    /// the output is `grad_output`.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        grad_output: &Tensor<T>,
    ) -> Result<Gradients<T>, ModelError> {
        if cache.mode != Mode::Train {
            return Err(ModelError::InferenceCache);
        }
        if cache.graph_id != self.id || cache.generation != self.generation {
            return Err(ModelError::StaleCache);
        }
        let value = |id: NodeId| cache.values[id.0].as_ref().expect("train cache keeps values");
        let out_shape = value(self.output).shape();
        if grad_output.shape() != out_shape {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                left: grad_output.shape(),
                right: out_shape,
            }
            .into());
        }

        let mut per_param: Vec<Option<Tensor<T>>> = self
            .params
            .iter()
            .map(|e| e.kind.is_trainable().then(|| Tensor::zeros(e.tensor.shape())))
            .collect();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[self.output.0] = Some(grad_output.clone());

        fn accumulate<T: Scalar>(
            slot: &mut Option<Tensor<T>>,
            g: Tensor<T>,
        ) -> Result<(), ModelError> {
            match slot {
                Some(acc) => acc.add_assign(&g)?,
                None => *slot = Some(g),
            }
            Ok(())
        }
        fn add_vec<T: Scalar>(slot: &mut Option<Tensor<T>>, g: &[T]) {
            let acc = slot.as_mut().expect("trainable slot");
            for (a, &v) in acc.data_mut().iter_mut().zip(g) {
                *a += v;
            }
        }

        for i in (1..=self.output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Conv { weight, bias, .. } => {
                    let p = ConvParams::new(self.params.tensor(*weight), self.params.tensor(*bias).data())?;
                    let cg = conv2d_backward(&g, value(node.inputs[0]), &p)?;
                    add_vec(&mut per_param[*weight], cg.grad_weight.data());
                    add_vec(&mut per_param[*bias], &cg.grad_bias);
                    accumulate(&mut grads[node.inputs[0].0], cg.grad_input)?;
                }
                Op::BatchNorm { gamma, beta, .. } => {
                    let bc = cache.bn[i].as_ref().ok_or(ModelError::StaleCache)?;
                    let (gx, gg, gb) = batchnorm_backward(&g, bc)?;
                    add_vec(&mut per_param[*gamma], &gg);
                    add_vec(&mut per_param[*beta], &gb);
                    accumulate(&mut grads[node.inputs[0].0], gx)?;
                }
                Op::Relu => {
                    let gx = relu_backward(&g, value(node.inputs[0]))?;
                    accumulate(&mut grads[node.inputs[0].0], gx)?;
                }
                Op::Concat => {
                    let splits: Vec<usize> =
                        node.inputs.iter().map(|x| self.nodes[x.0].channels).collect();
                    for (x, gx) in node.inputs.iter().zip(concat_backward(&g, &splits)?) {
                        accumulate(&mut grads[x.0], gx)?;
                    }
                }
                Op::Add => {
                    accumulate(&mut grads[node.inputs[1].0], g.clone())?;
                    accumulate(&mut grads[node.inputs[0].0], g)?;
                }
                Op::SubtractFromInput => {
                    // The input gradient is not needed; only the conv path
                    // receives the negated cotangent.
                    accumulate(&mut grads[node.inputs[1].0], g.scale(-T::one()))?;
                }
            }
        }
        Ok(Gradients { per_param })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelGraph<f64> {
        let mut b = GraphBuilder::new();
        let z = b.input(1).unwrap();
        let c = b.conv("a", z, 2, 3).unwrap();
        let r = b.relu(c).unwrap();
        let o = b.conv("b", r, 1, 3).unwrap();
        b.subtract_from_input(o).unwrap();
        b.finish(Architecture::Custom).unwrap()
    }

    #[test]
    fn builder_rejects_bad_graphs() {
        let mut b = GraphBuilder::<f32>::new();
        let z = b.input(1).unwrap();
        assert!(b.input(1).is_err());
        let c = b.conv("c", z, 4, 3).unwrap();
        assert!(matches!(b.conv("c", z, 4, 3), Err(ModelError::DuplicateParam(_))));
        assert!(b.add(z, c).is_err());
        assert!(b.subtract_from_input(c).is_err());
        assert!(b.finish(Architecture::Custom).is_err());
    }

    #[test]
    fn stale_and_inference_caches_are_rejected() {
        let mut g = tiny();
        let z = Tensor::full([1, 1, 4, 4], 0.5);
        let (y, cache) = g.forward(&z, Mode::Train).unwrap();
        g.params_mut();
        assert!(matches!(g.backward(&cache, &y), Err(ModelError::StaleCache)));
        let (y, cache) = g.forward(&z, Mode::Infer).unwrap();
        assert!(matches!(g.backward(&cache, &y), Err(ModelError::InferenceCache)));
        let other = tiny();
        let (y, cache) = g.forward(&z, Mode::Train).unwrap();
        assert!(matches!(other.backward(&cache, &y), Err(ModelError::StaleCache)));
    }

    #[test]
    fn input_channel_check() {
        let g = tiny();
        assert!(matches!(
            g.infer(&Tensor::zeros([1, 2, 4, 4])),
            Err(ModelError::InputChannels { expected: 1, found: 2 })
        ));
    }
}
