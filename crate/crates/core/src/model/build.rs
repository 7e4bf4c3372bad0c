use super::graph::{GraphBuilder, ModelGraph, NodeId};
use super::{ArchConfig, Architecture, ModelError};
use crate::tensor::Scalar;

/// Feature width of every hidden layer.
pub const FEATURES: usize = 64;

/// `(kernel, out_channels)` chain of each inception branch. Every conv is
/// followed by BN and ReLU.
pub const INCEPTION_BRANCHES: [&[(usize, usize)]; 4] = [
    &[(1, 32), (3, 32), (3, 48), (3, 64), (3, 64)],
    &[(1, 32), (3, 48), (3, 64)],
    &[(1, 32), (3, 64)],
    &[(1, 32)],
];

fn conv_bn_relu<T: Scalar>(
    b: &mut GraphBuilder<T>,
    prefix: &str,
    x: NodeId,
    out: usize,
    k: usize,
) -> Result<NodeId, ModelError> {
    let c = b.conv(&format!("{prefix}.conv"), x, out, k)?;
    let n = b.batch_norm(&format!("{prefix}.bn"), c)?;
    b.relu(n)
}

/// Residual inception layer on a 64-channel input.
///
/// Four branches are concatenated (224 channels), projected back to 64 by a
/// 1x1 conv + BN, added to the layer input, batch-normalized and rectified.
pub fn build_inception_layer<T: Scalar>(
    b: &mut GraphBuilder<T>,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId, ModelError> {
    let c_in = b.channels_of(x)?;
    if c_in != FEATURES {
        return Err(ModelError::InceptionChannels {
            expected: FEATURES,
            found: c_in,
        });
    }
    let mut tails = Vec::with_capacity(INCEPTION_BRANCHES.len());
    for (bi, chain) in INCEPTION_BRANCHES.iter().enumerate() {
        let mut h = x;
        for (ci, &(k, out)) in chain.iter().enumerate() {
            let c = b.conv(&format!("{prefix}.b{}.conv{}", bi + 1, ci + 1), h, out, k)?;
            let n = b.batch_norm(&format!("{prefix}.b{}.bn{}", bi + 1, ci + 1), c)?;
            h = b.relu(n)?;
        }
        tails.push(h);
    }
    let cat = b.concat(&tails)?;
    let proj = b.conv(&format!("{prefix}.proj.conv"), cat, FEATURES, 1)?;
    let proj = b.batch_norm(&format!("{prefix}.proj.bn"), proj)?;
    let sum = b.add(proj, x)?;
    let sum = b.batch_norm(&format!("{prefix}.out_bn"), sum)?;
    b.relu(sum)
}

/// FlashLight network for `cfg`. Parameters hold their neutral values
/// (zero weights); call [`super::initialize`] before training.
pub fn build_flashlight<T: Scalar>(cfg: ArchConfig) -> ModelGraph<T> {
    let build = || -> Result<ModelGraph<T>, ModelError> {
        let mut b = GraphBuilder::new();
        let z = b.input(1)?;
        let c = b.conv("first.conv", z, FEATURES, 3)?;
        let mut h = b.relu(c)?;
        for i in 0..cfg.l {
            h = conv_bn_relu(&mut b, &format!("warmup3.{i}"), h, FEATURES, 3)?;
        }
        for i in 0..cfg.m {
            h = conv_bn_relu(&mut b, &format!("warmup5.{i}"), h, FEATURES, 5)?;
        }
        for i in 0..cfg.n {
            h = build_inception_layer(&mut b, &format!("boost.{i}"), h)?;
        }
        let f = b.conv("last.conv", h, 1, 3)?;
        b.subtract_from_input(f)?;
        b.finish(Architecture::FlashLight(cfg))
    };
    build().expect("FlashLight topology is statically valid")
}

/// Plain residual CNN: 3x3 conv + ReLU, `middle_layers` 3x3 conv/BN/ReLU
/// layers, a final 3x3 conv, and `z - f(z)`.
pub fn build_dncnn_like<T: Scalar>(middle_layers: usize) -> ModelGraph<T> {
    let build = || -> Result<ModelGraph<T>, ModelError> {
        let mut b = GraphBuilder::new();
        let z = b.input(1)?;
        let c = b.conv("first.conv", z, FEATURES, 3)?;
        let mut h = b.relu(c)?;
        for i in 0..middle_layers {
            h = conv_bn_relu(&mut b, &format!("middle.{i}"), h, FEATURES, 3)?;
        }
        let f = b.conv("last.conv", h, 1, 3)?;
        b.subtract_from_input(f)?;
        b.finish(Architecture::DnCnnLike {
            dncnn_middle: middle_layers,
        })
    };
    build().expect("DnCNN-like topology is statically valid")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArchitectureCount {
    pub arch: ArchConfig,
    pub trainable_params: usize,
}

/// Trainable parameter counts over the Cartesian product of the three sets,
/// sorted ascending by count (ties by `(l, m, n)`).
pub fn enumerate_architectures(
    l_set: &[usize],
    m_set: &[usize],
    n_set: &[usize],
) -> Result<Vec<ArchitectureCount>, ModelError> {
    if l_set.is_empty() || m_set.is_empty() || n_set.is_empty() {
        return Err(ModelError::EmptySearchSpace);
    }
    let mut out = Vec::with_capacity(l_set.len() * m_set.len() * n_set.len());
    for &l in l_set {
        for &m in m_set {
            for &n in n_set {
                let arch = ArchConfig::new(l, m, n);
                let (trainable_params, _) = build_flashlight::<f32>(arch).count_params();
                out.push(ArchitectureCount {
                    arch,
                    trainable_params,
                });
            }
        }
    }
    out.sort_by_key(|a| (a.trainable_params, a.arch));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Op;

    #[test]
    fn inception_rejects_wrong_width() {
        let mut b = GraphBuilder::<f32>::new();
        let z = b.input(1).unwrap();
        let c = b.conv("c", z, 32, 3).unwrap();
        assert!(matches!(
            build_inception_layer(&mut b, "boost.0", c),
            Err(ModelError::InceptionChannels { expected: 64, found: 32 })
        ));
    }

    #[test]
    fn inception_layout() {
        let mut b = GraphBuilder::<f32>::new();
        let z = b.input(64).unwrap();
        let out = build_inception_layer(&mut b, "boost.0", z).unwrap();
        let g = b.finish_with_output(Architecture::Custom, out).unwrap();
        let convs = g.nodes().iter().filter(|n| matches!(n.op, Op::Conv { .. })).count();
        let bns = g.nodes().iter().filter(|n| matches!(n.op, Op::BatchNorm { .. })).count();
        let relus = g.nodes().iter().filter(|n| n.op == Op::Relu).count();
        assert_eq!((convs, bns, relus), (12, 13, 12));
        let concat = g.nodes().iter().find(|n| n.op == Op::Concat).unwrap();
        assert_eq!(concat.channels, 224);
        assert_eq!(g.count_params().0, 171_840);
        assert!(g.params().get("boost.0.b1.conv5.weight").is_some());
        assert_eq!(
            g.params().get("boost.0.proj.conv.weight").unwrap().shape(),
            [64, 224, 1, 1]
        );
    }

    #[test]
    fn degenerate_flashlight() {
        let g = build_flashlight::<f32>(ArchConfig::new(0, 0, 0));
        let ops: Vec<&Op> = g.nodes().iter().map(|n| &n.op).collect();
        assert!(matches!(
            ops.as_slice(),
            [Op::Input, Op::Conv { .. }, Op::Relu, Op::Conv { .. }, Op::SubtractFromInput]
        ));
        assert_eq!(g.count_params().0, 1_217);
        assert_eq!(g.receptive_field(), 5);
    }

    #[test]
    fn empty_search_sets() {
        assert!(matches!(
            enumerate_architectures(&[5], &[], &[3]),
            Err(ModelError::EmptySearchSpace)
        ));
    }
}
