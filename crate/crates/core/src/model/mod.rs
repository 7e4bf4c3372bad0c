//! Network construction, execution, initialization and persistence.
//!
//! The FlashLight network is a plain convolutional *warmup* front (a 3x3 stage
//! of `l` layers, then a 5x5 stage of `m` layers) followed by a *boost* stack
//! of `n` residual inception layers. The last 3x3 conv predicts the noise and
//! the estimate is `z - f(z)`.

mod build;
mod checkpoint;
mod graph;
mod init;
mod params;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::TensorError;

pub use build::{
    build_dncnn_like, build_flashlight, build_inception_layer, enumerate_architectures,
    ArchitectureCount, FEATURES, INCEPTION_BRANCHES,
};
pub use checkpoint::{
    load_checkpoint, peek_manifest, read_checkpoint, save_checkpoint, write_checkpoint, AnyModel,
    BnSettings, CheckpointError, Manifest, TensorDescriptor, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use graph::{ForwardCache, GraphBuilder, Gradients, Mode, ModelGraph, Node, NodeId, Op};
pub use init::{initialize, orthogonal_init};
pub use params::{ParamEntry, ParamKind, ParamStore};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("expected a {expected}-channel input, got {found} channels")]
    InputChannels { expected: usize, found: usize },
    #[error("inception layers take {expected} input channels, got {found}")]
    InceptionChannels { expected: usize, found: usize },
    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
    #[error("forward cache does not belong to the current parameters")]
    StaleCache,
    #[error("backward needs a train-mode forward cache")]
    InferenceCache,
    #[error("empty architecture search set")]
    EmptySearchSpace,
}

/// FlashLight layer counts: `l` 3x3 warmup convs, `m` 5x5 warmup convs and
/// `n` inception layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ArchConfig {
    pub l: usize,
    pub m: usize,
    pub n: usize,
}

impl ArchConfig {
    pub const fn new(l: usize, m: usize, n: usize) -> Self {
        ArchConfig { l, m, n }
    }
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig::new(5, 4, 6)
    }
}

impl fmt::Display for ArchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.l, self.m, self.n)
    }
}

impl FromStr for ArchConfig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        let [l, m, n] = parts.as_slice() else {
            return Err(format!("expected `l,m,n`, got `{s}`"));
        };
        let parse = |v: &str| {
            v.parse::<usize>()
                .map_err(|_| format!("`{v}` is not a non-negative integer"))
        };
        Ok(ArchConfig::new(parse(l)?, parse(m)?, parse(n)?))
    }
}

/// Which family a graph was built from; stored in checkpoints so the graph
/// can be rebuilt on load.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Architecture {
    FlashLight(ArchConfig),
    DnCnnLike { dncnn_middle: usize },
    /// Hand-built graph; not checkpointable.
    #[serde(skip)]
    Custom,
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::FlashLight(cfg) => write!(f, "flashlight({cfg})"),
            Architecture::DnCnnLike { dncnn_middle } => write!(f, "dncnn-like({dncnn_middle})"),
            Architecture::Custom => f.write_str("custom"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arch_parsing() {
        assert_eq!("5,4,6".parse::<ArchConfig>().unwrap(), ArchConfig::default());
        assert_eq!(" 1, 0 ,2".parse::<ArchConfig>().unwrap(), ArchConfig::new(1, 0, 2));
        assert!("5,4".parse::<ArchConfig>().is_err());
        assert!("5,-1,2".parse::<ArchConfig>().is_err());
        assert_eq!(ArchConfig::new(1, 2, 3).to_string(), "1,2,3");
    }

    #[test]
    fn arch_json_shapes() {
        let fl = serde_json::to_string(&Architecture::FlashLight(ArchConfig::new(5, 4, 6))).unwrap();
        assert_eq!(fl, r#"{"l":5,"m":4,"n":6}"#);
        let dn = serde_json::to_string(&Architecture::DnCnnLike { dncnn_middle: 15 }).unwrap();
        assert_eq!(dn, r#"{"dncnn_middle":15}"#);
        let back: Architecture = serde_json::from_str(&dn).unwrap();
        assert_eq!(back, Architecture::DnCnnLike { dncnn_middle: 15 });
    }
}
