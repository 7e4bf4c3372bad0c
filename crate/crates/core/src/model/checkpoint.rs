//! Binary checkpoint format.
//!
//! ```text
//! "FLCN" | u32 LE version | u32 LE manifest length | JSON manifest | payload
//! ```
//!
//! The payload is every tensor's little-endian raw data, concatenated in
//! manifest order. The manifest records the architecture so the graph can be
//! rebuilt, and each tensor's name, kind, shape and byte range.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::build::{build_dncnn_like, build_flashlight};
use super::graph::ModelGraph;
use super::params::ParamKind;
use super::Architecture;
use crate::tensor::{DType, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"FLCN";
pub const CHECKPOINT_VERSION: u32 = 1;
const INPUT_RANGE: &str = "unit";
const BN_PLACEMENT: &str = "bn-after-every-conv;inception-bn-after-residual-add";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:?}, expected \"FLCN\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated payload: need {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("truncated header")]
    TruncatedHeader,
    #[error("malformed manifest: {0}")]
    MalformedManifest(String),
    #[error("manifest disagrees with the rebuilt graph: {0}")]
    ManifestMismatch(String),
    #[error("checkpoint stores {found} tensors, requested {expected}")]
    DtypeMismatch { expected: DType, found: DType },
    #[error("hand-built graphs cannot be checkpointed")]
    UnsupportedArchitecture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BnSettings {
    pub epsilon: f64,
    pub momentum: f64,
    pub placement: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorDescriptor {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub arch: Architecture,
    pub bn: BnSettings,
    pub dtype: DType,
    /// Images are fed to the network divided by 255.
    pub input_range: String,
    pub sigma: Option<f64>,
    pub tensors: Vec<TensorDescriptor>,
}

/// A loaded model of either element type.
#[derive(Debug, Clone)]
pub enum AnyModel {
    F32(ModelGraph<f32>),
    F64(ModelGraph<f64>),
}

fn vector_shape(shape: [usize; 4]) -> Vec<usize> {
    // Rank-1 parameters are stored as (c, 1, 1, 1); record them as [c].
    if shape[1..] == [1, 1, 1] {
        vec![shape[0]]
    } else {
        shape.to_vec()
    }
}

/// Serialize a model into checkpoint bytes.
pub fn write_checkpoint<T: Scalar>(g: &ModelGraph<T>) -> Result<Vec<u8>, CheckpointError> {
    if matches!(g.arch(), Architecture::Custom) {
        return Err(CheckpointError::UnsupportedArchitecture);
    }
    let size = T::DTYPE.size_of();
    let mut offset = 0;
    let tensors = g
        .params()
        .iter()
        .map(|e| {
            let length = e.tensor.len() * size;
            let d = TensorDescriptor {
                name: e.name.clone(),
                kind: e.kind,
                shape: vector_shape(e.tensor.shape()),
                offset,
                length,
            };
            offset += length;
            d
        })
        .collect();
    let manifest = Manifest {
        arch: *g.arch(),
        bn: BnSettings {
            epsilon: g.bn_epsilon(),
            momentum: g.bn_momentum(),
            placement: BN_PLACEMENT.into(),
        },
        dtype: T::DTYPE,
        input_range: INPUT_RANGE.into(),
        sigma: g.sigma,
        tensors,
    };
    let json = serde_json::to_vec(&manifest)
        .map_err(|e| CheckpointError::MalformedManifest(e.to_string()))?;
    let mut out = Vec::with_capacity(12 + json.len() + offset);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for e in g.params().iter() {
        for &v in e.tensor.data() {
            v.write_le(&mut out);
        }
    }
    Ok(out)
}

pub fn save_checkpoint<T: Scalar>(
    g: &ModelGraph<T>,
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    fs::write(path, write_checkpoint(g)?)?;
    Ok(())
}

fn split_header(bytes: &[u8]) -> Result<(Manifest, &[u8]), CheckpointError> {
    if bytes.len() < 4 || bytes[..4] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < 12 {
        return Err(CheckpointError::TruncatedHeader);
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = word(8) as usize;
    let json = bytes.get(12..12 + len).ok_or(CheckpointError::TruncatedHeader)?;
    let manifest: Manifest = serde_json::from_slice(json)
        .map_err(|e| CheckpointError::MalformedManifest(e.to_string()))?;
    Ok((manifest, &bytes[12 + len..]))
}

/// Read only the manifest of a checkpoint file.
pub fn peek_manifest(path: impl AsRef<Path>) -> Result<Manifest, CheckpointError> {
    let bytes = fs::read(path)?;
    Ok(split_header(&bytes)?.0)
}

/// Rebuild a model from checkpoint bytes.
pub fn read_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<ModelGraph<T>, CheckpointError> {
    let (manifest, payload) = split_header(bytes)?;
    if manifest.dtype != T::DTYPE {
        return Err(CheckpointError::DtypeMismatch {
            expected: T::DTYPE,
            found: manifest.dtype,
        });
    }
    let needed = manifest
        .tensors
        .iter()
        .map(|d| d.offset + d.length)
        .max()
        .unwrap_or(0);
    if payload.len() < needed {
        return Err(CheckpointError::TruncatedPayload {
            expected: needed,
            found: payload.len(),
        });
    }
    if payload.len() > needed {
        return Err(CheckpointError::ManifestMismatch(format!(
            "{} trailing payload bytes",
            payload.len() - needed
        )));
    }

    let mut g: ModelGraph<T> = match manifest.arch {
        Architecture::FlashLight(cfg) => build_flashlight(cfg),
        Architecture::DnCnnLike { dncnn_middle } => build_dncnn_like(dncnn_middle),
        Architecture::Custom => return Err(CheckpointError::UnsupportedArchitecture),
    };
    if manifest.tensors.len() != g.params().len() {
        return Err(CheckpointError::ManifestMismatch(format!(
            "{} tensors listed, architecture {} has {}",
            manifest.tensors.len(),
            manifest.arch,
            g.params().len()
        )));
    }
    let size = T::DTYPE.size_of();
    let mut expected_offset = 0;
    for (d, e) in manifest.tensors.iter().zip(g.params().iter()) {
        let elems = e.tensor.len();
        if d.name != e.name
            || d.kind != e.kind
            || d.shape != vector_shape(e.tensor.shape())
            || d.length != elems * size
            || d.offset != expected_offset
        {
            return Err(CheckpointError::ManifestMismatch(format!(
                "tensor `{}` ({:?}, {:?}) does not match `{}` ({:?}, {:?})",
                d.name,
                d.kind,
                d.shape,
                e.name,
                e.kind,
                e.tensor.shape()
            )));
        }
        expected_offset += d.length;
    }

    let shapes: Vec<[usize; 4]> = g.params().iter().map(|e| e.tensor.shape()).collect();
    for ((entry, d), shape) in g
        .params_mut()
        .iter_mut()
        .zip(&manifest.tensors)
        .zip(shapes)
    {
        let raw = &payload[d.offset..d.offset + d.length];
        let data = raw.chunks_exact(size).map(T::read_le).collect();
        entry.tensor = Tensor::from_vec(shape, data).expect("length checked against manifest");
    }
    g.bn_epsilon = manifest.bn.epsilon;
    g.bn_momentum = manifest.bn.momentum;
    g.sigma = manifest.sigma;
    Ok(g)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelGraph<T>, CheckpointError> {
    read_checkpoint(&fs::read(path)?)
}

impl AnyModel {
    /// Load a checkpoint in whatever element type it was saved with.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let bytes = fs::read(path)?;
        let (manifest, _) = split_header(&bytes)?;
        Ok(match manifest.dtype {
            DType::F32 => AnyModel::F32(read_checkpoint(&bytes)?),
            DType::F64 => AnyModel::F64(read_checkpoint(&bytes)?),
        })
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyModel::F32(_) => DType::F32,
            AnyModel::F64(_) => DType::F64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{initialize, ArchConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> ModelGraph<f32> {
        let mut g = build_dncnn_like(1);
        initialize(&mut g, &mut ChaCha8Rng::seed_from_u64(5));
        g
    }

    #[test]
    fn header_layout() {
        let bytes = write_checkpoint(&small()).unwrap();
        assert_eq!(&bytes[..4], b"FLCN");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let manifest: serde_json::Value = serde_json::from_slice(&bytes[12..12 + len]).unwrap();
        assert_eq!(manifest["arch"]["dncnn_middle"], 1);
        assert_eq!(manifest["dtype"], "f32");
        assert_eq!(manifest["tensors"].as_array().unwrap().len(), 10);
        assert_eq!(manifest["tensors"][1]["shape"], serde_json::json!([64]));
        assert_eq!(manifest["tensors"][1]["kind"], "bias");
        let (trainable, total) = small().count_params();
        assert_eq!(bytes.len() - 12 - len, total * 4);
        assert!(trainable < total);
    }

    #[test]
    fn distinct_errors() {
        let bytes = write_checkpoint(&small()).unwrap();

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint::<f32>(&bad), Err(CheckpointError::BadMagic { .. })));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            read_checkpoint::<f32>(&bad),
            Err(CheckpointError::VersionMismatch { found: 2, .. })
        ));

        // Drop the last of the 10 tensors (the 1-element last conv bias).
        let cut = &bytes[..bytes.len() - 4];
        assert!(matches!(
            read_checkpoint::<f32>(cut),
            Err(CheckpointError::TruncatedPayload { .. })
        ));

        assert!(matches!(
            read_checkpoint::<f64>(&bytes),
            Err(CheckpointError::DtypeMismatch { .. })
        ));
    }

    #[test]
    fn manifest_shape_disagreement() {
        let g = small();
        let bytes = write_checkpoint(&g).unwrap();
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let mut manifest: Manifest = serde_json::from_slice(&bytes[12..12 + len]).unwrap();
        manifest.tensors[0].shape = vec![64, 1, 9, 1];
        let json = serde_json::to_vec(&manifest).unwrap();
        let mut forged = bytes[..8].to_vec();
        forged.extend_from_slice(&(json.len() as u32).to_le_bytes());
        forged.extend_from_slice(&json);
        forged.extend_from_slice(&bytes[12 + len..]);
        assert!(matches!(
            read_checkpoint::<f32>(&forged),
            Err(CheckpointError::ManifestMismatch(_))
        ));
    }

    #[test]
    fn custom_graphs_are_rejected() {
        let mut b = crate::model::GraphBuilder::<f32>::new();
        let z = b.input(1).unwrap();
        let c = b.conv("c", z, 1, 1).unwrap();
        b.subtract_from_input(c).unwrap();
        let g = b.finish(Architecture::Custom).unwrap();
        assert!(matches!(
            write_checkpoint(&g),
            Err(CheckpointError::UnsupportedArchitecture)
        ));
    }

    #[test]
    fn flashlight_roundtrip_keeps_config() {
        let mut g: ModelGraph<f64> = build_flashlight(ArchConfig::new(0, 1, 1));
        initialize(&mut g, &mut ChaCha8Rng::seed_from_u64(9));
        g.sigma = Some(25.0);
        let back: ModelGraph<f64> = read_checkpoint(&write_checkpoint(&g).unwrap()).unwrap();
        assert_eq!(back.arch(), g.arch());
        assert_eq!(back.sigma, Some(25.0));
        assert_eq!(back.params(), g.params());
    }
}
