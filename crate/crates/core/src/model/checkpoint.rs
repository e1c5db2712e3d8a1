//! Versioned binary weight container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `LCTLCKPT` |
//! | 4     | format version (`1`) |
//! | 4     | header length `h` |
//! | h     | UTF-8 JSON header |
//! | rest  | tensor payloads, concatenated in header order |
//!
//! The header records the architecture, its SHA-256 hash, the element type,
//! the vocabulary, step counters, optional optimizer metadata, and for each
//! tensor its name and shape. Payloads are raw little-endian floats of the
//! header's element type in row-major order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::scalar::{DType, Scalar};

use super::arch::ArchConfig;
use super::vocab;
use super::weights::DenoiserWeights;

pub const MAGIC: &[u8; 8] = b"LCTLCKPT";
pub const VERSION: u32 = 1;

/// Optimizer moments saved alongside the weights so training can resume.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot<F> {
    pub phase: String,
    pub step: u64,
    /// First and second moments, keyed by parameter name.
    pub first: Vec<(String, Tensor<F>)>,
    pub second: Vec<(String, Tensor<F>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F> {
    pub weights: DenoiserWeights<F>,
    pub optimizer: Option<OptimizerSnapshot<F>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    phase: String,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    arch: ArchConfig,
    arch_hash: String,
    dtype: DType,
    vocab: Vec<String>,
    base_steps: u64,
    control_steps: u64,
    optimizer: Option<OptimizerHeader>,
    tensors: Vec<TensorEntry>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

const FIRST: &str = "adam.m.";
const SECOND: &str = "adam.v.";

impl<F: Scalar> Checkpoint<F> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let w = &self.weights;
        let mut named: Vec<(&str, &Tensor<F>)> = w
            .specs()
            .iter()
            .map(|s| s.name.as_str())
            .zip(w.tensors())
            .collect();
        let moment_names: Vec<(String, &Tensor<F>)> = self
            .optimizer
            .iter()
            .flat_map(|o| {
                o.first
                    .iter()
                    .map(|(n, t)| (format!("{FIRST}{n}"), t))
                    .chain(o.second.iter().map(|(n, t)| (format!("{SECOND}{n}"), t)))
            })
            .collect();
        named.extend(moment_names.iter().map(|(n, t)| (n.as_str(), *t)));
        let header = Header {
            arch: w.arch.clone(),
            arch_hash: hex(&w.arch.hash()),
            dtype: F::DTYPE,
            vocab: vocab::words().into_iter().map(str::to_string).collect(),
            base_steps: w.base_steps,
            control_steps: w.control_steps,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                phase: o.phase.clone(),
                step: o.step,
            }),
            tensors: named
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(16 + json.len() + w.parameter_count() * F::DTYPE.width());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &named {
            F::to_le_bytes_vec(t.data(), &mut out);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |offset: usize, reason: &str| Error::Parse {
            offset,
            reason: reason.to_string(),
        };
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad(0, "not a checkpoint (magic mismatch)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| bad(12, "header length exceeds file"))?;
        let header: Header = serde_json::from_slice(body)
            .map_err(|e| bad(16 + e.column().saturating_sub(1), &format!("header: {e}")))?;
        header.arch.validate()?;
        if header.arch_hash != hex(&header.arch.hash()) {
            return Err(Error::Checkpoint(
                "architecture hash does not match the header".into(),
            ));
        }
        let words: Vec<String> = vocab::words().into_iter().map(str::to_string).collect();
        if header.vocab != words {
            return Err(Error::Checkpoint(format!(
                "vocabulary mismatch: file has {:?}",
                header.vocab
            )));
        }
        let width = header.dtype.width();
        let mut pos = 16 + hlen;
        let mut params = Vec::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = bytes
                .get(pos..pos + n * width)
                .ok_or_else(|| bad(pos, &format!("payload of {} truncated", entry.name)))?;
            let data: Vec<F> = raw
                .chunks(width)
                .map(|c| match header.dtype {
                    d if d == F::DTYPE => F::read_le(c),
                    DType::F32 => F::from_f32(f32::read_le(c)).unwrap(),
                    DType::F64 => F::from_f64(f64::read_le(c)).unwrap(),
                })
                .collect();
            let t = Tensor::new(entry.shape, data)
                .map_err(|_| Error::Checkpoint(format!("tensor {} is not finite", entry.name)))?;
            pos += n * width;
            if let Some(name) = entry.name.strip_prefix(FIRST) {
                first.push((name.to_string(), t));
            } else if let Some(name) = entry.name.strip_prefix(SECOND) {
                second.push((name.to_string(), t));
            } else {
                params.push((entry.name, t));
            }
        }
        if pos != bytes.len() {
            return Err(bad(pos, "trailing bytes after the last tensor"));
        }
        let weights = DenoiserWeights::from_named(
            &header.arch,
            params,
            header.base_steps,
            header.control_steps,
        )?;
        let optimizer = header.optimizer.map(|o| OptimizerSnapshot {
            phase: o.phase,
            step: o.step,
            first,
            second,
        });
        Ok(Self { weights, optimizer })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// SHA-256 of the serialized checkpoint, used in run manifests.
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_with_optimizer_state() {
        let w = DenoiserWeights::<f64>::init(&ArchConfig::default(), 3).unwrap();
        let m = w.tensors()[0].scale(0.5);
        let ck = Checkpoint {
            weights: w.clone(),
            optimizer: Some(OptimizerSnapshot {
                phase: "base".into(),
                step: 4,
                first: vec![("token_embedding".into(), m.clone())],
                second: vec![("token_embedding".into(), m)],
            }),
        };
        let bytes = ck.to_bytes();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(Checkpoint::<f64>::from_bytes(&bytes).unwrap(), ck);
        let as32 = Checkpoint::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(as32.weights.len(), w.len());
    }

    #[test]
    fn corrupt_files_rejected() {
        let ck = Checkpoint {
            weights: DenoiserWeights::<f32>::init(&ArchConfig::default(), 3).unwrap(),
            optimizer: None,
        };
        let bytes = ck.to_bytes();
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(b"garbage"),
            Err(Error::Parse { offset: 0, .. })
        ));
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]),
            Err(Error::Parse { .. })
        ));
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::<f32>::from_bytes(&extra).is_err());
    }
}
