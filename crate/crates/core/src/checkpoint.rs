//! Per-node checkpoints: iteration header, parameters, optimizer state.
//!
//! Layout: magic `LSCK`, version `u32`, iteration `u64`, role `u8`, three
//! zero bytes, node index `u32`, learning rate and momentum as `f32`, then the
//! parameter blob and the velocity blob in the format of [`crate::params`].
//! All integers are little-endian.

use std::path::Path;

use thiserror::Error;

use crate::optim::OptimizerState;
use crate::params::{decode_params_prefix, encode_params};
use crate::tensor::Tensor;
use crate::transport::{NodeId, Role};

const MAGIC: &[u8; 4] = b"LSCK";
const VERSION: u32 = 1;
const HEADER: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Number of completed iterations.
    pub iteration: u64,
    pub node: NodeId,
    pub params: Vec<Tensor>,
    pub optimizer: OptimizerState,
}

fn corrupt(s: impl Into<String>) -> CheckpointError {
    CheckpointError::CorruptCheckpoint(s.into())
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.iteration.to_le_bytes());
        out.push(self.node.role.code());
        out.extend_from_slice(&[0; 3]);
        out.extend_from_slice(&self.node.index.to_le_bytes());
        out.extend_from_slice(&self.optimizer.learning_rate.to_le_bytes());
        out.extend_from_slice(&self.optimizer.momentum.to_le_bytes());
        debug_assert_eq!(out.len(), HEADER);
        out.extend_from_slice(&encode_params(&self.params));
        out.extend_from_slice(&encode_params(&self.optimizer.velocity));
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        if bytes.len() < HEADER {
            return Err(corrupt(format!("{} bytes is shorter than the header", bytes.len())));
        }
        if &bytes[0..4] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let f32_at = |i: usize| f32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        if u32_at(4) != VERSION {
            return Err(corrupt(format!("unsupported version {}", u32_at(4))));
        }
        let iteration = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let role = Role::from_code(bytes[16]).ok_or_else(|| corrupt(format!("unknown role {}", bytes[16])))?;
        let node = NodeId::new(role, u32_at(20));
        let (learning_rate, momentum) = (f32_at(24), f32_at(28));
        let rest = &bytes[HEADER..];
        let (params, used) = decode_params_prefix(rest).map_err(|e| corrupt(e.to_string()))?;
        let (velocity, used2) = decode_params_prefix(&rest[used..]).map_err(|e| corrupt(e.to_string()))?;
        if used + used2 != rest.len() {
            return Err(corrupt(format!("{} trailing bytes", rest.len() - used - used2)));
        }
        if velocity.len() != params.len() || velocity.iter().zip(&params).any(|(v, p)| v.shape() != p.shape()) {
            return Err(corrupt("velocity does not match parameters"));
        }
        Ok(Self {
            iteration,
            node,
            params,
            optimizer: OptimizerState {
                learning_rate,
                momentum,
                velocity,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.encode()).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::decode(&bytes)
    }

    /// File name used when a set of checkpoints is written to a directory.
    pub fn file_name(node: NodeId, iteration: u64) -> String {
        format!("{node}-it{iteration}.ckpt")
    }
}
