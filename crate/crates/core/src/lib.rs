//! Layer-separated and parameter-server data-parallel training over a
//! byte-accounted, deterministic simulated network.
//!
//! Layout:
//! - [`tensor`], [`layers`], [`network`], [`optim`], [`init`], [`params`]: the
//!   numeric core used to train small CNNs and MLPs on CPU.
//! - [`model`]: model specs, parameter accounting, and the CONV/FC split.
//! - [`transport`]: message passing between logical nodes and the traffic ledger.
//! - [`collectives`]: recursive-doubling allreduce, gather, scatter.
//! - [`ps`] and [`stanza`]: the two training protocols.
//! - [`perf`]: analytic iteration-time models and the node-assignment search.
//! - [`harness`]: experiment configs, datasets, runs, and reports.

pub mod checkpoint;
pub mod cluster;
pub mod collectives;
pub mod data;
pub mod harness;
pub mod init;
pub mod layers;
pub mod model;
pub mod network;
pub mod optim;
pub mod params;
pub mod perf;
pub mod ps;
pub mod stanza;
pub mod tensor;
pub mod transport;

pub use layers::{Layer, LayerKind};
pub use model::{ModelProfile, ModelSource, ModelSpec, Partition};
pub use network::Sequential;
pub use optim::{sgd_step, OptimizerState};
pub use tensor::{Tensor, TensorError};
