//! Pieces shared by the two training protocols.

use std::sync::Arc;
use std::thread;

use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::collectives::CollectiveError;
use crate::data::Dataset;
use crate::model::{ModelError, ModelProfile, ModelSpec, Partition};
use crate::tensor::{Tensor, TensorError};
use crate::transport::{IterationTiming, NodeId, TransportError};

#[derive(Debug, Error)]
pub enum ClusterError {
    #[error("invalid cluster: {0}")]
    Config(String),
    #[error("protocol violation at {node}: {reason}")]
    Protocol { node: NodeId, reason: String },
    #[error("{fc} is missing activations from {missing}")]
    MissingSource { fc: NodeId, missing: NodeId },
    #[error("non-finite values at {node} in iteration {iteration}")]
    NonFinite { node: NodeId, iteration: u64 },
    #[error("node thread panicked: {0}")]
    Panicked(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Collective(#[from] CollectiveError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl ClusterError {
    /// True for errors that only report that another node failed first.
    pub fn is_shutdown(&self) -> bool {
        matches!(
            self,
            ClusterError::Transport(TransportError::ClusterShutDown)
                | ClusterError::Collective(CollectiveError::Transport(TransportError::ClusterShutDown))
        )
    }
}

pub type Result<T, E = ClusterError> = std::result::Result<T, E>;

/// What a cluster trains: a real network on real data, or a count profile
/// whose messages carry sizes only.
#[derive(Debug, Clone)]
pub enum Workload {
    Numeric {
        spec: ModelSpec,
        data: Arc<Dataset>,
        init_seed: u64,
        /// CONV/FC cut; `None` for models without one (PS only).
        partition: Option<Partition>,
    },
    Profile(ModelProfile),
}

impl Workload {
    /// A numeric workload cut at the default CONV/FC boundary when the model has one.
    pub fn numeric(spec: ModelSpec, data: Arc<Dataset>, init_seed: u64) -> Result<Self> {
        if spec.profile_only {
            return Err(ModelError::NotExecutable(spec.name.clone()).into());
        }
        spec.validate()?;
        let partition = spec.split().ok();
        Ok(Workload::Numeric {
            spec,
            data,
            init_seed,
            partition,
        })
    }

    pub fn with_partition(self, p: Partition) -> Self {
        match self {
            Workload::Numeric {
                spec, data, init_seed, ..
            } => Workload::Numeric {
                spec,
                data,
                init_seed,
                partition: Some(p),
            },
            other => other,
        }
    }

    pub fn batch(&self) -> usize {
        match self {
            Workload::Numeric { spec, .. } => spec.batch,
            Workload::Profile(p) => p.batch,
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, Workload::Numeric { .. })
    }
}

/// Optimizer settings shared by every node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub momentum: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.05,
            momentum: 0.9,
        }
    }
}

/// What one closed iteration cost and, for numeric runs, its mean loss.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationOutcome {
    pub iteration: u64,
    pub timing: IterationTiming,
    pub loss: Option<f64>,
}

pub(crate) fn check_finite(node: NodeId, iteration: u64, loss: f32, tensors: &[Tensor]) -> Result<()> {
    if loss.is_finite() && tensors.iter().all(Tensor::is_finite) {
        Ok(())
    } else {
        Err(ClusterError::NonFinite { node, iteration })
    }
}

pub(crate) type Job<'a, T> = Box<dyn FnOnce() -> Result<T> + Send + 'a>;

/// Runs one job per logical node on its own thread and waits for all of them.
///
/// The first failing node shuts the transport down so its peers stop waiting;
/// the root-cause error is returned.
pub(crate) fn run_nodes<T: Send>(shutdown: &(dyn Fn() + Sync), jobs: Vec<Job<'_, T>>) -> Result<Vec<T>> {
    let results: Vec<Result<T>> = thread::scope(|s| {
        let handles: Vec<_> = jobs
            .into_iter()
            .map(|job| {
                s.spawn(move || {
                    let r = job();
                    if r.is_err() {
                        shutdown();
                    }
                    r
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join().unwrap_or_else(|p| {
                    shutdown();
                    let msg = p
                        .downcast_ref::<&str>()
                        .map(|s| s.to_string())
                        .or_else(|| p.downcast_ref::<String>().cloned())
                        .unwrap_or_default();
                    Err(ClusterError::Panicked(msg))
                })
            })
            .collect()
    });
    let mut first_shutdown = None;
    let mut out = Vec::with_capacity(results.len());
    for r in results {
        match r {
            Ok(v) => out.push(v),
            Err(e) if e.is_shutdown() => {
                first_shutdown.get_or_insert(e);
            }
            Err(e) => return Err(e),
        }
    }
    match first_shutdown {
        Some(e) => Err(e),
        None => Ok(out),
    }
}
