//! Layer-separated training.
//!
//! CONV workers hold the layers before the cut and train them data-parallel.
//! FC workers hold full replicas of the layers after the cut. Each iteration:
//!
//! | stage | work                                                        |
//! |-------|-------------------------------------------------------------|
//! | 0     | CONV workers run their block (compute charged here)          |
//! | 1     | CONV workers push boundary activations to their FC worker   |
//! | 2     | FC workers run their block on the concatenated activations  |
//! | 3     | FC workers return per-source boundary gradients             |
//! | 4     | CONV allreduce (lane 0) and FC allreduce (lane 1) overlap   |

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::cluster::{check_finite, run_nodes, ClusterError, IterationOutcome, Job, Result, TrainConfig, Workload};
use crate::collectives::{allreduce_sum, gather, scatter, Buffer, Channel, Group};
use crate::network::{ForwardTrace, Sequential};
use crate::optim::{sgd_step, OptimizerState};
use crate::tensor::Tensor;
use crate::transport::{Block, NetConfig, NodeId, PhaseKey, SimTransport, Source, Tag, Transport};

pub const STAGE_CONV_COMPUTE: u8 = 0;
pub const STAGE_ACTIVATIONS: u8 = 1;
pub const STAGE_FC_COMPUTE: u8 = 2;
pub const STAGE_BOUNDARY: u8 = 3;
pub const STAGE_EXCHANGE: u8 = 4;
/// Checkpoint replicas; recorded on the ledger but not timed.
pub const STAGE_CHECKPOINT: u8 = 5;
pub const LANE_CONV: u8 = 0;
pub const LANE_FC: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StanzaClusterPlan {
    pub conv_workers: usize,
    pub fc_workers: usize,
    /// Samples per CONV worker per iteration.
    pub batch: usize,
}

impl StanzaClusterPlan {
    pub fn new(conv_workers: usize, fc_workers: usize, batch: usize) -> Result<Self> {
        if conv_workers == 0 || fc_workers == 0 || batch == 0 {
            return Err(ClusterError::Config(format!(
                "need at least one CONV worker, FC worker and sample (got {conv_workers}, {fc_workers}, {batch})"
            )));
        }
        if fc_workers > conv_workers {
            return Err(ClusterError::Config(format!(
                "{fc_workers} FC workers would leave some without CONV workers ({conv_workers})"
            )));
        }
        Ok(Self {
            conv_workers,
            fc_workers,
            batch,
        })
    }

    /// FC worker serving CONV worker `conv`: contiguous blocks whose sizes
    /// differ by at most one.
    pub fn fc_of(&self, conv: usize) -> usize {
        conv * self.fc_workers / self.conv_workers
    }

    /// CONV workers served by FC worker `fc`, ascending.
    pub fn group(&self, fc: usize) -> Vec<usize> {
        (0..self.conv_workers).filter(|&i| self.fc_of(i) == fc).collect()
    }

    /// Largest number of CONV workers served by one FC worker.
    pub fn max_group(&self) -> usize {
        self.conv_workers.div_ceil(self.fc_workers)
    }

    /// CONV workers first, then FC workers.
    pub fn nodes(&self) -> Vec<NodeId> {
        (0..self.conv_workers as u32)
            .map(NodeId::conv)
            .chain((0..self.fc_workers as u32).map(NodeId::fc))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StanzaConfig {
    pub plan: StanzaClusterPlan,
    pub train: TrainConfig,
    /// CONV-block compute seconds per CONV worker per iteration.
    pub conv_compute_s: f64,
    /// FC-block compute seconds per CONV worker's activations.
    pub fc_compute_s: f64,
    /// Seeds surplus selection in allreduce and the placement of FC replicas.
    pub seed: u64,
}

/// Boundary activations of one CONV worker for one iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBatch {
    pub source: NodeId,
    pub iteration: u64,
    pub tensor: Buffer,
}

pub struct ConvWorker {
    pub id: NodeId,
    index: usize,
    front: Option<Sequential>,
    opt: Option<OptimizerState>,
    /// Shape of one pushed batch: `[K, ...boundary]`.
    batch_shape: Vec<usize>,
    trace: Option<ForwardTrace>,
    pushed: Option<u64>,
    /// Redundant FC checkpoints held for FC workers, by owner.
    replicas: BTreeMap<NodeId, Vec<u8>>,
}

impl ConvWorker {
    /// Runs the CONV block on `input` and keeps the trace for the backward pass.
    pub fn forward(&mut self, iteration: u64, input: &Tensor) -> Result<ActivationBatch> {
        let front = self.front.as_ref().ok_or_else(|| self.protocol("count-profile worker has no network"))?;
        let (out, trace) = front.forward(input)?;
        out.expect_shape(&self.batch_shape)?;
        self.trace = Some(trace);
        Ok(ActivationBatch {
            source: self.id,
            iteration,
            tensor: Buffer::Real(out),
        })
    }

    fn protocol(&self, reason: &str) -> ClusterError {
        ClusterError::Protocol {
            node: self.id,
            reason: reason.into(),
        }
    }

    pub fn push_activation(&mut self, t: &dyn Transport, plan: &StanzaClusterPlan, batch: ActivationBatch) -> Result<()> {
        let expected: u64 = self.batch_shape.iter().product::<usize>() as u64;
        if batch.tensor.elements() != expected {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                expected: self.batch_shape.clone(),
                actual: batch.tensor.shape(),
            }
            .into());
        }
        let fc = plan.fc_of(self.index);
        let group = fc_group(plan, fc)?;
        let ch = Channel::new(Tag::Activations, Block::Fc, PhaseKey::new(batch.iteration, STAGE_ACTIVATIONS));
        gather(t, &group, NodeId::fc(fc as u32), self.id, Some(batch.tensor), &self.batch_shape, ch)?;
        self.pushed = Some(batch.iteration);
        Ok(())
    }

    /// Waits for this worker's boundary gradient from its FC worker.
    pub fn pull_fc(&mut self, t: &dyn Transport, plan: &StanzaClusterPlan) -> Result<Buffer> {
        let it = self.pushed.take().ok_or_else(|| self.protocol("pull_fc before push_activation"))?;
        let fc = plan.fc_of(self.index);
        let group = fc_group(plan, fc)?;
        let ch = Channel::new(Tag::BoundaryGrads, Block::Fc, PhaseKey::new(it, STAGE_BOUNDARY));
        let g = scatter(t, &group, NodeId::fc(fc as u32), self.id, None, &self.batch_shape, ch)?;
        Ok(g.expect("members always receive"))
    }

    /// Backpropagates the boundary gradient through the CONV block.
    pub fn backward(&mut self, grad: &Tensor) -> Result<Vec<Tensor>> {
        let trace = self.trace.take().ok_or_else(|| self.protocol("backward without a forward pass"))?;
        let front = self.front.as_ref().expect("forward succeeded");
        Ok(front.backward(&trace, grad)?.1)
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.front.as_ref().map(Sequential::params).unwrap_or_default()
    }

    /// Redundant FC checkpoint bytes this worker holds for `owner`.
    pub fn replica(&self, owner: NodeId) -> Option<&[u8]> {
        self.replicas.get(&owner).map(Vec::as_slice)
    }
}

/// Output of one FC step.
#[derive(Debug, Clone)]
pub struct FcStep {
    /// Summed loss over all samples of the group, if numeric.
    pub loss_sum: Option<f64>,
    /// Per-source gradients w.r.t. the received activations, in group order.
    pub boundary: Vec<(NodeId, Buffer)>,
    pub grads: Vec<Buffer>,
}

pub struct FcWorker {
    pub id: NodeId,
    back: Option<Sequential>,
    opt: Option<OptimizerState>,
    sources: Vec<NodeId>,
    batch_shape: Vec<usize>,
    fc_params: u64,
}

impl FcWorker {
    /// Forward and backward through the FC block on the group's activations,
    /// concatenated in ascending source order. `labels` follow the same order.
    pub fn fc_step(&self, mut batches: Vec<ActivationBatch>, labels: Option<&[usize]>) -> Result<FcStep> {
        for &src in &self.sources {
            if !batches.iter().any(|b| b.source == src) {
                return Err(ClusterError::MissingSource { fc: self.id, missing: src });
            }
        }
        if batches.len() != self.sources.len() {
            return Err(ClusterError::Protocol {
                node: self.id,
                reason: format!("{} batches for {} sources", batches.len(), self.sources.len()),
            });
        }
        batches.sort_by_key(|b| b.source);
        match (&self.back, labels) {
            (Some(back), Some(labels)) => {
                let parts: Vec<Tensor> = batches
                    .iter()
                    .map(|b| b.tensor.tensor().cloned().ok_or(crate::collectives::CollectiveError::MixedBuffers))
                    .collect::<std::result::Result<_, _>>()?;
                let input = Tensor::concat_batch(&parts)?;
                let lg = back.loss_and_grads(&input, labels)?;
                let mut row = 0;
                let mut boundary = Vec::with_capacity(parts.len());
                for (b, p) in batches.iter().zip(&parts) {
                    boundary.push((b.source, Buffer::Real(lg.grad_in.slice_batch(row, row + p.batch()))));
                    row += p.batch();
                }
                Ok(FcStep {
                    loss_sum: Some(f64::from(lg.loss)),
                    boundary,
                    grads: lg.param_grads.into_iter().map(Buffer::Real).collect(),
                })
            }
            _ => Ok(FcStep {
                loss_sum: None,
                boundary: batches.iter().map(|b| (b.source, Buffer::Sized(b.tensor.elements()))).collect(),
                grads: vec![Buffer::Sized(self.fc_params)],
            }),
        }
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.back.as_ref().map(Sequential::params).unwrap_or_default()
    }
}

fn fc_group(plan: &StanzaClusterPlan, fc: usize) -> Result<Group> {
    Ok(Group::new(plan.group(fc).into_iter().map(|i| NodeId::conv(i as u32)).collect(), 0)?)
}

/// Sums `grads` across `group` with one flattened allreduce; a one-member
/// group returns them unchanged without touching the network.
pub fn pull_grad(t: &dyn Transport, group: &Group, me: NodeId, grads: Vec<Buffer>, ch: Channel) -> Result<Vec<Buffer>> {
    if group.len() == 1 {
        return Ok(grads);
    }
    let refs: Vec<&Buffer> = grads.iter().collect();
    let flat = Buffer::concat(&refs)?;
    let sum = allreduce_sum(t, group, me, flat, ch)?;
    Ok(sum.split_like(&refs)?)
}

fn apply(opt: &mut Option<OptimizerState>, net: &mut Option<Sequential>, grads: Vec<Buffer>, n: usize, node: NodeId, it: u64) -> Result<()> {
    if let (Some(opt), Some(net)) = (opt, net) {
        let mut params = net.params();
        let g: Vec<Tensor> = grads.into_iter().filter_map(Buffer::into_tensor).collect();
        sgd_step(&mut params, &g, n, opt)?;
        check_finite(node, it, 0.0, &params)?;
        net.set_params(&params)?;
    }
    Ok(())
}

pub struct StanzaCluster {
    cfg: StanzaConfig,
    workload: Workload,
    transport: Box<dyn Transport>,
    conv: Vec<ConvWorker>,
    fc: Vec<FcWorker>,
    conv_group: Group,
    fc_group: Group,
    conv_params: u64,
    iteration: u64,
}

/// Checkpoints of every node plus the redundant FC copies.
#[derive(Debug, Clone, PartialEq)]
pub struct StanzaCheckpoint {
    pub nodes: Vec<Checkpoint>,
    /// `(holder, owner)` for each FC replica placed on a CONV worker.
    pub replicas: Vec<(NodeId, NodeId)>,
}

impl StanzaCluster {
    pub fn simulated(cfg: StanzaConfig, workload: Workload, net: NetConfig) -> Result<Self> {
        net.validate().map_err(ClusterError::Config)?;
        let t = SimTransport::new(&cfg.plan.nodes(), net);
        Self::new(cfg, workload, Box::new(t))
    }

    /// `transport` must know every node in `cfg.plan.nodes()`.
    pub fn new(cfg: StanzaConfig, workload: Workload, transport: Box<dyn Transport>) -> Result<Self> {
        let plan = cfg.plan;
        if workload.batch() != plan.batch {
            return Err(ClusterError::Config(format!(
                "model batch {} differs from plan batch {}",
                workload.batch(),
                plan.batch
            )));
        }
        for v in [cfg.conv_compute_s, cfg.fc_compute_s] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(ClusterError::Config(format!("compute time {v} must be non-negative")));
            }
        }
        let (front, back, batch_shape, conv_params, fc_params) = match &workload {
            Workload::Numeric {
                spec,
                init_seed,
                partition,
                ..
            } => {
                let p = partition
                    .as_ref()
                    .ok_or_else(|| ClusterError::Config(format!("model {} has no CONV/FC cut", spec.name)))?;
                let (front, back) = spec.build_split(*init_seed, p)?;
                let mut shape = vec![plan.batch];
                shape.extend_from_slice(&p.boundary_shape);
                (Some(front), Some(back), shape, p.conv_param_count, p.fc_param_count)
            }
            Workload::Profile(p) => {
                p.validate()?;
                (None, None, vec![plan.batch, p.activations as usize], p.conv_params, p.fc_params())
            }
        };
        let opt_for = |net: &Option<Sequential>| -> Result<Option<OptimizerState>> {
            Ok(match net {
                Some(n) => Some(OptimizerState::new(cfg.train.learning_rate, cfg.train.momentum, &n.params())?),
                None => None,
            })
        };
        let conv = (0..plan.conv_workers)
            .map(|i| {
                Ok(ConvWorker {
                    id: NodeId::conv(i as u32),
                    index: i,
                    front: front.clone(),
                    opt: opt_for(&front)?,
                    batch_shape: batch_shape.clone(),
                    trace: None,
                    pushed: None,
                    replicas: BTreeMap::new(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let fc = (0..plan.fc_workers)
            .map(|j| {
                Ok(FcWorker {
                    id: NodeId::fc(j as u32),
                    back: back.clone(),
                    opt: opt_for(&back)?,
                    sources: plan.group(j).into_iter().map(|i| NodeId::conv(i as u32)).collect(),
                    batch_shape: batch_shape.clone(),
                    fc_params,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let conv_group = Group::new((0..plan.conv_workers as u32).map(NodeId::conv).collect(), cfg.seed)?;
        let fc_group = Group::new((0..plan.fc_workers as u32).map(NodeId::fc).collect(), cfg.seed.wrapping_add(1))?;
        Ok(Self {
            cfg,
            workload,
            transport,
            conv,
            fc,
            conv_group,
            fc_group,
            conv_params,
            iteration: 0,
        })
    }

    pub fn config(&self) -> &StanzaConfig {
        &self.cfg
    }

    pub fn transport(&self) -> &dyn Transport {
        &*self.transport
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn conv_worker(&self, i: usize) -> &ConvWorker {
        &self.conv[i]
    }

    pub fn conv_worker_mut(&mut self, i: usize) -> &mut ConvWorker {
        &mut self.conv[i]
    }

    pub fn fc_worker(&self, j: usize) -> &FcWorker {
        &self.fc[j]
    }

    /// CONV parameters of worker 0 followed by FC parameters of FC worker 0:
    /// the full model in layer order.
    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.conv[0].params();
        p.extend(self.fc[0].params());
        p
    }

    pub fn train_iteration(&mut self) -> Result<IterationOutcome> {
        let it = self.iteration;
        let cfg = self.cfg;
        let plan = cfg.plan;
        let total = plan.conv_workers * plan.batch;
        let t: &dyn Transport = &*self.transport;
        let data = match &self.workload {
            Workload::Numeric { data, .. } => Some(&**data),
            Workload::Profile(_) => None,
        };
        let conv_group = &self.conv_group;
        let fc_group = &self.fc_group;
        let conv_params = self.conv_params;

        let mut jobs: Vec<Job<'_, Option<f64>>> = Vec::new();
        for w in self.conv.iter_mut() {
            jobs.push(Box::new(move || {
                t.ledger().record_compute(w.id, PhaseKey::new(it, STAGE_CONV_COMPUTE), cfg.conv_compute_s);
                let batch = match data {
                    Some(d) => w.forward(it, &d.part(it, w.index, plan.conv_workers, plan.batch).inputs)?,
                    None => ActivationBatch {
                        source: w.id,
                        iteration: it,
                        tensor: Buffer::Sized(w.batch_shape.iter().product::<usize>() as u64),
                    },
                };
                if let Some(a) = batch.tensor.tensor() {
                    check_finite(w.id, it, 0.0, std::slice::from_ref(a))?;
                }
                w.push_activation(t, &plan, batch)?;
                let g = w.pull_fc(t, &plan)?;
                let grads = match g {
                    Buffer::Real(g) => {
                        let grads = w.backward(&g)?;
                        check_finite(w.id, it, 0.0, &grads)?;
                        grads.into_iter().map(Buffer::Real).collect()
                    }
                    Buffer::Sized(_) => vec![Buffer::Sized(conv_params)],
                };
                let ch = Channel::new(Tag::AllreduceChunk, Block::Conv, PhaseKey::new(it, STAGE_EXCHANGE).lane(LANE_CONV));
                let summed = pull_grad(t, conv_group, w.id, grads, ch)?;
                apply(&mut w.opt, &mut w.front, summed, total, w.id, it)?;
                Ok(None)
            }));
        }
        for f in self.fc.iter_mut() {
            jobs.push(Box::new(move || {
                let group = Group::new(f.sources.clone(), 0)?;
                let ch = Channel::new(Tag::Activations, Block::Fc, PhaseKey::new(it, STAGE_ACTIVATIONS));
                let got = gather(t, &group, f.id, f.id, None, &f.batch_shape, ch)?;
                let batches: Vec<ActivationBatch> = got
                    .into_iter()
                    .map(|(source, tensor)| ActivationBatch {
                        source,
                        iteration: it,
                        tensor,
                    })
                    .collect();
                t.ledger().record_compute(
                    f.id,
                    PhaseKey::new(it, STAGE_FC_COMPUTE),
                    cfg.fc_compute_s * f.sources.len() as f64,
                );
                let labels: Option<Vec<usize>> = data.map(|d| {
                    f.sources
                        .iter()
                        .flat_map(|s| d.part(it, s.index as usize, plan.conv_workers, plan.batch).labels)
                        .collect()
                });
                let step = f.fc_step(batches, labels.as_deref())?;
                if let Some(l) = step.loss_sum {
                    let g: Vec<Tensor> = step.grads.iter().filter_map(|b| b.tensor().cloned()).collect();
                    check_finite(f.id, it, l as f32, &g)?;
                }
                let parts: Vec<Buffer> = step.boundary.into_iter().map(|(_, b)| b).collect();
                let ch = Channel::new(Tag::BoundaryGrads, Block::Fc, PhaseKey::new(it, STAGE_BOUNDARY));
                scatter(t, &group, f.id, f.id, Some(parts), &[], ch)?;
                let ch = Channel::new(Tag::AllreduceChunk, Block::Fc, PhaseKey::new(it, STAGE_EXCHANGE).lane(LANE_FC));
                let summed = pull_grad(t, fc_group, f.id, step.grads, ch)?;
                apply(&mut f.opt, &mut f.back, summed, total, f.id, it)?;
                Ok(step.loss_sum)
            }));
        }
        let shutdown = || t.shutdown();
        let losses = run_nodes(&shutdown, jobs)?;
        let timing = t.ledger().close_iteration(it);
        self.iteration += 1;
        let loss = data.map(|_| losses.iter().flatten().sum::<f64>() / total as f64);
        Ok(IterationOutcome {
            iteration: it,
            timing,
            loss,
        })
    }

    pub fn run(&mut self, iterations: u64) -> Result<Vec<IterationOutcome>> {
        (0..iterations).map(|_| self.train_iteration()).collect()
    }

    /// CONV worker that receives FC worker `fc`'s redundant checkpoint after
    /// `iteration` completed iterations.
    pub fn replica_holder(&self, fc: usize, iteration: u64) -> NodeId {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ iteration.rotate_left(17) ^ (fc as u64).rotate_left(41));
        NodeId::conv(rng.random_range(0..self.cfg.plan.conv_workers) as u32)
    }

    /// Checkpoints every node at the current barrier. Each FC worker also
    /// ships its checkpoint to a seeded-random CONV worker.
    pub fn checkpoint(&mut self) -> Result<StanzaCheckpoint> {
        let it = self.iteration;
        let mut nodes = Vec::new();
        let missing = || ClusterError::Config("count-profile runs have no parameters to checkpoint".into());
        for w in &self.conv {
            nodes.push(Checkpoint {
                iteration: it,
                node: w.id,
                params: w.params(),
                optimizer: w.opt.clone().ok_or_else(missing)?,
            });
        }
        let mut replicas = Vec::new();
        for (j, f) in self.fc.iter().enumerate() {
            let ck = Checkpoint {
                iteration: it,
                node: f.id,
                params: f.params(),
                optimizer: f.opt.clone().ok_or_else(missing)?,
            };
            let holder = self.replica_holder(j, it);
            let msg = crate::transport::Message::bytes(f.id, holder, Tag::Checkpoint, ck.encode())
                .in_phase(PhaseKey::new(it, STAGE_CHECKPOINT))
                .with_block(Block::Fc);
            self.transport.send(msg)?;
            let got = self.transport.recv(holder, Tag::Checkpoint, Source::Node(f.id))?;
            self.conv[holder.index as usize].replicas.insert(f.id, got.raw()?.to_vec());
            replicas.push((holder, f.id));
            nodes.push(ck);
        }
        Ok(StanzaCheckpoint { nodes, replicas })
    }

    /// Rebuilds a cluster from per-node checkpoints (an FC replica decodes to
    /// the same [`Checkpoint`] and can stand in for the primary).
    pub fn restore(
        cfg: StanzaConfig,
        workload: Workload,
        transport: Box<dyn Transport>,
        checkpoints: &[Checkpoint],
    ) -> Result<Self> {
        let mut c = Self::new(cfg, workload, transport)?;
        let find = |id: NodeId| {
            checkpoints
                .iter()
                .find(|k| k.node == id)
                .ok_or_else(|| ClusterError::Config(format!("no checkpoint for {id}")))
        };
        let iteration = checkpoints
            .first()
            .map(|k| k.iteration)
            .ok_or_else(|| ClusterError::Config("no checkpoints".into()))?;
        let restore_one = |ck: &Checkpoint, net: &mut Option<Sequential>, opt: &mut Option<OptimizerState>| -> Result<()> {
            if ck.iteration != iteration {
                return Err(ClusterError::Config(format!("{} checkpoint is from another iteration", ck.node)));
            }
            let n = net.as_mut().ok_or_else(|| ClusterError::Config("count-profile cluster".into()))?;
            n.set_params(&ck.params)?;
            *opt = Some(ck.optimizer.clone());
            Ok(())
        };
        for w in c.conv.iter_mut() {
            restore_one(find(w.id)?, &mut w.front, &mut w.opt)?;
        }
        for f in c.fc.iter_mut() {
            restore_one(find(f.id)?, &mut f.back, &mut f.opt)?;
        }
        c.iteration = iteration;
        Ok(c)
    }
}
