//! Parameter-server baseline: sharded servers, worker push/pull, BSP iterations.
//!
//! Each iteration has three stages on the logical clock: worker compute,
//! gradient push, parameter pull.

use std::collections::BTreeMap;

use crate::checkpoint::Checkpoint;
use crate::cluster::{check_finite, run_nodes, ClusterError, IterationOutcome, Job, Result, TrainConfig, Workload};
use crate::collectives::{Buffer, Channel};
use crate::model::ModelSpec;
use crate::network::Sequential;
use crate::optim::{sgd_step, OptimizerState};
use crate::tensor::Tensor;
use crate::transport::{Block, NetConfig, NodeId, PhaseKey, SimTransport, Source, Tag, Transport};

pub const STAGE_COMPUTE: u8 = 0;
pub const STAGE_PUSH: u8 = 1;
pub const STAGE_PULL: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PsClusterPlan {
    pub workers: usize,
    pub servers: usize,
    /// Samples per worker per iteration.
    pub batch: usize,
}

impl PsClusterPlan {
    pub fn new(workers: usize, servers: usize, batch: usize) -> Result<Self> {
        if workers == 0 || servers == 0 || batch == 0 {
            return Err(ClusterError::Config(format!(
                "need at least one worker, server and sample (got {workers}, {servers}, {batch})"
            )));
        }
        Ok(Self {
            workers,
            servers,
            batch,
        })
    }

    /// Workers first, then servers.
    pub fn nodes(&self) -> Vec<NodeId> {
        (0..self.workers as u32)
            .map(NodeId::worker)
            .chain((0..self.servers as u32).map(NodeId::server))
            .collect()
    }
}

/// Which server owns each parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardMap {
    owner: Vec<usize>,
    sizes: Vec<u64>,
    blocks: Vec<Block>,
    servers: usize,
}

impl ShardMap {
    /// Greedy largest-first placement: each tensor goes to the least-loaded
    /// server. Loads end up within one tensor of each other.
    pub fn balanced(sizes: &[u64], blocks: &[Block], servers: usize) -> Self {
        assert_eq!(sizes.len(), blocks.len());
        assert!(servers > 0);
        let mut order: Vec<usize> = (0..sizes.len()).collect();
        order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
        let mut load = vec![0u64; servers];
        let mut owner = vec![0; sizes.len()];
        for i in order {
            let s = (0..servers).min_by_key(|&s| (load[s], s)).unwrap();
            owner[i] = s;
            load[s] += sizes[i];
        }
        Self {
            owner,
            sizes: sizes.to_vec(),
            blocks: blocks.to_vec(),
            servers,
        }
    }

    /// Count-profile sharding: each block is cut into `servers` near-equal pieces.
    pub fn even(conv: u64, fc: u64, servers: usize) -> Self {
        let mut sizes = Vec::new();
        let mut blocks = Vec::new();
        let mut owner = Vec::new();
        for (block, total) in [(Block::Conv, conv), (Block::Fc, fc)] {
            let n = servers as u64;
            for s in 0..servers {
                sizes.push(total / n + u64::from((s as u64) < total % n));
                blocks.push(block);
                owner.push(s);
            }
        }
        Self {
            owner,
            sizes,
            blocks,
            servers,
        }
    }

    pub fn len(&self) -> usize {
        self.owner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.owner.is_empty()
    }

    pub fn servers(&self) -> usize {
        self.servers
    }

    pub fn server_of(&self, tensor: usize) -> usize {
        self.owner[tensor]
    }

    pub fn size(&self, tensor: usize) -> u64 {
        self.sizes[tensor]
    }

    /// Tensors owned by `server`, ascending.
    pub fn tensors_of(&self, server: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.owner[i] == server).collect()
    }

    pub fn load(&self, server: usize) -> u64 {
        self.tensors_of(server).iter().map(|&i| self.sizes[i]).sum()
    }

    /// The non-empty per-block message groups for `server`, in a fixed order.
    pub fn groups(&self, server: usize) -> Vec<(Block, Vec<usize>)> {
        [Block::Conv, Block::Fc, Block::Other]
            .into_iter()
            .filter_map(|b| {
                let ids: Vec<usize> = self
                    .tensors_of(server)
                    .into_iter()
                    .filter(|&i| self.blocks[i] == b)
                    .collect();
                (!ids.is_empty()).then_some((b, ids))
            })
            .collect()
    }
}

/// Block of every parameter tensor of `spec`, given the CONV/FC cut.
pub fn param_blocks(spec: &ModelSpec, split_index: Option<usize>) -> Vec<Block> {
    let mut out = Vec::new();
    for (i, kind) in spec.layers.iter().enumerate() {
        let block = match split_index {
            Some(cut) if i < cut => Block::Conv,
            Some(_) => Block::Fc,
            None => Block::Other,
        };
        out.extend(std::iter::repeat_n(block, kind.param_shapes().len()));
    }
    out
}

fn check_sizes(shards: &ShardMap, bufs: &[Buffer], node: NodeId) -> Result<()> {
    let ok = bufs.len() == shards.len() && bufs.iter().enumerate().all(|(i, b)| b.elements() == shards.size(i));
    if ok {
        Ok(())
    } else {
        Err(ClusterError::Protocol {
            node,
            reason: format!("{} tensors do not match the {}-tensor shard map", bufs.len(), shards.len()),
        })
    }
}

/// Sends each server the gradients of the tensors it owns, one message per block.
pub fn ps_push(t: &dyn Transport, worker: NodeId, shards: &ShardMap, grads: &[Buffer], phase: PhaseKey) -> Result<()> {
    check_sizes(shards, grads, worker)?;
    for s in 0..shards.servers() {
        for (block, ids) in shards.groups(s) {
            let parts: Vec<&Buffer> = ids.iter().map(|&i| &grads[i]).collect();
            let ch = Channel::new(Tag::GradPush, block, phase);
            t.send(Buffer::concat(&parts)?.message(worker, NodeId::server(s as u32), ch))?;
        }
    }
    Ok(())
}

/// Blocks until every server has sent back its updated tensors; `like`
/// supplies the shapes.
pub fn ps_pull(t: &dyn Transport, worker: NodeId, shards: &ShardMap, like: &[Buffer]) -> Result<Vec<Buffer>> {
    check_sizes(shards, like, worker)?;
    let mut out: Vec<Option<Buffer>> = vec![None; like.len()];
    for s in 0..shards.servers() {
        for (_, ids) in shards.groups(s) {
            let msg = t.recv(worker, Tag::ParamPull, Source::Node(NodeId::server(s as u32)))?;
            let n: u64 = ids.iter().map(|&i| shards.size(i)).sum();
            let flat = Buffer::decode(&msg, &[n as usize])?;
            let shapes: Vec<&Buffer> = ids.iter().map(|&i| &like[i]).collect();
            for (&i, b) in ids.iter().zip(flat.split_like(&shapes)?) {
                out[i] = Some(b);
            }
        }
    }
    Ok(out.into_iter().map(|b| b.expect("every tensor has a server")).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsConfig {
    pub plan: PsClusterPlan,
    pub train: TrainConfig,
    /// Compute seconds charged to each worker per iteration.
    pub compute_s: f64,
}

struct Server {
    id: NodeId,
    tensors: Vec<usize>,
    params: Vec<Buffer>,
    opt: Option<OptimizerState>,
}

struct Worker {
    id: NodeId,
    index: usize,
    net: Option<Sequential>,
    params: Vec<Buffer>,
}

pub struct PsCluster {
    cfg: PsConfig,
    workload: Workload,
    shards: ShardMap,
    transport: Box<dyn Transport>,
    servers: Vec<Server>,
    workers: Vec<Worker>,
    iteration: u64,
}

impl PsCluster {
    pub fn simulated(cfg: PsConfig, workload: Workload, net: NetConfig) -> Result<Self> {
        net.validate().map_err(ClusterError::Config)?;
        let t = SimTransport::new(&cfg.plan.nodes(), net);
        Self::new(cfg, workload, Box::new(t))
    }

    /// `transport` must know every node in `cfg.plan.nodes()`.
    pub fn new(cfg: PsConfig, workload: Workload, transport: Box<dyn Transport>) -> Result<Self> {
        let plan = cfg.plan;
        if workload.batch() != plan.batch {
            return Err(ClusterError::Config(format!(
                "model batch {} differs from plan batch {}",
                workload.batch(),
                plan.batch
            )));
        }
        if !(cfg.compute_s >= 0.0 && cfg.compute_s.is_finite()) {
            return Err(ClusterError::Config(format!("compute time {} must be non-negative", cfg.compute_s)));
        }
        let (shards, init, net) = match &workload {
            Workload::Numeric {
                spec,
                init_seed,
                partition,
                ..
            } => {
                let net = spec.build(*init_seed)?;
                let params = net.params();
                let sizes: Vec<u64> = params.iter().map(|p| p.len() as u64).collect();
                let blocks = param_blocks(spec, partition.as_ref().map(|p| p.split_index));
                let shards = ShardMap::balanced(&sizes, &blocks, plan.servers);
                (shards, params.into_iter().map(Buffer::Real).collect::<Vec<_>>(), Some(net))
            }
            Workload::Profile(p) => {
                p.validate()?;
                let shards = ShardMap::even(p.conv_params, p.fc_params(), plan.servers);
                let init = (0..shards.len()).map(|i| Buffer::Sized(shards.size(i))).collect();
                (shards, init, None)
            }
        };
        let mut servers = Vec::with_capacity(plan.servers);
        for s in 0..plan.servers {
            let tensors = shards.tensors_of(s);
            let params: Vec<Buffer> = tensors.iter().map(|&i| init[i].clone()).collect();
            let opt = if net.is_some() {
                let ts: Vec<Tensor> = params.iter().filter_map(|b| b.tensor().cloned()).collect();
                Some(OptimizerState::new(cfg.train.learning_rate, cfg.train.momentum, &ts)?)
            } else {
                None
            };
            servers.push(Server {
                id: NodeId::server(s as u32),
                tensors,
                params,
                opt,
            });
        }
        let workers = (0..plan.workers)
            .map(|w| Worker {
                id: NodeId::worker(w as u32),
                index: w,
                net: net.clone(),
                params: init.clone(),
            })
            .collect();
        Ok(Self {
            cfg,
            workload,
            shards,
            transport,
            servers,
            workers,
            iteration: 0,
        })
    }

    pub fn config(&self) -> &PsConfig {
        &self.cfg
    }

    pub fn shards(&self) -> &ShardMap {
        &self.shards
    }

    pub fn transport(&self) -> &dyn Transport {
        &*self.transport
    }

    /// Completed iterations.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Runs one BSP iteration on every node and closes it on the ledger.
    pub fn train_iteration(&mut self) -> Result<IterationOutcome> {
        let it = self.iteration;
        let plan = self.cfg.plan;
        let compute_s = self.cfg.compute_s;
        let t: &dyn Transport = &*self.transport;
        let shards = &self.shards;
        let data = match &self.workload {
            Workload::Numeric { data, .. } => Some(&**data),
            Workload::Profile(_) => None,
        };

        let mut jobs: Vec<Job<'_, Option<f64>>> = Vec::new();
        for w in self.workers.iter_mut() {
            jobs.push(Box::new(move || {
                t.ledger().record_compute(w.id, PhaseKey::new(it, STAGE_COMPUTE), compute_s);
                let mut loss = None;
                let grads = match (&w.net, data) {
                    (Some(net), Some(data)) => {
                        let b = data.part(it, w.index, plan.workers, plan.batch);
                        let lg = net.loss_and_grads(&b.inputs, &b.labels)?;
                        check_finite(w.id, it, lg.loss, &lg.param_grads)?;
                        loss = Some(f64::from(lg.loss));
                        lg.param_grads.into_iter().map(Buffer::Real).collect()
                    }
                    _ => w.params.clone(),
                };
                ps_push(t, w.id, shards, &grads, PhaseKey::new(it, STAGE_PUSH))?;
                let fresh = ps_pull(t, w.id, shards, &w.params)?;
                if let Some(net) = &mut w.net {
                    let ts: Vec<Tensor> = fresh.iter().filter_map(|b| b.tensor().cloned()).collect();
                    net.set_params(&ts)?;
                }
                w.params = fresh;
                Ok(loss)
            }));
        }
        for s in self.servers.iter_mut() {
            jobs.push(Box::new(move || {
                serve(t, s, shards, plan, it)?;
                Ok(None)
            }));
        }
        let shutdown = || t.shutdown();
        let losses = run_nodes(&shutdown, jobs)?;

        let timing = t.ledger().close_iteration(it);
        self.iteration += 1;
        let loss = data.map(|_| losses.iter().flatten().sum::<f64>() / (plan.workers * plan.batch) as f64);
        Ok(IterationOutcome {
            iteration: it,
            timing,
            loss,
        })
    }

    pub fn run(&mut self, iterations: u64) -> Result<Vec<IterationOutcome>> {
        (0..iterations).map(|_| self.train_iteration()).collect()
    }

    /// Global parameters assembled from the servers (numeric runs).
    pub fn params(&self) -> Vec<Tensor> {
        let mut out: BTreeMap<usize, Tensor> = BTreeMap::new();
        for s in &self.servers {
            for (&i, b) in s.tensors.iter().zip(&s.params) {
                if let Some(t) = b.tensor() {
                    out.insert(i, t.clone());
                }
            }
        }
        out.into_values().collect()
    }

    /// Parameters as last pulled by worker `w`.
    pub fn worker_params(&self, w: usize) -> Vec<Tensor> {
        self.workers[w].params.iter().filter_map(|b| b.tensor().cloned()).collect()
    }

    /// One checkpoint per server, taken at the current barrier.
    pub fn checkpoint(&self) -> Result<Vec<Checkpoint>> {
        self.servers
            .iter()
            .map(|s| {
                let opt = s.opt.clone().ok_or_else(|| {
                    ClusterError::Config("count-profile runs have no parameters to checkpoint".into())
                })?;
                Ok(Checkpoint {
                    iteration: self.iteration,
                    node: s.id,
                    params: s.params.iter().filter_map(|b| b.tensor().cloned()).collect(),
                    optimizer: opt,
                })
            })
            .collect()
    }

    /// Rebuilds a cluster from server checkpoints; workers start from the
    /// checkpointed global parameters.
    pub fn restore(
        cfg: PsConfig,
        workload: Workload,
        transport: Box<dyn Transport>,
        checkpoints: &[Checkpoint],
    ) -> Result<Self> {
        let mut c = Self::new(cfg, workload, transport)?;
        if checkpoints.len() != c.servers.len() {
            return Err(ClusterError::Config(format!(
                "{} checkpoints for {} servers",
                checkpoints.len(),
                c.servers.len()
            )));
        }
        let iteration = checkpoints[0].iteration;
        for s in c.servers.iter_mut() {
            let ck = checkpoints
                .iter()
                .find(|k| k.node == s.id)
                .ok_or_else(|| ClusterError::Config(format!("no checkpoint for {}", s.id)))?;
            if ck.iteration != iteration || ck.params.len() != s.params.len() {
                return Err(ClusterError::Config(format!("checkpoint for {} does not match the cluster", s.id)));
            }
            for (b, p) in s.params.iter().zip(&ck.params) {
                if b.shape() != p.shape() {
                    return Err(ClusterError::Config(format!("checkpoint for {} has wrong shapes", s.id)));
                }
            }
            s.params = ck.params.iter().cloned().map(Buffer::Real).collect();
            s.opt = Some(ck.optimizer.clone());
        }
        let global = c.params();
        for w in c.workers.iter_mut() {
            if let Some(net) = &mut w.net {
                net.set_params(&global)?;
            }
            w.params = global.iter().cloned().map(Buffer::Real).collect();
        }
        c.iteration = iteration;
        Ok(c)
    }
}

fn serve(t: &dyn Transport, s: &mut Server, shards: &ShardMap, plan: PsClusterPlan, it: u64) -> Result<()> {
    let server_index = s.id.index as usize;
    let local: BTreeMap<usize, usize> = s.tensors.iter().enumerate().map(|(j, &i)| (i, j)).collect();
    let groups = shards.groups(server_index);
    let mut grads: Vec<Option<Buffer>> = vec![None; s.tensors.len()];
    for (_, ids) in &groups {
        let n: u64 = ids.iter().map(|&i| shards.size(i)).sum();
        let mut acc: Option<Buffer> = None;
        for w in 0..plan.workers {
            let msg = t.recv(s.id, Tag::GradPush, Source::Node(NodeId::worker(w as u32)))?;
            let b = Buffer::decode(&msg, &[n as usize])?;
            acc = Some(match acc {
                None => b,
                Some(a) => Buffer::sum(&a, &b)?,
            });
        }
        let like: Vec<&Buffer> = ids.iter().map(|i| &s.params[local[i]]).collect();
        let parts = acc.expect("at least one worker").split_like(&like)?;
        for (i, g) in ids.iter().zip(parts) {
            grads[local[i]] = Some(g);
        }
    }
    if let Some(opt) = &mut s.opt {
        let mut params: Vec<Tensor> = s.params.iter().filter_map(|b| b.tensor().cloned()).collect();
        let g: Vec<Tensor> = grads.into_iter().filter_map(|b| b.and_then(Buffer::into_tensor)).collect();
        sgd_step(&mut params, &g, plan.workers * plan.batch, opt)?;
        check_finite(s.id, it, 0.0, &params)?;
        s.params = params.into_iter().map(Buffer::Real).collect();
    }
    let phase = PhaseKey::new(it, STAGE_PULL);
    for w in 0..plan.workers {
        for (block, ids) in &groups {
            let parts: Vec<&Buffer> = ids.iter().map(|i| &s.params[local[i]]).collect();
            let ch = Channel::new(Tag::ParamPull, *block, phase);
            t.send(Buffer::concat(&parts)?.message(s.id, NodeId::worker(w as u32), ch))?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lpt_balances_within_one_tensor() {
        let sizes = [100, 80, 60, 40, 30, 20, 5];
        let m = ShardMap::balanced(&sizes, &[Block::Other; 7], 3);
        let loads: Vec<u64> = (0..3).map(|s| m.load(s)).collect();
        let spread = loads.iter().max().unwrap() - loads.iter().min().unwrap();
        assert!(spread <= *sizes.iter().max().unwrap());
        assert_eq!(loads.iter().sum::<u64>(), sizes.iter().sum::<u64>());
    }

    #[test]
    fn even_split_is_exact_when_divisible() {
        let m = ShardMap::even(10, 30, 2);
        assert_eq!(m.load(0), 20);
        assert_eq!(m.load(1), 20);
        assert_eq!(m.groups(0).len(), 2);
    }
}
