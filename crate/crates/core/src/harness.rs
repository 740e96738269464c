//! Experiment plumbing: configs, synthetic data, protocol runs, reports.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cluster::{ClusterError, IterationOutcome, TrainConfig, Workload};
use crate::data::{iterations_per_epoch, Dataset};
use crate::model::{load_model, ModelError, ModelSource, ModelSpec};
use crate::optim::{sgd_step, OptimizerState};
use crate::params::params_digest;
use crate::perf::{assign_nodes, Mode, PerfConstants, PerfError};
use crate::ps::{PsCluster, PsClusterPlan, PsConfig};
use crate::stanza::{StanzaCluster, StanzaClusterPlan, StanzaConfig};
use crate::tensor::Tensor;
use crate::transport::{Ledger, NetConfig, NodeId, SimTransport, TcpTransport, Transport};

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "STANZA_SEED";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Infeasible(PerfError),
    #[error("numeric failure: {0}")]
    NumericFailure(String),
    #[error("configs cannot be compared: {0}")]
    MismatchedConfigs(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Cluster(ClusterError),
}

impl HarnessError {
    /// Process exit code: 2 config, 3 infeasible, 4 numeric failure, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Model(_) | HarnessError::MismatchedConfigs(_) => 2,
            HarnessError::Infeasible(_) => 3,
            HarnessError::NumericFailure(_) => 4,
            HarnessError::Io(_) | HarnessError::Cluster(_) => 1,
        }
    }
}

impl From<ClusterError> for HarnessError {
    fn from(e: ClusterError) -> Self {
        match e {
            ClusterError::NonFinite { .. } => HarnessError::NumericFailure(e.to_string()),
            ClusterError::Config(s) => HarnessError::Config(s),
            ClusterError::Model(m) => HarnessError::Model(m),
            other => HarnessError::Cluster(other),
        }
    }
}

impl From<PerfError> for HarnessError {
    fn from(e: PerfError) -> Self {
        match e {
            PerfError::Infeasible { .. } => HarnessError::Infeasible(e),
            other => HarnessError::Config(other.to_string()),
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Io(format!("{}: {e}", path.display()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Ps,
    Stanza,
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Standard-normal inputs, uniformly random labels.
    #[default]
    Gaussian,
    /// Two well-separated classes; for checking that training makes progress.
    TwoGaussians,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    #[default]
    Sim,
    Tcp,
}

fn d_dataset_size() -> u64 {
    256
}
fn d_separation() -> f32 {
    0.1
}
fn d_bandwidth() -> f64 {
    10.0
}
fn d_lr() -> f32 {
    TrainConfig::default().learning_rate
}
fn d_momentum() -> f32 {
    TrainConfig::default().momentum
}

/// One experiment, usually read from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: RunMode,
    /// Built-in model name or path to a model file.
    pub model: String,
    pub seed: u64,
    /// Iterations to run; `epochs` takes precedence when both are set.
    #[serde(default)]
    pub iterations: Option<u64>,
    #[serde(default)]
    pub epochs: Option<u64>,
    #[serde(default = "d_dataset_size")]
    pub dataset_size: u64,
    #[serde(default)]
    pub dataset: DatasetKind,
    /// Per-pixel mean offset of the two classes in `two_gaussians`.
    #[serde(default = "d_separation")]
    pub separation: f32,
    /// Per-node batch; defaults to the model's.
    #[serde(default)]
    pub batch: Option<usize>,
    #[serde(default = "d_bandwidth")]
    pub bandwidth_gbps: f64,
    #[serde(default)]
    pub latency_s: f64,
    /// Total nodes; the split is chosen by the planner unless given below.
    #[serde(default)]
    pub nodes: Option<usize>,
    #[serde(default)]
    pub conv_workers: Option<usize>,
    #[serde(default)]
    pub fc_workers: Option<usize>,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub servers: Option<usize>,
    #[serde(default = "d_lr")]
    pub learning_rate: f32,
    #[serde(default = "d_momentum")]
    pub momentum: f32,
    /// Compute seconds charged per iteration (see [`PerfConstants`]).
    #[serde(default)]
    pub t_conv: f64,
    #[serde(default)]
    pub t_fc: f64,
    #[serde(default)]
    pub t_ps: f64,
    /// Bytes of activations one FC worker may hold; planner constraint.
    #[serde(default)]
    pub memory_limit: Option<u64>,
    #[serde(default)]
    pub transport: TransportKind,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn new(mode: RunMode, model: &str, seed: u64) -> Self {
        Self {
            mode,
            model: model.into(),
            seed,
            iterations: None,
            epochs: None,
            dataset_size: d_dataset_size(),
            dataset: DatasetKind::default(),
            separation: d_separation(),
            batch: None,
            bandwidth_gbps: d_bandwidth(),
            latency_s: 0.0,
            nodes: None,
            conv_workers: None,
            fc_workers: None,
            workers: None,
            servers: None,
            learning_rate: d_lr(),
            momentum: d_momentum(),
            t_conv: 0.0,
            t_fc: 0.0,
            t_ps: 0.0,
            memory_limit: None,
            transport: TransportKind::default(),
            output_dir: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    /// Applies [`SEED_ENV`] if it is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| HarnessError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn net(&self) -> Result<NetConfig> {
        let net = NetConfig {
            bandwidth_bps: self.bandwidth_gbps * 1e9,
            latency_s: self.latency_s,
            full_duplex: true,
        };
        net.validate().map_err(HarnessError::Config)?;
        Ok(net)
    }

    fn train(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
        }
    }

    /// The model with the configured batch applied.
    pub fn model_source(&self) -> Result<ModelSource> {
        let m = load_model(&self.model)?;
        Ok(match self.batch {
            Some(k) if k > 0 => m.with_batch(k),
            Some(_) => return Err(HarnessError::Config("batch must be positive".into())),
            None => m,
        })
    }

    fn constants(&self, source: &ModelSource) -> Result<PerfConstants> {
        let p = source.profile()?;
        Ok(PerfConstants::from_profile(&p, self.t_conv, self.t_fc, self.t_ps, self.bandwidth_gbps * 1e9))
    }

    /// `(compute nodes, other nodes)` for the configured mode.
    pub fn split(&self, source: &ModelSource) -> Result<Assignment> {
        let (explicit, other, mode) = match self.mode {
            RunMode::Stanza => (self.conv_workers, self.fc_workers, Mode::Stanza),
            RunMode::Ps => (self.workers, self.servers, Mode::Ps),
            RunMode::Single => {
                return Ok(Assignment {
                    compute_nodes: 1,
                    other_nodes: 0,
                    planned: false,
                })
            }
        };
        if let Some(c) = explicit {
            return Ok(Assignment {
                compute_nodes: c,
                other_nodes: other.unwrap_or(1),
                planned: false,
            });
        }
        let n = self
            .nodes
            .ok_or_else(|| HarnessError::Config("set `nodes` or an explicit split".into()))?;
        let a = assign_nodes(&self.constants(source)?, n, mode, self.memory_limit)?;
        Ok(Assignment {
            compute_nodes: a.compute_nodes,
            other_nodes: a.other_nodes,
            planned: true,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    /// Workers (PS) or CONV workers.
    pub compute_nodes: usize,
    /// Servers (PS) or FC workers.
    pub other_nodes: usize,
    /// Chosen by the planner rather than given.
    pub planned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub iteration: u64,
    pub elapsed_s: f64,
    pub loss: Option<f64>,
    pub payload_bytes: u64,
    pub fc_bytes: u64,
}

/// Everything a run reports. Deterministic for a given config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub mode: RunMode,
    pub model: String,
    pub seed: u64,
    pub batch: usize,
    pub bandwidth_bps: f64,
    pub assignment: Assignment,
    pub iterations: u64,
    pub iteration_times_s: Vec<f64>,
    /// Logical-clock total.
    pub total_time_s: f64,
    /// Bytes that update the FC block, per iteration per compute node.
    pub fc_data_bytes_per_worker_iteration: f64,
    /// All tensor payload bytes over the run.
    pub total_data_bytes: u64,
    pub iterations_per_epoch: u64,
    /// Mean bytes per iteration times iterations per epoch.
    pub total_data_bytes_per_epoch: f64,
    pub losses: Vec<f64>,
    pub final_loss: Option<f64>,
    /// SHA-256 of the final parameters, numeric runs only.
    pub param_digest: Option<String>,
}

/// A finished run: the report plus what is needed to write its files.
pub struct RunOutput {
    pub report: RunReport,
    pub rows: Vec<IterationRow>,
    pub params: Option<Vec<Tensor>>,
    ledger_csv: Vec<u8>,
}

impl RunOutput {
    /// Writes `report.json`, `iterations.csv`, and `ledger.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let path = dir.join("report.json");
        let json = serde_json::to_string_pretty(&self.report).expect("report serializes");
        std::fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))?;
        let path = dir.join("iterations.csv");
        let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| io_err(&path, e))?;
        }
        w.flush().map_err(|e| io_err(&path, e))?;
        let path = dir.join("ledger.csv");
        std::fs::write(&path, &self.ledger_csv).map_err(|e| io_err(&path, e))?;
        Ok(())
    }
}

fn dataset_for(cfg: &ExperimentConfig, spec: &ModelSpec) -> Dataset {
    let n = cfg.dataset_size as usize;
    let seed = cfg.seed ^ 0x5eed_da7a;
    match cfg.dataset {
        DatasetKind::Gaussian => Dataset::gaussian(seed, n, &spec.input_shape, spec.classes()),
        DatasetKind::TwoGaussians => Dataset::two_gaussians(seed, n, &spec.input_shape, cfg.separation),
    }
}

fn make_transport(kind: TransportKind, nodes: &[NodeId], net: NetConfig) -> Result<Box<dyn Transport>> {
    Ok(match kind {
        TransportKind::Sim => Box::new(SimTransport::new(nodes, net)),
        TransportKind::Tcp => Box::new(TcpTransport::new(nodes, net).map_err(|e| HarnessError::Io(e.to_string()))?),
    })
}

/// Runs the configured experiment and returns its report. Files are written
/// only if `output_dir` is set.
pub fn run(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let source = cfg.model_source()?;
    let batch = match &source {
        ModelSource::Spec(s) => s.batch,
        ModelSource::Profile(p) => p.batch,
    };
    let assignment = cfg.split(&source)?;
    let global = assignment.compute_nodes * batch;
    if global == 0 {
        return Err(HarnessError::Config("empty cluster".into()));
    }
    let per_epoch = iterations_per_epoch(cfg.dataset_size, global as u64);
    let iterations = match (cfg.epochs, cfg.iterations) {
        (Some(e), _) => e * per_epoch,
        (None, Some(i)) => i,
        (None, None) => return Err(HarnessError::Config("set `iterations` or `epochs`".into())),
    };
    let net = cfg.net()?;
    let workload = match &source {
        ModelSource::Spec(spec) if !spec.profile_only => {
            let data = Arc::new(dataset_for(cfg, spec));
            Workload::numeric(spec.clone(), data, cfg.seed)?
        }
        other => {
            if cfg.mode == RunMode::Single {
                return Err(ModelError::NotExecutable(other.name().into()).into());
            }
            Workload::Profile(other.profile()?)
        }
    };

    let (outcomes, params, ledger) = match cfg.mode {
        RunMode::Single => {
            let (outcomes, params) = run_single(cfg, &workload, iterations)?;
            (outcomes, Some(params), None)
        }
        RunMode::Ps => {
            let plan = PsClusterPlan::new(assignment.compute_nodes, assignment.other_nodes, batch)?;
            let pc = PsConfig {
                plan,
                train: cfg.train(),
                compute_s: cfg.t_ps,
            };
            let numeric = workload.is_numeric();
            let t = make_transport(cfg.transport, &plan.nodes(), net)?;
            let mut c = PsCluster::new(pc, workload, t)?;
            let out = c.run(iterations)?;
            let params = numeric.then(|| c.params());
            let ledger = ledger_csv(c.transport().ledger())?;
            c.transport().shutdown();
            (out, params, Some(ledger))
        }
        RunMode::Stanza => {
            let plan = StanzaClusterPlan::new(assignment.compute_nodes, assignment.other_nodes, batch)?;
            let sc = StanzaConfig {
                plan,
                train: cfg.train(),
                conv_compute_s: cfg.t_conv,
                fc_compute_s: cfg.t_fc,
                seed: cfg.seed,
            };
            let numeric = workload.is_numeric();
            let t = make_transport(cfg.transport, &plan.nodes(), net)?;
            let mut c = StanzaCluster::new(sc, workload, t)?;
            let out = c.run(iterations)?;
            let params = numeric.then(|| c.params());
            let ledger = ledger_csv(c.transport().ledger())?;
            c.transport().shutdown();
            (out, params, Some(ledger))
        }
    };

    let rows: Vec<IterationRow> = outcomes
        .iter()
        .map(|o| IterationRow {
            iteration: o.iteration,
            elapsed_s: o.timing.elapsed,
            loss: o.loss,
            payload_bytes: o.timing.payload_bytes,
            fc_bytes: o.timing.fc_bytes,
        })
        .collect();
    let total_data: u64 = rows.iter().map(|r| r.payload_bytes).sum();
    let fc_total: u64 = rows.iter().map(|r| r.fc_bytes).sum();
    let n = iterations.max(1) as f64;
    let losses: Vec<f64> = rows.iter().filter_map(|r| r.loss).collect();
    let report = RunReport {
        mode: cfg.mode,
        model: source.name().to_string(),
        seed: cfg.seed,
        batch,
        bandwidth_bps: net.bandwidth_bps,
        assignment,
        iterations,
        iteration_times_s: rows.iter().map(|r| r.elapsed_s).collect(),
        total_time_s: rows.iter().map(|r| r.elapsed_s).sum(),
        fc_data_bytes_per_worker_iteration: fc_total as f64 / n / assignment.compute_nodes as f64,
        total_data_bytes: total_data,
        iterations_per_epoch: per_epoch,
        total_data_bytes_per_epoch: total_data as f64 / n * per_epoch as f64,
        final_loss: losses.last().copied(),
        losses,
        param_digest: params.as_ref().map(|p| params_digest(p)),
    };
    let out = RunOutput {
        report,
        rows,
        params,
        ledger_csv: ledger.unwrap_or_default(),
    };
    if let Some(dir) = &cfg.output_dir {
        out.write(dir)?;
    }
    Ok(out)
}

fn ledger_csv(l: &Ledger) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    l.write_csv(&mut buf).map_err(|e| HarnessError::Io(e.to_string()))?;
    Ok(buf)
}

/// Plain one-node SGD over the same batch stream; the clock advances by
/// `t_ps` per iteration.
fn run_single(cfg: &ExperimentConfig, workload: &Workload, iterations: u64) -> Result<(Vec<IterationOutcome>, Vec<Tensor>)> {
    let Workload::Numeric {
        spec, data, init_seed, ..
    } = workload
    else {
        unreachable!("checked by caller")
    };
    let mut net = spec.build(*init_seed)?;
    let mut params = net.params();
    let mut opt = OptimizerState::new(cfg.learning_rate, cfg.momentum, &params).map_err(ClusterError::from)?;
    let mut out = Vec::new();
    let ledger = Ledger::new(cfg.net()?);
    for it in 0..iterations {
        let b = data.global(it, spec.batch);
        let lg = net.loss_and_grads(&b.inputs, &b.labels).map_err(ClusterError::from)?;
        if !lg.loss.is_finite() {
            return Err(HarnessError::NumericFailure(format!("loss is {} at iteration {it}", lg.loss)));
        }
        sgd_step(&mut params, &lg.param_grads, spec.batch, &mut opt).map_err(ClusterError::from)?;
        net.set_params(&params).map_err(ClusterError::from)?;
        ledger.record_compute(NodeId::worker(0), crate::transport::PhaseKey::new(it, 0), cfg.t_ps);
        out.push(IterationOutcome {
            iteration: it,
            timing: ledger.close_iteration(it),
            loss: Some(f64::from(lg.loss) / spec.batch as f64),
        });
    }
    Ok((out, params))
}

/// PS versus layer-separated runs of the same model, batch and bandwidth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub workers: usize,
    /// PS clock total over the layer-separated clock total.
    pub speedup: f64,
    /// FC-update bytes per worker per iteration, PS over layer-separated.
    pub fc_data_ratio: f64,
    /// Tensor bytes per epoch, PS over layer-separated.
    pub total_data_ratio: f64,
    pub ps: RunReport,
    pub stanza: RunReport,
}

pub fn compare(ps_cfg: &ExperimentConfig, stanza_cfg: &ExperimentConfig) -> Result<Comparison> {
    if ps_cfg.mode != RunMode::Ps || stanza_cfg.mode != RunMode::Stanza {
        return Err(HarnessError::MismatchedConfigs("need one ps and one stanza config".into()));
    }
    let a = run(ps_cfg)?.report;
    let b = run(stanza_cfg)?.report;
    let mut diffs = Vec::new();
    if a.model != b.model {
        diffs.push(format!("model {} vs {}", a.model, b.model));
    }
    if a.batch != b.batch {
        diffs.push(format!("batch {} vs {}", a.batch, b.batch));
    }
    if a.bandwidth_bps != b.bandwidth_bps {
        diffs.push(format!("bandwidth {} vs {}", a.bandwidth_bps, b.bandwidth_bps));
    }
    if a.assignment.compute_nodes != b.assignment.compute_nodes {
        diffs.push(format!(
            "{} PS workers vs {} CONV workers",
            a.assignment.compute_nodes, b.assignment.compute_nodes
        ));
    }
    if a.iterations != b.iterations {
        diffs.push(format!("{} vs {} iterations", a.iterations, b.iterations));
    }
    if !diffs.is_empty() {
        return Err(HarnessError::MismatchedConfigs(diffs.join("; ")));
    }
    Ok(Comparison {
        workers: a.assignment.compute_nodes,
        speedup: a.total_time_s / b.total_time_s,
        fc_data_ratio: a.fc_data_bytes_per_worker_iteration / b.fc_data_bytes_per_worker_iteration,
        total_data_ratio: a.total_data_bytes_per_epoch / b.total_data_bytes_per_epoch,
        ps: a,
        stanza: b,
    })
}

/// CSV rows of several comparisons: workers, speedup, FC-Data and Total-Data ratios.
pub fn comparison_csv<W: std::io::Write>(rows: &[Comparison], out: W) -> csv::Result<()> {
    #[derive(Serialize)]
    struct Row {
        workers: usize,
        speedup: f64,
        fc_data_ratio: f64,
        total_data_ratio: f64,
    }
    let mut w = csv::Writer::from_writer(out);
    for c in rows {
        w.serialize(Row {
            workers: c.workers,
            speedup: c.speedup,
            fc_data_ratio: c.fc_data_ratio,
            total_data_ratio: c.total_data_ratio,
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Best split of `nodes` under the constants in `consts_file`.
pub fn plan(consts_file: &Path, nodes: usize, mode: Mode, memory_limit: Option<u64>) -> Result<crate::perf::Assignment> {
    let c = PerfConstants::load(consts_file)?;
    Ok(assign_nodes(&c, nodes, mode, memory_limit)?)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Wall-clock medians over `reps` runs of the CONV block, the FC block, and
/// the whole model on `batch` samples, plus the model's counts.
pub fn bench_constants(source: &ModelSource, batch: usize, reps: usize, bandwidth_bps: f64) -> Result<PerfConstants> {
    let spec = source.executable()?.clone();
    if reps == 0 || batch == 0 {
        return Err(HarnessError::Config("reps and batch must be positive".into()));
    }
    let spec = ModelSpec { batch, ..spec };
    let part = spec.split()?;
    let (front, back) = spec.build_split(1, &part)?;
    let whole = spec.build(1)?;
    let data = Dataset::gaussian(1, batch, &spec.input_shape, spec.classes());
    let b = data.global(0, batch);
    let time = |f: &dyn Fn() -> crate::tensor::Result<()>| -> Result<f64> {
        let mut v = Vec::with_capacity(reps);
        for _ in 0..reps {
            let t0 = Instant::now();
            f().map_err(ClusterError::from)?;
            v.push(t0.elapsed().as_secs_f64());
        }
        Ok(median(v))
    };
    let (acts, _) = front.forward(&b.inputs).map_err(ClusterError::from)?;
    let boundary_grad = back.loss_and_grads(&acts, &b.labels).map_err(ClusterError::from)?.grad_in;
    let t_conv = time(&|| {
        let (a, tr) = front.forward(&b.inputs)?;
        front.backward(&tr, &boundary_grad).map(|_| drop(a))
    })?;
    let t_fc = time(&|| back.loss_and_grads(&acts, &b.labels).map(drop))?;
    let t_ps = time(&|| whole.loss_and_grads(&b.inputs, &b.labels).map(drop))?;
    let profile = spec.profile()?;
    Ok(PerfConstants::from_profile(&profile, t_conv, t_fc, t_ps, bandwidth_bps))
}

/// Writes `c` as a TOML constants file.
pub fn write_constants(c: &PerfConstants, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    f.write_all(c.to_toml_string().as_bytes()).map_err(|e| io_err(path, e))
}
