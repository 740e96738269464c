//! `layersep` command line: run, compare, plan, bench.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use layersep::harness::{
    self, comparison_csv, Comparison, ExperimentConfig, HarnessError, TransportKind,
};
use layersep::model::load_model;
use layersep::perf::{assign_nodes, Mode, PerfConstants};

#[derive(Parser)]
#[command(name = "layersep", version, about = "Layer-separated vs parameter-server training on a simulated cluster")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one experiment from a TOML config.
    Run {
        config: PathBuf,
        #[command(flatten)]
        o: Overrides,
    },
    /// Run a PS config and a layer-separated config and report the ratios.
    Compare {
        ps: PathBuf,
        stanza: PathBuf,
        /// Worker counts to sweep; each sets PS workers and CONV workers alike.
        #[arg(long, value_delimiter = ',')]
        workers: Vec<usize>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Best node split from a constants file.
    Plan {
        #[arg(long)]
        constants: PathBuf,
        /// A single count, or a range like `3..12` (inclusive).
        #[arg(long)]
        nodes: String,
        #[arg(long, value_enum, default_value_t = PlanMode::Both)]
        mode: PlanMode,
        /// Activation bytes one FC worker may hold.
        #[arg(long)]
        memory_limit: Option<u64>,
    },
    /// Measure per-iteration compute times and write a constants file.
    Bench {
        #[arg(long, default_value = "tiny_cnn")]
        model: String,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long, default_value_t = 21)]
        reps: usize,
        #[arg(long, default_value_t = 10.0)]
        bandwidth_gbps: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    bandwidth_gbps: Option<f64>,
    #[arg(long)]
    latency_s: Option<f64>,
    #[arg(long, value_enum)]
    transport: Option<Transport>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Transport {
    Sim,
    Tcp,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum PlanMode {
    Stanza,
    Ps,
    Both,
}

impl Overrides {
    /// Config file, then `STANZA_SEED`, then flags.
    fn load(&self, path: &Path) -> Result<ExperimentConfig, HarnessError> {
        let mut c = ExperimentConfig::load(path)?;
        c.apply_env()?;
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.iterations {
            c.iterations = Some(v);
            c.epochs = None;
        }
        if let Some(v) = self.epochs {
            c.epochs = Some(v);
        }
        if let Some(v) = self.nodes {
            c.nodes = Some(v);
        }
        if let Some(v) = self.batch {
            c.batch = Some(v);
        }
        if let Some(v) = self.bandwidth_gbps {
            c.bandwidth_gbps = v;
        }
        if let Some(v) = self.latency_s {
            c.latency_s = v;
        }
        if let Some(t) = self.transport {
            c.transport = match t {
                Transport::Sim => TransportKind::Sim,
                Transport::Tcp => TransportKind::Tcp,
            };
        }
        if let Some(o) = &self.out {
            c.output_dir = Some(o.clone());
        }
        Ok(c)
    }
}

fn parse_nodes(s: &str) -> Result<Vec<usize>, HarnessError> {
    let bad = || HarnessError::Config(format!("bad node count {s:?}"));
    match s.split_once("..") {
        Some((a, b)) => {
            let (a, b): (usize, usize) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
            if a > b {
                return Err(bad());
            }
            Ok((a..=b).collect())
        }
        None => Ok(vec![s.trim().parse().map_err(|_| bad())?]),
    }
}

fn run(cfg: &Path, o: &Overrides) -> Result<(), HarnessError> {
    let c = o.load(cfg)?;
    let out = harness::run(&c)?;
    let r = &out.report;
    println!(
        "{:?} {} on {}+{} nodes: {} iterations, clock {:.6} s",
        r.mode, r.model, r.assignment.compute_nodes, r.assignment.other_nodes, r.iterations, r.total_time_s
    );
    println!(
        "total data {} B ({:.0} B/epoch), FC data {:.0} B per worker-iteration",
        r.total_data_bytes, r.total_data_bytes_per_epoch, r.fc_data_bytes_per_worker_iteration
    );
    if let (Some(l), Some(d)) = (r.final_loss, &r.param_digest) {
        println!("final loss {l:.6}, params {d}");
    }
    if let Some(dir) = &c.output_dir {
        println!("wrote {}", dir.display());
    }
    Ok(())
}

fn compare(ps: &Path, stanza: &Path, workers: &[usize], o: &Overrides) -> Result<(), HarnessError> {
    let base_ps = o.load(ps)?;
    let base_st = o.load(stanza)?;
    let mut rows: Vec<Comparison> = Vec::new();
    let sweep: Vec<Option<usize>> = if workers.is_empty() {
        vec![None]
    } else {
        workers.iter().copied().map(Some).collect()
    };
    for w in sweep {
        let (mut p, mut s) = (base_ps.clone(), base_st.clone());
        p.output_dir = None;
        s.output_dir = None;
        if let Some(w) = w {
            p.workers = Some(w);
            s.conv_workers = Some(w);
        }
        let c = harness::compare(&p, &s)?;
        println!(
            "{} workers: speedup {:.3}, FC-Data ratio {:.1}, Total-Data ratio {:.2}",
            c.workers, c.speedup, c.fc_data_ratio, c.total_data_ratio
        );
        rows.push(c);
    }
    if let Some(dir) = &o.out {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io(e.to_string()))?;
        let f = std::fs::File::create(dir.join("comparison.csv")).map_err(|e| HarnessError::Io(e.to_string()))?;
        comparison_csv(&rows, f).map_err(|e| HarnessError::Io(e.to_string()))?;
        let json = serde_json::to_string_pretty(&rows).expect("serializes");
        std::fs::write(dir.join("comparison.json"), json + "\n").map_err(|e| HarnessError::Io(e.to_string()))?;
    }
    Ok(())
}

fn plan(constants: &Path, nodes: &str, mode: PlanMode, memory: Option<u64>) -> Result<(), HarnessError> {
    let c = PerfConstants::load(constants).map_err(|e| HarnessError::Config(e.to_string()))?;
    let modes: &[Mode] = match mode {
        PlanMode::Stanza => &[Mode::Stanza],
        PlanMode::Ps => &[Mode::Ps],
        PlanMode::Both => &[Mode::Stanza, Mode::Ps],
    };
    println!("nodes,mode,compute_nodes,other_nodes,iter_time_s,throughput");
    for n in parse_nodes(nodes)? {
        for &m in modes {
            let a = assign_nodes(&c, n, m, memory).map_err(HarnessError::from)?;
            let name = match m {
                Mode::Stanza => "stanza",
                Mode::Ps => "ps",
            };
            println!("{n},{name},{},{},{:.9},{:.3}", a.compute_nodes, a.other_nodes, a.iter_time, a.throughput);
        }
    }
    Ok(())
}

fn bench(model: &str, batch: Option<usize>, reps: usize, gbps: f64, out: Option<&Path>) -> Result<(), HarnessError> {
    let source = load_model(model)?;
    let k = batch.unwrap_or(match &source {
        layersep::ModelSource::Spec(s) => s.batch,
        layersep::ModelSource::Profile(p) => p.batch,
    });
    let c = harness::bench_constants(&source, k, reps, gbps * 1e9)?;
    match out {
        Some(p) => {
            harness::write_constants(&c, p)?;
            println!("wrote {}", p.display());
        }
        None => print!("{}", c.to_toml_string()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match &cli.cmd {
        Cmd::Run { config, o } => run(config, o),
        Cmd::Compare { ps, stanza, workers, o } => compare(ps, stanza, workers, o),
        Cmd::Plan {
            constants,
            nodes,
            mode,
            memory_limit,
        } => plan(constants, nodes, *mode, *memory_limit),
        Cmd::Bench {
            model,
            batch,
            reps,
            bandwidth_gbps,
            out,
        } => bench(model, *batch, *reps, *bandwidth_gbps, out.as_deref()),
    };
    match r {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

