#![allow(dead_code)]

use layersep::data::Dataset;
use layersep::model::ModelSpec;
use layersep::{sgd_step, OptimizerState, Tensor};

/// max over tensors of ||a - b||_inf / ||b||_inf
pub fn rel_dev(a: &[Tensor], b: &[Tensor]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut worst = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.shape(), y.shape());
        let diff = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(p, q)| (f64::from(*p) - f64::from(*q)).abs())
            .fold(0.0, f64::max);
        let norm = y.data().iter().map(|v| f64::from(v.abs())).fold(0.0, f64::max);
        worst = worst.max(if norm == 0.0 { diff } else { diff / norm });
    }
    worst
}

/// Plain mini-batch SGD on one node over the same batch stream.
pub fn single_node(
    spec: &ModelSpec,
    data: &Dataset,
    seed: u64,
    global_batch: usize,
    iterations: u64,
    lr: f32,
    mu: f32,
) -> Vec<Tensor> {
    let mut net = spec.build(seed).unwrap();
    let mut params = net.params();
    let mut opt = OptimizerState::new(lr, mu, &params).unwrap();
    for it in 0..iterations {
        let b = data.global(it, global_batch);
        let lg = net.loss_and_grads(&b.inputs, &b.labels).unwrap();
        sgd_step(&mut params, &lg.param_grads, global_batch, &mut opt).unwrap();
        net.set_params(&params).unwrap();
    }
    params
}

pub fn tiny_data(seed: u64) -> Dataset {
    Dataset::gaussian(seed, 256, &[3, 16, 16], 10)
}

use layersep::layers::{softmax_cross_entropy, Layer, LayerKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// ||fd - an|| / max(||fd||, ||an||), 0 when both vanish.
fn rel_err(fd: &[f64], an: &[f64]) -> f64 {
    let d: f64 = fd.iter().zip(an).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let s = fd.iter().map(|a| a * a).sum::<f64>().sqrt().max(an.iter().map(|a| a * a).sum::<f64>().sqrt());
    if s < 1e-9 {
        d
    } else {
        d / s
    }
}

const EPS: f32 = 1e-2;
const PROBES: usize = 24;

/// Central differences of `f` at up to `PROBES` random coordinates of `x`,
/// paired with the matching entries of `analytic`.
fn probe(rng: &mut ChaCha8Rng, x: &Tensor, analytic: &Tensor, f: &dyn Fn(&Tensor) -> f64, fd: &mut Vec<f64>, an: &mut Vec<f64>) {
    let n = x.len();
    for _ in 0..PROBES.min(n) {
        let i = rng.random_range(0..n);
        let mut p = x.clone();
        p.data_mut()[i] += EPS;
        let mut m = x.clone();
        m.data_mut()[i] -= EPS;
        fd.push((f(&p) - f(&m)) / (2.0 * f64::from(EPS)));
        an.push(f64::from(analytic.data()[i]));
    }
}

/// A random instance of `kind`'s layer family, with an input that keeps
/// finite differences away from kinks and pooling ties.
pub fn random_case(rng: &mut ChaCha8Rng, kind: &str) -> (Layer, Tensor) {
    let b = rng.random_range(1..=3);
    match kind {
        "conv2d" => {
            let (ci, co, k) = (rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(1..=4));
            let (stride, padding) = (rng.random_range(1..=3), rng.random_range(0..=2));
            let h = rng.random_range(k..k + 6);
            let w = rng.random_range(k..k + 6);
            let kind = LayerKind::Conv2d { in_ch: ci, out_ch: co, kernel: k, stride, padding };
            let params = kind.param_shapes().iter().map(|s| rand_tensor(rng, s, 1.0)).collect();
            (Layer::with_params(kind, params).unwrap(), rand_tensor(rng, &[b, ci, h, w], 1.0))
        }
        "maxpool2d" => {
            let (c, k, stride) = (rng.random_range(1..=4), rng.random_range(1..=3), rng.random_range(1..=3));
            let h = rng.random_range(k..k + 6);
            let w = rng.random_range(k..k + 6);
            let n = b * c * h * w;
            // distinct values 0.1 apart, shuffled
            let mut v: Vec<f32> = (0..n).map(|i| i as f32 * 0.1).collect();
            for i in (1..n).rev() {
                v.swap(i, rng.random_range(0..=i));
            }
            (Layer::zeroed(LayerKind::MaxPool2d { kernel: k, stride }), Tensor::new(vec![b, c, h, w], v).unwrap())
        }
        "flatten" => {
            let s = [b, rng.random_range(1..=4), rng.random_range(1..=5), rng.random_range(1..=5)];
            (Layer::zeroed(LayerKind::Flatten), rand_tensor(rng, &s, 1.0))
        }
        "fc" => {
            let (i, o) = (rng.random_range(1..=20), rng.random_range(1..=20));
            let kind = LayerKind::FullyConnected { in_dim: i, out_dim: o };
            let params = kind.param_shapes().iter().map(|s| rand_tensor(rng, s, 1.0)).collect();
            (Layer::with_params(kind, params).unwrap(), rand_tensor(rng, &[b, i], 1.0))
        }
        "relu" => {
            let s = [b, rng.random_range(1..=6), rng.random_range(1..=6)];
            let n = s.iter().product();
            let v = (0..n)
                .map(|_| {
                    let m = rng.random_range(0.1f32..2.0);
                    if rng.random_bool(0.5) { m } else { -m }
                })
                .collect();
            (Layer::zeroed(LayerKind::ReLU), Tensor::new(s.to_vec(), v).unwrap())
        }
        "softmax_ce" => {
            let c = rng.random_range(2..=10);
            (Layer::zeroed(LayerKind::SoftmaxCrossEntropy), rand_tensor(rng, &[b, c], 2.0))
        }
        other => panic!("unknown layer kind {other}"),
    }
}

pub const LAYER_KINDS: [&str; 6] = ["conv2d", "maxpool2d", "flatten", "fc", "relu", "softmax_ce"];

/// Worst relative error between analytic and finite-difference gradients of
/// `sum(out * r)` for random `r`, over the input and every parameter tensor.
/// For the loss layer the fused cross-entropy gradient is checked as well.
pub fn layer_grad_error(rng: &mut ChaCha8Rng, layer: &Layer, input: &Tensor) -> f64 {
    let (out, cache) = layer.forward(input).unwrap();
    let r = rand_tensor(rng, out.shape(), 1.0);
    let (gin, pgrads) = layer.backward(&cache, &r).unwrap();
    let dot = |t: &Tensor| t.data().iter().zip(r.data()).map(|(a, b)| f64::from(*a) * f64::from(*b)).sum::<f64>();

    let (mut fd, mut an) = (Vec::new(), Vec::new());
    probe(rng, input, &gin, &|x| dot(&layer.forward(x).unwrap().0), &mut fd, &mut an);
    let mut worst = rel_err(&fd, &an);
    for (k, g) in pgrads.iter().enumerate() {
        let (mut fd, mut an) = (Vec::new(), Vec::new());
        let f = |p: &Tensor| {
            let mut l = layer.clone();
            l.params[k] = p.clone();
            dot(&l.forward(input).unwrap().0)
        };
        probe(rng, &layer.params[k], g, &f, &mut fd, &mut an);
        worst = worst.max(rel_err(&fd, &an));
    }
    if layer.kind == LayerKind::SoftmaxCrossEntropy {
        let classes = input.row_len();
        let labels: Vec<usize> = (0..input.batch()).map(|_| rng.random_range(0..classes)).collect();
        let (_, g) = softmax_cross_entropy(input, &labels).unwrap();
        let (mut fd, mut an) = (Vec::new(), Vec::new());
        let f = |x: &Tensor| f64::from(softmax_cross_entropy(x, &labels).unwrap().0);
        probe(rng, input, &g, &f, &mut fd, &mut an);
        worst = worst.max(rel_err(&fd, &an));
    }
    worst
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

use layersep::collectives::{allreduce_sum, Buffer, Channel, Group};
use layersep::transport::{Block, NetConfig, NodeId, PhaseKey, SimTransport, Tag};

pub fn allreduce_channel() -> Channel {
    Channel::new(Tag::AllreduceChunk, Block::Conv, PhaseKey::new(0, 0))
}

/// Runs one allreduce over `inputs.len()` CONV nodes on a fresh simulated
/// network; returns every member's result and the transport.
pub fn run_allreduce(inputs: &[Tensor], seed: u64, net: NetConfig) -> (Vec<Tensor>, SimTransport) {
    let n = inputs.len();
    let members: Vec<NodeId> = (0..n as u32).map(NodeId::conv).collect();
    let t = SimTransport::new(&members, net);
    let g = Group::new(members.clone(), seed).unwrap();
    let out = std::thread::scope(|s| {
        let hs: Vec<_> = members
            .iter()
            .zip(inputs)
            .map(|(&me, x)| {
                let (t, g) = (&t, &g);
                s.spawn(move || allreduce_sum(t, g, me, Buffer::Real(x.clone()), allreduce_channel()).unwrap())
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap().into_tensor().unwrap()).collect()
    });
    (out, t)
}

/// Random tensor of small integers: every partial sum is exact in f32.
pub fn int_tensor(rng: &mut ChaCha8Rng, len: usize) -> Tensor {
    Tensor::vector((0..len).map(|_| rng.random_range(-1000i32..=1000) as f32).collect())
}

use layersep::perf::{Mode, PerfConstants};

/// Exchange rounds written out from the doubling-plus-surplus schedule.
pub fn oracle_rounds(n: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    let mut core = 1usize;
    while core * 2 <= n {
        core *= 2;
    }
    let steps = core.trailing_zeros() as f64;
    if core == n {
        steps
    } else {
        steps + 2.0
    }
}

/// Eq. 3 written out term by term.
pub fn oracle_stanza(c: &PerfConstants, nc: usize, nf: usize) -> f64 {
    let (nc_, nf_) = (nc as f64, nf as f64);
    let compute = c.t_conv + nc_ / nf_ * c.t_fc;
    let act_bits = c.activations as f64 * c.batch as f64 * 32.0;
    let conv_fc = 2.0 * nc_ * act_bits / (nf_ * c.bandwidth_bps);
    let allreduce = c.conv_params as f64 * 32.0 * oracle_rounds(nc) / c.bandwidth_bps;
    compute + conv_fc + allreduce
}

pub fn oracle_ps(c: &PerfConstants, nw: usize, ns: usize) -> f64 {
    2.0 * nw as f64 * c.params as f64 * 32.0 / (ns as f64 * c.bandwidth_bps) + c.t_ps
}

/// Best (compute, other) split and its throughput, scanning every split and
/// keeping the first strict maximum from the fewest-other-nodes end.
pub fn brute_force(c: &PerfConstants, n: usize, mode: Mode, memory: Option<u64>) -> Option<(usize, usize, f64)> {
    let mut best: Option<(usize, usize, f64)> = None;
    for other in 1..n {
        let comp = n - other;
        let tp = match mode {
            Mode::Stanza => {
                let held = comp.div_ceil(other) as u64 * c.batch * c.activations * 4;
                if memory.is_some_and(|m| held > m) {
                    continue;
                }
                (comp as u64 * c.batch) as f64 / oracle_stanza(c, comp, other)
            }
            Mode::Ps => (comp as u64 * c.batch) as f64 / oracle_ps(c, comp, other),
        };
        if best.map_or(true, |b| tp > b.2) {
            best = Some((comp, other, tp));
        }
    }
    best
}

pub fn random_consts(rng: &mut ChaCha8Rng) -> PerfConstants {
    let params = rng.random_range(1_000_000u64..200_000_000);
    let conv_params = rng.random_range(params / 200..params / 2);
    PerfConstants {
        t_conv: rng.random_range(0.01..1.0),
        t_fc: rng.random_range(0.0005..0.05),
        t_ps: rng.random_range(0.01..1.0),
        bandwidth_bps: [1e9, 1e10, 2.5e10, 1e11][rng.random_range(0..4)],
        batch: [16u64, 32, 64, 128, 256][rng.random_range(0..5)],
        params,
        conv_params,
        activations: rng.random_range(256u64..50_000),
    }
}

pub fn alexnet_consts(t_conv: f64, t_fc: f64, t_ps: f64, bandwidth_bps: f64) -> PerfConstants {
    let p = layersep::model::load_model("alexnet").unwrap().profile().unwrap();
    PerfConstants::from_profile(&p, t_conv, t_fc, t_ps, bandwidth_bps)
}
