mod common;

use std::sync::Arc;

use common::{rel_dev, single_node, tiny_data};
use layersep::cluster::{TrainConfig, Workload};
use layersep::collectives::Buffer;
use layersep::model::zoo;
use layersep::ps::{ps_pull, ps_push, PsCluster, PsClusterPlan, PsConfig, ShardMap};
use layersep::transport::{Block, NetConfig, NodeId, PhaseKey, SimTransport, Tag, Transport};
use layersep::Tensor;

fn cfg(workers: usize, servers: usize, batch: usize, compute_s: f64) -> PsConfig {
    PsConfig {
        plan: PsClusterPlan::new(workers, servers, batch).unwrap(),
        train: TrainConfig::default(),
        compute_s,
    }
}

#[test]
fn one_worker_one_server_is_bit_exact() {
    let spec = zoo::tiny_cnn();
    let data = Arc::new(tiny_data(1));
    let w = Workload::numeric(spec.clone(), data.clone(), 9).unwrap();
    let mut c = PsCluster::simulated(cfg(1, 1, 4, 0.0), w, NetConfig::gbps(10.0)).unwrap();
    c.run(5).unwrap();
    let tc = TrainConfig::default();
    let oracle = single_node(&spec, &data, 9, 4, 5, tc.learning_rate, tc.momentum);
    assert_eq!(c.params(), oracle);
}

#[test]
fn four_workers_match_single_node_batch() {
    let spec = zoo::tiny_cnn();
    let data = Arc::new(tiny_data(2));
    let w = Workload::numeric(spec.clone(), data.clone(), 3).unwrap();
    let mut c = PsCluster::simulated(cfg(4, 3, 4, 0.0), w, NetConfig::gbps(10.0)).unwrap();
    c.run(50).unwrap();
    let tc = TrainConfig::default();
    let oracle = single_node(&spec, &data, 3, 16, 50, tc.learning_rate, tc.momentum);
    let dev = rel_dev(&c.params(), &oracle);
    assert!(dev <= 1e-5, "deviation {dev}");
    for w in 0..4 {
        assert_eq!(c.worker_params(w), c.params());
    }
}

#[test]
fn alexnet_profile_iteration_time() {
    let p = zoo::alexnet().profile().unwrap();
    let w = Workload::Profile(p.clone());
    let mut c = PsCluster::simulated(cfg(4, 1, 128, 0.0), w, NetConfig::gbps(10.0)).unwrap();
    let out = c.train_iteration().unwrap();
    let expect = 2.0 * 4.0 * p.params as f64 * 32.0 / 1e10;
    assert!((out.timing.elapsed - expect).abs() <= 1e-12 * expect);
    assert!((out.timing.elapsed - 1.56).abs() / 1.56 < 0.01);
}

#[test]
fn compute_is_added_once() {
    let p = zoo::alexnet().profile().unwrap();
    let mut c = PsCluster::simulated(cfg(2, 2, 128, 0.43), Workload::Profile(p.clone()), NetConfig::gbps(10.0)).unwrap();
    let out = c.train_iteration().unwrap();
    let expect = 2.0 * 2.0 * p.params as f64 * 32.0 / (2.0 * 1e10) + 0.43;
    assert!((out.timing.elapsed - expect).abs() <= 1e-12 * expect, "{} vs {expect}", out.timing.elapsed);
}

#[test]
fn push_sends_each_server_its_tensors() {
    let nodes = [NodeId::worker(0), NodeId::server(0), NodeId::server(1)];
    let t = SimTransport::new(&nodes, NetConfig::gbps(1.0));
    let shards = ShardMap::balanced(&[6, 4], &[Block::Conv, Block::Conv], 2);
    let grads = vec![
        Buffer::Real(Tensor::full(&[2, 3], 1.0)),
        Buffer::Real(Tensor::full(&[4], 2.0)),
    ];
    ps_push(&t, NodeId::worker(0), &shards, &grads, PhaseKey::new(0, 1)).unwrap();
    assert_eq!(t.ledger().link_bytes(NodeId::worker(0), NodeId::server(0)), 24);
    assert_eq!(t.ledger().link_bytes(NodeId::worker(0), NodeId::server(1)), 16);
    assert_eq!(t.ledger().messages(Tag::GradPush), 2);
}

#[test]
fn pull_before_push_times_out() {
    let nodes = [NodeId::worker(0), NodeId::server(0)];
    let t = SimTransport::new(&nodes, NetConfig::gbps(1.0)).with_timeout(std::time::Duration::from_millis(50));
    let shards = ShardMap::balanced(&[2], &[Block::Fc], 1);
    let like = vec![Buffer::Sized(2)];
    assert!(ps_pull(&t, NodeId::worker(0), &shards, &like).is_err());
}

#[test]
fn checkpoint_replay_is_bit_exact() {
    let spec = zoo::tiny_cnn();
    let data = Arc::new(tiny_data(4));
    let make = || Workload::numeric(spec.clone(), data.clone(), 5).unwrap();
    let c2 = cfg(2, 2, 4, 0.0);
    let mut full = PsCluster::simulated(c2, make(), NetConfig::gbps(1.0)).unwrap();
    full.run(20).unwrap();

    let mut first = PsCluster::simulated(c2, make(), NetConfig::gbps(1.0)).unwrap();
    first.run(10).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let mut loaded = Vec::new();
    for ck in first.checkpoint().unwrap() {
        let path = dir.path().join(layersep::checkpoint::Checkpoint::file_name(ck.node, ck.iteration));
        ck.save(&path).unwrap();
        loaded.push(layersep::checkpoint::Checkpoint::load(&path).unwrap());
    }
    let t = SimTransport::new(&c2.plan.nodes(), NetConfig::gbps(1.0));
    let mut resumed = PsCluster::restore(c2, make(), Box::new(t), &loaded).unwrap();
    resumed.run(10).unwrap();
    assert_eq!(resumed.iteration(), 20);
    assert_eq!(
        layersep::params::params_digest(&resumed.params()),
        layersep::params::params_digest(&full.params())
    );
}
