mod common;

use std::sync::Arc;

use common::{rel_dev, single_node, tiny_data};
use layersep::checkpoint::Checkpoint;
use layersep::cluster::{ClusterError, TrainConfig, Workload};
use layersep::collectives::{rounds, Buffer};
use layersep::model::zoo;
use layersep::params::params_digest;
use layersep::ps::{PsCluster, PsClusterPlan, PsConfig};
use layersep::stanza::{
    ActivationBatch, StanzaCluster, StanzaClusterPlan, StanzaConfig, LANE_CONV, LANE_FC, STAGE_EXCHANGE,
};
use layersep::transport::{NetConfig, NodeId, SimTransport, Tag};
use layersep::Tensor;

fn cfg(n_c: usize, n_f: usize, k: usize) -> StanzaConfig {
    StanzaConfig {
        plan: StanzaClusterPlan::new(n_c, n_f, k).unwrap(),
        train: TrainConfig::default(),
        conv_compute_s: 0.0,
        fc_compute_s: 0.0,
        seed: 11,
    }
}

fn numeric(seed: u64) -> Workload {
    Workload::numeric(zoo::tiny_cnn(), Arc::new(tiny_data(seed)), 21).unwrap()
}

#[test]
fn group_map_is_balanced_and_contiguous() {
    for n_c in 1..=12 {
        for n_f in 1..=n_c {
            let p = StanzaClusterPlan::new(n_c, n_f, 1).unwrap();
            let sizes: Vec<usize> = (0..n_f).map(|j| p.group(j).len()).collect();
            assert_eq!(sizes.iter().sum::<usize>(), n_c);
            assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
            for j in 0..n_f {
                let g = p.group(j);
                assert!(g.windows(2).all(|w| w[1] == w[0] + 1));
            }
            assert_eq!(*sizes.iter().max().unwrap(), p.max_group());
        }
    }
}

#[test]
fn degenerate_cluster_is_bit_exact() {
    let spec = zoo::tiny_cnn();
    let mut c = StanzaCluster::simulated(cfg(1, 1, 4), numeric(1), NetConfig::gbps(10.0)).unwrap();
    c.run(5).unwrap();
    let tc = TrainConfig::default();
    let oracle = single_node(&spec, &tiny_data(1), 21, 4, 5, tc.learning_rate, tc.momentum);
    assert_eq!(c.params(), oracle);
}

#[test]
fn equivalent_to_single_node_and_ps() {
    let spec = zoo::tiny_cnn();
    let tc = TrainConfig::default();
    for (n_c, n_f) in [(4, 1), (4, 2), (3, 2)] {
        let mut s = StanzaCluster::simulated(cfg(n_c, n_f, 4), numeric(2), NetConfig::gbps(10.0)).unwrap();
        s.run(50).unwrap();
        let oracle = single_node(&spec, &tiny_data(2), 21, 4 * n_c, 50, tc.learning_rate, tc.momentum);
        let dev = rel_dev(&s.params(), &oracle);
        assert!(dev <= 1e-5, "({n_c},{n_f}) vs single: {dev}");

        let pc = PsConfig {
            plan: PsClusterPlan::new(n_c, 2, 4).unwrap(),
            train: tc,
            compute_s: 0.0,
        };
        let mut ps = PsCluster::simulated(pc, numeric(2), NetConfig::gbps(10.0)).unwrap();
        ps.run(50).unwrap();
        let dev = rel_dev(&s.params(), &ps.params());
        assert!(dev <= 1e-5, "({n_c},{n_f}) vs ps: {dev}");

        for j in 1..n_f {
            assert_eq!(s.fc_worker(j).params(), s.fc_worker(0).params());
        }
        for i in 1..n_c {
            assert_eq!(s.conv_worker(i).params(), s.conv_worker(0).params());
        }
    }
}

#[test]
fn fc_bytes_and_overlap_on_the_clock() {
    let p = zoo::alexnet().profile().unwrap();
    let (n_c, n_f) = (6, 2);
    let mut c = StanzaCluster::simulated(cfg(n_c, n_f, 128), Workload::Profile(p.clone()), NetConfig::gbps(10.0)).unwrap();
    let out = c.train_iteration().unwrap();
    let timing = &out.timing;
    let act = timing.bytes_by_tag[&Tag::Activations] + timing.bytes_by_tag[&Tag::BoundaryGrads];
    assert_eq!(act, 2 * n_c as u64 * 128 * p.activations * 4);

    let conv = timing.lane(STAGE_EXCHANGE, LANE_CONV).unwrap();
    let fc = timing.lane(STAGE_EXCHANGE, LANE_FC).unwrap();
    assert_eq!(conv.rounds.len() as u32, rounds(n_c));
    assert_eq!(fc.rounds.len() as u32, rounds(n_f));
    let bottleneck: u64 = conv.rounds.iter().map(|r| r.bottleneck_bytes).sum();
    assert_eq!(bottleneck, rounds(n_c) as u64 * p.conv_params * 4);
    let stage = timing.stage(STAGE_EXCHANGE).unwrap();
    assert_eq!(stage.elapsed, conv.elapsed.max(fc.elapsed));
    assert!(stage.elapsed < conv.elapsed + fc.elapsed);
}

#[test]
fn fc_step_requires_every_source() {
    let c = StanzaCluster::simulated(cfg(4, 2, 4), numeric(3), NetConfig::gbps(1.0)).unwrap();
    let f = c.fc_worker(1);
    let b = ActivationBatch {
        source: NodeId::conv(2),
        iteration: 0,
        tensor: Buffer::Real(Tensor::zeros(&[4, 256])),
    };
    let labels = [0usize; 8];
    match f.fc_step(vec![b], Some(&labels)) {
        Err(ClusterError::MissingSource { missing, .. }) => assert_eq!(missing, NodeId::conv(3)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn fc_step_matches_monolithic_back_block() {
    let spec = zoo::tiny_cnn();
    let part = spec.split().unwrap();
    let (_, back) = spec.build_split(21, &part).unwrap();
    let c = StanzaCluster::simulated(cfg(2, 1, 4), numeric(3), NetConfig::gbps(1.0)).unwrap();
    assert_eq!(part.boundary_shape, vec![256]);
    let a = tiny_data(9).window(0, 8).inputs;
    let x0 = Tensor::new(vec![4, 256], a.data()[..1024].to_vec()).unwrap();
    let x1 = Tensor::new(vec![4, 256], a.data()[1024..2048].to_vec()).unwrap();
    let labels = [1usize, 2, 3, 4, 5, 6, 7, 8];
    let batches = vec![
        ActivationBatch { source: NodeId::conv(1), iteration: 0, tensor: Buffer::Real(x1.clone()) },
        ActivationBatch { source: NodeId::conv(0), iteration: 0, tensor: Buffer::Real(x0.clone()) },
    ];
    let step = c.fc_worker(0).fc_step(batches, Some(&labels)).unwrap();
    let whole = back
        .loss_and_grads(&Tensor::concat_batch(&[x0, x1]).unwrap(), &labels)
        .unwrap();
    assert_eq!(step.boundary[0].0, NodeId::conv(0));
    assert_eq!(step.boundary[0].1.tensor().unwrap(), &whole.grad_in.slice_batch(0, 4));
    assert_eq!(step.boundary[1].1.tensor().unwrap(), &whole.grad_in.slice_batch(4, 8));
    let grads: Vec<Tensor> = step.grads.iter().map(|b| b.tensor().unwrap().clone()).collect();
    assert_eq!(grads, whole.param_grads);
}

#[test]
fn pull_fc_before_push_is_a_protocol_error() {
    let mut c = StanzaCluster::simulated(cfg(2, 1, 4), numeric(3), NetConfig::gbps(1.0)).unwrap();
    let plan = c.config().plan;
    let t = SimTransport::new(&plan.nodes(), NetConfig::gbps(1.0));
    let w = c.conv_worker_mut(0);
    assert!(matches!(w.pull_fc(&t, &plan), Err(ClusterError::Protocol { .. })));
}

#[test]
fn checkpoint_replay_is_bit_exact_and_replicas_match() {
    let c3 = cfg(3, 2, 4);
    let mut full = StanzaCluster::simulated(c3, numeric(5), NetConfig::gbps(1.0)).unwrap();
    full.run(20).unwrap();

    let mut first = StanzaCluster::simulated(c3, numeric(5), NetConfig::gbps(1.0)).unwrap();
    first.run(10).unwrap();
    let ck = first.checkpoint().unwrap();
    assert_eq!(ck.replicas.len(), 2);
    for &(holder, owner) in &ck.replicas {
        let primary = ck.nodes.iter().find(|k| k.node == owner).unwrap().encode();
        assert_eq!(first.conv_worker(holder.index as usize).replica(owner).unwrap(), &primary[..]);
    }
    let dir = tempfile::tempdir().unwrap();
    let mut loaded = Vec::new();
    for k in &ck.nodes {
        let path = dir.path().join(Checkpoint::file_name(k.node, k.iteration));
        k.save(&path).unwrap();
        loaded.push(Checkpoint::load(&path).unwrap());
    }
    // Restore FC worker 1 from its replica instead of the primary.
    let (holder, owner) = ck.replicas[1];
    let replica = Checkpoint::decode(first.conv_worker(holder.index as usize).replica(owner).unwrap()).unwrap();
    loaded.retain(|k| k.node != owner);
    loaded.push(replica);

    let t = SimTransport::new(&c3.plan.nodes(), NetConfig::gbps(1.0));
    let mut resumed = StanzaCluster::restore(c3, numeric(5), Box::new(t), &loaded).unwrap();
    resumed.run(10).unwrap();
    assert_eq!(params_digest(&resumed.params()), params_digest(&full.params()));
}

#[test]
fn truncated_checkpoint_is_corrupt() {
    let mut c = StanzaCluster::simulated(cfg(1, 1, 4), numeric(5), NetConfig::gbps(1.0)).unwrap();
    let ck = c.checkpoint().unwrap();
    let bytes = ck.nodes[0].encode();
    assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
}
