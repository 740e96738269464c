//! Shared fixtures for the criterion benches.

use layersep::collectives::{allreduce_sum, Buffer, Channel, Group};
use layersep::data::Dataset;
use layersep::layers::{Layer, LayerKind};
use layersep::model::{load_model, zoo};
use layersep::perf::PerfConstants;
use layersep::transport::{Block, NetConfig, NodeId, PhaseKey, SimTransport, Tag};
use layersep::Tensor;

/// The tiny CNN's second convolution with a batch of matching input.
pub fn conv_case(batch: usize) -> (Layer, Tensor) {
    let net = zoo::tiny_cnn().build(1).expect("builds");
    let layer = net.layers[3].clone();
    assert!(matches!(layer.kind, LayerKind::Conv2d { .. }));
    let data = Dataset::gaussian(2, batch, &[8, 8, 8], 10);
    (layer, data.inputs)
}

/// One allreduce of `len` elements over `n` simulated nodes.
pub fn allreduce_once(n: usize, len: usize) {
    let members: Vec<NodeId> = (0..n as u32).map(NodeId::conv).collect();
    let t = SimTransport::new(&members, NetConfig::gbps(10.0));
    let g = Group::new(members.clone(), 0).expect("distinct");
    let ch = Channel::new(Tag::AllreduceChunk, Block::Conv, PhaseKey::new(0, 0));
    std::thread::scope(|s| {
        for (i, &me) in members.iter().enumerate() {
            let (t, g) = (&t, &g);
            s.spawn(move || {
                let x = Tensor::vector(vec![i as f32; len]);
                allreduce_sum(t, g, me, Buffer::Real(x), ch).expect("allreduce")
            });
        }
    });
}

pub fn alexnet_constants() -> PerfConstants {
    let p = load_model("alexnet").and_then(|m| m.profile()).expect("builtin");
    PerfConstants::from_profile(&p, 0.42, 0.003, 0.43, 1e10)
}
