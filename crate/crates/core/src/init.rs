//! Deterministic parameter initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::layers::{Layer, LayerKind};
use crate::tensor::Tensor;

/// Builds layers with weights and biases drawn uniformly from
/// `[-sqrt(1/fan_in), +sqrt(1/fan_in)]`. The same `(kinds, seed)` always
/// yields bit-identical parameters.
pub fn seeded_layers(kinds: &[LayerKind], seed: u64) -> Vec<Layer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    kinds
        .iter()
        .map(|&kind| {
            let bound = if kind.fan_in() > 0 {
                (1.0 / kind.fan_in() as f32).sqrt()
            } else {
                0.0
            };
            let params = kind
                .param_shapes()
                .iter()
                .map(|shape| {
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
                    Tensor::new(shape.clone(), data).expect("param shape")
                })
                .collect();
            Layer { kind, params }
        })
        .collect()
}
