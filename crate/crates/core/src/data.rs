//! Seeded synthetic datasets and the per-iteration batch schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[samples, ...sample_shape]`.
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

/// A mini-batch: inputs plus one label per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
}

impl Dataset {
    /// Standard-normal inputs with uniformly random labels.
    pub fn gaussian(seed: u64, samples: usize, sample_shape: &[usize], classes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let row: usize = sample_shape.iter().product();
        let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
        let data = (0..samples * row).map(|_| normal.sample(&mut rng)).collect();
        let labels = (0..samples).map(|_| rng.random_range(0..classes)).collect();
        Self::assemble(samples, sample_shape, data, labels, classes)
    }

    /// Two classes drawn around means `+mu` and `-mu` (per coordinate), unit variance.
    pub fn two_gaussians(seed: u64, samples: usize, sample_shape: &[usize], separation: f32) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let row: usize = sample_shape.iter().product();
        let normal = Normal::new(0.0f32, 1.0).expect("unit normal");
        let mut data = Vec::with_capacity(samples * row);
        let mut labels = Vec::with_capacity(samples);
        for _ in 0..samples {
            let label = rng.random_range(0..2usize);
            let mu = if label == 0 { separation } else { -separation };
            data.extend((0..row).map(|_| mu + normal.sample(&mut rng)));
            labels.push(label);
        }
        Self::assemble(samples, sample_shape, data, labels, 2)
    }

    fn assemble(samples: usize, sample_shape: &[usize], data: Vec<f32>, labels: Vec<usize>, classes: usize) -> Self {
        let mut shape = vec![samples];
        shape.extend_from_slice(sample_shape);
        Self {
            inputs: Tensor::new(shape, data).expect("sized above"),
            labels,
            classes,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Samples `[start, start + count)` of the stream that cycles through
    /// the dataset in order.
    pub fn window(&self, start: usize, count: usize) -> Batch {
        let n = self.len();
        let row = self.inputs.row_len();
        let mut shape = self.inputs.shape().to_vec();
        shape[0] = count;
        let mut data = Vec::with_capacity(count * row);
        let mut labels = Vec::with_capacity(count);
        for j in 0..count {
            let i = (start + j) % n;
            data.extend_from_slice(&self.inputs.data()[i * row..(i + 1) * row]);
            labels.push(self.labels[i]);
        }
        Batch {
            inputs: Tensor::new(shape, data).expect("sized above"),
            labels,
        }
    }

    /// The `part`-th slice of `k` samples of iteration `iteration`'s global
    /// batch, where the global batch has `parts * k` samples.
    pub fn part(&self, iteration: u64, part: usize, parts: usize, k: usize) -> Batch {
        let global = parts * k;
        let start = (u128::from(iteration) * global as u128 % self.len().max(1) as u128) as usize;
        self.window(start + part * k, k)
    }

    /// The whole global batch of `total` samples for `iteration`.
    pub fn global(&self, iteration: u64, total: usize) -> Batch {
        self.part(iteration, 0, 1, total)
    }
}

/// Full iterations per epoch when each iteration consumes `global_batch` samples.
/// A trailing partial batch is dropped.
pub fn iterations_per_epoch(dataset_size: u64, global_batch: u64) -> u64 {
    dataset_size / global_batch
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parts_tile_the_global_batch() {
        let d = Dataset::gaussian(3, 37, &[2, 3], 5);
        for it in [0u64, 1, 7] {
            let g = d.global(it, 12);
            let parts: Vec<Tensor> = (0..4).map(|p| d.part(it, p, 4, 3).inputs).collect();
            assert_eq!(Tensor::concat_batch(&parts).unwrap(), g.inputs);
        }
    }

    #[test]
    fn seeded() {
        assert_eq!(Dataset::gaussian(1, 10, &[4], 3), Dataset::gaussian(1, 10, &[4], 3));
        assert_ne!(Dataset::gaussian(1, 10, &[4], 3), Dataset::gaussian(2, 10, &[4], 3));
    }

    #[test]
    fn epoch_counts_drop_remainder() {
        assert_eq!(iterations_per_epoch(1_281_167, 2 * 128), 5004);
        assert_eq!(iterations_per_epoch(1_281_167, 4 * 128), 2502);
        assert_eq!(iterations_per_epoch(1_281_167, 8 * 128), 1251);
    }
}
