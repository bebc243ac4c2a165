//! Seeded minibatch index streams.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Draws fixed-size batches without replacement within an epoch and
/// reshuffles between epochs. A trailing partial batch is dropped.
#[derive(Debug, Clone)]
pub struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
    epoch: usize,
    rng: ChaCha8Rng,
}

impl EpochSampler {
    /// Panics if `batch_size` is zero or exceeds `len`.
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Self {
        assert!(batch_size > 0 && batch_size <= len, "batch size {batch_size} vs pool of {len}");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, batch_size, epoch: 0, rng }
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch_size > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.epoch += 1;
        }
        let batch = self.order[self.pos..self.pos + self.batch_size].to_vec();
        self.pos += self.batch_size;
        batch
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epoch_covers_each_index_once() {
        let mut s = EpochSampler::new(10, 3, 1);
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert_eq!(s.epoch(), 0);
        s.next_batch();
        assert_eq!(s.epoch(), 1);
    }

    #[test]
    fn seeded() {
        let a: Vec<_> = {
            let mut s = EpochSampler::new(20, 4, 7);
            (0..10).map(|_| s.next_batch()).collect()
        };
        let mut s = EpochSampler::new(20, 4, 7);
        let b: Vec<_> = (0..10).map(|_| s.next_batch()).collect();
        assert_eq!(a, b);
    }
}
