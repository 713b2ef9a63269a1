use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tch::Tensor;

use crate::nets::TensorArchive;

/// Pool of past generated images shown to a discriminator.
///
/// Until full, every image is stored and passed through. Once full, each
/// incoming image is, with probability 1/2, swapped with a random stored one
/// (the stored image is returned); otherwise it is returned unchanged.
#[derive(Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    images: Vec<Tensor>,
    swaps: u64,
    queries: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            images: Vec::with_capacity(capacity),
            swaps: 0,
            queries: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Number of queries answered with a stored image since creation.
    pub fn swaps(&self) -> u64 {
        self.swaps
    }

    pub fn queries_at_capacity(&self) -> u64 {
        self.queries
    }

    pub fn query(&mut self, batch: &Tensor, rng: &mut ChaCha8Rng) -> Tensor {
        if self.capacity == 0 {
            return batch.shallow_clone();
        }
        let batch = batch.detach();
        let n = batch.size()[0];
        let mut out = Vec::with_capacity(n as usize);
        for i in 0..n {
            let image = batch.get(i).copy();
            if self.images.len() < self.capacity {
                self.images.push(image.shallow_clone());
                out.push(image);
                continue;
            }
            self.queries += 1;
            if rng.gen::<f64>() < 0.5 {
                let slot = rng.gen_range(0..self.images.len());
                let stored = std::mem::replace(&mut self.images[slot], image);
                out.push(stored);
                self.swaps += 1;
            } else {
                out.push(image);
            }
        }
        Tensor::stack(&out, 0)
    }

    pub fn write_into(&self, archive: &mut TensorArchive, prefix: &str) {
        if !self.images.is_empty() {
            archive.insert(format!("{prefix}images"), &Tensor::stack(&self.images, 0));
        }
    }

    pub fn restore_from(&mut self, archive: &TensorArchive, prefix: &str) {
        self.images.clear();
        if let Some(stack) = archive.tensors.get(&format!("{prefix}images")) {
            for i in 0..stack.size()[0] {
                self.images.push(stack.get(i).copy());
            }
        }
    }
}
