//! Seeded parameter initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conv::ConvSpec;
use crate::tensor::{Element, Tensor};

/// Deterministic stream of initial values.
pub struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, n: usize, bound: f64) -> Vec<f64> {
        (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect()
    }

    /// Kaiming-uniform (ReLU gain) over `fan_in = Ci · kernel volume`; zero bias.
    pub fn conv<T: Element>(&mut self, spec: &ConvSpec) -> (Tensor<T>, Tensor<T>) {
        let shape = spec.weight_shape();
        let fan_in = spec.in_channels * spec.kernel_volume();
        let bound = (6.0 / fan_in as f64).sqrt();
        let w: Vec<T> = self
            .uniform(shape.iter().product(), bound)
            .into_iter()
            .map(T::lit)
            .collect();
        (
            Tensor::parameter(w, &shape).expect("conv weight shape"),
            Tensor::parameter(vec![T::zero(); spec.out_channels], &[spec.out_channels]).expect("bias shape"),
        )
    }
}
