//! Small fully-connected building blocks shared by the flow conditioners,
//! the decoder, and the variational encoder.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::optim::ParamGroup;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    /// Negative slope 0.2.
    LeakyRelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputActivation {
    Linear,
    Tanh,
}

pub const LEAKY_SLOPE: f64 = 0.2;

/// Plain MLP over batch rows: [n, in] -> [n, out].
pub struct Mlp {
    weights: Vec<Tensor>,
    biases: Vec<Tensor>,
    pub activation: Activation,
    pub output: OutputActivation,
}

impl Mlp {
    /// Hidden layers get scaled-normal init; the final layer is zeroed when
    /// `zero_final` is set (identity-at-init flows) and scaled-normal
    /// otherwise.
    pub fn new(
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        activation: Activation,
        output: OutputActivation,
        zero_final: bool,
        rng: &mut ChaCha12Rng,
    ) -> Mlp {
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let last = l == dims.len() - 2;
            let std = if last && zero_final {
                0.0
            } else {
                (2.0 / fan_in.max(1) as f64).sqrt()
            };
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            weights.push(Tensor::param(&[fan_in, fan_out], w).expect("finite init"));
            biases.push(Tensor::param_zeros(&[fan_out]));
        }
        Mlp { weights, biases, activation, output }
    }

    pub fn in_dim(&self) -> usize {
        self.weights[0].shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.last().unwrap().shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.weights.len() - 1;
        for l in 0..=last {
            h = h.matmul(&self.weights[l])?.broadcast_add(&self.biases[l])?;
            if l < last {
                h = match self.activation {
                    Activation::Tanh => h.tanh()?,
                    Activation::LeakyRelu => h.leaky_relu(LEAKY_SLOPE)?,
                };
            }
        }
        match self.output {
            OutputActivation::Linear => Ok(h),
            OutputActivation::Tanh => h.tanh(),
        }
    }

    pub fn collect_params(&self, group: &mut ParamGroup, prefix: &str) {
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            group.insert(format!("{prefix}.w{l}"), w.clone());
            group.insert(format!("{prefix}.b{l}"), b.clone());
        }
    }

    /// Overwrite every layer with zeros (exact identity for zero-final
    /// conditioners).
    pub fn zero_all(&self) {
        for t in self.weights.iter().chain(&self.biases) {
            t.set_values(&vec![0.0; t.numel()]).expect("zeros are finite");
        }
    }

    /// Re-draw every layer, including the final one (used by tests that
    /// need a fully random function).
    pub fn randomize(&self, scale: f64, rng: &mut ChaCha12Rng) {
        for t in self.weights.iter().chain(&self.biases) {
            let vals: Vec<f64> = (0..t.numel())
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            t.set_values(&vals).expect("finite");
        }
    }
}

/// Deterministic sub-seed derivation so independent RNG consumers never
/// share a stream.
pub fn derive_seed(master: u64, domain: u64, index: u64) -> u64 {
    // splitmix64 over the mixed words
    let mut x = master
        .wrapping_add(domain.wrapping_mul(0x9E3779B97F4A7C15))
        .wrapping_add(index.wrapping_mul(0xBF58476D1CE4E5B9));
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58476D1CE4E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D049BB133111EB);
    x ^= x >> 31;
    x
}

/// Standard-normal draws as a flat [n, d] buffer.
pub fn normal_matrix(n: usize, d: usize, rng: &mut ChaCha12Rng) -> Vec<f64> {
    (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_mlp_outputs_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mlp = Mlp::new(3, &[8], 2, Activation::Tanh, OutputActivation::Tanh, false, &mut rng);
        mlp.zero_all();
        let x = Tensor::from_values(&[2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, -1.0]).unwrap();
        let y = mlp.forward(&x).unwrap();
        assert!(y.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn derive_seed_separates_streams() {
        let a = derive_seed(42, 1, 0);
        let b = derive_seed(42, 1, 1);
        let c = derive_seed(42, 2, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(42, 1, 0));
    }
}
