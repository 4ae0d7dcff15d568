//! The top-down Gaussian decoder and the joint density it forms with the
//! flow prior, including masked-evidence variants for inpainting and
//! recovery.

use std::f64::consts::TAU;

use rand_chacha::ChaCha12Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::nn::{derive_seed, Activation, Mlp, OutputActivation};
use crate::optim::ParamGroup;
use crate::tensor::{backward, Tensor};

/// Visibility mask over one example: 1 marks a visible pixel, 0 an
/// occluded one.
#[derive(Clone, Debug)]
pub struct Mask {
    pub bits: Vec<f64>,
}

impl Mask {
    pub fn new(bits: Vec<f64>) -> Result<Mask> {
        if bits.iter().any(|&b| b != 0.0 && b != 1.0) {
            return Err(Error::contract("mask bits must be 0 or 1"));
        }
        Ok(Mask { bits })
    }

    pub fn all_visible(d: usize) -> Mask {
        Mask { bits: vec![1.0; d] }
    }

    pub fn visible_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1.0).count()
    }

    /// 1 where this mask is 0 and vice versa (the occluded region).
    pub fn complement(&self) -> Mask {
        Mask { bits: self.bits.iter().map(|b| 1.0 - b).collect() }
    }
}

/// Stack per-example masks into a flat [n, d] buffer.
pub fn stack_masks(masks: &[Mask]) -> Vec<f64> {
    masks.iter().flat_map(|m| m.bits.iter().copied()).collect()
}

/// Decoder g: latent d-vectors to data D-vectors, with a fixed residual
/// scale sigma defining p(x|z) = N(g(z), sigma^2 I).
pub struct Generator {
    pub mlp: Mlp,
    pub sigma: f64,
    pub latent_dim: usize,
    pub data_dim: usize,
}

impl Generator {
    pub fn new(
        latent_dim: usize,
        data_dim: usize,
        hidden: &[usize],
        output: OutputActivation,
        sigma: f64,
        seed: u64,
    ) -> Result<Generator> {
        if sigma <= 0.0 {
            return Err(Error::contract(format!("sigma must be positive, got {sigma}")));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 0x6E, 0));
        let mlp = Mlp::new(latent_dim, hidden, data_dim, Activation::LeakyRelu, output, false, &mut rng);
        Ok(Generator { mlp, sigma, latent_dim, data_dim })
    }

    fn check_latent(&self, z: &Tensor) -> Result<()> {
        let s = z.shape();
        if s.len() != 2 || s[1] != self.latent_dim {
            return Err(Error::contract(format!(
                "generator expects [n, {}] latents, got {s:?}",
                self.latent_dim
            )));
        }
        Ok(())
    }

    /// Deterministic mean of p(x|z).
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.check_latent(z)?;
        self.mlp.forward(z)
    }

    pub fn decode_values(&self, z_values: &[f64]) -> Result<Vec<f64>> {
        let n = z_values.len() / self.latent_dim;
        let z = Tensor::from_values(&[n, self.latent_dim], z_values.to_vec())?;
        Ok(self.decode(&z)?.values())
    }

    /// Per-example log p(x|z) for a Gaussian observation model:
    /// -||x - g(z)||^2 / (2 sigma^2) - (D/2) ln(2 pi sigma^2).
    pub fn log_likelihood(&self, x: &Tensor, z: &Tensor) -> Result<Tensor> {
        self.check_latent(z)?;
        let sx = x.shape();
        if sx.len() != 2 || sx[1] != self.data_dim || sx[0] != z.shape()[0] {
            return Err(Error::contract(format!(
                "log_likelihood: data shape {sx:?} incompatible with [n, {}]",
                self.data_dim
            )));
        }
        let g = self.decode(z)?;
        let sq = x.sub(&g)?.square()?.sum_rows()?;
        let norm = -0.5 * self.data_dim as f64 * (TAU * self.sigma * self.sigma).ln();
        sq.scale(-1.0 / (2.0 * self.sigma * self.sigma))?.add_scalar(norm)
    }

    /// Masked variant: the residual is restricted to visible pixels and the
    /// normalization scales with the per-example visible count, so
    /// likelihoods stay comparable across occlusion levels.
    pub fn masked_log_likelihood(&self, x: &Tensor, z: &Tensor, masks: &[Mask]) -> Result<Tensor> {
        self.check_latent(z)?;
        let n = z.shape()[0];
        if masks.len() != n {
            return Err(Error::contract(format!(
                "masked_log_likelihood: {} masks for batch of {n}",
                masks.len()
            )));
        }
        let mut counts = Vec::with_capacity(n);
        for (i, m) in masks.iter().enumerate() {
            if m.bits.len() != self.data_dim {
                return Err(Error::contract(format!(
                    "mask {i} has {} bits, data dim is {}",
                    m.bits.len(),
                    self.data_dim
                )));
            }
            let c = m.visible_count();
            if c == 0 {
                return Err(Error::contract(format!("mask {i} hides every pixel (no visible evidence)")));
            }
            counts.push(c as f64);
        }
        let g = self.decode(z)?;
        let mask_t = Tensor::from_values(&[n, self.data_dim], stack_masks(masks))?;
        let sq = x.sub(&g)?.mul(&mask_t)?.square()?.sum_rows()?;
        let log_norm = (TAU * self.sigma * self.sigma).ln();
        let norms: Vec<f64> = counts.iter().map(|c| -0.5 * c * log_norm).collect();
        let norm_t = Tensor::from_values(&[n], norms)?;
        sq.scale(-1.0 / (2.0 * self.sigma * self.sigma))?.add(&norm_t)
    }

    pub fn params(&self) -> ParamGroup {
        let mut group = ParamGroup::new();
        self.mlp.collect_params(&mut group, "mlp");
        group
    }
}

/// Amortized inference model for the variational baseline: a bottom-up
/// encoder producing a diagonal Gaussian, refined by an autoregressive
/// affine flow.
pub struct PosteriorNet {
    trunk: Mlp,
    mu_head: Mlp,
    logvar_head: Mlp,
    pub arflow: crate::flow::ArPosteriorFlow,
    pub latent_dim: usize,
    pub data_dim: usize,
    pub enc_hidden: Vec<usize>,
    pub ar_depth: usize,
    pub ar_width: usize,
}

/// One reparameterized draw from the posterior flow, with everything the
/// ELBO needs still attached to the graph.
pub struct PosteriorSample {
    pub z0: Tensor,
    pub z: Tensor,
    pub flow_logdet: Tensor,
    pub mu: Tensor,
    pub logvar: Tensor,
}

const LOGVAR_MID: f64 = -2.0;
const LOGVAR_HALF: f64 = 6.0;

impl PosteriorNet {
    pub fn new(
        data_dim: usize,
        latent_dim: usize,
        enc_hidden: &[usize],
        ar_depth: usize,
        ar_width: usize,
        seed: u64,
    ) -> Result<PosteriorNet> {
        if enc_hidden.is_empty() {
            return Err(Error::contract("encoder needs at least one hidden layer"));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 0xE6C, 0));
        let trunk_out = *enc_hidden.last().unwrap();
        let trunk_hidden = &enc_hidden[..enc_hidden.len() - 1];
        let trunk = Mlp::new(data_dim, trunk_hidden, trunk_out, Activation::LeakyRelu, OutputActivation::Linear, false, &mut rng);
        let mu_head = Mlp::new(trunk_out, &[], latent_dim, Activation::LeakyRelu, OutputActivation::Linear, false, &mut rng);
        let logvar_head = Mlp::new(trunk_out, &[], latent_dim, Activation::LeakyRelu, OutputActivation::Linear, true, &mut rng);
        let arflow = crate::flow::ArPosteriorFlow::new(latent_dim, ar_depth, ar_width, derive_seed(seed, 0xE6C, 1))?;
        Ok(PosteriorNet {
            trunk,
            mu_head,
            logvar_head,
            arflow,
            latent_dim,
            data_dim,
            enc_hidden: enc_hidden.to_vec(),
            ar_depth,
            ar_width,
        })
    }

    /// Encoder pass: mean and bounded log-variance of the base Gaussian.
    /// The log-variance is kept inside (-8, 4) by a smooth tanh bound.
    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.trunk.forward(x)?.leaky_relu(crate::nn::LEAKY_SLOPE)?;
        let mu = self.mu_head.forward(&h)?;
        let raw = self.logvar_head.forward(&h)?;
        let logvar = raw
            .add_scalar(-LOGVAR_MID)?
            .scale(1.0 / LOGVAR_HALF)?
            .tanh()?
            .scale(LOGVAR_HALF)?
            .add_scalar(LOGVAR_MID)?;
        Ok((mu, logvar))
    }

    /// z0 = mu + exp(logvar/2) * eps pushed through the posterior flow.
    pub fn reparam_sample(&self, x: &Tensor, eps: &Tensor) -> Result<PosteriorSample> {
        let (mu, logvar) = self.encode(x)?;
        let std = logvar.scale(0.5)?.exp()?;
        let z0 = mu.add(&std.mul(eps)?)?;
        let (z, flow_logdet) = self.arflow.apply(&z0)?;
        Ok(PosteriorSample { z0, z, flow_logdet, mu, logvar })
    }

    pub fn params(&self) -> ParamGroup {
        let mut group = ParamGroup::new();
        self.trunk.collect_params(&mut group, "trunk");
        self.mu_head.collect_params(&mut group, "mu");
        self.logvar_head.collect_params(&mut group, "logvar");
        group.extend_prefixed("arflow", &self.arflow.params());
        group
    }
}

/// Per-example log p(x, z) = log p_prior(z) + log p(x|z); the anomaly
/// decision score (higher = more normal).
pub fn joint_log_prob(prior: &FlowModel, gen: &Generator, x: &Tensor, z: &Tensor) -> Result<Tensor> {
    let lp = prior.log_prob(z)?;
    let ll = gen.log_likelihood(x, z)?;
    lp.add(&ll)
}

/// Masked-evidence joint density, used by inpainting and recovery.
pub fn masked_joint_log_prob(
    prior: &FlowModel,
    gen: &Generator,
    x: &Tensor,
    z: &Tensor,
    masks: &[Mask],
) -> Result<Tensor> {
    let lp = prior.log_prob(z)?;
    let ll = gen.masked_log_likelihood(x, z, masks)?;
    lp.add(&ll)
}

/// Gradient of the (optionally masked) joint log-density with respect to
/// the latents; the drift term of the posterior Langevin dynamics.
pub fn posterior_grad_z(
    prior: &FlowModel,
    gen: &Generator,
    x_values: &[f64],
    z_values: &[f64],
    masks: Option<&[Mask]>,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = z_values.len() / prior.dim;
    let x = Tensor::from_values(&[n, gen.data_dim], x_values.to_vec())?;
    let z = Tensor::param(&[n, prior.dim], z_values.to_vec())?;
    let joint = match masks {
        Some(m) => masked_joint_log_prob(prior, gen, &x, &z, m)?,
        None => joint_log_prob(prior, gen, &x, &z)?,
    };
    let joint_values = joint.values();
    backward(&joint.sum()?)?;
    Ok((z.grad_or_zeros(), joint_values))
}
