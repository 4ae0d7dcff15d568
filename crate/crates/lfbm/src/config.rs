//! JSON run configuration: schema, per-mode defaults, validation, and the
//! canonical hash used for checkpoint provenance.
//!
//! Omitted blocks fall back to the smallest published profile: for MCMC
//! runs that is K = 20/400, xi = 0.1, sigma = 1.0, batch 100, learning
//! rates 4e-4 with decay 0.998; the variational mode defaults to sigma
//! 0.5, generator lr 8e-3, prior lr 6e-4, inference lr 4e-4, decay 0.99,
//! and one inner update step. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{self, Dataset, MaskKind, MaskSpec, SyntheticFamily};
use crate::error::{Error, Result};
use crate::nn::{derive_seed, OutputActivation};
use crate::training::{TrainConfig, TrainMode, VaeExtras};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Mcmc,
    Vae,
    Recovery,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::Mcmc => "mcmc",
            Mode::Vae => "vae",
            Mode::Recovery => "recovery",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetCfg {
    GaussianMixture {
        n: usize,
        means: Vec<Vec<f64>>,
        cov: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    TwoRings {
        n: usize,
        radii: [f64; 2],
        noise: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    Idx {
        images: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        labels: Option<String>,
    },
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCfg {
    pub latent_dim: Option<usize>,
    pub flow_depth: Option<usize>,
    pub decoder_hidden: Option<Vec<usize>>,
    pub sigma: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LangevinCfg {
    pub train_steps: Option<usize>,
    pub test_steps: Option<usize>,
    pub step_size: Option<f64>,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimCfg {
    pub lr_prior: Option<f64>,
    pub lr_generator: Option<f64>,
    pub lr_inference: Option<f64>,
    pub decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub iterations: Option<usize>,
    pub inner_update_steps: Option<usize>,
    pub log_every: Option<usize>,
    pub freeze_prior: Option<bool>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskCfg {
    #[serde(flatten)]
    pub kind: MaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// The on-disk document. Every block is optional except mode and dataset.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub mode: Mode,
    pub dataset: DatasetCfg,
    #[serde(default)]
    pub model: ModelCfg,
    #[serde(default)]
    pub langevin: LangevinCfg,
    #[serde(default)]
    pub optim: OptimCfg,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskCfg>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
}

/// Fully resolved configuration; serialized into the run directory and
/// hashed for checkpoint provenance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EffectiveConfig {
    pub mode: Mode,
    pub dataset: DatasetCfg,
    pub latent_dim: usize,
    pub flow_depth: usize,
    pub decoder_hidden: Vec<usize>,
    pub sigma: f64,
    pub train_steps: usize,
    pub test_steps: usize,
    pub step_size: f64,
    pub lr_prior: f64,
    pub lr_generator: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_inference: Option<f64>,
    pub decay: f64,
    pub batch_size: usize,
    pub iterations: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub inner_update_steps: Option<usize>,
    pub log_every: usize,
    pub freeze_prior: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mask: Option<MaskSpec>,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<String>,
}

pub fn load_config(path: &Path) -> Result<ConfigFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config(&text)
}

pub fn parse_config(text: &str) -> Result<ConfigFile> {
    serde_json::from_str(text).map_err(|e| Error::config(format!("invalid config: {e}")))
}

impl ConfigFile {
    pub fn resolve(&self) -> Result<EffectiveConfig> {
        let vae = self.mode == Mode::Vae;
        let cfg = EffectiveConfig {
            mode: self.mode,
            dataset: self.dataset.clone(),
            latent_dim: self.model.latent_dim.unwrap_or(100),
            flow_depth: self.model.flow_depth.unwrap_or(5),
            decoder_hidden: self.model.decoder_hidden.clone().unwrap_or_else(|| vec![256, 256]),
            sigma: self.model.sigma.unwrap_or(if vae { 0.5 } else { 1.0 }),
            train_steps: self.langevin.train_steps.unwrap_or(20),
            test_steps: self.langevin.test_steps.unwrap_or(400),
            step_size: self.langevin.step_size.unwrap_or(0.1),
            lr_prior: self.optim.lr_prior.unwrap_or(if vae { 0.0006 } else { 0.0004 }),
            lr_generator: self.optim.lr_generator.unwrap_or(if vae { 0.008 } else { 0.0004 }),
            lr_inference: if vae { Some(self.optim.lr_inference.unwrap_or(0.0004)) } else { None },
            decay: self.optim.decay.unwrap_or(if vae { 0.99 } else { 0.998 }),
            batch_size: self.optim.batch_size.unwrap_or(100),
            iterations: self.optim.iterations.unwrap_or(2000),
            inner_update_steps: if vae { Some(self.optim.inner_update_steps.unwrap_or(1)) } else { None },
            log_every: self.optim.log_every.unwrap_or(25),
            freeze_prior: self.optim.freeze_prior.unwrap_or(false),
            mask: self.mask.as_ref().map(|m| MaskSpec {
                kind: m.kind.clone(),
                seed: m.seed.unwrap_or_else(|| data::mask_seed(self.seed)),
            }),
            seed: self.seed,
            out_dir: self.out_dir.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

impl EffectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.flow_depth == 0 {
            return Err(Error::config("latent_dim and flow_depth must be positive"));
        }
        if self.sigma <= 0.0 {
            return Err(Error::config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.step_size <= 0.0 {
            return Err(Error::config(format!("step_size must be positive, got {}", self.step_size)));
        }
        if self.batch_size == 0 || self.iterations == 0 || self.log_every == 0 {
            return Err(Error::config("batch_size, iterations, and log_every must be positive"));
        }
        if self.decay <= 0.0 || self.decay > 1.0 {
            return Err(Error::config(format!("decay must lie in (0, 1], got {}", self.decay)));
        }
        match self.mode {
            Mode::Recovery => {
                if self.mask.is_none() {
                    return Err(Error::config("recovery mode requires a mask block"));
                }
            }
            _ => {
                if self.mask.is_some() {
                    return Err(Error::config(format!(
                        "mask block is only valid in recovery mode (mode is {})",
                        self.mode.as_str()
                    )));
                }
            }
        }
        Ok(())
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Materialize the dataset this run trains on, plus the image shape
    /// when the source is a raster format.
    pub fn build_dataset(&self) -> Result<(Dataset, Option<(usize, usize)>)> {
        match &self.dataset {
            DatasetCfg::GaussianMixture { n, means, cov, seed } => {
                let family = SyntheticFamily::GaussianMixture { means: means.clone(), cov: *cov };
                let ds = data::gen_synthetic(&family, *n, seed.unwrap_or_else(|| derive_seed(self.seed, 0xDA7A, 0)))?;
                Ok((ds, None))
            }
            DatasetCfg::TwoRings { n, radii, noise, seed } => {
                let family = SyntheticFamily::TwoRings { radii: *radii, noise: *noise };
                let ds = data::gen_synthetic(&family, *n, seed.unwrap_or_else(|| derive_seed(self.seed, 0xDA7A, 0)))?;
                Ok((ds, None))
            }
            DatasetCfg::Idx { images, labels } => {
                let images_path = Path::new(images);
                let ds = data::load_idx(images_path, labels.as_deref().map(Path::new))?;
                let shape = data::idx_image_shape(images_path)?;
                Ok((ds, Some(shape)))
            }
        }
    }

    pub fn to_train_config(&self) -> TrainConfig {
        TrainConfig {
            mode: match self.mode {
                Mode::Mcmc => TrainMode::Mcmc,
                Mode::Vae => TrainMode::Vae,
                Mode::Recovery => TrainMode::Recovery,
            },
            iterations: self.iterations,
            batch_size: self.batch_size,
            lr_prior: self.lr_prior,
            lr_generator: self.lr_generator,
            decay: self.decay,
            langevin_steps: self.train_steps,
            langevin_step_size: self.step_size,
            latent_dim: self.latent_dim,
            flow_depth: self.flow_depth,
            coupling_width: 128,
            decoder_hidden: self.decoder_hidden.clone(),
            output_activation: OutputActivation::Tanh,
            sigma: self.sigma,
            seed: self.seed,
            freeze_prior: self.freeze_prior,
            log_every: self.log_every,
            vae: if self.mode == Mode::Vae {
                Some(VaeExtras {
                    lr_inference: self.lr_inference.unwrap_or(0.0004),
                    inner_update_steps: self.inner_update_steps.unwrap_or(1),
                    posterior_depth: 5,
                    posterior_width: 64,
                    encoder_hidden: vec![256, 256],
                })
            } else {
                None
            },
            checkpoint: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_small_profile() {
        let cfg = parse_config(
            r#"{"mode": "mcmc", "dataset": {"kind": "gaussian_mixture", "n": 100, "means": [[0.0, 0.0]], "cov": 0.01}}"#,
        )
        .unwrap()
        .resolve()
        .unwrap();
        assert_eq!(cfg.lr_prior, 0.0004);
        assert_eq!(cfg.lr_generator, 0.0004);
        assert_eq!(cfg.decay, 0.998);
        assert_eq!(cfg.batch_size, 100);
        assert_eq!(cfg.train_steps, 20);
        assert_eq!(cfg.test_steps, 400);
        assert_eq!(cfg.step_size, 0.1);
        assert_eq!(cfg.sigma, 1.0);
        assert_eq!(cfg.latent_dim, 100);
        assert_eq!(cfg.flow_depth, 5);
        assert_eq!(cfg.decoder_hidden, vec![256, 256]);
        assert!(cfg.lr_inference.is_none());
    }

    #[test]
    fn vae_defaults_differ() {
        let cfg = parse_config(
            r#"{"mode": "vae", "dataset": {"kind": "gaussian_mixture", "n": 100, "means": [[0.0, 0.0]], "cov": 0.01}}"#,
        )
        .unwrap()
        .resolve()
        .unwrap();
        assert_eq!(cfg.sigma, 0.5);
        assert_eq!(cfg.lr_generator, 0.008);
        assert_eq!(cfg.lr_prior, 0.0006);
        assert_eq!(cfg.lr_inference, Some(0.0004));
        assert_eq!(cfg.decay, 0.99);
        assert_eq!(cfg.inner_update_steps, Some(1));
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = parse_config(
            r#"{"mode": "mcmc", "dataset": {"kind": "gaussian_mixture", "n": 10, "means": [[0.0]], "cov": 0.1}, "bogus": 1}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let err = parse_config(
            r#"{"mode": "mcmc", "dataset": {"kind": "gaussian_mixture", "n": 10, "means": [[0.0]], "cov": 0.1}, "optim": {"lr": 0.1}}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("lr"));
    }

    #[test]
    fn recovery_requires_mask_and_others_reject_it() {
        let no_mask = parse_config(
            r#"{"mode": "recovery", "dataset": {"kind": "gaussian_mixture", "n": 10, "means": [[0.0]], "cov": 0.1}}"#,
        )
        .unwrap()
        .resolve();
        assert!(no_mask.is_err());

        let with_mask = parse_config(
            r#"{"mode": "mcmc", "dataset": {"kind": "gaussian_mixture", "n": 10, "means": [[0.0]], "cov": 0.1},
                "mask": {"kind": "salt_pepper", "fraction": 0.5}}"#,
        )
        .unwrap()
        .resolve();
        assert!(with_mask.is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let base = parse_config(
            r#"{"mode": "mcmc", "dataset": {"kind": "gaussian_mixture", "n": 100, "means": [[0.0, 0.0]], "cov": 0.01}, "seed": 7}"#,
        )
        .unwrap()
        .resolve()
        .unwrap();
        assert_eq!(base.hash(), base.hash());
        let mut other = base.clone();
        other.seed = 8;
        assert_ne!(base.hash(), other.hash());
        assert_eq!(base.hash().len(), 16);
    }
}
