//! Training: the MCMC maximum-likelihood loop (posterior inference by
//! short-run Langevin, then one Adam ascent step each for the prior on the
//! inferred latents and for the generator on the regression likelihood),
//! the variational baseline with a flow posterior, recovery training from
//! occluded data, and the convergence diagnostics.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use crate::checkpoint::{build_checkpoint, CheckpointMeta};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{mmd, mse};
use crate::flow::FlowModel;
use crate::inference::{sample_posterior, LangevinConfig};
use crate::model::{Generator, Mask, PosteriorNet};
use crate::nn::{derive_seed, normal_matrix, OutputActivation};
use crate::optim::Adam;
use crate::tensor::{backward, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    Mcmc,
    Vae,
    Recovery,
}

#[derive(Clone, Debug)]
pub struct VaeExtras {
    pub lr_inference: f64,
    pub inner_update_steps: usize,
    pub posterior_depth: usize,
    pub posterior_width: usize,
    pub encoder_hidden: Vec<usize>,
}

/// Where and with what metadata periodic/abort checkpoints are written.
#[derive(Clone)]
pub struct CheckpointSink {
    pub dir: PathBuf,
    pub meta: CheckpointMeta,
}

#[derive(Clone)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr_prior: f64,
    pub lr_generator: f64,
    pub decay: f64,
    pub langevin_steps: usize,
    pub langevin_step_size: f64,
    pub latent_dim: usize,
    pub flow_depth: usize,
    pub coupling_width: usize,
    pub decoder_hidden: Vec<usize>,
    pub output_activation: OutputActivation,
    pub sigma: f64,
    pub seed: u64,
    /// Keep the prior at the exact standard normal: skip ActNorm
    /// initialization and all prior updates (the Gaussian-prior ablation).
    pub freeze_prior: bool,
    pub log_every: usize,
    pub vae: Option<VaeExtras>,
    pub checkpoint: Option<CheckpointSink>,
}

impl TrainConfig {
    pub fn small(mode: TrainMode, latent_dim: usize, data_dim_hint: usize) -> TrainConfig {
        let _ = data_dim_hint;
        TrainConfig {
            mode,
            iterations: 100,
            batch_size: 32,
            lr_prior: 0.0004,
            lr_generator: 0.0004,
            decay: 0.998,
            langevin_steps: 20,
            langevin_step_size: 0.1,
            latent_dim,
            flow_depth: 5,
            coupling_width: 32,
            decoder_hidden: vec![64, 64],
            output_activation: OutputActivation::Tanh,
            sigma: 1.0,
            seed: 0,
            freeze_prior: false,
            log_every: 25,
            vae: None,
            checkpoint: None,
        }
    }

    fn validate(&self, data: &Dataset) -> Result<()> {
        if data.is_empty() {
            return Err(Error::contract("training on an empty dataset"));
        }
        if self.batch_size == 0 || self.iterations == 0 || self.log_every == 0 {
            return Err(Error::contract("batch_size, iterations, log_every must be positive"));
        }
        if self.langevin_step_size <= 0.0 {
            return Err(Error::contract("langevin step size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RunRecord {
    pub iteration: usize,
    pub recon_mse: f64,
    pub mean_prior_logp: f64,
    pub residual_prior: f64,
    pub residual_generator: f64,
    pub mmd_latent: f64,
    pub masked_mse: Option<f64>,
    pub elbo: Option<f64>,
    pub elapsed_s: f64,
}

/// Append-only per-iteration diagnostics, exportable as CSV.
#[derive(Clone, Debug, Default)]
pub struct RunLog {
    pub records: Vec<RunRecord>,
}

impl RunLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        writeln!(
            f,
            "iteration,recon_mse,mean_prior_logp,residual_prior,residual_generator,mmd_latent,masked_mse,elbo,elapsed_s"
        )?;
        for r in &self.records {
            let masked = r.masked_mse.map(|v| v.to_string()).unwrap_or_default();
            let elbo = r.elbo.map(|v| v.to_string()).unwrap_or_default();
            writeln!(
                f,
                "{},{},{},{},{},{},{},{},{}",
                r.iteration,
                r.recon_mse,
                r.mean_prior_logp,
                r.residual_prior,
                r.residual_generator,
                r.mmd_latent,
                masked,
                elbo,
                r.elapsed_s
            )?;
        }
        Ok(())
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// One Adam ascent step for the prior on the mean log-density of the
/// inferred latents (treated as constants). Returns the pre-step gradient
/// norm, the estimating-equation residual for this batch.
pub fn update_prior(prior: &FlowModel, z_inferred: &[f64], adam: &mut Adam) -> Result<f64> {
    let params = prior.params();
    params.zero_grad();
    let n = z_inferred.len() / prior.dim;
    let z = Tensor::from_values(&[n, prior.dim], z_inferred.to_vec())?;
    let loss = prior.log_prob(&z)?.sum()?.scale(-1.0 / n as f64)?;
    backward(&loss)?;
    let norm = l2(&params.flat_grad());
    adam.step(&params)?;
    Ok(norm)
}

/// One Adam ascent step for the generator on the mean (optionally masked)
/// observation log-likelihood. Returns the pre-step gradient norm.
pub fn update_generator(
    gen: &Generator,
    x: &[f64],
    z_inferred: &[f64],
    masks: Option<&[Mask]>,
    adam: &mut Adam,
) -> Result<f64> {
    let params = gen.params();
    params.zero_grad();
    let n = z_inferred.len() / gen.latent_dim;
    let z = Tensor::from_values(&[n, gen.latent_dim], z_inferred.to_vec())?;
    let x_t = Tensor::from_values(&[n, gen.data_dim], x.to_vec())?;
    let ll = match masks {
        Some(m) => gen.masked_log_likelihood(&x_t, &z, m)?,
        None => gen.log_likelihood(&x_t, &z)?,
    };
    let loss = ll.sum()?.scale(-1.0 / n as f64)?;
    backward(&loss)?;
    let norm = l2(&params.flat_grad());
    adam.step(&params)?;
    Ok(norm)
}

#[derive(Clone, Debug)]
pub struct Diagnostics {
    /// Norm of the mean prior gradient over the batch (estimating-equation
    /// residual for the prior).
    pub residual_prior: f64,
    /// Norm of the mean generator gradient (estimating-equation residual
    /// for the generator).
    pub residual_generator: f64,
    pub mean_prior_logp: f64,
    /// MMD between fresh prior samples and the inferred latents, the
    /// aggregated-posterior match proxy.
    pub mmd_latent: f64,
}

/// Convergence diagnostics at the current parameters for a batch of
/// observations and their inferred latents. Leaves all gradients zeroed.
pub fn diagnostics_step(
    prior: &FlowModel,
    gen: &Generator,
    x: &[f64],
    z_inferred: &[f64],
    sample_seed: u64,
) -> Result<Diagnostics> {
    let n = z_inferred.len() / prior.dim;
    let z = Tensor::from_values(&[n, prior.dim], z_inferred.to_vec())?;
    let x_t = Tensor::from_values(&[n, gen.data_dim], x.to_vec())?;

    let prior_params = prior.params();
    prior_params.zero_grad();
    let lp = prior.log_prob(&z)?;
    let mean_prior_logp = lp.values().iter().sum::<f64>() / n as f64;
    backward(&lp.sum()?.scale(1.0 / n as f64)?)?;
    let residual_prior = l2(&prior_params.flat_grad());
    prior_params.zero_grad();

    let gen_params = gen.params();
    gen_params.zero_grad();
    let ll = gen.log_likelihood(&x_t, &z)?;
    backward(&ll.sum()?.scale(1.0 / n as f64)?)?;
    let residual_generator = l2(&gen_params.flat_grad());
    gen_params.zero_grad();

    let mut rng = ChaCha12Rng::seed_from_u64(sample_seed);
    let prior_samples = prior.sample_values(n, &mut rng)?;
    let mmd_latent = mmd(&prior_samples, z_inferred, prior.dim)?;

    Ok(Diagnostics { residual_prior, residual_generator, mean_prior_logp, mmd_latent })
}

fn snapshot(groups: &[&crate::optim::ParamGroup]) -> Vec<Vec<f64>> {
    groups.iter().flat_map(|g| g.iter().map(|(_, t)| t.values())).collect()
}

fn restore_snapshot(groups: &[&crate::optim::ParamGroup], snap: &[Vec<f64>]) {
    let mut it = snap.iter();
    for g in groups {
        for (_, t) in g.iter() {
            t.set_values(it.next().expect("snapshot layout")).expect("snapshot finite");
        }
    }
}

fn write_sink(sink: &CheckpointSink, name: &str, prior: &FlowModel, gen: &Generator, post: Option<&PosteriorNet>) {
    let ckpt = build_checkpoint(sink.meta.clone(), prior, gen, post, None);
    let path = sink.dir.join(name);
    if let Err(e) = ckpt.save(&path) {
        eprintln!("warning: could not write checkpoint {}: {e}", path.display());
    }
}

fn build_prior(cfg: &TrainConfig) -> Result<FlowModel> {
    if cfg.freeze_prior {
        FlowModel::identity(cfg.latent_dim, cfg.flow_depth)
    } else {
        FlowModel::new(
            cfg.latent_dim,
            cfg.flow_depth,
            cfg.coupling_width,
            derive_seed(cfg.seed, 0x10, 0),
        )
    }
}

fn build_generator(cfg: &TrainConfig, data_dim: usize) -> Result<Generator> {
    Generator::new(
        cfg.latent_dim,
        data_dim,
        &cfg.decoder_hidden,
        cfg.output_activation,
        cfg.sigma,
        derive_seed(cfg.seed, 0x11, 0),
    )
}

/// The shared MCMC training loop; recovery is the same loop with
/// per-example visibility masks on the likelihood.
fn train_loop(
    data: &Dataset,
    masks: Option<&[Mask]>,
    ground_truth: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(FlowModel, Generator, RunLog)> {
    cfg.validate(data)?;
    if let Some(ms) = masks {
        if ms.len() != data.len() {
            return Err(Error::contract(format!("{} masks for {} examples", ms.len(), data.len())));
        }
        for (i, m) in ms.iter().enumerate() {
            if m.visible_count() == 0 {
                return Err(Error::data(format!("example {i} is fully occluded")));
            }
        }
    }

    let prior = build_prior(cfg)?;
    let gen = build_generator(cfg, data.dim)?;
    let mut state = LoopState {
        adam_p: Adam::new(&prior.params(), cfg.lr_prior, cfg.decay),
        adam_g: Adam::new(&gen.params(), cfg.lr_generator, cfg.decay),
        shuffle_rng: ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, 0x12, 0)),
        order: (0..data.len()).collect(),
        pos: 0,
        epochs_done: 0,
        runlog: RunLog::default(),
        started: Instant::now(),
        last_good: snapshot(&[&prior.params(), &gen.params()]),
    };
    state.order.shuffle(&mut state.shuffle_rng);

    if let Err(e) = run_iterations(data, masks, ground_truth, cfg, &prior, &gen, &mut state) {
        if matches!(e, Error::Numeric(_)) {
            restore_snapshot(&[&prior.params(), &gen.params()], &state.last_good);
            if let Some(sink) = &cfg.checkpoint {
                write_sink(sink, "checkpoint_abort.lfbm", &prior, &gen, None);
            }
        }
        return Err(e);
    }
    Ok((prior, gen, state.runlog))
}

struct LoopState {
    adam_p: Adam,
    adam_g: Adam,
    shuffle_rng: ChaCha12Rng,
    order: Vec<usize>,
    pos: usize,
    epochs_done: usize,
    runlog: RunLog,
    started: Instant,
    last_good: Vec<Vec<f64>>,
}

fn run_iterations(
    data: &Dataset,
    masks: Option<&[Mask]>,
    ground_truth: Option<&Dataset>,
    cfg: &TrainConfig,
    prior: &FlowModel,
    gen: &Generator,
    state: &mut LoopState,
) -> Result<()> {
    let n_data = data.len();
    for t in 1..=cfg.iterations {
        if state.pos >= n_data {
            state.adam_p.end_epoch();
            state.adam_g.end_epoch();
            state.epochs_done += 1;
            if state.epochs_done % 10 == 0 {
                if let Some(sink) = &cfg.checkpoint {
                    write_sink(sink, "checkpoint.lfbm", prior, gen, None);
                }
            }
            let rng = &mut state.shuffle_rng;
            state.order.shuffle(rng);
            state.pos = 0;
        }
        let end = (state.pos + cfg.batch_size).min(n_data);
        let batch_idx: Vec<usize> = state.order[state.pos..end].to_vec();
        state.pos = end;

        let x = data.gather(&batch_idx);
        let batch_masks: Option<Vec<Mask>> =
            masks.map(|ms| batch_idx.iter().map(|&i| ms[i].clone()).collect());

        let lcfg = LangevinConfig::new(
            cfg.langevin_steps,
            cfg.langevin_step_size,
            derive_seed(cfg.seed, 0x13, t as u64),
        );
        let (z, _) = sample_posterior(prior, gen, &x, &lcfg, batch_masks.as_deref())?;

        if !cfg.freeze_prior {
            update_prior(prior, &z, &mut state.adam_p)?;
        }
        update_generator(gen, &x, &z, batch_masks.as_deref(), &mut state.adam_g)?;

        if t == 1 || t == cfg.iterations || t % cfg.log_every == 0 {
            let diag = diagnostics_step(prior, gen, &x, &z, derive_seed(cfg.seed, 0x14, t as u64))?;
            let decoded = gen.decode_values(&z)?;
            let recon_mse = mse(&decoded, &x, None)?;
            let masked_mse = match (&batch_masks, ground_truth) {
                (Some(bm), Some(gt)) => {
                    let gt_batch = gt.gather(&batch_idx);
                    let occluded: Vec<f64> = bm.iter().flat_map(|m| m.complement().bits).collect();
                    if occluded.iter().any(|&b| b == 1.0) {
                        Some(mse(&decoded, &gt_batch, Some(&occluded))?)
                    } else {
                        None
                    }
                }
                _ => None,
            };
            state.runlog.records.push(RunRecord {
                iteration: t,
                recon_mse,
                mean_prior_logp: diag.mean_prior_logp,
                residual_prior: diag.residual_prior,
                residual_generator: diag.residual_generator,
                mmd_latent: diag.mmd_latent,
                masked_mse,
                elbo: None,
                elapsed_s: state.started.elapsed().as_secs_f64(),
            });
            state.last_good = snapshot(&[&prior.params(), &gen.params()]);
        }
    }
    Ok(())
}

/// Algorithm-style MCMC maximum-likelihood training.
pub fn train_mcmc(data: &Dataset, cfg: &TrainConfig) -> Result<(FlowModel, Generator, RunLog)> {
    train_loop(data, None, None, cfg)
}

/// Recovery training from occluded data: the same loop with the posterior
/// and the generator gradient both restricted to visible pixels. Returns
/// the final recovered images g(z) for the whole dataset alongside the
/// models and log.
pub fn train_recovery(
    occluded: &Dataset,
    masks: &[Mask],
    ground_truth: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(FlowModel, Generator, Vec<f64>, RunLog)> {
    let (prior, gen, runlog) = train_loop(occluded, Some(masks), ground_truth, cfg)?;
    // recover every training image with the final models
    let lcfg = LangevinConfig::new(
        cfg.langevin_steps,
        cfg.langevin_step_size,
        derive_seed(cfg.seed, 0x15, 0),
    );
    let mut recovered = Vec::with_capacity(occluded.examples.len());
    let chunk = cfg.batch_size.max(1);
    let mut i = 0;
    while i < occluded.len() {
        let idx: Vec<usize> = (i..(i + chunk).min(occluded.len())).collect();
        let x = occluded.gather(&idx);
        let batch_masks: Vec<Mask> = idx.iter().map(|&j| masks[j].clone()).collect();
        let (z, _) = sample_posterior(&prior, &gen, &x, &lcfg, Some(&batch_masks))?;
        recovered.extend(gen.decode_values(&z)?);
        i += chunk;
    }
    Ok((prior, gen, recovered, runlog))
}

// ── variational baseline ───────────────────────────────────────────────

/// Single-sample reparameterized ELBO over a batch, with the posterior
/// draw still attached to the graph. Returns (mean ELBO tensor,
/// per-example ELBO values, latent draw values).
fn elbo_graph(
    prior: &FlowModel,
    gen: &Generator,
    post: &PosteriorNet,
    x_t: &Tensor,
    eps_values: Vec<f64>,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let n = x_t.shape()[0];
    let d = post.latent_dim;
    let eps = Tensor::from_values(&[n, d], eps_values.clone())?;
    let s = post.reparam_sample(x_t, &eps)?;
    let ll = gen.log_likelihood(x_t, &s.z)?;
    let lp = prior.log_prob(&s.z)?;
    // log q0(z0|x) at the sample: -(1/2) sum(ln 2pi + logvar + eps^2)
    let eps_sq: Vec<f64> = (0..n)
        .map(|i| eps_values[i * d..(i + 1) * d].iter().map(|e| e * e).sum())
        .collect();
    let logq0 = s
        .logvar
        .sum_rows()?
        .add(&Tensor::from_values(&[n], eps_sq)?)?
        .scale(-0.5)?
        .add_scalar(-0.5 * d as f64 * std::f64::consts::TAU.ln())?;
    let per_example = ll.add(&lp)?.sub(&logq0)?.sub(&s.flow_logdet)?;
    let values = per_example.values();
    let mean = per_example.sum()?.scale(1.0 / n as f64)?;
    Ok((mean, values, s.z.values()))
}

/// Monte Carlo ELBO estimate over a dataset: mean over `samples`
/// independent posterior draws, with the standard error of that mean.
pub fn elbo_estimate(
    prior: &FlowModel,
    gen: &Generator,
    post: &PosteriorNet,
    x: &[f64],
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let n = x.len() / gen.data_dim;
    let x_t = Tensor::from_values(&[n, gen.data_dim], x.to_vec())?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut per_sample = Vec::with_capacity(samples);
    for _ in 0..samples {
        let eps = normal_matrix(n, post.latent_dim, &mut rng);
        let (_, values, _) = elbo_graph(prior, gen, post, &x_t, eps)?;
        per_sample.push(values.iter().sum::<f64>() / n as f64);
    }
    let mean = per_sample.iter().sum::<f64>() / samples as f64;
    let var = per_sample.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (samples as f64 - 1.0);
    Ok((mean, (var / samples as f64).sqrt()))
}

/// Variational training of the same model family: the prior and inference
/// networks take `inner_update_steps` ascent steps per iteration, then the
/// generator takes one.
pub fn train_vae(data: &Dataset, cfg: &TrainConfig) -> Result<(FlowModel, Generator, PosteriorNet, RunLog)> {
    cfg.validate(data)?;
    let extras = cfg
        .vae
        .as_ref()
        .ok_or_else(|| Error::contract("vae mode requires vae extras"))?;
    if extras.inner_update_steps == 0 {
        return Err(Error::contract("inner_update_steps must be positive"));
    }

    let prior = build_prior(cfg)?;
    let gen = build_generator(cfg, data.dim)?;
    let post = PosteriorNet::new(
        data.dim,
        cfg.latent_dim,
        &extras.encoder_hidden,
        extras.posterior_depth,
        extras.posterior_width,
        derive_seed(cfg.seed, 0x16, 0),
    )?;

    let mut adam_p = Adam::new(&prior.params(), cfg.lr_prior, cfg.decay);
    let mut adam_g = Adam::new(&gen.params(), cfg.lr_generator, cfg.decay);
    let mut adam_q = Adam::new(&post.params(), extras.lr_inference, cfg.decay);

    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, 0x12, 0));
    let n_data = data.len();
    let mut order: Vec<usize> = (0..n_data).collect();
    order.shuffle(&mut shuffle_rng);
    let mut pos = 0usize;
    let mut epochs_done = 0usize;

    let mut runlog = RunLog::default();
    let started = Instant::now();
    let mut eps_rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, 0x17, 0));

    for t in 1..=cfg.iterations {
        if pos >= n_data {
            adam_p.end_epoch();
            adam_g.end_epoch();
            adam_q.end_epoch();
            epochs_done += 1;
            if epochs_done % 10 == 0 {
                if let Some(sink) = &cfg.checkpoint {
                    write_sink(sink, "checkpoint.lfbm", &prior, &gen, Some(&post));
                }
            }
            order.shuffle(&mut shuffle_rng);
            pos = 0;
        }
        let end = (pos + cfg.batch_size).min(n_data);
        let batch_idx = &order[pos..end];
        pos = end;
        let x = data.gather(batch_idx);
        let n = batch_idx.len();
        let x_t = Tensor::from_values(&[n, data.dim], x.clone())?;

        // prior + inference updates
        for _ in 0..extras.inner_update_steps {
            let eps = normal_matrix(n, cfg.latent_dim, &mut eps_rng);
            let (f_mean, _, _) = elbo_graph(&prior, &gen, &post, &x_t, eps)?;
            prior.params().zero_grad();
            gen.params().zero_grad();
            post.params().zero_grad();
            backward(&f_mean.neg()?)?;
            if !cfg.freeze_prior {
                adam_p.step(&prior.params())?;
            }
            adam_q.step(&post.params())?;
        }

        // generator update on a fresh draw
        let eps = normal_matrix(n, cfg.latent_dim, &mut eps_rng);
        let (f_mean, f_values, z_values) = elbo_graph(&prior, &gen, &post, &x_t, eps)?;
        prior.params().zero_grad();
        gen.params().zero_grad();
        post.params().zero_grad();
        backward(&f_mean.neg()?)?;
        adam_g.step(&gen.params())?;
        prior.params().zero_grad();
        post.params().zero_grad();

        if t == 1 || t == cfg.iterations || t % cfg.log_every == 0 {
            let diag = diagnostics_step(&prior, &gen, &x, &z_values, derive_seed(cfg.seed, 0x14, t as u64))?;
            let decoded = gen.decode_values(&z_values)?;
            runlog.records.push(RunRecord {
                iteration: t,
                recon_mse: mse(&decoded, &x, None)?,
                mean_prior_logp: diag.mean_prior_logp,
                residual_prior: diag.residual_prior,
                residual_generator: diag.residual_generator,
                mmd_latent: diag.mmd_latent,
                masked_mse: None,
                elbo: Some(f_values.iter().sum::<f64>() / n as f64),
                elapsed_s: started.elapsed().as_secs_f64(),
            });
        }
    }
    Ok((prior, gen, post, runlog))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticFamily};

    fn mixture(n: usize, seed: u64) -> Dataset {
        gen_synthetic(
            &SyntheticFamily::GaussianMixture {
                means: vec![vec![-0.6, -0.6], vec![0.6, 0.6]],
                cov: 0.01,
            },
            n,
            seed,
        )
        .unwrap()
    }

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::small(TrainMode::Mcmc, 2, 2);
        cfg.iterations = 12;
        cfg.batch_size = 16;
        cfg.langevin_steps = 5;
        cfg.flow_depth = 2;
        cfg.coupling_width = 8;
        cfg.decoder_hidden = vec![8];
        cfg.log_every = 6;
        cfg
    }

    #[test]
    fn zero_learning_rate_is_a_fixpoint() {
        let data = mixture(64, 1);
        let mut cfg = tiny_cfg();
        cfg.lr_prior = 0.0;
        cfg.lr_generator = 0.0;
        // capture the would-be initial parameters
        let prior0 = build_prior(&cfg).unwrap();
        let gen0 = build_generator(&cfg, 2).unwrap();
        let (prior, gen, _) = train_mcmc(&data, &cfg).unwrap();
        for (g0, g1) in [(prior0.params(), prior.params()), (gen0.params(), gen.params())] {
            for ((_, a), (_, b)) in g0.iter().zip(g1.iter()) {
                let va = a.values();
                let vb = b.values();
                for (x, y) in va.iter().zip(&vb) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn seed_determinism_bit_identical() {
        let data = mixture(64, 2);
        let cfg = tiny_cfg();
        let (p1, g1, log1) = train_mcmc(&data, &cfg).unwrap();
        let (p2, g2, log2) = train_mcmc(&data, &cfg).unwrap();
        for (ga, gb) in [(p1.params(), p2.params()), (g1.params(), g2.params())] {
            for ((_, a), (_, b)) in ga.iter().zip(gb.iter()) {
                assert_eq!(a.values(), b.values());
            }
        }
        // logs identical apart from wall-clock
        assert_eq!(log1.records.len(), log2.records.len());
        for (a, b) in log1.records.iter().zip(&log2.records) {
            assert_eq!(a.iteration, b.iteration);
            assert_eq!(a.recon_mse.to_bits(), b.recon_mse.to_bits());
            assert_eq!(a.mmd_latent.to_bits(), b.mmd_latent.to_bits());
        }
    }

    #[test]
    fn update_prior_matches_fd_and_pushes_scale_up() {
        // identity-initialized flow fed variance-4 latents: the ActNorm
        // log-scale gradient of the first step must be positive (ascent
        // direction increases scale)
        let prior = FlowModel::identity(2, 2).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let z: Vec<f64> = normal_matrix(256, 2, &mut rng).iter().map(|v| 2.0 * v).collect();

        let params = prior.params();
        params.zero_grad();
        let z_t = Tensor::from_values(&[256, 2], z.clone()).unwrap();
        let obj = prior.log_prob(&z_t).unwrap().sum().unwrap().scale(1.0 / 256.0).unwrap();
        backward(&obj).unwrap();
        let g = params.get("step0.actnorm.log_scale").unwrap().grad().unwrap();
        assert!(g[0] > 0.0 && g[1] > 0.0, "log-scale gradient {g:?}");

        // gradient of the mean objective matches finite differences
        let auto = params.flat_grad();
        let fd: Vec<f64> = crate::optim::finite_diff_grad(
            |_| {
                let z_t = Tensor::from_values(&[256, 2], z.clone())?;
                Ok(prior.log_prob(&z_t)?.sum()?.value_at(0) / 256.0)
            },
            &params,
            1e-5,
        )
        .unwrap()
        .concat();
        assert!(crate::optim::max_rel_err(&auto, &fd) < 1e-4);
    }

    #[test]
    fn update_prior_residual_small_when_z_from_prior() {
        // z drawn from the prior itself: expected gradient is zero, so the
        // residual stays within Monte Carlo noise
        let prior = FlowModel::random(2, 2, 8, 9, 0.3).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let n = 4000;
        let z = prior.sample_values(n, &mut rng).unwrap();

        // per-example gradient spread estimated by splitting the batch
        let params = prior.params();
        let halves: Vec<Vec<f64>> = (0..2)
            .map(|h| {
                params.zero_grad();
                let part = &z[h * n / 2 * 2..(h + 1) * n / 2 * 2];
                let z_t = Tensor::from_values(&[n / 2, 2], part.to_vec()).unwrap();
                let obj = prior.log_prob(&z_t).unwrap().sum().unwrap().scale(2.0 / n as f64).unwrap();
                backward(&obj).unwrap();
                params.flat_grad()
            })
            .collect();
        params.zero_grad();
        let z_t = Tensor::from_values(&[n, 2], z.clone()).unwrap();
        let obj = prior.log_prob(&z_t).unwrap().sum().unwrap().scale(1.0 / n as f64).unwrap();
        backward(&obj).unwrap();
        let full = params.flat_grad();
        params.zero_grad();

        // crude scale of the Monte Carlo error from the half-batch spread
        let spread = l2(&halves[0].iter().zip(&halves[1]).map(|(a, b)| a - b).collect::<Vec<f64>>());
        assert!(
            l2(&full) < 3.0 * spread.max(1e-3),
            "residual {} vs spread {}",
            l2(&full),
            spread
        );
    }

    #[test]
    fn update_generator_fixpoint_and_descent() {
        let gen = Generator::new(2, 3, &[8], OutputActivation::Tanh, 1.0, 12).unwrap();
        let z = vec![0.4, -0.2, -0.9, 0.6];
        let x = gen.decode_values(&z).unwrap();
        let before = gen.params().iter().map(|(_, t)| t.values()).collect::<Vec<_>>();
        let mut adam = Adam::new(&gen.params(), 0.001, 1.0);
        update_generator(&gen, &x, &z, None, &mut adam).unwrap();
        for ((_, t), old) in gen.params().iter().zip(&before) {
            for (a, b) in t.values().iter().zip(old) {
                assert!((a - b).abs() < 1e-8, "zero-residual update moved a parameter");
            }
        }

        // one step on a mismatched pair moves the decode toward x
        let gen2 = Generator::new(2, 3, &[], OutputActivation::Linear, 1.0, 13).unwrap();
        let z2 = vec![0.5, -0.3];
        let x2 = vec![0.8, -0.4, 0.2];
        let r0 = {
            let d = gen2.decode_values(&z2).unwrap();
            l2(&d.iter().zip(&x2).map(|(a, b)| a - b).collect::<Vec<f64>>())
        };
        let mut adam2 = Adam::new(&gen2.params(), 0.01, 1.0);
        update_generator(&gen2, &x2, &z2, None, &mut adam2).unwrap();
        let r1 = {
            let d = gen2.decode_values(&z2).unwrap();
            l2(&d.iter().zip(&x2).map(|(a, b)| a - b).collect::<Vec<f64>>())
        };
        assert!(r1 < r0, "residual did not shrink: {r0} -> {r1}");
    }

    #[test]
    fn latents_are_detached_from_parameter_gradients() {
        // perturbing the generator must not change the prior gradient at
        // fixed inferred latents
        let data = mixture(32, 5);
        let cfg = tiny_cfg();
        let prior = build_prior(&cfg).unwrap();
        let gen = build_generator(&cfg, 2).unwrap();
        let x = data.gather(&(0..16).collect::<Vec<_>>());
        let lcfg = LangevinConfig::new(5, 0.1, 7);
        let (z, _) = sample_posterior(&prior, &gen, &x, &lcfg, None).unwrap();

        let grad_of_prior = |prior: &FlowModel| {
            let params = prior.params();
            params.zero_grad();
            let z_t = Tensor::from_values(&[16, 2], z.clone()).unwrap();
            let obj = prior.log_prob(&z_t).unwrap().sum().unwrap();
            backward(&obj).unwrap();
            let g = params.flat_grad();
            params.zero_grad();
            g
        };
        let g1 = grad_of_prior(&prior);
        // scramble the generator
        for (_, t) in gen.params().iter() {
            let v: Vec<f64> = t.values().iter().map(|x| x + 0.5).collect();
            t.set_values(&v).unwrap();
        }
        let g2 = grad_of_prior(&prior);
        assert_eq!(g1, g2);
    }

    #[test]
    fn recovery_with_full_masks_is_bit_identical_to_mcmc() {
        let data = mixture(48, 6);
        let cfg = tiny_cfg();
        let (p1, g1, _) = train_mcmc(&data, &cfg).unwrap();
        let masks: Vec<Mask> = (0..data.len()).map(|_| Mask::all_visible(2)).collect();
        let (p2, g2, _, _) = train_recovery(&data, &masks, Some(&data), &cfg).unwrap();
        for (ga, gb) in [(p1.params(), p2.params()), (g1.params(), g2.params())] {
            for ((_, a), (_, b)) in ga.iter().zip(gb.iter()) {
                let va = a.values();
                let vb = b.values();
                for (x, y) in va.iter().zip(&vb) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
    }

    #[test]
    fn fully_occluded_example_is_a_data_error() {
        let data = mixture(8, 7);
        let cfg = tiny_cfg();
        let mut masks: Vec<Mask> = (0..8).map(|_| Mask::all_visible(2)).collect();
        masks[3] = Mask::new(vec![0.0, 0.0]).unwrap();
        let err = match train_recovery(&data, &masks, None, &cfg) {
            Err(e) => e,
            Ok(_) => panic!("fully occluded example accepted"),
        };
        assert!(matches!(err, Error::Data(_)));
        assert!(err.to_string().contains('3'), "{err}");
    }

    #[test]
    fn vae_zero_learning_rates_fixpoint() {
        let data = mixture(32, 8);
        let mut cfg = tiny_cfg();
        cfg.mode = TrainMode::Vae;
        cfg.lr_prior = 0.0;
        cfg.lr_generator = 0.0;
        cfg.iterations = 4;
        cfg.vae = Some(VaeExtras {
            lr_inference: 0.0,
            inner_update_steps: 2,
            posterior_depth: 2,
            posterior_width: 8,
            encoder_hidden: vec![8],
        });
        let prior0 = build_prior(&cfg).unwrap();
        let gen0 = build_generator(&cfg, 2).unwrap();
        let post0 = PosteriorNet::new(2, 2, &[8], 2, 8, derive_seed(cfg.seed, 0x16, 0)).unwrap();
        let (prior, gen, post, _) = train_vae(&data, &cfg).unwrap();
        for (ga, gb) in [
            (prior0.params(), prior.params()),
            (gen0.params(), gen.params()),
            (post0.params(), post.params()),
        ] {
            for ((_, a), (_, b)) in ga.iter().zip(gb.iter()) {
                assert_eq!(a.values(), b.values());
            }
        }
    }

    #[test]
    fn diagnostics_identical_sets_zero_mmd() {
        let prior = FlowModel::identity(2, 1).unwrap();
        let gen = Generator::new(2, 2, &[4], OutputActivation::Tanh, 1.0, 1).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(123);
        // make the inferred latents exactly the prior draw the diagnostics use
        let z = prior.sample_values(32, &mut rng).unwrap();
        let x = gen.decode_values(&z).unwrap();
        let d = diagnostics_step(&prior, &gen, &x, &z, 123).unwrap();
        assert_eq!(d.mmd_latent, 0.0);
        assert!(d.residual_generator < 1e-9, "zero-residual generator gradient");
    }

    #[test]
    fn diagnostics_prior_samples_pass_null_test() {
        let prior = FlowModel::random(2, 2, 8, 30, 0.3).unwrap();
        let gen = Generator::new(2, 2, &[4], OutputActivation::Tanh, 1.0, 2).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let z = prior.sample_values(128, &mut rng).unwrap();
        let x = gen.decode_values(&z).unwrap();
        let d = diagnostics_step(&prior, &gen, &x, &z, 77).unwrap();

        // permutation null for the MMD between two prior batches
        let mut pooled = prior.sample_values(256, &mut rng).unwrap();
        let mut null = Vec::new();
        for _ in 0..60 {
            let mut rows: Vec<Vec<f64>> = pooled.chunks(2).map(|c| c.to_vec()).collect();
            rows.shuffle(&mut rng);
            pooled = rows.concat();
            null.push(mmd(&pooled[..256], &pooled[256..], 2).unwrap());
        }
        null.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let p95 = null[(null.len() as f64 * 0.95) as usize];
        assert!(d.mmd_latent < p95.max(1e-4) * 3.0, "mmd {} vs null 95th {}", d.mmd_latent, p95);
    }
}
