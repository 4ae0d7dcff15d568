//! Normalizing flows over the d-dimensional latent space.
//!
//! [`FlowModel`] is the trainable prior: a stack of steps, each ActNorm ->
//! fixed reverse permutation -> affine coupling, over a standard-normal
//! base. Forward runs in the sampling direction (base to latent); density
//! evaluation runs exactly one inverse pass and accumulates the
//! change-of-variables log-determinants.
//!
//! [`ArPosteriorFlow`] is the autoregressive affine flow used by the
//! variational baseline's posterior: dimension i is transformed by an
//! affine map conditioned on dimensions < i, so the Jacobian is triangular
//! by construction.

use std::cell::Cell;
use std::f64::consts::TAU;
use std::rc::Rc;

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::nn::{derive_seed, normal_matrix, Activation, Mlp, OutputActivation};
use crate::optim::ParamGroup;
use crate::tensor::{backward, Tensor};

/// Bound on emitted coupling log-scales; keeps |det J| away from zero and
/// the Langevin drift finite.
pub const SCALE_CLAMP: f64 = 2.0;

/// Per-dimension affine normalization with data-dependent initialization.
/// The first batch that passes through (in either direction) initializes
/// the parameters so that batch leaves the layer with zero mean and unit
/// variance per dimension; afterwards the layer is a fixed exact bijection.
pub struct ActNorm {
    pub log_scale: Tensor,
    pub bias: Tensor,
    initialized: Cell<bool>,
}

impl ActNorm {
    pub fn new(d: usize) -> ActNorm {
        ActNorm {
            log_scale: Tensor::param_zeros(&[d]),
            bias: Tensor::param_zeros(&[d]),
            initialized: Cell::new(false),
        }
    }

    pub fn identity(d: usize) -> ActNorm {
        let a = ActNorm::new(d);
        a.initialized.set(true);
        a
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized.get()
    }

    pub fn set_params(&self, log_scale: &[f64], bias: &[f64]) -> Result<()> {
        self.log_scale.set_values(log_scale)?;
        self.bias.set_values(bias)?;
        self.initialized.set(true);
        Ok(())
    }

    fn batch_stats(values: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
        let n = values.len() / d;
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                mean[j] += values[i * d + j];
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let mut std = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                let r = values[i * d + j] - mean[j];
                std[j] += r * r;
            }
        }
        for s in std.iter_mut() {
            *s = (*s / n as f64).sqrt();
            if !s.is_finite() || *s < 1e-7 {
                *s = 1.0;
            }
        }
        (mean, std)
    }

    /// y = x * exp(log_scale) + bias; log-det contribution sum(log_scale).
    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let d = x.shape()[1];
        let n = x.shape()[0];
        if !self.initialized.get() {
            // normalize this batch's output: exp(s) = 1/std, b = -mean/std
            let (mean, std) = x.with_values(|v| Self::batch_stats(v, d));
            let s: Vec<f64> = std.iter().map(|v| -v.ln()).collect();
            let b: Vec<f64> = mean.iter().zip(&std).map(|(m, v)| -m / v).collect();
            self.set_params(&s, &b)?;
        }
        let y = x.broadcast_mul(&self.log_scale.exp()?)?.broadcast_add(&self.bias)?;
        let logdet = self.log_scale.sum()?.repeat_n(n)?;
        Ok((y, logdet))
    }

    /// x = (y - bias) * exp(-log_scale); log-det contribution -sum(log_scale).
    pub fn inverse(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        let d = y.shape()[1];
        let n = y.shape()[0];
        if !self.initialized.get() {
            // normalize this batch's inverse output: b = mean, s = ln std
            let (mean, std) = y.with_values(|v| Self::batch_stats(v, d));
            let s: Vec<f64> = std.iter().map(|v| v.ln()).collect();
            self.set_params(&s, &mean)?;
        }
        let x = y
            .broadcast_add(&self.bias.neg()?)?
            .broadcast_mul(&self.log_scale.neg()?.exp()?)?;
        let logdet = self.log_scale.sum()?.neg()?.repeat_n(n)?;
        Ok((x, logdet))
    }

    pub fn collect_params(&self, group: &mut ParamGroup, prefix: &str) {
        group.insert(format!("{prefix}.log_scale"), self.log_scale.clone());
        group.insert(format!("{prefix}.bias"), self.bias.clone());
    }
}

/// Affine coupling over a fixed even/odd split: the even-indexed half
/// passes through and drives scale/shift nets for the odd-indexed half.
pub struct CouplingLayer {
    idx_a: Rc<Vec<usize>>,
    idx_b: Rc<Vec<usize>>,
    s_net: Option<Mlp>,
    t_net: Option<Mlp>,
    pub clamp: f64,
}

impl CouplingLayer {
    pub fn new(d: usize, width: usize, zero_final: bool, rng: &mut ChaCha12Rng) -> CouplingLayer {
        let idx_a: Vec<usize> = (0..d).step_by(2).collect();
        let idx_b: Vec<usize> = (1..d).step_by(2).collect();
        let (s_net, t_net) = if idx_b.is_empty() {
            (None, None)
        } else {
            let hidden = [width, width];
            (
                Some(Mlp::new(idx_a.len(), &hidden, idx_b.len(), Activation::Tanh, OutputActivation::Linear, zero_final, rng)),
                Some(Mlp::new(idx_a.len(), &hidden, idx_b.len(), Activation::Tanh, OutputActivation::Linear, zero_final, rng)),
            )
        };
        CouplingLayer {
            idx_a: Rc::new(idx_a),
            idx_b: Rc::new(idx_b),
            s_net,
            t_net,
            clamp: SCALE_CLAMP,
        }
    }

    /// Bounded log-scales and shifts for the pass-through half.
    fn emit(&self, za: &Tensor) -> Result<(Tensor, Tensor)> {
        let s_raw = self.s_net.as_ref().unwrap().forward(za)?;
        let s = s_raw.scale(1.0 / self.clamp)?.tanh()?.scale(self.clamp)?;
        let t = self.t_net.as_ref().unwrap().forward(za)?;
        Ok((s, t))
    }

    pub fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let n = x.shape()[0];
        let d = x.shape()[1];
        if self.s_net.is_none() {
            return Ok((x.clone(), Tensor::zeros(&[n])));
        }
        let za = x.select_cols(&self.idx_a)?;
        let zb = x.select_cols(&self.idx_b)?;
        let (s, t) = self.emit(&za)?;
        let zb2 = zb.mul(&s.exp()?)?.add(&t)?;
        let y = Tensor::assemble_cols(&[(za, self.idx_a.clone()), (zb2, self.idx_b.clone())], d)?;
        let logdet = s.sum_rows()?;
        Ok((y, logdet))
    }

    pub fn inverse(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        let n = y.shape()[0];
        let d = y.shape()[1];
        if self.s_net.is_none() {
            return Ok((y.clone(), Tensor::zeros(&[n])));
        }
        let za = y.select_cols(&self.idx_a)?;
        let zb2 = y.select_cols(&self.idx_b)?;
        let (s, t) = self.emit(&za)?;
        let zb = zb2.sub(&t)?.mul(&s.neg()?.exp()?)?;
        let x = Tensor::assemble_cols(&[(za, self.idx_a.clone()), (zb, self.idx_b.clone())], d)?;
        let logdet = s.sum_rows()?.neg()?;
        Ok((x, logdet))
    }

    pub fn zero_all(&self) {
        if let (Some(s), Some(t)) = (&self.s_net, &self.t_net) {
            s.zero_all();
            t.zero_all();
        }
    }

    pub fn randomize(&self, scale: f64, rng: &mut ChaCha12Rng) {
        if let (Some(s), Some(t)) = (&self.s_net, &self.t_net) {
            s.randomize(scale, rng);
            t.randomize(scale, rng);
        }
    }

    pub fn collect_params(&self, group: &mut ParamGroup, prefix: &str) {
        if let (Some(s), Some(t)) = (&self.s_net, &self.t_net) {
            s.collect_params(group, &format!("{prefix}.s_net"));
            t.collect_params(group, &format!("{prefix}.t_net"));
        }
    }

    #[cfg(test)]
    fn emitted_scales(&self, za_values: &[f64], n: usize) -> Vec<f64> {
        let za = Tensor::from_values(&[n, self.idx_a.len()], za_values.to_vec()).unwrap();
        self.emit(&za).unwrap().0.values()
    }
}

/// ActNorm -> fixed reverse permutation -> affine coupling.
pub struct FlowStep {
    pub actnorm: ActNorm,
    perm: Rc<Vec<usize>>,
    perm_inv: Rc<Vec<usize>>,
    pub coupling: CouplingLayer,
}

impl FlowStep {
    fn new(d: usize, width: usize, zero_final: bool, rng: &mut ChaCha12Rng) -> FlowStep {
        let perm: Vec<usize> = (0..d).rev().collect();
        let mut perm_inv = vec![0usize; d];
        for (j, &p) in perm.iter().enumerate() {
            perm_inv[p] = j;
        }
        FlowStep {
            actnorm: ActNorm::new(d),
            perm: Rc::new(perm),
            perm_inv: Rc::new(perm_inv),
            coupling: CouplingLayer::new(d, width, zero_final, rng),
        }
    }

    fn forward(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (h, ld_a) = self.actnorm.forward(x)?;
        let h = h.select_cols(&self.perm)?;
        let (y, ld_c) = self.coupling.forward(&h)?;
        Ok((y, ld_a.add(&ld_c)?))
    }

    fn inverse(&self, y: &Tensor) -> Result<(Tensor, Tensor)> {
        let (h, ld_c) = self.coupling.inverse(y)?;
        let h = h.select_cols(&self.perm_inv)?;
        let (x, ld_a) = self.actnorm.inverse(&h)?;
        Ok((x, ld_c.add(&ld_a)?))
    }
}

/// The latent-space prior: L flow steps over a N(0, I_d) base.
pub struct FlowModel {
    pub dim: usize,
    pub steps: Vec<FlowStep>,
}

impl FlowModel {
    /// Trainable model: random conditioner hidden layers, zeroed final
    /// layers (identity transform at init), uninitialized ActNorm.
    pub fn new(d: usize, depth: usize, width: usize, seed: u64) -> Result<FlowModel> {
        if d < 1 || depth < 1 {
            return Err(Error::contract(format!("flow needs d >= 1 and depth >= 1, got d={d}, L={depth}")));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 0xF10,  0));
        let steps = (0..depth).map(|_| FlowStep::new(d, width, true, &mut rng)).collect();
        Ok(FlowModel { dim: d, steps })
    }

    /// Exact identity-up-to-permutation model: zero couplings, identity
    /// ActNorm (marked initialized). Used for the frozen-Gaussian-prior
    /// ablation and as a fixture in tests.
    pub fn identity(d: usize, depth: usize) -> Result<FlowModel> {
        let model = FlowModel::new(d, depth, 4, 0)?;
        for step in &model.steps {
            step.coupling.zero_all();
            step.actnorm.set_params(&vec![0.0; d], &vec![0.0; d])?;
        }
        Ok(model)
    }

    /// Fully random model (all conditioner layers drawn, ActNorm drawn and
    /// marked initialized); for gradient and Jacobian cross-checks.
    pub fn random(d: usize, depth: usize, width: usize, seed: u64, scale: f64) -> Result<FlowModel> {
        let model = FlowModel::new(d, depth, width, seed)?;
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 0xF11, 0));
        for step in &model.steps {
            step.coupling.randomize(scale, &mut rng);
            let s: Vec<f64> = (0..d).map(|_| scale * (rng.random::<f64>() - 0.5)).collect();
            let b: Vec<f64> = (0..d).map(|_| scale * (rng.random::<f64>() - 0.5)).collect();
            step.actnorm.set_params(&s, &b)?;
        }
        Ok(model)
    }

    pub fn depth(&self) -> usize {
        self.steps.len()
    }

    fn check_dim(&self, t: &Tensor) -> Result<()> {
        let s = t.shape();
        if s.len() != 2 || s[1] != self.dim {
            return Err(Error::contract(format!(
                "flow expects [n, {}] input, got shape {s:?}",
                self.dim
            )));
        }
        Ok(())
    }

    /// Sampling direction: z = f(z0) with the forward log-determinant.
    pub fn forward(&self, z0: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_dim(z0)?;
        let n = z0.shape()[0];
        let mut h = z0.clone();
        let mut logdet = Tensor::zeros(&[n]);
        for step in &self.steps {
            let (next, ld) = step.forward(&h)?;
            h = next;
            logdet = logdet.add(&ld)?;
        }
        Ok((h, logdet))
    }

    /// Normalizing direction: z0 = f^{-1}(z) with the inverse
    /// log-determinant (the negative of the forward one).
    pub fn inverse(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_dim(z)?;
        let n = z.shape()[0];
        let mut h = z.clone();
        let mut logdet = Tensor::zeros(&[n]);
        for step in self.steps.iter().rev() {
            let (prev, ld) = step.inverse(&h)?;
            h = prev;
            logdet = logdet.add(&ld)?;
        }
        Ok((h, logdet))
    }

    /// Per-example log-density under the flow: one inverse pass plus the
    /// accumulated log-determinants over the standard-normal base.
    pub fn log_prob(&self, z: &Tensor) -> Result<Tensor> {
        let (z0, logdet_inv) = self.inverse(z)?;
        let base = z0
            .square()?
            .sum_rows()?
            .scale(-0.5)?
            .add_scalar(-0.5 * self.dim as f64 * TAU.ln())?;
        base.add(&logdet_inv)
    }

    /// Ancestral sampling; returns a flat [n, d] value buffer.
    pub fn sample_values(&self, n: usize, rng: &mut ChaCha12Rng) -> Result<Vec<f64>> {
        let z0 = Tensor::from_values(&[n, self.dim], normal_matrix(n, self.dim, rng))?;
        let (z, _) = self.forward(&z0)?;
        Ok(z.values())
    }

    /// Gradient of the summed log-density with respect to the input batch;
    /// parameters are left untouched apart from transient grad buffers.
    pub fn grad_log_prob_z(&self, z_values: &[f64]) -> Result<Vec<f64>> {
        let n = z_values.len() / self.dim;
        let z = Tensor::param(&[n, self.dim], z_values.to_vec())?;
        let lp = self.log_prob(&z)?;
        backward(&lp.sum()?)?;
        Ok(z.grad_or_zeros())
    }

    pub fn params(&self) -> ParamGroup {
        let mut group = ParamGroup::new();
        for (l, step) in self.steps.iter().enumerate() {
            step.actnorm.collect_params(&mut group, &format!("step{l}.actnorm"));
            step.coupling.collect_params(&mut group, &format!("step{l}.coupling"));
        }
        group
    }

    pub fn actnorm_initialized(&self) -> bool {
        self.steps.iter().all(|s| s.actnorm.is_initialized())
    }

    pub fn mark_actnorm_initialized(&self) {
        for step in &self.steps {
            let d = self.dim;
            if !step.actnorm.is_initialized() {
                step.actnorm.set_params(&vec![0.0; d], &vec![0.0; d]).expect("zeros");
            }
        }
    }
}

// ── autoregressive posterior flow ──────────────────────────────────────

enum ArCond {
    /// Dimension 0 has nothing to condition on; learnable (s, t) pair.
    Bias(Tensor),
    /// Dimension i conditions on coordinates < i through a small MLP
    /// emitting (s, t).
    Net(Mlp),
}

struct ArStep {
    conds: Vec<ArCond>,
}

/// Triangular autoregressive affine flow: z'_i = z_i * exp(s_i) + t_i with
/// (s_i, t_i) functions of z_{<i}. Applied in the sampling direction in a
/// single parallel pass; the Jacobian is triangular with diagonal exp(s).
pub struct ArPosteriorFlow {
    pub dim: usize,
    steps: Vec<ArStep>,
    pub clamp: f64,
    col_idx: Vec<Rc<Vec<usize>>>,
    prefix_idx: Vec<Rc<Vec<usize>>>,
}

impl ArPosteriorFlow {
    pub fn new(d: usize, depth: usize, width: usize, seed: u64) -> Result<ArPosteriorFlow> {
        if d < 1 || depth < 1 {
            return Err(Error::contract(format!(
                "posterior flow needs d >= 1 and depth >= 1, got d={d}, L'={depth}"
            )));
        }
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 0xA4, 0));
        let steps = (0..depth)
            .map(|_| ArStep {
                conds: (0..d)
                    .map(|i| {
                        if i == 0 {
                            ArCond::Bias(Tensor::param_zeros(&[1, 2]))
                        } else {
                            ArCond::Net(Mlp::new(i, &[width], 2, Activation::Tanh, OutputActivation::Linear, true, &mut rng))
                        }
                    })
                    .collect(),
            })
            .collect();
        Ok(ArPosteriorFlow {
            dim: d,
            steps,
            clamp: SCALE_CLAMP,
            col_idx: (0..d).map(|i| Rc::new(vec![i])).collect(),
            prefix_idx: (0..d).map(|i| Rc::new((0..i).collect())).collect(),
        })
    }

    pub fn apply(&self, z0: &Tensor) -> Result<(Tensor, Tensor)> {
        let s = z0.shape();
        if s.len() != 2 || s[1] != self.dim {
            return Err(Error::contract(format!(
                "posterior flow expects [n, {}] input, got {s:?}",
                self.dim
            )));
        }
        let n = s[0];
        let ones = Tensor::from_values(&[n, 1], vec![1.0; n])?;
        let sel0 = Rc::new(vec![0usize]);
        let sel1 = Rc::new(vec![1usize]);
        let mut h = z0.clone();
        let mut logdet = Tensor::zeros(&[n]);
        for step in &self.steps {
            let mut parts: Vec<(Tensor, Rc<Vec<usize>>)> = Vec::with_capacity(self.dim);
            let mut step_ld = Tensor::zeros(&[n]);
            for i in 0..self.dim {
                let out = match &step.conds[i] {
                    ArCond::Bias(st) => ones.matmul(st)?,
                    ArCond::Net(mlp) => mlp.forward(&h.select_cols(&self.prefix_idx[i])?)?,
                };
                let s_raw = out.select_cols(&sel0)?;
                let si = s_raw.scale(1.0 / self.clamp)?.tanh()?.scale(self.clamp)?;
                let ti = out.select_cols(&sel1)?;
                let zi = h.select_cols(&self.col_idx[i])?;
                let zi2 = zi.mul(&si.exp()?)?.add(&ti)?;
                parts.push((zi2, self.col_idx[i].clone()));
                step_ld = step_ld.add(&si.sum_rows()?)?;
            }
            h = Tensor::assemble_cols(&parts, self.dim)?;
            logdet = logdet.add(&step_ld)?;
        }
        Ok((h, logdet))
    }

    pub fn params(&self) -> ParamGroup {
        let mut group = ParamGroup::new();
        for (l, step) in self.steps.iter().enumerate() {
            for (i, cond) in step.conds.iter().enumerate() {
                match cond {
                    ArCond::Bias(st) => group.insert(format!("step{l}.dim{i}.st"), st.clone()),
                    ArCond::Net(mlp) => mlp.collect_params(&mut group, &format!("step{l}.dim{i}")),
                }
            }
        }
        group
    }

    pub fn randomize(&self, scale: f64, seed: u64) {
        let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 0xA5, 0));
        for step in &self.steps {
            for cond in &step.conds {
                match cond {
                    ArCond::Bias(st) => {
                        let vals: Vec<f64> = (0..2).map(|_| scale * (rng.random::<f64>() - 0.5)).collect();
                        st.set_values(&vals).expect("finite");
                    }
                    ArCond::Net(mlp) => mlp.randomize(scale, &mut rng),
                }
            }
        }
    }
}
