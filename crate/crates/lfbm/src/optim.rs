//! Parameter collections, the Adam optimizer, and a central
//! finite-difference gradient oracle used by the test suites.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Ordered, uniquely named collection of trainable tensors. Iteration
/// order is insertion order, which fixes optimizer and checkpoint layout.
#[derive(Clone, Default)]
pub struct ParamGroup {
    entries: Vec<(String, Tensor)>,
}

impl ParamGroup {
    pub fn new() -> ParamGroup {
        ParamGroup { entries: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        assert!(
            !self.entries.iter().any(|(n, _)| n == &name),
            "duplicate parameter name {name}"
        );
        self.entries.push((name, tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    /// Merge another group under a name prefix.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamGroup) {
        for (name, t) in other.iter() {
            self.insert(format!("{prefix}/{name}"), t.clone());
        }
    }

    /// Concatenated gradient of every parameter (zeros where absent).
    pub fn flat_grad(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for (_, t) in &self.entries {
            out.extend(t.grad_or_zeros());
        }
        out
    }
}

/// Adam with bias correction and a multiplicative per-epoch learning-rate
/// decay. Moment buffers mirror the parameter shapes they were built from.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamGroup, lr: f64, decay: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay,
            t: 0,
            m: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }

    /// One descent step. Every parameter must carry a gradient; gradients
    /// are zeroed after the update.
    pub fn step(&mut self, params: &ParamGroup) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::contract(format!(
                "adam state built for {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        for (_, t) in params.iter().map(|(n, t)| (n, t)) {
            if t.grad().is_none() {
                return Err(Error::contract("adam step with missing gradient"));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (idx, (_, tensor)) in params.iter().enumerate() {
            let grad = tensor.grad().unwrap();
            let mut values = tensor.values();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..values.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            tensor.set_values(&values)?;
            tensor.zero_grad();
        }
        Ok(())
    }

    /// Apply the per-epoch learning-rate decay.
    pub fn end_epoch(&mut self) {
        self.lr *= self.decay;
    }

    /// (t, lr, beta1, beta2, eps, decay) plus moment buffers, for
    /// checkpointing.
    pub fn scalars(&self) -> [f64; 6] {
        [self.t as f64, self.lr, self.beta1, self.beta2, self.eps, self.decay]
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, scalars: [f64; 6], m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) {
        self.t = scalars[0] as u64;
        self.lr = scalars[1];
        self.beta1 = scalars[2];
        self.beta2 = scalars[3];
        self.eps = scalars[4];
        self.decay = scalars[5];
        self.m = m;
        self.v = v;
    }
}

/// Central finite differences of a scalar function over every parameter
/// coordinate: (f(p + h e_i) - f(p - h e_i)) / 2h. The function is
/// evaluated with the parameters mutated in place and restored afterwards,
/// so closures may capture models that share these tensors.
pub fn finite_diff_grad<F>(mut f: F, params: &ParamGroup, h: f64) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(&ParamGroup) -> Result<f64>,
{
    if h <= 0.0 {
        return Err(Error::contract("finite_diff_grad: h must be positive"));
    }
    let mut grads = Vec::with_capacity(params.len());
    for (_, tensor) in params.iter() {
        let n = tensor.numel();
        let mut g = vec![0.0; n];
        for i in 0..n {
            tensor.nudge(i, h);
            let plus = f(params)?;
            tensor.nudge(i, -2.0 * h);
            let minus = f(params)?;
            tensor.nudge(i, h);
            g[i] = (plus - minus) / (2.0 * h);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Max relative error between two flat gradients, with an absolute floor
/// so near-zero coordinates compare absolutely.
pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::backward;

    #[test]
    fn zero_grad_leaves_params_unchanged() {
        let w = Tensor::param(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let mut group = ParamGroup::new();
        group.insert("w", w.clone());
        let mut adam = Adam::new(&group, 0.1, 1.0);
        // explicit zero gradient
        let loss = w.scale(0.0).unwrap().sum().unwrap();
        backward(&loss).unwrap();
        adam.step(&group).unwrap();
        assert_eq!(w.values(), vec![1.0, -2.0, 0.5]);
        assert_eq!(adam.t, 1);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // Bias-corrected first step with unit gradient moves by ~lr.
        let w = Tensor::param(&[1], vec![0.0]).unwrap();
        let mut group = ParamGroup::new();
        group.insert("w", w.clone());
        let mut adam = Adam::new(&group, 0.1, 1.0);
        let loss = w.sum().unwrap(); // d/dw = 1
        backward(&loss).unwrap();
        adam.step(&group).unwrap();
        let got = w.values()[0];
        assert!((got + 0.1).abs() < 1e-6, "expected ~-0.1, got {got}");
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let w = Tensor::param(&[1], vec![0.0]).unwrap();
        let mut group = ParamGroup::new();
        group.insert("w", w);
        let mut adam = Adam::new(&group, 0.1, 1.0);
        assert!(matches!(adam.step(&group), Err(Error::Contract(_))));
    }

    #[test]
    fn epoch_decay_multiplies_lr() {
        let group = ParamGroup::new();
        let mut adam = Adam::new(&group, 0.0004, 0.998);
        adam.end_epoch();
        adam.end_epoch();
        assert!((adam.lr - 0.0004 * 0.998 * 0.998).abs() < 1e-15);
    }

    #[test]
    fn finite_diff_simple_cases() {
        // f(w) = w^2 at w = 3 -> 6
        let w = Tensor::param(&[1], vec![3.0]).unwrap();
        let mut group = ParamGroup::new();
        group.insert("w", w);
        let g = finite_diff_grad(
            |p| {
                let w = p.get("w").unwrap();
                Ok(w.value_at(0) * w.value_at(0))
            },
            &group,
            1e-5,
        )
        .unwrap();
        assert!((g[0][0] - 6.0).abs() < 1e-6);

        // f(w) = sum(w) -> all ones
        let w2 = Tensor::param(&[4], vec![0.3, -1.0, 2.0, 7.0]).unwrap();
        let mut group2 = ParamGroup::new();
        group2.insert("w", w2);
        let g2 = finite_diff_grad(
            |p| Ok(p.get("w").unwrap().values().iter().sum()),
            &group2,
            1e-5,
        )
        .unwrap();
        for v in &g2[0] {
            assert!((v - 1.0).abs() < 1e-7);
        }
    }

    #[test]
    fn autodiff_matches_fd_on_tanh_mlp() {
        // Random 2-layer tanh MLP, d = 3: rel err < 1e-4 against central FD.
        use rand::prelude::*;
        use rand_chacha::ChaCha12Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let mut rand_vec = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random::<f64>() - 0.5).collect() };

        let w1 = Tensor::param(&[3, 5], rand_vec(15)).unwrap();
        let b1 = Tensor::param(&[5], rand_vec(5)).unwrap();
        let w2 = Tensor::param(&[5, 1], rand_vec(5)).unwrap();
        let b2 = Tensor::param(&[1], rand_vec(1)).unwrap();
        let x = Tensor::from_values(&[4, 3], rand_vec(12)).unwrap();

        let mut group = ParamGroup::new();
        group.insert("w1", w1.clone());
        group.insert("b1", b1.clone());
        group.insert("w2", w2.clone());
        group.insert("b2", b2.clone());

        let eval = |_: &ParamGroup| -> crate::error::Result<f64> {
            let h = x.matmul(&w1)?.broadcast_add(&b1)?.tanh()?;
            let y = h.matmul(&w2)?.broadcast_add(&b2)?.tanh()?;
            Ok(y.square()?.sum()?.value_at(0))
        };

        group.zero_grad();
        let h = x.matmul(&w1).unwrap().broadcast_add(&b1).unwrap().tanh().unwrap();
        let y = h.matmul(&w2).unwrap().broadcast_add(&b2).unwrap().tanh().unwrap();
        let loss = y.square().unwrap().sum().unwrap();
        backward(&loss).unwrap();
        let auto = group.flat_grad();

        let fd: Vec<f64> = finite_diff_grad(eval, &group, 1e-5).unwrap().concat();
        assert!(max_rel_err(&auto, &fd) < 1e-4);
    }
}
