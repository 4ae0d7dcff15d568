//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Tensors are flat row-major arrays that record the operation producing
//! them. [`backward`] replays the recorded graph in reverse topological
//! order and accumulates gradients into every tensor that requires them.
//! Gradients add up across backward calls until explicitly zeroed, so a
//! training step is: zero, build loss, backward, optimizer step.
//!
//! The primitive set is deliberately small: matrix multiply, elementwise
//! arithmetic, broadcasts of a d-vector over batch rows, tanh / leaky-ReLU /
//! exp / log / square, full and per-row sums, and column gather/scatter for
//! coupling-layer splits. Every completed operation checks its output for
//! NaN/Inf and fails loudly instead of propagating.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Shared handle to a node in a differentiation graph. Cloning is cheap
/// and aliases the same storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorData>>,
}

struct TensorData {
    id: u64,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Option<Op>,
}

enum Op {
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    MatMul(Tensor, Tensor),
    /// [n, d] + [d], row-wise.
    BroadcastAdd(Tensor, Tensor),
    /// [n, d] * [d], row-wise.
    BroadcastMul(Tensor, Tensor),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    Tanh(Tensor),
    LeakyRelu(Tensor, f64),
    Exp(Tensor),
    Ln(Tensor),
    Square(Tensor),
    Sum(Tensor),
    /// [n, d] -> [n], summing each row.
    SumRows(Tensor),
    /// [1] -> [n], replicating a scalar.
    RepeatN(Tensor),
    /// Gather columns of a [n, d] matrix.
    SelectCols(Tensor, Rc<Vec<usize>>),
    /// Scatter column blocks into a [n, dim] matrix; the index lists must
    /// partition 0..dim.
    AssembleCols(Vec<(Tensor, Rc<Vec<usize>>)>),
}

fn check_finite(values: &[f64], what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric(format!("non-finite value in {what}")));
    }
    Ok(())
}

impl Tensor {
    fn wrap(shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Option<Op>) -> Tensor {
        Tensor {
            inner: Rc::new(RefCell::new(TensorData {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                values,
                grad: None,
                requires_grad,
                op,
            })),
        }
    }

    /// A constant leaf (no gradient).
    pub fn from_values(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::contract(format!(
                "shape {:?} implies {} values, got {}",
                shape,
                shape.iter().product::<usize>(),
                values.len()
            )));
        }
        check_finite(&values, "tensor construction")?;
        Ok(Tensor::wrap(shape.to_vec(), values, false, None))
    }

    /// A trainable leaf: gradients accumulate here.
    pub fn param(shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::from_values(shape, values)?;
        t.inner.borrow_mut().requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::wrap(shape.to_vec(), vec![0.0; n], false, None)
    }

    pub fn param_zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::wrap(shape.to_vec(), vec![0.0; n], true, None)
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::wrap(vec![1], vec![v], false, None)
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn values(&self) -> Vec<f64> {
        self.inner.borrow().values.clone()
    }

    /// Borrow the values without cloning.
    pub fn with_values<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.borrow().values)
    }

    pub fn value_at(&self, i: usize) -> f64 {
        self.inner.borrow().values[i]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.borrow().op.is_none()
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    /// Accumulated gradient, or zeros when no backward pass reached this
    /// tensor yet.
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        let inner = self.inner.borrow();
        inner.grad.clone().unwrap_or_else(|| vec![0.0; inner.values.len()])
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Overwrite a leaf's values in place (used by optimizers and
    /// finite-difference probes).
    pub fn set_values(&self, values: &[f64]) -> Result<()> {
        check_finite(values, "set_values")?;
        let mut inner = self.inner.borrow_mut();
        if values.len() != inner.values.len() {
            return Err(Error::contract(format!(
                "set_values length {} != tensor length {}",
                values.len(),
                inner.values.len()
            )));
        }
        inner.values.copy_from_slice(values);
        Ok(())
    }

    /// Add `delta` to a single coordinate.
    pub fn nudge(&self, i: usize, delta: f64) {
        self.inner.borrow_mut().values[i] += delta;
    }

    /// A constant leaf sharing this tensor's current values.
    pub fn detach(&self) -> Tensor {
        Tensor::wrap(self.shape(), self.values(), false, None)
    }

    fn accumulate_grad(&self, g: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        match inner.grad.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => inner.grad = Some(g.to_vec()),
        }
    }

    fn op_inputs(&self) -> Vec<Tensor> {
        match &self.inner.borrow().op {
            None => vec![],
            Some(op) => match op {
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => {
                    vec![a.clone(), b.clone()]
                }
                Op::BroadcastAdd(a, b) | Op::BroadcastMul(a, b) => vec![a.clone(), b.clone()],
                Op::Scale(a, _)
                | Op::AddScalar(a)
                | Op::Tanh(a)
                | Op::LeakyRelu(a, _)
                | Op::Exp(a)
                | Op::Ln(a)
                | Op::Square(a)
                | Op::Sum(a)
                | Op::SumRows(a)
                | Op::RepeatN(a)
                | Op::SelectCols(a, _) => vec![a.clone()],
                Op::AssembleCols(parts) => parts.iter().map(|(t, _)| t.clone()).collect(),
            },
        }
    }

    fn result(shape: Vec<usize>, values: Vec<f64>, inputs: &[&Tensor], op: Op, what: &str) -> Result<Tensor> {
        check_finite(&values, what)?;
        let requires = inputs.iter().any(|t| t.requires_grad());
        // Constants do not need the graph edge; dropping it prunes backward.
        let op = if requires { Some(op) } else { None };
        Ok(Tensor::wrap(shape, values, requires, op))
    }

    fn dims2(&self) -> Result<(usize, usize)> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::contract(format!("expected 2-d tensor, got shape {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    // ── elementwise and matrix primitives ─────────────────────────────

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "add")?;
        let values = self.with_values(|a| other.with_values(|b| a.iter().zip(b).map(|(x, y)| x + y).collect()));
        Tensor::result(self.shape(), values, &[self, other], Op::Add(self.clone(), other.clone()), "add")
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "sub")?;
        let values = self.with_values(|a| other.with_values(|b| a.iter().zip(b).map(|(x, y)| x - y).collect()));
        Tensor::result(self.shape(), values, &[self, other], Op::Sub(self.clone(), other.clone()), "sub")
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.same_shape(other, "mul")?;
        let values = self.with_values(|a| other.with_values(|b| a.iter().zip(b).map(|(x, y)| x * y).collect()));
        Tensor::result(self.shape(), values, &[self, other], Op::Mul(self.clone(), other.clone()), "mul")
    }

    fn same_shape(&self, other: &Tensor, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::contract(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// [n, k] x [k, m] -> [n, m].
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (n, k) = self.dims2()?;
        let (k2, m) = other.dims2()?;
        if k != k2 {
            return Err(Error::contract(format!(
                "matmul: inner dims {k} vs {k2} (shapes {:?} x {:?})",
                self.shape(),
                other.shape()
            )));
        }
        let values = self.with_values(|a| other.with_values(|b| matmul_nn(a, b, n, k, m)));
        Tensor::result(
            vec![n, m],
            values,
            &[self, other],
            Op::MatMul(self.clone(), other.clone()),
            "matmul",
        )
    }

    /// Add a [d] vector to every row of a [n, d] matrix.
    pub fn broadcast_add(&self, v: &Tensor) -> Result<Tensor> {
        let (n, d) = self.dims2()?;
        if v.shape() != [d] {
            return Err(Error::contract(format!(
                "broadcast_add: vector shape {:?} does not match row width {d}",
                v.shape()
            )));
        }
        let values = self.with_values(|a| {
            v.with_values(|b| {
                let mut out = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..d {
                        out[i * d + j] = a[i * d + j] + b[j];
                    }
                }
                out
            })
        });
        Tensor::result(
            vec![n, d],
            values,
            &[self, v],
            Op::BroadcastAdd(self.clone(), v.clone()),
            "broadcast_add",
        )
    }

    /// Multiply every row of a [n, d] matrix by a [d] vector.
    pub fn broadcast_mul(&self, v: &Tensor) -> Result<Tensor> {
        let (n, d) = self.dims2()?;
        if v.shape() != [d] {
            return Err(Error::contract(format!(
                "broadcast_mul: vector shape {:?} does not match row width {d}",
                v.shape()
            )));
        }
        let values = self.with_values(|a| {
            v.with_values(|b| {
                let mut out = vec![0.0; n * d];
                for i in 0..n {
                    for j in 0..d {
                        out[i * d + j] = a[i * d + j] * b[j];
                    }
                }
                out
            })
        });
        Tensor::result(
            vec![n, d],
            values,
            &[self, v],
            Op::BroadcastMul(self.clone(), v.clone()),
            "broadcast_mul",
        )
    }

    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let values = self.with_values(|a| a.iter().map(|x| x * c).collect());
        Tensor::result(self.shape(), values, &[self], Op::Scale(self.clone(), c), "scale")
    }

    pub fn neg(&self) -> Result<Tensor> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Tensor> {
        let values = self.with_values(|a| a.iter().map(|x| x + c).collect());
        Tensor::result(self.shape(), values, &[self], Op::AddScalar(self.clone()), "add_scalar")
    }

    pub fn tanh(&self) -> Result<Tensor> {
        let values = self.with_values(|a| a.iter().map(|x| x.tanh()).collect());
        Tensor::result(self.shape(), values, &[self], Op::Tanh(self.clone()), "tanh")
    }

    pub fn leaky_relu(&self, slope: f64) -> Result<Tensor> {
        let values = self.with_values(|a| a.iter().map(|&x| if x > 0.0 { x } else { slope * x }).collect());
        Tensor::result(
            self.shape(),
            values,
            &[self],
            Op::LeakyRelu(self.clone(), slope),
            "leaky_relu",
        )
    }

    pub fn exp(&self) -> Result<Tensor> {
        let values = self.with_values(|a| a.iter().map(|x| x.exp()).collect());
        Tensor::result(self.shape(), values, &[self], Op::Exp(self.clone()), "exp")
    }

    pub fn ln(&self) -> Result<Tensor> {
        let values = self.with_values(|a| a.iter().map(|x| x.ln()).collect());
        Tensor::result(self.shape(), values, &[self], Op::Ln(self.clone()), "ln")
    }

    pub fn square(&self) -> Result<Tensor> {
        let values = self.with_values(|a| a.iter().map(|x| x * x).collect());
        Tensor::result(self.shape(), values, &[self], Op::Square(self.clone()), "square")
    }

    /// Sum of all elements, as a scalar [1] tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let total = self.with_values(|a| a.iter().sum());
        Tensor::result(vec![1], vec![total], &[self], Op::Sum(self.clone()), "sum")
    }

    /// Row sums of a [n, d] matrix, as a [n] tensor.
    pub fn sum_rows(&self) -> Result<Tensor> {
        let (n, d) = self.dims2()?;
        let values = self.with_values(|a| (0..n).map(|i| a[i * d..(i + 1) * d].iter().sum()).collect());
        Tensor::result(vec![n], values, &[self], Op::SumRows(self.clone()), "sum_rows")
    }

    /// Sum of the elements selected by a 0/1 mask of the same shape.
    pub fn masked_sum(&self, mask: &Tensor) -> Result<Tensor> {
        self.mul(mask)?.sum()
    }

    /// Replicate a scalar into a [n] tensor.
    pub fn repeat_n(&self, n: usize) -> Result<Tensor> {
        if self.numel() != 1 {
            return Err(Error::contract("repeat_n expects a scalar"));
        }
        let v = self.value_at(0);
        Tensor::result(vec![n], vec![v; n], &[self], Op::RepeatN(self.clone()), "repeat_n")
    }

    /// Gather columns `idx` of a [n, d] matrix into a [n, idx.len()] matrix.
    pub fn select_cols(&self, idx: &Rc<Vec<usize>>) -> Result<Tensor> {
        let (n, d) = self.dims2()?;
        if let Some(&bad) = idx.iter().find(|&&j| j >= d) {
            return Err(Error::contract(format!("select_cols: index {bad} out of range for width {d}")));
        }
        let k = idx.len();
        let values = self.with_values(|a| {
            let mut out = vec![0.0; n * k];
            for i in 0..n {
                for (jj, &j) in idx.iter().enumerate() {
                    out[i * k + jj] = a[i * d + j];
                }
            }
            out
        });
        Tensor::result(
            vec![n, k],
            values,
            &[self],
            Op::SelectCols(self.clone(), idx.clone()),
            "select_cols",
        )
    }

    /// Scatter column blocks into a [n, dim] matrix. The index lists must
    /// together cover every column exactly once.
    pub fn assemble_cols(parts: &[(Tensor, Rc<Vec<usize>>)], dim: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::contract("assemble_cols: no parts"));
        }
        let n = parts[0].0.dims2()?.0;
        let mut coverage = vec![false; dim];
        for (t, idx) in parts {
            let (ni, k) = t.dims2()?;
            if ni != n {
                return Err(Error::contract("assemble_cols: row count mismatch"));
            }
            if k != idx.len() {
                return Err(Error::contract("assemble_cols: index count mismatch"));
            }
            for &j in idx.iter() {
                if j >= dim || coverage[j] {
                    return Err(Error::contract(format!("assemble_cols: bad or duplicate column {j}")));
                }
                coverage[j] = true;
            }
        }
        if !coverage.iter().all(|&c| c) {
            return Err(Error::contract("assemble_cols: columns not fully covered"));
        }
        let mut values = vec![0.0; n * dim];
        for (t, idx) in parts {
            t.with_values(|a| {
                let k = idx.len();
                for i in 0..n {
                    for (jj, &j) in idx.iter().enumerate() {
                        values[i * dim + j] = a[i * k + jj];
                    }
                }
            });
        }
        let refs: Vec<&Tensor> = parts.iter().map(|(t, _)| t).collect();
        Tensor::result(
            vec![n, dim],
            values,
            &refs,
            Op::AssembleCols(parts.to_vec()),
            "assemble_cols",
        )
    }
}

// ── dense matmul kernels ───────────────────────────────────────────────

/// C = A[n,k] * B[k,m], ikj loop order for cache-friendly inner axpy.
fn matmul_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * m];
    for i in 0..n {
        let crow = &mut c[i * m..(i + 1) * m];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let brow = &b[kk * m..(kk + 1) * m];
            for j in 0..m {
                crow[j] += aik * brow[j];
            }
        }
    }
    c
}

/// C = A[n,m] * B[k,m]^T -> [n,k]; contiguous dot products.
fn matmul_nt(a: &[f64], b: &[f64], n: usize, m: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * k];
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        for kk in 0..k {
            let brow = &b[kk * m..(kk + 1) * m];
            c[i * k + kk] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    c
}

/// C = A[n,k]^T * B[n,m] -> [k,m].
fn matmul_tn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * m];
    for i in 0..n {
        let brow = &b[i * m..(i + 1) * m];
        for kk in 0..k {
            let aik = a[i * k + kk];
            let crow = &mut c[kk * m..(kk + 1) * m];
            for j in 0..m {
                crow[j] += aik * brow[j];
            }
        }
    }
    c
}

// ── reverse pass ───────────────────────────────────────────────────────

/// Run reverse-mode differentiation from a scalar root. Gradients are
/// accumulated additively into every `requires_grad` tensor reached by the
/// graph; call `zero_grad` (or an optimizer step) to reset them.
pub fn backward(root: &Tensor) -> Result<()> {
    if root.numel() != 1 {
        return Err(Error::contract(format!(
            "backward requires a scalar root, got shape {:?}",
            root.shape()
        )));
    }

    // Post-order DFS over grad-requiring nodes; reverse is topological.
    let mut order: Vec<Tensor> = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor, bool)> = vec![(root.clone(), false)];
    while let Some((t, processed)) = stack.pop() {
        if processed {
            order.push(t);
            continue;
        }
        let id = t.id();
        if !visited.insert(id) {
            continue;
        }
        stack.push((t.clone(), true));
        for input in t.op_inputs() {
            if input.requires_grad() && !visited.contains(&input.id()) {
                stack.push((input, false));
            }
        }
    }

    let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
    grads.insert(root.id(), vec![1.0]);

    let add_into = |grads: &mut HashMap<u64, Vec<f64>>, t: &Tensor, g: Vec<f64>| {
        grads
            .entry(t.id())
            .and_modify(|acc| {
                for (a, b) in acc.iter_mut().zip(&g) {
                    *a += b;
                }
            })
            .or_insert(g);
    };

    for node in order.iter().rev() {
        let g = match grads.remove(&node.id()) {
            Some(g) => g,
            None => continue,
        };
        check_finite(&g, "backward gradient")?;
        if node.requires_grad() {
            node.accumulate_grad(&g);
        }
        let inner = node.inner.borrow();
        let op = match &inner.op {
            Some(op) => op,
            None => continue,
        };
        match op {
            Op::Add(a, b) => {
                if a.requires_grad() {
                    add_into(&mut grads, a, g.clone());
                }
                if b.requires_grad() {
                    add_into(&mut grads, b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if a.requires_grad() {
                    add_into(&mut grads, a, g.clone());
                }
                if b.requires_grad() {
                    add_into(&mut grads, b, g.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if a.requires_grad() {
                    let ga = b.with_values(|bv| g.iter().zip(bv).map(|(x, y)| x * y).collect());
                    add_into(&mut grads, a, ga);
                }
                if b.requires_grad() {
                    let gb = a.with_values(|av| g.iter().zip(av).map(|(x, y)| x * y).collect());
                    add_into(&mut grads, b, gb);
                }
            }
            Op::MatMul(a, b) => {
                let (n, k) = (a.shape()[0], a.shape()[1]);
                let m = b.shape()[1];
                if a.requires_grad() {
                    let ga = b.with_values(|bv| matmul_nt(&g, bv, n, m, k));
                    add_into(&mut grads, a, ga);
                }
                if b.requires_grad() {
                    let gb = a.with_values(|av| matmul_tn(av, &g, n, k, m));
                    add_into(&mut grads, b, gb);
                }
            }
            Op::BroadcastAdd(a, v) => {
                let (n, d) = (a.shape()[0], a.shape()[1]);
                if a.requires_grad() {
                    add_into(&mut grads, a, g.clone());
                }
                if v.requires_grad() {
                    let mut gv = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            gv[j] += g[i * d + j];
                        }
                    }
                    add_into(&mut grads, v, gv);
                }
            }
            Op::BroadcastMul(a, v) => {
                let (n, d) = (a.shape()[0], a.shape()[1]);
                if a.requires_grad() {
                    let ga = v.with_values(|vv| {
                        let mut out = vec![0.0; n * d];
                        for i in 0..n {
                            for j in 0..d {
                                out[i * d + j] = g[i * d + j] * vv[j];
                            }
                        }
                        out
                    });
                    add_into(&mut grads, a, ga);
                }
                if v.requires_grad() {
                    let gv = a.with_values(|av| {
                        let mut out = vec![0.0; d];
                        for i in 0..n {
                            for j in 0..d {
                                out[j] += g[i * d + j] * av[i * d + j];
                            }
                        }
                        out
                    });
                    add_into(&mut grads, v, gv);
                }
            }
            Op::Scale(a, c) => {
                if a.requires_grad() {
                    add_into(&mut grads, a, g.iter().map(|x| x * c).collect());
                }
            }
            Op::AddScalar(a) => {
                if a.requires_grad() {
                    add_into(&mut grads, a, g.clone());
                }
            }
            Op::Tanh(a) => {
                if a.requires_grad() {
                    // d tanh = 1 - y^2 with y the stored output.
                    let ga = g
                        .iter()
                        .zip(&inner.values)
                        .map(|(gy, y)| gy * (1.0 - y * y))
                        .collect();
                    add_into(&mut grads, a, ga);
                }
            }
            Op::LeakyRelu(a, slope) => {
                if a.requires_grad() {
                    let ga = a.with_values(|av| {
                        g.iter()
                            .zip(av)
                            .map(|(gy, &x)| if x > 0.0 { *gy } else { gy * slope })
                            .collect()
                    });
                    add_into(&mut grads, a, ga);
                }
            }
            Op::Exp(a) => {
                if a.requires_grad() {
                    let ga = g.iter().zip(&inner.values).map(|(gy, y)| gy * y).collect();
                    add_into(&mut grads, a, ga);
                }
            }
            Op::Ln(a) => {
                if a.requires_grad() {
                    let ga = a.with_values(|av| g.iter().zip(av).map(|(gy, x)| gy / x).collect());
                    add_into(&mut grads, a, ga);
                }
            }
            Op::Square(a) => {
                if a.requires_grad() {
                    let ga = a.with_values(|av| g.iter().zip(av).map(|(gy, x)| 2.0 * gy * x).collect());
                    add_into(&mut grads, a, ga);
                }
            }
            Op::Sum(a) => {
                if a.requires_grad() {
                    add_into(&mut grads, a, vec![g[0]; a.numel()]);
                }
            }
            Op::SumRows(a) => {
                if a.requires_grad() {
                    let (n, d) = (a.shape()[0], a.shape()[1]);
                    let mut ga = vec![0.0; n * d];
                    for i in 0..n {
                        for j in 0..d {
                            ga[i * d + j] = g[i];
                        }
                    }
                    add_into(&mut grads, a, ga);
                }
            }
            Op::RepeatN(a) => {
                if a.requires_grad() {
                    add_into(&mut grads, a, vec![g.iter().sum()]);
                }
            }
            Op::SelectCols(a, idx) => {
                if a.requires_grad() {
                    let (n, d) = (a.shape()[0], a.shape()[1]);
                    let k = idx.len();
                    let mut ga = vec![0.0; n * d];
                    for i in 0..n {
                        for (jj, &j) in idx.iter().enumerate() {
                            ga[i * d + j] += g[i * k + jj];
                        }
                    }
                    add_into(&mut grads, a, ga);
                }
            }
            Op::AssembleCols(parts) => {
                let dim = inner.shape[1];
                let n = inner.shape[0];
                for (t, idx) in parts {
                    if !t.requires_grad() {
                        continue;
                    }
                    let k = idx.len();
                    let mut gt = vec![0.0; n * k];
                    for i in 0..n {
                        for (jj, &j) in idx.iter().enumerate() {
                            gt[i * k + jj] = g[i * dim + j];
                        }
                    }
                    add_into(&mut grads, t, gt);
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let w = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let loss = w.mul(&w).unwrap().sum().unwrap();
        backward(&loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn matmul_column_sums() {
        let w = Tensor::from_values(&[2, 2], vec![1.0; 4]).unwrap();
        let z = Tensor::param(&[2, 1], vec![3.0, 5.0]).unwrap();
        let loss = w.matmul(&z).unwrap().sum().unwrap();
        backward(&loss).unwrap();
        assert_eq!(z.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn accumulation_is_linear() {
        // backward on f, then g, matches backward on f+g
        let w = Tensor::param(&[2], vec![0.5, -1.5]).unwrap();
        let f = w.square().unwrap().sum().unwrap();
        let g = w.scale(3.0).unwrap().sum().unwrap();
        backward(&f).unwrap();
        backward(&g).unwrap();
        let separate = w.grad().unwrap();

        let w2 = Tensor::param(&[2], vec![0.5, -1.5]).unwrap();
        let fg = w2
            .square()
            .unwrap()
            .sum()
            .unwrap()
            .add(&w2.scale(3.0).unwrap().sum().unwrap())
            .unwrap();
        backward(&fg).unwrap();
        assert_eq!(separate, w2.grad().unwrap());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let w = Tensor::param(&[2], vec![1.0, 2.0]).unwrap();
        let y = w.square().unwrap();
        assert!(matches!(backward(&y), Err(Error::Contract(_))));
    }

    #[test]
    fn nan_fails_loudly() {
        let w = Tensor::param(&[1], vec![-1.0]).unwrap();
        assert!(matches!(w.ln(), Err(Error::Numeric(_))));
    }

    #[test]
    fn shape_value_mismatch_rejected() {
        assert!(Tensor::from_values(&[3], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn select_and_assemble_roundtrip_with_grads() {
        let x = Tensor::param(&[2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]).unwrap();
        let even = Rc::new(vec![0usize, 2]);
        let odd = Rc::new(vec![1usize, 3]);
        let a = x.select_cols(&even).unwrap();
        let b = x.select_cols(&odd).unwrap();
        let y = Tensor::assemble_cols(&[(a, even.clone()), (b.scale(2.0).unwrap(), odd.clone())], 4).unwrap();
        assert_eq!(y.values(), vec![1.0, 4.0, 3.0, 8.0, 5.0, 12.0, 7.0, 16.0]);
        let loss = y.sum().unwrap();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }

    #[test]
    fn broadcast_ops_match_manual() {
        let m = Tensor::param(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let v = Tensor::param(&[3], vec![10.0, 20.0, 30.0]).unwrap();
        let y = m.broadcast_add(&v).unwrap();
        assert_eq!(y.values(), vec![11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        let z = m.broadcast_mul(&v).unwrap();
        assert_eq!(z.values(), vec![10.0, 40.0, 90.0, 40.0, 100.0, 180.0]);
        let loss = z.sum().unwrap();
        backward(&loss).unwrap();
        assert_eq!(v.grad().unwrap(), vec![5.0, 7.0, 9.0]);
        assert_eq!(m.grad().unwrap(), vec![10.0, 20.0, 30.0, 10.0, 20.0, 30.0]);
    }

    #[test]
    fn sum_rows_and_repeat() {
        let m = Tensor::param(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let r = m.sum_rows().unwrap();
        assert_eq!(r.values(), vec![3.0, 7.0]);
        let s = Tensor::param(&[1], vec![2.5]).unwrap();
        let rep = s.repeat_n(3).unwrap();
        assert_eq!(rep.values(), vec![2.5, 2.5, 2.5]);
        let loss = rep.sum().unwrap();
        backward(&loss).unwrap();
        assert_eq!(s.grad().unwrap(), vec![3.0]);
    }

    #[test]
    fn grads_flow_through_shared_subexpression() {
        // y = x*x via mul with aliased inputs
        let x = Tensor::param(&[1], vec![3.0]).unwrap();
        let y = x.mul(&x).unwrap().sum().unwrap();
        backward(&y).unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }
}
