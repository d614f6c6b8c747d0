//! Tape-based reverse-mode automatic differentiation.
//!
//! Every primitive appends one entry to a [`Tape`]; entries only reference
//! earlier entries, so the tape is always in topological order and
//! [`Tape::backward`] is a single reverse sweep. Each entry keeps whatever
//! intermediates its adjoint needs (normalized activations, softmax outputs,
//! gather indices).
//!
//! Shapes are static: there is no general broadcasting, only the row-wise
//! bias add used by linear layers.

use crate::error::{Error, Result};
use crate::kernels::{gemm_nn, gemm_nt, gemm_tn};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running statistics and hyperparameters of one batch-norm layer.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(features: usize) -> Self {
        Self {
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: 0.1,
            eps: 1e-5,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Concat { parts: Vec<Var>, axis: usize },
    Relu(Var),
    Softmax(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    L1Loss(Var, Var),
    Sum(Var),
    Reshape(Var),
    GatherRows { x: Var, index: Vec<usize> },
    ScatterAddRows { x: Var, index: Vec<usize> },
    ScaleRows { x: Var, s: Var },
    Gather { x: Var, index: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.push(t, Op::Leaf, needs_grad)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), needs))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2("add_bias")?;
        if self.shape(bias) != [n] {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..m {
            for (o, bv) in data[r * n..(r + 1) * n].iter_mut().zip(b) {
                *o += bv;
            }
        }
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::AddBias(x, bias), needs))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Scale(x, factor), needs))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("concat of an empty list".into()))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidArgument(format!(
                "concat axis {axis} out of range for rank {}",
                base.len()
            )));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let agrees = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !agrees {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let w = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v.max(0.0)).collect();
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Relu(x), needs))
    }

    /// Max-shifted softmax over the last axis (each row of a matrix, or a whole vector).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| Error::InvalidArgument("softmax of a scalar".into()))?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::Softmax(x), needs))
    }

    /// Per-feature standardization of `x[m×d]` with learned scale/shift.
    ///
    /// Training mode normalizes with batch statistics and updates the running
    /// averages in `state`; inference mode is the fixed affine map given by
    /// the running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        state: &mut BatchNormState,
        training: bool,
    ) -> Result<Var> {
        let (m, d) = self.value(x).dims2("batch_norm")?;
        if m == 0 {
            return Err(Error::InvalidArgument("batch_norm needs a batch of at least 1".into()));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("batch_norm", self.shape(x), self.shape(gamma)));
        }
        if state.running_mean.len() != d || state.running_var.len() != d {
            return Err(Error::shape("batch_norm", &[d], &[state.running_mean.len()]));
        }
        let xs = self.value(x).data();
        let (mean, var) = if training {
            let mut mean = vec![0.0; d];
            for r in 0..m {
                for (acc, v) in mean.iter_mut().zip(&xs[r * d..(r + 1) * d]) {
                    *acc += v;
                }
            }
            mean.iter_mut().for_each(|v| *v /= m as f64);
            let mut var = vec![0.0; d];
            for r in 0..m {
                for j in 0..d {
                    let c = xs[r * d + j] - mean[j];
                    var[j] += c * c;
                }
            }
            var.iter_mut().for_each(|v| *v /= m as f64);
            (mean, var)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * d];
        let mut out = vec![0.0; m * d];
        for r in 0..m {
            for j in 0..d {
                let h = (xs[r * d + j] - mean[j]) * inv_std[j];
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        if training {
            let mom = state.momentum;
            let unbias = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
            for j in 0..d {
                state.running_mean[j] = (1.0 - mom) * state.running_mean[j] + mom * mean[j];
                state.running_var[j] = (1.0 - mom) * state.running_var[j] + mom * var[j] * unbias;
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Tensor::new(vec![m, d], out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
            needs,
        ))
    }

    /// Mean absolute difference, a scalar.
    pub fn l1_loss(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1_loss", a, b)?;
        let n = self.value(a).len().max(1);
        let s: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(s / n as f64), Op::L1Loss(a, b), needs))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().with_requires_grad(false).reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// Selects rows of `x[r×d]`: `out[k] = x[index[k]]`.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (r, d) = self.value(x).dims2("gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::InvalidArgument(format!("row {bad} out of range {r}")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in index {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![index.len(), d], data)?,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            needs,
        ))
    }

    /// Sums rows of `x[k×d]` into `rows` output rows: `out[index[k]] += x[k]`.
    pub fn scatter_add_rows(&mut self, x: Var, index: &[usize], rows: usize) -> Result<Var> {
        let (k, d) = self.value(x).dims2("scatter_add_rows")?;
        if index.len() != k {
            return Err(Error::shape("scatter_add_rows", &[k, d], &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!("row {bad} out of range {rows}")));
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; rows * d];
        for (s, &dst) in index.iter().enumerate() {
            for (o, v) in data[dst * d..(dst + 1) * d].iter_mut().zip(&src[s * d..(s + 1) * d]) {
                *o += v;
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::new(vec![rows, d], data)?,
            Op::ScatterAddRows {
                x,
                index: index.to_vec(),
            },
            needs,
        ))
    }

    /// Multiplies row `r` of `x[k×d]` by `s[r]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (k, d) = self.value(x).dims2("scale_rows")?;
        if self.shape(s) != [k] {
            return Err(Error::shape("scale_rows", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..k {
            data[r * d..(r + 1) * d].iter_mut().for_each(|v| *v *= sv[r]);
        }
        let needs = self.needs(x) || self.needs(s);
        Ok(self.push(Tensor::new(vec![k, d], data)?, Op::ScaleRows { x, s }, needs))
    }

    /// Flat gather: `out[k] = x.data[index[k]]`, shape `[index.len()]`.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let n = self.value(x).len();
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::InvalidArgument(format!("element {bad} out of range {n}")));
        }
        let src = self.value(x).data();
        let data = index.iter().map(|&i| src[i]).collect();
        let needs = self.needs(x);
        Ok(self.push(
            Tensor::vector(data),
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar `root`.
    ///
    /// Afterwards every `requires_grad` leaf carries a gradient (zeros when
    /// it did not influence the root). A tape can be swept once.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::Autodiff(
                "backward called twice on the same tape; record a new forward pass".into(),
            ));
        }
        if self.value(root).len() != 1 {
            return Err(Error::Autodiff(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if self.nodes[id].needs_grad {
                self.propagate(id, &g, &mut grads)?;
            }
            grads[id] = Some(g);
        }

        for (id, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad() {
                let g = grads[id]
                    .clone()
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                grads[id] = Some(g.clone());
                node.value.set_grad(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2("matmul")?;
                let n = self.shape(*b)[1];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |ga| gemm_nt(g, bv, ga, m, n, k));
                self.accumulate(grads, *b, |gb| gemm_tn(av, g, gb, k, m, n));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(o, v)| *o -= v));
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddBias(x, bias) => {
                let n = self.shape(*bias)[0];
                self.accumulate(grads, *x, |gx| add_into(gx, g));
                self.accumulate(grads, *bias, |gb| {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(x, f) => {
                self.accumulate(grads, *x, |gx| {
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += f * v)
                });
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[*axis] * inner;
                    self.accumulate(grads, p, |gp| {
                        for o in 0..outer {
                            add_into(
                                &mut gp[o * w..(o + 1) * w],
                                &g[o * total + offset..o * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = *node.value.shape().last().unwrap_or(&1);
                self.accumulate(grads, *x, |gx| {
                    for r in 0..y.len() / n {
                        let ys = &y[r * n..(r + 1) * n];
                        let gs = &g[r * n..(r + 1) * n];
                        let inner: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gx[r * n + j] += ys[j] * (gs[j] - inner);
                        }
                    }
                });
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let (m, d) = node.value.dims2("batch_norm")?;
                let gam = self.value(*gamma).data();
                self.accumulate(grads, *gamma, |gg| {
                    for r in 0..m {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                self.accumulate(grads, *beta, |gb| {
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                });
                self.accumulate(grads, *x, |gx| {
                    if *training {
                        let mut sum_dh = vec![0.0; d];
                        let mut sum_dh_h = vec![0.0; d];
                        for r in 0..m {
                            for j in 0..d {
                                let dh = g[r * d + j] * gam[j];
                                sum_dh[j] += dh;
                                sum_dh_h[j] += dh * xhat[r * d + j];
                            }
                        }
                        let mf = m as f64;
                        for r in 0..m {
                            for j in 0..d {
                                let dh = g[r * d + j] * gam[j];
                                gx[r * d + j] += inv_std[j] / mf
                                    * (mf * dh - sum_dh[j] - xhat[r * d + j] * sum_dh_h[j]);
                            }
                        }
                    } else {
                        for r in 0..m {
                            for j in 0..d {
                                gx[r * d + j] += g[r * d + j] * gam[j] * inv_std[j];
                            }
                        }
                    }
                });
            }
            Op::L1Loss(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let n = av.len().max(1) as f64;
                let s = g[0] / n;
                let sign = |d: f64| {
                    if d > 0.0 {
                        1.0
                    } else if d < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                };
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += s * sign(av[i] - bv[i]);
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] -= s * sign(av[i] - bv[i]);
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|v| *v += g[0]));
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, |gx| add_into(gx, g));
            }
            Op::GatherRows { x, index } => {
                let d = self.shape(*x)[1];
                self.accumulate(grads, *x, |gx| {
                    for (k, &i) in index.iter().enumerate() {
                        add_into(&mut gx[i * d..(i + 1) * d], &g[k * d..(k + 1) * d]);
                    }
                });
            }
            Op::ScatterAddRows { x, index } => {
                let d = self.shape(*x)[1];
                self.accumulate(grads, *x, |gx| {
                    for (k, &i) in index.iter().enumerate() {
                        add_into(&mut gx[k * d..(k + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::ScaleRows { x, s } => {
                let d = self.shape(*x)[1];
                let xv = self.value(*x).data();
                let sv = self.value(*s).data();
                self.accumulate(grads, *x, |gx| {
                    for (r, &sr) in sv.iter().enumerate() {
                        for j in 0..d {
                            gx[r * d + j] += g[r * d + j] * sr;
                        }
                    }
                });
                self.accumulate(grads, *s, |gs| {
                    for r in 0..sv.len() {
                        gs[r] += crate::kernels::dot(
                            &g[r * d..(r + 1) * d],
                            &xv[r * d..(r + 1) * d],
                        );
                    }
                });
            }
            Op::Gather { x, index } => {
                self.accumulate(grads, *x, |gx| {
                    for (k, &i) in index.iter().enumerate() {
                        gx[i] += g[k];
                    }
                });
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(o, v)| *o += v);
}

/// Max-shifted softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

pub fn softmax(values: &[f64]) -> Vec<f64> {
    let mut out = values.to_vec();
    softmax_in_place(&mut out);
    out
}
