//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation evaluates eagerly, appends a node holding its output and
//! whatever it needs for the adjoint, and returns a [`Var`] handle. Calling
//! [`Tape::backward`] replays the adjoints in reverse record order.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Result};
use crate::kernels::{self, ConvGeom, UpGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// A linear map with an explicit adjoint, recorded as a single tape node.
pub trait LinearOp<T: Real>: Send + Sync {
    fn output_shape(&self) -> Vec<usize>;
    fn apply(&self, inputs: &[&Tensor<T>]) -> Tensor<T>;
    /// Returns one gradient per input, in input order.
    fn adjoint(&self, grad: &Tensor<T>) -> Vec<Tensor<T>>;
}

enum Op<T: Real> {
    Leaf,
    Conv { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    UpConv { x: Var, w: Var, b: Option<Var>, geom: UpGeom },
    MaxPool { x: Var, argmax: Vec<u32> },
    AvgPoolSame { x: Var, planes: usize, extents: [usize; 3], window: [usize; 3] },
    Relu { x: Var },
    Sigmoid { x: Var },
    Concat { a: Var, b: Var },
    AddScalar { x: Var, s: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Dropout { x: Var, mask: Vec<T> },
    Dice { pred: Var, truth: Vec<T>, inter: f64, denom: f64 },
    Dense { x: Var, w: Var, b: Option<Var> },
    WeightedSum { x: Var, weights: Tensor<T> },
    Linear { inputs: Vec<Var>, op: Arc<dyn LinearOp<T>> },
    Reshape { x: Var },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Batch statistics observed by a training-mode batchnorm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    bindings: Vec<(ParamId, Var)>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `[N, C, D, H, W]` view of a rank-4 or rank-5 activation.
fn as_5d(shape: &[usize]) -> Result<[usize; 5]> {
    match *shape {
        [n, c, h, w] => Ok([n, c, 1, h, w]),
        [n, c, d, h, w] => Ok([n, c, d, h, w]),
        _ => shape_err(format!("expected [N,C,H,W] or [N,C,D,H,W], got {shape:?}")),
    }
}

fn with_spatial(shape: &[usize], n: usize, c: usize, sp: [usize; 3]) -> Vec<usize> {
    if shape.len() == 4 {
        vec![n, c, sp[1], sp[2]]
    } else {
        vec![n, c, sp[0], sp[1], sp[2]]
    }
}

/// Spatial window for a rank-matched pool spec (`[h, w]` or `[d, h, w]`).
fn window3(rank: usize, window: &[usize]) -> Result<[usize; 3]> {
    match (rank, window) {
        (4, &[h, w]) => Ok([1, h, w]),
        (5, &[d, h, w]) => Ok([d, h, w]),
        _ => shape_err(format!("window {window:?} does not match rank {rank}")),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), bindings: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops all recorded nodes, gradients and parameter bindings.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
        self.bindings.clear();
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter to this tape; repeated calls return the same
    /// node so shared weights accumulate gradient from every use.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&(_, v)) = self.bindings.iter().find(|(p, _)| *p == id) {
            return v;
        }
        let p = store.get(id);
        let v = self.leaf(p.value.clone(), p.trainable);
        self.bindings.push((id, v));
        v
    }

    pub fn bindings(&self) -> &[(ParamId, Var)] {
        &self.bindings
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Zero-padded ("same") or valid stride-1 convolution. Rank 4 inputs use a
    /// `[F, C, kh, kw]` kernel, rank 5 inputs a `[F, C, kd, kh, kw]` kernel.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, zero_pad: bool) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let [n, c, d, h, wd] = as_5d(&xs)?;
        if ws.len() != xs.len() {
            return shape_err(format!("kernel {ws:?} does not match input {xs:?}"));
        }
        let [f, kc, kd, kh, kw] = as_5d(&ws)?;
        if kc != c {
            return shape_err(format!("kernel expects {kc} channels, input has {c}"));
        }
        if [kd, kh, kw].iter().any(|k| k % 2 == 0) {
            return shape_err(format!("kernel extents must be odd, got {ws:?}"));
        }
        if let Some(b) = b {
            if self.value(b).numel() != f {
                return shape_err("bias length must equal filter count");
            }
        }
        let kernel = [kd, kh, kw];
        let pad = if zero_pad { kernel.map(|k| k / 2) } else { [0; 3] };
        if (0..3).any(|a| [d, h, wd][a] + 2 * pad[a] < kernel[a]) {
            return shape_err("kernel larger than input");
        }
        let geom = ConvGeom { batch: n, c_in: c, c_out: f, input: [d, h, wd], kernel, pad };
        let out = kernels::conv_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let shape = with_spatial(&xs, n, f, geom.output());
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Conv { x, w, b, geom }, rg))
    }

    /// Transposed convolution whose stride equals its kernel extent; kernel is
    /// `[C_in, C_out, (kd,) kh, kw]`.
    pub fn conv_transpose(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        let [n, c, d, h, wd] = as_5d(&xs)?;
        if ws.len() != xs.len() {
            return shape_err(format!("kernel {ws:?} does not match input {xs:?}"));
        }
        let [kc, f, kd, kh, kw] = as_5d(&ws)?;
        if kc != c {
            return shape_err(format!("transposed kernel expects {kc} channels, input has {c}"));
        }
        let geom = UpGeom { batch: n, c_in: c, c_out: f, input: [d, h, wd], factor: [kd, kh, kw] };
        let out = kernels::upconv_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let shape = with_spatial(&xs, n, f, geom.output());
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::UpConv { x, w, b, geom }, rg))
    }

    /// Max pooling with stride equal to the window; extents must divide.
    pub fn max_pool(&mut self, x: Var, window: &[usize]) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let [n, c, d, h, w] = as_5d(&xs)?;
        let win = window3(xs.len(), window)?;
        if (0..3).any(|a| [d, h, w][a] % win[a] != 0) {
            return shape_err(format!("max-pool window {window:?} does not divide {xs:?}; crop the input first"));
        }
        let (vals, argmax) = kernels::maxpool_forward(self.value(x).data(), n * c, [d, h, w], win);
        let sp = [d / win[0], h / win[1], w / win[2]];
        let shape = with_spatial(&xs, n, c, sp);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&shape, vals)?, Op::MaxPool { x, argmax }, rg))
    }

    /// Shape-preserving stride-1 average pooling, count-normalized at borders.
    pub fn avg_pool_same(&mut self, x: Var, window: &[usize]) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let [n, c, d, h, w] = as_5d(&xs)?;
        let win = window3(xs.len(), window)?;
        let out = kernels::avgpool_same(self.value(x).data(), n * c, [d, h, w], win, false);
        let rg = self.rg(x);
        let op = Op::AvgPoolSame { x, planes: n * c, extents: [d, h, w], window: win };
        Ok(self.push(Tensor::from_vec(&xs, out)?, op, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| if *v > T::zero() { *v } else { T::zero() });
        let rg = self.rg(x);
        self.push(y, Op::Relu { x }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| T::one() / (T::one() + (-*v).exp()));
        let rg = self.rg(x);
        self.push(y, Op::Sigmoid { x }, rg)
    }

    /// Stacks two activations along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != sb.len() || sa.len() < 2 || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return shape_err(format!("cannot concatenate {sa:?} and {sb:?} on channels"));
        }
        let n = sa[0];
        let (pa, pb) = (self.value(a).numel() / n, self.value(b).numel() / n);
        let mut out = Vec::with_capacity(n * (pa + pb));
        for i in 0..n {
            out.extend_from_slice(&self.value(a).data()[i * pa..(i + 1) * pa]);
            out.extend_from_slice(&self.value(b).data()[i * pb..(i + 1) * pb]);
        }
        let mut shape = sa.clone();
        shape[1] += sb[1];
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&shape, out)?, Op::Concat { a, b }, rg))
    }

    /// `x + s` for a single learnable scalar `s`.
    pub fn add_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return shape_err("shift must be a single scalar");
        }
        let beta = self.value(s).data()[0];
        let y = self.value(x).map(|v| *v + beta);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(y, Op::AddScalar { x, s }, rg))
    }

    fn check_bn(&self, x: Var, gamma: Var, beta: Var) -> Result<[usize; 3]> {
        let xs = self.value(x).shape();
        if xs.len() < 2 {
            return shape_err("batchnorm needs [N, C, ...]");
        }
        let (n, c) = (xs[0], xs[1]);
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return shape_err("batchnorm affine parameters must have one entry per channel");
        }
        Ok([n, c, self.value(x).numel() / (n * c)])
    }

    fn bn_apply(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64, batch_stats: bool) -> Result<Var> {
        let [n, c, s] = self.check_bn(x, gamma, beta)?;
        let inv_std: Vec<T> = var.iter().map(|v| T::of(1.0 / (v + eps).sqrt())).collect();
        let xv = self.value(x);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut y = vec![T::zero(); xv.numel()];
        for i in 0..n {
            for ch in 0..c {
                let mu = T::of(mean[ch]);
                let off = (i * c + ch) * s;
                for k in off..off + s {
                    xhat[k] = (xv.data()[k] - mu) * inv_std[ch];
                    y[k] = g[ch] * xhat[k] + b[ch];
                }
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let op = Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats };
        Ok(self.push(Tensor::from_vec(&shape, y)?, op, rg))
    }

    /// Training-mode batchnorm: normalizes with the per-channel statistics of
    /// the batch (all samples and spatial positions) and reports them.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let [n, c, s] = self.check_bn(x, gamma, beta)?;
        let (mean, var) = kernels::channel_stats(self.value(x).data(), n, c, s);
        let y = self.bn_apply(x, gamma, beta, &mean, &var, eps, true)?;
        Ok((y, BatchStats { mean, var }))
    }

    /// Inference-mode batchnorm with fixed running statistics.
    pub fn batch_norm_infer(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64], eps: f64) -> Result<Var> {
        self.bn_apply(x, gamma, beta, mean, var, eps, false)
    }

    /// Inverted dropout. Identity when not training or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, training: bool, seed: u64) -> Var {
        if !training || rate <= 0.0 {
            return x;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let mut y = self.value(x).clone();
        y.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v = *v * *m);
        let rg = self.rg(x);
        self.push(y, Op::Dropout { x, mask }, rg)
    }

    /// Soft Dice loss `1 - 2 sum(y*p) / (sum p + sum y)`; when both sums are
    /// zero the denominator is replaced by `1e-6`.
    pub fn dice_loss(&mut self, pred: Var, truth: &Tensor<T>) -> Result<Var> {
        if self.value(pred).shape() != truth.shape() {
            return shape_err(format!(
                "dice loss shapes differ: {:?} vs {:?}",
                self.value(pred).shape(),
                truth.shape()
            ));
        }
        let (inter, denom) = dice_sums(self.value(pred).data(), truth.data());
        let loss = 1.0 - 2.0 * inter / denom;
        let rg = self.rg(pred);
        let op = Op::Dice { pred, truth: truth.data().to_vec(), inter, denom };
        Ok(self.push(Tensor::scalar(T::of(loss)), op, rg))
    }

    /// `x W^T + b` for `x: [N, in]`, `w: [out, in]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return shape_err(format!("dense shapes {xs:?} x {ws:?}"));
        }
        let (n, out) = (xs[0], ws[0]);
        let mut y = vec![T::zero(); n * out];
        crate::tensor::gemm(
            crate::tensor::MatRef::new(self.value(x).data(), n, xs[1]),
            crate::tensor::MatRef::new(self.value(w).data(), out, ws[1]).t(),
            T::zero(),
            &mut y,
        );
        if let Some(b) = b {
            let bv = self.value(b).data();
            if bv.len() != out {
                return shape_err("dense bias length");
            }
            for row in y.chunks_mut(out) {
                row.iter_mut().zip(bv).for_each(|(v, b)| *v = *v + *b);
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::from_vec(&[n, out], y)?, Op::Dense { x, w, b }, rg))
    }

    /// Scalar `sum(x * weights)` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        if self.value(x).shape() != weights.shape() {
            return shape_err("weighted_sum shapes differ");
        }
        let s = self.value(x).dot(weights);
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(T::of(s)), Op::WeightedSum { x, weights: weights.clone() }, rg))
    }

    pub fn linear_op(&mut self, inputs: &[Var], op: Arc<dyn LinearOp<T>>) -> Var {
        let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
        let y = op.apply(&vals);
        debug_assert_eq!(y.shape(), op.output_shape().as_slice());
        let rg = inputs.iter().any(|v| self.rg(*v));
        self.push(y, Op::Linear { inputs: inputs.to_vec(), op }, rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(y, Op::Reshape { x }, rg))
    }

    /// Backpropagates from a scalar root.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return shape_err("backward() needs a scalar root; use backward_with for tensors");
        }
        self.backward_with(root, Tensor::full(self.value(root).shape(), T::one()))
    }

    /// Backpropagates an explicit output gradient `seed` from `root`.
    pub fn backward_with(&mut self, root: Var, seed: Tensor<T>) -> Result<()> {
        if seed.shape() != self.value(root).shape() {
            return shape_err("seed gradient shape differs from root");
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        self.grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            let contributions = self.node_adjoint(i, &g);
            self.grads[i] = Some(g);
            for (v, dv) in contributions {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.grads[v.0] {
                    Some(acc) => acc.add_assign(&dv),
                    slot @ None => *slot = Some(dv),
                }
            }
        }
        Ok(())
    }

    fn node_adjoint(&self, i: usize, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let node = &self.nodes[i];
        let like = |v: Var, data: Vec<T>| Tensor::from_vec(self.value(v).shape(), data).expect("adjoint shape");
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let grads = kernels::conv_backward(self.value(*x).data(), self.value(*w).data(), g.data(), geom, self.rg(*x));
                if let Some(dx) = grads.dx {
                    out.push((*x, like(*x, dx)));
                }
                out.push((*w, like(*w, grads.dw)));
                if let Some(b) = b {
                    out.push((*b, like(*b, grads.db)));
                }
            }
            Op::UpConv { x, w, b, geom } => {
                let grads = kernels::upconv_backward(self.value(*x).data(), self.value(*w).data(), g.data(), geom, self.rg(*x));
                if let Some(dx) = grads.dx {
                    out.push((*x, like(*x, dx)));
                }
                out.push((*w, like(*w, grads.dw)));
                if let Some(b) = b {
                    out.push((*b, like(*b, grads.db)));
                }
            }
            Op::MaxPool { x, argmax } => {
                let s = self.value(*x).shape();
                let planes = s[0] * s[1];
                let dx = kernels::maxpool_backward(g.data(), argmax, planes, self.value(*x).numel() / planes);
                out.push((*x, like(*x, dx)));
            }
            Op::AvgPoolSame { x, planes, extents, window } => {
                out.push((*x, like(*x, kernels::avgpool_same(g.data(), *planes, *extents, *window, true))));
            }
            Op::Relu { x } => {
                let y = node.value.data();
                let dx = g.data().iter().zip(y).map(|(g, y)| if *y > T::zero() { *g } else { T::zero() }).collect();
                out.push((*x, like(*x, dx)));
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                let dx = g.data().iter().zip(y).map(|(g, y)| *g * *y * (T::one() - *y)).collect();
                out.push((*x, like(*x, dx)));
            }
            Op::Concat { a, b } => {
                let n = node.value.shape()[0];
                let (pa, pb) = (self.value(*a).numel() / n, self.value(*b).numel() / n);
                let (mut da, mut db) = (Vec::with_capacity(n * pa), Vec::with_capacity(n * pb));
                for k in 0..n {
                    let row = &g.data()[k * (pa + pb)..(k + 1) * (pa + pb)];
                    da.extend_from_slice(&row[..pa]);
                    db.extend_from_slice(&row[pa..]);
                }
                out.push((*a, like(*a, da)));
                out.push((*b, like(*b, db)));
            }
            Op::AddScalar { x, s } => {
                out.push((*x, g.clone()));
                out.push((*s, like(*s, vec![T::of(g.sum_f64())])));
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                let xs = self.value(*x).shape();
                let (n, c) = (xs[0], xs[1]);
                let s = node.value.numel() / (n * c);
                let m = (n * s) as f64;
                let gm = self.value(*gamma).data();
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for k in 0..n {
                    for ch in 0..c {
                        let off = (k * c + ch) * s;
                        for j in off..off + s {
                            dgamma[ch] += (g.data()[j] * xhat[j]).f64();
                            dbeta[ch] += g.data()[j].f64();
                        }
                    }
                }
                let mut dx = vec![T::zero(); node.value.numel()];
                for k in 0..n {
                    for ch in 0..c {
                        let off = (k * c + ch) * s;
                        let scale = gm[ch] * inv_std[ch];
                        for j in off..off + s {
                            dx[j] = if *batch_stats {
                                scale * T::of((m * g.data()[j].f64() - dbeta[ch] - xhat[j].f64() * dgamma[ch]) / m)
                            } else {
                                scale * g.data()[j]
                            };
                        }
                    }
                }
                out.push((*x, like(*x, dx)));
                out.push((*gamma, like(*gamma, dgamma.into_iter().map(T::of).collect())));
                out.push((*beta, like(*beta, dbeta.into_iter().map(T::of).collect())));
            }
            Op::Dropout { x, mask } => {
                let dx = g.data().iter().zip(mask).map(|(g, m)| *g * *m).collect();
                out.push((*x, like(*x, dx)));
            }
            Op::Dice { pred, truth, inter, denom } => {
                let up = g.data()[0].f64();
                let d2 = denom * denom;
                let dx = truth.iter().map(|y| T::of(-2.0 * up * (y.f64() * denom - inter) / d2)).collect();
                out.push((*pred, like(*pred, dx)));
            }
            Op::Dense { x, w, b } => {
                let (xs, ws) = (self.value(*x).shape(), self.value(*w).shape());
                let (n, fin, fout) = (xs[0], xs[1], ws[0]);
                let gm = crate::tensor::MatRef::new(g.data(), n, fout);
                let mut dx = vec![T::zero(); n * fin];
                crate::tensor::gemm(gm, crate::tensor::MatRef::new(self.value(*w).data(), fout, fin), T::zero(), &mut dx);
                let mut dw = vec![T::zero(); fout * fin];
                crate::tensor::gemm(gm.t(), crate::tensor::MatRef::new(self.value(*x).data(), n, fin), T::zero(), &mut dw);
                out.push((*x, like(*x, dx)));
                out.push((*w, like(*w, dw)));
                if let Some(b) = b {
                    let db = (0..fout).map(|j| (0..n).map(|k| g.data()[k * fout + j]).sum()).collect();
                    out.push((*b, like(*b, db)));
                }
            }
            Op::WeightedSum { x, weights } => {
                let up = g.data()[0];
                out.push((*x, weights.map(|w| *w * up)));
            }
            Op::Linear { inputs, op } => {
                for (v, dv) in inputs.iter().zip(op.adjoint(g)) {
                    out.push((*v, dv));
                }
            }
            Op::Reshape { x } => {
                out.push((*x, like(*x, g.data().to_vec())));
            }
        }
        out
    }
}

/// Returns `(sum(y*p), denominator)` with the empty-empty guard applied.
pub fn dice_sums<T: Real>(pred: &[T], truth: &[T]) -> (f64, f64) {
    let mut inter = 0.0;
    let mut sp = 0.0;
    let mut st = 0.0;
    for (p, y) in pred.iter().zip(truth) {
        let (p, y) = (p.f64(), y.f64());
        inter += p * y;
        sp += p;
        st += y;
    }
    let denom = sp + st;
    (inter, if denom == 0.0 { DICE_EPS } else { denom })
}

pub const DICE_EPS: f64 = 1e-6;
