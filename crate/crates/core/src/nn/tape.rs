//! Reverse-mode automatic differentiation over whole tensors.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to run its backward pass. [`Tape::backward`] walks the nodes in
//! reverse and accumulates gradients into every node that (transitively)
//! depends on a leaf with `requires_grad`.

use std::collections::HashMap;

use rayon::prelude::*;

use super::direct::{self, padded_width, pad_into, Corr, Phased, CB, XT};
use super::tensor::{gemm, Parameterized, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Output size and leading pad for "same" padding with ceil-mode output.
pub fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, total / 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub oh: usize,
    pub ow: usize,
    pub pad_t: usize,
    pub pad_l: usize,
}

impl ConvGeom {
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: (usize, usize)) -> Result<Self> {
        let (&[n, cin, h, w], &[cout, wcin, kh, kw]) = (x_shape, w_shape) else {
            return Err(Error::ShapeMismatch(format!(
                "conv2d expects 4-d input and kernel, got {x_shape:?} and {w_shape:?}"
            )));
        };
        if cin != wcin {
            return Err(Error::ShapeMismatch(format!(
                "conv2d input has {cin} channels, kernel expects {wcin}"
            )));
        }
        if kh == 0 || kw == 0 || stride.0 == 0 || stride.1 == 0 || h == 0 || w == 0 {
            return Err(Error::ShapeMismatch("conv2d with a zero extent".into()));
        }
        let (oh, pad_t) = same_padding(h, kh, stride.0);
        let (ow, pad_l) = same_padding(w, kw, stride.1);
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            sh: stride.0,
            sw: stride.1,
            oh,
            ow,
            pad_t,
            pad_l,
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.oh * self.ow
    }
}

/// Output columns whose input column `ox * sw + j - pad_l` lies in `0..w`.
fn valid_cols(g: &ConvGeom, j: usize) -> (usize, usize) {
    let lo = if g.pad_l > j { (g.pad_l - j).div_ceil(g.sw) } else { 0 };
    let hi = if g.w + g.pad_l > j {
        ((g.w + g.pad_l - j - 1) / g.sw + 1).min(g.ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.positions();
    for j in 0..g.kw {
        let (lo, hi) = valid_cols(g, j);
        let ix0 = (lo * g.sw + j).wrapping_sub(g.pad_l);
        for c in 0..g.cin {
            for i in 0..g.kh {
                let row = ((c * g.kh + i) * g.kw + j) * p;
                for oy in 0..g.oh {
                    let dst = &mut cols[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let iy = (oy * g.sh + i) as isize - g.pad_t as isize;
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..][..g.w];
                    dst[..lo].fill(T::zero());
                    dst[hi..].fill(T::zero());
                    if g.sw == 1 {
                        dst[lo..hi].copy_from_slice(&src[ix0..ix0 + hi - lo]);
                    } else {
                        for (d, s) in dst[lo..hi].iter_mut().zip(src[ix0..].iter().step_by(g.sw)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.positions();
    for j in 0..g.kw {
        let (lo, hi) = valid_cols(g, j);
        if lo == hi {
            continue;
        }
        let ix0 = (lo * g.sw + j).wrapping_sub(g.pad_l);
        for c in 0..g.cin {
            for i in 0..g.kh {
                let row = ((c * g.kh + i) * g.kw + j) * p;
                for oy in 0..g.oh {
                    let iy = (oy * g.sh + i) as isize - g.pad_t as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.ow + lo..row + oy * g.ow + hi];
                    let dst = &mut dx[(c * g.h + iy as usize) * g.w..][..g.w];
                    if g.sw == 1 {
                        for (d, s) in dst[ix0..ix0 + hi - lo].iter_mut().zip(src) {
                            *d += *s;
                        }
                    } else {
                        for (d, s) in dst[ix0..].iter_mut().step_by(g.sw).zip(src) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    Relu(Var),
    Scale(Var, T),
    Add(Var, Var),
    AddChannel {
        x: Var,
        bias: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    AddConst(Var),
    Mse {
        pred: Var,
        label: Vec<T>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a forward computation for later differentiation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<u64, Var>,
    grads: Vec<Option<Vec<T>>>,
    pending_stats: Vec<PendingStats<T>>,
}

/// Batch statistics observed in train mode, to be folded into a layer's
/// running buffers by [`Tape::apply_running_stats`].
struct PendingStats<T> {
    mean_id: u64,
    var_id: u64,
    momentum: f64,
    mean: Vec<T>,
    var: Vec<T>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            grads: Vec::new(),
            pending_stats: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Places a tensor on the tape. Registering the same tensor twice returns
    /// the same leaf, so shared weights accumulate into one gradient.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&t.id()) {
            return v;
        }
        let v = self.push(t.shape().to_vec(), t.data.clone(), Op::Leaf, t.requires_grad);
        self.params.insert(t.id(), v);
        v
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} values for shape {shape:?}",
                data.len()
            )));
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    /// Whether each ReLU input on the tape is positive, in recording order.
    pub fn relu_gates(&self) -> Vec<bool> {
        let mut gates = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                gates.extend(self.value(x).iter().map(|&v| v > T::zero()));
            }
        }
        gates
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Gradient of the last [`backward`](Self::backward) output with respect
    /// to a leaf. Intermediate gradients are released during the sweep.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn grad_of(&self, t: &Tensor<T>) -> Option<&[T]> {
        self.params.get(&t.id()).and_then(|&v| self.grad(v))
    }

    /// Adds this tape's leaf gradients into the `grad` accumulators of every
    /// trainable tensor of `model` that took part in the computation.
    pub fn collect_grads<M: Parameterized<T> + ?Sized>(&self, model: &mut M) {
        model.visit("", &mut |_, t| {
            if t.requires_grad {
                if let Some(g) = self.grad_of(t) {
                    t.accumulate_grad(g);
                }
            }
        });
    }

    /// Queues a running-statistics update for the buffers `running_mean` and
    /// `running_var`: `r <- momentum * r + (1 - momentum) * batch`.
    pub fn record_batch_stats(
        &mut self,
        running_mean: &Tensor<T>,
        running_var: &Tensor<T>,
        momentum: f64,
        mean: Vec<T>,
        var: Vec<T>,
    ) {
        self.pending_stats.push(PendingStats {
            mean_id: running_mean.id(),
            var_id: running_var.id(),
            momentum,
            mean,
            var,
        });
    }

    /// Applies every queued running-statistics update to `model`, in the
    /// order the forward pass produced them, and clears the queue.
    pub fn apply_running_stats<M: Parameterized<T> + ?Sized>(&mut self, model: &mut M) {
        let pending = std::mem::take(&mut self.pending_stats);
        for p in &pending {
            let keep = T::of(p.momentum);
            let take = T::one() - keep;
            model.visit("", &mut |_, t| {
                let batch = if t.id() == p.mean_id {
                    &p.mean
                } else if t.id() == p.var_id {
                    &p.var
                } else {
                    return;
                };
                for (r, b) in t.data.iter_mut().zip(batch) {
                    *r = keep * *r + take * *b;
                }
            });
        }
    }

    /// Cross-correlation with "same" padding and ceil-mode output.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: (usize, usize)) -> Result<Var> {
        let g = ConvGeom::new(self.shape(x), self.shape(w), stride)?;
        if self.shape(b) != [g.cout] {
            return Err(Error::ShapeMismatch(format!(
                "conv2d bias {:?} for {} output channels",
                self.shape(b),
                g.cout
            )));
        }
        let (k, p) = (g.patch(), g.positions());
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = self.value(b);
        let mut out = vec![T::zero(); g.n * g.cout * p];
        if let Some(ph) = Phased::new(&g) {
            let wt = ph.split_weights(wv);
            out.par_chunks_mut(g.cout * p)
                .zip(xv.par_chunks(g.cin * g.h * g.w))
                .for_each_init(Vec::new, |xs, (out_n, x_n)| {
                    ph.split_input(x_n, xs);
                    direct::correlate(&ph.corr, xs, &wt, out_n);
                    for (row, &bias) in out_n.chunks_mut(p).zip(bv) {
                        row.iter_mut().for_each(|o| *o += bias);
                    }
                });
        } else {
            out.par_chunks_mut(g.cout * p)
                .zip(xv.par_chunks(g.cin * g.h * g.w))
                .for_each_init(
                    || vec![T::zero(); k * p],
                    |cols, (out_n, x_n)| {
                        im2col(x_n, &g, cols);
                        gemm(false, false, g.cout, p, k, wv, cols, T::zero(), out_n);
                        for (row, &bias) in out_n.chunks_mut(p).zip(bv) {
                            row.iter_mut().for_each(|o| *o += bias);
                        }
                    },
                );
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(
            vec![g.n, g.cout, g.oh, g.ow],
            out,
            Op::Conv2d { x, w, b, geom: g },
            needs,
        ))
    }

    fn check_bn_params(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() != 4 {
            return Err(Error::ShapeMismatch(format!("batch norm expects 4-d input, got {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::ShapeMismatch(format!("batch norm parameters for {c} channels")));
        }
        Ok((n, c, hw))
    }

    /// Batch-statistics normalization per channel over `(N, H, W)` with the
    /// biased variance. Returns the output and the batch mean and variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (n, c, hw) = self.check_bn_params(x, gamma, beta)?;
        let m = n * hw;
        if m < 2 {
            return Err(Error::DegenerateBatch(m));
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let mut inv_std = vec![T::zero(); c];
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mf = T::of(m as f64);
        for ch in 0..c {
            let planes = (0..n).map(|i| (i * c + ch) * hw);
            let mut s = T::zero();
            for base in planes.clone() {
                s += xv[base..base + hw].iter().copied().sum::<T>();
            }
            let mu = s / mf;
            let mut sq = T::zero();
            for base in planes.clone() {
                sq += xv[base..base + hw].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
            }
            let sigma2 = sq / mf;
            let is = T::one() / (sigma2 + T::of(eps)).sqrt();
            for base in planes {
                for idx in base..base + hw {
                    let xh = (xv[idx] - mu) * is;
                    xhat[idx] = xh;
                    out[idx] = gv[ch] * xh + bv[ch];
                }
            }
            mean[ch] = mu;
            var[ch] = sigma2;
            inv_std[ch] = is;
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let shape = self.shape(x).to_vec();
        let v = self.push(
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: true,
            },
            needs,
        );
        Ok((v, mean, var))
    }

    /// Normalization with fixed statistics.
    pub fn batch_norm_infer(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, hw) = self.check_bn_params(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::ShapeMismatch("running statistics length".into()));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for idx in base..base + hw {
                    let xh = (xv[idx] - mean[ch]) * inv_std[ch];
                    xhat[idx] = xh;
                    out[idx] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: false,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(T::zero())).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(shape, out, Op::Relu(x), needs)
    }

    /// `c * x`.
    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        self.push(shape, out, Op::Scale(x, c), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(format!(
                "add {:?} + {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&p, &q)| p + q).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(shape, out, Op::Add(a, b), needs))
    }

    /// `x[n,c,h,w] + bias[n,c]` at every spatial location.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 4 || self.shape(bias) != [s[0], s[1]] {
            return Err(Error::ShapeMismatch(format!(
                "channel bias {:?} for feature map {s:?}",
                self.shape(bias)
            )));
        }
        let hw = s[2] * s[3];
        let bv = self.value(bias);
        let mut out = self.value(x).to_vec();
        for (plane, &b) in out.chunks_mut(hw).zip(bv) {
            plane.iter_mut().for_each(|v| *v += b);
        }
        let shape = s.to_vec();
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(shape, out, Op::AddChannel { x, bias }, needs))
    }

    /// `y = x·Wᵀ + b` for `x: [N, D]`, `W: [O, D]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (&[n, d], &[o, wd]) = (self.shape(x), self.shape(w)) else {
            return Err(Error::ShapeMismatch(format!(
                "linear expects 2-d input and weight, got {:?} and {:?}",
                self.shape(x),
                self.shape(w)
            )));
        };
        if d != wd || self.shape(b) != [o] {
            return Err(Error::ShapeMismatch(format!(
                "linear input dim {d}, weight {:?}, bias {:?}",
                self.shape(w),
                self.shape(b)
            )));
        }
        let mut out = vec![T::zero(); n * o];
        for row in out.chunks_mut(o) {
            row.copy_from_slice(self.value(b));
        }
        gemm(false, true, n, o, d, self.value(x), self.value(w), T::one(), &mut out);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(vec![n, o], out, Op::Linear { x, w, b }, needs))
    }

    /// Mean over the spatial axes: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] * s[3] == 0 {
            return Err(Error::ShapeMismatch(format!("global pool over {s:?}")));
        }
        let hw = s[2] * s[3];
        let scale = T::of(1.0 / hw as f64);
        let out = self
            .value(x)
            .chunks(hw)
            .map(|p| p.iter().copied().sum::<T>() * scale)
            .collect();
        let needs = self.needs(x);
        Ok(self.push(vec![s[0], s[1]], out, Op::GlobalAvgPool(x), needs))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape(x)
            )));
        }
        let out = self.value(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), needs))
    }

    /// `x + c` for a constant `c` of the same shape.
    pub fn add_const(&mut self, x: Var, c: &[T]) -> Result<Var> {
        if c.len() != self.value(x).len() {
            return Err(Error::ShapeMismatch(format!(
                "constant of {} values added to {:?}",
                c.len(),
                self.shape(x)
            )));
        }
        let out = self.value(x).iter().zip(c).map(|(&a, &b)| a + b).collect();
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x);
        Ok(self.push(shape, out, Op::AddConst(x), needs))
    }

    /// Mean over all elements of `(pred - label)^2`.
    pub fn mse(&mut self, pred: Var, label: &[T]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != label.len() {
            return Err(Error::ShapeMismatch(format!(
                "mse prediction has {} values, label {}",
                pv.len(),
                label.len()
            )));
        }
        let n = T::of(pv.len().max(1) as f64);
        let loss = pv.iter().zip(label).map(|(&p, &l)| (p - l) * (p - l)).sum::<T>() / n;
        let needs = self.needs(pred);
        Ok(self.push(
            vec![],
            vec![loss],
            Op::Mse {
                pred,
                label: label.to_vec(),
            },
            needs,
        ))
    }

    /// `Σ weights[i] * x[i]`, a convenient scalar probe for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: &[T]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(Error::ShapeMismatch("weighted sum length".into()));
        }
        let s = xv.iter().zip(weights).map(|(&a, &b)| a * b).sum();
        let needs = self.needs(x);
        Ok(self.push(
            vec![],
            vec![s],
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            needs,
        ))
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![T::one()]);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].needs_grad;
        let mut acc = |v: Var, contrib: Vec<T>| match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(a, b)| *a += *b),
            slot @ None => *slot = Some(contrib),
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let gm = *geom;
                let (k, p) = (gm.patch(), gm.positions());
                let xv = &nodes[x.0].value;
                let wv = &nodes[w.0].value;
                let need_x = needs(*x);
                let in_len = gm.cin * gm.h * gm.w;
                let mut dx = if need_x {
                    vec![T::zero(); xv.len()]
                } else {
                    Vec::new()
                };
                let need_w = needs(*w);
                let fwd = Phased::new(&gm);
                let owp = gm.ow.div_ceil(XT) * XT;
                // input gradient as a stride-1 correlation of the output gradient
                // with the flipped, channel-swapped kernel
                let back = (gm.sh == 1 && gm.sw == 1 && gm.cin % CB == 0).then(|| Corr {
                    sh: 1,
                    cin: gm.cout,
                    hp: gm.oh + gm.kh - 1,
                    wp: padded_width(gm.w, gm.kw),
                    cout: gm.cin,
                    kh: gm.kh,
                    kw: gm.kw,
                    oh: gm.h,
                    ow: gm.w,
                });
                let wflip = match (&back, need_x) {
                    (Some(_), true) => {
                        let mut f = vec![T::zero(); wv.len()];
                        for co in 0..gm.cout {
                            for ci in 0..gm.cin {
                                for i in 0..gm.kh {
                                    for j in 0..gm.kw {
                                        f[((co * gm.kh + i) * gm.kw + j) * gm.cin + ci] =
                                            wv[((co * gm.cin + ci) * gm.kh + (gm.kh - 1 - i)) * gm.kw + (gm.kw - 1 - j)];
                                    }
                                }
                            }
                        }
                        f
                    }
                    _ => Vec::new(),
                };
                let per_sample = |n: usize, dx_n: Option<&mut [T]>, buf: &mut (Vec<T>, Vec<T>)| {
                    let (xp, cols) = buf;
                    let g_n = &g[n * gm.cout * p..(n + 1) * gm.cout * p];
                    let x_n = &xv[n * in_len..(n + 1) * in_len];
                    let mut dw_n = Vec::new();
                    if need_w {
                        dw_n = vec![T::zero(); gm.cout * k];
                        if let Some(ph) = &fwd {
                            ph.split_input(x_n, xp);
                            pad_into(g_n, (gm.cout, gm.oh, gm.ow), (0, 0), (gm.oh, owp), cols);
                            ph.weight_grad(xp, cols, owp, &mut dw_n);
                        } else {
                            cols.resize(k * p, T::zero());
                            im2col(x_n, &gm, cols);
                            gemm(false, true, gm.cout, k, p, g_n, cols, T::zero(), &mut dw_n);
                        }
                    }
                    if let Some(dx_n) = dx_n {
                        if let Some(corr) = &back {
                            let top = (gm.kh - 1 - gm.pad_t, gm.kw - 1 - gm.pad_l);
                            pad_into(g_n, (gm.cout, gm.oh, gm.ow), top, (corr.hp, corr.wp), cols);
                            direct::correlate(corr, cols, &wflip, dx_n);
                        } else {
                            cols.resize(k * p, T::zero());
                            gemm(true, false, k, p, gm.cout, wv, g_n, T::zero(), cols);
                            col2im(cols, &gm, dx_n);
                        }
                    }
                    dw_n
                };
                let partial: Vec<Vec<T>> = if need_x {
                    dx.par_chunks_mut(in_len)
                        .enumerate()
                        .map_init(|| (Vec::new(), Vec::new()), |buf, (n, dx_n)| per_sample(n, Some(dx_n), buf))
                        .collect()
                } else {
                    (0..gm.n)
                        .into_par_iter()
                        .map_init(|| (Vec::new(), Vec::new()), |buf, n| per_sample(n, None, buf))
                        .collect()
                };
                if needs(*w) {
                    // fixed-order reduction keeps results independent of thread count
                    let mut dw = vec![T::zero(); gm.cout * k];
                    for part in &partial {
                        dw.iter_mut().zip(part).for_each(|(a, b)| *a += *b);
                    }
                    acc(*w, dw);
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); gm.cout];
                    for (j, plane) in g.chunks(p).enumerate() {
                        db[j % gm.cout] += plane.iter().copied().sum::<T>();
                    }
                    acc(*b, db);
                }
                if need_x {
                    acc(*x, dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let s = &nodes[i].shape;
                let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
                let gv = &nodes[gamma.0].value;
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for nn in 0..n {
                    for ch in 0..c {
                        let base = (nn * c + ch) * hw;
                        for idx in base..base + hw {
                            dgamma[ch] += g[idx] * xhat[idx];
                            dbeta[ch] += g[idx];
                        }
                    }
                }
                if needs(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    let m = T::of((n * hw) as f64);
                    for nn in 0..n {
                        for ch in 0..c {
                            let base = (nn * c + ch) * hw;
                            let scale = gv[ch] * inv_std[ch];
                            for idx in base..base + hw {
                                dx[idx] = if *train {
                                    scale / m * (m * g[idx] - dbeta[ch] - xhat[idx] * dgamma[ch])
                                } else {
                                    scale * g[idx]
                                };
                            }
                        }
                    }
                    acc(*x, dx);
                }
                if needs(*gamma) {
                    acc(*gamma, dgamma);
                }
                if needs(*beta) {
                    acc(*beta, dbeta);
                }
            }
            Op::Relu(x) => {
                let out = &nodes[i].value;
                let dx = g
                    .iter()
                    .zip(out)
                    .map(|(&d, &y)| if y > T::zero() { d } else { T::zero() })
                    .collect();
                acc(*x, dx);
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|&d| d * *c).collect()),
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, g.to_vec());
                }
                if needs(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::AddChannel { x, bias } => {
                if needs(*bias) {
                    let s = &nodes[i].shape;
                    let hw = s[2] * s[3];
                    acc(*bias, g.chunks(hw).map(|p| p.iter().copied().sum()).collect());
                }
                if needs(*x) {
                    acc(*x, g.to_vec());
                }
            }
            Op::Linear { x, w, b } => {
                let (n, d) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let o = nodes[w.0].shape[0];
                if needs(*w) {
                    let mut dw = vec![T::zero(); o * d];
                    gemm(true, false, o, d, n, g, &nodes[x.0].value, T::zero(), &mut dw);
                    acc(*w, dw);
                }
                if needs(*b) {
                    let mut db = vec![T::zero(); o];
                    for row in g.chunks(o) {
                        db.iter_mut().zip(row).for_each(|(a, r)| *a += *r);
                    }
                    acc(*b, db);
                }
                if needs(*x) {
                    let mut dx = vec![T::zero(); n * d];
                    gemm(false, false, n, d, o, g, &nodes[w.0].value, T::zero(), &mut dx);
                    acc(*x, dx);
                }
            }
            Op::GlobalAvgPool(x) => {
                let s = &nodes[x.0].shape;
                let hw = s[2] * s[3];
                let scale = T::of(1.0 / hw as f64);
                let mut dx = Vec::with_capacity(nodes[x.0].value.len());
                for &d in g {
                    dx.extend(std::iter::repeat_n(d * scale, hw));
                }
                acc(*x, dx);
            }
            Op::Reshape(x) | Op::AddConst(x) => acc(*x, g.to_vec()),
            Op::Mse { pred, label } => {
                let pv = &nodes[pred.0].value;
                let scale = g[0] * T::of(2.0 / pv.len().max(1) as f64);
                acc(*pred, pv.iter().zip(label).map(|(&p, &l)| scale * (p - l)).collect());
            }
            Op::WeightedSum { x, weights } => {
                acc(*x, weights.iter().map(|&r| r * g[0]).collect());
            }
        }
    }
}
