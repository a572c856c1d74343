//! Reverse-mode autodiff over a linear tape of layer-level operations.

use rand::Rng;
use rayon::prelude::*;

use super::param::{ParamId, ParamStore, StatsId};
use super::LayerMode;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Batch-norm variance epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic on each update.
pub const BN_MOMENTUM: f64 = 0.9;

/// Upper bound on the im2col scratch buffer, in elements.
const COL_BLOCK_ELEMS: usize = 1 << 21;

enum Op<T: Scalar> {
    Input,
    Param(ParamId),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    /// `argmax` holds, per pooled cell, the winning position in its
    /// `OH·OW` convolution plane.
    ConvReluPool {
        input: Var,
        kernel: Var,
        bias: Var,
        argmax: Vec<usize>,
    },
    GlobalMaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Dense {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Relu {
        input: Var,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        x_hat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Dropout {
        input: Var,
        mask: Vec<T>,
    },
    Reshape {
        input: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    label: Option<String>,
}

/// Records a forward pass so that it can be differentiated.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    mode: LayerMode,
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn q(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn p(&self) -> usize {
        self.oh * self.ow
    }
    /// Output rows handled per im2col block.
    fn rows_per_block(&self) -> usize {
        (COL_BLOCK_ELEMS / (self.q() * self.ow).max(1)).clamp(1, self.oh)
    }
}

/// Unfold output rows `r0..r1` of one sample into a `Q × (rows·OW)` matrix.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, r0: usize, r1: usize, col: &mut [T]) {
    let pc = (r1 - r0) * g.ow;
    let mut q = 0;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let dst = &mut col[q * pc..(q + 1) * pc];
                for (r, oh) in (r0..r1).enumerate() {
                    let src = &plane[(oh + i) * g.w + j..(oh + i) * g.w + j + g.ow];
                    dst[r * g.ow..(r + 1) * g.ow].copy_from_slice(src);
                }
                q += 1;
            }
        }
    }
}

/// Fold a `Q × (rows·OW)` gradient block back onto the input sample.
fn col2im_add<T: Scalar>(dcol: &[T], g: &ConvGeom, r0: usize, r1: usize, dx: &mut [T]) {
    let pc = (r1 - r0) * g.ow;
    let mut q = 0;
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let src = &dcol[q * pc..(q + 1) * pc];
                for (r, oh) in (r0..r1).enumerate() {
                    let dst = &mut plane[(oh + i) * g.w + j..(oh + i) * g.w + j + g.ow];
                    for (d, &s) in dst.iter_mut().zip(&src[r * g.ow..(r + 1) * g.ow]) {
                        *d = *d + s;
                    }
                }
                q += 1;
            }
        }
    }
}

/// Convolve one sample into `out` (`K × OH·OW`), bias included.
fn conv_sample<T: Scalar>(xs: &[T], wt: &[T], bias: &[T], g: &ConvGeom, out: &mut [T]) {
    let (q, p) = (g.q(), g.p());
    let k = bias.len();
    let rows = g.rows_per_block();
    let mut col = vec![T::zero(); q * rows * g.ow];
    let mut r0 = 0;
    while r0 < g.oh {
        let r1 = (r0 + rows).min(g.oh);
        let pc = (r1 - r0) * g.ow;
        im2col(xs, g, r0, r1, &mut col);
        T::gemm(
            k,
            q,
            pc,
            T::one(),
            wt,
            (q as isize, 1),
            &col,
            (pc as isize, 1),
            T::zero(),
            &mut out[r0 * g.ow..],
            (p as isize, 1),
        );
        r0 = r1;
    }
    for (row, &bk) in out.chunks_mut(p).zip(bias) {
        for v in row {
            *v = *v + bk;
        }
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new(mode: LayerMode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
        }
    }

    pub fn mode(&self) -> LayerMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.dims()
    }

    /// Attach a name to a node for shape audits and debugging.
    pub fn label(&mut self, v: Var, name: impl Into<String>) {
        self.nodes[v.0].label = Some(name.into());
    }

    /// `(label, dims)` for every labeled node, in recording order.
    pub fn labeled_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.nodes
            .iter()
            .filter_map(|n| n.label.as_ref().map(|l| (l.clone(), n.value.dims().to_vec())))
            .collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            label: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; no gradient is propagated into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Snapshot a parameter onto the tape.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.param(id).value.clone(), Op::Param(id), true)
    }

    fn conv_geom(&self, input: Var, kernel: Var, bias: Var) -> Result<(usize, usize, ConvGeom)> {
        let (xd, wd, bd) = (self.dims(input), self.dims(kernel), self.dims(bias));
        if xd.len() != 4 || wd.len() != 4 || bd.len() != 1 {
            return Err(Error::invalid(format!(
                "conv2d expects rank-4 input and kernel and rank-1 bias, got {xd:?}, {wd:?}, {bd:?}"
            )));
        }
        let (b, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        let (k, kc, kh, kw) = (wd[0], wd[1], wd[2], wd[3]);
        if kc != c || bd[0] != k {
            return Err(Error::invalid(format!(
                "conv2d channel mismatch: input {xd:?}, kernel {wd:?}, bias {bd:?}"
            )));
        }
        if kh > h || kw > w || kh == 0 || kw == 0 {
            return Err(Error::invalid(format!(
                "conv2d kernel {kh}×{kw} does not fit input plane {h}×{w}"
            )));
        }
        let g = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            oh: h - kh + 1,
            ow: w - kw + 1,
        };
        Ok((b, k, g))
    }

    /// Valid, stride-1 cross-correlation: `B×C×H×W ⋆ K×C×kh×kw + bias → B×K×OH×OW`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (b, k, g) = self.conv_geom(input, kernel, bias)?;
        let (x, wt, bias_v) = (
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let sample = g.c * g.h * g.w;
        let mut out = Tensor::zeros(&[b, k, g.oh, g.ow]);
        out.data_mut()
            .par_chunks_mut(k * g.p())
            .enumerate()
            .for_each(|(s, out_s)| {
                conv_sample(&x[s * sample..(s + 1) * sample], wt, bias_v, &g, out_s)
            });
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                bias,
            },
            needs,
        ))
    }

    /// `maxpool2d(relu(conv2d(x)))` as one node. Only the pooled values and
    /// their argmax positions are kept, so the full convolution output never
    /// lives on the tape. Values and gradients equal the unfused composition.
    pub fn conv_relu_maxpool(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        pool_h: usize,
        pool_w: usize,
    ) -> Result<Var> {
        let (b, k, g) = self.conv_geom(input, kernel, bias)?;
        if pool_h == 0 || pool_w == 0 {
            return Err(Error::invalid("pool size must be positive"));
        }
        if pool_h > g.oh || pool_w > g.ow {
            return Err(Error::invalid(format!(
                "pool {pool_h}×{pool_w} larger than plane {}×{}",
                g.oh, g.ow
            )));
        }
        let (ph, pw) = (g.oh / pool_h, g.ow / pool_w);
        let cells = ph * pw;
        let (x, wt, bias_v) = (
            self.value(input).data(),
            self.value(kernel).data(),
            self.value(bias).data(),
        );
        let sample = g.c * g.h * g.w;
        let mut out = vec![T::zero(); b * k * cells];
        let mut argmax = vec![0usize; b * k * cells];
        out.par_chunks_mut(k * cells)
            .zip(argmax.par_chunks_mut(k * cells))
            .enumerate()
            .for_each(|(s, (out_s, arg_s))| {
                let mut conv = vec![T::zero(); k * g.p()];
                conv_sample(&x[s * sample..(s + 1) * sample], wt, bias_v, &g, &mut conv);
                for (kk, plane) in conv.chunks(g.p()).enumerate() {
                    for pr in 0..ph {
                        for pc in 0..pw {
                            let mut best = pr * pool_h * g.ow + pc * pool_w;
                            for i in 0..pool_h {
                                let row = (pr * pool_h + i) * g.ow + pc * pool_w;
                                for idx in row..row + pool_w {
                                    if plane[idx] > plane[best] {
                                        best = idx;
                                    }
                                }
                            }
                            let cell = kk * cells + pr * pw + pc;
                            arg_s[cell] = best;
                            out_s[cell] = plane[best].max(T::zero());
                        }
                    }
                }
            });
        let value = Tensor::new(vec![b, k, ph, pw], out)?;
        let needs = self.needs(input) || self.needs(kernel) || self.needs(bias);
        Ok(self.push(
            value,
            Op::ConvReluPool {
                input,
                kernel,
                bias,
                argmax,
            },
            needs,
        ))
    }

    /// Non-overlapping max pooling; trailing rows/columns that do not fill a
    /// window are discarded. Ties go to the first element in row-major order.
    pub fn maxpool2d(&mut self, input: Var, pool_h: usize, pool_w: usize) -> Result<Var> {
        let xd = self.dims(input).to_vec();
        if xd.len() != 4 {
            return Err(Error::invalid(format!("maxpool2d expects rank 4, got {xd:?}")));
        }
        let (b, k, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        if pool_h == 0 || pool_w == 0 {
            return Err(Error::invalid("pool size must be positive"));
        }
        if pool_h > h || pool_w > w {
            return Err(Error::invalid(format!(
                "pool {pool_h}×{pool_w} larger than plane {h}×{w}"
            )));
        }
        let (oh, ow) = (h / pool_h, w / pool_w);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * k * oh * ow);
        let mut argmax = Vec::with_capacity(b * k * oh * ow);
        for plane in 0..b * k {
            let base = plane * h * w;
            for pr in 0..oh {
                for pc in 0..ow {
                    let mut best = base + pr * pool_h * w + pc * pool_w;
                    for i in 0..pool_h {
                        let row = base + (pr * pool_h + i) * w + pc * pool_w;
                        for idx in row..row + pool_w {
                            if x[idx] > x[best] {
                                best = idx;
                            }
                        }
                    }
                    argmax.push(best);
                    out.push(x[best]);
                }
            }
        }
        let value = Tensor::new(vec![b, k, oh, ow], out)?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::MaxPool2d { input, argmax }, needs))
    }

    /// Max over the height axis of a `B×K×H×1` tensor, giving `B×K`.
    pub fn global_maxpool(&mut self, input: Var) -> Result<Var> {
        let xd = self.dims(input).to_vec();
        if xd.len() != 4 || xd[3] != 1 {
            return Err(Error::invalid(format!(
                "global_maxpool expects B×K×H×1, got {xd:?}"
            )));
        }
        let (b, k, h) = (xd[0], xd[1], xd[2]);
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * k);
        let mut argmax = Vec::with_capacity(b * k);
        for plane in 0..b * k {
            let base = plane * h;
            let mut best = base;
            for idx in base + 1..base + h {
                if x[idx] > x[best] {
                    best = idx;
                }
            }
            argmax.push(best);
            out.push(x[best]);
        }
        let value = Tensor::new(vec![b, k], out)?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::GlobalMaxPool { input, argmax }, needs))
    }

    /// Affine map `B×N → B×M` with weight `M×N` and bias `M`.
    pub fn dense(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xd, wd, bd) = (self.dims(input), self.dims(weight), self.dims(bias));
        if xd.len() != 2 || wd.len() != 2 || bd.len() != 1 || xd[1] != wd[1] || bd[0] != wd[0] {
            return Err(Error::invalid(format!(
                "dense dimension mismatch: input {xd:?}, weight {wd:?}, bias {bd:?}"
            )));
        }
        let (b, n, m) = (xd[0], xd[1], wd[0]);
        let mut out = Tensor::zeros(&[b, m]);
        T::gemm(
            b,
            n,
            m,
            T::one(),
            self.value(input).data(),
            (n as isize, 1),
            self.value(weight).data(),
            (1, n as isize),
            T::zero(),
            out.data_mut(),
            (m as isize, 1),
        );
        let bias_v = self.value(bias).data();
        for row in out.data_mut().chunks_mut(m) {
            for (v, &bb) in row.iter_mut().zip(bias_v) {
                *v = *v + bb;
            }
        }
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        Ok(self.push(
            out,
            Op::Dense {
                input,
                weight,
                bias,
            },
            needs,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let value = self.value(input).map(|v| v.max(T::zero()));
        let needs = self.needs(input);
        self.push(value, Op::Relu { input }, needs)
    }

    /// Batch normalization over the batch axis of a `B×N` tensor.
    ///
    /// In [`LayerMode::Train`] the batch statistics normalize the input and
    /// are folded into the running statistics; in [`LayerMode::Eval`] the
    /// running statistics are used.
    pub fn batch_norm(
        &mut self,
        store: &mut ParamStore<T>,
        input: Var,
        gamma: Var,
        beta: Var,
        stats: StatsId,
    ) -> Result<Var> {
        let xd = self.dims(input).to_vec();
        if xd.len() != 2 {
            return Err(Error::invalid(format!("batch_norm expects B×N, got {xd:?}")));
        }
        let (b, n) = (xd[0], xd[1]);
        if self.dims(gamma) != [n] || self.dims(beta) != [n] {
            return Err(Error::invalid("batch_norm scale/shift size mismatch"));
        }
        let eps = T::from_f64(BN_EPS);
        let x = self.value(input).data();
        let running = store.stats_mut(stats);
        if running.mean.len() != n {
            return Err(Error::invalid("batch_norm running stats size mismatch"));
        }
        let batch_stats = self.mode == LayerMode::Train;
        let (mean, var) = if batch_stats {
            if b < 2 {
                return Err(Error::invalid(
                    "batch_norm in training mode needs a batch of at least 2",
                ));
            }
            let bf = T::from_f64(b as f64);
            let mut mean = vec![T::zero(); n];
            let mut var = vec![T::zero(); n];
            for row in x.chunks(n) {
                for (m, &v) in mean.iter_mut().zip(row) {
                    *m = *m + v;
                }
            }
            mean.iter_mut().for_each(|m| *m = *m / bf);
            for row in x.chunks(n) {
                for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                    *s = *s + (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s = *s / bf);
            let momentum = T::from_f64(BN_MOMENTUM);
            let unbias = T::from_f64(b as f64 / (b as f64 - 1.0));
            for j in 0..n {
                running.mean[j] = momentum * running.mean[j] + (T::one() - momentum) * mean[j];
                running.var[j] =
                    momentum * running.var[j] + (T::one() - momentum) * var[j] * unbias;
            }
            (mean, var)
        } else {
            (running.mean.clone(), running.var.clone())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut x_hat = Vec::with_capacity(b * n);
        let mut out = Vec::with_capacity(b * n);
        for row in x.chunks(n) {
            for j in 0..n {
                let xh = (row[j] - mean[j]) * inv_std[j];
                x_hat.push(xh);
                out.push(g[j] * xh + be[j]);
            }
        }
        let value = Tensor::new(vec![b, n], out)?;
        let needs = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                x_hat,
                inv_std,
                batch_stats,
            },
            needs,
        ))
    }

    /// Inverted dropout: in training, zero each entry with probability `rate`
    /// and scale survivors by `1/(1−rate)`; identity in evaluation.
    pub fn dropout<R: Rng + ?Sized>(&mut self, input: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if self.mode == LayerMode::Eval || rate == 0.0 {
            return Ok(input);
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let x = self.value(input);
        let mask: Vec<T> = (0..x.len())
            .map(|_| if rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let value = Tensor::new(
            x.dims().to_vec(),
            x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect(),
        )?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::Dropout { input, mask }, needs))
    }

    pub fn reshape(&mut self, input: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshape(dims)?;
        let needs = self.needs(input);
        Ok(self.push(value, Op::Reshape { input }, needs))
    }

    /// `B×…` → `B×rest`.
    pub fn flatten(&mut self, input: Var) -> Result<Var> {
        let d = self.dims(input);
        let b = d[0];
        let rest = d[1..].iter().product();
        self.reshape(input, &[b, rest])
    }

    /// Concatenate `B×n_i` tensors along the feature axis.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::invalid("concat needs at least one input"))?;
        let b = self.dims(first)[0];
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let d = self.dims(v);
            if d.len() != 2 || d[0] != b {
                return Err(Error::invalid(format!(
                    "concat inputs must all be {b}×n, got {d:?}"
                )));
            }
            widths.push(d[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(b * total);
        for r in 0..b {
            for (&v, &wd) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[r * wd..(r + 1) * wd]);
            }
        }
        let value = Tensor::new(vec![b, total], out)?;
        let needs = inputs.iter().any(|&v| self.needs(v));
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            needs,
        ))
    }

    /// Hash of every discrete branch taken in the forward pass (ReLU signs and
    /// pooling argmaxes). Two passes with equal signatures lie on the same
    /// smooth piece of the loss surface.
    pub fn branch_signature(&self) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |v: u64| {
            h ^= v;
            h = h.wrapping_mul(PRIME);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu { input } => {
                    for &v in self.value(*input).data() {
                        mix((v > T::zero()) as u64);
                    }
                }
                Op::MaxPool2d { argmax, .. } | Op::GlobalMaxPool { argmax, .. } => {
                    for &i in argmax {
                        mix(i as u64);
                    }
                }
                Op::ConvReluPool { argmax, .. } => {
                    for (&i, &v) in argmax.iter().zip(node.value.data()) {
                        mix(i as u64);
                        mix((v > T::zero()) as u64);
                    }
                }
                _ => {}
            }
        }
        h
    }

    /// Back-propagate `seed` (the gradient of some scalar with respect to
    /// `root`) through the tape, accumulating parameter gradients into `store`.
    pub fn backward(&self, root: Var, seed: Tensor<T>, store: &mut ParamStore<T>) -> Result<()> {
        if seed.dims() != self.dims(root) {
            return Err(Error::invalid(format!(
                "seed gradient {:?} does not match root {:?}",
                seed.dims(),
                self.dims(root)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(seed);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    store.param_mut(*id).grad.add_assign(&g);
                }
                Op::Conv2d {
                    input,
                    kernel,
                    bias,
                } => self.conv2d_backward(&mut grads, &g, *input, *kernel, *bias),
                Op::ConvReluPool {
                    input,
                    kernel,
                    bias,
                    argmax,
                } => self.conv_relu_pool_backward(&mut grads, &g, &node.value, argmax, [*input, *kernel, *bias]),
                Op::MaxPool2d { input, argmax } | Op::GlobalMaxPool { input, argmax } => {
                    if self.needs(*input) {
                        let mut dx = Tensor::zeros(self.dims(*input));
                        let d = dx.data_mut();
                        for (&src, &gv) in argmax.iter().zip(g.data()) {
                            d[src] = d[src] + gv;
                        }
                        accumulate(&mut grads, *input, dx);
                    }
                }
                Op::Dense {
                    input,
                    weight,
                    bias,
                } => self.dense_backward(&mut grads, &g, *input, *weight, *bias),
                Op::Relu { input } => {
                    if self.needs(*input) {
                        let x = self.value(*input);
                        let dx = Tensor::new(
                            x.dims().to_vec(),
                            x.data()
                                .iter()
                                .zip(g.data())
                                .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                                .collect(),
                        )?;
                        accumulate(&mut grads, *input, dx);
                    }
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    x_hat,
                    inv_std,
                    batch_stats,
                } => {
                    let d = self.dims(*input);
                    let (b, n) = (d[0], d[1]);
                    let gv = g.data();
                    if self.needs(*gamma) || self.needs(*beta) {
                        let mut dgamma = Tensor::zeros(&[n]);
                        let mut dbeta = Tensor::zeros(&[n]);
                        for r in 0..b {
                            for j in 0..n {
                                let gij = gv[r * n + j];
                                dgamma.data_mut()[j] = dgamma.data()[j] + gij * x_hat[r * n + j];
                                dbeta.data_mut()[j] = dbeta.data()[j] + gij;
                            }
                        }
                        accumulate(&mut grads, *gamma, dgamma);
                        accumulate(&mut grads, *beta, dbeta);
                    }
                    if self.needs(*input) {
                        let gam = self.value(*gamma).data();
                        let mut dx = vec![T::zero(); b * n];
                        if *batch_stats {
                            let bf = T::from_f64(b as f64);
                            for j in 0..n {
                                let mut sum_d = T::zero();
                                let mut sum_dx = T::zero();
                                for r in 0..b {
                                    let dxh = gv[r * n + j] * gam[j];
                                    sum_d = sum_d + dxh;
                                    sum_dx = sum_dx + dxh * x_hat[r * n + j];
                                }
                                for r in 0..b {
                                    let dxh = gv[r * n + j] * gam[j];
                                    dx[r * n + j] = inv_std[j] / bf
                                        * (bf * dxh - sum_d - x_hat[r * n + j] * sum_dx);
                                }
                            }
                        } else {
                            for r in 0..b {
                                for j in 0..n {
                                    dx[r * n + j] = gv[r * n + j] * gam[j] * inv_std[j];
                                }
                            }
                        }
                        accumulate(&mut grads, *input, Tensor::new(vec![b, n], dx)?);
                    }
                }
                Op::Dropout { input, mask } => {
                    if self.needs(*input) {
                        let dx = Tensor::new(
                            g.dims().to_vec(),
                            g.data().iter().zip(mask).map(|(&gv, &m)| gv * m).collect(),
                        )?;
                        accumulate(&mut grads, *input, dx);
                    }
                }
                Op::Reshape { input } => {
                    if self.needs(*input) {
                        let dx = g.reshape(self.dims(*input))?;
                        accumulate(&mut grads, *input, dx);
                    }
                }
                Op::Concat { inputs } => {
                    let b = g.dims()[0];
                    let total = g.dims()[1];
                    let mut offset = 0;
                    for &v in inputs {
                        let wd = self.dims(v)[1];
                        if self.needs(v) {
                            let mut part = Vec::with_capacity(b * wd);
                            for r in 0..b {
                                part.extend_from_slice(
                                    &g.data()[r * total + offset..r * total + offset + wd],
                                );
                            }
                            accumulate(&mut grads, v, Tensor::new(vec![b, wd], part)?);
                        }
                        offset += wd;
                    }
                }
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &self,
        grads: &mut [Option<Tensor<T>>],
        g: &Tensor<T>,
        input: Var,
        kernel: Var,
        bias: Var,
    ) {
        let xd = self.dims(input);
        let wd = self.dims(kernel);
        let (b, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        let (k, kh, kw) = (wd[0], wd[2], wd[3]);
        let geom = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            oh: h - kh + 1,
            ow: w - kw + 1,
        };
        let (q, p) = (geom.q(), geom.p());
        let want_dx = self.needs(input);
        let want_dw = self.needs(kernel);
        let x = self.value(input).data();
        let wt = self.value(kernel).data();
        let gd = g.data();

        // Per-sample partials, reduced afterwards in sample order so the
        // result does not depend on scheduling.
        let partials: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..b)
            .into_par_iter()
            .map(|s| {
                let xs = &x[s * c * h * w..(s + 1) * c * h * w];
                let gs = &gd[s * k * p..(s + 1) * k * p];
                let mut dw = if want_dw { vec![T::zero(); k * q] } else { Vec::new() };
                let mut dx = if want_dx { vec![T::zero(); c * h * w] } else { Vec::new() };
                let db: Vec<T> = gs.chunks(p).map(|row| row.iter().copied().sum()).collect();
                let rows = geom.rows_per_block();
                let mut col = vec![T::zero(); q * rows * geom.ow];
                let mut r0 = 0;
                while r0 < geom.oh {
                    let r1 = (r0 + rows).min(geom.oh);
                    let pc = (r1 - r0) * geom.ow;
                    let gblock = &gs[r0 * geom.ow..];
                    if want_dw {
                        im2col(xs, &geom, r0, r1, &mut col);
                        T::gemm(
                            k,
                            pc,
                            q,
                            T::one(),
                            gblock,
                            (p as isize, 1),
                            &col,
                            (1, pc as isize),
                            T::one(),
                            &mut dw,
                            (q as isize, 1),
                        );
                    }
                    if want_dx {
                        let dcol = &mut col[..q * pc];
                        T::gemm(
                            q,
                            k,
                            pc,
                            T::one(),
                            wt,
                            (1, q as isize),
                            gblock,
                            (p as isize, 1),
                            T::zero(),
                            dcol,
                            (pc as isize, 1),
                        );
                        col2im_add(dcol, &geom, r0, r1, &mut dx);
                    }
                    r0 = r1;
                }
                (dw, db, dx)
            })
            .collect();

        self.reduce_conv_partials(grads, partials, [input, kernel, bias]);
    }

    /// Only pooled winners with a positive activation carry gradient, so the
    /// backward pass visits `K·cells` kernel windows per sample.
    fn conv_relu_pool_backward(
        &self,
        grads: &mut [Option<Tensor<T>>],
        g: &Tensor<T>,
        pooled: &Tensor<T>,
        argmax: &[usize],
        [input, kernel, bias]: [Var; 3],
    ) {
        let (b, k, geom) = self.conv_geom(input, kernel, bias).expect("validated in forward");
        let cells = pooled.dims()[2] * pooled.dims()[3];
        let (c, h, w, kh, kw) = (geom.c, geom.h, geom.w, geom.kh, geom.kw);
        let q = geom.q();
        let want_dx = self.needs(input);
        let want_dw = self.needs(kernel);
        let x = self.value(input).data();
        let wt = self.value(kernel).data();
        let (gd, pv) = (g.data(), pooled.data());

        let partials: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..b)
            .into_par_iter()
            .map(|s| {
                let xs = &x[s * c * h * w..(s + 1) * c * h * w];
                let mut dw = if want_dw { vec![T::zero(); k * q] } else { Vec::new() };
                let mut dx = if want_dx { vec![T::zero(); c * h * w] } else { Vec::new() };
                let mut db = vec![T::zero(); k];
                for kk in 0..k {
                    for cell in 0..cells {
                        let o = (s * k + kk) * cells + cell;
                        if pv[o] <= T::zero() {
                            continue;
                        }
                        let d = gd[o];
                        db[kk] = db[kk] + d;
                        let (r, col) = (argmax[o] / geom.ow, argmax[o] % geom.ow);
                        let wk = &wt[kk * q..(kk + 1) * q];
                        for ch in 0..c {
                            for i in 0..kh {
                                let xoff = ch * h * w + (r + i) * w + col;
                                let qoff = (ch * kh + i) * kw;
                                if want_dw {
                                    let dwk = &mut dw[kk * q + qoff..kk * q + qoff + kw];
                                    for (a, &xv) in dwk.iter_mut().zip(&xs[xoff..xoff + kw]) {
                                        *a = *a + d * xv;
                                    }
                                }
                                if want_dx {
                                    for (a, &wv) in dx[xoff..xoff + kw].iter_mut().zip(&wk[qoff..qoff + kw]) {
                                        *a = *a + d * wv;
                                    }
                                }
                            }
                        }
                    }
                }
                (dw, db, dx)
            })
            .collect();
        self.reduce_conv_partials(grads, partials, [input, kernel, bias]);
    }

    /// Sum per-sample partials in sample order so the result does not depend
    /// on scheduling, then accumulate them.
    fn reduce_conv_partials(
        &self,
        grads: &mut [Option<Tensor<T>>],
        partials: Vec<(Vec<T>, Vec<T>, Vec<T>)>,
        [input, kernel, bias]: [Var; 3],
    ) {
        if self.needs(kernel) {
            let mut dw = Tensor::zeros(self.dims(kernel));
            for (pw, _, _) in &partials {
                for (a, &v) in dw.data_mut().iter_mut().zip(pw) {
                    *a = *a + v;
                }
            }
            accumulate(grads, kernel, dw);
        }
        if self.needs(bias) {
            let mut db = Tensor::zeros(self.dims(bias));
            for (_, pb, _) in &partials {
                for (a, &v) in db.data_mut().iter_mut().zip(pb) {
                    *a = *a + v;
                }
            }
            accumulate(grads, bias, db);
        }
        if self.needs(input) {
            let mut data = Vec::with_capacity(self.value(input).len());
            for (_, _, px) in partials {
                data.extend(px);
            }
            let dx = Tensor::new(self.dims(input).to_vec(), data).expect("dims match");
            accumulate(grads, input, dx);
        }
    }

    fn dense_backward(
        &self,
        grads: &mut [Option<Tensor<T>>],
        g: &Tensor<T>,
        input: Var,
        weight: Var,
        bias: Var,
    ) {
        let (b, n) = (self.dims(input)[0], self.dims(input)[1]);
        let m = self.dims(weight)[0];
        let gd = g.data();
        if self.needs(input) {
            let mut dx = Tensor::zeros(&[b, n]);
            T::gemm(
                b,
                m,
                n,
                T::one(),
                gd,
                (m as isize, 1),
                self.value(weight).data(),
                (n as isize, 1),
                T::zero(),
                dx.data_mut(),
                (n as isize, 1),
            );
            accumulate(grads, input, dx);
        }
        if self.needs(weight) {
            let mut dw = Tensor::zeros(&[m, n]);
            T::gemm(
                m,
                b,
                n,
                T::one(),
                gd,
                (1, m as isize),
                self.value(input).data(),
                (n as isize, 1),
                T::zero(),
                dw.data_mut(),
                (n as isize, 1),
            );
            accumulate(grads, weight, dw);
        }
        if self.needs(bias) {
            let mut db = Tensor::zeros(&[m]);
            for row in gd.chunks(m) {
                for (a, &v) in db.data_mut().iter_mut().zip(row) {
                    *a = *a + v;
                }
            }
            accumulate(grads, bias, db);
        }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seed_rng;

    fn t(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_sums_window() {
        let mut tape = Tape::new(LayerMode::Eval);
        let x = tape.input(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = tape.input(Tensor::full(&[1, 1, 2, 2], 1.0));
        let b = tape.input(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b).unwrap();
        assert_eq!(tape.dims(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[10.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut tape = Tape::new(LayerMode::Eval);
        let data: Vec<f64> = (0..30).map(|v| v as f64 * 0.3 - 2.0).collect();
        let x = tape.input(t(&[2, 1, 3, 5], &data));
        let k = tape.input(Tensor::full(&[1, 1, 1, 1], 1.0));
        let b = tape.input(Tensor::zeros(&[1]));
        let y = tape.conv2d(x, k, b).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let mut tape = Tape::<f64>::new(LayerMode::Eval);
        let x = tape.input(Tensor::zeros(&[1, 1, 2, 2]));
        let k = tape.input(Tensor::zeros(&[1, 1, 3, 1]));
        let b = tape.input(Tensor::zeros(&[1]));
        assert!(matches!(tape.conv2d(x, k, b), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn maxpool_block_maxima_and_remainder() {
        let mut tape = Tape::new(LayerMode::Eval);
        let x = tape.input(Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64));
        let y = tape.maxpool2d(x, 2, 2).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, 7.0, 13.0, 15.0]);

        let x = tape.input(Tensor::zeros(&[1, 2, 117, 241]));
        let y = tape.maxpool2d(x, 58, 120).unwrap();
        assert_eq!(tape.dims(y), &[1, 2, 2, 2]);
        assert!(tape.maxpool2d(x, 0, 2).is_err());
    }

    #[test]
    fn maxpool_routes_one_per_window_first_on_ties() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::zeros(&[1, 1, 4, 6]));
        let mut tape = Tape::new(LayerMode::Train);
        let x = tape.param(&store, id);
        let y = tape.maxpool2d(x, 2, 3).unwrap();
        tape.backward(y, Tensor::full(&[1, 1, 2, 2], 1.0), &mut store)
            .unwrap();
        let g = &store.param(id).grad;
        assert_eq!(g.sum(), 4.0);
        for (r, c) in [(0, 0), (0, 3), (2, 0), (2, 3)] {
            assert_eq!(g.get(&[0, 0, r, c]), 1.0);
        }
    }

    #[test]
    fn fused_conv_pool_matches_composition() {
        let mut rng = seed_rng(8);
        for trial in 0..6 {
            let mut store = ParamStore::<f64>::new();
            let x = store.add("x", Tensor::from_fn(&[2, 2, 9, 11], |_| rng.gen_range(-1.0..1.0)));
            let k = store.add("k", Tensor::from_fn(&[3, 2, 3, 4], |_| rng.gen_range(-1.0..1.0)));
            let b = store.add("b", Tensor::from_fn(&[3], |_| rng.gen_range(-0.5..0.5)));
            let (ph, pw) = (1 + trial % 3, 2 + trial % 2);
            let seed = Tensor::from_fn(&[2, 3, 7 / ph, 8 / pw], |_| rng.gen_range(-1.0..1.0));

            let mut t1 = Tape::new(LayerMode::Train);
            let (xv, kv, bv) = (t1.param(&store, x), t1.param(&store, k), t1.param(&store, b));
            let fused = t1.conv_relu_maxpool(xv, kv, bv, ph, pw).unwrap();
            let mut s1 = store.clone();
            t1.backward(fused, seed.clone(), &mut s1).unwrap();

            let mut t2 = Tape::new(LayerMode::Train);
            let (xv, kv, bv) = (t2.param(&store, x), t2.param(&store, k), t2.param(&store, b));
            let c = t2.conv2d(xv, kv, bv).unwrap();
            let r = t2.relu(c);
            let p = t2.maxpool2d(r, ph, pw).unwrap();
            let mut s2 = store.clone();
            t2.backward(p, seed, &mut s2).unwrap();

            assert_eq!(t1.value(fused), t2.value(p));
            for (a, b) in s1.params().iter().zip(s2.params()) {
                for (u, v) in a.grad.data().iter().zip(b.grad.data()) {
                    assert!((u - v).abs() < 1e-12, "{} differs", a.name);
                }
            }
        }
    }

    #[test]
    fn global_maxpool_picks_channel_max() {
        let mut tape = Tape::new(LayerMode::Eval);
        let x = tape.input(t(&[1, 2, 3, 1], &[-1.0, 3.0, 2.0, 7.0, 7.0, 7.0]));
        let y = tape.global_maxpool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 7.0]);
    }

    #[test]
    fn dense_examples() {
        let mut tape = Tape::new(LayerMode::Eval);
        let x = tape.input(t(&[1, 2], &[2.0, 3.0]));
        let w = tape.input(t(&[1, 2], &[1.0, 1.0]));
        let b = tape.input(t(&[1], &[1.0]));
        let y = tape.dense(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);

        let x = tape.input(t(&[2, 3], &[1.0, -2.0, 3.0, 4.0, 5.0, -6.0]));
        let eye = tape.input(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let b = tape.input(Tensor::zeros(&[3]));
        let y = tape.dense(x, eye, b).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let bad = tape.input(Tensor::zeros(&[3, 4]));
        assert!(tape.dense(x, bad, b).is_err());
    }

    #[test]
    fn relu_values_and_gradient() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", t(&[3], &[-1.0, 0.0, 2.0]));
        let mut tape = Tape::new(LayerMode::Train);
        let x = tape.param(&store, id);
        let y = tape.relu(x);
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        tape.backward(y, Tensor::full(&[3], 1.0), &mut store).unwrap();
        assert_eq!(store.param(id).grad.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn batch_norm_train_standardizes_columns() {
        let mut store = ParamStore::<f64>::new();
        let bn = crate::nn::BatchNorm::new(&mut store, "bn", 3);
        let mut rng = seed_rng(5);
        let data: Vec<f64> = (0..30).map(|_| rng.gen_range(-4.0..9.0)).collect();
        let mut tape = Tape::new(LayerMode::Train);
        let x = tape.input(t(&[10, 3], &data));
        let y = bn.forward(&mut tape, &mut store, x).unwrap();
        let out = tape.value(y);
        for c in 0..3 {
            let col: Vec<f64> = (0..10).map(|r| out.get(&[r, c])).collect();
            let mean = col.iter().sum::<f64>() / 10.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 10.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-5);
        }
        // Running stats moved off their initial values.
        assert!(store.all_stats()[0].mean.iter().all(|&m| m != 0.0));
    }

    #[test]
    fn batch_norm_eval_uses_running_stats() {
        let mut store = ParamStore::<f64>::new();
        let bn = crate::nn::BatchNorm::new(&mut store, "bn", 2);
        store.param_mut(bn.gamma).value = t(&[2], &[2.0, 0.5]);
        store.param_mut(bn.beta).value = t(&[2], &[1.0, -1.0]);
        let mut tape = Tape::new(LayerMode::Eval);
        let x = tape.input(t(&[1, 2], &[3.0, 4.0]));
        let y = bn.forward(&mut tape, &mut store, x).unwrap();
        let scale = 1.0 / (1.0 + BN_EPS).sqrt();
        let want = [2.0 * 3.0 * scale + 1.0, 0.5 * 4.0 * scale - 1.0];
        for (a, b) in tape.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_norm_rejects_single_example_in_training() {
        let mut store = ParamStore::<f64>::new();
        let bn = crate::nn::BatchNorm::new(&mut store, "bn", 2);
        let mut tape = Tape::new(LayerMode::Train);
        let x = tape.input(Tensor::zeros(&[1, 2]));
        assert!(matches!(
            bn.forward(&mut tape, &mut store, x),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn dropout_identity_cases_and_bad_rate() {
        let mut rng = seed_rng(0);
        for mode in [LayerMode::Train, LayerMode::Eval] {
            let mut tape = Tape::new(mode);
            let x = tape.input(Tensor::from_fn(&[4, 4], |i| i as f64));
            let y = tape.dropout(x, 0.0, &mut rng).unwrap();
            assert_eq!(tape.value(y), tape.value(x));
            assert!(tape.dropout(x, 1.0, &mut rng).is_err());
        }
        let mut tape = Tape::new(LayerMode::Eval);
        let x = tape.input(Tensor::full(&[8], 3.0));
        let y = tape.dropout(x, 0.7, &mut rng).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn dropout_survivor_fraction() {
        let mut rng = seed_rng(42);
        let mut tape = Tape::new(LayerMode::Train);
        let x = tape.input(Tensor::full(&[1_000_000], 1.0f64));
        let y = tape.dropout(x, 0.5, &mut rng).unwrap();
        let out = tape.value(y).data();
        let survivors: Vec<f64> = out.iter().copied().filter(|&v| v != 0.0).collect();
        let frac = survivors.len() as f64 / out.len() as f64;
        assert!((frac - 0.5).abs() <= 0.002, "survivor fraction {frac}");
        let mean = survivors.iter().sum::<f64>() / survivors.len() as f64;
        assert_eq!(mean, 2.0);
    }

    #[test]
    fn concat_and_flatten() {
        let mut tape = Tape::new(LayerMode::Eval);
        let a = tape.input(t(&[2, 1], &[1.0, 2.0]));
        let b = tape.input(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat(&[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let x = tape.input(Tensor::zeros(&[2, 3, 2, 2]));
        let f = tape.flatten(x).unwrap();
        assert_eq!(tape.dims(f), &[2, 12]);
        let bad = tape.input(Tensor::zeros(&[3, 1]));
        assert!(tape.concat(&[a, bad]).is_err());
    }

    #[test]
    fn labels_are_reported_in_order() {
        let mut tape = Tape::<f32>::new(LayerMode::Eval);
        let a = tape.input(Tensor::zeros(&[2, 3]));
        let b = tape.relu(a);
        tape.label(b, "relu");
        tape.label(a, "input");
        assert_eq!(
            tape.labeled_shapes(),
            vec![("input".to_string(), vec![2, 3]), ("relu".to_string(), vec![2, 3])]
        );
    }
}
