//! Dense 4-D tensors on a reverse-mode differentiation tape.
//!
//! A [`Tape`] records every operation of one forward pass as a node holding
//! its output data and a backward rule. Nodes are appended in execution
//! order, so the tape is topologically sorted by construction and a single
//! reverse sweep populates gradients for every `requires_grad` leaf.
//! Networks keep their parameters outside the tape and re-insert them as
//! leaves each pass.

pub mod conv;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use conv::{ConvDims, ConvTDims};

/// Shape of a 4-D tensor in NCHW order. Convolution weights reuse this as
/// (c_out, c_in/groups, kh, kw) and vectors as (1, c, 1, 1).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape { n, c, h, w }
    }

    /// Channel vector (1, c, 1, 1).
    pub fn vector(c: usize) -> Shape {
        Shape { n: 1, c, h: 1, w: 1 }
    }

    pub fn scalar() -> Shape {
        Shape { n: 1, c: 1, h: 1, w: 1 }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Var(usize);

/// Standard convolution hyper-parameters.
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn plain(stride: usize, padding: usize) -> ConvSpec {
        ConvSpec { stride, padding, dilation: 1, groups: 1 }
    }
}

/// Transposed convolution hyper-parameters.
#[derive(Clone, Copy, Debug)]
pub struct ConvTransposeSpec {
    pub stride: usize,
    pub padding: usize,
    pub output_padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

/// Pooling flavour for the fixed 2x2/stride-2 pooling op.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PoolKind {
    Avg,
    Max,
}

enum OpRecord<S: Scalar> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, dims: ConvDims },
    ConvTranspose2d { x: Var, w: Var, dims: ConvTDims },
    AvgPool2 { x: Var },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Relu { x: Var },
    Sigmoid { x: Var },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: Vec<(f64, f64)> },
    SoftmaxChannels { x: Var },
    GlobalAvgPool { x: Var },
    ConcatChannels { xs: Vec<Var> },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    ScaleConst { x: Var, k: S },
    ScaleByElement { x: Var, coeff: Var, index: usize },
    MulChannelGate { x: Var, gate: Var },
    SumAll { x: Var },
    DiceLoss { logits: Var, labels: Vec<u16>, probs: Vec<S>, class_terms: Vec<(f64, f64)> },
}

struct Node<S: Scalar> {
    shape: Shape,
    requires_grad: bool,
    op: OpRecord<S>,
}

/// Recorded compute graph of one forward pass.
pub struct Tape<S: Scalar> {
    nodes: Vec<Node<S>>,
    datas: Vec<Vec<S>>,
    grads: Vec<Option<Vec<S>>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Tape<S> {
        Tape { nodes: Vec::new(), datas: Vec::new(), grads: Vec::new(), backward_done: false }
    }

    /// Number of recorded nodes (leaves included). Binarized forward passes
    /// keep this independent of the number of candidate ops per edge.
    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[S] {
        &self.datas[v.0]
    }

    /// Gradient of a node after `backward`; `None` when the node never
    /// received one (not `requires_grad`, or consumed during the sweep).
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.grads[v.0].as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar_value(&self, v: Var) -> S {
        debug_assert_eq!(self.nodes[v.0].shape.numel(), 1);
        self.datas[v.0][0]
    }

    fn push(&mut self, shape: Shape, data: Vec<S>, requires_grad: bool, op: OpRecord<S>) -> Result<Var> {
        debug_assert_eq!(data.len(), shape.numel());
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite value produced by {} node {}",
                op_name(&op),
                self.nodes.len()
            )));
        }
        self.nodes.push(Node { shape, requires_grad, op });
        self.datas.push(data);
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Insert an input or parameter tensor.
    pub fn leaf(&mut self, data: Vec<S>, shape: Shape, requires_grad: bool) -> Result<Var> {
        if data.len() != shape.numel() {
            return Err(Error::config(format!(
                "leaf data length {} does not match shape {}",
                data.len(),
                shape
            )));
        }
        self.push(shape, data, requires_grad, OpRecord::Leaf)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if spec.groups == 0 || spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::config("conv2d: stride/dilation/groups must be >= 1"));
        }
        if xs.c % spec.groups != 0 {
            return Err(Error::config(format!("conv2d: c_in {} not divisible by groups {}", xs.c, spec.groups)));
        }
        if ws.c != xs.c / spec.groups {
            return Err(Error::config(format!(
                "conv2d: weight expects c_in/groups {} but input has {}/{}",
                ws.c, xs.c, spec.groups
            )));
        }
        if ws.n % spec.groups != 0 {
            return Err(Error::config(format!("conv2d: c_out {} not divisible by groups {}", ws.n, spec.groups)));
        }
        if let Some(bv) = b {
            let bs = self.shape(bv);
            if bs != Shape::vector(ws.n) {
                return Err(Error::config(format!("conv2d: bias shape {} != (1,{},1,1)", bs, ws.n)));
            }
        }
        let oh = conv::conv_out_dim(xs.h, ws.h, spec.stride, spec.padding, spec.dilation)
            .ok_or_else(|| Error::config(format!("conv2d: kernel does not fit input {}", xs)))?;
        let ow = conv::conv_out_dim(xs.w, ws.w, spec.stride, spec.padding, spec.dilation)
            .ok_or_else(|| Error::config(format!("conv2d: kernel does not fit input {}", xs)))?;
        let dims = ConvDims {
            n: xs.n,
            c_in: xs.c,
            h: xs.h,
            w: xs.w,
            c_out: ws.n,
            kh: ws.h,
            kw: ws.w,
            oh,
            ow,
            stride: spec.stride,
            padding: spec.padding,
            dilation: spec.dilation,
            groups: spec.groups,
        };
        let out_shape = Shape::new(xs.n, ws.n, oh, ow);
        let mut out = vec![S::ZERO; out_shape.numel()];
        conv::conv2d_fwd(
            &self.datas[x.0],
            &self.datas[w.0],
            b.map(|bv| self.datas[bv.0].as_slice()),
            &dims,
            &mut out,
        );
        let rg = self.requires_grad(x)
            || self.requires_grad(w)
            || b.map_or(false, |bv| self.requires_grad(bv));
        self.push(out_shape, out, rg, OpRecord::Conv2d { x, w, b, dims })
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, spec: ConvTransposeSpec) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if spec.groups == 0 || spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::config("conv_transpose2d: stride/dilation/groups must be >= 1"));
        }
        if ws.n != xs.c {
            return Err(Error::config(format!(
                "conv_transpose2d: weight expects c_in {} but input has {}",
                ws.n, xs.c
            )));
        }
        if xs.c % spec.groups != 0 {
            return Err(Error::config(format!(
                "conv_transpose2d: c_in {} not divisible by groups {}",
                xs.c, spec.groups
            )));
        }
        if spec.output_padding >= spec.stride {
            return Err(Error::config("conv_transpose2d: output_padding must be < stride"));
        }
        let c_out = ws.c * spec.groups;
        let oh = conv::conv_transpose_out_dim(xs.h, ws.h, spec.stride, spec.padding, spec.output_padding, spec.dilation)
            .ok_or_else(|| Error::config("conv_transpose2d: degenerate output"))?;
        let ow = conv::conv_transpose_out_dim(xs.w, ws.w, spec.stride, spec.padding, spec.output_padding, spec.dilation)
            .ok_or_else(|| Error::config("conv_transpose2d: degenerate output"))?;
        let dims = ConvTDims {
            n: xs.n,
            c_in: xs.c,
            h: xs.h,
            w: xs.w,
            c_out,
            kh: ws.h,
            kw: ws.w,
            oh,
            ow,
            stride: spec.stride,
            padding: spec.padding,
            dilation: spec.dilation,
            groups: spec.groups,
        };
        let out_shape = Shape::new(xs.n, c_out, oh, ow);
        let mut out = vec![S::ZERO; out_shape.numel()];
        conv::conv_transpose2d_fwd(&self.datas[x.0], &self.datas[w.0], &dims, &mut out);
        let rg = self.requires_grad(x) || self.requires_grad(w);
        self.push(out_shape, out, rg, OpRecord::ConvTranspose2d { x, w, dims })
    }

    /// 2x2 stride-2 pooling. Max ties route the gradient to the lowest
    /// linear index of the window.
    pub fn pool2(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let xs = self.shape(x);
        if xs.h % 2 != 0 || xs.w % 2 != 0 {
            return Err(Error::config(format!("pool2: spatial dims of {} must be even", xs)));
        }
        let out_shape = Shape::new(xs.n, xs.c, xs.h / 2, xs.w / 2);
        let (oh, ow) = (out_shape.h, out_shape.w);
        let mut out = vec![S::ZERO; out_shape.numel()];
        let rg = self.requires_grad(x);
        let quarter = S::from_f64(0.25);
        match kind {
            PoolKind::Avg => {
                let xd = &self.datas[x.0];
                for nc in 0..xs.n * xs.c {
                    let plane = &xd[nc * xs.h * xs.w..][..xs.h * xs.w];
                    let out_plane = &mut out[nc * oh * ow..][..oh * ow];
                    for i in 0..oh {
                        for j in 0..ow {
                            let a = plane[(2 * i) * xs.w + 2 * j];
                            let b = plane[(2 * i) * xs.w + 2 * j + 1];
                            let c = plane[(2 * i + 1) * xs.w + 2 * j];
                            let d = plane[(2 * i + 1) * xs.w + 2 * j + 1];
                            out_plane[i * ow + j] = (a + b + c + d) * quarter;
                        }
                    }
                }
                self.push(out_shape, out, rg, OpRecord::AvgPool2 { x })
            }
            PoolKind::Max => {
                let mut argmax = vec![0u32; out_shape.numel()];
                let xd = &self.datas[x.0];
                for nc in 0..xs.n * xs.c {
                    let base = nc * xs.h * xs.w;
                    let plane = &xd[base..][..xs.h * xs.w];
                    for i in 0..oh {
                        for j in 0..ow {
                            // scan in increasing linear index order; strict >
                            // keeps the first (lowest-index) maximum
                            let idx = [
                                (2 * i) * xs.w + 2 * j,
                                (2 * i) * xs.w + 2 * j + 1,
                                (2 * i + 1) * xs.w + 2 * j,
                                (2 * i + 1) * xs.w + 2 * j + 1,
                            ];
                            let mut best = idx[0];
                            let mut best_v = plane[idx[0]];
                            for &k in &idx[1..] {
                                if plane[k] > best_v {
                                    best_v = plane[k];
                                    best = k;
                                }
                            }
                            let o = nc * oh * ow + i * ow + j;
                            out[o] = best_v;
                            argmax[o] = (base + best) as u32;
                        }
                    }
                }
                self.push(out_shape, out, rg, OpRecord::MaxPool2 { x, argmax })
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let rg = self.requires_grad(x);
        let out: Vec<S> = self.datas[x.0].iter().map(|&v| v.maxs(S::ZERO)).collect();
        self.push(xs, out, rg, OpRecord::Relu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let rg = self.requires_grad(x);
        let out: Vec<S> = self.datas[x.0]
            .iter()
            .map(|&v| S::ONE / (S::ONE + (-v).exp()))
            .collect();
        self.push(xs, out, rg, OpRecord::Sigmoid { x })
    }

    /// Group normalization over (channels/groups, H, W) per sample, followed
    /// by the per-channel affine transform.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let xs = self.shape(x);
        if groups == 0 || xs.c % groups != 0 {
            return Err(Error::config(format!(
                "group_norm: {} channels not divisible by {} groups",
                xs.c, groups
            )));
        }
        if self.shape(gamma) != Shape::vector(xs.c) || self.shape(beta) != Shape::vector(xs.c) {
            return Err(Error::config("group_norm: gamma/beta must have shape (1,C,1,1)"));
        }
        let cg = xs.c / groups;
        let group_len = cg * xs.h * xs.w;
        let mut out = vec![S::ZERO; xs.numel()];
        let mut stats = Vec::with_capacity(xs.n * groups);
        {
            let xd = &self.datas[x.0];
            let gd = &self.datas[gamma.0];
            let bd = &self.datas[beta.0];
            for n in 0..xs.n {
                for g in 0..groups {
                    let base = (n * xs.c + g * cg) * xs.h * xs.w;
                    let xg = &xd[base..][..group_len];
                    let mut mean = 0.0f64;
                    for &v in xg {
                        mean += v.to_f64();
                    }
                    mean /= group_len as f64;
                    let mut var = 0.0f64;
                    for &v in xg {
                        let dv = v.to_f64() - mean;
                        var += dv * dv;
                    }
                    var /= group_len as f64;
                    let inv_std = 1.0 / (var + eps).sqrt();
                    stats.push((mean, inv_std));
                    let m = S::from_f64(mean);
                    let is = S::from_f64(inv_std);
                    for cl in 0..cg {
                        let ch = g * cg + cl;
                        let ga = gd[ch];
                        let be = bd[ch];
                        let row = &xg[cl * xs.h * xs.w..][..xs.h * xs.w];
                        let orow = &mut out[base + cl * xs.h * xs.w..][..xs.h * xs.w];
                        for (o, &v) in orow.iter_mut().zip(row) {
                            *o = (v - m) * is * ga + be;
                        }
                    }
                }
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gamma) || self.requires_grad(beta);
        self.push(xs, out, rg, OpRecord::GroupNorm { x, gamma, beta, groups, stats })
    }

    /// Shift-invariant softmax along the channel dimension.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let out = softmax_channels_data(&self.datas[x.0], xs);
        let rg = self.requires_grad(x);
        self.push(xs, out, rg, OpRecord::SoftmaxChannels { x })
    }

    /// Mean over H and W per (sample, channel): (N,C,H,W) -> (N,C,1,1).
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        let hw = xs.h * xs.w;
        let inv = S::from_f64(1.0 / hw as f64);
        let mut out = vec![S::ZERO; xs.n * xs.c];
        for nc in 0..xs.n * xs.c {
            let plane = &self.datas[x.0][nc * hw..][..hw];
            let mut acc = S::ZERO;
            for &v in plane {
                acc += v;
            }
            out[nc] = acc * inv;
        }
        let rg = self.requires_grad(x);
        self.push(Shape::new(xs.n, xs.c, 1, 1), out, rg, OpRecord::GlobalAvgPool { x })
    }

    /// Concatenate along the channel dimension; inputs share N, H, W.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::config("concat_channels: no inputs"));
        }
        let first = self.shape(xs[0]);
        let mut c_total = 0;
        for &v in xs {
            let s = self.shape(v);
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::config(format!(
                    "concat_channels: mismatched shapes {} vs {}",
                    first, s
                )));
            }
            c_total += s.c;
        }
        let out_shape = Shape::new(first.n, c_total, first.h, first.w);
        let hw = first.h * first.w;
        let mut out = vec![S::ZERO; out_shape.numel()];
        for n in 0..first.n {
            let mut c_off = 0;
            for &v in xs {
                let s = self.shape(v);
                let src = &self.datas[v.0][n * s.c * hw..][..s.c * hw];
                out[(n * c_total + c_off) * hw..][..s.c * hw].copy_from_slice(src);
                c_off += s.c;
            }
        }
        let rg = xs.iter().any(|&v| self.requires_grad(v));
        self.push(out_shape, out, rg, OpRecord::ConcatChannels { xs: xs.to_vec() })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa != self.shape(b) {
            return Err(Error::config(format!("add: shape mismatch {} vs {}", sa, self.shape(b))));
        }
        let out: Vec<S> = self.datas[a.0]
            .iter()
            .zip(&self.datas[b.0])
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(sa, out, rg, OpRecord::Add { a, b })
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        if sa != self.shape(b) {
            return Err(Error::config(format!("mul: shape mismatch {} vs {}", sa, self.shape(b))));
        }
        let out: Vec<S> = self.datas[a.0]
            .iter()
            .zip(&self.datas[b.0])
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        self.push(sa, out, rg, OpRecord::Mul { a, b })
    }

    pub fn scale_const(&mut self, x: Var, k: f64) -> Result<Var> {
        let xs = self.shape(x);
        let ks = S::from_f64(k);
        let out: Vec<S> = self.datas[x.0].iter().map(|&v| v * ks).collect();
        let rg = self.requires_grad(x);
        self.push(xs, out, rg, OpRecord::ScaleConst { x, k: ks })
    }

    /// Multiply a tensor by one element of another node (the mixing weight
    /// of a candidate path). Gradients flow to both.
    pub fn scale_by_element(&mut self, x: Var, coeff: Var, index: usize) -> Result<Var> {
        if index >= self.shape(coeff).numel() {
            return Err(Error::config(format!(
                "scale_by_element: index {index} out of range for {}",
                self.shape(coeff)
            )));
        }
        let xs = self.shape(x);
        let k = self.datas[coeff.0][index];
        let out: Vec<S> = self.datas[x.0].iter().map(|&v| v * k).collect();
        let rg = self.requires_grad(x) || self.requires_grad(coeff);
        self.push(xs, out, rg, OpRecord::ScaleByElement { x, coeff, index })
    }

    /// Broadcast-multiply by a per-(sample, channel) gate of shape (N,C,1,1).
    pub fn mul_channel_gate(&mut self, x: Var, gate: Var) -> Result<Var> {
        let xs = self.shape(x);
        let gs = self.shape(gate);
        if gs != Shape::new(xs.n, xs.c, 1, 1) {
            return Err(Error::config(format!(
                "mul_channel_gate: gate shape {} does not match input {}",
                gs, xs
            )));
        }
        let hw = xs.h * xs.w;
        let mut out = vec![S::ZERO; xs.numel()];
        for nc in 0..xs.n * xs.c {
            let k = self.datas[gate.0][nc];
            let src = &self.datas[x.0][nc * hw..][..hw];
            let dst = &mut out[nc * hw..][..hw];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = v * k;
            }
        }
        let rg = self.requires_grad(x) || self.requires_grad(gate);
        self.push(xs, out, rg, OpRecord::MulChannelGate { x, gate })
    }

    /// Sum of all elements, as a (1,1,1,1) tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let mut acc = S::ZERO;
        for &v in &self.datas[x.0] {
            acc += v;
        }
        let rg = self.requires_grad(x);
        self.push(Shape::scalar(), vec![acc], rg, OpRecord::SumAll { x })
    }

    /// Soft Dice loss over channel-softmax probabilities against an integer
    /// label mask of length N*H*W. Returns `1 - mean_c dice_c` with the
    /// given additive smoothing in numerator and denominator.
    pub fn dice_loss(&mut self, logits: Var, labels: &[u16], smooth: f64) -> Result<Var> {
        let ls = self.shape(logits);
        if labels.len() != ls.n * ls.h * ls.w {
            return Err(Error::config(format!(
                "dice_loss: {} labels for logits {}",
                labels.len(),
                ls
            )));
        }
        let classes = ls.c;
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::data(format!("dice_loss: label {bad} out of range [0,{classes})")));
        }
        let probs = softmax_channels_data(&self.datas[logits.0], ls);
        let hw = ls.h * ls.w;
        // per class: intersection and probability mass, accumulated in f64
        let mut inter = vec![0.0f64; classes];
        let mut pmass = vec![0.0f64; classes];
        let mut ymass = vec![0.0f64; classes];
        for n in 0..ls.n {
            for p in 0..hw {
                let y = labels[n * hw + p] as usize;
                ymass[y] += 1.0;
                for c in 0..classes {
                    let pv = probs[(n * classes + c) * hw + p].to_f64();
                    pmass[c] += pv;
                    if c == y {
                        inter[c] += pv;
                    }
                }
            }
        }
        let mut loss = 0.0f64;
        let mut class_terms = Vec::with_capacity(classes);
        for c in 0..classes {
            let denom = pmass[c] + ymass[c] + smooth;
            let dice = (2.0 * inter[c] + smooth) / denom;
            class_terms.push((dice, denom));
            loss += dice;
        }
        loss = 1.0 - loss / classes as f64;
        let rg = self.requires_grad(logits);
        self.push(
            Shape::scalar(),
            vec![S::from_f64(loss)],
            rg,
            OpRecord::DiceLoss { logits, labels: labels.to_vec(), probs, class_terms },
        )
    }

    /// Reverse sweep from a scalar loss. Populates gradients for every
    /// `requires_grad` leaf (zeros when unreachable). Running it twice on
    /// one tape is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::config("backward: tape already consumed by a previous backward"));
        }
        if self.nodes[loss.0].shape.numel() != 1 {
            return Err(Error::config(format!(
                "backward: loss must be scalar, got {}",
                self.nodes[loss.0].shape
            )));
        }
        self.backward_done = true;
        for i in 0..self.nodes.len() {
            if self.nodes[i].requires_grad {
                self.grads[i] = Some(vec![S::ZERO; self.nodes[i].shape.numel()]);
            }
        }
        if let Some(g) = self.grads[loss.0].as_mut() {
            g[0] = S::ONE;
        } else {
            // loss does not depend on any requires_grad leaf; nothing to do
            return Ok(());
        }

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad || matches!(self.nodes[i].op, OpRecord::Leaf) {
                continue;
            }
            // grads of interior nodes are complete once reached and are not
            // read again afterwards, so move them out
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.dispatch_backward(i, &g);
        }
        Ok(())
    }

    fn grad_mut(&mut self, v: Var) -> Option<&mut [S]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        self.grads[v.0].as_deref_mut()
    }

    fn dispatch_backward(&mut self, i: usize, g: &[S]) {
        // operands always precede node i, so indexed splits are safe
        match std::mem::replace(&mut self.nodes[i].op, OpRecord::Leaf) {
            OpRecord::Leaf => unreachable!(),
            OpRecord::Conv2d { x, w, b, dims } => {
                if self.nodes[x.0].requires_grad {
                    let wdata = std::mem::take(&mut self.datas[w.0]);
                    if let Some(dx) = self.grad_mut(x) {
                        conv::conv2d_bwd_input(g, &wdata, &dims, dx);
                    }
                    self.datas[w.0] = wdata;
                }
                if self.nodes[w.0].requires_grad {
                    let xdata = std::mem::take(&mut self.datas[x.0]);
                    if let Some(dw) = self.grad_mut(w) {
                        conv::conv2d_bwd_weight(g, &xdata, &dims, dw);
                    }
                    self.datas[x.0] = xdata;
                }
                if let Some(bv) = b {
                    if let Some(db) = self.grad_mut(bv) {
                        conv::conv2d_bwd_bias(g, &dims, db);
                    }
                }
            }
            OpRecord::ConvTranspose2d { x, w, dims } => {
                if self.nodes[x.0].requires_grad {
                    let wdata = std::mem::take(&mut self.datas[w.0]);
                    if let Some(dx) = self.grad_mut(x) {
                        conv::conv_transpose2d_bwd_input(g, &wdata, &dims, dx);
                    }
                    self.datas[w.0] = wdata;
                }
                if self.nodes[w.0].requires_grad {
                    let xdata = std::mem::take(&mut self.datas[x.0]);
                    if let Some(dw) = self.grad_mut(w) {
                        conv::conv_transpose2d_bwd_weight(g, &xdata, &dims, dw);
                    }
                    self.datas[x.0] = xdata;
                }
            }
            OpRecord::AvgPool2 { x } => {
                let xs = self.nodes[x.0].shape;
                let (oh, ow) = (xs.h / 2, xs.w / 2);
                let quarter = S::from_f64(0.25);
                if let Some(dx) = self.grad_mut(x) {
                    for nc in 0..xs.n * xs.c {
                        let dplane = &mut dx[nc * xs.h * xs.w..][..xs.h * xs.w];
                        let gplane = &g[nc * oh * ow..][..oh * ow];
                        for i2 in 0..oh {
                            for j in 0..ow {
                                let gv = gplane[i2 * ow + j] * quarter;
                                dplane[(2 * i2) * xs.w + 2 * j] += gv;
                                dplane[(2 * i2) * xs.w + 2 * j + 1] += gv;
                                dplane[(2 * i2 + 1) * xs.w + 2 * j] += gv;
                                dplane[(2 * i2 + 1) * xs.w + 2 * j + 1] += gv;
                            }
                        }
                    }
                }
            }
            OpRecord::MaxPool2 { x, argmax } => {
                if let Some(dx) = self.grad_mut(x) {
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src as usize] += g[o];
                    }
                }
            }
            OpRecord::Relu { x } => {
                let xdata = std::mem::take(&mut self.datas[x.0]);
                if let Some(dx) = self.grad_mut(x) {
                    for ((d, &gv), &xv) in dx.iter_mut().zip(g).zip(&xdata) {
                        *d += gv * S::indicator(xv > S::ZERO);
                    }
                }
                self.datas[x.0] = xdata;
            }
            OpRecord::Sigmoid { x } => {
                let out = std::mem::take(&mut self.datas[i]);
                if let Some(dx) = self.grad_mut(x) {
                    for ((d, &gv), &s) in dx.iter_mut().zip(g).zip(&out) {
                        *d += gv * s * (S::ONE - s);
                    }
                }
                self.datas[i] = out;
            }
            OpRecord::GroupNorm { x, gamma, beta, groups, stats } => {
                let xs = self.nodes[x.0].shape;
                let cg = xs.c / groups;
                let hw = xs.h * xs.w;
                let group_len = cg * hw;
                let xdata = std::mem::take(&mut self.datas[x.0]);
                let gdata = std::mem::take(&mut self.datas[gamma.0]);

                if self.nodes[beta.0].requires_grad {
                    let mut db = vec![S::ZERO; xs.c];
                    for n in 0..xs.n {
                        for ch in 0..xs.c {
                            let grow = &g[(n * xs.c + ch) * hw..][..hw];
                            let mut acc = S::ZERO;
                            for &gv in grow {
                                acc += gv;
                            }
                            db[ch] += acc;
                        }
                    }
                    if let Some(dbeta) = self.grad_mut(beta) {
                        for (d, v) in dbeta.iter_mut().zip(db) {
                            *d += v;
                        }
                    }
                }
                if self.nodes[gamma.0].requires_grad {
                    let mut dg = vec![S::ZERO; xs.c];
                    for n in 0..xs.n {
                        for grp in 0..groups {
                            let (mean, inv_std) = stats[n * groups + grp];
                            let m = S::from_f64(mean);
                            let is = S::from_f64(inv_std);
                            for cl in 0..cg {
                                let ch = grp * cg + cl;
                                let base = (n * xs.c + ch) * hw;
                                let grow = &g[base..][..hw];
                                let xrow = &xdata[base..][..hw];
                                let mut acc = S::ZERO;
                                for (&gv, &xv) in grow.iter().zip(xrow) {
                                    acc += gv * (xv - m) * is;
                                }
                                dg[ch] += acc;
                            }
                        }
                    }
                    if let Some(dgamma) = self.grad_mut(gamma) {
                        for (d, v) in dgamma.iter_mut().zip(dg) {
                            *d += v;
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let mut dx_all = vec![S::ZERO; xs.numel()];
                    for n in 0..xs.n {
                        for grp in 0..groups {
                            let (mean, inv_std) = stats[n * groups + grp];
                            let (m, is) = (S::from_f64(mean), S::from_f64(inv_std));
                            let base = (n * xs.c + grp * cg) * hw;
                            // dxhat = g * gamma; then the standard normalization
                            // backward over the group
                            let mut sum_dxhat = S::ZERO;
                            let mut sum_dxhat_xhat = S::ZERO;
                            for cl in 0..cg {
                                let ch = grp * cg + cl;
                                let ga = gdata[ch];
                                let grow = &g[base + cl * hw..][..hw];
                                let xrow = &xdata[base + cl * hw..][..hw];
                                for (&gv, &xv) in grow.iter().zip(xrow) {
                                    let dxh = gv * ga;
                                    sum_dxhat += dxh;
                                    sum_dxhat_xhat += dxh * (xv - m) * is;
                                }
                            }
                            let inv_gl = S::from_f64(1.0 / group_len as f64);
                            let gl = S::from_f64(group_len as f64);
                            for cl in 0..cg {
                                let ch = grp * cg + cl;
                                let ga = gdata[ch];
                                let grow = &g[base + cl * hw..][..hw];
                                let xrow = &xdata[base + cl * hw..][..hw];
                                let drow = &mut dx_all[base + cl * hw..][..hw];
                                for ((d, &gv), &xv) in drow.iter_mut().zip(grow).zip(xrow) {
                                    let dxh = gv * ga;
                                    let xh = (xv - m) * is;
                                    *d += is * inv_gl * (gl * dxh - sum_dxhat - xh * sum_dxhat_xhat);
                                }
                            }
                        }
                    }
                    if let Some(dx) = self.grad_mut(x) {
                        for (d, v) in dx.iter_mut().zip(dx_all) {
                            *d += v;
                        }
                    }
                }
                self.datas[x.0] = xdata;
                self.datas[gamma.0] = gdata;
            }
            OpRecord::SoftmaxChannels { x } => {
                let xs = self.nodes[x.0].shape;
                let out = std::mem::take(&mut self.datas[i]);
                let hw = xs.h * xs.w;
                if let Some(dx) = self.grad_mut(x) {
                    for n in 0..xs.n {
                        for p in 0..hw {
                            let mut dot = S::ZERO;
                            for c in 0..xs.c {
                                let idx = (n * xs.c + c) * hw + p;
                                dot += g[idx] * out[idx];
                            }
                            for c in 0..xs.c {
                                let idx = (n * xs.c + c) * hw + p;
                                dx[idx] += out[idx] * (g[idx] - dot);
                            }
                        }
                    }
                }
                self.datas[i] = out;
            }
            OpRecord::GlobalAvgPool { x } => {
                let xs = self.nodes[x.0].shape;
                let hw = xs.h * xs.w;
                let inv = S::from_f64(1.0 / hw as f64);
                if let Some(dx) = self.grad_mut(x) {
                    for nc in 0..xs.n * xs.c {
                        let gv = g[nc] * inv;
                        for d in dx[nc * hw..][..hw].iter_mut() {
                            *d += gv;
                        }
                    }
                }
            }
            OpRecord::ConcatChannels { xs } => {
                let out_shape = self.nodes[i].shape;
                let hw = out_shape.h * out_shape.w;
                let mut c_off = 0;
                for &v in &xs {
                    let s = self.nodes[v.0].shape;
                    if self.nodes[v.0].requires_grad {
                        if let Some(dv) = self.grad_mut(v) {
                            for n in 0..s.n {
                                let src = &g[(n * out_shape.c + c_off) * hw..][..s.c * hw];
                                let dst = &mut dv[n * s.c * hw..][..s.c * hw];
                                for (d, &gv) in dst.iter_mut().zip(src) {
                                    *d += gv;
                                }
                            }
                        }
                    }
                    c_off += s.c;
                }
            }
            OpRecord::Add { a, b } => {
                if let Some(da) = self.grad_mut(a) {
                    for (d, &gv) in da.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if let Some(db) = self.grad_mut(b) {
                    for (d, &gv) in db.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            OpRecord::Mul { a, b } => {
                if a == b {
                    let two = S::from_f64(2.0);
                    let adata = std::mem::take(&mut self.datas[a.0]);
                    if let Some(da) = self.grad_mut(a) {
                        for ((d, &gv), &av) in da.iter_mut().zip(g).zip(&adata) {
                            *d += two * gv * av;
                        }
                    }
                    self.datas[a.0] = adata;
                } else {
                    let adata = std::mem::take(&mut self.datas[a.0]);
                    let bdata = std::mem::take(&mut self.datas[b.0]);
                    if let Some(da) = self.grad_mut(a) {
                        for ((d, &gv), &bv) in da.iter_mut().zip(g).zip(&bdata) {
                            *d += gv * bv;
                        }
                    }
                    if let Some(db) = self.grad_mut(b) {
                        for ((d, &gv), &av) in db.iter_mut().zip(g).zip(&adata) {
                            *d += gv * av;
                        }
                    }
                    self.datas[a.0] = adata;
                    self.datas[b.0] = bdata;
                }
            }
            OpRecord::ScaleConst { x, k } => {
                if let Some(dx) = self.grad_mut(x) {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv * k;
                    }
                }
            }
            OpRecord::ScaleByElement { x, coeff, index } => {
                let k = self.datas[coeff.0][index];
                let xdata = std::mem::take(&mut self.datas[x.0]);
                if let Some(dx) = self.grad_mut(x) {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv * k;
                    }
                }
                if self.nodes[coeff.0].requires_grad {
                    let mut acc = S::ZERO;
                    for (&gv, &xv) in g.iter().zip(&xdata) {
                        acc += gv * xv;
                    }
                    if let Some(dc) = self.grad_mut(coeff) {
                        dc[index] += acc;
                    }
                }
                self.datas[x.0] = xdata;
            }
            OpRecord::MulChannelGate { x, gate } => {
                let xs = self.nodes[x.0].shape;
                let hw = xs.h * xs.w;
                let gate_data = self.datas[gate.0].clone();
                let xdata = std::mem::take(&mut self.datas[x.0]);
                if let Some(dx) = self.grad_mut(x) {
                    for nc in 0..xs.n * xs.c {
                        let k = gate_data[nc];
                        let dst = &mut dx[nc * hw..][..hw];
                        let src = &g[nc * hw..][..hw];
                        for (d, &gv) in dst.iter_mut().zip(src) {
                            *d += gv * k;
                        }
                    }
                }
                if self.nodes[gate.0].requires_grad {
                    let mut dgate = vec![S::ZERO; xs.n * xs.c];
                    for nc in 0..xs.n * xs.c {
                        let mut acc = S::ZERO;
                        let grow = &g[nc * hw..][..hw];
                        let xrow = &xdata[nc * hw..][..hw];
                        for (&gv, &xv) in grow.iter().zip(xrow) {
                            acc += gv * xv;
                        }
                        dgate[nc] = acc;
                    }
                    if let Some(dg) = self.grad_mut(gate) {
                        for (d, v) in dg.iter_mut().zip(dgate) {
                            *d += v;
                        }
                    }
                }
                self.datas[x.0] = xdata;
            }
            OpRecord::SumAll { x } => {
                let gv = g[0];
                if let Some(dx) = self.grad_mut(x) {
                    for d in dx.iter_mut() {
                        *d += gv;
                    }
                }
            }
            OpRecord::DiceLoss { logits, labels, probs, class_terms } => {
                let ls = self.nodes[logits.0].shape;
                let classes = ls.c;
                let hw = ls.h * ls.w;
                let gv = g[0].to_f64();
                if let Some(dl) = self.grad_mut(logits) {
                    // dL/dp_{c,pix} = -(1/C) * (2*y - dice_c) / denom_c, then
                    // the per-pixel softmax Jacobian maps dp to dlogits
                    let inv_c = 1.0 / classes as f64;
                    let mut dp = vec![0.0f64; classes];
                    for n in 0..ls.n {
                        for p in 0..hw {
                            let y = labels[n * hw + p] as usize;
                            let mut dot = 0.0f64;
                            for c in 0..classes {
                                let (dice, denom) = class_terms[c];
                                let yv = if c == y { 1.0 } else { 0.0 };
                                let d = -gv * inv_c * (2.0 * yv - dice) / denom;
                                dp[c] = d;
                                dot += d * probs[(n * classes + c) * hw + p].to_f64();
                            }
                            for c in 0..classes {
                                let idx = (n * classes + c) * hw + p;
                                let pv = probs[idx].to_f64();
                                dl[idx] += S::from_f64(pv * (dp[c] - dot));
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Channel softmax on raw data; shared by the tape op and the dice loss.
fn softmax_channels_data<S: Scalar>(x: &[S], shape: Shape) -> Vec<S> {
    let hw = shape.h * shape.w;
    let mut out = vec![S::ZERO; x.len()];
    for n in 0..shape.n {
        for p in 0..hw {
            let mut max = x[(n * shape.c) * hw + p];
            for c in 1..shape.c {
                let v = x[(n * shape.c + c) * hw + p];
                if v > max {
                    max = v;
                }
            }
            let mut sum = S::ZERO;
            for c in 0..shape.c {
                let idx = (n * shape.c + c) * hw + p;
                let e = (x[idx] - max).exp();
                out[idx] = e;
                sum += e;
            }
            let inv = S::ONE / sum;
            for c in 0..shape.c {
                out[(n * shape.c + c) * hw + p] *= inv;
            }
        }
    }
    out
}

/// Shift-invariant softmax of a plain slice (architecture parameter rows,
/// sampling distributions). Matches the tape op on a (1,K,1,1) tensor.
pub fn softmax_slice(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn op_name<S: Scalar>(op: &OpRecord<S>) -> &'static str {
    match op {
        OpRecord::Leaf => "leaf",
        OpRecord::Conv2d { .. } => "conv2d",
        OpRecord::ConvTranspose2d { .. } => "conv_transpose2d",
        OpRecord::AvgPool2 { .. } => "avg_pool2",
        OpRecord::MaxPool2 { .. } => "max_pool2",
        OpRecord::Relu { .. } => "relu",
        OpRecord::Sigmoid { .. } => "sigmoid",
        OpRecord::GroupNorm { .. } => "group_norm",
        OpRecord::SoftmaxChannels { .. } => "softmax_channels",
        OpRecord::GlobalAvgPool { .. } => "global_avg_pool",
        OpRecord::ConcatChannels { .. } => "concat_channels",
        OpRecord::Add { .. } => "add",
        OpRecord::ScaleConst { .. } => "scale_const",
        OpRecord::ScaleByElement { .. } => "scale_by_element",
        OpRecord::MulChannelGate { .. } => "mul_channel_gate",
        OpRecord::SumAll { .. } => "sum_all",
        OpRecord::DiceLoss { .. } => "dice_loss",
        OpRecord::Mul { .. } => "mul",
    }
}
