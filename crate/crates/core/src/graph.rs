//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every op as it is evaluated eagerly. Parameters are
//! borrowed from their [`ParamSet`]s, so building a graph never copies
//! weights; the graph must be dropped before the owning networks are mutated.
//! Scalar objectives computed outside the tape (the loss functions, which
//! work in `f64`) enter through [`Graph::scalar_fn`] together with their
//! analytic input gradients.

use alloc::collections::BTreeMap;
use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::kernels::{col2im, gemm, im2col, ConvGeom, Mat};
use crate::params::{NetId, ParamKey, ParamKind, ParamSet};
use crate::rng::Rng;
use crate::tensor::{Shape, Tensor};

pub const BN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Value<'_> {
    fn get(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    Param(ParamKey),
    Conv { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    ConvT { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, inv_std: Vec<f32> },
    Affine { x: Var, scale: Vec<f32> },
    LeakyRelu { x: Var, slope: f32 },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Mask { x: Var, mask: Vec<f32> },
    Concat { a: Var, b: Var },
    Add { a: Var, b: Var },
    Scale { x: Var, s: f32 },
    ChannelScale { x: Var, w: Var },
    AvgPool { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    ChannelDot { x: Var, w: Var },
    Linear { x: Var, w: Var, b: Var },
    ScalarFn { inputs: Vec<Var>, grads: Vec<Vec<f32>> },
    WeightedSum { terms: Vec<(Var, f32)> },
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    needs_grad: bool,
}

/// Batch statistics observed by a train-mode batch norm, to be folded into
/// the running buffers by the owner of the parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct BnObservation {
    pub mean: ParamKey,
    pub var: ParamKey,
    pub batch_mean: Vec<f32>,
    pub batch_var: Vec<f32>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Grads {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamKey, Tensor>,
}

impl Grads {
    /// Gradient with respect to an arbitrary node, if it received any.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn params(&self) -> &BTreeMap<ParamKey, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamKey, Tensor> {
        self.params
    }
}

pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    trainable: BTreeSet<NetId>,
    bn: Vec<BnObservation>,
    rng: Option<Rng>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), trainable: BTreeSet::new(), bn: Vec::new(), rng: None }
    }

    /// Random source for dropout masks.
    pub fn with_rng(mut self, rng: Rng) -> Self {
        self.rng = Some(rng);
        self
    }

    /// Marks a network's parameters as requiring gradients.
    pub fn train_net(&mut self, net: NetId) {
        self.trainable.insert(net);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.nodes[v.0].value.get()
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.value(v).shape()
    }

    pub fn take_bn_observations(&mut self) -> Vec<BnObservation> {
        core::mem::take(&mut self.bn)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked (used by gradient checks).
    pub fn input_tracked(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, set: &'a ParamSet, index: usize) -> Var {
        let p = set.get(index);
        let needs = p.kind == ParamKind::Trainable && self.trainable.contains(&set.net());
        self.nodes.push(Node { value: Value::Borrowed(&p.tensor), op: Op::Param(set.key(index)), needs_grad: needs });
        Var(self.nodes.len() - 1)
    }

    /// Square-kernel convolution. Weight layout `[out, in, k, k]`, bias `[1, out, 1, 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.c != xs.c || ws.h != ws.w {
            return Err(Error::ShapeMismatch(alloc::format!("conv weight {} for input {}", ws, xs)));
        }
        if xs.h + 2 * pad < ws.h || xs.w + 2 * pad < ws.w {
            return Err(Error::ShapeMismatch(alloc::format!("conv kernel {} larger than input {}", ws.h, xs)));
        }
        let g = ConvGeom::new(xs.c, xs.h, xs.w, ws.h, stride, pad);
        let cout = ws.n;
        let mut out = Tensor::zeros(Shape::new(xs.n, cout, g.out_h, g.out_w));
        let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            for n in 0..xs.n {
                im2col(xv.item(n), &g, &mut cols);
                gemm(Mat::new(wv.data(), cout, g.col_rows()), Mat::new(&cols, g.col_rows(), g.col_cols()), 0.0, out.item_mut(n));
            }
            if let Some(b) = b {
                add_channel_bias(&mut out, self.value(b).data());
            }
        }
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::Conv { x, w, b, stride, pad }, needs))
    }

    /// Transposed convolution doubling-style upsampler. Weight layout
    /// `[in, out, k, k]`; output size `(h - 1) * stride - 2 * pad + k + out_pad`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize, out_pad: usize) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.n != xs.c || ws.h != ws.w {
            return Err(Error::ShapeMismatch(alloc::format!("deconv weight {} for input {}", ws, xs)));
        }
        let k = ws.h;
        let cout = ws.c;
        let oh = (xs.h - 1) * stride + k + out_pad - 2 * pad;
        let ow = (xs.w - 1) * stride + k + out_pad - 2 * pad;
        let g = ConvGeom::new(cout, oh, ow, k, stride, pad);
        debug_assert_eq!((g.out_h, g.out_w), (xs.h, xs.w));
        let mut out = Tensor::zeros(Shape::new(xs.n, cout, oh, ow));
        let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
        {
            let xv = self.value(x);
            let wv = self.value(w);
            for n in 0..xs.n {
                gemm(Mat::new(wv.data(), xs.c, g.col_rows()).t(), Mat::new(xv.item(n), xs.c, xs.plane()), 0.0, &mut cols);
                col2im(&cols, &g, out.item_mut(n));
            }
            if let Some(b) = b {
                add_channel_bias(&mut out, self.value(b).data());
            }
        }
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(out, Op::ConvT { x, w, b, stride, pad }, needs))
    }

    /// Batch normalization. In train mode the batch statistics are used and
    /// recorded as a [`BnObservation`]; in eval mode the running buffers are.
    pub fn batch_norm(&mut self, x: Var, set: &'a ParamSet, idx: BnIndices, mode: Mode) -> Result<Var> {
        let gamma = self.param(set, idx.gamma);
        let beta = self.param(set, idx.beta);
        let xs = self.shape(x);
        let c = xs.c;
        if self.shape(gamma).len() != c {
            return Err(Error::ShapeMismatch(alloc::format!("batch norm over {} channels, input {}", self.shape(gamma).len(), xs)));
        }
        let plane = xs.plane();
        let m = (xs.n * plane) as f64;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = Tensor::zeros(xs);
        match mode {
            Mode::Train => {
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                for ch in 0..c {
                    let mut s = 0.0f64;
                    for n in 0..xs.n {
                        let off = (n * c + ch) * plane;
                        s += xv[off..off + plane].iter().map(|&v| v as f64).sum::<f64>();
                    }
                    let mu = s / m;
                    let mut sq = 0.0f64;
                    for n in 0..xs.n {
                        let off = (n * c + ch) * plane;
                        sq += xv[off..off + plane].iter().map(|&v| (v as f64 - mu) * (v as f64 - mu)).sum::<f64>();
                    }
                    mean[ch] = mu as f32;
                    var[ch] = (sq / m) as f32;
                }
                let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / libm::sqrtf(v + BN_EPS)).collect();
                let mut xhat = vec![0.0f32; xs.len()];
                let od = out.data_mut();
                for n in 0..xs.n {
                    for ch in 0..c {
                        let off = (n * c + ch) * plane;
                        for i in off..off + plane {
                            let h = (xv[i] - mean[ch]) * inv_std[ch];
                            xhat[i] = h;
                            od[i] = gv[ch] * h + bv[ch];
                        }
                    }
                }
                let unbiased = if m > 1.0 { m / (m - 1.0) } else { 1.0 };
                self.bn.push(BnObservation {
                    mean: set.key(idx.running_mean),
                    var: set.key(idx.running_var),
                    batch_mean: mean,
                    batch_var: var.iter().map(|&v| (v as f64 * unbiased) as f32).collect(),
                });
                let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
                Ok(self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std }, needs))
            }
            Mode::Eval => {
                let rm = set.tensor(idx.running_mean).data();
                let rv = set.tensor(idx.running_var).data();
                let scale: Vec<f32> = (0..c).map(|ch| gv[ch] / libm::sqrtf(rv[ch] + BN_EPS)).collect();
                let shift: Vec<f32> = (0..c).map(|ch| bv[ch] - rm[ch] * scale[ch]).collect();
                let od = out.data_mut();
                for n in 0..xs.n {
                    for ch in 0..c {
                        let off = (n * c + ch) * plane;
                        for i in off..off + plane {
                            od[i] = xv[i] * scale[ch] + shift[ch];
                        }
                    }
                }
                // Eval-mode normalization is a fixed affine map; gamma/beta
                // gradients are not needed anywhere this mode is used.
                let needs = self.ng(x);
                Ok(self.push(out, Op::Affine { x, scale }, needs))
            }
        }
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f32) -> Var {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let needs = self.ng(x);
        self.push(out, Op::LeakyRelu { x, slope }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(libm::tanhf);
        let needs = self.ng(x);
        self.push(out, Op::Tanh { x }, needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let needs = self.ng(x);
        self.push(out, Op::Sigmoid { x }, needs)
    }

    /// Inverted dropout; identity in eval mode or when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f32, mode: Mode) -> Var {
        if mode == Mode::Eval || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let n = self.shape(x).len();
        let rng = self.rng.as_mut().expect("train-mode dropout needs Graph::with_rng");
        let mask: Vec<f32> = (0..n).map(|_| if rng.random::<f32>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let mut out = self.value(x).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= *m;
        }
        let needs = self.ng(x);
        self.push(out, Op::Mask { x, mask }, needs)
    }

    /// Concatenates along channels.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if (sa.n, sa.h, sa.w) != (sb.n, sb.h, sb.w) {
            return Err(Error::ShapeMismatch(alloc::format!("concat {} with {}", sa, sb)));
        }
        let shape = Shape::new(sa.n, sa.c + sb.c, sa.h, sa.w);
        let mut out = Vec::with_capacity(shape.len());
        for n in 0..sa.n {
            out.extend_from_slice(self.value(a).item(n));
            out.extend_from_slice(self.value(b).item(n));
        }
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::from_vec(shape, out)?, Op::Concat { a, b }, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch(alloc::format!("add {} to {}", self.shape(a), self.shape(b))));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let out = self.value(x).map(|v| v * s);
        let needs = self.ng(x);
        self.push(out, Op::Scale { x, s }, needs)
    }

    /// `out[n, c] = w[c] * x[n, c]`; `w` holds one weight per channel.
    pub fn channel_scale(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x);
        let wv = self.value(w).data();
        if wv.len() != xs.c {
            return Err(Error::ShapeMismatch(alloc::format!("{} channel weights for {}", wv.len(), xs)));
        }
        let mut out = self.value(x).clone();
        let plane = xs.plane();
        for n in 0..xs.n {
            for ch in 0..xs.c {
                let off = (n * xs.c + ch) * plane;
                for v in &mut out.data_mut()[off..off + plane] {
                    *v *= wv[ch];
                }
            }
        }
        let needs = self.ng(x) || self.ng(w);
        Ok(self.push(out, Op::ChannelScale { x, w }, needs))
    }

    /// Global average pooling to `[n, c, 1, 1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xs = self.shape(x);
        let plane = xs.plane();
        let xv = self.value(x).data();
        let data = (0..xs.n * xs.c)
            .map(|i| (xv[i * plane..(i + 1) * plane].iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
            .collect();
        let out = Tensor::from_vec(Shape::new(xs.n, xs.c, 1, 1), data).expect("pool shape");
        let needs = self.ng(x);
        self.push(out, Op::AvgPool { x }, needs)
    }

    /// Global max pooling to `[n, c, 1, 1]`; ties resolve to the first maximum.
    pub fn global_max_pool(&mut self, x: Var) -> Var {
        let xs = self.shape(x);
        let plane = xs.plane();
        let xv = self.value(x).data();
        let mut argmax = Vec::with_capacity(xs.n * xs.c);
        let mut data = Vec::with_capacity(xs.n * xs.c);
        for i in 0..xs.n * xs.c {
            let seg = &xv[i * plane..(i + 1) * plane];
            let mut best = 0;
            for (j, &v) in seg.iter().enumerate() {
                if v > seg[best] {
                    best = j;
                }
            }
            argmax.push(i * plane + best);
            data.push(seg[best]);
        }
        let out = Tensor::from_vec(Shape::new(xs.n, xs.c, 1, 1), data).expect("pool shape");
        let needs = self.ng(x);
        self.push(out, Op::MaxPool { x, argmax }, needs)
    }

    /// `out[n] = sum_c w[c] * x[n, c]` for pooled `[n, c, 1, 1]` inputs.
    pub fn channel_dot(&mut self, x: Var, w: Var) -> Result<Var> {
        let xs = self.shape(x);
        let wv = self.value(w).data();
        if xs.plane() != 1 || wv.len() != xs.c {
            return Err(Error::ShapeMismatch(alloc::format!("channel dot of {} with {} weights", xs, wv.len())));
        }
        let xv = self.value(x).data();
        let data = (0..xs.n).map(|n| (0..xs.c).map(|c| (wv[c] as f64) * (xv[n * xs.c + c] as f64)).sum::<f64>() as f32).collect();
        let out = Tensor::from_vec(Shape::new(xs.n, 1, 1, 1), data)?;
        let needs = self.ng(x) || self.ng(w);
        Ok(self.push(out, Op::ChannelDot { x, w }, needs))
    }

    /// Fully connected layer over flattened items. Weight `[out, in, 1, 1]`, bias `[1, out, 1, 1]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if ws.item_len() != xs.item_len() {
            return Err(Error::ShapeMismatch(alloc::format!("linear weight {} for input {}", ws, xs)));
        }
        let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, 1, 1));
        gemm(
            Mat::new(self.value(x).data(), xs.n, xs.item_len()),
            Mat::new(self.value(w).data(), ws.n, ws.item_len()).t(),
            0.0,
            out.data_mut(),
        );
        add_channel_bias(&mut out, self.value(b).data());
        let needs = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(out, Op::Linear { x, w, b }, needs))
    }

    /// Values of `vars` widened to `f64`, for handing to the loss functions.
    pub fn values_f64(&self, vars: &[Var]) -> Vec<Vec<f64>> {
        vars.iter().map(|&v| self.value(v).data().iter().map(|&x| x as f64).collect()).collect()
    }

    /// Inserts a scalar computed off-tape from `inputs`, together with its
    /// gradient with respect to each input.
    pub fn scalar_fn(&mut self, inputs: &[Var], value: f64, grads: Vec<Vec<f64>>) -> Result<Var> {
        if grads.len() != inputs.len() {
            return Err(Error::ShapeMismatch(alloc::format!("{} gradients for {} inputs", grads.len(), inputs.len())));
        }
        for (&v, g) in inputs.iter().zip(&grads) {
            if g.len() != self.shape(v).len() {
                return Err(Error::ShapeMismatch(alloc::format!("gradient of length {} for {}", g.len(), self.shape(v))));
            }
        }
        let needs = inputs.iter().any(|&v| self.ng(v));
        let grads = grads.into_iter().map(|g| g.into_iter().map(|x| x as f32).collect()).collect();
        Ok(self.push(Tensor::scalar(value as f32), Op::ScalarFn { inputs: inputs.to_vec(), grads }, needs))
    }

    /// `sum_i w_i * s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Var {
        let v: f64 = terms.iter().map(|&(t, w)| (w as f64) * (self.value(t).data()[0] as f64)).sum();
        let needs = terms.iter().any(|&(t, _)| self.ng(t));
        self.push(Tensor::scalar(v as f32), Op::WeightedSum { terms: terms.to_vec() }, needs)
    }

    /// Back-propagates from scalar `root`.
    pub fn backward(&self, root: Var) -> Grads {
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        let mut params = BTreeMap::new();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &mut grads, &mut params);
            grads[i] = Some(gy);
        }
        Grads { nodes: grads, params }
    }

    fn backward_node(&self, i: usize, gy: &Tensor, grads: &mut [Option<Tensor>], params: &mut BTreeMap<ParamKey, Tensor>) {
        let node = &self.nodes[i];
        let acc = |v: Var, g: Tensor, grads: &mut [Option<Tensor>]| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(t) => t.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(key) => match params.get_mut(key) {
                Some(t) => t.add_assign(gy),
                None => {
                    params.insert(*key, gy.clone());
                }
            },
            Op::Conv { x, w, b, stride, pad } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let xs = xv.shape();
                let ws = wv.shape();
                let g = ConvGeom::new(xs.c, xs.h, xs.w, ws.h, *stride, *pad);
                let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
                let mut dw = self.ng(*w).then(|| Tensor::zeros(ws));
                let mut dx = self.ng(*x).then(|| Tensor::zeros(xs));
                for n in 0..xs.n {
                    let gyn = Mat::new(gy.item(n), ws.n, g.col_cols());
                    if let Some(dw) = dw.as_mut() {
                        im2col(xv.item(n), &g, &mut cols);
                        gemm(gyn, Mat::new(&cols, g.col_rows(), g.col_cols()).t(), 1.0, dw.data_mut());
                    }
                    if let Some(dx) = dx.as_mut() {
                        gemm(Mat::new(wv.data(), ws.n, g.col_rows()).t(), gyn, 0.0, &mut cols);
                        col2im(&cols, &g, dx.item_mut(n));
                    }
                }
                if let Some(b) = b {
                    acc(*b, channel_sums(gy), grads);
                }
                if let Some(dw) = dw {
                    acc(*w, dw, grads);
                }
                if let Some(dx) = dx {
                    acc(*x, dx, grads);
                }
            }
            Op::ConvT { x, w, b, stride, pad } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let xs = xv.shape();
                let ws = wv.shape();
                let ys = gy.shape();
                let g = ConvGeom::new(ws.c, ys.h, ys.w, ws.h, *stride, *pad);
                let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
                let mut dw = self.ng(*w).then(|| Tensor::zeros(ws));
                let mut dx = self.ng(*x).then(|| Tensor::zeros(xs));
                for n in 0..xs.n {
                    im2col(gy.item(n), &g, &mut cols);
                    let dcols = Mat::new(&cols, g.col_rows(), g.col_cols());
                    if let Some(dx) = dx.as_mut() {
                        gemm(Mat::new(wv.data(), xs.c, g.col_rows()), dcols, 0.0, dx.item_mut(n));
                    }
                    if let Some(dw) = dw.as_mut() {
                        gemm(Mat::new(xv.item(n), xs.c, xs.plane()), dcols.t(), 1.0, dw.data_mut());
                    }
                }
                if let Some(b) = b {
                    acc(*b, channel_sums(gy), grads);
                }
                if let Some(dw) = dw {
                    acc(*w, dw, grads);
                }
                if let Some(dx) = dx {
                    acc(*x, dx, grads);
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                let s = gy.shape();
                let plane = s.plane();
                let m = (s.n * plane) as f64;
                let gv = self.value(*gamma).data();
                let gd = gy.data();
                let mut sum_dy = vec![0.0f64; s.c];
                let mut sum_dy_xhat = vec![0.0f64; s.c];
                for n in 0..s.n {
                    for ch in 0..s.c {
                        let off = (n * s.c + ch) * plane;
                        for i in off..off + plane {
                            sum_dy[ch] += gd[i] as f64;
                            sum_dy_xhat[ch] += (gd[i] * xhat[i]) as f64;
                        }
                    }
                }
                if self.ng(*x) {
                    let mut dx = Tensor::zeros(s);
                    let dd = dx.data_mut();
                    for n in 0..s.n {
                        for ch in 0..s.c {
                            let k = gv[ch] as f64 * inv_std[ch] as f64 / m;
                            let off = (n * s.c + ch) * plane;
                            for i in off..off + plane {
                                dd[i] = (k * (m * gd[i] as f64 - sum_dy[ch] - xhat[i] as f64 * sum_dy_xhat[ch])) as f32;
                            }
                        }
                    }
                    acc(*x, dx, grads);
                }
                let to_t = |v: Vec<f64>| Tensor::from_vec(Shape::new(1, v.len(), 1, 1), v.into_iter().map(|x| x as f32).collect()).unwrap();
                acc(*gamma, to_t(sum_dy_xhat), grads);
                acc(*beta, to_t(sum_dy), grads);
            }
            Op::Affine { x, scale } => {
                let s = gy.shape();
                let mut dx = gy.clone();
                let plane = s.plane();
                for n in 0..s.n {
                    for ch in 0..s.c {
                        let off = (n * s.c + ch) * plane;
                        for v in &mut dx.data_mut()[off..off + plane] {
                            *v *= scale[ch];
                        }
                    }
                }
                acc(*x, dx, grads);
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let mut dx = gy.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(xv) {
                    if v <= 0.0 {
                        *d *= *slope;
                    }
                }
                acc(*x, dx, grads);
            }
            Op::Tanh { x } => {
                let y = node.value.get().data();
                let mut dx = gy.clone();
                for (d, &t) in dx.data_mut().iter_mut().zip(y) {
                    *d *= 1.0 - t * t;
                }
                acc(*x, dx, grads);
            }
            Op::Sigmoid { x } => {
                let y = node.value.get().data();
                let mut dx = gy.clone();
                for (d, &s) in dx.data_mut().iter_mut().zip(y) {
                    *d *= s * (1.0 - s);
                }
                acc(*x, dx, grads);
            }
            Op::Mask { x, mask } => {
                let mut dx = gy.clone();
                for (d, &m) in dx.data_mut().iter_mut().zip(mask) {
                    *d *= m;
                }
                acc(*x, dx, grads);
            }
            Op::Concat { a, b } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (la, lb) = (sa.item_len(), sb.item_len());
                let mut da = Vec::with_capacity(sa.len());
                let mut db = Vec::with_capacity(sb.len());
                for n in 0..sa.n {
                    let item = gy.item(n);
                    da.extend_from_slice(&item[..la]);
                    db.extend_from_slice(&item[la..la + lb]);
                }
                acc(*a, Tensor::from_vec(sa, da).unwrap(), grads);
                acc(*b, Tensor::from_vec(sb, db).unwrap(), grads);
            }
            Op::Add { a, b } => {
                acc(*a, gy.clone(), grads);
                acc(*b, gy.clone(), grads);
            }
            Op::Scale { x, s } => {
                acc(*x, gy.map(|v| v * *s), grads);
            }
            Op::ChannelScale { x, w } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let s = xv.shape();
                let plane = s.plane();
                let mut dx = gy.clone();
                let mut dw = vec![0.0f64; s.c];
                for n in 0..s.n {
                    for ch in 0..s.c {
                        let off = (n * s.c + ch) * plane;
                        for i in off..off + plane {
                            dw[ch] += (gy.data()[i] * xv.data()[i]) as f64;
                            dx.data_mut()[i] *= wv.data()[ch];
                        }
                    }
                }
                acc(*x, dx, grads);
                let dw = Tensor::from_vec(wv.shape(), dw.into_iter().map(|v| v as f32).collect()).unwrap();
                acc(*w, dw, grads);
            }
            Op::AvgPool { x } => {
                let s = self.shape(*x);
                let plane = s.plane();
                let mut dx = Tensor::zeros(s);
                for (i, &g) in gy.data().iter().enumerate() {
                    dx.data_mut()[i * plane..(i + 1) * plane].fill(g / plane as f32);
                }
                acc(*x, dx, grads);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = Tensor::zeros(self.shape(*x));
                for (&pos, &g) in argmax.iter().zip(gy.data()) {
                    dx.data_mut()[pos] += g;
                }
                acc(*x, dx, grads);
            }
            Op::ChannelDot { x, w } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let s = xv.shape();
                let mut dx = Tensor::zeros(s);
                let mut dw = vec![0.0f64; s.c];
                for n in 0..s.n {
                    let g = gy.data()[n];
                    for c in 0..s.c {
                        dx.data_mut()[n * s.c + c] = g * wv.data()[c];
                        dw[c] += (g * xv.data()[n * s.c + c]) as f64;
                    }
                }
                acc(*x, dx, grads);
                let dw = Tensor::from_vec(wv.shape(), dw.into_iter().map(|v| v as f32).collect()).unwrap();
                acc(*w, dw, grads);
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let xs = xv.shape();
                let ws = wv.shape();
                let gyn = Mat::new(gy.data(), xs.n, ws.n);
                if self.ng(*x) {
                    let mut dx = Tensor::zeros(xs);
                    gemm(gyn, Mat::new(wv.data(), ws.n, ws.item_len()), 0.0, dx.data_mut());
                    acc(*x, dx, grads);
                }
                if self.ng(*w) {
                    let mut dw = Tensor::zeros(ws);
                    gemm(gyn.t(), Mat::new(xv.data(), xs.n, xs.item_len()), 0.0, dw.data_mut());
                    acc(*w, dw, grads);
                }
                acc(*b, channel_sums(gy), grads);
            }
            Op::ScalarFn { inputs, grads: local } => {
                let g = gy.data()[0];
                for (&v, lg) in inputs.iter().zip(local) {
                    let s = self.shape(v);
                    let t = Tensor::from_vec(s, lg.iter().map(|&d| d * g).collect()).unwrap();
                    acc(v, t, grads);
                }
            }
            Op::WeightedSum { terms } => {
                let g = gy.data()[0];
                for &(v, w) in terms {
                    acc(v, Tensor::scalar(g * w), grads);
                }
            }
        }
    }
}

/// Parameter indices of one batch-norm layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BnIndices {
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
}

pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + libm::expf(-v))
    } else {
        let e = libm::expf(v);
        e / (1.0 + e)
    }
}

fn add_channel_bias(out: &mut Tensor, bias: &[f32]) {
    let s = out.shape();
    let plane = s.plane();
    for n in 0..s.n {
        for ch in 0..s.c {
            let off = (n * s.c + ch) * plane;
            for v in &mut out.data_mut()[off..off + plane] {
                *v += bias[ch];
            }
        }
    }
}

/// Per-channel sums over batch and space, shaped `[1, c, 1, 1]`.
fn channel_sums(t: &Tensor) -> Tensor {
    let s = t.shape();
    let plane = s.plane();
    let mut sums = vec![0.0f64; s.c];
    for n in 0..s.n {
        for (ch, acc) in sums.iter_mut().enumerate() {
            let off = (n * s.c + ch) * plane;
            *acc += t.data()[off..off + plane].iter().map(|&v| v as f64).sum::<f64>();
        }
    }
    Tensor::from_vec(Shape::new(1, s.c, 1, 1), sums.into_iter().map(|v| v as f32).collect()).unwrap()
}
