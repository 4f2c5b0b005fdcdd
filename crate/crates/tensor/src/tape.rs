//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its output value. [`Tape::backward`]
//! walks the nodes in reverse and accumulates gradients for every node that
//! (transitively) depends on a gradient-requiring leaf or parameter.

use std::collections::HashSet;

use crate::element::{cst, Element};
use crate::kernels::{self, conv, edges, warp, BatchStats};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Param { store: u64, id: ParamId },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    LeakyRelu { x: Var, slope: T },
    Sigmoid { x: Var },
    Softplus { x: Var },
    MaxPool2 { x: Var, argmax: Vec<u32> },
    Upsample2 { x: Var },
    Concat { parts: Vec<Var> },
    Slice { x: Var, start: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    MulChannel { x: Var, m: Var },
    ScaleSamples { x: Var, scales: Vec<T> },
    Affine { x: Var, scale: T },
    Warp { src: Var, flow: Var },
    Clamp { x: Var, lo: T, hi: T },
    BatchNorm { x: Var, gamma: Var, beta: Var, stats: BatchStats<T>, train: bool },
    SoftEdges { x: Var },
    Mean { x: Var },
    MeanAbsDiff { a: Var, b: Var },
    SpatialMean { x: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    frozen: HashSet<u64>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            frozen: HashSet::new(),
        }
    }

    /// A tape that records values only; `backward` yields no gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Parameters of `store` enter this tape as constants.
    pub fn freeze(&mut self, store: &ParamStore<T>) {
        self.frozen.insert(store.tag());
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

    pub fn shape(&self, v: Var) -> [usize; 4] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// A constant input.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// An input whose gradient is reported by [`Gradients::wrt`].
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let trainable = self.grad_enabled && !self.frozen.contains(&store.tag());
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param { store: store.tag(), id },
            needs_grad: trainable,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies a value into a fresh constant, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.input(value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = conv::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, &inputs)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        self.push(out, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::sigmoid);
        self.push(out, Op::Sigmoid { x }, &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::softplus);
        self.push(out, Op::Softplus { x }, &[x])
    }

    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (out, argmax) = kernels::max_pool2(self.value(x));
        self.push(out, Op::MaxPool2 { x, argmax }, &[x])
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let out = kernels::upsample2(self.value(x));
        self.push(out, Op::Upsample2 { x }, &[x])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let values: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_channels(&values).expect("concat: incompatible shapes");
        self.push(out, Op::Concat { parts: parts.to_vec() }, parts)
    }

    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).slice_channels(start, len).expect("slice: channel range");
        self.push(out, Op::Slice { x, start }, &[x])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |p, q| p + q);
        self.push(out, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |p, q| p - q);
        self.push(out, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |p, q| p * q);
        self.push(out, Op::Mul { a, b }, &[a, b])
    }

    /// Multiplies every channel of `x` by the single-channel map `m`.
    pub fn mul_channel(&mut self, x: Var, m: Var) -> Var {
        let xv = self.value(x);
        let mv = self.value(m);
        let [n, c, h, w] = xv.shape();
        assert_eq!(mv.shape(), [n, 1, h, w], "mul_channel: mask shape");
        let plane = h * w;
        let mut out = xv.clone();
        for s in 0..n {
            let mask = mv.sample(s);
            for ch in 0..c {
                let dst = &mut out.sample_mut(s)[ch * plane..(ch + 1) * plane];
                for (d, &k) in dst.iter_mut().zip(mask) {
                    *d = *d * k;
                }
            }
        }
        self.push(out, Op::MulChannel { x, m }, &[x, m])
    }

    /// Multiplies sample `i` of `x` by `scales[i]`.
    pub fn scale_samples(&mut self, x: Var, scales: &[T]) -> Var {
        let mut out = self.value(x).clone();
        assert_eq!(scales.len(), out.batch(), "scale_samples: one scale per sample");
        for (s, &k) in scales.iter().enumerate() {
            for v in out.sample_mut(s) {
                *v = *v * k;
            }
        }
        self.push(out, Op::ScaleSamples { x, scales: scales.to_vec() }, &[x])
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let out = self.value(x).map(|v| scale * v + shift);
        self.push(out, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Var {
        self.affine(x, scale, T::zero())
    }

    pub fn warp(&mut self, src: Var, flow: Var) -> Var {
        let out = warp::warp_forward(self.value(src), self.value(flow));
        self.push(out, Op::Warp { src, flow }, &[src, flow])
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).map(|v| if v.is_nan() { v } else { v.max(lo).min(hi) });
        self.push(out, Op::Clamp { x, lo, hi }, &[x])
    }

    /// Training-mode batch normalization; returns the batch statistics so the
    /// caller can update running averages.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> (Var, BatchStats<T>) {
        let stats = kernels::batch_stats(self.value(x), eps);
        let out = kernels::channel_normalize(
            self.value(x),
            &stats.mean,
            &stats.inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let v = self.push(
            out,
            Op::BatchNorm { x, gamma, beta, stats: stats.clone(), train: true },
            &[x, gamma, beta],
        );
        (v, stats)
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Var {
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let out = kernels::channel_normalize(
            self.value(x),
            mean,
            &inv_std,
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let stats = BatchStats {
            mean: mean.to_vec(),
            var: var.to_vec(),
            inv_std,
            count: 0,
        };
        self.push(out, Op::BatchNorm { x, gamma, beta, stats, train: false }, &[x, gamma, beta])
    }

    pub fn soft_edges(&mut self, x: Var) -> Var {
        let out = edges::soft_edges_forward(self.value(x));
        self.push(out, Op::SoftEdges { x }, &[x])
    }

    /// Mean over all elements, as a `1×1×1×1` tensor.
    pub fn mean(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        self.push(out, Op::Mean { x }, &[x])
    }

    /// `mean(|a - b|)` over all elements.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mean_abs_diff: shape mismatch");
        let total: T = av.data().iter().zip(bv.data()).map(|(&p, &q)| (p - q).abs()).sum();
        let out = Tensor::scalar(total / T::from_usize(av.numel()).unwrap());
        self.push(out, Op::MeanAbsDiff { a, b }, &[a, b])
    }

    /// Mean over each `H × W` plane: `N×C×H×W → N×C×1×1`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let [n, c, h, w] = xv.shape();
        let plane = h * w;
        let denom = T::from_usize(plane).unwrap();
        let data = xv
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() / denom)
            .collect();
        let out = Tensor::from_vec([n, c, 1, 1], data).unwrap();
        self.push(out, Op::SpatialMean { x }, &[x])
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.needs(loss) {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf | Op::Param { .. }) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n.op {
                Op::Param { store, id } if n.needs_grad => Some((store, id, Var(i))),
                _ => None,
            })
            .collect();
        Gradients { grads, params }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backward_node(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf | Op::Param { .. } => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) =
                    conv::conv2d_backward(self.value(*x), self.value(*w), g, *stride, *pad, self.needs(*x));
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
                if let Some(b) = b {
                    let db = db.reshape(self.shape(*b)).expect("bias shape");
                    self.accumulate(grads, *b, db);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let d = self.value(*x).zip_map(g, |v, gi| if v > T::zero() { gi } else { gi * *slope });
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid { x } => {
                let d = node.value.zip_map(g, |y, gi| gi * y * (T::one() - y));
                self.accumulate(grads, *x, d);
            }
            Op::Softplus { x } => {
                let d = self.value(*x).zip_map(g, |v, gi| gi * kernels::sigmoid(v));
                self.accumulate(grads, *x, d);
            }
            Op::MaxPool2 { x, argmax } => {
                let d = kernels::max_pool2_backward(self.shape(*x), argmax, g);
                self.accumulate(grads, *x, d);
            }
            Op::Upsample2 { x } => {
                self.accumulate(grads, *x, kernels::upsample2_backward(g));
            }
            Op::Concat { parts } => {
                let mut start = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.needs(p) {
                        self.accumulate(grads, p, g.slice_channels(start, c).expect("concat grad"));
                    }
                    start += c;
                }
            }
            Op::Slice { x, start } => {
                if self.needs(*x) {
                    let [n, c, h, w] = self.shape(*x);
                    let len = g.channels();
                    let plane = h * w;
                    let mut d = Tensor::zeros([n, c, h, w]);
                    for s in 0..n {
                        d.sample_mut(s)[start * plane..(start + len) * plane].copy_from_slice(g.sample(s));
                    }
                    self.accumulate(grads, *x, d);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul { a, b } => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |gi, q| gi * q));
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |gi, p| gi * p));
                }
            }
            Op::MulChannel { x, m } => {
                let (xv, mv) = (self.value(*x), self.value(*m));
                let [n, c, h, w] = xv.shape();
                let plane = h * w;
                if self.needs(*x) {
                    let mut dx = g.clone();
                    for s in 0..n {
                        let mask = mv.sample(s).to_vec();
                        for ch in 0..c {
                            for (d, &k) in dx.sample_mut(s)[ch * plane..(ch + 1) * plane].iter_mut().zip(&mask) {
                                *d = *d * k;
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*m) {
                    let mut dm = Tensor::zeros(mv.shape());
                    for s in 0..n {
                        let (gs, xs) = (g.sample(s), xv.sample(s));
                        let dst = dm.sample_mut(s);
                        for ch in 0..c {
                            for i in 0..plane {
                                dst[i] = dst[i] + gs[ch * plane + i] * xs[ch * plane + i];
                            }
                        }
                    }
                    self.accumulate(grads, *m, dm);
                }
            }
            Op::ScaleSamples { x, scales } => {
                let mut d = g.clone();
                for (s, &k) in scales.iter().enumerate() {
                    for v in d.sample_mut(s) {
                        *v = *v * k;
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Affine { x, scale } => {
                self.accumulate(grads, *x, g.map(|v| v * *scale));
            }
            Op::Warp { src, flow } => {
                let (ds, df) = warp::warp_backward(
                    self.value(*src),
                    self.value(*flow),
                    g,
                    self.needs(*src),
                    self.needs(*flow),
                );
                if let Some(ds) = ds {
                    self.accumulate(grads, *src, ds);
                }
                if let Some(df) = df {
                    self.accumulate(grads, *flow, df);
                }
            }
            Op::Clamp { x, lo, hi } => {
                let d = self
                    .value(*x)
                    .zip_map(g, |v, gi| if v >= *lo && v <= *hi { gi } else { T::zero() });
                self.accumulate(grads, *x, d);
            }
            Op::BatchNorm { x, gamma, beta, stats, train } => {
                let gv = self.value(*gamma).data().to_vec();
                let (dx, dgamma, dbeta) = if *train {
                    kernels::batch_norm_backward(self.value(*x), stats, &gv, g)
                } else {
                    eval_norm_backward(self.value(*x), stats, &gv, g)
                };
                let cshape = self.shape(*gamma);
                self.accumulate(grads, *x, dx);
                self.accumulate(grads, *gamma, Tensor::from_vec(cshape, dgamma).unwrap());
                self.accumulate(grads, *beta, Tensor::from_vec(cshape, dbeta).unwrap());
            }
            Op::SoftEdges { x } => {
                self.accumulate(grads, *x, edges::soft_edges_backward(self.value(*x), g));
            }
            Op::Mean { x } => {
                let n = T::from_usize(self.value(*x).numel()).unwrap();
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), g.data()[0] / n));
            }
            Op::MeanAbsDiff { a, b } => {
                let n = T::from_usize(self.value(*a).numel()).unwrap();
                let scale = g.data()[0] / n;
                let sign = |d: T| {
                    if d > T::zero() {
                        scale
                    } else if d < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                };
                let da = self.value(*a).zip_map(self.value(*b), |p, q| sign(p - q));
                if self.needs(*b) {
                    self.accumulate(grads, *b, da.map(|v| -v));
                }
                self.accumulate(grads, *a, da);
            }
            Op::SpatialMean { x } => {
                let [n, c, h, w] = self.shape(*x);
                let plane = h * w;
                let inv = T::one() / T::from_usize(plane).unwrap();
                let mut d = Tensor::zeros([n, c, h, w]);
                for (j, chunk) in d.data_mut().chunks_mut(plane).enumerate() {
                    chunk.fill(g.data()[j] * inv);
                }
                self.accumulate(grads, *x, d);
            }
        }
    }
}

fn eval_norm_backward<T: Element>(
    input: &Tensor<T>,
    stats: &BatchStats<T>,
    gamma: &[T],
    g: &Tensor<T>,
) -> (Tensor<T>, Vec<T>, Vec<T>) {
    let [n, c, h, w] = input.shape();
    let plane = h * w;
    let mut dx = g.clone();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * plane;
            let k = gamma[ch] * stats.inv_std[ch];
            for i in off..off + plane {
                let gi = g.data()[i];
                dbeta[ch] = dbeta[ch] + gi;
                dgamma[ch] = dgamma[ch] + gi * (input.data()[i] - stats.mean[ch]) * stats.inv_std[ch];
                dx.data_mut()[i] = gi * k;
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(u64, ParamId, Var)>,
}

impl<T: Element> Gradients<T> {
    /// Gradient with respect to a leaf created by [`Tape::input_with_grad`] or
    /// [`Tape::param`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradients for every entry of `store`, summed over repeated uses and
    /// indexed like the store.
    pub fn for_store(&self, store: &ParamStore<T>) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = (0..store.len()).map(|_| None).collect();
        for &(tag, id, v) in &self.params {
            if tag != store.tag() {
                continue;
            }
            if let Some(g) = &self.grads[v.0] {
                match &mut out[id.index()] {
                    Some(acc) => acc.add_assign(g),
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

/// Central finite-difference gradient of `f` at `x`, for tests and diagnostics.
pub fn finite_difference<T: Element>(x: &Tensor<T>, step: f64, mut f: impl FnMut(&Tensor<T>) -> T) -> Tensor<T> {
    let mut probe = x.clone();
    let mut out = Tensor::zeros(x.shape());
    let h = cst::<T>(step);
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        out.data_mut()[i] = (up - down) / (h + h);
    }
    out
}
