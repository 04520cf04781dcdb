use crate::error::{shape_err, Error, Result};
use crate::raster::IGNORE;

use super::kernels::{conv_backward, conv_forward, ConvDims};
use super::{Scalar, Tensor4};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    MaxPool2 {
        x: Var,
        /// Flat input index of the winning element for every output element.
        argmax: Vec<usize>,
    },
    Upsample2 {
        x: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
        targets: Vec<u8>,
        weights: Vec<T>,
        inv_valid: T,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor4<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records forward operations in execution order; `backward` replays them in reverse.
#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
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
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor4<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient is accumulated for it.
    pub fn input(&mut self, t: Tensor4<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A trainable leaf whose gradient is kept after `backward`.
    pub fn param(&mut self, t: Tensor4<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor4<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// 3x3, stride 1, zero padding 1 cross-correlation plus bias.
    ///
    /// `k` has shape `[cout, cin, 3, 3]`; `b` holds `cout` values in any shape.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Var) -> Result<Var> {
        let [n, cin, h, w] = self.value(x).shape();
        let [cout, kcin, kh, kw] = self.value(k).shape();
        if kh != 3 || kw != 3 {
            return Err(shape_err!("conv2d kernel must be 3x3, got {kh}x{kw}"));
        }
        if kcin != cin {
            return Err(shape_err!(
                "conv2d kernel expects {kcin} input channels, input has {cin}"
            ));
        }
        if self.value(b).len() != cout {
            return Err(shape_err!(
                "conv2d bias has {} values for {cout} output channels",
                self.value(b).len()
            ));
        }
        let d = ConvDims { n, cin, cout, h, w };
        let mut out = Tensor4::zeros([n, cout, h, w]);
        conv_forward(
            d,
            self.value(x).data(),
            self.value(k).data(),
            self.value(b).data(),
            out.data_mut(),
        );
        let rg = self.rg(x) || self.rg(k) || self.rg(b);
        Ok(self.push(out, Op::Conv2d { x, k, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src
            .data()
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let out = Tensor4::new(src.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(out, Op::Relu { x }, rg)
    }

    /// 2x2 max pooling with stride 2; ties resolve to the first element in scan order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let [n, c, h, w] = src.shape();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(shape_err!("maxpool2 needs even spatial dims, got {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor4::zeros([n, c, oh, ow]);
        let mut argmax = Vec::with_capacity(out.len());
        let data = src.data();
        let o = out.data_mut();
        let mut oi = 0;
        for plane in 0..n * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xo in 0..ow {
                    let i0 = base + 2 * y * w + 2 * xo;
                    let mut best = i0;
                    for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                        if data[cand] > data[best] {
                            best = cand;
                        }
                    }
                    o[oi] = data[best];
                    argmax.push(best);
                    oi += 1;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, rg))
    }

    /// Nearest-neighbour upsampling by 2 in both spatial dims.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let [n, c, h, w] = src.shape();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = Tensor4::zeros([n, c, oh, ow]);
        let o = out.data_mut();
        for plane in 0..n * c {
            let s = src.plane(plane / c, plane % c);
            let dst = &mut o[plane * oh * ow..][..oh * ow];
            for y in 0..oh {
                let srow = &s[(y / 2) * w..][..w];
                for (xo, v) in dst[y * ow..][..ow].iter_mut().enumerate() {
                    *v = srow[xo / 2];
                }
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Upsample2 { x }, rg)
    }

    /// Stacks `a` then `b` along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [na, ca, ha, wa] = self.value(a).shape();
        let [nb, cb, hb, wb] = self.value(b).shape();
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(shape_err!(
                "concat needs matching n,h,w: {:?} vs {:?}",
                (na, ha, wa),
                (nb, hb, wb)
            ));
        }
        let hw = ha * wa;
        let mut data = Vec::with_capacity(na * (ca + cb) * hw);
        for s in 0..na {
            data.extend_from_slice(&self.value(a).data()[s * ca * hw..(s + 1) * ca * hw]);
            data.extend_from_slice(&self.value(b).data()[s * cb * hw..(s + 1) * cb * hw]);
        }
        let out = Tensor4::new([na, ca + cb, ha, wa], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Concat { a, b }, rg))
    }

    /// Class-weighted softmax cross-entropy, averaged over non-ignored pixels.
    ///
    /// `targets` holds one label per `(sample, y, x)`; label 255 contributes nothing.
    pub fn softmax_ce_loss(&mut self, logits: Var, targets: &[u8], weights: &[T]) -> Result<Var> {
        let src = self.value(logits);
        let [n, c, h, w] = src.shape();
        let hw = h * w;
        if targets.len() != n * hw {
            return Err(shape_err!(
                "loss targets have {} labels for {n}x{h}x{w} pixels",
                targets.len()
            ));
        }
        if weights.len() != c {
            return Err(shape_err!("{} class weights for {c} classes", weights.len()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != IGNORE && usize::from(t) >= c) {
            return Err(shape_err!("target label {bad} out of range for {c} classes"));
        }
        let valid = targets.iter().filter(|&&t| t != IGNORE).count();
        if valid == 0 {
            return Err(Error::Degenerate("every pixel in the batch is ignored".into()));
        }

        let data = src.data();
        let mut probs = vec![T::zero(); data.len()];
        let mut total = T::zero();
        for s in 0..n {
            for p in 0..hw {
                let t = targets[s * hw + p];
                let idx = |k: usize| (s * c + k) * hw + p;
                let mut m = data[idx(0)];
                for k in 1..c {
                    m = m.max(data[idx(k)]);
                }
                let mut z = T::zero();
                for k in 0..c {
                    let e = (data[idx(k)] - m).exp();
                    probs[idx(k)] = e;
                    z += e;
                }
                for k in 0..c {
                    probs[idx(k)] = probs[idx(k)] / z;
                }
                if t != IGNORE {
                    let t = usize::from(t);
                    let nll = z.ln() + m - data[idx(t)];
                    total += weights[t] * nll;
                }
            }
        }
        let inv_valid = T::one() / T::lit(valid as f64);
        let out = Tensor4::new([1, 1, 1, 1], vec![total * inv_valid])?;
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::SoftmaxCe {
                logits,
                probs,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                inv_valid,
            },
            rg,
        ))
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(shape_err!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            ));
        }
        self.backward_with(loss, &[T::one()])
    }

    /// Backpropagates an arbitrary cotangent `seed` from `out`.
    pub fn backward_with(&mut self, out: Var, seed: &[T]) -> Result<()> {
        if seed.len() != self.value(out).len() {
            return Err(shape_err!(
                "seed has {} values for output of {}",
                seed.len(),
                self.value(out).len()
            ));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[out.0] = Some(seed.to_vec());

        for i in (0..=out.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Relu { x } => {
                let xv = nodes[x.0].value.data();
                if let Some(gx) = slot(nodes, grads, *x) {
                    for ((d, &gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                        if xi > T::zero() {
                            *d += gi;
                        }
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (&src, &gi) in argmax.iter().zip(g) {
                        gx[src] += gi;
                    }
                }
            }
            Op::Upsample2 { x } => {
                let [n, c, h, w] = nodes[x.0].value.shape();
                if let Some(gx) = slot(nodes, grads, *x) {
                    let ow = 2 * w;
                    for plane in 0..n * c {
                        let src = &g[plane * 4 * h * w..][..4 * h * w];
                        let dst = &mut gx[plane * h * w..][..h * w];
                        for y in 0..h {
                            for xo in 0..w {
                                let top = 2 * y * ow + 2 * xo;
                                let bot = top + ow;
                                dst[y * w + xo] += (src[top] + src[top + 1]) + (src[bot] + src[bot + 1]);
                            }
                        }
                    }
                }
            }
            Op::Concat { a, b } => {
                let [n, ca, h, w] = nodes[a.0].value.shape();
                let cb = nodes[b.0].value.c();
                let hw = h * w;
                let ct = ca + cb;
                if let Some(ga) = slot(nodes, grads, *a) {
                    for s in 0..n {
                        for (d, &gi) in ga[s * ca * hw..(s + 1) * ca * hw].iter_mut().zip(&g[s * ct * hw..]) {
                            *d += gi;
                        }
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for s in 0..n {
                        for (d, &gi) in gb[s * cb * hw..(s + 1) * cb * hw]
                            .iter_mut()
                            .zip(&g[(s * ct + ca) * hw..])
                        {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Conv2d { x, k, b } => {
                let [n, cin, h, w] = nodes[x.0].value.shape();
                let cout = nodes[k.0].value.n();
                let d = ConvDims { n, cin, cout, h, w };
                let xv = nodes[x.0].value.data();
                let kv = nodes[k.0].value.data();
                let mut dk = vec![T::zero(); kv.len()];
                let mut db = vec![T::zero(); cout];
                let mut dx = nodes[x.0].requires_grad.then(|| vec![T::zero(); xv.len()]);
                conv_backward(d, xv, kv, g, dx.as_deref_mut(), &mut dk, &mut db);
                if let Some(gx) = slot(nodes, grads, *x) {
                    for (a, v) in gx.iter_mut().zip(dx.unwrap_or_default()) {
                        *a += v;
                    }
                }
                if let Some(gk) = slot(nodes, grads, *k) {
                    for (a, v) in gk.iter_mut().zip(dk) {
                        *a += v;
                    }
                }
                if let Some(gb) = slot(nodes, grads, *b) {
                    for (a, v) in gb.iter_mut().zip(db) {
                        *a += v;
                    }
                }
            }
            Op::SoftmaxCe {
                logits,
                probs,
                targets,
                weights,
                inv_valid,
            } => {
                let [n, c, h, w] = nodes[logits.0].value.shape();
                let hw = h * w;
                let scale = g[0] * *inv_valid;
                if let Some(gl) = slot(nodes, grads, *logits) {
                    for s in 0..n {
                        for p in 0..hw {
                            let t = targets[s * hw + p];
                            if t == IGNORE {
                                continue;
                            }
                            let t = usize::from(t);
                            let wt = weights[t] * scale;
                            for k in 0..c {
                                let idx = (s * c + k) * hw + p;
                                let onehot = if k == t { T::one() } else { T::zero() };
                                gl[idx] += wt * (probs[idx] - onehot);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradient buffer of `v`, allocated on first use; `None` for constants.
fn slot<'a, T: Scalar>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut [T]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice())
}
