//! A small reverse-mode tape over [`Tensor`] values.
//!
//! Every network in the crate builds its forward pass on a [`Graph`]. Leaves
//! are either constants or variables; only nodes reachable from a variable
//! take part in the backward sweep, so frozen weights cost nothing beyond
//! their forward use.

use crate::tensor::{bilinear_backward, bilinear_forward, col2im, gemm, im2col, AxisTaps, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const DEMOD_EPS: f64 = 1e-8;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sum(Var),
    Mean(Var),
    MatMul(Var, Var),
    AddChannelBias(Var, Var),
    LeakyRelu(Var, f64),
    Tanh(Var),
    Softplus(Var),
    Conv2d { x: Var, w: Var, pad: usize },
    Modulate { w: Var, s: Var, demod: bool },
    Resize { x: Var, ty: AxisTaps, tx: AxisTaps },
    AvgPool2(Var),
    Concat(Vec<Var>),
    Reshape(Var),
    Row(Var, usize),
    ChannelNormalize { x: Var, eps: f64 },
    GlobalAvgPool(Var),
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64>, total_weight: f64 },
    Cosine(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Result of [`Graph::backward`]: one optional gradient per node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0].as_ref().map(|g| Tensor::new(&self.shapes[v.0], g.clone()))
    }

    /// Gradient of `v`, zeros if the loss does not depend on it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let t = self.value(v);
        assert_eq!(t.len(), 1, "not a scalar: {:?}", t.shape());
        t.data()[0]
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let out = va.zip_map(vb, f);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| x * k);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, k), ng)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let ng = self.ng(a);
        self.push(out, Op::Square(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Mean(a), ng)
    }

    /// Mean squared difference of two same-shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        self.mean(sq)
    }

    /// `[m, k] × [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0], "matmul shapes {sa:?} × {sb:?}");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&[m, n], out), Op::MatMul(a, b), ng)
    }

    /// Adds `b[c]` to every element of channel `c` of `x` (`x` is `[C, ...]`).
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Var {
        let c = self.shape(x)[0];
        assert_eq!(self.shape(b), [c], "bias shape");
        let mut out = self.value(x).clone();
        let per = out.len() / c;
        let bias = self.value(b).data().to_vec();
        for (chunk, bv) in out.data_mut().chunks_mut(per).zip(bias) {
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(out, Op::AddChannelBias(x, b), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| if x >= 0.0 { x } else { slope * x });
        let ng = self.ng(a);
        self.push(out, Op::LeakyRelu(a, slope), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        let ng = self.ng(a);
        self.push(out, Op::Tanh(a), ng)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        let ng = self.ng(a);
        self.push(out, Op::Softplus(a), ng)
    }

    /// Stride-1 convolution of `x: [I, H, W]` with `w: [O, I, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Var {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        assert!(sx.len() == 3 && sw.len() == 4 && sw[1] == sx[0] && sw[2] == sw[3], "conv shapes {sx:?} {sw:?}");
        let (ci, h, wd) = (sx[0], sx[1], sx[2]);
        let (co, k) = (sw[0], sw[2]);
        let oh = h + 2 * pad + 1 - k;
        let ow = wd + 2 * pad + 1 - k;
        let mut out = vec![0.0; co * oh * ow];
        if k == 1 && pad == 0 {
            gemm(co, ci, oh * ow, self.value(w).data(), false, self.value(x).data(), false, &mut out, 0.0);
        } else {
            let col = im2col(self.value(x).data(), ci, h, wd, k, pad);
            gemm(co, ci * k * k, oh * ow, self.value(w).data(), false, &col, false, &mut out, 0.0);
        }
        let ng = self.ng(x) || self.ng(w);
        self.push(Tensor::new(&[co, oh, ow], out), Op::Conv2d { x, w, pad }, ng)
    }

    /// Style modulation of a conv weight `w: [O, I, k, k]` by `s: [I]`,
    /// optionally followed by per-output-channel demodulation.
    pub fn modulate(&mut self, w: Var, s: Var, demod: bool) -> Var {
        let sw = self.shape(w).to_vec();
        let i = sw[1];
        assert_eq!(self.shape(s), [i], "style length must equal input channels");
        let kk = sw[2] * sw[3];
        let styles = self.value(s).data().to_vec();
        let mut out = self.value(w).clone();
        for (idx, v) in out.data_mut().iter_mut().enumerate() {
            *v *= styles[(idx / kk) % i];
        }
        if demod {
            for chunk in out.data_mut().chunks_mut(i * kk) {
                let d = 1.0 / (chunk.iter().map(|v| v * v).sum::<f64>() + DEMOD_EPS).sqrt();
                chunk.iter_mut().for_each(|v| *v *= d);
            }
        }
        let ng = self.ng(w) || self.ng(s);
        self.push(out, Op::Modulate { w, s, demod }, ng)
    }

    /// Bilinear resize of `[C, H, W]` to `[C, out_h, out_w]` (align-corners-false).
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3);
        if s[1] == out_h && s[2] == out_w {
            return x;
        }
        let ty = AxisTaps::new(s[1], out_h);
        let tx = AxisTaps::new(s[2], out_w);
        let out = bilinear_forward(self.value(x).data(), s[0], s[1], s[2], &ty, &tx);
        let ng = self.ng(x);
        self.push(Tensor::new(&[s[0], out_h, out_w], out), Op::Resize { x, ty, tx }, ng)
    }

    /// 2×2 average pooling of `[C, H, W]` (H, W even).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even sizes");
        let (oh, ow) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * oh * ow];
        for ci in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let b = ci * h * w + 2 * y * w + 2 * xx;
                    out[(ci * oh + y) * ow + xx] = 0.25 * (src[b] + src[b + 1] + src[b + w] + src[b + w + 1]);
                }
            }
        }
        let ng = self.ng(x);
        self.push(Tensor::new(&[c, oh, ow], out), Op::AvgPool2(x), ng)
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(&s[1..], &tail[..], "concat trailing shapes differ");
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(Tensor::new(&shape, data), Op::Concat(parts.to_vec()), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape);
        let ng = self.ng(x);
        self.push(out, Op::Reshape(x), ng)
    }

    /// Row `r` of a 2-d tensor as a 1-d tensor.
    pub fn row(&mut self, x: Var, r: usize) -> Var {
        let out = Tensor::new(&[self.shape(x)[1]], self.value(x).row(r).to_vec());
        let ng = self.ng(x);
        self.push(out, Op::Row(x, r), ng)
    }

    /// Unit-normalizes `[C, ...]` across channels at every position.
    pub fn channel_normalize(&mut self, x: Var, eps: f64) -> Var {
        let t = self.value(x);
        let c = t.shape()[0];
        let p = t.len() / c;
        let src = t.data();
        let mut out = src.to_vec();
        for j in 0..p {
            let n = ((0..c).map(|ci| src[ci * p + j].powi(2)).sum::<f64>() + eps).sqrt();
            for ci in 0..c {
                out[ci * p + j] /= n;
            }
        }
        let shape = t.shape().to_vec();
        let ng = self.ng(x);
        self.push(Tensor::new(&shape, out), Op::ChannelNormalize { x, eps }, ng)
    }

    /// `[C, ...]` → `[C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.shape()[0];
        let p = t.len() / c;
        let out: Vec<f64> = t.data().chunks(p).map(|ch| ch.iter().sum::<f64>() / p as f64).collect();
        let ng = self.ng(x);
        self.push(Tensor::new(&[c], out), Op::GlobalAvgPool(x), ng)
    }

    /// Weighted mean pixel-wise cross-entropy of `logits: [C, P]` against
    /// `targets[p]`. Returns 0 when every weight is 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let t = self.value(logits);
        let (c, p) = (t.shape()[0], t.len() / t.shape()[0]);
        assert!(targets.len() == p && weights.len() == p, "cross_entropy sizes");
        let src = t.data();
        let mut probs = vec![0.0; c * p];
        let mut loss = 0.0;
        let total_weight: f64 = weights.iter().sum();
        for j in 0..p {
            let mx = (0..c).map(|ci| src[ci * p + j]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..c).map(|ci| (src[ci * p + j] - mx).exp()).sum();
            for ci in 0..c {
                probs[ci * p + j] = (src[ci * p + j] - mx).exp() / z;
            }
            if weights[j] != 0.0 {
                assert!(targets[j] < c, "target label {} out of range", targets[j]);
                loss += weights[j] * (z.ln() + mx - src[targets[j] * p + j]);
            }
        }
        let value = if total_weight > 0.0 { loss / total_weight } else { 0.0 };
        let ng = self.ng(logits);
        self.push(
            Tensor::scalar(value),
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs, total_weight },
            ng,
        )
    }

    /// Cosine similarity of two same-shaped tensors viewed as vectors.
    pub fn cosine(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        assert_eq!(va.len(), vb.len());
        let dot: f64 = va.iter().zip(vb).map(|(x, y)| x * y).sum();
        let na = va.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::scalar(dot / (na * nb)), Op::Cosine(a, b), ng)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.backward_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        Gradients { grads, shapes }
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(vb) {
                        *d += s * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(va) {
                        *d += s * x;
                    }
                }
            }
            Op::Scale(a, k) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += k * s);
                }
            }
            Op::Square(a) => {
                let va = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, s), x) in ga.iter_mut().zip(g).zip(va) {
                        *d += 2.0 * x * s;
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let k = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|d| *d += k);
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(m, n, k, g, false, vb, true, ga, 1.0);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(k, m, n, va, true, g, false, gb, 1.0);
                }
            }
            Op::AddChannelBias(x, b) => {
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, g);
                }
                let c = self.shape(*b)[0];
                let per = g.len() / c;
                if let Some(gb) = self.acc(grads, *b) {
                    for (d, chunk) in gb.iter_mut().zip(g.chunks(per)) {
                        *d += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::LeakyRelu(a, slope) => {
                let va = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, s), x) in ga.iter_mut().zip(g).zip(va) {
                        *d += if *x >= 0.0 { *s } else { slope * s };
                    }
                }
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, s), yv) in ga.iter_mut().zip(g).zip(y) {
                        *d += s * (1.0 - yv * yv);
                    }
                }
            }
            Op::Softplus(a) => {
                let va = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, s), x) in ga.iter_mut().zip(g).zip(va) {
                        *d += s * sigmoid(*x);
                    }
                }
            }
            Op::Conv2d { x, w, pad } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (ci, h, wd) = (sx[0], sx[1], sx[2]);
                let (co, k) = (sw[0], sw[2]);
                let p = node.value.shape()[1] * node.value.shape()[2];
                let direct = k == 1 && *pad == 0;
                let col_owned;
                let col: &[f64] = if direct {
                    self.value(*x).data()
                } else {
                    col_owned = im2col(self.value(*x).data(), ci, h, wd, k, *pad);
                    &col_owned
                };
                if let Some(gw) = self.acc(grads, *w) {
                    gemm(co, p, ci * k * k, g, false, col, true, gw, 1.0);
                }
                let wv = self.value(*w).data();
                if self.ng(*x) {
                    if direct {
                        let gx = self.acc(grads, *x).expect("needs grad");
                        gemm(ci, co, p, wv, true, g, false, gx, 1.0);
                    } else {
                        let mut dcol = vec![0.0; ci * k * k * p];
                        gemm(ci * k * k, co, p, wv, true, g, false, &mut dcol, 0.0);
                        let gx = self.acc(grads, *x).expect("needs grad");
                        col2im(&dcol, ci, h, wd, k, *pad, gx);
                    }
                }
            }
            Op::Modulate { w, s, demod } => {
                let sw = self.shape(*w);
                let i = sw[1];
                let kk = sw[2] * sw[3];
                let wv = self.value(*w).data();
                let styles = self.value(*s).data();
                // gradient with respect to the modulated (pre-demod) weight
                let mut gmod = g.to_vec();
                if *demod {
                    for (o, gchunk) in gmod.chunks_mut(i * kk).enumerate() {
                        let base = o * i * kk;
                        let wm: Vec<f64> = (0..i * kk).map(|t| wv[base + t] * styles[t / kk]).collect();
                        let d = 1.0 / (wm.iter().map(|v| v * v).sum::<f64>() + DEMOD_EPS).sqrt();
                        let dot: f64 = gchunk.iter().zip(&wm).map(|(a, b)| a * b).sum();
                        for (gv, m) in gchunk.iter_mut().zip(&wm) {
                            *gv = d * *gv - d * d * d * m * dot;
                        }
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    for (idx, d) in gw.iter_mut().enumerate() {
                        *d += gmod[idx] * styles[(idx / kk) % i];
                    }
                }
                if let Some(gs) = self.acc(grads, *s) {
                    for (idx, gm) in gmod.iter().enumerate() {
                        gs[(idx / kk) % i] += gm * wv[idx];
                    }
                }
            }
            Op::Resize { x, ty, tx } => {
                let sx = self.shape(*x);
                let (c, h, w) = (sx[0], sx[1], sx[2]);
                if let Some(gx) = self.acc(grads, *x) {
                    bilinear_backward(g, c, h, w, ty, tx, gx);
                }
            }
            Op::AvgPool2(x) => {
                let sx = self.shape(*x);
                let (c, h, w) = (sx[0], sx[1], sx[2]);
                let (oh, ow) = (h / 2, w / 2);
                if let Some(gx) = self.acc(grads, *x) {
                    for ci in 0..c {
                        for y in 0..oh {
                            for xx in 0..ow {
                                let gv = 0.25 * g[(ci * oh + y) * ow + xx];
                                let b = ci * h * w + 2 * y * w + 2 * xx;
                                gx[b] += gv;
                                gx[b + 1] += gv;
                                gx[b + w] += gv;
                                gx[b + w + 1] += gv;
                            }
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        add_into(gp, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::Row(x, r) => {
                let cols = self.shape(*x)[1];
                if let Some(gx) = self.acc(grads, *x) {
                    add_into(&mut gx[r * cols..(r + 1) * cols], g);
                }
            }
            Op::ChannelNormalize { x, eps } => {
                let t = self.value(*x);
                let c = t.shape()[0];
                let p = t.len() / c;
                let src = t.data();
                let y = node.value.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for j in 0..p {
                        let n = ((0..c).map(|ci| src[ci * p + j].powi(2)).sum::<f64>() + eps).sqrt();
                        let dot: f64 = (0..c).map(|ci| g[ci * p + j] * y[ci * p + j]).sum();
                        for ci in 0..c {
                            gx[ci * p + j] += (g[ci * p + j] - y[ci * p + j] * dot) / n;
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                let t = self.value(*x);
                let c = t.shape()[0];
                let p = t.len() / c;
                if let Some(gx) = self.acc(grads, *x) {
                    for (ci, chunk) in gx.chunks_mut(p).enumerate() {
                        let k = g[ci] / p as f64;
                        chunk.iter_mut().for_each(|d| *d += k);
                    }
                }
            }
            Op::CrossEntropy { logits, targets, weights, probs, total_weight } => {
                if *total_weight <= 0.0 {
                    return;
                }
                let c = self.shape(*logits)[0];
                let p = targets.len();
                if let Some(gl) = self.acc(grads, *logits) {
                    let k = g[0] / total_weight;
                    for j in 0..p {
                        if weights[j] == 0.0 {
                            continue;
                        }
                        let wj = k * weights[j];
                        for ci in 0..c {
                            let onehot = if ci == targets[j] { 1.0 } else { 0.0 };
                            gl[ci * p + j] += wj * (probs[ci * p + j] - onehot);
                        }
                    }
                }
            }
            Op::Cosine(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let na = va.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = vb.iter().map(|x| x * x).sum::<f64>().sqrt();
                let cos = node.value.data()[0];
                if let Some(ga) = self.acc(grads, *a) {
                    for ((d, x), y) in ga.iter_mut().zip(va).zip(vb) {
                        *d += g[0] * (y / (na * nb) - cos * x / (na * na));
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((d, x), y) in gb.iter_mut().zip(va).zip(vb) {
                        *d += g[0] * (x / (na * nb) - cos * y / (nb * nb));
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Compares the tape gradient of `build` against central differences.
    fn check(inputs: &[Tensor], build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);
        let eval = |ins: &[Tensor]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
            let l = build(&mut g, &vars);
            g.scalar(l)
        };
        let h = 1e-5;
        for (which, t) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[which]);
            for idx in 0..t.len() {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[idx] += h;
                let mut minus = inputs.to_vec();
                minus[which].data_mut()[idx] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[idx];
                let err = (a - numeric).abs() / (1e-6 + a.abs().max(numeric.abs()));
                assert!(err < 1e-5 || (a - numeric).abs() < 1e-8, "input {which}[{idx}]: tape {a} vs fd {numeric}");
            }
        }
    }

    fn rnd(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn grad_elementwise_chain() {
        check(&[rnd(&[3, 4], 1), rnd(&[3, 4], 2)], |g, v| {
            let a = g.mul(v[0], v[1]);
            let b = g.tanh(a);
            let c = g.sub(b, v[1]);
            let d = g.leaky_relu(c, 0.2);
            let e = g.softplus(d);
            let f = g.square(e);
            let s = g.scale(f, 0.3);
            g.mean(s)
        });
    }

    #[test]
    fn grad_matmul_bias() {
        check(&[rnd(&[3, 5], 3), rnd(&[5, 2], 4), rnd(&[3], 5)], |g, v| {
            let m = g.matmul(v[0], v[1]);
            let b = g.add_channel_bias(m, v[2]);
            let t = g.tanh(b);
            g.sum(t)
        });
    }

    #[test]
    fn grad_modulated_conv() {
        for demod in [true, false] {
            check(&[rnd(&[2, 5, 4], 6), rnd(&[3, 2, 3, 3], 7), rnd(&[2], 8)], |g, v| {
                let wm = g.modulate(v[1], v[2], demod);
                let y = g.conv2d(v[0], wm, 1);
                let t = g.tanh(y);
                g.sum(t)
            });
        }
    }

    #[test]
    fn grad_pointwise_conv_resize_pool() {
        check(&[rnd(&[2, 4, 4], 9), rnd(&[3, 2, 1, 1], 10)], |g, v| {
            let y = g.conv2d(v[0], v[1], 0);
            let up = g.resize(y, 8, 6);
            let p = g.avg_pool2(up);
            let t = g.tanh(p);
            g.sum(t)
        });
    }

    #[test]
    fn grad_concat_reshape_row_pool() {
        check(&[rnd(&[2, 3], 11), rnd(&[1, 3], 12)], |g, v| {
            let c = g.concat(&[v[0], v[1]]);
            let r = g.row(c, 2);
            let r2 = g.row(c, 0);
            let m = g.mul(r, r2);
            let s = g.reshape(m, &[3, 1, 1]);
            let p = g.global_avg_pool(s);
            let t = g.tanh(p);
            g.sum(t)
        });
    }

    #[test]
    fn grad_normalize_cosine() {
        check(&[rnd(&[4, 3, 2], 13), rnd(&[4, 3, 2], 14)], |g, v| {
            let a = g.channel_normalize(v[0], 1e-10);
            let b = g.channel_normalize(v[1], 1e-10);
            let d = g.mse(a, b);
            let c = g.cosine(v[0], v[1]);
            g.add(d, c)
        });
    }

    #[test]
    fn grad_cross_entropy() {
        check(&[rnd(&[4, 6], 15)], |g, v| g.cross_entropy(v[0], &[0, 3, 2, 1, 1, 0], &[1.0, 0.0, 1.0, 1.0, 0.0, 1.0]));
    }

    #[test]
    fn cross_entropy_empty_weights_is_zero() {
        let mut g = Graph::new();
        let l = g.variable(rnd(&[3, 2], 16));
        let ce = g.cross_entropy(l, &[0, 1], &[0.0, 0.0]);
        assert_eq!(g.scalar(ce), 0.0);
        let grads = g.backward(ce);
        assert!(grads.get_or_zeros(l).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(rnd(&[3], 17));
        let b = g.variable(rnd(&[3], 18));
        let m = g.mul(a, b);
        let s = g.sum(m);
        let grads = g.backward(s);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap().data(), g.value(a).data());
    }
}
