//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its forward value,
//! and [`Graph::backward`] walks the tape in reverse. Nodes are never removed, so a
//! graph is built per training step (or per forward pass) and dropped afterwards.
//!
//! Feature maps are `[C, H, W]`, vectors `[N]`, scalars `[]`.

use alloc::vec;
use alloc::vec::Vec;

use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<R> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, R),
    LeakyRelu(Var, R),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    Sqrt(Var),
    Square(Var),
    ClampLogit(Var, R),
    InstanceNorm {
        x: Var,
        inv_std: Vec<R>,
    },
    LgAffine {
        x: Var,
        al: Var,
        bl: Var,
        ag: Var,
        bg: Var,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<R>,
    },
    Concat(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    AvgPool2(Var),
    Upsample2(Var),
    GlobalAvgPool(Var),
    Sum(Var),
    Mean(Var),
    Center(Var),
    LogSumExp(Var),
    Blur {
        x: Var,
        kernel: Vec<R>,
    },
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<R> {
    grads: Vec<Option<Tensor<R>>>,
}

impl<R: Real> Gradients<R> {
    pub fn get(&self, v: Var) -> Option<&Tensor<R>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<R>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub struct Graph<R> {
    nodes: Vec<Node<R>>,
    grad_enabled: bool,
}

impl<R: Real> Default for Graph<R> {
    fn default() -> Self {
        Self::new()
    }
}

fn conv_out(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(size + 2 * pad >= k, "conv kernel larger than padded input");
    (size + 2 * pad - k) / stride + 1
}

#[allow(clippy::too_many_arguments)]
fn im2col<R: Real>(
    x: &[R],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<R> {
    let n = ho * wo;
    let mut cols = vec![R::zero(); c * k * k * n];
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * n;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst = &mut cols[row + oy * wo..row + (oy + 1) * wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<R: Real>(
    cols: &[R],
    dx: &mut [R],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let n = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * n;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * wo..row + (oy + 1) * wo];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &g) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
}

fn chw(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected [C, H, W], got {shape:?}");
    (shape[0], shape[1], shape[2])
}

/// Splits a `[D, ...]` tensor shape into `(D, N)` with `N` the product of trailing dims.
fn rows_cols(shape: &[usize]) -> (usize, usize) {
    assert!(!shape.is_empty(), "expected at least one dimension");
    (shape[0], shape[1..].iter().product())
}

fn sigmoid<R: Real>(x: R) -> R {
    if x >= R::zero() {
        R::one() / (R::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (R::one() + e)
    }
}

impl<R: Real> Graph<R> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A graph that never records gradient requirements; forward values only.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad: needs_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn leaf(&mut self, value: Tensor<R>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<R>) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: R) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// 2-D convolution with zero padding. `x: [C, H, W]`, `w: [O, C, k, k]`, `b: [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (c, h, wd) = chw(self.shape(x));
        let ws = self.shape(w);
        assert_eq!(ws.len(), 4, "conv weight must be [O, C, k, k]");
        assert_eq!(ws[1], c, "conv input channels {} != weight channels {}", c, ws[1]);
        assert_eq!(ws[2], ws[3], "square kernels only");
        let (o, k) = (ws[0], ws[2]);
        let ho = conv_out(h, k, stride, pad);
        let wo = conv_out(wd, k, stride, pad);
        let n = ho * wo;
        let mut out = vec![R::zero(); o * n];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        if k == 1 && stride == 1 && pad == 0 {
            R::gemm(o, c, n, R::one(), wv, false, xv, false, R::zero(), &mut out);
        } else {
            let cols = im2col(xv, c, h, wd, k, stride, pad, ho, wo);
            R::gemm(o, c * k * k, n, R::one(), wv, false, &cols, false, R::zero(), &mut out);
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), o, "conv bias length");
            for (oc, row) in out.chunks_mut(n).enumerate() {
                for v in row {
                    *v += bv[oc];
                }
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(Tensor::new(&[o, ho, wo], out), Op::Conv2d { x, w, b, stride, pad }, ng)
    }

    /// Affine map `w x + b` on a vector. `x: [in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let ws = self.shape(w);
        assert_eq!(ws.len(), 2, "linear weight must be [out, in]");
        let (o, i) = (ws[0], ws[1]);
        assert_eq!(self.value(x).len(), i, "linear input length");
        let mut out = match b {
            Some(b) => {
                assert_eq!(self.value(b).len(), o, "linear bias length");
                self.value(b).data().to_vec()
            }
            None => vec![R::zero(); o],
        };
        R::gemm(
            o,
            i,
            1,
            R::one(),
            self.value(w).data(),
            false,
            self.value(x).data(),
            false,
            R::one(),
            &mut out,
        );
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.ng(&deps);
        self.push(Tensor::new(&[o], out), Op::Linear { x, w, b }, ng)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(R, R) -> R, op: Op<R>) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise shape mismatch");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape(), data);
        let ng = self.ng(&[a, b]);
        self.push(t, op, ng)
    }

    fn unary(&mut self, a: Var, f: impl Fn(R) -> R, op: Op<R>) -> Var {
        let t = self.value(a).map(f);
        let ng = self.ng(&[a]);
        self.push(t, op, ng)
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

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: R) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: R) -> Var {
        self.unary(a, |x| x * c, Op::MulScalar(a, c))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: R) -> Var {
        self.unary(
            a,
            |x| if x > R::zero() { x } else { x * slope },
            Op::LeakyRelu(a, slope),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, R::zero())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Ln(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.abs(), Op::Abs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// `ln(p / (1 - p))` with `p` clamped to `[eps, 1 - eps]`.
    pub fn clamp_logit(&mut self, a: Var, eps: R) -> Var {
        let hi = R::one() - eps;
        self.unary(
            a,
            |x| {
                let p = x.max(eps).min(hi);
                (p / (R::one() - p)).ln()
            },
            Op::ClampLogit(a, eps),
        )
    }

    /// Per-channel normalization over spatial positions of a `[C, ...]` tensor using the
    /// population variance: `(x - mean) / sqrt(var + eps)`.
    pub fn instance_norm(&mut self, x: Var, eps: R) -> Var {
        let xv = self.value(x);
        let (c, n) = rows_cols(xv.shape());
        let nr = R::from_usize(n).unwrap();
        let mut out = vec![R::zero(); c * n];
        let mut inv_std = Vec::with_capacity(c);
        for ch in 0..c {
            let row = &xv.data()[ch * n..(ch + 1) * n];
            let mean = row.iter().fold(R::zero(), |s, &v| s + v) / nr;
            let var = row.iter().fold(R::zero(), |s, &v| s + (v - mean) * (v - mean)) / nr;
            let is = R::one() / (var + eps).sqrt();
            for (o, &v) in out[ch * n..(ch + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(&[x]);
        self.push(Tensor::new(&shape, out), Op::InstanceNorm { x, inv_std }, ng)
    }

    /// Local-then-global affine transform of a `[C, ...]` tensor:
    /// `y[c, p] = ag[c] * (al[p] * x[c, p] + bl[p]) + bg[c]`.
    ///
    /// `al`, `bl` hold one value per spatial position (any shape with `N` elements);
    /// `ag`, `bg` hold one value per channel.
    pub fn lg_affine(&mut self, x: Var, al: Var, bl: Var, ag: Var, bg: Var) -> Var {
        let xv = self.value(x);
        let (c, n) = rows_cols(xv.shape());
        let (alv, blv, agv, bgv) = (
            self.value(al).data(),
            self.value(bl).data(),
            self.value(ag).data(),
            self.value(bg).data(),
        );
        assert_eq!(alv.len(), n, "local scale must match spatial size");
        assert_eq!(blv.len(), n, "local shift must match spatial size");
        assert_eq!(agv.len(), c, "global scale must match channels");
        assert_eq!(bgv.len(), c, "global shift must match channels");
        let mut out = vec![R::zero(); c * n];
        for ch in 0..c {
            let row = &xv.data()[ch * n..(ch + 1) * n];
            for (p, o) in out[ch * n..(ch + 1) * n].iter_mut().enumerate() {
                *o = agv[ch] * (alv[p] * row[p] + blv[p]) + bgv[ch];
            }
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(&[x, al, bl, ag, bg]);
        self.push(Tensor::new(&shape, out), Op::LgAffine { x, al, bl, ag, bg }, ng)
    }

    /// Multi-head scaled dot-product attention on channel-major tensors.
    ///
    /// `q: [D, Nq...]`, `k, v: [D, Nk...]`. Channels are split into `heads` contiguous
    /// groups; each query position attends over all key positions with a softmax.
    /// The result has the shape of `q`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (d, nq) = rows_cols(self.shape(q));
        let (dk, nk) = rows_cols(self.shape(k));
        let (dv, nv) = rows_cols(self.shape(v));
        assert!(d == dk && d == dv, "attention channel mismatch");
        assert_eq!(nk, nv, "keys and values must share positions");
        assert!(heads > 0 && d % heads == 0, "channels not divisible by heads");
        let dh = d / heads;
        let scale = R::one() / R::from_usize(dh).unwrap().sqrt();
        let keep = self.ng(&[q, k, v]);
        let mut out = vec![R::zero(); d * nq];
        let mut probs = if keep {
            vec![R::zero(); heads * nq * nk]
        } else {
            Vec::new()
        };
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        // without gradients, process query rows in chunks to bound memory
        let chunk = if keep { nq } else { nq.min(1024) };
        let mut scores = vec![R::zero(); chunk * nk];
        let mut o_t = vec![R::zero(); chunk * dh];
        for h in 0..heads {
            let qh = &qv[h * dh * nq..(h + 1) * dh * nq];
            let kh = &kv[h * dh * nk..(h + 1) * dh * nk];
            let vh = &vv[h * dh * nk..(h + 1) * dh * nk];
            let mut start = 0;
            while start < nq {
                let rows = chunk.min(nq - start);
                let s = &mut scores[..rows * nk];
                // s[i, j] = scale * sum_c q[c, start + i] k[c, j]
                if rows == nq {
                    R::gemm(rows, dh, nk, scale, qh, true, kh, false, R::zero(), s);
                } else {
                    let mut qsub = vec![R::zero(); dh * rows];
                    for c in 0..dh {
                        qsub[c * rows..(c + 1) * rows].copy_from_slice(&qh[c * nq + start..c * nq + start + rows]);
                    }
                    R::gemm(rows, dh, nk, scale, &qsub, true, kh, false, R::zero(), s);
                }
                for row in s.chunks_mut(nk) {
                    let m = row.iter().fold(R::neg_infinity(), |a, &b| a.max(b));
                    let mut sum = R::zero();
                    for x in row.iter_mut() {
                        *x = (*x - m).exp();
                        sum += *x;
                    }
                    for x in row.iter_mut() {
                        *x /= sum;
                    }
                }
                // o_t[i, c] = sum_j p[i, j] v[c, j]
                let ot = &mut o_t[..rows * dh];
                R::gemm(rows, nk, dh, R::one(), s, false, vh, true, R::zero(), ot);
                for i in 0..rows {
                    for c in 0..dh {
                        out[(h * dh + c) * nq + start + i] = ot[i * dh + c];
                    }
                }
                if keep {
                    probs[h * nq * nk..(h + 1) * nq * nk].copy_from_slice(s);
                }
                start += rows;
            }
        }
        let shape = self.shape(q).to_vec();
        self.push(Tensor::new(&shape, out), Op::Attention { q, k, v, heads, probs }, keep)
    }

    /// Attention probabilities `[heads, Nq, Nk]` of an attention node built with gradients.
    pub fn attention_probs(&self, v: Var) -> Option<Tensor<R>> {
        match &self.nodes[v.0].op {
            Op::Attention { q, k, heads, probs, .. } if !probs.is_empty() => {
                let (_, nq) = rows_cols(self.shape(*q));
                let (_, nk) = rows_cols(self.shape(*k));
                Some(Tensor::new(&[*heads, nq, nk], probs.clone()))
            }
            _ => None,
        }
    }

    /// Concatenation along the first dimension. Scalars are treated as length-1 vectors.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = self.shape(parts[0]);
        let tail: Vec<usize> = if first.is_empty() {
            Vec::new()
        } else {
            first[1..].to_vec()
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            let (r, t) = if s.is_empty() { (1, &[][..]) } else { (s[0], &s[1..]) };
            assert_eq!(t, &tail[..], "concat trailing shape mismatch");
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(&tail);
        let ng = self.ng(parts);
        self.push(Tensor::new(&shape, data), Op::Concat(parts.to_vec()), ng)
    }

    /// Rows `start..start + len` of the first dimension.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(start + len <= s[0], "slice out of range");
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s.clone();
        shape[0] = len;
        let ng = self.ng(&[x]);
        self.push(Tensor::new(&shape, data), Op::SliceRows { x, start }, ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshaped(shape);
        let ng = self.ng(&[x]);
        self.push(t, Op::Reshape(x), ng)
    }

    /// 2x2 average pooling with stride 2. Spatial dims must be even.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (c, h, w) = chw(self.shape(x));
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let quarter = R::lit(0.25);
        let mut out = vec![R::zero(); c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    let b = ch * h * w + 2 * y * w + 2 * xx;
                    out[(ch * ho + y) * wo + xx] = (xv[b] + xv[b + 1] + xv[b + w] + xv[b + w + 1]) * quarter;
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::new(&[c, ho, wo], out), Op::AvgPool2(x), ng)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (c, h, w) = chw(self.shape(x));
        let (ho, wo) = (2 * h, 2 * w);
        let xv = self.value(x).data();
        let mut out = vec![R::zero(); c * ho * wo];
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    out[(ch * ho + y) * wo + xx] = xv[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::new(&[c, ho, wo], out), Op::Upsample2(x), ng)
    }

    /// Mean over all positions of each channel: `[C, ...] -> [C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (c, n) = rows_cols(xv.shape());
        let nr = R::from_usize(n).unwrap();
        let out = xv
            .data()
            .chunks(n)
            .map(|row| row.iter().fold(R::zero(), |s, &v| s + v) / nr)
            .collect();
        let ng = self.ng(&[x]);
        self.push(Tensor::new(&[c], out), Op::GlobalAvgPool(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().fold(R::zero(), |a, &b| a + b);
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = R::from_usize(v.len()).unwrap();
        let s = v.data().iter().fold(R::zero(), |a, &b| a + b) / n;
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), ng)
    }

    /// `x - mean(x)` over all elements.
    pub fn center(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = R::from_usize(v.len()).unwrap();
        let m = v.data().iter().fold(R::zero(), |a, &b| a + b) / n;
        let out = Tensor::new(v.shape(), v.data().iter().map(|&a| a - m).collect());
        let ng = self.ng(&[x]);
        self.push(out, Op::Center(x), ng)
    }

    /// `ln(sum(exp(x)))`, computed stably.
    pub fn log_sum_exp(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let m = d.iter().fold(R::neg_infinity(), |a, &b| a.max(b));
        let s = d.iter().fold(R::zero(), |a, &b| a + (b - m).exp());
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(m + s.ln()), Op::LogSumExp(x), ng)
    }

    /// Separable "valid" filtering of each channel with the same 1-D kernel along both axes.
    pub fn blur(&mut self, x: Var, kernel: &[R]) -> Var {
        let (c, h, w) = chw(self.shape(x));
        let kl = kernel.len();
        assert!(h >= kl && w >= kl, "image smaller than filter window");
        let (ho, wo) = (h - kl + 1, w - kl + 1);
        let xv = self.value(x).data();
        let mut out = vec![R::zero(); c * ho * wo];
        let mut tmp = vec![R::zero(); h * wo];
        for ch in 0..c {
            let plane = &xv[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                for xx in 0..wo {
                    let mut s = R::zero();
                    for (i, &kv) in kernel.iter().enumerate() {
                        s += kv * plane[y * w + xx + i];
                    }
                    tmp[y * wo + xx] = s;
                }
            }
            for y in 0..ho {
                for xx in 0..wo {
                    let mut s = R::zero();
                    for (i, &kv) in kernel.iter().enumerate() {
                        s += kv * tmp[(y + i) * wo + xx];
                    }
                    out[(ch * ho + y) * wo + xx] = s;
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(
            Tensor::new(&[c, ho, wo], out),
            Op::Blur {
                x,
                kernel: kernel.to_vec(),
            },
            ng,
        )
    }

    /// Gradients of the scalar `loss` with respect to every node that requires them.
    pub fn backward(&self, loss: Var) -> Gradients<R> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<R>>> = (0..=loss.0).map(|_| None).collect();
        if !self.nodes[loss.0].needs_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), R::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            if let Some(g) = grads[i].take() {
                self.backprop(i, &g, &mut grads);
            }
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<R>>], v: Var, g: Tensor<R>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        debug_assert_eq!(g.len(), self.value(v).len());
        match &mut grads[v.0] {
            Some(existing) => {
                for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => {
                let shape = self.shape(v).to_vec();
                *slot = Some(g.reshaped(&shape));
            }
        }
    }

    fn elementwise(&self, grads: &mut [Option<Tensor<R>>], a: Var, g: &Tensor<R>, f: impl Fn(R, R, R) -> R) {
        // f(grad, input, output)
        if !self.nodes[a.0].needs_grad {
            return;
        }
        let x = self.value(a).data();
        let data = g.data().iter().zip(x).map(|(&gv, &xv)| f(gv, xv, R::zero())).collect();
        self.accumulate(grads, a, Tensor::new(g.shape(), data));
    }

    fn elementwise_out(
        &self,
        grads: &mut [Option<Tensor<R>>],
        a: Var,
        out: &Tensor<R>,
        g: &Tensor<R>,
        f: impl Fn(R, R, R) -> R,
    ) {
        if !self.nodes[a.0].needs_grad {
            return;
        }
        let x = self.value(a).data();
        let data = g
            .data()
            .iter()
            .zip(x)
            .zip(out.data())
            .map(|((&gv, &xv), &ov)| f(gv, xv, ov))
            .collect();
        self.accumulate(grads, a, Tensor::new(g.shape(), data));
    }

    fn backprop(&self, i: usize, g: &Tensor<R>, grads: &mut [Option<Tensor<R>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let (c, h, wd) = chw(self.shape(*x));
                let ws = self.shape(*w);
                let (o, k) = (ws[0], ws[2]);
                let (_, ho, wo) = chw(out.shape());
                let n = ho * wo;
                let gd = g.data();
                if let Some(b) = b {
                    if self.requires_grad(*b) {
                        let gb = gd
                            .chunks(n)
                            .map(|row| row.iter().fold(R::zero(), |s, &v| s + v))
                            .collect();
                        self.accumulate(grads, *b, Tensor::new(&[o], gb));
                    }
                }
                let xv = self.value(*x).data();
                let pointwise = k == 1 && *stride == 1 && *pad == 0;
                let need_w = self.requires_grad(*w);
                let need_x = self.requires_grad(*x);
                if need_w {
                    let mut gw = vec![R::zero(); o * c * k * k];
                    if pointwise {
                        R::gemm(o, n, c, R::one(), gd, false, xv, true, R::zero(), &mut gw);
                    } else {
                        let cols = im2col(xv, c, h, wd, k, *stride, *pad, ho, wo);
                        R::gemm(o, n, c * k * k, R::one(), gd, false, &cols, true, R::zero(), &mut gw);
                    }
                    self.accumulate(grads, *w, Tensor::new(&[o, c, k, k], gw));
                }
                if need_x {
                    let wv = self.value(*w).data();
                    let mut gx = vec![R::zero(); c * h * wd];
                    if pointwise {
                        R::gemm(c, o, n, R::one(), wv, true, gd, false, R::zero(), &mut gx);
                    } else {
                        let mut gcols = vec![R::zero(); c * k * k * n];
                        R::gemm(c * k * k, o, n, R::one(), wv, true, gd, false, R::zero(), &mut gcols);
                        col2im(&gcols, &mut gx, c, h, wd, k, *stride, *pad, ho, wo);
                    }
                    self.accumulate(grads, *x, Tensor::new(&[c, h, wd], gx));
                }
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (o, inp) = (ws[0], ws[1]);
                if let Some(b) = b {
                    self.accumulate(grads, *b, g.clone());
                }
                if self.requires_grad(*w) {
                    let mut gw = vec![R::zero(); o * inp];
                    R::gemm(
                        o,
                        1,
                        inp,
                        R::one(),
                        g.data(),
                        false,
                        self.value(*x).data(),
                        false,
                        R::zero(),
                        &mut gw,
                    );
                    self.accumulate(grads, *w, Tensor::new(&[o, inp], gw));
                }
                if self.requires_grad(*x) {
                    let mut gx = vec![R::zero(); inp];
                    R::gemm(
                        inp,
                        o,
                        1,
                        R::one(),
                        self.value(*w).data(),
                        true,
                        g.data(),
                        false,
                        R::zero(),
                        &mut gx,
                    );
                    self.accumulate(grads, *x, Tensor::new(&[inp], gx));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape(), d));
                }
                if self.requires_grad(*b) {
                    let d = g.data().iter().zip(va.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape(), d));
                }
            }
            Op::Div(a, b) => {
                let vb = self.value(*b);
                if self.requires_grad(*a) {
                    let d = g.data().iter().zip(vb.data()).map(|(&x, &y)| x / y).collect();
                    self.accumulate(grads, *a, Tensor::new(g.shape(), d));
                }
                if self.requires_grad(*b) {
                    // d(a/b)/db = -out / b
                    let d = g
                        .data()
                        .iter()
                        .zip(out.data())
                        .zip(vb.data())
                        .map(|((&gv, &o), &y)| -gv * o / y)
                        .collect();
                    self.accumulate(grads, *b, Tensor::new(g.shape(), d));
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => self.accumulate(grads, *a, g.clone()),
            Op::MulScalar(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::LeakyRelu(a, slope) => {
                let s = *slope;
                self.elementwise(grads, *a, g, |gv, x, _| if x > R::zero() { gv } else { gv * s });
            }
            Op::Sigmoid(a) => {
                self.elementwise_out(grads, *a, out, g, |gv, _, o| gv * o * (R::one() - o));
            }
            Op::Exp(a) => self.elementwise_out(grads, *a, out, g, |gv, _, o| gv * o),
            Op::Ln(a) => self.elementwise(grads, *a, g, |gv, x, _| gv / x),
            Op::Abs(a) => self.elementwise(grads, *a, g, |gv, x, _| {
                if x > R::zero() {
                    gv
                } else if x < R::zero() {
                    -gv
                } else {
                    R::zero()
                }
            }),
            Op::Sqrt(a) => {
                let half = R::lit(0.5);
                self.elementwise_out(grads, *a, out, g, |gv, _, o| gv * half / o)
            }
            Op::Square(a) => {
                let two = R::lit(2.0);
                self.elementwise(grads, *a, g, |gv, x, _| gv * two * x)
            }
            Op::ClampLogit(a, eps) => {
                let lo = *eps;
                let hi = R::one() - lo;
                self.elementwise(grads, *a, g, |gv, x, _| {
                    if x < lo || x > hi {
                        R::zero()
                    } else {
                        gv / (x * (R::one() - x))
                    }
                })
            }
            Op::InstanceNorm { x, inv_std } => {
                let (c, n) = rows_cols(out.shape());
                let nr = R::from_usize(n).unwrap();
                let mut gx = vec![R::zero(); c * n];
                for ch in 0..c {
                    let gn = &g.data()[ch * n..(ch + 1) * n];
                    let y = &out.data()[ch * n..(ch + 1) * n];
                    let mg = gn.iter().fold(R::zero(), |s, &v| s + v) / nr;
                    let mgy = gn.iter().zip(y).fold(R::zero(), |s, (&a, &b)| s + a * b) / nr;
                    for p in 0..n {
                        gx[ch * n + p] = inv_std[ch] * (gn[p] - mg - y[p] * mgy);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape(), gx));
            }
            Op::LgAffine { x, al, bl, ag, bg } => {
                let xv = self.value(*x).data();
                let (c, n) = rows_cols(out.shape());
                let (alv, blv, agv) = (self.value(*al).data(), self.value(*bl).data(), self.value(*ag).data());
                let gd = g.data();
                let mut gx = vec![R::zero(); c * n];
                let mut gal = vec![R::zero(); n];
                let mut gbl = vec![R::zero(); n];
                let mut gag = vec![R::zero(); c];
                let mut gbg = vec![R::zero(); c];
                for ch in 0..c {
                    for p in 0..n {
                        let gy = gd[ch * n + p];
                        let xi = xv[ch * n + p];
                        let t = gy * agv[ch];
                        gx[ch * n + p] = t * alv[p];
                        gal[p] += t * xi;
                        gbl[p] += t;
                        gag[ch] += gy * (alv[p] * xi + blv[p]);
                        gbg[ch] += gy;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(out.shape(), gx));
                self.accumulate(grads, *al, Tensor::new(&[n], gal));
                self.accumulate(grads, *bl, Tensor::new(&[n], gbl));
                self.accumulate(grads, *ag, Tensor::new(&[c], gag));
                self.accumulate(grads, *bg, Tensor::new(&[c], gbg));
            }
            Op::Attention { q, k, v, heads, probs } => {
                let (d, nq) = rows_cols(self.shape(*q));
                let (_, nk) = rows_cols(self.shape(*k));
                let dh = d / heads;
                let scale = R::one() / R::from_usize(dh).unwrap().sqrt();
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let gd = g.data();
                let mut gq = vec![R::zero(); d * nq];
                let mut gk = vec![R::zero(); d * nk];
                let mut gv = vec![R::zero(); d * nk];
                let mut dp = vec![R::zero(); nq * nk];
                for h in 0..*heads {
                    let p = &probs[h * nq * nk..(h + 1) * nq * nk];
                    let go = &gd[h * dh * nq..(h + 1) * dh * nq];
                    let qh = &qv[h * dh * nq..(h + 1) * dh * nq];
                    let kh = &kv[h * dh * nk..(h + 1) * dh * nk];
                    let vh = &vv[h * dh * nk..(h + 1) * dh * nk];
                    // out[c, i] = sum_j p[i, j] v[c, j]
                    // dv[c, j] = sum_i go[c, i] p[i, j]
                    R::gemm(
                        dh,
                        nq,
                        nk,
                        R::one(),
                        go,
                        false,
                        p,
                        false,
                        R::zero(),
                        &mut gv[h * dh * nk..(h + 1) * dh * nk],
                    );
                    // dp[i, j] = sum_c go[c, i] v[c, j]
                    R::gemm(nq, dh, nk, R::one(), go, true, vh, false, R::zero(), &mut dp);
                    // ds = p * (dp - rowsum(dp * p)), scaled
                    for (prow, drow) in p.chunks(nk).zip(dp.chunks_mut(nk)) {
                        let dot = prow.iter().zip(drow.iter()).fold(R::zero(), |s, (&a, &b)| s + a * b);
                        for (dv, &pv) in drow.iter_mut().zip(prow) {
                            *dv = pv * (*dv - dot) * scale;
                        }
                    }
                    // dq[c, i] = sum_j ds[i, j] k[c, j]
                    R::gemm(
                        dh,
                        nk,
                        nq,
                        R::one(),
                        kh,
                        false,
                        &dp,
                        true,
                        R::zero(),
                        &mut gq[h * dh * nq..(h + 1) * dh * nq],
                    );
                    // dk[c, j] = sum_i ds[i, j] q[c, i]
                    R::gemm(
                        dh,
                        nq,
                        nk,
                        R::one(),
                        qh,
                        false,
                        &dp,
                        false,
                        R::zero(),
                        &mut gk[h * dh * nk..(h + 1) * dh * nk],
                    );
                }
                self.accumulate(grads, *q, Tensor::new(&[d * nq], gq));
                self.accumulate(grads, *k, Tensor::new(&[d * nk], gk));
                self.accumulate(grads, *v, Tensor::new(&[d * nk], gv));
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.requires_grad(p) {
                        let d = g.data()[off..off + len].to_vec();
                        self.accumulate(grads, p, Tensor::new(&[len], d));
                    }
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                if self.requires_grad(*x) {
                    let xs = self.shape(*x);
                    let inner: usize = xs[1..].iter().product();
                    let mut gx = Tensor::zeros(xs);
                    gx.data_mut()[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::AvgPool2(x) => {
                let (c, h, w) = chw(self.shape(*x));
                let (ho, wo) = (h / 2, w / 2);
                let quarter = R::lit(0.25);
                let mut gx = vec![R::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..ho {
                        for xx in 0..wo {
                            let v = g.data()[(ch * ho + y) * wo + xx] * quarter;
                            let b = ch * h * w + 2 * y * w + 2 * xx;
                            gx[b] = v;
                            gx[b + 1] = v;
                            gx[b + w] = v;
                            gx[b + w + 1] = v;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[c, h, w], gx));
            }
            Op::Upsample2(x) => {
                let (c, h, w) = chw(self.shape(*x));
                let (ho, wo) = (2 * h, 2 * w);
                let mut gx = vec![R::zero(); c * h * w];
                for ch in 0..c {
                    for y in 0..ho {
                        for xx in 0..wo {
                            gx[(ch * h + y / 2) * w + xx / 2] += g.data()[(ch * ho + y) * wo + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[c, h, w], gx));
            }
            Op::GlobalAvgPool(x) => {
                let xs = self.shape(*x);
                let (c, n) = rows_cols(xs);
                let nr = R::from_usize(n).unwrap();
                let mut gx = Vec::with_capacity(c * n);
                for ch in 0..c {
                    let v = g.data()[ch] / nr;
                    gx.extend(core::iter::repeat_n(v, n));
                }
                self.accumulate(grads, *x, Tensor::new(xs, gx));
            }
            Op::Sum(x) => {
                let gv = g.item();
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Mean(x) => {
                let n = R::from_usize(self.value(*x).len()).unwrap();
                let gv = g.item() / n;
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), gv));
            }
            Op::Center(x) => {
                let n = R::from_usize(g.len()).unwrap();
                let m = g.data().iter().fold(R::zero(), |a, &b| a + b) / n;
                let gx = g.data().iter().map(|&a| a - m).collect();
                self.accumulate(grads, *x, Tensor::new(g.shape(), gx));
            }
            Op::LogSumExp(x) => {
                let lse = out.item();
                let gv = g.item();
                self.elementwise(grads, *x, &Tensor::full(self.shape(*x), gv), |gg, xv, _| {
                    gg * (xv - lse).exp()
                });
            }
            Op::Blur { x, kernel } => {
                let (c, h, w) = chw(self.shape(*x));
                let kl = kernel.len();
                let (ho, wo) = (h - kl + 1, w - kl + 1);
                let mut gx = vec![R::zero(); c * h * w];
                let mut gtmp = vec![R::zero(); h * wo];
                for ch in 0..c {
                    for v in gtmp.iter_mut() {
                        *v = R::zero();
                    }
                    for y in 0..ho {
                        for xx in 0..wo {
                            let gv = g.data()[(ch * ho + y) * wo + xx];
                            for (i, &kv) in kernel.iter().enumerate() {
                                gtmp[(y + i) * wo + xx] += kv * gv;
                            }
                        }
                    }
                    let plane = &mut gx[ch * h * w..(ch + 1) * h * w];
                    for y in 0..h {
                        for xx in 0..wo {
                            let gv = gtmp[y * wo + xx];
                            for (i, &kv) in kernel.iter().enumerate() {
                                plane[y * w + xx + i] += kv * gv;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(&[c, h, w], gx));
            }
        }
    }
}
