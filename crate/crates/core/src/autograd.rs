//! Reverse-mode automatic differentiation over dynamic-dimension f64 tensors.
//!
//! Every network block builds a graph on a [`Tape`]; `backward` walks it in
//! reverse and accumulates gradients into a name-keyed map for the trainable
//! leaves. Tensors are channel-first: feature maps are (C, H, W), vectors (N),
//! scalars (1). One tape per sample; batches are parallel tapes whose
//! gradients are summed in a fixed order by the caller.

use ndarray::{Array1, Array2, ArrayD, ArrayView2, IxDyn};
use std::collections::BTreeMap;

pub type VarId = usize;
pub type GradMap = BTreeMap<String, ArrayD<f64>>;

#[derive(Debug, Clone)]
enum Op {
    Leaf { name: Option<String> },
    Add(VarId, VarId),
    Sub(VarId, VarId),
    Mul(VarId, VarId),
    Scale(VarId, f64),
    AddConst(VarId),
    LeakyRelu(VarId, f64),
    Sigmoid(VarId),
    Tanh(VarId),
    Softplus(VarId),
    /// Column-wise softmax over the rows of a 2-D matrix.
    SoftmaxCols(VarId),
    /// Global average pool (C, H, W) -> (C).
    Gap(VarId),
    Linear { w: VarId, b: VarId, x: VarId },
    Conv2d { w: VarId, b: VarId, x: VarId, stride: usize, pad: [usize; 4], dilation: usize },
    ConvT2d { w: VarId, b: VarId, x: VarId, stride: usize, pad: usize, out_pad: usize },
    PixelShuffle { x: VarId, r: usize },
    ConcatC(Vec<VarId>),
    Stack2(VarId, VarId),
    Row { x: VarId, idx: usize },
    /// (C, H, W) * (1, H, W), map broadcast over channels.
    MulMap { x: VarId, map: VarId },
    /// (C, H, W) * (C), per-channel scale.
    ChanScale { x: VarId, s: VarId },
    /// sum_i mat[i, col] * feats[i].
    MixColumn { mat: VarId, col: usize, feats: Vec<VarId> },
    MeanAll(VarId),
    /// Mean absolute deviation from a constant target.
    L1Const { x: VarId, target: ArrayD<f64> },
    /// Mean squared deviation from a constant target.
    L2Const { x: VarId, target: ArrayD<f64> },
    Reshape { x: VarId },
    ResizeBilinear { x: VarId },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Append-only; indices are `VarId`s.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: VarId) -> &ArrayD<f64> {
        &self.nodes[id].value
    }

    pub fn scalar(&self, id: VarId) -> f64 {
        self.nodes[id].value[[0]]
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, requires_grad: bool) -> VarId {
        self.nodes.push(Node { value, op, requires_grad });
        self.nodes.len() - 1
    }

    fn req(&self, id: VarId) -> bool {
        self.nodes[id].requires_grad
    }

    /// A trainable leaf. Gradients are reported under `name`.
    pub fn param(&mut self, name: &str, value: ArrayD<f64>) -> VarId {
        self.push(value, Op::Leaf { name: Some(name.to_string()) }, true)
    }

    /// A constant leaf; nothing is differentiated through to it.
    pub fn constant(&mut self, value: ArrayD<f64>) -> VarId {
        self.push(value, Op::Leaf { name: None }, false)
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Add(a, b), r)
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let v = &self.nodes[a].value - &self.nodes[b].value;
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Sub(a, b), r)
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = &self.nodes[a].value * &self.nodes[b].value;
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Mul(a, b), r)
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let v = self.nodes[a].value.mapv(|x| x * c);
        let r = self.req(a);
        self.push(v, Op::Scale(a, c), r)
    }

    pub fn add_const(&mut self, a: VarId, c: f64) -> VarId {
        let v = self.nodes[a].value.mapv(|x| x + c);
        let r = self.req(a);
        self.push(v, Op::AddConst(a), r)
    }

    pub fn leaky_relu(&mut self, a: VarId, slope: f64) -> VarId {
        let v = self.nodes[a].value.mapv(|x| if x >= 0.0 { x } else { slope * x });
        let r = self.req(a);
        self.push(v, Op::LeakyRelu(a, slope), r)
    }

    pub fn sigmoid(&mut self, a: VarId) -> VarId {
        let v = self.nodes[a].value.mapv(sigmoid);
        let r = self.req(a);
        self.push(v, Op::Sigmoid(a), r)
    }

    pub fn tanh(&mut self, a: VarId) -> VarId {
        let v = self.nodes[a].value.mapv(f64::tanh);
        let r = self.req(a);
        self.push(v, Op::Tanh(a), r)
    }

    pub fn softplus(&mut self, a: VarId) -> VarId {
        let v = self.nodes[a].value.mapv(softplus);
        let r = self.req(a);
        self.push(v, Op::Softplus(a), r)
    }

    /// Softmax over rows, independently per column, of a (rows, cols) matrix.
    pub fn softmax_cols(&mut self, a: VarId) -> VarId {
        let m = &self.nodes[a].value;
        assert_eq!(m.ndim(), 2, "softmax_cols wants a matrix");
        let (rows, cols) = (m.shape()[0], m.shape()[1]);
        let mut out = m.clone();
        for j in 0..cols {
            let mut mx = f64::NEG_INFINITY;
            for i in 0..rows {
                mx = mx.max(out[[i, j]]);
            }
            let mut z = 0.0;
            for i in 0..rows {
                let e = (out[[i, j]] - mx).exp();
                out[[i, j]] = e;
                z += e;
            }
            for i in 0..rows {
                out[[i, j]] /= z;
            }
        }
        let r = self.req(a);
        self.push(out, Op::SoftmaxCols(a), r)
    }

    pub fn gap(&mut self, a: VarId) -> VarId {
        let x = &self.nodes[a].value;
        let (c, h, w) = dims3(x);
        let inv = 1.0 / (h * w) as f64;
        let mut out = Array1::<f64>::zeros(c);
        let xs = x.as_slice().unwrap();
        for ci in 0..c {
            out[ci] = xs[ci * h * w..(ci + 1) * h * w].iter().sum::<f64>() * inv;
        }
        let r = self.req(a);
        self.push(out.into_dyn(), Op::Gap(a), r)
    }

    /// Fully-connected layer: w (out, in) · x (in) + b (out).
    pub fn linear(&mut self, w: VarId, b: VarId, x: VarId) -> VarId {
        let wv = &self.nodes[w].value;
        let xv = &self.nodes[x].value;
        let bv = &self.nodes[b].value;
        let (o, i) = (wv.shape()[0], wv.shape()[1]);
        assert_eq!(xv.len(), i, "linear input length");
        let wm = ArrayView2::from_shape((o, i), wv.as_slice().unwrap()).unwrap();
        let xm = xv.as_slice().unwrap();
        let mut out = Array1::<f64>::zeros(o);
        for r in 0..o {
            out[r] = wm.row(r).iter().zip(xm).map(|(a, b)| a * b).sum::<f64>() + bv[[r]];
        }
        let r = self.req(w) || self.req(b) || self.req(x);
        self.push(out.into_dyn(), Op::Linear { w, b, x }, r)
    }

    /// 2-D convolution, zero padding (top, bottom, left, right).
    pub fn conv2d(
        &mut self,
        w: VarId,
        b: VarId,
        x: VarId,
        stride: usize,
        pad: [usize; 4],
        dilation: usize,
    ) -> VarId {
        let v = conv2d_fwd(
            &self.nodes[x].value,
            &self.nodes[w].value,
            &self.nodes[b].value,
            stride,
            pad,
            dilation,
        );
        let r = self.req(w) || self.req(b) || self.req(x);
        self.push(v, Op::Conv2d { w, b, x, stride, pad, dilation }, r)
    }

    /// Transposed 2-D convolution (weights laid out (cin, cout, kh, kw)).
    pub fn conv_t2d(
        &mut self,
        w: VarId,
        b: VarId,
        x: VarId,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> VarId {
        let v = convt2d_fwd(
            &self.nodes[x].value,
            &self.nodes[w].value,
            &self.nodes[b].value,
            stride,
            pad,
            out_pad,
        );
        let r = self.req(w) || self.req(b) || self.req(x);
        self.push(v, Op::ConvT2d { w, b, x, stride, pad, out_pad }, r)
    }

    /// (C·r², H, W) -> (C, H·r, W·r).
    pub fn pixel_shuffle(&mut self, x: VarId, r: usize) -> VarId {
        let xv = &self.nodes[x].value;
        let (c2, h, w) = dims3(xv);
        assert_eq!(c2 % (r * r), 0, "pixel shuffle channel count");
        let c = c2 / (r * r);
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[c, h * r, w * r]));
        for co in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let ci = co * r * r + dy * r + dx;
                    for y in 0..h {
                        for xx in 0..w {
                            out[[co, y * r + dy, xx * r + dx]] = xv[[ci, y, xx]];
                        }
                    }
                }
            }
        }
        let rq = self.req(x);
        self.push(out, Op::PixelShuffle { x, r }, rq)
    }

    pub fn concat_channels(&mut self, parts: &[VarId]) -> VarId {
        assert!(!parts.is_empty());
        let (_, h, w) = dims3(&self.nodes[parts[0]].value);
        let ctot: usize = parts.iter().map(|&p| dims3(&self.nodes[p].value).0).sum();
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[ctot, h, w]));
        let mut off = 0;
        for &p in parts {
            let pv = &self.nodes[p].value;
            let (c, ph, pw) = dims3(pv);
            assert_eq!((ph, pw), (h, w), "concat spatial dims");
            let src = pv.as_slice().unwrap();
            out.as_slice_mut().unwrap()[off * h * w..(off + c) * h * w].copy_from_slice(src);
            off += c;
        }
        let r = parts.iter().any(|&p| self.req(p));
        self.push(out, Op::ConcatC(parts.to_vec()), r)
    }

    /// Two (C) vectors stacked into a (2, C) matrix.
    pub fn stack2(&mut self, a: VarId, b: VarId) -> VarId {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        assert_eq!(av.len(), bv.len());
        let c = av.len();
        let mut out = Array2::<f64>::zeros((2, c));
        for j in 0..c {
            out[[0, j]] = av[[j]];
            out[[1, j]] = bv[[j]];
        }
        let r = self.req(a) || self.req(b);
        self.push(out.into_dyn(), Op::Stack2(a, b), r)
    }

    pub fn row(&mut self, x: VarId, idx: usize) -> VarId {
        let xv = &self.nodes[x].value;
        let cols = xv.shape()[1];
        let mut out = Array1::<f64>::zeros(cols);
        for j in 0..cols {
            out[j] = xv[[idx, j]];
        }
        let r = self.req(x);
        self.push(out.into_dyn(), Op::Row { x, idx }, r)
    }

    pub fn mul_map(&mut self, x: VarId, map: VarId) -> VarId {
        let xv = &self.nodes[x].value;
        let mv = &self.nodes[map].value;
        let (c, h, w) = dims3(xv);
        assert_eq!(dims3(mv), (1, h, w), "gate map shape");
        let mut out = xv.clone();
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out[[ci, y, xx]] *= mv[[0, y, xx]];
                }
            }
        }
        let r = self.req(x) || self.req(map);
        self.push(out, Op::MulMap { x, map }, r)
    }

    pub fn chan_scale(&mut self, x: VarId, s: VarId) -> VarId {
        let xv = &self.nodes[x].value;
        let sv = &self.nodes[s].value;
        let (c, h, w) = dims3(xv);
        assert_eq!(sv.len(), c, "per-channel scale length");
        let mut out = xv.clone();
        for ci in 0..c {
            let f = sv[[ci]];
            for y in 0..h {
                for xx in 0..w {
                    out[[ci, y, xx]] *= f;
                }
            }
        }
        let r = self.req(x) || self.req(s);
        self.push(out, Op::ChanScale { x, s }, r)
    }

    /// sum_i mat[i, col] · feats[i] with scalar attention weights.
    pub fn mix_column(&mut self, mat: VarId, col: usize, feats: &[VarId]) -> VarId {
        let mv = &self.nodes[mat].value;
        assert_eq!(mv.shape()[0], feats.len(), "attention rows vs experts");
        let mut out = ArrayD::<f64>::zeros(self.nodes[feats[0]].value.raw_dim());
        for (i, &f) in feats.iter().enumerate() {
            let wi = mv[[i, col]];
            out.zip_mut_with(&self.nodes[f].value, |o, &v| *o += wi * v);
        }
        let r = self.req(mat) || feats.iter().any(|&f| self.req(f));
        self.push(out, Op::MixColumn { mat, col, feats: feats.to_vec() }, r)
    }

    /// Bilinear resize of a (C, H, W) map to (C, ho, wo); differentiable.
    pub fn resize_bilinear(&mut self, x: VarId, ho: usize, wo: usize) -> VarId {
        let v = bilinear_resize(&self.nodes[x].value, ho, wo);
        let r = self.req(x);
        self.push(v, Op::ResizeBilinear { x }, r)
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&mut self, x: VarId, shape: &[usize]) -> VarId {
        let xv = &self.nodes[x].value;
        assert_eq!(xv.len(), shape.iter().product::<usize>(), "reshape length");
        let v = ArrayD::from_shape_vec(IxDyn(shape), xv.as_slice().unwrap().to_vec()).unwrap();
        let r = self.req(x);
        self.push(v, Op::Reshape { x }, r)
    }

    pub fn mean_all(&mut self, a: VarId) -> VarId {
        let m = self.nodes[a].value.iter().sum::<f64>() / self.nodes[a].value.len() as f64;
        let r = self.req(a);
        self.push(ArrayD::from_elem(IxDyn(&[1]), m), Op::MeanAll(a), r)
    }

    /// mean |x - target|, target constant.
    pub fn l1_loss(&mut self, x: VarId, target: &ArrayD<f64>) -> VarId {
        let xv = &self.nodes[x].value;
        assert_eq!(xv.shape(), target.shape());
        let m = xv
            .iter()
            .zip(target.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / xv.len() as f64;
        let r = self.req(x);
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), m),
            Op::L1Const { x, target: target.clone() },
            r,
        )
    }

    /// mean (x - target)², target constant.
    pub fn l2_loss(&mut self, x: VarId, target: &ArrayD<f64>) -> VarId {
        let xv = &self.nodes[x].value;
        assert_eq!(xv.shape(), target.shape());
        let m = xv
            .iter()
            .zip(target.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / xv.len() as f64;
        let r = self.req(x);
        self.push(
            ArrayD::from_elem(IxDyn(&[1]), m),
            Op::L2Const { x, target: target.clone() },
            r,
        )
    }

    /// Backpropagate from a scalar node; returns gradients for named leaves.
    pub fn backward(&self, root: VarId) -> GradMap {
        assert_eq!(self.nodes[root].value.len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(ArrayD::from_elem(IxDyn(&[1]), 1.0));
        let mut out = GradMap::new();

        for id in (0..=root).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf { name } => {
                    if let Some(n) = name {
                        out.entry(n.clone())
                            .and_modify(|acc| *acc += &g)
                            .or_insert(g);
                    }
                }
                Op::Add(a, b) => {
                    self.accum(&mut grads, *a, g.clone());
                    self.accum(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grads, *a, g.clone());
                    self.accum(&mut grads, *b, g.mapv(|v| -v));
                }
                Op::Mul(a, b) => {
                    let da = &g * &self.nodes[*b].value;
                    let db = &g * &self.nodes[*a].value;
                    self.accum(&mut grads, *a, da);
                    self.accum(&mut grads, *b, db);
                }
                Op::Scale(a, c) => self.accum(&mut grads, *a, g.mapv(|v| v * c)),
                Op::AddConst(a) => self.accum(&mut grads, *a, g),
                Op::LeakyRelu(a, slope) => {
                    let x = &self.nodes[*a].value;
                    let mut d = g;
                    d.zip_mut_with(x, |gv, &xv| {
                        if xv < 0.0 {
                            *gv *= slope;
                        }
                    });
                    self.accum(&mut grads, *a, d);
                }
                Op::Sigmoid(a) => {
                    let y = &self.nodes[id].value;
                    let mut d = g;
                    d.zip_mut_with(y, |gv, &yv| *gv *= yv * (1.0 - yv));
                    self.accum(&mut grads, *a, d);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[id].value;
                    let mut d = g;
                    d.zip_mut_with(y, |gv, &yv| *gv *= 1.0 - yv * yv);
                    self.accum(&mut grads, *a, d);
                }
                Op::Softplus(a) => {
                    let x = &self.nodes[*a].value;
                    let mut d = g;
                    d.zip_mut_with(x, |gv, &xv| *gv *= sigmoid(xv));
                    self.accum(&mut grads, *a, d);
                }
                Op::SoftmaxCols(a) => {
                    let y = &self.nodes[id].value;
                    let (rows, cols) = (y.shape()[0], y.shape()[1]);
                    let mut d = ArrayD::<f64>::zeros(y.raw_dim());
                    for j in 0..cols {
                        let mut dot = 0.0;
                        for i in 0..rows {
                            dot += g[[i, j]] * y[[i, j]];
                        }
                        for i in 0..rows {
                            d[[i, j]] = y[[i, j]] * (g[[i, j]] - dot);
                        }
                    }
                    self.accum(&mut grads, *a, d);
                }
                Op::Gap(a) => {
                    let x = &self.nodes[*a].value;
                    let (c, h, w) = dims3(x);
                    let inv = 1.0 / (h * w) as f64;
                    let mut d = ArrayD::<f64>::zeros(x.raw_dim());
                    for ci in 0..c {
                        let gv = g[[ci]] * inv;
                        for y in 0..h {
                            for xx in 0..w {
                                d[[ci, y, xx]] = gv;
                            }
                        }
                    }
                    self.accum(&mut grads, *a, d);
                }
                Op::Linear { w, b, x } => {
                    let wv = &self.nodes[*w].value;
                    let xv = &self.nodes[*x].value;
                    let (o, i) = (wv.shape()[0], wv.shape()[1]);
                    if self.req(*w) {
                        let mut dw = ArrayD::<f64>::zeros(wv.raw_dim());
                        for r in 0..o {
                            for c in 0..i {
                                dw[[r, c]] = g[[r]] * xv[[c]];
                            }
                        }
                        self.accum(&mut grads, *w, dw);
                    }
                    if self.req(*b) {
                        self.accum(&mut grads, *b, g.clone());
                    }
                    if self.req(*x) {
                        let mut dx = ArrayD::<f64>::zeros(xv.raw_dim());
                        for c in 0..i {
                            let mut s = 0.0;
                            for r in 0..o {
                                s += wv[[r, c]] * g[[r]];
                            }
                            dx[[c]] = s;
                        }
                        self.accum(&mut grads, *x, dx);
                    }
                }
                Op::Conv2d { w, b, x, stride, pad, dilation } => {
                    let (dw, db, dx) = conv2d_bwd(
                        &self.nodes[*x].value,
                        &self.nodes[*w].value,
                        &g,
                        *stride,
                        *pad,
                        *dilation,
                        self.req(*w),
                        self.req(*x),
                    );
                    if let Some(dw) = dw {
                        self.accum(&mut grads, *w, dw);
                    }
                    if self.req(*b) {
                        self.accum(&mut grads, *b, db);
                    }
                    if let Some(dx) = dx {
                        self.accum(&mut grads, *x, dx);
                    }
                }
                Op::ConvT2d { w, b, x, stride, pad, out_pad } => {
                    let (dw, db, dx) = convt2d_bwd(
                        &self.nodes[*x].value,
                        &self.nodes[*w].value,
                        &g,
                        *stride,
                        *pad,
                        *out_pad,
                        self.req(*w),
                        self.req(*x),
                    );
                    if let Some(dw) = dw {
                        self.accum(&mut grads, *w, dw);
                    }
                    if self.req(*b) {
                        self.accum(&mut grads, *b, db);
                    }
                    if let Some(dx) = dx {
                        self.accum(&mut grads, *x, dx);
                    }
                }
                Op::PixelShuffle { x, r } => {
                    let xv = &self.nodes[*x].value;
                    let (c2, h, w) = dims3(xv);
                    let r2 = *r;
                    let c = c2 / (r2 * r2);
                    let mut d = ArrayD::<f64>::zeros(xv.raw_dim());
                    for co in 0..c {
                        for dy in 0..r2 {
                            for dx in 0..r2 {
                                let ci = co * r2 * r2 + dy * r2 + dx;
                                for y in 0..h {
                                    for xx in 0..w {
                                        d[[ci, y, xx]] = g[[co, y * r2 + dy, xx * r2 + dx]];
                                    }
                                }
                            }
                        }
                    }
                    self.accum(&mut grads, *x, d);
                }
                Op::ConcatC(parts) => {
                    let gs = g.as_slice().unwrap();
                    let (_, h, w) = dims3(&self.nodes[parts[0]].value);
                    let mut off = 0;
                    for &p in parts {
                        let (c, _, _) = dims3(&self.nodes[p].value);
                        let sub = ArrayD::from_shape_vec(
                            IxDyn(&[c, h, w]),
                            gs[off * h * w..(off + c) * h * w].to_vec(),
                        )
                        .unwrap();
                        self.accum(&mut grads, p, sub);
                        off += c;
                    }
                }
                Op::Stack2(a, b) => {
                    let c = self.nodes[*a].value.len();
                    let mut da = Array1::<f64>::zeros(c);
                    let mut db = Array1::<f64>::zeros(c);
                    for j in 0..c {
                        da[j] = g[[0, j]];
                        db[j] = g[[1, j]];
                    }
                    self.accum(&mut grads, *a, da.into_dyn());
                    self.accum(&mut grads, *b, db.into_dyn());
                }
                Op::Row { x, idx } => {
                    let xv = &self.nodes[*x].value;
                    let mut d = ArrayD::<f64>::zeros(xv.raw_dim());
                    for j in 0..xv.shape()[1] {
                        d[[*idx, j]] = g[[j]];
                    }
                    self.accum(&mut grads, *x, d);
                }
                Op::MulMap { x, map } => {
                    let xv = &self.nodes[*x].value;
                    let mv = &self.nodes[*map].value;
                    let (c, h, w) = dims3(xv);
                    if self.req(*x) {
                        let mut dx = g.clone();
                        for ci in 0..c {
                            for y in 0..h {
                                for xx in 0..w {
                                    dx[[ci, y, xx]] *= mv[[0, y, xx]];
                                }
                            }
                        }
                        self.accum(&mut grads, *x, dx);
                    }
                    if self.req(*map) {
                        let mut dm = ArrayD::<f64>::zeros(mv.raw_dim());
                        for y in 0..h {
                            for xx in 0..w {
                                let mut s = 0.0;
                                for ci in 0..c {
                                    s += g[[ci, y, xx]] * xv[[ci, y, xx]];
                                }
                                dm[[0, y, xx]] = s;
                            }
                        }
                        self.accum(&mut grads, *map, dm);
                    }
                }
                Op::ChanScale { x, s } => {
                    let xv = &self.nodes[*x].value;
                    let sv = &self.nodes[*s].value;
                    let (c, h, w) = dims3(xv);
                    if self.req(*x) {
                        let mut dx = g.clone();
                        for ci in 0..c {
                            let f = sv[[ci]];
                            for y in 0..h {
                                for xx in 0..w {
                                    dx[[ci, y, xx]] *= f;
                                }
                            }
                        }
                        self.accum(&mut grads, *x, dx);
                    }
                    if self.req(*s) {
                        let mut ds = Array1::<f64>::zeros(c);
                        for ci in 0..c {
                            let mut acc = 0.0;
                            for y in 0..h {
                                for xx in 0..w {
                                    acc += g[[ci, y, xx]] * xv[[ci, y, xx]];
                                }
                            }
                            ds[ci] = acc;
                        }
                        self.accum(&mut grads, *s, ds.into_dyn());
                    }
                }
                Op::MixColumn { mat, col, feats } => {
                    let mv = &self.nodes[*mat].value;
                    if self.req(*mat) {
                        let mut dm = ArrayD::<f64>::zeros(mv.raw_dim());
                        for (i, &f) in feats.iter().enumerate() {
                            let fv = &self.nodes[f].value;
                            dm[[i, *col]] =
                                g.iter().zip(fv.iter()).map(|(a, b)| a * b).sum::<f64>();
                        }
                        self.accum(&mut grads, *mat, dm);
                    }
                    for (i, &f) in feats.iter().enumerate() {
                        if self.req(f) {
                            self.accum(&mut grads, f, g.mapv(|v| v * mv[[i, *col]]));
                        }
                    }
                }
                Op::MeanAll(a) => {
                    let x = &self.nodes[*a].value;
                    let gv = g[[0]] / x.len() as f64;
                    self.accum(&mut grads, *a, ArrayD::from_elem(x.raw_dim(), gv));
                }
                Op::L1Const { x, target } => {
                    let xv = &self.nodes[*x].value;
                    let gv = g[[0]] / xv.len() as f64;
                    let mut d = ArrayD::<f64>::zeros(xv.raw_dim());
                    let ds = d.as_slice_mut().unwrap();
                    let xs = xv.as_slice().unwrap();
                    let ts = target.as_slice().unwrap();
                    for i in 0..xs.len() {
                        ds[i] = gv * (xs[i] - ts[i]).signum_or_zero();
                    }
                    self.accum(&mut grads, *x, d);
                }
                Op::L2Const { x, target } => {
                    let xv = &self.nodes[*x].value;
                    let gv = 2.0 * g[[0]] / xv.len() as f64;
                    let mut d = ArrayD::<f64>::zeros(xv.raw_dim());
                    let ds = d.as_slice_mut().unwrap();
                    let xs = xv.as_slice().unwrap();
                    let ts = target.as_slice().unwrap();
                    for i in 0..xs.len() {
                        ds[i] = gv * (xs[i] - ts[i]);
                    }
                    self.accum(&mut grads, *x, d);
                }
                Op::Reshape { x } => {
                    let xv = &self.nodes[*x].value;
                    let d = ArrayD::from_shape_vec(
                        xv.raw_dim(),
                        g.as_slice().unwrap().to_vec(),
                    )
                    .unwrap();
                    self.accum(&mut grads, *x, d);
                }
                Op::ResizeBilinear { x } => {
                    let xv = &self.nodes[*x].value;
                    let (c, h, w) = dims3(xv);
                    let (_, ho, wo) = dims3(&self.nodes[id].value);
                    let mut d = ArrayD::<f64>::zeros(xv.raw_dim());
                    for oy in 0..ho {
                        let (y0, y1, ty) = resize_taps(oy, ho, h);
                        for ox in 0..wo {
                            let (x0, x1, tx) = resize_taps(ox, wo, w);
                            for ci in 0..c {
                                let gv = g[[ci, oy, ox]];
                                d[[ci, y0, x0]] += gv * (1.0 - ty) * (1.0 - tx);
                                d[[ci, y0, x1]] += gv * (1.0 - ty) * tx;
                                d[[ci, y1, x0]] += gv * ty * (1.0 - tx);
                                d[[ci, y1, x1]] += gv * ty * tx;
                            }
                        }
                    }
                    self.accum(&mut grads, *x, d);
                }
            }
        }
        out
    }

    fn accum(&self, grads: &mut [Option<ArrayD<f64>>], id: VarId, delta: ArrayD<f64>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => *g += &delta,
            slot @ None => *slot = Some(delta),
        }
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    // Subgradient of |.| at 0 taken as 0.
    fn signum_or_zero(self) -> f64 {
        if self == 0.0 {
            0.0
        } else {
            self.signum()
        }
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

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

pub fn dims3(a: &ArrayD<f64>) -> (usize, usize, usize) {
    assert_eq!(a.ndim(), 3, "expected a (C, H, W) tensor, got {:?}", a.shape());
    (a.shape()[0], a.shape()[1], a.shape()[2])
}

pub fn conv_out_len(n: usize, k: usize, stride: usize, pad_lo: usize, pad_hi: usize, dilation: usize) -> usize {
    let eff = dilation * (k - 1) + 1;
    (n + pad_lo + pad_hi - eff) / stride + 1
}

fn im2col(
    x: &ArrayD<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: [usize; 4],
    dilation: usize,
) -> (Array2<f64>, usize, usize) {
    let (c, h, w) = dims3(x);
    let ho = conv_out_len(h, kh, stride, pad[0], pad[1], dilation);
    let wo = conv_out_len(w, kw, stride, pad[2], pad[3], dilation);
    let xs = x.as_slice().unwrap();
    let mut col = Array2::<f64>::zeros((c * kh * kw, ho * wo));
    let cs = col.as_slice_mut().unwrap();
    for ci in 0..c {
        let base = ci * h * w;
        for ki in 0..kh {
            for kj in 0..kw {
                let row = (ci * kh + ki) * kw + kj;
                let rbase = row * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ki * dilation) as isize - pad[0] as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let xrow = base + iy as usize * w;
                    let obase = rbase + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + kj * dilation) as isize - pad[2] as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cs[obase + ox] = xs[xrow + ix as usize];
                    }
                }
            }
        }
    }
    (col, ho, wo)
}

fn conv2d_fwd(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    b: &ArrayD<f64>,
    stride: usize,
    pad: [usize; 4],
    dilation: usize,
) -> ArrayD<f64> {
    let (cin, _, _) = dims3(x);
    let (cout, wcin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cin, wcin, "conv input channels");
    let (col, ho, wo) = im2col(x, kh, kw, stride, pad, dilation);
    let wm = ArrayView2::from_shape((cout, cin * kh * kw), w.as_slice().unwrap()).unwrap();
    let mut y = wm.dot(&col);
    for r in 0..cout {
        let bv = b[[r]];
        y.row_mut(r).mapv_inplace(|v| v + bv);
    }
    ArrayD::from_shape_vec(IxDyn(&[cout, ho, wo]), y.into_raw_vec_and_offset().0).unwrap()
}

#[allow(clippy::too_many_arguments)]
fn conv2d_bwd(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    gy: &ArrayD<f64>,
    stride: usize,
    pad: [usize; 4],
    dilation: usize,
    need_dw: bool,
    need_dx: bool,
) -> (Option<ArrayD<f64>>, ArrayD<f64>, Option<ArrayD<f64>>) {
    let (cin, h, wdim) = dims3(x);
    let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (_, ho, wo) = dims3(gy);
    let gym = ArrayView2::from_shape((cout, ho * wo), gy.as_slice().unwrap()).unwrap();

    let mut db = Array1::<f64>::zeros(cout);
    for r in 0..cout {
        db[r] = gym.row(r).sum();
    }

    let dw = if need_dw {
        let (col, _, _) = im2col(x, kh, kw, stride, pad, dilation);
        let dwm = gym.dot(&col.t());
        Some(
            ArrayD::from_shape_vec(IxDyn(&[cout, cin, kh, kw]), dwm.into_raw_vec_and_offset().0)
                .unwrap(),
        )
    } else {
        None
    };

    let dx = if need_dx {
        let wm = ArrayView2::from_shape((cout, cin * kh * kw), w.as_slice().unwrap()).unwrap();
        let dcol = wm.t().dot(&gym); // (cin*kh*kw, ho*wo)
        let mut dx = ArrayD::<f64>::zeros(x.raw_dim());
        let dxs = dx.as_slice_mut().unwrap();
        let dcs = dcol.as_slice().unwrap();
        for ci in 0..cin {
            let base = ci * h * wdim;
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let rbase = row * ho * wo;
                    for oy in 0..ho {
                        let iy = (oy * stride + ki * dilation) as isize - pad[0] as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let xrow = base + iy as usize * wdim;
                        let obase = rbase + oy * wo;
                        for ox in 0..wo {
                            let ix = (ox * stride + kj * dilation) as isize - pad[2] as isize;
                            if ix < 0 || ix >= wdim as isize {
                                continue;
                            }
                            dxs[xrow + ix as usize] += dcs[obase + ox];
                        }
                    }
                }
            }
        }
        Some(dx)
    } else {
        None
    };

    (dw, db.into_dyn(), dx)
}

fn convt2d_fwd(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    b: &ArrayD<f64>,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> ArrayD<f64> {
    let (cin, h, wdim) = dims3(x);
    let (wcin, cout, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(cin, wcin, "conv_t input channels");
    let ho = (h - 1) * stride + kh + out_pad - 2 * pad;
    let wo = (wdim - 1) * stride + kw + out_pad - 2 * pad;
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[cout, ho, wo]));
    for co in 0..cout {
        let bv = b[[co]];
        for y in 0..ho {
            for xx in 0..wo {
                out[[co, y, xx]] = bv;
            }
        }
    }
    for ci in 0..cin {
        for iy in 0..h {
            for ix in 0..wdim {
                let xv = x[[ci, iy, ix]];
                if xv == 0.0 {
                    continue;
                }
                for co in 0..cout {
                    for ki in 0..kh {
                        let oy = (iy * stride + ki) as isize - pad as isize;
                        if oy < 0 || oy >= ho as isize {
                            continue;
                        }
                        for kj in 0..kw {
                            let ox = (ix * stride + kj) as isize - pad as isize;
                            if ox < 0 || ox >= wo as isize {
                                continue;
                            }
                            out[[co, oy as usize, ox as usize]] += w[[ci, co, ki, kj]] * xv;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn convt2d_bwd(
    x: &ArrayD<f64>,
    w: &ArrayD<f64>,
    gy: &ArrayD<f64>,
    stride: usize,
    pad: usize,
    _out_pad: usize,
    need_dw: bool,
    need_dx: bool,
) -> (Option<ArrayD<f64>>, ArrayD<f64>, Option<ArrayD<f64>>) {
    let (cin, h, wdim) = dims3(x);
    let (_, cout, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (_, ho, wo) = dims3(gy);

    let mut db = Array1::<f64>::zeros(cout);
    for co in 0..cout {
        for y in 0..ho {
            for xx in 0..wo {
                db[co] += gy[[co, y, xx]];
            }
        }
    }

    let mut dw = if need_dw {
        Some(ArrayD::<f64>::zeros(w.raw_dim()))
    } else {
        None
    };
    let mut dx = if need_dx {
        Some(ArrayD::<f64>::zeros(x.raw_dim()))
    } else {
        None
    };

    for ci in 0..cin {
        for iy in 0..h {
            for ix in 0..wdim {
                let xv = x[[ci, iy, ix]];
                for co in 0..cout {
                    let mut acc = 0.0;
                    for ki in 0..kh {
                        let oy = (iy * stride + ki) as isize - pad as isize;
                        if oy < 0 || oy >= ho as isize {
                            continue;
                        }
                        for kj in 0..kw {
                            let ox = (ix * stride + kj) as isize - pad as isize;
                            if ox < 0 || ox >= wo as isize {
                                continue;
                            }
                            let gv = gy[[co, oy as usize, ox as usize]];
                            if let Some(dw) = dw.as_mut() {
                                dw[[ci, co, ki, kj]] += gv * xv;
                            }
                            acc += gv * w[[ci, co, ki, kj]];
                        }
                    }
                    if let Some(dx) = dx.as_mut() {
                        dx[[ci, iy, ix]] += acc;
                    }
                }
            }
        }
    }

    (dw, db.into_dyn(), dx)
}

/// Source taps and interpolation weight for one destination index
/// (half-pixel-center convention, clamped at the border).
fn resize_taps(o: usize, n_out: usize, n_in: usize) -> (usize, usize, f64) {
    let scale = n_in as f64 / n_out as f64;
    let f = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
    let lo = f.floor() as usize;
    let hi = (lo + 1).min(n_in - 1);
    (lo, hi, f - lo as f64)
}

/// Bilinear resize of a (C, H, W) tensor (value-level helper).
pub fn bilinear_resize(x: &ArrayD<f64>, ho: usize, wo: usize) -> ArrayD<f64> {
    let (c, h, w) = dims3(x);
    if (h, w) == (ho, wo) {
        return x.clone();
    }
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[c, ho, wo]));
    for oy in 0..ho {
        let (y0, y1, ty) = resize_taps(oy, ho, h);
        for ox in 0..wo {
            let (x0, x1, tx) = resize_taps(ox, wo, w);
            for ci in 0..c {
                out[[ci, oy, ox]] = x[[ci, y0, x0]] * (1.0 - ty) * (1.0 - tx)
                    + x[[ci, y0, x1]] * (1.0 - ty) * tx
                    + x[[ci, y1, x0]] * ty * (1.0 - tx)
                    + x[[ci, y1, x1]] * ty * tx;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
        Array::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences against analytic grads for a graph builder.
    fn check_grads<F>(params: Vec<(&str, ArrayD<f64>)>, build: F, tol: f64)
    where
        F: Fn(&mut Tape, &BTreeMap<String, ArrayD<f64>>) -> VarId,
    {
        let store: BTreeMap<String, ArrayD<f64>> =
            params.iter().map(|(n, v)| (n.to_string(), v.clone())).collect();
        let mut tape = Tape::new();
        let root = build(&mut tape, &store);
        let analytic = tape.backward(root);

        let eps = 1e-5;
        for (name, base) in &store {
            let ga = analytic
                .get(name)
                .unwrap_or_else(|| panic!("no gradient for {name}"));
            for idx in 0..base.len() {
                let mut plus = store.clone();
                plus.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] += eps;
                let mut tp = Tape::new();
                let rp = build(&mut tp, &plus);
                let fp = tp.scalar(rp);

                let mut minus = store.clone();
                minus.get_mut(name).unwrap().as_slice_mut().unwrap()[idx] -= eps;
                let mut tm = Tape::new();
                let rm = build(&mut tm, &minus);
                let fm = tm.scalar(rm);

                let fd = (fp - fm) / (2.0 * eps);
                let an = ga.as_slice().unwrap()[idx];
                let denom = (an.abs() + fd.abs()).max(1e-3);
                assert!(
                    ((an - fd).abs() / denom) < tol,
                    "{name}[{idx}]: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn conv2d_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = randn(&mut rng, &[2, 5, 6]);
        let w = randn(&mut rng, &[3, 2, 3, 3]);
        let b = randn(&mut rng, &[3]);
        let t = randn(&mut rng, &[3, 3, 3]);
        check_grads(
            vec![("x", x), ("w", w), ("b", b)],
            move |tape, p| {
                let x = tape.param("x", p["x"].clone());
                let w = tape.param("w", p["w"].clone());
                let b = tape.param("b", p["b"].clone());
                let y = tape.conv2d(w, b, x, 2, [1, 1, 1, 1], 1);
                tape.l1_loss(y, &t)
            },
            1e-5,
        );
    }

    #[test]
    fn dilated_conv_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = randn(&mut rng, &[2, 6, 6]);
        let w = randn(&mut rng, &[2, 2, 3, 3]);
        let b = randn(&mut rng, &[2]);
        let t = randn(&mut rng, &[2, 6, 6]);
        check_grads(
            vec![("x", x), ("w", w), ("b", b)],
            move |tape, p| {
                let x = tape.param("x", p["x"].clone());
                let w = tape.param("w", p["w"].clone());
                let b = tape.param("b", p["b"].clone());
                let y = tape.conv2d(w, b, x, 1, [2, 2, 2, 2], 2);
                tape.l2_loss(y, &t)
            },
            1e-5,
        );
    }

    #[test]
    fn conv_transpose_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = randn(&mut rng, &[2, 4, 4]);
        let w = randn(&mut rng, &[2, 3, 3, 3]);
        let b = randn(&mut rng, &[3]);
        let t = randn(&mut rng, &[3, 8, 8]);
        check_grads(
            vec![("x", x), ("w", w), ("b", b)],
            move |tape, p| {
                let x = tape.param("x", p["x"].clone());
                let w = tape.param("w", p["w"].clone());
                let b = tape.param("b", p["b"].clone());
                let y = tape.conv_t2d(w, b, x, 2, 1, 1);
                tape.l1_loss(y, &t)
            },
            1e-5,
        );
    }

    #[test]
    fn conv_transpose_doubles_spatial_size() {
        let mut tape = Tape::new();
        let x = tape.constant(ArrayD::zeros(IxDyn(&[4, 6, 6])));
        let w = tape.constant(ArrayD::zeros(IxDyn(&[4, 2, 3, 3])));
        let b = tape.constant(ArrayD::zeros(IxDyn(&[2])));
        let y = tape.conv_t2d(w, b, x, 2, 1, 1);
        assert_eq!(tape.value(y).shape(), &[2, 12, 12]);
    }

    #[test]
    fn mixed_graph_gradients_match_fd() {
        // softmax + gap + linear + pixel shuffle + gates in one graph
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = randn(&mut rng, &[4, 4, 4]);
        let w = randn(&mut rng, &[2, 4]);
        let b = randn(&mut rng, &[2]);
        let m = randn(&mut rng, &[1, 8, 8]);
        let t = randn(&mut rng, &[1, 8, 8]);
        check_grads(
            vec![("x", x), ("w", w), ("b", b), ("m", m)],
            move |tape, p| {
                let x = tape.param("x", p["x"].clone());
                let w = tape.param("w", p["w"].clone());
                let b = tape.param("b", p["b"].clone());
                let m = tape.param("m", p["m"].clone());
                let g = tape.gap(x);
                let z = tape.linear(w, b, g);
                let z2 = tape.linear(w, b, g);
                let mat = tape.stack2(z, z2);
                let sm = tape.softmax_cols(mat);
                let ps = tape.pixel_shuffle(x, 2);
                let row0 = tape.row(sm, 0);
                let _ = row0;
                let mg = tape.sigmoid(m);
                let gated = tape.mul_map(ps, mg);
                let v = tape.mix_column(sm, 1, &[gated, ps]);
                let act = tape.leaky_relu(v, 0.2);
                tape.l1_loss(act, &t)
            },
            1e-5,
        );
    }

    #[test]
    fn shared_leaf_accumulates_from_every_use() {
        // f(p) = mean(p) + mean(p*p): grad = 1/n + 2p/n
        let p = ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.5, -1.0, 2.0]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param("p", p.clone());
        let sq = tape.mul(v, v);
        let m1 = tape.mean_all(v);
        let m2 = tape.mean_all(sq);
        let root = tape.add(m1, m2);
        let g = tape.backward(root);
        let gp = &g["p"];
        for i in 0..3 {
            let expect = 1.0 / 3.0 + 2.0 * p[[i]] / 3.0;
            assert!((gp[[i]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_columns_are_probability_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let logits = randn(&mut rng, &[3, 5]);
            let mut tape = Tape::new();
            let l = tape.constant(logits);
            let s = tape.softmax_cols(l);
            let v = tape.value(s);
            for j in 0..5 {
                let col: f64 = (0..3).map(|i| v[[i, j]]).sum();
                assert!((col - 1.0).abs() < 1e-12);
                for i in 0..3 {
                    assert!(v[[i, j]] >= 0.0);
                }
            }
        }
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.param("a", ArrayD::from_elem(IxDyn(&[2]), 1.5));
        let c = tape.constant(ArrayD::from_elem(IxDyn(&[2]), 2.0));
        let y = tape.mul(a, c);
        let root = tape.mean_all(y);
        let g = tape.backward(root);
        assert!(g.contains_key("a"));
        assert_eq!(g.len(), 1);
    }

    #[test]
    fn bilinear_resize_preserves_constants() {
        let x = ArrayD::from_elem(IxDyn(&[3, 9, 13]), 0.37);
        let y = bilinear_resize(&x, 4, 5);
        assert!(y.iter().all(|v| (v - 0.37).abs() < 1e-12));
    }

    #[test]
    fn resize_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = randn(&mut rng, &[2, 6, 6]);
        let t = randn(&mut rng, &[2, 3, 3]);
        check_grads(
            vec![("x", x)],
            move |tape, p| {
                let x = tape.param("x", p["x"].clone());
                let y = tape.resize_bilinear(x, 3, 3);
                tape.l1_loss(y, &t)
            },
            1e-5,
        );
    }
}
