//! A reverse-mode tape over [`Tensor`] values.
//!
//! Every forward pass builds a fresh [`Graph`]. Parameters enter either as
//! trainable leaves ([`Graph::param`]) or as constants ([`Graph::constant`]);
//! constants never receive gradients, which is how a network is frozen.

use crate::conv::{self, ConvGeom, ConvShapes};
use crate::error::{Error, Result};
use crate::tensor::{self, AxisTaps, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvTranspose2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    PRelu { x: Var, alpha: Var },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Resize { x: Var, ty: AxisTaps, tx: AxisTaps },
    GlobalAvgPool(Var),
    Linear { x: Var, w: Var, b: Var },
    LogSoftmax(Var),
    Channel { x: Var, c: usize },
    ClampMin { x: Var, min: f64 },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
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

/// Gradients indexed by [`Var`], produced by [`Graph::backward`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, kh, kw) = self.value(w).dims4()?;
        if wcin != cin || (kh, kw) != geom.kernel {
            return Err(Error::Shape(format!(
                "conv weight {:?} does not fit input {:?} with kernel {:?}",
                self.shape(w),
                self.shape(x),
                geom.kernel
            )));
        }
        let out_hw = geom
            .output_size(h, wd)
            .ok_or_else(|| Error::Shape(format!("kernel {:?} does not fit a {h}x{wd} input", geom.kernel)))?;
        let s = ConvShapes { n, cin, cout, in_hw: (h, wd), out_hw };
        let out = conv::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &s,
            &geom,
        );
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let t = Tensor::new(vec![n, cout, out_hw.0, out_hw.1], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b, geom }, needs))
    }

    /// Transposed convolution producing an `out_hw` map; `geom` is the
    /// forward convolution that would map `out_hw` back to the input size.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        out_hw: (usize, usize),
    ) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (wcin, cout, kh, kw) = self.value(w).dims4()?;
        if wcin != cin || (kh, kw) != geom.kernel {
            return Err(Error::Shape(format!(
                "transposed conv weight {:?} does not fit input {:?}",
                self.shape(w),
                self.shape(x)
            )));
        }
        if geom.output_size(out_hw.0, out_hw.1) != Some((h, wd)) {
            return Err(Error::Shape(format!("transposed conv cannot produce {out_hw:?} from {h}x{wd}")));
        }
        let s = ConvShapes { n, cin, cout, in_hw: (h, wd), out_hw };
        let out = conv::conv_transpose2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &s,
            &geom,
        );
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let t = Tensor::new(vec![n, cout, out_hw.0, out_hw.1], out)?;
        Ok(self.push(t, Op::ConvTranspose2d { x, w, b, geom }, needs))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::Shape(format!("elementwise shape mismatch {:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x).map(f);
        let needs = self.needs(x);
        self.push(t, op, needs)
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        self.unary(x, |v| v * k, Op::Scale(x, k))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    pub fn clamp_min(&mut self, x: Var, min: f64) -> Var {
        self.unary(x, |v| v.max(min), Op::ClampMin { x, min })
    }

    /// Per-channel parametric ReLU; `alpha` has one entry per channel.
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let a = self.value(alpha).data();
        if a.len() != c {
            return Err(Error::Shape(format!("prelu has {} slopes for {c} channels", a.len())));
        }
        let plane = h * w;
        let mut out = self.value(x).data().to_vec();
        for i in 0..n {
            for ch in 0..c {
                let s = &mut out[(i * c + ch) * plane..(i * c + ch + 1) * plane];
                s.iter_mut().filter(|v| **v <= 0.0).for_each(|v| *v *= a[ch]);
            }
        }
        let needs = self.needs(x) || self.needs(alpha);
        let t = Tensor::new(vec![n, c, h, w], out)?;
        Ok(self.push(t, Op::PRelu { x, alpha }, needs))
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/cols are dropped).
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::Shape(format!("cannot max-pool a {h}x{w} map")));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for p in 0..n * c {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let needs = self.needs(x);
        let t = Tensor::new(vec![n, c, oh, ow], out)?;
        Ok(self.push(t, Op::MaxPool2 { x, argmax }, needs))
    }

    /// Bilinear resize (half-pixel centers) of the spatial axes.
    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (_, _, h, w) = self.value(x).dims4()?;
        let t = tensor::resize_bilinear(self.value(x), out_h, out_w)?;
        let ty = AxisTaps::new(h, out_h);
        let tx = AxisTaps::new(w, out_w);
        let needs = self.needs(x);
        Ok(self.push(t, Op::Resize { x, ty, tx }, needs))
    }

    /// `(n, c, h, w) -> (n, c)`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let plane = h * w;
        let data = self.value(x).data().chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(vec![n, c], data)?, Op::GlobalAvgPool(x), needs))
    }

    /// `x (n, in) * w^T (in, out) + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (n, din, dout) = match (&xs[..], &ws[..]) {
            ([n, din], [dout, wdin]) if din == wdin => (*n, *din, *dout),
            _ => {
                return Err(Error::Shape(format!("linear: input {xs:?} vs weight {ws:?}")));
            }
        };
        let mut out = vec![0.0; n * dout];
        for i in 0..n {
            out[i * dout..(i + 1) * dout].copy_from_slice(self.value(b).data());
        }
        conv::gemm(n, din, dout, self.value(x).data(), false, self.value(w).data(), true, 1.0, &mut out);
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        Ok(self.push(Tensor::new(vec![n, dout], out)?, Op::Linear { x, w, b }, needs))
    }

    /// Log-softmax across axis 1 of an `(n, c, ...)` tensor.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!("log_softmax needs a channel axis, got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for i in 0..n {
            for p in 0..inner {
                let at = |ch: usize| (i * c + ch) * inner + p;
                let m = (0..c).map(|ch| src[at(ch)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = m + (0..c).map(|ch| (src[at(ch)] - m).exp()).sum::<f64>().ln();
                for ch in 0..c {
                    out[at(ch)] = src[at(ch)] - lse;
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::LogSoftmax(x), needs))
    }

    /// Select channel `c` of an `(n, c, ...)` tensor, keeping a unit axis.
    pub fn channel(&mut self, x: Var, c: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || c >= shape[1] {
            return Err(Error::Shape(format!("channel {c} out of range for {shape:?}")));
        }
        let (n, ch) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(n * inner);
        for i in 0..n {
            data.extend_from_slice(&src[(i * ch + c) * inner..(i * ch + c + 1) * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[1] = 1;
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(out_shape, data)?, Op::Channel { x, c }, needs))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), needs)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let m = t.sum() / t.numel() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(m), Op::Mean(x), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// Reverse-mode sweep from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        if self.value(root).numel() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar root, got {:?}", self.shape(root))));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &gout, &mut grads)?;
            grads[idx] = Some(gout);
        }
        Ok(Grads { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn accumulate_vec(&self, grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>) -> Result<()> {
        let t = Tensor::new(self.shape(v).to_vec(), data)?;
        self.accumulate(grads, v, t);
        Ok(())
    }

    fn propagate(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let go = gout.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let (n, cin, h, wd) = self.value(*x).dims4()?;
                let (_, cout, oh, ow) = node.value.dims4()?;
                let s = ConvShapes { n, cin, cout, in_hw: (h, wd), out_hw: (oh, ow) };
                let want = (self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b)));
                let (gx, gw, gb) =
                    conv::conv2d_backward(self.value(*x).data(), self.value(*w).data(), go, &s, geom, want);
                if let Some(gx) = gx {
                    self.accumulate_vec(grads, *x, gx)?;
                }
                if let Some(gw) = gw {
                    self.accumulate_vec(grads, *w, gw)?;
                }
                if let (Some(gb), Some(b)) = (gb, b) {
                    self.accumulate_vec(grads, *b, gb)?;
                }
            }
            Op::ConvTranspose2d { x, w, b, geom } => {
                let (n, cin, h, wd) = self.value(*x).dims4()?;
                let (_, cout, oh, ow) = node.value.dims4()?;
                let s = ConvShapes { n, cin, cout, in_hw: (h, wd), out_hw: (oh, ow) };
                let want = (self.needs(*x), self.needs(*w), b.is_some_and(|b| self.needs(b)));
                let (gx, gw, gb) =
                    conv::conv_transpose2d_backward(self.value(*x).data(), self.value(*w).data(), go, &s, geom, want);
                if let Some(gx) = gx {
                    self.accumulate_vec(grads, *x, gx)?;
                }
                if let Some(gw) = gw {
                    self.accumulate_vec(grads, *w, gw)?;
                }
                if let (Some(gb), Some(b)) = (gb, b) {
                    self.accumulate_vec(grads, *b, gb)?;
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gout.clone());
                self.accumulate(grads, *b, gout.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let d = go.iter().zip(vb).map(|(g, y)| g * y).collect();
                    self.accumulate_vec(grads, *a, d)?;
                }
                if self.needs(*b) {
                    let d = go.iter().zip(va).map(|(g, x)| g * x).collect();
                    self.accumulate_vec(grads, *b, d)?;
                }
            }
            Op::Scale(x, k) => self.accumulate(grads, *x, gout.scale(*k)),
            Op::Square(x) => {
                let d = go.iter().zip(self.value(*x).data()).map(|(g, v)| 2.0 * g * v).collect();
                self.accumulate_vec(grads, *x, d)?;
            }
            Op::Relu(x) => {
                let d = go.iter().zip(self.value(*x).data()).map(|(g, v)| if *v > 0.0 { *g } else { 0.0 }).collect();
                self.accumulate_vec(grads, *x, d)?;
            }
            Op::LeakyRelu(x, slope) => {
                let d =
                    go.iter().zip(self.value(*x).data()).map(|(g, v)| if *v > 0.0 { *g } else { g * slope }).collect();
                self.accumulate_vec(grads, *x, d)?;
            }
            Op::ClampMin { x, min } => {
                let d = go.iter().zip(self.value(*x).data()).map(|(g, v)| if v > min { *g } else { 0.0 }).collect();
                self.accumulate_vec(grads, *x, d)?;
            }
            Op::PRelu { x, alpha } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let plane = h * w;
                let xv = self.value(*x).data();
                let a = self.value(*alpha).data();
                let mut dx = vec![0.0; xv.len()];
                let mut da = vec![0.0; c];
                for i in 0..n {
                    for ch in 0..c {
                        let r = (i * c + ch) * plane..(i * c + ch + 1) * plane;
                        for j in r {
                            if xv[j] > 0.0 {
                                dx[j] = go[j];
                            } else {
                                dx[j] = go[j] * a[ch];
                                da[ch] += go[j] * xv[j];
                            }
                        }
                    }
                }
                self.accumulate_vec(grads, *x, dx)?;
                self.accumulate_vec(grads, *alpha, da)?;
            }
            Op::MaxPool2 { x, argmax } => {
                let mut d = vec![0.0; self.value(*x).numel()];
                for (g, &src) in go.iter().zip(argmax) {
                    d[src] += g;
                }
                self.accumulate_vec(grads, *x, d)?;
            }
            Op::Resize { x, ty, tx } => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let (_, _, oh, ow) = node.value.dims4()?;
                let mut d = vec![0.0; n * c * h * w];
                tensor::resize_backward(go, &mut d, n * c, (h, w), (oh, ow), ty, tx);
                self.accumulate_vec(grads, *x, d)?;
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                let plane = h * w;
                let mut d = Vec::with_capacity(self.value(*x).numel());
                for g in go {
                    d.extend(std::iter::repeat_n(g / plane as f64, plane));
                }
                self.accumulate_vec(grads, *x, d)?;
            }
            Op::Linear { x, w, b } => {
                let (n, din) = (self.shape(*x)[0], self.shape(*x)[1]);
                let dout = self.shape(*w)[0];
                if self.needs(*x) {
                    let mut dx = vec![0.0; n * din];
                    conv::gemm(n, dout, din, go, false, self.value(*w).data(), false, 0.0, &mut dx);
                    self.accumulate_vec(grads, *x, dx)?;
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; dout * din];
                    conv::gemm(dout, n, din, go, true, self.value(*x).data(), false, 0.0, &mut dw);
                    self.accumulate_vec(grads, *w, dw)?;
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; dout];
                    for row in go.chunks(dout) {
                        db.iter_mut().zip(row).for_each(|(a, g)| *a += g);
                    }
                    self.accumulate_vec(grads, *b, db)?;
                }
            }
            Op::LogSoftmax(x) => {
                let shape = node.value.shape();
                let (n, c) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let y = node.value.data();
                let mut d = vec![0.0; y.len()];
                for i in 0..n {
                    for p in 0..inner {
                        let at = |ch: usize| (i * c + ch) * inner + p;
                        let gsum: f64 = (0..c).map(|ch| go[at(ch)]).sum();
                        for ch in 0..c {
                            d[at(ch)] = go[at(ch)] - y[at(ch)].exp() * gsum;
                        }
                    }
                }
                self.accumulate_vec(grads, *x, d)?;
            }
            Op::Channel { x, c } => {
                let shape = self.shape(*x);
                let (n, ch) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let mut d = vec![0.0; n * ch * inner];
                for i in 0..n {
                    d[(i * ch + c) * inner..(i * ch + c + 1) * inner].copy_from_slice(&go[i * inner..(i + 1) * inner]);
                }
                self.accumulate_vec(grads, *x, d)?;
            }
            Op::Sum(x) => {
                let t = Tensor::full(self.shape(*x), go[0]);
                self.accumulate(grads, *x, t);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel() as f64;
                let t = Tensor::full(self.shape(*x), go[0] / n);
                self.accumulate(grads, *x, t);
            }
            Op::Reshape(x) => {
                let t = gout.clone().reshape(self.shape(*x))?;
                self.accumulate(grads, *x, t);
            }
        }
        Ok(())
    }
}
