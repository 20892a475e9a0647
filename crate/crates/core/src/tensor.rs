//! Dense row-major `f64` tensors and the handful of kernels the networks need
//! outside the autograd graph (resizing, elementwise helpers).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!("shape {:?} needs {} elements, got {}", shape, n, data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {:?}", self.shape, shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Interpret as NCHW, returning the four dims.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::Shape(format!("expected a 4-d NCHW tensor, got {:?}", self.shape))),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|x| x * factor)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Shape("cannot stack an empty list".into()))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::Shape(format!("stack shape mismatch: {:?} vs {:?}", t.shape, first.shape)));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// The `i`-th slice along the leading axis.
    pub fn index(&self, i: usize) -> Self {
        let inner: usize = self.shape[1..].iter().product();
        Self { shape: self.shape[1..].to_vec(), data: self.data[i * inner..(i + 1) * inner].to_vec() }
    }
}

/// Per-axis linear interpolation taps for a bilinear resize with
/// half-pixel centers (corner alignment off).
#[derive(Clone, Debug)]
pub(crate) struct AxisTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w_hi: Vec<f64>,
}

impl AxisTaps {
    pub fn new(input: usize, output: usize) -> Self {
        let ratio = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut w_hi = Vec::with_capacity(output);
        for o in 0..output {
            let src = ((o as f64 + 0.5) * ratio - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            lo.push(i0);
            hi.push(i1);
            w_hi.push(src - i0 as f64);
        }
        Self { lo, hi, w_hi }
    }
}

/// Bilinear resize of the trailing two axes of an NCHW tensor.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument(format!("resize from {h}x{w} to {out_h}x{out_w} is degenerate")));
    }
    let ty = AxisTaps::new(h, out_h);
    let tx = AxisTaps::new(w, out_w);
    let mut out = vec![0.0; n * c * out_h * out_w];
    resize_forward(x.data(), &mut out, n * c, (h, w), (out_h, out_w), &ty, &tx);
    Tensor::new(vec![n, c, out_h, out_w], out)
}

pub(crate) fn resize_forward(
    src: &[f64],
    dst: &mut [f64],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    ty: &AxisTaps,
    tx: &AxisTaps,
) {
    for p in 0..planes {
        let s = &src[p * h * w..(p + 1) * h * w];
        let d = &mut dst[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, wy) = (ty.lo[oy], ty.hi[oy], ty.w_hi[oy]);
            for ox in 0..ow {
                let (x0, x1, wx) = (tx.lo[ox], tx.hi[ox], tx.w_hi[ox]);
                let top = s[y0 * w + x0] * (1.0 - wx) + s[y0 * w + x1] * wx;
                let bot = s[y1 * w + x0] * (1.0 - wx) + s[y1 * w + x1] * wx;
                d[oy * ow + ox] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
}

pub(crate) fn resize_backward(
    grad_out: &[f64],
    grad_in: &mut [f64],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    ty: &AxisTaps,
    tx: &AxisTaps,
) {
    for p in 0..planes {
        let g = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let d = &mut grad_in[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, wy) = (ty.lo[oy], ty.hi[oy], ty.w_hi[oy]);
            for ox in 0..ow {
                let (x0, x1, wx) = (tx.lo[ox], tx.hi[ox], tx.w_hi[ox]);
                let v = g[oy * ow + ox];
                d[y0 * w + x0] += v * (1.0 - wy) * (1.0 - wx);
                d[y0 * w + x1] += v * (1.0 - wy) * wx;
                d[y1 * w + x0] += v * wy * (1.0 - wx);
                d[y1 * w + x1] += v * wy * wx;
            }
        }
    }
}
