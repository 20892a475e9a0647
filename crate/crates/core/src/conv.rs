//! im2col convolution kernels on top of `matrixmultiply::dgemm`.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
}

impl ConvGeom {
    /// Square kernel, stride 1, "same" padding.
    pub fn same(k: usize) -> Self {
        Self { kernel: (k, k), stride: (1, 1), padding: (k / 2, k / 2), dilation: (1, 1) }
    }

    pub fn with_stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn with_padding(mut self, p: usize) -> Self {
        self.padding = (p, p);
        self
    }

    pub fn with_dilation(mut self, d: usize) -> Self {
        self.dilation = (d, d);
        self.padding = (d * (self.kernel.0 / 2), d * (self.kernel.1 / 2));
        self
    }

    /// Same-size rectangular kernel, e.g. 1x9 or 9x1.
    pub fn rect(kh: usize, kw: usize) -> Self {
        Self { kernel: (kh, kw), stride: (1, 1), padding: (kh / 2, kw / 2), dilation: (1, 1) }
    }

    fn out_len(input: usize, k: usize, s: usize, p: usize, d: usize) -> Option<usize> {
        let span = d * (k - 1) + 1;
        let padded = input + 2 * p;
        if padded < span {
            return None;
        }
        Some((padded - span) / s + 1)
    }

    /// Output spatial size of a forward convolution, `None` if the kernel
    /// does not fit.
    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        Some((
            Self::out_len(h, self.kernel.0, self.stride.0, self.padding.0, self.dilation.0)?,
            Self::out_len(w, self.kernel.1, self.stride.1, self.padding.1, self.dilation.1)?,
        ))
    }

    pub fn kernel_area(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }
}

/// Unfold one `(c, h, w)` image into a `(c * kh * kw, oh * ow)` matrix.
pub(crate) fn im2col(
    img: &[f64],
    c: usize,
    (h, w): (usize, usize),
    g: &ConvGeom,
    (oh, ow): (usize, usize),
    cols: &mut [f64],
) {
    let (kh, kw) = g.kernel;
    let p = oh * ow;
    for ch in 0..c {
        let plane = &img[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kh {
            let oy_off = (ky * g.dilation.0) as isize - g.padding.0 as isize;
            let (y_lo, y_hi) = valid_range(oh, g.stride.0, oy_off, h);
            for kx in 0..kw {
                let ox_off = (kx * g.dilation.1) as isize - g.padding.1 as isize;
                let (x_lo, x_hi) = valid_range(ow, g.stride.1, ox_off, w);
                let row = (ch * kh + ky) * kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                dst[..y_lo * ow].fill(0.0);
                dst[y_hi * ow..].fill(0.0);
                for oy in y_lo..y_hi {
                    let iy = (oy * g.stride.0) as isize + oy_off;
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    line[..x_lo].fill(0.0);
                    line[x_hi.max(x_lo)..].fill(0.0);
                    if x_lo >= x_hi {
                        continue;
                    }
                    let ix0 = ((x_lo * g.stride.1) as isize + ox_off) as usize;
                    if g.stride.1 == 1 {
                        line[x_lo..x_hi].copy_from_slice(&src[ix0..ix0 + x_hi - x_lo]);
                    } else {
                        for (j, v) in line[x_lo..x_hi].iter_mut().enumerate() {
                            *v = src[ix0 + j * g.stride.1];
                        }
                    }
                }
            }
        }
    }
}

/// Output indices `o` in `0..n` with `o * stride + offset` inside `0..len`.
fn valid_range(n: usize, stride: usize, offset: isize, len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { (-offset + s - 1) / s };
    let room = len as isize - offset;
    let hi = if room <= 0 { 0 } else { (room + s - 1) / s };
    let lo = (lo as usize).min(n);
    (lo, (hi as usize).clamp(lo, n))
}

/// Adjoint of [`im2col`]: scatter-add columns back into the image.
pub(crate) fn col2im(
    cols: &[f64],
    c: usize,
    (h, w): (usize, usize),
    g: &ConvGeom,
    (oh, ow): (usize, usize),
    img: &mut [f64],
) {
    let (kh, kw) = g.kernel;
    let p = oh * ow;
    for ch in 0..c {
        let plane = &mut img[ch * h * w..(ch + 1) * h * w];
        for ky in 0..kh {
            let oy_off = (ky * g.dilation.0) as isize - g.padding.0 as isize;
            let (y_lo, y_hi) = valid_range(oh, g.stride.0, oy_off, h);
            for kx in 0..kw {
                let ox_off = (kx * g.dilation.1) as isize - g.padding.1 as isize;
                let (x_lo, x_hi) = valid_range(ow, g.stride.1, ox_off, w);
                if x_lo >= x_hi {
                    continue;
                }
                let row = (ch * kh + ky) * kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in y_lo..y_hi {
                    let iy = (oy * g.stride.0) as isize + oy_off;
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let line = &src[oy * ow + x_lo..oy * ow + x_hi];
                    let ix0 = ((x_lo * g.stride.1) as isize + ox_off) as usize;
                    if g.stride.1 == 1 {
                        for (d, v) in dst[ix0..ix0 + line.len()].iter_mut().zip(line) {
                            *d += v;
                        }
                    } else {
                        for (j, v) in line.iter().enumerate() {
                            dst[ix0 + j * g.stride.1] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c = alpha * op(a) * op(b) + beta * c` where `op` optionally
/// transposes. `a` is `m x k` after `op`, `b` is `k x n` after `op`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    // Row-major strides; a transpose just swaps them.
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output channel count up to which convolutions skip im2col and
/// accumulate shifted rows directly; skinny GEMMs are slow.
const DIRECT_MAX_COUT: usize = 4;

/// Visit every kernel tap with the rectangle of outputs whose input falls
/// inside the image: `f(tap, (y_lo, y_hi), (x_lo, x_hi), (oy_off, ox_off))`.
fn for_each_tap(
    g: &ConvGeom,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    mut f: impl FnMut(usize, (usize, usize), (usize, usize), (isize, isize)),
) {
    let (kh, kw) = g.kernel;
    for ky in 0..kh {
        let oy_off = (ky * g.dilation.0) as isize - g.padding.0 as isize;
        let ys = valid_range(oh, g.stride.0, oy_off, h);
        for kx in 0..kw {
            let ox_off = (kx * g.dilation.1) as isize - g.padding.1 as isize;
            let xs = valid_range(ow, g.stride.1, ox_off, w);
            if ys.0 < ys.1 && xs.0 < xs.1 {
                f(ky * kw + kx, ys, xs, (oy_off, ox_off));
            }
        }
    }
}

/// Index of the input pixel feeding output `(oy, ox)` at a given offset.
#[inline]
fn src_index(g: &ConvGeom, w: usize, oy: usize, ox: usize, (oy_off, ox_off): (isize, isize)) -> usize {
    let iy = (oy * g.stride.0) as isize + oy_off;
    let ix = (ox * g.stride.1) as isize + ox_off;
    iy as usize * w + ix as usize
}

fn direct_forward(x: &[f64], w: &[f64], s: &ConvShapes, g: &ConvGeom, y: &mut [f64]) {
    let (ih, iw) = s.in_hw;
    let (oh, ow) = s.out_hw;
    let area = g.kernel_area();
    for co in 0..s.cout {
        let yc = &mut y[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..s.cin {
            let xc = &x[ci * ih * iw..(ci + 1) * ih * iw];
            let wc = &w[(co * s.cin + ci) * area..(co * s.cin + ci + 1) * area];
            for_each_tap(g, s.in_hw, s.out_hw, |t, (y0, y1), (x0, x1), off| {
                let wv = wc[t];
                for oy in y0..y1 {
                    let base = src_index(g, iw, oy, x0, off);
                    let row = &mut yc[oy * ow + x0..oy * ow + x1];
                    if g.stride.1 == 1 {
                        for (v, xv) in row.iter_mut().zip(&xc[base..base + x1 - x0]) {
                            *v += wv * xv;
                        }
                    } else {
                        for (j, v) in row.iter_mut().enumerate() {
                            *v += wv * xc[base + j * g.stride.1];
                        }
                    }
                }
            });
        }
    }
}

fn direct_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    s: &ConvShapes,
    g: &ConvGeom,
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
) {
    let (ih, iw) = s.in_hw;
    let (oh, ow) = s.out_hw;
    let area = g.kernel_area();
    let sx = g.stride.1;
    for co in 0..s.cout {
        let dyc = &dy[co * oh * ow..(co + 1) * oh * ow];
        for ci in 0..s.cin {
            let xc = &x[ci * ih * iw..(ci + 1) * ih * iw];
            let widx = (co * s.cin + ci) * area;
            for_each_tap(g, s.in_hw, s.out_hw, |t, (y0, y1), (x0, x1), off| {
                let wv = w[widx + t];
                let mut acc = 0.0;
                for oy in y0..y1 {
                    let base = src_index(g, iw, oy, x0, off);
                    let drow = &dyc[oy * ow + x0..oy * ow + x1];
                    if gw.is_some() {
                        acc += drow.iter().enumerate().map(|(j, d)| d * xc[base + j * sx]).sum::<f64>();
                    }
                    if let Some(gx) = gx.as_deref_mut() {
                        let gxc = &mut gx[ci * ih * iw..(ci + 1) * ih * iw];
                        for (j, d) in drow.iter().enumerate() {
                            gxc[base + j * sx] += wv * d;
                        }
                    }
                }
                if let Some(gw) = gw.as_deref_mut() {
                    gw[widx + t] += acc;
                }
            });
        }
    }
}

pub(crate) struct ConvShapes {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
}

/// y = conv(x, w) + b with `w` laid out `(cout, cin, kh, kw)`.
pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, s: &ConvShapes, g: &ConvGeom) -> Vec<f64> {
    let k = s.cin * g.kernel_area();
    let p = s.out_hw.0 * s.out_hw.1;
    let in_sz = s.cin * s.in_hw.0 * s.in_hw.1;
    let mut out = vec![0.0; s.n * s.cout * p];
    let mut cols = if s.cout <= DIRECT_MAX_COUT { Vec::new() } else { vec![0.0; k * p] };
    for i in 0..s.n {
        let y = &mut out[i * s.cout * p..(i + 1) * s.cout * p];
        if s.cout <= DIRECT_MAX_COUT {
            direct_forward(&x[i * in_sz..(i + 1) * in_sz], w, s, g, y);
        } else {
            im2col(&x[i * in_sz..(i + 1) * in_sz], s.cin, s.in_hw, g, s.out_hw, &mut cols);
            gemm(s.cout, k, p, w, false, &cols, false, 0.0, y);
        }
        if let Some(b) = b {
            for (co, row) in y.chunks_mut(p).enumerate() {
                row.iter_mut().for_each(|v| *v += b[co]);
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] with respect to the input, weight and
/// bias. Inputs that do not need a gradient are skipped.
/// Gradients with respect to input, weight and bias, where requested.
pub(crate) type ConvGrads = (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>);

pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    s: &ConvShapes,
    g: &ConvGeom,
    want: (bool, bool, bool),
) -> ConvGrads {
    let k = s.cin * g.kernel_area();
    let p = s.out_hw.0 * s.out_hw.1;
    let in_sz = s.cin * s.in_hw.0 * s.in_hw.1;
    let mut gx = want.0.then(|| vec![0.0; s.n * in_sz]);
    let mut gw = want.1.then(|| vec![0.0; s.cout * k]);
    let mut gb = want.2.then(|| vec![0.0; s.cout]);
    let mut cols = if s.cout <= DIRECT_MAX_COUT { Vec::new() } else { vec![0.0; k * p] };
    for i in 0..s.n {
        let dy = &grad_out[i * s.cout * p..(i + 1) * s.cout * p];
        if let Some(gb) = gb.as_mut() {
            for (co, row) in dy.chunks(p).enumerate() {
                gb[co] += row.iter().sum::<f64>();
            }
        }
        if s.cout <= DIRECT_MAX_COUT {
            let xi = &x[i * in_sz..(i + 1) * in_sz];
            let gxi = gx.as_mut().map(|v| &mut v[i * in_sz..(i + 1) * in_sz]);
            direct_backward(xi, w, dy, s, g, gxi, gw.as_deref_mut());
            continue;
        }
        if let Some(gw) = gw.as_mut() {
            im2col(&x[i * in_sz..(i + 1) * in_sz], s.cin, s.in_hw, g, s.out_hw, &mut cols);
            gemm(s.cout, p, k, dy, false, &cols, true, 1.0, gw);
        }
        if let Some(gx) = gx.as_mut() {
            gemm(k, s.cout, p, w, true, dy, false, 0.0, &mut cols);
            col2im(&cols, s.cin, s.in_hw, g, s.out_hw, &mut gx[i * in_sz..(i + 1) * in_sz]);
        }
    }
    (gx, gw, gb)
}

/// Transposed convolution with `w` laid out `(cin, cout, kh, kw)`. `s.in_hw`
/// is the (small) input, `s.out_hw` the (large) output; `g` describes the
/// forward convolution that maps the output back to the input size.
pub(crate) fn conv_transpose2d_forward(
    x: &[f64],
    w: &[f64],
    b: Option<&[f64]>,
    s: &ConvShapes,
    g: &ConvGeom,
) -> Vec<f64> {
    let k = s.cout * g.kernel_area();
    let p_in = s.in_hw.0 * s.in_hw.1;
    let out_sz = s.cout * s.out_hw.0 * s.out_hw.1;
    let mut out = vec![0.0; s.n * out_sz];
    let mut cols = vec![0.0; k * p_in];
    for i in 0..s.n {
        let xi = &x[i * s.cin * p_in..(i + 1) * s.cin * p_in];
        gemm(k, s.cin, p_in, w, true, xi, false, 0.0, &mut cols);
        let y = &mut out[i * out_sz..(i + 1) * out_sz];
        col2im(&cols, s.cout, s.out_hw, g, s.in_hw, y);
        if let Some(b) = b {
            let plane = s.out_hw.0 * s.out_hw.1;
            for (co, row) in y.chunks_mut(plane).enumerate() {
                row.iter_mut().for_each(|v| *v += b[co]);
            }
        }
    }
    out
}

pub(crate) fn conv_transpose2d_backward(
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    s: &ConvShapes,
    g: &ConvGeom,
    want: (bool, bool, bool),
) -> ConvGrads {
    let k = s.cout * g.kernel_area();
    let p_in = s.in_hw.0 * s.in_hw.1;
    let plane = s.out_hw.0 * s.out_hw.1;
    let out_sz = s.cout * plane;
    let mut gx = want.0.then(|| vec![0.0; s.n * s.cin * p_in]);
    let mut gw = want.1.then(|| vec![0.0; s.cin * k]);
    let mut gb = want.2.then(|| vec![0.0; s.cout]);
    let mut cols = vec![0.0; k * p_in];
    for i in 0..s.n {
        let dy = &grad_out[i * out_sz..(i + 1) * out_sz];
        if let Some(gb) = gb.as_mut() {
            for (co, row) in dy.chunks(plane).enumerate() {
                gb[co] += row.iter().sum::<f64>();
            }
        }
        if gx.is_none() && gw.is_none() {
            continue;
        }
        im2col(dy, s.cout, s.out_hw, g, s.in_hw, &mut cols);
        if let Some(gx) = gx.as_mut() {
            let dst = &mut gx[i * s.cin * p_in..(i + 1) * s.cin * p_in];
            gemm(s.cin, k, p_in, w, false, &cols, false, 0.0, dst);
        }
        if let Some(gw) = gw.as_mut() {
            let xi = &x[i * s.cin * p_in..(i + 1) * s.cin * p_in];
            gemm(s.cin, p_in, k, xi, false, &cols, true, 1.0, gw);
        }
    }
    (gx, gw, gb)
}
