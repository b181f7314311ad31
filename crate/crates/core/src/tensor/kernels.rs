//! Raw loops behind the tape ops. Every accumulation runs in a fixed order so
//! results are bitwise reproducible.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) struct ConvGeometry {
    batch: usize,
    in_ch: usize,
    in_h: usize,
    in_w: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_shape: [usize; 4],
}

impl ConvGeometry {
    pub(crate) fn new(
        input: &[usize],
        weight: &[usize],
        bias: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let &[batch, in_ch, in_h, in_w] = input else {
            return Err(Error::Shape(format!("conv2d input must be [N,C,H,W], got {input:?}")));
        };
        let &[out_ch, w_in, kh, kw] = weight else {
            return Err(Error::Shape(format!("conv2d weight must be [Cout,Cin,kh,kw], got {weight:?}")));
        };
        if w_in != in_ch {
            return Err(Error::Shape(format!("weight expects {w_in} input channels, input has {in_ch}")));
        }
        if bias != [out_ch] {
            return Err(Error::Shape(format!("bias shape {bias:?} for {out_ch} output channels")));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Shape(format!("kernel {kh}x{kw} must have odd extents")));
        }
        if stride == 0 {
            return Err(Error::Shape("stride must be positive".into()));
        }
        if in_h + 2 * padding < kh || in_w + 2 * padding < kw {
            return Err(Error::Shape(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                in_h + 2 * padding,
                in_w + 2 * padding
            )));
        }
        let out_h = (in_h + 2 * padding - kh) / stride + 1;
        let out_w = (in_w + 2 * padding - kw) / stride + 1;
        Ok(ConvGeometry {
            batch,
            in_ch,
            in_h,
            in_w,
            out_ch,
            kh,
            kw,
            stride,
            padding,
            out_shape: [batch, out_ch, out_h, out_w],
        })
    }

    pub(crate) fn output_shape(&self) -> &[usize; 4] {
        &self.out_shape
    }

    fn out_hw(&self) -> (usize, usize) {
        (self.out_shape[2], self.out_shape[3])
    }

    /// Output positions `o` along one axis for which `o·stride + k − padding`
    /// lands inside `[0, extent)`.
    fn valid_range(&self, k: usize, extent: usize, out: usize) -> std::ops::Range<usize> {
        let s = self.stride;
        let lo = if self.padding > k {
            (self.padding - k).div_ceil(s)
        } else {
            0
        };
        let hi = if extent + self.padding > k {
            ((extent + self.padding - k - 1) / s + 1).min(out)
        } else {
            0
        };
        lo..hi.max(lo)
    }
}

/// Unfolds one image `[Cin, H, W]` into the `[Cin·kh·kw, OH·OW]` patch
/// matrix; taps that fall in the padding stay zero.
fn im2col(g: &ConvGeometry, src: &[f64]) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let (h, w) = (g.in_h, g.in_w);
    let p = oh * ow;
    let mut cols = vec![0.0; g.in_ch * g.kh * g.kw * p];
    for ci in 0..g.in_ch {
        let plane = &src[ci * h * w..][..h * w];
        for ky in 0..g.kh {
            let rows = g.valid_range(ky, h, oh);
            for kx in 0..g.kw {
                let xs = g.valid_range(kx, w, ow);
                let dst = &mut cols[((ci * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in rows.clone() {
                    let row = &plane[(oy * g.stride + ky - g.padding) * w..][..w];
                    let out = &mut dst[oy * ow..][..ow];
                    for ox in xs.clone() {
                        out[ox] = row[ox * g.stride + kx - g.padding];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im(g: &ConvGeometry, cols: &[f64], dst: &mut [f64]) {
    let (oh, ow) = g.out_hw();
    let (h, w) = (g.in_h, g.in_w);
    let p = oh * ow;
    for ci in 0..g.in_ch {
        let plane = &mut dst[ci * h * w..][..h * w];
        for ky in 0..g.kh {
            let rows = g.valid_range(ky, h, oh);
            for kx in 0..g.kw {
                let xs = g.valid_range(kx, w, ow);
                let src = &cols[((ci * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in rows.clone() {
                    let row = &mut plane[(oy * g.stride + ky - g.padding) * w..][..w];
                    let inp = &src[oy * ow..][..ow];
                    for ox in xs.clone() {
                        row[ox * g.stride + kx - g.padding] += inp[ox];
                    }
                }
            }
        }
    }
}

/// `c (m×n) = alpha·a·b + beta·c` over row-major buffers; `a_t` / `b_t` read
/// the stored operand transposed.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

fn patch_len(g: &ConvGeometry) -> usize {
    g.in_ch * g.kh * g.kw
}

pub(crate) fn conv2d_forward(g: &ConvGeometry, input: &[f64], weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let p = oh * ow;
    let k = patch_len(g);
    let chw = g.in_ch * g.in_h * g.in_w;
    let mut out = vec![0.0; g.batch * g.out_ch * p];
    for n in 0..g.batch {
        let cols = im2col(g, &input[n * chw..][..chw]);
        let dst = &mut out[n * g.out_ch * p..][..g.out_ch * p];
        for (co, plane) in dst.chunks_exact_mut(p).enumerate() {
            plane.fill(bias[co]);
        }
        gemm(g.out_ch, k, p, weight, false, &cols, false, 1.0, dst);
    }
    out
}

pub(crate) fn conv2d_backward_input(g: &ConvGeometry, up: &[f64], weight: &[f64]) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let p = oh * ow;
    let k = patch_len(g);
    let chw = g.in_ch * g.in_h * g.in_w;
    let mut grad = vec![0.0; g.batch * chw];
    let mut cols = vec![0.0; k * p];
    for n in 0..g.batch {
        gemm(k, g.out_ch, p, weight, true, &up[n * g.out_ch * p..], false, 0.0, &mut cols);
        col2im(g, &cols, &mut grad[n * chw..][..chw]);
    }
    grad
}

pub(crate) fn conv2d_backward_weight(g: &ConvGeometry, up: &[f64], input: &[f64]) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let p = oh * ow;
    let k = patch_len(g);
    let chw = g.in_ch * g.in_h * g.in_w;
    let mut grad = vec![0.0; g.out_ch * k];
    for n in 0..g.batch {
        let cols = im2col(g, &input[n * chw..][..chw]);
        gemm(g.out_ch, p, k, &up[n * g.out_ch * p..], false, &cols, true, 1.0, &mut grad);
    }
    grad
}

pub(crate) fn conv2d_backward_bias(g: &ConvGeometry, up: &[f64]) -> Vec<f64> {
    let (oh, ow) = g.out_hw();
    let mut grad = vec![0.0; g.out_ch];
    for n in 0..g.batch {
        for (co, slot) in grad.iter_mut().enumerate() {
            *slot += up[(n * g.out_ch + co) * oh * ow..][..oh * ow].iter().sum::<f64>();
        }
    }
    grad
}

pub(crate) fn softmax_channels(x: &[f64], batch: usize, channels: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        let base = b * channels * plane;
        for p in 0..plane {
            let at = |c: usize| base + c * plane + p;
            let max = (0..channels).map(|c| x[at(c)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for c in 0..channels {
                let e = (x[at(c)] - max).exp();
                out[at(c)] = e;
                total += e;
            }
            for c in 0..channels {
                out[at(c)] /= total;
            }
        }
    }
    out
}

/// Per-output-index source taps for bilinear resampling along one axis.
#[derive(Debug, Clone)]
pub(crate) struct ResizeAxis {
    input: usize,
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

impl ResizeAxis {
    pub(crate) fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut frac = Vec::with_capacity(output);
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            lo.push(i0);
            hi.push(i1);
            frac.push(src - i0 as f64);
        }
        ResizeAxis { input, lo, hi, frac }
    }

    fn output(&self) -> usize {
        self.lo.len()
    }
}

pub(crate) fn resize_forward(x: &[f64], planes: usize, rows: &ResizeAxis, cols: &ResizeAxis) -> Vec<f64> {
    let (h, w) = (rows.input, cols.input);
    let (oh, ow) = (rows.output(), cols.output());
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * oh * ow..][..oh * ow];
        for oy in 0..oh {
            let (r0, r1, fy) = (rows.lo[oy], rows.hi[oy], rows.frac[oy]);
            for ox in 0..ow {
                let (c0, c1, fx) = (cols.lo[ox], cols.hi[ox], cols.frac[ox]);
                let top = (1.0 - fx) * src[r0 * w + c0] + fx * src[r0 * w + c1];
                let bottom = (1.0 - fx) * src[r1 * w + c0] + fx * src[r1 * w + c1];
                dst[oy * ow + ox] = (1.0 - fy) * top + fy * bottom;
            }
        }
    }
    out
}

pub(crate) fn resize_backward(up: &[f64], planes: usize, rows: &ResizeAxis, cols: &ResizeAxis) -> Vec<f64> {
    let (h, w) = (rows.input, cols.input);
    let (oh, ow) = (rows.output(), cols.output());
    let mut grad = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &up[p * oh * ow..][..oh * ow];
        let dst = &mut grad[p * h * w..][..h * w];
        for oy in 0..oh {
            let (r0, r1, fy) = (rows.lo[oy], rows.hi[oy], rows.frac[oy]);
            for ox in 0..ow {
                let (c0, c1, fx) = (cols.lo[ox], cols.hi[ox], cols.frac[ox]);
                let g = src[oy * ow + ox];
                dst[r0 * w + c0] += (1.0 - fy) * (1.0 - fx) * g;
                dst[r0 * w + c1] += (1.0 - fy) * fx * g;
                dst[r1 * w + c0] += fy * (1.0 - fx) * g;
                dst[r1 * w + c1] += fy * fx * g;
            }
        }
    }
    grad
}
