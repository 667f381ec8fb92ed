//! Direct (loop) kernels for 2-D convolution over `[N, C, H, W]` buffers.
//!
//! A transposed convolution is described by the geometry of the ordinary
//! convolution it is the adjoint of: its forward pass is that convolution's
//! input-gradient and vice versa.

use crate::error::{Error, Result};

/// Geometry of a convolution `x [n, c_in, h, w] ⊛ w [c_out, c_in, k, k] → [n, c_out, h_out, w_out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(
        x_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        pad: usize,
        op: &'static str,
    ) -> Result<Self> {
        let (n, c_in, h, w) = match x_shape {
            [n, c, h, w] => (*n, *c, *h, *w),
            s => return Err(Error::shape(op, format!("input must be [N,C,H,W], got {s:?}"))),
        };
        let (c_out, wc_in, k) = match w_shape {
            [o, i, k1, k2] if k1 == k2 => (*o, *i, *k1),
            s => return Err(Error::shape(op, format!("kernel must be [O,I,K,K], got {s:?}"))),
        };
        if wc_in != c_in {
            return Err(Error::shape(
                op,
                format!("input has {c_in} channels, kernel expects {wc_in}"),
            ));
        }
        if stride == 0 || k == 0 {
            return Err(Error::shape(op, "stride and kernel size must be positive"));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(
                op,
                format!("kernel {k} larger than padded input {h}x{w} (pad {pad})"),
            ));
        }
        Ok(ConvGeom {
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    /// Geometry of the convolution whose adjoint maps `y [n, c, h, w]` with
    /// transposed kernel `[c, c_out, k, k]` to `[n, c_out, (h−1)s − 2p + k, …]`.
    pub fn for_transpose(
        y_shape: &[usize],
        w_shape: &[usize],
        stride: usize,
        pad: usize,
        op: &'static str,
    ) -> Result<Self> {
        let (n, c, h, w) = match y_shape {
            [n, c, h, w] => (*n, *c, *h, *w),
            s => return Err(Error::shape(op, format!("input must be [N,C,H,W], got {s:?}"))),
        };
        let (wc, c_out, k) = match w_shape {
            [i, o, k1, k2] if k1 == k2 => (*i, *o, *k1),
            s => return Err(Error::shape(op, format!("kernel must be [I,O,K,K], got {s:?}"))),
        };
        if wc != c {
            return Err(Error::shape(
                op,
                format!("input has {c} channels, kernel expects {wc}"),
            ));
        }
        if stride == 0 || k == 0 || h == 0 || w == 0 {
            return Err(Error::shape(op, "stride, kernel and input sizes must be positive"));
        }
        let full_h = (h - 1) * stride + k;
        let full_w = (w - 1) * stride + k;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(Error::shape(op, format!("padding {pad} too large")));
        }
        let geom = ConvGeom {
            n,
            c_in: c_out,
            h: full_h - 2 * pad,
            w: full_w - 2 * pad,
            c_out: c,
            k,
            stride,
            pad,
            h_out: h,
            w_out: w,
        };
        debug_assert_eq!((geom.h + 2 * pad - k) / stride + 1, h);
        Ok(geom)
    }

    pub fn in_shape(&self) -> [usize; 4] {
        [self.n, self.c_in, self.h, self.w]
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.c_out, self.h_out, self.w_out]
    }

    #[inline]
    fn src(&self, o: usize, a: usize, len: usize) -> Option<usize> {
        let p = (o * self.stride + a).checked_sub(self.pad)?;
        (p < len).then_some(p)
    }
}

/// `y[n,o,i,j] = Σ_{c,a,b} w[o,c,a,b] · x[n,c, i·s+a−p, j·s+b−p]`.
pub(crate) fn conv_forward(x: &[f64], wt: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut y = vec![0.0; g.n * g.c_out * g.h_out * g.w_out];
    let kk = g.k * g.k;
    for n in 0..g.n {
        for o in 0..g.c_out {
            for i in 0..g.h_out {
                for j in 0..g.w_out {
                    let mut s = 0.0;
                    for c in 0..g.c_in {
                        let xb = (n * g.c_in + c) * g.h * g.w;
                        let wb = (o * g.c_in + c) * kk;
                        for a in 0..g.k {
                            let Some(r) = g.src(i, a, g.h) else { continue };
                            for b in 0..g.k {
                                let Some(q) = g.src(j, b, g.w) else { continue };
                                s += wt[wb + a * g.k + b] * x[xb + r * g.w + q];
                            }
                        }
                    }
                    y[((n * g.c_out + o) * g.h_out + i) * g.w_out + j] = s;
                }
            }
        }
    }
    y
}

/// Adjoint of [`conv_forward`] in `x`: scatters `dy` back through the kernel.
pub(crate) fn conv_input_grad(dy: &[f64], wt: &[f64], g: &ConvGeom) -> Vec<f64> {
    let mut dx = vec![0.0; g.n * g.c_in * g.h * g.w];
    let kk = g.k * g.k;
    for n in 0..g.n {
        for o in 0..g.c_out {
            for i in 0..g.h_out {
                for j in 0..g.w_out {
                    let gy = dy[((n * g.c_out + o) * g.h_out + i) * g.w_out + j];
                    if gy == 0.0 {
                        continue;
                    }
                    for c in 0..g.c_in {
                        let xb = (n * g.c_in + c) * g.h * g.w;
                        let wb = (o * g.c_in + c) * kk;
                        for a in 0..g.k {
                            let Some(r) = g.src(i, a, g.h) else { continue };
                            for b in 0..g.k {
                                let Some(q) = g.src(j, b, g.w) else { continue };
                                dx[xb + r * g.w + q] += wt[wb + a * g.k + b] * gy;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradient of [`conv_forward`] in the kernel.
pub(crate) fn conv_weight_grad(x: &[f64], dy: &[f64], g: &ConvGeom) -> Vec<f64> {
    let kk = g.k * g.k;
    let mut dw = vec![0.0; g.c_out * g.c_in * kk];
    for n in 0..g.n {
        for o in 0..g.c_out {
            for i in 0..g.h_out {
                for j in 0..g.w_out {
                    let gy = dy[((n * g.c_out + o) * g.h_out + i) * g.w_out + j];
                    if gy == 0.0 {
                        continue;
                    }
                    for c in 0..g.c_in {
                        let xb = (n * g.c_in + c) * g.h * g.w;
                        let wb = (o * g.c_in + c) * kk;
                        for a in 0..g.k {
                            let Some(r) = g.src(i, a, g.h) else { continue };
                            for b in 0..g.k {
                                let Some(q) = g.src(j, b, g.w) else { continue };
                                dw[wb + a * g.k + b] += x[xb + r * g.w + q] * gy;
                            }
                        }
                    }
                }
            }
        }
    }
    dw
}

/// 2×2 max pooling, stride 2. Returns the pooled values and, for each
/// output, the flat input index that won.
pub(crate) fn maxpool2_forward(x: &[f64], shape: &[usize]) -> Result<(Vec<f64>, Vec<usize>, [usize; 4])> {
    let (n, c, h, w) = match shape {
        [n, c, h, w] => (*n, *c, *h, *w),
        s => return Err(Error::shape("maxpool2", format!("input must be [N,C,H,W], got {s:?}"))),
    };
    if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
        return Err(Error::shape(
            "maxpool2",
            format!("spatial size {h}x{w} must be even and non-zero"),
        ));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    Ok((out, arg, [n, c, ho, wo]))
}
