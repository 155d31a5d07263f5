//! Raw loops behind the tape ops. Everything here works on flat row-major slices.

use crate::error::{Error, Result};

/// `out[m×p] += a[m×n] · b[n×p]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let out_row = &mut out[i * p..(i + 1) * p];
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[k * p..(k + 1) * p];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
}

/// `out[m×n] += g[m×p] · b[n×p]ᵀ`
pub(crate) fn matmul_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let g_row = &g[i * p..(i + 1) * p];
        for k in 0..n {
            let b_row = &b[k * p..(k + 1) * p];
            let dot: f64 = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            out[i * n + k] += dot;
        }
    }
}

/// `out[n×p] += a[m×n]ᵀ · g[m×p]`
pub(crate) fn matmul_at_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let g_row = &g[i * p..(i + 1) * p];
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            let out_row = &mut out[k * p..(k + 1) * p];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += aik * gv;
            }
        }
    }
}

/// Stride, dilation and zero padding of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self {
            stride: 1,
            dilation: 1,
            padding: 0,
        }
    }
}

impl ConvGeometry {
    pub fn new(stride: usize, dilation: usize, padding: usize) -> Self {
        Self {
            stride,
            dilation,
            padding,
        }
    }

    /// Output extent along one axis: ⌊(n + 2·pad − dilation·(k−1) − 1)/stride⌋ + 1.
    pub fn output_len(&self, n: usize, k: usize) -> Result<usize> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::shape("conv2d", "stride and dilation must be positive"));
        }
        let padded = n + 2 * self.padding;
        let reach = self.dilation * (k - 1) + 1;
        if padded < reach {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "non-positive output size: input {n}, kernel {k}, dilation {}, padding {}",
                    self.dilation, self.padding
                ),
            ));
        }
        Ok((padded - reach) / self.stride + 1)
    }
}

/// Resolved sizes for one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub geom: ConvGeometry,
}

impl ConvDims {
    pub fn new(x: &[usize], k: &[usize], geom: ConvGeometry) -> Result<Self> {
        let (c_in, h, w) = match *x {
            [c, h, w] => (c, h, w),
            _ => return Err(Error::shape("conv2d", format!("input must be C×H×W, got {x:?}"))),
        };
        let (c_out, kc, kh, kw) = match *k {
            [a, b, c, d] => (a, b, c, d),
            _ => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel must be C_out×C_in×kh×kw, got {k:?}"),
                ))
            }
        };
        if kc != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input {x:?} has {c_in} channels, kernel {k:?} expects {kc}"),
            ));
        }
        let h_out = geom.output_len(h, kh)?;
        let w_out = geom.output_len(w, kw)?;
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            h_out,
            w_out,
            geom,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Source pixel for output (oy, ox) and kernel tap (ky, kx), if inside the input.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let g = self.geom;
        let y = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
        let x = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

/// Unfold input patches into a `(C_in·kh·kw) × (H′·W′)` matrix.
pub(crate) fn im2col(x: &[f64], d: &ConvDims) -> Vec<f64> {
    let np = d.out_pixels();
    let mut cols = vec![0.0; d.patch_len() * np];
    for c in 0..d.c_in {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let dst = &mut cols[row * np..(row + 1) * np];
                for oy in 0..d.h_out {
                    for ox in 0..d.w_out {
                        if let Some((y, xx)) = d.source(oy, ox, ky, kx) {
                            dst[oy * d.w_out + ox] = x[(c * d.h + y) * d.w + xx];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add column gradients back onto the input.
pub(crate) fn col2im_acc(cols: &[f64], d: &ConvDims, dx: &mut [f64]) {
    let np = d.out_pixels();
    for c in 0..d.c_in {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = (c * d.kh + ky) * d.kw + kx;
                let src = &cols[row * np..(row + 1) * np];
                for oy in 0..d.h_out {
                    for ox in 0..d.w_out {
                        if let Some((y, xx)) = d.source(oy, ox, ky, kx) {
                            dx[(c * d.h + y) * d.w + xx] += src[oy * d.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], k: &[f64], d: &ConvDims) -> Vec<f64> {
    let cols = im2col(x, d);
    let mut out = vec![0.0; d.c_out * d.out_pixels()];
    matmul_acc(k, &cols, &mut out, d.c_out, d.patch_len(), d.out_pixels());
    out
}

/// Accumulates input and kernel gradients for an upstream gradient `g`.
pub(crate) fn conv2d_backward(
    x: &[f64],
    k: &[f64],
    g: &[f64],
    d: &ConvDims,
    dx: Option<&mut [f64]>,
    dk: Option<&mut [f64]>,
) {
    let (pl, np) = (d.patch_len(), d.out_pixels());
    if let Some(dk) = dk {
        let cols = im2col(x, d);
        matmul_bt_acc(g, &cols, dk, d.c_out, pl, np);
    }
    if let Some(dx) = dx {
        let mut dcols = vec![0.0; pl * np];
        matmul_at_acc(k, g, &mut dcols, d.c_out, pl, np);
        col2im_acc(&dcols, d, dx);
    }
}
