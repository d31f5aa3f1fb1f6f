//! 2-D convolution (cross-correlation) with zero padding fixed at
//! `(k - 1) / 2`, which yields output extents of exactly `ceil(extent /
//! stride)` for the supported kernels (3x3, 1x1) and strides (1, 2).
//!
//! Both passes lower each sample to an im2col matrix in f64 and walk it
//! with the pinned-order primitives from `dense`, in fixed chunks of
//! samples, so results are independent of thread count.

use rayon::prelude::*;

use super::dense::{axpy, dot};
use crate::error::{contract, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Samples per parallel work item; fixed so the reduction grouping (and
/// therefore the result bits) never depends on the thread pool.
const SAMPLE_CHUNK: usize = 16;

/// Output extent of a padded convolution: `ceil(extent / stride)`.
#[inline]
pub fn conv_out_extent(extent: usize, stride: usize) -> usize {
    (extent + stride - 1) / stride
}

pub(crate) fn dims4<S: Scalar>(t: &Tensor<S>, what: &str) -> Result<(usize, usize, usize, usize)> {
    contract!(
        t.ndim() == 4,
        "{what} must have 4 axes, got shape {:?}",
        t.shape()
    );
    Ok((t.dim(0), t.dim(1), t.dim(2), t.dim(3)))
}

struct ConvGeom {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn klen(&self) -> usize {
        self.cin * self.k * self.k
    }
    fn n(&self) -> usize {
        self.oh * self.ow
    }
    fn in_stride(&self) -> usize {
        self.cin * self.h * self.w
    }
    fn out_stride(&self) -> usize {
        self.cout * self.n()
    }
}

fn geometry<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
) -> Result<(usize, ConvGeom)> {
    let (b, cin, h, w) = dims4(input, "conv input")?;
    let (cout, wcin, kh, kw) = dims4(weights, "conv weights")?;
    contract!(
        kh == kw && (kh == 1 || kh == 3),
        "conv kernel must be 1x1 or 3x3, got {kh}x{kw}"
    );
    contract!(
        wcin == cin,
        "conv weights expect {wcin} input channels, input has {cin}"
    );
    contract!(stride == 1 || stride == 2, "conv stride must be 1 or 2, got {stride}");
    if let Some(bias) = bias {
        contract!(
            bias.shape() == [cout],
            "conv bias shape {:?} != [{cout}]",
            bias.shape()
        );
    }
    Ok((
        b,
        ConvGeom {
            cin,
            cout,
            h,
            w,
            k: kh,
            stride,
            oh: conv_out_extent(h, stride),
            ow: conv_out_extent(w, stride),
        },
    ))
}

/// Output-coordinate range `[lo, hi)` whose input coordinate
/// `o * stride + k_off` falls inside `[0, extent)`.
#[inline(always)]
fn span(k_off: isize, extent: usize, stride: usize, out_extent: usize) -> (usize, usize) {
    let lo = if k_off >= 0 {
        0
    } else {
        ((-k_off) as usize + stride - 1) / stride
    };
    let hi = if (extent as isize) <= k_off {
        0
    } else {
        (extent as isize - 1 - k_off) as usize / stride + 1
    };
    let lo = lo.min(out_extent);
    (lo, hi.min(out_extent).max(lo))
}

/// Lowers one sample to the `[klen, oh*ow]` im2col matrix (padding as
/// explicit zeros). Row order is (channel, ky, kx), the same order the
/// naive triple loop visits, so accumulating along rows reproduces its
/// reduction order exactly.
fn im2col_sample<S: Scalar>(x: &[S], g: &ConvGeom, cols: &mut [f64]) {
    let pad = (g.k - 1) / 2;
    let n = g.n();
    let mut r = 0;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            let y_off = ky as isize - pad as isize;
            let (oy_lo, oy_hi) = span(y_off, g.h, g.stride, g.oh);
            for kx in 0..g.k {
                let x_off = kx as isize - pad as isize;
                let (ox_lo, ox_hi) = span(x_off, g.w, g.stride, g.ow);
                let row = &mut cols[r * n..(r + 1) * n];
                for oy in 0..g.oh {
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if oy < oy_lo || oy >= oy_hi {
                        dst.fill(0.0);
                        continue;
                    }
                    let iy = (oy as isize * g.stride as isize + y_off) as usize;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    dst[..ox_lo].fill(0.0);
                    for (ox, d) in dst[ox_lo..ox_hi].iter_mut().enumerate() {
                        let ix = ((ox + ox_lo) as isize * g.stride as isize + x_off) as usize;
                        *d = src[ix].as_f64();
                    }
                    dst[ox_hi..].fill(0.0);
                }
                r += 1;
            }
        }
    }
}

/// Scatter-adds the im2col-layout gradient back onto one sample's input
/// gradient (the reverse index map of `im2col_sample`).
fn col2im_sample(dcols: &[f64], g: &ConvGeom, gin: &mut [f64]) {
    let pad = (g.k - 1) / 2;
    let n = g.n();
    let mut r = 0;
    for c in 0..g.cin {
        let plane_base = c * g.h * g.w;
        for ky in 0..g.k {
            let y_off = ky as isize - pad as isize;
            let (oy_lo, oy_hi) = span(y_off, g.h, g.stride, g.oh);
            for kx in 0..g.k {
                let x_off = kx as isize - pad as isize;
                let (ox_lo, ox_hi) = span(x_off, g.w, g.stride, g.ow);
                let row = &dcols[r * n..(r + 1) * n];
                for oy in oy_lo..oy_hi {
                    let iy = (oy as isize * g.stride as isize + y_off) as usize;
                    let src = &row[oy * g.ow..(oy + 1) * g.ow];
                    for ox in ox_lo..ox_hi {
                        let ix = (ox as isize * g.stride as isize + x_off) as usize;
                        gin[plane_base + iy * g.w + ix] += src[ox];
                    }
                }
                r += 1;
            }
        }
    }
}

/// Forward convolution. `input` is `[B, Cin, H, W]`, `weights` is
/// `[Cout, Cin, K, K]`, the optional `bias` is `[Cout]`; the output is
/// `[B, Cout, ceil(H/stride), ceil(W/stride)]`.
pub fn conv2d_forward<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    stride: usize,
) -> Result<Tensor<S>> {
    let (b, g) = geometry(input, weights, bias, stride)?;
    let (klen, n) = (g.klen(), g.n());
    let wf = weights.to_f64_vec();
    let bf = bias.map(|t| t.to_f64_vec());

    let mut out = Tensor::zeros([b, g.cout, g.oh, g.ow])?;
    let in_stride = g.in_stride();
    let out_stride = g.out_stride();
    let in_data = input.data();

    out.data_mut()
        .par_chunks_mut(SAMPLE_CHUNK * out_stride)
        .enumerate()
        .for_each(|(chunk, out_chunk)| {
            let mut cols = vec![0f64; klen * n];
            let mut acc = vec![0f64; n];
            for (i, out_b) in out_chunk.chunks_mut(out_stride).enumerate() {
                let s = (chunk * SAMPLE_CHUNK + i) * in_stride;
                im2col_sample(&in_data[s..s + in_stride], &g, &mut cols);
                for co in 0..g.cout {
                    acc.fill(bf.as_ref().map_or(0.0, |bv| bv[co]));
                    let wrow = &wf[co * klen..(co + 1) * klen];
                    for (k, &a) in wrow.iter().enumerate() {
                        axpy(&mut acc, a, &cols[k * n..(k + 1) * n]);
                    }
                    for (d, &v) in out_b[co * n..(co + 1) * n].iter_mut().zip(&acc) {
                        *d = S::from_f64(v);
                    }
                }
            }
        });
    Ok(out)
}

/// Backward convolution: gradients with respect to the input, the weights
/// and (when `bias_grad` is requested) the bias, given the cached forward
/// input and the upstream gradient.
pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    weights: &Tensor<S>,
    stride: usize,
    grad_out: &Tensor<S>,
    bias_grad: bool,
) -> Result<(Tensor<S>, Tensor<S>, Option<Tensor<S>>)> {
    let (b, g) = geometry(input, weights, None, stride)?;
    let expect = [b, g.cout, g.oh, g.ow];
    contract!(
        grad_out.shape() == expect,
        "conv grad_out shape {:?} != {:?}",
        grad_out.shape(),
        expect
    );
    let (klen, n) = (g.klen(), g.n());
    let wf = weights.to_f64_vec();
    let in_stride = g.in_stride();
    let out_stride = g.out_stride();
    let in_data = input.data();
    let go_data = grad_out.data();

    let mut grad_in = Tensor::zeros(input.shape().to_vec())?;

    // Each chunk task owns a fixed, contiguous run of samples: it writes
    // their input gradients in place and returns its weight/bias partials,
    // which are then folded in chunk order below.
    let partials: Vec<(Vec<f64>, Vec<f64>)> = grad_in
        .data_mut()
        .par_chunks_mut(SAMPLE_CHUNK * in_stride)
        .enumerate()
        .map(|(chunk, gin_chunk)| {
            let mut cols = vec![0f64; klen * n];
            let mut gmat = vec![0f64; g.cout * n];
            let mut dcols = vec![0f64; klen * n];
            let mut gin_f64 = vec![0f64; in_stride];
            let mut gw = vec![0f64; g.cout * klen];
            let mut gb = vec![0f64; g.cout];
            for (i, gin_b) in gin_chunk.chunks_mut(in_stride).enumerate() {
                let bi = chunk * SAMPLE_CHUNK + i;
                im2col_sample(&in_data[bi * in_stride..(bi + 1) * in_stride], &g, &mut cols);
                for (d, &v) in gmat.iter_mut().zip(&go_data[bi * out_stride..(bi + 1) * out_stride]) {
                    *d = v.as_f64();
                }
                for co in 0..g.cout {
                    let grow = &gmat[co * n..(co + 1) * n];
                    let gwrow = &mut gw[co * klen..(co + 1) * klen];
                    for (r, slot) in gwrow.iter_mut().enumerate() {
                        *slot += dot(grow, &cols[r * n..(r + 1) * n]);
                    }
                    if bias_grad {
                        gb[co] += grow.iter().sum::<f64>();
                    }
                }
                for r in 0..klen {
                    let drow = &mut dcols[r * n..(r + 1) * n];
                    drow.fill(0.0);
                    for co in 0..g.cout {
                        axpy(drow, wf[co * klen + r], &gmat[co * n..(co + 1) * n]);
                    }
                }
                gin_f64.fill(0.0);
                col2im_sample(&dcols, &g, &mut gin_f64);
                for (d, &v) in gin_b.iter_mut().zip(&gin_f64) {
                    *d = S::from_f64(v);
                }
            }
            (gw, gb)
        })
        .collect();

    let mut gw_total = vec![0f64; g.cout * klen];
    let mut gb_total = vec![0f64; g.cout];
    for (gw, gb) in &partials {
        for (t, v) in gw_total.iter_mut().zip(gw) {
            *t += v;
        }
        for (t, v) in gb_total.iter_mut().zip(gb) {
            *t += v;
        }
    }

    let grad_w = Tensor::from_f64_slice(weights.shape().to_vec(), &gw_total)?;
    let grad_b = if bias_grad {
        Some(Tensor::from_f64_slice([g.cout], &gb_total)?)
    } else {
        None
    };
    Ok((grad_in, grad_w, grad_b))
}
