//! Plain numeric kernels and their hand-written backward passes.
//!
//! These functions are the single source of truth for the math: the autodiff
//! tape in [`crate::autodiff`] dispatches to them, and the key network (which
//! never needs gradients) calls them directly. Forward passes store results
//! in the working precision `S`; reductions (sums, means, norms, losses)
//! accumulate in `f64` before rounding back, which keeps `f32` training
//! numerically stable without doubling memory.
//!
//! Convolution inner loops are written as row-wise scaled additions
//! (`out[x] += w * in[x]`) so the compiler can vectorize them without
//! reassociating a reduction; matrix products use the same structure.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::maskcontrast::ObjectMask;
use crate::tensor::{lanes, Scalar, Tensor};

/// Smallest vector norm that L2 normalization accepts.
pub const NORM_EPSILON: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Low-level kernels
// ---------------------------------------------------------------------------

/// `dst[i] += c * src[i]` over equal-length slices.
#[inline]
fn axpy<S: Scalar>(dst: &mut [S], src: &[S], c: S) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

/// Dot product with eight independent accumulators. The fixed combination
/// order makes the result deterministic while still letting the compiler
/// vectorize the loop.
#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [S::ZERO; 8];
    let mut chunks_a = a.chunks_exact(8);
    let mut chunks_b = b.chunks_exact(8);
    for (ca, cb) in chunks_a.by_ref().zip(chunks_b.by_ref()) {
        for l in 0..8 {
            acc[l] += ca[l] * cb[l];
        }
    }
    let mut tail = S::ZERO;
    for (&x, &y) in chunks_a.remainder().iter().zip(chunks_b.remainder()) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7])) + tail
}

/// Logistic function, evaluated in `f64`.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

struct ConvDims {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    h_out: usize,
    w_out: usize,
}

fn conv_dims<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<ConvDims> {
    let ishape = input.shape();
    let kshape = kernel.shape();
    if ishape.len() != 3 {
        return Err(Error::Shape(format!(
            "conv input must be [channels, height, width], got {ishape:?}"
        )));
    }
    if kshape.len() != 4 {
        return Err(Error::Shape(format!(
            "conv kernel must be [out, in, kh, kw], got {kshape:?}"
        )));
    }
    let (cin, h, w) = (ishape[0], ishape[1], ishape[2]);
    let (cout, kcin, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
    if kcin != cin {
        return Err(Error::Shape(format!(
            "kernel expects {kcin} input channels but input has {cin}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Shape(format!(
            "kernel spatial dims must be odd, got {kh}x{kw}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::Shape(format!(
            "bias shape {:?} does not match {cout} output channels",
            bias.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::Config("conv stride must be positive".into()));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(Error::Shape(format!(
            "padded input {}x{} smaller than kernel {kh}x{kw}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    Ok(ConvDims {
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        h_out: (h + 2 * padding - kh) / stride + 1,
        w_out: (w + 2 * padding - kw) / stride + 1,
    })
}

/// 2-D cross-correlation over a `[C_in, H, W]` input with a
/// `[C_out, C_in, KH, KW]` kernel (odd spatial dims), zero padding, and a
/// per-channel bias. Output is `[C_out, H_out, W_out]` with
/// `H_out = (H + 2*padding - KH) / stride + 1`.
pub fn conv2d<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<S>> {
    let d = conv_dims(input, kernel, bias, stride, padding)?;
    let mut out = Tensor::zeros(&[d.cout, d.h_out, d.w_out]);
    let in_data = input.data();
    let k_data = kernel.data();
    let bias_data = bias.data();
    let plane_out = d.h_out * d.w_out;

    out.data_mut()
        .par_chunks_mut(plane_out)
        .enumerate()
        .for_each(|(co, out_plane)| {
            out_plane.fill(bias_data[co]);
            for ci in 0..d.cin {
                let in_plane = &in_data[ci * d.h * d.w..(ci + 1) * d.h * d.w];
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let wgt = k_data[((co * d.cin + ci) * d.kh + ky) * d.kw + kx];
                        if stride == 1 {
                            conv_row_update(
                                out_plane, in_plane, wgt, ky, kx, padding, &d, false,
                            );
                        } else {
                            for oy in 0..d.h_out {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= d.h as isize {
                                    continue;
                                }
                                let in_row = &in_plane[iy as usize * d.w..][..d.w];
                                let out_row = &mut out_plane[oy * d.w_out..][..d.w_out];
                                for ox in 0..d.w_out {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix >= 0 && ix < d.w as isize {
                                        out_row[ox] += wgt * in_row[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    Ok(out)
}

/// Stride-1 row update shared by the forward pass and the input gradient.
/// Forward (`transpose == false`): `out[oy][ox] += w * in[oy+ky-p][ox+kx-p]`.
/// Transposed (`transpose == true`): the same index relation with the roles
/// of the two planes swapped, i.e. `out[iy][ix] += w * in[oy][ox]` summed over
/// the kernel taps that touch each input pixel.
#[allow(clippy::too_many_arguments)]
fn conv_row_update<S: Scalar>(
    out_plane: &mut [S],
    in_plane: &[S],
    wgt: S,
    ky: usize,
    kx: usize,
    padding: usize,
    d: &ConvDims,
    transpose: bool,
) {
    // Dimensions of the two planes depend on direction.
    let (oh, ow, iw) = if transpose {
        (d.h, d.w, d.w_out)
    } else {
        (d.h_out, d.w_out, d.w)
    };
    let ih = if transpose { d.h_out } else { d.h };
    for oy in 0..oh {
        // Row in the source plane this tap reads from.
        let sy = if transpose {
            oy as isize + padding as isize - ky as isize
        } else {
            oy as isize + ky as isize - padding as isize
        };
        if sy < 0 || sy >= ih as isize {
            continue;
        }
        // Valid column span: the source column (ox ± (kx - padding)) must be
        // inside the source row.
        let shift = kx as isize - padding as isize;
        let shift = if transpose { -shift } else { shift };
        let lo = (-shift).max(0) as usize;
        let hi = ((iw as isize - shift).min(ow as isize)).max(0) as usize;
        if lo >= hi {
            continue;
        }
        let src_row = &in_plane[sy as usize * iw..][..iw];
        let dst_row = &mut out_plane[oy * ow..][..ow];
        let src_lo = (lo as isize + shift) as usize;
        axpy(&mut dst_row[lo..hi], &src_row[src_lo..src_lo + (hi - lo)], wgt);
    }
}

/// Gradients of [`conv2d`] with respect to input, kernel, and bias.
pub fn conv2d_backward<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    grad_out: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> Result<(Tensor<S>, Tensor<S>, Tensor<S>)> {
    let kshape = kernel.shape();
    let bias_probe = Tensor::zeros(&[kshape[0]]);
    let d = conv_dims(input, kernel, &bias_probe, stride, padding)?;
    if grad_out.shape() != [d.cout, d.h_out, d.w_out] {
        return Err(Error::Shape(format!(
            "upstream gradient shape {:?} does not match conv output [{}, {}, {}]",
            grad_out.shape(),
            d.cout,
            d.h_out,
            d.w_out
        )));
    }

    let in_data = input.data();
    let k_data = kernel.data();
    let g_data = grad_out.data();
    let plane_in = d.h * d.w;
    let plane_out = d.h_out * d.w_out;

    // Bias gradient: sum of the upstream gradient over each output plane.
    let dbias_vals: Vec<S> = (0..d.cout)
        .map(|co| {
            let s: f64 = g_data[co * plane_out..(co + 1) * plane_out]
                .iter()
                .map(|v| v.to_f64())
                .sum();
            S::from_f64(s)
        })
        .collect();
    let dbias = Tensor::from_vec(&[d.cout], dbias_vals)?;

    // Input gradient: correlation of the upstream gradient with the kernel,
    // indices reversed relative to the forward pass.
    let mut dinput = Tensor::zeros(input.shape());
    dinput
        .data_mut()
        .par_chunks_mut(plane_in)
        .enumerate()
        .for_each(|(ci, din_plane)| {
            for co in 0..d.cout {
                let g_plane = &g_data[co * plane_out..(co + 1) * plane_out];
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let wgt = k_data[((co * d.cin + ci) * d.kh + ky) * d.kw + kx];
                        if stride == 1 {
                            conv_row_update(din_plane, g_plane, wgt, ky, kx, padding, &d, true);
                        } else {
                            for oy in 0..d.h_out {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= d.h as isize {
                                    continue;
                                }
                                for ox in 0..d.w_out {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix >= 0 && ix < d.w as isize {
                                        din_plane[iy as usize * d.w + ix as usize] +=
                                            wgt * g_plane[oy * d.w_out + ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });

    // Kernel gradient: correlation of input with the upstream gradient.
    let mut dkernel = Tensor::zeros(kernel.shape());
    let ktap = d.cin * d.kh * d.kw;
    dkernel
        .data_mut()
        .par_chunks_mut(ktap)
        .enumerate()
        .for_each(|(co, dk_chunk)| {
            let g_plane = &g_data[co * plane_out..(co + 1) * plane_out];
            for ci in 0..d.cin {
                let in_plane = &in_data[ci * plane_in..(ci + 1) * plane_in];
                for ky in 0..d.kh {
                    for kx in 0..d.kw {
                        let mut acc = 0.0f64;
                        for oy in 0..d.h_out {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let in_row = &in_plane[iy as usize * d.w..][..d.w];
                            let g_row = &g_plane[oy * d.w_out..][..d.w_out];
                            if stride == 1 {
                                let shift = kx as isize - padding as isize;
                                let lo = (-shift).max(0) as usize;
                                let hi =
                                    ((d.w as isize - shift).min(d.w_out as isize)).max(0) as usize;
                                if lo < hi {
                                    let src_lo = (lo as isize + shift) as usize;
                                    acc += dot(
                                        &g_row[lo..hi],
                                        &in_row[src_lo..src_lo + (hi - lo)],
                                    )
                                    .to_f64();
                                }
                            } else {
                                for ox in 0..d.w_out {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix >= 0 && ix < d.w as isize {
                                        acc += (g_row[ox] * in_row[ix as usize]).to_f64();
                                    }
                                }
                            }
                        }
                        dk_chunk[(ci * d.kh + ky) * d.kw + kx] = S::from_f64(acc);
                    }
                }
            }
        });

    Ok((dinput, dkernel, dbias))
}

// ---------------------------------------------------------------------------
// Pointwise and resampling ops
// ---------------------------------------------------------------------------

/// Rectified linear unit.
pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(|v| v.max_val(S::ZERO))
}

/// Gradient of [`relu`]: passes the upstream gradient where the input was
/// strictly positive.
pub fn relu_backward<S: Scalar>(x: &Tensor<S>, grad: &Tensor<S>) -> Result<Tensor<S>> {
    x.zip_map(grad, |v, g| if v > S::ZERO { g } else { S::ZERO })
}

/// Bilinear upsampling of a `[C, H, W]` tensor by an integer factor, using
/// half-pixel centers clamped at the borders (a factor of 1 is the identity).
pub fn bilinear_upsample<S: Scalar>(x: &Tensor<S>, factor: usize) -> Result<Tensor<S>> {
    if factor == 0 {
        return Err(Error::Config("upsampling factor must be positive".into()));
    }
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "upsample input must be [channels, height, width], got {shape:?}"
        )));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (oh, ow) = (h * factor, w * factor);
    let ymap = resample_taps(h, oh);
    let xmap = resample_taps(w, ow);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let in_data = x.data();
    out.data_mut()
        .par_chunks_mut(oh * ow)
        .enumerate()
        .for_each(|(ch, out_plane)| {
            let in_plane = &in_data[ch * h * w..(ch + 1) * h * w];
            for oy in 0..oh {
                let (y0, y1, ty) = ymap[oy];
                for ox in 0..ow {
                    let (x0, x1, tx) = xmap[ox];
                    let v00 = in_plane[y0 * w + x0].to_f64();
                    let v01 = in_plane[y0 * w + x1].to_f64();
                    let v10 = in_plane[y1 * w + x0].to_f64();
                    let v11 = in_plane[y1 * w + x1].to_f64();
                    let top = v00 + (v01 - v00) * tx;
                    let bot = v10 + (v11 - v10) * tx;
                    out_plane[oy * ow + ox] = S::from_f64(top + (bot - top) * ty);
                }
            }
        });
    Ok(out)
}

/// Source taps for 1-D bilinear resampling from `n` to `on` samples:
/// `(floor index, ceil index, fractional weight)` per output position.
fn resample_taps(n: usize, on: usize) -> Vec<(usize, usize, f64)> {
    let scale = n as f64 / on as f64;
    (0..on)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Gradient of [`bilinear_upsample`]: scatters each output gradient back to
/// its four source taps with the interpolation weights.
pub fn bilinear_upsample_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    input_shape: &[usize],
    factor: usize,
) -> Result<Tensor<S>> {
    let (c, h, w) = (input_shape[0], input_shape[1], input_shape[2]);
    let (oh, ow) = (h * factor, w * factor);
    if grad_out.shape() != [c, oh, ow] {
        return Err(Error::Shape(format!(
            "upstream gradient shape {:?} does not match upsampled [{c}, {oh}, {ow}]",
            grad_out.shape()
        )));
    }
    let ymap = resample_taps(h, oh);
    let xmap = resample_taps(w, ow);
    let g_data = grad_out.data();
    let mut dinput = Tensor::zeros(input_shape);
    dinput
        .data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(ch, din_plane)| {
            let mut acc = vec![0.0f64; h * w];
            let g_plane = &g_data[ch * oh * ow..(ch + 1) * oh * ow];
            for oy in 0..oh {
                let (y0, y1, ty) = ymap[oy];
                for ox in 0..ow {
                    let (x0, x1, tx) = xmap[ox];
                    let g = g_plane[oy * ow + ox].to_f64();
                    acc[y0 * w + x0] += g * (1.0 - ty) * (1.0 - tx);
                    acc[y0 * w + x1] += g * (1.0 - ty) * tx;
                    acc[y1 * w + x0] += g * ty * (1.0 - tx);
                    acc[y1 * w + x1] += g * ty * tx;
                }
            }
            for (dst, &a) in din_plane.iter_mut().zip(&acc) {
                *dst = S::from_f64(a);
            }
        });
    Ok(dinput)
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Scales every 1-D lane along `axis` to unit Euclidean norm. Fails if any
/// lane's norm is at or below [`NORM_EPSILON`].
pub fn l2_normalize<S: Scalar>(x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    if axis >= x.rank() {
        return Err(Error::Shape(format!(
            "normalization axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    let (bases, stride) = lanes(x.shape(), axis);
    let len = x.shape()[axis];
    let mut out = x.clone();
    let data = out.data_mut();
    for &base in &bases {
        let mut sq = 0.0f64;
        for k in 0..len {
            let v = data[base + k * stride].to_f64();
            sq += v * v;
        }
        let norm = sq.sqrt();
        if norm <= NORM_EPSILON {
            return Err(Error::Numeric(format!(
                "cannot normalize a zero-norm slice (norm {norm:.3e} at lane offset {base})"
            )));
        }
        for k in 0..len {
            let v = data[base + k * stride].to_f64();
            data[base + k * stride] = S::from_f64(v / norm);
        }
    }
    Ok(out)
}

/// Gradient of [`l2_normalize`] given the original (pre-normalization) input.
pub fn l2_normalize_backward<S: Scalar>(
    x: &Tensor<S>,
    grad: &Tensor<S>,
    axis: usize,
) -> Result<Tensor<S>> {
    if x.shape() != grad.shape() {
        return Err(Error::Shape(format!(
            "gradient shape {:?} does not match input {:?}",
            grad.shape(),
            x.shape()
        )));
    }
    let (bases, stride) = lanes(x.shape(), axis);
    let len = x.shape()[axis];
    let xd = x.data();
    let gd = grad.data();
    let mut dx = Tensor::zeros(x.shape());
    let dxd = dx.data_mut();
    for &base in &bases {
        let mut sq = 0.0f64;
        let mut gx = 0.0f64;
        for k in 0..len {
            let v = xd[base + k * stride].to_f64();
            let g = gd[base + k * stride].to_f64();
            sq += v * v;
            gx += g * v;
        }
        let norm = sq.sqrt();
        if norm <= NORM_EPSILON {
            return Err(Error::Numeric(format!(
                "cannot differentiate normalization of a zero-norm slice at lane offset {base}"
            )));
        }
        let inv = 1.0 / norm;
        let inv3 = inv * inv * inv;
        for k in 0..len {
            let v = xd[base + k * stride].to_f64();
            let g = gd[base + k * stride].to_f64();
            dxd[base + k * stride] = S::from_f64(g * inv - v * gx * inv3);
        }
    }
    Ok(dx)
}

/// [`l2_normalize`] extended to zero-norm lanes: instead of failing, such a
/// lane becomes the first basis vector `(1, 0, …, 0)`.
///
/// Zero activation vectors do occur in practice — biases start at zero and a
/// ReLU can close every channel at a pixel — so the embedding normalization
/// needs a total answer that still lies on the unit sphere. The substitution
/// is locally constant, so those lanes carry zero gradient (see
/// [`l2_normalize_safe_backward`]).
pub fn l2_normalize_safe<S: Scalar>(x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    if axis >= x.rank() {
        return Err(Error::Shape(format!(
            "normalization axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    let (bases, stride) = lanes(x.shape(), axis);
    let len = x.shape()[axis];
    let mut out = x.clone();
    let data = out.data_mut();
    for &base in &bases {
        let mut sq = 0.0f64;
        for k in 0..len {
            let v = data[base + k * stride].to_f64();
            sq += v * v;
        }
        let norm = sq.sqrt();
        if norm <= NORM_EPSILON {
            data[base] = S::ONE;
            for k in 1..len {
                data[base + k * stride] = S::ZERO;
            }
        } else {
            for k in 0..len {
                let v = data[base + k * stride].to_f64();
                data[base + k * stride] = S::from_f64(v / norm);
            }
        }
    }
    Ok(out)
}

/// Gradient of [`l2_normalize_safe`]: zero on substituted (zero-norm) lanes,
/// identical to [`l2_normalize_backward`] elsewhere.
pub fn l2_normalize_safe_backward<S: Scalar>(
    x: &Tensor<S>,
    grad: &Tensor<S>,
    axis: usize,
) -> Result<Tensor<S>> {
    if x.shape() != grad.shape() {
        return Err(Error::Shape(format!(
            "gradient shape {:?} does not match input {:?}",
            grad.shape(),
            x.shape()
        )));
    }
    let (bases, stride) = lanes(x.shape(), axis);
    let len = x.shape()[axis];
    let xd = x.data();
    let gd = grad.data();
    let mut dx = Tensor::zeros(x.shape());
    let dxd = dx.data_mut();
    for &base in &bases {
        let mut sq = 0.0f64;
        let mut gx = 0.0f64;
        for k in 0..len {
            let v = xd[base + k * stride].to_f64();
            let g = gd[base + k * stride].to_f64();
            sq += v * v;
            gx += g * v;
        }
        let norm = sq.sqrt();
        if norm <= NORM_EPSILON {
            continue; // substituted lane: locally constant, gradient zero
        }
        let inv = 1.0 / norm;
        let inv3 = inv * inv * inv;
        for k in 0..len {
            let v = xd[base + k * stride].to_f64();
            let g = gd[base + k * stride].to_f64();
            dxd[base + k * stride] = S::from_f64(g * inv - v * gx * inv3);
        }
    }
    Ok(dx)
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

fn require_rank2<S: Scalar>(t: &Tensor<S>, role: &str) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!(
            "{role} must be a matrix, got shape {s:?}"
        )));
    }
    Ok((s[0], s[1]))
}

/// `[m, k] x [k, n] -> [m, n]` matrix product.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, ka) = require_rank2(a, "left operand")?;
    let (kb, n) = require_rank2(b, "right operand")?;
    if ka != kb {
        return Err(Error::Shape(format!(
            "inner dimensions differ: [{m}, {ka}] x [{kb}, {n}]"
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let ad = a.data();
    let bd = b.data();
    out.data_mut()
        .par_chunks_mut(n)
        .enumerate()
        .for_each(|(i, out_row)| {
            for (l, &aval) in ad[i * ka..(i + 1) * ka].iter().enumerate() {
                axpy(out_row, &bd[l * n..(l + 1) * n], aval);
            }
        });
    Ok(out)
}

/// `a . b^T`: `[m, n] x [k, n] -> [m, k]`. Used for the left-operand gradient
/// of [`matmul`].
pub fn matmul_a_bt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (m, na) = require_rank2(a, "left operand")?;
    let (k, nb) = require_rank2(b, "right operand")?;
    if na != nb {
        return Err(Error::Shape(format!(
            "row lengths differ: [{m}, {na}] vs [{k}, {nb}]"
        )));
    }
    let mut out = Tensor::zeros(&[m, k]);
    let ad = a.data();
    let bd = b.data();
    out.data_mut()
        .par_chunks_mut(k)
        .enumerate()
        .for_each(|(i, out_row)| {
            let a_row = &ad[i * na..(i + 1) * na];
            for (j, o) in out_row.iter_mut().enumerate() {
                *o = dot(a_row, &bd[j * nb..(j + 1) * nb]);
            }
        });
    Ok(out)
}

/// `a^T . b`: `[m, k] x [m, n] -> [k, n]`. Used for the right-operand
/// gradient of [`matmul`].
pub fn matmul_at_b<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (ma, k) = require_rank2(a, "left operand")?;
    let (mb, n) = require_rank2(b, "right operand")?;
    if ma != mb {
        return Err(Error::Shape(format!(
            "row counts differ: [{ma}, {k}] vs [{mb}, {n}]"
        )));
    }
    let mut out = Tensor::zeros(&[k, n]);
    let ad = a.data();
    let bd = b.data();
    let od = out.data_mut();
    for i in 0..ma {
        let b_row = &bd[i * n..(i + 1) * n];
        for j in 0..k {
            axpy(&mut od[j * n..(j + 1) * n], b_row, ad[i * k + j]);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Mean softmax cross-entropy over the rows of a `[rows, classes]` logit
/// matrix. Stabilized by subtracting the per-row maximum before
/// exponentiating; the log-partition is accumulated in `f64`.
pub fn softmax_cross_entropy<S: Scalar>(logits: &Tensor<S>, targets: &[usize]) -> Result<S> {
    let (rows, classes) = require_rank2(logits, "logits")?;
    if targets.len() != rows {
        return Err(Error::Shape(format!(
            "{} targets for {rows} logit rows",
            targets.len()
        )));
    }
    let data = logits.data();
    let mut total = 0.0f64;
    for (i, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(Error::Data(format!(
                "target {t} out of range for {classes} classes (row {i})"
            )));
        }
        let row = &data[i * classes..(i + 1) * classes];
        let max = row_max(row);
        let mut sum = 0.0f64;
        for &v in row {
            sum += (v.to_f64() - max).exp();
        }
        total += sum.ln() - (row[t].to_f64() - max);
    }
    Ok(S::from_f64(total / rows as f64))
}

fn row_max<S: Scalar>(row: &[S]) -> f64 {
    row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max)
}

/// Gradient of [`softmax_cross_entropy`] with respect to the logits, scaled
/// by the upstream gradient of the mean loss.
pub fn softmax_cross_entropy_backward<S: Scalar>(
    logits: &Tensor<S>,
    targets: &[usize],
    upstream: f64,
) -> Result<Tensor<S>> {
    let (rows, classes) = require_rank2(logits, "logits")?;
    if targets.len() != rows {
        return Err(Error::Shape(format!(
            "{} targets for {rows} logit rows",
            targets.len()
        )));
    }
    let data = logits.data();
    let scale = upstream / rows as f64;
    let mut grad = Tensor::zeros(logits.shape());
    let gd = grad.data_mut();
    for (i, &t) in targets.iter().enumerate() {
        let row = &data[i * classes..(i + 1) * classes];
        let max = row_max(row);
        let mut sum = 0.0f64;
        for &v in row {
            sum += (v.to_f64() - max).exp();
        }
        for (j, &v) in row.iter().enumerate() {
            let p = (v.to_f64() - max).exp() / sum;
            let indicator = if j == t { 1.0 } else { 0.0 };
            gd[i * classes + j] = S::from_f64((p - indicator) * scale);
        }
    }
    Ok(grad)
}

/// Mean binary cross-entropy between logits and a same-shape 0/1 target,
/// computed with the numerically stable `max(l, 0) - l*t + ln(1 + e^{-|l|})`
/// form.
pub fn binary_cross_entropy<S: Scalar>(logits: &Tensor<S>, target: &Tensor<S>) -> Result<S> {
    if logits.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "logit shape {:?} does not match target shape {:?}",
            logits.shape(),
            target.shape()
        )));
    }
    let mut total = 0.0f64;
    for (&l, &t) in logits.data().iter().zip(target.data()) {
        let tv = t.to_f64();
        if tv != 0.0 && tv != 1.0 {
            return Err(Error::Data(format!(
                "binary cross-entropy target must be 0 or 1, got {tv}"
            )));
        }
        let lv = l.to_f64();
        total += lv.max(0.0) - lv * tv + (-lv.abs()).exp().ln_1p();
    }
    Ok(S::from_f64(total / logits.numel() as f64))
}

/// Gradient of [`binary_cross_entropy`] with respect to the logits.
pub fn binary_cross_entropy_backward<S: Scalar>(
    logits: &Tensor<S>,
    target: &Tensor<S>,
    upstream: f64,
) -> Result<Tensor<S>> {
    if logits.shape() != target.shape() {
        return Err(Error::Shape(format!(
            "logit shape {:?} does not match target shape {:?}",
            logits.shape(),
            target.shape()
        )));
    }
    let scale = upstream / logits.numel() as f64;
    logits.zip_map(target, |l, t| {
        S::from_f64((sigmoid(l.to_f64()) - t.to_f64()) * scale)
    })
}

// ---------------------------------------------------------------------------
// Mask pooling and pixel gathering
// ---------------------------------------------------------------------------

/// Mean of a `[D, H, W]` embedding map over the foreground pixels of a mask,
/// producing a `[D]` vector. Fails on an empty mask.
pub fn masked_mean_pool<S: Scalar>(emb: &Tensor<S>, mask: &ObjectMask) -> Result<Tensor<S>> {
    let shape = emb.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "pooled embedding map must be [dim, height, width], got {shape:?}"
        )));
    }
    let (d, h, w) = (shape[0], shape[1], shape[2]);
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match embedding map {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    let count = mask.foreground_count();
    if count == 0 {
        return Err(Error::Numeric(
            "cannot pool over an all-background mask".into(),
        ));
    }
    let data = emb.data();
    let bits = mask.bits();
    let mut out = vec![S::ZERO; d];
    for (dim, o) in out.iter_mut().enumerate() {
        let plane = &data[dim * h * w..(dim + 1) * h * w];
        let mut acc = 0.0f64;
        for (v, &b) in plane.iter().zip(bits) {
            if b != 0 {
                acc += v.to_f64();
            }
        }
        *o = S::from_f64(acc / count as f64);
    }
    Tensor::from_vec(&[d], out)
}

/// Gradient of [`masked_mean_pool`]: spreads each channel's gradient evenly
/// over the foreground pixels.
pub fn masked_mean_pool_backward<S: Scalar>(
    grad: &Tensor<S>,
    mask: &ObjectMask,
    emb_shape: &[usize],
) -> Result<Tensor<S>> {
    let (d, h, w) = (emb_shape[0], emb_shape[1], emb_shape[2]);
    if grad.shape() != [d] {
        return Err(Error::Shape(format!(
            "pool gradient shape {:?} does not match dim {d}",
            grad.shape()
        )));
    }
    let count = mask.foreground_count();
    if count == 0 {
        return Err(Error::Numeric(
            "cannot pool over an all-background mask".into(),
        ));
    }
    let mut out = Tensor::zeros(emb_shape);
    let bits = mask.bits();
    let od = out.data_mut();
    for dim in 0..d {
        let g = S::from_f64(grad.data()[dim].to_f64() / count as f64);
        let plane = &mut od[dim * h * w..(dim + 1) * h * w];
        for (o, &b) in plane.iter_mut().zip(bits) {
            if b != 0 {
                *o = g;
            }
        }
    }
    Ok(out)
}

/// Gathers pixel embeddings at flat spatial indices from a `[D, H, W]` map
/// into a `[P, D]` row matrix.
pub fn select_pixels<S: Scalar>(emb: &Tensor<S>, indices: &[usize]) -> Result<Tensor<S>> {
    let shape = emb.shape();
    if shape.len() != 3 {
        return Err(Error::Shape(format!(
            "pixel selection expects a [dim, height, width] map, got {shape:?}"
        )));
    }
    let (d, h, w) = (shape[0], shape[1], shape[2]);
    if indices.is_empty() {
        return Err(Error::Shape("pixel selection requires at least one index".into()));
    }
    let plane = h * w;
    let data = emb.data();
    let mut out = Tensor::zeros(&[indices.len(), d]);
    let od = out.data_mut();
    for (row, &idx) in indices.iter().enumerate() {
        if idx >= plane {
            return Err(Error::Shape(format!(
                "pixel index {idx} out of range for {h}x{w} map"
            )));
        }
        for dim in 0..d {
            od[row * d + dim] = data[dim * plane + idx];
        }
    }
    Ok(out)
}

/// Gradient of [`select_pixels`]: scatters row gradients back to their pixel
/// positions (duplicate indices accumulate).
pub fn select_pixels_backward<S: Scalar>(
    grad: &Tensor<S>,
    indices: &[usize],
    emb_shape: &[usize],
) -> Result<Tensor<S>> {
    let (d, h, w) = (emb_shape[0], emb_shape[1], emb_shape[2]);
    if grad.shape() != [indices.len(), d] {
        return Err(Error::Shape(format!(
            "selection gradient shape {:?} does not match [{}, {d}]",
            grad.shape(),
            indices.len()
        )));
    }
    let plane = h * w;
    let mut out = Tensor::zeros(emb_shape);
    let od = out.data_mut();
    let gd = grad.data();
    for (row, &idx) in indices.iter().enumerate() {
        for dim in 0..d {
            od[dim * plane + idx] += gd[row * d + dim];
        }
    }
    Ok(out)
}

/// Stacks row matrices with equal column counts vertically.
pub fn concat_rows<S: Scalar>(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
    if parts.is_empty() {
        return Err(Error::Shape("cannot concatenate zero matrices".into()));
    }
    let (_, cols) = require_rank2(parts[0], "first operand")?;
    let mut rows = 0;
    for p in parts {
        let (r, c) = require_rank2(p, "operand")?;
        if c != cols {
            return Err(Error::Shape(format!(
                "column counts differ: {cols} vs {c}"
            )));
        }
        rows += r;
    }
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        data.extend_from_slice(p.data());
    }
    Tensor::from_vec(&[rows, cols], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor<S: Scalar>(shape: &[usize], vals: &[f64]) -> Tensor<S> {
        Tensor::from_vec(shape, vals.iter().map(|&v| S::from_f64(v)).collect()).unwrap()
    }

    /// Direct quintuple-loop convolution used as an oracle for the optimized
    /// kernels.
    fn naive_conv2d(
        input: &Tensor<f64>,
        kernel: &Tensor<f64>,
        bias: &Tensor<f64>,
        stride: usize,
        padding: usize,
    ) -> Tensor<f64> {
        let (cin, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let (cout, kh, kw) = (kernel.shape()[0], kernel.shape()[2], kernel.shape()[3]);
        let h_out = (h + 2 * padding - kh) / stride + 1;
        let w_out = (w + 2 * padding - kw) / stride + 1;
        Tensor::from_fn(&[cout, h_out, w_out], |flat| {
            let co = flat / (h_out * w_out);
            let oy = (flat / w_out) % h_out;
            let ox = flat % w_out;
            let mut acc = bias.data()[co];
            for ci in 0..cin {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                            acc += kernel.at(&[co, ci, ky, kx])
                                * input.at(&[ci, iy as usize, ix as usize]);
                        }
                    }
                }
            }
            acc
        })
    }

    fn ramp(shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |i| ((i * 37 + 11) % 23) as f64 * 0.13 - 1.2)
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let input: Tensor<f32> = tensor(&[1, 3, 4], &[1., 2., 3., 4., 5., 6., 7., 8., 9., 10., 11., 12.]);
        let kernel = tensor(&[1, 1, 1, 1], &[1.0]);
        let bias = tensor(&[1], &[0.0]);
        let out = conv2d(&input, &kernel, &bias, 1, 0).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn multichannel_identity_kernel() {
        let input = ramp(&[3, 5, 5]).cast::<f32>();
        // 1x1 kernel equal to the identity over channels.
        let kernel = Tensor::<f32>::from_fn(&[3, 3, 1, 1], |i| {
            if i / 3 == i % 3 {
                1.0
            } else {
                0.0
            }
        });
        let bias = Tensor::<f32>::zeros(&[3]);
        assert_eq!(conv2d(&input, &kernel, &bias, 1, 0).unwrap(), input);
    }

    #[test]
    fn conv_matches_hand_computed_example() {
        // 3x3 mean filter over a 3x3 input, padding 1: the center output is
        // the mean of all 9 values; the corner sees only 4 values.
        let input: Tensor<f64> = tensor(&[1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let kernel = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0 / 9.0);
        let bias = tensor(&[1], &[0.5]);
        let out = conv2d(&input, &kernel, &bias, 1, 1).unwrap();
        assert!((out.at(&[0, 1, 1]) - (45.0 / 9.0 + 0.5)).abs() < 1e-12);
        assert!((out.at(&[0, 0, 0]) - ((1. + 2. + 4. + 5.) / 9.0 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn conv_matches_naive_oracle_across_strides_and_padding() {
        for &(cin, cout, h, w, k, stride, padding) in &[
            (2usize, 3usize, 7usize, 6usize, 3usize, 1usize, 1usize),
            (1, 2, 5, 5, 3, 2, 1),
            (3, 1, 8, 9, 5, 1, 2),
            (2, 2, 6, 6, 1, 1, 0),
            (2, 2, 9, 7, 3, 2, 0),
        ] {
            let input = ramp(&[cin, h, w]);
            let kernel = ramp(&[cout, cin, k, k]).map(|v| v * 0.31);
            let bias = ramp(&[cout]);
            let fast = conv2d(&input, &kernel, &bias, stride, padding).unwrap();
            let slow = naive_conv2d(&input, &kernel, &bias, stride, padding);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-9, "fast {a} vs naive {b}");
            }
        }
    }

    #[test]
    fn conv_rejects_even_kernels_and_bad_shapes() {
        let input = Tensor::<f32>::zeros(&[1, 4, 4]);
        let bias = Tensor::<f32>::zeros(&[1]);
        let even = Tensor::<f32>::zeros(&[1, 1, 2, 2]);
        assert!(conv2d(&input, &even, &bias, 1, 0).is_err());
        let mismatched = Tensor::<f32>::zeros(&[1, 2, 3, 3]);
        assert!(conv2d(&input, &mismatched, &bias, 1, 1).is_err());
        let too_big = Tensor::<f32>::zeros(&[1, 1, 7, 7]);
        assert!(conv2d(&input, &too_big, &bias, 1, 0).is_err());
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let input = ramp(&[2, 5, 4]).scale(0.3);
        let kernel = ramp(&[2, 2, 3, 3]).scale(0.2);
        let bias = ramp(&[2]).scale(0.1);
        for &(stride, padding) in &[(1usize, 1usize), (2, 1)] {
            let out = conv2d(&input, &kernel, &bias, stride, padding).unwrap();
            // Loss = sum of outputs, so upstream gradient is all-ones.
            let gout = Tensor::<f64>::full(out.shape(), 1.0);
            let (di, dk, db) =
                conv2d_backward(&input, &kernel, &gout, stride, padding).unwrap();
            let h = 1e-6;
            let loss = |i: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>| {
                conv2d(i, k, b, stride, padding).unwrap().sum_f64()
            };
            for idx in [0usize, 7, input.numel() - 1] {
                let mut p = input.clone();
                p.data_mut()[idx] += h;
                let mut m = input.clone();
                m.data_mut()[idx] -= h;
                let num = (loss(&p, &kernel, &bias) - loss(&m, &kernel, &bias)) / (2.0 * h);
                assert!((di.data()[idx] - num).abs() < 1e-6, "input grad {idx}");
            }
            for idx in [0usize, 5, kernel.numel() - 1] {
                let mut p = kernel.clone();
                p.data_mut()[idx] += h;
                let mut m = kernel.clone();
                m.data_mut()[idx] -= h;
                let num = (loss(&input, &p, &bias) - loss(&input, &m, &bias)) / (2.0 * h);
                assert!((dk.data()[idx] - num).abs() < 1e-6, "kernel grad {idx}");
            }
            for idx in 0..bias.numel() {
                let mut p = bias.clone();
                p.data_mut()[idx] += h;
                let mut m = bias.clone();
                m.data_mut()[idx] -= h;
                let num = (loss(&input, &kernel, &p) - loss(&input, &kernel, &m)) / (2.0 * h);
                assert!((db.data()[idx] - num).abs() < 1e-6, "bias grad {idx}");
            }
        }
    }

    #[test]
    fn relu_clamps_and_gates_gradient() {
        let x: Tensor<f32> = tensor(&[4], &[-1.0, 0.0, 0.5, 2.0]);
        let y = relu(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 0.5, 2.0]);
        let g = Tensor::full(&[4], 1.0f32);
        let dx = relu_backward(&x, &g).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn upsample_factor_one_is_identity() {
        let x = ramp(&[2, 3, 4]).cast::<f32>();
        assert_eq!(bilinear_upsample(&x, 1).unwrap(), x);
    }

    #[test]
    fn upsample_preserves_linear_ramps_in_the_interior() {
        // A horizontal linear ramp stays linear under bilinear interpolation;
        // interior output columns must lie exactly on the ramp.
        let x = Tensor::<f64>::from_fn(&[1, 2, 6], |i| (i % 6) as f64);
        let y = bilinear_upsample(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 4, 12]);
        for ox in 2..10 {
            let expected = (ox as f64 + 0.5) / 2.0 - 0.5;
            assert!((y.at(&[0, 1, ox]) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_backward_matches_finite_differences() {
        let x = ramp(&[1, 3, 3]);
        let gout = Tensor::<f64>::from_fn(&[1, 6, 6], |i| ((i % 5) as f64 - 2.0) * 0.3);
        let dx = bilinear_upsample_backward(&gout, x.shape(), 2).unwrap();
        let h = 1e-6;
        for idx in 0..x.numel() {
            let mut p = x.clone();
            p.data_mut()[idx] += h;
            let mut m = x.clone();
            m.data_mut()[idx] -= h;
            let weighted = |t: &Tensor<f64>| -> f64 {
                bilinear_upsample(t, 2)
                    .unwrap()
                    .data()
                    .iter()
                    .zip(gout.data())
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let num = (weighted(&p) - weighted(&m)) / (2.0 * h);
            assert!((dx.data()[idx] - num).abs() < 1e-6);
        }
    }

    #[test]
    fn l2_normalize_produces_unit_lanes() {
        let x = ramp(&[3, 4, 5]).map(|v| v + 2.0).cast::<f32>();
        for axis in 0..3 {
            let y = l2_normalize(&x, axis).unwrap();
            let (bases, stride) = lanes(x.shape(), axis);
            for &b in &bases {
                let mut sq = 0.0f64;
                for k in 0..x.shape()[axis] {
                    let v = y.data()[b + k * stride] as f64;
                    sq += v * v;
                }
                assert!((sq.sqrt() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn l2_normalize_rejects_zero_lane() {
        let mut x = Tensor::<f32>::full(&[2, 3], 1.0);
        for k in 0..3 {
            x.data_mut()[3 + k] = 0.0;
        }
        let err = l2_normalize(&x, 1).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn l2_normalize_backward_matches_finite_differences() {
        let x = ramp(&[3, 4]).map(|v| v * 0.5 + 1.5);
        let g = ramp(&[3, 4]).map(|v| v * 0.7);
        for axis in 0..2 {
            let dx = l2_normalize_backward(&x, &g, axis).unwrap();
            let h = 1e-6;
            for idx in 0..x.numel() {
                let mut p = x.clone();
                p.data_mut()[idx] += h;
                let mut m = x.clone();
                m.data_mut()[idx] -= h;
                let weighted = |t: &Tensor<f64>| -> f64 {
                    l2_normalize(t, axis)
                        .unwrap()
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(a, b)| a * b)
                        .sum()
                };
                let num = (weighted(&p) - weighted(&m)) / (2.0 * h);
                assert!((dx.data()[idx] - num).abs() < 1e-7, "axis {axis} idx {idx}");
            }
        }
    }

    #[test]
    fn safe_normalize_substitutes_basis_vector_on_zero_lanes() {
        // Lane 1 (middle row along axis 1) is all zero; lane 0 and 2 are not.
        let mut x = Tensor::<f64>::full(&[3, 2], 2.0);
        x.data_mut()[2] = 0.0;
        x.data_mut()[3] = 0.0;
        let y = l2_normalize_safe(&x, 1).unwrap();
        let s = 0.5f64.sqrt();
        assert!((y.at(&[0, 0]) - s).abs() < 1e-12);
        assert!((y.at(&[0, 1]) - s).abs() < 1e-12);
        // Substituted lane: first basis vector along the axis.
        assert_eq!(y.at(&[1, 0]), 1.0);
        assert_eq!(y.at(&[1, 1]), 0.0);
        // Non-degenerate input: identical to the strict variant.
        let dense = ramp(&[3, 4]).map(|v| v + 1.0);
        assert_eq!(
            l2_normalize_safe(&dense, 0).unwrap(),
            l2_normalize(&dense, 0).unwrap()
        );
    }

    #[test]
    fn safe_normalize_backward_is_zero_on_substituted_lanes() {
        let mut x = ramp(&[3, 4]).map(|v| v * 0.5 + 1.5);
        for k in 0..4 {
            x.data_mut()[4 + k] = 0.0; // kill lane 1 along axis 1
        }
        let g = ramp(&[3, 4]).map(|v| v * 0.7 + 0.1);
        let dx = l2_normalize_safe_backward(&x, &g, 1).unwrap();
        for k in 0..4 {
            assert_eq!(dx.data()[4 + k], 0.0);
        }
        // Alive lanes agree with the strict backward on a dense copy.
        let dense = ramp(&[3, 4]).map(|v| v * 0.5 + 1.5);
        let strict = l2_normalize_backward(&dense, &g, 1).unwrap();
        let safe = l2_normalize_safe_backward(&dense, &g, 1).unwrap();
        assert_eq!(strict, safe);
    }

    #[test]
    fn matmul_matches_hand_example_and_transposed_variants() {
        let a: Tensor<f64> = tensor(&[2, 3], &[1., 2., 3., 4., 5., 6.]);
        let b: Tensor<f64> = tensor(&[3, 2], &[7., 8., 9., 10., 11., 12.]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[58., 64., 139., 154.]);

        // a.b^T and a^T.b validated against matmul on materialized transposes.
        let bt: Tensor<f64> = tensor(&[2, 3], &[7., 9., 11., 8., 10., 12.]);
        assert_eq!(matmul_a_bt(&a, &bt).unwrap(), c);
        let at: Tensor<f64> = tensor(&[3, 2], &[1., 4., 2., 5., 3., 6.]);
        assert_eq!(matmul_at_b(&at, &b).unwrap(), c);

        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn cross_entropy_on_uniform_logits_equals_log_class_count() {
        for classes in [2usize, 5, 17] {
            let logits = Tensor::<f64>::full(&[3, classes], 0.37);
            let loss = softmax_cross_entropy(&logits, &[0, 1 % classes, classes - 1]).unwrap();
            assert!((loss - (classes as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_is_shift_invariant() {
        let logits: Tensor<f64> = tensor(&[2, 3], &[0.2, -1.0, 0.7, 1.5, 0.0, -0.3]);
        let shifted = logits.map(|v| v + 123.456);
        let a = softmax_cross_entropy(&logits, &[2, 0]).unwrap();
        let b = softmax_cross_entropy(&shifted, &[2, 0]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let logits = Tensor::<f32>::zeros(&[1, 3]);
        assert!(softmax_cross_entropy(&logits, &[3]).is_err());
    }

    #[test]
    fn cross_entropy_backward_rows_sum_to_zero_and_match_fd() {
        let logits: Tensor<f64> = tensor(&[2, 4], &[0.3, -0.5, 1.1, 0.0, -1.2, 0.4, 0.2, 0.9]);
        let targets = [2usize, 1];
        let grad = softmax_cross_entropy_backward(&logits, &targets, 1.0).unwrap();
        for i in 0..2 {
            let row_sum: f64 = grad.data()[i * 4..(i + 1) * 4].iter().sum();
            assert!(row_sum.abs() < 1e-12, "softmax gradient rows sum to zero");
        }
        let h = 1e-6;
        for idx in 0..logits.numel() {
            let mut p = logits.clone();
            p.data_mut()[idx] += h;
            let mut m = logits.clone();
            m.data_mut()[idx] -= h;
            let num = (softmax_cross_entropy(&p, &targets).unwrap()
                - softmax_cross_entropy(&m, &targets).unwrap())
                / (2.0 * h);
            assert!((grad.data()[idx] - num).abs() < 1e-8);
        }
    }

    #[test]
    fn binary_cross_entropy_matches_direct_formula_and_fd() {
        let logits: Tensor<f64> = tensor(&[2, 2], &[0.8, -1.3, 2.0, 0.0]);
        let target: Tensor<f64> = tensor(&[2, 2], &[1.0, 0.0, 1.0, 1.0]);
        let loss = binary_cross_entropy(&logits, &target).unwrap();
        let direct: f64 = logits
            .data()
            .iter()
            .zip(target.data())
            .map(|(&l, &t)| {
                let p = sigmoid(l);
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 4.0;
        assert!((loss - direct).abs() < 1e-12);

        let grad = binary_cross_entropy_backward(&logits, &target, 1.0).unwrap();
        let h = 1e-6;
        for idx in 0..logits.numel() {
            let mut p = logits.clone();
            p.data_mut()[idx] += h;
            let mut m = logits.clone();
            m.data_mut()[idx] -= h;
            let num = (binary_cross_entropy(&p, &target).unwrap()
                - binary_cross_entropy(&m, &target).unwrap())
                / (2.0 * h);
            assert!((grad.data()[idx] - num).abs() < 1e-8);
        }

        let bad: Tensor<f64> = tensor(&[2, 2], &[1.0, 0.5, 0.0, 1.0]);
        assert!(binary_cross_entropy(&logits, &bad).is_err());
    }

    #[test]
    fn masked_pool_averages_only_foreground() {
        let emb: Tensor<f64> = tensor(&[2, 2, 2], &[1., 2., 3., 4., 10., 20., 30., 40.]);
        let mask = ObjectMask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        let pooled = masked_mean_pool(&emb, &mask).unwrap();
        assert_eq!(pooled.data(), &[(1. + 4.) / 2.0, (10. + 40.) / 2.0]);

        let empty = ObjectMask::new(2, 2, vec![0, 0, 0, 0]).unwrap();
        assert!(masked_mean_pool(&emb, &empty).is_err());

        let grad: Tensor<f64> = tensor(&[2], &[2.0, -4.0]);
        let back = masked_mean_pool_backward(&grad, &mask, emb.shape()).unwrap();
        assert_eq!(back.data(), &[1.0, 0.0, 0.0, 1.0, -2.0, 0.0, 0.0, -2.0]);
    }

    #[test]
    fn select_pixels_gathers_rows_and_scatters_back() {
        let emb: Tensor<f64> = tensor(&[2, 2, 2], &[1., 2., 3., 4., 10., 20., 30., 40.]);
        let rows = select_pixels(&emb, &[3, 0]).unwrap();
        assert_eq!(rows.shape(), &[2, 2]);
        assert_eq!(rows.data(), &[4., 40., 1., 10.]);

        let grad: Tensor<f64> = tensor(&[2, 2], &[1., 2., 3., 4.]);
        let back = select_pixels_backward(&grad, &[3, 0], emb.shape()).unwrap();
        assert_eq!(back.data(), &[3., 0., 0., 1., 4., 0., 0., 2.]);

        assert!(select_pixels(&emb, &[4]).is_err());
        assert!(select_pixels(&emb, &[]).is_err());
    }

    #[test]
    fn concat_rows_stacks_matrices() {
        let a: Tensor<f64> = tensor(&[1, 2], &[1., 2.]);
        let b: Tensor<f64> = tensor(&[2, 2], &[3., 4., 5., 6.]);
        let c = concat_rows(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[3, 2]);
        assert_eq!(c.data(), &[1., 2., 3., 4., 5., 6.]);
        let bad: Tensor<f64> = tensor(&[1, 3], &[0., 0., 0.]);
        assert!(concat_rows(&[&a, &bad]).is_err());
    }

    #[test]
    fn dot_and_axpy_agree_with_direct_loops() {
        let a: Vec<f64> = (0..37).map(|i| (i as f64) * 0.31 - 3.0).collect();
        let b: Vec<f64> = (0..37).map(|i| ((i * 7) % 11) as f64 * 0.5).collect();
        let expect: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - expect).abs() < 1e-9);

        let mut dst = vec![1.0f64; 37];
        axpy(&mut dst, &a, 2.0);
        for (i, v) in dst.iter().enumerate() {
            assert!((v - (1.0 + 2.0 * a[i])).abs() < 1e-12);
        }
    }
}
