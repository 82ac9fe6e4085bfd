//! Convolution kernels behind the tape ops.
//!
//! Two interchangeable execution paths exist for the standard convolution: a
//! direct nested-loop implementation and an image-to-column + matrix-product
//! path. Both compute the same cross-correlation; tests pin their agreement
//! to 1e-6 elementwise. Depthwise convolution is loop-only — its arithmetic
//! intensity is too low for im2col to pay off.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Which execution path standard convolutions take.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvPath {
    Direct,
    Im2col,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub hout: usize,
    pub wout: usize,
}

pub fn conv_dims<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    if x.rank() != 4 {
        return Err(Error::ShapeMismatch(format!("conv2d input must be rank 4, got {:?}", x.shape())));
    }
    if weight.rank() != 4 || weight.dim(2) != weight.dim(3) {
        return Err(Error::ShapeMismatch(format!(
            "conv2d kernel must be [Cout,Cin,K,K], got {:?}",
            weight.shape()
        )));
    }
    let (n, cin, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let (cout, wcin, k) = (weight.dim(0), weight.dim(1), weight.dim(2));
    if wcin != cin {
        return Err(Error::ShapeMismatch(format!(
            "conv2d kernel expects {wcin} input channels, input has {cin}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::ShapeMismatch(format!(
            "conv2d bias must be [{cout}], got {:?}",
            bias.shape()
        )));
    }
    if k % 2 == 0 {
        return Err(Error::InvalidArgument(format!("kernel size must be odd, got {k}")));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    let padded_h = h + 2 * pad;
    let padded_w = w + 2 * pad;
    if padded_h < k || padded_w < k {
        return Err(Error::InvalidArgument(format!(
            "output would be empty: input {h}x{w}, pad {pad}, kernel {k}"
        )));
    }
    let hout = (padded_h - k) / stride + 1;
    let wout = (padded_w - k) / stride + 1;
    Ok(ConvDims { n, cin, h, w, cout, k, stride, pad, hout, wout })
}

pub fn conv2d_forward<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    pad: usize,
    path: ConvPath,
) -> Result<Tensor<S>> {
    let d = conv_dims(x, weight, bias, stride, pad)?;
    match path {
        ConvPath::Direct => Ok(conv2d_forward_direct(x, weight, bias, &d)),
        ConvPath::Im2col => Ok(conv2d_forward_im2col(x, weight, bias, &d)),
    }
}

fn conv2d_forward_direct<S: Scalar>(x: &Tensor<S>, weight: &Tensor<S>, bias: &Tensor<S>, d: &ConvDims) -> Tensor<S> {
    let xd = x.data();
    let wd = weight.data();
    let bd = bias.data();
    let mut out = vec![S::ZERO; d.n * d.cout * d.hout * d.wout];
    for n in 0..d.n {
        for co in 0..d.cout {
            for oy in 0..d.hout {
                for ox in 0..d.wout {
                    let mut acc = bd[co];
                    for ci in 0..d.cin {
                        for ky in 0..d.k {
                            let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            for kx in 0..d.k {
                                let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                let xi = ((n * d.cin + ci) * d.h + iy as usize) * d.w + ix as usize;
                                let wi = ((co * d.cin + ci) * d.k + ky) * d.k + kx;
                                acc += xd[xi] * wd[wi];
                            }
                        }
                    }
                    out[((n * d.cout + co) * d.hout + oy) * d.wout + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![d.n, d.cout, d.hout, d.wout], out).expect("conv output shape")
}

/// Expands one batch item into a `[Cin*K*K, Hout*Wout]` column matrix.
fn im2col<S: Scalar>(xd: &[S], n: usize, d: &ConvDims, col: &mut [S]) {
    let plane = d.h * d.w;
    let base = n * d.cin * plane;
    let cols = d.hout * d.wout;
    for ci in 0..d.cin {
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = ((ci * d.k + ky) * d.k + kx) * cols;
                for oy in 0..d.hout {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    let out_row = row + oy * d.wout;
                    if iy < 0 || iy >= d.h as isize {
                        col[out_row..out_row + d.wout].fill(S::ZERO);
                        continue;
                    }
                    let src = base + ci * plane + iy as usize * d.w;
                    for ox in 0..d.wout {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        col[out_row + ox] = if ix < 0 || ix >= d.w as isize { S::ZERO } else { xd[src + ix as usize] };
                    }
                }
            }
        }
    }
}

/// Scatters a `[Cin*K*K, Hout*Wout]` column-gradient back into image layout.
fn col2im_accumulate<S: Scalar>(col: &[S], n: usize, d: &ConvDims, dx: &mut [S]) {
    let plane = d.h * d.w;
    let base = n * d.cin * plane;
    let cols = d.hout * d.wout;
    for ci in 0..d.cin {
        for ky in 0..d.k {
            for kx in 0..d.k {
                let row = ((ci * d.k + ky) * d.k + kx) * cols;
                for oy in 0..d.hout {
                    let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let dst = base + ci * plane + iy as usize * d.w;
                    for ox in 0..d.wout {
                        let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                        if ix >= 0 && ix < d.w as isize {
                            dx[dst + ix as usize] += col[row + oy * d.wout + ox];
                        }
                    }
                }
            }
        }
    }
}

#[inline]
fn is_pointwise(d: &ConvDims) -> bool {
    d.k == 1 && d.stride == 1 && d.pad == 0
}

fn conv2d_forward_im2col<S: Scalar>(x: &Tensor<S>, weight: &Tensor<S>, bias: &Tensor<S>, d: &ConvDims) -> Tensor<S> {
    let xd = x.data();
    let wd = weight.data();
    let bd = bias.data();
    let cols = d.hout * d.wout;
    let krows = d.cin * d.k * d.k;
    let mut out = vec![S::ZERO; d.n * d.cout * cols];
    // 1x1 stride-1 convolutions multiply the input as-is; no column matrix.
    let mut col = if is_pointwise(d) { Vec::new() } else { vec![S::ZERO; krows * cols] };
    for n in 0..d.n {
        let dst = &mut out[n * d.cout * cols..(n + 1) * d.cout * cols];
        if is_pointwise(d) {
            let src = &xd[n * d.cin * cols..(n + 1) * d.cin * cols];
            S::gemm(d.cout, krows, cols, S::ONE, wd, src, S::ZERO, dst);
        } else {
            im2col(xd, n, d, &mut col);
            S::gemm(d.cout, krows, cols, S::ONE, wd, &col, S::ZERO, dst);
        }
        for co in 0..d.cout {
            let b = bd[co];
            for v in dst[co * cols..(co + 1) * cols].iter_mut() {
                *v += b;
            }
        }
    }
    Tensor::new(vec![d.n, d.cout, d.hout, d.wout], out).expect("conv output shape")
}

/// Gradients of the standard convolution w.r.t. input, kernel, and bias.
/// `want_dx` skips the input gradient when the input is a constant.
pub fn conv2d_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    x: &Tensor<S>,
    weight: &Tensor<S>,
    d: &ConvDims,
    path: ConvPath,
    want_dx: bool,
) -> (Option<Tensor<S>>, Tensor<S>, Tensor<S>) {
    let god = grad_out.data();
    let cols = d.hout * d.wout;

    // Bias gradient: sum over batch and spatial positions.
    let mut db = vec![S::ZERO; d.cout];
    for n in 0..d.n {
        for co in 0..d.cout {
            let row = &god[(n * d.cout + co) * cols..(n * d.cout + co + 1) * cols];
            let mut acc = S::ZERO;
            for &g in row {
                acc += g;
            }
            db[co] += acc;
        }
    }
    let db = Tensor::new(vec![d.cout], db).expect("bias grad shape");

    match path {
        ConvPath::Direct => conv2d_backward_direct(grad_out, x, weight, d, want_dx, db),
        ConvPath::Im2col => conv2d_backward_im2col(grad_out, x, weight, d, want_dx, db),
    }
}

fn conv2d_backward_direct<S: Scalar>(
    grad_out: &Tensor<S>,
    x: &Tensor<S>,
    weight: &Tensor<S>,
    d: &ConvDims,
    want_dx: bool,
    db: Tensor<S>,
) -> (Option<Tensor<S>>, Tensor<S>, Tensor<S>) {
    let god = grad_out.data();
    let xd = x.data();
    let wd = weight.data();
    let mut dw = vec![S::ZERO; d.cout * d.cin * d.k * d.k];
    let mut dx = if want_dx { vec![S::ZERO; d.n * d.cin * d.h * d.w] } else { Vec::new() };
    for n in 0..d.n {
        for co in 0..d.cout {
            for oy in 0..d.hout {
                for ox in 0..d.wout {
                    let g = god[((n * d.cout + co) * d.hout + oy) * d.wout + ox];
                    for ci in 0..d.cin {
                        for ky in 0..d.k {
                            let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            for kx in 0..d.k {
                                let ix = (ox * d.stride + kx) as isize - d.pad as isize;
                                if ix < 0 || ix >= d.w as isize {
                                    continue;
                                }
                                let xi = ((n * d.cin + ci) * d.h + iy as usize) * d.w + ix as usize;
                                let wi = ((co * d.cin + ci) * d.k + ky) * d.k + kx;
                                dw[wi] += g * xd[xi];
                                if want_dx {
                                    dx[xi] += g * wd[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    let dw = Tensor::new(weight.shape().to_vec(), dw).expect("kernel grad shape");
    let dx = want_dx.then(|| Tensor::new(x.shape().to_vec(), dx).expect("input grad shape"));
    (dx, dw, db)
}

fn conv2d_backward_im2col<S: Scalar>(
    grad_out: &Tensor<S>,
    x: &Tensor<S>,
    weight: &Tensor<S>,
    d: &ConvDims,
    want_dx: bool,
    db: Tensor<S>,
) -> (Option<Tensor<S>>, Tensor<S>, Tensor<S>) {
    let god = grad_out.data();
    let xd = x.data();
    let wd = weight.data();
    let cols = d.hout * d.wout;
    let krows = d.cin * d.k * d.k;
    let pointwise = is_pointwise(d);

    let mut col = if pointwise { Vec::new() } else { vec![S::ZERO; krows * cols] };
    let mut dw = vec![S::ZERO; d.cout * krows];
    let mut dx = if want_dx { vec![S::ZERO; d.n * d.cin * d.h * d.w] } else { Vec::new() };
    let mut dcol = if want_dx && !pointwise { vec![S::ZERO; krows * cols] } else { Vec::new() };

    // dW += dY_n . col_n^T and dX via col2im(W^T dY_n); the transposes are
    // expressed with swapped gemm strides instead of copies.
    for n in 0..d.n {
        let dy = &god[n * d.cout * cols..(n + 1) * d.cout * cols];
        let col_slice: &[S] = if pointwise {
            &xd[n * d.cin * cols..(n + 1) * d.cin * cols]
        } else {
            im2col(xd, n, d, &mut col);
            &col
        };
        S::gemm_strided(
            d.cout,
            cols,
            krows,
            S::ONE,
            dy,
            cols as isize,
            1,
            col_slice,
            1,
            cols as isize,
            S::ONE,
            &mut dw,
            krows as isize,
            1,
        );
        if want_dx {
            if pointwise {
                let dst = &mut dx[n * d.cin * cols..(n + 1) * d.cin * cols];
                S::gemm_strided(
                    krows,
                    d.cout,
                    cols,
                    S::ONE,
                    wd,
                    1,
                    krows as isize,
                    dy,
                    cols as isize,
                    1,
                    S::ZERO,
                    dst,
                    cols as isize,
                    1,
                );
            } else {
                S::gemm_strided(
                    krows,
                    d.cout,
                    cols,
                    S::ONE,
                    wd,
                    1,
                    krows as isize,
                    dy,
                    cols as isize,
                    1,
                    S::ZERO,
                    &mut dcol,
                    cols as isize,
                    1,
                );
                col2im_accumulate(&dcol, n, d, &mut dx);
            }
        }
    }
    let dw = Tensor::new(weight.shape().to_vec(), dw).expect("kernel grad shape");
    let dx = want_dx.then(|| Tensor::new(x.shape().to_vec(), dx).expect("input grad shape"));
    (dx, dw, db)
}

// ── Depthwise convolution ───────────────────────────────────────────

pub fn depthwise_dims<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> Result<ConvDims> {
    if x.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "depthwise input must be rank 4, got {:?}",
            x.shape()
        )));
    }
    let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    if weight.rank() != 4 || weight.dim(0) != c || weight.dim(1) != 1 || weight.dim(2) != weight.dim(3) {
        return Err(Error::ShapeMismatch(format!(
            "depthwise kernel must be [{c},1,K,K], got {:?}",
            weight.shape()
        )));
    }
    if bias.shape() != [c] {
        return Err(Error::ShapeMismatch(format!(
            "depthwise bias must be [{c}], got {:?}",
            bias.shape()
        )));
    }
    let k = weight.dim(2);
    if k.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("kernel size must be odd, got {k}")));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be >= 1".into()));
    }
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::InvalidArgument(format!(
            "output would be empty: input {h}x{w}, pad {pad}, kernel {k}"
        )));
    }
    let hout = (h + 2 * pad - k) / stride + 1;
    let wout = (w + 2 * pad - k) / stride + 1;
    Ok(ConvDims { n, cin: c, h, w, cout: c, k, stride, pad, hout, wout })
}

/// Multi-accumulator dot product; the fixed-width inner loop vectorizes.
#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::ZERO; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (ca, cb) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for j in 0..8 {
            acc[j] += ca[j] * cb[j];
        }
    }
    let mut total = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    for i in chunks * 8..a.len() {
        total += a[i] * b[i];
    }
    total
}

/// Output-x range for which `ox*stride + kx - pad` stays inside `[0, w)`.
#[inline]
fn valid_ox_range(kx: usize, d: &ConvDims) -> (usize, usize) {
    let lo = if kx >= d.pad { 0 } else { (d.pad - kx).div_ceil(d.stride) };
    let hi_num = d.w + d.pad - kx;
    let hi = if hi_num == 0 { 0 } else { ((hi_num - 1) / d.stride + 1).min(d.wout) };
    (lo.min(d.wout), hi)
}

/// Fused 3x3 stride-1 pad-1 path: one pass per (row, ky) with all three
/// horizontal taps applied together.
fn depthwise_k3s1_forward<S: Scalar>(xd: &[S], wd: &[S], bd: &[S], d: &ConvDims, out: &mut [S]) {
    let (h, w) = (d.h, d.w);
    for nc in 0..d.n * d.cin {
        let c = nc % d.cin;
        let src = &xd[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * h * w..(nc + 1) * h * w];
        dst.fill(bd[c]);
        for oy in 0..h {
            let row = &mut dst[oy * w..(oy + 1) * w];
            for ky in 0..3usize {
                let iy = oy as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let s = &src[iy as usize * w..(iy as usize + 1) * w];
                let w0 = wd[c * 9 + ky * 3];
                let w1 = wd[c * 9 + ky * 3 + 1];
                let w2 = wd[c * 9 + ky * 3 + 2];
                row[0] += w1 * s[0] + w2 * s[1];
                for ox in 1..w - 1 {
                    row[ox] += w0 * s[ox - 1] + w1 * s[ox] + w2 * s[ox + 1];
                }
                row[w - 1] += w0 * s[w - 2] + w1 * s[w - 1];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn depthwise_k3s1_backward<S: Scalar>(
    god: &[S],
    xd: &[S],
    wd: &[S],
    d: &ConvDims,
    want_dx: bool,
    dw: &mut [S],
    db: &mut [S],
    dx: &mut [S],
) {
    let (h, w) = (d.h, d.w);
    for nc in 0..d.n * d.cin {
        let c = nc % d.cin;
        let src = &xd[nc * h * w..(nc + 1) * h * w];
        let gplane = &god[nc * h * w..(nc + 1) * h * w];
        for oy in 0..h {
            let g = &gplane[oy * w..(oy + 1) * w];
            let mut gsum = S::ZERO;
            for &v in g {
                gsum += v;
            }
            db[c] += gsum;
            for ky in 0..3usize {
                let iy = oy as isize + ky as isize - 1;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                let iy = iy as usize;
                let s = &src[iy * w..(iy + 1) * w];
                dw[c * 9 + ky * 3] += dot(&g[1..], &s[..w - 1]);
                dw[c * 9 + ky * 3 + 1] += dot(g, s);
                dw[c * 9 + ky * 3 + 2] += dot(&g[..w - 1], &s[1..]);
                if want_dx {
                    let w0 = wd[c * 9 + ky * 3];
                    let w1 = wd[c * 9 + ky * 3 + 1];
                    let w2 = wd[c * 9 + ky * 3 + 2];
                    let drow = &mut dx[nc * h * w + iy * w..nc * h * w + (iy + 1) * w];
                    drow[0] += w1 * g[0] + w0 * g[1];
                    for ix in 1..w - 1 {
                        drow[ix] += w0 * g[ix + 1] + w1 * g[ix] + w2 * g[ix - 1];
                    }
                    drow[w - 1] += w2 * g[w - 2] + w1 * g[w - 1];
                }
            }
        }
    }
}

#[inline]
fn is_k3s1(d: &ConvDims) -> bool {
    d.k == 3 && d.stride == 1 && d.pad == 1 && d.w >= 2
}

pub fn depthwise_forward<S: Scalar>(
    x: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let d = depthwise_dims(x, weight, bias, stride, pad)?;
    let xd = x.data();
    let wd = weight.data();
    let bd = bias.data();
    let mut out = vec![S::ZERO; d.n * d.cin * d.hout * d.wout];
    if is_k3s1(&d) {
        depthwise_k3s1_forward(xd, wd, bd, &d, &mut out);
        return Tensor::new(vec![d.n, d.cin, d.hout, d.wout], out);
    }
    for nc in 0..d.n * d.cin {
        let c = nc % d.cin;
        let src = &xd[nc * d.h * d.w..(nc + 1) * d.h * d.w];
        let dst = &mut out[nc * d.hout * d.wout..(nc + 1) * d.hout * d.wout];
        for oy in 0..d.hout {
            let row = &mut dst[oy * d.wout..(oy + 1) * d.wout];
            row.fill(bd[c]);
            for ky in 0..d.k {
                let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                if iy < 0 || iy >= d.h as isize {
                    continue;
                }
                let src_row = &src[iy as usize * d.w..(iy as usize + 1) * d.w];
                for kx in 0..d.k {
                    let wv = wd[(c * d.k + ky) * d.k + kx];
                    let (lo, hi) = valid_ox_range(kx, &d);
                    if hi <= lo {
                        continue;
                    }
                    if d.stride == 1 {
                        // contiguous slices so the loop vectorizes
                        let start = lo + kx - d.pad;
                        let s = &src_row[start..start + (hi - lo)];
                        for (o, &v) in row[lo..hi].iter_mut().zip(s) {
                            *o += wv * v;
                        }
                    } else {
                        for ox in lo..hi {
                            row[ox] += wv * src_row[ox * d.stride + kx - d.pad];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![d.n, d.cin, d.hout, d.wout], out)
}

#[allow(clippy::needless_range_loop)]
pub fn depthwise_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    x: &Tensor<S>,
    weight: &Tensor<S>,
    d: &ConvDims,
    want_dx: bool,
) -> (Option<Tensor<S>>, Tensor<S>, Tensor<S>) {
    let god = grad_out.data();
    let xd = x.data();
    let wd = weight.data();
    let mut dw = vec![S::ZERO; d.cin * d.k * d.k];
    let mut db = vec![S::ZERO; d.cin];
    let mut dx = if want_dx { vec![S::ZERO; d.n * d.cin * d.h * d.w] } else { Vec::new() };
    if is_k3s1(d) {
        depthwise_k3s1_backward(god, xd, wd, d, want_dx, &mut dw, &mut db, &mut dx);
        let dw = Tensor::new(weight.shape().to_vec(), dw).expect("kernel grad shape");
        let db = Tensor::new(vec![d.cin], db).expect("bias grad shape");
        let dx = want_dx.then(|| Tensor::new(x.shape().to_vec(), dx).expect("input grad shape"));
        return (dx, dw, db);
    }
    for nc in 0..d.n * d.cin {
        let c = nc % d.cin;
        let src = &xd[nc * d.h * d.w..(nc + 1) * d.h * d.w];
        let gplane = &god[nc * d.hout * d.wout..(nc + 1) * d.hout * d.wout];
        for oy in 0..d.hout {
            let grow = &gplane[oy * d.wout..(oy + 1) * d.wout];
            let mut gsum = S::ZERO;
            for &g in grow {
                gsum += g;
            }
            db[c] += gsum;
            for ky in 0..d.k {
                let iy = (oy * d.stride + ky) as isize - d.pad as isize;
                if iy < 0 || iy >= d.h as isize {
                    continue;
                }
                let iy = iy as usize;
                let src_row = &src[iy * d.w..(iy + 1) * d.w];
                for kx in 0..d.k {
                    let wi = (c * d.k + ky) * d.k + kx;
                    let wv = wd[wi];
                    let (lo, hi) = valid_ox_range(kx, d);
                    if hi <= lo {
                        continue;
                    }
                    let mut acc = S::ZERO;
                    if d.stride == 1 {
                        let start = lo + kx - d.pad;
                        let len = hi - lo;
                        let s = &src_row[start..start + len];
                        let g = &grow[lo..hi];
                        acc += dot(g, s);
                        if want_dx {
                            let base = nc * d.h * d.w + iy * d.w + start;
                            let dst = &mut dx[base..base + len];
                            for (o, gi) in dst.iter_mut().zip(g) {
                                *o += *gi * wv;
                            }
                        }
                    } else if want_dx {
                        let dst = &mut dx[nc * d.h * d.w + iy * d.w..nc * d.h * d.w + (iy + 1) * d.w];
                        for ox in lo..hi {
                            let ix = ox * d.stride + kx - d.pad;
                            let g = grow[ox];
                            acc += g * src_row[ix];
                            dst[ix] += g * wv;
                        }
                    } else {
                        for ox in lo..hi {
                            acc += grow[ox] * src_row[ox * d.stride + kx - d.pad];
                        }
                    }
                    dw[wi] += acc;
                }
            }
        }
    }
    let dw = Tensor::new(weight.shape().to_vec(), dw).expect("kernel grad shape");
    let db = Tensor::new(vec![d.cin], db).expect("bias grad shape");
    let dx = want_dx.then(|| Tensor::new(x.shape().to_vec(), dx).expect("input grad shape"));
    (dx, dw, db)
}
