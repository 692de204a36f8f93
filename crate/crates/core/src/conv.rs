//! Convolution and transposed-convolution kernels.
//!
//! Layouts: inputs `[B, H, W, Cin]`, weights `[k, k, Cin, Cout]`, bias
//! `[Cout]`. `deconv2d` is the exact linear adjoint of `conv2d` with the same
//! weight: `⟨conv2d(x, W, 0), y⟩ == ⟨x, deconv2d(y, W, 0)⟩`.
//!
//! The production path lowers to im2col plus a GEMM; [`reference`] holds the
//! plain-loop definitions the fast path is tested against (equal within 1e-5
//! relative — summation order differs, so results are not bit-equal).

use crate::error::{Error, Result};
use crate::tensor::{gemm, Scalar, Tensor};

/// Output length of a strided window sweep: `floor((in + 2p − k)/s) + 1`.
pub fn conv_out_dim(in_dim: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 || kernel == 0 {
        return Err(Error::InvalidConfig(format!(
            "conv needs kernel ≥ 1 and stride ≥ 1, got k={kernel} s={stride}"
        )));
    }
    let padded = in_dim + 2 * padding;
    if padded < kernel {
        return Err(Error::InvalidConfig(format!(
            "conv window k={kernel} exceeds padded extent {padded} (in={in_dim}, p={padding})"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Transposed-convolution output length: `(in − 1)·s + k − 2p`.
pub fn deconv_out_dim(
    in_dim: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Result<usize> {
    if stride == 0 || kernel == 0 || in_dim == 0 {
        return Err(Error::InvalidConfig(format!(
            "deconv needs in ≥ 1, kernel ≥ 1, stride ≥ 1, got in={in_dim} k={kernel} s={stride}"
        )));
    }
    let grown = (in_dim - 1) * stride + kernel;
    if grown <= 2 * padding {
        return Err(Error::InvalidConfig(format!(
            "deconv output would be empty: (in−1)·s+k = {grown} ≤ 2·padding = {}",
            2 * padding
        )));
    }
    Ok(grown - 2 * padding)
}

struct ConvShapes {
    batch: usize,
    in_h: usize,
    in_w: usize,
    c_in: usize,
    kernel: usize,
    c_out: usize,
}

/// Validates input/weight/bias agreement shared by conv2d and deconv2d.
fn check_shapes<T: Scalar>(
    op: &'static str,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<ConvShapes> {
    if input.rank() != 4 {
        return Err(Error::InvalidConfig(format!(
            "{op}: input must be rank 4 [B,H,W,C], got {:?}",
            input.shape()
        )));
    }
    if weight.rank() != 4 || weight.shape()[0] != weight.shape()[1] {
        return Err(Error::InvalidConfig(format!(
            "{op}: weight must be [k,k,Cin,Cout] with square kernel, got {:?}",
            weight.shape()
        )));
    }
    let (kernel, c_in, c_out) = (weight.shape()[0], weight.shape()[2], weight.shape()[3]);
    if input.shape()[3] != c_in {
        return Err(Error::shapes(op, input.shape(), weight.shape()));
    }
    if bias.shape() != [c_out] {
        return Err(Error::shapes(op, bias.shape(), weight.shape()));
    }
    Ok(ConvShapes {
        batch: input.shape()[0],
        in_h: input.shape()[1],
        in_w: input.shape()[2],
        c_in,
        kernel,
        c_out,
    })
}

/// Gathers k×k patches of `src` (shape `[src_h, src_w, c]`) around each point
/// of a `grid_h × grid_w` stride-`s` grid into `cols[grid_h·grid_w, k·k·c]`,
/// zero-filling out-of-bounds taps. Column order is `(kh, kw, channel)`.
#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    src: &[T],
    src_h: usize,
    src_w: usize,
    c: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    grid_h: usize,
    grid_w: usize,
    cols: &mut [T],
) {
    let row_len = kernel * kernel * c;
    debug_assert_eq!(cols.len(), grid_h * grid_w * row_len);
    let pad = padding as isize;
    for gh in 0..grid_h {
        let ih0 = (gh * stride) as isize - pad;
        for gw in 0..grid_w {
            let iw0 = (gw * stride) as isize - pad;
            let row = &mut cols[(gh * grid_w + gw) * row_len..][..row_len];
            for kh in 0..kernel {
                let ih = ih0 + kh as isize;
                let in_h = ih >= 0 && (ih as usize) < src_h;
                for kw in 0..kernel {
                    let iw = iw0 + kw as isize;
                    let seg = &mut row[(kh * kernel + kw) * c..][..c];
                    if in_h && iw >= 0 && (iw as usize) < src_w {
                        let base = (ih as usize * src_w + iw as usize) * c;
                        seg.copy_from_slice(&src[base..base + c]);
                    } else {
                        seg.fill(T::ZERO);
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-adds `cols` rows back into `dst`, skipping
/// out-of-bounds taps.
#[allow(clippy::too_many_arguments)]
fn scatter_cols<T: Scalar>(
    cols: &[T],
    dst: &mut [T],
    dst_h: usize,
    dst_w: usize,
    c: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
    grid_h: usize,
    grid_w: usize,
) {
    let row_len = kernel * kernel * c;
    debug_assert_eq!(cols.len(), grid_h * grid_w * row_len);
    let pad = padding as isize;
    for gh in 0..grid_h {
        let ih0 = (gh * stride) as isize - pad;
        for gw in 0..grid_w {
            let iw0 = (gw * stride) as isize - pad;
            let row = &cols[(gh * grid_w + gw) * row_len..][..row_len];
            for kh in 0..kernel {
                let ih = ih0 + kh as isize;
                if ih < 0 || ih as usize >= dst_h {
                    continue;
                }
                for kw in 0..kernel {
                    let iw = iw0 + kw as isize;
                    if iw < 0 || iw as usize >= dst_w {
                        continue;
                    }
                    let seg = &row[(kh * kernel + kw) * c..][..c];
                    let base = (ih as usize * dst_w + iw as usize) * c;
                    for (d, &s) in dst[base..base + c].iter_mut().zip(seg) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Reorders weights `[k,k,Cin,Cout]` into the `[Cin, k·k·Cout]` matrix the
/// deconv GEMM consumes.
fn weight_by_cin<T: Scalar>(weight: &Tensor<T>, shapes: &ConvShapes) -> Vec<T> {
    let (k, c_in, c_out) = (shapes.kernel, shapes.c_in, shapes.c_out);
    let w = weight.data();
    let mut wd = vec![T::ZERO; c_in * k * k * c_out];
    for tap in 0..k * k {
        for cin in 0..c_in {
            let src = &w[(tap * c_in + cin) * c_out..][..c_out];
            let dst = &mut wd[cin * k * k * c_out + tap * c_out..][..c_out];
            dst.copy_from_slice(src);
        }
    }
    wd
}

/// Strided 2-D convolution with symmetric zero padding.
///
/// With `k=6, s=2, p=2` the spatial dims halve exactly for even inputs.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let sh = check_shapes("conv2d", input, weight, bias)?;
    let out_h = conv_out_dim(sh.in_h, sh.kernel, stride, padding)?;
    let out_w = conv_out_dim(sh.in_w, sh.kernel, stride, padding)?;
    let (patch, pixels) = (sh.kernel * sh.kernel * sh.c_in, out_h * out_w);
    let mut out = Tensor::zeros(&[sh.batch, out_h, out_w, sh.c_out]);
    let mut cols = vec![T::ZERO; pixels * patch];
    let in_stride = sh.in_h * sh.in_w * sh.c_in;
    let out_stride = pixels * sh.c_out;
    for b in 0..sh.batch {
        im2col(
            &input.data()[b * in_stride..][..in_stride],
            sh.in_h,
            sh.in_w,
            sh.c_in,
            sh.kernel,
            stride,
            padding,
            out_h,
            out_w,
            &mut cols,
        );
        let out_b = &mut out.data_mut()[b * out_stride..][..out_stride];
        gemm(
            pixels,
            patch,
            sh.c_out,
            &cols,
            false,
            weight.data(),
            false,
            out_b,
            false,
        );
        for row in out_b.chunks_exact_mut(sh.c_out) {
            for (o, &bv) in row.iter_mut().zip(bias.data()) {
                *o += bv;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`] w.r.t. input, weight, and bias given the output
/// gradient. Shapes must match the forward call.
pub fn conv2d_grads<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let sh = ConvShapes {
        batch: input.shape()[0],
        in_h: input.shape()[1],
        in_w: input.shape()[2],
        c_in: input.shape()[3],
        kernel: weight.shape()[0],
        c_out: weight.shape()[3],
    };
    let (out_h, out_w) = (grad_out.shape()[1], grad_out.shape()[2]);
    let (patch, pixels) = (sh.kernel * sh.kernel * sh.c_in, out_h * out_w);
    let mut d_input = Tensor::zeros(input.shape());
    let mut d_weight = Tensor::zeros(weight.shape());
    let mut d_bias = Tensor::zeros(&[sh.c_out]);

    for row in grad_out.data().chunks_exact(sh.c_out) {
        for (d, &g) in d_bias.data_mut().iter_mut().zip(row) {
            *d += g;
        }
    }

    let mut cols = vec![T::ZERO; pixels * patch];
    let mut d_cols = vec![T::ZERO; pixels * patch];
    let in_stride = sh.in_h * sh.in_w * sh.c_in;
    let out_stride = pixels * sh.c_out;
    for b in 0..sh.batch {
        let x_b = &input.data()[b * in_stride..][..in_stride];
        let g_b = &grad_out.data()[b * out_stride..][..out_stride];
        im2col(
            x_b, sh.in_h, sh.in_w, sh.c_in, sh.kernel, stride, padding, out_h, out_w, &mut cols,
        );
        // dW[patch, Cout] += cols^T @ gout;  layout matches [k,k,Cin,Cout].
        gemm(
            patch,
            pixels,
            sh.c_out,
            &cols,
            true,
            g_b,
            false,
            d_weight.data_mut(),
            true,
        );
        // dcols = gout @ W^T, then scatter back through the patch geometry.
        gemm(
            pixels,
            sh.c_out,
            patch,
            g_b,
            false,
            weight.data(),
            true,
            &mut d_cols,
            false,
        );
        scatter_cols(
            &d_cols,
            &mut d_input.data_mut()[b * in_stride..][..in_stride],
            sh.in_h,
            sh.in_w,
            sh.c_in,
            sh.kernel,
            stride,
            padding,
            out_h,
            out_w,
        );
    }
    (d_input, d_weight, d_bias)
}

/// Transposed convolution (the linear adjoint of [`conv2d`]); with
/// `k=6, s=2, p=2` it exactly doubles the spatial dims.
pub fn deconv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let sh = check_shapes("deconv2d", input, weight, bias)?;
    let out_h = deconv_out_dim(sh.in_h, sh.kernel, stride, padding)?;
    let out_w = deconv_out_dim(sh.in_w, sh.kernel, stride, padding)?;
    let spread = sh.kernel * sh.kernel * sh.c_out;
    let in_pixels = sh.in_h * sh.in_w;
    let wd = weight_by_cin(weight, &sh);

    let mut out = Tensor::from_fn(&[sh.batch, out_h, out_w, sh.c_out], |i| {
        bias.data()[i % sh.c_out]
    });
    let mut cols = vec![T::ZERO; in_pixels * spread];
    let in_stride = in_pixels * sh.c_in;
    let out_stride = out_h * out_w * sh.c_out;
    for b in 0..sh.batch {
        gemm(
            in_pixels,
            sh.c_in,
            spread,
            &input.data()[b * in_stride..][..in_stride],
            false,
            &wd,
            false,
            &mut cols,
            false,
        );
        scatter_cols(
            &cols,
            &mut out.data_mut()[b * out_stride..][..out_stride],
            out_h,
            out_w,
            sh.c_out,
            sh.kernel,
            stride,
            padding,
            sh.in_h,
            sh.in_w,
        );
    }
    Ok(out)
}

/// Gradients of [`deconv2d`] w.r.t. input, weight, and bias.
pub fn deconv2d_grads<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let sh = ConvShapes {
        batch: input.shape()[0],
        in_h: input.shape()[1],
        in_w: input.shape()[2],
        c_in: input.shape()[3],
        kernel: weight.shape()[0],
        c_out: weight.shape()[3],
    };
    let (out_h, out_w) = (grad_out.shape()[1], grad_out.shape()[2]);
    let spread = sh.kernel * sh.kernel * sh.c_out;
    let in_pixels = sh.in_h * sh.in_w;
    let wd = weight_by_cin(weight, &sh);

    let mut d_input = Tensor::zeros(input.shape());
    let mut d_weight = Tensor::zeros(weight.shape());
    let mut d_bias = Tensor::zeros(&[sh.c_out]);
    let mut d_wd = vec![T::ZERO; sh.c_in * spread];

    for row in grad_out.data().chunks_exact(sh.c_out) {
        for (d, &g) in d_bias.data_mut().iter_mut().zip(row) {
            *d += g;
        }
    }

    let mut g_cols = vec![T::ZERO; in_pixels * spread];
    let in_stride = in_pixels * sh.c_in;
    let out_stride = out_h * out_w * sh.c_out;
    for b in 0..sh.batch {
        let x_b = &input.data()[b * in_stride..][..in_stride];
        let g_b = &grad_out.data()[b * out_stride..][..out_stride];
        // Gather the output-gradient taps seen from each input pixel; this is
        // im2col on the *output* grid sampled at the input geometry.
        im2col(
            g_b, out_h, out_w, sh.c_out, sh.kernel, stride, padding, sh.in_h, sh.in_w, &mut g_cols,
        );
        gemm(
            in_pixels,
            spread,
            sh.c_in,
            &g_cols,
            false,
            &wd,
            true,
            &mut d_input.data_mut()[b * in_stride..][..in_stride],
            false,
        );
        gemm(
            sh.c_in,
            in_pixels,
            spread,
            x_b,
            true,
            &g_cols,
            false,
            &mut d_wd,
            true,
        );
    }

    // Un-transpose [Cin, k·k·Cout] back into the [k,k,Cin,Cout] layout.
    let dw = d_weight.data_mut();
    for tap in 0..sh.kernel * sh.kernel {
        for cin in 0..sh.c_in {
            let src = &d_wd[cin * spread + tap * sh.c_out..][..sh.c_out];
            let dst = &mut dw[(tap * sh.c_in + cin) * sh.c_out..][..sh.c_out];
            dst.copy_from_slice(src);
        }
    }
    (d_input, d_weight, d_bias)
}

/// Plain-loop definitions of both ops. Slow; these are the ground truth the
/// GEMM path is verified against.
pub mod reference {
    use super::*;

    pub fn conv2d_direct<T: Scalar>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        let sh = check_shapes("conv2d", input, weight, bias)?;
        let out_h = conv_out_dim(sh.in_h, sh.kernel, stride, padding)?;
        let out_w = conv_out_dim(sh.in_w, sh.kernel, stride, padding)?;
        let mut out = Tensor::zeros(&[sh.batch, out_h, out_w, sh.c_out]);
        let pad = padding as isize;
        for b in 0..sh.batch {
            for oh in 0..out_h {
                for ow in 0..out_w {
                    for co in 0..sh.c_out {
                        let mut acc = bias.data()[co];
                        for kh in 0..sh.kernel {
                            let ih = (oh * stride + kh) as isize - pad;
                            if ih < 0 || ih as usize >= sh.in_h {
                                continue;
                            }
                            for kw in 0..sh.kernel {
                                let iw = (ow * stride + kw) as isize - pad;
                                if iw < 0 || iw as usize >= sh.in_w {
                                    continue;
                                }
                                for ci in 0..sh.c_in {
                                    acc += input.at4(b, ih as usize, iw as usize, ci)
                                        * weight.at4(kh, kw, ci, co);
                                }
                            }
                        }
                        let idx = out.idx4(b, oh, ow, co);
                        out.data_mut()[idx] = acc;
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn deconv2d_direct<T: Scalar>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor<T>> {
        let sh = check_shapes("deconv2d", input, weight, bias)?;
        let out_h = deconv_out_dim(sh.in_h, sh.kernel, stride, padding)?;
        let out_w = deconv_out_dim(sh.in_w, sh.kernel, stride, padding)?;
        let mut out = Tensor::from_fn(&[sh.batch, out_h, out_w, sh.c_out], |i| {
            bias.data()[i % sh.c_out]
        });
        let pad = padding as isize;
        for b in 0..sh.batch {
            for ih in 0..sh.in_h {
                for iw in 0..sh.in_w {
                    for kh in 0..sh.kernel {
                        let oh = (ih * stride + kh) as isize - pad;
                        if oh < 0 || oh as usize >= out_h {
                            continue;
                        }
                        for kw in 0..sh.kernel {
                            let ow = (iw * stride + kw) as isize - pad;
                            if ow < 0 || ow as usize >= out_w {
                                continue;
                            }
                            for ci in 0..sh.c_in {
                                let x = input.at4(b, ih, iw, ci);
                                for co in 0..sh.c_out {
                                    let idx = out.idx4(b, oh as usize, ow as usize, co);
                                    out.data_mut()[idx] += x * weight.at4(kh, kw, ci, co);
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}
