//! Shared numeric routines. Both the tape ops and the inference-time paths
//! call into these, so training and tracking run the exact same math.

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// `a (m x k) * b (k x n)`, or `a * b^T` when `trans_b` with `b: n x k`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::Dim(format!(
            "matmul expects rank-2 tensors, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (bk, n) = if trans_b {
        (b.shape()[1], b.shape()[0])
    } else {
        (b.shape()[0], b.shape()[1])
    };
    if k != bk {
        return Err(Error::Dim(format!(
            "matmul inner dimensions disagree: {:?} x {:?}{}",
            a.shape(),
            b.shape(),
            if trans_b { " (transposed)" } else { "" }
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    let (rsb, csb) = if trans_b {
        (1isize, k as isize)
    } else {
        (n as isize, 1isize)
    };
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.data().as_ptr(),
            k as isize,
            1,
            b.data().as_ptr(),
            rsb,
            csb,
            T::zero(),
            out.data_mut().as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(out)
}

/// In-place accumulate `c += alpha * a * op(b)` on flat row-major buffers.
pub fn gemm_acc<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a {
        (1isize, m as isize)
    } else {
        (k as isize, 1isize)
    };
    let (rsb, csb) = if trans_b {
        (1isize, k as isize)
    } else {
        (n as isize, 1isize)
    };
    unsafe {
        T::gemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            T::one(),
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Numerically stable row softmax over a flat `rows x cols` buffer.
pub fn softmax_rows_inplace<T: Scalar>(data: &mut [T], rows: usize, cols: usize) {
    debug_assert_eq!(data.len(), rows * cols);
    for r in 0..rows {
        let row = &mut data[r * cols..(r + 1) * cols];
        let mut max = row[0];
        for &v in row.iter() {
            max = max.maximum(v);
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Output spatial extents for a convolution axis, or an error when the
/// configuration produces an empty output.
pub fn conv_out_extent(
    input: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Result<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = input + 2 * pad;
    if padded < span {
        return Err(Error::Dim(format!(
            "convolution output is empty: input {input} (+2*{pad} pad) < dilated kernel span {span}"
        )));
    }
    Ok((padded - span) / stride + 1)
}

pub struct Conv2dDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub h_out: usize,
    pub w_out: usize,
}

pub fn conv2d_dims<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Result<Conv2dDims> {
    if x.rank() != 4 {
        return Err(Error::Dim(format!(
            "conv2d expects B x C x H x W input, got {:?}",
            x.shape()
        )));
    }
    if weight.rank() != 4 {
        return Err(Error::Dim(format!(
            "conv2d kernel must be Cout x Cin x kh x kw, got {:?}",
            weight.shape()
        )));
    }
    let (batch, c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, wc_in, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if wc_in != c_in {
        return Err(Error::Dim(format!(
            "conv2d channel mismatch: input {:?} vs kernel {:?}",
            x.shape(),
            weight.shape()
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::Validation(format!(
            "conv2d kernel extents must be odd, got {kh}x{kw}"
        )));
    }
    if stride < 1 || dilation < 1 {
        return Err(Error::Validation(format!(
            "conv2d stride and dilation must be >= 1, got stride={stride} dilation={dilation}"
        )));
    }
    let h_out = conv_out_extent(h, kh, stride, pad, dilation)?;
    let w_out = conv_out_extent(w, kw, stride, pad, dilation)?;
    Ok(Conv2dDims {
        batch,
        c_in,
        h,
        w,
        c_out,
        kh,
        kw,
        h_out,
        w_out,
    })
}

/// Unfold one image (C x H x W slice) into a `(C*kh*kw) x (h_out*w_out)`
/// column matrix for the given convolution geometry.
pub fn im2col<T: Scalar>(
    img: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
    h_out: usize,
    w_out: usize,
    cols: &mut [T],
) {
    let patch = h_out * w_out;
    debug_assert_eq!(cols.len(), c_in * kh * kw * patch);
    for c in 0..c_in {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let krow = ((c * kh + ky) * kw + kx) * patch;
                for oy in 0..h_out {
                    let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                    let dst = &mut cols[krow + oy * w_out..krow + (oy + 1) * w_out];
                    if iy < 0 || iy >= h as isize {
                        for v in dst.iter_mut() {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let base = iy as usize * w;
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            plane[base + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add the column-matrix gradient back onto an image gradient.
pub fn col2im_acc<T: Scalar>(
    cols: &[T],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dilation: usize,
    h_out: usize,
    w_out: usize,
    img: &mut [T],
) {
    let patch = h_out * w_out;
    for c in 0..c_in {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let krow = ((c * kh + ky) * kw + kx) * patch;
                for oy in 0..h_out {
                    let iy = (oy * stride + ky * dilation) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    let src = &cols[krow + oy * w_out..krow + (oy + 1) * w_out];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kx * dilation) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[base + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Batched 2D cross-correlation. Returns the output and the per-batch
/// column matrices (saved for the backward pass).
pub fn conv2d_fwd<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Result<(Tensor<T>, Vec<Vec<T>>)> {
    let d = conv2d_dims(x, weight, stride, pad, dilation)?;
    let patch = d.h_out * d.w_out;
    let krows = d.c_in * d.kh * d.kw;
    let mut out = Tensor::zeros(&[d.batch, d.c_out, d.h_out, d.w_out]);
    let mut saved_cols = Vec::with_capacity(d.batch);
    let in_stride = d.c_in * d.h * d.w;
    let out_stride = d.c_out * patch;
    for b in 0..d.batch {
        let mut cols = vec![T::zero(); krows * patch];
        im2col(
            &x.data()[b * in_stride..(b + 1) * in_stride],
            d.c_in,
            d.h,
            d.w,
            d.kh,
            d.kw,
            stride,
            pad,
            dilation,
            d.h_out,
            d.w_out,
            &mut cols,
        );
        // out_b [Cout x patch] = W [Cout x krows] * cols [krows x patch]
        gemm_acc(
            d.c_out,
            krows,
            patch,
            T::one(),
            weight.data(),
            false,
            &cols,
            false,
            &mut out.data_mut()[b * out_stride..(b + 1) * out_stride],
        );
        saved_cols.push(cols);
    }
    Ok((out, saved_cols))
}

/// Temporal convolution over the leading axis of a `T x C x H x W` tensor
/// with a 3-tap kernel `Cout x Cin x 3` and zero padding in time.
pub fn conv_time_fwd<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 || weight.rank() != 3 || weight.shape()[2] != 3 {
        return Err(Error::Dim(format!(
            "conv_time expects T x C x H x W input and Cout x Cin x 3 kernel, got {:?} and {:?}",
            x.shape(),
            weight.shape()
        )));
    }
    let (t_len, c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, wc_in) = (weight.shape()[0], weight.shape()[1]);
    if wc_in != c_in {
        return Err(Error::Dim(format!(
            "conv_time channel mismatch: input {:?} vs kernel {:?}",
            x.shape(),
            weight.shape()
        )));
    }
    let hw = h * w;
    let mut out = Tensor::zeros(&[t_len, c_out, h, w]);
    // Tap matrices W_dt are Cout x Cin slices with stride 3 over the last axis.
    let mut tap = vec![T::zero(); c_out * c_in];
    for dt in 0..3usize {
        for co in 0..c_out {
            for ci in 0..c_in {
                tap[co * c_in + ci] = weight.data()[(co * c_in + ci) * 3 + dt];
            }
        }
        for t in 0..t_len {
            let ti = t as isize + dt as isize - 1;
            if ti < 0 || ti >= t_len as isize {
                continue;
            }
            let src = &x.data()[ti as usize * c_in * hw..(ti as usize + 1) * c_in * hw];
            gemm_acc(
                c_out,
                c_in,
                hw,
                T::one(),
                &tap,
                false,
                src,
                false,
                &mut out.data_mut()[t * c_out * hw..(t + 1) * c_out * hw],
            );
        }
    }
    Ok(out)
}
