//! im2col-based convolution kernels. `conv2d` and `conv_transpose2d` are
//! exact adjoints of each other for a shared weight tensor, which the
//! backward passes below rely on.

use ndarray::{Array2, Array4, ArrayView2, ArrayView4};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return Err(Error::invalid(
            "conv2d",
            format!("kernel {k} larger than padded input {padded}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

/// (N, C, H, W) -> (N*OH*OW, C*K*K)
pub fn im2col<T: Scalar>(x: &ArrayView4<T>, k: usize, stride: usize, pad: usize) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::<T>::zeros((n * oh * ow, c * k * k));
    let xs = x.as_slice().expect("im2col input must be standard layout");
    let cs = cols.as_slice_mut().unwrap();
    let row_len = c * k * k;
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let r = ((ni * oh + oy) * ow + ox) * row_len;
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let src_row = ((ni * c + ci) * h + iy as usize) * w;
                        let dst = r + (ci * k + ky) * k;
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            cs[dst + kx] = xs[src_row + ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of `im2col`: scatter-add columns back into an image tensor.
pub fn col2im<T: Scalar>(
    cols: &ArrayView2<T>,
    shape: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> Array4<T> {
    let (n, c, h, w) = shape;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut out = Array4::<T>::zeros((n, c, h, w));
    let os = out.as_slice_mut().unwrap();
    let row_len = c * k * k;
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().unwrap();
    for ni in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let r = ((ni * oh + oy) * ow + ox) * row_len;
                for ci in 0..c {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        let dst_row = ((ni * c + ci) * h + iy as usize) * w;
                        let src = r + (ci * k + ky) * k;
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            os[dst_row + ix as usize] = os[dst_row + ix as usize] + cs[src + kx];
                        }
                    }
                }
            }
        }
    }
    out
}

/// (N*OH*OW, OC) row-major result matrix -> (N, OC, OH, OW)
fn rows_to_nchw<T: Scalar>(m: Array2<T>, n: usize, oc: usize, oh: usize, ow: usize) -> Array4<T> {
    let r = m
        .into_shape_with_order((n, oh, ow, oc))
        .expect("rows_to_nchw shape");
    r.permuted_axes([0, 3, 1, 2]).as_standard_layout().to_owned()
}

/// (N, C, H, W) -> (N*H*W, C)
fn nchw_to_rows<T: Scalar>(x: &ArrayView4<T>) -> Array2<T> {
    let (n, c, h, w) = x.dim();
    let p = x.view().permuted_axes([0, 2, 3, 1]);
    p.as_standard_layout()
        .to_owned()
        .into_shape_with_order((n * h * w, c))
        .expect("nchw_to_rows shape")
}

/// Forward convolution, weight layout (OC, C, K, K).
pub fn conv2d_forward<T: Scalar>(
    x: &ArrayView4<T>,
    w: &ArrayView4<T>,
    stride: usize,
    pad: usize,
) -> Result<Array4<T>> {
    let (n, c, h, wid) = x.dim();
    let (oc, wc, k, k2) = w.dim();
    if wc != c || k != k2 {
        return Err(Error::ShapeMismatch {
            op: "conv2d",
            lhs: vec![n, c, h, wid],
            rhs: vec![oc, wc, k, k2],
        });
    }
    let oh = conv_out_dim(h, k, stride, pad)?;
    let ow = conv_out_dim(wid, k, stride, pad)?;
    let cols = im2col(x, k, stride, pad);
    let wmat = w
        .to_shape((oc, c * k * k))
        .expect("conv weight reshape")
        .to_owned();
    let ymat = cols.dot(&wmat.t());
    Ok(rows_to_nchw(ymat, n, oc, oh, ow))
}

/// Gradients of `conv2d_forward` w.r.t. input and weight.
pub fn conv2d_backward<T: Scalar>(
    x: &ArrayView4<T>,
    w: &ArrayView4<T>,
    dy: &ArrayView4<T>,
    stride: usize,
    pad: usize,
) -> (Array4<T>, Array4<T>) {
    let (_, c, _, _) = x.dim();
    let (oc, _, k, _) = w.dim();
    let dymat = nchw_to_rows(dy);
    let cols = im2col(x, k, stride, pad);
    let wmat = w.to_shape((oc, c * k * k)).expect("conv weight reshape").to_owned();
    let dw = dymat
        .t()
        .dot(&cols)
        .into_shape_with_order((oc, c, k, k))
        .expect("dw shape");
    let dcols = dymat.dot(&wmat);
    let dx = col2im(&dcols.view(), x.dim(), k, stride, pad);
    (dx, dw)
}

/// Transposed convolution: the adjoint of `conv2d_forward` with the same
/// weight layout (A, B, K, K) maps A channels to B channels and upsamples
/// spatially: H_out = (H - 1) * stride + K - 2 * pad.
pub fn conv_transpose2d_forward<T: Scalar>(
    y: &ArrayView4<T>,
    w: &ArrayView4<T>,
    stride: usize,
    pad: usize,
) -> Result<Array4<T>> {
    let (n, a, h, wid) = y.dim();
    let (wa, b, k, k2) = w.dim();
    if wa != a || k != k2 {
        return Err(Error::ShapeMismatch {
            op: "conv_transpose2d",
            lhs: vec![n, a, h, wid],
            rhs: vec![wa, b, k, k2],
        });
    }
    let expand = |d: usize| -> Result<usize> {
        ((d - 1) * stride + k).checked_sub(2 * pad).ok_or_else(|| {
            Error::invalid("conv_transpose2d", format!("padding {pad} too large for kernel {k}"))
        })
    };
    let ho = expand(h)?;
    let wo = expand(wid)?;
    // Consistency with the adjoint conv: conv(ho) must give back h.
    if conv_out_dim(ho, k, stride, pad)? != h || conv_out_dim(wo, k, stride, pad)? != wid {
        return Err(Error::invalid(
            "conv_transpose2d",
            format!("stride {stride}/pad {pad} not invertible for input {h}x{wid}"),
        ));
    }
    let ymat = nchw_to_rows(y);
    let wmat = w.to_shape((a, b * k * k)).expect("convT weight reshape").to_owned();
    let cols = ymat.dot(&wmat);
    Ok(col2im(&cols.view(), (n, b, ho, wo), k, stride, pad))
}

/// Gradients of `conv_transpose2d_forward` w.r.t. input and weight.
pub fn conv_transpose2d_backward<T: Scalar>(
    y: &ArrayView4<T>,
    w: &ArrayView4<T>,
    dout: &ArrayView4<T>,
    stride: usize,
    pad: usize,
) -> (Array4<T>, Array4<T>) {
    let (n, a, h, wid) = y.dim();
    let (_, b, k, _) = w.dim();
    let dcols = im2col(dout, k, stride, pad);
    let wmat = w.to_shape((a, b * k * k)).expect("convT weight reshape").to_owned();
    let dymat = dcols.dot(&wmat.t());
    let dy4 = dymat
        .into_shape_with_order((n, h, wid, a))
        .expect("dy shape")
        .permuted_axes([0, 3, 1, 2])
        .as_standard_layout()
        .to_owned();
    let ymat = nchw_to_rows(y);
    let dw = ymat
        .t()
        .dot(&dcols)
        .into_shape_with_order((a, b, k, k))
        .expect("dw shape");
    (dy4, dw)
}

/// 2x2 max pooling with stride 2; returns (output, argmax flat indices into input).
pub fn maxpool2_forward<T: Scalar>(x: &ArrayView4<T>) -> Result<(Array4<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::invalid("maxpool2", format!("odd spatial dims {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Array4::<T>::zeros((n, c, oh, ow));
    let mut arg = vec![0usize; n * c * oh * ow];
    let xs = x.as_slice().expect("maxpool input must be standard layout");
    let os = out.as_slice_mut().unwrap();
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + (2 * oy) * w + 2 * ox;
                    let mut bv = xs[best];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xs[idx] > bv {
                            bv = xs[idx];
                            best = idx;
                        }
                    }
                    let o = ((ni * c + ci) * oh + oy) * ow + ox;
                    os[o] = bv;
                    arg[o] = best;
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2_backward<T: Scalar>(
    dy: &ArrayView4<T>,
    arg: &[usize],
    in_shape: (usize, usize, usize, usize),
) -> Array4<T> {
    let mut dx = Array4::<T>::zeros(in_shape);
    let dxs = dx.as_slice_mut().unwrap();
    let dys = dy.as_slice().expect("maxpool grad must be standard layout");
    for (o, &src) in arg.iter().enumerate() {
        dxs[src] = dxs[src] + dys[o];
    }
    dx
}

/// Inner product of two equally-shaped tensors (adjointness tests).
pub fn inner<T: Scalar>(a: &Array4<T>, b: &Array4<T>) -> T {
    a.iter().zip(b.iter()).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::Rng;

    fn randn(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = crate::rng::stage_rng(seed, "conv-test");
        Array4::from_shape_simple_fn(shape, || rng.gen::<f64>() - 0.5)
    }

    #[test]
    fn identity_kernel_is_identity() {
        let x = randn((2, 1, 5, 5), 0);
        let w = Array4::from_elem((1, 1, 1, 1), 1.0);
        let y = conv2d_forward(&x.view(), &w.view(), 1, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_and_transpose_are_adjoint() {
        for &(k, s, p) in &[(3usize, 1usize, 0usize), (3, 1, 1), (4, 2, 1), (5, 2, 0)] {
            // pick dims where the conv output maps back exactly
            let h = if (8 + 2 * p - k) % s == 0 { 8 } else { 9 };
            let w = h;
            let x = randn((2, 3, h, w), k as u64);
            let wt = randn((4, 3, k, k), 99 + k as u64);
            let y = conv2d_forward(&x.view(), &wt.view(), s, p).unwrap();
            let u = randn(y.dim(), 7);
            let xt = conv_transpose2d_forward(&u.view(), &wt.view(), s, p).unwrap();
            assert_eq!(xt.dim(), x.dim());
            let lhs = inner(&y, &u);
            let rhs = inner(&x, &xt);
            assert!((lhs - rhs).abs() < 1e-6, "k={k} s={s} p={p}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let x = randn((1, 2, 6, 6), 1);
        let w = randn((4, 3, 3, 3), 2);
        let err = conv2d_forward(&x.view(), &w.view(), 1, 0).unwrap_err();
        assert!(err.to_string().contains("conv2d"));
    }
}
