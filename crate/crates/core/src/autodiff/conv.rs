//! im2col-backed 2-D convolution primitives (forward, input gradient, weight
//! gradient) shared by the conv and transposed-conv tape ops.
//!
//! Convention: cross-correlation, NCHW layout, zero padding.
//! `y[n,co,i,j] = sum_{ci,u,v} w[co,ci,u,v] * x[n,ci, i*s+u-p, j*s+v-p]`

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView4, s};

use crate::scalar::Scalar;

pub fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Output size of the matching transposed convolution.
pub fn tconv_out_size(input: usize, k: usize, stride: usize, pad: usize, out_pad: usize) -> usize {
    (input - 1) * stride + k + out_pad - 2 * pad
}

/// Column matrix of one sample: rows are (ci, u, v), columns are output positions.
fn im2col<F: Scalar>(
    x: &ArrayView4<'_, F>,
    n: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<F> {
    let (_, c_in, h, w) = x.dim();
    let mut col = Array2::<F>::zeros((c_in * k * k, ho * wo));
    for ci in 0..c_in {
        for u in 0..k {
            for v in 0..k {
                let row = (ci * k + u) * k + v;
                let mut col_row = col.row_mut(row);
                let col_slice = col_row.as_slice_mut().unwrap();
                for oy in 0..ho {
                    let iy = (oy * stride + u) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x_row = x.slice(s![n, ci, iy as usize, ..]);
                    let x_row = x_row.as_slice().unwrap();
                    let base = oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + v) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col_slice[base + ox] = x_row[ix as usize];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-add a column matrix back onto the (padded, strided) input grid.
fn col2im_add<F: Scalar>(
    col: &Array2<F>,
    gx: &mut Array4<F>,
    n: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) {
    let (_, c_in, h, w) = gx.dim();
    for ci in 0..c_in {
        for u in 0..k {
            for v in 0..k {
                let row = (ci * k + u) * k + v;
                let col_row = col.row(row);
                let col_slice = col_row.as_slice().unwrap();
                for oy in 0..ho {
                    let iy = (oy * stride + u) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let mut gx_row = gx.slice_mut(s![n, ci, iy as usize, ..]);
                    let gx_row = gx_row.as_slice_mut().unwrap();
                    let base = oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * stride + v) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        gx_row[ix as usize] += col_slice[base + ox];
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<F: Scalar>(
    x: &ArrayView4<'_, F>,
    w: &Array4<F>,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (n_batch, c_in, h, wd) = x.dim();
    let (c_out, c_in_w, kh, kw) = w.dim();
    assert_eq!(c_in, c_in_w, "conv input channels");
    assert_eq!(kh, kw, "square kernels only");
    let ho = conv_out_size(h, kh, stride, pad);
    let wo = conv_out_size(wd, kh, stride, pad);
    let w_mat = w.view().into_shape_with_order((c_out, c_in * kh * kw)).unwrap();
    let mut y = Array4::<F>::zeros((n_batch, c_out, ho, wo));
    for n in 0..n_batch {
        let col = im2col(x, n, kh, stride, pad, ho, wo);
        let y_mat = w_mat.dot(&col);
        let y_shaped = y_mat.into_shape_with_order((c_out, ho, wo)).unwrap();
        y.slice_mut(s![n, .., .., ..]).assign(&y_shaped);
    }
    y
}

/// Gradient wrt the conv input, given the declared input spatial size.
pub fn conv2d_backward_input<F: Scalar>(
    gy: &ArrayView4<'_, F>,
    w: &Array4<F>,
    stride: usize,
    pad: usize,
    h_in: usize,
    w_in: usize,
) -> Array4<F> {
    let (n_batch, c_out, ho, wo) = gy.dim();
    let (c_out_w, c_in, kh, _) = w.dim();
    assert_eq!(c_out, c_out_w, "conv output channels");
    let w_mat = w.view().into_shape_with_order((c_out, c_in * kh * kh)).unwrap();
    let mut gx = Array4::<F>::zeros((n_batch, c_in, h_in, w_in));
    for n in 0..n_batch {
        let gy_mat = gy
            .slice(s![n, .., .., ..])
            .into_shape_with_order((c_out, ho * wo))
            .unwrap()
            .to_owned();
        let gcol = w_mat.t().dot(&gy_mat);
        col2im_add(&gcol, &mut gx, n, kh, stride, pad, ho, wo);
    }
    gx
}

/// Gradient wrt the conv weights.
pub fn conv2d_backward_weight<F: Scalar>(
    x: &ArrayView4<'_, F>,
    gy: &ArrayView4<'_, F>,
    kh: usize,
    stride: usize,
    pad: usize,
) -> Array4<F> {
    let (n_batch, c_in, _, _) = x.dim();
    let (_, c_out, ho, wo) = gy.dim();
    let mut gw_mat = Array2::<F>::zeros((c_out, c_in * kh * kh));
    for n in 0..n_batch {
        let col = im2col(x, n, kh, stride, pad, ho, wo);
        let gy_mat = gy
            .slice(s![n, .., .., ..])
            .into_shape_with_order((c_out, ho * wo))
            .unwrap()
            .to_owned();
        general_mat_mul(F::one(), &gy_mat, &col.t(), F::one(), &mut gw_mat);
    }
    gw_mat
        .into_shape_with_order((c_out, c_in, kh, kh))
        .unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(x: &Array4<f64>, w: &Array4<f64>, stride: usize, pad: usize) -> Array4<f64> {
        let (nb, ci, h, wd) = x.dim();
        let (co, _, k, _) = w.dim();
        let ho = conv_out_size(h, k, stride, pad);
        let wo = conv_out_size(wd, k, stride, pad);
        let mut y = Array4::<f64>::zeros((nb, co, ho, wo));
        for n in 0..nb {
            for o in 0..co {
                for i in 0..ho {
                    for j in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for u in 0..k {
                                for v in 0..k {
                                    let iy = (i * stride + u) as isize - pad as isize;
                                    let ix = (j * stride + v) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd
                                    {
                                        acc += w[[o, c, u, v]] * x[[n, c, iy as usize, ix as usize]];
                                    }
                                }
                            }
                        }
                        y[[n, o, i, j]] = acc;
                    }
                }
            }
        }
        y
    }

    fn rand_arr(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize)) -> Array4<f64> {
        Array4::from_shape_simple_fn(shape, || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(stride, pad, k) in &[(1usize, 1usize, 3usize), (2, 1, 3), (1, 2, 5)] {
            let x = rand_arr(&mut rng, (2, 3, 8, 7));
            let w = rand_arr(&mut rng, (4, 3, k, k));
            let y = conv2d_forward(&x.view(), &w, stride, pad);
            let y_ref = naive_conv(&x, &w, stride, pad);
            let err = (&y - &y_ref).iter().map(|d| d.abs()).fold(0.0, f64::max);
            assert!(err < 1e-12, "stride={stride} pad={pad} err={err}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_arr(&mut rng, (1, 2, 6, 6));
        let w = rand_arr(&mut rng, (3, 2, 3, 3));
        let (stride, pad) = (2usize, 1usize);
        let y = conv2d_forward(&x.view(), &w, stride, pad);
        // loss = sum(y); dL/dy = 1
        let gy = Array4::from_elem(y.dim(), 1.0);
        let gx = conv2d_backward_input(&gy.view(), &w, stride, pad, 6, 6);
        let gw = conv2d_backward_weight(&x.view(), &gy.view(), 3, stride, pad);
        let eps = 1e-6;
        for idx in [[0, 0, 0, 0], [0, 1, 3, 2], [0, 0, 5, 5]] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let num = (conv2d_forward(&xp.view(), &w, stride, pad).sum()
                - conv2d_forward(&xm.view(), &w, stride, pad).sum())
                / (2.0 * eps);
            assert!((gx[idx] - num).abs() < 1e-6, "gx {idx:?}");
        }
        for idx in [[0, 0, 0, 0], [2, 1, 2, 2], [1, 0, 1, 2]] {
            let mut wp = w.clone();
            wp[idx] += eps;
            let mut wm = w.clone();
            wm[idx] -= eps;
            let num = (conv2d_forward(&x.view(), &wp, stride, pad).sum()
                - conv2d_forward(&x.view(), &wm, stride, pad).sum())
                / (2.0 * eps);
            assert!((gw[idx] - num).abs() < 1e-6, "gw {idx:?}");
        }
    }

    #[test]
    fn tconv_sizes_round_trip() {
        // stride-2 3x3 with pad 1 and output padding 1 exactly doubles, and the
        // paired conv maps back to the original size
        for h in [4usize, 8, 16] {
            let ho = tconv_out_size(h, 3, 2, 1, 1);
            assert_eq!(ho, 2 * h);
            assert_eq!(conv_out_size(ho, 3, 2, 1), h);
        }
    }
}
