//! Convolution kernels constrained to approximate spatial partial derivatives.
//!
//! A `DerivativeKernelBank` holds k*k kernels `q_(i,j)`; the moment matrix of
//! each kernel is pushed toward a one-hot target so that kernel (i,j)
//! approximates d^(i+j) / dx^i dy^j through finite-difference coefficients.
//!
//! Axis convention: kernel offset `u` runs along the first spatial axis (x,
//! the row axis) and `v` along the second (y, the column axis). Applying a
//! bank is cross-correlation, `out(x,y) = sum_{u,v} q[u,v] * h(x+u, y+v)`,
//! with symmetric zero padding of (k-1)/2 so the spatial shape is preserved.

use ndarray::{Array2, Array3, Array4, ArrayD, ArrayView2, ArrayView4, ArrayViewMut2, IxDyn, s};
use rand::Rng;

use crate::autodiff::{Tape, Var, as4};
use crate::error::{Error, Result};
use crate::phycell::LatentState;
use crate::scalar::Scalar;

/// Moment matrix M(q) of a square odd-sized kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentMatrix<F: Scalar> {
    pub entries: Array2<F>,
}

/// The k*k constrained kernels, stored row-major in (i,j): channel `i*k + j`.
#[derive(Debug, Clone)]
pub struct DerivativeKernelBank<F: Scalar> {
    k: usize,
    kernels: Array3<F>,
}

fn factorial(n: usize) -> u64 {
    (1..=n as u64).product::<u64>().max(1)
}

fn check_odd_square<F: Scalar>(kernel: &ArrayView2<'_, F>) -> Result<usize> {
    let (h, w) = kernel.dim();
    if h != w {
        return Err(Error::InvalidKernel(format!("non-square kernel {h}x{w}")));
    }
    if h % 2 == 0 || h < 3 {
        return Err(Error::InvalidKernel(format!("kernel side {h} must be odd and >= 3")));
    }
    Ok(h)
}

/// Moment matrix entries `m_(a,b) = 1/(a! b!) * sum_{u,v} u^a v^b q[u,v]`,
/// offsets running over -(k-1)/2 ..= (k-1)/2.
pub fn moment_matrix<F: Scalar>(kernel: &ArrayView2<'_, F>) -> Result<MomentMatrix<F>> {
    let k = check_odd_square(kernel)?;
    let r = (k - 1) as isize / 2;
    let mut entries = Array2::<F>::zeros((k, k));
    for a in 0..k {
        for b in 0..k {
            let norm = F::of(1.0 / (factorial(a) as f64 * factorial(b) as f64));
            let mut acc = F::zero();
            for (ui, u) in (-r..=r).enumerate() {
                for (vi, v) in (-r..=r).enumerate() {
                    let up = F::of((u as f64).powi(a as i32));
                    let vp = F::of((v as f64).powi(b as i32));
                    acc += up * vp * kernel[[ui, vi]];
                }
            }
            entries[[a, b]] = acc * norm;
        }
    }
    Ok(MomentMatrix { entries })
}

/// One-hot moment target: 1 at (i,j), 0 elsewhere.
pub fn target_delta<F: Scalar>(i: usize, j: usize, k: usize) -> Result<Array2<F>> {
    if i >= k || j >= k {
        return Err(Error::InvalidOrder { i, j, k });
    }
    let mut d = Array2::<F>::zeros((k, k));
    d[[i, j]] = F::one();
    Ok(d)
}

/// Sum of Frobenius norms `||M(q_(i,j)) - Delta_(i,j)||_F` over the bank.
pub fn moment_loss<F: Scalar>(bank: &DerivativeKernelBank<F>) -> F {
    let k = bank.k;
    let mut total = F::zero();
    for i in 0..k {
        for j in 0..k {
            let m = moment_matrix(&bank.kernel(i, j)).expect("bank kernels are valid");
            let delta = target_delta::<F>(i, j, k).expect("orders in range");
            let sq = (&m.entries - &delta).fold(F::zero(), |acc, &d| acc + d * d);
            total += sq.sqrt();
        }
    }
    total
}

impl<F: Scalar> DerivativeKernelBank<F> {
    pub fn new(k: usize, kernels: Array3<F>) -> Result<Self> {
        if k.is_multiple_of(2) || k < 3 {
            return Err(Error::InvalidKernel(format!("k = {k} must be odd and >= 3")));
        }
        if kernels.dim() != (k * k, k, k) {
            return Err(Error::InvalidKernel(format!(
                "expected {} kernels of {k}x{k}, got {:?}",
                k * k,
                kernels.dim()
            )));
        }
        Ok(DerivativeKernelBank { k, kernels })
    }

    /// Deterministic bank satisfying every moment constraint exactly: for each
    /// (i,j) the k^2 x k^2 linear system mapping kernel entries to moment
    /// entries is solved. The system is separable, so two 1-D Vandermonde
    /// solves per order suffice.
    pub fn exact(k: usize) -> Result<Self> {
        if k.is_multiple_of(2) || k < 3 {
            return Err(Error::InvalidKernel(format!("k = {k} must be odd and >= 3")));
        }
        let r = (k - 1) as isize / 2;
        // rows: moment order a (scaled by 1/a!), cols: offset u
        let mut vmat = vec![vec![0.0f64; k]; k];
        for a in 0..k {
            for (ui, u) in (-r..=r).enumerate() {
                vmat[a][ui] = (u as f64).powi(a as i32) / factorial(a) as f64;
            }
        }
        let mut weights = Vec::with_capacity(k);
        for i in 0..k {
            let mut rhs = vec![0.0f64; k];
            rhs[i] = 1.0;
            weights.push(solve_dense(&vmat, &rhs)?);
        }
        let mut kernels = Array3::<F>::zeros((k * k, k, k));
        for i in 0..k {
            for j in 0..k {
                for u in 0..k {
                    for v in 0..k {
                        kernels[[i * k + j, u, v]] = F::of(weights[i][u] * weights[j][v]);
                    }
                }
            }
        }
        Ok(DerivativeKernelBank { k, kernels })
    }

    /// Exact-constraint bank plus uniform noise of the given amplitude; the
    /// standard training initialization.
    pub fn exact_with_noise<R: Rng>(k: usize, rng: &mut R, amp: f64) -> Result<Self> {
        let mut bank = Self::exact(k)?;
        for v in bank.kernels.iter_mut() {
            *v += F::of(rng.gen_range(-amp..amp));
        }
        Ok(bank)
    }

    pub fn random<R: Rng>(k: usize, rng: &mut R, amp: f64) -> Result<Self> {
        if k.is_multiple_of(2) || k < 3 {
            return Err(Error::InvalidKernel(format!("k = {k} must be odd and >= 3")));
        }
        let kernels =
            Array3::from_shape_simple_fn((k * k, k, k), || F::of(rng.gen_range(-amp..amp)));
        Ok(DerivativeKernelBank { k, kernels })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn kernels(&self) -> &Array3<F> {
        &self.kernels
    }

    pub fn kernels_mut(&mut self) -> &mut Array3<F> {
        &mut self.kernels
    }

    pub fn kernel(&self, i: usize, j: usize) -> ArrayView2<'_, F> {
        self.kernels.slice(s![i * self.k + j, .., ..])
    }

    pub fn moment_loss(&self) -> F {
        moment_loss(self)
    }
}

/// Gauss elimination with partial pivoting; k <= 7 systems only.
fn solve_dense(a: &[Vec<f64>], b: &[f64]) -> Result<Vec<f64>> {
    let n = b.len();
    let mut m: Vec<Vec<f64>> = a.to_vec();
    let mut rhs = b.to_vec();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| m[x][col].abs().partial_cmp(&m[y][col].abs()).unwrap())
            .unwrap();
        if m[piv][col].abs() < 1e-12 {
            return Err(Error::InvalidKernel("singular moment system".into()));
        }
        m.swap(col, piv);
        rhs.swap(col, piv);
        for row in col + 1..n {
            let f = m[row][col] / m[col][col];
            for c in col..n {
                m[row][c] -= f * m[col][c];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = rhs[row];
        for c in row + 1..n {
            acc -= m[row][c] * x[c];
        }
        x[row] = acc / m[row][row];
    }
    Ok(x)
}

/// Stack of spatial derivatives: channel (i,j) of the output approximates
/// d^(i+j) h / dx^i dy^j for every input channel. Output shape (C, k^2, H, W).
pub fn apply_derivatives<F: Scalar>(
    h: &LatentState<F>,
    bank: &DerivativeKernelBank<F>,
) -> Result<Array4<F>> {
    let (c_n, hh, ww) = h.values.dim();
    let k = bank.k;
    if hh < k || ww < k {
        return Err(Error::DomainTooSmall { h: hh, w: ww, k });
    }
    let x4 = h
        .values
        .view()
        .into_shape_with_order((1, c_n, hh, ww))
        .unwrap();
    let selected: Vec<usize> = (0..k * k).collect();
    let y = depthwise_apply(&x4, &bank.kernels, &selected);
    Ok(y
        .into_shape_with_order((c_n, k * k, hh, ww))
        .unwrap())
}

// ---- numeric kernels shared by the pure API and the tape op ----

fn correlate2_into<F: Scalar>(
    x: &ArrayView2<'_, F>,
    q: &ArrayView2<'_, F>,
    out: &mut ArrayViewMut2<'_, F>,
) {
    let (h, w) = x.dim();
    let k = q.dim().0;
    let r = (k - 1) as isize / 2;
    for i in 0..h {
        let mut out_row = out.row_mut(i);
        let out_row = out_row.as_slice_mut().unwrap();
        for du in 0..k {
            let ii = i as isize + du as isize - r;
            if ii < 0 || ii >= h as isize {
                continue;
            }
            let x_row = x.row(ii as usize);
            let x_row = x_row.as_slice().unwrap();
            for dv in 0..k {
                let coef = q[[du, dv]];
                let off = dv as isize - r;
                let (j0, j1) = if off < 0 {
                    ((-off) as usize, w)
                } else {
                    (0, w - off as usize)
                };
                for j in j0..j1 {
                    out_row[j] += coef * x_row[(j as isize + off) as usize];
                }
            }
        }
    }
}

pub(crate) fn depthwise_apply<F: Scalar>(
    x: &ArrayView4<'_, F>,
    kernels: &Array3<F>,
    selected: &[usize],
) -> Array4<F> {
    let (n_b, c_n, h, w) = x.dim();
    let t_n = selected.len();
    let mut y = Array4::<F>::zeros((n_b, c_n * t_n, h, w));
    for n in 0..n_b {
        for c in 0..c_n {
            let xc = x.slice(s![n, c, .., ..]);
            for (ti, &t) in selected.iter().enumerate() {
                let q = kernels.slice(s![t, .., ..]);
                let mut out = y.slice_mut(s![n, c * t_n + ti, .., ..]);
                correlate2_into(&xc, &q, &mut out);
            }
        }
    }
    y
}

fn depthwise_backward_input<F: Scalar>(
    g: &ArrayView4<'_, F>,
    kernels: &Array3<F>,
    selected: &[usize],
    c_n: usize,
) -> Array4<F> {
    let (n_b, _, h, w) = g.dim();
    let t_n = selected.len();
    let k = kernels.dim().1;
    let r = (k - 1) as isize / 2;
    let mut gx = Array4::<F>::zeros((n_b, c_n, h, w));
    for n in 0..n_b {
        for c in 0..c_n {
            for (ti, &t) in selected.iter().enumerate() {
                let q = kernels.slice(s![t, .., ..]);
                let gq = g.slice(s![n, c * t_n + ti, .., ..]);
                for i in 0..h {
                    let g_row = gq.row(i);
                    let g_row = g_row.as_slice().unwrap();
                    for du in 0..k {
                        let ii = i as isize + du as isize - r;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let mut gx_row = gx.slice_mut(s![n, c, ii as usize, ..]);
                        let gx_row = gx_row.as_slice_mut().unwrap();
                        for dv in 0..k {
                            let coef = q[[du, dv]];
                            let off = dv as isize - r;
                            let (j0, j1) = if off < 0 {
                                ((-off) as usize, w)
                            } else {
                                (0, w - off as usize)
                            };
                            for j in j0..j1 {
                                gx_row[(j as isize + off) as usize] += coef * g_row[j];
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

fn depthwise_backward_kernels<F: Scalar>(
    x: &ArrayView4<'_, F>,
    g: &ArrayView4<'_, F>,
    kernels_dim: (usize, usize, usize),
    selected: &[usize],
) -> Array3<F> {
    let (n_b, c_n, h, w) = x.dim();
    let t_n = selected.len();
    let k = kernels_dim.1;
    let r = (k - 1) as isize / 2;
    let mut gk = Array3::<F>::zeros(kernels_dim);
    for n in 0..n_b {
        for c in 0..c_n {
            let xc = x.slice(s![n, c, .., ..]);
            for (ti, &t) in selected.iter().enumerate() {
                let gq = g.slice(s![n, c * t_n + ti, .., ..]);
                for du in 0..k {
                    for dv in 0..k {
                        let offy = du as isize - r;
                        let offx = dv as isize - r;
                        let mut acc = F::zero();
                        for i in 0..h {
                            let ii = i as isize + offy;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            let x_row = xc.row(ii as usize);
                            let x_row = x_row.as_slice().unwrap();
                            let g_row = gq.row(i);
                            let g_row = g_row.as_slice().unwrap();
                            let (j0, j1) = if offx < 0 {
                                ((-offx) as usize, w)
                            } else {
                                (0, w - offx as usize)
                            };
                            for j in j0..j1 {
                                acc += g_row[j] * x_row[(j as isize + offx) as usize];
                            }
                        }
                        gk[[t, du, dv]] += acc;
                    }
                }
            }
        }
    }
    gk
}

impl<F: Scalar> Tape<F> {
    /// Depthwise application of bank kernels: input (N,C,H,W) and bank var of
    /// shape (k^2,k,k) produce (N, C*T, H, W) where T = `selected.len()` and
    /// channel blocks are c-major. `selected` indexes kernels as i*k+j.
    pub fn depthwise_derivatives(&mut self, x: Var, bank: Var, selected: Vec<usize>) -> Var {
        let xv = as4(self.value(x));
        let kernels = self
            .value(bank)
            .view()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
            .to_owned();
        let y = depthwise_apply(&xv, &kernels, &selected);
        let kdim = kernels.dim();
        self.push(
            y.into_dyn(),
            Some(Box::new(move |t, g| {
                let g4 = as4(g);
                let xv = as4(t.value(x));
                let kernels = t
                    .value(bank)
                    .view()
                    .into_dimensionality::<ndarray::Ix3>()
                    .unwrap()
                    .to_owned();
                let c_n = xv.dim().1;
                let gx = depthwise_backward_input(&g4, &kernels, &selected, c_n);
                let gk = depthwise_backward_kernels(&xv, &g4, kdim, &selected);
                vec![(x, gx.into_dyn()), (bank, gk.into_dyn())]
            })),
        )
    }

    /// Moment-loss regularizer as a differentiable scalar over a bank var of
    /// shape (k^2,k,k).
    pub fn moment_penalty(&mut self, bank: Var, k: usize) -> Var {
        let compute = move |kernels: &ArrayD<F>| -> (F, Vec<Array2<F>>, Vec<F>) {
            let mut total = F::zero();
            let mut residuals = Vec::with_capacity(k * k);
            let mut norms = Vec::with_capacity(k * k);
            for i in 0..k {
                for j in 0..k {
                    let q = kernels
                        .view()
                        .into_dimensionality::<ndarray::Ix3>()
                        .unwrap()
                        .slice(s![i * k + j, .., ..])
                        .to_owned();
                    let m = moment_matrix(&q.view()).expect("valid kernel");
                    let delta = target_delta::<F>(i, j, k).expect("orders in range");
                    let res = &m.entries - &delta;
                    let norm = res.fold(F::zero(), |acc, &d| acc + d * d).sqrt();
                    total += norm;
                    residuals.push(res);
                    norms.push(norm);
                }
            }
            (total, residuals, norms)
        };
        let (total, _, _) = compute(self.value(bank));
        let value = ArrayD::from_elem(IxDyn(&[]), total);
        self.push(
            value,
            Some(Box::new(move |t, g| {
                let seed = g[[]];
                let kernels = t.value(bank);
                let (_, residuals, norms) = compute(kernels);
                let r = (k - 1) as isize / 2;
                let mut gk = Array3::<F>::zeros((k * k, k, k));
                let tiny = F::of(1e-12);
                for (t_idx, (res, norm)) in residuals.iter().zip(&norms).enumerate() {
                    if *norm <= tiny {
                        continue; // subgradient 0 at the kink
                    }
                    for a in 0..k {
                        for b in 0..k {
                            let coef = res[[a, b]] / *norm
                                * F::of(
                                    1.0 / (factorial(a) as f64 * factorial(b) as f64),
                                )
                                * seed;
                            if coef == F::zero() {
                                continue;
                            }
                            for (ui, u) in (-r..=r).enumerate() {
                                for (vi, v) in (-r..=r).enumerate() {
                                    let up = F::of((u as f64).powi(a as i32));
                                    let vp = F::of((v as f64).powi(b as i32));
                                    gk[[t_idx, ui, vi]] += coef * up * vp;
                                }
                            }
                        }
                    }
                }
                vec![(bank, gk.into_dyn())]
            })),
        )
    }
}
