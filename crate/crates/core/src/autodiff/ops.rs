//! Structured tape operations: convolutions, normalization, channel
//! bookkeeping and the loss heads.

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView4, Ix1, Ix2, Ix3, Ix4, IxDyn, s};

use super::conv;
use super::tape::{Tape, Var};
use crate::scalar::Scalar;

pub(crate) fn as4<F: Scalar>(a: &ArrayD<F>) -> ArrayView4<'_, F> {
    a.view().into_dimensionality::<Ix4>().expect("rank-4 tensor")
}

impl<F: Scalar> Tape<F> {
    /// Per-channel bias over an (N,C,H,W) map; `b` has shape (C,).
    pub fn bias_add(&mut self, x: Var, b: Var) -> Var {
        let xv = as4(self.value(x));
        let bv = self.value(b).view().into_dimensionality::<Ix1>().unwrap();
        let mut y = xv.to_owned();
        for c in 0..bv.len() {
            y.slice_mut(s![.., c, .., ..]).mapv_inplace(|v| v + bv[c]);
        }
        self.push(
            y.into_dyn(),
            Some(Box::new(move |_t, g| {
                let g4 = as4(g);
                let c_n = g4.dim().1;
                let mut gb = Array1::<F>::zeros(c_n);
                for c in 0..c_n {
                    gb[c] = g4.slice(s![.., c, .., ..]).sum();
                }
                vec![(x, g.clone()), (b, gb.into_dyn())]
            })),
        )
    }

    /// Multiply a single-channel map (N,1,H,W) onto every channel of (N,C,H,W).
    pub fn mul_channel_broadcast(&mut self, field: Var, x: Var) -> Var {
        let fv = as4(self.value(field));
        let xv = as4(self.value(x));
        assert_eq!(fv.dim().1, 1, "broadcast field must have one channel");
        let (n_b, c_n, h, w) = xv.dim();
        let mut y = Array4::<F>::zeros((n_b, c_n, h, w));
        for n in 0..n_b {
            let f = fv.slice(s![n, 0, .., ..]);
            for c in 0..c_n {
                let prod = &xv.slice(s![n, c, .., ..]) * &f;
                y.slice_mut(s![n, c, .., ..]).assign(&prod);
            }
        }
        self.push(
            y.into_dyn(),
            Some(Box::new(move |t, g| {
                let g4 = as4(g);
                let fv = as4(t.value(field));
                let xv = as4(t.value(x));
                let (n_b, c_n, h, w) = xv.dim();
                let mut gx = Array4::<F>::zeros((n_b, c_n, h, w));
                let mut gf = Array4::<F>::zeros((n_b, 1, h, w));
                for n in 0..n_b {
                    let f = fv.slice(s![n, 0, .., ..]);
                    let mut gf_n = gf.slice_mut(s![n, 0, .., ..]);
                    for c in 0..c_n {
                        let gc = g4.slice(s![n, c, .., ..]);
                        gx.slice_mut(s![n, c, .., ..]).assign(&(&gc * &f));
                        gf_n += &(&gc * &xv.slice(s![n, c, .., ..]));
                    }
                }
                vec![(field, gf.into_dyn()), (x, gx.into_dyn())]
            })),
        )
    }

    /// 2-D convolution, optionally with bias; shape-preserving when
    /// `pad = (k-1)/2` and `stride = 1`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Var {
        let xv = as4(self.value(x));
        let wv = self
            .value(w)
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_owned();
        let (h_in, w_in) = (xv.dim().2, xv.dim().3);
        let k = wv.dim().2;
        let mut y = conv::conv2d_forward(&xv, &wv, stride, pad);
        if let Some(b) = bias {
            let bv = self.value(b).view().into_dimensionality::<Ix1>().unwrap();
            for c in 0..bv.len() {
                y.slice_mut(s![.., c, .., ..]).mapv_inplace(|v| v + bv[c]);
            }
        }
        self.push(
            y.into_dyn(),
            Some(Box::new(move |t, g| {
                let g4 = as4(g);
                let wv = t.value(w).view().into_dimensionality::<Ix4>().unwrap().to_owned();
                let xv = as4(t.value(x));
                let gx = conv::conv2d_backward_input(&g4, &wv, stride, pad, h_in, w_in);
                let gw = conv::conv2d_backward_weight(&xv, &g4, k, stride, pad);
                let mut out = vec![(x, gx.into_dyn()), (w, gw.into_dyn())];
                if let Some(b) = bias {
                    let c_out = g4.dim().1;
                    let mut gb = Array1::<F>::zeros(c_out);
                    for c in 0..c_out {
                        gb[c] = g4.slice(s![.., c, .., ..]).sum();
                    }
                    out.push((b, gb.into_dyn()));
                }
                out
            })),
        )
    }

    /// Transposed 2-D convolution; weight layout (C_in, C_out, k, k).
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Var {
        let xv = as4(self.value(x));
        let wv = self
            .value(w)
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_owned();
        let k = wv.dim().2;
        let (h_in, w_in) = (xv.dim().2, xv.dim().3);
        let h_out = conv::tconv_out_size(h_in, k, stride, pad, out_pad);
        let w_out = conv::tconv_out_size(w_in, k, stride, pad, out_pad);
        // forward of a tconv is the input-gradient of the paired conv
        let mut y = conv::conv2d_backward_input(&xv, &wv, stride, pad, h_out, w_out);
        if let Some(b) = bias {
            let bv = self.value(b).view().into_dimensionality::<Ix1>().unwrap();
            for c in 0..bv.len() {
                y.slice_mut(s![.., c, .., ..]).mapv_inplace(|v| v + bv[c]);
            }
        }
        self.push(
            y.into_dyn(),
            Some(Box::new(move |t, g| {
                let g4 = as4(g);
                let wv = t.value(w).view().into_dimensionality::<Ix4>().unwrap().to_owned();
                let xv = as4(t.value(x));
                let gx = conv::conv2d_forward(&g4, &wv, stride, pad);
                let gw = conv::conv2d_backward_weight(&g4, &xv, k, stride, pad);
                let mut out = vec![(x, gx.into_dyn()), (w, gw.into_dyn())];
                if let Some(b) = bias {
                    let c_out = g4.dim().1;
                    let mut gb = Array1::<F>::zeros(c_out);
                    for c in 0..c_out {
                        gb[c] = g4.slice(s![.., c, .., ..]).sum();
                    }
                    out.push((b, gb.into_dyn()));
                }
                out
            })),
        )
    }

    /// Group normalization over (N,C,H,W): `groups` must divide C; statistics
    /// are per (sample, group), affine scale/shift per channel.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: F) -> Var {
        let xv = as4(self.value(x));
        let (n_b, c_n, h, w) = xv.dim();
        assert!(c_n % groups == 0, "groups must divide channels");
        let cg = c_n / groups;
        let m = F::of_usize(cg * h * w);
        let gv = self.value(gamma).view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let bv = self.value(beta).view().into_dimensionality::<Ix1>().unwrap().to_owned();

        let mut mean = Array2::<F>::zeros((n_b, groups));
        let mut inv_std = Array2::<F>::zeros((n_b, groups));
        let mut y = Array4::<F>::zeros((n_b, c_n, h, w));
        for n in 0..n_b {
            for g in 0..groups {
                let grp = xv.slice(s![n, g * cg..(g + 1) * cg, .., ..]);
                let mu = grp.sum() / m;
                let var = grp.fold(F::zero(), |acc, &v| acc + (v - mu) * (v - mu)) / m;
                let is = F::one() / (var + eps).sqrt();
                mean[[n, g]] = mu;
                inv_std[[n, g]] = is;
                for c in g * cg..(g + 1) * cg {
                    let yn = xv.slice(s![n, c, .., ..]).mapv(|v| (v - mu) * is * gv[c] + bv[c]);
                    y.slice_mut(s![n, c, .., ..]).assign(&yn);
                }
            }
        }
        self.push(
            y.into_dyn(),
            Some(Box::new(move |t, g| {
                let g4 = as4(g);
                let xv = as4(t.value(x));
                let gv = t.value(gamma).view().into_dimensionality::<Ix1>().unwrap().to_owned();
                let (n_b, c_n, h, w) = xv.dim();
                let cg = c_n / groups;
                let m = F::of_usize(cg * h * w);
                let mut gx = Array4::<F>::zeros((n_b, c_n, h, w));
                let mut ggamma = Array1::<F>::zeros(c_n);
                let mut gbeta = Array1::<F>::zeros(c_n);
                for n in 0..n_b {
                    for grp_i in 0..groups {
                        let mu = mean[[n, grp_i]];
                        let is = inv_std[[n, grp_i]];
                        let range = grp_i * cg..(grp_i + 1) * cg;
                        // x_hat and gamma-scaled upstream grad for the group
                        let xh = xv
                            .slice(s![n, range.clone(), .., ..])
                            .mapv(|v| (v - mu) * is);
                        let mut gp = g4.slice(s![n, range.clone(), .., ..]).to_owned();
                        for (ci, c) in range.clone().enumerate() {
                            let gslice = g4.slice(s![n, c, .., ..]);
                            ggamma[c] += (&gslice * &xh.slice(s![ci, .., ..])).sum();
                            gbeta[c] += gslice.sum();
                            gp.slice_mut(s![ci, .., ..]).mapv_inplace(|v| v * gv[c]);
                        }
                        let mean_gp = gp.sum() / m;
                        let mean_gpxh = (&gp * &xh).sum() / m;
                        let gxg = (&gp - mean_gp - &(&xh * mean_gpxh)).mapv(|v| v * is);
                        gx.slice_mut(s![n, range, .., ..]).assign(&gxg);
                    }
                }
                vec![
                    (x, gx.into_dyn()),
                    (gamma, ggamma.into_dyn()),
                    (beta, gbeta.into_dyn()),
                ]
            })),
        )
    }

    /// Keep channels [start, start+len) of an (N,C,H,W) map.
    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = as4(self.value(x));
        let y = xv.slice(s![.., start..start + len, .., ..]).to_owned();
        self.push(
            y.into_dyn(),
            Some(Box::new(move |t, g| {
                let xdim = t.value(x).raw_dim();
                let mut gx = Array4::<F>::zeros(
                    as4(t.value(x)).dim(),
                );
                let _ = xdim;
                gx.slice_mut(s![.., start..start + len, .., ..]).assign(&as4(g));
                vec![(x, gx.into_dyn())]
            })),
        )
    }

    /// Interleave T per-channel term maps, each (N,C,H,W), into a c-major
    /// stack (N, C*T, H, W): channel block of latent channel c holds the T
    /// terms of that channel in order.
    pub fn interleave_terms(&mut self, parts: &[Var]) -> Var {
        let t_n = parts.len();
        assert!(t_n > 0);
        let first = as4(self.value(parts[0]));
        let (n_b, c_n, h, w) = first.dim();
        let mut y = Array4::<F>::zeros((n_b, c_n * t_n, h, w));
        for (ti, &p) in parts.iter().enumerate() {
            let pv = as4(self.value(p));
            assert_eq!(pv.dim(), (n_b, c_n, h, w));
            for c in 0..c_n {
                y.slice_mut(s![.., c * t_n + ti, .., ..])
                    .assign(&pv.slice(s![.., c, .., ..]));
            }
        }
        let parts_owned: Vec<Var> = parts.to_vec();
        self.push(
            y.into_dyn(),
            Some(Box::new(move |_, g| {
                let g4 = as4(g);
                let (n_b, ct, h, w) = g4.dim();
                let t_n = parts_owned.len();
                let c_n = ct / t_n;
                parts_owned
                    .iter()
                    .enumerate()
                    .map(|(ti, &p)| {
                        let mut gp = Array4::<F>::zeros((n_b, c_n, h, w));
                        for c in 0..c_n {
                            gp.slice_mut(s![.., c, .., ..])
                                .assign(&g4.slice(s![.., c * t_n + ti, .., ..]));
                        }
                        (p, gp.into_dyn())
                    })
                    .collect()
            })),
        )
    }

    /// Merge two c-major term stacks with `ta` and `tb` terms per channel into
    /// one with `ta + tb` terms per channel.
    pub fn concat_terms(&mut self, a: Var, ta: usize, b: Var, tb: usize) -> Var {
        let av = as4(self.value(a));
        let bv = as4(self.value(b));
        let (n_b, cta, h, w) = av.dim();
        let c_n = cta / ta;
        assert_eq!(bv.dim(), (n_b, c_n * tb, h, w));
        let t_n = ta + tb;
        let mut y = Array4::<F>::zeros((n_b, c_n * t_n, h, w));
        for c in 0..c_n {
            y.slice_mut(s![.., c * t_n..c * t_n + ta, .., ..])
                .assign(&av.slice(s![.., c * ta..(c + 1) * ta, .., ..]));
            y.slice_mut(s![.., c * t_n + ta..(c + 1) * t_n, .., ..])
                .assign(&bv.slice(s![.., c * tb..(c + 1) * tb, .., ..]));
        }
        self.push(
            y.into_dyn(),
            Some(Box::new(move |_, g| {
                let g4 = as4(g);
                let (n_b, ctn, h, w) = g4.dim();
                let t_n = ta + tb;
                let c_n = ctn / t_n;
                let mut ga = Array4::<F>::zeros((n_b, c_n * ta, h, w));
                let mut gb = Array4::<F>::zeros((n_b, c_n * tb, h, w));
                for c in 0..c_n {
                    ga.slice_mut(s![.., c * ta..(c + 1) * ta, .., ..])
                        .assign(&g4.slice(s![.., c * t_n..c * t_n + ta, .., ..]));
                    gb.slice_mut(s![.., c * tb..(c + 1) * tb, .., ..])
                        .assign(&g4.slice(s![.., c * t_n + ta..(c + 1) * t_n, .., ..]));
                }
                vec![(a, ga.into_dyn()), (b, gb.into_dyn())]
            })),
        )
    }

    /// Pointwise second-degree terms of a c-major stack with T terms per
    /// channel: all products d_a*d_b with a <= b, row-flattened, giving
    /// T(T+1)/2 product terms per channel.
    pub fn upper_tri_products(&mut self, x: Var, terms: usize) -> Var {
        let xv = as4(self.value(x));
        let (n_b, ct, h, w) = xv.dim();
        let c_n = ct / terms;
        let pairs: Vec<(usize, usize)> = (0..terms)
            .flat_map(|a| (a..terms).map(move |b| (a, b)))
            .collect();
        let p_n = pairs.len();
        let mut y = Array4::<F>::zeros((n_b, c_n * p_n, h, w));
        for c in 0..c_n {
            for (pi, &(a, b)) in pairs.iter().enumerate() {
                let prod = &xv.slice(s![.., c * terms + a, .., ..])
                    * &xv.slice(s![.., c * terms + b, .., ..]);
                y.slice_mut(s![.., c * p_n + pi, .., ..]).assign(&prod);
            }
        }
        self.push(
            y.into_dyn(),
            Some(Box::new(move |t, g| {
                let g4 = as4(g);
                let xv = as4(t.value(x));
                let (n_b, ct, h, w) = xv.dim();
                let c_n = ct / terms;
                let pairs: Vec<(usize, usize)> = (0..terms)
                    .flat_map(|a| (a..terms).map(move |b| (a, b)))
                    .collect();
                let p_n = pairs.len();
                let mut gx = Array4::<F>::zeros((n_b, ct, h, w));
                let _ = (n_b, h, w);
                for c in 0..c_n {
                    for (pi, &(a, b)) in pairs.iter().enumerate() {
                        let gp = g4.slice(s![.., c * p_n + pi, .., ..]);
                        let xa = xv.slice(s![.., c * terms + a, .., ..]).to_owned();
                        let xb = xv.slice(s![.., c * terms + b, .., ..]).to_owned();
                        {
                            let mut ga = gx.slice_mut(s![.., c * terms + a, .., ..]);
                            ga += &(&gp * &xb);
                        }
                        {
                            let mut gb = gx.slice_mut(s![.., c * terms + b, .., ..]);
                            gb += &(&gp * &xa);
                        }
                    }
                }
                vec![(x, gx.into_dyn())]
            })),
        )
    }

    /// Per-latent-channel 1x1 combination: coefficients (C, T) collapse a
    /// c-major term stack (N, C*T, H, W) to (N, C, H, W).
    pub fn grouped_combine(&mut self, x: Var, coeff: Var) -> Var {
        let xv = as4(self.value(x));
        let cv = self.value(coeff).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let (n_b, ct, h, w) = xv.dim();
        let (c_n, t_n) = cv.dim();
        assert_eq!(ct, c_n * t_n, "term stack vs coefficient shape");
        let mut y = Array4::<F>::zeros((n_b, c_n, h, w));
        for c in 0..c_n {
            for t in 0..t_n {
                let hw = xv.slice(s![.., c * t_n + t, .., ..]).mapv(|v| v * cv[[c, t]]);
                let mut yc = y.slice_mut(s![.., c, .., ..]);
                yc += &hw;
            }
        }
        self.push(
            y.into_dyn(),
            Some(Box::new(move |t, g| {
                let g4 = as4(g);
                let xv = as4(t.value(x));
                let cv = t
                    .value(coeff)
                    .view()
                    .into_dimensionality::<Ix2>()
                    .unwrap()
                    .to_owned();
                let (n_b, ct, h, w) = xv.dim();
                let (c_n, t_n) = cv.dim();
                let mut gx = Array4::<F>::zeros((n_b, ct, h, w));
                let mut gc = Array2::<F>::zeros((c_n, t_n));
                for c in 0..c_n {
                    let gch = g4.slice(s![.., c, .., ..]);
                    for ti in 0..t_n {
                        gx.slice_mut(s![.., c * t_n + ti, .., ..])
                            .assign(&gch.mapv(|v| v * cv[[c, ti]]));
                        gc[[c, ti]] = (&gch * &xv.slice(s![.., c * t_n + ti, .., ..])).sum();
                    }
                }
                vec![(x, gx.into_dyn()), (coeff, gc.into_dyn())]
            })),
        )
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(&mut self, pred: Var, target: ArrayD<F>) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "mse shapes");
        let n = F::of_usize(pv.len());
        let diff = pv - &target;
        let loss = diff.fold(F::zero(), |acc, &d| acc + d * d) / n;
        let value = ArrayD::from_elem(IxDyn(&[]), loss);
        self.push(
            value,
            Some(Box::new(move |t, g| {
                let seed = g[[]];
                let pv = t.value(pred);
                let n = F::of_usize(pv.len());
                let two = F::of(2.0);
                let gp = (pv - &target).mapv(|d| d * two / n * seed);
                vec![(pred, gp)]
            })),
        )
    }

    /// Class-weighted two-class cross-entropy over pixel logits.
    ///
    /// `logits` is (N,2,H,W) with channel 0 = below, 1 = above; `truth` is
    /// (N,H,W) with entries 0/1; class-1 terms scale by `weight_one`. The
    /// result is the mean over all pixels (unweighted denominator).
    pub fn weighted_ce_loss(&mut self, logits: Var, truth: ArrayD<F>, weight_one: F) -> Var {
        let lv = as4(self.value(logits));
        let (n_b, two, h, w) = lv.dim();
        assert_eq!(two, 2, "two-class logits");
        let tv = truth.view().into_dimensionality::<Ix3>().unwrap().to_owned();
        assert_eq!(tv.dim(), (n_b, h, w), "truth shape");
        let count = F::of_usize(n_b * h * w);
        let mut total = F::zero();
        for n in 0..n_b {
            for i in 0..h {
                for j in 0..w {
                    let l0 = lv[[n, 0, i, j]];
                    let l1 = lv[[n, 1, i, j]];
                    let m = l0.max(l1);
                    let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
                    let one = tv[[n, i, j]] > F::of(0.5);
                    let (ly, wy) = if one { (l1, weight_one) } else { (l0, F::one()) };
                    total += wy * (lse - ly);
                }
            }
        }
        let value = ArrayD::from_elem(IxDyn(&[]), total / count);
        self.push(
            value,
            Some(Box::new(move |t, g| {
                let seed = g[[]] / count;
                let lv = as4(t.value(logits));
                let (n_b, _, h, w) = lv.dim();
                let mut gl = Array4::<F>::zeros((n_b, 2, h, w));
                for n in 0..n_b {
                    for i in 0..h {
                        for j in 0..w {
                            let l0 = lv[[n, 0, i, j]];
                            let l1 = lv[[n, 1, i, j]];
                            let m = l0.max(l1);
                            let e0 = (l0 - m).exp();
                            let e1 = (l1 - m).exp();
                            let z = e0 + e1;
                            let p0 = e0 / z;
                            let p1 = e1 / z;
                            let one = tv[[n, i, j]] > F::of(0.5);
                            let wy = if one { weight_one } else { F::one() };
                            let y0 = if one { F::zero() } else { F::one() };
                            let y1 = F::one() - y0;
                            gl[[n, 0, i, j]] = seed * wy * (p0 - y0);
                            gl[[n, 1, i, j]] = seed * wy * (p1 - y1);
                        }
                    }
                }
                vec![(logits, gl.into_dyn())]
            })),
        )
    }
}
