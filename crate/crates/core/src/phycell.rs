//! The physically constrained recurrent cell: a latent prediction step built
//! from learned differential operators (three variants) and a Kalman-gated
//! correction step assimilating the encoded input.

use ndarray::{Array2, Array3, Ix4, s};
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::derivative_ops::DerivativeKernelBank;
use crate::error::{Error, Result};
use crate::nn::{Binder, Conv2d, Conv2dVars, GroupNorm, GroupNormVars};
use crate::scalar::Scalar;

/// A C_h x H_h x W_h real grid in the latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState<F: Scalar> {
    pub values: Array3<F>,
}

impl<F: Scalar> LatentState<F> {
    pub fn new(values: Array3<F>) -> Self {
        LatentState { values }
    }

    pub fn zeros(channels: usize, h: usize, w: usize) -> Self {
        LatentState { values: Array3::zeros((channels, h, w)) }
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.values.dim()
    }
}

/// Advection vectors inferred from the latent state; same spatial shape.
#[derive(Debug, Clone)]
pub struct AdvectionField<F: Scalar> {
    pub u_x: Array2<F>,
    pub u_y: Array2<F>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhyVariant {
    /// Linear combination of all 49 derivatives up to order (6,6), k = 7.
    Baseline,
    /// 9 first-degree terms plus their 45 pairwise products, k = 3.
    Quad,
    /// Advection-diffusion: 4 terms, two of them nonlinear, k = 3.
    AdvDiff,
}

impl PhyVariant {
    pub fn kernel_size(self) -> usize {
        match self {
            PhyVariant::Baseline => 7,
            PhyVariant::Quad | PhyVariant::AdvDiff => 3,
        }
    }

    /// Channels entering the 1x1 combination, per latent channel.
    pub fn term_count(self) -> usize {
        match self {
            PhyVariant::Baseline => 49,
            PhyVariant::Quad => 54,
            PhyVariant::AdvDiff => 4,
        }
    }

    /// Normalization splits the terms into this many groups.
    pub fn norm_groups(self) -> usize {
        match self {
            PhyVariant::Baseline => 7, // 7 groups of 7
            PhyVariant::Quad => 6,     // 6 groups of 9
            PhyVariant::AdvDiff => 1,  // all four terms as one group
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PhyVariant::Baseline => "baseline",
            PhyVariant::Quad => "quad",
            PhyVariant::AdvDiff => "advdiff",
        }
    }
}

impl std::str::FromStr for PhyVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(PhyVariant::Baseline),
            "quad" => Ok(PhyVariant::Quad),
            "advdiff" => Ok(PhyVariant::AdvDiff),
            other => Err(Error::InvalidConfig(format!("unknown variant '{other}'"))),
        }
    }
}

/// All learned parameters of one PhyCell.
#[derive(Debug, Clone)]
pub struct PhyCellParams<F: Scalar> {
    pub variant: PhyVariant,
    pub latent_channels: usize,
    /// theta_1: the moment-constrained kernels.
    pub bank: DerivativeKernelBank<F>,
    /// theta_2: per-latent-channel coefficients over the term stack, (C_h, T).
    pub combine: Array2<F>,
    /// Normalization of the term stack before combination; statistics are per
    /// latent channel and term group.
    pub norm: GroupNorm<F>,
    pub norm_enabled: bool,
    /// theta_3: gain contribution of the latent prediction.
    pub gain_pred: Conv2d<F>,
    /// theta_4: gain contribution of the encoded input.
    pub gain_input: Conv2d<F>,
    /// theta_U: 5x5 advection-field head (advdiff only).
    pub advect: Option<Conv2d<F>>,
}

pub struct PhyCellVars {
    pub bank: Var,
    pub combine: Var,
    pub norm: GroupNormVars,
    pub gain_pred: Conv2dVars,
    pub gain_input: Conv2dVars,
    pub advect: Option<Conv2dVars>,
}

impl<F: Scalar> PhyCellParams<F> {
    pub fn seeded<R: Rng>(variant: PhyVariant, latent_channels: usize, rng: &mut R) -> Self {
        let k = variant.kernel_size();
        let terms = variant.term_count();
        let bank = DerivativeKernelBank::exact_with_noise(k, rng, 0.01)
            .expect("odd kernel size by construction");
        let combine = Array2::from_shape_simple_fn((latent_channels, terms), || {
            F::of(rng.gen_range(-0.01..0.01))
        });
        let norm = GroupNorm::identity(latent_channels * terms, latent_channels * variant.norm_groups());
        let gain_pred = Conv2d::seeded(latent_channels, latent_channels, 3, 1, 1, true, rng);
        let gain_input = Conv2d::seeded(latent_channels, latent_channels, 3, 1, 1, false, rng);
        let advect = (variant == PhyVariant::AdvDiff)
            .then(|| Conv2d::seeded(latent_channels, 2, 5, 1, 2, false, rng));
        PhyCellParams {
            variant,
            latent_channels,
            bank,
            combine,
            norm,
            norm_enabled: true,
            gain_pred,
            gain_input,
            advect,
        }
    }

    pub fn bind(&self, b: &mut Binder<'_, F>, name: &str) -> PhyCellVars {
        PhyCellVars {
            bank: b.leaf(format!("{name}.bank"), self.bank.kernels().clone().into_dyn()),
            combine: b.leaf(format!("{name}.combine"), self.combine.clone().into_dyn()),
            norm: self.norm.bind(b, &format!("{name}.norm")),
            gain_pred: self.gain_pred.bind(b, &format!("{name}.gain_pred")),
            gain_input: self.gain_input.bind(b, &format!("{name}.gain_input")),
            advect: self.advect.as_ref().map(|c| c.bind(b, &format!("{name}.advect"))),
        }
    }

    pub fn visit(&self, name: &str, f: &mut impl FnMut(String, ndarray::ArrayViewD<'_, F>)) {
        f(format!("{name}.bank"), self.bank.kernels().view().into_dyn());
        f(format!("{name}.combine"), self.combine.view().into_dyn());
        self.norm.visit(&format!("{name}.norm"), f);
        self.gain_pred.visit(&format!("{name}.gain_pred"), f);
        self.gain_input.visit(&format!("{name}.gain_input"), f);
        if let Some(c) = &self.advect {
            c.visit(&format!("{name}.advect"), f);
        }
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut impl FnMut(String, ndarray::ArrayViewMutD<'_, F>)) {
        f(format!("{name}.bank"), self.bank.kernels_mut().view_mut().into_dyn());
        f(format!("{name}.combine"), self.combine.view_mut().into_dyn());
        self.norm.visit_mut(&format!("{name}.norm"), f);
        self.gain_pred.visit_mut(&format!("{name}.gain_pred"), f);
        self.gain_input.visit_mut(&format!("{name}.gain_input"), f);
        if let Some(c) = &mut self.advect {
            c.visit_mut(&format!("{name}.advect"), f);
        }
    }

    fn kernel_index(&self, i: usize, j: usize) -> usize {
        i * self.bank.k() + j
    }

    /// The variant's term stack (N, C_h * T, H, W), c-major.
    fn term_stack(&self, tape: &mut Tape<F>, vars: &PhyCellVars, h: Var) -> Var {
        match self.variant {
            PhyVariant::Baseline => {
                let all: Vec<usize> = (0..49).collect();
                tape.depthwise_derivatives(h, vars.bank, all)
            }
            PhyVariant::Quad => {
                let first: Vec<usize> = (0..9).collect();
                let d = tape.depthwise_derivatives(h, vars.bank, first);
                let products = tape.upper_tri_products(d, 9);
                tape.concat_terms(d, 9, products, 45)
            }
            PhyVariant::AdvDiff => {
                let advect = self.advect.as_ref().expect("advdiff has theta_U");
                let avars = vars.advect.as_ref().expect("advdiff has theta_U vars");
                let u = advect.apply(tape, avars, h);
                let u_x = tape.narrow_channels(u, 0, 1);
                let u_y = tape.narrow_channels(u, 1, 1);
                // conservative form: multiply pointwise first, then differentiate
                let flux_x = tape.mul_channel_broadcast(u_x, h);
                let flux_y = tape.mul_channel_broadcast(u_y, h);
                let d10 = tape.depthwise_derivatives(flux_x, vars.bank, vec![self.kernel_index(1, 0)]);
                let d01 = tape.depthwise_derivatives(flux_y, vars.bank, vec![self.kernel_index(0, 1)]);
                let d20 = tape.depthwise_derivatives(h, vars.bank, vec![self.kernel_index(2, 0)]);
                let d02 = tape.depthwise_derivatives(h, vars.bank, vec![self.kernel_index(0, 2)]);
                tape.interleave_terms(&[d10, d01, d20, d02])
            }
        }
    }

    /// Prediction increment Phi(h_p).
    pub fn predict_on_tape(&self, tape: &mut Tape<F>, vars: &PhyCellVars, h: Var) -> Var {
        let stack = self.term_stack(tape, vars, h);
        let normed = if self.norm_enabled {
            self.norm.apply(tape, &vars.norm, stack)
        } else {
            stack
        };
        tape.grouped_combine(normed, vars.combine)
    }

    /// Kalman gain K = sigmoid(theta_3 * h_tilde + theta_4 * encoded).
    pub fn gain_on_tape(&self, tape: &mut Tape<F>, vars: &PhyCellVars, h_tilde: Var, encoded: Var) -> Var {
        let a = self.gain_pred.apply(tape, &vars.gain_pred, h_tilde);
        let b = self.gain_input.apply(tape, &vars.gain_input, encoded);
        let sum = tape.add(a, b);
        tape.sigmoid(sum)
    }

    /// One recurrent step: returns (h_p_new, h_tilde). Without an encoded
    /// input the prediction is kept uncorrected.
    pub fn step_on_tape(
        &self,
        tape: &mut Tape<F>,
        vars: &PhyCellVars,
        h_p: Var,
        encoded: Option<Var>,
    ) -> (Var, Var) {
        let phi = self.predict_on_tape(tape, vars, h_p);
        let h_tilde = tape.add(h_p, phi);
        match encoded {
            None => (h_tilde, h_tilde),
            Some(e) => {
                let k = self.gain_on_tape(tape, vars, h_tilde, e);
                (gate_combine_on_tape(tape, k, h_tilde, e), h_tilde)
            }
        }
    }
}

/// `(1 - K) (*) h_tilde + K (*) encoded` on the tape.
pub fn gate_combine_on_tape<F: Scalar>(tape: &mut Tape<F>, k: Var, h_tilde: Var, encoded: Var) -> Var {
    let neg = tape.scale(k, -F::one());
    let one_minus = tape.add_scalar(neg, F::one());
    let kept = tape.mul(one_minus, h_tilde);
    let reset = tape.mul(k, encoded);
    tape.add(kept, reset)
}

/// Pure gating: `(1 - K) (*) h_tilde + K (*) encoded`, elementwise.
pub fn gated_combine<F: Scalar>(
    h_tilde: &Array3<F>,
    encoded: &Array3<F>,
    gain: &Array3<F>,
) -> Array3<F> {
    let mut out = Array3::zeros(h_tilde.raw_dim());
    ndarray::Zip::from(&mut out)
        .and(h_tilde)
        .and(encoded)
        .and(gain)
        .for_each(|o, &ht, &e, &k| {
            *o = (F::one() - k) * ht + k * e;
        });
    out
}

fn check_latent_shape<F: Scalar>(params: &PhyCellParams<F>, h: &LatentState<F>) -> Result<()> {
    let (c, hh, ww) = h.dim();
    if c != params.latent_channels {
        return Err(Error::DimensionMismatch {
            expected: format!("{} latent channels", params.latent_channels),
            got: format!("{c}"),
        });
    }
    let k = params.variant.kernel_size();
    if hh < k || ww < k {
        return Err(Error::DomainTooSmall { h: hh, w: ww, k });
    }
    Ok(())
}

fn run_single<F: Scalar>(
    params: &PhyCellParams<F>,
    h: &LatentState<F>,
    body: impl FnOnce(&mut Tape<F>, &PhyCellVars, Var) -> Var,
) -> Array3<F> {
    let mut tape = Tape::new();
    let mut binder = Binder::new(&mut tape);
    let vars = params.bind(&mut binder, "phycell");
    let (c, hh, ww) = h.dim();
    let input = tape.leaf(
        h.values
            .clone()
            .into_shape_with_order((1, c, hh, ww))
            .unwrap()
            .into_dyn(),
    );
    let out = body(&mut tape, &vars, input);
    let out4 = tape.value(out).view().into_dimensionality::<Ix4>().unwrap();
    let (_, co, ho, wo) = out4.dim();
    out4
        .to_owned()
        .into_shape_with_order((co, ho, wo))
        .unwrap()
}

/// Baseline prediction increment: linear combination of the 49 derivatives.
pub fn predict_baseline<F: Scalar>(h_p: &LatentState<F>, params: &PhyCellParams<F>) -> Result<LatentState<F>> {
    expect_variant(params, PhyVariant::Baseline)?;
    check_latent_shape(params, h_p)?;
    Ok(LatentState::new(run_single(params, h_p, |t, v, h| {
        params.predict_on_tape(t, v, h)
    })))
}

/// Quadratic prediction increment: 9 first-degree terms plus 45 products.
pub fn predict_quad<F: Scalar>(h_p: &LatentState<F>, params: &PhyCellParams<F>) -> Result<LatentState<F>> {
    expect_variant(params, PhyVariant::Quad)?;
    check_latent_shape(params, h_p)?;
    Ok(LatentState::new(run_single(params, h_p, |t, v, h| {
        params.predict_on_tape(t, v, h)
    })))
}

/// Advection-diffusion prediction increment.
pub fn predict_advdiff<F: Scalar>(h_p: &LatentState<F>, params: &PhyCellParams<F>) -> Result<LatentState<F>> {
    expect_variant(params, PhyVariant::AdvDiff)?;
    check_latent_shape(params, h_p)?;
    Ok(LatentState::new(run_single(params, h_p, |t, v, h| {
        params.predict_on_tape(t, v, h)
    })))
}

fn expect_variant<F: Scalar>(params: &PhyCellParams<F>, want: PhyVariant) -> Result<()> {
    if params.variant != want {
        return Err(Error::InvalidConfig(format!(
            "operation requires variant {}, params are {}",
            want.name(),
            params.variant.name()
        )));
    }
    Ok(())
}

/// Advection field u = theta_U (*) h_p, channels (u_x, u_y).
pub fn infer_advection<F: Scalar>(h_p: &LatentState<F>, params: &PhyCellParams<F>) -> Result<AdvectionField<F>> {
    expect_variant(params, PhyVariant::AdvDiff)?;
    let (c, hh, ww) = h_p.dim();
    if c != params.latent_channels {
        return Err(Error::DimensionMismatch {
            expected: format!("{} latent channels", params.latent_channels),
            got: format!("{c}"),
        });
    }
    if hh < 5 || ww < 5 {
        return Err(Error::DomainTooSmall { h: hh, w: ww, k: 5 });
    }
    let out = run_single(params, h_p, |t, v, h| {
        params
            .advect
            .as_ref()
            .unwrap()
            .apply(t, v.advect.as_ref().unwrap(), h)
    });
    Ok(AdvectionField {
        u_x: out.slice(s![0, .., ..]).to_owned(),
        u_y: out.slice(s![1, .., ..]).to_owned(),
    })
}

/// All second-degree pointwise products d_a * d_b, a <= b, row-flattened.
pub fn upper_triangular_products<F: Scalar>(d: &Array3<F>) -> Array3<F> {
    let (t_n, h, w) = d.dim();
    let p_n = t_n * (t_n + 1) / 2;
    let mut out = Array3::<F>::zeros((p_n, h, w));
    let mut idx = 0;
    for a in 0..t_n {
        for b in a..t_n {
            let prod = &d.slice(s![a, .., ..]) * &d.slice(s![b, .., ..]);
            out.slice_mut(s![idx, .., ..]).assign(&prod);
            idx += 1;
        }
    }
    out
}

/// Kalman gain field, elementwise in [0,1].
pub fn kalman_gain<F: Scalar>(
    h_tilde: &LatentState<F>,
    encoded: &LatentState<F>,
    params: &PhyCellParams<F>,
) -> Result<LatentState<F>> {
    if h_tilde.dim() != encoded.dim() {
        return Err(Error::DimensionMismatch {
            expected: format!("{:?}", h_tilde.dim()),
            got: format!("{:?}", encoded.dim()),
        });
    }
    check_latent_shape(params, h_tilde)?;
    let (c, hh, ww) = encoded.dim();
    let enc = encoded.values.clone().into_shape_with_order((1, c, hh, ww)).unwrap();
    Ok(LatentState::new(run_single(params, h_tilde, |t, v, h| {
        let e = t.leaf(enc.into_dyn());
        params.gain_on_tape(t, v, h, e)
    })))
}

/// One full PhyCell step: prediction, then (if an encoded input is present)
/// the gated correction. Returns (h_p_new, h_tilde).
pub fn phycell_step<F: Scalar>(
    h_p: &LatentState<F>,
    encoded: Option<&LatentState<F>>,
    params: &PhyCellParams<F>,
) -> Result<(LatentState<F>, LatentState<F>)> {
    check_latent_shape(params, h_p)?;
    if let Some(e) = encoded {
        if e.dim() != h_p.dim() {
            return Err(Error::DimensionMismatch {
                expected: format!("{:?}", h_p.dim()),
                got: format!("{:?}", e.dim()),
            });
        }
    }
    let mut tape = Tape::new();
    let mut binder = Binder::new(&mut tape);
    let vars = params.bind(&mut binder, "phycell");
    let (c, hh, ww) = h_p.dim();
    let input = tape.leaf(h_p.values.clone().into_shape_with_order((1, c, hh, ww)).unwrap().into_dyn());
    let enc = encoded.map(|e| {
        tape.leaf(e.values.clone().into_shape_with_order((1, c, hh, ww)).unwrap().into_dyn())
    });
    let (new, tilde) = params.step_on_tape(&mut tape, &vars, input, enc);
    let extract = |t: &Tape<F>, v: Var| -> Array3<F> {
        t.value(v)
            .view()
            .into_dimensionality::<Ix4>()
            .unwrap()
            .to_owned()
            .into_shape_with_order((c, hh, ww))
            .unwrap()
    };
    Ok((
        LatentState::new(extract(&tape, new)),
        LatentState::new(extract(&tape, tilde)),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Axis};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_latent(rng: &mut ChaCha8Rng, c: usize, n: usize) -> LatentState<f64> {
        LatentState::new(Array3::from_shape_simple_fn((c, n, n), || {
            rng.gen_range(-1.0..1.0)
        }))
    }

    /// Reference group normalization over a c-major term stack: statistics
    /// per latent channel and term group, identity affine.
    fn naive_term_norm(stack: &ndarray::Array4<f64>, groups: usize, eps: f64) -> ndarray::Array4<f64> {
        let (c_n, t_n, _, _) = stack.dim();
        let per = t_n / groups;
        let mut out = stack.clone();
        for c in 0..c_n {
            for g in 0..groups {
                let grp = stack.slice(s![c, g * per..(g + 1) * per, .., ..]);
                let m = grp.mean().unwrap();
                let var = grp.map(|v| (v - m) * (v - m)).mean().unwrap();
                let is = 1.0 / (var + eps).sqrt();
                out.slice_mut(s![c, g * per..(g + 1) * per, .., ..])
                    .mapv_inplace(|v| (v - m) * is);
            }
        }
        out
    }

    #[test]
    fn zero_coefficients_give_zero_increment() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for variant in [PhyVariant::Baseline, PhyVariant::Quad, PhyVariant::AdvDiff] {
            let mut p = PhyCellParams::<f64>::seeded(variant, 2, &mut rng);
            p.combine.fill(0.0);
            let h = rand_latent(&mut rng, 2, 8);
            let phi = match variant {
                PhyVariant::Baseline => predict_baseline(&h, &p),
                PhyVariant::Quad => predict_quad(&h, &p),
                PhyVariant::AdvDiff => predict_advdiff(&h, &p),
            }
            .unwrap();
            assert!(phi.values.iter().all(|&v| v == 0.0), "{variant:?}");
        }
    }

    #[test]
    fn baseline_identity_coefficient_reproduces_normalized_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = PhyCellParams::<f64>::seeded(PhyVariant::Baseline, 2, &mut rng);
        p.bank = DerivativeKernelBank::exact(7).unwrap();
        p.combine.fill(0.0);
        for c in 0..2 {
            p.combine[[c, 0]] = 1.0; // c_(0,0) only
        }
        let h = rand_latent(&mut rng, 2, 9);
        let phi = predict_baseline(&h, &p).unwrap();
        // compose oracles: derivative stack, then term-group normalization
        let stack = crate::derivative_ops::apply_derivatives(&h, &p.bank).unwrap();
        let normed = naive_term_norm(&stack, 7, 1e-5);
        for c in 0..2 {
            let expect = normed.slice(s![c, 0, .., ..]);
            let got = phi.values.index_axis(Axis(0), c);
            let err = (&got - &expect).iter().map(|d| d.abs()).fold(0.0, f64::max);
            assert!(err < 1e-9, "channel {c}: {err}");
        }
    }

    #[test]
    fn constant_field_has_zero_derivative_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = PhyCellParams::<f64>::seeded(PhyVariant::Baseline, 1, &mut rng);
        p.bank = DerivativeKernelBank::exact(7).unwrap();
        p.norm_enabled = false;
        p.combine.fill(0.0);
        // only non-identity terms contribute
        for t in 1..49 {
            p.combine[[0, t]] = rng.gen_range(-1.0..1.0);
        }
        let h = LatentState::new(Array3::from_elem((1, 11, 11), 0.3));
        let phi = predict_baseline(&h, &p).unwrap();
        let interior = phi.values.slice(s![0, 3..8, 3..8]);
        for v in interior.iter() {
            assert!(v.abs() < 1e-10, "{v}");
        }
    }

    #[test]
    fn quad_term_count_and_zero_input() {
        assert_eq!(PhyVariant::Quad.term_count(), 54);
        assert_eq!(9 + 9 * 10 / 2, 54);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = PhyCellParams::<f64>::seeded(PhyVariant::Quad, 2, &mut rng);
        let h = LatentState::zeros(2, 8, 8);
        let phi = predict_quad(&h, &p).unwrap();
        assert!(phi.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upper_triangular_product_layout() {
        // two channels (f, g) -> (f^2, f*g, g^2)
        let mut d = Array3::<f64>::zeros((2, 2, 2));
        d.slice_mut(s![0, .., ..]).fill(2.0);
        d.slice_mut(s![1, .., ..]).fill(3.0);
        let p = upper_triangular_products(&d);
        assert_eq!(p.dim(), (3, 2, 2));
        assert_eq!(p[[0, 0, 0]], 4.0);
        assert_eq!(p[[1, 0, 0]], 6.0);
        assert_eq!(p[[2, 0, 0]], 9.0);
        // single channel squares
        let single = Array3::from_elem((1, 2, 2), 5.0);
        let sq = upper_triangular_products(&single);
        assert_eq!(sq.dim(), (1, 2, 2));
        assert_eq!(sq[[0, 1, 1]], 25.0);
        // 9 channels -> 45 products
        let nine = Array3::<f64>::zeros((9, 2, 2));
        assert_eq!(upper_triangular_products(&nine).dim().0, 45);
    }

    #[test]
    fn advection_head_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = PhyCellParams::<f64>::seeded(PhyVariant::AdvDiff, 1, &mut rng);
        let h = rand_latent(&mut rng, 1, 8);
        // zero weights -> zero field
        p.advect.as_mut().unwrap().weight.fill(0.0);
        let u = infer_advection(&h, &p).unwrap();
        assert!(u.u_x.iter().all(|&v| v == 0.0));
        assert!(u.u_y.iter().all(|&v| v == 0.0));
        // center tap of channel 0 -> u_x = h_p, u_y = 0
        p.advect.as_mut().unwrap().weight[[0, 0, 2, 2]] = 1.0;
        let u = infer_advection(&h, &p).unwrap();
        let err = (&u.u_x - &h.values.index_axis(Axis(0), 0))
            .iter()
            .map(|d| d.abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12);
        assert!(u.u_y.iter().all(|&v| v == 0.0));
        // shape contract and the domain floor
        assert_eq!(u.u_x.dim(), (8, 8));
        let small = LatentState::zeros(1, 4, 4);
        assert!(matches!(
            infer_advection(&small, &p),
            Err(Error::DomainTooSmall { .. })
        ));
    }

    #[test]
    fn advdiff_constant_field_terms_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = PhyCellParams::<f64>::seeded(PhyVariant::AdvDiff, 1, &mut rng);
        p.bank = DerivativeKernelBank::exact(3).unwrap();
        p.norm_enabled = false;
        p.combine.fill(1.0);
        // force a constant advection field: zero weights everywhere means u = 0,
        // so u_x*h is constant (zero) and all four terms differentiate a constant
        p.advect.as_mut().unwrap().weight.fill(0.0);
        let h = LatentState::new(Array3::from_elem((1, 8, 8), 0.9));
        let phi = predict_advdiff(&h, &p).unwrap();
        let interior = phi.values.slice(s![0, 1..7, 1..7]);
        for v in interior.iter() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn gain_is_half_at_zero_params_and_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = PhyCellParams::<f64>::seeded(PhyVariant::Quad, 2, &mut rng);
        p.gain_pred.weight.fill(0.0);
        if let Some(b) = &mut p.gain_pred.bias {
            b.fill(0.0);
        }
        p.gain_input.weight.fill(0.0);
        let h = rand_latent(&mut rng, 2, 8);
        let e = rand_latent(&mut rng, 2, 8);
        let k = kalman_gain(&h, &e, &p).unwrap();
        assert!(k.values.iter().all(|&v| (v - 0.5).abs() < 1e-15));
        // any parameters keep K in [0,1] with latent-shaped output
        let p2 = PhyCellParams::<f64>::seeded(PhyVariant::Quad, 2, &mut rng);
        let k2 = kalman_gain(&h, &e, &p2).unwrap();
        assert_eq!(k2.dim(), (2, 8, 8));
        assert!(k2.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn forced_gain_identities_are_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h_tilde = rand_latent(&mut rng, 2, 6).values;
        let encoded = rand_latent(&mut rng, 2, 6).values;
        let zeros = Array3::from_elem(h_tilde.raw_dim(), 0.0);
        let ones = Array3::from_elem(h_tilde.raw_dim(), 1.0);
        let kept = gated_combine(&h_tilde, &encoded, &zeros);
        assert_eq!(kept, h_tilde);
        let reset = gated_combine(&h_tilde, &encoded, &ones);
        assert_eq!(reset, encoded);
    }

    #[test]
    fn gating_is_convex_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let h = rand_latent(&mut rng, 1, 5).values;
            let e = rand_latent(&mut rng, 1, 5).values;
            let k = Array3::from_shape_simple_fn((1, 5, 5), || rng.gen_range(0.0..=1.0));
            let out = gated_combine(&h, &e, &k);
            for ((o, &a), &b) in out.iter().zip(h.iter()).zip(e.iter()) {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                assert!(*o >= lo - 1e-12 && *o <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn step_without_input_is_persistence_under_zero_dynamics() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut p = PhyCellParams::<f64>::seeded(PhyVariant::AdvDiff, 2, &mut rng);
        p.combine.fill(0.0);
        let h = rand_latent(&mut rng, 2, 8);
        let (new, tilde) = phycell_step(&h, None, &p).unwrap();
        assert_eq!(new.values, h.values);
        assert_eq!(tilde.values, h.values);
    }

    #[test]
    fn baseline_predictor_is_linear_without_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut p = PhyCellParams::<f64>::seeded(PhyVariant::Baseline, 1, &mut rng);
        p.norm_enabled = false;
        for v in p.combine.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let h1 = rand_latent(&mut rng, 1, 9);
        let h2 = rand_latent(&mut rng, 1, 9);
        let (alpha, beta) = (0.7, -1.3);
        let mixed = LatentState::new(&(&h1.values * alpha) + &(&h2.values * beta));
        let lhs = predict_baseline(&mixed, &p).unwrap().values;
        let rhs = &(predict_baseline(&h1, &p).unwrap().values * alpha)
            + &(predict_baseline(&h2, &p).unwrap().values * beta);
        let scale = rhs.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-9);
        let err = (&lhs - &rhs).iter().map(|d| d.abs()).fold(0.0, f64::max);
        assert!(err / scale < 1e-5, "relative error {}", err / scale);
    }

    #[test]
    fn advdiff_predictor_is_nonlinear() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut p = PhyCellParams::<f64>::seeded(PhyVariant::AdvDiff, 1, &mut rng);
        p.norm_enabled = false;
        p.combine.fill(0.3);
        let h1 = rand_latent(&mut rng, 1, 8);
        let h2 = rand_latent(&mut rng, 1, 8);
        let sum = LatentState::new(&h1.values + &h2.values);
        let lhs = predict_advdiff(&sum, &p).unwrap().values;
        let rhs = &predict_advdiff(&h1, &p).unwrap().values
            + &predict_advdiff(&h2, &p).unwrap().values;
        let err = (&lhs - &rhs).iter().map(|d| d.abs()).fold(0.0, f64::max);
        assert!(err > 1e-6, "advdiff should not be additive, err {err}");
    }

    #[test]
    fn term_counts_per_variant() {
        assert_eq!(PhyVariant::Baseline.term_count(), 49);
        assert_eq!(PhyVariant::Quad.term_count(), 54);
        assert_eq!(PhyVariant::AdvDiff.term_count(), 4);
    }

    #[test]
    fn gradient_check_all_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for variant in [PhyVariant::Baseline, PhyVariant::Quad, PhyVariant::AdvDiff] {
            let p = PhyCellParams::<f64>::seeded(variant, 1, &mut rng);
            let h = rand_latent(&mut rng, 1, 8);
            let e = rand_latent(&mut rng, 1, 8);
            // analytic gradient of sum(h_p_new) wrt h_p
            let mut tape = Tape::new();
            let mut binder = Binder::new(&mut tape);
            let vars = p.bind(&mut binder, "cell");
            let hv = tape.leaf(h.values.clone().insert_axis(Axis(0)).into_dyn());
            let ev = tape.leaf(e.values.clone().insert_axis(Axis(0)).into_dyn());
            let (new, _) = p.step_on_tape(&mut tape, &vars, hv, Some(ev));
            let loss = tape.sum_all(new);
            let grads = tape.backward(loss);
            let g = grads.get(hv).unwrap().clone();
            let g = g.as_slice().unwrap();

            let eval = |hvals: &Array3<f64>| -> f64 {
                let state = LatentState::new(hvals.clone());
                let (new, _) = phycell_step(&state, Some(&e), &p).unwrap();
                new.values.sum()
            };
            let eps = 1e-4;
            let n = h.values.len();
            for flat in (0..n).step_by(n / 13 + 1) {
                let mut hp = h.values.clone();
                hp.as_slice_mut().unwrap()[flat] += eps;
                let mut hm = h.values.clone();
                hm.as_slice_mut().unwrap()[flat] -= eps;
                let num = (eval(&hp) - eval(&hm)) / (2.0 * eps);
                let ana = g[flat];
                let denom = ana.abs().max(num.abs()).max(1e-6);
                assert!(
                    (ana - num).abs() / denom <= 1e-3,
                    "{variant:?} flat {flat}: analytic {ana} vs numeric {num}"
                );
            }
        }
    }
}
