//! Layer parameter containers and the glue that binds them onto a tape.

use ndarray::{Array1, Array4, ArrayD, ArrayViewD, ArrayViewMutD};
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::scalar::Scalar;

/// Interns parameter arrays as tape leaves and remembers their names so
/// gradients can be collected per parameter after the backward sweep.
pub struct Binder<'a, F: Scalar> {
    pub tape: &'a mut Tape<F>,
    named: Vec<(String, Var)>,
}

impl<'a, F: Scalar> Binder<'a, F> {
    pub fn new(tape: &'a mut Tape<F>) -> Self {
        Binder { tape, named: Vec::new() }
    }

    pub fn leaf(&mut self, name: String, value: ArrayD<F>) -> Var {
        let v = self.tape.leaf(value);
        self.named.push((name, v));
        v
    }

    pub fn named(&self) -> &[(String, Var)] {
        &self.named
    }
}

fn uniform<F: Scalar, R: Rng>(rng: &mut R, bound: f64) -> F {
    F::of(rng.gen_range(-bound..bound))
}

#[derive(Debug, Clone)]
pub struct Conv2d<F: Scalar> {
    pub weight: Array4<F>, // (C_out, C_in, k, k)
    pub bias: Option<Array1<F>>,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2dVars {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl<F: Scalar> Conv2d<F> {
    pub fn seeded<R: Rng>(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        Conv2d {
            weight: Array4::from_shape_simple_fn((c_out, c_in, k, k), || uniform(rng, bound)),
            bias: with_bias.then(|| Array1::zeros(c_out)),
            stride,
            pad,
        }
    }

    pub fn zeros(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, with_bias: bool) -> Self {
        Conv2d {
            weight: Array4::zeros((c_out, c_in, k, k)),
            bias: with_bias.then(|| Array1::zeros(c_out)),
            stride,
            pad,
        }
    }

    pub fn bind(&self, b: &mut Binder<'_, F>, name: &str) -> Conv2dVars {
        Conv2dVars {
            weight: b.leaf(format!("{name}.weight"), self.weight.clone().into_dyn()),
            bias: self
                .bias
                .as_ref()
                .map(|bias| b.leaf(format!("{name}.bias"), bias.clone().into_dyn())),
        }
    }

    pub fn apply(&self, tape: &mut Tape<F>, vars: &Conv2dVars, x: Var) -> Var {
        tape.conv2d(x, vars.weight, vars.bias, self.stride, self.pad)
    }

    pub fn visit(&self, name: &str, f: &mut impl FnMut(String, ArrayViewD<'_, F>)) {
        f(format!("{name}.weight"), self.weight.view().into_dyn());
        if let Some(b) = &self.bias {
            f(format!("{name}.bias"), b.view().into_dyn());
        }
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut impl FnMut(String, ArrayViewMutD<'_, F>)) {
        f(format!("{name}.weight"), self.weight.view_mut().into_dyn());
        if let Some(b) = &mut self.bias {
            f(format!("{name}.bias"), b.view_mut().into_dyn());
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvTranspose2d<F: Scalar> {
    pub weight: Array4<F>, // (C_in, C_out, k, k)
    pub bias: Option<Array1<F>>,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
}

impl<F: Scalar> ConvTranspose2d<F> {
    pub fn seeded<R: Rng>(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
        with_bias: bool,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
        ConvTranspose2d {
            weight: Array4::from_shape_simple_fn((c_in, c_out, k, k), || uniform(rng, bound)),
            bias: with_bias.then(|| Array1::zeros(c_out)),
            stride,
            pad,
            out_pad,
        }
    }

    pub fn bind(&self, b: &mut Binder<'_, F>, name: &str) -> Conv2dVars {
        Conv2dVars {
            weight: b.leaf(format!("{name}.weight"), self.weight.clone().into_dyn()),
            bias: self
                .bias
                .as_ref()
                .map(|bias| b.leaf(format!("{name}.bias"), bias.clone().into_dyn())),
        }
    }

    pub fn apply(&self, tape: &mut Tape<F>, vars: &Conv2dVars, x: Var) -> Var {
        tape.conv_transpose2d(x, vars.weight, vars.bias, self.stride, self.pad, self.out_pad)
    }

    pub fn visit(&self, name: &str, f: &mut impl FnMut(String, ArrayViewD<'_, F>)) {
        f(format!("{name}.weight"), self.weight.view().into_dyn());
        if let Some(b) = &self.bias {
            f(format!("{name}.bias"), b.view().into_dyn());
        }
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut impl FnMut(String, ArrayViewMutD<'_, F>)) {
        f(format!("{name}.weight"), self.weight.view_mut().into_dyn());
        if let Some(b) = &mut self.bias {
            f(format!("{name}.bias"), b.view_mut().into_dyn());
        }
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm<F: Scalar> {
    pub scale: Array1<F>,
    pub shift: Array1<F>,
    pub groups: usize,
    pub eps: F,
}

#[derive(Debug, Clone, Copy)]
pub struct GroupNormVars {
    pub scale: Var,
    pub shift: Var,
}

impl<F: Scalar> GroupNorm<F> {
    pub fn identity(channels: usize, groups: usize) -> Self {
        assert!(channels.is_multiple_of(groups), "groups must divide channels");
        GroupNorm {
            scale: Array1::ones(channels),
            shift: Array1::zeros(channels),
            groups,
            eps: F::of(1e-5),
        }
    }

    pub fn bind(&self, b: &mut Binder<'_, F>, name: &str) -> GroupNormVars {
        GroupNormVars {
            scale: b.leaf(format!("{name}.scale"), self.scale.clone().into_dyn()),
            shift: b.leaf(format!("{name}.shift"), self.shift.clone().into_dyn()),
        }
    }

    pub fn apply(&self, tape: &mut Tape<F>, vars: &GroupNormVars, x: Var) -> Var {
        tape.group_norm(x, vars.scale, vars.shift, self.groups, self.eps)
    }

    pub fn visit(&self, name: &str, f: &mut impl FnMut(String, ArrayViewD<'_, F>)) {
        f(format!("{name}.scale"), self.scale.view().into_dyn());
        f(format!("{name}.shift"), self.shift.view().into_dyn());
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut impl FnMut(String, ArrayViewMutD<'_, F>)) {
        f(format!("{name}.scale"), self.scale.view_mut().into_dyn());
        f(format!("{name}.shift"), self.shift.view_mut().into_dyn());
    }
}

/// Largest divisor of `channels` not exceeding `max_groups`.
pub fn norm_groups(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels))
        .rev()
        .find(|g| channels.is_multiple_of(*g))
        .unwrap_or(1)
}
