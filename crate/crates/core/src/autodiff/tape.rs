//! Minimal reverse-mode autodiff over `ndarray` tensors.
//!
//! A `Tape` is a linear record of operations; `Var` indexes a node. Parents
//! always precede children, so one reverse sweep propagates gradients. Nodes
//! store dynamic-rank arrays: rank 4 (N,C,H,W) for feature maps, rank 3 for
//! kernel banks, rank 2 for combination coefficients, rank 1 for biases and
//! rank 0 for losses.

use ndarray::{ArrayD, IxDyn};

use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackwardFn<F> = Box<dyn Fn(&Tape<F>, &ArrayD<F>) -> Vec<(Var, ArrayD<F>)>>;

struct Node<F: Scalar> {
    value: ArrayD<F>,
    backward: Option<BackwardFn<F>>,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

/// Gradients keyed by `Var`, produced by `Tape::backward`.
pub struct Gradients<F: Scalar> {
    grads: Vec<Option<ArrayD<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &ArrayD<F> {
        &self.nodes[v.0].value
    }

    /// Index the next node will get; lets an op capture its own output var.
    pub(crate) fn next_var(&self) -> Var {
        Var(self.nodes.len())
    }

    pub(crate) fn push(&mut self, value: ArrayD<F>, backward: Option<BackwardFn<F>>) -> Var {
        let v = Var(self.nodes.len());
        self.nodes.push(Node { value, backward });
        v
    }

    /// Leaf node (input or parameter); gradients accumulate here and survive
    /// the backward sweep.
    pub fn leaf(&mut self, value: ArrayD<F>) -> Var {
        self.push(value, None)
    }

    /// Reverse sweep from a scalar root; returns gradients for all leaves.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        let seed = ArrayD::ones(self.nodes[root.0].value.raw_dim());
        self.backward_with_seed(root, seed)
    }

    pub fn backward_with_seed(&self, root: Var, seed: ArrayD<F>) -> Gradients<F> {
        let mut grads: Vec<Option<ArrayD<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].backward {
                Some(bw) => {
                    for (parent, pg) in bw(self, &g) {
                        debug_assert!(parent.0 < i, "tape ordering violated");
                        match &mut grads[parent.0] {
                            Some(acc) => *acc += &pg,
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
                None => grads[i] = Some(g),
            }
        }
        Gradients { grads }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(
            value,
            Some(Box::new(move |_, g| {
                vec![(a, g.clone()), (b, g.clone())]
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(
            value,
            Some(Box::new(move |_, g| {
                vec![(a, g.clone()), (b, -g.clone())]
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(
            value,
            Some(Box::new(move |t, g| {
                vec![(a, g * t.value(b)), (b, g * t.value(a))]
            })),
        )
    }

    pub fn scale(&mut self, a: Var, s: F) -> Var {
        let value = self.value(a).mapv(|x| x * s);
        self.push(
            value,
            Some(Box::new(move |_, g| vec![(a, g.mapv(|x| x * s))])),
        )
    }

    pub fn add_scalar(&mut self, a: Var, s: F) -> Var {
        let value = self.value(a).mapv(|x| x + s);
        self.push(value, Some(Box::new(move |_, g| vec![(a, g.clone())])))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.next_var();
        let value = self
            .value(a)
            .mapv(|x| F::one() / (F::one() + (-x).exp()));
        self.push(
            value,
            Some(Box::new(move |t, g| {
                let y = t.value(out);
                vec![(a, g * &y.mapv(|y| y * (F::one() - y)))]
            })),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.next_var();
        let value = self.value(a).mapv(|x| x.tanh());
        self.push(
            value,
            Some(Box::new(move |t, g| {
                let y = t.value(out);
                vec![(a, g * &y.mapv(|y| F::one() - y * y))]
            })),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: F) -> Var {
        let value = self
            .value(a)
            .mapv(|x| if x >= F::zero() { x } else { x * slope });
        self.push(
            value,
            Some(Box::new(move |t, g| {
                let x = t.value(a);
                let mut gx = g.clone();
                gx.zip_mut_with(x, |gi, &xi| {
                    if xi < F::zero() {
                        *gi *= slope;
                    }
                });
                vec![(a, gx)]
            })),
        )
    }

    /// Clamp to [0,1]; the gradient is zero outside the closed interval.
    pub fn clamp01(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .mapv(|x| x.max(F::zero()).min(F::one()));
        self.push(
            value,
            Some(Box::new(move |t, g| {
                let x = t.value(a);
                let mut gx = g.clone();
                gx.zip_mut_with(x, |gi, &xi| {
                    if xi < F::zero() || xi > F::one() {
                        *gi = F::zero();
                    }
                });
                vec![(a, gx)]
            })),
        )
    }

    /// Sum every element down to a rank-0 scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let value = ArrayD::from_elem(IxDyn(&[]), s);
        self.push(
            value,
            Some(Box::new(move |t, g| {
                let seed = g[[]];
                vec![(a, ArrayD::from_elem(t.value(a).raw_dim(), seed))]
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = F::of_usize(self.value(a).len());
        let s = self.sum_all(a);
        self.scale(s, F::one() / n)
    }

    /// Sum a list of same-shaped vars.
    pub fn add_n(&mut self, vars: &[Var]) -> Var {
        assert!(!vars.is_empty());
        let mut acc = vars[0];
        for &v in &vars[1..] {
            acc = self.add(acc, v);
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn chain_rule_through_elementwise_ops() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.5, -1.0, 2.0]).unwrap());
        let y = t.sigmoid(x);
        let z = t.mul(y, x);
        let loss = t.sum_all(z);
        let grads = t.backward(loss);
        let gx = grads.get(x).unwrap();
        // d/dx [x*sigmoid(x)] = sigmoid(x) + x*sigmoid'(x)
        for (i, &xi) in [0.5f64, -1.0, 2.0].iter().enumerate() {
            let s = 1.0 / (1.0 + (-xi).exp());
            let expect = s + xi * s * (1.0 - s);
            assert!((gx[[i]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_accumulates_over_reused_vars() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(ArrayD::from_elem(IxDyn(&[1]), 3.0));
        let y = t.mul(x, x); // x^2
        let loss = t.sum_all(y);
        let grads = t.backward(loss);
        assert!((grads.get(x).unwrap()[[0]] - 6.0).abs() < 1e-12);
    }

    #[test]
    fn clamp_kills_gradient_outside_range() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(ArrayD::from_shape_vec(IxDyn(&[3]), vec![-0.5, 0.5, 1.5]).unwrap());
        let y = t.clamp01(x);
        let loss = t.sum_all(y);
        let grads = t.backward(loss);
        let gx = grads.get(x).unwrap();
        assert_eq!(gx[[0]], 0.0);
        assert_eq!(gx[[1]], 1.0);
        assert_eq!(gx[[2]], 0.0);
    }
}
