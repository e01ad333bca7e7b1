//! Deep residual branch: stacked convolutional LSTM cells modeling the
//! dynamics the physical cell cannot express.

use ndarray::Array3;
use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Binder, Conv2d, Conv2dVars};
use crate::phycell::LatentState;
use crate::scalar::Scalar;

/// Per-cell recurrent state: hidden grid and cell memory grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmState<F: Scalar> {
    pub layers: Vec<(Array3<F>, Array3<F>)>, // (hidden, memory)
}

impl<F: Scalar> ConvLstmState<F> {
    pub fn zeros(widths: &[usize], h: usize, w: usize) -> Self {
        ConvLstmState {
            layers: widths.iter().map(|&c| (Array3::zeros((c, h, w)), Array3::zeros((c, h, w)))).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvLstmCell<F: Scalar> {
    /// input -> 4*hidden gate pre-activations (order: input, forget, candidate, output)
    pub conv_x: Conv2d<F>,
    /// hidden -> 4*hidden, no bias (the x-conv carries it)
    pub conv_h: Conv2d<F>,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
pub struct ConvLstmParams<F: Scalar> {
    pub input_channels: usize,
    pub widths: Vec<usize>,
    pub cells: Vec<ConvLstmCell<F>>,
    /// 1x1 projection from the last hidden width to the latent width.
    pub project: Conv2d<F>,
}

pub struct ConvLstmCellVars {
    pub conv_x: Conv2dVars,
    pub conv_h: Conv2dVars,
}

pub struct ConvLstmVars {
    pub cells: Vec<ConvLstmCellVars>,
    pub project: Conv2dVars,
}

impl<F: Scalar> ConvLstmParams<F> {
    pub fn seeded<R: Rng>(input_channels: usize, widths: &[usize], rng: &mut R) -> Self {
        assert!(!widths.is_empty());
        let mut cells = Vec::with_capacity(widths.len());
        let mut c_in = input_channels;
        for &hidden in widths {
            let mut conv_x = Conv2d::seeded(c_in, 4 * hidden, 3, 1, 1, true, rng);
            if let Some(b) = &mut conv_x.bias {
                // forget-gate bias starts at 1 to keep early memory
                for i in hidden..2 * hidden {
                    b[i] = F::one();
                }
            }
            let conv_h = Conv2d::seeded(hidden, 4 * hidden, 3, 1, 1, false, rng);
            cells.push(ConvLstmCell { conv_x, conv_h, hidden });
            c_in = hidden;
        }
        let project = Conv2d::seeded(*widths.last().unwrap(), input_channels, 1, 1, 0, true, rng);
        ConvLstmParams { input_channels, widths: widths.to_vec(), cells, project }
    }

    pub fn bind(&self, b: &mut Binder<'_, F>, name: &str) -> ConvLstmVars {
        ConvLstmVars {
            cells: self
                .cells
                .iter()
                .enumerate()
                .map(|(i, c)| ConvLstmCellVars {
                    conv_x: c.conv_x.bind(b, &format!("{name}.cell{i}.x")),
                    conv_h: c.conv_h.bind(b, &format!("{name}.cell{i}.h")),
                })
                .collect(),
            project: self.project.bind(b, &format!("{name}.project")),
        }
    }

    pub fn visit(&self, name: &str, f: &mut impl FnMut(String, ndarray::ArrayViewD<'_, F>)) {
        for (i, c) in self.cells.iter().enumerate() {
            c.conv_x.visit(&format!("{name}.cell{i}.x"), f);
            c.conv_h.visit(&format!("{name}.cell{i}.h"), f);
        }
        self.project.visit(&format!("{name}.project"), f);
    }

    pub fn visit_mut(&mut self, name: &str, f: &mut impl FnMut(String, ndarray::ArrayViewMutD<'_, F>)) {
        for (i, c) in self.cells.iter_mut().enumerate() {
            c.conv_x.visit_mut(&format!("{name}.cell{i}.x"), f);
            c.conv_h.visit_mut(&format!("{name}.cell{i}.h"), f);
        }
        self.project.visit_mut(&format!("{name}.project"), f);
    }

    /// One step over the whole stack. `state` holds (hidden, memory) vars per
    /// cell; returns the projected residual increment and the new state vars.
    pub fn step_on_tape(
        &self,
        tape: &mut Tape<F>,
        vars: &ConvLstmVars,
        state: &[(Var, Var)],
        encoded: Var,
    ) -> (Var, Vec<(Var, Var)>) {
        assert_eq!(state.len(), self.cells.len());
        let mut x = encoded;
        let mut new_state = Vec::with_capacity(self.cells.len());
        for (cell_i, cell) in self.cells.iter().enumerate() {
            let (h_prev, c_prev) = state[cell_i];
            let zx = cell.conv_x.apply(tape, &vars.cells[cell_i].conv_x, x);
            let zh = cell.conv_h.apply(tape, &vars.cells[cell_i].conv_h, h_prev);
            let z = tape.add(zx, zh);
            let hid = cell.hidden;
            let zi = tape.narrow_channels(z, 0, hid);
            let zf = tape.narrow_channels(z, hid, hid);
            let zg = tape.narrow_channels(z, 2 * hid, hid);
            let zo = tape.narrow_channels(z, 3 * hid, hid);
            let i_gate = tape.sigmoid(zi);
            let f_gate = tape.sigmoid(zf);
            let g_cand = tape.tanh(zg);
            let o_gate = tape.sigmoid(zo);
            let kept = tape.mul(f_gate, c_prev);
            let written = tape.mul(i_gate, g_cand);
            let c_new = tape.add(kept, written);
            let c_act = tape.tanh(c_new);
            let h_new = tape.mul(o_gate, c_act);
            new_state.push((h_new, c_new));
            x = h_new;
        }
        let increment = self.project.apply(tape, &vars.project, x);
        (increment, new_state)
    }
}

/// One residual step outside the tape: returns the increment and new state.
pub fn convlstm_step<F: Scalar>(
    state: &ConvLstmState<F>,
    encoded: &LatentState<F>,
    params: &ConvLstmParams<F>,
) -> Result<(LatentState<F>, ConvLstmState<F>)> {
    let (c, hh, ww) = encoded.dim();
    if c != params.input_channels {
        return Err(Error::DimensionMismatch {
            expected: format!("{} input channels", params.input_channels),
            got: format!("{c}"),
        });
    }
    if state.layers.len() != params.cells.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} stacked cells", params.cells.len()),
            got: format!("{}", state.layers.len()),
        });
    }
    for ((h, _), &w) in state.layers.iter().zip(&params.widths) {
        if h.dim() != (w, hh, ww) {
            return Err(Error::DimensionMismatch {
                expected: format!("({w}, {hh}, {ww})"),
                got: format!("{:?}", h.dim()),
            });
        }
    }
    let mut tape = Tape::new();
    let mut binder = Binder::new(&mut tape);
    let vars = params.bind(&mut binder, "convlstm");
    let enc = tape.leaf(encoded.values.clone().insert_axis(ndarray::Axis(0)).into_dyn());
    let state_vars: Vec<(Var, Var)> = state
        .layers
        .iter()
        .map(|(h, c)| {
            let hv = tape.leaf(h.clone().insert_axis(ndarray::Axis(0)).into_dyn());
            let cv = tape.leaf(c.clone().insert_axis(ndarray::Axis(0)).into_dyn());
            (hv, cv)
        })
        .collect();
    let (inc, new_states) = params.step_on_tape(&mut tape, &vars, &state_vars, enc);
    let extract3 = |t: &Tape<F>, v: Var| -> Array3<F> {
        let val = t.value(v);
        let shape = val.shape().to_vec();
        val.view()
            .into_shape_with_order((shape[1], shape[2], shape[3]))
            .unwrap()
            .to_owned()
    };
    let increment = LatentState::new(extract3(&tape, inc));
    let layers = new_states
        .iter()
        .map(|&(h, c)| (extract3(&tape, h), extract3(&tape, c)))
        .collect();
    Ok((increment, ConvLstmState { layers }))
}
