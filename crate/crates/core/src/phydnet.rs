//! Encoder, PhyCell, ConvLSTM, decoder and severe-rainfall head assembled
//! into the recurrent cell and the sequence-to-sequence forecaster.

use ndarray::{Array2, Array3, Ix4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Binder, Conv2d, Conv2dVars, ConvTranspose2d, GroupNorm, GroupNormVars, norm_groups};
use crate::phycell::{LatentState, PhyCellParams, PhyCellVars, PhyVariant};
use crate::residual_convlstm::{ConvLstmParams, ConvLstmState, ConvLstmVars};
use crate::scalar::Scalar;

const LEAKY_SLOPE: f64 = 0.1;

/// Model hyperparameters; everything needed to rebuild the architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: PhyVariant,
    /// Derivative order bound; must equal the variant's kernel size.
    pub k: usize,
    pub latent_channels: usize,
    pub tau_in: usize,
    pub tau_out: usize,
    pub delta_minutes: i64,
    pub icloss_enabled: bool,
    pub residual_enabled: bool,
    pub convlstm_widths: Vec<usize>,
    pub severe_threshold_dbz: f64,
    pub class_weight: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: PhyVariant::Baseline,
            k: 7,
            latent_channels: 64,
            tau_in: 4,
            tau_out: 6,
            delta_minutes: 10,
            icloss_enabled: false,
            residual_enabled: true,
            convlstm_widths: vec![128, 128, 64],
            severe_threshold_dbz: 40.0,
            class_weight: 5.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k != self.variant.kernel_size() {
            return Err(Error::InvalidConfig(format!(
                "variant {} requires k = {}, got {}",
                self.variant.name(),
                self.variant.kernel_size(),
                self.k
            )));
        }
        if self.tau_in < 1 || self.tau_out < 1 {
            return Err(Error::InvalidConfig("tau_in and tau_out must be >= 1".into()));
        }
        if self.latent_channels < 1 {
            return Err(Error::InvalidConfig("latent_channels must be >= 1".into()));
        }
        if self.residual_enabled && self.convlstm_widths.is_empty() {
            return Err(Error::InvalidConfig("convlstm_widths must be non-empty".into()));
        }
        if self.delta_minutes < 1 {
            return Err(Error::InvalidConfig("delta_minutes must be >= 1".into()));
        }
        if !(0.0 < self.severe_threshold_dbz && self.severe_threshold_dbz <= 60.0) {
            return Err(Error::InvalidConfig("severe threshold must lie in (0, 60] dBZ".into()));
        }
        if self.class_weight <= 0.0 {
            return Err(Error::InvalidConfig("class_weight must be positive".into()));
        }
        Ok(())
    }

    fn encoder_mid(&self) -> usize {
        (self.latent_channels / 2).max(1)
    }
}

/// Recurrent memory of the cell: physical latent plus the ConvLSTM stack.
#[derive(Debug, Clone)]
pub struct CellMemory<F: Scalar> {
    pub h_p: LatentState<F>,
    pub convlstm: ConvLstmState<F>,
}

impl<F: Scalar> CellMemory<F> {
    pub fn zeros(config: &ModelConfig, h_latent: usize, w_latent: usize) -> Self {
        CellMemory {
            h_p: LatentState::zeros(config.latent_channels, h_latent, w_latent),
            convlstm: ConvLstmState::zeros(&config.convlstm_widths, h_latent, w_latent),
        }
    }
}

/// Decoded intensity frame plus the optional severe-rainfall probability map.
#[derive(Debug, Clone)]
pub struct PredictionBundle<F: Scalar> {
    pub intensity: Array2<F>,
    pub prob: Option<Array2<F>>,
}

#[derive(Debug, Clone)]
pub struct Encoder<F: Scalar> {
    pub conv1: Conv2d<F>,
    pub norm1: GroupNorm<F>,
    pub conv2: Conv2d<F>,
    pub norm2: GroupNorm<F>,
}

pub struct EncoderVars {
    conv1: Conv2dVars,
    norm1: GroupNormVars,
    conv2: Conv2dVars,
    norm2: GroupNormVars,
}

#[derive(Debug, Clone)]
pub struct Decoder<F: Scalar> {
    pub tconv1: ConvTranspose2d<F>,
    pub norm1: GroupNorm<F>,
    pub tconv2: ConvTranspose2d<F>,
}

pub struct DecoderVars {
    tconv1: Conv2dVars,
    norm1: GroupNormVars,
    tconv2: Conv2dVars,
}

/// The full disentangled forecaster.
#[derive(Debug, Clone)]
pub struct PhyDNet<F: Scalar> {
    pub config: ModelConfig,
    pub encoder: Encoder<F>,
    pub decoder: Decoder<F>,
    pub phycell: PhyCellParams<F>,
    pub convlstm: ConvLstmParams<F>,
    pub prob_head: Option<Conv2d<F>>,
}

pub struct PhyDNetVars {
    pub encoder: EncoderVars,
    pub decoder: DecoderVars,
    pub phycell: PhyCellVars,
    pub convlstm: ConvLstmVars,
    pub prob_head: Option<Conv2dVars>,
}

/// Memory as tape vars during a rollout.
pub struct MemoryVars {
    pub h_p: Var,
    pub convlstm: Vec<(Var, Var)>,
}

/// Tape outputs of one recurrent step.
pub struct RolloutStep {
    pub intensity: Var,
    pub logits: Option<Var>,
    pub h_p: Var,
    pub h_r: Var,
}

impl<F: Scalar> PhyDNet<F> {
    pub fn seeded(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c_h = config.latent_channels;
        let mid = config.encoder_mid();
        let encoder = Encoder {
            conv1: Conv2d::seeded(1, mid, 3, 2, 1, true, &mut rng),
            norm1: GroupNorm::identity(mid, norm_groups(mid, 8)),
            conv2: Conv2d::seeded(mid, c_h, 3, 2, 1, true, &mut rng),
            norm2: GroupNorm::identity(c_h, norm_groups(c_h, 8)),
        };
        let mut decoder = Decoder {
            tconv1: ConvTranspose2d::seeded(c_h, mid, 3, 2, 1, 1, true, &mut rng),
            norm1: GroupNorm::identity(mid, norm_groups(mid, 8)),
            tconv2: ConvTranspose2d::seeded(mid, 1, 3, 2, 1, 1, true, &mut rng),
        };
        if let Some(b) = &mut decoder.tconv2.bias {
            // keep initial outputs off the clamp boundary so gradients flow
            b[0] = F::of(0.05);
        }
        let phycell = PhyCellParams::seeded(config.variant, c_h, &mut rng);
        let convlstm = ConvLstmParams::seeded(c_h, &config.convlstm_widths, &mut rng);
        let prob_head = config
            .icloss_enabled
            .then(|| Conv2d::seeded(1, 2, 3, 1, 1, true, &mut rng));
        Ok(PhyDNet { config, encoder, decoder, phycell, convlstm, prob_head })
    }

    pub fn bind(&self, b: &mut Binder<'_, F>) -> PhyDNetVars {
        PhyDNetVars {
            encoder: EncoderVars {
                conv1: self.encoder.conv1.bind(b, "encoder.conv1"),
                norm1: self.encoder.norm1.bind(b, "encoder.norm1"),
                conv2: self.encoder.conv2.bind(b, "encoder.conv2"),
                norm2: self.encoder.norm2.bind(b, "encoder.norm2"),
            },
            decoder: DecoderVars {
                tconv1: self.decoder.tconv1.bind(b, "decoder.tconv1"),
                norm1: self.decoder.norm1.bind(b, "decoder.norm1"),
                tconv2: self.decoder.tconv2.bind(b, "decoder.tconv2"),
            },
            phycell: self.phycell.bind(b, "phycell"),
            convlstm: self.convlstm.bind(b, "convlstm"),
            prob_head: self.prob_head.as_ref().map(|c| c.bind(b, "prob_head")),
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(String, ndarray::ArrayViewD<'_, F>)) {
        self.encoder.conv1.visit("encoder.conv1", f);
        self.encoder.norm1.visit("encoder.norm1", f);
        self.encoder.conv2.visit("encoder.conv2", f);
        self.encoder.norm2.visit("encoder.norm2", f);
        self.decoder.tconv1.visit("decoder.tconv1", f);
        self.decoder.norm1.visit("decoder.norm1", f);
        self.decoder.tconv2.visit("decoder.tconv2", f);
        self.phycell.visit("phycell", f);
        self.convlstm.visit("convlstm", f);
        if let Some(c) = &self.prob_head {
            c.visit("prob_head", f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, ndarray::ArrayViewMutD<'_, F>)) {
        self.encoder.conv1.visit_mut("encoder.conv1", f);
        self.encoder.norm1.visit_mut("encoder.norm1", f);
        self.encoder.conv2.visit_mut("encoder.conv2", f);
        self.encoder.norm2.visit_mut("encoder.norm2", f);
        self.decoder.tconv1.visit_mut("decoder.tconv1", f);
        self.decoder.norm1.visit_mut("decoder.norm1", f);
        self.decoder.tconv2.visit_mut("decoder.tconv2", f);
        self.phycell.visit_mut("phycell", f);
        self.convlstm.visit_mut("convlstm", f);
        if let Some(c) = &mut self.prob_head {
            c.visit_mut("prob_head", f);
        }
    }

    // ---- tape-level graph builders ----

    pub fn encode_on_tape(&self, tape: &mut Tape<F>, vars: &PhyDNetVars, frame: Var) -> Var {
        let slope = F::of(LEAKY_SLOPE);
        let x = self.encoder.conv1.apply(tape, &vars.encoder.conv1, frame);
        let x = self.encoder.norm1.apply(tape, &vars.encoder.norm1, x);
        let x = tape.leaky_relu(x, slope);
        let x = self.encoder.conv2.apply(tape, &vars.encoder.conv2, x);
        let x = self.encoder.norm2.apply(tape, &vars.encoder.norm2, x);
        tape.leaky_relu(x, slope)
    }

    pub fn decode_on_tape(&self, tape: &mut Tape<F>, vars: &PhyDNetVars, latent: Var) -> Var {
        let slope = F::of(LEAKY_SLOPE);
        let x = self.decoder.tconv1.apply(tape, &vars.decoder.tconv1, latent);
        let x = self.decoder.norm1.apply(tape, &vars.decoder.norm1, x);
        let x = tape.leaky_relu(x, slope);
        let x = self.decoder.tconv2.apply(tape, &vars.decoder.tconv2, x);
        tape.clamp01(x)
    }

    pub fn zero_memory_vars(&self, tape: &mut Tape<F>, batch: usize, h_lat: usize, w_lat: usize) -> MemoryVars {
        let c_h = self.config.latent_channels;
        let h_p = tape.leaf(ndarray::Array4::<F>::zeros((batch, c_h, h_lat, w_lat)).into_dyn());
        let convlstm = self
            .config
            .convlstm_widths
            .iter()
            .map(|&c| {
                (
                    tape.leaf(ndarray::Array4::<F>::zeros((batch, c, h_lat, w_lat)).into_dyn()),
                    tape.leaf(ndarray::Array4::<F>::zeros((batch, c, h_lat, w_lat)).into_dyn()),
                )
            })
            .collect();
        MemoryVars { h_p, convlstm }
    }

    /// One recurrent step on the tape: encode, advance both branches, decode
    /// their sum, optionally run the probability head.
    pub fn step_on_tape(
        &self,
        tape: &mut Tape<F>,
        vars: &PhyDNetVars,
        frame: Var,
        memory: &MemoryVars,
    ) -> (RolloutStep, MemoryVars) {
        let encoded = self.encode_on_tape(tape, vars, frame);
        let (h_p_new, _h_tilde) = self
            .phycell
            .step_on_tape(tape, &vars.phycell, memory.h_p, Some(encoded));
        let (h_r, lstm_state, latent) = if self.config.residual_enabled {
            let (h_r, lstm_state) =
                self.convlstm
                    .step_on_tape(tape, &vars.convlstm, &memory.convlstm, encoded);
            let latent = tape.add(h_p_new, h_r);
            (h_r, lstm_state, latent)
        } else {
            let shape = tape.value(h_p_new).raw_dim();
            let zeros = tape.leaf(ndarray::ArrayD::zeros(shape));
            (zeros, memory.convlstm.clone(), h_p_new)
        };
        let intensity = self.decode_on_tape(tape, vars, latent);
        let logits = self.prob_head.as_ref().map(|head| {
            head.apply(tape, vars.prob_head.as_ref().unwrap(), intensity)
        });
        (
            RolloutStep { intensity, logits, h_p: h_p_new, h_r },
            MemoryVars { h_p: h_p_new, convlstm: lstm_state },
        )
    }

    /// Warm-up over the tau_I input frames (predictions discarded before the
    /// last one), then roll out tau_O steps feeding each decoded prediction
    /// back as the next input. `teacher` substitutes ground-truth frames for
    /// the fed-back predictions when present.
    pub fn rollout_on_tape(
        &self,
        tape: &mut Tape<F>,
        vars: &PhyDNetVars,
        inputs: &[Var],
        tau_o: usize,
        teacher: Option<&[Var]>,
    ) -> Vec<RolloutStep> {
        assert_eq!(inputs.len(), self.config.tau_in, "validated by callers");
        let first = tape.value(inputs[0]).shape().to_vec();
        let (batch, h, w) = (first[0], first[2], first[3]);
        let mut memory = self.zero_memory_vars(tape, batch, h / 4, w / 4);
        let mut outputs = Vec::with_capacity(tau_o);
        for (t, &frame) in inputs.iter().enumerate() {
            let (step, new_memory) = self.step_on_tape(tape, vars, frame, &memory);
            memory = new_memory;
            if t == inputs.len() - 1 {
                outputs.push(step);
            }
        }
        for i in 1..tau_o {
            let frame = match teacher {
                Some(truths) => truths[i - 1],
                None => outputs.last().unwrap().intensity,
            };
            let (step, new_memory) = self.step_on_tape(tape, vars, frame, &memory);
            memory = new_memory;
            outputs.push(step);
        }
        outputs
    }

    // ---- inference API ----

    fn check_frame_dims(&self, h: usize, w: usize) -> Result<()> {
        if !h.is_multiple_of(4) || !w.is_multiple_of(4) || h == 0 || w == 0 {
            return Err(Error::DimensionMismatch {
                expected: "frame height and width divisible by 4".into(),
                got: format!("{h}x{w}"),
            });
        }
        // the latent domain must fit the derivative kernels and theta_U
        let k = self.config.variant.kernel_size().max(
            if self.config.variant == PhyVariant::AdvDiff { 5 } else { 0 },
        );
        if h / 4 < k || w / 4 < k {
            return Err(Error::DomainTooSmall { h: h / 4, w: w / 4, k });
        }
        Ok(())
    }

    /// Embed a frame into the latent space: C_h x H/4 x W/4.
    pub fn encode(&self, frame: &Array2<F>) -> Result<LatentState<F>> {
        let (h, w) = frame.dim();
        self.check_frame_dims(h, w)?;
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let vars = self.bind(&mut binder);
        let input = tape.leaf(
            frame
                .clone()
                .into_shape_with_order((1, 1, h, w))
                .unwrap()
                .into_dyn(),
        );
        let latent = self.encode_on_tape(&mut tape, &vars, input);
        Ok(LatentState::new(extract3(&tape, latent)))
    }

    /// Decode a latent sum into a clamped intensity frame.
    pub fn decode(&self, latent: &LatentState<F>) -> Result<Array2<F>> {
        let (c, hh, ww) = latent.dim();
        if c != self.config.latent_channels {
            return Err(Error::DimensionMismatch {
                expected: format!("{} latent channels", self.config.latent_channels),
                got: format!("{c}"),
            });
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let vars = self.bind(&mut binder);
        let input = tape.leaf(
            latent
                .values
                .clone()
                .into_shape_with_order((1, c, hh, ww))
                .unwrap()
                .into_dyn(),
        );
        let out = self.decode_on_tape(&mut tape, &vars, input);
        let arr = extract3(&tape, out);
        Ok(arr.index_axis(ndarray::Axis(0), 0).to_owned())
    }

    /// Severe-rainfall probability of the "above threshold" class.
    pub fn prob_head(&self, intensity: &Array2<F>) -> Result<Array2<F>> {
        let head = self.prob_head.as_ref().ok_or_else(|| {
            Error::InvalidConfig("probability head requires icloss_enabled".into())
        })?;
        let (h, w) = intensity.dim();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let vars = head.bind(&mut binder, "prob_head");
        let input = tape.leaf(
            intensity
                .clone()
                .into_shape_with_order((1, 1, h, w))
                .unwrap()
                .into_dyn(),
        );
        let logits = head.apply(&mut tape, &vars, input);
        Ok(softmax_above(&extract3(&tape, logits)))
    }

    /// One external step of the recurrent cell; memory is replaced, never
    /// mutated.
    pub fn step(
        &self,
        frame: &Array2<F>,
        memory: &CellMemory<F>,
    ) -> Result<(PredictionBundle<F>, CellMemory<F>)> {
        let (h, w) = frame.dim();
        self.check_frame_dims(h, w)?;
        let (c_mem, h_lat, w_lat) = memory.h_p.dim();
        if c_mem != self.config.latent_channels || h_lat != h / 4 || w_lat != w / 4 {
            return Err(Error::DimensionMismatch {
                expected: format!("memory ({}, {}, {})", self.config.latent_channels, h / 4, w / 4),
                got: format!("({c_mem}, {h_lat}, {w_lat})"),
            });
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let vars = self.bind(&mut binder);
        let input = tape.leaf(
            frame.clone().into_shape_with_order((1, 1, h, w)).unwrap().into_dyn(),
        );
        let mem_vars = MemoryVars {
            h_p: tape.leaf(memory.h_p.values.clone().insert_axis(ndarray::Axis(0)).into_dyn()),
            convlstm: memory
                .convlstm
                .layers
                .iter()
                .map(|(hs, cs)| {
                    (
                        tape.leaf(hs.clone().insert_axis(ndarray::Axis(0)).into_dyn()),
                        tape.leaf(cs.clone().insert_axis(ndarray::Axis(0)).into_dyn()),
                    )
                })
                .collect(),
        };
        let (step, new_mem) = self.step_on_tape(&mut tape, &vars, input, &mem_vars);
        let bundle = self.bundle_from(&tape, &step);
        let new_memory = CellMemory {
            h_p: LatentState::new(extract3(&tape, new_mem.h_p)),
            convlstm: ConvLstmState {
                layers: new_mem
                    .convlstm
                    .iter()
                    .map(|&(hv, cv)| (extract3(&tape, hv), extract3(&tape, cv)))
                    .collect(),
            },
        };
        Ok((bundle, new_memory))
    }

    fn bundle_from(&self, tape: &Tape<F>, step: &RolloutStep) -> PredictionBundle<F> {
        let intensity = extract3(tape, step.intensity)
            .index_axis(ndarray::Axis(0), 0)
            .to_owned();
        let prob = step.logits.map(|lv| softmax_above(&extract3(tape, lv)));
        PredictionBundle { intensity, prob }
    }

    fn run_forecast(
        &self,
        inputs: &[Array2<F>],
        tau_o: usize,
        collect_branches: bool,
    ) -> Result<(Vec<PredictionBundle<F>>, Vec<Array2<F>>, Vec<Array2<F>>)> {
        if inputs.len() != self.config.tau_in {
            return Err(Error::Arity { expected: self.config.tau_in, got: inputs.len() });
        }
        let (h, w) = inputs[0].dim();
        self.check_frame_dims(h, w)?;
        for frame in inputs {
            if frame.dim() != (h, w) {
                return Err(Error::DimensionMismatch {
                    expected: format!("{h}x{w}"),
                    got: format!("{:?}", frame.dim()),
                });
            }
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new(&mut tape);
        let vars = self.bind(&mut binder);
        let input_vars: Vec<Var> = inputs
            .iter()
            .map(|f| {
                tape.leaf(f.clone().into_shape_with_order((1, 1, h, w)).unwrap().into_dyn())
            })
            .collect();
        let steps = self.rollout_on_tape(&mut tape, &vars, &input_vars, tau_o, None);
        let bundles: Vec<PredictionBundle<F>> =
            steps.iter().map(|s| self.bundle_from(&tape, s)).collect();
        let mut physical = Vec::new();
        let mut residual = Vec::new();
        if collect_branches {
            for s in &steps {
                let dp = self.decode_on_tape(&mut tape, &vars, s.h_p);
                let dr = self.decode_on_tape(&mut tape, &vars, s.h_r);
                physical.push(extract3(&tape, dp).index_axis(ndarray::Axis(0), 0).to_owned());
                residual.push(extract3(&tape, dr).index_axis(ndarray::Axis(0), 0).to_owned());
            }
        }
        Ok((bundles, physical, residual))
    }

    /// Branch decomposition: combined forecast plus the separately decoded
    /// physical and residual latent sequences.
    pub fn decompose_branches(
        &self,
        inputs: &[Array2<F>],
        tau_o: usize,
    ) -> Result<BranchDecomposition<F>> {
        let (combined, physical, residual) = self.run_forecast(inputs, tau_o, true)?;
        Ok(BranchDecomposition { combined, physical, residual })
    }
}

/// Physical/residual reconstruction alongside the combined forecast.
#[derive(Debug, Clone)]
pub struct BranchDecomposition<F: Scalar> {
    pub combined: Vec<PredictionBundle<F>>,
    pub physical: Vec<Array2<F>>,
    pub residual: Vec<Array2<F>>,
}

/// Anything that can produce a forecast sequence from input frames.
pub trait Forecaster<F: Scalar> {
    fn forecast(&self, inputs: &[Array2<F>], tau_o: usize) -> Result<Vec<PredictionBundle<F>>>;
}

impl<F: Scalar> Forecaster<F> for PhyDNet<F> {
    fn forecast(&self, inputs: &[Array2<F>], tau_o: usize) -> Result<Vec<PredictionBundle<F>>> {
        let (bundles, _, _) = self.run_forecast(inputs, tau_o, false)?;
        Ok(bundles)
    }
}

fn extract3<F: Scalar>(tape: &Tape<F>, v: Var) -> Array3<F> {
    let val = tape.value(v).view().into_dimensionality::<Ix4>().unwrap();
    let (n, c, h, w) = val.dim();
    debug_assert_eq!(n, 1);
    val.to_owned().into_shape_with_order((c, h, w)).unwrap()
}

/// Softmax probability of channel 1 (the "above threshold" class) from a
/// (2,H,W) logit grid.
fn softmax_above<F: Scalar>(logits: &Array3<F>) -> Array2<F> {
    let (two, h, w) = logits.dim();
    debug_assert_eq!(two, 2);
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let l0 = logits[[0, i, j]];
            let l1 = logits[[1, i, j]];
            let m = l0.max(l1);
            let e0 = (l0 - m).exp();
            let e1 = (l1 - m).exp();
            out[[i, j]] = e1 / (e0 + e1);
        }
    }
    out
}
