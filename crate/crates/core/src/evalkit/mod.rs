//! Forecast verification: CSI, MAE, MSE, SSIM and Kolmogorov-Smirnov
//! distance, per-lead-time reporting, the persistence baseline and figure
//! emission.

pub mod plots;

use ndarray::Array2;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::phydnet::{Forecaster, PredictionBundle};
use crate::scalar::Scalar;
use crate::training::threshold_truth;

fn check_same_shape<F: Scalar>(pred: &Array2<F>, truth: &Array2<F>) -> Result<()> {
    if pred.dim() != truth.dim() {
        return Err(Error::DimensionMismatch {
            expected: format!("{:?}", truth.dim()),
            got: format!("{:?}", pred.dim()),
        });
    }
    Ok(())
}

/// Critical success index over thresholded masks. Both masks empty counts as
/// a perfect (skill-neutral) 1.0; an empty truth with a nonempty prediction
/// scores 0.
pub fn csi<F: Scalar>(pred: &Array2<F>, truth: &Array2<F>, threshold_dbz: f64) -> Result<F> {
    let (hits, misses, false_alarms) = contingency(pred, truth, threshold_dbz)?;
    let denom = hits + misses + false_alarms;
    if denom == 0 {
        return Ok(F::one());
    }
    Ok(F::of_usize(hits) / F::of_usize(denom))
}

/// (hits, misses, false alarms) of the thresholded masks.
pub fn contingency<F: Scalar>(
    pred: &Array2<F>,
    truth: &Array2<F>,
    threshold_dbz: f64,
) -> Result<(usize, usize, usize)> {
    check_same_shape(pred, truth)?;
    let p = threshold_truth(pred, threshold_dbz);
    let t = threshold_truth(truth, threshold_dbz);
    let mut hits = 0;
    let mut misses = 0;
    let mut false_alarms = 0;
    for (&pv, &tv) in p.iter().zip(t.iter()) {
        let p1 = pv > F::of(0.5);
        let t1 = tv > F::of(0.5);
        match (p1, t1) {
            (true, true) => hits += 1,
            (false, true) => misses += 1,
            (true, false) => false_alarms += 1,
            (false, false) => {}
        }
    }
    Ok((hits, misses, false_alarms))
}

/// Per-pixel mean absolute and mean squared error in MLdBZ units.
pub fn standard_errors<F: Scalar>(pred: &Array2<F>, truth: &Array2<F>) -> Result<(F, F)> {
    check_same_shape(pred, truth)?;
    let n = F::of_usize(pred.len());
    let mut abs = F::zero();
    let mut sq = F::zero();
    for (&p, &t) in pred.iter().zip(truth.iter()) {
        let d = p - t;
        abs += d.abs();
        sq += d * d;
    }
    Ok((abs / n, sq / n))
}

/// Sup-norm distance between the empirical CDFs of the two frames' pixel
/// intensities.
pub fn ks_distance<F: Scalar>(pred: &Array2<F>, truth: &Array2<F>) -> Result<F> {
    check_same_shape(pred, truth)?;
    let mut a: Vec<F> = pred.iter().copied().collect();
    let mut b: Vec<F> = truth.iter().copied().collect();
    a.sort_by(|x, y| x.partial_cmp(y).expect("finite intensities"));
    b.sort_by(|x, y| x.partial_cmp(y).expect("finite intensities"));
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut d = F::zero();
    while i < n || j < m {
        let next = match (a.get(i), b.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => break,
        };
        while i < n && a[i] <= next {
            i += 1;
        }
        while j < m && b[j] <= next {
            j += 1;
        }
        let fa = F::of_usize(i) / F::of_usize(n);
        let fb = F::of_usize(j) / F::of_usize(m);
        d = d.max((fa - fb).abs());
    }
    Ok(d)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window<F: Scalar>() -> Array2<F> {
    let r = (SSIM_WINDOW as isize - 1) / 2;
    let mut w = Array2::<F>::zeros((SSIM_WINDOW, SSIM_WINDOW));
    let mut sum = 0.0f64;
    for (ui, u) in (-r..=r).enumerate() {
        for (vi, v) in (-r..=r).enumerate() {
            let g = (-((u * u + v * v) as f64) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[[ui, vi]] = F::of(g);
            sum += g;
        }
    }
    w.mapv(|v| v / F::of(sum))
}

/// Mean structural similarity: 11x11 Gaussian window (sigma 1.5), stability
/// constants (0.01)^2 and (0.03)^2 for data range 1.0, windows fully inside
/// the frame. The raw value may be negative for anticorrelated frames;
/// reports clamp to [0,1].
pub fn ssim<F: Scalar>(pred: &Array2<F>, truth: &Array2<F>) -> Result<F> {
    check_same_shape(pred, truth)?;
    let (h, w) = pred.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::DomainTooSmall { h, w, k: SSIM_WINDOW });
    }
    let win = gaussian_window::<F>();
    let c1 = F::of(0.01 * 0.01);
    let c2 = F::of(0.03 * 0.03);
    let mut acc = F::zero();
    let mut count = 0usize;
    for i in 0..=h - SSIM_WINDOW {
        for j in 0..=w - SSIM_WINDOW {
            let mut mx = F::zero();
            let mut my = F::zero();
            let mut mxx = F::zero();
            let mut myy = F::zero();
            let mut mxy = F::zero();
            for u in 0..SSIM_WINDOW {
                for v in 0..SSIM_WINDOW {
                    let g = win[[u, v]];
                    let x = pred[[i + u, j + v]];
                    let y = truth[[i + u, j + v]];
                    mx += g * x;
                    my += g * y;
                    mxx += g * x * x;
                    myy += g * y * y;
                    mxy += g * x * y;
                }
            }
            let vx = mxx - mx * mx;
            let vy = myy - my * my;
            let cov = mxy - mx * my;
            let two = F::of(2.0);
            let value = ((two * mx * my + c1) * (two * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            acc += value;
            count += 1;
        }
    }
    Ok(acc / F::of_usize(count))
}

/// Forecaster that repeats the last observed frame for every lead time.
pub struct Persistence;

impl<F: Scalar> Forecaster<F> for Persistence {
    fn forecast(&self, inputs: &[Array2<F>], tau_o: usize) -> Result<Vec<PredictionBundle<F>>> {
        let last = inputs.last().ok_or(Error::Arity { expected: 1, got: 0 })?;
        Ok((0..tau_o)
            .map(|_| PredictionBundle { intensity: last.clone(), prob: None })
            .collect())
    }
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub thresholds_dbz: Vec<f64>,
    pub tau_out: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { thresholds_dbz: vec![8.0, 40.0], tau_out: 6 }
    }
}

/// One row of the verification report; `lead` of `None` is the aggregate.
#[derive(Debug, Clone)]
pub struct MetricRow<F: Scalar> {
    pub lead: Option<usize>,
    pub mae: F,
    pub mse: F,
    pub ssim: F,
    pub ssim_raw: F,
    pub ks: F,
    pub csi: Vec<F>,
}

#[derive(Debug, Clone)]
pub struct MetricReport<F: Scalar> {
    pub thresholds_dbz: Vec<f64>,
    pub rows: Vec<MetricRow<F>>,
}

impl<F: Scalar> MetricReport<F> {
    pub fn row(&self, lead: Option<usize>) -> Option<&MetricRow<F>> {
        self.rows.iter().find(|r| r.lead == lead)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("lead,mae,mse,ssim,ssim_raw,ks");
        for t in &self.thresholds_dbz {
            out.push_str(&format!(",csi_{t}dbz"));
        }
        out.push('\n');
        for row in &self.rows {
            let lead = row.lead.map(|l| l.to_string()).unwrap_or_else(|| "all".into());
            out.push_str(&format!(
                "{lead},{},{},{},{},{}",
                row.mae, row.mse, row.ssim, row.ssim_raw, row.ks
            ));
            for v in &row.csi {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let lead = row
                .lead
                .map(|l| format!("lead {l}"))
                .unwrap_or_else(|| "aggregate".into());
            out.push_str(&format!(
                "{lead}: mae {:.6}, mse {:.6}, ssim {:.4}, ks {:.4}",
                row.mae.as_f64(),
                row.mse.as_f64(),
                row.ssim.as_f64(),
                row.ks.as_f64()
            ));
            for (t, v) in self.thresholds_dbz.iter().zip(&row.csi) {
                out.push_str(&format!(", csi@{t} {:.4}", v.as_f64()));
            }
            out.push('\n');
        }
        out
    }

    /// Relative change (self - baseline) / baseline per aggregate metric.
    pub fn relative_change(&self, baseline: &MetricReport<F>) -> Option<Vec<(String, f64)>> {
        let a = self.row(None)?;
        let b = baseline.row(None)?;
        let rel = |x: F, y: F| (x.as_f64() - y.as_f64()) / y.as_f64();
        let mut out = vec![
            ("mae".to_string(), rel(a.mae, b.mae)),
            ("mse".to_string(), rel(a.mse, b.mse)),
            ("ssim".to_string(), rel(a.ssim, b.ssim)),
            ("ks".to_string(), rel(a.ks, b.ks)),
        ];
        for (i, t) in self.thresholds_dbz.iter().enumerate() {
            out.push((format!("csi_{t}dbz"), rel(a.csi[i], b.csi[i])));
        }
        Some(out)
    }
}

/// Run the forecaster over every sample and aggregate metrics per lead time
/// (mean over samples) plus an overall row.
pub fn evaluate<F: Scalar, M: Forecaster<F>>(
    model: &M,
    samples: &[Sample<F>],
    cfg: &EvalConfig,
) -> Result<MetricReport<F>> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let tau_o = cfg.tau_out;
    let k = cfg.thresholds_dbz.len();
    let mut mae = vec![F::zero(); tau_o];
    let mut mse = vec![F::zero(); tau_o];
    let mut ssim_raw = vec![F::zero(); tau_o];
    let mut ks = vec![F::zero(); tau_o];
    let mut csi_acc = vec![vec![F::zero(); k]; tau_o];
    for sample in samples {
        let inputs: Vec<Array2<F>> = sample.inputs.iter().map(|f| f.values.clone()).collect();
        let bundles = model.forecast(&inputs, tau_o)?;
        if bundles.len() != tau_o || sample.targets.len() < tau_o {
            return Err(Error::Arity { expected: tau_o, got: bundles.len().min(sample.targets.len()) });
        }
        for (t, bundle) in bundles.iter().enumerate() {
            let truth = &sample.targets[t].values;
            let (a, s) = standard_errors(&bundle.intensity, truth)?;
            mae[t] += a;
            mse[t] += s;
            ssim_raw[t] += ssim(&bundle.intensity, truth)?;
            ks[t] += ks_distance(&bundle.intensity, truth)?;
            for (ci, &thr) in cfg.thresholds_dbz.iter().enumerate() {
                csi_acc[t][ci] += csi(&bundle.intensity, truth, thr)?;
            }
        }
    }
    let n = F::of_usize(samples.len());
    let clamp01 = |v: F| v.max(F::zero()).min(F::one());
    let mut rows: Vec<MetricRow<F>> = (0..tau_o)
        .map(|t| {
            let raw = ssim_raw[t] / n;
            MetricRow {
                lead: Some(t + 1),
                mae: mae[t] / n,
                mse: mse[t] / n,
                ssim: clamp01(raw),
                ssim_raw: raw,
                ks: ks[t] / n,
                csi: csi_acc[t].iter().map(|&v| v / n).collect(),
            }
        })
        .collect();
    let leads = F::of_usize(tau_o);
    let agg_raw = rows.iter().map(|r| r.ssim_raw).fold(F::zero(), |a, b| a + b) / leads;
    let aggregate = MetricRow {
        lead: None,
        mae: rows.iter().map(|r| r.mae).fold(F::zero(), |a, b| a + b) / leads,
        mse: rows.iter().map(|r| r.mse).fold(F::zero(), |a, b| a + b) / leads,
        ssim: clamp01(agg_raw),
        ssim_raw: agg_raw,
        ks: rows.iter().map(|r| r.ks).fold(F::zero(), |a, b| a + b) / leads,
        csi: (0..k)
            .map(|ci| rows.iter().map(|r| r.csi[ci]).fold(F::zero(), |a, b| a + b) / leads)
            .collect(),
    };
    rows.push(aggregate);
    Ok(MetricReport { thresholds_dbz: cfg.thresholds_dbz.clone(), rows })
}
