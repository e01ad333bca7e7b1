//! Radar-frame ingestion, intensity scaling, rainy flagging, situation
//! splitting, sequence sampling and synthetic dataset generation.
//!
//! On-disk layout: one 8-bit grayscale PNG per frame named `YYYYMMDDHHMM.png`
//! in a flat directory, a plain-text `index.txt` with `timestamp,rainy`
//! lines, an optional `metadata.json` for synthetic data and a
//! `split.json` manifest produced by the splitter.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use chrono::{DateTime, Duration, NaiveDateTime, TimeZone, Utc};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const TIMESTAMP_FORMAT: &str = "%Y%m%d%H%M";
/// MLdBZ value of the 24 dBZ rainy-flag threshold.
const RAINY_INTENSITY_MLDBZ: f64 = 24.0 / 60.0;

/// One H x W grid of precipitation intensity in MLdBZ units [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct RadarFrame<F: Scalar> {
    pub timestamp: DateTime<Utc>,
    pub values: Array2<F>,
}

impl<F: Scalar> RadarFrame<F> {
    pub fn new(timestamp: DateTime<Utc>, values: Array2<F>) -> Result<Self> {
        use chrono::Timelike;
        if timestamp.second() != 0 || !timestamp.minute().is_multiple_of(10) {
            return Err(Error::Data(format!(
                "timestamp {timestamp} is not aligned to the 10-minute grid"
            )));
        }
        if values.iter().any(|v| !(F::zero()..=F::one()).contains(v)) {
            return Err(Error::Data("frame values must lie in [0,1] MLdBZ".into()));
        }
        Ok(RadarFrame { timestamp, values })
    }

    pub fn from_bytes(timestamp: DateTime<Utc>, raw: &Array2<u8>) -> Result<Self> {
        Self::new(timestamp, raw.mapv(dbz_byte_to_mldbz))
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }
}

/// Linear byte scale: [0,60] dBZ maps to [0,255], 0 meaning no precipitation.
pub fn dbz_byte_to_mldbz<F: Scalar>(raw: u8) -> F {
    F::of_usize(raw as usize) / F::of(255.0)
}

/// Quantize an MLdBZ value back to the 8-bit byte scale.
pub fn mldbz_to_byte<F: Scalar>(v: F) -> u8 {
    let scaled = (v.max(F::zero()).min(F::one()) * F::of(255.0)).round().as_f64();
    scaled as u8
}

/// A frame is rainy if >7% of its area is nonzero or >1% exceeds 24 dBZ
/// (both inequalities strict).
pub fn is_rainy<F: Scalar>(frame: &RadarFrame<F>) -> bool {
    let area = frame.values.len() as f64;
    let threshold = F::of(RAINY_INTENSITY_MLDBZ);
    let mut nonzero = 0usize;
    let mut severe = 0usize;
    for &v in frame.values.iter() {
        if v > F::zero() {
            nonzero += 1;
        }
        if v > threshold {
            severe += 1;
        }
    }
    nonzero as f64 > 0.07 * area || severe as f64 > 0.01 * area
}

/// Maximal run of rainy timestamps with no internal 24 h dry gap.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrecipSituation {
    pub timestamps: Vec<DateTime<Utc>>,
}

impl PrecipSituation {
    pub fn start(&self) -> DateTime<Utc> {
        *self.timestamps.first().expect("situations are non-empty")
    }

    pub fn end(&self) -> DateTime<Utc> {
        *self.timestamps.last().expect("situations are non-empty")
    }
}

/// Greedy scan: a gap of 24 h or more starts a new situation.
pub fn split_situations(rainy_timestamps: &[DateTime<Utc>]) -> Vec<PrecipSituation> {
    let mut out: Vec<PrecipSituation> = Vec::new();
    let gap = Duration::hours(24);
    for &ts in rainy_timestamps {
        match out.last_mut() {
            Some(current) if ts - current.end() < gap => current.timestamps.push(ts),
            _ => out.push(PrecipSituation { timestamps: vec![ts] }),
        }
    }
    out
}

/// Disjoint situation lists forming the train/validation/test split.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub train: Vec<PrecipSituation>,
    pub validation: Vec<PrecipSituation>,
    pub test: Vec<PrecipSituation>,
    pub seed: u64,
    pub ratios: [f64; 3],
}

/// Seeded shuffle followed by a largest-remainder partition. Every split with
/// a nonzero ratio is guaranteed at least one situation when feasible.
pub fn assign_splits(
    situations: Vec<PrecipSituation>,
    ratios: [f64; 3],
    seed: u64,
) -> Result<DatasetSplit> {
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidConfig(format!("split ratios sum to {total}, expected 1")));
    }
    if ratios.iter().any(|&r| r < 0.0) {
        return Err(Error::InvalidConfig("split ratios must be nonnegative".into()));
    }
    let nonzero = ratios.iter().filter(|&&r| r > 0.0).count();
    let n = situations.len();
    if n < nonzero {
        return Err(Error::InfeasibleSplit { situations: n, nonzero });
    }
    let mut shuffled = situations;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shuffled.shuffle(&mut rng);

    let mut counts: Vec<usize> = ratios.iter().map(|r| (r * n as f64).floor() as usize).collect();
    let mut leftover = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = ratios[a] * n as f64 - counts[a] as f64;
        let fb = ratios[b] * n as f64 - counts[b] as f64;
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        counts[i] += 1;
        leftover -= 1;
    }
    // rounding may starve a nonzero-ratio split; steal from the largest
    for i in 0..3 {
        if ratios[i] > 0.0 && counts[i] == 0 {
            let donor = (0..3).max_by_key(|&j| counts[j]).unwrap();
            counts[donor] -= 1;
            counts[i] += 1;
        }
    }
    let mut iter = shuffled.into_iter();
    let train: Vec<_> = iter.by_ref().take(counts[0]).collect();
    let validation: Vec<_> = iter.by_ref().take(counts[1]).collect();
    let test: Vec<_> = iter.collect();
    Ok(DatasetSplit { train, validation, test, seed, ratios })
}

/// A training sequence: tau_I inputs followed by tau_O targets at exact
/// delta-minute spacing.
#[derive(Debug, Clone)]
pub struct Sample<F: Scalar> {
    pub inputs: Vec<RadarFrame<F>>,
    pub targets: Vec<RadarFrame<F>>,
}

/// Every window of tau_I + tau_O frames with exact spacing inside one
/// time-ordered frame list; holes in the measurement series break windows.
pub fn make_samples<F: Scalar>(
    frames: &[RadarFrame<F>],
    tau_in: usize,
    tau_out: usize,
    delta_minutes: i64,
) -> Vec<Sample<F>> {
    let window = tau_in + tau_out;
    if frames.len() < window {
        return Vec::new();
    }
    let delta = Duration::minutes(delta_minutes);
    let mut out = Vec::new();
    'windows: for start in 0..=frames.len() - window {
        for i in 1..window {
            if frames[start + i].timestamp - frames[start + i - 1].timestamp != delta {
                continue 'windows;
            }
        }
        out.push(Sample {
            inputs: frames[start..start + tau_in].to_vec(),
            targets: frames[start + tau_in..start + window].to_vec(),
        });
    }
    out
}

// ---- synthetic advection dataset ----

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub grid: usize,
    /// Frames per situation.
    pub steps: usize,
    pub blobs: usize,
    /// Constant advection velocity in pixels per step, (x = rows, y = cols).
    pub velocity: (f64, f64),
    /// Linear growth of the squared blob radius per step.
    pub diffusion: f64,
    /// Amplitude of additive uniform pixel noise.
    pub noise: f64,
    pub seed: u64,
    /// Number of independent situations; consecutive ones are separated by
    /// `gap_hours` of silence.
    pub situations: usize,
    pub gap_hours: i64,
    pub start: DateTime<Utc>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            grid: 64,
            steps: 40,
            blobs: 4,
            velocity: (1.0, 0.0),
            diffusion: 0.0,
            noise: 0.0,
            seed: 7,
            situations: 1,
            gap_hours: 25,
            start: Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap(),
        }
    }
}

/// Ground truth stored beside the synthetic frames.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthMetadata {
    pub velocity: (f64, f64),
    pub diffusion: f64,
    pub grid: usize,
    pub steps: usize,
    pub situations: usize,
    pub seed: u64,
}

struct Blob {
    x: f64,
    y: f64,
    sigma2: f64,
    amplitude: f64,
}

fn torus_delta(a: f64, b: f64, len: f64) -> f64 {
    let mut d = (a - b) % len;
    if d < -len / 2.0 {
        d += len;
    } else if d >= len / 2.0 {
        d -= len;
    }
    d
}

/// Gaussian blobs advected at constant velocity on a torus, with optional
/// diffusion (mass-conserving radius growth) and pixel noise.
pub fn synth_advection_dataset<F: Scalar>(
    cfg: &SynthConfig,
) -> Result<(Vec<RadarFrame<F>>, SynthMetadata)> {
    if cfg.grid == 0 || !cfg.grid.is_multiple_of(4) {
        return Err(Error::InvalidConfig(format!(
            "grid size {} must be a positive multiple of 4",
            cfg.grid
        )));
    }
    if cfg.steps == 0 || cfg.situations == 0 {
        return Err(Error::InvalidConfig("steps and situations must be positive".into()));
    }
    if cfg.gap_hours < 24 && cfg.situations > 1 {
        return Err(Error::InvalidConfig(
            "situations must be separated by at least 24 hours".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let len = cfg.grid as f64;
    let mut frames = Vec::with_capacity(cfg.steps * cfg.situations);
    let mut t0 = cfg.start;
    for _ in 0..cfg.situations {
        let blobs: Vec<Blob> = (0..cfg.blobs)
            .map(|_| Blob {
                x: rng.gen_range(0.0..len),
                y: rng.gen_range(0.0..len),
                sigma2: rng.gen_range(6.0..25.0),
                amplitude: rng.gen_range(0.4..0.9),
            })
            .collect();
        for step in 0..cfg.steps {
            let ts = t0 + Duration::minutes(10 * step as i64);
            let t = step as f64;
            let mut grid = Array2::<f64>::zeros((cfg.grid, cfg.grid));
            for blob in &blobs {
                let cx = blob.x + cfg.velocity.0 * t;
                let cy = blob.y + cfg.velocity.1 * t;
                let s2 = blob.sigma2 + cfg.diffusion * t;
                let amp = blob.amplitude * blob.sigma2 / s2;
                for i in 0..cfg.grid {
                    let dx = torus_delta(i as f64, cx, len);
                    let ex = (-dx * dx / (2.0 * s2)).exp();
                    if ex < 1e-12 {
                        continue;
                    }
                    for j in 0..cfg.grid {
                        let dy = torus_delta(j as f64, cy, len);
                        grid[[i, j]] += amp * ex * (-dy * dy / (2.0 * s2)).exp();
                    }
                }
            }
            if cfg.noise > 0.0 {
                for v in grid.iter_mut() {
                    *v += rng.gen_range(-cfg.noise..cfg.noise);
                }
            }
            let values = grid.mapv(|v| F::of(v.clamp(0.0, 1.0)));
            frames.push(RadarFrame::new(ts, values)?);
        }
        t0 = t0 + Duration::minutes(10 * cfg.steps as i64) + Duration::hours(cfg.gap_hours);
    }
    Ok((
        frames,
        SynthMetadata {
            velocity: cfg.velocity,
            diffusion: cfg.diffusion,
            grid: cfg.grid,
            steps: cfg.steps,
            situations: cfg.situations,
            seed: cfg.seed,
        },
    ))
}

// ---- disk I/O ----

pub fn format_timestamp(ts: DateTime<Utc>) -> String {
    ts.format(TIMESTAMP_FORMAT).to_string()
}

pub fn parse_timestamp(s: &str) -> Result<DateTime<Utc>> {
    let naive = NaiveDateTime::parse_from_str(&format!("{s}00"), "%Y%m%d%H%M%S")
        .map_err(|e| Error::Data(format!("bad timestamp '{s}': {e}")))?;
    Ok(Utc.from_utc_datetime(&naive))
}

pub fn frame_path(dir: &Path, ts: DateTime<Utc>) -> std::path::PathBuf {
    dir.join(format!("{}.png", format_timestamp(ts)))
}

/// Quantize a frame to the 8-bit byte scale and write it as a grayscale PNG.
pub fn write_gray_png<F: Scalar>(frame: &Array2<F>, path: &Path) -> Result<()> {
    let (h, w) = frame.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for i in 0..h {
        for j in 0..w {
            img.put_pixel(j as u32, i as u32, image::Luma([mldbz_to_byte(frame[[i, j]])]));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Write frames as 8-bit PNGs plus the `timestamp,rainy` index.
pub fn write_dataset<F: Scalar>(
    dir: &Path,
    frames: &[RadarFrame<F>],
    metadata: Option<&SynthMetadata>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = String::new();
    for frame in frames {
        write_gray_png(&frame.values, &frame_path(dir, frame.timestamp))?;
        index.push_str(&format!(
            "{},{}\n",
            format_timestamp(frame.timestamp),
            if is_rainy(frame) { 1 } else { 0 }
        ));
    }
    fs::write(dir.join("index.txt"), index)?;
    if let Some(meta) = metadata {
        let json = serde_json::to_string_pretty(meta)
            .map_err(|e| Error::Data(format!("metadata: {e}")))?;
        fs::write(dir.join("metadata.json"), json)?;
    }
    Ok(())
}

/// Read the index: (timestamp, rainy) in file order.
pub fn read_index(dir: &Path) -> Result<Vec<(DateTime<Utc>, bool)>> {
    let path = dir.join("index.txt");
    let text = fs::read_to_string(&path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (ts, rainy) = line
            .split_once(',')
            .ok_or_else(|| Error::Data(format!("malformed index line '{line}'")))?;
        out.push((parse_timestamp(ts)?, rainy.trim() == "1"));
    }
    Ok(out)
}

pub fn load_frame<F: Scalar>(dir: &Path, ts: DateTime<Utc>) -> Result<RadarFrame<F>> {
    let path = frame_path(dir, ts);
    let img = image::open(&path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let raw = Array2::from_shape_fn((h as usize, w as usize), |(i, j)| {
        img.get_pixel(j as u32, i as u32).0[0]
    });
    RadarFrame::from_bytes(ts, &raw)
}

/// Load every frame of each situation and cut them into samples.
pub fn load_samples<F: Scalar>(
    dir: &Path,
    situations: &[PrecipSituation],
    tau_in: usize,
    tau_out: usize,
    delta_minutes: i64,
) -> Result<Vec<Sample<F>>> {
    let mut samples = Vec::new();
    for situation in situations {
        let frames: Vec<RadarFrame<F>> = situation
            .timestamps
            .iter()
            .map(|&ts| load_frame(dir, ts))
            .collect::<Result<_>>()?;
        samples.extend(make_samples(&frames, tau_in, tau_out, delta_minutes));
    }
    Ok(samples)
}

/// Serialized split assignment, reproducible from the stored seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratios: [f64; 3],
    pub train: Vec<Vec<String>>,
    pub validation: Vec<Vec<String>>,
    pub test: Vec<Vec<String>>,
}

impl SplitManifest {
    pub fn from_split(split: &DatasetSplit) -> Self {
        let encode = |list: &[PrecipSituation]| {
            list.iter()
                .map(|s| s.timestamps.iter().map(|&t| format_timestamp(t)).collect())
                .collect()
        };
        SplitManifest {
            seed: split.seed,
            ratios: split.ratios,
            train: encode(&split.train),
            validation: encode(&split.validation),
            test: encode(&split.test),
        }
    }

    pub fn to_split(&self) -> Result<DatasetSplit> {
        let decode = |list: &[Vec<String>]| -> Result<Vec<PrecipSituation>> {
            list.iter()
                .map(|ts| {
                    Ok(PrecipSituation {
                        timestamps: ts.iter().map(|s| parse_timestamp(s)).collect::<Result<_>>()?,
                    })
                })
                .collect()
        };
        let split = DatasetSplit {
            train: decode(&self.train)?,
            validation: decode(&self.validation)?,
            test: decode(&self.test)?,
            seed: self.seed,
            ratios: self.ratios,
        };
        verify_disjoint(&split)?;
        Ok(split)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Data(format!("manifest: {e}")))?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("manifest: {e}")))
    }
}

/// No frame timestamp may appear in two different splits.
pub fn verify_disjoint(split: &DatasetSplit) -> Result<()> {
    let mut seen = BTreeSet::new();
    for situation in split
        .train
        .iter()
        .chain(&split.validation)
        .chain(&split.test)
    {
        for &ts in &situation.timestamps {
            if !seen.insert(ts) {
                return Err(Error::Data(format!("timestamp {ts} appears in two splits")));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn ts(min: i64) -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2021, 1, 1, 0, 0, 0).unwrap() + Duration::minutes(min)
    }

    #[test]
    fn byte_scale_endpoints_and_interior() {
        assert_eq!(dbz_byte_to_mldbz::<f64>(255), 1.0);
        assert_eq!(dbz_byte_to_mldbz::<f64>(0), 0.0);
        assert!((dbz_byte_to_mldbz::<f64>(51) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn byte_scale_is_monotone_and_bijective() {
        let mut prev = -1.0f64;
        let mut seen = std::collections::BTreeSet::new();
        for raw in 0..=255u8 {
            let v: f64 = dbz_byte_to_mldbz(raw);
            assert!(v > prev);
            prev = v;
            assert_eq!(mldbz_to_byte(v), raw);
            seen.insert(v.to_bits());
        }
        assert_eq!(seen.len(), 256);
    }

    #[test]
    fn rainy_flag_clauses() {
        let n = 100; // 10000 px
        // 8% nonzero at 10 dBZ: first clause
        let mut values = Array2::<f64>::zeros((n, n));
        for i in 0..800 {
            values[[i / n, i % n]] = 10.0 / 60.0;
        }
        let frame = RadarFrame::new(ts(0), values).unwrap();
        assert!(is_rainy(&frame));
        // 2% at 30 dBZ: second clause
        let mut values = Array2::<f64>::zeros((n, n));
        for i in 0..200 {
            values[[i / n, i % n]] = 30.0 / 60.0;
        }
        let frame = RadarFrame::new(ts(10), values).unwrap();
        assert!(is_rainy(&frame));
        // all zero: not rainy
        let frame: RadarFrame<f64> = RadarFrame::new(ts(20), Array2::zeros((n, n))).unwrap();
        assert!(!is_rainy(&frame));
        // exactly 7% nonzero, of which exactly 1% at 24 dBZ: strict, not rainy
        let mut values = Array2::<f64>::zeros((n, n));
        for i in 0..700 {
            values[[i / n, i % n]] = if i < 100 { 24.0 / 60.0 } else { 10.0 / 60.0 };
        }
        let frame = RadarFrame::new(ts(30), values).unwrap();
        assert!(!is_rainy(&frame));
    }

    #[test]
    fn situation_splitting_gap_boundary() {
        // 23h50m apart: one situation
        let one = split_situations(&[ts(0), ts(23 * 60 + 50)]);
        assert_eq!(one.len(), 1);
        // exactly 24h apart: two situations
        let two = split_situations(&[ts(0), ts(24 * 60)]);
        assert_eq!(two.len(), 2);
        assert!(split_situations(&[]).is_empty());
    }

    #[test]
    fn paper_scale_split_counts() {
        // 275 situations via 274 gaps of >= 24h
        let mut stamps = Vec::new();
        let mut t = 0i64;
        for s in 0..275i64 {
            for f in 0..3 {
                stamps.push(ts(t + f * 10));
            }
            t += 30 + (24 * 60) + (s % 7) * 60;
        }
        let situations = split_situations(&stamps);
        assert_eq!(situations.len(), 275);
        let split = assign_splits(situations, [0.72, 0.127, 0.153], 11).unwrap();
        assert_eq!(split.train.len(), 198);
        assert_eq!(split.validation.len(), 35);
        assert_eq!(split.test.len(), 42);
        verify_disjoint(&split).unwrap();
    }

    #[test]
    fn split_determinism_and_small_cases() {
        let situations: Vec<PrecipSituation> = (0..10)
            .map(|i| PrecipSituation { timestamps: vec![ts(i * 25 * 60)] })
            .collect();
        let a = assign_splits(situations.clone(), [0.8, 0.1, 0.1], 5).unwrap();
        let b = assign_splits(situations.clone(), [0.8, 0.1, 0.1], 5).unwrap();
        assert_eq!(a.train.len(), 8);
        assert_eq!(a.validation.len(), 1);
        assert_eq!(a.test.len(), 1);
        assert_eq!(
            a.train.iter().map(|s| s.start()).collect::<Vec<_>>(),
            b.train.iter().map(|s| s.start()).collect::<Vec<_>>()
        );
        // infeasible: fewer situations than nonzero splits
        let few = vec![PrecipSituation { timestamps: vec![ts(0)] }];
        assert!(matches!(
            assign_splits(few, [0.5, 0.3, 0.2], 1),
            Err(Error::InfeasibleSplit { .. })
        ));
        // bad ratios
        let sits: Vec<PrecipSituation> =
            (0..3).map(|i| PrecipSituation { timestamps: vec![ts(i * 25 * 60)] }).collect();
        assert!(assign_splits(sits, [0.5, 0.2, 0.2], 1).is_err());
    }

    #[test]
    fn sample_windows() {
        let mk = |mins: &[i64]| -> Vec<RadarFrame<f64>> {
            mins.iter()
                .map(|&m| RadarFrame::new(ts(m), Array2::zeros((4, 4))).unwrap())
                .collect()
        };
        // exactly tau_in + tau_out contiguous frames: one sample
        let frames = mk(&[0, 10, 20, 30, 40]);
        assert_eq!(make_samples(&frames, 2, 3, 10).len(), 1);
        // two extra frames: three samples
        let frames = mk(&[0, 10, 20, 30, 40, 50, 60]);
        assert_eq!(make_samples(&frames, 2, 3, 10).len(), 3);
        // a missing 10-minute slot breaks every window that spans it,
        // leaving only the one window fully inside the second run
        let frames = mk(&[0, 10, 20, 40, 50, 60, 70]);
        let samples = make_samples(&frames, 2, 2, 10);
        assert_eq!(samples.len(), 1);
        for s in &samples {
            let all: Vec<_> = s.inputs.iter().chain(&s.targets).collect();
            for pair in all.windows(2) {
                assert_eq!(pair[1].timestamp - pair[0].timestamp, Duration::minutes(10));
            }
        }
    }

    proptest::proptest! {
        /// Window extraction: every emitted sample is exactly spaced and the
        /// count matches the sliding-window count over contiguous runs.
        #[test]
        fn samples_respect_spacing(gaps in proptest::collection::vec(1i64..4, 4..24)) {
            let mut t = 0i64;
            let mut frames = Vec::new();
            for &g in &gaps {
                t += 10 * g; // g > 1 leaves a hole in the 10-minute grid
                frames.push(RadarFrame::<f64>::new(ts(t), Array2::zeros((4, 4))).unwrap());
            }
            let (tau_in, tau_out) = (2usize, 2usize);
            let samples = make_samples(&frames, tau_in, tau_out, 10);
            for s in &samples {
                let all: Vec<_> = s.inputs.iter().chain(&s.targets).collect();
                for pair in all.windows(2) {
                    proptest::prop_assert_eq!(
                        pair[1].timestamp - pair[0].timestamp,
                        Duration::minutes(10)
                    );
                }
            }
            // oracle: sum of per-run sliding-window counts
            let window = tau_in + tau_out;
            let mut expected = 0usize;
            let mut run = 1usize;
            for pair in frames.windows(2) {
                if pair[1].timestamp - pair[0].timestamp == Duration::minutes(10) {
                    run += 1;
                } else {
                    expected += run.saturating_sub(window - 1);
                    run = 1;
                }
            }
            expected += run.saturating_sub(window - 1);
            proptest::prop_assert_eq!(samples.len(), expected);
        }
    }

    #[test]
    fn synthetic_translation_and_determinism() {
        let cfg = SynthConfig { grid: 32, steps: 5, blobs: 2, ..Default::default() };
        let (frames, meta) = synth_advection_dataset::<f64>(&cfg).unwrap();
        assert_eq!(frames.len(), 5);
        assert_eq!(meta.velocity, (1.0, 0.0));
        // 1 px/step along x on the torus: next frame is the previous shifted
        for t in 0..4 {
            let (h, w) = frames[t].dim();
            for i in 0..h - 1 {
                for j in 0..w {
                    let a = frames[t].values[[i, j]];
                    let b = frames[t + 1].values[[i + 1, j]];
                    assert!((a - b).abs() < 1e-12, "t={t} ({i},{j})");
                }
            }
        }
        // static config: every frame identical
        let static_cfg = SynthConfig {
            grid: 32,
            steps: 4,
            velocity: (0.0, 0.0),
            ..Default::default()
        };
        let (static_frames, _) = synth_advection_dataset::<f64>(&static_cfg).unwrap();
        for t in 1..4 {
            assert_eq!(static_frames[t].values, static_frames[0].values);
        }
        // same seed, bitwise identical
        let (again, _) = synth_advection_dataset::<f64>(&cfg).unwrap();
        for (a, b) in frames.iter().zip(&again) {
            assert_eq!(a.values, b.values);
        }
        // invalid grid
        let bad = SynthConfig { grid: 63, ..Default::default() };
        assert!(synth_advection_dataset::<f64>(&bad).is_err());
    }

    #[test]
    fn dataset_disk_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { grid: 16, steps: 3, blobs: 2, seed: 3, ..Default::default() };
        let (frames, meta) = synth_advection_dataset::<f32>(&cfg).unwrap();
        write_dataset(dir.path(), &frames, Some(&meta)).unwrap();
        let index = read_index(dir.path()).unwrap();
        assert_eq!(index.len(), 3);
        let loaded: RadarFrame<f32> = load_frame(dir.path(), index[0].0).unwrap();
        // round trip through the byte scale is exact on quantized values
        let original_quantized = frames[0].values.mapv(mldbz_to_byte);
        let loaded_quantized = loaded.values.mapv(mldbz_to_byte);
        assert_eq!(original_quantized, loaded_quantized);
    }

    #[test]
    fn manifest_round_trip_verifies_disjointness() {
        let situations: Vec<PrecipSituation> = (0..6)
            .map(|i| PrecipSituation { timestamps: vec![ts(i * 25 * 60), ts(i * 25 * 60 + 10)] })
            .collect();
        let split = assign_splits(situations, [0.5, 0.25, 0.25], 9).unwrap();
        let manifest = SplitManifest::from_split(&split);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("split.json");
        manifest.save(&path).unwrap();
        let loaded = SplitManifest::load(&path).unwrap();
        let round = loaded.to_split().unwrap();
        assert_eq!(round.train.len(), split.train.len());
        // corrupt: duplicate a timestamp across splits
        let mut bad = manifest.clone();
        bad.test[0] = bad.train[0].clone();
        assert!(bad.to_split().is_err());
    }
}
