use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, Utc};
use ndarray::Array2;

use phynow_core::data::{
    self, DatasetSplit, Sample, SplitManifest, SynthConfig, load_samples, parse_timestamp,
    synth_advection_dataset, write_dataset,
};
use phynow_core::error::{Error, Result};
use phynow_core::evalkit::{self, EvalConfig, Persistence, evaluate, plots};
use phynow_core::phycell::{PhyVariant, infer_advection};
use phynow_core::phydnet::{CellMemory, Forecaster, PhyDNet};
use phynow_core::training::{load_checkpoint, save_checkpoint, train};

use crate::Command;
use crate::config::{FileConfig, resolve_model_config, resolve_train_config};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenSynth {
            out,
            grid,
            steps,
            blobs,
            velocity,
            diffusion,
            noise,
            seed,
            situations,
            gap_hours,
        } => gen_synth(out, grid, steps, blobs, &velocity, diffusion, noise, seed, situations, gap_hours),
        Command::Split { data, ratios, seed, config, out } => split(&data, ratios, seed, config, out),
        Command::Train { data, split, out, history, config, model, train, no_validation } => {
            cmd_train(&data, split, &out, history, config, model, train, no_validation)
        }
        Command::Eval { checkpoint, data, split, subset, out_dir, config, thresholds, tau_out, baseline } => {
            cmd_eval(&checkpoint, &data, split, &subset, &out_dir, config, thresholds, tau_out, baseline)
        }
        Command::Predict { checkpoint, data, start, out_dir, tau_out } => {
            cmd_predict(&checkpoint, &data, &start, &out_dir, tau_out)
        }
        Command::Plot { kind, checkpoint, data, start, split, out, stride } => {
            cmd_plot(&kind, &checkpoint, &data, start, split, &out, stride)
        }
    }
}

fn parse_velocity(s: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(Error::InvalidConfig(format!("velocity '{s}' must be 'vx,vy'")));
    }
    let vx = parts[0].trim().parse::<f64>().map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let vy = parts[1].trim().parse::<f64>().map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok((vx, vy))
}

fn parse_ratios(s: &str) -> Result<[f64; 3]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| Error::InvalidConfig(e.to_string())))
        .collect::<Result<_>>()?;
    if parts.len() != 3 {
        return Err(Error::InvalidConfig(format!("ratios '{s}' must be 'train,val,test'")));
    }
    Ok([parts[0], parts[1], parts[2]])
}

#[allow(clippy::too_many_arguments)]
fn gen_synth(
    out: PathBuf,
    grid: usize,
    steps: usize,
    blobs: usize,
    velocity: &str,
    diffusion: f64,
    noise: f64,
    seed: u64,
    situations: usize,
    gap_hours: i64,
) -> Result<()> {
    let cfg = SynthConfig {
        grid,
        steps,
        blobs,
        velocity: parse_velocity(velocity)?,
        diffusion,
        noise,
        seed,
        situations,
        gap_hours,
        ..SynthConfig::default()
    };
    let (frames, meta) = synth_advection_dataset::<f32>(&cfg)?;
    write_dataset(&out, &frames, Some(&meta))?;
    println!(
        "wrote {} frames ({} situations of {}) to {}",
        frames.len(),
        situations,
        steps,
        out.display()
    );
    Ok(())
}

fn default_split_path(data: &Path) -> PathBuf {
    data.join("split.json")
}

fn split(
    data: &Path,
    ratios: Option<String>,
    seed: Option<u64>,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let file = FileConfig::load(config.as_deref())?;
    let ratios = match ratios {
        Some(s) => parse_ratios(&s)?,
        None => match &file.data.ratios {
            Some(r) if r.len() == 3 => [r[0], r[1], r[2]],
            Some(r) => {
                return Err(Error::InvalidConfig(format!(
                    "data.ratios must have 3 entries, got {}",
                    r.len()
                )));
            }
            None => [0.72, 0.127, 0.153],
        },
    };
    let seed = seed.or(file.data.seed).unwrap_or(0);
    let index = data::read_index(data)?;
    let rainy: Vec<DateTime<Utc>> =
        index.iter().filter(|(_, r)| *r).map(|(ts, _)| *ts).collect();
    let situations = data::split_situations(&rainy);
    let n = situations.len();
    let split = data::assign_splits(situations, ratios, seed)?;
    data::verify_disjoint(&split)?;
    let manifest = SplitManifest::from_split(&split);
    let path = out.unwrap_or_else(|| default_split_path(data));
    manifest.save(&path)?;
    println!(
        "{} situations -> train {}, validation {}, test {} ({})",
        n,
        split.train.len(),
        split.validation.len(),
        split.test.len(),
        path.display()
    );
    Ok(())
}

fn load_split(data: &Path, split_path: Option<PathBuf>) -> Result<DatasetSplit> {
    let path = split_path.unwrap_or_else(|| default_split_path(data));
    SplitManifest::load(&path)?.to_split()
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    data: &Path,
    split_path: Option<PathBuf>,
    out: &Path,
    history_path: Option<PathBuf>,
    config_path: Option<PathBuf>,
    model_flags: crate::config::ModelFlags,
    train_flags: crate::config::TrainFlags,
    no_validation: bool,
) -> Result<()> {
    let file = FileConfig::load(config_path.as_deref())?;
    let model_cfg = resolve_model_config(&file, &model_flags)?;
    let train_cfg = resolve_train_config(&file, &train_flags)?;
    let split = load_split(data, split_path)?;
    let train_samples: Vec<Sample<f32>> = load_samples(
        data,
        &split.train,
        model_cfg.tau_in,
        model_cfg.tau_out,
        model_cfg.delta_minutes,
    )?;
    let validation_samples: Vec<Sample<f32>> = if no_validation {
        Vec::new()
    } else {
        load_samples(
            data,
            &split.validation,
            model_cfg.tau_in,
            model_cfg.tau_out,
            model_cfg.delta_minutes,
        )?
    };
    println!(
        "training on {} samples ({} validation), variant {}",
        train_samples.len(),
        validation_samples.len(),
        model_cfg.variant.name()
    );
    let mut model = PhyDNet::<f32>::seeded(model_cfg, train_cfg.seed)?;
    let history = train(&mut model, &train_samples, &validation_samples, &train_cfg)?;
    save_checkpoint(out, &model, Some(&train_cfg))?;
    if let Some(path) = history_path {
        fs::write(&path, history.to_csv())?;
        println!("history written to {}", path.display());
    }
    println!("checkpoint written to {}", out.display());
    Ok(())
}

fn subset_situations<'s>(split: &'s DatasetSplit, subset: &str) -> Result<&'s [data::PrecipSituation]> {
    match subset {
        "train" => Ok(&split.train),
        "validation" => Ok(&split.validation),
        "test" => Ok(&split.test),
        other => Err(Error::InvalidConfig(format!(
            "unknown subset '{other}' (expected train, validation or test)"
        ))),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    split_path: Option<PathBuf>,
    subset: &str,
    out_dir: &Path,
    config: Option<PathBuf>,
    thresholds: Option<Vec<f64>>,
    tau_out: Option<usize>,
    baseline: bool,
) -> Result<()> {
    let file = FileConfig::load(config.as_deref())?;
    let thresholds = thresholds.or(file.eval.thresholds_dbz.clone());
    let tau_out = tau_out.or(file.eval.tau_out);
    let (model, _) = load_checkpoint::<f32>(checkpoint)?;
    let split = load_split(data, split_path)?;
    let situations = subset_situations(&split, subset)?;
    let tau_out = tau_out.unwrap_or(model.config.tau_out);
    let samples: Vec<Sample<f32>> = load_samples(
        data,
        situations,
        model.config.tau_in,
        tau_out,
        model.config.delta_minutes,
    )?;
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let cfg = EvalConfig {
        thresholds_dbz: thresholds.unwrap_or_else(|| vec![8.0, 40.0]),
        tau_out,
    };
    let report = evaluate(&model, &samples, &cfg)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("report.csv"), report.to_csv())?;
    fs::write(out_dir.join("summary.txt"), report.summary())?;
    if baseline {
        let base = evaluate(&Persistence, &samples, &cfg)?;
        fs::write(out_dir.join("baseline_report.csv"), base.to_csv())?;
        if let Some(rel) = report.relative_change(&base) {
            let mut table = String::from("metric,relative_change\n");
            for (name, value) in rel {
                table.push_str(&format!("{name},{value}\n"));
            }
            fs::write(out_dir.join("relative_change.csv"), table)?;
        }
    }
    println!("evaluated {} samples; reports in {}", samples.len(), out_dir.display());
    print!("{}", report.summary());
    Ok(())
}

/// Pull `count` frames at exact delta spacing starting at `start`.
fn load_sequence(
    data: &Path,
    start: DateTime<Utc>,
    count: usize,
    delta_minutes: i64,
) -> Result<Vec<Array2<f32>>> {
    let mut frames = Vec::with_capacity(count);
    for i in 0..count {
        let ts = start + Duration::minutes(delta_minutes * i as i64);
        let frame = data::load_frame::<f32>(data, ts)?;
        frames.push(frame.values);
    }
    Ok(frames)
}

fn cmd_predict(
    checkpoint: &Path,
    data: &Path,
    start: &str,
    out_dir: &Path,
    tau_out: Option<usize>,
) -> Result<()> {
    let (model, _) = load_checkpoint::<f32>(checkpoint)?;
    let start = parse_timestamp(start)?;
    let inputs = load_sequence(data, start, model.config.tau_in, model.config.delta_minutes)?;
    let tau_out = tau_out.unwrap_or(model.config.tau_out);
    let bundles = model.forecast(&inputs, tau_out)?;
    fs::create_dir_all(out_dir)?;
    let first_lead =
        start + Duration::minutes(model.config.delta_minutes * model.config.tau_in as i64);
    for (i, bundle) in bundles.iter().enumerate() {
        let ts = first_lead + Duration::minutes(model.config.delta_minutes * i as i64);
        let stamp = data::format_timestamp(ts);
        data::write_gray_png(&bundle.intensity, &out_dir.join(format!("pred_{stamp}.png")))?;
        if let Some(prob) = &bundle.prob {
            data::write_gray_png(prob, &out_dir.join(format!("prob_{stamp}.png")))?;
        }
    }
    println!("wrote {} predictions to {}", bundles.len(), out_dir.display());
    Ok(())
}

fn cmd_plot(
    kind: &str,
    checkpoint: &Path,
    data: &Path,
    start: Option<String>,
    split_path: Option<PathBuf>,
    out: &Path,
    stride: usize,
) -> Result<()> {
    let (model, _) = load_checkpoint::<f32>(checkpoint)?;
    match kind {
        "branches" => {
            let start = parse_timestamp(&start.ok_or_else(|| {
                Error::InvalidConfig("--start is required for branch plots".into())
            })?)?;
            let inputs =
                load_sequence(data, start, model.config.tau_in, model.config.delta_minutes)?;
            let dec = model.decompose_branches(&inputs, model.config.tau_out)?;
            let combined: Vec<&Array2<f32>> = dec.combined.iter().map(|b| &b.intensity).collect();
            let physical: Vec<&Array2<f32>> = dec.physical.iter().collect();
            let residual: Vec<&Array2<f32>> = dec.residual.iter().collect();
            plots::plot_montage(&[combined, physical, residual], out)?;
        }
        "advection" => {
            if model.config.variant != PhyVariant::AdvDiff {
                return Err(Error::InvalidConfig(format!(
                    "variant {} has no advection field",
                    model.config.variant.name()
                )));
            }
            let start = parse_timestamp(&start.ok_or_else(|| {
                Error::InvalidConfig("--start is required for advection plots".into())
            })?)?;
            let inputs =
                load_sequence(data, start, model.config.tau_in, model.config.delta_minutes)?;
            // warm up over the inputs, then inspect the physical latent
            let (h, w) = inputs[0].dim();
            let mut memory = CellMemory::zeros(&model.config, h / 4, w / 4);
            for frame in &inputs {
                let (_, m) = model.step(frame, &memory)?;
                memory = m;
            }
            let field = infer_advection(&memory.h_p, &model.phycell)?;
            let background = model.decode(&memory.h_p)?;
            plots::plot_advection(&field, &background, out, stride)?;
        }
        "mae-curve" => {
            let split = load_split(data, split_path)?;
            let samples: Vec<Sample<f32>> = load_samples(
                data,
                &split.test,
                model.config.tau_in,
                model.config.tau_out,
                model.config.delta_minutes,
            )?;
            if samples.is_empty() {
                return Err(Error::EmptyDataset);
            }
            let cfg = EvalConfig { thresholds_dbz: vec![8.0, 40.0], tau_out: model.config.tau_out };
            let model_report = evaluate(&model, &samples, &cfg)?;
            let persist_report = evaluate(&Persistence, &samples, &cfg)?;
            let curve = |r: &evalkit::MetricReport<f32>| {
                (1..=model.config.tau_out)
                    .map(|t| r.row(Some(t)).unwrap().mae as f64)
                    .collect::<Vec<f64>>()
            };
            plots::plot_curves(
                &[("model", curve(&model_report)), ("persistence", curve(&persist_report))],
                out,
            )?;
        }
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown plot kind '{other}' (expected branches, advection or mae-curve)"
            )));
        }
    }
    println!("figure written to {}", out.display());
    Ok(())
}
