//! Command-level behavior: exit codes, flag plumbing and reproducibility.

use std::path::Path;
use std::process::{Command, Output};

fn phynow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phynow"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).to_string()
}

#[test]
fn gen_synth_rejects_indivisible_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = phynow(&["gen-synth", "--out", dir.path().to_str().unwrap(), "--grid", "63"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr_of(&out));
    assert!(stderr_of(&out).contains("multiple of 4"));
}

#[test]
fn gen_synth_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out_dir in [&a, &b] {
        let out = phynow(&[
            "gen-synth", "--out", out_dir.to_str().unwrap(),
            "--grid", "16", "--steps", "4", "--blobs", "2", "--seed", "7",
        ]);
        assert!(out.status.success(), "{}", stderr_of(&out));
    }
    let mut names: Vec<String> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 4 + 2, "four frames plus index and metadata");
    for name in names {
        let left = std::fs::read(a.join(&name)).unwrap();
        let right = std::fs::read(b.join(&name)).unwrap();
        assert_eq!(left, right, "{name} differs between identical runs");
    }
}

#[test]
fn split_requires_index_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = phynow(&["split", "--data", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("index.txt"));
}

#[test]
fn split_at_paper_ratios_recovers_table_counts() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    // 275 situations of 6 tiny frames each
    let out = phynow(&[
        "gen-synth", "--out", data.to_str().unwrap(),
        "--grid", "16", "--steps", "6", "--blobs", "2",
        "--situations", "275", "--gap-hours", "25", "--seed", "3",
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let out = phynow(&["split", "--data", data.to_str().unwrap(), "--data.seed", "11"]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(
        stdout.contains("275 situations -> train 198, validation 35, test 42"),
        "unexpected split summary: {stdout}"
    );
    // the manifest reloads and re-verifies disjointness
    assert!(data.join("split.json").exists());
}

fn make_trained_checkpoint(root: &Path, variant: &str) -> (String, String) {
    let data = root.join("data");
    let ckpt = root.join("model.ckpt");
    let out = phynow(&[
        "gen-synth", "--out", data.to_str().unwrap(),
        "--grid", "32", "--steps", "10", "--blobs", "3", "--situations", "3", "--seed", "5",
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let out = phynow(&[
        "split", "--data", data.to_str().unwrap(),
        "--data.ratios", "0.5,0.25,0.25", "--data.seed", "1",
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let k = if variant == "baseline" { "7" } else { "3" };
    let out = phynow(&[
        "train", "--data", data.to_str().unwrap(),
        "--out", ckpt.to_str().unwrap(),
        "--model.variant", variant, "--model.k", k,
        "--model.latent_channels", "8",
        "--model.tau_in", "2", "--model.tau_out", "2",
        "--model.residual", "false",
        "--train.epochs", "1", "--train.batch_size", "4", "--train.seed", "3",
        "--no-validation",
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    (
        data.to_str().unwrap().to_string(),
        ckpt.to_str().unwrap().to_string(),
    )
}

/// Variant tag as stored in the checkpoint's JSON header.
fn checkpoint_variant(path: &str) -> String {
    let bytes = std::fs::read(path).unwrap();
    assert_eq!(&bytes[..8], b"PHYNCKPT");
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[20..20 + header_len]).unwrap();
    header["model"]["variant"].as_str().unwrap().to_string()
}

#[test]
fn train_tags_checkpoint_with_variant() {
    let dir = tempfile::tempdir().unwrap();
    let (_, ckpt) = make_trained_checkpoint(dir.path(), "advdiff");
    assert_eq!(checkpoint_variant(&ckpt), "advdiff");
}

#[test]
fn advection_plot_requires_advdiff_variant() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = make_trained_checkpoint(dir.path(), "baseline");
    let out = phynow(&[
        "plot", "--kind", "advection",
        "--checkpoint", &ckpt, "--data", &data,
        "--start", "202101010000",
        "--out", dir.path().join("adv.png").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("no advection field"), "{}", stderr_of(&out));
}

#[test]
fn predict_and_plots_produce_decodable_images() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = make_trained_checkpoint(dir.path(), "advdiff");
    let preds = dir.path().join("preds");
    let out = phynow(&[
        "predict", "--checkpoint", &ckpt, "--data", &data,
        "--start", "202101010000", "--out-dir", preds.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", stderr_of(&out));
    let count = std::fs::read_dir(&preds).unwrap().count();
    assert_eq!(count, 2, "tau_out predictions written");
    for entry in std::fs::read_dir(&preds).unwrap() {
        let img = image::open(entry.unwrap().path()).unwrap();
        assert_eq!((img.width(), img.height()), (32, 32));
    }
    let cases: [(&str, Vec<&str>); 3] = [
        ("advection", vec!["--start", "202101010000"]),
        ("branches", vec!["--start", "202101010000"]),
        ("mae-curve", vec![]),
    ];
    for (kind, extra) in cases {
        let path = dir.path().join(format!("{kind}.png"));
        let mut args = vec![
            "plot", "--kind", kind, "--checkpoint", ckpt.as_str(), "--data", data.as_str(),
            "--out",
        ];
        let path_s = path.to_str().unwrap().to_string();
        args.push(&path_s);
        args.extend(extra);
        let out = phynow(&args);
        assert!(out.status.success(), "{kind}: {}", stderr_of(&out));
        assert!(image::open(&path).is_ok(), "{kind} must be a decodable PNG");
    }
}

#[test]
fn eval_is_reproducible_on_same_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = make_trained_checkpoint(dir.path(), "advdiff");
    let run_eval = |tag: &str| -> Vec<u8> {
        let out_dir = dir.path().join(tag);
        let out = phynow(&[
            "eval", "--checkpoint", &ckpt, "--data", &data,
            "--subset", "test", "--out-dir", out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", stderr_of(&out));
        std::fs::read(out_dir.join("report.csv")).unwrap()
    };
    assert_eq!(run_eval("e1"), run_eval("e2"));
}

#[test]
fn unknown_plot_kind_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let (data, ckpt) = make_trained_checkpoint(dir.path(), "advdiff");
    let out = phynow(&[
        "plot", "--kind", "spectrogram", "--checkpoint", &ckpt, "--data", &data,
        "--out", dir.path().join("x.png").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
}
