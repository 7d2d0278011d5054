//! Drives the CLI binary through a whole experiment on a tiny configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const TINY: &str = r#"{
  "model": {"window_len": 100, "patch_len": 10, "d_model": 16, "n_layers": 1,
            "n_heads": 2, "ff_dim": 32},
  "adaptation": {"train": {"epochs": 1, "learning_rate": 0.003},
                 "convergence_epochs": 2, "checkpoint_every": 1},
  "data": {"benchmark": {"healthy_subjects": 2, "healthy_sets": 1,
                         "retention_subjects": 1, "retention_sets": 1,
                         "stroke_severities": [0.5]},
           "window_stride": 400, "pretrain_stride": 400,
           "pretrain": {"epochs": 1}},
  "metrics": {"hop": 50},
  "grid": {"learning_rate": [0.001, 0.003]},
  "budget": {"budgets": [0, 1, "all"], "repeats": 2}
}"#;

pub fn emgadapt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emgadapt"))
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn ok(args: &[&str]) {
    let out = emgadapt(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Every file under `dir` keyed by its relative path.
pub fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

pub fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    fs::write(&path, TINY).unwrap();
    path
}

/// Runs every offline subcommand into `out` and returns the reports and
/// checkpoints it wrote.
pub fn pipeline(config: &Path, data: &Path, out: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let common = ["--config", s(config), "--seed", "7", "--out", s(out)];
    let with = |cmd: &str, extra: &[&str]| {
        let mut args = vec![cmd];
        args.extend_from_slice(&common);
        args.extend_from_slice(&["--data", s(data)]);
        args.extend_from_slice(extra);
        ok(&args);
    };
    with("pretrain", &[]);
    let healthy = out.join("checkpoints/healthy.emgm");
    let init = ["--init-checkpoint", s(&healthy)];
    with(
        "cv-search",
        &[&["--variant", "head-only"], &init[..]].concat(),
    );
    let cv = out.join("reports/cv-head_only.json");
    assert!(cv.exists(), "missing {}", cv.display());
    with(
        "finetune",
        &[
            &["--variant", "head-only", "--cv-report", s(&cv)],
            &init[..],
        ]
        .concat(),
    );
    with("finetune", &[&["--variant", "lora"], &init[..]].concat());
    with("eval", &[&["--variant", "zero-shot"], &init[..]].concat());
    with("eval", &[&["--variant", "scratch"][..]].concat());
    with(
        "budget-sweep",
        &[&["--variant", "full"], &init[..]].concat(),
    );
    with(
        "convergence",
        &[&["--variants", "head_only,full"], &init[..]].concat(),
    );
    files(out)
        .into_iter()
        .filter(|(rel, _)| rel.starts_with("reports") || rel.starts_with("checkpoints"))
        .collect()
}
