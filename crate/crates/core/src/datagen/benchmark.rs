//! The synthetic benchmark: a healthy pretraining corpus, held-out healthy
//! retention subjects and stroke subjects with train and shifted test sets.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::shift::rotate_channels;
use super::{
    apply_shift, derive_seed, make_set_timeline, sample_subject, synthesize, Population, Recording,
    SetKind, Shift, ShiftParams, SubjectProfile, TimelineKind,
};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkConfig {
    pub healthy_subjects: usize,
    pub healthy_sets: usize,
    pub retention_subjects: usize,
    pub retention_sets: usize,
    /// One stroke subject per entry, in subject order.
    pub stroke_severities: Vec<f32>,
    pub stroke_train_sets: usize,
    /// Per-set gain jitter (relative) and electrode re-placement jitter (degrees).
    pub set_gain_jitter: f32,
    pub set_rotation_jitter_deg: f32,
    pub shift: ShiftParams,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            healthy_subjects: 40,
            healthy_sets: 4,
            retention_subjects: 2,
            retention_sets: 2,
            stroke_severities: vec![0.8, 0.5, 0.3],
            stroke_train_sets: 4,
            set_gain_jitter: 0.1,
            set_rotation_jitter_deg: 7.0,
            shift: ShiftParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubjectData {
    pub profile: SubjectProfile,
    pub train: Vec<Recording>,
    pub test: Vec<Recording>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Benchmark {
    pub seed: u64,
    pub config: BenchmarkConfig,
    pub healthy: Vec<SubjectData>,
    pub retention: Vec<SubjectData>,
    pub stroke: Vec<SubjectData>,
}

const ROLE_HEALTHY: u64 = 1;
const ROLE_RETENTION: u64 = 2;
const ROLE_STROKE: u64 = 3;

/// One session's recording: the subject re-dons the armband, so each set gets
/// its own small gain and placement perturbation.
fn session(
    profile: &SubjectProfile,
    kind: TimelineKind,
    cfg: &BenchmarkConfig,
    seed: u64,
) -> Result<Recording> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0]));
    let gain = 1.0 + rng.gen_range(-1.0..=1.0) * cfg.set_gain_jitter;
    let degrees = rng.gen_range(-1.0..=1.0) * cfg.set_rotation_jitter_deg;
    let mut rec = synthesize(profile, &make_set_timeline(kind), derive_seed(seed, &[1]))?;
    let c = rec.channels();
    let rotated = rotate_channels(rec.samples.data(), c, degrees);
    for (dst, v) in rec.samples.data_mut().iter_mut().zip(rotated) {
        *dst = v * gain;
    }
    Ok(rec)
}

fn healthy_like(
    role: u64,
    index: usize,
    sets: usize,
    seed: u64,
    cfg: &BenchmarkConfig,
) -> Result<SubjectData> {
    let (prefix, condition) = if role == ROLE_HEALTHY {
        ("H", "baseline")
    } else {
        ("R", "retention")
    };
    let id = format!("{prefix}{:02}", index + 1);
    let s = derive_seed(seed, &[role, index as u64]);
    let profile = sample_subject(Population::Healthy, 0.0, derive_seed(s, &[0]), &id)?;
    let recs = (0..sets)
        .map(|i| {
            let mut r = session(
                &profile,
                TimelineKind::Standard,
                cfg,
                derive_seed(s, &[1, i as u64]),
            )?;
            r.condition = condition.to_string();
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(if role == ROLE_HEALTHY {
        SubjectData {
            profile,
            train: recs,
            test: Vec::new(),
        }
    } else {
        SubjectData {
            profile,
            train: Vec::new(),
            test: recs,
        }
    })
}

fn stroke_subject(
    index: usize,
    severity: f32,
    seed: u64,
    cfg: &BenchmarkConfig,
) -> Result<SubjectData> {
    let id = format!("S{}", index + 1);
    let s = derive_seed(seed, &[ROLE_STROKE, index as u64]);
    let profile = sample_subject(Population::Stroke, severity, derive_seed(s, &[0]), &id)?;
    let train = (0..cfg.stroke_train_sets)
        .map(|i| {
            session(
                &profile,
                TimelineKind::Standard,
                cfg,
                derive_seed(s, &[1, i as u64]),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut test = Vec::new();
    for (j, kind) in SetKind::TESTS.into_iter().enumerate() {
        let rs = derive_seed(s, &[2, j as u64]);
        let (timeline, shift, condition) = match kind {
            SetKind::TestDriftMid => (
                TimelineKind::Standard,
                Shift::Drift {
                    start: 0.0,
                    end: 0.5,
                },
                "drift_mid",
            ),
            SetKind::TestDriftEnd => (
                TimelineKind::Standard,
                Shift::Drift {
                    start: 0.5,
                    end: 1.0,
                },
                "drift_end",
            ),
            SetKind::TestPosture => (TimelineKind::Standard, Shift::Posture, "posture"),
            SetKind::TestRotation => (
                TimelineKind::Standard,
                Shift::Rotation { degrees: 15.0 },
                "rotation",
            ),
            SetKind::TestDevice => (TimelineKind::ClosingOnly, Shift::Device, "device"),
            SetKind::Train => unreachable!("tests only"),
        };
        let clean = session(&profile, timeline, cfg, rs)?;
        let mut rec = apply_shift(&clean, shift, &cfg.shift, derive_seed(rs, &[9]))?;
        rec.set_kind = kind;
        rec.condition = condition.to_string();
        test.push(rec);
    }
    Ok(SubjectData {
        profile,
        train,
        test,
    })
}

pub fn build_benchmark(seed: u64, cfg: &BenchmarkConfig) -> Result<Benchmark> {
    let healthy = (0..cfg.healthy_subjects)
        .into_par_iter()
        .map(|i| healthy_like(ROLE_HEALTHY, i, cfg.healthy_sets, seed, cfg))
        .collect::<Result<Vec<_>>>()?;
    let retention = (0..cfg.retention_subjects)
        .into_par_iter()
        .map(|i| healthy_like(ROLE_RETENTION, i, cfg.retention_sets, seed, cfg))
        .collect::<Result<Vec<_>>>()?;
    let stroke = cfg
        .stroke_severities
        .par_iter()
        .enumerate()
        .map(|(i, &sev)| stroke_subject(i, sev, seed, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(Benchmark {
        seed,
        config: cfg.clone(),
        healthy,
        retention,
        stroke,
    })
}

#[derive(Serialize, Deserialize)]
struct SubjectManifest {
    subject_id: String,
    population: Population,
    severity: f32,
    train: Vec<String>,
    test: Vec<TestEntry>,
    sha256: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct TestEntry {
    file: String,
    set_kind: SetKind,
}

#[derive(Serialize, Deserialize)]
struct TreeManifest {
    seed: u64,
    config: BenchmarkConfig,
    healthy: Vec<String>,
    retention: Vec<String>,
    stroke: Vec<String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_subject(dir: &Path, s: &SubjectData) -> Result<()> {
    let sub = dir.join(&s.profile.subject_id);
    fs::create_dir_all(&sub)?;
    let mut sha = BTreeMap::new();
    let mut train = Vec::new();
    for (i, r) in s.train.iter().enumerate() {
        let name = format!("train_{i}.emgr");
        let bytes = super::recording_bytes(r)?;
        sha.insert(name.clone(), sha256_hex(&bytes));
        fs::write(sub.join(&name), bytes)?;
        train.push(name);
    }
    let mut test = Vec::new();
    for (i, r) in s.test.iter().enumerate() {
        let name = if r.set_kind == SetKind::Train {
            format!("test_{i}.emgr")
        } else {
            format!("{}.emgr", r.set_kind)
        };
        let bytes = super::recording_bytes(r)?;
        sha.insert(name.clone(), sha256_hex(&bytes));
        fs::write(sub.join(&name), bytes)?;
        test.push(TestEntry {
            file: name,
            set_kind: r.set_kind,
        });
    }
    fs::write(
        sub.join("profile.json"),
        serde_json::to_vec_pretty(&s.profile)?,
    )?;
    let manifest = SubjectManifest {
        subject_id: s.profile.subject_id.clone(),
        population: s.profile.population,
        severity: s.profile.severity,
        train,
        test,
        sha256: sha,
    };
    fs::write(
        sub.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Writes one directory per subject plus a top-level `manifest.json`.
pub fn write_benchmark(bench: &Benchmark, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let all: Vec<&SubjectData> = bench
        .healthy
        .iter()
        .chain(&bench.retention)
        .chain(&bench.stroke)
        .collect();
    all.par_iter()
        .map(|s| write_subject(dir, s))
        .collect::<Result<Vec<_>>>()?;
    let ids = |v: &[SubjectData]| v.iter().map(|s| s.profile.subject_id.clone()).collect();
    let manifest = TreeManifest {
        seed: bench.seed,
        config: bench.config.clone(),
        healthy: ids(&bench.healthy),
        retention: ids(&bench.retention),
        stroke: ids(&bench.stroke),
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

fn read_subject(dir: &Path, id: &str) -> Result<SubjectData> {
    let sub = dir.join(id);
    let manifest: SubjectManifest =
        serde_json::from_slice(&fs::read(sub.join("manifest.json"))?)
            .map_err(|e| Error::Format(format!("{id}/manifest.json: {e}")))?;
    let profile: SubjectProfile = serde_json::from_slice(&fs::read(sub.join("profile.json"))?)
        .map_err(|e| Error::Format(format!("{id}/profile.json: {e}")))?;
    let load = |name: &str| -> Result<Recording> {
        let bytes = fs::read(sub.join(name))?;
        if let Some(expected) = manifest.sha256.get(name) {
            if &sha256_hex(&bytes) != expected {
                return Err(Error::Checksum(format!(
                    "{id}/{name} does not match its manifest digest"
                )));
            }
        }
        super::format::parse_recording(&bytes)
    };
    let train = manifest
        .train
        .iter()
        .map(|n| load(n))
        .collect::<Result<Vec<_>>>()?;
    let test = manifest
        .test
        .iter()
        .map(|e| {
            let r = load(&e.file)?;
            if r.set_kind != e.set_kind {
                return Err(Error::Manifest(format!(
                    "{id}/{} is tagged {} in the manifest",
                    e.file, e.set_kind
                )));
            }
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SubjectData {
        profile,
        train,
        test,
    })
}

pub fn read_benchmark(dir: impl AsRef<Path>) -> Result<Benchmark> {
    let dir = dir.as_ref();
    let manifest: TreeManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)
        .map_err(|e| Error::Format(format!("benchmark manifest: {e}")))?;
    let load = |ids: &[String]| {
        ids.par_iter()
            .map(|id| read_subject(dir, id))
            .collect::<Result<Vec<_>>>()
    };
    Ok(Benchmark {
        seed: manifest.seed,
        config: manifest.config.clone(),
        healthy: load(&manifest.healthy)?,
        retention: load(&manifest.retention)?,
        stroke: load(&manifest.stroke)?,
    })
}

/// SHA-256 of every file under `dir`, keyed by relative path.
pub fn tree_checksums(dir: impl AsRef<Path>) -> Result<BTreeMap<String, String>> {
    fn walk(root: &Path, at: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
        let mut entries: Vec<PathBuf> = fs::read_dir(at)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out)?;
            } else {
                let rel = p
                    .strip_prefix(root)
                    .expect("under root")
                    .to_string_lossy()
                    .replace('\\', "/");
                out.insert(rel, sha256_hex(&fs::read(&p)?));
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir.as_ref(), dir.as_ref(), &mut out)?;
    Ok(out)
}
