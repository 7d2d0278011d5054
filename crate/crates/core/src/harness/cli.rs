//! Command-line entry point.

use std::ffi::OsString;
use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{
    budget_sweep, convergence_run, cv_select, final_train_eval, pretrain, CvOutcome,
    ExperimentConfig,
};
use crate::adaptation::{save_adapters, AdaptationSpec, Variant};
use crate::datagen::{
    build_benchmark, read_benchmark, write_benchmark, Benchmark, Recording, SubjectData,
};
use crate::error::{Error, Result};
use crate::metrics::evaluate_testsuite;
use crate::model::{load_checkpoint, save_checkpoint, Model};
use crate::stream::{read_source, run_stream, StreamConfig};

#[derive(Parser, Debug)]
#[command(
    name = "emgadapt",
    version,
    about = "Healthy-to-stroke sEMG intent-detection transfer learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// JSON experiment configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default: runs/<unix-time>-s<seed>).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Benchmark directory written by gen-data.
    #[arg(long, default_value = "bench")]
    data: PathBuf,
    /// Stroke subject to run (repeatable; default: every subject).
    #[arg(long = "subject")]
    subjects: Vec<String>,
}

#[derive(Args, Debug, Clone)]
struct VariantArgs {
    #[arg(long, default_value = "full")]
    variant: Variant,
    /// Healthy-pretrained checkpoint.
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    /// Cross-validation report whose selected configuration to use.
    #[arg(long)]
    cv_report: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic benchmark tree.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain the healthy model.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Adapt to each stroke subject's training sets and save checkpoints.
    Finetune {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        variant: VariantArgs,
    },
    /// Retrain (unless zero-shot) and evaluate on the five test sets, or
    /// evaluate an adapted checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        variant: VariantArgs,
        /// Adapted checkpoint to evaluate as is.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Four-fold cross-validated grid search.
    CvSearch {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        variant: VariantArgs,
    },
    /// Data-budget sweep over attempt pairs.
    BudgetSweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        variant: VariantArgs,
    },
    /// Long training with periodic checkpoints and healthy-retention tracking.
    Convergence {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        init_checkpoint: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "head_only,lora,full")]
        variants: Vec<Variant>,
        #[arg(long)]
        cv_report: Option<PathBuf>,
    },
    /// Real-time inference over a recording replay or a TCP sample stream.
    Stream {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// A recording file, or tcp:PORT to accept one client.
        #[arg(long)]
        input: String,
        /// Replay speed relative to real time; 0 replays losslessly at full speed.
        #[arg(long, default_value_t = 1.0)]
        realtime: f32,
        #[arg(long)]
        report: Option<PathBuf>,
        /// Command events as JSON lines.
        #[arg(long)]
        commands: Option<PathBuf>,
        #[arg(long)]
        hop: Option<usize>,
    },
}

/// Runs the CLI and returns the process exit code: 0 on success, 2 on usage
/// or configuration errors, 3 on data errors.
pub fn run_cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    if let Some(n) = std::env::var("EMGADAPT_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
    {
        // Fails only when a pool already exists, which is then kept.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global();
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    let cfg = match path {
        Some(p) => {
            let bytes = fs::read(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            serde_json::from_slice(&bytes)
                .map_err(|e| Error::Config(format!("config {}: {e}", p.display())))?
        }
        None => ExperimentConfig::default(),
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Output directory plus the append-only experiment log.
struct Run {
    dir: PathBuf,
    started: Instant,
}

impl Run {
    fn open(common: &Common) -> Result<Self> {
        let dir = match &common.out {
            Some(d) => d.clone(),
            None => {
                let secs = SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .map(|d| d.as_secs())
                    .unwrap_or(0);
                PathBuf::from("runs").join(format!("{secs}-s{}", common.seed))
            }
        };
        fs::create_dir_all(dir.join("reports"))?;
        fs::create_dir_all(dir.join("checkpoints"))?;
        Ok(Run {
            dir,
            started: Instant::now(),
        })
    }

    fn report(&self, name: &str, value: &impl Serialize) -> Result<PathBuf> {
        let path = self.dir.join("reports").join(format!("{name}.json"));
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        fs::write(&path, bytes)?;
        Ok(path)
    }

    fn checkpoint(&self, name: &str, model: &Model) -> Result<String> {
        let rel = format!("checkpoints/{name}.emgm");
        let path = self.dir.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        save_checkpoint(model, path)?;
        Ok(rel)
    }

    fn record(&self, mut record: Value) -> Result<()> {
        record["wall_time_s"] = json!(self.started.elapsed().as_secs_f64());
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.dir.join("records.jsonl"))?;
        writeln!(f, "{}", serde_json::to_string(&record)?)?;
        Ok(())
    }
}

struct Dataset {
    bench: Benchmark,
    sha256: String,
}

fn load_data(args: &DataArgs) -> Result<Dataset> {
    let manifest = fs::read(args.data.join("manifest.json")).map_err(|e| {
        Error::Data(format!(
            "no benchmark at {}: {e}; run gen-data first",
            args.data.display()
        ))
    })?;
    Ok(Dataset {
        bench: read_benchmark(&args.data)?,
        sha256: hex::encode(Sha256::digest(&manifest)),
    })
}

fn subjects<'a>(
    ds: &'a Dataset,
    args: &DataArgs,
    cfg: &ExperimentConfig,
) -> Result<Vec<&'a SubjectData>> {
    let wanted: &[String] = if args.subjects.is_empty() {
        &cfg.data.subjects
    } else {
        &args.subjects
    };
    if wanted.is_empty() {
        return Ok(ds.bench.stroke.iter().collect());
    }
    wanted
        .iter()
        .map(|id| {
            ds.bench
                .stroke
                .iter()
                .find(|s| &s.profile.subject_id == id)
                .ok_or_else(|| Error::Config(format!("no stroke subject {id:?} in the benchmark")))
        })
        .collect()
}

fn load_healthy(path: Option<&Path>, variant: Variant) -> Result<Option<Model>> {
    match path {
        Some(p) => Ok(Some(load_checkpoint(p)?)),
        None if variant.needs_checkpoint() => Err(Error::Config(format!(
            "variant {variant} needs --init-checkpoint <healthy.emgm>"
        ))),
        None => Ok(None),
    }
}

/// Variant, adapter settings and training hyperparameters for one subject.
fn settings(
    cfg: &ExperimentConfig,
    variant: Variant,
    cv: Option<&Value>,
    subject: &str,
) -> Result<(AdaptationSpec, crate::adaptation::TrainHyper)> {
    let mut spec = AdaptationSpec {
        variant,
        ..cfg.adaptation.spec.clone()
    };
    let mut hyper = cfg.adaptation.train.clone();
    if let Some(cv) = cv {
        let entry = cv["subjects"][subject].clone();
        if entry.is_null() {
            return Err(Error::Config(format!(
                "cv report has no entry for {subject}"
            )));
        }
        let outcome: CvOutcome =
            serde_json::from_value(entry).map_err(|e| Error::Config(format!("cv report: {e}")))?;
        outcome.best.apply(&mut spec, &mut hyper)?;
    }
    Ok((spec, hyper))
}

fn load_cv(path: Option<&Path>) -> Result<Option<Value>> {
    path.map(|p| {
        let bytes = fs::read(p)
            .map_err(|e| Error::Config(format!("cannot read cv report {}: {e}", p.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("cv report: {e}")))
    })
    .transpose()
}

fn refs(recs: &[Recording]) -> Vec<&Recording> {
    recs.iter().collect()
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData { common } => gen_data(&common),
        Command::Pretrain { common, data } => cmd_pretrain(&common, &data),
        Command::Finetune {
            common,
            data,
            variant,
        } => cmd_finetune(&common, &data, &variant),
        Command::Eval {
            common,
            data,
            variant,
            checkpoint,
        } => cmd_eval(&common, &data, &variant, checkpoint.as_deref()),
        Command::CvSearch {
            common,
            data,
            variant,
        } => cmd_cv(&common, &data, &variant),
        Command::BudgetSweep {
            common,
            data,
            variant,
        } => cmd_budget(&common, &data, &variant),
        Command::Convergence {
            common,
            data,
            init_checkpoint,
            variants,
            cv_report,
        } => cmd_convergence(
            &common,
            &data,
            init_checkpoint.as_deref(),
            &variants,
            cv_report.as_deref(),
        ),
        Command::Stream {
            common,
            checkpoint,
            input,
            realtime,
            report,
            commands,
            hop,
        } => cmd_stream(
            &common,
            &checkpoint,
            &input,
            realtime,
            report.as_deref(),
            commands.as_deref(),
            hop,
        ),
    }
}

fn gen_data(common: &Common) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    let out = common.out.clone().unwrap_or_else(|| PathBuf::from("bench"));
    let bench = build_benchmark(common.seed, &cfg.data.benchmark)?;
    write_benchmark(&bench, &out)?;
    log::info!("benchmark written to {}", out.display());
    Ok(())
}

fn cmd_pretrain(common: &Common, data: &DataArgs) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    let ds = load_data(data)?;
    let run = Run::open(common)?;
    let healthy: Vec<&Recording> = ds.bench.healthy.iter().flat_map(|s| &s.train).collect();
    let out = pretrain(&cfg, &healthy, common.seed, &mut |epoch, _| {
        log::info!("pretrain epoch {epoch}");
        Ok(())
    })?;
    let ckpt = run.checkpoint("healthy", &out.model)?;
    let retention: Vec<&Recording> = ds.bench.retention.iter().flat_map(|s| &s.test).collect();
    let heldout = evaluate_testsuite(
        &out.model,
        &retention,
        cfg.metrics.hop,
        cfg.metrics.buffer_s,
    )?;
    let report = json!({
        "loss_trace": out.loss_trace,
        "steps": out.steps,
        "checkpoint": ckpt,
        "heldout_healthy": heldout,
    });
    run.report("pretrain", &report)?;
    run.record(json!({
        "command": "pretrain",
        "variant": "scratch",
        "hyperparameters": cfg.data.pretrain,
        "seed": common.seed,
        "tests": retention.iter().map(|r| format!("{}/{}", r.subject_id, r.set_kind)).collect::<Vec<_>>(),
        "metrics": {"raw_accuracy": heldout.mean_raw_accuracy, "transition_accuracy": heldout.mean_transition_accuracy},
        "checkpoints": [ckpt],
        "dataset_sha256": ds.sha256,
    }))?;
    println!(
        "held-out healthy raw accuracy {:.3}; checkpoint {}",
        heldout.mean_raw_accuracy,
        run.dir
            .join(&report["checkpoint"].as_str().unwrap_or_default())
            .display()
    );
    Ok(())
}

/// Saves the evaluation model and, for LoRA, the adapters against the base.
fn save_trained(run: &Run, name: &str, trained: &super::Trained) -> Result<Vec<String>> {
    let mut written = vec![run.checkpoint(name, &trained.model)?];
    if let Some(lora) = &trained.lora {
        let rel = format!("checkpoints/{name}.emga");
        save_adapters(lora, &trained.base.params, run.dir.join(&rel))?;
        written.push(rel);
    }
    Ok(written)
}

fn cmd_finetune(common: &Common, data: &DataArgs, va: &VariantArgs) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    if va.variant == Variant::ZeroShot {
        return Err(Error::Unsupported(
            "zero-shot models are evaluated, not fine-tuned; use eval".into(),
        ));
    }
    let healthy = load_healthy(va.init_checkpoint.as_deref(), va.variant)?;
    let cv = load_cv(va.cv_report.as_deref())?;
    let ds = load_data(data)?;
    let run = Run::open(common)?;
    let mut report = serde_json::Map::new();
    for s in subjects(&ds, data, &cfg)? {
        let id = &s.profile.subject_id;
        let (spec, hyper) = settings(&cfg, va.variant, cv.as_ref(), id)?;
        let spans: Vec<super::Span> = s.train.iter().map(super::Span::whole).collect();
        let trained = super::adapt(
            &cfg,
            &spec,
            &hyper,
            healthy.as_ref(),
            &spans,
            crate::datagen::derive_seed(common.seed, &[super::TAG_FINAL]),
            &mut |_, _| Ok(()),
        )?;
        let written = save_trained(&run, &format!("{}-{id}", va.variant), &trained)?;
        report.insert(
            id.clone(),
            json!({"loss_trace": trained.loss_trace, "steps": trained.steps, "checkpoints": written}),
        );
        run.record(json!({
            "command": "finetune",
            "variant": va.variant,
            "subject": id,
            "hyperparameters": {"adaptation": spec, "train": hyper},
            "seed": common.seed,
            "checkpoints": written,
            "dataset_sha256": ds.sha256,
        }))?;
    }
    run.report(
        &format!("finetune-{}", va.variant),
        &json!({"subjects": report}),
    )?;
    println!("finetune reports in {}", run.dir.display());
    Ok(())
}

fn cmd_eval(
    common: &Common,
    data: &DataArgs,
    va: &VariantArgs,
    checkpoint: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    let adapted = checkpoint.map(load_checkpoint).transpose()?;
    let healthy = if adapted.is_some() {
        None
    } else {
        load_healthy(va.init_checkpoint.as_deref(), va.variant)?
    };
    let cv = load_cv(va.cv_report.as_deref())?;
    let ds = load_data(data)?;
    let run = Run::open(common)?;
    let mut per_subject = serde_json::Map::new();
    let mut table = Vec::new();
    for s in subjects(&ds, data, &cfg)? {
        let id = &s.profile.subject_id;
        let tests = refs(&s.test);
        let (suite, written, spec, hyper) = match &adapted {
            Some(model) => {
                let suite =
                    evaluate_testsuite(model, &tests, cfg.metrics.hop, cfg.metrics.buffer_s)?;
                (suite, Vec::new(), None, None)
            }
            None => {
                let (spec, hyper) = settings(&cfg, va.variant, cv.as_ref(), id)?;
                let out = final_train_eval(
                    &cfg,
                    &spec,
                    &hyper,
                    healthy.as_ref(),
                    &refs(&s.train),
                    &tests,
                    common.seed,
                )?;
                let written = if va.variant == Variant::ZeroShot {
                    Vec::new()
                } else {
                    save_trained(&run, &format!("{}-{id}", va.variant), &out.trained)?
                };
                (out.suite, written, Some(spec), Some(hyper))
            }
        };
        table.push(json!({
            "subject": id,
            "raw_accuracy": suite.mean_raw_accuracy,
            "transition_accuracy": suite.mean_transition_accuracy,
        }));
        run.record(json!({
            "command": "eval",
            "variant": va.variant,
            "subject": id,
            "hyperparameters": {"adaptation": spec, "train": hyper},
            "seed": common.seed,
            "tests": suite.recordings.iter().map(|r| r.set_kind.clone()).collect::<Vec<_>>(),
            "metrics": {"raw_accuracy": suite.mean_raw_accuracy, "transition_accuracy": suite.mean_transition_accuracy},
            "checkpoints": written,
            "dataset_sha256": ds.sha256,
        }))?;
        per_subject.insert(id.clone(), serde_json::to_value(&suite)?);
    }
    let mean = |key: &str| {
        let v: Vec<f64> = table.iter().filter_map(|r| r[key].as_f64()).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    let summary = json!({
        "variant": va.variant,
        "table": table,
        "mean_raw_accuracy": mean("raw_accuracy"),
        "mean_transition_accuracy": mean("transition_accuracy"),
        "subjects": per_subject,
    });
    run.report(&format!("eval-{}", va.variant), &summary)?;
    println!(
        "{}: mean raw {:.3}, mean transition {:.3}",
        va.variant,
        summary["mean_raw_accuracy"].as_f64().unwrap_or(f64::NAN),
        summary["mean_transition_accuracy"]
            .as_f64()
            .unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_cv(common: &Common, data: &DataArgs, va: &VariantArgs) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    let healthy = load_healthy(va.init_checkpoint.as_deref(), va.variant)?;
    let ds = load_data(data)?;
    let run = Run::open(common)?;
    let grid = cfg.grid_for(va.variant);
    let mut report = serde_json::Map::new();
    for s in subjects(&ds, data, &cfg)? {
        let id = &s.profile.subject_id;
        let spec = AdaptationSpec {
            variant: va.variant,
            ..cfg.adaptation.spec.clone()
        };
        let out = cv_select(
            &cfg,
            &spec,
            &grid,
            healthy.as_ref(),
            &refs(&s.train),
            common.seed,
        )?;
        for f in &out.folds {
            run.record(json!({
                "command": "cv-search",
                "variant": va.variant,
                "subject": id,
                "hyperparameters": f.point,
                "seed": common.seed,
                "fold": f.fold,
                "metrics": {"raw_accuracy": f.raw_accuracy, "transition_accuracy": f.transition_accuracy},
                "checkpoints": [],
                "dataset_sha256": ds.sha256,
            }))?;
        }
        println!("{id}: selected {}", out.best);
        report.insert(id.clone(), serde_json::to_value(&out)?);
    }
    run.report(
        &format!("cv-{}", va.variant),
        &json!({"variant": va.variant, "grid": grid, "subjects": report}),
    )?;
    Ok(())
}

fn cmd_budget(common: &Common, data: &DataArgs, va: &VariantArgs) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    let healthy = load_healthy(va.init_checkpoint.as_deref(), Variant::ZeroShot)?;
    let cv = load_cv(va.cv_report.as_deref())?;
    let ds = load_data(data)?;
    let run = Run::open(common)?;
    let mut report = serde_json::Map::new();
    let mut by_budget: Vec<Vec<f64>> = vec![Vec::new(); cfg.budget.budgets.len()];
    for s in subjects(&ds, data, &cfg)? {
        let id = &s.profile.subject_id;
        let (spec, hyper) = settings(&cfg, va.variant, cv.as_ref(), id)?;
        let out = budget_sweep(
            &cfg,
            &spec,
            &hyper,
            healthy.as_ref(),
            &refs(&s.train),
            &refs(&s.test),
            &cfg.budget,
            common.seed,
        )?;
        for row in &out.rows {
            run.record(json!({
                "command": "budget-sweep",
                "variant": va.variant,
                "subject": id,
                "hyperparameters": {"adaptation": spec, "train": hyper, "budget": row.budget, "pairs": row.pairs},
                "seed": common.seed,
                "fold": row.repeat,
                "metrics": {"raw_accuracy": row.mean_raw_accuracy, "transition_accuracy": row.mean_transition_accuracy},
                "checkpoints": [],
                "dataset_sha256": ds.sha256,
            }))?;
        }
        for (i, m) in out.means.iter().enumerate() {
            if let Some(t) = m.mean_transition_accuracy {
                by_budget[i].push(t);
            }
        }
        report.insert(id.clone(), serde_json::to_value(&out)?);
    }
    let means: Vec<Value> = cfg
        .budget
        .budgets
        .iter()
        .zip(&by_budget)
        .map(|(b, v)| {
            let m = (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
            println!(
                "N={}: mean transition {:.3}",
                b.label(),
                m.unwrap_or(f64::NAN)
            );
            json!({"budget": b, "mean_transition_accuracy": m})
        })
        .collect();
    run.report(
        &format!("budget-{}", va.variant),
        &json!({"variant": va.variant, "plan": cfg.budget, "means": means, "subjects": report}),
    )?;
    Ok(())
}

fn cmd_convergence(
    common: &Common,
    data: &DataArgs,
    init: Option<&Path>,
    variants: &[Variant],
    cv_report: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    let healthy = load_healthy(init, Variant::Full)?.expect("required for full");
    let cv = load_cv(cv_report)?;
    let ds = load_data(data)?;
    let run = Run::open(common)?;
    let retention: Vec<&Recording> = ds.bench.retention.iter().flat_map(|s| &s.test).collect();
    let mut report = serde_json::Map::new();
    for s in subjects(&ds, data, &cfg)? {
        let id = s.profile.subject_id.clone();
        let mut specs = Vec::new();
        let mut hypers = Vec::new();
        for &v in variants {
            let (spec, hyper) = settings(&cfg, v, cv.as_ref(), &id)?;
            specs.push(spec);
            hypers.push(hyper);
        }
        // Variants share one hyperparameter set per subject: the first one's.
        let hyper = hypers
            .first()
            .cloned()
            .ok_or_else(|| Error::Config("no variants given".into()))?;
        let mut written = Vec::new();
        let out = convergence_run(
            &cfg,
            &specs,
            &hyper,
            &healthy,
            &refs(&s.train),
            &refs(&s.test),
            &retention,
            common.seed,
            &mut |variant, epoch, model| {
                written.push(
                    run.checkpoint(&format!("convergence/{id}-{variant}-e{epoch:03}"), model)?,
                );
                Ok(())
            },
        )?;
        run.record(json!({
            "command": "convergence",
            "variant": variants,
            "subject": id,
            "hyperparameters": hyper,
            "seed": common.seed,
            "metrics": out,
            "checkpoints": written,
            "dataset_sha256": ds.sha256,
        }))?;
        report.insert(id, serde_json::to_value(&out)?);
    }
    run.report("convergence", &json!({"subjects": report}))?;
    println!("convergence curves in {}", run.dir.display());
    Ok(())
}

fn cmd_stream(
    common: &Common,
    checkpoint: &Path,
    input: &str,
    realtime: f32,
    report: Option<&Path>,
    commands: Option<&Path>,
    hop: Option<usize>,
) -> Result<()> {
    let cfg = load_config(common.config.as_deref())?;
    let model = load_checkpoint(checkpoint)?;
    let scfg = StreamConfig {
        hop: hop.unwrap_or(cfg.metrics.hop),
        realtime_factor: realtime,
        ..StreamConfig::default()
    };
    let source = read_source(input, &model, &scfg)?;
    let run = Run::open(common)?;
    let commands_path = commands
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run.dir.join("commands.jsonl"));
    let mut writer = BufWriter::new(fs::File::create(&commands_path)?);
    let mut write_error = None;
    let out = run_stream(&model, &scfg, source, &mut |ev| {
        if write_error.is_none() {
            if let Err(e) = serde_json::to_writer(&mut writer, ev)
                .map_err(Error::from)
                .and_then(|_| writer.write_all(b"\n").map_err(Error::from))
            {
                write_error = Some(e);
            }
        }
    })?;
    if let Some(e) = write_error {
        return Err(e);
    }
    writer.flush()?;
    let mut stream_report = out.report;
    stream_report.commands_path = Some(commands_path.display().to_string());
    let path = match report {
        Some(p) => {
            fs::write(p, serde_json::to_vec_pretty(&stream_report)?)?;
            p.to_path_buf()
        }
        None => run.report("stream", &stream_report)?,
    };
    println!(
        "{} samples, {} drops, p99 latency {} us, report {}",
        stream_report.samples,
        stream_report.drops,
        stream_report.latency_us.p99,
        path.display()
    );
    Ok(())
}
