//! End-to-end acceptance run: one pass/fail line per criterion, nonzero exit
//! if any criterion fails. Pass criterion numbers to run a subset, e.g.
//! `cargo test --release --test acceptance -- 6 7`.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use common::oracle::{brute_force, random_stream};
use common::pipeline::{ok, pipeline, s, tiny_config};
use emgadapt::adaptation::{
    build_variant, finetune, merge_lora, AdaptationSpec, TrainHyper, Variant, WindowSet,
};
use emgadapt::datagen::{
    build_benchmark, make_set_timeline, sample_subject, synthesize, Benchmark, Population,
    Recording, TimelineKind,
};
use emgadapt::harness::{
    budget_sweep, convergence_run, final_train_eval, pretrain, Budget, BudgetPlan, ExperimentConfig,
};
use emgadapt::metrics::{extract_transitions, raw_accuracy, transition_accuracy};
use emgadapt::model::{
    forward, forward_with, Model, ModelConfig, ModelParams, Normalizer, WindowBatch, RELAX,
};
use emgadapt::numerics::Tensor;
use emgadapt::stream::{predict_recording, replay_source, run_stream, StreamConfig};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

const SEED: u64 = 42;

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn fmt_curve(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3}")).collect();
    format!("[{}]", parts.join(", "))
}

fn gradients() -> Result<String, String> {
    let t = Instant::now();
    let (mut op_worst, mut op_name, mut model_worst) = (0.0f64, "", 0.0f64);
    for seed in 0..20 {
        for (name, err) in common::op_suite(seed) {
            if err > op_worst {
                op_worst = err;
                op_name = name;
            }
        }
        model_worst = model_worst.max(common::model_check(seed));
    }
    let secs = t.elapsed().as_secs_f64();
    let detail =
        format!("worst op rel err {op_worst:.2e} ({op_name}), model {model_worst:.2e}, {secs:.1}s");
    ensure(op_worst < 1e-3 && model_worst < 1e-2 && secs < 60.0, || {
        detail.clone()
    })?;
    Ok(detail)
}

fn metric_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut events = 0;
    for case in 0..1000 {
        let (truth, pred) = random_stream(&mut rng);
        let buffer = rng.gen_range(0..12);
        let (_, got) =
            transition_accuracy(&truth, &pred, 1.0, buffer as f32).map_err(|e| e.to_string())?;
        let got: Vec<(bool, bool, bool)> = got
            .iter()
            .map(|e| (e.passed, e.detected, e.flicker_free))
            .collect();
        ensure(got == brute_force(&truth, &pred, buffer), || {
            format!("stream {case} disagrees")
        })?;
        events += got.len();
    }
    let cases: [(&[usize], &[usize], f64); 3] = [
        (&[0, 0, 1, 1], &[0, 1, 1, 1], 0.75),
        (&[0, 1, 2, 2, 1, 0], &[0, 1, 2, 2, 1, 0], 1.0),
        (&[0, 1, 2, 2, 1, 0], &[1, 2, 0, 0, 2, 1], 0.0),
    ];
    for (t, p, want) in cases {
        let got = raw_accuracy(t, p).map_err(|e| e.to_string())?;
        ensure(got == want, || {
            format!("raw accuracy {got} for {t:?}/{p:?}, want {want}")
        })?;
    }
    Ok(format!(
        "1000 streams, {events} events agree; raw cases exact"
    ))
}

fn protocol() -> Result<String, String> {
    let std = make_set_timeline(TimelineKind::Standard).labels();
    let close = make_set_timeline(TimelineKind::ClosingOnly).labels();
    let (ns, ts) = (std.len(), extract_transitions(&std).len());
    let (nc, tc) = (close.len(), extract_transitions(&close).len());
    let relax = vec![RELAX; ns];
    let raw = raw_accuracy(&std, &relax).map_err(|e| e.to_string())?;
    let (trans, _) = transition_accuracy(&std, &relax, 200.0, 1.0).map_err(|e| e.to_string())?;
    let detail = format!(
        "standard {ns}/{ts}, closing-only {nc}/{tc}, relax raw {raw:.4} transition {trans:?}"
    );
    ensure(
        ns == 15200
            && ts == 12
            && nc == 7600
            && tc == 6
            && (raw - 0.526).abs() <= 0.001
            && trans == Some(0.0),
        || detail.clone(),
    )?;
    Ok(detail)
}

fn numeric_rank(t: &Tensor) -> usize {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let m = DMatrix::from_row_slice(
        r,
        c,
        &t.data().iter().map(|&v| v as f64).collect::<Vec<_>>(),
    );
    let sv = m.singular_values();
    let top = sv.iter().cloned().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > 1e-4 * top.max(1e-30)).count()
}

fn lora_algebra() -> Result<String, String> {
    let err = |e: emgadapt::Error| e.to_string();
    let model =
        Model::init(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(11)).map_err(err)?;
    let cfg = &model.config;
    let b = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let emg = Tensor::randn(&[b, cfg.window_len, cfg.channels], 1.0, &mut rng);
    let tp = b * cfg.num_patches();
    let batch = WindowBatch::new(
        cfg,
        emg,
        vec![0; b * cfg.window_len],
        vec![false; tp],
        vec![true; tp],
    )
    .map_err(err)?;
    let (plain, _) = forward(&model.params, cfg, &batch).map_err(err)?;
    let (mut gap, mut targets) = (0.0f32, 0);
    for rank in [1, 2, 4, 8] {
        let spec = AdaptationSpec {
            lora_rank: rank,
            ..AdaptationSpec::new(Variant::Lora)
        };
        let mut lora = build_variant(&spec, Some(&model), cfg, &mut rng)
            .map_err(err)?
            .lora
            .unwrap();
        let (zero, _) = forward_with(&model.params, Some(&lora), cfg, &batch).map_err(err)?;
        let same = plain
            .data()
            .iter()
            .zip(zero.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(same, || {
            format!("rank {rank}: B=0 forward is not bitwise identical")
        })?;
        for pair in lora.pairs.values_mut() {
            pair.b = Tensor::randn(pair.b.shape(), 0.05, &mut rng);
        }
        let merged = merge_lora(&model.params, &lora).map_err(err)?;
        let (a, _) = forward(&merged, cfg, &batch).map_err(err)?;
        let (u, _) = forward_with(&model.params, Some(&lora), cfg, &batch).map_err(err)?;
        gap = a
            .data()
            .iter()
            .zip(u.data())
            .map(|(p, q)| (p - q).abs())
            .fold(gap, f32::max);
        for base in lora.targets() {
            let (w, w0) = (merged.get(&base).unwrap(), model.params.get(&base).unwrap());
            let d: Vec<f32> = w.data().iter().zip(w0.data()).map(|(x, y)| x - y).collect();
            let r = numeric_rank(&Tensor::new(w.shape().to_vec(), d).map_err(err)?);
            ensure(r <= rank, || format!("{base}: rank {r} > {rank}"))?;
            targets += 1;
        }
    }
    ensure(gap < 1e-5, || {
        format!("merged vs unmerged logit gap {gap:.2e}")
    })?;
    Ok(format!(
        "B=0 bitwise; max logit gap {gap:.2e}; {targets} target/rank SVD checks"
    ))
}

fn hashes(params: &ModelParams) -> BTreeMap<String, Vec<u8>> {
    params
        .iter()
        .map(|(name, t)| {
            let mut h = Sha256::new();
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
            (name.clone(), h.finalize().to_vec())
        })
        .collect()
}

fn freeze() -> Result<String, String> {
    let err = |e: emgadapt::Error| e.to_string();
    let model =
        Model::init(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(11)).map_err(err)?;
    let cfg = &model.config;
    let p = sample_subject(Population::Stroke, 0.5, 1, "S").map_err(err)?;
    let rec = synthesize(&p, &make_set_timeline(TimelineKind::Standard), 2).map_err(err)?;
    let (t, c) = (cfg.window_len, cfg.channels);
    let mut windows = WindowSet::new(t, c);
    for start in (0..rec.num_samples() - t).step_by(500).take(24) {
        windows
            .push(
                &rec.samples.data()[start * c..(start + t) * c],
                &rec.labels[start..start + t],
            )
            .map_err(err)?;
    }
    let hyper = TrainHyper {
        epochs: 2,
        learning_rate: 1e-2,
        ..TrainHyper::default()
    };
    let before = hashes(&model.params);
    let mut frozen = 0;
    for variant in [Variant::HeadOnly, Variant::Lora] {
        let built = build_variant(
            &AdaptationSpec::new(variant),
            Some(&model),
            cfg,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .map_err(err)?;
        let out = finetune(
            variant,
            &built.model.params,
            built.lora.as_ref(),
            &built.mask,
            cfg,
            &windows,
            &hyper,
            &mut |_, _, _| Ok(()),
        )
        .map_err(err)?;
        let after = hashes(&out.params);
        for (name, h) in &before {
            let head = variant == Variant::HeadOnly && name.starts_with("head_intent.");
            ensure(head || &after[name] == h, || {
                format!("{variant}: {name} moved")
            })?;
            ensure(!head || &after[name] != h, || {
                format!("{variant}: {name} did not train")
            })?;
            frozen += usize::from(!head);
        }
        if variant == Variant::Lora {
            let trained = out.lora.unwrap();
            ensure(
                trained
                    .pairs
                    .values()
                    .any(|p| p.b.data().iter().any(|&v| v != 0.0)),
                || "LoRA adapters did not train".into(),
            )?;
        }
    }
    Ok(format!(
        "{frozen} frozen tensors bitwise unchanged across head-only and LoRA"
    ))
}

/// The seed-42 benchmark, its pretrained healthy model and the run config
/// shared by the three experiment criteria.
struct Study {
    cfg: ExperimentConfig,
    bench: Benchmark,
    healthy: Model,
    pretrain_s: f64,
}

fn study() -> &'static Study {
    static S: OnceLock<Study> = OnceLock::new();
    S.get_or_init(|| {
        let cfg = ExperimentConfig::default();
        let t = Instant::now();
        let bench = build_benchmark(SEED, &cfg.data.benchmark).expect("benchmark");
        let recs: Vec<&Recording> = bench.healthy.iter().flat_map(|s| &s.train).collect();
        let healthy = pretrain(&cfg, &recs, SEED, &mut |_, _| Ok(()))
            .expect("pretrain")
            .model;
        Study {
            cfg,
            bench,
            healthy,
            pretrain_s: t.elapsed().as_secs_f64(),
        }
    })
}

fn sets(s: &emgadapt::datagen::SubjectData) -> (Vec<&Recording>, Vec<&Recording>) {
    (s.train.iter().collect(), s.test.iter().collect())
}

fn table_two() -> Result<String, String> {
    let st = study();
    let t = Instant::now();
    let mut trans: BTreeMap<Variant, f64> = BTreeMap::new();
    let mut zero_raw = 0.0;
    let n = st.bench.stroke.len() as f64;
    for subject in &st.bench.stroke {
        let (train, test) = sets(subject);
        for variant in Variant::ALL {
            let spec = AdaptationSpec {
                variant,
                ..st.cfg.adaptation.spec.clone()
            };
            let out = final_train_eval(
                &st.cfg,
                &spec,
                &st.cfg.adaptation.train,
                Some(&st.healthy),
                &train,
                &test,
                SEED,
            )
            .map_err(|e| e.to_string())?;
            *trans.entry(variant).or_default() +=
                out.suite.mean_transition_accuracy.unwrap_or(0.0) / n;
            if variant == Variant::ZeroShot {
                zero_raw += out.suite.mean_raw_accuracy / n;
            }
        }
    }
    let zs = trans[&Variant::ZeroShot];
    let scratch = trans[&Variant::Scratch];
    let best = [Variant::HeadOnly, Variant::Lora, Variant::Full]
        .iter()
        .map(|v| trans[v])
        .fold(f64::MIN, f64::max);
    let table: Vec<String> = trans.iter().map(|(v, a)| format!("{v} {a:.3}")).collect();
    let detail = format!(
        "transition {}; zero-shot raw {zero_raw:.3}; {:.0}s (+{:.0}s pretrain)",
        table.join(", "),
        t.elapsed().as_secs_f64(),
        st.pretrain_s
    );
    ensure(
        zs < scratch && scratch < best && zs < 0.3 && zero_raw > 0.45,
        || detail.clone(),
    )?;
    Ok(detail)
}

fn table_three() -> Result<String, String> {
    let st = study();
    let t = Instant::now();
    let plan = BudgetPlan::default();
    let spec = AdaptationSpec {
        variant: Variant::Full,
        ..st.cfg.adaptation.spec.clone()
    };
    let mut curve = vec![0.0; plan.budgets.len()];
    let n = st.bench.stroke.len() as f64;
    for subject in &st.bench.stroke {
        let (train, test) = sets(subject);
        let out = budget_sweep(
            &st.cfg,
            &spec,
            &st.cfg.adaptation.train,
            Some(&st.healthy),
            &train,
            &test,
            &plan,
            SEED,
        )
        .map_err(|e| e.to_string())?;
        for (slot, m) in curve.iter_mut().zip(&out.means) {
            *slot += m.mean_transition_accuracy.unwrap_or(0.0) / n;
        }
    }
    let steps: Vec<f64> = curve.windows(2).map(|w| w[1] - w[0]).collect();
    let labels: Vec<String> = plan.budgets.iter().map(|b| Budget::label(*b)).collect();
    let detail = format!(
        "N {} -> {}, {:.0}s",
        labels.join("/"),
        fmt_curve(&curve),
        t.elapsed().as_secs_f64()
    );
    let monotone = steps.iter().all(|&d| d >= -0.02);
    let front = steps.iter().skip(1).all(|&d| d < steps[0]);
    ensure(monotone && front, || detail.clone())?;
    Ok(detail)
}

fn convergence() -> Result<String, String> {
    let st = study();
    let t = Instant::now();
    let mut cfg = st.cfg.clone();
    // A shortened run: three checkpoints instead of twenty.
    cfg.adaptation.convergence_epochs = 15;
    cfg.adaptation.checkpoint_every = 5;
    let specs: Vec<AdaptationSpec> = [Variant::HeadOnly, Variant::Lora, Variant::Full]
        .into_iter()
        .map(|variant| AdaptationSpec {
            variant,
            ..cfg.adaptation.spec.clone()
        })
        .collect();
    let retention: Vec<&Recording> = st.bench.retention.iter().flat_map(|s| &s.test).collect();
    let n = st.bench.stroke.len() as f64;
    let (mut stroke_zs, mut ret_zs) = (0.0, 0.0);
    let mut stroke: BTreeMap<(Variant, usize), f64> = BTreeMap::new();
    let mut ret: BTreeMap<(Variant, usize), f64> = BTreeMap::new();
    for subject in &st.bench.stroke {
        let (train, test) = sets(subject);
        let out = convergence_run(
            &cfg,
            &specs,
            &cfg.adaptation.train,
            &st.healthy,
            &train,
            &test,
            &retention,
            SEED,
            &mut |_, _, _| Ok(()),
        )
        .map_err(|e| e.to_string())?;
        stroke_zs += out.stroke_zero_shot.transition_accuracy.unwrap_or(0.0) / n;
        ret_zs += out.retention_zero_shot.transition_accuracy.unwrap_or(0.0) / n;
        for p in &out.points {
            *stroke.entry((p.variant, p.epoch)).or_default() +=
                p.stroke.transition_accuracy.unwrap_or(0.0) / n;
            *ret.entry((p.variant, p.epoch)).or_default() +=
                p.retention.transition_accuracy.unwrap_or(0.0) / n;
        }
    }
    let first: Vec<String> = stroke
        .iter()
        .filter(|((_, e), _)| *e == 5)
        .map(|((v, _), a)| format!("{v} {a:.3}"))
        .collect();
    let worst_ret = ret.values().cloned().fold(f64::MIN, f64::max);
    let detail = format!(
        "stroke zero-shot {stroke_zs:.3}, epoch 5: {}; retention zero-shot {ret_zs:.3}, worst checkpoint {worst_ret:.3}; {:.0}s",
        first.join(", "),
        t.elapsed().as_secs_f64()
    );
    let above = stroke
        .iter()
        .filter(|((_, e), _)| *e == 5)
        .all(|(_, &a)| a > stroke_zs);
    let forgets = ret.values().all(|&a| a <= ret_zs - 0.05);
    ensure(above && forgets && !ret.is_empty(), || detail.clone())?;
    Ok(detail)
}

fn streaming() -> Result<String, String> {
    let err = |e: emgadapt::Error| e.to_string();
    let p = sample_subject(Population::Healthy, 0.0, 3, "H01").map_err(err)?;
    let rec = synthesize(&p, &make_set_timeline(TimelineKind::Standard), 4).map_err(err)?;
    let mut model =
        Model::init(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(9)).map_err(err)?;
    model.norm = Normalizer::fit(8, [rec.samples.data()]).map_err(err)?;
    let hop = 10;
    let offline = predict_recording(&model, &rec, hop).map_err(err)?;
    let lossless = StreamConfig {
        hop,
        realtime_factor: 0.0,
        ..StreamConfig::default()
    };
    let run = run_stream(
        &model,
        &lossless,
        Box::new(replay_source(&rec, 0.0)),
        &mut |_| {},
    )
    .map_err(err)?;
    let warm = model.config.window_len - 1;
    ensure(run.commands[warm..] == offline[warm..], || {
        "online commands differ from offline".into()
    })?;
    let live = StreamConfig {
        hop,
        realtime_factor: 1.0,
        ..StreamConfig::default()
    };
    let run = run_stream(
        &model,
        &live,
        Box::new(replay_source(&rec, 1.0)),
        &mut |_| {},
    )
    .map_err(err)?;
    let r = &run.report;
    let detail = format!(
        "{} samples in {:.1}s, p99 {} us, {} drops",
        r.samples, r.wall_time_s, r.latency_us.p99, r.drops
    );
    ensure(
        r.drops == 0 && r.latency_us.p99 < 50_000 && r.samples == 15200,
        || detail.clone(),
    )?;
    Ok(detail)
}

fn reproducibility() -> Result<String, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = tiny_config(dir.path());
    let data = dir.path().join("bench");
    ok(&["gen-data", "--config", s(&config), "--out", s(&data)]);
    let first = pipeline(&config, &data, &dir.path().join("run1"));
    let second = pipeline(&config, &data, &dir.path().join("run2"));
    ensure(first.keys().eq(second.keys()), || {
        "runs wrote different files".into()
    })?;
    for (rel, bytes) in &first {
        ensure(&second[rel] == bytes, || {
            format!("{} differs", rel.display())
        })?;
    }
    Ok(format!(
        "{} reports and checkpoints byte-identical",
        first.len()
    ))
}

fn main() {
    let criteria: [(&str, Check); 10] = [
        ("gradient suite", gradients),
        ("metric oracle equivalence", metric_oracle),
        ("protocol fidelity", protocol),
        ("LoRA algebra", lora_algebra),
        ("freeze integrity", freeze),
        ("variant ordering", table_two),
        ("data-budget trend", table_three),
        ("convergence and retention", convergence),
        ("streaming", streaming),
        ("reproducibility", reproducibility),
    ];
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "[{tag}] {id:>2} {name}: {detail} ({:.1}s)",
            t.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
