//! Experimental procedures: healthy pretraining, cross-validated grid search,
//! final retrain and evaluation, data-budget sweeps and convergence runs.

mod cli;
mod grid;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::adaptation::{
    build_variant, finetune, merge_lora, AdaptationSpec, LoraState, TrainHyper, TrainabilityMask,
    Variant, WindowSet,
};
use crate::datagen::{derive_seed, BenchmarkConfig, Recording};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_testsuite, SuiteReport, DEFAULT_BUFFER_S};
use crate::model::{Model, ModelConfig, Normalizer, RELAX};

pub use cli::run_cli;
pub use grid::{GridPoint, GridSpec, GRID_KEYS};

const TAG_PRETRAIN: u64 = 1;
const TAG_CV: u64 = 2;
const TAG_FINAL: u64 = 3;
const TAG_BUDGET: u64 = 4;
const TAG_CONVERGENCE: u64 = 5;
const TAG_INIT: u64 = 10;
const TAG_TRAIN: u64 = 11;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationSection {
    #[serde(flatten)]
    pub spec: AdaptationSpec,
    pub train: TrainHyper,
    /// Refit input normalization on the adaptation data (all trained variants).
    pub refit_normalizer: bool,
    pub convergence_epochs: usize,
    pub checkpoint_every: usize,
}

impl Default for AdaptationSection {
    fn default() -> Self {
        AdaptationSection {
            spec: AdaptationSpec::default(),
            train: TrainHyper {
                learning_rate: 3e-3,
                ..TrainHyper::default()
            },
            refit_normalizer: true,
            convergence_epochs: 100,
            checkpoint_every: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub benchmark: BenchmarkConfig,
    /// Window start spacing for adaptation data, in samples.
    pub window_stride: usize,
    pub pretrain_stride: usize,
    pub pretrain: TrainHyper,
    /// Stroke subjects to run; empty means all.
    pub subjects: Vec<String>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            benchmark: BenchmarkConfig::default(),
            window_stride: 100,
            pretrain_stride: 100,
            pretrain: TrainHyper {
                epochs: 6,
                learning_rate: 2e-3,
                ..TrainHyper::default()
            },
            subjects: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsSection {
    pub hop: usize,
    pub buffer_s: f32,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            hop: 10,
            buffer_s: DEFAULT_BUFFER_S,
        }
    }
}

/// The single JSON document behind every CLI run.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub adaptation: AdaptationSection,
    pub data: DataSection,
    pub metrics: MetricsSection,
    /// Empty means the default grid for the variant.
    pub grid: GridSpec,
    pub budget: BudgetPlan,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.data.window_stride == 0 || self.data.pretrain_stride == 0 {
            return Err(Error::Config("window strides must be positive".into()));
        }
        if self.metrics.hop == 0 || self.metrics.hop > self.model.window_len {
            return Err(Error::Config(format!(
                "hop {} must be in [1, {}]",
                self.metrics.hop, self.model.window_len
            )));
        }
        if !(self.metrics.buffer_s > 0.0) {
            return Err(Error::Config("buffer_s must be positive".into()));
        }
        if self.adaptation.checkpoint_every == 0 {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        if !self.grid.axes.is_empty() {
            self.grid.validate()?;
        }
        self.budget.validate()
    }

    pub fn grid_for(&self, variant: Variant) -> GridSpec {
        if self.grid.axes.is_empty() {
            GridSpec::default_for(variant == Variant::Lora)
        } else {
            self.grid.clone()
        }
    }
}

/// A contiguous sample range of one recording.
#[derive(Clone, Copy, Debug)]
pub struct Span<'a> {
    pub rec: &'a Recording,
    pub start: usize,
    pub end: usize,
}

impl<'a> Span<'a> {
    pub fn whole(rec: &'a Recording) -> Self {
        Span {
            rec,
            start: 0,
            end: rec.num_samples(),
        }
    }

    fn samples(&self) -> &'a [f32] {
        let c = self.rec.channels();
        &self.rec.samples.data()[self.start * c..self.end * c]
    }
}

pub fn fit_normalizer(channels: usize, spans: &[Span]) -> Result<Normalizer> {
    Normalizer::fit(channels, spans.iter().map(Span::samples))
}

/// Normalized windows starting every `stride` samples inside each span.
pub fn extract_windows(
    spans: &[Span],
    norm: &Normalizer,
    window_len: usize,
    stride: usize,
) -> Result<WindowSet> {
    let c = norm.channels();
    let mut set = WindowSet::new(window_len, c);
    for span in spans {
        if span.rec.channels() != c {
            return Err(Error::Dimension(format!(
                "recording {} has {} channels, expected {c}",
                span.rec.subject_id,
                span.rec.channels()
            )));
        }
        if span.end - span.start < window_len {
            continue;
        }
        let normed = norm.apply(span.samples());
        for s in (0..=span.end - span.start - window_len).step_by(stride.max(1)) {
            set.push(
                &normed[s * c..(s + window_len) * c],
                &span.rec.labels[span.start + s..span.start + s + window_len],
            )?;
        }
    }
    Ok(set)
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub model: Model,
    pub loss_trace: Vec<f32>,
    pub steps: usize,
}

/// Masked multimodal pretraining of a fresh model on healthy recordings.
pub fn pretrain(
    cfg: &ExperimentConfig,
    recordings: &[&Recording],
    seed: u64,
    on_epoch: &mut dyn FnMut(usize, &Model) -> Result<()>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if recordings.is_empty() {
        return Err(Error::Data("no healthy recordings to pretrain on".into()));
    }
    let spans: Vec<Span> = recordings.iter().map(|r| Span::whole(r)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_PRETRAIN, TAG_INIT]));
    let mut model = Model::init(cfg.model.clone(), &mut rng)?;
    model.norm = fit_normalizer(cfg.model.channels, &spans)?;
    let windows = extract_windows(
        &spans,
        &model.norm,
        cfg.model.window_len,
        cfg.data.pretrain_stride,
    )?;
    let hyper = TrainHyper {
        seed: derive_seed(seed, &[TAG_PRETRAIN, TAG_TRAIN]),
        ..cfg.data.pretrain.clone()
    };
    let mask = TrainabilityMask::uniform(model.params.names(), true);
    let norm = model.norm.clone();
    let out = finetune(
        Variant::Scratch,
        &model.params,
        None,
        &mask,
        &cfg.model,
        &windows,
        &hyper,
        &mut |epoch, params, _| {
            on_epoch(
                epoch,
                &Model {
                    config: cfg.model.clone(),
                    norm: norm.clone(),
                    params: params.clone(),
                },
            )
        },
    )?;
    model.params = out.params;
    Ok(PretrainOutcome {
        model,
        loss_trace: out.loss_trace,
        steps: out.steps,
    })
}

/// Result of adapting (or, for zero-shot, not adapting) a model.
#[derive(Clone, Debug)]
pub struct Trained {
    /// The model used for evaluation, with any adapters merged in.
    pub model: Model,
    /// Pre-merge base model; differs from `model` only for LoRA.
    pub base: Model,
    pub lora: Option<LoraState>,
    pub loss_trace: Vec<f32>,
    pub steps: usize,
}

fn merged(base: &Model, lora: Option<&LoraState>) -> Result<Model> {
    Ok(match lora {
        Some(l) => Model {
            config: base.config.clone(),
            norm: base.norm.clone(),
            params: merge_lora(&base.params, l)?,
        },
        None => base.clone(),
    })
}

fn require_healthy<'a>(
    spec: &AdaptationSpec,
    healthy: Option<&'a Model>,
) -> Result<Option<&'a Model>> {
    if spec.variant.needs_checkpoint() && healthy.is_none() {
        return Err(Error::Config(format!(
            "variant {} needs a healthy-pretrained checkpoint",
            spec.variant
        )));
    }
    Ok(healthy)
}

/// Adapts to the data in `spans`. `on_epoch` sees the evaluation model after
/// every epoch.
pub fn adapt(
    cfg: &ExperimentConfig,
    spec: &AdaptationSpec,
    hyper: &TrainHyper,
    healthy: Option<&Model>,
    spans: &[Span],
    seed: u64,
    on_epoch: &mut dyn FnMut(usize, &Model) -> Result<()>,
) -> Result<Trained> {
    let healthy = require_healthy(spec, healthy)?;
    if spec.variant == Variant::ZeroShot {
        let model = healthy.expect("checked above").clone();
        return Ok(Trained {
            base: model.clone(),
            model,
            lora: None,
            loss_trace: Vec::new(),
            steps: 0,
        });
    }
    let model_cfg = healthy.map_or(&cfg.model, |h| &h.config);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_INIT]));
    let built = build_variant(spec, healthy, model_cfg, &mut rng)?;
    let mut base = built.model;
    if cfg.adaptation.refit_normalizer || spec.variant == Variant::Scratch {
        base.norm = fit_normalizer(model_cfg.channels, spans)?;
    }
    let windows = extract_windows(
        spans,
        &base.norm,
        model_cfg.window_len,
        cfg.data.window_stride,
    )?;
    let hyper = TrainHyper {
        seed: derive_seed(seed, &[TAG_TRAIN]),
        ..hyper.clone()
    };
    let out = finetune(
        spec.variant,
        &base.params,
        built.lora.as_ref(),
        &built.mask,
        model_cfg,
        &windows,
        &hyper,
        &mut |epoch, params, lora| {
            let snapshot = Model {
                config: base.config.clone(),
                norm: base.norm.clone(),
                params: params.clone(),
            };
            on_epoch(epoch, &merged(&snapshot, lora)?)
        },
    )?;
    base.params = out.params;
    Ok(Trained {
        model: merged(&base, out.lora.as_ref())?,
        base,
        lora: out.lora,
        loss_trace: out.loss_trace,
        steps: out.steps,
    })
}

fn evaluate(cfg: &ExperimentConfig, model: &Model, recs: &[&Recording]) -> Result<SuiteReport> {
    evaluate_testsuite(model, recs, cfg.metrics.hop, cfg.metrics.buffer_s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldScore {
    pub config_index: usize,
    pub point: GridPoint,
    /// Index of the held-out training set.
    pub fold: usize,
    pub raw_accuracy: f64,
    pub transition_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigScore {
    pub config_index: usize,
    pub point: GridPoint,
    pub mean_raw_accuracy: f64,
    pub mean_transition_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvOutcome {
    pub variant: Variant,
    pub best_index: usize,
    pub best: GridPoint,
    pub configs: Vec<ConfigScore>,
    pub folds: Vec<FoldScore>,
}

fn mean_option(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Four-fold cross-validation over the training sets; the configuration with
/// the highest mean validation raw accuracy wins, the earliest on ties.
pub fn cv_select(
    cfg: &ExperimentConfig,
    spec: &AdaptationSpec,
    grid: &GridSpec,
    healthy: Option<&Model>,
    train_sets: &[&Recording],
    seed: u64,
) -> Result<CvOutcome> {
    if train_sets.len() != 4 {
        return Err(Error::Data(format!(
            "cross-validation needs exactly 4 training sets, got {}",
            train_sets.len()
        )));
    }
    require_healthy(spec, healthy)?;
    let points = grid.points()?;
    let jobs: Vec<(usize, usize)> = (0..points.len())
        .flat_map(|p| (0..4).map(move |f| (p, f)))
        .collect();
    let folds = jobs
        .par_iter()
        .map(|&(p, fold)| {
            let mut spec = spec.clone();
            let mut hyper = cfg.adaptation.train.clone();
            points[p].apply(&mut spec, &mut hyper)?;
            let spans: Vec<Span> = (0..4)
                .filter(|&i| i != fold)
                .map(|i| Span::whole(train_sets[i]))
                .collect();
            // Every configuration sees the same initialization for a fold.
            let trained = adapt(
                cfg,
                &spec,
                &hyper,
                healthy,
                &spans,
                derive_seed(seed, &[TAG_CV, fold as u64]),
                &mut |_, _| Ok(()),
            )?;
            let suite = evaluate(cfg, &trained.model, &[train_sets[fold]])?;
            Ok(FoldScore {
                config_index: p,
                point: points[p].clone(),
                fold,
                raw_accuracy: suite.mean_raw_accuracy,
                transition_accuracy: suite.mean_transition_accuracy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let configs: Vec<ConfigScore> = points
        .iter()
        .enumerate()
        .map(|(p, point)| {
            let mine: Vec<&FoldScore> = folds.iter().filter(|f| f.config_index == p).collect();
            ConfigScore {
                config_index: p,
                point: point.clone(),
                mean_raw_accuracy: mine.iter().map(|f| f.raw_accuracy).sum::<f64>()
                    / mine.len() as f64,
                mean_transition_accuracy: mean_option(mine.iter().map(|f| f.transition_accuracy)),
            }
        })
        .collect();
    let mut best = 0;
    for c in &configs {
        if c.mean_raw_accuracy > configs[best].mean_raw_accuracy {
            best = c.config_index;
        }
    }
    Ok(CvOutcome {
        variant: spec.variant,
        best_index: best,
        best: points[best].clone(),
        configs,
        folds,
    })
}

#[derive(Clone, Debug)]
pub struct FinalOutcome {
    pub trained: Trained,
    pub suite: SuiteReport,
}

/// Retrains once on all training sets and evaluates every test set.
pub fn final_train_eval(
    cfg: &ExperimentConfig,
    spec: &AdaptationSpec,
    hyper: &TrainHyper,
    healthy: Option<&Model>,
    train_sets: &[&Recording],
    test_sets: &[&Recording],
    seed: u64,
) -> Result<FinalOutcome> {
    if test_sets.len() != 5 {
        return Err(Error::Data(format!(
            "final evaluation needs the 5 test sets, got {}",
            test_sets.len()
        )));
    }
    if train_sets.is_empty() && spec.variant != Variant::ZeroShot {
        return Err(Error::Data("no training sets".into()));
    }
    let spans: Vec<Span> = train_sets.iter().map(|r| Span::whole(r)).collect();
    let trained = adapt(
        cfg,
        spec,
        hyper,
        healthy,
        &spans,
        derive_seed(seed, &[TAG_FINAL]),
        &mut |_, _| Ok(()),
    )?;
    let suite = evaluate(cfg, &trained.model, test_sets)?;
    Ok(FinalOutcome { trained, suite })
}

/// One open attempt and one close attempt of the same training set, each
/// with half of its neighbouring relax periods.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptPair {
    pub set_index: usize,
    pub open: (usize, usize),
    pub close: (usize, usize),
}

impl AttemptPair {
    pub fn spans<'a>(&self, sets: &[&'a Recording]) -> [Span<'a>; 2] {
        let rec = sets[self.set_index];
        [
            Span {
                rec,
                start: self.open.0,
                end: self.open.1,
            },
            Span {
                rec,
                start: self.close.0,
                end: self.close.1,
            },
        ]
    }
}

fn runs(labels: &[usize]) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=labels.len() {
        if i == labels.len() || labels[i] != labels[start] {
            out.push((labels[start], start, i));
            start = i;
        }
    }
    out
}

/// Splits each set into its (open, close) attempt pairs: the i-th open
/// attempt goes with the i-th close attempt.
pub fn extract_pairs(sets: &[&Recording]) -> Result<Vec<AttemptPair>> {
    let mut pairs = Vec::new();
    for (si, rec) in sets.iter().enumerate() {
        let r = runs(&rec.labels);
        let mut attempts: [Vec<(usize, usize)>; 3] = Default::default();
        for j in 0..r.len() {
            let (k, s, e) = r[j];
            if k == RELAX {
                continue;
            }
            let before = if j > 0 && r[j - 1].0 == RELAX {
                (r[j - 1].2 - r[j - 1].1) / 2
            } else {
                0
            };
            let after = if j + 1 < r.len() && r[j + 1].0 == RELAX {
                (r[j + 1].2 - r[j + 1].1) / 2
            } else {
                0
            };
            if let Some(list) = attempts.get_mut(k) {
                list.push((s - before, e + after));
            }
        }
        let [_, open, close] = attempts;
        if open.len() != close.len() {
            return Err(Error::Data(format!(
                "set {si} of {} has {} open and {} close attempts",
                rec.subject_id,
                open.len(),
                close.len()
            )));
        }
        pairs.extend(open.into_iter().zip(close).map(|(o, c)| AttemptPair {
            set_index: si,
            open: o,
            close: c,
        }));
    }
    Ok(pairs)
}

/// A data budget: a number of attempt pairs, or every available pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Budget {
    Pairs(usize),
    All,
}

impl Budget {
    pub fn label(self) -> String {
        match self {
            Budget::Pairs(n) => n.to_string(),
            Budget::All => "all".into(),
        }
    }
}

impl Serialize for Budget {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Budget::Pairs(n) => s.serialize_u64(*n as u64),
            Budget::All => s.serialize_str("all"),
        }
    }
}

impl<'de> Deserialize<'de> for Budget {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        match serde_json::Value::deserialize(d)? {
            serde_json::Value::Number(n) if n.as_u64().is_some() => {
                Ok(Budget::Pairs(n.as_u64().unwrap_or(0) as usize))
            }
            serde_json::Value::String(s) if s == "all" => Ok(Budget::All),
            other => Err(D::Error::custom(format!(
                "budget must be a pair count or \"all\", got {other}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BudgetPlan {
    pub budgets: Vec<Budget>,
    pub repeats: usize,
    pub pool_size: usize,
}

impl Default for BudgetPlan {
    fn default() -> Self {
        BudgetPlan {
            budgets: vec![
                Budget::Pairs(0),
                Budget::Pairs(1),
                Budget::Pairs(4),
                Budget::Pairs(8),
                Budget::All,
            ],
            repeats: 12,
            pool_size: 12,
        }
    }
}

impl BudgetPlan {
    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 || self.pool_size == 0 {
            return Err(Error::Config(
                "repeats and pool_size must be positive".into(),
            ));
        }
        for b in &self.budgets {
            if let Budget::Pairs(n) = b {
                if *n > self.pool_size {
                    return Err(Error::Config(format!(
                        "budget {n} exceeds the pool of {} pairs",
                        self.pool_size
                    )));
                }
            }
        }
        Ok(())
    }

    /// Pair indices for one repeat: consecutive slices of a seeded
    /// permutation, so small budgets rotate through the whole pool.
    pub fn draw(&self, n: usize, repeat: usize, seed: u64) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.pool_size).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[TAG_BUDGET, n as u64]));
        perm.shuffle(&mut rng);
        (0..n)
            .map(|i| perm[(repeat * n + i) % self.pool_size])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetRow {
    pub budget: Budget,
    pub repeat: usize,
    pub pairs: Vec<usize>,
    pub mean_raw_accuracy: f64,
    pub mean_transition_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetMean {
    pub budget: Budget,
    pub repeats: usize,
    pub mean_raw_accuracy: f64,
    pub mean_transition_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetOutcome {
    pub variant: Variant,
    pub rows: Vec<BudgetRow>,
    pub means: Vec<BudgetMean>,
}

/// Fine-tunes on `N` sampled pairs per repeat and evaluates on the test sets.
/// `N = 0` is the zero-shot evaluation and `N = all` the final retrain; both
/// are deterministic, so they are run once.
#[allow(clippy::too_many_arguments)]
pub fn budget_sweep(
    cfg: &ExperimentConfig,
    spec: &AdaptationSpec,
    hyper: &TrainHyper,
    healthy: Option<&Model>,
    train_sets: &[&Recording],
    test_sets: &[&Recording],
    plan: &BudgetPlan,
    seed: u64,
) -> Result<BudgetOutcome> {
    plan.validate()?;
    let pairs = extract_pairs(train_sets)?;
    if pairs.len() != plan.pool_size {
        return Err(Error::Data(format!(
            "training sets split into {} pairs, plan expects {}",
            pairs.len(),
            plan.pool_size
        )));
    }
    let mut jobs: Vec<(Budget, usize)> = Vec::new();
    for &b in &plan.budgets {
        match b {
            Budget::Pairs(0) | Budget::All => jobs.push((b, 0)),
            Budget::Pairs(_) => jobs.extend((0..plan.repeats).map(|r| (b, r))),
        }
    }
    let rows = jobs
        .par_iter()
        .map(|&(budget, repeat)| {
            let (drawn, suite) = match budget {
                Budget::Pairs(0) => {
                    let zero = AdaptationSpec {
                        variant: Variant::ZeroShot,
                        ..spec.clone()
                    };
                    let out = final_train_eval(cfg, &zero, hyper, healthy, &[], test_sets, seed)?;
                    (Vec::new(), out.suite)
                }
                Budget::All => {
                    let out =
                        final_train_eval(cfg, spec, hyper, healthy, train_sets, test_sets, seed)?;
                    ((0..pairs.len()).collect(), out.suite)
                }
                Budget::Pairs(n) => {
                    let drawn = plan.draw(n, repeat, seed);
                    let spans: Vec<Span> = drawn
                        .iter()
                        .flat_map(|&i| pairs[i].spans(train_sets))
                        .collect();
                    let trained = adapt(
                        cfg,
                        spec,
                        hyper,
                        healthy,
                        &spans,
                        derive_seed(seed, &[TAG_BUDGET, n as u64, repeat as u64]),
                        &mut |_, _| Ok(()),
                    )?;
                    (drawn, evaluate(cfg, &trained.model, test_sets)?)
                }
            };
            Ok(BudgetRow {
                budget,
                repeat,
                pairs: drawn,
                mean_raw_accuracy: suite.mean_raw_accuracy,
                mean_transition_accuracy: suite.mean_transition_accuracy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let means = plan
        .budgets
        .iter()
        .map(|&b| {
            let mine: Vec<&BudgetRow> = rows.iter().filter(|r| r.budget == b).collect();
            BudgetMean {
                budget: b,
                repeats: mine.len(),
                mean_raw_accuracy: mine.iter().map(|r| r.mean_raw_accuracy).sum::<f64>()
                    / mine.len() as f64,
                mean_transition_accuracy: mean_option(
                    mine.iter().map(|r| r.mean_transition_accuracy),
                ),
            }
        })
        .collect();
    Ok(BudgetOutcome {
        variant: spec.variant,
        rows,
        means,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceLine {
    pub raw_accuracy: f64,
    pub transition_accuracy: Option<f64>,
}

impl From<&SuiteReport> for ReferenceLine {
    fn from(s: &SuiteReport) -> Self {
        ReferenceLine {
            raw_accuracy: s.mean_raw_accuracy,
            transition_accuracy: s.mean_transition_accuracy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub variant: Variant,
    pub epoch: usize,
    pub stroke: ReferenceLine,
    pub retention: ReferenceLine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceOutcome {
    pub stroke_zero_shot: ReferenceLine,
    pub retention_zero_shot: ReferenceLine,
    pub epochs: usize,
    pub checkpoint_every: usize,
    pub points: Vec<CurvePoint>,
}

/// Trains each variant for `cfg.adaptation.convergence_epochs` and evaluates
/// a checkpoint every `checkpoint_every` epochs on the stroke tests and on
/// held-out healthy recordings. `on_checkpoint` receives every checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn convergence_run(
    cfg: &ExperimentConfig,
    specs: &[AdaptationSpec],
    hyper: &TrainHyper,
    healthy: &Model,
    train_sets: &[&Recording],
    stroke_tests: &[&Recording],
    retention: &[&Recording],
    seed: u64,
    on_checkpoint: &mut dyn FnMut(Variant, usize, &Model) -> Result<()>,
) -> Result<ConvergenceOutcome> {
    if retention.is_empty() {
        return Err(Error::Data(
            "convergence needs healthy retention recordings".into(),
        ));
    }
    if stroke_tests.is_empty() || train_sets.is_empty() {
        return Err(Error::Data(
            "convergence needs stroke training and test sets".into(),
        ));
    }
    let every = cfg.adaptation.checkpoint_every.max(1);
    let hyper = TrainHyper {
        epochs: cfg.adaptation.convergence_epochs,
        ..hyper.clone()
    };
    let stroke_zero_shot = ReferenceLine::from(&evaluate(cfg, healthy, stroke_tests)?);
    let retention_zero_shot = ReferenceLine::from(&evaluate(cfg, healthy, retention)?);
    let spans: Vec<Span> = train_sets.iter().map(|r| Span::whole(r)).collect();
    let mut points = Vec::new();
    for spec in specs {
        if spec.variant == Variant::ZeroShot {
            continue;
        }
        adapt(
            cfg,
            spec,
            &hyper,
            Some(healthy),
            &spans,
            derive_seed(seed, &[TAG_CONVERGENCE]),
            &mut |epoch, model| {
                if epoch % every != 0 {
                    return Ok(());
                }
                points.push(CurvePoint {
                    variant: spec.variant,
                    epoch,
                    stroke: ReferenceLine::from(&evaluate(cfg, model, stroke_tests)?),
                    retention: ReferenceLine::from(&evaluate(cfg, model, retention)?),
                });
                on_checkpoint(spec.variant, epoch, model)
            },
        )?;
    }
    Ok(ConvergenceOutcome {
        stroke_zero_shot,
        retention_zero_shot,
        epochs: hyper.epochs,
        checkpoint_every: every,
        points,
    })
}
