//! Adaptation variants: which tensors train, and the LoRA weight algebra.

mod sidecar;
mod train;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::numerics::Tensor;

pub use sidecar::{load_adapters, save_adapters, ADAPTER_MAGIC, ADAPTER_VERSION};
pub use train::{finetune, masked_label_accuracy, FinetuneOutcome, TrainHyper, WindowSet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    ZeroShot,
    Scratch,
    HeadOnly,
    Lora,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::ZeroShot,
        Variant::Scratch,
        Variant::HeadOnly,
        Variant::Lora,
        Variant::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::ZeroShot => "zero_shot",
            Variant::Scratch => "scratch",
            Variant::HeadOnly => "head_only",
            Variant::Lora => "lora",
            Variant::Full => "full",
        }
    }

    /// Whether the variant starts from the healthy checkpoint.
    pub fn needs_checkpoint(self) -> bool {
        self != Variant::Scratch
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == norm)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?}; expected one of zero-shot, scratch, head-only, lora, full"
                ))
            })
    }
}

/// Default LoRA targets: every linear weight matrix, heads included.
pub fn default_lora_targets() -> Vec<String> {
    [
        "layers.*.attn.*.weight",
        "layers.*.ff*.weight",
        "head_*.weight",
    ]
    .into_iter()
    .map(String::from)
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationSpec {
    pub variant: Variant,
    pub lora_rank: usize,
    /// Defaults to `2 * lora_rank` when absent.
    pub lora_alpha: Option<f32>,
    pub lora_targets: Vec<String>,
    pub init_source: Option<PathBuf>,
}

impl Default for AdaptationSpec {
    fn default() -> Self {
        AdaptationSpec {
            variant: Variant::Full,
            lora_rank: 4,
            lora_alpha: None,
            lora_targets: default_lora_targets(),
            init_source: None,
        }
    }
}

impl AdaptationSpec {
    pub fn new(variant: Variant) -> Self {
        AdaptationSpec {
            variant,
            ..AdaptationSpec::default()
        }
    }

    pub fn alpha(&self) -> f32 {
        self.lora_alpha.unwrap_or(2.0 * self.lora_rank as f32)
    }
}

/// Matches `name` against a pattern where `*` spans any run of characters.
pub fn pattern_matches(pattern: &str, name: &str) -> bool {
    let parts: Vec<&str> = pattern.split('*').collect();
    if parts.len() == 1 {
        return pattern == name;
    }
    let (first, last) = (parts[0], parts[parts.len() - 1]);
    if !name.starts_with(first) || name.len() < first.len() + last.len() || !name.ends_with(last) {
        return false;
    }
    let mut rest = &name[first.len()..name.len() - last.len()];
    for mid in &parts[1..parts.len() - 1] {
        match rest.find(mid) {
            Some(i) => rest = &rest[i + mid.len()..],
            None => return false,
        }
    }
    true
}

/// Low-rank update for one weight stored as `[in×out]` (activations
/// multiply from the left): `W_eff = W + (α/r)·A·B` with `A: [in×r]`,
/// `B: [r×out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair {
    pub base_name: String,
    pub a: Tensor,
    pub b: Tensor,
}

impl LoraPair {
    /// The pair's rank is `rank` clamped to the smaller side of the weight,
    /// so a narrow head (e.g. `d×K` with `K < r`) still gets a full-rank update.
    pub fn init<R: Rng + ?Sized>(
        base_name: &str,
        base: &Tensor,
        rank: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let (din, dout) = (base.shape()[0], base.shape()[1]);
        if rank == 0 {
            return Err(Error::Config(format!(
                "lora rank must be at least 1 (target {base_name})"
            )));
        }
        let rank = rank.min(din).min(dout);
        Ok(LoraPair {
            base_name: base_name.to_string(),
            a: Tensor::randn(&[din, rank], (1.0 / rank as f32).sqrt(), rng),
            b: Tensor::zeros(&[rank, dout]),
        })
    }

    pub fn rank(&self) -> usize {
        self.a.shape()[1]
    }

    pub fn num_params(&self) -> usize {
        self.a.numel() + self.b.numel()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraState {
    pub rank: usize,
    pub alpha: f32,
    /// Keyed by base weight name.
    pub pairs: BTreeMap<String, LoraPair>,
}

impl LoraState {
    pub fn scale(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    pub fn a_name(base: &str) -> String {
        format!("{base}.lora_a")
    }

    pub fn b_name(base: &str) -> String {
        format!("{base}.lora_b")
    }

    /// Attaches a fresh pair to every weight matching `targets`.
    pub fn attach<R: Rng + ?Sized>(
        params: &ModelParams,
        rank: usize,
        alpha: f32,
        targets: &[String],
        rng: &mut R,
    ) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (name, t) in params.iter() {
            if t.ndim() == 2 && targets.iter().any(|p| pattern_matches(p, name)) {
                pairs.insert(name.clone(), LoraPair::init(name, t, rank, rng)?);
            }
        }
        if pairs.is_empty() {
            return Err(Error::Config(format!(
                "lora targets {targets:?} match no weight matrix"
            )));
        }
        Ok(LoraState { rank, alpha, pairs })
    }

    pub fn num_params(&self) -> usize {
        self.pairs.values().map(LoraPair::num_params).sum()
    }

    /// Adapter tensor names in a stable order.
    pub fn tensor_names(&self) -> Vec<String> {
        self.pairs
            .keys()
            .flat_map(|b| [LoraState::a_name(b), LoraState::b_name(b)])
            .collect()
    }

    pub fn targets(&self) -> Vec<String> {
        self.pairs.keys().cloned().collect()
    }
}

/// `W + (α/r)·A·B`. The base tensor is not modified.
pub fn lora_effective_weight(
    base: &Tensor,
    pair: &LoraPair,
    alpha: f32,
    rank: usize,
) -> Result<Tensor> {
    let rp = pair.a.shape().get(1).copied().unwrap_or(0);
    if base.ndim() != 2
        || rp == 0
        || rp > rank
        || pair.a.shape() != [base.shape()[0], rp]
        || pair.b.shape() != [rp, base.shape()[1]]
    {
        return Err(Error::Dimension(format!(
            "adapter for {} has A {:?}, B {:?}, base {:?}, rank {rank}",
            pair.base_name,
            pair.a.shape(),
            pair.b.shape(),
            base.shape()
        )));
    }
    let delta = pair.a.matmul(&pair.b)?;
    let scale = alpha / rank as f32;
    let mut out = base.clone();
    for (w, d) in out.data_mut().iter_mut().zip(delta.data()) {
        // Adding an exact zero is skipped so a zero adapter leaves `-0.0` intact.
        if *d != 0.0 {
            *w += scale * d;
        }
    }
    Ok(out)
}

/// Folds every adapter into its base weight.
pub fn merge_lora(params: &ModelParams, lora: &LoraState) -> Result<ModelParams> {
    let mut merged = params.clone();
    for (base, pair) in &lora.pairs {
        let w = params
            .get(base)
            .map_err(|_| Error::Manifest(format!("adapter targets unknown tensor {base}")))?;
        let eff = lora_effective_weight(w, pair, lora.alpha, lora.rank)?;
        merged.insert(base.clone(), eff);
    }
    Ok(merged)
}

/// Which tensors an optimizer may touch, by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainabilityMask {
    flags: BTreeMap<String, bool>,
}

impl TrainabilityMask {
    pub fn new(flags: BTreeMap<String, bool>) -> Self {
        TrainabilityMask { flags }
    }

    /// Every name maps to `value`.
    pub fn uniform<'a>(names: impl IntoIterator<Item = &'a String>, value: bool) -> Self {
        TrainabilityMask {
            flags: names.into_iter().map(|n| (n.clone(), value)).collect(),
        }
    }

    pub fn for_variant(variant: Variant, params: &ModelParams, lora: Option<&LoraState>) -> Self {
        let mut flags: BTreeMap<String, bool> = params
            .names()
            .map(|n| {
                let on = match variant {
                    Variant::ZeroShot | Variant::Lora => false,
                    Variant::HeadOnly => n == "head_intent.weight" || n == "head_intent.bias",
                    Variant::Scratch | Variant::Full => true,
                };
                (n.clone(), on)
            })
            .collect();
        if let Some(state) = lora {
            for n in state.tensor_names() {
                flags.insert(n, variant == Variant::Lora);
            }
        }
        TrainabilityMask { flags }
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.flags.get(name).copied().unwrap_or(false)
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.flags
            .iter()
            .filter(|(_, &on)| on)
            .map(|(n, _)| n.as_str())
            .collect()
    }

    pub fn count_trainable(&self) -> usize {
        self.flags.values().filter(|&&on| on).count()
    }
}

/// A model ready for adaptation.
#[derive(Clone, Debug)]
pub struct Built {
    pub model: Model,
    pub lora: Option<LoraState>,
    pub mask: TrainabilityMask,
}

/// Prepares the starting point for `spec.variant`: a fresh seeded model for
/// scratch, otherwise an exact copy of the healthy model (plus zero-effect
/// adapters for LoRA).
pub fn build_variant<R: Rng + ?Sized>(
    spec: &AdaptationSpec,
    healthy: Option<&Model>,
    config: &ModelConfig,
    rng: &mut R,
) -> Result<Built> {
    let model = match (spec.variant, healthy) {
        (Variant::Scratch, _) => Model::init(config.clone(), rng)?,
        (_, Some(h)) => h.clone(),
        (v, None) => {
            return Err(Error::Config(format!(
                "variant {v} requires a healthy checkpoint"
            )));
        }
    };
    let lora = if spec.variant == Variant::Lora {
        Some(LoraState::attach(
            &model.params,
            spec.lora_rank,
            spec.alpha(),
            &spec.lora_targets,
            rng,
        )?)
    } else {
        None
    };
    let mask = TrainabilityMask::for_variant(spec.variant, &model.params, lora.as_ref());
    Ok(Built { model, lora, mask })
}
