//! Encoder-only transformer over EMG patches and intent-label tokens.
//!
//! Each patch of `patch_len` samples becomes one token: a linear embedding of
//! the (possibly zeroed) EMG patch plus a label embedding (the mask token when
//! the label is hidden) plus a learned position embedding. Two linear heads
//! read the encoder output: per-patch intent logits and a reconstruction of
//! the EMG patch.

mod checkpoint;
mod forward;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub(crate) use checkpoint::{
    body_to_tensors, read_container, tensors_to_body, write_container, ManifestEntry,
};
pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, load_checkpoint_for, parse_checkpoint, save_checkpoint,
    tensor_crc, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub(crate) use forward::infer_patch_logits;
pub use forward::{
    bind, forward, forward_graph, forward_with, loss_graph, predict_window, predict_window_with,
    pretrain_loss, pretrain_loss_with, Binding, ForwardMode,
};

pub const RELAX: usize = 0;
pub const OPEN: usize = 1;
pub const CLOSE: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub channels: usize,
    pub window_len: usize,
    pub num_classes: usize,
    pub patch_len: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub dropout: f32,
    pub emg_mask_ratio: f32,
    pub label_mask_ratio: f32,
    /// Probability that a training window hides every label token, which is
    /// the condition the model sees at inference time.
    pub full_label_mask_prob: f32,
    pub lambda_recon: f32,
    pub ln_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 8,
            window_len: 200,
            num_classes: 3,
            patch_len: 10,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            ff_dim: 64,
            dropout: 0.1,
            emg_mask_ratio: 0.15,
            label_mask_ratio: 0.5,
            full_label_mask_prob: 0.5,
            lambda_recon: 1.0,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.channels == 0 || self.patch_len == 0 || self.window_len == 0 {
            return bad("channels, patch_len and window_len must be positive".into());
        }
        if self.window_len % self.patch_len != 0 {
            return bad(format!(
                "window_len {} is not divisible by patch_len {}",
                self.window_len, self.patch_len
            ));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.num_classes < 2 {
            return bad("num_classes must be at least 2".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        for (name, r) in [
            ("emg_mask_ratio", self.emg_mask_ratio),
            ("label_mask_ratio", self.label_mask_ratio),
            ("full_label_mask_prob", self.full_label_mask_prob),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} {r} outside [0, 1]"));
            }
        }
        if self.lambda_recon < 0.0 || self.ln_eps <= 0.0 {
            return bad("lambda_recon must be >= 0 and ln_eps > 0".into());
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        self.window_len / self.patch_len
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_len * self.channels
    }

    pub fn label_mask_token(&self) -> usize {
        self.num_classes
    }

    /// Names and shapes of every parameter tensor, in name order.
    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        let (d, k, f) = (self.d_model, self.num_classes, self.ff_dim);
        let mut m = vec![
            (
                "emg_patch_embed.weight".to_string(),
                vec![self.patch_dim(), d],
            ),
            ("emg_patch_embed.bias".to_string(), vec![d]),
            ("label_embed".to_string(), vec![k + 1, d]),
            ("positional_embed".to_string(), vec![self.num_patches(), d]),
            ("ln_final.gain".to_string(), vec![d]),
            ("ln_final.bias".to_string(), vec![d]),
            ("head_intent.weight".to_string(), vec![d, k]),
            ("head_intent.bias".to_string(), vec![k]),
            ("head_recon.weight".to_string(), vec![d, self.patch_dim()]),
            ("head_recon.bias".to_string(), vec![self.patch_dim()]),
        ];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            for proj in ["wq", "wk", "wv", "wo"] {
                m.push((p(&format!("attn.{proj}.weight")), vec![d, d]));
                m.push((p(&format!("attn.{proj}.bias")), vec![d]));
            }
            m.push((p("ff1.weight"), vec![d, f]));
            m.push((p("ff1.bias"), vec![f]));
            m.push((p("ff2.weight"), vec![f, d]));
            m.push((p("ff2.bias"), vec![d]));
            for ln in ["ln1", "ln2"] {
                m.push((p(&format!("{ln}.gain")), vec![d]));
                m.push((p(&format!("{ln}.bias")), vec![d]));
            }
        }
        m.sort_by(|a, b| a.0.cmp(&b.0));
        m
    }
}

/// Whether a parameter belongs to a head rather than the backbone.
pub fn is_head_param(name: &str) -> bool {
    name.starts_with("head_")
}

/// Named parameter tensors of one model instance.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        ModelParams { tensors }
    }

    /// Fresh random initialization: scaled-normal linear weights, zero biases,
    /// unit layer-norm gains, small embeddings.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.manifest() {
            let t = if name.ends_with(".gain") {
                Tensor::full(&shape, 1.0)
            } else if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else if name == "label_embed" || name == "positional_embed" {
                Tensor::randn(&shape, 0.1, rng)
            } else {
                let fan_in = shape[0] as f32;
                Tensor::randn(&shape, 1.0 / fan_in.sqrt(), rng)
            };
            tensors.insert(name, t);
        }
        Ok(ModelParams { tensors })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Manifest(format!("missing tensor {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Manifest(format!("missing tensor {name}")))
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn map(&self) -> &BTreeMap<String, Tensor> {
        &self.tensors
    }

    pub fn map_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Checks names and shapes against `config`, naming the first offender.
    pub fn check_manifest(&self, config: &ModelConfig) -> Result<()> {
        let expected = config.manifest();
        for (name, shape) in &expected {
            match self.tensors.get(name) {
                None => return Err(Error::Manifest(format!("missing tensor {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Manifest(format!(
                        "tensor {name} has shape {:?}, config expects {:?}",
                        t.shape(),
                        shape
                    )))
                }
                Some(t) if !t.is_finite() => {
                    return Err(Error::NonFinite(format!("parameter {name}")))
                }
                _ => {}
            }
        }
        if let Some(extra) = self
            .tensors
            .keys()
            .find(|n| !expected.iter().any(|(e, _)| e == *n))
        {
            return Err(Error::Manifest(format!("unexpected tensor {extra}")));
        }
        Ok(())
    }
}

/// Per-channel z-normalization statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalizer {
    pub fn identity(channels: usize) -> Self {
        Normalizer {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Fits statistics over row-major `[n×C]` sample blocks.
    pub fn fit<'a>(channels: usize, blocks: impl IntoIterator<Item = &'a [f32]>) -> Result<Self> {
        let mut sum = vec![0.0f64; channels];
        let mut sq = vec![0.0f64; channels];
        let mut n = 0usize;
        for block in blocks {
            if block.len() % channels != 0 {
                return Err(Error::Dimension(format!(
                    "sample block of {} values is not a multiple of {channels} channels",
                    block.len()
                )));
            }
            for row in block.chunks(channels) {
                for (c, &v) in row.iter().enumerate() {
                    sum[c] += v as f64;
                    sq[c] += v as f64 * v as f64;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Data(
                "cannot fit normalization on zero samples".into(),
            ));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / n as f64 - m * m).max(0.0).sqrt().max(1e-6)) as f32)
            .collect();
        Ok(Normalizer {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        })
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Normalizes a row-major `[n×C]` block.
    pub fn apply(&self, block: &[f32]) -> Vec<f32> {
        let c = self.channels();
        block
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - self.mean[i % c]) / self.std[i % c])
            .collect()
    }
}

/// A trained (or freshly initialized) model with its preprocessing.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub norm: Normalizer,
    pub params: ModelParams,
}

impl Model {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let params = ModelParams::init(&config, rng)?;
        let norm = Normalizer::identity(config.channels);
        Ok(Model {
            config,
            norm,
            params,
        })
    }
}

/// Batch of equal-length windows with their masking pattern.
#[derive(Clone, Debug)]
pub struct WindowBatch {
    /// `[B×T×C]`, normalized units.
    pub emg: Tensor,
    /// `B·T` per-timestep labels, constant within each patch.
    pub labels: Vec<usize>,
    /// `B·T_p`, true where the EMG patch is hidden.
    pub emg_mask: Vec<bool>,
    /// `B·T_p`, true where the label token is replaced by the mask token.
    pub label_mask: Vec<bool>,
}

impl WindowBatch {
    /// Builds a batch, replacing each patch's labels with their majority
    /// class (ties toward the lower class index).
    pub fn new(
        config: &ModelConfig,
        emg: Tensor,
        labels: Vec<usize>,
        emg_mask: Vec<bool>,
        label_mask: Vec<bool>,
    ) -> Result<Self> {
        let (t, c) = (config.window_len, config.channels);
        if emg.ndim() != 3 || emg.shape()[1] != t || emg.shape()[2] != c {
            return Err(Error::Dimension(format!(
                "batch emg must be [B×{t}×{c}], got {:?}",
                emg.shape()
            )));
        }
        let b = emg.shape()[0];
        let tp = config.num_patches();
        if labels.len() != b * t || emg_mask.len() != b * tp || label_mask.len() != b * tp {
            return Err(Error::Dimension(format!(
                "batch of {b} windows needs {} labels and {} mask entries",
                b * t,
                b * tp
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= config.num_classes) {
            return Err(Error::Label(format!(
                "label {bad} outside [0, {})",
                config.num_classes
            )));
        }
        let labels = patch_majority(&labels, config.patch_len, config.num_classes);
        Ok(WindowBatch {
            emg,
            labels,
            emg_mask,
            label_mask,
        })
    }

    /// All labels hidden and no EMG masking: the inference condition.
    pub fn inference(config: &ModelConfig, emg: Tensor) -> Result<Self> {
        let b = emg.shape().first().copied().unwrap_or(0);
        let tp = config.num_patches();
        let labels = vec![RELAX; b * config.window_len];
        WindowBatch::new(config, emg, labels, vec![false; b * tp], vec![true; b * tp])
    }

    /// Draws training masks for `labels`.
    pub fn masked<R: Rng + ?Sized>(
        config: &ModelConfig,
        emg: Tensor,
        labels: Vec<usize>,
        rng: &mut R,
    ) -> Result<Self> {
        let b = emg.shape().first().copied().unwrap_or(0);
        let tp = config.num_patches();
        let mut emg_mask = vec![false; b * tp];
        let mut label_mask = vec![false; b * tp];
        for w in 0..b {
            for p in 0..tp {
                emg_mask[w * tp + p] = rng.gen::<f32>() < config.emg_mask_ratio;
            }
            if rng.gen::<f32>() < config.full_label_mask_prob {
                label_mask[w * tp..(w + 1) * tp]
                    .iter_mut()
                    .for_each(|m| *m = true);
            } else {
                for p in 0..tp {
                    label_mask[w * tp + p] = rng.gen::<f32>() < config.label_mask_ratio;
                }
            }
        }
        WindowBatch::new(config, emg, labels, emg_mask, label_mask)
    }

    pub fn batch_size(&self) -> usize {
        self.emg.shape()[0]
    }
}

fn patch_majority(labels: &[usize], patch_len: usize, k: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(labels.len());
    let mut counts = vec![0usize; k];
    for patch in labels.chunks(patch_len) {
        counts.iter_mut().for_each(|c| *c = 0);
        for &l in patch {
            counts[l] += 1;
        }
        let mut best = 0;
        for (cls, &n) in counts.iter().enumerate() {
            if n > counts[best] {
                best = cls;
            }
        }
        out.extend(std::iter::repeat(best).take(patch.len()));
    }
    out
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn default_config_is_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.num_patches(), 20);
        assert_eq!(c.patch_dim(), 80);
        assert_eq!(c.label_mask_token(), 3);
    }

    #[test]
    fn invalid_configs_rejected() {
        let c = ModelConfig {
            window_len: 205,
            ..ModelConfig::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = ModelConfig {
            n_heads: 5,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            num_classes: 1,
            ..ModelConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_matches_manifest() {
        let c = ModelConfig::default();
        let p = ModelParams::init(&c, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        p.check_manifest(&c).unwrap();
        let other = ModelConfig {
            d_model: 16,
            ..c.clone()
        };
        let err = p.check_manifest(&other).unwrap_err();
        assert!(matches!(err, Error::Manifest(_)));
    }

    #[test]
    fn majority_vote_within_patch() {
        let labels = vec![0, 0, 1, 1, 1, 2, 2, 0];
        assert_eq!(patch_majority(&labels, 4, 3), vec![0, 0, 0, 0, 2, 2, 2, 2]);
        assert_eq!(patch_majority(&[1, 1, 2], 3, 3), vec![1, 1, 1]);
    }

    #[test]
    fn argmax_prefers_lower_index() {
        assert_eq!(argmax(&[0.5, 0.5, 0.1]), 0);
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
    }

    #[test]
    fn normalizer_round_trip() {
        let data = [1.0f32, 10.0, 3.0, 30.0];
        let n = Normalizer::fit(2, [&data[..]]).unwrap();
        assert_eq!(n.mean, vec![2.0, 20.0]);
        assert_eq!(n.std, vec![1.0, 10.0]);
        assert_eq!(n.apply(&data), vec![-1.0, -1.0, 1.0, 1.0]);
    }
}
