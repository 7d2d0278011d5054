//! Masked-objective training restricted by a trainability mask.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LoraState, TrainabilityMask, Variant};
use crate::error::{Error, Result};
use crate::model::{
    bind, forward_graph, loss_graph, ForwardMode, ModelConfig, ModelParams, WindowBatch,
};
use crate::numerics::{adam_step, AdamConfig, AdamState, Graph, Tensor};

/// Fixed-length training windows in normalized units.
#[derive(Clone, Debug, Default)]
pub struct WindowSet {
    window_len: usize,
    channels: usize,
    /// `[n×T×C]` row-major.
    emg: Vec<f32>,
    /// `[n×T]`.
    labels: Vec<usize>,
}

impl WindowSet {
    pub fn new(window_len: usize, channels: usize) -> Self {
        WindowSet {
            window_len,
            channels,
            emg: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, emg: &[f32], labels: &[usize]) -> Result<()> {
        if emg.len() != self.window_len * self.channels || labels.len() != self.window_len {
            return Err(Error::Dimension(format!(
                "window needs {}×{} samples and {} labels, got {} values and {} labels",
                self.window_len,
                self.channels,
                self.window_len,
                emg.len(),
                labels.len()
            )));
        }
        self.emg.extend_from_slice(emg);
        self.labels.extend_from_slice(labels);
        Ok(())
    }

    pub fn extend(&mut self, other: &WindowSet) {
        self.emg.extend_from_slice(&other.emg);
        self.labels.extend_from_slice(&other.labels);
    }

    pub fn len(&self) -> usize {
        self.labels.len() / self.window_len.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn window(&self, i: usize) -> (&[f32], &[usize]) {
        let (t, c) = (self.window_len, self.channels);
        (
            &self.emg[i * t * c..(i + 1) * t * c],
            &self.labels[i * t..(i + 1) * t],
        )
    }

    /// Stacks the selected windows into `[B×T×C]` plus flat labels.
    pub fn gather(&self, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut emg = Vec::with_capacity(idx.len() * self.window_len * self.channels);
        let mut labels = Vec::with_capacity(idx.len() * self.window_len);
        for &i in idx {
            let (e, l) = self.window(i);
            emg.extend_from_slice(e);
            labels.extend_from_slice(l);
        }
        Ok((
            Tensor::new(vec![idx.len(), self.window_len, self.channels], emg)?,
            labels,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub learning_rate: f32,
    pub weight_decay: f32,
    pub epochs: usize,
    pub batch_size: usize,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f32,
    /// Overrides the model's reconstruction weight during training.
    pub lambda_recon: Option<f32>,
    /// Caps optimizer steps per epoch (windows are then a random subset).
    pub max_steps_per_epoch: Option<usize>,
    /// Windows used for the per-epoch loss trace.
    pub trace_windows: usize,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            epochs: 10,
            batch_size: 16,
            grad_clip: 1.0,
            lambda_recon: None,
            max_steps_per_epoch: None,
            trace_windows: 128,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub params: ModelParams,
    pub lora: Option<LoraState>,
    /// Objective after each epoch, on a fixed masked subset of the training windows.
    pub loss_trace: Vec<f32>,
    pub steps: usize,
}

/// Trains the tensors selected by `mask` with Adam on the masked objective.
/// `on_epoch(epoch, params, lora)` runs after every epoch (1-based).
pub fn finetune(
    variant: Variant,
    params: &ModelParams,
    lora: Option<&LoraState>,
    mask: &TrainabilityMask,
    config: &ModelConfig,
    windows: &WindowSet,
    hyper: &TrainHyper,
    on_epoch: &mut dyn FnMut(usize, &ModelParams, Option<&LoraState>) -> Result<()>,
) -> Result<FinetuneOutcome> {
    if variant == Variant::ZeroShot {
        return Err(Error::Unsupported(
            "zero-shot models are evaluated, not trained".into(),
        ));
    }
    if windows.is_empty() {
        return Err(Error::Data("no training windows".into()));
    }
    if hyper.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut config = config.clone();
    if let Some(l) = hyper.lambda_recon {
        config.lambda_recon = l;
    }
    config.validate()?;

    let mut params = params.clone();
    let mut lora = lora.cloned();
    let adam = AdamConfig {
        lr: hyper.learning_rate,
        weight_decay: hyper.weight_decay,
        ..AdamConfig::default()
    };
    let mut state = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let trace = TraceSet::new(&config, windows, hyper.trace_windows, hyper.seed)?;
    let trainable = |n: &str| mask.is_trainable(n);

    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut loss_trace = Vec::with_capacity(hyper.epochs);
    let mut steps = 0;
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let mut batches: Vec<&[usize]> = order.chunks(hyper.batch_size).collect();
        if let Some(cap) = hyper.max_steps_per_epoch {
            batches.truncate(cap);
        }
        for idx in batches {
            let (emg, labels) = windows.gather(idx)?;
            let batch = WindowBatch::masked(&config, emg, labels, &mut rng)?;
            if !batch.label_mask.iter().any(|&m| m) && !batch.emg_mask.iter().any(|&m| m) {
                continue;
            }
            let mut g = Graph::new();
            let w = bind(&mut g, &params, lora.as_ref(), &trainable)?;
            let loss = loss_graph(&mut g, &w, &config, &batch, ForwardMode::Train(&mut rng))?;
            if w.trainable().is_empty() {
                continue;
            }
            g.backward(loss)?;
            let mut grads: BTreeMap<String, Vec<f32>> = w
                .trainable()
                .iter()
                .map(|(n, v)| {
                    let grad = g
                        .grad(*v)
                        .map(<[f32]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; g.value(*v).numel()]);
                    (n.clone(), grad)
                })
                .collect();
            clip_global_norm(&mut grads, hyper.grad_clip);
            let mut slots = take_trainables(&mut params, lora.as_mut(), grads.keys())?;
            adam_step(&mut slots, &grads, &mut state, &adam)?;
            put_back(&mut params, lora.as_mut(), slots);
            steps += 1;
        }
        loss_trace.push(trace.loss(&params, lora.as_ref(), &config)?);
        on_epoch(epoch, &params, lora.as_ref())?;
    }
    Ok(FinetuneOutcome {
        params,
        lora,
        loss_trace,
        steps,
    })
}

fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f32>>, max_norm: f32) {
    if max_norm <= 0.0 {
        return;
    }
    let sq: f64 = grads.values().flatten().map(|&g| g as f64 * g as f64).sum();
    let norm = sq.sqrt();
    if norm > max_norm as f64 {
        let s = (max_norm as f64 / norm) as f32;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
}

fn take_trainables<'a>(
    params: &mut ModelParams,
    mut lora: Option<&mut LoraState>,
    names: impl Iterator<Item = &'a String>,
) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for name in names {
        let t = match adapter_slot(lora.as_deref_mut(), name) {
            Some(slot) => std::mem::take(slot),
            None => params
                .map_mut()
                .remove(name)
                .ok_or_else(|| Error::Manifest(format!("missing tensor {name}")))?,
        };
        out.insert(name.clone(), t);
    }
    Ok(out)
}

fn put_back(
    params: &mut ModelParams,
    mut lora: Option<&mut LoraState>,
    slots: BTreeMap<String, Tensor>,
) {
    for (name, t) in slots {
        match adapter_slot(lora.as_deref_mut(), &name) {
            Some(slot) => *slot = t,
            None => params.insert(name, t),
        }
    }
}

fn adapter_slot<'a>(lora: Option<&'a mut LoraState>, name: &str) -> Option<&'a mut Tensor> {
    let lora = lora?;
    if let Some(base) = name.strip_suffix(".lora_a") {
        return lora.pairs.get_mut(base).map(|p| &mut p.a);
    }
    if let Some(base) = name.strip_suffix(".lora_b") {
        return lora.pairs.get_mut(base).map(|p| &mut p.b);
    }
    None
}

/// A fixed, seeded masking of a subset of windows for loss reporting.
struct TraceSet {
    batches: Vec<WindowBatch>,
}

impl TraceSet {
    fn new(config: &ModelConfig, windows: &WindowSet, max: usize, seed: u64) -> Result<Self> {
        let n = windows.len().min(max.max(1));
        let step = windows.len() as f64 / n as f64;
        let idx: Vec<usize> = (0..n).map(|i| (i as f64 * step) as usize).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_6163_65);
        let mut batches = Vec::new();
        for chunk in idx.chunks(32) {
            let (emg, labels) = windows.gather(chunk)?;
            let mut batch = WindowBatch::masked(config, emg, labels, &mut rng)?;
            if !batch.label_mask.iter().any(|&m| m) {
                batch.label_mask[0] = true;
            }
            batches.push(batch);
        }
        Ok(TraceSet { batches })
    }

    fn loss(
        &self,
        params: &ModelParams,
        lora: Option<&LoraState>,
        config: &ModelConfig,
    ) -> Result<f32> {
        let mut total = 0.0f64;
        let mut count = 0usize;
        for batch in &self.batches {
            let mut g = Graph::new();
            let w = bind(&mut g, params, lora, &|_| false)?;
            let loss = loss_graph(&mut g, &w, config, batch, ForwardMode::Eval)?;
            total += g.value(loss).data()[0] as f64 * batch.batch_size() as f64;
            count += batch.batch_size();
        }
        Ok((total / count as f64) as f32)
    }
}

/// Fraction of label-masked patches whose intent is predicted correctly.
pub fn masked_label_accuracy(
    params: &ModelParams,
    lora: Option<&LoraState>,
    config: &ModelConfig,
    batch: &WindowBatch,
) -> Result<f32> {
    let mut g = Graph::new();
    let w = bind(&mut g, params, lora, &|_| false)?;
    let (logits, _) = forward_graph(&mut g, &w, config, batch, ForwardMode::Eval, false)?;
    let logits = g.value(logits);
    let tp = config.num_patches();
    let (mut hit, mut total) = (0usize, 0usize);
    for (row, &masked) in batch.label_mask.iter().enumerate() {
        if masked {
            let truth =
                batch.labels[(row / tp) * config.window_len + (row % tp) * config.patch_len];
            hit += usize::from(crate::model::argmax(logits.row(row)) == truth);
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Data("batch has no masked labels".into()));
    }
    Ok(hit as f32 / total as f32)
}
