use std::collections::HashMap;

use rand::RngCore;

use super::{argmax, ModelConfig, ModelParams, WindowBatch};
use crate::adaptation::LoraState;
use crate::error::{Error, Result};
use crate::numerics::{softmax_vec, Graph, Tensor, Var, IGNORE_INDEX};

/// Parameter tensors placed on a graph, plus any LoRA adapters keyed by the
/// base weight they modify.
pub struct Binding {
    vars: HashMap<String, Var>,
    adapters: HashMap<String, (Var, Var, f32)>,
    trainable: Vec<(String, Var)>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Manifest(format!("missing tensor {name}")))
    }

    /// `(name, var)` for every tensor bound with gradient tracking.
    pub fn trainable(&self) -> &[(String, Var)] {
        &self.trainable
    }
}

/// Places `params` (and adapters) on `g`. Tensors for which `trainable`
/// returns true are tracked for gradients; adapter tensors are named
/// `<base>.lora_a` / `<base>.lora_b`.
pub fn bind(
    g: &mut Graph,
    params: &ModelParams,
    lora: Option<&LoraState>,
    trainable: &dyn Fn(&str) -> bool,
) -> Result<Binding> {
    let mut vars = HashMap::new();
    let mut tracked = Vec::new();
    for (name, t) in params.iter() {
        let on = trainable(name);
        let v = g
            .leaf(t.clone().with_requires_grad(on))
            .map_err(|e| e.in_layer(name))?;
        if on {
            tracked.push((name.clone(), v));
        }
        vars.insert(name.clone(), v);
    }
    let mut adapters = HashMap::new();
    if let Some(state) = lora {
        let scale = state.scale();
        for (base, pair) in &state.pairs {
            let an = LoraState::a_name(base);
            let bn = LoraState::b_name(base);
            let (ta, tb) = (trainable(&an), trainable(&bn));
            let a = g.leaf(pair.a.clone().with_requires_grad(ta))?;
            let b = g.leaf(pair.b.clone().with_requires_grad(tb))?;
            if ta {
                tracked.push((an, a));
            }
            if tb {
                tracked.push((bn, b));
            }
            adapters.insert(base.clone(), (a, b, scale));
        }
    }
    Ok(Binding {
        vars,
        adapters,
        trainable: tracked,
    })
}

/// Whether dropout is active.
pub enum ForwardMode<'a> {
    Eval,
    Train(&'a mut dyn RngCore),
}

fn linear(g: &mut Graph, w: &Binding, x: Var, prefix: &str) -> Result<Var> {
    let wname = format!("{prefix}.weight");
    let weight = w.var(&wname)?;
    let bias = w.var(&format!("{prefix}.bias"))?;
    let ctx = |e: Error| e.in_layer(prefix);
    let y = g.matmul(x, weight).map_err(ctx)?;
    let mut y = g.add_bias(y, bias).map_err(ctx)?;
    if let Some(&(a, b, scale)) = w.adapters.get(&wname) {
        let xa = g.matmul(x, a).map_err(ctx)?;
        let xab = g.matmul(xa, b).map_err(ctx)?;
        let delta = g.scale(xab, scale).map_err(ctx)?;
        y = g.add(y, delta).map_err(ctx)?;
    }
    Ok(y)
}

fn maybe_dropout(g: &mut Graph, x: Var, p: f32, mode: &mut ForwardMode<'_>) -> Result<Var> {
    match mode {
        ForwardMode::Train(rng) if p > 0.0 => g.dropout(x, p, &mut **rng),
        _ => Ok(x),
    }
}

/// Records the encoder on `g`. Returns per-patch intent logits `[B·T_p×K]`
/// and, when `with_recon`, the reconstruction `[B·T_p×patch_len·C]`.
pub fn forward_graph(
    g: &mut Graph,
    w: &Binding,
    config: &ModelConfig,
    batch: &WindowBatch,
    mut mode: ForwardMode<'_>,
    with_recon: bool,
) -> Result<(Var, Option<Var>)> {
    let tp = config.num_patches();
    let pd = config.patch_dim();
    let b = batch.batch_size();
    let n = b * tp;

    let mut patches = batch.emg.data().to_vec();
    for (row, &masked) in batch.emg_mask.iter().enumerate() {
        if masked {
            patches[row * pd..(row + 1) * pd]
                .iter_mut()
                .for_each(|v| *v = 0.0);
        }
    }
    let patches = g
        .constant(Tensor::new(vec![n, pd], patches)?)
        .map_err(|e| e.in_layer("input"))?;
    let tokens: Vec<usize> = (0..n)
        .map(|row| {
            if batch.label_mask[row] {
                config.label_mask_token()
            } else {
                batch.labels[(row / tp) * config.window_len + (row % tp) * config.patch_len]
            }
        })
        .collect();

    let x = linear(g, w, patches, "emg_patch_embed")?;
    let lab = g
        .gather(w.var("label_embed")?, &tokens)
        .map_err(|e| e.in_layer("label_embed"))?;
    let x = g.add(x, lab).map_err(|e| e.in_layer("label_embed"))?;
    let mut x = g
        .add_tiled(x, w.var("positional_embed")?)
        .map_err(|e| e.in_layer("positional_embed"))?;

    for l in 0..config.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        let h = g
            .layer_norm(
                x,
                w.var(&p("ln1.gain"))?,
                w.var(&p("ln1.bias"))?,
                config.ln_eps,
            )
            .map_err(|e| e.in_layer(&p("ln1")))?;
        let q = linear(g, w, h, &p("attn.wq"))?;
        let k = linear(g, w, h, &p("attn.wk"))?;
        let v = linear(g, w, h, &p("attn.wv"))?;
        let a = g
            .multi_head_attention(q, k, v, config.n_heads, tp, None)
            .map_err(|e| e.in_layer(&p("attn")))?;
        let o = linear(g, w, a, &p("attn.wo"))?;
        let o = maybe_dropout(g, o, config.dropout, &mut mode)?;
        x = g.add(x, o).map_err(|e| e.in_layer(&p("attn")))?;

        let h = g
            .layer_norm(
                x,
                w.var(&p("ln2.gain"))?,
                w.var(&p("ln2.bias"))?,
                config.ln_eps,
            )
            .map_err(|e| e.in_layer(&p("ln2")))?;
        let f = linear(g, w, h, &p("ff1"))?;
        let f = g.gelu(f).map_err(|e| e.in_layer(&p("ff1")))?;
        let f = linear(g, w, f, &p("ff2"))?;
        let f = maybe_dropout(g, f, config.dropout, &mut mode)?;
        x = g.add(x, f).map_err(|e| e.in_layer(&p("ff2")))?;
    }
    let x = g
        .layer_norm(
            x,
            w.var("ln_final.gain")?,
            w.var("ln_final.bias")?,
            config.ln_eps,
        )
        .map_err(|e| e.in_layer("ln_final"))?;
    let logits = linear(g, w, x, "head_intent")?;
    let recon = if with_recon {
        Some(linear(g, w, x, "head_recon")?)
    } else {
        None
    };
    Ok((logits, recon))
}

/// Records the masked multimodal objective and returns the scalar loss node:
/// cross-entropy on label-masked patches plus `lambda_recon` times the MSE of
/// the reconstruction on EMG-masked patches.
pub fn loss_graph(
    g: &mut Graph,
    w: &Binding,
    config: &ModelConfig,
    batch: &WindowBatch,
    mode: ForwardMode<'_>,
) -> Result<Var> {
    if config.emg_mask_ratio == 0.0
        && config.label_mask_ratio == 0.0
        && config.full_label_mask_prob == 0.0
    {
        return Err(Error::Config(
            "both masking ratios are zero; the objective is empty".into(),
        ));
    }
    let any_label = batch.label_mask.iter().any(|&m| m);
    let any_emg = batch.emg_mask.iter().any(|&m| m);
    if !any_label && !any_emg {
        return Err(Error::Config(
            "batch has neither masked labels nor masked EMG patches".into(),
        ));
    }
    let use_recon = config.lambda_recon > 0.0;
    let (logits, recon) = forward_graph(g, w, config, batch, mode, use_recon)?;
    let tp = config.num_patches();
    let targets: Vec<usize> = batch
        .label_mask
        .iter()
        .enumerate()
        .map(|(row, &masked)| {
            if masked {
                batch.labels[(row / tp) * config.window_len + (row % tp) * config.patch_len]
            } else {
                IGNORE_INDEX
            }
        })
        .collect();
    let ce = g.cross_entropy(logits, &targets, IGNORE_INDEX)?;
    let Some(recon) = recon else { return Ok(ce) };
    let pd = config.patch_dim();
    let n = batch.emg_mask.len();
    let target = Tensor::new(vec![n, pd], batch.emg.data().to_vec())?;
    let mask: Vec<bool> = batch
        .emg_mask
        .iter()
        .flat_map(|&m| std::iter::repeat(m).take(pd))
        .collect();
    let mse = g.mse(recon, &target, Some(&mask))?;
    let weighted = g.scale(mse, config.lambda_recon)?;
    g.add(ce, weighted)
}

/// Evaluation-mode forward: `([B×T_p×K], [B×T_p×patch_len·C])`.
pub fn forward(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &WindowBatch,
) -> Result<(Tensor, Tensor)> {
    forward_with(params, None, config, batch)
}

pub fn forward_with(
    params: &ModelParams,
    lora: Option<&LoraState>,
    config: &ModelConfig,
    batch: &WindowBatch,
) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let w = bind(&mut g, params, lora, &|_| false)?;
    let (logits, recon) = forward_graph(&mut g, &w, config, batch, ForwardMode::Eval, true)?;
    let (b, tp) = (batch.batch_size(), config.num_patches());
    let recon = recon.expect("recon requested");
    let logits = g.take_value(logits).reshape(&[b, tp, config.num_classes])?;
    let recon = g.take_value(recon).reshape(&[b, tp, config.patch_dim()])?;
    Ok((logits, recon))
}

/// Evaluation-mode objective value.
pub fn pretrain_loss(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &WindowBatch,
) -> Result<f32> {
    pretrain_loss_with(params, None, config, batch)
}

pub fn pretrain_loss_with(
    params: &ModelParams,
    lora: Option<&LoraState>,
    config: &ModelConfig,
    batch: &WindowBatch,
) -> Result<f32> {
    let mut g = Graph::new();
    let w = bind(&mut g, params, lora, &|_| false)?;
    let loss = loss_graph(&mut g, &w, config, batch, ForwardMode::Eval)?;
    Ok(g.value(loss).data()[0])
}

/// Per-patch intent logits `[B·T_p×K]` for inference batches, without the
/// reconstruction head.
pub(crate) fn infer_patch_logits(
    params: &ModelParams,
    lora: Option<&LoraState>,
    config: &ModelConfig,
    emg: Tensor,
) -> Result<Tensor> {
    let batch = WindowBatch::inference(config, emg)?;
    let mut g = Graph::new();
    let w = bind(&mut g, params, lora, &|_| false)?;
    let (logits, _) = forward_graph(&mut g, &w, config, &batch, ForwardMode::Eval, false)?;
    Ok(g.take_value(logits))
}

/// Labels and posteriors for every timestep of one normalized `[T×C]` window,
/// conditioned on fully masked label inputs.
pub fn predict_window(
    params: &ModelParams,
    config: &ModelConfig,
    emg: &Tensor,
) -> Result<(Vec<usize>, Tensor)> {
    predict_window_with(params, None, config, emg)
}

pub fn predict_window_with(
    params: &ModelParams,
    lora: Option<&LoraState>,
    config: &ModelConfig,
    emg: &Tensor,
) -> Result<(Vec<usize>, Tensor)> {
    if emg.ndim() != 2 || emg.shape()[1] != config.channels {
        return Err(Error::Dimension(format!(
            "window must be [{}×{}], got {:?}",
            config.window_len,
            config.channels,
            emg.shape()
        )));
    }
    if emg.shape()[0] != config.window_len {
        return Err(Error::Dimension(format!(
            "window has {} samples, model expects {}",
            emg.shape()[0],
            config.window_len
        )));
    }
    let batched = emg
        .clone()
        .reshape(&[1, config.window_len, config.channels])?;
    let logits = infer_patch_logits(params, lora, config, batched)?;
    let k = config.num_classes;
    let mut labels = Vec::with_capacity(config.window_len);
    let mut post = Vec::with_capacity(config.window_len * k);
    for p in 0..config.num_patches() {
        let row = logits.row(p);
        let cls = argmax(row);
        let probs = softmax_vec(row);
        for _ in 0..config.patch_len {
            labels.push(cls);
            post.extend_from_slice(&probs);
        }
    }
    Ok((labels, Tensor::new(vec![config.window_len, k], post)?))
}
