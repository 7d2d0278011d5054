//! Dynamic reverse-mode tape.
//!
//! Every op appends one node holding its output value and whatever it needs
//! for the backward rule. [`Graph::backward`] walks the nodes in reverse
//! insertion order, which is a valid reverse topological order because an op
//! can only consume nodes that already exist.

use rand::Rng;

use super::tensor::{kernels, matmul_dims, Tensor};
use crate::error::{Error, Result};

/// Additive mask value standing in for `-inf`.
pub const MASK_NEG: f32 = -1e9;

/// Label value skipped by [`Graph::cross_entropy`].
pub const IGNORE_INDEX: usize = usize::MAX;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    AddBias,
    AddTiled,
    Scale,
    Gelu,
    LayerNorm,
    Softmax,
    Attention,
    Gather,
    Dropout,
    CrossEntropy,
    Mse,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    AddTiled {
        x: Var,
        tile: Var,
    },
    Scale {
        x: Var,
        factor: f32,
    },
    Gelu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Softmax {
        x: Var,
        outer: usize,
        axis_len: usize,
        inner: usize,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq: usize,
        probs: Vec<f32>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        keep_scale: Vec<f32>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f32>,
        count: usize,
    },
    Mse {
        pred: Var,
        diff: Vec<f32>,
        mask: Option<Vec<bool>>,
        count: usize,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Add { .. } => OpKind::Add,
            Op::AddBias { .. } => OpKind::AddBias,
            Op::AddTiled { .. } => OpKind::AddTiled,
            Op::Scale { .. } => OpKind::Scale,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::Attention { .. } => OpKind::Attention,
            Op::Gather { .. } => OpKind::Gather,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::Mse { .. } => OpKind::Mse,
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::MatMul { a, b } | Op::Add { a, b } => vec![a, b],
            Op::AddBias { x, bias } => vec![x, bias],
            Op::AddTiled { x, tile } => vec![x, tile],
            Op::Scale { x, .. }
            | Op::Gelu { x }
            | Op::Softmax { x, .. }
            | Op::Dropout { x, .. } => {
                vec![x]
            }
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::Attention { q, k, v, .. } => vec![q, k, v],
            Op::Gather { table, .. } => vec![table],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::Mse { pred, .. } => vec![pred],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Op record as exposed for inspection.
#[derive(Debug, Clone)]
pub struct NodeRecord {
    pub kind: OpKind,
    pub inputs: Vec<Var>,
    pub output: Var,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn finite(name: &str, data: &[f32]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(name.to_string()))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn records(&self) -> Vec<NodeRecord> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| NodeRecord {
                kind: n.op.kind(),
                inputs: n.op.inputs(),
                output: Var(i),
            })
            .collect()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let needs_grad = match op {
            Op::Leaf => value.requires_grad(),
            ref other => other.inputs().iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds an input tensor. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Result<Var> {
        finite("leaf", tensor.data())?;
        Ok(self.push(tensor, Op::Leaf))
    }

    pub fn constant(&mut self, tensor: Tensor) -> Result<Var> {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&mut self, tensor: Tensor) -> Result<Var> {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].value.grad()
    }

    pub fn take_value(&mut self, v: Var) -> Tensor {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (m, k, n) = matmul_dims(av.shape(), bv.shape())?;
        let mut out = vec![0.0f32; m * n];
        kernels::matmul(av.data(), bv.data(), &mut out, m, k, n);
        finite("matmul", &out)?;
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::Dimension(format!(
                "add shapes differ: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let out: Vec<f32> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| x + y)
            .collect();
        finite("add", &out)?;
        let shape = av.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Add { a, b }))
    }

    /// Adds a `[d]` bias to every trailing-dimension row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let d = xv.last_dim();
        if bv.numel() != d || bv.ndim() != 1 {
            return Err(Error::Dimension(format!(
                "bias {:?} does not match trailing dim of {:?}",
                bv.shape(),
                xv.shape()
            )));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        finite("add_bias", &out)?;
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::AddBias { x, bias }))
    }

    /// `out[r] = x[r] + tile[r mod rows(tile)]` for 2-D `x` and `tile`.
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Result<Var> {
        let (xv, tv) = (&self.nodes[x.0].value, &self.nodes[tile.0].value);
        if xv.ndim() != 2 || tv.ndim() != 2 || xv.shape()[1] != tv.shape()[1] {
            return Err(Error::Dimension(format!(
                "add_tiled needs [n×d] and [s×d], got {:?} and {:?}",
                xv.shape(),
                tv.shape()
            )));
        }
        let (n, d, s) = (xv.shape()[0], xv.shape()[1], tv.shape()[0]);
        if s == 0 || n % s != 0 {
            return Err(Error::Dimension(format!("{n} rows cannot be tiled by {s}")));
        }
        let mut out = xv.data().to_vec();
        for r in 0..n {
            let t = tv.row(r % s);
            for (o, tv) in out[r * d..(r + 1) * d].iter_mut().zip(t) {
                *o += tv;
            }
        }
        finite("add_tiled", &out)?;
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::AddTiled { x, tile }))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let out: Vec<f32> = xv.data().iter().map(|v| v * factor).collect();
        finite("scale", &out)?;
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Scale { x, factor }))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let out: Vec<f32> = xv.data().iter().map(|&v| gelu_fwd(v)).collect();
        finite("gelu", &out)?;
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Gelu { x }))
    }

    /// Normalizes each trailing-dimension row to zero mean and unit variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let xv = &self.nodes[x.0].value;
        let (gv, bv) = (&self.nodes[gain.0].value, &self.nodes[bias.0].value);
        let d = xv.last_dim();
        if d == 0 || gv.numel() != d || bv.numel() != d {
            return Err(Error::Dimension(format!(
                "layer_norm over {:?} with gain {:?} / bias {:?}",
                xv.shape(),
                gv.shape(),
                bv.shape()
            )));
        }
        let rows = xv.rows();
        let mut out = vec![0.0f32; xv.numel()];
        let mut xhat = vec![0.0f32; xv.numel()];
        let mut rstd = vec![0.0f32; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for j in 0..d {
                let h = ((row[j] as f64 - mean) * rs) as f32;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        finite("layer_norm", &out)?;
        let shape = xv.shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if axis >= xv.ndim() || xv.shape()[axis] == 0 {
            return Err(Error::Dimension(format!(
                "softmax axis {axis} invalid for shape {:?}",
                xv.shape()
            )));
        }
        let outer: usize = xv.shape()[..axis].iter().product();
        let axis_len = xv.shape()[axis];
        let inner: usize = xv.shape()[axis + 1..].iter().product();
        let mut out = vec![0.0f32; xv.numel()];
        let mut buf = vec![0.0f32; axis_len];
        for o in 0..outer {
            for i in 0..inner {
                for a in 0..axis_len {
                    buf[a] = xv.data()[(o * axis_len + a) * inner + i];
                }
                softmax_in_place(&mut buf);
                for a in 0..axis_len {
                    out[(o * axis_len + a) * inner + i] = buf[a];
                }
            }
        }
        finite("softmax", &out)?;
        let shape = xv.shape().to_vec();
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            },
        ))
    }

    /// Single-head scaled dot-product attention over `[T×d]` inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: Option<&Tensor>) -> Result<Var> {
        let t = self.nodes[q.0].value.shape().first().copied().unwrap_or(0);
        self.multi_head_attention(q, k, v, 1, t, mask)
    }

    /// Multi-head attention over `[n×d]` inputs holding `n / seq` independent
    /// sequences stacked row-wise. Heads split the trailing dimension evenly.
    pub fn multi_head_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq: usize,
        mask: Option<&Tensor>,
    ) -> Result<Var> {
        let (qv, kv, vv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        if qv.ndim() != 2 || qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(Error::Dimension(format!(
                "attention needs equal [T×d] inputs, got {:?} {:?} {:?}",
                qv.shape(),
                kv.shape(),
                vv.shape()
            )));
        }
        let (n, d) = (qv.shape()[0], qv.shape()[1]);
        if heads == 0 || d % heads != 0 || seq == 0 || n % seq != 0 {
            return Err(Error::Dimension(format!(
                "attention over [{n}×{d}] cannot use {heads} heads with seq {seq}"
            )));
        }
        if let Some(m) = mask {
            if m.shape() != [seq, seq] {
                return Err(Error::Dimension(format!(
                    "attention mask must be [{seq}×{seq}], got {:?}",
                    m.shape()
                )));
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let batches = n / seq;
        let mut out = vec![0.0f32; n * d];
        let mut probs = vec![0.0f32; batches * heads * seq * seq];
        let mut row = vec![0.0f32; seq];
        for b in 0..batches {
            for h in 0..heads {
                let off = h * dh;
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let qi = &qv.data()[(b * seq + i) * d + off..(b * seq + i) * d + off + dh];
                    for j in 0..seq {
                        let kj = &kv.data()[(b * seq + j) * d + off..(b * seq + j) * d + off + dh];
                        let dot: f64 = qi.iter().zip(kj).map(|(&x, &y)| x as f64 * y as f64).sum();
                        let mut s = (dot * scale) as f32;
                        if let Some(m) = mask {
                            s += m.data()[i * seq + j];
                        }
                        row[j] = s;
                    }
                    softmax_in_place(&mut row);
                    probs[pbase + i * seq..pbase + (i + 1) * seq].copy_from_slice(&row);
                    for c in 0..dh {
                        let mut acc = 0.0f64;
                        for j in 0..seq {
                            acc += row[j] as f64 * vv.data()[(b * seq + j) * d + off + c] as f64;
                        }
                        out[(b * seq + i) * d + off + c] = acc as f32;
                    }
                }
            }
        }
        finite("attention", &out)?;
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq,
                probs,
            },
        ))
    }

    /// Row lookup into a `[V×d]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = &self.nodes[table.0].value;
        if tv.ndim() != 2 {
            return Err(Error::Dimension(format!(
                "gather table must be 2-D, got {:?}",
                tv.shape()
            )));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Label(format!(
                    "gather id {id} outside table of {vocab} rows"
                )));
            }
            out.extend_from_slice(tv.row(id));
        }
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Inverted dropout. `p == 0` records a pass-through node.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f32, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        let xv = &self.nodes[x.0].value;
        let keep = 1.0 / (1.0 - p);
        let keep_scale: Vec<f32> = (0..xv.numel())
            .map(|_| {
                if p > 0.0 && rng.gen::<f32>() < p {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let out: Vec<f32> = xv
            .data()
            .iter()
            .zip(&keep_scale)
            .map(|(a, s)| a * s)
            .collect();
        let shape = xv.shape().to_vec();
        Ok(self.push(Tensor::new(shape, out)?, Op::Dropout { x, keep_scale }))
    }

    /// Mean negative log-likelihood over rows whose label is not `ignore_index`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
        ignore_index: usize,
    ) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        if lv.ndim() != 2 {
            return Err(Error::Dimension(format!(
                "logits must be [T×K], got {:?}",
                lv.shape()
            )));
        }
        let (t, k) = (lv.shape()[0], lv.shape()[1]);
        if labels.len() != t {
            return Err(Error::Dimension(format!(
                "{} labels for {t} logit rows",
                labels.len()
            )));
        }
        let mut probs = vec![0.0f32; t * k];
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, &label) in labels.iter().enumerate() {
            if label == ignore_index {
                continue;
            }
            if label >= k {
                return Err(Error::Label(format!("label {label} outside [0, {k})")));
            }
            let row = lv.row(r);
            let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v)) as f64;
            let lse = max
                + row
                    .iter()
                    .map(|&v| (v as f64 - max).exp())
                    .sum::<f64>()
                    .ln();
            total += lse - row[label] as f64;
            for j in 0..k {
                probs[r * k + j] = (row[j] as f64 - lse).exp() as f32;
            }
            count += 1;
        }
        let loss = if count == 0 {
            0.0
        } else {
            (total / count as f64) as f32
        };
        finite("cross_entropy", &[loss])?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// Mean squared error against a constant target over unmasked elements.
    /// `mask[i] == true` means element `i` participates.
    pub fn mse(&mut self, pred: Var, target: &Tensor, mask: Option<&[bool]>) -> Result<Var> {
        let pv = &self.nodes[pred.0].value;
        if pv.shape() != target.shape() {
            return Err(Error::Dimension(format!(
                "mse shapes differ: {:?} vs {:?}",
                pv.shape(),
                target.shape()
            )));
        }
        if let Some(m) = mask {
            if m.len() != pv.numel() {
                return Err(Error::Dimension(format!(
                    "mse mask has {} entries for {} elements",
                    m.len(),
                    pv.numel()
                )));
            }
        }
        let diff: Vec<f32> = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| p - t)
            .collect();
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (i, &dv) in diff.iter().enumerate() {
            if mask.map_or(true, |m| m[i]) {
                total += (dv as f64) * (dv as f64);
                count += 1;
            }
        }
        let loss = if count == 0 {
            0.0
        } else {
            (total / count as f64) as f32
        };
        finite("mse", &[loss])?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                diff,
                mask: mask.map(<[bool]>::to_vec),
                count,
            },
        ))
    }

    /// Back-propagates from the scalar `loss`. Gradients land on every node
    /// that depends on a `requires_grad` leaf; read them with [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Graph(
                "backward already ran on this graph; rebuild the forward".into(),
            ));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::Graph("backward needs a scalar loss".into()));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let contribs = self.vjp(id, &g)?;
            for (input, gi) in contribs {
                if !self.nodes[input.0].needs_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(gi),
                }
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                self.nodes[id].value.set_grad(g);
            }
        }
        for node in &self.nodes {
            if let Some(g) = node.value.grad() {
                finite("backward", g)?;
            }
        }
        Ok(())
    }

    fn vjp(&self, id: usize, g: &[f32]) -> Result<Vec<(Var, Vec<f32>)>> {
        let node = &self.nodes[id];
        let val = |v: Var| &self.nodes[v.0].value;
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::MatMul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let mut res = Vec::new();
                if needs(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt(g, bv.data(), &mut da, m, k, n);
                    res.push((*a, da));
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn(av.data(), g, &mut db, m, k, n);
                    res.push((*b, db));
                }
                res
            }
            Op::Add { a, b } => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::AddBias { x, bias } => {
                let d = val(*bias).numel();
                let mut db = vec![0.0f64; d];
                for row in g.chunks(d) {
                    for (acc, &gv) in db.iter_mut().zip(row) {
                        *acc += gv as f64;
                    }
                }
                vec![
                    (*x, g.to_vec()),
                    (*bias, db.into_iter().map(|v| v as f32).collect()),
                ]
            }
            Op::AddTiled { x, tile } => {
                let tv = val(*tile);
                let (s, d) = (tv.shape()[0], tv.shape()[1]);
                let mut dt = vec![0.0f64; s * d];
                for (r, row) in g.chunks(d).enumerate() {
                    let base = (r % s) * d;
                    for (j, &gv) in row.iter().enumerate() {
                        dt[base + j] += gv as f64;
                    }
                }
                vec![
                    (*x, g.to_vec()),
                    (*tile, dt.into_iter().map(|v| v as f32).collect()),
                ]
            }
            Op::Scale { x, factor } => vec![(*x, g.iter().map(|v| v * factor).collect())],
            Op::Gelu { x } => {
                let xv = val(*x);
                vec![(
                    *x,
                    xv.data()
                        .iter()
                        .zip(g)
                        .map(|(&v, &gv)| gv * gelu_grad(v))
                        .collect(),
                )]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = val(*gain);
                let d = gv.numel();
                let rows = rstd.len();
                let mut dx = vec![0.0f32; g.len()];
                let mut dgain = vec![0.0f64; d];
                let mut dbias = vec![0.0f64; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut sum_dh = 0.0f64;
                    let mut sum_dh_h = 0.0f64;
                    for j in 0..d {
                        let dh = gr[j] as f64 * gv.data()[j] as f64;
                        sum_dh += dh;
                        sum_dh_h += dh * hr[j] as f64;
                        dgain[j] += gr[j] as f64 * hr[j] as f64;
                        dbias[j] += gr[j] as f64;
                    }
                    let mean_dh = sum_dh / d as f64;
                    let mean_dh_h = sum_dh_h / d as f64;
                    for j in 0..d {
                        let dh = gr[j] as f64 * gv.data()[j] as f64;
                        dx[r * d + j] =
                            (rstd[r] as f64 * (dh - mean_dh - hr[j] as f64 * mean_dh_h)) as f32;
                    }
                }
                vec![
                    (*x, dx),
                    (*gain, dgain.into_iter().map(|v| v as f32).collect()),
                    (*bias, dbias.into_iter().map(|v| v as f32).collect()),
                ]
            }
            Op::Softmax {
                x,
                outer,
                axis_len,
                inner,
            } => {
                let y = node.value.data();
                let mut dx = vec![0.0f32; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |a: usize| (o * axis_len + a) * inner + i;
                        let dot: f64 = (0..*axis_len)
                            .map(|a| y[idx(a)] as f64 * g[idx(a)] as f64)
                            .sum();
                        for a in 0..*axis_len {
                            dx[idx(a)] = (y[idx(a)] as f64 * (g[idx(a)] as f64 - dot)) as f32;
                        }
                    }
                }
                vec![(*x, dx)]
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq,
                probs,
            } => attention_vjp(val(*q), val(*k), val(*v), *heads, *seq, probs, g)
                .map(|(dq, dk, dv)| vec![(*q, dq), (*k, dk), (*v, dv)])?,
            Op::Gather { table, ids } => {
                let tv = val(*table);
                let d = tv.shape()[1];
                let mut dt = vec![0.0f64; tv.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j] as f64;
                    }
                }
                vec![(*table, dt.into_iter().map(|v| v as f32).collect())]
            }
            Op::Dropout { x, keep_scale } => {
                vec![(*x, g.iter().zip(keep_scale).map(|(a, s)| a * s).collect())]
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                count,
            } => {
                let k = val(*logits).shape()[1];
                let mut dl = vec![0.0f32; probs.len()];
                if *count > 0 {
                    let s = g[0] as f64 / *count as f64;
                    for (r, &label) in labels.iter().enumerate() {
                        if label == IGNORE_INDEX {
                            continue;
                        }
                        for j in 0..k {
                            let target = if j == label { 1.0 } else { 0.0 };
                            dl[r * k + j] = ((probs[r * k + j] as f64 - target) * s) as f32;
                        }
                    }
                }
                vec![(*logits, dl)]
            }
            Op::Mse {
                pred,
                diff,
                mask,
                count,
            } => {
                let mut dp = vec![0.0f32; diff.len()];
                if *count > 0 {
                    let s = 2.0 * g[0] as f64 / *count as f64;
                    for (i, &dv) in diff.iter().enumerate() {
                        if mask.as_ref().map_or(true, |m| m[i]) {
                            dp[i] = (dv as f64 * s) as f32;
                        }
                    }
                }
                vec![(*pred, dp)]
            }
        };
        Ok(out)
    }
}

type Triple = (Vec<f32>, Vec<f32>, Vec<f32>);

fn attention_vjp(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    seq: usize,
    probs: &[f32],
    g: &[f32],
) -> Result<Triple> {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dq = vec![0.0f64; n * d];
    let mut dk = vec![0.0f64; n * d];
    let mut dv = vec![0.0f64; n * d];
    let mut dp = vec![0.0f64; seq];
    for b in 0..n / seq {
        for h in 0..heads {
            let off = h * dh;
            let pbase = (b * heads + h) * seq * seq;
            for i in 0..seq {
                let gi = (b * seq + i) * d + off;
                let p = &probs[pbase + i * seq..pbase + (i + 1) * seq];
                for j in 0..seq {
                    let vj = (b * seq + j) * d + off;
                    let mut acc = 0.0f64;
                    for c in 0..dh {
                        let gv = g[gi + c] as f64;
                        acc += gv * v.data()[vj + c] as f64;
                        dv[vj + c] += p[j] as f64 * gv;
                    }
                    dp[j] = acc;
                }
                let dot: f64 = (0..seq).map(|j| p[j] as f64 * dp[j]).sum();
                for j in 0..seq {
                    let ds = p[j] as f64 * (dp[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = (b * seq + j) * d + off;
                    for c in 0..dh {
                        dq[gi + c] += ds * k.data()[kj + c] as f64;
                        dk[kj + c] += ds * q.data()[gi + c] as f64;
                    }
                }
            }
        }
    }
    let cast = |v: Vec<f64>| v.into_iter().map(|x| x as f32).collect::<Vec<f32>>();
    Ok((cast(dq), cast(dk), cast(dv)))
}

fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().fold(f32::NEG_INFINITY, |m, &v| m.max(v));
    let mut sum = 0.0f64;
    let exps: Vec<f64> = row
        .iter()
        .map(|&v| {
            let e = ((v - max) as f64).exp();
            sum += e;
            e
        })
        .collect();
    for (o, e) in row.iter_mut().zip(exps) {
        *o = (e / sum) as f32;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_fwd(x: f32) -> f32 {
    let x = x as f64;
    (0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())) as f32
}

fn gelu_grad(x: f32) -> f32 {
    let x = x as f64;
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du) as f32
}

/// Softmax of a plain slice, shared with inference code that needs posteriors.
pub fn softmax_vec(row: &[f32]) -> Vec<f32> {
    let mut out = row.to_vec();
    softmax_in_place(&mut out);
    out
}
