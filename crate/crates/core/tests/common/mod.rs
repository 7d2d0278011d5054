//! Helpers shared by the integration suites and the acceptance runner.
#![allow(dead_code)]

pub mod oracle;
pub mod pipeline;

use emgadapt::model::{
    loss_graph, pretrain_loss, ForwardMode, ModelConfig, ModelParams, WindowBatch,
};
use emgadapt::numerics::{Graph, Tensor, Var, MASK_NEG};
use emgadapt::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, accumulated in f64.
pub fn rel_err(analytic: &[f32], numeric: &[f64]) -> f64 {
    let (mut diff, mut na, mut nn) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &n) in analytic.iter().zip(numeric) {
        diff += (a as f64 - n).powi(2);
        na += (a as f64).powi(2);
        nn += n * n;
    }
    diff.sqrt() / na.sqrt().max(nn.sqrt()).max(1e-12)
}

/// Builds a scalar from differentiable inputs.
pub type Build<'a> = dyn Fn(&mut Graph, &[Var]) -> Result<Var> + 'a;

fn eval(inputs: &[Tensor], build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.constant(t.clone()).unwrap())
        .collect();
    let out = build(&mut g, &vars).unwrap();
    g.value(out).data()[0] as f64
}

/// Five-point central difference. The wider stencil keeps truncation error
/// small at steps large enough to swamp f32 rounding in the loss.
pub fn stencil(h: f32, mut f: impl FnMut(f32) -> f64) -> f64 {
    let (p2, p1, m1, m2) = (f(2.0 * h), f(h), f(-h), f(-2.0 * h));
    (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h as f64)
}

/// Worst relative error over all inputs between backprop and finite
/// differences with step `eps`.
pub fn check_op(inputs: &[Tensor], eps: f32, build: &Build) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone()).unwrap()).collect();
    let out = build(&mut g, &vars).unwrap();
    g.backward(out).unwrap();
    let analytic: Vec<Vec<f32>> = vars
        .iter()
        .map(|&v| {
            g.grad(v)
                .map(<[f32]>::to_vec)
                .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
        })
        .collect();
    let mut worst = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        let mut numeric = vec![0.0f64; input.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut probe = inputs.to_vec();
            *slot = stencil(eps, |d| {
                probe[i].data_mut()[j] = input.data()[j] + d;
                eval(&probe, build)
            });
        }
        worst = worst.max(rel_err(&analytic[i], &numeric));
    }
    worst
}

/// Reduces `x` to a scalar through an MSE against a fixed random target, so
/// every output element carries a distinct weight.
pub fn reduce(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let target = Tensor::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed ^ 0xfeed));
    g.mse(x, &target, None)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Runs every op-level check for one seed; returns `(op, rel err)` pairs.
pub fn op_suite(seed: u64) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = 5e-2;
    let mut out = Vec::new();
    let s = seed;

    let (a, b) = (randn(&[4, 5], &mut rng), randn(&[5, 3], &mut rng));
    out.push((
        "matmul",
        check_op(&[a, b], eps, &|g, v| {
            let y = g.matmul(v[0], v[1])?;
            reduce(g, y, s)
        }),
    ));
    let (a, b) = (randn(&[3, 4], &mut rng), randn(&[3, 4], &mut rng));
    out.push((
        "add",
        check_op(&[a, b], eps, &|g, v| {
            let y = g.add(v[0], v[1])?;
            reduce(g, y, s)
        }),
    ));
    let (x, bias) = (randn(&[4, 3], &mut rng), randn(&[3], &mut rng));
    out.push((
        "add_bias",
        check_op(&[x, bias], eps, &|g, v| {
            let y = g.add_bias(v[0], v[1])?;
            reduce(g, y, s)
        }),
    ));
    let (x, tile) = (randn(&[6, 3], &mut rng), randn(&[2, 3], &mut rng));
    out.push((
        "add_tiled",
        check_op(&[x, tile], eps, &|g, v| {
            let y = g.add_tiled(v[0], v[1])?;
            reduce(g, y, s)
        }),
    ));
    let factor: f32 = rng.gen_range(0.5..2.0) * if rng.gen() { 1.0 } else { -1.0 };
    out.push((
        "scale",
        check_op(&[randn(&[3, 3], &mut rng)], eps, &|g, v| {
            let y = g.scale(v[0], factor)?;
            reduce(g, y, s)
        }),
    ));
    out.push((
        "gelu",
        check_op(&[randn(&[4, 4], &mut rng)], eps, &|g, v| {
            let y = g.gelu(v[0])?;
            reduce(g, y, s)
        }),
    ));
    let (x, gain, bias) = (
        randn(&[3, 6], &mut rng),
        randn(&[6], &mut rng),
        randn(&[6], &mut rng),
    );
    out.push((
        "layer_norm",
        check_op(&[x, gain, bias], eps, &|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            reduce(g, y, s)
        }),
    ));
    for axis in [0, 1] {
        out.push((
            if axis == 0 {
                "softmax_axis0"
            } else {
                "softmax_axis1"
            },
            check_op(&[randn(&[3, 4], &mut rng)], eps, &|g, v| {
                let y = g.softmax(v[0], axis)?;
                reduce(g, y, s)
            }),
        ));
    }
    let mut mask = Tensor::zeros(&[3, 3]);
    // Causal mask: key j hidden from query i < j.
    for i in 0..3 {
        for j in i + 1..3 {
            mask.data_mut()[i * 3 + j] = MASK_NEG;
        }
    }
    let qkv = [
        randn(&[6, 4], &mut rng),
        randn(&[6, 4], &mut rng),
        randn(&[6, 4], &mut rng),
    ];
    out.push((
        "attention",
        check_op(&qkv, eps, &|g, v| {
            let y = g.multi_head_attention(v[0], v[1], v[2], 2, 3, None)?;
            reduce(g, y, s)
        }),
    ));
    out.push((
        "attention_masked",
        check_op(&qkv, eps, &|g, v| {
            let y = g.multi_head_attention(v[0], v[1], v[2], 2, 3, Some(&mask))?;
            reduce(g, y, s)
        }),
    ));
    let ids: Vec<usize> = (0..5).map(|_| rng.gen_range(0..4)).collect();
    out.push((
        "gather",
        check_op(&[randn(&[4, 3], &mut rng)], eps, &|g, v| {
            let y = g.gather(v[0], &ids)?;
            reduce(g, y, s)
        }),
    ));
    out.push((
        "dropout",
        check_op(&[randn(&[4, 4], &mut rng)], eps, &|g, v| {
            let y = g.dropout(v[0], 0.3, &mut ChaCha8Rng::seed_from_u64(s))?;
            reduce(g, y, s)
        }),
    ));
    let labels: Vec<usize> = (0..5)
        .map(|i| if i == 2 { 3 } else { rng.gen_range(0..3) })
        .collect();
    out.push((
        "cross_entropy",
        check_op(&[randn(&[5, 3], &mut rng)], eps, &|g, v| {
            g.cross_entropy(v[0], &labels, 3)
        }),
    ));
    let target = randn(&[4, 3], &mut rng);
    let mmask: Vec<bool> = (0..12).map(|i| i % 3 != 0).collect();
    out.push((
        "mse",
        check_op(&[randn(&[4, 3], &mut rng)], eps, &|g, v| {
            g.mse(v[0], &target, Some(&mmask))
        }),
    ));
    out
}

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        window_len: 20,
        patch_len: 5,
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        ff_dim: 16,
        ..ModelConfig::default()
    }
}

/// Relative error of the full objective's parameter gradient on the tiny
/// model for one seed.
pub fn model_check(seed: u64) -> f64 {
    let cfg = tiny_config();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(&cfg, &mut rng).unwrap();
    // Move layer-norm parameters off their initial constants.
    for (name, t) in params.map_mut().iter_mut() {
        if name.contains("ln") {
            for v in t.data_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
    }
    let b = 2;
    let emg = Tensor::randn(&[b, cfg.window_len, cfg.channels], 1.0, &mut rng);
    let labels: Vec<usize> = (0..b * cfg.window_len / cfg.patch_len)
        .flat_map(|_| {
            let k = rng.gen_range(0..cfg.num_classes);
            std::iter::repeat(k).take(cfg.patch_len)
        })
        .collect();
    let tp = cfg.num_patches();
    let emg_mask: Vec<bool> = (0..b * tp).map(|i| i % 2 == 0).collect();
    let label_mask: Vec<bool> = (0..b * tp).map(|i| i % 3 != 1).collect();
    let batch = WindowBatch::new(&cfg, emg, labels, emg_mask, label_mask).unwrap();

    let mut g = Graph::new();
    let w = emgadapt::model::bind(&mut g, &params, None, &|_| true).unwrap();
    let loss = loss_graph(&mut g, &w, &cfg, &batch, ForwardMode::Eval).unwrap();
    g.backward(loss).unwrap();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let eps = 3e-3f32;
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let v = w.var(&name).unwrap();
        let grad = g
            .grad(v)
            .map(<[f32]>::to_vec)
            .unwrap_or_else(|| vec![0.0; g.value(v).numel()]);
        analytic.extend_from_slice(&grad);
        let n = params.get(&name).unwrap().numel();
        for j in 0..n {
            let orig = params.get(&name).unwrap().data()[j];
            numeric.push(stencil(eps, |d| {
                params.get_mut(&name).unwrap().data_mut()[j] = orig + d;
                pretrain_loss(&params, &cfg, &batch).unwrap() as f64
            }));
            params.get_mut(&name).unwrap().data_mut()[j] = orig;
        }
    }
    rel_err(&analytic, &numeric)
}
