use std::collections::BTreeMap;

use emgadapt::adaptation::{
    build_variant, finetune, load_adapters, lora_effective_weight, merge_lora, save_adapters,
    AdaptationSpec, LoraPair, LoraState, TrainHyper, Variant, WindowSet,
};
use emgadapt::datagen::{make_set_timeline, sample_subject, synthesize, Population, TimelineKind};
use emgadapt::model::{forward, forward_with, Model, ModelConfig, ModelParams, WindowBatch};
use emgadapt::numerics::Tensor;
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

fn healthy() -> Model {
    Model::init(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(11)).unwrap()
}

fn batch(config: &ModelConfig, seed: u64) -> WindowBatch {
    let b = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let emg = Tensor::randn(&[b, config.window_len, config.channels], 1.0, &mut rng);
    let tp = b * config.num_patches();
    WindowBatch::new(
        config,
        emg,
        vec![0; b * config.window_len],
        vec![false; tp],
        vec![true; tp],
    )
    .unwrap()
}

fn lora_for(model: &Model, rank: usize, seed: u64) -> LoraState {
    let spec = AdaptationSpec {
        lora_rank: rank,
        ..AdaptationSpec::new(Variant::Lora)
    };
    build_variant(
        &spec,
        Some(model),
        &model.config,
        &mut ChaCha8Rng::seed_from_u64(seed),
    )
    .unwrap()
    .lora
    .unwrap()
}

/// Gives every `B` a random value so the adapters actually change weights.
fn perturb(lora: &mut LoraState, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for pair in lora.pairs.values_mut() {
        pair.b = Tensor::randn(pair.b.shape(), 0.05, &mut rng);
    }
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

fn delta(a: &Tensor, b: &Tensor) -> Tensor {
    let d: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    Tensor::new(a.shape().to_vec(), d).unwrap()
}

#[test]
fn zero_adapters_are_a_bitwise_identity() {
    let m = healthy();
    let lora = lora_for(&m, 4, 2);
    assert_eq!(merge_lora(&m.params, &lora).unwrap(), m.params);
    let x = batch(&m.config, 5);
    let (plain, _) = forward(&m.params, &m.config, &x).unwrap();
    let (adapted, _) = forward_with(&m.params, Some(&lora), &m.config, &x).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&plain), bits(&adapted));
}

#[test]
fn merged_forward_matches_adapter_forward() {
    let m = healthy();
    let mut lora = lora_for(&m, 4, 3);
    perturb(&mut lora, 4);
    let merged = merge_lora(&m.params, &lora).unwrap();
    let x = batch(&m.config, 6);
    let (a, _) = forward(&merged, &m.config, &x).unwrap();
    let (b, _) = forward_with(&m.params, Some(&lora), &m.config, &x).unwrap();
    let worst = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0f32, f32::max);
    assert!(worst < 1e-5, "max logit gap {worst}");
}

#[test]
fn merged_update_rank_is_bounded_on_every_target() {
    let m = healthy();
    for rank in [1, 2, 4, 8] {
        let mut lora = lora_for(&m, rank, 7);
        perturb(&mut lora, 8);
        let merged = merge_lora(&m.params, &lora).unwrap();
        for base in lora.targets() {
            let d = delta(merged.get(&base).unwrap(), m.params.get(&base).unwrap());
            let r = numeric_rank(&d);
            assert!(r <= rank, "{base}: rank {r} > {rank}");
            assert!(r >= 1, "{base}: adapter had no effect");
        }
    }
}

#[test]
fn sidecar_round_trip() {
    let m = healthy();
    let mut lora = lora_for(&m, 2, 9);
    perturb(&mut lora, 10);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.emga");
    save_adapters(&lora, &m.params, &path).unwrap();
    assert_eq!(load_adapters(&path, &m.params).unwrap(), lora);
    // A sidecar is bound to the base it was trained against.
    let other = Model::init(ModelConfig::default(), &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    assert!(load_adapters(&path, &other.params).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn low_rank_update_never_exceeds_rank(din in 1usize..12, dout in 1usize..12, rank in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Tensor::randn(&[din, dout], 1.0, &mut rng);
        let mut pair = LoraPair::init("w", &base, rank, &mut rng).unwrap();
        prop_assert!(pair.rank() <= rank.min(din).min(dout));
        prop_assert_eq!(lora_effective_weight(&base, &pair, 2.0 * rank as f32, rank).unwrap(), base.clone());
        pair.b = Tensor::randn(pair.b.shape(), 1.0, &mut rng);
        let eff = lora_effective_weight(&base, &pair, 2.0 * rank as f32, rank).unwrap();
        prop_assert!(numeric_rank(&delta(&eff, &base)) <= rank);
    }
}

fn windows(config: &ModelConfig) -> WindowSet {
    let p = sample_subject(Population::Stroke, 0.5, 1, "S").unwrap();
    let rec = synthesize(&p, &make_set_timeline(TimelineKind::Standard), 2).unwrap();
    let (t, c) = (config.window_len, config.channels);
    let mut set = WindowSet::new(t, c);
    for start in (0..rec.num_samples() - t).step_by(500).take(24) {
        set.push(
            &rec.samples.data()[start * c..(start + t) * c],
            &rec.labels[start..start + t],
        )
        .unwrap();
    }
    set
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

fn short_run() -> TrainHyper {
    TrainHyper {
        epochs: 2,
        learning_rate: 1e-2,
        ..TrainHyper::default()
    }
}

#[test]
fn head_only_leaves_the_backbone_bitwise_intact() {
    let m = healthy();
    let built = build_variant(
        &AdaptationSpec::new(Variant::HeadOnly),
        Some(&m),
        &m.config,
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    let before = hashes(&m.params);
    let out = finetune(
        Variant::HeadOnly,
        &built.model.params,
        None,
        &built.mask,
        &m.config,
        &windows(&m.config),
        &short_run(),
        &mut |_, _, _| Ok(()),
    )
    .unwrap();
    let after = hashes(&out.params);
    for (name, h) in &before {
        if name.starts_with("head_intent.") {
            assert_ne!(&after[name], h, "{name} did not train");
        } else {
            assert_eq!(&after[name], h, "{name} moved");
        }
    }
}

#[test]
fn lora_leaves_every_base_tensor_bitwise_intact() {
    let m = healthy();
    let built = build_variant(
        &AdaptationSpec::new(Variant::Lora),
        Some(&m),
        &m.config,
        &mut ChaCha8Rng::seed_from_u64(1),
    )
    .unwrap();
    let start = built.lora.clone().unwrap();
    let out = finetune(
        Variant::Lora,
        &built.model.params,
        Some(&start),
        &built.mask,
        &m.config,
        &windows(&m.config),
        &short_run(),
        &mut |_, _, _| Ok(()),
    )
    .unwrap();
    assert_eq!(hashes(&out.params), hashes(&m.params));
    let trained = out.lora.unwrap();
    assert!(trained
        .pairs
        .values()
        .any(|p| p.b.data().iter().any(|&v| v != 0.0)));
    assert_ne!(trained, start);
}
