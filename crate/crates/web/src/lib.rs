//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each export returns a JSON string so the page needs no generated type
//! bindings. The plain-Rust functions behind them are tested natively.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resvit::attention::{multi_head_attention_residual, AttentionVariant, AttentionWeights, NormPolicy};
use resvit::data::{self, SynthSpec};
use resvit::tensor::Tensor;
use resvit::train::{self, TrainConfig};
use resvit::vit::{ModelState, ViTConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

pub const MAX_TOKENS: usize = 64;
pub const MAX_HEADS: usize = 8;
pub const MAX_EPOCHS: usize = 40;

#[derive(Serialize)]
struct HeadView {
    norm: f64,
    /// Row-major `n × n` attention probabilities.
    attention: Vec<f64>,
}

#[derive(Serialize)]
struct AttentionView {
    n: usize,
    policy: NormPolicy,
    selected: usize,
    ranking: Vec<usize>,
    heads: Vec<HeadView>,
}

/// Random tokens through one residual attention layer. `sharpness` scales
/// the inputs, which scales the attention logits quadratically.
pub fn attention_json(n: usize, heads: usize, sharpness: f64, policy: &str, seed: u64) -> Result<String, String> {
    if !(1..=MAX_TOKENS).contains(&n) || !(1..=MAX_HEADS).contains(&heads) {
        return Err(format!("need 1 ≤ n ≤ {MAX_TOKENS} and 1 ≤ heads ≤ {MAX_HEADS}"));
    }
    if !(sharpness.is_finite() && sharpness > 0.0) {
        return Err("sharpness must be positive".into());
    }
    let policy: NormPolicy = policy.parse().map_err(|e: resvit::Error| e.to_string())?;
    let dim = heads * 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::new(
        vec![n, dim],
        (0..n * dim).map(|_| rng.gen_range(-sharpness..sharpness)).collect(),
    )
    .map_err(|e| e.to_string())?;
    let w = AttentionWeights::random(dim, &mut rng);
    let (_, trace) = multi_head_attention_residual(&x, &w, heads, policy).map_err(|e| e.to_string())?;
    let view = AttentionView {
        n,
        policy,
        selected: trace.selected,
        ranking: trace.ranking(),
        heads: trace
            .heads
            .into_iter()
            .map(|h| HeadView {
                norm: h.norm,
                attention: h.prob_attention.into_data(),
            })
            .collect(),
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct SampleView {
    label: usize,
    /// Row-major grayscale pixels in `[0, 1]`.
    pixels: Vec<f64>,
}

#[derive(Serialize)]
struct SynthView {
    size: usize,
    samples: Vec<SampleView>,
}

/// Two synthetic images per class.
pub fn synth_json(classes: usize, noise: f64, seed: u64) -> Result<String, String> {
    let ds = data::synth_dataset(&SynthSpec {
        num_classes: classes,
        per_class: 2,
        image_size: 16,
        channels: 1,
        noise,
        seed,
    })
    .map_err(|e| e.to_string())?;
    let samples = ds
        .samples
        .into_iter()
        .map(|s| SampleView {
            label: s.label,
            pixels: s.image.into_data(),
        })
        .collect();
    serde_json::to_string(&SynthView { size: 16, samples }).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Curve {
    variant: AttentionVariant,
    train_accuracy: Vec<f64>,
    test_accuracy: Vec<f64>,
    train_loss: Vec<f64>,
}

/// Trains a tiny model of each variant on the same synthetic split.
pub fn train_json(epochs: usize, seed: u64) -> Result<String, String> {
    if !(1..=MAX_EPOCHS).contains(&epochs) {
        return Err(format!("epochs must be in 1..={MAX_EPOCHS}"));
    }
    let ds = data::synth_dataset(&SynthSpec {
        num_classes: 4,
        per_class: 25,
        image_size: 8,
        channels: 1,
        noise: 0.1,
        seed,
    })
    .map_err(|e| e.to_string())?;
    let (tr, te) = data::split(&ds, 0.8, seed).map_err(|e| e.to_string())?;
    let tcfg = TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    };
    let mut curves = Vec::new();
    for variant in [AttentionVariant::Standard, AttentionVariant::Residual] {
        let cfg = ViTConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 16,
            heads: 4,
            depth: 1,
            mlp_dim: 32,
            num_classes: 4,
            variant,
            ..ViTConfig::default()
        };
        let mut model = ModelState::init(&cfg, seed).map_err(|e| e.to_string())?;
        let history = train::fit(&mut model, &tr.samples, &te.samples, &tcfg).map_err(|e| e.to_string())?;
        let pick = |split: &str, f: fn(&train::EpochRecord) -> f64| {
            history.iter().filter(|r| r.split == split).map(f).collect()
        };
        curves.push(Curve {
            variant,
            train_accuracy: pick("train", |r| r.accuracy),
            test_accuracy: pick("test", |r| r.accuracy),
            train_loss: pick("train", |r| r.loss),
        });
    }
    serde_json::to_string(&curves).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn attention(n: usize, heads: usize, sharpness: f64, policy: &str, seed: u32) -> Result<String, JsValue> {
    attention_json(n, heads, sharpness, policy, seed.into()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn synth(classes: usize, noise: f64, seed: u32) -> Result<String, JsValue> {
    synth_json(classes, noise, seed.into()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn train_both(epochs: usize, seed: u32) -> Result<String, JsValue> {
    train_json(epochs, seed.into()).map_err(|e| JsValue::from_str(&e))
}
