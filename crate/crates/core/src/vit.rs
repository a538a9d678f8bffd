//! Vision transformer classifier.
//!
//! Pipeline for one `[H, W, C]` image:
//!
//! 1. split into non-overlapping `P × P` patches (left-to-right,
//!    top-to-bottom), flatten each patch row-major over `(y, x, c)` and
//!    project to `D` features;
//! 2. prepend the class token and add the learned positional embedding;
//! 3. `depth` pre-norm encoder blocks:
//!    `x += attn(ln1(x))`, `x += mlp(ln2(x))`, with a GELU MLP;
//! 4. final layer norm, class-token row, linear classifier head.
//!
//! Logits are returned unnormalized; softmax lives in the loss and in
//! prediction.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{attention_on_tape, head_dim, AttentionTrace, AttentionVariant, AttentionVars, NormPolicy};
use crate::autodiff::{ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const LAYER_NORM_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub num_classes: usize,
    pub variant: AttentionVariant,
    pub norm_policy: NormPolicy,
    pub seed: u64,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            image_size: 16,
            channels: 1,
            patch_size: 4,
            embed_dim: 16,
            depth: 2,
            heads: 4,
            mlp_dim: 32,
            num_classes: 4,
            variant: AttentionVariant::Residual,
            norm_policy: NormPolicy::Induced,
            seed: 0,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.patch_size == 0 || self.channels == 0 {
            return fail("image_size, patch_size and channels must be positive".into());
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.embed_dim == 0 || self.mlp_dim == 0 {
            return fail("embed_dim and mlp_dim must be positive".into());
        }
        head_dim(self.embed_dim, self.heads)?;
        if self.depth < 1 {
            return fail("depth must be at least 1".into());
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.patches_per_side().pow(2)
    }

    /// Patches plus the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// Every parameter as `(name, shape)` in registration order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.embed_dim;
        let mut out = vec![
            ("patch_embed.weight".to_string(), vec![self.patch_len(), d]),
            ("patch_embed.bias".to_string(), vec![d]),
            ("cls_token".to_string(), vec![1, d]),
            ("pos_embed".to_string(), vec![self.num_tokens(), d]),
        ];
        for b in 0..self.depth {
            let p = |s: &str| format!("block{b}.{s}");
            out.extend([
                (p("ln1.gamma"), vec![d]),
                (p("ln1.beta"), vec![d]),
                (p("attn.w_q"), vec![d, d]),
                (p("attn.b_q"), vec![d]),
                (p("attn.w_k"), vec![d, d]),
                (p("attn.b_k"), vec![d]),
                (p("attn.w_v"), vec![d, d]),
                (p("attn.b_v"), vec![d]),
                (p("attn.w_proj"), vec![d, d]),
                (p("attn.b_proj"), vec![d]),
                (p("ln2.gamma"), vec![d]),
                (p("ln2.beta"), vec![d]),
                (p("mlp.w1"), vec![d, self.mlp_dim]),
                (p("mlp.b1"), vec![self.mlp_dim]),
                (p("mlp.w2"), vec![self.mlp_dim, d]),
                (p("mlp.b2"), vec![d]),
            ]);
        }
        out.extend([
            ("ln_final.gamma".to_string(), vec![d]),
            ("ln_final.beta".to_string(), vec![d]),
            ("head.weight".to_string(), vec![d, self.num_classes]),
            ("head.bias".to_string(), vec![self.num_classes]),
        ]);
        out
    }
}

#[derive(Debug, Clone, Copy)]
struct BlockIds {
    ln1_gamma: ParamId,
    ln1_beta: ParamId,
    attn: [ParamId; 8],
    ln2_gamma: ParamId,
    ln2_beta: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct Layout {
    patch_w: ParamId,
    patch_b: ParamId,
    cls: ParamId,
    pos: ParamId,
    blocks: Vec<BlockIds>,
    ln_gamma: ParamId,
    ln_beta: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

impl Layout {
    fn resolve(cfg: &ViTConfig, store: &ParamStore) -> Result<Self> {
        let id = |name: &str| {
            store
                .find(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
        };
        let mut blocks = Vec::with_capacity(cfg.depth);
        for b in 0..cfg.depth {
            let p = |s: &str| id(&format!("block{b}.{s}"));
            blocks.push(BlockIds {
                ln1_gamma: p("ln1.gamma")?,
                ln1_beta: p("ln1.beta")?,
                attn: [
                    p("attn.w_q")?,
                    p("attn.b_q")?,
                    p("attn.w_k")?,
                    p("attn.b_k")?,
                    p("attn.w_v")?,
                    p("attn.b_v")?,
                    p("attn.w_proj")?,
                    p("attn.b_proj")?,
                ],
                ln2_gamma: p("ln2.gamma")?,
                ln2_beta: p("ln2.beta")?,
                w1: p("mlp.w1")?,
                b1: p("mlp.b1")?,
                w2: p("mlp.w2")?,
                b2: p("mlp.b2")?,
            });
        }
        Ok(Layout {
            patch_w: id("patch_embed.weight")?,
            patch_b: id("patch_embed.bias")?,
            cls: id("cls_token")?,
            pos: id("pos_embed")?,
            blocks,
            ln_gamma: id("ln_final.gamma")?,
            ln_beta: id("ln_final.beta")?,
            head_w: id("head.weight")?,
            head_b: id("head.bias")?,
        })
    }
}

/// Test hooks applied during a forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardHooks {
    /// Keep head selection but drop the injected best-head term.
    pub zero_residual: bool,
}

/// Logits plus one trace per block (empty for the standard variant).
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Tensor,
    pub traces: Vec<AttentionTrace>,
}

/// Configuration plus all named parameters.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ViTConfig,
    pub params: ParamStore,
    layout: Layout,
}

fn truncated_normal(rng: &mut ChaCha8Rng, std: f64, n: usize) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}

/// Gathers the patches of an `[H, W, C]` image into `[num_patches, P·P·C]`.
pub fn patchify(image: &Tensor, cfg: &ViTConfig) -> Result<Tensor> {
    let (s, c, p) = (cfg.image_size, cfg.channels, cfg.patch_size);
    if s % p != 0 {
        return Err(Error::Config(format!("image_size {s} is not divisible by patch_size {p}")));
    }
    if image.shape() != [s, s, c] {
        return Err(Error::Config(format!(
            "image shape {:?} does not match configured [{s}, {s}, {c}]",
            image.shape()
        )));
    }
    let side = s / p;
    let mut data = Vec::with_capacity(image.numel());
    for py in 0..side {
        for px in 0..side {
            for y in 0..p {
                let row = py * p + y;
                let start = (row * s + px * p) * c;
                data.extend_from_slice(&image.data()[start..start + p * c]);
            }
        }
    }
    Tensor::new(vec![side * side, p * p * c], data)
}

impl ModelState {
    /// Deterministic initialization: linear weights and the positional
    /// embedding drawn from N(0, 0.02²) (weights truncated at two standard
    /// deviations), biases and the class token zero, layer norms identity.
    pub fn init(cfg: &ViTConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let normal = Normal::new(0.0, INIT_STD).expect("positive std");
        for (name, shape) in cfg.param_shapes() {
            let n: usize = shape.iter().product();
            let data = if name.ends_with("gamma") {
                vec![1.0; n]
            } else if name == "pos_embed" {
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            } else if shape.len() == 2 && name != "cls_token" {
                truncated_normal(&mut rng, INIT_STD, n)
            } else {
                vec![0.0; n]
            };
            store.add(name, Tensor::new(shape, data)?)?;
        }
        Self::from_params(cfg.clone(), store)
    }

    /// Wraps an existing parameter store after checking every expected name
    /// and shape is present.
    pub fn from_params(config: ViTConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in &expected {
            let id = params
                .find(name)
                .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
            if params.get(id).value.shape() != &shape[..] {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    params.get(id).value.shape()
                )));
            }
        }
        let layout = Layout::resolve(&config, &params)?;
        Ok(ModelState {
            config,
            params,
            layout,
        })
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.find(name).map(|id| &self.params.get(id).value)
    }

    /// Linear patch embedding of one image, `[num_patches, D]`.
    pub fn patch_embed(&self, image: &Tensor) -> Result<Tensor> {
        let patches = patchify(image, &self.config)?;
        let w = &self.params.get(self.layout.patch_w).value;
        let b = &self.params.get(self.layout.patch_b).value;
        patches.matmul(w)?.add_bias(b)
    }

    /// Records the forward pass for one image; returns the `[1, classes]`
    /// logits and per-block traces.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        image: &Tensor,
        hooks: ForwardHooks,
    ) -> Result<(Var, Vec<AttentionTrace>)> {
        self.forward_on_tape_with(tape, &self.params, image, hooks)
    }

    /// As [`forward_on_tape`](Self::forward_on_tape) but reading parameter
    /// values from `params`, which must share this model's layout (a clone
    /// of `self.params`, possibly perturbed).
    pub fn forward_on_tape_with(
        &self,
        tape: &mut Tape,
        params: &ParamStore,
        image: &Tensor,
        hooks: ForwardHooks,
    ) -> Result<(Var, Vec<AttentionTrace>)> {
        if params.len() != self.params.len() {
            return Err(Error::Usage("parameter store does not match model layout".into()));
        }
        let cfg = &self.config;
        let l = &self.layout;
        let p = |tape: &mut Tape, id: ParamId| tape.param(params, id);

        let patches = tape.leaf(patchify(image, cfg)?)?;
        let pw = p(tape, l.patch_w)?;
        let pb = p(tape, l.patch_b)?;
        let tokens = tape.linear(patches, pw, pb)?;
        let cls = p(tape, l.cls)?;
        let seq = tape.concat_rows(&[cls, tokens])?;
        let pos = p(tape, l.pos)?;
        let mut x = tape.add(seq, pos)?;

        let mut traces = Vec::new();
        for b in &l.blocks {
            let g1 = p(tape, b.ln1_gamma)?;
            let be1 = p(tape, b.ln1_beta)?;
            let h = tape.layer_norm(x, g1, be1, LAYER_NORM_EPS)?;
            let a = b.attn;
            let vars = AttentionVars {
                w_q: p(tape, a[0])?,
                b_q: p(tape, a[1])?,
                w_k: p(tape, a[2])?,
                b_k: p(tape, a[3])?,
                w_v: p(tape, a[4])?,
                b_v: p(tape, a[5])?,
                w_proj: p(tape, a[6])?,
                b_proj: p(tape, a[7])?,
            };
            let (attn, trace) = attention_on_tape(
                tape,
                h,
                &vars,
                cfg.heads,
                cfg.variant,
                cfg.norm_policy,
                hooks.zero_residual,
            )?;
            traces.extend(trace);
            x = tape.add(x, attn)?;

            let g2 = p(tape, b.ln2_gamma)?;
            let be2 = p(tape, b.ln2_beta)?;
            let h = tape.layer_norm(x, g2, be2, LAYER_NORM_EPS)?;
            let w1 = p(tape, b.w1)?;
            let b1 = p(tape, b.b1)?;
            let w2 = p(tape, b.w2)?;
            let b2 = p(tape, b.b2)?;
            let hidden = tape.linear(h, w1, b1)?;
            let act = tape.gelu(hidden)?;
            let out = tape.linear(act, w2, b2)?;
            x = tape.add(x, out)?;
        }

        let g = p(tape, l.ln_gamma)?;
        let be = p(tape, l.ln_beta)?;
        let normed = tape.layer_norm(x, g, be, LAYER_NORM_EPS)?;
        let cls_out = tape.row(normed, 0)?;
        let hw = p(tape, l.head_w)?;
        let hb = p(tape, l.head_b)?;
        let logits = tape.linear(cls_out, hw, hb)?;
        Ok((logits, traces))
    }

    pub fn forward_with(&self, image: &Tensor, hooks: ForwardHooks) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let (logits, traces) = self.forward_on_tape(&mut tape, image, hooks)?;
        let logits = tape.value(logits).reshape(&[self.config.num_classes])?;
        Ok(ForwardOutput { logits, traces })
    }

    pub fn forward(&self, image: &Tensor) -> Result<ForwardOutput> {
        self.forward_with(image, ForwardHooks::default())
    }

    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        Ok(self.forward(image)?.logits.argmax(0)?[0])
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint {} v{}",
                ck.format, ck.version
            )));
        }
        let mut store = ParamStore::new();
        for p in ck.params {
            store.add(p.name, Tensor::new(p.shape, p.data)?)?;
        }
        Self::from_params(ck.config, store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(&self.to_checkpoint())?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint(serde_json::from_str(&text)?)
    }
}

pub const CHECKPOINT_FORMAT: &str = "resvit-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// On-disk model: the config and every parameter as a named row-major
/// tensor, in registration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: ViTConfig,
    pub params: Vec<NamedTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}
