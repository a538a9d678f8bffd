//! Multi-head self-attention with residual best-head injection.
//!
//! Each head produces two outputs: its probabilistic attention matrix
//! `A = softmax(Q Kᵀ / sqrt(d))` and its attention output `O = A V`. The
//! residual variant scores every head by a norm of `A`, picks the highest
//! scoring head (lowest index on ties) and adds that head's output, tiled
//! across the feature axis, onto the projected multi-head output:
//!
//! ```text
//! Y = proj(concat(O_1, .., O_h)) + tile(O_best, h)
//! ```
//!
//! The plain functions here are generic over the scalar type and are used by
//! the benchmark and the oracle tests. [`attention_on_tape`] records the same
//! computation on an autodiff tape for training.

use std::cell::Cell;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// How a head's probabilistic attention matrix is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormPolicy {
    /// Sum of absolute entries. Every row-stochastic `n × n` matrix scores
    /// exactly `n`, so selection always falls back to head 0.
    Entrywise,
    /// Maximum absolute column sum. Large when many queries concentrate on
    /// the same key.
    #[default]
    Induced,
}

impl fmt::Display for NormPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NormPolicy::Entrywise => "entrywise",
            NormPolicy::Induced => "induced",
        })
    }
}

impl FromStr for NormPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "entrywise" => Ok(NormPolicy::Entrywise),
            "induced" => Ok(NormPolicy::Induced),
            other => Err(Error::Config(format!(
                "unknown norm policy {other:?} (expected entrywise or induced)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionVariant {
    Standard,
    #[default]
    Residual,
}

impl fmt::Display for AttentionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionVariant::Standard => "standard",
            AttentionVariant::Residual => "residual",
        })
    }
}

impl FromStr for AttentionVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(AttentionVariant::Standard),
            "residual" => Ok(AttentionVariant::Residual),
            other => Err(Error::Config(format!(
                "unknown attention variant {other:?} (expected standard or residual)"
            ))),
        }
    }
}

/// Query/key/value and output projections, each `[D, D]` with a `[D]` bias.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<T = f64> {
    pub w_q: Tensor<T>,
    pub b_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub b_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub b_v: Tensor<T>,
    pub w_proj: Tensor<T>,
    pub b_proj: Tensor<T>,
}

impl<T: Scalar> AttentionWeights<T> {
    /// Uniform weights in `±1/sqrt(D)` and biases in `±0.1`.
    pub fn random(dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let mut mat = || {
            let data = (0..dim * dim)
                .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
                .collect();
            Tensor::new(vec![dim, dim], data).expect("square shape")
        };
        let (w_q, w_k, w_v, w_proj) = (mat(), mat(), mat(), mat());
        let mut vec = || Tensor::vector((0..dim).map(|_| T::from_f64(rng.gen_range(-0.1..0.1))).collect());
        AttentionWeights {
            w_q,
            b_q: vec(),
            w_k,
            b_k: vec(),
            w_v,
            b_v: vec(),
            w_proj,
            b_proj: vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.w_q.shape()[0]
    }

    /// Checks every shape against `D` and that `D` splits evenly into heads.
    pub fn validate(&self, heads: usize) -> Result<usize> {
        let d = self.dim();
        for (name, w) in [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_proj", &self.w_proj),
        ] {
            if w.shape() != [d, d] {
                return Err(Error::Dimension(format!(
                    "{name} has shape {:?}, expected [{d}, {d}]",
                    w.shape()
                )));
            }
        }
        for (name, b) in [
            ("b_q", &self.b_q),
            ("b_k", &self.b_k),
            ("b_v", &self.b_v),
            ("b_proj", &self.b_proj),
        ] {
            if b.shape() != [d] {
                return Err(Error::Dimension(format!(
                    "{name} has shape {:?}, expected [{d}]",
                    b.shape()
                )));
            }
        }
        head_dim(d, heads)
    }

    pub fn cast<U: Scalar>(&self) -> AttentionWeights<U> {
        AttentionWeights {
            w_q: self.w_q.cast(),
            b_q: self.b_q.cast(),
            w_k: self.w_k.cast(),
            b_k: self.b_k.cast(),
            w_v: self.w_v.cast(),
            b_v: self.b_v.cast(),
            w_proj: self.w_proj.cast(),
            b_proj: self.b_proj.cast(),
        }
    }
}

/// Per-head width, or a config error when `dim` does not split into `heads`.
pub fn head_dim(dim: usize, heads: usize) -> Result<usize> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "embedding dim {dim} is not divisible by {heads} heads"
        )));
    }
    Ok(dim / heads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadTrace<T = f64> {
    /// Row-stochastic `[n, n]` attention matrix.
    pub prob_attention: Tensor<T>,
    /// `prob_attention · V_head`, `[n, d_head]`.
    pub output: Tensor<T>,
    pub norm: T,
}

/// Everything the residual variant computed on the way to its output.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace<T = f64> {
    pub heads: Vec<HeadTrace<T>>,
    pub selected: usize,
    pub policy: NormPolicy,
}

impl<T: Scalar> AttentionTrace<T> {
    pub fn norms(&self) -> Vec<T> {
        self.heads.iter().map(|h| h.norm).collect()
    }

    /// Head indices ordered by descending norm, ties by ascending index.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.heads.len()).collect();
        idx.sort_by(|&a, &b| {
            self.heads[b]
                .norm
                .partial_cmp(&self.heads[a].norm)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        idx
    }

    /// Gap between the best and the runner-up norm; `None` for one head.
    pub fn margin(&self) -> Option<T> {
        let r = self.ranking();
        (r.len() > 1).then(|| self.heads[r[0]].norm - self.heads[r[1]].norm)
    }
}

/// Counts of the attention-level operations executed on the current thread.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounts {
    pub input_projections: usize,
    pub head_attentions: usize,
    pub concats: usize,
    pub output_projections: usize,
    pub norm_reductions: usize,
    pub argmax: usize,
    pub tiled_adds: usize,
}

thread_local! {
    static COUNTS: Cell<OpCounts> = Cell::new(OpCounts::default());
}

fn bump(f: impl FnOnce(&mut OpCounts)) {
    COUNTS.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}

/// Resets this thread's attention operation counters.
pub fn reset_op_counts() {
    COUNTS.with(|c| c.set(OpCounts::default()));
}

pub fn op_counts() -> OpCounts {
    COUNTS.with(Cell::get)
}

/// Single-head scaled dot-product attention returning both the
/// probabilistic attention `A` and the output `O = A·V`.
pub fn scaled_dot_attention<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, d) = q.dims2()?;
    if k.shape() != [n, d] || v.shape() != [n, d] {
        return Err(Error::Dimension(format!(
            "scaled_dot_attention: Q {:?}, K {:?}, V {:?} must share one [n, d] shape",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    bump(|c| c.head_attentions += 1);
    let scale = T::from_f64(1.0 / (d as f64).sqrt());
    let scores = q.matmul(&k.transpose()?)?.scale(scale)?;
    let a = scores.softmax(1)?;
    let o = a.matmul(v)?;
    Ok((a, o))
}

pub fn head_norm<T: Scalar>(a: &Tensor<T>, policy: NormPolicy) -> Result<T> {
    bump(|c| c.norm_reductions += 1);
    match policy {
        NormPolicy::Entrywise => Ok(a.l1_entrywise()),
        NormPolicy::Induced => a.l1_induced(),
    }
}

/// Relative gap below which two head norms count as tied. Norms are sums
/// of up to `n²` terms, so differences at this scale are accumulation
/// roundoff rather than a property of the heads.
pub fn tie_tolerance<T: Scalar>() -> T {
    T::from_f64(1e-10).max(T::epsilon() * T::from_f64(256.0))
}

/// Index of the largest norm; ties, within [`tie_tolerance`] relative to
/// the maximum, go to the lowest index.
pub fn select_best_head<T: Scalar>(norms: &[T]) -> Result<usize> {
    if norms.is_empty() {
        return Err(Error::Usage("select_best_head: no heads".into()));
    }
    bump(|c| c.argmax += 1);
    let max = norms.iter().copied().fold(T::neg_infinity(), T::max);
    let cutoff = max - tie_tolerance::<T>() * max.abs().max(T::one());
    Ok(norms.iter().position(|&v| v >= cutoff).unwrap_or(0))
}

/// Repeats a `[n, d_head]` head output `heads` times along features.
pub fn expand_head_output<T: Scalar>(o: &Tensor<T>, heads: usize) -> Result<Tensor<T>> {
    o.tile_cols(heads)
}

fn project_qkv<T: Scalar>(
    x: &Tensor<T>,
    w: &AttentionWeights<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    bump(|c| c.input_projections += 1);
    let q = x.matmul(&w.w_q)?.add_bias(&w.b_q)?;
    let k = x.matmul(&w.w_k)?.add_bias(&w.b_k)?;
    let v = x.matmul(&w.w_v)?.add_bias(&w.b_v)?;
    Ok((q, k, v))
}

/// One head's `(A, O)`.
pub type HeadOutput<T> = (Tensor<T>, Tensor<T>);

/// Runs every head on pre-projected `[n, D]` queries, keys and values and
/// returns each head's `(A, O)` plus the column concatenation of the `O`s.
pub fn attend_heads<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<(Vec<HeadOutput<T>>, Tensor<T>)> {
    let (_, dim) = q.dims2()?;
    let dh = head_dim(dim, heads)?;
    let mut per_head = Vec::with_capacity(heads);
    for i in 0..heads {
        let qi = q.slice(1, i * dh, dh)?;
        let ki = k.slice(1, i * dh, dh)?;
        let vi = v.slice(1, i * dh, dh)?;
        per_head.push(scaled_dot_attention(&qi, &ki, &vi)?);
    }
    bump(|c| c.concats += 1);
    let outs: Vec<&Tensor<T>> = per_head.iter().map(|(_, o)| o).collect();
    let concat = Tensor::concat(&outs, 1)?;
    Ok((per_head, concat))
}

/// Scores the heads, selects the best and returns its tiled output together
/// with the trace.
pub fn best_head_residual<T: Scalar>(
    per_head: Vec<HeadOutput<T>>,
    policy: NormPolicy,
) -> Result<(Tensor<T>, AttentionTrace<T>)> {
    let heads = per_head.len();
    let mut traces = Vec::with_capacity(heads);
    for (a, o) in per_head {
        let norm = head_norm(&a, policy)?;
        traces.push(HeadTrace {
            prob_attention: a,
            output: o,
            norm,
        });
    }
    let norms: Vec<T> = traces.iter().map(|h| h.norm).collect();
    let selected = select_best_head(&norms)?;
    let expanded = expand_head_output(&traces[selected].output, heads)?;
    Ok((
        expanded,
        AttentionTrace {
            heads: traces,
            selected,
            policy,
        },
    ))
}

/// Adds the tiled best-head output onto `projected`.
fn inject<T: Scalar>(projected: &Tensor<T>, expanded: &Tensor<T>) -> Result<Tensor<T>> {
    bump(|c| c.tiled_adds += 1);
    projected.add(expanded)
}

/// Conventional multi-head attention: heads, concatenation, output projection.
pub fn multi_head_attention_standard<T: Scalar>(
    x: &Tensor<T>,
    w: &AttentionWeights<T>,
    heads: usize,
) -> Result<Tensor<T>> {
    w.validate(heads)?;
    let (q, k, v) = project_qkv(x, w)?;
    let (_, concat) = attend_heads(&q, &k, &v, heads)?;
    bump(|c| c.output_projections += 1);
    concat.matmul(&w.w_proj)?.add_bias(&w.b_proj)
}

/// Multi-head attention with the best head's output added as a residual.
pub fn multi_head_attention_residual<T: Scalar>(
    x: &Tensor<T>,
    w: &AttentionWeights<T>,
    heads: usize,
    policy: NormPolicy,
) -> Result<(Tensor<T>, AttentionTrace<T>)> {
    w.validate(heads)?;
    let (q, k, v) = project_qkv(x, w)?;
    let (per_head, concat) = attend_heads(&q, &k, &v, heads)?;
    bump(|c| c.output_projections += 1);
    let projected = concat.matmul(&w.w_proj)?.add_bias(&w.b_proj)?;
    let (expanded, trace) = best_head_residual(per_head, policy)?;
    Ok((inject(&projected, &expanded)?, trace))
}

/// Applies [`multi_head_attention_residual`] to each sequence of a batch.
/// Selection is made independently per sequence.
pub fn multi_head_attention_residual_batch<T: Scalar>(
    batch: &[Tensor<T>],
    w: &AttentionWeights<T>,
    heads: usize,
    policy: NormPolicy,
) -> Result<Vec<(Tensor<T>, AttentionTrace<T>)>> {
    batch
        .iter()
        .map(|x| multi_head_attention_residual(x, w, heads, policy))
        .collect()
}

/// Tape handles for one block's attention parameters.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_proj: Var,
    pub b_proj: Var,
}

/// Records multi-head attention of `x` (`[n, D]`) on `tape`.
///
/// For [`AttentionVariant::Residual`] the head norms are read from the
/// recorded values and the winning head's output is tiled and added; only
/// that head's path receives the residual gradient. `zero_residual` keeps
/// the selection but drops the injected term (a test hook).
pub fn attention_on_tape(
    tape: &mut Tape,
    x: Var,
    w: &AttentionVars,
    heads: usize,
    variant: AttentionVariant,
    policy: NormPolicy,
    zero_residual: bool,
) -> Result<(Var, Option<AttentionTrace>)> {
    let (_, dim) = tape.value(x).dims2()?;
    let dh = head_dim(dim, heads)?;
    let scale = 1.0 / (dh as f64).sqrt();

    let q = tape.linear(x, w.w_q, w.b_q)?;
    let k = tape.linear(x, w.w_k, w.b_k)?;
    let v = tape.linear(x, w.w_v, w.b_v)?;

    let mut probs = Vec::with_capacity(heads);
    let mut outs = Vec::with_capacity(heads);
    for i in 0..heads {
        let qi = tape.slice_cols(q, i * dh, dh)?;
        let ki = tape.slice_cols(k, i * dh, dh)?;
        let vi = tape.slice_cols(v, i * dh, dh)?;
        let kt = tape.transpose(ki)?;
        let raw = tape.matmul(qi, kt)?;
        let scores = tape.scale(raw, scale)?;
        let a = tape.softmax(scores)?;
        let o = tape.matmul(a, vi)?;
        probs.push(a);
        outs.push(o);
    }
    let concat = tape.concat_cols(&outs)?;
    let projected = tape.linear(concat, w.w_proj, w.b_proj)?;

    if variant == AttentionVariant::Standard {
        return Ok((projected, None));
    }

    let mut head_traces = Vec::with_capacity(heads);
    for (&a, &o) in probs.iter().zip(&outs) {
        let a_val = tape.value(a).clone();
        let norm = head_norm(&a_val, policy)?;
        head_traces.push(HeadTrace {
            prob_attention: a_val,
            output: tape.value(o).clone(),
            norm,
        });
    }
    let norms: Vec<f64> = head_traces.iter().map(|h| h.norm).collect();
    let selected = select_best_head(&norms)?;
    let trace = AttentionTrace {
        heads: head_traces,
        selected,
        policy,
    };
    if zero_residual {
        return Ok((projected, Some(trace)));
    }
    let expanded = tape.tile_cols(outs[selected], heads)?;
    bump(|c| c.tiled_adds += 1);
    let y = tape.add(projected, expanded)?;
    Ok((y, Some(trace)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn single_token_attention_is_identity() {
        let q = m(&[&[0.3, -2.0]]);
        let v = m(&[&[4.0, 5.0]]);
        let (a, o) = scaled_dot_attention(&q, &q, &v).unwrap();
        assert_eq!(a, m(&[&[1.0]]));
        assert_eq!(o, v);
    }

    #[test]
    fn zero_queries_give_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = random(&mut rng, &[4, 3]);
        let v = random(&mut rng, &[4, 3]);
        let (a, o) = scaled_dot_attention(&Tensor::zeros(&[4, 3]), &k, &v).unwrap();
        assert!(a.data().iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let col_mean = v.mean(0).unwrap();
        for r in 0..4 {
            for c in 0..3 {
                assert!((o.at(&[r, c]) - col_mean.at(&[c])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_token_hand_example() {
        let q = m(&[&[1.0], &[0.0]]);
        let v = m(&[&[2.0], &[4.0]]);
        let (a, o) = scaled_dot_attention(&q, &q, &v).unwrap();
        let s = 1f64.exp() / (1f64.exp() + 1.0);
        assert!((a.at(&[0, 0]) - s).abs() < 1e-15);
        assert!((a.at(&[0, 1]) - (1.0 - s)).abs() < 1e-15);
        assert!((a.at(&[1, 0]) - 0.5).abs() < 1e-15);
        assert!((o.at(&[0, 0]) - (2.0 * s + 4.0 * (1.0 - s))).abs() < 1e-14);
        assert!((o.at(&[0, 0]) - 2.53788).abs() < 1e-5);
        assert!((o.at(&[1, 0]) - 3.0).abs() < 1e-15);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let q = Tensor::<f64>::zeros(&[3, 2]);
        let k = Tensor::<f64>::zeros(&[4, 2]);
        assert!(matches!(
            scaled_dot_attention(&q, &k, &q),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn output_is_exactly_a_times_v() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let q = random(&mut rng, &[5, 4]);
            let k = random(&mut rng, &[5, 4]);
            let v = random(&mut rng, &[5, 4]);
            let (a, o) = scaled_dot_attention(&q, &k, &v).unwrap();
            assert_eq!(o, a.matmul(&v).unwrap());
        }
    }

    #[test]
    fn norm_policies_on_reference_matrices() {
        let n = 5;
        let uniform = Tensor::full(&[n, n], 1.0 / n as f64);
        let mut onehot = Tensor::zeros(&[n, n]);
        for r in 0..n {
            onehot.data_mut()[r * n] = 1.0;
        }
        assert_eq!(head_norm(&uniform, NormPolicy::Induced).unwrap(), 1.0);
        assert_eq!(head_norm(&onehot, NormPolicy::Induced).unwrap(), 5.0);
        assert_eq!(head_norm(&onehot, NormPolicy::Entrywise).unwrap(), 5.0);
        assert!((head_norm(&uniform, NormPolicy::Entrywise).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn best_head_selection() {
        assert_eq!(select_best_head(&[1.0]).unwrap(), 0);
        assert_eq!(select_best_head(&[2.0, 2.0, 1.0]).unwrap(), 0);
        assert_eq!(select_best_head(&[1.2, 3.4, 2.2]).unwrap(), 1);
        assert_eq!(select_best_head(&[6.0 - 4e-15, 6.0, 6.0 + 4e-15]).unwrap(), 0);
        assert_eq!(select_best_head(&[6.0, 6.0 + 1e-6]).unwrap(), 1);
        assert!(matches!(select_best_head::<f64>(&[]), Err(Error::Usage(_))));
    }

    #[test]
    fn indivisible_heads_are_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w = AttentionWeights::<f64>::random(6, &mut rng);
        let x = random(&mut rng, &[3, 6]);
        assert!(matches!(
            multi_head_attention_standard(&x, &w, 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn single_head_with_identity_projection_reduces_to_one_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut w = AttentionWeights::<f64>::random(4, &mut rng);
        w.w_proj = Tensor::eye(4);
        for b in [&mut w.b_q, &mut w.b_k, &mut w.b_v, &mut w.b_proj] {
            *b = Tensor::zeros(&[4]);
        }
        let x = random(&mut rng, &[3, 4]);
        let y = multi_head_attention_standard(&x, &w, 1).unwrap();
        let (_, o) = scaled_dot_attention(
            &x.matmul(&w.w_q).unwrap(),
            &x.matmul(&w.w_k).unwrap(),
            &x.matmul(&w.w_v).unwrap(),
        )
        .unwrap();
        assert!(y.max_abs_diff(&o).unwrap() < 1e-15);

        let (r, trace) = multi_head_attention_residual(&x, &w, 1, NormPolicy::Induced).unwrap();
        assert_eq!(trace.selected, 0);
        assert_eq!(r, y.add(&trace.heads[0].output).unwrap());
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut w = AttentionWeights::<f64>::random(8, &mut rng);
        for b in [&mut w.b_q, &mut w.b_k, &mut w.b_v, &mut w.b_proj] {
            *b = Tensor::zeros(&[8]);
        }
        let y = multi_head_attention_standard(&Tensor::zeros(&[4, 8]), &w, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn entrywise_policy_always_selects_head_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w = AttentionWeights::<f64>::random(8, &mut rng);
        for _ in 0..10 {
            let x = random(&mut rng, &[6, 8]);
            let (_, t) = multi_head_attention_residual(&x, &w, 4, NormPolicy::Entrywise).unwrap();
            assert_eq!(t.selected, 0);
            assert!(t.norms().iter().all(|&v| (v - 6.0).abs() < 1e-9));
        }
    }

    #[test]
    fn permuting_heads_permutes_norms_and_selection() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (dim, heads, dh) = (8, 4, 2);
        let perm = [2usize, 0, 3, 1];
        for _ in 0..20 {
            let w = AttentionWeights::<f64>::random(dim, &mut rng);
            let x = random(&mut rng, &[5, dim]);
            // permuted head p takes the slices of original head perm[p]
            let permute_cols = |t: &Tensor| {
                let parts: Vec<Tensor> = perm.iter().map(|&h| t.slice(1, h * dh, dh).unwrap()).collect();
                Tensor::concat(&parts.iter().collect::<Vec<_>>(), 1).unwrap()
            };
            let permute_vec = |t: &Tensor| {
                let parts: Vec<Tensor> = perm.iter().map(|&h| t.slice(0, h * dh, dh).unwrap()).collect();
                Tensor::concat(&parts.iter().collect::<Vec<_>>(), 0).unwrap()
            };
            let mut wp = w.clone();
            wp.w_q = permute_cols(&w.w_q);
            wp.w_k = permute_cols(&w.w_k);
            wp.w_v = permute_cols(&w.w_v);
            wp.b_q = permute_vec(&w.b_q);
            wp.b_k = permute_vec(&w.b_k);
            wp.b_v = permute_vec(&w.b_v);
            let (_, t) = multi_head_attention_residual(&x, &w, heads, NormPolicy::Induced).unwrap();
            let (_, tp) = multi_head_attention_residual(&x, &wp, heads, NormPolicy::Induced).unwrap();
            for p in 0..heads {
                assert_eq!(tp.heads[p].norm, t.heads[perm[p]].norm);
            }
            assert_eq!(perm[tp.selected], t.selected);
        }
    }

    #[test]
    fn selection_is_deterministic_and_per_sample_in_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let w = AttentionWeights::<f64>::random(8, &mut rng);
        let batch: Vec<Tensor> = (0..16).map(|_| random(&mut rng, &[5, 8])).collect();
        let a = multi_head_attention_residual_batch(&batch, &w, 4, NormPolicy::Induced).unwrap();
        let b = multi_head_attention_residual_batch(&batch, &w, 4, NormPolicy::Induced).unwrap();
        assert_eq!(a, b);
        for (x, (y, t)) in batch.iter().zip(&a) {
            let (y1, t1) = multi_head_attention_residual(x, &w, 4, NormPolicy::Induced).unwrap();
            assert_eq!(&y1, y);
            assert_eq!(t1.selected, t.selected);
        }
    }

    #[test]
    fn trace_ranking_and_margin() {
        let mk = |norm: f64| HeadTrace {
            prob_attention: Tensor::ones(&[1, 1]),
            output: Tensor::ones(&[1, 1]),
            norm,
        };
        let t = AttentionTrace {
            heads: vec![mk(1.0), mk(3.0), mk(3.0), mk(2.0)],
            selected: 1,
            policy: NormPolicy::Induced,
        };
        assert_eq!(t.ranking(), vec![1, 2, 3, 0]);
        assert_eq!(t.margin(), Some(0.0));
    }

    #[test]
    fn residual_adds_exactly_one_norm_per_head_one_argmax_one_add() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = AttentionWeights::<f64>::random(16, &mut rng);
        let x = random(&mut rng, &[6, 16]);
        reset_op_counts();
        multi_head_attention_standard(&x, &w, 4).unwrap();
        let std_counts = op_counts();
        reset_op_counts();
        multi_head_attention_residual(&x, &w, 4, NormPolicy::Induced).unwrap();
        let res_counts = op_counts();
        assert_eq!(
            res_counts,
            OpCounts {
                norm_reductions: std_counts.norm_reductions + 4,
                argmax: std_counts.argmax + 1,
                tiled_adds: std_counts.tiled_adds + 1,
                ..std_counts
            }
        );
    }

    #[test]
    fn parse_and_display_round_trip() {
        for p in [NormPolicy::Entrywise, NormPolicy::Induced] {
            assert_eq!(p.to_string().parse::<NormPolicy>().unwrap(), p);
        }
        for v in [AttentionVariant::Standard, AttentionVariant::Residual] {
            assert_eq!(v.to_string().parse::<AttentionVariant>().unwrap(), v);
        }
        assert!("l2".parse::<NormPolicy>().is_err());
    }
}
