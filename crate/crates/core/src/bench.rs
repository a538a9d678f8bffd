//! Wall-clock scaling of standard versus residual multi-head attention.
//!
//! Both variants run the same kernel on the same pre-projected `Q`, `K`, `V`
//! (`[n, h·d_head]`): per-head scaled dot-product attention and the
//! concatenation of head outputs. The residual variant additionally scores
//! each head, selects the best one and adds its tiled output. The input and
//! output projections are excluded; they cost `O(n·D²)` and would mask the
//! `O(n²·d)` term being measured.

use std::fmt;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attend_heads, best_head_residual, AttentionVariant, NormPolicy};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const MIN_REPS: usize = 5;
pub const MAX_OVERHEAD_RATIO: f64 = 1.15;
pub const SLOPE_RANGE: (f64, f64) = (1.6, 2.4);

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub variant: AttentionVariant,
    pub n: usize,
    pub heads: usize,
    pub d_head: usize,
    pub reps: usize,
    pub median_seconds: f64,
    /// Log-log slope of median time against `n` for this variant, fitted over
    /// the upper half of the measured `n` values.
    pub slope: f64,
    /// The timer was too coarse for single calls, so each timed sample
    /// covered several back-to-back calls; `reps` counts calls.
    pub widened: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub ns: Vec<usize>,
    pub heads: usize,
    pub d_head: usize,
    pub reps: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            ns: vec![64, 128, 256, 512],
            heads: 8,
            d_head: 32,
            reps: 9,
            seed: 0,
            precision: Precision::F64,
        }
    }
}

fn random_qkv<T: Scalar>(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> [Tensor<T>; 3] {
    let mut mk = || {
        Tensor::new(
            vec![n, dim],
            (0..n * dim).map(|_| T::from_f64(rng.gen_range(-1.0..1.0))).collect(),
        )
        .expect("positive extents")
    };
    [mk(), mk(), mk()]
}

/// Runs one variant of the benchmark kernel.
pub fn run_kernel<T: Scalar>(
    variant: AttentionVariant,
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
    let (per_head, concat) = attend_heads(q, k, v, heads)?;
    match variant {
        AttentionVariant::Standard => Ok((concat, per_head.into_iter().map(|(a, _)| a).collect())),
        AttentionVariant::Residual => {
            let (expanded, trace) = best_head_residual(per_head, NormPolicy::Induced)?;
            let out = concat.add(&expanded)?;
            Ok((out, trace.heads.into_iter().map(|h| h.prob_attention).collect()))
        }
    }
}

/// The per-head attention matrices each variant computes for one seeded
/// input; `(standard, residual)`.
pub fn attention_matrices(
    n: usize,
    heads: usize,
    d_head: usize,
    seed: u64,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [q, k, v] = random_qkv::<f64>(n, heads * d_head, &mut rng);
    let (_, a) = run_kernel(AttentionVariant::Standard, &q, &k, &v, heads)?;
    let (_, b) = run_kernel(AttentionVariant::Residual, &q, &k, &v, heads)?;
    Ok((a, b))
}

/// Smallest observable step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    (0..16)
        .map(|_| {
            let start = Instant::now();
            loop {
                let d = start.elapsed();
                if d > Duration::ZERO {
                    break d;
                }
            }
        })
        .min()
        .unwrap_or(Duration::from_nanos(1))
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    if points.len() < 2 {
        return f64::NAN;
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn time_batch<T: Scalar>(
    variant: AttentionVariant,
    qkv: &[Tensor<T>; 3],
    heads: usize,
    inner: usize,
) -> Result<f64> {
    let start = Instant::now();
    for _ in 0..inner {
        let out = run_kernel(variant, &qkv[0], &qkv[1], &qkv[2], heads)?;
        std::hint::black_box(out);
    }
    Ok(start.elapsed().as_secs_f64() / inner as f64)
}

fn bench_typed<T: Scalar>(spec: &BenchSpec) -> Result<Vec<BenchResult>> {
    let resolution = timer_resolution().as_secs_f64();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let variants = [AttentionVariant::Standard, AttentionVariant::Residual];
    let mut results = Vec::new();
    for &n in &spec.ns {
        let qkv = random_qkv::<T>(n, spec.heads * spec.d_head, &mut rng);
        // warm-up run per variant, discarded
        let mut probe = f64::INFINITY;
        for &v in &variants {
            probe = probe.min(time_batch(v, &qkv, spec.heads, 1)?);
        }
        // each timed sample must span at least 100 timer ticks
        let mut inner = 1;
        while probe * (inner as f64) < 100.0 * resolution && inner < 1 << 16 {
            inner *= 2;
        }
        let widened = inner > 1;
        if widened {
            log::warn!(
                "timer resolution {resolution:.2e}s is coarse for n={n}; timing {inner} calls per sample"
            );
        }
        let mut times = vec![Vec::with_capacity(spec.reps); variants.len()];
        // interleave variants so drift affects both equally
        for _ in 0..spec.reps {
            for (i, &v) in variants.iter().enumerate() {
                times[i].push(time_batch(v, &qkv, spec.heads, inner)?);
            }
        }
        for (i, &variant) in variants.iter().enumerate() {
            results.push(BenchResult {
                variant,
                n,
                heads: spec.heads,
                d_head: spec.d_head,
                reps: spec.reps * inner,
                median_seconds: median(&mut times[i]),
                slope: f64::NAN,
                widened,
            });
        }
    }

    let mut sorted_ns = spec.ns.clone();
    sorted_ns.sort_unstable();
    sorted_ns.dedup();
    let upper = &sorted_ns[sorted_ns.len() / 2..];
    let upper = if upper.len() < 2 && sorted_ns.len() >= 2 {
        &sorted_ns[sorted_ns.len() - 2..]
    } else {
        upper
    };
    for &variant in &variants {
        let pts: Vec<(f64, f64)> = results
            .iter()
            .filter(|r| r.variant == variant && upper.contains(&r.n))
            .map(|r| (r.n as f64, r.median_seconds))
            .collect();
        let slope = loglog_slope(&pts);
        for r in results.iter_mut().filter(|r| r.variant == variant) {
            r.slope = slope;
        }
    }
    Ok(results)
}

/// Times both variants for every `n` in `spec.ns` on identical random
/// inputs, single-threaded. Each measurement is the median of `reps`
/// interleaved runs after a discarded warm-up.
pub fn bench_attention(spec: &BenchSpec) -> Result<Vec<BenchResult>> {
    if spec.reps < MIN_REPS {
        return Err(Error::Config(format!("reps must be at least {MIN_REPS}")));
    }
    if spec.ns.is_empty() || spec.ns.iter().any(|&n| n < 8) {
        return Err(Error::Config("every sequence length must be at least 8".into()));
    }
    if spec.heads == 0 || spec.d_head == 0 {
        return Err(Error::Config("heads and d_head must be positive".into()));
    }
    match spec.precision {
        Precision::F64 => bench_typed::<f64>(spec),
        Precision::F32 => bench_typed::<f32>(spec),
    }
}

/// Residual/standard median-time ratio per `n`.
pub fn overhead_ratios(results: &[BenchResult]) -> Vec<(usize, f64)> {
    results
        .iter()
        .filter(|r| r.variant == AttentionVariant::Standard)
        .filter_map(|s| {
            results
                .iter()
                .find(|r| r.variant == AttentionVariant::Residual && r.n == s.n)
                .map(|r| (s.n, r.median_seconds / s.median_seconds))
        })
        .collect()
}

pub fn standard_slope(results: &[BenchResult]) -> f64 {
    results
        .iter()
        .find(|r| r.variant == AttentionVariant::Standard)
        .map_or(f64::NAN, |r| r.slope)
}

/// Whether every overhead ratio is within [`MAX_OVERHEAD_RATIO`] and the
/// standard slope lies in [`SLOPE_RANGE`].
pub fn within_bounds(results: &[BenchResult]) -> bool {
    let slope = standard_slope(results);
    overhead_ratios(results)
        .iter()
        .all(|&(_, r)| r <= MAX_OVERHEAD_RATIO)
        && slope >= SLOPE_RANGE.0
        && slope <= SLOPE_RANGE.1
}

pub fn results_csv(results: &[BenchResult]) -> String {
    let mut s = String::from("variant,n,h,d_head,reps,median_seconds,slope\n");
    for r in results {
        s.push_str(&format!(
            "{},{},{},{},{},{:e},{:.4}\n",
            r.variant, r.n, r.heads, r.d_head, r.reps, r.median_seconds, r.slope
        ));
    }
    s
}
