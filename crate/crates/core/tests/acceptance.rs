//! Acceptance suite. Runs every criterion in sequence inside one test so the
//! timing-sensitive ones do not compete with each other for cores, and
//! prints one PASS/FAIL line per criterion.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resvit::attention::{
    expand_head_output, multi_head_attention_residual, multi_head_attention_standard,
    scaled_dot_attention, AttentionVariant, AttentionWeights, NormPolicy,
};
use resvit::bench::{self, BenchSpec};
use resvit::data::{self, encode_ppm, RgbImage, SynthSpec};
use resvit::gradcheck;
use resvit::run::grad_check_config;
use resvit::tensor::Tensor;
use resvit::train::{self, EvalReport, TrainConfig};
use resvit::vit::{ModelState, ViTConfig};

type Outcome = Result<String, String>;

fn ensure(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// Loop-based reference for multi-head attention. Shares nothing with the
// library beyond reading weight values.

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

fn affine(x: &Mat, w: &Tensor, b: &Tensor) -> Mat {
    let (din, dout) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..dout)
                .map(|j| {
                    let mut s = 0.0;
                    for k in 0..din {
                        s += row[k] * w.data()[k * dout + j];
                    }
                    s + b.data()[j]
                })
                .collect()
        })
        .collect()
}

struct RefHead {
    a: Mat,
    o: Mat,
    norm: f64,
}

struct RefOutput {
    standard: Mat,
    residual: Mat,
    heads: Vec<RefHead>,
    selected: usize,
}

fn reference_mha(x: &Tensor, w: &AttentionWeights, h: usize, policy: NormPolicy) -> RefOutput {
    let x = to_mat(x);
    let n = x.len();
    let d = w.w_q.shape()[0];
    let dh = d / h;
    let q = affine(&x, &w.w_q, &w.b_q);
    let k = affine(&x, &w.w_k, &w.b_k);
    let v = affine(&x, &w.w_v, &w.b_v);

    let mut heads = Vec::new();
    let mut concat = vec![vec![0.0; d]; n];
    for head in 0..h {
        let off = head * dh;
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            let mut scores = vec![0.0; n];
            for j in 0..n {
                let mut s = 0.0;
                for c in 0..dh {
                    s += q[i][off + c] * k[j][off + c];
                }
                scores[j] = s / (dh as f64).sqrt();
            }
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for j in 0..n {
                a[i][j] = (scores[j] - m).exp() / z;
            }
        }
        let mut o = vec![vec![0.0; dh]; n];
        for i in 0..n {
            for c in 0..dh {
                let mut s = 0.0;
                for j in 0..n {
                    s += a[i][j] * v[j][off + c];
                }
                o[i][c] = s;
                concat[i][off + c] = s;
            }
        }
        let norm = match policy {
            NormPolicy::Entrywise => a.iter().flatten().map(|v| v.abs()).sum(),
            NormPolicy::Induced => (0..n)
                .map(|j| (0..n).map(|i| a[i][j].abs()).sum::<f64>())
                .fold(0.0, f64::max),
        };
        heads.push(RefHead { a, o, norm });
    }
    let mut selected = 0;
    for (i, hd) in heads.iter().enumerate() {
        if hd.norm > heads[selected].norm {
            selected = i;
        }
    }
    let standard = affine(&concat, &w.w_proj, &w.b_proj);
    let residual = standard
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter()
                .enumerate()
                .map(|(j, v)| v + heads[selected].o[i][j % dh])
                .collect()
        })
        .collect();
    RefOutput {
        standard,
        residual,
        heads,
        selected,
    }
}

fn max_diff(t: &Tensor, m: &Mat) -> f64 {
    let c = t.shape()[1];
    m.iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().enumerate().map(move |(j, v)| (i, j, *v)))
        .map(|(i, j, v)| (t.data()[i * c + j] - v).abs())
        .fold(0.0, f64::max)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

/// `(x, weights, heads)` with `n ≤ 8`, `D ≤ 16`, `h ∈ {1, 2, 4}`.
fn random_instance(rng: &mut ChaCha8Rng) -> (Tensor, AttentionWeights, usize) {
    let h = [1, 2, 4][rng.gen_range(0..3)];
    let dh = rng.gen_range(1..=16 / h);
    let n = rng.gen_range(1..=8);
    let scale = [0.1, 1.0, 3.0][rng.gen_range(0..3)];
    let x = random_tensor(rng, &[n, h * dh], scale);
    (x, AttentionWeights::random(h * dh, rng), h)
}

fn worst_row_sum_error(a: &Tensor) -> f64 {
    let n = a.shape()[1];
    a.data()
        .chunks(n)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let cfg = grad_check_config(AttentionVariant::Residual, NormPolicy::Induced, 0);
    let check = gradcheck::check_model(&cfg, 0, 1e-5).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let r = &check.report;
    ensure(
        r.max_rel_error < 1e-5
            && check.min_margin > 1e-6
            && check.selection_stable
            && r.coordinates > 0
            && elapsed < Duration::from_secs(60),
        format!(
            "{} coordinates, max rel error {:.3e}, top-2 margin {:.3e}, stable {}, {:.2?}",
            r.coordinates, r.max_rel_error, check.min_margin, check.selection_stable, elapsed
        ),
    )
}

fn criterion_2(row_err: &mut f64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (x, w, h) = random_instance(&mut rng);
        let (y, trace) = multi_head_attention_residual(&x, &w, h, NormPolicy::Induced).map_err(|e| e.to_string())?;
        let r = reference_mha(&x, &w, h, NormPolicy::Induced);
        if trace.selected != r.selected {
            return Err(format!("selected {} but reference chose {}", trace.selected, r.selected));
        }
        worst = worst.max(max_diff(&y, &r.residual));
        for (ht, hr) in trace.heads.iter().zip(&r.heads) {
            worst = worst.max(max_diff(&ht.prob_attention, &hr.a));
            worst = worst.max(max_diff(&ht.output, &hr.o));
            *row_err = row_err.max(worst_row_sum_error(&ht.prob_attention));
        }
        let std = multi_head_attention_standard(&x, &w, h).map_err(|e| e.to_string())?;
        worst = worst.max(max_diff(&std, &r.standard));
    }
    ensure(worst <= 1e-12, format!("100 instances, max |library - reference| {worst:.3e}"))
}

fn criterion_3(row_err: &mut f64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut non_zero = 0;
    for _ in 0..100 {
        let h = [1, 2, 4, 8][rng.gen_range(0..4)];
        let dh = rng.gen_range(1..=4);
        let n = rng.gen_range(1..=32);
        let scale = [0.1, 1.0, 10.0][rng.gen_range(0..3)];
        let x = random_tensor(&mut rng, &[n, h * dh], scale);
        let w = AttentionWeights::random(h * dh, &mut rng);
        let (_, trace) = multi_head_attention_residual(&x, &w, h, NormPolicy::Entrywise).map_err(|e| e.to_string())?;
        for hd in &trace.heads {
            worst = worst.max((hd.norm - n as f64).abs());
            *row_err = row_err.max(worst_row_sum_error(&hd.prob_attention));
        }
        if trace.selected != 0 {
            non_zero += 1;
        }
    }
    ensure(
        worst <= 1e-9 && non_zero == 0,
        format!("100 instances, max |norm - n| {worst:.3e}, non-zero selections {non_zero}"),
    )
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (x, w, h) = random_instance(&mut rng);
        let policy = if rng.gen_bool(0.5) { NormPolicy::Induced } else { NormPolicy::Entrywise };
        let (y, trace) = multi_head_attention_residual(&x, &w, h, policy).map_err(|e| e.to_string())?;
        let expanded = expand_head_output(&trace.heads[trace.selected].output, h).map_err(|e| e.to_string())?;
        let std = multi_head_attention_standard(&x, &w, h).map_err(|e| e.to_string())?;
        let diff = y.sub(&expanded).map_err(|e| e.to_string())?;
        worst = worst.max(diff.max_abs_diff(&std).map_err(|e| e.to_string())?);
    }
    ensure(worst <= 1e-12, format!("100 instances, max deviation {worst:.3e}"))
}

fn criterion_5(mut row_err: f64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Pre-activations up to 1e4 in magnitude.
    for i in 0..100 {
        let n = rng.gen_range(1..=16);
        let d = rng.gen_range(1..=8);
        let target = [1e-3, 1.0, 1e2, 1e4][i % 4];
        let q = random_tensor(&mut rng, &[n, d], 1.0);
        let k = random_tensor(&mut rng, &[n, d], 1.0);
        let v = random_tensor(&mut rng, &[n, d], 1.0);
        let peak = q
            .matmul(&k.transpose().unwrap())
            .unwrap()
            .data()
            .iter()
            .fold(0.0f64, |m, s| m.max(s.abs()))
            / (d as f64).sqrt();
        let q = q.scale(target / peak.max(1e-12)).unwrap();
        let (a, _) = scaled_dot_attention(&q, &k, &v).map_err(|e| e.to_string())?;
        row_err = row_err.max(worst_row_sum_error(&a));
    }
    // Attention inside a full forward pass.
    let model = ModelState::init(&ViTConfig::default(), 5).map_err(|e| e.to_string())?;
    let image = random_tensor(&mut rng, &[16, 16, 1], 1.0).map(|v| v.abs());
    let out = model.forward(&image).map_err(|e| e.to_string())?;
    for t in &out.traces {
        for hd in &t.heads {
            row_err = row_err.max(worst_row_sum_error(&hd.prob_attention));
        }
    }
    ensure(row_err <= 1e-12, format!("max |row sum - 1| {row_err:.3e} over all attention matrices"))
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let ds = data::synth_dataset(&SynthSpec {
        num_classes: 4,
        per_class: 50,
        image_size: 16,
        channels: 1,
        noise: 0.1,
        seed: 0,
    })
    .map_err(|e| e.to_string())?;
    let (train_set, test_set) = data::split(&ds, 0.8, 0).map_err(|e| e.to_string())?;
    let tcfg = TrainConfig {
        epochs: 30,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let mut lines = Vec::new();
    let mut ok = true;
    for variant in [AttentionVariant::Standard, AttentionVariant::Residual] {
        let cfg = ViTConfig {
            image_size: 16,
            channels: 1,
            patch_size: 4,
            embed_dim: 16,
            heads: 4,
            depth: 2,
            mlp_dim: 32,
            num_classes: 4,
            variant,
            ..ViTConfig::default()
        };
        let mut model = ModelState::init(&cfg, 0).map_err(|e| e.to_string())?;
        train::fit(&mut model, &train_set.samples, &[], &tcfg).map_err(|e| e.to_string())?;
        let tr = train::evaluate(&model, &train_set.samples).map_err(|e| e.to_string())?;
        let te = train::evaluate(&model, &test_set.samples).map_err(|e| e.to_string())?;
        ok &= tr.accuracy >= 0.95 && te.accuracy >= 0.85;
        lines.push(format!("{variant} train {:.3} test {:.3}", tr.accuracy, te.accuracy));
    }
    let elapsed = start.elapsed();
    ok &= elapsed < Duration::from_secs(600);
    ensure(ok, format!("{}, {:.1?}", lines.join(", "), elapsed))
}

/// Confusion matrix, per-class precision, recall and F1, and accuracy.
type Recount = (Vec<Vec<u64>>, Vec<f64>, Vec<f64>, Vec<f64>, f64);

fn brute_force(preds: &[usize], labels: &[usize], k: usize) -> Recount {
    let count = |f: &dyn Fn(usize, usize) -> bool| preds.iter().zip(labels).filter(|(&p, &t)| f(p, t)).count();
    let confusion = (0..k)
        .map(|t| (0..k).map(|p| count(&|pp, tt| pp == p && tt == t) as u64).collect())
        .collect();
    let mut precision = Vec::new();
    let mut recall = Vec::new();
    let mut f1 = Vec::new();
    for c in 0..k {
        let tp = count(&|p, t| p == c && t == c) as f64;
        let fp = count(&|p, t| p == c && t != c) as f64;
        let fneg = count(&|p, t| p != c && t == c) as f64;
        precision.push(if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 });
        recall.push(if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 });
        f1.push(if 2.0 * tp + fp + fneg > 0.0 { 2.0 * tp / (2.0 * tp + fp + fneg) } else { 0.0 });
    }
    let acc = count(&|p, t| p == t) as f64 / preds.len() as f64;
    (confusion, precision, recall, f1, acc)
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let k = rng.gen_range(1..=6);
        let m = rng.gen_range(1..=120);
        let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..k)).collect();
        let preds: Vec<usize> = (0..m).map(|_| rng.gen_range(0..k)).collect();
        let report = EvalReport::from_predictions(&preds, &labels, k).map_err(|e| e.to_string())?;
        let (confusion, p, r, f, acc) = brute_force(&preds, &labels, k);
        if report.confusion != confusion {
            return Err(format!("set {i}: confusion mismatch"));
        }
        let pairs = [
            (&report.precision_per_class, &p),
            (&report.recall_per_class, &r),
            (&report.f1_per_class, &f),
        ];
        for (a, b) in pairs {
            for (x, y) in a.iter().zip(b.iter()) {
                worst = worst.max((x - y).abs());
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / k as f64;
        worst = worst
            .max((report.accuracy - acc).abs())
            .max((report.macro_precision - mean(&p)).abs())
            .max((report.macro_recall - mean(&r)).abs())
            .max((report.macro_f1 - mean(&f)).abs());
    }

    let hand = EvalReport::from_confusion(vec![vec![2, 1], vec![0, 3]]);
    let expected = [
        (hand.accuracy, 5.0 / 6.0),
        (hand.precision_per_class[0], 1.0),
        (hand.recall_per_class[0], 2.0 / 3.0),
        (hand.f1_per_class[0], 0.8),
        (hand.precision_per_class[1], 0.75),
        (hand.recall_per_class[1], 1.0),
        (hand.f1_per_class[1], 6.0 / 7.0),
    ];
    let hand_err = expected.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let macro_ok = (hand.macro_f1 - 0.82857).abs() < 1e-5;
    ensure(
        worst <= 1e-12 && hand_err <= 1e-12 && macro_ok,
        format!(
            "1000 sets, max metric deviation {worst:.3e}; hand example deviation {hand_err:.3e}, macro F1 {:.5}",
            hand.macro_f1
        ),
    )
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let results = bench::bench_attention(&BenchSpec::default()).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let ratios = bench::overhead_ratios(&results);
    let slope = bench::standard_slope(&results);
    let ratio_text: Vec<String> = ratios.iter().map(|(n, r)| format!("{n}:{r:.3}")).collect();
    ensure(
        bench::within_bounds(&results) && elapsed < Duration::from_secs(300),
        format!("ratios {}, standard slope {slope:.3}, {elapsed:.1?}", ratio_text.join(" ")),
    )
}

fn train_via_cli(out: &Path) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_resvit"))
        .args(["train", "--seed", "11", "--dump-attention", "--out"])
        .arg(out)
        .output()
        .map_err(|e| e.to_string())?;
    if !status.status.success() {
        return Err(format!("train failed: {}", String::from_utf8_lossy(&status.stderr)));
    }
    Ok(())
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    train_via_cli(&a)?;
    train_via_cli(&b)?;
    let files = ["checkpoint.json", "report.json", "report.txt", "history.csv", "attention.json"];
    for f in files {
        let x = fs::read(a.join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = fs::read(b.join(f)).map_err(|e| format!("{f}: {e}"))?;
        if x != y {
            return Err(format!("{f} differs between runs"));
        }
    }
    Ok(format!("{} artifacts byte-identical across two runs", files.len()))
}

fn criterion_10() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for c in 0..4 {
        let class_dir = dir.path().join(format!("class_{c}"));
        fs::create_dir_all(&class_dir).map_err(|e| e.to_string())?;
        for i in 0..3000 {
            let img = RgbImage {
                width: 4,
                height: 4,
                pixels: (0..48).map(|_| rng.gen()).collect(),
            };
            fs::write(class_dir.join(format!("{i:04}.ppm")), encode_ppm(&img)).map_err(|e| e.to_string())?;
        }
    }
    let load = data::load_folder_dataset(dir.path(), 4, 1).map_err(|e| e.to_string())?;
    let (train_set, test_set) = data::split(&load.dataset, 0.8, 0).map_err(|e| e.to_string())?;
    let tr = train_set.class_counts();
    let te = test_set.class_counts();
    ensure(
        load.skipped.is_empty() && tr == vec![2400; 4] && te == vec![600; 4],
        format!("train per class {tr:?}, test per class {te:?}"),
    )
}

#[test]
fn acceptance() {
    let mut row_err = 0.0f64;
    let results: Vec<(usize, &str, Outcome)> = vec![
        (1, "gradient fidelity", criterion_1()),
        (2, "oracle equivalence", criterion_2(&mut row_err)),
        (3, "entrywise degeneracy", criterion_3(&mut row_err)),
        (4, "residual identity", criterion_4()),
        (5, "row stochasticity", criterion_5(row_err)),
        (6, "desk-scale learning", criterion_6()),
        (7, "metrics oracle", criterion_7()),
        (8, "complexity", criterion_8()),
        (9, "reproducibility", criterion_9()),
        (10, "split protocol", criterion_10()),
    ];

    let mut failed = Vec::new();
    for (id, name, outcome) in &results {
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                println!("criterion {id:>2} FAIL  {name}: {detail}");
                failed.push(*id);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
