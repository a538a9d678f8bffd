//! Command implementations behind the `resvit` binary.
//!
//! Runs are configured by a flat `key = value` file (one pair per line, `#`
//! starts a comment) plus command-line overrides. The merged configuration
//! is written next to every run's outputs as `run_config.txt`, in the same
//! format, so a run can be repeated from its own output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::attention::{AttentionVariant, NormPolicy};
use crate::bench::{self, BenchSpec};
use crate::data::{self, LabeledDataset, Sample, SynthSpec};
use crate::error::{Error, Result};
use crate::gradcheck::{self, ModelGradCheck};
use crate::train::{self, EvalReport, TrainConfig};
use crate::vit::{ModelState, ViTConfig};

/// Exit status for successful commands.
pub const EXIT_OK: i32 = 0;
/// A check ran but did not meet its threshold, or an I/O failure occurred.
pub const EXIT_FAILED: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Dimension(_) | Error::Usage(_) | Error::Decode(_) | Error::Json(_) => EXIT_CONFIG,
        Error::Numeric(_) => EXIT_NUMERIC,
        Error::Io { .. } => EXIT_FAILED,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic,
    Folder(PathBuf),
}

/// Which part of the dataset `eval` scores. `train` and `test` re-apply the
/// seeded stratified split used by `train`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EvalSplit {
    #[default]
    All,
    Train,
    Test,
}

impl std::str::FromStr for EvalSplit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(EvalSplit::All),
            "train" => Ok(EvalSplit::Train),
            "test" => Ok(EvalSplit::Test),
            other => Err(Error::Config(format!("unknown eval split {other:?} (all, train, test)"))),
        }
    }
}

impl std::fmt::Display for EvalSplit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            EvalSplit::All => "all",
            EvalSplit::Train => "train",
            EvalSplit::Test => "test",
        })
    }
}

/// Everything a run needs, merged from file and overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ViTConfig,
    /// `None` means "derive from the dataset".
    pub num_classes: Option<usize>,
    pub train: TrainConfig,
    pub data: DataSource,
    pub split_ratio: f64,
    pub synth_per_class: usize,
    pub synth_noise: f64,
    pub out: PathBuf,
    pub dump_attention: bool,
    pub eval_split: EvalSplit,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ViTConfig::default(),
            num_classes: None,
            train: TrainConfig::default(),
            data: DataSource::Synthetic,
            split_ratio: 0.8,
            synth_per_class: 50,
            synth_noise: 0.1,
            out: PathBuf::from("runs/latest"),
            dump_attention: false,
            eval_split: EvalSplit::All,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

impl RunConfig {
    /// Sets one key. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        match key {
            "image_size" => m.image_size = parse(key, value)?,
            "channels" => m.channels = parse(key, value)?,
            "patch_size" => m.patch_size = parse(key, value)?,
            "embed_dim" => m.embed_dim = parse(key, value)?,
            "depth" => m.depth = parse(key, value)?,
            "heads" => m.heads = parse(key, value)?,
            "mlp_dim" => m.mlp_dim = parse(key, value)?,
            "num_classes" => {
                self.num_classes = match value {
                    "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "variant" => m.variant = value.parse()?,
            "norm" => m.norm_policy = value.parse()?,
            "seed" => {
                let seed = parse(key, value)?;
                m.seed = seed;
                self.train.seed = seed;
            }
            "epochs" => self.train.epochs = parse(key, value)?,
            "batch_size" => self.train.batch_size = parse(key, value)?,
            "lr" => self.train.learning_rate = parse(key, value)?,
            "optimizer" => self.train.optimizer = value.parse()?,
            "data" => {
                self.data = match value {
                    "synthetic" => DataSource::Synthetic,
                    path => DataSource::Folder(PathBuf::from(path)),
                }
            }
            "split_ratio" => self.split_ratio = parse(key, value)?,
            "synth_per_class" => self.synth_per_class = parse(key, value)?,
            "synth_noise" => self.synth_noise = parse(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "dump_attention" => self.dump_attention = parse(key, value)?,
            "eval_split" => self.eval_split = value.parse()?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies a `key = value` document on top of `self`.
    pub fn apply_str(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {raw:?}", lineno + 1))
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut rc = RunConfig::default();
        rc.apply_str(&text)?;
        Ok(rc)
    }

    /// Serializes every key in a fixed order.
    pub fn to_config_string(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("image_size", m.image_size.to_string());
        kv("channels", m.channels.to_string());
        kv("patch_size", m.patch_size.to_string());
        kv("embed_dim", m.embed_dim.to_string());
        kv("depth", m.depth.to_string());
        kv("heads", m.heads.to_string());
        kv("mlp_dim", m.mlp_dim.to_string());
        kv(
            "num_classes",
            self.num_classes.map_or("auto".into(), |k| k.to_string()),
        );
        kv("variant", m.variant.to_string());
        kv("norm", m.norm_policy.to_string());
        kv("seed", m.seed.to_string());
        kv("epochs", self.train.epochs.to_string());
        kv("batch_size", self.train.batch_size.to_string());
        kv("lr", self.train.learning_rate.to_string());
        kv("optimizer", self.train.optimizer.to_string());
        kv(
            "data",
            match &self.data {
                DataSource::Synthetic => "synthetic".into(),
                DataSource::Folder(p) => p.display().to_string(),
            },
        );
        kv("split_ratio", self.split_ratio.to_string());
        kv("synth_per_class", self.synth_per_class.to_string());
        kv("synth_noise", self.synth_noise.to_string());
        kv("out", self.out.display().to_string());
        kv("dump_attention", self.dump_attention.to_string());
        kv("eval_split", self.eval_split.to_string());
        s
    }

    fn synth_spec(&self, num_classes: usize) -> SynthSpec {
        SynthSpec {
            num_classes,
            per_class: self.synth_per_class,
            image_size: self.model.image_size,
            channels: self.model.channels,
            noise: self.synth_noise,
            seed: self.model.seed,
        }
    }

    /// Loads the configured dataset and fixes `model.num_classes` from it.
    pub fn load_dataset(&mut self) -> Result<LabeledDataset> {
        let ds = match &self.data {
            DataSource::Synthetic => {
                data::synth_dataset(&self.synth_spec(self.num_classes.unwrap_or(4)))?
            }
            DataSource::Folder(root) => {
                let load = data::load_folder_dataset(root, self.model.image_size, self.model.channels)?;
                if !load.skipped.is_empty() {
                    log::warn!("skipped {} undecodable files", load.skipped.len());
                }
                load.dataset
            }
        };
        if let Some(k) = self.num_classes {
            if k != ds.num_classes() {
                return Err(Error::Config(format!(
                    "num_classes = {k} but the dataset has {} classes",
                    ds.num_classes()
                )));
            }
        }
        self.model.num_classes = ds.num_classes();
        Ok(ds)
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize)]
struct LayerDump {
    layer: usize,
    norms: Vec<f64>,
    ranking: Vec<usize>,
    selected: usize,
}

#[derive(Debug, Serialize)]
struct SampleDump {
    index: usize,
    label: usize,
    layers: Vec<LayerDump>,
}

#[derive(Debug, Serialize)]
struct AttentionDump {
    variant: AttentionVariant,
    norm: NormPolicy,
    samples: Vec<SampleDump>,
}

fn attention_dump(model: &ModelState, samples: &[Sample]) -> Result<String> {
    let mut out = Vec::with_capacity(samples.len());
    for (index, s) in samples.iter().enumerate() {
        let f = model.forward(&s.image)?;
        let layers = f
            .traces
            .iter()
            .enumerate()
            .map(|(layer, t)| LayerDump {
                layer,
                norms: t.norms(),
                ranking: t.ranking(),
                selected: t.selected,
            })
            .collect();
        out.push(SampleDump {
            index,
            label: s.label,
            layers,
        });
    }
    Ok(serde_json::to_string_pretty(&AttentionDump {
        variant: model.config.variant,
        norm: model.config.norm_policy,
        samples: out,
    })? + "\n")
}

/// Files written by [`cmd_train`].
#[derive(Debug)]
pub struct TrainOutcome {
    pub report: EvalReport,
    pub checkpoint: PathBuf,
    pub report_json: PathBuf,
    pub history_csv: PathBuf,
}

/// Trains on the train split, then writes `checkpoint.json`,
/// `history.csv`, `report.json`, `report.txt`, `run_config.txt` and
/// optionally `attention.json` (test-split traces) into `rc.out`.
pub fn cmd_train(rc: &RunConfig) -> Result<TrainOutcome> {
    let mut rc = rc.clone();
    rc.train.validate()?;
    let ds = rc.load_dataset()?;
    rc.model.validate()?;
    let (train_set, test_set) = data::split(&ds, rc.split_ratio, rc.model.seed)?;

    let mut model = ModelState::init(&rc.model, rc.model.seed)?;
    let history = train::fit(&mut model, &train_set.samples, &test_set.samples, &rc.train)?;
    let report = train::evaluate(&model, &test_set.samples)?;

    fs::create_dir_all(&rc.out).map_err(|e| Error::io(&rc.out, e))?;
    let checkpoint = rc.out.join("checkpoint.json");
    let report_json = rc.out.join("report.json");
    let history_csv = rc.out.join("history.csv");
    model.save(&checkpoint)?;
    write(&history_csv, &train::history_csv(&history))?;
    write(&report_json, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    write(&rc.out.join("report.txt"), &report.table(&ds.class_names))?;
    write(&rc.out.join("run_config.txt"), &rc.to_config_string())?;
    if rc.dump_attention {
        write(&rc.out.join("attention.json"), &attention_dump(&model, &test_set.samples)?)?;
    }
    Ok(TrainOutcome {
        report,
        checkpoint,
        report_json,
        history_csv,
    })
}

/// Evaluates a checkpoint on the configured data source, restricted to
/// `rc.eval_split`. For synthetic data the generator settings come from `rc`.
pub fn cmd_eval(checkpoint: &Path, rc: &RunConfig) -> Result<(EvalReport, Vec<String>)> {
    let model = ModelState::load(checkpoint).map_err(|e| match e {
        Error::Io { path, source } => Error::Config(format!("cannot read checkpoint {path}: {source}")),
        other => other,
    })?;
    let mut rc = rc.clone();
    rc.model.image_size = model.config.image_size;
    rc.model.channels = model.config.channels;
    if rc.num_classes.is_none() && rc.data == DataSource::Synthetic {
        rc.num_classes = Some(model.config.num_classes);
    }
    let ds = rc.load_dataset()?;
    if ds.num_classes() != model.config.num_classes {
        return Err(Error::Config(format!(
            "checkpoint has {} classes, dataset has {}",
            model.config.num_classes,
            ds.num_classes()
        )));
    }
    let samples = match rc.eval_split {
        EvalSplit::All => ds.samples,
        part => {
            let (tr, te) = data::split(&ds, rc.split_ratio, rc.model.seed)?;
            if part == EvalSplit::Train { tr.samples } else { te.samples }
        }
    };
    let report = train::evaluate(&model, &samples)?;
    Ok((report, ds.class_names))
}

/// Geometry used by `grad-check`: 8×8 single-channel images, 4×4 patches,
/// `D = 8`, two heads, one block, MLP width 16, three classes.
pub fn grad_check_config(variant: AttentionVariant, norm: NormPolicy, seed: u64) -> ViTConfig {
    ViTConfig {
        image_size: 8,
        channels: 1,
        patch_size: 4,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        mlp_dim: 16,
        num_classes: 3,
        variant,
        norm_policy: norm,
        seed,
    }
}

pub const GRAD_CHECK_EPS: f64 = 1e-5;
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-5;

pub fn cmd_grad_check(rc: &RunConfig) -> Result<ModelGradCheck> {
    let cfg = grad_check_config(rc.model.variant, rc.model.norm_policy, rc.model.seed);
    gradcheck::check_model(&cfg, rc.model.seed, GRAD_CHECK_EPS)
}

pub fn cmd_bench(spec: &BenchSpec, out: Option<&Path>) -> Result<(Vec<bench::BenchResult>, bool)> {
    let results = bench::bench_attention(spec)?;
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join("bench.csv"), &bench::results_csv(&results))?;
    }
    let ok = bench::within_bounds(&results);
    Ok((results, ok))
}
