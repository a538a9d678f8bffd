use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use resvit::attention::{AttentionVariant, NormPolicy};
use resvit::bench::{self, BenchSpec, Precision};
use resvit::run::{self, RunConfig, EXIT_FAILED, EXIT_OK};
use resvit::Result;

#[derive(Parser)]
#[command(name = "resvit", version, about = "Vision transformer with residual best-head attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Flat `key = value` run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    variant: Option<AttentionVariant>,
    #[arg(long)]
    norm: Option<NormPolicy>,
    /// Dataset folder (`root/<class>/<image>`) or `synthetic`.
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override any config key, e.g. `--set epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn run_config(&self) -> Result<RunConfig> {
        let mut rc = match &self.config {
            Some(path) => RunConfig::from_file(path)?,
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                resvit::Error::Config(format!("--set expects KEY=VALUE, got {kv:?}"))
            })?;
            rc.set(k.trim(), v.trim())?;
        }
        if let Some(seed) = self.seed {
            rc.set("seed", &seed.to_string())?;
        }
        if let Some(v) = self.variant {
            rc.model.variant = v;
        }
        if let Some(n) = self.norm {
            rc.model.norm_policy = n;
        }
        if let Some(d) = &self.data {
            rc.set("data", d)?;
        }
        if let Some(o) = &self.out {
            rc.out = o.clone();
        }
        Ok(rc)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train on the configured data and write checkpoint, reports and history.
    Train {
        #[command(flatten)]
        common: Common,
        /// Also write per-sample head norms and selections for the test split.
        #[arg(long)]
        dump_attention: bool,
    },
    /// Evaluate a checkpoint on the configured data, or one side of its split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `all`, or the `train`/`test` part of the seeded split.
        #[arg(long)]
        split: Option<run::EvalSplit>,
    },
    /// Finite-difference check of the full model gradient.
    GradCheck {
        #[command(flatten)]
        common: Common,
    },
    /// Time standard against residual attention over sequence lengths.
    Bench {
        /// Comma-separated sequence lengths.
        #[arg(long, value_delimiter = ',', default_values_t = [64usize, 128, 256, 512])]
        n: Vec<usize>,
        #[arg(long, default_value_t = 8)]
        heads: usize,
        #[arg(long, default_value_t = 32)]
        d_head: usize,
        #[arg(long, default_value_t = 9)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "f64")]
        precision: Precision,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn execute(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Train {
            common,
            dump_attention,
        } => {
            let mut rc = common.run_config()?;
            rc.dump_attention |= dump_attention;
            let outcome = run::cmd_train(&rc)?;
            println!(
                "test accuracy {:.4}  macro F1 {:.4}",
                outcome.report.accuracy, outcome.report.macro_f1
            );
            println!("checkpoint {}", outcome.checkpoint.display());
            Ok(EXIT_OK)
        }
        Command::Eval {
            common,
            checkpoint,
            split,
        } => {
            let mut rc = common.run_config()?;
            if let Some(split) = split {
                rc.eval_split = split;
            }
            let (report, names) = run::cmd_eval(&checkpoint, &rc)?;
            print!("{}", report.table(&names));
            if common.out.is_some() || common.config.is_some() {
                std::fs::create_dir_all(&rc.out).map_err(|e| resvit::Error::Io {
                    path: rc.out.display().to_string(),
                    source: e,
                })?;
                let path = rc.out.join("eval_report.json");
                std::fs::write(&path, serde_json::to_string_pretty(&report)? + "\n").map_err(
                    |e| resvit::Error::Io {
                        path: path.display().to_string(),
                        source: e,
                    },
                )?;
            }
            Ok(EXIT_OK)
        }
        Command::GradCheck { common } => {
            let rc = common.run_config()?;
            let check = run::cmd_grad_check(&rc)?;
            let r = &check.report;
            println!("coordinates {}", r.coordinates);
            println!("max relative error {:.3e}", r.max_rel_error);
            if let Some(w) = &r.worst {
                println!(
                    "worst {}[{}] analytic {:.6e} numeric {:.6e}",
                    w.param, w.index, w.analytic, w.numeric
                );
            }
            println!("selected heads {:?} (min margin {:.3e})", check.selected, check.min_margin);
            if !check.selection_stable {
                println!("head selection changed under perturbation");
            }
            Ok(if check.passed(run::GRAD_CHECK_TOLERANCE) {
                EXIT_OK
            } else {
                EXIT_FAILED
            })
        }
        Command::Bench {
            n,
            heads,
            d_head,
            reps,
            seed,
            precision,
            out,
        } => {
            let spec = BenchSpec {
                ns: n,
                heads,
                d_head,
                reps,
                seed,
                precision,
            };
            let (results, ok) = run::cmd_bench(&spec, out.as_deref())?;
            print!("{}", bench::results_csv(&results));
            Ok(if ok { EXIT_OK } else { EXIT_FAILED })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let code = match execute(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            run::exit_code(&err)
        }
    };
    ExitCode::from(code as u8)
}
