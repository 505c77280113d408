use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dynad_core::data::{convert_visa, generate_synthetic};
use dynad_core::pipeline::{self, AblationMode, RunDir};
use dynad_core::RunConfig;
use serde_json::json;

const RUN_ROOT_ENV: &str = "DYNAD_RUN_ROOT";

#[derive(Parser, Debug)]
#[command(name = "dynad", version, about = "Latent-diffusion anomaly detection with dynamic step conditioning")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Config file (TOML). Defaults to the run directory's snapshot when present.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set dic.t_max=60`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Run directory; relative paths resolve against $DYNAD_RUN_ROOT when set.
    #[arg(long, global = true, default_value = "default")]
    run_dir: PathBuf,
    /// Worker threads for per-image work (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the latent codec (a no-op checkpoint for parameter-free codecs).
    TrainCodec,
    /// Train the latent denoiser on nominal images.
    Train,
    /// Fine-tune the feature extractor on nominal reconstructions.
    Finetune,
    /// Build the conditioning index and distance bins.
    BuildIndex,
    /// Score image files and write heatmaps.
    Infer {
        #[arg(long)]
        category: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Evaluate on the test split and write the report.
    Evaluate,
    /// Paired ablation on a trained run.
    Ablate {
        #[arg(long)]
        mode: AblationMode,
        /// Comma-separated values; defaults depend on the mode.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Time full inference on a fixed batch.
    Bench,
    /// Convert a VisA-style CSV split into the category tree layout.
    ConvertVisa {
        #[arg(long)]
        visa_root: PathBuf,
        #[arg(long)]
        split_csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the configured synthetic dataset as a category tree.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
    },
}

fn resolve_run_dir(arg: &Path) -> PathBuf {
    match std::env::var_os(RUN_ROOT_ENV) {
        Some(root) if arg.is_relative() => PathBuf::from(root).join(arg),
        _ => arg.to_path_buf(),
    }
}

fn resolve_config(common: &Common, run: &RunDir) -> Result<RunConfig> {
    let snapshot = run.config();
    let file = match &common.config {
        Some(p) => Some(p.clone()),
        None if snapshot.exists() => Some(snapshot),
        None => None,
    };
    Ok(RunConfig::load(file.as_deref(), &common.overrides)?)
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(v)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if cli.common.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.common.workers)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let run = RunDir::new(resolve_run_dir(&cli.common.run_dir));
    let cfg = resolve_config(&cli.common, &run)?;

    match cli.command {
        Command::ConvertVisa { visa_root, split_csv, out } => {
            let cats = convert_visa(&visa_root, &split_csv, &out)?;
            return print_json(&json!({ "categories": cats, "out": out }));
        }
        Command::GenSynthetic { out } => {
            let layout = generate_synthetic(&cfg.data.synthetic)?;
            layout.write(&out)?;
            return print_json(&json!({
                "category": layout.category,
                "train": layout.train.len(),
                "test": layout.test.len(),
                "out": out,
            }));
        }
        _ => {}
    }

    run.snapshot(&cfg)?;
    let categories = pipeline::categories(&cfg)?;
    match cli.command {
        Command::TrainCodec => {
            for cat in &categories {
                let splits = pipeline::load_splits(&cfg, cat)?;
                let codec = pipeline::train_codec_stage(&cfg, &run, &splits)?;
                let err = pipeline::codec_error(&codec, &splits.val)?;
                print_json(&json!({ "category": cat, "val_error": err, "path": run.codec(cat) }))?;
            }
        }
        Command::Train => {
            for cat in &categories {
                let splits = pipeline::load_splits(&cfg, cat)?;
                let s = pipeline::train_stage(&cfg, &run, &splits)?;
                print_json(&json!({
                    "category": cat,
                    "final_loss": s.history.last(),
                    "seconds": s.seconds,
                    "path": run.denoiser(cat),
                }))?;
            }
        }
        Command::Finetune => {
            for cat in &categories {
                let splits = pipeline::load_splits(&cfg, cat)?;
                let s = pipeline::finetune_stage(&cfg, &run, &splits)?;
                print_json(&s)?;
            }
        }
        Command::BuildIndex => {
            for cat in &categories {
                let splits = pipeline::load_splits(&cfg, cat)?;
                let dic = pipeline::build_index_stage(&cfg, &run, &splits)?;
                print_json(&json!({
                    "category": cat,
                    "entries": dic.index.len(),
                    "edges": dic.table.edges(),
                    "path": run.index(cat),
                }))?;
            }
        }
        Command::Infer { category, out, images } => {
            let cat = match category {
                Some(c) => c,
                None if categories.len() == 1 => categories[0].clone(),
                None => bail!("--category is required when the config has {} categories", categories.len()),
            };
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let results = pipeline::infer_stage(&cfg, &run, &cat, &images, &out)?;
            for (path, r) in results {
                print_json(&json!({ "image": path, "score": r.image_score, "t_hat": r.t_hat }))?;
            }
        }
        Command::Evaluate => {
            let report = pipeline::evaluate_stage(&cfg, &run)?;
            print!("{}", report.to_table());
        }
        Command::Ablate { mode, values } => {
            let table = pipeline::ablate(&cfg, &run, mode, &values)?;
            table.write(run.root())?;
            print!("{}", table.to_table());
        }
        Command::Bench => {
            for r in pipeline::bench(&cfg, &run)? {
                print!("{}", r.to_table());
            }
        }
        Command::ConvertVisa { .. } | Command::GenSynthetic { .. } => unreachable!("handled above"),
    }
    Ok(())
}

/// One JSON object on a single line, keyed by a stable error kind.
fn error_line(err: &anyhow::Error) -> String {
    let (kind, path) = match err.downcast_ref::<dynad_core::Error>() {
        Some(e) => (e.kind(), e.path().map(|p| p.display().to_string())),
        None => ("other", None),
    };
    let message = format!("{err:#}").replace('\n', " ");
    json!({ "error": kind, "message": message, "path": path }).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
