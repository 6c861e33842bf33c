use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use log::info;

use groundset_core::selftest::{run_selftest, SelftestOptions};
use groundset_core::train::Checkpoint;
use groundset_core::{
    benchmark, evaluate, generate_synthetic, load_jsonl, save_jsonl, train, write_predictions,
    RunConfig, SyntheticSpec, TypeSchema,
};

#[derive(Parser)]
#[command(name = "groundset", version, about = "Set-prediction grounded multimodal NER")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; `paths.train`, `paths.dev` and `paths.output_dir` come from the config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on a JSONL dataset and print a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Add one row per entity type.
        #[arg(long)]
        per_type: bool,
        /// Also write decoded predictions here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode a dataset and write one JSON line of entities per example.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Measure forward + decode throughput.
    Benchmark {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 2)]
        warmup: usize,
    },
    /// Write a synthetic JSONL dataset.
    GenData {
        /// Synthetic spec (JSON); omitted fields take their defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the property suite and print a pass/fail table.
    Selftest {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Replace the assignment solver with a wrong one (negative control).
        #[arg(long, hide = true)]
        corrupt_solver: bool,
    },
}

enum Outcome {
    Ok,
    PropertyFailure,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::PropertyFailure) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Ok(Checkpoint::load(path)?)
}

fn load_data(path: &Path, schema: &TypeSchema) -> anyhow::Result<Vec<groundset_core::Example>> {
    Ok(load_jsonl(path, schema)?)
}

fn run(command: Command) -> anyhow::Result<Outcome> {
    match command {
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let schema = cfg.schema()?;
            let Some(train_path) = &cfg.paths.train else {
                bail!("config {} does not set paths.train", config.display());
            };
            let train_set = load_data(train_path, &schema)?;
            let dev_set = match &cfg.paths.dev {
                Some(p) => load_data(p, &schema)?,
                None => Vec::new(),
            };
            if let Some(dir) = &cfg.paths.output_dir {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            info!("training on {} examples, {} dev", train_set.len(), dev_set.len());
            let outcome = train(&cfg, &train_set, &dev_set)?;
            println!("{}", serde_json::to_string_pretty(&outcome.history)?);
            if let Some(f1) = outcome.best_dev_f1() {
                info!("best dev GMNER F1 {f1:.4} at epoch {}", outcome.best.epoch);
            }
        }
        Command::Eval {
            checkpoint,
            data,
            per_type,
            out,
        } => {
            let model = load_checkpoint(&checkpoint)?.model()?;
            let examples = load_data(&data, &model.schema)?;
            let (report, decoded) = evaluate(&model, &examples, per_type)?;
            eprintln!("{}", report.to_table());
            println!("{}", serde_json::to_string_pretty(&report)?);
            if let Some(out) = out {
                write_predictions(&out, &model, &examples, &decoded)?;
            }
        }
        Command::Predict {
            checkpoint,
            data,
            out,
        } => {
            let model = load_checkpoint(&checkpoint)?.model()?;
            let examples = load_data(&data, &model.schema)?;
            let decoded = examples
                .iter()
                .map(|ex| model.predict(ex).map(|(_, d)| d))
                .collect::<Result<Vec<_>, _>>()?;
            write_predictions(&out, &model, &examples, &decoded)?;
            info!("wrote {} lines to {}", examples.len(), out.display());
        }
        Command::Benchmark {
            checkpoint,
            data,
            batch,
            warmup,
        } => {
            let model = load_checkpoint(&checkpoint)?.model()?;
            let examples = load_data(&data, &model.schema)?;
            let report = benchmark(&model, &examples, batch, warmup)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::GenData {
            spec,
            count,
            seed,
            out,
        } => {
            let spec: SyntheticSpec = match spec {
                Some(p) => {
                    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => SyntheticSpec::default(),
            };
            let examples = generate_synthetic(&spec, count, seed)?;
            let schema = TypeSchema::new(spec.types.clone(), groundset_core::types::DEFAULT_PROMPT_TEMPLATE)?;
            save_jsonl(&out, &examples, &schema)?;
            info!("wrote {count} examples to {}", out.display());
        }
        Command::Selftest {
            seed,
            corrupt_solver,
        } => {
            let results = run_selftest(SelftestOptions {
                seed,
                corrupt_solver,
            });
            for r in &results {
                println!("{}", r.line());
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("{} checks, {failed} failed", results.len());
            if failed > 0 {
                return Ok(Outcome::PropertyFailure);
            }
        }
    }
    Ok(Outcome::Ok)
}
