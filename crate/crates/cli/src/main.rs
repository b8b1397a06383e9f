use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hise_core::ablation::{self, Axis};
use hise_core::config::{parse_data_config, DataManifest, RunConfig, SEED_ENV};
use hise_core::datamodel::{generate_synthetic, load_dir, write_dir, DatasetSplit};
use hise_core::gradsuite::run_suite;
use hise_core::numcore::{GradFault, OpKind};
use hise_core::train::{evaluate, final_metrics, Checkpoint, Trainer};
use hise_core::{Error, Result};

const CHECKPOINT_FILE: &str = "checkpoint.json";
const METRICS_FILE: &str = "metrics.json";
const HISTORY_FILE: &str = "history.json";

#[derive(Parser)]
#[command(name = "hise", version, about = "Video-text retrieval with explicit high-level semantics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic fixtures (videos.jsonl, texts.jsonl, manifest.json).
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write the checkpoint, final metrics and history.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a fixture directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Where to write the JSON report (default: next to the checkpoint).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per ablation row and write a CSV and JSON table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "components")]
        axis: String,
        /// Comma-separated rows: component labels such as `none,TDS,all`,
        /// or alpha values for the alpha axis.
        #[arg(long, value_delimiter = ',')]
        rows: Option<Vec<String>>,
    },
    /// Finite-difference check of every op and composite path.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        /// Scale the backward rule of this op by 1.5 (negative control).
        #[arg(long, hide = true)]
        corrupt_op: Option<String>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn seed_override() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

fn load_run_config(path: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    cfg.apply_seed_override(seed_override().as_deref())?;
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn pretty<T: serde::Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Loads fixtures for `cfg`, warning when the manifest was generated from
/// different data settings.
fn load_data(dir: &Path, cfg: &RunConfig) -> Result<DatasetSplit> {
    if let Some(manifest) = DataManifest::read(dir)? {
        if manifest.config_hash != hise_core::config::hash_json(&cfg.data) {
            eprintln!(
                "warning: {} was generated with different data settings (hash {}); dimensions are checked on load",
                dir.display(),
                &manifest.config_hash[..12]
            );
        }
    }
    load_dir(dir, &cfg.limits()?)
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::GenData { config, out } => {
            let text = fs::read_to_string(&config).map_err(|e| Error::io(&config, e))?;
            let mut data = parse_data_config(&text)?;
            if let Some(seed) = seed_override() {
                let mut run = RunConfig {
                    data: data.clone(),
                    ..Default::default()
                };
                run.apply_seed_override(Some(&seed))?;
                data = run.data;
            }
            let split = generate_synthetic(&data, data.seed)?;
            write_dir(&split, &out)?;
            DataManifest::new(&data, split.videos.len(), split.texts.len()).write(&out)?;
            eprintln!(
                "wrote {} videos and {} texts to {}",
                split.videos.len(),
                split.texts.len(),
                out.display()
            );
        }
        Command::Train { config, data, out } => {
            let cfg = load_run_config(&config)?;
            let split = load_data(&data, &cfg)?;
            create_dir(&out)?;
            let mut trainer = Trainer::new(cfg, &split)?;
            let history = trainer.run(|log| {
                eprint!("epoch {:>4}  loss {:.6}", log.epoch, log.mean_loss);
                match &log.metrics {
                    Some(m) => eprintln!("  R@1 t2v {:.2} v2t {:.2}  R@Sum {:.2}", m.t2v.r1, m.v2t.r1, m.r_sum),
                    None => eprintln!(),
                }
            })?;
            let metrics = final_metrics(&history).expect("training always ends with an evaluation");
            trainer.checkpoint().save(&out.join(CHECKPOINT_FILE))?;
            write(&out.join(METRICS_FILE), &pretty(&metrics)?)?;
            write(&out.join(HISTORY_FILE), &pretty(&history)?)?;
            println!("{metrics}");
        }
        Command::Eval { ckpt, data, out } => {
            let checkpoint = Checkpoint::load(&ckpt)?;
            let split = load_data(&data, &checkpoint.config)?;
            let trainer = Trainer::from_checkpoint(checkpoint, &split)?;
            let metrics = evaluate(
                &trainer.state.params,
                &trainer.split,
                &trainer.options,
                trainer.config.loss.alpha,
            )?;
            let out = out.unwrap_or_else(|| ckpt.with_file_name("eval_metrics.json"));
            write(&out, &pretty(&metrics)?)?;
            println!("{metrics}");
        }
        Command::Ablate {
            config,
            data,
            out,
            axis,
            rows,
        } => {
            let axis: Axis = axis.parse()?;
            let cfg = load_run_config(&config)?;
            let split = load_data(&data, &cfg)?;
            let specs = ablation::rows(&cfg, axis, rows.as_deref())?;
            eprintln!("training {} rows", specs.len());
            let results = ablation::run(&specs, &split)?;
            create_dir(&out)?;
            let name = format!("ablation_{}", axis.name());
            let csv = ablation::to_csv(&results)?;
            write(&out.join(format!("{name}.csv")), &csv)?;
            write(&out.join(format!("{name}.json")), &pretty(&results)?)?;
            print!("{csv}");
        }
        Command::Gradcheck {
            seed,
            seeds,
            corrupt_op,
        } => {
            let fault = match corrupt_op {
                None => None,
                Some(name) => {
                    let op = OpKind::catalog()
                        .into_iter()
                        .find(|op| op.name() == name)
                        .ok_or(Error::UnknownOp(name))?;
                    Some(GradFault {
                        op: op.name(),
                        factor: 1.5,
                    })
                }
            };
            let report = run_suite(seed, seeds.max(1), fault)?;
            println!("{report}");
            if !report.passed() {
                eprintln!("error: gradient check failed");
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
