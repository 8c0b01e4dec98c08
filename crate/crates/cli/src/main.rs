use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use groundlab::checkpoint;
use groundlab::datagen::io::{read_corpus, write_corpus};
use groundlab::datagen::rng::derive_seed;
use groundlab::fusion::write_offsets_csv;
use groundlab::harness::{self, benchmark, collect_offsets, evaluate, mve, train_with, write_log};
use groundlab::{AblationMode, Corpus, Error, Model, RunConfig, Vocabulary};

#[derive(Parser)]
#[command(name = "groundlab", version, about = "Synthetic 3D visual grounding: data, training and evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat TOML or JSON config; unspecified keys take the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (scenes, referrals, vocabulary).
    Generate {
        #[command(flatten)]
        common: Common,
        /// Number of referrals.
        #[arg(long)]
        count: usize,
    },
    /// Train a model; writes log.jsonl, model.ckpt and config.json.
    Train {
        #[command(flatten)]
        common: Common,
        /// Corpus directory from `generate`; defaults to the synthetic train split.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; writes report.json and offsets.csv.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus directory; defaults to the synthetic eval split.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Multi-view ensemble evaluation; writes mve.json.
    Mve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Number of rotated views; defaults to the config value.
        #[arg(long)]
        views: Option<usize>,
    },
    /// Train and evaluate every ablation variant; writes ablation.json and ablation.csv.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "components")]
        mode: Mode,
    },
    /// Finite-difference check of every parameter gradient.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Number of consecutive seeds to check.
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Mode {
    Components,
    Weights,
}

fn load_config(common: &Common, fallback: Option<&serde_json::Value>) -> Result<RunConfig> {
    let mut cfg = match (&common.config, fallback) {
        (Some(path), _) => RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))?,
        (None, Some(stored)) => serde_json::from_value(stored.clone()).context("config stored in checkpoint")?,
        (None, None) => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    fs::create_dir_all(&common.out).with_context(|| format!("creating {}", common.out.display()))?;
    Ok(cfg)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn corpus(data: Option<&Path>, cfg: &RunConfig, eval_split: bool) -> Result<Corpus> {
    match data {
        Some(dir) => Ok(read_corpus(dir).with_context(|| format!("reading corpus {}", dir.display()))?.0),
        None => {
            let (train, eval) = benchmark(cfg)?;
            Ok(if eval_split { eval } else { train })
        }
    }
}

fn load_model(path: &Path, common: &Common) -> Result<(Model, RunConfig)> {
    let (model, stored) = checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let cfg = load_config(common, Some(&stored))?;
    Ok((model, cfg))
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate { common, count } => {
            let cfg = load_config(&common, None)?;
            let vocab = Vocabulary::new();
            let corpus = groundlab::datagen::generate_corpus(
                &cfg.gen_config(),
                &vocab,
                derive_seed(cfg.seed, "corpus", 0),
                count,
            )?;
            write_corpus(&common.out, &corpus, &vocab)?;
            println!(
                "wrote {} scenes and {} referrals to {}",
                corpus.scenes.len(),
                corpus.referrals.len(),
                common.out.display()
            );
            Ok(true)
        }
        Command::Train { common, data } => {
            let cfg = load_config(&common, None)?;
            let corpus = corpus(data.as_deref(), &cfg, false)?;
            let log_path = common.out.join("log.jsonl");
            let mut log = BufWriter::new(fs::File::create(&log_path)?);
            let mut io_err = None;
            let result = train_with(&cfg, &corpus, |e| {
                if io_err.is_none() {
                    if let Err(err) = write_log(&mut log, std::slice::from_ref(e)) {
                        io_err = Some(err);
                    }
                }
            });
            log.flush()?;
            if let Some(err) = io_err {
                return Err(err.into());
            }
            let out = match result {
                Err(Error::NonFiniteLoss { step, detail }) => {
                    let dump = common.out.join("nan_dump.json");
                    fs::write(&dump, &detail)?;
                    bail!("non-finite loss at step {step}; state dumped to {}", dump.display());
                }
                other => other?,
            };
            checkpoint::save(&common.out.join("model.ckpt"), &out.model, &cfg.to_json())?;
            write_json(&common.out.join("config.json"), &cfg)?;
            let last = out.log.last().map_or(0.0, |e| e.losses.total);
            println!("trained {} steps, final loss {last:.6}", out.log.len());
            Ok(true)
        }
        Command::Eval { common, checkpoint, data } => {
            let (model, cfg) = load_model(&checkpoint, &common)?;
            let corpus = corpus(data.as_deref(), &cfg, true)?;
            let schedule = cfg.radius_schedule()?;
            let report = evaluate(&model, &schedule, &corpus)?;
            write_json(&common.out.join("report.json"), &report)?;
            let offsets = collect_offsets(&model, &schedule, &corpus)?;
            write_offsets_csv(BufWriter::new(fs::File::create(common.out.join("offsets.csv"))?), &offsets)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(true)
        }
        Command::Mve { common, checkpoint, data, views } => {
            let (model, cfg) = load_model(&checkpoint, &common)?;
            let corpus = corpus(data.as_deref(), &cfg, true)?;
            let report = mve(&model, &cfg.radius_schedule()?, &corpus, views.unwrap_or(cfg.mve_views))?;
            write_json(&common.out.join("mve.json"), &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(true)
        }
        Command::Ablate { common, mode } => {
            let cfg = load_config(&common, None)?;
            let (train, eval) = benchmark(&cfg)?;
            let mode = match mode {
                Mode::Components => AblationMode::Components,
                Mode::Weights => AblationMode::Weights,
            };
            let variants = harness::ablate::variants(&cfg, mode);
            let table = harness::ablate_with(&cfg, &train, &eval, &variants, |name, run_cfg, _, report| {
                println!("{name} seed {}: overall {:.4}", run_cfg.seed, report.overall);
            })?;
            write_json(&common.out.join("ablation.json"), &table)?;
            table.write_csv(BufWriter::new(fs::File::create(common.out.join("ablation.csv"))?))?;
            for row in &table.rows {
                println!("{:<20} {:.4}", row.variant, row.mean_overall);
            }
            Ok(true)
        }
        Command::Gradcheck { common, seeds } => {
            let cfg = match &common.config {
                Some(_) => load_config(&common, None)?,
                None => {
                    let mut c = harness::gradcheck_config();
                    c.seed = common.seed.unwrap_or(0);
                    fs::create_dir_all(&common.out)?;
                    c
                }
            };
            if seeds == 0 {
                bail!("--seeds must be at least 1");
            }
            let mut reports = Vec::new();
            let mut ok = true;
            for seed in cfg.seed..cfg.seed + seeds {
                let report = harness::gradcheck(&cfg, seed, None)?;
                let status = if report.passed() { "pass" } else { "FAIL" };
                println!(
                    "seed {seed}: {status} ({} scalars, max relative error {:.3e})",
                    report.checked, report.max_rel_error
                );
                if let Some(worst) = report.failures.first() {
                    println!("  first failing parameter: {}[{}]", worst.param, worst.index);
                }
                ok &= report.passed();
                reports.push(serde_json::json!({ "seed": seed, "report": report }));
            }
            write_json(&common.out.join("gradcheck.json"), &reports)?;
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
