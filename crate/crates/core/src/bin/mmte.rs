use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mmte::corpus::{write_classification_tsv, write_parallel_tsv, write_tagging_conll};
use mmte::harness::{
    plan_ablate, plan_evaluate, plan_finetune, plan_pretrain, ExperimentPlan, KvConfig, TransferSource,
};
use mmte::model::{extract_encoder, Checkpoint};
use mmte::{Error, Result};

#[derive(Parser)]
#[command(name = "mmte", version, about = "Multilingual translation pretraining and cross-lingual transfer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment plan (`key=value` lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the plan's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Checkpoint to read (or to extract from).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic corpora and task data as TSV/CoNLL files.
    SynthData(Common),
    /// Pretrain the translation model (cached by config hash) and report held-out BLEU.
    Pretrain(Common),
    /// Keep only the encoder of a full checkpoint.
    Extract(Common),
    /// Fine-tune the plan's task in each configured setting.
    Finetune(Common),
    /// Held-out BLEU of a full checkpoint.
    Evaluate(Common),
    /// Pretrain every ablation cell and compare zero-shot transfer.
    Ablate(Common),
}

fn load_plan(c: &Common) -> Result<ExperimentPlan> {
    match &c.config {
        Some(p) => ExperimentPlan::load(p),
        None => ExperimentPlan::from_kv(&KvConfig::default(), Path::new(".")),
    }
}

/// Plan with `--seed` applied to pretraining.
fn load_pretrain_plan(c: &Common) -> Result<ExperimentPlan> {
    let mut plan = load_plan(c)?;
    if let Some(s) = c.seed {
        plan.pretrain.seed = s;
    }
    Ok(plan)
}

fn require_checkpoint(c: &Common) -> Result<&Path> {
    c.checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("--checkpoint is required".into()))
}

fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::SynthData(c) => {
            let plan = load_plan(&c)?;
            let data = plan.synthetic()?;
            std::fs::create_dir_all(&c.out)?;
            write_parallel_tsv(&c.out.join("train.tsv"), &data.corpora)?;
            write_parallel_tsv(&c.out.join("heldout.tsv"), &data.heldout)?;
            for (split, tag, cls) in [
                ("train", &data.tagging.train, &data.classification.train),
                ("dev", &data.tagging.dev, &data.classification.dev),
                ("test", &data.tagging.test, &data.classification.test),
            ] {
                write_tagging_conll(&c.out.join(format!("tagging.{split}.conll")), tag)?;
                write_classification_tsv(&c.out.join(format!("classification.{split}.tsv")), cls)?;
            }
            Ok(format!("wrote synthetic data to {}\n", c.out.display()))
        }
        Command::Pretrain(c) => Ok(plan_pretrain(&load_pretrain_plan(&c)?, &c.out)?.to_string()),
        Command::Extract(c) => {
            let src = require_checkpoint(&c)?;
            let enc = extract_encoder(&Checkpoint::load(src)?)?;
            let dest = if c.out.extension().is_some() {
                c.out.clone()
            } else {
                std::fs::create_dir_all(&c.out)?;
                c.out.join("encoder.ckpt")
            };
            enc.save(&dest)?;
            Ok(format!("wrote {} ({} parameters)\n", dest.display(), enc.param_count()))
        }
        Command::Finetune(c) => {
            // `--seed` selects the fine-tuning seed here, not the pretraining one.
            let plan = load_plan(&c)?;
            let source = c
                .checkpoint
                .as_deref()
                .map(|p| TransferSource::from_files(p, None))
                .transpose()?;
            let results = plan_finetune(&plan, &c.out, source, c.seed)?;
            Ok(results.iter().map(|r| r.to_string()).collect())
        }
        Command::Evaluate(c) => {
            let plan = load_pretrain_plan(&c)?;
            let source = TransferSource::from_files(require_checkpoint(&c)?, None)?;
            Ok(plan_evaluate(&plan, &source, plan.pretrain.seed)?.to_string())
        }
        Command::Ablate(c) => Ok(plan_ablate(&load_pretrain_plan(&c)?, &c.out)?.to_string()),
    }
}

fn one_line(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', "\\n")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error kind={} message=\"{}\"", e.kind(), one_line(&e.to_string()));
            ExitCode::FAILURE
        }
    }
}
