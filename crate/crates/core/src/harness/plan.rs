//! Experiment plans: one config file driving pretraining, transfer settings and ablations.
//!
//! Keys are grouped by prefix: `pretrain.*`, `task.*`, `ablate.*`, plus a top-level
//! `unseen` list naming task languages absent from pretraining.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::config::{config_hash, KvConfig};
use super::pretrain::{evaluate_bleu, run_pretrain, PretrainConfig, VOCAB_FILE};
use super::settings::{check_languages, run_ablation, run_setting, AblationGrid, AblationResult, SettingResult, TaskConfig};
use crate::corpus::{generate_synthetic, Conditioning, SyntheticData, PIVOT, SYNTHETIC_CODES};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::{Checkpoint, CheckpointKind};
use crate::tokenizer::SubwordModel;

#[derive(Clone, Debug)]
pub struct ExperimentPlan {
    pub pretrain: PretrainConfig,
    pub task: Option<TaskConfig>,
    pub ablation: Option<AblationGrid>,
    pub unseen: BTreeSet<String>,
    /// Directory that relative data paths resolve against.
    pub base: PathBuf,
}

impl ExperimentPlan {
    pub fn from_kv(kv: &KvConfig, base: &Path) -> Result<Self> {
        let pretrain = PretrainConfig::from_kv_checked(&kv.section("pretrain"))?;
        let task_kv = kv.section("task");
        let task = if task_kv.is_empty() {
            None
        } else {
            let t = TaskConfig::from_kv(&task_kv)?;
            task_kv.reject_unknown().map_err(|e| Error::Config(format!("task section: {e}")))?;
            Some(t)
        };
        let ab = kv.section("ablate");
        let ablation = if ab.is_empty() {
            None
        } else {
            let grid = AblationGrid {
                language_counts: ab.list_or("language_counts", vec![2, 4])?,
                conditioning: ab
                    .list_or::<String>("conditioning", vec!["in_source".into(), "external".into()])?
                    .iter()
                    .map(|c| Conditioning::parse(c))
                    .collect::<Result<_>>()?,
            };
            ab.reject_unknown().map_err(|e| Error::Config(format!("ablate section: {e}")))?;
            grid.cells()?;
            Some(grid)
        };
        let unseen = kv.list_or::<String>("unseen", vec![])?.into_iter().collect();
        kv.reject_unknown()?;
        Ok(ExperimentPlan {
            pretrain,
            task,
            ablation,
            unseen,
            base: base.to_path_buf(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let kv = KvConfig::load(path)?;
        Self::from_kv(&kv, path.parent().unwrap_or(Path::new(".")))
    }

    /// Languages covered by the pretraining corpora.
    pub fn pretrain_languages(&self) -> BTreeSet<String> {
        std::iter::once(PIVOT)
            .chain(SYNTHETIC_CODES.iter().copied().take(self.pretrain.languages))
            .map(str::to_string)
            .collect()
    }

    pub fn task(&self) -> Result<&TaskConfig> {
        self.task
            .as_ref()
            .ok_or_else(|| Error::Config("the plan has no `task.*` section".into()))
    }

    pub fn synthetic(&self) -> Result<SyntheticData> {
        generate_synthetic(&self.pretrain.synthetic_spec(), self.pretrain.pairs_per_direction)
    }
}

impl PretrainConfig {
    /// Like `from_kv`, but rejects keys it does not know.
    pub fn from_kv_checked(kv: &KvConfig) -> Result<Self> {
        let cfg = Self::from_kv(kv)?;
        kv.reject_unknown().map_err(|e| Error::Config(format!("pretrain section: {e}")))?;
        Ok(cfg)
    }
}

/// Where each artifact of a plan lands under `out`.
pub fn pretrain_cache(out: &Path) -> PathBuf {
    out.join("pretrain")
}

pub fn reports_dir(out: &Path) -> PathBuf {
    out.join("reports")
}

/// Encoder weights and tokenizer used for fine-tuning.
pub struct TransferSource {
    pub checkpoint: Checkpoint,
    pub tokenizer: SubwordModel,
    /// Identifies the weights in report hashes.
    pub id: String,
}

impl TransferSource {
    /// Loads a checkpoint file and the `vocab.txt` beside it (or `vocab` if given).
    pub fn from_files(checkpoint: &Path, vocab: Option<&Path>) -> Result<Self> {
        let bytes = std::fs::read(checkpoint)?;
        let ck = Checkpoint::from_bytes(&bytes)?;
        let vocab = match vocab {
            Some(v) => v.to_path_buf(),
            None => checkpoint.parent().unwrap_or(Path::new(".")).join(VOCAB_FILE),
        };
        let tokenizer = SubwordModel::load(&vocab)?;
        if tokenizer.vocab_size() != ck.config.vocab_size {
            return Err(Error::Checkpoint(format!(
                "{} has {} tokens but the checkpoint expects {}",
                vocab.display(),
                tokenizer.vocab_size(),
                ck.config.vocab_size
            )));
        }
        Ok(TransferSource {
            checkpoint: ck,
            tokenizer,
            id: hex::encode(&Sha256::digest(&bytes)[..8]),
        })
    }
}

/// Pretrains (or loads the cached run) and writes the BLEU report.
pub fn plan_pretrain(plan: &ExperimentPlan, out: &Path) -> Result<MetricReport> {
    let p = run_pretrain(&plan.pretrain, Some(&pretrain_cache(out)))?;
    write_report(out, &format!("pretrain-{}", p.hash), &p.bleu.to_string())?;
    Ok(p.bleu)
}

/// Runs every configured setting of the plan's task. `seed` overrides the plan's seed list.
pub fn plan_finetune(
    plan: &ExperimentPlan,
    out: &Path,
    source: Option<TransferSource>,
    seed: Option<u64>,
) -> Result<Vec<SettingResult>> {
    let mut task = plan.task()?.clone();
    if let Some(s) = seed {
        task.seeds = vec![s];
    }
    let source = match source {
        Some(s) => s,
        None => {
            let p = run_pretrain(&plan.pretrain, Some(&pretrain_cache(out)))?;
            TransferSource {
                checkpoint: p.checkpoint,
                tokenizer: p.tokenizer,
                id: p.hash,
            }
        }
    };
    let synthetic = plan.synthetic()?;
    let data = task.load(Some(&synthetic), &plan.base)?;
    check_languages(&data, &plan.pretrain_languages(), &plan.unseen)?;
    let hash = config_hash(&format!("{}\n{}", source.id, task.canonical()));
    let mut results = Vec::new();
    for &setting in &task.settings {
        let r = run_setting(setting, &task, &data, &source.tokenizer, &source.checkpoint, &hash)?;
        write_report(out, &format!("{}-{}", task.spec.id, setting), &r.to_string())?;
        results.push(r);
    }
    Ok(results)
}

/// Held-out BLEU of a full translation checkpoint on the plan's synthetic data.
pub fn plan_evaluate(plan: &ExperimentPlan, source: &TransferSource, seed: u64) -> Result<MetricReport> {
    if source.checkpoint.kind != CheckpointKind::Full {
        return Err(Error::Checkpoint("BLEU needs a full translation checkpoint, not an encoder".into()));
    }
    let data = plan.synthetic()?;
    evaluate_bleu(
        &source.checkpoint.config,
        &source.checkpoint.params,
        &source.tokenizer,
        &data.heldout,
        &source.id,
        seed,
        source.checkpoint.step,
    )
}

pub fn plan_ablate(plan: &ExperimentPlan, out: &Path) -> Result<AblationResult> {
    let grid = plan
        .ablation
        .as_ref()
        .ok_or_else(|| Error::Config("the plan has no `ablate.*` section".into()))?;
    let r = run_ablation(grid, &plan.pretrain, plan.task()?, &pretrain_cache(out))?;
    write_report(out, &format!("ablate-{}", plan.task()?.spec.id), &r.to_string())?;
    Ok(r)
}

fn write_report(out: &Path, name: &str, text: &str) -> Result<()> {
    let dir = reports_dir(out);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(format!("{}.txt", name.replace('/', "-"))), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<ExperimentPlan> {
        ExperimentPlan::from_kv(&KvConfig::parse(text, Path::new("plan")).unwrap(), Path::new("."))
    }

    #[test]
    fn sections_are_split_by_prefix() {
        let p = parse(
            "pretrain.languages=2\npretrain.steps=10\ntask.type=tag\ntask.settings=zero_shot,few_shot\n\
             ablate.language_counts=1,2\nunseen=zz\n",
        )
        .unwrap();
        assert_eq!(p.pretrain.languages, 2);
        assert_eq!(p.task.unwrap().settings.len(), 2);
        assert_eq!(p.ablation.unwrap().cells().unwrap().len(), 4);
        assert!(p.unseen.contains("zz"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(parse("pretrain.stepz=10\n").is_err());
        assert!(parse("task.type=tag\ntask.colour=red\n").is_err());
        assert!(parse("whatever=1\n").is_err());
    }

    #[test]
    fn languages_must_be_pretrained_or_unseen() {
        let p = parse("pretrain.languages=1\ntask.type=tag\n").unwrap();
        assert_eq!(p.pretrain_languages().len(), 2);
        let ex = |l: &str| crate::corpus::TaskExample {
            lang: l.into(),
            text: "a".into(),
            text2: None,
            label: crate::corpus::Label::Tags(vec!["c0".into()]),
        };
        let data = crate::corpus::TaskSplits {
            train: vec![ex("en")],
            dev: vec![],
            test: vec![ex("xb")],
        };
        assert!(check_languages(&data, &p.pretrain_languages(), &p.unseen).is_err());
        let unseen = ["xb".to_string()].into_iter().collect();
        check_languages(&data, &p.pretrain_languages(), &unseen).unwrap();
    }
}
