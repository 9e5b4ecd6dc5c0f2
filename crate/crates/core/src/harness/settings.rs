//! Transfer settings, their data audits, and the ablation grid.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{canonical, config_hash, KvConfig};
use super::pretrain::{run_pretrain, PretrainConfig};
use crate::corpus::{
    few_shot_mixture, generate_synthetic, languages_of, load_classification_tsv, load_tagging_conll, Conditioning,
    SyntheticData, TagScheme, TaskExample, TaskSplits, PIVOT,
};
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::model::Checkpoint;
use crate::optimizer::Schedule;
use crate::tokenizer::SubwordModel;
use crate::transfer::{finetune, Metric, TaskKind, TaskSpec, TransferMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Setting {
    InLanguage,
    ZeroShot,
    FewShot,
    OneModelAll,
    FeatureBased,
}

impl Setting {
    pub const ALL: [Setting; 5] = [
        Setting::InLanguage,
        Setting::ZeroShot,
        Setting::FewShot,
        Setting::OneModelAll,
        Setting::FeatureBased,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        Setting::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown setting `{s}`")))
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Setting::InLanguage => "in_language",
            Setting::ZeroShot => "zero_shot",
            Setting::FewShot => "few_shot",
            Setting::OneModelAll => "one_model_all",
            Setting::FeatureBased => "feature_based",
        }
    }
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Few-shot parameters: `k` examples per non-pivot language, each upsampled to `upsample_to`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FewShot {
    pub k: usize,
    pub upsample_to: usize,
    pub seed: u64,
}

impl Default for FewShot {
    fn default() -> Self {
        FewShot {
            k: 10,
            upsample_to: 1000,
            seed: 0,
        }
    }
}

/// Train/dev/test composition of one setting.
#[derive(Clone, Debug)]
pub struct SettingData {
    pub train: Vec<TaskExample>,
    pub dev: Vec<TaskExample>,
    pub test: Vec<TaskExample>,
    pub mode: TransferMode,
}

fn of_lang<'a>(xs: &'a [TaskExample], lang: &'a str) -> impl Iterator<Item = &'a TaskExample> + 'a {
    xs.iter().filter(move |e| e.lang == lang)
}

fn require_split(xs: &[TaskExample], setting: Setting, split: &str, lang: Option<&str>) -> Result<()> {
    let present = match lang {
        Some(l) => xs.iter().any(|e| e.lang == l),
        None => !xs.is_empty(),
    };
    if present {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "setting {setting} needs a {split} split{}",
            lang.map(|l| format!(" for `{l}`")).unwrap_or_default()
        )))
    }
}

/// Builds the data composition of `setting`. For `InLanguage` use [`in_language_data`].
pub fn setting_data(setting: Setting, data: &TaskSplits, pivot: &str, few: &FewShot) -> Result<SettingData> {
    let pivot_only = |xs: &[TaskExample]| of_lang(xs, pivot).cloned().collect::<Vec<_>>();
    let out = match setting {
        Setting::ZeroShot | Setting::FeatureBased => SettingData {
            train: pivot_only(&data.train),
            dev: pivot_only(&data.dev),
            test: data.test.clone(),
            mode: if setting == Setting::FeatureBased {
                TransferMode::FeatureExtract
            } else {
                TransferMode::FinetuneAll
            },
        },
        Setting::FewShot => {
            let base = pivot_only(&data.train);
            let mut per_lang: BTreeMap<String, Vec<TaskExample>> = BTreeMap::new();
            for lang in languages_of(&data.train) {
                if lang != pivot {
                    let mut pool: Vec<TaskExample> = of_lang(&data.train, &lang).cloned().collect();
                    pool.shuffle(&mut ChaCha8Rng::seed_from_u64(few.seed));
                    pool.truncate(few.k);
                    per_lang.insert(lang.clone(), pool);
                }
            }
            SettingData {
                train: few_shot_mixture(&base, &per_lang, few.upsample_to, few.seed)?,
                dev: pivot_only(&data.dev),
                test: data.test.clone(),
                mode: TransferMode::FinetuneAll,
            }
        }
        Setting::OneModelAll => SettingData {
            train: data.train.clone(),
            dev: data.dev.clone(),
            test: data.test.clone(),
            mode: TransferMode::FinetuneAll,
        },
        Setting::InLanguage => {
            return Err(Error::Invalid("in_language runs once per language; use in_language_data".into()))
        }
    };
    require_split(&out.train, setting, "train", Some(pivot).filter(|_| setting != Setting::OneModelAll))?;
    require_split(&out.test, setting, "test", None)?;
    audit(setting, &out.train, data, pivot, few)?;
    Ok(out)
}

/// Single-language composition for the in-language setting.
pub fn in_language_data(data: &TaskSplits, lang: &str) -> Result<SettingData> {
    let pick = |xs: &[TaskExample]| of_lang(xs, lang).cloned().collect::<Vec<_>>();
    let out = SettingData {
        train: pick(&data.train),
        dev: pick(&data.dev),
        test: pick(&data.test),
        mode: TransferMode::FinetuneAll,
    };
    require_split(&out.train, Setting::InLanguage, "train", Some(lang))?;
    require_split(&out.test, Setting::InLanguage, "test", Some(lang))?;
    if languages_of(&out.train).into_iter().any(|l| l != lang) {
        return Err(Error::Audit(format!("in_language train split for `{lang}` contains other languages")));
    }
    Ok(out)
}

/// Enforces the training-split language composition of each setting.
pub fn audit(setting: Setting, train: &[TaskExample], data: &TaskSplits, pivot: &str, few: &FewShot) -> Result<()> {
    let langs = languages_of(train);
    match setting {
        Setting::ZeroShot | Setting::FeatureBased => {
            if langs.iter().any(|l| l != pivot) {
                return Err(Error::Audit(format!(
                    "{setting} train split contains non-pivot languages: {:?}",
                    langs.iter().filter(|l| *l != pivot).collect::<Vec<_>>()
                )));
            }
        }
        Setting::FewShot => {
            let pivot_n = of_lang(&data.train, pivot).count();
            let others = languages_of(&data.train).into_iter().filter(|l| l != pivot).count();
            let expected = pivot_n + few.upsample_to * others;
            if train.len() != expected {
                return Err(Error::Audit(format!(
                    "few_shot train split has {} examples, expected {expected}",
                    train.len()
                )));
            }
            for lang in langs.iter().filter(|l| *l != pivot) {
                let distinct: BTreeSet<&str> = of_lang(train, lang).map(|e| e.text.as_str()).collect();
                if distinct.len() > few.k {
                    return Err(Error::Audit(format!(
                        "few_shot uses {} distinct `{lang}` examples, more than k={}",
                        distinct.len(),
                        few.k
                    )));
                }
            }
        }
        Setting::OneModelAll => {
            let all = languages_of(&data.train);
            if langs != all {
                return Err(Error::Audit(format!("one_model_all trains on {langs:?}, expected {all:?}")));
            }
        }
        Setting::InLanguage => {}
    }
    Ok(())
}

/// Downstream data for a task.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TaskSource {
    /// Gold tags / labels of the synthetic world.
    SyntheticTagging,
    SyntheticClassification,
    Files { train: String, dev: String, test: String, scheme: TagScheme },
}

/// A downstream task as configured in an experiment plan.
#[derive(Clone, Debug)]
pub struct TaskConfig {
    pub spec: TaskSpec,
    pub source: TaskSource,
    pub settings: Vec<Setting>,
    pub seeds: Vec<u64>,
    pub pivot: String,
    pub few_shot: FewShot,
}

impl TaskConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let kind = TaskKind::parse(kv.raw("type").unwrap_or("tag"))?;
        let id: String = kv.get_or("task", kind.as_str().to_string())?;
        let mut spec = TaskSpec::new(&id, kind);
        if let Some(m) = kv.raw("metric") {
            spec.metric = Metric::parse(m)?;
        }
        spec.head_width = kv.get_or("head_width", spec.head_width)?;
        if let Some(m) = kv.raw("mode") {
            spec.mode = TransferMode::parse(m)?;
        }
        spec.schedule = match kv.raw("schedule") {
            None => spec.schedule,
            Some(preset) => Schedule::desk_scaled(Schedule::reference_downstream(preset)?),
        };
        spec.schedule = Schedule::new(
            kv.get_or("peak", spec.schedule.peak)?,
            kv.get_or("warmup", spec.schedule.warmup)?,
        )?;
        spec.steps = kv.get_or("steps", spec.steps)?;
        spec.batch_size = kv.get_or("batch_size", spec.batch_size)?;
        spec.eval_every = kv.get_or("eval_every", spec.eval_every)?;
        spec.truncate = kv.get_or("truncate", spec.truncate)?;
        spec.seed = kv.get_or("seed", spec.seed)?;
        if spec.steps > 2000 {
            log::warn!("task `{id}`: {} steps exceeds the 2000-step desk budget", spec.steps);
        }
        let source = match kv.raw("data").unwrap_or("synthetic") {
            "synthetic" => match kind {
                TaskKind::Tag => TaskSource::SyntheticTagging,
                TaskKind::Classify => TaskSource::SyntheticClassification,
                TaskKind::PairClassify => {
                    return Err(Error::Config("synthetic data has no pair-classification task".into()))
                }
            },
            "files" => TaskSource::Files {
                train: kv.require("train")?,
                dev: kv.require("dev")?,
                test: kv.require("test")?,
                scheme: TagScheme::parse(kv.raw("tag_scheme").unwrap_or("plain"))?,
            },
            other => return Err(Error::Config(format!("unknown data source `{other}`"))),
        };
        let settings = kv
            .list_or::<String>("settings", vec!["zero_shot".into()])?
            .iter()
            .map(|s| Setting::parse(s))
            .collect::<Result<Vec<_>>>()?;
        let seeds = kv.list_or("seeds", vec![1u64, 2, 3])?;
        if settings.is_empty() || seeds.is_empty() {
            return Err(Error::Config("need at least one setting and one seed".into()));
        }
        let few_shot = FewShot {
            k: kv.get_or("few_shot_k", 10)?,
            upsample_to: kv.get_or("few_shot_upsample", 1000)?,
            seed: kv.get_or("few_shot_seed", 0)?,
        };
        Ok(TaskConfig {
            spec,
            source,
            settings,
            seeds,
            pivot: kv.get_or("pivot", PIVOT.to_string())?,
            few_shot,
        })
    }

    pub fn canonical(&self) -> String {
        let mut e = self.spec.entries();
        e.retain(|(k, _)| *k != "seed");
        let source = match &self.source {
            TaskSource::SyntheticTagging | TaskSource::SyntheticClassification => "synthetic".to_string(),
            TaskSource::Files { train, dev, test, scheme } => format!("files:{train}:{dev}:{test}:{}", scheme.as_str()),
        };
        e.push(("data", source));
        e.push(("settings", self.settings.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(",")));
        e.push(("seeds", self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")));
        e.push(("pivot", self.pivot.clone()));
        e.push(("few_shot_k", self.few_shot.k.to_string()));
        e.push(("few_shot_upsample", self.few_shot.upsample_to.to_string()));
        e.push(("few_shot_seed", self.few_shot.seed.to_string()));
        canonical(&e)
    }

    /// Loads the task's splits; synthetic data comes from the pretraining run's world.
    pub fn load(&self, synthetic: Option<&SyntheticData>, base: &Path) -> Result<TaskSplits> {
        match &self.source {
            TaskSource::SyntheticTagging | TaskSource::SyntheticClassification => {
                let d = synthetic.ok_or_else(|| {
                    Error::Config("synthetic task data needs the pretraining config that generated it".into())
                })?;
                Ok(if self.source == TaskSource::SyntheticTagging {
                    d.tagging.clone()
                } else {
                    d.classification.clone()
                })
            }
            TaskSource::Files { train, dev, test, scheme } => {
                let load = |f: &str| -> Result<Vec<TaskExample>> {
                    let path = base.join(f);
                    if self.spec.kind == TaskKind::Tag {
                        Ok(load_tagging_conll(&path, *scheme)?.examples)
                    } else {
                        load_classification_tsv(&path)
                    }
                };
                Ok(TaskSplits {
                    train: load(train)?,
                    dev: load(dev)?,
                    test: load(test)?,
                })
            }
        }
    }
}

/// Validates that every task language was seen in pretraining or is flagged unseen.
pub fn check_languages(data: &TaskSplits, pretrain_langs: &BTreeSet<String>, unseen: &BTreeSet<String>) -> Result<()> {
    for split in [&data.train, &data.dev, &data.test] {
        for lang in languages_of(split) {
            if !pretrain_langs.contains(&lang) && !unseen.contains(&lang) {
                return Err(Error::Config(format!(
                    "task language `{lang}` is not in the pretraining set and not flagged unseen"
                )));
            }
        }
    }
    Ok(())
}

/// Per-seed reports and their per-language mean.
#[derive(Clone, Debug)]
pub struct SettingResult {
    pub setting: Setting,
    pub per_seed: Vec<MetricReport>,
    pub mean: MetricReport,
}

impl fmt::Display for SettingResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.per_seed {
            write!(f, "{r}")?;
        }
        write!(f, "{}", self.mean)
    }
}

/// Runs one setting over every seed and averages per language.
pub fn run_setting(
    setting: Setting,
    task: &TaskConfig,
    data: &TaskSplits,
    tok: &SubwordModel,
    mmte: &Checkpoint,
    hash: &str,
) -> Result<SettingResult> {
    let task_id = format!("{}/{}", task.spec.id, setting);
    let mut per_seed = Vec::new();
    for &seed in &task.seeds {
        let mut spec = task.spec.clone();
        spec.id = task_id.clone();
        spec.seed = seed;
        let report = if setting == Setting::InLanguage {
            let mut merged: Option<MetricReport> = None;
            for lang in languages_of(&data.test) {
                let d = in_language_data(data, &lang)?;
                let r = finetune(&spec, tok, mmte, &d.train, &d.dev, &d.test, hash)?.report;
                let m = merged.get_or_insert_with(|| MetricReport::new(&task_id, &r.metric, Some(seed), r.step, hash));
                m.values.extend(r.values);
            }
            merged.ok_or_else(|| Error::Invalid("in_language setting needs test data".into()))?
        } else {
            let few = FewShot { seed, ..task.few_shot };
            let d = setting_data(setting, data, &task.pivot, &few)?;
            spec.mode = d.mode;
            finetune(&spec, tok, mmte, &d.train, &d.dev, &d.test, hash)?.report
        };
        log::info!("{task_id} seed {seed}: avg {:.4}", report.average());
        per_seed.push(report);
    }
    let mut mean = MetricReport::new(&task_id, &per_seed[0].metric, None, task.spec.steps, hash);
    for lang in per_seed[0].values.keys() {
        let v = per_seed.iter().map(|r| r.values.get(lang).copied().unwrap_or(0.0)).sum::<f64>() / per_seed.len() as f64;
        mean.values.insert(lang.clone(), v);
    }
    Ok(SettingResult {
        setting,
        per_seed,
        mean,
    })
}

/// Per-language token accuracy of always predicting the most frequent training tag.
pub fn majority_tag_baseline(train: &[TaskExample], test: &[TaskExample]) -> Result<BTreeMap<String, f64>> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for ex in train {
        for t in ex.tags().ok_or_else(|| Error::Invalid("majority baseline needs tagged examples".into()))? {
            *counts.entry(t.as_str()).or_default() += 1;
        }
    }
    let best = counts.values().copied().max().ok_or_else(|| Error::Invalid("no training tags".into()))?;
    let majority = counts.iter().find(|(_, &c)| c == best).map(|(t, _)| *t).expect("non-empty");
    let mut per: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for ex in test {
        let tags = ex.tags().ok_or_else(|| Error::Invalid("majority baseline needs tagged examples".into()))?;
        let e = per.entry(ex.lang.clone()).or_default();
        e.0 += tags.iter().filter(|t| *t == majority).count();
        e.1 += tags.len();
    }
    Ok(per.into_iter().map(|(l, (hit, n))| (l, hit as f64 / n.max(1) as f64)).collect())
}

/// Cells of a pretraining ablation.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationGrid {
    pub language_counts: Vec<usize>,
    pub conditioning: Vec<Conditioning>,
}

impl AblationGrid {
    pub fn cells(&self) -> Result<Vec<(Conditioning, usize)>> {
        if self.language_counts.is_empty() || self.conditioning.is_empty() {
            return Err(Error::Config("ablation grid is empty".into()));
        }
        Ok(self
            .conditioning
            .iter()
            .flat_map(|&c| self.language_counts.iter().map(move |&k| (c, k)))
            .collect())
    }
}

pub fn cell_name(cond: Conditioning, k: usize) -> String {
    format!("{}-k{k}", cond.as_str())
}

/// One pretraining run per grid cell (cached by config hash), each evaluated zero-shot
/// on the task data of the largest cell's world.
pub struct AblationResult {
    pub cells: Vec<(String, String, SettingResult)>,
}

impl fmt::Display for AblationResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (_, _, r) in &self.cells {
            write!(f, "{}", r.mean)?;
        }
        Ok(())
    }
}

impl AblationResult {
    /// Pretraining hashes per cell, in grid order.
    pub fn checkpoints(&self) -> Vec<(&str, &str)> {
        self.cells.iter().map(|(c, h, _)| (c.as_str(), h.as_str())).collect()
    }
}

pub fn run_ablation(
    grid: &AblationGrid,
    base: &PretrainConfig,
    task: &TaskConfig,
    cache: &Path,
) -> Result<AblationResult> {
    let cells = grid.cells()?;
    let max_k = *grid.language_counts.iter().max().expect("non-empty");
    let mut eval_cfg = base.clone();
    eval_cfg.languages = max_k;
    let eval_data = generate_synthetic(&eval_cfg.synthetic_spec(), 1)?;
    let data = match task.source {
        TaskSource::SyntheticTagging => eval_data.tagging,
        TaskSource::SyntheticClassification => eval_data.classification,
        TaskSource::Files { .. } => {
            return Err(Error::Config("ablations run on synthetic task data".into()));
        }
    };
    let mut out = Vec::new();
    for (cond, k) in cells {
        let mut cfg = base.clone();
        cfg.languages = k;
        cfg.model.conditioning = cond;
        let pre = run_pretrain(&cfg, Some(cache))?;
        let name = cell_name(cond, k);
        let mut cell_task = task.clone();
        cell_task.spec.id = format!("{}@{name}", task.spec.id);
        let hash = config_hash(&format!("{}{}", pre.hash, task.canonical()));
        let r = run_setting(Setting::ZeroShot, &cell_task, &data, &pre.tokenizer, &pre.checkpoint, &hash)?;
        out.push((name, pre.hash.clone(), r));
    }
    Ok(AblationResult { cells: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Label;

    fn ex(lang: &str, i: usize) -> TaskExample {
        TaskExample {
            lang: lang.into(),
            text: format!("w{i}"),
            text2: None,
            label: Label::Tags(vec![if i % 3 == 0 { "c1" } else { "c0" }.into()]),
        }
    }

    fn splits() -> TaskSplits {
        let mk = |n: usize| -> Vec<TaskExample> {
            ["en", "xa", "xb"]
                .iter()
                .flat_map(|l| (0..n).map(move |i| ex(l, i)))
                .collect()
        };
        TaskSplits {
            train: mk(30),
            dev: mk(5),
            test: mk(6),
        }
    }

    #[test]
    fn zero_shot_trains_on_pivot_only() {
        let d = setting_data(Setting::ZeroShot, &splits(), "en", &FewShot::default()).unwrap();
        assert!(d.train.iter().all(|e| e.lang == "en"));
        assert_eq!(languages_of(&d.test).len(), 3);
        let bad = vec![ex("en", 0), ex("xa", 1)];
        assert!(matches!(
            audit(Setting::ZeroShot, &bad, &splits(), "en", &FewShot::default()),
            Err(Error::Audit(_))
        ));
    }

    #[test]
    fn few_shot_size_follows_upsampling() {
        let few = FewShot::default();
        let d = setting_data(Setting::FewShot, &splits(), "en", &few).unwrap();
        assert_eq!(d.train.len(), 30 + 1000 * 2);
    }

    #[test]
    fn one_model_all_uses_every_language() {
        let d = setting_data(Setting::OneModelAll, &splits(), "en", &FewShot::default()).unwrap();
        assert_eq!(d.train.len(), 90);
    }

    #[test]
    fn missing_split_is_named() {
        let mut s = splits();
        s.train.retain(|e| e.lang != "en");
        let err = setting_data(Setting::ZeroShot, &s, "en", &FewShot::default()).unwrap_err();
        assert!(err.to_string().contains("train"), "{err}");
    }

    #[test]
    fn majority_baseline_counts_most_frequent_tag() {
        let s = splits();
        let b = majority_tag_baseline(&s.train, &s.test).unwrap();
        assert!((b["xa"] - 4.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn grid_cells_cover_product() {
        let g = AblationGrid {
            language_counts: vec![2, 4],
            conditioning: vec![Conditioning::InSource, Conditioning::External],
        };
        assert_eq!(g.cells().unwrap().len(), 4);
        assert!(AblationGrid {
            language_counts: vec![],
            conditioning: vec![Conditioning::InSource]
        }
        .cells()
        .is_err());
    }
}
