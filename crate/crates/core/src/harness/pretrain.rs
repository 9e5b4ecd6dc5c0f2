//! Multilingual translation pretraining on synthetic corpora.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{canonical, config_hash, KvConfig};
use crate::autodiff::Graph;
use crate::corpus::{
    encode_corpus, generate_synthetic, sample_batch, sampling_distribution, Conditioning, EncodedCorpus,
    ParallelCorpus, SyntheticData, SyntheticLanguageSpec,
};
use crate::error::{Error, Result};
use crate::metrics::{bleu_text, MetricReport};
use crate::model::{translate_greedy, Bound, Checkpoint, Forward, ParamMap, TransformerConfig};
use crate::optimizer::{Adafactor, AdafactorState, Schedule};
use crate::tensor::FlushSubnormals;
use crate::tokenizer::{SubwordModel, VocabParams};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    /// Non-identity synthetic languages.
    pub languages: usize,
    pub pairs_per_direction: usize,
    pub heldout_per_direction: usize,
    pub data_seed: u64,
    pub vocab_size: usize,
    pub char_coverage: f64,
    pub temperature: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub model: TransformerConfig,
    pub seed: u64,
    /// Held-out BLEU every this many steps; 0 evaluates only at the end.
    pub eval_every: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            languages: 4,
            pairs_per_direction: 5000,
            heldout_per_direction: 100,
            data_seed: 7,
            vocab_size: 1024,
            char_coverage: 0.999995,
            temperature: 5.0,
            steps: 20_000,
            batch_size: 16,
            schedule: Schedule::desk_pretrain(),
            model: TransformerConfig::desk(0),
            seed: 1,
            eval_every: 0,
        }
    }
}

impl PretrainConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let m = &d.model;
        let cfg = PretrainConfig {
            languages: kv.get_or("languages", d.languages)?,
            pairs_per_direction: kv.get_or("pairs_per_direction", d.pairs_per_direction)?,
            heldout_per_direction: kv.get_or("heldout_per_direction", d.heldout_per_direction)?,
            data_seed: kv.get_or("data_seed", d.data_seed)?,
            vocab_size: kv.get_or("vocab_size", d.vocab_size)?,
            char_coverage: kv.get_or("char_coverage", d.char_coverage)?,
            temperature: kv.get_or("temperature", d.temperature)?,
            steps: kv.get_or("steps", d.steps)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            schedule: Schedule::new(
                kv.get_or("peak", d.schedule.peak)?,
                kv.get_or("warmup", d.schedule.warmup)?,
            )?,
            model: TransformerConfig {
                layers: kv.get_or("layers", m.layers)?,
                heads: kv.get_or("heads", m.heads)?,
                model_dim: kv.get_or("model_dim", m.model_dim)?,
                hidden_dim: kv.get_or("hidden_dim", m.hidden_dim)?,
                vocab_size: 0,
                max_len: kv.get_or("max_len", m.max_len)?,
                dropout: kv.get_or("dropout", m.dropout)?,
                conditioning: Conditioning::parse(kv.raw("conditioning").unwrap_or("in_source"))?,
            },
            seed: kv.get_or("seed", d.seed)?,
            eval_every: kv.get_or("eval_every", d.eval_every)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.languages == 0 {
            return Err(Error::Config("pretraining needs at least one non-identity language".into()));
        }
        if self.steps == 0 || self.batch_size == 0 || self.pairs_per_direction == 0 {
            return Err(Error::Config("steps, batch_size and pairs_per_direction must be ≥ 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        let mut m = self.model.clone();
        m.vocab_size = 1;
        m.validate()
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        vec![
            ("languages", self.languages.to_string()),
            ("pairs_per_direction", self.pairs_per_direction.to_string()),
            ("heldout_per_direction", self.heldout_per_direction.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("char_coverage", self.char_coverage.to_string()),
            ("temperature", self.temperature.to_string()),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("peak", self.schedule.peak.to_string()),
            ("warmup", self.schedule.warmup.to_string()),
            ("layers", m.layers.to_string()),
            ("heads", m.heads.to_string()),
            ("model_dim", m.model_dim.to_string()),
            ("hidden_dim", m.hidden_dim.to_string()),
            ("max_len", m.max_len.to_string()),
            ("dropout", m.dropout.to_string()),
            ("conditioning", m.conditioning.as_str().to_string()),
            ("seed", self.seed.to_string()),
            ("eval_every", self.eval_every.to_string()),
        ]
    }

    pub fn canonical(&self) -> String {
        canonical(&self.entries())
    }

    pub fn hash(&self) -> String {
        config_hash(&self.canonical())
    }

    pub fn synthetic_spec(&self) -> SyntheticLanguageSpec {
        let mut s = SyntheticLanguageSpec::with_languages(self.languages);
        s.seed = self.data_seed;
        s.heldout_per_pair = self.heldout_per_direction;
        s
    }
}

/// A trained (or cache-loaded) translation model with its data.
pub struct Pretrained {
    pub config: PretrainConfig,
    pub hash: String,
    pub checkpoint: Checkpoint,
    pub tokenizer: SubwordModel,
    pub data: SyntheticData,
    /// Held-out BLEU per direction.
    pub bleu: MetricReport,
    pub dir: Option<PathBuf>,
}

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const BLEU_FILE: &str = "bleu.txt";
pub const CONFIG_FILE: &str = "pretrain.cfg";

/// Pretrains, or loads the run cached under `cache/<config hash>/`.
pub fn run_pretrain(cfg: &PretrainConfig, cache: Option<&Path>) -> Result<Pretrained> {
    let _ftz = FlushSubnormals::new();
    cfg.validate()?;
    let hash = cfg.hash();
    let data = generate_synthetic(&cfg.synthetic_spec(), cfg.pairs_per_direction)?;
    let dir = cache.map(|c| c.join(&hash));
    if let Some(dir) = &dir {
        let ck = dir.join(CHECKPOINT_FILE);
        let vocab = dir.join(VOCAB_FILE);
        let bleu = dir.join(BLEU_FILE);
        if ck.exists() && vocab.exists() && bleu.exists() {
            log::info!("loading cached pretraining run {hash}");
            let report = MetricReport::parse(&std::fs::read_to_string(&bleu)?)?
                .into_iter()
                .next()
                .ok_or_else(|| Error::Checkpoint(format!("{} is empty", bleu.display())))?;
            return Ok(Pretrained {
                config: cfg.clone(),
                hash,
                checkpoint: Checkpoint::load(&ck)?,
                tokenizer: SubwordModel::load(&vocab)?,
                data,
                bleu: report,
                dir: Some(dir.clone()),
            });
        }
    }

    let tokenizer = SubwordModel::build(
        &data.corpora,
        &VocabParams {
            vocab_size: cfg.vocab_size,
            temperature: cfg.temperature,
            char_coverage: cfg.char_coverage,
            sample_examples: 20_000,
            seed: cfg.data_seed,
        },
    )?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = tokenizer.vocab_size();
    let encoded: Vec<EncodedCorpus> = data
        .corpora
        .iter()
        .map(|c| encode_corpus(c, &tokenizer, model_cfg.conditioning, model_cfg.max_len))
        .collect::<Result<_>>()?;

    let mut ck = Checkpoint::new(model_cfg.clone(), crate::model::init_params(&model_cfg, cfg.seed)?);
    let mut state = AdafactorState::default();
    let mut eval_log = Vec::new();
    train_translation(cfg, &encoded, &mut ck.params, &mut state, |step, params| {
        if cfg.eval_every > 0 && step % cfg.eval_every == 0 && step < cfg.steps {
            let r = evaluate_bleu(&model_cfg, params, &tokenizer, &data.heldout, &hash, cfg.seed, step)?;
            log::info!("step {step}: held-out BLEU avg {:.2}", r.average());
            eval_log.push(r);
        }
        Ok(())
    })?;
    ck.step = cfg.steps;
    ck.optimizer = Some(state.to_tensors());
    let bleu = evaluate_bleu(&model_cfg, &ck.params, &tokenizer, &data.heldout, &hash, cfg.seed, cfg.steps)?;
    log::info!("pretraining {hash} done: held-out BLEU avg {:.2}", bleu.average());

    if let Some(dir) = &dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(CONFIG_FILE), cfg.canonical())?;
        tokenizer.save(&dir.join(VOCAB_FILE))?;
        ck.save(&dir.join(CHECKPOINT_FILE))?;
        let mut text = String::new();
        for r in eval_log.iter().chain(std::iter::once(&bleu)) {
            text.push_str(&r.to_string());
        }
        // The final report goes last but is what `run_pretrain` reloads.
        std::fs::write(dir.join(BLEU_FILE), bleu.to_string())?;
        if !eval_log.is_empty() {
            std::fs::write(dir.join("bleu_history.txt"), text)?;
        }
    }
    Ok(Pretrained {
        config: cfg.clone(),
        hash,
        checkpoint: ck,
        tokenizer,
        data,
        bleu,
        dir,
    })
}

/// The optimization loop. `on_step` runs after every update.
pub fn train_translation(
    cfg: &PretrainConfig,
    corpora: &[EncodedCorpus],
    params: &mut ParamMap,
    state: &mut AdafactorState,
    mut on_step: impl FnMut(u64, &ParamMap) -> Result<()>,
) -> Result<()> {
    let _ftz = FlushSubnormals::new();
    let sizes: Vec<usize> = corpora.iter().map(|c| c.examples.len()).collect();
    let policy = sampling_distribution(&sizes, cfg.temperature)?;
    let mut model_cfg = cfg.model.clone();
    model_cfg.vocab_size = params
        .get("embed")
        .ok_or_else(|| Error::Checkpoint("missing parameter `embed`".into()))?
        .rows();
    let opt = Adafactor::default();
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let started = Instant::now();
    let mut running = 0.0;
    for step in (state.t + 1)..=cfg.steps {
        let batch: Vec<_> = sample_batch(corpora, &policy, cfg.batch_size, &mut batch_rng)
            .into_iter()
            .map(|(_, p)| p)
            .collect();
        let mut g = Graph::<f32>::new();
        let bound = Bound::new(&mut g, params, |_| true);
        let loss = Forward::with_dropout(&model_cfg, &bound, &mut drop_rng).translation_loss(&mut g, &batch)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Diverged(step));
        }
        let mut grads = g.backward(loss)?;
        let named: BTreeMap<String, _> = bound
            .iter()
            .filter_map(|(name, &v)| grads.take(v).map(|t| (name.clone(), t)))
            .collect();
        opt.step(params, &named, state, &cfg.schedule).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged(step),
            e => e,
        })?;
        running = if step == 1 { value as f64 } else { 0.98 * running + 0.02 * value as f64 };
        if step % 500 == 0 {
            log::info!(
                "step {step}: loss {running:.4} ({:.1} ms/step)",
                started.elapsed().as_secs_f64() * 1000.0 / step as f64
            );
        }
        on_step(step, params)?;
    }
    Ok(())
}

/// Greedy-decodes every held-out direction and scores it against the references.
pub fn evaluate_bleu(
    model: &TransformerConfig,
    params: &ParamMap,
    tokenizer: &SubwordModel,
    heldout: &[ParallelCorpus],
    hash: &str,
    seed: u64,
    step: u64,
) -> Result<MetricReport> {
    let _ftz = FlushSubnormals::new();
    let mut report = MetricReport::new("pretrain", "bleu", Some(seed), step, hash);
    for corpus in heldout {
        let enc = encode_corpus(corpus, tokenizer, model.conditioning, model.max_len)?;
        let mut hyps = Vec::new();
        let mut refs = Vec::new();
        for chunk in enc.examples.chunks(64) {
            let srcs: Vec<&[u32]> = chunk.iter().map(|p| p.src.as_slice()).collect();
            let langs: Vec<u32> = chunk.iter().map(|p| p.lang_token).collect();
            for (p, out) in chunk.iter().zip(translate_greedy(model, params, &srcs, &langs, model.max_len)?) {
                hyps.push(tokenizer.decode(&out)?);
                refs.push(tokenizer.decode(&p.tgt)?);
            }
        }
        report.values.insert(corpus.pair.to_string(), bleu_text(&hyps, &refs)?);
    }
    Ok(report)
}
