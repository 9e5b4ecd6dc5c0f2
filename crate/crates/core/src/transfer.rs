//! Task heads on top of the pretrained encoder and the fine-tuning loop.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::corpus::{Label, TaskExample};
use crate::error::{Error, Result};
use crate::metrics::{accuracy, span_f1, token_f1, MetricReport};
use crate::model::{
    argmax, is_encoder_param, param_shapes, Bound, Checkpoint, Forward, ParamMap, SeqBatch, TransformerConfig,
};
use crate::optimizer::{Adafactor, AdafactorState, Schedule};
use crate::tensor::{Float, FlushSubnormals, Tensor};
use crate::tokenizer::{SubwordModel, TokenizedText, EOS, SEP};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskKind {
    Classify,
    PairClassify,
    Tag,
}

impl TaskKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "classify" => Ok(TaskKind::Classify),
            "pair_classify" => Ok(TaskKind::PairClassify),
            "tag" => Ok(TaskKind::Tag),
            other => Err(Error::Config(format!("unknown task type `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Classify => "classify",
            TaskKind::PairClassify => "pair_classify",
            TaskKind::Tag => "tag",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TransferMode {
    FinetuneAll,
    FeatureExtract,
}

impl TransferMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "finetune_all" => Ok(TransferMode::FinetuneAll),
            "feature_extract" => Ok(TransferMode::FeatureExtract),
            other => Err(Error::Config(format!("unknown transfer mode `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TransferMode::FinetuneAll => "finetune_all",
            TransferMode::FeatureExtract => "feature_extract",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Accuracy,
    TokenF1,
    SpanF1,
}

impl Metric {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(Metric::Accuracy),
            "token_f1" => Ok(Metric::TokenF1),
            "span_f1" => Ok(Metric::SpanF1),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::TokenF1 => "token_f1",
            Metric::SpanF1 => "span_f1",
        }
    }
}

/// Encoder input for one text: subword ids followed by EOS.
pub fn frame_text(text: &str, tok: &SubwordModel) -> TokenizedText {
    let mut t = tok.encode(text);
    t.push(EOS, false);
    t
}

/// `a SEP b EOS`, framed like a pretraining source without the `<2xx>` token.
pub fn make_pair_input(a: &str, b: &str, tok: &SubwordModel) -> Result<TokenizedText> {
    let (ta, tb) = (tok.encode(a), tok.encode(b));
    if ta.is_empty() || tb.is_empty() {
        return Err(Error::Invalid("both halves of a pair input must be non-empty".into()));
    }
    let mut out = ta;
    out.push(SEP, false);
    for (&id, &m) in tb.ids.iter().zip(&tb.first_subword_mask) {
        out.push(id, m);
    }
    out.push(EOS, false);
    Ok(out)
}

/// Keeps the first `limit` tokens, re-appending EOS when anything was cut.
pub fn truncate(t: &TokenizedText, limit: usize) -> Result<TokenizedText> {
    if limit == 0 {
        return Err(Error::Invalid("truncation limit must be ≥ 1".into()));
    }
    let content = if t.ids.last() == Some(&EOS) { t.len() - 1 } else { t.len() };
    if content <= limit {
        return Ok(t.clone());
    }
    let mut out = TokenizedText {
        ids: t.ids[..limit].to_vec(),
        first_subword_mask: t.first_subword_mask[..limit].to_vec(),
    };
    out.push(EOS, false);
    Ok(out)
}

/// Head parameter shapes for a task.
pub fn head_shapes(kind: TaskKind, model_dim: usize, width: usize, n_labels: usize) -> Vec<(String, Vec<usize>)> {
    let lin = |name: &str, i: usize, o: usize| vec![(format!("head.{name}.w"), vec![i, o]), (format!("head.{name}.b"), vec![o])];
    match kind {
        TaskKind::Classify | TaskKind::PairClassify => [
            lin("pre", model_dim, width),
            lin("post", width, width),
            lin("out", width, n_labels),
        ]
        .concat(),
        TaskKind::Tag => [lin("hidden", model_dim, width), lin("out", width, n_labels)].concat(),
    }
}

pub fn init_head(kind: TaskKind, model_dim: usize, width: usize, n_labels: usize, seed: u64) -> ParamMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    head_shapes(kind, model_dim, width, n_labels)
        .into_iter()
        .map(|(name, dims)| {
            let t = if dims.len() == 1 {
                Tensor::zeros(&dims)
            } else {
                Tensor::randn(&dims, 1.0 / (dims[0] as f64).sqrt(), &mut rng)
            };
            (name, t)
        })
        .collect()
}

fn head_linear<F: Float>(g: &mut Graph<F>, p: &Bound, x: Var, name: &str) -> Result<Var> {
    let (w, b) = (p.get(&format!("head.{name}.w"))?, p.get(&format!("head.{name}.b"))?);
    g.linear(x, w, b)
}

/// Classification head over `[batch * len, d]` encodings: pre-pool, masked max-pool, post-pool, output.
pub fn classification_head<F: Float>(g: &mut Graph<F>, p: &Bound, enc: Var, batch: &SeqBatch) -> Result<Var> {
    let h = head_linear(g, p, enc, "pre")?;
    let h = g.relu(h);
    let pooled = g.masked_max_pool(h, batch.batch, &batch.valid)?;
    let h = head_linear(g, p, pooled, "post")?;
    let h = g.relu(h);
    head_linear(g, p, h, "out")
}

/// Tagging head read at the given encoding rows (one per word).
pub fn tagging_head<F: Float>(g: &mut Graph<F>, p: &Bound, enc: Var, rows: &[usize]) -> Result<Var> {
    let x = g.gather_rows(enc, rows)?;
    let h = head_linear(g, p, x, "hidden")?;
    let h = g.relu(h);
    head_linear(g, p, h, "out")
}

/// Rows of a padded batch holding each word's first subword.
fn word_rows(items: &[&TokenizedText], len: usize) -> Vec<usize> {
    items
        .iter()
        .enumerate()
        .flat_map(|(b, t)| t.word_starts().into_iter().map(move |i| b * len + i))
        .collect()
}

fn single_batch(tokens: &[u32]) -> SeqBatch {
    let valid: Vec<bool> = tokens.iter().map(|&t| t != crate::tokenizer::PAD).collect();
    SeqBatch::single(tokens, &valid)
}

fn merged(encoder: &Checkpoint, head: &ParamMap) -> ParamMap {
    let mut all = encoder.params.clone();
    all.extend(head.iter().map(|(k, v)| (k.clone(), v.clone())));
    all
}

/// Label logits `[n_labels]` for one input; PAD ids are masked out of pooling.
pub fn classify(encoder: &Checkpoint, head: &ParamMap, tokens: &[u32]) -> Result<Tensor<f32>> {
    if tokens.is_empty() {
        return Err(Error::Invalid("cannot classify an empty input".into()));
    }
    let mut g = Graph::<f32>::new();
    let p = Bound::new(&mut g, &merged(encoder, head), |_| false);
    let batch = single_batch(tokens);
    if !batch.valid.iter().any(|&v| v) {
        return Err(Error::AllPad);
    }
    let enc = Forward::new(&encoder.config, &p).encode(&mut g, &batch)?;
    let logits = classification_head(&mut g, &p, enc, &batch)?;
    let v = g.value(logits).clone();
    let n = v.len();
    v.reshape(vec![n])
}

/// Per-word tag logits `[words, n_tags]`, read at first-subword positions.
pub fn tag(encoder: &Checkpoint, head: &ParamMap, tokenized: &TokenizedText) -> Result<Tensor<f32>> {
    if tokenized.ids.len() != tokenized.first_subword_mask.len() {
        return Err(Error::Shape(format!(
            "{} ids with {} word-start flags",
            tokenized.ids.len(),
            tokenized.first_subword_mask.len()
        )));
    }
    if tokenized.word_count() == 0 {
        return Err(Error::Invalid("tagging input has no words".into()));
    }
    let mut g = Graph::<f32>::new();
    let p = Bound::new(&mut g, &merged(encoder, head), |_| false);
    let batch = single_batch(&tokenized.ids);
    let enc = Forward::new(&encoder.config, &p).encode(&mut g, &batch)?;
    let logits = tagging_head(&mut g, &p, enc, &tokenized.word_starts())?;
    Ok(g.value(logits).clone())
}

/// Everything that shapes a fine-tuning run.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub id: String,
    pub kind: TaskKind,
    pub metric: Metric,
    pub head_width: usize,
    pub mode: TransferMode,
    pub schedule: Schedule,
    pub steps: u64,
    pub batch_size: usize,
    /// Dev evaluation interval for best-checkpoint selection.
    pub eval_every: u64,
    pub truncate: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn new(id: &str, kind: TaskKind) -> Self {
        TaskSpec {
            id: id.to_string(),
            kind,
            metric: match kind {
                TaskKind::Tag => Metric::TokenF1,
                _ => Metric::Accuracy,
            },
            head_width: 64,
            mode: TransferMode::FinetuneAll,
            schedule: Schedule::desk_scaled(
                Schedule::reference_downstream(if kind == TaskKind::Tag { "tagging" } else { "document" })
                    .expect("preset exists"),
            ),
            steps: 1000,
            batch_size: 32,
            eval_every: 100,
            truncate: 200,
            seed: 1,
        }
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("task", self.id.clone()),
            ("type", self.kind.as_str().to_string()),
            ("metric", self.metric.as_str().to_string()),
            ("head_width", self.head_width.to_string()),
            ("mode", self.mode.as_str().to_string()),
            ("peak", self.schedule.peak.to_string()),
            ("warmup", self.schedule.warmup.to_string()),
            ("steps", self.steps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("truncate", self.truncate.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }
}

/// A task example ready for the encoder.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub lang: String,
    pub input: TokenizedText,
    /// One label id, or one per word.
    pub labels: Vec<usize>,
}

/// Sorted label inventory of a task.
pub fn label_set<'a>(examples: impl IntoIterator<Item = &'a TaskExample>) -> Vec<String> {
    let mut set = BTreeSet::new();
    for ex in examples {
        match &ex.label {
            Label::Class(c) => {
                set.insert(c.clone());
            }
            Label::Tags(t) => set.extend(t.iter().cloned()),
        }
    }
    set.into_iter().collect()
}

/// Tokenizes, frames and truncates one example; tags beyond the cut are dropped.
pub fn prepare(
    ex: &TaskExample,
    kind: TaskKind,
    tok: &SubwordModel,
    labels: &[String],
    limit: usize,
) -> Result<Prepared> {
    let input = match (kind, &ex.text2) {
        (TaskKind::PairClassify, Some(b)) => make_pair_input(&ex.text, b, tok)?,
        (TaskKind::PairClassify, None) => {
            return Err(Error::Invalid(format!("pair task example lacks a second text: `{}`", ex.text)))
        }
        _ => frame_text(&ex.text, tok),
    };
    let input = truncate(&input, limit)?;
    let index = |l: &str| {
        labels
            .binary_search_by(|x| x.as_str().cmp(l))
            .map_err(|_| Error::Invalid(format!("label `{l}` is not in the task's label set")))
    };
    let label_ids = match (&ex.label, kind) {
        (Label::Class(c), TaskKind::Classify | TaskKind::PairClassify) => vec![index(c)?],
        (Label::Tags(tags), TaskKind::Tag) => {
            let words = input.word_count();
            let full = frame_text(&ex.text, tok).word_count();
            if full != tags.len() {
                return Err(Error::Invalid(format!(
                    "{} tags for {} words in `{}`",
                    tags.len(),
                    full,
                    ex.text
                )));
            }
            tags[..words].iter().map(|t| index(t)).collect::<Result<_>>()?
        }
        _ => return Err(Error::Invalid(format!("label type does not match task `{}`", kind.as_str()))),
    };
    if kind == TaskKind::Tag && label_ids.is_empty() {
        return Err(Error::Invalid(format!("tagging example has no words: `{}`", ex.text)));
    }
    Ok(Prepared {
        lang: ex.lang.clone(),
        input,
        labels: label_ids,
    })
}

/// A trained head together with the encoder it was trained on.
#[derive(Clone, Debug)]
pub struct TaskModel {
    pub kind: TaskKind,
    pub encoder: Checkpoint,
    pub head: ParamMap,
    pub labels: Vec<String>,
}

impl TaskModel {
    /// Predicted label ids: one per example, or one per word for tagging.
    pub fn predict(&self, batch: &[&Prepared]) -> Result<Vec<Vec<usize>>> {
        let mut out = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(64) {
            let mut g = Graph::<f32>::new();
            let p = Bound::new(&mut g, &merged(&self.encoder, &self.head), |_| false);
            let inputs: Vec<&TokenizedText> = chunk.iter().map(|e| &e.input).collect();
            let seq = SeqBatch::new(&inputs.iter().map(|t| t.ids.as_slice()).collect::<Vec<_>>());
            let enc = Forward::new(&self.encoder.config, &p).encode(&mut g, &seq)?;
            let logits = head_logits(&mut g, &p, self.kind, enc, &seq, &inputs)?;
            out.extend(split_predictions(g.value(logits), chunk));
        }
        Ok(out)
    }
}

pub fn head_logits<F: Float>(
    g: &mut Graph<F>,
    p: &Bound,
    kind: TaskKind,
    enc: Var,
    seq: &SeqBatch,
    inputs: &[&TokenizedText],
) -> Result<Var> {
    match kind {
        TaskKind::Tag => tagging_head(g, p, enc, &word_rows(inputs, seq.len)),
        _ => classification_head(g, p, enc, seq),
    }
}

fn split_predictions(logits: &Tensor<f32>, chunk: &[&Prepared]) -> Vec<Vec<usize>> {
    let mut row = 0;
    chunk
        .iter()
        .map(|e| {
            let n = e.labels.len();
            let preds = (row..row + n).map(|r| argmax(logits.row(r))).collect();
            row += n;
            preds
        })
        .collect()
}

/// Scores predictions per language with the task metric.
pub fn score_by_language(
    metric: Metric,
    labels: &[String],
    examples: &[&Prepared],
    preds: &[Vec<usize>],
) -> Result<BTreeMap<String, f64>> {
    let mut by_lang: BTreeMap<&str, (Vec<Vec<&str>>, Vec<Vec<&str>>)> = BTreeMap::new();
    for (ex, p) in examples.iter().zip(preds) {
        let e = by_lang.entry(ex.lang.as_str()).or_default();
        e.0.push(p.iter().map(|&i| labels[i].as_str()).collect());
        e.1.push(ex.labels.iter().map(|&i| labels[i].as_str()).collect());
    }
    by_lang
        .into_iter()
        .map(|(lang, (p, gold))| {
            let v = match metric {
                Metric::Accuracy => {
                    let flat_p: Vec<&str> = p.iter().flatten().copied().collect();
                    let flat_g: Vec<&str> = gold.iter().flatten().copied().collect();
                    accuracy(&flat_p, &flat_g)?
                }
                Metric::TokenF1 => token_f1(&p, &gold)?,
                Metric::SpanF1 => span_f1(&p, &gold)?.f1,
            };
            Ok((lang.to_string(), v))
        })
        .collect()
}

/// Result of [`finetune`].
pub struct Finetuned {
    pub model: TaskModel,
    pub report: MetricReport,
    /// Step whose parameters were kept (best dev score).
    pub best_step: u64,
    pub dev_score: f64,
}

/// Trains a head (and, in `FinetuneAll` mode, the encoder) on `train`, keeps the
/// best parameters on `dev`, and reports the metric per language on `test`.
pub fn finetune(
    spec: &TaskSpec,
    tok: &SubwordModel,
    mmte: &Checkpoint,
    train: &[TaskExample],
    dev: &[TaskExample],
    test: &[TaskExample],
    config_hash: &str,
) -> Result<Finetuned> {
    let _ftz = FlushSubnormals::new();
    if train.is_empty() {
        return Err(Error::Invalid(format!("task `{}` has an empty training split", spec.id)));
    }
    if spec.steps == 0 || spec.batch_size == 0 {
        return Err(Error::Config("fine-tuning needs steps ≥ 1 and batch_size ≥ 1".into()));
    }
    let cfg = &mmte.config;
    let encoder_names: BTreeSet<String> = param_shapes(cfg, true).into_iter().map(|(n, _)| n).collect();
    let mut encoder = Checkpoint {
        params: mmte
            .params
            .iter()
            .filter(|(k, _)| encoder_names.contains(*k))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
        optimizer: None,
        kind: crate::model::CheckpointKind::Encoder,
        ..mmte.clone()
    };
    if encoder.params.len() != encoder_names.len() {
        return Err(Error::Checkpoint("checkpoint lacks encoder tensors".into()));
    }
    let labels = label_set(train.iter().chain(dev).chain(test));
    let limit = spec.truncate.min(cfg.max_len - 1);
    let prep = |xs: &[TaskExample]| -> Result<Vec<Prepared>> {
        xs.iter().map(|e| prepare(e, spec.kind, tok, &labels, limit)).collect()
    };
    let (train_p, dev_p, test_p) = (prep(train)?, prep(dev)?, prep(test)?);

    let mut head = init_head(spec.kind, cfg.model_dim, spec.head_width, labels.len(), spec.seed);
    let feature_cache = match spec.mode {
        TransferMode::FeatureExtract => Some(encode_all(cfg, &encoder.params, &train_p)?),
        TransferMode::FinetuneAll => None,
    };

    let opt = Adafactor::default();
    let mut state = AdafactorState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5851_f42d_4c95_7f2d);
    let mut order: Vec<usize> = Vec::new();
    let mut best: Option<(f64, u64, ParamMap, Option<ParamMap>)> = None;
    let eval_every = if spec.eval_every == 0 { spec.steps } else { spec.eval_every };

    for step in 1..=spec.steps {
        if order.len() < spec.batch_size {
            let mut fresh: Vec<usize> = (0..train_p.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let idx: Vec<usize> = order.drain(..spec.batch_size.min(order.len())).collect();
        let batch: Vec<&Prepared> = idx.iter().map(|&i| &train_p[i]).collect();
        let targets: Vec<usize> = batch.iter().flat_map(|e| e.labels.iter().copied()).collect();
        let inputs: Vec<&TokenizedText> = batch.iter().map(|e| &e.input).collect();
        let seq = SeqBatch::new(&inputs.iter().map(|t| t.ids.as_slice()).collect::<Vec<_>>());

        let mut g = Graph::<f32>::new();
        let named = match &feature_cache {
            Some(cache) => {
                let p = Bound::new(&mut g, &head, |_| true);
                let enc = g.constant(padded_features(cache, &idx, seq.len, cfg.model_dim)?);
                let logits = head_logits(&mut g, &p, spec.kind, enc, &seq, &inputs)?;
                let loss = g.cross_entropy(logits, &targets, usize::MAX)?;
                check_finite(&g, loss, step)?;
                collect_grads(&mut g, &p, loss)?
            }
            None => {
                let all = merged(&encoder, &head);
                let p = Bound::new(&mut g, &all, |_| true);
                let enc = Forward::with_dropout(cfg, &p, &mut drop_rng).encode(&mut g, &seq)?;
                let logits = head_logits(&mut g, &p, spec.kind, enc, &seq, &inputs)?;
                let loss = g.cross_entropy(logits, &targets, usize::MAX)?;
                check_finite(&g, loss, step)?;
                collect_grads(&mut g, &p, loss)?
            }
        };
        let mut all = std::mem::take(&mut head);
        if spec.mode == TransferMode::FinetuneAll {
            all.append(&mut encoder.params);
        }
        opt.step(&mut all, &named, &mut state, &spec.schedule).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged(step),
            e => e,
        })?;
        for (k, v) in all {
            if is_encoder_param(&k) {
                encoder.params.insert(k, v);
            } else {
                head.insert(k, v);
            }
        }

        if step % eval_every == 0 || step == spec.steps {
            let score = if dev_p.is_empty() {
                // Without a dev split the latest parameters win.
                step as f64
            } else {
                let model = TaskModel {
                    kind: spec.kind,
                    encoder: encoder.clone(),
                    head: head.clone(),
                    labels: labels.clone(),
                };
                let refs: Vec<&Prepared> = dev_p.iter().collect();
                let preds = model.predict(&refs)?;
                pooled_score(spec.metric, &labels, &refs, &preds)?
            };
            log::debug!("{} step {step}: dev {score:.4}", spec.id);
            if best.as_ref().map_or(true, |b| score > b.0) {
                let enc = (spec.mode == TransferMode::FinetuneAll).then(|| encoder.params.clone());
                best = Some((score, step, head.clone(), enc));
            }
        }
    }

    let (dev_score, best_step, best_head, best_enc) = best.expect("evaluated at the final step");
    if let Some(p) = best_enc {
        encoder.params = p;
    }
    encoder.step = mmte.step;
    let model = TaskModel {
        kind: spec.kind,
        encoder,
        head: best_head,
        labels: labels.clone(),
    };
    let refs: Vec<&Prepared> = test_p.iter().collect();
    let preds = model.predict(&refs)?;
    let mut report = MetricReport::new(&spec.id, spec.metric.as_str(), Some(spec.seed), best_step, config_hash);
    report.values = score_by_language(spec.metric, &labels, &refs, &preds)?;
    Ok(Finetuned {
        model,
        report,
        best_step,
        dev_score,
    })
}

fn pooled_score(metric: Metric, labels: &[String], refs: &[&Prepared], preds: &[Vec<usize>]) -> Result<f64> {
    let pooled: Vec<Prepared> = refs
        .iter()
        .map(|e| Prepared {
            lang: String::new(),
            input: TokenizedText::default(),
            labels: e.labels.clone(),
        })
        .collect();
    let pooled_refs: Vec<&Prepared> = pooled.iter().collect();
    Ok(score_by_language(metric, labels, &pooled_refs, preds)?
        .into_values()
        .next()
        .unwrap_or(0.0))
}

fn check_finite(g: &Graph<f32>, loss: Var, step: u64) -> Result<()> {
    if g.value(loss).item().is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(step))
    }
}

fn collect_grads(g: &mut Graph<f32>, p: &Bound, loss: Var) -> Result<BTreeMap<String, Tensor<f32>>> {
    let mut grads = g.backward(loss)?;
    Ok(p.iter()
        .filter_map(|(name, &v)| grads.take(v).map(|t| (name.clone(), t)))
        .collect())
}

fn encode_all(cfg: &TransformerConfig, params: &ParamMap, examples: &[Prepared]) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(64) {
        let mut g = Graph::<f32>::new();
        let p = Bound::new(&mut g, params, |_| false);
        let seq = SeqBatch::new(&chunk.iter().map(|e| e.input.ids.as_slice()).collect::<Vec<_>>());
        let enc = Forward::new(cfg, &p).encode(&mut g, &seq)?;
        let v = g.value(enc);
        let d = cfg.model_dim;
        for (b, e) in chunk.iter().enumerate() {
            let n = e.input.len();
            let start = b * seq.len * d;
            out.push(Tensor::new(vec![n, d], v.data()[start..start + n * d].to_vec())?);
        }
    }
    Ok(out)
}

fn padded_features(cache: &[Tensor<f32>], idx: &[usize], len: usize, d: usize) -> Result<Tensor<f32>> {
    let mut data = vec![0f32; idx.len() * len * d];
    for (b, &i) in idx.iter().enumerate() {
        let t = cache[i].data();
        data[b * len * d..b * len * d + t.len()].copy_from_slice(t);
    }
    Tensor::new(vec![idx.len() * len, d], data)
}
