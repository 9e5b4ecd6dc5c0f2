//! Parallel corpora, temperature-based pair sampling, synthetic languages and
//! downstream task data.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tokenizer::{SubwordModel, BOS, EOS};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LanguagePair {
    pub src: String,
    pub tgt: String,
}

fn valid_code(code: &str) -> bool {
    !code.is_empty() && code.bytes().all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

impl LanguagePair {
    pub fn new(src: &str, tgt: &str) -> Result<Self> {
        if !valid_code(src) || !valid_code(tgt) {
            return Err(Error::Invalid(format!(
                "language codes must be lowercase ASCII, got `{src}` and `{tgt}`"
            )));
        }
        if src == tgt {
            return Err(Error::Invalid(format!("source and target are both `{src}`")));
        }
        Ok(LanguagePair {
            src: src.to_string(),
            tgt: tgt.to_string(),
        })
    }
}

impl fmt::Display for LanguagePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.src, self.tgt)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParallelCorpus {
    pub pair: LanguagePair,
    pub examples: Vec<(String, String)>,
}

impl ParallelCorpus {
    pub fn new(pair: LanguagePair, examples: Vec<(String, String)>) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Invalid(format!("corpus {pair} is empty")));
        }
        Ok(ParallelCorpus { pair, examples })
    }

    pub fn size(&self) -> usize {
        self.examples.len()
    }
}

/// Probability of drawing each language pair.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingPolicy {
    pub temperature: f64,
    pub probs: Vec<f64>,
    cumulative: Vec<f64>,
}

impl SamplingPolicy {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        self.cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.probs.len() - 1)
    }
}

/// `q_l ∝ p_l^(1/T)` with `p_l = D_l / Σ D`.
pub fn sampling_distribution(sizes: &[usize], temperature: f64) -> Result<SamplingPolicy> {
    if sizes.is_empty() {
        return Err(Error::Invalid("no corpora to sample from".into()));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Invalid(format!("temperature must be positive, got {temperature}")));
    }
    if let Some(i) = sizes.iter().position(|&d| d == 0) {
        return Err(Error::Invalid(format!("corpus {i} is empty")));
    }
    let total: f64 = sizes.iter().map(|&d| d as f64).sum();
    let weights: Vec<f64> = sizes
        .iter()
        .map(|&d| (d as f64 / total).powf(1.0 / temperature))
        .collect();
    let z: f64 = weights.iter().sum();
    let probs: Vec<f64> = weights.iter().map(|w| w / z).collect();
    let mut acc = 0.0;
    let mut cumulative: Vec<f64> = probs
        .iter()
        .map(|p| {
            acc += p;
            acc
        })
        .collect();
    if let Some(last) = cumulative.last_mut() {
        *last = 1.0;
    }
    Ok(SamplingPolicy {
        temperature,
        probs,
        cumulative,
    })
}

/// `(corpus, example)` indices drawn under the temperature policy; used for vocabulary training.
pub fn vocab_sample(corpora: &[ParallelCorpus], temperature: f64, n: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    let sizes: Vec<usize> = corpora.iter().map(|c| c.size()).collect();
    let policy = sampling_distribution(&sizes, temperature)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let c = policy.sample(&mut rng);
            (c, rng.gen_range(0..sizes[c]))
        })
        .collect())
}

/// How the target language reaches the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Conditioning {
    /// `<2xx>` is the first source token.
    InSource,
    /// `<2xx>` is encoded separately and the decoder attends to it next to the source.
    External,
}

impl Conditioning {
    pub fn as_str(self) -> &'static str {
        match self {
            Conditioning::InSource => "in_source",
            Conditioning::External => "external",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "in_source" => Ok(Conditioning::InSource),
            "external" => Ok(Conditioning::External),
            _ => Err(Error::Config(format!("unknown token conditioning `{s}`"))),
        }
    }
}

/// One framed training pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPair {
    /// `<2xx>? tokens EOS`
    pub src: Vec<u32>,
    /// `BOS tokens EOS`
    pub tgt: Vec<u32>,
    pub lang_token: u32,
}

#[derive(Clone, Debug)]
pub struct EncodedCorpus {
    pub pair: LanguagePair,
    pub examples: Vec<EncodedPair>,
}

/// Frames one source/target pair for translation training.
pub fn frame_pair(tok: &SubwordModel, src: &str, tgt: &str, lang_token: u32, cond: Conditioning) -> EncodedPair {
    let mut s = Vec::new();
    if cond == Conditioning::InSource {
        s.push(lang_token);
    }
    s.extend(tok.encode(src).ids);
    s.push(EOS);
    let mut t = vec![BOS];
    t.extend(tok.encode(tgt).ids);
    t.push(EOS);
    EncodedPair {
        src: s,
        tgt: t,
        lang_token,
    }
}

/// Tokenizes and frames a corpus, dropping pairs longer than `max_len`.
pub fn encode_corpus(
    corpus: &ParallelCorpus,
    tok: &SubwordModel,
    cond: Conditioning,
    max_len: usize,
) -> Result<EncodedCorpus> {
    let lang_token = tok.lang_id(&corpus.pair.tgt)?;
    let mut dropped = 0;
    let examples: Vec<EncodedPair> = corpus
        .examples
        .iter()
        .map(|(s, t)| frame_pair(tok, s, t, lang_token, cond))
        .filter(|p| {
            let ok = p.src.len() <= max_len && p.tgt.len() <= max_len;
            dropped += usize::from(!ok);
            ok
        })
        .collect();
    if dropped > 0 {
        log::warn!("{}: dropped {dropped} pairs longer than {max_len} tokens", corpus.pair);
    }
    if examples.is_empty() {
        return Err(Error::Invalid(format!("corpus {} has no pairs within {max_len} tokens", corpus.pair)));
    }
    Ok(EncodedCorpus {
        pair: corpus.pair.clone(),
        examples,
    })
}

/// Draws `batch_size` pairs: corpus from the policy, example uniformly within it.
pub fn sample_batch<'a, R: Rng + ?Sized>(
    corpora: &'a [EncodedCorpus],
    policy: &SamplingPolicy,
    batch_size: usize,
    rng: &mut R,
) -> Vec<(usize, &'a EncodedPair)> {
    assert_eq!(corpora.len(), policy.probs.len(), "policy must cover every corpus");
    (0..batch_size)
        .map(|_| {
            let c = policy.sample(rng);
            let e = rng.gen_range(0..corpora[c].examples.len());
            (c, &corpora[c].examples[e])
        })
        .collect()
}

// ---------------------------------------------------------------------------
// synthetic languages

/// Local word-order rule applied after lexical substitution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reorder {
    None,
    /// Swap words 0↔1, 2↔3, …
    SwapPairs,
    Reverse,
}

impl Reorder {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Reorder::None),
            "swap_pairs" => Ok(Reorder::SwapPairs),
            "reverse" => Ok(Reorder::Reverse),
            _ => Err(Error::Config(format!("unknown reorder rule `{s}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Reorder::None => "none",
            Reorder::SwapPairs => "swap_pairs",
            Reorder::Reverse => "reverse",
        }
    }

    fn apply<T: Clone>(self, xs: &[T]) -> Vec<T> {
        let mut v = xs.to_vec();
        match self {
            Reorder::None => {}
            Reorder::SwapPairs => {
                for c in v.chunks_mut(2) {
                    c.reverse();
                }
            }
            Reorder::Reverse => v.reverse(),
        }
        v
    }
}

/// Letters used for each synthetic language's surface forms; scripts never overlap.
const SCRIPTS: [(u32, u32); 10] = [
    (0x61, 0x7A),     // Latin (identity language)
    (0x3B1, 0x3C9),   // Greek
    (0x430, 0x44F),   // Cyrillic
    (0x561, 0x586),   // Armenian
    (0x10D0, 0x10F0), // Georgian
    (0x5D0, 0x5EA),   // Hebrew
    (0x3041, 0x3094), // Hiragana
    (0x13A0, 0x13F4), // Cherokee
    (0x30A1, 0x30F4), // Katakana
    (0x1200, 0x1248), // Ethiopic
];

/// Codes for non-identity synthetic languages, in generation order.
pub const SYNTHETIC_CODES: [&str; 9] = ["xa", "xb", "xc", "xd", "xe", "xf", "xg", "xh", "xi"];
pub const PIVOT: &str = "en";

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticLanguageSpec {
    pub n_symbols: usize,
    pub n_classes: usize,
    /// Non-identity languages with their reordering rules; the identity language is always `en`.
    pub languages: Vec<(String, Reorder)>,
    pub min_len: usize,
    pub max_len: usize,
    pub heldout_per_pair: usize,
    pub task_train: usize,
    pub task_dev: usize,
    pub task_test: usize,
    pub seed: u64,
}

impl Default for SyntheticLanguageSpec {
    fn default() -> Self {
        SyntheticLanguageSpec {
            n_symbols: 30,
            n_classes: 4,
            languages: SYNTHETIC_CODES[..4].iter().map(|c| (c.to_string(), Reorder::None)).collect(),
            min_len: 4,
            max_len: 10,
            heldout_per_pair: 100,
            task_train: 1000,
            task_dev: 200,
            task_test: 500,
            seed: 7,
        }
    }
}

impl SyntheticLanguageSpec {
    /// Default spec with the first `k` non-identity languages.
    pub fn with_languages(k: usize) -> Self {
        let mut s = Self::default();
        s.languages = SYNTHETIC_CODES[..k.min(SYNTHETIC_CODES.len())]
            .iter()
            .map(|c| (c.to_string(), Reorder::None))
            .collect();
        s
    }

    fn validate(&self) -> Result<()> {
        if self.n_symbols == 0 || self.n_classes == 0 || self.n_classes > self.n_symbols {
            return Err(Error::Invalid("need 1 ≤ classes ≤ symbols".into()));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::Invalid("sentence length range is empty".into()));
        }
        if self.languages.len() > SCRIPTS.len() - 1 {
            return Err(Error::Invalid(format!("at most {} synthetic languages", SCRIPTS.len() - 1)));
        }
        let mut seen = HashSet::new();
        for (code, _) in &self.languages {
            if code == PIVOT || !valid_code(code) || !seen.insert(code) {
                return Err(Error::Invalid(format!("bad synthetic language code `{code}`")));
            }
        }
        Ok(())
    }
}

/// Surface lexicons of every synthetic language.
#[derive(Clone, Debug)]
pub struct SyntheticWorld {
    pub spec: SyntheticLanguageSpec,
    /// Code → (symbol → surface word), identity language first.
    pub lexicons: Vec<(String, Vec<String>)>,
    pub class_of: Vec<usize>,
}

pub fn class_name(c: usize) -> String {
    format!("c{c}")
}

impl SyntheticWorld {
    pub fn new(spec: &SyntheticLanguageSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let mut lexicons = Vec::new();
        let codes = std::iter::once(PIVOT.to_string()).chain(spec.languages.iter().map(|(c, _)| c.clone()));
        for (li, code) in codes.enumerate() {
            let (lo, hi) = SCRIPTS[li];
            let letters: Vec<char> = (lo..=hi).filter_map(char::from_u32).collect();
            let mut seen = HashSet::new();
            let mut words = Vec::with_capacity(spec.n_symbols);
            while words.len() < spec.n_symbols {
                let len = rng.gen_range(3..=6);
                let w: String = (0..len).map(|_| letters[rng.gen_range(0..letters.len())]).collect();
                if seen.insert(w.clone()) {
                    words.push(w);
                }
            }
            lexicons.push((code, words));
        }
        let class_of = (0..spec.n_symbols).map(|s| s % spec.n_classes).collect();
        Ok(SyntheticWorld {
            spec: spec.clone(),
            lexicons,
            class_of,
        })
    }

    fn reorder_of(&self, lang: &str) -> Reorder {
        self.spec
            .languages
            .iter()
            .find(|(c, _)| c == lang)
            .map_or(Reorder::None, |(_, r)| *r)
    }

    fn lexicon(&self, lang: &str) -> &[String] {
        &self
            .lexicons
            .iter()
            .find(|(c, _)| c == lang)
            .expect("known language")
            .1
    }

    pub fn sample_sentence<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let n = rng.gen_range(self.spec.min_len..=self.spec.max_len);
        (0..n).map(|_| rng.gen_range(0..self.spec.n_symbols)).collect()
    }

    /// Surface words and their class tags for an interlingua sentence.
    pub fn render(&self, lang: &str, symbols: &[usize]) -> (Vec<String>, Vec<String>) {
        let order = self.reorder_of(lang).apply(symbols);
        let lex = self.lexicon(lang);
        let words = order.iter().map(|&s| lex[s].clone()).collect();
        let tags = order.iter().map(|&s| class_name(self.class_of[s])).collect();
        (words, tags)
    }

    /// Inverse lexicon lookup; `None` for a word outside the language.
    pub fn symbol_of(&self, lang: &str, word: &str) -> Option<usize> {
        self.lexicon(lang).iter().position(|w| w == word)
    }

    /// Majority class of the sentence; ties go to the smallest class name.
    pub fn sentence_label(&self, symbols: &[usize]) -> String {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for &s in symbols {
            *counts.entry(class_name(self.class_of[s])).or_default() += 1;
        }
        let best = counts.values().copied().max().unwrap_or(0);
        counts
            .into_iter()
            .find(|(_, c)| *c == best)
            .map(|(k, _)| k)
            .unwrap_or_else(|| class_name(0))
    }
}

/// Gold label of a downstream example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Label {
    Class(String),
    /// One tag per whitespace-delimited word of `text`.
    Tags(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskExample {
    pub lang: String,
    pub text: String,
    pub text2: Option<String>,
    pub label: Label,
}

impl TaskExample {
    pub fn tags(&self) -> Option<&[String]> {
        match &self.label {
            Label::Tags(t) => Some(t),
            Label::Class(_) => None,
        }
    }

    pub fn class(&self) -> Option<&str> {
        match &self.label {
            Label::Class(c) => Some(c),
            Label::Tags(_) => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TaskSplits {
    pub train: Vec<TaskExample>,
    pub dev: Vec<TaskExample>,
    pub test: Vec<TaskExample>,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub world: SyntheticWorld,
    /// `L→en` and `en→L` for every non-identity `L`.
    pub corpora: Vec<ParallelCorpus>,
    pub heldout: Vec<ParallelCorpus>,
    pub tagging: TaskSplits,
    pub classification: TaskSplits,
}

/// Generates parallel corpora and gold task data; deterministic in `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticLanguageSpec, n_per_pair: usize) -> Result<SyntheticData> {
    if n_per_pair == 0 {
        return Err(Error::Invalid("need at least one pair per direction".into()));
    }
    let world = SyntheticWorld::new(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_add(1));
    let join = |w: Vec<String>| w.join(" ");
    let mut corpora = Vec::new();
    let mut heldout = Vec::new();
    for (lang, _) in &spec.languages {
        for (src, tgt) in [(lang.as_str(), PIVOT), (PIVOT, lang.as_str())] {
            let pair = LanguagePair::new(src, tgt)?;
            let mut draw = |n: usize| -> Vec<(String, String)> {
                (0..n)
                    .map(|_| {
                        let s = world.sample_sentence(&mut rng);
                        (join(world.render(src, &s).0), join(world.render(tgt, &s).0))
                    })
                    .collect()
            };
            let train = draw(n_per_pair);
            let held = draw(spec.heldout_per_pair.max(1));
            corpora.push(ParallelCorpus::new(pair.clone(), train)?);
            heldout.push(ParallelCorpus::new(pair, held)?);
        }
    }

    let mut tagging = TaskSplits::default();
    let mut classification = TaskSplits::default();
    let all_langs: Vec<String> = world.lexicons.iter().map(|(c, _)| c.clone()).collect();
    for lang in &all_langs {
        for (n, split) in [(spec.task_train, 0), (spec.task_dev, 1), (spec.task_test, 2)] {
            for _ in 0..n {
                let s = world.sample_sentence(&mut rng);
                let (words, tags) = world.render(lang, &s);
                let text = join(words);
                let tag_ex = TaskExample {
                    lang: lang.clone(),
                    text: text.clone(),
                    text2: None,
                    label: Label::Tags(tags),
                };
                let cls_ex = TaskExample {
                    lang: lang.clone(),
                    text,
                    text2: None,
                    label: Label::Class(world.sentence_label(&s)),
                };
                let (t, c) = match split {
                    0 => (&mut tagging.train, &mut classification.train),
                    1 => (&mut tagging.dev, &mut classification.dev),
                    _ => (&mut tagging.test, &mut classification.test),
                };
                t.push(tag_ex);
                c.push(cls_ex);
            }
        }
    }
    Ok(SyntheticData {
        world,
        corpora,
        heldout,
        tagging,
        classification,
    })
}

/// Pivot data plus `k` examples per extra language, each replicated round-robin to `upsample_to`.
pub fn few_shot_mixture(
    base: &[TaskExample],
    per_lang: &BTreeMap<String, Vec<TaskExample>>,
    upsample_to: usize,
    seed: u64,
) -> Result<Vec<TaskExample>> {
    let mut out = base.to_vec();
    for (lang, examples) in per_lang {
        if examples.is_empty() {
            return Err(Error::Invalid(format!("few-shot language `{lang}` has no examples")));
        }
        if upsample_to < examples.len() {
            return Err(Error::Invalid(format!(
                "cannot upsample {} `{lang}` examples down to {upsample_to}",
                examples.len()
            )));
        }
        out.extend(examples.iter().cycle().take(upsample_to).cloned());
    }
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(out)
}

// ---------------------------------------------------------------------------
// file formats

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// `src_lang<TAB>tgt_lang<TAB>source<TAB>target`, grouped by pair in first-seen order.
pub fn load_parallel_tsv(path: &Path) -> Result<Vec<ParallelCorpus>> {
    let text = fs::read_to_string(path)?;
    let mut order: Vec<LanguagePair> = Vec::new();
    let mut groups: BTreeMap<LanguagePair, Vec<(String, String)>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 4 {
            return Err(parse_err(path, i + 1, format!("expected 4 tab-separated fields, got {}", f.len())));
        }
        let pair = LanguagePair::new(f[0], f[1]).map_err(|e| parse_err(path, i + 1, e.to_string()))?;
        if f[2].trim().is_empty() || f[3].trim().is_empty() {
            return Err(parse_err(path, i + 1, "empty sentence"));
        }
        if !groups.contains_key(&pair) {
            order.push(pair.clone());
        }
        groups.entry(pair).or_default().push((f[2].to_string(), f[3].to_string()));
    }
    if order.is_empty() {
        return Err(Error::NoRecords(path.to_path_buf()));
    }
    order
        .into_iter()
        .map(|p| {
            let ex = groups.remove(&p).unwrap_or_default();
            ParallelCorpus::new(p, ex)
        })
        .collect()
}

pub fn write_parallel_tsv(path: &Path, corpora: &[ParallelCorpus]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for c in corpora {
        for (s, t) in &c.examples {
            writeln!(f, "{}\t{}\t{s}\t{t}", c.pair.src, c.pair.tgt)?;
        }
    }
    f.flush()?;
    Ok(())
}

/// `lang<TAB>label<TAB>text[<TAB>text2]`.
pub fn load_classification_tsv(path: &Path) -> Result<Vec<TaskExample>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if !(f.len() == 3 || f.len() == 4) {
            return Err(parse_err(path, i + 1, format!("expected 3 or 4 fields, got {}", f.len())));
        }
        if !valid_code(f[0]) {
            return Err(parse_err(path, i + 1, format!("bad language code `{}`", f[0])));
        }
        if f[1].is_empty() || f[2].trim().is_empty() {
            return Err(parse_err(path, i + 1, "empty label or text"));
        }
        out.push(TaskExample {
            lang: f[0].to_string(),
            label: Label::Class(f[1].to_string()),
            text: f[2].to_string(),
            text2: f.get(3).map(|s| s.to_string()),
        });
    }
    if out.is_empty() {
        return Err(Error::NoRecords(path.to_path_buf()));
    }
    Ok(out)
}

pub fn write_classification_tsv(path: &Path, examples: &[TaskExample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for e in examples {
        let label = e.class().ok_or_else(|| Error::Invalid("classification example without a class".into()))?;
        match &e.text2 {
            Some(t2) => writeln!(f, "{}\t{label}\t{}\t{t2}", e.lang, e.text)?,
            None => writeln!(f, "{}\t{label}\t{}", e.lang, e.text)?,
        }
    }
    f.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TagScheme {
    /// Arbitrary tag strings.
    Plain,
    /// `O`, `B-X`, `I-X`.
    Iob,
}

impl TagScheme {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(TagScheme::Plain),
            "iob" => Ok(TagScheme::Iob),
            _ => Err(Error::Config(format!("unknown tag scheme `{s}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TagScheme::Plain => "plain",
            TagScheme::Iob => "iob",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TaggingLoad {
    pub examples: Vec<TaskExample>,
    /// Ill-formed IOB continuations, as `sentence N, word M: I-X after Y`.
    pub warnings: Vec<String>,
}

/// `# lang = xx` per sentence, then `token<TAB>tag` lines; blank line ends a sentence.
pub fn load_tagging_conll(path: &Path, scheme: TagScheme) -> Result<TaggingLoad> {
    let text = fs::read_to_string(path)?;
    let mut examples = Vec::new();
    let mut warnings = Vec::new();
    let mut lang: Option<String> = None;
    let mut words: Vec<String> = Vec::new();
    let mut tags: Vec<String> = Vec::new();
    let mut start_line = 0;

    let mut flush = |lang: &Option<String>, words: &mut Vec<String>, tags: &mut Vec<String>, line: usize| -> Result<()> {
        if words.is_empty() {
            return Ok(());
        }
        let lang = lang
            .clone()
            .ok_or_else(|| parse_err(path, line, "sentence without a `# lang = xx` comment"))?;
        if scheme == TagScheme::Iob {
            for (w, bad) in iob_violations(tags) {
                warnings.push(format!("sentence {}, word {w}: {bad}", examples.len() + 1));
            }
        }
        examples.push(TaskExample {
            lang,
            text: words.join(" "),
            text2: None,
            label: Label::Tags(std::mem::take(tags)),
        });
        words.clear();
        Ok(())
    };

    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&lang, &mut words, &mut tags, start_line)?;
            continue;
        }
        if let Some(c) = line.strip_prefix('#') {
            if let Some((k, v)) = c.split_once('=') {
                if k.trim() == "lang" {
                    let code = v.trim();
                    if !valid_code(code) {
                        return Err(parse_err(path, i + 1, format!("bad language code `{code}`")));
                    }
                    lang = Some(code.to_string());
                }
            }
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 2 || f[0].is_empty() || f[0].contains(char::is_whitespace) || f[1].is_empty() {
            return Err(parse_err(path, i + 1, "expected `token<TAB>tag`"));
        }
        if scheme == TagScheme::Iob && !is_iob_tag(f[1]) {
            return Err(parse_err(path, i + 1, format!("`{}` is not an IOB tag", f[1])));
        }
        if words.is_empty() {
            start_line = i + 1;
        }
        words.push(f[0].to_string());
        tags.push(f[1].to_string());
    }
    flush(&lang, &mut words, &mut tags, start_line)?;
    if examples.is_empty() {
        return Err(Error::NoRecords(path.to_path_buf()));
    }
    for w in &warnings {
        log::warn!("{}: {w}", path.display());
    }
    Ok(TaggingLoad { examples, warnings })
}

pub fn write_tagging_conll(path: &Path, examples: &[TaskExample]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for e in examples {
        let tags = e.tags().ok_or_else(|| Error::Invalid("tagging example without tags".into()))?;
        writeln!(f, "# lang = {}", e.lang)?;
        for (w, t) in e.text.split_whitespace().zip(tags) {
            writeln!(f, "{w}\t{t}")?;
        }
        writeln!(f)?;
    }
    f.flush()?;
    Ok(())
}

fn is_iob_tag(t: &str) -> bool {
    t == "O" || t.strip_prefix("B-").or_else(|| t.strip_prefix("I-")).is_some_and(|x| !x.is_empty())
}

/// Word positions (1-based) of `I-X` not preceded by `B-X` or `I-X`.
fn iob_violations(tags: &[String]) -> Vec<(usize, String)> {
    let mut out = Vec::new();
    for (i, t) in tags.iter().enumerate() {
        if let Some(x) = t.strip_prefix("I-") {
            let ok = i > 0 && (tags[i - 1] == format!("B-{x}") || tags[i - 1] == format!("I-{x}"));
            if !ok {
                let prev = if i == 0 { "sentence start" } else { tags[i - 1].as_str() };
                out.push((i + 1, format!("{t} after {prev}")));
            }
        }
    }
    out
}

/// Languages present in a set of task examples.
pub fn languages_of(examples: &[TaskExample]) -> BTreeSet<String> {
    examples.iter().map(|e| e.lang.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distribution_examples() {
        let q = sampling_distribution(&[100, 100], 3.0).unwrap();
        assert_eq!(q.probs, vec![0.5, 0.5]);
        let q = sampling_distribution(&[32, 1], 1.0).unwrap();
        assert!((q.probs[0] - 32.0 / 33.0).abs() < 1e-12);
        let q = sampling_distribution(&[32, 1], 5.0).unwrap();
        assert!((q.probs[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((q.probs[1] - 1.0 / 3.0).abs() < 1e-12);
        assert!(sampling_distribution(&[], 5.0).is_err());
        assert!(sampling_distribution(&[3, 0], 5.0).is_err());
    }

    #[test]
    fn language_pair_validation() {
        assert!(LanguagePair::new("en", "en").is_err());
        assert!(LanguagePair::new("EN", "fr").is_err());
        assert!(LanguagePair::new("en", "fr").is_ok());
    }

    #[test]
    fn synthetic_identity_and_bijection() {
        let data = generate_synthetic(&SyntheticLanguageSpec::default(), 50).unwrap();
        let w = &data.world;
        for c in &data.corpora {
            let (src_lang, tgt_lang) = (&c.pair.src, &c.pair.tgt);
            for (s, t) in &c.examples {
                let back_s: Vec<usize> = s.split(' ').map(|x| w.symbol_of(src_lang, x).unwrap()).collect();
                let back_t: Vec<usize> = t.split(' ').map(|x| w.symbol_of(tgt_lang, x).unwrap()).collect();
                assert_eq!(back_s, back_t);
            }
        }
        let (en, _) = w.render(PIVOT, &[3, 1, 4]);
        assert_eq!(en, vec![w.lexicons[0].1[3].clone(), w.lexicons[0].1[1].clone(), w.lexicons[0].1[4].clone()]);
    }

    #[test]
    fn reordering_is_applied_to_words_and_tags() {
        let mut spec = SyntheticLanguageSpec::with_languages(2);
        spec.languages[1].1 = Reorder::SwapPairs;
        let w = SyntheticWorld::new(&spec).unwrap();
        let (plain, _) = w.render("xa", &[0, 1, 2]);
        let (swapped, tags) = w.render("xb", &[0, 1, 2]);
        assert_eq!(plain[0], w.lexicons[1].1[0]);
        assert_eq!(swapped[0], w.lexicons[2].1[1]);
        assert_eq!(tags, vec!["c1", "c0", "c2"]);
    }

    #[test]
    fn surface_vocabularies_are_disjoint() {
        let w = SyntheticWorld::new(&SyntheticLanguageSpec::with_languages(9)).unwrap();
        let mut chars = HashSet::new();
        for (_, lex) in &w.lexicons {
            let mine: HashSet<char> = lex.iter().flat_map(|s| s.chars()).collect();
            assert!(chars.is_disjoint(&mine));
            chars.extend(mine);
        }
    }

    #[test]
    fn majority_label_breaks_ties_by_name() {
        let w = SyntheticWorld::new(&SyntheticLanguageSpec::default()).unwrap();
        // classes of symbols 1,2 → c1, c2: tie → c1
        assert_eq!(w.sentence_label(&[2, 1]), "c1");
        assert_eq!(w.sentence_label(&[3, 7, 0]), "c3");
    }

    #[test]
    fn few_shot_examples() {
        let ex = |lang: &str, i: usize| TaskExample {
            lang: lang.into(),
            text: format!("w{i}"),
            text2: None,
            label: Label::Class("a".into()),
        };
        let base: Vec<_> = (0..5).map(|i| ex("en", i)).collect();
        let mut per = BTreeMap::new();
        per.insert("xa".to_string(), (0..10).map(|i| ex("xa", i)).collect::<Vec<_>>());
        let mixed = few_shot_mixture(&base, &per, 1000, 1).unwrap();
        assert_eq!(mixed.len(), 1005);
        for i in 0..10 {
            let n = mixed.iter().filter(|e| e.lang == "xa" && e.text == format!("w{i}")).count();
            assert_eq!(n, 100);
        }

        let mut per = BTreeMap::new();
        for l in ["xa", "xb", "xc"] {
            per.insert(l.to_string(), vec![ex(l, 0), ex(l, 1)]);
        }
        assert_eq!(few_shot_mixture(&base, &per, 4, 1).unwrap().len(), 5 + 12);
        assert_eq!(few_shot_mixture(&base, &per, 2, 1).unwrap().len(), 5 + 6);

        per.insert("xd".to_string(), vec![]);
        assert!(few_shot_mixture(&base, &per, 4, 1).is_err());
    }

    #[test]
    fn iob_violations_are_positions() {
        let tags: Vec<String> = ["I-PER", "O", "B-LOC", "I-LOC", "I-PER"].iter().map(|s| s.to_string()).collect();
        let v = iob_violations(&tags);
        assert_eq!(v.iter().map(|(p, _)| *p).collect::<Vec<_>>(), vec![1, 5]);
    }
}
