//! Shared subword vocabulary: byte-pair merges learned over a temperature-balanced
//! multilingual sample.
//!
//! Text is NFC-normalized and split on whitespace. Every word after the first
//! carries a leading boundary marker `▁`, so word starts survive segmentation and
//! decoding is exact. Merges never cross word boundaries.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::corpus::{vocab_sample, ParallelCorpus};
use crate::error::{Error, Result};

/// Word-boundary marker prefixed to every non-initial word.
pub const BOUNDARY: char = '\u{2581}';
const UNK_SURFACE: &str = "\u{2047}";
const HEADER: &str = "MMTE-SPM v1";

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;
pub const SEP: u32 = 4;
const FIXED_SPECIALS: [&str; 5] = ["<pad>", "<unk>", "<s>", "</s>", "<sep>"];

/// Name of the target-language token for `lang`, e.g. `<2en>`.
pub fn lang_token_name(lang: &str) -> String {
    format!("<2{lang}>")
}

#[derive(Clone, Debug)]
pub struct VocabParams {
    pub vocab_size: usize,
    pub temperature: f64,
    pub char_coverage: f64,
    /// Parallel examples drawn for training (each contributes both sides).
    pub sample_examples: usize,
    pub seed: u64,
}

impl Default for VocabParams {
    fn default() -> Self {
        VocabParams {
            vocab_size: 1024,
            temperature: 5.0,
            char_coverage: 0.999995,
            sample_examples: 20_000,
            seed: 0,
        }
    }
}

/// Token ids plus a flag at each word's first subword.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TokenizedText {
    pub ids: Vec<u32>,
    pub first_subword_mask: Vec<bool>,
}

impl TokenizedText {
    pub fn word_count(&self) -> usize {
        self.first_subword_mask.iter().filter(|&&m| m).count()
    }

    /// Positions of each word's first subword.
    pub fn word_starts(&self) -> Vec<usize> {
        self.first_subword_mask
            .iter()
            .enumerate()
            .filter_map(|(i, &m)| m.then_some(i))
            .collect()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: u32, word_start: bool) {
        self.ids.push(id);
        self.first_subword_mask.push(word_start);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SubwordModel {
    coverage: f64,
    /// Special names in id order; ids `0..specials.len()`.
    specials: Vec<String>,
    merges: Vec<(u32, u32)>,
    tokens: Vec<String>,
    vocab: HashMap<String, u32>,
    merge_rank: HashMap<(u32, u32), (usize, u32)>,
}

impl SubwordModel {
    /// Learns a vocabulary from a temperature-balanced sample of `corpora`.
    pub fn build(corpora: &[ParallelCorpus], params: &VocabParams) -> Result<Self> {
        let langs: BTreeSet<&str> = corpora.iter().map(|c| c.pair.tgt.as_str()).collect();
        let sample = vocab_sample(corpora, params.temperature, params.sample_examples, params.seed)?;
        let lines = sample.iter().flat_map(|&(ci, ei)| {
            let (s, t) = &corpora[ci].examples[ei];
            [s.as_str(), t.as_str()]
        });
        Self::train(lines, langs.into_iter(), params.vocab_size, params.char_coverage)
    }

    /// Trains directly on lines of text.
    pub fn train<'a>(
        lines: impl Iterator<Item = &'a str>,
        langs: impl Iterator<Item = &'a str>,
        vocab_size: usize,
        char_coverage: f64,
    ) -> Result<Self> {
        if !(char_coverage > 0.0 && char_coverage <= 1.0) {
            return Err(Error::Invalid(format!("character coverage {char_coverage} outside (0, 1]")));
        }
        let mut unit_counts: BTreeMap<String, u64> = BTreeMap::new();
        for line in lines {
            for unit in units(line) {
                *unit_counts.entry(unit).or_default() += 1;
            }
        }
        let mut char_counts: BTreeMap<char, u64> = BTreeMap::new();
        for (u, &c) in &unit_counts {
            for ch in u.chars() {
                *char_counts.entry(ch).or_default() += c;
            }
        }
        let alphabet = retained_chars(&char_counts, char_coverage);

        let mut specials: Vec<String> = FIXED_SPECIALS.iter().map(|s| s.to_string()).collect();
        let langs: BTreeSet<&str> = langs.collect();
        specials.extend(langs.iter().map(|l| lang_token_name(l)));
        let minimum = specials.len() + alphabet.len() + 1;
        if vocab_size < minimum {
            return Err(Error::VocabTooSmall {
                requested: vocab_size,
                minimum,
            });
        }

        let mut model = SubwordModel {
            coverage: char_coverage,
            tokens: specials.clone(),
            specials,
            merges: Vec::new(),
            vocab: HashMap::new(),
            merge_rank: HashMap::new(),
        };
        for (i, t) in model.tokens.iter().enumerate() {
            model.vocab.insert(t.clone(), i as u32);
        }
        for ch in &alphabet {
            model.add_token(ch.to_string());
        }

        let mut words: Vec<(Vec<u32>, u64)> = unit_counts
            .iter()
            .map(|(u, &c)| (model.initial_symbols(u), c))
            .collect();

        while model.tokens.len() < vocab_size {
            let mut pair_counts: HashMap<(u32, u32), u64> = HashMap::new();
            for (syms, c) in &words {
                for w in syms.windows(2) {
                    if w[0] != UNK && w[1] != UNK {
                        *pair_counts.entry((w[0], w[1])).or_default() += c;
                    }
                }
            }
            // highest count; ties go to the lexicographically smallest merged string
            let best = pair_counts.into_iter().min_by(|(pa, ca), (pb, cb)| {
                cb.cmp(ca).then_with(|| {
                    let ka = (model.concat(*pa), &model.tokens[pa.0 as usize]);
                    let kb = (model.concat(*pb), &model.tokens[pb.0 as usize]);
                    ka.cmp(&kb)
                })
            });
            let Some((pair, _)) = best else { break };
            let merged = model.concat(pair);
            let new_id = match model.vocab.get(&merged) {
                Some(&id) => id,
                None => model.add_token(merged),
            };
            model.merge_rank.insert(pair, (model.merges.len(), new_id));
            model.merges.push(pair);
            for (syms, _) in words.iter_mut() {
                apply_merge(syms, pair, new_id);
            }
        }
        Ok(model)
    }

    fn add_token(&mut self, s: String) -> u32 {
        let id = self.tokens.len() as u32;
        self.vocab.insert(s.clone(), id);
        self.tokens.push(s);
        id
    }

    fn concat(&self, (a, b): (u32, u32)) -> String {
        let mut s = self.tokens[a as usize].clone();
        s.push_str(&self.tokens[b as usize]);
        s
    }

    fn initial_symbols(&self, unit: &str) -> Vec<u32> {
        let mut buf = [0u8; 4];
        unit.chars()
            .map(|c| *self.vocab.get(c.encode_utf8(&mut buf) as &str).unwrap_or(&UNK))
            .collect()
    }

    fn segment(&self, unit: &str) -> Vec<u32> {
        let mut syms = self.initial_symbols(unit);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|w| self.merge_rank.get(&(w[0], w[1])).map(|&r| ((w[0], w[1]), r)))
                .min_by_key(|(_, (rank, _))| *rank);
            match best {
                Some((pair, (_, id))) => apply_merge(&mut syms, pair, id),
                None => return syms,
            }
        }
    }

    /// Segments `text` by applying merges in learned order within each word.
    pub fn encode(&self, text: &str) -> TokenizedText {
        let mut out = TokenizedText::default();
        for unit in units(text) {
            for (i, id) in self.segment(&unit).into_iter().enumerate() {
                out.push(id, i == 0);
            }
        }
        out
    }

    /// Inverse of [`encode`](Self::encode); specials other than UNK are dropped.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut s = String::new();
        for &id in ids {
            let tok = self.tokens.get(id as usize).ok_or(Error::UnknownId(id))?;
            if id == UNK {
                s.push_str(UNK_SURFACE);
            } else if (id as usize) >= self.specials.len() {
                s.push_str(tok);
            }
        }
        Ok(s.replace(BOUNDARY, " "))
    }

    /// Surface strings of each id (for inspection).
    pub fn pieces(&self, ids: &[u32]) -> Result<Vec<&str>> {
        ids.iter()
            .map(|&id| self.tokens.get(id as usize).map(|s| s.as_str()).ok_or(Error::UnknownId(id)))
            .collect()
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn coverage(&self) -> f64 {
        self.coverage
    }

    pub fn merges(&self) -> Vec<(&str, &str)> {
        self.merges
            .iter()
            .map(|&(a, b)| (self.tokens[a as usize].as_str(), self.tokens[b as usize].as_str()))
            .collect()
    }

    pub fn token_id(&self, s: &str) -> Option<u32> {
        self.vocab.get(s).copied()
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < self.specials.len()
    }

    /// Id of the `<2xx>` token for `lang`.
    pub fn lang_id(&self, lang: &str) -> Result<u32> {
        self.token_id(&lang_token_name(lang))
            .ok_or_else(|| Error::Invalid(format!("no target-language token for `{lang}`")))
    }

    pub fn is_lang_token(&self, id: u32) -> bool {
        let i = id as usize;
        i >= FIXED_SPECIALS.len() && i < self.specials.len()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{HEADER}");
        let _ = writeln!(s, "coverage={}", self.coverage);
        for (i, name) in self.specials.iter().enumerate() {
            let _ = writeln!(s, "special {name} {i}");
        }
        for &(a, b) in &self.merges {
            let _ = writeln!(s, "merge {} {}", self.tokens[a as usize], self.tokens[b as usize]);
        }
        for (i, t) in self.tokens.iter().enumerate().skip(self.specials.len()) {
            let _ = writeln!(s, "token {t} {i}");
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let err = |line: usize, msg: &str| Error::Parse {
            path: "<subword model>".into(),
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h == HEADER => {}
            _ => return Err(err(1, "missing header")),
        }
        let coverage = match lines.next() {
            Some((_, l)) => l
                .strip_prefix("coverage=")
                .and_then(|v| v.parse::<f64>().ok())
                .ok_or_else(|| err(2, "bad coverage line"))?,
            None => return Err(err(2, "missing coverage line")),
        };
        let mut specials: Vec<(u32, String)> = Vec::new();
        let mut merges: Vec<(String, String)> = Vec::new();
        let mut tokens: Vec<(u32, String)> = Vec::new();
        for (i, line) in lines {
            let parts: Vec<&str> = line.split(' ').collect();
            let id = |s: &str| s.parse::<u32>().map_err(|_| err(i + 1, "bad id"));
            match parts.as_slice() {
                ["special", name, n] => specials.push((id(n)?, name.to_string())),
                ["merge", a, b] => merges.push((a.to_string(), b.to_string())),
                ["token", t, n] => tokens.push((id(n)?, t.to_string())),
                [""] => {}
                _ => return Err(err(i + 1, "unrecognized line")),
            }
        }
        let mut all: Vec<(u32, String)> = specials.clone();
        all.extend(tokens);
        all.sort_by_key(|(i, _)| *i);
        if all.iter().enumerate().any(|(i, (id, _))| *id as usize != i) {
            return Err(err(0, "token ids are not contiguous from 0"));
        }
        let tokens: Vec<String> = all.into_iter().map(|(_, t)| t).collect();
        let vocab: HashMap<String, u32> = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        let mut model = SubwordModel {
            coverage,
            specials: specials.into_iter().map(|(_, n)| n).collect(),
            merges: Vec::new(),
            tokens,
            vocab,
            merge_rank: HashMap::new(),
        };
        for (rank, (a, b)) in merges.into_iter().enumerate() {
            let look = |s: &str| model.vocab.get(s).copied().ok_or_else(|| err(0, "merge references unknown token"));
            let pair = (look(&a)?, look(&b)?);
            let merged = look(&format!("{a}{b}"))?;
            model.merge_rank.insert(pair, (rank, merged));
            model.merges.push(pair);
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// NFC-normalized words, every word after the first prefixed with the boundary marker.
fn units(text: &str) -> Vec<String> {
    let norm: String = text.nfc().collect();
    norm.split_whitespace()
        .enumerate()
        .map(|(i, w)| if i == 0 { w.to_string() } else { format!("{BOUNDARY}{w}") })
        .collect()
}

fn retained_chars(counts: &BTreeMap<char, u64>, coverage: f64) -> Vec<char> {
    let total: u64 = counts.values().sum();
    let mut by_freq: Vec<(char, u64)> = counts.iter().map(|(&c, &n)| (c, n)).collect();
    by_freq.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut kept = Vec::new();
    let mut cum = 0u64;
    for (c, n) in by_freq {
        if total > 0 && cum as f64 / total as f64 >= coverage {
            break;
        }
        kept.push(c);
        cum += n;
    }
    if counts.contains_key(&BOUNDARY) && !kept.contains(&BOUNDARY) {
        kept.push(BOUNDARY);
    }
    kept.sort_unstable();
    kept
}

fn apply_merge(syms: &mut Vec<u32>, pair: (u32, u32), id: u32) {
    let mut i = 0;
    let mut out = Vec::with_capacity(syms.len());
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
            out.push(id);
            i += 2;
        } else {
            out.push(syms[i]);
            i += 1;
        }
    }
    *syms = out;
}
