//! Corpus BLEU, accuracy, token F1, IOB span F1 and the metric report format.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use crate::error::{Error, Result};

/// Corpus-level BLEU-4 in [0, 100], unsmoothed, over whitespace tokens.
/// An all-empty hypothesis side scores 0.
pub fn bleu<S: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<S>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::Invalid(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Invalid("BLEU needs at least one sentence pair".into()));
    }
    let mut matched = [0u64; 4];
    let mut total = [0u64; 4];
    let (mut hyp_len, mut ref_len) = (0u64, 0u64);
    for (h, r) in hypotheses.iter().zip(references) {
        let h: Vec<&str> = h.iter().map(|s| s.as_ref()).collect();
        let r: Vec<&str> = r.iter().map(|s| s.as_ref()).collect();
        hyp_len += h.len() as u64;
        ref_len += r.len() as u64;
        for n in 1..=4 {
            let rc = ngram_counts(&r, n);
            for (g, c) in ngram_counts(&h, n) {
                matched[n - 1] += c.min(rc.get(&g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    // Orders the hypotheses are too short to contain are left out of the mean;
    // an order with n-grams but no matches still scores 0.
    let orders: Vec<(u64, u64)> = matched.into_iter().zip(total).filter(|&(_, t)| t > 0).collect();
    if orders.is_empty() || orders.iter().any(|&(m, _)| m == 0) {
        return Ok(0.0);
    }
    let log_p: f64 = orders.iter().map(|&(m, t)| (m as f64 / t as f64).ln()).sum::<f64>() / orders.len() as f64;
    let bp = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * bp * log_p.exp())
}

/// BLEU over whitespace-split sentences.
pub fn bleu_text<S: AsRef<str>>(hypotheses: &[S], references: &[S]) -> Result<f64> {
    let split = |v: &[S]| -> Vec<Vec<String>> {
        v.iter()
            .map(|s| s.as_ref().split_whitespace().map(str::to_string).collect())
            .collect()
    };
    bleu(&split(hypotheses), &split(references))
}

fn ngram_counts<'a>(tokens: &[&'a str], n: usize) -> HashMap<Vec<&'a str>, u64> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    out
}

pub fn accuracy<T: PartialEq>(preds: &[T], golds: &[T]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::Invalid(format!("{} predictions for {} golds", preds.len(), golds.len())));
    }
    if preds.is_empty() {
        return Err(Error::Invalid("accuracy of an empty set".into()));
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Micro-averaged F1 over aligned tag sequences.
pub fn token_f1<S: AsRef<str>>(preds: &[Vec<S>], golds: &[Vec<S>]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::Invalid(format!("{} sequences for {} golds", preds.len(), golds.len())));
    }
    let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
    for (i, (p, g)) in preds.iter().zip(golds).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Invalid(format!(
                "sequence {i}: {} predicted tags for {} gold tags",
                p.len(),
                g.len()
            )));
        }
        for (a, b) in p.iter().zip(g) {
            if a.as_ref() == b.as_ref() {
                tp += 1;
            } else {
                fp += 1;
                fn_ += 1;
            }
        }
    }
    if tp + fp + fn_ == 0 {
        return Err(Error::Invalid("token F1 of an empty set".into()));
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub label: String,
    pub start: usize,
    /// Inclusive.
    pub end: usize,
}

/// Spans of an IOB sequence. An `I-X` that does not continue an `X` span opens a new one.
pub fn extract_spans<S: AsRef<str>>(tags: &[S]) -> Result<Vec<Span>> {
    let mut spans = Vec::new();
    let mut open: Option<Span> = None;
    for (i, t) in tags.iter().enumerate() {
        let t = t.as_ref();
        let (kind, label) = if t == "O" {
            ('O', "")
        } else if let Some(l) = t.strip_prefix("B-") {
            ('B', l)
        } else if let Some(l) = t.strip_prefix("I-") {
            ('I', l)
        } else {
            return Err(Error::Invalid(format!("unknown tag `{t}` at position {i}")));
        };
        if kind != 'O' && label.is_empty() {
            return Err(Error::Invalid(format!("tag `{t}` at position {i} has no label")));
        }
        match (kind, open.as_mut()) {
            ('I', Some(s)) if s.label == label => s.end = i,
            ('O', _) => spans.extend(open.take()),
            _ => {
                spans.extend(open.take());
                open = Some(Span {
                    label: label.to_string(),
                    start: i,
                    end: i,
                });
            }
        }
    }
    spans.extend(open);
    Ok(spans)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpanScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Exact-match span precision, recall and F1 over a set of sentences.
pub fn span_f1<S: AsRef<str>>(preds: &[Vec<S>], golds: &[Vec<S>]) -> Result<SpanScores> {
    if preds.len() != golds.len() {
        return Err(Error::Invalid(format!("{} sequences for {} golds", preds.len(), golds.len())));
    }
    let (mut tp, mut n_pred, mut n_gold) = (0usize, 0usize, 0usize);
    for (i, (p, g)) in preds.iter().zip(golds).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Invalid(format!("sequence {i}: {} tags vs {} gold tags", p.len(), g.len())));
        }
        let ps = extract_spans(p)?;
        let gs = extract_spans(g)?;
        n_pred += ps.len();
        n_gold += gs.len();
        tp += ps.iter().filter(|s| gs.contains(s)).count();
    }
    let precision = if n_pred == 0 { 0.0 } else { tp as f64 / n_pred as f64 };
    let recall = if n_gold == 0 { 0.0 } else { tp as f64 / n_gold as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(SpanScores { precision, recall, f1 })
}

/// Per-language values of one metric for one run.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub task: String,
    pub metric: String,
    /// `None` for a mean over seeds (printed as `seed=all`).
    pub seed: Option<u64>,
    pub step: u64,
    pub config_hash: String,
    pub values: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn new(task: &str, metric: &str, seed: Option<u64>, step: u64, config_hash: &str) -> Self {
        MetricReport {
            task: task.to_string(),
            metric: metric.to_string(),
            seed,
            step,
            config_hash: config_hash.to_string(),
            values: BTreeMap::new(),
        }
    }

    /// Unweighted mean over languages.
    pub fn average(&self) -> f64 {
        if self.values.is_empty() {
            return 0.0;
        }
        self.values.values().sum::<f64>() / self.values.len() as f64
    }

    /// Parses the output of `Display`; the `avg` row is recomputed, not read.
    pub fn parse(text: &str) -> Result<Vec<MetricReport>> {
        let mut out: Vec<MetricReport> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut f = BTreeMap::new();
            for part in line.split_whitespace() {
                let (k, v) = part
                    .split_once('=')
                    .ok_or_else(|| Error::Invalid(format!("report line {}: `{part}` is not key=value", n + 1)))?;
                f.insert(k, v);
            }
            let get = |k: &str| {
                f.get(k)
                    .copied()
                    .ok_or_else(|| Error::Invalid(format!("report line {} lacks `{k}`", n + 1)))
            };
            let num = |k: &str| -> Result<u64> {
                get(k)?
                    .parse()
                    .map_err(|_| Error::Invalid(format!("report line {}: bad `{k}`", n + 1)))
            };
            let (task, metric, config) = (get("task")?, get("metric")?, get("config")?);
            let seed = match get("seed")? {
                "all" => None,
                _ => Some(num("seed")?),
            };
            let step = num("step")?;
            let lang = get("lang")?;
            let value: f64 = get("value")?
                .parse()
                .map_err(|_| Error::Invalid(format!("report line {}: bad value", n + 1)))?;
            let same = out.last().is_some_and(|r| {
                r.task == task && r.metric == metric && r.seed == seed && r.step == step && r.config_hash == config
            });
            if !same {
                out.push(MetricReport::new(task, metric, seed, step, config));
            }
            if lang != "avg" {
                out.last_mut().expect("pushed").values.insert(lang.to_string(), value);
            }
        }
        Ok(out)
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let row = |f: &mut fmt::Formatter<'_>, lang: &str, v: f64| {
            writeln!(
                f,
                "task={} lang={} metric={} value={:.6} seed={} step={} config={}",
                self.task,
                lang,
                self.metric,
                v,
                self.seed.map_or_else(|| "all".to_string(), |s| s.to_string()),
                self.step,
                self.config_hash
            )
        };
        for (lang, &v) in &self.values {
            row(f, lang, v)?;
        }
        row(f, "avg", self.average())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu(&[w("a b c d")], &[w("a b c d")]).unwrap(), 100.0);
        assert_eq!(bleu(&[w("a b c d")], &[w("e f g h")]).unwrap(), 0.0);
        let b = bleu(&[w("a b c d")], &[w("a b c d e")]).unwrap();
        assert!((b - 100.0 * (-0.25f64).exp()).abs() < 1e-9);
        assert!(bleu::<String>(&[], &[]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(accuracy::<u8>(&[], &[]).is_err());
    }

    #[test]
    fn spans_follow_conll_convention() {
        let s = extract_spans(&["I-PER", "I-PER", "O", "B-LOC", "I-ORG"]).unwrap();
        assert_eq!(
            s,
            vec![
                Span { label: "PER".into(), start: 0, end: 1 },
                Span { label: "LOC".into(), start: 3, end: 3 },
                Span { label: "ORG".into(), start: 4, end: 4 },
            ]
        );
        assert!(extract_spans(&["X-PER"]).is_err());
    }

    #[test]
    fn span_f1_example() {
        let gold = vec![w("B-PER I-PER O B-LOC O")];
        let pred = vec![w("B-PER I-PER O O B-LOC")];
        let s = span_f1(&pred, &gold).unwrap();
        assert_eq!((s.precision, s.recall, s.f1), (0.5, 0.5, 0.5));
        assert_eq!(span_f1(&[w("O O O O O")], &gold).unwrap().f1, 0.0);
    }

    #[test]
    fn report_round_trips() {
        let mut r = MetricReport::new("tag", "f1", Some(3), 100, "abc123");
        r.values.insert("en".into(), 0.5);
        r.values.insert("xa".into(), 0.25);
        let text = r.to_string();
        assert!(text.ends_with("task=tag lang=avg metric=f1 value=0.375000 seed=3 step=100 config=abc123\n"));
        let mut mean = r.clone();
        mean.seed = None;
        let both = format!("{r}{mean}");
        assert!(both.contains("seed=all"));
        assert_eq!(MetricReport::parse(&both).unwrap(), vec![r, mean]);
    }
}
