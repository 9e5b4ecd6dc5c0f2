//! Pre-norm transformer encoder–decoder with tied embeddings.
//!
//! The encoder alone (embeddings, encoder stack, final norm) is what gets
//! reused downstream; [`extract_encoder`] cuts it out of a full checkpoint.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AttentionSpec, Graph, Var};
use crate::corpus::{Conditioning, EncodedPair};
use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};
use crate::tokenizer::{BOS, EOS, PAD};

pub const LN_EPS: f64 = 1e-6;

pub type ParamMap<F = f32> = BTreeMap<String, Tensor<F>>;

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub conditioning: Conditioning,
}

impl TransformerConfig {
    /// Desk-scale defaults: 2 layers, 4 heads, 128 / 512 dims, 64 positions, dropout 0.1.
    pub fn desk(vocab_size: usize) -> Self {
        TransformerConfig {
            layers: 2,
            heads: 4,
            model_dim: 128,
            hidden_dim: 512,
            vocab_size,
            max_len: 64,
            dropout: 0.1,
            conditioning: Conditioning::InSource,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.layers, self.heads, self.model_dim, self.hidden_dim, self.vocab_size, self.max_len];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!("all dimensions must be ≥ 1: {self:?}")));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("conditioning", self.conditioning.as_str().to_string()),
            ("dropout", self.dropout.to_string()),
            ("heads", self.heads.to_string()),
            ("hidden_dim", self.hidden_dim.to_string()),
            ("layers", self.layers.to_string()),
            ("max_len", self.max_len.to_string()),
            ("model_dim", self.model_dim.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
        ]
    }

    fn from_map(m: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| m.get(k).ok_or_else(|| Error::Checkpoint(format!("config lacks `{k}`")));
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("config `{k}` is not an integer")))
        };
        let cfg = TransformerConfig {
            layers: num("layers")?,
            heads: num("heads")?,
            model_dim: num("model_dim")?,
            hidden_dim: num("hidden_dim")?,
            vocab_size: num("vocab_size")?,
            max_len: num("max_len")?,
            dropout: get("dropout")?
                .parse()
                .map_err(|_| Error::Checkpoint("config `dropout` is not a number".into()))?,
            conditioning: Conditioning::parse(get("conditioning")?)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Every parameter name with its shape, in a fixed order.
pub fn param_shapes(cfg: &TransformerConfig, encoder_only: bool) -> Vec<(String, Vec<usize>)> {
    let (d, h, v) = (cfg.model_dim, cfg.hidden_dim, cfg.vocab_size);
    let mut out: Vec<(String, Vec<usize>)> = vec![("embed".into(), vec![v, d])];
    let norm = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
        out.push((format!("{p}.g"), vec![d]));
        out.push((format!("{p}.b"), vec![d]));
    };
    let attn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
        // Keys carry no bias: it would shift every score of a query equally.
        for m in ["q", "k", "v", "o"] {
            out.push((format!("{p}.{m}.w"), vec![d, d]));
            if m != "k" {
                out.push((format!("{p}.{m}.b"), vec![d]));
            }
        }
    };
    let ff = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
        out.push((format!("{p}.w1"), vec![d, h]));
        out.push((format!("{p}.b1"), vec![h]));
        out.push((format!("{p}.w2"), vec![h, d]));
        out.push((format!("{p}.b2"), vec![d]));
    };
    for i in 0..cfg.layers {
        norm(&mut out, &format!("enc.{i}.ln1"));
        attn(&mut out, &format!("enc.{i}.self"));
        norm(&mut out, &format!("enc.{i}.ln2"));
        ff(&mut out, &format!("enc.{i}.ff"));
    }
    norm(&mut out, "enc.ln");
    if encoder_only {
        return out;
    }
    for i in 0..cfg.layers {
        norm(&mut out, &format!("dec.{i}.ln1"));
        attn(&mut out, &format!("dec.{i}.self"));
        norm(&mut out, &format!("dec.{i}.ln2"));
        attn(&mut out, &format!("dec.{i}.cross"));
        norm(&mut out, &format!("dec.{i}.ln3"));
        ff(&mut out, &format!("dec.{i}.ff"));
    }
    norm(&mut out, "dec.ln");
    if cfg.conditioning == Conditioning::External {
        out.push(("tok_enc.embed".into(), vec![v, d]));
        norm(&mut out, "tok_enc.ln");
    }
    out
}

/// Whether a parameter belongs to the reusable encoder.
pub fn is_encoder_param(name: &str) -> bool {
    name == "embed" || name.starts_with("enc.")
}

/// Random initialization: N(0, 1/fan_in) weights, unit norm gains, zero biases.
pub fn init_params(cfg: &TransformerConfig, seed: u64) -> Result<ParamMap> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.model_dim as f64;
    let mut out = ParamMap::new();
    for (name, dims) in param_shapes(cfg, false) {
        let t = if name.ends_with(".g") {
            Tensor::full(&dims, 1.0)
        } else if dims.len() == 1 {
            Tensor::zeros(&dims)
        } else if name.ends_with("embed") {
            Tensor::randn(&dims, 1.0 / d.sqrt(), &mut rng)
        } else {
            Tensor::randn(&dims, 1.0 / (dims[0] as f64).sqrt(), &mut rng)
        };
        out.insert(name, t);
    }
    Ok(out)
}

pub fn param_count<F: Float>(params: &ParamMap<F>) -> usize {
    params.values().map(|t| t.len()).sum()
}

pub fn cast_params<F: Float, G: Float>(params: &ParamMap<F>) -> ParamMap<G> {
    params.iter().map(|(k, v)| (k.clone(), v.cast())).collect()
}

/// Parameters placed on a graph.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Puts every parameter on `g`; those accepted by `trainable` receive gradients.
    pub fn new<F: Float>(g: &mut Graph<F>, params: &ParamMap<F>, trainable: impl Fn(&str) -> bool) -> Self {
        let vars = params
            .iter()
            .map(|(k, t)| {
                let v = if trainable(k) {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Wraps variables that are already on a graph.
    pub fn from_vars(names: impl IntoIterator<Item = String>, vars: &[Var]) -> Self {
        Bound {
            vars: names.into_iter().zip(vars.iter().copied()).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Right-padded id sequences.
#[derive(Clone, Debug)]
pub struct SeqBatch {
    pub ids: Vec<u32>,
    pub batch: usize,
    pub len: usize,
    pub valid: Vec<bool>,
}

impl SeqBatch {
    pub fn new(seqs: &[&[u32]]) -> Self {
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0).max(1);
        let mut ids = Vec::with_capacity(seqs.len() * len);
        let mut valid = Vec::with_capacity(seqs.len() * len);
        for s in seqs {
            ids.extend_from_slice(s);
            valid.extend(std::iter::repeat(true).take(s.len()));
            ids.extend(std::iter::repeat(PAD).take(len - s.len()));
            valid.extend(std::iter::repeat(false).take(len - s.len()));
        }
        SeqBatch {
            ids,
            batch: seqs.len(),
            len,
            valid,
        }
    }

    /// One sequence with an explicit validity mask.
    pub fn single(ids: &[u32], valid: &[bool]) -> Self {
        SeqBatch {
            ids: ids.to_vec(),
            batch: 1,
            len: ids.len(),
            valid: valid.to_vec(),
        }
    }

    fn indices(&self) -> Vec<usize> {
        self.ids.iter().map(|&i| i as usize).collect()
    }
}

/// Sinusoidal position table `[len, dim]`.
pub fn positions<F: Float>(len: usize, dim: usize) -> Tensor<F> {
    Tensor::from_fn(&[len, dim], |i| {
        let (pos, j) = (i / dim, i % dim);
        let rate = 1.0 / 10000f64.powf((2 * (j / 2)) as f64 / dim as f64);
        let a = pos as f64 * rate;
        F::of(if j % 2 == 0 { a.sin() } else { a.cos() })
    })
}

/// Forward-pass context: config, bound parameters and an optional dropout generator.
pub struct Forward<'a> {
    pub cfg: &'a TransformerConfig,
    pub p: &'a Bound,
    pub dropout: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Forward<'a> {
    pub fn new(cfg: &'a TransformerConfig, p: &'a Bound) -> Self {
        Forward { cfg, p, dropout: None }
    }

    pub fn with_dropout(cfg: &'a TransformerConfig, p: &'a Bound, rng: &'a mut ChaCha8Rng) -> Self {
        Forward {
            cfg,
            p,
            dropout: Some(rng),
        }
    }

    fn drop<F: Float>(&mut self, g: &mut Graph<F>, x: Var) -> Result<Var> {
        let rate = self.cfg.dropout;
        match self.dropout.as_deref_mut() {
            Some(rng) if rate > 0.0 => {
                let keep = F::of(1.0 / (1.0 - rate));
                let mask = (0..g.value(x).len())
                    .map(|_| if rng.gen::<f64>() < rate { F::zero() } else { keep })
                    .collect();
                g.mul_const(x, mask)
            }
            _ => Ok(x),
        }
    }

    fn norm<F: Float>(&self, g: &mut Graph<F>, x: Var, p: &str) -> Result<Var> {
        let (gain, bias) = (self.p.get(&format!("{p}.g"))?, self.p.get(&format!("{p}.b"))?);
        g.layer_norm(x, gain, bias, LN_EPS)
    }

    fn lin<F: Float>(&self, g: &mut Graph<F>, x: Var, p: &str) -> Result<Var> {
        let (w, b) = (self.p.get(&format!("{p}.w"))?, self.p.get(&format!("{p}.b"))?);
        g.linear(x, w, b)
    }

    #[allow(clippy::too_many_arguments)]
    fn attend<F: Float>(
        &self,
        g: &mut Graph<F>,
        x: Var,
        memory: Var,
        p: &str,
        spec: AttentionSpec,
    ) -> Result<Var> {
        let q = self.lin(g, x, &format!("{p}.q"))?;
        let kw = self.p.get(&format!("{p}.k.w"))?;
        let k = g.matmul(memory, kw)?;
        let v = self.lin(g, memory, &format!("{p}.v"))?;
        let a = g.attention(q, k, v, spec)?;
        self.lin(g, a, &format!("{p}.o"))
    }

    fn feed_forward<F: Float>(&self, g: &mut Graph<F>, x: Var, p: &str) -> Result<Var> {
        let (w1, b1) = (self.p.get(&format!("{p}.w1"))?, self.p.get(&format!("{p}.b1"))?);
        let (w2, b2) = (self.p.get(&format!("{p}.w2"))?, self.p.get(&format!("{p}.b2"))?);
        let h = g.linear(x, w1, b1)?;
        let h = g.relu(h);
        g.linear(h, w2, b2)
    }

    fn embed<F: Float>(&mut self, g: &mut Graph<F>, seq: &SeqBatch) -> Result<Var> {
        let d = self.cfg.model_dim;
        if seq.len > self.cfg.max_len {
            return Err(Error::Invalid(format!(
                "sequence of {} tokens exceeds max_len {}",
                seq.len, self.cfg.max_len
            )));
        }
        if let Some(&bad) = seq.ids.iter().find(|&&i| i as usize >= self.cfg.vocab_size) {
            return Err(Error::UnknownId(bad));
        }
        let table = self.p.get("embed")?;
        let e = g.gather_rows(table, &seq.indices())?;
        let e = g.scale(e, F::of((d as f64).sqrt()));
        let pos = positions::<F>(seq.len, d);
        let mut tiled = Vec::with_capacity(seq.batch * seq.len * d);
        for _ in 0..seq.batch {
            tiled.extend_from_slice(pos.data());
        }
        let pos = g.constant(Tensor::new(vec![seq.batch * seq.len, d], tiled)?);
        let x = g.add(e, pos)?;
        self.drop(g, x)
    }

    /// Encoder stack over a padded batch; returns `[batch * len, model_dim]`.
    pub fn encode<F: Float>(&mut self, g: &mut Graph<F>, src: &SeqBatch) -> Result<Var> {
        let mut x = self.embed(g, src)?;
        for i in 0..self.cfg.layers {
            let spec = AttentionSpec {
                batch: src.batch,
                heads: self.cfg.heads,
                q_len: src.len,
                k_len: src.len,
                causal: false,
                key_valid: src.valid.clone(),
            };
            let h = self.norm(g, x, &format!("enc.{i}.ln1"))?;
            let a = self.attend(g, h, h, &format!("enc.{i}.self"), spec)?;
            let a = self.drop(g, a)?;
            x = g.add(x, a)?;
            let h = self.norm(g, x, &format!("enc.{i}.ln2"))?;
            let f = self.feed_forward(g, h, &format!("enc.{i}.ff"))?;
            let f = self.drop(g, f)?;
            x = g.add(x, f)?;
        }
        self.norm(g, x, "enc.ln")
    }

    /// One-position encoding of each `<2xx>` id: `[batch, model_dim]`.
    pub fn encode_lang_tokens<F: Float>(&mut self, g: &mut Graph<F>, lang_tokens: &[u32]) -> Result<Var> {
        if self.cfg.conditioning != Conditioning::External {
            return Err(Error::Invalid(
                "separate target-token encoding requires external conditioning".into(),
            ));
        }
        let table = self.p.get("tok_enc.embed")?;
        let ids: Vec<usize> = lang_tokens.iter().map(|&i| i as usize).collect();
        let e = g.gather_rows(table, &ids)?;
        let e = g.scale(e, F::of((self.cfg.model_dim as f64).sqrt()));
        self.norm(g, e, "tok_enc.ln")
    }

    /// What the decoder's cross-attention reads: the source encoding, followed
    /// by the target-token encoding in external mode.
    pub fn memory<F: Float>(
        &mut self,
        g: &mut Graph<F>,
        src: &SeqBatch,
        lang_tokens: &[u32],
    ) -> Result<Memory> {
        let enc = self.encode(g, src)?;
        match self.cfg.conditioning {
            Conditioning::InSource => Ok(Memory {
                var: enc,
                len: src.len,
                valid: src.valid.clone(),
            }),
            Conditioning::External => {
                let tok = self.encode_lang_tokens(g, lang_tokens)?;
                let all = g.concat_rows(&[enc, tok])?;
                let (b, l) = (src.batch, src.len);
                let mut idx = Vec::with_capacity(b * (l + 1));
                let mut valid = Vec::with_capacity(b * (l + 1));
                for bi in 0..b {
                    for j in 0..l {
                        idx.push(bi * l + j);
                        valid.push(src.valid[bi * l + j]);
                    }
                    idx.push(b * l + bi);
                    valid.push(true);
                }
                Ok(Memory {
                    var: g.gather_rows(all, &idx)?,
                    len: l + 1,
                    valid,
                })
            }
        }
    }

    /// Decoder logits `[batch * tgt_len, vocab]`.
    pub fn decode<F: Float>(&mut self, g: &mut Graph<F>, memory: &Memory, tgt: &SeqBatch) -> Result<Var> {
        let mut x = self.embed(g, tgt)?;
        for i in 0..self.cfg.layers {
            let self_spec = AttentionSpec {
                batch: tgt.batch,
                heads: self.cfg.heads,
                q_len: tgt.len,
                k_len: tgt.len,
                causal: true,
                key_valid: tgt.valid.clone(),
            };
            let h = self.norm(g, x, &format!("dec.{i}.ln1"))?;
            let a = self.attend(g, h, h, &format!("dec.{i}.self"), self_spec)?;
            let a = self.drop(g, a)?;
            x = g.add(x, a)?;

            let cross_spec = AttentionSpec {
                batch: tgt.batch,
                heads: self.cfg.heads,
                q_len: tgt.len,
                k_len: memory.len,
                causal: false,
                key_valid: memory.valid.clone(),
            };
            let h = self.norm(g, x, &format!("dec.{i}.ln2"))?;
            let a = self.attend(g, h, memory.var, &format!("dec.{i}.cross"), cross_spec)?;
            let a = self.drop(g, a)?;
            x = g.add(x, a)?;

            let h = self.norm(g, x, &format!("dec.{i}.ln3"))?;
            let f = self.feed_forward(g, h, &format!("dec.{i}.ff"))?;
            let f = self.drop(g, f)?;
            x = g.add(x, f)?;
        }
        let h = self.norm(g, x, "dec.ln")?;
        let table = self.p.get("embed")?;
        g.matmul_t(h, false, table, true)
    }

    /// Mean token NLL of a batch of framed pairs (teacher forcing).
    pub fn translation_loss<F: Float>(&mut self, g: &mut Graph<F>, batch: &[&EncodedPair]) -> Result<Var> {
        let srcs: Vec<&[u32]> = batch.iter().map(|p| p.src.as_slice()).collect();
        let ins: Vec<&[u32]> = batch.iter().map(|p| &p.tgt[..p.tgt.len() - 1]).collect();
        let outs: Vec<&[u32]> = batch.iter().map(|p| &p.tgt[1..]).collect();
        let langs: Vec<u32> = batch.iter().map(|p| p.lang_token).collect();
        let src = SeqBatch::new(&srcs);
        let tgt_in = SeqBatch::new(&ins);
        let tgt_out = SeqBatch::new(&outs);
        let memory = self.memory(g, &src, &langs)?;
        let logits = self.decode(g, &memory, &tgt_in)?;
        let targets: Vec<usize> = tgt_out.ids.iter().map(|&i| i as usize).collect();
        g.cross_entropy(logits, &targets, PAD as usize)
    }
}

/// Cross-attention keys/values and their validity flags.
#[derive(Clone, Debug)]
pub struct Memory {
    pub var: Var,
    /// Key positions per batch item.
    pub len: usize,
    pub valid: Vec<bool>,
}

/// Per-token encoder representations of one sequence.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub reps: Tensor<f32>,
    pub mask: Vec<bool>,
}

/// Runs the encoder on one sequence; pad positions (`mask` false) are hidden from attention.
pub fn encode(cfg: &TransformerConfig, params: &ParamMap, ids: &[u32], mask: &[bool]) -> Result<EncoderOutput> {
    if ids.len() != mask.len() {
        return Err(Error::Shape(format!("{} ids with {} mask flags", ids.len(), mask.len())));
    }
    if ids.is_empty() {
        return Err(Error::Invalid("cannot encode an empty sequence".into()));
    }
    let mut g = Graph::<f32>::new();
    let p = Bound::new(&mut g, params, |_| false);
    let out = Forward::new(cfg, &p).encode(&mut g, &SeqBatch::single(ids, mask))?;
    Ok(EncoderOutput {
        reps: g.value(out).clone(),
        mask: mask.to_vec(),
    })
}

/// Decoder logits for every prefix position given an encoder output.
///
/// In external mode `lang_token` supplies the separately encoded `<2xx>`.
pub fn decode_logits(
    cfg: &TransformerConfig,
    params: &ParamMap,
    encoder_out: &EncoderOutput,
    lang_token: Option<u32>,
    prefix: &[u32],
) -> Result<Tensor<f32>> {
    if prefix.first() != Some(&BOS) {
        return Err(Error::Invalid("decoder prefix must start with BOS".into()));
    }
    let mut g = Graph::<f32>::new();
    let p = Bound::new(&mut g, params, |_| false);
    let mut fwd = Forward::new(cfg, &p);
    let enc = g.constant(encoder_out.reps.clone());
    let memory = match cfg.conditioning {
        Conditioning::InSource => Memory {
            var: enc,
            len: encoder_out.mask.len(),
            valid: encoder_out.mask.clone(),
        },
        Conditioning::External => {
            let lt = lang_token.ok_or_else(|| Error::Invalid("external conditioning needs a <2xx> id".into()))?;
            let tok = fwd.encode_lang_tokens(&mut g, &[lt])?;
            let mut valid = encoder_out.mask.clone();
            valid.push(true);
            Memory {
                var: g.concat_rows(&[enc, tok])?,
                len: valid.len(),
                valid,
            }
        }
    };
    let tgt = SeqBatch::new(&[prefix]);
    let logits = fwd.decode(&mut g, &memory, &tgt)?;
    Ok(g.value(logits).clone())
}

/// Greedy decoding of a batch of framed sources; outputs exclude BOS/EOS.
pub fn translate_greedy(
    cfg: &TransformerConfig,
    params: &ParamMap,
    sources: &[&[u32]],
    lang_tokens: &[u32],
    max_out: usize,
) -> Result<Vec<Vec<u32>>> {
    if sources.is_empty() {
        return Ok(Vec::new());
    }
    let mut g = Graph::<f32>::new();
    let p = Bound::new(&mut g, params, |_| false);
    let mut fwd = Forward::new(cfg, &p);
    let src = SeqBatch::new(sources);
    let memory = fwd.memory(&mut g, &src, lang_tokens)?;
    let b = sources.len();
    let mut prefixes: Vec<Vec<u32>> = vec![vec![BOS]; b];
    let mut done = vec![false; b];
    let limit = max_out.min(cfg.max_len.saturating_sub(1));
    for _ in 0..limit {
        if done.iter().all(|&d| d) {
            break;
        }
        let refs: Vec<&[u32]> = prefixes.iter().map(|p| p.as_slice()).collect();
        let tgt = SeqBatch::new(&refs);
        let logits = fwd.decode(&mut g, &memory, &tgt)?;
        let lv = g.value(logits).clone();
        for (bi, prefix) in prefixes.iter_mut().enumerate() {
            if done[bi] {
                continue;
            }
            let row = lv.row(bi * tgt.len + prefix.len() - 1);
            let next = argmax(row) as u32;
            if next == EOS {
                done[bi] = true;
            } else {
                prefix.push(next);
            }
        }
    }
    Ok(prefixes.into_iter().map(|p| p[1..].to_vec()).collect())
}

pub fn argmax<F: Float>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// checkpoints

const MAGIC: &[u8; 4] = b"MMTE";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Full,
    Encoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TransformerConfig,
    pub kind: CheckpointKind,
    pub step: u64,
    pub params: ParamMap,
    /// Optimizer accumulators, stored after the parameters.
    pub optimizer: Option<ParamMap>,
}

impl Checkpoint {
    pub fn new(config: TransformerConfig, params: ParamMap) -> Self {
        Checkpoint {
            config,
            kind: CheckpointKind::Full,
            step: 0,
            params,
            optimizer: None,
        }
    }

    /// Canonical `key=value` lines, sorted by key.
    pub fn config_text(&self) -> String {
        let mut entries = self.config.entries();
        entries.push((
            "kind",
            match self.kind {
                CheckpointKind::Full => "full",
                CheckpointKind::Encoder => "encoder",
            }
            .into(),
        ));
        entries.push(("step", self.step.to_string()));
        entries.sort();
        entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config_text();
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        write_tensors(&mut out, &self.params)?;
        if let Some(opt) = &self.optimizer {
            write_tensors(&mut out, opt)?;
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n = read_u32(&mut r)? as usize;
        let mut cfg = vec![0u8; n];
        r.read_exact(&mut cfg).map_err(truncated)?;
        let cfg = String::from_utf8(cfg).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let mut map = BTreeMap::new();
        for line in cfg.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad config line `{line}`")))?;
            map.insert(k.to_string(), v.to_string());
        }
        let config = TransformerConfig::from_map(&map)?;
        let kind = match map.get("kind").map(|s| s.as_str()) {
            Some("full") => CheckpointKind::Full,
            Some("encoder") => CheckpointKind::Encoder,
            other => return Err(Error::Checkpoint(format!("unknown checkpoint kind {other:?}"))),
        };
        let step = map
            .get("step")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint("missing step".into()))?;
        let params = read_tensors(&mut r)?;
        let optimizer = if r.is_empty() {
            None
        } else {
            Some(read_tensors(&mut r)?)
        };
        if !r.is_empty() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            config,
            kind,
            step,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path)?;
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn param_count(&self) -> usize {
        param_count(&self.params)
    }
}

fn truncated(_: std::io::Error) -> Error {
    Error::Checkpoint("file is truncated".into())
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn write_tensors(out: &mut Vec<u8>, tensors: &ParamMap) -> Result<()> {
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        let nlen = u16::try_from(nb.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        out.extend_from_slice(&nlen.to_le_bytes());
        out.extend_from_slice(nb);
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint("rank too large".into()))?;
        out.push(rank);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(())
}

fn read_tensors(r: &mut &[u8]) -> Result<ParamMap> {
    let count = read_u32(r)?;
    let mut out = ParamMap::new();
    for _ in 0..count {
        let mut b2 = [0u8; 2];
        r.read_exact(&mut b2).map_err(truncated)?;
        let mut name = vec![0u8; u16::from_le_bytes(b2) as usize];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank).map_err(truncated)?;
        let dims: Vec<usize> = (0..rank[0]).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<_>>()?;
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b4 = [0u8; 4];
        for _ in 0..n {
            r.read_exact(&mut b4).map_err(truncated)?;
            data.push(f32::from_le_bytes(b4));
        }
        if out.insert(name.clone(), Tensor::new(dims, data)?).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
    }
    Ok(out)
}

/// The reusable encoder: embeddings, encoder stack and final norm.
pub fn extract_encoder(ckpt: &Checkpoint) -> Result<Checkpoint> {
    let mut params = ParamMap::new();
    for (name, shape) in param_shapes(&ckpt.config, true) {
        let t = ckpt
            .params
            .get(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing encoder tensor `{name}`")))?;
        if t.dims() != shape.as_slice() {
            return Err(Error::Checkpoint(format!("`{name}` has shape {:?}, expected {shape:?}", t.dims())));
        }
        params.insert(name, t.clone());
    }
    Ok(Checkpoint {
        config: ckpt.config.clone(),
        kind: CheckpointKind::Encoder,
        step: ckpt.step,
        params,
        optimizer: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(cond: Conditioning) -> TransformerConfig {
        TransformerConfig {
            layers: 1,
            heads: 2,
            model_dim: 8,
            hidden_dim: 16,
            vocab_size: 20,
            max_len: 12,
            dropout: 0.0,
            conditioning: cond,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(Conditioning::InSource);
        c.heads = 3;
        assert!(c.validate().is_err());
        c.heads = 2;
        c.layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn encode_shape_and_overlong_error() {
        let cfg = tiny(Conditioning::InSource);
        let p = init_params(&cfg, 1).unwrap();
        let out = encode(&cfg, &p, &[5, 6, 7], &[true; 3]).unwrap();
        assert_eq!(out.reps.dims(), &[3, 8]);
        let long = vec![5u32; 13];
        assert!(encode(&cfg, &p, &long, &[true; 13]).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let cfg = tiny(Conditioning::External);
        let mut ck = Checkpoint::new(cfg.clone(), init_params(&cfg, 3).unwrap());
        ck.step = 42;
        let mut opt = ParamMap::new();
        opt.insert("m/embed".into(), Tensor::full(&[2, 2], 0.5));
        ck.optimizer = Some(opt);
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"MMTE");
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn external_mode_has_extra_parameters() {
        let a = init_params(&tiny(Conditioning::InSource), 0).unwrap();
        let b = init_params(&tiny(Conditioning::External), 0).unwrap();
        assert!(param_count(&b) > param_count(&a));
        assert!(b.contains_key("tok_enc.embed"));
    }

    #[test]
    fn lang_token_encoding_rejected_in_source_mode() {
        let cfg = tiny(Conditioning::InSource);
        let p = init_params(&cfg, 0).unwrap();
        let mut g = Graph::<f32>::new();
        let b = Bound::new(&mut g, &p, |_| false);
        assert!(Forward::new(&cfg, &b).encode_lang_tokens(&mut g, &[5]).is_err());
    }
}
