use std::collections::BTreeMap;

use mmte::corpus::{generate_synthetic, Conditioning, Label, SyntheticLanguageSpec, TaskExample};
use mmte::gradcheck::{finite_difference_check, CheckOptions};
use mmte::model::{cast_params, extract_encoder, init_params, Bound, Checkpoint, Forward, SeqBatch, TransformerConfig};
use mmte::optimizer::Schedule;
use mmte::tokenizer::{SubwordModel, TokenizedText, EOS, PAD};
use mmte::transfer::{
    classify, finetune, head_logits, init_head, prepare, tag, label_set, TaskKind, TaskSpec, TransferMode,
};
use mmte::{Graph, Tensor};
use sha2::{Digest, Sha256};

fn config(vocab: usize) -> TransformerConfig {
    TransformerConfig {
        layers: 1,
        heads: 2,
        model_dim: 32,
        hidden_dim: 64,
        vocab_size: vocab,
        max_len: 24,
        dropout: 0.0,
        conditioning: Conditioning::InSource,
    }
}

struct Fixture {
    tok: SubwordModel,
    encoder: Checkpoint,
    tagging: Vec<TaskExample>,
    classification: Vec<TaskExample>,
}

fn fixture() -> Fixture {
    let mut spec = SyntheticLanguageSpec::with_languages(2);
    spec.task_train = 40;
    spec.task_dev = 10;
    spec.task_test = 10;
    let data = generate_synthetic(&spec, 50).unwrap();
    let lines: Vec<&str> = data.corpora.iter().flat_map(|c| c.examples.iter().flat_map(|(a, b)| [a.as_str(), b.as_str()])).collect();
    let tok = SubwordModel::train(lines.into_iter(), ["en", "xa", "xb"].into_iter(), 400, 1.0).unwrap();
    let cfg = config(tok.vocab_size());
    let full = Checkpoint::new(cfg.clone(), init_params(&cfg, 3).unwrap());
    Fixture {
        tok,
        encoder: extract_encoder(&full).unwrap(),
        tagging: data.tagging.train,
        classification: data.classification.train,
    }
}

fn digest(ck: &Checkpoint) -> Vec<u8> {
    Sha256::digest(ck.to_bytes().unwrap()).to_vec()
}

#[test]
fn single_token_pooling_is_identity_of_pre_pool() {
    let f = fixture();
    let head = init_head(TaskKind::Classify, 32, 64, 3, 1);
    let a = classify(&f.encoder, &head, &[9]).unwrap();
    let b = classify(&f.encoder, &head, &[9, PAD, PAD]).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.dims(), &[3]);
    assert!(matches!(classify(&f.encoder, &head, &[PAD, PAD]), Err(mmte::Error::AllPad)));
}

#[test]
fn padding_never_changes_logits() {
    let f = fixture();
    let head = init_head(TaskKind::Classify, 32, 64, 4, 2);
    let ids = f.tok.encode("x").ids.into_iter().chain([12, 13, EOS]).collect::<Vec<_>>();
    let base = classify(&f.encoder, &head, &ids).unwrap();
    for pads in 1..4 {
        let mut padded = ids.clone();
        padded.extend(std::iter::repeat(PAD).take(pads));
        assert_eq!(classify(&f.encoder, &head, &padded).unwrap(), base);
    }
}

#[test]
fn tagging_reads_first_subword_of_each_word() {
    let f = fixture();
    let head = init_head(TaskKind::Tag, 32, 64, 4, 3);
    let t = TokenizedText {
        ids: vec![10, 11, 12, 13, EOS],
        first_subword_mask: vec![true, true, false, true, false],
    };
    let logits = tag(&f.encoder, &head, &t).unwrap();
    assert_eq!(logits.dims(), &[3, 4]);
    // Same ids, different split of the middle word: word 0's read position is unchanged.
    let t2 = TokenizedText {
        ids: vec![10, 11, 12, 13, EOS],
        first_subword_mask: vec![true, true, true, false, false],
    };
    let l2 = tag(&f.encoder, &head, &t2).unwrap();
    assert_eq!(logits.row(0), l2.row(0));
    assert_eq!(logits.row(1), l2.row(1));
    assert_eq!(tag(&f.encoder, &head, &t).unwrap(), logits);
    let bad = TokenizedText {
        ids: vec![10, 11],
        first_subword_mask: vec![true],
    };
    assert!(tag(&f.encoder, &head, &bad).is_err());
}

fn quick_spec(kind: TaskKind, mode: TransferMode, steps: u64) -> TaskSpec {
    let mut s = TaskSpec::new("t", kind);
    s.mode = mode;
    s.steps = steps;
    s.batch_size = 16;
    s.eval_every = 50;
    s.schedule = Schedule::new(0.003, 50).unwrap();
    s
}

#[test]
fn feature_extract_leaves_encoder_bytes_unchanged() {
    let f = fixture();
    let before = digest(&f.encoder);
    let spec = quick_spec(TaskKind::Tag, TransferMode::FeatureExtract, 60);
    let out = finetune(&spec, &f.tok, &f.encoder, &f.tagging, &f.tagging[..10], &f.tagging[..10], "h").unwrap();
    assert_eq!(digest(&out.model.encoder), before);
    assert_eq!(digest(&f.encoder), before);

    let spec = quick_spec(TaskKind::Tag, TransferMode::FinetuneAll, 60);
    let out = finetune(&spec, &f.tok, &f.encoder, &f.tagging, &f.tagging[..10], &f.tagging[..10], "h").unwrap();
    assert_ne!(digest(&out.model.encoder), before);
}

#[test]
fn finetuning_is_bit_reproducible() {
    let f = fixture();
    let spec = quick_spec(TaskKind::Classify, TransferMode::FinetuneAll, 40);
    let run = || {
        let o = finetune(&spec, &f.tok, &f.encoder, &f.classification, &f.classification[..10], &f.classification[..10], "h")
            .unwrap();
        (digest(&o.model.encoder), o.model.head, o.report.to_string())
    };
    assert_eq!(run(), run());
}

#[test]
fn overfits_sixteen_examples() {
    let f = fixture();
    let train: Vec<TaskExample> = f.classification[..16].to_vec();
    let mut spec = quick_spec(TaskKind::Classify, TransferMode::FinetuneAll, 1000);
    spec.eval_every = 100;
    let out = finetune(&spec, &f.tok, &f.encoder, &train, &train, &train, "h").unwrap();
    assert_eq!(out.dev_score, 1.0, "train accuracy {}", out.dev_score);
}

#[test]
fn empty_training_split_is_an_error() {
    let f = fixture();
    let spec = quick_spec(TaskKind::Tag, TransferMode::FinetuneAll, 10);
    assert!(finetune(&spec, &f.tok, &f.encoder, &[], &f.tagging, &f.tagging, "h").is_err());
}

#[test]
fn composite_head_and_encoder_gradients_match_finite_differences() {
    let f = fixture();
    let cfg = f.encoder.config.clone();
    for (kind, examples) in [(TaskKind::Tag, &f.tagging), (TaskKind::Classify, &f.classification)] {
        let labels = label_set(examples.iter());
        let head = init_head(kind, cfg.model_dim, 16, labels.len(), 4);
        let mut all: BTreeMap<String, Tensor<f32>> = f.encoder.params.clone();
        all.extend(head);
        let all = cast_params::<f32, f64>(&all);
        let names: Vec<String> = all.keys().cloned().collect();
        let tensors: Vec<Tensor<f64>> = all.values().cloned().collect();
        let prepared: Vec<_> = examples[..3]
            .iter()
            .map(|e| prepare(e, kind, &f.tok, &labels, 200).unwrap())
            .collect();
        let inputs: Vec<&TokenizedText> = prepared.iter().map(|p| &p.input).collect();
        let targets: Vec<usize> = prepared.iter().flat_map(|p| p.labels.iter().copied()).collect();
        let seq = SeqBatch::new(&inputs.iter().map(|t| t.ids.as_slice()).collect::<Vec<_>>());
        let report = finite_difference_check(
            &tensors,
            |g: &mut Graph<f64>, vars| {
                let p = Bound::from_vars(names.clone(), vars);
                let enc = Forward::new(&cfg, &p).encode(g, &seq)?;
                let logits = head_logits(g, &p, kind, enc, &seq, &inputs)?;
                g.cross_entropy(logits, &targets, usize::MAX)
            },
            &CheckOptions {
                h: 1e-5,
                ..CheckOptions::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{kind:?}: {report:?}");
    }
}

#[test]
fn prepare_rejects_tag_count_mismatch() {
    let f = fixture();
    let ex = TaskExample {
        lang: "en".into(),
        text: "a b".into(),
        text2: None,
        label: Label::Tags(vec!["c0".into()]),
    };
    assert!(prepare(&ex, TaskKind::Tag, &f.tok, &["c0".to_string()], 200).is_err());
}
