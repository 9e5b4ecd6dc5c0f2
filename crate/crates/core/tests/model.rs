use mmte::corpus::{Conditioning, EncodedPair};
use mmte::gradcheck::{finite_difference_check, CheckOptions};
use mmte::model::{
    cast_params, decode_logits, encode, extract_encoder, init_params, translate_greedy, Bound, Checkpoint,
    Forward, SeqBatch, TransformerConfig,
};
use mmte::tokenizer::{BOS, EOS};
use mmte::{Graph, Tensor};

fn small(cond: Conditioning) -> TransformerConfig {
    TransformerConfig {
        layers: 2,
        heads: 4,
        model_dim: 32,
        hidden_dim: 64,
        vocab_size: 23,
        max_len: 16,
        dropout: 0.0,
        conditioning: cond,
    }
}

fn pairs() -> Vec<EncodedPair> {
    vec![
        EncodedPair {
            src: vec![5, 9, 10, 11, EOS],
            tgt: vec![BOS, 12, 13, EOS],
            lang_token: 5,
        },
        EncodedPair {
            src: vec![6, 14, EOS],
            tgt: vec![BOS, 15, 16, 17, 18, EOS],
            lang_token: 6,
        },
    ]
}

fn translation_gradcheck(cond: Conditioning, seed: u64) -> f64 {
    let cfg = small(cond);
    let params = cast_params::<f32, f64>(&init_params(&cfg, seed).unwrap());
    // Perturb the zero-initialized biases and unit gains so their gradients are exercised generically.
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed + 100);
    let names: Vec<String> = params.keys().cloned().collect();
    let tensors: Vec<Tensor<f64>> = params
        .values()
        .map(|t| {
            if t.rank() == 1 {
                let noise = Tensor::<f64>::randn(t.dims(), 0.1, &mut rng);
                let mut t = t.clone();
                t.add_assign(&noise);
                t
            } else {
                t.clone()
            }
        })
        .collect();
    let data = pairs();
    let batch: Vec<&EncodedPair> = data.iter().collect();
    let report = finite_difference_check(
        &tensors,
        |g: &mut Graph<f64>, vars| {
            let bound = Bound::from_vars(names.clone(), vars);
            Forward::new(&cfg, &bound).translation_loss(g, &batch)
        },
        &CheckOptions {
            seed,
            // At 1e-4 some central differences straddle a ReLU kink; much below
            // 1e-5 round-off swamps the smallest gradients.
            h: 1e-5,
            ..CheckOptions::default()
        },
    )
    .unwrap();
    report.max_rel_error
}

#[test]
fn translation_loss_gradients_match_finite_differences() {
    for seed in 0..3 {
        for cond in [Conditioning::InSource, Conditioning::External] {
            let err = translation_gradcheck(cond, seed);
            assert!(err < 1e-3, "{cond:?} seed {seed}: max relative error {err}");
        }
    }
}

#[test]
fn decoder_is_causal() {
    let cfg = small(Conditioning::InSource);
    let p = init_params(&cfg, 4).unwrap();
    let enc = encode(&cfg, &p, &[5, 9, 10, EOS], &[true; 4]).unwrap();
    let a = decode_logits(&cfg, &p, &enc, None, &[BOS, 12, 13, 14]).unwrap();
    let b = decode_logits(&cfg, &p, &enc, None, &[BOS, 12, 20, 21]).unwrap();
    let v = cfg.vocab_size;
    assert_eq!(&a.data()[..2 * v], &b.data()[..2 * v]);
    assert_ne!(&a.data()[2 * v..3 * v], &b.data()[2 * v..3 * v]);
}

#[test]
fn encoder_ignores_padding() {
    let cfg = small(Conditioning::InSource);
    let p = init_params(&cfg, 5).unwrap();
    let short = encode(&cfg, &p, &[5, 9, 10, EOS], &[true; 4]).unwrap();
    let padded = encode(&cfg, &p, &[5, 9, 10, EOS, 0, 0, 0], &[true, true, true, true, false, false, false]).unwrap();
    assert_eq!(short.reps.data(), &padded.reps.data()[..4 * cfg.model_dim]);
}

#[test]
fn batched_and_single_decoding_agree() {
    let cfg = small(Conditioning::External);
    let p = init_params(&cfg, 6).unwrap();
    let a: &[u32] = &[9, 10, 11, EOS];
    let b: &[u32] = &[12, EOS];
    let both = translate_greedy(&cfg, &p, &[a, b], &[5, 6], 6).unwrap();
    assert_eq!(both[0], translate_greedy(&cfg, &p, &[a], &[5], 6).unwrap()[0]);
    assert_eq!(both[1], translate_greedy(&cfg, &p, &[b], &[6], 6).unwrap()[0]);
}

#[test]
fn external_cross_attention_reads_one_extra_position() {
    for (cond, extra) in [(Conditioning::InSource, 0), (Conditioning::External, 1)] {
        let cfg = small(cond);
        let p = init_params(&cfg, 7).unwrap();
        let mut g = Graph::<f32>::new();
        let bound = Bound::new(&mut g, &p, |_| false);
        let src = SeqBatch::new(&[&[9, 10, 11, EOS], &[12, EOS]]);
        let mem = Forward::new(&cfg, &bound).memory(&mut g, &src, &[5, 6]).unwrap();
        assert_eq!(mem.len, src.len + extra);
        assert_eq!(g.value(mem.var).dims(), &[2 * (src.len + extra), cfg.model_dim]);
    }
}

#[test]
fn extract_encoder_keeps_tensors_bit_equal() {
    let cfg = small(Conditioning::External);
    let ck = Checkpoint::new(cfg.clone(), init_params(&cfg, 8).unwrap());
    let enc = extract_encoder(&ck).unwrap();
    assert!(enc.params.keys().all(|k| k == "embed" || k.starts_with("enc.")));
    for (k, t) in &enc.params {
        assert_eq!(t, &ck.params[k]);
    }
    assert!(!enc.params.contains_key("tok_enc.embed"));
    let mut broken = ck.clone();
    broken.params.remove("enc.0.ff.w1");
    assert!(extract_encoder(&broken).is_err());
}
