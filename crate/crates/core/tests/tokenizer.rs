use mmte::corpus::{generate_synthetic, SyntheticLanguageSpec};
use mmte::tokenizer::{lang_token_name, SubwordModel, VocabParams, BOS, EOS, UNK};
use proptest::prelude::*;

const ALPHABET: &str = "abcdefghij";

fn alphabet_model() -> SubwordModel {
    let lines = ["abc def ghij", "aab bba cab", "jihg fed cba", "ddd eee fff ggg", "hij hij abc"];
    SubwordModel::train(lines.into_iter(), ["en"].into_iter(), 40, 1.0).unwrap()
}

fn alphabet_string() -> impl Strategy<Value = String> {
    prop::collection::vec(prop::collection::vec(prop::sample::select(ALPHABET.chars().collect::<Vec<_>>()), 1..8), 0..6)
        .prop_map(|words| {
            words
                .into_iter()
                .map(|w| w.into_iter().collect::<String>())
                .collect::<Vec<_>>()
                .join(" ")
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn round_trips_alphabet_strings(s in alphabet_string()) {
        let m = alphabet_model();
        let t = m.encode(&s);
        prop_assert!(!t.ids.contains(&UNK));
        prop_assert_eq!(t.word_count(), s.split_whitespace().count());
        prop_assert_eq!(m.decode(&t.ids).unwrap(), s);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn framing_tokens_never_change_decoding(s in alphabet_string()) {
        let m = alphabet_model();
        let mut ids = vec![m.lang_id("en").unwrap(), BOS];
        ids.extend(m.encode(&s).ids);
        ids.push(EOS);
        prop_assert_eq!(m.decode(&ids).unwrap(), s);
    }
}

fn build(seed: u64, vocab: usize) -> SubwordModel {
    let data = generate_synthetic(&SyntheticLanguageSpec::with_languages(3), 400).unwrap();
    SubwordModel::build(
        &data.corpora,
        &VocabParams {
            vocab_size: vocab,
            sample_examples: 2000,
            seed,
            ..VocabParams::default()
        },
    )
    .unwrap()
}

#[test]
fn identical_inputs_give_identical_serialization() {
    assert_eq!(build(5, 300).to_text(), build(5, 300).to_text());
}

#[test]
fn ids_are_contiguous_and_size_is_exact() {
    let m = build(1, 300);
    assert_eq!(m.vocab_size(), 300);
    for id in 0..m.vocab_size() as u32 {
        let piece = m.pieces(&[id]).unwrap()[0].to_string();
        assert_eq!(m.token_id(&piece), Some(id), "piece {piece:?}");
    }
    assert!(m.pieces(&[300]).is_err());
    for lang in ["en", "xa", "xb", "xc"] {
        assert!(m.is_lang_token(m.token_id(&lang_token_name(lang)).unwrap()));
    }
}

#[test]
fn saved_model_loads_identically() {
    let m = build(2, 260);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("vocab.txt");
    m.save(&path).unwrap();
    let back = SubwordModel::load(&path).unwrap();
    assert_eq!(back, m);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("MMTE-SPM v1\ncoverage="));
}

#[test]
fn corpus_sentences_round_trip() {
    let data = generate_synthetic(&SyntheticLanguageSpec::with_languages(3), 400).unwrap();
    let m = build(3, 400);
    for c in &data.heldout {
        for (s, t) in &c.examples {
            assert_eq!(&m.decode(&m.encode(s).ids).unwrap(), s);
            assert_eq!(&m.decode(&m.encode(t).ids).unwrap(), t);
        }
    }
}
