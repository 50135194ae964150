use std::collections::BTreeMap;

use kags::metrics::{bleu, bleu_counts, cider_d, join_corpus, rouge_l, EvalPair, EvalUnit, MetricReport, Prediction};
use kags::KagsError;
use proptest::prelude::*;
use serde_json::Value;

fn fixture() -> Value {
    serde_json::from_str(include_str!("fixtures/metric_corpus.json")).unwrap()
}

fn corpus(v: &Value) -> Vec<EvalPair> {
    v["pairs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|p| {
            let refs: Vec<&str> = p["references"].as_array().unwrap().iter().map(|r| r.as_str().unwrap()).collect();
            EvalPair::from_text(p["candidate"].as_str().unwrap(), &refs)
        })
        .collect()
}

fn assert_matches(name: &str) {
    let f = fixture();
    let pairs = corpus(&f[name]);
    let got = serde_json::to_value(MetricReport::compute(&pairs).unwrap()).unwrap();
    for key in ["bleu1", "bleu2", "bleu3", "bleu4", "rouge_l", "cider"] {
        let want = f[name]["expected"][key].as_f64().unwrap();
        let have = got[key].as_f64().unwrap();
        assert!((want - have).abs() < 1e-4, "{name}/{key}: {have} vs {want}");
    }
}

#[test]
fn twenty_story_fixture() {
    assert_matches("stories20");
}

#[test]
fn three_pair_cider_fixture() {
    assert_matches("cider3");
}

#[test]
fn hand_cases() {
    let f = fixture();
    let c = [EvalPair::from_text("the cat sat", &["the cat sat down"])];
    assert!((bleu(&c, 1).unwrap() - f["hand"]["bleu1"].as_f64().unwrap()).abs() < 1e-4);
    assert!((rouge_l(&c).unwrap() - 0.8356).abs() < 1e-4);
}

#[test]
fn identity_corpus_scores_full_marks() {
    let refs = BTreeMap::from([
        ("a".to_string(), vec![vec!["we went to the park .".to_string(), "it was fun .".to_string()]]),
        ("b".to_string(), vec![vec!["the dog ran on the beach .".to_string(), "then it slept .".to_string()]]),
    ]);
    let preds: Vec<Prediction> = refs
        .iter()
        .map(|(id, r)| Prediction { album_id: id.clone(), sentences: r[0].clone(), log_prob: 0.0 })
        .collect();
    let r = MetricReport::compute(&join_corpus(&preds, &refs, EvalUnit::Story).unwrap()).unwrap().scaled();
    for v in [r.bleu1, r.bleu2, r.bleu3, r.bleu4, r.rouge_l] {
        assert!((v - 100.0).abs() < 1e-9);
    }
    let per_sentence = join_corpus(&preds, &refs, EvalUnit::Sentence).unwrap();
    assert_eq!(per_sentence.len(), 4);
}

#[test]
fn single_pair_cider_is_rejected() {
    let c = [EvalPair::from_text("a b", &["a b"])];
    assert!(matches!(cider_d(&c), Err(KagsError::Precondition(m)) if m.contains("idf")));
}

const WORDS: [&str; 8] = ["a", "b", "c", "d", "e", "f", "g", "h"];

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(&WORDS[..]).prop_map(String::from), 1..12)
}

fn pairs() -> impl Strategy<Value = Vec<EvalPair>> {
    prop::collection::vec(
        (sentence(), prop::collection::vec(sentence(), 1..4))
            .prop_map(|(candidate, references)| EvalPair { candidate, references }),
        2..8,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn bounded_and_order_invariant(c in pairs(), rot in 0usize..8) {
        let a = MetricReport::compute(&c).unwrap();
        let mut r = c.clone();
        r.rotate_left(rot % c.len());
        r.reverse();
        let b = MetricReport::compute(&r).unwrap();
        for (x, y) in [(a.bleu1, b.bleu1), (a.bleu4, b.bleu4), (a.rouge_l, b.rouge_l), (a.cider, b.cider)] {
            prop_assert!((x - y).abs() < 1e-9);
        }
        for v in [a.bleu1, a.bleu2, a.bleu3, a.bleu4, a.rouge_l] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
        prop_assert!((0.0..=10.0 + 1e-9).contains(&a.cider));
    }

    #[test]
    fn exact_match_pair_never_lowers_clipped_counts(c in pairs(), extra in sentence()) {
        let before = bleu_counts(&c, 4).unwrap();
        let mut more = c.clone();
        more.push(EvalPair { candidate: extra.clone(), references: vec![extra] });
        let after = bleu_counts(&more, 4).unwrap();
        for k in 0..4 {
            prop_assert!(after.matches[k] >= before.matches[k]);
            // The new pair's n-grams all match.
            prop_assert_eq!(after.matches[k] - before.matches[k], after.totals[k] - before.totals[k]);
        }
    }
}
