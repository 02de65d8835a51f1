mod common;

use std::collections::BTreeSet;

use common::{brute_force_rank, random_identifiers, synth_indexed, word_fixture};
use genret::corpus::{CorpusStore, Passage, SampleConfig};
use genret::decoder::ScoredIdentifier;
use genret::ranker::{
    aggregate_scores, infonce_loss, margin_loss, retrieve, select_pair, IdentifierScoring, LossConfig, PairStrategy,
    SkipReason,
};
use genret::{build_index, build_vocab, DecodeConfig, IndexConfig, View, VocabConfig};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn id(view: View, tokens: Vec<u32>, score: f64) -> ScoredIdentifier {
    ScoredIdentifier {
        view,
        text: String::new(),
        tokens,
        score,
    }
}

#[test]
fn aggregation_matches_brute_force() {
    let ix = synth_indexed(300, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for round in 0..20 {
        let ids = random_identifiers(&mut rng, &ix, 60);
        for scoring in [IdentifierScoring::LogProb, IdentifierScoring::Prob] {
            let cap = [1, 3, 40][round % 3];
            let got = aggregate_scores("q", &ids, &ix.index, &ix.vocab, cap, scoring).ranking();
            assert_eq!(got, brute_force_rank(&ix.store, &ix.vocab, &ids, cap, scoring));
        }
    }
}

#[test]
fn identifier_order_does_not_matter() {
    let ix = synth_indexed(100, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10 {
        let mut ids = random_identifiers(&mut rng, &ix, 40);
        let a = aggregate_scores("q", &ids, &ix.index, &ix.vocab, 5, IdentifierScoring::Prob);
        ids.shuffle(&mut rng);
        let b = aggregate_scores("q", &ids, &ix.index, &ix.vocab, 5, IdentifierScoring::Prob);
        assert_eq!(a, b);
    }
}

fn two_passage_index() -> (genret::Vocab, genret::FmIndex) {
    let store = CorpusStore::new(vec![
        Passage::new("p1", "", "alpha beta gamma"),
        Passage::new("p2", "", "alpha delta"),
    ])
    .unwrap();
    let vocab = build_vocab(
        &store,
        std::iter::empty::<&str>(),
        &VocabConfig {
            granularity: genret::Granularity::Word,
            min_count: 1,
        },
    )
    .unwrap();
    let ix = build_index(&store, &vocab, &SampleConfig::default(), &IndexConfig::default()).unwrap();
    (vocab, ix)
}

#[test]
fn summed_log_probabilities_example() {
    let (v, ix) = two_passage_index();
    let a = id(View::Substring, v.encode("alpha"), -1.0);
    let b = id(View::Substring, v.encode("beta"), -2.0);
    let list = aggregate_scores("q", &[a, b], &ix, &v, 40, IdentifierScoring::LogProb);
    assert_eq!(list.ranking(), vec![("p2".to_string(), -1.0), ("p1".to_string(), -3.0)]);
}

#[test]
fn identifier_cap_limits_the_sum() {
    let (v, ix) = two_passage_index();
    let alpha = v.encode("alpha")[0];
    let gamma = v.encode("gamma")[0];
    let beta = v.encode("beta")[0];
    // Spans of "alpha beta gamma" that occur only in p1, with distinct scores.
    let spans = [vec![beta], vec![gamma], vec![beta, gamma], vec![alpha, beta], vec![alpha, beta, gamma]];
    let ids: Vec<_> = (0..41)
        .map(|i| id(View::Substring, spans[i % spans.len()].clone(), -1.0 - i as f64 * 1e-3))
        .collect();
    let list = aggregate_scores("q", &ids, &ix, &v, 40, IdentifierScoring::LogProb);
    let p1 = &list.entries[0];
    assert_eq!(p1.passage_id, "p1");
    assert_eq!(p1.matched.len(), 40);
    let want: f64 = (0..40).map(|i| -1.0 - i as f64 * 1e-3).sum();
    assert!((p1.score - want).abs() < 1e-12);

    let flat: Vec<_> = (0..41).map(|_| id(View::Substring, vec![beta], -1.0)).collect();
    let list = aggregate_scores("q", &flat, &ix, &v, 40, IdentifierScoring::LogProb);
    assert_eq!(list.entries[0].score, -40.0);
}

#[test]
fn views_restrict_matches() {
    let f = word_fixture(0);
    let title = f.vocab.encode("prime rate");
    let as_title = aggregate_scores("q", &[id(View::Title, title.clone(), -1.0)], &f.index, &f.vocab, 40, IdentifierScoring::LogProb);
    assert_eq!(as_title.ranking(), vec![("p0".to_string(), -1.0)]);
    // The same words are a substring of p0's body and of p0's pseudo-query.
    let as_sub = aggregate_scores("q", &[id(View::Substring, title, -1.0)], &f.index, &f.vocab, 40, IdentifierScoring::LogProb);
    assert_eq!(as_sub.ranking(), vec![("p0".to_string(), -1.0)]);
    // A title prefix is not a whole title.
    let partial = aggregate_scores("q", &[id(View::Title, f.vocab.encode("prime"), -1.0)], &f.index, &f.vocab, 40, IdentifierScoring::LogProb);
    assert!(partial.is_empty());
    let pq = aggregate_scores("q", &[id(View::PseudoQuery, f.vocab.encode("loan rate limit"), -0.5)], &f.index, &f.vocab, 40, IdentifierScoring::LogProb);
    assert_eq!(pq.ranking(), vec![("p1".to_string(), -0.5)]);
}

#[test]
fn retrieve_truncates_to_top_k() {
    let f = word_fixture(3);
    let q = f.vocab.encode("rate");
    let decode = DecodeConfig {
        beam: 10,
        max_len: 4,
        ..Default::default()
    };
    let full = retrieve(&f.model, &f.index, &f.vocab, "q", &q, &decode, &LossConfig { top_k: 100, ..LossConfig::desk() }).unwrap();
    assert!(full.len() >= 3);
    let top2 = retrieve(&f.model, &f.index, &f.vocab, "q", &q, &decode, &LossConfig { top_k: 2, ..LossConfig::desk() }).unwrap();
    assert_eq!(top2.entries[..], full.entries[..2]);
}

#[test]
fn pair_selection_reports_missing_sides() {
    let (v, ix) = two_passage_index();
    let ids = [id(View::Substring, v.encode("alpha"), -1.0)];
    let list = aggregate_scores("q", &ids, &ix, &v, 40, IdentifierScoring::LogProb);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let none: BTreeSet<&str> = BTreeSet::new();
    let both: BTreeSet<&str> = ["p1", "p2"].into_iter().collect();
    assert_eq!(select_pair(&list, &none, PairStrategy::TopTop, &mut rng).unwrap_err(), SkipReason::NoPositive);
    assert_eq!(select_pair(&list, &both, PairStrategy::RandomRandom, &mut rng).unwrap_err(), SkipReason::NoNegative);
}

proptest! {
    #[test]
    fn margin_loss_is_a_hinge(sp in -50.0f64..50.0, sn in -50.0f64..50.0, m in 0.0f64..20.0) {
        let l = margin_loss(sp, sn, m);
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l == 0.0, sn - sp + m <= 0.0);
        if l > 0.0 {
            prop_assert!((l - (sn - sp + m)).abs() < 1e-12);
        }
    }

    #[test]
    fn infonce_matches_softmax(sp in -30.0f64..30.0, negs in prop::collection::vec(-30.0f64..30.0, 0..10)) {
        let l = infonce_loss(sp, &negs);
        let z: f64 = sp.exp() + negs.iter().map(|s| s.exp()).sum::<f64>();
        prop_assert!((l - -(sp.exp() / z).ln()).abs() < 1e-9);
        prop_assert!(l >= -1e-12);
        if negs.is_empty() {
            prop_assert!(l.abs() < 1e-12);
        }
    }

    #[test]
    fn infonce_decreases_with_positive_score(sp in -10.0f64..10.0, d in 0.01f64..5.0, negs in prop::collection::vec(-10.0f64..10.0, 1..6)) {
        prop_assert!(infonce_loss(sp + d, &negs) < infonce_loss(sp, &negs));
    }

    #[test]
    fn infonce_is_stable_for_large_scores(sp in 500.0f64..800.0, n in 500.0f64..800.0) {
        prop_assert!(infonce_loss(sp, &[n]).is_finite());
    }
}
