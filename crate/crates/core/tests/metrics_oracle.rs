mod common;

use common::{metric_script, random_run_qrels};
use genret::corpus::Qrels;
use genret::metrics::{evaluate, hits_at_k, mrr_at_k, rank_histogram, recall_at_k};
use genret::Run;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn metrics_match_the_script() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let (run, qrels) = random_run_qrels(&mut rng);
        for k in [1, 3, 5, 10, 20, 100] {
            let s = metric_script(&run, &qrels, k);
            assert!((hits_at_k(&run, &qrels, k) - s.hits).abs() < 1e-9);
            assert!((recall_at_k(&run, &qrels, k) - s.recall).abs() < 1e-9);
            assert!((mrr_at_k(&run, &qrels, k) - s.mrr).abs() < 1e-9);
        }
        let e = evaluate(&run, &qrels, 20);
        assert!((e.mrr10 - metric_script(&run, &qrels, 10).mrr).abs() < 1e-9);
        assert!((e.hits_at(5) - metric_script(&run, &qrels, 5).hits).abs() < 1e-9);
    }
}

#[test]
fn query_accounting() {
    let mut run = Run::new("t");
    run.insert("judged", vec![("d1".into(), 2.0), ("d2".into(), 1.0)]);
    run.insert("negatives_only", vec![("d1".into(), 1.0)]);
    run.insert("unjudged", vec![("d1".into(), 1.0)]);
    let mut qrels = Qrels::default();
    qrels.insert("judged", "d2", 1);
    qrels.insert("negatives_only", "d1", 0);
    qrels.insert("not_run", "d1", 1);
    let e = evaluate(&run, &qrels, 10);
    assert_eq!(e.evaluated, 1);
    assert_eq!(e.no_positives, 1);
    assert_eq!(e.missing_judgments, 1);
    assert_eq!(e.hits_at(1), 0.0);
    assert_eq!(e.hits_at(5), 1.0);
    assert_eq!(e.mrr10, 0.5);
    assert_eq!(e.histogram[..2], [0, 1]);
}

#[test]
fn empty_run_scores_zero() {
    let e = evaluate(&Run::new("t"), &Qrels::default(), 5);
    assert_eq!(e.evaluated, 0);
    assert_eq!(e.mrr10, 0.0);
}

proptest! {
    #[test]
    fn metrics_are_bounded_and_monotone_in_k(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (run, qrels) = random_run_qrels(&mut rng);
        let mut prev = (0.0, 0.0, 0.0);
        for k in 1..30 {
            let cur = (hits_at_k(&run, &qrels, k), recall_at_k(&run, &qrels, k), mrr_at_k(&run, &qrels, k));
            for v in [cur.0, cur.1, cur.2] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            prop_assert!(cur.0 >= prev.0 && cur.1 >= prev.1 && cur.2 >= prev.2);
            prop_assert!(cur.2 <= cur.0);
            prev = cur;
        }
        let h = rank_histogram(&run, &qrels, 30);
        prop_assert_eq!(h.len(), 30);
    }
}
