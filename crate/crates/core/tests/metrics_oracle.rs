use std::time::{Duration, Instant};

use covidscreen_core::data::Label;
use covidscreen_core::metrics::{build_report, f_measure, roc_auc, EvalMode, MetricsError, ScoredExample};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Share of (positive, negative) pairs ranked correctly, ties counting one half.
fn mann_whitney(scores: &[f64], positive: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, si) in scores.iter().enumerate() {
        for (j, sj) in scores.iter().enumerate() {
            if positive[i] && !positive[j] {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Random score set with both classes present and at least 20% of entries tied with another.
fn tied_set(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(4..=50);
    let mut positive: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    positive[0] = true;
    positive[1] = false;
    let levels = rng.random_range(2..=(n / 2).max(2));
    let grid: Vec<f64> = (0..levels).map(|_| rng.random::<f64>()).collect();
    let scores: Vec<f64> = (0..n).map(|_| grid[rng.random_range(0..levels)]).collect();
    (scores, positive)
}

fn tied_fraction(scores: &[f64]) -> f64 {
    let tied = scores.iter().filter(|s| scores.iter().filter(|t| t == s).count() > 1).count();
    tied as f64 / scores.len() as f64
}

#[test]
fn auc_matches_pair_count_on_200_tied_sets() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut done = 0;
    while done < 200 {
        let (scores, positive) = tied_set(&mut rng);
        if tied_fraction(&scores) < 0.2 {
            continue;
        }
        let auc = roc_auc(&scores, &positive).unwrap().auc;
        let oracle = mann_whitney(&scores, &positive);
        assert!((auc - oracle).abs() < 1e-9, "{auc} vs {oracle} on {scores:?} {positive:?}");
        done += 1;
    }
    assert!(start.elapsed() < Duration::from_secs(10));
}

#[test]
fn f_measure_reproduces_reported_rows() {
    assert!((f_measure(0.720, 0.858) - 0.783).abs() <= 0.0005);
    assert!((f_measure(0.987, 0.982) - 0.984).abs() <= 0.0005);
}

#[test]
fn single_class_scores_are_rejected() {
    assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(MetricsError::SingleClassInput)));
}

proptest! {
    #[test]
    fn auc_equals_oracle(pairs in proptest::collection::vec((0u8..8, any::<bool>()), 2..50)) {
        let scores: Vec<f64> = pairs.iter().map(|(s, _)| *s as f64 / 8.0).collect();
        let positive: Vec<bool> = pairs.iter().map(|(_, p)| *p).collect();
        prop_assume!(positive.iter().any(|p| *p) && positive.iter().any(|p| !*p));
        let auc = roc_auc(&scores, &positive).unwrap().auc;
        prop_assert!((auc - mann_whitney(&scores, &positive)).abs() < 1e-9);
    }

    #[test]
    fn auc_is_invariant_under_monotone_maps(pairs in proptest::collection::vec((0.0f64..1.0, any::<bool>()), 2..40)) {
        let scores: Vec<f64> = pairs.iter().map(|(s, _)| *s).collect();
        let positive: Vec<bool> = pairs.iter().map(|(_, p)| *p).collect();
        prop_assume!(positive.iter().any(|p| *p) && positive.iter().any(|p| !*p));
        let mapped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        let a = roc_auc(&scores, &positive).unwrap();
        let b = roc_auc(&mapped, &positive).unwrap();
        prop_assert!((a.auc - b.auc).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a.auc));
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((roc_auc(&flipped, &positive).unwrap().auc - (1.0 - a.auc)).abs() < 1e-9);
    }

    #[test]
    fn report_counts_partition_the_set(rows in proptest::collection::vec((0.0f64..1.0, 0usize..3), 2..40)) {
        let examples: Vec<ScoredExample> = rows
            .iter()
            .enumerate()
            .map(|(i, (s, l))| ScoredExample {
                image_id: format!("i{i}"),
                true_label: Label::from_index(*l).unwrap(),
                score: *s,
                probabilities: vec![*s],
                predicted_label: None,
            })
            .collect();
        prop_assume!(examples.iter().any(|e| e.true_label.is_covid()) && examples.iter().any(|e| !e.true_label.is_covid()));
        let r = build_report(&examples, EvalMode::CxrBinary).unwrap();
        let c = r.confusion;
        prop_assert_eq!(c.tp + c.fp + c.tn + c.fn_, examples.len());
        prop_assert!((0.0..=1.0).contains(&r.precision) && (0.0..=1.0).contains(&r.recall));
    }
}
