mod common;

use common::*;
use proptest::prelude::*;
use remotenet::eval::{
    average_precision, f_score, interpolated_ap_101, pr_curve, precision_recall_at, EvalError,
};

/// Area under the stair curve from the explicit (recall, precision) sequence.
fn stair_area(scores: &[f32], labels: &[bool]) -> f64 {
    let pts = pr_curve(scores, labels).unwrap();
    let mut area = 0.0;
    let mut prev = 0.0;
    for p in pts {
        area += (p.recall - prev) * p.precision;
        prev = p.recall;
    }
    area
}

fn auc(scores: &[f32], labels: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn balanced_patterns(n: usize) -> Vec<Vec<bool>> {
    (0u32..1 << n)
        .filter(|m| m.count_ones() as usize * 2 == n)
        .map(|m| (0..n).map(|i| m >> i & 1 == 1).collect())
        .collect()
}

/// Scores `n, n-1, .., 1` so position 0 ranks first.
fn descending(n: usize) -> Vec<f32> {
    (0..n).map(|i| (n - i) as f32).collect()
}

fn reversed(scores: &[f32]) -> Vec<f32> {
    scores.iter().map(|s| -s).collect()
}

fn case() -> impl Strategy<Value = (Vec<f32>, Vec<bool>)> {
    (1usize..=12)
        .prop_flat_map(|n| {
            (
                prop::collection::vec(0u8..6, n).prop_map(|v| v.into_iter().map(f32::from).collect()),
                prop::collection::vec(any::<bool>(), n),
            )
        })
        .prop_filter("needs a positive", |(_, l)| l.iter().any(|&b| b))
}

proptest! {
    #[test]
    fn ap_matches_brute_force((scores, labels) in case()) {
        let ap = average_precision(&scores, &labels).unwrap();
        prop_assert!((ap - brute_force_ap(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn ap_is_the_area_under_the_stair_curve((scores, labels) in case()) {
        let distinct: Vec<f32> = (0..scores.len()).map(|i| scores[i] * 100.0 + i as f32 * 0.01).collect();
        let ap = average_precision(&distinct, &labels).unwrap();
        prop_assert!((ap - stair_area(&distinct, &labels)).abs() < 1e-12);
    }

    #[test]
    fn ap_is_invariant_to_monotone_transforms((scores, labels) in case(), a in 0.1f32..5.0, b in -3.0f32..3.0) {
        let t: Vec<f32> = scores.iter().map(|&s| a * s.exp() + b).collect();
        prop_assert_eq!(average_precision(&scores, &labels).unwrap(), average_precision(&t, &labels).unwrap());
    }

    #[test]
    fn ap_and_interpolated_ap_lie_in_unit_interval((scores, labels) in case()) {
        let ap = average_precision(&scores, &labels).unwrap();
        let ip = interpolated_ap_101(&scores, &labels).unwrap();
        prop_assert!(ap > 0.0 && ap <= 1.0);
        prop_assert!(ip > 0.0 && ip <= 1.0);
    }

    #[test]
    fn pr_curve_recall_is_monotone_and_ends_at_one((scores, labels) in case()) {
        let pts = pr_curve(&scores, &labels).unwrap();
        for w in pts.windows(2) {
            prop_assert!(w[1].recall >= w[0].recall);
            prop_assert!(w[1].threshold < w[0].threshold);
        }
        prop_assert_eq!(pts.last().unwrap().recall, 1.0);
    }

    #[test]
    fn f_score_lies_between_min_and_max(p in 0.0f64..=1.0, r in 0.0f64..=1.0) {
        let f = f_score(p, r);
        prop_assert!(f <= p.max(r) + 1e-12);
        prop_assert!(f >= p.min(r) - 1e-12 || p + r == 0.0);
    }
}

#[test]
fn perfect_ranking_scores_one() {
    let labels = [true, true, false, true, false, false];
    let scores: Vec<f32> = labels.iter().map(|&l| if l { 0.9 } else { 0.1 }).collect();
    assert_eq!(average_precision(&scores, &labels).unwrap(), 1.0);
    assert!((interpolated_ap_101(&scores, &labels).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn ap_without_positives_is_an_error() {
    assert!(matches!(
        average_precision(&[0.3, 0.7], &[false, false]),
        Err(EvalError::NoPositives)
    ));
}

#[test]
fn reported_f_score_reproduces() {
    let f = f_score(0.8467, 0.7321);
    assert!((f - 0.785).abs() <= 1e-3, "{f}");
}

#[test]
fn threshold_precision_recall_counts() {
    let (p, r) = precision_recall_at(&[0.9, 0.6, 0.4, 0.2], &[true, false, true, false], 0.5);
    assert_eq!((p, r), (0.5, 0.5));
}

#[test]
fn reversal_never_helps_a_ranking_with_auc_above_half() {
    for n in [2, 4, 6] {
        let scores = descending(n);
        let rev = reversed(&scores);
        for labels in balanced_patterns(n) {
            if auc(&scores, &labels) <= 0.5 {
                continue;
            }
            let ap = average_precision(&scores, &labels).unwrap();
            let ap_rev = average_precision(&rev, &labels).unwrap();
            assert!(ap_rev <= ap + 1e-12, "labels {labels:?}: {ap_rev} > {ap}");
        }
    }
}

#[test]
fn reversal_can_help_a_ranking_whose_ap_exceeds_half() {
    let labels = [true, false, false, false, true, true];
    let scores = descending(6);
    let ap = average_precision(&scores, &labels).unwrap();
    let ap_rev = average_precision(&reversed(&scores), &labels).unwrap();
    assert!(ap > 0.5);
    assert!(ap_rev > ap);
    assert!(auc(&scores, &labels) < 0.5);
}

#[test]
fn reversal_preserves_or_lowers_ap_for_every_ordering_up_to_six() {
    for n in 1..=6 {
        for m in 1u32..1 << n {
            let labels: Vec<bool> = (0..n).map(|i| m >> i & 1 == 1).collect();
            if labels.iter().all(|&l| l) {
                continue;
            }
            let scores = descending(n);
            if auc(&scores, &labels) <= 0.5 {
                continue;
            }
            let ap = average_precision(&scores, &labels).unwrap();
            let ap_rev = average_precision(&reversed(&scores), &labels).unwrap();
            assert!(ap_rev <= ap + 1e-12, "labels {labels:?}: {ap_rev} > {ap}");
        }
    }
}
