//! Ranking metrics. Average precision at k divides by the number of
//! hits inside the cutoff by default; AUROC uses the rank-sum form with
//! midranks for ties, which equals pairwise counting exactly.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("cutoff k must be at least 1")]
    ZeroCutoff,
    #[error("truth set is empty")]
    EmptyTruth,
    #[error("no cases to aggregate")]
    EmptyInput,
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("AUROC needs both a positive and a negative example")]
    SingleClass,
    #[error("score at index {0} is not finite")]
    NonFinite(usize),
    #[error("permutation test needs at least 1 iteration")]
    NoIterations,
}

/// Denominator convention for average precision at k.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApDenominator {
    /// Number of relevant items retrieved within the cutoff.
    HitsInTopK,
    /// `min(k, |truth|)`, the fixed-cutoff convention.
    TruthCapped,
}

/// Average precision over the first `k` entries of a ranked list.
/// `ranked` must not repeat items. A cutoff with no hits scores 0.
pub fn ap_at_k<T: PartialEq>(
    ranked: &[T],
    truth: &[T],
    k: usize,
    denom: ApDenominator,
) -> Result<f64, MetricError> {
    if k == 0 {
        return Err(MetricError::ZeroCutoff);
    }
    if truth.is_empty() {
        return Err(MetricError::EmptyTruth);
    }
    let mut hits = 0usize;
    let mut precision_sum = 0.0;
    for (i, item) in ranked.iter().take(k).enumerate() {
        if truth.contains(item) {
            hits += 1;
            precision_sum += hits as f64 / (i + 1) as f64;
        }
    }
    let denominator = match denom {
        ApDenominator::HitsInTopK => hits,
        ApDenominator::TruthCapped => k.min(truth.len()),
    };
    if denominator == 0 {
        return Ok(0.0);
    }
    Ok(precision_sum / denominator as f64)
}

/// Mean of per-case AP@k over (ranked, truth) cases.
pub fn map_at_k<T: PartialEq>(
    cases: &[(Vec<T>, Vec<T>)],
    k: usize,
    denom: ApDenominator,
) -> Result<f64, MetricError> {
    if cases.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let mut sum = 0.0;
    for (ranked, truth) in cases {
        sum += ap_at_k(ranked, truth, k, denom)?;
    }
    Ok(sum / cases.len() as f64)
}

/// Area under the ROC curve via the Mann-Whitney statistic. Tied scores
/// receive their midrank, so this equals counting concordant pairs with
/// ties worth one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, MetricError> {
    if scores.len() != labels.len() {
        return Err(MetricError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    for (i, s) in scores.iter().enumerate() {
        if !s.is_finite() {
            return Err(MetricError::NonFinite(i));
        }
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricError::SingleClass);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; tied block [i, j] shares the midrank
        let midrank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }
    let p = positives as f64;
    let u = rank_sum_pos - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

#[derive(Debug, Clone, Copy)]
pub struct SignFlipTest {
    pub observed_mean: f64,
    pub p_value: f64,
    pub iterations: u32,
}

/// Two-sided paired sign-flip permutation test on per-case differences.
/// The p-value uses add-one smoothing, so it is never exactly zero.
pub fn paired_sign_flip(
    diffs: &[f64],
    iterations: u32,
    seed: u64,
) -> Result<SignFlipTest, MetricError> {
    if diffs.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    if iterations == 0 {
        return Err(MetricError::NoIterations);
    }
    for (i, d) in diffs.iter().enumerate() {
        if !d.is_finite() {
            return Err(MetricError::NonFinite(i));
        }
    }
    let n = diffs.len() as f64;
    let observed = diffs.iter().sum::<f64>() / n;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut at_least_as_extreme = 0u32;
    for _ in 0..iterations {
        let mut sum = 0.0;
        for &d in diffs {
            sum += if rng.random::<bool>() { d } else { -d };
        }
        if (sum / n).abs() >= observed.abs() {
            at_least_as_extreme += 1;
        }
    }
    Ok(SignFlipTest {
        observed_mean: observed,
        p_value: (at_least_as_extreme + 1) as f64 / (iterations + 1) as f64,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ap_reference_case() {
        // hits at ranks 1 and 3: (1/1 + 2/3) / 2
        let ap = ap_at_k(&["a", "b", "c"], &["a", "c"], 3, ApDenominator::HitsInTopK).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
        let ap = ap_at_k(&["a", "b", "c"], &["a", "c"], 3, ApDenominator::TruthCapped).unwrap();
        assert!((ap - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn ap_denominators_differ_when_hits_are_missing() {
        let ranked = ["b", "a"];
        let truth = ["a", "c"];
        let top = ap_at_k(&ranked, &truth, 2, ApDenominator::HitsInTopK).unwrap();
        assert!((top - 0.5).abs() < 1e-15);
        let capped = ap_at_k(&ranked, &truth, 2, ApDenominator::TruthCapped).unwrap();
        assert!((capped - 0.25).abs() < 1e-15);
    }

    #[test]
    fn ap_edge_cases() {
        assert_eq!(
            ap_at_k(&["x"], &["y"], 3, ApDenominator::HitsInTopK).unwrap(),
            0.0
        );
        assert_eq!(
            ap_at_k::<&str>(&[], &["y"], 3, ApDenominator::HitsInTopK).unwrap(),
            0.0
        );
        assert_eq!(
            ap_at_k(&["x"], &["x"], 0, ApDenominator::HitsInTopK),
            Err(MetricError::ZeroCutoff)
        );
        assert_eq!(
            ap_at_k::<&str>(&["x"], &[], 1, ApDenominator::HitsInTopK),
            Err(MetricError::EmptyTruth)
        );
        // perfect ranking scores 1 under both conventions
        for denom in [ApDenominator::HitsInTopK, ApDenominator::TruthCapped] {
            assert_eq!(ap_at_k(&["a", "b"], &["a", "b"], 2, denom).unwrap(), 1.0);
        }
    }

    #[test]
    fn map_is_the_mean() {
        let cases = vec![
            (vec!["a", "b", "c"], vec!["a", "c"]),
            (vec!["b", "a", "c"], vec!["a"]),
        ];
        let map = map_at_k(&cases, 3, ApDenominator::HitsInTopK).unwrap();
        assert!((map - (5.0 / 6.0 + 0.5) / 2.0).abs() < 1e-15);
        assert_eq!(
            map_at_k::<&str>(&[], 3, ApDenominator::HitsInTopK),
            Err(MetricError::EmptyInput)
        );
    }

    #[test]
    fn auroc_hand_cases() {
        let scores = [0.9, 0.8, 0.7, 0.6];
        let labels = [true, false, true, false];
        assert!((auroc(&scores, &labels).unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(
            auroc(&[1.0, 2.0], &[false, true]).unwrap(),
            1.0
        );
        assert_eq!(
            auroc(&[2.0, 1.0], &[false, true]).unwrap(),
            0.0
        );
        // all tied: exactly one half
        assert_eq!(
            auroc(&[3.0, 3.0, 3.0, 3.0], &[true, false, true, false]).unwrap(),
            0.5
        );
    }

    #[test]
    fn auroc_rejects_degenerate_input() {
        assert_eq!(
            auroc(&[1.0], &[true, false]),
            Err(MetricError::LengthMismatch {
                scores: 1,
                labels: 2
            })
        );
        assert_eq!(auroc(&[], &[]), Err(MetricError::EmptyInput));
        assert_eq!(
            auroc(&[1.0, 2.0], &[true, true]),
            Err(MetricError::SingleClass)
        );
        assert_eq!(
            auroc(&[f64::NAN, 2.0], &[true, false]),
            Err(MetricError::NonFinite(0))
        );
    }

    fn auroc_by_pair_counting(scores: &[f64], labels: &[bool]) -> f64 {
        let pos: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &l)| l)
            .map(|(&s, _)| s)
            .collect();
        let neg: Vec<f64> = scores
            .iter()
            .zip(labels)
            .filter(|(_, &l)| !l)
            .map(|(&s, _)| s)
            .collect();
        let mut sum = 0.0;
        for &p in &pos {
            for &n in &neg {
                sum += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        sum / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn rank_form_equals_pair_counting_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let n = 2 + rng.random_range(0..40);
            // coarse grid forces plenty of ties
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64 / 3.0).collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random::<bool>()).collect();
            labels[0] = true;
            labels[1] = false;
            let fast = auroc(&scores, &labels).unwrap();
            let slow = auroc_by_pair_counting(&scores, &labels);
            assert!((fast - slow).abs() < 1e-12, "fast {fast} slow {slow}");
        }
    }

    #[test]
    fn sign_flip_detects_a_consistent_effect() {
        let diffs = vec![0.2; 12];
        let test = paired_sign_flip(&diffs, 2_000, 9).unwrap();
        assert!(test.p_value < 0.05, "p {}", test.p_value);

        let null: Vec<f64> = (0..12).map(|i| if i % 2 == 0 { 0.2 } else { -0.2 }).collect();
        let test = paired_sign_flip(&null, 2_000, 9).unwrap();
        assert!(test.p_value > 0.05, "p {}", test.p_value);
    }

    #[test]
    fn sign_flip_is_deterministic() {
        let diffs = vec![0.1, -0.3, 0.2, 0.05];
        let a = paired_sign_flip(&diffs, 500, 3).unwrap();
        let b = paired_sign_flip(&diffs, 500, 3).unwrap();
        assert_eq!(a.p_value, b.p_value);
        assert!(paired_sign_flip(&[], 10, 0).is_err());
        assert!(paired_sign_flip(&[1.0], 0, 0).is_err());
    }

    proptest! {
        #[test]
        fn auroc_is_invariant_under_monotone_maps(
            raw in proptest::collection::vec((0u8..20, proptest::bool::ANY), 4..40),
        ) {
            let scores: Vec<f64> = raw.iter().map(|&(s, _)| s as f64).collect();
            let labels: Vec<bool> = raw.iter().map(|&(_, l)| l).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let transformed: Vec<f64> = scores.iter().map(|&s| 3.0 * s + 7.0).collect();
            let a = auroc(&scores, &labels).unwrap();
            let b = auroc(&transformed, &labels).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn ap_is_monotone_in_k_for_capped_denominator(
            ranked in proptest::collection::vec(0u8..30, 1..20),
            truth in proptest::collection::vec(0u8..30, 1..6),
        ) {
            // with the truth-capped denominator, extending the cutoff
            // beyond |truth| can only add hits
            let mut seen = std::collections::BTreeSet::new();
            let ranked: Vec<u8> = ranked.into_iter().filter(|x| seen.insert(*x)).collect();
            prop_assume!(!ranked.is_empty());
            let t = truth.len();
            let ap_small = ap_at_k(&ranked, &truth, t, ApDenominator::TruthCapped).unwrap();
            let ap_large =
                ap_at_k(&ranked, &truth, ranked.len().max(t), ApDenominator::TruthCapped).unwrap();
            prop_assert!(ap_large >= ap_small - 1e-12);
        }
    }
}
