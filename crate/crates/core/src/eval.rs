//! Pixel-level anomaly localization metrics: F1 with an exact
//! optimal-threshold sweep, rank-based AUROC, and the class-imbalance
//! diagnostics that motivate reporting both.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("scores ({scores}) and truth ({truth}) lengths differ")]
    LengthMismatch { scores: usize, truth: usize },
    #[error("truth contains a non-binary value {0}")]
    NonBinaryTruth(u8),
    #[error("degenerate truth: needs at least one positive and one negative pixel")]
    DegenerateTruth,
    #[error("empty input")]
    EmptyInput,
    #[error("scores contain a non-finite value {0}")]
    NonFiniteScore(f32),
}

/// Confusion-derived scores at one threshold. Positive prediction is
/// `score >= threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Stats {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

fn check_inputs(scores: &[f32], truth: &[u8]) -> Result<(), EvalError> {
    if scores.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            truth: truth.len(),
        });
    }
    if scores.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if let Some(&bad) = truth.iter().find(|&&t| t > 1) {
        return Err(EvalError::NonBinaryTruth(bad));
    }
    if let Some(&bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(EvalError::NonFiniteScore(bad));
    }
    Ok(())
}

fn f1_from_counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> F1Stats {
    let precision = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let recall = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    // F1 defined as 0 when precision + recall = 0.
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    F1Stats {
        f1,
        precision,
        recall,
        tp,
        fp,
        fn_,
        tn,
    }
}

/// Pixel F1 / precision / recall at a fixed threshold.
pub fn pixel_f1(scores: &[f32], truth: &[u8], threshold: f32) -> Result<F1Stats, EvalError> {
    check_inputs(scores, truth)?;
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (&s, &t) in scores.iter().zip(truth) {
        match (s >= threshold, t == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(f1_from_counts(tp, fp, fn_, tn))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub f1_max: f64,
    pub threshold: f32,
    pub stats: F1Stats,
}

/// Exact maximum-F1 threshold sweep.
///
/// Every distinct score is a candidate threshold (plus `+inf` for the
/// all-negative operating point). Ties on F1 resolve to the lowest
/// threshold. Runs in `O(n log n)`.
pub fn optimal_f1_sweep(scores: &[f32], truth: &[u8]) -> Result<SweepResult, EvalError> {
    check_inputs(scores, truth)?;
    let total_pos: u64 = truth.iter().map(|&t| t as u64).sum();
    let total_neg = truth.len() as u64 - total_pos;
    if total_pos == 0 || total_neg == 0 {
        return Err(EvalError::DegenerateTruth);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    // Walk thresholds from high to low; at threshold = scores[i] every pixel
    // with score >= scores[i] is predicted positive.
    let mut best = SweepResult {
        f1_max: 0.0,
        threshold: f32::INFINITY,
        stats: f1_from_counts(0, 0, total_pos, total_neg),
    };
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let value = scores[order[i]];
        // Consume the whole tie group before evaluating.
        while i < order.len() && scores[order[i]] == value {
            if truth[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let stats = f1_from_counts(tp, fp, total_pos - tp, total_neg - fp);
        if stats.f1 > best.f1_max || (stats.f1 == best.f1_max && value < best.threshold) {
            best = SweepResult {
                f1_max: stats.f1,
                threshold: value,
                stats,
            };
        }
    }
    Ok(best)
}

/// Pixel AUROC as the Mann-Whitney statistic
/// `P(score_pos > score_neg) + 0.5 * P(score_pos == score_neg)`,
/// computed with midranks.
pub fn pixel_auroc(scores: &[f32], truth: &[u8]) -> Result<f64, EvalError> {
    check_inputs(scores, truth)?;
    let n_pos: u64 = truth.iter().map(|&t| t as u64).sum();
    let n_neg = truth.len() as u64 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::DegenerateTruth);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let value = scores[order[i]];
        let start = i;
        while i < order.len() && scores[order[i]] == value {
            i += 1;
        }
        // Midrank for the tie group spanning ranks start+1 ..= i (1-based).
        let midrank = (start + 1 + i) as f64 / 2.0;
        for &idx in &order[start..i] {
            if truth[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
    }
    let n_pos_f = n_pos as f64;
    let u = rank_sum_pos - n_pos_f * (n_pos_f + 1.0) / 2.0;
    Ok(u / (n_pos_f * n_neg as f64))
}

/// Aggregate report for one (method, augmentation) evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub pixel_f1: f64,
    pub pixel_auroc: f64,
    pub optimal_threshold: f32,
    pub precision: f64,
    pub recall: f64,
    pub per_image_f1: Vec<f64>,
    pub confusion: ConfusionCounts,
    pub anomalous_pixel_fraction: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Pooled (micro) evaluation over per-image score maps and binary masks.
/// Per-image F1 values are reported at the pooled optimal threshold.
pub fn evaluate_pooled(
    score_maps: &[Vec<f32>],
    masks: &[Vec<u8>],
) -> Result<EvalReport, EvalError> {
    if score_maps.len() != masks.len() {
        return Err(EvalError::LengthMismatch {
            scores: score_maps.len(),
            truth: masks.len(),
        });
    }
    let scores: Vec<f32> = score_maps.iter().flatten().copied().collect();
    let truth: Vec<u8> = masks.iter().flatten().copied().collect();
    let sweep = optimal_f1_sweep(&scores, &truth)?;
    let auroc = pixel_auroc(&scores, &truth)?;
    let per_image_f1 = score_maps
        .iter()
        .zip(masks)
        .map(|(s, m)| pixel_f1(s, m, sweep.threshold).map(|st| st.f1))
        .collect::<Result<Vec<_>, _>>()?;
    let pos: u64 = truth.iter().map(|&t| t as u64).sum();
    Ok(EvalReport {
        pixel_f1: sweep.f1_max,
        pixel_auroc: auroc,
        optimal_threshold: sweep.threshold,
        precision: sweep.stats.precision,
        recall: sweep.stats.recall,
        per_image_f1,
        confusion: ConfusionCounts {
            tp: sweep.stats.tp,
            fp: sweep.stats.fp,
            fn_: sweep.stats.fn_,
            tn: sweep.stats.tn,
        },
        anomalous_pixel_fraction: pos as f64 / truth.len() as f64,
    })
}

/// Diagnostics quantifying how optimistic accuracy and AUROC are under
/// heavy class imbalance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImbalanceDiagnostic {
    /// Accuracy of the predictor that labels every pixel non-anomalous.
    pub all_negative_accuracy: f64,
    /// F1 of the all-negative predictor (always 0 when positives exist).
    pub all_negative_f1: f64,
    pub pixel_f1: f64,
    pub pixel_auroc: f64,
    /// Set when AUROC looks strong while F1 stays weak.
    pub optimistic_auroc: bool,
}

/// Flag threshold for "AUROC close to 1 while F1 is low".
pub const OPTIMISTIC_AUROC_MIN: f64 = 0.95;
pub const OPTIMISTIC_F1_MAX: f64 = 0.5;

pub fn imbalance_demo(report: &EvalReport) -> ImbalanceDiagnostic {
    ImbalanceDiagnostic {
        all_negative_accuracy: 1.0 - report.anomalous_pixel_fraction,
        all_negative_f1: 0.0,
        pixel_f1: report.pixel_f1,
        pixel_auroc: report.pixel_auroc,
        optimistic_auroc: report.pixel_auroc > OPTIMISTIC_AUROC_MIN
            && report.pixel_f1 < OPTIMISTIC_F1_MAX,
    }
}

/// Brute-force oracles. Test-only reference implementations, kept
/// independent of the fast paths above.
pub mod oracle {
    use super::*;

    /// O(n * distinct) sweep: evaluates `pixel_f1` at every distinct score.
    pub fn brute_force_sweep(scores: &[f32], truth: &[u8]) -> Result<SweepResult, EvalError> {
        check_inputs(scores, truth)?;
        let total_pos: u64 = truth.iter().map(|&t| t as u64).sum();
        if total_pos == 0 || total_pos == truth.len() as u64 {
            return Err(EvalError::DegenerateTruth);
        }
        let mut candidates: Vec<f32> = scores.to_vec();
        candidates.sort_by(f32::total_cmp);
        candidates.dedup();
        candidates.push(f32::INFINITY);
        let mut best: Option<SweepResult> = None;
        for &th in &candidates {
            let stats = pixel_f1(scores, truth, th)?;
            let better = match &best {
                None => true,
                Some(b) => stats.f1 > b.f1_max || (stats.f1 == b.f1_max && th < b.threshold),
            };
            if better {
                best = Some(SweepResult {
                    f1_max: stats.f1,
                    threshold: th,
                    stats,
                });
            }
        }
        Ok(best.expect("candidates nonempty"))
    }

    /// O(n^2) pairwise Mann-Whitney AUROC.
    pub fn pairwise_auroc(scores: &[f32], truth: &[u8]) -> Result<f64, EvalError> {
        check_inputs(scores, truth)?;
        let pos: Vec<f32> = scores
            .iter()
            .zip(truth)
            .filter(|(_, &t)| t == 1)
            .map(|(&s, _)| s)
            .collect();
        let neg: Vec<f32> = scores
            .iter()
            .zip(truth)
            .filter(|(_, &t)| t == 0)
            .map(|(&s, _)| s)
            .collect();
        if pos.is_empty() || neg.is_empty() {
            return Err(EvalError::DegenerateTruth);
        }
        let mut acc = 0.0f64;
        for &p in &pos {
            for &n in &neg {
                if p > n {
                    acc += 1.0;
                } else if p == n {
                    acc += 0.5;
                }
            }
        }
        Ok(acc / (pos.len() as f64 * neg.len() as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_prediction_is_f1_one() {
        let truth = [1u8, 0, 1, 0];
        let scores = [1.0f32, 0.0, 1.0, 0.0];
        let s = pixel_f1(&scores, &truth, 0.5).unwrap();
        assert_eq!(s.f1, 1.0);
    }

    #[test]
    fn all_negative_prediction_is_f1_zero() {
        let truth = [1u8, 0, 1, 0];
        let scores = [0.0f32; 4];
        let s = pixel_f1(&scores, &truth, 0.5).unwrap();
        assert_eq!(s.f1, 0.0);
        assert_eq!(s.precision, 0.0);
        assert_eq!(s.recall, 0.0);
    }

    #[test]
    fn hand_counted_confusion() {
        let scores = [0.9f32, 0.1, 0.8, 0.4, 0.2, 0.7];
        let truth = [1u8, 0, 1, 0, 0, 1];
        let s = pixel_f1(&scores, &truth, 0.5).unwrap();
        assert_eq!((s.tp, s.fp, s.fn_), (3, 0, 0));
        assert_eq!(s.f1, 1.0);
    }

    #[test]
    fn threshold_is_inclusive() {
        let scores = [0.5f32, 0.49999];
        let truth = [1u8, 0];
        let s = pixel_f1(&scores, &truth, 0.5).unwrap();
        assert_eq!((s.tp, s.fp), (1, 0));
    }

    #[test]
    fn input_validation() {
        assert!(matches!(
            pixel_f1(&[0.1], &[0, 1], 0.5),
            Err(EvalError::LengthMismatch { .. })
        ));
        assert!(matches!(
            pixel_f1(&[0.1, 0.2], &[0, 2], 0.5),
            Err(EvalError::NonBinaryTruth(2))
        ));
        assert!(matches!(pixel_f1(&[], &[], 0.5), Err(EvalError::EmptyInput)));
    }

    #[test]
    fn sweep_perfectly_separable() {
        let scores = [0.9f32, 0.8, 0.2, 0.1];
        let truth = [1u8, 1, 0, 0];
        let r = optimal_f1_sweep(&scores, &truth).unwrap();
        assert_eq!(r.f1_max, 1.0);
        assert_eq!(r.threshold, 0.8);
    }

    #[test]
    fn sweep_constant_scores_gives_all_positive_point() {
        let scores = [0.3f32; 6];
        let truth = [1u8, 0, 1, 0, 0, 0];
        let r = optimal_f1_sweep(&scores, &truth).unwrap();
        let all_pos = pixel_f1(&scores, &truth, 0.3).unwrap();
        assert_eq!(r.f1_max, all_pos.f1);
        assert_eq!(r.threshold, 0.3);
    }

    #[test]
    fn sweep_degenerate_truth_errors() {
        assert!(matches!(
            optimal_f1_sweep(&[0.1, 0.2], &[1, 1]),
            Err(EvalError::DegenerateTruth)
        ));
        assert!(matches!(
            optimal_f1_sweep(&[0.1, 0.2], &[0, 0]),
            Err(EvalError::DegenerateTruth)
        ));
    }

    #[test]
    fn sweep_matches_brute_force_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for case in 0..100 {
            let n = rng.random_range(4..256);
            let quantized = case % 2 == 0;
            let scores: Vec<f32> = (0..n)
                .map(|_| {
                    let v: f32 = rng.random();
                    if quantized {
                        (v * 8.0).round() / 8.0
                    } else {
                        v
                    }
                })
                .collect();
            let mut truth: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            truth[0] = 1;
            truth[1] = 0;
            let fast = optimal_f1_sweep(&scores, &truth).unwrap();
            let slow = oracle::brute_force_sweep(&scores, &truth).unwrap();
            assert_eq!(fast.f1_max, slow.f1_max);
            assert_eq!(fast.threshold, slow.threshold);
        }
    }

    #[test]
    fn auroc_separated_and_tied() {
        let truth = [1u8, 1, 0, 0];
        assert_eq!(pixel_auroc(&[0.9, 0.8, 0.2, 0.1], &truth).unwrap(), 1.0);
        assert_eq!(pixel_auroc(&[0.5; 4], &truth).unwrap(), 0.5);
    }

    #[test]
    fn auroc_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for case in 0..40 {
            let n = rng.random_range(4..200);
            let scores: Vec<f32> = (0..n)
                .map(|_| {
                    let v: f32 = rng.random();
                    if case % 2 == 0 {
                        (v * 4.0).round() / 4.0
                    } else {
                        v
                    }
                })
                .collect();
            let mut truth: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            truth[0] = 1;
            truth[1] = 0;
            let fast = pixel_auroc(&scores, &truth).unwrap();
            let slow = oracle::pairwise_auroc(&scores, &truth).unwrap();
            assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
        }
    }

    #[test]
    fn imbalance_demo_at_paper_fraction() {
        // 0.22% positives: the all-negative predictor reaches 0.9978
        // accuracy yet F1 0.
        let report = EvalReport {
            pixel_f1: 0.0,
            pixel_auroc: 0.5,
            optimal_threshold: 0.0,
            precision: 0.0,
            recall: 0.0,
            per_image_f1: vec![],
            confusion: ConfusionCounts {
                tp: 0,
                fp: 0,
                fn_: 22,
                tn: 9978,
            },
            anomalous_pixel_fraction: 0.0022,
        };
        let d = imbalance_demo(&report);
        assert!((d.all_negative_accuracy - 0.9978).abs() < 1e-12);
        assert_eq!(d.all_negative_f1, 0.0);
        assert!(!d.optimistic_auroc);
    }

    #[test]
    fn imbalance_demo_balanced_and_optimistic_flag() {
        let mut report = EvalReport {
            pixel_f1: 0.3,
            pixel_auroc: 0.99,
            optimal_threshold: 0.0,
            precision: 0.0,
            recall: 0.0,
            per_image_f1: vec![],
            confusion: ConfusionCounts {
                tp: 0,
                fp: 0,
                fn_: 50,
                tn: 50,
            },
            anomalous_pixel_fraction: 0.5,
        };
        let d = imbalance_demo(&report);
        assert!((d.all_negative_accuracy - 0.5).abs() < 1e-12);
        assert!(d.optimistic_auroc);
        report.pixel_f1 = 0.8;
        assert!(!imbalance_demo(&report).optimistic_auroc);
    }

    #[test]
    fn pooled_report_internally_consistent() {
        let maps = vec![vec![0.9f32, 0.1, 0.4, 0.2], vec![0.8, 0.7, 0.1, 0.05]];
        let masks = vec![vec![1u8, 0, 0, 0], vec![1, 1, 0, 0]];
        let r = evaluate_pooled(&maps, &masks).unwrap();
        assert_eq!(r.confusion.total(), 8);
        let p = r.precision;
        let q = r.recall;
        assert!((r.pixel_f1 - 2.0 * p * q / (p + q)).abs() < 1e-12);
        assert_eq!(r.per_image_f1.len(), 2);
        assert!((r.anomalous_pixel_fraction - 3.0 / 8.0).abs() < 1e-12);
    }

    proptest! {
        /// Rank statistics are invariant under strictly monotone transforms.
        #[test]
        fn monotone_transform_invariance(
            mut scores in proptest::collection::vec(0.0f32..1.0, 8..64),
            flips in proptest::collection::vec(proptest::bool::ANY, 8..64),
        ) {
            let n = scores.len().min(flips.len());
            scores.truncate(n);
            let mut truth: Vec<u8> = flips[..n].iter().map(|&b| b as u8).collect();
            truth[0] = 1;
            truth[1] = 0;
            let transformed: Vec<f32> = scores.iter().map(|&s| (3.0 * s).exp()).collect();

            let a0 = pixel_auroc(&scores, &truth).unwrap();
            let a1 = pixel_auroc(&transformed, &truth).unwrap();
            prop_assert!((a0 - a1).abs() < 1e-9);

            let f0 = optimal_f1_sweep(&scores, &truth).unwrap().f1_max;
            let f1 = optimal_f1_sweep(&transformed, &truth).unwrap().f1_max;
            prop_assert!((f0 - f1).abs() < 1e-9);
        }

        /// Swapping class labels maps AUROC to 1 - AUROC.
        #[test]
        fn label_swap_flips_auroc(
            scores in proptest::collection::vec(0.0f32..1.0, 8..64),
        ) {
            let n = scores.len();
            let mut truth: Vec<u8> = (0..n).map(|i| (i % 3 == 0) as u8).collect();
            truth[0] = 1;
            truth[1] = 0;
            let flipped: Vec<u8> = truth.iter().map(|&t| 1 - t).collect();
            let a = pixel_auroc(&scores, &truth).unwrap();
            let b = pixel_auroc(&scores, &flipped).unwrap();
            prop_assert!((a + b - 1.0).abs() < 1e-9);
        }
    }
}
