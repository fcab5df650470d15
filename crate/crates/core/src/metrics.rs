//! Boundary-quality metrics: average precision over ranked boundary scores,
//! mean intersection-over-union between scene segmentations, thresholded
//! F1, and the boundary-label ↔ scene-interval conversion they rely on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An ordered list of `[start, end]` inclusive shot intervals that tile
/// `0..num_shots` without gaps or overlap.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SceneSegmentation {
    scenes: Vec<(usize, usize)>,
}

impl SceneSegmentation {
    /// Builds scenes from per-shot boundary labels (1 marks the last shot
    /// of a scene). The final shot always closes the final scene, whatever
    /// its label says.
    pub fn from_boundaries(labels: &[u8]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Invalid("cannot segment an empty shot list".into()));
        }
        if let Some(bad) = labels.iter().find(|v| **v > 1) {
            return Err(Error::Invalid(format!(
                "boundary labels must be 0 or 1, got {bad}"
            )));
        }
        let n = labels.len();
        let mut scenes = Vec::new();
        let mut start = 0;
        for (i, &l) in labels.iter().enumerate() {
            if l == 1 || i + 1 == n {
                scenes.push((start, i));
                start = i + 1;
            }
        }
        Ok(SceneSegmentation { scenes })
    }

    pub fn scenes(&self) -> &[(usize, usize)] {
        &self.scenes
    }

    /// Per-shot boundary labels; the final shot is always 1.
    pub fn to_boundaries(&self) -> Vec<u8> {
        let mut labels = vec![0u8; self.num_shots()];
        for &(_, end) in &self.scenes {
            labels[end] = 1;
        }
        labels
    }

    pub fn num_shots(&self) -> usize {
        self.scenes.last().map_or(0, |&(_, end)| end + 1)
    }
}

fn validate_scored(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Invalid("no scores to evaluate".into()));
    }
    if scores.len() != labels.len() {
        return Err(Error::Invalid(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite score in evaluation".into()));
    }
    if labels.iter().any(|l| *l > 1) {
        return Err(Error::Invalid("labels must be 0 or 1".into()));
    }
    Ok(())
}

/// Average precision with the precision-at-each-positive-rank estimator:
/// sort by score descending (ties keep original order), then average the
/// precision observed at every positive's rank.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    validate_scored(scores, labels)?;
    let positives = labels.iter().filter(|l| **l == 1).count();
    if positives == 0 {
        return Err(Error::Invalid(
            "average precision undefined without a positive label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Which directional means enter the segmentation overlap score.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiouMode {
    /// Mean of both directional means (the default convention).
    Symmetric,
    /// Only the mean over ground-truth scenes of their best overlap.
    GroundTruthOnly,
}

fn interval_iou(a: (usize, usize), b: (usize, usize)) -> f64 {
    let inter_lo = a.0.max(b.0);
    let inter_hi = a.1.min(b.1);
    let inter = if inter_hi >= inter_lo {
        inter_hi - inter_lo + 1
    } else {
        0
    };
    let union = (a.1 - a.0 + 1) + (b.1 - b.0 + 1) - inter;
    inter as f64 / union as f64
}

fn directional_mean(from: &SceneSegmentation, to: &SceneSegmentation) -> f64 {
    let sum: f64 = from
        .scenes()
        .iter()
        .map(|&a| {
            to.scenes()
                .iter()
                .map(|&b| interval_iou(a, b))
                .fold(0.0, f64::max)
        })
        .sum();
    sum / from.scenes().len() as f64
}

/// Mean intersection-over-union between two segmentations of the same
/// shots; each scene is matched with its best-overlapping counterpart.
pub fn miou(pred: &SceneSegmentation, gt: &SceneSegmentation, mode: MiouMode) -> Result<f64> {
    if pred.num_shots() != gt.num_shots() {
        return Err(Error::Invalid(format!(
            "segmentations cover different shot counts: {} vs {}",
            pred.num_shots(),
            gt.num_shots()
        )));
    }
    Ok(match mode {
        MiouMode::Symmetric => {
            0.5 * (directional_mean(gt, pred) + directional_mean(pred, gt))
        }
        MiouMode::GroundTruthOnly => directional_mean(gt, pred),
    })
}

/// F1 after binarizing scores at `threshold` (a score equal to the
/// threshold counts as positive). Returns 0 when precision and recall are
/// both zero.
pub fn f1_at(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    validate_scored(scores, labels)?;
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let precision = if tp + fp > 0 {
        tp as f64 / (tp + fp) as f64
    } else {
        0.0
    };
    let recall = if tp + fn_ > 0 {
        tp as f64 / (tp + fn_) as f64
    } else {
        0.0
    };
    Ok(if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_and_inverted_rankings() {
        assert_eq!(average_precision(&[0.9, 0.1], &[1, 0]).unwrap(), 1.0);
        assert_eq!(average_precision(&[0.1, 0.9], &[1, 0]).unwrap(), 0.5);
    }

    #[test]
    fn equal_scores_fall_back_to_index_order() {
        // Positives sit at original indices 1 and 3, so the tie rule ranks
        // them second and fourth: (1/2 + 2/4) / 2.
        let ap = average_precision(&[0.5, 0.5, 0.5, 0.5], &[0, 1, 0, 1]).unwrap();
        assert_eq!(ap, 0.5);
    }

    #[test]
    fn degenerate_score_vectors_are_rejected() {
        assert!(average_precision(&[], &[]).is_err());
        assert!(average_precision(&[0.5], &[1, 0]).is_err());
        assert!(average_precision(&[0.5, 0.5], &[0, 0]).is_err());
        assert!(average_precision(&[f64::NAN, 0.5], &[1, 0]).is_err());
        assert!(average_precision(&[0.5, 0.5], &[0, 2]).is_err());
    }

    #[test]
    fn ap_ignores_monotone_score_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.gen_range(2..20);
            // Coarse dyadic grid: the transforms below stay exact, and ties
            // occur often enough to exercise the tie rule.
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..64) as f64 / 64.0).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            labels[0] = 1;
            let base = average_precision(&scores, &labels).unwrap();
            let shifted: Vec<f64> = scores.iter().map(|s| s + 1.0).collect();
            let scaled: Vec<f64> = scores.iter().map(|s| 4.0 * s).collect();
            assert_eq!(average_precision(&shifted, &labels).unwrap(), base);
            assert_eq!(average_precision(&scaled, &labels).unwrap(), base);
        }
    }

    #[test]
    fn boundary_labels_become_scene_intervals() {
        let seg = SceneSegmentation::from_boundaries(&[0, 0, 1, 0, 1]).unwrap();
        assert_eq!(seg.scenes(), &[(0, 2), (3, 4)]);
        let seg = SceneSegmentation::from_boundaries(&[1, 1, 1]).unwrap();
        assert_eq!(seg.scenes(), &[(0, 0), (1, 1), (2, 2)]);
        // The final shot closes its scene even without an explicit 1.
        let seg = SceneSegmentation::from_boundaries(&[0, 0, 0, 0]).unwrap();
        assert_eq!(seg.scenes(), &[(0, 3)]);
        assert_eq!(seg.num_shots(), 4);
        assert!(SceneSegmentation::from_boundaries(&[]).is_err());
        assert!(SceneSegmentation::from_boundaries(&[2, 0]).is_err());
    }

    #[test]
    fn boundary_round_trip_forces_only_the_final_shot() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let n = rng.gen_range(1..30);
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            let seg = SceneSegmentation::from_boundaries(&labels).unwrap();
            let mut expected = labels.clone();
            *expected.last_mut().unwrap() = 1;
            assert_eq!(seg.to_boundaries(), expected);
            assert_eq!(seg.num_shots(), n);
            // Intervals tile the range.
            let mut next = 0;
            for &(s, e) in seg.scenes() {
                assert_eq!(s, next);
                assert!(e >= s);
                next = e + 1;
            }
            assert_eq!(next, n);
        }
    }

    fn seg(scenes: &[(usize, usize)]) -> SceneSegmentation {
        let mut labels = vec![0u8; scenes.last().unwrap().1 + 1];
        for &(_, e) in scenes {
            labels[e] = 1;
        }
        SceneSegmentation::from_boundaries(&labels).unwrap()
    }

    #[test]
    fn identical_segmentations_score_one() {
        let a = seg(&[(0, 3), (4, 9)]);
        assert_eq!(miou(&a, &a, MiouMode::Symmetric).unwrap(), 1.0);
    }

    #[test]
    fn halved_scene_scores_exactly_one_half() {
        // One ten-shot scene against its two halves, in both roles.
        let whole = seg(&[(0, 9)]);
        let halves = seg(&[(0, 4), (5, 9)]);
        let a = miou(&halves, &whole, MiouMode::Symmetric).unwrap();
        assert!((a - 0.5).abs() < 1e-9, "got {a}");
        let b = miou(&whole, &halves, MiouMode::Symmetric).unwrap();
        assert!((b - 0.5).abs() < 1e-9, "got {b}");
    }

    #[test]
    fn ground_truth_only_mode_drops_the_prediction_direction() {
        let whole = seg(&[(0, 9)]);
        let halves = seg(&[(0, 4), (5, 9)]);
        // gt direction alone: the single gt scene overlaps each half at 0.5.
        let v = miou(&halves, &whole, MiouMode::GroundTruthOnly).unwrap();
        assert!((v - 0.5).abs() < 1e-9);
        // Reversed roles: mean over the two gt halves, each best-matched by
        // the whole at 0.5.
        let v = miou(&whole, &halves, MiouMode::GroundTruthOnly).unwrap();
        assert!((v - 0.5).abs() < 1e-9);
    }

    #[test]
    fn symmetric_mode_commutes_and_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.gen_range(2..25);
            let mk = |rng: &mut ChaCha8Rng| -> SceneSegmentation {
                let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
                SceneSegmentation::from_boundaries(&labels).unwrap()
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            let ab = miou(&a, &b, MiouMode::Symmetric).unwrap();
            let ba = miou(&b, &a, MiouMode::Symmetric).unwrap();
            assert_eq!(ab, ba);
            assert!(ab > 0.0 && ab <= 1.0);
        }
        let short = seg(&[(0, 3)]);
        let long = seg(&[(0, 4)]);
        assert!(miou(&short, &long, MiouMode::Symmetric).is_err());
    }

    #[test]
    fn f1_hand_cases() {
        assert_eq!(f1_at(&[0.9, 0.1], &[1, 0], 0.5).unwrap(), 1.0);
        assert_eq!(f1_at(&[0.1, 0.2], &[1, 0], 0.5).unwrap(), 0.0, "zero recall");
        // TP=1, FP=1, FN=1: precision and recall both one half.
        assert_eq!(f1_at(&[0.9, 0.9, 0.1], &[1, 0, 1], 0.5).unwrap(), 0.5);
        // A score exactly at the threshold counts as positive.
        assert_eq!(f1_at(&[0.5], &[1], 0.5).unwrap(), 1.0);
    }

    #[test]
    fn metrics_stay_in_unit_range_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let n = rng.gen_range(1..20);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            labels[rng.gen_range(0..n)] = 1;
            let ap = average_precision(&scores, &labels).unwrap();
            assert!((0.0..=1.0).contains(&ap));
            let f1 = f1_at(&scores, &labels, rng.gen_range(0.0..1.0)).unwrap();
            assert!((0.0..=1.0).contains(&f1));
        }
    }
}
