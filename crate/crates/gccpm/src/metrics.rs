//! Per-stage heatmap regression loss and distance-thresholded accuracy
//! metrics.

use crate::codec::{DecodedPose, KeypointSet, KEYPOINT_NAMES, NUM_KEYPOINTS};
use crate::scalar::Scalar;
use crate::tensor::{add, mul, scale, sub, sum_all, Tensor, TensorError, TensorResult};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricsError {
    #[error("sample {index} is missing a positive head_size")]
    MissingHeadSize { index: usize },
    #[error("prediction/ground-truth count mismatch: {preds} vs {gts}")]
    CountMismatch { preds: usize, gts: usize },
    #[error("no samples to evaluate")]
    Empty,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Squared-error heatmap loss for one stage: `L = (1/N)·Σ_n Σ_xy (G_n − P_n)²`
/// where N is the number of heatmap channels. Channel weights (one per map;
/// 0 for absent keypoints) multiply the summand. Batched inputs are averaged
/// over the batch.
pub fn single_stage_loss<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    channel_weights: &[f64],
) -> TensorResult<Tensor<T>> {
    if pred.shape() != gt.shape() {
        return Err(TensorError::ShapeMismatch {
            context: "stage_loss",
            left: pred.shape().to_vec(),
            right: gt.shape().to_vec(),
        });
    }
    let shape = pred.shape();
    let (batch, channels, plane) = match shape.len() {
        3 => (1, shape[0], shape[1] * shape[2]),
        4 => (shape[0], shape[1], shape[2] * shape[3]),
        _ => {
            return Err(TensorError::RankMismatch {
                context: "stage_loss",
                expected: 4,
                shape: shape.to_vec(),
            })
        }
    };
    if channel_weights.len() != batch * channels {
        return Err(TensorError::ShapeMismatch {
            context: "stage_loss channel weights",
            left: vec![channel_weights.len()],
            right: vec![batch * channels],
        });
    }
    let mut mask = Vec::with_capacity(pred.numel());
    for &w in channel_weights {
        mask.extend(std::iter::repeat(T::cast(w)).take(plane));
    }
    let mask = Tensor::from_vec(shape.to_vec(), mask)?;
    let diff = sub(gt, pred)?;
    let weighted = mul(&mul(&diff, &diff)?, &mask)?;
    // Divide by the channel count (and mean over the batch).
    Ok(scale(
        &sum_all(&weighted),
        T::cast(1.0 / (channels as f64 * batch as f64)),
    ))
}

/// Total loss over all stages: the single-stage loss is computed per stage
/// and summed.
pub fn stage_loss<T: Scalar>(
    pred_stages: &[Tensor<T>],
    gt: &Tensor<T>,
    channel_weights: &[f64],
) -> TensorResult<Tensor<T>> {
    let mut total: Option<Tensor<T>> = None;
    for pred in pred_stages {
        let l = single_stage_loss(pred, gt, channel_weights)?;
        total = Some(match total {
            None => l,
            Some(acc) => add(&acc, &l)?,
        });
    }
    total.ok_or(TensorError::EmptyConcat)
}

/// Distance-threshold accuracy over a dataset.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalResult {
    pub per_joint_pckh: [f64; NUM_KEYPOINTS],
    pub mean_pckh: f64,
    pub auc: f64,
    pub num_samples: usize,
}

fn joint_hits(
    preds: &[DecodedPose],
    gts: &[KeypointSet],
    alpha: f64,
) -> Result<([usize; NUM_KEYPOINTS], [usize; NUM_KEYPOINTS]), MetricsError> {
    if preds.len() != gts.len() {
        return Err(MetricsError::CountMismatch {
            preds: preds.len(),
            gts: gts.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut correct = [0usize; NUM_KEYPOINTS];
    let mut counted = [0usize; NUM_KEYPOINTS];
    for (index, (pred, gt)) in preds.iter().zip(gts).enumerate() {
        if !(gt.head_size > 0.0) {
            return Err(MetricsError::MissingHeadSize { index });
        }
        for (j, point) in gt.points.iter().enumerate() {
            // Occluded-but-annotated joints count; absent joints are excluded
            // from both numerator and denominator.
            if !point.visibility.is_annotated() {
                continue;
            }
            counted[j] += 1;
            let p = &pred.points[j];
            let dist = ((p.x - point.x).powi(2) + (p.y - point.y).powi(2)).sqrt();
            if dist <= alpha * gt.head_size {
                correct[j] += 1;
            }
        }
    }
    Ok((correct, counted))
}

fn mean_rate(correct: &[usize; NUM_KEYPOINTS], counted: &[usize; NUM_KEYPOINTS]) -> f64 {
    let total: usize = counted.iter().sum();
    if total == 0 {
        return 0.0;
    }
    correct.iter().sum::<usize>() as f64 / total as f64
}

/// Threshold grid used by [`auc`]: 0.00 to 0.50 in steps of 0.01.
pub fn auc_alpha_grid() -> Vec<f64> {
    (0..=50).map(|i| i as f64 * 0.01).collect()
}

/// Simple mean of the mean accuracy over the alpha grid.
pub fn auc(preds: &[DecodedPose], gts: &[KeypointSet]) -> Result<f64, MetricsError> {
    let grid = auc_alpha_grid();
    let mut acc = 0.0;
    for &alpha in &grid {
        let (correct, counted) = joint_hits(preds, gts, alpha)?;
        acc += mean_rate(&correct, &counted);
    }
    Ok(acc / grid.len() as f64)
}

/// Fraction of annotated joints whose prediction lands within
/// `alpha · head_size` of the truth, per joint and overall; also fills the
/// threshold-grid area-under-curve.
pub fn pckh(
    preds: &[DecodedPose],
    gts: &[KeypointSet],
    alpha: f64,
) -> Result<EvalResult, MetricsError> {
    let (correct, counted) = joint_hits(preds, gts, alpha)?;
    let mut per_joint = [0.0; NUM_KEYPOINTS];
    for j in 0..NUM_KEYPOINTS {
        per_joint[j] = if counted[j] == 0 {
            0.0
        } else {
            correct[j] as f64 / counted[j] as f64
        };
    }
    Ok(EvalResult {
        per_joint_pckh: per_joint,
        mean_pckh: mean_rate(&correct, &counted),
        auc: auc(preds, gts)?,
        num_samples: preds.len(),
    })
}

impl EvalResult {
    pub fn csv_header() -> String {
        let mut cols = vec!["num_samples".to_string(), "mean_pckh".into(), "auc".into()];
        cols.extend(KEYPOINT_NAMES.iter().map(|n| format!("pckh_{n}")));
        cols.join(",")
    }

    pub fn to_csv_row(&self) -> String {
        let mut cols = vec![
            self.num_samples.to_string(),
            format!("{:.6}", self.mean_pckh),
            format!("{:.6}", self.auc),
        ];
        cols.extend(self.per_joint_pckh.iter().map(|v| format!("{v:.6}")));
        cols.join(",")
    }

    pub fn render_table(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>8}", "joint", "pckh");
        for (name, v) in KEYPOINT_NAMES.iter().zip(&self.per_joint_pckh) {
            let _ = writeln!(out, "{:<12} {:>7.1}%", name, v * 100.0);
        }
        let _ = writeln!(out, "{:<12} {:>7.1}%", "mean", self.mean_pckh * 100.0);
        let _ = writeln!(out, "{:<12} {:>7.1}%", "auc", self.auc * 100.0);
        let _ = writeln!(out, "{:<12} {:>8}", "samples", self.num_samples);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{DecodedPoint, Keypoint, Visibility};

    fn pose_at(points: &[(f64, f64)]) -> DecodedPose {
        DecodedPose {
            points: points
                .iter()
                .map(|&(x, y)| DecodedPoint { x, y, confidence: 1.0 })
                .collect(),
        }
    }

    fn gt_with(head: f64, points: &[(f64, f64)]) -> KeypointSet {
        let mut kps = KeypointSet::all_absent();
        kps.head_size = head;
        for (i, &(x, y)) in points.iter().enumerate() {
            kps.points[i] = Keypoint {
                x,
                y,
                visibility: Visibility::Visible,
            };
        }
        kps
    }

    #[test]
    fn zero_loss_for_exact_prediction() {
        let gt = Tensor::<f64>::full(vec![2, 2, 2], 0.3);
        let loss = single_stage_loss(&gt, &gt, &[1.0, 1.0]).unwrap();
        assert_eq!(loss.data()[0], 0.0);
    }

    #[test]
    fn uniform_error_matches_hand_computation() {
        // Two 2x2 maps with error 0.5 everywhere: per-map sum 4*0.25 = 1,
        // L = (1/2)(1+1) = 1.
        let gt = Tensor::<f64>::full(vec![2, 2, 2], 1.0);
        let pred = Tensor::<f64>::full(vec![2, 2, 2], 0.5);
        let loss = single_stage_loss(&pred, &gt, &[1.0, 1.0]).unwrap();
        assert!((loss.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_stages_double_the_total() {
        let gt = Tensor::<f64>::full(vec![2, 2, 2], 1.0);
        let pred = Tensor::<f64>::full(vec![2, 2, 2], 0.5);
        let total = stage_loss(&[pred.clone(), pred], &gt, &[1.0, 1.0]).unwrap();
        assert!((total.data()[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn masked_channels_do_not_contribute() {
        let gt = Tensor::<f64>::full(vec![2, 2, 2], 1.0);
        let pred = Tensor::<f64>::full(vec![2, 2, 2], 0.0);
        let loss = single_stage_loss(&pred, &gt, &[1.0, 0.0]).unwrap();
        assert!((loss.data()[0] - 2.0).abs() < 1e-12); // only channel 0: 4*1 / 2
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let gt_data: Vec<f64> = (0..2 * 9).map(|_| rng.gen_range(0.0..1.0)).collect();
        let pred_data: Vec<f64> = (0..2 * 9).map(|_| rng.gen_range(0.0..1.0)).collect();
        let gt = Tensor::from_vec(vec![2, 3, 3], gt_data).unwrap();
        let pred = Tensor::from_vec(vec![2, 3, 3], pred_data).unwrap();
        let err = crate::tensor::finite_diff_check(
            |ins| single_stage_loss(&ins[0], &gt, &[1.0, 0.5]),
            &[pred],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "loss FD error {err}");
    }

    #[test]
    fn perfect_predictions_score_everything() {
        let gts = vec![gt_with(10.0, &[(5.0, 5.0), (20.0, 20.0)])];
        let preds = vec![pose_at(&[
            (5.0, 5.0),
            (20.0, 20.0),
            (0.0, 0.0),
            (0.0, 0.0),
            (0.0, 0.0),
            (0.0, 0.0),
            (0.0, 0.0),
            (0.0, 0.0),
            (0.0, 0.0),
            (0.0, 0.0),
            (0.0, 0.0),
            (0.0, 0.0),
            (0.0, 0.0),
            (0.0, 0.0),
            (0.0, 0.0),
            (0.0, 0.0),
        ])];
        let result = pckh(&preds, &gts, 0.5).unwrap();
        assert_eq!(result.mean_pckh, 1.0);
        assert_eq!(result.per_joint_pckh[0], 1.0);
        assert_eq!(result.auc, 1.0);
        assert_eq!(result.num_samples, 1);
    }

    #[test]
    fn threshold_excludes_distant_joint() {
        let gts = vec![gt_with(10.0, &[(0.0, 0.0)])];
        let preds = vec![pose_at(&[(6.0, 0.0); 16])]; // distance 0.6 * head_size
        let result = pckh(&preds, &gts, 0.5).unwrap();
        assert_eq!(result.per_joint_pckh[0], 0.0);
        assert_eq!(result.mean_pckh, 0.0);
    }

    #[test]
    fn three_joints_two_below_threshold() {
        let gts = vec![gt_with(10.0, &[(0.0, 0.0), (0.0, 0.0), (0.0, 0.0)])];
        let mut points = vec![(0.0, 0.0); 16];
        points[0] = (1.0, 0.0); // 0.1 h
        points[1] = (4.0, 0.0); // 0.4 h
        points[2] = (9.0, 0.0); // 0.9 h
        let result = pckh(&[pose_at(&points)], &gts, 0.5).unwrap();
        assert!((result.mean_pckh - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn auc_counts_grid_fraction() {
        // One joint at exactly 0.25 * head_size: correct for alpha 0.25..=0.50,
        // i.e. 26 of 51 thresholds.
        let gts = vec![gt_with(10.0, &[(0.0, 0.0)])];
        let preds = vec![pose_at(&[(2.5, 0.0); 16])];
        let a = auc(&preds, &gts).unwrap();
        assert!((a - 26.0 / 51.0).abs() < 1e-12, "auc {a}");
    }

    #[test]
    fn all_far_predictions_have_zero_auc() {
        let gts = vec![gt_with(10.0, &[(0.0, 0.0), (0.0, 0.0)])];
        let preds = vec![pose_at(&[(100.0, 100.0); 16])];
        assert_eq!(auc(&preds, &gts).unwrap(), 0.0);
    }

    #[test]
    fn pckh_is_monotone_in_alpha() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let gts: Vec<KeypointSet> = (0..10)
            .map(|_| {
                gt_with(
                    12.0,
                    &(0..16)
                        .map(|_| (rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0)))
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        let preds: Vec<DecodedPose> = gts
            .iter()
            .map(|gt| {
                pose_at(
                    &gt.points
                        .iter()
                        .map(|p| (p.x + rng.gen_range(-8.0..8.0), p.y + rng.gen_range(-8.0..8.0)))
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        let mut last = -1.0;
        for alpha in [0.0, 0.1, 0.2, 0.3, 0.4, 0.5] {
            let r = pckh(&preds, &gts, alpha).unwrap();
            assert!(r.mean_pckh >= last);
            last = r.mean_pckh;
        }
    }

    #[test]
    fn missing_head_size_is_an_error() {
        let mut gt = gt_with(10.0, &[(0.0, 0.0)]);
        gt.head_size = 0.0;
        let err = pckh(&[pose_at(&[(0.0, 0.0); 16])], &[gt], 0.5).unwrap_err();
        assert!(matches!(err, MetricsError::MissingHeadSize { index: 0 }));
    }

    #[test]
    fn absent_joints_are_excluded_both_ways() {
        let mut gt = gt_with(10.0, &[(0.0, 0.0), (5.0, 5.0)]);
        gt.points[1].visibility = Visibility::Absent;
        // Joint 1 prediction is far off but must not count anywhere.
        let mut points = vec![(0.0, 0.0); 16];
        points[1] = (500.0, 500.0);
        let result = pckh(&[pose_at(&points)], &[gt], 0.5).unwrap();
        assert_eq!(result.mean_pckh, 1.0);
        assert_eq!(result.per_joint_pckh[1], 0.0);
    }
}
