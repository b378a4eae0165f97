//! Segmentation metrics: IoU, Recall, Precision, F1, Accuracy, with
//! per-image aggregation and mean±std reporting across runs.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Pixel counts and the five derived ratios for one image.
///
/// Degenerate 0/0 ratios are defined as 1 when both the prediction and the
/// target are empty (correctly predicting absence), else 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegMetrics {
    pub tp: u64,
    pub fp: u64,
    /// False negatives (`fn` is reserved).
    pub fn_: u64,
    pub tn: u64,
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub accuracy: f64,
}

/// Threshold probabilities into a binary mask: pixel = 1 iff prob > threshold.
pub fn binarize<T: Scalar>(probs: &Tensor<T>, threshold: f64) -> Vec<u8> {
    probs.data().iter().map(|&p| u8::from(p.to_f64() > threshold)).collect()
}

/// Convert a {0,1}-valued float tensor (a ground-truth mask) to bytes.
pub fn mask_to_bytes<T: Scalar>(mask: &Tensor<T>) -> Result<Vec<u8>> {
    mask.data()
        .iter()
        .map(|&v| {
            if v == T::ZERO {
                Ok(0)
            } else if v == T::ONE {
                Ok(1)
            } else {
                Err(Error::Validation(format!("mask contains non-binary value {v}")))
            }
        })
        .collect()
}

fn ratio(num: u64, den: u64, pred_empty: bool, target_empty: bool) -> f64 {
    if den == 0 {
        if pred_empty && target_empty {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(pred: &[u8], target: &[u8]) -> Result<SegMetrics> {
    if pred.len() != target.len() {
        return Err(Error::Validation(format!(
            "prediction has {} pixels but target has {}",
            pred.len(),
            target.len()
        )));
    }
    if pred.iter().chain(target).any(|&v| v > 1) {
        return Err(Error::Validation("masks must be binary (0 or 1)".into()));
    }

    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    for (&p, &t) in pred.iter().zip(target) {
        match (p, t) {
            (1, 1) => tp += 1,
            (1, 0) => fp += 1,
            (0, 1) => fn_ += 1,
            _ => tn += 1,
        }
    }

    let pred_empty = tp + fp == 0;
    let target_empty = tp + fn_ == 0;
    Ok(SegMetrics {
        tp,
        fp,
        fn_,
        tn,
        iou: ratio(tp, tp + fp + fn_, pred_empty, target_empty),
        recall: ratio(tp, tp + fn_, pred_empty, target_empty),
        precision: ratio(tp, tp + fp, pred_empty, target_empty),
        f1: ratio(2 * tp, 2 * tp + fp + fn_, pred_empty, target_empty),
        accuracy: ratio(tp + tn, tp + fp + fn_ + tn, pred_empty, target_empty),
    })
}

/// Unweighted per-image means over a dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetMetrics {
    pub images: usize,
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
    pub f1: f64,
    pub accuracy: f64,
}

pub fn aggregate(per_image: &[SegMetrics]) -> Result<DatasetMetrics> {
    if per_image.is_empty() {
        return Err(Error::Validation("cannot aggregate metrics over zero images".into()));
    }
    let n = per_image.len() as f64;
    let mean = |f: fn(&SegMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    Ok(DatasetMetrics {
        images: per_image.len(),
        iou: mean(|m| m.iou),
        recall: mean(|m| m.recall),
        precision: mean(|m| m.precision),
        f1: mean(|m| m.f1),
        accuracy: mean(|m| m.accuracy),
    })
}

/// Mean and sample standard deviation (n-1 denominator; 0 for a single run).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn over(values: &[f64]) -> Result<MeanStd> {
        if values.is_empty() {
            return Err(Error::Validation("cannot summarize zero runs".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Ok(MeanStd { mean, std })
    }

    /// Table style: fractions as percentages with two decimals, "73.27±0.43".
    pub fn percent(&self) -> String {
        format!("{:.2}±{:.2}", self.mean * 100.0, self.std * 100.0)
    }
}

/// Per-metric mean±std across repeated runs (e.g. different split seeds).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub runs: usize,
    pub iou: MeanStd,
    pub recall: MeanStd,
    pub precision: MeanStd,
    pub f1: MeanStd,
    pub accuracy: MeanStd,
}

pub fn aggregate_runs(runs: &[DatasetMetrics]) -> Result<RunSummary> {
    if runs.is_empty() {
        return Err(Error::Validation("cannot summarize zero runs".into()));
    }
    let collect = |f: fn(&DatasetMetrics) -> f64| -> Result<MeanStd> {
        MeanStd::over(&runs.iter().map(f).collect::<Vec<_>>())
    };
    Ok(RunSummary {
        runs: runs.len(),
        iou: collect(|r| r.iou)?,
        recall: collect(|r| r.recall)?,
        precision: collect(|r| r.precision)?,
        f1: collect(|r| r.f1)?,
        accuracy: collect(|r| r.accuracy)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn worked_2x2_example() {
        let pred = [1, 1, 0, 0];
        let target = [1, 0, 1, 0];
        let m = compute_metrics(&pred, &target).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_, m.tn), (1, 1, 1, 1));
        assert_eq!(m.iou, 1.0 / 3.0);
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 0.5);
        assert_eq!(m.f1, 0.5);
        assert_eq!(m.accuracy, 0.5);
    }

    #[test]
    fn perfect_prediction_scores_one_everywhere() {
        let mask = [1, 0, 1, 1, 0, 0];
        let m = compute_metrics(&mask, &mask).unwrap();
        for v in [m.iou, m.recall, m.precision, m.f1, m.accuracy] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn empty_versus_empty_defines_ratios_as_one() {
        let m = compute_metrics(&[0, 0, 0], &[0, 0, 0]).unwrap();
        for v in [m.iou, m.recall, m.precision, m.f1] {
            assert_eq!(v, 1.0);
        }
        assert_eq!(m.accuracy, 1.0);

        // Empty target but a false positive: degenerate ratios become 0.
        let m = compute_metrics(&[1, 0, 0], &[0, 0, 0]).unwrap();
        assert_eq!(m.iou, 0.0);
        assert_eq!(m.recall, 0.0); // 0/0 scope with a non-empty prediction
        assert_eq!(m.precision, 0.0); // 0/1
        assert_eq!(m.f1, 0.0);
        assert!((m.accuracy - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn non_binary_input_is_rejected() {
        assert!(compute_metrics(&[2, 0], &[1, 0]).is_err());
        assert!(compute_metrics(&[1, 0], &[1]).is_err());
    }

    /// Independent brute-force oracle: per-pixel branch ladder, no shared
    /// helper with the implementation.
    fn brute_force(pred: &[u8], target: &[u8]) -> (u64, u64, u64, u64, [f64; 5]) {
        let mut tp = 0u64;
        let mut fp = 0u64;
        let mut fn_ = 0u64;
        let mut tn = 0u64;
        for i in 0..pred.len() {
            if pred[i] == 1 && target[i] == 1 {
                tp += 1;
            } else if pred[i] == 1 {
                fp += 1;
            } else if target[i] == 1 {
                fn_ += 1;
            } else {
                tn += 1;
            }
        }
        let pred_any = pred.iter().any(|&p| p == 1);
        let target_any = target.iter().any(|&t| t == 1);
        let div = |n: u64, d: u64| -> f64 {
            if d > 0 {
                n as f64 / d as f64
            } else if !pred_any && !target_any {
                1.0
            } else {
                0.0
            }
        };
        let iou = div(tp, tp + fp + fn_);
        let recall = div(tp, tp + fn_);
        let precision = div(tp, tp + fp);
        let f1 = div(2 * tp, 2 * tp + fp + fn_);
        let accuracy = div(tp + tn, tp + fp + fn_ + tn);
        (tp, fp, fn_, tn, [iou, recall, precision, f1, accuracy])
    }

    #[test]
    fn agrees_with_brute_force_on_a_thousand_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for case in 0..1000 {
            // Mix densities so empty and near-empty masks occur.
            let p_on = match case % 4 {
                0 => 0.0,
                1 => 0.05,
                2 => 0.5,
                _ => 0.95,
            };
            let pred: Vec<u8> = (0..64).map(|_| u8::from(rng.gen::<f64>() < p_on)).collect();
            let target: Vec<u8> = (0..64).map(|_| u8::from(rng.gen::<f64>() < 0.5)).collect();
            let m = compute_metrics(&pred, &target).unwrap();
            let (tp, fp, fn_, tn, ratios) = brute_force(&pred, &target);
            assert_eq!((m.tp, m.fp, m.fn_, m.tn), (tp, fp, fn_, tn), "case {case}");
            for (got, want) in [m.iou, m.recall, m.precision, m.f1, m.accuracy].iter().zip(&ratios)
            {
                assert_eq!(got.to_bits(), want.to_bits(), "case {case}");
            }
            assert_eq!(tp + fp + fn_ + tn, 64);
        }
    }

    #[test]
    fn swapping_pred_and_target_swaps_precision_and_recall() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let a: Vec<u8> = (0..64).map(|_| rng.gen_range(0..=1)).collect();
            let b: Vec<u8> = (0..64).map(|_| rng.gen_range(0..=1)).collect();
            let ab = compute_metrics(&a, &b).unwrap();
            let ba = compute_metrics(&b, &a).unwrap();
            assert_eq!(ab.precision.to_bits(), ba.recall.to_bits());
            assert_eq!(ab.recall.to_bits(), ba.precision.to_bits());
            assert_eq!(ab.iou.to_bits(), ba.iou.to_bits());
            assert_eq!(ab.f1.to_bits(), ba.f1.to_bits());
            assert_eq!(ab.accuracy.to_bits(), ba.accuracy.to_bits());
        }
    }

    #[test]
    fn fixing_a_missed_pixel_never_decreases_iou_and_f1_dominates_iou() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let mut pred: Vec<u8> = (0..64).map(|_| rng.gen_range(0..=1)).collect();
            let target: Vec<u8> = (0..64).map(|_| rng.gen_range(0..=1)).collect();
            let before = compute_metrics(&pred, &target).unwrap();
            assert!(before.f1 >= before.iou - 1e-15);
            if let Some(i) = (0..64).find(|&i| target[i] == 1 && pred[i] == 0) {
                pred[i] = 1;
                let after = compute_metrics(&pred, &target).unwrap();
                assert!(after.iou >= before.iou);
            }
        }
    }

    #[test]
    fn f1_matches_the_precision_recall_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let pred: Vec<u8> = (0..64).map(|_| rng.gen_range(0..=1)).collect();
            let target: Vec<u8> = (0..64).map(|_| rng.gen_range(0..=1)).collect();
            let m = compute_metrics(&pred, &target).unwrap();
            if m.precision + m.recall > 0.0 {
                let f1 = 2.0 * m.precision * m.recall / (m.precision + m.recall);
                assert!((m.f1 - f1).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn binarize_uses_strict_inequality() {
        let probs = Tensor::<f32>::from_vec(vec![0.5, 0.5001, 0.9, 0.0], &[4]).unwrap();
        assert_eq!(binarize(&probs, 0.5), vec![0, 1, 1, 0]);
        let all_high = Tensor::<f32>::from_vec(vec![0.9; 4], &[4]).unwrap();
        assert_eq!(binarize(&all_high, 0.5), vec![1, 1, 1, 1]);
        assert_eq!(binarize(&probs, 0.0), vec![1, 1, 1, 0]); // probs > 0
    }

    #[test]
    fn mask_to_bytes_validates() {
        let ok = Tensor::<f32>::from_vec(vec![0.0, 1.0, 1.0], &[3]).unwrap();
        assert_eq!(mask_to_bytes(&ok).unwrap(), vec![0, 1, 1]);
        let bad = Tensor::<f32>::from_vec(vec![0.0, 0.25], &[2]).unwrap();
        assert!(mask_to_bytes(&bad).is_err());
    }

    #[test]
    fn single_image_aggregate_is_that_image() {
        let m = compute_metrics(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap();
        let agg = aggregate(&[m]).unwrap();
        assert_eq!(agg.images, 1);
        assert_eq!(agg.iou, m.iou);
        assert_eq!(agg.accuracy, m.accuracy);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn run_summary_mean_and_sample_std() {
        let run = |iou: f64| DatasetMetrics {
            images: 10,
            iou,
            recall: iou,
            precision: iou,
            f1: iou,
            accuracy: iou,
        };
        let summary = aggregate_runs(&[run(0.72), run(0.73), run(0.74)]).unwrap();
        assert!((summary.iou.mean - 0.73).abs() < 1e-12);
        assert!((summary.iou.std - 0.01).abs() < 1e-12);
        assert_eq!(summary.iou.percent(), "73.00±1.00");

        let same = aggregate_runs(&[run(0.5), run(0.5), run(0.5)]).unwrap();
        assert_eq!(same.iou.std, 0.0);
        let single = aggregate_runs(&[run(0.4)]).unwrap();
        assert_eq!(single.iou.std, 0.0);
        assert!(aggregate_runs(&[]).is_err());
    }

    #[test]
    fn percent_formatting_matches_the_table_style() {
        let ms = MeanStd { mean: 0.7327, std: 0.0043 };
        assert_eq!(ms.percent(), "73.27±0.43");
        let ms = MeanStd { mean: 0.8475, std: 0.0030 };
        assert_eq!(ms.percent(), "84.75±0.30");
    }
}
