//! Per-class TPR/FPR at a fixed confidence threshold and ROC-AUC.
//!
//! AUC uses the rank statistic (Mann-Whitney): ties get average ranks, which
//! awards half credit per tied positive-negative pair. Prediction at a
//! threshold uses `>=`, so ties predict positive. Evaluation never augments
//! its inputs.

use serde::{Deserialize, Serialize};

use crate::backend::{predict_proba, BackendParams, Scalar};
use crate::corpus::Manifest;
use crate::error::{Error, Result};
use crate::imageops::{load_image, normalize, resize_bilinear, NormalizationSpec};

/// Confusion counts at a threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

/// Metrics for one class. Rates are `None` when their denominator is zero;
/// AUC is `None` when the class has a single label value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
    pub auc: Option<f64>,
    pub counts: ConfusionCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub smoke: ClassMetrics,
    pub fire: ClassMetrics,
    /// Images skipped because they failed to decode.
    pub skipped_images: usize,
}

/// Predict positive iff `score >= threshold`; returns (tpr, fpr, counts).
pub fn tpr_fpr_at_threshold(
    scores: &[f64],
    labels: &[bool],
    threshold: f64,
) -> Result<(Option<f64>, Option<f64>, ConfusionCounts)> {
    if scores.len() != labels.len() {
        return Err(Error::Eval(format!(
            "scores/labels length mismatch: {} vs {}",
            scores.len(),
            labels.len()
        )));
    }
    let mut counts = ConfusionCounts::default();
    for (&s, &y) in scores.iter().zip(labels) {
        let predicted = s >= threshold;
        match (predicted, y) {
            (true, true) => counts.tp += 1,
            (true, false) => counts.fp += 1,
            (false, false) => counts.tn += 1,
            (false, true) => counts.fn_ += 1,
        }
    }
    let tpr = if counts.tp + counts.fn_ > 0 {
        Some(counts.tp as f64 / (counts.tp + counts.fn_) as f64)
    } else {
        None
    };
    let fpr = if counts.fp + counts.tn > 0 {
        Some(counts.fp as f64 / (counts.fp + counts.tn) as f64)
    } else {
        None
    };
    Ok((tpr, fpr, counts))
}

/// Rank-statistic AUC with average ranks for ties. Errors when only one
/// label value is present.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Eval(format!(
            "scores/labels length mismatch: {} vs {}",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&y| y).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Eval("AUC undefined: single-class input".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Eval("AUC undefined: non-finite score".into()));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // Average ranks (1-based) across tie groups, then sum positive ranks.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    let n = neg as f64;
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// Runs the model over a manifest (no augmentation, test-time contract) and
/// aggregates both classes independently. Undecodable images are skipped
/// with a warning and counted in the report.
pub fn evaluate<F: Scalar>(
    params: &BackendParams<F>,
    dataset: &Manifest,
    norm: &NormalizationSpec,
    threshold: f64,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Eval("empty dataset".into()));
    }
    let s = params.arch.input_size;
    let mut smoke_scores = Vec::new();
    let mut smoke_labels = Vec::new();
    let mut fire_scores = Vec::new();
    let mut fire_labels = Vec::new();
    let mut skipped = 0usize;

    let mut batch = Vec::new();
    let mut batch_labels = Vec::new();
    let flush = |batch: &mut Vec<crate::imageops::ImageTensor>,
                 batch_labels: &mut Vec<crate::corpus::LabelVector>,
                 smoke_scores: &mut Vec<f64>,
                 smoke_labels: &mut Vec<bool>,
                 fire_scores: &mut Vec<f64>,
                 fire_labels: &mut Vec<bool>|
     -> Result<()> {
        if batch.is_empty() {
            return Ok(());
        }
        let probs = predict_proba(params, batch)?;
        for (p, label) in probs.iter().zip(batch_labels.iter()) {
            smoke_scores.push(p[0]);
            smoke_labels.push(label.smoke);
            fire_scores.push(p[1]);
            fire_labels.push(label.fire);
        }
        batch.clear();
        batch_labels.clear();
        Ok(())
    };

    for sample in dataset.samples() {
        let img = match load_image(&sample.image_path) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping undecodable image '{}': {e}", sample.id);
                skipped += 1;
                continue;
            }
        };
        let resized = resize_bilinear(&img, s, s)?;
        batch.push(normalize(&resized, norm)?);
        batch_labels.push(sample.label);
        if batch.len() == 64 {
            flush(
                &mut batch,
                &mut batch_labels,
                &mut smoke_scores,
                &mut smoke_labels,
                &mut fire_scores,
                &mut fire_labels,
            )?;
        }
    }
    flush(
        &mut batch,
        &mut batch_labels,
        &mut smoke_scores,
        &mut smoke_labels,
        &mut fire_scores,
        &mut fire_labels,
    )?;

    if smoke_scores.is_empty() {
        return Err(Error::Eval("no decodable images in dataset".into()));
    }

    let class_metrics = |scores: &[f64], labels: &[bool]| -> Result<ClassMetrics> {
        let (tpr, fpr, counts) = tpr_fpr_at_threshold(scores, labels, threshold)?;
        let auc = roc_auc(scores, labels).ok();
        Ok(ClassMetrics {
            tpr,
            fpr,
            auc,
            counts,
        })
    };

    Ok(EvalReport {
        threshold,
        smoke: class_metrics(&smoke_scores, &smoke_labels)?,
        fire: class_metrics(&fire_scores, &fire_labels)?,
        skipped_images: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// O(P*N) pairwise reference: full credit for ordered pairs, half for
    /// ties.
    fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0f64;
        let mut pairs = 0.0f64;
        for (i, (&sp, &yp)) in scores.iter().zip(labels).enumerate() {
            if !yp {
                continue;
            }
            for (j, (&sn, &yn)) in scores.iter().zip(labels).enumerate() {
                if yn || i == j {
                    continue;
                }
                pairs += 1.0;
                if sp > sn {
                    num += 1.0;
                } else if sp == sn {
                    num += 0.5;
                }
            }
        }
        num / pairs
    }

    #[test]
    fn perfect_separation() {
        let (tpr, fpr, _) =
            tpr_fpr_at_threshold(&[0.9, 0.1], &[true, false], 0.5).unwrap();
        assert_eq!(tpr, Some(1.0));
        assert_eq!(fpr, Some(0.0));
        assert_eq!(roc_auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
    }

    #[test]
    fn threshold_ties_predict_positive() {
        let scores = vec![0.5; 6];
        let labels = vec![true, true, false, false, false, false];
        let (tpr, fpr, counts) = tpr_fpr_at_threshold(&scores, &labels, 0.5).unwrap();
        assert_eq!(tpr, Some(1.0));
        assert_eq!(fpr, Some(1.0));
        assert_eq!(counts.fp, 4);
        assert_eq!(counts.tn, 0);
    }

    #[test]
    fn counting_matches_direct_loop() {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(5, &[404]);
        let scores: Vec<f64> = (0..20).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels: Vec<bool> = (0..20).map(|_| rng.random::<f64>() < 0.4).collect();
        let t = 0.5;
        let (tpr, fpr, counts) = tpr_fpr_at_threshold(&scores, &labels, t).unwrap();
        let mut tp = 0;
        let mut fp = 0;
        let mut tn = 0;
        let mut fnn = 0;
        for (&s, &y) in scores.iter().zip(&labels) {
            match (s >= t, y) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fnn += 1,
            }
        }
        assert_eq!((counts.tp, counts.fp, counts.tn, counts.fn_), (tp, fp, tn, fnn));
        assert_eq!(tpr.unwrap(), tp as f64 / (tp + fnn) as f64);
        assert_eq!(fpr.unwrap(), fp as f64 / (fp + tn) as f64);
    }

    #[test]
    fn inverted_labels_give_zero_auc() {
        let scores = vec![0.9, 0.8, 0.2, 0.1];
        let labels = vec![false, false, true, true];
        assert_eq!(roc_auc(&scores, &labels).unwrap(), 0.0);
    }

    #[test]
    fn all_equal_scores_give_half() {
        let scores = vec![0.5; 10];
        let labels = vec![true, false, true, false, true, false, true, false, true, false];
        assert!((roc_auc(&scores, &labels).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_class_is_undefined() {
        let err = roc_auc(&[0.1, 0.9], &[true, true]).unwrap_err().to_string();
        assert!(err.contains("AUC undefined"), "{err}");
    }

    #[test]
    fn rank_auc_equals_pairwise_with_ties() {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(17, &[71]);
        for trial in 0..200 {
            let n = rng.random_range(2..120usize);
            // Quantized scores force tie groups.
            let scores: Vec<f64> = (0..n)
                .map(|_| f64::from(rng.random_range(0..7u32)) / 6.0)
                .collect();
            let mut labels: Vec<bool> = (0..n).map(|_| rng.random::<f64>() < 0.5).collect();
            if labels.iter().all(|&y| y) {
                labels[0] = false;
            }
            if labels.iter().all(|&y| !y) {
                labels[0] = true;
            }
            let fast = roc_auc(&scores, &labels).unwrap();
            let slow = pairwise_auc(&scores, &labels);
            assert!((fast - slow).abs() < 1e-12, "trial {trial}: {fast} vs {slow}");
        }
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(23, &[72]);
        let scores: Vec<f64> = (0..60).map(|_| rng.random_range(-3.0..3.0)).collect();
        let labels: Vec<bool> = (0..60).map(|i| i % 3 == 0).collect();
        let base = roc_auc(&scores, &labels).unwrap();
        let squashed: Vec<f64> = scores.iter().map(|&s| 1.0 / (1.0 + (-s).exp())).collect();
        let shifted: Vec<f64> = scores.iter().map(|&s| 3.0 * s + 11.0).collect();
        assert!((roc_auc(&squashed, &labels).unwrap() - base).abs() < 1e-12);
        assert!((roc_auc(&shifted, &labels).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn rates_monotone_in_threshold() {
        use rand::Rng;
        let mut rng = crate::rng::derive_rng(29, &[73]);
        let scores: Vec<f64> = (0..50).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels: Vec<bool> = (0..50).map(|_| rng.random::<f64>() < 0.5).collect();
        let mut last_tpr = f64::INFINITY;
        let mut last_fpr = f64::INFINITY;
        for i in 0..=10 {
            let t = i as f64 / 10.0;
            let (tpr, fpr, counts) = tpr_fpr_at_threshold(&scores, &labels, t).unwrap();
            let tpr = tpr.unwrap();
            let fpr = fpr.unwrap();
            assert!(tpr <= last_tpr + 1e-15);
            assert!(fpr <= last_fpr + 1e-15);
            last_tpr = tpr;
            last_fpr = fpr;
            let pos = labels.iter().filter(|&&y| y).count();
            assert_eq!(counts.tp + counts.fn_, pos);
            assert_eq!(counts.fp + counts.tn, labels.len() - pos);
        }
    }

    #[test]
    fn length_mismatch_is_error() {
        assert!(tpr_fpr_at_threshold(&[0.5], &[true, false], 0.5).is_err());
        assert!(roc_auc(&[0.5], &[true, false]).is_err());
    }
}
