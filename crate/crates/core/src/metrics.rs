//! Overlap metrics, the plaque-to-tooth pixel ratio and its clinical accuracy.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::data::{separate_channels, BinaryMap, LabelMask, PLAQUE, TEETH};
use crate::error::{Error, Result};

/// Largest `|PR_gt - PR_other|` still counted as a correct estimate.
pub const PR_TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub true_positive: u64,
    pub false_positive: u64,
    pub false_negative: u64,
    pub true_negative: u64,
}

impl ConfusionCounts {
    pub fn from_maps(pred: ArrayView2<u8>, gt: ArrayView2<u8>) -> Result<Self> {
        if pred.dim() != gt.dim() {
            return Err(Error::Shape(format!("prediction {:?} vs ground truth {:?}", pred.dim(), gt.dim())));
        }
        let mut c = Self::default();
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            match (p != 0, g != 0) {
                (true, true) => c.true_positive += 1,
                (true, false) => c.false_positive += 1,
                (false, true) => c.false_negative += 1,
                (false, false) => c.true_negative += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.true_positive + self.false_positive + self.false_negative + self.true_negative
    }

    pub fn add(&self, o: &Self) -> Self {
        Self {
            true_positive: self.true_positive + o.true_positive,
            false_positive: self.false_positive + o.false_positive,
            false_negative: self.false_negative + o.false_negative,
            true_negative: self.true_negative + o.true_negative,
        }
    }

    /// `TP / (TP + FP + FN)`, 1 when both maps are empty.
    pub fn iou(&self) -> f64 {
        let union = self.true_positive + self.false_positive + self.false_negative;
        if union == 0 {
            1.0
        } else {
            self.true_positive as f64 / union as f64
        }
    }

    /// `2 TP / (2 TP + FP + FN)`, 1 when both maps are empty.
    pub fn dice(&self) -> f64 {
        let denom = 2 * self.true_positive + self.false_positive + self.false_negative;
        if denom == 0 {
            1.0
        } else {
            (2 * self.true_positive) as f64 / denom as f64
        }
    }
}

pub fn category_iou(pred: &BinaryMap, gt: &BinaryMap) -> Result<f64> {
    Ok(ConfusionCounts::from_maps(pred.view(), gt.view())?.iou())
}

pub fn category_dice(pred: &BinaryMap, gt: &BinaryMap) -> Result<f64> {
    Ok(ConfusionCounts::from_maps(pred.view(), gt.view())?.dice())
}

/// `plaque / (teeth + plaque)` from pixel counts; 0 when there is no foreground.
pub fn ratio_from_counts(teeth: usize, plaque: usize) -> f64 {
    if teeth + plaque == 0 {
        0.0
    } else {
        plaque as f64 / (teeth + plaque) as f64
    }
}

pub fn pixel_ratio(label: &LabelMask) -> f64 {
    ratio_from_counts(label.count(TEETH), label.count(PLAQUE))
}

/// Fraction of pairs whose ratio estimates differ by at most `tolerance` (inclusive).
pub fn pr_accuracy_with(pairs: &[(f64, f64)], tolerance: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Invalid("PR accuracy over an empty set".into()));
    }
    let hits = pairs.iter().filter(|(a, b)| within(*a, *b, tolerance)).count();
    Ok(hits as f64 / pairs.len() as f64)
}

pub fn pr_accuracy(pairs: &[(f64, f64)]) -> Result<f64> {
    pr_accuracy_with(pairs, PR_TOLERANCE)
}

/// Inclusive comparison with a few ulps of slack, so differences that are exactly
/// the tolerance in decimal (0.45 vs 0.40) still count after binary rounding.
fn within(a: f64, b: f64, tolerance: f64) -> bool {
    (a - b).abs() <= tolerance + 4.0 * f64::EPSILON * tolerance.max(a.abs()).max(b.abs())
}

/// Averaging axis of the per-category overlap scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Score each image, then average over images.
    #[default]
    ImageMean,
    /// Pool confusion counts over the dataset, then score once.
    Micro,
}

/// Per-category predicted maps. Branch-mode evaluation may set both at a pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategoryMaps {
    pub teeth: BinaryMap,
    pub plaque: BinaryMap,
}

impl CategoryMaps {
    pub fn from_label(label: &LabelMask) -> Self {
        let (teeth, plaque) = separate_channels(label);
        Self { teeth, plaque }
    }

    pub fn pixel_ratio(&self) -> f64 {
        let t = self.teeth.iter().filter(|&&v| v != 0).count();
        let p = self.plaque.iter().filter(|&&v| v != 0).count();
        ratio_from_counts(t, p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: String,
    pub iou_teeth: f64,
    pub iou_plaque: f64,
    pub dice_teeth: f64,
    pub dice_plaque: f64,
    pub pr_gt: f64,
    pub pr_pred: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pr_clinician: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    pub miou_teeth: f64,
    pub miou_plaque: f64,
    pub dice_teeth: f64,
    pub dice_plaque: f64,
    pub pr_percent: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clinician_pr_percent: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub aggregation: Aggregation,
    /// `fused` or `branch`: how the category maps were obtained.
    pub eval_mode: String,
    pub per_image: Vec<ImageMetrics>,
    pub aggregate: AggregateMetrics,
}

/// Build a report from per-category predictions. `gts` must hold exactly the ids of
/// `predictions`; `clinician` estimates, when given, must cover every image.
pub fn build_report_from_maps(
    predictions: &[(String, CategoryMaps)],
    gts: &BTreeMap<String, LabelMask>,
    clinician: Option<&BTreeMap<String, f64>>,
    aggregation: Aggregation,
    eval_mode: &str,
) -> Result<EvalReport> {
    if predictions.is_empty() {
        return Err(Error::Invalid("no predictions to evaluate".into()));
    }
    let pred_ids: BTreeSet<&str> = predictions.iter().map(|(id, _)| id.as_str()).collect();
    let gt_ids: BTreeSet<&str> = gts.keys().map(String::as_str).collect();
    if pred_ids.len() != predictions.len() {
        return Err(Error::Invalid("duplicate prediction ids".into()));
    }
    if pred_ids != gt_ids {
        let unmatched: Vec<&str> = pred_ids.symmetric_difference(&gt_ids).copied().collect();
        return Err(Error::Invalid(format!("unmatched ids: {}", unmatched.join(", "))));
    }
    if let Some(cli) = clinician {
        let missing: Vec<&str> = pred_ids.iter().filter(|id| !cli.contains_key(**id)).copied().collect();
        if !missing.is_empty() {
            return Err(Error::Invalid(format!("clinician estimates missing for: {}", missing.join(", "))));
        }
    }

    let mut per_image = Vec::with_capacity(predictions.len());
    let mut pooled = [ConfusionCounts::default(); 2];
    for (id, pred) in predictions {
        let gt = CategoryMaps::from_label(&gts[id]);
        let ct = ConfusionCounts::from_maps(pred.teeth.view(), gt.teeth.view())?;
        let cp = ConfusionCounts::from_maps(pred.plaque.view(), gt.plaque.view())?;
        pooled[0] = pooled[0].add(&ct);
        pooled[1] = pooled[1].add(&cp);
        per_image.push(ImageMetrics {
            id: id.clone(),
            iou_teeth: ct.iou(),
            iou_plaque: cp.iou(),
            dice_teeth: ct.dice(),
            dice_plaque: cp.dice(),
            pr_gt: gt.pixel_ratio(),
            pr_pred: pred.pixel_ratio(),
            pr_clinician: clinician.map(|c| c[id]),
        });
    }
    let n = per_image.len() as f64;
    let mean = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
    let (miou_teeth, miou_plaque, dice_teeth, dice_plaque) = match aggregation {
        Aggregation::ImageMean => (
            mean(|m| m.iou_teeth),
            mean(|m| m.iou_plaque),
            mean(|m| m.dice_teeth),
            mean(|m| m.dice_plaque),
        ),
        Aggregation::Micro => (pooled[0].iou(), pooled[1].iou(), pooled[0].dice(), pooled[1].dice()),
    };
    let pred_pairs: Vec<(f64, f64)> = per_image.iter().map(|m| (m.pr_gt, m.pr_pred)).collect();
    let clinician_pr_percent = match clinician {
        Some(_) => {
            let pairs: Vec<(f64, f64)> = per_image
                .iter()
                .map(|m| (m.pr_gt, m.pr_clinician.expect("checked above")))
                .collect();
            Some(pr_accuracy(&pairs)?)
        }
        None => None,
    };
    Ok(EvalReport {
        aggregation,
        eval_mode: eval_mode.to_string(),
        aggregate: AggregateMetrics {
            miou_teeth,
            miou_plaque,
            dice_teeth,
            dice_plaque,
            pr_percent: pr_accuracy(&pred_pairs)?,
            clinician_pr_percent,
        },
        per_image,
    })
}

/// Report over fused 3-class predictions with image-mean aggregation.
pub fn build_report(
    predictions: &[(String, LabelMask)],
    gts: &BTreeMap<String, LabelMask>,
    clinician: Option<&BTreeMap<String, f64>>,
) -> Result<EvalReport> {
    let maps: Vec<(String, CategoryMaps)> = predictions
        .iter()
        .map(|(id, l)| (id.clone(), CategoryMaps::from_label(l)))
        .collect();
    build_report_from_maps(&maps, gts, clinician, Aggregation::ImageMean, "fused")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use proptest::prelude::*;

    #[test]
    fn iou_and_dice_cases() {
        let a = array![[1u8, 1], [0, 0]];
        let b = array![[0u8, 0], [1, 1]];
        assert_eq!(category_iou(&a, &a).unwrap(), 1.0);
        assert_eq!(category_iou(&a, &b).unwrap(), 0.0);
        assert_eq!(category_dice(&a, &b).unwrap(), 0.0);
        let gt = array![[1u8, 1], [1, 1]];
        assert_eq!(category_iou(&a, &gt).unwrap(), 0.5);
        let p4 = array![[1u8, 1, 1, 1, 0, 0]];
        let g4 = array![[0u8, 0, 1, 1, 1, 1]];
        assert_eq!(category_dice(&p4, &g4).unwrap(), 0.5);
        let empty = Array2::<u8>::zeros((2, 2));
        assert_eq!(category_iou(&empty, &empty).unwrap(), 1.0);
        assert_eq!(category_dice(&empty, &empty).unwrap(), 1.0);
    }

    #[test]
    fn pixel_ratio_cases() {
        assert_eq!(pixel_ratio(&LabelMask::zeros(4, 4)), 0.0);
        let mut l = Array2::<u8>::zeros((10, 12));
        for (i, v) in l.iter_mut().enumerate() {
            *v = if i < 60 { 1 } else if i < 100 { 2 } else { 0 };
        }
        assert!((pixel_ratio(&LabelMask::new(l).unwrap()) - 0.4).abs() < 1e-15);
        assert_eq!(pixel_ratio(&LabelMask::new(array![[2u8, 0]]).unwrap()), 1.0);
    }

    #[test]
    fn pr_accuracy_cases() {
        assert_eq!(pr_accuracy(&[(0.45, 0.40)]).unwrap(), 1.0);
        assert_eq!(pr_accuracy(&[(0.3, 0.3), (0.2, 0.3)]).unwrap(), 0.5);
        assert_eq!(pr_accuracy(&[(0.1, 0.1), (0.5, 0.5)]).unwrap(), 1.0);
        assert!(pr_accuracy(&[]).is_err());
        assert_eq!(pr_accuracy(&[(0.5, 0.56)]).unwrap(), 0.0);
    }

    #[test]
    fn report_perfect_and_errors() {
        let l = LabelMask::new(array![[0u8, 1], [2, 1]]).unwrap();
        let gts: BTreeMap<String, LabelMask> = [("a".to_string(), l.clone())].into();
        let r = build_report(&[("a".into(), l.clone())], &gts, None).unwrap();
        let a = &r.aggregate;
        assert_eq!((a.miou_teeth, a.miou_plaque, a.dice_teeth, a.dice_plaque, a.pr_percent), (1.0, 1.0, 1.0, 1.0, 1.0));
        assert!(build_report(&[], &gts, None).is_err());
        let err = build_report(&[("b".into(), l.clone())], &gts, None).unwrap_err();
        assert!(err.to_string().contains('a') && err.to_string().contains('b'));
        let cli: BTreeMap<String, f64> = [("a".to_string(), 0.9)].into();
        let r = build_report(&[("a".into(), l)], &gts, Some(&cli)).unwrap();
        assert_eq!(r.aggregate.clinician_pr_percent, Some(0.0));
    }

    #[test]
    fn micro_aggregation_pools_counts() {
        let gt1 = LabelMask::new(array![[1u8, 1, 1, 1]]).unwrap();
        let gt2 = LabelMask::new(array![[1u8, 0, 0, 0]]).unwrap();
        let p1 = LabelMask::new(array![[1u8, 1, 1, 1]]).unwrap();
        let p2 = LabelMask::new(array![[0u8, 0, 0, 0]]).unwrap();
        let gts: BTreeMap<String, LabelMask> = [("1".to_string(), gt1), ("2".to_string(), gt2)].into();
        let preds = vec![
            ("1".to_string(), CategoryMaps::from_label(&p1)),
            ("2".to_string(), CategoryMaps::from_label(&p2)),
        ];
        let mean = build_report_from_maps(&preds, &gts, None, Aggregation::ImageMean, "fused").unwrap();
        let micro = build_report_from_maps(&preds, &gts, None, Aggregation::Micro, "fused").unwrap();
        assert_eq!(mean.aggregate.miou_teeth, 0.5);
        assert_eq!(micro.aggregate.miou_teeth, 0.8);
    }

    fn maps(seed: u64) -> (Array2<u8>, Array2<u8>) {
        use rand::Rng;
        let mut r = crate::weights::derive_rng(seed, "metrics");
        let a = Array2::from_shape_simple_fn((6, 6), || r.random_range(0..2u8));
        let b = Array2::from_shape_simple_fn((6, 6), || r.random_range(0..2u8));
        (a, b)
    }

    proptest! {
        #[test]
        fn symmetric_and_dice_iou_identity(seed in 0u64..5000) {
            let (a, b) = maps(seed);
            let iou = category_iou(&a, &b).unwrap();
            let dice = category_dice(&a, &b).unwrap();
            prop_assert_eq!(iou, category_iou(&b, &a).unwrap());
            prop_assert_eq!(dice, category_dice(&b, &a).unwrap());
            prop_assert!((dice - 2.0 * iou / (1.0 + iou)).abs() < 1e-12);
        }

        #[test]
        fn pr_accuracy_monotone_in_threshold(diffs in proptest::collection::vec(0.0f64..0.2, 1..20), t in 0.0f64..0.2) {
            let pairs: Vec<(f64, f64)> = diffs.iter().map(|&d| (0.5, 0.5 + d)).collect();
            let wide = pr_accuracy_with(&pairs, t).unwrap();
            let narrow = pr_accuracy_with(&pairs, t * 0.5).unwrap();
            prop_assert!(narrow <= wide);
        }
    }
}
