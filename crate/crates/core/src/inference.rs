//! Turning branch logits into a single 3-class prediction.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView3};

use crate::data::{write_index_png, write_prob_png, LabelMask, BACKGROUND, PLAQUE, TEETH};
use crate::error::{Error, Result};
use crate::losses::sigmoid;
use crate::metrics::CategoryMaps;
use crate::model::{forward_with, Architecture, HeadMode, NetworkOutput};
use crate::ops::Scalar;
use crate::weights::Weights;

/// Foreground probability at or above which a branch claims a pixel.
pub const FOREGROUND_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct FusedPrediction {
    pub label: LabelMask,
    pub prob_teeth: Array2<f32>,
    pub prob_plaque: Array2<f32>,
}

impl FusedPrediction {
    /// Each branch thresholded on its own (both may claim a pixel).
    pub fn branch_maps(&self) -> CategoryMaps {
        CategoryMaps {
            teeth: self.prob_teeth.mapv(|p| u8::from(p >= FOREGROUND_THRESHOLD)),
            plaque: self.prob_plaque.mapv(|p| u8::from(p >= FOREGROUND_THRESHOLD)),
        }
    }

    pub fn fused_maps(&self) -> CategoryMaps {
        CategoryMaps::from_label(&self.label)
    }
}

/// Softmax over the two channels of `[2, H, W]` logits; the foreground channel.
/// Equivalent to `sigmoid(fg - bg)`.
pub fn branch_foreground_prob<T: Scalar>(mask_logits: ArrayView3<T>) -> Array2<f32> {
    let (_, h, w) = mask_logits.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let d = mask_logits[[1, y, x]] - mask_logits[[0, y, x]];
        sigmoid(d).to_f32().unwrap_or(f32::NAN)
    })
}

/// Background where both branches are below 0.5, otherwise the more confident
/// branch; exact ties go to plaque.
pub fn fuse_branches(p_teeth: &Array2<f32>, p_plaque: &Array2<f32>) -> Result<FusedPrediction> {
    if p_teeth.dim() != p_plaque.dim() {
        return Err(Error::Shape(format!("{:?} vs {:?}", p_teeth.dim(), p_plaque.dim())));
    }
    let mut labels = Array2::<u8>::zeros(p_teeth.dim());
    ndarray::Zip::from(&mut labels)
        .and(p_teeth)
        .and(p_plaque)
        .for_each(|l, &t, &p| {
            *l = if t.max(p) < FOREGROUND_THRESHOLD {
                BACKGROUND
            } else if p >= t {
                PLAQUE
            } else {
                TEETH
            };
        });
    Ok(FusedPrediction {
        label: LabelMask::new(labels)?,
        prob_teeth: p_teeth.clone(),
        prob_plaque: p_plaque.clone(),
    })
}

/// Softmax of `[3, H, W]` baseline logits: label is the argmax, the maps are the
/// teeth and plaque class probabilities.
fn joint_prediction<T: Scalar>(logits: ArrayView3<T>) -> Result<FusedPrediction> {
    let (_, h, w) = logits.dim();
    let mut probs = Array3::<f32>::zeros((3, h, w));
    let mut labels = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let v: Vec<f64> = (0..3).map(|c| logits[[c, y, x]].to_f64().unwrap_or(f64::NAN)).collect();
            let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = v.iter().map(|a| (a - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut best = 0;
            for c in 0..3 {
                probs[[c, y, x]] = (e[c] / z) as f32;
                if v[c] > v[best] {
                    best = c;
                }
            }
            labels[[y, x]] = best as u8;
        }
    }
    Ok(FusedPrediction {
        label: LabelMask::new(labels)?,
        prob_teeth: probs.index_axis(ndarray::Axis(0), 1).to_owned(),
        prob_plaque: probs.index_axis(ndarray::Axis(0), 2).to_owned(),
    })
}

/// Forward with mask heads only, then fuse. Boundary and projection weights are
/// never read, so checkpoints without them predict identically.
pub fn predict<T: Scalar>(arch: &Architecture, w: &Weights<T>, image: ArrayView3<T>) -> Result<FusedPrediction> {
    match forward_with(arch, w, image, HeadMode::MasksOnly)? {
        NetworkOutput::Decomposed(r) => fuse_branches(
            &branch_foreground_prob(r.teeth.mask_logits.view()),
            &branch_foreground_prob(r.plaque.mask_logits.view()),
        ),
        NetworkOutput::Joint(logits) => joint_prediction(logits.view()),
    }
}

/// Files written by [`export_masks`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExportedFiles {
    pub label: PathBuf,
    pub prob_teeth: Option<PathBuf>,
    pub prob_plaque: Option<PathBuf>,
}

/// Write `<dir>/<id>.png` (raw class indices, same encoding as ground truth) and,
/// if requested, `<dir>/<id>_teeth_prob.png` / `<dir>/<id>_plaque_prob.png` as 16-bit PNGs.
pub fn export_masks(pred: &FusedPrediction, dir: &Path, id: &str, with_probs: bool) -> Result<ExportedFiles> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let label = dir.join(format!("{id}.png"));
    write_index_png(&label, pred.label.labels())?;
    let (prob_teeth, prob_plaque) = if with_probs {
        let t = dir.join(format!("{id}_teeth_prob.png"));
        let p = dir.join(format!("{id}_plaque_prob.png"));
        write_prob_png(&t, &pred.prob_teeth)?;
        write_prob_png(&p, &pred.prob_plaque)?;
        (Some(t), Some(p))
    } else {
        (None, None)
    };
    Ok(ExportedFiles {
        label,
        prob_teeth,
        prob_plaque,
    })
}
