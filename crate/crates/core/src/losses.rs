//! Training objectives and their analytic gradients.
//!
//! Every loss returns its value together with the gradient with respect to its
//! differentiable input, so the same code path serves training and the
//! finite-difference checks in the test suite.

use std::str::FromStr;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::data::{BinaryMap, LabelMask, SupervisionPack};
use crate::error::{Error, Result};
use crate::model::{BranchOutputs, DecoderGrads, ForwardResult};
use crate::ops::Scalar;

/// Added to embedding norms before dividing.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CcmReduction {
    Sum,
    #[default]
    Mean,
}

impl FromStr for CcmReduction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(CcmReduction::Sum),
            "mean" => Ok(CcmReduction::Mean),
            other => Err(Error::Config(format!("unknown ccm reduction `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the boundary BCE term.
    pub alpha: f64,
    /// Weight of the boundary Dice term.
    pub beta: f64,
    /// Dice smoothing term.
    pub tau: f64,
    pub ccm_reduction: CcmReduction,
    /// Penalize `max(0, cos)` instead of the raw cosine.
    pub ccm_hinge: bool,
    /// Stop the contrastive gradient at the branch-entry features.
    pub ccm_stop_grad: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 1.0,
            tau: 1.0,
            ccm_reduction: CcmReduction::Mean,
            ccm_hinge: false,
            ccm_stop_grad: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::Config("alpha and beta must be nonnegative".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        Ok(())
    }
}

/// The five terms of the training objective and their sum.
/// `seg_joint` carries the 3-class loss of the baseline network and is zero otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub seg_teeth: f64,
    pub seg_plaque: f64,
    pub scm_teeth: f64,
    pub scm_plaque: f64,
    pub ccm: f64,
    #[serde(default)]
    pub seg_joint: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn terms(&self) -> [(&'static str, f64); 6] {
        [
            ("seg_teeth", self.seg_teeth),
            ("seg_plaque", self.seg_plaque),
            ("scm_teeth", self.scm_teeth),
            ("scm_plaque", self.scm_plaque),
            ("ccm", self.ccm),
            ("seg_joint", self.seg_joint),
        ]
    }

    /// Recompute `total` as the plain sum of the terms.
    pub fn with_total(mut self) -> Self {
        self.total = self.terms().iter().map(|(_, v)| v).sum();
        self
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in self.terms().into_iter().chain([("total", self.total)]) {
            if !v.is_finite() {
                return Err(Error::NonFinite { term: name.to_string() });
            }
        }
        Ok(())
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            seg_teeth: self.seg_teeth * s,
            seg_plaque: self.seg_plaque * s,
            scm_teeth: self.scm_teeth * s,
            scm_plaque: self.scm_plaque * s,
            ccm: self.ccm * s,
            seg_joint: self.seg_joint * s,
            total: self.total * s,
        }
    }

    pub fn add(&self, o: &Self) -> Self {
        Self {
            seg_teeth: self.seg_teeth + o.seg_teeth,
            seg_plaque: self.seg_plaque + o.seg_plaque,
            scm_teeth: self.scm_teeth + o.scm_teeth,
            scm_plaque: self.scm_plaque + o.scm_plaque,
            ccm: self.ccm + o.ccm,
            seg_joint: self.seg_joint + o.seg_joint,
            total: self.total + o.total,
        }
    }
}

fn to_f64<T: Scalar>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

fn check_shape(what: &str, got: (usize, usize), want: (usize, usize)) -> Result<()> {
    if got != want {
        return Err(Error::Shape(format!("{what}: {got:?} vs {want:?}")));
    }
    Ok(())
}

pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Pixel-mean categorical cross-entropy of `[K, H, W]` logits against class indices.
pub fn cross_entropy<T: Scalar>(logits: ArrayView3<T>, target: ArrayView2<u8>) -> Result<(T, Array3<T>)> {
    let (k, h, w) = logits.dim();
    check_shape("cross-entropy target", target.dim(), (h, w))?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { term: "mask logits".into() });
    }
    let n = T::from_usize(h * w).expect("pixel count");
    let mut grad = Array3::<T>::zeros((k, h, w));
    let mut total = T::zero();
    for y in 0..h {
        for x in 0..w {
            let t = target[[y, x]] as usize;
            if t >= k {
                return Err(Error::Invalid(format!("class index {t} with {k} logits")));
            }
            let col = logits.slice(ndarray::s![.., y, x]);
            let m = col.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let z: T = col.iter().map(|&v| (v - m).exp()).sum();
            let lse = m + z.ln();
            total += lse - col[t];
            for c in 0..k {
                let p = (col[c] - lse).exp();
                let onehot = if c == t { T::one() } else { T::zero() };
                grad[[c, y, x]] = (p - onehot) / n;
            }
        }
    }
    Ok((total / n, grad))
}

/// Segmentation loss of one branch: 2-class cross-entropy against a binary map.
pub fn seg_ce_loss<T: Scalar>(mask_logits: ArrayView3<T>, target: &BinaryMap) -> Result<(T, Array3<T>)> {
    if mask_logits.dim().0 != 2 {
        return Err(Error::Shape(format!("branch logits need 2 channels, got {}", mask_logits.dim().0)));
    }
    cross_entropy(mask_logits, target.view())
}

/// Pixel-mean binary cross-entropy on logits in the log-sum-exp stable form
/// `max(z, 0) - z*y + ln(1 + exp(-|z|))`.
pub fn bce_loss<T: Scalar>(logits: ArrayView2<T>, target: &BinaryMap) -> Result<(T, Array2<T>)> {
    check_shape("bce target", target.dim(), logits.dim())?;
    let n = T::from_usize(logits.len()).expect("pixel count");
    let mut total = T::zero();
    let mut grad = Array2::<T>::zeros(logits.dim());
    Zip::from(&mut grad)
        .and(&logits)
        .and(target)
        .for_each(|g, &z, &y| {
            let y = if y != 0 { T::one() } else { T::zero() };
            total = total + z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p();
            *g = (sigmoid(z) - y) / n;
        });
    Ok((total / n, grad))
}

/// `1 - (2 sum p*y + tau) / (sum p^2 + sum y^2 + tau)`, with gradient in `p`.
pub fn dice_loss<T: Scalar>(p: ArrayView2<T>, target: &BinaryMap, tau: T) -> Result<(T, Array2<T>)> {
    check_shape("dice target", target.dim(), p.dim())?;
    let two = T::from_f64_lossy(2.0);
    let mut inter = T::zero();
    let mut pp = T::zero();
    let mut yy = T::zero();
    Zip::from(&p).and(target).for_each(|&p, &y| {
        let y = if y != 0 { T::one() } else { T::zero() };
        inter += p * y;
        pp += p * p;
        yy += y;
    });
    let num = two * inter + tau;
    let den = pp + yy + tau;
    let loss = T::one() - num / den;
    let mut grad = Array2::<T>::zeros(p.dim());
    Zip::from(&mut grad).and(&p).and(target).for_each(|g, &p, &y| {
        let y = if y != 0 { T::one() } else { T::zero() };
        *g = -(two * y * den - num * two * p) / (den * den);
    });
    Ok((loss, grad))
}

/// Boundary loss `alpha * BCE + beta * Dice(sigmoid)`, gradient with respect to the logits.
pub fn scm_loss<T: Scalar>(boundary_logits: ArrayView3<T>, target: &BinaryMap, weights: &LossWeights) -> Result<(T, Array3<T>)> {
    let (c, h, w) = boundary_logits.dim();
    if c != 1 {
        return Err(Error::Shape(format!("boundary logits need 1 channel, got {c}")));
    }
    let z = boundary_logits.index_axis(Axis(0), 0);
    let alpha = T::from_f64_lossy(weights.alpha);
    let beta = T::from_f64_lossy(weights.beta);
    let (bce, g_bce) = bce_loss(z, target)?;
    let p = z.mapv(sigmoid);
    let (dice, g_dice_p) = dice_loss(p.view(), target, T::from_f64_lossy(weights.tau))?;
    let mut grad = Array2::<T>::zeros((h, w));
    Zip::from(&mut grad)
        .and(&g_bce)
        .and(&g_dice_p)
        .and(&p)
        .for_each(|g, &gb, &gd, &p| {
            *g = alpha * gb + beta * gd * p * (T::one() - p);
        });
    Ok((alpha * bce + beta * dice, grad.insert_axis(Axis(0))))
}

/// Cosine similarity between paired pixel embeddings, summed or averaged over
/// pixels. Norms get `NORM_EPS` added so zero vectors are harmless.
/// Returns the loss and gradients for `emb_p` and `emb_t`.
pub fn ccm_loss<T: Scalar>(
    emb_p: ArrayView2<T>,
    emb_t: ArrayView2<T>,
    reduction: CcmReduction,
    hinge: bool,
) -> Result<(T, Array2<T>, Array2<T>)> {
    if emb_p.dim() != emb_t.dim() {
        return Err(Error::Shape(format!(
            "embedding fields differ: {:?} vs {:?}",
            emb_p.dim(),
            emb_t.dim()
        )));
    }
    let (n, _) = emb_p.dim();
    if n == 0 {
        return Err(Error::Shape("empty embedding field".into()));
    }
    let eps = T::from_f64_lossy(NORM_EPS);
    let scale = match reduction {
        CcmReduction::Sum => T::one(),
        CcmReduction::Mean => T::one() / T::from_usize(n).expect("count"),
    };
    let mut total = T::zero();
    let mut gp = Array2::<T>::zeros(emb_p.dim());
    let mut gt = Array2::<T>::zeros(emb_t.dim());
    for i in 0..n {
        let p = emb_p.row(i);
        let t = emb_t.row(i);
        let np = p.dot(&p).sqrt();
        let nt = t.dot(&t).sqrt();
        let dp = np + eps;
        let dt = nt + eps;
        let pt = p.dot(&t);
        let cos = pt / (dp * dt);
        if hinge && cos <= T::zero() {
            continue;
        }
        total += cos;
        // d cos / d p = t / (dp dt) - p (p.t) / (np dp^2 dt); second term vanishes at p = 0
        let rp = if np > T::zero() { pt / (np * dp * dp * dt) } else { T::zero() };
        let rt = if nt > T::zero() { pt / (nt * dt * dt * dp) } else { T::zero() };
        let inv = T::one() / (dp * dt);
        for j in 0..p.len() {
            gp[[i, j]] = scale * (t[j] * inv - p[j] * rp);
            gt[[i, j]] = scale * (p[j] * inv - t[j] * rt);
        }
    }
    Ok((total * scale, gp, gt))
}

/// Loss terms and output gradients of the decomposed network for one sample.
pub struct DecomposedLoss<T> {
    pub breakdown: LossBreakdown,
    pub teeth: DecoderGrads<T>,
    pub plaque: DecoderGrads<T>,
}

/// Total objective `L_S^p + L_S^t + L_SCM^p + L_SCM^t + L_CCM` with branch-correct
/// pairings. Disabled terms are reported as zero and contribute no gradient.
pub fn total_loss_with_grads<T: Scalar>(
    out: &ForwardResult<T>,
    sup: &SupervisionPack,
    weights: &LossWeights,
    use_scm: bool,
    use_ccm: bool,
) -> Result<DecomposedLoss<T>> {
    let branch = |o: &BranchOutputs<T>, mask: &BinaryMap, boundary: &BinaryMap, name: &str| -> Result<(f64, f64, Array3<T>, Option<Array3<T>>)> {
        let (seg, g_mask) = seg_ce_loss(o.mask_logits.view(), mask).map_err(|e| match e {
            Error::NonFinite { term } => Error::NonFinite {
                term: format!("seg_{name} ({term})"),
            },
            other => other,
        })?;
        let (scm, g_b) = if use_scm {
            let logits = o
                .boundary_logits
                .as_ref()
                .ok_or_else(|| Error::Invalid(format!("{name} boundary head missing")))?;
            let (v, g) = scm_loss(logits.view(), boundary, weights)?;
            (to_f64(v), Some(g))
        } else {
            (0.0, None)
        };
        Ok((to_f64(seg), scm, g_mask, g_b))
    };
    let (seg_t, scm_t, gm_t, gb_t) = branch(&out.teeth, &sup.teeth_mask, &sup.teeth_boundary, "teeth")?;
    let (seg_p, scm_p, gm_p, gb_p) = branch(&out.plaque, &sup.plaque_mask, &sup.plaque_boundary, "plaque")?;
    let (ccm, ge_t, ge_p) = if use_ccm {
        let ep = out.plaque.embeddings.as_ref().ok_or_else(|| Error::Invalid("plaque embeddings missing".into()))?;
        let et = out.teeth.embeddings.as_ref().ok_or_else(|| Error::Invalid("teeth embeddings missing".into()))?;
        let (v, gp, gt) = ccm_loss(ep.view(), et.view(), weights.ccm_reduction, weights.ccm_hinge)?;
        (to_f64(v), Some(gt), Some(gp))
    } else {
        (0.0, None, None)
    };
    let breakdown = LossBreakdown {
        seg_teeth: seg_t,
        seg_plaque: seg_p,
        scm_teeth: scm_t,
        scm_plaque: scm_p,
        ccm,
        seg_joint: 0.0,
        total: 0.0,
    }
    .with_total();
    breakdown.check_finite()?;
    Ok(DecomposedLoss {
        breakdown,
        teeth: DecoderGrads {
            mask_logits: gm_t,
            boundary_logits: gb_t,
            embeddings: ge_t,
            detach_embeddings: weights.ccm_stop_grad,
        },
        plaque: DecoderGrads {
            mask_logits: gm_p,
            boundary_logits: gb_p,
            embeddings: ge_p,
            detach_embeddings: weights.ccm_stop_grad,
        },
    })
}

/// Loss breakdown of a full forward result with every term enabled.
pub fn total_loss<T: Scalar>(out: &ForwardResult<T>, sup: &SupervisionPack, weights: &LossWeights) -> Result<LossBreakdown> {
    let use_scm = out.teeth.boundary_logits.is_some() && out.plaque.boundary_logits.is_some();
    let use_ccm = out.teeth.embeddings.is_some() && out.plaque.embeddings.is_some();
    total_loss_with_grads(out, sup, weights, use_scm, use_ccm).map(|l| l.breakdown)
}

/// 3-class loss of the baseline network.
pub fn joint_loss_with_grads<T: Scalar>(logits: ArrayView3<T>, label: &LabelMask) -> Result<(LossBreakdown, Array3<T>)> {
    let (v, g) = cross_entropy(logits, label.labels().view())?;
    let breakdown = LossBreakdown {
        seg_joint: to_f64(v),
        ..Default::default()
    }
    .with_total();
    breakdown.check_finite()?;
    Ok((breakdown, g))
}
