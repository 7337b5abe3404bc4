//! Training losses and segmentation metrics.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::diffcore::{DiffError, Graph, Var};
use crate::grounding::NormalizedBox;
use crate::raster::Mask;

pub const DICE_EPS: f32 = 1.0;
/// Bins per coordinate for the localization classification loss.
pub const COORD_BINS: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum CriteriaError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss component {0}")]
    NonFinite(&'static str),
    #[error("negative loss weight {0}")]
    NegativeWeight(&'static str),
    #[error("no samples accumulated")]
    EmptyAccumulator,
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub bce: f32,
    pub dice: f32,
    pub l1: f32,
    pub ce: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            bce: 2.0,
            dice: 0.5,
            l1: 2.0,
            ce: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), CriteriaError> {
        for (name, w) in [("bce", self.bce), ("dice", self.dice), ("l1", self.l1), ("ce", self.ce)] {
            if !w.is_finite() || w < 0.0 {
                return Err(CriteriaError::NegativeWeight(name));
            }
        }
        Ok(())
    }
}

/// Scalar loss values of one forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub bce: f32,
    pub dice: f32,
    pub l1: f32,
    pub ce: f32,
}

impl LossComponents {
    pub fn total(&self, w: &LossWeights) -> Result<f32, CriteriaError> {
        for (name, v) in [("bce", self.bce), ("dice", self.dice), ("l1", self.l1), ("ce", self.ce)] {
            if !v.is_finite() {
                return Err(CriteriaError::NonFinite(name));
            }
        }
        Ok(w.bce * self.bce + w.dice * self.dice + w.l1 * self.l1 + w.ce * self.ce)
    }
}

fn check_len(g: &Graph, logits: Var, gt: &Mask) -> Result<(), CriteriaError> {
    let n = g.value(logits).len();
    let m = gt.width() * gt.height();
    if n != m {
        return Err(CriteriaError::Shape(format!(
            "{n} logits vs {}x{} mask",
            gt.width(),
            gt.height()
        )));
    }
    Ok(())
}

pub fn bce_loss(g: &mut Graph, logits: Var, gt: &Mask) -> Result<Var, CriteriaError> {
    check_len(g, logits, gt)?;
    Ok(g.bce_with_logits(logits, Rc::new(gt.to_f32()))?)
}

pub fn dice_loss(g: &mut Graph, logits: Var, gt: &Mask) -> Result<Var, CriteriaError> {
    check_len(g, logits, gt)?;
    Ok(g.dice_loss(logits, Rc::new(gt.to_f32()), DICE_EPS)?)
}

/// Mean absolute error over the four coordinates of `pred[1, 4]`.
pub fn l1_box_loss(g: &mut Graph, pred: Var, gt: NormalizedBox) -> Result<Var, CriteriaError> {
    if g.value(pred).len() != 4 {
        return Err(CriteriaError::Shape(format!(
            "box prediction {:?}",
            g.value(pred).shape()
        )));
    }
    Ok(g.l1_loss(pred, &gt.to_array())?)
}

/// Bin index of each coordinate: `min(floor(c·K), K-1)`.
pub fn coord_bins(b: NormalizedBox, bins: usize) -> [usize; 4] {
    b.to_array()
        .map(|c| ((c.clamp(0.0, 1.0) * bins as f32).floor() as usize).min(bins - 1))
}

/// Mean cross-entropy of `logits[4, K]` against one target bin per coordinate.
pub fn ce_loss(g: &mut Graph, logits: Var, targets: &[usize; 4]) -> Result<Var, CriteriaError> {
    if g.value(logits).rows() != 4 {
        return Err(CriteriaError::Shape(format!(
            "coordinate logits {:?}",
            g.value(logits).shape()
        )));
    }
    Ok(g.cross_entropy_rows(logits, targets)?)
}

/// Weighted sum of whichever components are present.
pub fn total_loss(
    g: &mut Graph,
    bce: Option<Var>,
    dice: Option<Var>,
    l1: Option<Var>,
    ce: Option<Var>,
    w: &LossWeights,
) -> Result<Var, CriteriaError> {
    w.validate()?;
    let mut acc: Option<Var> = None;
    for (name, part, weight) in [
        ("bce", bce, w.bce),
        ("dice", dice, w.dice),
        ("l1", l1, w.l1),
        ("ce", ce, w.ce),
    ] {
        let Some(v) = part else { continue };
        if !g.value(v).is_finite() {
            return Err(CriteriaError::NonFinite(name));
        }
        let term = g.scale(v, weight)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    match acc {
        Some(v) => Ok(v),
        None => Ok(g.constant(crate::diffcore::Tensor::scalar(0.0))?),
    }
}

/// IoU of two masks; an empty union counts as a perfect match.
pub fn mask_iou(pred: &Mask, gt: &Mask) -> Result<f64, CriteriaError> {
    let (i, u) = counts(pred, gt)?;
    Ok(ratio(i, u))
}

fn counts(pred: &Mask, gt: &Mask) -> Result<(u64, u64), CriteriaError> {
    if !pred.same_size(gt) {
        return Err(CriteriaError::Shape(format!(
            "mask {}x{} vs {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    Ok(pred.overlap_counts(gt))
}

fn ratio(i: u64, u: u64) -> f64 {
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricAccumulator {
    pub total_intersection: u64,
    pub total_union: u64,
    pub per_sample_ious: Vec<f64>,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one sample and returns its IoU.
    pub fn accumulate(&mut self, pred: &Mask, gt: &Mask) -> Result<f64, CriteriaError> {
        let (i, u) = counts(pred, gt)?;
        Ok(self.add_counts(i, u))
    }

    pub fn add_counts(&mut self, intersection: u64, union: u64) -> f64 {
        debug_assert!(intersection <= union);
        self.total_intersection += intersection;
        self.total_union += union;
        let iou = ratio(intersection, union);
        self.per_sample_ious.push(iou);
        iou
    }

    pub fn len(&self) -> usize {
        self.per_sample_ious.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_sample_ious.is_empty()
    }

    /// `(oIoU, mIoU)`.
    pub fn finalize(&self) -> Result<(f64, f64), CriteriaError> {
        if self.is_empty() {
            return Err(CriteriaError::EmptyAccumulator);
        }
        let o = ratio(self.total_intersection, self.total_union);
        let m = self.per_sample_ious.iter().sum::<f64>() / self.len() as f64;
        Ok((o, m))
    }
}
