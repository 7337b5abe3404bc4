use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{RunConfig, Variant};
use super::model::PpcrModel;
use super::pipeline::{check_routing, run_pipeline, Mode, PromptTrace};
use super::train::template_seeds;
use super::HarnessError;
use crate::criteria::MetricAccumulator;
use crate::diffcore::Graph;
use crate::grounding::{box_iou, PixelBox};
use crate::raster::Mask;
use crate::segmenter::{binarize, MaskLogits};
use crate::shapeworld::ReferringSample;

pub const EVAL_EPOCH: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub iou: f64,
    pub intersection: u64,
    pub union: u64,
    pub pred_box: Option<[f32; 4]>,
    /// IoU of the predicted box against the ground-truth box.
    pub box_iou: Option<f64>,
    pub relational: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: Variant,
    pub seed: u64,
    pub oiou: f64,
    pub miou: f64,
    pub records: Vec<SampleRecord>,
    pub wall_clock_secs: f64,
    pub config_hash: String,
    pub dataset_hash: String,
    /// Samples whose prompt trace passed the routing check.
    pub routing_checked: usize,
}

impl EvalReport {
    /// mIoU over relational (`relational = true`) or attribute-only samples.
    pub fn subset_miou(&self, relational: bool) -> Option<f64> {
        let ious: Vec<f64> = self
            .records
            .iter()
            .filter(|r| r.relational == relational)
            .map(|r| r.iou)
            .collect();
        (!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64)
    }

    /// Equality of everything except wall-clock time, with metrics to `tol`.
    pub fn same_results(&self, other: &EvalReport, tol: f64) -> bool {
        self.variant == other.variant
            && self.seed == other.seed
            && self.config_hash == other.config_hash
            && self.dataset_hash == other.dataset_hash
            && (self.oiou - other.oiou).abs() <= tol
            && (self.miou - other.miou).abs() <= tol
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| {
                a.id == b.id && a.intersection == b.intersection && a.union == b.union && a.pred_box == b.pred_box
            })
    }
}

/// One predicted mask with its optional box and trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub mask: Mask,
    pub box_pixels: Option<PixelBox>,
    pub trace: Option<PromptTrace>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    /// Predicted masks in sample order.
    pub masks: Vec<Mask>,
}

/// Short digest over sample ids, expressions, images and masks.
pub fn dataset_hash(samples: &[ReferringSample]) -> String {
    let mut h = Sha256::new();
    for s in samples {
        h.update((s.id as u64).to_le_bytes());
        h.update(s.expression_text().as_bytes());
        h.update([0]);
        h.update(s.image.raw());
        h.update(s.gt_mask.bits().iter().map(|&b| b as u8).collect::<Vec<_>>());
    }
    hex::encode(&h.finalize()[..8])
}

/// Scores the predictions of `predictor` on every sample.
pub fn evaluate_with<F>(
    samples: &[ReferringSample],
    variant: Variant,
    seed: u64,
    config_hash: String,
    mut predictor: F,
) -> Result<Evaluation, HarnessError>
where
    F: FnMut(&ReferringSample) -> Result<Prediction, HarnessError>,
{
    if samples.is_empty() {
        return Err(HarnessError::Config("empty evaluation set".into()));
    }
    let start = Instant::now();
    let mut acc = MetricAccumulator::new();
    let mut records = Vec::with_capacity(samples.len());
    let mut masks = Vec::with_capacity(samples.len());
    let mut routing_checked = 0;
    for s in samples {
        let pred = predictor(s)?;
        if let Some(trace) = &pred.trace {
            check_routing(variant, trace, &s.expression)?;
            routing_checked += 1;
        }
        if !pred.mask.same_size(&s.gt_mask) {
            return Err(HarnessError::Config(format!(
                "sample {}: predicted mask has the wrong size",
                s.id
            )));
        }
        let (intersection, union) = pred.mask.overlap_counts(&s.gt_mask);
        let iou = acc.add_counts(intersection, union);
        records.push(SampleRecord {
            id: s.id,
            iou,
            intersection,
            union,
            pred_box: pred.box_pixels.map(|b| b.to_array()),
            box_iou: pred.box_pixels.map(|b| box_iou(&b, &s.gt_box)),
            relational: s.relational,
        });
        masks.push(pred.mask);
    }
    let (oiou, miou) = acc.finalize()?;
    let report = EvalReport {
        variant,
        seed,
        oiou,
        miou,
        records,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        config_hash,
        dataset_hash: dataset_hash(samples),
        routing_checked,
    };
    Ok(Evaluation { report, masks })
}

/// Full-pipeline inference for one sample.
pub fn predict_sample(
    model: &PpcrModel,
    sample: &ReferringSample,
    variant: Variant,
    seed: u64,
    threshold: f32,
) -> Result<Prediction, HarnessError> {
    let mut g = Graph::new();
    let out = run_pipeline(
        model,
        &mut g,
        &sample.image,
        &sample.expression,
        variant,
        Mode::Infer,
        template_seeds(seed, EVAL_EPOCH, sample.id),
        Some(sample.gt_box),
    )?;
    let logits = MaskLogits {
        logits: g.value(out.mask_logits).clone(),
    };
    Ok(Prediction {
        mask: binarize(&logits, threshold),
        box_pixels: out.box_prompt,
        trace: Some(out.trace),
    })
}

/// Evaluates `model` as `variant`; the oracle variant runs on a ppcr checkpoint.
pub fn evaluate(
    model: &PpcrModel,
    samples: &[ReferringSample],
    variant: Variant,
    config: &RunConfig,
) -> Result<Evaluation, HarnessError> {
    if variant.training_variant() != model.variant {
        return Err(HarnessError::VariantMismatch {
            checkpoint: model.variant,
            requested: variant,
        });
    }
    if config.model != model.config {
        return Err(HarnessError::Config(
            "run config describes a different architecture than the checkpoint".into(),
        ));
    }
    let cfg = config.with_variant(variant, config.seed);
    evaluate_with(samples, variant, config.seed, cfg.hash(), |s| {
        predict_sample(model, s, variant, config.seed, config.threshold)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::fixtures::{fresh_model, samples, small_config};
    use crate::harness::pipeline::StageTrace;
    use crate::shapeworld::DatasetManifest;

    fn stub(samples: &[ReferringSample], f: impl Fn(&ReferringSample) -> Mask) -> EvalReport {
        evaluate_with(samples, Variant::NoSpatial, 0, "stub".into(), |s| {
            Ok(Prediction {
                mask: f(s),
                box_pixels: None,
                trace: None,
            })
        })
        .unwrap()
        .report
    }

    #[test]
    fn perfect_and_empty_stubs() {
        let data = samples(&DatasetManifest::new("t", 6, 11));
        let perfect = stub(&data, |s| s.gt_mask.clone());
        assert_eq!((perfect.oiou, perfect.miou), (1.0, 1.0));
        let empty = stub(&data, |s| Mask::empty(s.gt_mask.width(), s.gt_mask.height()));
        assert_eq!((empty.oiou, empty.miou), (0.0, 0.0));
        assert_eq!(empty.records.len(), 6);
        assert_eq!(empty.routing_checked, 0);
    }

    #[test]
    fn routing_violations_fail_the_evaluation() {
        let data = samples(&DatasetManifest::new("t", 2, 11));
        let bad = PromptTrace {
            stages: vec![StageTrace::Segment {
                box_prompt: Some([0.0, 0.0, 8.0, 8.0]),
                prompt_tokens: 3,
            }],
        };
        let err = evaluate_with(&data, Variant::NoSpatial, 0, "stub".into(), |s| {
            Ok(Prediction {
                mask: s.gt_mask.clone(),
                box_pixels: None,
                trace: Some(bad.clone()),
            })
        })
        .unwrap_err();
        assert!(matches!(err, HarnessError::Routing { .. }));
    }

    #[test]
    fn dataset_hash_tracks_content() {
        let a = samples(&DatasetManifest::new("t", 3, 11));
        let b = samples(&DatasetManifest::new("t", 3, 12));
        assert_eq!(dataset_hash(&a), dataset_hash(&a.clone()));
        assert_ne!(dataset_hash(&a), dataset_hash(&b));
        assert_eq!(dataset_hash(&a).len(), 16);
    }

    #[test]
    fn model_evaluation_checks_every_trace() {
        let cfg = small_config(Variant::Ppcr, 1, 4, 1);
        let data = samples(&cfg.eval);
        let model = fresh_model(Variant::Ppcr, cfg.seed);
        for v in [Variant::Ppcr, Variant::GtBoxOracle] {
            let ev = evaluate(&model, &data, v, &cfg).unwrap();
            let r = &ev.report;
            assert_eq!(r.routing_checked, 4);
            assert!((0.0..=1.0).contains(&r.miou) && (0.0..=1.0).contains(&r.oiou));
            assert!(r.records.iter().all(|x| x.pred_box.is_some()));
        }
        let oracle = evaluate(&model, &data, Variant::GtBoxOracle, &cfg).unwrap();
        assert!(oracle.report.records.iter().all(|x| x.box_iou == Some(1.0)));
        assert!(evaluate(&model, &data, Variant::NoSpatial, &cfg).is_err());
        let mut other = cfg.clone();
        other.model.grounding.hidden = 32;
        assert!(evaluate(&model, &data, Variant::Ppcr, &other).is_err());
    }

    #[test]
    fn evaluation_is_repeatable() {
        let cfg = small_config(Variant::Ppcr, 1, 3, 1);
        let data = samples(&cfg.eval);
        let model = fresh_model(Variant::Ppcr, 1);
        let a = evaluate(&model, &data, Variant::Ppcr, &cfg).unwrap();
        let b = evaluate(&model, &data, Variant::Ppcr, &cfg).unwrap();
        assert!(a.report.same_results(&b.report, 0.0));
        assert_eq!(a.masks, b.masks);
    }
}
