use serde::{Deserialize, Serialize};

use super::config::Variant;
use super::eval::EVAL_EPOCH;
use super::model::PpcrModel;
use super::pipeline::{run_pipeline, Mode, PromptTrace};
use super::train::template_seeds;
use super::HarnessError;
use crate::diffcore::Graph;
use crate::grounding::PixelBox;
use crate::prompt::tokenize;
use crate::raster::{Mask, RgbImage};
use crate::segmenter::{binarize, MaskLogits};

/// Artifacts of one inference.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictOutput {
    pub mask: Mask,
    /// Repaired box handed to the segmenter.
    pub box_pixels: Option<PixelBox>,
    pub trace: PromptTrace,
}

/// Line of the box JSONL written by the CLI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub expression: String,
    pub box_unit: Option<[f32; 4]>,
    pub box_pixels: Option<[f32; 4]>,
}

impl PredictOutput {
    pub fn box_record(&self, expression: &str) -> BoxRecord {
        let box_unit = self.trace.stages.iter().find_map(|s| match s {
            super::pipeline::StageTrace::Spatial { box_unit, .. } => Some(*box_unit),
            _ => None,
        });
        BoxRecord {
            expression: expression.to_string(),
            box_unit,
            box_pixels: self.box_pixels.map(|b| b.to_array()),
        }
    }
}

/// Runs the checkpoint's own variant on one image and expression.
pub fn predict(
    model: &PpcrModel,
    image: &RgbImage,
    expression: &str,
    seed: u64,
    threshold: f32,
) -> Result<PredictOutput, HarnessError> {
    let tokens = tokenize(expression);
    model.vocab().encode(&tokens)?;
    let variant: Variant = model.variant;
    let mut g = Graph::new();
    let seeds = template_seeds(seed, EVAL_EPOCH, 0);
    let out = run_pipeline(model, &mut g, image, &tokens, variant, Mode::Infer, seeds, None)?;
    let logits = MaskLogits {
        logits: g.value(out.mask_logits).clone(),
    };
    Ok(PredictOutput {
        mask: binarize(&logits, threshold),
        box_pixels: out.box_prompt,
        trace: out.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::fixtures::{fresh_model, samples};
    use crate::shapeworld::DatasetManifest;

    #[test]
    fn trace_has_three_stages_and_box_in_bounds() {
        let model = fresh_model(Variant::Ppcr, 4);
        for s in samples(&DatasetManifest::new("t", 5, 21)) {
            let out = predict(&model, &s.image, &s.expression_text(), 9, 0.5).unwrap();
            assert_eq!(out.trace.stage_names(), ["semantic", "spatial", "segment"]);
            let b = out.box_pixels.unwrap();
            assert!(b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= 64.0 && b.y2 <= 64.0);
            assert!((b.x2 - b.x1) * (b.y2 - b.y1) >= 1.0);
            let again = predict(&model, &s.image, &s.expression_text(), 9, 0.5).unwrap();
            assert_eq!(out, again);
            let rec = out.box_record(&s.expression_text());
            assert!(rec.box_unit.unwrap().iter().all(|c| (0.0..=1.0).contains(c)));
        }
    }

    #[test]
    fn unknown_words_are_rejected() {
        let model = fresh_model(Variant::Ppcr, 4);
        let s = &samples(&DatasetManifest::new("t", 1, 21))[0];
        let err = predict(&model, &s.image, "the purple dodecahedron", 0, 0.5).unwrap_err();
        assert!(matches!(err, HarnessError::Prompt(_)), "{err}");
    }
}
