use serde::{Deserialize, Serialize};

use super::config::Variant;
use super::model::PpcrModel;
use super::HarnessError;
use crate::diffcore::{Graph, Tensor, Var};
use crate::grounding::{rescale_box, NormalizedBox, PixelBox};
use crate::prompt::{build_semantic_prompt, build_spatial_prompt, PromptVariant, Stage, SEM_TOKEN};
use crate::raster::RgbImage;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Raw box on the tape feeds the segmenter, so mask losses reach the box head.
    Train,
    /// Repaired box enters the segmenter as a constant.
    Infer,
}

/// One stage of a forward pass, as recorded for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum StageTrace {
    Semantic {
        template_id: u32,
        tokens: Vec<String>,
        embedding_norm: f32,
    },
    Spatial {
        template_id: u32,
        prompt_variant: PromptVariant,
        tokens: Vec<String>,
        injected_slots: Vec<usize>,
        embedding_norm: f32,
        box_unit: [f32; 4],
        box_pixels: [f32; 4],
    },
    Segment {
        /// Pixel box given to the prompt encoder, if any.
        box_prompt: Option<[f32; 4]>,
        prompt_tokens: usize,
    },
}

impl StageTrace {
    pub fn name(&self) -> &'static str {
        match self {
            StageTrace::Semantic { .. } => "semantic",
            StageTrace::Spatial { .. } => "spatial",
            StageTrace::Segment { .. } => "segment",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptTrace {
    pub stages: Vec<StageTrace>,
}

impl PromptTrace {
    pub fn stage_names(&self) -> Vec<&'static str> {
        self.stages.iter().map(StageTrace::name).collect()
    }

    fn spatial(&self) -> Option<&StageTrace> {
        self.stages.iter().find(|s| matches!(s, StageTrace::Spatial { .. }))
    }

    fn segment(&self) -> Option<&StageTrace> {
        self.stages.iter().find(|s| matches!(s, StageTrace::Segment { .. }))
    }
}

/// Asserts that a trace followed the routing of `variant`.
pub fn check_routing(variant: Variant, trace: &PromptTrace, expression: &[String]) -> Result<(), HarnessError> {
    let fail = |m: String| Err(HarnessError::Routing { variant, reason: m });
    let expected: &[&str] = match variant {
        Variant::NoSpatial | Variant::GtBoxOracle => &["semantic", "segment"],
        _ => &["semantic", "spatial", "segment"],
    };
    if trace.stage_names() != expected {
        return fail(format!("stage order {:?}", trace.stage_names()));
    }
    let Some(StageTrace::Segment {
        box_prompt,
        prompt_tokens,
    }) = trace.segment()
    else {
        return fail("no segment stage".into());
    };
    match (variant.uses_box(), box_prompt) {
        (false, Some(_)) => return fail("box prompt reached the segmenter".into()),
        (true, None) => return fail("segmenter got no box prompt".into()),
        _ => {}
    }
    if *prompt_tokens != if variant.uses_box() { 3 } else { 1 } {
        return fail(format!("{prompt_tokens} prompt tokens"));
    }
    if let Some(StageTrace::Spatial {
        prompt_variant,
        tokens,
        injected_slots,
        ..
    }) = trace.spatial()
    {
        if Some(*prompt_variant) != variant.spatial_prompt() {
            return fail(format!("spatial prompt built as {prompt_variant:?}"));
        }
        let has_sem_token = tokens.iter().any(|t| t == SEM_TOKEN);
        match prompt_variant {
            PromptVariant::Ppcr => {
                if let Some(t) = tokens.iter().find(|t| expression.contains(t)) {
                    return fail(format!("expression token {t:?} in spatial prompt"));
                }
                if injected_slots.is_empty() {
                    return fail("no semantic injection".into());
                }
            }
            PromptVariant::ReOnly => {
                if !injected_slots.is_empty() || has_sem_token {
                    return fail("semantic embedding injected".into());
                }
            }
            PromptVariant::RePlusSem => {
                if injected_slots.is_empty() {
                    return fail("no semantic injection".into());
                }
            }
        }
    }
    Ok(())
}

/// Seeds for the two template draws of one pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TemplateSeeds {
    pub semantic: u64,
    pub spatial: u64,
}

/// Tape handles and values produced by one pass.
#[derive(Debug, Clone)]
pub struct PassOutput {
    /// `[H, W]`.
    pub mask_logits: Var,
    /// Raw `[1, 4]` box in unit coordinates.
    pub box_raw: Option<Var>,
    /// `[4, K]`.
    pub coord_logits: Option<Var>,
    /// Box actually fed to the segmenter.
    pub box_prompt: Option<PixelBox>,
    pub trace: PromptTrace,
}

fn row_norm(g: &Graph, v: Var) -> f32 {
    g.value(v).l2_norm()
}

/// Semantic understanding → spatial grounding → segmentation for one sample.
pub fn run_pipeline(
    model: &PpcrModel,
    g: &mut Graph,
    image: &RgbImage,
    expression: &[String],
    variant: Variant,
    mode: Mode,
    seeds: TemplateSeeds,
    gt_box: Option<PixelBox>,
) -> Result<PassOutput, HarnessError> {
    if variant.training_variant() != model.variant {
        return Err(HarnessError::VariantMismatch {
            checkpoint: model.variant,
            requested: variant,
        });
    }
    if variant == Variant::GtBoxOracle && mode == Mode::Train {
        return Err(HarnessError::Config("gt_box_oracle is evaluation-only".into()));
    }
    let store = &model.store;
    let (w, h) = (image.width(), image.height());
    let fv = model.reasoner.encode_image(store, image)?;
    let sf = model.segmenter.encode_image_seg(store, image)?;
    let mut trace = PromptTrace::default();

    let prompt_variant = variant.spatial_prompt().unwrap_or(PromptVariant::Ppcr);
    let sem_template = model
        .templates
        .sample(Stage::Semantic, prompt_variant, seeds.semantic)?;
    let sem_prompt = build_semantic_prompt(expression, sem_template)?;
    let sem = model.reasoner.semantic_forward(g, store, &fv, &sem_prompt)?;
    trace.stages.push(StageTrace::Semantic {
        template_id: sem_template.id,
        tokens: sem_prompt.tokens.clone(),
        embedding_norm: row_norm(g, sem),
    });

    let (box_raw, coord_logits, box_prompt, box_var) = match variant.spatial_prompt() {
        None if variant == Variant::GtBoxOracle => {
            let b = gt_box.ok_or_else(|| HarnessError::Config("gt_box_oracle needs ground-truth boxes".into()))?;
            let v = g.constant(Tensor::row(b.normalized(w, h).to_array().to_vec()))?;
            (None, None, Some(b), Some(v))
        }
        None => (None, None, None, None),
        Some(pv) => {
            let heads = model
                .grounding
                .as_ref()
                .ok_or_else(|| HarnessError::Config("model has no grounding heads".into()))?;
            let template = model.templates.sample(Stage::Spatial, pv, seeds.spatial)?;
            let expr = pv.needs_expression().then_some(expression);
            let sp = build_spatial_prompt(pv, expr, template)?;
            let sem_in = pv.injects_semantic().then_some(sem);
            let p = model.reasoner.spatial_forward(g, store, &fv, &sp, sem_in)?;
            let raw = heads.box_forward(g, store, &fv, p)?;
            let coord = heads.coord_forward(g, store, p)?;
            let d = g.value(raw).data();
            let unit = NormalizedBox::new(d[0], d[1], d[2], d[3]);
            let pixels = rescale_box(unit, w, h);
            trace.stages.push(StageTrace::Spatial {
                template_id: template.id,
                prompt_variant: pv,
                tokens: sp.tokens.clone(),
                injected_slots: sp.sem_slot_positions.clone(),
                embedding_norm: row_norm(g, p),
                box_unit: unit.to_array(),
                box_pixels: pixels.to_array(),
            });
            let fed = match mode {
                Mode::Train => raw,
                Mode::Infer => g.constant(Tensor::row(pixels.normalized(w, h).to_array().to_vec()))?,
            };
            (Some(raw), Some(coord), Some(pixels), Some(fed))
        }
    };

    let prompts = model.segmenter.prompt_forward(g, store, sem, box_var)?;
    let prompt_tokens = g.value(prompts).rows();
    let mask_logits = model.segmenter.decode_forward(g, store, &sf, prompts, box_var)?;
    trace.stages.push(StageTrace::Segment {
        box_prompt: box_prompt.map(|b| b.to_array()),
        prompt_tokens,
    });
    Ok(PassOutput {
        mask_logits,
        box_raw,
        coord_logits,
        box_prompt,
        trace,
    })
}

/// SplitMix64 over the parts; used to derive per-sample seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::fixtures::{fresh_model, samples};
    use crate::shapeworld::DatasetManifest;

    fn trace_of(variant: Variant, mode: Mode) -> (PromptTrace, Vec<String>) {
        let model = fresh_model(variant, 3);
        let s = &samples(&DatasetManifest::new("t", 2, 7))[1];
        let mut g = Graph::new();
        let seeds = TemplateSeeds {
            semantic: 1,
            spatial: 2,
        };
        let out = run_pipeline(
            &model,
            &mut g,
            &s.image,
            &s.expression,
            variant,
            mode,
            seeds,
            Some(s.gt_box),
        )
        .unwrap();
        assert_eq!(g.value(out.mask_logits).shape(), &[64, 64]);
        assert_eq!(out.box_raw.is_some(), variant.spatial_prompt().is_some());
        (out.trace, s.expression.clone())
    }

    #[test]
    fn every_variant_passes_its_own_routing_check() {
        for v in Variant::ALL {
            let (trace, expr) = trace_of(v, Mode::Infer);
            check_routing(v, &trace, &expr).unwrap_or_else(|e| panic!("{v}: {e}"));
        }
        let (trace, _) = trace_of(Variant::Ppcr, Mode::Train);
        assert_eq!(trace.stage_names(), ["semantic", "spatial", "segment"]);
    }

    #[test]
    fn no_spatial_sends_no_box() {
        let (trace, _) = trace_of(Variant::NoSpatial, Mode::Infer);
        assert_eq!(trace.stage_names(), ["semantic", "segment"]);
        assert!(matches!(
            trace.stages[1],
            StageTrace::Segment {
                box_prompt: None,
                prompt_tokens: 1
            }
        ));
    }

    #[test]
    fn oracle_feeds_the_ground_truth_box() {
        let model = fresh_model(Variant::Ppcr, 3);
        let s = &samples(&DatasetManifest::new("t", 2, 7))[0];
        let mut g = Graph::new();
        let seeds = TemplateSeeds {
            semantic: 1,
            spatial: 2,
        };
        let out = run_pipeline(
            &model,
            &mut g,
            &s.image,
            &s.expression,
            Variant::GtBoxOracle,
            Mode::Infer,
            seeds,
            Some(s.gt_box),
        )
        .unwrap();
        assert_eq!(out.box_prompt, Some(s.gt_box));
        let mut g = Graph::new();
        let err = run_pipeline(
            &model,
            &mut g,
            &s.image,
            &s.expression,
            Variant::GtBoxOracle,
            Mode::Train,
            seeds,
            Some(s.gt_box),
        );
        assert!(err.is_err());
    }

    #[test]
    fn routing_check_catches_tampered_traces() {
        let (ppcr, expr) = trace_of(Variant::Ppcr, Mode::Infer);
        // Box prompt smuggled into the baseline.
        let (mut ns, _) = trace_of(Variant::NoSpatial, Mode::Infer);
        ns.stages[1] = StageTrace::Segment {
            box_prompt: Some([0.0, 0.0, 4.0, 4.0]),
            prompt_tokens: 1,
        };
        assert!(matches!(
            check_routing(Variant::NoSpatial, &ns, &expr),
            Err(HarnessError::Routing { .. })
        ));

        let mut leaked = ppcr.clone();
        if let StageTrace::Spatial { tokens, .. } = &mut leaked.stages[1] {
            tokens.push(expr[expr.len() - 1].clone());
        }
        assert!(check_routing(Variant::Ppcr, &leaked, &expr).is_err());

        let (mut re, _) = trace_of(Variant::ReOnly, Mode::Infer);
        if let StageTrace::Spatial { injected_slots, .. } = &mut re.stages[1] {
            injected_slots.push(0);
        }
        assert!(check_routing(Variant::ReOnly, &re, &expr).is_err());

        let mut reordered = ppcr.clone();
        reordered.stages.swap(0, 1);
        assert!(check_routing(Variant::Ppcr, &reordered, &expr).is_err());
        assert!(check_routing(Variant::NoSpatial, &ppcr, &expr).is_err());
    }

    #[test]
    fn wrong_checkpoint_variant_is_rejected() {
        let model = fresh_model(Variant::NoSpatial, 3);
        let s = &samples(&DatasetManifest::new("t", 1, 7))[0];
        let mut g = Graph::new();
        let seeds = TemplateSeeds {
            semantic: 1,
            spatial: 2,
        };
        let err = run_pipeline(
            &model,
            &mut g,
            &s.image,
            &s.expression,
            Variant::Ppcr,
            Mode::Infer,
            seeds,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, HarnessError::VariantMismatch { .. }));
    }

    #[test]
    fn mix_seed_separates_parts() {
        assert_eq!(mix_seed(&[1, 2, 3]), mix_seed(&[1, 2, 3]));
        assert_ne!(mix_seed(&[1, 2, 3]), mix_seed(&[1, 3, 2]));
        assert_ne!(mix_seed(&[0]), mix_seed(&[0, 0]));
    }
}
