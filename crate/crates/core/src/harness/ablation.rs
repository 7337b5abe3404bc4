use std::collections::BTreeMap;
use std::path::Path;

use super::config::{RunConfig, Variant};
use super::eval::{evaluate, EvalReport};
use super::model::PpcrModel;
use super::report::{build_report, Report};
use super::train::{train, TrainLog};
use super::HarnessError;
use crate::prompt::TemplateBank;
use crate::raster::Mask;
use crate::shapeworld::ReferringSample;

/// Everything a sweep produced, keyed by `(variant, seed)`.
#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub report: Report,
    pub evaluations: BTreeMap<(Variant, u64), EvalReport>,
    pub masks: BTreeMap<(Variant, u64), Vec<Mask>>,
    /// One log per trained checkpoint; the oracle reuses the ppcr one.
    pub train_logs: BTreeMap<(Variant, u64), TrainLog>,
}

/// Trains and evaluates every `(variant, seed)` pair on shared splits.
///
/// Each training variant is trained once per seed. When `checkpoint_root` is
/// given, checkpoints go to `<root>/<variant>-seed<seed>/`.
pub fn run_ablation(
    base: &RunConfig,
    templates: &TemplateBank,
    variants: &[Variant],
    seeds: &[u64],
    train_set: &[ReferringSample],
    eval_set: &[ReferringSample],
    checkpoint_root: Option<&Path>,
    mut progress: impl FnMut(&str),
) -> Result<AblationOutcome, HarnessError> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(HarnessError::Config(
            "ablation needs at least one variant and one seed".into(),
        ));
    }
    base.validate()?;
    let mut trained: BTreeMap<(Variant, u64), PpcrModel> = BTreeMap::new();
    let mut train_logs = BTreeMap::new();
    let mut evaluations = BTreeMap::new();
    let mut masks = BTreeMap::new();

    for &seed in seeds {
        for &variant in variants {
            let tv = variant.training_variant();
            if let std::collections::btree_map::Entry::Vacant(e) = trained.entry((tv, seed)) {
                let cfg = base.with_variant(tv, seed);
                let out = train(&cfg, templates.clone(), train_set)?;
                progress(&format!(
                    "trained {tv} seed {seed}: final loss {:.4} in {:.1}s",
                    out.log.epochs.last().map_or(f64::NAN, |e| e.mean_total),
                    out.log.wall_clock_secs
                ));
                if let Some(root) = checkpoint_root {
                    out.model
                        .save(&root.join(format!("{tv}-seed{seed}")), seed, cfg.optimizer)?;
                }
                train_logs.insert((tv, seed), out.log);
                e.insert(out.model);
            }
            let model = &trained[&(tv, seed)];
            let cfg = base.with_variant(variant, seed);
            let ev = evaluate(model, eval_set, variant, &cfg)?;
            progress(&format!(
                "evaluated {variant} seed {seed}: oIoU {:.4} mIoU {:.4}",
                ev.report.oiou, ev.report.miou
            ));
            masks.insert((variant, seed), ev.masks);
            evaluations.insert((variant, seed), ev.report);
        }
    }

    let report = build_report(evaluations.values().cloned().collect())?;
    if report.dataset_hash.is_none() {
        return Err(HarnessError::Config(
            "ablation runs disagree on the evaluation split".into(),
        ));
    }
    Ok(AblationOutcome {
        report,
        evaluations,
        masks,
        train_logs,
    })
}
