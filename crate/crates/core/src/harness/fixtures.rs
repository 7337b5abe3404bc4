use super::config::{RunConfig, Variant};
use super::model::PpcrModel;
use crate::prompt::TemplateBank;
use crate::shapeworld::{generate_samples, DatasetManifest, ReferringSample};

/// Small default-architecture run over `train_n` / `eval_n` samples.
pub(crate) fn small_config(variant: Variant, train_n: usize, eval_n: usize, epochs: usize) -> RunConfig {
    RunConfig {
        epochs,
        train: DatasetManifest::new("train", train_n, 1_000),
        eval: DatasetManifest::new("eval", eval_n, 2_000),
        ..RunConfig::default()
    }
    .with_variant(variant, 0)
}

pub(crate) fn samples(m: &DatasetManifest) -> Vec<ReferringSample> {
    generate_samples(m).unwrap()
}

pub(crate) fn fresh_model(variant: Variant, seed: u64) -> PpcrModel {
    PpcrModel::new(Default::default(), variant, TemplateBank::builtin(), seed).unwrap()
}
