//! Training, evaluation, ablation sweeps, prediction and report emission.

mod ablation;
mod config;
mod eval;
#[cfg(test)]
mod fixtures;
mod model;
mod pipeline;
mod predict;
mod report;
mod train;

pub use ablation::{run_ablation, AblationOutcome};
pub use config::{ModelConfig, RunConfig, ScheduleConfig, Variant};
pub use eval::{
    dataset_hash, evaluate, evaluate_with, predict_sample, EvalReport, Evaluation, Prediction, SampleRecord,
};
pub use model::{ModelFile, PpcrModel, MODEL_FILE, TEMPLATES_FILE};
pub use pipeline::{check_routing, mix_seed, run_pipeline, Mode, PassOutput, PromptTrace, StageTrace, TemplateSeeds};
pub use predict::{predict, BoxRecord, PredictOutput};
pub use report::{
    build_report, comparison_grid, emit_report, grid_panels, validate_report, Report, ReportRow, TrendStatistic,
    VariantSummary, REPORT_FILE, REPORT_SCHEMA_VERSION,
};
pub use train::{train, train_model, EpochLog, TrainLog, TrainOutcome};

use crate::criteria::CriteriaError;
use crate::diffcore::DiffError;
use crate::grounding::GroundingError;
use crate::prompt::PromptError;
use crate::raster::RasterError;
use crate::reasoner::ReasonerError;
use crate::segmenter::SegmenterError;
use crate::shapeworld::ShapeworldError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint integrity error: {0}")]
    Integrity(String),
    #[error("non-finite loss in batch {batch} (epoch {epoch})")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("checkpoint trained as {checkpoint} cannot run variant {requested}")]
    VariantMismatch { checkpoint: Variant, requested: Variant },
    #[error("routing violation in {variant}: {reason}")]
    Routing { variant: Variant, reason: String },
    #[error(transparent)]
    Criteria(#[from] CriteriaError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Grounding(#[from] GroundingError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Reasoner(#[from] ReasonerError),
    #[error(transparent)]
    Segmenter(#[from] SegmenterError),
    #[error(transparent)]
    Shapeworld(#[from] ShapeworldError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl HarnessError {
    /// Whether the error stems from a NaN or infinity anywhere in the computation.
    pub fn is_non_finite(&self) -> bool {
        fn diff(e: &DiffError) -> bool {
            matches!(e, DiffError::NonFinite(_))
        }
        match self {
            HarnessError::NonFiniteLoss { .. } => true,
            HarnessError::Diff(e) => diff(e),
            HarnessError::Criteria(CriteriaError::NonFinite(_)) => true,
            HarnessError::Criteria(CriteriaError::Diff(e)) => diff(e),
            HarnessError::Reasoner(ReasonerError::Diff(e)) => diff(e),
            HarnessError::Segmenter(SegmenterError::Diff(e)) => diff(e),
            HarnessError::Grounding(GroundingError::NonFinite) => true,
            HarnessError::Grounding(GroundingError::Diff(e)) => diff(e),
            _ => false,
        }
    }
}
