//! Synthetic referring-segmentation data: scenes of colored shapes,
//! expressions from a fixed grammar, and their ground-truth masks and boxes.

mod dataset;
mod grammar;
mod scene;

pub use dataset::{
    export_dataset, generate_sample, generate_samples, load_dataset, write_dataset, DatasetFiles, DatasetManifest,
    ReferringSample,
};
pub use grammar::{
    compose_expression, grammar_words, resolve_referent, Descriptor, Expression, Relation, Resolution, RELATION_MARGIN,
};
pub use scene::{
    generate_scene, generate_scene_with, render_scene, Color, Scene, SceneConfig, ShapeInstance, ShapeKind, SizeClass,
    BACKGROUND_RGB,
};

#[derive(Debug, thiserror::Error)]
pub enum ShapeworldError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("could not place shape after {attempts} attempts")]
    Placement { attempts: usize },
    #[error("no unambiguous expression for shape {target_id}")]
    Composition { target_id: usize },
    #[error("malformed expression: {0:?}")]
    Parse(String),
    #[error("sample {index}: resampling budget exhausted")]
    Exhausted { index: usize },
    #[error("dataset integrity: {0}")]
    Integrity(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Raster(#[from] crate::raster::RasterError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
