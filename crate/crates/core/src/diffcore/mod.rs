//! Small differentiable substrate: tensors, a reverse-mode tape, LoRA
//! adapters, AdamW, a warmup/decay schedule and a finite-difference checker.

mod checkpoint;
mod gradcheck;
mod graph;
mod lora;
mod optim;
mod param;
mod schedule;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport, ParamCheck};
pub use graph::{gelu, sigmoid, Gradients, Graph, Var};
pub use lora::{linear_forward, lora_forward, merge_lora, LoraAdapter, LoraConfig};
pub use optim::{AdamW, AdamWConfig};
pub use param::{ParamGrads, ParamId, ParamStore, Parameter};
pub use schedule::LrSchedule;
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("out of domain: {0}")]
    Domain(String),
    #[error("duplicate parameter name {0}")]
    DuplicateParam(String),
    #[error("checkpoint integrity error in tensor {tensor}: {reason}")]
    Integrity { tensor: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
