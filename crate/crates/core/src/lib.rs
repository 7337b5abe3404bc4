pub mod criteria;
pub mod diffcore;
pub mod grounding;
pub mod harness;
pub mod nn;
pub mod prompt;
pub mod raster;
pub mod reasoner;
pub mod segmenter;
pub mod shapeworld;
