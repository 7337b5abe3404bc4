//! Spatial grounding: box heads on the spatial prompt, rescaling to pixels
//! and box utilities.

mod boxes;
mod heads;

pub use boxes::{box_iou, rescale_box, rescale_raw, NormalizedBox, PixelBox};
pub use heads::{
    attn_box_predict, map_to_box, AttnBoxHead, BoxHeadKind, BoxPredictor, GroundingConfig, GroundingError,
    GroundingHeads, MapHead,
};
