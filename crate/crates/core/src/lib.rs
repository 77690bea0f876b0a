//! Transcript-to-mask tumor pipeline: negation-aware prompt extraction,
//! a LoRA-adapted toy grounding model, score-thresholded box-to-mask
//! segmentation, and detection/segmentation metrics.

pub mod detect2seg;
pub mod grounder;
pub mod lora;
pub mod metrics;
pub mod pgm;
pub mod prompt;
pub mod tensor;
