//! Copy-paste augmentation, inference post-processing and mask AP evaluation
//! for two-class (person, ball) court footage.

pub mod augment;
pub mod bank;
pub mod coco;
pub mod inference;
pub mod mask;
pub mod metrics;
pub mod synth;
