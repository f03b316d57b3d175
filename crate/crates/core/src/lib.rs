//! Unsupervised domain adaptation for semantic segmentation on procedural
//! toy scenes: a segmentation generator trained against a fully-convolutional
//! discriminator, with a region-grown, class-weighted self-teaching loss.

pub mod cli;
pub mod confmask;
pub mod eval;
pub mod losses;
pub mod nets;
pub mod tensor;
pub mod toyscenes;
pub mod trainer;
