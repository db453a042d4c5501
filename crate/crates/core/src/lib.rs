//! Ear-canal acoustic authentication on synthetic data.

pub mod augment;
pub mod ear;
pub mod embedding;
pub mod features;
pub mod harness;
pub mod matcher;
pub mod psycho;
pub mod rng;
pub mod session;
pub mod signal;
pub mod sounding;
pub mod watermark;
