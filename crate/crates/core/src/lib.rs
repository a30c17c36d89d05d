//! Altered-fingerprint forensics: synthesis of obliterated, centrally rotated
//! and Z-cut prints, a multi-task Inception-style classifier trained with
//! RMSprop, Grad-CAM activation maps and confusion-matrix evaluation.
pub mod alteration;
pub mod dataset;
pub mod evaluation;
pub mod explain;
pub mod image;
pub mod loader;
pub mod nn;
pub mod seed;
pub mod task;
pub mod training;

pub use task::Task;
