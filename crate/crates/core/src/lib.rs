//! Two-stage pulmonary nodule detection on volumetric CT, desk scale.
//!
//! Stage 1 slides a small proposal network over 3-D patches and emits
//! candidate lesions; stage 2 rescores each candidate crop with a dual-path
//! residual classifier to reject false positives. Evaluation is FROC
//! (sensitivity against false positives per scan). A deterministic phantom
//! generator provides synthetic training and test volumes so the whole
//! pipeline runs on a CPU in minutes.
//!
//! Everything is built on a minimal f32 tensor with hand-written backward
//! passes, each verified against central differences.

pub mod error;
pub mod froc;
pub mod io;
pub mod layers;
pub mod loss;
pub mod rng;
pub mod stage1;
pub mod stage2;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
