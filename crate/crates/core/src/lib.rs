//! Point-gathering scene text spotting.
//!
//! The crate turns word-level polygon annotations into dense training maps,
//! trains a character classification map with a point-gathering CTC loss,
//! and reads text back in a single pass without suppression or cropping:
//! skeletonise each text-centre region, order its points by the predicted
//! reading direction, restore the polygon from border offsets and decode the
//! gathered class rows. An optional graph refinement stage re-classifies the
//! gathered points with semantic and visual context.

pub mod ctc;
pub mod error;
pub mod eval;
pub mod geom;
pub mod grm;
pub mod io;
pub mod labels;
pub mod numerics;
pub mod postprocess;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
