//! Training-free cross-image feature grafting on a desk-scale rectified-flow
//! transformer.
//!
//! The crate is organised along the stages of the method:
//!
//! * [`grid`] and [`io`]: pixel images, patch feature grids, masks and their
//!   file formats.
//! * [`matching`]: cosine correspondence with similarity and
//!   cycle-consistency filtering, plus timestep-dependent dropout.
//! * [`attention`]: 2D rotary embeddings, joint text/image attention and the
//!   position-constrained fusion of reference keys and values.
//! * [`flow`]: the toy velocity network, Euler/midpoint steppers, inversion
//!   with trajectory recording and hooked generation.
//! * [`collage`]: procedural scenes and the ground/segment/erase/paste stages
//!   that build the initialization collage.
//! * [`pipeline`]: end-to-end runs, ablation variants, sweeps, alignment
//!   scoring and correspondence visualization.

pub mod attention;
pub mod collage;
pub mod error;
pub mod flow;
pub mod grid;
pub mod io;
pub mod matching;
pub mod pipeline;

pub use error::{GraftError, Result};
