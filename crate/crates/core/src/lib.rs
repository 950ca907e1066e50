//! Few-shot image generation from scene graphs with first-order
//! meta-learning.

pub mod error;
pub mod image;
pub mod scenegraph;
pub mod synthdata;

pub use error::{MigsError, Result};
pub mod checkpoint;
pub mod discriminators;
pub mod eval;
pub mod generators;
pub mod graphnet;
pub mod losses;
pub mod meta;
pub mod model;
pub mod optim;
pub mod state;
