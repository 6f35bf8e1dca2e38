pub mod backbone;
pub mod bidir_head;
pub mod counters;
pub mod error;
pub mod harness;
pub mod layers;
pub mod mask_embed;
pub mod model;
pub mod neck;
pub mod numerics;
pub mod sgeval;
pub mod synth;
pub mod tome;

pub use error::{Error, Result};
