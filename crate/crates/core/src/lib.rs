//! Joint training of a feed-forward Transformer text-to-speech acoustic model
//! with an autoregressive aligner that supplies phoneme durations on the fly.

pub mod alignment;
pub mod cli;
pub mod data;
pub mod error;
pub mod layers;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod params;

pub use error::{Error, Result};
