//! Visual storytelling with knowledge-enriched cascade attention, group-wise
//! second-order pooling and a two-stream story decoder, on a self-contained
//! reverse-mode tensor engine.

pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod decoder;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod gsm;
pub mod knowledge;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod par;
pub mod params;
pub mod rng;
pub mod search;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{KagsError, Result};
