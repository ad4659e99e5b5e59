//! Self-supervised representation learning for multi-channel physiological
//! time series.
//!
//! The toolkit learns a correlation graph between channels and trains a
//! shared per-channel encoder with three pretext tasks — graph-aggregated
//! contrastive future prediction, delayed-correlation classification, and
//! replace discrimination — then fine-tunes a channel-wise detection head.
//! A numerical lab verifies the contrastive mutual-information bound the
//! training objective rests on. Everything runs deterministically on CPU
//! from a seed.

pub mod error;
pub mod graph;
pub mod nn;
pub mod rng;
pub mod signal;
pub mod ssl;
pub mod synth;
pub mod theory;

pub use error::{Error, Result};
