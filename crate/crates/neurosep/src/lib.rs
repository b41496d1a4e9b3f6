//! EEG-steered two-talker speaker extraction with an auxiliary auditory
//! attention detector (AAD), trained jointly.
//!
//! The crate covers the full pipeline at desk scale: synthetic cocktail-party
//! data (or ingestion of a simple interchange format), a time-domain
//! dual-path extractor conditioned on an EEG sequence encoder, the AAD
//! branch, the staged training protocol with its ablation grids, and signal
//! quality metrics (SI-SDRi, SDRi, STOIi, PPR).

pub mod aad;
pub mod dataio;
pub mod eeg_encoder;
pub mod error;
pub mod extractor;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod signals;
pub mod training;
pub mod wav;

pub use error::{Error, Result};
