//! Toy DNN-HMM speech recognizer with adversarial command-in-song crafting
//! and transcript-divergence defenses.

pub mod acoustic;
pub mod audio;
pub mod channel;
pub mod crafter;
pub mod decoder;
pub mod defense;
pub mod error;
pub mod features;
pub mod lexicon;
pub mod matrix;
pub mod metrics;

pub use acoustic::{AcousticModel, PosteriorMatrix};
pub use audio::AudioBuffer;
pub use channel::ChannelConfig;
pub use crafter::{CraftConfig, CraftResult};
pub use decoder::DecodeResult;
pub use error::{Error, Result};
pub use lexicon::{Lexicon, PhonemeTable, TargetSequence};
