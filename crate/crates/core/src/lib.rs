//! Mel-spectrogram postfiltering with a conditional multi-scale GAN.
//!
//! Audio is turned into log-mel spectrograms ([`dsp`]), stored as invertible
//! 16-bit grayscale images ([`codec`]), and an image-to-image generator is
//! trained against three discriminators at different scales ([`models`],
//! [`training`]) to undo over-smoothing. [`metrics`] measures the result.

pub mod audio;
pub mod codec;
pub mod container;
pub mod corpus;
pub mod dsp;
pub mod metrics;
pub mod models;
pub mod tensor;
pub mod training;
