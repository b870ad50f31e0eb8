//! Spectrum monitoring: waveform synthesis, channel impairments, spectral
//! features, a feed-forward waveform classifier and a convolutional
//! autoencoder watchdog that flags unknown emitters.

pub mod channel;
pub mod classifier;
pub mod datastore;
pub mod evalharness;
pub mod features;
pub mod neural;
pub mod sigsynth;
pub mod watchdog;
