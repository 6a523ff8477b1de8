//! Multi-view masked autoencoder for cine cardiac MR, with the downstream
//! heads, cardiac function metrics and population statistics built on it.

pub mod autograd;
pub mod backbone;
pub mod cli;
pub mod dataio;
pub mod heads;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod stats;
pub mod study;
pub mod training;
