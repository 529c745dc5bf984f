//! Vector-quantized joint text/speech latent space and a three-step voice
//! cloning pipeline, at toy scale on a synthetic parallel corpus.

pub mod autodiff;
pub mod blocks;
pub mod codebook;
pub mod config;
pub mod corpus;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
