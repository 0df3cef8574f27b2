//! Shared recurrent encoder with CTC, attention-decoder and accent heads.

mod config;
mod network;
mod params;

pub use config::{EncoderDirection, ModelConfig};
pub use network::{ctc_head, decoder_step, discriminate, encode, Bound, DecoderOutput, DecoderState};
pub use params::{Gradients, ModelParams};
