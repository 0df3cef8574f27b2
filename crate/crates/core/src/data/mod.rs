//! Synthetic accented "speech" and the adversarial-target protocol.

mod dataset;
mod render;
mod targets;
mod vocab;

pub use dataset::{read_split, write_split, DataConfig, DatasetSplit, LenRange, SpeechWorld, Utterance};
pub use render::{AccentLabel, RenderConfig, Renderer, N_ACCENTS};
pub use targets::{gen_adv_targets, read_targets, select_adv_target, write_targets};
pub use vocab::{Transcript, Vocab};
