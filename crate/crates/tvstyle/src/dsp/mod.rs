//! Waveform <-> normalized log-mel conversion and Griffin-Lim resynthesis,
//! plus the on-disk formats for audio and spectrograms.

mod analyzer;
pub mod melfile;
pub mod render;
mod stft;
pub mod wav;

pub use analyzer::{griffin_lim, mel_spectrogram, GriffinLimTrace, MelAnalyzer};
pub use stft::Stft;
