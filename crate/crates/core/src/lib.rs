//! Numerical kernels shared by the style-inversion pipeline.
//!
//! Everything here is pure arithmetic over slices and small matrices: the
//! diffusion noise schedule and DDIM update, log-mel scaling and the mel
//! filterbank, sinusoidal timestep features, and the spectral similarity
//! metrics used for evaluation. The crate is `no_std` and only needs `alloc`,
//! so it can be reused from embedded or wasm hosts that lack the model
//! runtime.
#![no_std]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod embedding;
pub mod error;
pub mod mel;
pub mod metrics;
pub mod schedule;

pub use error::{CoreError, Result};
pub use mel::{DspConfig, MelFilterbank, MelSpectrogram, Waveform};
pub use schedule::NoiseSchedule;
