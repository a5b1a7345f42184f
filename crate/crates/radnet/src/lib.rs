//! Two-stage speech-signal improvement: a repairing network that fixes
//! clipping, packet loss, and band limiting, followed by a cascaded sub-band /
//! full-band denoiser, trained adversarially on simulated degradations.
//!
//! The crate is organized as:
//!
//! * [`audio`], [`dsp`]: WAV I/O, STFT/iSTFT, power-law compression, bands.
//! * [`nn`]: a small reverse-mode autodiff engine and the layers built on it.
//! * [`repair`], [`denoise`], [`disc`]: the two enhancement stages and the
//!   discriminator bank.
//! * [`losses`]: spectral, signal, and adversarial objectives.
//! * [`datasim`]: degradation recipes and dataset synthesis.
//! * [`training`], [`ckpt`]: the three-step training protocol and checkpoints.
//! * [`stream`]: frame-by-frame causal inference.
//! * [`eval`]: quality metrics and the real-time-factor harness.

pub mod audio;
pub mod ckpt;
pub mod datasim;
pub mod denoise;
pub mod disc;
pub mod dsp;
pub mod error;
pub mod losses;
pub mod nn;
pub mod repair;
pub mod training;

pub use error::{Error, ErrorKind, Result};
