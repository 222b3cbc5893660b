//! Desk-scale simulator of a bandwidth-adaptive image transmission codec.
//!
//! An image is mapped by a shared convolutional trunk into a stack of feature
//! channels, split into `L` independently transmittable *sub-semantic*
//! branches, and sent over simulated AWGN or Rayleigh fading channels. The
//! receiver reconstructs the image from whatever subset of branches arrived;
//! more branches give higher fidelity. The crate contains:
//!
//! - [`tensor`] — a minimal reverse-mode autodiff engine covering exactly the
//!   layer set the codec needs, with a finite-difference gradient checker;
//! - [`net`] — the multi-branch encoder/decoder network, bandwidth-ratio
//!   accounting, and a binary checkpoint format;
//! - [`channel`] — power normalization plus AWGN and Rayleigh block-fading
//!   channel layers with straight-through gradients;
//! - [`train`] — MSE training with Adam, early stopping, and the three staged
//!   strategies (freeze, weight transfer, per-group learning rates);
//! - [`data`] — PPM image I/O, a deterministic synthetic dataset generator,
//!   and seeded splitting;
//! - [`eval`] — PSNR metrics, repeated-trial SNR sweeps, and CSV emission;
//! - [`config`] — the plain-text key/value configuration format used by the
//!   CLI.

pub mod channel;
pub mod config;
pub mod data;
pub mod eval;
pub mod net;
pub mod rng;
pub mod tensor;
pub mod train;

pub use channel::{ChannelKind, ChannelSpec};
pub use net::{SafeConfig, SafeNetwork};
pub use rng::Rng;
pub use tensor::{Parameter, Tensor};
