//! Stochastic, non-trainable channel layers.
//!
//! Transmit ops add noise drawn outside the autodiff graph, so the backward
//! pass through a channel is the identity; the noise draw is a constant with
//! respect to the transmitted symbols. SNR is defined on real-valued symbols
//! with unit average power, which [`power_normalize`] enforces. Rayleigh
//! fading is block fading: one gain per transmitted tensor, equalized at the
//! receiver with perfect channel knowledge.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::{ops, Scalar, Tensor, TensorError};

pub use crate::tensor::ops::power_normalize;

#[derive(Debug, Error)]
pub enum ChannelError {
    #[error("snr_db must be finite, got {0}")]
    NonFiniteSnr(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Channel family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ChannelKind {
    Awgn,
    Rayleigh,
}

impl fmt::Display for ChannelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChannelKind::Awgn => write!(f, "awgn"),
            ChannelKind::Rayleigh => write!(f, "rayleigh"),
        }
    }
}

impl FromStr for ChannelKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "awgn" => Ok(ChannelKind::Awgn),
            "rayleigh" => Ok(ChannelKind::Rayleigh),
            other => Err(format!("unknown channel kind '{other}' (expected awgn|rayleigh)")),
        }
    }
}

/// Channel family plus SNR in decibels.
#[derive(Debug, Clone, Copy)]
pub struct ChannelSpec {
    pub kind: ChannelKind,
    pub snr_db: f64,
}

impl ChannelSpec {
    pub fn new(kind: ChannelKind, snr_db: f64) -> Result<Self, ChannelError> {
        if !snr_db.is_finite() {
            return Err(ChannelError::NonFiniteSnr(snr_db));
        }
        Ok(ChannelSpec { kind, snr_db })
    }
}

/// What one transmission actually drew, for reproducibility.
#[derive(Debug, Clone)]
pub struct ChannelRealization {
    /// Block fading gain |h| (1.0 for AWGN).
    pub fade: f64,
    /// Seed of the generator the draw came from.
    pub noise_seed: u64,
}

/// Noise standard deviation for a given SNR at unit signal power:
/// `sigma = sqrt(10^(-snr_db/10))`.
pub fn noise_std_for_snr(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0).sqrt()
}

/// Draws the block fading gain for one transmission: 1.0 for AWGN, and
/// `sqrt(a^2 + b^2) / sqrt(2)` with standard Gaussian `a`, `b` for Rayleigh
/// (so the gain has unit mean square).
pub fn draw_fade(kind: ChannelKind, rng: &mut Rng) -> f64 {
    match kind {
        ChannelKind::Awgn => 1.0,
        ChannelKind::Rayleigh => {
            let a = rng.normal();
            let b = rng.normal();
            ((a * a + b * b) / 2.0).sqrt()
        }
    }
}

/// AWGN transmission of a power-normalized tensor: `y = x + n` with
/// `n ~ N(0, sigma^2)` i.i.d. The backward pass is the identity.
pub fn transmit_awgn<T: Scalar>(
    x: &Tensor<T>,
    spec: &ChannelSpec,
    rng: &mut Rng,
) -> Result<(Tensor<T>, ChannelRealization), ChannelError> {
    let sigma = noise_std_for_snr(spec.snr_db);
    let offset: Vec<T> = (0..x.numel()).map(|_| T::cast(rng.normal() * sigma)).collect();
    let y = ops::add_constant(x, &offset)?;
    Ok((
        y,
        ChannelRealization {
            fade: 1.0,
            noise_seed: rng.seed(),
        },
    ))
}

/// Rayleigh block-fading transmission of a power-normalized tensor. The
/// channel applies one gain `h` to the whole block; the receiver equalizes
/// with perfect channel knowledge, so the returned symbols are `x + n/h`.
/// The backward pass is the identity, as for AWGN.
pub fn transmit_rayleigh<T: Scalar>(
    x: &Tensor<T>,
    spec: &ChannelSpec,
    rng: &mut Rng,
) -> Result<(Tensor<T>, ChannelRealization), ChannelError> {
    let sigma = noise_std_for_snr(spec.snr_db);
    let h = draw_fade(ChannelKind::Rayleigh, rng);
    let offset: Vec<T> = (0..x.numel())
        .map(|_| T::cast(rng.normal() * sigma / h))
        .collect();
    let y = ops::add_constant(x, &offset)?;
    Ok((
        y,
        ChannelRealization {
            fade: h,
            noise_seed: rng.seed(),
        },
    ))
}

/// Dispatches on the channel family.
pub fn transmit<T: Scalar>(
    x: &Tensor<T>,
    spec: &ChannelSpec,
    rng: &mut Rng,
) -> Result<(Tensor<T>, ChannelRealization), ChannelError> {
    match spec.kind {
        ChannelKind::Awgn => transmit_awgn(x, spec, rng),
        ChannelKind::Rayleigh => transmit_rayleigh(x, spec, rng),
    }
}
