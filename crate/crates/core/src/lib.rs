//! Adversarial robustness testbed for learned analog CSI feedback.
//!
//! The crate covers the full experiment chain for attacking a CsiNet-style
//! channel-state-information autoencoder over its analog feedback link:
//!
//! * [`tensor`] / [`autograd`] / [`optim`] — a small dense-tensor core with
//!   reverse-mode differentiation and Adam, enough to train the networks here.
//! * [`channel`] — synthetic sparse-multipath MIMO-OFDM channels, the
//!   angular-delay transform, truncation, normalization and dataset files.
//! * [`csinet`] — the encoder/decoder pair, training (optionally with AWGN
//!   injected on the codeword), and model persistence.
//! * [`attack`] — crafting a universal additive codeword perturbation under an
//!   interference-to-signal-ratio budget, plus power-matched jamming noise.
//! * [`eval`] / [`plot`] — NMSE sweeps over ISR grids, CSV reports and SVG
//!   line plots.
//!
//! All heavy loops are data-parallel over disjoint output slices with
//! fixed-order reductions, so results are bit-identical whether the `parallel`
//! feature (rayon) is enabled or not. See [`par`].

pub mod attack;
pub mod autograd;
pub mod channel;
pub mod codec;
pub mod csinet;
pub mod eval;
pub mod optim;
pub mod par;
pub mod plot;
pub mod tensor;

pub use tensor::Tensor;
