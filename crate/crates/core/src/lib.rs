//! Multi-kernel Boolean representation of linear layers.
//!
//! A full-precision weight `W` (m out × n in) is approximated by a sum of
//! Boolean kernels, each a sign matrix with a rank-1 nonnegative value
//! envelope:
//!
//! ```text
//! W ≈ Σ_k  B_k ⊙ (s_out_k · s_in_kᵀ),      B_k ∈ {−1, +1}^{m×n}
//! ```
//!
//! Kernels are extracted successively from the residual ([`svid`]), trained
//! natively in the Boolean domain with a flip optimizer ([`optim`]), finetuned
//! against a full-precision teacher ([`distill`]), and sized per weight under
//! a global budget ([`allocation`]). [`zoo`] provides the small teacher models
//! and datasets used to exercise the whole pipeline.

pub mod allocation;
pub mod distill;
mod error;
pub mod linear;
pub mod logic;
pub mod optim;
pub mod svid;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
