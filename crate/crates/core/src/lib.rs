//! Gradients of the single-layer attention loss
//! `L(X) = ½‖D⁻¹ exp(A1 X A2ᵀ / d) A3 Y − E‖²_F` with respect to `X`.
//!
//! * [`exact`] evaluates the closed form in `O(n² d)` time.
//! * [`lowrank`] approximates it in time linear in `n` when the entries of
//!   `A1 X` and `A2` are small, via polynomial feature maps.
//! * [`verify`] holds independent oracles (finite differences, a brute-force
//!   Kronecker-lifted gradient).
//! * [`hardness`] builds the structured inputs used to relate gradient
//!   computation back to the forward pass and checks their calculus.

pub mod bench;
pub mod error;
pub mod exact;
pub mod forward;
pub mod hardness;
pub mod io;
pub mod limits;
pub mod lowrank;
pub mod sample;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use exact::{gradient_exact, GradientResult, Method};
pub use forward::AttentionInstance;
pub use limits::Limits;
pub use lowrank::gradient_fast;
pub use tensor::{Matrix, Vector};

/// Crate version, echoed in every report.
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
