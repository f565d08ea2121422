//! Simulation of decoherence-free-subspace (DFS) entanglement distribution over
//! lossy, reciprocal polarization channels.
//!
//! The crate is organised bottom-up:
//!
//! - [`jones`]: 2×2 transfer matrices for lossy birefringent elements, their
//!   composition and the forward/backward reciprocity relation `Z Mᵀ Z`.
//! - [`fock`]: a sparse multimode bosonic state engine (coherent and
//!   single-photon inputs, linear optics with loss, photon-number-resolving
//!   measurement, post-selection and fidelity).
//! - [`protocols`]: the four distribution schemes built on a linear-optical
//!   parity check, plus log-log scaling fits.
//! - [`tradeoff`]: closed-form and quadrature evaluation of the weak-coherent
//!   pulse efficiency/fidelity trade-off, with a Fock-space oracle.

pub mod error;
pub mod fock;
pub mod jones;
pub mod protocols;
pub mod tradeoff;

pub use error::{Error, Result};

/// Complex scalar used throughout the crate.
pub type C64 = num_complex::Complex64;

/// Default tolerance for exact algebraic identities.
pub const ALGEBRAIC_TOL: f64 = 1e-12;

/// Default tolerance for cross-checks between simulation routes.
pub const SIMULATION_TOL: f64 = 1e-10;
