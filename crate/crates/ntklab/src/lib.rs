//! Infinite-width kernels and finite-width tangent kernels for dense and
//! 1-D circular-convolutional networks.
//!
//! The crate computes, for a shared set of network configurations:
//!
//! * analytic neural-network-Gaussian-process (NNGP) and neural-tangent-kernel
//!   (NTK) matrices in the infinite-width limit ([`analytic`]),
//! * empirical tangent kernels of sampled finite networks via exact
//!   reverse-mode Jacobians ([`empirical`]),
//! * parameter samplers for Gaussian and Haar-orthogonal initialization in
//!   both NTK and improved-standard parameterization ([`sampler`]),
//! * closed-form training dynamics of the linearized network alongside real
//!   gradient-descent traces ([`dynamics`]).
//!
//! All randomness flows through seeded, stream-split generators ([`rng`]),
//! so every result is reproducible bit-for-bit for a given seed, independent
//! of thread count.

pub mod activations;
pub mod analytic;
pub mod config;
pub mod data;
pub mod dynamics;
pub mod empirical;
pub mod error;
pub mod exec;
pub mod linalg;
pub mod network;
pub mod rng;
pub mod sampler;

pub use activations::Activation;
pub use config::{ArchKind, InitFamily, NetworkConfig, Parameterization};
pub use error::{Error, Result};
