//! Simulation and identification of periodic linear Markov systems.
//!
//! The crate estimates time-dependent dynamics `A(t)` and diffusion `Q(t)` of
//!
//! ```text
//! dx/dt = A(t) x + sqrt(2 Q(t)) ξ,    A(t + 1) = A(t),  Q(t + 1) = Q(t)
//! ```
//!
//! from a uniformly sampled record, with four inverse models: the classical
//! (stationary) LIM, the original cyclostationary LIM, its refined stencil
//! variant (`e`), and the pointwise linear-fitting variant (`l`).
//!
//! Modules, bottom-up:
//! - [`matfun`]: matrix exponential, logarithm, square root, Lyapunov solve.
//! - [`simulate`]: Euler sample paths and ground-truth systems.
//! - [`estimate`]: stationary and cyclostationary correlation estimators.
//! - [`models`]: the inverse models and fluctuation-dissipation machinery.
//! - [`postproc`]: filters, sine fitting, error metrics.
//! - [`enso`]: monthly index pipeline and extreme-peak statistics.
//! - [`experiment`]: seeded multi-trial reproduction harness.

pub mod error;
pub mod matfun;
pub mod simulate;
pub mod estimate;
pub mod models;
pub mod postproc;
pub mod enso;
pub mod experiment;

pub use error::{Error, Result};
pub use matfun::Matrix;
