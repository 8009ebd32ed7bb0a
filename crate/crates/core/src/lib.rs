//! Nonlinear panel earnings dynamics with two latent Markov components.
//!
//! Log earnings `y = U + V` are the sum of a persistent component `U` and a
//! transitory component `V`, each a first-order Markov process whose
//! conditional quantile function is a Hermite-polynomial sieve. A binary
//! instrument depends on `U` through a logistic link. Parameters are
//! estimated by a stochastic EM loop that alternates Metropolis-Hastings
//! draws of the latent paths with quantile regressions.

pub mod diagnostics;
pub mod model;
pub mod msem;
pub mod panel_io;
pub mod qreg;
pub mod rng;
pub mod sieve;
pub mod simulator;
pub mod stats;

pub use model::{Component, ModelParams, SieveLayout};
pub use msem::{run_msem, MsemConfig};
pub use panel_io::PanelDataset;
pub use sieve::{QuantileSieve, TauGrid};
