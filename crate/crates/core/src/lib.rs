//! Multi-output physics-informed neural networks.
//!
//! A single pair of networks `u_NN`, `f_NN` carries `M` output neurons each;
//! replica `j` is fitted to its own noise-perturbed copy of the measurements
//! while satisfying the PDE, so the spread of the `M` outputs approximates a
//! posterior over `u`, `f` and (for inverse problems) the reaction
//! coefficient `k`.
//!
//! Modules:
//!
//! - [`nn`]: dense tanh networks with exact reverse-mode gradients.
//! - [`pde`]: finite-difference strong-form residuals.
//! - [`data`]: manufactured solutions, noisy measurements, replica targets.
//! - [`train`]: loss assembly, ADAM, training loop.
//! - [`posterior`]: ensemble statistics, coverage, histograms, QQ data.
//! - [`fem`]: 1D linear finite elements and a Monte Carlo reference ensemble.
//! - [`experiment`]: the named experiments and their output files.

pub mod data;
pub mod error;
pub mod experiment;
pub mod fem;
pub mod nn;
pub mod pde;
pub mod posterior;
pub mod train;

pub use error::{Error, Result};
