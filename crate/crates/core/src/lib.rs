//! Mixture-of-Experts routing as an entropy-regularized congestion game.
//!
//! Solve single-type and multi-type equilibria ([`equilibrium`]), fit the
//! effective congestion `γ_eff` of recorded routing ([`identify`],
//! [`traces`]), check when the model applies ([`diagnostics`]), and compare
//! it with softmax baselines or track it over training ([`eval`]).
//!
//! ```
//! use moe_congestion::equilibrium::{solve_single, SolverOptions};
//! use moe_congestion::identify::{fit_gamma, DEFAULT_GAMMA_MAX};
//! use moe_congestion::simplex::{GameParams, QualityVector};
//!
//! let q = QualityVector::new(vec![0.0, 0.5, 1.0])?;
//! let eq = solve_single(&q, GameParams::new(5.0, 1.0)?, SolverOptions::default())?;
//! let fit = fit_gamma(&eq.mu, &q, 1.0, DEFAULT_GAMMA_MAX)?;
//! assert!((fit.gamma_eff - 5.0).abs() < 1e-3);
//! # Ok::<(), moe_congestion::Error>(())
//! ```

pub mod diagnostics;
pub mod equilibrium;
pub mod error;
pub mod eval;
pub mod identify;
pub mod rng;
pub mod search;
pub mod simplex;
pub mod traces;

pub use error::{Error, Result, TraceError};
