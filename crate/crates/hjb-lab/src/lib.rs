//! Two-route numerical laboratory for degenerate Hamilton-Jacobi-Bellman
//! equations with lower or upper obstacles.
//!
//! The same control problem can be solved
//!
//! * on a space-time grid by a monotone finite-difference scheme
//!   ([`hjb`]), with the obstacle enforced by projection or by implicit
//!   penalization, and
//! * along simulated forward paths by least-squares regression of plain or
//!   penalized backward SDEs ([`bsde`]),
//!
//! and the resulting value fields are fed to regularity estimators
//! ([`regularity`]) that measure Lipschitz, semiconcavity and
//! Hölder-in-time constants against closed-form benchmarks. A linear
//! time-change transform with a coupled-simulation consistency check lives
//! in [`timechange`]. Scenario files, CSV/JSON persistence and the `hjblab`
//! command-line surface are in [`scenario`], [`fieldio`] and [`cli`].

pub mod bsde;
pub mod cli;
pub mod error;
pub mod expr;
pub mod fieldio;
pub mod forward;
pub mod hjb;
pub mod par;
pub mod problem;
pub mod regularity;
pub mod rng;
pub mod scenario;
pub mod timechange;

pub use error::{Error, Result};
