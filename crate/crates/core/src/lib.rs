//! Scenario-based asset allocation under Basel Accord capital constraints.
//!
//! The crate provides:
//!
//! - sample risk measures over scenario loss panels (variance, VaR, CVaR,
//!   Basel 2.5 and the CVaR-based Basel III charge) in [`risk`],
//! - the scenario panel data model and CSV ingestion in [`scenario`],
//! - a dense convex QP/LP solver in [`qp`],
//! - proximal operators and Euclidean projections for every alternating
//!   direction subproblem in [`prox`],
//! - the alternating-direction augmented Lagrangian drivers in [`adm`],
//! - independent ground-truth oracles (grid search, direct convex models,
//!   exhaustive VaR enumeration, MIP export) in [`oracle`],
//! - a double-exponential jump-diffusion scenario generator in [`sim`].

pub mod adm;
pub mod error;
pub mod oracle;
pub mod prox;
pub mod qp;
pub mod risk;
pub mod scenario;
pub mod sim;

pub use error::{Error, Result};
