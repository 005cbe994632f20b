//! Simulation and numerical-analysis toolkit for subcritical self-catalytic
//! branching Brownian motion (SBBM): branching mechanisms, a Monte Carlo
//! particle engine driven by pairwise intersection local time, an
//! Euler–Maruyama solver for the dual SPDE, a mean-field PDE solver, and
//! the statistical harnesses that tie them together.

pub mod duality;
pub mod error;
pub mod experiments;
pub mod local_time;
pub mod mechanisms;
pub mod mfe;
pub mod particle;
pub mod quadrature;
pub mod rng;
pub mod spde;
pub mod stats;
pub mod tabulated;

pub use error::{ConfigError, DualityError, MechanismError, SimError, SpdeError};
pub use mechanisms::{BranchingSpec, DerivedConstants, LawKind, Mechanism, OffspringLaw, OracleMode};
