use thiserror::Error;

use crate::mechanisms::Violation;

fn join(v: &[Violation]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MechanismError {
    #[error("invalid branching spec: {}", join(.0))]
    Invalid(Vec<Violation>),
    #[error("{name} = {value} outside [0, 1)")]
    OutOfDomain { name: &'static str, value: f64 },
    #[error("catalytic mechanism vanishes at w = {at}")]
    DivisionByZero { at: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("invalid {name}: {reason}")]
    Invalid { name: &'static str, reason: String },
}

impl ConfigError {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        ConfigError::Invalid { name, reason: reason.into() }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("population cap {cap} exceeded at t = {time} ({count} particles)")]
    PopulationCapExceeded { cap: usize, count: usize, time: f64 },
    #[error("particle at {position} outside tabulation range [{min}, {max}]")]
    GridRangeExceeded { position: f64, min: f64, max: f64 },
    #[error("offspring law truncated at K = {k}: row {row} keeps only {mass} of its mass")]
    TruncationLoss { k: usize, row: usize, mass: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpdeError {
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("explicit scheme unstable: dt = {dt} exceeds dx^2/2 = {limit}")]
    StabilityViolation { dt: f64, limit: f64 },
    #[error("initial datum value {value} outside [0, {z_star}]")]
    OutOfRange { value: f64, z_star: f64 },
    #[error("point {point} outside sampled grid range [{min}, {max}]")]
    OutOfGrid { point: f64, min: f64, max: f64 },
    #[error("mean-field solution {value} exceeds cap {cap} at t = {time}")]
    BlowUp { value: f64, cap: f64, time: f64 },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DualityError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Spde(#[from] SpdeError),
    #[error("duality sides were estimated on different experiments: {0}")]
    MismatchedExperiment(String),
}
