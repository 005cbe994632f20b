//! Run configuration: one TOML (or JSON) document per invocation.
//!
//! Every block rejects unknown keys. Strictly positive quantities (steps,
//! widths, times) are checked while parsing, so a bad value is reported with
//! its line and column; model assumptions are checked afterwards by
//! [`RunConfig::validate_for`].

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};

use sbbm::local_time::LocalTimeEstimatorConfig;
use sbbm::mechanisms::{validate, BranchingSpec, OffspringLaw, OracleMode};
use sbbm::mfe::{classify_integrability, InitialTrace, Integrability};
use sbbm::particle::{AdaptiveStepping, SimConfig, DEFAULT_POPULATION_CAP};
use sbbm::spde::{Boundary, Grid, InitialDatum, NoiseScheme, SpdeConfig};

use crate::Subcommand;

/// Why a configuration was rejected.
#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    /// Malformed text, unknown key, wrong type or out-of-range scalar.
    Parse { line: usize, column: usize, message: String },
    /// Well-formed but violating a model assumption or missing a block.
    Validation(String),
    Io(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Parse { line, column, message } => {
                write!(f, "ParseError at line {line}, column {column}: {message}")
            }
            ConfigError::Validation(m) => write!(f, "ValidationError: {m}"),
            ConfigError::Io(m) => write!(f, "IoError: {m}"),
        }
    }
}

impl std::error::Error for ConfigError {}

fn validation(msg: impl Into<String>) -> ConfigError {
    ConfigError::Validation(msg.into())
}

/// `f64 > 0`, rejected at parse time otherwise.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
#[serde(transparent)]
pub struct Positive(pub f64);

impl<'de> Deserialize<'de> for Positive {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        if v.is_finite() && v > 0.0 {
            Ok(Positive(v))
        } else {
            Err(serde::de::Error::custom(format!("expected a finite value > 0, got {v}")))
        }
    }
}

/// `f64 ≥ 0`, rejected at parse time otherwise.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize)]
#[serde(transparent)]
pub struct NonNegative(pub f64);

impl<'de> Deserialize<'de> for NonNegative {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        if v.is_finite() && v >= 0.0 {
            Ok(NonNegative(v))
        } else {
            Err(serde::de::Error::custom(format!("expected a finite value >= 0, got {v}")))
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleBlock {
    #[serde(default)]
    pub zero_ordinary: bool,
    #[serde(default)]
    pub zero_catalytic: bool,
}

impl From<OracleBlock> for OracleMode {
    fn from(o: OracleBlock) -> Self {
        OracleMode { zero_ordinary: o.zero_ordinary, zero_catalytic: o.zero_catalytic }
    }
}

fn default_p() -> Vec<f64> {
    vec![1.0]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MechanismBlock {
    #[serde(default)]
    pub beta_o: f64,
    /// Ordinary offspring law `p_0, p_1, …`.
    #[serde(default = "default_p")]
    pub p: Vec<f64>,
    pub beta_c: f64,
    /// Catalytic offspring law `q_0, q_1, …`.
    pub q: Vec<f64>,
    #[serde(default)]
    pub allow_parity_preserving: bool,
    /// Accept `beta_c = 0` (regression against plain branching Brownian motion).
    #[serde(default)]
    pub oracle_zero_catalytic: bool,
    /// Zero rates inside the simulators for oracle comparisons.
    #[serde(default)]
    pub oracle: OracleBlock,
}

impl MechanismBlock {
    pub fn spec(&self) -> BranchingSpec {
        let mut spec = BranchingSpec::new(
            self.beta_o,
            OffspringLaw::ordinary(self.p.clone()),
            self.beta_c,
            OffspringLaw::catalytic(self.q.clone()),
        );
        spec.allow_parity_preserving = self.allow_parity_preserving;
        spec.oracle_zero_catalytic = self.oracle_zero_catalytic;
        spec
    }

    pub fn oracle_mode(&self) -> OracleMode {
        self.oracle.into()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    #[default]
    Band,
    Bridge,
}

fn default_eps() -> Positive {
    Positive(0.05)
}
fn default_bridge_nodes() -> usize {
    16
}
fn default_cap() -> usize {
    DEFAULT_POPULATION_CAP
}
fn default_replicas() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationBlock {
    /// Starting positions.
    #[serde(default)]
    pub initial: Vec<f64>,
    pub horizon: NonNegative,
    #[serde(default)]
    pub estimator: EstimatorKind,
    /// Band half-width.
    #[serde(default = "default_eps")]
    pub eps: Positive,
    #[serde(default = "default_bridge_nodes")]
    pub bridge_nodes: usize,
    /// Step; defaults to `eps²/4` (band) and is required for the bridge estimator.
    pub dt: Option<Positive>,
    #[serde(default = "default_cap")]
    pub cap: usize,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    /// Grow steps up to this length while every pair is far apart.
    pub adaptive_dt_max: Option<Positive>,
}

impl SimulationBlock {
    pub fn sim_config(&self, seed: u64, oracle: OracleMode) -> Result<SimConfig, ConfigError> {
        let estimator = match self.estimator {
            EstimatorKind::Band => LocalTimeEstimatorConfig::band(self.eps.0),
            EstimatorKind::Bridge => LocalTimeEstimatorConfig::bridge(self.bridge_nodes),
        };
        let dt = match (self.dt, self.estimator) {
            (Some(dt), _) => dt.0,
            (None, EstimatorKind::Band) => estimator.max_dt(),
            (None, EstimatorKind::Bridge) => {
                return Err(validation("simulation.dt is required with the bridge estimator"))
            }
        };
        let cfg = SimConfig {
            dt,
            horizon: self.horizon.0,
            estimator,
            population_cap: self.cap,
            seed,
            oracle_mode: oracle,
            record_events: false,
            adaptive: self.adaptive_dt_max.map(|m| AdaptiveStepping { dt_max: m.0 }),
        };
        cfg.validate(self.initial.len()).map_err(|e| validation(format!("simulation: {e}")))?;
        Ok(cfg)
    }
}

/// Initial datum of the SPDE.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum DatumBlock {
    /// `eps · 1_(a, b)`.
    ScaledIndicator { eps: f64, a: f64, b: f64 },
    Constant { value: f64 },
}

impl From<&DatumBlock> for InitialDatum {
    fn from(d: &DatumBlock) -> Self {
        match *d {
            DatumBlock::ScaledIndicator { eps, a, b } => InitialDatum::ScaledIndicator { eps, a, b },
            DatumBlock::Constant { value } => InitialDatum::Constant { value },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridBlock {
    pub x_min: f64,
    pub x_max: f64,
    pub dx: Positive,
    #[serde(default)]
    pub boundary: Boundary,
}

impl GridBlock {
    pub fn grid(&self) -> Result<Grid, ConfigError> {
        if !(self.x_max > self.x_min) {
            return Err(validation(format!("grid: x_max {} must exceed x_min {}", self.x_max, self.x_min)));
        }
        let g = Grid::covering(self.x_min, self.x_max, self.dx.0, self.boundary);
        g.validate().map_err(|e| validation(format!("grid: {e}")))?;
        Ok(g)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpdeBlock {
    pub grid: GridBlock,
    /// Step; defaults to `dx²/2`.
    pub dt: Option<Positive>,
    #[serde(default)]
    pub noise: NoiseScheme,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    pub datum: DatumBlock,
}

impl SpdeBlock {
    pub fn spde_config(&self, seed: u64) -> Result<SpdeConfig, ConfigError> {
        let mut cfg = SpdeConfig::new(self.grid.grid()?);
        if let Some(dt) = self.dt {
            cfg.dt = dt.0;
        }
        cfg.seed = seed;
        cfg.replicas = self.replicas;
        cfg.noise = self.noise;
        cfg.validate().map_err(|e| validation(format!("spde: {e}")))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MfeBlock {
    pub grid: GridBlock,
    pub t_floor: Positive,
    pub dt: Option<Positive>,
    /// Initial trace: `intervals = [[a, b], …]` (endpoints may be `-inf`/`inf`)
    /// and `atoms = [[position, weight], …]`.
    #[serde(default)]
    pub trace: InitialTrace,
}

impl MfeBlock {
    pub fn trace(&self) -> Result<InitialTrace, ConfigError> {
        self.trace.validate().map_err(|e| validation(format!("mfe.trace: {e}")))?;
        Ok(self.trace.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpBlock {
    pub center: f64,
    pub radius: Positive,
}

/// Which scan to run and where to look.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentBlock {
    /// Sample times.
    #[serde(default)]
    pub times: Vec<Positive>,
    /// Counting window `(a, b)`.
    pub window: Option<[f64; 2]>,
    /// Sampling points (SPDE) or starting positions (duality).
    #[serde(default)]
    pub points: Vec<f64>,
    /// Dual test function `f` (duality).
    pub f: Option<DatumBlock>,
    /// Particle count and region for the coming-down-from-infinity scan.
    pub n: Option<usize>,
    pub region: Option<[f64; 2]>,
    #[serde(default)]
    pub negative_control: bool,
    /// Test function `g` for the martingale diagnostic.
    pub test_function: Option<BumpBlock>,
    /// Initial population and pooled-transition target of the chain diagnostic.
    pub i0: Option<usize>,
    pub min_transitions: Option<u64>,
    pub min_replicas: Option<usize>,
    pub chain_horizon: Option<Positive>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
    #[default]
    Both,
}

fn default_directory() -> String {
    ".".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default = "default_directory")]
    pub directory: String,
    #[serde(default)]
    pub format: Format,
}

impl Default for OutputBlock {
    fn default() -> Self {
        Self { directory: default_directory(), format: Format::Both }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every replica stream is derived from it.
    #[serde(default)]
    pub seed: u64,
    pub mechanism: MechanismBlock,
    pub simulation: Option<SimulationBlock>,
    pub spde: Option<SpdeBlock>,
    pub mfe: Option<MfeBlock>,
    #[serde(default)]
    pub experiment: ExperimentBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

/// 1-based line and column of byte `offset` in `text`.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, column)
}

/// Parses TOML, or JSON when the text starts with `{`.
pub fn parse_config(text: &str) -> Result<RunConfig, ConfigError> {
    if text.trim_start().starts_with('{') {
        return serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        });
    }
    toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
        ConfigError::Parse { line, column, message: e.message().to_string() }
    })
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

impl RunConfig {
    /// Checks the mechanism assumptions and that every block `sub` needs is
    /// present and consistent.
    pub fn validate_for(&self, sub: Subcommand) -> Result<(), ConfigError> {
        validate(self.mechanism.spec()).map_err(|e| validation(e.to_string()))?;
        let oracle = self.mechanism.oracle_mode();
        let exp = &self.experiment;
        let need_sim = || self.simulation.as_ref().ok_or_else(|| validation(format!("{sub} needs a [simulation] block")));
        let need_spde = || self.spde.as_ref().ok_or_else(|| validation(format!("{sub} needs a [spde] block")));
        let need_mfe = || self.mfe.as_ref().ok_or_else(|| validation(format!("{sub} needs an [mfe] block")));
        let need_times = || {
            if exp.times.is_empty() {
                Err(validation(format!("{sub} needs experiment.times")))
            } else {
                Ok(())
            }
        };
        match sub {
            Subcommand::MechInfo => {}
            Subcommand::SimRun => {
                let s = need_sim()?;
                s.sim_config(self.seed, oracle)?;
                if s.initial.is_empty() {
                    return Err(validation("simulation.initial must list at least one position"));
                }
                if exp.times.iter().any(|t| t.0 > s.horizon.0) {
                    return Err(validation("experiment.times must not exceed simulation.horizon"));
                }
            }
            Subcommand::SpdeRun => {
                need_spde()?.spde_config(self.seed)?;
                need_times()?;
                if exp.points.is_empty() {
                    return Err(validation("spde-run needs experiment.points"));
                }
            }
            Subcommand::MfeSolve => {
                let m = need_mfe()?;
                m.grid.grid()?;
                m.trace()?;
                need_times()?;
            }
            Subcommand::DualCheck => {
                need_sim()?.sim_config(self.seed, oracle)?;
                need_spde()?.spde_config(self.seed)?;
                need_times()?;
                if exp.f.is_none() {
                    return Err(validation("dual-check needs experiment.f"));
                }
                if exp.points.is_empty() || exp.points.len() > 5 {
                    return Err(validation("dual-check needs between 1 and 5 experiment.points"));
                }
            }
            Subcommand::CdiScan => {
                need_sim()?.sim_config(self.seed, oracle)?;
                need_mfe()?.grid.grid()?;
                need_times()?;
                let (region, window) = match (exp.region, exp.window) {
                    (Some(r), Some(w)) => (r, w),
                    _ => return Err(validation("cdi-scan needs experiment.region and experiment.window")),
                };
                if exp.n.unwrap_or(0) == 0 {
                    return Err(validation("cdi-scan needs experiment.n > 0"));
                }
                let trace = InitialTrace::interval(region[0], region[1]);
                let class = classify_integrability(&trace, (window[0], window[1]));
                if class == Integrability::Unbounded || !window[0].is_finite() || !window[1].is_finite() {
                    return Err(validation(format!(
                        "classify_integrability: window ({}, {}) meets the initial support [{}, {}] in an unbounded \
                         set or is itself unbounded; Z_t(U) is not integrable there",
                        window[0], window[1], region[0], region[1]
                    )));
                }
            }
            Subcommand::DiagMartingale => {
                need_sim()?.sim_config(self.seed, oracle)?;
                need_times()?;
                if exp.test_function.is_none() {
                    return Err(validation("diag-martingale needs experiment.test_function"));
                }
            }
            Subcommand::DiagChain => {
                need_sim()?.sim_config(self.seed, oracle)?;
                if self.mechanism.beta_o != 0.0 {
                    return Err(validation("diag-chain requires mechanism.beta_o = 0"));
                }
            }
        }
        Ok(())
    }

    /// Applies `--seed` and `--replicas`.
    pub fn apply_overrides(&mut self, seed: Option<u64>, replicas: Option<usize>) {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(r) = replicas {
            if let Some(sim) = self.simulation.as_mut() {
                sim.replicas = r;
            }
            if let Some(spde) = self.spde.as_mut() {
                spde.replicas = r;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[mechanism]\nbeta_c = 1.0\nq = [0.0, 1.0]\n";

    #[test]
    fn minimal_coalescing_config_is_valid() {
        let cfg = parse_config(MINIMAL).unwrap();
        assert_eq!(cfg.mechanism.beta_o, 0.0);
        assert_eq!(cfg.mechanism.p, vec![1.0]);
        cfg.validate_for(Subcommand::MechInfo).unwrap();
    }

    #[test]
    fn json_encoding_is_accepted() {
        let cfg = parse_config(r#"{"mechanism": {"beta_c": 1.0, "q": [0.0, 1.0]}}"#).unwrap();
        assert_eq!(cfg, parse_config(MINIMAL).unwrap());
    }

    #[test]
    fn forbidden_catalytic_mass_is_a_validation_error() {
        let cfg = parse_config("[mechanism]\nbeta_c = 1.0\nq = [0.5, 0.25, 0.25]\n").unwrap();
        match cfg.validate_for(Subcommand::MechInfo) {
            Err(ConfigError::Validation(m)) => assert!(m.contains("ForbiddenMass"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn negative_dt_is_a_parse_error_with_position() {
        let text = format!("{MINIMAL}\n[simulation]\ninitial = [0.0]\nhorizon = 1.0\ndt = -0.1\n");
        match parse_config(&text) {
            Err(ConfigError::Parse { line, column, message }) => {
                assert_eq!(line, 8);
                assert!(column >= 1);
                assert!(message.contains("> 0"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = parse_config("[mechanism]\nbeta_c = 1.0\nq = [0.0, 1.0]\ncolour = 3\n").unwrap_err();
        match err {
            ConfigError::Parse { line, message, .. } => {
                assert_eq!(line, 4);
                assert!(message.contains("colour"), "{message}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn json_errors_have_positions() {
        let err = parse_config("{\"mechanism\": {\"beta_c\": 1.0,\n \"q\": [0.0, 1.0], \"zzz\": 1}}").unwrap_err();
        assert!(matches!(err, ConfigError::Parse { line: 2, .. }), "{err:?}");
    }

    #[test]
    fn missing_block_is_reported() {
        let cfg = parse_config(MINIMAL).unwrap();
        let err = cfg.validate_for(Subcommand::SimRun).unwrap_err();
        assert_eq!(err, ConfigError::Validation("sim-run needs a [simulation] block".into()));
    }

    #[test]
    fn unbounded_cdi_window_is_rejected() {
        let text = format!(
            "{MINIMAL}\n[simulation]\nhorizon = 0.1\n\n[mfe]\nt_floor = 1e-4\ngrid = {{ x_min = -2.0, x_max = 3.0, dx = 0.01 }}\n\n\
             [experiment]\ntimes = [0.02]\nn = 10\nregion = [0.0, 1.0]\nwindow = [0.0, inf]\n"
        );
        let cfg = parse_config(&text).unwrap();
        match cfg.validate_for(Subcommand::CdiScan) {
            Err(ConfigError::Validation(m)) => assert!(m.starts_with("classify_integrability"), "{m}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_apply() {
        let text = format!("{MINIMAL}\n[simulation]\ninitial = [0.0]\nhorizon = 1.0\nreplicas = 3\n");
        let mut cfg = parse_config(&text).unwrap();
        cfg.apply_overrides(Some(9), Some(17));
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.simulation.unwrap().replicas, 17);
    }
}
