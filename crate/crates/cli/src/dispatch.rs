//! Runs the pipeline behind each subcommand and packages its tables.

use std::collections::BTreeMap;
use std::fmt;

use serde_json::json;

use sbbm::duality::{compare, lhs_estimate, rhs_estimate, DualityExperiment};
use sbbm::experiments::{
    cdi_ratio_scan, chain_absorption_test, martingale_scan, mechanism_algebra_check, supermartingale_scan, CdiError,
    CdiSetup, KAPPA_GAMMAS,
};
use sbbm::mechanisms::{derived_constants, Mechanism, OracleMode};
use sbbm::mfe::{cap, integral_over, MfeConfig, MfeSolver};
use sbbm::particle::{AdaptiveStepping, Observables, Population, Simulator};
use sbbm::rng::{stream, Purpose};
use sbbm::spde::{InitialDatum, SpdeSolver};
use sbbm::stats::Accumulator;
use sbbm::tabulated::TestFunction;
use sbbm::{DualityError, MechanismError, SimError, SpdeError};

use crate::config::RunConfig;
use crate::output::{num, Outcome, Provenance, Table};
use crate::{Subcommand, EXIT_CONFIG, EXIT_FAIL};

/// Module-qualified runtime error.
#[derive(Debug, Clone, PartialEq)]
pub struct RunError {
    pub module: &'static str,
    pub message: String,
    /// The error stems from the configuration rather than the run.
    pub config: bool,
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        if self.config {
            EXIT_CONFIG
        } else {
            EXIT_FAIL
        }
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "error[{}]: {}", self.module, self.message)
    }
}

impl std::error::Error for RunError {}

impl From<MechanismError> for RunError {
    fn from(e: MechanismError) -> Self {
        RunError { module: "mechanisms", message: e.to_string(), config: true }
    }
}

impl From<SimError> for RunError {
    fn from(e: SimError) -> Self {
        let config = matches!(e, SimError::Mechanism(_) | SimError::Config(_));
        RunError { module: "particle_sim", message: e.to_string(), config }
    }
}

impl From<SpdeError> for RunError {
    fn from(e: SpdeError) -> Self {
        let config = matches!(
            e,
            SpdeError::Mechanism(_) | SpdeError::Config(_) | SpdeError::StabilityViolation { .. } | SpdeError::OutOfRange { .. }
        );
        RunError { module: "spde", message: e.to_string(), config }
    }
}

impl From<DualityError> for RunError {
    fn from(e: DualityError) -> Self {
        match e {
            DualityError::Sim(e) => e.into(),
            DualityError::Spde(e) => e.into(),
            other => RunError { module: "duality", message: other.to_string(), config: false },
        }
    }
}

impl From<CdiError> for RunError {
    fn from(e: CdiError) -> Self {
        match e {
            CdiError::Sim(e) => e.into(),
            CdiError::Mfe(e) => RunError { module: "mfe", ..RunError::from(e) },
            other => RunError { module: "mfe", message: other.to_string(), config: true },
        }
    }
}

/// Runs `sub` on a config already checked by `validate_for(sub)`.
pub fn dispatch(cfg: &RunConfig, sub: Subcommand) -> Result<Outcome, RunError> {
    match sub {
        Subcommand::MechInfo => mech_info(cfg),
        Subcommand::SimRun => sim_run(cfg),
        Subcommand::SpdeRun => spde_run(cfg),
        Subcommand::MfeSolve => mfe_solve(cfg),
        Subcommand::DualCheck => dual_check(cfg),
        Subcommand::CdiScan => cdi_scan(cfg),
        Subcommand::DiagMartingale => diag_martingale(cfg),
        Subcommand::DiagChain => diag_chain(cfg),
    }
}

/// Unwraps a block whose presence `validate_for` guarantees.
fn block<'a, T>(b: &'a Option<T>, name: &str) -> Result<&'a T, RunError> {
    b.as_ref().ok_or_else(|| RunError { module: "cli", message: format!("missing [{name}] block"), config: true })
}

fn config_err(e: crate::ConfigError) -> RunError {
    RunError { module: "cli", message: e.to_string(), config: true }
}

fn band_eps(sim: &sbbm::particle::SimConfig) -> Option<f64> {
    (sim.estimator.method == sbbm::local_time::LocalTimeMethod::Band).then_some(sim.estimator.epsilon)
}

fn times(cfg: &RunConfig) -> Vec<f64> {
    cfg.experiment.times.iter().map(|t| t.0).collect()
}

fn mech_info(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let spec = cfg.mechanism.spec();
    let c = derived_constants(&spec);
    let algebra = mechanism_algebra_check(&spec)?;
    let mut t = Table::new("constants", &["name", "value"]);
    let rows: [(&str, f64); 8] = [
        ("beta_o", spec.beta_o),
        ("beta_c", spec.beta_c),
        ("lambda_o", c.lambda_o),
        ("lambda_c", c.lambda_c),
        ("phi_prime0", c.phi_prime0),
        ("psi_prime0", c.psi_prime0),
        ("z_star", c.z_star),
        ("psi_at_z_star", algebra.psi_at_z_star),
    ];
    for (name, v) in rows {
        t.push(vec![name.into(), num(v)]);
    }
    for (g, k) in KAPPA_GAMMAS.iter().zip(&algebra.kappa) {
        t.push(vec![format!("kappa({g})"), num(*k)]);
    }
    let messages = vec![format!(
        "z*={} Ψ'(0+)={} λ_c={} Φ'(0+)={} λ_o={}",
        c.z_star, c.psi_prime0, c.lambda_c, c.phi_prime0, c.lambda_o
    )];
    Ok(Outcome {
        pass: algebra.pass,
        tables: vec![t],
        summary: json!({ "constants": c, "algebra": algebra }),
        provenance: Provenance { seed: cfg.seed, ..Provenance::default() },
        messages,
    })
}

fn sim_run(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let s = block(&cfg.simulation, "simulation")?;
    let sim_cfg = s.sim_config(cfg.seed, cfg.mechanism.oracle_mode()).map_err(config_err)?;
    let simulator = Simulator::from_spec(cfg.mechanism.spec(), sim_cfg.clone())?;
    let mut obs = Observables { times: times(cfg), ..Observables::default() };
    if obs.times.is_empty() {
        obs.times.push(s.horizon.0);
    }
    if let Some([a, b]) = cfg.experiment.window {
        obs.windows.push((a, b));
    }
    // Keyed by (sample index, observable order) so rows keep emission order.
    let mut acc: BTreeMap<(usize, usize), (f64, String, Accumulator)> = BTreeMap::new();
    let mut events = Accumulator::new();
    for r in 0..s.replicas {
        let mut rng = stream(cfg.seed, Purpose::Particles, r as u64);
        let out = simulator.run(Population::init(&s.initial), &obs, &mut rng)?;
        let mut time_idx = 0usize;
        let mut last_time = f64::NAN;
        let mut k = 0usize;
        for sample in out.samples {
            if sample.time != last_time {
                if !last_time.is_nan() {
                    time_idx += 1;
                }
                last_time = sample.time;
                k = 0;
            }
            acc.entry((time_idx, k))
                .or_insert_with(|| (sample.time, sample.name.clone(), Accumulator::new()))
                .2
                .push(sample.value);
            k += 1;
        }
        let p = &out.final_population;
        events.push((p.catalytic_events + p.ordinary_events) as f64);
    }
    let mut t = Table::new("observables", &["time", "observable", "mean", "se", "replicas"]);
    for (time, name, a) in acc.values() {
        let m = a.summary();
        t.push(vec![num(*time), name.clone(), num(m.mean), num(m.se), m.n.to_string()]);
    }
    let ev = events.summary();
    Ok(Outcome {
        pass: true,
        tables: vec![t],
        summary: json!({ "events_per_replica": ev }),
        provenance: Provenance {
            seed: cfg.seed,
            replicas: Some(s.replicas as u64),
            dt: Some(sim_cfg.dt),
            dx: None,
            eps: band_eps(&sim_cfg),
        },
        messages: vec![format!("{} replicas, mean events per replica {:.3}", s.replicas, ev.mean)],
    })
}

fn spde_run(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let b = block(&cfg.spde, "spde")?;
    let spde_cfg = b.spde_config(cfg.seed).map_err(config_err)?;
    let mechanism = Mechanism::new(cfg.mechanism.spec(), cfg.mechanism.oracle_mode())?;
    let solver = SpdeSolver::new(mechanism, spde_cfg.clone())?;
    let datum = InitialDatum::from(&b.datum);
    let ts = times(cfg);
    let points = &cfg.experiment.points;
    let mut acc = vec![vec![Accumulator::new(); points.len()]; ts.len()];
    let mut field = Table::new("field", &["time", "cell", "x", "value"]);
    for r in 0..b.replicas {
        let mut rng = stream(cfg.seed, Purpose::Field, r as u64);
        let mut state = solver.init(&datum)?;
        for (k, &t) in ts.iter().enumerate() {
            solver.run_to(&mut state, t, &mut rng);
            let u = sbbm::spde::sample_at(solver.grid(), &state, points)?;
            for (a, v) in acc[k].iter_mut().zip(u) {
                a.push(v);
            }
            if r == 0 {
                for (i, (x, v)) in solver.grid().centers().zip(&state.values).enumerate() {
                    field.push(vec![num(t), i.to_string(), num(x), num(*v)]);
                }
            }
        }
    }
    let mut summary = Table::new("points", &["time", "x", "mean", "se", "replicas"]);
    for (k, &t) in ts.iter().enumerate() {
        for (a, &x) in acc[k].iter().zip(points) {
            let m = a.summary();
            summary.push(vec![num(t), num(x), num(m.mean), num(m.se), m.n.to_string()]);
        }
    }
    Ok(Outcome {
        pass: true,
        tables: vec![summary, field],
        summary: json!({ "z_star": solver.mechanism.z_star(), "noise": spde_cfg.noise, "field_replica": 0 }),
        provenance: Provenance {
            seed: cfg.seed,
            replicas: Some(b.replicas as u64),
            dt: Some(spde_cfg.dt),
            dx: Some(spde_cfg.grid.dx),
            eps: None,
        },
        messages: vec![format!("{} replicas on {} cells", b.replicas, spde_cfg.grid.n_cells)],
    })
}

fn mfe_solve(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let m = block(&cfg.mfe, "mfe")?;
    let grid = m.grid.grid().map_err(config_err)?;
    let trace = m.trace().map_err(config_err)?;
    let psi_prime0 = derived_constants(&cfg.mechanism.spec()).psi_prime0;
    let mut mfe_cfg = MfeConfig::new(grid, m.t_floor.0);
    if let Some(dt) = m.dt {
        mfe_cfg.dt = dt.0;
    }
    let solver = MfeSolver::new(psi_prime0, mfe_cfg.clone()).map_err(|e| RunError { module: "mfe", ..e.into() })?;
    let ts = times(cfg);
    let sol = solver.solve(&trace, &ts).map_err(|e| RunError { module: "mfe", ..e.into() })?;
    let mut field = Table::new("field", &["time", "cell", "x", "value"]);
    let mut integrals = Table::new("integrals", &["time", "solved_time", "integral", "cap"]);
    for snap in &sol.snapshots {
        for (i, (x, v)) in grid.centers().zip(&snap.values).enumerate() {
            field.push(vec![num(snap.time), i.to_string(), num(x), num(*v)]);
        }
        if let Some([a, b]) = cfg.experiment.window {
            let integral = integral_over(&grid, &snap.values, (a, b)).map_err(|e| RunError { module: "mfe", ..e.into() })?;
            integrals.push(vec![num(snap.time), num(snap.solved_time), num(integral), num(cap(psi_prime0, snap.time))]);
        }
    }
    let mut tables = vec![field];
    if !integrals.rows.is_empty() {
        tables.push(integrals);
    }
    Ok(Outcome {
        pass: true,
        tables,
        summary: json!({ "psi_prime0": psi_prime0, "t_floor": m.t_floor.0, "snapshots": sol.snapshots.len() }),
        provenance: Provenance { seed: cfg.seed, replicas: None, dt: Some(mfe_cfg.dt), dx: Some(grid.dx), eps: None },
        messages: vec![format!("{} snapshots on {} cells", sol.snapshots.len(), grid.n_cells)],
    })
}

fn dual_check(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let s = block(&cfg.simulation, "simulation")?;
    let b = block(&cfg.spde, "spde")?;
    let oracle = cfg.mechanism.oracle_mode();
    let sim_cfg = s.sim_config(cfg.seed, oracle).map_err(config_err)?;
    let spde_cfg = b.spde_config(cfg.seed).map_err(config_err)?;
    let f = block(&cfg.experiment.f, "experiment.f")?;
    let exp = DualityExperiment {
        spec: cfg.mechanism.spec(),
        f: InitialDatum::from(f),
        times: times(cfg),
        points: cfg.experiment.points.clone(),
        replicas: b.replicas,
        seed: cfg.seed,
    };
    let lhs = lhs_estimate(&exp, &spde_cfg, oracle)?;
    let rhs = rhs_estimate(&DualityExperiment { replicas: s.replicas, ..exp.clone() }, &sim_cfg)?;
    let mut t = Table::new(
        "duality",
        &["t", "n", "lhs_mean", "lhs_se", "rhs_mean", "rhs_se", "z_score", "lhs_replicas", "rhs_replicas", "pass"],
    );
    let mut reports = Vec::new();
    for (l, r) in lhs.iter().zip(&rhs) {
        let rep = compare(l, r)?;
        t.push(vec![
            num(rep.t),
            rep.n.to_string(),
            num(rep.lhs_mean),
            num(rep.lhs_se),
            num(rep.rhs_mean),
            num(rep.rhs_se),
            num(rep.z_score),
            rep.lhs_replicas.to_string(),
            rep.rhs_replicas.to_string(),
            rep.pass.to_string(),
        ]);
        reports.push(rep);
    }
    let pass = reports.iter().all(|r| r.pass);
    let messages = reports.iter().map(|r| format!("t={} z={:.3}", r.t, r.z_score)).collect();
    Ok(Outcome {
        pass,
        tables: vec![t],
        summary: json!({ "reports": reports, "oracle": oracle }),
        provenance: Provenance {
            seed: cfg.seed,
            replicas: Some(b.replicas.min(s.replicas) as u64),
            dt: Some(sim_cfg.dt),
            dx: Some(spde_cfg.grid.dx),
            eps: band_eps(&sim_cfg),
        },
        messages,
    })
}

fn cdi_scan(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let s = block(&cfg.simulation, "simulation")?;
    let m = block(&cfg.mfe, "mfe")?;
    let exp = &cfg.experiment;
    let sim_cfg = s.sim_config(cfg.seed, cfg.mechanism.oracle_mode()).map_err(config_err)?;
    let (region, window) = match (exp.region, exp.window) {
        (Some(r), Some(w)) => ((r[0], r[1]), (w[0], w[1])),
        _ => return Err(RunError { module: "cli", message: "missing region/window".into(), config: true }),
    };
    let mut ts = times(cfg);
    ts.sort_by(|a, b| b.total_cmp(a));
    let setup = CdiSetup {
        spec: cfg.mechanism.spec(),
        n: exp.n.unwrap_or(0),
        region,
        window,
        times: ts,
        sim: sim_cfg.clone(),
        replicas: s.replicas,
        mfe_grid: m.grid.grid().map_err(config_err)?,
        mfe_t_floor: m.t_floor.0,
    };
    let main = cdi_ratio_scan(&setup)?;
    let in_band = main.within_band(0.7, 1.3);
    let monotone = main.deviation_non_increasing();
    let mut t = Table::new(
        "ratios",
        &["run", "time", "count_mean", "count_se", "mfe_integral", "ratio", "ratio_se"],
    );
    let mut push_rows = |label: &str, r: &sbbm::experiments::CdiScanResult| {
        for i in 0..r.times.len() {
            t.push(vec![
                label.into(),
                num(r.times[i]),
                num(r.counts[i].mean),
                num(r.counts[i].se),
                num(r.mfe_integrals[i]),
                num(r.ratios[i]),
                num(r.ratio_se[i]),
            ]);
        }
    };
    push_rows("main", &main);
    let mut pass = in_band && monotone;
    let mut control_json = json!(null);
    let mut messages = vec![format!("ratios {:?} in_band={in_band} monotone={monotone}", main.ratios)];
    if exp.negative_control {
        let mut ctl = setup.clone();
        ctl.sim.oracle_mode = OracleMode { zero_catalytic: true, ..ctl.sim.oracle_mode };
        let control = cdi_ratio_scan(&ctl)?;
        let exits = !control.within_band(0.7, 1.3);
        pass &= exits;
        push_rows("control", &control);
        messages.push(format!("negative control ratios {:?} exits_band={exits}", control.ratios));
        control_json = json!({ "result": control, "exits_band": exits });
    }
    Ok(Outcome {
        pass,
        tables: vec![t],
        summary: json!({ "main": main, "in_band": in_band, "deviation_non_increasing": monotone, "control": control_json }),
        provenance: Provenance {
            seed: cfg.seed,
            replicas: Some(s.replicas as u64),
            dt: Some(sim_cfg.dt),
            dx: Some(setup.mfe_grid.dx),
            eps: band_eps(&sim_cfg),
        },
        messages,
    })
}

fn diag_martingale(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let s = block(&cfg.simulation, "simulation")?;
    let sim_cfg = s.sim_config(cfg.seed, cfg.mechanism.oracle_mode()).map_err(config_err)?;
    let bump = block(&cfg.experiment.test_function, "experiment.test_function")?;
    let ts = times(cfg);
    let t_max = ts.iter().copied().fold(0.0, f64::max);
    let spread = s.initial.iter().map(|x| (x - bump.center).abs()).fold(0.0, f64::max);
    let g = TestFunction::bump(bump.center, bump.radius.0, 4001, spread + 8.0 * t_max.sqrt() + 1.0);
    let spec = cfg.mechanism.spec();
    let mart = martingale_scan(&spec, &g, &s.initial, &ts, &sim_cfg, s.replicas)?;
    let sup = supermartingale_scan(&spec, &s.initial, &ts, &sim_cfg, s.replicas)?;
    let mut mt = Table::new("martingale", &["t", "mean", "se", "z0", "deviation_se"]);
    for p in &mart.points {
        mt.push(vec![num(p.t), num(p.mean.mean), num(p.mean.se), num(mart.z0), num(p.deviation_in_se)]);
    }
    let mut st = Table::new(
        "supermartingale",
        &["t", "mass_mean", "mass_se", "mass_bound", "local_time_mean", "local_time_se", "local_time_bound"],
    );
    for p in &sup.points {
        st.push(vec![
            num(p.t),
            num(p.discounted_mass.mean),
            num(p.discounted_mass.se),
            num(sup.mass_bound),
            num(p.discounted_local_time.mean),
            num(p.discounted_local_time.se),
            num(sup.local_time_bound),
        ]);
    }
    Ok(Outcome {
        pass: mart.pass && sup.pass,
        tables: vec![mt, st],
        messages: vec![format!("martingale pass={} supermartingale pass={}", mart.pass, sup.pass)],
        summary: json!({ "martingale": mart, "supermartingale": sup }),
        provenance: Provenance {
            seed: cfg.seed,
            replicas: Some(s.replicas as u64),
            dt: Some(sim_cfg.dt),
            dx: None,
            eps: band_eps(&sim_cfg),
        },
    })
}

fn diag_chain(cfg: &RunConfig) -> Result<Outcome, RunError> {
    let s = block(&cfg.simulation, "simulation")?;
    let exp = &cfg.experiment;
    let mut sim_cfg = s.sim_config(cfg.seed, cfg.mechanism.oracle_mode()).map_err(config_err)?;
    let horizon = exp.chain_horizon.map_or(1e12, |h| h.0);
    if sim_cfg.adaptive.is_none() {
        sim_cfg.adaptive = Some(AdaptiveStepping { dt_max: horizon });
    }
    let spec = cfg.mechanism.spec();
    let rep = chain_absorption_test(
        &spec.q,
        spec.beta_c,
        exp.i0.unwrap_or(4),
        exp.min_replicas.unwrap_or(s.replicas),
        exp.min_transitions.unwrap_or(10_000),
        horizon,
        &sim_cfg,
    )?;
    let chain = sbbm::particle::embedded_chain_matrix(&spec.q, rep.counts[0].len() - 1)?;
    let mut t = Table::new("transitions", &["from", "to", "observed", "expected"]);
    for (i, row) in rep.counts.iter().enumerate() {
        let total: u64 = row.iter().sum();
        if total == 0 {
            continue;
        }
        for (j, &obs) in row.iter().enumerate() {
            let expected = total as f64 * chain.prob(i, j);
            if obs > 0 || expected > 0.0 {
                t.push(vec![i.to_string(), j.to_string(), obs.to_string(), num(expected)]);
            }
        }
    }
    let pass = rep.p_value > 0.01 && rep.all_absorbed();
    Ok(Outcome {
        pass,
        tables: vec![t],
        messages: vec![format!(
            "replicas={} transitions={} chi2={:.3} dof={} p={:.4} absorbed={}/{}",
            rep.replicas, rep.transitions, rep.chi_square, rep.degrees_of_freedom, rep.p_value, rep.absorbed, rep.replicas
        )],
        summary: json!({
            "replicas": rep.replicas,
            "transitions": rep.transitions,
            "chi_square": rep.chi_square,
            "degrees_of_freedom": rep.degrees_of_freedom,
            "p_value": rep.p_value,
            "absorbed": rep.absorbed,
            "paths": rep.paths,
        }),
        provenance: Provenance {
            seed: cfg.seed,
            replicas: Some(rep.replicas as u64),
            dt: Some(sim_cfg.dt),
            dx: None,
            eps: band_eps(&sim_cfg),
        },
    })
}
