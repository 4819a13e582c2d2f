//! Command dispatch. Each command returns a JSON result plus a status; the
//! binary wraps it in an [`Envelope`].

use std::f64::consts::PI;
use std::path::Path;

use magflow_core::critical_values::{compute_e0, e1_lower_bound_general, e1_lower_bound_symmetric};
use magflow_core::flow::{certify_orbit, energy_drift, integrate, refine_orbit, State};
use magflow_core::loop_space::{lift, FreePeriodLoop, LiftedLoop};
use magflow_core::variational::{
    default_seed, find_waist, labelled_endpoint, minimax_path, multiplicity_search, scan_energy, Label, Waist,
};
use magflow_core::vec3::tangent_basis;
use magflow_core::{Error, MagneticSystem, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{ConfigError, RunConfig, SeedLoop};
use crate::output::{
    loop_rows, Artifacts, Envelope, ErrorRecord, LoopRecord, OutputError, ReportRecord, Status, SCHEMA_VERSION,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    Flow,
    Waist,
    Minimax,
    Scan,
    Multiplicity,
    CriticalValues,
    OrbitCheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Flow => "flow",
            Command::Waist => "waist",
            Command::Minimax => "minimax",
            Command::Scan => "scan",
            Command::Multiplicity => "multiplicity",
            Command::CriticalValues => "critical-values",
            Command::OrbitCheck => "orbit-check",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Solver(#[from] Error),
    #[error(transparent)]
    Output(#[from] OutputError),
    #[error("cannot read loop file {path}: {message}")]
    LoopFile { path: String, message: String },
}

impl RunError {
    /// 2 for solver nonconvergence, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Solver(Error::MaxIterations { .. } | Error::RefinementFailed(_)) => 2,
            _ => 1,
        }
    }

    pub fn kind(&self) -> String {
        match self {
            RunError::Config(ConfigError::Parse { .. }) => "ParseError".into(),
            RunError::Config(ConfigError::Validation { .. }) => "ValidationError".into(),
            RunError::Config(ConfigError::Io { .. }) | RunError::Output(_) | RunError::LoopFile { .. } => "IoError".into(),
            RunError::Solver(e) => {
                let dbg = format!("{e:?}");
                dbg.split(|c: char| !c.is_alphanumeric()).next().unwrap_or("Error").to_string()
            }
        }
    }
}

/// Outcome of a successful command.
pub struct Outcome {
    pub status: Status,
    pub result: Value,
}

impl Outcome {
    fn ok(result: Value) -> Self {
        Outcome { status: Status::Ok, result }
    }

    fn converged(converged: bool, result: Value) -> Self {
        Outcome { status: if converged { Status::Ok } else { Status::Nonconvergence }, result }
    }
}

/// Runs `cmd` and builds the JSON envelope plus the process exit code.
pub fn run(cmd: Command, cfg: &RunConfig, seed: u64, out: Option<&Path>) -> (Envelope, i32) {
    let mut envelope = Envelope {
        schema_version: SCHEMA_VERSION,
        command: cmd.name().to_string(),
        seed,
        config: cfg.raw.clone(),
        status: Status::Error,
        result: None,
        error: None,
        artifacts: Vec::new(),
    };
    let outcome = Artifacts::new(out).map_err(RunError::from).and_then(|mut art| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let o = dispatch(cmd, cfg, &mut rng, &mut art)?;
        Ok((o, art.into_names()))
    });
    match outcome {
        Ok((o, names)) => {
            envelope.status = o.status;
            envelope.result = Some(o.result);
            envelope.artifacts = names;
            let code = if o.status == Status::Nonconvergence { 2 } else { 0 };
            (envelope, code)
        }
        Err(e) => {
            let code = e.exit_code();
            envelope.status = if code == 2 { Status::Nonconvergence } else { Status::Error };
            envelope.error = Some(ErrorRecord { kind: e.kind(), message: e.to_string() });
            (envelope, code)
        }
    }
}

fn dispatch(cmd: Command, cfg: &RunConfig, rng: &mut ChaCha8Rng, art: &mut Artifacts) -> Result<Outcome, RunError> {
    let sys = cfg.system()?;
    match cmd {
        Command::Flow => flow(&sys, cfg, rng, art),
        Command::Waist => waist(&sys, cfg, rng, art),
        Command::Minimax => minimax(&sys, cfg, rng, art),
        Command::Scan => scan(&sys, cfg, rng, art),
        Command::Multiplicity => multiplicity(&sys, cfg, rng, art),
        Command::CriticalValues => critical_values(&sys, cfg, art),
        Command::OrbitCheck => orbit_check(&sys, cfg, art),
    }
}

fn report_json(r: &magflow_core::flow::OrbitReport) -> Value {
    json!(ReportRecord::from(r))
}

/// Seed loop selected by `seed.kind`, lifted by its cone.
pub fn make_seed(sys: &MagneticSystem, cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Result<LiftedLoop, Error> {
    let n = cfg.solver.loop_nodes;
    match &cfg.seed {
        SeedLoop::Equator => default_seed(sys, n),
        SeedLoop::Random => {
            let amp = rng.gen_range(0.02..0.08);
            let k = rng.gen_range(2..=4) as f64;
            let phase = rng.gen_range(0.0..2.0 * PI);
            let eq = FreePeriodLoop::latitude(0.0, true, n, 1.0)?;
            let nodes = eq
                .nodes()
                .iter()
                .enumerate()
                .map(|(j, x)| *x + Vec3::Z * (amp * (k * 2.0 * PI * j as f64 / n as f64 + phase).sin()))
                .collect();
            lift(sys, FreePeriodLoop::new(nodes, 1.0)?)
        }
        SeedLoop::Circle { axis, radius } => {
            let start = tangent_basis(axis.normalized()).0;
            lift(sys, FreePeriodLoop::circle(*axis, *radius, start, n, 1.0)?)
        }
    }
}

#[derive(Serialize)]
struct TrajectoryRow {
    t: f64,
    x: f64,
    y: f64,
    z: f64,
    vx: f64,
    vy: f64,
    vz: f64,
    energy: f64,
}

fn flow(sys: &MagneticSystem, cfg: &RunConfig, rng: &mut ChaCha8Rng, art: &mut Artifacts) -> Result<Outcome, RunError> {
    let e = cfg.energy()?;
    let fl = &cfg.flow;
    let q = fl.initial_q.normalized();
    let dir = match fl.initial_dir {
        Some(d) => d.reject(q),
        None => {
            let (b1, b2) = tangent_basis(q);
            let a = rng.gen_range(0.0..2.0 * PI);
            b1 * a.cos() + b2 * a.sin()
        }
    };
    if dir.norm() < 1e-9 {
        return Err(ConfigError::Validation { key: "flow.initial_dir".into(), message: "must not be parallel to flow.initial_q".into() }.into());
    }
    let l = &sys.lagrangian;
    let kinetic = 2.0 * (e - l.potential.value(q));
    if kinetic <= 0.0 {
        return Err(ConfigError::Validation {
            key: "energy.value".into(),
            message: format!("energy {e} lies below the potential at flow.initial_q"),
        }
        .into());
    }
    let v = dir.normalized() * (kinetic / l.metric.factor(q)).sqrt();
    let traj = integrate(sys, State::new(q, v), fl.time, fl.step)?;
    let rows = traj
        .times
        .iter()
        .zip(&traj.states)
        .zip(&traj.energy_series)
        .step_by(fl.csv_stride)
        .map(|((t, s), en)| TrajectoryRow { t: *t, x: s.q.x, y: s.q.y, z: s.q.z, vx: s.v.x, vy: s.v.y, vz: s.v.z, energy: *en });
    art.write("trajectory.csv", rows)?;
    let last = traj.last();
    Ok(Outcome::ok(json!({
        "energy": e,
        "steps": traj.states.len() - 1,
        "time": fl.time,
        "initial": { "q": q.to_array(), "v": v.to_array() },
        "final": { "q": last.q.to_array(), "v": last.v.to_array() },
        "relative_energy_drift": energy_drift(&traj),
    })))
}

fn waist_json(w: &Waist) -> Value {
    json!({
        "action": w.action,
        "gradient_norm": w.gradient_norm,
        "iterations": w.iterations,
        "waist": LoopRecord::lifted(&w.waist),
        "refined": w.refined.as_ref().map(LoopRecord::plain),
        "report": w.report.as_ref().map(report_json),
    })
}

#[derive(Serialize)]
struct HistoryRow {
    iteration: usize,
    action: f64,
}

fn history_rows(h: &[f64]) -> impl Iterator<Item = HistoryRow> + '_ {
    h.iter().enumerate().map(|(iteration, a)| HistoryRow { iteration, action: *a })
}

fn waist(sys: &MagneticSystem, cfg: &RunConfig, rng: &mut ChaCha8Rng, art: &mut Artifacts) -> Result<Outcome, RunError> {
    let e = cfg.energy()?;
    let seed = make_seed(sys, cfg, rng)?;
    let w = find_waist(sys, e, &seed, &cfg.solver)?;
    art.write("history.csv", history_rows(&w.history))?;
    let mut rows: Vec<_> = loop_rows("waist", &w.waist.fpl).collect();
    if let Some(r) = &w.refined {
        rows.extend(loop_rows("refined", r));
    }
    art.write("loops.csv", rows)?;
    let mut result = waist_json(&w);
    result["energy"] = json!(e);
    Ok(Outcome::ok(result))
}

fn label_json(l: Label) -> Value {
    json!([l.0, l.1])
}

#[derive(Serialize)]
struct PathRow {
    image: usize,
    action: f64,
}

fn minimax(sys: &MagneticSystem, cfg: &RunConfig, rng: &mut ChaCha8Rng, art: &mut Artifacts) -> Result<Outcome, RunError> {
    let e = cfg.energy()?;
    let c = &cfg.solver;
    let seed = make_seed(sys, cfg, rng)?;
    let w = find_waist(sys, e, &seed, c)?;
    let (la, lb) = cfg.pair;
    let m_max = la.0.max(lb.0);
    let a = labelled_endpoint(sys, e, &w.waist, la, m_max, c)?;
    let b = labelled_endpoint(sys, e, &w.waist, lb, m_max, c)?;
    let r = minimax_path(sys, e, &a, &b, c.path_nodes, c)?;
    let actions: Vec<f64> =
        r.path.images.iter().map(|ll| magflow_core::loop_space::lifted_action_a(sys, e, ll)).collect();
    art.write("path.csv", actions.iter().enumerate().map(|(image, action)| PathRow { image, action: *action }))?;
    art.write("history.csv", history_rows(&r.history))?;
    let mut rows: Vec<_> = loop_rows("saddle", &r.saddle.fpl).collect();
    if let Some(f) = &r.refined {
        rows.extend(loop_rows("refined", f));
    }
    art.write("loops.csv", rows)?;
    Ok(Outcome::converged(
        r.converged,
        json!({
            "energy": e,
            "labels": [label_json(la), label_json(lb)],
            "waist_action": w.action,
            "value": r.value,
            "argmax_index": r.argmax_index,
            "saddle_gradient_norm": r.saddle_gradient_norm,
            "converged": r.converged,
            "path_actions": actions,
            "saddle": LoopRecord::lifted(&r.saddle),
            "refined": r.refined.as_ref().map(LoopRecord::plain),
            "report": r.report.as_ref().map(report_json),
        }),
    ))
}

fn scan_grid(cfg: &RunConfig) -> Result<Vec<f64>, ConfigError> {
    if !cfg.energy_grid.is_empty() {
        return Ok(cfg.energy_grid.clone());
    }
    Err(ConfigError::Validation { key: "energy.grid".into(), message: "required by this command".into() })
}

#[derive(Serialize)]
struct ScanCsv {
    energy: f64,
    waist_action: Option<f64>,
    minimax_value: Option<f64>,
    converged: bool,
    certified: bool,
    closure_residual: Option<f64>,
    error: Option<String>,
}

fn scan(sys: &MagneticSystem, cfg: &RunConfig, rng: &mut ChaCha8Rng, art: &mut Artifacts) -> Result<Outcome, RunError> {
    let grid = scan_grid(cfg)?;
    let seed = make_seed(sys, cfg, rng)?;
    let rows = scan_energy(sys, &grid, &seed, cfg.pair, &cfg.solver);
    let records: Vec<ScanCsv> = rows
        .iter()
        .map(|r| ScanCsv {
            energy: r.energy,
            waist_action: r.waist_action,
            minimax_value: r.minimax_value,
            converged: r.converged,
            certified: r.certified,
            closure_residual: r.closure_residual,
            error: r.error.clone(),
        })
        .collect();
    let values: Vec<f64> = rows.iter().filter_map(|r| r.minimax_value).collect();
    let monotone = values.windows(2).all(|w| w[1] >= w[0] - 1e-3);
    let all_converged = rows.iter().all(|r| r.converged);
    let result = json!({
        "labels": [label_json(cfg.pair.0), label_json(cfg.pair.1)],
        "rows": records,
        "monotone": monotone,
    });
    art.write("scan.csv", records)?;
    Ok(Outcome::converged(all_converged, result))
}

#[derive(Serialize)]
struct OrbitCsv<'a> {
    orbit: usize,
    origin: &'a str,
    action: f64,
    period: f64,
    covering: usize,
    closure_residual: f64,
    mean_energy_residual: f64,
    self_intersections: usize,
}

#[derive(Serialize)]
struct PairCsv {
    label_a: String,
    label_b: String,
    value: Option<f64>,
    converged: bool,
    certified: bool,
    error: Option<String>,
}

fn multiplicity(
    sys: &MagneticSystem,
    cfg: &RunConfig,
    rng: &mut ChaCha8Rng,
    art: &mut Artifacts,
) -> Result<Outcome, RunError> {
    let e = cfg.energy()?;
    let seed = make_seed(sys, cfg, rng)?;
    let r = multiplicity_search(sys, e, &seed, &cfg.labels, &cfg.solver)?;
    art.write(
        "orbits.csv",
        r.orbits.iter().enumerate().map(|(i, o)| OrbitCsv {
            orbit: i,
            origin: &o.origin,
            action: o.action,
            period: o.orbit.period(),
            covering: o.covering,
            closure_residual: o.report.closure_residual,
            mean_energy_residual: o.report.mean_energy_residual,
            self_intersections: o.report.self_intersections,
        }),
    )?;
    let txt = |l: Label| format!("{}:{}", l.0, l.1);
    art.write(
        "pairs.csv",
        r.pairs.iter().map(|p| PairCsv {
            label_a: txt(p.labels.0),
            label_b: txt(p.labels.1),
            value: p.value,
            converged: p.converged,
            certified: p.certified,
            error: p.error.clone(),
        }),
    )?;
    let names: Vec<String> = (0..r.orbits.len()).map(|i| format!("orbit{i}")).collect();
    let rows: Vec<_> = r.orbits.iter().zip(&names).flat_map(|(o, n)| loop_rows(n, &o.orbit)).collect();
    art.write("loops.csv", rows)?;
    let orbits: Vec<Value> = r
        .orbits
        .iter()
        .map(|o| {
            json!({
                "origin": o.origin,
                "action": o.action,
                "covering": o.covering,
                "orbit": LoopRecord::plain(&o.orbit),
                "report": report_json(&o.report),
            })
        })
        .collect();
    let pairs: Vec<Value> = r
        .pairs
        .iter()
        .map(|p| {
            json!({
                "labels": [label_json(p.labels.0), label_json(p.labels.1)],
                "value": p.value,
                "converged": p.converged,
                "certified": p.certified,
                "error": p.error,
            })
        })
        .collect();
    Ok(Outcome::ok(json!({
        "energy": e,
        "waist_action": r.waist.action,
        "distinct_orbits": r.orbits.len(),
        "orbits": orbits,
        "pairs": pairs,
    })))
}

/// Energies `e0 + k * energy.grid_step` up to `energy.max`.
fn e1_grid(cfg: &RunConfig, e0: f64) -> Vec<f64> {
    let steps = ((cfg.energy_max - e0) / cfg.grid_step).floor().max(0.0) as usize;
    (1..=steps).map(|k| e0 + k as f64 * cfg.grid_step).collect()
}

fn critical_values(sys: &MagneticSystem, cfg: &RunConfig, art: &mut Artifacts) -> Result<Outcome, RunError> {
    let e0 = compute_e0(sys);
    let symmetric = match e1_lower_bound_symmetric(sys, cfg.energy_max, 1e-6) {
        Ok(v) => json!({ "value": v }),
        Err(e @ (Error::NotSymmetric | Error::UnsupportedLagrangian | Error::NoNegativeConfiguration { .. })) => {
            json!({ "value": null, "reason": e.to_string() })
        }
        Err(e) => return Err(e.into()),
    };
    let general = match e1_lower_bound_general(sys, &e1_grid(cfg, e0), &cfg.solver) {
        Ok(c) => json!({
            "value": c.energy,
            "witness_action": c.action_value,
            "witness": LoopRecord::lifted(&c.witness),
        }),
        Err(e @ (Error::NoNegativeConfiguration { .. } | Error::UnsupportedLagrangian)) => {
            json!({ "value": null, "reason": e.to_string() })
        }
        Err(e) => return Err(e.into()),
    };
    if let Some(w) = general.get("witness") {
        let rec: LoopRecord = serde_json::from_value(w.clone()).expect("witness record round-trips");
        if let Ok(fpl) = rec.to_loop() {
            art.write("loops.csv", loop_rows("witness", &fpl).collect::<Vec<_>>())?;
        }
    }
    let best = [&symmetric, &general].iter().filter_map(|v| v["value"].as_f64()).fold(None, |m: Option<f64>, v| {
        Some(m.map_or(v, |m| m.max(v)))
    });
    Ok(Outcome::ok(json!({
        "e0": e0,
        "e1_lower_bound": best.unwrap_or(e0),
        "no_negative_configuration": best.is_none(),
        "symmetric": symmetric,
        "general": general,
    })))
}

fn orbit_check(sys: &MagneticSystem, cfg: &RunConfig, art: &mut Artifacts) -> Result<Outcome, RunError> {
    let e = cfg.energy()?;
    let path = cfg
        .orbit_file
        .as_ref()
        .ok_or_else(|| ConfigError::Validation { key: "orbit.loop_file".into(), message: "required by this command".into() })?;
    let loop_err = |message: String| RunError::LoopFile { path: path.display().to_string(), message };
    let text = std::fs::read_to_string(path).map_err(|e| loop_err(e.to_string()))?;
    let rec: LoopRecord = serde_json::from_str(&text).map_err(|e| loop_err(e.to_string()))?;
    let fpl = rec.to_loop()?;
    let h = cfg.solver.flow_step;
    let before = certify_orbit(sys, e, &fpl, h)?;
    let refined = refine_orbit(sys, e, &fpl, h)?;
    let after = certify_orbit(sys, e, &refined, h)?;
    let mut rows: Vec<_> = loop_rows("input", &fpl).collect();
    rows.extend(loop_rows("refined", &refined));
    art.write("loops.csv", rows)?;
    Ok(Outcome::converged(
        after.is_certified(),
        json!({
            "energy": e,
            "input_report": report_json(&before),
            "refined": LoopRecord::plain(&refined),
            "refined_report": report_json(&after),
        }),
    ))
}
