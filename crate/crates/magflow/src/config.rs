//! Flat `section.key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Every key is optional
//! except `sigma.density`; see [`KEYS`] for the full list.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use magflow_core::system::{DEFAULT_CONE_DEPTH, DEFAULT_FLUX_DEPTH, DEFAULT_SWEEP_DEPTH};
use magflow_core::variational::{Label, SolverConfig};
use magflow_core::{Drift, Lagrangian, LagrangianKind, MagneticSystem, Metric, ScalarField, TwoForm, Vec3};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid value for `{key}`: {message}")]
    Validation { key: String, message: String },
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl ConfigError {
    fn invalid(key: &str, message: impl Into<String>) -> Self {
        ConfigError::Validation { key: key.to_string(), message: message.into() }
    }

    /// Key named by a validation error.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::Validation { key, .. } => Some(key),
            _ => None,
        }
    }
}

/// Recognised keys.
pub const KEYS: &[&str] = &[
    "metric.kind",
    "metric.conformal_exponent",
    "sigma.density",
    "lagrangian.kind",
    "lagrangian.potential",
    "lagrangian.drift",
    "lagrangian.fiber_poly",
    "lagrangian.extension_radius",
    "energy.value",
    "energy.grid",
    "energy.max",
    "energy.grid_step",
    "cfg.tol",
    "cfg.max_iter",
    "cfg.path_nodes",
    "cfg.loop_nodes",
    "cfg.newton_switch",
    "cfg.certify",
    "quadrature.flux_depth",
    "quadrature.sweep_depth",
    "quadrature.cone_depth",
    "flow.step",
    "flow.time",
    "flow.initial_q",
    "flow.initial_dir",
    "flow.csv_stride",
    "seed.kind",
    "seed.axis",
    "seed.radius",
    "labels.list",
    "labels.pair",
    "orbit.loop_file",
    "run.seed",
];

#[derive(Clone, Debug, PartialEq)]
pub enum SeedLoop {
    /// Westward equator with a third-harmonic bump.
    Equator,
    /// Equator with a bump of random amplitude, harmonic and phase.
    Random,
    /// Circle of angular radius `radius` about `axis`.
    Circle { axis: Vec3, radius: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSettings {
    pub step: f64,
    pub time: f64,
    pub initial_q: Vec3,
    /// Initial direction of motion; `None` draws one from the run seed.
    pub initial_dir: Option<Vec3>,
    pub csv_stride: usize,
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub metric: Metric,
    pub density: ScalarField,
    pub potential: ScalarField,
    pub drift: f64,
    pub fiber_poly: Option<Vec<f64>>,
    pub extension_radius: Option<f64>,
    pub energy: Option<f64>,
    pub energy_grid: Vec<f64>,
    pub energy_max: f64,
    pub grid_step: f64,
    pub solver: SolverConfig,
    pub flux_depth: u32,
    pub sweep_depth: u32,
    pub cone_depth: u32,
    pub flow: FlowSettings,
    pub seed: SeedLoop,
    pub labels: Vec<Label>,
    pub pair: (Label, Label),
    pub orbit_file: Option<PathBuf>,
    pub run_seed: u64,
    /// Keys as written in the file, for echoing in outputs.
    pub raw: BTreeMap<String, String>,
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let mut cfg = parse_config_str(&text)?;
    if let Some(f) = &cfg.orbit_file {
        if f.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.orbit_file = Some(dir.join(f));
            }
        }
    }
    Ok(cfg)
}

/// Values with the line they came from.
type Entries = BTreeMap<String, (usize, String)>;

pub fn parse_config_str(text: &str) -> Result<RunConfig, ConfigError> {
    let mut entries = Entries::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((k, v)) = content.split_once('=') else {
            return Err(ConfigError::Parse { line, message: format!("expected `key = value`, found `{content}`") });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || k.contains(char::is_whitespace) {
            return Err(ConfigError::Parse { line, message: format!("malformed key `{k}`") });
        }
        if v.is_empty() {
            return Err(ConfigError::Parse { line, message: format!("missing value for `{k}`") });
        }
        if !KEYS.contains(&k) {
            return Err(ConfigError::invalid(k, "unknown key"));
        }
        if entries.insert(k.to_string(), (line, v.to_string())).is_some() {
            return Err(ConfigError::invalid(k, "key given twice"));
        }
    }
    build(entries)
}

fn parse_err(line: usize, key: &str, what: &str, v: &str) -> ConfigError {
    ConfigError::Parse { line, message: format!("`{key}`: expected {what}, found `{v}`") }
}

fn number(line: usize, key: &str, v: &str) -> Result<f64, ConfigError> {
    v.parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| parse_err(line, key, "a finite number", v))
}

fn list(line: usize, key: &str, v: &str) -> Result<Vec<f64>, ConfigError> {
    v.split(',').map(|s| number(line, key, s.trim())).collect()
}

fn vec3(line: usize, key: &str, v: &str) -> Result<Vec3, ConfigError> {
    match list(line, key, v)?.as_slice() {
        [x, y, z] => Ok(Vec3::new(*x, *y, *z)),
        _ => Err(parse_err(line, key, "three comma-separated numbers", v)),
    }
}

fn label(line: usize, key: &str, s: &str) -> Result<Label, ConfigError> {
    let bad = || parse_err(line, key, "labels of the form m:n", s);
    let (m, n) = s.trim().split_once(':').ok_or_else(bad)?;
    let m = m.trim().parse::<usize>().map_err(|_| bad())?;
    let n = n.trim().parse::<i64>().map_err(|_| bad())?;
    Ok((m, n))
}

fn label_list(line: usize, key: &str, v: &str) -> Result<Vec<Label>, ConfigError> {
    v.split(',').map(|s| label(line, key, s)).collect()
}

/// `height(a, c)`, `constant(c)`, `zonal(c0, c1, ...)`, `linear(ax, ay, az, c)`
/// or a bare number.
pub fn parse_field(line: usize, key: &str, v: &str) -> Result<ScalarField, ConfigError> {
    if let Ok(c) = v.parse::<f64>() {
        return if c.is_finite() { Ok(ScalarField::Constant(c)) } else { Err(parse_err(line, key, "a field", v)) };
    }
    let bad = || parse_err(line, key, "a field such as height(1, 0.2)", v);
    let (name, rest) = v.split_once('(').ok_or_else(bad)?;
    let args = rest.strip_suffix(')').ok_or_else(bad)?;
    let args = list(line, key, args)?;
    match (name.trim(), args.as_slice()) {
        ("constant", [c]) => Ok(ScalarField::Constant(*c)),
        ("height", [a, c]) => Ok(ScalarField::Height { a: *a, c: *c }),
        ("zonal", k) if !k.is_empty() => Ok(ScalarField::ZonalPoly(k.to_vec())),
        ("linear", [ax, ay, az, c]) => Ok(ScalarField::Linear { a: Vec3::new(*ax, *ay, *az), c: *c }),
        _ => Err(bad()),
    }
}

struct Reader {
    entries: Entries,
}

impl Reader {
    fn get<T>(&self, key: &str, f: impl Fn(usize, &str, &str) -> Result<T, ConfigError>) -> Result<Option<T>, ConfigError> {
        self.entries.get(key).map(|(line, v)| f(*line, key, v)).transpose()
    }

    fn int(&self, key: &str) -> Result<Option<u64>, ConfigError> {
        self.get(key, |line, key, v| v.parse::<u64>().map_err(|_| parse_err(line, key, "a non-negative integer", v)))
    }

    fn text(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(_, v)| v.as_str())
    }
}

fn positive(key: &str, x: f64) -> Result<f64, ConfigError> {
    if x > 0.0 {
        Ok(x)
    } else {
        Err(ConfigError::invalid(key, format!("must be positive, got {x}")))
    }
}

fn build(entries: Entries) -> Result<RunConfig, ConfigError> {
    let raw = entries.iter().map(|(k, (_, v))| (k.clone(), v.clone())).collect();
    let r = Reader { entries };

    let metric = match r.text("metric.kind").unwrap_or("round") {
        "round" => {
            if r.text("metric.conformal_exponent").is_some() {
                return Err(ConfigError::invalid("metric.conformal_exponent", "only valid with metric.kind = conformal"));
            }
            Metric::Round
        }
        "conformal" => {
            let u = r
                .get("metric.conformal_exponent", parse_field)?
                .ok_or_else(|| ConfigError::invalid("metric.conformal_exponent", "required for a conformal metric"))?;
            Metric::Conformal(u)
        }
        other => return Err(ConfigError::invalid("metric.kind", format!("expected round or conformal, got `{other}`"))),
    };
    let density =
        r.get("sigma.density", parse_field)?.ok_or_else(|| ConfigError::invalid("sigma.density", "required"))?;
    let potential = r.get("lagrangian.potential", parse_field)?.unwrap_or_else(ScalarField::zero);
    let drift = r.get("lagrangian.drift", number)?.unwrap_or(0.0);
    let fiber_poly = match r.text("lagrangian.kind").unwrap_or("kinetic") {
        "kinetic" => {
            if r.text("lagrangian.fiber_poly").is_some() {
                return Err(ConfigError::invalid("lagrangian.fiber_poly", "only valid with lagrangian.kind = fiber_poly"));
            }
            None
        }
        "fiber_poly" => Some(
            r.get("lagrangian.fiber_poly", list)?
                .ok_or_else(|| ConfigError::invalid("lagrangian.fiber_poly", "required for lagrangian.kind = fiber_poly"))?,
        ),
        other => {
            return Err(ConfigError::invalid("lagrangian.kind", format!("expected kinetic or fiber_poly, got `{other}`")))
        }
    };
    let extension_radius = r.get("lagrangian.extension_radius", number)?;
    if let Some(x) = extension_radius {
        positive("lagrangian.extension_radius", x)?;
    }

    let energy = r.get("energy.value", number)?;
    let energy_grid = r.get("energy.grid", list)?.unwrap_or_default();
    if energy_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(ConfigError::invalid("energy.grid", "must be strictly increasing"));
    }
    let energy_max = positive("energy.max", r.get("energy.max", number)?.unwrap_or(1.0))?;
    let grid_step = positive("energy.grid_step", r.get("energy.grid_step", number)?.unwrap_or(0.01))?;

    let defaults = SolverConfig::default();
    let solver = SolverConfig {
        tol: positive("cfg.tol", r.get("cfg.tol", number)?.unwrap_or(defaults.tol))?,
        max_iter: r.int("cfg.max_iter")?.map(|v| v as usize).unwrap_or(defaults.max_iter),
        path_nodes: r.int("cfg.path_nodes")?.map(|v| v as usize).unwrap_or(defaults.path_nodes),
        loop_nodes: r.int("cfg.loop_nodes")?.map(|v| v as usize).unwrap_or(defaults.loop_nodes),
        flow_step: positive("flow.step", r.get("flow.step", number)?.unwrap_or(defaults.flow_step))?,
        newton_switch: positive(
            "cfg.newton_switch",
            r.get("cfg.newton_switch", number)?.unwrap_or(defaults.newton_switch),
        )?,
        certify: match r.text("cfg.certify") {
            None | Some("true") => true,
            Some("false") => false,
            Some(other) => return Err(ConfigError::invalid("cfg.certify", format!("expected true or false, got `{other}`"))),
        },
    };
    if solver.loop_nodes < 16 {
        return Err(ConfigError::invalid("cfg.loop_nodes", format!("must be at least 16, got {}", solver.loop_nodes)));
    }
    if solver.loop_nodes > 4096 {
        return Err(ConfigError::invalid("cfg.loop_nodes", format!("must be at most 4096, got {}", solver.loop_nodes)));
    }
    if solver.path_nodes < 8 {
        return Err(ConfigError::invalid("cfg.path_nodes", format!("must be at least 8, got {}", solver.path_nodes)));
    }
    if solver.max_iter == 0 {
        return Err(ConfigError::invalid("cfg.max_iter", "must be positive"));
    }
    if solver.flow_step > 0.1 {
        return Err(ConfigError::invalid("flow.step", "must be at most 0.1"));
    }

    let depth = |key: &str, default: u32| -> Result<u32, ConfigError> {
        let d = r.int(key)?.map(|v| v as u32).unwrap_or(default);
        if (1..=9).contains(&d) {
            Ok(d)
        } else {
            Err(ConfigError::invalid(key, format!("must lie in 1..=9, got {d}")))
        }
    };
    let flux_depth = depth("quadrature.flux_depth", DEFAULT_FLUX_DEPTH)?;
    let sweep_depth = depth("quadrature.sweep_depth", DEFAULT_SWEEP_DEPTH)?;
    let cone_depth = depth("quadrature.cone_depth", DEFAULT_CONE_DEPTH)?;

    let flow = FlowSettings {
        step: solver.flow_step,
        time: positive("flow.time", r.get("flow.time", number)?.unwrap_or(50.0))?,
        initial_q: r.get("flow.initial_q", vec3)?.unwrap_or(Vec3::X),
        initial_dir: r.get("flow.initial_dir", vec3)?,
        csv_stride: r.int("flow.csv_stride")?.map(|v| v as usize).unwrap_or(10).max(1),
    };
    if flow.initial_q.norm() < 1e-9 {
        return Err(ConfigError::invalid("flow.initial_q", "must be nonzero"));
    }
    if flow.step > flow.time {
        return Err(ConfigError::invalid("flow.step", "must not exceed flow.time"));
    }

    let seed = match r.text("seed.kind").unwrap_or("equator") {
        "equator" => SeedLoop::Equator,
        "random" => SeedLoop::Random,
        "circle" => {
            let axis = r.get("seed.axis", vec3)?.ok_or_else(|| ConfigError::invalid("seed.axis", "required for a circle seed"))?;
            if axis.norm() < 1e-9 {
                return Err(ConfigError::invalid("seed.axis", "must be nonzero"));
            }
            let radius =
                r.get("seed.radius", number)?.ok_or_else(|| ConfigError::invalid("seed.radius", "required for a circle seed"))?;
            if !(radius > 0.0 && radius < std::f64::consts::PI) {
                return Err(ConfigError::invalid("seed.radius", "must lie in (0, pi)"));
            }
            SeedLoop::Circle { axis, radius }
        }
        other => {
            return Err(ConfigError::invalid("seed.kind", format!("expected equator, random or circle, got `{other}`")))
        }
    };

    let labels = r.get("labels.list", label_list)?.unwrap_or_else(|| vec![(1, 0), (2, 0), (1, 1)]);
    let pair = match r.get("labels.pair", label_list)? {
        None => ((1, 0), (2, 0)),
        Some(v) if v.len() == 2 => (v[0], v[1]),
        Some(_) => return Err(ConfigError::invalid("labels.pair", "expected exactly two labels")),
    };
    for (m, _) in labels.iter().chain([&pair.0, &pair.1]) {
        if !(1..=8).contains(m) {
            return Err(ConfigError::invalid("labels.list", format!("iterate count {m} outside 1..=8")));
        }
    }

    Ok(RunConfig {
        metric,
        density,
        potential,
        drift,
        fiber_poly,
        extension_radius,
        energy,
        energy_grid,
        energy_max,
        grid_step,
        solver,
        flux_depth,
        sweep_depth,
        cone_depth,
        flow,
        seed,
        labels,
        pair,
        orbit_file: r.text("orbit.loop_file").map(PathBuf::from),
        run_seed: r.int("run.seed")?.unwrap_or(0),
        raw,
    })
}

impl RunConfig {
    /// Target energy, required by most commands.
    pub fn energy(&self) -> Result<f64, ConfigError> {
        self.energy.ok_or_else(|| ConfigError::invalid("energy.value", "required by this command"))
    }

    /// Largest energy the run will touch; sizes the fiber extension.
    fn energy_ceiling(&self) -> f64 {
        self.energy_grid.iter().copied().chain(self.energy).chain([self.energy_max]).fold(0.0, f64::max)
    }

    pub fn system(&self) -> Result<MagneticSystem, ConfigError> {
        let mut l = Lagrangian::kinetic(self.metric.clone(), self.potential.clone());
        if self.drift != 0.0 {
            l = l.with_drift(Drift::Rotation(self.drift));
        }
        if let Some(c) = &self.fiber_poly {
            l = l.with_kind(LagrangianKind::FiberPolynomial(c.clone())).with_default_extension(self.energy_ceiling());
        }
        if let Some(r) = self.extension_radius {
            l.extension_radius = r;
        }
        let sigma = TwoForm::new(self.density.clone(), self.metric.clone());
        let mut sys = MagneticSystem::with_depths(sigma, l, self.flux_depth, self.sweep_depth)
            .map_err(|e| ConfigError::invalid("lagrangian.kind", e.to_string()))?;
        sys.cone_depth = self.cone_depth;
        Ok(sys)
    }
}
