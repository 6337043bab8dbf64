//! Flat `key = value` experiment files with dotted keys.
//!
//! Parsing never stops at the first problem: every diagnostic carries the
//! line it refers to (or none for a missing key) so a file can be fixed in
//! one pass.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;

use nalgebra::DMatrix;
use turnpike_core::system::{preset, BoxSet, ScalarAffine, PRESET_NAMES};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Diagnostic {
    pub line: Option<usize>,
    pub key: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "line {line}: {}: {}", self.key, self.message),
            None => write!(f, "{}: {}", self.key, self.message),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Solve,
    TurnpikeSweep,
    Dissipativity,
    LqClassify,
    Mpc,
    MpcCompare,
}

impl Task {
    pub const NAMES: [&'static str; 6] = ["solve", "turnpike-sweep", "dissipativity", "lq-classify", "mpc", "mpc-compare"];

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "solve" => Self::Solve,
            "turnpike-sweep" => Self::TurnpikeSweep,
            "dissipativity" => Self::Dissipativity,
            "lq-classify" => Self::LqClassify,
            "mpc" => Self::Mpc,
            "mpc-compare" => Self::MpcCompare,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SystemSpec {
    Preset(String),
    Affine { params: ScalarAffine, state_box: (f64, f64), control_box: (f64, f64) },
    PowerGrowth { scale: f64, exponent: f64, state_box: (f64, f64), control_box: (f64, f64) },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub states: usize,
    pub controls: usize,
    pub nearest: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TerminalSpec {
    None,
    /// Point set at the equilibrium state.
    Equilibrium,
    Point(Vec<f64>),
    Ball { center: Vec<f64>, radius: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub enum StorageSpec {
    Zero,
    Linear { p: Vec<f64>, bound: f64 },
    Quadratic { m: Vec<Vec<f64>>, p: Vec<f64>, bound: f64 },
    /// Linear storage from the equilibrium multiplier.
    Multiplier,
    /// Available storage computed on the grid.
    Available { horizon: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquilibriumSpec {
    pub state: Vec<f64>,
    pub control: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LqSpec {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub bounded: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TaskParams {
    Solve { x0: Vec<f64>, horizon: usize, terminal: TerminalSpec },
    TurnpikeSweep { horizons: Vec<usize>, initials: Vec<Vec<f64>>, epsilon: Option<f64>, terminal: TerminalSpec },
    Dissipativity { storage: StorageSpec, alpha: Option<(f64, f64)>, samples: (usize, usize) },
    LqClassify(LqSpec),
    Mpc { x0: Vec<f64>, horizon: usize, steps: usize, terminal: TerminalSpec, warm_start: bool },
    MpcCompare { x0: Vec<f64>, horizons: Vec<usize>, steps: usize, terminal: TerminalSpec, warm_start: bool },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub task: Task,
    /// Absent only for `lq-classify`.
    pub system: Option<SystemSpec>,
    pub grid: GridSpec,
    pub equilibrium: Option<EquilibriumSpec>,
    pub output: Option<PathBuf>,
    pub params: TaskParams,
}

struct Entry {
    value: String,
    line: usize,
}

/// Key lookup that records which keys were consumed and every problem seen.
struct Reader {
    entries: BTreeMap<String, Entry>,
    used: BTreeSet<String>,
    diags: Vec<Diagnostic>,
}

const DEFAULT_STATE_POINTS: usize = 2001;
const DEFAULT_CONTROL_POINTS: usize = 601;
const DEFAULT_SAMPLE_POINTS: usize = 201;
const DEFAULT_STORAGE_HORIZON: usize = 200;

impl Reader {
    fn error(&mut self, key: &str, message: impl Into<String>) {
        let line = self.entries.get(key).map(|e| e.line);
        self.diags.push(Diagnostic { line, key: key.to_string(), message: message.into() });
    }

    fn raw(&mut self, key: &str) -> Option<String> {
        let value = self.entries.get(key)?.value.clone();
        self.used.insert(key.to_string());
        Some(value)
    }

    fn required(&mut self, key: &str) -> Option<String> {
        let v = self.raw(key);
        if v.is_none() {
            self.error(key, "missing required key");
        }
        v
    }

    fn parsed<T>(&mut self, key: &str, value: Option<String>, parse: impl Fn(&str) -> Result<T, String>) -> Option<T> {
        match parse(value.as_deref()?) {
            Ok(v) => Some(v),
            Err(msg) => {
                self.error(key, msg);
                None
            }
        }
    }

    fn opt<T>(&mut self, key: &str, parse: impl Fn(&str) -> Result<T, String>) -> Option<T> {
        let v = self.raw(key);
        self.parsed(key, v, parse)
    }

    fn req<T>(&mut self, key: &str, parse: impl Fn(&str) -> Result<T, String>) -> Option<T> {
        let v = self.required(key);
        self.parsed(key, v, parse)
    }
}

fn number(s: &str) -> Result<f64, String> {
    let v: f64 = s.trim().parse().map_err(|_| format!("`{}` is not a number", s.trim()))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("`{}` is not finite", s.trim()))
    }
}

fn count(s: &str) -> Result<usize, String> {
    s.trim().parse().map_err(|_| format!("`{}` is not a nonnegative integer", s.trim()))
}

fn boolean(s: &str) -> Result<bool, String> {
    match s.trim() {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(format!("`{other}` is not `true` or `false`")),
    }
}

/// `a, b, c`
fn vector(s: &str) -> Result<Vec<f64>, String> {
    let v: Vec<f64> = s.split(',').map(number).collect::<Result<_, _>>()?;
    if v.is_empty() {
        return Err("empty vector".into());
    }
    Ok(v)
}

/// `lo, hi`
fn interval(s: &str) -> Result<(f64, f64), String> {
    match *vector(s)?.as_slice() {
        [lo, hi] if lo <= hi => Ok((lo, hi)),
        [lo, hi] => Err(format!("lower end {lo} exceeds upper end {hi}")),
        _ => Err("expected `lo, hi`".into()),
    }
}

/// Vectors separated by `;`.
fn vector_list(s: &str) -> Result<Vec<Vec<f64>>, String> {
    s.split(';').filter(|p| !p.trim().is_empty()).map(vector).collect()
}

/// Rows separated by `;`, entries by `,`.
fn matrix(s: &str) -> Result<DMatrix<f64>, String> {
    let rows = vector_list(s)?;
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || rows.iter().any(|r| r.len() != ncols) {
        return Err("rows must be nonempty and of equal length".into());
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// `a..b`, `a..b step s`, or `t1, t2, …`.
fn horizon_list(s: &str) -> Result<Vec<usize>, String> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(Vec::new());
    }
    if let Some((range, rest)) = s.split_once("..") {
        let lo = count(range)?;
        let (hi, step) = match rest.split_once("step") {
            Some((hi, step)) => (count(hi)?, count(step)?),
            None => (count(rest)?, 1),
        };
        if step == 0 {
            return Err("step must be positive".into());
        }
        if lo > hi {
            return Err(format!("empty range {lo}..{hi}"));
        }
        return Ok((lo..=hi).step_by(step).collect());
    }
    s.split(',').map(count).collect()
}

/// Splits text into entries, reporting malformed and duplicate lines.
fn tokenize(text: &str) -> (BTreeMap<String, Entry>, Vec<Diagnostic>) {
    let mut entries = BTreeMap::new();
    let mut diags = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            diags.push(Diagnostic { line: Some(line), key: content.to_string(), message: "expected `key = value`".into() });
            continue;
        };
        let key = key.trim();
        let valid = !key.is_empty()
            && key.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || "._-".contains(c));
        if !valid {
            diags.push(Diagnostic { line: Some(line), key: key.to_string(), message: "invalid key".into() });
            continue;
        }
        if let Some(prev) = entries.get(key).map(|e: &Entry| e.line) {
            diags.push(Diagnostic {
                line: Some(line),
                key: key.to_string(),
                message: format!("duplicate key (first set on line {prev})"),
            });
            continue;
        }
        entries.insert(key.to_string(), Entry { value: value.trim().to_string(), line });
    }
    (entries, diags)
}

/// Parses and validates; `Err` holds every diagnostic found.
pub fn parse(text: &str) -> Result<ExperimentConfig, Vec<Diagnostic>> {
    let (entries, diags) = tokenize(text);
    let mut r = Reader { entries, used: BTreeSet::new(), diags };
    let config = read(&mut r);
    // Without a task the expected keys are unknown, so stray keys are not flagged.
    let task_failed = r.diags.iter().any(|d| d.key == "task");
    let unknown: Vec<String> = r.entries.keys().filter(|k| !r.used.contains(*k)).cloned().collect();
    if !task_failed {
        for key in unknown {
            r.error(&key, "unknown key for this task");
        }
    }
    match config {
        Some(c) if r.diags.is_empty() => Ok(c),
        _ => {
            r.diags.sort_by_key(|d| (d.line.unwrap_or(0), d.key.clone()));
            Err(r.diags)
        }
    }
}

/// Diagnostics only; empty iff the config is runnable.
pub fn validate(text: &str) -> Vec<Diagnostic> {
    parse(text).err().unwrap_or_default()
}

fn read(r: &mut Reader) -> Option<ExperimentConfig> {
    let task = r.req("task", |s| Task::parse(s).ok_or_else(|| format!("unknown task `{s}`; valid tasks: {}", Task::NAMES.join(", "))));
    let output = r.opt("output.dir", |s| Ok(PathBuf::from(s)));
    let task = task?;

    if task == Task::LqClassify {
        let params = read_lq(r).map(TaskParams::LqClassify);
        let grid = GridSpec { states: DEFAULT_STATE_POINTS, controls: DEFAULT_CONTROL_POINTS, nearest: false };
        return Some(ExperimentConfig { task, system: None, grid, equilibrium: None, output, params: params? });
    }

    let system = read_system(r);
    let grid = read_grid(r);
    let equilibrium = read_equilibrium(r);
    let bounds = system.as_ref().and_then(state_bounds);
    let params = match task {
        Task::Solve => {
            let x0 = read_state(r, "x0", bounds);
            let horizon = read_horizon(r, "horizon");
            let terminal = read_terminal(r, &equilibrium);
            Some(TaskParams::Solve { x0: x0?, horizon: horizon?, terminal: terminal? })
        }
        Task::TurnpikeSweep => {
            let horizons = read_horizons(r);
            let initials = r.req("initials", vector_list);
            if let (Some(list), Some(b)) = (&initials, bounds) {
                if list.is_empty() {
                    r.error("initials", "initials must be nonempty");
                }
                for x in list {
                    check_in_box(r, "initials", x, b);
                }
            }
            let epsilon = r.opt("epsilon", number);
            if epsilon.is_some_and(|e| e <= 0.0) {
                r.error("epsilon", "epsilon must be positive");
            }
            let terminal = read_terminal(r, &equilibrium);
            Some(TaskParams::TurnpikeSweep { horizons: horizons?, initials: initials?, epsilon, terminal: terminal? })
        }
        Task::Dissipativity => {
            let storage = read_storage(r);
            let c = r.opt("alpha.c", number);
            let q = r.opt("alpha.q", number).unwrap_or(2.0);
            if c.is_some_and(|c| c <= 0.0) || q <= 0.0 {
                r.error("alpha.c", "alpha needs c > 0 and q > 0");
            }
            let states = r.opt("samples.states", count).unwrap_or(DEFAULT_SAMPLE_POINTS);
            let controls = r.opt("samples.controls", count).unwrap_or(DEFAULT_SAMPLE_POINTS);
            if states < 2 || controls < 2 {
                r.error("samples.states", "sample grid sizes must be at least 2");
            }
            Some(TaskParams::Dissipativity { storage: storage?, alpha: c.map(|c| (c, q)), samples: (states, controls) })
        }
        Task::Mpc | Task::MpcCompare => {
            let x0 = read_state(r, "x0", bounds);
            let steps = r.req("steps", count);
            if steps == Some(0) {
                r.error("steps", "steps must be at least 1");
            }
            let terminal = read_terminal(r, &equilibrium);
            let warm_start = r.opt("mpc.warm_start", boolean).unwrap_or(false);
            if task == Task::Mpc {
                let horizon = read_horizon(r, "horizon");
                Some(TaskParams::Mpc { x0: x0?, horizon: horizon?, steps: steps?, terminal: terminal?, warm_start })
            } else {
                let horizons = read_horizons(r);
                Some(TaskParams::MpcCompare { x0: x0?, horizons: horizons?, steps: steps?, terminal: terminal?, warm_start })
            }
        }
        Task::LqClassify => unreachable!("handled above"),
    };
    Some(ExperimentConfig { task, system: Some(system?), grid: grid?, equilibrium, output, params: params? })
}

fn state_bounds(spec: &SystemSpec) -> Option<(f64, f64)> {
    match spec {
        SystemSpec::Preset(name) => {
            let sys = preset(name).ok()?;
            Some((sys.state_box().lower()[0], sys.state_box().upper()[0]))
        }
        SystemSpec::Affine { state_box, .. } | SystemSpec::PowerGrowth { state_box, .. } => Some(*state_box),
    }
}

fn check_in_box(r: &mut Reader, key: &str, x: &[f64], (lo, hi): (f64, f64)) {
    if x.len() != 1 {
        r.error(key, format!("expected a scalar state, got {} components", x.len()));
    } else if !(x[0] >= lo && x[0] <= hi) {
        r.error(key, format!("state {} lies outside the state box [{lo}, {hi}]", x[0]));
    }
}

fn read_state(r: &mut Reader, key: &str, bounds: Option<(f64, f64)>) -> Option<Vec<f64>> {
    let x = r.req(key, vector)?;
    if let Some(b) = bounds {
        check_in_box(r, key, &x, b);
    }
    Some(x)
}

fn read_horizon(r: &mut Reader, key: &str) -> Option<usize> {
    let t = r.req(key, count)?;
    if t == 0 {
        r.error(key, "horizon must be at least 1");
    }
    Some(t)
}

fn read_horizons(r: &mut Reader) -> Option<Vec<usize>> {
    let hs = r.req("horizons", horizon_list)?;
    if hs.is_empty() {
        r.error("horizons", "horizons must be nonempty");
    } else if hs.contains(&0) {
        r.error("horizons", "horizons must be at least 1");
    }
    Some(hs)
}

fn read_system(r: &mut Reader) -> Option<SystemSpec> {
    if let Some(name) = r.raw("system.preset") {
        if r.entries.contains_key("system.family") {
            r.error("system.family", "give either system.preset or system.family, not both");
        }
        if preset(&name).is_err() {
            r.error("system.preset", format!("unknown preset `{name}`; valid presets: {}", PRESET_NAMES.join(", ")));
            return None;
        }
        return Some(SystemSpec::Preset(name));
    }
    let family = r.raw("system.family");
    let Some(family) = family else {
        r.error("system.preset", "missing required key (or give system.family)");
        return None;
    };
    let state_box = r.req("system.state_box", interval);
    let control_box = r.req("system.control_box", interval);
    match family.as_str() {
        "affine" => {
            let mut get = |k: &str, default: f64| r.opt(&format!("system.{k}"), number).unwrap_or(default);
            let params = ScalarAffine {
                a: get("a", 1.0),
                b: get("b", 1.0),
                c: get("c", 0.0),
                q2: get("q2", 0.0),
                r2: get("r2", 0.0),
                q1: get("q1", 0.0),
                r1: get("r1", 0.0),
            };
            Some(SystemSpec::Affine { params, state_box: state_box?, control_box: control_box? })
        }
        "power-growth" => {
            let scale = r.req("system.scale", number);
            let exponent = r.req("system.exponent", number);
            if scale.is_some_and(|s| s <= 0.0) {
                r.error("system.scale", "scale must be positive");
            }
            Some(SystemSpec::PowerGrowth {
                scale: scale?,
                exponent: exponent?,
                state_box: state_box?,
                control_box: control_box?,
            })
        }
        other => {
            r.error("system.family", format!("unknown family `{other}`; valid families: affine, power-growth"));
            None
        }
    }
}

fn read_grid(r: &mut Reader) -> Option<GridSpec> {
    let states = r.opt("grid.states", count).unwrap_or(DEFAULT_STATE_POINTS);
    let controls = r.opt("grid.controls", count).unwrap_or(DEFAULT_CONTROL_POINTS);
    let nearest = r
        .opt("grid.interpolation", |s| match s {
            "multilinear" => Ok(false),
            "nearest" => Ok(true),
            other => Err(format!("unknown interpolation `{other}`; valid: multilinear, nearest")),
        })
        .unwrap_or(false);
    let mut ok = true;
    for (key, n) in [("grid.states", states), ("grid.controls", controls)] {
        if n < 2 {
            r.error(key, "grid sizes must be at least 2");
            ok = false;
        }
    }
    ok.then_some(GridSpec { states, controls, nearest })
}

fn read_equilibrium(r: &mut Reader) -> Option<EquilibriumSpec> {
    let state = r.opt("equilibrium.state", vector);
    let control = r.opt("equilibrium.control", vector);
    match (state, control) {
        (Some(state), Some(control)) => Some(EquilibriumSpec { state, control }),
        (None, None) => None,
        _ => {
            r.error("equilibrium.state", "equilibrium.state and equilibrium.control go together");
            None
        }
    }
}

fn read_terminal(r: &mut Reader, eq: &Option<EquilibriumSpec>) -> Option<TerminalSpec> {
    let mode = r.opt("terminal.mode", |s| Ok(s.to_string())).unwrap_or_else(|| "none".into());
    match mode.as_str() {
        "none" => Some(TerminalSpec::None),
        "equilibrium" => Some(TerminalSpec::Equilibrium),
        "point" => Some(TerminalSpec::Point(r.req("terminal.state", vector)?)),
        "ball" => {
            let center = r.opt("terminal.state", vector);
            let radius = r.req("terminal.radius", number)?;
            if radius < 0.0 {
                r.error("terminal.radius", "radius must be nonnegative");
            }
            let center = match center {
                Some(c) => c,
                None => match eq {
                    Some(eq) => eq.state.clone(),
                    None => {
                        r.error("terminal.state", "a ball needs terminal.state or equilibrium.state");
                        return None;
                    }
                },
            };
            Some(TerminalSpec::Ball { center, radius })
        }
        other => {
            r.error("terminal.mode", format!("unknown terminal mode `{other}`; valid: none, equilibrium, point, ball"));
            None
        }
    }
}

fn read_storage(r: &mut Reader) -> Option<StorageSpec> {
    let kind = r.req("storage.kind", |s| Ok(s.to_string()))?;
    let bound = |r: &mut Reader| r.opt("storage.bound", number).unwrap_or(0.0);
    match kind.as_str() {
        "zero" => Some(StorageSpec::Zero),
        "linear" => {
            let p = r.req("storage.p", vector);
            let bound = bound(r);
            Some(StorageSpec::Linear { p: p?, bound })
        }
        "quadratic" => {
            let m = r.req("storage.m", vector_list);
            let p = r.opt("storage.p", vector);
            let bound = bound(r);
            let m = m?;
            let p = p.unwrap_or_else(|| vec![0.0; m.len()]);
            if m.iter().any(|row| row.len() != m.len()) || p.len() != m.len() {
                r.error("storage.m", "storage.m must be square and match storage.p");
            }
            Some(StorageSpec::Quadratic { m, p, bound })
        }
        "multiplier" => Some(StorageSpec::Multiplier),
        "available" => {
            let horizon = r.opt("storage.horizon", count).unwrap_or(DEFAULT_STORAGE_HORIZON);
            Some(StorageSpec::Available { horizon })
        }
        other => {
            r.error(
                "storage.kind",
                format!("unknown storage kind `{other}`; valid: zero, linear, quadratic, multiplier, available"),
            );
            None
        }
    }
}

fn read_lq(r: &mut Reader) -> Option<LqSpec> {
    let a = r.req("lq.a", matrix);
    let b = r.req("lq.b", matrix);
    let q = r.req("lq.q", matrix);
    let rr = r.req("lq.r", matrix);
    let mode = r.opt("lq.mode", |s| Ok(s.to_string())).unwrap_or_else(|| "unconstrained".into());
    let bounded = match mode.as_str() {
        "unconstrained" => None,
        "bounded_interior" => {
            let lower = r.req("lq.lower", vector);
            let upper = r.req("lq.upper", vector);
            Some((lower?, upper?))
        }
        other => {
            r.error("lq.mode", format!("unknown mode `{other}`; valid: unconstrained, bounded_interior"));
            return None;
        }
    };
    let (a, b, q, rr) = (a?, b?, q?, rr?);
    let n = a.nrows();
    let m = b.ncols();
    let shapes = [
        ("lq.a", a.shape() == (n, n)),
        ("lq.b", b.nrows() == n),
        ("lq.q", q.shape() == (n, n)),
        ("lq.r", rr.shape() == (m, m)),
    ];
    for (key, ok) in shapes {
        if !ok {
            r.error(key, format!("shape does not fit a system with {n} states and {m} inputs"));
        }
    }
    if let Some((lo, hi)) = &bounded {
        if lo.len() != n || hi.len() != n {
            r.error("lq.lower", format!("bounds need {n} components"));
        }
    }
    Some(LqSpec { a, b, q, r: rr, bounded })
}

impl SystemSpec {
    pub fn build(&self) -> turnpike_core::Result<turnpike_core::system::ControlSystem> {
        match self {
            Self::Preset(name) => preset(name),
            Self::Affine { params, state_box, control_box } => Ok(params.clone().into_system(
                "affine",
                BoxSet::interval(state_box.0, state_box.1)?,
                BoxSet::interval(control_box.0, control_box.1)?,
            )),
            Self::PowerGrowth { scale, exponent, state_box, control_box } => {
                Ok(turnpike_core::system::power_growth(
                    "power-growth",
                    *scale,
                    *exponent,
                    BoxSet::interval(state_box.0, state_box.1)?,
                    BoxSet::interval(control_box.0, control_box.1)?,
                ))
            }
        }
    }
}
