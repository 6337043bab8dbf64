//! Executes a validated experiment and writes its artifacts.
//!
//! Every file is written exactly once by one writer. The manifest is built
//! last from the directory contents, so it lists everything present.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde_json::json;
use sha2::{Digest, Sha256};

use turnpike_core::dissipativity::{
    available_storage, check_strict_dissipativity, check_strict_dissipativity_with, fit_alpha, offer_linear_storage,
    optimal_equilibrium, CheckOptions, StorageCandidate, SupplyRate,
};
use turnpike_core::dp::{DpSolver, TerminalConditions, TerminalSet};
use turnpike_core::export::{fmt_num, json_string, solution_json, trajectory_csv, value_table_csv, write_text, Csv};
use turnpike_core::grid::{Grid, Interpolation};
use turnpike_core::lq::{lq_strict_dissipativity, ConstraintMode, Criterion, LqProblem};
use turnpike_core::mpc::{mpc_run, performance, write_run, MpcConfig, PerformanceTable};
use turnpike_core::system::{ComparisonFunction, ControlSystem, Equilibrium};
use turnpike_core::turnpike::{default_epsilon, turnpike_constant};
use turnpike_core::{Error, Result};

use crate::config::{ExperimentConfig, LqSpec, StorageSpec, TaskParams, TerminalSpec};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
    pub path: PathBuf,
}

fn run_label(parts: &[(&str, String)]) -> String {
    parts.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(", ")
}

fn tag<T>(label: String, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        tagged @ Error::Run { .. } => tagged,
        other => Error::Run { run: label, source: Box::new(other) },
    })
}

fn fmt_vec(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Runs `config`, writing into `out`, and returns the manifest written last.
pub fn run_experiment(config: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    fs::create_dir_all(out)?;
    if let TaskParams::LqClassify(lq) = &config.params {
        run_lq(lq, out)?;
        return write_manifest(out, "lq-classify");
    }
    let system = config.system.as_ref().expect("validated config has a system").build()?;
    let grid = Grid::uniform(&system, config.grid.states, config.grid.controls)?;
    let interpolation = if config.grid.nearest { Interpolation::Nearest } else { Interpolation::Multilinear };
    let ctx = Context { config, system, grid, interpolation };

    let task = match &config.params {
        TaskParams::Solve { x0, horizon, terminal } => {
            ctx.run_solve(x0, *horizon, terminal, out)?;
            "solve"
        }
        TaskParams::TurnpikeSweep { horizons, initials, epsilon, terminal } => {
            ctx.run_sweep(horizons, initials, *epsilon, terminal, out)?;
            "turnpike-sweep"
        }
        TaskParams::Dissipativity { storage, alpha, samples } => {
            ctx.run_dissipativity(storage, *alpha, *samples, out)?;
            "dissipativity"
        }
        TaskParams::Mpc { x0, horizon, steps, terminal, warm_start } => {
            ctx.run_mpc(x0, *horizon, *steps, terminal, *warm_start, out)?;
            "mpc"
        }
        TaskParams::MpcCompare { x0, horizons, steps, terminal, warm_start } => {
            ctx.run_mpc_compare(x0, horizons, *steps, terminal, *warm_start, out)?;
            "mpc-compare"
        }
        TaskParams::LqClassify(_) => unreachable!("handled above"),
    };
    write_manifest(out, task)
}

struct Context<'a> {
    config: &'a ExperimentConfig,
    system: ControlSystem,
    grid: Grid,
    interpolation: Interpolation,
}

impl Context<'_> {
    fn equilibrium(&self) -> Result<Equilibrium> {
        match &self.config.equilibrium {
            Some(eq) => Ok(Equilibrium::new(&self.system, eq.state.clone(), eq.control.clone())),
            None => optimal_equilibrium(&self.system, &self.grid),
        }
    }

    fn terminal(&self, spec: &TerminalSpec) -> Result<TerminalConditions> {
        Ok(match spec {
            TerminalSpec::None => TerminalConditions::none(),
            TerminalSpec::Equilibrium => TerminalConditions::equilibrium(self.equilibrium()?.state),
            TerminalSpec::Point(state) => TerminalConditions::none().with_set(TerminalSet::Point { state: state.clone() }),
            TerminalSpec::Ball { center, radius } => {
                TerminalConditions::none().with_set(TerminalSet::Ball { center: center.clone(), radius: *radius })
            }
        })
    }

    fn solver(&self) -> Result<DpSolver> {
        DpSolver::with_interpolation(&self.system, &self.grid, self.interpolation)
    }

    fn run_solve(&self, x0: &[f64], horizon: usize, terminal: &TerminalSpec, out: &Path) -> Result<()> {
        let label = run_label(&[("x0", fmt_vec(x0)), ("T", horizon.to_string())]);
        let terminal = tag(label.clone(), self.terminal(terminal))?;
        let solver = self.solver()?;
        let table = tag(label.clone(), solver.value_table(horizon, &terminal))?;
        let sol = tag(label, solver.solve_with_table(x0, horizon, &table, &terminal))?;
        write_text(&out.join("trajectory.csv"), &trajectory_csv(&sol.trajectory))?;
        write_text(&out.join("value_table.csv"), &value_table_csv(&table))?;
        write_text(&out.join("solution.json"), &json_string(&solution_json(&sol)))
    }

    fn run_sweep(
        &self,
        horizons: &[usize],
        initials: &[Vec<f64>],
        epsilon: Option<f64>,
        terminal: &TerminalSpec,
        out: &Path,
    ) -> Result<()> {
        let eq = self.equilibrium()?;
        let terminal = self.terminal(terminal)?;
        let eps = epsilon.unwrap_or_else(|| default_epsilon(&self.system));
        let sweep = turnpike_constant(&self.system, &eq.state, eps, horizons, initials, &self.grid, &terminal)?;
        write_text(&out.join("turnpike.csv"), &sweep.to_csv())?;
        for (i, x0) in initials.iter().enumerate() {
            for row in sweep.rows_for(x0) {
                let name = format!("trajectories/x0_{i}_T{:03}.csv", row.horizon);
                write_text(&out.join(name), &trajectory_csv(&row.trajectory))?;
            }
        }
        let summary = json!({
            "epsilon": fmt_num(eps),
            "equilibrium": eq.state.iter().map(|v| fmt_num(*v)).collect::<Vec<_>>(),
            "max_q": sweep.max_q,
            "attained_at_smallest": sweep.attained_at_smallest,
            "constant_in_horizon": sweep.constant_in_horizon,
        });
        write_text(&out.join("summary.json"), &json_string(&summary))
    }

    fn run_dissipativity(
        &self,
        spec: &StorageSpec,
        alpha: Option<(f64, f64)>,
        samples: (usize, usize),
        out: &Path,
    ) -> Result<()> {
        let eq = self.equilibrium()?;
        let alpha = alpha.map(|(c, q)| ComparisonFunction::power(c, q)).transpose()?;
        let (storage, kind, check_grid, options) = match spec {
            StorageSpec::Zero => (StorageCandidate::zero(self.system.state_dim()), "zero", None, None),
            StorageSpec::Linear { p, bound } => (StorageCandidate::linear(p.clone(), *bound), "linear", None, None),
            StorageSpec::Quadratic { m, p, bound } => {
                (StorageCandidate::quadratic(m.clone(), p.clone(), *bound), "quadratic", None, None)
            }
            StorageSpec::Multiplier => {
                let s = offer_linear_storage(&self.system, &eq).ok_or_else(|| {
                    Error::Precondition("no multiplier storage: the equilibrium carries no usable multiplier".into())
                })?;
                (s, "multiplier", None, None)
            }
            StorageSpec::Available { horizon } => {
                let supply = SupplyRate::from_equilibrium(&eq);
                let table = available_storage(&self.system, &supply, alpha.as_ref(), &self.grid, *horizon)?;
                write_text(&out.join("storage.csv"), &table.to_csv())?;
                let status = json!({
                    "status": format!("{:?}", table.status),
                    "iterations": table.iterations,
                    "last_change": fmt_num(table.last_change),
                    "min": fmt_num(table.min),
                    "max": fmt_num(table.max),
                });
                write_text(&out.join("storage.json"), &json_string(&status))?;
                // Node values are only meaningful on the grid they were built on.
                let options = CheckOptions { tolerance: 1e-6, finite_storage_only: true, ..CheckOptions::default() };
                (table.candidate(), "available", Some(self.grid.clone()), Some(options))
            }
        };
        let samples = match check_grid {
            Some(g) => g,
            None => Grid::uniform(&self.system, samples.0, samples.1)?,
        };
        let alpha = match alpha {
            Some(a) => Some(a),
            None => fit_alpha(&self.system, &storage, &eq, &samples, 2.0)?,
        };
        let report = match options {
            Some(o) => check_strict_dissipativity_with(&self.system, &storage, alpha.as_ref(), &eq, &samples, o)?,
            None => check_strict_dissipativity(&self.system, &storage, alpha.as_ref(), &eq, &samples)?,
        };
        let doc = json!({
            "equilibrium": {
                "state": eq.state.iter().map(|v| fmt_num(*v)).collect::<Vec<_>>(),
                "control": eq.control.iter().map(|v| fmt_num(*v)).collect::<Vec<_>>(),
                "cost": fmt_num(eq.cost),
            },
            "storage": kind,
            "lower_bound": fmt_num(storage.lower_bound),
            "report": report.to_json(),
        });
        write_text(&out.join("dissipativity.json"), &json_string(&doc))
    }

    fn mpc_config(&self, horizon: usize, steps: usize, terminal: &TerminalConditions, warm: bool) -> MpcConfig {
        let mut cfg = MpcConfig::new(horizon, steps, terminal.clone(), self.grid.clone());
        cfg.warm_start = warm;
        cfg
    }

    fn one_mpc(&self, x0: &[f64], horizon: usize, steps: usize, terminal: &TerminalConditions, warm: bool, dir: &Path) -> Result<PerformanceTable> {
        let label = run_label(&[("x0", fmt_vec(x0)), ("T", horizon.to_string()), ("S", steps.to_string())]);
        let run = tag(label.clone(), mpc_run(&self.system, x0, &self.mpc_config(horizon, steps, terminal, warm)))?;
        let s_values: Vec<usize> = (1..=steps).collect();
        let perf = tag(label, performance(&self.system, &run, &s_values))?;
        write_run(dir, &run, &perf)?;
        Ok(perf)
    }

    fn run_mpc(&self, x0: &[f64], horizon: usize, steps: usize, terminal: &TerminalSpec, warm: bool, out: &Path) -> Result<()> {
        let terminal = self.terminal(terminal)?;
        let perf = self.one_mpc(x0, horizon, steps, &terminal, warm, out)?;
        let last = perf.rows.last().expect("steps >= 1");
        let summary = json!({
            "horizon": horizon,
            "steps": steps,
            "J_S": fmt_num(last.j_s),
            "J_S_over_S": fmt_num(last.average),
            "slope": slope_window(&perf, steps).map(fmt_num),
        });
        write_text(&out.join("summary.json"), &json_string(&summary))
    }

    fn run_mpc_compare(
        &self,
        x0: &[f64],
        horizons: &[usize],
        steps: usize,
        terminal: &TerminalSpec,
        warm: bool,
        out: &Path,
    ) -> Result<()> {
        let terminal = self.terminal(terminal)?;
        let tables: Vec<PerformanceTable> = horizons
            .par_iter()
            .map(|&h| self.one_mpc(x0, h, steps, &terminal, warm, &out.join(format!("T_{h}"))))
            .collect::<Result<_>>()?;
        let mut header = vec!["S".to_string()];
        for h in horizons {
            header.push(format!("J_S_T{h}"));
            header.push(format!("J_S_over_S_T{h}"));
        }
        let mut csv = Csv::new(&header);
        for s in 0..steps {
            let mut row = vec![(s + 1).to_string()];
            for t in &tables {
                row.push(fmt_num(t.rows[s].j_s));
                row.push(fmt_num(t.rows[s].average));
            }
            csv.raw_row(row);
        }
        write_text(&out.join("comparison.csv"), csv.as_str())?;
        let slopes: Vec<_> = horizons
            .iter()
            .zip(&tables)
            .map(|(h, t)| json!({ "horizon": h, "slope": slope_window(t, steps).map(fmt_num) }))
            .collect();
        write_text(&out.join("summary.json"), &json_string(&json!({ "steps": steps, "slopes": slopes })))
    }
}

/// Least-squares slope of `J_S` over the last two thirds of the run.
fn slope_window(perf: &PerformanceTable, steps: usize) -> Option<f64> {
    perf.slope(steps.div_ceil(3).max(1), steps)
}

fn run_lq(spec: &LqSpec, out: &Path) -> Result<()> {
    let mode = match &spec.bounded {
        None => ConstraintMode::Unconstrained,
        Some((lower, upper)) => {
            ConstraintMode::BoundedInterior { lower: lower.clone(), upper: upper.clone(), equilibrium: None }
        }
    };
    let problem = LqProblem::new(spec.a.clone(), spec.b.clone(), spec.q.clone(), spec.r.clone(), mode);
    let verdict = lq_strict_dissipativity(&problem)?;
    let criterion = match verdict.criterion {
        Criterion::Detectability => "detectability",
        Criterion::BoundaryAvoidance => "boundary-avoidance",
    };
    let text = format!("strictly_dissipative: {}\ncriterion: {criterion}\n", verdict.strictly_dissipative);
    write_text(&out.join("verdict.txt"), &text)?;
    let mut doc = verdict.to_json();
    doc["equilibrium"] = json!(verdict.equilibrium);
    doc["warning"] = json!(verdict.warning);
    write_text(&out.join("lq.json"), &json_string(&doc))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path.strip_prefix(root).map_or(true, |p| p != Path::new(MANIFEST_NAME)) {
            out.push(path);
        }
    }
    Ok(())
}

/// Lists every file under `out` with its SHA-256. The timestamp lives only
/// here so the data files stay byte-reproducible.
pub fn write_manifest(out: &Path, task: &str) -> Result<Manifest> {
    let mut paths = Vec::new();
    collect_files(out, out, &mut paths)?;
    let mut files: Vec<ManifestEntry> = paths
        .iter()
        .map(|p| {
            let bytes = fs::read(p)?;
            let rel = p.strip_prefix(out).expect("collected under out");
            Ok(ManifestEntry {
                path: rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"),
                bytes: bytes.len() as u64,
                sha256: hex::encode(Sha256::digest(&bytes)),
            })
        })
        .collect::<Result<_>>()?;
    files.sort_by(|a, b| a.path.cmp(&b.path));
    let generated = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let doc = json!({
        "task": task,
        "generated_at_unix": generated,
        "files": files
            .iter()
            .map(|f| json!({ "path": f.path, "bytes": f.bytes, "sha256": f.sha256 }))
            .collect::<Vec<_>>(),
    });
    let path = out.join(MANIFEST_NAME);
    write_text(&path, &json_string(&doc))?;
    Ok(Manifest { files, path })
}
