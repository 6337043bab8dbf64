//! Drives the `turnpike-lab` binary end to end on small grids.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_turnpike-lab"))
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn run(config: &Path, out: &Path, extra: &[&str]) -> Output {
    bin().arg("run").arg(config).arg("--out").arg(out).args(extra).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, acc: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, acc);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/");
                acc.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut acc = BTreeMap::new();
    walk(root, root, &mut acc);
    acc
}

const SWEEP: &str = "\
task = turnpike-sweep
system.preset = invariance
grid.states = 401
grid.controls = 121
horizons = 5..19 step 2
initials = 2
epsilon = 0.1
equilibrium.state = 0
equilibrium.control = 0
";

#[test]
fn sweep_writes_one_row_per_horizon() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "sweep.cfg", SWEEP);
    let out = tmp.path().join("out");
    let o = run(&cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("turnpike.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("x0,T,epsilon,q_count,max_dist,leaving_arc_len,approach_arc_len"));
    let horizons: Vec<usize> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(horizons, vec![5, 7, 9, 11, 13, 15, 17, 19]);
    assert!(out.join("trajectories/x0_0_T019.csv").exists());
}

#[test]
fn runs_are_reproducible_and_fully_manifested() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "sweep.cfg", SWEEP);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    assert!(run(&cfg, &a, &[]).status.success());
    assert!(run(&cfg, &b, &["--jobs", "1"]).status.success());
    let (mut ta, mut tb) = (read_tree(&a), read_tree(&b));
    let manifest: serde_json::Value = serde_json::from_slice(&ta.remove("manifest.json").unwrap()).unwrap();
    tb.remove("manifest.json");
    assert_eq!(ta, tb);

    let listed: BTreeMap<String, String> = manifest["files"]
        .as_array()
        .unwrap()
        .iter()
        .map(|f| (f["path"].as_str().unwrap().to_string(), f["sha256"].as_str().unwrap().to_string()))
        .collect();
    assert_eq!(listed.keys().collect::<Vec<_>>(), ta.keys().collect::<Vec<_>>());
    use sha2::Digest;
    for (path, bytes) in &ta {
        assert_eq!(listed[path], hex::encode(sha2::Sha256::digest(bytes)), "{path}");
    }
}

#[test]
fn lq_classify_writes_the_verdict() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "lq.cfg",
        "task = lq-classify\nlq.a = 2\nlq.b = 1\nlq.q = 0\nlq.r = 1\nlq.mode = bounded_interior\nlq.lower = -2\nlq.upper = 2\n",
    );
    let out = tmp.path().join("out");
    let o = run(&cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let verdict = fs::read_to_string(out.join("verdict.txt")).unwrap();
    assert!(verdict.contains("strictly_dissipative: true"), "{verdict}");
    assert!(verdict.contains("criterion: boundary-avoidance"));
}

#[test]
fn mpc_compare_writes_both_tables_and_the_join() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "cmp.cfg",
        "task = mpc-compare\nsystem.preset = invariance\ngrid.states = 201\ngrid.controls = 121\n\
         x0 = 2\nhorizons = 5, 10\nsteps = 60\n",
    );
    let out = tmp.path().join("out");
    let o = run(&cfg, &out, &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    for t in [5, 10] {
        let perf = fs::read_to_string(out.join(format!("T_{t}/performance.csv"))).unwrap();
        assert_eq!(perf.lines().count(), 61);
    }
    let joined = fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert_eq!(joined.lines().next(), Some("S,J_S_T5,J_S_over_S_T5,J_S_T10,J_S_over_S_T10"));
    assert_eq!(joined.lines().count(), 61);
    // The joined table repeats the per-horizon values verbatim.
    let row20: Vec<&str> = joined.lines().nth(20).unwrap().split(',').collect();
    let perf5 = fs::read_to_string(out.join("T_5/performance.csv")).unwrap();
    let p5: Vec<&str> = perf5.lines().nth(20).unwrap().split(',').collect();
    assert_eq!(row20[1], p5[1]);
}

#[test]
fn solve_and_dissipativity_tasks_run() {
    let tmp = TempDir::new().unwrap();
    let solve = write_config(
        tmp.path(),
        "solve.cfg",
        "task = solve\nsystem.preset = invariance\ngrid.states = 201\ngrid.controls = 121\nx0 = 2\nhorizon = 4\n",
    );
    let o = run(&solve, &tmp.path().join("solve"), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let sol: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("solve/solution.json")).unwrap()).unwrap();
    assert_eq!(sol["horizon"], 4);

    let diss = write_config(
        tmp.path(),
        "diss.cfg",
        "task = dissipativity\nsystem.preset = invariance\nequilibrium.state = 0\nequilibrium.control = 0\n\
         storage.kind = quadratic\nstorage.m = -1\nstorage.bound = 2\nalpha.c = 0.8333333333333334\n\
         samples.states = 201\nsamples.controls = 201\n",
    );
    let o = run(&diss, &tmp.path().join("diss"), &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("diss/dissipativity.json")).unwrap()).unwrap();
    assert_eq!(report["report"]["verdict"], "certified_on_grid", "{report}");
}

#[test]
fn invalid_configs_exit_2_with_line_numbers() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "bad.cfg", "task = turnpike-sweep\nsystem.preset = pendulum\nhorizons =\ninitials = 2\n");
    let o = bin().arg("validate").arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("line 2: system.preset: unknown preset `pendulum`"), "{err}");
    assert!(err.contains("line 3: horizons: horizons must be nonempty"), "{err}");
    let o = run(&cfg, &tmp.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!tmp.path().join("out").exists());
}

#[test]
fn runtime_failures_exit_1_and_name_the_run() {
    let tmp = TempDir::new().unwrap();
    // One step cannot bring x = 2 to the origin with |u| <= 3.
    let cfg = write_config(
        tmp.path(),
        "infeasible.cfg",
        "task = solve\nsystem.preset = invariance\ngrid.states = 41\ngrid.controls = 61\nx0 = 2\nhorizon = 1\n\
         terminal.mode = point\nterminal.state = 0\n",
    );
    let o = run(&cfg, &tmp.path().join("out"), &[]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("run x0=2, T=1"), "{}", stderr(&o));
}

#[test]
fn preset_list_and_default_output_root() {
    let o = bin().args(["preset", "list"]).output().unwrap();
    assert_eq!(String::from_utf8_lossy(&o.stdout), "brock-mirman\ninvariance\n");

    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "lq.cfg", "task = lq-classify\nlq.a = 1\nlq.b = 1\nlq.q = 0\nlq.r = 1\n");
    let root = tmp.path().join("root");
    let o = bin().arg("run").arg(&cfg).env("TURNPIKE_LAB_OUT", &root).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let verdict = fs::read_to_string(root.join("lq/verdict.txt")).unwrap();
    assert!(verdict.starts_with("strictly_dissipative: false"));
}
