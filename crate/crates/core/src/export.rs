//! CSV and JSON writers. Numbers use 17 significant digits and `\n` line
//! endings so that identical inputs give byte-identical files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::dp::{OcpSolution, ValueTable};
use crate::error::Result;
use crate::system::Trajectory;

/// `{:.16e}`; non-finite values as `inf`, `-inf`, `nan`.
pub fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:.16e}")
    }
}

/// Coordinate column names: `x` when one-dimensional, else `x_0, x_1, …`.
pub fn coord_names(prefix: &str, dim: usize) -> Vec<String> {
    if dim == 1 {
        vec![prefix.to_string()]
    } else {
        (0..dim).map(|d| format!("{prefix}_{d}")).collect()
    }
}

fn indexed_names(prefix: &str, dim: usize) -> Vec<String> {
    (0..dim).map(|d| format!("{prefix}_{d}")).collect()
}

/// Minimal CSV builder.
#[derive(Debug, Default, Clone)]
pub struct Csv {
    buf: String,
}

impl Csv {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        let mut csv = Self::default();
        csv.raw_row(header.iter().map(|s| s.as_ref().to_string()));
        csv
    }

    pub fn raw_row(&mut self, fields: impl IntoIterator<Item = String>) {
        let mut first = true;
        for f in fields {
            if !first {
                self.buf.push(',');
            }
            first = false;
            self.buf.push_str(&f);
        }
        self.buf.push('\n');
    }

    pub fn num_row(&mut self, fields: impl IntoIterator<Item = f64>) {
        self.raw_row(fields.into_iter().map(fmt_num));
    }

    pub fn as_str(&self) -> &str {
        &self.buf
    }

    pub fn into_string(self) -> String {
        self.buf
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, &self.buf)?;
        Ok(())
    }
}

/// `t,x_0..,u_0..`; the final row leaves the control fields empty.
pub fn trajectory_csv(traj: &Trajectory) -> String {
    let n = traj.initial().len();
    let m = traj.controls().first().map_or(0, Vec::len);
    let mut header = vec!["t".to_string()];
    header.extend(indexed_names("x", n));
    header.extend(indexed_names("u", m));
    let mut csv = Csv::new(&header);
    for (t, x) in traj.states().iter().enumerate() {
        let mut row = vec![t.to_string()];
        row.extend(x.iter().map(|&v| fmt_num(v)));
        match traj.controls().get(t) {
            Some(u) => row.extend(u.iter().map(|&v| fmt_num(v))),
            None => row.extend(std::iter::repeat_n(String::new(), m)),
        }
        csv.raw_row(row);
    }
    csv.into_string()
}

/// `x_0..,k,V` for every layer and node.
pub fn value_table_csv(table: &ValueTable) -> String {
    let lattice = table.lattice();
    let mut header = indexed_names("x", lattice.dim());
    header.push("k".into());
    header.push("V".into());
    let mut csv = Csv::new(&header);
    for k in 0..=table.horizon() {
        for (i, v) in table.layer(k).iter().enumerate() {
            let mut row: Vec<String> = lattice.point(i).into_iter().map(fmt_num).collect();
            row.push(k.to_string());
            row.push(fmt_num(*v));
            csv.raw_row(row);
        }
    }
    csv.into_string()
}

/// Metadata sidecar for a solution.
pub fn solution_json(solution: &OcpSolution) -> serde_json::Value {
    serde_json::json!({
        "horizon": solution.diagnostics.horizon,
        "value": fmt_num(solution.value),
        "table_value": fmt_num(solution.diagnostics.table_value),
        "state_points": solution.diagnostics.state_points,
        "control_points": solution.diagnostics.control_points,
        "interpolation": solution.diagnostics.interpolation,
        "terminal_mode": solution.diagnostics.terminal_mode,
        "controls": solution.controls,
        "states": solution.trajectory.states(),
    })
}

/// Pretty JSON with a trailing newline.
pub fn json_string(value: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(value).unwrap_or_else(|_| "null".into());
    let _ = writeln!(s);
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}
