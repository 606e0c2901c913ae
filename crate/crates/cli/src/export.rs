//! Trajectory CSV files.
//!
//! Columns follow a fixed order: `t`, `x1..xn`, `xhat1..xhatn`, `xerr_norm`,
//! `y`, `u`, `theta_true*`, `omega_hat*`, `k_hat*`, `l1_hat*`, `l2_hat*`,
//! `theta_hat*`, `delta*`, where `*` expands to one column per parameter row.
//! Values are written in scientific notation with ten significant digits.

use std::path::Path;

use ltv_observer::Trajectory;

use crate::error::CliError;

const FAMILIES: [&str; 7] = ["theta_true", "omega_hat", "k_hat", "l1_hat", "l2_hat", "theta_hat", "delta"];

/// Columns of a CSV file, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvTable {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

fn indexed(traj: &Trajectory, prefix: &str) -> Vec<String> {
    (1..)
        .map(|k| format!("{prefix}{k}"))
        .take_while(|name| traj.get(name).is_some())
        .collect()
}

/// `base` itself, or `base_r<row>` columns ordered by row.
fn family(traj: &Trajectory, base: &str) -> Vec<String> {
    if traj.get(base).is_some() {
        return vec![base.to_string()];
    }
    let prefix = format!("{base}_r");
    let mut rows: Vec<(usize, String)> = traj
        .names()
        .filter_map(|n| Some((n.strip_prefix(&prefix)?.parse().ok()?, n.to_string())))
        .collect();
    rows.sort();
    rows.into_iter().map(|(_, n)| n).collect()
}

/// Exported columns of `traj`, in file order. Columns outside the export
/// set (per-component errors, `yhat`) are left out.
pub fn export_columns(traj: &Trajectory) -> Vec<String> {
    let mut names = vec!["t".to_string()];
    names.extend(indexed(traj, "x"));
    names.extend(indexed(traj, "xhat"));
    for single in ["xerr_norm", "y", "u"] {
        if traj.get(single).is_some() {
            names.push(single.to_string());
        }
    }
    for base in FAMILIES {
        names.extend(family(traj, base));
    }
    names
}

impl CsvTable {
    /// Export columns of `traj`, keeping every `decimate`-th sample starting
    /// with the first.
    pub fn from_trajectory(traj: &Trajectory, decimate: usize) -> Self {
        let step = decimate.max(1);
        let names = export_columns(traj);
        let columns = names
            .iter()
            .map(|n| traj.get(n).expect("listed columns exist").iter().step_by(step).copied().collect())
            .collect();
        Self { names, columns }
    }

    pub fn rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        let k = self.names.iter().position(|n| n == name)?;
        Some(&self.columns[k])
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.names.join(",");
        out.push('\n');
        for k in 0..self.rows() {
            for (j, col) in self.columns.iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                out.push_str(&format!("{:.9e}", col[k]));
            }
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| CliError::Csv("missing header".into()))?;
        let names: Vec<String> = header.split(',').map(str::to_string).collect();
        let mut columns = vec![Vec::new(); names.len()];
        for (k, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != names.len() {
                return Err(CliError::Csv(format!(
                    "row {} has {} fields, expected {}",
                    k + 1,
                    fields.len(),
                    names.len()
                )));
            }
            for (col, field) in columns.iter_mut().zip(fields) {
                let v = field
                    .parse()
                    .map_err(|_| CliError::Csv(format!("row {}: '{field}' is not a number", k + 1)))?;
                col.push(v);
            }
        }
        Ok(Self { names, columns })
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_csv()).map_err(CliError::io(path))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        Self::parse(&text)
    }
}

pub fn export_csv(traj: &Trajectory, path: &Path, decimate: usize) -> Result<CsvTable, CliError> {
    let table = CsvTable::from_trajectory(traj, decimate);
    table.write(path)?;
    Ok(table)
}
