//! Run summaries.
//!
//! A [`RunReport`] is computed from the exported CSV columns, so it can be
//! recomputed from the file alone (plus the condition residuals and the
//! ground truth, which the file does not carry).

use std::fmt;

use ltv_observer::model::parameter_column;
use ltv_observer::observer::ConditionReport;

use crate::config::ThetaSpec;
use crate::export::CsvTable;

/// Band around the true frequency used for the settling time.
pub const SETTLING_BAND: f64 = 0.05;
/// Fraction of the horizon treated as the tail.
pub const THETA_TAIL: f64 = 0.2;
pub const AMPLITUDE_TAIL: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residuals {
    pub input: f64,
    pub coupling: f64,
    pub drift: f64,
}

impl From<&ConditionReport> for Residuals {
    fn from(r: &ConditionReport) -> Self {
        Self {
            input: r.input,
            coupling: r.coupling,
            drift: r.drift,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSummary {
    pub truth: ThetaSpec,
    pub omega_final: f64,
    pub k_final: f64,
    /// First time after which `|omega_hat - omega|` stays within the band.
    pub settling_time: Option<f64>,
    pub l_final: [f64; 2],
    /// Largest `|l_hat - l|` (max norm) over the amplitude tail.
    pub l_tail_error: f64,
    pub theta_rms_tail: f64,
    pub delta_min: f64,
    pub delta_median: f64,
    /// Smallest square of the state the parameter multiplies; the log and
    /// division steps assume it stays away from zero.
    pub min_state_square: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub name: String,
    pub samples: usize,
    pub residuals: Option<Residuals>,
    pub final_state_error: Option<f64>,
    pub parameters: Vec<ParameterSummary>,
}

/// Index of the first sample at or after `fraction` of the way through.
fn tail_start(times: &[f64], fraction: f64) -> usize {
    let (Some(first), Some(last)) = (times.first(), times.last()) else {
        return 0;
    };
    let cut = last - fraction * (last - first);
    times.iter().position(|t| *t >= cut - 1e-9).unwrap_or(0)
}

fn median(mut values: Vec<f64>) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    }
}

fn summarize_parameter(table: &CsvTable, truth: ThetaSpec, single: bool) -> Option<ParameterSummary> {
    let col = |base: &str| table.get(&parameter_column(base, truth.row - 1, single));
    let times = table.get("t")?;
    let omega = col("omega_hat")?;
    let k = col("k_hat")?;
    let l1 = col("l1_hat")?;
    let l2 = col("l2_hat")?;
    let theta_hat = col("theta_hat")?;
    let theta_true = col("theta_true")?;
    let delta = col("delta")?;
    let state = table.get(&format!("x{}", truth.col))?;
    if times.is_empty() {
        return None;
    }

    let settling_time = match omega.iter().rposition(|w| (w - truth.omega).abs() > SETTLING_BAND) {
        None => Some(times[0]),
        Some(last_out) if last_out + 1 < times.len() => Some(times[last_out + 1]),
        Some(_) => None,
    };
    let l_from = tail_start(times, AMPLITUDE_TAIL);
    let l_tail_error = (l_from..times.len())
        .map(|k| (l1[k] - truth.l[0]).abs().max((l2[k] - truth.l[1]).abs()))
        .fold(0.0, f64::max);
    let theta_from = tail_start(times, THETA_TAIL);
    let tail = &theta_hat[theta_from..];
    let sq: f64 = tail
        .iter()
        .zip(&theta_true[theta_from..])
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let abs_delta: Vec<f64> = delta.iter().map(|d| d.abs()).collect();
    Some(ParameterSummary {
        truth,
        omega_final: *omega.last()?,
        k_final: *k.last()?,
        settling_time,
        l_final: [*l1.last()?, *l2.last()?],
        l_tail_error,
        theta_rms_tail: (sq / tail.len() as f64).sqrt(),
        delta_min: abs_delta.iter().copied().fold(f64::INFINITY, f64::min),
        delta_median: median(abs_delta),
        min_state_square: state.iter().map(|x| x * x).fold(f64::INFINITY, f64::min),
    })
}

/// Builds the report from exported columns.
pub fn summarize(name: &str, table: &CsvTable, truth: &[ThetaSpec], residuals: Option<Residuals>) -> RunReport {
    let single = truth.len() == 1;
    RunReport {
        name: name.to_string(),
        samples: table.rows(),
        residuals,
        final_state_error: table.get("xerr_norm").and_then(|c| c.last().copied()),
        parameters: truth
            .iter()
            .filter_map(|spec| summarize_parameter(table, *spec, single))
            .collect(),
    }
}

impl RunReport {
    pub fn has_data(&self) -> bool {
        self.samples > 0
    }
}

impl fmt::Display for RunReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario: {}", self.name)?;
        if let Some(r) = &self.residuals {
            writeln!(
                f,
                "condition residuals: input {:.3e}, coupling {:.3e}, drift {:.3e}",
                r.input, r.coupling, r.drift
            )?;
        }
        if !self.has_data() {
            return writeln!(f, "samples: 0 (no data)");
        }
        writeln!(f, "samples: {}", self.samples)?;
        if let Some(e) = self.final_state_error {
            writeln!(f, "final state error norm: {e:.6e}")?;
        }
        for p in &self.parameters {
            let t = &p.truth;
            writeln!(f, "parameter at row {}, column {}:", t.row, t.col)?;
            let settle = p
                .settling_time
                .map_or_else(|| "not reached".to_string(), |s| format!("{s:.3} s"));
            writeln!(
                f,
                "  omega: true {}, final {:.6}, settling time (+-{SETTLING_BAND}) {settle}",
                t.omega, p.omega_final
            )?;
            writeln!(f, "  k: final {:.6}", p.k_final)?;
            writeln!(
                f,
                "  l: true [{}, {}], final [{:.6}, {:.6}], tail max error {:.3e}",
                t.l[0], t.l[1], p.l_final[0], p.l_final[1], p.l_tail_error
            )?;
            writeln!(f, "  theta error rms over the last 20%: {:.3e}", p.theta_rms_tail)?;
            writeln!(f, "  |delta|: min {:.3e}, median {:.3e}", p.delta_min, p.delta_median)?;
            writeln!(f, "  min x{}^2: {:.3e}", t.col, p.min_state_square)?;
        }
        Ok(())
    }
}
