//! Self-contained SVG line plots.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ltv_observer::model::parameter_column;
use ltv_observer::Trajectory;

use crate::config::ThetaSpec;
use crate::error::CliError;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const MAX_POINTS: usize = 1500;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub values: Vec<f64>,
    pub dashed: bool,
}

impl Series {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Self {
        Self {
            label: label.into(),
            values,
            dashed: false,
        }
    }

    pub fn dashed(mut self) -> Self {
        self.dashed = true;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Figure {
    pub title: String,
    pub y_label: String,
    pub times: Vec<f64>,
    pub series: Vec<Series>,
}

fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let norm = raw / mag;
    let nice = if norm < 1.5 {
        1.0
    } else if norm < 3.0 {
        2.0
    } else if norm < 7.0 {
        5.0
    } else {
        10.0
    };
    nice * mag
}

fn tick_label(v: f64, step: f64) -> String {
    let decimals = (-step.log10().floor()).max(0.0) as usize;
    let s = format!("{v:.decimals$}");
    let s = if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        &s
    };
    if s.trim_start_matches('-') == "0" {
        "0".to_string()
    } else {
        s.to_string()
    }
}

/// Data range padded by 5%; a flat series gets `value +- 1`.
fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (-1.0, 1.0);
    }
    if hi - lo <= 1e-12 * lo.abs().max(hi.abs()).max(1.0) {
        return (lo - 1.0, hi + 1.0);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl Figure {
    pub fn to_svg(&self) -> String {
        let plot_w = WIDTH - LEFT - RIGHT;
        let plot_h = HEIGHT - TOP - BOTTOM;
        let (t0, t1) = match (self.times.first(), self.times.last()) {
            (Some(a), Some(b)) if b > a => (*a, *b),
            (Some(a), _) => (*a, *a + 1.0),
            _ => (0.0, 1.0),
        };
        let (y0, y1) = range(self.series.iter().flat_map(|s| s.values.iter().copied()));
        let px = |t: f64| LEFT + (t - t0) / (t1 - t0) * plot_w;
        let py = |y: f64| TOP + (y1 - y) / (y1 - y0) * plot_h;

        let mut svg = String::new();
        let _ = writeln!(
            svg,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(svg, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#,
            LEFT + plot_w / 2.0,
            escape(&self.title)
        );

        let t_step = nice_step(t1 - t0);
        let mut t = (t0 / t_step).ceil() * t_step;
        while t <= t1 + 1e-9 * t_step {
            let x = px(t);
            let _ = writeln!(
                svg,
                r##"<line x1="{x:.2}" y1="{TOP}" x2="{x:.2}" y2="{:.2}" stroke="#e0e0e0"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"##,
                TOP + plot_h,
                TOP + plot_h + 16.0,
                tick_label(t, t_step)
            );
            t += t_step;
        }
        let y_step = nice_step(y1 - y0);
        let mut y = (y0 / y_step).ceil() * y_step;
        while y <= y1 + 1e-9 * y_step {
            let v = py(y);
            let _ = writeln!(
                svg,
                r##"<line x1="{LEFT}" y1="{v:.2}" x2="{:.2}" y2="{v:.2}" stroke="#e0e0e0"/><text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"##,
                LEFT + plot_w,
                LEFT - 6.0,
                v + 4.0,
                tick_label(y, y_step)
            );
            y += y_step;
        }
        let _ = writeln!(
            svg,
            r#"<rect x="{LEFT}" y="{TOP}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>"#
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">t, s</text>"#,
            LEFT + plot_w / 2.0,
            HEIGHT - 12.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
            TOP + plot_h / 2.0,
            TOP + plot_h / 2.0,
            escape(&self.y_label)
        );

        let stride = self.times.len().div_ceil(MAX_POINTS).max(1);
        for (k, s) in self.series.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            let mut points = String::new();
            let last = self.times.len().saturating_sub(1);
            for (j, (t, v)) in self.times.iter().zip(&s.values).enumerate() {
                if (j % stride == 0 || j == last) && v.is_finite() {
                    let _ = write!(points, "{:.2},{:.2} ", px(*t), py(*v));
                }
            }
            let dash = if s.dashed { r#" stroke-dasharray="6 4""# } else { "" };
            let _ = writeln!(
                svg,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"#,
                points.trim_end()
            );
            let ly = TOP + 10.0 + 18.0 * k as f64;
            let lx = LEFT + plot_w + 12.0;
            let _ = writeln!(
                svg,
                r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="1.5"{dash}/><text x="{:.1}" y="{:.1}">{}</text>"#,
                lx + 24.0,
                lx + 30.0,
                ly + 4.0,
                escape(&s.label)
            );
        }
        svg.push_str("</svg>\n");
        svg
    }
}

/// The six standard figures for a run.
pub fn figures(traj: &Trajectory, truth: &[ThetaSpec]) -> Vec<(&'static str, Figure)> {
    let times = traj.times().to_vec();
    let single = truth.len() == 1;
    let column = |name: &str| traj.get(name).map(<[f64]>::to_vec);
    let figure = |title: &str, y_label: &str, series: Vec<Series>| Figure {
        title: title.to_string(),
        y_label: y_label.to_string(),
        times: times.clone(),
        series,
    };

    let mut states = Vec::new();
    let mut errors = Vec::new();
    for i in 1.. {
        let (Some(x), Some(xhat)) = (column(&format!("x{i}")), column(&format!("xhat{i}"))) else {
            break;
        };
        states.push(Series::new(format!("x{i}"), x));
        states.push(Series::new(format!("x{i} estimate"), xhat).dashed());
        if let Some(e) = column(&format!("xerr{i}")) {
            errors.push(Series::new(format!("x{i} error"), e));
        }
    }

    let mut omega = Vec::new();
    let mut amplitude = Vec::new();
    let mut theta = Vec::new();
    let mut theta_err = Vec::new();
    for spec in truth {
        let name = |base: &str| parameter_column(base, spec.row - 1, single);
        let tag = if single { String::new() } else { format!(" (row {})", spec.row) };
        let offset = |values: Vec<f64>, by: f64| values.into_iter().map(|v| v - by).collect::<Vec<_>>();
        if let Some(w) = column(&name("omega_hat")) {
            omega.push(Series::new(format!("omega error{tag}"), offset(w, spec.omega)));
        }
        for (j, base) in ["l1_hat", "l2_hat"].iter().enumerate() {
            if let Some(l) = column(&name(base)) {
                amplitude.push(Series::new(format!("l{} error{tag}", j + 1), offset(l, spec.l[j])));
            }
        }
        if let (Some(truth), Some(est)) = (column(&name("theta_true")), column(&name("theta_hat"))) {
            theta_err.push(Series::new(
                format!("theta error{tag}"),
                truth.iter().zip(&est).map(|(a, b)| a - b).collect(),
            ));
            theta.push(Series::new(format!("theta{tag}"), truth));
            theta.push(Series::new(format!("theta estimate{tag}"), est).dashed());
        }
    }

    vec![
        ("states.svg", figure("State and estimate", "x", states)),
        ("state_error.svg", figure("State estimation error", "x - x estimate", errors)),
        ("omega_error.svg", figure("Frequency estimation error", "omega estimate - omega", omega)),
        ("amplitude_error.svg", figure("Amplitude estimation error", "l estimate - l", amplitude)),
        ("theta.svg", figure("Parameter and estimate", "theta", theta)),
        ("theta_error.svg", figure("Parameter estimation error", "theta - theta estimate", theta_err)),
    ]
}

pub fn emit_plots(traj: &Trajectory, truth: &[ThetaSpec], dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    let mut written = Vec::new();
    for (file, fig) in figures(traj, truth) {
        let path = dir.join(file);
        std::fs::write(&path, fig.to_svg()).map_err(CliError::io(&path))?;
        written.push(path);
    }
    Ok(written)
}
