//! Scenario files.
//!
//! A scenario is a TOML document with `[system]`, `[gains]`, `[simulation]`,
//! `[ident]` and `[output]` tables. Matrix entries are expression strings
//! (or plain numbers); `C`, `G`, `N`, `L`, `x0` and `z0` are numeric arrays.
//! Parameter rows are `[[system.theta]]` entries with 1-based `row` and `col`.
//!
//! Parsing reports every problem it finds, not just the first.

use std::fmt;

use nalgebra::{DVector, RowDVector};
use toml::{Table, Value};

use ltv_observer::ident::{IdentSettings, Staging};
use ltv_observer::model::{DStructure, LtvSystem, ThetaGenerator, TimeMatrix};
use ltv_observer::observer::ObserverGains;
use ltv_observer::{Clock, Expr};

pub const PAPER_SCENARIO: &str = include_str!("../scenarios/paper.scenario");
pub const THREE_STATE_SCENARIO: &str = include_str!("../scenarios/three_state.scenario");

/// One sinusoidal parameter `theta = l1 sin(omega t) + l2 cos(omega t)`
/// sitting at `(row, col)`, both 1-based.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaSpec {
    pub row: usize,
    pub col: usize,
    pub omega: f64,
    pub l: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputSpec {
    pub dir: Option<String>,
    pub decimate: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub name: String,
    pub n: usize,
    pub a0: TimeMatrix,
    pub b: TimeMatrix,
    pub c: Vec<f64>,
    pub thetas: Vec<ThetaSpec>,
    pub g: Vec<f64>,
    pub n_gain: Vec<f64>,
    pub l_gain: Vec<f64>,
    pub m: TimeMatrix,
    pub u: Expr,
    pub x0: Vec<f64>,
    pub z0: Vec<f64>,
    pub dt: f64,
    pub horizon: f64,
    /// Half-width of the uniform output noise; zero disables it.
    pub noise: f64,
    pub seed: u64,
    pub ident: IdentSettings,
    pub output: OutputSpec,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigIssue {
    pub field: String,
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(line) = self.line {
            write!(f, "line {line}: ")?;
        }
        if self.field.is_empty() {
            write!(f, "{}", self.message)
        } else {
            write!(f, "{}: {}", self.field, self.message)
        }
    }
}

/// Every problem found in a scenario file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigErrors(pub Vec<ConfigIssue>);

impl ConfigErrors {
    pub fn fields(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(|i| i.field.as_str())
    }
}

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, issue) in self.0.iter().enumerate() {
            if k > 0 {
                writeln!(f)?;
            }
            write!(f, "{issue}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

const SECTIONS: [&str; 5] = ["system", "gains", "simulation", "ident", "output"];

struct Reader<'a> {
    text: &'a str,
    issues: Vec<ConfigIssue>,
}

impl<'a> Reader<'a> {
    fn issue(&mut self, section: &str, key: &str, message: impl Into<String>) {
        let field = if section.is_empty() {
            key.to_string()
        } else if key.is_empty() {
            section.to_string()
        } else {
            format!("{section}.{key}")
        };
        self.issues.push(ConfigIssue {
            line: locate(self.text, section, key),
            field,
            message: message.into(),
        });
    }

    fn table<'t>(&mut self, root: &'t Table, name: &str) -> Option<&'t Table> {
        match root.get(name) {
            None => None,
            Some(Value::Table(t)) => Some(t),
            Some(_) => {
                self.issue("", name, "expected a table");
                None
            }
        }
    }

    fn required<'t>(&mut self, t: Option<&'t Table>, section: &str, key: &str) -> Option<&'t Value> {
        let value = t.and_then(|t| t.get(key));
        if value.is_none() {
            self.issue(section, key, "missing required field");
        }
        value
    }

    fn number(&mut self, value: &Value, section: &str, key: &str) -> Option<f64> {
        let v = match value {
            Value::Float(f) => *f,
            Value::Integer(i) => *i as f64,
            _ => {
                self.issue(section, key, "expected a number");
                return None;
            }
        };
        if !v.is_finite() {
            self.issue(section, key, "must be finite");
            return None;
        }
        Some(v)
    }

    fn integer(&mut self, value: &Value, section: &str, key: &str) -> Option<u64> {
        match value {
            Value::Integer(i) if *i >= 0 => Some(*i as u64),
            _ => {
                self.issue(section, key, "expected a non-negative integer");
                None
            }
        }
    }

    fn expr(&mut self, value: &Value, section: &str, key: &str) -> Option<Expr> {
        match value {
            Value::String(s) => match Expr::parse(s) {
                Ok(e) => Some(e),
                Err(e) => {
                    self.issue(section, key, format!("cannot parse '{s}': {e}"));
                    None
                }
            },
            Value::Float(_) | Value::Integer(_) => self.number(value, section, key).map(Expr::Const),
            _ => {
                self.issue(section, key, "expected an expression string or a number");
                None
            }
        }
    }

    fn vector(&mut self, value: &Value, section: &str, key: &str, len: Option<usize>) -> Option<Vec<f64>> {
        let Value::Array(items) = value else {
            self.issue(section, key, "expected an array of numbers");
            return None;
        };
        let mut out = Vec::with_capacity(items.len());
        for item in items {
            out.push(self.number(item, section, key)?);
        }
        if let Some(n) = len {
            if out.len() != n {
                self.issue(section, key, format!("expected {n} entries, got {}", out.len()));
                return None;
            }
        }
        Some(out)
    }

    fn matrix(&mut self, value: &Value, section: &str, key: &str, shape: Option<(usize, usize)>) -> Option<TimeMatrix> {
        let Value::Array(rows) = value else {
            self.issue(section, key, "expected an array of rows");
            return None;
        };
        let mut parsed = Vec::with_capacity(rows.len());
        let mut ok = true;
        for row in rows {
            let Value::Array(entries) = row else {
                self.issue(section, key, "expected an array of rows");
                return None;
            };
            let mut r = Vec::with_capacity(entries.len());
            for e in entries {
                match self.expr(e, section, key) {
                    Some(e) => r.push(e),
                    None => ok = false,
                }
            }
            parsed.push(r);
        }
        if !ok {
            return None;
        }
        let found = (parsed.len(), parsed.first().map_or(0, Vec::len));
        let rectangular = parsed.iter().all(|r| r.len() == found.1);
        if let Some((r, c)) = shape {
            if !rectangular || found != (r, c) {
                self.issue(section, key, format!("expected {r}×{c}"));
                return None;
            }
        }
        match TimeMatrix::from_rows(key, parsed) {
            Ok(m) => Some(m),
            Err(e) => {
                self.issue(section, key, e.to_string());
                None
            }
        }
    }

    fn unknown_keys(&mut self, t: Option<&Table>, section: &str, allowed: &[&str]) {
        if let Some(t) = t {
            for key in t.keys() {
                if !allowed.contains(&key.as_str()) {
                    self.issue(section, key, "unknown field");
                }
            }
        }
    }
}

/// 1-based line of `key = ...` inside `[section]`, or inside the k-th
/// `[[section]]` for a section written `name[k]`.
fn locate(text: &str, section: &str, key: &str) -> Option<usize> {
    let (section, wanted) = match section.split_once('[') {
        Some((base, rest)) => (base, rest.trim_end_matches(']').parse::<usize>().ok()?),
        None => (section, 1),
    };
    let mut current = String::new();
    let mut seen = 0;
    for (k, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if let Some(header) = trimmed.strip_prefix('[') {
            current = header.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if current == section {
                seen += 1;
                if key.is_empty() && seen == wanted {
                    return Some(k + 1);
                }
            }
            continue;
        }
        if current == section && seen == wanted {
            if let Some((lhs, _)) = trimmed.split_once('=') {
                if lhs.trim() == key {
                    return Some(k + 1);
                }
            }
        }
    }
    None
}

fn positive(r: &mut Reader, v: Option<f64>, section: &str, key: &str) -> Option<f64> {
    match v {
        Some(x) if x > 0.0 => Some(x),
        Some(_) => {
            r.issue(section, key, "must be positive");
            None
        }
        None => None,
    }
}

/// Parses a scenario, collecting every error it finds.
pub fn parse_config(text: &str) -> Result<ScenarioConfig, ConfigErrors> {
    let root: Table = match text.parse() {
        Ok(t) => t,
        Err(e) => {
            let e: toml::de::Error = e;
            let line = e.span().map(|s| text[..s.start.min(text.len())].lines().count().max(1));
            return Err(ConfigErrors(vec![ConfigIssue {
                field: String::new(),
                line,
                message: e.message().to_string(),
            }]));
        }
    };
    let mut r = Reader { text, issues: Vec::new() };

    for key in root.keys() {
        if key != "name" && !SECTIONS.contains(&key.as_str()) {
            r.issue("", key, "unknown field");
        }
    }
    let name = match root.get("name") {
        None => "scenario".to_string(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => {
            r.issue("", "name", "expected a string");
            String::new()
        }
    };

    let system = r.table(&root, "system");
    let gains = r.table(&root, "gains");
    let sim = r.table(&root, "simulation");
    let ident = r.table(&root, "ident");
    let output = r.table(&root, "output");
    r.unknown_keys(system, "system", &["n", "A0", "B", "C", "theta"]);
    r.unknown_keys(gains, "gains", &["G", "N", "L", "M"]);
    r.unknown_keys(sim, "simulation", &["u", "x0", "z0", "dt", "horizon", "noise", "seed"]);
    r.unknown_keys(
        ident,
        "ident",
        &[
            "lambda", "gamma1", "lambda_i", "gamma_i", "lambda1", "lambda2", "gamma2", "eps_div", "freq_stage", "mode",
        ],
    );
    r.unknown_keys(output, "output", &["dir", "decimate"]);

    let n = r.required(system, "system", "n").and_then(|v| r.integer(v, "system", "n"));
    let n = match n {
        Some(0) => {
            r.issue("system", "n", "must be at least 1");
            None
        }
        Some(n) => Some(n as usize),
        None => None,
    };
    let square = n.map(|n| (n, n));
    let a0 = r.required(system, "system", "A0").and_then(|v| r.matrix(v, "system", "A0", square));
    let b = r.required(system, "system", "B").and_then(|v| r.matrix(v, "system", "B", n.map(|n| (n, 1))));
    let c = r.required(system, "system", "C").and_then(|v| r.vector(v, "system", "C", n));
    let thetas = parse_thetas(&mut r, system, n);

    let g = r.required(gains, "gains", "G").and_then(|v| r.vector(v, "gains", "G", n));
    let n_gain = r.required(gains, "gains", "N").and_then(|v| r.vector(v, "gains", "N", n));
    let l_gain = r.required(gains, "gains", "L").and_then(|v| r.vector(v, "gains", "L", n));
    let m = r.required(gains, "gains", "M").and_then(|v| r.matrix(v, "gains", "M", square));

    let u = r.required(sim, "simulation", "u").and_then(|v| r.expr(v, "simulation", "u"));
    let x0 = r.required(sim, "simulation", "x0").and_then(|v| r.vector(v, "simulation", "x0", n));
    let z0 = match sim.and_then(|t| t.get("z0")) {
        Some(v) => r.vector(v, "simulation", "z0", n),
        None => n.map(|n| vec![0.0; n]),
    };
    let dt = r.required(sim, "simulation", "dt").and_then(|v| r.number(v, "simulation", "dt"));
    let dt = positive(&mut r, dt, "simulation", "dt");
    let horizon = r
        .required(sim, "simulation", "horizon")
        .and_then(|v| r.number(v, "simulation", "horizon"));
    let horizon = match horizon {
        Some(h) if h < 0.0 => {
            r.issue("simulation", "horizon", "must not be negative");
            None
        }
        h => h,
    };
    let noise = match sim.and_then(|t| t.get("noise")) {
        Some(v) => match r.number(v, "simulation", "noise") {
            Some(x) if x < 0.0 => {
                r.issue("simulation", "noise", "must not be negative");
                None
            }
            x => x,
        },
        None => Some(0.0),
    };
    let seed = match sim.and_then(|t| t.get("seed")) {
        Some(v) => r.integer(v, "simulation", "seed"),
        None => Some(0),
    };

    let settings = parse_ident(&mut r, ident);
    let output = parse_output(&mut r, output);

    let (
        Some(n),
        Some(a0),
        Some(b),
        Some(c),
        Some(thetas),
        Some(g),
        Some(n_gain),
        Some(l_gain),
        Some(m),
        Some(u),
        Some(x0),
        Some(z0),
        Some(dt),
        Some(horizon),
        Some(noise),
        Some(seed),
        Some(ident),
        Some(output),
    ) = (
        n, a0, b, c, thetas, g, n_gain, l_gain, m, u, x0, z0, dt, horizon, noise, seed, settings, output,
    )
    else {
        return Err(ConfigErrors(r.issues));
    };
    if !r.issues.is_empty() {
        return Err(ConfigErrors(r.issues));
    }
    let cfg = ScenarioConfig {
        name,
        n,
        a0: rename(a0, "A0"),
        b: rename(b, "B"),
        c,
        thetas,
        g,
        n_gain,
        l_gain,
        m: rename(m, "M"),
        u,
        x0,
        z0,
        dt,
        horizon,
        noise,
        seed,
        ident,
        output,
    };
    if let Err(e) = cfg.system() {
        r.issue("system", "", e.to_string());
    }
    if !r.issues.is_empty() {
        return Err(ConfigErrors(r.issues));
    }
    Ok(cfg)
}

fn rename(m: TimeMatrix, name: &str) -> TimeMatrix {
    TimeMatrix::from_rows(name, m.rows()).expect("already validated")
}

fn parse_thetas(r: &mut Reader, system: Option<&Table>, n: Option<usize>) -> Option<Vec<ThetaSpec>> {
    let Some(value) = system.and_then(|t| t.get("theta")) else {
        return Some(Vec::new());
    };
    let Value::Array(items) = value else {
        r.issue("system", "theta", "expected [[system.theta]] entries");
        return None;
    };
    let mut out = Vec::new();
    let mut ok = true;
    for (k, item) in items.iter().enumerate() {
        let section = format!("system.theta[{}]", k + 1);
        let Value::Table(t) = item else {
            r.issue("system", "theta", "expected [[system.theta]] entries");
            ok = false;
            continue;
        };
        for key in t.keys() {
            if !["row", "col", "omega", "l"].contains(&key.as_str()) {
                r.issue(&section, key, "unknown field");
                ok = false;
            }
        }
        let row = r.required(Some(t), &section, "row").and_then(|v| r.integer(v, &section, "row"));
        let col = r.required(Some(t), &section, "col").and_then(|v| r.integer(v, &section, "col"));
        let omega = r.required(Some(t), &section, "omega").and_then(|v| r.number(v, &section, "omega"));
        let omega = positive(r, omega, &section, "omega");
        let l = r.required(Some(t), &section, "l").and_then(|v| r.vector(v, &section, "l", Some(2)));
        let (Some(row), Some(col), Some(omega), Some(l)) = (row, col, omega, l) else {
            ok = false;
            continue;
        };
        let (row, col) = (row as usize, col as usize);
        if let Some(n) = n {
            if row == 0 || row > n {
                r.issue(&section, "row", format!("must be in 1..={n}"));
                ok = false;
                continue;
            }
        }
        if col == 0 || col > row {
            r.issue(&section, "col", format!("must be in 1..={row} (at or left of the diagonal)"));
            ok = false;
            continue;
        }
        if out.iter().any(|s: &ThetaSpec| s.row == row) {
            r.issue(&section, "row", format!("row {row} already has a parameter"));
            ok = false;
            continue;
        }
        out.push(ThetaSpec {
            row,
            col,
            omega,
            l: [l[0], l[1]],
        });
    }
    ok.then_some(out)
}

fn parse_ident(r: &mut Reader, t: Option<&Table>) -> Option<IdentSettings> {
    let mut s = IdentSettings::default();
    let mut ok = true;
    let fields: [(&str, &mut f64, bool); 9] = [
        ("lambda", &mut s.lambda, true),
        ("gamma1", &mut s.gamma1, true),
        ("lambda_i", &mut s.lambda_i, true),
        ("gamma_i", &mut s.gamma_i, true),
        ("lambda1", &mut s.lambda1, true),
        ("lambda2", &mut s.lambda2, true),
        ("gamma2", &mut s.gamma2, true),
        ("eps_div", &mut s.eps_div, true),
        ("freq_stage", &mut s.freq_stage, false),
    ];
    for (key, slot, strictly_positive) in fields {
        let Some(v) = t.and_then(|t| t.get(key)) else { continue };
        match r.number(v, "ident", key) {
            Some(x) if x > 0.0 || (!strictly_positive && x >= 0.0) => *slot = x,
            Some(_) => {
                r.issue("ident", key, "must be positive");
                ok = false;
            }
            None => ok = false,
        }
    }
    if let Some(v) = t.and_then(|t| t.get("mode")) {
        match v.as_str() {
            Some("replay") => s.staging = Staging::Replay,
            Some("cascade") => s.staging = Staging::Cascade,
            _ => {
                r.issue("ident", "mode", "expected \"replay\" or \"cascade\"");
                ok = false;
            }
        }
    }
    ok.then_some(s)
}

fn parse_output(r: &mut Reader, t: Option<&Table>) -> Option<OutputSpec> {
    let mut out = OutputSpec { dir: None, decimate: 1 };
    let mut ok = true;
    match t.and_then(|t| t.get("dir")) {
        None => {}
        Some(Value::String(s)) => out.dir = Some(s.clone()),
        Some(_) => {
            r.issue("output", "dir", "expected a string");
            ok = false;
        }
    }
    if let Some(v) = t.and_then(|t| t.get("decimate")) {
        match r.integer(v, "output", "decimate") {
            Some(0) => {
                r.issue("output", "decimate", "must be at least 1");
                ok = false;
            }
            Some(d) => out.decimate = d as usize,
            None => ok = false,
        }
    }
    ok.then_some(out)
}

impl ScenarioConfig {
    pub fn system(&self) -> ltv_observer::Result<LtvSystem> {
        let mut targets = vec![None; self.n];
        let mut generators = vec![None; self.n];
        for spec in &self.thetas {
            if spec.row == 0 || spec.row > self.n {
                return Err(ltv_observer::Error::Structure(format!("theta row {} is out of range", spec.row)));
            }
            targets[spec.row - 1] = Some(spec.col.wrapping_sub(1));
            generators[spec.row - 1] = Some(ThetaGenerator::new(spec.omega, spec.l)?);
        }
        LtvSystem::new(
            self.a0.clone(),
            DStructure::new(targets)?,
            generators,
            self.b.clone(),
            RowDVector::from_row_slice(&self.c),
        )
    }

    pub fn gains(&self) -> ltv_observer::Result<ObserverGains> {
        ObserverGains::new(
            DVector::from_row_slice(&self.g),
            DVector::from_row_slice(&self.n_gain),
            DVector::from_row_slice(&self.l_gain),
            self.m.clone(),
        )
    }

    pub fn clock(&self) -> Clock {
        Clock::over(0.0, self.horizon, self.dt)
    }
}

fn float(x: f64) -> String {
    format!("{x:?}")
}

fn floats(v: &[f64]) -> String {
    let items: Vec<String> = v.iter().map(|x| float(*x)).collect();
    format!("[{}]", items.join(", "))
}

fn quoted(s: &str) -> String {
    Value::String(s.to_string()).to_string()
}

fn write_matrix(f: &mut fmt::Formatter<'_>, key: &str, m: &TimeMatrix) -> fmt::Result {
    writeln!(f, "{key} = [")?;
    for row in m.rows() {
        let items: Vec<String> = row.iter().map(|e| quoted(&e.to_string())).collect();
        writeln!(f, "  [{}],", items.join(", "))?;
    }
    writeln!(f, "]")
}

/// Prints the scenario in the same format [`parse_config`] reads.
impl fmt::Display for ScenarioConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "name = {}", quoted(&self.name))?;
        writeln!(f, "\n[system]")?;
        writeln!(f, "n = {}", self.n)?;
        write_matrix(f, "A0", &self.a0)?;
        write_matrix(f, "B", &self.b)?;
        writeln!(f, "C = {}", floats(&self.c))?;
        for spec in &self.thetas {
            writeln!(f, "\n[[system.theta]]")?;
            writeln!(f, "row = {}", spec.row)?;
            writeln!(f, "col = {}", spec.col)?;
            writeln!(f, "omega = {}", float(spec.omega))?;
            writeln!(f, "l = {}", floats(&spec.l))?;
        }
        writeln!(f, "\n[gains]")?;
        writeln!(f, "G = {}", floats(&self.g))?;
        writeln!(f, "N = {}", floats(&self.n_gain))?;
        writeln!(f, "L = {}", floats(&self.l_gain))?;
        write_matrix(f, "M", &self.m)?;
        writeln!(f, "\n[simulation]")?;
        writeln!(f, "u = {}", quoted(&self.u.to_string()))?;
        writeln!(f, "x0 = {}", floats(&self.x0))?;
        writeln!(f, "z0 = {}", floats(&self.z0))?;
        writeln!(f, "dt = {}", float(self.dt))?;
        writeln!(f, "horizon = {}", float(self.horizon))?;
        writeln!(f, "noise = {}", float(self.noise))?;
        writeln!(f, "seed = {}", self.seed)?;
        let s = &self.ident;
        writeln!(f, "\n[ident]")?;
        for (key, value) in [
            ("lambda", s.lambda),
            ("gamma1", s.gamma1),
            ("lambda_i", s.lambda_i),
            ("gamma_i", s.gamma_i),
            ("lambda1", s.lambda1),
            ("lambda2", s.lambda2),
            ("gamma2", s.gamma2),
            ("eps_div", s.eps_div),
            ("freq_stage", s.freq_stage),
        ] {
            writeln!(f, "{key} = {}", float(value))?;
        }
        let mode = match s.staging {
            Staging::Replay => "replay",
            Staging::Cascade => "cascade",
        };
        writeln!(f, "mode = {}", quoted(mode))?;
        writeln!(f, "\n[output]")?;
        if let Some(dir) = &self.output.dir {
            writeln!(f, "dir = {}", quoted(dir))?;
        }
        writeln!(f, "decimate = {}", self.output.decimate)
    }
}

pub fn paper_config() -> ScenarioConfig {
    parse_config(PAPER_SCENARIO).expect("built-in scenario is valid")
}

pub fn three_state_config() -> ScenarioConfig {
    parse_config(THREE_STATE_SCENARIO).expect("built-in scenario is valid")
}
