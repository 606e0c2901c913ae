//! Plant description, ground-truth simulation and assumption checks.
//!
//! The plant is `dx/dt = (A0(t) + D(theta(t))) x + B(t) u`, `y = C x`, where
//! row `i` of `D` holds at most one unknown sinusoid `theta_i(t)` at column
//! `s(i) <= i`.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::expr::Expr;
use crate::ode::{try_rk4_step, Clock};
use crate::trajectory::Trajectory;
use crate::{Error, Result};

/// Matrix whose entries are expressions of time.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeMatrix {
    name: String,
    rows: usize,
    cols: usize,
    entries: Vec<Expr>,
}

impl TimeMatrix {
    /// Builds a matrix from row vectors. All rows must share one length.
    pub fn from_rows(name: impl Into<String>, rows: Vec<Vec<Expr>>) -> Result<Self> {
        let name = name.into();
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        if n_rows == 0 || n_cols == 0 {
            return Err(Error::Dimension(format!("{name}: matrix must be non-empty")));
        }
        if let Some(bad) = rows.iter().position(|r| r.len() != n_cols) {
            return Err(Error::Dimension(format!(
                "{name}: row {} has {} entries, expected {n_cols}",
                bad + 1,
                rows[bad].len()
            )));
        }
        Ok(Self {
            name,
            rows: n_rows,
            cols: n_cols,
            entries: rows.into_iter().flatten().collect(),
        })
    }

    pub fn constant(name: impl Into<String>, m: &DMatrix<f64>) -> Self {
        let mut entries = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                entries.push(Expr::Const(m[(i, j)]));
            }
        }
        Self {
            name: name.into(),
            rows: m.nrows(),
            cols: m.ncols(),
            entries,
        }
    }

    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self::constant(name, &DMatrix::zeros(rows, cols))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn entry(&self, row: usize, col: usize) -> &Expr {
        &self.entries[row * self.cols + col]
    }

    pub fn rows(&self) -> Vec<Vec<Expr>> {
        self.entries.chunks(self.cols).map(<[Expr]>::to_vec).collect()
    }

    pub fn eval(&self, t: f64) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                let value = self.entry(i, j).eval(t);
                if !value.is_finite() {
                    return Err(Error::NonFiniteEntry {
                        matrix: self.name.clone(),
                        row: i + 1,
                        col: j + 1,
                        time: t,
                        value,
                    });
                }
                out[(i, j)] = value;
            }
        }
        Ok(out)
    }

    pub fn is_constant(&self) -> bool {
        self.entries.iter().all(|e| !e.depends_on_time())
    }
}

/// Sparsity pattern of the unknown-parameter matrix `D`.
///
/// `targets[i] = Some(s)` places `theta_i` at `(i, s)`; indices are 0-based
/// and `s <= i` always holds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DStructure {
    targets: Vec<Option<usize>>,
}

impl DStructure {
    pub fn new(targets: Vec<Option<usize>>) -> Result<Self> {
        for (row, target) in targets.iter().enumerate() {
            if let Some(col) = *target {
                if col > row {
                    return Err(Error::Structure(format!(
                        "row {} targets column {}; column may not exceed row",
                        row + 1,
                        col + 1
                    )));
                }
            }
        }
        Ok(Self { targets })
    }

    pub fn empty(n: usize) -> Self {
        Self {
            targets: vec![None; n],
        }
    }

    pub fn n(&self) -> usize {
        self.targets.len()
    }

    pub fn target(&self, row: usize) -> Option<usize> {
        self.targets[row]
    }

    /// `(row, col)` of every active entry, by increasing row.
    pub fn active(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.targets
            .iter()
            .enumerate()
            .filter_map(|(row, t)| t.map(|col| (row, col)))
    }

    /// `D` with `theta[i]` placed in each active row.
    pub fn matrix(&self, theta: &[f64]) -> DMatrix<f64> {
        let n = self.n();
        let mut d = DMatrix::zeros(n, n);
        for (row, col) in self.active() {
            d[(row, col)] = theta[row];
        }
        d
    }

    /// `D` with only row `row` active, at unit value.
    pub fn unit(&self, row: usize) -> DMatrix<f64> {
        let n = self.n();
        let mut d = DMatrix::zeros(n, n);
        if let Some(col) = self.targets[row] {
            d[(row, col)] = 1.0;
        }
        d
    }

    /// Re-checks the structural rules on an assembled matrix: at most one
    /// nonzero per row, nothing above the diagonal.
    pub fn validate_matrix(d: &DMatrix<f64>) -> std::result::Result<(), String> {
        for i in 0..d.nrows() {
            let nonzero: Vec<usize> = (0..d.ncols()).filter(|&j| d[(i, j)] != 0.0).collect();
            if nonzero.len() > 1 {
                return Err(format!("row {} has {} nonzero entries", i + 1, nonzero.len()));
            }
            if let Some(&j) = nonzero.first() {
                if j > i {
                    return Err(format!("row {} has a nonzero above the diagonal", i + 1));
                }
            }
        }
        Ok(())
    }
}

/// `theta(t) = l1 sin(omega t) + l2 cos(omega t)`, the solution family of
/// `theta'' = -omega^2 theta`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaGenerator {
    pub omega: f64,
    pub l: [f64; 2],
}

impl ThetaGenerator {
    pub fn new(omega: f64, l: [f64; 2]) -> Result<Self> {
        if !(omega > 0.0 && omega.is_finite()) {
            return Err(Error::InvalidParameter(format!("omega must be positive, got {omega}")));
        }
        if !l.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidParameter("amplitudes must be finite".into()));
        }
        Ok(Self { omega, l })
    }

    pub fn value(&self, t: f64) -> f64 {
        theta_value(self.omega, self.l, t)
    }
}

pub fn theta_value(omega: f64, l: [f64; 2], t: f64) -> f64 {
    let (s, c) = (omega * t).sin_cos();
    l[0] * s + l[1] * c
}

#[derive(Debug, Clone, PartialEq)]
pub struct LtvSystem {
    a0: TimeMatrix,
    d: DStructure,
    thetas: Vec<Option<ThetaGenerator>>,
    b: TimeMatrix,
    c: RowDVector<f64>,
}

impl LtvSystem {
    /// `thetas[i]` must be `Some` exactly for the active rows of `d`.
    pub fn new(
        a0: TimeMatrix,
        d: DStructure,
        thetas: Vec<Option<ThetaGenerator>>,
        b: TimeMatrix,
        c: RowDVector<f64>,
    ) -> Result<Self> {
        let n = d.n();
        if a0.shape() != (n, n) {
            return Err(Error::Dimension(format!(
                "A0 is {}x{}, expected {n}x{n}",
                a0.shape().0,
                a0.shape().1
            )));
        }
        if b.shape() != (n, 1) {
            return Err(Error::Dimension(format!(
                "B is {}x{}, expected {n}x1",
                b.shape().0,
                b.shape().1
            )));
        }
        if c.len() != n {
            return Err(Error::Dimension(format!("C has {} entries, expected {n}", c.len())));
        }
        if thetas.len() != n {
            return Err(Error::Dimension(format!(
                "{} theta generators for {n} rows",
                thetas.len()
            )));
        }
        for (row, generator) in thetas.iter().enumerate() {
            match (d.target(row), generator.is_some()) {
                (Some(_), false) => {
                    return Err(Error::Structure(format!("row {} is active but has no generator", row + 1)))
                }
                (None, true) => {
                    return Err(Error::Structure(format!("row {} has a generator but no D entry", row + 1)))
                }
                _ => {}
            }
        }
        Ok(Self { a0, d, thetas, b, c })
    }

    pub fn n(&self) -> usize {
        self.d.n()
    }

    pub fn a0(&self) -> &TimeMatrix {
        &self.a0
    }

    pub fn b(&self) -> &TimeMatrix {
        &self.b
    }

    pub fn c(&self) -> &RowDVector<f64> {
        &self.c
    }

    pub fn d_structure(&self) -> &DStructure {
        &self.d
    }

    pub fn theta_generator(&self, row: usize) -> Option<&ThetaGenerator> {
        self.thetas[row].as_ref()
    }

    /// True parameter values per row (zero on inactive rows).
    pub fn theta_values(&self, t: f64) -> Vec<f64> {
        self.thetas
            .iter()
            .map(|g| g.map_or(0.0, |g| g.value(t)))
            .collect()
    }

    pub fn d_matrix(&self, t: f64) -> DMatrix<f64> {
        self.d.matrix(&self.theta_values(t))
    }

    /// Full state matrix `A(t) = A0(t) + D(theta(t))`.
    pub fn a_matrix(&self, t: f64) -> Result<DMatrix<f64>> {
        Ok(self.a0.eval(t)? + self.d_matrix(t))
    }

    pub fn derivative(&self, t: f64, x: &DVector<f64>, u: f64) -> Result<DVector<f64>> {
        Ok(self.a_matrix(t)? * x + self.b.eval(t)?.column(0) * u)
    }
}

/// Column-name helper for per-parameter series: unsuffixed when the plant
/// has a single unknown parameter, `<base>_r<row>` (1-based) otherwise.
pub fn parameter_column(base: &str, row: usize, single: bool) -> String {
    if single {
        base.to_string()
    } else {
        format!("{base}_r{}", row + 1)
    }
}

/// Integrates the plant with fixed-step RK4 from `x0`.
///
/// Records `t`, `x1..xn`, `y`, `u` and `theta_true` for each active row.
pub fn simulate<U>(sys: &LtvSystem, x0: &DVector<f64>, u: U, clock: Clock) -> Result<Trajectory>
where
    U: Fn(f64) -> f64,
{
    clock.check()?;
    let n = sys.n();
    if x0.len() != n {
        return Err(Error::Dimension(format!("x0 has {} entries, expected {n}", x0.len())));
    }
    let samples = clock.len();
    let mut states = vec![Vec::with_capacity(samples); n];
    let mut x = x0.clone();
    for k in 0..samples {
        if k > 0 {
            x = try_rk4_step(|s, x| sys.derivative(s, x, u(s)), clock.time(k - 1), &x, clock.dt)?;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    what: "plant state",
                    time: clock.time(k),
                });
            }
        }
        for (i, series) in states.iter_mut().enumerate() {
            series.push(x[i]);
        }
    }
    let mut traj = Trajectory::new(clock);
    record_outputs(sys, &mut traj, &states, &u)?;
    Ok(traj)
}

pub(crate) fn record_outputs<U>(
    sys: &LtvSystem,
    traj: &mut Trajectory,
    states: &[Vec<f64>],
    u: &U,
) -> Result<()>
where
    U: Fn(f64) -> f64,
{
    let times = traj.times().to_vec();
    let y: Vec<f64> = (0..times.len())
        .map(|k| (0..sys.n()).map(|i| sys.c[i] * states[i][k]).sum())
        .collect();
    for (i, series) in states.iter().enumerate() {
        traj.insert(format!("x{}", i + 1), series.clone())?;
    }
    traj.insert("y", y)?;
    traj.insert("u", times.iter().map(|&t| u(t)).collect())?;
    let single = sys.d.active().count() == 1;
    for (row, _) in sys.d.active() {
        let g = sys.thetas[row].expect("active rows carry generators");
        traj.insert(
            parameter_column("theta_true", row, single),
            times.iter().map(|&t| g.value(t)).collect(),
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateMargin {
    /// 0-based state index.
    pub index: usize,
    pub min_square: f64,
    pub min_time: f64,
    /// First sample time where `x_i^2 <= eps`.
    pub first_violation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    pub structure: std::result::Result<(), String>,
    pub eps: f64,
    pub states: Vec<StateMargin>,
}

impl AssumptionReport {
    pub fn passed(&self) -> bool {
        self.structure.is_ok() && self.states.iter().all(|s| s.first_violation.is_none())
    }
}

/// Reports D-structure validity and, per state, how close `x_i^2` gets to
/// zero along the trajectory. Never fails; states missing from the
/// trajectory are skipped.
pub fn check_assumptions(sys: &LtvSystem, traj: &Trajectory, eps: f64) -> AssumptionReport {
    let ones = vec![1.0; sys.n()];
    let structure = DStructure::validate_matrix(&sys.d.matrix(&ones));
    let times = traj.times();
    let states = (0..sys.n())
        .filter_map(|i| {
            let series = traj.get(&format!("x{}", i + 1))?;
            let mut margin = StateMargin {
                index: i,
                min_square: f64::INFINITY,
                min_time: f64::NAN,
                first_violation: None,
            };
            for (k, &x) in series.iter().enumerate() {
                let sq = x * x;
                if sq < margin.min_square {
                    margin.min_square = sq;
                    margin.min_time = times[k];
                }
                if margin.first_violation.is_none() && (sq.is_nan() || sq <= eps) {
                    margin.first_violation = Some(times[k]);
                }
            }
            Some(margin)
        })
        .collect();
    AssumptionReport {
        structure,
        eps,
        states,
    }
}
