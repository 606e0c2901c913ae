//! Gain-condition verification and the derivative-free state observer.
//!
//! With gains satisfying
//!
//! ```text
//! B - N - G C B = 0,   D - G C D = 0,   A0 - G C A0 = M,   Mc = M - L C
//! ```
//!
//! the error `x - x_hat` obeys `d/dt x_err = Mc(t) x_err`. The observer is run
//! through `z = x_hat - G y`, which never needs `dy/dt`:
//!
//! ```text
//! dz/dt = M z + M G y + N u + L y - L C x_hat,   x_hat = z + G y
//! ```

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::model::{record_outputs, LtvSystem, TimeMatrix};
use crate::ode::{try_rk4_step, Clock};
use crate::trajectory::Trajectory;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ObserverGains {
    pub g: DVector<f64>,
    pub n: DVector<f64>,
    pub l: DVector<f64>,
    pub m: TimeMatrix,
}

impl ObserverGains {
    pub fn new(g: DVector<f64>, n: DVector<f64>, l: DVector<f64>, m: TimeMatrix) -> Result<Self> {
        let dim = g.len();
        if n.len() != dim || l.len() != dim {
            return Err(Error::Dimension(format!(
                "G, N, L have lengths {}, {}, {}",
                dim,
                n.len(),
                l.len()
            )));
        }
        if m.shape() != (dim, dim) {
            return Err(Error::Dimension(format!(
                "M is {}x{}, expected {dim}x{dim}",
                m.shape().0,
                m.shape().1
            )));
        }
        Ok(Self { g, n, l, m })
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }

    /// `Mc(t) = M(t) - L C`.
    pub fn mc(&self, c: &RowDVector<f64>, t: f64) -> Result<DMatrix<f64>> {
        Ok(self.m.eval(t)? - &self.l * c)
    }

    fn check_against(&self, sys: &LtvSystem) -> Result<()> {
        if self.dim() != sys.n() {
            return Err(Error::Dimension(format!(
                "gains are for n = {}, plant has n = {}",
                self.dim(),
                sys.n()
            )));
        }
        Ok(())
    }
}

/// Sup-norm (largest absolute entry over the grid) of each gain condition.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    /// `B - N - G C B`
    pub input: f64,
    /// `D - G C D`, over unit instantiations of every active D row.
    pub coupling: f64,
    /// `A0 - G C A0 - M`
    pub drift: f64,
    pub grid: Clock,
}

impl ConditionReport {
    pub fn max(&self) -> f64 {
        self.input.max(self.coupling).max(self.drift)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max() <= tolerance
    }
}

fn sup_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

/// Evaluates the three algebraic gain conditions at every grid point.
///
/// The coupling condition is linear in each `theta_i`, so it is checked on
/// `D` with a single active row set to one, for each active row in turn.
pub fn verify_conditions(sys: &LtvSystem, gains: &ObserverGains, grid: Clock) -> Result<ConditionReport> {
    gains.check_against(sys)?;
    let gc = &gains.g * sys.c();
    let projector = DMatrix::identity(sys.n(), sys.n()) - &gc;

    let structure = sys.d_structure();
    let coupling = structure
        .active()
        .map(|(row, _)| sup_abs(&(&projector * structure.unit(row))))
        .fold(0.0, f64::max);

    let mut input = 0.0f64;
    let mut drift = 0.0f64;
    for k in 0..grid.len() {
        let t = grid.time(k);
        let b = sys.b().eval(t)?;
        let a0 = sys.a0().eval(t)?;
        let m = gains.m.eval(t)?;
        input = input.max(sup_abs(&(&projector * b - DMatrix::from_column_slice(sys.n(), 1, gains.n.as_slice()))));
        drift = drift.max(sup_abs(&(&projector * a0 - m)));
    }
    Ok(ConditionReport {
        input,
        coupling,
        drift,
        grid,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayReport {
    pub times: Vec<f64>,
    pub norms: Vec<f64>,
    /// Least-squares slope of `ln |x_err|` over the second half of the span.
    pub rate: Option<f64>,
    pub unstable: bool,
}

impl DecayReport {
    pub fn initial(&self) -> f64 {
        self.norms.first().copied().unwrap_or(0.0)
    }

    pub fn last(&self) -> f64 {
        self.norms.last().copied().unwrap_or(0.0)
    }

    pub fn decays(&self) -> bool {
        !self.unstable && self.rate.is_some_and(|r| r < 0.0) && self.last() < self.initial()
    }
}

/// Integrates `d/dt x_err = Mc(t) x_err` from `x_err0` and fits an
/// exponential rate to the tail half. Blow-up is reported, not raised.
pub fn check_error_stability(
    gains: &ObserverGains,
    c: &RowDVector<f64>,
    x_err0: &DVector<f64>,
    clock: Clock,
) -> Result<DecayReport> {
    clock.check()?;
    if x_err0.len() != gains.dim() || c.len() != gains.dim() {
        return Err(Error::Dimension("initial error or C does not match the gains".into()));
    }
    let mut times = Vec::with_capacity(clock.len());
    let mut norms = Vec::with_capacity(clock.len());
    let mut x = x_err0.clone();
    let mut unstable = false;
    let limit = 1e12 * x_err0.norm().max(1.0);
    for k in 0..clock.len() {
        if k > 0 {
            x = try_rk4_step(|s, x| Ok(gains.mc(c, s)? * x), clock.time(k - 1), &x, clock.dt)?;
        }
        let norm = x.norm();
        if !norm.is_finite() || norm > limit {
            unstable = true;
            break;
        }
        times.push(clock.time(k));
        norms.push(norm);
    }
    let rate = if unstable { None } else { tail_log_slope(&times, &norms) };
    Ok(DecayReport {
        times,
        norms,
        rate,
        unstable,
    })
}

fn tail_log_slope(times: &[f64], norms: &[f64]) -> Option<f64> {
    let start = times.len() / 2;
    let points: Vec<(f64, f64)> = times[start..]
        .iter()
        .zip(&norms[start..])
        .filter(|(_, &v)| v > f64::MIN_POSITIVE)
        .map(|(&t, &v)| (t, v.ln()))
        .collect();
    if points.len() < 2 {
        return None;
    }
    let count = points.len() as f64;
    let mean_t = points.iter().map(|p| p.0).sum::<f64>() / count;
    let mean_v = points.iter().map(|p| p.1).sum::<f64>() / count;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_t).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_t) * (p.1 - mean_v)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObserverState {
    pub z: DVector<f64>,
    pub x_hat: DVector<f64>,
    pub y_hat: f64,
}

impl ObserverState {
    pub fn new(gains: &ObserverGains, c: &RowDVector<f64>, z: DVector<f64>, y: f64) -> Self {
        let x_hat = &z + &gains.g * y;
        let y_hat = c.dot(&x_hat.transpose());
        Self { z, x_hat, y_hat }
    }
}

fn observer_rhs(
    gains: &ObserverGains,
    c: &RowDVector<f64>,
    t: f64,
    z: &DVector<f64>,
    y: f64,
    u: f64,
) -> Result<DVector<f64>> {
    let x_hat = z + &gains.g * y;
    let c_x_hat = (c * &x_hat)[0];
    Ok(gains.m.eval(t)? * &x_hat + &gains.n * u + &gains.l * (y - c_x_hat))
}

/// Advances the observer by one RK4 step with `y` and `u` held over the step.
pub fn observer_step(
    state: &ObserverState,
    gains: &ObserverGains,
    c: &RowDVector<f64>,
    y: f64,
    u: f64,
    t: f64,
    dt: f64,
) -> Result<ObserverState> {
    let z = try_rk4_step(|s, z| observer_rhs(gains, c, s, z, y, u), t, &state.z, dt)?;
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Divergence {
            what: "observer state",
            time: t + dt,
        });
    }
    Ok(ObserverState::new(gains, c, z, y))
}

/// Co-simulates plant and observer on one clock.
///
/// Plant and observer form one joint ODE, so the observer sees `y = C x` at
/// every RK stage. `noise`, when given, holds one additive output offset per
/// step that is applied to the measurement for the whole step.
///
/// Columns: everything [`crate::model::simulate`] records, then
/// `xhat1..xhatn`, `xerr1..xerrn`, `xerr_norm` and `yhat`.
pub fn run_observer<U>(
    sys: &LtvSystem,
    gains: &ObserverGains,
    x0: &DVector<f64>,
    z0: &DVector<f64>,
    u: U,
    clock: Clock,
    noise: Option<&[f64]>,
) -> Result<Trajectory>
where
    U: Fn(f64) -> f64,
{
    clock.check()?;
    gains.check_against(sys)?;
    let n = sys.n();
    if x0.len() != n || z0.len() != n {
        return Err(Error::Dimension(format!("x0 and z0 must have {n} entries")));
    }
    if let Some(noise) = noise {
        if noise.len() < clock.len() {
            return Err(Error::Dimension(format!(
                "{} noise samples for {} clock samples",
                noise.len(),
                clock.len()
            )));
        }
    }
    let noise_at = |k: usize| noise.map_or(0.0, |v| v[k]);
    let c = sys.c();

    let mut joint = DVector::zeros(2 * n);
    joint.rows_mut(0, n).copy_from(x0);
    joint.rows_mut(n, n).copy_from(z0);

    let mut states = vec![Vec::with_capacity(clock.len()); n];
    let mut estimates = vec![Vec::with_capacity(clock.len()); n];
    let mut y_meas = Vec::with_capacity(clock.len());
    for k in 0..clock.len() {
        if k > 0 {
            let offset = noise_at(k - 1);
            joint = try_rk4_step(
                |s, w| {
                    let x = w.rows(0, n).into_owned();
                    let z = w.rows(n, n).into_owned();
                    let us = u(s);
                    let y = (c * &x)[0] + offset;
                    let mut out = DVector::zeros(2 * n);
                    out.rows_mut(0, n).copy_from(&sys.derivative(s, &x, us)?);
                    out.rows_mut(n, n).copy_from(&observer_rhs(gains, c, s, &z, y, us)?);
                    Ok(out)
                },
                clock.time(k - 1),
                &joint,
                clock.dt,
            )?;
            if joint.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    what: "plant/observer state",
                    time: clock.time(k),
                });
            }
        }
        let x = joint.rows(0, n);
        let y = (c * x)[0] + noise_at(k);
        let x_hat = joint.rows(n, n) + &gains.g * y;
        for i in 0..n {
            states[i].push(x[i]);
            estimates[i].push(x_hat[i]);
        }
        y_meas.push(y);
    }

    let mut traj = Trajectory::new(clock);
    record_outputs(sys, &mut traj, &states, &u)?;
    if noise.is_some() {
        traj.insert("y", y_meas)?;
    }
    let samples = clock.len();
    let mut err_norm = vec![0.0; samples];
    let mut y_hat = vec![0.0; samples];
    for i in 0..n {
        let err: Vec<f64> = (0..samples).map(|k| states[i][k] - estimates[i][k]).collect();
        for k in 0..samples {
            err_norm[k] += err[k] * err[k];
            y_hat[k] += c[i] * estimates[i][k];
        }
        traj.insert(format!("xhat{}", i + 1), estimates[i].clone())?;
        traj.insert(format!("xerr{}", i + 1), err)?;
    }
    traj.insert("xerr_norm", err_norm.into_iter().map(f64::sqrt).collect())?;
    traj.insert("yhat", y_hat)?;
    Ok(traj)
}

/// Autonomous error dynamics `d/dt x_err = Mc(t) x_err` sampled on `clock`.
pub fn integrate_error(
    gains: &ObserverGains,
    c: &RowDVector<f64>,
    x_err0: &DVector<f64>,
    clock: Clock,
) -> Result<Vec<DVector<f64>>> {
    clock.check()?;
    let mut out = Vec::with_capacity(clock.len());
    let mut x = x_err0.clone();
    for k in 0..clock.len() {
        if k > 0 {
            x = try_rk4_step(|s, x| Ok(gains.mc(c, s)? * x), clock.time(k - 1), &x, clock.dt)?;
        }
        out.push(x.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DStructure;
    use crate::reference::{two_state_gains, two_state_system};

    fn grid() -> Clock {
        Clock::over(0.0, 10.0, 0.01)
    }

    #[test]
    fn reference_gains_satisfy_conditions() {
        let report = verify_conditions(&two_state_system(), &two_state_gains(), grid()).unwrap();
        assert!(report.max() < 1e-12, "{report:?}");
        assert_eq!(report.grid.len(), 1001);
    }

    #[test]
    fn zero_g_leaves_only_coupling_residual() {
        let sys = two_state_system();
        let gains = ObserverGains::new(
            DVector::zeros(2),
            DVector::from_row_slice(&[-1.0, 4.0]),
            DVector::zeros(2),
            sys.a0().clone(),
        )
        .unwrap();
        let report = verify_conditions(&sys, &gains, grid()).unwrap();
        assert_eq!(report.input, 0.0);
        assert_eq!(report.drift, 0.0);
        assert_eq!(report.coupling, 1.0);
    }

    #[test]
    fn residuals_are_linear_in_perturbations() {
        let sys = two_state_system();
        let mut gains = two_state_gains();
        gains.n[0] += 1.0;
        let report = verify_conditions(&sys, &gains, grid()).unwrap();
        assert_eq!(report.input, 1.0);

        let mut gains = two_state_gains();
        let shifted: Vec<Vec<crate::Expr>> = gains
            .m
            .rows()
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|e| crate::Expr::Add(Box::new(e), Box::new(crate::Expr::Const(0.25))))
                    .collect()
            })
            .collect();
        gains.m = TimeMatrix::from_rows("M", shifted).unwrap();
        let report = verify_conditions(&sys, &gains, grid()).unwrap();
        assert!((report.drift - 0.25).abs() < 1e-12);
    }

    #[test]
    fn dimension_mismatch_is_structural() {
        let sys = two_state_system();
        let gains = ObserverGains::new(
            DVector::zeros(3),
            DVector::zeros(3),
            DVector::zeros(3),
            TimeMatrix::zeros("M", 3, 3),
        )
        .unwrap();
        assert!(matches!(verify_conditions(&sys, &gains, grid()), Err(Error::Dimension(_))));
        assert!(ObserverGains::new(DVector::zeros(2), DVector::zeros(2), DVector::zeros(2), TimeMatrix::zeros("M", 2, 1)).is_err());
    }

    fn constant_gains(m: DMatrix<f64>) -> ObserverGains {
        let n = m.nrows();
        ObserverGains::new(DVector::zeros(n), DVector::zeros(n), DVector::zeros(n), TimeMatrix::constant("M", &m)).unwrap()
    }

    #[test]
    fn stable_constant_error_dynamics() {
        let gains = constant_gains(-DMatrix::identity(2, 2));
        let c = RowDVector::from_row_slice(&[1.0, 1.0]);
        let report = check_error_stability(&gains, &c, &DVector::from_element(2, 1.0), Clock::over(0.0, 5.0, 1e-3)).unwrap();
        for (t, norm) in report.times.iter().zip(&report.norms).step_by(500) {
            assert!((norm - 2f64.sqrt() * (-t).exp()).abs() < 1e-10);
        }
        let rate = report.rate.unwrap();
        assert!((rate + 1.0).abs() < 0.02, "{rate}");
        assert!(report.decays());
    }

    #[test]
    fn unstable_error_dynamics_are_flagged() {
        let gains = constant_gains(DMatrix::identity(2, 2));
        let c = RowDVector::from_row_slice(&[1.0, 1.0]);
        let report = check_error_stability(&gains, &c, &DVector::from_element(2, 1.0), Clock::over(0.0, 5.0, 1e-3)).unwrap();
        assert!(!report.decays());
        let blow_up = constant_gains(DMatrix::identity(1, 1) * 50.0);
        let c1 = RowDVector::from_element(1, 1.0);
        let report = check_error_stability(&blow_up, &c1, &DVector::from_element(1, 1.0), Clock::over(0.0, 5.0, 1e-3)).unwrap();
        assert!(report.unstable);
        assert!(!report.decays());
    }

    #[test]
    fn reference_error_dynamics_contract() {
        let gains = two_state_gains();
        let sys = two_state_system();
        let report = check_error_stability(&gains, sys.c(), &DVector::from_row_slice(&[1.0, -1.0]), Clock::over(0.0, 10.0, 1e-3)).unwrap();
        assert!(report.last() / report.initial() < 1e-2, "{}", report.last());
        assert!(report.decays());
    }

    #[test]
    fn observer_equilibrium_and_identity() {
        let gains = two_state_gains();
        let c = RowDVector::from_row_slice(&[1.0, 1.0]);
        let state = ObserverState::new(&gains, &c, DVector::zeros(2), 0.0);
        let next = observer_step(&state, &gains, &c, 0.0, 0.0, 0.0, 1e-3).unwrap();
        assert_eq!(next.z, DVector::zeros(2));
        assert_eq!(next.x_hat, DVector::zeros(2));

        let moved = observer_step(&state, &gains, &c, 1.3, -0.7, 0.4, 1e-3).unwrap();
        assert_eq!(moved.x_hat, &moved.z + &gains.g * 1.3);
        assert_eq!(moved.y_hat, (&c * &moved.x_hat)[0]);
    }

    #[test]
    fn observer_step_matches_rhs_to_first_order() {
        let gains = two_state_gains();
        let c = RowDVector::from_row_slice(&[1.0, 1.0]);
        let state = ObserverState::new(&gains, &c, DVector::from_row_slice(&[0.37, -1.21]), 0.8);
        let rhs = observer_rhs(&gains, &c, 2.0, &state.z, 0.8, 0.3).unwrap();
        for dt in [1e-3, 1e-4] {
            let next = observer_step(&state, &gains, &c, 0.8, 0.3, 2.0, dt).unwrap();
            let gap = (&next.z - &state.z - &rhs * dt).amax();
            assert!(gap < 10.0 * dt * dt, "dt {dt}: {gap}");
        }
    }

    #[test]
    fn zero_plant_stays_at_zero() {
        let sys = LtvSystem::new(
            TimeMatrix::zeros("A0", 2, 2),
            DStructure::empty(2),
            vec![None, None],
            TimeMatrix::zeros("B", 2, 1),
            RowDVector::from_row_slice(&[1.0, 1.0]),
        )
        .unwrap();
        let gains = two_state_gains();
        let tr = run_observer(&sys, &gains, &DVector::zeros(2), &DVector::zeros(2), |_| 0.0, Clock::over(0.0, 1.0, 1e-2), None).unwrap();
        for (name, values) in tr.columns().skip(1) {
            assert!(values.iter().all(|v| *v == 0.0), "{name}");
        }
    }

    #[test]
    fn closed_loop_converges() {
        let sys = two_state_system();
        let gains = two_state_gains();
        let tr = run_observer(
            &sys,
            &gains,
            &DVector::from_row_slice(&[1.0, 1.0]),
            &DVector::zeros(2),
            |_| -1.0,
            Clock::over(0.0, 20.0, 1e-3),
            None,
        )
        .unwrap();
        let k = tr.len() - 1;
        let max_state = (0..tr.len())
            .map(|j| tr.get("x1").unwrap()[j].hypot(tr.get("x2").unwrap()[j]))
            .fold(0.0, f64::max);
        assert!(tr.get("xerr_norm").unwrap()[k] < 1e-2 * max_state);
        // y_err = C x_err exactly.
        for j in (0..tr.len()).step_by(997) {
            let y_err = tr.get("y").unwrap()[j] - tr.get("yhat").unwrap()[j];
            let c_err = tr.get("xerr1").unwrap()[j] + tr.get("xerr2").unwrap()[j];
            assert!((y_err - c_err).abs() < 1e-12);
        }
    }

    #[test]
    fn error_matches_autonomous_dynamics() {
        let sys = two_state_system();
        let gains = two_state_gains();
        let x0 = DVector::from_row_slice(&[1.0, 1.0]);
        let z0 = DVector::from_row_slice(&[0.5, -0.5]);
        let clock = Clock::over(0.0, 10.0, 1e-3);
        let tr = run_observer(&sys, &gains, &x0, &z0, |t: f64| t.sin(), clock, None).unwrap();
        let y0 = (sys.c() * &x0)[0];
        let err0 = &x0 - (&z0 + &gains.g * y0);
        let reference = integrate_error(&gains, sys.c(), &err0, clock).unwrap();
        let gap = (0..clock.len())
            .map(|k| {
                (tr.get("xerr1").unwrap()[k] - reference[k][0])
                    .abs()
                    .max((tr.get("xerr2").unwrap()[k] - reference[k][1]).abs())
            })
            .fold(0.0, f64::max);
        assert!(gap < 1e-6 * 10.0, "{gap}");
    }

    #[test]
    fn decays_without_output_injection() {
        // With z(0) = 0 and C G = 1 the output error starts (and stays) at
        // zero, so the L C term never acts and the reference M alone decays.
        let sys = two_state_system();
        let mut gains = two_state_gains();
        gains.l = DVector::zeros(2);
        let tr = run_observer(
            &sys,
            &gains,
            &DVector::from_row_slice(&[1.0, 1.0]),
            &DVector::zeros(2),
            |_| -1.0,
            Clock::over(0.0, 20.0, 1e-3),
            None,
        )
        .unwrap();
        let err = tr.get("xerr_norm").unwrap();
        assert!(err[err.len() - 1] < 1e-3 * err[0]);
    }
}
