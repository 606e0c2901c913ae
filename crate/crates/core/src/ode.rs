//! Fixed-step classical Runge-Kutta integration.

use nalgebra::DVector;

/// One classical RK4 step of `dx/dt = f(t, x)`.
pub fn rk4_step<F>(mut f: F, t: f64, x: &DVector<f64>, dt: f64) -> DVector<f64>
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
{
    let half = 0.5 * dt;
    let k1 = f(t, x);
    let k2 = f(t + half, &(x + &k1 * half));
    let k3 = f(t + half, &(x + &k2 * half));
    let k4 = f(t + dt, &(x + &k3 * dt));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// RK4 step for a right-hand side that can fail (e.g. on a non-finite
/// matrix entry).
pub fn try_rk4_step<F>(mut f: F, t: f64, x: &DVector<f64>, dt: f64) -> crate::Result<DVector<f64>>
where
    F: FnMut(f64, &DVector<f64>) -> crate::Result<DVector<f64>>,
{
    let half = 0.5 * dt;
    let k1 = f(t, x)?;
    let k2 = f(t + half, &(x + &k1 * half))?;
    let k3 = f(t + half, &(x + &k2 * half))?;
    let k4 = f(t + dt, &(x + &k3 * dt))?;
    Ok(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0))
}

/// Uniform sampling clock shared by plant, observer and filters.
///
/// Sample `k` sits at exactly `t0 + k * dt`. A clock may be empty (zero
/// samples), which is what a zero horizon produces.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Clock {
    pub t0: f64,
    pub dt: f64,
    pub samples: usize,
}

impl Clock {
    pub fn new(t0: f64, dt: f64, samples: usize) -> Self {
        Self { t0, dt, samples }
    }

    /// Clock covering `[t0, t0 + horizon]` with `round(horizon / dt)` steps.
    /// A non-positive horizon gives an empty clock.
    pub fn over(t0: f64, horizon: f64, dt: f64) -> Self {
        let samples = if horizon > 0.0 { (horizon / dt).round() as usize + 1 } else { 0 };
        Self { t0, dt, samples }
    }

    pub fn len(&self) -> usize {
        self.samples
    }

    pub fn is_empty(&self) -> bool {
        self.samples == 0
    }

    /// Number of integration steps between the first and last sample.
    pub fn steps(&self) -> usize {
        self.samples.saturating_sub(1)
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn end(&self) -> f64 {
        self.time(self.steps())
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.samples).map(|k| self.time(k)).collect()
    }

    pub(crate) fn check(&self) -> crate::Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(crate::Error::InvalidParameter(format!(
                "dt must be positive and finite, got {}",
                self.dt
            )));
        }
        if !self.t0.is_finite() {
            return Err(crate::Error::InvalidParameter("t0 must be finite".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay_error(dt: f64) -> f64 {
        let clock = Clock::over(0.0, 1.0, dt);
        let mut x = DVector::from_element(1, 1.0);
        for k in 0..clock.steps() {
            x = rk4_step(|_, x| -x, clock.time(k), &x, dt);
        }
        (x[0] - (-1.0f64).exp()).abs()
    }

    #[test]
    fn exponential_decay_accuracy() {
        assert!(decay_error(1e-3) < 1e-8);
    }

    #[test]
    fn fourth_order_convergence() {
        let ratio = decay_error(0.02) / decay_error(0.01);
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn clock_samples() {
        let c = Clock::over(0.5, 1.0, 0.25);
        assert_eq!(c.steps(), 4);
        assert_eq!(c.times(), vec![0.5, 0.75, 1.0, 1.25, 1.5]);
        assert!(Clock::over(0.0, 0.0, 1e-3).is_empty());
    }
}
