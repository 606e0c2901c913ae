//! Identification of the sinusoidal parameters from the state estimate.
//!
//! For a row whose parameter multiplies its own state (`s = i`) the frequency
//! comes from the log-square transform: with `V = x_i^2`, `xi = ln V` and
//! `alpha = h_i / x_i`,
//!
//! ```text
//! theta_i = xi'/2 - alpha,   theta_i'' = -omega^2 theta_i
//! ```
//!
//! and filtering through `lambda/(p+lambda)^3` turns this into the scalar
//! regression `Y = Phi k` with `k = -omega^2`. Rows with `s < i` reach the
//! same regression through the swapping regressor instead. In both cases `k`
//! is estimated by the gradient law `k' = -gamma Phi (Phi k - Y)` and
//! `omega = sqrt|k|`.
//!
//! With `omega` known, `theta_i = l . [sin(omega t), cos(omega t)]` is linear
//! in `l`; the amplitude stage filters that relation into `q = phi^T l` and
//! runs DREM: `Yext = L2/(p+L2)[phi q]`, `Omega = L2/(p+L2)[phi phi^T]`,
//! `Z = adj(Omega) Yext`, `Delta = det(Omega)`, after which every component
//! obeys its own scalar flow `l_j' = -gamma2 Delta (Delta l_j - Z_j)`.
//!
//! Gradient flows are discretized exactly for a regressor held over the step:
//! `k <- k - (1 - exp(-gamma Phi^2 dt)) (Phi k - Y) / Phi`.

use nalgebra::{Matrix2, Vector2};

use crate::filters::{make_lambda_filter, SisoFilter, SwapSample, SwappingRegressor};
use crate::model::{parameter_column, theta_value, LtvSystem};
use crate::trajectory::Trajectory;
use crate::{Error, Result};

/// Scalar gradient estimator for `target = regressor * value`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientEstimator {
    pub gain: f64,
    pub estimate: f64,
}

impl GradientEstimator {
    pub fn new(gain: f64, initial: f64) -> Self {
        Self {
            gain,
            estimate: initial,
        }
    }

    /// Exact solution of the gradient flow over `dt` with the regressor and
    /// target frozen at the given values.
    pub fn update(&mut self, regressor: f64, target: f64, dt: f64) {
        if regressor == 0.0 {
            return;
        }
        let contraction = -(-self.gain * regressor * regressor * dt).exp_m1();
        self.estimate -= contraction / regressor * (regressor * self.estimate - target);
    }
}

pub fn det2(m: &Matrix2<f64>) -> f64 {
    m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)]
}

pub fn adjugate2(m: &Matrix2<f64>) -> Matrix2<f64> {
    Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)])
}

/// Log-square transform of one state estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct XiSignal {
    pub v: Vec<f64>,
    pub xi: Vec<f64>,
    pub alpha: Vec<f64>,
    /// Samples where `x^2 <= eps_div`; `xi` and `alpha` repeat the last
    /// ungated value there (zero before the first one).
    pub gated: Vec<bool>,
}

impl XiSignal {
    pub fn gated_count(&self) -> usize {
        self.gated.iter().filter(|g| **g).count()
    }
}

pub fn build_xi(x_hat: &[f64], h: &[f64], eps_div: f64) -> Result<XiSignal> {
    if x_hat.len() != h.len() {
        return Err(Error::Dimension("state and h series differ in length".into()));
    }
    let n = x_hat.len();
    let mut out = XiSignal {
        v: Vec::with_capacity(n),
        xi: Vec::with_capacity(n),
        alpha: Vec::with_capacity(n),
        gated: Vec::with_capacity(n),
    };
    let (mut xi_held, mut alpha_held) = (0.0, 0.0);
    for (&x, &h) in x_hat.iter().zip(h) {
        let v = x * x;
        let gated = v.is_nan() || v <= eps_div;
        if !gated {
            xi_held = v.ln();
            alpha_held = h / x;
        }
        out.v.push(v);
        out.xi.push(xi_held);
        out.alpha.push(alpha_held);
        out.gated.push(gated);
    }
    Ok(out)
}

/// One sample of a frequency estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OmegaSample {
    pub y: f64,
    pub phi: f64,
    pub k_hat: f64,
    pub omega_hat: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OmegaTrace {
    pub y: Vec<f64>,
    pub phi: Vec<f64>,
    pub k_hat: Vec<f64>,
    pub omega_hat: Vec<f64>,
}

impl OmegaTrace {
    fn push(&mut self, s: OmegaSample) {
        self.y.push(s.y);
        self.phi.push(s.phi);
        self.k_hat.push(s.k_hat);
        self.omega_hat.push(s.omega_hat);
    }

    pub fn len(&self) -> usize {
        self.k_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k_hat.is_empty()
    }

    pub fn final_omega(&self) -> f64 {
        self.omega_hat.last().copied().unwrap_or(0.0)
    }
}

/// `k_hat`, `omega_hat = sqrt|k_hat|` and the regressor seen at each sample.
#[derive(Debug, Clone)]
struct RegressionState {
    gradient: GradientEstimator,
    current: Option<(f64, f64, bool)>,
}

impl RegressionState {
    fn new(gamma: f64) -> Self {
        Self {
            gradient: GradientEstimator::new(gamma, 0.0),
            current: None,
        }
    }

    /// Moves the estimate across the step that ends at the new sample, using
    /// the regression pair from the step's start, then records the new pair.
    fn advance(&mut self, y: f64, phi: f64, gated: bool, dt: f64, time: f64) -> Result<OmegaSample> {
        if let Some((y_prev, phi_prev, gated_prev)) = self.current {
            if !gated_prev {
                self.gradient.update(phi_prev, y_prev, dt);
            }
        }
        if !self.gradient.estimate.is_finite() {
            return Err(Error::Divergence { what: "k_hat", time });
        }
        self.current = Some((y, phi, gated));
        Ok(OmegaSample {
            y,
            phi,
            k_hat: self.gradient.estimate,
            omega_hat: self.gradient.estimate.abs().sqrt(),
        })
    }
}

/// Pushes a sample through a filter, stepping from the previous sample.
fn feed(filter: &mut SisoFilter, prev: Option<f64>, value: f64, dt: f64) -> Result<f64> {
    match prev {
        None => Ok(filter.output(value)),
        Some(p) => filter.step_interp(p, value, dt),
    }
}

/// Streaming frequency estimator for rows with `s = i`.
///
/// ```text
/// Y   = 1/2 (L p^3/(p+L)^3)[xi] - (L p^2/(p+L)^3)[alpha]
/// Phi = 1/2 (L p  /(p+L)^3)[xi] - (L    /(p+L)^3)[alpha]
/// ```
#[derive(Debug, Clone)]
pub struct OmegaEstimator {
    xi_filters: [SisoFilter; 2],
    alpha_filters: [SisoFilter; 2],
    last: Option<(f64, f64)>,
    regression: RegressionState,
    samples: usize,
}

impl OmegaEstimator {
    pub fn new(lambda: f64, gamma: f64) -> Result<Self> {
        check_gain("gamma1", gamma)?;
        Ok(Self {
            xi_filters: [make_lambda_filter(3, lambda, 3, lambda)?, make_lambda_filter(1, lambda, 3, lambda)?],
            alpha_filters: [make_lambda_filter(2, lambda, 3, lambda)?, make_lambda_filter(0, lambda, 3, lambda)?],
            last: None,
            regression: RegressionState::new(gamma),
            samples: 0,
        })
    }

    pub fn push(&mut self, xi: f64, alpha: f64, gated: bool, dt: f64) -> Result<OmegaSample> {
        let prev = self.last;
        let xi_p3 = feed(&mut self.xi_filters[0], prev.map(|p| p.0), xi, dt)?;
        let xi_p1 = feed(&mut self.xi_filters[1], prev.map(|p| p.0), xi, dt)?;
        let alpha_p2 = feed(&mut self.alpha_filters[0], prev.map(|p| p.1), alpha, dt)?;
        let alpha_p0 = feed(&mut self.alpha_filters[1], prev.map(|p| p.1), alpha, dt)?;
        self.last = Some((xi, alpha));
        let y = 0.5 * xi_p3 - alpha_p2;
        let phi = 0.5 * xi_p1 - alpha_p0;
        let time = self.samples as f64 * dt;
        self.samples += 1;
        self.regression.advance(y, phi, gated, dt, time)
    }
}

fn check_gain(name: &str, value: f64) -> Result<()> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("{name} must be positive, got {value}")))
    }
}

/// Runs the frequency estimator over a whole transformed signal.
pub fn omega_pipeline(xi: &XiSignal, lambda: f64, gamma: f64, dt: f64) -> Result<OmegaTrace> {
    let mut est = OmegaEstimator::new(lambda, gamma)?;
    let mut trace = OmegaTrace::default();
    for k in 0..xi.xi.len() {
        trace.push(est.push(xi.xi[k], xi.alpha[k], xi.gated[k], dt)?);
    }
    Ok(trace)
}

/// One sample of the signals a `s < i` row consumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwappedSample {
    pub x_i: f64,
    pub x_s: f64,
    pub dx_s: f64,
    pub h_i: f64,
}

/// Streaming frequency estimator for rows with `s < i`.
///
/// With `S` the swapping regressor (the filtered `dx_i/x_s`):
///
/// ```text
/// Y   = (L^2 p^2/(p+L)^2)[S] - (L^3 p^2/(p+L)^3)[h_i/x_s]
/// Phi = (L^2    /(p+L)^2)[S] - (L^3    /(p+L)^3)[h_i/x_s]
/// ```
///
/// Samples with `|x_s| <= eps_div` are replaced by the last valid sample and
/// freeze adaptation.
#[derive(Debug, Clone)]
pub struct SwappedOmegaEstimator {
    swap: SwappingRegressor,
    s_filters: [SisoFilter; 2],
    ratio_filters: [SisoFilter; 2],
    last: Option<(f64, f64)>,
    held: Option<SwappedSample>,
    eps_div: f64,
    regression: RegressionState,
    samples: usize,
}

impl SwappedOmegaEstimator {
    pub fn new(lambda: f64, gamma: f64, eps_div: f64) -> Result<Self> {
        check_gain("gamma", gamma)?;
        let l2 = lambda * lambda;
        let l3 = l2 * lambda;
        Ok(Self {
            swap: SwappingRegressor::new(lambda)?,
            s_filters: [make_lambda_filter(2, lambda, 2, l2)?, make_lambda_filter(0, lambda, 2, l2)?],
            ratio_filters: [make_lambda_filter(2, lambda, 3, l3)?, make_lambda_filter(0, lambda, 3, l3)?],
            last: None,
            held: None,
            eps_div,
            regression: RegressionState::new(gamma),
            samples: 0,
        })
    }

    pub fn push(&mut self, sample: SwappedSample, dt: f64) -> Result<(OmegaSample, bool)> {
        let gated = sample.x_s.is_nan() || sample.x_s.abs() <= self.eps_div;
        let used = if gated {
            self.held.unwrap_or(SwappedSample {
                x_i: 0.0,
                x_s: 1.0,
                dx_s: 0.0,
                h_i: 0.0,
            })
        } else {
            self.held = Some(sample);
            sample
        };
        let s = self.swap.push(
            SwapSample {
                x_i: used.x_i,
                x_s: used.x_s,
                dx_s: used.dx_s,
            },
            dt,
        )?;
        let ratio = used.h_i / used.x_s;
        let prev = self.last;
        let s_p2 = feed(&mut self.s_filters[0], prev.map(|p| p.0), s, dt)?;
        let s_p0 = feed(&mut self.s_filters[1], prev.map(|p| p.0), s, dt)?;
        let r_p2 = feed(&mut self.ratio_filters[0], prev.map(|p| p.1), ratio, dt)?;
        let r_p0 = feed(&mut self.ratio_filters[1], prev.map(|p| p.1), ratio, dt)?;
        self.last = Some((s, ratio));
        let time = self.samples as f64 * dt;
        self.samples += 1;
        let out = self.regression.advance(s_p2 - r_p2, s_p0 - r_p0, gated, dt, time)?;
        Ok((out, gated))
    }
}

/// Frequency estimate for a row with `s < i` over whole series.
#[allow(clippy::too_many_arguments)]
pub fn theta_i_pipeline(
    x_i: &[f64],
    x_s: &[f64],
    dx_s: &[f64],
    h_i: &[f64],
    lambda: f64,
    gamma: f64,
    eps_div: f64,
    dt: f64,
) -> Result<OmegaTrace> {
    let n = x_i.len();
    if x_s.len() != n || dx_s.len() != n || h_i.len() != n {
        return Err(Error::Dimension("row signals differ in length".into()));
    }
    let mut est = SwappedOmegaEstimator::new(lambda, gamma, eps_div)?;
    let mut trace = OmegaTrace::default();
    for k in 0..n {
        let sample = SwappedSample {
            x_i: x_i[k],
            x_s: x_s[k],
            dx_s: dx_s[k],
            h_i: h_i[k],
        };
        trace.push(est.push(sample, dt)?.0);
    }
    Ok(trace)
}

/// One sample of the amplitude stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DremSample {
    pub q: f64,
    pub phi: Vector2<f64>,
    pub extended: Vector2<f64>,
    pub omega: Matrix2<f64>,
    pub mixed: Vector2<f64>,
    pub delta: f64,
    pub l_hat: Vector2<f64>,
}

/// Streaming DREM amplitude estimator.
///
/// `q = (L1 p/(p+L1))[x_i] - (L1/(p+L1))[h_i]`,
/// `phi = (L1/(p+L1))[x_m sin(w t), x_m cos(w t)]`, where `x_m` is the state
/// the parameter multiplies (`x_i` itself when `s = i`).
#[derive(Debug, Clone)]
pub struct DremEstimator {
    gamma2: f64,
    q_filters: [SisoFilter; 2],
    phi_filters: [SisoFilter; 2],
    /// `Yext_1`, `Yext_2`, `Omega_11`, `Omega_12`, `Omega_22`.
    mixing: [SisoFilter; 5],
    last_raw: Option<[f64; 4]>,
    last_products: Option<[f64; 5]>,
    current: Option<(f64, Vector2<f64>)>,
    l_hat: Vector2<f64>,
    samples: usize,
}

impl DremEstimator {
    pub fn new(lambda1: f64, lambda2: f64, gamma2: f64) -> Result<Self> {
        check_gain("gamma2", gamma2)?;
        let lag2 = || make_lambda_filter(0, lambda2, 1, lambda2);
        Ok(Self {
            gamma2,
            q_filters: [make_lambda_filter(1, lambda1, 1, lambda1)?, make_lambda_filter(0, lambda1, 1, lambda1)?],
            phi_filters: [make_lambda_filter(0, lambda1, 1, lambda1)?, make_lambda_filter(0, lambda1, 1, lambda1)?],
            mixing: [lag2()?, lag2()?, lag2()?, lag2()?, lag2()?],
            last_raw: None,
            last_products: None,
            current: None,
            l_hat: Vector2::zeros(),
            samples: 0,
        })
    }

    pub fn l_hat(&self) -> Vector2<f64> {
        self.l_hat
    }

    /// Feeds the sample at time `t`; `omega` is the frequency used to build
    /// the regressor at this sample.
    pub fn push(&mut self, x_i: f64, x_mult: f64, h_i: f64, t: f64, omega: f64, dt: f64) -> Result<DremSample> {
        let (s, c) = (omega * t).sin_cos();
        let raw = [x_i, h_i, x_mult * s, x_mult * c];
        let prev = self.last_raw;
        let q = feed(&mut self.q_filters[0], prev.map(|p| p[0]), raw[0], dt)?
            - feed(&mut self.q_filters[1], prev.map(|p| p[1]), raw[1], dt)?;
        let phi = Vector2::new(
            feed(&mut self.phi_filters[0], prev.map(|p| p[2]), raw[2], dt)?,
            feed(&mut self.phi_filters[1], prev.map(|p| p[3]), raw[3], dt)?,
        );
        self.last_raw = Some(raw);

        let products = [phi[0] * q, phi[1] * q, phi[0] * phi[0], phi[0] * phi[1], phi[1] * phi[1]];
        let mut mixed_out = [0.0; 5];
        for (j, out) in mixed_out.iter_mut().enumerate() {
            *out = feed(&mut self.mixing[j], self.last_products.map(|p| p[j]), products[j], dt)?;
        }
        self.last_products = Some(products);

        let extended = Vector2::new(mixed_out[0], mixed_out[1]);
        let omega_mat = Matrix2::new(mixed_out[2], mixed_out[3], mixed_out[3], mixed_out[4]);
        let mixed = adjugate2(&omega_mat) * extended;
        let delta = det2(&omega_mat);

        if let Some((delta_prev, mixed_prev)) = self.current {
            for j in 0..2 {
                let mut flow = GradientEstimator::new(self.gamma2, self.l_hat[j]);
                flow.update(delta_prev, mixed_prev[j], dt);
                self.l_hat[j] = flow.estimate;
            }
        }
        if !self.l_hat.iter().all(|v| v.is_finite()) {
            return Err(Error::Divergence {
                what: "l_hat",
                time: t,
            });
        }
        self.current = Some((delta, mixed));
        self.samples += 1;
        Ok(DremSample {
            q,
            phi,
            extended,
            omega: omega_mat,
            mixed,
            delta,
            l_hat: self.l_hat,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DremTrace {
    pub l_hat: Vec<[f64; 2]>,
    pub delta: Vec<f64>,
}

impl DremTrace {
    fn push(&mut self, s: &DremSample) {
        self.l_hat.push([s.l_hat[0], s.l_hat[1]]);
        self.delta.push(s.delta);
    }

    pub fn final_l(&self) -> [f64; 2] {
        self.l_hat.last().copied().unwrap_or([0.0, 0.0])
    }

    /// Minimum and median of `|Delta|`.
    pub fn excitation(&self) -> Option<(f64, f64)> {
        if self.delta.is_empty() {
            return None;
        }
        let mut abs: Vec<f64> = self.delta.iter().map(|d| d.abs()).collect();
        abs.sort_by(f64::total_cmp);
        Some((abs[0], abs[abs.len() / 2]))
    }

    /// `Delta` never left zero: the regressor carried no excitation.
    pub fn poorly_excited(&self) -> bool {
        self.delta.iter().all(|d| d.abs() <= 1e-12)
    }
}

/// Amplitude stage over whole series with a fixed frequency estimate.
#[allow(clippy::too_many_arguments)]
pub fn drem_pipeline(
    x_i: &[f64],
    x_mult: &[f64],
    h_i: &[f64],
    times: &[f64],
    omega: f64,
    lambda1: f64,
    lambda2: f64,
    gamma2: f64,
    dt: f64,
) -> Result<DremTrace> {
    let n = x_i.len();
    if x_mult.len() != n || h_i.len() != n || times.len() != n {
        return Err(Error::Dimension("amplitude-stage signals differ in length".into()));
    }
    let mut est = DremEstimator::new(lambda1, lambda2, gamma2)?;
    let mut trace = DremTrace::default();
    for k in 0..n {
        trace.push(&est.push(x_i[k], x_mult[k], h_i[k], times[k], omega, dt)?);
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThetaEstimate {
    pub omega_hat: f64,
    pub l_hat: [f64; 2],
    pub theta_hat: Vec<f64>,
}

pub fn theta_reconstruct(omega_hat: f64, l_hat: [f64; 2], times: &[f64]) -> ThetaEstimate {
    ThetaEstimate {
        omega_hat,
        l_hat,
        theta_hat: times.iter().map(|&t| theta_value(omega_hat, l_hat, t)).collect(),
    }
}

/// When the amplitude stage reads its frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Staging {
    /// Frequency stage first on `[t0, t0 + freq_stage]`; its final estimate is
    /// frozen and the amplitude stage replays the recorded signals.
    Replay,
    /// Both stages run together; the amplitude stage uses the running
    /// frequency estimate.
    Cascade,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdentSettings {
    /// Filter constant for `s = i` rows.
    pub lambda: f64,
    pub gamma1: f64,
    /// Filter constant and gain for `s < i` rows.
    pub lambda_i: f64,
    pub gamma_i: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma2: f64,
    pub eps_div: f64,
    /// Length of the frequency stage in replay mode.
    pub freq_stage: f64,
    pub staging: Staging,
}

impl Default for IdentSettings {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            gamma1: 2000.0,
            lambda_i: 10.0,
            gamma_i: 20.0,
            lambda1: 10.0,
            lambda2: 1.0,
            gamma2: 10.0,
            eps_div: 1e-6,
            freq_stage: 40.0,
            staging: Staging::Replay,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowEstimate {
    /// 0-based row and the column its parameter multiplies.
    pub row: usize,
    pub col: usize,
    /// Frequency-stage samples (a prefix of the clock in replay mode).
    pub frequency: OmegaTrace,
    /// Frequency used at each sample by the amplitude stage.
    pub omega_used: Vec<f64>,
    pub amplitude: DremTrace,
    pub theta_hat: Vec<f64>,
    pub gated: usize,
}

impl RowEstimate {
    pub fn final_omega(&self) -> f64 {
        self.omega_used.last().copied().unwrap_or(0.0)
    }

    /// `k_hat` over the whole clock, holding the last value after the
    /// frequency stage ends.
    pub fn k_hat_full(&self, len: usize) -> Vec<f64> {
        extend_held(&self.frequency.k_hat, len)
    }

    pub fn omega_hat_full(&self, len: usize) -> Vec<f64> {
        extend_held(&self.frequency.omega_hat, len)
    }
}

fn extend_held(values: &[f64], len: usize) -> Vec<f64> {
    let mut out = values.to_vec();
    let last = values.last().copied().unwrap_or(0.0);
    out.resize(len, last);
    out
}

/// `h_i(t) = sum_j a0_ij(t) x_j + b_i(t) u(t)` for every row.
pub fn known_dynamics(sys: &LtvSystem, states: &[&[f64]], u: &[f64], times: &[f64]) -> Result<Vec<Vec<f64>>> {
    let n = sys.n();
    let mut h = vec![Vec::with_capacity(times.len()); n];
    for (k, &t) in times.iter().enumerate() {
        let a0 = sys.a0().eval(t)?;
        let b = sys.b().eval(t)?;
        for (i, hi) in h.iter_mut().enumerate() {
            let mut acc = b[(i, 0)] * u[k];
            for (j, xj) in states.iter().enumerate() {
                acc += a0[(i, j)] * xj[k];
            }
            hi.push(acc);
        }
    }
    Ok(h)
}

/// Runs the whole identification cascade on a trajectory holding
/// `xhat1..xhatn` and `u`.
///
/// Rows are processed by increasing index, so the derivative of a source
/// state (`h_s + theta_hat_s x_hat_{s'}` when row `s` has its own parameter)
/// is always available when a `s < i` row needs it.
pub fn identify(sys: &LtvSystem, traj: &Trajectory, settings: &IdentSettings) -> Result<Vec<RowEstimate>> {
    let n = sys.n();
    let times = traj.times();
    let dt = traj.dt();
    let len = traj.len();
    let mut columns = Vec::with_capacity(n);
    for i in 0..n {
        let name = format!("xhat{}", i + 1);
        columns.push(
            traj.get(&name)
                .ok_or_else(|| Error::Dimension(format!("trajectory has no '{name}' column")))?,
        );
    }
    let u = traj
        .get("u")
        .ok_or_else(|| Error::Dimension("trajectory has no 'u' column".into()))?;
    let h = known_dynamics(sys, &columns, u, times)?;

    let stage_len = match settings.staging {
        Staging::Replay => {
            let steps = (settings.freq_stage / dt).round().max(0.0) as usize;
            (steps + 1).min(len)
        }
        Staging::Cascade => len,
    };

    let mut results: Vec<RowEstimate> = Vec::new();
    for (row, col) in sys.d_structure().active() {
        let x_i = columns[row];
        let x_mult = columns[col];
        let (frequency, gated) = if col == row {
            let xi = build_xi(&x_i[..stage_len], &h[row][..stage_len], settings.eps_div)?;
            let gated = xi.gated_count();
            (omega_pipeline(&xi, settings.lambda, settings.gamma1, dt)?, gated)
        } else {
            let dx_s = source_derivative(col, &h, &columns, &results, sys);
            let mut est = SwappedOmegaEstimator::new(settings.lambda_i, settings.gamma_i, settings.eps_div)?;
            let mut trace = OmegaTrace::default();
            let mut gated = 0;
            for k in 0..stage_len {
                let (sample, was_gated) = est.push(
                    SwappedSample {
                        x_i: x_i[k],
                        x_s: x_mult[k],
                        dx_s: dx_s[k],
                        h_i: h[row][k],
                    },
                    dt,
                )?;
                gated += usize::from(was_gated);
                trace.push(sample);
            }
            (trace, gated)
        };

        let omega_used = match settings.staging {
            Staging::Replay => vec![frequency.final_omega(); len],
            Staging::Cascade => frequency.omega_hat.clone(),
        };
        let mut drem = DremEstimator::new(settings.lambda1, settings.lambda2, settings.gamma2)?;
        let mut amplitude = DremTrace::default();
        for k in 0..len {
            amplitude.push(&drem.push(x_i[k], x_mult[k], h[row][k], times[k], omega_used[k], dt)?);
        }
        let theta_hat = (0..len)
            .map(|k| theta_value(omega_used[k], amplitude.l_hat[k], times[k]))
            .collect();
        results.push(RowEstimate {
            row,
            col,
            frequency,
            omega_used,
            amplitude,
            theta_hat,
            gated,
        });
    }
    Ok(results)
}

fn source_derivative(
    source: usize,
    h: &[Vec<f64>],
    states: &[&[f64]],
    done: &[RowEstimate],
    sys: &LtvSystem,
) -> Vec<f64> {
    match (sys.d_structure().target(source), done.iter().find(|r| r.row == source)) {
        (Some(target), Some(estimate)) => h[source]
            .iter()
            .zip(&estimate.theta_hat)
            .zip(states[target])
            .map(|((h, theta), x)| h + theta * x)
            .collect(),
        _ => h[source].clone(),
    }
}

/// Adds `omega_hat`, `k_hat`, `l1_hat`, `l2_hat`, `theta_hat` and `delta`
/// columns for every estimated row.
pub fn record_estimates(traj: &mut Trajectory, estimates: &[RowEstimate]) -> Result<()> {
    let single = estimates.len() == 1;
    let len = traj.len();
    for est in estimates {
        let name = |base: &str| parameter_column(base, est.row, single);
        traj.insert(name("omega_hat"), est.omega_hat_full(len))?;
        traj.insert(name("k_hat"), est.k_hat_full(len))?;
        traj.insert(name("l1_hat"), est.amplitude.l_hat.iter().map(|l| l[0]).collect())?;
        traj.insert(name("l2_hat"), est.amplitude.l_hat.iter().map(|l| l[1]).collect())?;
        traj.insert(name("theta_hat"), est.theta_hat.clone())?;
        traj.insert(name("delta"), est.amplitude.delta.clone())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filters::make_lambda_filter;
    use proptest::prelude::*;

    const DT: f64 = 1e-3;

    fn grid(horizon: f64, dt: f64) -> Vec<f64> {
        let n = (horizon / dt).round() as usize;
        (0..=n).map(|k| k as f64 * dt).collect()
    }

    /// `xi` and `alpha` with `xi'/2 - alpha = l1 sin(w t) + l2 cos(w t)`
    /// exactly, for `alpha = 0.3 cos t`.
    fn exact_log_signals(times: &[f64], omega: f64, l: [f64; 2]) -> XiSignal {
        let xi = times
            .iter()
            .map(|&t| 2.0 * ((-l[0] * (omega * t).cos() + l[1] * (omega * t).sin()) / omega + 0.3 * t.sin()))
            .collect::<Vec<_>>();
        let alpha = times.iter().map(|t| 0.3 * t.cos()).collect::<Vec<_>>();
        XiSignal {
            v: xi.iter().map(|x| x.exp()).collect(),
            gated: vec![false; xi.len()],
            xi,
            alpha,
        }
    }

    #[test]
    fn xi_examples() {
        let e = std::f64::consts::E;
        let s = build_xi(&[e, e], &[0.0, 0.0], 1e-6).unwrap();
        assert!((s.xi[0] - 2.0).abs() < 1e-15);
        assert_eq!(s.alpha, vec![0.0, 0.0]);

        let s = build_xi(&[2.0 + 0f64.sin()], &[1.0], 1e-6).unwrap();
        assert_eq!(s.alpha[0], 0.5);
        assert!((s.xi[0] - 4f64.ln()).abs() < 1e-15);
        assert_eq!(s.v[0], 4.0);
    }

    #[test]
    fn xi_gates_near_zero() {
        let s = build_xi(&[1.0, 1e-9, 2.0], &[1.0, 1.0, 1.0], 1e-6).unwrap();
        assert_eq!(s.gated, vec![false, true, false]);
        assert_eq!(s.xi[1], s.xi[0]);
        assert_eq!(s.alpha[1], s.alpha[0]);
        assert!(s.xi.iter().chain(&s.alpha).all(|v| v.is_finite()));
        assert_eq!(s.gated_count(), 1);
    }

    #[test]
    fn gradient_flow_closed_form() {
        let gamma = 50.0;
        let mut est = GradientEstimator::new(gamma, 0.0);
        for k in 1..=1000 {
            est.update(1.0, -9.0, DT);
            let t = k as f64 * DT;
            assert!((est.estimate + 9.0 * (1.0 - (-gamma * t).exp())).abs() < 1e-12);
        }
        assert!((est.estimate.abs().sqrt() - 3.0).abs() < 1e-9);
    }

    #[test]
    fn frozen_regressor_flow() {
        let (gamma, delta, target) = (10.0, 0.7, [3.0, 0.5]);
        let mut l = [GradientEstimator::new(gamma, 0.0), GradientEstimator::new(gamma, 0.0)];
        for k in 1..=2000 {
            let t = k as f64 * DT;
            for j in 0..2 {
                l[j].update(delta, delta * target[j], DT);
                let expected = target[j] * (1.0 - (-gamma * delta * delta * t).exp());
                assert!((l[j].estimate - expected).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn adjugate_and_determinant() {
        let omega = Matrix2::new(2.0, 0.0, 0.0, 3.0);
        let mixed = adjugate2(&omega) * Vector2::new(2.0, 6.0);
        assert_eq!(mixed, Vector2::new(6.0, 12.0));
        assert_eq!(det2(&omega), 6.0);
    }

    proptest! {
        #[test]
        fn adjugate_identity(a in -100.0f64..100.0, b in -100.0f64..100.0, c in -100.0f64..100.0, d in -100.0f64..100.0) {
            let m = Matrix2::new(a, b, c, d);
            let gap = adjugate2(&m) * m - Matrix2::identity() * det2(&m);
            prop_assert!(gap.amax() <= 1e-12 * (1.0 + m.amax().powi(2)));
        }

        #[test]
        fn gradient_error_never_grows(phi in -2.0f64..2.0, y in -20.0f64..20.0, k0 in -20.0f64..20.0, gamma in 0.1f64..100.0) {
            let mut est = GradientEstimator::new(gamma, k0);
            let mut err = (phi * est.estimate - y).abs();
            for _ in 0..100 {
                est.update(phi, y, DT);
                let next = (phi * est.estimate - y).abs();
                prop_assert!(next <= err + 1e-12);
                err = next;
            }
        }
    }

    #[test]
    fn omega_regression_consistency() {
        let times = grid(20.0, DT);
        let signals = exact_log_signals(&times, 3.0, [3.0, 0.5]);
        let trace = omega_pipeline(&signals, 10.0, 2000.0, DT).unwrap();
        let gap = times
            .iter()
            .zip(trace.y.iter().zip(&trace.phi))
            .filter(|(t, _)| **t > 2.0)
            .map(|(_, (y, phi))| (y + 9.0 * phi).abs())
            .fold(0.0, f64::max);
        assert!(gap < 1e-3, "{gap}");
        assert!((trace.final_omega() - 3.0).abs() < 1e-3, "{}", trace.final_omega());
    }

    #[test]
    fn omega_is_amplitude_free() {
        let times = grid(20.0, DT);
        let base = omega_pipeline(&exact_log_signals(&times, 3.0, [3.0, 0.5]), 10.0, 2000.0, DT).unwrap();
        let scaled = omega_pipeline(&exact_log_signals(&times, 3.0, [6.0, 1.0]), 10.0, 2000.0, DT).unwrap();
        let (a, b) = (base.k_hat.last().unwrap(), scaled.k_hat.last().unwrap());
        assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        assert!((a + 9.0).abs() < 1e-2);
    }

    #[test]
    fn log_transform_recovers_theta() {
        // x = exp(g), g' = theta + 0.2 cos t, so h = 0.2 cos(t) x.
        let dt = 1e-4;
        let lambda = 1000.0;
        let times = grid(3.0, dt);
        let theta = |t: f64| theta_value(3.0, [3.0, 0.5], t);
        let g = |t: f64| (-3.0 * (3.0 * t).cos() + 0.5 * (3.0 * t).sin()) / 3.0 + 0.2 * t.sin();
        let x: Vec<f64> = times.iter().map(|&t| g(t).exp()).collect();
        let h: Vec<f64> = times.iter().zip(&x).map(|(t, x)| 0.2 * t.cos() * x).collect();
        let s = build_xi(&x, &h, 1e-6).unwrap();
        let xi_dot = make_lambda_filter(1, lambda, 1, lambda).unwrap().run(&s.xi, dt).unwrap();
        for k in (0..times.len()).filter(|k| times[*k] > 0.05) {
            let recovered = 0.5 * xi_dot[k] - s.alpha[k];
            assert!((recovered - theta(times[k])).abs() < 0.05, "t = {}", times[k]);
        }
    }

    fn swapped_signals(times: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let theta = |t: f64| theta_value(2.0, [1.0, -0.5], t);
        let x_i = times.iter().map(|t| t.sin()).collect();
        let x_s: Vec<f64> = times.iter().map(|t| 2.0 + t.cos()).collect();
        let dx_s = times.iter().map(|t| -t.sin()).collect();
        let h_i = times
            .iter()
            .zip(&x_s)
            .map(|(&t, xs)| t.cos() - theta(t) * xs)
            .collect();
        (x_i, x_s, dx_s, h_i)
    }

    #[test]
    fn swapped_regression_consistency() {
        let times = grid(30.0, DT);
        let (x_i, x_s, dx_s, h_i) = swapped_signals(&times);
        let trace = theta_i_pipeline(&x_i, &x_s, &dx_s, &h_i, 10.0, 20.0, 1e-6, DT).unwrap();
        let gap = times
            .iter()
            .zip(trace.y.iter().zip(&trace.phi))
            .filter(|(t, _)| **t > 2.0)
            .map(|(_, (y, phi))| (y + 4.0 * phi).abs())
            .fold(0.0, f64::max);
        assert!(gap < 1e-2, "{gap}");
        assert!((trace.final_omega() - 2.0).abs() < 0.01, "{}", trace.final_omega());
    }

    #[test]
    fn swapped_estimator_gates_small_divisor() {
        let mut est = SwappedOmegaEstimator::new(10.0, 20.0, 1e-6).unwrap();
        let good = SwappedSample { x_i: 1.0, x_s: 2.0, dx_s: 0.0, h_i: 0.5 };
        let (a, gated_a) = est.push(good, DT).unwrap();
        let (b, gated_b) = est.push(SwappedSample { x_s: 0.0, ..good }, DT).unwrap();
        assert!(!gated_a && gated_b);
        assert!(b.y.is_finite() && b.phi.is_finite());
        assert_eq!(a.k_hat, b.k_hat);
    }

    #[test]
    fn drem_recovers_amplitudes_with_exact_frequency() {
        // x' = h + theta x with h = -x + 2; integrate the scalar plant finely.
        let times = grid(20.0, DT);
        let l = [3.0, 0.5];
        let mut x = vec![1.0];
        for k in 0..times.len() - 1 {
            let f = |t: f64, x: f64| -x + 2.0 + theta_value(3.0, l, t) * x;
            let (t, xk) = (times[k], x[k]);
            let k1 = f(t, xk);
            let k2 = f(t + DT / 2.0, xk + DT / 2.0 * k1);
            let k3 = f(t + DT / 2.0, xk + DT / 2.0 * k2);
            let k4 = f(t + DT, xk + DT * k3);
            x.push(xk + DT / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4));
        }
        let h: Vec<f64> = x.iter().map(|x| -x + 2.0).collect();
        let trace = drem_pipeline(&x, &x, &h, &times, 3.0, 10.0, 1.0, 10.0, DT).unwrap();
        let [l1, l2] = trace.final_l();
        assert!((l1 - 3.0).abs() < 1e-3 && (l2 - 0.5).abs() < 1e-3, "{l1} {l2}");
        assert!(!trace.poorly_excited());
        let (min, median) = trace.excitation().unwrap();
        assert!(min >= 0.0 && median > 0.0);
    }

    #[test]
    fn drem_flags_missing_excitation() {
        let n = 1000;
        let times = grid((n - 1) as f64 * DT, DT);
        let trace = drem_pipeline(&vec![0.0; n], &vec![0.0; n], &vec![0.0; n], &times, 3.0, 10.0, 1.0, 10.0, DT).unwrap();
        assert!(trace.poorly_excited());
        assert_eq!(trace.final_l(), [0.0, 0.0]);
    }

    #[test]
    fn theta_reconstruction() {
        let times = grid(5.0, 0.01);
        assert!(theta_reconstruct(3.0, [0.0, 0.0], &times).theta_hat.iter().all(|v| *v == 0.0));
        let est = theta_reconstruct(3.0, [3.0, 0.5], &times);
        for (t, v) in times.iter().zip(&est.theta_hat) {
            assert_eq!(*v, theta_value(3.0, [3.0, 0.5], *t));
        }
        // A frequency offset makes the error grow roughly like |l| dw t.
        let off = theta_reconstruct(3.01, [3.0, 0.5], &grid(50.0, 0.01));
        let err = off
            .theta_hat
            .iter()
            .zip(grid(50.0, 0.01))
            .map(|(v, t)| (v - theta_value(3.0, [3.0, 0.5], t)).abs())
            .collect::<Vec<_>>();
        let early = err[..100].iter().cloned().fold(0.0, f64::max);
        let late = err[err.len() - 100..].iter().cloned().fold(0.0, f64::max);
        assert!(late > 10.0 * early);
        assert!(late <= 3.05 * 0.01 * 50.0 + 1e-9);
    }

    #[test]
    fn invalid_gains_rejected() {
        assert!(OmegaEstimator::new(10.0, 0.0).is_err());
        assert!(DremEstimator::new(10.0, 1.0, -1.0).is_err());
        assert!(SwappedOmegaEstimator::new(-1.0, 1.0, 1e-6).is_err());
    }
}
