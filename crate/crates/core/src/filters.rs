//! Stable SISO operators in `p = d/dt`, realized in controllable canonical
//! form and integrated with RK4 on the shared clock.
//!
//! Inputs are sampled series. Inside a step the input is interpolated from
//! the samples: a quadratic through the previous, current and next sample
//! once the filter has seen a preceding sample, the straight line joining the
//! two ends before that. [`SisoFilter::step`] holds the input constant
//! instead, for callers that only have the current sample.

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SisoFilter {
    /// Numerator, ascending powers of `p`.
    numerator: Vec<f64>,
    /// Monic denominator without its leading one, ascending powers of `p`.
    denominator: Vec<f64>,
    c: Vec<f64>,
    d: f64,
    state: Vec<f64>,
    /// Last two inputs passed to `step_interp` (`from`, `to`).
    history: Option<(f64, f64)>,
}

impl SisoFilter {
    /// `numerator` and `denominator` are ascending coefficient lists. The
    /// denominator is normalized to monic and must be Hurwitz.
    pub fn new(numerator: &[f64], denominator: &[f64]) -> Result<Self> {
        let den = trim_leading_zeros(denominator);
        let num = trim_leading_zeros(numerator);
        if den.is_empty() {
            return Err(Error::InvalidParameter("denominator is zero".into()));
        }
        let order = den.len() - 1;
        let num_degree = num.len().saturating_sub(1);
        if num_degree > order {
            return Err(Error::ImproperFilter {
                numerator: num_degree,
                denominator: order,
            });
        }
        let lead = den[order];
        let den: Vec<f64> = den.iter().map(|v| v / lead).collect();
        if !is_hurwitz(&den) {
            return Err(Error::InvalidParameter(format!(
                "denominator {den:?} has roots outside the open left half-plane"
            )));
        }
        let mut num: Vec<f64> = num.iter().map(|v| v / lead).collect();
        num.resize(order + 1, 0.0);

        let d = num[order];
        let c = (0..order).map(|j| num[j] - d * den[j]).collect();
        Ok(Self {
            numerator: num,
            denominator: den[..order].to_vec(),
            c,
            d,
            state: vec![0.0; order],
            history: None,
        })
    }

    pub fn order(&self) -> usize {
        self.state.len()
    }

    pub fn numerator(&self) -> &[f64] {
        &self.numerator
    }

    pub fn state(&self) -> &[f64] {
        &self.state
    }

    pub fn reset(&mut self) {
        self.state.iter_mut().for_each(|s| *s = 0.0);
        self.history = None;
    }

    /// Steady-state response to a unit step.
    pub fn dc_gain(&self) -> f64 {
        match self.denominator.first() {
            Some(a0) => self.numerator[0] / a0,
            None => self.d,
        }
    }

    /// Output for the current state and the given current input.
    pub fn output(&self, input: f64) -> f64 {
        self.c.iter().zip(&self.state).map(|(c, x)| c * x).sum::<f64>() + self.d * input
    }

    fn derivative(&self, x: &[f64], input: f64, out: &mut [f64]) {
        let n = x.len();
        if n > 0 {
            out[..n - 1].copy_from_slice(&x[1..]);
            let feedback: f64 = self.denominator.iter().zip(x).map(|(a, x)| a * x).sum();
            out[n - 1] = input - feedback;
        }
    }

    /// Advances one step with the input moving from `from` to `to`; returns
    /// the output at the end of the step. When the previous call ended at
    /// `from`, its start sample bends the path into a quadratic.
    pub fn step_interp(&mut self, from: f64, to: f64, dt: f64) -> Result<f64> {
        let mid = match self.history {
            Some((before, end)) if end == from => (-before + 6.0 * from + 3.0 * to) / 8.0,
            _ => 0.5 * (from + to),
        };
        self.history = Some((from, to));
        self.advance(from, mid, to, dt)
    }

    fn advance(&mut self, from: f64, mid: f64, to: f64, dt: f64) -> Result<f64> {
        let n = self.order();
        if n > 0 {
            let x = &self.state;
            let mut k1 = vec![0.0; n];
            let mut k2 = vec![0.0; n];
            let mut k3 = vec![0.0; n];
            let mut k4 = vec![0.0; n];
            let mut tmp = vec![0.0; n];
            self.derivative(x, from, &mut k1);
            for i in 0..n {
                tmp[i] = x[i] + 0.5 * dt * k1[i];
            }
            self.derivative(&tmp, mid, &mut k2);
            for i in 0..n {
                tmp[i] = x[i] + 0.5 * dt * k2[i];
            }
            self.derivative(&tmp, mid, &mut k3);
            for i in 0..n {
                tmp[i] = x[i] + dt * k3[i];
            }
            self.derivative(&tmp, to, &mut k4);
            for i in 0..n {
                tmp[i] = x[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
            if tmp.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    what: "filter state",
                    time: f64::NAN,
                });
            }
            self.state = tmp;
        }
        Ok(self.output(to))
    }

    /// Advances one step holding `input` constant.
    pub fn step(&mut self, input: f64, dt: f64) -> Result<f64> {
        self.history = None;
        self.advance(input, input, input, dt)
    }

    /// Filters a whole series from the current state. `out[0]` is the output
    /// before any step is taken.
    pub fn run(&mut self, input: &[f64], dt: f64) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(input.len());
        if let Some(&first) = input.first() {
            out.push(self.output(first));
        }
        for pair in input.windows(2) {
            out.push(self.step_interp(pair[0], pair[1], dt)?);
        }
        Ok(out)
    }
}

fn trim_leading_zeros(coeffs: &[f64]) -> &[f64] {
    let len = coeffs.iter().rposition(|c| *c != 0.0).map_or(0, |p| p + 1);
    &coeffs[..len]
}

/// Routh test on a monic ascending coefficient list.
fn is_hurwitz(monic: &[f64]) -> bool {
    let order = monic.len() - 1;
    if order == 0 {
        return true;
    }
    if monic.iter().any(|c| c.is_nan() || *c <= 0.0) {
        return false;
    }
    // Rows of the Routh array, built from descending coefficients.
    let desc: Vec<f64> = monic.iter().rev().copied().collect();
    let mut prev: Vec<f64> = desc.iter().step_by(2).copied().collect();
    let mut curr: Vec<f64> = desc.iter().skip(1).step_by(2).copied().collect();
    for _ in 0..order {
        let pivot = match curr.first() {
            Some(p) if *p > 0.0 => *p,
            Some(_) => return false,
            None => return true,
        };
        let next: Vec<f64> = (0..prev.len().saturating_sub(1))
            .map(|j| {
                let a = curr.get(j + 1).copied().unwrap_or(0.0);
                (pivot * prev[j + 1] - prev[0] * a) / pivot
            })
            .collect();
        prev = curr;
        curr = next;
    }
    true
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, j| acc * (n - j) as f64 / (j + 1) as f64)
}

/// Realizes `gain * p^k / (p + lambda)^m`.
pub fn make_lambda_filter(k: usize, lambda: f64, m: usize, gain: f64) -> Result<SisoFilter> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter(format!("lambda must be positive, got {lambda}")));
    }
    if m == 0 {
        return Err(Error::InvalidParameter("denominator power must be at least 1".into()));
    }
    if k > m {
        return Err(Error::ImproperFilter {
            numerator: k,
            denominator: m,
        });
    }
    let denominator: Vec<f64> = (0..=m)
        .map(|j| binomial(m, j) * lambda.powi((m - j) as i32))
        .collect();
    let mut numerator = vec![0.0; k + 1];
    numerator[k] = gain;
    SisoFilter::new(&numerator, &denominator)
}

/// One sample of the signals the swapping regressor consumes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwapSample {
    pub x_i: f64,
    pub x_s: f64,
    pub dx_s: f64,
}

/// Streaming form of the swapping-lemma rewrite
///
/// ```text
/// L/(p+L)[dx_i/x_s] = (1/x_s) (L p/(p+L))[x_i] + L/(p+L)[(dx_s/x_s^2) (p/(p+L))[x_i]]
/// ```
///
/// which filters `dx_i/x_s` without differentiating `x_i`.
#[derive(Debug, Clone)]
pub struct SwappingRegressor {
    lambda: f64,
    highpass: SisoFilter,
    outer: SisoFilter,
    last: Option<(SwapSample, f64)>,
}

impl SwappingRegressor {
    pub fn new(lambda: f64) -> Result<Self> {
        Ok(Self {
            lambda,
            highpass: make_lambda_filter(1, lambda, 1, 1.0)?,
            outer: make_lambda_filter(0, lambda, 1, lambda)?,
            last: None,
        })
    }

    /// Feeds the next sample and returns the regressor at that sample. The
    /// caller guarantees `x_s` is nonzero.
    pub fn push(&mut self, sample: SwapSample, dt: f64) -> Result<f64> {
        let (w, product_prev) = match self.last {
            None => (self.highpass.output(sample.x_i), None),
            Some((prev, product_prev)) => (
                self.highpass.step_interp(prev.x_i, sample.x_i, dt)?,
                Some(product_prev),
            ),
        };
        let product = sample.dx_s / (sample.x_s * sample.x_s) * w;
        let lagged = match product_prev {
            None => self.outer.output(product),
            Some(p) => self.outer.step_interp(p, product, dt)?,
        };
        self.last = Some((sample, product));
        Ok(self.lambda * w / sample.x_s + lagged)
    }
}

/// Right-hand side of the swapping identity over whole series.
///
/// Fails with [`Error::Singularity`] at the first sample where
/// `|x_s| <= eps_div`.
pub fn swapping_regressor(
    x_i: &[f64],
    x_s: &[f64],
    dx_s: &[f64],
    lambda: f64,
    dt: f64,
    eps_div: f64,
) -> Result<Vec<f64>> {
    if x_s.len() != x_i.len() || dx_s.len() != x_i.len() {
        return Err(Error::Dimension("swapping regressor inputs differ in length".into()));
    }
    let mut regressor = SwappingRegressor::new(lambda)?;
    (0..x_i.len())
        .map(|k| {
            if x_s[k].is_nan() || x_s[k].abs() <= eps_div {
                return Err(Error::Singularity {
                    signal: "x_s",
                    time: k as f64 * dt,
                });
            }
            regressor.push(
                SwapSample {
                    x_i: x_i[k],
                    x_s: x_s[k],
                    dx_s: dx_s[k],
                },
                dt,
            )
        })
        .collect()
}
