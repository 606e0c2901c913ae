//! Adaptive state observation and sinusoidal-parameter identification for
//! single-output linear time-varying plants.
//!
//! The pieces compose in a fixed order: [`model`] describes and simulates the
//! plant, [`observer`] checks the gain conditions and reconstructs the state
//! from `y` and `u` without differentiating `y`, [`filters`] realizes the
//! stable operators in `p = d/dt` used to build regressions, and [`ident`]
//! runs the frequency, amplitude and swapping-lemma estimators on the state
//! estimate.

pub mod error;
pub mod expr;
pub mod filters;
pub mod ident;
pub mod model;
pub mod ode;
pub mod observer;
pub mod reference;
pub mod trajectory;

pub use error::{Error, Result};
pub use expr::Expr;
pub use model::{DStructure, LtvSystem, ThetaGenerator, TimeMatrix};
pub use ode::Clock;
pub use trajectory::Trajectory;
