//! Reference plants with known ground truth.
//!
//! `two_state_*` is the second-order example with one sinusoidal parameter in
//! `a11` (`omega = 3`, `l = (3, 0.5)`). `three_state_*` is a synthetic
//! third-order plant whose parameter sits at `(2, 1)`, so it needs the
//! swapping-lemma route (`omega = 2`, `l = (1, -0.5)`).

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::expr::Expr;
use crate::model::{DStructure, LtvSystem, ThetaGenerator, TimeMatrix};
use crate::observer::ObserverGains;

fn parse(text: &str) -> Expr {
    Expr::parse(text).expect("reference expressions are valid")
}

fn matrix(name: &str, rows: &[&[&str]]) -> TimeMatrix {
    TimeMatrix::from_rows(
        name,
        rows.iter().map(|r| r.iter().map(|e| parse(e)).collect()).collect(),
    )
    .expect("reference matrices are rectangular")
}

pub const TWO_STATE_A12: &str = "0.1 - 0.1*sin(t) + 0.1*sin(5*t) + 1.5*cos(5*t)";

pub fn two_state_system() -> LtvSystem {
    LtvSystem::new(
        matrix("A0", &[&["0", TWO_STATE_A12], &["-0.1", "-1 + 0.5*cos(2*t)"]]),
        DStructure::new(vec![Some(0), None]).unwrap(),
        vec![Some(ThetaGenerator::new(3.0, [3.0, 0.5]).unwrap()), None],
        matrix("B", &[&["-1"], &["4"]]),
        RowDVector::from_row_slice(&[1.0, 1.0]),
    )
    .unwrap()
}

pub fn two_state_gains() -> ObserverGains {
    ObserverGains::new(
        DVector::from_row_slice(&[1.0, 0.0]),
        DVector::from_row_slice(&[-4.0, 4.0]),
        DVector::from_row_slice(&[0.1, 0.5]),
        matrix("M", &[&["0.1", "1 - 0.5*cos(2*t)"], &["-0.1", "-1 + 0.5*cos(2*t)"]]),
    )
    .unwrap()
}

pub fn three_state_system() -> LtvSystem {
    let a0 = DMatrix::from_row_slice(3, 3, &[-1.0, 0.0, 0.0, 0.5, -2.0, 0.0, 0.0, 1.0, -3.0]);
    LtvSystem::new(
        TimeMatrix::constant("A0", &a0),
        DStructure::new(vec![None, Some(0), None]).unwrap(),
        vec![None, Some(ThetaGenerator::new(2.0, [1.0, -0.5]).unwrap()), None],
        TimeMatrix::constant("B", &DMatrix::from_column_slice(3, 1, &[1.0, 0.5, 1.0])),
        RowDVector::from_row_slice(&[1.0, 1.0, 1.0]),
    )
    .unwrap()
}

/// `G = e2` makes `(I - G C) D = 0`; `M = (I - G C) A0` has eigenvalues
/// `{-4, -1, 0}` and `C L = 2` moves the zero one to `-2`.
pub fn three_state_gains() -> ObserverGains {
    let m = DMatrix::from_row_slice(3, 3, &[-1.0, 0.0, 0.0, 1.0, -1.0, 3.0, 0.0, 1.0, -3.0]);
    ObserverGains::new(
        DVector::from_row_slice(&[0.0, 1.0, 0.0]),
        DVector::from_row_slice(&[1.0, -2.0, 1.0]),
        DVector::from_row_slice(&[0.0, 2.0, 0.0]),
        TimeMatrix::constant("M", &m),
    )
    .unwrap()
}
