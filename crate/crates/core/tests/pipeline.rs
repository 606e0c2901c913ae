use nalgebra::DVector;

use ltv_observer::ident::{identify, record_estimates, IdentSettings, Staging};
use ltv_observer::model::{check_assumptions, simulate};
use ltv_observer::observer::run_observer;
use ltv_observer::reference::{three_state_gains, three_state_system, two_state_gains, two_state_system};
use ltv_observer::Clock;

fn tail_max(times: &[f64], values: &[f64], from: f64) -> f64 {
    times
        .iter()
        .zip(values)
        .filter(|(t, _)| **t >= from - 1e-9)
        .map(|(_, v)| v.abs())
        .fold(0.0, f64::max)
}

#[test]
fn two_state_run_recovers_parameters() {
    let sys = two_state_system();
    let gains = two_state_gains();
    let clock = Clock::over(0.0, 60.0, 1e-3);
    let x0 = DVector::from_row_slice(&[1.0, 1.0]);
    let mut traj = run_observer(&sys, &gains, &x0, &DVector::zeros(2), |_| -1.0, clock, None).unwrap();
    let est = identify(&sys, &traj, &IdentSettings::default()).unwrap();
    assert_eq!(est.len(), 1);
    let row = &est[0];
    assert_eq!(row.gated, 0);
    assert!((row.final_omega() - 3.0).abs() < 0.01, "{}", row.final_omega());
    let [l1, l2] = row.amplitude.final_l();
    assert!((l1 - 3.0).abs() < 0.05 && (l2 - 0.5).abs() < 0.05, "{l1} {l2}");

    record_estimates(&mut traj, &est).unwrap();
    let times = traj.times().to_vec();
    let err: Vec<f64> = traj
        .get("theta_hat")
        .unwrap()
        .iter()
        .zip(traj.get("theta_true").unwrap())
        .map(|(a, b)| a - b)
        .collect();
    assert!(tail_max(&times, &err, 50.0) < 0.15);
    assert!(tail_max(&times, traj.get("xerr_norm").unwrap(), 40.0) < 1e-2);
}

#[test]
fn cascade_mode_also_converges() {
    let sys = two_state_system();
    let clock = Clock::over(0.0, 60.0, 1e-3);
    let x0 = DVector::from_row_slice(&[1.0, 1.0]);
    let traj = run_observer(&sys, &two_state_gains(), &x0, &DVector::zeros(2), |_| -1.0, clock, None).unwrap();
    let settings = IdentSettings {
        staging: Staging::Cascade,
        ..IdentSettings::default()
    };
    let row = &identify(&sys, &traj, &settings).unwrap()[0];
    let [l1, l2] = row.amplitude.final_l();
    assert!((row.final_omega() - 3.0).abs() < 0.01);
    assert!((l1 - 3.0).abs() < 0.05 && (l2 - 0.5).abs() < 0.05, "{l1} {l2}");
}

#[test]
fn three_state_swapped_route() {
    let sys = three_state_system();
    let clock = Clock::over(0.0, 60.0, 1e-3);
    let x0 = DVector::from_row_slice(&[1.0, 0.0, 0.0]);
    let traj = run_observer(&sys, &three_state_gains(), &x0, &DVector::zeros(3), |t| 2.0 + t.sin(), clock, None).unwrap();
    let est = identify(&sys, &traj, &IdentSettings::default()).unwrap();
    assert_eq!((est[0].row, est[0].col), (1, 0));
    assert!((est[0].final_omega() - 2.0).abs() < 0.05, "{}", est[0].final_omega());
    let [l1, l2] = est[0].amplitude.final_l();
    assert!((l1 - 1.0).abs() < 0.1 && (l2 + 0.5).abs() < 0.1, "{l1} {l2}");
}

#[test]
fn sinusoidal_input_violates_positivity() {
    let sys = two_state_system();
    let x0 = DVector::from_row_slice(&[1.0, 1.0]);
    let traj = simulate(&sys, &x0, |t: f64| t.sin(), Clock::over(0.0, 10.0, 1e-3)).unwrap();
    let report = check_assumptions(&sys, &traj, 1e-6);
    assert!(!report.passed());
}

#[test]
fn simulation_is_step_size_consistent() {
    let sys = two_state_system();
    let x0 = DVector::from_row_slice(&[1.0, 1.0]);
    let coarse = simulate(&sys, &x0, |t: f64| t.sin(), Clock::over(0.0, 10.0, 1e-3)).unwrap();
    let fine = simulate(&sys, &x0, |t: f64| t.sin(), Clock::over(0.0, 10.0, 5e-4)).unwrap();
    let mut gap: f64 = 0.0;
    for name in ["x1", "x2"] {
        let (a, b) = (coarse.get(name).unwrap(), fine.get(name).unwrap());
        for (k, v) in a.iter().enumerate() {
            gap = gap.max((v - b[2 * k]).abs());
        }
    }
    assert!(gap < 1e-5, "{gap}");
}
