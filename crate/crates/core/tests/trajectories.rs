use std::f64::consts::PI;

use pilotwave::exec::Execution;
use pilotwave::integrator::{integrate, integrate_batch, integrate_batch_with, integrate_log_density, IntegratorConfig};
use pilotwave::relaxation::{hcurve, transport_density, GridSpec, InitialDensity, Smoothing};
use pilotwave::wavefield::{ModeIndex, Point2, Superposition};

fn four_modes() -> Superposition {
    Superposition::equal_weight_random_phase(Superposition::square_modes(2), 11).unwrap()
}

fn lattice(n: usize, half: f64) -> Vec<Point2> {
    let step = 2.0 * half / (n - 1) as f64;
    (0..n * n).map(|k| Point2::new(-half + step * (k % n) as f64, -half + step * (k / n) as f64)).collect()
}

#[test]
fn f_is_conserved_along_trajectories() {
    let state = four_modes();
    let cfg = IntegratorConfig::default();
    let rho0 = |q: Point2| InitialDensity::Gaussian { width: 1.0 }.eval(&state, q);
    for q0 in lattice(10, 1.5) {
        let f0 = rho0(q0) / state.born_density(q0, 0.0);
        let (q, ln_rho) = integrate_log_density(&state, q0, rho0(q0).ln(), 0.0, 10.0 * PI, &cfg).unwrap();
        let f = ln_rho.exp() / state.born_density(q, 10.0 * PI);
        assert!(((f - f0) / f0).abs() < 1e-6, "{q0:?}: {f} vs {f0}");
    }
}

#[test]
fn two_mode_round_trip_over_one_period() {
    let state = Superposition::normalized(
        vec![ModeIndex::new(0, 0), ModeIndex::new(1, 1)],
        vec![num_complex::Complex64::new(1.0, 0.0), num_complex::Complex64::new(0.0, 1.0)],
    )
    .unwrap();
    let cfg = IntegratorConfig::default();
    for q0 in lattice(10, 2.0) {
        let q = integrate(&state, q0, 0.0, 2.0 * PI, &cfg).unwrap();
        let back = integrate(&state, q, 2.0 * PI, 0.0, &cfg).unwrap();
        assert!(back.distance(q0) < 1e-8, "{q0:?} came back to {back:?}");
    }
}

#[test]
fn batch_matches_sequential_bit_for_bit() {
    let state = four_modes();
    let cfg = IntegratorConfig { rel_tol: 1e-8, abs_tol: 1e-10, ..Default::default() };
    let points = lattice(100, 2.5);
    let parallel = integrate_batch(&state, &points, 0.0, 1.0, &cfg);
    let sequential = integrate_batch_with(Execution::Sequential, &state, &points, 0.0, 1.0, &cfg);
    assert_eq!(parallel.len(), 10_000);
    for (k, (a, b)) in parallel.iter().zip(&sequential).enumerate() {
        match (a, b) {
            (Ok(a), Ok(b)) => assert!(a.x.to_bits() == b.x.to_bits() && a.y.to_bits() == b.y.to_bits(), "point {k}"),
            (Err(_), Err(_)) => {}
            _ => panic!("point {k}: one schedule failed"),
        }
    }
    let single = integrate(&state, points[4321], 0.0, 1.0, &cfg).unwrap();
    assert_eq!(single, *sequential[4321].as_ref().unwrap());
}

#[test]
fn equilibrium_is_a_fixed_point_of_transport() {
    let state = four_modes();
    let grid = GridSpec::new(4.0, 80, 0.4, Smoothing::None).unwrap();
    let cfg = IntegratorConfig { rel_tol: 1e-8, abs_tol: 1e-10, ..Default::default() };
    let d = transport_density(&state, |q| state.born_density(q, 0.0), 2.5, &grid, &cfg).unwrap();
    for (r, p) in d.fine_rho.iter().zip(&d.fine_psi2) {
        assert!((r - p).abs() <= 1e-6 * p.max(1e-12), "{r} vs {p}");
    }
    let grids = [grid, GridSpec::new(4.0, 40, 0.4, Smoothing::None).unwrap()];
    let curve = hcurve(&state, |q| state.born_density(q, 0.0), &[0.0, 1.0, 2.0], &grids, &cfg).unwrap();
    assert!(curve.hbar.iter().all(|h| h.abs() < 1e-14), "{:?}", curve.hbar);
}

#[test]
fn nonequilibrium_coarse_entropy_decreases() {
    let state = Superposition::equal_weight_random_phase(Superposition::square_modes(3), 2).unwrap();
    let grids = [
        GridSpec::new(4.8, 96, 0.4, Smoothing::None).unwrap(),
        GridSpec::new(4.8, 48, 0.4, Smoothing::None).unwrap(),
    ];
    let cfg = IntegratorConfig { rel_tol: 1e-7, abs_tol: 1e-9, ..Default::default() };
    let rho0 = |q| InitialDensity::Gaussian { width: 1.0 }.eval(&state, q);
    let curve = hcurve(&state, rho0, &[0.0, 2.0 * PI], &grids, &cfg).unwrap();
    assert!(curve.hbar[0] > 0.0);
    assert!(curve.hbar[1] < curve.hbar[0] - curve.err[0] - curve.err[1], "{:?} {:?}", curve.hbar, curve.err);
    assert!(curve.l1[1] < curve.l1[0]);
}
