use battkit::cell::{CellParams, Side};
use battkit::diffusion::{self, ElectrodeParams};
use battkit::reference::{self, ReferenceOptions, ReferenceSolver};
use battkit::Error;

fn electrode() -> ElectrodeParams {
    CellParams::reference_cell().electrode(Side::Neg)
}

/// Positive roots of `tan λ = λ`, by bisection on `λ cos λ - sin λ`.
fn eigenvalues(count: usize) -> Vec<f64> {
    use std::f64::consts::PI;
    (1..=count)
        .map(|n| {
            let g = |l: f64| l * l.cos() - l.sin();
            let (mut lo, mut hi) = (n as f64 * PI, n as f64 * PI + 0.5 * PI);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if g(lo) * g(mid) <= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            0.5 * (lo + hi)
        })
        .collect()
}

/// Series solution for a uniform start `c0` under constant flux `m`
/// (`dc_mean/dt = m`), at `s = r/R` and `T = t/τ`.
fn series(c0: f64, m: f64, tau: f64, s: f64, t_dimless: f64) -> f64 {
    let k = |s: f64| (s * s - 0.6) / 6.0;
    let steady = c0 + m * tau * (t_dimless + k(s));
    let quad = 4000;
    let mut sum = 0.0;
    for l in eigenvalues(80) {
        // a_n = ∫ u0 φ s² ds / ∫ φ² s² ds with φ = sin(λ s)/s.
        let num: f64 = (0..quad)
            .map(|i| {
                let x = (i as f64 + 0.5) / quad as f64;
                -m * tau * k(x) * (l * x).sin() * x / quad as f64
            })
            .sum();
        let den = 0.5 - (2.0 * l).sin() / (4.0 * l);
        let phi = if s == 0.0 { l } else { (l * s).sin() / s };
        sum += num / den * phi * (-l * l * t_dimless).exp();
    }
    steady + sum
}

fn solve(e: &ElectrodeParams, m: f64, horizon: f64, dt: f64, richardson: bool) -> reference::ReferenceSolution {
    let opts = ReferenceOptions { n_ref: 400, dt: Some(dt), richardson, ..ReferenceOptions::default() };
    ReferenceSolver::new(opts).solve(e, |_| m, 5000.0, horizon).unwrap()
}

#[test]
fn oracle_matches_series_solution() {
    let e = electrode();
    let tau = e.tau();
    let m = 0.05;
    let offset = (diffusion::k_offset(e.radius, tau, e.radius).unwrap() * m).abs();
    for t_dimless in [0.05, 0.3] {
        let sol = solve(&e, m, t_dimless * tau, tau / 20_000.0, true);
        for s in [0.3, 0.5, 0.7, 0.9, 0.97, 1.0] {
            let exact = series(5000.0, m, tau, s, t_dimless);
            let got = sol.final_at(s * e.radius);
            assert!((got - exact).abs() < 2e-3 * offset, "T={t_dimless} s={s}: {got} vs {exact}");
        }
    }
}

#[test]
fn richardson_tightens_the_steady_profile() {
    let e = electrode();
    let tau = e.tau();
    let m = -0.05;
    let horizon = 3.0 * tau;
    let err = |sol: &reference::ReferenceSolution| {
        let mean = sol.mean.last().copied().unwrap();
        sol.radii
            .iter()
            .zip(&sol.final_profile)
            .map(|(r, c)| (c - reference::steady_profile(mean, m, tau, e.radius, *r).unwrap()).abs())
            .fold(0.0, f64::max)
    };
    let plain = err(&solve(&e, m, horizon, tau / 2000.0, false));
    let extrapolated = err(&solve(&e, m, horizon, tau / 2000.0, true));
    let offset = (diffusion::k_offset(e.radius, tau, e.radius).unwrap() * m).abs();
    assert!(extrapolated < 1e-3 * offset, "{extrapolated} vs offset {offset}");
    assert!(extrapolated < 0.1 * plain, "{extrapolated} vs {plain}");
}

#[test]
fn mean_tracks_integrated_flux() {
    let e = electrode();
    let tau = e.tau();
    let m = |t: f64| 0.02 * (t / 300.0).sin();
    let dt = tau / 2000.0;
    let sol = ReferenceSolver::new(ReferenceOptions { dt: Some(dt), ..ReferenceOptions::default() })
        .solve(&e, m, 5000.0, 0.5 * tau)
        .unwrap();
    // Implicit Euler samples the flux at the end of each step.
    let mut expected = 5000.0;
    for (k, t) in sol.times.iter().enumerate().skip(1) {
        expected += dt * m(*t);
        assert!((sol.mean[k] - expected).abs() < 1e-9 * expected);
    }
}

#[test]
fn probes_and_snapshots_are_recorded() {
    let e = electrode();
    let opts = ReferenceOptions {
        dt: Some(10.0),
        snapshot_every: 10,
        probes: vec![0.5 * e.radius, e.radius],
        ..ReferenceOptions::default()
    };
    let sol = ReferenceSolver::new(opts).solve(&e, |_| 0.01, 4000.0, 1000.0).unwrap();
    assert_eq!(sol.times.len(), 101);
    assert_eq!(sol.probe_values.len(), 101);
    assert_eq!(sol.snapshot_times, (0..=10).map(|k| 100.0 * k as f64).collect::<Vec<_>>());
    for (k, row) in sol.probe_values.iter().enumerate() {
        assert_eq!(row[1], sol.surface[k]);
    }
    let mut buf = Vec::new();
    reference::write_snapshots_csv(&sol, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("t_s,r_m,c_mol_m3\n"));
    assert_eq!(text.lines().count(), 1 + 11 * 400);
    let flux = sol.flux_density(&sol.final_profile);
    assert_eq!(flux[0], 0.0);
    // Charging raises the surface, so the flux points inward.
    assert!(flux[399] < 0.0);
    let mean = reference::profile_mean(&sol, &sol.final_profile);
    // The extrapolated profile is not conservative; the recorded mean is.
    assert!((mean - sol.mean[100]).abs() < 1e-5 * sol.mean[100]);
}

#[test]
fn interpolation_is_piecewise_linear_and_clamped() {
    let r = [1.0, 2.0, 4.0];
    let v = [10.0, 20.0, 0.0];
    assert_eq!(reference::interpolate(&r, &v, 0.5), 10.0);
    assert_eq!(reference::interpolate(&r, &v, 1.5), 15.0);
    assert_eq!(reference::interpolate(&r, &v, 3.0), 10.0);
    assert_eq!(reference::interpolate(&r, &v, 4.0), 0.0);
    assert_eq!(reference::interpolate(&r, &v, 9.0), 0.0);
}

#[test]
fn invalid_requests_are_rejected() {
    let e = electrode();
    let coarse = ReferenceOptions { n_ref: 50, ..ReferenceOptions::default() };
    assert!(matches!(ReferenceSolver::new(coarse).solve(&e, |_| 0.0, 1.0, 1.0), Err(Error::Input(_))));
    let solver = ReferenceSolver::default();
    assert!(solver.solve(&e, |_| 0.0, -1.0, 1.0).is_err());
    assert!(solver.solve(&e, |_| 0.0, 1.0, f64::INFINITY).is_err());
    let err = ReferenceSolver::new(ReferenceOptions { dt: Some(1.0), ..ReferenceOptions::default() })
        .solve(&e, |t| if t > 2.5 { f64::NAN } else { 0.0 }, 1.0, 10.0)
        .unwrap_err();
    assert!(matches!(err, Error::Integration { step: 3, .. }), "{err}");
}
