use battkit::cell::CellModel;
use battkit::observer::{self, DesignOptions};
use battkit::sim::{self, CampaignConfig, CurrentProfile, Method, NoiseSpec, PlantKind, SocScale};
use battkit::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn gain(model: &CellModel) -> DVector<f64> {
    let v = observer::build_vertices(model);
    observer::design_gain(&model.a, &model.e, &v.c, &DesignOptions::for_model(model)).unwrap().l
}

#[test]
fn rk4_step_on_exponential_decay() {
    let mut x = DVector::from_element(1, 1.0);
    for _ in 0..10 {
        x = sim::rk4_step(|x| -x, &x, 0.01);
    }
    assert!((x[0] - (-0.1f64).exp()).abs() < 1e-7);
}

#[test]
fn phi1_matches_scalar_closed_form() {
    for (j, h) in [(-2.0, 0.3), (0.5, 1.0), (-1e-9, 2.0)] {
        let g = sim::phi1_step(&DMatrix::from_element(1, 1, j), h);
        let exact = (j * h).exp_m1() / j;
        assert!((g[0] - exact).abs() < 1e-12 * exact.abs().max(1.0), "j={j}");
    }
}

#[test]
fn linear_integrators_agree_with_matrix_exponential() {
    let a = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.5, -0.5]);
    let b = DVector::from_vec(vec![0.2, -0.1]);
    let x0 = DVector::from_vec(vec![1.0, 3.0]);
    let t_end = 2.0;
    let exact = (&a * t_end).exp() * &x0 + sim::phi1_step(&a, t_end) * &b;
    let grid: Vec<f64> = (0..=2000).map(|k| k as f64 * 1e-3).collect();
    let rk4 = sim::integrate_linear(&a, |_| b.clone(), &x0, &grid, Method::Rk4).unwrap();
    assert!((rk4.last().unwrap() - &exact).amax() < 1e-10);
    let implicit = sim::integrate_linear(&a, |_| b.clone(), &x0, &grid, Method::ImplicitLinear).unwrap();
    assert!((implicit.last().unwrap() - &exact).amax() < 2e-3);
    assert!(sim::integrate_linear(&a, |_| b.clone(), &x0, &[0.0, 1.0, 1.5], Method::Rk4).is_err());
}

#[test]
fn synthetic_profile_shape() {
    let p = sim::synthetic_phev(11, 1000.0, 0.5);
    assert_eq!(p, sim::synthetic_phev(11, 1000.0, 0.5));
    assert_ne!(p.currents, sim::synthetic_phev(12, 1000.0, 0.5).currents);
    let u = p.sample(0.5);
    assert_eq!(u.len(), 2001);
    assert!(u[1600..].iter().all(|v| *v == 0.0));
    assert!(u.iter().all(|v| v.abs() <= 12.0 * 0.5));
    assert!(p.times.iter().all(|t| t.fract() == 0.0));
    let discharge: f64 = u[..800].iter().sum::<f64>() / 800.0;
    let charge: f64 = u[800..1600].iter().sum::<f64>() / 800.0;
    assert!(discharge > 0.0 && charge < 0.0, "{discharge} {charge}");
    assert_eq!(p.clone().with_gain(2.0).charge(400.0), 2.0 * p.charge(400.0));
}

#[test]
fn zero_order_hold_and_charge() {
    let p = CurrentProfile::from_samples(sim::ProfileKind::Csv, vec![0.0, 10.0, 20.0], vec![1.0, -2.0, 4.0], 30.0).unwrap();
    assert_eq!(p.at(9.999), 1.0);
    assert_eq!(p.at(10.0), -2.0);
    assert_eq!(p.at(1e9), 4.0);
    assert_eq!(p.charge(25.0), 10.0 - 20.0 + 20.0);
    assert_eq!(p.sample(10.0), vec![1.0, -2.0, 4.0, 4.0]);
    assert!(CurrentProfile::from_samples(sim::ProfileKind::Csv, vec![0.0, 0.0], vec![1.0, 1.0], 1.0).is_err());
    assert_eq!(CurrentProfile::constant(3.0, 5.0).sample(1.0), vec![3.0; 6]);
}

#[test]
fn sensor_bias() {
    let spec = NoiseSpec::default();
    assert!((spec.current_bias(0.00025) - 3.0).abs() < 1e-12);
    assert!((spec.voltage_bias(0.0025) - 0.05).abs() < 1e-12);
    let times: Vec<f64> = (0..1000).map(|k| k as f64 * 1e-5).collect();
    let mean: f64 = times.iter().map(|t| spec.current_bias(*t)).sum::<f64>() / times.len() as f64;
    assert!(mean.abs() < 1e-9);
    let (i, v) = sim::inject_bias(&times, &vec![1.0; 1000], &vec![3.7; 1000], &NoiseSpec::off());
    assert!(i.iter().all(|x| *x == 1.0) && v.iter().all(|x| *x == 3.7));
    let silent = NoiseSpec { current_amplitude: 0.0, voltage_amplitude: 0.0, ..NoiseSpec::default() };
    assert_eq!(silent.current_bias(0.1234), 0.0);
    assert!(NoiseSpec { current_amplitude: -1.0, ..NoiseSpec::default() }.validate().is_err());
}

#[test]
fn metric_hand_cases() {
    let m = sim::metrics(&[1.0, -2.0, 3.0, -4.0], 0..4).unwrap();
    assert_eq!(m.mae, 2.5);
    assert!((m.rmse - 7.5f64.sqrt()).abs() < 1e-15);
    assert_eq!(sim::metrics(&[5.0, 1.0], 1..2).unwrap().mae, 1.0);
    assert!(sim::metrics(&[1.0], 1..1).is_err());
    assert!(sim::metrics(&[1.0], 0..2).is_err());
    assert_eq!(sim::window_until(&[0.0, 1.0, 2.0, 3.0], 2.0), 0..3);
    let e = sim::normalized_concentration_error(&[100.0, 0.0], &[101.0, 0.0]).unwrap();
    assert!((e - 1.0).abs() < 1e-12);
    assert!(sim::normalized_concentration_error(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    assert_eq!(sim::improvement(4.0, 1.0), Some(75.0));
    assert_eq!(sim::improvement(0.0, 1.0), None);
}

#[test]
fn coulomb_counting() {
    let times = [0.0, 1800.0, 3600.0];
    let current = [6.0, 6.0, 6.0];
    let soc = sim::coulomb_soc(&times, &current, 6.0, 100.0, SocScale::Percent).unwrap();
    assert_eq!(soc, vec![100.0, 50.0, 0.0]);
    let raw = sim::coulomb_soc(&times, &current, 6.0, 100.0, SocScale::RawFraction).unwrap();
    assert_eq!(raw, vec![0.0, -0.5, -1.0]);
    assert!(sim::coulomb_soc(&times, &current, 0.0, 100.0, SocScale::Percent).is_err());
    assert!(sim::coulomb_soc(&times, &current[..2], 6.0, 100.0, SocScale::Percent).is_err());
}

#[test]
fn measurement_csv() {
    let text = "time_s,current_A,voltage_V\n0,2,3.9\n1,2,3.8\n2,-1,3.85\n";
    let plain = sim::read_measurements(text.as_bytes(), "m.csv", 1.0).unwrap();
    let scaled = sim::read_measurements(text.as_bytes(), "m.csv", 1.035).unwrap();
    assert_eq!(plain.voltage.as_deref(), Some(&[3.9, 3.8, 3.85][..]));
    assert_eq!(plain.profile.horizon, 3.0);
    assert!((scaled.profile.charge(3.0) / plain.profile.charge(3.0) - 1.035).abs() < 1e-12);
    assert_eq!(scaled.current_gain, 1.035);

    let current_only = sim::read_measurements("# note\ntime_s,current_A\n0,1\n5,2\n".as_bytes(), "m.csv", 1.0).unwrap();
    assert!(current_only.voltage.is_none());

    let err = sim::read_measurements("t,i\n0,1\n1,1\n".as_bytes(), "m.csv", 1.0).unwrap_err();
    assert!(matches!(err, Error::Format { line: 1, .. }), "{err}");
    let err = sim::read_measurements("time_s,current_A\n0,1\n2,1\n1,1\n".as_bytes(), "m.csv", 1.0).unwrap_err();
    assert!(matches!(err, Error::Format { line: 4, .. }), "{err}");
    assert!(err.to_string().contains("row 3"), "{err}");
    let err = sim::read_measurements("time_s,current_A\n1,1\n2,1\n".as_bytes(), "m.csv", 1.0).unwrap_err();
    assert!(err.to_string().contains("first time"), "{err}");
    assert!(sim::read_measurements(text.as_bytes(), "m.csv", 0.0).is_err());
}

#[test]
fn noiseless_model_plant_with_exact_start() {
    let model = CellModel::reference_cell();
    let l = gain(&model);
    let profile = sim::synthetic_phev(2, 300.0, 1.0);
    let cfg = CampaignConfig {
        soc_estimates: vec![100.0],
        gain_scales: vec![1.0],
        noise: NoiseSpec::off(),
        plant: PlantKind::Model,
        ..CampaignConfig::default()
    };
    let report = sim::run_campaign(&model, &l, &profile, &cfg).unwrap();
    let m = &report.scenarios[&sim::scenario_key(1.0, 100.0)];
    // Only the sample-and-hold residual of the observer remains.
    assert!(m["corrected"]["e_soc"].mae < 0.05, "{:?}", m["corrected"]);
    assert!(report.lithium_drift < 1e-9);
}

#[test]
fn default_campaign_prefers_the_corrected_output() {
    let model = CellModel::reference_cell();
    let l = gain(&model);
    let profile = sim::synthetic_phev(7, 4500.0, 1.0);
    let cfg = CampaignConfig::default();
    let report = sim::run_campaign(&model, &l, &profile, &cfg).unwrap();
    assert_eq!(report.scenarios.len(), 63);
    assert_eq!(report.summary.len(), 3);
    for (group, variants) in &report.summary {
        let (unc, cor) = (&variants["uncorrected"]["e_soc"], &variants["corrected"]["e_soc"]);
        assert!(cor.mae < unc.mae, "{group}: {} vs {}", cor.mae, unc.mae);
        assert!(cor.mae_improvement_pct.unwrap() > 0.0);
    }
    assert!(report.to_json().contains("\"gain=0.1\""));
}

proptest! {
    #[test]
    fn rmse_dominates_mae(trace in proptest::collection::vec(-1e3f64..1e3, 1..200)) {
        let m = sim::metrics(&trace, 0..trace.len()).unwrap();
        prop_assert!(m.rmse >= m.mae * (1.0 - 1e-12));
    }

    #[test]
    fn held_charge_is_additive(currents in proptest::collection::vec(-12.0f64..12.0, 1..20), t in 0.0f64..40.0, s in 0.0f64..40.0) {
        let times: Vec<f64> = (0..currents.len()).map(|k| 2.0 * k as f64).collect();
        let p = CurrentProfile::from_samples(sim::ProfileKind::Csv, times, currents, 40.0).unwrap();
        let (lo, hi) = if t < s { (t, s) } else { (s, t) };
        let mut direct = 0.0;
        let n = 4000;
        for k in 0..n {
            let tk = lo + (hi - lo) * (k as f64 + 0.5) / n as f64;
            direct += p.at(tk) * (hi - lo) / n as f64;
        }
        prop_assert!((p.charge(hi) - p.charge(lo) - direct).abs() <= 12.0 * 2.0 * (hi - lo) / n as f64 * 2.0 + 1e-9);
    }
}
