//! Experiment engine: integrators, current profiles, sensor bias, metrics,
//! plants and the estimation campaign.
//!
//! Every run uses `K` samples at `t_k = k dt`. Inputs are held over
//! `[t_k, t_k+1)` and every trace has one entry per sample.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cell::{CellModel, OutputMap};
use crate::diffusion;
use crate::error::{Error, Result};
use crate::observer::{self, ObserverScheme};
use crate::reference::{ReferenceOptions, ReferenceSolver};

/// Peak current of the synthetic profile at unit scale: 2C of a 6 Ah cell.
pub const PHEV_PEAK_CURRENT: f64 = 12.0;

pub fn rk4_step(f: impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let k1 = f(x);
    let k2 = f(&(x + &k1 * (0.5 * h)));
    let k3 = f(&(x + &k2 * (0.5 * h)));
    let k4 = f(&(x + &k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// `h φ1(h J)`, so that `x + h φ1(hJ) f(x)` solves `dx/dt = J x + c` exactly
/// over one step when `f(x) = J x + c`.
pub fn phi1_step(j: &DMatrix<f64>, h: f64) -> DMatrix<f64> {
    let n = j.nrows();
    let mut aug = DMatrix::zeros(2 * n, 2 * n);
    aug.view_mut((0, 0), (n, n)).copy_from(&(j * h));
    aug.view_mut((0, n), (n, n)).fill_diagonal(h);
    aug.exp().view((0, n), (n, n)).into_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Method {
    #[default]
    Rk4,
    /// Implicit Euler; only for linear systems, see [`integrate_linear`].
    ImplicitLinear,
}

fn uniform_step(t_grid: &[f64]) -> Result<f64> {
    if t_grid.len() < 2 {
        return Err(Error::Input("time grid needs at least two points".into()));
    }
    let h = t_grid[1] - t_grid[0];
    if !(h > 0.0) {
        return Err(Error::Input("time grid must be increasing".into()));
    }
    for (k, w) in t_grid.windows(2).enumerate() {
        if ((w[1] - w[0]) - h).abs() > 1e-9 * h.max(w[1].abs()) {
            return Err(Error::Input(format!("time grid is not uniform at index {}", k + 1)));
        }
    }
    Ok(h)
}

fn check_finite(x: &DVector<f64>, step: usize, time: f64) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Integration {
            step,
            time,
            message: "state became non-finite".into(),
        })
    }
}

/// Fixed-step RK4 over a uniform grid; returns the state at every grid point.
pub fn integrate(
    rhs: impl Fn(f64, &DVector<f64>) -> DVector<f64>,
    x0: &DVector<f64>,
    t_grid: &[f64],
) -> Result<Vec<DVector<f64>>> {
    let h = uniform_step(t_grid)?;
    let mut out = Vec::with_capacity(t_grid.len());
    let mut x = x0.clone();
    out.push(x.clone());
    for k in 1..t_grid.len() {
        let t0 = t_grid[k - 1];
        let k1 = rhs(t0, &x);
        let k2 = rhs(t0 + 0.5 * h, &(&x + &k1 * (0.5 * h)));
        let k3 = rhs(t0 + 0.5 * h, &(&x + &k2 * (0.5 * h)));
        let k4 = rhs(t0 + h, &(&x + &k3 * h));
        x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        check_finite(&x, k, t_grid[k])?;
        out.push(x.clone());
    }
    Ok(out)
}

/// `dx/dt = A x + f(t)` over a uniform grid.
pub fn integrate_linear(
    a: &DMatrix<f64>,
    forcing: impl Fn(f64) -> DVector<f64>,
    x0: &DVector<f64>,
    t_grid: &[f64],
    method: Method,
) -> Result<Vec<DVector<f64>>> {
    match method {
        Method::Rk4 => integrate(|t, x| a * x + forcing(t), x0, t_grid),
        Method::ImplicitLinear => {
            let h = uniform_step(t_grid)?;
            let n = a.nrows();
            let lu = (DMatrix::identity(n, n) - a * h).lu();
            let mut out = Vec::with_capacity(t_grid.len());
            let mut x = x0.clone();
            out.push(x.clone());
            for k in 1..t_grid.len() {
                let rhs = &x + forcing(t_grid[k]) * h;
                x = lu
                    .solve(&rhs)
                    .ok_or_else(|| Error::Numerical("singular implicit step matrix".into()))?;
                check_finite(&x, k, t_grid[k])?;
                out.push(x.clone());
            }
            Ok(out)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileKind {
    Constant,
    SyntheticPhev,
    Csv,
}

/// Piecewise-constant current, A, positive in discharge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurrentProfile {
    pub kind: ProfileKind,
    /// Breakpoints, strictly increasing, first at 0.
    pub times: Vec<f64>,
    pub currents: Vec<f64>,
    pub horizon: f64,
    pub seed: Option<u64>,
    pub scale: f64,
}

impl CurrentProfile {
    pub fn constant(current: f64, horizon: f64) -> Self {
        CurrentProfile {
            kind: ProfileKind::Constant,
            times: vec![0.0],
            currents: vec![current],
            horizon,
            seed: None,
            scale: 1.0,
        }
    }

    pub fn from_samples(kind: ProfileKind, times: Vec<f64>, currents: Vec<f64>, horizon: f64) -> Result<Self> {
        if times.is_empty() || times.len() != currents.len() {
            return Err(Error::Input("profile needs matching, non-empty time and current columns".into()));
        }
        if let Some(k) = times.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::Input(format!("profile times not strictly increasing at sample {}", k + 1)));
        }
        if currents.iter().chain(&times).any(|v| !v.is_finite()) || !(horizon >= 0.0) {
            return Err(Error::Input("profile contains non-finite values".into()));
        }
        Ok(CurrentProfile {
            kind,
            times,
            currents,
            horizon,
            seed: None,
            scale: 1.0,
        })
    }

    /// Zero-order hold: the last breakpoint at or before `t`.
    pub fn at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|s| *s <= t);
        self.currents[k.saturating_sub(1)]
    }

    /// Values at `k dt` for `k` in `0..=round(horizon/dt)`.
    pub fn sample(&self, dt: f64) -> Vec<f64> {
        let n = (self.horizon / dt).round() as usize + 1;
        (0..n).map(|k| self.at(k as f64 * dt)).collect()
    }

    /// `∫_0^t I`, exact for the held profile, A·s.
    pub fn charge(&self, t: f64) -> f64 {
        let mut q = 0.0;
        for k in 0..self.times.len() {
            let a = self.times[k].max(0.0);
            let b = self.times.get(k + 1).copied().unwrap_or(f64::INFINITY).min(t);
            if b > a {
                q += self.currents[k] * (b - a);
            }
        }
        q
    }

    pub fn with_gain(mut self, gain: f64) -> Self {
        for c in &mut self.currents {
            *c *= gain;
        }
        self
    }
}

/// Seeded pulse train: discharge-dominant on `[0, 0.4 H)`, charge-dominant on
/// `[0.4 H, 0.8 H)`, rest afterwards. Dwell times are whole seconds in 1..=10.
pub fn synthetic_phev(seed: u64, horizon: f64, scale: f64) -> CurrentProfile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let peak = PHEV_PEAK_CURRENT * scale;
    let (t_charge, t_rest) = (0.4 * horizon, 0.8 * horizon);
    let mut times = Vec::new();
    let mut currents = Vec::new();
    let mut t = 0.0;
    while t < t_rest {
        let (lo, hi) = if t < t_charge { (-0.3, 0.9) } else { (-0.9, 0.3) };
        times.push(t);
        currents.push(peak * rng.gen_range(lo..hi));
        let dwell = rng.gen_range(1..=10) as f64;
        let boundary = if t < t_charge { t_charge } else { t_rest };
        t = (t + dwell).min(boundary);
    }
    times.push(t_rest);
    currents.push(0.0);
    CurrentProfile {
        kind: ProfileKind::SyntheticPhev,
        times,
        currents,
        horizon,
        seed: Some(seed),
        scale,
    }
}

/// Measured current and optional voltage read from CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementBundle {
    pub profile: CurrentProfile,
    pub voltage: Option<Vec<f64>>,
    /// Multiplicative correction already applied to the current column.
    pub current_gain: f64,
}

/// Reads `time_s,current_A[,voltage_V]`, scaling the current by `gain`.
pub fn read_measurements<R: std::io::Read>(reader: R, label: &str, gain: f64) -> Result<MeasurementBundle> {
    let fmt = |line: usize, message: String| Error::Format {
        path: label.to_string(),
        line,
        message,
    };
    if !(gain > 0.0 && gain.is_finite()) {
        return Err(Error::Config(format!("current gain must be positive, got {gain}")));
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(reader);
    let headers: Vec<String> = rdr.headers().map_err(|e| fmt(1, e.to_string()))?.iter().map(str::to_string).collect();
    let with_voltage = match headers.iter().map(String::as_str).collect::<Vec<_>>().as_slice() {
        ["time_s", "current_A"] => false,
        ["time_s", "current_A", "voltage_V"] => true,
        _ => {
            return Err(fmt(1, format!("expected header `time_s,current_A[,voltage_V]`, found `{}`", headers.join(","))));
        }
    };
    let (mut times, mut currents, mut volts) = (Vec::new(), Vec::new(), Vec::new());
    for (row, rec) in rdr.records().enumerate() {
        let row = row + 1;
        let rec = rec.map_err(|e| fmt(e.position().map_or(0, |p| p.line() as usize), format!("row {row}: {e}")))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize, name: &str| -> Result<f64> {
            let v: f64 = rec
                .get(i)
                .ok_or_else(|| fmt(line, format!("row {row}: missing {name}")))?
                .parse()
                .map_err(|e| fmt(line, format!("row {row}: bad {name}: {e}")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(fmt(line, format!("row {row}: non-finite {name}")))
            }
        };
        let t = field(0, "time_s")?;
        if let Some(prev) = times.last() {
            if !(t > *prev) {
                return Err(fmt(line, format!("row {row}: time not strictly increasing ({t} after {prev})")));
            }
        } else if t != 0.0 {
            return Err(fmt(line, format!("row {row}: first time must be 0, got {t}")));
        }
        times.push(t);
        currents.push(field(1, "current_A")? * gain);
        if with_voltage {
            volts.push(field(2, "voltage_V")?);
        }
    }
    if times.len() < 2 {
        return Err(fmt(0, "need at least two data rows".into()));
    }
    let n = times.len();
    let horizon = times[n - 1] + (times[n - 1] - times[n - 2]);
    let profile = CurrentProfile::from_samples(ProfileKind::Csv, times, currents, horizon)?;
    Ok(MeasurementBundle {
        profile,
        voltage: with_voltage.then_some(volts),
        current_gain: gain,
    })
}

pub fn read_measurements_file(path: &Path, gain: f64) -> Result<MeasurementBundle> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_measurements(file, &path.display().to_string(), gain)
}

/// Sinusoidal sensor bias on the measured current and voltage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub current_amplitude: f64,
    pub current_omega: f64,
    pub voltage_amplitude: f64,
    pub voltage_omega: f64,
    pub current_enabled: bool,
    pub voltage_enabled: bool,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            current_amplitude: 3.0,
            current_omega: 2000.0 * std::f64::consts::PI,
            voltage_amplitude: 0.05,
            voltage_omega: 200.0 * std::f64::consts::PI,
            current_enabled: true,
            voltage_enabled: true,
        }
    }
}

impl NoiseSpec {
    pub fn off() -> Self {
        NoiseSpec {
            current_enabled: false,
            voltage_enabled: false,
            ..NoiseSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.current_amplitude >= 0.0 && self.voltage_amplitude >= 0.0) {
            return Err(Error::Config("bias amplitudes must be nonnegative".into()));
        }
        if !(self.current_omega.is_finite() && self.voltage_omega.is_finite()) {
            return Err(Error::Config("bias frequencies must be finite".into()));
        }
        Ok(())
    }

    pub fn current_bias(&self, t: f64) -> f64 {
        if self.current_enabled {
            self.current_amplitude * (self.current_omega * t).sin()
        } else {
            0.0
        }
    }

    pub fn voltage_bias(&self, t: f64) -> f64 {
        if self.voltage_enabled {
            self.voltage_amplitude * (self.voltage_omega * t).sin()
        } else {
            0.0
        }
    }
}

/// Adds the bias of `spec` to sampled current and voltage traces.
pub fn inject_bias(times: &[f64], current: &[f64], voltage: &[f64], spec: &NoiseSpec) -> (Vec<f64>, Vec<f64>) {
    let i = times.iter().zip(current).map(|(t, c)| c + spec.current_bias(*t)).collect();
    let v = times.iter().zip(voltage).map(|(t, y)| y + spec.voltage_bias(*t)).collect();
    (i, v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
}

pub fn metrics(trace: &[f64], window: Range<usize>) -> Result<Metrics> {
    if window.start >= window.end || window.end > trace.len() {
        return Err(Error::Input(format!("window {window:?} is empty or exceeds {} samples", trace.len())));
    }
    let w = &trace[window];
    let n = w.len() as f64;
    let mae = w.iter().map(|e| e.abs()).sum::<f64>() / n;
    let rmse = (w.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    Ok(Metrics { mae, rmse })
}

/// Samples with `t <= t_end`.
pub fn window_until(times: &[f64], t_end: f64) -> Range<usize> {
    let tol = 1e-9 * t_end.abs().max(1.0);
    0..times.partition_point(|t| *t <= t_end + tol)
}

/// `100 |c_ref - ĉ| / |c_ref|` with Euclidean norms, percent.
pub fn normalized_concentration_error(c_ref: &[f64], c_hat: &[f64]) -> Result<f64> {
    if c_ref.len() != c_hat.len() {
        return Err(Error::Input("concentration vectors differ in length".into()));
    }
    let norm = c_ref.iter().map(|c| c * c).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::Input("reference concentration vector is zero".into()));
    }
    let diff = c_ref.iter().zip(c_hat).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(100.0 * diff / norm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SocScale {
    /// `soc0 - 100 ∫I / (3600 Q_cell)`.
    #[default]
    Percent,
    /// `-∫I / (3600 Q_cell)`, a fraction with no initial term.
    RawFraction,
}

/// Coulomb-counted SOC at each breakpoint-held sample time.
pub fn coulomb_soc(times: &[f64], current: &[f64], q_cell: f64, soc0: f64, scale: SocScale) -> Result<Vec<f64>> {
    if !(q_cell > 0.0) {
        return Err(Error::Input(format!("cell capacity must be positive, got {q_cell}")));
    }
    if times.len() != current.len() {
        return Err(Error::Input("time and current columns differ in length".into()));
    }
    let mut out = Vec::with_capacity(times.len());
    let mut charge = 0.0;
    for k in 0..times.len() {
        if k > 0 {
            charge += current[k - 1] * (times[k] - times[k - 1]);
        }
        let frac = -charge / (3600.0 * q_cell);
        out.push(match scale {
            SocScale::Percent => soc0 + 100.0 * frac,
            SocScale::RawFraction => frac,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlantKind {
    /// The reduced model itself.
    Model,
    /// The fine diffusion oracle per particle.
    #[default]
    Pde,
}

impl FromStr for PlantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "model" => Ok(PlantKind::Model),
            "pde" => Ok(PlantKind::Pde),
            other => Err(Error::Config(format!("unknown plant `{other}`, expected `model` or `pde`"))),
        }
    }
}

/// Plant trajectory sampled on the run grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub times: Vec<f64>,
    pub current: Vec<f64>,
    pub voltage: Vec<f64>,
    /// SOC of the positive particle, percent.
    pub soc: Vec<f64>,
    /// Concentrations at the model radii, one vector per sample.
    pub conc_neg: Vec<Vec<f64>>,
    pub conc_pos: Vec<Vec<f64>>,
    pub surface_neg: Vec<f64>,
    pub surface_pos: Vec<f64>,
    /// Largest relative departure of the lithium quantity from its start value.
    pub lithium_drift: f64,
}

/// Exact zero-order-hold stepping of the reduced model with current
/// `u + w`; returns one state per sample.
pub fn simulate_model_states(
    model: &CellModel,
    x0: &DVector<f64>,
    u: &[f64],
    w: Option<&[f64]>,
    dt: f64,
) -> Result<Vec<DVector<f64>>> {
    if let Some(w) = w {
        if w.len() != u.len() {
            return Err(Error::Input("disturbance and current sample counts differ".into()));
        }
    }
    let gamma = phi1_step(&model.a, dt);
    let mut out = Vec::with_capacity(u.len());
    let mut x = x0.clone();
    for k in 0..u.len() {
        out.push(x.clone());
        let uk = u[k] + w.map_or(0.0, |w| w[k]);
        x = &x + &gamma * model.drift(&x, uk);
        check_finite(&x, k + 1, (k + 1) as f64 * dt)?;
    }
    Ok(out)
}

fn sample_times(n: usize, dt: f64) -> Vec<f64> {
    (0..n).map(|k| k as f64 * dt).collect()
}

/// Reduced model as plant, voltage from the chosen output map.
pub fn model_truth(model: &CellModel, x0: &DVector<f64>, u: &[f64], dt: f64, map: OutputMap) -> Result<Truth> {
    let states = simulate_model_states(model, x0, u, None, dt)?;
    let mut t = Truth {
        times: sample_times(u.len(), dt),
        current: u.to_vec(),
        voltage: Vec::with_capacity(u.len()),
        soc: Vec::with_capacity(u.len()),
        conc_neg: Vec::with_capacity(u.len()),
        conc_pos: Vec::with_capacity(u.len()),
        surface_neg: Vec::with_capacity(u.len()),
        surface_pos: Vec::with_capacity(u.len()),
        lithium_drift: 0.0,
    };
    for (x, uk) in states.iter().zip(u) {
        let (neg, pos) = model.split(x);
        let q = model.lithium_quantity(&neg, &pos);
        t.lithium_drift = t.lithium_drift.max(((q - model.q) / model.q).abs());
        t.voltage.push(model.output_voltage(x, *uk, map));
        t.soc.push(model.soc(x).pos);
        t.surface_neg.push(neg[neg.len() - 1]);
        t.surface_pos.push(pos[pos.len() - 1]);
        t.conc_neg.push(neg.iter().copied().collect());
        t.conc_pos.push(pos.iter().copied().collect());
    }
    Ok(t)
}

/// Fine diffusion oracle as plant, both particles started uniform at `soc0`.
///
/// Substeps divide `dt` so the oracle step is at most `opts.dt` (or `τ/2000`).
/// The flux is sampled mid-step, so each step sees the held current.
pub fn oracle_truth(model: &CellModel, soc0: f64, u: &[f64], dt: f64, opts: &ReferenceOptions) -> Result<Truth> {
    if u.is_empty() {
        return Err(Error::Input("no current samples".into()));
    }
    let run = |e: &crate::cell::Electrode| {
        let h_max = opts.dt.unwrap_or(e.params.tau() / 2000.0);
        let sub = ((dt / h_max).ceil() as usize).max(1);
        let h = dt / sub as f64;
        let options = ReferenceOptions {
            dt: Some(h),
            probes: e.grid().radii.clone(),
            snapshot_every: 0,
            ..opts.clone()
        };
        let constants = model.constants;
        let horizon = (u.len() - 1) as f64 * dt;
        let m = |t: f64| {
            let k = (((t - 0.5 * h) / dt).floor().max(0.0) as usize).min(u.len() - 1);
            e.m_from_current(u[k], &constants)
        };
        ReferenceSolver::new(options)
            .solve(&e.params, m, e.concentration_at_soc(soc0), horizon)
            .map(|s| (s, sub))
    };
    let (neg, pos) = rayon::join(|| run(&model.neg), || run(&model.pos));
    let ((neg, sn), (pos, sp)) = (neg?, pos?);
    let mut t = Truth {
        times: sample_times(u.len(), dt),
        current: u.to_vec(),
        voltage: Vec::with_capacity(u.len()),
        soc: Vec::with_capacity(u.len()),
        conc_neg: Vec::with_capacity(u.len()),
        conc_pos: Vec::with_capacity(u.len()),
        surface_neg: Vec::with_capacity(u.len()),
        surface_pos: Vec::with_capacity(u.len()),
        lithium_drift: 0.0,
    };
    let (vn, vp) = (model.neg.grid().particle_volume, model.pos.grid().particle_volume);
    let q0 = model.neg.alpha * vn * neg.mean[0] + model.pos.alpha * vp * pos.mean[0];
    for (k, uk) in u.iter().enumerate() {
        let (kn, kp) = (k * sn, k * sp);
        let (cn, cp) = (neg.surface[kn], pos.surface[kp]);
        let q = model.neg.alpha * vn * neg.mean[kn] + model.pos.alpha * vp * pos.mean[kp];
        t.lithium_drift = t.lithium_drift.max(((q - q0) / q0).abs());
        let ocv = model.pos.ocv.eval(cp / model.pos.params.c_max) - model.neg.ocv.eval(cn / model.neg.params.c_max);
        t.voltage.push(ocv + model.overpotentials(*uk).total);
        t.soc.push(model.pos.soc(pos.mean[kp]));
        t.surface_neg.push(cn);
        t.surface_pos.push(cp);
        t.conc_neg.push(neg.probe_values[kn].clone());
        t.conc_pos.push(pos.probe_values[kp].clone());
    }
    Ok(t)
}

/// Model with its lithium quantity set by uniform particles at `soc0`.
pub fn model_at_soc(base: &CellModel, soc0: f64) -> Result<(CellModel, DVector<f64>)> {
    let q = base.uniform_lithium(base.neg.concentration_at_soc(soc0), base.pos.concentration_at_soc(soc0));
    let model = base.with_lithium(q)?;
    let x0 = model.uniform_state_at_soc(soc0);
    Ok((model, x0))
}

/// Uncorrected and corrected model outputs against the oracle on one profile.
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub times: Vec<f64>,
    pub current: Vec<f64>,
    pub voltage_oracle: Vec<f64>,
    pub voltage_uncorrected: Vec<f64>,
    pub voltage_corrected: Vec<f64>,
    pub surface_oracle: [Vec<f64>; 2],
    pub surface_uncorrected: [Vec<f64>; 2],
    pub surface_corrected: [Vec<f64>; 2],
    /// `(label, t_end)` of each metric window.
    pub windows: Vec<(String, f64)>,
    /// trace → window → metrics.
    pub metrics: BTreeMap<String, BTreeMap<String, Metrics>>,
    pub lithium_drift: f64,
}

impl Comparison {
    /// `100 (uncorrected - corrected) / uncorrected` for `quantity` in
    /// `{"e_v", "e_c_pos_surf", "e_c_neg_surf"}`.
    pub fn improvement(&self, quantity: &str, window: &str) -> Option<(f64, f64)> {
        let u = self.metrics.get(&format!("{quantity}_uncorrected"))?.get(window)?;
        let c = self.metrics.get(&format!("{quantity}_corrected"))?.get(window)?;
        Some((improvement(u.mae, c.mae)?, improvement(u.rmse, c.rmse)?))
    }
}

pub fn improvement(reference: f64, value: f64) -> Option<f64> {
    (reference != 0.0).then(|| 100.0 * (reference - value) / reference)
}

pub fn window_label(t_end: f64) -> String {
    format!("[0,{t_end}]")
}

/// Runs both reduced models and the oracle from uniform particles at
/// `soc0`, with metrics over `[0, t_active]` and the full horizon.
pub fn compare_models(
    base: &CellModel,
    profile: &CurrentProfile,
    dt: f64,
    soc0: f64,
    t_active: f64,
    opts: &ReferenceOptions,
) -> Result<Comparison> {
    let (model, x0) = model_at_soc(base, soc0)?;
    let u = profile.sample(dt);
    let states = simulate_model_states(&model, &x0, &u, None, dt)?;
    let truth = oracle_truth(&model, soc0, &u, dt, opts)?;
    let n = u.len();
    let mut cmp = Comparison {
        times: truth.times.clone(),
        current: u.clone(),
        voltage_oracle: truth.voltage.clone(),
        voltage_uncorrected: Vec::with_capacity(n),
        voltage_corrected: Vec::with_capacity(n),
        surface_oracle: [truth.surface_neg.clone(), truth.surface_pos.clone()],
        surface_uncorrected: [Vec::with_capacity(n), Vec::with_capacity(n)],
        surface_corrected: [Vec::with_capacity(n), Vec::with_capacity(n)],
        windows: Vec::new(),
        metrics: BTreeMap::new(),
        lithium_drift: truth.lithium_drift,
    };
    for (x, uk) in states.iter().zip(&u) {
        let (neg, pos) = model.split(x);
        cmp.voltage_uncorrected.push(model.output_voltage(x, *uk, OutputMap::Uncorrected));
        cmp.voltage_corrected.push(model.output_voltage(x, *uk, OutputMap::Corrected));
        cmp.surface_uncorrected[0].push(neg[neg.len() - 1]);
        cmp.surface_uncorrected[1].push(pos[pos.len() - 1]);
        cmp.surface_corrected[0].push(model.neg.corrected_surface(&neg));
        cmp.surface_corrected[1].push(model.pos.corrected_surface(&pos));
    }
    let horizon = (n - 1) as f64 * dt;
    cmp.windows = vec![(window_label(t_active), t_active), (window_label(horizon), horizon)];

    let mv = |est: &[f64]| -> Vec<f64> { est.iter().zip(&truth.voltage).map(|(e, r)| 1e3 * (r - e)).collect() };
    let rel = |est: &[f64], oracle: &[f64]| -> Vec<f64> {
        est.iter().zip(oracle).map(|(e, r)| 100.0 * (r - e).abs() / r.abs()).collect()
    };
    let traces = [
        ("e_v_uncorrected", mv(&cmp.voltage_uncorrected)),
        ("e_v_corrected", mv(&cmp.voltage_corrected)),
        ("e_c_neg_surf_uncorrected", rel(&cmp.surface_uncorrected[0], &truth.surface_neg)),
        ("e_c_neg_surf_corrected", rel(&cmp.surface_corrected[0], &truth.surface_neg)),
        ("e_c_pos_surf_uncorrected", rel(&cmp.surface_uncorrected[1], &truth.surface_pos)),
        ("e_c_pos_surf_corrected", rel(&cmp.surface_corrected[1], &truth.surface_pos)),
    ];
    for (name, trace) in traces {
        let mut per_window = BTreeMap::new();
        for (label, t_end) in &cmp.windows {
            per_window.insert(label.clone(), metrics(&trace, window_until(&cmp.times, *t_end))?);
        }
        cmp.metrics.insert(name.to_string(), per_window);
    }
    Ok(cmp)
}

/// Observer variants of the campaign.
pub const VARIANTS: [&str; 3] = ["uncorrected", "corrected", "corrected+c_cor"];
/// Error traces of the campaign.
pub const TRACES: [&str; 3] = ["e_soc", "e_c_pos", "e_c_neg"];

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignConfig {
    /// Initial SOC estimates, percent.
    pub soc_estimates: Vec<f64>,
    pub gain_scales: Vec<f64>,
    /// SOC of the plant at `t = 0`, percent.
    pub true_soc0: f64,
    pub dt: f64,
    pub noise: NoiseSpec,
    pub plant: PlantKind,
    pub reference: ReferenceOptions,
    pub scheme: ObserverScheme,
    /// Worker cap; `None` reads `BATTKIT_THREADS`, then uses all cores.
    pub threads: Option<usize>,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            soc_estimates: (0..=20).map(|k| 5.0 * k as f64).collect(),
            gain_scales: vec![1.0, 10.0, 0.1],
            true_soc0: 100.0,
            dt: 0.1,
            noise: NoiseSpec::default(),
            plant: PlantKind::Pde,
            reference: ReferenceOptions::default(),
            scheme: ObserverScheme::Exponential,
            threads: None,
        }
    }
}

/// variant → trace → metrics.
pub type VariantMetrics = BTreeMap<String, BTreeMap<String, Metrics>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub gain_scale: f64,
    pub soc_estimate: f64,
    pub metrics: VariantMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub mae: f64,
    pub rmse: f64,
    /// Relative to the uncorrected-output observer, percent.
    pub mae_improvement_pct: Option<f64>,
    pub rmse_improvement_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignReport {
    /// `"gain=<g>/soc0=<s>"` → variant → trace → metrics.
    pub scenarios: BTreeMap<String, VariantMetrics>,
    /// `"gain=<g>"` → variant → trace → averaged metrics.
    pub summary: BTreeMap<String, BTreeMap<String, BTreeMap<String, SummaryEntry>>>,
    pub lithium_drift: f64,
}

impl CampaignReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn scenario_key(gain: f64, soc: f64) -> String {
    format!("gain={gain}/soc0={soc:05.1}")
}

/// Per-sample error traces of one observer run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunTraces {
    pub soc_hat: Vec<f64>,
    pub e_soc: Vec<f64>,
    pub e_c_pos: Vec<f64>,
    pub e_c_neg: Vec<f64>,
    pub voltage_hat: Vec<f64>,
}

/// Error traces of an estimate sequence against the plant.
pub fn run_traces(model: &CellModel, truth: &Truth, estimates: &[DVector<f64>], corrected: bool, map: OutputMap) -> Result<RunTraces> {
    let n = truth.times.len();
    let mut r = RunTraces {
        soc_hat: Vec::with_capacity(n),
        e_soc: Vec::with_capacity(n),
        e_c_pos: Vec::with_capacity(n),
        e_c_neg: Vec::with_capacity(n),
        voltage_hat: Vec::with_capacity(n),
    };
    for k in 0..n {
        let x = &estimates[k];
        let (neg, pos) = if corrected { model.corrected_concentrations(x) } else { model.split(x) };
        let soc_hat = model.pos.soc(diffusion::mean_concentration(&pos, model.pos.grid()));
        r.soc_hat.push(soc_hat);
        r.e_soc.push(truth.soc[k] - soc_hat);
        r.e_c_pos.push(normalized_concentration_error(&truth.conc_pos[k], pos.as_slice())?);
        r.e_c_neg.push(normalized_concentration_error(&truth.conc_neg[k], neg.as_slice())?);
        r.voltage_hat.push(model.output_voltage(x, truth.current[k], map));
    }
    Ok(r)
}

fn trace_metrics(r: &RunTraces) -> Result<BTreeMap<String, Metrics>> {
    let all = 0..r.e_soc.len();
    let mut m = BTreeMap::new();
    m.insert("e_soc".to_string(), metrics(&r.e_soc, all.clone())?);
    m.insert("e_c_pos".to_string(), metrics(&r.e_c_pos, all.clone())?);
    m.insert("e_c_neg".to_string(), metrics(&r.e_c_neg, all)?);
    Ok(m)
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    let cap = threads.or_else(|| std::env::var("BATTKIT_THREADS").ok().and_then(|v| v.parse().ok()));
    match cap {
        Some(n) if n > 0 => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
            Ok(pool.install(f))
        }
        _ => Ok(f()),
    }
}

/// SOC traces of one scenario, decimated.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTraces {
    pub gain_scale: f64,
    pub soc_estimate: f64,
    pub times: Vec<f64>,
    pub soc_true: Vec<f64>,
    /// One trace per entry of [`VARIANTS`].
    pub soc_hat: [Vec<f64>; 3],
}

/// Estimation campaign over initial SOC estimates and gain scales.
///
/// The plant trajectory is shared by all scenarios; observers see the
/// biased current and voltage. The third variant post-processes the
/// corrected observer's estimates with the static correction.
pub fn run_campaign(base: &CellModel, gain: &DVector<f64>, profile: &CurrentProfile, cfg: &CampaignConfig) -> Result<CampaignReport> {
    campaign(base, gain, profile, cfg, None).map(|r| r.0)
}

/// [`run_campaign`] that also returns SOC traces every `stride` samples.
pub fn run_campaign_with_traces(
    base: &CellModel,
    gain: &DVector<f64>,
    profile: &CurrentProfile,
    cfg: &CampaignConfig,
    stride: usize,
) -> Result<(CampaignReport, Vec<ScenarioTraces>)> {
    campaign(base, gain, profile, cfg, Some(stride.max(1)))
}

fn campaign(
    base: &CellModel,
    gain: &DVector<f64>,
    profile: &CurrentProfile,
    cfg: &CampaignConfig,
    stride: Option<usize>,
) -> Result<(CampaignReport, Vec<ScenarioTraces>)> {
    cfg.noise.validate()?;
    if cfg.soc_estimates.is_empty() || cfg.gain_scales.is_empty() {
        return Err(Error::Config("campaign needs at least one SOC estimate and one gain scale".into()));
    }
    let (model, x0) = model_at_soc(base, cfg.true_soc0)?;
    let u = profile.sample(cfg.dt);
    if u.len() < 2 {
        return Err(Error::Config("profile horizon shorter than two samples".into()));
    }
    let truth = match cfg.plant {
        PlantKind::Model => model_truth(&model, &x0, &u, cfg.dt, OutputMap::Corrected)?,
        PlantKind::Pde => oracle_truth(&model, cfg.true_soc0, &u, cfg.dt, &cfg.reference)?,
    };
    if truth.lithium_drift > 1e-8 {
        return Err(Error::Numerical(format!("plant lost lithium: relative drift {:.3e}", truth.lithium_drift)));
    }
    let (u_meas, y_meas) = inject_bias(&truth.times, &u, &truth.voltage, &cfg.noise);
    let scenarios: Vec<(f64, f64)> = cfg
        .gain_scales
        .iter()
        .flat_map(|g| cfg.soc_estimates.iter().map(move |s| (*g, *s)))
        .collect();
    let decimate = |v: &[f64], k: usize| -> Vec<f64> { v.iter().step_by(k).copied().collect() };

    let run = |&(g, s): &(f64, f64)| -> Result<(ScenarioResult, Option<ScenarioTraces>)> {
        let x_hat0 = model.uniform_state_at_soc(s);
        let l = gain * g;
        let tag = |e: Error| Error::Numerical(format!("scenario {}: {e}", scenario_key(g, s)));
        let unc = observer::simulate_observer_with(&model, &l, &u_meas, &y_meas, &x_hat0, cfg.dt, OutputMap::Uncorrected, cfg.scheme)
            .map_err(tag)?;
        let cor = observer::simulate_observer_with(&model, &l, &u_meas, &y_meas, &x_hat0, cfg.dt, OutputMap::Corrected, cfg.scheme)
            .map_err(tag)?;
        let runs = [
            run_traces(&model, &truth, &unc, false, OutputMap::Uncorrected)?,
            run_traces(&model, &truth, &cor, false, OutputMap::Corrected)?,
            run_traces(&model, &truth, &cor, true, OutputMap::Corrected)?,
        ];
        let mut metrics = BTreeMap::new();
        for (name, r) in VARIANTS.iter().zip(&runs) {
            metrics.insert(name.to_string(), trace_metrics(r)?);
        }
        let traces = stride.map(|k| ScenarioTraces {
            gain_scale: g,
            soc_estimate: s,
            times: decimate(&truth.times, k),
            soc_true: decimate(&truth.soc, k),
            soc_hat: [
                decimate(&runs[0].soc_hat, k),
                decimate(&runs[1].soc_hat, k),
                decimate(&runs[2].soc_hat, k),
            ],
        });
        Ok((
            ScenarioResult {
                gain_scale: g,
                soc_estimate: s,
                metrics,
            },
            traces,
        ))
    };
    let results: Vec<Result<(ScenarioResult, Option<ScenarioTraces>)>> =
        with_pool(cfg.threads, || scenarios.par_iter().map(run).collect())?;
    let (results, traces): (Vec<ScenarioResult>, Vec<Option<ScenarioTraces>>) =
        results.into_iter().collect::<Result<Vec<_>>>()?.into_iter().unzip();
    let traces: Vec<ScenarioTraces> = traces.into_iter().flatten().collect();

    let mut report = CampaignReport {
        scenarios: BTreeMap::new(),
        summary: BTreeMap::new(),
        lithium_drift: truth.lithium_drift,
    };
    for r in &results {
        report.scenarios.insert(scenario_key(r.gain_scale, r.soc_estimate), r.metrics.clone());
    }
    for g in &cfg.gain_scales {
        let group: Vec<&ScenarioResult> = results.iter().filter(|r| r.gain_scale == *g).collect();
        let count = group.len() as f64;
        let mean = |variant: &str, trace: &str| {
            let (mut mae, mut rmse) = (0.0, 0.0);
            for r in &group {
                let m = r.metrics[variant][trace];
                mae += m.mae;
                rmse += m.rmse;
            }
            (mae / count, rmse / count)
        };
        let mut per_variant = BTreeMap::new();
        for v in VARIANTS {
            let mut per_trace = BTreeMap::new();
            for t in TRACES {
                let (mae, rmse) = mean(v, t);
                let (rm, rr) = mean(VARIANTS[0], t);
                per_trace.insert(
                    t.to_string(),
                    SummaryEntry {
                        mae,
                        rmse,
                        mae_improvement_pct: improvement(rm, mae),
                        rmse_improvement_pct: improvement(rr, rmse),
                    },
                );
            }
            per_variant.insert(v.to_string(), per_trace);
        }
        report.summary.insert(format!("gain={g}"), per_variant);
    }
    Ok((report, traces))
}
