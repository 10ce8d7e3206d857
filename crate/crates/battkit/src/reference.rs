//! High-resolution oracle for spherical diffusion under a boundary flux.
//!
//! The oracle reuses the finite-volume assembly of [`crate::diffusion`] on a
//! fine uniform-volume grid and steps it with implicit Euler, which is exact
//! for the steady ramp reached under constant flux. Shell values sit at outer
//! radii, so the raw fine solution carries a first-order spatial error that is
//! almost a uniform shift of the profile. With `richardson` enabled the solver
//! runs `N_ref` and `2 N_ref` side by side and reports `2 c_2N - c_N` at the
//! coarse nodes, which coincide on uniform-volume grids.

use nalgebra::DVector;

use crate::diffusion::{self, DiffusionSystem, ElectrodeParams, GridScheme, RadialGrid};
use crate::error::{Error, Result};
use crate::linalg::TridiagonalLu;

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceOptions {
    pub n_ref: usize,
    /// Time step, s. `None` selects `τ/2000`.
    pub dt: Option<f64>,
    pub richardson: bool,
    /// Keep a full profile every `snapshot_every` steps; 0 keeps only the last.
    pub snapshot_every: usize,
    /// Radii at which the profile is sampled on every step.
    pub probes: Vec<f64>,
}

impl Default for ReferenceOptions {
    fn default() -> Self {
        ReferenceOptions {
            n_ref: 400,
            dt: None,
            richardson: true,
            snapshot_every: 0,
            probes: Vec::new(),
        }
    }
}

/// Recorded oracle trajectory.
#[derive(Debug, Clone)]
pub struct ReferenceSolution {
    /// Radii of the reported profile nodes.
    pub radii: Vec<f64>,
    pub particle_radius: f64,
    pub diffusivity: f64,
    /// Step times, starting at 0.
    pub times: Vec<f64>,
    /// Value at `r = R` for each time.
    pub surface: Vec<f64>,
    /// Volume mean for each time.
    pub mean: Vec<f64>,
    pub probe_radii: Vec<f64>,
    /// `probe_values[k][p]` is probe `p` at `times[k]`.
    pub probe_values: Vec<Vec<f64>>,
    pub snapshot_times: Vec<f64>,
    pub snapshots: Vec<Vec<f64>>,
    /// Profile at the last time.
    pub final_profile: Vec<f64>,
}

impl ReferenceSolution {
    pub fn final_time(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    /// Final profile interpolated at `r`.
    pub fn final_at(&self, r: f64) -> f64 {
        interpolate(&self.radii, &self.final_profile, r)
    }

    /// Flux density `-D ∂c/∂r` at the interior interfaces of a profile,
    /// mol/(m²·s). Entry `i` sits at `radii[i]`; the centre value is zero.
    pub fn flux_density(&self, profile: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(profile.len());
        out.push(0.0);
        for i in 1..profile.len() {
            let dr = self.radii[i] - self.radii[i - 1];
            out.push(-self.diffusivity * (profile[i] - profile[i - 1]) / dr);
        }
        out
    }
}

/// Linear interpolation of node values; constant below the first node.
pub fn interpolate(radii: &[f64], values: &[f64], r: f64) -> f64 {
    let n = radii.len();
    if r <= radii[0] {
        return values[0];
    }
    if r >= radii[n - 1] {
        return values[n - 1];
    }
    let k = radii.partition_point(|x| *x < r);
    if radii[k] == r {
        return values[k];
    }
    let (r0, r1) = (radii[k - 1], radii[k]);
    let w = (r - r0) / (r1 - r0);
    values[k - 1] * (1.0 - w) + values[k] * w
}

struct FineStepper {
    sys: DiffusionSystem,
    lu: TridiagonalLu,
    dt: f64,
    c: Vec<f64>,
    b_last: f64,
}

impl FineStepper {
    fn new(params: &ElectrodeParams, n: usize, dt: f64, c0: f64) -> Result<Self> {
        let grid = RadialGrid::new(n, params.radius, GridScheme::UniformVolume)?;
        let sys = DiffusionSystem::new(grid, params.diffusivity)?;
        let a = &sys.a;
        let sub: Vec<f64> = (0..n - 1).map(|i| -dt * a[(i + 1, i)]).collect();
        let sup: Vec<f64> = (0..n - 1).map(|i| -dt * a[(i, i + 1)]).collect();
        let diag: Vec<f64> = (0..n).map(|i| 1.0 - dt * a[(i, i)]).collect();
        let lu = TridiagonalLu::new(&sub, &diag, &sup)?;
        let b_last = sys.b[n - 1];
        Ok(FineStepper {
            sys,
            lu,
            dt,
            c: vec![c0; n],
            b_last,
        })
    }

    fn step(&mut self, m: f64) {
        let n = self.c.len();
        self.c[n - 1] += self.dt * self.b_last * m;
        self.lu.solve_in_place(&mut self.c);
    }
}

/// Oracle solve with default options apart from grid size and step.
pub fn solve_reference(
    params: &ElectrodeParams,
    n_ref: usize,
    m: impl Fn(f64) -> f64,
    c0: f64,
    horizon: f64,
    dt: f64,
) -> Result<ReferenceSolution> {
    let opts = ReferenceOptions {
        n_ref,
        dt: Some(dt),
        ..ReferenceOptions::default()
    };
    ReferenceSolver::new(opts).solve(params, m, c0, horizon)
}

#[derive(Debug, Clone, Default)]
pub struct ReferenceSolver {
    pub options: ReferenceOptions,
}

impl ReferenceSolver {
    pub fn new(options: ReferenceOptions) -> Self {
        ReferenceSolver { options }
    }

    /// Integrates from a uniform profile `c0` over `[0, horizon]`.
    ///
    /// The flux is sampled at the end of each step. The number of steps is
    /// `round(horizon / dt)`.
    pub fn solve(
        &self,
        params: &ElectrodeParams,
        m: impl Fn(f64) -> f64,
        c0: f64,
        horizon: f64,
    ) -> Result<ReferenceSolution> {
        let o = &self.options;
        params.validate()?;
        if o.n_ref < 100 {
            return Err(Error::Input(format!("oracle needs at least 100 shells, got {}", o.n_ref)));
        }
        if !(c0 >= 0.0 && c0.is_finite()) {
            return Err(Error::Input(format!("initial concentration must be nonnegative, got {c0}")));
        }
        if !(horizon >= 0.0 && horizon.is_finite()) {
            return Err(Error::Input(format!("horizon must be nonnegative, got {horizon}")));
        }
        let dt = o.dt.unwrap_or(params.tau() / 2000.0);
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Input(format!("time step must be positive, got {dt}")));
        }
        let steps = (horizon / dt).round() as usize;

        let mut coarse = FineStepper::new(params, o.n_ref, dt, c0)?;
        let mut fine = if o.richardson {
            Some(FineStepper::new(params, 2 * o.n_ref, dt, c0)?)
        } else {
            None
        };
        let grid = coarse.sys.grid.clone();
        let radii = grid.radii.clone();
        let n = radii.len();

        let report = |coarse: &FineStepper, fine: &Option<FineStepper>, out: &mut Vec<f64>| {
            out.clear();
            match fine {
                Some(f) => out.extend((0..n).map(|i| 2.0 * f.c[2 * i + 1] - coarse.c[i])),
                None => out.extend_from_slice(&coarse.c),
            }
        };

        let mut sol = ReferenceSolution {
            radii: radii.clone(),
            particle_radius: params.radius,
            diffusivity: params.diffusivity,
            times: Vec::with_capacity(steps + 1),
            surface: Vec::with_capacity(steps + 1),
            mean: Vec::with_capacity(steps + 1),
            probe_radii: o.probes.clone(),
            probe_values: Vec::new(),
            snapshot_times: Vec::new(),
            snapshots: Vec::new(),
            final_profile: Vec::new(),
        };
        let mut profile = Vec::with_capacity(n);
        // The mean comes from the conservative coarse run, not the extrapolated profile.
        let mean_of = |c: &[f64]| {
            c.iter().zip(&grid.volumes).map(|(c, v)| c * v).sum::<f64>() / grid.particle_volume
        };
        let record = |k: usize, profile: &[f64], mean: f64, sol: &mut ReferenceSolution| {
            let t = k as f64 * dt;
            sol.times.push(t);
            sol.surface.push(profile[n - 1]);
            sol.mean.push(mean);
            if !sol.probe_radii.is_empty() {
                let row = sol.probe_radii.iter().map(|r| interpolate(&radii, profile, *r)).collect();
                sol.probe_values.push(row);
            }
            if o.snapshot_every > 0 && k % o.snapshot_every == 0 {
                sol.snapshot_times.push(t);
                sol.snapshots.push(profile.to_vec());
            }
        };

        report(&coarse, &fine, &mut profile);
        record(0, &profile, mean_of(&coarse.c), &mut sol);
        for k in 1..=steps {
            let mk = m(k as f64 * dt);
            if !mk.is_finite() {
                return Err(Error::Integration {
                    step: k,
                    time: k as f64 * dt,
                    message: "non-finite flux".into(),
                });
            }
            coarse.step(mk);
            if let Some(f) = fine.as_mut() {
                f.step(mk);
            }
            report(&coarse, &fine, &mut profile);
            if !profile[n - 1].is_finite() || !profile[0].is_finite() {
                return Err(Error::Integration {
                    step: k,
                    time: k as f64 * dt,
                    message: "oracle state became non-finite".into(),
                });
            }
            record(k, &profile, mean_of(&coarse.c), &mut sol);
        }
        sol.final_profile = profile;
        Ok(sol)
    }
}

/// Analytic steady profile `c_mean + k(r) m` reached under constant flux.
pub fn steady_profile(c_mean_inf: f64, m: f64, tau: f64, radius: f64, r: f64) -> Result<f64> {
    Ok(c_mean_inf + diffusion::k_offset(r, tau, radius)? * m)
}

/// Writes `t,r,c` rows for every stored snapshot.
pub fn write_snapshots_csv<W: std::io::Write>(sol: &ReferenceSolution, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let err = |e: csv::Error| Error::Input(format!("csv write failed: {e}"));
    w.write_record(["t_s", "r_m", "c_mol_m3"]).map_err(err)?;
    for (t, snap) in sol.snapshot_times.iter().zip(&sol.snapshots) {
        for (r, c) in sol.radii.iter().zip(snap) {
            w.write_record(&[t.to_string(), r.to_string(), c.to_string()]).map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::Input(format!("csv flush failed: {e}")))?;
    Ok(())
}

/// Mean concentration of a profile on the oracle's grid.
pub fn profile_mean(sol: &ReferenceSolution, profile: &[f64]) -> f64 {
    let grid = RadialGrid::new(sol.radii.len(), sol.particle_radius, GridScheme::UniformVolume)
        .expect("oracle grid is valid");
    diffusion::mean_concentration(&DVector::from_column_slice(profile), &grid)
}
