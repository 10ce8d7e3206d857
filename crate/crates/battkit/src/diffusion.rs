//! Finite-volume radial diffusion inside one spherical electrode particle.
//!
//! The particle of radius `R` is cut into `N` concentric shells. Shell `i`
//! spans `(r_{i-1}, r_i]` with `r_0 = 0`, and its concentration `c_i` is read
//! as the value at the outer radius `r_i`. Lithium exchanged with the
//! electrolyte enters through the last shell only, so
//!
//! ```text
//! dc/dt = A c + B m,      Γ A = 0,  Γ B = V_s,  A 1 = 0
//! ```
//!
//! where `Γ` is the row of shell volumes and `m` the volumetric molar flux.
//! The mean concentration `Γ c / V_s` therefore integrates `m` exactly.
//!
//! Low-order grids leave a steady offset between shell values and the PDE
//! profile under constant flux. [`DiffusionSystem::coefficients`] holds the
//! static gains `K_j` that remove it through [`correct_concentrations`].

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Physical description of one electrode, SI units throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElectrodeParams {
    /// Particle radius, m.
    pub radius: f64,
    /// Solid diffusivity, m²/s.
    pub diffusivity: f64,
    /// Active material volume fraction.
    pub volume_fraction: f64,
    /// Electrode thickness, m.
    pub thickness: f64,
    /// Maximum solid concentration, mol/m³.
    pub c_max: f64,
    /// Exchange current density, A/m².
    pub exchange_current: f64,
    /// Electronic conductivity, S/m.
    pub conductivity: f64,
    /// Electrolyte phase volume fraction.
    pub electrolyte_fraction: f64,
    /// Mean concentration at 0% SOC, mol/m³.
    pub c_soc0: f64,
    /// Mean concentration at 100% SOC, mol/m³.
    pub c_soc100: f64,
}

impl ElectrodeParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.radius > 0.0
            && self.diffusivity > 0.0
            && self.volume_fraction > 0.0
            && self.volume_fraction <= 1.0
            && self.thickness > 0.0
            && self.c_max > 0.0
            && self.c_soc0 != self.c_soc100;
        if ok {
            Ok(())
        } else {
            Err(Error::Input(format!("electrode parameters out of range: {self:?}")))
        }
    }

    /// Diffusion time constant `R²/D`, s.
    pub fn tau(&self) -> f64 {
        self.radius * self.radius / self.diffusivity
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridScheme {
    /// Equal shell volumes, `r_i = R (i/N)^{1/3}`.
    #[default]
    UniformVolume,
    /// Equal radial spacing, `r_i = R i/N`.
    UniformRadius,
}

impl FromStr for GridScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform-volume" => Ok(GridScheme::UniformVolume),
            "uniform-radius" => Ok(GridScheme::UniformRadius),
            other => Err(Error::Input(format!("unknown grid scheme `{other}`"))),
        }
    }
}

impl fmt::Display for GridScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GridScheme::UniformVolume => "uniform-volume",
            GridScheme::UniformRadius => "uniform-radius",
        })
    }
}

/// Shell geometry of a discretized sphere.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialGrid {
    pub scheme: GridScheme,
    pub radius: f64,
    /// Outer shell radii, strictly increasing, last equals `radius`.
    pub radii: Vec<f64>,
    pub volumes: Vec<f64>,
    /// Sphere area at each outer radius.
    pub surfaces: Vec<f64>,
    pub particle_volume: f64,
}

impl RadialGrid {
    pub fn new(n: usize, radius: f64, scheme: GridScheme) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 shells, got {n}")));
        }
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::InvalidGrid(format!("radius must be positive, got {radius}")));
        }
        let radii: Vec<f64> = (1..=n)
            .map(|i| {
                let f = i as f64 / n as f64;
                match scheme {
                    GridScheme::UniformVolume => radius * f.cbrt(),
                    GridScheme::UniformRadius => radius * f,
                }
            })
            .collect();
        let mut volumes = Vec::with_capacity(n);
        let mut inner = 0.0_f64;
        for &r in &radii {
            volumes.push(4.0 / 3.0 * PI * (r.powi(3) - inner.powi(3)));
            inner = r;
        }
        let surfaces = radii.iter().map(|r| 4.0 * PI * r * r).collect();
        Ok(RadialGrid {
            scheme,
            radius,
            radii,
            volumes,
            surfaces,
            particle_volume: 4.0 / 3.0 * PI * radius.powi(3),
        })
    }

    pub fn len(&self) -> usize {
        self.radii.len()
    }

    pub fn is_empty(&self) -> bool {
        self.radii.is_empty()
    }
}

pub fn build_radial_grid(n: usize, radius: f64, scheme: GridScheme) -> Result<RadialGrid> {
    RadialGrid::new(n, radius, scheme)
}

/// Finite-volume system of one particle plus its reduced mismatch system and
/// correction coefficients.
#[derive(Debug, Clone)]
pub struct DiffusionSystem {
    pub grid: RadialGrid,
    pub diffusivity: f64,
    /// `R²/D`, s.
    pub tau: f64,
    /// Tridiagonal rate matrix, 1/s.
    pub a: DMatrix<f64>,
    /// Input column, only the last entry is nonzero.
    pub b: DVector<f64>,
    /// Shell volumes as a vector; used as the row `Γ`.
    pub gamma: DVector<f64>,
    /// Outward coupling `μ_i`, i = 1..N-1.
    pub mu: Vec<f64>,
    /// Inward coupling `μ̃_i`, i = 2..N (stored from index 0).
    pub mu_tilde: Vec<f64>,
    /// `υ_i = μ̃_i + μ_i`, i = 2..N-1 (stored from index 0).
    pub upsilon: Vec<f64>,
    /// `Ã_ij = A_ij - A_iN V_j / V_N`, size N-1.
    pub reduced: DMatrix<f64>,
    /// `y = Ã⁻¹ 1`.
    pub steady_response: DVector<f64>,
    /// Static correction coefficients `K_j`.
    pub coefficients: DVector<f64>,
}

impl DiffusionSystem {
    pub fn new(grid: RadialGrid, diffusivity: f64) -> Result<Self> {
        if !(diffusivity > 0.0 && diffusivity.is_finite()) {
            return Err(Error::Input(format!("diffusivity must be positive, got {diffusivity}")));
        }
        let n = grid.len();
        let (r, v, s) = (&grid.radii, &grid.volumes, &grid.surfaces);

        let mu: Vec<f64> = (0..n - 1)
            .map(|i| s[i] / (r[i + 1] - r[i]) * diffusivity / v[i])
            .collect();
        let mu_tilde: Vec<f64> = (1..n)
            .map(|i| s[i - 1] / (r[i] - r[i - 1]) * diffusivity / v[i])
            .collect();
        let upsilon: Vec<f64> = (1..n - 1).map(|i| mu_tilde[i - 1] + mu[i]).collect();

        let mut a = DMatrix::zeros(n, n);
        a[(0, 0)] = -mu[0];
        for i in 1..n - 1 {
            a[(i, i)] = -upsilon[i - 1];
        }
        a[(n - 1, n - 1)] = -mu_tilde[n - 2];
        for i in 0..n - 1 {
            a[(i, i + 1)] = mu[i];
            a[(i + 1, i)] = mu_tilde[i];
        }

        let mut b = DVector::zeros(n);
        b[n - 1] = grid.particle_volume / v[n - 1];
        let gamma = DVector::from_column_slice(v);

        let reduced = DMatrix::from_fn(n - 1, n - 1, |i, j| {
            a[(i, j)] - a[(i, n - 1)] * v[j] / v[n - 1]
        });
        let steady_response = reduced
            .clone()
            .lu()
            .solve(&DVector::from_element(n - 1, 1.0))
            .filter(|y| y.iter().all(|x| x.is_finite()))
            .ok_or_else(|| Error::Numerical("reduced diffusion matrix is singular".into()))?;

        let tau = grid.radius * grid.radius / diffusivity;
        let coefficients = coefficients_from(&grid, tau, &steady_response)?;

        Ok(DiffusionSystem {
            grid,
            diffusivity,
            tau,
            a,
            b,
            gamma,
            mu,
            mu_tilde,
            upsilon,
            reduced,
            steady_response,
            coefficients,
        })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    /// `Γ_red Ã⁻¹ 1`.
    pub fn reduced_volume_response(&self) -> f64 {
        let n = self.len();
        self.gamma.rows(0, n - 1).dot(&self.steady_response)
    }
}

pub fn build_diffusion_system(grid: RadialGrid, diffusivity: f64) -> Result<DiffusionSystem> {
    DiffusionSystem::new(grid, diffusivity)
}

fn coefficients_from(grid: &RadialGrid, tau: f64, y: &DVector<f64>) -> Result<DVector<f64>> {
    let n = grid.len();
    let mut k = DVector::zeros(n);
    for j in 0..n - 1 {
        k[j] = k_offset(grid.radii[j], tau, grid.radius)? / y[j];
    }
    let den: f64 = (0..n - 1).map(|j| grid.volumes[j] * y[j]).sum();
    k[n - 1] = -k_offset(grid.radii[n - 1], tau, grid.radius)? * grid.volumes[n - 1] / den;
    if k.iter().all(|x| x.is_finite()) {
        Ok(k)
    } else {
        Err(Error::Numerical("non-finite correction coefficient".into()))
    }
}

/// Correction coefficients `K_j` of a system (already cached on it).
pub fn correction_coefficients(sys: &DiffusionSystem) -> DVector<f64> {
    sys.coefficients.clone()
}

/// Low-frequency offset `k(r) = ((r/R)² - 3/5) τ / 6` of the PDE transfer
/// function, in seconds.
pub fn k_offset(r: f64, tau: f64, radius: f64) -> Result<f64> {
    if !(r >= 0.0 && r <= radius * (1.0 + 1e-12)) {
        return Err(Error::Domain(format!("radius {r} outside [0, {radius}]")));
    }
    if !(tau > 0.0) {
        return Err(Error::Domain(format!("time constant must be positive, got {tau}")));
    }
    let x = r / radius;
    Ok((x * x - 0.6) / 6.0 * tau)
}

/// Volume-weighted mean `Γ c / V_s`.
pub fn mean_concentration(c: &DVector<f64>, grid: &RadialGrid) -> f64 {
    debug_assert_eq!(c.len(), grid.len());
    c.iter().zip(&grid.volumes).map(|(c, v)| c * v).sum::<f64>() / grid.particle_volume
}

/// `c_cor,j = c_mean - K_j (c_mean - c_j)`.
pub fn correct_concentrations(
    c: &DVector<f64>,
    coefficients: &DVector<f64>,
    grid: &RadialGrid,
) -> DVector<f64> {
    let mean = mean_concentration(c, grid);
    DVector::from_fn(c.len(), |j, _| mean - coefficients[j] * (mean - c[j]))
}

/// Steady state of the mismatch `c_mean 1 - c` under constant flux `m`.
///
/// Entries sum to zero once weighted by shell volumes.
pub fn steady_mismatch(sys: &DiffusionSystem, m: f64) -> DVector<f64> {
    let n = sys.len();
    let mut out = DVector::zeros(n);
    for j in 0..n - 1 {
        out[j] = -sys.steady_response[j] * m;
    }
    out[n - 1] = sys.reduced_volume_response() * m / sys.grid.volumes[n - 1];
    out
}

/// Spectral summary of a rate matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpectralMargin {
    /// Largest real part among the eigenvalues.
    pub max_real: f64,
    /// Frobenius norm of the matrix.
    pub norm: f64,
    /// `max_real < -1e-12 * norm`.
    pub hurwitz: bool,
}

impl SpectralMargin {
    /// Distance of the spectrum from the imaginary axis, negative when unstable.
    pub fn margin(&self) -> f64 {
        -self.max_real
    }
}

/// Relative threshold below which a real part counts as strictly negative.
pub const HURWITZ_RELATIVE_TOL: f64 = 1e-12;

pub fn is_hurwitz(m: &DMatrix<f64>) -> Result<SpectralMargin> {
    let spectrum = real_spectrum(m)?;
    let max_real = spectrum.last().copied().unwrap_or(f64::NEG_INFINITY);
    let norm = m.norm();
    Ok(SpectralMargin {
        max_real,
        norm,
        hurwitz: max_real < -HURWITZ_RELATIVE_TOL * norm,
    })
}

/// Real parts of the eigenvalues, ascending.
///
/// Tridiagonal matrices whose off-diagonal pairs share a sign are symmetrized
/// by diagonal similarity and handled by a symmetric solver.
pub fn real_spectrum(m: &DMatrix<f64>) -> Result<Vec<f64>> {
    if !m.is_square() {
        return Err(Error::Input("spectrum of a non-square matrix".into()));
    }
    if let Some(sym) = linalg::symmetrize_tridiagonal(m) {
        return Ok(linalg::sym_eigenvalues(&sym));
    }
    linalg::general_real_parts(m)
}

/// Count of eigenvalues within `1e-12 ‖M‖` of zero.
pub fn zero_eigenvalue_count(m: &DMatrix<f64>) -> Result<usize> {
    let tol = HURWITZ_RELATIVE_TOL * m.norm();
    Ok(real_spectrum(m)?.iter().filter(|l| l.abs() <= tol).count())
}
