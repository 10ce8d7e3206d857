//! Reduced full-cell model: two particles coupled by lithium conservation.
//!
//! The state drops the centre shell of the negative particle, which is
//! recovered from the conserved lithium quantity `Q`:
//!
//! ```text
//! x = (c_neg,2 .. c_neg,N, c_pos,1 .. c_pos,N)
//! dx/dt = A x + B u + K + E w
//! y     = OCV_pos(ζ_pos) - OCV_neg(ζ_neg) + g(u)
//! ```
//!
//! Current `u` follows the generator convention, positive in discharge.
//! With the corrected output map the stoichiometries are read from the
//! corrected surface concentrations, which are affine in `x`.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::Deserialize;

use crate::diffusion::{self, DiffusionSystem, ElectrodeParams, GridScheme, RadialGrid};
use crate::error::{Error, Result};

/// Seconds per hour; `Q` is stored in Ah.
const SECONDS_PER_HOUR: f64 = 3600.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Side {
    Neg,
    Pos,
}

impl Side {
    pub fn name(self) -> &'static str {
        match self {
            Side::Neg => "neg",
            Side::Pos => "pos",
        }
    }
}

/// Piecewise-linear open-circuit voltage with linear extrapolation.
#[derive(Debug, Clone, PartialEq)]
pub struct OcvCurve {
    zeta: Vec<f64>,
    volts: Vec<f64>,
    slopes: Vec<f64>,
}

impl OcvCurve {
    /// Rows must be strictly increasing in stoichiometry within `[0, 1]`.
    pub fn new(table: &[(f64, f64)]) -> Result<Self> {
        let fail = |line: usize, message: String| Error::Format {
            path: "<ocv table>".into(),
            line,
            message,
        };
        if table.len() < 2 {
            return Err(fail(0, format!("need at least 2 rows, got {}", table.len())));
        }
        for (i, &(z, v)) in table.iter().enumerate() {
            if !(0.0..=1.0).contains(&z) || !v.is_finite() {
                return Err(fail(i + 1, format!("row ({z}, {v}) outside the valid range")));
            }
            if i > 0 && z <= table[i - 1].0 {
                return Err(fail(i + 1, "stoichiometry must be strictly increasing".into()));
            }
        }
        let zeta: Vec<f64> = table.iter().map(|r| r.0).collect();
        let volts: Vec<f64> = table.iter().map(|r| r.1).collect();
        let slopes = zeta
            .windows(2)
            .zip(volts.windows(2))
            .map(|(z, v)| (v[1] - v[0]) / (z[1] - z[0]))
            .collect();
        Ok(OcvCurve { zeta, volts, slopes })
    }

    /// Reads a `zeta,voltage_V` CSV with header.
    pub fn from_csv_reader<R: std::io::Read>(reader: R, label: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).comment(Some(b'#')).from_reader(reader);
        let fmt = |line: usize, message: String| Error::Format {
            path: label.to_string(),
            line,
            message,
        };
        let headers = rdr.headers().map_err(|e| fmt(1, e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["zeta", "voltage_V"] {
            return Err(fmt(1, format!("expected header `zeta,voltage_V`, found `{}`", headers.iter().collect::<Vec<_>>().join(","))));
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| fmt(e.position().map_or(0, |p| p.line() as usize), e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line() as usize);
            let parse = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| fmt(line, "missing column".into()))?
                    .parse::<f64>()
                    .map_err(|e| fmt(line, e.to_string()))
            };
            rows.push((parse(0)?, parse(1)?, line));
        }
        let table: Vec<(f64, f64)> = rows.iter().map(|r| (r.0, r.1)).collect();
        OcvCurve::new(&table).map_err(|e| match e {
            Error::Format { line, message, .. } => {
                let line = if line == 0 { 0 } else { rows[line - 1].2 };
                fmt(line, message)
            }
            other => other,
        })
    }

    pub fn from_csv(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file, &path.display().to_string())
    }

    /// Canned curve whose extreme segment slopes equal the reference bounds.
    pub fn canned(side: Side) -> Self {
        let text = match side {
            Side::Neg => include_str!("../data/ocv_neg.csv"),
            Side::Pos => include_str!("../data/ocv_pos.csv"),
        };
        Self::from_csv_reader(text.as_bytes(), side.name()).expect("canned OCV table is valid")
    }

    pub fn table(&self) -> Vec<(f64, f64)> {
        self.zeta.iter().copied().zip(self.volts.iter().copied()).collect()
    }

    /// Index of the segment used at `z`, end segments extended outward.
    pub fn segment(&self, z: f64) -> usize {
        let n = self.zeta.len();
        self.zeta.partition_point(|x| *x <= z).saturating_sub(1).min(n - 2)
    }

    pub fn eval(&self, z: f64) -> f64 {
        let k = self.segment(z);
        self.volts[k] + self.slopes[k] * (z - self.zeta[k])
    }

    /// Slope of the segment containing `z`, extrapolated outside the table.
    pub fn slope_at(&self, z: f64) -> f64 {
        self.slopes[self.segment(z)]
    }

    pub fn segment_slope(&self, k: usize) -> f64 {
        self.slopes[k]
    }

    /// `(C_1, C_2)` = (min, max) segment slope.
    pub fn slope_bounds(&self) -> (f64, f64) {
        let lo = self.slopes.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.slopes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    }
}

pub fn load_ocv(table: &[(f64, f64)]) -> Result<OcvCurve> {
    OcvCurve::new(table)
}

/// Flat parameter file keyed by the usual symbol names.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellParams {
    #[serde(rename = "A_cell")]
    pub a_cell: f64,
    #[serde(rename = "F")]
    pub faraday: f64,
    #[serde(rename = "R")]
    pub gas_constant: f64,
    #[serde(rename = "T")]
    pub temperature: f64,
    #[serde(rename = "N_pos")]
    pub n_pos: usize,
    #[serde(rename = "N_neg")]
    pub n_neg: usize,
    /// Stored for completeness; the model uses `R T / F` directly.
    #[serde(rename = "u_T", default)]
    pub thermal_voltage: Option<f64>,
    pub d_pos: f64,
    pub d_neg: f64,
    pub d_sep: f64,
    #[serde(rename = "D_pos")]
    pub diff_pos: f64,
    #[serde(rename = "D_neg")]
    pub diff_neg: f64,
    #[serde(rename = "R_pos")]
    pub radius_pos: f64,
    #[serde(rename = "R_neg")]
    pub radius_neg: f64,
    pub j0_pos: f64,
    pub j0_neg: f64,
    pub eps_pos: f64,
    pub eps_neg: f64,
    pub eps_e_pos: f64,
    pub eps_e_neg: f64,
    pub eps_e_sep: f64,
    pub sigma_pos: f64,
    pub sigma_neg: f64,
    pub kappa_e: f64,
    /// Ah.
    #[serde(rename = "Q_cell")]
    pub q_cell: f64,
    /// Ah.
    #[serde(rename = "Q")]
    pub q: f64,
    pub c0_pos: f64,
    pub c0_neg: f64,
    pub c100_pos: f64,
    pub c100_neg: f64,
    pub cmax_pos: f64,
    pub cmax_neg: f64,
}

impl CellParams {
    pub fn parse(text: &str, label: &str) -> Result<Self> {
        let params: CellParams = toml::from_str(text).map_err(|e| {
            let line = e.span().map_or(0, |s| text[..s.start].lines().count().max(1));
            Error::Format {
                path: label.to_string(),
                line,
                message: e.message().to_string(),
            }
        })?;
        params.validate()?;
        Ok(params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Bundled reference parameter set with four shells per particle.
    pub fn reference_cell() -> Self {
        Self::parse(include_str!("../data/reference_cell.params"), "reference_cell.params").expect("bundled parameters parse")
    }

    pub fn validate(&self) -> Result<()> {
        self.electrode(Side::Neg).validate()?;
        self.electrode(Side::Pos).validate()?;
        let positive = [
            self.a_cell,
            self.faraday,
            self.gas_constant,
            self.temperature,
            self.d_sep,
            self.kappa_e,
            self.eps_e_sep,
            self.q_cell,
            self.q,
        ];
        if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config("cell constants must be positive and finite".into()));
        }
        if self.n_neg < 2 || self.n_pos < 2 {
            return Err(Error::Config(format!(
                "need at least 2 shells per particle, got N_neg={} N_pos={}",
                self.n_neg, self.n_pos
            )));
        }
        Ok(())
    }

    pub fn electrode(&self, side: Side) -> ElectrodeParams {
        match side {
            Side::Neg => ElectrodeParams {
                radius: self.radius_neg,
                diffusivity: self.diff_neg,
                volume_fraction: self.eps_neg,
                thickness: self.d_neg,
                c_max: self.cmax_neg,
                exchange_current: self.j0_neg,
                conductivity: self.sigma_neg,
                electrolyte_fraction: self.eps_e_neg,
                c_soc0: self.c0_neg,
                c_soc100: self.c100_neg,
            },
            Side::Pos => ElectrodeParams {
                radius: self.radius_pos,
                diffusivity: self.diff_pos,
                volume_fraction: self.eps_pos,
                thickness: self.d_pos,
                c_max: self.cmax_pos,
                exchange_current: self.j0_pos,
                conductivity: self.sigma_pos,
                electrolyte_fraction: self.eps_e_pos,
                c_soc0: self.c0_pos,
                c_soc100: self.c100_pos,
            },
        }
    }

    pub fn constants(&self) -> CellConstants {
        CellConstants {
            a_cell: self.a_cell,
            faraday: self.faraday,
            gas_constant: self.gas_constant,
            temperature: self.temperature,
            d_sep: self.d_sep,
            kappa_e: self.kappa_e,
            eps_e_sep: self.eps_e_sep,
            q_cell: self.q_cell,
        }
    }

    /// Flat `key -> value` view, sorted by key; used for hashing.
    pub fn to_map(&self) -> BTreeMap<&'static str, f64> {
        let mut m = BTreeMap::new();
        for (k, v) in [
            ("A_cell", self.a_cell),
            ("F", self.faraday),
            ("R", self.gas_constant),
            ("T", self.temperature),
            ("N_pos", self.n_pos as f64),
            ("N_neg", self.n_neg as f64),
            ("d_pos", self.d_pos),
            ("d_neg", self.d_neg),
            ("d_sep", self.d_sep),
            ("D_pos", self.diff_pos),
            ("D_neg", self.diff_neg),
            ("R_pos", self.radius_pos),
            ("R_neg", self.radius_neg),
            ("j0_pos", self.j0_pos),
            ("j0_neg", self.j0_neg),
            ("eps_pos", self.eps_pos),
            ("eps_neg", self.eps_neg),
            ("eps_e_pos", self.eps_e_pos),
            ("eps_e_neg", self.eps_e_neg),
            ("eps_e_sep", self.eps_e_sep),
            ("sigma_pos", self.sigma_pos),
            ("sigma_neg", self.sigma_neg),
            ("kappa_e", self.kappa_e),
            ("Q_cell", self.q_cell),
            ("Q", self.q),
            ("c0_pos", self.c0_pos),
            ("c0_neg", self.c0_neg),
            ("c100_pos", self.c100_pos),
            ("c100_neg", self.c100_neg),
            ("cmax_pos", self.cmax_pos),
            ("cmax_neg", self.cmax_neg),
        ] {
            m.insert(k, v);
        }
        if let Some(u) = self.thermal_voltage {
            m.insert("u_T", u);
        }
        m
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellConstants {
    pub a_cell: f64,
    pub faraday: f64,
    pub gas_constant: f64,
    pub temperature: f64,
    pub d_sep: f64,
    pub kappa_e: f64,
    pub eps_e_sep: f64,
    /// Ah.
    pub q_cell: f64,
}

/// Volumetric molar flux into the particle, mol/(m³·s).
///
/// Discharge (`current > 0`) empties the negative particle.
pub fn m_from_current(current: f64, side: Side, e: &ElectrodeParams, c: &CellConstants) -> f64 {
    let scale = e.volume_fraction * c.a_cell * e.thickness * c.faraday;
    match side {
        Side::Neg => -current / scale,
        Side::Pos => current / scale,
    }
}

/// One particle inside the cell model.
#[derive(Debug, Clone)]
pub struct Electrode {
    pub side: Side,
    pub params: ElectrodeParams,
    pub system: DiffusionSystem,
    pub ocv: OcvCurve,
    /// `F ε A d / (3600 V_s)`, Ah per (mol/m³ · m³).
    pub alpha: f64,
}

impl Electrode {
    pub fn new(
        side: Side,
        params: ElectrodeParams,
        n: usize,
        scheme: GridScheme,
        ocv: OcvCurve,
        constants: &CellConstants,
    ) -> Result<Self> {
        params.validate()?;
        let grid = RadialGrid::new(n, params.radius, scheme)?;
        let system = DiffusionSystem::new(grid, params.diffusivity)?;
        let alpha = constants.faraday / SECONDS_PER_HOUR * params.volume_fraction * constants.a_cell
            * params.thickness
            / system.grid.particle_volume;
        Ok(Electrode {
            side,
            params,
            system,
            ocv,
            alpha,
        })
    }

    pub fn len(&self) -> usize {
        self.system.len()
    }

    pub fn is_empty(&self) -> bool {
        self.system.is_empty()
    }

    pub fn grid(&self) -> &RadialGrid {
        &self.system.grid
    }

    pub fn m_from_current(&self, current: f64, constants: &CellConstants) -> f64 {
        m_from_current(current, self.side, &self.params, constants)
    }

    /// `V_s / (V_N ε F A d)`.
    pub fn input_gain(&self, constants: &CellConstants) -> f64 {
        self.system.b[self.len() - 1]
            / (self.params.volume_fraction * constants.faraday * constants.a_cell * self.params.thickness)
    }

    /// Surface concentration after correction, `c_mean - K_N (c_mean - c_N)`.
    pub fn corrected_surface(&self, c: &DVector<f64>) -> f64 {
        let mean = diffusion::mean_concentration(c, self.grid());
        let kn = self.system.coefficients[self.len() - 1];
        mean - kn * (mean - c[self.len() - 1])
    }

    pub fn soc(&self, mean: f64) -> f64 {
        100.0 * (mean - self.params.c_soc0) / (self.params.c_soc100 - self.params.c_soc0)
    }

    pub fn concentration_at_soc(&self, soc: f64) -> f64 {
        self.params.c_soc0 + soc / 100.0 * (self.params.c_soc100 - self.params.c_soc0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputMap {
    #[default]
    Corrected,
    Uncorrected,
}

/// Overpotential terms, V. `total = g(u)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overpotentials {
    pub eta_pos: f64,
    pub eta_neg: f64,
    pub eta_r_pos: f64,
    pub eta_r_neg: f64,
    pub eta_r_sep: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SocPair {
    pub neg: f64,
    pub pos: f64,
}

/// Reduced full-cell state-space model.
#[derive(Debug, Clone)]
pub struct CellModel {
    pub neg: Electrode,
    pub pos: Electrode,
    pub constants: CellConstants,
    /// Lithium quantity, Ah.
    pub q: f64,
    /// `Q / (α_neg V_1^neg)`, mol/m³.
    pub k_bar: f64,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Constant drift.
    pub k: DVector<f64>,
    /// Disturbance column, `E = B`.
    pub e: DVector<f64>,
    pub h_pos_cor: DVector<f64>,
    pub h_neg_cor: DVector<f64>,
    /// Constant offset of the corrected negative stoichiometry.
    pub k1: f64,
    pub h_pos: DVector<f64>,
    pub h_neg: DVector<f64>,
    /// Full concentrations `(c_neg, c_pos) = T x + t0`.
    pub embed: DMatrix<f64>,
    pub embed_offset: DVector<f64>,
}

impl CellModel {
    pub fn from_params(params: &CellParams, scheme: GridScheme, neg_ocv: OcvCurve, pos_ocv: OcvCurve) -> Result<Self> {
        params.validate()?;
        let constants = params.constants();
        let neg = Electrode::new(Side::Neg, params.electrode(Side::Neg), params.n_neg, scheme, neg_ocv, &constants)?;
        let pos = Electrode::new(Side::Pos, params.electrode(Side::Pos), params.n_pos, scheme, pos_ocv, &constants)?;
        assemble_cell(neg, pos, params.q, constants)
    }

    /// Reference parameters with the canned OCV tables.
    pub fn reference_cell() -> Self {
        Self::from_params(
            &CellParams::reference_cell(),
            GridScheme::UniformVolume,
            OcvCurve::canned(Side::Neg),
            OcvCurve::canned(Side::Pos),
        )
        .expect("reference parameters assemble")
    }

    pub fn dim(&self) -> usize {
        self.neg.len() - 1 + self.pos.len()
    }

    /// Index of `c_neg,N` in `x`.
    pub fn neg_surface_index(&self) -> usize {
        self.neg.len() - 2
    }

    /// Index of `c_pos,1` in `x`.
    pub fn pos_offset(&self) -> usize {
        self.neg.len() - 1
    }

    /// Same model with a different lithium quantity.
    pub fn with_lithium(&self, q: f64) -> Result<Self> {
        assemble_cell(self.neg.clone(), self.pos.clone(), q, self.constants)
    }

    /// Centre concentration of the negative particle implied by conservation.
    pub fn recover_center(&self, x: &DVector<f64>) -> f64 {
        (self.embed.row(0) * x)[0] + self.embed_offset[0]
    }

    /// Full concentration vectors `(c_neg, c_pos)`.
    pub fn split(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let nn = self.neg.len();
        let mut neg = DVector::zeros(nn);
        neg[0] = self.recover_center(x);
        neg.rows_mut(1, nn - 1).copy_from(&x.rows(0, nn - 1));
        let pos = x.rows(nn - 1, self.pos.len()).into_owned();
        (neg, pos)
    }

    /// Drops the negative centre shell.
    pub fn reduce(&self, neg: &DVector<f64>, pos: &DVector<f64>) -> DVector<f64> {
        let nn = self.neg.len();
        let mut x = DVector::zeros(self.dim());
        x.rows_mut(0, nn - 1).copy_from(&neg.rows(1, nn - 1));
        x.rows_mut(nn - 1, self.pos.len()).copy_from(pos);
        x
    }

    /// Lithium quantity of a full configuration, Ah.
    pub fn lithium_quantity(&self, neg: &DVector<f64>, pos: &DVector<f64>) -> f64 {
        self.neg.alpha * self.neg.system.gamma.dot(neg) + self.pos.alpha * self.pos.system.gamma.dot(pos)
    }

    /// Lithium quantity of uniform particles at the given concentrations.
    pub fn uniform_lithium(&self, c_neg: f64, c_pos: f64) -> f64 {
        self.neg.alpha * self.neg.grid().particle_volume * c_neg + self.pos.alpha * self.pos.grid().particle_volume * c_pos
    }

    /// Reduced state of uniform particles at the given SOC, per the
    /// calibration concentrations of each electrode.
    pub fn uniform_state_at_soc(&self, soc: f64) -> DVector<f64> {
        let (cn, cp) = (self.neg.concentration_at_soc(soc), self.pos.concentration_at_soc(soc));
        self.reduce(&DVector::from_element(self.neg.len(), cn), &DVector::from_element(self.pos.len(), cp))
    }

    /// `A x + B u + K`.
    pub fn drift(&self, x: &DVector<f64>, u: f64) -> DVector<f64> {
        &self.a * x + &self.b * u + &self.k
    }

    pub fn overpotentials(&self, u: f64) -> Overpotentials {
        overpotentials(u, &self.neg.params, &self.pos.params, &self.constants)
    }

    /// `(ζ_neg, ζ_pos)` fed to the OCV curves.
    pub fn stoichiometry(&self, x: &DVector<f64>, map: OutputMap) -> (f64, f64) {
        match map {
            OutputMap::Corrected => (self.h_neg_cor.dot(x) + self.k1, self.h_pos_cor.dot(x)),
            OutputMap::Uncorrected => (self.h_neg.dot(x), self.h_pos.dot(x)),
        }
    }

    /// `h(x)`: OCV difference without the current-dependent part.
    pub fn ocv_difference(&self, x: &DVector<f64>, map: OutputMap) -> f64 {
        let (zn, zp) = self.stoichiometry(x, map);
        self.pos.ocv.eval(zp) - self.neg.ocv.eval(zn)
    }

    pub fn output_voltage(&self, x: &DVector<f64>, u: f64, map: OutputMap) -> f64 {
        self.ocv_difference(x, map) + self.overpotentials(u).total
    }

    pub fn soc(&self, x: &DVector<f64>) -> SocPair {
        let (neg, pos) = self.split(x);
        SocPair {
            neg: self.neg.soc(diffusion::mean_concentration(&neg, self.neg.grid())),
            pos: self.pos.soc(diffusion::mean_concentration(&pos, self.pos.grid())),
        }
    }

    /// Corrected concentrations of both particles.
    pub fn corrected_concentrations(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let (neg, pos) = self.split(x);
        (
            diffusion::correct_concentrations(&neg, &self.neg.system.coefficients, self.neg.grid()),
            diffusion::correct_concentrations(&pos, &self.pos.system.coefficients, self.pos.grid()),
        )
    }
}

/// `g(u) = -η_r,pos - η_pos - η_neg - η_r,neg - η_r,sep`.
pub fn overpotentials(u: f64, neg: &ElectrodeParams, pos: &ElectrodeParams, c: &CellConstants) -> Overpotentials {
    let rtf = c.gas_constant * c.temperature / c.faraday;
    let kinetic = |e: &ElectrodeParams| {
        2.0 * rtf * (e.radius * u / (6.0 * e.exchange_current * e.volume_fraction * c.a_cell * e.thickness)).asinh()
    };
    let ohmic = |e: &ElectrodeParams| {
        let kappa = c.kappa_e * e.electrolyte_fraction.powf(1.5);
        let sigma_eff = e.conductivity * e.volume_fraction;
        (e.thickness / sigma_eff + e.thickness / kappa) * u / (2.0 * c.a_cell)
    };
    let kappa_sep = c.kappa_e * c.eps_e_sep.powf(1.5);
    let eta_pos = kinetic(pos);
    let eta_neg = kinetic(neg);
    let eta_r_pos = ohmic(pos);
    let eta_r_neg = ohmic(neg);
    let eta_r_sep = c.d_sep / kappa_sep * u / c.a_cell;
    Overpotentials {
        eta_pos,
        eta_neg,
        eta_r_pos,
        eta_r_neg,
        eta_r_sep,
        total: -eta_r_pos - eta_pos - eta_neg - eta_r_neg - eta_r_sep,
    }
}

/// Builds the reduced model from two particles and the lithium quantity `q` (Ah).
///
/// `A`, `B` and `K` come from substituting the conservation law into the
/// unreduced pair of particle systems, which is exact for any grid.
pub fn assemble_cell(neg: Electrode, pos: Electrode, q: f64, constants: CellConstants) -> Result<CellModel> {
    let (nn, np) = (neg.len(), pos.len());
    if nn < 2 || np < 1 {
        return Err(Error::Assembly(format!("need N_neg >= 2 and N_pos >= 1, got {nn} and {np}")));
    }
    if !(q > 0.0 && q.is_finite()) {
        return Err(Error::Assembly(format!("lithium quantity must be positive, got {q}")));
    }
    let n = nn - 1 + np;
    let full = nn + np;
    let vn = &neg.grid().volumes;
    let vp = &pos.grid().volumes;
    let v1 = vn[0];
    let ratio = pos.alpha / neg.alpha;
    let k_bar = q / (neg.alpha * v1);

    let mut embed = DMatrix::zeros(full, n);
    let mut embed_offset = DVector::zeros(full);
    embed_offset[0] = k_bar;
    for i in 1..nn {
        embed[(0, i - 1)] = -vn[i] / v1;
        embed[(i, i - 1)] = 1.0;
    }
    for i in 0..np {
        embed[(0, nn - 1 + i)] = -ratio * vp[i] / v1;
        embed[(nn + i, nn - 1 + i)] = 1.0;
    }

    let mut a_full = DMatrix::zeros(full, full);
    a_full.view_mut((0, 0), (nn, nn)).copy_from(&neg.system.a);
    a_full.view_mut((nn, nn), (np, np)).copy_from(&pos.system.a);
    let a = (&a_full * &embed).rows(1, n).into_owned();
    let k = (&a_full * &embed_offset).rows(1, n).into_owned();

    let mut b = DVector::zeros(n);
    b[nn - 2] = -neg.input_gain(&constants);
    b[n - 1] = pos.input_gain(&constants);

    let vneg = neg.grid().particle_volume;
    let vpos = pos.grid().particle_volume;
    let kn_neg = neg.system.coefficients[nn - 1];
    let kn_pos = pos.system.coefficients[np - 1];
    let cmax_neg = neg.params.c_max;
    let cmax_pos = pos.params.c_max;

    let mut h_pos_cor = DVector::zeros(n);
    for i in 0..np {
        h_pos_cor[nn - 1 + i] = vp[i] / (vpos * cmax_pos) * (1.0 - kn_pos);
    }
    h_pos_cor[n - 1] += kn_pos / cmax_pos;

    let mut h_neg_cor = DVector::zeros(n);
    h_neg_cor[nn - 2] = kn_neg / cmax_neg;
    for i in 0..np {
        h_neg_cor[nn - 1 + i] = -vp[i] / (vneg * cmax_neg) * (1.0 - kn_neg) * ratio;
    }
    let k1 = vn[0] / (vneg * cmax_neg) * (1.0 - kn_neg) * k_bar;

    let mut h_pos = DVector::zeros(n);
    h_pos[n - 1] = 1.0 / cmax_pos;
    let mut h_neg = DVector::zeros(n);
    h_neg[nn - 2] = 1.0 / cmax_neg;

    let e = b.clone();
    Ok(CellModel {
        neg,
        pos,
        constants,
        q,
        k_bar,
        a,
        b,
        k,
        e,
        h_pos_cor,
        h_neg_cor,
        k1,
        h_pos,
        h_neg,
        embed,
        embed_offset,
    })
}

/// Percent SOC of a mean concentration, `100 (c - c_0) / (c_100 - c_0)`.
pub fn soc_percent(mean: f64, c0: f64, c100: f64) -> f64 {
    100.0 * (mean - c0) / (c100 - c0)
}
