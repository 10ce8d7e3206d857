//! Command-line front end.
//!
//! All commands read an optional TOML config, compute, and only then write
//! their outputs. Relative paths inside the config resolve against the
//! config file's directory. Every output carries a provenance header.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cell::{CellModel, CellParams, OcvCurve, Side};
use crate::diffusion::GridScheme;
use crate::error::{Error, Result};
use crate::observer::{self, DesignOptions, DesignRecord, ObserverScheme};
use crate::reference::{self, ReferenceOptions, ReferenceSolver};
use crate::sim::{self, CampaignConfig, CurrentProfile, NoiseSpec, PlantKind, SocScale};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "battkit", version, about = "Corrected single-particle models, observers and SOC campaigns")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone, Default)]
pub struct CommonArgs {
    /// TOML tool configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed of the synthetic current profile.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Uncorrected and corrected models against the diffusion oracle.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Design and certify an observer gain.
    Design {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the estimation campaign with a certified design.
    Estimate {
        #[command(flatten)]
        common: CommonArgs,
        /// Run a single gain scale instead of the configured list.
        #[arg(long)]
        gain_scale: Option<f64>,
        /// Plant used as truth: `model` or `pde`.
        #[arg(long)]
        oracle: Option<PlantKind>,
    },
    /// Validate measured current/voltage CSV files and count coulombs.
    Ingest {
        #[command(flatten)]
        common: CommonArgs,
        /// Files with header `time_s,current_A[,voltage_V]`.
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Multiplicative correction applied to the measured current.
        #[arg(long, default_value_t = 1.0)]
        current_gain: f64,
        /// Initial SOC, percent.
        #[arg(long, default_value_t = 100.0)]
        soc0: f64,
        /// Report the uncalibrated fraction instead of percent.
        #[arg(long)]
        raw_fraction: bool,
    },
    /// Re-verify a design file and write it with oracle concentration profiles.
    Export {
        #[command(flatten)]
        common: CommonArgs,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    /// Overrides `N_neg` of the parameter file.
    pub n_neg: Option<usize>,
    pub n_pos: Option<usize>,
    pub scheme: GridScheme,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            n_neg: None,
            n_pos: None,
            scheme: GridScheme::UniformVolume,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    pub n_ref: usize,
    /// Upper bound on the oracle step, s; `τ/2000` when absent.
    pub dt: Option<f64>,
    pub richardson: bool,
    /// Oracle steps between exported profiles.
    pub snapshot_every: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            n_ref: 400,
            dt: None,
            richardson: true,
            snapshot_every: 1000,
        }
    }
}

impl OracleConfig {
    fn options(&self) -> ReferenceOptions {
        ReferenceOptions {
            n_ref: self.n_ref,
            dt: self.dt,
            richardson: self.richardson,
            snapshot_every: 0,
            probes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    pub kind: sim::ProfileKind,
    pub horizon: f64,
    /// Sample period, s.
    pub dt: f64,
    /// End of the active-current window, s.
    pub t_active: f64,
    pub scale: f64,
    /// Current of the constant profile, A.
    pub current: f64,
    /// CSV source for `kind = "csv"`.
    pub path: Option<PathBuf>,
    pub current_gain: f64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig {
            kind: sim::ProfileKind::SyntheticPhev,
            horizon: 4500.0,
            dt: 0.1,
            t_active: 3600.0,
            scale: 1.0,
            current: 0.0,
            path: None,
            current_gain: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignSpec {
    pub soc_estimates: Vec<f64>,
    pub gain_scales: Vec<f64>,
    pub true_soc0: f64,
    pub plant: PlantKind,
    pub scheme: ObserverScheme,
    /// Samples between rows of the trace file.
    pub trace_stride: usize,
}

impl Default for CampaignSpec {
    fn default() -> Self {
        let d = CampaignConfig::default();
        CampaignSpec {
            soc_estimates: d.soc_estimates,
            gain_scales: d.gain_scales,
            true_soc0: d.true_soc0,
            plant: d.plant,
            scheme: d.scheme,
            trace_stride: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DesignConfig {
    /// Design file, relative to the output directory.
    pub file: PathBuf,
    pub gain_bound: f64,
    pub p_floor: f64,
    /// Replace the OCV slope bounds used for the vertices.
    pub neg_slope_bounds: Option<[f64; 2]>,
    pub pos_slope_bounds: Option<[f64; 2]>,
}

impl Default for DesignConfig {
    fn default() -> Self {
        let d = DesignOptions::default();
        DesignConfig {
            file: PathBuf::from("design.json"),
            gain_bound: d.gain_bound,
            p_floor: d.p_floor,
            neg_slope_bounds: None,
            pos_slope_bounds: None,
        }
    }
}

/// Tool configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolConfig {
    /// Flat parameter file; bundled reference values when absent.
    pub params: Option<PathBuf>,
    /// OCV tables with header `zeta,voltage_V`; canned tables when absent.
    pub ocv_pos: Option<PathBuf>,
    pub ocv_neg: Option<PathBuf>,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub grid: GridConfig,
    pub oracle: OracleConfig,
    pub profile: ProfileConfig,
    pub noise: NoiseSpec,
    pub campaign: CampaignSpec,
    pub design: DesignConfig,
}

impl Default for ToolConfig {
    fn default() -> Self {
        ToolConfig {
            params: None,
            ocv_pos: None,
            ocv_neg: None,
            seed: 7,
            out_dir: PathBuf::from("battkit-out"),
            grid: GridConfig::default(),
            oracle: OracleConfig::default(),
            profile: ProfileConfig::default(),
            noise: NoiseSpec::default(),
            campaign: CampaignSpec::default(),
            design: DesignConfig::default(),
        }
    }
}

/// Loaded configuration with its provenance.
#[derive(Debug, Clone)]
pub struct Loaded {
    pub config: ToolConfig,
    /// SHA-256 of the config bytes, or of the empty string for defaults.
    pub config_hash: String,
    pub base_dir: PathBuf,
}

impl ToolConfig {
    pub fn parse(text: &str, label: &str) -> Result<Self> {
        let cfg: ToolConfig = toml::from_str(text).map_err(|e| Error::Format {
            path: label.to_string(),
            line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.profile;
        if !(p.dt > 0.0 && p.horizon > 0.0 && p.t_active > 0.0 && p.t_active <= p.horizon) {
            return Err(Error::Config("profile needs dt > 0 and 0 < t_active <= horizon".into()));
        }
        if !(p.current_gain > 0.0) || !(p.scale >= 0.0) {
            return Err(Error::Config("profile gain must be positive and scale nonnegative".into()));
        }
        if p.kind == sim::ProfileKind::Csv && p.path.is_none() {
            return Err(Error::Config("csv profile needs `path`".into()));
        }
        if self.grid.n_neg.is_some_and(|n| n < 2) || self.grid.n_pos.is_some_and(|n| n < 2) {
            return Err(Error::Config("grid sizes must be at least 2".into()));
        }
        if self.campaign.soc_estimates.is_empty() || self.campaign.gain_scales.is_empty() {
            return Err(Error::Config("campaign needs SOC estimates and gain scales".into()));
        }
        if self.campaign.trace_stride == 0 {
            return Err(Error::Config("trace_stride must be positive".into()));
        }
        self.noise.validate()
    }
}

pub fn load_config(path: Option<&Path>) -> Result<Loaded> {
    match path {
        None => Ok(Loaded {
            config: ToolConfig::default(),
            config_hash: sha256_hex(b""),
            base_dir: PathBuf::from("."),
        }),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let config = ToolConfig::parse(&text, &p.display().to_string())?;
            Ok(Loaded {
                config,
                config_hash: sha256_hex(text.as_bytes()),
                base_dir: p.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")),
            })
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    observer::hex(&Sha256::digest(bytes))
}

/// Provenance carried by every output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub seed: u64,
}

impl Provenance {
    pub fn csv_header(&self) -> String {
        format!(
            "# {} {} config_sha256={} seed={}\n",
            self.tool, self.version, self.config_sha256, self.seed
        )
    }
}

#[derive(Serialize)]
struct Document<'a, T: Serialize> {
    provenance: &'a Provenance,
    data: &'a T,
}

/// Resolved run context.
pub struct Context {
    pub config: ToolConfig,
    pub base_dir: PathBuf,
    pub out_dir: PathBuf,
    pub provenance: Provenance,
}

impl Context {
    pub fn new(common: &CommonArgs) -> Result<Self> {
        let loaded = load_config(common.config.as_deref())?;
        let mut config = loaded.config;
        if let Some(seed) = common.seed {
            config.seed = seed;
        }
        let out_dir = match &common.out {
            Some(o) => o.clone(),
            None => loaded.base_dir.join(&config.out_dir),
        };
        let provenance = Provenance {
            tool: "battkit".into(),
            version: VERSION.into(),
            config_sha256: loaded.config_hash,
            seed: config.seed,
        };
        Ok(Context {
            config,
            base_dir: loaded.base_dir,
            out_dir,
            provenance,
        })
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn model(&self) -> Result<CellModel> {
        let mut params = match &self.config.params {
            Some(p) => CellParams::load(&self.resolve(p))?,
            None => CellParams::reference_cell(),
        };
        if let Some(n) = self.config.grid.n_neg {
            params.n_neg = n;
        }
        if let Some(n) = self.config.grid.n_pos {
            params.n_pos = n;
        }
        let ocv = |p: &Option<PathBuf>, side: Side| -> Result<OcvCurve> {
            match p {
                Some(p) => OcvCurve::from_csv(&self.resolve(p)),
                None => Ok(OcvCurve::canned(side)),
            }
        };
        let neg = ocv(&self.config.ocv_neg, Side::Neg)?;
        let pos = ocv(&self.config.ocv_pos, Side::Pos)?;
        CellModel::from_params(&params, self.config.grid.scheme, neg, pos)
    }

    pub fn profile(&self) -> Result<CurrentProfile> {
        let p = &self.config.profile;
        Ok(match p.kind {
            sim::ProfileKind::Constant => CurrentProfile::constant(p.current, p.horizon),
            sim::ProfileKind::SyntheticPhev => sim::synthetic_phev(self.config.seed, p.horizon, p.scale),
            sim::ProfileKind::Csv => {
                let path = self.resolve(p.path.as_deref().expect("validated"));
                let mut prof = sim::read_measurements_file(&path, p.current_gain)?.profile;
                prof.horizon = p.horizon;
                prof
            }
        })
    }

    fn design_path(&self) -> PathBuf {
        self.out_dir.join(&self.config.design.file)
    }

    fn write(&self, outputs: Vec<(PathBuf, String)>) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(&self.out_dir).map_err(|e| Error::io(&self.out_dir, e))?;
        let mut written = Vec::new();
        for (name, body) in outputs {
            let path = self.out_dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
        Ok(written)
    }

    fn json<T: Serialize>(&self, data: &T) -> String {
        let doc = Document {
            provenance: &self.provenance,
            data,
        };
        serde_json::to_string_pretty(&doc).expect("output serializes") + "\n"
    }
}

fn parse_document<T: for<'de> Deserialize<'de>>(text: &str, path: &Path) -> Result<(Provenance, T)> {
    #[derive(Deserialize)]
    struct Doc<T> {
        provenance: Provenance,
        data: T,
    }
    let doc: Doc<T> = serde_json::from_str(text).map_err(|e| Error::Format {
        path: path.display().to_string(),
        line: e.line(),
        message: e.to_string(),
    })?;
    Ok((doc.provenance, doc.data))
}

fn fmt_row(values: &[f64]) -> String {
    let mut s = String::new();
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{v}").expect("write to string");
    }
    s.push('\n');
    s
}

/// Model comparison: traces CSV and windowed metrics JSON.
pub fn cmd_simulate(ctx: &Context) -> Result<Vec<PathBuf>> {
    let model = ctx.model()?;
    let profile = ctx.profile()?;
    let p = &ctx.config.profile;
    let cmp = sim::compare_models(&model, &profile, p.dt, ctx.config.campaign.true_soc0, p.t_active, &ctx.config.oracle.options())?;
    let mut csv = ctx.provenance.csv_header();
    csv.push_str("time_s,current_A,v_oracle_V,v_uncorrected_V,v_corrected_V,c_neg_surf_oracle,c_neg_surf_uncorrected,c_neg_surf_corrected,c_pos_surf_oracle,c_pos_surf_uncorrected,c_pos_surf_corrected\n");
    for k in 0..cmp.times.len() {
        csv.push_str(&fmt_row(&[
            cmp.times[k],
            cmp.current[k],
            cmp.voltage_oracle[k],
            cmp.voltage_uncorrected[k],
            cmp.voltage_corrected[k],
            cmp.surface_oracle[0][k],
            cmp.surface_uncorrected[0][k],
            cmp.surface_corrected[0][k],
            cmp.surface_oracle[1][k],
            cmp.surface_uncorrected[1][k],
            cmp.surface_corrected[1][k],
        ]));
    }
    let mut improvements: BTreeMap<String, BTreeMap<String, [Option<f64>; 2]>> = BTreeMap::new();
    for q in ["e_v", "e_c_neg_surf", "e_c_pos_surf"] {
        for (label, _) in &cmp.windows {
            let v = cmp.improvement(q, label).map_or([None, None], |(a, b)| [Some(a), Some(b)]);
            improvements.entry(q.to_string()).or_default().insert(label.clone(), v);
        }
    }
    #[derive(Serialize)]
    struct Out<'a> {
        windows: Vec<&'a str>,
        metrics: &'a BTreeMap<String, BTreeMap<String, sim::Metrics>>,
        /// quantity → window → `[MAE, RMSE]` improvement, percent.
        improvement_pct: BTreeMap<String, BTreeMap<String, [Option<f64>; 2]>>,
        lithium_drift: f64,
    }
    let out = Out {
        windows: cmp.windows.iter().map(|w| w.0.as_str()).collect(),
        metrics: &cmp.metrics,
        improvement_pct: improvements,
        lithium_drift: cmp.lithium_drift,
    };
    ctx.write(vec![
        (PathBuf::from("simulate_traces.csv"), csv),
        (PathBuf::from("simulate_metrics.json"), ctx.json(&out)),
    ])
}

/// Designs, certifies and writes the observer gain.
pub fn cmd_design(ctx: &Context) -> Result<Vec<PathBuf>> {
    let model = ctx.model()?;
    let d = &ctx.config.design;
    let neg = d.neg_slope_bounds.map_or(model.neg.ocv.slope_bounds(), |b| (b[0], b[1]));
    let pos = d.pos_slope_bounds.map_or(model.pos.ocv.slope_bounds(), |b| (b[0], b[1]));
    let vertices = observer::build_vertices_with_bounds(&model, neg, pos);
    let opts = DesignOptions {
        gain_bound: d.gain_bound,
        p_floor: d.p_floor,
        ..DesignOptions::for_model(&model)
    };
    let design = observer::design_gain(&model.a, &model.e, &vertices.c, &opts)?;
    let record = DesignRecord::from_design(&design, &vertices);
    ctx.write(vec![(d.file.clone(), ctx.json(&record))])
}

pub fn read_design(path: &Path) -> Result<DesignRecord> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_document::<DesignRecord>(&text, path)?.1)
}

/// Campaign metrics JSON and decimated per-run SOC traces.
pub fn cmd_estimate(ctx: &Context, gain_scale: Option<f64>, oracle: Option<PlantKind>) -> Result<Vec<PathBuf>> {
    let model = ctx.model()?;
    let design = read_design(&ctx.design_path())?.restore(&model)?;
    let profile = ctx.profile()?;
    let c = &ctx.config.campaign;
    let cfg = CampaignConfig {
        soc_estimates: c.soc_estimates.clone(),
        gain_scales: gain_scale.map_or_else(|| c.gain_scales.clone(), |g| vec![g]),
        true_soc0: c.true_soc0,
        dt: ctx.config.profile.dt,
        noise: ctx.config.noise,
        plant: oracle.unwrap_or(c.plant),
        reference: ctx.config.oracle.options(),
        scheme: c.scheme,
        threads: None,
    };
    let (report, traces) = sim::run_campaign_with_traces(&model, &design.l, &profile, &cfg, c.trace_stride)?;
    let mut csv = ctx.provenance.csv_header();
    csv.push_str("gain_scale,soc0_estimate,time_s,soc_true,soc_uncorrected,soc_corrected,soc_corrected_ccor\n");
    for t in &traces {
        for k in 0..t.times.len() {
            csv.push_str(&fmt_row(&[
                t.gain_scale,
                t.soc_estimate,
                t.times[k],
                t.soc_true[k],
                t.soc_hat[0][k],
                t.soc_hat[1][k],
                t.soc_hat[2][k],
            ]));
        }
    }
    ctx.write(vec![
        (PathBuf::from("estimate_metrics.json"), ctx.json(&report)),
        (PathBuf::from("estimate_traces.csv"), csv),
    ])
}

/// Validates measurement files and writes corrected currents with coulomb SOC.
pub fn cmd_ingest(ctx: &Context, files: &[PathBuf], current_gain: f64, soc0: f64, raw_fraction: bool) -> Result<Vec<PathBuf>> {
    let params = match &ctx.config.params {
        Some(p) => CellParams::load(&ctx.resolve(p))?,
        None => CellParams::reference_cell(),
    };
    let scale = if raw_fraction { SocScale::RawFraction } else { SocScale::Percent };
    #[derive(Serialize)]
    struct Summary {
        rows: usize,
        duration_s: f64,
        charge_ah: f64,
        current_gain: f64,
        has_voltage: bool,
        soc_final: f64,
    }
    let mut summaries = BTreeMap::new();
    let mut outputs = Vec::new();
    for (i, f) in files.iter().enumerate() {
        let bundle = sim::read_measurements_file(f, current_gain)?;
        let prof = &bundle.profile;
        let soc = sim::coulomb_soc(&prof.times, &prof.currents, params.q_cell, soc0, scale)?;
        let mut csv = ctx.provenance.csv_header();
        csv.push_str(if bundle.voltage.is_some() { "time_s,current_A,voltage_V,soc\n" } else { "time_s,current_A,soc\n" });
        for k in 0..prof.times.len() {
            let mut row = vec![prof.times[k], prof.currents[k]];
            if let Some(v) = &bundle.voltage {
                row.push(v[k]);
            }
            row.push(soc[k]);
            csv.push_str(&fmt_row(&row));
        }
        let stem = f.file_stem().map_or_else(|| format!("input{i}"), |s| s.to_string_lossy().into_owned());
        let last = *prof.times.last().expect("validated non-empty");
        summaries.insert(
            format!("{i}:{stem}"),
            Summary {
                rows: prof.times.len(),
                duration_s: last,
                charge_ah: prof.charge(last) / 3600.0,
                current_gain: bundle.current_gain,
                has_voltage: bundle.voltage.is_some(),
                soc_final: *soc.last().expect("non-empty"),
            },
        );
        outputs.push((PathBuf::from(format!("ingested_{i}_{stem}.csv")), csv));
    }
    outputs.push((PathBuf::from("ingest_summary.json"), ctx.json(&summaries)));
    ctx.write(outputs)
}

/// Re-verified design plus oracle concentration profiles on the configured profile.
pub fn cmd_export(ctx: &Context) -> Result<Vec<PathBuf>> {
    let model = ctx.model()?;
    let record = read_design(&ctx.design_path())?;
    let design = record.restore(&model)?;
    let verified = DesignRecord {
        certificate: design.certificate.clone(),
        ..record
    };
    let profile = ctx.profile()?;
    let p = &ctx.config.profile;
    let soc0 = ctx.config.campaign.true_soc0;
    let mut outputs = vec![(PathBuf::from("design_verified.json"), ctx.json(&verified))];
    for e in [&model.neg, &model.pos] {
        let opts = ReferenceOptions {
            snapshot_every: ctx.config.oracle.snapshot_every,
            dt: Some(ctx.config.oracle.dt.unwrap_or(e.params.tau() / 2000.0).min(p.dt)),
            ..ctx.config.oracle.options()
        };
        let constants = model.constants;
        let sol = ReferenceSolver::new(opts).solve(
            &e.params,
            |t| e.m_from_current(profile.at(t), &constants),
            e.concentration_at_soc(soc0),
            p.horizon,
        )?;
        let mut buf = Vec::new();
        reference::write_snapshots_csv(&sol, &mut buf)?;
        let body = ctx.provenance.csv_header() + &String::from_utf8(buf).expect("csv is utf-8");
        outputs.push((PathBuf::from(format!("reference_{}.csv", e.side.name())), body));
    }
    ctx.write(outputs)
}

/// Runs a parsed command; returns the files written.
pub fn run(cli: Cli) -> Result<Vec<PathBuf>> {
    match cli.command {
        Command::Simulate { common } => cmd_simulate(&Context::new(&common)?),
        Command::Design { common } => cmd_design(&Context::new(&common)?),
        Command::Estimate {
            common,
            gain_scale,
            oracle,
        } => cmd_estimate(&Context::new(&common)?, gain_scale, oracle),
        Command::Ingest {
            common,
            files,
            current_gain,
            soc0,
            raw_fraction,
        } => cmd_ingest(&Context::new(&common)?, &files, current_gain, soc0, raw_fraction),
        Command::Export { common } => cmd_export(&Context::new(&common)?),
    }
}
