//! Run configuration (TOML), the `evgrid` commands and their result files.
//!
//! Every command writes long-format CSV files with a header row plus a
//! `summary.json` into the output directory. On failure an `errors.json`
//! describes what went wrong and the process exit code tells its class.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::experiments::{
    self, benchmark_methods, generate_profiles, needs_at_toll, profile_illustration,
    read_profile_csv, rebin, reference_profile, schedule_with, toll_grid, toll_sweep,
    BenchmarkOptions, ExperimentError, FailureKind, Profile, StageFailure, SweepOptions,
    PROFILE_SLOTS,
};
use crate::grid::{
    build_paper_grid, total_losses_mw, BusKind, BusSpec, GridModel, LineSpec, PowerFlowModel,
    TransformerBranch, TransformerSpec, DEFAULT_PF_MAX_ITERATIONS, DEFAULT_PF_TOLERANCE,
};
use crate::scheduling::grid_aware::GridAwareOptions;
use crate::scheduling::{LoadSchedule, Method, SlotWeights, DEFAULT_HORIZON_HOURS};
use crate::std_types;
use crate::traffic::{
    charging_needs, solve_wardrop_with, ClassKind, PathSpec, TrafficError, TransportScenario,
    VehicleClassSpec, WardropOptions,
};

pub const SCHEMA_VERSION: u32 = 1;

// ------------------------------------------------------------------ errors

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Experiment(#[from] ExperimentError),
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot encode {path}: {message}")]
    Encode { path: PathBuf, message: String },
    #[error("{0}")]
    NonConvergence(String),
}

impl CliError {
    pub fn kind(&self) -> FailureKind {
        match self {
            CliError::Config(ConfigError::Io { .. }) => FailureKind::Io,
            CliError::Config(_) => FailureKind::Validation,
            CliError::Experiment(e) => e.kind(),
            CliError::Write { .. } | CliError::Encode { .. } => FailureKind::Io,
            CliError::NonConvergence(_) => FailureKind::NonConvergence,
        }
    }
}

impl From<TrafficError> for CliError {
    fn from(e: TrafficError) -> Self {
        CliError::Experiment(e.into())
    }
}

impl From<crate::grid::GridError> for CliError {
    fn from(e: crate::grid::GridError) -> Self {
        CliError::Experiment(e.into())
    }
}

impl From<crate::scheduling::ScheduleError> for CliError {
    fn from(e: crate::scheduling::ScheduleError) -> Self {
        CliError::Experiment(e.into())
    }
}

/// Process exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExitStatus {
    Success,
    Validation,
    NonConvergence,
    Io,
}

impl ExitStatus {
    pub fn code(self) -> u8 {
        match self {
            ExitStatus::Success => 0,
            ExitStatus::Validation => 1,
            ExitStatus::NonConvergence => 2,
            ExitStatus::Io => 3,
        }
    }
}

impl From<FailureKind> for ExitStatus {
    fn from(k: FailureKind) -> Self {
        match k {
            FailureKind::Validation => ExitStatus::Validation,
            FailureKind::NonConvergence => ExitStatus::NonConvergence,
            FailureKind::Io => ExitStatus::Io,
        }
    }
}

// ------------------------------------------------------------------ config

/// Everything a run needs. Missing keys take the reference-scenario values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Method used by `schedule` and `powerflow`.
    pub method: Method,
    pub transport: TransportConfig,
    pub grid: GridConfig,
    pub schedule: ScheduleConfig,
    pub powerflow: PowerFlowConfig,
    pub sweep: SweepConfig,
    pub benchmark: BenchmarkConfig,
    pub illustrate: IllustrateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            seed: 1,
            out_dir: PathBuf::from("evgrid-out"),
            method: Method::GridAware,
            transport: TransportConfig::default(),
            grid: GridConfig::default(),
            schedule: ScheduleConfig::default(),
            powerflow: PowerFlowConfig::default(),
            sweep: SweepConfig::default(),
            benchmark: BenchmarkConfig::default(),
            illustrate: IllustrateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransportConfig {
    pub total_vehicles: f64,
    /// EUR per hour.
    pub time_value: f64,
    pub classes: Vec<ClassConfig>,
    pub paths: Vec<PathConfig>,
    /// Sparse toll settings; anything not listed is toll-free.
    pub tolls: Vec<TollConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassConfig {
    pub kind: ClassKind,
    pub population_share: f64,
    pub consumption_per_km: f64,
    pub energy_unit_price: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathConfig {
    pub length_km: f64,
    pub speed_limit_kmh: f64,
    pub capacity_vehicles: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TollConfig {
    /// 1-based path number.
    pub path: usize,
    /// Omitted: the toll applies to every class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<ClassKind>,
    pub euros: f64,
}

impl Default for TransportConfig {
    fn default() -> Self {
        let s = TransportScenario::<f64>::reference();
        TransportConfig {
            total_vehicles: s.total_vehicles,
            time_value: s.time_value,
            classes: s
                .classes
                .iter()
                .map(|c| ClassConfig {
                    kind: c.kind,
                    population_share: c.population_share,
                    consumption_per_km: c.consumption_per_km,
                    energy_unit_price: c.energy_unit_price,
                })
                .collect(),
            paths: s
                .paths
                .iter()
                .map(|p| PathConfig {
                    length_km: p.length_km,
                    speed_limit_kmh: p.speed_limit_kmh,
                    capacity_vehicles: p.capacity_vehicles,
                })
                .collect(),
            tolls: Vec::new(),
        }
    }
}

impl TransportConfig {
    pub fn scenario(&self) -> Result<TransportScenario<f64>, ConfigError> {
        let mut scenario = TransportScenario {
            total_vehicles: self.total_vehicles,
            time_value: self.time_value,
            classes: self
                .classes
                .iter()
                .map(|c| VehicleClassSpec {
                    kind: c.kind,
                    population_share: c.population_share,
                    consumption_per_km: c.consumption_per_km,
                    energy_unit_price: c.energy_unit_price,
                })
                .collect(),
            paths: self
                .paths
                .iter()
                .map(|p| PathSpec::new(p.length_km, p.speed_limit_kmh, p.capacity_vehicles))
                .collect(),
        };
        for (k, toll) in self.tolls.iter().enumerate() {
            let bad = |what: &str| ConfigError::Invalid(format!("transport.tolls[{k}].{what}"));
            if toll.path == 0 || toll.path > scenario.paths.len() {
                return Err(bad(&format!(
                    "path must be in 1..={}, got {}",
                    scenario.paths.len(),
                    toll.path
                )));
            }
            if !(toll.euros >= 0.0) || !toll.euros.is_finite() {
                return Err(bad("euros (t_s,i) must be >= 0"));
            }
            let kinds: Vec<ClassKind> = match toll.class {
                Some(kind) => {
                    if scenario.class_index(kind).is_none() {
                        return Err(bad(&format!("class {kind} is not in transport.classes")));
                    }
                    vec![kind]
                }
                None => scenario.classes.iter().map(|c| c.kind).collect(),
            };
            for kind in kinds {
                scenario.paths[toll.path - 1].tolls.insert(kind, toll.euros);
            }
        }
        scenario.validate().map_err(|e| match e {
            TrafficError::InvalidScenario(m) => ConfigError::Invalid(format!("transport.{m}")),
            other => ConfigError::Invalid(format!("transport: {other}")),
        })?;
        Ok(scenario)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridPreset {
    /// Five-bus feeder with three charging stations.
    #[default]
    PaperGrid,
    /// Described by `buses`, `lines` and `transformer`.
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridConfig {
    pub preset: GridPreset,
    pub slack_voltage_pu: f64,
    pub frequency_hz: f64,
    /// Defaults to the transformer rating, or 10 MVA without a transformer.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub power_base_mva: Option<f64>,
    pub buses: Vec<BusConfig>,
    pub lines: Vec<LineConfig>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transformer: Option<TransformerConfig>,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            preset: GridPreset::PaperGrid,
            slack_voltage_pu: 1.0,
            frequency_hz: 50.0,
            power_base_mva: None,
            buses: Vec::new(),
            lines: Vec::new(),
            transformer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusConfig {
    pub id: String,
    pub nominal_kv: f64,
    #[serde(default)]
    pub slack: bool,
    /// 1-based charging station number attached to this bus.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evcs: Option<usize>,
}

/// A line either names a bundled standard type or gives its parameters;
/// explicit parameters override the standard type.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineConfig {
    pub from: String,
    pub to: String,
    pub length_km: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_ohm_per_km: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x_ohm_per_km: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_nf_per_km: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_i_ka: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub hv: String,
    pub lv: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sn_mva: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vn_hv_kv: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vn_lv_kv: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vk_percent: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vkr_percent: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pfe_kw: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i0_percent: Option<f64>,
}

fn pick(explicit: Option<f64>, from_type: Option<f64>, what: &str) -> Result<f64, ConfigError> {
    explicit
        .or(from_type)
        .ok_or_else(|| ConfigError::Invalid(format!("{what} is required without std_type")))
}

impl GridConfig {
    pub fn model(&self) -> Result<GridModel<f64>, ConfigError> {
        let mut grid = match self.preset {
            GridPreset::PaperGrid => {
                if !self.buses.is_empty() || !self.lines.is_empty() || self.transformer.is_some() {
                    return Err(ConfigError::Invalid(
                        "grid.buses/lines/transformer need preset = \"custom\"".into(),
                    ));
                }
                build_paper_grid::<f64>()
            }
            GridPreset::Custom => self.custom()?,
        };
        grid.slack_voltage_pu = self.slack_voltage_pu;
        grid.frequency_hz = self.frequency_hz;
        if let Some(base) = self.power_base_mva {
            grid.power_base_mva = base;
        }
        if !(grid.slack_voltage_pu > 0.0 && grid.slack_voltage_pu.is_finite()) {
            return Err(ConfigError::Invalid(
                "grid.slack_voltage_pu must be > 0".into(),
            ));
        }
        if !(grid.frequency_hz > 0.0 && grid.frequency_hz.is_finite()) {
            return Err(ConfigError::Invalid("grid.frequency_hz must be > 0".into()));
        }
        if !(grid.power_base_mva > 0.0 && grid.power_base_mva.is_finite()) {
            return Err(ConfigError::Invalid(
                "grid.power_base_mva must be > 0".into(),
            ));
        }
        grid.validate()
            .map_err(|e| ConfigError::Invalid(format!("grid: {e}")))?;
        Ok(grid)
    }

    fn custom(&self) -> Result<GridModel<f64>, ConfigError> {
        let bus_index = |id: &str, what: &str| {
            self.buses
                .iter()
                .position(|b| b.id == id)
                .ok_or_else(|| ConfigError::Invalid(format!("{what}: unknown bus \"{id}\"")))
        };
        let mut buses = Vec::with_capacity(self.buses.len());
        for (k, b) in self.buses.iter().enumerate() {
            if self.buses[..k].iter().any(|o| o.id == b.id) {
                return Err(ConfigError::Invalid(format!(
                    "grid.buses[{k}]: duplicate bus id \"{}\"",
                    b.id
                )));
            }
            let kind = if b.slack {
                BusKind::Slack
            } else {
                BusKind::Load
            };
            let mut spec = BusSpec::new(b.id.clone(), b.nominal_kv, kind);
            if let Some(e) = b.evcs {
                if e == 0 {
                    return Err(ConfigError::Invalid(format!(
                        "grid.buses[{k}].evcs is 1-based, got 0"
                    )));
                }
                spec = spec.with_evcs(e - 1);
            }
            buses.push(spec);
        }
        let mut lines = Vec::with_capacity(self.lines.len());
        for (k, l) in self.lines.iter().enumerate() {
            let what = format!("grid.lines[{k}]");
            let ty = match &l.std_type {
                Some(name) => Some(std_types::line_type(name).ok_or_else(|| {
                    ConfigError::Invalid(format!("{what}.std_type: unknown line type \"{name}\""))
                })?),
                None => None,
            };
            lines.push(LineSpec {
                from_bus: bus_index(&l.from, &what)?,
                to_bus: bus_index(&l.to, &what)?,
                length_km: l.length_km,
                resistance_ohm_per_km: pick(
                    l.r_ohm_per_km,
                    ty.as_ref().map(|t| t.r_ohm_per_km),
                    &format!("{what}.r_ohm_per_km"),
                )?,
                reactance_ohm_per_km: pick(
                    l.x_ohm_per_km,
                    ty.as_ref().map(|t| t.x_ohm_per_km),
                    &format!("{what}.x_ohm_per_km"),
                )?,
                shunt_capacitance_nf_per_km: l
                    .c_nf_per_km
                    .or(ty.as_ref().map(|t| t.c_nf_per_km))
                    .unwrap_or(0.0),
                ampacity_ka: l
                    .max_i_ka
                    .or(ty.as_ref().map(|t| t.max_i_ka))
                    .unwrap_or(0.0),
            });
        }
        let transformer = match &self.transformer {
            None => None,
            Some(t) => {
                let what = "grid.transformer";
                let ty = match &t.std_type {
                    Some(name) => Some(std_types::transformer_type(name).ok_or_else(|| {
                        ConfigError::Invalid(format!(
                            "{what}.std_type: unknown transformer type \"{name}\""
                        ))
                    })?),
                    None => None,
                };
                let f = |v: Option<f64>, g: fn(&std_types::TransformerType) -> f64, key: &str| {
                    pick(v, ty.as_ref().map(g), &format!("{what}.{key}"))
                };
                Some(TransformerBranch {
                    spec: TransformerSpec {
                        rated_mva: f(t.sn_mva, |x| x.sn_mva, "sn_mva")?,
                        hv_kv: f(t.vn_hv_kv, |x| x.vn_hv_kv, "vn_hv_kv")?,
                        lv_kv: f(t.vn_lv_kv, |x| x.vn_lv_kv, "vn_lv_kv")?,
                        short_circuit_voltage_percent: f(
                            t.vk_percent,
                            |x| x.vk_percent,
                            "vk_percent",
                        )?,
                        short_circuit_losses_percent: f(
                            t.vkr_percent,
                            |x| x.vkr_percent,
                            "vkr_percent",
                        )?,
                        iron_losses_kw: f(t.pfe_kw, |x| x.pfe_kw, "pfe_kw")?,
                        no_load_current_percent: f(t.i0_percent, |x| x.i0_percent, "i0_percent")?,
                    },
                    hv_bus: bus_index(&t.hv, what)?,
                    lv_bus: bus_index(&t.lv, what)?,
                })
            }
        };
        let power_base_mva = transformer.as_ref().map_or(10.0, |t| t.spec.rated_mva);
        Ok(GridModel {
            buses,
            lines,
            transformer,
            slack_voltage_pu: 1.0,
            power_base_mva,
            frequency_hz: 50.0,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileSource {
    /// Smooth per-station ripples with a flat aggregate.
    #[default]
    Reference,
    /// Uniform random entries, seeded by `seed`.
    Random,
    /// Long-format `evcs,slot,energy_mwh` file at `profile_csv`.
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub slots: usize,
    pub horizon_hours: f64,
    /// One weight per slot; constant when omitted.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    pub profile: ProfileSource,
    pub total_nonflexible_mwh: f64,
    /// Relative amplitude of the reference profile.
    pub ripple: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub profile_csv: Option<PathBuf>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            slots: PROFILE_SLOTS,
            horizon_hours: DEFAULT_HORIZON_HOURS,
            weights: None,
            profile: ProfileSource::Reference,
            total_nonflexible_mwh: experiments::REFERENCE_NONFLEXIBLE_MWH,
            ripple: experiments::REFERENCE_RIPPLE,
            profile_csv: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PowerFlowConfig {
    /// Fixed station loads in MW. Without them every slot of the configured
    /// schedule is solved.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loads_mw: Option<Vec<f64>>,
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for PowerFlowConfig {
    fn default() -> Self {
        PowerFlowConfig {
            loads_mw: None,
            tolerance: DEFAULT_PF_TOLERANCE,
            max_iterations: DEFAULT_PF_MAX_ITERATIONS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub toll_min: f64,
    pub toll_max: f64,
    pub toll_step: f64,
    /// 1-based path whose toll is varied (all classes pay it).
    pub toll_path: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            toll_min: 0.0,
            toll_max: 5.0,
            toll_step: 0.25,
            toll_path: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub profiles: usize,
    pub slot_counts: Vec<usize>,
    pub repetitions: usize,
    pub toll: f64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        BenchmarkConfig {
            profiles: 1000,
            slot_counts: vec![2, 4, 8],
            repetitions: 3,
            toll: experiments::BENCHMARK_TOLL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IllustrateConfig {
    pub slots: usize,
    pub toll: f64,
}

impl Default for IllustrateConfig {
    fn default() -> Self {
        IllustrateConfig {
            slots: 3,
            toll: experiments::BENCHMARK_TOLL,
        }
    }
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |p| p + 1) + 1;
    (line, column)
}

impl FromStr for RunConfig {
    type Err = ConfigError;

    /// Parses and validates.
    fn from_str(text: &str) -> Result<Self, ConfigError> {
        let config: RunConfig = toml::from_str(text).map_err(|e| {
            let (line, column) = e.span().map_or((0, 0), |s| line_column(text, s.start));
            ConfigError::Parse {
                line,
                column,
                message: e.message().trim().to_string(),
            }
        })?;
        config.validate()?;
        Ok(config)
    }
}

pub fn parse_config(path: &Path) -> Result<RunConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    text.parse()
}

impl RunConfig {
    pub fn to_toml(&self) -> Result<String, ConfigError> {
        toml::to_string(self)
            .map_err(|e| ConfigError::Invalid(format!("cannot encode config: {e}")))
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        // TOML integers are signed
        if i64::try_from(self.seed).is_err() {
            return bad(format!("seed must be <= {}, got {}", i64::MAX, self.seed));
        }
        self.scenario()?;
        let grid = self.grid_model()?;
        self.weights()?;
        let s = &self.schedule;
        if !(s.total_nonflexible_mwh > 0.0 && s.total_nonflexible_mwh.is_finite()) {
            return bad("schedule.total_nonflexible_mwh must be > 0".into());
        }
        if !(s.ripple >= 0.0 && s.ripple <= 1.0) {
            return bad("schedule.ripple must lie in [0, 1]".into());
        }
        if s.profile == ProfileSource::Csv && s.profile_csv.is_none() {
            return bad("schedule.profile = \"csv\" needs schedule.profile_csv".into());
        }
        let pf = &self.powerflow;
        if let Some(loads) = &pf.loads_mw {
            if loads.len() != grid.evcs_count() {
                return bad(format!(
                    "powerflow.loads_mw has {} entries but the grid has {} stations",
                    loads.len(),
                    grid.evcs_count()
                ));
            }
            if loads.iter().any(|p| !p.is_finite()) {
                return bad("powerflow.loads_mw must be finite".into());
            }
        }
        if !(pf.tolerance > 0.0) || pf.max_iterations == 0 {
            return bad("powerflow.tolerance must be > 0 and max_iterations >= 1".into());
        }
        let sw = &self.sweep;
        if sw.toll_path == 0 || sw.toll_path > self.transport.paths.len() {
            return bad(format!("sweep.toll_path {} does not exist", sw.toll_path));
        }
        if !(sw.toll_min >= 0.0) {
            return bad("sweep.toll_min (tolls) must be >= 0".into());
        }
        toll_grid(sw.toll_min, sw.toll_max, sw.toll_step)
            .map_err(|e| ConfigError::Invalid(format!("sweep: {e}")))?;
        let b = &self.benchmark;
        if b.profiles == 0 || b.repetitions == 0 {
            return bad("benchmark.profiles and benchmark.repetitions must be >= 1".into());
        }
        if b.slot_counts.is_empty() || b.slot_counts.contains(&0) {
            return bad("benchmark.slot_counts must be non-empty and >= 1".into());
        }
        if !(b.toll >= 0.0) || !b.toll.is_finite() {
            return bad("benchmark.toll must be >= 0".into());
        }
        if self.illustrate.slots == 0 {
            return bad("illustrate.slots (T) must be >= 1".into());
        }
        if !(self.illustrate.toll >= 0.0) || !self.illustrate.toll.is_finite() {
            return bad("illustrate.toll must be >= 0".into());
        }
        Ok(())
    }

    pub fn scenario(&self) -> Result<TransportScenario<f64>, ConfigError> {
        self.transport.scenario()
    }

    pub fn grid_model(&self) -> Result<GridModel<f64>, ConfigError> {
        self.grid.model()
    }

    pub fn weights(&self) -> Result<SlotWeights<f64>, ConfigError> {
        let s = &self.schedule;
        if s.slots == 0 {
            return Err(ConfigError::Invalid(
                "schedule.slots (T) must be >= 1".into(),
            ));
        }
        let result = match &s.weights {
            Some(w) if w.len() != s.slots => {
                return Err(ConfigError::Invalid(format!(
                    "schedule.weights has {} entries for {} slots (T)",
                    w.len(),
                    s.slots
                )))
            }
            Some(w) => SlotWeights::new(w.clone(), s.horizon_hours),
            None => SlotWeights::uniform(s.slots, s.horizon_hours),
        };
        result.map_err(|e| ConfigError::Invalid(format!("schedule: {e}")))
    }

    /// Nonflexible profile of `evcs` stations over `slots` slots.
    pub fn nonflexible(&self, evcs: usize, slots: usize) -> Result<Profile, ExperimentError> {
        let s = &self.schedule;
        let base = match s.profile {
            ProfileSource::Reference => {
                reference_profile(s.total_nonflexible_mwh, evcs, PROFILE_SLOTS, s.ripple)?
            }
            ProfileSource::Random => {
                generate_profiles(self.seed, 1, s.total_nonflexible_mwh, evcs, PROFILE_SLOTS)?
                    .remove(0)
            }
            ProfileSource::Csv => {
                let path = s.profile_csv.as_deref().ok_or_else(|| {
                    ExperimentError::InvalidInput("schedule.profile_csv is not set".into())
                })?;
                let p = read_profile_csv(path)?;
                if p.len() != evcs {
                    return Err(ExperimentError::MalformedProfile(format!(
                        "{} has {} stations, the grid has {evcs}",
                        path.display(),
                        p.len()
                    )));
                }
                p
            }
        };
        rebin(&base, slots)
    }

    /// Applies command-line overrides. `--slots` sets the slot count of the
    /// command being run.
    pub fn apply(&mut self, command: Command, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.seed = seed;
        }
        if let Some(out) = &o.out {
            self.out_dir = out.clone();
        }
        if let Some(v) = o.toll_min {
            self.sweep.toll_min = v;
        }
        if let Some(v) = o.toll_max {
            self.sweep.toll_max = v;
        }
        if let Some(v) = o.toll_step {
            self.sweep.toll_step = v;
        }
        if let Some(m) = o.method {
            self.method = m;
        }
        if let Some(t) = o.slots {
            match command {
                Command::Bench => self.benchmark.slot_counts = vec![t],
                Command::Illustrate => self.illustrate.slots = t,
                _ => self.schedule.slots = t,
            }
        }
    }
}

// --------------------------------------------------------------------- CLI

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Wardrop equilibrium of the configured tolls.
    Equilibrium,
    /// Charging needs at the equilibrium.
    Needs,
    /// One schedule with the configured method.
    Schedule,
    /// AC power flow of fixed loads or of each scheduled slot.
    Powerflow,
    /// Toll sweep with all three methods.
    Sweep,
    /// Seeded comparison of the methods over random profiles.
    Bench,
    /// Stacked load profiles of the three methods at one toll.
    Illustrate,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Equilibrium => "equilibrium",
            Command::Needs => "needs",
            Command::Schedule => "schedule",
            Command::Powerflow => "powerflow",
            Command::Sweep => "sweep",
            Command::Bench => "bench",
            Command::Illustrate => "illustrate",
        }
    }
}

fn parse_method(s: &str) -> Result<Method, String> {
    Method::ALL
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| format!("expected local, global or grid-aware, got {s:?}"))
}

#[derive(Debug, Clone, Default, Parser)]
pub struct Overrides {
    /// Seed for random profiles.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// First toll of the sweep, EUR.
    #[arg(long)]
    pub toll_min: Option<f64>,
    /// Last toll of the sweep, EUR.
    #[arg(long)]
    pub toll_max: Option<f64>,
    #[arg(long)]
    pub toll_step: Option<f64>,
    /// Slot count; for bench it replaces the list of slot counts.
    #[arg(long)]
    pub slots: Option<usize>,
    /// local, global or grid-aware.
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
}

/// Toll, traffic and charging-schedule experiments on a distribution grid.
#[derive(Debug, Clone, Parser)]
#[command(name = "evgrid", version)]
pub struct Cli {
    #[arg(value_enum)]
    pub command: Command,
    /// TOML run configuration; reference values when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
}

/// What a command printed and how it ended.
#[derive(Debug, Clone)]
pub struct Report {
    pub status: ExitStatus,
    pub lines: Vec<String>,
    pub error: Option<ErrorReport>,
}

/// Contents of `errors.json`.
#[derive(Debug, Clone, Serialize)]
pub struct ErrorReport {
    pub command: Command,
    pub status: ExitStatus,
    pub exit_code: u8,
    pub message: String,
    pub failures: Vec<StageFailure>,
}

/// Loads the config, applies the overrides and runs the command.
pub fn run_cli(cli: &Cli) -> Report {
    let loaded = match &cli.config {
        Some(path) => parse_config(path),
        None => Ok(RunConfig::default()),
    };
    let config = loaded.and_then(|mut c| {
        c.apply(cli.command, &cli.overrides);
        c.validate().map(|_| c)
    });
    match config {
        Ok(config) => run_command(cli.command, &config),
        Err(e) => {
            let out = cli
                .overrides
                .out
                .clone()
                .unwrap_or_else(|| RunConfig::default().out_dir);
            fail(cli.command, &out, &CliError::Config(e), Vec::new())
        }
    }
}

/// Runs one command with a validated config and writes its files.
pub fn run_command(command: Command, config: &RunConfig) -> Report {
    let out = &config.out_dir;
    if let Err(source) = fs::create_dir_all(out) {
        let e = CliError::Write {
            path: out.clone(),
            source,
        };
        return Report {
            status: ExitStatus::Io,
            lines: vec![format!("{}: error: {e}", command.as_str())],
            error: None,
        };
    }
    let result = match command {
        Command::Equilibrium => cmd_equilibrium(config),
        Command::Needs => cmd_needs(config),
        Command::Schedule => cmd_schedule(config),
        Command::Powerflow => cmd_powerflow(config),
        Command::Sweep => cmd_sweep(config),
        Command::Bench => cmd_bench(config),
        Command::Illustrate => cmd_illustrate(config),
    };
    let output = match result {
        Ok(o) => o,
        Err(e) => return fail(command, out, &e, Vec::new()),
    };
    let mut summary = output.summary;
    summary["command"] = json!(command.as_str());
    if let Err(e) = write_json(&out.join("summary.json"), &summary) {
        return fail(command, out, &e, Vec::new());
    }
    if let Some(first) = output.failures.first() {
        let e = CliError::NonConvergence(format!(
            "{} of the results failed; first: {}: {}",
            output.failures.len(),
            first.stage,
            first.message
        ));
        let mut report = fail(command, out, &e, output.failures.clone());
        report.status = first.kind.into();
        if let Some(err) = &mut report.error {
            err.status = report.status;
            err.exit_code = report.status.code();
        }
        rewrite_errors(out, &report);
        let mut lines = output.lines;
        lines.extend(report.lines);
        report.lines = lines;
        return report;
    }
    Report {
        status: ExitStatus::Success,
        lines: output.lines,
        error: None,
    }
}

fn fail(command: Command, out: &Path, e: &CliError, failures: Vec<StageFailure>) -> Report {
    let status: ExitStatus = e.kind().into();
    let error = ErrorReport {
        command,
        status,
        exit_code: status.code(),
        message: e.to_string(),
        failures,
    };
    let mut lines = vec![format!("{}: error: {e}", command.as_str())];
    let written = fs::create_dir_all(out)
        .map_err(|source| CliError::Write {
            path: out.to_path_buf(),
            source,
        })
        .and_then(|_| write_json(&out.join("errors.json"), &error));
    if let Err(w) = written {
        lines.push(format!("{}: error: {w}", command.as_str()));
    }
    Report {
        status,
        lines,
        error: Some(error),
    }
}

fn rewrite_errors(out: &Path, report: &Report) {
    if let Some(err) = &report.error {
        // the first write already succeeded, so a failure here is not actionable
        let _ = write_json(&out.join("errors.json"), err);
    }
}

struct Output {
    summary: Value,
    lines: Vec<String>,
    failures: Vec<StageFailure>,
}

impl Output {
    fn ok(summary: Value, line: String) -> Self {
        Output {
            summary,
            lines: vec![line],
            failures: Vec::new(),
        }
    }
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Encode {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    fs::write(path, text + "\n").map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn write_csv<S: Serialize>(path: &Path, rows: &[S]) -> Result<(), CliError> {
    let encode = |e: csv::Error| CliError::Encode {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut w = csv::Writer::from_path(path).map_err(encode)?;
    for row in rows {
        w.serialize(row).map_err(encode)?;
    }
    w.flush().map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn fmt_vec(v: &[f64], digits: usize) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.digits$}")).collect();
    format!("[{}]", parts.join(", "))
}

// ---------------------------------------------------------------- commands

#[derive(Serialize)]
struct EquilibriumRow {
    class: ClassKind,
    path: usize,
    proportion: f64,
    vehicles: f64,
    cost_eur: f64,
}

#[derive(Serialize)]
struct NeedRow {
    evcs: usize,
    need_mwh: f64,
}

#[derive(Serialize)]
struct ScheduleRow {
    method: Method,
    evcs: usize,
    slot: usize,
    nonflexible_mwh: f64,
    flexible_mwh: f64,
    total_mwh: f64,
}

fn schedule_rows(method: Method, s: &LoadSchedule<f64>) -> Vec<ScheduleRow> {
    let mut rows = Vec::new();
    for i in 0..s.evcs_count() {
        for t in 0..s.slot_count() {
            rows.push(ScheduleRow {
                method,
                evcs: i + 1,
                slot: t + 1,
                nonflexible_mwh: s.nonflexible[i][t],
                flexible_mwh: s.flexible[i][t],
                total_mwh: s.total(i, t),
            });
        }
    }
    rows
}

fn cmd_equilibrium(config: &RunConfig) -> Result<Output, CliError> {
    let scenario = config.scenario()?;
    let eq = solve_wardrop_with(&scenario, &WardropOptions::default())?;
    let mut rows = Vec::new();
    for (s, class) in scenario.classes.iter().enumerate() {
        for i in 0..scenario.paths.len() {
            rows.push(EquilibriumRow {
                class: class.kind,
                path: i + 1,
                proportion: eq.assignment.proportions[s][i],
                vehicles: eq.assignment.vehicles(&scenario, s, i),
                cost_eur: eq.per_class_path_costs[s][i],
            });
        }
    }
    write_csv(&config.out_dir.join("equilibrium.csv"), &rows)?;
    let flows = eq.assignment.path_flows(&scenario);
    let summary = json!({
        "equilibrium_gap": eq.equilibrium_gap,
        "iterations": eq.iterations,
        "path_flows": flows,
        "proportions": eq.assignment.proportions,
        "path_costs": eq.per_class_path_costs,
    });
    let line = format!(
        "equilibrium: path flows {} vehicles, gap {:.2e} EUR after {} iterations",
        fmt_vec(&flows, 1),
        eq.equilibrium_gap,
        eq.iterations
    );
    Ok(Output::ok(summary, line))
}

fn compute_needs(config: &RunConfig) -> Result<(TransportScenario<f64>, Vec<f64>), CliError> {
    let scenario = config.scenario()?;
    let eq = solve_wardrop_with(&scenario, &WardropOptions::default())?;
    let needs = charging_needs(&eq, &scenario)?;
    Ok((scenario, needs.per_evcs_mwh))
}

fn cmd_needs(config: &RunConfig) -> Result<Output, CliError> {
    let (_, needs) = compute_needs(config)?;
    let rows: Vec<NeedRow> = needs
        .iter()
        .enumerate()
        .map(|(i, n)| NeedRow {
            evcs: i + 1,
            need_mwh: *n,
        })
        .collect();
    write_csv(&config.out_dir.join("needs.csv"), &rows)?;
    let total: f64 = needs.iter().sum();
    let line = format!("needs: {} MWh (total {total:.4} MWh)", fmt_vec(&needs, 4));
    Ok(Output::ok(
        json!({ "needs_mwh": needs, "total_mwh": total }),
        line,
    ))
}

struct Scheduled {
    model: PowerFlowModel<f64>,
    weights: SlotWeights<f64>,
    needs: Vec<f64>,
    schedule: LoadSchedule<f64>,
}

fn scheduled(config: &RunConfig) -> Result<Scheduled, CliError> {
    let grid = config.grid_model()?;
    let weights = config.weights()?;
    let (_, needs) = compute_needs(config)?;
    if needs.len() != grid.evcs_count() {
        return Err(ConfigError::Invalid(format!(
            "the transport network has {} paths but the grid has {} stations",
            needs.len(),
            grid.evcs_count()
        ))
        .into());
    }
    let nonflex = config.nonflexible(grid.evcs_count(), weights.slot_count())?;
    let model = PowerFlowModel::new(&grid)?;
    let schedule = schedule_with(
        config.method,
        &model,
        &nonflex,
        &crate::traffic::ChargingNeeds {
            per_evcs_mwh: needs.clone(),
        },
        &weights,
        &GridAwareOptions::default(),
    )?;
    Ok(Scheduled {
        model,
        weights,
        needs,
        schedule,
    })
}

fn cmd_schedule(config: &RunConfig) -> Result<Output, CliError> {
    let s = scheduled(config)?;
    write_csv(
        &config.out_dir.join("schedule.csv"),
        &schedule_rows(config.method, &s.schedule),
    )?;
    let cost = s.model.grid_cost(&s.schedule, &s.weights)?;
    let summary = json!({
        "method": config.method,
        "slots": s.weights.slot_count(),
        "needs_mwh": s.needs,
        "grid_cost": cost,
        "aggregate_total_mwh": s.schedule.aggregate_total(),
        "feasibility_violation": s.schedule.feasibility_violation(&s.needs),
    });
    let line = format!(
        "schedule: {} over {} slots, grid cost {cost:.6} MVA^2",
        config.method,
        s.weights.slot_count()
    );
    Ok(Output::ok(summary, line))
}

#[derive(Serialize)]
struct PowerFlowRow {
    slot: usize,
    bus: usize,
    bus_id: String,
    vm_pu: f64,
    va_deg: f64,
    p_mw: f64,
    q_mvar: f64,
}

fn cmd_powerflow(config: &RunConfig) -> Result<Output, CliError> {
    let (model, slot_loads) = match &config.powerflow.loads_mw {
        Some(loads) => {
            let model = PowerFlowModel::new(&config.grid_model()?)?;
            (model, vec![loads.clone()])
        }
        None => {
            let s = scheduled(config)?;
            let hours = s.weights.slot_hours();
            let loads = (0..s.schedule.slot_count())
                .map(|t| {
                    (0..s.schedule.evcs_count())
                        .map(|i| s.schedule.total(i, t) / hours)
                        .collect()
                })
                .collect();
            (s.model, loads)
        }
    };
    let mut model = model;
    model.options.tolerance = config.powerflow.tolerance;
    model.options.max_iterations = config.powerflow.max_iterations;

    let mut rows = Vec::new();
    let mut head = Vec::new();
    let mut losses = Vec::new();
    let mut residuals = Vec::new();
    let mut converged = Vec::new();
    let mut failures = Vec::new();
    for (t, loads) in slot_loads.iter().enumerate() {
        let sol = model.solve(loads)?;
        for (k, bus) in model.grid().buses.iter().enumerate() {
            let v = sol.bus_voltages[k];
            rows.push(PowerFlowRow {
                slot: t + 1,
                bus: k + 1,
                bus_id: bus.bus_id.clone(),
                vm_pu: v.norm(),
                va_deg: v.arg().to_degrees(),
                p_mw: sol.bus_injections_mva[k].re,
                q_mvar: sol.bus_injections_mva[k].im,
            });
        }
        if !sol.converged {
            failures.push(StageFailure {
                stage: format!("slot {}", t + 1),
                kind: FailureKind::NonConvergence,
                message: format!(
                    "Newton-Raphson stopped after {} iterations with residual {:e} pu",
                    sol.iterations, sol.max_residual
                ),
            });
        }
        head.push(sol.head_apparent_power_mva);
        losses.push(total_losses_mw(model.grid(), &sol));
        residuals.push(sol.max_residual);
        converged.push(sol.converged);
    }
    write_csv(&config.out_dir.join("powerflow.csv"), &rows)?;
    let all = converged.iter().all(|c| *c);
    let summary = json!({
        "converged": all,
        "slots": slot_loads.len(),
        "loads_mw": slot_loads,
        "head_apparent_power_mva": head,
        "losses_mw": losses,
        "max_residual_pu": residuals,
    });
    let line = format!(
        "powerflow: {} solve(s), converged {all}, head |S| {} MVA",
        slot_loads.len(),
        fmt_vec(&head, 4)
    );
    Ok(Output {
        summary,
        lines: vec![line],
        failures,
    })
}

#[derive(Serialize)]
struct SweepFlowRow {
    toll: f64,
    class: ClassKind,
    path: usize,
    proportion: f64,
    vehicles: f64,
}

#[derive(Serialize)]
struct SweepNeedRow {
    toll: f64,
    evcs: usize,
    need_mwh: f64,
}

#[derive(Serialize)]
struct SweepCostRow {
    toll: f64,
    method: Method,
    grid_cost: f64,
    epsilon: Option<f64>,
}

#[derive(Serialize)]
struct SweepScheduleRow {
    toll: f64,
    method: Method,
    evcs: usize,
    slot: usize,
    nonflexible_mwh: f64,
    flexible_mwh: f64,
}

fn sweep_options(config: &RunConfig) -> SweepOptions {
    SweepOptions {
        toll_path: config.sweep.toll_path - 1,
        ..SweepOptions::default()
    }
}

fn cmd_sweep(config: &RunConfig) -> Result<Output, CliError> {
    let scenario = config.scenario()?;
    let grid = config.grid_model()?;
    let weights = config.weights()?;
    let nonflex = config.nonflexible(grid.evcs_count(), weights.slot_count())?;
    let sw = &config.sweep;
    let tolls = toll_grid(sw.toll_min, sw.toll_max, sw.toll_step)?;
    let result = toll_sweep(
        &scenario,
        &grid,
        &nonflex,
        &weights,
        &tolls,
        &sweep_options(config),
    )?;

    let (mut flows, mut needs, mut costs, mut schedules) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for p in &result.points {
        for (s, class) in result.classes.iter().enumerate() {
            for (i, (x, v)) in p.proportions[s].iter().zip(&p.vehicles[s]).enumerate() {
                flows.push(SweepFlowRow {
                    toll: p.toll,
                    class: *class,
                    path: i + 1,
                    proportion: *x,
                    vehicles: *v,
                });
            }
        }
        for (i, n) in p.needs_mwh.iter().enumerate() {
            needs.push(SweepNeedRow {
                toll: p.toll,
                evcs: i + 1,
                need_mwh: *n,
            });
        }
        for (m, c) in &p.grid_cost {
            costs.push(SweepCostRow {
                toll: p.toll,
                method: *m,
                grid_cost: *c,
                epsilon: p.epsilon(*m),
            });
        }
        for (m, sched) in &p.schedules {
            for r in schedule_rows(*m, sched) {
                schedules.push(SweepScheduleRow {
                    toll: p.toll,
                    method: r.method,
                    evcs: r.evcs,
                    slot: r.slot,
                    nonflexible_mwh: r.nonflexible_mwh,
                    flexible_mwh: r.flexible_mwh,
                });
            }
        }
    }
    let dir = &config.out_dir;
    write_csv(&dir.join("sweep_flows.csv"), &flows)?;
    write_csv(&dir.join("sweep_needs.csv"), &needs)?;
    write_csv(&dir.join("sweep_costs.csv"), &costs)?;
    write_csv(&dir.join("sweep_schedules.csv"), &schedules)?;

    let failures: Vec<StageFailure> = result
        .points
        .iter()
        .flat_map(|p| {
            p.failures.iter().map(move |f| StageFailure {
                stage: format!("toll {} {}", p.toll, f.stage),
                ..f.clone()
            })
        })
        .collect();
    let detachment = result.detachment_toll();
    let summary = json!({
        "toll_path": sw.toll_path,
        "tolls": result.tolls(),
        "slots": weights.slot_count(),
        "reference_method": Method::GridAware,
        "reference_toll": tolls[0],
        "reference_cost": result.reference_cost,
        "detachment_toll": detachment,
        "failures": result.failure_count(),
        "points": result.points,
    });
    let line = format!(
        "sweep: {} tolls on path {}, detachment toll {}, reference cost {}, {} failure(s)",
        tolls.len(),
        sw.toll_path,
        detachment.map_or("none".to_string(), |t| format!("{t:.2} EUR")),
        result
            .reference_cost
            .map_or("n/a".to_string(), |c| format!("{c:.6} MVA^2")),
        result.failure_count()
    );
    Ok(Output {
        summary,
        lines: vec![line],
        failures,
    })
}

#[derive(Serialize)]
struct BenchRow {
    slots: usize,
    samples: usize,
    failures: usize,
    mean_epsilon_local: f64,
    mean_epsilon_global: f64,
    max_dominance_excess: f64,
    global_fallbacks: usize,
}

#[derive(Serialize)]
struct BenchRunRow {
    profile: usize,
    slots: usize,
    method: Method,
    grid_cost: f64,
    epsilon: Option<f64>,
}

#[derive(Serialize)]
struct BenchTimingRow {
    slots: usize,
    method: Method,
    mean_seconds: f64,
}

fn cmd_bench(config: &RunConfig) -> Result<Output, CliError> {
    let scenario = config.scenario()?;
    let grid = config.grid_model()?;
    let b = &config.benchmark;
    let needs = needs_at_toll(
        &scenario,
        config.sweep.toll_path - 1,
        b.toll,
        &WardropOptions::default(),
    )?;
    let profiles = generate_profiles(
        config.seed,
        b.profiles,
        config.schedule.total_nonflexible_mwh,
        grid.evcs_count(),
        PROFILE_SLOTS,
    )?;
    let options = BenchmarkOptions {
        slot_counts: b.slot_counts.clone(),
        repetitions: b.repetitions,
        horizon_hours: config.schedule.horizon_hours,
        grid_aware: GridAwareOptions::default(),
    };
    let mut result = benchmark_methods(&profiles, &needs, &grid, &options)?;
    result.seed = Some(config.seed);

    let rows: Vec<BenchRow> = result
        .rows
        .iter()
        .map(|r| BenchRow {
            slots: r.slots,
            samples: r.samples,
            failures: r.failures,
            mean_epsilon_local: r.mean_epsilon_local,
            mean_epsilon_global: r.mean_epsilon_global,
            max_dominance_excess: r.max_dominance_excess,
            global_fallbacks: r.global_fallbacks,
        })
        .collect();
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for run in &result.runs {
        for (m, c) in &run.grid_cost {
            runs.push(BenchRunRow {
                profile: run.profile + 1,
                slots: run.slots,
                method: *m,
                grid_cost: *c,
                epsilon: run.epsilon.iter().find(|(k, _)| k == m).map(|(_, e)| *e),
            });
        }
        if let Some(f) = &run.failure {
            failures.push(StageFailure {
                stage: format!("profile {} T={} {}", run.profile + 1, run.slots, f.stage),
                ..f.clone()
            });
        }
    }
    let timings: Vec<BenchTimingRow> = result
        .rows
        .iter()
        .flat_map(|r| {
            [
                (Method::Local, r.mean_seconds_local),
                (Method::Global, r.mean_seconds_global),
                (Method::GridAware, r.mean_seconds_grid_aware),
            ]
            .map(|(method, mean_seconds)| BenchTimingRow {
                slots: r.slots,
                method,
                mean_seconds,
            })
        })
        .collect();
    let dir = &config.out_dir;
    write_csv(&dir.join("bench.csv"), &rows)?;
    write_csv(&dir.join("bench_runs.csv"), &runs)?;
    // wall-clock times differ between runs, so they live in their own file
    write_csv(&dir.join("bench_timings.csv"), &timings)?;

    let summary = json!({
        "seed": config.seed,
        "profiles": b.profiles,
        "toll": b.toll,
        "needs_mwh": result.needs_mwh,
        "rows": rows,
    });
    let mut lines = Vec::new();
    for r in &result.rows {
        lines.push(format!(
            "bench: T={} eps_local {:.4}% eps_global {:.4}% time local/global/grid-aware {:.1e}/{:.1e}/{:.1e} s ({} samples, {} failures)",
            r.slots,
            100.0 * r.mean_epsilon_local,
            100.0 * r.mean_epsilon_global,
            r.mean_seconds_local,
            r.mean_seconds_global,
            r.mean_seconds_grid_aware,
            r.samples,
            r.failures
        ));
    }
    Ok(Output {
        summary,
        lines,
        failures,
    })
}

#[derive(Serialize)]
struct PlotCsvRow<'a> {
    method: Method,
    evcs: &'a str,
    slot: usize,
    component: experiments::LoadComponent,
    energy_mwh: f64,
    power_mw: f64,
}

fn cmd_illustrate(config: &RunConfig) -> Result<Output, CliError> {
    let scenario = config.scenario()?;
    let grid = config.grid_model()?;
    let il = &config.illustrate;
    let weights = SlotWeights::uniform(il.slots, config.schedule.horizon_hours)
        .map_err(|e| ConfigError::Invalid(format!("illustrate: {e}")))?;
    let nonflex = config.nonflexible(grid.evcs_count(), il.slots)?;
    let result = profile_illustration(
        &scenario,
        &grid,
        &nonflex,
        &weights,
        il.toll,
        &sweep_options(config),
    )?;
    let rows: Vec<PlotCsvRow> = result
        .rows
        .iter()
        .map(|r| PlotCsvRow {
            method: r.method,
            evcs: &r.evcs,
            slot: r.slot,
            component: r.component,
            energy_mwh: r.energy_mwh,
            power_mw: r.power_mw,
        })
        .collect();
    write_csv(&config.out_dir.join("illustrate.csv"), &rows)?;
    let aggregates: Vec<(Method, Vec<f64>)> = result
        .schedules
        .iter()
        .map(|(m, s)| (*m, s.aggregate_total()))
        .collect();
    let spread = |v: &[f64]| {
        v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min)
    };
    let summary = json!({
        "toll": il.toll,
        "slots": il.slots,
        "needs_mwh": result.needs_mwh,
        "grid_cost": result.grid_cost,
        "aggregate_total_mwh": aggregates,
    });
    let mut lines = Vec::new();
    for (m, agg) in &aggregates {
        lines.push(format!(
            "illustrate: {m} aggregate {} MWh (spread {:.2e})",
            fmt_vec(agg, 4),
            spread(agg)
        ));
    }
    Ok(Output {
        summary,
        lines,
        failures: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_reference() {
        let c: RunConfig = "".parse().unwrap();
        assert_eq!(c, RunConfig::default());
        let s = c.scenario().unwrap();
        assert_eq!(s, TransportScenario::reference());
    }

    #[test]
    fn unknown_key_reports_line() {
        let err = "seed = 3\n[transport]\nbogus = 1\n"
            .parse::<RunConfig>()
            .unwrap_err();
        match err {
            ConfigError::Parse { line, message, .. } => {
                assert_eq!(line, 3);
                assert!(message.contains("bogus"), "{message}");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn round_trip_default() {
        let c = RunConfig::default();
        let back: RunConfig = c.to_toml().unwrap().parse().unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn line_column_counts_from_one() {
        assert_eq!(line_column("ab\ncd", 4), (2, 2));
        assert_eq!(line_column("ab", 0), (1, 1));
    }
}
