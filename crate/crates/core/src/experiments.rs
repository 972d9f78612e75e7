//! Numerical studies built on the other modules: the path-toll sweep, the
//! three-method benchmark over random nonflexible profiles, and a small
//! worked example of the three schedules.
//!
//! Profiles are `stations x slots` matrices of energy in MWh over a fixed
//! charging window.

use std::f64::consts::PI;
use std::io;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{GridError, GridModel, PowerFlowModel};
use crate::scheduling::grid_aware::schedule_grid_aware_with;
use crate::scheduling::{
    normalized_cost, schedule_global, schedule_local, GridAwareOptions, LoadSchedule, Method,
    ScheduleError, SlotWeights,
};
use crate::traffic::{
    charging_needs, solve_wardrop_with, ChargingNeeds, ClassKind, TrafficError, TransportScenario,
    WardropOptions, USED_PATH_THRESHOLD,
};

/// Stations x slots, MWh.
pub type Profile = Vec<Vec<f64>>;

/// Slots of the generated profiles (one per working hour).
pub const PROFILE_SLOTS: usize = 8;
/// Total nonflexible energy of the reference instance, MWh.
pub const REFERENCE_NONFLEXIBLE_MWH: f64 = 30.0;
/// Relative amplitude of the per-station ripple in [`reference_profile`].
pub const REFERENCE_RIPPLE: f64 = 0.3;
/// Path-3 toll of the benchmark and the illustration, euros.
pub const BENCHMARK_TOLL: f64 = 4.0;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Traffic(#[from] TrafficError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("invalid experiment input: {0}")]
    InvalidInput(String),
    #[error("malformed profile data: {0}")]
    MalformedProfile(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

/// Coarse failure class, used for exit codes and error reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureKind {
    Validation,
    NonConvergence,
    Io,
}

impl FailureKind {
    pub fn of_traffic(e: &TrafficError) -> Self {
        match e {
            TrafficError::NotConverged { .. } => FailureKind::NonConvergence,
            _ => FailureKind::Validation,
        }
    }

    pub fn of_grid(e: &GridError) -> Self {
        match e {
            GridError::NotConverged { .. } | GridError::SlotNotConverged { .. } => {
                FailureKind::NonConvergence
            }
            _ => FailureKind::Validation,
        }
    }

    pub fn of_schedule(e: &ScheduleError) -> Self {
        match e {
            ScheduleError::NotConverged { .. } => FailureKind::NonConvergence,
            ScheduleError::Grid(g) => Self::of_grid(g),
            _ => FailureKind::Validation,
        }
    }
}

impl ExperimentError {
    pub fn kind(&self) -> FailureKind {
        match self {
            ExperimentError::Traffic(e) => FailureKind::of_traffic(e),
            ExperimentError::Grid(e) => FailureKind::of_grid(e),
            ExperimentError::Schedule(e) => FailureKind::of_schedule(e),
            ExperimentError::InvalidInput(_) | ExperimentError::MalformedProfile(_) => {
                FailureKind::Validation
            }
            ExperimentError::Io(_) => FailureKind::Io,
        }
    }
}

/// A failure inside one sweep point or benchmark run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub kind: FailureKind,
    pub message: String,
}

impl StageFailure {
    fn new(stage: &str, kind: FailureKind, message: impl ToString) -> Self {
        StageFailure {
            stage: stage.to_string(),
            kind,
            message: message.to_string(),
        }
    }

    fn schedule(stage: &str, e: &ScheduleError) -> Self {
        Self::new(stage, FailureKind::of_schedule(e), e)
    }
}

// ---------------------------------------------------------------- profiles

/// `count` random profiles: uniform(0,1) entries scaled so each matrix sums to
/// `total_energy_mwh`. Deterministic in `seed`.
pub fn generate_profiles(
    seed: u64,
    count: usize,
    total_energy_mwh: f64,
    evcs_count: usize,
    slots: usize,
) -> Result<Vec<Profile>> {
    if !(total_energy_mwh > 0.0 && total_energy_mwh.is_finite()) {
        return Err(ExperimentError::InvalidInput(format!(
            "total nonflexible energy must be > 0 MWh, got {total_energy_mwh}"
        )));
    }
    if count == 0 || evcs_count == 0 || slots == 0 {
        return Err(ExperimentError::InvalidInput(
            "profile count, station count and slot count must be >= 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| loop {
            let raw: Profile = (0..evcs_count)
                .map(|_| (0..slots).map(|_| rng.gen::<f64>()).collect())
                .collect();
            let drawn: f64 = raw.iter().flatten().sum();
            if drawn > 0.0 {
                break scale_to_total(raw, drawn, total_energy_mwh);
            }
        })
        .collect())
}

fn scale_to_total(mut m: Profile, current: f64, total: f64) -> Profile {
    let f = total / current;
    m.iter_mut().flatten().for_each(|v| *v *= f);
    // put the rounding residue on the largest entry
    let residue = total - m.iter().flatten().sum::<f64>();
    if let Some(v) = m
        .iter_mut()
        .flatten()
        .max_by(|a, b| a.partial_cmp(b).unwrap())
    {
        *v += residue;
    }
    m
}

/// Deterministic profile with a flat aggregate: station `i` carries
/// `E/(N T) (1 + a sin(2 pi (t + 1/2)/T + 2 pi i/N))`, so the stations peak
/// at evenly spaced times of the window and the ripples cancel in the sum.
pub fn reference_profile(
    total_energy_mwh: f64,
    evcs_count: usize,
    slots: usize,
    amplitude: f64,
) -> Result<Profile> {
    if !(total_energy_mwh > 0.0 && total_energy_mwh.is_finite()) || evcs_count == 0 || slots == 0 {
        return Err(ExperimentError::InvalidInput(
            "reference profile needs positive energy, stations and slots".into(),
        ));
    }
    if !(0.0..1.0).contains(&amplitude) {
        return Err(ExperimentError::InvalidInput(format!(
            "ripple amplitude must lie in [0, 1), got {amplitude}"
        )));
    }
    let mean = total_energy_mwh / (evcs_count * slots) as f64;
    Ok((0..evcs_count)
        .map(|i| {
            (0..slots)
                .map(|t| {
                    let phase =
                        2.0 * PI * ((t as f64 + 0.5) / slots as f64 + i as f64 / evcs_count as f64);
                    mean * (1.0 + amplitude * phase.sin())
                })
                .collect()
        })
        .collect())
}

/// Re-expresses each row on `slots` equal slots spanning the same window,
/// energy being spread evenly inside every original slot. When the old slot
/// count is a multiple of `slots` this is a plain sum of adjacent slots.
pub fn rebin(profile: &[Vec<f64>], slots: usize) -> Result<Profile> {
    let old = profile.first().map_or(0, Vec::len);
    if slots == 0 || old == 0 || profile.iter().any(|r| r.len() != old) {
        return Err(ExperimentError::InvalidInput(
            "rebinning needs a rectangular profile and at least one target slot".into(),
        ));
    }
    // time in units of 1/(old * slots) of the window
    Ok(profile
        .iter()
        .map(|row| {
            let mut out = vec![0.0; slots];
            for (s, e) in row.iter().enumerate() {
                let (lo, hi) = (s * slots, (s + 1) * slots);
                for (k, o) in out.iter_mut().enumerate() {
                    let overlap = hi.min((k + 1) * old).saturating_sub(lo.max(k * old));
                    if overlap == slots {
                        *o += e;
                    } else if overlap > 0 {
                        *o += e * overlap as f64 / slots as f64;
                    }
                }
            }
            out
        })
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct ProfileRecord {
    evcs: usize,
    slot: usize,
    energy_mwh: f64,
}

/// Long-format CSV with header `evcs,slot,energy_mwh`, 1-based indices,
/// every (station, slot) pair exactly once.
pub fn parse_profile_csv<R: io::Read>(reader: R) -> Result<Profile> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = Vec::new();
    for (line, rec) in rdr.deserialize::<ProfileRecord>().enumerate() {
        let rec = rec
            .map_err(|e| ExperimentError::MalformedProfile(format!("record {}: {e}", line + 1)))?;
        if rec.evcs == 0 || rec.slot == 0 {
            return Err(ExperimentError::MalformedProfile(format!(
                "record {}: indices are 1-based",
                line + 1
            )));
        }
        if !(rec.energy_mwh >= 0.0 && rec.energy_mwh.is_finite()) {
            return Err(ExperimentError::MalformedProfile(format!(
                "record {}: energy must be finite and >= 0",
                line + 1
            )));
        }
        records.push(rec);
    }
    let n = records.iter().map(|r| r.evcs).max().unwrap_or(0);
    let slots = records.iter().map(|r| r.slot).max().unwrap_or(0);
    if n == 0 {
        return Err(ExperimentError::MalformedProfile("no records".into()));
    }
    let mut m: Vec<Vec<Option<f64>>> = vec![vec![None; slots]; n];
    for r in records {
        let cell = &mut m[r.evcs - 1][r.slot - 1];
        if cell.is_some() {
            return Err(ExperimentError::MalformedProfile(format!(
                "station {} slot {} given twice",
                r.evcs, r.slot
            )));
        }
        *cell = Some(r.energy_mwh);
    }
    m.into_iter()
        .enumerate()
        .map(|(i, row)| {
            row.into_iter()
                .enumerate()
                .map(|(t, v)| {
                    v.ok_or_else(|| {
                        ExperimentError::MalformedProfile(format!(
                            "station {} slot {} missing",
                            i + 1,
                            t + 1
                        ))
                    })
                })
                .collect()
        })
        .collect()
}

pub fn read_profile_csv(path: &Path) -> Result<Profile> {
    parse_profile_csv(std::fs::File::open(path)?)
}

pub fn write_profile_csv<W: io::Write>(profile: &[Vec<f64>], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for (i, row) in profile.iter().enumerate() {
        for (t, e) in row.iter().enumerate() {
            w.serialize(ProfileRecord {
                evcs: i + 1,
                slot: t + 1,
                energy_mwh: *e,
            })
            .map_err(|e| ExperimentError::MalformedProfile(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}

// -------------------------------------------------------------- toll sweep

/// `min, min + step, ..., max` (inclusive, up to rounding of the last step).
pub fn toll_grid(min: f64, max: f64, step: f64) -> Result<Vec<f64>> {
    if !(min.is_finite() && max.is_finite() && step > 0.0 && step.is_finite())
        || min < 0.0
        || max < min
    {
        return Err(ExperimentError::InvalidInput(format!(
            "toll grid needs 0 <= min <= max and step > 0 (got {min}..{max} by {step})"
        )));
    }
    let count = ((max - min) / step + 1e-9).floor() as usize + 1;
    Ok((0..count).map(|k| min + k as f64 * step).collect())
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    /// Index of the tolled path.
    pub toll_path: usize,
    pub wardrop: WardropOptions<f64>,
    pub grid_aware: GridAwareOptions<f64>,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            toll_path: 2,
            wardrop: WardropOptions::default(),
            grid_aware: GridAwareOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub toll: f64,
    /// Vehicles of each class on each path (empty if the equilibrium failed).
    pub vehicles: Vec<Vec<f64>>,
    pub proportions: Vec<Vec<f64>>,
    pub equilibrium_gap: f64,
    pub needs_mwh: Vec<f64>,
    pub grid_cost: Vec<(Method, f64)>,
    /// Deviation from the grid-aware cost at zero toll.
    pub epsilon: Vec<(Method, f64)>,
    #[serde(skip)]
    pub schedules: Vec<(Method, LoadSchedule<f64>)>,
    pub failures: Vec<StageFailure>,
}

impl SweepPoint {
    pub fn cost(&self, method: Method) -> Option<f64> {
        lookup(&self.grid_cost, method)
    }

    pub fn epsilon(&self, method: Method) -> Option<f64> {
        lookup(&self.epsilon, method)
    }

    pub fn schedule(&self, method: Method) -> Option<&LoadSchedule<f64>> {
        self.schedules
            .iter()
            .find(|(m, _)| *m == method)
            .map(|(_, s)| s)
    }

    /// Total vehicles on `path`.
    pub fn path_flow(&self, path: usize) -> Option<f64> {
        if self.vehicles.is_empty() {
            return None;
        }
        Some(self.vehicles.iter().map(|row| row[path]).sum())
    }
}

fn lookup(v: &[(Method, f64)], method: Method) -> Option<f64> {
    v.iter().find(|(m, _)| *m == method).map(|(_, c)| *c)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TollSweepResult {
    pub toll_path: usize,
    pub classes: Vec<ClassKind>,
    pub total_vehicles: f64,
    /// Grid-aware cost at zero toll, the normalisation reference.
    pub reference_cost: Option<f64>,
    pub points: Vec<SweepPoint>,
}

impl TollSweepResult {
    pub fn tolls(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.toll).collect()
    }

    /// First toll at which the tolled path carries no traffic.
    pub fn detachment_toll(&self) -> Option<f64> {
        let empty = USED_PATH_THRESHOLD * self.total_vehicles;
        self.points
            .iter()
            .find(|p| p.path_flow(self.toll_path).is_some_and(|f| f <= empty))
            .map(|p| p.toll)
    }

    pub fn failure_count(&self) -> usize {
        self.points.iter().map(|p| p.failures.len()).sum()
    }
}

/// For each toll on `options.toll_path` (same for every class): equilibrium,
/// charging needs, the three schedules and their grid costs, normalised by
/// the grid-aware cost at zero toll. Failures are kept per point.
pub fn toll_sweep(
    scenario: &TransportScenario<f64>,
    grid: &GridModel<f64>,
    nonflexible: &[Vec<f64>],
    weights: &SlotWeights<f64>,
    tolls: &[f64],
    options: &SweepOptions,
) -> Result<TollSweepResult> {
    if tolls.is_empty() {
        return Err(ExperimentError::InvalidInput("toll grid is empty".into()));
    }
    if tolls.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(ExperimentError::InvalidInput(
            "tolls must be strictly increasing".into(),
        ));
    }
    if options.toll_path >= scenario.paths.len() {
        return Err(ExperimentError::InvalidInput(format!(
            "toll path {} does not exist",
            options.toll_path
        )));
    }
    scenario.validate()?;
    let model = PowerFlowModel::new(grid)?;

    let mut points: Vec<SweepPoint> = tolls
        .par_iter()
        .map(|&toll| sweep_point(scenario, &model, nonflexible, weights, toll, options))
        .collect();

    let reference_cost = match points.iter().find(|p| p.toll == 0.0) {
        Some(p) => p.cost(Method::GridAware),
        None => sweep_point(scenario, &model, nonflexible, weights, 0.0, options)
            .cost(Method::GridAware),
    };
    if let Some(reference) = reference_cost {
        for p in &mut points {
            p.epsilon = p
                .grid_cost
                .iter()
                .filter_map(|(m, c)| normalized_cost(*c, reference).ok().map(|e| (*m, e)))
                .collect();
        }
    }

    Ok(TollSweepResult {
        toll_path: options.toll_path,
        classes: scenario.classes.iter().map(|c| c.kind).collect(),
        total_vehicles: scenario.total_vehicles,
        reference_cost,
        points,
    })
}

fn sweep_point(
    scenario: &TransportScenario<f64>,
    model: &PowerFlowModel<f64>,
    nonflexible: &[Vec<f64>],
    weights: &SlotWeights<f64>,
    toll: f64,
    options: &SweepOptions,
) -> SweepPoint {
    let mut point = SweepPoint {
        toll,
        vehicles: Vec::new(),
        proportions: Vec::new(),
        equilibrium_gap: f64::NAN,
        needs_mwh: Vec::new(),
        grid_cost: Vec::new(),
        epsilon: Vec::new(),
        schedules: Vec::new(),
        failures: Vec::new(),
    };
    let tolled = scenario.clone().with_path_toll(options.toll_path, toll);
    let eq = match solve_wardrop_with(&tolled, &options.wardrop) {
        Ok(eq) => eq,
        Err(e) => {
            point.failures.push(StageFailure::new(
                "equilibrium",
                FailureKind::of_traffic(&e),
                &e,
            ));
            return point;
        }
    };
    point.proportions = eq.assignment.proportions.clone();
    point.vehicles = (0..tolled.classes.len())
        .map(|s| {
            (0..tolled.paths.len())
                .map(|i| eq.assignment.vehicles(&tolled, s, i))
                .collect()
        })
        .collect();
    point.equilibrium_gap = eq.equilibrium_gap;
    let needs = match charging_needs(&eq, &tolled) {
        Ok(n) => n,
        Err(e) => {
            point
                .failures
                .push(StageFailure::new("needs", FailureKind::of_traffic(&e), &e));
            return point;
        }
    };
    point.needs_mwh = needs.per_evcs_mwh.clone();

    for (method, outcome) in run_methods(model, nonflexible, &needs, weights, &options.grid_aware) {
        match outcome {
            Ok((schedule, cost)) => {
                point.grid_cost.push((method, cost));
                point.schedules.push((method, schedule));
            }
            Err(f) => point.failures.push(f),
        }
    }
    point
}

type MethodOutcome = std::result::Result<(LoadSchedule<f64>, f64), StageFailure>;

fn run_methods(
    model: &PowerFlowModel<f64>,
    nonflexible: &[Vec<f64>],
    needs: &ChargingNeeds<f64>,
    weights: &SlotWeights<f64>,
    grid_aware: &GridAwareOptions<f64>,
) -> Vec<(Method, MethodOutcome)> {
    Method::ALL
        .iter()
        .map(|&m| {
            (
                m,
                run_method(m, model, nonflexible, needs, weights, grid_aware),
            )
        })
        .collect()
}

fn run_method(
    method: Method,
    model: &PowerFlowModel<f64>,
    nonflexible: &[Vec<f64>],
    needs: &ChargingNeeds<f64>,
    weights: &SlotWeights<f64>,
    grid_aware: &GridAwareOptions<f64>,
) -> MethodOutcome {
    let stage = method.as_str();
    let schedule = schedule_with(method, model, nonflexible, needs, weights, grid_aware)
        .map_err(|e| StageFailure::schedule(stage, &e))?;
    let cost = model
        .grid_cost(&schedule, weights)
        .map_err(|e| StageFailure::new(stage, FailureKind::of_grid(&e), &e))?;
    Ok((schedule, cost))
}

/// Schedule of one method; grid-aware reuses the prepared power-flow model.
pub fn schedule_with(
    method: Method,
    model: &PowerFlowModel<f64>,
    nonflexible: &[Vec<f64>],
    needs: &ChargingNeeds<f64>,
    weights: &SlotWeights<f64>,
    grid_aware: &GridAwareOptions<f64>,
) -> std::result::Result<LoadSchedule<f64>, ScheduleError> {
    match method {
        Method::Local => schedule_local(nonflexible, needs, weights),
        Method::Global => schedule_global(nonflexible, needs, weights).map(|g| g.schedule),
        Method::GridAware => {
            schedule_grid_aware_with(model, nonflexible, needs, weights, grid_aware)
                .map(|o| o.schedule)
        }
    }
}

// --------------------------------------------------------------- benchmark

#[derive(Debug, Clone)]
pub struct BenchmarkOptions {
    pub slot_counts: Vec<usize>,
    /// Timing repetitions per method and profile; the median is kept.
    pub repetitions: usize,
    pub horizon_hours: f64,
    pub grid_aware: GridAwareOptions<f64>,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        BenchmarkOptions {
            slot_counts: vec![2, 4, 8],
            repetitions: 3,
            horizon_hours: crate::scheduling::DEFAULT_HORIZON_HOURS,
            grid_aware: GridAwareOptions::default(),
        }
    }
}

/// One profile at one slot count.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProfileRun {
    pub profile: usize,
    pub slots: usize,
    pub grid_cost: Vec<(Method, f64)>,
    pub epsilon: Vec<(Method, f64)>,
    pub seconds: Vec<(Method, f64)>,
    pub global_fallback: bool,
    pub failure: Option<StageFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkRow {
    pub slots: usize,
    pub samples: usize,
    pub failures: usize,
    pub mean_epsilon_local: f64,
    pub mean_epsilon_global: f64,
    pub mean_seconds_local: f64,
    pub mean_seconds_global: f64,
    pub mean_seconds_grid_aware: f64,
    /// Largest `G_a - min(G_l, G_g)` seen, MVA^2 (<= 0 when grid-aware dominates).
    pub max_dominance_excess: f64,
    pub global_fallbacks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkResult {
    pub seed: Option<u64>,
    pub profile_count: usize,
    pub needs_mwh: Vec<f64>,
    pub rows: Vec<BenchmarkRow>,
    pub runs: Vec<ProfileRun>,
}

impl BenchmarkResult {
    pub fn row(&self, slots: usize) -> Option<&BenchmarkRow> {
        self.rows.iter().find(|r| r.slots == slots)
    }
}

/// Runs the three methods on every profile at every slot count and averages
/// the grid-cost deviations from grid-aware and the median wall-clock times.
/// Runs are sequential so the timings do not compete for cores.
pub fn benchmark_methods(
    profiles: &[Profile],
    needs: &ChargingNeeds<f64>,
    grid: &GridModel<f64>,
    options: &BenchmarkOptions,
) -> Result<BenchmarkResult> {
    if profiles.is_empty() {
        return Err(ExperimentError::InvalidInput(
            "no profiles to benchmark".into(),
        ));
    }
    if options.slot_counts.is_empty() || options.slot_counts.contains(&0) {
        return Err(ExperimentError::InvalidInput(
            "slot counts must be >= 1".into(),
        ));
    }
    let model = PowerFlowModel::new(grid)?;
    let reps = options.repetitions.max(1);
    let mut runs = Vec::new();
    let mut rows = Vec::new();
    for &slots in &options.slot_counts {
        let weights = SlotWeights::uniform(slots, options.horizon_hours)?;
        let mut slot_runs = Vec::with_capacity(profiles.len());
        for (k, profile) in profiles.iter().enumerate() {
            let base = rebin(profile, slots)?;
            slot_runs.push(benchmark_one(
                k,
                &base,
                needs,
                &model,
                &weights,
                reps,
                &options.grid_aware,
            ));
        }
        rows.push(summarize(slots, &slot_runs));
        runs.extend(slot_runs);
    }
    Ok(BenchmarkResult {
        seed: None,
        profile_count: profiles.len(),
        needs_mwh: needs.per_evcs_mwh.clone(),
        rows,
        runs,
    })
}

/// Median wall-clock seconds of `reps` calls, and the last result.
fn timed<R>(reps: usize, mut f: impl FnMut() -> R) -> (R, f64) {
    let mut times = Vec::with_capacity(reps);
    let mut last = None;
    for _ in 0..reps {
        let start = Instant::now();
        let r = f();
        times.push(start.elapsed().as_secs_f64());
        last = Some(r);
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    (last.expect("reps >= 1"), times[times.len() / 2])
}

fn benchmark_one(
    profile: usize,
    base: &[Vec<f64>],
    needs: &ChargingNeeds<f64>,
    model: &PowerFlowModel<f64>,
    weights: &SlotWeights<f64>,
    reps: usize,
    grid_aware: &GridAwareOptions<f64>,
) -> ProfileRun {
    let mut run = ProfileRun {
        profile,
        slots: weights.slot_count(),
        grid_cost: Vec::new(),
        epsilon: Vec::new(),
        seconds: Vec::new(),
        global_fallback: false,
        failure: None,
    };
    let (local, t_l) = timed(reps, || schedule_local(base, needs, weights));
    let (global, t_g) = timed(reps, || schedule_global(base, needs, weights));
    let (aware, t_a) = timed(reps, || {
        schedule_grid_aware_with(model, base, needs, weights, grid_aware)
    });
    run.seconds = vec![
        (Method::Local, t_l),
        (Method::Global, t_g),
        (Method::GridAware, t_a),
    ];

    let outcome = (|| {
        let local = local.map_err(|e| StageFailure::schedule("local", &e))?;
        let global = global.map_err(|e| StageFailure::schedule("global", &e))?;
        let aware = aware.map_err(|e| StageFailure::schedule("grid-aware", &e))?;
        let cost = |s: &LoadSchedule<f64>, stage: &str| {
            model
                .grid_cost(s, weights)
                .map_err(|e| StageFailure::new(stage, FailureKind::of_grid(&e), &e))
        };
        let c_l = cost(&local, "local")?;
        let c_g = cost(&global.schedule, "global")?;
        Ok::<_, StageFailure>((c_l, c_g, aware.grid_cost, global.fallback_used))
    })();
    match outcome {
        Ok((c_l, c_g, c_a, fallback)) => {
            run.grid_cost = vec![
                (Method::Local, c_l),
                (Method::Global, c_g),
                (Method::GridAware, c_a),
            ];
            run.global_fallback = fallback;
            match (normalized_cost(c_l, c_a), normalized_cost(c_g, c_a)) {
                (Ok(e_l), Ok(e_g)) => {
                    run.epsilon = vec![
                        (Method::Local, e_l),
                        (Method::Global, e_g),
                        (Method::GridAware, 0.0),
                    ];
                }
                (Err(e), _) | (_, Err(e)) => {
                    run.failure = Some(StageFailure::schedule("normalize", &e))
                }
            }
        }
        Err(f) => run.failure = Some(f),
    }
    run
}

fn summarize(slots: usize, runs: &[ProfileRun]) -> BenchmarkRow {
    let ok: Vec<&ProfileRun> = runs.iter().filter(|r| r.failure.is_none()).collect();
    let mean = |f: &dyn Fn(&ProfileRun) -> f64| {
        if ok.is_empty() {
            f64::NAN
        } else {
            ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64
        }
    };
    let eps = |m: Method| move |r: &ProfileRun| lookup(&r.epsilon, m).unwrap_or(f64::NAN);
    let secs = |m: Method| move |r: &ProfileRun| lookup(&r.seconds, m).unwrap_or(f64::NAN);
    let excess = ok
        .iter()
        .map(|r| {
            let c = |m| lookup(&r.grid_cost, m).unwrap_or(f64::NAN);
            c(Method::GridAware) - c(Method::Local).min(c(Method::Global))
        })
        .fold(f64::NEG_INFINITY, f64::max);
    BenchmarkRow {
        slots,
        samples: ok.len(),
        failures: runs.len() - ok.len(),
        mean_epsilon_local: mean(&eps(Method::Local)),
        mean_epsilon_global: mean(&eps(Method::Global)),
        mean_seconds_local: mean(&secs(Method::Local)),
        mean_seconds_global: mean(&secs(Method::Global)),
        mean_seconds_grid_aware: mean(&secs(Method::GridAware)),
        max_dominance_excess: excess,
        global_fallbacks: ok.iter().filter(|r| r.global_fallback).count(),
    }
}

/// Charging needs at the equilibrium for a given toll on `toll_path`.
pub fn needs_at_toll(
    scenario: &TransportScenario<f64>,
    toll_path: usize,
    toll: f64,
    wardrop: &WardropOptions<f64>,
) -> Result<ChargingNeeds<f64>> {
    if toll_path >= scenario.paths.len() {
        return Err(ExperimentError::InvalidInput(format!(
            "toll path {toll_path} does not exist"
        )));
    }
    let tolled = scenario.clone().with_path_toll(toll_path, toll);
    let eq = solve_wardrop_with(&tolled, wardrop)?;
    Ok(charging_needs(&eq, &tolled)?)
}

/// Seeded benchmark: random profiles of `total_energy_mwh` on the grid's
/// stations and needs at `toll` on path 3.
pub fn seeded_benchmark(
    scenario: &TransportScenario<f64>,
    grid: &GridModel<f64>,
    seed: u64,
    count: usize,
    total_energy_mwh: f64,
    toll: f64,
    options: &BenchmarkOptions,
) -> Result<BenchmarkResult> {
    let needs = needs_at_toll(scenario, 2, toll, &WardropOptions::default())?;
    let profiles = generate_profiles(
        seed,
        count,
        total_energy_mwh,
        grid.evcs_count(),
        PROFILE_SLOTS,
    )?;
    let mut result = benchmark_methods(&profiles, &needs, grid, options)?;
    result.seed = Some(seed);
    Ok(result)
}

// ------------------------------------------------------------ illustration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoadComponent {
    Nonflexible,
    Flexible,
}

/// One bar segment of a stacked load profile.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlotRow {
    pub method: Method,
    /// 1-based station number, or "aggregate".
    pub evcs: String,
    /// 1-based slot number.
    pub slot: usize,
    pub component: LoadComponent,
    pub energy_mwh: f64,
    pub power_mw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Illustration {
    pub toll: f64,
    pub needs_mwh: Vec<f64>,
    pub grid_cost: Vec<(Method, f64)>,
    #[serde(skip)]
    pub schedules: Vec<(Method, LoadSchedule<f64>)>,
    pub rows: Vec<PlotRow>,
}

impl Illustration {
    pub fn schedule(&self, method: Method) -> Option<&LoadSchedule<f64>> {
        self.schedules
            .iter()
            .find(|(m, _)| *m == method)
            .map(|(_, s)| s)
    }
}

/// The three schedules of one profile at one toll, with stacked per-station
/// and aggregate profiles in long format.
pub fn profile_illustration(
    scenario: &TransportScenario<f64>,
    grid: &GridModel<f64>,
    nonflexible: &[Vec<f64>],
    weights: &SlotWeights<f64>,
    toll: f64,
    options: &SweepOptions,
) -> Result<Illustration> {
    let model = PowerFlowModel::new(grid)?;
    let needs = needs_at_toll(scenario, options.toll_path, toll, &options.wardrop)?;
    let mut schedules = Vec::new();
    let mut grid_cost = Vec::new();
    for method in Method::ALL {
        let s = schedule_with(
            method,
            &model,
            nonflexible,
            &needs,
            weights,
            &options.grid_aware,
        )?;
        grid_cost.push((method, model.grid_cost(&s, weights)?));
        schedules.push((method, s));
    }
    let hours = weights.slot_hours();
    let mut rows = Vec::new();
    for (method, s) in &schedules {
        let mut push = |evcs: String, slot: usize, component, energy: f64| {
            rows.push(PlotRow {
                method: *method,
                evcs,
                slot: slot + 1,
                component,
                energy_mwh: energy,
                power_mw: energy / hours,
            })
        };
        for i in 0..s.evcs_count() {
            for t in 0..s.slot_count() {
                push(
                    (i + 1).to_string(),
                    t,
                    LoadComponent::Nonflexible,
                    s.nonflexible[i][t],
                );
                push(
                    (i + 1).to_string(),
                    t,
                    LoadComponent::Flexible,
                    s.flexible[i][t],
                );
            }
        }
        let flex = s.aggregate_flexible();
        let total = s.aggregate_total();
        for t in 0..s.slot_count() {
            push(
                "aggregate".into(),
                t,
                LoadComponent::Nonflexible,
                total[t] - flex[t],
            );
            push("aggregate".into(), t, LoadComponent::Flexible, flex[t]);
        }
    }
    Ok(Illustration {
        toll,
        needs_mwh: needs.per_evcs_mwh,
        grid_cost,
        schedules,
        rows,
    })
}
