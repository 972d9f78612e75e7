//! Two-class commuting congestion game.
//!
//! Drivers of each vehicle class pick one of several parallel paths; the
//! path ends at a charging station. Travel time follows the BPR curve and the
//! class-specific driving cost adds energy and toll terms. The Wardrop
//! equilibrium is obtained by minimising the Beckmann potential with a
//! pairwise Frank-Wolfe method.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

/// Proportions above this value count as a used path.
pub const USED_PATH_THRESHOLD: f64 = 1e-6;
/// Default equilibrium gap tolerance, euros.
pub const DEFAULT_GAP_TOLERANCE: f64 = 1e-4;
pub const DEFAULT_MAX_ITERATIONS: usize = 10_000;

const KWH_PER_MWH: f64 = 1000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrafficError {
    #[error("path flow must be non-negative, got {0}")]
    NegativeFlow(f64),
    #[error("invalid scenario: {0}")]
    InvalidScenario(String),
    #[error("scenario has no electric vehicle class")]
    NoElectricClass,
    #[error("assignment shape {classes}x{paths} does not match the scenario")]
    ShapeMismatch { classes: usize, paths: usize },
    #[error(
        "Wardrop solver did not converge in {iterations} iterations (best gap {best_gap} EUR)"
    )]
    NotConverged { iterations: usize, best_gap: f64 },
}

pub type Result<T> = std::result::Result<T, TrafficError>;

/// Vehicle class identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassKind {
    /// Electric vehicle.
    Ev,
    /// Gasoline vehicle.
    Gv,
}

impl fmt::Display for ClassKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ClassKind::Ev => f.write_str("ev"),
            ClassKind::Gv => f.write_str("gv"),
        }
    }
}

/// One road path; path `i` ends at charging station `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSpec<T> {
    pub length_km: T,
    pub speed_limit_kmh: T,
    pub capacity_vehicles: T,
    /// Toll per class in euros. Missing classes pay nothing.
    pub tolls: BTreeMap<ClassKind, T>,
}

impl<T: Real> PathSpec<T> {
    pub fn new(length_km: T, speed_limit_kmh: T, capacity_vehicles: T) -> Self {
        PathSpec {
            length_km,
            speed_limit_kmh,
            capacity_vehicles,
            tolls: BTreeMap::new(),
        }
    }

    pub fn with_toll(mut self, class: ClassKind, toll: T) -> Self {
        self.tolls.insert(class, toll);
        self
    }

    /// Travel time at zero flow, hours.
    pub fn free_flow_hours(&self) -> T {
        self.length_km / self.speed_limit_kmh
    }

    pub fn toll(&self, class: ClassKind) -> T {
        self.tolls.get(&class).copied().unwrap_or_else(T::zero)
    }

    fn validate(&self, index: usize) -> Result<()> {
        let bad = |what: &str| {
            Err(TrafficError::InvalidScenario(format!(
                "paths[{index}].{what}"
            )))
        };
        if !(self.length_km > T::zero()) || !self.length_km.is_finite() {
            return bad("length_km (l_i) must be > 0");
        }
        if !(self.speed_limit_kmh > T::zero()) || !self.speed_limit_kmh.is_finite() {
            return bad("speed_limit_kmh (v_i) must be > 0");
        }
        if !(self.capacity_vehicles > T::zero()) || !self.capacity_vehicles.is_finite() {
            return bad("capacity_vehicles (C_i) must be > 0");
        }
        for (class, toll) in &self.tolls {
            if !(*toll >= T::zero()) || !toll.is_finite() {
                return bad(&format!("tolls.{class} (t_s,i) must be >= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleClassSpec<T> {
    pub kind: ClassKind,
    /// Share `X_s` of the population.
    pub population_share: T,
    /// kWh/km for EV, L/km for GV.
    pub consumption_per_km: T,
    /// EUR/kWh for EV, EUR/L for GV.
    pub energy_unit_price: T,
}

impl<T: Real> VehicleClassSpec<T> {
    /// Energy cost of driving `length_km`, euros.
    pub fn energy_cost(&self, length_km: T) -> T {
        length_km * self.consumption_per_km * self.energy_unit_price
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportScenario<T> {
    pub total_vehicles: T,
    /// Value of time `tau`, EUR/hour.
    pub time_value: T,
    pub classes: Vec<VehicleClassSpec<T>>,
    pub paths: Vec<PathSpec<T>>,
}

impl<T: Real> TransportScenario<T> {
    /// Three parallel paths, 3000 commuters, half of them electric.
    pub fn reference() -> Self {
        let l = T::lit;
        let paths = vec![
            PathSpec::new(l(30.0), l(50.0), l(3000.0)),
            PathSpec::new(l(20.0), l(50.0), l(3000.0)),
            PathSpec::new(l(20.0), l(70.0), l(3000.0)),
        ];
        TransportScenario {
            total_vehicles: l(3000.0),
            time_value: l(10.0),
            classes: vec![
                VehicleClassSpec {
                    kind: ClassKind::Ev,
                    population_share: l(0.5),
                    consumption_per_km: l(0.2),
                    energy_unit_price: l(0.20),
                },
                VehicleClassSpec {
                    kind: ClassKind::Gv,
                    population_share: l(0.5),
                    consumption_per_km: l(0.06),
                    energy_unit_price: l(1.5),
                },
            ],
            paths,
        }
    }

    /// Sets the same toll on `path` for every class.
    pub fn with_path_toll(mut self, path: usize, toll: T) -> Self {
        let kinds: Vec<ClassKind> = self.classes.iter().map(|c| c.kind).collect();
        for kind in kinds {
            self.paths[path].tolls.insert(kind, toll);
        }
        self
    }

    pub fn class_index(&self, kind: ClassKind) -> Option<usize> {
        self.classes.iter().position(|c| c.kind == kind)
    }

    /// Vehicle count of class `s`, `X_s N`.
    pub fn class_vehicles(&self, class: usize) -> T {
        self.classes[class].population_share * self.total_vehicles
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TrafficError::InvalidScenario(msg));
        if !(self.total_vehicles > T::zero()) || !self.total_vehicles.is_finite() {
            return bad("total_vehicles (N) must be > 0".into());
        }
        if !(self.time_value >= T::zero()) || !self.time_value.is_finite() {
            return bad("time_value (tau) must be >= 0".into());
        }
        if self.paths.is_empty() {
            return bad("at least one path is required".into());
        }
        if self.classes.is_empty() {
            return bad("at least one vehicle class is required".into());
        }
        for (i, p) in self.paths.iter().enumerate() {
            p.validate(i)?;
        }
        let mut share_sum = T::zero();
        for (s, c) in self.classes.iter().enumerate() {
            if self.classes[..s].iter().any(|o| o.kind == c.kind) {
                return bad(format!("classes[{s}]: duplicate class {}", c.kind));
            }
            if !(c.population_share >= T::zero() && c.population_share <= T::one()) {
                return bad(format!(
                    "classes[{s}].population_share (X_s) must lie in [0, 1]"
                ));
            }
            if !(c.consumption_per_km > T::zero()) || !c.consumption_per_km.is_finite() {
                return bad(format!("classes[{s}].consumption_per_km (m_s) must be > 0"));
            }
            if !(c.energy_unit_price > T::zero()) || !c.energy_unit_price.is_finite() {
                return bad(format!(
                    "classes[{s}].energy_unit_price (lambda_s) must be > 0"
                ));
            }
            share_sum = share_sum + c.population_share;
        }
        if (share_sum - T::one()).abs() > T::lit(1e-9) {
            return bad(format!(
                "population shares (X_s) must sum to 1, got {share_sum}"
            ));
        }
        Ok(())
    }
}

/// Per-class, per-path proportions `x_{s,i}`; each class row sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowAssignment<T> {
    pub proportions: Vec<Vec<T>>,
}

impl<T: Real> FlowAssignment<T> {
    /// Everyone of every class on `path`.
    pub fn all_on(classes: usize, paths: usize, path: usize) -> Self {
        let mut row = vec![T::zero(); paths];
        row[path] = T::one();
        FlowAssignment {
            proportions: vec![row; classes],
        }
    }

    /// Total vehicles on each path, `x_i`.
    pub fn path_flows(&self, scenario: &TransportScenario<T>) -> Vec<T> {
        let mut flows = vec![T::zero(); scenario.paths.len()];
        for (s, row) in self.proportions.iter().enumerate() {
            let mass = scenario.class_vehicles(s);
            for (f, x) in flows.iter_mut().zip(row) {
                *f = *f + *x * mass;
            }
        }
        flows
    }

    /// Vehicles of class `s` on path `i`.
    pub fn vehicles(&self, scenario: &TransportScenario<T>, class: usize, path: usize) -> T {
        self.proportions[class][path] * scenario.class_vehicles(class)
    }

    fn check_shape(&self, scenario: &TransportScenario<T>) -> Result<()> {
        let ok = self.proportions.len() == scenario.classes.len()
            && self
                .proportions
                .iter()
                .all(|r| r.len() == scenario.paths.len());
        if ok {
            Ok(())
        } else {
            Err(TrafficError::ShapeMismatch {
                classes: self.proportions.len(),
                paths: self.proportions.first().map_or(0, Vec::len),
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumResult<T> {
    pub assignment: FlowAssignment<T>,
    /// `c_{s,i}` at the equilibrium flows, euros.
    pub per_class_path_costs: Vec<Vec<T>>,
    pub equilibrium_gap: T,
    pub iterations: usize,
}

/// Energy to recharge at each station, MWh.
#[derive(Debug, Clone, PartialEq)]
pub struct ChargingNeeds<T> {
    pub per_evcs_mwh: Vec<T>,
}

impl<T: Real> ChargingNeeds<T> {
    pub fn total(&self) -> T {
        self.per_evcs_mwh.iter().copied().sum()
    }
}

/// BPR travel time `d0 (1 + 2 (x/C)^4)`, hours.
pub fn bpr_travel_time<T: Real>(path: &PathSpec<T>, total_flow: T) -> Result<T> {
    if !(total_flow >= T::zero()) {
        return Err(TrafficError::NegativeFlow(total_flow.to_f64_lossy()));
    }
    let ratio = total_flow / path.capacity_vehicles;
    Ok(path.free_flow_hours() * (T::one() + T::lit(2.0) * ratio.powi(4)))
}

/// Driving cost of one vehicle of `class` on `path`, euros.
pub fn driving_cost<T: Real>(
    class: &VehicleClassSpec<T>,
    path: &PathSpec<T>,
    total_flow: T,
    scenario: &TransportScenario<T>,
) -> Result<T> {
    let time = bpr_travel_time(path, total_flow)?;
    Ok(scenario.time_value * time + class.energy_cost(path.length_km) + path.toll(class.kind))
}

/// `c_{s,i}` for every class and path at the flows induced by `assignment`.
pub fn class_path_costs<T: Real>(
    scenario: &TransportScenario<T>,
    assignment: &FlowAssignment<T>,
) -> Result<Vec<Vec<T>>> {
    assignment.check_shape(scenario)?;
    let flows = assignment.path_flows(scenario);
    costs_at(scenario, &flows)
}

fn costs_at<T: Real>(scenario: &TransportScenario<T>, flows: &[T]) -> Result<Vec<Vec<T>>> {
    scenario
        .classes
        .iter()
        .map(|class| {
            scenario
                .paths
                .iter()
                .zip(flows)
                .map(|(path, &f)| driving_cost(class, path, f.max(T::zero()), scenario))
                .collect()
        })
        .collect()
}

/// Largest over classes of (worst used-path cost minus cheapest path cost).
pub fn equilibrium_gap<T: Real>(
    scenario: &TransportScenario<T>,
    assignment: &FlowAssignment<T>,
) -> Result<T> {
    let costs = class_path_costs(scenario, assignment)?;
    Ok(gap_from_costs(&assignment.proportions, &costs))
}

fn gap_from_costs<T: Real>(proportions: &[Vec<T>], costs: &[Vec<T>]) -> T {
    let used = T::lit(USED_PATH_THRESHOLD);
    proportions
        .iter()
        .zip(costs)
        .map(|(row, c)| {
            let min = c.iter().copied().fold(T::infinity(), T::min);
            let worst_used = row
                .iter()
                .zip(c)
                .filter(|(x, _)| **x > used)
                .map(|(_, c)| *c)
                .fold(min, T::max);
            worst_used - min
        })
        .fold(T::zero(), T::max)
}

/// Beckmann potential, euros:
/// `sum_i int_0^{x_i} tau d_i(u) du + sum_{s,i} (l_i m_s lambda_s + t_{s,i}) x_{s,i} X_s N`.
pub fn beckmann_potential<T: Real>(
    scenario: &TransportScenario<T>,
    assignment: &FlowAssignment<T>,
) -> Result<T> {
    assignment.check_shape(scenario)?;
    let flows = assignment.path_flows(scenario);
    let five = T::lit(5.0);
    let mut value = T::zero();
    for (path, &f) in scenario.paths.iter().zip(&flows) {
        let c4 = path.capacity_vehicles.powi(4);
        value = value
            + scenario.time_value
                * path.free_flow_hours()
                * (f + T::lit(2.0) * f.powi(5) / (five * c4));
    }
    for (s, class) in scenario.classes.iter().enumerate() {
        for (i, path) in scenario.paths.iter().enumerate() {
            let fixed = class.energy_cost(path.length_km) + path.toll(class.kind);
            value = value + fixed * assignment.vehicles(scenario, s, i);
        }
    }
    Ok(value)
}

#[derive(Debug, Clone, Copy)]
pub struct WardropOptions<T> {
    pub tolerance: T,
    pub max_iterations: usize,
}

impl<T: Real> Default for WardropOptions<T> {
    fn default() -> Self {
        WardropOptions {
            tolerance: T::lit(DEFAULT_GAP_TOLERANCE),
            max_iterations: DEFAULT_MAX_ITERATIONS,
        }
    }
}

/// Wardrop equilibrium with the default iteration cap.
pub fn solve_wardrop<T: Real>(
    scenario: &TransportScenario<T>,
    tolerance: T,
) -> Result<EquilibriumResult<T>> {
    solve_wardrop_with(
        scenario,
        &WardropOptions {
            tolerance,
            ..WardropOptions::default()
        },
    )
}

/// Pairwise Frank-Wolfe on the Beckmann potential.
///
/// Every class with a positive gap shifts mass from its most expensive used
/// path to its cheapest path; all classes move the same number of vehicles,
/// chosen by exact line search. Before that, two classes whose preferences
/// between a pair of paths differ trade places outright, since a trade leaves
/// every path flow unchanged. Starting from the free-flow all-or-nothing
/// assignment, equally large classes that rank paths identically keep
/// identical splits.
pub fn solve_wardrop_with<T: Real>(
    scenario: &TransportScenario<T>,
    options: &WardropOptions<T>,
) -> Result<EquilibriumResult<T>> {
    scenario.validate()?;
    if !(options.tolerance > T::zero()) {
        return Err(TrafficError::InvalidScenario(
            "equilibrium tolerance must be > 0".into(),
        ));
    }
    let n_paths = scenario.paths.len();
    let n_classes = scenario.classes.len();
    let masses: Vec<T> = (0..n_classes).map(|s| scenario.class_vehicles(s)).collect();

    let free_costs = costs_at(scenario, &vec![T::zero(); n_paths])?;
    let mut x: Vec<Vec<T>> = free_costs
        .iter()
        .map(|c| {
            let mut row = vec![T::zero(); n_paths];
            row[argmin(c)] = T::one();
            row
        })
        .collect();

    let mut best_gap = T::infinity();
    for iteration in 0..=options.max_iterations {
        let flows = path_flows(&x, &masses);
        let costs = costs_at(scenario, &flows)?;
        let gap = gap_from_costs(&x, &costs);
        best_gap = best_gap.min(gap);
        if gap <= options.tolerance {
            // massless classes simply sit on their cheapest path
            for (s, row) in x.iter_mut().enumerate() {
                if masses[s] == T::zero() {
                    row.iter_mut().for_each(|v| *v = T::zero());
                    row[argmin(&costs[s])] = T::one();
                }
            }
            return Ok(EquilibriumResult {
                assignment: FlowAssignment { proportions: x },
                per_class_path_costs: costs,
                equilibrium_gap: gap,
                iterations: iteration,
            });
        }
        if iteration == options.max_iterations {
            break;
        }

        let half_tol = options.tolerance / T::lit(2.0);
        // two classes trading places leave path flows, and so congestion,
        // unchanged; without this, class-specific tolls can make the
        // single-class moves zig-zag towards the swap in tiny steps
        if let Some((s, r, i, j)) = best_swap(&x, &costs, half_tol) {
            let (a, b) = (x[s][i] * masses[s], x[r][j] * masses[r]);
            let step = a.min(b);
            for (class, from, to, avail) in [(s, i, j, a), (r, j, i, b)] {
                let share = if avail == step {
                    x[class][from]
                } else {
                    (step / masses[class]).min(x[class][from])
                };
                x[class][from] = x[class][from] - share;
                x[class][to] = x[class][to] + share;
            }
            continue;
        }

        // (class, source, target) moves
        let moves: Vec<(usize, usize, usize)> = (0..n_classes)
            .filter(|&s| masses[s] > T::zero())
            .filter_map(|s| {
                let target = argmin(&costs[s]);
                let source = (0..n_paths)
                    .filter(|&i| x[s][i] > T::zero())
                    .max_by(|&a, &b| costs[s][a].partial_cmp(&costs[s][b]).unwrap())?;
                (costs[s][source] - costs[s][target] > half_tol).then_some((s, source, target))
            })
            .collect();
        if moves.is_empty() {
            // only sub-threshold residue remains on costly paths; clear it
            for s in 0..n_classes {
                let target = argmin(&costs[s]);
                let used = T::lit(USED_PATH_THRESHOLD);
                for i in 0..n_paths {
                    if i != target && x[s][i] <= used && costs[s][i] - costs[s][target] > half_tol {
                        x[s][target] = x[s][target] + x[s][i];
                        x[s][i] = T::zero();
                    }
                }
            }
            continue;
        }

        // every moving class shifts the same number of vehicles, so opposite
        // moves of two classes can swap paths without changing path flows
        let step_max = moves
            .iter()
            .map(|&(s, src, _)| x[s][src] * masses[s])
            .fold(T::infinity(), T::min);
        let mut delta = vec![T::zero(); n_paths];
        for &(_, src, tgt) in &moves {
            delta[src] = delta[src] - T::one();
            delta[tgt] = delta[tgt] + T::one();
        }
        let slope = |step: T| -> Result<T> {
            let shifted: Vec<T> = flows
                .iter()
                .zip(&delta)
                .map(|(f, d)| (*f + step * *d).max(T::zero()))
                .collect();
            let c = costs_at(scenario, &shifted)?;
            Ok(moves
                .iter()
                .map(|&(s, src, tgt)| c[s][tgt] - c[s][src])
                .sum())
        };

        let step = if slope(step_max)? <= T::zero() {
            step_max
        } else {
            let (mut lo, mut hi) = (T::zero(), step_max);
            for _ in 0..200 {
                let mid = (lo + hi) / T::lit(2.0);
                if mid <= lo || mid >= hi {
                    break;
                }
                if slope(mid)? <= T::zero() {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lo
        };

        for &(s, src, tgt) in &moves {
            if step == step_max && x[s][src] * masses[s] == step_max {
                x[s][tgt] = x[s][tgt] + x[s][src];
                x[s][src] = T::zero();
            } else {
                let share = (step / masses[s]).min(x[s][src]);
                x[s][src] = x[s][src] - share;
                x[s][tgt] = x[s][tgt] + share;
            }
        }
    }
    Err(TrafficError::NotConverged {
        iterations: options.max_iterations,
        best_gap: best_gap.to_f64_lossy(),
    })
}

/// Most profitable exchange: class `s` moves from path `i` to `j` while class
/// `r` moves from `j` to `i`, the same number of vehicles each.
fn best_swap<T: Real>(
    x: &[Vec<T>],
    costs: &[Vec<T>],
    threshold: T,
) -> Option<(usize, usize, usize, usize)> {
    let mut best = None;
    let mut best_gain = threshold;
    for (s, r) in (0..x.len()).flat_map(|s| (0..x.len()).map(move |r| (s, r))) {
        if s == r {
            continue;
        }
        for i in (0..x[s].len()).filter(|&i| x[s][i] > T::zero()) {
            for j in (0..x[r].len()).filter(|&j| j != i && x[r][j] > T::zero()) {
                let gain = costs[s][i] - costs[s][j] + costs[r][j] - costs[r][i];
                if gain > best_gain {
                    best_gain = gain;
                    best = Some((s, r, i, j));
                }
            }
        }
    }
    best
}

fn path_flows<T: Real>(x: &[Vec<T>], masses: &[T]) -> Vec<T> {
    let mut flows = vec![T::zero(); x[0].len()];
    for (row, &m) in x.iter().zip(masses) {
        for (f, v) in flows.iter_mut().zip(row) {
            *f = *f + *v * m;
        }
    }
    flows
}

fn argmin<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v < values[best] {
            best = i;
        }
    }
    best
}

/// Energy each station must deliver, `L_i = l_i m_e x_{e,i} X_e N`, converted to MWh.
pub fn charging_needs<T: Real>(
    equilibrium: &EquilibriumResult<T>,
    scenario: &TransportScenario<T>,
) -> Result<ChargingNeeds<T>> {
    let ev = scenario
        .class_index(ClassKind::Ev)
        .ok_or(TrafficError::NoElectricClass)?;
    equilibrium.assignment.check_shape(scenario)?;
    let class = &scenario.classes[ev];
    let per_evcs_mwh = scenario
        .paths
        .iter()
        .enumerate()
        .map(|(i, path)| {
            path.length_km
                * class.consumption_per_km
                * equilibrium.assignment.vehicles(scenario, ev, i)
                / T::lit(KWH_PER_MWH)
        })
        .collect();
    Ok(ChargingNeeds { per_evcs_mwh })
}
