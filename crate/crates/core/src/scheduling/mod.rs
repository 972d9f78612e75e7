//! Charging schedulers for the three operator scenarios.
//!
//! * local: every station water-fills its own load profile,
//! * global: the aggregate is water-filled and disaggregated per station,
//! * grid-aware: the head apparent power cost is minimised directly
//!   (see [`grid_aware`]).
//!
//! Energies are MWh per slot. Schedules are `stations x slots` matrices.

mod global;
pub mod grid_aware;

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::GridError;
use crate::scalar::{sum, Real, Scalar};
use crate::traffic::ChargingNeeds;

pub use global::{project_transport_polytope, schedule_global, GlobalSchedule};
pub use grid_aware::{schedule_grid_aware, GridAwareOptions, GridAwareOutcome};

/// Negative entries down to this size count as numerical zero.
pub const FEASIBILITY_TOLERANCE: f64 = 1e-9;
/// Default charging window, hours.
pub const DEFAULT_HORIZON_HOURS: f64 = 8.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("charging need must be non-negative{}", station(.evcs))]
    NegativeNeed { evcs: Option<usize> },
    #[error("nonflexible load must be non-negative (slot {slot}){}", station(.evcs))]
    NegativeNonflexible { evcs: Option<usize>, slot: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid slot weights: {0}")]
    InvalidWeights(String),
    #[error("reference grid cost must be > 0, got {0}")]
    NonPositiveReference(f64),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("grid-aware optimizer stopped after {iterations} iterations without converging (best cost {best_cost})")]
    NotConverged {
        iterations: usize,
        best_cost: f64,
        best_flexible: Vec<Vec<f64>>,
    },
}

fn station(evcs: &Option<usize>) -> String {
    evcs.map(|i| format!(" at station {i}")).unwrap_or_default()
}

impl ScheduleError {
    fn at_station(self, i: usize) -> Self {
        match self {
            ScheduleError::NegativeNeed { .. } => ScheduleError::NegativeNeed { evcs: Some(i) },
            ScheduleError::NegativeNonflexible { slot, .. } => ScheduleError::NegativeNonflexible {
                evcs: Some(i),
                slot,
            },
            e => e,
        }
    }
}

pub type Result<T> = std::result::Result<T, ScheduleError>;

/// Scheduling method, named after the operator running it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Local,
    Global,
    GridAware,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Local, Method::Global, Method::GridAware];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Local => "local",
            Method::Global => "global",
            Method::GridAware => "grid-aware",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Slot weights `eta_t` and the length of the charging window.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotWeights<T> {
    weights: Vec<T>,
    horizon_hours: T,
}

impl<T: Scalar> SlotWeights<T> {
    pub fn new(weights: Vec<T>, horizon_hours: T) -> Result<Self> {
        if weights.is_empty() {
            return Err(ScheduleError::InvalidWeights(
                "at least one slot required".into(),
            ));
        }
        if let Some(t) = weights.iter().position(|w| !(w.clone() > T::zero())) {
            return Err(ScheduleError::InvalidWeights(format!(
                "weight of slot {t} must be > 0"
            )));
        }
        if !(horizon_hours > T::zero()) {
            return Err(ScheduleError::InvalidWeights(
                "horizon must be > 0 hours".into(),
            ));
        }
        Ok(SlotWeights {
            weights,
            horizon_hours,
        })
    }

    /// `slots` equal weights of one.
    pub fn uniform(slots: usize, horizon_hours: T) -> Result<Self> {
        Self::new(vec![T::one(); slots], horizon_hours)
    }

    pub fn slot_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn horizon_hours(&self) -> T {
        self.horizon_hours.clone()
    }

    /// Duration of one slot, hours.
    pub fn slot_hours(&self) -> T {
        let mut n = T::zero();
        for _ in 0..self.weights.len() {
            n = n + T::one();
        }
        self.horizon_hours.clone() / n
    }
}

/// Nonflexible and flexible energy per station and slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadSchedule<T> {
    pub nonflexible: Vec<Vec<T>>,
    pub flexible: Vec<Vec<T>>,
}

impl<T: Scalar> LoadSchedule<T> {
    pub fn new(nonflexible: Vec<Vec<T>>, flexible: Vec<Vec<T>>) -> Result<Self> {
        check_matrix(&nonflexible)?;
        let same = nonflexible.len() == flexible.len()
            && nonflexible
                .iter()
                .zip(&flexible)
                .all(|(a, b)| a.len() == b.len());
        if !same {
            return Err(ScheduleError::DimensionMismatch(
                "flexible and nonflexible matrices differ in shape".into(),
            ));
        }
        Ok(LoadSchedule {
            nonflexible,
            flexible,
        })
    }

    pub fn evcs_count(&self) -> usize {
        self.nonflexible.len()
    }

    pub fn slot_count(&self) -> usize {
        self.nonflexible.first().map_or(0, Vec::len)
    }

    /// `l^tot_{i,t}`.
    pub fn total(&self, evcs: usize, slot: usize) -> T {
        self.nonflexible[evcs][slot].clone() + self.flexible[evcs][slot].clone()
    }

    pub fn totals(&self) -> Vec<Vec<T>> {
        (0..self.evcs_count())
            .map(|i| (0..self.slot_count()).map(|t| self.total(i, t)).collect())
            .collect()
    }

    /// `sum_i l^tot_{i,t}` per slot.
    pub fn aggregate_total(&self) -> Vec<T> {
        (0..self.slot_count())
            .map(|t| (0..self.evcs_count()).fold(T::zero(), |a, i| a + self.total(i, t)))
            .collect()
    }

    /// `sum_i l_{i,t}` per slot.
    pub fn aggregate_flexible(&self) -> Vec<T> {
        (0..self.slot_count())
            .map(|t| {
                self.flexible
                    .iter()
                    .fold(T::zero(), |a, row| a + row[t].clone())
            })
            .collect()
    }

    /// `sum_t l_{i,t}` per station.
    pub fn delivered(&self) -> Vec<T> {
        self.flexible.iter().map(|r| sum(r)).collect()
    }
}

impl<T: Real> LoadSchedule<T> {
    /// Largest violation of `sum_t l_{i,t} = L_i` and `l_{i,t} >= 0`, MWh.
    pub fn feasibility_violation(&self, needs: &[T]) -> T {
        let sums = self
            .delivered()
            .iter()
            .zip(needs)
            .fold(T::zero(), |m, (d, l)| m.max((*d - *l).abs()));
        let neg = self
            .flexible
            .iter()
            .flatten()
            .fold(T::zero(), |m, v| m.max(-*v));
        sums.max(neg)
    }

    /// `sum_t eta_t (l^tot_{i,t})^2` for one station.
    pub fn local_objective(&self, evcs: usize, weights: &SlotWeights<T>) -> T {
        (0..self.slot_count())
            .map(|t| {
                let x = self.total(evcs, t);
                weights.weights()[t] * x * x
            })
            .sum()
    }

    /// `sum_t eta_t (sum_i l^tot_{i,t})^2`.
    pub fn global_objective(&self, weights: &SlotWeights<T>) -> T {
        self.aggregate_total()
            .iter()
            .zip(weights.weights())
            .map(|(x, w)| *w * *x * *x)
            .sum()
    }
}

fn check_matrix<T>(m: &[Vec<T>]) -> Result<()> {
    if m.is_empty() {
        return Err(ScheduleError::DimensionMismatch("no stations".into()));
    }
    let slots = m[0].len();
    if slots == 0 || m.iter().any(|r| r.len() != slots) {
        return Err(ScheduleError::DimensionMismatch(
            "every station needs the same, nonzero number of slots".into(),
        ));
    }
    Ok(())
}

fn check_inputs<T: Scalar>(
    nonflexible: &[Vec<T>],
    needs: &ChargingNeeds<T>,
    weights: &SlotWeights<T>,
) -> Result<()> {
    check_matrix(nonflexible)?;
    if nonflexible.len() != needs.per_evcs_mwh.len() {
        return Err(ScheduleError::DimensionMismatch(format!(
            "{} nonflexible rows for {} charging needs",
            nonflexible.len(),
            needs.per_evcs_mwh.len()
        )));
    }
    if nonflexible[0].len() != weights.slot_count() {
        return Err(ScheduleError::DimensionMismatch(format!(
            "{} slots in the profile, {} weights",
            nonflexible[0].len(),
            weights.slot_count()
        )));
    }
    Ok(())
}

/// Minimiser of `sum_t eta_t (l0_t + l_t)^2` subject to `sum_t l_t = need`
/// and `l_t >= 0`.
///
/// Slots are ranked by `eta_t l0_t`. With `Lambda_t = sum_{s<=t} 1/eta_s`
/// and `L0_t` the cumulative nonflexible load in that order, slot `t`
/// starts receiving charge once the need exceeds
/// `eta_t Lambda_t l0_t - L0_t`; the active slots share the common level
/// `(need + L0_{t0}) / Lambda_{t0}` of `eta_t (l0_t + l_t)`.
pub fn waterfill<T: Scalar>(
    nonflexible: &[T],
    need: T,
    weights: &SlotWeights<T>,
) -> Result<Vec<T>> {
    let n = nonflexible.len();
    if n != weights.slot_count() {
        return Err(ScheduleError::DimensionMismatch(format!(
            "{n} slots in the profile, {} weights",
            weights.slot_count()
        )));
    }
    if !(need >= T::zero()) {
        return Err(ScheduleError::NegativeNeed { evcs: None });
    }
    if let Some(slot) = nonflexible.iter().position(|l| !(l.clone() >= T::zero())) {
        return Err(ScheduleError::NegativeNonflexible { evcs: None, slot });
    }
    let eta = weights.weights();
    let mut out = vec![T::zero(); n];
    if need == T::zero() {
        return Ok(out);
    }

    let level_of = |t: usize| eta[t].clone() * nonflexible[t].clone();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        level_of(a)
            .partial_cmp(&level_of(b))
            .unwrap_or(Ordering::Equal)
    });

    // cumulative sums in sorted order, up to the last slot whose threshold is below the need
    let mut cum_load = T::zero();
    let mut cum_inv_eta = T::zero();
    let mut active = (T::zero(), T::one(), 0usize);
    for (k, &t) in order.iter().enumerate() {
        cum_load = cum_load + nonflexible[t].clone();
        cum_inv_eta = cum_inv_eta + T::one() / eta[t].clone();
        let threshold = level_of(t) * cum_inv_eta.clone() - cum_load.clone();
        if threshold < need {
            active = (cum_load.clone(), cum_inv_eta.clone(), k + 1);
        } else {
            break;
        }
    }
    let (load, inv_eta, count) = active;
    let level = (need + load) / inv_eta;
    for &t in &order[..count] {
        let x = level.clone() / eta[t].clone() - nonflexible[t].clone();
        out[t] = if x > T::zero() { x } else { T::zero() };
    }
    Ok(out)
}

/// Every station water-fills its own profile.
pub fn schedule_local<T: Scalar>(
    nonflexible: &[Vec<T>],
    needs: &ChargingNeeds<T>,
    weights: &SlotWeights<T>,
) -> Result<LoadSchedule<T>> {
    check_inputs(nonflexible, needs, weights)?;
    let flexible = nonflexible
        .iter()
        .zip(&needs.per_evcs_mwh)
        .enumerate()
        .map(|(i, (row, need))| waterfill(row, need.clone(), weights).map_err(|e| e.at_station(i)))
        .collect::<Result<Vec<_>>>()?;
    LoadSchedule::new(nonflexible.to_vec(), flexible)
}

/// Water-filling of the aggregate: `(sum_i l0_{i,t})_t` and `sum_i L_i`.
pub fn aggregate_waterfill<T: Scalar>(
    nonflexible: &[Vec<T>],
    needs: &ChargingNeeds<T>,
    weights: &SlotWeights<T>,
) -> Result<Vec<T>> {
    check_inputs(nonflexible, needs, weights)?;
    let slots = nonflexible[0].len();
    let agg: Vec<T> = (0..slots)
        .map(|t| nonflexible.iter().fold(T::zero(), |a, r| a + r[t].clone()))
        .collect();
    if let Some(i) = needs
        .per_evcs_mwh
        .iter()
        .position(|l| !(l.clone() >= T::zero()))
    {
        return Err(ScheduleError::NegativeNeed { evcs: Some(i) });
    }
    waterfill(&agg, sum(&needs.per_evcs_mwh), weights)
}

/// `(G_m - G_ref) / G_ref`.
pub fn normalized_cost<T: Real>(cost: T, reference: T) -> Result<T> {
    if !(reference > T::zero()) {
        return Err(ScheduleError::NonPositiveReference(
            reference.to_f64_lossy(),
        ));
    }
    Ok((cost - reference) / reference)
}

/// Grid cost of each method and its normalised deviation from a reference.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub cost_by_method: Vec<(Method, f64)>,
    pub normalized: Vec<(Method, f64)>,
    pub reference_method: Method,
    pub reference_toll: f64,
    pub reference_cost: f64,
}

impl CostReport {
    pub fn new(
        costs: &[(Method, f64)],
        reference_method: Method,
        reference_toll: f64,
        reference_cost: f64,
    ) -> Result<Self> {
        let normalized = costs
            .iter()
            .map(|(m, c)| Ok((*m, normalized_cost(*c, reference_cost)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(CostReport {
            cost_by_method: costs.to_vec(),
            normalized,
            reference_method,
            reference_toll,
            reference_cost,
        })
    }

    pub fn cost(&self, method: Method) -> Option<f64> {
        self.cost_by_method
            .iter()
            .find(|(m, _)| *m == method)
            .map(|(_, c)| *c)
    }

    pub fn epsilon(&self, method: Method) -> Option<f64> {
        self.normalized
            .iter()
            .find(|(m, _)| *m == method)
            .map(|(_, c)| *c)
    }
}
