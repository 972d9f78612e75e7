//! Grid-aware scheduling: minimise `G = sum_t eta_t S_t^2` where `S_t` is the
//! head apparent power from an AC power flow of slot `t`.
//!
//! `G` separates by slot, so its Hessian is block diagonal (one
//! `stations x stations` block per slot). Each iteration estimates the
//! gradient by central differences and the blocks by second differences,
//! solves the quadratic model over the feasible set exactly (active-set QP),
//! and backtracks on the true cost.

use super::{
    schedule_global, schedule_local, LoadSchedule, Method, Result, ScheduleError, SlotWeights,
};
use crate::grid::{GridModel, PowerFlowModel};
use crate::linalg::DenseMatrix;
use crate::qp::solve_group_qp;
use crate::scalar::Real;
use crate::traffic::ChargingNeeds;

#[derive(Debug, Clone, Copy)]
pub struct GridAwareOptions<T> {
    /// Central-difference step for the gradient, MWh.
    pub gradient_step: T,
    /// Second-difference step for the Hessian blocks, MWh.
    pub hessian_step: T,
    /// Stop once an accepted step improves `G` by less than this fraction.
    pub relative_tolerance: T,
    pub feasibility_tolerance: T,
    pub max_iterations: usize,
}

impl<T: Real> Default for GridAwareOptions<T> {
    fn default() -> Self {
        GridAwareOptions {
            gradient_step: T::lit(1e-4),
            hessian_step: T::lit(1e-2),
            relative_tolerance: T::lit(1e-8),
            feasibility_tolerance: T::lit(super::FEASIBILITY_TOLERANCE),
            max_iterations: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridAwareOutcome<T> {
    pub schedule: LoadSchedule<T>,
    pub grid_cost: T,
    pub iterations: usize,
    /// Which heuristic schedule the optimizer started from.
    pub started_from: Method,
}

pub fn schedule_grid_aware<T: Real>(
    grid: &GridModel<T>,
    nonflexible: &[Vec<T>],
    needs: &ChargingNeeds<T>,
    weights: &SlotWeights<T>,
) -> Result<GridAwareOutcome<T>> {
    let model = PowerFlowModel::new(grid)?;
    schedule_grid_aware_with(
        &model,
        nonflexible,
        needs,
        weights,
        &GridAwareOptions::default(),
    )
}

/// Starts from the global schedule (or the local one if that is already
/// cheaper for the grid) and descends from there.
pub fn schedule_grid_aware_with<T: Real>(
    model: &PowerFlowModel<T>,
    nonflexible: &[Vec<T>],
    needs: &ChargingNeeds<T>,
    weights: &SlotWeights<T>,
    options: &GridAwareOptions<T>,
) -> Result<GridAwareOutcome<T>> {
    let global = schedule_global(nonflexible, needs, weights)?.schedule;
    let local = schedule_local(nonflexible, needs, weights)?;
    let g_cost = model.grid_cost(&global, weights)?;
    let l_cost = model.grid_cost(&local, weights)?;
    let (start, method) = if l_cost < g_cost {
        (local, Method::Local)
    } else {
        (global, Method::Global)
    };
    let mut out = optimize_from(model, start, &needs.per_evcs_mwh, weights, options)?;
    out.started_from = method;
    Ok(out)
}

/// Local descent of `G` from a feasible schedule.
pub fn optimize_from<T: Real>(
    model: &PowerFlowModel<T>,
    start: LoadSchedule<T>,
    needs: &[T],
    weights: &SlotWeights<T>,
    options: &GridAwareOptions<T>,
) -> Result<GridAwareOutcome<T>> {
    let n = start.evcs_count();
    let slots = start.slot_count();
    if needs.len() != n || weights.slot_count() != slots {
        return Err(ScheduleError::DimensionMismatch(
            "start schedule does not match needs/weights".into(),
        ));
    }
    let hours = weights.slot_hours();
    let eta = weights.weights();
    let base = start.nonflexible.clone();
    let idx = |i: usize, t: usize| i * slots + t;
    let mut x: Vec<T> = start.flexible.iter().flatten().copied().collect();

    let slot_totals =
        |x: &[T], t: usize| -> Vec<T> { (0..n).map(|i| base[i][t] + x[idx(i, t)]).collect() };
    let cost_of = |x: &[T]| -> Result<T> {
        let mut c = T::zero();
        for (t, w) in eta.iter().enumerate() {
            c = c + *w * model.slot_cost(&slot_totals(x, t), hours)?;
        }
        Ok(c)
    };
    let groups: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..slots).map(|t| idx(i, t)).collect())
        .collect();

    let mut cost = cost_of(&x)?;
    let h = options.gradient_step;
    let hh = options.hessian_step;
    let two = T::lit(2.0);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < options.max_iterations {
        iterations += 1;
        let mut grad = vec![T::zero(); n * slots];
        let mut hess = DenseMatrix::zeros(n * slots, n * slots);
        for t in 0..slots {
            let e = slot_totals(&x, t);
            let f = |d: &[(usize, T)]| -> Result<T> {
                let mut p = e.clone();
                for &(i, v) in d {
                    p[i] = p[i] + v;
                }
                Ok(eta[t] * model.slot_cost(&p, hours)?)
            };
            let f0 = f(&[])?;
            for i in 0..n {
                grad[idx(i, t)] = (f(&[(i, h)])? - f(&[(i, -h)])?) / (two * h);
                let d2 = (f(&[(i, hh)])? - two * f0 + f(&[(i, -hh)])?) / (hh * hh);
                hess.set(idx(i, t), idx(i, t), d2);
                for j in 0..i {
                    let d2 = (f(&[(i, hh), (j, hh)])?
                        - f(&[(i, hh), (j, -hh)])?
                        - f(&[(i, -hh), (j, hh)])?
                        + f(&[(i, -hh), (j, -hh)])?)
                        / (T::lit(4.0) * hh * hh);
                    hess.set(idx(i, t), idx(j, t), d2);
                    hess.set(idx(j, t), idx(i, t), d2);
                }
            }
        }
        regularize(&mut hess);

        let lower: Vec<T> = x.iter().map(|v| -*v).collect();
        let qp = solve_group_qp(&hess, &grad, &groups, &lower);
        let d = qp.x;
        let slope: T = grad.iter().zip(&d).map(|(g, d)| *g * *d).sum();
        if !(slope < -T::lit(1e-14) * cost.max(T::one())) {
            converged = true;
            break;
        }

        let mut alpha = T::one();
        let mut accepted = None;
        while alpha > T::lit(1e-10) {
            let trial: Vec<T> = x.iter().zip(&d).map(|(a, b)| *a + alpha * *b).collect();
            let c = cost_of(&trial)?;
            if c <= cost + T::lit(1e-4) * alpha * slope {
                accepted = Some((trial, c));
                break;
            }
            alpha = alpha / two;
        }
        let Some((trial, c)) = accepted else {
            converged = true;
            break;
        };
        let improvement = (cost - c) / cost.max(T::min_positive_value());
        x = trial;
        cost = c;
        if improvement < options.relative_tolerance {
            converged = true;
            break;
        }
    }

    // absorb rounding drift in each row into its largest entry
    for (i, need) in needs.iter().enumerate() {
        let row = &mut x[i * slots..(i + 1) * slots];
        let drift = *need - row.iter().copied().sum::<T>();
        if let Some(k) = (0..slots).max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap()) {
            row[k] = row[k] + drift;
        }
    }
    let flexible: Vec<Vec<T>> = x.chunks(slots).map(|c| c.to_vec()).collect();
    let schedule = LoadSchedule::new(base, flexible)?;
    let cost = model.grid_cost(&schedule, weights)?;
    let violation = schedule.feasibility_violation(needs);

    if !converged || violation > options.feasibility_tolerance {
        return Err(ScheduleError::NotConverged {
            iterations,
            best_cost: cost.to_f64_lossy(),
            best_flexible: schedule
                .flexible
                .iter()
                .map(|r| r.iter().map(|v| v.to_f64_lossy()).collect())
                .collect(),
        });
    }
    Ok(GridAwareOutcome {
        schedule,
        grid_cost: cost,
        iterations,
        started_from: Method::Global,
    })
}

/// Adds a growing multiple of the identity until the matrix is positive definite.
fn regularize<T: Real>(h: &mut DenseMatrix<T>) {
    let n = h.rows();
    let scale = (0..n)
        .fold(T::zero(), |m, i| m.max(h.get(i, i).abs()))
        .max(T::one());
    let mut shift = T::zero();
    let mut next = scale * T::lit(1e-12);
    while !h.is_positive_definite() {
        for i in 0..n {
            h.add(i, i, next - shift);
        }
        shift = next;
        next = next * T::lit(10.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_paper_grid;

    #[test]
    fn single_slot_single_station_is_forced() {
        let grid = build_paper_grid::<f64>();
        let w = SlotWeights::uniform(1, 8.0).unwrap();
        let base = vec![vec![2.0], vec![3.0], vec![1.0]];
        let needs = ChargingNeeds {
            per_evcs_mwh: vec![4.0, 0.5, 0.0],
        };
        let out = schedule_grid_aware(&grid, &base, &needs, &w).unwrap();
        assert_eq!(out.schedule.flexible, vec![vec![4.0], vec![0.5], vec![0.0]]);
    }

    #[test]
    fn improves_on_heuristics() {
        let grid = build_paper_grid::<f64>();
        let w = SlotWeights::uniform(4, 8.0).unwrap();
        let base = vec![
            vec![3.0, 1.0, 2.0, 4.0],
            vec![2.5, 3.5, 1.0, 0.5],
            vec![1.0, 2.0, 3.0, 2.0],
        ];
        let needs = ChargingNeeds {
            per_evcs_mwh: vec![3.0, 2.0, 0.0],
        };
        let model = PowerFlowModel::new(&grid).unwrap();
        let out = schedule_grid_aware(&grid, &base, &needs, &w).unwrap();
        let global = schedule_global(&base, &needs, &w).unwrap().schedule;
        let local = schedule_local(&base, &needs, &w).unwrap();
        let g = model.grid_cost(&global, &w).unwrap();
        let l = model.grid_cost(&local, &w).unwrap();
        assert!(out.grid_cost <= g + 1e-9);
        assert!(out.grid_cost <= l + 1e-9);
        assert!(out.schedule.feasibility_violation(&needs.per_evcs_mwh) <= 1e-9);
    }
}
