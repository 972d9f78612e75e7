//! Disaggregation of the aggregate water-filling profile into per-station
//! schedules that stay as close as possible to the local solutions.

use super::{aggregate_waterfill, check_inputs, schedule_local, LoadSchedule, Result, SlotWeights};
use crate::linalg::DenseMatrix;
use crate::scalar::Real;
use crate::traffic::ChargingNeeds;

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalSchedule<T> {
    pub schedule: LoadSchedule<T>,
    /// Negative-entry compensations performed.
    pub repair_iterations: usize,
    /// The compensation loop hit its cap and the exact projection was used.
    pub fallback_used: bool,
}

/// Global (aggregator) schedule.
///
/// Starts from the local schedules, spreads each slot's gap to the
/// aggregate water-filling profile equally over the stations, then removes
/// negative entries one at a time: the deficit `v = l_{i,t} < 0` is charged
/// `v/(N-1)` to the other stations in slot `t`, `v/(T-1)` to station `i` in
/// the other slots, and refunded `v/((N-1)(T-1))` everywhere else, which keeps
/// both row and column sums. After `100 N T` compensations the remaining
/// matrix is projected onto the feasible set instead.
pub fn schedule_global<T: Real>(
    nonflexible: &[Vec<T>],
    needs: &ChargingNeeds<T>,
    weights: &SlotWeights<T>,
) -> Result<GlobalSchedule<T>> {
    check_inputs(nonflexible, needs, weights)?;
    let local = schedule_local(nonflexible, needs, weights)?;
    let target = aggregate_waterfill(nonflexible, needs, weights)?;
    let n = local.evcs_count();
    let slots = local.slot_count();
    let mut flex = local.flexible.clone();

    let current = local.aggregate_flexible();
    let n_t = T::from_usize_lossy(n);
    for t in 0..slots {
        let share = (target[t] - current[t]) / n_t;
        for row in flex.iter_mut() {
            row[t] = row[t] + share;
        }
    }

    let scale = target
        .iter()
        .chain(needs.per_evcs_mwh.iter())
        .fold(T::one(), |m, v| m.max(v.abs()));
    let negligible = scale * T::epsilon() * T::lit(64.0);
    let (repairs, done) = repair_negatives(&mut flex, negligible, 100 * n * slots, true);
    let fallback = !done;
    if fallback {
        flex = project_transport_polytope(&flex, &needs.per_evcs_mwh, &target);
    }

    Ok(GlobalSchedule {
        schedule: LoadSchedule::new(nonflexible.to_vec(), flex)?,
        repair_iterations: repairs,
        fallback_used: fallback,
    })
}

/// Four-way compensation of negative entries, most negative first, until
/// none is below `-negligible` or `cap` compensations were spent. Returns the
/// compensation count and whether the loop finished below its cap.
///
/// The loop converges geometrically once it cycles over a fixed set of
/// entries. With `extrapolate`, when two consecutive windows of `N T`
/// compensations pivot on the same set, the limit of that cycle (the set
/// exactly zero) is solved for directly; entries the limit leaves negative
/// are added to the set until none remain.
fn repair_negatives<T: Real>(
    flex: &mut [Vec<T>],
    negligible: T,
    cap: usize,
    extrapolate: bool,
) -> (usize, bool) {
    let n = flex.len();
    let slots = flex.first().map_or(0, Vec::len);
    let window = n * slots;
    let mut pivots = vec![false; window];
    let mut previous: Option<Vec<bool>> = None;
    let mut worst = most_negative(flex);
    let mut repairs = 0;
    while let Some((i, t, v)) = worst.filter(|w| w.2 < -negligible) {
        if repairs == cap || n < 2 || slots < 2 {
            return (repairs, false);
        }
        worst = compensate(flex, i, t, v);
        repairs += 1;
        if !extrapolate {
            continue;
        }
        pivots[i * slots + t] = true;
        if repairs % window == 0 {
            if previous.as_ref() == Some(&pivots) {
                let mut zeroed: Vec<(usize, usize)> = (0..window)
                    .filter(|&k| pivots[k])
                    .map(|k| (k / slots, k % slots))
                    .collect();
                // entries the limit would drive negative join the cycle
                while let Some(limit) = cycle_limit(flex, &zeroed) {
                    let before = zeroed.len();
                    for (j, row) in limit.iter().enumerate() {
                        for (s, e) in row.iter().enumerate() {
                            if *e < -negligible {
                                zeroed.push((j, s));
                            }
                        }
                    }
                    if zeroed.len() == before {
                        for (row, new) in flex.iter_mut().zip(limit) {
                            *row = new;
                        }
                        return (repairs, true);
                    }
                }
            }
            previous = Some(std::mem::replace(&mut pivots, vec![false; window]));
        }
    }
    (repairs, true)
}

/// Matrix left after compensating the entries in `zeroed` until all of them
/// vanish.
///
/// Compensating `(i, t)` by `u` subtracts `u a_j c_s` with `a_i = c_t = 1`,
/// `a_j = -1/(N-1)` and `c_s = -1/(T-1)` elsewhere. The total amounts solve
/// a symmetric positive semidefinite system whose null vectors change no
/// entry, so a slightly regularised solve gives the unique limit.
fn cycle_limit<T: Real>(flex: &[Vec<T>], zeroed: &[(usize, usize)]) -> Option<Vec<Vec<T>>> {
    let others = T::from_usize_lossy(flex.len() - 1);
    let other_slots = T::from_usize_lossy(flex[0].len() - 1);
    let a = |k: usize, j: usize| if j == k { T::one() } else { -T::one() / others };
    let c = |k: usize, s: usize| {
        if s == k {
            T::one()
        } else {
            -T::one() / other_slots
        }
    };
    let m = zeroed.len();
    let mut sys = DenseMatrix::zeros(m, m);
    let mut rhs = vec![T::zero(); m];
    for (r, &(j, s)) in zeroed.iter().enumerate() {
        for (q, &(i, t)) in zeroed.iter().enumerate() {
            sys.set(r, q, a(i, j) * c(t, s));
        }
        sys.add(r, r, T::lit(1e-13));
        rhs[r] = flex[j][s];
    }
    let u = sys.solve(&rhs)?;
    let mut out = flex.to_vec();
    for (q, &(i, t)) in zeroed.iter().enumerate() {
        for (j, row) in out.iter_mut().enumerate() {
            for (s, e) in row.iter_mut().enumerate() {
                *e = *e - u[q] * a(i, j) * c(t, s);
            }
        }
    }
    let scale = rhs.iter().fold(T::one(), |acc, v| acc.max(v.abs()));
    for &(j, s) in zeroed {
        if out[j][s].abs() > scale * T::lit(1e-9) {
            return None;
        }
        out[j][s] = T::zero();
    }
    Some(out)
}

/// Moves `v = flex[i][t]` out of entry `(i, t)` keeping row and column sums,
/// and returns the new most negative entry.
fn compensate<T: Real>(flex: &mut [Vec<T>], i: usize, t: usize, v: T) -> Option<(usize, usize, T)> {
    let others = T::from_usize_lossy(flex.len() - 1);
    let other_slots = T::from_usize_lossy(flex[0].len() - 1);
    let same_row = v / other_slots;
    let same_slot = v / others;
    let elsewhere = -v / (others * other_slots);
    flex[i][t] = T::zero();
    let mut worst = (i, t, T::zero());
    for (j, row) in flex.iter_mut().enumerate() {
        for (s, e) in row.iter_mut().enumerate() {
            if j == i && s == t {
                continue;
            }
            *e = *e
                + if j == i {
                    same_row
                } else if s == t {
                    same_slot
                } else {
                    elsewhere
                };
            if *e < worst.2 {
                worst = (j, s, *e);
            }
        }
    }
    Some(worst)
}

fn most_negative<T: Real>(m: &[Vec<T>]) -> Option<(usize, usize, T)> {
    let mut best: Option<(usize, usize, T)> = None;
    for (i, row) in m.iter().enumerate() {
        for (t, v) in row.iter().enumerate() {
            if best.is_none_or(|b| *v < b.2) {
                best = Some((i, t, *v));
            }
        }
    }
    best
}

/// Euclidean projection of `start` onto
/// `{x >= 0 : sum_t x_{i,t} = row_sums_i, sum_i x_{i,t} = col_sums_t}`.
///
/// The minimiser has the form `x_{i,t} = max(0, start_{i,t} + a_i + b_t)`;
/// the dual variables are found by exact block-coordinate ascent, each block
/// being a one-dimensional water-filling problem.
pub fn project_transport_polytope<T: Real>(
    start: &[Vec<T>],
    row_sums: &[T],
    col_sums: &[T],
) -> Vec<Vec<T>> {
    let n = start.len();
    let slots = col_sums.len();
    let mut a = vec![T::zero(); n];
    let mut b = vec![T::zero(); slots];
    let scale = row_sums
        .iter()
        .chain(col_sums)
        .fold(T::one(), |m, v| m.max(v.abs()));
    let tol = scale * T::epsilon() * T::lit(16.0);
    let value = |a: &[T], b: &[T], i: usize, t: usize| (start[i][t] + a[i] + b[t]).max(T::zero());

    for _ in 0..100_000 {
        for i in 0..n {
            let shifted: Vec<T> = (0..slots).map(|t| start[i][t] + b[t]).collect();
            a[i] = shift_for_sum(&shifted, row_sums[i]);
        }
        for t in 0..slots {
            let shifted: Vec<T> = (0..n).map(|i| start[i][t] + a[i]).collect();
            b[t] = shift_for_sum(&shifted, col_sums[t]);
        }
        let row_err = (0..n)
            .map(|i| ((0..slots).map(|t| value(&a, &b, i, t)).sum::<T>() - row_sums[i]).abs())
            .fold(T::zero(), T::max);
        if row_err <= tol {
            break;
        }
    }
    (0..n)
        .map(|i| (0..slots).map(|t| value(&a, &b, i, t)).collect())
        .collect()
}

/// `c` such that `sum_k max(0, values_k + c) = total`, for `total >= 0`.
fn shift_for_sum<T: Real>(values: &[T], total: T) -> T {
    let mut sorted = values.to_vec();
    sorted.sort_by(|x, y| y.partial_cmp(x).unwrap());
    if total <= T::zero() {
        return -sorted[0];
    }
    let mut acc = T::zero();
    for k in 0..sorted.len() {
        acc = acc + sorted[k];
        let c = (total - acc) / T::from_usize_lossy(k + 1);
        let next_inactive = sorted.get(k + 1).is_none_or(|v| *v + c <= T::zero());
        if sorted[k] + c > T::zero() && next_inactive {
            return c;
        }
    }
    (total - acc) / T::from_usize_lossy(sorted.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_station_matches_local() {
        let w = SlotWeights::uniform(4, 8.0).unwrap();
        let base = vec![vec![1.0, 0.2, 0.7, 0.4]];
        let needs = ChargingNeeds {
            per_evcs_mwh: vec![2.0],
        };
        let g = schedule_global(&base, &needs, &w).unwrap();
        let l = schedule_local(&base, &needs, &w).unwrap();
        assert_eq!(g.schedule, l);
        assert!(!g.fallback_used);
    }

    #[test]
    fn aggregate_matches_waterfill() {
        let w = SlotWeights::uniform(3, 8.0).unwrap();
        let base = vec![
            vec![3.0_f64, 1.0, 0.5],
            vec![0.2, 1.5, 2.5],
            vec![1.0, 1.0, 1.0],
        ];
        let needs = ChargingNeeds {
            per_evcs_mwh: vec![1.0, 2.0, 0.0],
        };
        let g = schedule_global(&base, &needs, &w).unwrap();
        let target = aggregate_waterfill(&base, &needs, &w).unwrap();
        for (a, b) in g.schedule.aggregate_flexible().iter().zip(&target) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(g.schedule.feasibility_violation(&needs.per_evcs_mwh) < 1e-12);
    }

    #[test]
    fn cycle_extrapolation_matches_plain_loop() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut saved = 0;
        let mut worst_gap = 0.0_f64;
        for _ in 0..300 {
            let n = rng.gen_range(2..5);
            let slots = rng.gen_range(2..9);
            let base: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..slots).map(|_| rng.gen::<f64>()).collect())
                .collect();
            let mut needs: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..2.0)).collect();
            needs[0] = 0.0;
            let w = SlotWeights::uniform(slots, 8.0).unwrap();
            let needs = ChargingNeeds {
                per_evcs_mwh: needs,
            };
            let local = schedule_local(&base, &needs, &w).unwrap();
            let target = aggregate_waterfill(&base, &needs, &w).unwrap();
            let current = local.aggregate_flexible();
            let mut flex = local.flexible.clone();
            for t in 0..slots {
                for row in flex.iter_mut() {
                    row[t] += (target[t] - current[t]) / n as f64;
                }
            }
            let mut plain = flex.clone();
            let (k_plain, ok_plain) = repair_negatives(&mut plain, 1e-13, 1_000_000, false);
            let (k_fast, ok_fast) = repair_negatives(&mut flex, 1e-13, 1_000_000, true);
            assert!(ok_plain && ok_fast);
            saved += k_plain - k_fast;
            for (r, row) in flex.iter().enumerate() {
                assert!((row.iter().sum::<f64>() - needs.per_evcs_mwh[r]).abs() < 1e-12);
                assert!(row.iter().all(|v| *v >= -1e-13));
            }
            for t in 0..slots {
                let col: f64 = flex.iter().map(|r| r[t]).sum();
                assert!((col - target[t]).abs() < 1e-12);
            }
            // the plain loop can pick up an extra entry on its way to the limit
            let gap = plain
                .iter()
                .flatten()
                .zip(flex.iter().flatten())
                .fold(0.0_f64, |m, (p, f)| m.max((p - f).abs()));
            worst_gap = worst_gap.max(gap);
        }
        assert!(saved > 0);
        assert!(worst_gap < 1e-4, "{worst_gap}");
    }

    #[test]
    fn shift_for_sum_cases() {
        assert_eq!(shift_for_sum(&[1.0, 0.0], 3.0), 1.0);
        assert_eq!(shift_for_sum(&[2.0, -5.0], 1.0), -1.0);
        assert_eq!(shift_for_sum(&[2.0, 1.0], 0.0), -2.0);
    }

    #[test]
    fn projection_is_feasible_and_fixed_on_feasible_points() {
        let feasible = vec![vec![1.0_f64, 0.0, 2.0], vec![0.5, 1.5, 0.0]];
        let rows = [3.0, 2.0];
        let cols = [1.5, 1.5, 2.0];
        let p = project_transport_polytope(&feasible, &rows, &cols);
        for (r, q) in feasible.iter().zip(&p) {
            for (a, b) in r.iter().zip(q) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        let messy = vec![vec![-1.0_f64, 2.0, 2.5], vec![1.0, -0.5, 0.3]];
        let p = project_transport_polytope(&messy, &rows, &cols);
        for i in 0..2 {
            assert!((p[i].iter().sum::<f64>() - rows[i]).abs() < 1e-12);
        }
        for t in 0..3 {
            assert!((p[0][t] + p[1][t] - cols[t]).abs() < 1e-9);
        }
        assert!(p.iter().flatten().all(|v| *v >= 0.0));
    }
}
