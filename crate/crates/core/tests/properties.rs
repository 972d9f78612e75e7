mod common;

use common::{brute_force_waterfill, weighted_square_cost};
use evgrid::cli_io::{
    BenchmarkConfig, ClassConfig, IllustrateConfig, PathConfig, ProfileSource, RunConfig,
    SweepConfig, TollConfig,
};
use evgrid::grid::{build_paper_grid, PowerFlowModel};
use evgrid::scheduling::{
    aggregate_waterfill, schedule_global, schedule_grid_aware, schedule_local, waterfill, Method,
    SlotWeights,
};
use evgrid::traffic::{
    beckmann_potential, solve_wardrop, ChargingNeeds, ClassKind, FlowAssignment, PathSpec,
    TransportScenario, VehicleClassSpec, DEFAULT_GAP_TOLERANCE, USED_PATH_THRESHOLD,
};
use num_rational::Ratio;
use proptest::prelude::*;

fn slots_and_weights() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..=8).prop_flat_map(|t| {
        (
            prop::collection::vec(0.0..5.0f64, t),
            prop::collection::vec(0.2..3.0f64, t),
        )
    })
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(0.0..4.0f64, cols), rows)
}

proptest! {
    #[test]
    fn waterfill_is_permutation_equivariant(
        (base, eta) in slots_and_weights(),
        need in 0.0..15.0f64,
        seed in any::<u64>(),
    ) {
        let t = base.len();
        let mut order: Vec<usize> = (0..t).collect();
        // deterministic shuffle from the seed
        let mut s = seed;
        for k in (1..t).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            order.swap(k, (s >> 33) as usize % (k + 1));
        }
        let w = SlotWeights::new(eta.clone(), 8.0).unwrap();
        let x = waterfill(&base, need, &w).unwrap();
        let pb: Vec<f64> = order.iter().map(|&k| base[k]).collect();
        let pe: Vec<f64> = order.iter().map(|&k| eta[k]).collect();
        let px = waterfill(&pb, need, &SlotWeights::new(pe, 8.0).unwrap()).unwrap();
        for (j, &k) in order.iter().enumerate() {
            prop_assert!((px[j] - x[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn waterfill_levels_active_slots(
        (base, eta) in slots_and_weights(),
        need in 0.0..15.0f64,
    ) {
        let w = SlotWeights::new(eta.clone(), 8.0).unwrap();
        let x = waterfill(&base, need, &w).unwrap();
        prop_assert!((x.iter().sum::<f64>() - need).abs() < 1e-9);
        let active: Vec<usize> = (0..x.len()).filter(|&k| x[k] > 1e-9).collect();
        if let Some(&first) = active.first() {
            let level = eta[first] * (base[first] + x[first]);
            for k in 0..x.len() {
                prop_assert!(x[k] >= -1e-12);
                let v = eta[k] * (base[k] + x[k]);
                if active.contains(&k) {
                    prop_assert!((v - level).abs() < 1e-8 * level.max(1.0));
                } else {
                    prop_assert!(v >= level - 1e-8 * level.max(1.0));
                }
            }
        }
        let oracle = brute_force_waterfill(&base, need, &eta);
        let (a, b) = (weighted_square_cost(&base, &x, &eta), weighted_square_cost(&base, &oracle, &eta));
        prop_assert!(a <= b * (1.0 + 1e-9) + 1e-12);
    }

    #[test]
    fn rational_waterfill_is_exact(
        base in prop::collection::vec(0i64..20, 1..6),
        need in 0i64..40,
    ) {
        let b: Vec<Ratio<i64>> = base.iter().map(|v| Ratio::new(*v, 4)).collect();
        let w = SlotWeights::uniform(b.len(), Ratio::from_integer(8)).unwrap();
        let x = waterfill(&b, Ratio::new(need, 3), &w).unwrap();
        prop_assert_eq!(x.iter().cloned().sum::<Ratio<i64>>(), Ratio::new(need, 3));
        let totals: Vec<Ratio<i64>> = b.iter().zip(&x).map(|(p, q)| p + q).collect();
        let level = totals.iter().zip(&x).filter(|(_, q)| **q > Ratio::from_integer(0)).map(|(t, _)| *t).next();
        if let Some(level) = level {
            for (t, q) in totals.iter().zip(&x) {
                prop_assert!(*q >= Ratio::from_integer(0));
                if *q > Ratio::from_integer(0) {
                    prop_assert_eq!(*t, level);
                } else {
                    prop_assert!(*t >= level);
                }
            }
        }
    }

    #[test]
    fn local_and_global_are_feasible(
        (base, needs) in (1usize..=5, 1usize..=8)
            .prop_flat_map(|(n, t)| (matrix(n, t), prop::collection::vec(0.0..8.0f64, n))),
    ) {
        let t = base[0].len();
        let w = SlotWeights::uniform(t, 8.0).unwrap();
        let cn = ChargingNeeds { per_evcs_mwh: needs.clone() };
        let local = schedule_local(&base, &cn, &w).unwrap();
        let global = schedule_global(&base, &cn, &w).unwrap().schedule;
        prop_assert!(local.feasibility_violation(&needs) <= 1e-9);
        prop_assert!(global.feasibility_violation(&needs) <= 1e-9);
        let target = aggregate_waterfill(&base, &cn, &w).unwrap();
        let agg = global.aggregate_flexible();
        for (a, b) in agg.iter().zip(&target) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
        prop_assert!(global.global_objective(&w) <= local.global_objective(&w) + 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn grid_aware_is_feasible_and_no_worse(
        base in matrix(3, 3),
        needs in prop::collection::vec(0.0..6.0f64, 3),
    ) {
        let grid = build_paper_grid::<f64>();
        let model = PowerFlowModel::new(&grid).unwrap();
        let w = SlotWeights::uniform(3, 8.0).unwrap();
        let cn = ChargingNeeds { per_evcs_mwh: needs.clone() };
        let out = schedule_grid_aware(&grid, &base, &cn, &w).unwrap();
        prop_assert!(out.schedule.feasibility_violation(&needs) <= 1e-9);
        for other in [
            schedule_local(&base, &cn, &w).unwrap(),
            schedule_global(&base, &cn, &w).unwrap().schedule,
        ] {
            prop_assert!(out.grid_cost <= model.grid_cost(&other, &w).unwrap() + 1e-9);
        }
    }
}

fn scenario_strategy() -> impl Strategy<Value = TransportScenario<f64>> {
    (2usize..=4).prop_flat_map(|paths| {
        (
            500.0..5000.0f64,
            5.0..20.0f64,
            0.1..0.9f64,
            prop::collection::vec(
                (
                    5.0..40.0f64,
                    30.0..90.0f64,
                    500.0..5000.0f64,
                    0.0..4.0f64,
                    0.0..4.0f64,
                ),
                paths,
            ),
        )
            .prop_map(|(n, tau, share, specs)| TransportScenario {
                total_vehicles: n,
                time_value: tau,
                classes: vec![
                    VehicleClassSpec {
                        kind: ClassKind::Ev,
                        population_share: share,
                        consumption_per_km: 0.2,
                        energy_unit_price: 0.2,
                    },
                    VehicleClassSpec {
                        kind: ClassKind::Gv,
                        population_share: 1.0 - share,
                        consumption_per_km: 0.06,
                        energy_unit_price: 1.5,
                    },
                ],
                paths: specs
                    .into_iter()
                    .map(|(l, v, c, te, tg)| {
                        PathSpec::new(l, v, c)
                            .with_toll(ClassKind::Ev, te)
                            .with_toll(ClassKind::Gv, tg)
                    })
                    .collect(),
            })
    })
}

/// Cost of one vehicle of `class` on `path` at total path flow `flow`, written
/// out from the congestion model rather than taken from the library.
fn cost(s: &TransportScenario<f64>, class: usize, path: usize, flow: f64) -> f64 {
    let p = &s.paths[path];
    let c = &s.classes[class];
    let hours =
        p.length_km / p.speed_limit_kmh * (1.0 + 2.0 * (flow / p.capacity_vehicles).powi(4));
    s.time_value * hours + p.length_km * c.consumption_per_km * c.energy_unit_price + p.toll(c.kind)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wardrop_has_no_profitable_deviation(s in scenario_strategy()) {
        let eq = solve_wardrop(&s, DEFAULT_GAP_TOLERANCE).unwrap();
        let flows = eq.assignment.path_flows(&s);
        for class in 0..s.classes.len() {
            let costs: Vec<f64> = (0..s.paths.len()).map(|i| cost(&s, class, i, flows[i])).collect();
            let cheapest = costs.iter().cloned().fold(f64::INFINITY, f64::min);
            for (i, c) in costs.iter().enumerate() {
                let x = eq.assignment.proportions[class][i];
                prop_assert!(x >= 0.0);
                if x > USED_PATH_THRESHOLD {
                    prop_assert!(c - cheapest <= DEFAULT_GAP_TOLERANCE + 1e-9,
                        "class {class} path {i}: {c} vs {cheapest}");
                }
            }
            prop_assert!((eq.assignment.proportions[class].iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn equilibrium_minimises_the_potential(
        s in scenario_strategy(),
        raw in prop::collection::vec(prop::collection::vec(0.0..1.0f64, 4), 2),
    ) {
        let eq = solve_wardrop(&s, DEFAULT_GAP_TOLERANCE).unwrap();
        let at_eq = beckmann_potential(&s, &eq.assignment).unwrap();
        let proportions: Vec<Vec<f64>> = raw
            .iter()
            .map(|r| {
                let r = &r[..s.paths.len()];
                let total: f64 = r.iter().sum::<f64>().max(1e-12);
                r.iter().map(|v| v / total).collect()
            })
            .collect();
        let other = beckmann_potential(&s, &FlowAssignment { proportions }).unwrap();
        prop_assert!(at_eq <= other + DEFAULT_GAP_TOLERANCE * s.total_vehicles);
    }
}

fn config_strategy() -> impl Strategy<Value = RunConfig> {
    (
        0..=i64::MAX as u64,
        prop::sample::select(vec![Method::Local, Method::Global, Method::GridAware]),
        (1usize..=12, 4.0..12.0f64, any::<bool>()),
        (
            1000.0..6000.0f64,
            0.2..0.8f64,
            1usize..=3,
            0.0..6.0f64,
            any::<bool>(),
        ),
        prop::collection::vec((5.0..40.0f64, 30.0..90.0f64, 500.0..5000.0f64), 3),
        (0.0..1.0f64, 1.0..4.0f64, 0.05..0.5f64),
        (
            1usize..500,
            prop::sample::subsequence(vec![1usize, 2, 3, 4, 6, 8], 1..=6),
            1usize..5,
        ),
        prop::sample::select(vec![ProfileSource::Reference, ProfileSource::Random]),
    )
        .prop_map(
            |(
                seed,
                method,
                (slots, horizon, weighted),
                (n, share, toll_path, toll, ev_only),
                paths,
                (tmin, span, step),
                (profiles, slot_counts, reps),
                profile,
            )| {
                let mut c = RunConfig {
                    seed,
                    method,
                    ..RunConfig::default()
                };
                c.schedule.slots = slots;
                c.schedule.horizon_hours = horizon;
                c.schedule.profile = profile;
                if weighted {
                    c.schedule.weights = Some((0..slots).map(|k| 1.0 + k as f64 / 7.0).collect());
                }
                c.transport.total_vehicles = n;
                c.transport.classes = vec![
                    ClassConfig {
                        kind: ClassKind::Ev,
                        population_share: share,
                        consumption_per_km: 0.2,
                        energy_unit_price: 0.2,
                    },
                    ClassConfig {
                        kind: ClassKind::Gv,
                        population_share: 1.0 - share,
                        consumption_per_km: 0.06,
                        energy_unit_price: 1.5,
                    },
                ];
                c.transport.paths = paths
                    .into_iter()
                    .map(
                        |(length_km, speed_limit_kmh, capacity_vehicles)| PathConfig {
                            length_km,
                            speed_limit_kmh,
                            capacity_vehicles,
                        },
                    )
                    .collect();
                c.transport.tolls = vec![TollConfig {
                    path: toll_path,
                    class: ev_only.then_some(ClassKind::Ev),
                    euros: toll,
                }];
                c.sweep = SweepConfig {
                    toll_min: tmin,
                    toll_max: tmin + span,
                    toll_step: step,
                    toll_path,
                };
                c.benchmark = BenchmarkConfig {
                    profiles,
                    slot_counts,
                    repetitions: reps,
                    toll,
                };
                c.illustrate = IllustrateConfig {
                    slots: slots.min(4),
                    toll,
                };
                c
            },
        )
}

proptest! {
    #[test]
    fn config_round_trips(c in config_strategy()) {
        c.validate().unwrap();
        let text = c.to_toml().unwrap();
        let back: RunConfig = text.parse().unwrap();
        prop_assert_eq!(back, c);
    }
}
