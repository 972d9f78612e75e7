//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::PI;

use evgrid::grid::{BusKind, BusSpec, GridModel, LineSpec, PowerFlowModel, PowerFlowSolution};
use num_complex::Complex64;
use rand::Rng;

/// Minimiser of `sum_t eta_t (base_t + x_t)^2` with `sum x = need`, `x >= 0`,
/// by enumerating every support set. On a support `S` stationarity gives
/// `eta_t (base_t + x_t) = level`; the cheapest feasible candidate wins.
pub fn brute_force_waterfill(base: &[f64], need: f64, eta: &[f64]) -> Vec<f64> {
    let t = base.len();
    assert!(t <= 16);
    let objective = |x: &[f64]| -> f64 { (0..t).map(|k| eta[k] * (base[k] + x[k]).powi(2)).sum() };
    let mut best = if need == 0.0 {
        Some((objective(&vec![0.0; t]), vec![0.0; t]))
    } else {
        None
    };
    for mask in 1u32..(1 << t) {
        let on = |k: usize| mask >> k & 1 == 1;
        let inv_eta: f64 = (0..t).filter(|&k| on(k)).map(|k| 1.0 / eta[k]).sum();
        let base_sum: f64 = (0..t).filter(|&k| on(k)).map(|k| base[k]).sum();
        let level = (need + base_sum) / inv_eta;
        let x: Vec<f64> = (0..t)
            .map(|k| if on(k) { level / eta[k] - base[k] } else { 0.0 })
            .collect();
        if x.iter().any(|v| *v < -1e-12) {
            continue;
        }
        let x: Vec<f64> = x.into_iter().map(|v| v.max(0.0)).collect();
        let f = objective(&x);
        if best.as_ref().is_none_or(|(b, _)| f < *b) {
            best = Some((f, x));
        }
    }
    best.expect("some support is always feasible").1
}

pub fn weighted_square_cost(base: &[f64], x: &[f64], eta: &[f64]) -> f64 {
    base.iter()
        .zip(x)
        .zip(eta)
        .map(|((b, v), e)| e * (b + v).powi(2))
        .sum()
}

/// Radial feeder described directly in per unit, for the sweep oracle.
#[derive(Debug, Clone)]
pub struct RadialToy {
    /// `parent[k]` for `k >= 1`; bus 0 is the source.
    pub parent: Vec<usize>,
    /// Series impedance of the branch feeding bus `k` (index 0 unused).
    pub z: Vec<Complex64>,
    /// Total shunt susceptance at each bus.
    pub shunt_b: Vec<f64>,
    /// Active load at each bus, per unit.
    pub load: Vec<f64>,
    pub grid: GridModel<f64>,
    pub loads_mw: Vec<f64>,
}

const TOY_KV: f64 = 20.0;
const TOY_BASE_MVA: f64 = 10.0;
const TOY_HZ: f64 = 50.0;

/// Random radial grid with 2..=4 buses; every non-source bus hosts a station.
pub fn random_radial_toy<R: Rng>(rng: &mut R) -> RadialToy {
    let n = rng.gen_range(2..=4);
    let z_base = TOY_KV * TOY_KV / TOY_BASE_MVA;
    let mut parent = vec![0; n];
    let mut z = vec![Complex64::new(0.0, 0.0); n];
    let mut shunt_b = vec![0.0; n];
    let mut load = vec![0.0; n];
    let mut buses = vec![BusSpec::new("source", TOY_KV, BusKind::Slack)];
    let mut lines = Vec::new();
    let mut loads_mw = Vec::new();
    for k in 1..n {
        parent[k] = rng.gen_range(0..k);
        let r = rng.gen_range(0.05..0.6);
        let x = rng.gen_range(0.05..0.5);
        let c = rng.gen_range(0.0..400.0);
        let len = rng.gen_range(0.5..15.0);
        z[k] = Complex64::new(r, x) * len / z_base;
        let b = 2.0 * PI * TOY_HZ * c * 1e-9 * len * z_base;
        shunt_b[k] += b / 2.0;
        shunt_b[parent[k]] += b / 2.0;
        let p = rng.gen_range(0.0..3.0);
        load[k] = p / TOY_BASE_MVA;
        loads_mw.push(p);
        buses.push(BusSpec::new(format!("b{k}"), TOY_KV, BusKind::Load).with_evcs(k - 1));
        lines.push(LineSpec {
            from_bus: parent[k],
            to_bus: k,
            length_km: len,
            resistance_ohm_per_km: r,
            reactance_ohm_per_km: x,
            shunt_capacitance_nf_per_km: c,
            ampacity_ka: 0.5,
        });
    }
    let grid = GridModel {
        buses,
        lines,
        transformer: None,
        slack_voltage_pu: 1.0,
        power_base_mva: TOY_BASE_MVA,
        frequency_hz: TOY_HZ,
    };
    RadialToy {
        parent,
        z,
        shunt_b,
        load,
        grid,
        loads_mw,
    }
}

/// Backward/forward sweep on current injections.
pub fn backward_forward_sweep(toy: &RadialToy) -> Vec<Complex64> {
    let n = toy.parent.len();
    let mut v = vec![Complex64::new(1.0, 0.0); n];
    for _ in 0..1000 {
        let mut branch: Vec<Complex64> = (0..n)
            .map(|k| {
                let s = Complex64::new(toy.load[k], 0.0);
                (s / v[k]).conj() + Complex64::new(0.0, toy.shunt_b[k]) * v[k]
            })
            .collect();
        for k in (1..n).rev() {
            let child = branch[k];
            branch[toy.parent[k]] += child;
        }
        let mut change: f64 = 0.0;
        for k in 1..n {
            let next = v[toy.parent[k]] - toy.z[k] * branch[k];
            change = change.max((next - v[k]).norm());
            v[k] = next;
        }
        if change < 1e-15 {
            break;
        }
    }
    v
}

/// Worst complex power mismatch over non-slack buses, per unit.
pub fn max_mismatch(
    model: &PowerFlowModel<f64>,
    sol: &PowerFlowSolution<f64>,
    loads_mw: &[f64],
) -> f64 {
    let grid = model.grid();
    let y = model.admittance();
    let n = grid.buses.len();
    let mut specified = vec![Complex64::new(0.0, 0.0); n];
    for (&bus, p) in grid.evcs_buses().iter().zip(loads_mw) {
        specified[bus] -= Complex64::new(p / grid.power_base_mva, 0.0);
    }
    let v = &sol.bus_voltages;
    (0..n)
        .filter(|&k| Some(k) != grid.slack_bus())
        .map(|k| {
            let current: Complex64 = (0..n).map(|m| y.get(k, m) * v[m]).sum();
            (v[k] * current.conj() - specified[k]).norm()
        })
        .fold(0.0, f64::max)
}

/// Star grid: one source bus feeding `n` stations through identical lines.
pub fn symmetric_star(n: usize) -> GridModel<f64> {
    let mut buses = vec![BusSpec::new("source", TOY_KV, BusKind::Slack)];
    let mut lines = Vec::new();
    for i in 0..n {
        buses.push(BusSpec::new(format!("s{i}"), TOY_KV, BusKind::Load).with_evcs(i));
        lines.push(LineSpec {
            from_bus: 0,
            to_bus: i + 1,
            length_km: 5.0,
            resistance_ohm_per_km: 0.2,
            reactance_ohm_per_km: 0.12,
            shunt_capacitance_nf_per_km: 250.0,
            ampacity_ka: 0.4,
        });
    }
    GridModel {
        buses,
        lines,
        transformer: None,
        slack_voltage_pu: 1.0,
        power_base_mva: TOY_BASE_MVA,
        frequency_hz: TOY_HZ,
    }
}
