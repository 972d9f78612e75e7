use std::fs;
use std::path::Path;
use std::process::Command as Process;

use evgrid::cli_io::{run_command, Command, ConfigError, ExitStatus, RunConfig};
use evgrid::traffic::{charging_needs, solve_wardrop, DEFAULT_GAP_TOLERANCE};
use serde_json::Value;
use tempfile::TempDir;

fn records(path: &Path) -> Vec<csv::StringRecord> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap()).collect()
}

fn header(path: &Path) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.headers().unwrap().iter().map(String::from).collect()
}

fn column(path: &Path, name: &str) -> Vec<String> {
    let i = header(path).iter().position(|h| h == name).unwrap();
    records(path).iter().map(|r| r[i].to_string()).collect()
}

fn config_in(dir: &TempDir, toml: &str) -> RunConfig {
    let mut c: RunConfig = toml.parse().unwrap();
    c.out_dir = dir.path().to_path_buf();
    c
}

fn evgrid() -> Process {
    Process::new(env!("CARGO_BIN_EXE_evgrid"))
}

#[test]
fn default_sweep_covers_21_tolls() {
    let dir = TempDir::new().unwrap();
    let report = run_command(Command::Sweep, &config_in(&dir, ""));
    assert_eq!(report.status, ExitStatus::Success);
    let mut tolls = column(&dir.path().join("sweep_needs.csv"), "toll");
    tolls.dedup();
    assert_eq!(tolls.len(), 21);
    assert_eq!(tolls.first().unwrap(), "0.0");
    assert_eq!(tolls.last().unwrap(), "5.0");
    assert_eq!(records(&dir.path().join("sweep_costs.csv")).len(), 63);
    assert!(dir.path().join("summary.json").exists());
    assert!(!dir.path().join("errors.json").exists());
}

const ONE_STATION: &str = r#"
[transport]
total_vehicles = 1000
paths = [{ length_km = 20, speed_limit_kmh = 50, capacity_vehicles = 1500 }]

[grid]
preset = "custom"
buses = [
  { id = "head", nominal_kv = 20, slack = true },
  { id = "station", nominal_kv = 20, evcs = 1 },
]
lines = [{ from = "head", to = "station", length_km = 4, std_type = "NA2XS2Y 1x240 RM/25 12/20 kV" }]

[sweep]
toll_path = 1
"#;

#[test]
fn local_and_global_coincide_on_one_station() {
    let flexible = |method: &str| {
        let dir = TempDir::new().unwrap();
        let mut c = config_in(&dir, &format!("method = \"{method}\"\n{ONE_STATION}"));
        c.schedule.slots = 4;
        let report = run_command(Command::Schedule, &c);
        assert_eq!(report.status, ExitStatus::Success, "{:?}", report.lines);
        column(&dir.path().join("schedule.csv"), "flexible_mwh")
            .iter()
            .map(|v| v.parse::<f64>().unwrap())
            .collect::<Vec<_>>()
    };
    let (local, global) = (flexible("local"), flexible("global"));
    assert_eq!(local.len(), 4);
    for (a, b) in local.iter().zip(&global) {
        assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
    }
}

#[test]
fn zero_load_power_flow_converges() {
    let dir = TempDir::new().unwrap();
    let c = config_in(&dir, "[powerflow]\nloads_mw = [0.0, 0.0, 0.0]\n");
    let report = run_command(Command::Powerflow, &c);
    assert_eq!(report.status, ExitStatus::Success);
    let summary: Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(summary["command"], "powerflow");
    let text = summary.to_string();
    assert!(text.contains("\"converged\":true"), "{text}");
    assert!(!text.contains("\"converged\":false"));
}

#[test]
fn one_toll_override_keeps_other_defaults() {
    let c: RunConfig = "[transport]\ntolls = [{ path = 3, euros = 4.0 }]\n"
        .parse()
        .unwrap();
    let mut expected = RunConfig::default();
    expected.transport.tolls = c.transport.tolls.clone();
    assert_eq!(c, expected);
    let scenario = c.scenario().unwrap();
    let reference = RunConfig::default().scenario().unwrap();
    for (i, (p, r)) in scenario.paths.iter().zip(&reference.paths).enumerate() {
        assert_eq!(
            (p.length_km, p.speed_limit_kmh, p.capacity_vehicles),
            (r.length_km, r.speed_limit_kmh, r.capacity_vehicles)
        );
        assert_eq!(p.tolls.is_empty(), i != 2);
    }
    assert_eq!(scenario.classes, reference.classes);
    assert_eq!(scenario.total_vehicles, reference.total_vehicles);
}

#[test]
fn negative_capacity_names_the_capacity() {
    let toml = r#"
[transport]
paths = [
  { length_km = 30, speed_limit_kmh = 50, capacity_vehicles = -1 },
  { length_km = 20, speed_limit_kmh = 50, capacity_vehicles = 1500 },
  { length_km = 20, speed_limit_kmh = 70, capacity_vehicles = 1500 },
]
"#;
    match toml.parse::<RunConfig>() {
        Err(ConfigError::Invalid(msg)) => assert!(msg.contains("C_i"), "{msg}"),
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn unknown_key_reports_its_line() {
    match "seed = 3\n\n[grid]\nvoltage = 1.0\n".parse::<RunConfig>() {
        Err(ConfigError::Parse { line, message, .. }) => {
            assert_eq!(line, 4);
            assert!(message.contains("voltage"), "{message}");
        }
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn csv_values_keep_full_precision() {
    let dir = TempDir::new().unwrap();
    let c = config_in(&dir, "[transport]\ntolls = [{ path = 3, euros = 4.0 }]\n");
    assert_eq!(run_command(Command::Needs, &c).status, ExitStatus::Success);
    let scenario = c.scenario().unwrap();
    let eq = solve_wardrop(&scenario, DEFAULT_GAP_TOLERANCE).unwrap();
    let needs = charging_needs(&eq, &scenario).unwrap().per_evcs_mwh;
    let written: Vec<f64> = column(&dir.path().join("needs.csv"), "need_mwh")
        .iter()
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(written, needs);
}

#[test]
fn reruns_are_byte_identical() {
    let run = || {
        let dir = TempDir::new().unwrap();
        let mut c = config_in(&dir, "");
        c.benchmark.profiles = 5;
        c.benchmark.slot_counts = vec![2, 3];
        assert_eq!(run_command(Command::Bench, &c).status, ExitStatus::Success);
        ["bench.csv", "bench_runs.csv", "summary.json"]
            .map(|f| fs::read(dir.path().join(f)).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn binary_exit_codes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");

    let ok = evgrid()
        .args(["needs", "--out"])
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).starts_with("needs:"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[transport]\ntotal_vehicles = -5\n").unwrap();
    let invalid = evgrid()
        .args(["equilibrium", "--config"])
        .arg(&bad)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(invalid.status.code(), Some(1));
    let errors: Value =
        serde_json::from_str(&fs::read_to_string(out.join("errors.json")).unwrap()).unwrap();
    assert_eq!(errors["exit_code"], 1);

    let stiff = dir.path().join("stiff.toml");
    fs::write(
        &stiff,
        "[powerflow]\nloads_mw = [5.0, 5.0, 5.0]\nmax_iterations = 1\n",
    )
    .unwrap();
    let diverged = evgrid()
        .args(["powerflow", "--config"])
        .arg(&stiff)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(diverged.status.code(), Some(2));

    let missing = evgrid()
        .args(["needs", "--config"])
        .arg(dir.path().join("absent.toml"))
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(3));
}
