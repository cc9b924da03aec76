//! End-to-end runs of the `ipsb` binary.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use ipsb::data::{
    write_inputs, CovariateTables, Definition, IncomeGroup, ModelInputs, Observation, SourceType, UndefinedPolicy,
    Window,
};
use ipsb::manifest::{manifest_path_for, sha256_file, RunManifest};

const SCENARIO: &str = "\
seed = 3
regions = 2
countries_per_region = 2
places_per_country = [1, 2]
observations_per_place = [6, 10]
samples = 20
aux_countries = 4
";

fn ipsb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ipsb")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap_or(-1)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &Path, name: &str) -> PathBuf {
    let config = dir.join("scenario.toml");
    std::fs::write(&config, SCENARIO).unwrap();
    let out = dir.join(name);
    let run = ipsb(&["simulate", "--config", s(&config), "--out", s(&out)]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    out
}

fn digests(dir: &Path) -> BTreeMap<String, String> {
    std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), sha256_file(&p).unwrap()))
        .collect()
}

fn short_fit(data: &Path, draws: &Path) -> Output {
    ipsb(&[
        "fit",
        "--data",
        s(data),
        "--chains",
        "2",
        "--warmup",
        "150",
        "--samples",
        "120",
        "--seed",
        "4",
        "--out",
        s(draws),
        "--allow-nonconverged",
    ])
}

/// Quantile rows keyed by everything but the first column.
fn rows_without_key(path: &Path, key: &str) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .filter(|l| l.split(',').next() == Some(key))
        .map(|l| l.split_once(',').unwrap().1.to_string())
        .collect()
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = digests(&simulate(dir.path(), "a"));
    let b = digests(&simulate(dir.path(), "b"));
    let strip = |m: BTreeMap<String, String>| -> BTreeMap<String, String> {
        m.into_iter().filter(|(k, _)| k != "manifest.json").collect()
    };
    assert_eq!(strip(a), strip(b));
}

#[test]
fn missing_config_exits_with_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let run = ipsb(&["simulate", "--config", s(&missing), "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&run), 2);
    let data = simulate(dir.path(), "data");
    let run = ipsb(&["fit", "--data", s(&data), "--config", s(&missing), "--out", s(&dir.path().join("d.csv"))]);
    assert_eq!(code(&run), 2);
}

#[test]
fn bad_arguments_exit_with_input_error() {
    assert_eq!(code(&ipsb(&["fit", "--chains", "two"])), 2);
    assert_eq!(code(&ipsb(&["no-such-command"])), 2);
}

#[test]
fn fit_predict_aggregate_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "data");
    let before = digests(&data);
    let draws = dir.path().join("draws.csv");
    let run = short_fit(&data, &draws);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));

    let manifest = RunManifest::read(&manifest_path_for(&draws)).unwrap();
    assert_eq!(manifest.command, "fit");
    assert_eq!(manifest.config["sampler"]["chains"], 2);
    assert_eq!(manifest.config["sampler"]["samples"], 120);
    assert_eq!(manifest.seed, 4);
    assert_eq!(manifest.outputs["draws.csv"], sha256_file(&draws).unwrap());

    let est = dir.path().join("est");
    let run = ipsb(&["predict", "--data", s(&data), "--draws", s(&draws), "--out", s(&est)]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    for f in ["places.csv", "countries.csv", "weights.csv", "country_draws.csv", "manifest.json"] {
        assert!(est.join(f).exists(), "{f} missing");
    }

    let regions = dir.path().join("regions.csv");
    let run = ipsb(&["aggregate", "--data", s(&data), "--estimates", s(&est), "--out", s(&regions)]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    assert!(!rows_without_key(&regions, "Global").is_empty());
    assert_eq!(digests(&data), before, "commands modified their inputs");

    // any change to an input after fitting is refused downstream
    let obs = data.join("observations.csv");
    let mut text = std::fs::read_to_string(&obs).unwrap();
    text.push('\n');
    std::fs::write(&obs, text).unwrap();
    let run = ipsb(&["predict", "--data", s(&data), "--draws", s(&draws), "--out", s(&dir.path().join("e2"))]);
    assert_eq!(code(&run), 2);
    let run = ipsb(&["aggregate", "--data", s(&data), "--estimates", s(&est), "--out", s(&regions)]);
    assert_eq!(code(&run), 2);
}

fn crvs(id: u64, country: &str, place: &str, region: &str, year: i32, y: u64, z: u64) -> Observation {
    Observation {
        id,
        country: country.into(),
        place: place.into(),
        region: region.into(),
        year_start: year as f64,
        year_end: year as f64 + 1.0,
        y,
        z,
        source_type: SourceType::Crvs,
        definition: Definition::Late,
        income_group: IncomeGroup::Hic,
    }
}

/// Country A has one place covering all of its stillbirths in every year
/// with data, and is alone in its region.
fn complete_coverage_inputs() -> ModelInputs {
    let window = Window::default();
    let mut observations = Vec::new();
    let mut cov = CovariateTables::constant(&["A", "B", "C"], window, 12.0, 800.0, 6);
    for (k, year) in (2003..2019).step_by(3).enumerate() {
        let (y, z) = (60 + 3 * k as u64, 140 + k as u64);
        observations.push(crvs(k as u64, "A", "A1", "R1", year, y, z));
        cov.sbr_samples.insert(("A".into(), year), vec![(y + z) as f64; 6]);
    }
    for (k, year) in (2001..2021).step_by(2).enumerate() {
        let id = 100 + k as u64;
        observations.push(crvs(id, "B", "B1", "R2", year, 30 + k as u64, 90));
        observations.push(crvs(id + 50, "C", "C1", "R2", year, 50, 100 + k as u64));
    }
    ModelInputs::new(
        observations,
        Vec::new(),
        Arc::new(cov),
        &BTreeMap::new(),
        window,
        UndefinedPolicy::TreatAsLate,
    )
    .unwrap()
}

#[test]
fn complete_coverage_and_single_country_region() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    write_inputs(&data, &complete_coverage_inputs()).unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, "[model]\ndefinition_adjustment = false\n").unwrap();

    let draws = dir.path().join("draws.csv");
    let run = ipsb(&[
        "fit", "--data", s(&data), "--config", s(&config), "--chains", "2", "--warmup", "200", "--samples", "200",
        "--out", s(&draws), "--allow-nonconverged",
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let est = dir.path().join("est");
    let run = ipsb(&[
        "predict", "--data", s(&data), "--config", s(&config), "--draws", s(&draws), "--out", s(&est),
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));

    let place: Vec<String> = rows_without_key(&est.join("places.csv"), "A1")
        .into_iter()
        .map(|r| r.split_once(',').unwrap().1.to_string())
        .collect();
    let country = rows_without_key(&est.join("countries.csv"), "A");
    assert!(!country.is_empty());
    assert_eq!(country, place);

    let regions = dir.path().join("regions.csv");
    let run = ipsb(&[
        "aggregate", "--data", s(&data), "--config", s(&config), "--estimates", s(&est), "--out", s(&regions),
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let region = rows_without_key(&regions, "R1");
    assert_eq!(region.len(), country.len());
    for (r, c) in region.iter().zip(&country) {
        let (rk, rv) = r.rsplit_once(',').unwrap();
        let (ck, cv) = c.rsplit_once(',').unwrap();
        assert_eq!(rk, ck);
        let (rv, cv): (f64, f64) = (rv.parse().unwrap(), cv.parse().unwrap());
        assert!((rv - cv).abs() <= 1e-12, "{r} vs {c}");
    }
}

#[test]
fn check_gradients_reports_and_detects_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "data");
    let run = ipsb(&["check-gradients", "--data", s(&data), "--points", "3"]);
    let stdout = String::from_utf8_lossy(&run.stdout).into_owned();
    assert_eq!(code(&run), 0, "{stdout}");
    assert!(stdout.starts_with("3 points"), "{stdout}");
    assert!(stdout.contains("PASS"));
    let run = ipsb(&["check-gradients", "--data", s(&data), "--points", "3", "--corrupt-gradient"]);
    assert_eq!(code(&run), 1);
    assert!(String::from_utf8_lossy(&run.stdout).contains("FAIL"));
}

#[test]
fn validate_holdout_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate(dir.path(), "data");
    let report = dir.path().join("report.csv");
    let run = ipsb(&[
        "validate", "--data", s(&data), "--mode", "holdout", "--cutoff", "2017", "--chains", "2", "--warmup", "150",
        "--samples", "150", "--out", s(&report),
    ]);
    assert_eq!(code(&run), 0, "{}", String::from_utf8_lossy(&run.stderr));
    let text = std::fs::read_to_string(&report).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("region,mae,coverage95,n"));
    assert!(lines.next().unwrap().starts_with("Global,"));
    assert!(dir.path().join("points.csv").exists());
    let manifest = RunManifest::read(&manifest_path_for(&report)).unwrap();
    assert_eq!(manifest.config["validation"]["cutoff"], 2017.0);
}

#[test]
fn basis_is_written() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("basis.csv");
    let run = ipsb(&["basis", "--start", "2000", "--end", "2021", "--out", s(&out)]);
    assert_eq!(code(&run), 0);
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 1 + 22);
}
