use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "seed = 3
[synthetic]
n_counties = 8
n_states = 2
[simulate]
days = 50
[corpus]
n_train = 2
n_valid = 1
days = 30
[cleirnet]
members = 2
[cleirnet.model]
n_f = 5
max_epochs = 2
[tdefsi]
arms = [\"none\", \"dropout-nonneg-spatial\"]
forecast_arm = \"none\"
[tdefsi.model]
max_epochs = 2
[dependency]
deltas = [0.0, 0.5]
";

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn epiforge(config: &Path, out: &Path, stage: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_epiforge"))
        .args([stage, "--jobs", "2", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn ok(output: &Output) {
    assert!(output.status.success(), "stderr: {}", String::from_utf8_lossy(&output.stderr));
}

fn manifest(out: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn simulate_writes_stamped_csvs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    ok(&epiforge(&config, &out, "simulate"));
    let m = manifest(&out);
    assert_eq!(m["seed"], 3);
    assert_eq!(m["stages"], serde_json::json!(["simulate"]));
    for name in ["counties.csv", "cases.csv", "adjacency.csv"] {
        assert!(m["artifacts"][name].is_string(), "{name} missing from manifest");
    }
    let cases = fs::read_to_string(out.join("cases.csv")).unwrap();
    let first = cases.lines().next().unwrap();
    assert!(first.starts_with("# epiforge="));
    assert!(first.contains(&format!("config_hash={}", m["config_hash"].as_str().unwrap())));
}

#[test]
fn unknown_keys_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "seed = 1\nsede = 2\n[cleirnet.model]\nn_ff = 3\n");
    let output = epiforge(&config, &dir.path().join("out"), "simulate");
    assert!(!output.status.success());
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(err.contains("sede"), "{err}");
    assert!(err.contains("cleirnet.model.n_ff"), "{err}");
}

#[test]
fn invalid_values_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), "[simulate]\nh = 0.0\n[corpus]\nn_train = 0\n");
    let output = epiforge(&config, &dir.path().join("out"), "simulate");
    assert!(!output.status.success());
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(err.contains("simulate.h"), "{err}");
    assert!(err.contains("corpus.n_train"), "{err}");
}

#[test]
fn same_config_same_hash_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&epiforge(&config, out, "simulate"));
        ok(&epiforge(&config, out, "gen-corpus"));
    }
    let (ma, mb) = (manifest(&a), manifest(&b));
    assert_eq!(ma["config_hash"], mb["config_hash"]);
    assert_eq!(ma["artifacts"], mb["artifacts"]);
}

#[test]
fn forecasting_pipeline_smoke() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    for stage in ["simulate", "gen-corpus", "train-cleirnet", "train-tdefsi", "forecast", "evaluate"] {
        ok(&epiforge(&config, &out, stage));
    }
    for name in [
        "corpus.jsonl",
        "checkpoints/cleirnet-0.ckpt",
        "checkpoints/cleirnet-1.ckpt",
        "tdefsi-arms.csv",
        "forecast.csv",
        "metrics.json",
        "summary.csv",
        "per_day.csv",
        "state_ranking.csv",
    ] {
        assert!(out.join(name).is_file(), "{name} missing");
    }
    let metrics: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    let models: Vec<&str> = metrics["models"].as_array().unwrap().iter().map(|m| m["model"].as_str().unwrap()).collect();
    for m in ["naive", "cleirnet-0", "cleirnet-1", "ensemble", "tdefsi"] {
        assert!(models.contains(&m), "{m} not evaluated: {models:?}");
    }
    let stages = manifest(&out)["stages"].as_array().unwrap().len();
    assert_eq!(stages, 6);
}

#[test]
fn report_regenerates_identical_tables() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    for stage in ["simulate", "train-cleirnet", "forecast", "evaluate"] {
        ok(&epiforge(&config, &out, stage));
    }
    let names = ["summary.csv", "per_day.csv", "state_ranking.csv"];
    let before: Vec<Vec<u8>> = names.iter().map(|n| fs::read(out.join(n)).unwrap()).collect();
    for n in names {
        fs::remove_file(out.join(n)).unwrap();
    }
    ok(&epiforge(&config, &out, "report"));
    let after: Vec<Vec<u8>> = names.iter().map(|n| fs::read(out.join(n)).unwrap()).collect();
    assert_eq!(before, after);
}

#[test]
fn mismatched_counties_surface_the_difference() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    for stage in ["simulate", "train-cleirnet", "forecast"] {
        ok(&epiforge(&config, &out, stage));
    }
    let table = fs::read_to_string(out.join("counties.csv")).unwrap();
    let victim = table
        .lines()
        .filter(|l| !l.starts_with('#'))
        .nth(1)
        .and_then(|l| l.split(',').next())
        .unwrap()
        .to_string();
    let forecast = fs::read_to_string(out.join("forecast.csv")).unwrap();
    fs::write(out.join("forecast.csv"), forecast.replace(&format!(",{victim},"), ",99999,")).unwrap();
    let output = epiforge(&config, &out, "evaluate");
    assert!(!output.status.success());
    let err = String::from_utf8_lossy(&output.stderr);
    assert!(err.contains(&victim) && err.contains("99999"), "{err}");
}

#[test]
fn selection_stages_write_tables() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    for stage in ["simulate", "dependency", "select", "sweep-delta"] {
        ok(&epiforge(&config, &out, stage));
    }
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let rows: Vec<&str> = sweep.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(rows[0], "delta,removed_fraction,mse,weighted_mse,error");
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("0,0,"), "{}", rows[1]);
}
