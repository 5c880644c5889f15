use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use flcm::sim::{generate_dataset, SimConfig};

fn flcm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flcm"))
        .args(args)
        .env("RUST_LOG", "error")
        .output()
        .expect("binary runs")
}

fn write_dataset(dir: &Path, cfg: &SimConfig) -> String {
    let data = generate_dataset(cfg, 0).unwrap();
    let path = dir.join("data.csv");
    data.write_long_csv(fs::File::create(&path).unwrap()).unwrap();
    path.to_str().unwrap().to_string()
}

fn write_config(dir: &Path, text: &str) -> String {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn missing_data_is_a_usage_error() {
    let out = flcm(&["fit"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--data") && err.contains("Usage"), "{err}");
}

#[test]
fn unknown_method_and_bad_config_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "num_bases = 3\n");
    let data = write_dataset(dir.path(), &SimConfig { n: 5, p: 2, ..Default::default() });
    assert_eq!(flcm(&["fit", "--data", &data, "--method", "ridge"]).status.code(), Some(1));
    assert_eq!(flcm(&["fit", "--data", &data, "--config", &cfg]).status.code(), Some(1));
    assert_eq!(flcm(&["bootstrap", "--data", &data, "-B", "1"]).status.code(), Some(1));
}

#[test]
fn fit_recovers_the_generating_active_set() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path(), &SimConfig { n: 100, p: 8, ..Default::default() });
    let cfg = write_config(dir.path(), "psi_grid = [0.0, 1.0]\n");
    let out_dir = dir.path().join("out");
    let out = flcm(&["fit", "--data", &data, "--config", &cfg, "--method", "fscad", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_slice(&fs::read(out_dir.join("selected.json")).unwrap()).unwrap();
    assert_eq!(json["selected"], serde_json::json!(["Var1", "Var2", "Var3"]));
    assert_eq!(json["method"], "fscad");

    let mut rows = csv::Reader::from_path(out_dir.join("beta.csv")).unwrap();
    assert_eq!(rows.headers().unwrap(), vec!["t", "covariate", "estimate"]);
    let records: Vec<csv::StringRecord> = rows.records().map(Result::unwrap).collect();
    assert_eq!(records.len(), 8 * 100);
    for r in records.iter().filter(|r| &r[1] == "Var5") {
        assert_eq!(r[2].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn simulate_is_byte_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "n = 30\np = 5\nreplicates = 3\nmethods = [\"flasso\", \"fscad\"]\npsi_grid = [0.0]\nlambda_count = 30\n");
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        let out = flcm(&["simulate", "--config", &cfg, "--out", out_dir.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        outputs.push(out_dir);
    }
    for file in ["report.csv", "selection.csv", "summary.json"] {
        let a = fs::read(outputs[0].join(file)).unwrap();
        assert_eq!(a, fs::read(outputs[1].join(file)).unwrap(), "{file}");
    }
    let mut sel = csv::Reader::from_path(outputs[0].join("selection.csv")).unwrap();
    assert_eq!(sel.headers().unwrap().len(), 1 + 5 + 1);
    assert_eq!(sel.records().count(), 2);
}

#[test]
fn bootstrap_writes_one_band_per_covariate() {
    let dir = tempfile::tempdir().unwrap();
    let data = write_dataset(dir.path(), &SimConfig { n: 40, p: 3, ..Default::default() });
    let cfg = write_config(dir.path(), "psi_grid = [0.0]\nlambda_count = 30\nprewhiten = false\nband_grid_points = 11\n");
    let out_dir = dir.path().join("boot");
    let out = flcm(&["bootstrap", "--data", &data, "--config", &cfg, "-B", "4", "--out", out_dir.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for name in ["Var1", "Var2", "Var3"] {
        let mut r = csv::Reader::from_path(out_dir.join(format!("band_{name}.csv"))).unwrap();
        assert_eq!(r.headers().unwrap(), vec!["t", "lower", "upper", "estimate"]);
        for rec in r.records() {
            let rec = rec.unwrap();
            assert!(rec[1].parse::<f64>().unwrap() <= rec[2].parse::<f64>().unwrap());
        }
    }
}
