use std::path::Path;
use std::process::{Command, Output};

use audioadapt::config::ExperimentConfig;
use audioadapt_cli::ablate::{cell, Cell, AXES};

fn bin(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_audioadapt"))
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, ExperimentConfig::tiny(0).to_toml()).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn unknown_config_key_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin(dir.path(), &["train", "--set", "loss.bogus_key=1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_key"));
}

#[test]
fn unknown_axis_and_value_are_rejected() {
    let base = ExperimentConfig::tiny(0);
    assert!(cell(&base, "nonsense", "1").is_err());
    let err = cell(&base, "stage1", "everything").unwrap_err().to_string();
    assert!(err.contains("stage1"), "{err}");
    assert!(cell(&base, "k", "0").is_err());
}

#[test]
fn every_declared_value_builds_a_valid_cell() {
    let base = ExperimentConfig::new(0);
    for axis in AXES {
        for value in axis.values {
            let c = cell(&base, axis.name, value).unwrap_or_else(|e| panic!("{}={value}: {e:#}", axis.name));
            c.config().validate().unwrap();
        }
    }
    assert!(matches!(cell(&base, "fusion", "late_fusion").unwrap(), Cell::Baseline(..)));
    let eta = cell(&base, "loss.eta", "0.25").unwrap();
    assert_eq!(eta.config().loss.eta, 0.25);
}

#[test]
fn ablation_table_has_one_row_per_value_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out = dir.path().join("out");
    let status = bin(&out, &["ablate", "--config", &config, "--axis", "r", "--values", "1,2,3", "--seeds", "2"]);
    assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
    let mut reader = csv::Reader::from_path(out.join("tables/r.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    for column in ["axis", "value", "seed", "config_hash", "metric", "all", "silent", "audible", "bin_0_10"] {
        assert!(headers.iter().any(|h| h == column), "missing {column}");
    }
    let rows: Vec<_> = reader.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 6);
    let seeds: Vec<&str> = rows.iter().map(|r| &r[2]).collect();
    assert_eq!(seeds.iter().filter(|&&s| s == "0").count(), 3);

    assert!(bin(&out, &["report"]).status.success());
    let summary = std::fs::read_to_string(out.join("report/r.csv")).unwrap();
    assert_eq!(summary.lines().count(), 4);
}

#[test]
fn generation_digests_repeat() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let a = bin(&dir.path().join("a"), &["gen", "--config", &config, "--name", "d"]);
    let b = bin(&dir.path().join("b"), &["gen", "--config", &config, "--name", "d"]);
    // Lines are "<path> <digest>".
    let digests = |o: &Output| -> Vec<String> {
        assert!(o.status.success());
        String::from_utf8_lossy(&o.stdout).lines().map(|l| l.rsplit(' ').next().unwrap().to_string()).collect()
    };
    assert!(!digests(&a).is_empty());
    assert_eq!(digests(&a), digests(&b));
    let other = bin(&dir.path().join("c"), &["gen", "--config", &config, "--seed", "1", "--name", "d"]);
    assert_ne!(digests(&a), digests(&other));
}

#[test]
fn train_refuses_to_overwrite_a_run() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out = dir.path().join("out");
    assert!(bin(&out, &["train", "--config", &config, "--run-id", "x"]).status.success());
    assert!(out.join("runs/x/record.json").exists());
    assert!(out.join("runs/x/analysis.csv").exists());
    let again = bin(&out, &["train", "--config", &config, "--run-id", "x"]);
    assert!(!again.status.success());
}
