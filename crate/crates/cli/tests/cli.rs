use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gridcast_core::pipeline::{RunManifest, MANIFEST_FILE, METRICS_FILE};

fn gridcast(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridcast")).args(args).output().expect("spawn gridcast")
}

fn ok(out: Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "exit {:?}\nstdout:\n{stdout}\nstderr:\n{}", out.status, String::from_utf8_lossy(&out.stderr));
    stdout
}

fn small_config(dir: &Path, data: &str) -> PathBuf {
    let path = dir.join("small.toml");
    let text = format!(
        r#"seed = 5
{data}
[network]
layer_sizes = [6]

[training]
epochs = 2
batch_size = 64

[baselines]
k = 4
"#
    );
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn stages_chain_to_the_same_metrics_as_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(gridcast(&["synth", "--seed", "5", "-o", s(&data)]));
    for f in ["generation.csv", "demand.csv", "fleet.csv"] {
        assert!(data.join(f).is_file(), "{f} missing");
    }

    // Paths are relative to the config file.
    let cfg = small_config(
        tmp.path(),
        "[data]\ngeneration = \"data/generation.csv\"\ndemand = \"data/demand.csv\"\nfleet = \"data/fleet.csv\"\n",
    );
    let staged = tmp.path().join("staged");
    let c = s(&cfg);
    let o = s(&staged);
    let train = ok(gridcast(&["-c", c, "-o", o, "train"]));
    assert!(train.contains("final training loss"));
    ok(gridcast(&["-c", c, "-o", o, "forecast"]));
    ok(gridcast(&["-c", c, "-o", o, "dispatch"]));
    let table = ok(gridcast(&["-c", c, "-o", o, "evaluate"]));
    assert!(table.contains("mlstm") && table.contains("kmeans"));

    let whole = tmp.path().join("whole");
    ok(gridcast(&["-c", c, "-o", s(&whole), "run"]));
    assert_eq!(
        fs::read(staged.join(METRICS_FILE)).unwrap(),
        fs::read(whole.join(METRICS_FILE)).unwrap()
    );
    let manifest = RunManifest::load(&whole.join(MANIFEST_FILE)).unwrap();
    assert_eq!(manifest.verify(&whole), Vec::<String>::new());
    assert!(!tmp.path().read_dir().unwrap().any(|e| e.unwrap().file_name().to_string_lossy().starts_with(".staging")));
}

#[test]
fn bad_config_exits_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path(), "[data]\ntrain_fraction = 1.0\n");
    let out = gridcast(&["-c", s(&cfg), "-o", s(&tmp.path().join("out")), "run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    assert!(!tmp.path().join("out").join(METRICS_FILE).exists());

    fs::write(tmp.path().join("typo.toml"), "[training]\nepoch = 3\n").unwrap();
    let out = gridcast(&["-c", s(&tmp.path().join("typo.toml")), "config"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stage_failure_exits_with_code_three() {
    let tmp = tempfile::tempdir().unwrap();
    let out = gridcast(&["-o", s(tmp.path()), "forecast", "--checkpoint", s(&tmp.path().join("missing.json"))]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("missing.json"), "{stderr}");

    fs::write(tmp.path().join("forecasts.csv"), "not,a,table\n1,2\n").unwrap();
    let out = gridcast(&["-o", s(tmp.path()), "dispatch"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(!tmp.path().join("discrepancy.csv").exists());
}

#[test]
fn config_prints_overrides() {
    let text = ok(gridcast(&["--seed", "9", "config"]));
    assert!(text.lines().any(|l| l == "seed = 9"));
    assert!(text.contains("[training]"));
}
