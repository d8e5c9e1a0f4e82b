use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn qdtune(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qdtune"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn manifests(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .map(|p| p.to_string_lossy().into_owned())
        .collect();
    v.sort();
    v
}

#[test]
fn gen_writes_manifests_and_grids() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&qdtune(&["gen", "--profile", "si-sg", "--count", "2", "--seed", "7", "--out", "d/"], tmp.path()));
    let d = tmp.path().join("d");
    assert_eq!(manifests(&d).len(), 2);
    let grids = fs::read_dir(&d)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "f32"))
        .count();
    assert_eq!(grids, 2);
}

#[test]
fn missing_bench_config_fails() {
    let tmp = tempfile::tempdir().unwrap();
    let out = qdtune(&["bench", "--config", "missing.json", "--out", "r.json"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("config not found"));
    assert!(!tmp.path().join("r.json").exists());
}

#[test]
fn usage_errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = qdtune(&["frobnicate"], tmp.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = qdtune(&["tune", "--diagram", "x.json"], tmp.path());
    assert!(!out.status.success(), "a detector is required");
}

#[test]
fn every_subcommand_has_help() {
    let tmp = tempfile::tempdir().unwrap();
    for sub in ["gen", "train", "calibrate", "tune", "bench", "render"] {
        let text = ok(&qdtune(&[sub, "--help"], tmp.path()));
        assert!(text.contains("Usage"), "{sub}");
    }
}

#[test]
fn tune_is_reproducible_and_renders() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&qdtune(&["gen", "--count", "1", "--seed", "3", "--out", "d"], tmp.path()));
    let m = &manifests(&tmp.path().join("d"))[0];
    let args = ["tune", "--diagram", m, "--oracle", "--seed", "1", "--trace", "t.svg"];
    let a = ok(&qdtune(&args, tmp.path()));
    let b = ok(&qdtune(&args, tmp.path()));
    assert_eq!(a, b);
    let outcome: serde_json::Value = serde_json::from_str(&a).unwrap();
    let steps = outcome["steps"].as_u64().unwrap() as usize;
    let svg = fs::read_to_string(tmp.path().join("t.svg")).unwrap();
    assert_eq!(svg.matches("<rect").count(), steps);

    fs::write(tmp.path().join("o.json"), &a).unwrap();
    ok(&qdtune(&["render", "--diagram", m, "--outcome", "o.json", "--out", "r.svg"], tmp.path()));
    assert_eq!(fs::read_to_string(tmp.path().join("r.svg")).unwrap(), svg);

    let out = qdtune(&["tune", "--diagram", m, "--oracle", "--start", "9,9"], tmp.path());
    assert!(!out.status.success());
}

#[test]
fn train_calibrate_tune_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    ok(&qdtune(&["gen", "--count", "2", "--seed", "5", "--out", "train"], p));
    ok(&qdtune(&["gen", "--count", "1", "--seed", "6", "--out", "val"], p));
    ok(&qdtune(&["train", "--spec", "ff", "--data", "train", "--out", "m.qdt", "--updates", "30", "--seed", "2"], p));
    let before = fs::read(p.join("m.qdt")).unwrap();
    let printed = ok(&qdtune(&["calibrate", "--model", "m.qdt", "--val", "val", "--tau", "0.2", "--out", "c.qdt"], p));
    assert_eq!(fs::read(p.join("m.qdt")).unwrap(), before, "input checkpoint untouched");
    let t: serde_json::Value = serde_json::from_str(&printed).unwrap();
    assert!(t["t_line"].as_f64().unwrap() >= 0.5);
    let m = &manifests(&p.join("val"))[0];
    let a = ok(&qdtune(&["tune", "--diagram", m, "--model", "c.qdt", "--seed", "4"], p));
    let b = ok(&qdtune(&["tune", "--diagram", m, "--model", "c.qdt", "--seed", "4"], p));
    assert_eq!(a, b);
}

#[test]
fn bench_results_do_not_depend_on_jobs() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path();
    ok(&qdtune(&["gen", "--count", "2", "--seed", "9", "--out", "d"], p));
    let diagrams: Vec<String> = manifests(&p.join("d"))
        .iter()
        .map(|m| Path::new(m).strip_prefix(p).unwrap().to_string_lossy().into_owned())
        .collect();
    let cfg = serde_json::json!({
        "diagrams": diagrams,
        "profile": "si-sg",
        "folds": "cross_validation",
        "seeds": 2,
        "starts_per_diagram": 5,
        "baseline": "oracle",
        "master_seed": 11
    });
    fs::write(p.join("exp.json"), cfg.to_string()).unwrap();
    ok(&qdtune(&["bench", "--config", "exp.json", "--out", "r1.json", "--csv", "r1.csv", "--jobs", "1"], p));
    ok(&qdtune(&["bench", "--config", "exp.json", "--out", "r4.json", "--jobs", "4"], p));
    let r1 = fs::read_to_string(p.join("r1.json")).unwrap();
    assert_eq!(r1, fs::read_to_string(p.join("r4.json")).unwrap());
    let csv = fs::read_to_string(p.join("r1.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 5);
}
