use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tumor_core::growth::{init_seed, SolverConfig};
use tumor_core::surrogate::{save_weights, NetConfig, ParamRanges, SurrogateWeights};
use tumor_core::volumes::{load_anatomy, load_volume};

fn tumor(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tumor")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = tumor(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn anatomy(dir: &Path, side: usize, seed: u64) -> std::path::PathBuf {
    let p = dir.join(format!("anat{seed}"));
    let dims = format!("{side},{side},{side}");
    ok(&["gen-anatomy", "--dims", &dims, "--seed", &seed.to_string(), "--out", s(&p)]);
    p
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

const CENTER: [&str; 6] = ["--x", "0.5", "--y", "0.5", "--z", "0.5"];

#[test]
fn simulate_at_time_zero_is_the_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = anatomy(dir.path(), 16, 1);
    let out = dir.path().join("u0");
    let mut args = vec!["simulate", "--anatomy", s(&a), "--d-w", "0.05", "--rho", "0.01", "--t", "0", "--out", s(&out)];
    args.extend(CENTER);
    ok(&args);
    let u = load_volume(&out).unwrap();
    let want = init_seed(&load_anatomy(&a).unwrap(), [0.5; 3], &SolverConfig::default()).unwrap();
    for (x, y) in u.data().iter().zip(want.data()) {
        assert_eq!(*x, *y as f32 as f64);
    }
}

#[test]
fn empty_and_small_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let a = anatomy(dir.path(), 16, 2);
    let d0 = dir.path().join("d0");
    ok(&["gen-dataset", "--anatomies", s(&a), "--count", "0", "--crop-side", "8", "--out", s(&d0)]);
    assert_eq!(json(&d0.join("dataset.json"))["samples"], serde_json::json!([]));

    let d2 = dir.path().join("d2");
    ok(&["gen-dataset", "--anatomies", s(&a), "--count", "2", "--crop-side", "8", "--out", s(&d2), "--seed", "4"]);
    let m = json(&d2.join("dataset.json"));
    assert_eq!(m["samples"].as_array().unwrap().len(), 2);
    let p = json(&d2.join("sample_00001/params.json"));
    let t = p["T"].as_f64().unwrap();
    assert_eq!(t % 50.0, 0.0);
    assert_eq!(load_volume(&d2.join("sample_00001/tumor")).unwrap().dims(), [8; 3]);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let a = anatomy(dir.path(), 16, 3);
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"sampler": {"population_n": 16, "bogus": 1}}"#).unwrap();
    let mut args = vec!["simulate", "--anatomy", s(&a), "--d-w", "0.05", "--rho", "0.01", "--t", "10", "--out", "x"];
    args.extend(CENTER);
    args.extend(["--config", s(&cfg)]);
    assert_eq!(tumor(&args).status.code(), Some(2));

    let obs = dir.path().join("obs");
    let r = tumor(&["calibrate", "--anatomy", s(&a), "--observation", s(&obs), "--forward", "surrogate", "--out", "x"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("--weights"));

    // clap usage errors share the code
    assert_eq!(tumor(&["calibrate", "--forward", "magic"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["simulate", "--anatomy", "/nonexistent/anatomy", "--d-w", "0.05", "--rho", "0.01", "--t", "10", "--out", "x"];
    args.extend(CENTER);
    assert_eq!(tumor(&args).status.code(), Some(3));

    let a = anatomy(dir.path(), 16, 3);
    // background corner
    let r = tumor(&[
        "simulate", "--anatomy", s(&a), "--d-w", "0.05", "--rho", "0.01", "--t", "10", "--x", "0", "--y", "0", "--z", "0",
        "--out", "x",
    ]);
    assert_eq!(r.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&r.stderr).contains("seed outside tissue"));
}

fn synthetic_case(dir: &Path) -> (std::path::PathBuf, std::path::PathBuf) {
    let a = anatomy(dir, 16, 5);
    let truth = dir.join("truth");
    let mut args = vec!["simulate", "--anatomy", s(&a), "--d-w", "0.05", "--rho", "0.02", "--t", "300", "--out", s(&truth)];
    args.extend(CENTER);
    ok(&args);
    let obs = dir.join("obs");
    ok(&[
        "synth-obs", "--anatomy", s(&a), "--tumor", s(&truth), "--uc-t1c", "0.7", "--uc-flair", "0.25", "--sigma-alpha",
        "0.06", "--b", "0.8", "--sigma", "0.05", "--seed", "1", "--out", s(&obs),
    ]);
    (a, obs)
}

#[test]
fn constant_likelihood_calibration_is_one_stage() {
    let dir = tempfile::tempdir().unwrap();
    let (a, obs) = synthetic_case(dir.path());
    let out = dir.path().join("cal");
    let r = ok(&[
        "calibrate", "--anatomy", s(&a), "--observation", s(&obs), "--constant-likelihood", "--population", "64", "--out",
        s(&out),
    ]);
    let sum = json(&out.join("summary.json"));
    assert_eq!(sum["stage_p"], serde_json::json!([0.0, 1.0]));
    assert_eq!(sum["config"]["run"]["sampler"]["population_n"], 64);
    let err = String::from_utf8_lossy(&r.stderr);
    assert!(err.contains("stage 0 p=0.000000") && err.contains("stage 1 p=1.000000"), "{err}");
    let csv = fs::read_to_string(out.join("stage_001.csv")).unwrap();
    assert_eq!(csv.lines().count(), 65);
    assert_eq!(csv.lines().next().unwrap().split(',').count(), 13);
}

#[test]
fn calibration_is_reproducible_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (a, obs) = synthetic_case(dir.path());
    let run = |name: &str, workers: &str| {
        let out = dir.path().join(name);
        ok(&[
            "calibrate", "--anatomy", s(&a), "--observation", s(&obs), "--population", "16", "--seed", "3", "--workers",
            workers, "--out", s(&out),
        ]);
        out
    };
    let (one, two) = (run("w1", "1"), run("w2", "2"));
    let stages = json(&one.join("summary.json"))["stage_p"].as_array().unwrap().len();
    assert!(stages >= 2);
    for k in 0..stages {
        let f = format!("stage_{k:03}.csv");
        assert_eq!(fs::read(one.join(&f)).unwrap(), fs::read(two.join(&f)).unwrap(), "{f}");
    }
    assert!(one.join("map_tumor.raw").exists());
    assert_eq!(json(&one.join("map_theta.json")), json(&two.join("map_theta.json")));
}

#[test]
fn predict_and_evaluate_with_weights() {
    let dir = tempfile::tempdir().unwrap();
    let a = anatomy(dir.path(), 16, 6);
    let cfg = NetConfig {
        side: 8,
        channels: 4,
        convs_per_block: 1,
        levels: 2,
        param_count: 3,
    };
    let wpath = dir.path().join("w.tgsw");
    save_weights(&SurrogateWeights::random(cfg, ParamRanges::default(), 1).unwrap(), &wpath).unwrap();

    let pred = dir.path().join("pred");
    let mut args = vec!["predict", "--anatomy", s(&a), "--weights", s(&wpath), "--d-w", "0.05", "--rho", "0.01", "--t", "200", "--out", s(&pred)];
    args.extend(CENTER);
    ok(&args);
    let u = load_volume(&pred).unwrap();
    assert_eq!(u.dims(), [16; 3]);
    assert!(u.data().iter().all(|v| (0.0..=1.0).contains(v)));

    // out of the training range
    let mut args = vec!["predict", "--anatomy", s(&a), "--weights", s(&wpath), "--d-w", "0.5", "--rho", "0.01", "--t", "200", "--out", s(&pred)];
    args.extend(CENTER);
    assert_eq!(tumor(&args).status.code(), Some(3));

    let rep = dir.path().join("rep");
    ok(&["evaluate", "--pred", s(&pred), "--sim", s(&pred), "--anatomy", s(&a), "--out", s(&rep)]);
    let r = json(&rep.join("report.json"));
    assert_eq!(r["report"]["dice"][0]["mean"], 1.0);
    assert_eq!(r["report"]["mae_tumor"]["mean"], 0.0);

    let ds = dir.path().join("ds");
    ok(&["gen-dataset", "--anatomies", s(&a), "--count", "3", "--crop-side", "8", "--out", s(&ds)]);
    let rep = dir.path().join("rep2");
    ok(&["evaluate", "--dataset", s(&ds), "--weights", s(&wpath), "--out", s(&rep)]);
    let csv = fs::read_to_string(rep.join("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().nth(1).unwrap().starts_with("sample_00000,"));
}
