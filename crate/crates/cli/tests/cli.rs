use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cfgdist_cli::Scenario;
use serde_json::Value;

fn scenarios_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")
}

fn cfgdist(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfgdist")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = cfgdist(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

/// Shipped scenario with training shortened, written into `dir`.
fn short(dir: &Path, name: &str, steps: usize) -> PathBuf {
    let mut sc = Scenario::load(&scenarios_dir().join(format!("{name}.json"))).unwrap();
    sc.train.steps = steps;
    let p = dir.join(format!("{name}.json"));
    fs::write(&p, sc.to_json()).unwrap();
    p
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn every_shipped_scenario_validates() {
    let mut n = 0;
    for entry in fs::read_dir(scenarios_dir()).unwrap() {
        let p = entry.unwrap().path();
        if p.extension().is_some_and(|e| e == "json") {
            let sc = Scenario::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            assert_eq!(format!("{}.json", sc.name), p.file_name().unwrap().to_str().unwrap());
            let back: Scenario = serde_json::from_str(&sc.to_json()).unwrap();
            assert_eq!(back, sc);
            n += 1;
        }
    }
    assert_eq!(n, 27);
}

#[test]
fn fit_evaluate_sample_round() {
    let dir = tempfile::tempdir().unwrap();
    let sc = short(dir.path(), "line2dof_banana_k10", 300);
    let out = dir.path().join("fit");
    ok(&["fit", "--scenario", s(&sc), "--out", s(&out)]);
    let params = out.join("params.json");
    assert_eq!(json(&params)["family"], "banana");
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), "step,loss,grad_norm");
    assert_eq!(trace.lines().count(), 301);

    ok(&["evaluate", "--scenario", s(&sc), "--params", s(&params), "--out", s(&out)]);
    let m = json(&out.join("metrics.json"));
    for key in ["bhattacharyya", "ovl", "alpha_half", "log_c", "runtime_s"] {
        assert!(m[key].is_number(), "{key}");
    }
    let bc = m["bhattacharyya"].as_f64().unwrap();
    assert_eq!(m["alpha_half"].as_f64().unwrap(), 2.0 * (1.0 - bc));
    let heat = fs::read_to_string(out.join("heatmap_p.csv")).unwrap();
    assert_eq!(heat.lines().next().unwrap(), "q0,q1,density");
    assert_eq!(heat.lines().count(), 256 * 256 + 1);

    // against itself
    let selfdir = dir.path().join("self");
    ok(&["evaluate", "--scenario", s(&sc), "--params", s(&params), "--params", s(&params), "--out", s(&selfdir)]);
    let m = json(&selfdir.join("metrics.json"));
    assert!((m["bhattacharyya"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(m["alpha_half"].as_f64().unwrap().abs() < 1e-11);

    let sdir = dir.path().join("sample");
    ok(&["sample", "--scenario", s(&sc), "--params", s(&params), "--count", "50", "--out", s(&sdir)]);
    let csv = fs::read_to_string(sdir.join("samples.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "q0,q1,component,tip1_x,tip1_y");
    assert_eq!(csv.lines().count(), 51);

    let zdir = dir.path().join("zero");
    ok(&["sample", "--params", s(&params), "--count", "0", "--out", s(&zdir)]);
    assert_eq!(fs::read_to_string(zdir.join("samples.csv")).unwrap(), "q0,q1,component\n");
}

#[test]
fn invalid_frame_exits_2_naming_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut v = json(&scenarios_dir().join("line2dof_gaussian_k1.json"));
    v["experts"][0]["transformation"]["inner"]["frame"] = 5.into();
    let p = dir.path().join("bad.json");
    fs::write(&p, v.to_string()).unwrap();
    let out = cfgdist(&["fit", "--scenario", s(&p), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("frame") && err.contains("experts[0].transformation"), "{err}");
}

#[test]
fn malformed_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("typo.json");
    fs::write(&p, r#"{"name": "x", "experts": [], "variational": {"family": "gaussian", "k": 1}, "trian": {}}"#).unwrap();
    let out = cfgdist(&["fit", "--scenario", s(&p)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("trian"));
    assert_eq!(cfgdist(&["fit"]).status.code(), Some(2));
    assert_eq!(cfgdist(&["product", "--params", s(&p)]).status.code(), Some(2));
    assert_eq!(cfgdist(&["launch"]).status.code(), Some(2));
    let missing = cfgdist(&["fit", "--scenario", s(&dir.path().join("nope.json"))]);
    assert_eq!(missing.status.code(), Some(1));
}

#[test]
fn conditional_sampling_requires_task_values() {
    let dir = tempfile::tempdir().unwrap();
    let sc = short(dir.path(), "cond2dof_moe", 50);
    let out = dir.path().join("moe");
    ok(&["fit", "--scenario", s(&sc), "--out", s(&out)]);
    let params = out.join("params.json");
    assert_eq!(json(&params)["family"], "moe");
    let r = cfgdist(&["sample", "--params", s(&params), "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("y"));
    assert_eq!(cfgdist(&["sample", "--params", s(&params), "--y", "1.2", "--out", s(&out)]).status.code(), Some(2));
    ok(&["sample", "--scenario", s(&sc), "--params", s(&params), "--y", "1.2,0.5", "--count", "10", "--out", s(&out)]);
    let csv = fs::read_to_string(out.join("samples.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "q0,q1,tip1_x,tip1_y");
    assert_eq!(csv.lines().count(), 11);
    ok(&["evaluate", "--scenario", s(&sc), "--params", s(&params), "--out", s(&out)]);
    assert_eq!(json(&out.join("diagnostics.json"))["samples"], 1000);
}

#[test]
fn product_of_single_gaussian_with_itself_halves_variance() {
    let dir = tempfile::tempdir().unwrap();
    let sc = short(dir.path(), "line2dof_gaussian_k1", 200);
    let out = dir.path().join("fit");
    ok(&["fit", "--scenario", s(&sc), "--out", s(&out)]);
    let params = out.join("params.json");
    ok(&["product", "--params", s(&params), "--params", s(&params), "--out", s(&out)]);
    let a = json(&params);
    let p = json(&out.join("product.json"));
    assert_eq!(p["k"], 1);
    let tril = |v: &Value| -> Vec<f64> { v["components"][0]["scale_tril"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect() };
    // packed lower triangle (l00, l10, l11): Σ = L Lᵀ
    let cov = |l: &[f64]| [l[0] * l[0], l[0] * l[1], l[1] * l[1] + l[2] * l[2]];
    let (ca, cp) = (cov(&tril(&a)), cov(&tril(&p)));
    for i in 0..3 {
        assert!((cp[i] - 0.5 * ca[i]).abs() < 1e-12 * ca[i].abs().max(1.0), "{cp:?} vs {ca:?}");
    }
    let mean = |v: &Value| -> Vec<f64> { v["components"][0]["mean"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect() };
    for (x, y) in mean(&p).iter().zip(mean(&a)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn connectivity_with_large_epsilon_isolates_components() {
    let dir = tempfile::tempdir().unwrap();
    let sc = short(dir.path(), "line2dof_gaussian_k5", 200);
    let out = dir.path().join("fit");
    ok(&["fit", "--scenario", s(&sc), "--out", s(&out)]);
    let params = out.join("params.json");
    ok(&["connectivity", "--params", s(&params), "--epsilon", "1e9", "--out", s(&out)]);
    let c = json(&out.join("connectivity.json"));
    assert_eq!(c["groups"], 5);
    assert_eq!(c["edges"].as_array().unwrap().len(), 0);
    ok(&["connectivity", "--params", s(&params), "--epsilon", "0", "--out", s(&out)]);
    assert_eq!(json(&out.join("connectivity.json"))["groups"], 1);
}

#[test]
fn hmc_writes_samples_and_rates() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("hmc");
    ok(&["hmc", "--scenario", s(&scenarios_dir().join("learn1d_gaussian_truth.json")), "--out", s(&out)]);
    let h = json(&out.join("hmc.json"));
    let rate = h["acceptance_rate"].as_f64().unwrap();
    assert!(rate > 0.0 && rate <= 1.0);
    assert_eq!(h["rows"], 500);
    assert_eq!(fs::read_to_string(out.join("samples.csv")).unwrap().lines().count(), 501);
}

#[test]
fn learn_writes_back_the_scenario() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("learn");
    let sc = scenarios_dir().join("learn1d_gaussian.json");
    ok(&["learn", "--scenario", s(&sc), "--out", s(&out)]);
    let learned = Scenario::load(&out.join("learned.json")).unwrap();
    let original = Scenario::load(&sc).unwrap();
    assert_eq!(learned.name, original.name);
    assert_ne!(learned.experts[0].density, original.experts[0].density);
    let trace = fs::read_to_string(out.join("learn_trace.csv")).unwrap();
    assert_eq!(trace.lines().next().unwrap(), "iteration,log_likelihood,log_c");
    let summary = json(&out.join("learn.json"));
    assert!(summary["likelihood_gain"].as_f64().unwrap() >= 0.0);
}

#[test]
fn rank_tasks_lists_every_assignment() {
    let dir = tempfile::tempdir().unwrap();
    let sc = short(dir.path(), "planar_humanoid_unigauss_hier", 300);
    ok(&["rank-tasks", "--scenario", s(&sc), "--importance-samples", "500", "--out", s(dir.path())]);
    let r = json(&dir.path().join("ranking.json"));
    let rows = r.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    let masses: Vec<f64> = rows.iter().map(|c| c["log_mass"].as_f64().unwrap()).collect();
    assert!(masses[0] >= masses[1]);
    let flat = short(dir.path(), "planar_humanoid_unigauss_flat", 10);
    assert_eq!(cfgdist(&["rank-tasks", "--scenario", s(&flat), "--out", s(dir.path())]).status.code(), Some(2));
}
