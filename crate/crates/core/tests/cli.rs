use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tac_npml::cli::{point_mass_fit, FitFile, MetricsFile, EXIT_USAGE};
use tac_npml::distribution::{make_grid, GridBounds};

fn tac(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tac-npml"))
        .arg("--threads")
        .arg("1")
        .args(args)
        .env_remove("TAC_NPML_CACHE_DIR")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tac(args);
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    assert!(out.status.success(), "{args:?} failed: {stderr}");
    stderr
}

fn p(dir: &Path, rel: &str) -> String {
    dir.join(rel).display().to_string()
}

fn small_dataset(dir: &Path, m: &str) {
    ok(&["simulate", "--out", &p(dir, "data"), "--m", m, "--seed", "3"]);
}

fn small_fit_args<'a>(dir: &'a str, out: &'a str) -> Vec<&'a str> {
    vec!["estimate", "--dataset", dir, "--out", out, "--m1", "6", "--m2", "6", "--mesh", "16"]
}

#[test]
fn missing_dataset_exits_two_with_message() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tac(&["estimate", "--dataset", &p(tmp.path(), "absent.json"), "--out", &p(tmp.path(), "o")]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.json"));
    let out = tac(&["loocv", "--dataset", &p(tmp.path(), "absent.json"), "--out", &p(tmp.path(), "o")]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
}

#[test]
fn bad_config_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    fs::write(&cfg, r#"{"m1": 0}"#).unwrap();
    let out = tac(&["simulate", "--config", &cfg.display().to_string(), "--out", &p(tmp.path(), "o")]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
    fs::write(&cfg, r#"{"grid_size": 3}"#).unwrap();
    let out = tac(&["simulate", "--config", &cfg.display().to_string(), "--out", &p(tmp.path(), "o")]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
}

#[test]
fn default_simulation_writes_nine_episodes() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["simulate", "--out", &p(tmp.path(), "data")]);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("data/manifest.json")).unwrap()).unwrap();
    let episodes = manifest["episodes"].as_array().unwrap();
    assert_eq!(episodes.len(), 9);
    assert!(manifest["config_hash"].is_string());
    for e in episodes {
        assert!(e["truth_q"].is_array());
        let csv = fs::read_to_string(tmp.path().join("data").join(e["path"].as_str().unwrap())).unwrap();
        assert!(csv.starts_with("time_hours,brac,tac\n"));
    }
}

#[test]
fn batch_simulation_writes_nested_datasets() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["simulate", "--out", &p(tmp.path(), "batch"), "--m", "1,3,7,9,16,42", "--seed", "4"]);
    for m in [1, 3, 7, 9, 16, 42] {
        let dir = tmp.path().join(format!("batch/m{m}"));
        let manifest: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
        assert_eq!(manifest["episodes"].as_array().unwrap().len(), m);
    }
    // Smaller datasets are prefixes of larger ones.
    let a = fs::read(tmp.path().join("batch/m3/ep002.csv")).unwrap();
    let b = fs::read(tmp.path().join("batch/m42/ep002.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn forward_simulation_csv() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["simulate", "--q", "0.8,1.3", "--mesh", "32", "--out", &p(tmp.path(), "fwd")]);
    let text = fs::read_to_string(tmp.path().join("fwd/output.csv")).unwrap();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    assert_eq!(lines.next(), Some("step,time_hours,tac"));
    assert_eq!(lines.count(), 144);
}

#[test]
fn estimate_writes_outputs_and_uses_cache() {
    let tmp = tempfile::tempdir().unwrap();
    small_dataset(tmp.path(), "5");
    let data = p(tmp.path(), "data/manifest.json");
    let cache = p(tmp.path(), "cache");
    let out1 = p(tmp.path(), "fit1");
    let mut args = small_fit_args(&data, &out1);
    args.extend(["--cache-dir", &cache]);
    let first = ok(&args);
    assert!(first.contains("likelihood cache miss"), "{first}");
    let out2 = p(tmp.path(), "fit2");
    let mut args = small_fit_args(&data, &out2);
    args.extend(["--cache-dir", &cache]);
    let second = ok(&args);
    assert!(second.contains("likelihood cache hit"), "{second}");
    // The output path is part of the config, so compare the fits themselves.
    let fit = FitFile::read(&tmp.path().join("fit1/fit.json")).unwrap();
    let again = FitFile::read(&tmp.path().join("fit2/fit.json")).unwrap();
    assert_eq!(fit.fit, again.fit);
    assert_eq!(fit.likelihood_hash, again.likelihood_hash);
    for name in ["distribution.json", "cdf.csv", "density.csv", "marginal_q1.csv", "marginal_q2.csv"] {
        assert!(tmp.path().join("fit1").join(name).exists(), "{name}");
    }
    assert_eq!(fit.n_episodes, 5);
    assert_eq!(fit.fit.weights.len(), 36);
    assert_eq!(fit.fit.grid.m1, 6);
    assert_eq!(fit.config.n_mesh, 16);
    assert_eq!(fit.config_hash, fit.config.hash());
}

#[test]
fn unconverged_fit_warns_but_succeeds() {
    let tmp = tempfile::tempdir().unwrap();
    small_dataset(tmp.path(), "5");
    let data = p(tmp.path(), "data/manifest.json");
    let out = p(tmp.path(), "fit");
    let mut args = small_fit_args(&data, &out);
    args.extend(["--max-iter", "1"]);
    let stderr = ok(&args);
    assert!(stderr.contains("warning"), "{stderr}");
    let fit = FitFile::read(&tmp.path().join("fit/fit.json")).unwrap();
    assert!(!fit.fit.converged);
    assert!(tmp.path().join("fit/cdf.csv").exists());
}

#[test]
fn metrics_of_fit_against_itself_is_zero() {
    let tmp = tempfile::tempdir().unwrap();
    small_dataset(tmp.path(), "5");
    let data = p(tmp.path(), "data/manifest.json");
    let fit_dir = p(tmp.path(), "fit");
    ok(&small_fit_args(&data, &fit_dir));
    let fit = p(tmp.path(), "fit/fit.json");
    for mode in ["cdf", "cell-mass"] {
        let out = p(tmp.path(), &format!("self-{mode}"));
        ok(&["metrics", "--fit", &fit, "--reference-fit", &fit, "--mode", mode, "--out", &out]);
        let m: MetricsFile = serde_json::from_str(&fs::read_to_string(Path::new(&out).join("metrics.json")).unwrap()).unwrap();
        let d = m.rows[0].d;
        match mode {
            "cdf" => assert_eq!(d, 0.0),
            _ => assert!(d < 1e-24, "{d}"),
        }
    }
    let out = p(tmp.path(), "beta");
    ok(&["metrics", "--fit", &fit, "--out", &out]);
    let m: MetricsFile = serde_json::from_str(&fs::read_to_string(Path::new(&out).join("metrics.json")).unwrap()).unwrap();
    let row = &m.rows[0];
    assert!(row.d > 0.0);
    assert_eq!(row.m, 5);
    assert_eq!((row.nodes, row.n_mesh), (36, 16));
    assert!((row.d_bar_m - row.d / 36.0).abs() < 1e-15);
}

#[test]
fn loocv_is_deterministic_with_one_fold_per_episode() {
    let tmp = tempfile::tempdir().unwrap();
    small_dataset(tmp.path(), "9");
    let data = p(tmp.path(), "data/manifest.json");
    let out = p(tmp.path(), "cv");
    for run in ["a", "b"] {
        ok(&[
            "loocv", "--dataset", &data, "--out", &out, "--m1", "5", "--m2", "5", "--mesh", "16", "--samples", "30", "--seed",
            "8",
        ]);
        fs::rename(&out, tmp.path().join(run)).unwrap();
    }
    let folds = fs::read_dir(tmp.path().join("a/folds")).unwrap().count();
    assert_eq!(folds, 9);
    for name in ["coverage.json", "stats.json", "table_peak_tac.csv", "table_peak_time.csv", "table_auc.csv"] {
        assert_eq!(
            fs::read(tmp.path().join("a").join(name)).unwrap(),
            fs::read(tmp.path().join("b").join(name)).unwrap(),
            "{name}"
        );
    }
    let coverage: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("a/coverage.json")).unwrap()).unwrap();
    assert_eq!(coverage["coverage"]["folds"].as_array().unwrap().len(), 9);
}

#[test]
fn point_mass_fit_predicts_zero_width_bands() {
    let tmp = tempfile::tempdir().unwrap();
    small_dataset(tmp.path(), "2");
    let grid = make_grid(GridBounds::unit(), 4, 4).unwrap();
    let fit = point_mass_fit(grid, 5, 16, 5.0 / 60.0).unwrap();
    let fit_path = tmp.path().join("point.json");
    fs::write(&fit_path, serde_json::to_string_pretty(&fit).unwrap()).unwrap();
    let out = p(tmp.path(), "pred");
    ok(&[
        "predict",
        "--fit",
        &fit_path.display().to_string(),
        "--dataset",
        &p(tmp.path(), "data/manifest.json"),
        "--episode",
        "ep001",
        "--out",
        &out,
    ]);
    let stats: serde_json::Value = serde_json::from_str(&fs::read_to_string(Path::new(&out).join("stats.json")).unwrap()).unwrap();
    assert_eq!(stats["n_samples"], 100);
    for stat in ["peak_tac", "peak_time", "auc"] {
        let s = &stats[stat];
        assert_eq!(s["lower"], s["upper"], "{stat}");
        assert_eq!(s["lower"], s["estimated"], "{stat}");
    }
    let csv = fs::read_to_string(Path::new(&out).join("prediction.csv")).unwrap();
    for line in csv.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[3], f[4]);
        assert_eq!(f[2], f[3]);
    }
}

#[test]
fn predict_needs_an_episode_choice() {
    let tmp = tempfile::tempdir().unwrap();
    small_dataset(tmp.path(), "3");
    let grid = make_grid(GridBounds::unit(), 3, 3).unwrap();
    let fit_path = tmp.path().join("point.json");
    fs::write(&fit_path, serde_json::to_string(&point_mass_fit(grid, 0, 8, 5.0 / 60.0).unwrap()).unwrap()).unwrap();
    let out = tac(&[
        "predict",
        "--fit",
        &fit_path.display().to_string(),
        "--dataset",
        &p(tmp.path(), "data/manifest.json"),
        "--out",
        &p(tmp.path(), "o"),
    ]);
    assert_eq!(out.status.code(), Some(EXIT_USAGE));
}
