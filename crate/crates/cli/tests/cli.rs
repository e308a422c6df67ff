use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const N: usize = 60;
const P: usize = 40;

fn ecpc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecpc")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn write_x(path: &Path, names: &[String], x: &[Vec<f64>]) {
    let mut t = names.join(",");
    t.push('\n');
    for row in x {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        t.push_str(&cells.join(","));
        t.push('\n');
    }
    fs::write(path, t).unwrap();
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    names: Vec<String>,
    x: Vec<Vec<f64>>,
}

impl Fixture {
    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

/// Binomial data with signal in the first ten covariates and a two-group
/// grouping that separates them.
fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let names: Vec<String> = (1..=P).map(|k| format!("g{k}")).collect();
    let x: Vec<Vec<f64>> = (0..N).map(|_| (0..P).map(|_| StandardNormal.sample(&mut rng)).collect()).collect();
    let y: Vec<u8> = x
        .iter()
        .map(|r| {
            let eta: f64 = r[..10].iter().sum::<f64>() * 0.6;
            u8::from(rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp()))
        })
        .collect();
    write_x(&root.join("x.csv"), &names, &x);
    let mut yt = String::from("y\n");
    for v in &y {
        yt.push_str(&format!("{v}\n"));
    }
    fs::write(root.join("y.csv"), yt).unwrap();
    let signal: Vec<usize> = (1..=10).collect();
    let rest: Vec<usize> = (11..=P).collect();
    fs::write(root.join("groups.json"), serde_json::json!({ "signal": signal, "rest": rest }).to_string()).unwrap();
    Fixture { _dir: dir, root, names, x }
}

fn fit(f: &Fixture, out: &str, extra: &[&str]) -> Output {
    let (x, y, g, o) = (s(&f.path("x.csv")), s(&f.path("y.csv")), s(&f.path("groups.json")), s(&f.path(out)));
    let mut args = vec![
        "--command", "fit", "--x", &x, "--y", &y, "--family", "binomial", "--codata", &g, "--folds", "3", "--splits",
        "3", "--seed", "5", "--out", &o,
    ];
    args.extend_from_slice(extra);
    ecpc(&args)
}

fn predictions(path: &Path) -> Vec<f64> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect()
}

fn predict(f: &Fixture, model: &Path, x: &Path, out: &str) -> Output {
    ecpc(&["--command", "predict", "--model", &s(model), "--x", &s(x), "--out", &s(&f.path(out))])
}

#[test]
fn missing_codata_file_is_a_usage_error_naming_the_path() {
    let f = fixture();
    let missing = f.path("nope.json");
    let out = ecpc(&[
        "--command", "fit", "--x", &s(&f.path("x.csv")), "--y", &s(&f.path("y.csv")), "--family", "binomial",
        "--codata", &s(&missing), "--seed", "1",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&s(&missing)));
}

#[test]
fn non_finite_input_reports_coordinates() {
    let f = fixture();
    let mut x = f.x.clone();
    x[3][2] = f64::NAN;
    write_x(&f.path("bad.csv"), &f.names, &x);
    let out = ecpc(&[
        "--command", "fit", "--x", &s(&f.path("bad.csv")), "--y", &s(&f.path("y.csv")), "--family", "binomial",
        "--codata", &s(&f.path("groups.json")), "--seed", "1", "--out", &s(&f.path("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("row 4") && err.contains("g3"), "{err}");
}

#[test]
fn missing_seed_is_rejected() {
    let f = fixture();
    let out = ecpc(&[
        "--command", "fit", "--x", &s(&f.path("x.csv")), "--y", &s(&f.path("y.csv")), "--family", "binomial",
        "--codata", &s(&f.path("groups.json")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn model_round_trip_and_column_order() {
    let f = fixture();
    let out = fit(&f, "fit", &["--select", "l1:5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for file in ["model.json", "group_weights.csv", "fit.log", "selection.csv", "model_selected.json"] {
        assert!(f.path("fit").join(file).exists(), "{file}");
    }
    let model = f.path("fit/model.json");
    assert!(predict(&f, &model, &f.path("x.csv"), "p1").status.success());
    let a = predictions(&f.path("p1/predictions.csv"));
    assert_eq!(a.len(), N);

    // The same predictions with the columns stored in reverse order.
    let rev: Vec<usize> = (0..P).rev().collect();
    let names: Vec<String> = rev.iter().map(|&k| f.names[k].clone()).collect();
    let x: Vec<Vec<f64>> = f.x.iter().map(|r| rev.iter().map(|&k| r[k]).collect()).collect();
    write_x(&f.path("xrev.csv"), &names, &x);
    assert!(predict(&f, &model, &f.path("xrev.csv"), "p2").status.success());
    let b = predictions(&f.path("p2/predictions.csv"));
    for (u, v) in a.iter().zip(&b) {
        assert!((u - v).abs() <= 1e-12 * (1.0 + u.abs()));
    }

    let sel = fs::read_to_string(f.path("fit/selection.csv")).unwrap();
    assert_eq!(sel.lines().count(), 1 + 5);
    assert!(predict(&f, &f.path("fit/model_selected.json"), &f.path("x.csv"), "p3").status.success());
}

#[test]
fn empty_design_predicts_nothing() {
    let f = fixture();
    assert!(fit(&f, "fit", &[]).status.success());
    write_x(&f.path("empty.csv"), &f.names, &[]);
    let out = predict(&f, &f.path("fit/model.json"), &f.path("empty.csv"), "pe");
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(f.path("pe/predictions.csv")).unwrap();
    assert_eq!(text.lines().count(), 1);
}

#[test]
fn intercept_flag_matches_manual_unpenalised_column() {
    let f = fixture();
    assert!(fit(&f, "auto", &["--intercept"]).status.success());
    let mut names = f.names.clone();
    names.push("one".into());
    let x: Vec<Vec<f64>> = f.x.iter().map(|r| r.iter().copied().chain([1.0]).collect()).collect();
    write_x(&f.path("x1.csv"), &names, &x);
    let (y, g, o) = (s(&f.path("y.csv")), s(&f.path("groups.json")), s(&f.path("manual")));
    let x1 = s(&f.path("x1.csv"));
    let out = ecpc(&[
        "--command", "fit", "--x", &x1, "--y", &y, "--family", "binomial", "--codata", &g, "--folds", "3",
        "--splits", "3", "--seed", "5", "--out", &o, "--unpenalized", "one",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let beta = |p: &Path| -> Vec<f64> {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap();
        v["beta"].as_array().unwrap().iter().map(|b| b.as_f64().unwrap()).collect()
    };
    let a = beta(&f.path("auto/model.json"));
    let b = beta(&f.path("manual/model.json"));
    assert_eq!(a.len(), P + 1);
    for (u, v) in a.iter().zip(&b) {
        assert!((u - v).abs() < 1e-10, "{u} vs {v}");
    }
}

#[test]
fn cv_on_separable_data_has_unit_auc() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let names: Vec<String> = (1..=20).map(|k| format!("c{k}")).collect();
    let mut x = Vec::new();
    let mut y = String::from("y\n");
    for i in 0..40 {
        let label = i % 2;
        let mut row: Vec<f64> = (0..20)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                0.1 * e
            })
            .collect();
        row[0] = if label == 1 { 3.0 } else { -3.0 } + 0.1 * rng.random::<f64>();
        x.push(row);
        y.push_str(&format!("{label}\n"));
    }
    write_x(&root.join("x.csv"), &names, &x);
    fs::write(root.join("y.csv"), y).unwrap();
    let groups: Vec<usize> = (1..=20).collect();
    fs::write(root.join("g.json"), serde_json::json!({ "all": groups }).to_string()).unwrap();
    let out = ecpc(&[
        "--command", "cv", "--x", &s(&root.join("x.csv")), "--y", &s(&root.join("y.csv")), "--family", "binomial",
        "--codata", &s(&root.join("g.json")), "--folds", "4", "--splits", "2", "--seed", "9", "--out",
        &s(&root.join("cv")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(root.join("cv/cv_metrics.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 8);
    for r in rows {
        let cells: Vec<&str> = r.split(',').collect();
        assert_eq!(cells[2], "auc");
        assert_eq!(cells[3].parse::<f64>().unwrap(), 1.0, "{r}");
    }
}

#[test]
fn stability_with_a_shared_seed_overlaps_fully() {
    let f = fixture();
    let cfg = serde_json::json!({
        "command": "stability",
        "x": f.path("x.csv"),
        "y": f.path("y.csv"),
        "family": "binomial",
        "codata": [s(&f.path("groups.json"))],
        "folds": 3,
        "splits": 2,
        "seed": 21,
        "select": "dss:4",
        "out": f.path("st"),
        "stability": { "subsamples": 4, "fraction": 0.6666666666666666, "same_seed": true }
    });
    fs::write(f.path("cfg.json"), cfg.to_string()).unwrap();
    let out = ecpc(&["--config", &s(&f.path("cfg.json"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(f.path("st/stability_overlap.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 4 * 3 / 2);
    for r in rows {
        assert_eq!(r.split(',').nth(2), Some("4"), "{r}");
    }
}

#[test]
fn simulate_is_byte_identical_under_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = |out: &Path| {
        serde_json::json!({
            "command": "simulate",
            "seed": 4,
            "splits": 2,
            "folds": 3,
            "out": out,
            "plot": true,
            "simulate": { "replicates": 2, "n": 30, "n_test": 20, "p": 40, "groups": [1, 4] }
        })
    };
    for run in ["a", "b"] {
        let path = dir.path().join(format!("{run}.json"));
        fs::write(&path, cfg(&dir.path().join(run)).to_string()).unwrap();
        let out = ecpc(&["--config", &s(&path)]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    for file in ["simulate_mse.csv", "simulate_summary.csv", "simulate.gp"] {
        let a = fs::read(dir.path().join("a").join(file)).unwrap();
        let b = fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file}");
    }
    let rows = fs::read_to_string(dir.path().join("a/simulate_mse.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2 * 2 * 2 * 3);
}

#[test]
fn stability_reports_every_pair_and_the_random_baseline() {
    let f = fixture();
    let cfg = serde_json::json!({
        "command": "stability",
        "x": f.path("x.csv"),
        "y": f.path("y.csv"),
        "family": "binomial",
        "codata": [s(&f.path("groups.json"))],
        "folds": 3,
        "splits": 2,
        "seed": 8,
        "select": "l1:25",
        "out": f.path("st50"),
        "stability": { "subsamples": 50 }
    });
    fs::write(f.path("cfg50.json"), cfg.to_string()).unwrap();
    let out = ecpc(&["--config", &s(&f.path("cfg50.json"))]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(f.path("st50/stability_overlap.csv")).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 1225);
    let expected = 25.0 * 25.0 / P as f64;
    assert!(rows.iter().all(|r| r.split(',').nth(3).unwrap().parse::<f64>().unwrap() == expected));
    let per = fs::read_to_string(f.path("st50/stability_subsamples.csv")).unwrap();
    assert_eq!(per.lines().count(), 51);
    assert!(per.lines().skip(1).all(|l| l.split(',').nth(2) == Some("auc")));
}

#[test]
fn gaussian_predictions_on_training_data_are_the_fitted_values() {
    let f = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut yt = String::from("y\n");
    for r in &f.x {
        let e: f64 = StandardNormal.sample(&mut rng);
        yt.push_str(&format!("{}\n", r[..5].iter().sum::<f64>() + e));
    }
    fs::write(f.path("yg.csv"), yt).unwrap();
    let out = ecpc(&[
        "--command", "fit", "--x", &s(&f.path("x.csv")), "--y", &s(&f.path("yg.csv")), "--family", "gaussian",
        "--codata", &s(&f.path("groups.json")), "--seed", "3", "--out", &s(&f.path("gfit")),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(predict(&f, &f.path("gfit/model.json"), &f.path("x.csv"), "gp").status.success());
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.path("gfit/model.json")).unwrap()).unwrap();
    let beta: Vec<f64> = v["beta"].as_array().unwrap().iter().map(|b| b.as_f64().unwrap()).collect();
    let pred = predictions(&f.path("gp/predictions.csv"));
    for (row, lp) in f.x.iter().zip(&pred) {
        let fitted: f64 = row.iter().zip(&beta).map(|(a, b)| a * b).sum();
        assert!((fitted - lp).abs() <= 1e-12 * (1.0 + fitted.abs()), "{fitted} vs {lp}");
    }
}
