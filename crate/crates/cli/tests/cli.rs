use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn accmv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_accmv"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn simulate(dir: &TempDir, design: &str, n: usize, seed: u64) -> PathBuf {
    let path = dir.path().join(format!("{design}-{n}-{seed}.csv"));
    let out = accmv(&[
        "simulate",
        "--design",
        design,
        "--n",
        &n.to_string(),
        "--seed",
        &seed.to_string(),
        "-o",
        path_str(&path),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    path
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn influence(report: &Value) -> (f64, f64) {
    let ci = &report["intervals"][0];
    assert_eq!(ci["method"], "influence");
    (ci["estimate"].as_f64().unwrap(), ci["se"].as_f64().unwrap())
}

#[test]
fn simulate_needs_a_seed_and_is_deterministic() {
    let out = accmv(&["simulate", "--design", "single", "--n", "10"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("--seed"));
    let a = accmv(&["simulate", "--design", "multiple", "--n", "50", "--seed", "4"]);
    let b = accmv(&["simulate", "--design", "multiple", "--n", "50", "--seed", "4"]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    assert!(String::from_utf8_lossy(&a.stdout).starts_with("Y1,Y2,Y3,Y4\n"));
}

#[test]
fn fit_ra_recovers_the_single_design_truth() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, "single", 2000, 21);
    let report = dir.path().join("fit.json");
    let out = accmv(&[
        "fit",
        "--data",
        path_str(&data),
        "--x",
        "Y1,Y2",
        "--l",
        "Y3",
        "--method",
        "ra",
        "-o",
        path_str(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let r = json(&report);
    let (est, se) = influence(&r);
    assert!(((est - 89.0 / 96.0) / se).abs() < 3.0, "{est} ± {se}");
    assert_eq!(r["config"]["method"], "ra");
    assert_eq!(r["strata"].as_array().unwrap().len(), 8);
}

#[test]
fn fit_on_complete_data_is_the_sample_mean() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("complete.csv");
    let vals = [1.5, -0.25, 3.0, 2.0, 0.5, 4.25, -1.0, 2.5];
    let mut text = String::from("x,y\n");
    for (i, v) in vals.iter().enumerate() {
        text += &format!("{},{v}\n", i as f64 * 0.1);
    }
    std::fs::write(&data, text).unwrap();
    let mean = vals.iter().sum::<f64>() / 8.0;
    let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0).sqrt();
    for method in ["ipw", "ra", "mr", "cc"] {
        let report = dir.path().join(format!("{method}.json"));
        let out = accmv(&[
            "fit",
            "--data",
            path_str(&data),
            "--x",
            "x",
            "--l",
            "y",
            "--method",
            method,
            "-o",
            path_str(&report),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        let (est, se) = influence(&json(&report));
        assert!((est - mean).abs() < 1e-12, "{method}");
        assert!((se - sd / 8f64.sqrt()).abs() < 1e-12, "{method}");
    }
}

#[test]
fn small_strata_fail_with_the_fit_code_and_name_the_pair() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, "single", 300, 22);
    let out = accmv(&[
        "fit",
        "--data",
        path_str(&data),
        "--x",
        "Y1,Y2",
        "--l",
        "Y3",
        "--method",
        "mr",
        "--n-min",
        "100",
    ]);
    assert_eq!(code(&out), 4);
    assert!(stderr(&out).contains("(R="), "{}", stderr(&out));
}

#[test]
fn bad_inputs_map_to_distinct_codes() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "x,y\n1,2\n3,oops\n").unwrap();
    let out = accmv(&["fit", "--data", path_str(&bad), "--x", "x", "--l", "y"]);
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    let out = accmv(&[
        "fit",
        "--data",
        path_str(&bad),
        "--x",
        "x",
        "--l",
        "y",
        "--method",
        "bogus",
    ]);
    assert_eq!(code(&out), 2);
    let missing = dir.path().join("nope.csv");
    let out = accmv(&["fit", "--data", path_str(&missing), "--x", "x", "--l", "y"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn regress_recovers_coefficients_and_rejects_ra() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, "mpm", 4000, 23);
    let report = dir.path().join("reg.json");
    let base = [
        "regress",
        "--data",
        path_str(&data),
        "--x",
        "Y1",
        "--l",
        "Y2,Y3",
        "--response",
        "Y3",
        "--regressors",
        "Y2",
    ];
    let mut args = base.to_vec();
    args.extend(["-o", path_str(&report)]);
    let out = accmv(&args);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let r = json(&report);
    for (k, truth) in [(0, -1.0), (1, 0.5)] {
        let c = &r["coefficients"][k];
        let z = (c["estimate"].as_f64().unwrap() - truth) / c["se"].as_f64().unwrap();
        assert!(z.abs() < 4.0, "{c}");
    }
    let mut args = base.to_vec();
    args.extend(["--method", "ra"]);
    let out = accmv(&args);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("congeniality"));
}

#[test]
fn regress_on_complete_data_is_ols() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("ols.csv");
    let xs = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
    let ys = [1.0, 2.5, 2.0, 4.5, 5.0, 7.5];
    let mut text = String::from("z,x,y\n");
    for (x, y) in xs.iter().zip(&ys) {
        text += &format!("0,{x},{y}\n");
    }
    std::fs::write(&data, text).unwrap();
    let report = dir.path().join("ols.json");
    let out = accmv(&[
        "regress",
        "--data",
        path_str(&data),
        "--x",
        "z",
        "--l",
        "x,y",
        "--response",
        "y",
        "--regressors",
        "x",
        "-o",
        path_str(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let mx = xs.iter().sum::<f64>() / 6.0;
    let my = ys.iter().sum::<f64>() / 6.0;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let b1 = sxy / sxx;
    let r = json(&report);
    assert!((r["coefficients"][1]["estimate"].as_f64().unwrap() - b1).abs() < 1e-12);
    assert!((r["coefficients"][0]["estimate"].as_f64().unwrap() - (my - b1 * mx)).abs() < 1e-12);
}

#[test]
fn table_with_one_replicate_reports_raw_values() {
    let out = accmv(&[
        "table",
        "--table",
        "1",
        "--replicates",
        "1",
        "--n",
        "1000",
        "--seed",
        "3",
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert!(lines.next().unwrap().starts_with("row,truth"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 9);
    for row in rows {
        let coverage = row.rsplit(',').next().unwrap();
        assert!(coverage == "0.0" || coverage == "1.0", "{row}");
    }
}

#[test]
fn sensitivity_at_zero_matches_self_normalized_ipw() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, "single", 2000, 24);
    let report = dir.path().join("fit.json");
    let out = accmv(&[
        "fit",
        "--data",
        path_str(&data),
        "--x",
        "Y1,Y2",
        "--l",
        "Y3",
        "--method",
        "ipw",
        "--self-normalize",
        "-o",
        path_str(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let (sn, _) = influence(&json(&report));

    let curve = dir.path().join("curve.csv");
    let out = accmv(&[
        "sensitivity",
        "--data",
        path_str(&data),
        "--x",
        "Y1,Y2",
        "--l",
        "Y3",
        "--delta",
        "1",
        "--grid",
        "-1,-0.5,0,0.5,1",
        "--bootstrap",
        "40",
        "--seed",
        "2",
        "-o",
        path_str(&curve),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = std::fs::read_to_string(&curve).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 5);
    assert!((rows[2][1] - sn).abs() < 1e-12, "{} vs {sn}", rows[2][1]);
    assert!(rows.windows(2).all(|w| w[1][1] > w[0][1]));
    assert!(text.starts_with("delta,estimate,ci_lo,ci_hi\n"));
}

#[test]
fn config_file_overrides_flags() {
    let dir = TempDir::new().unwrap();
    let data = simulate(&dir, "single", 1000, 25);
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "method = \"ipw\"\n[fit]\nn_min = 12\n").unwrap();
    let report = dir.path().join("fit.json");
    let out = accmv(&[
        "--config",
        path_str(&cfg),
        "fit",
        "--data",
        path_str(&data),
        "--x",
        "Y1,Y2",
        "--l",
        "Y3",
        "--method",
        "ra",
        "-o",
        path_str(&report),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let r = json(&report);
    assert_eq!(r["method"], "ipw");
    assert_eq!(r["config"]["n_min"], 12);

    std::fs::write(&cfg, "methd = \"ipw\"\n").unwrap();
    let out = accmv(&[
        "--config",
        path_str(&cfg),
        "fit",
        "--data",
        path_str(&data),
        "--x",
        "Y1,Y2",
        "--l",
        "Y3",
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("methd"));

    std::fs::write(&cfg, "seed = 5\nreplicates = 2\nn = 500\ntable = 3\n").unwrap();
    let out = accmv(&["--config", path_str(&cfg), "table"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
}

#[test]
fn verify_oracles_rejects_small_samples() {
    let out = accmv(&["verify-oracles", "--design", "single", "--n", "1000"]);
    assert_eq!(code(&out), 2);
}
