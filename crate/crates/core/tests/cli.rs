mod common;

use std::path::{Path, PathBuf};
use std::process::Command;

use chi2tune::cli::{job_config_json, matrix, JobReport};
use chi2tune::gmm::GmmJson;
use chi2tune::lti::LtiSystem;
use chi2tune::residual::{ResidualModel, ResidualModelJson};
use chi2tune::Gmm;
use common::{example_system, rng, table_mixture};
use nalgebra::{DMatrix, DVector};
use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_chi2tune"))
}

fn run(args: &[&str]) -> i32 {
    let out = bin().args(args).output().unwrap();
    out.status.code().unwrap()
}

fn write_config(dir: &Path, v: &Value) -> PathBuf {
    let p = dir.join("config.json");
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn two_output_system() -> LtiSystem {
    LtiSystem::without_input(
        matrix(&[&[0.5, 0.1], &[0.0, 0.4]]),
        DMatrix::identity(2, 2),
        matrix(&[&[0.2, 0.0], &[0.05, 0.1]]),
    )
    .unwrap()
}

fn report(dir: &Path) -> JobReport {
    serde_json::from_slice(&std::fs::read(dir.join("tuning_report.json")).unwrap()).unwrap()
}

#[test]
fn tune_gaussian_gives_chi_squared_quantile() {
    let dir = tempfile::tempdir().unwrap();
    let eta = Gmm::single(DVector::zeros(2), matrix(&[&[1.0, 0.3], &[0.3, 0.5]])).unwrap();
    let cfg = job_config_json(
        &two_output_system(),
        &eta,
        None,
        &[("target_rate", json!(0.05))],
    );
    let path = write_config(dir.path(), &cfg);
    let out = dir.path().join("out");
    assert_eq!(
        run(&[
            "tune",
            "--config",
            path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );

    let rep = report(&out);
    assert!((rep.alpha - 5.99146).abs() < 1e-3, "alpha {}", rep.alpha);
    assert!((rep.false_alarm - 0.05).abs() <= 1e-4);
    assert_eq!(rep.mode_count_reduced, 1);
    for f in ["residual_model.json", "cdf_curve.csv", "run.log"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(!out.join("histogram.csv").exists());
}

#[test]
fn evaluate_matches_closed_form_and_huge_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let eta = Gmm::single(DVector::zeros(1), DMatrix::from_element(1, 1, 0.7)).unwrap();
    for (alpha, expect) in [(3.841458820694124, 0.05), (1e4, 0.0)] {
        let cfg = job_config_json(&example_system(), &eta, None, &[("alpha", json!(alpha))]);
        let path = write_config(dir.path(), &cfg);
        let out = dir.path().join(format!("out-{alpha}"));
        assert_eq!(
            run(&[
                "evaluate",
                "--config",
                path.to_str().unwrap(),
                "--out",
                out.to_str().unwrap()
            ]),
            0
        );
        let rep = report(&out);
        assert!(
            (rep.false_alarm - expect).abs() < 1e-8,
            "{alpha}: {}",
            rep.false_alarm
        );
    }
}

#[test]
fn evaluate_with_mc_reports_delta() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = job_config_json(
        &example_system(),
        &table_mixture(),
        None,
        &[
            ("alpha", json!(0.75)),
            ("k_star", json!(4)),
            ("mc", json!({"samples": 40000, "seed": 9})),
        ],
    );
    let path = write_config(dir.path(), &cfg);
    let out = dir.path().join("out");
    assert_eq!(
        run(&[
            "evaluate",
            "--mc",
            "--config",
            path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    let rep = report(&out);
    let emp = rep.empirical.as_ref().unwrap();
    assert_eq!(emp.sample_count, 40000);
    let delta = rep.analytic_minus_empirical.unwrap();
    assert!((delta - (rep.false_alarm - emp.alarm_rate)).abs() < 1e-15);
    let sigma = (rep.false_alarm * (1.0 - rep.false_alarm) / 40000.0).sqrt();
    assert!(delta.abs() < 4.0 * sigma, "delta {delta}");
    assert!(out.join("histogram.csv").exists());
}

#[test]
fn malformed_json_exits_2_without_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("config.json");
    std::fs::write(&path, "{\"system\": ").unwrap();
    let out = dir.path().join("out");
    assert_eq!(
        run(&[
            "tune",
            "--config",
            path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ]),
        2
    );
    assert!(!out.exists());
}

#[test]
fn config_error_names_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = job_config_json(
        &example_system(),
        &table_mixture(),
        None,
        &[("target_rate", json!(1.5))],
    );
    let path = write_config(dir.path(), &cfg);
    let out = bin()
        .args(["tune", "--config", path.to_str().unwrap(), "--out"])
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("target_rate"));
}

#[test]
fn unstable_system_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = job_config_json(
        &example_system(),
        &table_mixture(),
        None,
        &[("target_rate", json!(0.1))],
    );
    cfg["system"]["L"] = json!([[0.0], [0.0]]);
    cfg["system"]["F"] = json!([[1.2, 0.0], [0.0, 0.5]]);
    let path = write_config(dir.path(), &cfg);
    let out = dir.path().join("out");
    assert_eq!(
        run(&[
            "tune",
            "--config",
            path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ]),
        3
    );
    assert!(!out.join("tuning_report.json").exists());
}

#[test]
fn fit_noise_single_mode_echoes_sample_moments() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = rng(17);
    let rows: Vec<[f64; 2]> = (0..500)
        .map(|_| {
            let a = common::normal(&mut r);
            let b = common::normal(&mut r);
            [1.0 + a, -2.0 + 0.5 * a + 0.3 * b]
        })
        .collect();
    let csv: String = rows
        .iter()
        .map(|x| format!("{},{}\n", x[0], x[1]))
        .collect();
    let samples = dir.path().join("s.csv");
    std::fs::write(&samples, csv).unwrap();
    let out = dir.path().join("out");
    assert_eq!(
        run(&[
            "fit-noise",
            "--samples",
            samples.to_str().unwrap(),
            "--modes",
            "1",
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    let doc: GmmJson =
        serde_json::from_slice(&std::fs::read(out.join("fitted_gmm.json")).unwrap()).unwrap();
    let g = Gmm::from_json(&doc).unwrap();
    assert_eq!(g.len(), 1);

    let n = rows.len() as f64;
    let mean: Vec<f64> = (0..2)
        .map(|j| rows.iter().map(|x| x[j]).sum::<f64>() / n)
        .collect();
    let cov = |i: usize, j: usize| {
        rows.iter()
            .map(|x| (x[i] - mean[i]) * (x[j] - mean[j]))
            .sum::<f64>()
            / n
    };
    let m = &g.modes()[0];
    for (j, mj) in mean.iter().enumerate() {
        assert!((m.mean[j] - mj).abs() < 1e-9);
        for i in 0..2 {
            assert!((m.cov[(i, j)] - cov(i, j)).abs() < 1e-9);
        }
    }
    let trace = std::fs::read_to_string(out.join("loglik_trace.csv")).unwrap();
    assert!(trace.starts_with("iteration,log_likelihood\n"));
}

#[test]
fn fit_noise_rejects_empty_and_ragged_files() {
    let dir = tempfile::tempdir().unwrap();
    for (name, body) in [("empty.csv", ""), ("ragged.csv", "1,2\n3\n")] {
        let p = dir.path().join(name);
        std::fs::write(&p, body).unwrap();
        let out = dir.path().join(format!("out-{name}"));
        assert_eq!(
            run(&[
                "fit-noise",
                "--samples",
                p.to_str().unwrap(),
                "--modes",
                "2",
                "--out",
                out.to_str().unwrap()
            ]),
            2,
            "{name}"
        );
        assert!(!out.exists());
    }
}

#[test]
fn simulate_writes_trace_with_distance_column() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = job_config_json(
        &example_system(),
        &table_mixture(),
        None,
        &[("alpha", json!(0.75)), ("k_star", json!(3))],
    );
    let path = write_config(dir.path(), &cfg);
    let out = dir.path().join("out");
    assert_eq!(
        run(&[
            "simulate",
            "--config",
            path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--steps",
            "50",
            "--seed",
            "4"
        ]),
        0
    );
    let text = std::fs::read_to_string(out.join("residual_trace.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("k,r0,z,alarm"));
    assert_eq!(lines.count(), 50);
}

#[test]
fn emitted_json_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = job_config_json(
        &example_system(),
        &table_mixture(),
        None,
        &[
            ("target_rate", json!(0.3)),
            ("k_star", json!(3)),
            ("mc", json!({"samples": 2000})),
        ],
    );
    let path = write_config(dir.path(), &cfg);
    let out = dir.path().join("out");
    assert_eq!(
        run(&[
            "tune",
            "--mc",
            "--config",
            path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ]),
        0
    );
    let text = std::fs::read_to_string(out.join("tuning_report.json")).unwrap();
    let r: JobReport = serde_json::from_str(&text).unwrap();
    assert_eq!(text.trim_end(), serde_json::to_string_pretty(&r).unwrap());

    let text = std::fs::read_to_string(out.join("residual_model.json")).unwrap();
    let doc: ResidualModelJson = serde_json::from_str(&text).unwrap();
    let model = ResidualModel::from_json(&doc).unwrap();
    let again = model.to_json();
    assert_eq!(again.mixture, doc.mixture);
    assert_eq!(
        (again.k_star, again.mode_count, &again.mode_count_exact),
        (doc.k_star, doc.mode_count, &doc.mode_count_exact)
    );
    for (a, b) in again
        .overall_cov
        .iter()
        .flatten()
        .zip(doc.overall_cov.iter().flatten())
    {
        assert!((a - b).abs() < 1e-12);
    }
}
