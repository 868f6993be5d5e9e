use std::path::Path;
use std::process::Command;

use gcm::cli::{diagnose_draws, ingest_csv, parse_methods, EXIT_DATA, EXIT_OK, EXIT_USAGE};
use gcm::rmb::DrawTable;
use gcm::Method;

fn gcm(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_gcm")).args(args).output().expect("run gcm")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Writes a dataset with a known missingness profile: 8 subjects, occasion
/// rates 0, 1/8, 2/8, 3/8.
fn write_sample(path: &Path) {
    let mut text = String::from("id,y1,y2,y3,y4\n");
    for i in 0..40 {
        let base = 5.0 + (i % 7) as f64 * 0.3;
        let slope = 1.5 + (i % 5) as f64 * 0.2;
        let mut cells: Vec<String> =
            (0..4).map(|t| format!("{:.3}", base + slope * t as f64 + ((i * 7 + t * 3) % 11) as f64 * 0.05)).collect();
        for (t, cell) in cells.iter_mut().enumerate().skip(1) {
            if (i % 8) < t {
                *cell = "NA".into();
            }
        }
        text += &format!("s{i},{}\n", cells.join(","));
    }
    text += "empty,NA,NA,NA,NA\n";
    std::fs::write(path, text).unwrap();
}

#[test]
fn ingest_reports_missingness_and_drops_empty_rows() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    write_sample(&csv);
    let (data, summary) = ingest_csv(&csv).unwrap();
    assert_eq!(data.n_subjects(), 40);
    assert_eq!(summary.dropped, vec!["empty".to_string()]);
    let expected = [0.0, 0.125, 0.25, 0.375];
    for (r, e) in summary.missing_rates.iter().zip(expected) {
        assert!((r - e).abs() < 1e-12);
    }
}

#[test]
fn method_lists() {
    assert_eq!(parse_methods("fiml, tsre").unwrap(), vec![Method::Fiml, Method::Tsre]);
    assert_eq!(parse_methods("rmb-both,rmb").unwrap(), vec![Method::Rmb, Method::RmbSelection]);
    assert!(parse_methods("fiml,bogus").is_err());
    assert!(parse_methods(" , ").is_err());
}

#[test]
fn fit_writes_every_requested_method() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    write_sample(&csv);
    let out = dir.path().join("fit.json");
    let draws = dir.path().join("draws");
    let o = gcm(&[
        "fit", "--method", "fiml,tsre,rmb-both", "--data", p(&csv), "--out", p(&out), "--iters", "400", "--seed", "3",
        "--keep-draws", p(&draws),
    ]);
    let code = o.status.code().unwrap();
    assert!(code == 0 || code == 4, "{o:?}");
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&out).unwrap()).unwrap();
    let methods: Vec<&str> = v["results"].as_array().unwrap().iter().map(|r| r["method"].as_str().unwrap()).collect();
    assert_eq!(methods, vec!["fiml", "tsre", "rmb", "rmb-selection"]);
    assert_eq!(v["data"]["n_subjects"], 40);
    assert!(v["selection_comparison"].is_array());
    assert!(draws.join("rmb_draws.csv").exists() && draws.join("rmb-selection_draws.csv").exists());

    // The saved draws feed `diagnose`.
    let report = dir.path().join("diag.json");
    let d = gcm(&["diagnose", "--draws", p(&draws.join("rmb_draws.csv")), "--out", p(&report)]);
    assert!(matches!(d.status.code(), Some(0) | Some(4)), "{d:?}");
    let diag: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert!(diag["beta_S"]["geweke_z"].is_number());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    write_sample(&csv);
    let out = dir.path().join("o.json");
    assert_eq!(gcm(&["fit", "--method", "bogus", "--data", p(&csv), "--out", p(&out)]).status.code(), Some(EXIT_USAGE));
    assert_eq!(gcm(&["fit", "--data", p(&csv)]).status.code(), Some(EXIT_USAGE));
    let missing = dir.path().join("nope.csv");
    assert_eq!(gcm(&["fit", "--method", "fiml", "--data", p(&missing), "--out", p(&out)]).status.code(), Some(EXIT_DATA));
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "id,y1,y2\na,1,zz\n").unwrap();
    assert_eq!(gcm(&["fit", "--method", "fiml", "--data", p(&bad), "--out", p(&out)]).status.code(), Some(EXIT_DATA));
    assert_eq!(gcm(&["fit", "--method", "fiml", "--data", p(&csv), "--out", p(&out)]).status.code(), Some(EXIT_OK));
    let help = gcm(&["simulate", "--help"]);
    assert_eq!(help.status.code(), Some(EXIT_OK));
    let text = String::from_utf8_lossy(&help.stdout);
    for flag in ["--config", "--out", "--jobs", "--resume", "--emit-data", "--seed"] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
}

#[test]
fn simulate_writes_results_and_datasets() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"n":[50],"mechanisms":["MAR"],"rates":[0.15],"distributions":["normal"],"reps":2,"methods":["fiml","tsre"]}"#)
        .unwrap();
    let out = dir.path().join("res");
    let data = dir.path().join("data");
    let o = gcm(&["simulate", "--config", p(&cfg), "--out", p(&out), "--emit-data", p(&data), "--jobs", "1"]);
    assert!(matches!(o.status.code(), Some(0) | Some(4)), "{o:?}");
    for f in ["results.csv", "convergence.csv", "raw_estimates.csv", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let cond = data.join("n50_MAR_mr0.15_normal");
    assert!(cond.join("rep_0000.csv").exists() && cond.join("rep_0001.csv").exists());
    let truth = std::fs::read_to_string(data.join("truth.csv")).unwrap();
    assert_eq!(truth.lines().count(), 3);
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"].as_array().unwrap().len(), 2);

    // Resume loads the checkpoint and reproduces the results byte for byte.
    let before = std::fs::read(out.join("results.csv")).unwrap();
    let o = gcm(&["simulate", "--config", p(&cfg), "--out", p(&out), "--resume", "--jobs", "1"]);
    assert!(matches!(o.status.code(), Some(0) | Some(4)));
    assert_eq!(std::fs::read(out.join("results.csv")).unwrap(), before);
}

#[test]
fn diagnose_flags_bad_columns() {
    let n = 2000;
    let mut state: u64 = 12345;
    let mut unif = || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|t| {
            let noise = unif() - 0.5;
            let shifted = if t >= n / 2 { noise + 1.0 } else { noise };
            vec![noise, 4.0, shifted]
        })
        .collect();
    let table = DrawTable { names: vec!["ok".into(), "constant".into(), "shifted".into()], rows };
    let d = diagnose_draws(&table);
    assert!(d[0].geweke_z.unwrap().abs() < 3.5);
    assert!(!d[1].pass && d[1].error.is_some());
    assert!(!d[2].pass && d[2].geweke_z.unwrap().abs() > 10.0);
}
