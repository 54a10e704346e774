//! Drives the `rmix` binary end to end.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rmix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rmix")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const QUICK: [&str; 8] = ["--iters", "3000", "--burn-in", "500", "--chains", "2", "--seed", "7"];

fn simulate_hier(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("sim");
    let o = rmix(&["simulate", "--model", "hier", "--out", p(&out), "--seed", "3", "--outliers", "1:4,2:-5,3:6"]);
    assert!(o.status.success(), "{}", stderr(&o));
    out.join("data.csv")
}

fn fit(dir: &Path, data: &Path, variant: &str) -> std::path::PathBuf {
    let out = dir.join(format!("fit_{variant}"));
    let mut args = vec!["fit", "--model", "hier", "--variant", variant, "--data", p(data), "--out", p(&out)];
    args.extend(QUICK);
    args.extend(["--truth", "beta=0,log_A=-0.3257"]);
    let o = rmix(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn help_exits_zero() {
    assert!(rmix(&["--help"]).status.success());
    assert!(rmix(&["fit", "--help"]).status.success());
}

#[test]
fn missing_required_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let o = rmix(&["fit", "--model", "hier", "--variant", "nt", "--out", p(dir.path()), "--seed", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--data"), "{}", stderr(&o));

    let data = simulate_hier(dir.path());
    let o = rmix(&["fit", "--model", "hier", "--variant", "nt", "--data", p(&data), "--out", p(dir.path())]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--seed"), "{}", stderr(&o));
}

#[test]
fn malformed_csv_reports_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.csv");
    fs::write(&data, "i,y,V\n1,0.5,1.0\n2,oops,1.0\n").unwrap();
    let out = dir.path().join("out");
    let mut args = vec!["fit", "--model", "hier", "--variant", "gaussian", "--data", p(&data), "--out", p(&out)];
    args.extend(QUICK);
    let o = rmix(&args);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn simulate_writes_data_and_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate_hier(dir.path());
    let text = fs::read_to_string(&data).unwrap();
    assert!(text.starts_with("i,y,V"), "{text}");
    assert_eq!(text.lines().count(), 32);
    let prov: serde_json::Value = serde_json::from_str(&fs::read_to_string(data.with_file_name("provenance.json")).unwrap()).unwrap();
    assert_eq!(prov["seed"], 3);
    assert_eq!(prov["outliers"][2][0], 3);

    let ou = dir.path().join("ou");
    let o = rmix(&["simulate", "--model", "ou", "--out", p(&ou), "--seed", "4", "--repeats", "50"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(ou.join("data.csv").is_file() && ou.join("template.csv").is_file());
}

#[test]
fn fit_outputs_and_idempotence() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate_hier(dir.path());
    let out = fit(dir.path(), &data, "nt");
    for f in ["chains/chain1.csv", "chains/chain2.csv", "summary.csv", "summary.json", "manifest.json", "z_mean.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    assert!(!out.join("timing.json").exists());
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.contains("beta") && summary.contains("log_A"), "{summary}");
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["variant"], "nt");
    assert_eq!(manifest["config"]["seed"], 7);

    let chain = fs::read(out.join("chains/chain1.csv")).unwrap();
    let again = fit(&dir.path().join("again"), &data, "nt");
    assert_eq!(chain, fs::read(again.join("chains/chain1.csv")).unwrap());
    assert_eq!(summary, fs::read_to_string(again.join("summary.csv")).unwrap());
}

#[test]
fn unknown_truth_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate_hier(dir.path());
    let out = dir.path().join("x");
    let mut args = vec!["fit", "--model", "hier", "--variant", "t", "--data", p(&data), "--out", p(&out)];
    args.extend(QUICK);
    args.extend(["--truth", "gamma=1"]);
    let o = rmix(&args);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("gamma"), "{}", stderr(&o));
}

#[test]
fn report_ratio_column_and_reference() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate_hier(dir.path());
    let nt = fit(dir.path(), &data, "nt");
    let g = fit(dir.path(), &data, "gaussian");

    let single = dir.path().join("single");
    let o = rmix(&["report", "--data", p(&nt), "--out", p(&single)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = fs::read_to_string(single.join("report.csv")).unwrap();
    assert!(!table.lines().next().unwrap().contains("mse_ratio"), "{table}");

    let both = dir.path().join("both");
    let o = rmix(&["report", "--data", p(&g), p(&nt), "--out", p(&both)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows: serde_json::Value = serde_json::from_str(&fs::read_to_string(both.join("report.json")).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    let ratio = |label: &str, param: &str| {
        rows.iter()
            .find(|r| r[0] == label && r[1]["parameter"] == param)
            .and_then(|r| r[1]["mse_ratio"].as_f64())
            .unwrap()
    };
    assert!((ratio("N+t", "log_A") - 1.0).abs() < 1e-12);
    assert!(ratio("N", "log_A") > 1.0);
}

#[test]
fn diagnose_tables_and_constant_warning() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate_hier(dir.path());
    let out = fit(dir.path(), &data, "gaussian");
    let diag = dir.path().join("diag");
    let o = rmix(&["diagnose", "--data", p(&out), "--out", p(&diag), "--max-lag", "20"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(diag.join("acf_beta_chain1.csv").is_file());
    let ess = fs::read_to_string(diag.join("ess.csv")).unwrap();
    assert!(ess.starts_with("parameter,chain,draws,ess"), "{ess}");

    // A constant column gets ESS 0 and a warning.
    let chain = out.join("chains/chain1.csv");
    let text = fs::read_to_string(&chain).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().to_string();
    let beta = header.split(',').position(|c| c == "beta").unwrap();
    let mut rewritten = vec![header];
    for l in lines {
        let mut cells: Vec<&str> = l.split(',').collect();
        cells[beta] = "0.5";
        rewritten.push(cells.join(","));
    }
    fs::write(&chain, rewritten.join("\n") + "\n").unwrap();
    let o = rmix(&["diagnose", "--data", p(&out), "--out", p(&diag)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("constant"), "{}", stderr(&o));
    let ess = fs::read_to_string(diag.join("ess.csv")).unwrap();
    let row = ess.lines().find(|l| l.starts_with("beta,1,")).unwrap();
    assert_eq!(row.split(',').nth(3).unwrap().parse::<f64>().unwrap(), 0.0, "{row}");
}

#[test]
fn experiment_runs_spec_file() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("spec.json");
    fs::write(
        &spec,
        r#"{"protocol":"hosp-outlier","seed":5,"variants":["gaussian","nt"],
            "chains":{"n_iter":3000,"burn_in":500,"thin":1,"n_chains":2}}"#,
    )
    .unwrap();
    let out = dir.path().join("bundle");
    let o = rmix(&["experiment", "--spec", p(&spec), "--out", p(&out), "--timing"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["reports/summary.csv", "reports/manifest.json", "reports/timing.json", "chains/nt_chain2.csv"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    fs::write(&spec, r#"{"protocol":"hosp-outlier"}"#).unwrap();
    let o = rmix(&["experiment", "--spec", p(&spec), "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("seed"), "{}", stderr(&o));
}

#[test]
fn sensitivity_fits_each_prior() {
    let dir = tempfile::tempdir().unwrap();
    let data = simulate_hier(dir.path());
    let out = dir.path().join("sens");
    let mut args = vec!["sensitivity", "--model", "hier", "--data", p(&data), "--out", p(&out), "--priors", "n:0.01,n/5:0.01,uniform"];
    args.extend(QUICK);
    let o = rmix(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let tv = fs::read_to_string(out.join("reports/tv_to_t.json")).unwrap();
    for label in ["nt[uniform]", "k=n,m=0.01", "k=n*0.2,m=0.01"] {
        assert!(tv.contains(label), "{label} missing from {tv}");
    }
}
