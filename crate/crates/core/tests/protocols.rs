//! End-to-end protocol runs: reproducibility of written bundles and their layout.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rmix_core::mixture::Variant;
use rmix_core::protocols::{run_experiment_to, ChainSettings, ExperimentSpec, Protocol};

fn quick(protocol: Protocol, seed: u64) -> ExperimentSpec {
    let mut spec = ExperimentSpec::new(protocol, seed);
    spec.chains = ChainSettings { n_iter: 3_000, burn_in: 500, thin: 2, n_chains: 3 };
    spec.repeats = 20;
    spec
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let key = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(key, fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn run(spec: &ExperimentSpec) -> BTreeMap<String, Vec<u8>> {
    let dir = tempfile::tempdir().unwrap();
    run_experiment_to(spec, dir.path()).unwrap();
    snapshot(dir.path())
}

#[test]
fn bundles_are_bitwise_reproducible_across_thread_counts() {
    for protocol in [Protocol::HospOutlier, Protocol::OuSim] {
        let spec = quick(protocol, 9);
        std::env::set_var("RMIX_THREADS", "1");
        let a = run(&spec);
        std::env::set_var("RMIX_THREADS", "3");
        let b = run(&spec);
        std::env::remove_var("RMIX_THREADS");
        assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
        for (k, v) in &a {
            assert!(v == &b[k], "{protocol:?}: {k} differs between runs");
        }
        let c = run(&quick(protocol, 10));
        assert_ne!(a["chains/nt_chain1.csv"], c["chains/nt_chain1.csv"]);
    }
}

#[test]
fn bundle_contains_reports_and_figure_data() {
    let mut spec = quick(Protocol::HospOutlier, 3);
    spec.record_timing = true;
    let files = run(&spec);
    for f in [
        "spec.json",
        "reports/summary.csv",
        "reports/summary.json",
        "reports/manifest.json",
        "reports/flagged.json",
        "reports/tv_to_t.json",
        "reports/timing.json",
        "figures-data/z_mean_nt.csv",
        "figures-data/z_mean_nn.csv",
    ] {
        assert!(files.contains_key(f), "missing {f}");
    }
    for v in Variant::ALL {
        for c in 1..=3 {
            assert!(files.contains_key(&format!("chains/{}_chain{c}.csv", v.code())));
        }
    }
    let summary = String::from_utf8(files["reports/summary.csv"].clone()).unwrap();
    let header = summary.lines().next().unwrap();
    assert!(header.contains("mse_ratio"), "{header}");
    assert_eq!(summary.lines().count(), 1 + 4 * 2);
    let manifest: serde_json::Value = serde_json::from_slice(&files["reports/manifest.json"]).unwrap();
    assert!(manifest.is_object());
}

#[test]
fn size_grid_runs_every_cell() {
    let mut spec = quick(Protocol::SensSizeGrid, 4);
    spec.sizes = vec![20];
    spec.proportions = vec![0.1, 0.3];
    spec.chains.n_chains = 1;
    let files = run(&spec);
    assert!(files.contains_key("data/n20_p10.csv"));
    assert!(files.contains_key("data/n20_p30.csv"));
    let tv: serde_json::Value = serde_json::from_slice(&files["reports/tv_to_t.json"]).unwrap();
    let s = tv.to_string();
    assert!(s.contains("n20_p30/nt[uniform]"), "{s}");
}
