use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use rmix_core::diagnostics::{self, SummaryRow};
use rmix_core::dists::{ErrorKind, RngStream};
use rmix_core::engine::{ChainConfig, ModelData};
use rmix_core::hier::{self, HierData, MixtureMle};
use rmix_core::io;
use rmix_core::location_toy::ToyData;
use rmix_core::mixture::Variant;
use rmix_core::ou::{self, TimeSeries};
use rmix_core::protocols::{self, ChainSettings, Dataset, ExperimentSpec, PriorSpec, Protocol};
use rmix_core::Error;

use crate::{ChainArgs, DiagnoseArgs, ExperimentArgs, FitArgs, ModelKind, ReportArgs, SensitivityArgs, SimulateArgs};

pub enum Outcome {
    Done,
    /// Number of chains that diverged.
    Diverged(usize),
}

/// What `fit` records next to the chain files; `report` and `diagnose` read it back.
#[derive(Debug, Serialize, Deserialize)]
pub struct FitManifest {
    pub model: String,
    pub variant: Variant,
    pub data: String,
    pub config: ChainConfig,
    pub truth: BTreeMap<String, f64>,
    pub parameters: Vec<String>,
    pub chain_files: Vec<String>,
    pub acceptance: Vec<BTreeMap<String, f64>>,
    pub scales: Vec<BTreeMap<String, f64>>,
    pub mle: Option<MixtureMle>,
    pub failures: Vec<(u64, String)>,
    pub flagged: Vec<usize>,
}

#[derive(Debug, Serialize)]
struct Provenance<'a> {
    model: &'a str,
    seed: u64,
    error_kind: ErrorKind,
    template: Option<String>,
    generative: BTreeMap<&'a str, f64>,
    outliers: Option<Vec<(usize, f64)>>,
    outlier_rows: Option<Vec<usize>>,
    repeats: Option<usize>,
    distance_to_template: Option<f64>,
}

fn settings(c: &ChainArgs) -> ChainSettings {
    ChainSettings {
        n_iter: c.iters,
        burn_in: c.burn_in,
        thin: c.thin,
        n_chains: c.chains,
    }
}

fn load_model(model: ModelKind, path: &Path) -> Result<ModelData> {
    Ok(match model {
        ModelKind::Toy => ModelData::Toy(ToyData::new(io::read_column(path, "y")?)?),
        ModelKind::Hier => ModelData::Hier(io::read_hier_csv(path)?.0),
        ModelKind::Ou => ModelData::Ou(io::read_series_csv(path)?),
    })
}

/// `name=value` pairs separated by commas.
fn parse_truth(s: Option<&str>) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for item in s.unwrap_or("").split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = item
            .split_once('=')
            .with_context(|| format!("truth entry '{item}' is not name=value"))?;
        let v: f64 = v.trim().parse().with_context(|| format!("truth value '{v}' is not a number"))?;
        out.insert(k.trim().to_string(), v);
    }
    Ok(out)
}

/// `row:multiple` pairs, 1-based rows.
fn parse_outliers(s: &str) -> Result<Vec<(usize, f64)>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|item| {
            let (r, m) = item
                .split_once(':')
                .with_context(|| format!("outlier entry '{item}' is not row:multiple"))?;
            let r: usize = r.trim().parse().with_context(|| format!("bad row '{r}'"))?;
            let m: f64 = m.trim().parse().with_context(|| format!("bad multiple '{m}'"))?;
            if r == 0 {
                bail!("outlier rows are 1-based");
            }
            Ok((r, m))
        })
        .collect()
}

fn parse_priors(s: &str) -> Result<Vec<PriorSpec>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|item| {
            let item = item.trim();
            if item == "uniform" {
                return Ok(PriorSpec::uniform());
            }
            let (k, m) = item
                .split_once(':')
                .with_context(|| format!("prior '{item}' is not k:m or uniform"))?;
            let m: f64 = m.parse().with_context(|| format!("bad prior mean '{m}'"))?;
            Ok(match k {
                "n" => PriorSpec::Relative { k_over_n: 1.0, m },
                _ if k.starts_with("n/") => {
                    let d: f64 = k[2..].parse().with_context(|| format!("bad prior strength '{k}'"))?;
                    PriorSpec::Relative { k_over_n: 1.0 / d, m }
                }
                _ => PriorSpec::Absolute {
                    k: k.parse().with_context(|| format!("bad prior strength '{k}'"))?,
                    m,
                },
            })
        })
        .collect()
}

pub fn simulate(a: SimulateArgs) -> Result<Outcome> {
    fs::create_dir_all(&a.out)?;
    let mut rng = RngStream::new(a.seed, protocols::DATA_STREAM);
    let errors: ErrorKind = a.errors.into();
    let data_path = a.out.join("data.csv");
    let mut prov = Provenance {
        model: "",
        seed: a.seed,
        error_kind: errors,
        template: a.data.as_ref().map(|p| p.display().to_string()),
        generative: BTreeMap::new(),
        outliers: None,
        outlier_rows: None,
        repeats: None,
        distance_to_template: None,
    };
    match a.model {
        ModelKind::Toy => {
            prov.model = "toy";
            let d = ToyData::simulate(a.n, a.outlier_value, &mut rng)?;
            io::write_indexed_csv(&data_path, "y", &d.y)?;
        }
        ModelKind::Hier => {
            prov.model = "hier";
            let v = match &a.data {
                Some(p) => io::read_hier_csv(p)?.0.v,
                None => HierData::hospital().v,
            };
            let (_, mut y) = hier::simulate_hier(a.beta, a.a, &v, errors, &mut rng)?;
            if let Some(o) = &a.outliers {
                let spec = parse_outliers(o)?;
                let zero: Vec<(usize, f64)> = spec.iter().map(|&(r, m)| (r - 1, m)).collect();
                y = hier::inject_outliers(&y, &v, &zero)?;
                prov.outliers = Some(spec);
            }
            prov.generative = BTreeMap::from([("beta", a.beta), ("A", a.a)]);
            io::write_hier_csv(&data_path, &HierData::new(y, v)?, None)?;
        }
        ModelKind::Ou => {
            prov.model = "ou";
            let gen = (a.mu, a.sigma2, a.tau);
            let template = match &a.data {
                Some(p) => io::read_series_csv(p)?,
                None => {
                    let t = protocols::synthetic_macho_template(gen, &mut rng)?;
                    io::write_series_csv(&a.out.join("template.csv"), &t)?;
                    t
                }
            };
            let series = match &a.outlier_rows {
                Some(rows) => {
                    let idx = rows
                        .iter()
                        .map(|&r| {
                            if r >= 1 && r <= template.len() {
                                Ok(r - 1)
                            } else {
                                bail!("outlier row {r} is outside 1..={}", template.len())
                            }
                        })
                        .collect::<Result<Vec<usize>>>()?;
                    let (s, dist) = ou::simulate_macho_like(&template, gen, &idx, a.repeats, errors, &mut rng)?;
                    prov.outlier_rows = Some(rows.clone());
                    prov.repeats = Some(a.repeats);
                    prov.distance_to_template = Some(dist);
                    s
                }
                None => {
                    let (_, y) = ou::ou_simulate(&template.t, a.mu, a.sigma2, a.tau, &template.v, errors, &mut rng)?;
                    TimeSeries::new(template.t.clone(), y, template.v.clone())?
                }
            };
            prov.generative = BTreeMap::from([("mu", a.mu), ("sigma2", a.sigma2), ("tau", a.tau)]);
            io::write_series_csv(&data_path, &series)?;
        }
    }
    io::write_json(&a.out.join("provenance.json"), &prov)?;
    Ok(Outcome::Done)
}

fn divergences(failures: &[(u64, String)], chains: usize) -> Result<usize> {
    if !failures.is_empty() && failures.len() == chains && !failures[0].1.contains("diverged") {
        bail!("{}", failures[0].1);
    }
    Ok(failures.len())
}

pub fn fit(a: FitArgs) -> Result<Outcome> {
    let model = load_model(a.model, &a.data)?;
    let truth = parse_truth(a.truth.as_deref())?;
    let k = a.chain.k.unwrap_or(model.len() as f64);
    let variant: Variant = a.variant.into();
    let fit = protocols::fit(variant.code(), "data", &model, variant, k, a.chain.m, &settings(&a.chain), a.chain.seed)?;
    fs::create_dir_all(a.out.join("chains"))?;

    let mut chain_files = Vec::new();
    for c in &fit.chains {
        let name = format!("chains/chain{}.csv", c.stream_id);
        io::write_chain_csv(&a.out.join(&name), c)?;
        chain_files.push(name);
    }
    let parameters: Vec<String> = fit.chains.first().map(|c| c.names.clone()).unwrap_or_default();
    for t in truth.keys() {
        if !parameters.is_empty() && !parameters.contains(t) {
            bail!("truth given for '{t}', which is not a monitored parameter ({})", parameters.join(", "));
        }
    }
    let params: Vec<(&str, Option<f64>)> = parameters.iter().map(|p| (p.as_str(), truth.get(p).copied())).collect();
    let rows: Vec<(String, SummaryRow)> = protocols::summarize_fit(&fit, &params, None, a.chain.timing)?
        .into_iter()
        .map(|r| (variant.code().to_string(), r))
        .collect();
    io::write_summary_csv(&a.out.join("summary.csv"), &rows)?;
    io::write_json(&a.out.join("summary.json"), &rows)?;

    let mut flagged = Vec::new();
    if !fit.chains.is_empty() {
        let z = fit.z_mean();
        io::write_indexed_csv(&a.out.join("z_mean.csv"), "z_mean", &z)?;
        io::write_indexed_csv(&a.out.join("latent_mean.csv"), "latent_mean", &fit.latent_mean())?;
        if matches!(variant, Variant::GaussianMixture | Variant::ProposedMixture) {
            flagged = (0..z.len()).filter(|&i| z[i] > a.chain.outlier_threshold).map(|i| i + 1).collect();
        }
    }
    let manifest = FitManifest {
        model: model.name().to_string(),
        variant,
        data: a.data.display().to_string(),
        config: fit.config.clone(),
        truth,
        parameters,
        chain_files,
        acceptance: fit.chains.iter().map(|c| c.acceptance.clone()).collect(),
        scales: fit.chains.iter().map(|c| c.scales.clone()).collect(),
        mle: fit.mle,
        failures: fit.failures.clone(),
        flagged,
    };
    io::write_json(&a.out.join("manifest.json"), &manifest)?;
    if a.chain.timing {
        let t: BTreeMap<String, f64> = fit
            .chains
            .iter()
            .map(|c| (format!("chain{}", c.stream_id), c.elapsed_seconds))
            .collect();
        io::write_json(&a.out.join("timing.json"), &t)?;
    }
    match divergences(&fit.failures, a.chain.chains)? {
        0 => Ok(Outcome::Done),
        n => Ok(Outcome::Diverged(n)),
    }
}

struct LoadedFit {
    manifest: FitManifest,
    /// Per chain: `(names, columns)`.
    chains: Vec<(Vec<String>, Vec<Vec<f64>>)>,
    timing: Option<BTreeMap<String, f64>>,
}

fn load_fit(dir: &Path) -> Result<LoadedFit> {
    let manifest: FitManifest = io::read_json(&dir.join("manifest.json"))
        .with_context(|| format!("{} is not a fit output directory", dir.display()))?;
    let chains = manifest
        .chain_files
        .iter()
        .map(|f| io::read_chain_csv(&dir.join(f)))
        .collect::<rmix_core::Result<Vec<_>>>()?;
    let timing_path = dir.join("timing.json");
    let timing = if timing_path.is_file() { Some(io::read_json(&timing_path)?) } else { None };
    Ok(LoadedFit { manifest, chains, timing })
}

fn column<'a>(chain: &'a (Vec<String>, Vec<Vec<f64>>), name: &str) -> Option<&'a [f64]> {
    chain.0.iter().position(|n| n == name).map(|j| chain.1[j].as_slice())
}

pub fn diagnose(a: DiagnoseArgs) -> Result<Outcome> {
    let fit = load_fit(&a.data)?;
    fs::create_dir_all(&a.out)?;
    let mut lines = vec!["parameter,chain,draws,ess,ess_per_iteration,ess_per_second".to_string()];
    for (c, (chain, file)) in fit.chains.iter().zip(&fit.manifest.chain_files).enumerate() {
        let id = Path::new(file)
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("chain")
            .to_string();
        let seconds = fit.timing.as_ref().and_then(|t| t.get(&id)).copied();
        for (name, col) in chain.0.iter().zip(&chain.1) {
            let acf = diagnostics::autocorrelation(col, a.max_lag);
            io::write_acf_csv(&a.out.join(format!("acf_{name}_{id}.csv")), &acf)?;
            let ess = diagnostics::effective_sample_size(col);
            if col.iter().all(|&x| x == col[0]) {
                eprintln!("rmix: warning: {name} is constant in {id}; its ESS is 0");
            }
            let per_iter = ess / fit.manifest.config.n_iter as f64;
            let per_sec = seconds.map_or_else(String::new, |s| (ess / s).to_string());
            lines.push(format!("{name},{},{},{ess},{per_iter},{per_sec}", c + 1, col.len()));
        }
    }
    fs::write(a.out.join("ess.csv"), lines.join("\n") + "\n")?;
    Ok(Outcome::Done)
}

pub fn report(a: ReportArgs) -> Result<Outcome> {
    let fits = a.data.iter().map(|d| load_fit(d)).collect::<Result<Vec<_>>>()?;
    let reference: Variant = a.reference.into();
    let summarize_one = |f: &LoadedFit, ref_rows: Option<&[SummaryRow]>| -> Result<Vec<SummaryRow>> {
        let mut rows = Vec::new();
        for p in &f.manifest.parameters {
            let per_chain: Vec<&[f64]> = f.chains.iter().filter_map(|c| column(c, p)).collect();
            if per_chain.is_empty() {
                continue;
            }
            let ref_mse = ref_rows
                .and_then(|r| r.iter().find(|row| &row.parameter == p))
                .and_then(|row| row.mse);
            let seconds = f.timing.as_ref().map(|t| t.values().sum());
            rows.push(diagnostics::summarize(p, &per_chain, f.manifest.truth.get(p).copied(), ref_mse, seconds)?);
        }
        Ok(rows)
    };
    let ref_rows = match fits.iter().find(|f| f.manifest.variant == reference) {
        Some(f) if fits.len() > 1 => Some(summarize_one(f, None)?),
        _ => None,
    };
    let mut rows = Vec::new();
    for f in &fits {
        for r in summarize_one(f, ref_rows.as_deref())? {
            rows.push((f.manifest.variant.label().to_string(), r));
        }
    }
    fs::create_dir_all(&a.out)?;
    io::write_summary_csv(&a.out.join("report.csv"), &rows)?;
    io::write_json(&a.out.join("report.json"), &rows)?;
    Ok(Outcome::Done)
}

pub fn sensitivity(a: SensitivityArgs) -> Result<Outcome> {
    let model = load_model(a.model, &a.data)?;
    let protocol = match a.model {
        ModelKind::Hier => Protocol::SensBetaPrior,
        ModelKind::Ou => Protocol::OuSens,
        ModelKind::Toy => bail!("prior sensitivity needs the hier or ou model"),
    };
    let mut spec = ExperimentSpec::new(protocol, a.chain.seed);
    spec.chains = settings(&a.chain);
    spec.m = a.chain.m;
    spec.k = a.chain.k;
    spec.outlier_threshold = a.chain.outlier_threshold;
    spec.record_timing = a.chain.timing;
    spec.data = Some(a.data.display().to_string());
    if let Some(p) = &a.priors {
        spec.priors = Some(parse_priors(p)?);
    }
    let mut ds = Dataset::new("data", model);
    for (k, v) in parse_truth(a.truth.as_deref())? {
        ds = ds.with_truth(&k, v)?;
    }
    let report = protocols::run_datasets(&spec, vec![ds])?;
    protocols::write_bundle(&report, &a.out)?;
    finish(report.failures(), report.fits.iter().map(|f| f.failures.as_slice()).collect())
}

fn finish(failures: usize, per_fit: Vec<&[(u64, String)]>) -> Result<Outcome> {
    if failures == 0 {
        return Ok(Outcome::Done);
    }
    for (id, msg) in per_fit.into_iter().flatten() {
        eprintln!("rmix: chain {id}: {msg}");
    }
    Ok(Outcome::Diverged(failures))
}

pub fn experiment(a: ExperimentArgs) -> Result<Outcome> {
    let mut spec: ExperimentSpec = io::read_json(&a.spec).map_err(|e| match e {
        Error::Json(j) => anyhow::anyhow!("{}: {j}", a.spec.display()),
        other => other.into(),
    })?;
    if a.timing {
        spec.record_timing = true;
    }
    if let Some(d) = &spec.data {
        // Relative data paths are taken from the spec's directory.
        let p = PathBuf::from(d);
        if p.is_relative() {
            let base = a.spec.parent().unwrap_or(Path::new("."));
            spec.data = Some(base.join(p).display().to_string());
        }
    }
    let report = protocols::run_experiment_to(&spec, &a.out)?;
    finish(report.failures(), report.fits.iter().map(|f| f.failures.as_slice()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parsers() {
        let t = parse_truth(Some("beta=0, log_A=-0.3257")).unwrap();
        assert_eq!(t["log_A"], -0.3257);
        assert!(parse_truth(Some("beta")).is_err());
        assert_eq!(parse_outliers("1:4,2:-5").unwrap(), vec![(1, 4.0), (2, -5.0)]);
        assert!(parse_outliers("0:4").is_err());
        let p = parse_priors("n:0.01,n/5:0.1,31:0.05,uniform").unwrap();
        assert_eq!(p[1].resolve(10).unwrap(), (2.0, 0.1));
        assert_eq!(p[2].resolve(10).unwrap(), (31.0, 0.05));
        assert_eq!(p[3].resolve(10).unwrap(), (2.0, 0.5));
        assert!(parse_priors("n:abc").is_err());
    }
}
