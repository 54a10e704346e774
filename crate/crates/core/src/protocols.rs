//! Reproducible experiment recipes: data generation, ensemble fits of the
//! chosen error variants, summaries, and a bundle of output files.
//!
//! A bundle directory holds `data/`, `chains/`, `reports/` and
//! `figures-data/`. Every file in it is a pure function of the spec (and its
//! seed); wall-clock timings go to `reports/timing.json` only when requested.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{self, SummaryRow};
use crate::dists::{self, ErrorKind, RngStream};
use crate::engine::{run_ensemble_each, ChainConfig, ChainOutput, ModelData};
use crate::error::{invalid, Result};
use crate::hier::{self, HierData, MixtureMle};
use crate::io;
use crate::mixture::{MixtureConfig, Variant};
use crate::ou::{self, TimeSeries};

/// Stream id reserved for data generation, far from the chain streams.
pub const DATA_STREAM: u64 = 1 << 62;

/// Rows (1-based) of the bundled light-curve template that hold outliers.
pub const MACHO_OUTLIER_ROWS: [usize; 7] = [155, 163, 189, 191, 199, 200, 217];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Protocol {
    #[serde(rename = "hosp-sim")]
    HospSim,
    #[serde(rename = "hosp-outlier")]
    HospOutlier,
    #[serde(rename = "sens-beta-prior")]
    SensBetaPrior,
    #[serde(rename = "sens-size-grid")]
    SensSizeGrid,
    #[serde(rename = "ou-sim")]
    OuSim,
    #[serde(rename = "ou-sens")]
    OuSens,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainSettings {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub n_chains: usize,
}

impl Default for ChainSettings {
    /// Desk scale: four chains of 100,000 iterations, 10,000 of them burn-in.
    fn default() -> Self {
        Self {
            n_iter: 100_000,
            burn_in: 10_000,
            thin: 1,
            n_chains: 4,
        }
    }
}

impl ChainSettings {
    pub fn config(&self, seed: u64, mixture: MixtureConfig) -> ChainConfig {
        ChainConfig::new(self.n_iter, self.burn_in, seed, mixture)
            .with_thin(self.thin)
            .with_chains(self.n_chains)
    }
}

/// A Beta prior on `theta`, either absolute, relative to the data size, or
/// the uniform prior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PriorSpec {
    Named(String),
    Relative { k_over_n: f64, m: f64 },
    Absolute { k: f64, m: f64 },
}

impl PriorSpec {
    pub fn uniform() -> Self {
        PriorSpec::Named("uniform".into())
    }

    pub fn resolve(&self, n: usize) -> Result<(f64, f64)> {
        match self {
            PriorSpec::Named(s) if s == "uniform" => Ok((2.0, 0.5)),
            PriorSpec::Named(s) => Err(invalid(format!("unknown prior '{s}'"))),
            PriorSpec::Relative { k_over_n, m } => Ok((k_over_n * n as f64, *m)),
            PriorSpec::Absolute { k, m } => Ok((*k, *m)),
        }
    }

    pub fn label(&self) -> String {
        match self {
            PriorSpec::Named(s) => s.clone(),
            PriorSpec::Relative { k_over_n, m } if *k_over_n == 1.0 => format!("k=n,m={m}"),
            PriorSpec::Relative { k_over_n, m } => format!("k=n*{k_over_n},m={m}"),
            PriorSpec::Absolute { k, m } => format!("k={k},m={m}"),
        }
    }

    /// `k = n` and `k = n/5` for each `m` in 0.01, 0.05, 0.1, then uniform.
    pub fn sensitivity_grid() -> Vec<PriorSpec> {
        let mut v = Vec::new();
        for m in [0.01, 0.05, 0.1] {
            for k_over_n in [1.0, 0.2] {
                v.push(PriorSpec::Relative { k_over_n, m });
            }
        }
        v.push(PriorSpec::uniform());
        v
    }
}

fn default_variants() -> Vec<Variant> {
    Variant::ALL.to_vec()
}

fn default_m() -> f64 {
    0.01
}

fn default_repeats() -> usize {
    10_000
}

fn default_threshold() -> f64 {
    0.3
}

fn default_sizes() -> Vec<usize> {
    vec![20, 50, 100]
}

fn default_proportions() -> Vec<f64> {
    vec![0.1, 0.2, 0.3]
}

fn default_error_kind() -> ErrorKind {
    ErrorKind::Gaussian
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub protocol: Protocol,
    pub seed: u64,
    #[serde(default)]
    pub chains: ChainSettings,
    #[serde(default = "default_variants")]
    pub variants: Vec<Variant>,
    /// Beta-prior strength; defaults to the data size.
    #[serde(default)]
    pub k: Option<f64>,
    #[serde(default = "default_m")]
    pub m: f64,
    /// Outliers for the hospital protocols: `(1-based row, multiple of sd)`.
    #[serde(default)]
    pub outliers: Option<Vec<(usize, f64)>>,
    /// Prior grid for the sensitivity protocols.
    #[serde(default)]
    pub priors: Option<Vec<PriorSpec>>,
    /// Error law of freshly simulated data in the sensitivity protocols.
    #[serde(default = "default_error_kind")]
    pub data_errors: ErrorKind,
    /// Input data: hospital-format CSV or a `t,y,sd` template.
    #[serde(default)]
    pub data: Option<String>,
    /// 1-based rows holding outliers in the light-curve template.
    #[serde(default)]
    pub outlier_indices: Option<Vec<usize>>,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default = "default_threshold")]
    pub outlier_threshold: f64,
    #[serde(default = "default_sizes")]
    pub sizes: Vec<usize>,
    #[serde(default = "default_proportions")]
    pub proportions: Vec<f64>,
    /// Hierarchical generative values `(beta, A)`.
    #[serde(default)]
    pub gen_hier: Option<(f64, f64)>,
    /// O-U generative values `(mu, sigma^2, tau)`.
    #[serde(default)]
    pub gen_ou: Option<(f64, f64, f64)>,
    #[serde(default)]
    pub record_timing: bool,
}

impl ExperimentSpec {
    pub fn new(protocol: Protocol, seed: u64) -> Self {
        Self {
            protocol,
            seed,
            chains: ChainSettings::default(),
            variants: default_variants(),
            k: None,
            m: default_m(),
            outliers: None,
            priors: None,
            data_errors: default_error_kind(),
            data: None,
            outlier_indices: None,
            repeats: default_repeats(),
            outlier_threshold: default_threshold(),
            sizes: default_sizes(),
            proportions: default_proportions(),
            gen_hier: None,
            gen_ou: None,
            record_timing: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.chains;
        ChainConfig::new(c.n_iter, c.burn_in, self.seed, MixtureConfig::new(Variant::Gaussian, 1.0, 0.5))
            .with_thin(c.thin)
            .with_chains(c.n_chains)
            .validate()?;
        if self.variants.is_empty() {
            return Err(invalid("at least one variant is required"));
        }
        if !(self.m > 0.0 && self.m < 1.0) {
            return Err(invalid(format!("m must lie in (0, 1), got {}", self.m)));
        }
        if self.repeats < 1 {
            return Err(invalid("repeats must be at least 1"));
        }
        if let Some(priors) = &self.priors {
            for p in priors {
                p.resolve(1)?;
            }
        }
        if self.protocol == Protocol::SensSizeGrid {
            if self.sizes.is_empty() || self.sizes.iter().any(|&n| n < 4 || n > 100) {
                return Err(invalid("grid sizes must lie in 4..=100"));
            }
            if self.proportions.iter().any(|p| !(0.0..1.0).contains(p)) {
                return Err(invalid("outlier proportions must lie in [0, 1)"));
            }
        }
        Ok(())
    }
}

/// One ensemble fit of one variant on one data set.
#[derive(Clone, Debug)]
pub struct Fit {
    pub label: String,
    pub dataset: String,
    pub variant: Variant,
    pub config: ChainConfig,
    pub chains: Vec<ChainOutput>,
    /// Stream ids of chains that failed, with the error message.
    pub failures: Vec<(u64, String)>,
    pub mle: Option<MixtureMle>,
}

impl Fit {
    pub fn column_per_chain(&self, name: &str) -> Vec<&[f64]> {
        self.chains.iter().filter_map(|c| c.column(name)).collect()
    }

    pub fn pooled(&self, name: &str) -> Vec<f64> {
        self.column_per_chain(name).concat()
    }

    /// Mean over chains of the per-chain indicator means.
    pub fn z_mean(&self) -> Vec<f64> {
        average(self.chains.iter().map(|c| c.z_mean.as_slice()))
    }

    pub fn latent_mean(&self) -> Vec<f64> {
        average(self.chains.iter().map(|c| c.latent_mean.as_slice()))
    }

    pub fn elapsed(&self) -> f64 {
        self.chains.iter().map(|c| c.elapsed_seconds).sum()
    }
}

fn average<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Vec<f64> {
    let mut sum: Vec<f64> = Vec::new();
    let mut k = 0.0;
    for r in rows {
        if sum.is_empty() {
            sum = vec![0.0; r.len()];
        }
        sum.iter_mut().zip(r).for_each(|(s, x)| *s += x);
        k += 1.0;
    }
    sum.into_iter().map(|s| s / k).collect()
}

/// Mixture configuration of a variant for a model, with `(k, m)` as given.
/// The Gaussian mixture uses the MLE inflation for hierarchical data and a
/// fixed inflation of 100 for time series.
pub fn variant_config(model: &ModelData, variant: Variant, k: f64, m: f64) -> Result<(MixtureConfig, Option<MixtureMle>)> {
    match (model, variant) {
        (ModelData::Hier(d), Variant::GaussianMixture) => {
            let (cfg, mle) = hier::gaussian_mixture_config(d, k, m)?;
            Ok((cfg, Some(mle)))
        }
        (ModelData::Ou(_), Variant::GaussianMixture) => Ok((
            MixtureConfig::new(variant, k, m).with_fixed_alpha(ou::GAUSSIAN_MIXTURE_ALPHA),
            None,
        )),
        (ModelData::Toy(d), v) => Ok((d.mixture_config(v)?, None)),
        _ => Ok((MixtureConfig::new(variant, k, m), None)),
    }
}

/// Run one ensemble; divergent chains are recorded rather than fatal.
#[allow(clippy::too_many_arguments)]
pub fn fit(
    label: &str,
    dataset: &str,
    model: &ModelData,
    variant: Variant,
    k: f64,
    m: f64,
    settings: &ChainSettings,
    seed: u64,
) -> Result<Fit> {
    let (mix, mle) = variant_config(model, variant, k, m)?;
    let config = settings.config(seed, mix);
    let mut chains = Vec::new();
    let mut failures = Vec::new();
    for (id, res) in (1u64..).zip(run_ensemble_each(model, &config)?) {
        match res {
            Ok(c) => chains.push(c),
            Err(e) => failures.push((id, e.to_string())),
        }
    }
    Ok(Fit {
        label: label.to_string(),
        dataset: dataset.to_string(),
        variant,
        config,
        chains,
        failures,
        mle,
    })
}

/// Summary rows of `params` for a fit, with MSE ratios against `reference`.
pub fn summarize_fit(
    fit: &Fit,
    params: &[(&str, Option<f64>)],
    reference: Option<&[SummaryRow]>,
    timing: bool,
) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();
    if fit.chains.is_empty() {
        return Ok(rows);
    }
    for &(name, gen) in params {
        let per_chain = fit.column_per_chain(name);
        if per_chain.is_empty() {
            continue;
        }
        let ref_mse = reference
            .and_then(|r| r.iter().find(|row| row.parameter == name))
            .and_then(|row| row.mse);
        let elapsed = timing.then(|| fit.elapsed());
        rows.push(diagnostics::summarize(name, &per_chain, gen, ref_mse, elapsed)?);
    }
    Ok(rows)
}

/// The seven-year, 242-point light-curve stand-in: irregular nightly times in
/// observing seasons, per-point errors of 0.015-0.05 mag, an O-U curve at
/// `gen`, and outliers of 0.3-0.5 mag at [`MACHO_OUTLIER_ROWS`].
pub fn synthetic_macho_template(gen: (f64, f64, f64), rng: &mut RngStream) -> Result<TimeSeries> {
    const N: usize = 242;
    const SEASONS: usize = 8;
    let mut t = Vec::with_capacity(N);
    for s in 0..SEASONS {
        let count = N / SEASONS + usize::from(s < N % SEASONS);
        let start = 49_000.0 + s as f64 * 365.25;
        let mut season: Vec<f64> = (0..count).map(|_| start + 240.0 * rng.uniform()).collect();
        season.sort_by(f64::total_cmp);
        t.extend(season);
    }
    for i in 1..N {
        if t[i] <= t[i - 1] {
            t[i] = t[i - 1] + 0.01;
        }
    }
    let v: Vec<f64> = (0..N)
        .map(|_| (0.015 + 0.035 * rng.uniform()).powi(2))
        .collect();
    let (mu, s2, tau) = gen;
    let (_, mut y) = ou::ou_simulate(&t, mu, s2, tau, &v, ErrorKind::Gaussian, rng)?;
    let shifts = [0.35, -0.30, 0.45, 0.30, -0.40, 0.50, 0.35];
    for (&row, s) in MACHO_OUTLIER_ROWS.iter().zip(shifts) {
        y[row - 1] += s;
    }
    TimeSeries::new(t, y, v)
}

/// The bundled 31-hospital data set and its simulated-index column, with
/// `V` the squares of the tabulated standard deviations.
pub fn hospital_dataset() -> (HierData, Vec<f64>) {
    (HierData::hospital(), HierData::hospital_sim().y)
}

/// Hierarchical sensitivity data: `n` points of the shared base sample with
/// the first `ceil(p n)` replaced by `N(0, 20^2)` draws.
pub fn size_grid_data(base: &[f64], outliers: &[f64], n: usize, p: f64) -> HierData {
    let n_out = (p * n as f64 - 1e-9).ceil().max(0.0) as usize;
    let mut y = base[..n].to_vec();
    y[..n_out].copy_from_slice(&outliers[..n_out]);
    HierData {
        y,
        v: vec![1.0; n],
    }
}

/// Everything an experiment produced, in memory.
#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub spec: ExperimentSpec,
    pub datasets: Vec<Dataset>,
    pub fits: Vec<Fit>,
    /// `(fit label, summary row)`.
    pub rows: Vec<(String, SummaryRow)>,
    /// Histogram TV distance of each mixture fit's main scale parameter to
    /// the Student-t fit on the same data.
    pub tv_to_t: Vec<(String, String, f64)>,
    /// Rows (1-based) whose indicator mean exceeds the threshold, per fit.
    pub flagged: BTreeMap<String, Vec<usize>>,
}

impl ExperimentReport {
    pub fn fit(&self, label: &str) -> Option<&Fit> {
        self.fits.iter().find(|f| f.label == label)
    }

    pub fn row(&self, label: &str, param: &str) -> Option<&SummaryRow> {
        self.rows
            .iter()
            .find(|(l, r)| l == label && r.parameter == param)
            .map(|(_, r)| r)
    }

    pub fn failures(&self) -> usize {
        self.fits.iter().map(|f| f.failures.len()).sum()
    }
}

/// A named data set with the parameters summarized for it.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub name: String,
    pub model: ModelData,
    /// Monitored parameter names with generative values, if known.
    pub params: Vec<(String, Option<f64>)>,
    /// Parameter compared against the Student-t fit in sensitivity runs.
    pub scale_param: String,
}

impl Dataset {
    /// Default parameters for the model type, with no generative values.
    pub fn new(name: &str, model: ModelData) -> Self {
        let (params, scale): (Vec<&str>, &str) = match &model {
            ModelData::Toy(_) => (vec!["mu"], "mu"),
            ModelData::Hier(_) => (vec!["beta", "log_A"], "log_A"),
            ModelData::Ou(_) => (vec!["mu", "log_sigma", "log_tau"], "log_sigma"),
        };
        Self {
            name: name.to_string(),
            model,
            params: params.into_iter().map(|p| (p.to_string(), None)).collect(),
            scale_param: scale.to_string(),
        }
    }

    /// Attach a generative value to a parameter; unknown names are an error.
    pub fn with_truth(mut self, param: &str, value: f64) -> Result<Self> {
        match self.params.iter_mut().find(|(p, _)| p == param) {
            Some(slot) => slot.1 = Some(value),
            None => return Err(invalid(format!("no parameter '{param}' in the {} model", self.model.name()))),
        }
        Ok(self)
    }

    fn hier(name: &str, data: HierData, gen: (f64, f64)) -> Result<Self> {
        Dataset::new(name, ModelData::Hier(data))
            .with_truth("beta", gen.0)?
            .with_truth("log_A", gen.1.ln())
    }

    fn ou(name: &str, data: TimeSeries, gen: (f64, f64, f64)) -> Result<Self> {
        Dataset::new(name, ModelData::Ou(data))
            .with_truth("mu", gen.0)?
            .with_truth("log_sigma", 0.5 * gen.1.ln())?
            .with_truth("log_tau", gen.2.ln())
    }
}

fn load_hier(spec: &ExperimentSpec) -> Result<(HierData, Option<Vec<f64>>)> {
    match &spec.data {
        Some(p) => io::read_hier_csv(Path::new(p)),
        None => Ok((HierData::hospital(), Some(HierData::hospital_sim().y))),
    }
}

fn outlier_spec(spec: &ExperimentSpec) -> Vec<(usize, f64)> {
    match &spec.outliers {
        Some(o) => o.iter().map(|&(i, m)| (i.saturating_sub(1), m)).collect(),
        None => hier::HOSPITAL_OUTLIERS.to_vec(),
    }
}

fn simulated_hier(spec: &ExperimentSpec, data_rng: &mut RngStream) -> Result<HierData> {
    let (base, y_sim) = load_hier(spec)?;
    let gen = spec.gen_hier.unwrap_or((hier::HOSPITAL_BETA_GEN, hier::HOSPITAL_A_GEN));
    let y = match y_sim {
        // Bundled simulated indices are used verbatim.
        Some(y) if spec.gen_hier.is_none() => y,
        _ => hier::simulate_hier(gen.0, gen.1, &base.v, ErrorKind::Gaussian, data_rng)?.1,
    };
    HierData::new(y, base.v)
}

fn ou_template(spec: &ExperimentSpec, gen: (f64, f64, f64), data_rng: &mut RngStream) -> Result<(TimeSeries, Vec<usize>)> {
    match &spec.data {
        Some(p) => {
            let t = io::read_series_csv(Path::new(p))?;
            let rows = match &spec.outlier_indices {
                Some(r) => r.clone(),
                None if t.len() == 242 => MACHO_OUTLIER_ROWS.to_vec(),
                None => Vec::new(),
            };
            Ok((t, rows))
        }
        None => Ok((
            synthetic_macho_template(gen, data_rng)?,
            spec.outlier_indices.clone().unwrap_or_else(|| MACHO_OUTLIER_ROWS.to_vec()),
        )),
    }
}

fn zero_based(rows: &[usize], n: usize) -> Result<Vec<usize>> {
    rows.iter()
        .map(|&r| {
            if r >= 1 && r <= n {
                Ok(r - 1)
            } else {
                Err(invalid(format!("row {r} is out of range 1..={n}")))
            }
        })
        .collect()
}

fn build_datasets(spec: &ExperimentSpec) -> Result<Vec<Dataset>> {
    let mut data_rng = RngStream::new(spec.seed, DATA_STREAM);
    let hier_gen = spec.gen_hier.unwrap_or((hier::HOSPITAL_BETA_GEN, hier::HOSPITAL_A_GEN));
    let ou_gen = spec.gen_ou.unwrap_or(ou::LIGHT_CURVE_GENERATIVE);
    Ok(match spec.protocol {
        Protocol::HospSim => vec![Dataset::hier("y_sim", simulated_hier(spec, &mut data_rng)?, hier_gen)?],
        Protocol::HospOutlier => {
            let sim = simulated_hier(spec, &mut data_rng)?;
            let y = hier::inject_outliers(&sim.y, &sim.v, &outlier_spec(spec))?;
            vec![Dataset::hier("y_out", HierData::new(y, sim.v)?, hier_gen)?]
        }
        Protocol::SensBetaPrior => {
            let data = match spec.data_errors {
                ErrorKind::Gaussian => {
                    let sim = simulated_hier(spec, &mut data_rng)?;
                    let y = hier::inject_outliers(&sim.y, &sim.v, &outlier_spec(spec))?;
                    HierData::new(y, sim.v)?
                }
                ErrorKind::T4 => {
                    let (base, _) = load_hier(spec)?;
                    let (b, a) = hier_gen;
                    let y = hier::simulate_hier(b, a, &base.v, ErrorKind::T4, &mut data_rng)?.1;
                    HierData::new(y, base.v)?
                }
            };
            let name = match spec.data_errors {
                ErrorKind::Gaussian => "y_out",
                ErrorKind::T4 => "y_t4",
            };
            vec![Dataset::hier(name, data, hier_gen)?]
        }
        Protocol::SensSizeGrid => {
            let (b, a) = spec.gen_hier.unwrap_or((0.0, 1.0));
            let base: Vec<f64> = (0..100)
                .map(|_| dists::sample_normal(b, 1.0 + a, &mut data_rng))
                .collect::<Result<_>>()?;
            let outliers: Vec<f64> = (0..100)
                .map(|_| dists::sample_normal(0.0, 400.0, &mut data_rng))
                .collect::<Result<_>>()?;
            let mut out = Vec::new();
            for &n in &spec.sizes {
                for &p in &spec.proportions {
                    let name = format!("n{n}_p{}", (p * 100.0).round());
                    out.push(Dataset::hier(&name, size_grid_data(&base, &outliers, n, p), (b, a))?);
                }
            }
            out
        }
        Protocol::OuSim => {
            let (template, rows) = ou_template(spec, ou_gen, &mut data_rng)?;
            let idx = zero_based(&rows, template.len())?;
            let (series, _) =
                ou::simulate_macho_like(&template, ou_gen, &idx, spec.repeats, ErrorKind::Gaussian, &mut data_rng)?;
            vec![Dataset::ou("y_sim", series, ou_gen)?]
        }
        Protocol::OuSens => {
            let (template, rows) = ou_template(spec, ou_gen, &mut data_rng)?;
            let series = match spec.data_errors {
                ErrorKind::Gaussian => {
                    let idx = zero_based(&rows, template.len())?;
                    ou::simulate_macho_like(&template, ou_gen, &idx, spec.repeats, ErrorKind::Gaussian, &mut data_rng)?.0
                }
                ErrorKind::T4 => {
                    let (mu, s2, tau) = ou_gen;
                    let (_, y) = ou::ou_simulate(&template.t, mu, s2, tau, &template.v, ErrorKind::T4, &mut data_rng)?;
                    TimeSeries::new(template.t.clone(), y, template.v.clone())?
                }
            };
            let name = match spec.data_errors {
                ErrorKind::Gaussian => "y_sim",
                ErrorKind::T4 => "y_t4",
            };
            vec![Dataset::ou(name, series, ou_gen)?]
        }
    })
}

/// `(label, variant, k, m)` for every fit on a dataset.
fn fit_plan(spec: &ExperimentSpec, ds: &Dataset) -> Result<Vec<(String, Variant, f64, f64)>> {
    let n = ds.model.len();
    let k = spec.k.unwrap_or(n as f64);
    let prefix = |s: &str| {
        if spec.protocol == Protocol::SensSizeGrid {
            format!("{}/{s}", ds.name)
        } else {
            s.to_string()
        }
    };
    let mut plan = Vec::new();
    match spec.protocol {
        Protocol::HospSim | Protocol::HospOutlier | Protocol::OuSim => {
            for &v in &spec.variants {
                plan.push((prefix(v.code()), v, k, spec.m));
            }
        }
        Protocol::SensBetaPrior | Protocol::OuSens | Protocol::SensSizeGrid => {
            let priors = spec.priors.clone().unwrap_or_else(|| match spec.protocol {
                Protocol::SensSizeGrid => vec![
                    PriorSpec::Relative { k_over_n: 1.0, m: 0.01 },
                    PriorSpec::Relative { k_over_n: 0.2, m: 0.01 },
                    PriorSpec::uniform(),
                ],
                _ => PriorSpec::sensitivity_grid(),
            });
            if spec.protocol == Protocol::SensSizeGrid {
                plan.push((prefix("gaussian"), Variant::Gaussian, k, spec.m));
            }
            plan.push((prefix("t"), Variant::StudentT, k, spec.m));
            for p in &priors {
                let (pk, pm) = p.resolve(n)?;
                plan.push((prefix(&format!("nt[{}]", p.label())), Variant::ProposedMixture, pk, pm));
            }
        }
    }
    Ok(plan)
}

/// Generate data, fit, and summarize, without touching the filesystem.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    spec.validate()?;
    run_datasets(spec, build_datasets(spec)?)
}

/// Fit the plan of `spec.protocol` to the given data sets. The hierarchical
/// and light-curve sensitivity protocols fit the prior grid; the others fit
/// `spec.variants`.
pub fn run_datasets(spec: &ExperimentSpec, datasets: Vec<Dataset>) -> Result<ExperimentReport> {
    spec.validate()?;
    let mut fits = Vec::new();
    let mut rows = Vec::new();
    let mut tv_to_t = Vec::new();
    let mut flagged = BTreeMap::new();
    for ds in &datasets {
        let plan = fit_plan(spec, ds)?;
        let first = fits.len();
        for (label, variant, k, m) in plan {
            fits.push(fit(&label, &ds.name, &ds.model, variant, k, m, &spec.chains, spec.seed)?);
        }
        let these = &fits[first..];
        let params: Vec<(&str, Option<f64>)> = ds.params.iter().map(|(p, g)| (p.as_str(), *g)).collect();
        let reference = these
            .iter()
            .find(|f| f.variant == Variant::ProposedMixture)
            .map(|f| summarize_fit(f, &params, None, spec.record_timing))
            .transpose()?;
        for f in these {
            for r in summarize_fit(f, &params, reference.as_deref(), spec.record_timing)? {
                rows.push((f.label.clone(), r));
            }
            if matches!(f.variant, Variant::GaussianMixture | Variant::ProposedMixture) && !f.chains.is_empty() {
                let rows1: Vec<usize> = f
                    .z_mean()
                    .iter()
                    .enumerate()
                    .filter(|(_, &z)| z > spec.outlier_threshold)
                    .map(|(i, _)| i + 1)
                    .collect();
                flagged.insert(f.label.clone(), rows1);
            }
        }
        if let Some(t) = these.iter().find(|f| f.variant == Variant::StudentT) {
            let t_draws = t.pooled(&ds.scale_param);
            for f in these.iter().filter(|f| f.variant == Variant::ProposedMixture) {
                let d = f.pooled(&ds.scale_param);
                if !d.is_empty() && !t_draws.is_empty() {
                    tv_to_t.push((
                        f.label.clone(),
                        ds.scale_param.clone(),
                        diagnostics::tv_distance_samples(&d, &t_draws, 50),
                    ));
                }
            }
        }
    }
    Ok(ExperimentReport {
        spec: spec.clone(),
        datasets,
        fits,
        rows,
        tv_to_t,
        flagged,
    })
}

fn file_label(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

#[derive(Serialize)]
struct FitManifest<'a> {
    label: &'a str,
    dataset: &'a str,
    variant: Variant,
    config: &'a ChainConfig,
    kept_per_chain: usize,
    acceptance: Vec<BTreeMap<String, f64>>,
    scales: Vec<BTreeMap<String, f64>>,
    mle: Option<MixtureMle>,
    failures: &'a [(u64, String)],
}

#[derive(Serialize)]
struct Manifest<'a> {
    spec: &'a ExperimentSpec,
    fits: Vec<FitManifest<'a>>,
}

#[derive(Serialize)]
struct TvRow<'a> {
    label: &'a str,
    parameter: &'a str,
    tv_to_t: f64,
}

/// Write a report to `dir` as a bundle.
pub fn write_bundle(report: &ExperimentReport, dir: &Path) -> Result<()> {
    let sub = |s: &str| {
        let p = dir.join(s);
        fs::create_dir_all(&p).map(|_| p)
    };
    let data_dir = sub("data")?;
    let chain_dir = sub("chains")?;
    let report_dir = sub("reports")?;
    let fig_dir = sub("figures-data")?;

    for ds in &report.datasets {
        let path = data_dir.join(format!("{}.csv", file_label(&ds.name)));
        match &ds.model {
            ModelData::Hier(d) => io::write_hier_csv(&path, d, None)?,
            ModelData::Ou(s) => io::write_series_csv(&path, s)?,
            ModelData::Toy(d) => io::write_indexed_csv(&path, "y", &d.y)?,
        }
    }
    for f in &report.fits {
        let label = file_label(&f.label);
        for c in &f.chains {
            io::write_chain_csv(&chain_dir.join(format!("{label}_chain{}.csv", c.stream_id)), c)?;
        }
        if f.chains.is_empty() {
            continue;
        }
        io::write_indexed_csv(&fig_dir.join(format!("z_mean_{label}.csv")), "z_mean", &f.z_mean())?;
        io::write_indexed_csv(&fig_dir.join(format!("latent_mean_{label}.csv")), "latent_mean", &f.latent_mean())?;
        for name in &f.chains[0].names {
            let pooled = f.pooled(name);
            let (grid, dens) = diagnostics::kde(&pooled)?;
            io::write_density_csv(&fig_dir.join(format!("density_{label}_{name}.csv")), &grid, &dens)?;
            let acf = diagnostics::autocorrelation(f.chains[0].column(name).unwrap_or(&[]), 100);
            io::write_acf_csv(&fig_dir.join(format!("acf_{label}_{name}.csv")), &acf)?;
        }
    }

    io::write_summary_csv(&report_dir.join("summary.csv"), &report.rows)?;
    io::write_json(&report_dir.join("summary.json"), &report.rows)?;
    let tv: Vec<TvRow> = report
        .tv_to_t
        .iter()
        .map(|(l, p, d)| TvRow { label: l, parameter: p, tv_to_t: *d })
        .collect();
    io::write_json(&report_dir.join("tv_to_t.json"), &tv)?;
    io::write_json(&report_dir.join("flagged.json"), &report.flagged)?;
    let manifest = Manifest {
        spec: &report.spec,
        fits: report
            .fits
            .iter()
            .map(|f| FitManifest {
                label: &f.label,
                dataset: &f.dataset,
                variant: f.variant,
                config: &f.config,
                kept_per_chain: f.config.kept(),
                acceptance: f.chains.iter().map(|c| c.acceptance.clone()).collect(),
                scales: f.chains.iter().map(|c| c.scales.clone()).collect(),
                mle: f.mle,
                failures: &f.failures,
            })
            .collect(),
    };
    io::write_json(&report_dir.join("manifest.json"), &manifest)?;
    if report.spec.record_timing {
        let timing: BTreeMap<&str, Vec<f64>> = report
            .fits
            .iter()
            .map(|f| (f.label.as_str(), f.chains.iter().map(|c| c.elapsed_seconds).collect()))
            .collect();
        io::write_json(&report_dir.join("timing.json"), &timing)?;
    }
    Ok(())
}

/// Run an experiment and write its bundle to `dir`.
pub fn run_experiment_to(spec: &ExperimentSpec, dir: &Path) -> Result<ExperimentReport> {
    let report = run_experiment(spec)?;
    write_bundle(&report, dir)?;
    io::write_json(&dir.join("spec.json"), spec)?;
    Ok(report)
}
