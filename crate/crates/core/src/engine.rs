//! Chain orchestration: the outer Gibbs loop that wraps a host model's own
//! conditionals with the mixture-error updates, adaptive Metropolis scales,
//! burn-in, thinning and multi-chain execution.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dists::RngStream;
use crate::error::{invalid, Error, Result};
use crate::hier::{HierData, HierSampler};
use crate::location_toy::{ToyData, ToySampler};
use crate::mixture::{MixtureConfig, OutlierLatentState};
use crate::ou::{OuSampler, TimeSeries};

/// Initial random-walk step on the log scale for every adaptive update.
pub const INITIAL_LOG_STEP: f64 = 1.0;

/// Environment variable capping the number of worker threads in
/// [`run_ensemble`].
pub const THREADS_ENV: &str = "RMIX_THREADS";

/// A Metropolis proposal scale tuned toward a target acceptance rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveScale {
    pub current: f64,
    pub target: f64,
    pub adapting: bool,
}

impl AdaptiveScale {
    pub fn new(current: f64, target: f64) -> Self {
        Self {
            current,
            target,
            adapting: true,
        }
    }

    pub fn frozen(self) -> Self {
        Self {
            adapting: false,
            ..self
        }
    }
}

/// Multiplicative Robbins-Monro step `current * exp(t^-0.6 (1[acc] - target))`.
///
/// `iteration` counts from 1. A frozen scale is returned unchanged.
pub fn adapt_scale(scale: AdaptiveScale, accepted: bool, iteration: usize) -> AdaptiveScale {
    if !scale.adapting {
        return scale;
    }
    let gamma = (iteration.max(1) as f64).powf(-0.6);
    let hit = if accepted { 1.0 } else { 0.0 };
    let current = (scale.current * (gamma * (hit - scale.target)).exp()).clamp(1e-8, 1e3);
    AdaptiveScale { current, ..scale }
}

/// One Metropolis step for a positive quantity, proposing on the log scale.
///
/// `log_target` is the unnormalized log density on the original scale; the
/// Jacobian of the log transform enters as the Hastings factor `x*/x`.
pub fn log_scale_mh_step(
    current: f64,
    log_target: impl Fn(f64) -> f64,
    scale: &AdaptiveScale,
    rng: &mut RngStream,
) -> (f64, bool) {
    let proposal = (current.ln() + scale.current * rng.standard_normal()).exp();
    let u = rng.uniform();
    let log_ratio = log_target(proposal) - log_target(current) + proposal.ln() - current.ln();
    if proposal.is_finite() && proposal > 0.0 && u.ln() < log_ratio {
        (proposal, true)
    } else {
        (current, false)
    }
}

/// The part of a chain that differs between host models.
///
/// The engine hands the sampler the effective variances `alpha^z V` before
/// each model update and reads residuals back for the mixture updates.
pub trait HostSampler {
    /// Known measurement variances `V`.
    fn variances(&self) -> &[f64];
    /// `y_i` minus the current model mean for datum `i`.
    fn residuals(&self, out: &mut [f64]);
    /// One pass of the model's own conditionals given effective variances.
    fn update(&mut self, v_eff: &[f64], rng: &mut RngStream) -> Result<()>;
    /// Names of the model's monitored scalars.
    fn monitored_names(&self) -> Vec<String>;
    /// Current values of the monitored scalars, in name order.
    fn monitored(&self, out: &mut Vec<f64>);
    /// Per-datum latent values (random effects, latent curve, location).
    fn latent(&self) -> &[f64];
    /// Names of the Metropolis updates, aligned with [`HostSampler::scales_mut`].
    fn mh_names(&self) -> Vec<String>;
    fn scales_mut(&mut self) -> &mut [AdaptiveScale];
    /// Acceptance flags of the most recent update, aligned with the scales.
    fn last_accepted(&self) -> &[bool];
}

/// Data for one of the supported host models.
#[derive(Clone, Debug)]
pub enum ModelData {
    Toy(ToyData),
    Hier(HierData),
    Ou(TimeSeries),
}

impl ModelData {
    pub fn name(&self) -> &'static str {
        match self {
            ModelData::Toy(_) => "toy",
            ModelData::Hier(_) => "hier",
            ModelData::Ou(_) => "ou",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ModelData::Toy(d) => d.y.len(),
            ModelData::Hier(d) => d.y.len(),
            ModelData::Ou(d) => d.y.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn sampler(&self, config: &ChainConfig) -> Result<Box<dyn HostSampler + '_>> {
        let target = config.target_acceptance;
        Ok(match self {
            ModelData::Toy(d) => Box::new(ToySampler::new(d)?),
            ModelData::Hier(d) => Box::new(HierSampler::new(d, target)?),
            ModelData::Ou(d) => Box::new(OuSampler::new(d, target)?),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub n_chains: usize,
    pub seed: u64,
    pub target_acceptance: f64,
    pub mixture: MixtureConfig,
}

impl ChainConfig {
    pub fn new(n_iter: usize, burn_in: usize, seed: u64, mixture: MixtureConfig) -> Self {
        Self {
            n_iter,
            burn_in,
            thin: 1,
            n_chains: 1,
            seed,
            target_acceptance: 0.35,
            mixture,
        }
    }

    pub fn with_thin(mut self, thin: usize) -> Self {
        self.thin = thin;
        self
    }

    pub fn with_chains(mut self, n_chains: usize) -> Self {
        self.n_chains = n_chains;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.n_iter {
            return Err(invalid(format!(
                "burn-in ({}) must be smaller than the number of iterations ({})",
                self.burn_in, self.n_iter
            )));
        }
        if self.thin == 0 {
            return Err(invalid("thin must be at least 1"));
        }
        if self.n_chains == 0 {
            return Err(invalid("at least one chain is required"));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(invalid(format!(
                "target acceptance must lie in (0, 1), got {}",
                self.target_acceptance
            )));
        }
        self.mixture.validate()
    }

    /// Number of draws a chain keeps: `floor((n_iter - burn_in) / thin)`.
    pub fn kept(&self) -> usize {
        (self.n_iter - self.burn_in) / self.thin
    }
}

/// Everything one chain reports. Equality ignores the wall-clock time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChainOutput {
    pub stream_id: u64,
    pub names: Vec<String>,
    /// Kept draws; `columns[j]` belongs to `names[j]`.
    pub columns: Vec<Vec<f64>>,
    /// Post-burn-in acceptance rate of every Metropolis update.
    pub acceptance: BTreeMap<String, f64>,
    /// Proposal scales in force after burn-in.
    pub scales: BTreeMap<String, f64>,
    /// Post-burn-in running mean of each outlier indicator.
    pub z_mean: Vec<f64>,
    /// Post-burn-in running mean of each inflation `alpha_i`.
    pub alpha_mean: Vec<f64>,
    /// Post-burn-in running mean of the per-datum latent values.
    pub latent_mean: Vec<f64>,
    /// Wall-clock duration; kept out of deterministic outputs.
    #[serde(skip)]
    pub elapsed_seconds: f64,
}

impl PartialEq for ChainOutput {
    fn eq(&self, other: &Self) -> bool {
        self.stream_id == other.stream_id
            && self.names == other.names
            && self.columns == other.columns
            && self.acceptance == other.acceptance
            && self.scales == other.scales
            && self.z_mean == other.z_mean
            && self.alpha_mean == other.alpha_mean
            && self.latent_mean == other.latent_mean
    }
}

impl ChainOutput {
    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|j| self.columns[j].as_slice())
    }

    pub fn kept(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }
}

/// Run a single chain. Streams `2 id` and `2 id + 1` of `config.seed` drive the
/// host model and the mixture updates respectively, so a mixture chain whose
/// indicators never switch on retraces the Gaussian chain exactly.
pub fn run_chain(model: &ModelData, config: &ChainConfig, stream_id: u64) -> Result<ChainOutput> {
    config.validate()?;
    let started = Instant::now();
    let mut sampler = model.sampler(config)?;
    let mut out = run_with(sampler.as_mut(), config, stream_id)?;
    out.elapsed_seconds = started.elapsed().as_secs_f64();
    Ok(out)
}

fn run_with(sampler: &mut dyn HostSampler, config: &ChainConfig, stream_id: u64) -> Result<ChainOutput> {
    let mix = &config.mixture;
    let mut model_rng = RngStream::new(config.seed, 2 * stream_id);
    let mut mix_rng = RngStream::new(config.seed, 2 * stream_id + 1);

    let v: Vec<f64> = sampler.variances().to_vec();
    let n = v.len();
    let mut latent = OutlierLatentState::initial(n, mix);
    let mut nu_scale = AdaptiveScale::new(INITIAL_LOG_STEP, config.target_acceptance);

    let mut names = sampler.monitored_names();
    let track_theta = mix.updates_theta();
    let track_nu = mix.updates_nu();
    if track_theta {
        names.push("theta".into());
    }
    if track_nu {
        names.push("nu".into());
    }
    let mut mh_names = sampler.mh_names();
    let n_host_mh = mh_names.len();
    if track_nu {
        mh_names.push("nu".into());
    }

    let kept = config.kept();
    let mut columns: Vec<Vec<f64>> = names.iter().map(|_| Vec::with_capacity(kept)).collect();
    let mut accepted_counts = vec![0usize; mh_names.len()];
    let mut z_sum = vec![0.0; n];
    let mut alpha_sum = vec![0.0; n];
    let mut latent_sum = vec![0.0; n];
    let mut v_eff = vec![0.0; n];
    let mut resid = vec![0.0; n];
    let mut row = Vec::with_capacity(names.len());

    for t in 1..=config.n_iter {
        if t == config.burn_in + 1 {
            for s in sampler.scales_mut() {
                *s = s.frozen();
            }
            nu_scale = nu_scale.frozen();
        }
        for i in 0..n {
            v_eff[i] = latent.inflation(i) * v[i];
        }
        sampler.update(&v_eff, &mut model_rng)?;
        sampler.residuals(&mut resid);
        let nu_acc = latent.sweep(mix, &resid, &v, &nu_scale, &mut mix_rng)?;

        let host_acc: Vec<bool> = sampler.last_accepted().to_vec();
        for (s, &acc) in sampler.scales_mut().iter_mut().zip(&host_acc) {
            *s = adapt_scale(*s, acc, t);
        }
        if let Some(acc) = nu_acc {
            nu_scale = adapt_scale(nu_scale, acc, t);
        }

        row.clear();
        sampler.monitored(&mut row);
        if track_theta {
            row.push(latent.theta);
        }
        if track_nu {
            row.push(latent.nu);
        }
        if let Some(j) = row.iter().position(|x| !x.is_finite()) {
            return Err(Error::ChainDiverged {
                stream_id,
                iteration: t,
                what: names[j].clone(),
            });
        }
        if let Some(i) = sampler.latent().iter().position(|x| !x.is_finite()) {
            return Err(Error::ChainDiverged {
                stream_id,
                iteration: t,
                what: format!("latent value {}", i + 1),
            });
        }

        if t <= config.burn_in {
            continue;
        }
        for (c, &acc) in accepted_counts.iter_mut().zip(&host_acc) {
            *c += acc as usize;
        }
        if let Some(acc) = nu_acc {
            accepted_counts[n_host_mh] += acc as usize;
        }
        let lat = sampler.latent();
        for i in 0..n {
            z_sum[i] += latent.z[i] as u8 as f64;
            alpha_sum[i] += latent.alpha[i];
            latent_sum[i] += lat[i];
        }
        if (t - config.burn_in) % config.thin == 0 {
            for (c, &x) in columns.iter_mut().zip(&row) {
                c.push(x);
            }
        }
    }

    let post = (config.n_iter - config.burn_in) as f64;
    let acceptance = mh_names
        .iter()
        .zip(&accepted_counts)
        .map(|(name, &c)| (name.clone(), c as f64 / post))
        .collect();
    let mut scales: BTreeMap<String, f64> = sampler
        .mh_names()
        .into_iter()
        .zip(sampler.scales_mut().iter().map(|s| s.current))
        .collect();
    if track_nu {
        scales.insert("nu".into(), nu_scale.current);
    }
    let mean = |s: Vec<f64>| s.into_iter().map(|x| x / post).collect::<Vec<_>>();
    Ok(ChainOutput {
        stream_id,
        names,
        columns,
        acceptance,
        scales,
        z_mean: mean(z_sum),
        alpha_mean: mean(alpha_sum),
        latent_mean: mean(latent_sum),
        elapsed_seconds: 0.0,
    })
}

/// Worker count for ensembles: `RMIX_THREADS` if set and positive, else
/// rayon's default.
pub fn thread_count() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

/// Run `config.n_chains` chains with stream ids `1..=n_chains`, reporting each
/// chain's result separately so one divergence does not discard the rest.
pub fn run_ensemble_each(model: &ModelData, config: &ChainConfig) -> Result<Vec<Result<ChainOutput>>> {
    config.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_count().min(config.n_chains))
        .build()
        .map_err(|e| invalid(format!("cannot start worker pool: {e}")))?;
    Ok(pool.install(|| {
        (1..=config.n_chains as u64)
            .into_par_iter()
            .map(|id| run_chain(model, config, id))
            .collect()
    }))
}

/// Run `config.n_chains` chains; output is ordered by stream id.
pub fn run_ensemble(model: &ModelData, config: &ChainConfig) -> Result<Vec<ChainOutput>> {
    run_ensemble_each(model, config)?.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hier::HierData;
    use crate::location_toy::ToyData;
    use crate::mixture::{MixtureConfig, Variant};
    use proptest::prelude::*;

    fn toy() -> ModelData {
        let mut y: Vec<f64> = (0..20).map(|i| ((i * 37 % 19) as f64 - 9.0) / 9.0).collect();
        y[19] = 10.0;
        ModelData::Toy(ToyData::new(y).unwrap())
    }

    #[test]
    fn adaptation_is_identity_when_frozen() {
        let s = AdaptiveScale::new(0.7, 0.35).frozen();
        assert_eq!(adapt_scale(s, true, 3), s);
        assert_eq!(adapt_scale(s, false, 3), s);
    }

    #[test]
    fn adaptation_grows_on_acceptance() {
        let mut s = AdaptiveScale::new(0.5, 0.35);
        // Few enough steps to stay below the upper clamp.
        for t in 1..20 {
            let next = adapt_scale(s, true, t);
            assert!(next.current > s.current);
            s = next;
        }
        let shrunk = adapt_scale(s, false, 20);
        assert!(shrunk.current < s.current);
    }

    #[test]
    fn tiny_log_steps_are_accepted() {
        let mut rng = RngStream::new(1, 0);
        let s = AdaptiveScale::new(1e-10, 0.35);
        let acc = (0..1000)
            .filter(|_| log_scale_mh_step(2.0, |x| -x, &s, &mut rng).1)
            .count();
        assert!(acc >= 995);
    }

    #[test]
    fn kept_count_is_floor() {
        let mix = MixtureConfig::new(Variant::Gaussian, 20.0, 0.1);
        let c = ChainConfig::new(1050, 50, 1, mix.clone()).with_thin(10);
        assert_eq!(c.kept(), 100);
        let c = ChainConfig::new(1055, 50, 1, mix.clone()).with_thin(10);
        assert_eq!(c.kept(), 100);
        let out = run_chain(&toy(), &ChainConfig::new(1050, 50, 1, mix).with_thin(10), 1).unwrap();
        assert_eq!(out.kept(), 100);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mix = MixtureConfig::new(Variant::Gaussian, 20.0, 0.1);
        assert!(ChainConfig::new(10, 10, 1, mix.clone()).validate().is_err());
        assert!(ChainConfig::new(10, 1, 1, mix.clone()).with_thin(0).validate().is_err());
        assert!(ChainConfig::new(10, 1, 1, mix).with_chains(0).validate().is_err());
    }

    #[test]
    fn chains_are_deterministic() {
        let mix = MixtureConfig::new(Variant::StudentT, 20.0, 0.1).with_fixed_nu(4.0);
        let c = ChainConfig::new(2000, 500, 11, mix);
        let a = run_chain(&toy(), &c, 3).unwrap();
        let b = run_chain(&toy(), &c, 3).unwrap();
        assert_eq!(a, b);
        let d = run_chain(&toy(), &c, 4).unwrap();
        assert_ne!(a.columns, d.columns);
    }

    #[test]
    fn ensemble_matches_individual_chains() {
        let mix = MixtureConfig::new(Variant::ProposedMixture, 2.0, 0.5);
        let c = ChainConfig::new(800, 200, 5, mix).with_chains(3);
        let all = run_ensemble(&toy(), &c).unwrap();
        assert_eq!(all.len(), 3);
        for (k, out) in all.iter().enumerate() {
            assert_eq!(out.stream_id, k as u64 + 1);
            assert_eq!(out, &run_chain(&toy(), &c, k as u64 + 1).unwrap());
        }
        let one = run_ensemble(&toy(), &c.clone().with_chains(1)).unwrap();
        assert_eq!(one[0], run_chain(&toy(), &c, 1).unwrap());
    }

    #[test]
    fn zero_theta_mixture_retraces_gaussian_chain() {
        let data = ModelData::Hier(HierData::hospital_outliers());
        let g = ChainConfig::new(3000, 1000, 9, MixtureConfig::new(Variant::Gaussian, 31.0, 0.01));
        let nt = ChainConfig::new(
            3000,
            1000,
            9,
            MixtureConfig::new(Variant::ProposedMixture, 31.0, 0.01).with_fixed_theta(0.0),
        );
        let a = run_chain(&data, &g, 2).unwrap();
        let b = run_chain(&data, &nt, 2).unwrap();
        for name in ["beta", "log_A"] {
            assert_eq!(a.column(name).unwrap(), b.column(name).unwrap(), "{name}");
        }
        assert!(b.z_mean.iter().all(|&z| z == 0.0));
    }

    #[test]
    fn monitored_columns_follow_gating() {
        let data = ModelData::Hier(HierData::hospital_outliers());
        let cols = |mix: MixtureConfig| {
            run_chain(&data, &ChainConfig::new(20, 10, 1, mix), 1).unwrap().names
        };
        assert_eq!(cols(MixtureConfig::new(Variant::Gaussian, 31.0, 0.01)), ["beta", "log_A"]);
        assert_eq!(cols(MixtureConfig::new(Variant::StudentT, 31.0, 0.01)), ["beta", "log_A", "nu"]);
        assert_eq!(
            cols(MixtureConfig::new(Variant::GaussianMixture, 31.0, 0.01).with_fixed_alpha(50.0)),
            ["beta", "log_A", "theta"]
        );
        assert_eq!(
            cols(MixtureConfig::new(Variant::ProposedMixture, 31.0, 0.01)),
            ["beta", "log_A", "theta", "nu"]
        );
    }

    #[test]
    fn student_t_indicators_stay_on() {
        let data = ModelData::Hier(HierData::hospital_outliers());
        let out = run_chain(&data, &ChainConfig::new(200, 100, 1, MixtureConfig::new(Variant::StudentT, 31.0, 0.01)), 1).unwrap();
        assert!(out.z_mean.iter().all(|&z| z == 1.0));
    }

    #[test]
    fn hier_acceptance_for_a_near_target() {
        let data = ModelData::Hier(HierData::hospital());
        let c = ChainConfig::new(110_000, 10_000, 3, MixtureConfig::new(Variant::Gaussian, 31.0, 0.01));
        let out = run_chain(&data, &c, 1).unwrap();
        let acc = out.acceptance["A"];
        assert!(acc > 0.25 && acc < 0.45, "acceptance {acc}");
    }

    #[test]
    fn between_chain_spread_shrinks_with_length() {
        let mix = MixtureConfig::new(Variant::Gaussian, 20.0, 0.1);
        let spread = |iters: usize| {
            let c = ChainConfig::new(iters + 100, 100, 17, mix.clone()).with_chains(4);
            let means: Vec<f64> = run_ensemble(&toy(), &c)
                .unwrap()
                .iter()
                .map(|o| o.column("mu").unwrap().iter().sum::<f64>() / o.kept() as f64)
                .collect();
            let m = means.iter().sum::<f64>() / 4.0;
            (means.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 3.0).sqrt()
        };
        // Independent draws: expected spread sqrt(0.05 / iters).
        let mut ratios = Vec::new();
        for &iters in &[400usize, 40_000] {
            ratios.push(spread(iters) / (0.05 / iters as f64).sqrt());
        }
        for r in ratios {
            assert!(r > 0.1 && r < 3.0, "ratio {r}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn frozen_scales_never_change(c in 1e-3f64..10.0, acc: bool, t in 1usize..1_000_000) {
            let s = AdaptiveScale::new(c, 0.35).frozen();
            prop_assert_eq!(adapt_scale(s, acc, t), s);
        }

        #[test]
        fn adapted_scale_stays_positive(c in 1e-3f64..10.0, accs in proptest::collection::vec(any::<bool>(), 1..200)) {
            let mut s = AdaptiveScale::new(c, 0.35);
            for (t, a) in accs.into_iter().enumerate() {
                s = adapt_scale(s, a, t + 1);
                prop_assert!(s.current > 0.0 && s.current.is_finite());
            }
        }
    }
}
