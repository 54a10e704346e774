//! Two-level Gaussian hierarchical model
//!
//! ```text
//! y_i | mu_i ~ N(mu_i, V_i),   mu_i | beta, A ~ N(beta, A),
//! beta ~ N(0, 1e5),            1e5 / (1e5 + A) ~ Uniform(0, 1)
//! ```
//!
//! with `V_i` replaced by `alpha_i^{z_i} V_i` under the mixture error.

use serde::{Deserialize, Serialize};

use crate::dists::{self, log_add_exp, logpdf_normal, ErrorKind, RngStream};
use crate::engine::{log_scale_mh_step, AdaptiveScale, HostSampler, INITIAL_LOG_STEP};
use crate::error::{invalid, Error, Result};
use crate::mixture::{MixtureConfig, Variant};
use crate::optim;

/// Standard deviations of the hospital dataset (31 rows).
const HOSPITAL_SD: [f64; 31] = [
    2.78, 2.76, 1.57, 1.42, 1.39, 1.37, 1.36, 1.32, 1.22, 1.22, 1.20, 1.14, 1.10, 1.08, 1.04,
    1.03, 1.02, 1.02, 1.01, 0.98, 0.96, 0.93, 0.93, 0.91, 0.90, 0.84, 0.78, 0.75, 0.74, 0.66,
    0.62,
];

const HOSPITAL_Y: [f64; 31] = [
    -2.07, -0.22, 0.58, -1.87, -0.74, -1.97, -1.90, 2.31, -0.14, -1.21, -1.43, 1.56, 0.00, 0.41,
    0.08, -2.15, -0.34, 0.86, 0.01, 1.11, -0.08, 0.61, 2.05, 0.57, 1.10, -2.42, -0.38, 0.07, 0.96,
    -0.21, 1.14,
];

/// Simulated indices bundled with the hospital dataset, generated at
/// `beta = 0`, `A = 0.722`.
const HOSPITAL_Y_SIM: [f64; 31] = [
    1.72, -1.56, 0.95, 0.36, 0.00, -1.39, 1.64, -1.97, -1.60, -1.09, -0.45, -0.55, 0.01, 2.98,
    0.81, 0.24, 0.57, 0.36, 1.34, 1.66, 0.02, -0.40, 1.52, -0.49, 0.54, 0.41, 0.05, -0.01, 0.59,
    -2.03, 0.51,
];

/// Outliers added to the simulated hospital indices: `(0-based index, multiple of sd)`.
pub const HOSPITAL_OUTLIERS: [(usize, f64); 3] = [(0, 4.0), (1, -5.0), (2, 6.0)];

/// Generative values behind the bundled simulated indices.
pub const HOSPITAL_BETA_GEN: f64 = 0.0;
pub const HOSPITAL_A_GEN: f64 = 0.722;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierData {
    pub y: Vec<f64>,
    pub v: Vec<f64>,
}

impl HierData {
    pub fn new(y: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if y.len() != v.len() {
            return Err(Error::InvalidData(format!(
                "y has {} values but V has {}",
                y.len(),
                v.len()
            )));
        }
        if y.is_empty() {
            return Err(Error::InvalidData("no observations".into()));
        }
        if let Some(i) = y.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidData(format!("y[{}] is not finite", i + 1)));
        }
        if let Some(i) = v.iter().position(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::InvalidData(format!("V[{}] must be positive", i + 1)));
        }
        Ok(Self { y, v })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn hospital_v() -> Vec<f64> {
        HOSPITAL_SD.iter().map(|s| s * s).collect()
    }

    /// The observed hospital indices with `V` equal to the squared SDs.
    pub fn hospital() -> Self {
        Self {
            y: HOSPITAL_Y.to_vec(),
            v: Self::hospital_v(),
        }
    }

    /// The bundled simulated indices on the same variances.
    pub fn hospital_sim() -> Self {
        Self {
            y: HOSPITAL_Y_SIM.to_vec(),
            v: Self::hospital_v(),
        }
    }

    /// The simulated indices with three outliers injected at rows 1-3.
    pub fn hospital_outliers() -> Self {
        let sim = Self::hospital_sim();
        let y = inject_outliers(&sim.y, &sim.v, &HOSPITAL_OUTLIERS).expect("valid outlier spec");
        Self { y, v: sim.v }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierPrior {
    pub beta_variance: f64,
    pub shrink_scale: f64,
}

impl Default for HierPrior {
    fn default() -> Self {
        Self {
            beta_variance: 1e5,
            shrink_scale: 1e5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HierState {
    pub mu: Vec<f64>,
    pub beta: f64,
    pub a: f64,
}

impl HierState {
    /// `mu = y`, `A = mean(V)`, `beta = mean(y)`.
    pub fn initial(data: &HierData) -> Self {
        let n = data.len() as f64;
        Self {
            mu: data.y.clone(),
            beta: data.y.iter().sum::<f64>() / n,
            a: data.v.iter().sum::<f64>() / n,
        }
    }
}

/// Shrinkage factor `V / (V + A)`.
#[inline]
pub fn shrinkage(v: f64, a: f64) -> f64 {
    v / (v + a)
}

/// Mean and variance of `mu_i` given everything else.
pub fn random_effect_conditional(y: f64, v_eff: f64, beta: f64, a: f64) -> (f64, f64) {
    let b = shrinkage(v_eff, a);
    ((1.0 - b) * y + b * beta, (1.0 - b) * v_eff)
}

/// Draw every `mu_i ~ N((1 - B_i) y_i + B_i beta, (1 - B_i) V~_i)`.
pub fn update_random_effects(
    state: &mut HierState,
    y: &[f64],
    v_eff: &[f64],
    rng: &mut RngStream,
) -> Result<()> {
    if !(state.a > 0.0) {
        return Err(invalid(format!("A must be positive, got {}", state.a)));
    }
    for i in 0..y.len() {
        let (m, var) = random_effect_conditional(y[i], v_eff[i], state.beta, state.a);
        state.mu[i] = dists::sample_normal(m, var, rng)?;
    }
    Ok(())
}

/// Mean and variance of `beta` given the random effects and `A`.
pub fn beta_conditional(mu: &[f64], a: f64, prior: &HierPrior) -> (f64, f64) {
    let n = mu.len() as f64;
    let mbar = mu.iter().sum::<f64>() / n;
    let prec = n / a + 1.0 / prior.beta_variance;
    ((n / a) * mbar / prec, 1.0 / prec)
}

pub fn update_beta(state: &HierState, prior: &HierPrior, rng: &mut RngStream) -> Result<f64> {
    let (m, v) = beta_conditional(&state.mu, state.a, prior);
    dists::sample_normal(m, v, rng)
}

/// `-2 log(c + A) - (n/2) log(2 pi A) - sum (mu_i - beta)^2 / (2A)`; `-inf` for `A <= 0`.
pub fn a_log_conditional(a: f64, state: &HierState, prior: &HierPrior) -> f64 {
    a_log_conditional_from(a, state.mu.len(), ss_about(&state.mu, state.beta), prior)
}

fn ss_about(mu: &[f64], beta: f64) -> f64 {
    mu.iter().map(|m| (m - beta) * (m - beta)).sum()
}

fn a_log_conditional_from(a: f64, n: usize, ss: f64, prior: &HierPrior) -> f64 {
    if !(a > 0.0) {
        return f64::NEG_INFINITY;
    }
    -2.0 * (prior.shrink_scale + a).ln()
        - 0.5 * n as f64 * (2.0 * std::f64::consts::PI * a).ln()
        - ss / (2.0 * a)
}

/// Log-normal random-walk Metropolis step for `A`.
pub fn update_a_mh(
    state: &HierState,
    prior: &HierPrior,
    scale: &AdaptiveScale,
    rng: &mut RngStream,
) -> (f64, bool) {
    let n = state.mu.len();
    let ss = ss_about(&state.mu, state.beta);
    log_scale_mh_step(state.a, |a| a_log_conditional_from(a, n, ss, prior), scale, rng)
}

/// Log-likelihood of the two-Gaussian mixture with the random effects
/// integrated out, one log-sum-exp per datum.
pub fn gaussian_mixture_loglik(beta: f64, theta: f64, a: f64, alpha: f64, data: &HierData) -> f64 {
    data.y
        .iter()
        .zip(&data.v)
        .map(|(&y, &v)| {
            let inflated = if theta > 0.0 {
                theta.ln() + logpdf_normal(y, beta, a + alpha * v)
            } else {
                f64::NEG_INFINITY
            };
            let plain = if theta < 1.0 {
                (-theta).ln_1p() + logpdf_normal(y, beta, a + v)
            } else {
                f64::NEG_INFINITY
            };
            log_add_exp(inflated, plain)
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureMle {
    pub beta: f64,
    pub theta: f64,
    pub a: f64,
    pub alpha: f64,
    pub loglik: f64,
}

/// Maps `(beta, logit theta, log A, log(alpha - 1))` to the natural scale.
pub fn mle_from_unconstrained(p: &[f64]) -> (f64, f64, f64, f64) {
    let theta = 1.0 / (1.0 + (-p[1]).exp());
    (p[0], theta, p[2].exp(), 1.0 + p[3].exp())
}

pub fn mle_to_unconstrained(beta: f64, theta: f64, a: f64, alpha: f64) -> [f64; 4] {
    [beta, (theta / (1.0 - theta)).ln(), a.ln(), (alpha - 1.0).ln()]
}

/// Starting points of the multi-start search, on the unconstrained scale.
pub fn mle_starts(data: &HierData) -> Vec<[f64; 4]> {
    let n = data.len() as f64;
    let mean = data.y.iter().sum::<f64>() / n;
    let mut sorted = data.y.clone();
    sorted.sort_by(f64::total_cmp);
    let median = 0.5 * (sorted[(sorted.len() - 1) / 2] + sorted[sorted.len() / 2]);
    let var = data.y.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    let vbar = data.v.iter().sum::<f64>() / n;
    let a0 = (var - vbar).max(0.1 * vbar).max(1e-3);
    let mut starts = Vec::new();
    for &beta in &[median, mean] {
        for &theta in &[0.05, 0.25] {
            for &alpha in &[4.0, 40.0] {
                for &a in &[a0, 0.2 * a0 + 0.01] {
                    starts.push(mle_to_unconstrained(beta, theta, a, alpha));
                }
            }
        }
    }
    starts
}

/// Joint maximum-likelihood estimate of `(beta, theta, A, alpha)` with
/// `alpha > 1`, best of sixteen Nelder-Mead runs.
pub fn gaussian_mixture_mle(data: &HierData) -> Result<MixtureMle> {
    if data.len() < 4 {
        return Err(invalid(format!(
            "the mixture MLE needs at least 4 observations, got {}",
            data.len()
        )));
    }
    let nll = |p: &[f64]| {
        let (b, t, a, al) = mle_from_unconstrained(p);
        -gaussian_mixture_loglik(b, t, a, al, data)
    };
    let mut best: Option<optim::Minimum> = None;
    let mut any_converged = false;
    for start in mle_starts(data) {
        let m = optim::minimize(&nll, &start, 0.5, 1e-13, 20_000);
        if !m.fx.is_finite() {
            continue;
        }
        any_converged |= m.converged;
        if best.as_ref().is_none_or(|b| m.fx < b.fx) {
            best = Some(m);
        }
    }
    let best = best.ok_or_else(|| Error::OptimizationFailure {
        starts: 16,
        best: [f64::NAN; 4],
        best_loglik: f64::NEG_INFINITY,
    })?;
    let (beta, theta, a, alpha) = mle_from_unconstrained(&best.x);
    if !any_converged {
        return Err(Error::OptimizationFailure {
            starts: 16,
            best: [beta, theta, a, alpha],
            best_loglik: -best.fx,
        });
    }
    Ok(MixtureMle {
        beta,
        theta,
        a,
        alpha,
        loglik: -best.fx,
    })
}

/// Mixture configuration for the Gaussian-mixture variant: the inflation is
/// fixed at its maximum-likelihood estimate.
pub fn gaussian_mixture_config(data: &HierData, k: f64, m: f64) -> Result<(MixtureConfig, MixtureMle)> {
    let mle = gaussian_mixture_mle(data)?;
    Ok((
        MixtureConfig::new(Variant::GaussianMixture, k, m).with_fixed_alpha(mle.alpha),
        mle,
    ))
}

/// Draw `mu_i ~ N(beta, A)` and then `y_i = mu_i + sqrt(V_i) e_i`.
pub fn simulate_hier(
    beta_gen: f64,
    a_gen: f64,
    v: &[f64],
    error_kind: ErrorKind,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(a_gen >= 0.0 && a_gen.is_finite()) {
        return Err(invalid(format!("A must be non-negative, got {a_gen}")));
    }
    let mut mu = Vec::with_capacity(v.len());
    let mut y = Vec::with_capacity(v.len());
    for &vi in v {
        let m = if a_gen == 0.0 {
            beta_gen
        } else {
            dists::sample_normal(beta_gen, a_gen, rng)?
        };
        mu.push(m);
        y.push(m + error_kind.sample(vi, rng)?);
    }
    Ok((mu, y))
}

/// Add `multiplier * sqrt(V_i)` to the listed (0-based) entries.
pub fn inject_outliers(y: &[f64], v: &[f64], spec: &[(usize, f64)]) -> Result<Vec<f64>> {
    let mut out = y.to_vec();
    for &(i, mult) in spec {
        if i >= y.len() {
            return Err(invalid(format!(
                "outlier index {} is out of range for {} observations",
                i + 1,
                y.len()
            )));
        }
        out[i] += mult * v[i].sqrt();
    }
    Ok(out)
}

/// Gibbs sampler: random effects, then `beta`, then a Metropolis step for `A`.
pub struct HierSampler<'a> {
    data: &'a HierData,
    prior: HierPrior,
    state: HierState,
    scales: [AdaptiveScale; 1],
    accepted: [bool; 1],
}

impl<'a> HierSampler<'a> {
    pub fn new(data: &'a HierData, target_acceptance: f64) -> Result<Self> {
        HierData::new(data.y.clone(), data.v.clone())?;
        Ok(Self {
            data,
            prior: HierPrior::default(),
            state: HierState::initial(data),
            scales: [AdaptiveScale::new(INITIAL_LOG_STEP, target_acceptance)],
            accepted: [false],
        })
    }

    pub fn state(&self) -> &HierState {
        &self.state
    }
}

impl HostSampler for HierSampler<'_> {
    fn variances(&self) -> &[f64] {
        &self.data.v
    }

    fn residuals(&self, out: &mut [f64]) {
        for ((o, &y), &m) in out.iter_mut().zip(&self.data.y).zip(&self.state.mu) {
            *o = y - m;
        }
    }

    fn update(&mut self, v_eff: &[f64], rng: &mut RngStream) -> Result<()> {
        update_random_effects(&mut self.state, &self.data.y, v_eff, rng)?;
        self.state.beta = update_beta(&self.state, &self.prior, rng)?;
        let (a, acc) = update_a_mh(&self.state, &self.prior, &self.scales[0], rng);
        self.state.a = a;
        self.accepted[0] = acc;
        Ok(())
    }

    fn monitored_names(&self) -> Vec<String> {
        vec!["beta".into(), "log_A".into()]
    }

    fn monitored(&self, out: &mut Vec<f64>) {
        out.push(self.state.beta);
        out.push(self.state.a.ln());
    }

    fn latent(&self) -> &[f64] {
        &self.state.mu
    }

    fn mh_names(&self) -> Vec<String> {
        vec!["A".into()]
    }

    fn scales_mut(&mut self) -> &mut [AdaptiveScale] {
        &mut self.scales
    }

    fn last_accepted(&self) -> &[bool] {
        &self.accepted
    }
}
