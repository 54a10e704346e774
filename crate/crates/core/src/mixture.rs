//! Model-agnostic machinery of the Gaussian / Student's-t mixture error.
//!
//! The mixture error is written as a scale mixture of normals:
//!
//! ```text
//! eps_i | z_i, alpha_i ~ N(0, alpha_i^{z_i} V_i)
//! z_i | theta          ~ Bernoulli(theta),   theta ~ Beta(k m, k (1 - m))
//! alpha_i | nu         ~ InvGamma(nu/2, nu/2), nu  ~ Uniform(nu_lo, nu_hi)
//! ```
//!
//! A host sampler replaces `V_i` by `alpha_i^{z_i} V_i` in its own conditionals
//! and calls [`OutlierLatentState::sweep`] once per iteration to refresh
//! `z`, `theta`, `alpha` and `nu`, in that order.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::dists::{self, logpdf_normal, RngStream};
use crate::engine::AdaptiveScale;
use crate::error::{invalid, Result};

/// Initial degrees of freedom for chains that sample `nu`.
pub const NU_INIT: f64 = 4.0;

/// Initial outlier probability for every chain.
pub const THETA_INIT: f64 = 0.01;

/// Which measurement-error model a chain targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Plain Gaussian error; `z` fixed at 0.
    #[serde(rename = "gaussian")]
    Gaussian,
    /// Student's-t error for every datum; `z` fixed at 1.
    #[serde(rename = "t")]
    StudentT,
    /// Two-Gaussian mixture with a fixed variance inflation.
    #[serde(rename = "nn")]
    GaussianMixture,
    /// Gaussian / Student's-t mixture with latent outlier indicators.
    #[serde(rename = "nt")]
    ProposedMixture,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Gaussian,
        Variant::StudentT,
        Variant::GaussianMixture,
        Variant::ProposedMixture,
    ];

    /// Short code used on the command line and in file names.
    pub fn code(self) -> &'static str {
        match self {
            Variant::Gaussian => "gaussian",
            Variant::StudentT => "t",
            Variant::GaussianMixture => "nn",
            Variant::ProposedMixture => "nt",
        }
    }

    /// Row label used in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Gaussian => "N",
            Variant::StudentT => "t",
            Variant::GaussianMixture => "N+N",
            Variant::ProposedMixture => "N+t",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for Variant {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" | "n" | "N" => Ok(Variant::Gaussian),
            "t" => Ok(Variant::StudentT),
            "nn" => Ok(Variant::GaussianMixture),
            "nt" => Ok(Variant::ProposedMixture),
            other => Err(invalid(format!(
                "unknown variant '{other}' (expected gaussian, t, nn or nt)"
            ))),
        }
    }
}

/// Prior and gating configuration of the mixture error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureConfig {
    pub k: f64,
    pub m: f64,
    pub nu_lo: f64,
    pub nu_hi: f64,
    pub variant: Variant,
    /// Inflation shared by every datum; required for the Gaussian mixture.
    pub fixed_alpha: Option<f64>,
    /// Holds `theta` constant instead of sampling it.
    #[serde(default)]
    pub fixed_theta: Option<f64>,
    /// Holds `nu` constant instead of sampling it.
    #[serde(default)]
    pub fixed_nu: Option<f64>,
}

impl MixtureConfig {
    pub fn new(variant: Variant, k: f64, m: f64) -> Self {
        Self {
            k,
            m,
            nu_lo: 1.0,
            nu_hi: 40.0,
            variant,
            fixed_alpha: None,
            fixed_theta: None,
            fixed_nu: None,
        }
    }

    /// Beta(1, 1), i.e. a uniform prior on `theta`.
    pub fn uniform_prior(variant: Variant) -> Self {
        Self::new(variant, 2.0, 0.5)
    }

    pub fn with_fixed_alpha(mut self, alpha: f64) -> Self {
        self.fixed_alpha = Some(alpha);
        self
    }

    pub fn with_fixed_theta(mut self, theta: f64) -> Self {
        self.fixed_theta = Some(theta);
        self
    }

    pub fn with_fixed_nu(mut self, nu: f64) -> Self {
        self.fixed_nu = Some(nu);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.k.is_finite() && self.k > 0.0) {
            return Err(invalid(format!("k must be positive, got {}", self.k)));
        }
        if !(self.m > 0.0 && self.m < 1.0) {
            return Err(invalid(format!("m must lie in (0, 1), got {}", self.m)));
        }
        if !(self.nu_lo >= 0.0 && self.nu_lo < self.nu_hi && self.nu_hi.is_finite()) {
            return Err(invalid(format!(
                "nu bounds must satisfy 0 <= nu_lo < nu_hi, got ({}, {})",
                self.nu_lo, self.nu_hi
            )));
        }
        match (self.variant, self.fixed_alpha) {
            (Variant::GaussianMixture, None) => {
                return Err(invalid("the Gaussian mixture needs a fixed inflation alpha"))
            }
            (_, Some(a)) if !(a.is_finite() && a > 0.0) => {
                return Err(invalid(format!("fixed alpha must be positive, got {a}")))
            }
            _ => {}
        }
        if let Some(t) = self.fixed_theta {
            if !(0.0..=1.0).contains(&t) {
                return Err(invalid(format!("fixed theta must lie in [0, 1], got {t}")));
            }
        }
        if let Some(nu) = self.fixed_nu {
            if !(nu.is_finite() && nu > 0.0) {
                return Err(invalid(format!("fixed nu must be positive, got {nu}")));
            }
        }
        Ok(())
    }

    pub fn updates_indicators(&self) -> bool {
        matches!(
            self.variant,
            Variant::GaussianMixture | Variant::ProposedMixture
        )
    }

    pub fn updates_theta(&self) -> bool {
        self.updates_indicators() && self.fixed_theta.is_none()
    }

    pub fn updates_alpha(&self) -> bool {
        matches!(self.variant, Variant::StudentT | Variant::ProposedMixture)
            && self.fixed_alpha.is_none()
    }

    pub fn updates_nu(&self) -> bool {
        self.updates_alpha() && self.fixed_nu.is_none()
    }
}

/// Per-datum indicators and inflations plus the global `theta` and `nu`.
#[derive(Clone, Debug, PartialEq)]
pub struct OutlierLatentState {
    pub z: Vec<bool>,
    pub alpha: Vec<f64>,
    pub theta: f64,
    pub nu: f64,
}

impl OutlierLatentState {
    /// Starting values: `z = 0` (`1` for Student's-t), `alpha = 1` (or the
    /// fixed inflation) and `theta = 0.01`.
    pub fn initial(n: usize, config: &MixtureConfig) -> Self {
        let z = vec![config.variant == Variant::StudentT; n];
        let alpha = vec![config.fixed_alpha.unwrap_or(1.0); n];
        Self {
            z,
            alpha,
            theta: config.fixed_theta.unwrap_or(THETA_INIT),
            nu: config.fixed_nu.unwrap_or(NU_INIT),
        }
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// `alpha_i^{z_i}`, the factor applied to datum `i`'s variance.
    #[inline]
    pub fn inflation(&self, i: usize) -> f64 {
        if self.z[i] {
            self.alpha[i]
        } else {
            1.0
        }
    }

    /// Effective variances `alpha_i^{z_i} V_i`.
    pub fn effective_variances(&self, v: &[f64]) -> Vec<f64> {
        v.iter().enumerate().map(|(i, &vi)| self.inflation(i) * vi).collect()
    }

    /// One pass of the z, theta, alpha and nu updates, gated by the variant.
    ///
    /// `residuals[i]` is datum `i` minus the host model's current mean for it.
    /// Returns whether the `nu` proposal was accepted, when `nu` was updated.
    pub fn sweep(
        &mut self,
        config: &MixtureConfig,
        residuals: &[f64],
        v: &[f64],
        nu_scale: &AdaptiveScale,
        rng: &mut RngStream,
    ) -> Result<Option<bool>> {
        let n = self.len();
        debug_assert_eq!(residuals.len(), n);
        if config.updates_indicators() {
            for i in 0..n {
                self.z[i] = update_indicator(residuals[i], v[i], self.alpha[i], self.theta, rng)?;
            }
        }
        if config.updates_theta() {
            self.theta = update_theta(&self.z, config.k, config.m, rng)?;
        }
        if !config.updates_alpha() {
            return Ok(None);
        }
        for i in 0..n {
            self.alpha[i] = update_alpha(residuals[i], v[i], self.z[i], self.nu, rng)?;
        }
        if !config.updates_nu() {
            return Ok(None);
        }
        let (nu, accepted) =
            update_nu_mh(&self.alpha, self.nu, nu_scale, config.nu_lo, config.nu_hi, rng);
        self.nu = nu;
        Ok(Some(accepted))
    }
}

/// Posterior probability that datum `i` uses the inflated (t) component.
///
/// Evaluated as a log-odds so neither density needs to be representable.
pub fn indicator_probability(y_resid: f64, v: f64, alpha_i: f64, theta: f64) -> Result<f64> {
    let d = -indicator_log_odds(y_resid, v, alpha_i, theta)?;
    // p = 1 / (1 + exp(d)), evaluated without overflow.
    Ok(if d > 0.0 {
        let e = (-d).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + d.exp())
    })
}

/// `log(p / (1 - p))` for the outlier indicator; infinite when `theta` is 0 or 1.
pub fn indicator_log_odds(y_resid: f64, v: f64, alpha_i: f64, theta: f64) -> Result<f64> {
    if !(v.is_finite() && v > 0.0) {
        return Err(invalid(format!("measurement variance must be positive, got {v}")));
    }
    if !(alpha_i.is_finite() && alpha_i > 0.0) {
        return Err(invalid(format!("alpha must be positive, got {alpha_i}")));
    }
    if theta <= 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    if theta >= 1.0 {
        return Ok(f64::INFINITY);
    }
    let log_t = theta.ln() + logpdf_normal(y_resid, 0.0, alpha_i * v);
    let log_n = (-theta).ln_1p() + logpdf_normal(y_resid, 0.0, v);
    Ok(log_t - log_n)
}

pub fn update_indicator(
    y_resid: f64,
    v: f64,
    alpha_i: f64,
    theta: f64,
    rng: &mut RngStream,
) -> Result<bool> {
    let p = indicator_probability(y_resid, v, alpha_i, theta)?;
    Ok(rng.uniform() < p)
}

/// Draw `theta | z ~ Beta(k m + sum z, k (1 - m) + n - sum z)`.
pub fn update_theta(z: &[bool], k: f64, m: f64, rng: &mut RngStream) -> Result<f64> {
    let hits = z.iter().filter(|&&zi| zi).count() as f64;
    let n = z.len() as f64;
    dists::sample_beta(k * m + hits, k * (1.0 - m) + n - hits, rng)
}

/// Draw `alpha_i ~ InvGamma((nu + z_i)/2, (nu + z_i r_i^2 / V_i)/2)`.
pub fn update_alpha(y_resid: f64, v: f64, z_i: bool, nu: f64, rng: &mut RngStream) -> Result<f64> {
    if !(v.is_finite() && v > 0.0) {
        return Err(invalid(format!("measurement variance must be positive, got {v}")));
    }
    let (shape, scale) = if z_i {
        (0.5 * (nu + 1.0), 0.5 * (nu + y_resid * y_resid / v))
    } else {
        (0.5 * nu, 0.5 * nu)
    };
    dists::sample_inverse_gamma(shape, scale, rng)
}

/// `sum_i (log alpha_i + 1/alpha_i)`, the sufficient statistic for `nu`.
pub fn alpha_statistic(alpha: &[f64]) -> f64 {
    alpha.iter().map(|&a| a.ln() + 1.0 / a).sum()
}

/// Unnormalized log conditional of `nu` given `n` inflations summarized by
/// [`alpha_statistic`]; `-inf` outside `(lo, hi)`.
pub fn nu_log_conditional_from_statistic(n: usize, stat: f64, nu: f64, lo: f64, hi: f64) -> f64 {
    if !(nu > lo && nu < hi) {
        return f64::NEG_INFINITY;
    }
    let half = 0.5 * nu;
    let n = n as f64;
    n * half * half.ln() - n * ln_gamma(half) - half * stat
}

/// Unnormalized log conditional density of `nu` given the inflations.
pub fn nu_log_conditional(alpha: &[f64], nu: f64, lo: f64, hi: f64) -> f64 {
    nu_log_conditional_from_statistic(alpha.len(), alpha_statistic(alpha), nu, lo, hi)
}

/// Random walk on `log nu`; returns the new value and whether it moved.
pub fn update_nu_mh(
    alpha: &[f64],
    nu_current: f64,
    scale: &AdaptiveScale,
    lo: f64,
    hi: f64,
    rng: &mut RngStream,
) -> (f64, bool) {
    let proposal = (nu_current.ln() + scale.current * rng.standard_normal()).exp();
    let u = rng.uniform();
    if !(proposal > lo && proposal < hi) {
        return (nu_current, false);
    }
    let n = alpha.len();
    let stat = alpha_statistic(alpha);
    let log_ratio = nu_log_conditional_from_statistic(n, stat, proposal, lo, hi)
        - nu_log_conditional_from_statistic(n, stat, nu_current, lo, hi)
        + proposal.ln()
        - nu_current.ln();
    if u.ln() < log_ratio {
        (proposal, true)
    } else {
        (nu_current, false)
    }
}

/// Huber's loss: quadratic inside `|x| < k`, linear outside.
pub fn huber_loss(x: f64, k: f64) -> f64 {
    let ax = x.abs();
    if ax < k {
        0.5 * x * x
    } else {
        k * ax - 0.5 * k * k
    }
}

/// Loss implied by the Gaussian / t_nu mixture: quadratic inside `|x| < k`,
/// the t_nu negative log density outside, shifted to be continuous at `k`.
pub fn mixture_loss(x: f64, k: f64, nu: f64) -> f64 {
    if x.abs() < k {
        return 0.5 * x * x;
    }
    let c = 0.5 * (nu + 1.0);
    let g = c * (k * k / nu).ln_1p() - 0.5 * k * k;
    c * (x * x / nu).ln_1p() - g
}
