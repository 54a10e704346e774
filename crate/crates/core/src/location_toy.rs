//! Location model `y_i = mu + eps_i` with unit scale and a flat prior on `mu`.
//!
//! Its marginal posteriors are available in closed form up to a constant, which
//! makes it the analytic oracle for the samplers: Gaussian errors give
//! `N(ybar, 1/n)`, t_4 errors give a product of shifted t_4 densities, and the
//! Gaussian / t_4 mixture gives a product of two-component mixtures.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dists::{self, logpdf_normal, logpdf_student_t, RngStream};
use crate::engine::{AdaptiveScale, HostSampler};
use crate::error::{invalid, Result};
use crate::mixture::{MixtureConfig, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyData {
    pub y: Vec<f64>,
    /// Common error scale; the variance of every datum is `sigma^2`.
    pub sigma: f64,
    pub nu: f64,
    pub theta: f64,
}

impl ToyData {
    /// Unit scale, `nu = 4` and `theta = 0.1`.
    pub fn new(y: Vec<f64>) -> Result<Self> {
        if y.is_empty() {
            return Err(invalid("the toy model needs at least one observation"));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(invalid("toy observations must be finite"));
        }
        Ok(Self {
            y,
            sigma: 1.0,
            nu: 4.0,
            theta: 0.1,
        })
    }

    /// `n` standard normal draws with the last one replaced by `outlier`.
    pub fn simulate(n: usize, outlier: Option<f64>, rng: &mut RngStream) -> Result<Self> {
        let mut y: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
        if let (Some(o), Some(last)) = (outlier, y.last_mut()) {
            *last = o;
        }
        Self::new(y)
    }

    pub fn mean(&self) -> f64 {
        self.y.iter().sum::<f64>() / self.y.len() as f64
    }

    /// Sampler configuration matching this model: `nu` fixed for the t error,
    /// `theta` and `nu` fixed for the mixture.
    pub fn mixture_config(&self, variant: Variant) -> Result<MixtureConfig> {
        let base = MixtureConfig::uniform_prior(variant);
        let cfg = match variant {
            Variant::Gaussian => base,
            Variant::StudentT => base.with_fixed_nu(self.nu),
            Variant::ProposedMixture => base.with_fixed_theta(self.theta).with_fixed_nu(self.nu),
            Variant::GaussianMixture => {
                return Err(invalid("the toy model has no Gaussian-mixture variant"))
            }
        };
        Ok(cfg)
    }
}

/// Posterior `N(ybar, sigma^2 / n)` under Gaussian errors and a flat prior.
pub fn gaussian_posterior(data: &ToyData) -> (f64, f64) {
    (data.mean(), data.sigma * data.sigma / data.y.len() as f64)
}

/// Unnormalized log posterior of `mu` under t_nu errors.
pub fn t4_marginal_logdensity(mu: f64, data: &ToyData) -> f64 {
    let nu = data.nu;
    let s2 = data.sigma * data.sigma;
    data.y
        .iter()
        .map(|&y| -0.5 * (nu + 1.0) * ((y - mu) * (y - mu) / (nu * s2)).ln_1p())
        .sum()
}

/// Unnormalized log posterior of `mu` under the mixture error.
///
/// With `exact_constants = false` each component keeps only its kernel,
/// `theta (1 + r^2/nu)^{-(nu+1)/2} + (1 - theta) exp(-r^2/2)`. With `true` the
/// full densities are mixed, which is the model the sampler targets.
pub fn mixture_marginal_logdensity(mu: f64, data: &ToyData, exact_constants: bool) -> f64 {
    let (theta, nu, s) = (data.theta, data.nu, data.sigma);
    data.y
        .iter()
        .map(|&y| {
            let r = (y - mu) / s;
            let (lt, ln) = if exact_constants {
                (
                    logpdf_student_t(r, 0.0, 1.0, nu),
                    logpdf_normal(r, 0.0, 1.0),
                )
            } else {
                (-0.5 * (nu + 1.0) * (r * r / nu).ln_1p(), -0.5 * r * r)
            };
            let a = if theta > 0.0 { theta.ln() + lt } else { f64::NEG_INFINITY };
            let b = if theta < 1.0 { (-theta).ln_1p() + ln } else { f64::NEG_INFINITY };
            dists::log_add_exp(a, b)
        })
        .sum()
}

/// A density tabulated on a uniform grid and normalized by the trapezoid rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityTable {
    pub mu: Vec<f64>,
    pub density: Vec<f64>,
}

/// Tabulate `exp(logdensity)` on `points` equally spaced nodes of `[lo, hi]`
/// and normalize it to integrate to one.
pub fn grid_posterior(
    logdensity: impl Fn(f64) -> f64,
    lo: f64,
    hi: f64,
    points: usize,
) -> Result<DensityTable> {
    if !(lo < hi) || points < 2 {
        return Err(invalid(format!(
            "grid needs lo < hi and at least two points, got ({lo}, {hi}, {points})"
        )));
    }
    let h = (hi - lo) / (points - 1) as f64;
    let mu: Vec<f64> = (0..points).map(|j| lo + h * j as f64).collect();
    let logs: Vec<f64> = mu.iter().map(|&m| logdensity(m)).collect();
    let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(invalid("log density is not finite anywhere on the grid"));
    }
    let mut density: Vec<f64> = logs.iter().map(|&l| (l - top).exp()).collect();
    let z = trapezoid(&density, h);
    density.iter_mut().for_each(|d| *d /= z);
    Ok(DensityTable { mu, density })
}

/// Default toy grid: 4096 points over `ybar +- 10` standard errors.
pub fn default_grid(data: &ToyData) -> (f64, f64, usize) {
    let (m, v) = gaussian_posterior(data);
    let w = 10.0 * v.sqrt();
    (m - w, m + w, 4096)
}

fn trapezoid(f: &[f64], h: f64) -> f64 {
    let n = f.len();
    h * (f.iter().sum::<f64>() - 0.5 * (f[0] + f[n - 1]))
}

impl DensityTable {
    fn step(&self) -> f64 {
        self.mu[1] - self.mu[0]
    }

    pub fn integral(&self) -> f64 {
        trapezoid(&self.density, self.step())
    }

    pub fn mean(&self) -> f64 {
        let f: Vec<f64> = self.mu.iter().zip(&self.density).map(|(m, d)| m * d).collect();
        trapezoid(&f, self.step())
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        let f: Vec<f64> = self
            .mu
            .iter()
            .zip(&self.density)
            .map(|(x, d)| (x - m) * (x - m) * d)
            .collect();
        trapezoid(&f, self.step())
    }

    pub fn mode(&self) -> f64 {
        let j = self
            .density
            .iter()
            .enumerate()
            .fold(0, |best, (j, &d)| if d > self.density[best] { j } else { best });
        self.mu[j]
    }

    /// Probability of `[mu[a], mu[b]]` by the trapezoid rule.
    fn segment_mass(&self, a: usize, b: usize) -> f64 {
        trapezoid(&self.density[a..=b], self.step())
    }

    /// Total-variation distance between the table and the empirical law of
    /// `samples`, both binned on `bins` equal cells spanning the grid.
    /// Samples outside the grid count fully toward the distance.
    pub fn tv_distance(&self, samples: &[f64], bins: usize) -> f64 {
        let n = self.mu.len();
        let bins = bins.clamp(1, n - 1);
        let edges: Vec<usize> = (0..=bins).map(|b| b * (n - 1) / bins).collect();
        let mut counts = vec![0usize; bins];
        let mut outside = 0usize;
        for &x in samples {
            let pos = (x - self.mu[0]) / self.step();
            if !(pos >= 0.0 && pos <= (n - 1) as f64) {
                outside += 1;
                continue;
            }
            let node = pos as usize;
            let b = edges.partition_point(|&e| e <= node).saturating_sub(1).min(bins - 1);
            counts[b] += 1;
        }
        let total = samples.len() as f64;
        let mut tv = outside as f64 / total;
        let mut grid_mass = 0.0;
        for b in 0..bins {
            let p = self.segment_mass(edges[b], edges[b + 1]);
            grid_mass += p;
            tv += (counts[b] as f64 / total - p).abs();
        }
        tv += (1.0 - grid_mass).max(0.0);
        0.5 * tv
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["mu", "density"])?;
        for (m, d) in self.mu.iter().zip(&self.density) {
            wtr.write_record([format!("{m}"), format!("{d}")])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Gibbs sampler for the location model under a flat prior on `mu`.
pub struct ToySampler<'a> {
    data: &'a ToyData,
    v: Vec<f64>,
    mu: f64,
    mu_vec: Vec<f64>,
}

impl<'a> ToySampler<'a> {
    pub fn new(data: &'a ToyData) -> Result<Self> {
        if !(data.sigma.is_finite() && data.sigma > 0.0) {
            return Err(invalid("toy scale must be positive"));
        }
        let mu = data.mean();
        Ok(Self {
            data,
            v: vec![data.sigma * data.sigma; data.y.len()],
            mu,
            mu_vec: vec![mu; data.y.len()],
        })
    }
}

impl HostSampler for ToySampler<'_> {
    fn variances(&self) -> &[f64] {
        &self.v
    }

    fn residuals(&self, out: &mut [f64]) {
        for (o, &y) in out.iter_mut().zip(&self.data.y) {
            *o = y - self.mu;
        }
    }

    fn update(&mut self, v_eff: &[f64], rng: &mut RngStream) -> Result<()> {
        let (mut prec, mut wsum) = (0.0, 0.0);
        for (&y, &v) in self.data.y.iter().zip(v_eff) {
            prec += 1.0 / v;
            wsum += y / v;
        }
        self.mu = dists::sample_normal(wsum / prec, 1.0 / prec, rng)?;
        self.mu_vec.fill(self.mu);
        Ok(())
    }

    fn monitored_names(&self) -> Vec<String> {
        vec!["mu".into()]
    }

    fn monitored(&self, out: &mut Vec<f64>) {
        out.push(self.mu);
    }

    fn latent(&self) -> &[f64] {
        &self.mu_vec
    }

    fn mh_names(&self) -> Vec<String> {
        Vec::new()
    }

    fn scales_mut(&mut self) -> &mut [AdaptiveScale] {
        &mut []
    }

    fn last_accepted(&self) -> &[bool] {
        &[]
    }
}
