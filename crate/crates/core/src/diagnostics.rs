//! Convergence diagnostics and multi-chain posterior summaries.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// One row of a comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub parameter: String,
    pub mean: f64,
    pub monte_carlo_error: f64,
    pub bias: Option<f64>,
    pub mse: Option<f64>,
    pub mse_ratio: Option<f64>,
    pub interval_lo: f64,
    pub interval_hi: f64,
    pub interval_length: f64,
    /// Sum of per-chain effective sample sizes.
    pub ess: f64,
    pub cpu_seconds: Option<f64>,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample autocorrelations `rho(0..=max_lag)` about the sample mean, with the
/// `1/n` autocovariance normalization. A constant series yields `rho(0) = 1`
/// and zeros elsewhere.
pub fn autocorrelation(samples: &[f64], max_lag: usize) -> Vec<f64> {
    let n = samples.len();
    let max_lag = max_lag.min(n.saturating_sub(1));
    if n == 0 {
        return Vec::new();
    }
    let acov = autocovariance(samples);
    let c0 = acov[0];
    let mut rho = vec![0.0; max_lag + 1];
    rho[0] = 1.0;
    if c0 > 0.0 {
        for l in 1..=max_lag {
            rho[l] = acov[l] / c0;
        }
    }
    rho
}

/// All `n` autocovariances via a zero-padded FFT.
fn autocovariance(samples: &[f64]) -> Vec<f64> {
    let n = samples.len();
    let m = mean(samples);
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = samples
        .iter()
        .map(|&x| Complex::new(x - m, 0.0))
        .chain(std::iter::repeat(Complex::new(0.0, 0.0)))
        .take(size)
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    let scale = 1.0 / (size as f64 * n as f64);
    let mut out: Vec<f64> = buf[..n].iter().map(|c| c.re * scale).collect();
    // Exactly zero for a constant series, instead of rounding noise.
    if samples.iter().all(|&x| x == samples[0]) {
        out.iter_mut().for_each(|c| *c = 0.0);
    }
    out
}

/// Integrated autocorrelation time with the initial-positive-sequence
/// truncation: pairs `rho(2k) + rho(2k+1)` are summed while positive.
pub fn integrated_autocorrelation_time(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n < 2 {
        return 1.0;
    }
    let acov = autocovariance(samples);
    if !(acov[0] > 0.0) {
        return f64::INFINITY;
    }
    let rho = |l: usize| if l < n { acov[l] / acov[0] } else { 0.0 };
    let mut sum = 0.0;
    let mut k = 0;
    while 2 * k < n {
        let pair = rho(2 * k) + rho(2 * k + 1);
        if pair <= 0.0 {
            break;
        }
        sum += pair;
        k += 1;
    }
    2.0 * sum - 1.0
}

/// `n / tau` with `tau` from [`integrated_autocorrelation_time`]; zero for a
/// constant series, and at most `n log10(n)` for antithetic chains.
pub fn effective_sample_size(samples: &[f64]) -> f64 {
    let n = samples.len();
    if n == 0 {
        return 0.0;
    }
    let tau = integrated_autocorrelation_time(samples);
    if !tau.is_finite() {
        return 0.0;
    }
    let nf = n as f64;
    let cap = nf * nf.log10().max(1.0);
    // Strongly antithetic chains can push the truncated sum below zero.
    if tau <= 0.0 {
        cap
    } else {
        (nf / tau).min(cap)
    }
}

/// Quantile by linear interpolation of order statistics (type 7).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(samples: &[f64], p: f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    quantile_sorted(&s, p)
}

/// Pool per-chain draws of one parameter into a summary row.
///
/// The estimate is the mean of chain means and its Monte-Carlo error the
/// standard deviation of chain means (for a single chain, `sd / sqrt(ESS)`);
/// the 95% interval comes from the pooled draws.
pub fn summarize(
    parameter: &str,
    per_chain: &[&[f64]],
    generative: Option<f64>,
    reference_mse: Option<f64>,
    elapsed: Option<f64>,
) -> Result<SummaryRow> {
    if per_chain.is_empty() || per_chain.iter().any(|c| c.is_empty()) {
        return Err(invalid("every chain needs at least one draw"));
    }
    let means: Vec<f64> = per_chain.iter().map(|c| mean(c)).collect();
    let k = means.len() as f64;
    let grand = mean(&means);
    let mc = if means.len() > 1 {
        (means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (k - 1.0)).sqrt()
    } else {
        let c = per_chain[0];
        let var = c.iter().map(|x| (x - grand).powi(2)).sum::<f64>() / c.len() as f64;
        (var / effective_sample_size(c).max(1.0)).sqrt()
    };
    let mut pooled: Vec<f64> = per_chain.iter().flat_map(|c| c.iter().copied()).collect();
    pooled.sort_by(f64::total_cmp);
    let lo = quantile_sorted(&pooled, 0.025);
    let hi = quantile_sorted(&pooled, 0.975);
    let bias = generative.map(|g| (grand - g).abs());
    let mse = bias.map(|b| b * b + mc * mc);
    let mse_ratio = match (reference_mse, mse) {
        // Own MSE over the reference model's, so values above 1 favour the reference.
        (Some(r), Some(m)) => Some(m / r),
        _ => None,
    };
    Ok(SummaryRow {
        parameter: parameter.to_string(),
        mean: grand,
        monte_carlo_error: mc,
        bias,
        mse,
        mse_ratio,
        interval_lo: lo,
        interval_hi: hi,
        interval_length: hi - lo,
        ess: per_chain.iter().map(|c| effective_sample_size(c)).sum(),
        cpu_seconds: elapsed,
    })
}

/// Silverman's rule-of-thumb bandwidth.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let m = mean(samples);
    let sd = (samples.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&s, 0.75) - quantile_sorted(&s, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * n.powf(-0.2)
}

/// Gaussian kernel density estimate on 512 points spanning the sample range
/// plus three bandwidths on either side. Draws are linearly binned onto the
/// grid before smoothing.
pub fn kde(samples: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    const POINTS: usize = 512;
    if samples.is_empty() || samples.iter().any(|x| !x.is_finite()) {
        return Err(invalid("density estimation needs finite samples"));
    }
    let h = silverman_bandwidth(samples);
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(h > 0.0) || hi == lo {
        return Ok((vec![lo], vec![f64::INFINITY]));
    }
    let (a, b) = (lo - 3.0 * h, hi + 3.0 * h);
    let step = (b - a) / (POINTS - 1) as f64;
    let grid: Vec<f64> = (0..POINTS).map(|j| a + step * j as f64).collect();
    let mut weights = vec![0.0; POINTS];
    for &x in samples {
        let pos = (x - a) / step;
        let j = (pos.floor() as usize).min(POINTS - 2);
        let f = pos - j as f64;
        weights[j] += 1.0 - f;
        weights[j + 1] += f;
    }
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let kernel: Vec<f64> = (0..POINTS)
        .map(|d| (-0.5 * (d as f64 * step / h).powi(2)).exp())
        .collect();
    let density = (0..POINTS)
        .map(|i| {
            norm * weights
                .iter()
                .enumerate()
                .filter(|(_, &w)| w > 0.0)
                .map(|(j, &w)| w * kernel[i.abs_diff(j)])
                .sum::<f64>()
        })
        .collect();
    Ok((grid, density))
}

/// Location of the highest point of the kernel density estimate.
pub fn density_mode(samples: &[f64]) -> Result<f64> {
    let (grid, dens) = kde(samples)?;
    let j = (0..grid.len()).fold(0, |best, j| if dens[j] > dens[best] { j } else { best });
    Ok(grid[j])
}

/// Histogram total-variation distance between two samples on `bins` equal
/// cells over their joint range.
pub fn tv_distance_samples(a: &[f64], b: &[f64], bins: usize) -> f64 {
    let lo = a.iter().chain(b).cloned().fold(f64::INFINITY, f64::min);
    let hi = a.iter().chain(b).cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return 0.0;
    }
    let bins = bins.max(1);
    let hist = |xs: &[f64]| {
        let mut h = vec![0.0; bins];
        for &x in xs {
            let j = (((x - lo) / (hi - lo)) * bins as f64) as usize;
            h[j.min(bins - 1)] += 1.0 / xs.len() as f64;
        }
        h
    };
    let (ha, hb) = (hist(a), hist(b));
    0.5 * ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum::<f64>()
}
