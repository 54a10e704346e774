//! Independent oracles shared by the integration tests and the acceptance
//! harness: dense Gaussian algebra with nalgebra, direct log densities from
//! statrs, and simple quadrature.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{Continuous, Normal};
use statrs::function::gamma::ln_gamma;

use rmix_core::dists::RngStream;
use rmix_core::hier::{self, HierPrior, HierState};
use rmix_core::ou::{self, OuPrior, OuState, TimeSeries};

pub fn rel_err(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1e-300)
}

/// Mean and variance of coordinate `i` of `N(mean, cov)` given every other
/// coordinate at `x`.
pub fn condition_one(mean: &DVector<f64>, cov: &DMatrix<f64>, x: &DVector<f64>, i: usize) -> (f64, f64) {
    let n = mean.len();
    let rest: Vec<usize> = (0..n).filter(|&j| j != i).collect();
    let s_rr = DMatrix::from_fn(n - 1, n - 1, |a, b| cov[(rest[a], rest[b])]);
    let s_ir = DVector::from_fn(n - 1, |a, _| cov[(i, rest[a])]);
    let d = DVector::from_fn(n - 1, |a, _| x[rest[a]] - mean[rest[a]]);
    let chol = s_rr.cholesky().expect("positive definite");
    let w = chol.solve(&s_ir);
    (mean[i] + w.dot(&d), cov[(i, i)] - w.dot(&s_ir))
}

pub fn mvn_logpdf(x: &DVector<f64>, mean: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
    let n = x.len() as f64;
    let chol = cov.clone().cholesky().expect("positive definite");
    let d = x - mean;
    let sol = chol.solve(&d);
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + logdet + d.dot(&sol))
}

/// Inverse-gamma log density written out directly, so it stays finite far
/// into the tails where a product of densities would underflow.
pub fn ig_logpdf(x: f64, shape: f64, scale: f64) -> f64 {
    shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
}

/// Stationary O-U covariance `tau sigma^2 / 2 * exp(-|t_i - t_j| / tau)`.
pub fn ou_cov(t: &[f64], sigma2: f64, tau: f64) -> DMatrix<f64> {
    let n = t.len();
    DMatrix::from_fn(n, n, |i, j| 0.5 * tau * sigma2 * (-(t[i] - t[j]).abs() / tau).exp())
}

/// Irregular times with gaps comparable to `scale`.
pub fn irregular_times(n: usize, scale: f64, rng: &mut RngStream) -> Vec<f64> {
    let mut t = vec![0.0];
    for _ in 1..n {
        let last = *t.last().unwrap();
        t.push(last + scale * (0.2 + 1.6 * rng.uniform()));
    }
    t
}

/// Largest relative error of the hierarchical conditionals against dense
/// Gaussian conditioning and direct log densities on a random instance.
pub fn hier_conditional_error(n: usize, seed: u64) -> f64 {
    let mut rng = RngStream::new(seed, 0);
    let y: Vec<f64> = (0..n).map(|_| 2.0 * rng.standard_normal()).collect();
    let v: Vec<f64> = (0..n).map(|_| 0.3 + 2.0 * rng.uniform()).collect();
    let mu: Vec<f64> = (0..n).map(|_| rng.standard_normal()).collect();
    let beta = 0.4 * rng.standard_normal();
    let a = 0.5 + rng.uniform();
    let prior = HierPrior::default();
    let mut worst = 0.0f64;

    // mu_i | y_i, beta, A from the joint Gaussian of (mu_i, y_i).
    for i in 0..n {
        let mean = DVector::from_vec(vec![beta, beta]);
        let cov = DMatrix::from_row_slice(2, 2, &[a, a, a, a + v[i]]);
        let x = DVector::from_vec(vec![0.0, y[i]]);
        let (m, s) = condition_one(&mean, &cov, &x, 0);
        let (gm, gs) = hier::random_effect_conditional(y[i], v[i], beta, a);
        worst = worst.max(rel_err(gm, m)).max(rel_err(gs, s));
    }

    // beta | mu, A from the joint Gaussian of (beta, mu).
    let b0 = prior.beta_variance;
    let mut cov = DMatrix::from_element(n + 1, n + 1, b0);
    for i in 1..=n {
        cov[(i, i)] += a;
    }
    let mean = DVector::zeros(n + 1);
    let mut x = DVector::zeros(n + 1);
    for i in 0..n {
        x[i + 1] = mu[i];
    }
    let (m, s) = condition_one(&mean, &cov, &x, 0);
    let (gm, gs) = hier::beta_conditional(&mu, a, &prior);
    worst = worst.max(rel_err(gm, m)).max(rel_err(gs, s));

    // log p(A | mu, beta) differences from the normal densities and the prior.
    let state = HierState { mu: mu.clone(), beta, a };
    let joint = |a: f64| {
        let nd = Normal::new(beta, a.sqrt()).unwrap();
        mu.iter().map(|&m| nd.ln_pdf(m)).sum::<f64>() - 2.0 * (prior.shrink_scale + a).ln()
    };
    for &(a1, a2) in &[(0.3, 1.7), (a, 4.0 * a), (0.05, 9.0)] {
        let got = hier::a_log_conditional(a1, &state, &prior) - hier::a_log_conditional(a2, &state, &prior);
        worst = worst.max(rel_err(got, joint(a1) - joint(a2)));
    }
    worst
}

/// A random O-U instance: series, state and inflated variances.
pub fn ou_instance(n: usize, seed: u64) -> (TimeSeries, OuState, Vec<f64>) {
    let mut rng = RngStream::new(seed, 0);
    let tau = 1.5 + rng.uniform();
    let t = irregular_times(n, tau, &mut rng);
    let sigma2 = 0.5 + rng.uniform();
    let mu = rng.standard_normal();
    let (curve, y) = ou::ou_simulate(&t, mu, sigma2, tau, &vec![0.1; n], rmix_core::dists::ErrorKind::Gaussian, &mut rng).unwrap();
    let v: Vec<f64> = (0..n).map(|_| 0.05 + 0.2 * rng.uniform()).collect();
    let v_eff: Vec<f64> = v.iter().enumerate().map(|(i, &x)| if i % 3 == 1 { 40.0 * x } else { x }).collect();
    let data = TimeSeries::new(t, y, v).unwrap();
    let state = OuState { y_curve: curve, mu, sigma2, tau };
    (data, state, v_eff)
}

/// Largest relative error of the O-U conditionals against dense Gaussian
/// conditioning of the latent curve and direct multivariate log densities.
pub fn ou_conditional_error(data: &TimeSeries, state: &OuState, v_eff: &[f64]) -> f64 {
    let n = data.len();
    let t = &data.t;
    let prior = OuPrior::default();
    let mut worst = 0.0f64;

    // Y_i | Y_-i, y from the joint Gaussian of (Y, y).
    let s = ou_cov(t, state.sigma2, state.tau);
    let mut joint = DMatrix::zeros(2 * n, 2 * n);
    for i in 0..n {
        for j in 0..n {
            joint[(i, j)] = s[(i, j)];
            joint[(i, n + j)] = s[(i, j)];
            joint[(n + i, j)] = s[(i, j)];
            joint[(n + i, n + j)] = s[(i, j)];
        }
        joint[(n + i, n + i)] += v_eff[i];
    }
    let mean = DVector::from_element(2 * n, state.mu);
    let x = DVector::from_iterator(2 * n, state.y_curve.iter().chain(&data.y).copied());
    let probe: Vec<usize> = if n <= 8 { (0..n).collect() } else { vec![0, 1, n / 3, n / 2, n - 2, n - 1] };
    for &i in &probe {
        let (m, var) = condition_one(&mean, &joint, &x, i);
        let (gm, gv) = ou::latent_conditional(state, data, v_eff, i);
        // Scaled by the conditional sd as well, in case the mean sits near 0.
        worst = worst.max((gm - m).abs() / m.abs().max(var.sqrt())).max(rel_err(gv, var));
    }

    // mu | Y under the flat prior: precision 1' S^-1 1.
    let chol = s.clone().cholesky().unwrap();
    let ones = DVector::from_element(n, 1.0);
    let yv = DVector::from_vec(state.y_curve.clone());
    let si1 = chol.solve(&ones);
    let prec = ones.dot(&si1);
    let (gm, gv) = ou::mu_conditional(state, t);
    worst = worst.max(rel_err(gm, si1.dot(&yv) / prec)).max(rel_err(gv, 1.0 / prec));

    // sigma^2 and tau through log-density differences of the dense model.
    let log_joint = |sigma2: f64, tau: f64| {
        mvn_logpdf(&yv, &DVector::from_element(n, state.mu), &ou_cov(t, sigma2, tau))
            + ig_logpdf(sigma2, prior.sigma2_shape, prior.sigma2_scale)
            + ig_logpdf(tau, prior.tau_shape, prior.tau_scale)
    };
    let (shape, scale) = ou::sigma2_conditional(state, t, &prior);
    let s0 = state.sigma2;
    for &(s1, s2) in &[(0.8 * s0, 1.3 * s0), (0.2 * s0, 5.0 * s0), (0.2, 2.0)] {
        let got = ig_logpdf(s1, shape, scale) - ig_logpdf(s2, shape, scale);
        let want = log_joint(s1, state.tau) - log_joint(s2, state.tau);
        worst = worst.max(rel_err(got, want));
    }
    for &(t1, t2) in &[(0.7 * state.tau, 1.6 * state.tau), (0.3, 5.0), (0.1 * state.tau, 10.0 * state.tau)] {
        let got = ou::tau_log_conditional(t1, state, t, &prior) - ou::tau_log_conditional(t2, state, t, &prior);
        let want = log_joint(state.sigma2, t1) - log_joint(state.sigma2, t2);
        worst = worst.max(rel_err(got, want));
    }
    worst
}

/// Composite Simpson rule on `points` (odd) equally spaced nodes.
pub fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, points: usize) -> f64 {
    let n = if points % 2 == 0 { points + 1 } else { points };
    let h = (b - a) / (n - 1) as f64;
    let mut s = f(a) + f(b);
    for j in 1..n - 1 {
        s += if j % 2 == 1 { 4.0 } else { 2.0 } * f(a + j as f64 * h);
    }
    s * h / 3.0
}

/// Total-variation distance between draws and a density tabulated on a fine
/// uniform grid, over `bins` equal cells spanning the grid.
pub fn tv_to_density(draws: &[f64], grid: &[f64], density: &[f64], bins: usize) -> f64 {
    let (lo, hi) = (grid[0], grid[grid.len() - 1]);
    let width = (hi - lo) / bins as f64;
    let h = grid[1] - grid[0];
    let mut want = vec![0.0; bins];
    for (x, d) in grid.iter().zip(density) {
        let j = (((x - lo) / width) as usize).min(bins - 1);
        want[j] += d * h;
    }
    let total: f64 = want.iter().sum();
    want.iter_mut().for_each(|w| *w /= total);
    let mut got = vec![0.0; bins];
    let mut outside = 0.0;
    for &x in draws {
        if x < lo || x > hi {
            outside += 1.0;
            continue;
        }
        got[(((x - lo) / width) as usize).min(bins - 1)] += 1.0;
    }
    let n = draws.len() as f64;
    0.5 * (got.iter().zip(&want).map(|(g, w)| (g / n - w).abs()).sum::<f64>() + outside / n)
}
