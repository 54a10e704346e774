//! Ornstein-Uhlenbeck state-space model for irregularly sampled series.
//!
//! ```text
//! y_i = Y(t_i) + eps_i,                eps_i ~ N(0, V_i)
//! Y(t_1) ~ N(mu, tau sigma^2 / 2)
//! Y(t_i) | Y(t_{i-1}) ~ N(mu + a_i (Y(t_{i-1}) - mu), (tau sigma^2 / 2)(1 - a_i^2)),
//! a_i = exp(-(t_i - t_{i-1}) / tau)
//! mu ~ U(-30, 30), sigma^2 ~ IG(1, 1e-7), tau ~ IG(1, 1)
//! ```
//!
//! Neighbouring points whose gap is below `1e-12 tau` carry a numerically
//! deterministic link; such runs are merged into one node for every update.

use serde::{Deserialize, Serialize};

use crate::dists::{self, ErrorKind, RngStream};
use crate::engine::{log_scale_mh_step, AdaptiveScale, HostSampler, INITIAL_LOG_STEP};
use crate::error::{invalid, Error, Result};

/// Gaps shorter than this multiple of `tau` are treated as zero.
pub const DEGENERATE_GAP: f64 = 1e-12;

/// Fixed inflation of the Gaussian-mixture variant for this model.
pub const GAUSSIAN_MIXTURE_ALPHA: f64 = 100.0;

/// Generative values used for simulated light curves: `(mu, sigma^2, tau)`.
pub const LIGHT_CURVE_GENERATIVE: (f64, f64, f64) = (17.667, 0.018 * 0.018, 284.066);

/// Observed series: times, magnitudes and measurement variances.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub t: Vec<f64>,
    pub y: Vec<f64>,
    pub v: Vec<f64>,
}

impl TimeSeries {
    pub fn new(t: Vec<f64>, y: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        if t.len() != y.len() || y.len() != v.len() {
            return Err(Error::InvalidData(format!(
                "column lengths differ: t {}, y {}, V {}",
                t.len(),
                y.len(),
                v.len()
            )));
        }
        if t.len() < 2 {
            return Err(Error::InvalidData("a time series needs at least two points".into()));
        }
        if let Some(i) = t.windows(2).position(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidData(format!(
                "times must be strictly increasing (rows {} and {})",
                i + 1,
                i + 2
            )));
        }
        if let Some(i) = t.iter().chain(&y).position(|x| !x.is_finite()) {
            return Err(Error::InvalidData(format!("non-finite value at position {}", i + 1)));
        }
        if let Some(i) = v.iter().position(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::InvalidData(format!("V[{}] must be positive", i + 1)));
        }
        Ok(Self { t, y, v })
    }

    /// Build from standard deviations instead of variances.
    pub fn from_sd(t: Vec<f64>, y: Vec<f64>, sd: Vec<f64>) -> Result<Self> {
        let v = sd.iter().map(|s| s * s).collect();
        Self::new(t, y, v)
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn sd(&self) -> Vec<f64> {
        self.v.iter().map(|v| v.sqrt()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuPrior {
    pub mu_lo: f64,
    pub mu_hi: f64,
    pub sigma2_shape: f64,
    pub sigma2_scale: f64,
    pub tau_shape: f64,
    pub tau_scale: f64,
}

impl Default for OuPrior {
    fn default() -> Self {
        Self {
            mu_lo: -30.0,
            mu_hi: 30.0,
            sigma2_shape: 1.0,
            sigma2_scale: 1e-7,
            tau_shape: 1.0,
            tau_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OuState {
    pub y_curve: Vec<f64>,
    pub mu: f64,
    pub sigma2: f64,
    pub tau: f64,
}

impl OuState {
    /// `Y = y`, `mu = mean(y)`, `sigma = 0.01`, `tau = 200`.
    pub fn initial(data: &TimeSeries) -> Self {
        Self {
            y_curve: data.y.clone(),
            mu: data.y.iter().sum::<f64>() / data.len() as f64,
            sigma2: 1e-4,
            tau: 200.0,
        }
    }

    /// Stationary variance `tau sigma^2 / 2`.
    pub fn stationary_variance(&self) -> f64 {
        0.5 * self.tau * self.sigma2
    }
}

/// Mean and variance of `Y(t_i)` given `Y(t_{i-1}) = y_prev`, or the
/// stationary law when `dt` is `None`.
pub fn ou_transition_params(y_prev: f64, dt: Option<f64>, mu: f64, sigma2: f64, tau: f64) -> (f64, f64) {
    let s = 0.5 * tau * sigma2;
    match dt {
        None => (mu, s),
        Some(dt) => {
            let a = (-dt / tau).exp();
            (mu + a * (y_prev - mu), -s * (-2.0 * dt / tau).exp_m1())
        }
    }
}

/// Shrinkage quantities of the link between points `i - 1` and `i`.
#[derive(Clone, Copy, Debug)]
struct Link {
    dt: f64,
    a: f64,
    one_minus_a: f64,
    one_minus_a2: f64,
    degenerate: bool,
}

impl Link {
    fn new(dt: f64, tau: f64) -> Self {
        let r = dt / tau;
        Self {
            dt,
            a: (-r).exp(),
            one_minus_a: -(-r).exp_m1(),
            one_minus_a2: -(-2.0 * r).exp_m1(),
            degenerate: r < DEGENERATE_GAP,
        }
    }
}

/// `links[i]` joins points `i` and `i + 1`.
fn links(t: &[f64], tau: f64) -> Vec<Link> {
    t.windows(2).map(|w| Link::new(w[1] - w[0], tau)).collect()
}

/// Maximal runs of points joined by degenerate links, as inclusive ranges.
fn blocks(links: &[Link]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    for (i, l) in links.iter().enumerate() {
        if !l.degenerate {
            out.push((start, i));
            start = i + 1;
        }
    }
    out.push((start, links.len()));
    out
}

/// Prior mean and variance (centered) of a node from its Markov blanket.
fn neighbour_prior(
    prev: Option<(f64, &Link)>,
    next: Option<(f64, &Link)>,
    s: f64,
    tau: f64,
) -> (f64, f64) {
    match (prev, next) {
        (None, None) => (0.0, s),
        (None, Some((yn, ln))) => (ln.a * yn, s * ln.one_minus_a2),
        (Some((yp, lp)), None) => (lp.a * yp, s * lp.one_minus_a2),
        (Some((yp, lp)), Some((yn, ln))) => {
            let both = -(-2.0 * (lp.dt + ln.dt) / tau).exp_m1();
            let v = s * lp.one_minus_a2 * ln.one_minus_a2 / both;
            let m = (lp.a * ln.one_minus_a2 * yp + ln.a * lp.one_minus_a2 * yn) / both;
            (m, v)
        }
    }
}

fn block_conditional(
    state: &OuState,
    data: &TimeSeries,
    v_eff: &[f64],
    links: &[Link],
    (start, end): (usize, usize),
) -> (f64, f64) {
    let mu = state.mu;
    let (mut prec, mut wsum) = (0.0, 0.0);
    for j in start..=end {
        prec += 1.0 / v_eff[j];
        wsum += (data.y[j] - mu) / v_eff[j];
    }
    let v_pool = 1.0 / prec;
    let y_pool = wsum * v_pool;
    let prev = (start > 0).then(|| (state.y_curve[start - 1] - mu, &links[start - 1]));
    let next = (end + 1 < data.len()).then(|| (state.y_curve[end + 1] - mu, &links[end]));
    let (m, v) = neighbour_prior(prev, next, state.stationary_variance(), state.tau);
    let b = v_pool / (v_pool + v);
    (mu + (1.0 - b) * y_pool + b * m, (1.0 - b) * v_pool)
}

/// Mean and variance of `Y(t_i)` given every other latent value, the data and
/// the O-U parameters, with effective variances `v_eff`.
pub fn latent_conditional(state: &OuState, data: &TimeSeries, v_eff: &[f64], i: usize) -> (f64, f64) {
    let ls = links(&data.t, state.tau);
    let block = blocks(&ls)
        .into_iter()
        .find(|&(s, e)| s <= i && i <= e)
        .expect("every index lies in a block");
    block_conditional(state, data, v_eff, &ls, block)
}

/// One sequential single-site sweep over the latent curve.
pub fn update_latent_curve(
    state: &mut OuState,
    data: &TimeSeries,
    v_eff: &[f64],
    rng: &mut RngStream,
) -> Result<()> {
    let ls = links(&data.t, state.tau);
    sweep_with_links(state, data, v_eff, &ls, rng)
}

fn sweep_with_links(
    state: &mut OuState,
    data: &TimeSeries,
    v_eff: &[f64],
    ls: &[Link],
    rng: &mut RngStream,
) -> Result<()> {
    for block in blocks(ls) {
        let (m, v) = block_conditional(state, data, v_eff, ls, block);
        let draw = dists::sample_normal(m, v, rng)?;
        state.y_curve[block.0..=block.1].fill(draw);
    }
    Ok(())
}

/// Parameters of the truncated normal conditional of `mu`.
pub fn mu_conditional(state: &OuState, t: &[f64]) -> (f64, f64) {
    mu_conditional_with(state, &links(t, state.tau))
}

fn mu_conditional_with(state: &OuState, ls: &[Link]) -> (f64, f64) {
    let y = &state.y_curve;
    let (mut num, mut den) = (y[0], 1.0);
    for (i, l) in ls.iter().enumerate() {
        if l.degenerate {
            continue;
        }
        num += (y[i + 1] - l.a * y[i]) / (1.0 + l.a);
        den += l.one_minus_a / (1.0 + l.a);
    }
    (num / den, state.stationary_variance() / den)
}

pub fn update_mu(state: &OuState, t: &[f64], prior: &OuPrior, rng: &mut RngStream) -> Result<f64> {
    let (m, v) = mu_conditional(state, t);
    dists::sample_truncated_normal(m, v, prior.mu_lo, prior.mu_hi, rng)
}

/// Sufficient statistics of the curve for `sigma^2` and `tau`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveStats {
    /// Number of nodes after merging degenerate links.
    pub nodes: usize,
    /// `Y'(t_1)^2`.
    pub first_sq: f64,
    /// `sum d_i^2 / (1 - a_i^2)` with innovations `d_i = Y'_i - a_i Y'_{i-1}`.
    pub innovations: f64,
    /// `sum log(1 - a_i^2)`.
    pub log_one_minus_a2: f64,
}

/// Curve statistics at a given `tau`, the state's own `tau` being ignored.
pub fn curve_stats(y_curve: &[f64], t: &[f64], mu: f64, tau: f64) -> CurveStats {
    let first = y_curve[0] - mu;
    let mut stats = CurveStats {
        nodes: 1,
        first_sq: first * first,
        innovations: 0.0,
        log_one_minus_a2: 0.0,
    };
    for i in 1..y_curve.len() {
        let l = Link::new(t[i] - t[i - 1], tau);
        if l.degenerate {
            continue;
        }
        let prev = y_curve[i - 1] - mu;
        // Written so that nearly equal neighbours do not cancel.
        let d = (y_curve[i] - y_curve[i - 1]) + l.one_minus_a * prev;
        stats.nodes += 1;
        stats.innovations += d * d / l.one_minus_a2;
        stats.log_one_minus_a2 += l.one_minus_a2.ln();
    }
    stats
}

/// Shape and scale of the inverse-gamma conditional of `sigma^2`.
pub fn sigma2_conditional(state: &OuState, t: &[f64], prior: &OuPrior) -> (f64, f64) {
    let c = curve_stats(&state.y_curve, t, state.mu, state.tau);
    (
        0.5 * c.nodes as f64 + prior.sigma2_shape,
        prior.sigma2_scale + (c.first_sq + c.innovations) / state.tau,
    )
}

pub fn update_sigma2(state: &OuState, t: &[f64], prior: &OuPrior, rng: &mut RngStream) -> Result<f64> {
    let (shape, scale) = sigma2_conditional(state, t, prior);
    dists::sample_inverse_gamma(shape, scale, rng)
}

/// Unnormalized log conditional density of `tau`; `-inf` for `tau <= 0`.
pub fn tau_log_conditional(tau: f64, state: &OuState, t: &[f64], prior: &OuPrior) -> f64 {
    if !(tau > 0.0) {
        return f64::NEG_INFINITY;
    }
    let c = curve_stats(&state.y_curve, t, state.mu, tau);
    -prior.tau_scale / tau
        - (c.first_sq + c.innovations) / (tau * state.sigma2)
        - (0.5 * c.nodes as f64 + prior.tau_shape + 1.0) * tau.ln()
        - 0.5 * c.log_one_minus_a2
}

pub fn update_tau_mh(
    state: &OuState,
    t: &[f64],
    prior: &OuPrior,
    scale: &AdaptiveScale,
    rng: &mut RngStream,
) -> (f64, bool) {
    log_scale_mh_step(state.tau, |tau| tau_log_conditional(tau, state, t, prior), scale, rng)
}

/// Simulate a latent curve on `t` and observations around it.
pub fn ou_simulate(
    t: &[f64],
    mu: f64,
    sigma2: f64,
    tau: f64,
    v: &[f64],
    error_kind: ErrorKind,
    rng: &mut RngStream,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if t.len() != v.len() || t.is_empty() {
        return Err(invalid("times and variances must be non-empty and of equal length"));
    }
    if !(sigma2 >= 0.0 && tau > 0.0 && sigma2.is_finite() && tau.is_finite()) {
        return Err(invalid(format!("need sigma^2 >= 0 and tau > 0, got ({sigma2}, {tau})")));
    }
    let draw = |m: f64, var: f64, rng: &mut RngStream| {
        if var > 0.0 {
            dists::sample_normal(m, var, rng)
        } else {
            Ok(m)
        }
    };
    let mut curve = Vec::with_capacity(t.len());
    let (m, var) = ou_transition_params(0.0, None, mu, sigma2, tau);
    curve.push(draw(m, var, rng)?);
    for i in 1..t.len() {
        let (m, var) = ou_transition_params(curve[i - 1], Some(t[i] - t[i - 1]), mu, sigma2, tau);
        curve.push(draw(m, var, rng)?);
    }
    let mut y = Vec::with_capacity(t.len());
    for (c, &vi) in curve.iter().zip(v) {
        y.push(c + error_kind.sample(vi, rng)?);
    }
    Ok((curve, y))
}

/// `sum |y_i - y_sim_i| / sqrt(V_i)`.
pub fn weighted_abs_difference(y: &[f64], y_sim: &[f64], v: &[f64]) -> f64 {
    y.iter()
        .zip(y_sim)
        .zip(v)
        .map(|((a, b), v)| (a - b).abs() / v.sqrt())
        .sum()
}

/// Best of `repeats` simulations on the template's times and variances,
/// ranked by weighted absolute difference to the template's magnitudes after
/// copying the template values at `outlier_indices` (0-based) into each one.
/// Returns the chosen series and its score.
pub fn simulate_macho_like(
    template: &TimeSeries,
    gen: (f64, f64, f64),
    outlier_indices: &[usize],
    repeats: usize,
    error_kind: ErrorKind,
    rng: &mut RngStream,
) -> Result<(TimeSeries, f64)> {
    if repeats < 1 {
        return Err(invalid("repeats must be at least 1"));
    }
    if let Some(&i) = outlier_indices.iter().find(|&&i| i >= template.len()) {
        return Err(invalid(format!("outlier index {} is out of range", i + 1)));
    }
    let (mu, sigma2, tau) = gen;
    let mut best: Option<(Vec<f64>, f64)> = None;
    for _ in 0..repeats {
        let (_, mut y) = ou_simulate(&template.t, mu, sigma2, tau, &template.v, error_kind, rng)?;
        for &i in outlier_indices {
            y[i] = template.y[i];
        }
        let score = weighted_abs_difference(&template.y, &y, &template.v);
        if best.as_ref().is_none_or(|(_, s)| score < *s) {
            best = Some((y, score));
        }
    }
    let (y, score) = best.expect("at least one repeat");
    Ok((TimeSeries::new(template.t.clone(), y, template.v.clone())?, score))
}

/// Gibbs sampler: latent curve, `mu`, `sigma^2`, then a Metropolis step for `tau`.
pub struct OuSampler<'a> {
    data: &'a TimeSeries,
    prior: OuPrior,
    state: OuState,
    scales: [AdaptiveScale; 1],
    accepted: [bool; 1],
}

impl<'a> OuSampler<'a> {
    pub fn new(data: &'a TimeSeries, target_acceptance: f64) -> Result<Self> {
        TimeSeries::new(data.t.clone(), data.y.clone(), data.v.clone())?;
        Ok(Self {
            data,
            prior: OuPrior::default(),
            state: OuState::initial(data),
            scales: [AdaptiveScale::new(INITIAL_LOG_STEP, target_acceptance)],
            accepted: [false],
        })
    }

    pub fn state(&self) -> &OuState {
        &self.state
    }
}

impl HostSampler for OuSampler<'_> {
    fn variances(&self) -> &[f64] {
        &self.data.v
    }

    fn residuals(&self, out: &mut [f64]) {
        for ((o, &y), &c) in out.iter_mut().zip(&self.data.y).zip(&self.state.y_curve) {
            *o = y - c;
        }
    }

    fn update(&mut self, v_eff: &[f64], rng: &mut RngStream) -> Result<()> {
        let t = &self.data.t;
        let ls = links(t, self.state.tau);
        sweep_with_links(&mut self.state, self.data, v_eff, &ls, rng)?;
        let (m, v) = mu_conditional_with(&self.state, &ls);
        self.state.mu = dists::sample_truncated_normal(m, v, self.prior.mu_lo, self.prior.mu_hi, rng)?;
        self.state.sigma2 = update_sigma2(&self.state, t, &self.prior, rng)?;
        let (tau, acc) = update_tau_mh(&self.state, t, &self.prior, &self.scales[0], rng);
        self.state.tau = tau;
        self.accepted[0] = acc;
        Ok(())
    }

    fn monitored_names(&self) -> Vec<String> {
        vec!["mu".into(), "log_sigma".into(), "log_tau".into()]
    }

    fn monitored(&self, out: &mut Vec<f64>) {
        out.push(self.state.mu);
        out.push(0.5 * self.state.sigma2.ln());
        out.push(self.state.tau.ln());
    }

    fn latent(&self) -> &[f64] {
        &self.state.y_curve
    }

    fn mh_names(&self) -> Vec<String> {
        vec!["tau".into()]
    }

    fn scales_mut(&mut self) -> &mut [AdaptiveScale] {
        &mut self.scales
    }

    fn last_accepted(&self) -> &[bool] {
        &self.accepted
    }
}
