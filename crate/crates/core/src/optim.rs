//! Derivative-free minimization (Nelder-Mead with standard coefficients).

#[derive(Clone, Debug)]
pub(crate) struct Minimum {
    pub x: Vec<f64>,
    pub fx: f64,
    pub converged: bool,
}

/// Minimize `f` from `x0` with an initial simplex of edge `step`.
///
/// Stops when the spread of simplex values falls below `ftol` (relative to
/// the best value plus one) or after `max_evals` evaluations.
pub(crate) fn nelder_mead(
    f: &dyn Fn(&[f64]) -> f64,
    x0: &[f64],
    step: f64,
    ftol: f64,
    max_evals: usize,
) -> Minimum {
    let d = x0.len();
    let eval = |x: &[f64]| {
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<Vec<f64>> = vec![x0.to_vec()];
    for j in 0..d {
        let mut x = x0.to_vec();
        x[j] += step;
        simplex.push(x);
    }
    let mut values: Vec<f64> = simplex.iter().map(|x| eval(x)).collect();
    let mut evals = d + 1;
    let mut converged = false;

    while evals < max_evals {
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&i| simplex[i].clone()).collect();
        values = order.iter().map(|&i| values[i]).collect();

        let (best, worst) = (values[0], values[d]);
        if best.is_finite() && (worst - best).abs() <= ftol * (1.0 + best.abs()) {
            converged = true;
            break;
        }

        let centroid: Vec<f64> = (0..d)
            .map(|j| simplex[..d].iter().map(|x| x[j]).sum::<f64>() / d as f64)
            .collect();
        let toward = |t: f64| -> Vec<f64> {
            (0..d)
                .map(|j| centroid[j] + t * (simplex[d][j] - centroid[j]))
                .collect()
        };

        let xr = toward(-1.0);
        let fr = eval(&xr);
        evals += 1;
        if fr < values[0] {
            let xe = toward(-2.0);
            let fe = eval(&xe);
            evals += 1;
            if fe < fr {
                simplex[d] = xe;
                values[d] = fe;
            } else {
                simplex[d] = xr;
                values[d] = fr;
            }
            continue;
        }
        if fr < values[d - 1] {
            simplex[d] = xr;
            values[d] = fr;
            continue;
        }
        let (xc, fc) = if fr < values[d] {
            let xc = toward(-0.5);
            let fc = eval(&xc);
            (xc, fc)
        } else {
            let xc = toward(0.5);
            let fc = eval(&xc);
            (xc, fc)
        };
        evals += 1;
        if fc < values[d].min(fr) {
            simplex[d] = xc;
            values[d] = fc;
            continue;
        }
        for i in 1..=d {
            for j in 0..d {
                simplex[i][j] = simplex[0][j] + 0.5 * (simplex[i][j] - simplex[0][j]);
            }
            values[i] = eval(&simplex[i]);
        }
        evals += d;
    }

    let best = (0..=d)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]))
        .unwrap_or(0);
    Minimum {
        x: simplex[best].clone(),
        fx: values[best],
        converged,
    }
}

/// Nelder-Mead restarted from its own optimum until a restart no longer
/// improves the value, which guards against premature simplex collapse.
pub(crate) fn minimize(
    f: &dyn Fn(&[f64]) -> f64,
    x0: &[f64],
    step: f64,
    ftol: f64,
    max_evals: usize,
) -> Minimum {
    let mut m = nelder_mead(f, x0, step, ftol, max_evals);
    for _ in 0..10 {
        let next = nelder_mead(f, &m.x, step * 0.1, ftol, max_evals);
        let improved = next.fx < m.fx - ftol * (1.0 + m.fx.abs());
        let converged = next.converged;
        if next.fx <= m.fx {
            m = next;
        }
        if !improved {
            m.converged = converged;
            break;
        }
    }
    m
}
