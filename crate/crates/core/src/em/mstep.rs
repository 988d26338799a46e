use nalgebra::{DMatrix, DVector};

use super::estep::EStepSummary;
use super::FitConfig;
use crate::covariates::{fit_logit_weights, DesignMatrix, LogitCoefficients};
use crate::error::{Error, Result};
use crate::model::{Loadings, NodeTable, Theta, MAX_LINEAR_PREDICTOR};
use crate::quadrature::{cholesky_psd, TensorGrid, DEFAULT_JITTER};

const HESSIAN_RIDGE: f64 = 1e-8;

/// Latent-space position of every `(component, node)` pair under `theta`,
/// `k x K x q`.
pub(crate) fn node_positions(theta: &Theta, grid: &TensorGrid) -> Result<Vec<f64>> {
    let (q, k, big_k) = (theta.q(), theta.k(), grid.len());
    let mut out = vec![0.0; k * big_k * q];
    for i in 0..k {
        let (chol, _) = cholesky_psd(&theta.mixture.covariances[i], &DEFAULT_JITTER)?;
        let mu = &theta.mixture.means[i];
        for t in 0..big_k {
            let u = grid.point(t);
            for a in 0..q {
                let mut v = mu[a];
                for b in 0..=a {
                    v += std::f64::consts::SQRT_2 * chol[(a, b)] * u[b];
                }
                out[(i * big_k + t) * q + a] = v;
            }
        }
    }
    Ok(out)
}

/// Expected complete-data log-likelihood of variable `j` as a function of its
/// augmented coefficients, with node positions and posterior weights held
/// fixed. Returns negative infinity when a rate overflows.
fn variable_objective(coef: &[f64], j: usize, p: usize, q: usize, positions: &[f64], estep: &EStepSummary) -> f64 {
    let mut total = 0.0;
    let nodes = estep.nodes;
    for (node, &mass) in estep.node_mass.iter().enumerate() {
        if mass == 0.0 {
            continue;
        }
        let z = &positions[node * q..(node + 1) * q];
        let mut eta = coef[0];
        for d in 0..q {
            eta += coef[d + 1] * z[d];
        }
        if eta > MAX_LINEAR_PREDICTOR {
            return f64::NEG_INFINITY;
        }
        total += estep.node_counts[(node / nodes * p + j) * nodes + node % nodes] * eta - mass * eta.exp();
    }
    total
}

/// Gradient and negative Hessian of [`variable_objective`] over the free
/// coefficients `free`.
fn variable_derivatives(
    coef: &[f64],
    free: &[usize],
    j: usize,
    p: usize,
    q: usize,
    positions: &[f64],
    estep: &EStepSummary,
) -> (DVector<f64>, DMatrix<f64>) {
    let f = free.len();
    let mut grad = DVector::zeros(f);
    let mut neg_hess = DMatrix::zeros(f, f);
    let mut aug = vec![1.0; q + 1];
    let nodes = estep.nodes;
    for (node, &mass) in estep.node_mass.iter().enumerate() {
        if mass == 0.0 {
            continue;
        }
        let z = &positions[node * q..(node + 1) * q];
        aug[1..].copy_from_slice(z);
        let eta: f64 = coef.iter().zip(&aug).map(|(a, b)| a * b).sum();
        let rate = eta.exp();
        let resid = estep.node_counts[(node / nodes * p + j) * nodes + node % nodes] - mass * rate;
        let curv = mass * rate;
        for (a, &ia) in free.iter().enumerate() {
            grad[a] += resid * aug[ia];
            for (b, &ib) in free.iter().enumerate().take(a + 1) {
                neg_hess[(a, b)] += curv * aug[ia] * aug[ib];
            }
        }
    }
    for a in 0..f {
        for b in 0..a {
            neg_hess[(b, a)] = neg_hess[(a, b)];
        }
    }
    (grad, neg_hess)
}

/// Analytic gradient of the expected objective for variable `j` over all
/// `q + 1` coefficients (used by gradient checks).
pub fn loadings_gradient(theta: &Theta, estep: &EStepSummary, grid: &TensorGrid, j: usize) -> Result<Vec<f64>> {
    let positions = node_positions(theta, grid)?;
    let coef = theta.loadings.row_coefficients(j);
    let free: Vec<usize> = (0..=theta.q()).collect();
    let (g, _) = variable_derivatives(&coef, &free, j, theta.p(), theta.q(), &positions, estep);
    Ok(g.iter().copied().collect())
}

/// Expected objective for variable `j` at coefficients `coef`.
pub fn loadings_objective(
    theta: &Theta,
    estep: &EStepSummary,
    grid: &TensorGrid,
    j: usize,
    coef: &[f64],
) -> Result<f64> {
    let positions = node_positions(theta, grid)?;
    Ok(variable_objective(coef, j, theta.p(), theta.q(), &positions, estep))
}

/// Damped Newton ascent on the intercepts and loadings, one variable at a
/// time, with node positions fixed at `theta`.
///
/// Masked entries never move. Each accepted step does not decrease the
/// expected objective; a step that cannot be made to increase it after
/// `cfg.newton_damping` halvings is rejected, and it is an error only when
/// the gradient is still far from zero.
pub fn m_step_loadings(estep: &EStepSummary, theta: &Theta, grid: &TensorGrid, cfg: &FitConfig) -> Result<Loadings> {
    let (p, q) = (theta.p(), theta.q());
    if estep.node_mass.len() != theta.k() * grid.len() {
        return Err(Error::Contract("E-step summary does not match theta and grid".into()));
    }
    let positions = node_positions(theta, grid)?;
    let mut out = theta.loadings.clone();
    for j in 0..p {
        let free: Vec<usize> = (0..=q).filter(|&c| !theta.loadings.is_fixed(j, c)).collect();
        if free.is_empty() {
            continue;
        }
        let mut coef = theta.loadings.row_coefficients(j);
        let mut value = variable_objective(&coef, j, p, q, &positions, estep);
        for _ in 0..cfg.newton_steps_per_m {
            let (grad, mut neg_hess) = variable_derivatives(&coef, &free, j, p, q, &positions, estep);
            let scale = neg_hess.diagonal().amax().max(1.0);
            for a in 0..free.len() {
                neg_hess[(a, a)] += HESSIAN_RIDGE * scale;
            }
            let direction = neg_hess.clone().cholesky().map(|c| c.solve(&grad)).ok_or_else(|| {
                Error::Numerical(format!("loading Hessian of variable {} is singular after ridge", j + 1))
            })?;
            let predicted = grad.dot(&direction);
            if predicted <= 1e-14 * (value.abs() + 1.0) {
                break;
            }
            let mut step = 1.0;
            let mut accepted = false;
            for _ in 0..=cfg.newton_damping {
                let mut trial = coef.clone();
                for (a, &c) in free.iter().enumerate() {
                    trial[c] += step * direction[a];
                }
                let v = variable_objective(&trial, j, p, q, &positions, estep);
                if v >= value {
                    coef = trial;
                    value = v;
                    accepted = true;
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                if predicted > 1e-8 * (value.abs() + 1.0) {
                    return Err(Error::Numerical(format!(
                        "loading update of variable {} failed to ascend after {} halvings \
                         (predicted gain {predicted:.3e}, objective {value:.6e})",
                        j + 1,
                        cfg.newton_damping
                    )));
                }
                break;
            }
        }
        out.intercepts[j] = coef[0];
        for c in 0..q {
            out.loadings[(j, c)] = coef[c + 1];
        }
    }
    out.apply_mask();
    Ok(out)
}

/// Responsibility-weighted sufficient statistics of the latent moments.
#[derive(Debug, Clone)]
pub(crate) struct MixtureStats {
    pub mass: Vec<f64>,
    pub mean: Vec<DVector<f64>>,
    /// `sum_l r_li E(z z^T | y_l, i) / N_i`.
    pub second: Vec<DMatrix<f64>>,
}

pub(crate) fn mixture_stats(estep: &EStepSummary) -> Result<MixtureStats> {
    let (n, k, q) = (estep.n, estep.k, estep.q);
    let mut mass = vec![0.0; k];
    let mut mean = vec![DVector::zeros(q); k];
    let mut second = vec![DMatrix::zeros(q, q); k];
    for l in 0..n {
        for i in 0..k {
            let r = estep.resp(l, i);
            if r == 0.0 {
                continue;
            }
            mass[i] += r;
            let cm = estep.cond_mean(l, i);
            let cs = estep.cond_second(l, i);
            for a in 0..q {
                mean[i][a] += r * cm[a];
                for b in 0..q {
                    second[i][(a, b)] += r * cs[a * q + b];
                }
            }
        }
    }
    for i in 0..k {
        if mass[i] < 1e-6 * n as f64 {
            return Err(Error::DegenerateComponent { component: i + 1, mass: mass[i] });
        }
        mean[i] /= mass[i];
        second[i] /= mass[i];
    }
    Ok(MixtureStats { mass, mean, second })
}

fn symmetrize_pd(s: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (&s + s.transpose()) * 0.5;
    let (_, delta) = cholesky_psd(&sym, &DEFAULT_JITTER)?;
    let q = sym.nrows();
    Ok(sym + DMatrix::identity(q, q) * delta)
}

/// Closed-form updates of the mixing proportions, means and covariances.
pub fn m_step_mixture(estep: &EStepSummary) -> Result<(DVector<f64>, Vec<DVector<f64>>, Vec<DMatrix<f64>>)> {
    let stats = mixture_stats(estep)?;
    let n = estep.n as f64;
    let weights = DVector::from_iterator(estep.k, stats.mass.iter().map(|m| m / n));
    let mut covs = Vec::with_capacity(estep.k);
    for i in 0..estep.k {
        let mu = &stats.mean[i];
        covs.push(symmetrize_pd(&stats.second[i] - mu * mu.transpose())?);
    }
    Ok((weights, stats.mean, covs))
}

/// Means maximising the expected Gaussian log-density subject to
/// `sum_i w_i mu_i = 0` with the covariances held at `prev_cov`, followed by
/// the covariance update given those means.
pub(crate) fn constrained_moments(
    stats: &MixtureStats,
    weights: &DVector<f64>,
    prev_cov: &[DMatrix<f64>],
) -> Result<(Vec<DVector<f64>>, Vec<DMatrix<f64>>)> {
    let k = stats.mass.len();
    let q = stats.mean[0].len();
    let mut offset = DVector::zeros(q);
    let mut pooled = DMatrix::zeros(q, q);
    for i in 0..k {
        offset += &stats.mean[i] * weights[i];
        pooled += &prev_cov[i] * (weights[i] * weights[i] / stats.mass[i]);
    }
    let multiplier = pooled
        .clone()
        .cholesky()
        .map(|c| c.solve(&offset))
        .ok_or_else(|| Error::Numerical("pooled covariance is not positive definite".into()))?;
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for i in 0..k {
        let shift = &prev_cov[i] * &multiplier * (weights[i] / stats.mass[i]);
        let mu = &stats.mean[i] - &shift;
        let unc = &stats.mean[i];
        covs.push(symmetrize_pd(&stats.second[i] - unc * unc.transpose() + &shift * shift.transpose())?);
        means.push(mu);
    }
    Ok((means, covs))
}

/// Updated mixing weights: either proportions or logit coefficients with the
/// implied sample-average weights.
pub(crate) fn update_weights(
    estep: &EStepSummary,
    theta: &Theta,
    design: Option<&DesignMatrix>,
) -> Result<(DVector<f64>, Option<LogitCoefficients>)> {
    match (&theta.mixture.logit, design) {
        (Some(logit), Some(x)) => {
            let fit = fit_logit_weights(&estep.responsibilities(), x, logit)?;
            let avg = crate::covariates::average_weights(&fit.coefs, x);
            Ok((avg, Some(fit.coefs)))
        }
        _ => {
            let n = estep.n as f64;
            let k = estep.k;
            let mut w = DVector::zeros(k);
            for l in 0..estep.n {
                for i in 0..k {
                    w[i] += estep.resp(l, i);
                }
            }
            for i in 0..k {
                if w[i] < 1e-6 * n {
                    return Err(Error::DegenerateComponent { component: i + 1, mass: w[i] });
                }
            }
            Ok((w / n, None))
        }
    }
}

/// Expected complete-data log-likelihood of the discretised model
/// (components x quadrature nodes) at `theta`, given posterior weights from
/// an earlier E-step. Any `theta` with a higher value than the one the
/// E-step was computed at has a higher observed log-likelihood.
pub(crate) fn surrogate(
    estep: &EStepSummary,
    theta: &Theta,
    grid: &TensorGrid,
    design: Option<&DesignMatrix>,
) -> Result<f64> {
    let table = match NodeTable::build(theta, grid) {
        Ok(t) => t,
        Err(Error::Numerical(_)) => return Ok(f64::NEG_INFINITY),
        Err(e) => return Err(e),
    };
    let (p, q, k, big_k) = (theta.p(), theta.q(), theta.k(), grid.len());
    let log_w = theta.log_weights(estep.n, design)?;
    let mut total = 0.0;
    for l in 0..estep.n {
        for i in 0..k {
            let r = estep.resp(l, i);
            if r > 0.0 {
                total += r * log_w[l * k + i];
            }
        }
    }
    let pts = grid.points();
    for i in 0..k {
        for t in 0..big_k {
            let node = i * big_k + t;
            let mass = estep.node_mass[node];
            if mass == 0.0 {
                continue;
            }
            let z = &pts[t * q..(t + 1) * q];
            let mut lin = 0.0;
            for j in 0..p {
                let mut eta = table.offset[i * p + j];
                let row = &table.slope[(i * p + j) * q..(i * p + j + 1) * q];
                for d in 0..q {
                    eta += row[d] * z[d];
                }
                lin += estep.node_count(i, t, j) * eta;
            }
            total += lin - mass * table.rate_sum[node];
        }
    }
    Ok(total)
}
