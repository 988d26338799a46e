//! Parameters of the Poisson factor mixture and its likelihood.
//!
//! Counts `y` (length `p`) are conditionally independent Poissons given a
//! latent `z` (length `q`) with rates `exp(intercepts + loadings * z)`, and `z`
//! follows a `k`-component Gaussian mixture.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use statrs::function::gamma::ln_gamma;

use crate::covariates::{DesignMatrix, LogitCoefficients};
use crate::error::{Error, Result};
use crate::quadrature::{cholesky_psd, log_sum_exp, TensorGrid, DEFAULT_JITTER};
use crate::selection::ledermann_max_q;

/// Largest admissible linear predictor before `exp` is considered divergent.
pub const MAX_LINEAR_PREDICTOR: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ModelDims {
    pub n: usize,
    pub p: usize,
    pub q: usize,
    pub k: usize,
    /// Covariate columns, excluding the intercept.
    pub m: usize,
}

impl ModelDims {
    pub fn new(n: usize, p: usize, q: usize, k: usize, m: usize) -> Self {
        ModelDims { n, p, q, k, m }
    }

    /// Checks positivity and the Ledermann bound on `q`.
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.p == 0 || self.q == 0 || self.k == 0 {
            return Err(Error::Config(format!(
                "dimensions must be positive: n={}, p={}, q={}, k={}",
                self.n, self.p, self.q, self.k
            )));
        }
        let bound = ledermann_max_q(self.p);
        if self.q > bound {
            return Err(Error::Config(format!("q={} exceeds the Ledermann bound {} for p={}", self.q, bound, self.p)));
        }
        Ok(())
    }
}

/// Observed counts, `n x p`, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountMatrix {
    n: usize,
    p: usize,
    values: Vec<u32>,
    column_names: Vec<String>,
}

impl CountMatrix {
    pub fn new(n: usize, p: usize, values: Vec<u32>, column_names: Vec<String>) -> Result<Self> {
        if values.len() != n * p {
            return Err(Error::Contract(format!("{} values for a {n}x{p} count matrix", values.len())));
        }
        if column_names.len() != p {
            return Err(Error::Contract(format!("{} column names for {p} columns", column_names.len())));
        }
        if n == 0 || p == 0 {
            return Err(Error::Data("count matrix must have at least one row and one column".into()));
        }
        Ok(CountMatrix { n, p, values, column_names })
    }

    /// Builds a matrix with generated column names `y1..yp`.
    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let p = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != p) {
            return Err(Error::Contract("ragged count rows".into()));
        }
        let names = (1..=p).map(|j| format!("y{j}")).collect();
        CountMatrix::new(rows.len(), p, rows.concat(), names)
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn ncols(&self) -> usize {
        self.p
    }

    pub fn row(&self, l: usize) -> &[u32] {
        &self.values[l * self.p..(l + 1) * self.p]
    }

    pub fn values(&self) -> &[u32] {
        &self.values
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn column_mean(&self, j: usize) -> f64 {
        (0..self.n).map(|l| self.values[l * self.p + j] as f64).sum::<f64>() / self.n as f64
    }

    /// Rows `0..n` as a new matrix (prefix view, copied).
    pub fn head(&self, n: usize) -> CountMatrix {
        let n = n.min(self.n);
        CountMatrix {
            n,
            p: self.p,
            values: self.values[..n * self.p].to_vec(),
            column_names: self.column_names.clone(),
        }
    }
}

/// Intercepts and loadings of the log-linear observation layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Loadings {
    pub intercepts: DVector<f64>,
    /// `p x q`.
    pub loadings: DMatrix<f64>,
    /// `p x (q + 1)` row-major; column 0 is the intercept. `true` marks
    /// entries held at zero.
    fixed: Vec<bool>,
}

impl Loadings {
    /// Loadings with the standard identification mask: zero upper-right
    /// triangle and, when `fix_first_intercept`, the first intercept at zero.
    /// Masked entries are zeroed.
    pub fn new(intercepts: DVector<f64>, loadings: DMatrix<f64>, fix_first_intercept: bool) -> Result<Self> {
        let (p, q) = loadings.shape();
        let mask = standard_mask(p, q, fix_first_intercept);
        Loadings::with_mask(intercepts, loadings, mask)
    }

    pub fn with_mask(intercepts: DVector<f64>, loadings: DMatrix<f64>, fixed: Vec<bool>) -> Result<Self> {
        let (p, q) = loadings.shape();
        if intercepts.len() != p {
            return Err(Error::Contract(format!("{} intercepts for {p} variables", intercepts.len())));
        }
        if fixed.len() != p * (q + 1) {
            return Err(Error::Contract(format!("mask has {} entries, expected {}", fixed.len(), p * (q + 1))));
        }
        let mut out = Loadings { intercepts, loadings, fixed };
        out.apply_mask();
        Ok(out)
    }

    pub fn p(&self) -> usize {
        self.loadings.nrows()
    }

    pub fn q(&self) -> usize {
        self.loadings.ncols()
    }

    /// Whether entry `(j, c)` is fixed; `c == 0` is the intercept and
    /// `c >= 1` is loading column `c - 1`.
    pub fn is_fixed(&self, j: usize, c: usize) -> bool {
        self.fixed[j * (self.q() + 1) + c]
    }

    pub fn mask(&self) -> &[bool] {
        &self.fixed
    }

    pub fn free_count(&self) -> usize {
        self.fixed.iter().filter(|f| !**f).count()
    }

    pub(crate) fn apply_mask(&mut self) {
        let q = self.q();
        for j in 0..self.p() {
            if self.fixed[j * (q + 1)] {
                self.intercepts[j] = 0.0;
            }
            for c in 0..q {
                if self.fixed[j * (q + 1) + c + 1] {
                    self.loadings[(j, c)] = 0.0;
                }
            }
        }
    }

    /// Augmented coefficient vector `(intercept, loadings...)` of variable `j`.
    pub fn row_coefficients(&self, j: usize) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.q() + 1);
        v.push(self.intercepts[j]);
        v.extend(self.loadings.row(j).iter());
        v
    }
}

/// Zero upper-right triangle (`j < c`) plus, optionally, the first intercept.
pub fn standard_mask(p: usize, q: usize, fix_first_intercept: bool) -> Vec<bool> {
    let mut mask = vec![false; p * (q + 1)];
    for j in 0..p {
        for c in 0..q {
            if j < c {
                mask[j * (q + 1) + c + 1] = true;
            }
        }
    }
    if fix_first_intercept && p > 0 {
        mask[0] = true;
    }
    mask
}

/// Gaussian mixture over the latent factors.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentMixture {
    /// Mixing proportions. With covariate-dependent weights these hold the
    /// sample-average weights used for standardisation.
    pub weights: DVector<f64>,
    /// Multinomial-logit coefficients when the weights depend on covariates.
    pub logit: Option<LogitCoefficients>,
    pub means: Vec<DVector<f64>>,
    pub covariances: Vec<DMatrix<f64>>,
}

impl LatentMixture {
    pub fn k(&self) -> usize {
        self.means.len()
    }

    /// `sum_i w_i mu_i`.
    pub fn overall_mean(&self) -> DVector<f64> {
        let q = self.means[0].len();
        let mut m = DVector::zeros(q);
        for (w, mu) in self.weights.iter().zip(&self.means) {
            m += mu * *w;
        }
        m
    }

    /// `sum_i w_i (Sigma_i + mu_i mu_i^T)`, the second moment about zero.
    pub fn second_moment(&self) -> DMatrix<f64> {
        let q = self.means[0].len();
        let mut v = DMatrix::zeros(q, q);
        for ((w, mu), s) in self.weights.iter().zip(&self.means).zip(&self.covariances) {
            v += (s + mu * mu.transpose()) * *w;
        }
        v
    }
}

/// Full parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub loadings: Loadings,
    pub mixture: LatentMixture,
}

impl Theta {
    pub fn p(&self) -> usize {
        self.loadings.p()
    }

    pub fn q(&self) -> usize {
        self.loadings.q()
    }

    pub fn k(&self) -> usize {
        self.mixture.k()
    }

    /// Covariate columns excluding the intercept.
    pub fn m(&self) -> usize {
        self.mixture.logit.as_ref().map_or(0, |l| l.ncols() - 1)
    }

    /// Structural checks on shapes and the positivity of the weights.
    pub fn validate(&self) -> Result<()> {
        let (p, q, k) = (self.p(), self.q(), self.k());
        if k == 0 || q == 0 || p == 0 {
            return Err(Error::Contract("theta must have p, q, k >= 1".into()));
        }
        if self.mixture.weights.len() != k || self.mixture.covariances.len() != k {
            return Err(Error::Contract("mixture component counts disagree".into()));
        }
        for (mu, s) in self.mixture.means.iter().zip(&self.mixture.covariances) {
            if mu.len() != q || s.shape() != (q, q) {
                return Err(Error::Contract(format!("component moments must have dimension {q}")));
            }
        }
        if self.mixture.weights.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Contract("mixture weights must be positive".into()));
        }
        if let Some(logit) = &self.mixture.logit {
            if logit.nrows() + 1 != k {
                return Err(Error::Contract(format!("logit coefficients need {} rows", k - 1)));
            }
        }
        Ok(())
    }

    /// `log pi_i(x_l)` for every row, `n x k` row-major, or the constant
    /// log weights when the mixture has no covariates.
    pub fn log_weights(&self, n: usize, design: Option<&DesignMatrix>) -> Result<Vec<f64>> {
        let k = self.k();
        match (&self.mixture.logit, design) {
            (Some(logit), Some(x)) => {
                if x.nrows() != n || x.ncols() != logit.ncols() {
                    return Err(Error::Contract(format!(
                        "design is {}x{}, expected {n}x{}",
                        x.nrows(),
                        x.ncols(),
                        logit.ncols()
                    )));
                }
                let mut out = Vec::with_capacity(n * k);
                for l in 0..n {
                    out.extend(crate::covariates::log_mixture_weights(logit, x.row(l)));
                }
                Ok(out)
            }
            (Some(_), None) => Err(Error::Contract("covariate-dependent weights need a design matrix".into())),
            (None, Some(_)) => Err(Error::Contract("a design matrix was given for a constant-weight mixture".into())),
            (None, None) => {
                let lw: Vec<f64> = self.mixture.weights.iter().map(|w| w.ln()).collect();
                Ok((0..n).flat_map(|_| lw.iter().copied()).collect())
            }
        }
    }
}

/// `exp(intercepts + loadings * z)`.
pub fn link_rates(loadings: &Loadings, z: &[f64]) -> Result<DVector<f64>> {
    let q = loadings.q();
    if z.len() != q {
        return Err(Error::Contract(format!("latent vector of length {} for q={q}", z.len())));
    }
    let mut out = DVector::zeros(loadings.p());
    for j in 0..loadings.p() {
        let mut eta = loadings.intercepts[j];
        for c in 0..q {
            eta += loadings.loadings[(j, c)] * z[c];
        }
        if !(eta <= MAX_LINEAR_PREDICTOR) {
            return Err(Error::Numerical(format!(
                "linear predictor {eta:.3} of variable {} exceeds {MAX_LINEAR_PREDICTOR}",
                j + 1
            )));
        }
        out[j] = eta.exp();
    }
    Ok(out)
}

/// `log(y!)`, tabulated for small counts.
pub fn log_factorial(y: u32) -> f64 {
    const TABLE: usize = 1024;
    static CACHE: OnceLock<Vec<f64>> = OnceLock::new();
    let table = CACHE.get_or_init(|| {
        let mut t = vec![0.0; TABLE];
        for v in 2..TABLE {
            t[v] = t[v - 1] + (v as f64).ln();
        }
        t
    });
    match table.get(y as usize) {
        Some(v) => *v,
        None => ln_gamma(y as f64 + 1.0),
    }
}

/// Sum over variables of the Poisson log-probability of `y` at `rates`.
pub fn poisson_row_loglik(y: &[u32], rates: &[f64]) -> f64 {
    debug_assert_eq!(y.len(), rates.len());
    y.iter()
        .zip(rates)
        .map(|(&c, &w)| {
            let lw = if c == 0 { 0.0 } else { c as f64 * w.ln() };
            lw - w - log_factorial(c)
        })
        .sum()
}

/// `log f(y | component)` by Gauss-Hermite quadrature over the component's
/// Gaussian.
///
/// Evaluated directly node by node; returns negative infinity rather than
/// failing when every node gives zero probability.
pub fn component_marginal_loglik(y: &[u32], component: usize, theta: &Theta, grid: &TensorGrid) -> Result<f64> {
    if component >= theta.k() {
        return Err(Error::Contract(format!("component {component} out of range for k={}", theta.k())));
    }
    if y.len() != theta.p() || grid.dim() != theta.q() {
        return Err(Error::Contract("dimension mismatch in component_marginal_loglik".into()));
    }
    let nodes = crate::quadrature::transform_nodes(
        grid,
        &theta.mixture.means[component],
        &theta.mixture.covariances[component],
    )?;
    let mut terms = Vec::with_capacity(grid.len());
    for t in 0..grid.len() {
        let z: Vec<f64> = nodes.row(t).iter().copied().collect();
        let rates = link_rates(&theta.loadings, &z)?;
        terms.push(grid.log_weights()[t] + poisson_row_loglik(y, rates.as_slice()));
    }
    Ok(log_sum_exp(&terms))
}

/// Counts prepared for repeated likelihood evaluation.
#[derive(Debug, Clone)]
pub(crate) struct PreparedCounts {
    pub n: usize,
    pub p: usize,
    pub y: Vec<f64>,
    /// `sum_j log(y_lj!)` per row.
    pub log_fact: Vec<f64>,
}

impl PreparedCounts {
    pub fn new(counts: &CountMatrix) -> Self {
        let (n, p) = (counts.nrows(), counts.ncols());
        let y = counts.values().iter().map(|&v| v as f64).collect();
        let log_fact = (0..n).map(|l| counts.row(l).iter().map(|&c| log_factorial(c)).sum()).collect();
        PreparedCounts { n, p, y, log_fact }
    }

    pub fn row(&self, l: usize) -> &[f64] {
        &self.y[l * self.p..(l + 1) * self.p]
    }
}

/// Per-component affine maps from standard grid points to linear predictors,
/// `eta_it = offset_i + slope_i z_t`, with the rate sums at every node.
#[derive(Debug, Clone)]
pub(crate) struct NodeTable {
    pub p: usize,
    pub q: usize,
    pub k: usize,
    pub nodes_per_component: usize,
    /// `k x p`.
    pub offset: Vec<f64>,
    /// `k x p x q`.
    pub slope: Vec<f64>,
    /// `k x K`, `sum_j exp(eta_itj)`.
    pub rate_sum: Vec<f64>,
    /// `sqrt(2) L_i` per component, mapping grid points to latent space.
    pub scale: Vec<DMatrix<f64>>,
}

impl NodeTable {
    pub fn build(theta: &Theta, grid: &TensorGrid) -> Result<Self> {
        let (p, q, k) = (theta.p(), theta.q(), theta.k());
        if grid.dim() != q {
            return Err(Error::Contract(format!("grid dimension {} for q={q}", grid.dim())));
        }
        let big_k = grid.len();
        let lam = &theta.loadings.loadings;
        let mut offset = vec![0.0; k * p];
        let mut slope = vec![0.0; k * p * q];
        let mut rate_sum = vec![0.0; k * big_k];
        let mut scale = Vec::with_capacity(k);
        let mut eta = vec![0.0; p];
        for i in 0..k {
            let (chol, _) = cholesky_psd(&theta.mixture.covariances[i], &DEFAULT_JITTER)?;
            let c = chol * std::f64::consts::SQRT_2;
            let mu = &theta.mixture.means[i];
            let b = lam * &c;
            for j in 0..p {
                let mut a = theta.loadings.intercepts[j];
                for d in 0..q {
                    a += lam[(j, d)] * mu[d];
                    slope[(i * p + j) * q + d] = b[(j, d)];
                }
                offset[i * p + j] = a;
            }
            for t in 0..big_k {
                let z = grid.point(t);
                let mut s = 0.0;
                for j in 0..p {
                    let mut e = offset[i * p + j];
                    let row = &slope[(i * p + j) * q..(i * p + j + 1) * q];
                    for d in 0..q {
                        e += row[d] * z[d];
                    }
                    if !(e <= MAX_LINEAR_PREDICTOR) {
                        return Err(Error::Numerical(format!(
                            "linear predictor {e:.3} of variable {} exceeds {MAX_LINEAR_PREDICTOR} in component {}",
                            j + 1,
                            i + 1
                        )));
                    }
                    eta[j] = e;
                    s += e.exp();
                }
                rate_sum[i * big_k + t] = s;
            }
            scale.push(c);
        }
        Ok(NodeTable { p, q, k, nodes_per_component: big_k, offset, slope, rate_sum, scale })
    }

    /// Writes `log w_t + log f(y | node (i, t))` for all `(i, t)` into `out`
    /// (`k x K`).
    pub fn row_node_logliks(&self, y: &[f64], log_fact: f64, grid: &TensorGrid, out: &mut [f64], beta: &mut [f64]) {
        let (p, q, big_k) = (self.p, self.q, self.nodes_per_component);
        let lw = grid.log_weights();
        let pts = grid.points();
        for i in 0..self.k {
            let mut alpha = -log_fact;
            beta[..q].iter_mut().for_each(|b| *b = 0.0);
            for j in 0..p {
                let yj = y[j];
                if yj != 0.0 {
                    alpha += yj * self.offset[i * p + j];
                    let row = &self.slope[(i * p + j) * q..(i * p + j + 1) * q];
                    for d in 0..q {
                        beta[d] += yj * row[d];
                    }
                }
            }
            let rs = &self.rate_sum[i * big_k..(i + 1) * big_k];
            let dst = &mut out[i * big_k..(i + 1) * big_k];
            match q {
                1 => {
                    let b0 = beta[0];
                    for t in 0..big_k {
                        dst[t] = lw[t] + alpha + b0 * pts[t] - rs[t];
                    }
                }
                2 => {
                    let (b0, b1) = (beta[0], beta[1]);
                    for t in 0..big_k {
                        dst[t] = lw[t] + alpha + b0 * pts[2 * t] + b1 * pts[2 * t + 1] - rs[t];
                    }
                }
                3 => {
                    let (b0, b1, b2) = (beta[0], beta[1], beta[2]);
                    for t in 0..big_k {
                        let z = &pts[3 * t..3 * t + 3];
                        dst[t] = lw[t] + alpha + b0 * z[0] + b1 * z[1] + b2 * z[2] - rs[t];
                    }
                }
                _ => {
                    for t in 0..big_k {
                        let z = &pts[t * q..(t + 1) * q];
                        let mut v = lw[t] + alpha - rs[t];
                        for d in 0..q {
                            v += beta[d] * z[d];
                        }
                        dst[t] = v;
                    }
                }
            }
        }
    }
}

/// Observed-data log-likelihood `sum_l log sum_i pi_i(x_l) f(y_l | i)`.
pub fn observed_loglik(
    counts: &CountMatrix,
    theta: &Theta,
    grid: &TensorGrid,
    design: Option<&DesignMatrix>,
) -> Result<f64> {
    theta.validate()?;
    if counts.ncols() != theta.p() {
        return Err(Error::Contract(format!("counts have {} columns, theta has p={}", counts.ncols(), theta.p())));
    }
    let data = PreparedCounts::new(counts);
    let table = NodeTable::build(theta, grid)?;
    let log_w = theta.log_weights(data.n, design)?;
    let (k, big_k) = (theta.k(), grid.len());
    let mut buf = vec![0.0; k * big_k];
    let mut beta = vec![0.0; theta.q()];
    let mut marg = vec![0.0; k];
    let mut total = 0.0;
    for l in 0..data.n {
        table.row_node_logliks(data.row(l), data.log_fact[l], grid, &mut buf, &mut beta);
        for i in 0..k {
            marg[i] = log_w[l * k + i] + log_sum_exp(&buf[i * big_k..(i + 1) * big_k]);
        }
        total += log_sum_exp(&marg);
    }
    Ok(total)
}

/// Which identification constraint a check refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    /// `sum_i pi_i mu_i = 0`.
    MixtureMean,
    /// `sum_i pi_i (Sigma_i + mu_i mu_i^T) = I`.
    MixtureVariance,
    /// Upper-right triangle of the loading matrix is zero.
    LoadingTriangle,
    /// First intercept is zero.
    FirstIntercept,
}

impl Condition {
    /// Number of the constraint in the usual listing (1, 2 or 3).
    pub fn number(&self) -> u8 {
        match self {
            Condition::MixtureMean | Condition::MixtureVariance => 1,
            Condition::LoadingTriangle => 2,
            Condition::FirstIntercept => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionCheck {
    pub condition: Condition,
    pub passed: bool,
    /// Largest absolute deviation from the constraint.
    pub magnitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdentifiabilityReport {
    pub tolerance: f64,
    pub checks: Vec<ConditionCheck>,
}

impl IdentifiabilityReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, condition: Condition) -> &ConditionCheck {
        self.checks.iter().find(|c| c.condition == condition).expect("every condition is checked")
    }
}

impl std::fmt::Display for IdentifiabilityReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.checks {
            let label = match c.condition {
                Condition::MixtureMean => "mixture mean is zero",
                Condition::MixtureVariance => "mixture variance is identity",
                Condition::LoadingTriangle => "upper loading triangle is zero",
                Condition::FirstIntercept => "first intercept is zero",
            };
            writeln!(
                f,
                "condition {} ({label}): {} (violation {:.3e}, tolerance {:.1e})",
                c.condition.number(),
                if c.passed { "pass" } else { "FAIL" },
                c.magnitude,
                self.tolerance
            )?;
        }
        Ok(())
    }
}

/// Measures each identification constraint against `tol`.
pub fn check_identifiability(theta: &Theta, tol: f64) -> IdentifiabilityReport {
    let q = theta.q();
    let mean = theta.mixture.overall_mean();
    let mean_dev = mean.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let var = theta.mixture.second_moment();
    let var_dev = (var - DMatrix::<f64>::identity(q, q)).iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut tri_dev = 0.0f64;
    for j in 0..theta.p() {
        for c in (j + 1)..q {
            tri_dev = tri_dev.max(theta.loadings.loadings[(j, c)].abs());
        }
    }
    let first = theta.loadings.intercepts[0].abs();
    let make = |condition, magnitude: f64| ConditionCheck { condition, passed: magnitude <= tol, magnitude };
    IdentifiabilityReport {
        tolerance: tol,
        checks: vec![
            make(Condition::MixtureMean, mean_dev),
            make(Condition::MixtureVariance, var_dev),
            make(Condition::LoadingTriangle, tri_dev),
            make(Condition::FirstIntercept, first),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{gauss_hermite_rule, tensor_grid};
    use nalgebra::{dmatrix, dvector};

    fn grid(t: usize, q: usize) -> TensorGrid {
        tensor_grid(&gauss_hermite_rule(t).unwrap(), q).unwrap()
    }

    fn simple_theta() -> Theta {
        let loadings = Loadings::new(dvector![0.0, 0.5, -0.3], dmatrix![0.8, 0.0; 0.4, 0.6; -0.5, 0.7], true).unwrap();
        Theta {
            loadings,
            mixture: LatentMixture {
                weights: dvector![0.4, 0.6],
                logit: None,
                means: vec![dvector![0.9, 0.1], dvector![-0.6, -0.0666]],
                covariances: vec![dmatrix![0.3, 0.05; 0.05, 0.5], dmatrix![0.2, -0.02; -0.02, 0.6]],
            },
        }
    }

    #[test]
    fn link_rate_examples() {
        let l = Loadings::new(dvector![0.0, 2f64.ln()], DMatrix::zeros(2, 1), false).unwrap();
        let w = link_rates(&l, &[3.7]).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-15 && (w[1] - 2.0).abs() < 1e-15);

        let l = Loadings::new(dvector![0.0], dmatrix![1.0], false).unwrap();
        assert!((link_rates(&l, &[1.0]).unwrap()[0] - std::f64::consts::E).abs() < 1e-15);

        let l = Loadings::with_mask(dvector![0.62], dmatrix![0.75, -0.49], vec![false; 3]).unwrap();
        let w = link_rates(&l, &[1.0, 1.0]).unwrap()[0];
        assert!((w - 0.88f64.exp()).abs() < 1e-12);
        assert!((w - 2.4109).abs() < 1e-4);
    }

    #[test]
    fn link_rate_overflow_names_variable() {
        let l = Loadings::new(dvector![0.0, 1.0], dmatrix![1.0; 800.0], false).unwrap();
        let err = link_rates(&l, &[1.0]).unwrap_err();
        assert!(matches!(err, Error::Numerical(ref m) if m.contains("variable 2")), "{err}");
    }

    #[test]
    fn poisson_row_examples() {
        assert_eq!(poisson_row_loglik(&[0], &[1.0]), -1.0);
        assert!((poisson_row_loglik(&[2], &[2.0]) - (2f64.ln() - 2.0)).abs() < 1e-14);
        assert!((poisson_row_loglik(&[2], &[2.0]) + 1.30685).abs() < 1e-5);
        assert_eq!(poisson_row_loglik(&[0, 0, 0], &[1.0, 1.0, 1.0]), -3.0);
    }

    #[test]
    fn zero_loadings_reduce_to_independent_poisson() {
        let mut theta = simple_theta();
        theta.loadings.loadings.fill(0.0);
        let g = grid(6, 2);
        let y = [3, 0, 5];
        let rates: Vec<f64> = theta.loadings.intercepts.iter().map(|v| v.exp()).collect();
        let direct = poisson_row_loglik(&y, &rates);
        for i in 0..2 {
            let v = component_marginal_loglik(&y, i, &theta, &g).unwrap();
            assert!((v - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn component_likelihood_matches_fast_table() {
        let theta = simple_theta();
        let g = grid(7, 2);
        let counts = CountMatrix::from_rows(&[vec![1, 4, 0], vec![0, 0, 2], vec![7, 1, 1]]).unwrap();
        let data = PreparedCounts::new(&counts);
        let table = NodeTable::build(&theta, &g).unwrap();
        let mut buf = vec![0.0; 2 * g.len()];
        let mut beta = vec![0.0; 2];
        for l in 0..3 {
            table.row_node_logliks(data.row(l), data.log_fact[l], &g, &mut buf, &mut beta);
            for i in 0..2 {
                let fast = log_sum_exp(&buf[i * g.len()..(i + 1) * g.len()]);
                let slow = component_marginal_loglik(counts.row(l), i, &theta, &g).unwrap();
                assert!((fast - slow).abs() < 1e-10, "{fast} vs {slow}");
            }
        }
    }

    #[test]
    fn observed_loglik_single_component_and_duplication() {
        let mut theta = simple_theta();
        let g = grid(8, 2);
        let counts = CountMatrix::from_rows(&[vec![1, 4, 0], vec![0, 0, 2], vec![7, 1, 1]]).unwrap();
        let ll = observed_loglik(&counts, &theta, &g, None).unwrap();
        let doubled = CountMatrix::from_rows(&[
            vec![1, 4, 0],
            vec![0, 0, 2],
            vec![7, 1, 1],
            vec![1, 4, 0],
            vec![0, 0, 2],
            vec![7, 1, 1],
        ])
        .unwrap();
        let ll2 = observed_loglik(&doubled, &theta, &g, None).unwrap();
        assert!((ll2 - 2.0 * ll).abs() < 1e-10 * ll.abs());

        theta.mixture.weights = dvector![1.0];
        theta.mixture.means.truncate(1);
        theta.mixture.covariances.truncate(1);
        let ll1 = observed_loglik(&counts, &theta, &g, None).unwrap();
        let direct: f64 = (0..3).map(|l| component_marginal_loglik(counts.row(l), 0, &theta, &g).unwrap()).sum();
        assert!((ll1 - direct).abs() < 1e-10);
    }

    #[test]
    fn identifiability_report_flags_violations() {
        let loadings = Loadings::new(dvector![0.0, 0.2], dmatrix![0.5; 0.3], true).unwrap();
        let mut theta = Theta {
            loadings,
            mixture: LatentMixture {
                weights: dvector![0.5, 0.5],
                logit: None,
                means: vec![dvector![0.6], dvector![-0.6]],
                covariances: vec![dmatrix![0.64], dmatrix![0.64]],
            },
        };
        let report = check_identifiability(&theta, 1e-8);
        assert!(report.all_passed(), "{report}");

        theta.loadings.intercepts[0] = 0.1;
        let c = check_identifiability(&theta, 1e-8).get(Condition::FirstIntercept).clone();
        assert!(!c.passed && (c.magnitude - 0.1).abs() < 1e-15);
        theta.loadings.intercepts[0] = 0.0;

        theta.mixture.means[0][0] += 1.0;
        let c = check_identifiability(&theta, 1e-8).get(Condition::MixtureMean).clone();
        assert!(!c.passed && (c.magnitude - 0.5).abs() < 1e-15);
    }

    #[test]
    fn dims_respect_ledermann() {
        assert!(ModelDims::new(10, 7, 3, 2, 0).validate().is_ok());
        let err = ModelDims::new(10, 7, 4, 2, 0).validate().unwrap_err();
        assert!(err.to_string().contains("bound 3"));
    }

    #[test]
    fn mask_zeroes_triangle_and_first_intercept() {
        let l = Loadings::new(dvector![1.0, 2.0, 3.0], DMatrix::from_element(3, 3, 1.0), true).unwrap();
        assert_eq!(l.intercepts[0], 0.0);
        assert_eq!(l.loadings[(0, 1)], 0.0);
        assert_eq!(l.loadings[(0, 2)], 0.0);
        assert_eq!(l.loadings[(1, 2)], 0.0);
        assert_eq!(l.loadings[(1, 1)], 1.0);
        assert_eq!(l.free_count(), 3 * 4 - 3 - 1);
    }
}
