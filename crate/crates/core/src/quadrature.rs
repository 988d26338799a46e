//! Gauss-Hermite quadrature over Gaussian latent components.
//!
//! Rules are stored with weights normalised to sum to one, so that
//! `sum_t w_t g(sqrt(2) * x_t)` approximates `E[g(Z)]` for `Z ~ N(0, 1)`.
//! Tensor grids enumerate points in row-major order (last dimension fastest).

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Largest supported number of points per dimension.
pub const MAX_POINTS: usize = 64;

/// Default cap on the number of points of a tensor grid.
pub const DEFAULT_GRID_BUDGET: usize = 1_000_000;

/// Jitter values tried, in order, by [`cholesky_psd`].
pub const DEFAULT_JITTER: [f64; 4] = [0.0, 1e-10, 1e-8, 1e-6];

/// One-dimensional Gauss-Hermite rule (physicists' abscissas, normalised weights).
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// Cartesian product of a one-dimensional rule.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorGrid {
    q: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
}

impl TensorGrid {
    pub fn dim(&self) -> usize {
        self.q
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Point `t` as a slice of length `q`.
    pub fn point(&self, t: usize) -> &[f64] {
        &self.points[t * self.q..(t + 1) * self.q]
    }

    /// All points, row-major `len() x q`.
    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }
}

/// Gauss-Hermite rule with `points` abscissas.
///
/// Nodes come from the eigenvalues of the Jacobi matrix and are then polished
/// by Newton iteration on the orthonormal Hermite recurrence; weights follow
/// from the polynomial derivative at each root.
pub fn gauss_hermite_rule(points: usize) -> Result<QuadratureRule> {
    if points == 0 || points > MAX_POINTS {
        return Err(Error::Config(format!(
            "quadrature points per dimension must be in 1..={MAX_POINTS}, got {points}"
        )));
    }
    if points == 1 {
        return Ok(QuadratureRule { nodes: vec![0.0], weights: vec![1.0] });
    }

    let jacobi =
        DMatrix::from_fn(
            points,
            points,
            |r, c| {
                if r + 1 == c || c + 1 == r {
                    (r.max(c) as f64 / 2.0).sqrt()
                } else {
                    0.0
                }
            },
        );
    let mut guesses: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().copied().collect();
    guesses.sort_by(|a, b| a.partial_cmp(b).unwrap());

    let mut nodes = Vec::with_capacity(points);
    let mut weights = Vec::with_capacity(points);
    for &x0 in &guesses {
        let mut x = x0;
        let mut deriv = 0.0;
        for _ in 0..100 {
            let (value, d) = hermite_orthonormal(points, x);
            deriv = d;
            let step = value / d;
            x -= step;
            if step.abs() <= 1e-15 * x.abs().max(1.0) {
                break;
            }
        }
        let (_, d) = hermite_orthonormal(points, x);
        if d.is_finite() {
            deriv = d;
        }
        nodes.push(x);
        weights.push(2.0 / (deriv * deriv));
    }

    // Exact symmetry and unit mass.
    for t in 0..points / 2 {
        let s = points - 1 - t;
        let x = 0.5 * (nodes[s] - nodes[t]);
        nodes[t] = -x;
        nodes[s] = x;
        let w = 0.5 * (weights[t] + weights[s]);
        weights[t] = w;
        weights[s] = w;
    }
    if points % 2 == 1 {
        nodes[points / 2] = 0.0;
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(QuadratureRule { nodes, weights })
}

/// Orthonormal Hermite function recurrence; returns `(h_n(x), h_n'(x))` up to
/// the common Gaussian factor.
fn hermite_orthonormal(n: usize, x: f64) -> (f64, f64) {
    let mut p1 = std::f64::consts::PI.powf(-0.25);
    let mut p2 = 0.0;
    for j in 1..=n {
        let p3 = p2;
        p2 = p1;
        let jf = j as f64;
        p1 = x * (2.0 / jf).sqrt() * p2 - ((jf - 1.0) / jf).sqrt() * p3;
    }
    (p1, (2.0 * n as f64).sqrt() * p2)
}

/// Tensor product of `rule` over `q` dimensions, using the default budget.
pub fn tensor_grid(rule: &QuadratureRule, q: usize) -> Result<TensorGrid> {
    tensor_grid_with_budget(rule, q, DEFAULT_GRID_BUDGET)
}

pub fn tensor_grid_with_budget(rule: &QuadratureRule, q: usize, budget: usize) -> Result<TensorGrid> {
    if q == 0 {
        return Err(Error::Config("latent dimension must be at least 1".into()));
    }
    let t = rule.len();
    let count = (t as u128).checked_pow(q as u32).unwrap_or(u128::MAX);
    if count > budget as u128 {
        return Err(Error::Resource(format!(
            "tensor grid with T={t} points per dimension and q={q} needs {count} points, budget is {budget}"
        )));
    }
    let count = count as usize;
    let mut points = Vec::with_capacity(count * q);
    let mut weights = Vec::with_capacity(count);
    let mut index = vec![0usize; q];
    for _ in 0..count {
        let mut w = 1.0;
        for &i in &index {
            points.push(rule.nodes[i]);
            w *= rule.weights[i];
        }
        weights.push(w);
        for d in (0..q).rev() {
            index[d] += 1;
            if index[d] < t {
                break;
            }
            index[d] = 0;
        }
    }
    let log_weights = weights.iter().map(|w| w.ln()).collect();
    Ok(TensorGrid { q, points, weights, log_weights })
}

/// Maps grid points to `sqrt(2) L z_t + mean` where `L L^T = cov`.
///
/// Returns a `len() x q` matrix whose rows, paired with the grid weights,
/// approximate expectations under `N(mean, cov)`.
pub fn transform_nodes(grid: &TensorGrid, mean: &DVector<f64>, cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let q = grid.dim();
    if mean.len() != q || cov.nrows() != q || cov.ncols() != q {
        return Err(Error::Contract(format!("transform_nodes expects a mean of length {q} and a {q}x{q} covariance")));
    }
    let (chol, _) = cholesky_psd(cov, &DEFAULT_JITTER)?;
    let scale = chol * std::f64::consts::SQRT_2;
    let mut out = DMatrix::zeros(grid.len(), q);
    for t in 0..grid.len() {
        let z = grid.point(t);
        for r in 0..q {
            let mut v = mean[r];
            for c in 0..=r {
                v += scale[(r, c)] * z[c];
            }
            out[(t, r)] = v;
        }
    }
    Ok(out)
}

/// `log(sum(exp(values)))` computed by shifting with the maximum.
///
/// Returns negative infinity when every entry is negative infinity.
///
/// # Panics
///
/// Panics on an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "contract violation: log_sum_exp of an empty slice");
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Lower Cholesky factor of `m + delta I` for the first `delta` in `schedule`
/// that yields a positive-definite factorisation.
///
/// Returns the factor together with the jitter that was needed.
pub fn cholesky_psd(m: &DMatrix<f64>, schedule: &[f64]) -> Result<(DMatrix<f64>, f64)> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::Contract(format!("cholesky of a non-square {}x{} matrix", n, m.ncols())));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("cholesky of a matrix with non-finite entries: {m}")));
    }
    for &delta in schedule {
        if let Some(l) = cholesky_lower(m, delta) {
            return Ok((l, delta));
        }
    }
    let diag: Vec<f64> = (0..n).map(|i| m[(i, i)]).collect();
    let asym = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| (m[(i, j)] - m[(j, i)]).abs())
        .fold(0.0, f64::max);
    Err(Error::Numerical(format!(
        "matrix is not positive definite after jitter up to {:e}: diagonal {:?}, asymmetry {:.3e}",
        schedule.last().copied().unwrap_or(0.0),
        diag,
        asym
    )))
}

fn cholesky_lower(m: &DMatrix<f64>, delta: f64) -> Option<DMatrix<f64>> {
    let n = m.nrows();
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)] + delta;
        for c in 0..j {
            d -= l[(j, c)] * l[(j, c)];
        }
        if !(d > 0.0) {
            return None;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = 0.5 * (m[(i, j)] + m[(j, i)]);
            for c in 0..j {
                s -= l[(i, c)] * l[(j, c)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Some(l)
}
