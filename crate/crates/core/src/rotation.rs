//! Oblique oblimin rotation by gradient projection.
//!
//! A rotation is a `q x q` matrix `T` with unit-length columns. The rotated
//! loadings are `Lambda (T^T)^-1` and the implied factor correlation is
//! `Phi = T^T T`, so `Lambda_rot T^T` reproduces the input exactly.

use std::fmt;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Random orthonormal starts tried in addition to the identity.
pub const RANDOM_STARTS: usize = 10;
const MAX_ITER: usize = 1000;
const GRADIENT_TOL: f64 = 1e-8;
const MAX_HALVINGS: usize = 30;

#[derive(Debug, Clone, PartialEq)]
pub struct RotationResult {
    pub rotated_loadings: DMatrix<f64>,
    /// `Phi = T^T T`.
    pub factor_correlation: DMatrix<f64>,
    /// `T`, with `rotated_loadings * T^T = loadings`.
    pub rotation_matrix: DMatrix<f64>,
    pub criterion_value: f64,
    pub converged: bool,
}

impl RotationResult {
    /// Factor scores in the rotated basis, `z T` row by row. Their covariance
    /// is `Phi` when the unrotated scores have identity covariance.
    pub fn rotate_scores(&self, scores: &DMatrix<f64>) -> DMatrix<f64> {
        scores * &self.rotation_matrix
    }
}

/// Oblimin criterion `f = sum(L^2 .* (C L^2 N)) / 4` with `N = 11^T - I` and
/// `C = I - gamma/p 11^T`, and its gradient with respect to `L`.
pub fn oblimin_criterion(rotated: &DMatrix<f64>, gamma: f64) -> (f64, DMatrix<f64>) {
    let (p, q) = rotated.shape();
    let sq = rotated.map(|v| v * v);
    // Row sums minus own entry give L^2 N.
    let mut x = DMatrix::zeros(p, q);
    for j in 0..p {
        let total: f64 = sq.row(j).iter().sum();
        for c in 0..q {
            x[(j, c)] = total - sq[(j, c)];
        }
    }
    if gamma != 0.0 {
        for c in 0..q {
            let mean = x.column(c).sum() / p as f64;
            for j in 0..p {
                x[(j, c)] -= gamma * mean;
            }
        }
    }
    let value = sq.component_mul(&x).sum() / 4.0;
    (value, rotated.component_mul(&x))
}

/// One gradient-projection descent from `start`.
#[derive(Debug, Clone)]
pub struct Descent {
    pub rotation: DMatrix<f64>,
    /// Criterion value at the start and after every accepted step.
    pub trace: Vec<f64>,
    pub converged: bool,
}

fn rotate_with(loadings: &DMatrix<f64>, t: &DMatrix<f64>) -> Option<(DMatrix<f64>, DMatrix<f64>)> {
    let inv = t.clone().try_inverse()?;
    Some((loadings * inv.transpose(), inv))
}

fn normalize_columns(mut t: DMatrix<f64>) -> DMatrix<f64> {
    for mut col in t.column_iter_mut() {
        let norm = col.norm();
        col /= norm;
    }
    t
}

/// Minimizes the oblimin criterion from the rotation `start` (columns are
/// normalized first). Every accepted step strictly lowers the criterion.
pub fn gradient_projection(loadings: &DMatrix<f64>, start: &DMatrix<f64>, gamma: f64) -> Result<Descent> {
    let q = loadings.ncols();
    if start.shape() != (q, q) {
        return Err(Error::Contract(format!("start rotation must be {q}x{q}")));
    }
    let mut t = normalize_columns(start.clone());
    let singular = || Error::Numerical("rotation matrix became singular".into());
    let (l, inv) = rotate_with(loadings, &t).ok_or_else(singular)?;
    let (mut f, gq) = oblimin_criterion(&l, gamma);
    let mut g = -(l.transpose() * gq * &inv).transpose();
    let mut trace = vec![f];
    let mut step = 1.0;
    let mut converged = false;
    for _ in 0..MAX_ITER {
        // Project the gradient onto the tangent space of unit-column matrices.
        let mut gp = g.clone();
        for c in 0..q {
            let dot = t.column(c).dot(&g.column(c));
            let tc = t.column(c) * dot;
            gp.column_mut(c).axpy(-1.0, &tc, 1.0);
        }
        let s = gp.norm();
        if s < GRADIENT_TOL {
            converged = true;
            break;
        }
        step *= 2.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let cand = normalize_columns(&t - &gp * step);
            if let Some((l, inv)) = rotate_with(loadings, &cand) {
                let (fc, gq) = oblimin_criterion(&l, gamma);
                if f - fc > 0.5 * s * s * step {
                    accepted = Some((cand, fc, l, gq, inv));
                    break;
                }
            }
            step /= 2.0;
        }
        let Some((cand, fc, l, gq, inv)) = accepted else {
            // No sufficient decrease at any step length: a stationary point
            // up to rounding.
            converged = s < 1e-6;
            break;
        };
        t = cand;
        f = fc;
        g = -(l.transpose() * gq * &inv).transpose();
        trace.push(f);
    }
    Ok(Descent { rotation: t, trace, converged })
}

fn random_orthonormal(q: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let m = DMatrix::from_fn(q, q, |_, _| StandardNormal.sample(rng));
    m.qr().q()
}

/// Oblique oblimin rotation (`gamma = 0` is quartimin) with the identity and
/// [`RANDOM_STARTS`] random orthonormal starts. The best criterion wins, ties
/// going to the earlier start. Each rotated column is signed so its
/// largest-magnitude entry is positive.
pub fn oblimin_rotate(loadings: &DMatrix<f64>, gamma: f64, seed: u64) -> Result<RotationResult> {
    let (p, q) = loadings.shape();
    if q == 0 || p <= q {
        return Err(Error::Contract(format!("rotation needs p > q >= 1, got p={p}, q={q}")));
    }
    if loadings.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("loadings contain non-finite values".into()));
    }
    let sv = loadings.singular_values();
    let (smax, smin) = (sv.max(), sv.min());
    if !(smin > 1e-10 * smax.max(f64::MIN_POSITIVE)) {
        return Err(Error::Numerical(format!(
            "loading matrix is rank deficient (singular values {smax:.3e} .. {smin:.3e})"
        )));
    }
    if q == 1 {
        return Ok(RotationResult {
            rotated_loadings: loadings.clone(),
            factor_correlation: DMatrix::identity(1, 1),
            rotation_matrix: DMatrix::identity(1, 1),
            criterion_value: 0.0,
            converged: true,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut starts = vec![DMatrix::identity(q, q)];
    starts.extend((0..RANDOM_STARTS).map(|_| random_orthonormal(q, &mut rng)));
    let descents: Vec<Result<Descent>> = starts.par_iter().map(|s| gradient_projection(loadings, s, gamma)).collect();
    let mut best: Option<Descent> = None;
    for d in descents {
        let d = d?;
        let better = match &best {
            None => true,
            Some(b) => d.trace.last() < b.trace.last(),
        };
        if better {
            best = Some(d);
        }
    }
    let best = best.expect("at least one start");

    let mut t = best.rotation;
    let (mut rotated, _) =
        rotate_with(loadings, &t).ok_or_else(|| Error::Numerical("rotation matrix is singular".into()))?;
    for c in 0..q {
        let col = rotated.column(c);
        let lead = col.iter().copied().fold(0.0f64, |a, v| if v.abs() > a.abs() { v } else { a });
        if lead < 0.0 {
            rotated.column_mut(c).neg_mut();
            t.column_mut(c).neg_mut();
        }
    }
    let phi = t.transpose() * &t;
    let factor_correlation =
        DMatrix::from_fn(q, q, |a, b| if a == b { 1.0 } else { 0.5 * (phi[(a, b)] + phi[(b, a)]) });
    Ok(RotationResult {
        criterion_value: *best.trace.last().expect("trace is never empty"),
        rotated_loadings: rotated,
        factor_correlation,
        rotation_matrix: t,
        converged: best.converged,
    })
}

/// Loading table with small entries blanked.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadingTable {
    pub row_names: Vec<String>,
    pub column_names: Vec<String>,
    pub cells: Vec<Vec<Option<f64>>>,
}

/// Keeps entries with `|value| > threshold`.
pub fn loading_display(
    loadings: &DMatrix<f64>,
    row_names: &[String],
    column_names: &[String],
    threshold: f64,
) -> Result<LoadingTable> {
    let (p, q) = loadings.shape();
    if row_names.len() != p || column_names.len() != q {
        return Err(Error::Contract(format!(
            "{} row names and {} column names for a {p}x{q} table",
            row_names.len(),
            column_names.len()
        )));
    }
    let cells =
        (0..p).map(|j| (0..q).map(|c| Some(loadings[(j, c)]).filter(|v| v.abs() > threshold)).collect()).collect();
    Ok(LoadingTable { row_names: row_names.to_vec(), column_names: column_names.to_vec(), cells })
}

impl LoadingTable {
    /// CSV with a leading `variable` column; blanked cells are empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variable");
        for c in &self.column_names {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (name, row) in self.row_names.iter().zip(&self.cells) {
            out.push_str(name);
            for cell in row {
                out.push(',');
                if let Some(v) = cell {
                    out.push_str(&format!("{v:.3}"));
                }
            }
            out.push('\n');
        }
        out
    }
}

impl fmt::Display for LoadingTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name_w = self.row_names.iter().map(String::len).max().unwrap_or(0).max(8);
        let cell_w = self.column_names.iter().map(String::len).max().unwrap_or(0).max(7);
        write!(f, "{:<name_w$}", "")?;
        for c in &self.column_names {
            write!(f, " {c:>cell_w$}")?;
        }
        writeln!(f)?;
        for (name, row) in self.row_names.iter().zip(&self.cells) {
            write!(f, "{name:<name_w$}")?;
            for cell in row {
                match cell {
                    Some(v) => write!(f, " {:>cell_w$}", format!("{v:.3}"))?,
                    None => write!(f, " {:>cell_w$}", "")?,
                }
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;

    #[test]
    fn simple_structure_is_a_zero() {
        let l = dmatrix![0.9, 0.0; 0.8, 0.0; 0.7, 0.0; 0.0, 0.6; 0.0, 0.9];
        let r = oblimin_rotate(&l, 0.0, 3).unwrap();
        assert!(r.criterion_value < 1e-10);
        assert!((&r.factor_correlation - DMatrix::identity(2, 2)).amax() < 1e-6);
        assert!((&r.rotated_loadings - &l).amax() < 1e-6);
    }

    #[test]
    fn single_factor_is_unchanged() {
        let l = dmatrix![0.5; -0.7; 0.2];
        let r = oblimin_rotate(&l, 0.0, 1).unwrap();
        assert_eq!(r.rotated_loadings, l);
        assert_eq!(r.factor_correlation, DMatrix::identity(1, 1));
    }

    #[test]
    fn rank_deficiency_is_numerical() {
        let l = dmatrix![1.0, 2.0; 2.0, 4.0; 3.0, 6.0];
        assert!(matches!(oblimin_rotate(&l, 0.0, 1), Err(Error::Numerical(_))));
    }

    #[test]
    fn display_blanks_small_entries() {
        let l = dmatrix![0.1, -0.25; 0.1, 0.1];
        let rows = vec!["a".to_string(), "b".to_string()];
        let cols = vec!["F1".to_string(), "F2".to_string()];
        let t = loading_display(&l, &rows, &cols, 0.2).unwrap();
        assert_eq!(t.cells, vec![vec![None, Some(-0.25)], vec![None, None]]);
        let full = loading_display(&l, &rows, &cols, 0.0).unwrap();
        assert!(full.cells.iter().flatten().all(Option::is_some));
        assert_eq!(t.to_csv(), "variable,F1,F2\na,,-0.250\nb,,\n");
    }
}
