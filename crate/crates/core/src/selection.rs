//! Parameter counts, information criteria and the `(q, k)` grid search.

use rayon::prelude::*;

use crate::covariates::DesignMatrix;
use crate::em::{fit_best_of, FitConfig, FitResult};
use crate::error::{Error, Result};
use crate::model::{CountMatrix, ModelDims};

/// Largest number of factors allowed by Ledermann's bound,
/// `floor((2p + 1 - sqrt(8p + 1)) / 2)`.
pub fn ledermann_max_q(p: usize) -> usize {
    // Integer form of the bound; the condition is monotone in q.
    (1..p).take_while(|&q| ledermann_ok(p, q)).last().unwrap_or(0)
}

/// `q <= (2p + 1 - sqrt(8p + 1)) / 2` holds iff `(p - q)^2 >= p + q` with
/// `q < p`.
fn ledermann_ok(p: usize, q: usize) -> bool {
    q < p && (p - q) * (p - q) >= p + q
}

/// Number of free parameters:
/// `p(q+1) - (q(q-1)/2 + 1) + q(q+1)/2 (k-1) + q(k-1) + (k-1)(m+1)`.
pub fn count_params(p: usize, q: usize, k: usize, m: usize) -> Result<usize> {
    if k == 0 || q == 0 || q > ledermann_max_q(p) {
        return Err(Error::Contract(format!("invalid dimensions p={p}, q={q}, k={k} for a parameter count")));
    }
    Ok(p * (q + 1) - (q * (q - 1) / 2 + 1) + q * (q + 1) / 2 * (k - 1) + q * (k - 1) + (k - 1) * (m + 1))
}

pub fn aic(loglik: f64, h: usize) -> f64 {
    -2.0 * loglik + 2.0 * h as f64
}

pub fn bic(loglik: f64, h: usize, n: usize) -> f64 {
    -2.0 * loglik + h as f64 * (n as f64).ln()
}

/// One `(q, k)` cell of a grid search.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectionRow {
    pub q: usize,
    pub k: usize,
    pub seed_count: usize,
    /// `None` when every seed failed.
    pub best_loglik: Option<f64>,
    pub h: usize,
    pub aic: Option<f64>,
    pub bic: Option<f64>,
    pub converged_fraction: f64,
    /// Set when the retained fit did not converge.
    pub unconverged: bool,
}

#[derive(Debug, Clone)]
pub struct SelectionTable {
    pub rows: Vec<SelectionRow>,
    pub chosen_by_aic: (usize, usize),
    pub chosen_by_bic: (usize, usize),
    /// Retained fit of every cell that produced one, in row order.
    pub fits: Vec<Option<FitResult>>,
}

impl SelectionTable {
    pub fn fit_for(&self, q: usize, k: usize) -> Option<&FitResult> {
        let idx = self.rows.iter().position(|r| r.q == q && r.k == k)?;
        self.fits[idx].as_ref()
    }
}

/// Fits every `(q, k)` pair with the given seeds, keeps the best fit of each
/// cell by log-likelihood and chooses the cells minimising AIC and BIC.
///
/// Cells are independent and run in parallel; results are merged in grid
/// order so the table does not depend on scheduling. Unconverged fits
/// compete only when no cell converged.
pub fn grid_search(
    counts: &CountMatrix,
    q_range: &[usize],
    k_range: &[usize],
    seeds: &[u64],
    cfg: &FitConfig,
    design: Option<&DesignMatrix>,
) -> Result<SelectionTable> {
    if seeds.is_empty() {
        return Err(Error::Config("grid search needs at least one seed".into()));
    }
    let bound = ledermann_max_q(counts.ncols());
    if let Some(&q) = q_range.iter().find(|&&q| q > bound || q == 0) {
        return Err(Error::Config(format!("q={q} outside 1..={bound} allowed for p={}", counts.ncols())));
    }
    if k_range.is_empty() || q_range.is_empty() || k_range.contains(&0) {
        return Err(Error::Config("q and k ranges must be non-empty with k >= 1".into()));
    }
    let m = design.map_or(0, |x| x.ncols() - 1);
    let cells: Vec<(usize, usize)> = q_range.iter().flat_map(|&q| k_range.iter().map(move |&k| (q, k))).collect();
    let outcomes: Vec<Result<(FitResult, usize)>> = cells
        .par_iter()
        .map(|&(q, k)| {
            let dims = ModelDims::new(counts.nrows(), counts.ncols(), q, k, m);
            fit_best_of(counts, dims, cfg, seeds, design)
        })
        .collect();

    let mut rows = Vec::with_capacity(cells.len());
    let mut fits = Vec::with_capacity(cells.len());
    for (&(q, k), outcome) in cells.iter().zip(outcomes) {
        let mut h = count_params(counts.ncols(), q, k, m)?;
        match outcome {
            Ok((res, n_conv)) => {
                h = res.h;
                rows.push(SelectionRow {
                    q,
                    k,
                    seed_count: seeds.len(),
                    best_loglik: Some(res.loglik()),
                    h,
                    aic: Some(res.aic),
                    bic: Some(res.bic),
                    converged_fraction: n_conv as f64 / seeds.len() as f64,
                    unconverged: !res.converged,
                });
                fits.push(Some(res));
            }
            Err(e) => {
                log::warn!("every seed failed for q={q}, k={k}: {e}");
                rows.push(SelectionRow {
                    q,
                    k,
                    seed_count: seeds.len(),
                    best_loglik: None,
                    h,
                    aic: None,
                    bic: None,
                    converged_fraction: 0.0,
                    unconverged: true,
                });
                fits.push(None);
            }
        }
    }
    let chosen_by_aic =
        choose(&rows, |r| r.aic).ok_or_else(|| Error::Numerical("every cell of the grid search failed".into()))?;
    let chosen_by_bic = choose(&rows, |r| r.bic).expect("a cell with AIC also has BIC");
    Ok(SelectionTable { rows, chosen_by_aic, chosen_by_bic, fits })
}

fn choose(rows: &[SelectionRow], value: impl Fn(&SelectionRow) -> Option<f64>) -> Option<(usize, usize)> {
    let pick = |converged_only: bool| {
        rows.iter()
            .filter(|r| !converged_only || !r.unconverged)
            .filter_map(|r| value(r).map(|v| (v, r.q, r.k)))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, q, k)| (q, k))
    };
    pick(true).or_else(|| pick(false))
}
