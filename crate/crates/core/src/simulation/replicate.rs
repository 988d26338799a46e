//! Replicate studies over simulated datasets.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;

use super::metrics::{adjusted_rand_index, misclassification_rate};
use super::{published_theta, simulate_dataset};
use crate::em::{fit_best_of, FitConfig};
use crate::error::{Error, Result};
use crate::model::{ModelDims, Theta};
use crate::selection::grid_search;

/// Largest tolerated share of failed replicates.
const MAX_FAILURE_SHARE: f64 = 0.2;

/// What is done with each simulated dataset.
#[derive(Debug, Clone, PartialEq)]
pub enum Study {
    /// Fit the generating `(q, k)`, best of the seeds by log-likelihood.
    Fit,
    /// Grid search over all `(q, k)` pairs.
    Select { q_range: Vec<usize>, k_range: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationDesign {
    pub name: String,
    pub theta: Theta,
    pub n: usize,
    pub replicates: usize,
    /// Fit seeds `1..=seeds_per_replicate` are used for every replicate.
    pub seeds_per_replicate: usize,
    pub master_seed: u64,
    pub study: Study,
}

impl SimulationDesign {
    pub fn new(name: impl Into<String>, theta: Theta, n: usize) -> Self {
        SimulationDesign {
            name: name.into(),
            theta,
            n,
            replicates: 100,
            seeds_per_replicate: 10,
            master_seed: 1,
            study: Study::Fit,
        }
    }

    /// One of the published designs: `q` in {1, 2}, `k` in {2, 3, 6},
    /// `p` in {10, 50}.
    pub fn published(k: usize, q: usize, n: usize, p: usize) -> Result<Self> {
        let theta = published_theta(k, q, p)?;
        Ok(SimulationDesign::new(format!("k{k}-q{q}-n{n}-p{p}"), theta, n))
    }

    pub fn validate(&self) -> Result<()> {
        self.theta.validate()?;
        ModelDims::new(self.n, self.theta.p(), self.theta.q(), self.theta.k(), 0).validate()?;
        if self.replicates == 0 || self.seeds_per_replicate == 0 {
            return Err(Error::Config("replicates and seeds per replicate must be positive".into()));
        }
        if let Study::Select { q_range, k_range } = &self.study {
            if q_range.is_empty() || k_range.is_empty() {
                return Err(Error::Config("selection study needs non-empty q and k ranges".into()));
            }
        }
        Ok(())
    }
}

/// Data seed of replicate `r`.
pub fn replicate_seed(master: u64, r: usize) -> u64 {
    master ^ r as u64
}

/// Outcome of one replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub data_seed: u64,
    /// `None` when the replicate failed or the index is undefined (k = 1).
    pub ari: Option<f64>,
    pub misclassification: Option<f64>,
    pub loglik: Option<f64>,
    pub converged: bool,
    pub chosen_by_bic: Option<(usize, usize)>,
    pub chosen_by_aic: Option<(usize, usize)>,
    /// Estimated intercepts (column 0) and loadings, column signs aligned
    /// with the generating loadings.
    pub estimates: Option<DMatrix<f64>>,
    pub error: Option<String>,
}

impl ReplicateRecord {
    fn failed(replicate: usize, data_seed: u64, e: &Error) -> Self {
        ReplicateRecord {
            replicate,
            data_seed,
            ari: None,
            misclassification: None,
            loglik: None,
            converged: false,
            chosen_by_bic: None,
            chosen_by_aic: None,
            estimates: None,
            error: Some(e.to_string()),
        }
    }
}

/// Location and spread of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub count: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub mean: f64,
    pub sd: f64,
}

impl Summary {
    /// `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len() as f64;
        let mean = sorted.iter().sum::<f64>() / n;
        let sd = if sorted.len() > 1 {
            (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Summary {
            count: sorted.len(),
            median: quantile(&sorted, 0.5),
            q1: quantile(&sorted, 0.25),
            q3: quantile(&sorted, 0.75),
            mean,
            sd,
        })
    }
}

/// Linear-interpolation quantile of sorted data (the usual "type 7" rule).
pub fn quantile(sorted: &[f64], prob: f64) -> f64 {
    assert!(!sorted.is_empty(), "contract violation: quantile of an empty sample");
    let h = (sorted.len() - 1) as f64 * prob.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Aggregates over the replicates of a study.
#[derive(Debug, Clone, PartialEq)]
pub struct StudySummary {
    pub design: String,
    pub replicates: usize,
    pub failures: usize,
    pub ari: Option<Summary>,
    pub misclassification: Option<Summary>,
    /// How often each `(q, k)` was chosen.
    pub bic_choices: BTreeMap<(usize, usize), usize>,
    pub aic_choices: BTreeMap<(usize, usize), usize>,
    /// Entrywise mean and standard deviation of the aligned estimates.
    pub estimate_mean: Option<DMatrix<f64>>,
    pub estimate_sd: Option<DMatrix<f64>>,
}

impl StudySummary {
    /// Share of successful replicates in which BIC chose `(q, k)`.
    pub fn bic_share(&self, q: usize, k: usize) -> f64 {
        let ok = (self.replicates - self.failures).max(1) as f64;
        *self.bic_choices.get(&(q, k)).unwrap_or(&0) as f64 / ok
    }

    pub fn aic_share(&self, q: usize, k: usize) -> f64 {
        let ok = (self.replicates - self.failures).max(1) as f64;
        *self.aic_choices.get(&(q, k)).unwrap_or(&0) as f64 / ok
    }
}

/// Flips estimated loading columns to agree in sign with `truth` and
/// returns `(intercepts | loadings)`.
fn aligned_estimates(est: &Theta, truth: &Theta) -> DMatrix<f64> {
    let (p, q) = (est.p(), est.q());
    let mut out = DMatrix::zeros(p, q + 1);
    out.column_mut(0).copy_from(&est.loadings.intercepts);
    for c in 0..q {
        let col = est.loadings.loadings.column(c);
        let sign = if col.dot(&truth.loadings.loadings.column(c)) < 0.0 { -1.0 } else { 1.0 };
        out.column_mut(c + 1).copy_from(&(col * sign));
    }
    out
}

fn run_one(design: &SimulationDesign, cfg: &FitConfig, r: usize) -> ReplicateRecord {
    let data_seed = replicate_seed(design.master_seed, r);
    let seeds: Vec<u64> = (1..=design.seeds_per_replicate as u64).collect();
    let outcome = (|| -> Result<ReplicateRecord> {
        let data = simulate_dataset(&design.theta, design.n, data_seed)?;
        let truth = &design.theta;
        let k_true = truth.k();
        let score = |labels: &[usize]| -> Result<(Option<f64>, Option<f64>)> {
            if k_true == 1 {
                return Ok((None, None));
            }
            Ok((Some(adjusted_rand_index(&data.labels, labels)?), Some(misclassification_rate(&data.labels, labels)?)))
        };
        match &design.study {
            Study::Fit => {
                let dims = ModelDims::new(design.n, truth.p(), truth.q(), k_true, 0);
                let (fit, _) = fit_best_of(&data.counts, dims, cfg, &seeds, None)?;
                let (ari, misclassification) = score(&fit.labels)?;
                Ok(ReplicateRecord {
                    replicate: r,
                    data_seed,
                    ari,
                    misclassification,
                    loglik: Some(fit.loglik()),
                    converged: fit.converged,
                    chosen_by_bic: None,
                    chosen_by_aic: None,
                    estimates: Some(aligned_estimates(&fit.theta, truth)),
                    error: None,
                })
            }
            Study::Select { q_range, k_range } => {
                let table = grid_search(&data.counts, q_range, k_range, &seeds, cfg, None)?;
                let best = table.fit_for(table.chosen_by_bic.0, table.chosen_by_bic.1);
                let (ari, misclassification) = match best {
                    Some(f) => score(&f.labels)?,
                    None => (None, None),
                };
                Ok(ReplicateRecord {
                    replicate: r,
                    data_seed,
                    ari,
                    misclassification,
                    loglik: best.map(|f| f.loglik()),
                    converged: best.is_some_and(|f| f.converged),
                    chosen_by_bic: Some(table.chosen_by_bic),
                    chosen_by_aic: Some(table.chosen_by_aic),
                    estimates: None,
                    error: None,
                })
            }
        }
    })();
    outcome.unwrap_or_else(|e| ReplicateRecord::failed(r, data_seed, &e))
}

/// Runs every replicate of `design` (in parallel) and summarises them in
/// replicate order. More than a fifth of failed replicates is an error.
pub fn run_replicates(design: &SimulationDesign, cfg: &FitConfig) -> Result<(StudySummary, Vec<ReplicateRecord>)> {
    design.validate()?;
    cfg.validate()?;
    let records: Vec<ReplicateRecord> =
        (0..design.replicates).into_par_iter().map(|r| run_one(design, cfg, r)).collect();
    let summary = summarize(design, &records);
    if summary.failures as f64 > MAX_FAILURE_SHARE * design.replicates as f64 {
        let first = records.iter().find_map(|r| r.error.clone()).unwrap_or_default();
        return Err(Error::Numerical(format!(
            "{} of {} replicates of {} failed (first: {first})",
            summary.failures, design.replicates, design.name
        )));
    }
    Ok((summary, records))
}

/// Summary statistics of a set of replicate records.
pub fn summarize(design: &SimulationDesign, records: &[ReplicateRecord]) -> StudySummary {
    let failures = records.iter().filter(|r| r.error.is_some()).count();
    let ari: Vec<f64> = records.iter().filter_map(|r| r.ari).collect();
    let misc: Vec<f64> = records.iter().filter_map(|r| r.misclassification).collect();
    let mut bic_choices = BTreeMap::new();
    let mut aic_choices = BTreeMap::new();
    for r in records {
        if let Some(c) = r.chosen_by_bic {
            *bic_choices.entry(c).or_insert(0) += 1;
        }
        if let Some(c) = r.chosen_by_aic {
            *aic_choices.entry(c).or_insert(0) += 1;
        }
    }
    let estimates: Vec<&DMatrix<f64>> = records.iter().filter_map(|r| r.estimates.as_ref()).collect();
    let (estimate_mean, estimate_sd) = if estimates.is_empty() {
        (None, None)
    } else {
        let (rows, cols) = estimates[0].shape();
        let m = estimates.len() as f64;
        let mean = estimates.iter().fold(DMatrix::zeros(rows, cols), |acc, e| acc + *e) / m;
        let var = estimates.iter().fold(DMatrix::zeros(rows, cols), |acc, e| {
            let d = *e - &mean;
            acc + d.component_mul(&d)
        }) / (m - 1.0).max(1.0);
        (Some(mean), Some(var.map(f64::sqrt)))
    };
    StudySummary {
        design: design.name.clone(),
        replicates: records.len(),
        failures,
        ari: Summary::of(&ari),
        misclassification: Summary::of(&misc),
        bic_choices,
        aic_choices,
        estimate_mean,
        estimate_sd,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn type7_quantiles() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.25), 1.75);
        assert_eq!(quantile(&v, 0.75), 3.25);
        assert_eq!(quantile(&[7.0], 0.3), 7.0);
        let s = Summary::of(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!((s.median, s.mean, s.sd), (2.0, 2.0, 1.0));
    }
}
