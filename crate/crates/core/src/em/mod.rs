//! Generalized EM estimation.
//!
//! Each iteration runs an E-step at the current parameters, one guarded
//! Newton step on the intercepts and loadings, closed-form updates of the
//! latent mixture and a restandardization. The mixture update is accepted
//! only if it does not lower the expected complete-data log-likelihood of
//! the quadrature-discretised model, which makes the observed
//! log-likelihood trace non-decreasing.

mod estep;
mod init;
mod mstep;
mod standardize;

pub use estep::{assign_clusters, e_step, EStepSummary};
pub use init::initialize;
pub use mstep::{loadings_gradient, loadings_objective, m_step_loadings, m_step_mixture};
pub use standardize::{restandardize, restandardize_masked, standardize_latent};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariates::{average_weights, fit_logit_weights, DesignMatrix, LogitCoefficients};
use crate::error::{Error, Result};
use crate::model::{CountMatrix, LatentMixture, ModelDims, NodeTable, PreparedCounts, Theta};
use crate::quadrature::{gauss_hermite_rule, tensor_grid_with_budget, TensorGrid, DEFAULT_GRID_BUDGET};
use crate::selection::{aic, bic, count_params};

/// Halvings of the mixture update before falling back to the loadings-only
/// step.
const MIXTURE_BACKTRACKS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum InitStrategy {
    /// Principal-factor loadings and Ward clusters of the factor scores.
    #[serde(rename = "classical-fa+ward")]
    FactorWard,
    #[serde(rename = "random")]
    Random,
}

impl std::str::FromStr for InitStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classical-fa+ward" | "fa-ward" => Ok(InitStrategy::FactorWard),
            "random" => Ok(InitStrategy::Random),
            other => {
                Err(Error::Config(format!("unknown init strategy '{other}' (expected classical-fa+ward or random)")))
            }
        }
    }
}

/// Treatment of the first intercept.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FirstIntercept {
    /// Held at zero; the latent means are updated under the zero-mean
    /// constraint so no intercept shift is needed.
    Fixed,
    /// Estimated like the other intercepts; adds one parameter.
    Free,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    /// Gauss-Hermite points per latent dimension.
    pub points: usize,
    pub max_iter: usize,
    /// Relative log-likelihood change that stops the iterations.
    pub epsilon: f64,
    pub newton_steps_per_m: usize,
    /// Maximum step halvings in the loading update.
    pub newton_damping: usize,
    pub seed: u64,
    pub init: InitStrategy,
    pub first_intercept: FirstIntercept,
    /// Upper bound on `points^q`.
    pub grid_budget: usize,
    /// Fresh starts after a component collapses.
    pub max_restarts: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            points: 8,
            max_iter: 500,
            epsilon: 1e-6,
            newton_steps_per_m: 1,
            newton_damping: 20,
            seed: 1,
            init: InitStrategy::FactorWard,
            first_intercept: FirstIntercept::Fixed,
            grid_budget: DEFAULT_GRID_BUDGET,
            max_restarts: 5,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.points == 0 || self.max_iter == 0 || self.newton_steps_per_m == 0 || self.newton_damping == 0 {
            return Err(Error::Config(
                "points, max_iter, newton_steps_per_m and newton_damping must be positive".into(),
            ));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::Config(format!("epsilon must lie in (0, 1), got {}", self.epsilon)));
        }
        Ok(())
    }

    /// Tensor grid for `q` latent dimensions under this configuration.
    pub fn grid(&self, q: usize) -> Result<TensorGrid> {
        tensor_grid_with_budget(&gauss_hermite_rule(self.points)?, q, self.grid_budget)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub theta: Theta,
    /// Observed log-likelihood at the start of every iteration.
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    /// Parameter updates performed.
    pub iterations: usize,
    /// 1-based cluster labels.
    pub labels: Vec<usize>,
    /// `n x q` posterior means of the factors.
    pub factor_scores: DMatrix<f64>,
    pub aic: f64,
    pub bic: f64,
    /// Number of free parameters.
    pub h: usize,
    pub estep: EStepSummary,
    /// Seed of the start that produced this fit.
    pub seed: u64,
}

impl FitResult {
    pub fn loglik(&self) -> f64 {
        *self.loglik_trace.last().expect("trace holds at least one value")
    }
}

fn check_inputs(counts: &CountMatrix, dims: &ModelDims, design: Option<&DesignMatrix>) -> Result<()> {
    dims.validate()?;
    if counts.nrows() != dims.n || counts.ncols() != dims.p {
        return Err(Error::Contract(format!(
            "counts are {}x{}, dims say {}x{}",
            counts.nrows(),
            counts.ncols(),
            dims.n,
            dims.p
        )));
    }
    match design {
        Some(x) if x.nrows() != dims.n || x.ncols() != dims.m + 1 => {
            Err(Error::Contract(format!("design is {}x{}, expected {}x{}", x.nrows(), x.ncols(), dims.n, dims.m + 1)))
        }
        None if dims.m > 0 => Err(Error::Contract(format!("m={} needs a design matrix", dims.m))),
        _ => Ok(()),
    }
}

/// Fits the model from a start chosen by `cfg.init` and `cfg.seed`. A
/// collapsed component triggers a restart from a derived seed, up to
/// `cfg.max_restarts` times.
pub fn fit(counts: &CountMatrix, dims: ModelDims, cfg: &FitConfig, design: Option<&DesignMatrix>) -> Result<FitResult> {
    cfg.validate()?;
    check_inputs(counts, &dims, design)?;
    let grid = cfg.grid(dims.q)?;
    let mut seed = cfg.seed;
    let mut attempt = 0;
    loop {
        let outcome = initialize(counts, dims, cfg.init, cfg.first_intercept, seed, design)
            .and_then(|theta| fit_from(counts, theta, &grid, cfg, design));
        match outcome {
            Ok(mut res) => {
                res.seed = seed;
                return Ok(res);
            }
            Err(Error::DegenerateComponent { component, mass }) if attempt < cfg.max_restarts => {
                log::debug!("component {component} collapsed (mass {mass:.3e}) from seed {seed}; restarting");
                attempt += 1;
                seed = restart_seed(cfg.seed, attempt);
            }
            Err(e) => return Err(e),
        }
    }
}

fn restart_seed(seed: u64, attempt: usize) -> u64 {
    seed ^ (attempt as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Runs the EM iterations from `theta`, which must already satisfy the
/// structural constraints.
pub fn fit_from(
    counts: &CountMatrix,
    theta: Theta,
    grid: &TensorGrid,
    cfg: &FitConfig,
    design: Option<&DesignMatrix>,
) -> Result<FitResult> {
    cfg.validate()?;
    theta.validate()?;
    if counts.ncols() != theta.p() {
        return Err(Error::Contract(format!("counts have {} columns, theta has p={}", counts.ncols(), theta.p())));
    }
    let data = PreparedCounts::new(counts);
    let mut theta = theta;
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let estep = loop {
        let table = NodeTable::build(&theta, grid)?;
        let estep = estep::e_step_prepared(&data, &theta, &table, grid, design)?;
        let ll = estep.loglik();
        let done = trace.last().is_some_and(|&prev| (ll - prev).abs() / (prev.abs() + 1.0) < cfg.epsilon);
        trace.push(ll);
        if done {
            converged = true;
            break estep;
        }
        if iterations == cfg.max_iter {
            break estep;
        }
        iterations += 1;
        theta = gem_update(&estep, &theta, grid, cfg, design)?;
    };

    let dims = ModelDims::new(data.n, theta.p(), theta.q(), theta.k(), theta.m());
    let mut h = count_params(dims.p, dims.q, dims.k, dims.m)?;
    if !theta.loadings.is_fixed(0, 0) {
        h += 1;
    }
    let ll = *trace.last().expect("at least one E-step ran");
    Ok(FitResult {
        labels: assign_clusters(&estep),
        factor_scores: estep.factor_scores(),
        aic: aic(ll, h),
        bic: bic(ll, h, dims.n),
        h,
        theta,
        loglik_trace: trace,
        converged,
        iterations,
        estep,
        seed: cfg.seed,
    })
}

/// One generalized EM update from the E-step at `theta`.
fn gem_update(
    estep: &EStepSummary,
    theta: &Theta,
    grid: &TensorGrid,
    cfg: &FitConfig,
    design: Option<&DesignMatrix>,
) -> Result<Theta> {
    let loadings = m_step_loadings(estep, theta, grid, cfg)?;
    let fallback = Theta { loadings, mixture: theta.mixture.clone() };
    let floor = mstep::surrogate(estep, &fallback, grid, design)?;

    let (weights, logit) = mstep::update_weights(estep, theta, design)?;
    let stats = mstep::mixture_stats(estep)?;
    let constrained = theta.loadings.is_fixed(0, 0);
    let (means, covariances) = if constrained {
        mstep::constrained_moments(&stats, &weights, &theta.mixture.covariances)?
    } else {
        let mut covs = Vec::with_capacity(theta.k());
        for (mu, s2) in stats.mean.iter().zip(&stats.second) {
            covs.push(s2 - mu * mu.transpose());
        }
        (stats.mean.clone(), covs)
    };
    let target = LatentMixture { weights, logit, means, covariances };

    let mut s = 1.0;
    for _ in 0..=MIXTURE_BACKTRACKS {
        let mixture = if s == 1.0 { target.clone() } else { interpolate(&theta.mixture, &target, s, design) };
        let trial = Theta { loadings: fallback.loadings.clone(), mixture };
        let standardized = if constrained { restandardize_masked(&trial) } else { restandardize(&trial) };
        if let Ok(candidate) = standardized {
            if mstep::surrogate(estep, &candidate, grid, design)? >= floor {
                return Ok(candidate);
            }
        }
        s *= 0.5;
    }
    Ok(fallback)
}

/// `(1 - s) a + s b` componentwise; with covariates the logit coefficients
/// are interpolated and the average weights recomputed.
fn interpolate(a: &LatentMixture, b: &LatentMixture, s: f64, design: Option<&DesignMatrix>) -> LatentMixture {
    let mix = |x: &DMatrix<f64>, y: &DMatrix<f64>| x * (1.0 - s) + y * s;
    let mixv = |x: &DVector<f64>, y: &DVector<f64>| x * (1.0 - s) + y * s;
    let logit = match (&a.logit, &b.logit) {
        (Some(x), Some(y)) => Some(LogitCoefficients { eta: mix(&x.eta, &y.eta) }),
        _ => None,
    };
    let weights = match (&logit, design) {
        (Some(c), Some(x)) => average_weights(c, x),
        _ => mixv(&a.weights, &b.weights),
    };
    LatentMixture {
        weights,
        logit,
        means: a.means.iter().zip(&b.means).map(|(x, y)| mixv(x, y)).collect(),
        covariances: a.covariances.iter().zip(&b.covariances).map(|(x, y)| mix(x, y)).collect(),
    }
}

/// Newton update of the logit coefficients of the mixing weights.
pub fn m_step_eta(estep: &EStepSummary, design: &DesignMatrix, start: &LogitCoefficients) -> Result<LogitCoefficients> {
    Ok(fit_logit_weights(&estep.responsibilities(), design, start)?.coefs)
}

/// Best fit by log-likelihood over several seeds, preferring converged fits;
/// ties go to the earlier seed. Returns the best fit and the number of seeds
/// whose fit converged.
pub fn fit_best_of(
    counts: &CountMatrix,
    dims: ModelDims,
    cfg: &FitConfig,
    seeds: &[u64],
    design: Option<&DesignMatrix>,
) -> Result<(FitResult, usize)> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut best: Option<FitResult> = None;
    let mut converged = 0;
    let mut last_err = None;
    for &seed in seeds {
        let c = FitConfig { seed, ..cfg.clone() };
        match fit(counts, dims, &c, design) {
            Ok(res) => {
                converged += res.converged as usize;
                let better = match &best {
                    None => true,
                    Some(b) => (res.converged, res.loglik()) > (b.converged, b.loglik()),
                };
                if better {
                    best = Some(res);
                }
            }
            Err(e) => {
                log::debug!("fit with seed {seed} failed: {e}");
                last_err = Some(e);
            }
        }
    }
    match best {
        Some(b) => Ok((b, converged)),
        None => Err(last_err.expect("a failure was recorded")),
    }
}
