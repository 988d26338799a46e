//! Covariate-dependent mixing proportions through a multinomial logit.
//!
//! `pi_i(x) = exp(eta_i' x) / (1 + sum_{i' < k} exp(eta_i'' x))` with the last
//! component as the baseline (`eta_k = 0`).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quadrature::log_sum_exp;

/// Entry-wise cap applied to logit coefficients under separation.
pub const COEFFICIENT_CAP: f64 = 30.0;

/// Covariates with a leading intercept column, `n x (m + 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    n: usize,
    cols: usize,
    values: Vec<f64>,
    column_names: Vec<String>,
}

impl DesignMatrix {
    /// Validates that the first column is all ones and every entry is finite.
    pub fn new(n: usize, cols: usize, values: Vec<f64>, column_names: Vec<String>) -> Result<Self> {
        if values.len() != n * cols || column_names.len() != cols || cols == 0 {
            return Err(Error::Contract(format!(
                "design with {} values and {} names for {n}x{cols}",
                values.len(),
                column_names.len()
            )));
        }
        for l in 0..n {
            if values[l * cols] != 1.0 {
                return Err(Error::Data(format!("design row {} does not start with the intercept 1", l + 1)));
            }
            if let Some(c) = values[l * cols..(l + 1) * cols].iter().position(|v| !v.is_finite()) {
                return Err(Error::Data(format!("design row {} column {} is not finite", l + 1, c + 1)));
            }
        }
        Ok(DesignMatrix { n, cols, values, column_names })
    }

    /// Prepends the intercept column to raw covariate rows.
    pub fn with_intercept(rows: &[Vec<f64>], names: &[&str]) -> Result<Self> {
        let m = names.len();
        let mut values = Vec::with_capacity(rows.len() * (m + 1));
        for r in rows {
            if r.len() != m {
                return Err(Error::Contract("ragged covariate rows".into()));
            }
            values.push(1.0);
            values.extend_from_slice(r);
        }
        let mut column_names = vec!["(intercept)".to_string()];
        column_names.extend(names.iter().map(|s| s.to_string()));
        DesignMatrix::new(rows.len(), m + 1, values, column_names)
    }

    /// Intercept-only design with `n` rows.
    pub fn intercept_only(n: usize) -> Self {
        DesignMatrix { n, cols: 1, values: vec![1.0; n], column_names: vec!["(intercept)".into()] }
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn ncols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, l: usize) -> &[f64] {
        &self.values[l * self.cols..(l + 1) * self.cols]
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }
}

/// `(k - 1) x (m + 1)` logit coefficients; the last component is the baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitCoefficients {
    pub eta: DMatrix<f64>,
}

impl LogitCoefficients {
    pub fn zeros(k: usize, cols: usize) -> Self {
        LogitCoefficients { eta: DMatrix::zeros(k.saturating_sub(1), cols) }
    }

    pub fn nrows(&self) -> usize {
        self.eta.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.eta.ncols()
    }

    pub fn k(&self) -> usize {
        self.eta.nrows() + 1
    }
}

/// `log pi_i(x)` for all `k` components, computed in log space.
pub fn log_mixture_weights(coefs: &LogitCoefficients, x: &[f64]) -> Vec<f64> {
    let k = coefs.k();
    let mut scores = Vec::with_capacity(k);
    for i in 0..k - 1 {
        scores.push(coefs.eta.row(i).iter().zip(x).map(|(a, b)| a * b).sum::<f64>());
    }
    scores.push(0.0);
    let norm = log_sum_exp(&scores);
    scores.iter().map(|s| s - norm).collect()
}

/// Mixing proportions at covariate vector `x`.
pub fn mixture_weights_logit(coefs: &LogitCoefficients, x: &[f64]) -> Vec<f64> {
    log_mixture_weights(coefs, x).into_iter().map(f64::exp).collect()
}

/// Average of `pi(x_l)` over the rows of the design.
pub fn average_weights(coefs: &LogitCoefficients, design: &DesignMatrix) -> DVector<f64> {
    let k = coefs.k();
    let mut avg = DVector::zeros(k);
    for l in 0..design.nrows() {
        for (i, w) in mixture_weights_logit(coefs, design.row(l)).into_iter().enumerate() {
            avg[i] += w;
        }
    }
    avg / design.nrows() as f64
}

/// Result of the logit M-step.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitFit {
    pub coefs: LogitCoefficients,
    pub objective: f64,
    pub iterations: usize,
    /// Set when the responsibilities are separated by the covariates: either
    /// a coefficient hit [`COEFFICIENT_CAP`] or the objective has no
    /// curvature left along the direction the coefficients were moving.
    pub separated: bool,
}

/// `sum_l sum_i r_li log pi_i(x_l)`.
pub fn logit_objective(resp: &[f64], design: &DesignMatrix, coefs: &LogitCoefficients) -> f64 {
    let k = coefs.k();
    (0..design.nrows())
        .map(|l| {
            let lw = log_mixture_weights(coefs, design.row(l));
            (0..k)
                .map(|i| {
                    let r = resp[l * k + i];
                    if r > 0.0 {
                        r * lw[i]
                    } else {
                        0.0
                    }
                })
                .sum::<f64>()
        })
        .sum()
}

/// Gradient and negative Hessian of [`logit_objective`], with coefficients
/// flattened component-major.
fn logit_derivatives(resp: &[f64], design: &DesignMatrix, coefs: &LogitCoefficients) -> (DVector<f64>, DMatrix<f64>) {
    let k = coefs.k();
    let c = design.ncols();
    let dim = (k - 1) * c;
    let mut grad = DVector::<f64>::zeros(dim);
    let mut neg_hess = DMatrix::<f64>::zeros(dim, dim);
    for l in 0..design.nrows() {
        let x = design.row(l);
        let w = mixture_weights_logit(coefs, x);
        let s: f64 = resp[l * k..(l + 1) * k].iter().sum();
        for i in 0..k - 1 {
            let g = resp[l * k + i] - s * w[i];
            for a in 0..c {
                grad[i * c + a] += g * x[a];
            }
            for i2 in 0..k - 1 {
                let h = s * w[i] * (if i == i2 { 1.0 } else { 0.0 } - w[i2]);
                if h == 0.0 {
                    continue;
                }
                for a in 0..c {
                    for b in 0..c {
                        neg_hess[(i * c + a, i2 * c + b)] += h * x[a] * x[b];
                    }
                }
            }
        }
    }
    (grad, neg_hess)
}

/// Damped Newton-Raphson maximisation of the expected log mixing proportions.
///
/// `resp` holds the responsibilities (`n x k`, row-major, probabilities).
/// Iterates until the gradient norm drops below `1e-8` or 50 iterations.
/// Steps are halved until the objective does not decrease, except once the
/// predicted gain is below rounding error, where the full step is taken.
pub fn fit_logit_weights(resp: &[f64], design: &DesignMatrix, start: &LogitCoefficients) -> Result<LogitFit> {
    let k = start.k();
    let c = design.ncols();
    let n = design.nrows();
    if resp.len() != n * k || start.ncols() != c {
        return Err(Error::Contract("responsibilities, design and coefficients disagree in shape".into()));
    }
    let dim = (k - 1) * c;
    let mut coefs = start.clone();
    let mut objective = logit_objective(resp, design, &coefs);
    if dim == 0 {
        return Ok(LogitFit { coefs, objective, iterations: 0, separated: false });
    }
    let mut capped = false;
    let mut iterations = 0;
    let (mut grad, mut neg_hess) = logit_derivatives(resp, design, &coefs);
    while iterations < 50 && grad.norm() >= 1e-8 {
        iterations += 1;
        let direction = match neg_hess.clone().cholesky() {
            Some(ch) => ch.solve(&grad),
            None => {
                let mut ridged = neg_hess.clone();
                for d in 0..dim {
                    ridged[(d, d)] += 1e-6;
                }
                match ridged.cholesky() {
                    Some(ch) => ch.solve(&grad),
                    None => {
                        return Err(Error::Numerical(
                            "multinomial-logit Hessian is singular after ridge 1e-6 (separated categories?)".into(),
                        ))
                    }
                }
            }
        };
        let negligible = grad.dot(&direction) <= 1e-12 * (objective.abs() + 1.0);
        let mut step = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let mut trial = coefs.clone();
            let mut hit_cap = false;
            for i in 0..k - 1 {
                for a in 0..c {
                    let v = coefs.eta[(i, a)] + step * direction[i * c + a];
                    hit_cap |= v.abs() > COEFFICIENT_CAP;
                    trial.eta[(i, a)] = v.clamp(-COEFFICIENT_CAP, COEFFICIENT_CAP);
                }
            }
            let value = logit_objective(resp, design, &trial);
            if value >= objective || negligible {
                moved = trial != coefs;
                capped |= hit_cap;
                coefs = trial;
                objective = value;
                break;
            }
            step *= 0.5;
        }
        if !moved || negligible {
            break;
        }
        (grad, neg_hess) = logit_derivatives(resp, design, &coefs);
    }
    let (_, neg_hess) = logit_derivatives(resp, design, &coefs);
    let flat = SymmetricEigen::new(neg_hess).eigenvalues.min() < 1e-9 * n as f64;
    let separated = capped || flat;
    if separated {
        log::warn!(
            "mixing-weight coefficients diverge (cap {COEFFICIENT_CAP}); the responsibilities look separated by the covariates"
        );
    }
    Ok(LogitFit { coefs, objective, iterations, separated })
}

/// How a covariate enters the design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovariateKind {
    /// Reference-coded dummies, one per non-reference level.
    Categorical,
    /// Each level mapped to a numeric value (class midpoints).
    MidpointNumeric,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateSpec {
    pub name: String,
    pub kind: CovariateKind,
    pub levels: Vec<String>,
    /// Reference level for dummies; the first level when absent.
    #[serde(default)]
    pub reference: Option<String>,
    /// Numeric value per level for [`CovariateKind::MidpointNumeric`].
    #[serde(default)]
    pub midpoints: Vec<f64>,
    /// Raw spellings mapped onto declared levels.
    #[serde(default)]
    pub aliases: BTreeMap<String, String>,
}

impl CovariateSpec {
    pub fn reference_level(&self) -> &str {
        self.reference.as_deref().unwrap_or(&self.levels[0])
    }

    fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::Config(format!("covariate '{}' declares no levels", self.name)));
        }
        match self.kind {
            CovariateKind::Categorical => {
                if !self.levels.iter().any(|l| l == self.reference_level()) {
                    return Err(Error::Config(format!(
                        "reference level '{}' of covariate '{}' is not among its levels",
                        self.reference_level(),
                        self.name
                    )));
                }
            }
            CovariateKind::MidpointNumeric => {
                if self.midpoints.len() != self.levels.len() {
                    return Err(Error::Config(format!(
                        "covariate '{}' has {} levels but {} midpoints",
                        self.name,
                        self.levels.len(),
                        self.midpoints.len()
                    )));
                }
            }
        }
        for target in self.aliases.values() {
            if !self.levels.contains(target) {
                return Err(Error::Config(format!("alias target '{target}' of '{}' is not a level", self.name)));
            }
        }
        Ok(())
    }

    /// Design columns produced by this covariate.
    pub fn encoded_names(&self) -> Vec<String> {
        match self.kind {
            CovariateKind::Categorical => self
                .levels
                .iter()
                .filter(|l| l.as_str() != self.reference_level())
                .map(|l| format!("{}={}", self.name, l))
                .collect(),
            CovariateKind::MidpointNumeric => vec![self.name.clone()],
        }
    }

    fn level_index(&self, raw: &str) -> Option<usize> {
        let value = raw.trim();
        let value = self.aliases.get(value).map(String::as_str).unwrap_or(value);
        self.levels.iter().position(|l| l == value)
    }
}

/// Ordered list of covariates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovariateSchema {
    pub covariates: Vec<CovariateSpec>,
}

impl CovariateSchema {
    pub fn validate(&self) -> Result<()> {
        self.covariates.iter().try_for_each(CovariateSpec::validate)
    }

    /// Predictor columns excluding the intercept.
    pub fn encoded_width(&self) -> usize {
        self.covariates.iter().map(|c| c.encoded_names().len()).sum()
    }

    /// Socio-biographical questionnaire covariates of the annotation study:
    /// seven categorical items plus books read per year as class midpoints.
    pub fn questionnaire() -> Self {
        let cat = |name: &str, levels: &[&str]| CovariateSpec {
            name: name.into(),
            kind: CovariateKind::Categorical,
            levels: levels.iter().map(|s| s.to_string()).collect(),
            reference: None,
            midpoints: vec![],
            aliases: BTreeMap::new(),
        };
        let mut social = cat("social_class", &["Low", "Middle", "High", "NA"]);
        social.aliases.insert("Don't know-don't answer".into(), "NA".into());
        CovariateSchema {
            covariates: vec![
                cat("family_origin", &["Italy", "Mixed", "Abroad"]),
                cat("diploma", &["Lyceum", "Professional", "Technical"]),
                cat("campus", &["South", "Central", "North"]),
                cat("gender", &["Female", "Male", "Other"]),
                cat("study_area", &["Healthcare", "Scientific", "Social", "Humanities"]),
                cat("worker", &["No", "Yes"]),
                social,
                CovariateSpec {
                    name: "books_read".into(),
                    kind: CovariateKind::MidpointNumeric,
                    levels: ["None", "Less than five", "Between five and ten", "More than ten"]
                        .iter()
                        .map(|s| s.to_string())
                        .collect(),
                    reference: None,
                    midpoints: vec![0.0, 2.5, 7.5, 15.0],
                    aliases: BTreeMap::new(),
                },
            ],
        }
    }
}

/// Encodes raw records (one string per covariate, in schema order) into a
/// design matrix with a leading intercept.
pub fn encode_covariates(records: &[Vec<String>], schema: &CovariateSchema) -> Result<DesignMatrix> {
    schema.validate()?;
    let m = schema.encoded_width();
    let mut values = Vec::with_capacity(records.len() * (m + 1));
    for (l, rec) in records.iter().enumerate() {
        if rec.len() != schema.covariates.len() {
            return Err(Error::Data(format!(
                "row {} has {} covariates, schema declares {}",
                l + 1,
                rec.len(),
                schema.covariates.len()
            )));
        }
        values.push(1.0);
        for (spec, raw) in schema.covariates.iter().zip(rec) {
            let idx = spec
                .level_index(raw)
                .ok_or_else(|| Error::Data(format!("row {} column '{}': unknown level '{}'", l + 1, spec.name, raw)))?;
            match spec.kind {
                CovariateKind::Categorical => {
                    for level in spec.levels.iter().filter(|lv| lv.as_str() != spec.reference_level()) {
                        values.push(if *level == spec.levels[idx] { 1.0 } else { 0.0 });
                    }
                }
                CovariateKind::MidpointNumeric => values.push(spec.midpoints[idx]),
            }
        }
    }
    let mut names = vec!["(intercept)".to_string()];
    names.extend(schema.covariates.iter().flat_map(|c| c.encoded_names()));
    DesignMatrix::new(records.len(), m + 1, values, names)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn weight_examples() {
        let zero = LogitCoefficients::zeros(4, 3);
        for w in mixture_weights_logit(&zero, &[1.0, 0.3, -2.0]) {
            assert!((w - 0.25).abs() < 1e-15);
        }
        let c = LogitCoefficients { eta: dmatrix![0.0] };
        assert_eq!(mixture_weights_logit(&c, &[1.0]), vec![0.5, 0.5]);
        let c = LogitCoefficients { eta: dmatrix![3f64.ln()] };
        let w = mixture_weights_logit(&c, &[1.0]);
        assert!((w[0] - 0.75).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn intercept_only_matches_closed_form() {
        let n = 200;
        let k = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut resp = Vec::with_capacity(n * k);
        for _ in 0..n {
            let raw: Vec<f64> = (0..k).map(|_| rng.gen::<f64>() + 0.05).collect();
            let s: f64 = raw.iter().sum();
            resp.extend(raw.iter().map(|v| v / s));
        }
        let x = DesignMatrix::intercept_only(n);
        let fit = fit_logit_weights(&resp, &x, &LogitCoefficients::zeros(k, 1)).unwrap();
        let avg: Vec<f64> = (0..k).map(|i| (0..n).map(|l| resp[l * k + i]).sum::<f64>() / n as f64).collect();
        for i in 0..k - 1 {
            let expected = (avg[i] / avg[k - 1]).ln();
            assert!((fit.coefs.eta[(i, 0)] - expected).abs() < 1e-8, "{} vs {expected}", fit.coefs.eta[(i, 0)]);
        }
        assert!(!fit.separated);
    }

    #[test]
    fn separation_is_flagged() {
        let n = 50;
        let resp: Vec<f64> = (0..n).flat_map(|_| [1.0, 0.0]).collect();
        let x = DesignMatrix::intercept_only(n);
        let fit = fit_logit_weights(&resp, &x, &LogitCoefficients::zeros(2, 1)).unwrap();
        assert!(fit.separated);
        assert!(fit.coefs.eta[(0, 0)] <= COEFFICIENT_CAP && fit.coefs.eta[(0, 0)] > 10.0);
    }

    #[test]
    fn questionnaire_schema_has_sixteen_predictors() {
        let schema = CovariateSchema::questionnaire();
        schema.validate().unwrap();
        assert_eq!(schema.encoded_width(), 16);
        let rec: Vec<String> =
            ["Italy", "Lyceum", "North", "Male", "Social", "Yes", "Don't know-don't answer", "More than ten"]
                .iter()
                .map(|s| s.to_string())
                .collect();
        let x = encode_covariates(std::slice::from_ref(&rec), &schema).unwrap();
        assert_eq!(x.ncols(), 17);
        assert_eq!(x.row(0)[16], 15.0);
        let na_col = x.column_names().iter().position(|c| c == "social_class=NA").unwrap();
        assert_eq!(x.row(0)[na_col], 1.0);

        let mut rec2 = rec.clone();
        rec2[7] = "Between five and ten".into();
        assert_eq!(encode_covariates(&[rec2], &schema).unwrap().row(0)[16], 7.5);
        let mut rec3 = rec;
        rec3[7] = "None".into();
        assert_eq!(encode_covariates(&[rec3.clone()], &schema).unwrap().row(0)[16], 0.0);
        rec3[2] = "East".into();
        let err = encode_covariates(&[rec3], &schema).unwrap_err();
        assert!(err.to_string().contains("row 1") && err.to_string().contains("campus"));
    }

    #[test]
    fn reference_level_must_exist() {
        let mut schema = CovariateSchema::questionnaire();
        schema.covariates[0].reference = Some("Mars".into());
        assert!(matches!(schema.validate(), Err(Error::Config(_))));
    }
}
