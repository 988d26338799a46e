//! File formats: count and covariate CSVs, parameter files, result tables
//! and run manifests.
//!
//! Tables are CSV with a header row. Parameters and manifests are TOML, with
//! floats written in shortest round-trip form so a written file reads back
//! to the same bits.

use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariates::{encode_covariates, CovariateSchema, DesignMatrix, LogitCoefficients};
use crate::em::{EStepSummary, FitConfig, FitResult};
use crate::error::{Error, Result};
use crate::model::{CountMatrix, LatentMixture, Loadings, Theta};
use crate::selection::SelectionTable;
use crate::simulation::{ReplicateRecord, StudySummary};

/// The seven annotation counts of the learner-essay corpus, in their usual
/// order.
pub const CANONICAL_COLUMNS: [&str; 7] = ["nORT", "nREG", "nMRC", "nLES", "nMFS", "nCOE", "nSIN"];

fn io_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| io_error(path, e))
}

/// Writes `contents` to `path`, creating parent directories.
pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

/// Parses a count table: a header naming the variables, then one row of
/// non-negative integers per observation.
pub fn parse_counts_csv<R: Read>(reader: R) -> Result<CountMatrix> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(reader);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Data(format!("cannot read header: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Data("count file is empty".into()));
    }
    let p = header.len();
    let mut values = Vec::new();
    let mut n = 0;
    for (r, record) in rdr.records().enumerate() {
        let row = r + 1;
        let record = record.map_err(|e| Error::Data(format!("row {row}: {e}")))?;
        if record.len() != p {
            return Err(Error::Data(format!("row {row} has {} cells, header has {p}", record.len())));
        }
        for (cell, name) in record.iter().zip(&header) {
            let cell = cell.trim();
            let at = || format!("row {row}, column '{name}'");
            if cell.is_empty() {
                return Err(Error::Data(format!("missing count at {}", at())));
            }
            let v: u32 = match cell.parse::<i64>() {
                Ok(v) if v < 0 => return Err(Error::Data(format!("negative count {v} at {}", at()))),
                Ok(v) => u32::try_from(v).map_err(|_| Error::Data(format!("count {v} too large at {}", at())))?,
                Err(_) if cell.parse::<f64>().is_ok() => {
                    return Err(Error::Data(format!("non-integer count '{cell}' at {}", at())))
                }
                Err(_) => return Err(Error::Data(format!("malformed count '{cell}' at {}", at()))),
            };
            values.push(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data("count file has a header but no rows".into()));
    }
    CountMatrix::new(n, p, values, header)
}

pub fn load_counts_csv(path: &Path) -> Result<CountMatrix> {
    let file = fs::File::open(path).map_err(|e| io_error(path, e))?;
    parse_counts_csv(file).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// True when the columns are exactly the canonical annotation set.
pub fn has_canonical_columns(counts: &CountMatrix) -> bool {
    counts.column_names().iter().map(String::as_str).eq(CANONICAL_COLUMNS)
}

/// Reads raw covariate columns by schema name and encodes them with a
/// leading intercept. `expected_rows` guards against a mismatched counts
/// file.
pub fn load_covariates_csv(
    path: &Path,
    schema: &CovariateSchema,
    expected_rows: Option<usize>,
) -> Result<DesignMatrix> {
    let file = fs::File::open(path).map_err(|e| io_error(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Data(format!("{}: cannot read header: {e}", path.display())))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let columns = schema
        .covariates
        .iter()
        .map(|c| {
            header
                .iter()
                .position(|h| *h == c.name)
                .ok_or_else(|| Error::Data(format!("{}: covariate column '{}' not found", path.display(), c.name)))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut records = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("{}: row {}: {e}", path.display(), r + 1)))?;
        records.push(columns.iter().map(|&c| record.get(c).unwrap_or("").to_string()).collect());
    }
    if let Some(n) = expected_rows {
        if records.len() != n {
            return Err(Error::Data(format!(
                "{}: {} covariate rows but {n} count rows",
                path.display(),
                records.len()
            )));
        }
    }
    encode_covariates(&records, schema)
}

pub fn load_schema(path: &Path) -> Result<CovariateSchema> {
    let schema: CovariateSchema =
        toml::from_str(&read_file(path)?).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    schema.validate()?;
    Ok(schema)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ComponentFile {
    weight: f64,
    mean: Vec<f64>,
    covariance: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsFile {
    p: usize,
    q: usize,
    k: usize,
    /// Optional names of the `p` count variables.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    variables: Option<Vec<String>>,
    intercepts: Vec<f64>,
    /// `p` rows of `q` loadings.
    loadings: Vec<Vec<f64>>,
    /// `p` rows of `q + 1` flags, intercept first; `true` entries are held
    /// at zero.
    fixed: Vec<Vec<bool>>,
    components: Vec<ComponentFile>,
    /// `k - 1` rows of logit coefficients when weights depend on covariates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    logit: Option<Vec<Vec<f64>>>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix_from_rows(rows: &[Vec<f64>], ncols: usize, what: &str) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Data(format!("{what}: every row needs {ncols} entries")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

/// Serializes parameters to TOML.
pub fn theta_to_toml(theta: &Theta) -> String {
    theta_to_toml_named(theta, None)
}

/// Serializes parameters to TOML together with the variable names.
pub fn theta_to_toml_named(theta: &Theta, variables: Option<&[String]>) -> String {
    let (p, q) = (theta.p(), theta.q());
    let mask = theta.loadings.mask();
    let file = ParamsFile {
        p,
        q,
        k: theta.k(),
        variables: variables.map(<[String]>::to_vec),
        intercepts: theta.loadings.intercepts.iter().copied().collect(),
        loadings: rows_of(&theta.loadings.loadings),
        fixed: mask.chunks(q + 1).map(<[bool]>::to_vec).collect(),
        components: (0..theta.k())
            .map(|i| ComponentFile {
                weight: theta.mixture.weights[i],
                mean: theta.mixture.means[i].iter().copied().collect(),
                covariance: rows_of(&theta.mixture.covariances[i]),
            })
            .collect(),
        logit: theta.mixture.logit.as_ref().map(|l| rows_of(&l.eta)),
    };
    toml::to_string(&file).expect("parameter file is always representable")
}

/// Parses parameters written by [`theta_to_toml`] and validates them.
pub fn theta_from_toml(text: &str) -> Result<Theta> {
    theta_from_toml_named(text).map(|(theta, _)| theta)
}

/// Like [`theta_from_toml`], also returning the variable names if present.
pub fn theta_from_toml_named(text: &str) -> Result<(Theta, Option<Vec<String>>)> {
    let f: ParamsFile = toml::from_str(text).map_err(|e| Error::Data(format!("parameter file: {e}")))?;
    let (p, q, k) = (f.p, f.q, f.k);
    if f.intercepts.len() != p || f.loadings.len() != p || f.fixed.len() != p {
        return Err(Error::Data(format!("parameter file: expected {p} intercepts, loading rows and mask rows")));
    }
    if f.variables.as_ref().is_some_and(|v| v.len() != p) {
        return Err(Error::Data(format!("parameter file: expected {p} variable names")));
    }
    if f.components.len() != k {
        return Err(Error::Data(format!("parameter file: expected {k} components, found {}", f.components.len())));
    }
    if f.fixed.iter().any(|r| r.len() != q + 1) {
        return Err(Error::Data(format!("parameter file: mask rows need {} flags", q + 1)));
    }
    let loadings = Loadings::with_mask(
        DVector::from_vec(f.intercepts),
        matrix_from_rows(&f.loadings, q, "loadings")?,
        f.fixed.concat(),
    )?;
    let mut means = Vec::with_capacity(k);
    let mut covariances = Vec::with_capacity(k);
    for (i, c) in f.components.iter().enumerate() {
        if c.mean.len() != q || c.covariance.len() != q {
            return Err(Error::Data(format!("parameter file: component {} has the wrong dimension", i + 1)));
        }
        means.push(DVector::from_column_slice(&c.mean));
        covariances.push(matrix_from_rows(&c.covariance, q, "covariance")?);
    }
    let logit = match f.logit {
        Some(rows) => {
            let cols = rows.first().map_or(1, Vec::len);
            Some(LogitCoefficients { eta: matrix_from_rows(&rows, cols, "logit")? })
        }
        None => None,
    };
    let theta = Theta {
        loadings,
        mixture: LatentMixture {
            weights: DVector::from_iterator(k, f.components.iter().map(|c| c.weight)),
            logit,
            means,
            covariances,
        },
    };
    theta.validate()?;
    Ok((theta, f.variables))
}

pub fn write_params(path: &Path, theta: &Theta) -> Result<()> {
    write_file(path, &theta_to_toml(theta))
}

pub fn write_params_named(path: &Path, theta: &Theta, variables: Option<&[String]>) -> Result<()> {
    write_file(path, &theta_to_toml_named(theta, variables))
}

pub fn read_params(path: &Path) -> Result<Theta> {
    read_params_named(path).map(|(theta, _)| theta)
}

pub fn read_params_named(path: &Path) -> Result<(Theta, Option<Vec<String>>)> {
    theta_from_toml_named(&read_file(path)?).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn float_list(out: &mut String, values: impl IntoIterator<Item = f64>) {
    for v in values {
        let _ = write!(out, ",{v}");
    }
}

pub fn trace_csv(trace: &[f64]) -> String {
    let mut out = String::from("iteration,loglik\n");
    for (i, v) in trace.iter().enumerate() {
        let _ = writeln!(out, "{i},{v}");
    }
    out
}

/// One row per observation: factor scores `z1..zq`, the 1-based label and
/// the responsibilities `r1..rk`.
pub fn scores_csv(estep: &EStepSummary, labels: &[usize], scores: &DMatrix<f64>) -> String {
    let (q, k) = (scores.ncols(), estep.k);
    let mut header: Vec<String> = (1..=q).map(|d| format!("z{d}")).collect();
    header.push("label".into());
    header.extend((1..=k).map(|i| format!("r{i}")));
    let mut out = header.join(",");
    out.push('\n');
    for l in 0..estep.n {
        let mut line = String::new();
        float_list(&mut line, scores.row(l).iter().copied());
        let _ = write!(line, ",{}", labels[l]);
        float_list(&mut line, (0..k).map(|i| estep.resp(l, i)));
        out.push_str(&line[1..]);
        out.push('\n');
    }
    out
}

pub fn criteria_csv(fit: &FitResult) -> String {
    format!(
        "loglik,h,aic,bic,iterations,converged,seed\n{},{},{},{},{},{},{}\n",
        fit.loglik(),
        fit.h,
        fit.aic,
        fit.bic,
        fit.iterations,
        fit.converged,
        fit.seed
    )
}

/// Cluster sizes from the hard labels alongside the estimated weights.
pub fn clusters_csv(fit: &FitResult) -> String {
    let k = fit.theta.k();
    let mut sizes = vec![0usize; k];
    for &l in &fit.labels {
        sizes[l - 1] += 1;
    }
    let mut out = String::from("cluster,size,weight\n");
    for i in 0..k {
        let _ = writeln!(out, "{},{},{}", i + 1, sizes[i], fit.theta.mixture.weights[i]);
    }
    out
}

/// Writes `params.toml`, `trace.csv`, `scores.csv`, `criteria.csv` and
/// `clusters.csv` under `dir`.
pub fn write_fit_outputs(dir: &Path, fit: &FitResult, variables: Option<&[String]>) -> Result<()> {
    write_params_named(&dir.join("params.toml"), &fit.theta, variables)?;
    write_file(&dir.join("trace.csv"), &trace_csv(&fit.loglik_trace))?;
    write_file(&dir.join("scores.csv"), &scores_csv(&fit.estep, &fit.labels, &fit.factor_scores))?;
    write_file(&dir.join("criteria.csv"), &criteria_csv(fit))?;
    write_file(&dir.join("clusters.csv"), &clusters_csv(fit))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn selection_csv(table: &SelectionTable) -> String {
    let mut out = String::from("q,k,seeds,loglik,h,aic,bic,converged_fraction,unconverged,chosen_aic,chosen_bic\n");
    for r in &table.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.q,
            r.k,
            r.seed_count,
            opt(r.best_loglik),
            r.h,
            opt(r.aic),
            opt(r.bic),
            r.converged_fraction,
            r.unconverged,
            table.chosen_by_aic == (r.q, r.k),
            table.chosen_by_bic == (r.q, r.k)
        );
    }
    out
}

fn pair(v: Option<(usize, usize)>) -> String {
    v.map(|(q, k)| format!("{q}:{k}")).unwrap_or_default()
}

/// Per-replicate audit records.
pub fn replicates_csv(records: &[ReplicateRecord]) -> String {
    let mut out =
        String::from("replicate,data_seed,ari,misclassification,loglik,converged,bic_choice,aic_choice,error\n");
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.replicate,
            r.data_seed,
            opt(r.ari),
            opt(r.misclassification),
            opt(r.loglik),
            r.converged,
            pair(r.chosen_by_bic),
            pair(r.chosen_by_aic),
            r.error.as_deref().unwrap_or("").replace([',', '\n'], ";")
        );
    }
    out
}

/// Metric summaries and selection shares of a study.
pub fn study_summary_csv(summary: &StudySummary) -> String {
    let mut out = String::from("design,statistic,count,median,q1,q3,mean,sd\n");
    for (name, s) in [("ari", &summary.ari), ("misclassification", &summary.misclassification)] {
        if let Some(s) = s {
            let _ = writeln!(
                out,
                "{},{name},{},{},{},{},{},{}",
                summary.design, s.count, s.median, s.q1, s.q3, s.mean, s.sd
            );
        }
    }
    for (crit, choices) in [("bic", &summary.bic_choices), ("aic", &summary.aic_choices)] {
        for (&(q, k), &count) in choices {
            let _ = writeln!(out, "{},{crit}_q{q}_k{k},{count},,,,,", summary.design);
        }
    }
    let _ = writeln!(out, "{},failures,{},,,,,", summary.design, summary.failures);
    out
}

/// Dataset and true labels of a simulation, one row per observation.
pub fn counts_csv(counts: &CountMatrix) -> String {
    let mut out = counts.column_names().join(",");
    out.push('\n');
    for l in 0..counts.nrows() {
        let row: Vec<String> = counts.row(l).iter().map(u32::to_string).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Reproducibility record written next to every run's outputs. Timing lives
/// only here so the primary outputs stay byte-identical across runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub arguments: Vec<String>,
    pub started_unix_seconds: u64,
    pub elapsed_seconds: f64,
    pub threads: usize,
    pub outputs: Vec<String>,
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let text = toml::to_string(manifest).map_err(|e| Error::Io(format!("manifest: {e}")))?;
    write_file(path, &text)
}

/// Grid settings of `select`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectSettings {
    pub q: Vec<usize>,
    pub k: Vec<usize>,
    pub seeds: usize,
}

impl Default for SelectSettings {
    fn default() -> Self {
        SelectSettings { q: vec![1, 2], k: vec![1, 2, 3, 4], seeds: 5 }
    }
}

/// Optional run configuration file; command-line flags take precedence.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub fit: FitConfig,
    pub select: SelectSettings,
    pub covariate_schema: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("run configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&read_file(path)?).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.fit.validate()?;
        if self.select.q.is_empty() || self.select.k.is_empty() || self.select.seeds == 0 {
            return Err(Error::Config("select needs non-empty q and k ranges and at least one seed".into()));
        }
        if self.select.q.contains(&0) || self.select.k.contains(&0) {
            return Err(Error::Config("q and k must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::fixture_q2k3;

    #[test]
    fn counts_parse_and_diagnose() {
        let ok = "nORT,nREG,nMRC,nLES,nMFS,nCOE,nSIN\n1,2,3,4,5,6,7\n0,0,0,0,0,0,1\n";
        let c = parse_counts_csv(ok.as_bytes()).unwrap();
        assert_eq!((c.nrows(), c.ncols()), (2, 7));
        assert!(has_canonical_columns(&c));

        let neg = parse_counts_csv("a,b\n1,-1\n".as_bytes()).unwrap_err();
        assert!(matches!(&neg, Error::Data(m) if m.contains("row 1") && m.contains("'b'")), "{neg}");
        let frac = parse_counts_csv("a,b\n1,2.5\n".as_bytes()).unwrap_err();
        assert!(matches!(&frac, Error::Data(m) if m.contains("non-integer")), "{frac}");
        assert!(parse_counts_csv("a,b\n1,\n".as_bytes()).is_err());
        assert!(parse_counts_csv("".as_bytes()).is_err());
        assert!(parse_counts_csv("a,b\n".as_bytes()).is_err());
    }

    #[test]
    fn params_round_trip_exactly() {
        let theta = fixture_q2k3();
        let back = theta_from_toml(&theta_to_toml(&theta)).unwrap();
        assert_eq!(back, theta);
        let names: Vec<String> = (1..=10).map(|j| format!("v{j}")).collect();
        let (back, vars) = theta_from_toml_named(&theta_to_toml_named(&theta, Some(&names))).unwrap();
        assert_eq!(back, theta);
        assert_eq!(vars.as_deref(), Some(&names[..]));
    }

    #[test]
    fn run_config_rejects_unknown_keys() {
        assert!(RunConfig::from_toml("[fit]\npoints = 6\n").is_ok());
        assert!(matches!(RunConfig::from_toml("[fit]\npointz = 6\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml("colour = 1\n"), Err(Error::Config(_))));
    }
}
