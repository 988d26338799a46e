use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use countmix::covariates::CovariateSchema;
use countmix::em::{assign_clusters, e_step, fit_best_of};
use countmix::io::{
    self, load_counts_csv, load_covariates_csv, load_schema, read_params_named, selection_csv, write_file,
    write_fit_outputs, write_manifest, write_params_named, Manifest, RunConfig, CANONICAL_COLUMNS,
};
use countmix::model::check_identifiability;
use countmix::rotation::loading_display;
use countmix::simulation::{design_theta, run_replicates, simulate_dataset, SimulationDesign, Study};
use countmix::{
    grid_search, oblimin_rotate, CountMatrix, DesignMatrix, Error, FirstIntercept, FitConfig, ModelDims, Result, Theta,
};
use nalgebra::DMatrix;

use crate::{
    CheckArgs, Command, Criterion, DataArgs, EstimationArgs, FitArgs, RotateArgs, ScoresArgs, SelectArgs, SimulateArgs,
    StudyKind,
};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Fit(a) => fit(a),
        Command::Select(a) => select(a),
        Command::Simulate(a) => simulate(a),
        Command::Rotate(a) => rotate(a),
        Command::Scores(a) => scores(a),
        Command::Check(a) => check(a),
    }
}

/// Collects the files of one invocation and writes its manifest.
struct Recorder {
    command: &'static str,
    seed: u64,
    dir: PathBuf,
    started: Instant,
    started_unix: u64,
    outputs: Vec<String>,
}

impl Recorder {
    fn new(command: &'static str, seed: u64, dir: &Path) -> Self {
        Recorder {
            command,
            seed,
            dir: dir.to_path_buf(),
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            outputs: Vec::new(),
        }
    }

    fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        write_file(&self.dir.join(name), contents)?;
        self.outputs.push(name.to_string());
        Ok(())
    }

    fn record(&mut self, prefix: &str, names: &[&str]) {
        self.outputs.extend(names.iter().map(|s| format!("{prefix}{s}")));
    }

    fn finish(self) -> Result<()> {
        let manifest = Manifest {
            command: self.command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            arguments: std::env::args().skip(1).collect(),
            started_unix_seconds: self.started_unix,
            elapsed_seconds: self.started.elapsed().as_secs_f64(),
            threads: rayon::current_num_threads(),
            outputs: self.outputs,
        };
        write_manifest(&self.dir.join("manifest.toml"), &manifest)
    }
}

const FIT_OUTPUTS: [&str; 5] = ["params.toml", "trace.csv", "scores.csv", "criteria.csv", "clusters.csv"];

/// Parses `1,2`, `1..5` (inclusive) or a mix such as `1,3..5`.
pub fn parse_range(text: &str) -> Result<Vec<usize>> {
    let bad = || Error::Config(format!("cannot parse range '{text}' (expected e.g. 1,2 or 1..5)"));
    let mut out = Vec::new();
    for part in text.split(',').map(str::trim) {
        if let Some((lo, hi)) = part.split_once("..") {
            let lo: usize = lo.trim().parse().map_err(|_| bad())?;
            let hi: usize = hi.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
            if hi < lo {
                return Err(bad());
            }
            out.extend(lo..=hi);
        } else {
            out.push(part.parse().map_err(|_| bad())?);
        }
    }
    if out.is_empty() {
        return Err(bad());
    }
    Ok(out)
}

fn load_run_config(est: &EstimationArgs) -> Result<RunConfig> {
    let mut run = match &est.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let fit = &mut run.fit;
    if let Some(v) = est.points {
        fit.points = v;
    }
    if let Some(v) = est.max_iter {
        fit.max_iter = v;
    }
    if let Some(v) = est.epsilon {
        fit.epsilon = v;
    }
    if let Some(v) = &est.init {
        fit.init = v.parse()?;
    }
    if est.free_first_intercept {
        fit.first_intercept = FirstIntercept::Free;
    }
    run.validate()?;
    Ok(run)
}

fn load_data(data: &DataArgs, config_schema: Option<&Path>) -> Result<(CountMatrix, Option<DesignMatrix>)> {
    let counts = load_counts_csv(&data.counts)?;
    let Some(path) = &data.covariates else {
        return Ok((counts, None));
    };
    let schema = match (data.schema.as_deref(), config_schema) {
        (Some("questionnaire"), _) | (None, None) => CovariateSchema::questionnaire(),
        (Some(file), _) => load_schema(Path::new(file))?,
        (None, Some(file)) => load_schema(file)?,
    };
    let design = load_covariates_csv(path, &schema, Some(counts.nrows()))?;
    Ok((counts, Some(design)))
}

fn output_dir(flag: Option<PathBuf>, run: &RunConfig) -> Result<PathBuf> {
    flag.or_else(|| run.output.clone())
        .ok_or_else(|| Error::Config("an output directory is required (--out or `output` in the config)".into()))
}

fn fit(a: FitArgs) -> Result<()> {
    let run = load_run_config(&a.estimation)?;
    let (counts, design) = load_data(&a.data, run.covariate_schema.as_deref())?;
    let out = output_dir(a.out, &run)?;
    let seed = a.seed.unwrap_or(run.fit.seed);
    if a.starts == 0 {
        return Err(Error::Config("--starts must be positive".into()));
    }
    let m = design.as_ref().map_or(0, |x| x.ncols() - 1);
    let dims = ModelDims::new(counts.nrows(), counts.ncols(), a.q, a.k, m);
    dims.validate()?;
    let seeds: Vec<u64> = (0..a.starts as u64).map(|i| seed.wrapping_add(i)).collect();

    let mut rec = Recorder::new("fit", seed, &out);
    let (res, _) = fit_best_of(&counts, dims, &run.fit, &seeds, design.as_ref())?;
    if !res.converged {
        log::warn!("fit stopped after {} iterations without converging", res.iterations);
    }
    write_fit_outputs(&out, &res, Some(counts.column_names()))?;
    rec.record("", &FIT_OUTPUTS);
    println!(
        "q={} k={} loglik={:.4} aic={:.4} bic={:.4} iterations={} converged={}",
        a.q,
        a.k,
        res.loglik(),
        res.aic,
        res.bic,
        res.iterations,
        res.converged
    );
    rec.finish()
}

fn select(a: SelectArgs) -> Result<()> {
    let run = load_run_config(&a.estimation)?;
    let (counts, design) = load_data(&a.data, run.covariate_schema.as_deref())?;
    let out = output_dir(a.out, &run)?;
    let q_range = a.q.as_deref().map(parse_range).transpose()?.unwrap_or_else(|| run.select.q.clone());
    let k_range = a.k.as_deref().map(parse_range).transpose()?.unwrap_or_else(|| run.select.k.clone());
    let seed = a.seed.unwrap_or(run.fit.seed);
    let starts = a.seeds.unwrap_or(run.select.seeds);
    if starts == 0 {
        return Err(Error::Config("--seeds must be positive".into()));
    }
    let seeds: Vec<u64> = (0..starts as u64).map(|i| seed.wrapping_add(i)).collect();

    let mut rec = Recorder::new("select", seed, &out);
    let table = grid_search(&counts, &q_range, &k_range, &seeds, &run.fit, design.as_ref())?;
    rec.write("selection.csv", &selection_csv(&table))?;
    let (q, k) = match a.criterion {
        Criterion::Aic => table.chosen_by_aic,
        Criterion::Bic => table.chosen_by_bic,
    };
    if let Some(best) = table.fit_for(q, k) {
        write_fit_outputs(&out.join("chosen"), best, Some(counts.column_names()))?;
        rec.record("chosen/", &FIT_OUTPUTS);
    }
    println!(
        "AIC chooses q={} k={}; BIC chooses q={} k={}",
        table.chosen_by_aic.0, table.chosen_by_aic.1, table.chosen_by_bic.0, table.chosen_by_bic.1
    );
    rec.finish()
}

/// Design parameters from a name such as `fixture-q2k3` or `k6-q1`.
fn parse_design(name: &str, p: usize) -> Result<Theta> {
    let bad = || Error::Config(format!("unknown design '{name}' (expected fixture-q2k3 or kK-qQ, e.g. k6-q1)"));
    if name == "fixture-q2k3" {
        return design_theta(3, 2, p);
    }
    let (k, q) = name.split_once('-').ok_or_else(bad)?;
    let k: usize = k.strip_prefix('k').and_then(|v| v.parse().ok()).ok_or_else(bad)?;
    let q: usize = q.strip_prefix('q').and_then(|v| v.parse().ok()).ok_or_else(bad)?;
    design_theta(k, q, p)
}

/// Scores `{prefix}1..` followed by the label, one row per observation.
fn labelled_scores_csv(prefix: &str, labels: &[usize], scores: &DMatrix<f64>) -> String {
    let mut out: String = (1..=scores.ncols()).map(|d| format!("{prefix}{d},")).collect();
    out.push_str("label\n");
    for (l, label) in labels.iter().enumerate() {
        for v in scores.row(l).iter() {
            let _ = write!(out, "{v},");
        }
        let _ = writeln!(out, "{label}");
    }
    out
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let theta = parse_design(&a.design, a.p)?;
    ModelDims::new(a.n, a.p, theta.q(), theta.k(), 0).validate()?;
    let mut rec = Recorder::new("simulate", a.seed, &a.out);

    let Some(replicates) = a.replicates else {
        let data = simulate_dataset(&theta, a.n, a.seed)?;
        let counts = if a.p == CANONICAL_COLUMNS.len() {
            let names = CANONICAL_COLUMNS.iter().map(|s| s.to_string()).collect();
            CountMatrix::new(a.n, a.p, data.counts.values().to_vec(), names)?
        } else {
            data.counts
        };
        rec.write("counts.csv", &io::counts_csv(&counts))?;
        rec.write("truth.csv", &labelled_scores_csv("z", &data.labels, &data.scores))?;
        write_params_named(&a.out.join("params.toml"), &theta, Some(counts.column_names()))?;
        rec.record("", &["params.toml"]);
        return rec.finish();
    };

    let study = match a.study {
        StudyKind::Fit => Study::Fit,
        StudyKind::Select => Study::Select {
            q_range: a.q.as_deref().map_or(Ok(vec![1, 2]), parse_range)?,
            k_range: a.k.as_deref().map_or(Ok(vec![1, 2, 3, 4]), parse_range)?,
        },
    };
    let design = SimulationDesign {
        replicates,
        seeds_per_replicate: a.fit_seeds,
        master_seed: a.seed,
        study,
        ..SimulationDesign::new(format!("{}-n{}-p{}", a.design, a.n, a.p), theta, a.n)
    };
    let mut cfg = FitConfig::default();
    if let Some(points) = a.points {
        cfg.points = points;
    }
    cfg.validate()?;
    let (summary, records) = run_replicates(&design, &cfg)?;
    rec.write("replicates.csv", &io::replicates_csv(&records))?;
    rec.write("summary.csv", &io::study_summary_csv(&summary))?;
    if let (Some(ari), Some(mis)) = (&summary.ari, &summary.misclassification) {
        println!("median aRI {:.4}, median misclassification {:.4}", ari.median, mis.median);
    }
    for (&(q, k), &count) in &summary.bic_choices {
        println!("BIC chose q={q} k={k} in {count} of {replicates} replicates");
    }
    rec.finish()
}

fn variable_names(names: Option<Vec<String>>, p: usize) -> Vec<String> {
    names.unwrap_or_else(|| (1..=p).map(|j| format!("y{j}")).collect())
}

fn matrix_csv(first: &str, row_names: &[String], col_names: &[String], m: &DMatrix<f64>) -> String {
    let mut out = format!("{first},{}\n", col_names.join(","));
    for (r, name) in row_names.iter().enumerate() {
        out.push_str(name);
        for v in m.row(r).iter() {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

fn rotate(a: RotateArgs) -> Result<()> {
    let (theta, names) = read_params_named(&a.params)?;
    let names = variable_names(names, theta.p());
    let factors: Vec<String> = (1..=theta.q()).map(|d| format!("f{d}")).collect();
    let mut rec = Recorder::new("rotate", a.seed, &a.out);
    let rot = oblimin_rotate(&theta.loadings.loadings, a.gamma, a.seed)?;
    if !rot.converged {
        log::warn!("rotation stopped before the gradient tolerance was reached");
    }
    let table = loading_display(&rot.rotated_loadings, &names, &factors, a.threshold)?;
    rec.write("rotated_loadings.csv", &matrix_csv("variable", &names, &factors, &rot.rotated_loadings))?;
    rec.write("loading_table.csv", &table.to_csv())?;
    rec.write("loading_table.txt", &table.to_string())?;
    rec.write("factor_correlation.csv", &matrix_csv("factor", &factors, &factors, &rot.factor_correlation))?;
    rec.write("rotation_matrix.csv", &matrix_csv("row", &factors, &factors, &rot.rotation_matrix))?;
    print!("{table}");
    println!("factor correlations:");
    for r in 0..theta.q() {
        let row: Vec<String> = rot.factor_correlation.row(r).iter().map(|v| format!("{v:7.3}")).collect();
        println!("{}", row.join(" "));
    }
    rec.finish()
}

fn scores(a: ScoresArgs) -> Result<()> {
    let (theta, _) = read_params_named(&a.params)?;
    let (counts, design) = load_data(&a.data, None)?;
    match (&theta.mixture.logit, &design) {
        (Some(_), None) => return Err(Error::Config("the parameters use covariate weights; pass --covariates".into())),
        (None, Some(_)) => return Err(Error::Config("the parameters have constant weights; drop --covariates".into())),
        _ => {}
    }
    let cfg = FitConfig { points: a.points, ..FitConfig::default() };
    cfg.validate()?;
    let grid = cfg.grid(theta.q())?;
    let mut rec = Recorder::new("scores", a.seed, &a.out);
    let estep = e_step(&counts, &theta, &grid, design.as_ref())?;
    let labels = assign_clusters(&estep);
    let z = estep.factor_scores();
    rec.write("scores.csv", &io::scores_csv(&estep, &labels, &z))?;

    let mut sizes = vec![0usize; theta.k()];
    labels.iter().for_each(|&l| sizes[l - 1] += 1);
    let mut clusters = String::from("cluster,size\n");
    for (i, s) in sizes.iter().enumerate() {
        let _ = writeln!(clusters, "{},{s}", i + 1);
    }
    rec.write("clusters.csv", &clusters)?;

    if a.rotate {
        let rot = oblimin_rotate(&theta.loadings.loadings, a.gamma, a.seed)?;
        let f = rot.rotate_scores(&z);
        rec.write("rotated_scores.csv", &labelled_scores_csv("f", &labels, &f))?;
    }
    println!("cluster sizes: {}", sizes.iter().map(usize::to_string).collect::<Vec<_>>().join(" "));
    rec.finish()
}

fn check(a: CheckArgs) -> Result<()> {
    let (theta, _) = read_params_named(&a.params)?;
    let report = check_identifiability(&theta, a.tolerance);
    print!("{report}");
    if report.all_passed() {
        Ok(())
    } else {
        Err(Error::Data(format!("{} violates the identification constraints", a.params.display())))
    }
}
