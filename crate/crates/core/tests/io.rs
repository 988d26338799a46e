use countmix::covariates::CovariateSchema;
use countmix::em::{fit, FitConfig};
use countmix::io::{
    load_counts_csv, load_covariates_csv, read_params, scores_csv, write_fit_outputs, write_params, RunConfig,
    CANONICAL_COLUMNS,
};
use countmix::model::ModelDims;
use countmix::simulation::{fixture_q2k3, simulate_dataset};
use countmix::Error;

#[test]
fn parameters_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("nested/params.toml");
    let theta = fixture_q2k3();
    write_params(&path, &theta).unwrap();
    let back = read_params(&path).unwrap();
    assert!((&back.loadings.loadings - &theta.loadings.loadings).amax() < 1e-12);
    assert_eq!(back, theta);
}

#[test]
fn canonical_count_file_loads() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("counts.csv");
    std::fs::write(&path, format!("{}\n1,0,2,0,0,3,1\n0,0,0,1,0,0,0\n", CANONICAL_COLUMNS.join(","))).unwrap();
    let counts = load_counts_csv(&path).unwrap();
    assert_eq!((counts.nrows(), counts.ncols()), (2, 7));
    std::fs::write(&path, "a,b\n1,2\n3,x\n").unwrap();
    let err = load_counts_csv(&path).unwrap_err();
    assert!(matches!(&err, Error::Data(m) if m.contains("row 2") && m.contains("'b'")), "{err}");
    assert!(matches!(load_counts_csv(&dir.path().join("missing.csv")), Err(Error::Io(_))));
}

#[test]
fn questionnaire_covariates_encode_to_seventeen_columns() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("cov.csv");
    let schema = CovariateSchema::questionnaire();
    let header: Vec<&str> = schema.covariates.iter().map(|c| c.name.as_str()).collect();
    std::fs::write(
        &path,
        format!(
            "id,{}\n1,Italy,Lyceum,North,Female,Humanities,No,Don't know-don't answer,None\n2,Abroad,Technical,South,Male,Scientific,Yes,High,More than ten\n",
            header.join(",")
        ),
    )
    .unwrap();
    let x = load_covariates_csv(&path, &schema, Some(2)).unwrap();
    assert_eq!(x.ncols(), 17);
    let books = x.column_names().iter().position(|c| c == "books_read").unwrap();
    assert_eq!(x.row(0)[books], 0.0);
    assert_eq!(x.row(1)[books], 15.0);
    let na = x.column_names().iter().position(|c| c == "social_class=NA").unwrap();
    assert_eq!(x.row(0)[na], 1.0);
    assert!(matches!(load_covariates_csv(&path, &schema, Some(3)), Err(Error::Data(_))));
}

#[test]
fn fit_outputs_have_the_documented_shapes() {
    let data = simulate_dataset(&fixture_q2k3(), 120, 1).unwrap();
    let cfg = FitConfig { max_iter: 20, ..FitConfig::default() };
    let res = fit(&data.counts, ModelDims::new(120, 10, 2, 3, 0), &cfg, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_fit_outputs(dir.path(), &res, None).unwrap();
    let scores = std::fs::read_to_string(dir.path().join("scores.csv")).unwrap();
    let lines: Vec<&str> = scores.lines().collect();
    assert_eq!(lines.len(), 121);
    // q scores + label + k responsibilities
    assert!(lines.iter().all(|l| l.split(',').count() == 2 + 1 + 3));
    assert_eq!(scores, scores_csv(&res.estep, &res.labels, &res.factor_scores));
    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), res.loglik_trace.len() + 1);
    let clusters = std::fs::read_to_string(dir.path().join("clusters.csv")).unwrap();
    let total: usize = clusters.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse::<usize>().unwrap()).sum();
    assert_eq!(total, 120);
    assert_eq!(read_params(&dir.path().join("params.toml")).unwrap(), res.theta);
}

#[test]
fn run_config_validates() {
    assert!(RunConfig::from_toml("[select]\nq = [1, 2]\nk = [1, 2, 3]\nseeds = 3\n").is_ok());
    assert!(RunConfig::from_toml("[select]\nseeds = 0\n").is_err());
    assert!(RunConfig::from_toml("[fit]\nepsilon = -1.0\n").is_err());
}
