use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn countmix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_countmix")).args(args).output().expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_counts(dir: &Path, n: usize) -> std::path::PathBuf {
    let out = dir.join("sim");
    let status = countmix(&[
        "simulate",
        "--design",
        "fixture-q2k3",
        "--p",
        "7",
        "--n",
        &n.to_string(),
        "--seed",
        "3",
        "--out",
        path(&out),
    ]);
    assert!(status.status.success(), "{}", stderr(&status));
    out.join("counts.csv")
}

#[test]
fn simulate_is_byte_identical_for_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = countmix(&["simulate", "--design", "fixture-q2k3", "--n", "2000", "--seed", "1", "--out", path(dir)]);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    for file in ["counts.csv", "truth.csv", "params.toml"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    let counts = fs::read_to_string(a.join("counts.csv")).unwrap();
    assert_eq!(counts.lines().count(), 2001);
    let manifest = fs::read_to_string(a.join("manifest.toml")).unwrap();
    assert!(manifest.contains("seed = 1\n"), "{manifest}");
}

#[test]
fn seven_variable_designs_use_the_canonical_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let counts = write_counts(tmp.path(), 50);
    let header = fs::read_to_string(counts).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "nORT,nREG,nMRC,nLES,nMFS,nCOE,nSIN");
}

#[test]
fn ledermann_violation_exits_with_the_bound() {
    let tmp = tempfile::tempdir().unwrap();
    let counts = write_counts(tmp.path(), 50);
    let out =
        countmix(&["fit", "--counts", path(&counts), "--q", "4", "--k", "2", "--out", path(&tmp.path().join("fit"))]);
    assert_eq!(out.status.code(), Some(1));
    let msg = stderr(&out);
    assert!(msg.contains("Ledermann bound 3"), "{msg}");
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(countmix(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(countmix(&["fit", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(countmix(&[]).status.code(), Some(1));
    assert_eq!(countmix(&["--help"]).status.code(), Some(0));
}

#[test]
fn malformed_counts_exit_with_one_and_name_the_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("bad.csv");
    fs::write(&file, "a,b,c\n1,2,3\n4,-1,6\n").unwrap();
    let out = countmix(&["fit", "--counts", path(&file), "--q", "1", "--k", "1", "--out", path(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    let msg = stderr(&out);
    assert!(msg.contains("row 2") && msg.contains("'b'"), "{msg}");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let counts = write_counts(tmp.path(), 50);
    let cfg = tmp.path().join("run.toml");
    fs::write(&cfg, "[fit]\npoints = 6\nbogus = 1\n").unwrap();
    let out = countmix(&[
        "fit",
        "--config",
        path(&cfg),
        "--counts",
        path(&counts),
        "--q",
        "1",
        "--k",
        "1",
        "--out",
        path(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("bogus"));
}

#[test]
fn select_writes_one_row_per_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let counts = write_counts(tmp.path(), 300);
    let out_dir = tmp.path().join("select");
    let out = countmix(&[
        "select",
        "--counts",
        path(&counts),
        "--q",
        "1,2",
        "--k",
        "1..5",
        "--criterion",
        "aic",
        "--seeds",
        "1",
        "--max-iter",
        "40",
        "--out",
        path(&out_dir),
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = fs::read_to_string(out_dir.join("selection.csv")).unwrap();
    assert_eq!(table.lines().count(), 11, "{table}");
    assert_eq!(table.lines().filter(|l| l.ends_with(",true,false") || l.ends_with(",true,true")).count(), 1);
    assert!(out_dir.join("chosen/params.toml").exists());
}

#[test]
fn fit_rotate_scores_and_check_chain() {
    let tmp = tempfile::tempdir().unwrap();
    let counts = write_counts(tmp.path(), 400);
    let fit_dir = tmp.path().join("fit");
    let out =
        countmix(&["fit", "--counts", path(&counts), "--q", "2", "--k", "2", "--seed", "5", "--out", path(&fit_dir)]);
    assert!(out.status.success(), "{}", stderr(&out));
    for file in ["params.toml", "trace.csv", "scores.csv", "criteria.csv", "clusters.csv", "manifest.toml"] {
        assert!(fit_dir.join(file).exists(), "{file}");
    }
    let manifest = fs::read_to_string(fit_dir.join("manifest.toml")).unwrap();
    assert!(manifest.contains("seed = 5\n"), "{manifest}");

    let params = fit_dir.join("params.toml");
    let check = countmix(&["check", "--params", path(&params)]);
    assert!(check.status.success(), "{}", String::from_utf8_lossy(&check.stdout));

    let rot_dir = tmp.path().join("rot");
    let out = countmix(&["rotate", "--params", path(&params), "--out", path(&rot_dir)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let table = fs::read_to_string(rot_dir.join("loading_table.csv")).unwrap();
    assert!(table.starts_with("variable,f1,f2\nnORT,"), "{table}");

    let sc_dir = tmp.path().join("scores");
    let out =
        countmix(&["scores", "--params", path(&params), "--counts", path(&counts), "--rotate", "--out", path(&sc_dir)]);
    assert!(out.status.success(), "{}", stderr(&out));
    let scores = fs::read_to_string(sc_dir.join("scores.csv")).unwrap();
    assert_eq!(scores.lines().next().unwrap(), "z1,z2,label,r1,r2");
    assert_eq!(scores.lines().count(), 401);
    // the E-step under the fitted parameters reproduces the fit's own scores
    assert_eq!(scores, fs::read_to_string(fit_dir.join("scores.csv")).unwrap());
    assert!(sc_dir.join("rotated_scores.csv").exists());
}

#[test]
fn check_fails_on_unidentified_parameters() {
    let tmp = tempfile::tempdir().unwrap();
    let counts = write_counts(tmp.path(), 50);
    let sim_params = counts.with_file_name("params.toml");
    // the generating parameters of this design are standardised
    assert!(countmix(&["check", "--params", path(&sim_params), "--tolerance", "1e-3"]).status.success());
    let text = fs::read_to_string(&sim_params).unwrap().replacen("intercepts = [0.0,", "intercepts = [0.5,", 1);
    let shifted = tmp.path().join("shifted.toml");
    fs::write(&shifted, text).unwrap();
    let out = countmix(&["check", "--params", path(&shifted)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stdout).contains("condition 3"));
}
