use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "countmix", version, about = "Mixtures of Poisson factor models for count data")]
struct Cli {
    /// Worker threads for parallel sections (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit one (q, k) model to a count table.
    Fit(FitArgs),
    /// Fit a grid of (q, k) models and rank them by AIC and BIC.
    Select(SelectArgs),
    /// Draw datasets from a design, or run a replicate study.
    Simulate(SimulateArgs),
    /// Oblimin rotation of the loadings in a parameter file.
    Rotate(RotateArgs),
    /// Factor scores and cluster labels of a count table under fitted parameters.
    Scores(ScoresArgs),
    /// Report the identification constraints of a parameter file.
    Check(CheckArgs),
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Count table: header row, one non-negative integer per cell.
    #[arg(long)]
    counts: PathBuf,

    /// Covariate table for covariate-dependent mixture weights.
    #[arg(long)]
    covariates: Option<PathBuf>,

    /// Covariate schema file, or `questionnaire` for the built-in preset.
    #[arg(long, requires = "covariates")]
    schema: Option<String>,
}

#[derive(Args, Debug, Clone)]
struct EstimationArgs {
    /// Optional run configuration (TOML); flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Gauss-Hermite points per latent dimension.
    #[arg(long)]
    points: Option<usize>,

    #[arg(long)]
    max_iter: Option<usize>,

    /// Relative log-likelihood change that stops the iterations.
    #[arg(long)]
    epsilon: Option<f64>,

    /// Start strategy: classical-fa+ward or random.
    #[arg(long)]
    init: Option<String>,

    /// Estimate the first intercept instead of holding it at zero.
    #[arg(long)]
    free_first_intercept: bool,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,

    #[command(flatten)]
    estimation: EstimationArgs,

    #[arg(long)]
    q: usize,

    #[arg(long)]
    k: usize,

    /// First start seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Number of starts; seeds run from --seed upwards and the best fit is kept.
    #[arg(long, default_value_t = 1)]
    starts: usize,

    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Criterion {
    Aic,
    Bic,
}

#[derive(Args, Debug)]
struct SelectArgs {
    #[command(flatten)]
    data: DataArgs,

    #[command(flatten)]
    estimation: EstimationArgs,

    /// Factor counts, e.g. `1,2` or `1..3`.
    #[arg(long)]
    q: Option<String>,

    /// Component counts, e.g. `1..5`.
    #[arg(long)]
    k: Option<String>,

    /// Criterion whose choice is written to `chosen/`.
    #[arg(long, value_enum, default_value_t = Criterion::Bic)]
    criterion: Criterion,

    /// First start seed.
    #[arg(long)]
    seed: Option<u64>,

    /// Starts per cell.
    #[arg(long)]
    seeds: Option<usize>,

    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StudyKind {
    Fit,
    Select,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// `fixture-q2k3` or a published design such as `k6-q1`.
    #[arg(long)]
    design: String,

    /// Number of count variables.
    #[arg(long, default_value_t = 10)]
    p: usize,

    #[arg(long, default_value_t = 2000)]
    n: usize,

    #[arg(long)]
    seed: u64,

    /// Run a replicate study instead of writing one dataset.
    #[arg(long)]
    replicates: Option<usize>,

    /// Fit starts per replicate.
    #[arg(long, default_value_t = 10)]
    fit_seeds: usize,

    #[arg(long, value_enum, default_value_t = StudyKind::Fit)]
    study: StudyKind,

    /// Factor counts of a selection study.
    #[arg(long)]
    q: Option<String>,

    /// Component counts of a selection study.
    #[arg(long)]
    k: Option<String>,

    #[arg(long)]
    points: Option<usize>,

    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RotateArgs {
    /// Parameter file written by `fit`.
    #[arg(long)]
    params: PathBuf,

    /// Oblimin weight; 0 is quartimin.
    #[arg(long, default_value_t = 0.0)]
    gamma: f64,

    /// Loadings at or below this magnitude are blanked in the display table.
    #[arg(long, default_value_t = 0.2)]
    threshold: f64,

    /// Seed of the random starts.
    #[arg(long, default_value_t = 1)]
    seed: u64,

    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ScoresArgs {
    #[command(flatten)]
    data: DataArgs,

    /// Parameter file written by `fit`.
    #[arg(long)]
    params: PathBuf,

    /// Gauss-Hermite points per latent dimension.
    #[arg(long, default_value_t = 8)]
    points: usize,

    /// Also write scores on oblimin-rotated factors.
    #[arg(long)]
    rotate: bool,

    #[arg(long, default_value_t = 0.0)]
    gamma: f64,

    /// Seed of the rotation starts.
    #[arg(long, default_value_t = 1)]
    seed: u64,

    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CheckArgs {
    /// Parameter file to inspect.
    #[arg(long)]
    params: PathBuf,

    #[arg(long, default_value_t = 1e-8)]
    tolerance: f64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    if let Some(threads) = cli.threads {
        if threads == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(1);
        }
    }
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
