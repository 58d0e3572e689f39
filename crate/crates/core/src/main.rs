use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use fairglm::dataset::{self, DatasetSchema, SplitMode};
use fairglm::experiment::{self, ConsistencyConfig, SweepConfig};
use fairglm::family::Family;
use fairglm::penalty::{KappaPolicy, Strategy};
use fairglm::{Error, Result};

#[derive(Parser)]
#[command(name = "fairglm", version, about = "Fair generalized linear models and lambda sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sweep the penalty weight over replicated train/test splits.
    Sweep(SweepArgs),
    /// Fit a single lambda on one split and print the model as JSON.
    Fit(FitArgs),
    /// Monte-Carlo consistency check on a synthetic two-group design.
    ConsistencySim(SimArgs),
    /// Write a synthetic dataset with the COMPAS column layout.
    SyntheticCompas(CompasArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    EqualCounts,
    EqualLengths,
}

#[derive(Clone, Copy, ValueEnum)]
enum KappaArg {
    Nominal,
    Nonempty,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Stratified,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Gaussian,
    Bernoulli,
    Poisson,
}

#[derive(Args)]
struct DataArgs {
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Fixed held-out data; disables random splitting.
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.3)]
    test_fraction: f64,
    #[arg(long, value_enum, default_value = "stratified")]
    split: SplitArg,
    #[arg(long, default_value_t = 100)]
    max_segments: usize,
    #[arg(long, value_enum, default_value = "equal-counts")]
    strategy: StrategyArg,
    #[arg(long, value_enum, default_value = "nominal")]
    kappa: KappaArg,
    /// Build the penalty from explicit pairs (quadratic in n).
    #[arg(long)]
    exact_pairs: bool,
    #[arg(long)]
    max_pairs_per_cell: Option<usize>,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    /// Worker threads (0 = all cores).
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated ascending lambda values.
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 20)]
    replicates: usize,
    /// Also write each replicate's penalty matrix in binary form.
    #[arg(long)]
    dump_penalty: bool,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 0.0)]
    lambda: f64,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long, value_enum, default_value = "gaussian")]
    family: FamilyArg,
    /// Mean shift of group 1 on every predictor.
    #[arg(long, default_value_t = 0.0)]
    gap: f64,
    #[arg(long, value_delimiter = ',', default_value = "1000,10000")]
    n_grid: Vec<usize>,
    #[arg(long, default_value_t = 1.0)]
    lambda0: f64,
    #[arg(long, default_value_t = 50)]
    trials: usize,
    #[arg(long, default_value_t = 3)]
    features: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Write the CSV report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompasArgs {
    #[arg(long, default_value_t = 6172)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the matching schema JSON.
    #[arg(long)]
    schema_out: Option<PathBuf>,
}

fn sweep_config(a: &DataArgs) -> SweepConfig {
    SweepConfig {
        test_fraction: a.test_fraction,
        max_segments: a.max_segments,
        strategy: match a.strategy {
            StrategyArg::EqualCounts => Strategy::EqualCounts,
            StrategyArg::EqualLengths => Strategy::EqualLengths,
        },
        seed: a.seed,
        kappa: match a.kappa {
            KappaArg::Nominal => KappaPolicy::Nominal,
            KappaArg::Nonempty => KappaPolicy::NonEmpty,
        },
        exact_pairs: a.exact_pairs,
        max_pairs_per_cell: a.max_pairs_per_cell,
        split_mode: match a.split {
            SplitArg::Stratified => SplitMode::Stratified,
            SplitArg::Random => SplitMode::Random,
        },
        max_iterations: a.max_iter,
        gradient_tolerance: a.tol,
        threads: a.threads,
        ..SweepConfig::default()
    }
}

fn load(a: &DataArgs) -> Result<(dataset::Dataset, Option<dataset::Dataset>)> {
    let schema = DatasetSchema::from_json_file(&a.schema)?;
    let data = dataset::load_csv(&a.data, &schema)?;
    if data.dropped() > 0 {
        log::info!("{}: dropped {} incomplete rows", a.data.display(), data.dropped());
    }
    let test = a.test_data.as_ref().map(|p| dataset::load_csv(p, &schema)).transpose()?;
    Ok((data, test))
}

fn run_sweep(a: SweepArgs) -> Result<()> {
    let mut config = sweep_config(&a.data);
    config.replicates = a.replicates;
    if let Some(grid) = a.lambda_grid {
        config.lambda_grid = grid;
    }
    config.validate()?;
    let (data, test) = load(&a.data)?;
    let result = experiment::run_sweep(&config, &data, test.as_ref())?;
    let mut inputs = vec![
        ("schema", a.data.schema.display().to_string()),
        ("data", a.data.data.display().to_string()),
    ];
    if let Some(t) = &a.data.test_data {
        inputs.push(("test_data", t.display().to_string()));
    }
    let written = experiment::write_outputs(&result, &config, &inputs, &a.out, a.dump_penalty)?;
    for path in written {
        log::info!("wrote {}", path.display());
    }
    Ok(())
}

fn run_fit(a: FitArgs) -> Result<()> {
    let config = sweep_config(&a.data);
    config.validate()?;
    let (data, test) = load(&a.data)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.data.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let report = pool.install(|| experiment::fit_single(&config, a.lambda, &data, test.as_ref()))?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    write_text(a.out, &json)
}

fn run_sim(a: SimArgs) -> Result<()> {
    let config = ConsistencyConfig {
        family: match a.family {
            FamilyArg::Gaussian => Family::Gaussian,
            FamilyArg::Bernoulli => Family::Bernoulli,
            FamilyArg::Poisson => Family::Poisson,
        },
        group_gap: a.gap,
        n_grid: a.n_grid,
        lambda0: a.lambda0,
        trials: a.trials,
        seed: a.seed,
        features: a.features,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let report = pool.install(|| experiment::run_consistency_sim(&config))?;
    write_text(a.out, &report.to_csv())
}

fn run_compas(a: CompasArgs) -> Result<()> {
    let file = fs::File::create(&a.out).map_err(|e| Error::io(&a.out, e))?;
    experiment::synthetic_compas_csv(a.n, a.seed, io::BufWriter::new(file))?;
    if let Some(path) = a.schema_out {
        fs::write(&path, experiment::COMPAS_SCHEMA_JSON).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn write_text(out: Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(&path, text).map_err(|e| Error::io(&path, e)),
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Sweep(a) => run_sweep(a),
        Command::Fit(a) => run_fit(a),
        Command::ConsistencySim(a) => run_sim(a),
        Command::SyntheticCompas(a) => run_compas(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
