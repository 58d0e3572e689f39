//! Replicated lambda sweeps, trajectory output, the consistency simulation
//! and a synthetic generator with the COMPAS column layout.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{self, Dataset, DatasetSchema, EncodedMatrix, SplitMode};
use crate::error::{Error, Result};
use crate::family::Family;
use crate::metrics::{self, Performance};
use crate::penalty::{
    self, build_pair_sets, build_penalty_matrix, KappaPolicy, PenaltyMatrix, PenaltyOptions,
    SegmentKind, Segmentation, Strategy,
};
use crate::solver::{self, FitConfig, FittedModel};

/// `0` followed by 20 log-spaced values from `1e-3` to `10`.
pub fn default_lambda_grid() -> Vec<f64> {
    std::iter::once(0.0)
        .chain((0..20).map(|i| 10f64.powf(-3.0 + 4.0 * i as f64 / 19.0)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub lambda_grid: Vec<f64>,
    pub replicates: usize,
    pub test_fraction: f64,
    pub max_segments: usize,
    pub strategy: Strategy,
    pub seed: u64,
    pub kappa: KappaPolicy,
    pub exact_pairs: bool,
    pub max_pairs_per_cell: Option<usize>,
    pub split_mode: SplitMode,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    /// Worker threads; 0 uses the rayon default. Never affects results.
    #[serde(skip)]
    pub threads: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let fit = FitConfig::default();
        SweepConfig {
            lambda_grid: default_lambda_grid(),
            replicates: 20,
            test_fraction: 0.3,
            max_segments: 100,
            strategy: Strategy::EqualCounts,
            seed: 0,
            kappa: KappaPolicy::Nominal,
            exact_pairs: false,
            max_pairs_per_cell: None,
            split_mode: SplitMode::Stratified,
            max_iterations: fit.max_iterations,
            gradient_tolerance: fit.gradient_tolerance,
            threads: 0,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_grid.is_empty() {
            return Err(Error::Config("lambda grid is empty".into()));
        }
        if self.lambda_grid.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::Config("lambda values must be finite and non-negative".into()));
        }
        if self.lambda_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("lambda grid must be strictly ascending".into()));
        }
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.max_segments == 0 {
            return Err(Error::Config("max_segments must be at least 1".into()));
        }
        self.fit_config(0.0).validate()
    }

    fn fit_config(&self, lambda: f64) -> FitConfig {
        FitConfig {
            lambda,
            max_iterations: self.max_iterations,
            gradient_tolerance: self.gradient_tolerance,
            ..FitConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRow {
    pub group: String,
    pub count: usize,
    pub nll: f64,
    pub mse: f64,
    pub mae: Option<f64>,
    pub auroc: Option<f64>,
    pub misclassification: Option<f64>,
}

/// One `(replicate, lambda)` result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub replicate: usize,
    pub lambda: f64,
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    /// `sum_c beta_c' D beta_c` on the training penalty.
    pub train_penalty: f64,
    /// Mean negative log-likelihood at unit dispersion, the quantity the fit
    /// trades against the penalty.
    pub train_nll: f64,
    pub test_nll: f64,
    pub test_d_ell: f64,
    pub test_d_eo: f64,
    pub test_d_metric: f64,
    pub train_d_ell: f64,
    pub train_d_eo: f64,
    pub test_mse: f64,
    pub test_mae: Option<f64>,
    pub test_auroc: Option<f64>,
    pub test_misclassification: Option<f64>,
    pub sigma2: Option<f64>,
    pub groups: Vec<GroupRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicateInfo {
    pub replicate: usize,
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_segments: Option<usize>,
    pub segmentation: Option<Segmentation>,
    pub kappa: Option<f64>,
    pub skipped_cells: Vec<(usize, usize, usize)>,
    /// Set when the replicate produced no rows.
    pub skipped_reason: Option<String>,
    /// Penalty non-increasing and train NLL non-decreasing along the grid.
    pub monotone: Option<bool>,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub penalty: Option<PenaltyMatrix>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub points: Vec<TradeoffPoint>,
    pub replicates: Vec<ReplicateInfo>,
    pub family: Family,
    pub group_names: Vec<String>,
    /// Number of penalty matrices constructed; one per non-skipped replicate.
    pub penalty_builds: usize,
}

pub const MONOTONE_TOLERANCE: f64 = 1e-8;

/// Checks the training trade-off along an ascending grid.
pub fn is_monotone(points: &[&TradeoffPoint], tolerance: f64) -> bool {
    points.windows(2).all(|w| {
        w[1].train_penalty <= w[0].train_penalty + tolerance
            && w[1].train_nll >= w[0].train_nll - tolerance
    })
}

/// Loads the inputs and runs [`run_sweep`].
pub fn run_sweep_files(
    config: &SweepConfig,
    schema_path: &Path,
    data_path: &Path,
    test_data_path: Option<&Path>,
) -> Result<SweepResult> {
    let schema = DatasetSchema::from_json_file(schema_path)?;
    let data = dataset::load_csv(data_path, &schema)?;
    let test = test_data_path.map(|p| dataset::load_csv(p, &schema)).transpose()?;
    run_sweep(config, &data, test.as_ref())
}

/// Runs the sweep. With `test` given the data is used as-is for training,
/// no splitting happens and exactly one replicate is run.
pub fn run_sweep(config: &SweepConfig, data: &Dataset, test: Option<&Dataset>) -> Result<SweepResult> {
    config.validate()?;
    let replicates = if test.is_some() {
        if config.replicates > 1 {
            log::warn!("fixed test data given; running a single replicate");
        }
        1
    } else {
        config.replicates
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let builds = AtomicUsize::new(0);
    let outputs: Vec<Result<(ReplicateInfo, Vec<TradeoffPoint>, Family)>> = pool.install(|| {
        (0..replicates)
            .into_par_iter()
            .map(|r| run_replicate(config, data, test, r, &builds))
            .collect()
    });

    let mut points = Vec::new();
    let mut infos = Vec::new();
    let mut family = None;
    for out in outputs {
        let (info, rows, fam) = out?;
        family.get_or_insert(fam);
        infos.push(info);
        points.extend(rows);
    }
    points.sort_by(|a, b| a.replicate.cmp(&b.replicate).then(a.lambda.total_cmp(&b.lambda)));
    Ok(SweepResult {
        points,
        replicates: infos,
        family: family.expect("at least one replicate"),
        group_names: data.group_names(),
        penalty_builds: builds.load(Ordering::SeqCst),
    })
}

/// Train and test matrices of one replicate, before discretization.
#[derive(Debug, Clone)]
pub struct PreparedSplit {
    pub seed: u64,
    pub train: EncodedMatrix,
    pub test: EncodedMatrix,
    pub family: Family,
}

/// Splits (unless `fixed_test` is given) and encodes replicate `replicate`.
pub fn prepare_split(
    config: &SweepConfig,
    data: &Dataset,
    fixed_test: Option<&Dataset>,
    replicate: usize,
) -> Result<PreparedSplit> {
    let seed = config.seed.wrapping_add(replicate as u64);
    let (train, test) = match fixed_test {
        Some(t) => (data.clone(), t.clone()),
        None => dataset::split(data, config.test_fraction, seed, config.split_mode)?,
    };
    let (tr, te) = dataset::encode(&train, &test)?;
    let family = Family::for_outcome(tr.encoder.outcome_type, tr.encoder.class_labels.len())?;
    family.check_support(&tr.y)?;
    family.check_support(&te.y)?;
    Ok(PreparedSplit {
        seed,
        train: tr,
        test: te,
        family,
    })
}

/// Discretizes the training outcome and assembles the penalty matrix.
pub fn build_penalty(config: &SweepConfig, split: &PreparedSplit) -> Result<(Segmentation, PenaltyMatrix)> {
    let tr = &split.train;
    let seg = penalty::discretize(
        &tr.y,
        &tr.groups,
        &tr.group_names,
        tr.encoder.outcome_type,
        config.max_segments,
        config.strategy,
    )?;
    let pairs = build_pair_sets(&seg, &tr.y, &tr.groups, tr.n_groups());
    let options = PenaltyOptions {
        kappa: config.kappa,
        exact_pairs: config.exact_pairs,
        max_pairs_per_cell: config.max_pairs_per_cell,
        subsample_seed: split.seed,
    };
    let pen = build_penalty_matrix(&tr.x, &pairs, &options)?;
    Ok((seg, pen))
}

/// A single fit with its evaluation, as reported by `fairglm fit`.
#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub column_names: Vec<String>,
    pub model: FittedModel,
    pub point: TradeoffPoint,
    pub segmentation: Segmentation,
    pub kappa: f64,
}

/// Fits one `lambda` on replicate 0 of `config`.
pub fn fit_single(config: &SweepConfig, lambda: f64, data: &Dataset, test: Option<&Dataset>) -> Result<FitReport> {
    let split = prepare_split(config, data, test, 0)?;
    let (seg, pen) = build_penalty(config, &split)?;
    let model = solver::fit(&split.train.x, &split.train.y, split.family, &pen.d, &config.fit_config(lambda))?;
    let point = point(0, &model, &split.train, &split.test, &seg)?;
    Ok(FitReport {
        column_names: split.train.encoder.column_names.clone(),
        model,
        point,
        segmentation: seg,
        kappa: pen.kappa,
    })
}

fn run_replicate(
    config: &SweepConfig,
    data: &Dataset,
    fixed_test: Option<&Dataset>,
    replicate: usize,
    builds: &AtomicUsize,
) -> Result<(ReplicateInfo, Vec<TradeoffPoint>, Family)> {
    let split = prepare_split(config, data, fixed_test, replicate)?;
    let family = split.family;
    let mut info = ReplicateInfo {
        replicate,
        seed: split.seed,
        n_train: split.train.n_rows(),
        n_test: split.test.n_rows(),
        n_segments: None,
        segmentation: None,
        kappa: None,
        skipped_cells: Vec::new(),
        skipped_reason: None,
        monotone: None,
        warnings: split.train.encoder.warnings.clone(),
        penalty: None,
    };
    let (seg, pen) = match build_penalty(config, &split) {
        Ok(v) => v,
        Err(e @ Error::Infeasible { .. }) => {
            log::warn!("replicate {replicate} skipped: {e}");
            info.skipped_reason = Some(e.to_string());
            return Ok((info, Vec::new(), family));
        }
        Err(e) => return Err(e),
    };
    builds.fetch_add(1, Ordering::SeqCst);
    let (tr, te) = (&split.train, &split.test);

    let rows: Vec<Result<TradeoffPoint>> = config
        .lambda_grid
        .par_iter()
        .map(|&lambda| {
            let model = solver::fit(&tr.x, &tr.y, family, &pen.d, &config.fit_config(lambda))?;
            point(replicate, &model, tr, te, &seg)
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;

    let refs: Vec<&TradeoffPoint> = rows.iter().collect();
    let monotone = is_monotone(&refs, MONOTONE_TOLERANCE);
    if !monotone {
        log::warn!("replicate {replicate}: training trade-off is not monotone along the grid");
    }
    info.monotone = Some(monotone);
    info.n_segments = Some(seg.n_segments());
    info.segmentation = Some(seg);
    info.kappa = Some(pen.kappa);
    info.skipped_cells = pen.skipped_cells.clone();
    info.penalty = Some(pen);
    Ok((info, rows, family))
}

fn group_rows(names: &[String], per_group: &[Option<Performance>]) -> Vec<GroupRow> {
    names
        .iter()
        .zip(per_group)
        .map(|(name, perf)| match perf {
            Some(p) => GroupRow {
                group: name.clone(),
                count: p.count,
                nll: p.nll,
                mse: p.mse,
                mae: p.mae,
                auroc: p.auroc,
                misclassification: p.misclassification,
            },
            None => GroupRow {
                group: name.clone(),
                count: 0,
                nll: f64::NAN,
                mse: f64::NAN,
                mae: None,
                auroc: None,
                misclassification: None,
            },
        })
        .collect()
}

fn point(
    replicate: usize,
    model: &FittedModel,
    train: &EncodedMatrix,
    test: &EncodedMatrix,
    seg: &Segmentation,
) -> Result<TradeoffPoint> {
    let on_test = metrics::evaluate(model, &test.x, &test.y, &test.groups, test.n_groups(), seg)?;
    let on_train = metrics::evaluate(model, &train.x, &train.y, &train.groups, train.n_groups(), seg)?;
    Ok(TradeoffPoint {
        replicate,
        lambda: model.lambda,
        converged: model.converged,
        iterations: model.iterations,
        gradient_norm: model.final_gradient_norm,
        train_penalty: model.train_penalty_value,
        train_nll: model.train_nll,
        test_nll: on_test.overall.nll,
        test_d_ell: on_test.disparities.d_ell,
        test_d_eo: on_test.disparities.d_eo,
        test_d_metric: on_test.disparities.d_metric,
        train_d_ell: on_train.disparities.d_ell,
        train_d_eo: on_train.disparities.d_eo,
        test_mse: on_test.overall.mse,
        test_mae: on_test.overall.mae,
        test_auroc: on_test.overall.auroc,
        test_misclassification: on_test.overall.misclassification,
        sigma2: model.sigma2_hat,
        groups: group_rows(&test.group_names, &on_test.per_group),
    })
}

fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_f).unwrap_or_default()
}

pub const TRADEOFF_COLUMNS: [&str; 19] = [
    "replicate",
    "lambda",
    "converged",
    "iterations",
    "gradient_norm",
    "train_penalty",
    "train_nll",
    "test_nll",
    "test_d_ell",
    "test_d_eo",
    "test_d_metric",
    "train_d_ell",
    "train_d_eo",
    "test_mse",
    "test_mae",
    "test_auroc",
    "test_misclassification",
    "sigma2",
    "n_groups",
];

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    family: &'a str,
    seed: u64,
    config: &'a SweepConfig,
    inputs: &'a BTreeMap<String, String>,
    group_names: &'a [String],
    penalty_builds: usize,
    rows: usize,
    replicates: &'a [ReplicateInfo],
}

/// Writes `tradeoff.csv`, `groups.csv` and `manifest.json` into `dir`, plus
/// `penalty_<r>.bin` per replicate when `dump_penalties` is set.
/// `inputs` is echoed into the manifest verbatim.
pub fn write_outputs(
    result: &SweepResult,
    config: &SweepConfig,
    inputs: &[(&str, String)],
    dir: &Path,
    dump_penalties: bool,
) -> Result<Vec<PathBuf>> {
    if result.points.is_empty() {
        return Err(Error::Config("sweep produced no rows; nothing to write".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();

    let path = dir.join("tradeoff.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(TRADEOFF_COLUMNS)?;
    for p in &result.points {
        w.write_record([
            p.replicate.to_string(),
            fmt_f(p.lambda),
            p.converged.to_string(),
            p.iterations.to_string(),
            fmt_f(p.gradient_norm),
            fmt_f(p.train_penalty),
            fmt_f(p.train_nll),
            fmt_f(p.test_nll),
            fmt_f(p.test_d_ell),
            fmt_f(p.test_d_eo),
            fmt_f(p.test_d_metric),
            fmt_f(p.train_d_ell),
            fmt_f(p.train_d_eo),
            fmt_f(p.test_mse),
            fmt_opt(p.test_mae),
            fmt_opt(p.test_auroc),
            fmt_opt(p.test_misclassification),
            fmt_opt(p.sigma2),
            p.groups.len().to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    written.push(path);

    let path = dir.join("groups.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["replicate", "lambda", "group", "count", "nll", "mse", "mae", "auroc", "misclassification"])?;
    for p in &result.points {
        for g in &p.groups {
            w.write_record([
                p.replicate.to_string(),
                fmt_f(p.lambda),
                g.group.clone(),
                g.count.to_string(),
                fmt_f(g.nll),
                fmt_f(g.mse),
                fmt_opt(g.mae),
                fmt_opt(g.auroc),
                fmt_opt(g.misclassification),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    written.push(path);

    let inputs: BTreeMap<String, String> = inputs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect();
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        family: result.family.name(),
        seed: config.seed,
        config,
        inputs: &inputs,
        group_names: &result.group_names,
        penalty_builds: result.penalty_builds,
        rows: result.points.len(),
        replicates: &result.replicates,
    };
    let path = dir.join("manifest.json");
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    written.push(path);

    if dump_penalties {
        for info in &result.replicates {
            let Some(pen) = &info.penalty else { continue };
            let path = dir.join(format!("penalty_{}.bin", info.replicate));
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut buf = std::io::BufWriter::new(file);
            pen.write_dump(&mut buf)
                .and_then(|_| buf.flush())
                .map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyConfig {
    pub family: Family,
    pub group_gap: f64,
    pub n_grid: Vec<usize>,
    /// `lambda_n = lambda0 / sqrt(n)`.
    pub lambda0: f64,
    pub trials: usize,
    pub seed: u64,
    /// Number of non-intercept predictors.
    pub features: usize,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        ConsistencyConfig {
            family: Family::Gaussian,
            group_gap: 0.0,
            n_grid: vec![1_000, 10_000],
            lambda0: 1.0,
            trials: 50,
            seed: 0,
            features: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    pub n: usize,
    pub lambda: f64,
    /// Mean of `||beta_hat - beta*||_2` over trials.
    pub beta_error: f64,
    /// Mean Frobenius norm of `D - Delta`.
    pub penalty_error: f64,
    /// Mean `||beta_hat - beta_hat(lambda = 0)||_2`.
    pub glm_gap: f64,
    pub converged: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub config: ConsistencyConfig,
    pub beta_star: Vec<f64>,
    /// Population penalty matrix of the generator.
    pub delta: DMatrix<f64>,
    pub rows: Vec<ConsistencyRow>,
}

impl ConsistencyReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("n,lambda,beta_error,penalty_error,glm_gap,converged\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.n,
                fmt_f(r.lambda),
                fmt_f(r.beta_error),
                fmt_f(r.penalty_error),
                fmt_f(r.glm_gap),
                r.converged
            );
        }
        s
    }
}

/// True coefficients of the simulation: intercept then alternating-sign
/// slopes of decreasing size.
pub fn consistency_beta_star(family: Family, features: usize) -> Vec<f64> {
    let scale = match family {
        Family::Poisson => 0.25,
        _ => 1.0,
    };
    std::iter::once(0.5 * scale)
        .chain((0..features).map(|j| {
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            sign * scale / (1.0 + 0.5 * j as f64)
        }))
        .collect()
}

/// Population penalty for the generator with a single outcome segment:
/// `Sigma_0 + Sigma_1 + (m_0 - m_1)(m_0 - m_1)'` with unit covariances and a
/// mean shift of `gap` on every predictor. The intercept row and column are 0.
pub fn consistency_delta(features: usize, gap: f64) -> DMatrix<f64> {
    let p = features + 1;
    DMatrix::from_fn(p, p, |i, j| {
        if i == 0 || j == 0 {
            0.0
        } else {
            gap * gap + if i == j { 2.0 } else { 0.0 }
        }
    })
}

/// Draws `n` rows: half in each group, predictors `N(gap * g, I)`, outcome
/// from the family at `x' beta*`.
pub fn consistency_sample(
    family: Family,
    beta_star: &[f64],
    gap: f64,
    n: usize,
    rng: &mut impl Rng,
) -> Result<(DMatrix<f64>, DVector<f64>, Vec<usize>)> {
    let p = beta_star.len();
    let groups: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let mut x = DMatrix::zeros(n, p);
    let mut y = DVector::zeros(n);
    for i in 0..n {
        x[(i, 0)] = 1.0;
        for j in 1..p {
            let z: f64 = rng.sample(StandardNormal);
            x[(i, j)] = z + gap * groups[i] as f64;
        }
        let eta: f64 = (0..p).map(|j| x[(i, j)] * beta_star[j]).sum();
        y[i] = match family {
            Family::Gaussian => {
                let e: f64 = rng.sample(StandardNormal);
                eta + e
            }
            Family::Bernoulli => f64::from(rng.random::<f64>() < 1.0 / (1.0 + (-eta).exp())),
            Family::Poisson => Poisson::new(eta.exp())
                .map_err(|e| Error::Config(format!("poisson rate: {e}")))?
                .sample(rng),
            Family::Multinomial { .. } => {
                return Err(Error::Config("consistency simulation supports gaussian, bernoulli and poisson".into()))
            }
        };
    }
    Ok((x, y, groups))
}

/// Penalty matrix of simulated data with the whole outcome range as one
/// segment, so its population limit is [`consistency_delta`].
pub fn single_segment_penalty(x: &DMatrix<f64>, y: &DVector<f64>, groups: &[usize]) -> Result<PenaltyMatrix> {
    let lo = y.min();
    let hi = y.max();
    let seg = Segmentation {
        kind: SegmentKind::EqualCounts { segments: 1 },
        boundaries: vec![lo, hi],
    };
    let pairs = build_pair_sets(&seg, y, groups, 2);
    build_penalty_matrix(x, &pairs, &PenaltyOptions::default())
}

pub fn run_consistency_sim(config: &ConsistencyConfig) -> Result<ConsistencyReport> {
    if config.trials == 0 || config.n_grid.is_empty() {
        return Err(Error::Config("trials and n_grid must be non-empty".into()));
    }
    if config.n_grid.iter().any(|&n| n < 4) {
        return Err(Error::Config("every n must be at least 4".into()));
    }
    if !(config.lambda0 >= 0.0 && config.lambda0.is_finite()) {
        return Err(Error::Config("lambda0 must be finite and non-negative".into()));
    }
    let beta_star = consistency_beta_star(config.family, config.features);
    let delta = consistency_delta(config.features, config.group_gap);
    let truth = DVector::from_column_slice(&beta_star);

    let mut rows = Vec::new();
    for (ni, &n) in config.n_grid.iter().enumerate() {
        let lambda = config.lambda0 / (n as f64).sqrt();
        let trials: Vec<Result<(f64, f64, f64, bool)>> = (0..config.trials)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                rng.set_stream((ni * config.trials + t) as u64);
                let (x, y, groups) = consistency_sample(config.family, &beta_star, config.group_gap, n, &mut rng)?;
                let pen = single_segment_penalty(&x, &y, &groups)?;
                let fair = solver::fit(&x, &y, config.family, &pen.d, &FitConfig::with_lambda(lambda))?;
                let glm = solver::fit(&x, &y, config.family, &pen.d, &FitConfig::with_lambda(0.0))?;
                let b = fair.beta.column(0).into_owned();
                Ok((
                    (&b - &truth).norm(),
                    (&pen.d - &delta).norm(),
                    (&b - glm.beta.column(0)).norm(),
                    fair.converged,
                ))
            })
            .collect();
        let trials = trials.into_iter().collect::<Result<Vec<_>>>()?;
        let k = trials.len() as f64;
        rows.push(ConsistencyRow {
            n,
            lambda,
            beta_error: trials.iter().map(|t| t.0).sum::<f64>() / k,
            penalty_error: trials.iter().map(|t| t.1).sum::<f64>() / k,
            glm_gap: trials.iter().map(|t| t.2).sum::<f64>() / k,
            converged: trials.iter().filter(|t| t.3).count(),
        });
    }
    Ok(ConsistencyReport {
        config: config.clone(),
        beta_star,
        delta,
        rows,
    })
}

pub const COMPAS_SCHEMA_JSON: &str = r#"{
  "outcome": "two_year_recid",
  "outcome_type": "binary",
  "sensitive": "race",
  "features": [
    {"name": "sex", "kind": "categorical"},
    {"name": "age", "kind": "continuous"},
    {"name": "age_cat", "kind": "categorical"},
    {"name": "juv_fel_count", "kind": "continuous"},
    {"name": "juv_misd_count", "kind": "continuous"},
    {"name": "juv_other_count", "kind": "continuous"},
    {"name": "priors_count", "kind": "continuous"},
    {"name": "c_charge_degree", "kind": "categorical"},
    {"name": "length_of_stay", "kind": "continuous"}
  ]
}
"#;

pub fn compas_schema() -> DatasetSchema {
    DatasetSchema::from_json_str(COMPAS_SCHEMA_JSON).expect("built-in schema is valid")
}

/// Writes a synthetic CSV with the COMPAS two-year recidivism columns.
/// Criminal-history counts depend on the race group and the outcome carries an
/// extra race effect not explained by the features, so an unconstrained GLM
/// is group-unfair.
pub fn synthetic_compas_csv<W: Write>(n: usize, seed: u64, out: W) -> Result<()> {
    const RACES: [(&str, f64, f64, f64); 4] = [
        // name, share, priors multiplier, residual logit shift
        ("African-American", 0.51, 1.6, 0.35),
        ("Caucasian", 0.34, 1.0, -0.15),
        ("Hispanic", 0.08, 0.9, -0.25),
        ("Other", 0.07, 0.7, -0.35),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "two_year_recid",
        "race",
        "sex",
        "age",
        "age_cat",
        "juv_fel_count",
        "juv_misd_count",
        "juv_other_count",
        "priors_count",
        "c_charge_degree",
        "length_of_stay",
    ])?;
    let count = |rng: &mut ChaCha8Rng, rate: f64| -> f64 { Poisson::new(rate.max(1e-6)).map(|d| d.sample(rng)).unwrap_or(0.0) };
    let stay: Normal<f64> = Normal::new(1.5, 1.2).expect("valid normal");
    for _ in 0..n {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut race = RACES[RACES.len() - 1];
        for r in RACES {
            acc += r.1;
            if u < acc {
                race = r;
                break;
            }
        }
        let male = rng.random::<f64>() < 0.81;
        let age = (18.0 + rng.random::<f64>().powf(1.6) * 52.0).floor();
        let age_cat = if age < 25.0 {
            "Less than 25"
        } else if age <= 45.0 {
            "25 - 45"
        } else {
            "Greater than 45"
        };
        let youth = if age < 25.0 { 1.5 } else { 1.0 };
        let juv_fel = count(&mut rng, 0.06 * race.2 * youth);
        let juv_misd = count(&mut rng, 0.08 * race.2 * youth);
        let juv_other = count(&mut rng, 0.1 * race.2 * youth);
        let priors = count(&mut rng, 2.2 * race.2 * (age / 35.0).sqrt() * if male { 1.2 } else { 0.8 });
        let felony = rng.random::<f64>() < 0.64;
        let los = stay.sample(&mut rng).exp().round();
        let logit = -0.55 + 0.14 * priors.min(20.0) - 0.035 * (age - 34.0)
            + 0.25 * (juv_fel + juv_misd + juv_other)
            + if male { 0.3 } else { 0.0 }
            + if felony { 0.15 } else { 0.0 }
            + 0.05 * (1.0 + los).ln()
            + race.3;
        let recid = rng.random::<f64>() < 1.0 / (1.0 + (-logit).exp());
        w.write_record([
            u8::from(recid).to_string(),
            race.0.to_string(),
            (if male { "Male" } else { "Female" }).to_string(),
            age.to_string(),
            age_cat.to_string(),
            juv_fel.to_string(),
            juv_misd.to_string(),
            juv_other.to_string(),
            priors.to_string(),
            (if felony { "F" } else { "M" }).to_string(),
            los.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<synthetic>", e))?;
    Ok(())
}
