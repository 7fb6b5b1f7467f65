//! Multi-seed experiment harness: DNN enumeration, the bond, width and
//! matched-DNN sweeps, aggregation, and CSV output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, ArchKind, ArchitectureSpec, InitScheme, Network};
use crate::problems::{accuracy_loss_level, ProblemId, THRESHOLD_BATCHES};
use crate::training::{convergence_epoch, ema_smooth, train, ConvergenceParams, MetricsLog, TrainConfig};

/// All `(x, y)` with `(n+1)x + (x+1)y + (y+1) = target`, ascending in `x`.
pub fn enumerate_dnn_matches(param_target: usize, input_dim: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for x in 1..=param_target {
        let fixed = (input_dim + 1) * x + 1;
        if fixed >= param_target {
            break;
        }
        // (x + 2) y = target - (n+1)x - 1
        let rest = param_target - fixed;
        if rest.is_multiple_of(x + 2) && rest / (x + 2) >= 1 {
            out.push((x, rest / (x + 2)));
        }
    }
    out
}

/// Every same-parameter-count DNN for a TNN, as architectures.
pub fn dnn_cohort(tnn: &ArchitectureSpec) -> Result<Vec<ArchKind>> {
    let count = tnn.param_count()?;
    Ok(enumerate_dnn_matches(count, tnn.input_dim)
        .into_iter()
        .map(|(x, y)| ArchKind::Dnn { x, y })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentPlan {
    pub problem: ProblemId,
    pub archs: Vec<ArchKind>,
    pub seeds: Vec<u64>,
    /// Epochs, batch size, loss, optimizer and path resampling. The seed and
    /// early-stopping fields are filled in per run.
    pub train: TrainConfig,
    pub activation: Activation,
    pub init: InitScheme,
    /// Convergence test. `threshold` is replaced by the accuracy loss level
    /// when `auto_threshold` is set.
    pub convergence: ConvergenceParams,
    pub auto_threshold: bool,
    /// Relative accuracy defining "reached" (0.01 for 1%), also used for
    /// the automatic threshold.
    pub accuracy: f64,
    /// Stop each run as soon as its convergence test fires.
    pub early_stop: bool,
    /// Keep per-epoch series in the results.
    pub keep_series: bool,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
}

impl ExperimentPlan {
    pub fn new(problem: ProblemId, archs: Vec<ArchKind>, seeds: Vec<u64>) -> Self {
        ExperimentPlan {
            problem,
            archs,
            seeds,
            train: TrainConfig::default(),
            activation: Activation::Tanh,
            init: InitScheme::Glorot,
            convergence: ConvergenceParams::default(),
            auto_threshold: true,
            accuracy: 0.01,
            early_stop: false,
            keep_series: false,
            threads: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.archs.is_empty() {
            return Err(Error::InvalidArgument("plan has no architectures".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("plan has no seeds".into()));
        }
        if self.accuracy.is_nan() || self.accuracy <= 0.0 {
            return Err(Error::InvalidArgument("accuracy must be positive".into()));
        }
        self.convergence.validate()
    }

    pub fn input_dim(&self) -> Result<usize> {
        Ok(self.problem.build()?.dim + 1)
    }

    /// Convergence parameters with the threshold resolved.
    pub fn resolved_convergence(&self) -> Result<ConvergenceParams> {
        let mut c = self.convergence;
        if self.auto_threshold {
            c.threshold = accuracy_loss_level(
                &self.problem,
                self.train.loss,
                self.accuracy,
                self.train.batch_size,
                THRESHOLD_BATCHES,
            )?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub problem: String,
    pub arch: ArchKind,
    pub param_count: usize,
    pub seed: u64,
    pub epochs_run: usize,
    pub convergence_epoch: Option<usize>,
    pub final_loss: Option<f64>,
    pub final_y0: Option<f64>,
    pub reference_y0: f64,
    pub rel_error: Option<f64>,
    pub reached: bool,
    pub wall_time_s: f64,
    /// Training error message if the run failed.
    pub error: Option<String>,
    pub series: Option<MetricsLog>,
}

impl RunResult {
    pub fn run_id(&self) -> String {
        format!("{}-{}-s{}", self.problem, self.arch, self.seed)
    }
}

/// Train one architecture with one seed. Training failures are recorded in
/// the result instead of aborting the plan.
pub fn run_single(
    plan: &ExperimentPlan,
    arch: ArchKind,
    seed: u64,
    convergence: &ConvergenceParams,
    reference_y0: f64,
) -> Result<RunResult> {
    let problem = plan.problem.build()?;
    let spec = ArchitectureSpec::new(arch, problem.dim + 1);
    let mut network = Network::build(&spec, plan.activation, plan.init, seed)?;
    let param_count = network.param_count();
    let config = TrainConfig {
        seed,
        stop_on_convergence: plan.early_stop.then_some(*convergence),
        ..plan.train.clone()
    };
    let mut result = RunResult {
        problem: plan.problem.name(),
        arch,
        param_count,
        seed,
        epochs_run: 0,
        convergence_epoch: None,
        final_loss: None,
        final_y0: None,
        reference_y0,
        rel_error: None,
        reached: false,
        wall_time_s: 0.0,
        error: None,
        series: None,
    };
    match train(&problem, &mut network, &config) {
        Ok(log) => {
            result.epochs_run = log.epochs();
            result.wall_time_s = log.wall_time.iter().sum();
            result.convergence_epoch = convergence_epoch(&log.loss, convergence);
            result.final_loss = log.loss.last().copied();
            if log.epochs() > 0 {
                let y0 = network.value_at(0.0, &problem.x0)?;
                let rel = (y0 - reference_y0).abs() / reference_y0.abs();
                result.final_y0 = Some(y0);
                result.rel_error = Some(rel);
                result.reached = rel <= plan.accuracy;
            }
            if plan.keep_series {
                result.series = Some(log);
            }
        }
        Err(e) => result.error = Some(e.to_string()),
    }
    Ok(result)
}

fn arch_order(plan_archs: &[ArchKind], a: &ArchKind) -> usize {
    plan_archs.iter().position(|p| p == a).unwrap_or(usize::MAX)
}

/// Run every (architecture, seed) pair on a worker pool. Output order is
/// plan architecture order, then seed, independent of scheduling.
pub fn run_plan(plan: &ExperimentPlan) -> Result<Vec<RunResult>> {
    plan.validate()?;
    for &arch in &plan.archs {
        ArchitectureSpec::new(arch, plan.input_dim()?).validate()?;
    }
    let convergence = plan.resolved_convergence()?;
    let reference = plan.problem.reference_y0()?.value;
    let jobs: Vec<(ArchKind, u64)> = plan
        .archs
        .iter()
        .flat_map(|&a| plan.seeds.iter().map(move |&s| (a, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(plan.threads)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    let mut results = pool.install(|| {
        jobs.par_iter()
            .map(|&(a, s)| run_single(plan, a, s, &convergence, reference))
            .collect::<Result<Vec<_>>>()
    })?;
    results.sort_by_key(|r| (arch_order(&plan.archs, &r.arch), r.seed));
    Ok(results)
}

/// Per-architecture statistics. Epoch statistics use converged runs only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub problem: String,
    pub arch: String,
    pub param_count: usize,
    pub runs: usize,
    pub failed: usize,
    pub converged: usize,
    pub not_converged: usize,
    pub epoch_mean: Option<f64>,
    pub epoch_std: Option<f64>,
    pub epoch_median: Option<f64>,
    pub rel_error_mean: Option<f64>,
    pub rel_error_std: Option<f64>,
    pub rel_error_median: Option<f64>,
    pub reached_fraction: f64,
    /// Convergence threshold the epochs were measured against.
    pub threshold: f64,
    /// Convergence epoch of the seed-averaged loss series, when available.
    pub mean_series_epoch: Option<usize>,
}

/// Mean, sample standard deviation (0 for a single value) and median.
pub fn describe(values: &[f64]) -> Option<(f64, f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    Some((mean, std, median(values)))
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Group runs by (problem, architecture) in first-appearance order.
pub fn aggregate(results: &[RunResult], convergence: &ConvergenceParams) -> Vec<Summary> {
    let mut keys: Vec<(String, ArchKind)> = Vec::new();
    for r in results {
        let k = (r.problem.clone(), r.arch);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(problem, arch)| {
            let group: Vec<&RunResult> = results
                .iter()
                .filter(|r| r.problem == problem && r.arch == arch)
                .collect();
            let ok: Vec<&&RunResult> = group.iter().filter(|r| r.error.is_none()).collect();
            let epochs: Vec<f64> = ok
                .iter()
                .filter_map(|r| r.convergence_epoch)
                .map(|e| e as f64)
                .collect();
            let errs: Vec<f64> = ok.iter().filter_map(|r| r.rel_error).collect();
            let e = describe(&epochs);
            let re = describe(&errs);
            let mean_series_epoch = mean_loss_series(&ok.iter().map(|r| **r).collect::<Vec<_>>())
                .and_then(|s| convergence_epoch(&s, convergence));
            Summary {
                problem,
                arch: arch.to_string(),
                param_count: group[0].param_count,
                runs: group.len(),
                failed: group.len() - ok.len(),
                converged: epochs.len(),
                not_converged: ok.len() - epochs.len(),
                epoch_mean: e.map(|s| s.0),
                epoch_std: e.map(|s| s.1),
                epoch_median: e.map(|s| s.2),
                rel_error_mean: re.map(|s| s.0),
                rel_error_std: re.map(|s| s.1),
                rel_error_median: re.map(|s| s.2),
                reached_fraction: if ok.is_empty() {
                    0.0
                } else {
                    ok.iter().filter(|r| r.reached).count() as f64 / ok.len() as f64
                },
                threshold: convergence.threshold,
                mean_series_epoch,
            }
        })
        .collect()
}

/// Epoch-wise mean of the runs' loss series over their common length.
fn mean_loss_series(runs: &[&RunResult]) -> Option<Vec<f64>> {
    let series: Vec<&Vec<f64>> = runs
        .iter()
        .filter_map(|r| r.series.as_ref().map(|s| &s.loss))
        .collect();
    if series.is_empty() || series.len() != runs.len() {
        return None;
    }
    let len = series.iter().map(|s| s.len()).min()?;
    if len == 0 {
        return None;
    }
    Some(
        (0..len)
            .map(|i| series.iter().map(|s| s[i]).sum::<f64>() / series.len() as f64)
            .collect(),
    )
}

/// One TNN against its same-parameter-count DNNs.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub tnn: ArchKind,
    pub param_count: usize,
    pub tnn_median_epoch: Option<f64>,
    /// Fastest eligible DNN by median convergence epoch.
    pub best_dnn: Option<ArchKind>,
    pub best_dnn_median_epoch: Option<f64>,
    /// `(dnn - tnn) / dnn` in percent; positive means the TNN is faster.
    pub gap_percent: Option<f64>,
    /// Cohort members left out because no seed reached the accuracy target.
    pub excluded: Vec<ArchKind>,
}

fn summary_for<'a>(summaries: &'a [Summary], arch: &ArchKind) -> Option<&'a Summary> {
    let name = arch.to_string();
    summaries.iter().find(|s| s.arch == name)
}

/// Pick the best DNN among `cohort`: smallest median convergence epoch, then
/// smaller median error, then smaller `x`. DNNs with no seed reaching the
/// accuracy target are excluded unless that would leave none.
pub fn compare(summaries: &[Summary], tnn: ArchKind, cohort: &[ArchKind]) -> Comparison {
    let tnn_summary = summary_for(summaries, &tnn);
    let candidates: Vec<(&ArchKind, &Summary)> = cohort
        .iter()
        .filter_map(|a| summary_for(summaries, a).map(|s| (a, s)))
        .filter(|(_, s)| s.epoch_median.is_some())
        .collect();
    let reaching: Vec<(&ArchKind, &Summary)> = candidates
        .iter()
        .filter(|(_, s)| s.reached_fraction > 0.0)
        .cloned()
        .collect();
    let (pool, excluded) = if reaching.is_empty() {
        (candidates, Vec::new())
    } else {
        let excluded = cohort
            .iter()
            .filter(|a| !reaching.iter().any(|(r, _)| r == a))
            .copied()
            .collect();
        (reaching, excluded)
    };
    let best = pool.into_iter().min_by(|(a, s), (b, t)| {
        s.epoch_median
            .partial_cmp(&t.epoch_median)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(
                s.rel_error_median
                    .unwrap_or(f64::INFINITY)
                    .total_cmp(&t.rel_error_median.unwrap_or(f64::INFINITY)),
            )
            .then(a.widths().0.cmp(&b.widths().0))
    });
    let tnn_median = tnn_summary.and_then(|s| s.epoch_median);
    let best_median = best.and_then(|(_, s)| s.epoch_median);
    Comparison {
        tnn,
        param_count: tnn_summary.map_or(0, |s| s.param_count),
        tnn_median_epoch: tnn_median,
        best_dnn: best.map(|(a, _)| *a),
        best_dnn_median_epoch: best_median,
        gap_percent: match (tnn_median, best_median) {
            (Some(t), Some(d)) if d > 0.0 => Some(100.0 * (d - t) / d),
            _ => None,
        },
        excluded,
    }
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub runs: Vec<RunResult>,
    pub summaries: Vec<Summary>,
    pub comparisons: Vec<Comparison>,
    pub convergence: ConvergenceParams,
}

/// Train each TNN in `tnns` plus all of its same-count DNNs, over all seeds.
fn sweep(plan: &ExperimentPlan, tnns: &[ArchKind]) -> Result<SweepOutcome> {
    let input_dim = plan.input_dim()?;
    let mut archs = Vec::new();
    let mut cohorts = Vec::new();
    for &t in tnns {
        if !matches!(t, ArchKind::Tnn { .. }) {
            return Err(Error::InvalidArchitecture(format!("{t} is not a TNN")));
        }
        let spec = ArchitectureSpec::new(t, input_dim);
        spec.validate()?;
        let cohort = dnn_cohort(&spec)?;
        for a in std::iter::once(t).chain(cohort.iter().copied()) {
            if !archs.contains(&a) {
                archs.push(a);
            }
        }
        cohorts.push((t, cohort));
    }
    let full = ExperimentPlan {
        archs,
        ..plan.clone()
    };
    let convergence = full.resolved_convergence()?;
    let runs = run_plan(&ExperimentPlan {
        auto_threshold: false,
        convergence,
        ..full
    })?;
    let summaries = aggregate(&runs, &convergence);
    let comparisons = cohorts.iter().map(|(t, c)| compare(&summaries, *t, c)).collect();
    Ok(SweepOutcome {
        runs,
        summaries,
        comparisons,
        convergence,
    })
}

/// TNN(width, chi) for each chi, each against its DNN cohort.
pub fn experiment_bond_sweep(plan: &ExperimentPlan, width: usize, chis: &[usize]) -> Result<SweepOutcome> {
    let tnns: Vec<ArchKind> = chis.iter().map(|&chi| ArchKind::Tnn { x: width, chi }).collect();
    sweep(plan, &tnns)
}

/// TNN(x, chi) for each width x at a fixed chi, each against its DNN cohort.
pub fn experiment_width_sweep(plan: &ExperimentPlan, widths: &[usize], chi: usize) -> Result<SweepOutcome> {
    let tnns: Vec<ArchKind> = widths.iter().map(|&x| ArchKind::Tnn { x, chi }).collect();
    sweep(plan, &tnns)
}

/// Tolerances for calling a larger network a match for a TNN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchTolerance {
    /// Allowed relative excess of the median convergence epoch.
    pub epoch_rel: f64,
    /// Allowed excess of the median relative error.
    pub accuracy_abs: f64,
}

impl Default for MatchTolerance {
    fn default() -> Self {
        MatchTolerance {
            epoch_rel: 0.1,
            accuracy_abs: 0.005,
        }
    }
}

#[derive(Clone, Debug)]
pub struct MatchOutcome {
    pub runs: Vec<RunResult>,
    pub summaries: Vec<Summary>,
    /// Smallest ladder entry within tolerance, with its parameter count.
    pub matched: Option<(ArchKind, usize)>,
    pub convergence: ConvergenceParams,
}

/// Train the TNN and a ladder of larger networks; report the smallest
/// (by parameter count) whose median convergence epoch and median error
/// are within tolerance of the TNN's.
pub fn experiment_match_dnn(
    plan: &ExperimentPlan,
    tnn: ArchKind,
    ladder: &[ArchKind],
    tol: MatchTolerance,
) -> Result<MatchOutcome> {
    if ladder.is_empty() {
        return Err(Error::NoCandidates("the comparison ladder is empty".into()));
    }
    let input_dim = plan.input_dim()?;
    ArchitectureSpec::new(tnn, input_dim).validate()?;
    let mut archs = vec![tnn];
    for &a in ladder {
        if !archs.contains(&a) {
            archs.push(a);
        }
    }
    let full = ExperimentPlan {
        archs,
        ..plan.clone()
    };
    let convergence = full.resolved_convergence()?;
    let runs = run_plan(&ExperimentPlan {
        auto_threshold: false,
        convergence,
        ..full
    })?;
    let summaries = aggregate(&runs, &convergence);
    let target = summary_for(&summaries, &tnn).cloned();
    let mut ranked: Vec<(ArchKind, usize)> = ladder
        .iter()
        .map(|&a| Ok((a, ArchitectureSpec::new(a, input_dim).param_count()?)))
        .collect::<Result<_>>()?;
    ranked.sort_by_key(|&(a, n)| (n, a));
    let matched = target.and_then(|t| {
        let (te, tr) = (t.epoch_median?, t.rel_error_median?);
        ranked.into_iter().find(|(a, _)| {
            summary_for(&summaries, a).is_some_and(|s| match (s.epoch_median, s.rel_error_median) {
                (Some(e), Some(r)) => e <= te * (1.0 + tol.epoch_rel) && r <= tr + tol.accuracy_abs,
                _ => false,
            })
        })
    });
    Ok(MatchOutcome {
        runs,
        summaries,
        matched,
        convergence,
    })
}

/// One CSV row per run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub problem: String,
    pub arch_kind: String,
    pub width_x: usize,
    pub width_y_or_chi: usize,
    pub param_count: usize,
    pub seed: u64,
    pub epochs_run: usize,
    pub convergence_epoch: Option<usize>,
    pub final_loss: Option<f64>,
    pub final_y0: Option<f64>,
    pub reference_y0: f64,
    pub rel_error: Option<f64>,
    pub reached_1pct: bool,
    pub wall_time_s: f64,
}

impl From<&RunResult> for RunRow {
    fn from(r: &RunResult) -> Self {
        let (x, y) = r.arch.widths();
        RunRow {
            problem: r.problem.clone(),
            arch_kind: r.arch.kind_name().to_ascii_uppercase(),
            width_x: x,
            width_y_or_chi: y,
            param_count: r.param_count,
            seed: r.seed,
            epochs_run: r.epochs_run,
            convergence_epoch: r.convergence_epoch,
            final_loss: r.final_loss,
            final_y0: r.final_y0,
            reference_y0: r.reference_y0,
            rel_error: r.rel_error,
            reached_1pct: r.reached,
            wall_time_s: r.wall_time_s,
        }
    }
}

impl RunRow {
    pub fn arch(&self) -> Result<ArchKind> {
        format!("{}({},{})", self.arch_kind, self.width_x, self.width_y_or_chi).parse()
    }

    /// The run as a result (no series, no error text).
    pub fn into_result(self) -> Result<RunResult> {
        Ok(RunResult {
            arch: self.arch()?,
            problem: self.problem,
            param_count: self.param_count,
            seed: self.seed,
            epochs_run: self.epochs_run,
            convergence_epoch: self.convergence_epoch,
            final_loss: self.final_loss,
            final_y0: self.final_y0,
            reference_y0: self.reference_y0,
            rel_error: self.rel_error,
            reached: self.reached_1pct,
            wall_time_s: self.wall_time_s,
            error: None,
            series: None,
        })
    }
}

pub const RUN_COLUMNS: [&str; 14] = [
    "problem",
    "arch_kind",
    "width_x",
    "width_y_or_chi",
    "param_count",
    "seed",
    "epochs_run",
    "convergence_epoch",
    "final_loss",
    "final_y0",
    "reference_y0",
    "rel_error",
    "reached_1pct",
    "wall_time_s",
];

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: impl IntoIterator<Item = T>) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(BufWriter::new(file));
    w.write_record(header).map_err(csv_err(path))?;
    for row in rows {
        w.serialize(row).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Write one row per run, in the order given.
pub fn emit_csv(results: &[RunResult], path: &Path) -> Result<()> {
    write_rows(path, &RUN_COLUMNS, results.iter().map(RunRow::from))
}

pub fn read_csv(path: &Path) -> Result<Vec<RunResult>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let headers = r.headers().map_err(csv_err(path))?.clone();
    if headers.iter().ne(RUN_COLUMNS.iter().copied()) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            message: format!("unexpected header {:?}", headers.iter().collect::<Vec<_>>()),
        });
    }
    r.deserialize::<RunRow>()
        .map(|row| row.map_err(csv_err(path))?.into_result())
        .collect()
}

#[derive(Serialize)]
struct SeriesRow<'a> {
    run_id: &'a str,
    epoch: usize,
    loss: f64,
    smoothed_loss: f64,
    y0: f64,
}

/// One row per epoch of every run that kept its series.
pub fn emit_series_csv(results: &[RunResult], alpha: f64, path: &Path) -> Result<()> {
    let mut rows = Vec::new();
    let ids: Vec<String> = results.iter().map(RunResult::run_id).collect();
    for (r, id) in results.iter().zip(&ids) {
        let Some(s) = &r.series else { continue };
        if s.loss.is_empty() {
            continue;
        }
        let smooth = ema_smooth(&s.loss, alpha)?;
        for (i, ((l, sm), y)) in s.loss.iter().zip(&smooth).zip(&s.y0).enumerate() {
            rows.push(SeriesRow {
                run_id: id,
                epoch: i + 1,
                loss: *l,
                smoothed_loss: *sm,
                y0: *y,
            });
        }
    }
    write_rows(path, &["run_id", "epoch", "loss", "smoothed_loss", "y0"], rows)
}

pub fn emit_summary_csv(summaries: &[Summary], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for s in summaries {
        w.serialize(s).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// Human-readable comparison lines.
pub fn write_comparisons(out: &mut impl Write, comparisons: &[Comparison]) -> std::io::Result<()> {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.1}"));
    for c in comparisons {
        writeln!(
            out,
            "{} ({} params): median epoch {} | best DNN {} median epoch {} | gap {}%{}",
            c.tnn,
            c.param_count,
            fmt(c.tnn_median_epoch),
            c.best_dnn.map_or("-".to_string(), |a| a.to_string()),
            fmt(c.best_dnn_median_epoch),
            fmt(c.gap_percent),
            if c.excluded.is_empty() {
                String::new()
            } else {
                format!(
                    " | excluded (never within accuracy): {}",
                    c.excluded
                        .iter()
                        .map(|a| a.to_string())
                        .collect::<Vec<_>>()
                        .join(" ")
                )
            }
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn enumeration_examples() {
        assert_eq!(enumerate_dnn_matches(353, 11), vec![(2, 82), (6, 35)]);
        assert_eq!(enumerate_dnn_matches(13, 11), vec![]);
        let n = ArchitectureSpec::new(ArchKind::Dnn { x: 6, y: 35 }, 11)
            .param_count()
            .unwrap();
        assert!(enumerate_dnn_matches(n, 11).contains(&(6, 35)));
    }

    #[test]
    fn enumeration_agrees_with_brute_force() {
        for target in [100, 353, 481, 737, 1057, 2000] {
            for n in [3, 11] {
                let mut brute = Vec::new();
                for x in 1..=target {
                    for y in 1..=target {
                        if (n + 1) * x + (x + 1) * y + y + 1 == target {
                            brute.push((x, y));
                        }
                    }
                }
                assert_eq!(enumerate_dnn_matches(target, n), brute);
            }
        }
    }

    #[test]
    fn half_bond_cohort_contains_square_dnn() {
        let spec = ArchitectureSpec::new(ArchKind::Tnn { x: 16, chi: 8 }, 11);
        assert!(dnn_cohort(&spec)
            .unwrap()
            .contains(&ArchKind::Dnn { x: 16, y: 16 }));
    }

    fn fake(arch: ArchKind, seed: u64, epoch: Option<usize>, rel: f64) -> RunResult {
        RunResult {
            problem: "bsb".into(),
            arch,
            param_count: 353,
            seed,
            epochs_run: 3000,
            convergence_epoch: epoch,
            final_loss: Some(0.5),
            final_y0: Some(12.0),
            reference_y0: 12.3,
            rel_error: Some(rel),
            reached: rel <= 0.01,
            wall_time_s: 1.0,
            error: None,
            series: None,
        }
    }

    #[test]
    fn aggregate_statistics() {
        let a = ArchKind::Tnn { x: 16, chi: 4 };
        let c = ConvergenceParams::default();
        let one = aggregate(&[fake(a, 0, Some(100), 0.001)], &c);
        assert_eq!(one[0].epoch_std, Some(0.0));
        let two = aggregate(
            &[
                fake(a, 0, Some(100), 0.001),
                fake(a, 1, Some(300), 0.02),
                fake(a, 2, None, 0.5),
            ],
            &c,
        );
        let s = &two[0];
        assert_eq!(s.epoch_mean, Some(200.0));
        assert!((s.epoch_std.unwrap() - 141.421_356_237).abs() < 1e-6);
        assert_eq!(s.epoch_median, Some(200.0));
        assert_eq!((s.converged, s.not_converged), (2, 1));
        assert!((s.reached_fraction - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn best_dnn_rules() {
        let t = ArchKind::Tnn { x: 16, chi: 4 };
        let d1 = ArchKind::Dnn { x: 2, y: 82 };
        let d2 = ArchKind::Dnn { x: 6, y: 35 };
        let c = ConvergenceParams::default();
        let mut runs = vec![
            fake(t, 0, Some(500), 0.001),
            fake(d1, 0, Some(400), 0.5),
            fake(d2, 0, Some(700), 0.001),
        ];
        // d1 is faster but never accurate, so it is filtered out.
        let s = aggregate(&runs, &c);
        let cmp = compare(&s, t, &[d1, d2]);
        assert_eq!(cmp.best_dnn, Some(d2));
        assert_eq!(cmp.excluded, vec![d1]);
        assert!((cmp.gap_percent.unwrap() - 100.0 * 200.0 / 700.0).abs() < 1e-9);
        // Tie on epochs: smaller error wins.
        runs[1] = fake(d1, 0, Some(700), 0.0005);
        let cmp = compare(&aggregate(&runs, &c), t, &[d1, d2]);
        assert_eq!(cmp.best_dnn, Some(d1));
    }

    #[test]
    fn csv_round_trip_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.csv");
        emit_csv(&[], &path).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap().trim(),
            RUN_COLUMNS.join(",")
        );
        let mut runs = vec![
            fake(ArchKind::Tnn { x: 16, chi: 4 }, 3, Some(812), 0.004_123_456_789),
            fake(ArchKind::Dnn { x: 6, y: 35 }, 4, None, 0.1),
        ];
        runs[1].final_loss = None;
        runs[1].wall_time_s = 0.1 + 0.2;
        emit_csv(&runs, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text
            .lines()
            .nth(2)
            .unwrap()
            .starts_with("bsb,DNN,6,35,353,4,3000,,,"));
        assert_eq!(read_csv(&path).unwrap(), runs);
    }

    #[test]
    fn empty_ladder_is_an_error() {
        let plan = ExperimentPlan::new(
            ProblemId::parse("bsb").unwrap(),
            vec![ArchKind::Tnn { x: 16, chi: 4 }],
            vec![0],
        );
        assert!(matches!(
            experiment_match_dnn(
                &plan,
                ArchKind::Tnn { x: 16, chi: 4 },
                &[],
                MatchTolerance::default()
            ),
            Err(Error::NoCandidates(_))
        ));
    }

    #[test]
    fn one_epoch_smoke_plan() {
        let mut plan = ExperimentPlan::new(
            ProblemId::parse("bsb").unwrap().with_steps(5),
            vec![ArchKind::Tnn { x: 16, chi: 4 }],
            vec![7],
        );
        plan.train.epochs = 1;
        plan.train.batch_size = 8;
        let out = experiment_bond_sweep(&plan, 16, &[4]).unwrap();
        assert_eq!(out.runs.len(), 3);
        assert!(out
            .runs
            .iter()
            .all(|r| r.convergence_epoch.is_none() && r.epochs_run == 1));
        assert_eq!(out.runs[0].arch, ArchKind::Tnn { x: 16, chi: 4 });
        for r in &out.runs {
            let spec = ArchitectureSpec::new(r.arch, 11);
            assert_eq!(r.param_count, spec.param_count().unwrap());
        }
    }
}
