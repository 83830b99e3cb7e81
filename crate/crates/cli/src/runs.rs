//! Subcommand bodies: train, eval, compare, diagnose, calibrate-gate.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use deltalab_core::diagnostics::{
    classify_failure, fit_pca, trajectory_metrics, FailureLabel, TrajectoryMetrics, TrajectoryRecord,
};
use deltalab_core::rng;
use deltalab_core::smallgrad::{from_snapshot, to_snapshot};
use deltalab_core::stats;
use deltalab_core::student::StudentGenerator;
use deltalab_core::trainer::{evaluate, fmt_f64, mode_accuracy, training_log_csv, AblationFlags, GateParams, Models, StepRecord};
use deltalab_core::world::TeacherKind;
use deltalab_core::Error as CoreError;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::manifest::RunManifest;

pub const CONFIG_FILE: &str = "config.toml";
pub const LOG_FILE: &str = "training_log.csv";
pub const GENERATOR_FILE: &str = "generator.snapshot";
pub const CRITIC_FILE: &str = "critic.snapshot";
pub const GATE_FILE: &str = "gate.json";
pub const EVAL_DIR: &str = "eval";

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    fs::write(dir.join(name), contents).with_context(|| format!("writing {}", dir.join(name).display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub params: Option<GateParams>,
    pub warmup_samples: usize,
    pub warmup_rho_median: Option<f64>,
    pub warmup_rho_iqr: Option<f64>,
}

impl GateReport {
    fn new(params: Option<GateParams>, rhos: &[f64]) -> Self {
        Self {
            params,
            warmup_samples: rhos.len(),
            warmup_rho_median: stats::median(rhos),
            warmup_rho_iqr: stats::iqr(rhos),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub log: Vec<StepRecord>,
    pub gate: GateReport,
    pub generator: StudentGenerator,
}

/// Directory name used when none is given.
pub fn default_run_name(cfg: &ExperimentConfig) -> String {
    format!("train-{}-seed{}", &cfg.hash()[..12], cfg.seed)
}

/// Trains under `cfg` and writes the run directory. On a training failure
/// the log, config and manifest are still written before the error is
/// returned.
pub fn run_train(cfg: &ExperimentConfig, dir: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let world = cfg.world()?;
    let start = Instant::now();
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut models = Models::init(&world, &cfg.train.rollout, &cfg.models, cfg.seed);
    let outcome = models.train(&world, &cfg.train, &mut rng::stream(cfg.seed, "train"));
    let gate = GateReport::new(outcome.gate, &outcome.warmup_rho);

    write(dir, CONFIG_FILE, &cfg.canonical().to_toml()?)?;
    write(dir, LOG_FILE, &training_log_csv(&outcome.log))?;
    write(dir, GATE_FILE, &(serde_json::to_string_pretty(&gate)? + "\n"))?;
    let mut files = vec![CONFIG_FILE, LOG_FILE, GATE_FILE];
    if outcome.error.is_none() {
        write(dir, GENERATOR_FILE, &to_snapshot(models.generator.net()))?;
        write(dir, CRITIC_FILE, &to_snapshot(models.critic.net()))?;
        files.extend([GENERATOR_FILE, CRITIC_FILE]);
    }
    let manifest = RunManifest::build(dir, cfg, &files, start.elapsed())?;
    manifest.write(dir)?;
    if let Some(e) = outcome.error {
        return Err(anyhow::Error::new(e).context(format!("training failed after {} steps", outcome.log.len())));
    }
    Ok(TrainSummary {
        dir: dir.to_path_buf(),
        manifest,
        log: outcome.log,
        gate,
        generator: models.generator,
    })
}

pub fn load_run(dir: &Path) -> Result<(ExperimentConfig, StudentGenerator)> {
    let cfg = ExperimentConfig::load(&dir.join(CONFIG_FILE))?;
    let snap = dir.join(GENERATOR_FILE);
    if !snap.exists() {
        return Err(anyhow::Error::new(CoreError::Usage(format!(
            "no generator snapshot in {}; train the run first",
            dir.display()
        ))));
    }
    let net = from_snapshot(&fs::read_to_string(&snap)?)?;
    let world = cfg.world()?;
    let gen = StudentGenerator::from_net(net, world.dim(), cfg.train.rollout.chunk_len, world.embedding_dim())?;
    Ok((cfg, gen))
}

/// Metrics of one evaluation rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRow {
    pub seed: u64,
    pub rollout: usize,
    pub accuracy: f64,
    pub scatter: f64,
    pub displacement: Option<f64>,
    pub smoothness: Option<f64>,
    pub direction_autocorrelation: Option<f64>,
    pub label: FailureLabel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub metric: String,
    pub median: f64,
    pub iqr: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub rows: Vec<RolloutRow>,
    pub table: Vec<AggregateRow>,
    /// Fraction of all evaluated chunks ending on their consistent mode.
    pub chunk_accuracy: f64,
    pub trajectory: TrajectoryRecord,
}

pub const EVAL_METRICS: [&str; 5] = ["accuracy", "scatter", "displacement", "smoothness", "direction_autocorrelation"];

fn metric_of(row: &RolloutRow, metric: &str) -> Option<f64> {
    match metric {
        "accuracy" => Some(row.accuracy),
        "scatter" => Some(row.scatter),
        "displacement" => row.displacement,
        "smoothness" => row.smoothness,
        "direction_autocorrelation" => row.direction_autocorrelation,
        _ => None,
    }
}

/// Median and IQR of each metric over all rows where it is defined.
pub fn aggregate(rows: &[RolloutRow]) -> Vec<AggregateRow> {
    EVAL_METRICS
        .iter()
        .map(|m| {
            let values: Vec<f64> = rows.iter().filter_map(|r| metric_of(r, m)).filter(|v| v.is_finite()).collect();
            AggregateRow {
                metric: (*m).to_string(),
                median: stats::median(&values).unwrap_or(f64::NAN),
                iqr: stats::iqr(&values).unwrap_or(f64::NAN),
                count: values.len(),
            }
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn rollout_rows_csv(rows: &[RolloutRow]) -> String {
    let mut out = String::from("seed,rollout,accuracy,scatter,displacement,smoothness,direction_autocorrelation,label\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.seed,
            r.rollout,
            fmt_f64(r.accuracy),
            fmt_f64(r.scatter),
            opt(r.displacement),
            opt(r.smoothness),
            opt(r.direction_autocorrelation),
            r.label.name()
        );
    }
    out
}

pub fn aggregate_csv(table: &[AggregateRow]) -> String {
    let mut out = String::from("metric,median,iqr,count\n");
    for r in table {
        let _ = writeln!(out, "{},{},{},{}", r.metric, fmt_f64(r.median), fmt_f64(r.iqr), r.count);
    }
    out
}

/// Evaluates a trained generator without writing anything.
pub fn evaluate_generator(
    cfg: &ExperimentConfig,
    gen: &StudentGenerator,
    n_rollouts: usize,
    seeds: &[u64],
) -> Result<EvalSummary> {
    let world = cfg.world()?;
    let mut seeds = seeds.to_vec();
    seeds.sort_unstable();
    seeds.dedup();
    let mut rows = Vec::new();
    let mut all_chunks = Vec::new();
    for (si, &seed) in seeds.iter().enumerate() {
        let chunks = evaluate(gen, &world, &cfg.train.rollout, n_rollouts, &mut rng::stream(seed, "eval"))?;
        for r in 0..n_rollouts {
            let mine: Vec<_> = chunks.iter().filter(|c| c.rollout == r).cloned().collect();
            let traj = TrajectoryRecord::from_eval(&mine)?;
            let m = trajectory_metrics(&traj, &world, cfg.train.rollout.window)?;
            rows.push(rollout_row(seed, r, &m, cfg));
        }
        all_chunks.extend(chunks.into_iter().map(|mut c| {
            c.rollout += si * n_rollouts;
            c
        }));
    }
    let chunk_accuracy = mode_accuracy(&all_chunks).unwrap_or(f64::NAN);
    Ok(EvalSummary {
        table: aggregate(&rows),
        rows,
        chunk_accuracy,
        trajectory: TrajectoryRecord::from_eval(&all_chunks)?,
    })
}

fn rollout_row(seed: u64, rollout: usize, m: &TrajectoryMetrics, cfg: &ExperimentConfig) -> RolloutRow {
    RolloutRow {
        seed,
        rollout,
        accuracy: m.accuracy,
        scatter: m.scatter,
        displacement: m.displacement,
        smoothness: m.smoothness,
        direction_autocorrelation: m.direction_autocorrelation,
        label: classify_failure(m, &cfg.diagnostics),
    }
}

pub const EVAL_ROLLOUTS_FILE: &str = "eval_rollouts.csv";
pub const EVAL_TABLE_FILE: &str = "eval_table.csv";
pub const EVAL_TRAJECTORY_FILE: &str = "eval_trajectory.csv";

/// Evaluates the run in `run_dir` and writes `run_dir/eval/`.
pub fn run_eval(run_dir: &Path, n_rollouts: usize, seeds: &[u64]) -> Result<EvalSummary> {
    if n_rollouts == 0 || seeds.is_empty() {
        return Err(CoreError::Usage("eval needs at least one rollout and one seed".into()).into());
    }
    let start = Instant::now();
    let (cfg, gen) = load_run(run_dir)?;
    let summary = evaluate_generator(&cfg, &gen, n_rollouts, seeds)?;
    let dir = run_dir.join(EVAL_DIR);
    fs::create_dir_all(&dir)?;
    write(&dir, EVAL_ROLLOUTS_FILE, &rollout_rows_csv(&summary.rows))?;
    write(&dir, EVAL_TABLE_FILE, &aggregate_csv(&summary.table))?;
    write(&dir, EVAL_TRAJECTORY_FILE, &summary.trajectory.to_csv())?;
    RunManifest::build(
        &dir,
        &cfg,
        &[EVAL_ROLLOUTS_FILE, EVAL_TABLE_FILE, EVAL_TRAJECTORY_FILE],
        start.elapsed(),
    )?
    .write(&dir)?;
    Ok(summary)
}

/// One arm of a comparison: a name and the config it trains under.
#[derive(Debug, Clone, PartialEq)]
pub struct Arm {
    pub name: String,
    pub config: ExperimentConfig,
}

pub const ARM_NAMES: [&str; 5] = ["plain_dmd", "delta_forcing", "no_cont", "no_gate", "ideal_teacher"];

/// The named arm derived from `base`, or `None` for an unknown name.
pub fn arm(base: &ExperimentConfig, name: &str) -> Option<Arm> {
    let (flags, teacher) = match name {
        "plain_dmd" => (AblationFlags::PLAIN_DMD, TeacherKind::Marginalized),
        "delta_forcing" => (AblationFlags::FULL, TeacherKind::Marginalized),
        "no_cont" => (AblationFlags { no_gate: false, no_cont: true }, TeacherKind::Marginalized),
        "no_gate" => (AblationFlags { no_gate: true, no_cont: false }, TeacherKind::Marginalized),
        "ideal_teacher" => (AblationFlags::PLAIN_DMD, TeacherKind::HistoryAware),
        _ => return None,
    };
    let mut config = base.clone();
    config.train.flags = flags;
    config.train.teacher = teacher;
    Some(Arm {
        name: name.to_string(),
        config,
    })
}

pub fn default_arms(base: &ExperimentConfig) -> Vec<Arm> {
    ARM_NAMES.iter().map(|n| arm(base, n).expect("known arm")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub arm: String,
    pub seed: u64,
    pub accuracy: Option<f64>,
    pub scatter: Option<f64>,
    pub displacement: Option<f64>,
    pub labels: BTreeMap<String, usize>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub arm: String,
    pub median_accuracy: Option<f64>,
    pub iqr_accuracy: Option<f64>,
    pub median_scatter: Option<f64>,
    pub median_displacement: Option<f64>,
    pub labels: BTreeMap<String, usize>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedDelta {
    pub arm: String,
    pub reference: String,
    pub seed: u64,
    /// `accuracy(arm) − accuracy(reference)` on the shared seed.
    pub accuracy_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmSummary>,
    pub rows: Vec<CompareRow>,
    pub paired_deltas: Vec<PairedDelta>,
}

impl CompareReport {
    pub fn row(&self, arm: &str, seed: u64) -> Option<&CompareRow> {
        self.rows.iter().find(|r| r.arm == arm && r.seed == seed)
    }

    pub fn summary(&self, arm: &str) -> Option<&ArmSummary> {
        self.arms.iter().find(|a| a.arm == arm)
    }
}

pub fn compare_rows_csv(rows: &[CompareRow]) -> String {
    let labels = [
        FailureLabel::Healthy,
        FailureLabel::UnderReactive,
        FailureLabel::UnstructuredDrift,
        FailureLabel::ModeSeeking,
    ];
    let mut out = String::from("arm,seed,accuracy,scatter,displacement");
    for l in labels {
        let _ = write!(out, ",{}", l.name());
    }
    out.push_str(",error\n");
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{},{}",
            r.arm,
            r.seed,
            opt(r.accuracy),
            opt(r.scatter),
            opt(r.displacement)
        );
        for l in labels {
            let _ = write!(out, ",{}", r.labels.get(l.name()).copied().unwrap_or(0));
        }
        let _ = writeln!(out, ",{}", r.error.as_deref().unwrap_or("").replace([',', '\n'], ";"));
    }
    out
}

fn train_and_score(arm: &Arm, seed: u64, dir: &Path) -> Result<CompareRow> {
    let mut cfg = arm.config.clone();
    cfg.seed = seed;
    let trained = run_train(&cfg, dir)?;
    let eval = evaluate_generator(&cfg, &trained.generator, cfg.eval.rollouts, &[seed])?;
    let mut labels = BTreeMap::new();
    for r in &eval.rows {
        *labels.entry(r.label.name().to_string()).or_insert(0) += 1;
    }
    let med = |m: &str| eval.table.iter().find(|a| a.metric == m).map(|a| a.median).filter(|v| v.is_finite());
    Ok(CompareRow {
        arm: arm.name.clone(),
        seed,
        accuracy: Some(eval.chunk_accuracy),
        scatter: med("scatter"),
        displacement: med("displacement"),
        labels,
        error: None,
    })
}

pub const COMPARE_ROWS_FILE: &str = "compare_rows.csv";
pub const COMPARE_REPORT_FILE: &str = "compare_report.json";

/// Trains and evaluates every `(arm, seed)` pair on a pool of `workers`
/// threads; each pair owns `out/<arm>/seed-<seed>`. A failed pair is
/// recorded and the others still run. Paired deltas are taken against the
/// first arm.
pub fn run_compare(arms: &[Arm], seeds: &[u64], out: &Path, workers: usize) -> Result<CompareReport> {
    if arms.len() < 2 {
        return Err(CoreError::Usage("compare needs at least two arms".into()).into());
    }
    let mut names: Vec<&str> = arms.iter().map(|a| a.name.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    if names.len() != arms.len() {
        return Err(CoreError::Usage("arm names must be distinct".into()).into());
    }
    for a in arms {
        a.config.validate().with_context(|| format!("arm {}", a.name))?;
    }
    let start = Instant::now();
    fs::create_dir_all(out)?;
    let jobs: Vec<(usize, u64)> = (0..arms.len()).flat_map(|a| seeds.iter().map(move |&s| (a, s))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| anyhow!("building worker pool: {e}"))?;
    let rows: Vec<CompareRow> = pool.install(|| {
        jobs.par_iter()
            .map(|&(a, seed)| {
                let arm = &arms[a];
                let dir = out.join(&arm.name).join(format!("seed-{seed}"));
                train_and_score(arm, seed, &dir).unwrap_or_else(|e| CompareRow {
                    arm: arm.name.clone(),
                    seed,
                    accuracy: None,
                    scatter: None,
                    displacement: None,
                    labels: BTreeMap::new(),
                    error: Some(format!("{e:#}")),
                })
            })
            .collect()
    });

    let summaries = arms
        .iter()
        .map(|a| {
            let mine: Vec<&CompareRow> = rows.iter().filter(|r| r.arm == a.name).collect();
            let col = |f: fn(&CompareRow) -> Option<f64>| mine.iter().filter_map(|r| f(r)).collect::<Vec<f64>>();
            let acc = col(|r| r.accuracy);
            let mut labels = BTreeMap::new();
            for r in &mine {
                for (k, v) in &r.labels {
                    *labels.entry(k.clone()).or_insert(0) += v;
                }
            }
            ArmSummary {
                arm: a.name.clone(),
                median_accuracy: stats::median(&acc),
                iqr_accuracy: stats::iqr(&acc),
                median_scatter: stats::median(&col(|r| r.scatter)),
                median_displacement: stats::median(&col(|r| r.displacement)),
                labels,
                failures: mine.iter().filter(|r| r.error.is_some()).count(),
            }
        })
        .collect();

    let reference = &arms[0].name;
    let mut paired_deltas = Vec::new();
    for a in &arms[1..] {
        for &seed in seeds {
            let get = |name: &str| rows.iter().find(|r| r.arm == name && r.seed == seed).and_then(|r| r.accuracy);
            if let (Some(x), Some(r)) = (get(&a.name), get(reference)) {
                paired_deltas.push(PairedDelta {
                    arm: a.name.clone(),
                    reference: reference.clone(),
                    seed,
                    accuracy_delta: x - r,
                });
            }
        }
    }
    let report = CompareReport {
        seeds: seeds.to_vec(),
        arms: summaries,
        rows,
        paired_deltas,
    };
    write(out, COMPARE_ROWS_FILE, &compare_rows_csv(&report.rows))?;
    write(out, COMPARE_REPORT_FILE, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    RunManifest::build(out, &arms[0].config, &[COMPARE_ROWS_FILE, COMPARE_REPORT_FILE], start.elapsed())?.write(out)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnoseReport {
    pub label: FailureLabel,
    pub metrics: TrajectoryMetrics,
    pub explained_variance_ratio: [f64; 2],
    pub directions: [Vec<f64>; 2],
    pub states: usize,
}

pub const PCA_FILE: &str = "pca.csv";
pub const DIAGNOSE_REPORT_FILE: &str = "diagnose_report.json";

/// PCA projection, metrics and failure label of a trajectory CSV.
pub fn run_diagnose(trajectory_csv: &Path, cfg: &ExperimentConfig, out: &Path) -> Result<DiagnoseReport> {
    let start = Instant::now();
    let text = fs::read_to_string(trajectory_csv).with_context(|| format!("reading {}", trajectory_csv.display()))?;
    let traj = TrajectoryRecord::from_csv(&text).with_context(|| format!("parsing {}", trajectory_csv.display()))?;
    let world = cfg.world()?;
    let pca = fit_pca(&traj)?;
    let metrics = trajectory_metrics(&traj, &world, cfg.train.rollout.window)?;
    let report = DiagnoseReport {
        label: classify_failure(&metrics, &cfg.diagnostics),
        explained_variance_ratio: pca.explained_variance_ratio,
        directions: pca.directions.clone(),
        states: traj.len(),
        metrics,
    };
    fs::create_dir_all(out)?;
    write(out, PCA_FILE, &pca.to_csv(&traj))?;
    write(out, DIAGNOSE_REPORT_FILE, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    RunManifest::build(out, cfg, &[PCA_FILE, DIAGNOSE_REPORT_FILE], start.elapsed())?.write(out)?;
    Ok(report)
}

/// Runs only the warm-up phase and reports the calibrated gate.
pub fn run_calibrate_gate(cfg: &ExperimentConfig, out: &Path) -> Result<GateReport> {
    let mut warm = cfg.clone();
    warm.train.steps = cfg.train.warmup_steps;
    warm.train.gate.mu = None;
    warm.train.gate.sharpness = None;
    warm.validate()?;
    let start = Instant::now();
    let world = warm.world()?;
    let mut models = Models::init(&world, &warm.train.rollout, &warm.models, warm.seed);
    let outcome = models.train(&world, &warm.train, &mut rng::stream(warm.seed, "train"));
    if let Some(e) = outcome.error {
        return Err(e.into());
    }
    let report = GateReport::new(outcome.gate, &outcome.warmup_rho);
    fs::create_dir_all(out)?;
    write(out, GATE_FILE, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    RunManifest::build(out, &warm, &[GATE_FILE], start.elapsed())?.write(out)?;
    Ok(report)
}
