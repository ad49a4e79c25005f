//! End-to-end runs: generate, train sequentially, evaluate, persist; plus the
//! ablation and missing-ratio sweeps built on top.

use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{generate_benchmark, Benchmark, BenchmarkSpec};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{ExperimentConfig, Variant};
use crate::error::{Error, Result};
use crate::metrics::{MetricKind, PerformanceMatrix};
use crate::model::{
    evaluate_all, mean_modality_cosine, train_task, CmmlModel, EvalColumn, RoutingLog, TaskTrainLog,
    TrainOptions,
};

/// RNG stream for adapter initialization and batch order, kept apart from
/// the data and backbone streams.
const TRAIN_STREAM: u64 = 1;

pub const RESULT_FILE: &str = "result.json";
pub const MATRIX_FILE: &str = "matrix.csv";
pub const ORACLE_MATRIX_FILE: &str = "oracle_matrix.csv";
pub const ROUTING_LOG_FILE: &str = "routing_log.json";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub seed: u64,
    pub variant: Variant,
    pub config_hash: String,
    pub data_fingerprint: String,
    pub metric: MetricKind,
    /// Task-agnostic performance matrix.
    pub matrix: PerformanceMatrix,
    pub ap: f64,
    pub fg: Option<f64>,
    pub oracle_matrix: PerformanceMatrix,
    pub oracle_ap: f64,
    pub oracle_fg: Option<f64>,
    /// Per-task fraction of test samples routed to the right task after
    /// the final task.
    pub task_prediction_accuracy: Vec<f64>,
    /// Mean `cos(q_v, q_t)` on complete test samples after the final task.
    pub modality_cosine: Option<f64>,
    pub training: Vec<TaskTrainLog>,
    pub config: ExperimentConfig,
    pub wall_clock_seconds: f64,
}

impl ExperimentResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serializes")
    }
}

pub struct ExperimentRun {
    pub result: ExperimentResult,
    pub model: CmmlModel,
    pub routing_log: RoutingLog,
    pub benchmark: Benchmark,
    /// Evaluation column recorded after each task.
    pub columns: Vec<EvalColumn>,
}

fn fill_column(m: &mut PerformanceMatrix, j: usize, values: &[f64]) -> Result<()> {
    for (i, &v) in values.iter().enumerate() {
        m.set(i, j, v)?;
    }
    Ok(())
}

/// Trains on `benchmark` task by task, evaluating after each.
pub fn run_on_benchmark(cfg: &ExperimentConfig, benchmark: Benchmark, opts: TrainOptions) -> Result<ExperimentRun> {
    let start = Instant::now();
    cfg.validate()?;
    let mut model = CmmlModel::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(TRAIN_STREAM);
    let metric = cfg.metric();
    let t = benchmark.tasks.len();
    let mut matrix = PerformanceMatrix::new(t, metric);
    let mut oracle = PerformanceMatrix::new(t, metric);
    let mut log = RoutingLog::default();
    let mut training = Vec::with_capacity(t);
    let mut columns = Vec::with_capacity(t);
    for (j, task) in benchmark.tasks.iter().enumerate() {
        training.push(train_task(&mut model, task, cfg, &mut rng, &mut log, opts)?);
        let col = evaluate_all(
            &model,
            &benchmark.tasks[..=j],
            metric,
            cfg.evaluation.empty_class_f1,
            &mut log,
        )?;
        fill_column(&mut matrix, j, &col.agnostic)?;
        fill_column(&mut oracle, j, &col.oracle)?;
        columns.push(col);
    }
    let fg = |m: &PerformanceMatrix| if t >= 2 { m.average_forgetting().map(Some) } else { Ok(None) };
    let result = ExperimentResult {
        seed: cfg.seed,
        variant: cfg.adapters.variant,
        config_hash: cfg.hash(),
        data_fingerprint: benchmark.fingerprint(),
        metric,
        ap: matrix.average_performance()?,
        fg: fg(&matrix)?,
        oracle_ap: oracle.average_performance()?,
        oracle_fg: fg(&oracle)?,
        matrix,
        oracle_matrix: oracle,
        task_prediction_accuracy: columns.last().map(|c| c.task_prediction.clone()).unwrap_or_default(),
        modality_cosine: mean_modality_cosine(&model, &benchmark.tasks)?,
        training,
        config: cfg.clone(),
        wall_clock_seconds: start.elapsed().as_secs_f64(),
    };
    Ok(ExperimentRun {
        result,
        model,
        routing_log: log,
        benchmark,
        columns,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentRun> {
    cfg.validate()?;
    let bench = generate_benchmark(&cfg.benchmark, &cfg.backbone)?;
    run_on_benchmark(cfg, bench, TrainOptions::default())
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes result, matrices, routing log, exported keys and checkpoint.
pub fn write_outputs(run: &ExperimentRun, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join(RESULT_FILE), &run.result.to_json())?;
    write(&out.join(MATRIX_FILE), &run.result.matrix.to_csv())?;
    write(&out.join(ORACLE_MATRIX_FILE), &run.result.oracle_matrix.to_csv())?;
    write(&out.join(ROUTING_LOG_FILE), &run.routing_log.to_json())?;
    write(
        &out.join(crate::checkpoint::KEYS_FILE),
        &serde_json::to_string_pretty(&run.model.keys).expect("keys serialize"),
    )?;
    save_checkpoint(&run.model, &run.result.config, &out.join(CHECKPOINT_DIR))
}

/// Loads a config file, runs it, and persists everything under `out`.
pub fn run_experiment_file(config_path: &Path, out: &Path) -> Result<ExperimentResult> {
    let cfg = ExperimentConfig::from_file(config_path)?;
    let run = run_experiment(&cfg)?;
    write_outputs(&run, out)?;
    Ok(run.result)
}

/// Re-scores a checkpoint on the benchmark its config regenerates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEval {
    pub config_hash: String,
    pub metric: MetricKind,
    pub agnostic: Vec<f64>,
    pub oracle: Vec<f64>,
    pub task_prediction: Vec<f64>,
    pub agnostic_mean: f64,
    pub oracle_mean: f64,
}

pub fn evaluate_checkpoint(dir: &Path, expected: Option<&ExperimentConfig>) -> Result<CheckpointEval> {
    let (model, cfg) = load_checkpoint(dir, expected)?;
    let bench = generate_benchmark(&cfg.benchmark, &cfg.backbone)?;
    let n = model.registry.len();
    if n > bench.tasks.len() {
        return Err(Error::CheckpointMismatch("checkpoint holds more tasks than the benchmark".into()));
    }
    let mut log = RoutingLog::default();
    let col = evaluate_all(
        &model,
        &bench.tasks[..n],
        cfg.metric(),
        cfg.evaluation.empty_class_f1,
        &mut log,
    )?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(CheckpointEval {
        config_hash: cfg.hash(),
        metric: cfg.metric(),
        agnostic_mean: mean(&col.agnostic),
        oracle_mean: mean(&col.oracle),
        agnostic: col.agnostic,
        oracle: col.oracle,
        task_prediction: col.task_prediction,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub ap: f64,
    pub fg: Option<f64>,
    pub oracle_ap: f64,
    pub data_fingerprint: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub variant: Variant,
    pub mean_ap: f64,
    pub mean_fg: Option<f64>,
    pub mean_oracle_ap: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub runs: Vec<AblationRun>,
    /// Variants ordered by mean AP, best first.
    pub ranking: Vec<AblationSummary>,
}

impl AblationReport {
    pub fn summary(&self, v: Variant) -> Option<&AblationSummary> {
        self.ranking.iter().find(|s| s.variant == v)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["rank", "variant", "mean_ap", "mean_fg", "mean_oracle_ap"])
            .expect("in-memory write");
        for (i, s) in self.ranking.iter().enumerate() {
            w.write_record([
                (i + 1).to_string(),
                s.variant.as_str().to_string(),
                s.mean_ap.to_string(),
                s.mean_fg.map(|v| v.to_string()).unwrap_or_default(),
                s.mean_oracle_ap.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// Runs every variant on every seed; variants of one seed share the data.
pub fn run_ablation(base: &ExperimentConfig, seeds: &[u64], variants: &[Variant]) -> Result<AblationReport> {
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::invalid("ablation needs at least one seed and one variant"));
    }
    let mut runs = Vec::new();
    for &seed in seeds {
        let seeded = base.clone().with_seed(seed);
        let bench = generate_benchmark(&seeded.benchmark, &seeded.backbone)?;
        let fingerprint = bench.fingerprint();
        for &variant in variants {
            let mut cfg = seeded.clone();
            cfg.adapters.variant = variant;
            let run = run_on_benchmark(&cfg, bench.clone(), TrainOptions::default())?;
            if run.result.data_fingerprint != fingerprint {
                return Err(Error::invalid("ablation variants saw different data"));
            }
            runs.push(AblationRun {
                variant,
                seed,
                ap: run.result.ap,
                fg: run.result.fg,
                oracle_ap: run.result.oracle_ap,
                data_fingerprint: fingerprint.clone(),
            });
        }
    }
    let n = seeds.len() as f64;
    let mut ranking: Vec<AblationSummary> = variants
        .iter()
        .map(|&variant| {
            let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.variant == variant).collect();
            let fg: Option<f64> = mine.iter().map(|r| r.fg).sum::<Option<f64>>().map(|s| s / n);
            AblationSummary {
                variant,
                mean_ap: mine.iter().map(|r| r.ap).sum::<f64>() / n,
                mean_fg: fg,
                mean_oracle_ap: mine.iter().map(|r| r.oracle_ap).sum::<f64>() / n,
            }
        })
        .collect();
    ranking.sort_by(|a, b| b.mean_ap.total_cmp(&a.mean_ap).then(a.variant.cmp(&b.variant)));
    Ok(AblationReport { runs, ranking })
}

pub const DEFAULT_ETAS: [f64; 5] = [0.1, 0.3, 0.5, 0.7, 0.9];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub eta: f64,
    pub image_avail: f64,
    pub text_avail: f64,
    pub seed: u64,
    pub ap: f64,
    pub fg: Option<f64>,
    pub oracle_ap: f64,
    pub oracle_fg: Option<f64>,
    pub task_prediction: f64,
}

/// Sweeps missing ratio × availability pattern × seed.
pub fn run_grid(base: &ExperimentConfig, etas: &[f64], seeds: &[u64]) -> Result<Vec<GridRow>> {
    let mut rows = Vec::new();
    for &eta in etas {
        for (image_avail, text_avail) in BenchmarkSpec::patterns(eta) {
            for &seed in seeds {
                let mut cfg = base.clone().with_seed(seed);
                cfg.benchmark.eta = eta;
                cfg.benchmark.image_avail = image_avail;
                cfg.benchmark.text_avail = text_avail;
                let r = run_experiment(&cfg)?.result;
                let tp = &r.task_prediction_accuracy;
                rows.push(GridRow {
                    eta,
                    image_avail,
                    text_avail,
                    seed,
                    ap: r.ap,
                    fg: r.fg,
                    oracle_ap: r.oracle_ap,
                    oracle_fg: r.oracle_fg,
                    task_prediction: tp.iter().sum::<f64>() / tp.len().max(1) as f64,
                });
            }
        }
    }
    Ok(rows)
}

pub fn grid_csv(rows: &[GridRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "eta",
        "image_avail",
        "text_avail",
        "seed",
        "ap",
        "fg",
        "oracle_ap",
        "oracle_fg",
        "task_prediction",
    ])
    .expect("in-memory write");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.eta.to_string(),
            r.image_avail.to_string(),
            r.text_avail.to_string(),
            r.seed.to_string(),
            r.ap.to_string(),
            opt(r.fg),
            r.oracle_ap.to_string(),
            opt(r.oracle_fg),
            r.task_prediction.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}
