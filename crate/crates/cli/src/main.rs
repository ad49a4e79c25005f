use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cmml_core::bench::generate_benchmark;
use cmml_core::config::{ExperimentConfig, Variant};
use cmml_core::experiment::{
    evaluate_checkpoint, grid_csv, run_ablation, run_experiment, run_grid, write_outputs, DEFAULT_ETAS,
};
use cmml_core::metrics::{MetricKind, PerformanceMatrix};
use cmml_core::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "cmml", version, about = "Continual missing-modality learning with routed low-rank factors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed for data, backbone and training.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic benchmark to `<out>/benchmark.json`.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on every task in order and write results and a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Report oracle-task-id scores as the headline numbers.
        #[arg(long)]
        oracle_task_id: bool,
    },
    /// Re-score a checkpoint directory on its regenerated benchmark.
    Eval {
        checkpoint: PathBuf,
        /// Config (and seed) the checkpoint must match. Unchecked when both
        /// are omitted.
        #[command(flatten)]
        common: Common,
        /// Score with the true task id instead of the predicted one.
        #[arg(long)]
        oracle_task_id: bool,
        /// Where to write the evaluation JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare model variants over consecutive seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        num_seeds: u64,
        /// Variants to run; all of them by default.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<VariantArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// AP and FG from a stored performance matrix.
    Metrics {
        matrix: PathBuf,
        #[arg(long, value_enum, default_value_t = MetricArg::Accuracy)]
        metric: MetricArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep missing ratio and availability pattern over consecutive seeds.
    Grid {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 3)]
        num_seeds: u64,
        #[arg(long, value_delimiter = ',')]
        etas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Full,
    StaticLora,
    NoCrossModalGuide,
    UnifiedPool,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::StaticLora => Variant::StaticLora,
            VariantArg::NoCrossModalGuide => Variant::NoCrossModalGuide,
            VariantArg::UnifiedPool => Variant::UnifiedPool,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Accuracy,
    F1Macro,
}

impl From<MetricArg> for MetricKind {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Accuracy => MetricKind::Accuracy,
            MetricArg::F1Macro => MetricKind::F1Macro,
        }
    }
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_config() {
            EXIT_CONFIG
        } else if e.is_numerical() {
            EXIT_NUMERICAL
        } else {
            EXIT_FAILURE
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn config_failure(e: Error) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message: e.to_string(),
    }
}

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig, Failure> {
    match path {
        Some(p) => ExperimentConfig::from_file(p).map_err(config_failure),
        None => Ok(ExperimentConfig::default()),
    }
}

fn resolve(common: &Common) -> Result<ExperimentConfig, Failure> {
    let cfg = load_config(common.config.as_deref())?;
    let cfg = match common.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    };
    cfg.validate().map_err(config_failure)?;
    Ok(cfg)
}

fn write_file(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::from(Error::Io { path: dir.into(), source: e }))?;
    }
    fs::write(path, text).map_err(|e| Failure::from(Error::Io { path: path.into(), source: e }))
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("report serializes")
}

fn seeds(base: u64, n: u64) -> Result<Vec<u64>, Failure> {
    if n == 0 {
        return Err(Failure {
            code: EXIT_CONFIG,
            message: "--num-seeds must be at least 1".into(),
        });
    }
    Ok((0..n).map(|i| base.wrapping_add(i)).collect())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Generate { common, out } => {
            let cfg = resolve(&common)?;
            let bench = generate_benchmark(&cfg.benchmark, &cfg.backbone)?;
            let path = out.join("benchmark.json");
            write_file(&path, &bench.to_json())?;
            println!("wrote {} ({} tasks, fingerprint {})", path.display(), bench.tasks.len(), bench.fingerprint());
        }
        Command::Train {
            common,
            out,
            oracle_task_id,
        } => {
            let cfg = resolve(&common)?;
            let run = run_experiment(&cfg)?;
            write_outputs(&run, &out)?;
            let r = &run.result;
            let (mode, ap, fg) = if oracle_task_id {
                ("oracle", r.oracle_ap, r.oracle_fg)
            } else {
                ("agnostic", r.ap, r.fg)
            };
            let fg = fg.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
            println!("{mode} AP {ap:.4} FG {fg} ({:.1}s) -> {}", r.wall_clock_seconds, out.display());
        }
        Command::Eval {
            checkpoint,
            common,
            oracle_task_id,
            out,
        } => {
            let expected = if common.config.is_some() || common.seed.is_some() {
                Some(resolve(&common)?)
            } else {
                None
            };
            let eval = evaluate_checkpoint(&checkpoint, expected.as_ref())?;
            let (mode, scores, mean) = if oracle_task_id {
                ("oracle", &eval.oracle, eval.oracle_mean)
            } else {
                ("agnostic", &eval.agnostic, eval.agnostic_mean)
            };
            if let Some(path) = out {
                write_file(&path, &to_json(&eval))?;
            }
            let per_task: Vec<String> = scores.iter().map(|v| format!("{v:.4}")).collect();
            println!("{mode} mean {mean:.4} per task [{}]", per_task.join(", "));
        }
        Command::Ablate {
            common,
            num_seeds,
            variants,
            out,
        } => {
            let cfg = resolve(&common)?;
            let variants: Vec<Variant> = if variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                variants.into_iter().map(Variant::from).collect()
            };
            let report = run_ablation(&cfg, &seeds(cfg.seed, num_seeds)?, &variants)?;
            write_file(&out.join("ablation.json"), &to_json(&report))?;
            write_file(&out.join("ablation.csv"), &report.to_csv())?;
            for s in &report.ranking {
                println!("{:<22} AP {:.4}", s.variant.as_str(), s.mean_ap);
            }
        }
        Command::Metrics { matrix, metric, out } => {
            let text = fs::read_to_string(&matrix).map_err(|e| Failure::from(Error::Io { path: matrix.clone(), source: e }))?;
            let report = PerformanceMatrix::from_csv(&text, metric.into())?.report()?;
            let json = to_json(&report);
            match out {
                Some(path) => write_file(&path, &json)?,
                None => println!("{json}"),
            }
        }
        Command::Grid {
            common,
            num_seeds,
            etas,
            out,
        } => {
            let cfg = resolve(&common)?;
            let etas = if etas.is_empty() { DEFAULT_ETAS.to_vec() } else { etas };
            let rows = run_grid(&cfg, &etas, &seeds(cfg.seed, num_seeds)?)?;
            let path = out.join("grid.csv");
            write_file(&path, &grid_csv(&rows))?;
            println!("wrote {} ({} rows)", path.display(), rows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
