#![allow(dead_code)]

use cmml_core::autograd::Graph;
use cmml_core::backbone::{Availability, Backbone, BackboneConfig, Label, MultimodalSample};
use cmml_core::bench::TaskData;
use cmml_core::config::{ExperimentConfig, Variant};
use cmml_core::loss::{ClassificationMode, LossConfig};
use cmml_core::memory::TaskBundle;
use cmml_core::model::{batch_objective, ModelSettings, RoutingLog, TrainOptions};
use cmml_core::routing::{GateMode, QueryPolicy};
use cmml_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn sample(
    cfg: &BackboneConfig,
    avail: Availability,
    label: Label,
    task_id: u32,
    rng: &mut ChaCha8Rng,
) -> MultimodalSample {
    let visual = avail
        .has_visual()
        .then(|| Tensor::randn(&[cfg.seq_v, cfg.d_raw], 1.0, rng));
    let text = avail
        .has_text()
        .then(|| Tensor::randn(&[cfg.seq_t, cfg.d_raw], 1.0, rng));
    MultimodalSample {
        visual,
        text,
        label,
        task_id,
    }
}

pub fn random_label(mode: ClassificationMode, classes: usize, rng: &mut ChaCha8Rng) -> Label {
    match mode {
        ClassificationMode::MulticlassCe => Label::Class(rng.random_range(0..classes)),
        ClassificationMode::MultilabelBce => {
            Label::Multi((0..classes).map(|_| u8::from(rng.random_bool(0.5))).collect())
        }
    }
}

/// Replaces every bundle parameter with Gaussian noise of the given std.
pub fn randomize(bundle: &mut TaskBundle, std: f64, rng: &mut ChaCha8Rng) {
    for p in bundle.params_mut() {
        let shape = p.value().shape().to_vec();
        *p.value_mut() = Tensor::randn(&shape, std, rng);
    }
}

pub fn settings(variant: Variant, cfg: &ExperimentConfig) -> ModelSettings {
    ModelSettings {
        variant,
        ..ModelSettings::from_config(cfg)
    }
}

/// Scalar objective value of `bundle` on `batch`.
pub fn objective(
    backbone: &Backbone,
    bundle: &TaskBundle,
    settings: &ModelSettings,
    batch: &[&MultimodalSample],
    loss: &LossConfig,
) -> f64 {
    let g = Graph::new();
    let mut log = RoutingLog::default();
    let (l, _) = batch_objective(&g, backbone, bundle, settings, batch, loss, &mut log, TrainOptions::default())
        .expect("objective");
    l.item()
}

/// Every factor index chosen by the true and proxy passes over `batch`.
pub fn selection_signature(
    backbone: &Backbone,
    bundle: &TaskBundle,
    settings: &ModelSettings,
    batch: &[&MultimodalSample],
) -> Vec<usize> {
    let mut out = Vec::new();
    for s in batch {
        for opts in [settings.forward_options(), settings.options_with(QueryPolicy::Swapped)] {
            let g = Graph::new();
            let (_, fo) = backbone.forward_bundle(&g, s, bundle, &opts).expect("forward");
            for r in fo.routing {
                out.extend(r.decision.indices_a);
                out.extend(r.decision.indices_b);
            }
        }
    }
    out
}

/// A small, fast experiment config for end-to-end tests.
pub fn small_config(tasks: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.benchmark.tasks = tasks;
    cfg.benchmark.n_train = 40;
    cfg.benchmark.n_test = 20;
    cfg.training.epochs_per_task = 2;
    cfg
}

pub fn complete_test_samples(t: &TaskData) -> impl Iterator<Item = &MultimodalSample> {
    t.test.iter().filter(|s| s.is_complete())
}

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
const TOP_COORDS: usize = 2;
const RANDOM_COORDS: usize = 2;

#[derive(Debug, Default)]
pub struct Report {
    pub max_err: f64,
    pub checked: usize,
    pub skipped: usize,
    pub worst: String,
}

pub struct Case {
    pub variant: Variant,
    pub mode: ClassificationMode,
    pub gate_mode: GateMode,
    pub loss: LossConfig,
    pub backbone: BackboneConfig,
}

pub fn build(case: &Case, seed: u64) -> (Backbone, TaskBundle, ModelSettings, Vec<MultimodalSample>) {
    let mut cfg = ExperimentConfig {
        backbone: case.backbone.clone(),
        ..ExperimentConfig::default()
    };
    cfg.adapters.variant = case.variant;
    cfg.adapters.gate_mode = case.gate_mode;
    let backbone = Backbone::new(cfg.backbone.clone()).unwrap();
    let settings = settings(case.variant, &cfg);
    let mut r = rng(seed);
    let classes = 4;
    let mut bundle = TaskBundle::init(
        1,
        classes,
        case.variant.adapter_kind(),
        &cfg.backbone,
        settings.pool_size,
        settings.rank,
        &mut r,
    )
    .unwrap();
    randomize(&mut bundle, 0.3, &mut r);
    let partial = if seed.is_multiple_of(2) { Availability::ImageOnly } else { Availability::TextOnly };
    let samples = [Availability::Complete, partial]
        .into_iter()
        .map(|a| {
            let label = random_label(case.mode, classes, &mut r);
            sample(&cfg.backbone, a, label, 1, &mut r)
        })
        .collect();
    (backbone, bundle, settings, samples)
}

fn pick_coords(grad: &[f64], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..grad.len()).collect();
    order.sort_by(|&i, &j| grad[j].abs().total_cmp(&grad[i].abs()));
    let mut picked: Vec<usize> = order.into_iter().take(TOP_COORDS).collect();
    for _ in 0..RANDOM_COORDS {
        picked.push(rng.random_range(0..grad.len()));
    }
    picked.sort_unstable();
    picked.dedup();
    picked
}

/// Central differences on sampled coordinates of every bundle parameter.
/// Coordinates whose perturbation changes a top-r selection sit on a
/// non-differentiable boundary and are skipped.
pub fn check_point(case: &Case, seed: u64) -> (Report, Vec<bool>) {
    let (backbone, mut bundle, settings, samples) = build(case, seed);
    let batch: Vec<&MultimodalSample> = samples.iter().collect();
    let g = Graph::new();
    let mut log = RoutingLog::default();
    let (loss, _) = batch_objective(&g, &backbone, &bundle, &settings, &batch, &case.loss, &mut log, TrainOptions::default())
        .unwrap();
    let grads = g.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = bundle
        .params()
        .iter()
        .map(|p| match grads.param(p.id()) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; p.value().numel()],
        })
        .collect();
    let nonzero = analytic.iter().map(|g| g.iter().any(|v| *v != 0.0)).collect();
    let base_sig = selection_signature(&backbone, &bundle, &settings, &batch);
    let mut r = rng(seed ^ 0x5eed);
    let mut report = Report::default();
    for (k, grad) in analytic.iter().enumerate() {
        for c in pick_coords(grad, &mut r) {
            let eval = |delta: f64, bundle: &mut TaskBundle| {
                let orig = bundle.params()[k].value().data()[c];
                bundle.params_mut()[k].value_mut().data_mut()[c] = orig + delta;
                let v = objective(&backbone, bundle, &settings, &batch, &case.loss);
                let sig = selection_signature(&backbone, bundle, &settings, &batch);
                bundle.params_mut()[k].value_mut().data_mut()[c] = orig;
                (v, sig)
            };
            let (fp, sp) = eval(EPS, &mut bundle);
            let (fm, sm) = eval(-EPS, &mut bundle);
            if sp != base_sig || sm != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * EPS);
            let err = (grad[c] - numeric).abs() / numeric.abs().max(1.0);
            if err > report.max_err {
                report.worst = format!("{:?} seed {seed} param {k} coord {c}: analytic {} numeric {numeric}", case.variant, grad[c]);
            }
            report.max_err = report.max_err.max(err);
            report.checked += 1;
        }
    }
    (report, nonzero)
}

