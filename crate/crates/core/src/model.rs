//! The continual learner: frozen backbone, task registry and key memory,
//! with sequential training, task-agnostic inference and evaluation.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::backbone::{Availability, Backbone, ForwardOptions, Label, MultimodalSample, RoutingRecord};
use crate::bench::TaskData;
use crate::config::{ExperimentConfig, Variant};
use crate::error::{Error, Result};
use crate::loss::{
    alignment_loss, classification_loss, consistency_loss, total_loss, LossComponents, LossConfig,
};
use crate::lora::Modality;
use crate::memory::{TaskBundle, TaskKeyMemory, TaskRegistry};
use crate::metrics::{accuracy, f1_macro_with, threshold_logits, MetricKind};
use crate::optim::AdamW;
use crate::routing::{GateMode, QueryPolicy};
use crate::tensor::{cosine, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelSettings {
    pub variant: Variant,
    pub pool_size: usize,
    pub rank: usize,
    pub gate_mode: GateMode,
}

impl ModelSettings {
    pub fn from_config(cfg: &ExperimentConfig) -> Self {
        Self {
            variant: cfg.adapters.variant,
            pool_size: cfg.adapters.pool_size,
            rank: cfg.adapters.rank,
            gate_mode: cfg.adapters.gate_mode,
        }
    }

    pub fn forward_options(&self) -> ForwardOptions {
        self.options_with(self.variant.query_policy())
    }

    pub fn options_with(&self, policy: QueryPolicy) -> ForwardOptions {
        ForwardOptions {
            rank: self.rank,
            gate_mode: self.gate_mode,
            policy,
        }
    }

    fn pool_len(&self, modality: Modality) -> usize {
        match modality {
            Modality::Shared => 2 * self.pool_size,
            _ => self.pool_size,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CmmlModel {
    pub backbone: Backbone,
    pub registry: TaskRegistry,
    pub keys: TaskKeyMemory,
    pub settings: ModelSettings,
}

/// Output of task-agnostic inference on one sample.
#[derive(Clone, Debug)]
pub struct Inference {
    pub task_id: u32,
    pub logits: Vec<f64>,
    pub routing: Vec<RoutingRecord>,
}

impl CmmlModel {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            backbone: Backbone::new(cfg.backbone.clone())?,
            registry: TaskRegistry::new(),
            keys: TaskKeyMemory::new(cfg.training.ema_beta)?,
            settings: ModelSettings::from_config(cfg),
        })
    }

    /// Routing query used for task keys: the first adapted projection's
    /// input, averaged over the sequence, from whichever modalities are real.
    pub fn inference_query(&self, sample: &MultimodalSample) -> Result<Vec<f64>> {
        let avail = sample.validate(self.backbone.config())?;
        let (q_v, q_t) = self.backbone.first_slot_queries(sample)?;
        Ok(match avail {
            Availability::Complete => q_v.zip_map(&q_t, |a, b| 0.5 * (a + b)).into_data(),
            Availability::ImageOnly => q_v.into_data(),
            Availability::TextOnly => q_t.into_data(),
        })
    }

    pub fn predict_task(&self, sample: &MultimodalSample) -> Result<u32> {
        self.keys.predict_task(&self.inference_query(sample)?)
    }

    fn bundle(&self, task_id: u32) -> Result<&TaskBundle> {
        self.registry
            .bundle(task_id)
            .ok_or_else(|| Error::Registry(format!("no bundle for task {task_id}")))
    }

    /// Logits of `task_id`'s head with that task's adapters active.
    pub fn logits_for(&self, sample: &MultimodalSample, task_id: u32) -> Result<(Vec<f64>, Vec<RoutingRecord>)> {
        let bundle = self.bundle(task_id)?;
        let g = Graph::new();
        let (logits, out) = self
            .backbone
            .forward_bundle(&g, sample, bundle, &self.settings.forward_options())?;
        let values = logits.value().data().to_vec();
        Ok((values, out.routing))
    }

    /// Predicts the task from the key memory, then runs that task's bundle.
    pub fn infer(&self, sample: &MultimodalSample) -> Result<Inference> {
        let task_id = self.predict_task(sample)?;
        let (logits, routing) = self.logits_for(sample, task_id)?;
        Ok(Inference {
            task_id,
            logits,
            routing,
        })
    }

    /// Mean of `cos(q_v, q_t)` over the alignment slots under `task_id`'s
    /// adapters.
    pub fn modality_cosine(&self, sample: &MultimodalSample, task_id: u32) -> Result<f64> {
        let bundle = self.bundle(task_id)?;
        let g = Graph::new();
        let out = self
            .backbone
            .forward(&g, sample, Some(&bundle.adapters), &self.settings.forward_options())?;
        let slots = self.backbone.config().alignment_slots();
        let mut sum = 0.0;
        for &i in &slots {
            let (q_v, q_t) = &out.queries[i];
            sum += cosine(q_v.value().data(), q_t.value().data())
                .ok_or_else(|| Error::NonFinite("cosine of a zero-norm query".into()))?;
        }
        Ok(sum / slots.len() as f64)
    }
}

/// Selection counts of one pool across every routed forward pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoolUsage {
    pub task_id: u32,
    pub slot: usize,
    pub layer: usize,
    pub projection: crate::backbone::Projection,
    pub modality: Modality,
    /// Factors picked per forward pass.
    pub selected_per_forward: usize,
    pub forward_count: u64,
    pub proxy_query_count: u64,
    pub a_counts: Vec<u64>,
    pub b_counts: Vec<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingLog {
    pub pools: Vec<PoolUsage>,
}

impl RoutingLog {
    pub fn record(&mut self, task_id: u32, records: &[RoutingRecord], settings: &ModelSettings) {
        for r in records {
            let pos = self
                .pools
                .iter()
                .position(|p| p.task_id == task_id && p.slot == r.slot && p.modality == r.modality);
            let idx = pos.unwrap_or_else(|| {
                let n = settings.pool_len(r.modality);
                self.pools.push(PoolUsage {
                    task_id,
                    slot: r.slot,
                    layer: r.layer,
                    projection: r.projection,
                    modality: r.modality,
                    selected_per_forward: r.decision.indices_a.len(),
                    forward_count: 0,
                    proxy_query_count: 0,
                    a_counts: vec![0; n],
                    b_counts: vec![0; n],
                });
                self.pools.len() - 1
            });
            let p = &mut self.pools[idx];
            p.forward_count += 1;
            p.proxy_query_count += u64::from(r.decision.query_was_proxy);
            for &i in &r.decision.indices_a {
                p.a_counts[i] += 1;
            }
            for &i in &r.decision.indices_b {
                p.b_counts[i] += 1;
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("routing log serializes")
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainOptions {
    /// Evaluate auxiliary losses even when their weight is zero.
    pub compute_unweighted_aux: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskTrainLog {
    pub task_id: u32,
    pub steps: u64,
    pub first_batch_loss: f64,
    pub epoch_mean_loss: Vec<f64>,
}

struct BatchLoss {
    total: f64,
    query_mean: Vec<f64>,
}

/// Registers a fresh bundle for `data`, trains it, and freezes it.
pub fn train_task(
    model: &mut CmmlModel,
    data: &TaskData,
    cfg: &ExperimentConfig,
    rng: &mut ChaCha8Rng,
    log: &mut RoutingLog,
    opts: TrainOptions,
) -> Result<TaskTrainLog> {
    if data.train.is_empty() {
        return Err(Error::invalid(format!("task {} has no training data", data.task_id)));
    }
    let s = model.settings;
    let bundle = TaskBundle::init(
        data.task_id,
        data.num_classes,
        s.variant.adapter_kind(),
        model.backbone.config(),
        s.pool_size,
        s.rank,
        rng,
    )?;
    model.registry.register_task(bundle)?;
    model.keys.activate(data.task_id);

    let bs = cfg.training.batch_size;
    let batches_per_epoch = data.train.len().div_ceil(bs);
    let total_steps = (cfg.training.epochs_per_task * batches_per_epoch) as u64;
    let mut opt = AdamW::new(cfg.optimizer.clone(), total_steps)?;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut first_batch_loss = None;
    let mut epoch_mean_loss = Vec::with_capacity(cfg.training.epochs_per_task);

    for epoch in 0..cfg.training.epochs_per_task {
        order.shuffle(rng);
        let mut sum = 0.0;
        for (b, chunk) in order.chunks(bs).enumerate() {
            let batch: Vec<&MultimodalSample> = chunk.iter().map(|&i| &data.train[i]).collect();
            let step = train_step(model, &batch, &cfg.loss, &mut opt, log, opts).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!(
                    "{what} (task {}, epoch {}, batch {}, lr {:e})",
                    data.task_id,
                    epoch + 1,
                    b + 1,
                    opt.next_lr()
                )),
                other => other,
            })?;
            first_batch_loss.get_or_insert(step.total);
            sum += step.total;
            model.keys.update_key(data.task_id, &step.query_mean)?;
        }
        epoch_mean_loss.push(sum / batches_per_epoch as f64);
    }

    model.registry.freeze_current();
    model.keys.deactivate();
    Ok(TaskTrainLog {
        task_id: data.task_id,
        steps: opt.step_count(),
        first_batch_loss: first_batch_loss.expect("at least one batch"),
        epoch_mean_loss,
    })
}

/// Builds the training objective of `bundle` on `batch` inside `g`:
/// classification on every sample, alignment and the proxy-pass
/// consistency term on complete samples only.
#[allow(clippy::too_many_arguments)]
pub fn batch_objective<'g>(
    g: &'g Graph,
    backbone: &Backbone,
    bundle: &TaskBundle,
    settings: &ModelSettings,
    batch: &[&MultimodalSample],
    loss_cfg: &LossConfig,
    log: &mut RoutingLog,
    opts: TrainOptions,
) -> Result<(Var<'g>, LossComponents<'g>)> {
    let task_id = bundle.task_id;
    let fwd = settings.forward_options();
    let proxy = settings.options_with(QueryPolicy::Swapped);
    let want_align = loss_cfg.lambda1 > 0.0 || opts.compute_unweighted_aux;
    let want_con = loss_cfg.lambda2 > 0.0 || opts.compute_unweighted_aux;
    let mut logits = Vec::with_capacity(batch.len());
    let mut pairs = Vec::new();
    let align_slots = backbone.config().alignment_slots();
    let mut true_logits = Vec::new();
    let mut proxy_logits = Vec::new();
    for s in batch {
        let (lg, out) = backbone.forward_bundle(g, s, bundle, &fwd)?;
        log.record(task_id, &out.routing, settings);
        logits.push(lg);
        if s.is_complete() {
            if want_align {
                pairs.extend(align_slots.iter().map(|&i| out.queries[i]));
            }
            if want_con {
                let (pl, pout) = backbone.forward_bundle(g, s, bundle, &proxy)?;
                log.record(task_id, &pout.routing, settings);
                true_logits.push(lg);
                proxy_logits.push(pl);
            }
        }
    }
    let labels: Vec<&Label> = batch.iter().map(|s| &s.label).collect();
    let components = LossComponents {
        classification: classification_loss(Var::concat_rows(&logits), &labels, loss_cfg.classification_mode)?,
        alignment: alignment_loss(g, &pairs)?,
        consistency: consistency_loss(g, &true_logits, &proxy_logits, loss_cfg.symmetric_kl)?,
    };
    let loss = total_loss(&components, loss_cfg);
    Ok((loss, components))
}

fn train_step(
    model: &mut CmmlModel,
    batch: &[&MultimodalSample],
    loss_cfg: &LossConfig,
    opt: &mut AdamW,
    log: &mut RoutingLog,
    opts: TrainOptions,
) -> Result<BatchLoss> {
    let settings = model.settings;
    let grads;
    let total;
    {
        let bundle = model
            .registry
            .current()
            .ok_or_else(|| Error::Registry("no trainable task".into()))?;
        let g = Graph::new();
        let (loss, _) = batch_objective(&g, &model.backbone, bundle, &settings, batch, loss_cfg, log, opts)?;
        total = loss.item();
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("training loss {total}")));
        }
        grads = g.backward(loss)?;
    }
    let mut params = model.registry.trainable_params_mut();
    for p in params.iter_mut() {
        grads.apply_to(p);
    }
    opt.step(params)?;

    let mut query_mean: Option<Vec<f64>> = None;
    for s in batch {
        let q = model.inference_query(s)?;
        match &mut query_mean {
            None => query_mean = Some(q),
            Some(acc) => acc.iter_mut().zip(&q).for_each(|(a, b)| *a += b),
        }
    }
    let n = batch.len() as f64;
    let query_mean = query_mean.expect("non-empty batch").into_iter().map(|v| v / n).collect();
    Ok(BatchLoss { total, query_mean })
}


/// Scores of every evaluated task after training through the newest one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalColumn {
    /// Task-agnostic performance, head chosen by key matching.
    pub agnostic: Vec<f64>,
    /// Performance with the true task's bundle.
    pub oracle: Vec<f64>,
    /// Fraction of test samples whose task was predicted correctly.
    pub task_prediction: Vec<f64>,
}

/// Scores one task's test set.
pub struct TaskScore {
    pub agnostic: f64,
    pub oracle: f64,
    pub task_prediction: f64,
}

pub fn evaluate_task(
    model: &CmmlModel,
    data: &TaskData,
    metric: MetricKind,
    empty_class_f1: f64,
    log: &mut RoutingLog,
) -> Result<TaskScore> {
    if data.test.is_empty() {
        return Err(Error::invalid(format!("task {} has no test data", data.task_id)));
    }
    let mut hits = 0usize;
    let mut oracle_pred_c = Vec::new();
    let mut agnostic_pred_c = Vec::new();
    let mut labels_c = Vec::new();
    let mut oracle_pred_m = Vec::new();
    let mut agnostic_pred_m = Vec::new();
    let mut labels_m = Vec::new();
    for s in &data.test {
        let predicted = model.predict_task(s)?;
        let (logits, routing) = model.logits_for(s, data.task_id)?;
        log.record(data.task_id, &routing, &model.settings);
        let right_task = predicted == data.task_id;
        hits += usize::from(right_task);
        match &s.label {
            Label::Class(c) => {
                let arg = argmax(&logits);
                labels_c.push(*c);
                oracle_pred_c.push(arg);
                // A wrong head's class index carries no meaning for this task.
                agnostic_pred_c.push(if right_task { arg } else { usize::MAX });
            }
            Label::Multi(bits) => {
                let p = threshold_logits(&logits);
                labels_m.push(bits.clone());
                agnostic_pred_m.push(if right_task { p.clone() } else { vec![0; bits.len()] });
                oracle_pred_m.push(p);
            }
        }
    }
    let n = data.test.len();
    let (oracle, agnostic) = match metric {
        MetricKind::Accuracy => {
            if labels_c.len() != n {
                return Err(Error::invalid("accuracy needs single-label samples"));
            }
            (accuracy(&oracle_pred_c, &labels_c)?, accuracy(&agnostic_pred_c, &labels_c)?)
        }
        MetricKind::F1Macro => {
            if labels_m.len() != n {
                return Err(Error::invalid("macro-F1 needs multilabel samples"));
            }
            (
                f1_macro_with(&oracle_pred_m, &labels_m, data.num_classes, empty_class_f1)?,
                f1_macro_with(&agnostic_pred_m, &labels_m, data.num_classes, empty_class_f1)?,
            )
        }
    };
    Ok(TaskScore {
        agnostic,
        oracle,
        task_prediction: hits as f64 / n as f64,
    })
}

/// Evaluates tasks `1..=tasks.len()` on the frozen model.
pub fn evaluate_all(
    model: &CmmlModel,
    tasks: &[TaskData],
    metric: MetricKind,
    empty_class_f1: f64,
    log: &mut RoutingLog,
) -> Result<EvalColumn> {
    if !model.registry.all_frozen() {
        return Err(Error::Registry("evaluation requires every bundle to be frozen".into()));
    }
    let mut col = EvalColumn {
        agnostic: Vec::new(),
        oracle: Vec::new(),
        task_prediction: Vec::new(),
    };
    for t in tasks {
        let s = evaluate_task(model, t, metric, empty_class_f1, log)?;
        col.agnostic.push(s.agnostic);
        col.oracle.push(s.oracle);
        col.task_prediction.push(s.task_prediction);
    }
    Ok(col)
}

/// Mean `cos(q_v, q_t)` over complete test samples, each under its own
/// task's adapters.
pub fn mean_modality_cosine(model: &CmmlModel, tasks: &[TaskData]) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for t in tasks {
        for s in t.test.iter().filter(|s| s.is_complete()) {
            sum += model.modality_cosine(s, t.task_id)?;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Logits of the plain frozen encoder under `task_id`'s head, no adapters.
pub fn frozen_logits(model: &CmmlModel, sample: &MultimodalSample, task_id: u32) -> Result<Tensor> {
    let bundle = model.bundle(task_id)?;
    let g = Graph::new();
    let out = model
        .backbone
        .forward(&g, sample, None, &model.settings.forward_options())?;
    let logits = crate::backbone::classify(&g, out.pooled, &bundle.head)?;
    let v = logits.value();
    Ok((*v).clone())
}
