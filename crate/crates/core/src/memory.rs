//! Task-partitioned adapters, per-task heads and the task-key memory.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Parameter;
use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::lora::{FactorPool, Modality, PoolRecord, FACTOR_INIT_STD};
use crate::routing::Router;
use crate::tensor::{cosine, Tensor};

const HEAD_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug)]
pub struct Head {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Head {
    pub fn init(num_classes: usize, d_model: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Parameter::new(Tensor::randn(&[num_classes, d_model], HEAD_INIT_STD, rng)),
            bias: Parameter::new(Tensor::zeros(&[1, num_classes])),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weight.value().rows()
    }
}

/// Both modality pools and routers of one adapted projection.
#[derive(Clone, Debug)]
pub struct DecomposedSlot {
    pub pool_v: FactorPool,
    pub pool_t: FactorPool,
    pub router_v: Router,
    pub router_t: Router,
}

/// A single pool serving both modalities.
#[derive(Clone, Debug)]
pub struct SharedSlot {
    pub pool: FactorPool,
    pub router: Router,
}

/// Conventional dense low-rank pair per modality, `ΔW = B·A`.
#[derive(Clone, Debug)]
pub struct StaticSlot {
    pub a_v: Parameter,
    pub b_v: Parameter,
    pub a_t: Parameter,
    pub b_t: Parameter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdapterKind {
    Decomposed,
    Shared,
    Static,
}

#[derive(Clone, Debug)]
pub enum TaskAdapters {
    Decomposed(Vec<DecomposedSlot>),
    Shared(Vec<SharedSlot>),
    Static(Vec<StaticSlot>),
}

impl TaskAdapters {
    pub fn init(
        kind: AdapterKind,
        task_id: u32,
        cfg: &BackboneConfig,
        pool_size: usize,
        rank: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if rank == 0 || rank > pool_size {
            return Err(Error::invalid(format!(
                "rank {rank} must lie in 1..={pool_size} (pool size)"
            )));
        }
        let slots = cfg.adapted_slots();
        Ok(match kind {
            AdapterKind::Decomposed => TaskAdapters::Decomposed(
                slots
                    .iter()
                    .map(|&(_, p)| {
                        let (d_in, d_out) = cfg.projection_dims(p);
                        Ok(DecomposedSlot {
                            pool_v: FactorPool::init(Modality::Visual, task_id, pool_size, d_in, d_out, rng)?,
                            pool_t: FactorPool::init(Modality::Textual, task_id, pool_size, d_in, d_out, rng)?,
                            router_v: Router::init(Modality::Visual, task_id, pool_size, d_in, rng),
                            router_t: Router::init(Modality::Textual, task_id, pool_size, d_in, rng),
                        })
                    })
                    .collect::<Result<_>>()?,
            ),
            AdapterKind::Shared => TaskAdapters::Shared(
                slots
                    .iter()
                    .map(|&(_, p)| {
                        let (d_in, d_out) = cfg.projection_dims(p);
                        let size = 2 * pool_size;
                        Ok(SharedSlot {
                            pool: FactorPool::init(Modality::Shared, task_id, size, d_in, d_out, rng)?,
                            router: Router::init(Modality::Shared, task_id, size, d_in, rng),
                        })
                    })
                    .collect::<Result<_>>()?,
            ),
            AdapterKind::Static => TaskAdapters::Static(
                slots
                    .iter()
                    .map(|&(_, p)| {
                        let (d_in, d_out) = cfg.projection_dims(p);
                        let mut a = || Parameter::new(Tensor::randn(&[rank, d_in], FACTOR_INIT_STD, rng));
                        let a_v = a();
                        let a_t = a();
                        StaticSlot {
                            a_v,
                            b_v: Parameter::new(Tensor::zeros(&[d_out, rank])),
                            a_t,
                            b_t: Parameter::new(Tensor::zeros(&[d_out, rank])),
                        }
                    })
                    .collect(),
            ),
        })
    }

    pub fn kind(&self) -> AdapterKind {
        match self {
            TaskAdapters::Decomposed(_) => AdapterKind::Decomposed,
            TaskAdapters::Shared(_) => AdapterKind::Shared,
            TaskAdapters::Static(_) => AdapterKind::Static,
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        match self {
            TaskAdapters::Decomposed(slots) => {
                for s in slots {
                    out.extend(s.pool_v.params());
                    out.extend(s.pool_t.params());
                    out.extend(s.router_v.params());
                    out.extend(s.router_t.params());
                }
            }
            TaskAdapters::Shared(slots) => {
                for s in slots {
                    out.extend(s.pool.params());
                    out.extend(s.router.params());
                }
            }
            TaskAdapters::Static(slots) => {
                for s in slots {
                    out.extend([&s.a_v, &s.b_v, &s.a_t, &s.b_t]);
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        match self {
            TaskAdapters::Decomposed(slots) => {
                for s in slots {
                    out.extend(s.pool_v.params_mut());
                    out.extend(s.pool_t.params_mut());
                    out.extend(s.router_v.params_mut());
                    out.extend(s.router_t.params_mut());
                }
            }
            TaskAdapters::Shared(slots) => {
                for s in slots {
                    out.extend(s.pool.params_mut());
                    out.extend(s.router.params_mut());
                }
            }
            TaskAdapters::Static(slots) => {
                for s in slots {
                    out.extend([&mut s.a_v, &mut s.b_v, &mut s.a_t, &mut s.b_t]);
                }
            }
        }
        out
    }
}

/// Everything one task owns: adapters for every adapted projection and a
/// classification head.
#[derive(Clone, Debug)]
pub struct TaskBundle {
    pub task_id: u32,
    pub adapters: TaskAdapters,
    pub head: Head,
    frozen: bool,
}

impl TaskBundle {
    pub fn new(task_id: u32, adapters: TaskAdapters, head: Head) -> Self {
        let mut b = Self {
            task_id,
            adapters,
            head,
            frozen: false,
        };
        b.set_frozen(false);
        b
    }

    #[allow(clippy::too_many_arguments)]
    pub fn init(
        task_id: u32,
        num_classes: usize,
        kind: AdapterKind,
        cfg: &BackboneConfig,
        pool_size: usize,
        rank: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::invalid("a task needs at least one class"));
        }
        let adapters = TaskAdapters::init(kind, task_id, cfg, pool_size, rank, rng)?;
        let head = Head::init(num_classes, cfg.d_model, rng);
        Ok(Self::new(task_id, adapters, head))
    }

    pub fn num_classes(&self) -> usize {
        self.head.num_classes()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        for p in self.params_mut() {
            p.trainable = !frozen;
            if frozen {
                p.grad = None;
            }
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = self.adapters.params();
        out.extend([&self.head.weight, &self.head.bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.adapters.params_mut();
        out.extend([&mut self.head.weight, &mut self.head.bias]);
        out
    }

    /// Values of every parameter, for bit-exact comparisons.
    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params().into_iter().map(|p| p.value().clone()).collect()
    }
}

/// Ordered per-task bundles; at most the newest one is trainable.
#[derive(Clone, Debug, Default)]
pub struct TaskRegistry {
    tasks: Vec<TaskBundle>,
}

impl TaskRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Appends bundle `T+1` as the only trainable one.
    pub fn register_task(&mut self, mut bundle: TaskBundle) -> Result<&mut TaskBundle> {
        let expected = self.tasks.len() as u32 + 1;
        if bundle.task_id != expected {
            return Err(Error::Registry(format!(
                "expected task {expected}, got {}",
                bundle.task_id
            )));
        }
        if let Some(prev) = self.tasks.last() {
            if !prev.is_frozen() {
                return Err(Error::Registry(format!(
                    "task {} is still trainable",
                    prev.task_id
                )));
            }
        }
        bundle.set_frozen(false);
        self.tasks.push(bundle);
        Ok(self.tasks.last_mut().expect("just pushed"))
    }

    pub fn freeze_current(&mut self) {
        if let Some(b) = self.tasks.last_mut() {
            b.set_frozen(true);
        }
    }

    pub fn all_frozen(&self) -> bool {
        self.tasks.iter().all(TaskBundle::is_frozen)
    }

    pub fn bundle(&self, task_id: u32) -> Option<&TaskBundle> {
        task_id
            .checked_sub(1)
            .and_then(|i| self.tasks.get(i as usize))
    }

    pub fn bundles(&self) -> &[TaskBundle] {
        &self.tasks
    }

    /// The trainable bundle, if any.
    pub fn current_mut(&mut self) -> Option<&mut TaskBundle> {
        self.tasks.last_mut().filter(|b| !b.is_frozen())
    }

    pub fn current(&self) -> Option<&TaskBundle> {
        self.tasks.last().filter(|b| !b.is_frozen())
    }

    /// Parameters the optimizer may update: those of the trainable bundle only.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Parameter> {
        self.current_mut()
            .map(TaskBundle::params_mut)
            .unwrap_or_default()
    }
}

/// Non-trainable per-task centroids of the routing query, maintained by EMA.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskKeyMemory {
    pub beta: f64,
    keys: BTreeMap<u32, Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    active: Option<u32>,
}

impl TaskKeyMemory {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(Error::invalid("EMA momentum must lie in (0, 1)"));
        }
        Ok(Self {
            beta,
            keys: BTreeMap::new(),
            active: None,
        })
    }

    /// Marks `task_id` as the one whose key may be updated.
    pub fn activate(&mut self, task_id: u32) {
        self.active = Some(task_id);
    }

    pub fn deactivate(&mut self) {
        self.active = None;
    }

    pub fn key(&self, task_id: u32) -> Option<&[f64]> {
        self.keys.get(&task_id).map(Vec::as_slice)
    }

    pub fn keys(&self) -> impl Iterator<Item = (u32, &[f64])> {
        self.keys.iter().map(|(&k, v)| (k, v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// First call initializes the key to `q_batch`; later calls apply
    /// `key ← β·key + (1−β)·q_batch`.
    pub fn update_key(&mut self, task_id: u32, q_batch: &[f64]) -> Result<&[f64]> {
        if self.active != Some(task_id) {
            return Err(Error::Registry(format!(
                "task {task_id} is not the trainable task"
            )));
        }
        if q_batch.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("batch query".into()));
        }
        let beta = self.beta;
        let key = self
            .keys
            .entry(task_id)
            .and_modify(|k| {
                for (kv, q) in k.iter_mut().zip(q_batch) {
                    *kv = beta * *kv + (1.0 - beta) * q;
                }
            })
            .or_insert_with(|| q_batch.to_vec());
        if key.len() != q_batch.len() {
            return Err(Error::shape("update_key", "query length changed"));
        }
        Ok(key)
    }

    /// `argmax_k cos(q, key_k)`, ties resolved to the lower task id.
    pub fn predict_task(&self, q_test: &[f64]) -> Result<u32> {
        if self.keys.is_empty() {
            return Err(Error::Registry("no task keys stored".into()));
        }
        let mut best: Option<(u32, f64)> = None;
        for (&k, key) in &self.keys {
            if key.len() != q_test.len() {
                return Err(Error::shape("predict_task", "query and key lengths differ"));
            }
            let c = cosine(q_test, key)
                .ok_or_else(|| Error::NonFinite("cosine with a zero-norm vector".into()))?;
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((k, c));
            }
        }
        Ok(best.expect("non-empty").0)
    }

    pub fn insert_key(&mut self, task_id: u32, key: Vec<f64>) {
        self.keys.insert(task_id, key);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterRecord {
    pub modality: Modality,
    pub task_id: u32,
    pub w_a: Tensor,
    pub w_b: Tensor,
    pub w_ab: Tensor,
}

impl RouterRecord {
    fn from_router(r: &Router) -> Self {
        Self {
            modality: r.modality,
            task_id: r.task_id,
            w_a: r.w_a.value().clone(),
            w_b: r.w_b.value().clone(),
            w_ab: r.w_ab.value().clone(),
        }
    }

    fn into_router(self) -> Result<Router> {
        let mut r = Router::from_matrices(self.modality, self.task_id, self.w_a, self.w_b, self.w_ab)?;
        r.set_trainable(false);
        Ok(r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecomposedSlotRecord {
    pub pool_v: PoolRecord,
    pub pool_t: PoolRecord,
    pub router_v: RouterRecord,
    pub router_t: RouterRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SharedSlotRecord {
    pub pool: PoolRecord,
    pub router: RouterRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticSlotRecord {
    pub a_v: Tensor,
    pub b_v: Tensor,
    pub a_t: Tensor,
    pub b_t: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "slots")]
pub enum AdaptersRecord {
    Decomposed(Vec<DecomposedSlotRecord>),
    Shared(Vec<SharedSlotRecord>),
    Static(Vec<StaticSlotRecord>),
}

/// On-disk form of a [`TaskBundle`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleRecord {
    pub task_id: u32,
    pub num_classes: usize,
    pub adapters: AdaptersRecord,
    pub head_weight: Tensor,
    pub head_bias: Tensor,
}

impl BundleRecord {
    pub fn adapters_kind(&self) -> AdapterKind {
        match self.adapters {
            AdaptersRecord::Decomposed(_) => AdapterKind::Decomposed,
            AdaptersRecord::Shared(_) => AdapterKind::Shared,
            AdaptersRecord::Static(_) => AdapterKind::Static,
        }
    }
}

impl TaskBundle {
    pub fn to_record(&self) -> BundleRecord {
        let adapters = match &self.adapters {
            TaskAdapters::Decomposed(slots) => AdaptersRecord::Decomposed(
                slots
                    .iter()
                    .map(|s| DecomposedSlotRecord {
                        pool_v: s.pool_v.to_record(),
                        pool_t: s.pool_t.to_record(),
                        router_v: RouterRecord::from_router(&s.router_v),
                        router_t: RouterRecord::from_router(&s.router_t),
                    })
                    .collect(),
            ),
            TaskAdapters::Shared(slots) => AdaptersRecord::Shared(
                slots
                    .iter()
                    .map(|s| SharedSlotRecord {
                        pool: s.pool.to_record(),
                        router: RouterRecord::from_router(&s.router),
                    })
                    .collect(),
            ),
            TaskAdapters::Static(slots) => AdaptersRecord::Static(
                slots
                    .iter()
                    .map(|s| StaticSlotRecord {
                        a_v: s.a_v.value().clone(),
                        b_v: s.b_v.value().clone(),
                        a_t: s.a_t.value().clone(),
                        b_t: s.b_t.value().clone(),
                    })
                    .collect(),
            ),
        };
        BundleRecord {
            task_id: self.task_id,
            num_classes: self.num_classes(),
            adapters,
            head_weight: self.head.weight.value().clone(),
            head_bias: self.head.bias.value().clone(),
        }
    }

    /// Rebuilds a frozen bundle, checking it against the backbone layout.
    pub fn from_record(rec: BundleRecord, cfg: &BackboneConfig, rank: usize) -> Result<Self> {
        let slots = cfg.adapted_slots();
        let bad = |m: String| Error::Format(format!("task {}: {m}", rec.task_id));
        if rec.head_weight.shape() != [rec.num_classes, cfg.d_model]
            || rec.head_bias.shape() != [1, rec.num_classes]
            || rec.num_classes == 0
        {
            return Err(bad("head shape does not match class count".into()));
        }
        let check_pool = |p: &FactorPool, slot: usize, min: usize| -> Result<()> {
            let (d_in, d_out) = cfg.projection_dims(slots[slot].1);
            if p.d_in() != d_in || p.d_out() != d_out || p.size() < min || p.task_id != rec.task_id {
                return Err(bad(format!("pool in slot {slot} does not fit the backbone")));
            }
            Ok(())
        };
        let check_router = |r: &Router, p: &FactorPool, slot: usize| -> Result<()> {
            if r.size() != p.size() || r.d_in() != p.d_in() {
                return Err(bad(format!("router in slot {slot} does not fit its pool")));
            }
            Ok(())
        };
        let n_slots = match &rec.adapters {
            AdaptersRecord::Decomposed(s) => s.len(),
            AdaptersRecord::Shared(s) => s.len(),
            AdaptersRecord::Static(s) => s.len(),
        };
        if n_slots != slots.len() {
            return Err(bad(format!("{n_slots} adapter slots, backbone has {}", slots.len())));
        }
        let adapters = match rec.adapters {
            AdaptersRecord::Decomposed(list) => TaskAdapters::Decomposed(
                list.into_iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let slot = DecomposedSlot {
                            pool_v: FactorPool::from_record(s.pool_v)?,
                            pool_t: FactorPool::from_record(s.pool_t)?,
                            router_v: s.router_v.into_router()?,
                            router_t: s.router_t.into_router()?,
                        };
                        check_pool(&slot.pool_v, i, rank)?;
                        check_pool(&slot.pool_t, i, rank)?;
                        check_router(&slot.router_v, &slot.pool_v, i)?;
                        check_router(&slot.router_t, &slot.pool_t, i)?;
                        Ok(slot)
                    })
                    .collect::<Result<_>>()?,
            ),
            AdaptersRecord::Shared(list) => TaskAdapters::Shared(
                list.into_iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let slot = SharedSlot {
                            pool: FactorPool::from_record(s.pool)?,
                            router: s.router.into_router()?,
                        };
                        check_pool(&slot.pool, i, 2 * rank)?;
                        check_router(&slot.router, &slot.pool, i)?;
                        Ok(slot)
                    })
                    .collect::<Result<_>>()?,
            ),
            AdaptersRecord::Static(list) => TaskAdapters::Static(
                list.into_iter()
                    .enumerate()
                    .map(|(i, s)| {
                        let (d_in, d_out) = cfg.projection_dims(slots[i].1);
                        let ok = s.a_v.shape() == [rank, d_in]
                            && s.a_t.shape() == [rank, d_in]
                            && s.b_v.shape() == [d_out, rank]
                            && s.b_t.shape() == [d_out, rank];
                        if !ok {
                            return Err(bad(format!("static slot {i} has wrong shapes")));
                        }
                        Ok(StaticSlot {
                            a_v: Parameter::frozen(s.a_v),
                            b_v: Parameter::frozen(s.b_v),
                            a_t: Parameter::frozen(s.a_t),
                            b_t: Parameter::frozen(s.b_t),
                        })
                    })
                    .collect::<Result<_>>()?,
            ),
        };
        let mut bundle = TaskBundle {
            task_id: rec.task_id,
            adapters,
            head: Head {
                weight: Parameter::frozen(rec.head_weight),
                bias: Parameter::frozen(rec.head_bias),
            },
            frozen: true,
        };
        bundle.set_frozen(true);
        Ok(bundle)
    }
}
