//! Frozen two-modality transformer encoder carrying the adapters.
//!
//! Visual tokens occupy positions `0..seq_v` of the joint sequence and text
//! tokens `seq_v..seq_v + seq_t`. Every encoder weight is frozen; the only
//! trainable state reachable from a forward pass belongs to the active
//! [`TaskBundle`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{layer_norm_rows, Graph, Parameter, Var};
use crate::error::{Error, Result};
use crate::lora::{AdaptedLinear, Modality};
use crate::memory::{Head, TaskAdapters, TaskBundle};
use crate::routing::{
    build_layer_update, extract_query, resolve_queries, route_pool, GateMode, QueryPolicy,
    RoutingDecision,
};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
const AUX_EMBED_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Projection {
    AttentionQuery,
    AttentionValue,
    MlpIn,
    MlpOut,
}

impl Projection {
    pub const ALL: [Projection; 4] = [
        Projection::AttentionQuery,
        Projection::AttentionValue,
        Projection::MlpIn,
        Projection::MlpOut,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Projection::AttentionQuery => "attention-query",
            Projection::AttentionValue => "attention-value",
            Projection::MlpIn => "mlp-in",
            Projection::MlpOut => "mlp-out",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Width of the raw per-token features fed to the embeddings.
    pub d_raw: usize,
    pub seq_v: usize,
    pub seq_t: usize,
    pub adapted_projections: Vec<Projection>,
    pub alpha: f64,
    /// Correlation between the text and visual input embeddings. Higher
    /// values give the frozen encoder a more shared cross-modal space.
    pub modality_coupling: f64,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 64,
            d_raw: 16,
            seq_v: 8,
            seq_t: 8,
            adapted_projections: vec![Projection::AttentionQuery, Projection::AttentionValue],
            alpha: 1.0,
            modality_coupling: 0.9,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("d_raw", self.d_raw),
            ("seq_v", self.seq_v),
            ("seq_t", self.seq_t),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("backbone.{name}"), "must be at least 1"));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "backbone.n_heads",
                format!("d_model {} is not divisible by {}", self.d_model, self.n_heads),
            ));
        }
        if self.adapted_projections.is_empty() {
            return Err(Error::config(
                "backbone.adapted_projections",
                "at least one projection must carry adapters",
            ));
        }
        let mut seen = self.adapted_projections.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.adapted_projections.len() {
            return Err(Error::config("backbone.adapted_projections", "duplicate entry"));
        }
        if !(self.alpha >= 1.0) {
            return Err(Error::config("backbone.alpha", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.modality_coupling) {
            return Err(Error::config("backbone.modality_coupling", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.seq_v + self.seq_t
    }

    pub fn is_adapted(&self, p: Projection) -> bool {
        self.adapted_projections.contains(&p)
    }

    /// Adapted `(layer, projection)` slots in forward order.
    pub fn adapted_slots(&self) -> Vec<(usize, Projection)> {
        let mut out = Vec::new();
        for l in 0..self.n_layers {
            for p in Projection::ALL {
                if self.is_adapted(p) {
                    out.push((l, p));
                }
            }
        }
        out
    }

    /// Indices into [`adapted_slots`](Self::adapted_slots) whose routing
    /// queries are read downstream of at least one adapter, so training can
    /// move them. Falls back to every slot when there is none.
    pub fn alignment_slots(&self) -> Vec<usize> {
        let stage = |(l, p): (usize, Projection)| {
            let s = match p {
                Projection::AttentionQuery | Projection::AttentionValue => 0,
                Projection::MlpIn => 1,
                Projection::MlpOut => 2,
            };
            (l, s)
        };
        let slots = self.adapted_slots();
        let Some(&first) = slots.first() else { return Vec::new() };
        let downstream: Vec<usize> = (0..slots.len()).filter(|&i| stage(slots[i]) > stage(first)).collect();
        if downstream.is_empty() {
            (0..slots.len()).collect()
        } else {
            downstream
        }
    }

    /// `(d_in, d_out)` of a projection.
    pub fn projection_dims(&self, p: Projection) -> (usize, usize) {
        match p {
            Projection::AttentionQuery | Projection::AttentionValue => (self.d_model, self.d_model),
            Projection::MlpIn => (self.d_model, self.d_ff),
            Projection::MlpOut => (self.d_ff, self.d_model),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Availability {
    Complete,
    ImageOnly,
    TextOnly,
}

impl Availability {
    pub fn has_visual(self) -> bool {
        !matches!(self, Availability::TextOnly)
    }

    pub fn has_text(self) -> bool {
        !matches!(self, Availability::ImageOnly)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Label {
    Class(usize),
    Multi(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultimodalSample {
    pub visual: Option<Tensor>,
    pub text: Option<Tensor>,
    pub label: Label,
    pub task_id: u32,
}

impl MultimodalSample {
    pub fn availability(&self) -> Option<Availability> {
        match (self.visual.is_some(), self.text.is_some()) {
            (true, true) => Some(Availability::Complete),
            (true, false) => Some(Availability::ImageOnly),
            (false, true) => Some(Availability::TextOnly),
            (false, false) => None,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.visual.is_some() && self.text.is_some()
    }

    pub fn validate(&self, cfg: &BackboneConfig) -> Result<Availability> {
        let avail = self
            .availability()
            .ok_or_else(|| Error::invalid("sample must carry at least one real modality"))?;
        if let Some(v) = &self.visual {
            if v.shape() != [cfg.seq_v, cfg.d_raw] {
                return Err(Error::shape(
                    "visual tokens",
                    format!("{:?} vs [{}, {}]", v.shape(), cfg.seq_v, cfg.d_raw),
                ));
            }
        }
        if let Some(t) = &self.text {
            if t.shape() != [cfg.seq_t, cfg.d_raw] {
                return Err(Error::shape(
                    "text tokens",
                    format!("{:?} vs [{}, {}]", t.shape(), cfg.seq_t, cfg.d_raw),
                ));
            }
        }
        Ok(avail)
    }
}

/// Raw stand-in for a missing image: every value one.
pub fn dummy_visual(cfg: &BackboneConfig) -> Tensor {
    Tensor::filled(&[cfg.seq_v, cfg.d_raw], 1.0)
}

/// Raw stand-in for missing text: every value zero.
pub fn dummy_text(cfg: &BackboneConfig) -> Tensor {
    Tensor::zeros(&[cfg.seq_t, cfg.d_raw])
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    query: AdaptedLinear,
    key: Parameter,
    value: AdaptedLinear,
    output: Parameter,
    mlp_in: AdaptedLinear,
    mlp_out: AdaptedLinear,
}


#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    embed_v: Parameter,
    embed_t: Parameter,
    positions: Parameter,
    type_v: Parameter,
    type_t: Parameter,
    layers: Vec<EncoderLayer>,
}

/// Routing outcome of one pool in one adapted projection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    pub slot: usize,
    pub layer: usize,
    pub projection: Projection,
    pub modality: Modality,
    pub decision: RoutingDecision,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ForwardOptions {
    pub rank: usize,
    pub gate_mode: GateMode,
    pub policy: QueryPolicy,
}

#[derive(Debug)]
pub struct ForwardOutput<'g> {
    pub pooled: Var<'g>,
    /// Own-hidden-state `(q_v, q_t)` at each adapted slot.
    pub queries: Vec<(Var<'g>, Var<'g>)>,
    pub routing: Vec<RoutingRecord>,
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let dense = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            Tensor::randn(&[rows, cols], 1.0 / (cols as f64).sqrt(), rng)
        };
        let embed_v = Parameter::frozen(dense(d, cfg.d_raw, &mut rng));
        let rho = cfg.modality_coupling;
        let embed_t = dense(d, cfg.d_raw, &mut rng)
            .zip_map(embed_v.value(), |own, shared| rho * shared + (1.0 - rho * rho).sqrt() * own);
        let embed_t = Parameter::frozen(embed_t);
        let positions = Parameter::frozen(Tensor::randn(&[cfg.seq_len(), d], AUX_EMBED_STD, &mut rng));
        let type_v = Parameter::frozen(Tensor::randn(&[1, d], AUX_EMBED_STD, &mut rng));
        let type_t = Parameter::frozen(Tensor::randn(&[1, d], AUX_EMBED_STD, &mut rng));
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            let adapted = |w: Tensor| AdaptedLinear::new(w, cfg.alpha, 1);
            layers.push(EncoderLayer {
                query: adapted(dense(d, d, &mut rng))?,
                key: Parameter::frozen(dense(d, d, &mut rng)),
                value: adapted(dense(d, d, &mut rng))?,
                output: Parameter::frozen(dense(d, d, &mut rng)),
                mlp_in: adapted(dense(cfg.d_ff, d, &mut rng))?,
                mlp_out: adapted(dense(d, cfg.d_ff, &mut rng))?,
            });
        }
        Ok(Self {
            cfg,
            embed_v,
            embed_t,
            positions,
            type_v,
            type_t,
            layers,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Every frozen tensor, for bit-exactness checks.
    pub fn frozen_params(&self) -> Vec<&Parameter> {
        let mut out = vec![
            &self.embed_v,
            &self.embed_t,
            &self.positions,
            &self.type_v,
            &self.type_t,
        ];
        for l in &self.layers {
            out.extend([
                &l.query.weight,
                &l.key,
                &l.value.weight,
                &l.output,
                &l.mlp_in.weight,
                &l.mlp_out.weight,
            ]);
        }
        out
    }

    /// Embeds both token blocks, substituting dummies for a missing modality.
    pub fn embed_inputs(&self, sample: &MultimodalSample) -> Result<(Tensor, Tensor)> {
        sample.validate(&self.cfg)?;
        let raw_v = sample.visual.clone().unwrap_or_else(|| dummy_visual(&self.cfg));
        let raw_t = sample.text.clone().unwrap_or_else(|| dummy_text(&self.cfg));
        let pos = self.positions.value();
        let sv = self.cfg.seq_v;
        let mut h_v = raw_v.matmul_t(self.embed_v.value())?;
        let mut h_t = raw_t.matmul_t(self.embed_t.value())?;
        let d = self.cfg.d_model;
        for i in 0..sv {
            for j in 0..d {
                let v = h_v.get(i, j) + pos.get(i, j) + self.type_v.value().data()[j];
                h_v.set(i, j, v);
            }
        }
        for i in 0..self.cfg.seq_t {
            for j in 0..d {
                let v = h_t.get(i, j) + pos.get(sv + i, j) + self.type_t.value().data()[j];
                h_t.set(i, j, v);
            }
        }
        Ok((h_v, h_t))
    }

    /// Sequence-mean input of the first adapted projection, per modality.
    /// Nothing upstream of that point is adapted, so this is a frozen function
    /// of the sample.
    pub fn first_slot_queries(&self, sample: &MultimodalSample) -> Result<(Tensor, Tensor)> {
        let (h_v, h_t) = self.embed_inputs(sample)?;
        let mut x = Tensor::concat_rows(&[&h_v, &h_t])?;
        let (layer, proj) = self.cfg.adapted_slots()[0];
        let sv = self.cfg.seq_v;
        let split = |h: &Tensor| (h.slice_rows(0, sv).mean_rows(), h.slice_rows(sv, h.rows()).mean_rows());
        for (l, weights) in self.layers.iter().enumerate() {
            let (h, _) = layer_norm_rows(&x, LN_EPS);
            if l == layer && matches!(proj, Projection::AttentionQuery | Projection::AttentionValue) {
                return Ok(split(&h));
            }
            x.add_assign(&self.attention_plain(weights, &h)?);
            let (h2, _) = layer_norm_rows(&x, LN_EPS);
            if l == layer && proj == Projection::MlpIn {
                return Ok(split(&h2));
            }
            let m = crate::autograd::gelu_tensor(&h2.matmul_t(weights.mlp_in.weight.value())?);
            if l == layer && proj == Projection::MlpOut {
                return Ok(split(&m));
            }
            x.add_assign(&m.matmul_t(weights.mlp_out.weight.value())?);
        }
        unreachable!("adapted slot lies inside the encoder")
    }

    fn attention_plain(&self, w: &EncoderLayer, h: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let hv = g.constant(h.clone());
        let q = w.query.forward_frozen(&g, hv);
        let v = w.value.forward_frozen(&g, hv);
        let out = self.attention(&g, w, hv, q, v);
        let t = out.value();
        Ok((*t).clone())
    }

    fn attention<'g>(&self, g: &'g Graph, w: &EncoderLayer, h: Var<'g>, q: Var<'g>, v: Var<'g>) -> Var<'g> {
        let k = h.matmul_t(&g.param(&w.key));
        let dh = self.cfg.d_model / self.cfg.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let heads: Vec<Var<'g>> = (0..self.cfg.n_heads)
            .map(|i| {
                let (s, e) = (i * dh, (i + 1) * dh);
                let att = q
                    .slice_cols(s, e)
                    .matmul_t(&k.slice_cols(s, e))
                    .scale(scale)
                    .softmax_rows();
                att.matmul(&v.slice_cols(s, e))
            })
            .collect();
        let concat = if heads.len() == 1 { heads[0] } else { Var::concat_cols(&heads) };
        concat.matmul_t(&g.param(&w.output))
    }

    /// Encoder forward with the given task adapters (or none, for the plain
    /// frozen encoder). Returns the mean-pooled final representation.
    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        sample: &MultimodalSample,
        adapters: Option<&TaskAdapters>,
        opts: &ForwardOptions,
    ) -> Result<ForwardOutput<'g>> {
        let avail = sample.validate(&self.cfg)?;
        let (h_v, h_t) = self.embed_inputs(sample)?;
        let mut x = g.constant(Tensor::concat_rows(&[&h_v, &h_t])?);
        let mut slot = 0;
        let mut queries = Vec::new();
        let mut routing = Vec::new();
        let mut ctx = SlotContext {
            g,
            cfg: &self.cfg,
            adapters,
            opts,
            visual_present: avail.has_visual(),
            text_present: avail.has_text(),
            slot: &mut slot,
            queries: &mut queries,
            routing: &mut routing,
        };
        for (l, w) in self.layers.iter().enumerate() {
            let h = x.layer_norm_rows(LN_EPS);
            let q = ctx.project(l, Projection::AttentionQuery, &w.query, h)?;
            let v = ctx.project(l, Projection::AttentionValue, &w.value, h)?;
            x = x.add(&self.attention(g, w, h, q, v));
            let h2 = x.layer_norm_rows(LN_EPS);
            let m = ctx.project(l, Projection::MlpIn, &w.mlp_in, h2)?.gelu();
            x = x.add(&ctx.project(l, Projection::MlpOut, &w.mlp_out, m)?);
        }
        let pooled = x.layer_norm_rows(LN_EPS).mean_rows();
        g.check_finite()?;
        Ok(ForwardOutput {
            pooled,
            queries,
            routing,
        })
    }

    /// Encoder forward followed by the bundle's head.
    pub fn forward_bundle<'g>(
        &self,
        g: &'g Graph,
        sample: &MultimodalSample,
        bundle: &TaskBundle,
        opts: &ForwardOptions,
    ) -> Result<(Var<'g>, ForwardOutput<'g>)> {
        let out = self.forward(g, sample, Some(&bundle.adapters), opts)?;
        let logits = classify(g, out.pooled, &bundle.head)?;
        Ok((logits, out))
    }
}

struct SlotContext<'a, 'g> {
    g: &'g Graph,
    cfg: &'a BackboneConfig,
    adapters: Option<&'a TaskAdapters>,
    opts: &'a ForwardOptions,
    visual_present: bool,
    text_present: bool,
    slot: &'a mut usize,
    queries: &'a mut Vec<(Var<'g>, Var<'g>)>,
    routing: &'a mut Vec<RoutingRecord>,
}

impl<'g> SlotContext<'_, 'g> {
    fn project(&mut self, layer: usize, p: Projection, lin: &AdaptedLinear, h: Var<'g>) -> Result<Var<'g>> {
        if !self.cfg.is_adapted(p) {
            return Ok(lin.forward_frozen(self.g, h));
        }
        let slot = *self.slot;
        *self.slot += 1;
        let sv = self.cfg.seq_v;
        let seq = h.shape()[0];
        let h_v = h.slice_rows(0, sv);
        let h_t = h.slice_rows(sv, seq);
        let q_v = extract_query(h_v)?;
        let q_t = extract_query(h_t)?;
        self.queries.push((q_v, q_t));
        let Some(adapters) = self.adapters else {
            return Ok(lin.forward_frozen(self.g, h));
        };
        let r = self.opts.rank;
        let record = |modality: Modality, decision: RoutingDecision| RoutingRecord {
            slot,
            layer,
            projection: p,
            modality,
            decision,
        };
        match adapters {
            TaskAdapters::Decomposed(slots) => {
                let s = slots.get(slot).ok_or_else(|| Error::invalid("missing adapter slot"))?;
                let up = build_layer_update(
                    self.g,
                    (&s.pool_v, &s.pool_t),
                    (&s.router_v, &s.router_t),
                    h_v,
                    h_t,
                    self.visual_present,
                    self.text_present,
                    r,
                    self.opts.gate_mode,
                    self.opts.policy,
                )?;
                self.routing.push(record(Modality::Visual, up.visual));
                self.routing.push(record(Modality::Textual, up.textual));
                lin.forward(self.g, h, &[up.delta_v, up.delta_t])
            }
            TaskAdapters::Shared(slots) => {
                let s = slots.get(slot).ok_or_else(|| Error::invalid("missing adapter slot"))?;
                let qs = resolve_queries(q_v, q_t, self.visual_present, self.text_present, self.opts.policy)?;
                let q = qs.visual.add(&qs.textual).scale(0.5);
                let proxy = qs.visual_is_proxy || qs.textual_is_proxy;
                let (delta, decision) =
                    route_pool(self.g, &s.pool, &s.router, q, 2 * r, self.opts.gate_mode, proxy)?;
                self.routing.push(record(Modality::Shared, decision));
                lin.forward(self.g, h, &[delta])
            }
            TaskAdapters::Static(slots) => {
                let s = slots.get(slot).ok_or_else(|| Error::invalid("missing adapter slot"))?;
                let dv = self.g.param(&s.b_v).matmul(&self.g.param(&s.a_v));
                let dt = self.g.param(&s.b_t).matmul(&self.g.param(&s.a_t));
                lin.forward(self.g, h, &[dv, dt])
            }
        }
    }
}

/// Affine map of a pooled `[1, d]` representation to the head's class logits.
pub fn classify<'g>(g: &'g Graph, pooled: Var<'g>, head: &Head) -> Result<Var<'g>> {
    let d = head.weight.value().cols();
    if pooled.shape() != [1, d] {
        return Err(Error::shape(
            "classify",
            format!("pooled {:?} vs head input {d}", pooled.shape()),
        ));
    }
    Ok(pooled
        .matmul_t(&g.param(&head.weight))
        .add(&g.param(&head.bias)))
}
