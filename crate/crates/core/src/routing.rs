//! Instance-based selection of rank-one factors.
//!
//! For each adapted projection and each modality pool, a query `q` (the
//! sequence mean of that modality's hidden states) scores the pool's `a`
//! factors through `W_A`. The top-`r` are kept. The `b` factors are scored
//! by `W_B·q + W_AB·ā`, where `ā` is the mean of the chosen `a` factors, and
//! again the top-`r` are kept. The i-th chosen `a` pairs with the i-th
//! chosen `b`, both lists ordered by descending score.
//!
//! When a modality is missing its pool is routed with the other modality's
//! query instead of a query computed from dummy tokens.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Parameter, Var};
use crate::error::{Error, Result};
use crate::lora::{compose_delta_var, FactorPool, Modality};
use crate::tensor::Tensor;

pub const ROUTER_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    /// Unit gates on the selected factors.
    Binary,
    /// Softmax scores of the selected factors, renormalized to sum to one.
    #[default]
    Softmax,
}

#[derive(Clone, Debug)]
pub struct Router {
    pub modality: Modality,
    pub task_id: u32,
    pub w_a: Parameter,
    pub w_b: Parameter,
    pub w_ab: Parameter,
}

impl Router {
    pub fn init(
        modality: Modality,
        task_id: u32,
        size: usize,
        d_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut m = || Parameter::new(Tensor::randn(&[size, d_in], ROUTER_INIT_STD, rng));
        Self {
            modality,
            task_id,
            w_a: m(),
            w_b: m(),
            w_ab: m(),
        }
    }

    pub fn from_matrices(modality: Modality, task_id: u32, w_a: Tensor, w_b: Tensor, w_ab: Tensor) -> Result<Self> {
        if w_a.shape() != w_b.shape() || w_a.shape() != w_ab.shape() || w_a.shape().len() != 2 {
            return Err(Error::shape(
                "Router",
                format!("{:?} {:?} {:?}", w_a.shape(), w_b.shape(), w_ab.shape()),
            ));
        }
        Ok(Self {
            modality,
            task_id,
            w_a: Parameter::new(w_a),
            w_b: Parameter::new(w_b),
            w_ab: Parameter::new(w_ab),
        })
    }

    pub fn size(&self) -> usize {
        self.w_a.value().rows()
    }

    pub fn d_in(&self) -> usize {
        self.w_a.value().cols()
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.w_a.trainable = on;
        self.w_b.trainable = on;
        self.w_ab.trainable = on;
    }

    pub fn params(&self) -> [&Parameter; 3] {
        [&self.w_a, &self.w_b, &self.w_ab]
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 3] {
        [&mut self.w_a, &mut self.w_b, &mut self.w_ab]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub indices_a: Vec<usize>,
    pub indices_b: Vec<usize>,
    pub gates_a: Vec<f64>,
    pub gates_b: Vec<f64>,
    pub query_was_proxy: bool,
}

/// One top-`r` selection with its gates as a graph variable.
#[derive(Clone, Debug)]
pub struct Selection<'g> {
    pub indices: Vec<usize>,
    pub gates: Var<'g>,
}

impl Selection<'_> {
    pub fn gate_values(&self) -> Vec<f64> {
        self.gates.value().data().to_vec()
    }
}

/// Indices of the `r` largest scores, ordered by descending score; equal
/// scores resolve to the lower index.
pub fn top_r(scores: &[f64], r: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    idx.truncate(r);
    idx
}

/// Mean over the sequence axis of `h: [seq, d]`, as a `[1, d]` row.
pub fn extract_query<'g>(h: Var<'g>) -> Result<Var<'g>> {
    let s = h.shape();
    if s.len() != 2 || s[0] == 0 {
        return Err(Error::invalid(format!("query needs a non-empty sequence, got {s:?}")));
    }
    Ok(h.mean_rows())
}

fn gated_selection<'g>(g: &'g Graph, logits: Var<'g>, r: usize, mode: GateMode) -> Result<Selection<'g>> {
    let e = logits.shape().iter().product::<usize>();
    if r == 0 || r > e {
        return Err(Error::invalid(format!("rank {r} outside 1..={e}")));
    }
    let probs = logits.softmax_rows();
    let pv = probs.value();
    if !pv.is_finite() {
        return Err(Error::NonFinite("routing scores".into()));
    }
    let indices = top_r(pv.data(), r);
    let gates = match mode {
        GateMode::Binary => g.constant(Tensor::filled(&[1, r], 1.0)),
        GateMode::Softmax => {
            let picked = probs.gather_cols(&indices);
            picked.mul_scalar(&picked.sum().recip())
        }
    };
    Ok(Selection { indices, gates })
}

fn check_query(router: &Router, q: &Var<'_>) -> Result<()> {
    let s = q.shape();
    if s != [1, router.d_in()] {
        return Err(Error::shape(
            "routing query",
            format!("{s:?} vs router d_in {}", router.d_in()),
        ));
    }
    Ok(())
}

/// `top_r(softmax(W_A · q))`.
pub fn select_a<'g>(
    g: &'g Graph,
    router: &Router,
    q: Var<'g>,
    r: usize,
    mode: GateMode,
) -> Result<Selection<'g>> {
    check_query(router, &q)?;
    let logits = q.matmul_t(&g.param(&router.w_a));
    gated_selection(g, logits, r, mode)
}

/// `top_r(softmax(W_B · q + W_AB · ā))` with `ā` the mean selected `a` factor.
pub fn select_b<'g>(
    g: &'g Graph,
    router: &Router,
    q: Var<'g>,
    selected_a: Var<'g>,
    r: usize,
    mode: GateMode,
) -> Result<Selection<'g>> {
    check_query(router, &q)?;
    let sa = selected_a.shape();
    if sa.len() != 2 || sa[0] == 0 || sa[1] != router.d_in() {
        return Err(Error::shape("select_b", format!("selected a factors {sa:?}")));
    }
    let a_bar = selected_a.mean_rows();
    let logits = q
        .matmul_t(&g.param(&router.w_b))
        .add(&a_bar.matmul_t(&g.param(&router.w_ab)));
    gated_selection(g, logits, r, mode)
}

/// Per-pair composition weights. Renormalized softmax gates are rescaled to
/// mean one per selection, so a uniform selection composes with the same
/// magnitude as the binary mask.
pub fn pair_gates<'g>(a: &Selection<'g>, b: &Selection<'g>, mode: GateMode) -> Var<'g> {
    match mode {
        GateMode::Binary => a.gates.mul(&b.gates),
        GateMode::Softmax => {
            let r = a.indices.len() as f64;
            a.gates.mul(&b.gates).scale(r * r)
        }
    }
}

/// Routes one pool with query `q`, returning the composed `ΔW` and the decision.
pub fn route_pool<'g>(
    g: &'g Graph,
    pool: &FactorPool,
    router: &Router,
    q: Var<'g>,
    r: usize,
    mode: GateMode,
    query_was_proxy: bool,
) -> Result<(Var<'g>, RoutingDecision)> {
    if router.size() != pool.size() || router.d_in() != pool.d_in() {
        return Err(Error::shape(
            "route_pool",
            format!(
                "router {}x{} vs pool {}x{}",
                router.size(),
                router.d_in(),
                pool.size(),
                pool.d_in()
            ),
        ));
    }
    let sel_a = select_a(g, router, q, r, mode)?;
    let a_sel = g.param(&pool.a).gather_rows(&sel_a.indices);
    let sel_b = select_b(g, router, q, a_sel, r, mode)?;
    let b_sel = g.param(&pool.b).gather_rows(&sel_b.indices);
    let gates = pair_gates(&sel_a, &sel_b, mode);
    let delta = compose_delta_var(a_sel, b_sel, gates)?;
    let decision = RoutingDecision {
        gates_a: sel_a.gate_values(),
        gates_b: sel_b.gate_values(),
        indices_a: sel_a.indices,
        indices_b: sel_b.indices,
        query_was_proxy,
    };
    Ok((delta, decision))
}

/// Effective per-modality queries after proxy substitution.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutedQueries<T> {
    pub visual: T,
    pub textual: T,
    pub visual_is_proxy: bool,
    pub textual_is_proxy: bool,
}

/// Replaces a missing modality's query with the available one's.
pub fn route_modalities<T: Clone>(q_v: Option<T>, q_t: Option<T>) -> Result<RoutedQueries<T>> {
    match (q_v, q_t) {
        (Some(v), Some(t)) => Ok(RoutedQueries {
            visual: v,
            textual: t,
            visual_is_proxy: false,
            textual_is_proxy: false,
        }),
        (Some(v), None) => Ok(RoutedQueries {
            textual: v.clone(),
            visual: v,
            visual_is_proxy: false,
            textual_is_proxy: true,
        }),
        (None, Some(t)) => Ok(RoutedQueries {
            visual: t.clone(),
            textual: t,
            visual_is_proxy: true,
            textual_is_proxy: false,
        }),
        (None, None) => Err(Error::invalid("both modality queries are absent")),
    }
}

/// How each pool's query is chosen for one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QueryPolicy {
    /// Own query when present, the other modality's query when missing.
    #[default]
    Guided,
    /// Always the pool's own hidden states, dummy-derived when missing.
    OwnHiddenStates,
    /// Each pool receives the other modality's query (consistency pass).
    Swapped,
}

/// Resolves the queries each pool sees from the modality-segregated ones.
pub fn resolve_queries<'g>(
    q_v: Var<'g>,
    q_t: Var<'g>,
    visual_present: bool,
    text_present: bool,
    policy: QueryPolicy,
) -> Result<RoutedQueries<Var<'g>>> {
    match policy {
        QueryPolicy::Guided => route_modalities(
            visual_present.then_some(q_v),
            text_present.then_some(q_t),
        ),
        QueryPolicy::OwnHiddenStates => {
            if !visual_present && !text_present {
                return Err(Error::invalid("both modality queries are absent"));
            }
            Ok(RoutedQueries {
                visual: q_v,
                textual: q_t,
                visual_is_proxy: false,
                textual_is_proxy: false,
            })
        }
        QueryPolicy::Swapped => Ok(RoutedQueries {
            visual: q_t,
            textual: q_v,
            visual_is_proxy: true,
            textual_is_proxy: true,
        }),
    }
}

/// Per-layer output of [`build_layer_update`].
#[derive(Debug)]
pub struct LayerUpdate<'g> {
    pub delta_v: Var<'g>,
    pub delta_t: Var<'g>,
    pub visual: RoutingDecision,
    pub textual: RoutingDecision,
}

/// Both modality pools of one task routed for one adapted projection.
#[allow(clippy::too_many_arguments)]
pub fn build_layer_update<'g>(
    g: &'g Graph,
    pools: (&FactorPool, &FactorPool),
    routers: (&Router, &Router),
    h_v: Var<'g>,
    h_t: Var<'g>,
    visual_present: bool,
    text_present: bool,
    r: usize,
    mode: GateMode,
    policy: QueryPolicy,
) -> Result<LayerUpdate<'g>> {
    let (pool_v, pool_t) = pools;
    let (router_v, router_t) = routers;
    if pool_v.task_id != pool_t.task_id
        || router_v.task_id != pool_v.task_id
        || router_t.task_id != pool_t.task_id
    {
        return Err(Error::invalid("pools and routers must belong to one task"));
    }
    let q_v = extract_query(h_v)?;
    let q_t = extract_query(h_t)?;
    let qs = resolve_queries(q_v, q_t, visual_present, text_present, policy)?;
    let (delta_v, visual) = route_pool(g, pool_v, router_v, qs.visual, r, mode, qs.visual_is_proxy)?;
    let (delta_t, textual) =
        route_pool(g, pool_t, router_t, qs.textual, r, mode, qs.textual_is_proxy)?;
    Ok(LayerUpdate {
        delta_v,
        delta_t,
        visual,
        textual,
    })
}
