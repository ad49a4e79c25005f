//! Graph-recording reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each operation on a
//! [`Var`] computes its value eagerly and appends a node; [`Graph::backward`]
//! consumes the graph and walks the nodes in reverse insertion order, which
//! is a valid reverse topological order because parents always precede
//! their children.
//!
//! Trainable state lives outside the graph in [`Parameter`]s. Binding a
//! parameter with [`Graph::param`] records its [`ParamId`], and the returned
//! [`Gradients`] are keyed by that id so callers can route them back.
//!
//! Shape mismatches inside the graph are programming errors and panic.
//! Non-finite values are recorded and surfaced as [`Error::NonFinite`] by
//! [`Graph::check_finite`] and [`Graph::backward`].

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }

    pub fn raw(self) -> u64 {
        self.0
    }
}

/// A named slot of model state that may receive gradients.
///
/// Cloning keeps the id, so a clone is a snapshot of the same parameter
/// rather than a new one.
#[derive(Clone, Debug)]
pub struct Parameter {
    id: ParamId,
    value: Arc<Tensor>,
    pub grad: Option<Tensor>,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        Self {
            id: ParamId::fresh(),
            value: Arc::new(value),
            grad: None,
            trainable: true,
        }
    }

    pub fn frozen(value: Tensor) -> Self {
        Self {
            trainable: false,
            ..Self::new(value)
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }

    pub fn accumulate_grad(&mut self, g: &Tensor) {
        match &mut self.grad {
            Some(acc) => acc.add_assign(g),
            None => self.grad = Some(g.clone()),
        }
    }
}

impl Serialize for Parameter {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.value.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Parameter {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        Tensor::deserialize(d).map(Parameter::new)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    MulScalar(usize, usize),
    MatMul(usize, usize),
    MatMulT(usize, usize),
    Transpose(usize),
    SumAll(usize),
    MeanRows(usize),
    SliceRows(usize, usize),
    SliceCols(usize, usize),
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    GatherRows(usize, Vec<usize>),
    GatherCols(usize, Vec<usize>),
    PickPerRow(usize, Vec<usize>),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    LayerNormRows(usize, Vec<f64>),
    Gelu(usize),
    Sqrt(usize),
    Recip(usize),
    Exp(usize),
    Log(usize),
    ScaleRows(usize, usize),
    BceWithLogits(usize, Tensor),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    non_finite: RefCell<Option<&'static str>>,
}

#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.shape())
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    leaves: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Gradient of an unnamed leaf created with [`Graph::leaf`].
    pub fn wrt(&self, var: Var<'_>) -> Option<&Tensor> {
        self.leaves.get(&var.id)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }

    /// Adds the gradient for `p` (if any) into `p.grad`.
    pub fn apply_to(&self, p: &mut Parameter) {
        if let Some(g) = self.params.get(&p.id) {
            p.accumulate_grad(g);
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Var<'_> {
        if !value.is_finite() {
            let mut nf = self.non_finite.borrow_mut();
            if nf.is_none() {
                *nf = Some(name);
            }
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
            param: None,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false, "constant")
    }

    /// An unnamed differentiable leaf; read its gradient with [`Gradients::wrt`].
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true, "leaf")
    }

    /// Binds a parameter. Only trainable parameters require gradients.
    pub fn param(&self, p: &Parameter) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Arc::clone(&p.value),
            op: Op::Leaf,
            requires_grad: p.trainable,
            param: Some(p.id),
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        match *self.non_finite.borrow() {
            Some(name) => Err(Error::NonFinite(name.to_string())),
            None => Ok(()),
        }
    }

    fn value(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a scalar `loss`. Every differentiable leaf in the
    /// graph receives a gradient (zeros when no path reaches it). The
    /// recorded nodes are consumed; the graph is empty afterwards.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.graph, self) {
            return Err(Error::ForeignVariable);
        }
        self.check_finite()?;
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        if loss.id >= nodes.len() {
            return Err(Error::invalid("graph was already consumed"));
        }
        let loss_val = &nodes[loss.id].value;
        if !loss_val.is_scalar() {
            return Err(Error::NonScalarLoss(loss_val.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(nodes.len());
        grads.resize_with(nodes.len(), || None);
        grads[loss.id] = Some(Tensor::filled(loss_val.shape(), 1.0));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            propagate(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut out = Gradients::default();
        for (id, node) in nodes.iter().enumerate() {
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                continue;
            }
            let g = grads[id]
                .take()
                .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
            if !g.is_finite() {
                return Err(Error::NonFinite("backward".into()));
            }
            match node.param {
                Some(pid) => match out.params.get_mut(&pid) {
                    Some(acc) => acc.add_assign(&g),
                    None => {
                        out.params.insert(pid, g);
                    }
                },
                None => {
                    out.leaves.insert(id, g);
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], nodes: &[Node], id: usize, g: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn propagate(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let val = |i: usize| -> &Tensor { &nodes[i].value };
    let out = &nodes[id].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            accumulate(grads, nodes, *b, g.scale(-1.0));
        }
        Op::Mul(a, b) => {
            accumulate(grads, nodes, *a, g.zip_map(val(*b), |x, y| x * y));
            accumulate(grads, nodes, *b, g.zip_map(val(*a), |x, y| x * y));
        }
        Op::AddRow(a, b) => {
            accumulate(grads, nodes, *a, g.clone());
            if nodes[*b].requires_grad {
                let col = g.mean_rows().scale(g.rows() as f64);
                let col = col.reshape(val(*b).shape()).expect("row shape");
                accumulate(grads, nodes, *b, col);
            }
        }
        Op::Scale(a, s) => accumulate(grads, nodes, *a, g.scale(*s)),
        Op::MulScalar(a, s) => {
            let sv = val(*s).item();
            accumulate(grads, nodes, *a, g.scale(sv));
            if nodes[*s].requires_grad {
                let gs = g.dot(val(*a));
                accumulate(grads, nodes, *s, Tensor::filled(val(*s).shape(), gs));
            }
        }
        Op::MatMul(a, b) => {
            if nodes[*a].requires_grad {
                let ga = g.matmul_t(val(*b)).expect("matmul grad");
                accumulate(grads, nodes, *a, ga.reshape(val(*a).shape()).unwrap());
            }
            if nodes[*b].requires_grad {
                let gb = val(*a).t_matmul(g).expect("matmul grad");
                accumulate(grads, nodes, *b, gb.reshape(val(*b).shape()).unwrap());
            }
        }
        Op::MatMulT(a, b) => {
            if nodes[*a].requires_grad {
                let ga = g.matmul(val(*b)).expect("matmul_t grad");
                accumulate(grads, nodes, *a, ga.reshape(val(*a).shape()).unwrap());
            }
            if nodes[*b].requires_grad {
                let gb = g.t_matmul(val(*a)).expect("matmul_t grad");
                accumulate(grads, nodes, *b, gb.reshape(val(*b).shape()).unwrap());
            }
        }
        Op::Transpose(a) => {
            let ga = g.transpose().reshape(val(*a).shape()).unwrap();
            accumulate(grads, nodes, *a, ga);
        }
        Op::SumAll(a) => {
            accumulate(grads, nodes, *a, Tensor::filled(val(*a).shape(), g.item()));
        }
        Op::MeanRows(a) => {
            let (r, c) = val(*a).dims2();
            let inv = 1.0 / r as f64;
            let mut ga = Tensor::zeros(val(*a).shape());
            for i in 0..r {
                for j in 0..c {
                    ga.data_mut()[i * c + j] = g.data()[j] * inv;
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::SliceRows(a, start) => {
            let c = val(*a).cols();
            let mut ga = Tensor::zeros(val(*a).shape());
            ga.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
            accumulate(grads, nodes, *a, ga);
        }
        Op::SliceCols(a, start) => {
            let (r, c) = val(*a).dims2();
            let w = g.cols();
            let mut ga = Tensor::zeros(val(*a).shape());
            for i in 0..r {
                ga.data_mut()[i * c + start..i * c + start + w].copy_from_slice(g.row_slice(i));
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).rows();
                accumulate(grads, nodes, p, g.slice_rows(offset, offset + n));
                offset += n;
            }
        }
        Op::ConcatCols(parts) => {
            let r = g.rows();
            let total = g.cols();
            let mut offset = 0;
            for &p in parts {
                let w = val(p).cols();
                let mut gp = Tensor::zeros(&[r, w]);
                for i in 0..r {
                    gp.data_mut()[i * w..(i + 1) * w]
                        .copy_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                }
                accumulate(grads, nodes, p, gp);
                offset += w;
            }
        }
        Op::GatherRows(a, idx) => {
            let c = val(*a).cols();
            let mut ga = Tensor::zeros(val(*a).shape());
            for (k, &src) in idx.iter().enumerate() {
                for j in 0..c {
                    ga.data_mut()[src * c + j] += g.data()[k * c + j];
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::GatherCols(a, idx) => {
            let (r, c) = val(*a).dims2();
            let k = idx.len();
            let mut ga = Tensor::zeros(val(*a).shape());
            for i in 0..r {
                for (p, &src) in idx.iter().enumerate() {
                    ga.data_mut()[i * c + src] += g.data()[i * k + p];
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::PickPerRow(a, idx) => {
            let c = val(*a).cols();
            let mut ga = Tensor::zeros(val(*a).shape());
            for (i, &j) in idx.iter().enumerate() {
                ga.data_mut()[i * c + j] += g.data()[i];
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::SoftmaxRows(a) => {
            let (r, c) = out.dims2();
            let mut ga = Tensor::zeros(val(*a).shape());
            for i in 0..r {
                let y = out.row_slice(i);
                let gi = g.row_slice(i);
                let s: f64 = y.iter().zip(gi).map(|(y, g)| y * g).sum();
                for j in 0..c {
                    ga.data_mut()[i * c + j] = y[j] * (gi[j] - s);
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::LogSoftmaxRows(a) => {
            let (r, c) = out.dims2();
            let mut ga = Tensor::zeros(val(*a).shape());
            for i in 0..r {
                let y = out.row_slice(i);
                let gi = g.row_slice(i);
                let s: f64 = gi.iter().sum();
                for j in 0..c {
                    ga.data_mut()[i * c + j] = gi[j] - y[j].exp() * s;
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::LayerNormRows(a, inv_std) => {
            let (r, c) = out.dims2();
            let mut ga = Tensor::zeros(val(*a).shape());
            for (i, &inv) in inv_std.iter().enumerate().take(r) {
                let y = out.row_slice(i);
                let gi = g.row_slice(i);
                let mg = gi.iter().sum::<f64>() / c as f64;
                let mgy = gi.iter().zip(y).map(|(g, y)| g * y).sum::<f64>() / c as f64;
                for j in 0..c {
                    ga.data_mut()[i * c + j] = inv * (gi[j] - mg - y[j] * mgy);
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::Gelu(a) => {
            let ga = g.zip_map(val(*a), |g, x| {
                let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
                let d = 0.5 * (1.0 + t)
                    + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x);
                g * d
            });
            accumulate(grads, nodes, *a, ga);
        }
        Op::Sqrt(a) => accumulate(grads, nodes, *a, g.zip_map(out, |g, y| g / (2.0 * y))),
        Op::Recip(a) => accumulate(grads, nodes, *a, g.zip_map(out, |g, y| -g * y * y)),
        Op::Exp(a) => accumulate(grads, nodes, *a, g.zip_map(out, |g, y| g * y)),
        Op::Log(a) => accumulate(grads, nodes, *a, g.zip_map(val(*a), |g, x| g / x)),
        Op::ScaleRows(m, s) => {
            let mv = val(*m);
            let sv = val(*s);
            let (r, c) = mv.dims2();
            if nodes[*m].requires_grad {
                let mut gm = Tensor::zeros(mv.shape());
                for i in 0..r {
                    let si = sv.data()[i];
                    for j in 0..c {
                        gm.data_mut()[i * c + j] = g.data()[i * c + j] * si;
                    }
                }
                accumulate(grads, nodes, *m, gm);
            }
            if nodes[*s].requires_grad {
                let mut gs = Tensor::zeros(sv.shape());
                for i in 0..r {
                    gs.data_mut()[i] = g
                        .row_slice(i)
                        .iter()
                        .zip(mv.row_slice(i))
                        .map(|(a, b)| a * b)
                        .sum();
                }
                accumulate(grads, nodes, *s, gs);
            }
        }
        Op::BceWithLogits(a, targets) => {
            let sig = val(*a).map(sigmoid);
            let d = sig.zip_map(targets, |p, y| p - y);
            accumulate(grads, nodes, *a, d.zip_map(g, |d, g| d * g));
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

/// Row-wise layer normalization without affine parameters, as a plain
/// tensor function. Returns the normalized rows and per-row `1/σ`.
pub fn layer_norm_rows(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let (r, c) = x.dims2();
    let mut out = x.clone();
    let mut inv_std = Vec::with_capacity(r);
    for i in 0..r {
        let row = &mut out.data_mut()[i * c..(i + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
        inv_std.push(inv);
    }
    (out, inv_std)
}

pub fn gelu_tensor(x: &Tensor) -> Tensor {
    x.map(gelu)
}

impl<'g> Var<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.graph.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.rg(self.id)
    }

    fn same_graph(&self, other: &Var<'g>) {
        assert!(
            std::ptr::eq(self.graph, other.graph),
            "variables from different graphs"
        );
    }

    fn unary(&self, value: Tensor, op: Op, name: &'static str) -> Var<'g> {
        let rg = self.requires_grad();
        self.graph.push(value, op, rg, name)
    }

    fn binary(&self, other: &Var<'g>, value: Tensor, op: Op, name: &'static str) -> Var<'g> {
        self.same_graph(other);
        let rg = self.requires_grad() || other.requires_grad();
        self.graph.push(value, op, rg, name)
    }

    fn assert_same_shape(&self, other: &Var<'g>, op: &str) {
        let (a, b) = (self.shape(), other.shape());
        assert_eq!(a, b, "{op}: shape mismatch {a:?} vs {b:?}");
    }

    pub fn add(&self, other: &Var<'g>) -> Var<'g> {
        self.assert_same_shape(other, "add");
        let v = self.value().zip_map(&other.value(), |a, b| a + b);
        self.binary(other, v, Op::Add(self.id, other.id), "add")
    }

    pub fn sub(&self, other: &Var<'g>) -> Var<'g> {
        self.assert_same_shape(other, "sub");
        let v = self.value().zip_map(&other.value(), |a, b| a - b);
        self.binary(other, v, Op::Sub(self.id, other.id), "sub")
    }

    pub fn mul(&self, other: &Var<'g>) -> Var<'g> {
        self.assert_same_shape(other, "mul");
        let v = self.value().zip_map(&other.value(), |a, b| a * b);
        self.binary(other, v, Op::Mul(self.id, other.id), "mul")
    }

    /// Adds a `[1, c]` (or `[c]`) row to every row of `self`.
    pub fn add_row(&self, row: &Var<'g>) -> Var<'g> {
        let a = self.value();
        let b = row.value();
        let (r, c) = a.dims2();
        assert_eq!(b.numel(), c, "add_row: row length {} vs {} cols", b.numel(), c);
        let mut v = (*a).clone();
        for i in 0..r {
            for (x, y) in v.data_mut()[i * c..(i + 1) * c].iter_mut().zip(b.data()) {
                *x += y;
            }
        }
        self.binary(row, v, Op::AddRow(self.id, row.id), "add_row")
    }

    pub fn scale(&self, s: f64) -> Var<'g> {
        let v = self.value().scale(s);
        self.unary(v, Op::Scale(self.id, s), "scale")
    }

    pub fn neg(&self) -> Var<'g> {
        self.scale(-1.0)
    }

    /// Multiplies every element by a one-element variable.
    pub fn mul_scalar(&self, s: &Var<'g>) -> Var<'g> {
        let sv = s.value();
        assert_eq!(sv.numel(), 1, "mul_scalar: scale must have one element");
        let v = self.value().scale(sv.item());
        self.binary(s, v, Op::MulScalar(self.id, s.id), "mul_scalar")
    }

    pub fn matmul(&self, other: &Var<'g>) -> Var<'g> {
        let v = self.value().matmul(&other.value()).expect("matmul shapes");
        self.binary(other, v, Op::MatMul(self.id, other.id), "matmul")
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Var<'g>) -> Var<'g> {
        let v = self.value().matmul_t(&other.value()).expect("matmul_t shapes");
        self.binary(other, v, Op::MatMulT(self.id, other.id), "matmul_t")
    }

    pub fn transpose(&self) -> Var<'g> {
        let v = self.value().transpose();
        self.unary(v, Op::Transpose(self.id), "transpose")
    }

    pub fn sum(&self) -> Var<'g> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::SumAll(self.id), "sum")
    }

    pub fn mean(&self) -> Var<'g> {
        let n = self.value().numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Mean over rows, giving a `[1, cols]` row.
    pub fn mean_rows(&self) -> Var<'g> {
        let a = self.value();
        assert!(a.rows() > 0, "mean_rows of an empty sequence");
        let v = a.mean_rows();
        self.unary(v, Op::MeanRows(self.id), "mean_rows")
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Var<'g> {
        let a = self.value();
        assert!(start <= end && end <= a.rows(), "slice_rows out of range");
        let v = a.slice_rows(start, end);
        self.unary(v, Op::SliceRows(self.id, start), "slice_rows")
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Var<'g> {
        let a = self.value();
        let (r, c) = a.dims2();
        assert!(start <= end && end <= c, "slice_cols out of range");
        let w = end - start;
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            data.extend_from_slice(&a.data()[i * c + start..i * c + end]);
        }
        let v = Tensor::new(vec![r, w], data).unwrap();
        self.unary(v, Op::SliceCols(self.id, start), "slice_cols")
    }

    pub fn gather_rows(&self, idx: &[usize]) -> Var<'g> {
        let a = self.value();
        let c = a.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(a.row_slice(i));
        }
        let v = Tensor::new(vec![idx.len(), c], data).unwrap();
        self.unary(v, Op::GatherRows(self.id, idx.to_vec()), "gather_rows")
    }

    pub fn gather_cols(&self, idx: &[usize]) -> Var<'g> {
        let a = self.value();
        let (r, c) = a.dims2();
        let mut data = Vec::with_capacity(r * idx.len());
        for i in 0..r {
            for &j in idx {
                assert!(j < c, "gather_cols index out of range");
                data.push(a.data()[i * c + j]);
            }
        }
        let v = Tensor::new(vec![r, idx.len()], data).unwrap();
        self.unary(v, Op::GatherCols(self.id, idx.to_vec()), "gather_cols")
    }

    /// Picks `self[i, idx[i]]` for every row, giving `[rows, 1]`.
    pub fn pick_per_row(&self, idx: &[usize]) -> Var<'g> {
        let a = self.value();
        let (r, c) = a.dims2();
        assert_eq!(idx.len(), r, "pick_per_row: one index per row");
        let data = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < c, "pick_per_row index out of range");
                a.data()[i * c + j]
            })
            .collect();
        let v = Tensor::new(vec![r, 1], data).unwrap();
        self.unary(v, Op::PickPerRow(self.id, idx.to_vec()), "pick_per_row")
    }

    pub fn softmax_rows(&self) -> Var<'g> {
        let v = self.value().softmax_rows();
        self.unary(v, Op::SoftmaxRows(self.id), "softmax")
    }

    pub fn log_softmax_rows(&self) -> Var<'g> {
        let v = self.value().log_softmax_rows();
        self.unary(v, Op::LogSoftmaxRows(self.id), "log_softmax")
    }

    pub fn layer_norm_rows(&self, eps: f64) -> Var<'g> {
        let (v, inv_std) = layer_norm_rows(&self.value(), eps);
        self.unary(v, Op::LayerNormRows(self.id, inv_std), "layer_norm")
    }

    pub fn gelu(&self) -> Var<'g> {
        let v = gelu_tensor(&self.value());
        self.unary(v, Op::Gelu(self.id), "gelu")
    }

    pub fn sqrt(&self) -> Var<'g> {
        let v = self.value().map(f64::sqrt);
        self.unary(v, Op::Sqrt(self.id), "sqrt")
    }

    pub fn recip(&self) -> Var<'g> {
        let v = self.value().map(|x| 1.0 / x);
        self.unary(v, Op::Recip(self.id), "recip")
    }

    pub fn exp(&self) -> Var<'g> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.id), "exp")
    }

    pub fn ln(&self) -> Var<'g> {
        let v = self.value().map(f64::ln);
        self.unary(v, Op::Log(self.id), "log")
    }

    /// Scales row `i` of `self` by element `i` of `scales`.
    pub fn scale_rows(&self, scales: &Var<'g>) -> Var<'g> {
        let m = self.value();
        let s = scales.value();
        let (r, c) = m.dims2();
        assert_eq!(s.numel(), r, "scale_rows: one scale per row");
        let mut v = (*m).clone();
        for i in 0..r {
            for x in &mut v.data_mut()[i * c..(i + 1) * c] {
                *x *= s.data()[i];
            }
        }
        self.binary(scales, v, Op::ScaleRows(self.id, scales.id), "scale_rows")
    }

    /// Element-wise numerically stable binary cross-entropy with logits.
    pub fn bce_with_logits(&self, targets: &Tensor) -> Var<'g> {
        let a = self.value();
        assert_eq!(a.shape(), targets.shape(), "bce_with_logits: target shape");
        let v = a.zip_map(targets, |x, y| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p());
        self.unary(v, Op::BceWithLogits(self.id, targets.clone()), "bce")
    }

    pub fn concat_rows(parts: &[Var<'g>]) -> Var<'g> {
        let g = parts[0].graph;
        let vals: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = vals.iter().map(|v| v.as_ref()).collect();
        let v = Tensor::concat_rows(&refs).expect("concat_rows shapes");
        let rg = parts.iter().any(|p| p.requires_grad());
        g.push(v, Op::ConcatRows(parts.iter().map(|p| p.id).collect()), rg, "concat_rows")
    }

    pub fn concat_cols(parts: &[Var<'g>]) -> Var<'g> {
        let g = parts[0].graph;
        let vals: Vec<Arc<Tensor>> = parts.iter().map(|p| p.value()).collect();
        let r = vals[0].rows();
        assert!(vals.iter().all(|v| v.rows() == r), "concat_cols: row counts differ");
        let w: usize = vals.iter().map(|v| v.cols()).sum();
        let mut data = Vec::with_capacity(r * w);
        for i in 0..r {
            for v in &vals {
                data.extend_from_slice(v.row_slice(i));
            }
        }
        let v = Tensor::new(vec![r, w], data).unwrap();
        let rg = parts.iter().any(|p| p.requires_grad());
        g.push(v, Op::ConcatCols(parts.iter().map(|p| p.id).collect()), rg, "concat_cols")
    }

    /// Dot product of two equally shaped variables, as a scalar.
    pub fn dot(&self, other: &Var<'g>) -> Var<'g> {
        self.mul(other).sum()
    }

    pub fn norm(&self) -> Var<'g> {
        self.dot(self).sqrt()
    }

    /// Cosine similarity of two equally shaped variables.
    pub fn cosine(&self, other: &Var<'g>) -> Var<'g> {
        let denom = self.norm().mul(&other.norm()).recip();
        self.dot(other).mul(&denom)
    }
}

/// Maximum relative error between the analytic gradient of `f` at `x` and a
/// central-difference estimate, using `|analytic − numeric| / max(1, |numeric|)`.
pub fn finite_difference_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Var<'g>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let analytic = {
        let g = Graph::new();
        let xv = g.leaf(x.clone());
        let y = f(&g, xv);
        let grads = g.backward(y)?;
        grads
            .wrt(xv)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()))
    };
    let eval = |t: Tensor| -> Result<f64> {
        let g = Graph::new();
        let xv = g.constant(t);
        let y = f(&g, xv);
        g.check_finite()?;
        let v = y.value();
        if !v.is_scalar() {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        Ok(v.item())
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let err = (analytic.data()[i] - numeric).abs() / numeric.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
