//! Rank-one factor pools and the adapted linear layer.
//!
//! A weight adjustment is assembled as `ΔW = Σᵢ gᵢ · (bᵢ ⊗ aᵢ)` from factor
//! pairs picked out of a [`FactorPool`]. With unit gates and the pool's rows
//! stacked into dense `A` and `B`, this is exactly the conventional `B·A`
//! low-rank update.
//!
//! # Pool JSON format
//!
//! ```json
//! {"modality":"visual","task_id":1,"size":16,"d_in":32,"d_out":32,
//!  "a_factors":[[...d_in values...], ...size rows],
//!  "b_factors":[[...d_out values...], ...size rows]}
//! ```
//!
//! Floats are written in shortest round-trip form, so export followed by
//! import reproduces every value bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Parameter, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FACTOR_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Textual,
    /// One pool serving both modalities (ablation only).
    Shared,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Textual => "textual",
            Modality::Shared => "shared",
        }
    }
}

/// `size` learnable factor pairs. Row `e` of `a` is `a_e` (length `d_in`),
/// row `e` of `b` is `b_e` (length `d_out`).
#[derive(Clone, Debug)]
pub struct FactorPool {
    pub modality: Modality,
    pub task_id: u32,
    pub a: Parameter,
    pub b: Parameter,
}

impl FactorPool {
    /// Gaussian `a` factors with std 0.02, all-zero `b` factors.
    pub fn init(
        modality: Modality,
        task_id: u32,
        size: usize,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if size == 0 || d_in == 0 || d_out == 0 {
            return Err(Error::invalid("pool size and dimensions must be at least 1"));
        }
        Ok(Self {
            modality,
            task_id,
            a: Parameter::new(Tensor::randn(&[size, d_in], FACTOR_INIT_STD, rng)),
            b: Parameter::new(Tensor::zeros(&[size, d_out])),
        })
    }

    pub fn init_seeded(
        modality: Modality,
        task_id: u32,
        size: usize,
        d_in: usize,
        d_out: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::init(modality, task_id, size, d_in, d_out, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn size(&self) -> usize {
        self.a.value().rows()
    }

    pub fn d_in(&self) -> usize {
        self.a.value().cols()
    }

    pub fn d_out(&self) -> usize {
        self.b.value().cols()
    }

    pub fn trainable(&self) -> bool {
        self.a.trainable
    }

    pub fn set_trainable(&mut self, on: bool) {
        self.a.trainable = on;
        self.b.trainable = on;
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.a, &mut self.b]
    }

    pub fn params(&self) -> [&Parameter; 2] {
        [&self.a, &self.b]
    }

    pub fn to_record(&self) -> PoolRecord {
        let rows = |t: &Tensor| (0..t.rows()).map(|i| t.row_slice(i).to_vec()).collect();
        PoolRecord {
            modality: self.modality,
            task_id: self.task_id,
            size: self.size(),
            d_in: self.d_in(),
            d_out: self.d_out(),
            a_factors: rows(self.a.value()),
            b_factors: rows(self.b.value()),
        }
    }

    /// Imported pools are frozen; call [`FactorPool::set_trainable`] to resume training.
    pub fn from_record(rec: PoolRecord) -> Result<Self> {
        rec.validate()?;
        let a = Tensor::from_rows(&rec.a_factors)?;
        let b = Tensor::from_rows(&rec.b_factors)?;
        Ok(Self {
            modality: rec.modality,
            task_id: rec.task_id,
            a: Parameter::frozen(a),
            b: Parameter::frozen(b),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_record()).expect("pool records always serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let rec: PoolRecord =
            serde_json::from_str(s).map_err(|e| Error::Format(format!("pool json: {e}")))?;
        Self::from_record(rec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolRecord {
    pub modality: Modality,
    pub task_id: u32,
    pub size: usize,
    pub d_in: usize,
    pub d_out: usize,
    pub a_factors: Vec<Vec<f64>>,
    pub b_factors: Vec<Vec<f64>>,
}

impl PoolRecord {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.d_in == 0 || self.d_out == 0 {
            return Err(Error::Format("pool size and dimensions must be positive".into()));
        }
        if self.task_id == 0 {
            return Err(Error::Format("task ids start at 1".into()));
        }
        let check = |name: &str, rows: &[Vec<f64>], width: usize| -> Result<()> {
            if rows.len() != self.size {
                return Err(Error::Format(format!(
                    "{name}: expected {} rows, got {}",
                    self.size,
                    rows.len()
                )));
            }
            for r in rows {
                if r.len() != width {
                    return Err(Error::Format(format!("{name}: row length {} != {width}", r.len())));
                }
                if r.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Format(format!("{name}: non-finite value")));
                }
            }
            Ok(())
        };
        check("a_factors", &self.a_factors, self.d_in)?;
        check("b_factors", &self.b_factors, self.d_out)
    }
}

/// `Σᵢ gatesᵢ · (bᵢ ⊗ aᵢ)` for selected rows `a: [r, d_in]`, `b: [r, d_out]`
/// and `gates: [1, r]`, giving a `[d_out, d_in]` matrix.
pub fn compose_delta_var<'g>(a: Var<'g>, b: Var<'g>, gates: Var<'g>) -> Result<Var<'g>> {
    let (sa, sb, sg) = (a.shape(), b.shape(), gates.shape());
    let r = sa.first().copied().unwrap_or(0);
    if sa.len() != 2 || sb.len() != 2 || sb[0] != r || sg.iter().product::<usize>() != r {
        return Err(Error::shape(
            "compose_delta",
            format!("a {sa:?}, b {sb:?}, gates {sg:?}"),
        ));
    }
    Ok(b.transpose().matmul(&a.scale_rows(&gates)))
}

/// Plain-tensor form of [`compose_delta_var`].
pub fn compose_delta(a: &Tensor, b: &Tensor, gates: &[f64]) -> Result<Tensor> {
    let g = Graph::new();
    let out = compose_delta_var(
        g.constant(a.clone()),
        g.constant(b.clone()),
        g.constant(Tensor::row(gates)),
    )?;
    let v = out.value();
    Ok((*v).clone())
}

/// A frozen projection `W: [d_out, d_in]` that accepts per-input additive
/// adjustments scaled by `alpha`.
#[derive(Clone, Debug)]
pub struct AdaptedLinear {
    pub weight: Parameter,
    pub alpha: f64,
    pub rank: usize,
}

impl AdaptedLinear {
    pub fn new(weight: Tensor, alpha: f64, rank: usize) -> Result<Self> {
        if !(alpha >= 1.0) {
            return Err(Error::invalid("alpha must be at least 1"));
        }
        if rank == 0 {
            return Err(Error::invalid("rank must be at least 1"));
        }
        Ok(Self {
            weight: Parameter::frozen(weight),
            alpha,
            rank,
        })
    }

    pub fn d_in(&self) -> usize {
        self.weight.value().cols()
    }

    pub fn d_out(&self) -> usize {
        self.weight.value().rows()
    }

    /// Rejects pools whose size cannot supply `rank` factors.
    pub fn check_pool(&self, pool: &FactorPool) -> Result<()> {
        if pool.size() < self.rank {
            return Err(Error::invalid(format!(
                "pool of {} factors cannot supply rank {}",
                pool.size(),
                self.rank
            )));
        }
        if pool.d_in() != self.d_in() || pool.d_out() != self.d_out() {
            return Err(Error::shape(
                "attach pool",
                format!(
                    "pool {}x{} vs layer {}x{}",
                    pool.d_out(),
                    pool.d_in(),
                    self.d_out(),
                    self.d_in()
                ),
            ));
        }
        Ok(())
    }

    pub fn forward_frozen<'g>(&self, g: &'g Graph, h: Var<'g>) -> Var<'g> {
        h.matmul_t(&g.param(&self.weight))
    }

    /// `h Wᵀ + α · h (Σ deltas)ᵀ`, row-wise over the sequence.
    pub fn forward<'g>(&self, g: &'g Graph, h: Var<'g>, deltas: &[Var<'g>]) -> Result<Var<'g>> {
        let hs = h.shape();
        if hs.len() != 2 || hs[1] != self.d_in() {
            return Err(Error::shape(
                "adapted_forward",
                format!("input {hs:?} vs d_in {}", self.d_in()),
            ));
        }
        let base = self.forward_frozen(g, h);
        let Some((first, rest)) = deltas.split_first() else {
            return Ok(base);
        };
        let expect = vec![self.d_out(), self.d_in()];
        for d in deltas {
            if d.shape() != expect {
                return Err(Error::shape(
                    "adapted_forward",
                    format!("delta {:?} vs {:?}", d.shape(), expect),
                ));
            }
        }
        let total = rest.iter().fold(*first, |acc, d| acc.add(d));
        Ok(base.add(&h.matmul_t(&total).scale(self.alpha)))
    }
}

/// Adapted forward for the usual two-modality case.
pub fn adapted_forward<'g>(
    layer: &AdaptedLinear,
    g: &'g Graph,
    h: Var<'g>,
    delta_v: Var<'g>,
    delta_t: Var<'g>,
) -> Result<Var<'g>> {
    layer.forward(g, h, &[delta_v, delta_t])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_pool_shape_and_zero_b() {
        let p = FactorPool::init_seeded(Modality::Visual, 1, 16, 32, 32, 3).unwrap();
        assert_eq!(p.size(), 16);
        assert_eq!(p.a.value().shape(), &[16, 32]);
        assert!(p.b.value().data().iter().all(|&v| v == 0.0));
        assert!(p.trainable());
    }

    #[test]
    fn equal_seeds_give_identical_pools() {
        let p = FactorPool::init_seeded(Modality::Textual, 2, 8, 5, 7, 42).unwrap();
        let q = FactorPool::init_seeded(Modality::Textual, 2, 8, 5, 7, 42).unwrap();
        assert_eq!(p.a.value(), q.a.value());
    }

    #[test]
    fn empty_pool_is_rejected() {
        assert!(FactorPool::init_seeded(Modality::Visual, 1, 0, 4, 4, 0).is_err());
    }

    #[test]
    fn compose_hand_example() {
        let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![1.0, 1.0], vec![2.0, 0.0]]).unwrap();
        let d = compose_delta(&a, &b, &[1.0, 1.0]).unwrap();
        assert_eq!(d.data(), &[1.0, 2.0, 1.0, 0.0]);
    }

    #[test]
    fn compose_zero_b_is_zero() {
        let p = FactorPool::init_seeded(Modality::Visual, 1, 6, 4, 3, 9).unwrap();
        let d = compose_delta(p.a.value(), p.b.value(), &[0.3; 6]).unwrap();
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn compose_rejects_mismatched_lists() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[3, 3]);
        assert!(compose_delta(&a, &b, &[1.0, 1.0]).is_err());
        let b = Tensor::zeros(&[2, 3]);
        assert!(compose_delta(&a, &b, &[1.0]).is_err());
    }

    #[test]
    fn zero_deltas_reproduce_frozen_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let layer = AdaptedLinear::new(Tensor::randn(&[4, 3], 1.0, &mut rng), 1.0, 2).unwrap();
        let g = Graph::new();
        let h = g.constant(Tensor::randn(&[5, 3], 1.0, &mut rng));
        let z = g.constant(Tensor::zeros(&[4, 3]));
        let out = adapted_forward(&layer, &g, h, z, z).unwrap();
        let base = layer.forward_frozen(&g, h);
        assert_eq!(out.value().data(), base.value().data());
    }

    #[test]
    fn alpha_scales_adapter_contribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let h = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let dv = Tensor::randn(&[4, 3], 0.1, &mut rng);
        let dt = Tensor::randn(&[4, 3], 0.1, &mut rng);
        let run = |alpha: f64| {
            let layer = AdaptedLinear::new(w.clone(), alpha, 1).unwrap();
            let g = Graph::new();
            let hv = g.constant(h.clone());
            let out = adapted_forward(&layer, &g, hv, g.constant(dv.clone()), g.constant(dt.clone()))
                .unwrap();
            let base = layer.forward_frozen(&g, hv);
            out.value().zip_map(&base.value(), |a, b| a - b)
        };
        let one = run(1.0);
        let two = run(2.0);
        assert!(two.max_abs_diff(&one.scale(2.0)) < 1e-12);
    }

    #[test]
    fn alpha_below_one_is_rejected() {
        assert!(AdaptedLinear::new(Tensor::eye(2), 0.5, 1).is_err());
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let layer = AdaptedLinear::new(Tensor::eye(3), 1.0, 1).unwrap();
        let g = Graph::new();
        let h = g.constant(Tensor::zeros(&[2, 4]));
        let d = g.constant(Tensor::zeros(&[3, 3]));
        assert!(adapted_forward(&layer, &g, h, d, d).is_err());
        let h = g.constant(Tensor::zeros(&[2, 3]));
        let bad = g.constant(Tensor::zeros(&[3, 2]));
        assert!(adapted_forward(&layer, &g, h, bad, d).is_err());
    }

    #[test]
    fn check_pool_enforces_rank() {
        let layer = AdaptedLinear::new(Tensor::eye(3), 1.0, 4).unwrap();
        let pool = FactorPool::init_seeded(Modality::Visual, 1, 3, 3, 3, 0).unwrap();
        assert!(layer.check_pool(&pool).is_err());
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let mut p = FactorPool::init_seeded(Modality::Textual, 3, 4, 5, 6, 77).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        *p.b.value_mut() = Tensor::randn(&[4, 6], 1.0, &mut rng);
        let q = FactorPool::from_json(&p.to_json()).unwrap();
        assert_eq!(q.modality, Modality::Textual);
        assert_eq!(q.task_id, 3);
        for (x, y) in p.a.value().data().iter().zip(q.a.value().data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in p.b.value().data().iter().zip(q.b.value().data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn malformed_pool_json_is_rejected() {
        assert!(FactorPool::from_json("{}").is_err());
        let bad = r#"{"modality":"visual","task_id":1,"size":2,"d_in":1,"d_out":1,
            "a_factors":[[0.1]],"b_factors":[[0.0],[0.0]]}"#;
        assert!(FactorPool::from_json(bad).is_err());
    }
}
