use cmml_core::autograd::Graph;
use cmml_core::lora::{adapted_forward, compose_delta, AdaptedLinear, FactorPool, Modality};
use cmml_core::routing::{route_pool, GateMode, Router};
use cmml_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `Σᵢ gᵢ bᵢ aᵢᵀ` by explicit triple loop.
fn dense_oracle(a: &Tensor, b: &Tensor, gates: &[f64]) -> Vec<Vec<f64>> {
    let (r, d_in) = a.dims2();
    let d_out = b.cols();
    let mut m = vec![vec![0.0; d_in]; d_out];
    for (o, row) in m.iter_mut().enumerate() {
        for (i, cell) in row.iter_mut().enumerate() {
            for (k, gate) in gates.iter().enumerate().take(r) {
                *cell += gate * b.get(k, o) * a.get(k, i);
            }
        }
    }
    m
}

#[test]
fn compose_matches_dense_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..100 {
        let r = rng.random_range(1..8);
        let d_in = rng.random_range(1..20);
        let d_out = rng.random_range(1..20);
        let a = Tensor::randn(&[r, d_in], 1.0, &mut rng);
        let b = Tensor::randn(&[r, d_out], 1.0, &mut rng);
        let ones = vec![1.0; r];
        let delta = compose_delta(&a, &b, &ones).unwrap();
        // Unit gates give B·A with B = bᵀ (columns b_i) and A = a (rows a_i).
        let ba = b.transpose().matmul(&a).unwrap();
        assert!(delta.max_abs_diff(&ba) <= 1e-10);
        let gates: Vec<f64> = (0..r).map(|_| rng.random_range(0.0..1.0)).collect();
        let delta = compose_delta(&a, &b, &gates).unwrap();
        let oracle = dense_oracle(&a, &b, &gates);
        for (o, row) in oracle.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                assert!((delta.get(o, i) - v).abs() <= 1e-10);
            }
        }
    }
}

/// Every pair of a pool with unit gates is a conventional low-rank adapter
/// `h Wᵀ + α h (BA)ᵀ`.
#[test]
fn full_pool_reproduces_conventional_low_rank_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let r = rng.random_range(1..6);
        let (d_in, d_out, seq) = (9, 7, 4);
        let alpha = rng.random_range(1.0..3.0);
        let w = Tensor::randn(&[d_out, d_in], 1.0, &mut rng);
        let layer = AdaptedLinear::new(w.clone(), alpha, r).unwrap();
        let a = Tensor::randn(&[r, d_in], 1.0, &mut rng);
        let b = Tensor::randn(&[r, d_out], 1.0, &mut rng);
        let h = Tensor::randn(&[seq, d_in], 1.0, &mut rng);

        let g = Graph::new();
        let delta = g.constant(compose_delta(&a, &b, &vec![1.0; r]).unwrap());
        let zero = g.constant(Tensor::zeros(&[d_out, d_in]));
        let out = adapted_forward(&layer, &g, g.constant(h.clone()), delta, zero).unwrap();

        let ba = b.transpose().matmul(&a).unwrap();
        let expect = h
            .matmul_t(&w)
            .unwrap()
            .zip_map(&h.matmul_t(&ba).unwrap(), |base, d| base + alpha * d);
        assert!(out.value().max_abs_diff(&expect) <= 1e-10);
    }
}

/// The routed update is the composition of exactly the recorded pairs.
#[test]
fn routed_delta_matches_recorded_decision() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for mode in [GateMode::Binary, GateMode::Softmax] {
        for _ in 0..20 {
            let (e, d_in, d_out) = (6, 5, 4);
            let r = rng.random_range(1..=e);
            let mut pool = FactorPool::init(Modality::Visual, 1, e, d_in, d_out, &mut rng).unwrap();
            *pool.b.value_mut() = Tensor::randn(&[e, d_out], 1.0, &mut rng);
            let mut router = Router::init(Modality::Visual, 1, e, d_in, &mut rng);
            for p in router.params_mut() {
                *p.value_mut() = Tensor::randn(&[e, d_in], 1.0, &mut rng);
            }
            let g = Graph::new();
            let q = g.constant(Tensor::randn(&[1, d_in], 1.0, &mut rng));
            let (delta, dec) = route_pool(&g, &pool, &router, q, r, mode, false).unwrap();
            let rows = |t: &Tensor, idx: &[usize]| {
                Tensor::from_rows(&idx.iter().map(|&i| t.row_slice(i).to_vec()).collect::<Vec<_>>()).unwrap()
            };
            let rr = (r * r) as f64;
            let gates: Vec<f64> = match mode {
                GateMode::Binary => vec![1.0; r],
                GateMode::Softmax => dec.gates_a.iter().zip(&dec.gates_b).map(|(x, y)| x * y * rr).collect(),
            };
            let expect = compose_delta(
                &rows(pool.a.value(), &dec.indices_a),
                &rows(pool.b.value(), &dec.indices_b),
                &gates,
            )
            .unwrap();
            assert!(delta.value().max_abs_diff(&expect) <= 1e-12);
        }
    }
}

#[test]
fn zero_b_factors_leave_layer_frozen() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = Tensor::randn(&[6, 5], 1.0, &mut rng);
    let layer = AdaptedLinear::new(w, 2.0, 2).unwrap();
    let pool = FactorPool::init(Modality::Textual, 1, 4, 5, 6, &mut rng).unwrap();
    let router = Router::init(Modality::Textual, 1, 4, 5, &mut rng);
    let g = Graph::new();
    let h = g.constant(Tensor::randn(&[3, 5], 1.0, &mut rng));
    let (delta, _) = route_pool(&g, &pool, &router, h.mean_rows(), 2, GateMode::Softmax, false).unwrap();
    let adapted = layer.forward(&g, h, &[delta]).unwrap();
    let frozen = layer.forward_frozen(&g, h);
    assert_eq!(adapted.value().data(), frozen.value().data());
}
