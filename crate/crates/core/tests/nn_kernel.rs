use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reftrack::nn::{
    grad_check, primitive_suite, MultiHeadAttention, ParamStore, Tape, Tensor,
};

#[test]
fn every_primitive_passes_finite_differences() {
    let suite = primitive_suite(11, 10).unwrap();
    for e in &suite {
        assert!(
            e.report.max_rel_err < 1e-4,
            "{}: rel err {:e} (abs {:e})",
            e.name,
            e.report.max_rel_err,
            e.report.max_abs_err
        );
    }
    assert!(suite.iter().any(|e| e.name == "multi_head_attention"));
}

#[test]
fn sum_of_matmul_gradient_is_near_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let b = Tensor::randn(&[4, 3], 1.0, &mut rng);
    let a = Tensor::randn(&[2, 4], 1.0, &mut rng);
    let r = grad_check(
        |t, x| {
            let bv = t.constant(b.clone());
            let y = t.matmul(x, bv)?;
            t.sum(y)
        },
        &a,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

#[test]
fn linear_function_is_exact_to_rounding() {
    let p = Tensor::new(&[1, 3], vec![0.3, -1.2, 2.0]).unwrap();
    let r = grad_check(
        |t, x| {
            let y = t.scale(x, 3.0)?;
            t.sum(y)
        },
        &p,
        1e-5,
    )
    .unwrap();
    assert!(r.max_abs_err < 1e-9, "{r:?}");
}

#[test]
fn matmul_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let mut t = Tape::new();
    let av = t.leaf(a.clone());
    let i = t.constant(Tensor::eye(4));
    let y = t.matmul(av, i).unwrap();
    assert_eq!(t.value(y), &a);
}

#[test]
fn shape_mismatch_names_operands() {
    let mut t = Tape::new();
    let a = t.leaf(Tensor::zeros(&[2, 3]));
    let b = t.leaf(Tensor::zeros(&[2, 3]));
    let err = t.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("matmul") && err.contains("2x3"), "{err}");
    let c = t.leaf(Tensor::zeros(&[3, 2]));
    assert!(t.add(a, c).is_err());
}

#[test]
fn softmax_on_uniform_row_is_uniform() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::full(&[2, 5], 3.3));
    let y = t.softmax(x, 1).unwrap();
    for v in t.value(y).data() {
        assert!((v - 0.2).abs() < 1e-15);
    }
}

#[test]
fn softmax_survives_large_logits() {
    let mut t = Tape::new();
    let x = t.leaf(Tensor::from_rows(&[vec![1000.0, -1000.0, 999.0]]).unwrap());
    let y = t.softmax(x, 1).unwrap();
    assert!(t.value(y).is_finite());
}

#[test]
fn layernorm_standardizes_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut t = Tape::new();
    let x = t.leaf(Tensor::randn(&[4, 16], 3.0, &mut rng));
    let y = t.layernorm(x, 0.0).unwrap();
    for i in 0..4 {
        let row = t.value(y).row(i);
        let mu: f64 = row.iter().sum::<f64>() / 16.0;
        let var: f64 = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / 16.0;
        assert!(mu.abs() < 1e-9 && (var - 1.0).abs() < 1e-9, "{mu} {var}");
    }
}

fn mha(seed: u64, dim: usize, heads: usize) -> (ParamStore, MultiHeadAttention) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    let m = MultiHeadAttention::new(&mut ps, "a", "main", dim, dim, heads, &mut rng).unwrap();
    (ps, m)
}

#[test]
fn attention_with_single_key_returns_projected_value() {
    let (ps, m) = mha(2, 4, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let kv = Tensor::randn(&[1, 4], 1.0, &mut rng);
    let mut outs = Vec::new();
    for s in 0..2 {
        let mut t = Tape::new();
        let q = t.leaf(Tensor::randn(&[3, 4], 1.0 + s as f64, &mut rng));
        let k = t.leaf(kv.clone());
        let o = m.forward(&mut t, &ps, q, k, k, None).unwrap();
        let out = t.value(o.output).clone();
        // every query row gets the same vector
        for i in 1..3 {
            assert!(out.row(i).iter().zip(out.row(0)).all(|(a, b)| (a - b).abs() < 1e-12));
        }
        outs.push(out.row(0).to_vec());
    }
    assert!(outs[0].iter().zip(&outs[1]).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn attention_with_zero_value_path_is_zero() {
    let (mut ps, m) = mha(3, 8, 2);
    m.zero_value_path(&mut ps);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut t = Tape::new();
    let q = t.leaf(Tensor::randn(&[4, 8], 1.0, &mut rng));
    let k = t.leaf(Tensor::randn(&[3, 8], 1.0, &mut rng));
    let o = m.forward(&mut t, &ps, q, k, k, None).unwrap();
    assert!(t.value(o.output).data().iter().all(|&v| v == 0.0));
}

#[test]
fn attention_indivisible_heads_rejected() {
    let mut ps = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(MultiHeadAttention::new(&mut ps, "a", "g", 10, 10, 3, &mut rng).is_err());
}

#[test]
fn attention_weight_rows_sum_to_one() {
    let (ps, m) = mha(4, 8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut t = Tape::new();
    let q = t.leaf(Tensor::randn(&[4, 8], 1.0, &mut rng));
    let k = t.leaf(Tensor::randn(&[3, 8], 1.0, &mut rng));
    let o = m.forward(&mut t, &ps, q, k, k, None).unwrap();
    assert_eq!(o.weights.len(), 2);
    for w in o.weights {
        let w = t.value(w);
        assert_eq!(w.shape(), &[4, 3]);
        for i in 0..4 {
            assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| t.row(i).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_are_distributions(vals in proptest::collection::vec(-50.0f64..50.0, 12)) {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(&[3, 4], vals).unwrap());
        let y = t.softmax(x, 1).unwrap();
        for i in 0..3 {
            let row = t.value(y).row(i);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn attention_equivariant_in_queries_invariant_in_keys(seed in 0u64..1000) {
        let (ps, m) = mha(seed, 8, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let q = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let kv = Tensor::randn(&[4, 8], 1.0, &mut rng);
        let qp = [3usize, 0, 4, 1, 2];
        let kp = [2usize, 3, 1, 0];
        let run = |q: &Tensor, kv: &Tensor| {
            let mut t = Tape::new();
            let qv = t.leaf(q.clone());
            let kvv = t.leaf(kv.clone());
            let o = m.forward(&mut t, &ps, qv, kvv, kvv, None).unwrap();
            t.value(o.output).clone()
        };
        let base = run(&q, &kv);
        let permuted = run(&permute_rows(&q, &qp), &permute_rows(&kv, &kp));
        prop_assert!(permuted.max_abs_diff(&permute_rows(&base, &qp)) < 1e-12);
    }
}
