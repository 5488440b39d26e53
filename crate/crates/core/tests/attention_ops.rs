use mmnas::attention::*;
use mmnas::numerics::{gradient_check_params, seeded, Graph, ParamId, ParamStore, Rng, Tensor, Var};
use rand::Rng as _;

fn random(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm.iter().map(|&i| t.row_slice(i).to_vec()).collect();
    Tensor::from_rows(&rows).unwrap()
}

fn dims(d: usize, heads: usize) -> OpDims {
    OpDims { d, heads, d_rel: 4, dropout: 0.0 }
}

fn weighted_sum(g: &mut Graph, out: Var, c: &Tensor) -> Var {
    let cv = g.constant(c.clone());
    let p = g.mul(out, cv).unwrap();
    g.sum(p)
}

#[test]
fn single_key_returns_its_value() {
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let q = g.constant(Tensor::from_rows(&[vec![0.3, -1.0], vec![2.0, 0.5]]).unwrap());
    let k = g.constant(Tensor::row(&[1.0, 4.0]));
    let v = g.constant(Tensor::row(&[7.0, -3.0]));
    let (out, w) = generalized_attention(&mut g, q, k, v, None).unwrap();
    assert_eq!(g.value(out), &[7.0, -3.0, 7.0, -3.0]);
    assert_eq!(g.value(w), &[1.0, 1.0]);
}

#[test]
fn one_dimensional_hand_case() {
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let q = g.constant(Tensor::row(&[3f64.ln()]));
    let k = g.constant(Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap());
    let v = g.constant(Tensor::matrix(2, 1, vec![2.0, 0.0]).unwrap());
    let (out, w) = generalized_attention(&mut g, q, k, v, None).unwrap();
    assert!((g.value(out)[0] - 1.5).abs() < 1e-4);
    assert!((g.value(w)[0] - 0.75).abs() < 1e-4);
    assert!((g.value(w)[1] - 0.25).abs() < 1e-4);
}

#[test]
fn identical_keys_average_values() {
    let mut rng = seeded(1);
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let q = g.constant(random(&mut rng, 3, 4));
    let krow = random(&mut rng, 1, 4);
    let k = g.constant(Tensor::from_rows(&vec![krow.data().to_vec(); 5]).unwrap());
    let vt = random(&mut rng, 5, 4);
    let v = g.constant(vt.clone());
    let (out, _) = generalized_attention(&mut g, q, k, v, None).unwrap();
    for c in 0..4 {
        let mean: f64 = (0..5).map(|r| vt.at(r, c)).sum::<f64>() / 5.0;
        for r in 0..3 {
            assert!((g.value(out)[r * 4 + c] - mean).abs() < 1e-9);
        }
    }
}

#[test]
fn empty_keys_rejected() {
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let q = g.constant(Tensor::row(&[1.0]));
    let k = g.constant(Tensor::row(&[1.0]));
    let v = g.constant(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
    assert!(generalized_attention(&mut g, q, k, v, None).is_err());
}

#[test]
fn single_head_identity_projection_matches_generalized_attention() {
    let mut rng = seeded(2);
    let mut store = ParamStore::new();
    let p = AttentionParams::new(&mut store, "a", 4, 1, &mut rng).unwrap();
    for id in [p.wq, p.wk, p.wv, p.wo] {
        store.set(id, Tensor::identity(4)).unwrap();
    }
    let x = random(&mut rng, 3, 4);
    let y = random(&mut rng, 5, 4);
    let mut g = Graph::inference(&store);
    let xv = g.constant(x);
    let yv = g.constant(y);
    let mha = multi_head_attention(&mut g, &p, xv, yv, yv, None).unwrap();
    let (plain, w) = generalized_attention(&mut g, xv, yv, yv, None).unwrap();
    assert_eq!(g.value(mha.out), g.value(plain));
    assert_eq!(g.value(mha.weights[0]), g.value(w));
}

#[test]
fn multi_head_shapes_and_zero_output_projection() {
    let mut rng = seeded(3);
    let mut store = ParamStore::new();
    let p = AttentionParams::new(&mut store, "a", 8, 4, &mut rng).unwrap();
    let x = random(&mut rng, 3, 8);
    let y = random(&mut rng, 6, 8);
    {
        let mut g = Graph::inference(&store);
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let mha = multi_head_attention(&mut g, &p, xv, yv, yv, None).unwrap();
        assert_eq!(g.shape(mha.out), &[3, 8]);
        assert_eq!(mha.weights.len(), 4);
        for w in &mha.weights {
            assert_eq!(g.shape(*w), &[3, 6]);
            for r in 0..3 {
                let s: f64 = g.value(*w)[r * 6..(r + 1) * 6].iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
    store.set(p.wo, Tensor::zeros(&[8, 8])).unwrap();
    let mut g = Graph::inference(&store);
    let xv = g.constant(x);
    let yv = g.constant(y);
    let mha = multi_head_attention(&mut g, &p, xv, yv, yv, None).unwrap();
    assert!(g.value(mha.out).iter().all(|&v| v == 0.0));
    assert!(AttentionParams::new(&mut store, "b", 6, 4, &mut rng).is_err());
}

fn apply_op(store: &ParamStore, op: &OpParams, x: &Tensor, ctx_y: Option<&Tensor>, rel: Option<&Tensor>) -> Tensor {
    let mut g = Graph::inference(store);
    let xv = g.constant(x.clone());
    let guide = ctx_y.map(|y| g.constant(y.clone()));
    let relations = rel.map(|r| g.constant(r.clone()));
    let ctx = OpContext { guide, relations, ..OpContext::default() };
    let out = op.apply(&mut g, xv, &ctx, &mut seeded(0)).unwrap();
    g.tensor(out)
}

#[test]
fn sa_and_ffn_are_permutation_equivariant() {
    let mut rng = seeded(4);
    let mut store = ParamStore::new();
    let sa = OpParams::new(OperationKind::Sa, &mut store, "s", dims(8, 2), &mut rng).unwrap();
    let ffn = OpParams::new(OperationKind::Ffn, &mut store, "f", dims(8, 2), &mut rng).unwrap();
    let x = random(&mut rng, 5, 8);
    let perm = [3, 0, 4, 1, 2];
    for op in [&sa, &ffn] {
        let a = permute_rows(&apply_op(&store, op, &x, None, None), &perm);
        let b = apply_op(&store, op, &permute_rows(&x, &perm), None, None);
        assert!(a.max_abs_diff(&b) < 1e-9, "{:?}", op.kind());
    }
}

#[test]
fn ga_is_invariant_to_guide_order() {
    let mut rng = seeded(5);
    let mut store = ParamStore::new();
    let ga = OpParams::new(OperationKind::Ga, &mut store, "g", dims(8, 4), &mut rng).unwrap();
    let x = random(&mut rng, 3, 8);
    let y = random(&mut rng, 6, 8);
    let a = apply_op(&store, &ga, &x, Some(&y), None);
    let b = apply_op(&store, &ga, &x, Some(&permute_rows(&y, &[5, 2, 0, 1, 4, 3])), None);
    assert!(a.max_abs_diff(&b) < 1e-9);
}

#[test]
fn ops_reject_missing_context() {
    let mut rng = seeded(6);
    let mut store = ParamStore::new();
    let ga = OpParams::new(OperationKind::Ga, &mut store, "g", dims(4, 1), &mut rng).unwrap();
    let rsa = OpParams::new(OperationKind::Rsa, &mut store, "r", dims(4, 1), &mut rng).unwrap();
    let mut g = Graph::inference(&store);
    let x = g.constant(random(&mut rng, 2, 4));
    assert!(ga.apply(&mut g, x, &OpContext::default(), &mut rng).is_err());
    assert!(rsa.apply(&mut g, x, &OpContext::default(), &mut rng).is_err());
}

fn rsa_parts(op: &OpParams) -> (&AttentionParams, &RelationMlpParams, &NormParams) {
    match op {
        OpParams::Rsa { attn, mlp, norm } => (attn, mlp, norm),
        _ => unreachable!(),
    }
}

#[test]
fn zero_relation_mlp_gives_epsilon_log_bias() {
    let mut rng = seeded(7);
    let mut store = ParamStore::new();
    let op = OpParams::new(OperationKind::Rsa, &mut store, "r", dims(4, 2), &mut rng).unwrap();
    let (_, mlp, _) = rsa_parts(&op);
    for id in [mlp.w1, mlp.b1, mlp.w2, mlp.b2] {
        let shape = store.get(id).shape().to_vec();
        store.set(id, Tensor::zeros(&shape)).unwrap();
    }
    let mut g = Graph::inference(&store);
    let rel = g.constant(random(&mut rng, 9, 4));
    let bias = relation_bias(&mut g, mlp, rel, 3).unwrap();
    assert_eq!(g.shape(bias), &[3, 3]);
    for &b in g.value(bias) {
        assert!((b - (-13.8155)).abs() < 1e-4, "{b}");
    }
}

#[test]
fn constant_relation_bias_reduces_to_self_attention() {
    let mut rng = seeded(8);
    let mut store = ParamStore::new();
    let op = OpParams::new(OperationKind::Rsa, &mut store, "r", dims(8, 2), &mut rng).unwrap();
    let (attn, mlp, norm) = rsa_parts(&op);
    // zero first layer: the bias is the same for every pair
    store.set(mlp.w1, Tensor::zeros(store.get(mlp.w1).shape())).unwrap();
    let x = random(&mut rng, 4, 8);
    let mut g = Graph::inference(&store);
    let xv = g.constant(x);
    let rel = g.constant(random(&mut rng, 16, 4));
    let with_rel = rsa_op(&mut g, attn, mlp, norm, xv, rel).unwrap();
    let plain = sa_op(&mut g, attn, norm, xv, None).unwrap();
    for (a, b) in with_rel.weights.iter().zip(&plain.weights) {
        let diff = g.value(*a).iter().zip(g.value(*b)).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-9);
    }
}

#[test]
fn large_relation_logit_dominates() {
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let q = g.constant(Tensor::zeros(&[2, 2]));
    let k = g.constant(Tensor::zeros(&[2, 2]));
    let v = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let bias = g.constant(Tensor::from_rows(&[vec![20.0, -20.0], vec![-20.0, 20.0]]).unwrap());
    let (_, w) = generalized_attention(&mut g, q, k, v, Some(bias)).unwrap();
    assert!(g.value(w)[0] > 0.99);
    assert!(g.value(w)[3] > 0.99);
}

#[test]
fn padded_keys_receive_no_weight() {
    let mut rng = seeded(9);
    let mut store = ParamStore::new();
    let attn = AttentionParams::new(&mut store, "a", 4, 2, &mut rng).unwrap();
    let norm = NormParams::new(&mut store, "a", 4);
    let mut g = Graph::inference(&store);
    let x = g.constant(random(&mut rng, 4, 4));
    let mask = g.constant(key_mask(4, &[true, true, false, false]));
    let out = sa_op(&mut g, &attn, &norm, x, Some(mask)).unwrap();
    for w in out.weights {
        for r in 0..4 {
            assert_eq!(g.value(w)[r * 4 + 2], 0.0);
            assert_eq!(g.value(w)[r * 4 + 3], 0.0);
        }
    }
}

#[test]
fn operation_names_round_trip() {
    for kind in [OperationKind::Sa, OperationKind::Ga, OperationKind::Ffn, OperationKind::Rsa] {
        assert_eq!(kind.name().parse::<OperationKind>().unwrap(), kind);
        assert_eq!(serde_json::to_string(&kind).unwrap(), format!("\"{}\"", kind.name()));
    }
    match "GAA".parse::<OperationKind>() {
        Err(mmnas::Error::UnknownOperation(s)) => assert_eq!(s, "GAA"),
        other => panic!("{other:?}"),
    }
}

/// Gradient of `Σ C ⊙ op(X)` with `X`, `Y` and the relation features held as
/// parameters so one check covers inputs and weights alike.
fn check_op(kind: OperationKind, seed: u64) {
    let mut rng = seeded(seed);
    let mut store = ParamStore::new();
    let op = OpParams::new(kind, &mut store, "op", dims(4, 2), &mut rng).unwrap();
    let x: ParamId = store.add("x", random(&mut rng, 3, 4));
    let y: ParamId = store.add("y", random(&mut rng, 2, 4));
    let rel: ParamId = store.add("rel", random(&mut rng, 9, 4));
    let c = random(&mut rng, 3, 4);
    let mut ids = op.param_ids();
    ids.push(x);
    match kind {
        OperationKind::Ga => ids.push(y),
        OperationKind::Rsa => ids.push(rel),
        _ => {}
    }
    let f = |g: &mut Graph| {
        let xv = g.param(x);
        let ctx = OpContext { guide: Some(g.param(y)), relations: Some(g.param(rel)), ..OpContext::default() };
        let out = op.apply(g, xv, &ctx, &mut seeded(0))?;
        Ok(weighted_sum(g, out, &c))
    };
    let report = gradient_check_params(&store, &ids, f, 1e-6, None).unwrap();
    assert!(report.max_rel_error < 1e-4, "{kind}: {report:?}");
}

#[test]
fn gradient_check_sa() {
    check_op(OperationKind::Sa, 10);
}

#[test]
fn gradient_check_ga() {
    check_op(OperationKind::Ga, 11);
}

#[test]
fn gradient_check_ffn() {
    check_op(OperationKind::Ffn, 12);
}

#[test]
fn gradient_check_rsa() {
    check_op(OperationKind::Rsa, 13);
}

#[test]
fn transplant_preserves_outputs() {
    let mut rng = seeded(14);
    let mut store = ParamStore::new();
    let ops: Vec<OpParams> = [OperationKind::Sa, OperationKind::Ga, OperationKind::Ffn, OperationKind::Rsa]
        .into_iter()
        .map(|k| OpParams::new(k, &mut store, "op", dims(4, 2), &mut rng).unwrap())
        .collect();
    let x = random(&mut rng, 3, 4);
    let y = random(&mut rng, 2, 4);
    let rel = random(&mut rng, 9, 4);
    for op in &ops {
        let mut dst = ParamStore::new();
        let moved = op.transplant(&store, &mut dst);
        assert_eq!(dst.len(), op.param_ids().len());
        let a = apply_op(&store, op, &x, Some(&y), Some(&rel));
        let b = apply_op(&dst, &moved, &x, Some(&y), Some(&rel));
        assert_eq!(a, b);
    }
}
