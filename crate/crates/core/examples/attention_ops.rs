//! The four candidate operations on a toy input, and the relation-aware
//! attention collapsing to plain self-attention under a constant bias.

use mmnas::attention::*;
use mmnas::numerics::*;
use rand::Rng as _;

fn random(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn main() -> mmnas::Result<()> {
    let mut rng = seeded(3);
    let mut store = ParamStore::new();
    let dims = OpDims { d: 8, heads: 2, d_rel: 4, dropout: 0.0 };
    let ops: Vec<OpParams> = [OperationKind::Sa, OperationKind::Ga, OperationKind::Ffn, OperationKind::Rsa]
        .into_iter()
        .map(|k| OpParams::new(k, &mut store, k.name(), dims, &mut rng))
        .collect::<mmnas::Result<_>>()?;
    let (x, y, rel) = (random(&mut rng, 4, 8), random(&mut rng, 3, 8), random(&mut rng, 16, 4));
    for op in &ops {
        let mut g = Graph::inference(&store);
        let xv = g.constant(x.clone());
        let ctx = OpContext { guide: Some(g.constant(y.clone())), relations: Some(g.constant(rel.clone())), ..OpContext::default() };
        let out = op.apply(&mut g, xv, &ctx, &mut seeded(0))?;
        let first: Vec<String> = g.value(out)[..4].iter().map(|v| format!("{v:+.3}")).collect();
        println!("{:<3} out {:?}, row 0 starts {}", op.kind().name(), g.shape(out), first.join(" "));
    }

    let OpParams::Rsa { attn, mlp, norm } = &ops[3] else { unreachable!() };
    store.set(mlp.w1, Tensor::zeros(store.get(mlp.w1).shape()))?;
    let mut g = Graph::inference(&store);
    let xv = g.constant(x);
    let rv = g.constant(rel);
    let with_rel = rsa_op(&mut g, attn, mlp, norm, xv, rv)?;
    let plain = sa_op(&mut g, attn, norm, xv, None)?;
    let gap = with_rel.weights.iter().zip(&plain.weights).flat_map(|(a, b)| g.value(*a).iter().zip(g.value(*b)).map(|(p, q)| (p - q).abs()).collect::<Vec<_>>()).fold(0.0, f64::max);
    println!("constant relation bias: RSA and SA attention weights differ by at most {gap:.1e}");
    Ok(())
}
