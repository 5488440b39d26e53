//! Finite-difference checks of an attention operation and of a full
//! head-through-backbone loss.

use mmnas::attention::{OpContext, OpDims, OpParams, OperationKind};
use mmnas::backbone::{Architecture, Label, MultimodalSample, PreparedSample};
use mmnas::model::{ModelConfig, Network, Task};
use mmnas::numerics::*;
use rand::Rng as _;

fn random(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn main() -> mmnas::Result<()> {
    let mut rng = seeded(0);
    for kind in [OperationKind::Sa, OperationKind::Ga, OperationKind::Ffn, OperationKind::Rsa] {
        let mut store = ParamStore::new();
        let op = OpParams::new(kind, &mut store, "op", OpDims { d: 4, heads: 2, d_rel: 4, dropout: 0.0 }, &mut rng)?;
        let x = store.add("x", random(&mut rng, 3, 4));
        let y = store.add("y", random(&mut rng, 2, 4));
        let rel = store.add("rel", random(&mut rng, 9, 4));
        let mut ids = op.param_ids();
        ids.extend([x, y, rel]);
        let f = |g: &mut Graph| {
            let xv = g.param(x);
            let ctx = OpContext { guide: Some(g.param(y)), relations: Some(g.param(rel)), ..OpContext::default() };
            let out = op.apply(g, xv, &ctx, &mut seeded(0))?;
            let sq = g.mul(out, out)?;
            Ok(g.sum(sq))
        };
        let r = gradient_check_params(&store, &ids, f, 1e-6, None)?;
        println!("{kind:<3} {} coordinates, max rel error {:.2e}", r.coordinates, r.max_rel_error);
    }

    let arch = Architecture::parse_names(&["SA", "FFN"], &["GA", "RSA"])?;
    let net = Network::fixed(&ModelConfig::new(Task::Vg, 8, 5, 6, 16, 4, 3), &arch, 1)?;
    let boxes = (0..4).map(|i| [0.2 + 0.2 * i as f64, 0.5, 0.2, 0.3]).collect();
    let raw = MultimodalSample { tokens: vec![1, 4, 3], objects: random(&mut rng, 4, 6), boxes, label: Label::Box([0.4, 0.5, 0.2, 0.3]) };
    let sample = PreparedSample::new(&raw, 5)?;
    let sel = net.default_selection();
    let f = |g: &mut Graph| net.sample_loss(g, &sample, &sel, None, &mut seeded(0));
    let r = gradient_check_params(&net.store, &net.active_param_ids(&sel), f, 1e-6, Some(6))?;
    println!("VG through {arch}: {} coordinates, max rel error {:.2e}", r.coordinates, r.max_rel_error);
    Ok(())
}
