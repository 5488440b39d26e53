//! Visual grounding: ranking targets from IoU, box offsets, and a trained
//! model's chosen object and refined box.
//!
//!     cargo run --release --example visual_grounding

use mmnas::backbone::{Architecture, Label};
use mmnas::harness::synthetic::{generate, SyntheticTaskSpec};
use mmnas::heads::{compute_iou, VgTargets, IOU_THRESHOLD};
use mmnas::model::{Prediction, Task};
use mmnas::search::{train_fixed, SearchConfig};

fn main() -> mmnas::Result<()> {
    let spec = SyntheticTaskSpec::new(Task::Vg, 0);
    let ds = generate(&spec)?;
    let first = &ds.train[0].sample;
    let Label::Box(truth) = first.label else { unreachable!() };
    let t = VgTargets::new(&first.boxes, &truth, IOU_THRESHOLD)?;
    println!("tokens {:?}, truth {truth:.3?}", first.tokens);
    for (i, b) in first.boxes.iter().enumerate() {
        println!("  object {i}: box {b:.3?} IoU {:.3} target score {:.3}", compute_iou(b, &truth), t.scores[i]);
    }
    println!("  qualifying objects {:?}, offsets {:.3?}", t.qualifying, t.offsets);

    let (data, train, val) = ds.prepared()?;
    let arch = Architecture::parse_names(&["SA", "FFN"], &["RSA", "GA"])?;
    let cfg = SearchConfig::desk();
    let (net, _) = train_fixed(&spec.model_config(16, 4), &arch, &data, &train, &cfg, 0)?;
    let sel = net.default_selection();
    let vs: Vec<_> = val.iter().map(|&i| data.samples[i].clone()).collect();
    println!("{arch}: val accuracy (IoU > {IOU_THRESHOLD}) {:.3}", net.evaluate(&vs, &sel)?.metric);
    for s in vs.iter().take(3) {
        if let (Prediction::Box { object, bbox }, Label::Box(truth)) = (net.predict(s, &sel)?, &s.label) {
            println!("  picked object {object}, box {bbox:.3?}, IoU {:.3}", compute_iou(&bbox, truth));
        }
    }
    Ok(())
}
