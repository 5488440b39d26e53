//! Generates a synthetic task and prints a few samples with their latents.
//!
//!     cargo run --example generate_data -- vg

use mmnas::backbone::Label;
use mmnas::harness::synthetic::{generate, symbolic_label, SyntheticTaskSpec};
use mmnas::model::Task;
use std::collections::BTreeMap;

fn main() -> mmnas::Result<()> {
    let task: Task = std::env::args().nth(1).as_deref().unwrap_or("vqa").parse()?;
    let spec = SyntheticTaskSpec { train: 200, val: 50, ..SyntheticTaskSpec::new(task, 0) };
    let ds = generate(&spec)?;
    println!("{task}: vocab {}, feature width {}, {} train / {} val", spec.vocab(), spec.feature_width(), ds.train.len(), ds.val.len());
    for s in ds.train.iter().take(3) {
        println!("tokens {:?} codes {:?} colours {:?} flagged {:?}", s.sample.tokens, s.latent.codes, s.latent.colours, s.latent.flagged);
        println!("  label {:?} (oracle {:?})", s.sample.label, symbolic_label(&spec, &s.latent, &s.sample.boxes));
    }
    let mut hist: BTreeMap<String, usize> = BTreeMap::new();
    for s in &ds.train {
        let key = match &s.sample.label {
            Label::Answer(a) => format!("answer {a}"),
            Label::Match(m) => format!("match {m}"),
            Label::Box(_) => if s.latent.query_code.is_some() { "named object" } else { "nearest object" }.into(),
            Label::Answers(_) => "soft answers".into(),
        };
        *hist.entry(key).or_default() += 1;
    }
    println!("train label histogram {hist:?}");
    Ok(())
}
