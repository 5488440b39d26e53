//! Image-text matching with hard negatives mined from the training pool,
//! compared with plain pairwise training.
//!
//!     cargo run --release --example itm_mining

use mmnas::backbone::Architecture;
use mmnas::harness::synthetic::{generate, SyntheticTaskSpec};
use mmnas::heads::{hard_negative_candidates, MiningConfig};
use mmnas::model::Task;
use mmnas::numerics::seeded;
use mmnas::search::{train_fixed, SearchConfig};

fn main() -> mmnas::Result<()> {
    let spec = SyntheticTaskSpec::new(Task::Itm, 0);
    let (data, train, val) = generate(&spec)?.prepared()?;
    let model = spec.model_config(16, 4);
    let arch = Architecture::parse_names(&["SA", "FFN"], &["GA", "FFN"])?;
    let vs: Vec<_> = val.iter().map(|&i| data.samples[i].clone()).collect();
    for mining in [None, Some(SearchConfig::desk_mining())] {
        let cfg = SearchConfig { mining, ..SearchConfig::desk() };
        let (net, losses) = train_fixed(&model, &arch, &data, &train, &cfg, 0)?;
        let e = net.evaluate(&vs, &net.default_selection())?;
        let label = if mining.is_some() { "mined triplets" } else { "pairwise BCE" };
        println!("{label:<14} final train loss {:.4}, val accuracy {:.3}", losses.last().unwrap(), e.metric);
        if mining.is_some() {
            // score candidate negatives for the first positive and keep the top five
            let positives = data.positives();
            let p = positives[0];
            let sel = net.default_selection();
            let top = hard_negative_candidates(
                positives.len(),
                |j| data.groups[positives[j]] != data.groups[p],
                |j| net.score_pair(&data.samples[p].text, &data.samples[positives[j]].image, &sel),
                MiningConfig { n_sample: 64, top_k: 5 },
                &mut seeded(1),
            )?;
            println!("hardest images for sample {p}: {top:?}");
        }
    }
    Ok(())
}
