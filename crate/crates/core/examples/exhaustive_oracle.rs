//! Trains every architecture of a small space from scratch, ranks them by
//! validation loss and places a searched architecture in that ranking.
//!
//!     cargo run --release --example exhaustive_oracle

use mmnas::harness::synthetic::{generate, SyntheticTaskSpec, VqaRule};
use mmnas::harness::{exhaustive_oracle, oracle_rank, RunConfig};
use mmnas::model::Task;
use mmnas::search::{SearchConfig, Supernet};

fn main() -> mmnas::Result<()> {
    let spec = SyntheticTaskSpec { rule: VqaRule::AnchorCount, ..SyntheticTaskSpec::new(Task::Vqa, 0) };
    let (data, train, val) = generate(&spec)?.prepared()?;
    let search = SearchConfig { encoder_blocks: 1, decoder_blocks: 1, seed: 1, ..SearchConfig::desk() };
    let run = RunConfig { model: spec.model_config(16, 4), search };
    let oracle = exhaustive_oracle(&run, &data, &train, &val, 0)?;
    for (i, e) in oracle.iter().enumerate() {
        println!("{:>2} {:<8} loss {:.4} accuracy {:.3}", i + 1, e.architecture.label(), e.val_loss, e.val_metric);
    }
    let mut supernet = Supernet::new(&run.model, &run.search)?;
    let arch = supernet.search(&data, &train)?;
    println!("searched {} ranks {} of {}", arch.label(), oracle_rank(&oracle, &arch).unwrap_or(0), oracle.len());
    Ok(())
}
