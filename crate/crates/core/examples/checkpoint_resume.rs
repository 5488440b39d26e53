//! Writes a search run's artifacts, resumes from the warm-up checkpoint and
//! confirms both runs agree.
//!
//!     cargo run --release --example checkpoint_resume

use mmnas::harness::synthetic::{generate, SyntheticTaskSpec};
use mmnas::harness::{resume_search_to, run_search_to, RunConfig, WARMUP_CHECKPOINT};
use mmnas::model::Task;
use mmnas::search::SearchConfig;

fn main() -> mmnas::Result<()> {
    let spec = SyntheticTaskSpec { train: 200, val: 50, ..SyntheticTaskSpec::new(Task::Itm, 0) };
    let (data, train, val) = generate(&spec)?.prepared()?;
    let search = SearchConfig { warmup_epochs: 4, search_epochs: 4, retrain_epochs: 3, ..SearchConfig::desk() };
    let run = RunConfig { model: spec.model_config(16, 4), search };
    let dir = std::env::temp_dir().join("mmnas-checkpoint-resume");
    let full = run_search_to(&run, &data, &train, &val, &dir.join("full"))?;
    let resumed = resume_search_to(&run, &dir.join("full").join(WARMUP_CHECKPOINT), &data, &train, &val, &dir.join("resumed"))?;
    for entry in std::fs::read_dir(dir.join("full"))? {
        println!("wrote {}", entry?.path().display());
    }
    println!("uninterrupted: {} loss {:.6}", full.report.architecture, full.report.validation.loss);
    println!("resumed:       {} loss {:.6}", resumed.report.architecture, resumed.report.validation.loss);
    println!("weights identical: {}", full.model.store.bitwise_eq(&resumed.model.store));
    Ok(())
}
