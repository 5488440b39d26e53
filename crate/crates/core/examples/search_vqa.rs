//! One-shot search on synthetic VQA: warm-up, alternating W/θ updates,
//! derivation, retraining from scratch and validation.
//!
//!     cargo run --release --example search_vqa -- [seed]

use mmnas::harness::synthetic::{generate, SyntheticTaskSpec};
use mmnas::harness::{run_search, RunConfig};
use mmnas::model::Task;
use mmnas::search::SearchConfig;

fn main() -> mmnas::Result<()> {
    env_logger::init();
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let spec = SyntheticTaskSpec::new(Task::Vqa, 0);
    let (data, train, val) = generate(&spec)?.prepared()?;
    let search = SearchConfig { seed, ..SearchConfig::desk() };
    let out = run_search(&RunConfig { model: spec.model_config(16, 4), search }, &data, &train, &val)?;
    let r = &out.report;
    for rec in r.search_log.iter().filter(|rec| rec.split != "train" || rec.epoch % 10 == 0) {
        let h: Vec<String> = rec.entropy.iter().map(|e| format!("{e:.3}")).collect();
        println!("epoch {:>2} {:<7} {:<5} loss {:.4} entropy [{}]", rec.epoch, rec.stage.name(), rec.split, rec.loss, h.join(" "));
    }
    for (b, p) in out.supernet.theta.probabilities().iter().enumerate() {
        let cells: Vec<String> = p.iter().map(|v| format!("{v:.3}")).collect();
        println!("block {b}: softmax(θ) = [{}]", cells.join(" "));
    }
    println!("derived {}", r.architecture);
    println!("supernet path accuracy {:.3}, retrained accuracy {:.3}, {:.0} s", r.supernet_path.metric, r.validation.metric, r.wall_clock_secs);
    Ok(())
}
