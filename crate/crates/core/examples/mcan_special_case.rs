//! The hand-designed MCAN stack is one point of the search space.

use mmnas::backbone::Architecture;
use mmnas::model::{ModelConfig, Network, Task};
use mmnas::search::count_search_space;

fn main() -> mmnas::Result<()> {
    let config = ModelConfig::new(Task::Vqa, 20, 8, 12, 16, 4, 10);
    for l in [1, 2, 6] {
        let arch = Architecture::mcan(l);
        let net = Network::fixed(&config, &arch, 0)?;
        let params: usize = net.store.ids().map(|id| net.store.get(id).numel()).sum();
        println!("L={l}: {} ({} + {} blocks, {params} weights)", arch.label(), arch.encoder.len(), arch.decoder.len());
        println!("      space of this depth holds {} architectures", count_search_space(arch.encoder.len(), arch.decoder.len()));
    }
    Ok(())
}
