//! Parameter breakdown of each preset and a weight-file round trip.
//!
//! cargo run --release --example inspect

use demix::io::{load_weights, save_weights};
use demix::model::{Arch, Model, ModelConfig};

fn main() -> demix::Result<()> {
    for arch in [Arch::HsTasnet, Arch::HsTasnetSmall, Arch::Tasnet] {
        let model = Model::<f32>::build(&ModelConfig::preset(arch), 0)?;
        println!("{} ({} parameters)", arch.name(), model.param_count());
        for (layer, count) in model.layer_table() {
            println!("  {layer:<20} {count:>10}");
        }
    }

    let dir = std::env::temp_dir().join("demix-inspect-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("small.hstn");
    let model = Model::<f32>::build(&ModelConfig::hs_tasnet_small(), 42)?;
    save_weights(&model, &path)?;
    let loaded = load_weights(&path)?;
    let identical = model.params().iter().zip(loaded.params()).all(|(a, b)| a.values == b.values);
    println!(
        "saved {} ({} bytes), reloaded identical: {identical}",
        path.display(),
        std::fs::metadata(&path)?.len()
    );
    Ok(())
}
