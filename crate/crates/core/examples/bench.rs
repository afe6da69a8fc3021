//! Per-block inference timing against the half-hop real-time budget.
//!
//! cargo run --release --example bench -- [iterations]

use demix::eval::{bench_block, REFERENCE_TIMINGS};
use demix::model::{Model, ModelConfig};

fn main() -> demix::Result<()> {
    let iterations: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    for cfg in [ModelConfig::hs_tasnet_small(), ModelConfig::hs_tasnet(), ModelConfig::tasnet()] {
        let model = Model::<f32>::build(&cfg, 0)?;
        let report = bench_block(&model, iterations, 0)?;
        print!("{}", report.to_text());
    }
    for (name, one, four) in REFERENCE_TIMINGS {
        println!("reference {name}: {one} ms (1 core), {four} ms (4 cores)");
    }
    Ok(())
}
