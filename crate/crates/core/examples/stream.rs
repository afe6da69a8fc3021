//! Real-time streaming: push audio in arbitrary chunks and collect hop-sized stem blocks.
//!
//! cargo run --release --example stream -- [chunk_samples]

use demix::eval::budget_ms;
use demix::model::{Model, ModelConfig};
use demix::stream::{concat, open_session};
use demix::synth::synthetic_track;

fn main() -> demix::Result<()> {
    let chunk: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(256);
    let model = Model::<f32>::build(&ModelConfig::hs_tasnet_small(), 0)?;
    let input = synthetic_track(2.0, 44100, 3).mixture().interleaved();

    let mut session = open_session(&model);
    println!("latency {} samples", session.latency_samples());
    let mut hops = Vec::new();
    for (i, block) in input.chunks(2 * chunk).enumerate() {
        let out = session.push(block)?;
        if !out.is_empty() && i % 20 == 0 {
            println!("push {i:>4}: {} in, {} out", session.samples_in(), session.samples_out());
        }
        hops.extend(out);
    }
    hops.push(session.flush()?);

    let stems = concat(&hops);
    let stats = session.stats();
    let budget = budget_ms(model.config().hop, model.config().sample_rate);
    println!(
        "{} frames, {} samples per stem; mean {:.3} ms, max {:.3} ms, budget {budget:.3} ms",
        stats.frames_processed(),
        stems[0][0].len(),
        stats.mean().as_secs_f64() * 1e3,
        stats.max().as_secs_f64() * 1e3
    );
    Ok(())
}
