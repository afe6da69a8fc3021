//! Offline separation of a WAV file (or a synthetic clip) into four stems.
//!
//! cargo run --release --example separate -- [input.wav] [outdir]

use std::path::PathBuf;

use demix::io::{read_wav, write_wav, WavSpec};
use demix::model::{forward_offline, Model, ModelConfig};
use demix::synth::synthetic_track;

fn main() -> demix::Result<()> {
    let mut args = std::env::args().skip(1);
    let input = args.next();
    let outdir = PathBuf::from(args.next().unwrap_or_else(|| "separated".into()));

    let mixture = match input {
        Some(path) => read_wav(path)?.0,
        None => synthetic_track(4.0, 44100, 0).mixture(),
    };
    let model = Model::<f32>::build(&ModelConfig::hs_tasnet_small(), 0)?;
    let stems = forward_offline(&model, &mixture, true)?;

    std::fs::create_dir_all(&outdir)?;
    for (name, wave) in stems.iter() {
        let path = outdir.join(format!("{name}.wav"));
        write_wav(&path, wave, WavSpec::float32(wave.sample_rate, 2))?;
        let rms = (wave.channels.iter().flatten().map(|v| v * v).sum::<f32>() / (2 * wave.len()) as f32).sqrt();
        println!("{:<7} {} samples, rms {rms:.4} -> {}", name, wave.len(), path.display());
    }
    println!("weights are random; train first (see the `train` example) for meaningful stems");
    Ok(())
}
