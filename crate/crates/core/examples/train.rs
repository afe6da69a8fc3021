//! Train a small model on synthetic multitracks and save a checkpoint.
//!
//! cargo run --release --example train -- [epochs] [outdir]

use std::path::PathBuf;

use demix::io::save_weights;
use demix::model::{Model, ModelConfig};
use demix::synth::synthetic_track;
use demix::train::{train_loop, validation_loss, LossKind, TrainConfig, TrainData};

fn main() -> demix::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(3);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "checkpoint".into()));

    let cfg = ModelConfig {
        branch_hidden: 32,
        combined_hidden: 64,
        ..ModelConfig::hs_tasnet()
    };
    let mut model = Model::<f32>::build(&cfg, 0)?;
    let data = TrainData {
        train: (0..4).map(|s| synthetic_track(4.0, 44100, s)).collect(),
        valid: vec![synthetic_track(4.0, 44100, 100)],
    };
    let tc = TrainConfig {
        loss: LossKind::MultiDomain { alpha: 0.5 },
        excerpt_seconds: 1.0,
        batch_size: 2,
        max_epochs: epochs,
        steps_per_epoch: 5,
        valid_seconds: 4.0,
        ..Default::default()
    };
    println!("initial valid loss {:.5}", validation_loss(&model, &data.valid, &tc.loss, tc.valid_seconds)?);
    let outcome = train_loop(&mut model, &data, &tc, Some(&mut std::io::stdout()))?;

    std::fs::create_dir_all(&out)?;
    let path = out.join("model.hstn");
    save_weights(&outcome.best, &path)?;
    println!("best valid loss {:.5}, saved {}", outcome.best_valid_loss, path.display());
    Ok(())
}
