//! Score separators on a dataset tree with chunked median SDR.
//!
//! cargo run --release --example eval -- [dataset_root]

use demix::eval::{evaluate_dataset, Separator};
use demix::model::{Model, ModelConfig};
use demix::synth::{synthetic_track, write_track};

fn main() -> demix::Result<()> {
    let scratch;
    let root = match std::env::args().nth(1) {
        Some(p) => std::path::PathBuf::from(p),
        None => {
            scratch = std::env::temp_dir().join("demix-eval-example");
            for i in 0..3 {
                write_track(&scratch, "test", &format!("synthetic{i}"), &synthetic_track(3.0, 44100, i))?;
            }
            scratch.clone()
        }
    };

    let model = Model::<f32>::build(&ModelConfig::hs_tasnet_small(), 0)?;
    for (label, sep) in [
        ("oracle", Separator::Oracle),
        ("mixture baseline", Separator::Mixture),
        ("untrained model", Separator::Model(&model)),
    ] {
        let report = evaluate_dataset(&sep, &root, None)?;
        println!("== {label}");
        print!("{}", report.to_text());
    }
    Ok(())
}
