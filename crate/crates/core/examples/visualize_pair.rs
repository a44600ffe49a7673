//! Renders the attention trace of one comparison as PNG frames plus a text
//! sidecar. Loads a checkpoint when given one, otherwise uses a fresh model.
//!
//!     cargo run --release -p arc-core --example visualize_pair -- <out-dir> [checkpoint-dir]

use std::path::PathBuf;

use arc_core::data::{make_toy_dataset, ToySpec};
use arc_core::training::{load_probes, PROBES_FILE};
use arc_core::viz::{trace_text, write_frames, FRAME_SCALE};
use arc_core::{ArcConfig, ArcModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> arc_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "frames".into()));
    let (model, probes) = match args.next().map(PathBuf::from) {
        Some(dir) => {
            let probes = if dir.join(PROBES_FILE).is_file() { load_probes(&dir.join(PROBES_FILE))? } else { Vec::new() };
            (ArcModel::load(&dir)?, probes)
        }
        None => (ArcModel::new(ArcConfig::toy(), &mut ChaCha8Rng::seed_from_u64(0))?, Vec::new()),
    };

    let ds = make_toy_dataset(ToySpec::new(20, 20, model.config.side, 0))?;
    let chars = &ds.alphabets[0].characters;
    let (a, b) = (&chars[0].drawings[0].image, &chars[0].drawings[1].image);
    let trace = model.compare(a, b, true)?.trace.expect("trace requested");
    let frames = write_frames(&out, &trace, (a, b), model.config.glimpse, &probes, FRAME_SCALE)?;
    print!("{}", trace_text(&trace, &probes));
    println!("wrote {} frames to {}", frames.len(), out.display());
    Ok(())
}
