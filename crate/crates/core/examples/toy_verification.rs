//! Trains a small comparator on procedural glyphs and reports held-out pair
//! accuracy.
//!
//!     cargo run --release -p arc-core --example toy_verification -- [steps] [threads]

use std::time::Instant;

use arc_core::data::{make_toy_dataset, Split, Subset, ToySpec};
use arc_core::training::{pair_accuracy, sample_pairs, train_verification, TrainConfig};
use arc_core::{ArcConfig, ArcModel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> arc_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(3000);
    let threads = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);

    let ds = make_toy_dataset(ToySpec::new(20, 20, 16, 0))?;
    let mut model = ArcModel::new(ArcConfig::toy(), &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut cfg = TrainConfig::toy(0);
    cfg.steps = steps;
    cfg.threads = threads;

    let start = Instant::now();
    let history = train_verification(&mut model, &ds, &cfg, None)?;
    for e in &history.evals {
        println!("step {:>6}  loss {:.4}  val {:.3}", e.step, e.train_loss, e.val_acc);
    }
    println!("trained {} steps in {:.1?}", history.losses.len(), start.elapsed());

    let split = Split::make(&ds, cfg.split, cfg.seed)?;
    let test = sample_pairs(&split.view(Subset::Test), 2000, &mut ChaCha8Rng::seed_from_u64(99))?;
    println!("held-out pair accuracy {:.3}", pair_accuracy(&model, &ds, &test, threads)?);
    Ok(())
}
