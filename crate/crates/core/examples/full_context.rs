//! Trains a full-context head on top of a verification checkpoint and
//! compares it with naive argmax on 5-way toy episodes.
//!
//!     cargo run --release -p arc-core --example full_context -- <checkpoint-dir> [steps]
//!
//! The checkpoint should come from a toy run, e.g.
//! `arc train verification --toy --out toy`.

use std::path::PathBuf;

use arc_core::data::{make_toy_dataset, Split, Subset, ToySpec};
use arc_core::oneshot::{evaluate_oneshot, sample_episode, EpisodeMode, FullContextArc, FullContextHead, NaiveArc};
use arc_core::training::{train_full_context, FullContextConfig, TrainConfig};
use arc_core::ArcModel;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> arc_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let dir = PathBuf::from(args.next().expect("usage: full_context <checkpoint-dir> [steps]"));
    let steps = args.next().and_then(|s| s.parse().ok()).unwrap_or(1000);

    let mut model = ArcModel::load(&dir)?;
    let ds = make_toy_dataset(ToySpec::new(20, 20, model.config.side, 0))?;
    let mut train = TrainConfig::toy(0);
    train.batch = 4;
    train.steps = steps;
    train.eval_interval = 250;
    train.val_size = 200;
    let view = Split::make(&ds, train.split, train.seed)?.view(Subset::Test);
    let sampler = |rng: &mut ChaCha8Rng| sample_episode(&ds, &view, 5, EpisodeMode::Within, rng);

    let naive = evaluate_oneshot(&NaiveArc { model: &model }, 1000, 5, 1, sampler)?;
    println!("naive         {}", naive.summary_line());

    let mut head = FullContextHead::new(model.config.hidden, model.config.hidden, &mut ChaCha8Rng::seed_from_u64(5));
    let cfg = FullContextConfig { train, way: 5, mode: EpisodeMode::Within, freeze_arc: false };
    let history = train_full_context(&mut model, &mut head, &ds, &cfg, None)?;
    for e in &history.evals {
        println!("step {:>5}  loss {:.4}  val {:.3}", e.step, e.train_loss, e.val_acc);
    }
    let full = evaluate_oneshot(&FullContextArc { model: &model, head: &head }, 1000, 5, 1, sampler)?;
    println!("full context  {}", full.summary_line());
    Ok(())
}
