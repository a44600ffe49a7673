//! Pixel baselines on 20-way within-alphabet toy episodes, with Wilson
//! intervals. The oracle and random scorers bracket the range.
//!
//!     cargo run --release -p arc-core --example oneshot_baselines -- [episodes]

use arc_core::data::{make_toy_dataset, Split, SplitScheme, Subset, ToySpec};
use arc_core::oneshot::{
    evaluate_oneshot, sample_episode, EpisodeMode, OneShotClassifier, OracleClassifier, PixelCosine, PixelKnn,
    RandomScorer,
};

fn main() -> arc_core::Result<()> {
    let episodes = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let ds = make_toy_dataset(ToySpec::new(120, 20, 16, 0))?;
    let split = Split::make(&ds, SplitScheme::parse("custom")?, 0)?;
    let view = split.view(Subset::Test);

    let classifiers: [(&str, &dyn OneShotClassifier); 4] = [
        ("pixel kNN", &PixelKnn),
        ("pixel cosine", &PixelCosine),
        ("oracle", &OracleClassifier),
        ("random", &RandomScorer { seed: 0 }),
    ];
    for mode in [EpisodeMode::Within, EpisodeMode::Across] {
        println!("{mode:?}, 20-way, {episodes} episodes");
        for (name, clf) in classifiers {
            let report = evaluate_oneshot(clf, episodes, 0, 1, |rng| sample_episode(&ds, &view, 20, mode, rng))?;
            println!("  {name:<13} {}", report.summary_line());
        }
    }
    Ok(())
}
