//! Fits a logistic probe on the controller state after each glimpse pair and
//! prints held-out accuracy per glimpse count.
//!
//!     cargo run --release -p arc-core --example glimpse_probes -- <checkpoint-dir>

use std::path::PathBuf;

use arc_core::data::{make_toy_dataset, SplitScheme, ToySpec};
use arc_core::training::{train_probe_classifiers, ProbeConfig};
use arc_core::ArcModel;

fn main() -> arc_core::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).expect("usage: glimpse_probes <checkpoint-dir>"));
    let model = ArcModel::load(&dir)?;
    let ds = make_toy_dataset(ToySpec::new(20, 20, model.config.side, 0))?;
    let report = train_probe_classifiers(&model, &ds, &ProbeConfig::new(0, SplitScheme::parse("custom")?))?;
    for (k, acc) in report.accuracies.iter().enumerate() {
        println!("{:>2} glimpses per image  {:.3}  {}", k + 1, acc, "#".repeat((acc * 40.0) as usize));
    }
    Ok(())
}
