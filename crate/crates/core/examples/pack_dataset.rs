//! Loads a dataset (an Omniglot-style PNG tree, or toy glyphs when no path is
//! given), packs it and reads the packed copy back.
//!
//!     cargo run --release -p arc-core --example pack_dataset -- <out-dir> [image-tree] [side]

use std::path::PathBuf;

use arc_core::data::{load_dataset, make_toy_dataset, save_packed, Layout, ToySpec};

fn main() -> arc_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "packed".into()));
    let tree = args.next().map(PathBuf::from);
    let side = args.next().and_then(|s| s.parse().ok()).unwrap_or(32);

    let ds = match &tree {
        Some(root) => {
            let (ds, warnings) = load_dataset(root, Layout::ImageTree { side })?;
            for w in &warnings {
                eprintln!("warning: {}: {}", w.path.display(), w.message);
            }
            ds
        }
        None => make_toy_dataset(ToySpec { alphabet_size: 10, ..ToySpec::new(40, 20, side, 0) })?,
    };
    println!(
        "{} alphabets, {} characters, {} drawings at {side}x{side}",
        ds.alphabets.len(),
        ds.num_characters(),
        ds.num_drawings()
    );
    save_packed(&ds, &out)?;
    let (back, _) = load_dataset(&out, Layout::Packed)?;
    assert_eq!(back.num_drawings(), ds.num_drawings());
    for alphabet in back.alphabets.iter().take(5) {
        println!("  {:<24} {:?} {} characters", alphabet.name, alphabet.group, alphabet.characters.len());
    }
    println!("packed copy in {}", out.display());
    Ok(())
}
