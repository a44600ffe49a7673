//! Random affine augmentation of one glyph under the moderate policy.
//!
//!     cargo run -p arc-core --example augmentation

use arc_core::data::{apply_affine, make_toy_dataset, AugmentationPolicy, ToySpec};
use ndcore::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rows(t: &Tensor) -> Vec<String> {
    let side = t.shape()[0];
    (0..side)
        .map(|r| (0..side).map(|c| if t.at(r, c) > 0.5 { '#' } else if t.at(r, c) > 0.1 { '.' } else { ' ' }).collect())
        .collect()
}

fn main() -> arc_core::Result<()> {
    let ds = make_toy_dataset(ToySpec::new(2, 1, 24, 5))?;
    let image = &ds.alphabets[0].characters[0].drawings[0].image;
    let policy = AugmentationPolicy::moderate(24);
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let mut panels = vec![("original".to_string(), rows(image))];
    for _ in 0..3 {
        let p = policy.sample(&mut rng);
        let title = format!("rot {:+.0} shear {:+.0} flip {}", p.rotate_deg, p.shear_deg, u8::from(p.flip_horizontal));
        panels.push((title, rows(&apply_affine(image, &p))));
    }
    for (title, _) in &panels {
        print!("{title:<26}");
    }
    println!();
    for r in 0..24 {
        for (_, panel) in &panels {
            print!("|{}| ", panel[r]);
        }
        println!();
    }
    Ok(())
}
