//! Extracts 4x4 glimpses from a toy glyph at a few windows and prints them
//! next to the source image.
//!
//!     cargo run -p arc-core --example attention_glimpse

use arc_core::attention::{attend, attend_values};
use arc_core::data::{make_toy_dataset, ToySpec};
use ndcore::{Tape, Tensor};

fn shade(v: f64) -> char {
    [' ', '.', ':', '+', '#'][((v * 4.0).round() as usize).min(4)]
}

fn show(t: &Tensor) {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    for r in 0..rows {
        let line: String = (0..cols).map(|c| shade(t.at(r, c))).flat_map(|ch| [ch, ch]).collect();
        println!("  |{line}|");
    }
}

fn main() -> arc_core::Result<()> {
    let ds = make_toy_dataset(ToySpec::new(4, 2, 16, 3))?;
    let image = &ds.alphabets[0].characters[0].drawings[0].image;
    println!("source 16x16:");
    show(image);

    // Raw controller outputs before the tanh squash: (x, y, zoom).
    let windows = [
        ("whole image", [0.0, 0.0, 0.0]),
        ("top-left, zoomed in", [-0.6, -0.6, 0.8]),
        ("bottom-right, zoomed in", [0.6, 0.6, 0.8]),
        ("centre, tight", [0.0, 0.0, 2.0]),
    ];
    for (name, omega) in windows {
        let mut tape = Tape::new();
        let img = tape.constant(image.clone());
        let om = tape.constant(Tensor::vector(&omega));
        let g = attend(&mut tape, img, om, 4)?;
        let w = g.params.window(&tape);
        println!(
            "{name}: centre ({:.2}, {:.2}), stride {:.2}, scale {:.3}",
            w.x, w.y, w.delta, w.gamma
        );
        show(&attend_values(image, omega, 4)?.reshaped(&[4, 4])?);
    }
    Ok(())
}
