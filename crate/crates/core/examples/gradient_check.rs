//! Finite-difference check of the comparator's BCE gradient, parameter group
//! by parameter group.
//!
//!     cargo run --release -p arc-core --example gradient_check

use arc_core::model::Parameters;
use arc_core::training::{bce_loss, pair_gradient};
use arc_core::{ArcConfig, ArcModel};
use ndcore::numdiff::{central_gradient, relative_error};
use ndcore::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn with_flat(model: &ArcModel, flat: &[f64]) -> ArcModel {
    let mut out = model.clone();
    let mut offset = 0;
    for t in out.parameters_mut() {
        let n = t.numel();
        t.data_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
    out
}

fn loss(model: &ArcModel, a: &Tensor, b: &Tensor) -> f64 {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let (xa, xb) = (tape.constant(a.clone()), tape.constant(b.clone()));
    let run = bound.run(&mut tape, xa, xb).unwrap();
    let l = bce_loss(&mut tape, run.similarity, 1.0).unwrap();
    tape.value(l).item()
}

fn main() -> arc_core::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let config = ArcConfig { side: 8, glimpse: 3, glimpses: 2, hidden: 8, glimpse_bias: true };
    let model = ArcModel::new(config, &mut rng)?;
    let mut random_image = || Tensor::new(&[8, 8], (0..64).map(|_| rng.random::<f64>()).collect());
    let (a, b) = (random_image()?, random_image()?);

    let (value, grads) = pair_gradient(&model, &a, &b, 1)?;
    let flat: Vec<f64> = model.parameters().iter().flat_map(|(_, t)| t.data().to_vec()).collect();
    let numeric = central_gradient(|p| loss(&with_flat(&model, p), &a, &b), &flat, 1e-5);
    println!("loss {value:.6}");
    let mut offset = 0;
    for ((name, t), g) in model.parameters().iter().zip(&grads) {
        let err = g
            .data()
            .iter()
            .zip(&numeric[offset..offset + t.numel()])
            .map(|(x, y)| relative_error(*x, *y, 1e-6))
            .fold(0.0, f64::max);
        println!("{name:<20} {:>5} values  max relative error {err:.2e}", t.numel());
        offset += t.numel();
    }
    Ok(())
}
