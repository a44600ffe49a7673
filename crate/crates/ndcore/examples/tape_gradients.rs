//! Reverse-mode gradients of a small network, checked against central
//! differences.
//!
//!     cargo run -p ndcore --example tape_gradients

use ndcore::numdiff::{central_gradient, max_relative_error};
use ndcore::{Tape, Tensor};

fn loss(tape: &mut Tape, w: &Tensor, x: &Tensor, track: bool) -> ndcore::Result<(ndcore::Var, ndcore::Var)> {
    let w = if track { tape.param(w.clone()) } else { tape.constant(w.clone()) };
    let x = tape.constant(x.clone());
    let h = tape.matmul(w, x)?;
    let h = tape.tanh(h);
    let p = tape.softmax(h)?;
    let p0 = tape.pick(p, 0)?;
    let nll = tape.log(p0)?;
    Ok((w, tape.neg(nll)))
}

fn main() -> ndcore::Result<()> {
    let w = Tensor::new(&[3, 4], (0..12).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.3).collect())?;
    let x = Tensor::column(&[0.5, -1.0, 0.25, 2.0]);

    let mut tape = Tape::new();
    let (wv, l) = loss(&mut tape, &w, &x, true)?;
    tape.backward(l)?;
    let analytic = tape.grad(wv).expect("w tracks gradients").data().to_vec();
    println!("loss {:.6}, tape holds {} nodes", tape.value(l).item(), tape.len());

    let numeric = central_gradient(
        |p| {
            let mut t = Tape::new();
            let w = Tensor::new(&[3, 4], p.to_vec()).unwrap();
            let (_, l) = loss(&mut t, &w, &x, false).unwrap();
            t.value(l).item()
        },
        w.data(),
        1e-6,
    );
    for (row, (a, n)) in analytic.chunks(4).zip(numeric.chunks(4)).enumerate() {
        println!("dL/dW[{row}] tape {a:+.6?}\n         fd   {n:+.6?}");
    }
    println!("max relative error {:.2e}", max_relative_error(&analytic, &numeric, 1e-8));
    Ok(())
}
