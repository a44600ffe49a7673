//! Shared helpers for the acceptance runs in `tests/acceptance.rs`.
//!
//! The runs live in their own package so that `cargo test --workspace`
//! executes them after every other test target.

use std::io::Write;

use arc_core::model::Parameters;
use ndcore::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Prints `criterion N: PASS|FAIL detail` straight to stdout, past the test
/// harness capture, then asserts `pass`.
pub fn report(criterion: u32, pass: bool, detail: &str) {
    let line = format!("criterion {criterion}: {} {detail}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
    assert!(pass, "criterion {criterion} failed: {detail}");
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform `[0, 1)` pixels.
pub fn random_image(side: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::new(&[side, side], (0..side * side).map(|_| r.random::<f64>()).collect()).unwrap()
}

pub fn flatten<P: Parameters>(p: &P) -> Vec<f64> {
    p.parameters().iter().flat_map(|(_, t)| t.data().to_vec()).collect()
}

/// Copy of `p` with its parameters replaced by `flat`.
pub fn with_flat<P: Parameters + Clone>(p: &P, flat: &[f64]) -> P {
    let mut out = p.clone();
    let mut offset = 0;
    for t in out.parameters_mut() {
        let n = t.numel();
        t.data_mut().copy_from_slice(&flat[offset..offset + n]);
        offset += n;
    }
    assert_eq!(offset, flat.len());
    out
}

pub fn flat_grads(grads: &[Tensor]) -> Vec<f64> {
    grads.iter().flat_map(|g| g.data().to_vec()).collect()
}
