//! Differentiable Cauchy-kernel attention.
//!
//! A glimpse is an `N x N` grid of kernels placed on an `S x S` image. The
//! controller emits three raw numbers per step; they are squashed with `tanh`
//! and mapped to a window centre `(x, y)`, a kernel stride `delta` and a
//! kernel scale `gamma`:
//!
//! ```text
//! x     = (S - 1)(x̂ + 1) / 2          y = (S - 1)(ŷ + 1) / 2
//! delta = (S / N)(1 - |δ̂|)            gamma = exp(1 - 2|δ̂|)
//! mu_i  = x + (i - (N + 1) / 2) delta  for i = 1..N
//! F[i, a] ∝ 1 / (π γ (1 + ((a - mu_i) / γ)²))   rows normalised to 1
//! glimpse = F_Y · I · F_Xᵀ
//! ```
//!
//! Pixel indices run `0..S`, kernel indices `1..=N`.

use std::f64::consts::PI;

use ndcore::{Tape, Tensor, Var};

use crate::error::{ArcError, Result};

/// Row normaliser floor; keeps far off-image windows finite.
pub const MIN_ROW_MASS: f64 = 1e-12;

/// Window parameters for one step, as nodes on a tape.
#[derive(Debug, Clone, Copy)]
pub struct GlimpseParams {
    pub x_hat: Var,
    pub y_hat: Var,
    pub delta_hat: Var,
    pub x: Var,
    pub y: Var,
    pub delta: Var,
    pub gamma: Var,
}

/// Plain values of a [`GlimpseParams`], in pixels (raw values dimensionless).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GlimpseWindow {
    pub x_hat: f64,
    pub y_hat: f64,
    pub delta_hat: f64,
    pub x: f64,
    pub y: f64,
    pub delta: f64,
    pub gamma: f64,
}

impl GlimpseParams {
    pub fn window(&self, tape: &Tape) -> GlimpseWindow {
        let v = |var: Var| tape.value(var).item();
        GlimpseWindow {
            x_hat: v(self.x_hat),
            y_hat: v(self.y_hat),
            delta_hat: v(self.delta_hat),
            x: v(self.x),
            y: v(self.y),
            delta: v(self.delta),
            gamma: v(self.gamma),
        }
    }
}

impl GlimpseWindow {
    /// Kernel centre coordinates along one axis for a window centred at `center`.
    pub fn centers(center: f64, delta: f64, n: usize) -> Vec<f64> {
        (1..=n)
            .map(|i| center + (i as f64 - (n as f64 + 1.0) / 2.0) * delta)
            .collect()
    }
}

/// Horizontal and vertical filterbanks plus their per-row normalisers.
#[derive(Debug, Clone, Copy)]
pub struct Filterbank {
    /// `[N, S]`
    pub fx: Var,
    /// `[N, S]`
    pub fy: Var,
    /// `[N]`
    pub zx: Var,
    /// `[N]`
    pub zy: Var,
}

/// A kernel profile evaluated on offsets `a - mu`.
pub trait Kernel {
    /// Unnormalised response for `offset` (any shape) at scale `gamma` (one element).
    fn response(&self, tape: &mut Tape, offset: Var, gamma: Var) -> Result<Var>;
}

/// `1 / (π γ (1 + (d / γ)²))`.
#[derive(Debug, Clone, Copy, Default)]
pub struct Cauchy;

impl Kernel for Cauchy {
    fn response(&self, tape: &mut Tape, offset: Var, gamma: Var) -> Result<Var> {
        let u = tape.div(offset, gamma)?;
        let u2 = tape.square(u);
        let bump = tape.add_scalar(u2, 1.0);
        let scaled = tape.mul(bump, gamma)?;
        let denom = tape.mul_scalar(scaled, PI);
        Ok(tape.recip(denom))
    }
}

fn check_sizes(side: usize, glimpse: usize) -> Result<()> {
    if glimpse == 0 || side < glimpse {
        return Err(ArcError::Config(format!(
            "need S >= N >= 1, got S = {side}, N = {glimpse}"
        )));
    }
    Ok(())
}

/// Squashes the three raw controller outputs and applies the window transforms.
pub fn unpack_params(tape: &mut Tape, omega: Var, side: usize, glimpse: usize) -> Result<GlimpseParams> {
    check_sizes(side, glimpse)?;
    let raw = tape.value(omega);
    if raw.numel() != 3 {
        return Err(ndcore::NdError::Shape {
            op: "unpack_params",
            lhs: raw.shape().to_vec(),
            rhs: vec![3],
        }
        .into());
    }
    if !raw.is_finite() {
        return Err(ArcError::Numeric("glimpse parameters"));
    }
    let squashed = tape.tanh(omega);
    let x_hat = tape.pick(squashed, 0)?;
    let y_hat = tape.pick(squashed, 1)?;
    let delta_hat = tape.pick(squashed, 2)?;

    let s = side as f64;
    let half_span = (s - 1.0) / 2.0;
    let x = tape.add_scalar(x_hat, 1.0);
    let x = tape.mul_scalar(x, half_span);
    let y = tape.add_scalar(y_hat, 1.0);
    let y = tape.mul_scalar(y, half_span);

    let mag = tape.abs(delta_hat);
    let one_minus = tape.neg(mag);
    let one_minus = tape.add_scalar(one_minus, 1.0);
    let delta = tape.mul_scalar(one_minus, s / glimpse as f64);
    let exponent = tape.mul_scalar(mag, -2.0);
    let exponent = tape.add_scalar(exponent, 1.0);
    let gamma = tape.exp(exponent);

    Ok(GlimpseParams {
        x_hat,
        y_hat,
        delta_hat,
        x,
        y,
        delta,
        gamma,
    })
}

fn axis_centers(tape: &mut Tape, center: Var, delta: Var, glimpse: usize) -> Result<Var> {
    let offsets = GlimpseWindow::centers(0.0, 1.0, glimpse);
    let offsets = tape.constant(Tensor::column(&offsets));
    let spread = tape.mul(offsets, delta)?;
    Ok(tape.add(spread, center)?)
}

/// Kernel centres `(mu_X, mu_Y)`, each shaped `[N, 1]`.
pub fn kernel_centers(tape: &mut Tape, p: &GlimpseParams, glimpse: usize) -> Result<(Var, Var)> {
    let mx = axis_centers(tape, p.x, p.delta, glimpse)?;
    let my = axis_centers(tape, p.y, p.delta, glimpse)?;
    Ok((mx, my))
}

/// One normalised filterbank `[N, S]` and its normaliser `[N]`.
fn axis_filterbank<K: Kernel>(
    tape: &mut Tape,
    kernel: &K,
    centers: Var,
    gamma: Var,
    side: usize,
) -> Result<(Var, Var)> {
    let n = tape.shape(centers)[0];
    let ones_row = tape.constant(Tensor::ones(&[1, side]));
    let mu = tape.matmul(centers, ones_row)?;
    let pixels: Vec<f64> = (0..n).flat_map(|_| (0..side).map(|a| a as f64)).collect();
    let grid = tape.constant(Tensor::new(&[n, side], pixels)?);
    let offset = tape.sub(grid, mu)?;
    let raw = kernel.response(tape, offset, gamma)?;
    let mass = tape.sum(raw, Some(1))?;
    let z = tape.clamp_min(mass, MIN_ROW_MASS);
    let z_col = tape.reshape(z, &[n, 1])?;
    let z_wide = tape.matmul(z_col, ones_row)?;
    let bank = tape.div(raw, z_wide)?;
    Ok((bank, z))
}

pub fn build_filterbanks_with<K: Kernel>(
    tape: &mut Tape,
    kernel: &K,
    p: &GlimpseParams,
    side: usize,
    glimpse: usize,
) -> Result<Filterbank> {
    check_sizes(side, glimpse)?;
    let (mx, my) = kernel_centers(tape, p, glimpse)?;
    let (fx, zx) = axis_filterbank(tape, kernel, mx, p.gamma, side)?;
    let (fy, zy) = axis_filterbank(tape, kernel, my, p.gamma, side)?;
    Ok(Filterbank { fx, fy, zx, zy })
}

/// Cauchy filterbanks for the window `p`.
pub fn build_filterbanks(tape: &mut Tape, p: &GlimpseParams, side: usize, glimpse: usize) -> Result<Filterbank> {
    build_filterbanks_with(tape, &Cauchy, p, side, glimpse)
}

/// `F_Y · I · F_Xᵀ`, flattened row-major to `[N * N]`.
pub fn apply_filterbanks(tape: &mut Tape, image: Var, bank: &Filterbank) -> Result<Var> {
    let rows = tape.matmul(bank.fy, image)?;
    let fxt = tape.transpose(bank.fx)?;
    let patch = tape.matmul(rows, fxt)?;
    Ok(tape.flatten(patch)?)
}

/// Result of [`attend`]: the flattened glimpse and the window that produced it.
#[derive(Debug, Clone, Copy)]
pub struct Glimpse {
    pub patch: Var,
    pub params: GlimpseParams,
    pub bank: Filterbank,
}

/// Extracts an `N x N` glimpse from the square `image` with raw parameters `omega`.
pub fn attend(tape: &mut Tape, image: Var, omega: Var, glimpse: usize) -> Result<Glimpse> {
    let shape = tape.shape(image).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(ndcore::NdError::Shape {
            op: "attend",
            lhs: shape,
            rhs: vec![],
        }
        .into());
    }
    let side = shape[0];
    let params = unpack_params(tape, omega, side, glimpse)?;
    let bank = build_filterbanks(tape, &params, side, glimpse)?;
    let patch = apply_filterbanks(tape, image, &bank)?;
    Ok(Glimpse { patch, params, bank })
}

/// Convenience wrapper: glimpse of a plain image with plain parameters.
pub fn attend_values(image: &Tensor, omega: [f64; 3], glimpse: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let img = tape.constant(image.clone());
    let om = tape.constant(Tensor::vector(&omega));
    let g = attend(&mut tape, img, om, glimpse)?;
    Ok(tape.value(g.patch).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params_for(tape: &mut Tape, omega: [f64; 3], side: usize, n: usize) -> GlimpseParams {
        let om = tape.constant(Tensor::vector(&omega));
        unpack_params(tape, om, side, n).unwrap()
    }

    #[test]
    fn midpoint_and_zero_delta() {
        let mut tape = Tape::new();
        let p = params_for(&mut tape, [0.0, 0.0, 0.0], 32, 4);
        let w = p.window(&tape);
        assert_eq!(w.x, 15.5);
        assert_eq!(w.y, 15.5);
        assert_eq!(w.delta, 8.0);
        assert!((w.gamma - std::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn saturated_delta_collapses_kernels() {
        // tanh saturates to exactly 1.0 in f64 well before 50.
        let mut tape = Tape::new();
        let p = params_for(&mut tape, [0.3, -0.2, 50.0], 32, 4);
        let w = p.window(&tape);
        assert_eq!(w.delta_hat, 1.0);
        assert_eq!(w.delta, 0.0);
        assert!((w.gamma - (-1f64).exp()).abs() < 1e-15);
        let (mx, my) = kernel_centers(&mut tape, &p, 4).unwrap();
        assert!(tape.value(mx).data().iter().all(|&m| m == w.x));
        assert!(tape.value(my).data().iter().all(|&m| m == w.y));
    }

    #[test]
    fn center_formula() {
        assert_eq!(GlimpseWindow::centers(10.0, 2.0, 3), vec![8.0, 10.0, 12.0]);
        assert_eq!(GlimpseWindow::centers(15.5, 8.0, 4), vec![3.5, 11.5, 19.5, 27.5]);
        assert_eq!(GlimpseWindow::centers(4.0, 0.0, 5), vec![4.0; 5]);
    }

    #[test]
    fn unnormalised_peak_is_one_over_pi() {
        let mut tape = Tape::new();
        let off = tape.constant(Tensor::scalar(0.0));
        let gamma = tape.constant(Tensor::scalar(1.0));
        let r = Cauchy.response(&mut tape, off, gamma).unwrap();
        assert!((tape.value(r).item() - 1.0 / PI).abs() < 1e-15);
    }

    #[test]
    fn huge_gamma_flattens_rows() {
        let mut tape = Tape::new();
        let centers = tape.constant(Tensor::column(&[2.0, 5.0]));
        let gamma = tape.constant(Tensor::scalar(1e6));
        let (bank, _) = axis_filterbank(&mut tape, &Cauchy, centers, gamma, 8).unwrap();
        for &v in tape.value(bank).data() {
            assert!((v - 1.0 / 8.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut tape = Tape::new();
        let om = tape.constant(Tensor::vector(&[0.0, f64::NAN, 0.0]));
        assert!(matches!(unpack_params(&mut tape, om, 8, 3), Err(ArcError::Numeric(_))));
        let om = tape.constant(Tensor::vector(&[0.0, 0.0]));
        assert!(unpack_params(&mut tape, om, 8, 3).is_err());
        let om = tape.constant(Tensor::vector(&[0.0, 0.0, 0.0]));
        assert!(unpack_params(&mut tape, om, 2, 3).is_err());
        let img = tape.constant(Tensor::zeros(&[4, 5]));
        assert!(attend(&mut tape, img, om, 3).is_err());
    }

    #[test]
    fn off_image_window_stays_finite() {
        let mut tape = Tape::new();
        let centers = tape.constant(Tensor::column(&[-1e200, 1e200]));
        let gamma = tape.constant(Tensor::scalar((-1f64).exp()));
        let (bank, z) = axis_filterbank(&mut tape, &Cauchy, centers, gamma, 8).unwrap();
        assert!(tape.value(bank).is_finite());
        assert!(tape.value(z).data().iter().all(|&v| v == MIN_ROW_MASS));
    }
}
