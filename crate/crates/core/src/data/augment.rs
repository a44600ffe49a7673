use ndcore::Tensor;
use rand::Rng;

/// Bounds for random affine augmentation. Zero bounds and zero flip
/// probabilities disable the corresponding transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationPolicy {
    /// Maximum |shift| per axis, pixels.
    pub max_translate: f64,
    /// Maximum |rotation|, degrees.
    pub max_rotate: f64,
    /// Maximum |shear angle|, degrees.
    pub max_shear: f64,
    pub flip_horizontal: f64,
    pub flip_vertical: f64,
}

impl AugmentationPolicy {
    pub fn none() -> Self {
        Self {
            max_translate: 0.0,
            max_rotate: 0.0,
            max_shear: 0.0,
            flip_horizontal: 0.0,
            flip_vertical: 0.0,
        }
    }

    /// Moderate defaults; translation scales with the image side (4 px at 32).
    pub fn moderate(side: usize) -> Self {
        Self {
            max_translate: 4.0 * side as f64 / 32.0,
            max_rotate: 15.0,
            max_shear: 10.0,
            flip_horizontal: 0.2,
            flip_vertical: 0.2,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.max_translate == 0.0
            && self.max_rotate == 0.0
            && self.max_shear == 0.0
            && self.flip_horizontal == 0.0
            && self.flip_vertical == 0.0
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AffineParams {
        let sym = |rng: &mut R, bound: f64| if bound > 0.0 { rng.random_range(-bound..=bound) } else { 0.0 };
        let flip = |rng: &mut R, p: f64| p > 0.0 && rng.random_bool(p.min(1.0));
        AffineParams {
            shear_deg: sym(rng, self.max_shear),
            rotate_deg: sym(rng, self.max_rotate),
            translate: (sym(rng, self.max_translate), sym(rng, self.max_translate)),
            flip_horizontal: flip(rng, self.flip_horizontal),
            flip_vertical: flip(rng, self.flip_vertical),
        }
    }
}

/// A concrete transform: shear, then rotate, then translate (all about the
/// image centre), then optional flips.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AffineParams {
    pub shear_deg: f64,
    pub rotate_deg: f64,
    /// `(dx, dy)`: columns, rows.
    pub translate: (f64, f64),
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
}

fn bilinear(src: &[f64], side: usize, x: f64, y: f64) -> f64 {
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let px = |xi: f64, yi: f64| -> f64 {
        if xi < 0.0 || yi < 0.0 || xi >= side as f64 || yi >= side as f64 {
            0.0
        } else {
            src[yi as usize * side + xi as usize]
        }
    };
    let top = px(x0, y0) * (1.0 - fx) + px(x0 + 1.0, y0) * fx;
    let bottom = px(x0, y0 + 1.0) * (1.0 - fx) + px(x0 + 1.0, y0 + 1.0) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Warps a square image by `p` with bilinear resampling and zero padding.
/// The output is clamped to `[0, 1]`.
pub fn apply_affine(image: &Tensor, p: &AffineParams) -> Tensor {
    let side = image.shape()[0];
    let c = (side as f64 - 1.0) / 2.0;
    let (sh, rot) = (p.shear_deg.to_radians(), p.rotate_deg.to_radians());
    // Forward map A = R · Sh with Sh = [[1, tan sh], [0, 1]].
    let (cos, sin, tan) = (rot.cos(), rot.sin(), sh.tan());
    let a = [[cos, cos * tan - sin], [sin, sin * tan + cos]];
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    let inv = [[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]];
    let src = image.data();
    let mut out = vec![0.0; side * side];
    for row in 0..side {
        for col in 0..side {
            let mut ox = col as f64;
            let mut oy = row as f64;
            if p.flip_horizontal {
                ox = side as f64 - 1.0 - ox;
            }
            if p.flip_vertical {
                oy = side as f64 - 1.0 - oy;
            }
            let dx = ox - c - p.translate.0;
            let dy = oy - c - p.translate.1;
            let sx = inv[0][0] * dx + inv[0][1] * dy + c;
            let sy = inv[1][0] * dx + inv[1][1] * dy + c;
            out[row * side + col] = bilinear(src, side, sx, sy).clamp(0.0, 1.0);
        }
    }
    Tensor::new(image.shape(), out).expect("same shape")
}

/// Random affine augmentation; the identity policy returns the input untouched.
pub fn augment<R: Rng + ?Sized>(image: &Tensor, policy: &AugmentationPolicy, rng: &mut R) -> Tensor {
    if policy.is_identity() {
        return image.clone();
    }
    apply_affine(image, &policy.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(side: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[side, side], (0..side * side).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn identity_policy_is_bit_exact() {
        let img = random_image(9, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(augment(&img, &AugmentationPolicy::none(), &mut rng), img);
        assert_eq!(apply_affine(&img, &AffineParams::default()), img);
    }

    #[test]
    fn half_turn_twice_restores() {
        let img = random_image(10, 2);
        let p = AffineParams {
            rotate_deg: 180.0,
            ..Default::default()
        };
        let back = apply_affine(&apply_affine(&img, &p), &p);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn translation_moves_hot_pixel() {
        let side = 8;
        let mut img = Tensor::zeros(&[side, side]);
        img.data_mut()[3 * side + 2] = 1.0;
        let p = AffineParams {
            translate: (2.0, 0.0),
            ..Default::default()
        };
        let out = apply_affine(&img, &p);
        assert!((out.at(3, 4) - 1.0).abs() < 1e-12);
        assert!((out.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn flips_mirror() {
        let img = random_image(5, 3);
        let h = apply_affine(&img, &AffineParams { flip_horizontal: true, ..Default::default() });
        let v = apply_affine(&img, &AffineParams { flip_vertical: true, ..Default::default() });
        for r in 0..5 {
            for c in 0..5 {
                assert!((h.at(r, c) - img.at(r, 4 - c)).abs() < 1e-12);
                assert!((v.at(r, c) - img.at(4 - r, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampled_params_respect_bounds() {
        let policy = AugmentationPolicy::moderate(32);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let p = policy.sample(&mut rng);
            assert!(p.shear_deg.abs() <= 10.0 && p.rotate_deg.abs() <= 15.0);
            assert!(p.translate.0.abs() <= 4.0 && p.translate.1.abs() <= 4.0);
        }
    }
}
