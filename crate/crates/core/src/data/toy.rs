//! Procedural glyphs: each class is a random polyline skeleton; each sample
//! redraws it with jittered control points.

use ndcore::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Alphabet, Character, Dataset, Drawing, Group};
use crate::error::{ArcError, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToySpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub side: usize,
    pub seed: u64,
    /// Characters per alphabet; the last alphabet may be smaller.
    pub alphabet_size: usize,
    /// Per-point jitter, as a fraction of the image side.
    pub jitter: f64,
    /// Leading skeleton points shared by every character of an alphabet.
    pub shared: usize,
}

impl ToySpec {
    pub fn new(classes: usize, samples_per_class: usize, side: usize, seed: u64) -> Self {
        Self {
            classes,
            samples_per_class,
            side,
            seed,
            alphabet_size: 20,
            jitter: 0.025,
            shared: 3,
        }
    }
}

const MARGIN: f64 = 0.15;

fn distance_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * vx - p.0, a.1 + t * vy - p.1);
    (cx * cx + cy * cy).sqrt()
}

/// Anti-aliased rendering of a polyline given in unit coordinates.
fn render(points: &[(f64, f64)], side: usize) -> Tensor {
    let s = side as f64;
    let radius = (0.04 * s).max(0.5);
    let px: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x * (s - 1.0), y * (s - 1.0))).collect();
    let mut data = vec![0.0; side * side];
    for row in 0..side {
        for col in 0..side {
            let p = (col as f64, row as f64);
            let d = px
                .windows(2)
                .map(|w| distance_to_segment(p, w[0], w[1]))
                .fold(f64::INFINITY, f64::min);
            data[row * side + col] = (radius + 0.5 - d).clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[side, side], data).expect("square image")
}

/// Generates a deterministic glyph dataset. Drawer ids are sample indices.
pub fn make_toy_dataset(spec: ToySpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(ArcError::Config(format!("toy dataset needs at least 2 classes, got {}", spec.classes)));
    }
    if spec.samples_per_class == 0 || spec.side < 2 || spec.alphabet_size == 0 {
        return Err(ArcError::Config("toy dataset needs samples >= 1, side >= 2, alphabet size >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let jitter = Normal::new(0.0, spec.jitter.max(0.0)).map_err(|e| ArcError::Config(e.to_string()))?;
    let point = |rng: &mut ChaCha8Rng| (rng.random_range(MARGIN..1.0 - MARGIN), rng.random_range(MARGIN..1.0 - MARGIN));
    let mut alphabets: Vec<Alphabet> = Vec::new();
    let mut stem: Vec<(f64, f64)> = Vec::new();
    for class in 0..spec.classes {
        if class % spec.alphabet_size == 0 {
            alphabets.push(Alphabet {
                name: format!("toy_alphabet_{:02}", class / spec.alphabet_size),
                group: Group::Unspecified,
                characters: Vec::new(),
            });
            stem = (0..spec.shared).map(|_| point(&mut rng)).collect();
        }
        let segments = rng.random_range(4..=7);
        // At least two points of every skeleton are the character's own.
        let own_from = stem.len().min(segments - 1);
        let skeleton: Vec<(f64, f64)> = stem[..own_from]
            .iter()
            .copied()
            .chain((own_from..=segments).map(|_| point(&mut rng)))
            .collect();
        let drawings = (0..spec.samples_per_class)
            .map(|s| {
                let shift = (jitter.sample(&mut rng), jitter.sample(&mut rng));
                let points: Vec<(f64, f64)> = skeleton
                    .iter()
                    .map(|&(x, y)| {
                        let jx = x + shift.0 + jitter.sample(&mut rng);
                        let jy = y + shift.1 + jitter.sample(&mut rng);
                        (jx.clamp(0.0, 1.0), jy.clamp(0.0, 1.0))
                    })
                    .collect();
                Drawing {
                    image: render(&points, spec.side),
                    drawer: s as u32,
                }
            })
            .collect();
        let alphabet = alphabets.last_mut().expect("pushed above");
        let name = format!("character_{:02}", alphabet.characters.len());
        alphabet.characters.push(Character { name, drawings });
    }
    Ok(Dataset {
        side: spec.side,
        alphabets,
    })
}
