//! Alphabet → character → drawing datasets, splits, samplers and augmentation.

mod augment;
mod load;
mod split;
mod toy;

pub use augment::{apply_affine, augment, AffineParams, AugmentationPolicy};
pub use load::{
    area_resize, load_dataset, load_image, save_packed, Layout, StructuralWarning, MANIFEST_FILE,
};
pub use split::{CustomSplit, Split, SplitScheme, SplitUnit, Subset};
pub use toy::{make_toy_dataset, ToySpec};

use ndcore::Tensor;
use rand::seq::IndexedRandom;
use rand::Rng;

use crate::error::{ArcError, Result};

/// Which half of the original collection an alphabet came from, if known.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Background,
    Evaluation,
    Unspecified,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Background => "background",
            Group::Evaluation => "evaluation",
            Group::Unspecified => "unspecified",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "background" => Some(Group::Background),
            "evaluation" => Some(Group::Evaluation),
            "unspecified" => Some(Group::Unspecified),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Drawing {
    /// `[S, S]`, ink = 1, background = 0.
    pub image: Tensor,
    pub drawer: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Character {
    pub name: String,
    pub drawings: Vec<Drawing>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alphabet {
    pub name: String,
    pub group: Group,
    pub characters: Vec<Character>,
}

/// Immutable after construction; share freely across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub side: usize,
    pub alphabets: Vec<Alphabet>,
}

/// Flat character index across all alphabets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClassId(pub usize);

/// Address of one drawing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DrawingRef {
    pub alphabet: usize,
    pub character: usize,
    pub drawing: usize,
}

impl Dataset {
    pub fn num_characters(&self) -> usize {
        self.alphabets.iter().map(|a| a.characters.len()).sum()
    }

    pub fn num_drawings(&self) -> usize {
        self.alphabets
            .iter()
            .flat_map(|a| &a.characters)
            .map(|c| c.drawings.len())
            .sum()
    }

    pub fn drawing(&self, r: DrawingRef) -> &Drawing {
        &self.alphabets[r.alphabet].characters[r.character].drawings[r.drawing]
    }

    pub fn image(&self, r: DrawingRef) -> &Tensor {
        &self.drawing(r).image
    }

    pub fn class_id(&self, alphabet: usize, character: usize) -> ClassId {
        let before: usize = self.alphabets[..alphabet].iter().map(|a| a.characters.len()).sum();
        ClassId(before + character)
    }

    pub fn class_of(&self, r: DrawingRef) -> ClassId {
        self.class_id(r.alphabet, r.character)
    }
}

/// Drawings of one character visible in a subset.
#[derive(Debug, Clone, PartialEq)]
pub struct CharacterView {
    pub character: usize,
    pub drawings: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlphabetView {
    pub alphabet: usize,
    pub characters: Vec<CharacterView>,
}

/// The part of a dataset assigned to one [`Subset`].
#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub alphabets: Vec<AlphabetView>,
}

impl View {
    pub fn is_empty(&self) -> bool {
        self.alphabets.is_empty()
    }

    pub fn num_characters(&self) -> usize {
        self.alphabets.iter().map(|a| a.characters.len()).sum()
    }

    pub fn refs(&self) -> impl Iterator<Item = DrawingRef> + '_ {
        self.alphabets.iter().flat_map(|a| {
            a.characters.iter().flat_map(move |c| {
                c.drawings.iter().map(move |&d| DrawingRef {
                    alphabet: a.alphabet,
                    character: c.character,
                    drawing: d,
                })
            })
        })
    }
}

/// A labelled verification pair: `label` is 1 for two drawings of one character.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairRef {
    pub a: DrawingRef,
    pub b: DrawingRef,
    pub label: u8,
}

/// Samples a class-balanced pair from within one alphabet.
///
/// Positives are two distinct drawings of one character; negatives are
/// drawings of two different characters of the same alphabet. Alphabets that
/// cannot produce the requested kind are skipped.
pub fn sample_verification_pair<R: Rng + ?Sized>(view: &View, rng: &mut R) -> Result<PairRef> {
    let label: u8 = if rng.random_bool(0.5) { 1 } else { 0 };
    let make = |a: &AlphabetView, c: &CharacterView, d: usize| DrawingRef {
        alphabet: a.alphabet,
        character: c.character,
        drawing: d,
    };
    if label == 1 {
        let eligible: Vec<&AlphabetView> = view
            .alphabets
            .iter()
            .filter(|a| a.characters.iter().any(|c| c.drawings.len() >= 2))
            .collect();
        let alpha = *eligible
            .choose(rng)
            .ok_or_else(|| ArcError::Config("no character with two drawings for positive pairs".into()))?;
        let chars: Vec<&CharacterView> = alpha.characters.iter().filter(|c| c.drawings.len() >= 2).collect();
        let ch = *chars.choose(rng).expect("eligible alphabet has a character");
        let picked: Vec<&usize> = ch.drawings.choose_multiple(rng, 2).collect();
        Ok(PairRef {
            a: make(alpha, ch, *picked[0]),
            b: make(alpha, ch, *picked[1]),
            label,
        })
    } else {
        let eligible: Vec<&AlphabetView> = view.alphabets.iter().filter(|a| a.characters.len() >= 2).collect();
        let alpha = *eligible
            .choose(rng)
            .ok_or_else(|| ArcError::Config("no alphabet with two characters for negative pairs".into()))?;
        let picked: Vec<&CharacterView> = alpha.characters.choose_multiple(rng, 2).collect();
        let da = *picked[0].drawings.choose(rng).expect("non-empty character");
        let db = *picked[1].drawings.choose(rng).expect("non-empty character");
        Ok(PairRef {
            a: make(alpha, picked[0], da),
            b: make(alpha, picked[1], db),
            label,
        })
    }
}
