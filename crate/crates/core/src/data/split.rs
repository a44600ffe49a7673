use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AlphabetView, CharacterView, Dataset, DrawingRef, Group, View};
use crate::error::{ArcError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Subset {
    Train,
    Validation,
    Test,
}

/// Granularity at which a custom split assigns items.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitUnit {
    Alphabet,
    Character,
    /// Every drawing by one drawer goes to the same subset.
    Drawer,
}

/// Fractional split of shuffled units; the test subset takes the remainder.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CustomSplit {
    pub unit: SplitUnit,
    pub train: f64,
    pub validation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SplitScheme {
    /// 30 background alphabets (train + validation), 20 evaluation alphabets (test).
    BackgroundEval,
    /// 30 / 10 / 10 alphabets.
    TrainValTest,
    /// 1200 training characters, 423 test characters, sampled across alphabets.
    Across,
    Custom(CustomSplit),
}

impl SplitScheme {
    /// Parses the command-line names `3020`, `301010`, `across`, `custom`.
    /// `custom` means a 70/15/15 drawer-level split.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "3020" | "background-eval" => Ok(Self::BackgroundEval),
            "301010" | "train-val-test" => Ok(Self::TrainValTest),
            "across" => Ok(Self::Across),
            "custom" => Ok(Self::Custom(CustomSplit {
                unit: SplitUnit::Drawer,
                train: 0.7,
                validation: 0.15,
            })),
            other => Err(ArcError::Config(format!(
                "unknown split `{other}` (expected 3020, 301010, across or custom)"
            ))),
        }
    }
}

/// Alphabets held out of training for validation under [`SplitScheme::BackgroundEval`].
pub const BACKGROUND_VALIDATION_ALPHABETS: usize = 5;
pub const ACROSS_TRAIN_CHARACTERS: usize = 1200;

/// Subset assignment for every drawing, indexed `[alphabet][character][drawing]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    tags: Vec<Vec<Vec<Subset>>>,
}

fn shuffled(mut items: Vec<usize>, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    items.shuffle(&mut rng);
    items
}

impl Split {
    /// Assigns every drawing of `ds` to exactly one subset. Deterministic in `seed`.
    pub fn make(ds: &Dataset, scheme: SplitScheme, seed: u64) -> Result<Self> {
        let mut alphabet_tags: Option<Vec<Subset>> = None;
        let mut char_tags: Option<Vec<Vec<Subset>>> = None;
        let mut drawer_tag: Option<Box<dyn Fn(u32) -> Subset>> = None;
        let n_alpha = ds.alphabets.len();
        let grouped = ds.alphabets.iter().all(|a| a.group != Group::Unspecified);

        match scheme {
            SplitScheme::BackgroundEval | SplitScheme::TrainValTest => {
                let (bg, ev): (Vec<usize>, Vec<usize>) = if grouped {
                    (0..n_alpha).partition(|&i| ds.alphabets[i].group == Group::Background)
                } else {
                    if n_alpha != 50 {
                        return Err(ArcError::Config(format!(
                            "split needs 50 alphabets (or background/evaluation groups), dataset has {n_alpha}"
                        )));
                    }
                    ((0..30).collect(), (30..50).collect())
                };
                if bg.len() != 30 || ev.len() != 20 {
                    return Err(ArcError::Config(format!(
                        "split needs 30 background and 20 evaluation alphabets, found {} and {}",
                        bg.len(),
                        ev.len()
                    )));
                }
                let mut tags = vec![Subset::Train; n_alpha];
                if scheme == SplitScheme::BackgroundEval {
                    for &i in shuffled(bg, seed).iter().take(BACKGROUND_VALIDATION_ALPHABETS) {
                        tags[i] = Subset::Validation;
                    }
                    for &i in &ev {
                        tags[i] = Subset::Test;
                    }
                } else {
                    for (k, &i) in shuffled(ev, seed).iter().enumerate() {
                        tags[i] = if k < 10 { Subset::Validation } else { Subset::Test };
                    }
                }
                alphabet_tags = Some(tags);
            }
            SplitScheme::Across => {
                let total = ds.num_characters();
                if total != 1623 {
                    return Err(ArcError::Config(format!(
                        "across split needs 1623 characters, dataset has {total}"
                    )));
                }
                // Background alphabets first, then the rest, each in dataset order.
                let mut order: Vec<usize> = (0..n_alpha).filter(|&i| ds.alphabets[i].group == Group::Background).collect();
                order.extend((0..n_alpha).filter(|&i| ds.alphabets[i].group != Group::Background));
                let mut tags: Vec<Vec<Subset>> = ds.alphabets.iter().map(|a| vec![Subset::Test; a.characters.len()]).collect();
                let mut seen = 0;
                for a in order {
                    for t in tags[a].iter_mut() {
                        if seen < ACROSS_TRAIN_CHARACTERS {
                            *t = Subset::Train;
                        }
                        seen += 1;
                    }
                }
                char_tags = Some(tags);
            }
            SplitScheme::Custom(c) => {
                if !(c.train >= 0.0 && c.validation >= 0.0 && c.train + c.validation <= 1.0) {
                    return Err(ArcError::Config(format!(
                        "custom split fractions must be non-negative and sum to at most 1, got {} + {}",
                        c.train, c.validation
                    )));
                }
                let assign = |n: usize, seed: u64| -> Vec<Subset> {
                    let n_train = (c.train * n as f64).round() as usize;
                    let n_val = ((c.validation * n as f64).round() as usize).min(n - n_train.min(n));
                    let mut tags = vec![Subset::Test; n];
                    for (k, i) in shuffled((0..n).collect(), seed).into_iter().enumerate() {
                        if k < n_train {
                            tags[i] = Subset::Train;
                        } else if k < n_train + n_val {
                            tags[i] = Subset::Validation;
                        }
                    }
                    tags
                };
                match c.unit {
                    SplitUnit::Alphabet => alphabet_tags = Some(assign(n_alpha, seed)),
                    SplitUnit::Character => {
                        let flat = assign(ds.num_characters(), seed);
                        let mut it = flat.into_iter();
                        char_tags = Some(
                            ds.alphabets
                                .iter()
                                .map(|a| (0..a.characters.len()).map(|_| it.next().expect("count")).collect())
                                .collect(),
                        );
                    }
                    SplitUnit::Drawer => {
                        let mut drawers: Vec<u32> = ds
                            .alphabets
                            .iter()
                            .flat_map(|a| &a.characters)
                            .flat_map(|c| c.drawings.iter().map(|d| d.drawer))
                            .collect();
                        drawers.sort_unstable();
                        drawers.dedup();
                        let tags = assign(drawers.len(), seed);
                        drawer_tag = Some(Box::new(move |d| {
                            let i = drawers.binary_search(&d).expect("known drawer");
                            tags[i]
                        }));
                    }
                }
            }
        }

        let tags = ds
            .alphabets
            .iter()
            .enumerate()
            .map(|(ai, a)| {
                a.characters
                    .iter()
                    .enumerate()
                    .map(|(ci, c)| {
                        c.drawings
                            .iter()
                            .map(|d| {
                                if let Some(t) = &alphabet_tags {
                                    t[ai]
                                } else if let Some(t) = &char_tags {
                                    t[ai][ci]
                                } else {
                                    drawer_tag.as_ref().expect("one granularity is set")(d.drawer)
                                }
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        Ok(Self { tags })
    }

    pub fn subset_of(&self, r: DrawingRef) -> Subset {
        self.tags[r.alphabet][r.character][r.drawing]
    }

    /// Drawings assigned to `subset`, dropping empty characters and alphabets.
    pub fn view(&self, subset: Subset) -> View {
        let alphabets = self
            .tags
            .iter()
            .enumerate()
            .filter_map(|(ai, chars)| {
                let characters: Vec<CharacterView> = chars
                    .iter()
                    .enumerate()
                    .filter_map(|(ci, drawings)| {
                        let ds: Vec<usize> = drawings
                            .iter()
                            .enumerate()
                            .filter(|(_, &t)| t == subset)
                            .map(|(di, _)| di)
                            .collect();
                        (!ds.is_empty()).then_some(CharacterView {
                            character: ci,
                            drawings: ds,
                        })
                    })
                    .collect();
                (!characters.is_empty()).then_some(AlphabetView {
                    alphabet: ai,
                    characters,
                })
            })
            .collect();
        View { alphabets }
    }

    /// Number of alphabets containing at least one drawing of `subset`.
    pub fn alphabet_count(&self, subset: Subset) -> usize {
        self.view(subset).alphabets.len()
    }
}
