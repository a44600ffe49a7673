//! Episode sampling and the one-shot classifiers.

mod common;

use std::collections::HashSet;

use arc_core::data::{make_toy_dataset, CustomSplit, Dataset, Split, SplitScheme, SplitUnit, Subset, ToySpec, View};
use arc_core::oneshot::{
    argmax_first, evaluate_oneshot, full_context_classify, naive_classify, sample_episode, Episode, EpisodeMode,
    FullContextHead, NaiveArc, OneShotClassifier, OracleClassifier, PixelCosine, PixelKnn, RandomScorer,
};
use arc_core::{ArcConfig, ArcError, ArcModel, Result};
use common::rng;
use proptest::prelude::*;

fn dataset(classes: usize, alphabet: usize, samples: usize) -> Dataset {
    make_toy_dataset(ToySpec { alphabet_size: alphabet, ..ToySpec::new(classes, samples, 8, 0) }).unwrap()
}

fn full_view(ds: &Dataset) -> View {
    // Everything in one subset: a custom split with train fraction 1.
    let scheme = SplitScheme::Custom(CustomSplit { unit: SplitUnit::Drawer, train: 1.0, validation: 0.0 });
    Split::make(ds, scheme, 0).unwrap().view(Subset::Train)
}

fn check_episode(ds: &Dataset, ep: &Episode, way: usize, mode: EpisodeMode) {
    assert_eq!(ep.way(), way);
    let classes: HashSet<_> = ep.support.iter().map(|s| s.class).collect();
    assert_eq!(classes.len(), way, "support classes are distinct");
    assert_eq!(ep.support.iter().filter(|s| s.class == ep.truth).count(), 1);
    assert_eq!(ds.class_of(ep.test_source), ep.truth);
    let support_drawers: HashSet<u32> = ep.support.iter().map(|s| ds.drawing(s.source).drawer).collect();
    assert_eq!(support_drawers.len(), 1, "one drawer for the support set");
    assert!(!support_drawers.contains(&ds.drawing(ep.test_source).drawer));
    if mode == EpisodeMode::Within {
        assert!(ep.support.iter().all(|s| s.source.alphabet == ep.test_source.alphabet));
    }
    for s in &ep.support {
        assert_eq!(&s.image, ds.image(s.source));
    }
    assert_eq!(&ep.test, ds.image(ep.test_source));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn episodes_satisfy_the_protocol(seed in 0u64..100_000, way in 1usize..=6, across in any::<bool>()) {
        let ds = dataset(24, 8, 5);
        let view = full_view(&ds);
        let mode = if across { EpisodeMode::Across } else { EpisodeMode::Within };
        let ep = sample_episode(&ds, &view, way, mode, &mut rng(seed)).unwrap();
        check_episode(&ds, &ep, way, mode);
    }
}

#[test]
fn two_way_on_two_classes_uses_both() {
    let ds = dataset(2, 20, 3);
    let view = full_view(&ds);
    let ep = sample_episode(&ds, &view, 2, EpisodeMode::Within, &mut rng(1)).unwrap();
    let classes: HashSet<_> = ep.support.iter().map(|s| s.class.0).collect();
    assert_eq!(classes, HashSet::from([0, 1]));
}

#[test]
fn too_few_characters_names_the_shortfall() {
    let ds = dataset(12, 4, 3);
    let view = full_view(&ds);
    match sample_episode(&ds, &view, 6, EpisodeMode::Within, &mut rng(0)) {
        Err(ArcError::Config(msg)) => assert!(msg.contains("short by 2"), "{msg}"),
        other => panic!("expected configuration error, got {other:?}"),
    }
    assert!(sample_episode(&ds, &view, 6, EpisodeMode::Across, &mut rng(0)).is_ok());
}

#[test]
fn support_frequencies_match_the_binomial_oracle() {
    // One alphabet of 30 characters, 20-way: each appears with p = 20/30.
    let ds = dataset(30, 30, 3);
    let view = full_view(&ds);
    let n = 10_000;
    let mut counts = vec![0usize; 30];
    let mut r = rng(11);
    for _ in 0..n {
        let ep = sample_episode(&ds, &view, 20, EpisodeMode::Within, &mut r).unwrap();
        for s in &ep.support {
            counts[s.class.0] += 1;
        }
    }
    let p = 20.0 / 30.0;
    let sigma = (n as f64 * p * (1.0 - p)).sqrt();
    for (c, &k) in counts.iter().enumerate() {
        assert!((k as f64 - n as f64 * p).abs() < 3.0 * sigma, "class {c}: {k}");
    }
}

#[test]
fn argmax_rules() {
    assert_eq!(argmax_first(&[0.1, 0.9, 0.3]), 1);
    assert_eq!(argmax_first(&[0.4; 5]), 0);
}

fn small_model(seed: u64) -> ArcModel {
    ArcModel::new(ArcConfig { side: 8, glimpse: 3, glimpses: 2, hidden: 8, glimpse_bias: false }, &mut rng(seed)).unwrap()
}

/// Applies a positive-monotone map to another classifier's scores.
struct Monotone<'a>(NaiveArc<'a>);

impl OneShotClassifier for Monotone<'_> {
    fn scores(&self, ep: &Episode) -> Result<Vec<f64>> {
        Ok(self.0.scores(ep)?.iter().map(|s| (5.0 * s).exp() + 3.0).collect())
    }
}

#[test]
fn naive_prediction_is_invariant_to_monotone_maps_and_order() {
    let ds = dataset(10, 10, 4);
    let view = full_view(&ds);
    let model = small_model(2);
    let mut r = rng(3);
    for _ in 0..20 {
        let ep = sample_episode(&ds, &view, 4, EpisodeMode::Within, &mut r).unwrap();
        let naive = NaiveArc { model: &model };
        assert_eq!(naive.classify(&ep).unwrap(), Monotone(NaiveArc { model: &model }).classify(&ep).unwrap());
        let predicted = naive_classify(&model, &ep).unwrap();
        assert_eq!(predicted, ep.support[naive.classify(&ep).unwrap()].class);
        // Swapping the image order of every comparison leaves the symmetric score unchanged.
        for s in &ep.support {
            let ab = model.symmetric_similarity(&ep.test, &s.image).unwrap();
            let ba = model.symmetric_similarity(&s.image, &ep.test).unwrap();
            assert_eq!(ab, ba);
        }
    }
}

#[test]
fn full_context_outputs_are_distributions() {
    let ds = dataset(10, 10, 4);
    let view = full_view(&ds);
    let model = small_model(4);
    let head = FullContextHead::new(8, 6, &mut rng(5));
    for way in [1, 3, 5] {
        let ep = sample_episode(&ds, &view, way, EpisodeMode::Within, &mut rng(way as u64)).unwrap();
        let p = full_context_classify(&model, &head, &ep).unwrap();
        assert_eq!(p.len(), way);
        // Zero output weights at initialisation: uniform.
        for &pj in &p {
            assert!((pj - 1.0 / way as f64).abs() < 1e-15);
        }
    }
    let mut trained = head.clone();
    trained.score_out = ndcore::Tensor::new(&[1, 6], vec![0.5, -1.0, 2.0, 0.1, 0.0, 1.5]).unwrap();
    let ep = sample_episode(&ds, &view, 5, EpisodeMode::Within, &mut rng(9)).unwrap();
    let p = full_context_classify(&model, &trained, &ep).unwrap();
    assert!(p.iter().all(|&x| x >= 0.0));
    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let one = sample_episode(&ds, &view, 1, EpisodeMode::Within, &mut rng(9)).unwrap();
    assert_eq!(full_context_classify(&model, &trained, &one).unwrap(), vec![1.0]);
}

#[test]
fn oracle_and_random_classifiers_hit_their_rates() {
    let ds = dataset(40, 40, 4);
    let view = full_view(&ds);
    let sampler = |r: &mut rand_chacha::ChaCha8Rng| sample_episode(&ds, &view, 20, EpisodeMode::Within, r);
    let oracle = evaluate_oneshot(&OracleClassifier, 500, 0, 1, sampler).unwrap();
    assert_eq!(oracle.accuracy, 1.0);
    let n = 10_000;
    let random = evaluate_oneshot(&RandomScorer { seed: 1 }, n, 0, 1, sampler).unwrap();
    let sigma = (0.05 * 0.95 / n as f64).sqrt();
    assert!((random.accuracy - 0.05).abs() < 3.0 * sigma, "random accuracy {}", random.accuracy);
    assert!(random.interval.0 < random.accuracy && random.accuracy < random.interval.1);
}

#[test]
fn evaluation_does_not_depend_on_thread_count() {
    let ds = dataset(20, 20, 5);
    let view = full_view(&ds);
    let sampler = |r: &mut rand_chacha::ChaCha8Rng| sample_episode(&ds, &view, 5, EpisodeMode::Within, r);
    let one = evaluate_oneshot(&PixelKnn, 300, 7, 1, sampler).unwrap();
    let four = evaluate_oneshot(&PixelKnn, 300, 7, 4, sampler).unwrap();
    assert_eq!(one, four);
    let cos = evaluate_oneshot(&PixelCosine, 300, 7, 1, sampler).unwrap();
    assert_eq!(cos.records.len(), 300);
    assert!(evaluate_oneshot(&PixelKnn, 0, 7, 1, sampler).is_err());
}
