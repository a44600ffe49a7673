//! Tape gradients of the full model against central finite differences.

mod common;

use arc_core::controller::{LstmCell, LstmState};
use arc_core::data::{ClassId, DrawingRef};
use arc_core::model::Parameters;
use arc_core::oneshot::{Episode, FullContextHead, SupportItem};
use arc_core::training::{bce_loss, episode_ce_loss, episode_gradient, pair_gradient};
use arc_core::{ArcConfig, ArcModel};
use common::{flat_grads, flatten, random_image, rng, with_flat};
use ndcore::numdiff::{central_gradient, max_relative_error};
use ndcore::{Tape, Tensor};
use rand::Rng;

const FLOOR: f64 = 1e-6;

fn small_config() -> ArcConfig {
    ArcConfig {
        side: 8,
        glimpse: 3,
        glimpses: 2,
        hidden: 8,
        glimpse_bias: false,
    }
}

/// Perturbs every parameter so gates and windows sit away from special points.
fn jittered_model(cfg: ArcConfig, seed: u64) -> ArcModel {
    let model = ArcModel::new(cfg, &mut rng(seed)).unwrap();
    let mut r = rng(seed + 100);
    let flat: Vec<f64> = flatten(&model).iter().map(|x| x + 0.3 * (r.random::<f64>() - 0.5)).collect();
    with_flat(&model, &flat)
}

fn pair_loss(model: &ArcModel, a: &Tensor, b: &Tensor, label: f64) -> f64 {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let xa = tape.constant(a.clone());
    let xb = tape.constant(b.clone());
    let run = bound.run(&mut tape, xa, xb).unwrap();
    let loss = bce_loss(&mut tape, run.similarity, label).unwrap();
    tape.value(loss).item()
}

#[test]
fn lstm_cell_matches_finite_differences() {
    let cell = LstmCell::new(5, 8, &mut rng(1));
    let inputs: Vec<Tensor> = (0..4).map(|i| Tensor::new(&[5, 1], random_image(5, i).data()[..5].to_vec()).unwrap()).collect();
    let loss_of = |w: &Tensor, b: &Tensor, track: bool| {
        let mut tape = Tape::new();
        let cell = LstmCell::from_tensors(w.clone(), b.clone()).unwrap();
        let bound = cell.bind(&mut tape, track);
        let mut state = LstmState::zeros(&mut tape, 8);
        for inp in &inputs {
            let v = tape.constant(inp.clone());
            state = bound.step(&mut tape, v, state).unwrap();
        }
        let sq = tape.square(state.h);
        let c = tape.sum(state.c, None).unwrap();
        let s = tape.sum(sq, None).unwrap();
        let loss = tape.add(s, c).unwrap();
        (tape, bound, loss)
    };
    let (mut tape, bound, loss) = loss_of(&cell.weight, &cell.bias, true);
    tape.backward(loss).unwrap();
    let analytic: Vec<f64> = [bound.weight, bound.bias]
        .iter()
        .flat_map(|&v| tape.grad(v).unwrap().data().to_vec())
        .collect();
    let nw = cell.weight.numel();
    let x0: Vec<f64> = cell.weight.data().iter().chain(cell.bias.data()).copied().collect();
    let numeric = central_gradient(
        |p| {
            let w = Tensor::new(cell.weight.shape(), p[..nw].to_vec()).unwrap();
            let b = Tensor::new(cell.bias.shape(), p[nw..].to_vec()).unwrap();
            let (tape, _, loss) = loss_of(&w, &b, false);
            tape.value(loss).item()
        },
        &x0,
        1e-5,
    );
    let err = max_relative_error(&analytic, &numeric, FLOOR);
    assert!(err < 1e-4, "lstm max relative error {err:e}");
}

#[test]
fn full_comparison_gradient_matches_finite_differences() {
    let cfg = ArcConfig {
        side: 8,
        glimpse: 3,
        glimpses: 4,
        hidden: 8,
        glimpse_bias: false,
    };
    let model = jittered_model(cfg, 3);
    let (a, b) = (random_image(8, 10), random_image(8, 11));
    for label in [0u8, 1] {
        let (_, grads) = pair_gradient(&model, &a, &b, label).unwrap();
        let numeric = central_gradient(
            |p| pair_loss(&with_flat(&model, p), &a, &b, f64::from(label)),
            &flatten(&model),
            1e-5,
        );
        let err = max_relative_error(&flat_grads(&grads), &numeric, FLOOR);
        assert!(err < 1e-4, "label {label}: max relative error {err:e}");
    }
}

#[test]
fn glimpse_bias_gradient_is_checked_too() {
    let mut cfg = small_config();
    cfg.glimpse_bias = true;
    let model = jittered_model(cfg, 4);
    assert_eq!(model.parameters().len(), 6);
    let (a, b) = (random_image(8, 12), random_image(8, 13));
    let (_, grads) = pair_gradient(&model, &a, &b, 1).unwrap();
    let numeric = central_gradient(|p| pair_loss(&with_flat(&model, p), &a, &b, 1.0), &flatten(&model), 1e-5);
    let err = max_relative_error(&flat_grads(&grads), &numeric, FLOOR);
    assert!(err < 1e-4, "max relative error {err:e}");
}

fn toy_episode(way: usize, side: usize, seed: u64) -> Episode {
    let support = (0..way)
        .map(|j| SupportItem {
            image: random_image(side, seed + j as u64),
            class: ClassId(j),
            source: DrawingRef { alphabet: 0, character: j, drawing: 0 },
        })
        .collect();
    Episode {
        support,
        test: random_image(side, seed + 50),
        test_source: DrawingRef { alphabet: 0, character: 1, drawing: 1 },
        truth: ClassId(1),
    }
}

fn jittered_head(h: usize, hb: usize, seed: u64) -> FullContextHead {
    let head = FullContextHead::new(h, hb, &mut rng(seed));
    let mut r = rng(seed + 7);
    let flat: Vec<f64> = flatten(&head).iter().map(|x| x + 0.3 * (r.random::<f64>() - 0.5)).collect();
    with_flat(&head, &flat)
}

fn episode_loss(model: &ArcModel, head: &FullContextHead, ep: &Episode) -> f64 {
    let mut tape = Tape::new();
    let arc = model.bind(&mut tape, false);
    let bound = head.bind(&mut tape, false);
    let p = arc_core::oneshot::full_context_forward(&mut tape, &arc, &bound, ep).unwrap();
    let loss = episode_ce_loss(&mut tape, p, ep.truth_index()).unwrap();
    tape.value(loss).item()
}

#[test]
fn full_context_head_matches_finite_differences() {
    let model = jittered_model(small_config(), 5);
    let head = jittered_head(8, 8, 6);
    let ep = toy_episode(3, 8, 20);
    let (_, grads) = episode_gradient(&model, &head, &ep, true).unwrap();
    let numeric = central_gradient(|p| episode_loss(&model, &with_flat(&head, p), &ep), &flatten(&head), 1e-5);
    let err = max_relative_error(&flat_grads(&grads), &numeric, FLOOR);
    assert!(err < 1e-4, "head max relative error {err:e}");
}

#[test]
fn joint_episode_gradient_reaches_the_comparator() {
    let model = jittered_model(small_config(), 7);
    let head = jittered_head(8, 8, 8);
    let ep = toy_episode(3, 8, 30);
    let (_, grads) = episode_gradient(&model, &head, &ep, false).unwrap();
    let n_arc = model.parameters().len();
    let analytic = flat_grads(&grads[..n_arc]);
    let numeric = central_gradient(|p| episode_loss(&with_flat(&model, p), &head, &ep), &flatten(&model), 1e-5);
    let err = max_relative_error(&analytic, &numeric, FLOOR);
    assert!(err < 1e-4, "comparator max relative error {err:e}");
}

#[test]
fn softmax_cross_entropy_gradient_is_p_minus_onehot() {
    let scores = [0.3, -1.2, 2.0, 0.7];
    let mut tape = Tape::new();
    let s = tape.param(Tensor::vector(&scores));
    let p = tape.softmax(s).unwrap();
    let loss = episode_ce_loss(&mut tape, p, 2).unwrap();
    tape.backward(loss).unwrap();
    let g = tape.grad(s).unwrap();
    let probs = tape.value(p).data().to_vec();
    for j in 0..4 {
        let expected = probs[j] - if j == 2 { 1.0 } else { 0.0 };
        assert!((g.data()[j] - expected).abs() < 1e-12);
    }
    let numeric = central_gradient(
        |x| {
            let m = x.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = x.iter().map(|v| (v - m).exp()).sum();
            -(x[2] - m - z.ln())
        },
        &scores,
        1e-6,
    );
    assert!(max_relative_error(g.data(), &numeric, FLOOR) < 1e-8);
}
