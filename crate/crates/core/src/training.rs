//! Losses, the optimiser and the training loops.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use ndcore::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::{augment, sample_verification_pair, AugmentationPolicy, Dataset, PairRef, Split, SplitScheme, Subset, View};
use crate::error::{ArcError, Result};
use crate::model::{ArcModel, Parameters};
use crate::oneshot::{full_context_forward, sample_episode, EpisodeMode, FullContextHead, OneShotClassifier};

pub const METRICS_FILE: &str = "metrics.log";
pub const HEAD_FILE: &str = "head.arct";
pub const PROBES_FILE: &str = "probes.arct";

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

/// Binary cross-entropy of a `[1]`-shaped probability against `label`.
pub fn bce_loss(tape: &mut Tape, p: Var, label: f64) -> Result<Var> {
    let p_safe = tape.clamp_min(p, EPS);
    let q = tape.neg(p);
    let q = tape.add_scalar(q, 1.0);
    let q_safe = tape.clamp_min(q, EPS);
    let log_p = tape.log(p_safe)?;
    let log_q = tape.log(q_safe)?;
    let a = tape.mul_scalar(log_p, label);
    let b = tape.mul_scalar(log_q, 1.0 - label);
    let sum = tape.add(a, b)?;
    let neg = tape.neg(sum);
    Ok(tape.sum(neg, None)?)
}

/// `-log p[truth]` for a `[way]` distribution.
pub fn episode_ce_loss(tape: &mut Tape, p: Var, truth: usize) -> Result<Var> {
    let picked = tape.pick(p, truth)?;
    let safe = tape.clamp_min(picked, EPS);
    let log = tape.log(safe)?;
    let neg = tape.neg(log);
    Ok(tape.sum(neg, None)?)
}

/// Adaptive-moment optimiser with global gradient-norm clipping.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Gradients with global norm above this are rescaled to it.
    pub clip: Option<f64>,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

pub type Adam = OptimizerState;

impl OptimizerState {
    pub fn new(shapes: &[&[usize]], lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: Some(10.0),
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    pub fn for_params(params: &[&Tensor], lr: f64) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(|t| t.shape()).collect();
        Self::new(&shapes, lr)
    }

    /// Applies one update in place and returns the pre-clipping gradient norm.
    pub fn update(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<f64> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(ArcError::Config(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != self.m[i].shape() || g.shape() != self.m[i].shape() {
                return Err(ndcore::NdError::Shape {
                    op: "optimizer_step",
                    lhs: self.m[i].shape().to_vec(),
                    rhs: g.shape().to_vec(),
                }
                .into());
            }
        }
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(ArcError::Numeric("gradient"));
        }
        let scale = match self.clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let gj = gj * scale;
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(norm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    /// Examples (pairs or episodes) per update.
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub augmentation: AugmentationPolicy,
    /// Updates between validation passes.
    pub eval_interval: usize,
    /// Stop after this many validation passes without improvement; 0 disables.
    pub patience: usize,
    pub split: SplitScheme,
    pub clip: f64,
    /// Worker threads for per-example gradients; 1 is the deterministic default.
    pub threads: usize,
    /// Validation pairs (or episodes) drawn once per run.
    pub val_size: usize,
}

impl TrainConfig {
    pub fn toy(seed: u64) -> Self {
        Self {
            batch: 16,
            steps: 20_000,
            lr: 1e-3,
            seed,
            augmentation: AugmentationPolicy::none(),
            eval_interval: 500,
            patience: 0,
            split: SplitScheme::parse("custom").expect("known scheme"),
            clip: 10.0,
            threads: 1,
            val_size: 1000,
        }
    }

    pub fn replication(seed: u64) -> Self {
        Self {
            batch: 64,
            steps: 100_000,
            lr: 1e-4,
            seed,
            augmentation: AugmentationPolicy::moderate(32),
            eval_interval: 1000,
            patience: 10,
            split: SplitScheme::BackgroundEval,
            clip: 10.0,
            threads: 1,
            val_size: 2000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.eval_interval == 0 || self.threads == 0 {
            return Err(ArcError::Config("batch, eval interval and threads must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.clip > 0.0) {
            return Err(ArcError::Config(format!("learning rate and clip must be positive, got {} and {}", self.lr, self.clip)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPoint {
    pub step: usize,
    /// Mean training loss since the previous evaluation.
    pub train_loss: f64,
    /// NaN when there is no validation subset.
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    /// Mean batch loss of every update.
    pub losses: Vec<f64>,
    pub evals: Vec<EvalPoint>,
    /// Step of the kept checkpoint; `None` means the final weights were kept.
    pub best_step: Option<usize>,
    pub best_val_acc: Option<f64>,
}

/// Appends `step, train_loss, val_acc` lines.
struct MetricsLog(Option<BufWriter<File>>);

impl MetricsLog {
    fn create(out: Option<&Path>) -> Result<Self> {
        let Some(dir) = out else { return Ok(Self(None)) };
        fs::create_dir_all(dir).map_err(ArcError::io(dir))?;
        let path = dir.join(METRICS_FILE);
        let f = File::create(&path).map_err(ArcError::io(&path))?;
        Ok(Self(Some(BufWriter::new(f))))
    }

    fn record(&mut self, e: &EvalPoint) -> Result<()> {
        if let Some(w) = &mut self.0 {
            writeln!(w, "{}, {:.8}, {:.6}", e.step, e.train_loss, e.val_acc)
                .and_then(|_| w.flush())
                .map_err(ArcError::io(METRICS_FILE))?;
        }
        Ok(())
    }
}

fn worker_pool(threads: usize) -> Result<Option<rayon::ThreadPool>> {
    if threads <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map(Some)
        .map_err(|e| ArcError::Config(e.to_string()))
}

/// Maps `f` over `items`, in parallel when a pool is given; output keeps item order.
fn map_items<T: Sync, U: Send>(pool: Option<&rayon::ThreadPool>, items: &[T], f: impl Fn(&T) -> Result<U> + Sync + Send) -> Result<Vec<U>> {
    match pool {
        None => items.iter().map(f).collect(),
        Some(p) => p.install(|| items.par_iter().map(f).collect()),
    }
}

/// Sums per-example `(loss, grads)` in item order and divides by the count.
fn mean_gradients(results: Vec<(f64, Vec<Tensor>)>) -> (f64, Vec<Tensor>) {
    let n = results.len() as f64;
    let mut it = results.into_iter();
    let (mut loss, mut grads) = it.next().expect("non-empty batch");
    for (l, g) in it {
        loss += l;
        for (acc, gi) in grads.iter_mut().zip(&g) {
            for (a, b) in acc.data_mut().iter_mut().zip(gi.data()) {
                *a += b;
            }
        }
    }
    for g in &mut grads {
        for x in g.data_mut() {
            *x /= n;
        }
    }
    (loss / n, grads)
}

fn collect_grads(tape: &Tape, vars: &[Var]) -> Vec<Tensor> {
    vars.iter()
        .map(|&v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
        .collect()
}

/// BCE loss of one pair and its gradient for every model parameter.
pub fn pair_gradient(model: &ArcModel, a: &Tensor, b: &Tensor, label: u8) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, true);
    let xa = tape.constant(a.clone());
    let xb = tape.constant(b.clone());
    let run = bound.run(&mut tape, xa, xb)?;
    let loss = bce_loss(&mut tape, run.similarity, f64::from(label))?;
    tape.backward(loss)?;
    Ok((tape.value(loss).item(), collect_grads(&tape, &bound.vars())))
}

/// Draws `n` verification pairs.
pub fn sample_pairs<R: Rng + ?Sized>(view: &View, n: usize, rng: &mut R) -> Result<Vec<PairRef>> {
    (0..n).map(|_| sample_verification_pair(view, rng)).collect()
}

/// Fraction of pairs where `similarity > 0.5` agrees with the label.
pub fn pair_accuracy(model: &ArcModel, ds: &Dataset, pairs: &[PairRef], threads: usize) -> Result<f64> {
    let pool = worker_pool(threads)?;
    let hits = map_items(pool.as_ref(), pairs, |p| {
        let s = model.compare(ds.image(p.a), ds.image(p.b), false)?.similarity;
        Ok(u8::from((s > 0.5) == (p.label == 1)))
    })?;
    Ok(hits.iter().map(|&h| f64::from(h)).sum::<f64>() / pairs.len().max(1) as f64)
}

/// Independent random streams of one run.
pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const TRAIN_STREAM: u64 = 0;
const VALIDATION_STREAM: u64 = 1;
const PROBE_TRAIN_STREAM: u64 = 2;
const PROBE_TEST_STREAM: u64 = 3;

/// Trains the comparator on the verification task.
///
/// Keeps the weights with the best validation accuracy (when a validation
/// subset exists). With `out`, writes `params.arct`, `config.txt` and
/// `metrics.log` there.
pub fn train_verification(model: &mut ArcModel, ds: &Dataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainHistory> {
    cfg.validate()?;
    if ds.side != model.config.side {
        return Err(ArcError::Config(format!("dataset images are {0}x{0}, model expects S = {1}", ds.side, model.config.side)));
    }
    let split = Split::make(ds, cfg.split, cfg.seed)?;
    let train_view = split.view(Subset::Train);
    let val_view = split.view(Subset::Validation);
    let mut log = MetricsLog::create(out)?;
    let mut history = TrainHistory::default();
    if cfg.steps > 0 && train_view.is_empty() {
        return Err(ArcError::Config("training subset is empty".into()));
    }

    let val_pairs = if val_view.is_empty() {
        Vec::new()
    } else {
        sample_pairs(&val_view, cfg.val_size, &mut stream(cfg.seed, VALIDATION_STREAM))?
    };
    let pool = worker_pool(cfg.threads)?;
    let mut rng = stream(cfg.seed, TRAIN_STREAM);
    let mut opt = OptimizerState::for_params(&model.parameters().iter().map(|(_, t)| *t).collect::<Vec<_>>(), cfg.lr);
    opt.clip = Some(cfg.clip);
    let mut best: Option<(ArcModel, f64, usize)> = None;
    let mut since_best = 0;
    let mut window = Vec::new();

    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let p = sample_verification_pair(&train_view, &mut rng)?;
            let a = augment(ds.image(p.a), &cfg.augmentation, &mut rng);
            let b = augment(ds.image(p.b), &cfg.augmentation, &mut rng);
            batch.push((a, b, p.label));
        }
        let results = map_items(pool.as_ref(), &batch, |(a, b, y)| pair_gradient(model, a, b, *y))?;
        let (loss, grads) = mean_gradients(results);
        if !loss.is_finite() {
            return Err(ArcError::Divergence { step, loss });
        }
        opt.update(model.parameters_mut(), &grads)?;
        history.losses.push(loss);
        window.push(loss);

        if step % cfg.eval_interval == 0 || step == cfg.steps {
            let val_acc = if val_pairs.is_empty() {
                f64::NAN
            } else {
                pair_accuracy(model, ds, &val_pairs, cfg.threads)?
            };
            let point = EvalPoint {
                step,
                train_loss: window.iter().sum::<f64>() / window.len() as f64,
                val_acc,
            };
            window.clear();
            log.record(&point)?;
            history.evals.push(point);
            if !val_acc.is_nan() {
                if best.as_ref().is_none_or(|(_, acc, _)| val_acc > *acc) {
                    best = Some((model.clone(), val_acc, step));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if cfg.patience > 0 && since_best >= cfg.patience {
                        break;
                    }
                }
            }
        }
    }
    if let Some((m, acc, step)) = best {
        *model = m;
        history.best_step = Some(step);
        history.best_val_acc = Some(acc);
    }
    if let Some(dir) = out {
        model.save(dir)?;
    }
    Ok(history)
}

/// Logistic classifier on standardised features.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticProbe {
    /// Glimpses per image seen by the probed state.
    pub k: usize,
    pub mean: Tensor,
    pub scale: Tensor,
    pub weight: Tensor,
    pub bias: f64,
}

impl LogisticProbe {
    pub fn predict(&self, h: &Tensor) -> f64 {
        let z: f64 = h
            .data()
            .iter()
            .zip(self.mean.data())
            .zip(self.scale.data())
            .zip(self.weight.data())
            .map(|(((x, m), s), w)| w * (x - m) / s)
            .sum::<f64>()
            + self.bias;
        1.0 / (1.0 + (-z).exp())
    }

    /// Fits by full-batch Adam on the mean BCE.
    pub fn fit(k: usize, features: &[Tensor], labels: &[u8], iterations: usize, lr: f64) -> Result<Self> {
        let n = features.len();
        if n == 0 || n != labels.len() {
            return Err(ArcError::Config("probe needs matching, non-empty features and labels".into()));
        }
        let d = features[0].numel();
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, x) in mean.iter_mut().zip(f.data()) {
                *m += x / n as f64;
            }
        }
        let mut scale = vec![0.0; d];
        for f in features {
            for ((s, x), m) in scale.iter_mut().zip(f.data()).zip(&mean) {
                *s += (x - m) * (x - m) / n as f64;
            }
        }
        for s in &mut scale {
            *s = s.sqrt().max(1e-6);
        }
        let z: Vec<Vec<f64>> = features
            .iter()
            .map(|f| f.data().iter().zip(&mean).zip(&scale).map(|((x, m), s)| (x - m) / s).collect())
            .collect();
        let mut params = vec![Tensor::zeros(&[d]), Tensor::zeros(&[1])];
        let mut opt = OptimizerState::new(&[&[d], &[1]], lr);
        opt.clip = None;
        for _ in 0..iterations {
            let mut gw = vec![0.0; d];
            let mut gb = 0.0;
            for (zi, &y) in z.iter().zip(labels) {
                let logit: f64 = zi.iter().zip(params[0].data()).map(|(a, b)| a * b).sum::<f64>() + params[1].data()[0];
                let err = 1.0 / (1.0 + (-logit).exp()) - f64::from(y);
                for (g, x) in gw.iter_mut().zip(zi) {
                    *g += err * x / n as f64;
                }
                gb += err / n as f64;
            }
            let grads = [Tensor::vector(&gw), Tensor::vector(&[gb])];
            let (w, b) = params.split_at_mut(1);
            opt.update(vec![&mut w[0], &mut b[0]], &grads)?;
        }
        Ok(Self {
            k,
            mean: Tensor::vector(&mean),
            scale: Tensor::vector(&scale),
            bias: params[1].data()[0],
            weight: params.swap_remove(0),
        })
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        vec![
            Tensor::vector(&[self.k as f64]),
            self.mean.clone(),
            self.scale.clone(),
            self.weight.clone(),
            Tensor::vector(&[self.bias]),
        ]
    }
}

pub fn save_probes(path: &Path, probes: &[LogisticProbe]) -> Result<()> {
    let tensors: Vec<Tensor> = probes.iter().flat_map(LogisticProbe::to_tensors).collect();
    Ok(ndcore::io::save(path, &tensors)?)
}

pub fn load_probes(path: &Path) -> Result<Vec<LogisticProbe>> {
    let tensors = ndcore::io::load(path)?;
    if tensors.len() % 5 != 0 {
        return Err(ArcError::Config(format!("{} does not hold whole probes", path.display())));
    }
    tensors
        .chunks(5)
        .map(|c| {
            let d = c[1].numel();
            if c[2].numel() != d || c[3].numel() != d || c[0].numel() != 1 || c[4].numel() != 1 {
                return Err(ArcError::Config(format!("{} holds a malformed probe", path.display())));
            }
            Ok(LogisticProbe {
                k: c[0].data()[0] as usize,
                mean: c[1].clone(),
                scale: c[2].clone(),
                weight: c[3].clone(),
                bias: c[4].data()[0],
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub iterations: usize,
    pub lr: f64,
    pub seed: u64,
    pub split: SplitScheme,
    pub threads: usize,
}

impl ProbeConfig {
    pub fn new(seed: u64, split: SplitScheme) -> Self {
        Self {
            train_pairs: 2000,
            test_pairs: 1000,
            iterations: 300,
            lr: 0.05,
            seed,
            split,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub probes: Vec<LogisticProbe>,
    /// Test accuracy of the probe on `h_{2k}`, for `k = 1..=g`.
    pub accuracies: Vec<f64>,
}

fn probe_features(model: &ArcModel, ds: &Dataset, pairs: &[PairRef], threads: usize) -> Result<Vec<Vec<Tensor>>> {
    let pool = worker_pool(threads)?;
    map_items(pool.as_ref(), pairs, |p| {
        Ok(model.probe_states(&[(ds.image(p.a), ds.image(p.b))])?.swap_remove(0))
    })
}

/// Fits one probe per glimpse count on the frozen model's states and reports
/// held-out accuracies. Training pairs come from the training subset, test
/// pairs from the test subset.
pub fn train_probe_classifiers(model: &ArcModel, ds: &Dataset, cfg: &ProbeConfig) -> Result<ProbeReport> {
    let split = Split::make(ds, cfg.split, cfg.seed)?;
    let train_view = split.view(Subset::Train);
    let test_view = split.view(Subset::Test);
    if train_view.is_empty() || test_view.is_empty() {
        return Err(ArcError::Config("probe training needs non-empty train and test subsets".into()));
    }
    let train_pairs = sample_pairs(&train_view, cfg.train_pairs, &mut stream(cfg.seed, PROBE_TRAIN_STREAM))?;
    let test_pairs = sample_pairs(&test_view, cfg.test_pairs, &mut stream(cfg.seed, PROBE_TEST_STREAM))?;
    let train_x = probe_features(model, ds, &train_pairs, cfg.threads)?;
    let test_x = probe_features(model, ds, &test_pairs, cfg.threads)?;
    let train_y: Vec<u8> = train_pairs.iter().map(|p| p.label).collect();
    let mut probes = Vec::new();
    let mut accuracies = Vec::new();
    for k in 1..=model.config.glimpses {
        let feats: Vec<Tensor> = train_x.iter().map(|s| s[k - 1].clone()).collect();
        let probe = LogisticProbe::fit(k, &feats, &train_y, cfg.iterations, cfg.lr)?;
        let hits = test_x
            .iter()
            .zip(&test_pairs)
            .filter(|(s, p)| (probe.predict(&s[k - 1]) > 0.5) == (p.label == 1))
            .count();
        accuracies.push(hits as f64 / test_pairs.len() as f64);
        probes.push(probe);
    }
    Ok(ProbeReport { probes, accuracies })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FullContextConfig {
    pub train: TrainConfig,
    pub way: usize,
    pub mode: EpisodeMode,
    /// Train only the head; the comparator stays fixed.
    pub freeze_arc: bool,
}

/// Episode CE loss and gradients. Comparator gradients come first (empty when frozen).
pub fn episode_gradient(
    model: &ArcModel,
    head: &FullContextHead,
    ep: &crate::oneshot::Episode,
    freeze_arc: bool,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let arc = model.bind(&mut tape, !freeze_arc);
    let bound = head.bind(&mut tape, true);
    let p = full_context_forward(&mut tape, &arc, &bound, ep)?;
    let loss = episode_ce_loss(&mut tape, p, ep.truth_index())?;
    tape.backward(loss)?;
    let mut vars = if freeze_arc { Vec::new() } else { arc.vars() };
    vars.extend(bound.vars());
    Ok((tape.value(loss).item(), collect_grads(&tape, &vars)))
}

/// Full-context classifier accuracy over pre-drawn episodes.
fn episode_accuracy(model: &ArcModel, head: &FullContextHead, episodes: &[crate::oneshot::Episode], threads: usize) -> Result<f64> {
    let pool = worker_pool(threads)?;
    let clf = crate::oneshot::FullContextArc { model, head };
    let hits = map_items(pool.as_ref(), episodes, |ep| Ok(u8::from(clf.classify(ep)? == ep.truth_index())))?;
    Ok(hits.iter().map(|&h| f64::from(h)).sum::<f64>() / episodes.len().max(1) as f64)
}

/// Episodic training of the head, jointly with the comparator unless frozen.
/// With `out`, writes the comparator checkpoint plus `head.arct`.
pub fn train_full_context(
    model: &mut ArcModel,
    head: &mut FullContextHead,
    ds: &Dataset,
    cfg: &FullContextConfig,
    out: Option<&Path>,
) -> Result<TrainHistory> {
    let tc = &cfg.train;
    tc.validate()?;
    if head.embedding_size() != model.config.hidden {
        return Err(ArcError::Config(format!(
            "head expects {}-dim embeddings, model has H = {}",
            head.embedding_size(),
            model.config.hidden
        )));
    }
    let split = Split::make(ds, tc.split, tc.seed)?;
    let train_view = split.view(Subset::Train);
    let val_view = split.view(Subset::Validation);
    let mut log = MetricsLog::create(out)?;
    let mut history = TrainHistory::default();

    let mut val_rng = stream(tc.seed, VALIDATION_STREAM);
    let val_episodes = if val_view.is_empty() {
        Vec::new()
    } else {
        (0..tc.val_size)
            .map(|_| sample_episode(ds, &val_view, cfg.way, cfg.mode, &mut val_rng))
            .collect::<Result<Vec<_>>>()?
    };
    let pool = worker_pool(tc.threads)?;
    let mut rng = stream(tc.seed, TRAIN_STREAM);
    let mut shapes: Vec<Vec<usize>> = Vec::new();
    if !cfg.freeze_arc {
        shapes.extend(model.parameters().iter().map(|(_, t)| t.shape().to_vec()));
    }
    shapes.extend(head.parameters().iter().map(|(_, t)| t.shape().to_vec()));
    let mut opt = OptimizerState::new(&shapes.iter().map(Vec::as_slice).collect::<Vec<_>>(), tc.lr);
    opt.clip = Some(tc.clip);
    let mut best: Option<(ArcModel, FullContextHead, f64, usize)> = None;
    let mut since_best = 0;
    let mut window = Vec::new();

    for step in 1..=tc.steps {
        let mut batch = Vec::with_capacity(tc.batch);
        for _ in 0..tc.batch {
            let mut ep = sample_episode(ds, &train_view, cfg.way, cfg.mode, &mut rng)?;
            for s in &mut ep.support {
                s.image = augment(&s.image, &tc.augmentation, &mut rng);
            }
            ep.test = augment(&ep.test, &tc.augmentation, &mut rng);
            batch.push(ep);
        }
        let results = map_items(pool.as_ref(), &batch, |ep| episode_gradient(model, head, ep, cfg.freeze_arc))?;
        let (loss, grads) = mean_gradients(results);
        if !loss.is_finite() {
            return Err(ArcError::Divergence { step, loss });
        }
        let mut params: Vec<&mut Tensor> = Vec::new();
        if !cfg.freeze_arc {
            params.extend(model.parameters_mut());
        }
        params.extend(head.parameters_mut());
        opt.update(params, &grads)?;
        history.losses.push(loss);
        window.push(loss);

        if step % tc.eval_interval == 0 || step == tc.steps {
            let val_acc = if val_episodes.is_empty() {
                f64::NAN
            } else {
                episode_accuracy(model, head, &val_episodes, tc.threads)?
            };
            let point = EvalPoint {
                step,
                train_loss: window.iter().sum::<f64>() / window.len() as f64,
                val_acc,
            };
            window.clear();
            log.record(&point)?;
            history.evals.push(point);
            if !val_acc.is_nan() {
                if best.as_ref().is_none_or(|b| val_acc > b.2) {
                    best = Some((model.clone(), head.clone(), val_acc, step));
                    since_best = 0;
                } else {
                    since_best += 1;
                    if tc.patience > 0 && since_best >= tc.patience {
                        break;
                    }
                }
            }
        }
    }
    if let Some((m, h, acc, step)) = best {
        *model = m;
        *head = h;
        history.best_step = Some(step);
        history.best_val_acc = Some(acc);
    }
    if let Some(dir) = out {
        save_head(dir, model, head)?;
    }
    Ok(history)
}

/// Writes the comparator checkpoint and `head.arct` into `dir`.
pub fn save_head(dir: &Path, model: &ArcModel, head: &FullContextHead) -> Result<()> {
    model.save(dir)?;
    let tensors: Vec<Tensor> = head.parameters().into_iter().map(|(_, t)| t.clone()).collect();
    Ok(ndcore::io::save(dir.join(HEAD_FILE), &tensors)?)
}

pub fn load_head(dir: &Path) -> Result<FullContextHead> {
    FullContextHead::from_tensors(ndcore::io::load(dir.join(HEAD_FILE))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_closed_forms() {
        for y in [0.0, 1.0] {
            let mut tape = Tape::new();
            let p = tape.param(Tensor::vector(&[0.5]));
            let l = bce_loss(&mut tape, p, y).unwrap();
            assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-15);
        }
        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(&[0.8]));
        let l = bce_loss(&mut tape, p, 1.0).unwrap();
        tape.backward(l).unwrap();
        assert!((tape.grad(p).unwrap().item() + 1.25).abs() < 1e-12);
        let mut tape = Tape::new();
        let p = tape.param(Tensor::vector(&[1.0]));
        let l = bce_loss(&mut tape, p, 1.0).unwrap();
        assert!(tape.value(l).item() <= 1e-6);
    }

    #[test]
    fn ce_uniform_is_log_way() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(&[0.05; 20]));
        let l = episode_ce_loss(&mut tape, p, 7).unwrap();
        assert!((tape.value(l).item() - 20f64.ln()).abs() < 1e-12);
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(&[0.0, 1.0]));
        let l = episode_ce_loss(&mut tape, p, 1).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn adam_first_step_and_fixed_point() {
        let mut p = Tensor::vector(&[0.3]);
        let mut opt = OptimizerState::for_params(&[&p], 1e-3);
        opt.update(vec![&mut p], &[Tensor::vector(&[1.0])]).unwrap();
        assert!((p.item() - (0.3 - 1e-3)).abs() < 1e-9);

        let mut q = Tensor::vector(&[1.0, -2.0]);
        let mut opt = OptimizerState::for_params(&[&q], 1e-3);
        opt.update(vec![&mut q], &[Tensor::zeros(&[2])]).unwrap();
        assert_eq!(q.data(), &[1.0, -2.0]);
    }

    #[test]
    fn clipping_rescales_global_norm() {
        // With clipping the first-step moments see g/10; Adam's first step is
        // scale-free, so compare the second moment directly.
        let mut p = Tensor::vector(&[0.0]);
        let mut opt = OptimizerState::for_params(&[&p], 1e-3);
        let norm = opt.update(vec![&mut p], &[Tensor::vector(&[100.0])]).unwrap();
        assert_eq!(norm, 100.0);
        assert!((opt.m[0].item() - 0.1 * 10.0).abs() < 1e-12);
    }

    #[test]
    fn optimizer_rejects_mismatch() {
        let mut p = Tensor::vector(&[0.0, 1.0]);
        let mut opt = OptimizerState::for_params(&[&p], 1e-3);
        assert!(opt.update(vec![&mut p], &[Tensor::zeros(&[3])]).is_err());
    }
}
