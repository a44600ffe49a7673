//! Episodic one-shot classification.
//!
//! An episode is a support set holding one drawing for each of `way`
//! characters plus a test drawing of one of them. Support drawings share one
//! drawer and the test drawing comes from a different drawer.

use std::fmt::Write as _;
use std::io::{self, Write};

use ndcore::{Tape, Tensor, Var};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::controller::{BoundLstm, LstmCell, LstmState};
use crate::data::{ClassId, Dataset, DrawingRef, View};
use crate::error::{ArcError, Result};
use crate::model::{ArcModel, BoundArc, Parameters};

/// Where the support characters of an episode come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpisodeMode {
    /// All from one alphabet.
    Within,
    /// From anywhere in the subset.
    Across,
}

impl EpisodeMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "within" => Ok(Self::Within),
            "across" => Ok(Self::Across),
            other => Err(ArcError::Config(format!("unknown mode `{other}` (expected within or across)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportItem {
    pub image: Tensor,
    pub class: ClassId,
    pub source: DrawingRef,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub support: Vec<SupportItem>,
    pub test: Tensor,
    pub test_source: DrawingRef,
    pub truth: ClassId,
}

impl Episode {
    pub fn way(&self) -> usize {
        self.support.len()
    }

    /// Position of the true class in the support set.
    pub fn truth_index(&self) -> usize {
        self.support
            .iter()
            .position(|s| s.class == self.truth)
            .expect("true class is in the support set")
    }
}

/// Attempts at finding an alphabet and drawer pair with enough shared characters.
const EPISODE_ATTEMPTS: usize = 256;

/// Samples a `way`-way one-shot episode from `view`.
pub fn sample_episode<R: Rng + ?Sized>(
    ds: &Dataset,
    view: &View,
    way: usize,
    mode: EpisodeMode,
    rng: &mut R,
) -> Result<Episode> {
    if way == 0 {
        return Err(ArcError::Config("way must be at least 1".into()));
    }
    // Each pool is a list of (alphabet, character view index).
    let pools: Vec<Vec<(usize, usize)>> = match mode {
        EpisodeMode::Within => view
            .alphabets
            .iter()
            .enumerate()
            .filter(|(_, a)| a.characters.len() >= way)
            .map(|(ai, a)| (0..a.characters.len()).map(|ci| (ai, ci)).collect())
            .collect(),
        EpisodeMode::Across => {
            let all: Vec<(usize, usize)> = view
                .alphabets
                .iter()
                .enumerate()
                .flat_map(|(ai, a)| (0..a.characters.len()).map(move |ci| (ai, ci)))
                .collect();
            if all.len() >= way {
                vec![all]
            } else {
                vec![]
            }
        }
    };
    if pools.is_empty() {
        let best = match mode {
            EpisodeMode::Within => view.alphabets.iter().map(|a| a.characters.len()).max().unwrap_or(0),
            EpisodeMode::Across => view.num_characters(),
        };
        return Err(ArcError::Config(format!(
            "{way}-way episodes need {way} characters in one pool, the largest has {best} (short by {})",
            way - best
        )));
    }

    let drawer_of = |ai: usize, ci: usize, di: usize| {
        let a = &view.alphabets[ai];
        let c = &a.characters[ci];
        ds.alphabets[a.alphabet].characters[c.character].drawings[c.drawings[di]].drawer
    };
    let find = |ai: usize, ci: usize, drawer: u32| {
        let c = &view.alphabets[ai].characters[ci];
        (0..c.drawings.len()).find(|&di| drawer_of(ai, ci, di) == drawer)
    };

    for _ in 0..EPISODE_ATTEMPTS {
        let pool = &pools[rng.random_range(0..pools.len())];
        let mut drawers: Vec<u32> = pool
            .iter()
            .flat_map(|&(ai, ci)| {
                (0..view.alphabets[ai].characters[ci].drawings.len()).map(move |di| drawer_of(ai, ci, di))
            })
            .collect();
        drawers.sort_unstable();
        drawers.dedup();
        if drawers.len() < 2 {
            continue;
        }
        let picked = index::sample(rng, drawers.len(), 2);
        let (support_drawer, test_drawer) = (drawers[picked.index(0)], drawers[picked.index(1)]);
        let candidates: Vec<(usize, usize, usize, usize)> = pool
            .iter()
            .filter_map(|&(ai, ci)| Some((ai, ci, find(ai, ci, support_drawer)?, find(ai, ci, test_drawer)?)))
            .collect();
        if candidates.len() < way {
            continue;
        }
        let mut chosen: Vec<usize> = index::sample(rng, candidates.len(), way).into_vec();
        chosen.shuffle(rng);
        let truth_pos = rng.random_range(0..way);
        let to_ref = |ai: usize, ci: usize, di: usize| {
            let a = &view.alphabets[ai];
            let c = &a.characters[ci];
            DrawingRef {
                alphabet: a.alphabet,
                character: c.character,
                drawing: c.drawings[di],
            }
        };
        let support: Vec<SupportItem> = chosen
            .iter()
            .map(|&k| {
                let (ai, ci, sd, _) = candidates[k];
                let source = to_ref(ai, ci, sd);
                SupportItem {
                    image: ds.image(source).clone(),
                    class: ds.class_of(source),
                    source,
                }
            })
            .collect();
        let (ai, ci, _, td) = candidates[chosen[truth_pos]];
        let test_source = to_ref(ai, ci, td);
        return Ok(Episode {
            truth: support[truth_pos].class,
            support,
            test: ds.image(test_source).clone(),
            test_source,
        });
    }
    Err(ArcError::Config(format!(
        "could not find {way} characters sharing two drawers after {EPISODE_ATTEMPTS} attempts"
    )))
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax_first(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Scores each support item; the prediction is the highest-scoring one.
pub trait OneShotClassifier: Sync {
    fn scores(&self, ep: &Episode) -> Result<Vec<f64>>;

    /// Predicted support index.
    fn classify(&self, ep: &Episode) -> Result<usize> {
        Ok(argmax_first(&self.scores(ep)?))
    }
}

/// Pairwise comparator scores, symmetrised over presentation order.
pub struct NaiveArc<'a> {
    pub model: &'a ArcModel,
}

impl OneShotClassifier for NaiveArc<'_> {
    fn scores(&self, ep: &Episode) -> Result<Vec<f64>> {
        ep.support
            .iter()
            .map(|s| self.model.symmetric_similarity(&ep.test, &s.image))
            .collect()
    }
}

pub fn naive_classify(model: &ArcModel, ep: &Episode) -> Result<ClassId> {
    let idx = NaiveArc { model }.classify(ep)?;
    Ok(ep.support[idx].class)
}

/// Negative Euclidean pixel distance (1-nearest-neighbour).
pub struct PixelKnn;

impl OneShotClassifier for PixelKnn {
    fn scores(&self, ep: &Episode) -> Result<Vec<f64>> {
        Ok(ep
            .support
            .iter()
            .map(|s| {
                -s.image
                    .data()
                    .iter()
                    .zip(ep.test.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect())
    }
}

/// Cosine similarity of raw pixels.
pub struct PixelCosine;

impl OneShotClassifier for PixelCosine {
    fn scores(&self, ep: &Episode) -> Result<Vec<f64>> {
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nt = norm(ep.test.data());
        Ok(ep
            .support
            .iter()
            .map(|s| {
                let dot: f64 = s.image.data().iter().zip(ep.test.data()).map(|(a, b)| a * b).sum();
                let denom = norm(s.image.data()) * nt;
                if denom > 0.0 {
                    dot / denom
                } else {
                    0.0
                }
            })
            .collect())
    }
}

/// Scores the true class 1 and everything else 0. A test hook.
pub struct OracleClassifier;

impl OneShotClassifier for OracleClassifier {
    fn scores(&self, ep: &Episode) -> Result<Vec<f64>> {
        let truth = ep.truth_index();
        Ok((0..ep.way()).map(|j| f64::from(u8::from(j == truth))).collect())
    }
}

/// Uniform random scores, reproducible from the seed and the test drawing.
pub struct RandomScorer {
    pub seed: u64,
}

impl OneShotClassifier for RandomScorer {
    fn scores(&self, ep: &Episode) -> Result<Vec<f64>> {
        let t = ep.test_source;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((t.alphabet as u64) << 40) ^ ((t.character as u64) << 20) ^ t.drawing as u64);
        rng.set_word_pos(ep.support.iter().map(|s| s.class.0 as u128).sum::<u128>() * 16);
        Ok((0..ep.way()).map(|_| rng.random::<f64>()).collect())
    }
}

/// Bidirectional LSTM over the per-support embeddings followed by the scoring
/// map `s = w · tanh(W c + b) + b_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct FullContextHead {
    pub forward: LstmCell,
    pub backward: LstmCell,
    /// `[Hb, 2Hb]`
    pub score_hidden: Tensor,
    /// `[Hb, 1]`
    pub score_hidden_bias: Tensor,
    /// `[1, Hb]`; zero at initialisation so the first distribution is uniform.
    pub score_out: Tensor,
    /// `[1, 1]`
    pub score_out_bias: Tensor,
}

impl Parameters for FullContextHead {
    fn parameters(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("forward.weight", &self.forward.weight),
            ("forward.bias", &self.forward.bias),
            ("backward.weight", &self.backward.weight),
            ("backward.bias", &self.backward.bias),
            ("score.hidden", &self.score_hidden),
            ("score.hidden_bias", &self.score_hidden_bias),
            ("score.out", &self.score_out),
            ("score.out_bias", &self.score_out_bias),
        ]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.forward.weight,
            &mut self.forward.bias,
            &mut self.backward.weight,
            &mut self.backward.bias,
            &mut self.score_hidden,
            &mut self.score_hidden_bias,
            &mut self.score_out,
            &mut self.score_out_bias,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct BoundHead {
    pub forward: BoundLstm,
    pub backward: BoundLstm,
    pub score_hidden: Var,
    pub score_hidden_bias: Var,
    pub score_out: Var,
    pub score_out_bias: Var,
}

impl FullContextHead {
    pub fn new<R: Rng + ?Sized>(embedding: usize, hidden: usize, rng: &mut R) -> Self {
        let score_hidden = crate::controller::orthogonal(hidden, 2 * hidden, rng);
        Self {
            forward: LstmCell::new(embedding, hidden, rng),
            backward: LstmCell::new(embedding, hidden, rng),
            score_hidden,
            score_hidden_bias: Tensor::zeros(&[hidden, 1]),
            score_out: Tensor::zeros(&[1, hidden]),
            score_out_bias: Tensor::zeros(&[1, 1]),
        }
    }

    pub fn embedding_size(&self) -> usize {
        self.forward.input_size
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundHead {
        let leaf = |t: &mut Tape, x: &Tensor| if trainable { t.param(x.clone()) } else { t.constant(x.clone()) };
        BoundHead {
            forward: self.forward.bind(tape, trainable),
            backward: self.backward.bind(tape, trainable),
            score_hidden: leaf(tape, &self.score_hidden),
            score_hidden_bias: leaf(tape, &self.score_hidden_bias),
            score_out: leaf(tape, &self.score_out),
            score_out_bias: leaf(tape, &self.score_out_bias),
        }
    }

    pub fn from_tensors(mut ts: Vec<Tensor>) -> Result<Self> {
        if ts.len() != 8 {
            return Err(ArcError::Config(format!("full-context head needs 8 tensors, got {}", ts.len())));
        }
        let mut it = ts.drain(..);
        let mut next = || it.next().expect("length checked");
        let forward = LstmCell::from_tensors(next(), next())?;
        let backward = LstmCell::from_tensors(next(), next())?;
        let head = Self {
            forward,
            backward,
            score_hidden: next(),
            score_hidden_bias: next(),
            score_out: next(),
            score_out_bias: next(),
        };
        let hb = head.forward.hidden;
        let ok = head.backward.hidden == hb
            && head.backward.input_size == head.forward.input_size
            && head.score_hidden.shape() == [hb, 2 * hb]
            && head.score_hidden_bias.shape() == [hb, 1]
            && head.score_out.shape() == [1, hb]
            && head.score_out_bias.shape() == [1, 1];
        if !ok {
            return Err(ArcError::Config("full-context head tensors have inconsistent shapes".into()));
        }
        Ok(head)
    }
}

impl BoundHead {
    pub fn vars(&self) -> Vec<Var> {
        vec![
            self.forward.weight,
            self.forward.bias,
            self.backward.weight,
            self.backward.bias,
            self.score_hidden,
            self.score_hidden_bias,
            self.score_out,
            self.score_out_bias,
        ]
    }

    /// One score per embedding, shaped `[way]`. Embeddings are `[H, 1]`.
    pub fn scores(&self, tape: &mut Tape, embeddings: &[Var]) -> Result<Var> {
        let way = embeddings.len();
        if way == 0 {
            return Err(ArcError::Config("full-context head needs at least one embedding".into()));
        }
        let hb = self.forward.hidden;
        let mut fwd = Vec::with_capacity(way);
        let mut state = LstmState::zeros(tape, hb);
        for &e in embeddings {
            state = self.forward.step(tape, e, state)?;
            fwd.push(state.h);
        }
        let mut bwd = vec![fwd[0]; way];
        let mut state = LstmState::zeros(tape, hb);
        for j in (0..way).rev() {
            state = self.backward.step(tape, embeddings[j], state)?;
            bwd[j] = state.h;
        }
        let mut scores = Vec::with_capacity(way);
        for j in 0..way {
            let context = tape.concat(&[fwd[j], bwd[j]], 0)?;
            let z = tape.matmul(self.score_hidden, context)?;
            let z = tape.add(z, self.score_hidden_bias)?;
            let z = tape.tanh(z);
            let s = tape.matmul(self.score_out, z)?;
            scores.push(tape.add(s, self.score_out_bias)?);
        }
        let stacked = tape.concat(&scores, 0)?;
        Ok(tape.reshape(stacked, &[way])?)
    }
}

/// Relative embedding of the test image against one support image: the
/// final controller state averaged over both presentation orders.
pub fn relative_embedding(tape: &mut Tape, arc: &BoundArc, test: Var, support: Var) -> Result<Var> {
    let first = arc.run(tape, support, test)?.embedding();
    let second = arc.run(tape, test, support)?.embedding();
    let sum = tape.add(first, second)?;
    Ok(tape.mul_scalar(sum, 0.5))
}

/// Distribution over the support set, as a `[way]` node on `tape`.
pub fn full_context_forward(tape: &mut Tape, arc: &BoundArc, head: &BoundHead, ep: &Episode) -> Result<Var> {
    let test = tape.constant(ep.test.clone());
    let mut embeddings = Vec::with_capacity(ep.way());
    for s in &ep.support {
        let img = tape.constant(s.image.clone());
        embeddings.push(relative_embedding(tape, arc, test, img)?);
    }
    let scores = head.scores(tape, &embeddings)?;
    Ok(tape.softmax(scores)?)
}

/// Probability of each support class.
pub fn full_context_classify(model: &ArcModel, head: &FullContextHead, ep: &Episode) -> Result<Vec<f64>> {
    for s in &ep.support {
        model.check_image(&s.image)?;
    }
    model.check_image(&ep.test)?;
    if head.embedding_size() != model.config.hidden {
        return Err(ArcError::Config(format!(
            "head expects {}-dim embeddings, model produces {}",
            head.embedding_size(),
            model.config.hidden
        )));
    }
    let mut tape = Tape::new();
    let arc = model.bind(&mut tape, false);
    let bound = head.bind(&mut tape, false);
    let p = full_context_forward(&mut tape, &arc, &bound, ep)?;
    Ok(tape.value(p).data().to_vec())
}

pub struct FullContextArc<'a> {
    pub model: &'a ArcModel,
    pub head: &'a FullContextHead,
}

impl OneShotClassifier for FullContextArc<'_> {
    fn scores(&self, ep: &Episode) -> Result<Vec<f64>> {
        full_context_classify(self.model, self.head, ep)
    }
}

/// Two-sided 95% Wilson score interval for `k` successes out of `n`.
pub fn wilson_interval(k: usize, n: usize) -> (f64, f64) {
    const Z: f64 = 1.959963984540054;
    if n == 0 {
        return (0.0, 1.0);
    }
    let n_f = n as f64;
    let p = k as f64 / n_f;
    let z2 = Z * Z;
    let denom = 1.0 + z2 / n_f;
    let centre = (p + z2 / (2.0 * n_f)) / denom;
    let half = Z * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EpisodeRecord {
    pub index: usize,
    pub predicted: ClassId,
    pub truth: ClassId,
}

impl EpisodeRecord {
    pub fn correct(&self) -> bool {
        self.predicted == self.truth
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub records: Vec<EpisodeRecord>,
    pub correct: usize,
    pub accuracy: f64,
    pub interval: (f64, f64),
}

impl EvalReport {
    pub fn from_records(records: Vec<EpisodeRecord>) -> Self {
        let correct = records.iter().filter(|r| r.correct()).count();
        let n = records.len();
        Self {
            accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
            interval: wilson_interval(correct, n),
            correct,
            records,
        }
    }

    pub fn summary_line(&self) -> String {
        format!(
            "accuracy {:.4} ({}/{}), 95% Wilson interval [{:.4}, {:.4}]",
            self.accuracy,
            self.correct,
            self.records.len(),
            self.interval.0,
            self.interval.1
        )
    }

    /// One `episode_idx, predicted, true, correct` line per episode, then the summary.
    pub fn write_text<W: Write>(&self, w: &mut W) -> io::Result<()> {
        for r in &self.records {
            writeln!(w, "{}, {}, {}, {}", r.index, r.predicted.0, r.truth.0, u8::from(r.correct()))?;
        }
        writeln!(w, "# {}", self.summary_line())
    }

    /// Machine-readable `key=value` summary.
    pub fn summary_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "episodes={}", self.records.len());
        let _ = writeln!(s, "correct={}", self.correct);
        let _ = writeln!(s, "accuracy={}", self.accuracy);
        let _ = writeln!(s, "ci95_low={}", self.interval.0);
        let _ = writeln!(s, "ci95_high={}", self.interval.1);
        s
    }
}

/// Per-episode random stream derived from `(seed, episode index)`.
pub fn episode_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Evaluates `classifier` on `episodes` episodes drawn by `sample`.
///
/// Episode `i` is drawn from [`episode_rng`]`(seed, i)`, so the result does
/// not depend on `threads`.
pub fn evaluate_oneshot<C, S>(classifier: &C, episodes: usize, seed: u64, threads: usize, sample: S) -> Result<EvalReport>
where
    C: OneShotClassifier + ?Sized,
    S: Fn(&mut ChaCha8Rng) -> Result<Episode> + Sync,
{
    if episodes == 0 {
        return Err(ArcError::Config("episodes must be at least 1".into()));
    }
    let run = |i: usize| -> Result<EpisodeRecord> {
        let mut rng = episode_rng(seed, i);
        let ep = sample(&mut rng)?;
        let idx = classifier.classify(&ep)?;
        Ok(EpisodeRecord {
            index: i,
            predicted: ep.support[idx].class,
            truth: ep.truth,
        })
    };
    let records: Result<Vec<EpisodeRecord>> = if threads <= 1 {
        (0..episodes).map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| ArcError::Config(e.to_string()))?;
        pool.install(|| (0..episodes).into_par_iter().map(run).collect())
    };
    Ok(EvalReport::from_records(records?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_and_order() {
        assert_eq!(argmax_first(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(argmax_first(&[0.5, 0.5, 0.5]), 0);
        assert_eq!(argmax_first(&[0.2, 0.7, 0.7]), 1);
    }

    #[test]
    fn wilson_known_values() {
        // 50/100: centre 0.5, half-width 0.0960.
        let (lo, hi) = wilson_interval(50, 100);
        assert!((lo - 0.4038).abs() < 1e-4 && (hi - 0.5962).abs() < 1e-4);
        let (lo, hi) = wilson_interval(10, 10);
        assert!((hi - 1.0).abs() < 1e-12 && (lo - 10.0 / (10.0 + 1.959963984540054f64.powi(2))).abs() < 1e-12);
    }

    #[test]
    fn report_format() {
        let r = EvalReport::from_records(vec![
            EpisodeRecord { index: 0, predicted: ClassId(3), truth: ClassId(3) },
            EpisodeRecord { index: 1, predicted: ClassId(1), truth: ClassId(2) },
        ]);
        let mut buf = Vec::new();
        r.write_text(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "0, 3, 3, 1");
        assert_eq!(lines[1], "1, 1, 2, 0");
        assert!(lines[2].starts_with("# accuracy 0.5000"));
        assert!(r.summary_kv().contains("accuracy=0.5\n"));
    }
}
