//! The comparator: alternate glimpses between two images, feed them through
//! the controller, read similarity off the final hidden state.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndcore::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::attention::{attend, Glimpse, GlimpseWindow};
use crate::controller::{BoundLstm, BoundProjection, GlimpseProjection, LstmCell, LstmState};
use crate::error::{ArcError, Result};

pub const PARAMS_FILE: &str = "params.arct";
pub const CONFIG_FILE: &str = "config.txt";

/// Structural hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArcConfig {
    /// Image side `S`.
    pub side: usize,
    /// Glimpse side `N`.
    pub glimpse: usize,
    /// Glimpses per image `g`; the controller runs `2g` steps.
    pub glimpses: usize,
    /// Controller hidden size `H`.
    pub hidden: usize,
    /// Adds a bias to the glimpse projection.
    pub glimpse_bias: bool,
}

impl Default for ArcConfig {
    fn default() -> Self {
        Self::replication()
    }
}

impl ArcConfig {
    /// 32x32 images, 4x4 glimpses, 8 glimpses per image, H = 512.
    pub fn replication() -> Self {
        Self {
            side: 32,
            glimpse: 4,
            glimpses: 8,
            hidden: 512,
            glimpse_bias: false,
        }
    }

    /// Desk-scale setting used by the toy runs.
    pub fn toy() -> Self {
        Self {
            side: 16,
            glimpse: 4,
            glimpses: 4,
            hidden: 64,
            glimpse_bias: false,
        }
    }

    pub fn steps(&self) -> usize {
        2 * self.glimpses
    }

    pub fn validate(&self) -> Result<()> {
        if self.glimpse == 0 || self.side < self.glimpse {
            return Err(ArcError::Config(format!(
                "need S >= N >= 1, got S = {}, N = {}",
                self.side, self.glimpse
            )));
        }
        if self.glimpses == 0 || self.hidden == 0 {
            return Err(ArcError::Config("glimpses and hidden size must be positive".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "S={}\nN={}\nglimpses={}\nhidden={}\nglimpse_bias={}\n",
            self.side, self.glimpse, self.glimpses, self.hidden, self.glimpse_bias
        )
    }

    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| -> Result<usize> {
            map.get(k)
                .ok_or_else(|| ArcError::Config(format!("checkpoint config missing `{k}`")))?
                .parse()
                .map_err(|_| ArcError::Config(format!("checkpoint config `{k}` is not an integer")))
        };
        let cfg = Self {
            side: get("S")?,
            glimpse: get("N")?,
            glimpses: get("glimpses")?,
            hidden: get("hidden")?,
            glimpse_bias: map.get("glimpse_bias").is_some_and(|v| v == "true"),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses `key=value` lines; blank lines and `#` comments are skipped.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| ArcError::Config(format!("line {}: expected key=value, got `{line}`", n + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

/// Anything with an ordered list of trainable tensors.
pub trait Parameters {
    fn parameters(&self) -> Vec<(&'static str, &Tensor)>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;
}

/// Affine map `H -> 1` followed by the logistic function.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityHead {
    /// `[1, H]`
    pub weight: Tensor,
    /// `[1, 1]`
    pub bias: Tensor,
}

/// Every learnable parameter of the comparator plus its structure.
#[derive(Debug, Clone, PartialEq)]
pub struct ArcModel {
    pub config: ArcConfig,
    pub controller: LstmCell,
    pub projection: GlimpseProjection,
    pub head: SimilarityHead,
}

impl Parameters for ArcModel {
    fn parameters(&self) -> Vec<(&'static str, &Tensor)> {
        let mut out = vec![
            ("controller.weight", &self.controller.weight),
            ("controller.bias", &self.controller.bias),
            ("projection.weight", &self.projection.weight),
        ];
        if let Some(b) = &self.projection.bias {
            out.push(("projection.bias", b));
        }
        out.push(("head.weight", &self.head.weight));
        out.push(("head.bias", &self.head.bias));
        out
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.controller.weight,
            &mut self.controller.bias,
            &mut self.projection.weight,
        ];
        if let Some(b) = &mut self.projection.bias {
            out.push(b);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }
}

/// Which image of the pair a step attends to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Presented {
    First,
    Second,
}

impl Presented {
    pub fn at(t: usize) -> Self {
        if t.is_multiple_of(2) {
            Presented::First
        } else {
            Presented::Second
        }
    }
}

/// Image attended at step `t` of a `2g`-step comparison: `x_a` on even steps.
pub fn present<'a>(t: usize, glimpses: usize, pair: (&'a Tensor, &'a Tensor)) -> Result<&'a Tensor> {
    if t >= 2 * glimpses {
        return Err(ArcError::Index {
            index: t,
            limit: 2 * glimpses,
        });
    }
    Ok(match Presented::at(t) {
        Presented::First => pair.0,
        Presented::Second => pair.1,
    })
}

/// One recorded step of a comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceStep {
    pub t: usize,
    pub image: Presented,
    pub omega: [f64; 3],
    pub window: GlimpseWindow,
    /// `h_{t+1}`, the state after this step.
    pub hidden: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTrace {
    pub steps: Vec<TraceStep>,
    pub similarity: f64,
}

/// Output of [`ArcModel::compare`].
#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub similarity: f64,
    /// Final hidden state `h_{2g}`, shaped `[H]`.
    pub embedding: Tensor,
    pub trace: Option<ComparisonTrace>,
}

/// An [`ArcModel`] whose parameters live on a tape.
#[derive(Debug, Clone)]
pub struct BoundArc {
    pub config: ArcConfig,
    pub controller: BoundLstm,
    pub projection: BoundProjection,
    pub head_weight: Var,
    pub head_bias: Var,
}

/// Every node produced by unrolling a comparison on a tape.
#[derive(Debug, Clone)]
pub struct Unrolled {
    pub omegas: Vec<Var>,
    pub glimpses: Vec<Glimpse>,
    /// `h_1 ..= h_{2g}`, each `[H, 1]`.
    pub hidden: Vec<Var>,
    pub logit: Var,
    pub similarity: Var,
}

impl Unrolled {
    pub fn embedding(&self) -> Var {
        *self.hidden.last().expect("at least one step")
    }
}

impl BoundArc {
    /// Tape nodes in the same order as [`Parameters::parameters`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.controller.weight, self.controller.bias, self.projection.weight];
        out.extend(self.projection.bias);
        out.push(self.head_weight);
        out.push(self.head_bias);
        out
    }

    /// Runs all `2g` steps over the `[S, S]` images `a` and `b`.
    pub fn run(&self, tape: &mut Tape, a: Var, b: Var) -> Result<Unrolled> {
        let cfg = self.config;
        let mut state = LstmState::zeros(tape, cfg.hidden);
        let steps = cfg.steps();
        let mut omegas = Vec::with_capacity(steps);
        let mut glimpses = Vec::with_capacity(steps);
        let mut hidden = Vec::with_capacity(steps);
        for t in 0..steps {
            let image = match Presented::at(t) {
                Presented::First => a,
                Presented::Second => b,
            };
            let omega = self.projection.project(tape, state.h)?;
            let glimpse = attend(tape, image, omega, cfg.glimpse)?;
            state = self.controller.step(tape, glimpse.patch, state)?;
            omegas.push(omega);
            glimpses.push(glimpse);
            hidden.push(state.h);
        }
        let logit = tape.matmul(self.head_weight, state.h)?;
        let logit = tape.add(logit, self.head_bias)?;
        let similarity = tape.sigmoid(logit);
        Ok(Unrolled {
            omegas,
            glimpses,
            hidden,
            logit,
            similarity,
        })
    }
}

impl ArcModel {
    pub fn new<R: Rng + ?Sized>(config: ArcConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let inputs = config.glimpse * config.glimpse;
        let controller = LstmCell::new(inputs, config.hidden, rng);
        let projection = GlimpseProjection::new(config.hidden, config.glimpse_bias, rng);
        let scale = 1.0 / (config.hidden as f64).sqrt();
        let weight = (0..config.hidden)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let head = SimilarityHead {
            weight: Tensor::new(&[1, config.hidden], weight)?,
            bias: Tensor::zeros(&[1, 1]),
        };
        Ok(Self {
            config,
            controller,
            projection,
            head,
        })
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundArc {
        let leaf = |t: &mut Tape, x: &Tensor| if trainable { t.param(x.clone()) } else { t.constant(x.clone()) };
        BoundArc {
            config: self.config,
            controller: self.controller.bind(tape, trainable),
            projection: self.projection.bind(tape, trainable),
            head_weight: leaf(tape, &self.head.weight),
            head_bias: leaf(tape, &self.head.bias),
        }
    }

    /// Checks shape and finiteness of an input image.
    pub fn check_image(&self, image: &Tensor) -> Result<()> {
        let s = self.config.side;
        if image.shape() != [s, s] {
            return Err(ndcore::NdError::Shape {
                op: "compare",
                lhs: vec![s, s],
                rhs: image.shape().to_vec(),
            }
            .into());
        }
        if !image.is_finite() {
            return Err(ArcError::Numeric("image"));
        }
        Ok(())
    }

    /// Compares `x_a` (seen first) with `x_b`.
    pub fn compare(&self, x_a: &Tensor, x_b: &Tensor, with_trace: bool) -> Result<Comparison> {
        self.check_image(x_a)?;
        self.check_image(x_b)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let a = tape.constant(x_a.clone());
        let b = tape.constant(x_b.clone());
        let run = bound.run(&mut tape, a, b)?;
        let similarity = tape.value(run.similarity).item();
        let h = self.config.hidden;
        let embedding = tape.value(run.embedding()).reshaped(&[h])?;
        let trace = with_trace.then(|| {
            let steps = (0..self.config.steps())
                .map(|t| {
                    let om = tape.value(run.omegas[t]).data();
                    TraceStep {
                        t,
                        image: Presented::at(t),
                        omega: [om[0], om[1], om[2]],
                        window: run.glimpses[t].params.window(&tape),
                        hidden: tape.value(run.hidden[t]).reshaped(&[h]).expect("hidden shape"),
                    }
                })
                .collect();
            ComparisonTrace { steps, similarity }
        });
        Ok(Comparison {
            similarity,
            embedding,
            trace,
        })
    }

    /// Average of both presentation orders; symmetric in its arguments.
    pub fn symmetric_similarity(&self, x: &Tensor, y: &Tensor) -> Result<f64> {
        let forward = self.compare(x, y, false)?.similarity;
        let backward = self.compare(y, x, false)?.similarity;
        Ok(0.5 * (forward + backward))
    }

    /// Hidden states `h_2, h_4, ..., h_{2g}` for each pair.
    pub fn probe_states(&self, pairs: &[(&Tensor, &Tensor)]) -> Result<Vec<Vec<Tensor>>> {
        pairs
            .iter()
            .map(|(a, b)| {
                let trace = self.compare(a, b, true)?.trace.expect("trace requested");
                Ok(trace
                    .steps
                    .iter()
                    .filter(|s| (s.t + 1) % 2 == 0)
                    .map(|s| s.hidden.clone())
                    .collect())
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(ArcError::io(dir))?;
        let tensors: Vec<Tensor> = self.parameters().into_iter().map(|(_, t)| t.clone()).collect();
        ndcore::io::save(dir.join(PARAMS_FILE), &tensors)?;
        let mut text = self.config.to_text();
        let names: Vec<&str> = self.parameters().into_iter().map(|(n, _)| n).collect();
        let _ = writeln!(text, "params={}", names.join(","));
        fs::write(dir.join(CONFIG_FILE), text).map_err(ArcError::io(dir.join(CONFIG_FILE)))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join(CONFIG_FILE);
        let text = fs::read_to_string(&cfg_path).map_err(ArcError::io(&cfg_path))?;
        let config = ArcConfig::from_map(&parse_key_values(&text)?)?;
        let mut tensors = ndcore::io::load(dir.join(PARAMS_FILE))?.into_iter();
        let mut next = |what: &str| {
            tensors
                .next()
                .ok_or_else(|| ArcError::Config(format!("checkpoint is missing `{what}`")))
        };
        let controller = LstmCell::from_tensors(next("controller.weight")?, next("controller.bias")?)?;
        let projection = GlimpseProjection {
            weight: next("projection.weight")?,
            bias: if config.glimpse_bias {
                Some(next("projection.bias")?)
            } else {
                None
            },
        };
        let head = SimilarityHead {
            weight: next("head.weight")?,
            bias: next("head.bias")?,
        };
        let model = Self {
            config,
            controller,
            projection,
            head,
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let c = self.config;
        let h = c.hidden;
        let ok = self.controller.hidden == h
            && self.controller.input_size == c.glimpse * c.glimpse
            && self.projection.weight.shape() == [3, h]
            && self.projection.bias.as_ref().is_none_or(|b| b.shape() == [3, 1])
            && self.head.weight.shape() == [1, h]
            && self.head.bias.shape() == [1, 1];
        if ok {
            Ok(())
        } else {
            Err(ArcError::Config(format!(
                "checkpoint tensors do not match S={}, N={}, H={}",
                c.side, c.glimpse, h
            )))
        }
    }
}
