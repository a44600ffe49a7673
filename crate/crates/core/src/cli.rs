//! The `arc` command line.
//!
//! Every flag may also be given in a `key=value` file passed with
//! `--config`; flags on the command line win.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{
    load_dataset, load_image, make_toy_dataset, save_packed, AugmentationPolicy, Dataset, Layout, Split, SplitScheme,
    Subset, ToySpec, MANIFEST_FILE,
};
use crate::error::{ArcError, Result};
use crate::model::{parse_key_values, ArcConfig, ArcModel};
use crate::oneshot::{
    evaluate_oneshot, sample_episode, EpisodeMode, EpisodeRecord, EvalReport, FullContextArc, FullContextHead, NaiveArc,
    OneShotClassifier, OracleClassifier, PixelCosine, PixelKnn, RandomScorer,
};
use crate::training::{
    load_head, load_probes, sample_pairs, save_probes, train_full_context, train_probe_classifiers, train_verification,
    FullContextConfig, ProbeConfig, TrainConfig, PROBES_FILE,
};
use crate::viz::{write_frames, FRAME_SCALE};

pub const REPORT_FILE: &str = "report.txt";
pub const SUMMARY_FILE: &str = "summary.txt";

#[derive(Debug, Parser)]
#[command(name = "arc", about = "Attentive recurrent comparators: training, evaluation and attention traces")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pack an image tree (or a generated toy set) into the binary layout.
    Prepare(Options),
    /// Train a comparator, a full-context head, or glimpse probes.
    Train {
        kind: TrainKind,
        #[command(flatten)]
        opts: Options,
    },
    /// Evaluate a checkpoint or a pixel baseline.
    Eval {
        #[arg(id = "evaluator", value_name = "MODE")]
        evaluator: EvalMode,
        #[command(flatten)]
        opts: Options,
    },
    /// Write per-step attention frames for one pair of images.
    Visualize {
        #[arg(long)]
        image_a: PathBuf,
        #[arg(long)]
        image_b: PathBuf,
        #[command(flatten)]
        opts: Options,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainKind {
    Verification,
    Fullcontext,
    Probes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalMode {
    Verification,
    OneshotNaive,
    OneshotFullcontext,
    BaselineKnn,
    BaselineCosine,
    #[value(hide = true)]
    Oracle,
    #[value(hide = true)]
    Random,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Options {
    /// Dataset root: a packed directory or an image tree.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generate a toy dataset instead, e.g. `classes=20,samples=20,S=16,seed=0`.
    #[arg(long, num_args = 0..=1, default_missing_value = "")]
    pub toy: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Checkpoint directory to start from or evaluate.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "S")]
    pub side: Option<usize>,
    #[arg(long = "N")]
    pub glimpse: Option<usize>,
    #[arg(long)]
    pub glimpses: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// 3020, 301010, across or custom.
    #[arg(long)]
    pub split: Option<String>,
    /// within or across.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub way: Option<usize>,
    #[arg(long)]
    pub episodes: Option<usize>,
    /// train, validation or test.
    #[arg(long)]
    pub subset: Option<String>,
    #[arg(long)]
    pub threads: Option<usize>,
    /// none or moderate.
    #[arg(long)]
    pub augment: Option<String>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub eval_interval: Option<usize>,
    /// Hidden size of each direction of the full-context head.
    #[arg(long)]
    pub head_hidden: Option<usize>,
    /// Keep the comparator fixed while training the full-context head.
    #[arg(long)]
    pub freeze_arc: bool,
}

/// Flag values merged with the optional config file.
struct Settings {
    opts: Options,
    file: BTreeMap<String, String>,
}

impl Settings {
    fn new(opts: Options) -> Result<Self> {
        let file = match &opts.config {
            Some(path) => parse_key_values(&fs::read_to_string(path).map_err(ArcError::io(path))?)?,
            None => BTreeMap::new(),
        };
        Ok(Self { opts, file })
    }

    fn get<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>> {
        if flag.is_some() {
            return Ok(flag);
        }
        match self.file.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| ArcError::Config(format!("config key `{key}` has invalid value `{v}`"))),
        }
    }

    fn seed(&self) -> Result<u64> {
        Ok(self.get(self.opts.seed, "seed")?.unwrap_or(0))
    }

    fn path(&self, flag: &Option<PathBuf>, key: &str) -> Option<PathBuf> {
        flag.clone().or_else(|| self.file.get(key).map(PathBuf::from))
    }

    fn require_path(&self, flag: &Option<PathBuf>, key: &str) -> Result<PathBuf> {
        self.path(flag, key)
            .ok_or_else(|| ArcError::Config(format!("--{key} is required for this command")))
    }

    fn toy(&self) -> Option<String> {
        self.opts.toy.clone().or_else(|| self.file.get("toy").cloned())
    }

    fn is_toy(&self) -> bool {
        self.toy().is_some()
    }
}

fn parse_toy(spec: &str, seed: u64) -> Result<ToySpec> {
    let mut toy = ToySpec::new(20, 20, 16, seed);
    for item in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| ArcError::Config(format!("toy spec item `{item}` is not key=value")))?;
        let bad = || ArcError::Config(format!("toy spec `{k}` has invalid value `{v}`"));
        match k {
            "classes" => toy.classes = v.parse().map_err(|_| bad())?,
            "samples" => toy.samples_per_class = v.parse().map_err(|_| bad())?,
            "S" | "side" => toy.side = v.parse().map_err(|_| bad())?,
            "seed" => toy.seed = v.parse().map_err(|_| bad())?,
            "alphabet" => toy.alphabet_size = v.parse().map_err(|_| bad())?,
            "jitter" => toy.jitter = v.parse().map_err(|_| bad())?,
            "shared" => toy.shared = v.parse().map_err(|_| bad())?,
            _ => return Err(ArcError::Config(format!("unknown toy spec key `{k}`"))),
        }
    }
    Ok(toy)
}

fn load_source(s: &Settings) -> Result<Dataset> {
    if let Some(spec) = s.toy() {
        return make_toy_dataset(parse_toy(&spec, s.seed()?)?);
    }
    let root = s.require_path(&s.opts.data, "data")?;
    let layout = if root.join(MANIFEST_FILE).is_file() {
        Layout::Packed
    } else {
        Layout::ImageTree {
            side: s.get(s.opts.side, "S")?.unwrap_or(ArcConfig::replication().side),
        }
    };
    let (ds, warnings) = load_dataset(&root, layout)?;
    for w in warnings {
        eprintln!("warning: {}: {}", w.path.display(), w.message);
    }
    Ok(ds)
}

fn model_config(s: &Settings, ds_side: usize) -> Result<ArcConfig> {
    let mut cfg = if s.is_toy() { ArcConfig::toy() } else { ArcConfig::replication() };
    cfg.side = s.get(s.opts.side, "S")?.unwrap_or(ds_side);
    if let Some(n) = s.get(s.opts.glimpse, "N")? {
        cfg.glimpse = n;
    }
    if let Some(g) = s.get(s.opts.glimpses, "glimpses")? {
        cfg.glimpses = g;
    }
    if let Some(h) = s.get(s.opts.hidden, "hidden")? {
        cfg.hidden = h;
    }
    if cfg.side != ds_side {
        return Err(ArcError::Config(format!("--S {} does not match the dataset's {ds_side}x{ds_side} images", cfg.side)));
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Without `--split`, datasets lacking the background/evaluation structure
/// fall back to the drawer-level custom split.
fn split_scheme(s: &Settings, ds: &Dataset) -> Result<SplitScheme> {
    let ungrouped = ds.alphabets.iter().all(|a| a.group == crate::data::Group::Unspecified);
    match s.get(s.opts.split.clone(), "split")? {
        Some(name) => SplitScheme::parse(&name),
        None if s.is_toy() || (ungrouped && ds.alphabets.len() != 50) => SplitScheme::parse("custom"),
        None => Ok(SplitScheme::BackgroundEval),
    }
}

fn train_config(s: &Settings, ds: &Dataset) -> Result<TrainConfig> {
    let seed = s.seed()?;
    let mut cfg = if s.is_toy() { TrainConfig::toy(seed) } else { TrainConfig::replication(seed) };
    cfg.split = split_scheme(s, ds)?;
    if let Some(v) = s.get(s.opts.steps, "steps")? {
        cfg.steps = v;
    }
    if let Some(v) = s.get(s.opts.lr, "lr")? {
        cfg.lr = v;
    }
    if let Some(v) = s.get(s.opts.batch, "batch")? {
        cfg.batch = v;
    }
    if let Some(v) = s.get(s.opts.threads, "threads")? {
        cfg.threads = v;
    }
    if let Some(v) = s.get(s.opts.patience, "patience")? {
        cfg.patience = v;
    }
    if let Some(v) = s.get(s.opts.eval_interval, "eval_interval")? {
        cfg.eval_interval = v;
    }
    if let Some(name) = s.get(s.opts.augment.clone(), "augment")? {
        cfg.augmentation = match name.as_str() {
            "none" => AugmentationPolicy::none(),
            "moderate" => AugmentationPolicy::moderate(s.get(s.opts.side, "S")?.unwrap_or(32)),
            other => return Err(ArcError::Config(format!("unknown augmentation `{other}` (expected none or moderate)"))),
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn episode_mode(s: &Settings) -> Result<EpisodeMode> {
    EpisodeMode::parse(&s.get(s.opts.mode.clone(), "mode")?.unwrap_or_else(|| "within".into()))
}

fn way(s: &Settings) -> Result<usize> {
    Ok(s.get(s.opts.way, "way")?.unwrap_or(if s.is_toy() { 5 } else { 20 }))
}

fn subset(s: &Settings) -> Result<Subset> {
    match s.get(s.opts.subset.clone(), "subset")?.as_deref().unwrap_or("test") {
        "train" => Ok(Subset::Train),
        "validation" => Ok(Subset::Validation),
        "test" => Ok(Subset::Test),
        other => Err(ArcError::Config(format!("unknown subset `{other}` (expected train, validation or test)"))),
    }
}

fn load_checkpoint(s: &Settings, ds: &Dataset) -> Result<(PathBuf, ArcModel)> {
    let dir = s.require_path(&s.opts.ckpt, "ckpt")?;
    let model = ArcModel::load(&dir)?;
    if model.config.side != ds.side {
        return Err(ArcError::Config(format!(
            "checkpoint expects {0}x{0} images, dataset has {1}x{1}",
            model.config.side, ds.side
        )));
    }
    Ok((dir, model))
}

fn cmd_prepare(s: &Settings) -> Result<()> {
    let out = s.require_path(&s.opts.out, "out")?;
    let ds = load_source(s)?;
    save_packed(&ds, &out)?;
    println!(
        "packed {} alphabets, {} characters, {} drawings into {}",
        ds.alphabets.len(),
        ds.num_characters(),
        ds.num_drawings(),
        out.display()
    );
    Ok(())
}

fn cmd_train(kind: TrainKind, s: &Settings) -> Result<()> {
    let out = s.require_path(&s.opts.out, "out")?;
    let ds = load_source(s)?;
    let seed = s.seed()?;
    match kind {
        TrainKind::Verification => {
            let cfg = train_config(s, &ds)?;
            let mut model = ArcModel::new(model_config(s, ds.side)?, &mut ChaCha8Rng::seed_from_u64(seed))?;
            let history = train_verification(&mut model, &ds, &cfg, Some(&out))?;
            report_history("verification", &history, &out);
        }
        TrainKind::Fullcontext => {
            let train = train_config(s, &ds)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut model = match s.path(&s.opts.ckpt, "ckpt") {
                Some(_) => load_checkpoint(s, &ds)?.1,
                None => ArcModel::new(model_config(s, ds.side)?, &mut rng)?,
            };
            let hb = s.get(s.opts.head_hidden, "head_hidden")?.unwrap_or(model.config.hidden);
            let mut head = FullContextHead::new(model.config.hidden, hb, &mut rng);
            let cfg = FullContextConfig {
                train,
                way: way(s)?,
                mode: episode_mode(s)?,
                freeze_arc: s.opts.freeze_arc || s.file.get("freeze_arc").is_some_and(|v| v == "true"),
            };
            let history = train_full_context(&mut model, &mut head, &ds, &cfg, Some(&out))?;
            report_history("full-context", &history, &out);
        }
        TrainKind::Probes => {
            let (_, model) = load_checkpoint(s, &ds)?;
            let mut cfg = ProbeConfig::new(seed, split_scheme(s, &ds)?);
            if let Some(t) = s.get(s.opts.threads, "threads")? {
                cfg.threads = t;
            }
            if let Some(n) = s.get(s.opts.episodes, "episodes")? {
                cfg.test_pairs = n;
            }
            let report = train_probe_classifiers(&model, &ds, &cfg)?;
            fs::create_dir_all(&out).map_err(ArcError::io(&out))?;
            save_probes(&out.join(PROBES_FILE), &report.probes)?;
            let mut text = String::from("# k, accuracy\n");
            for (k, acc) in report.accuracies.iter().enumerate() {
                text.push_str(&format!("{}, {acc:.6}\n", k + 1));
                println!("glimpses per image {}: probe accuracy {acc:.4}", k + 1);
            }
            let path = out.join("probes.txt");
            fs::write(&path, text).map_err(ArcError::io(&path))?;
        }
    }
    Ok(())
}

fn report_history(what: &str, h: &crate::training::TrainHistory, out: &Path) {
    if let Some(last) = h.evals.last() {
        println!("{what}: {} steps, last train loss {:.4}, val acc {:.4}", last.step, last.train_loss, last.val_acc);
    } else {
        println!("{what}: no training steps run");
    }
    if let (Some(step), Some(acc)) = (h.best_step, h.best_val_acc) {
        println!("kept checkpoint from step {step} (val acc {acc:.4})");
    }
    println!("checkpoint written to {}", out.display());
}

fn write_report(report: &EvalReport, out: Option<&Path>) -> Result<()> {
    println!("{}", report.summary_line());
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(ArcError::io(dir))?;
        let path = dir.join(REPORT_FILE);
        let mut buf = Vec::new();
        report.write_text(&mut buf).map_err(ArcError::io(&path))?;
        fs::write(&path, buf).map_err(ArcError::io(&path))?;
        let path = dir.join(SUMMARY_FILE);
        fs::write(&path, report.summary_kv()).map_err(ArcError::io(&path))?;
    }
    Ok(())
}

fn cmd_eval(mode: EvalMode, s: &Settings) -> Result<()> {
    let ds = load_source(s)?;
    let seed = s.seed()?;
    let split = Split::make(&ds, split_scheme(s, &ds)?, seed)?;
    let view = split.view(subset(s)?);
    if view.is_empty() {
        return Err(ArcError::Config("the selected subset is empty".into()));
    }
    let episodes = s.get(s.opts.episodes, "episodes")?.unwrap_or(1000);
    let threads = s.get(s.opts.threads, "threads")?.unwrap_or(1);
    let out = s.path(&s.opts.out, "out");

    if mode == EvalMode::Verification {
        let (_, model) = load_checkpoint(s, &ds)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pairs = sample_pairs(&view, episodes, &mut rng)?;
        let records = pairs
            .iter()
            .enumerate()
            .map(|(index, p)| {
                let sim = model.compare(ds.image(p.a), ds.image(p.b), false)?.similarity;
                Ok(EpisodeRecord {
                    index,
                    predicted: crate::data::ClassId(usize::from(sim > 0.5)),
                    truth: crate::data::ClassId(usize::from(p.label)),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        return write_report(&EvalReport::from_records(records), out.as_deref());
    }

    let way = way(s)?;
    let ep_mode = episode_mode(s)?;
    let sampler = |rng: &mut ChaCha8Rng| sample_episode(&ds, &view, way, ep_mode, rng);
    let run = |clf: &dyn OneShotClassifier| evaluate_oneshot(clf, episodes, seed, threads, sampler);
    let report = match mode {
        EvalMode::OneshotNaive => {
            let (_, model) = load_checkpoint(s, &ds)?;
            run(&NaiveArc { model: &model })?
        }
        EvalMode::OneshotFullcontext => {
            let (dir, model) = load_checkpoint(s, &ds)?;
            let head = load_head(&dir)?;
            run(&FullContextArc { model: &model, head: &head })?
        }
        EvalMode::BaselineKnn => run(&PixelKnn)?,
        EvalMode::BaselineCosine => run(&PixelCosine)?,
        EvalMode::Oracle => run(&OracleClassifier)?,
        EvalMode::Random => run(&RandomScorer { seed })?,
        EvalMode::Verification => unreachable!("handled above"),
    };
    write_report(&report, out.as_deref())
}

fn cmd_visualize(a: &Path, b: &Path, s: &Settings) -> Result<()> {
    let dir = s.require_path(&s.opts.ckpt, "ckpt")?;
    let out = s.require_path(&s.opts.out, "out")?;
    let model = ArcModel::load(&dir)?;
    let side = model.config.side;
    let (xa, xb) = (load_image(a, side)?, load_image(b, side)?);
    let trace = model.compare(&xa, &xb, true)?.trace.expect("trace requested");
    let probes_path = dir.join(PROBES_FILE);
    let probes = if probes_path.is_file() { load_probes(&probes_path)? } else { Vec::new() };
    let frames = write_frames(&out, &trace, (&xa, &xb), model.config.glimpse, &probes, FRAME_SCALE)?;
    println!("similarity {:.4}; wrote {} frames to {}", trace.similarity, frames.len(), out.display());
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(opts) => cmd_prepare(&Settings::new(opts)?),
        Command::Train { kind, opts } => cmd_train(kind, &Settings::new(opts)?),
        Command::Eval { evaluator, opts } => cmd_eval(evaluator, &Settings::new(opts)?),
        Command::Visualize { image_a, image_b, opts } => cmd_visualize(&image_a, &image_b, &Settings::new(opts)?),
    }
}

/// Parses `args` and runs the command. Returns the process exit code:
/// 0 on success, 1 for usage or configuration errors, 2 for runtime failures.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                1
            } else {
                2
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
