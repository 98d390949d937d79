//! The `cvl` command line.
//!
//! Every command reads the same flat key set. Values come from built-in
//! defaults, then a `key = value` file given with `--config`, then `--set
//! key=value` overrides, then the command's own flags, each layer overriding
//! the previous one. Unknown keys are rejected.
//!
//! Failures print one line, `error: kind=<kind> msg=<message>`, to stderr.
//! Usage errors exit with status 2, everything else with 1.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{
    encode_samples, load_dataset, load_features, load_keywords, load_word_list, synth_generate,
    write_keywords, write_synth, EncodedSample, SynthSpec,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    ensemble_average, evaluate, load_predictions, save_predictions, PredictionSet,
};
use crate::exec::Execution;
use crate::model::{
    gradient_suite, load_checkpoint, parse_value, save_checkpoint, CvlModel, ModelConfig,
    MODEL_KEYS,
};
use crate::representation::{
    KeywordSet, KeywordSource, KeywordTable, LexiconExtractor, Vocabulary,
};
use crate::training::{predict_samples, train_with, TrainConfig, TrainEvent};

/// Largest relative error the `gradcheck` command accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

pub const PATH_KEYS: &[&str] = &[
    "train",
    "val",
    "dataset",
    "features",
    "keywords",
    "vocab",
    "checkpoint",
    "predictions",
    "out",
    "trace",
    "nouns",
    "stopwords",
    "out_dir",
];

pub const TRAIN_KEYS: &[&str] = &[
    "batch_size",
    "lr_dual",
    "lr_single",
    "warmup_steps",
    "total_steps",
    "beta1",
    "beta2",
    "adam_eps",
    "augment_prob",
    "seed",
    "log_every",
    "eval_every",
    "checkpoint_every",
    "parallel",
];

pub const SYNTH_KEYS: &[&str] = &[
    "n_train",
    "n_val",
    "synth_vocab",
    "keyword_count",
    "noise",
    "balance",
    "keyword_oov",
];

pub const OTHER_KEYS: &[&str] = &["threshold", "probes_per_param", "min_count"];

/// Everything a command may need, as one flat key space.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub paths: BTreeMap<String, PathBuf>,
    pub threshold: f64,
    /// Coordinates probed per parameter tensor by `gradcheck`.
    pub probes_per_param: usize,
    /// Minimum count for a word to enter a vocabulary built from texts.
    pub min_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::toy(),
            synth: SynthSpec::default(),
            paths: BTreeMap::new(),
            threshold: 0.5,
            probes_per_param: 8,
            min_count: 1,
        }
    }
}

impl RunConfig {
    /// All accepted keys.
    pub fn keys() -> Vec<&'static str> {
        [PATH_KEYS, TRAIN_KEYS, SYNTH_KEYS, OTHER_KEYS, MODEL_KEYS].concat()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        let s = &mut self.synth;
        match key {
            k if PATH_KEYS.contains(&k) => {
                if value.trim().is_empty() {
                    return Err(Error::Config(format!("empty path for key {k}")));
                }
                self.paths
                    .insert(k.to_string(), PathBuf::from(value.trim()));
            }
            "batch_size" => t.batch_size = parse_value(key, value)?,
            "lr_dual" => t.lr_dual = parse_value(key, value)?,
            "lr_single" => t.lr_single = parse_value(key, value)?,
            "warmup_steps" => t.warmup_steps = parse_value(key, value)?,
            "total_steps" => t.total_steps = parse_value(key, value)?,
            "beta1" => t.beta1 = parse_value(key, value)?,
            "beta2" => t.beta2 = parse_value(key, value)?,
            "adam_eps" => t.adam_eps = parse_value(key, value)?,
            "augment_prob" => t.augment_prob = parse_value(key, value)?,
            "seed" => {
                t.seed = parse_value(key, value)?;
                s.seed = t.seed;
            }
            "log_every" => t.log_every = parse_value(key, value)?,
            "eval_every" => t.eval_every = parse_value(key, value)?,
            "checkpoint_every" => t.checkpoint_every = parse_value(key, value)?,
            "parallel" => {
                let on: bool = parse_value(key, value)?;
                t.execution = if on {
                    Execution::Parallel
                } else {
                    Execution::Sequential
                };
            }
            "n_train" => s.n_train = parse_value(key, value)?,
            "n_val" => s.n_val = parse_value(key, value)?,
            "synth_vocab" => s.vocab_size = parse_value(key, value)?,
            "keyword_count" => s.keyword_count = parse_value(key, value)?,
            "noise" => s.noise = parse_value(key, value)?,
            "balance" => s.balance = parse_value(key, value)?,
            "keyword_oov" => s.keyword_oov = parse_value(key, value)?,
            "threshold" => self.threshold = parse_value(key, value)?,
            "probes_per_param" => self.probes_per_param = parse_value(key, value)?,
            "min_count" => self.min_count = parse_value(key, value)?,
            _ => {
                if !self.model.set(key, value)? {
                    return Err(Error::Config(format!("unknown key {key}")));
                }
            }
        }
        Ok(())
    }

    /// Applies a flat config file: `key = value` lines, `#` comments.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (i, raw) in content.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("expected key = value, got {line:?}"),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {pair:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn path(&self, key: &str) -> Option<&Path> {
        self.paths.get(key).map(PathBuf::as_path)
    }

    fn required(&self, key: &str) -> Result<&Path> {
        self.path(key)
            .ok_or_else(|| Error::Config(format!("missing required key {key}")))
    }

    fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            max_text_len: self.model.max_text_len,
            max_rois: self.model.max_rois,
            visual_dim: self.model.visual_dim,
            ..self.synth.clone()
        }
    }
}

fn check_input(cfg: &RunConfig, key: &str, required: bool) -> Result<()> {
    match cfg.path(key) {
        Some(p) if !p.is_file() => Err(Error::Validation(format!(
            "{key} file {} does not exist",
            p.display()
        ))),
        None if required => Err(Error::Config(format!("missing required key {key}"))),
        _ => Ok(()),
    }
}

fn check_output(cfg: &RunConfig, key: &str, required: bool) -> Result<()> {
    match cfg.path(key) {
        Some(p) => {
            let parent = p
                .parent()
                .filter(|d| !d.as_os_str().is_empty())
                .unwrap_or(Path::new("."));
            if !parent.is_dir() {
                return Err(Error::Validation(format!(
                    "{key} directory {} does not exist",
                    parent.display()
                )));
            }
            if p.is_dir() {
                return Err(Error::Validation(format!(
                    "{key} path {} is a directory",
                    p.display()
                )));
            }
            Ok(())
        }
        None if required => Err(Error::Config(format!("missing required key {key}"))),
        None => Ok(()),
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "cvl",
    version,
    about = "Complementary visual-linguistic meme classifier"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Flat `key = value` config file
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for every random choice
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic XOR benchmark (train/val data, features, keywords, vocabulary)
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_val: Option<usize>,
        /// Standard deviation of the contextual-feature noise
        #[arg(long)]
        noise: Option<f64>,
        /// Keep keyword words out of the vocabulary
        #[arg(long)]
        keyword_oov: Option<bool>,
    },
    /// Write a keyword file from a dataset and noun/stopword lists
    ExtractKeywords {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// One noun per line
        #[arg(long)]
        nouns: Option<PathBuf>,
        /// One stopword per line
        #[arg(long)]
        stopwords: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model; writes a checkpoint and a loss trace
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        keywords: Option<PathBuf>,
        /// One word per line; built from the training texts when absent
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        nouns: Option<PathBuf>,
        #[arg(long)]
        stopwords: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long)]
        total_steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// both, text or visual
        #[arg(long)]
        modality: Option<String>,
        #[arg(long)]
        use_sembedding: Option<bool>,
    },
    /// Print accuracy and AUROC for a prediction file or a checkpoint on a dataset
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        keywords: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Score a dataset with a checkpoint; writes a prediction file
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        keywords: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Average prediction files per id
    Ensemble {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Prediction files to average
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Finite-difference check of every op and the full model loss
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        probes_per_param: Option<usize>,
    },
}

fn push<T: ToString>(
    flags: &mut Vec<(&'static str, String)>,
    key: &'static str,
    value: &Option<T>,
) {
    if let Some(v) = value {
        flags.push((key, v.to_string()));
    }
}

fn push_path(flags: &mut Vec<(&'static str, String)>, key: &'static str, value: &Option<PathBuf>) {
    if let Some(v) = value {
        flags.push((key, v.to_string_lossy().into_owned()));
    }
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::ExtractKeywords { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Predict { common, .. }
            | Command::Ensemble { common, .. }
            | Command::Gradcheck { common, .. } => common,
        }
    }

    /// Explicit flags as `(key, value)` pairs.
    fn flags(&self) -> Vec<(&'static str, String)> {
        let mut f = Vec::new();
        push(&mut f, "seed", &self.common().seed);
        match self {
            Command::GenData {
                out_dir,
                n_train,
                n_val,
                noise,
                keyword_oov,
                ..
            } => {
                push_path(&mut f, "out_dir", out_dir);
                push(&mut f, "n_train", n_train);
                push(&mut f, "n_val", n_val);
                push(&mut f, "noise", noise);
                push(&mut f, "keyword_oov", keyword_oov);
            }
            Command::ExtractKeywords {
                dataset,
                nouns,
                stopwords,
                out,
                ..
            } => {
                push_path(&mut f, "dataset", dataset);
                push_path(&mut f, "nouns", nouns);
                push_path(&mut f, "stopwords", stopwords);
                push_path(&mut f, "out", out);
            }
            Command::Train {
                train,
                val,
                features,
                keywords,
                vocab,
                nouns,
                stopwords,
                checkpoint,
                trace,
                total_steps,
                batch_size,
                modality,
                use_sembedding,
                ..
            } => {
                push_path(&mut f, "train", train);
                push_path(&mut f, "val", val);
                push_path(&mut f, "features", features);
                push_path(&mut f, "keywords", keywords);
                push_path(&mut f, "vocab", vocab);
                push_path(&mut f, "nouns", nouns);
                push_path(&mut f, "stopwords", stopwords);
                push_path(&mut f, "checkpoint", checkpoint);
                push_path(&mut f, "trace", trace);
                push(&mut f, "total_steps", total_steps);
                push(&mut f, "batch_size", batch_size);
                push(&mut f, "modality", modality);
                push(&mut f, "use_sembedding", use_sembedding);
            }
            Command::Eval {
                predictions,
                checkpoint,
                dataset,
                features,
                keywords,
                threshold,
                ..
            } => {
                push_path(&mut f, "predictions", predictions);
                push_path(&mut f, "checkpoint", checkpoint);
                push_path(&mut f, "dataset", dataset);
                push_path(&mut f, "features", features);
                push_path(&mut f, "keywords", keywords);
                push(&mut f, "threshold", threshold);
            }
            Command::Predict {
                checkpoint,
                dataset,
                features,
                keywords,
                out,
                ..
            } => {
                push_path(&mut f, "checkpoint", checkpoint);
                push_path(&mut f, "dataset", dataset);
                push_path(&mut f, "features", features);
                push_path(&mut f, "keywords", keywords);
                push_path(&mut f, "out", out);
            }
            Command::Ensemble { out, .. } => push_path(&mut f, "out", out),
            Command::Gradcheck {
                probes_per_param, ..
            } => push(&mut f, "probes_per_param", probes_per_param),
        }
        f
    }

    /// Defaults, then the config file, then overrides, then flags.
    pub fn run_config(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let common = self.common();
        if let Some(path) = &common.config {
            cfg.apply_file(path)?;
        }
        for pair in &common.overrides {
            cfg.apply_override(pair)?;
        }
        for (k, v) in self.flags() {
            cfg.set(k, &v)?;
        }
        Ok(cfg)
    }
}

/// Keyword file entries, falling back to the noun/stopword heuristic when
/// lexicons are configured.
fn keyword_source(cfg: &RunConfig) -> Result<KeywordTable> {
    let sets = match cfg.path("keywords") {
        Some(p) => load_keywords(p)?,
        None => Vec::new(),
    };
    let table = KeywordTable::new(sets);
    Ok(match cfg.path("nouns") {
        Some(nouns) => {
            let stop = match cfg.path("stopwords") {
                Some(p) => load_word_list(p)?,
                None => Vec::new(),
            };
            table.with_fallback(LexiconExtractor::new(load_word_list(nouns)?, stop))
        }
        None => table,
    })
}

fn encode_split(
    cfg: &RunConfig,
    key: &str,
    keywords: &dyn KeywordSource,
    vocab: &Vocabulary,
    model: &ModelConfig,
) -> Result<Vec<EncodedSample>> {
    let records = load_dataset(cfg.required(key)?)?;
    let features = load_features(cfg.required("features")?)?;
    encode_samples(&records, &features, keywords, vocab, model)
}

fn gen_data(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let dir = cfg.required("out_dir")?;
    let data = synth_generate(&cfg.synth_spec())?;
    write_synth(dir, &data)?;
    writeln!(
        out,
        "wrote {} train and {} val samples to {}",
        data.train.len(),
        data.val.len(),
        dir.display()
    )
    .map_err(|e| Error::io("stdout", e))
}

fn extract(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    check_input(cfg, "dataset", true)?;
    check_input(cfg, "nouns", true)?;
    check_input(cfg, "stopwords", false)?;
    check_output(cfg, "out", true)?;
    let records = load_dataset(cfg.required("dataset")?)?;
    let stop = match cfg.path("stopwords") {
        Some(p) => load_word_list(p)?,
        None => Vec::new(),
    };
    let lexicon = LexiconExtractor::new(load_word_list(cfg.required("nouns")?)?, stop);
    let sets: Vec<KeywordSet> = records
        .iter()
        .map(|r| lexicon.keywords(&r.id, &r.text))
        .collect();
    write_keywords(cfg.required("out")?, &sets)?;
    writeln!(out, "wrote keywords for {} samples", sets.len()).map_err(|e| Error::io("stdout", e))
}

fn train_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    check_input(cfg, "train", true)?;
    check_input(cfg, "features", true)?;
    for key in ["val", "keywords", "vocab", "nouns", "stopwords"] {
        check_input(cfg, key, false)?;
    }
    check_output(cfg, "checkpoint", true)?;
    check_output(cfg, "trace", false)?;
    cfg.train.validate()?;
    cfg.model.validate()?;

    let records = load_dataset(cfg.required("train")?)?;
    let vocab = match cfg.path("vocab") {
        Some(p) => Vocabulary::new(load_word_list(p)?),
        None => Vocabulary::from_texts(records.iter().map(|r| r.text.as_str()), cfg.min_count),
    };
    let keywords = keyword_source(cfg)?;
    let features = load_features(cfg.required("features")?)?;
    let train_set = encode_samples(&records, &features, &keywords, &vocab, &cfg.model)?;
    let val_set = match cfg.path("val") {
        Some(p) => Some(encode_samples(
            &load_dataset(p)?,
            &features,
            &keywords,
            &vocab,
            &cfg.model,
        )?),
        None => None,
    };

    let mut model = CvlModel::new(cfg.model.clone(), vocab, cfg.train.seed)?;
    let checkpoint = cfg.required("checkpoint")?.to_path_buf();
    let mut trace = match cfg.path("trace") {
        Some(p) => Some((
            p.to_path_buf(),
            BufWriter::new(File::create(p).map_err(|e| Error::io(p, e))?),
        )),
        None => None,
    };
    let stdout_err = |e| Error::io("stdout", e);
    let report = train_with(
        &mut model,
        &train_set,
        val_set.as_deref(),
        &cfg.train,
        |event| {
            match event {
                TrainEvent::Trace(entry) => {
                    writeln!(out, "{entry}").map_err(stdout_err)?;
                    if let Some((path, w)) = trace.as_mut() {
                        writeln!(w, "{entry}")
                            .and_then(|_| w.flush())
                            .map_err(|e| Error::io(path.as_path(), e))?;
                    }
                }
                TrainEvent::Eval { step, report } => {
                    writeln!(out, "eval step {step} {report}").map_err(stdout_err)?
                }
                TrainEvent::Checkpoint { model, .. } => save_checkpoint(&checkpoint, model)?,
            }
            Ok(())
        },
    )?;
    if let Some(r) = report.final_eval() {
        writeln!(out, "final {r}").map_err(stdout_err)?;
    }
    Ok(())
}

fn predict_set(cfg: &RunConfig) -> Result<PredictionSet> {
    let model = load_checkpoint(cfg.required("checkpoint")?)?;
    let keywords = keyword_source(cfg)?;
    let samples = encode_split(cfg, "dataset", &keywords, &model.vocab, &model.config)?;
    predict_samples(&model, &samples, cfg.train.execution)
}

fn predict_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    for key in ["checkpoint", "dataset", "features"] {
        check_input(cfg, key, true)?;
    }
    check_input(cfg, "keywords", false)?;
    check_output(cfg, "out", true)?;
    let preds = predict_set(cfg)?;
    save_predictions(cfg.required("out")?, &preds)?;
    writeln!(out, "wrote {} predictions", preds.len()).map_err(|e| Error::io("stdout", e))
}

fn eval_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let preds = if cfg.path("predictions").is_some() {
        check_input(cfg, "predictions", true)?;
        load_predictions(cfg.required("predictions")?)?
    } else {
        for key in ["checkpoint", "dataset", "features"] {
            check_input(cfg, key, true)?;
        }
        check_input(cfg, "keywords", false)?;
        predict_set(cfg)?
    };
    let report = evaluate(&preds, cfg.threshold)?;
    writeln!(out, "{report}").map_err(|e| Error::io("stdout", e))
}

fn ensemble_cmd(cfg: &RunConfig, inputs: &[PathBuf], out: &mut dyn Write) -> Result<()> {
    for p in inputs {
        if !p.is_file() {
            return Err(Error::Validation(format!(
                "prediction file {} does not exist",
                p.display()
            )));
        }
    }
    check_output(cfg, "out", true)?;
    let sets = inputs
        .iter()
        .map(|p| load_predictions(p))
        .collect::<Result<Vec<_>>>()?;
    let merged = ensemble_average(&sets)?;
    save_predictions(cfg.required("out")?, &merged)?;
    writeln!(
        out,
        "averaged {} files over {} ids",
        sets.len(),
        merged.len()
    )
    .map_err(|e| Error::io("stdout", e))
}

fn gradcheck_cmd(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let report = gradient_suite(cfg.train.seed, cfg.probes_per_param, cfg.train.execution)?;
    let w = |e| Error::io("stdout", e);
    for e in &report.entries {
        writeln!(out, "op {} max_rel_error {:e}", e.name, e.max_rel_error).map_err(w)?;
    }
    let worst = match &report.model.worst {
        Some((name, index)) => format!(" worst {name}[{index}]"),
        None => String::new(),
    };
    writeln!(
        out,
        "model probes {} max_rel_error {:e}{worst}",
        report.model.probes, report.model.max_rel_error
    )
    .map_err(w)?;
    let max = report.max_rel_error();
    writeln!(out, "max_rel_error {max:e}").map_err(w)?;
    if max > GRADCHECK_TOLERANCE {
        return Err(Error::Validation(format!(
            "max relative error {max:e} exceeds {GRADCHECK_TOLERANCE:e}"
        )));
    }
    Ok(())
}

pub fn execute(command: &Command, out: &mut dyn Write) -> Result<()> {
    let cfg = command.run_config()?;
    match command {
        Command::GenData { .. } => gen_data(&cfg, out),
        Command::ExtractKeywords { .. } => extract(&cfg, out),
        Command::Train { .. } => train_cmd(&cfg, out),
        Command::Eval { .. } => eval_cmd(&cfg, out),
        Command::Predict { .. } => predict_cmd(&cfg, out),
        Command::Ensemble { inputs, .. } => ensemble_cmd(&cfg, inputs, out),
        Command::Gradcheck { .. } => gradcheck_cmd(&cfg, out),
    }
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses `args` (program name first), runs the command, and returns the
/// process exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = write!(out, "{e}");
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            let _ = writeln!(err, "error: kind=usage msg={}", one_line(first));
            return 2;
        }
    };
    match execute(&cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(
                err,
                "error: kind={} msg={}",
                e.kind(),
                one_line(&e.to_string())
            );
            1
        }
    }
}
