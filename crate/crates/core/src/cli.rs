//! Command-line front end: `gen-data`, `train`, `eval` and `explain`.
//!
//! Every command resolves its settings from built-in defaults, then an
//! optional flat TOML file (`--config`), then flags. The resolved settings
//! are written to `effective_config.toml` in the output directory (stderr for
//! `gen-data`, whose output directory holds only the corpus and sidecar).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::error::{Error, Result};
use crate::lexicon::{Principle, TriggerLexicon};
use crate::metrics::{
    accuracy, cognitive_true_positive, explain_email, f1_score, predict_top1, sac_score, write_metrics_csv,
    MetricRow,
};
use crate::model::{ClassifierInput, ModelConfig, SelectorInput};
use crate::synth::{generate_corpus_with, localization_accuracy, read_sidecar, write_sidecar, SynthConfig};
use crate::text::{dedup_exact, encode_email, read_corpus, write_corpus, Label, PreparedEmail, RawEmail};
use crate::trainer::{log_csv, prepare_splits, split_dataset, train, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const SIDECAR_FILE: &str = "truth.jsonl";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EXPLAIN_FILE: &str = "explanations.jsonl";
pub const CONFIG_ECHO_FILE: &str = "effective_config.toml";

#[derive(Debug, Parser)]
#[command(name = "phishloc", version, about = "Phishing sentence localization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus and its ground-truth sidecar.
    GenData(Flags),
    /// Train on a corpus and save the best checkpoint.
    Train(Flags),
    /// Score a checkpoint on the corpus test split.
    Eval(Flags),
    /// Rank the sentences of emails with a checkpoint.
    Explain(Flags),
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub sidecar: Option<PathBuf>,
    #[arg(long)]
    pub lexicon: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long = "phishing-ratio")]
    pub phishing_ratio: Option<f64>,
    /// Sets lambda to 0.
    #[arg(long = "no-ib")]
    pub no_ib: bool,
    /// Skips the disjoint random-mask step.
    #[arg(long = "no-ddm")]
    pub no_ddm: bool,
    /// A single email to explain.
    #[arg(long)]
    pub text: Option<String>,
}

/// Flat config document. Every key is optional; unknown keys are rejected.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub clip_threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vocab_cap: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub use_ddm: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_sentences: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tokens_per_sentence: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embed_dim: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kernel_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selector_hidden: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classifier_hidden: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retain_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selector_input: Option<SelectorInput>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classifier_input: Option<ClassifierInput>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_emails: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phishing_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_email_sentences: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_email_sentences: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sidecar: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub principle_weights: Option<BTreeMap<Principle, f64>>,
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Fully resolved settings of one invocation.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub k: usize,
    pub corpus: Option<PathBuf>,
    pub sidecar: Option<PathBuf>,
    pub lexicon: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Single email for `explain`; not part of the config document.
    pub text: Option<String>,
}

pub const DEFAULT_K: usize = 3;

impl RunConfig {
    pub fn resolve(file: &RunConfigFile, flags: &Flags) -> Result<Self> {
        let mut train = TrainConfig::default();
        let mut synth = SynthConfig::default();
        let m = &mut train.model;
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        set!(m.max_sentences, file.max_sentences);
        set!(m.tokens_per_sentence, file.tokens_per_sentence);
        set!(m.embed_dim, file.embed_dim);
        set!(m.kernel_size, file.kernel_size);
        set!(m.selector_hidden, file.selector_hidden);
        set!(m.classifier_hidden, file.classifier_hidden);
        set!(m.retain_p, file.retain_p);
        set!(m.selector_input, file.selector_input);
        set!(m.classifier_input, file.classifier_input);
        set!(train.lambda, file.lambda);
        set!(train.sigma, file.sigma);
        set!(train.tau, file.tau);
        set!(train.learning_rate, file.learning_rate);
        set!(train.batch_size, file.batch_size);
        set!(train.epochs, file.epochs);
        set!(train.clip_threshold, file.clip_threshold);
        set!(train.vocab_cap, file.vocab_cap);
        set!(train.use_ddm, file.use_ddm);
        set!(synth.n_emails, file.n_emails);
        set!(synth.phishing_ratio, file.phishing_ratio);
        set!(synth.min_sentences, file.min_email_sentences);
        set!(synth.max_sentences, file.max_email_sentences);
        set!(synth.principle_weights, file.principle_weights);
        let seed = flags.seed.or(file.seed).unwrap_or(train.seed);
        train.seed = seed;
        synth.seed = seed;
        set!(train.lambda, flags.lambda);
        set!(train.sigma, flags.sigma);
        set!(train.tau, flags.tau);
        set!(train.epochs, flags.epochs);
        set!(train.batch_size, flags.batch_size);
        set!(synth.n_emails, flags.n);
        set!(synth.phishing_ratio, flags.phishing_ratio);
        if flags.no_ib {
            train.lambda = 0.0;
        }
        if flags.no_ddm {
            train.use_ddm = false;
        }
        Ok(RunConfig {
            train,
            synth,
            k: flags.k.or(file.k).unwrap_or(DEFAULT_K),
            corpus: flags.corpus.clone().or_else(|| file.corpus.clone()),
            sidecar: flags.sidecar.clone().or_else(|| file.sidecar.clone()),
            lexicon: flags.lexicon.clone().or_else(|| file.lexicon.clone()),
            checkpoint: flags.checkpoint.clone().or_else(|| file.checkpoint.clone()),
            out: flags.out.clone().or_else(|| file.out.clone()),
            text: flags.text.clone(),
        })
    }

    /// The resolved settings as a config document with every key present
    /// except unset paths.
    pub fn to_file(&self) -> RunConfigFile {
        let t = &self.train;
        let m = &t.model;
        let s = &self.synth;
        RunConfigFile {
            seed: Some(t.seed),
            lambda: Some(t.lambda),
            sigma: Some(t.sigma),
            tau: Some(t.tau),
            learning_rate: Some(t.learning_rate),
            batch_size: Some(t.batch_size),
            epochs: Some(t.epochs),
            clip_threshold: Some(t.clip_threshold),
            vocab_cap: Some(t.vocab_cap),
            use_ddm: Some(t.use_ddm),
            max_sentences: Some(m.max_sentences),
            tokens_per_sentence: Some(m.tokens_per_sentence),
            embed_dim: Some(m.embed_dim),
            kernel_size: Some(m.kernel_size),
            selector_hidden: Some(m.selector_hidden.clone()),
            classifier_hidden: Some(m.classifier_hidden.clone()),
            retain_p: Some(m.retain_p),
            selector_input: Some(m.selector_input),
            classifier_input: Some(m.classifier_input),
            n_emails: Some(s.n_emails),
            phishing_ratio: Some(s.phishing_ratio),
            min_email_sentences: Some(s.min_sentences),
            max_email_sentences: Some(s.max_sentences),
            k: Some(self.k),
            corpus: self.corpus.clone(),
            sidecar: self.sidecar.clone(),
            lexicon: self.lexicon.clone(),
            checkpoint: self.checkpoint.clone(),
            out: self.out.clone(),
            principle_weights: Some(s.principle_weights.clone()),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&self.to_file()).map_err(|e| Error::Config(e.to_string()))
    }

    fn lexicon(&self) -> Result<TriggerLexicon> {
        match &self.lexicon {
            Some(p) => TriggerLexicon::load(p),
            None => Ok(TriggerLexicon::default_lexicon()),
        }
    }
}

fn require<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    v.as_deref().ok_or_else(|| Error::Config(format!("--{flag} is required")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    write_file(&dir.join(CONFIG_ECHO_FILE), &cfg.to_toml()?)
}

pub fn cmd_gen_data(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    cfg.synth.validate()?;
    let out = require(&cfg.out, "out")?;
    let lexicon = cfg.lexicon()?;
    let corpus = generate_corpus_with(&cfg.synth, &lexicon)?;
    create_dir(out)?;
    let raws: Vec<RawEmail> = corpus.iter().map(|e| e.email.clone()).collect();
    let truths: Vec<_> = corpus.iter().map(|e| e.truth.clone()).collect();
    write_corpus(&out.join(CORPUS_FILE), &raws)?;
    write_sidecar(&out.join(SIDECAR_FILE), &truths)?;
    eprint!("{}", cfg.to_toml()?);
    let n_phish = raws.iter().filter(|e| e.label == Label::Phishing).count();
    writeln!(stdout, "{} emails ({} phishing)", raws.len(), n_phish).map_err(|e| Error::io("stdout", e))
}

pub fn cmd_train(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    cfg.train.validate()?;
    let corpus = read_corpus(require(&cfg.corpus, "corpus")?)?;
    let out = require(&cfg.out, "out")?;
    let splits = prepare_splits(&corpus, &cfg.train)?;
    let outcome = train(&cfg.train, splits.vocab.len(), &splits.train, &splits.validation)?;
    create_dir(out)?;
    let ckpt = Checkpoint {
        train_config: cfg.train.clone(),
        vocabulary: splits.vocab,
        model: outcome.best,
        meta: CheckpointMeta {
            best_epoch: outcome.best_epoch,
            val_accuracy: outcome.best_val_accuracy,
        },
    };
    ckpt.save(&out.join(CHECKPOINT_FILE))?;
    write_file(&out.join(LOG_FILE), &log_csv(&outcome.log))?;
    echo_config(cfg, out)?;
    writeln!(
        stdout,
        "best epoch {} (validation accuracy {:.4})",
        outcome.best_epoch, outcome.best_val_accuracy
    )
    .map_err(|e| Error::io("stdout", e))
}

/// Test partition of `corpus` as seen by the checkpoint's training run,
/// encoded with the checkpoint's vocabulary.
pub fn test_split(ckpt: &Checkpoint, corpus: &[RawEmail]) -> Result<Vec<PreparedEmail>> {
    let corpus = dedup_exact(corpus.to_vec());
    let split = split_dataset(&corpus, crate::seed::derive_seed(ckpt.train_config.seed, "split", 0))?;
    let by_id: HashMap<&str, &RawEmail> = corpus.iter().map(|e| (e.id.as_str(), e)).collect();
    let m: &ModelConfig = &ckpt.model.config;
    split
        .test
        .iter()
        .map(|id| encode_email(by_id[id.as_str()], &ckpt.vocabulary, m.max_sentences, m.tokens_per_sentence))
        .collect()
}

/// The metric rows written by `eval`.
pub fn evaluate(
    ckpt: &Checkpoint,
    test: &[PreparedEmail],
    lexicon: &TriggerLexicon,
    sidecar: Option<&[crate::synth::GroundTruth]>,
) -> Result<Vec<MetricRow>> {
    let all: Vec<&PreparedEmail> = test.iter().collect();
    let preds: Vec<Label> = predict_top1(&ckpt.model, &all)?.into_iter().map(|p| p.label).collect();
    let truths: Vec<Label> = all.iter().map(|e| e.label).collect();
    let phish: Vec<&PreparedEmail> = all.iter().copied().filter(|e| e.label == Label::Phishing).collect();
    let row = |metric: &str, value: f64, n: usize| MetricRow {
        metric: metric.to_string(),
        value,
        n,
    };
    let mut rows = vec![
        row("label_accuracy", accuracy(&preds, &truths)?, all.len()),
        row("f1", f1_score(&preds, &truths)?, all.len()),
        row(
            "cognitive_true_positive",
            cognitive_true_positive(&ckpt.model, &phish, lexicon)?,
            phish.len(),
        ),
        row("sac", sac_score(&ckpt.model, &phish, lexicon)?, phish.len()),
    ];
    if let Some(truth) = sidecar {
        let map: HashMap<String, _> = truth.iter().map(|t| (t.id.clone(), t.clone())).collect();
        let n = all
            .iter()
            .filter(|e| map.get(&e.id).is_some_and(|t| t.trigger_index >= 0))
            .count();
        rows.push(row("localization_accuracy", localization_accuracy(&ckpt.model, &all, &map)?, n));
    }
    Ok(rows)
}

pub fn cmd_eval(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(require(&cfg.checkpoint, "checkpoint")?)?;
    let corpus = read_corpus(require(&cfg.corpus, "corpus")?)?;
    let sidecar = cfg.sidecar.as_deref().map(read_sidecar).transpose()?;
    let lexicon = cfg.lexicon()?;
    let out = require(&cfg.out, "out")?;
    let test = test_split(&ckpt, &corpus)?;
    let rows = evaluate(&ckpt, &test, &lexicon, sidecar.as_deref())?;
    create_dir(out)?;
    write_metrics_csv(&out.join(METRICS_FILE), &rows)?;
    echo_config(cfg, out)?;
    for r in &rows {
        writeln!(stdout, "{} {:.4} (n={})", r.metric, r.value, r.n).map_err(|e| Error::io("stdout", e))?;
    }
    Ok(())
}

pub fn cmd_explain(cfg: &RunConfig, stdout: &mut dyn Write) -> Result<()> {
    let ckpt = Checkpoint::load(require(&cfg.checkpoint, "checkpoint")?)?;
    let lexicon = cfg.lexicon()?;
    let emails: Vec<RawEmail> = match (&cfg.corpus, &cfg.text) {
        (_, Some(text)) => vec![RawEmail {
            id: "text".into(),
            text: text.clone(),
            label: Label::Phishing,
        }],
        (Some(path), None) => read_corpus(path)?,
        (None, None) => return Err(Error::Config("explain needs --corpus or --text".into())),
    };
    if emails.is_empty() {
        return Err(Error::EmptyInput("no emails to explain"));
    }
    let m = &ckpt.model.config;
    let mut lines = String::new();
    for e in &emails {
        let prepared = encode_email(e, &ckpt.vocabulary, m.max_sentences, m.tokens_per_sentence)?;
        let ex = explain_email(&ckpt.model, &prepared, &lexicon, cfg.k)?;
        lines.push_str(&serde_json::to_string(&ex)?);
        lines.push('\n');
    }
    match &cfg.out {
        Some(out) => {
            create_dir(out)?;
            write_file(&out.join(EXPLAIN_FILE), &lines)?;
            echo_config(cfg, out)
        }
        None => stdout.write_all(lines.as_bytes()).map_err(|e| Error::io("stdout", e)),
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

/// Runs one parsed command; returns the process exit code.
pub fn run(cli: Cli, stdout: &mut dyn Write) -> i32 {
    let (flags, f): (Flags, fn(&RunConfig, &mut dyn Write) -> Result<()>) = match cli.command {
        Command::GenData(fl) => (fl, cmd_gen_data),
        Command::Train(fl) => (fl, cmd_train),
        Command::Eval(fl) => (fl, cmd_eval),
        Command::Explain(fl) => (fl, cmd_explain),
    };
    let result = (|| {
        let file = match &flags.config {
            Some(p) => RunConfigFile::load(p)?,
            None => RunConfigFile::default(),
        };
        f(&RunConfig::resolve(&file, &flags)?, stdout)
    })();
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from_args<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli, stdout),
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            code
        }
    }
}
