//! `dctc` command line: corpus generation, training, scoring, traversal and
//! style transfer, driven by one TOML config plus flag overrides.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{generate_corpus, Corpus, CorpusError, GrammarConfig, GrammarSpec};
use crate::evaltools::{self, EvalError, TransferJob};
use crate::metrics::{self, CodeMatrix, FactorMatrix, MetricError, MetricReport, Scheme, ZConfig};
use crate::model::{Checkpoint, Model, ModelError};
use crate::objective::Mode;
use crate::trainer::{self, TrainConfig, TrainError};

/// Seed used when neither `--seed`, `DCTC_SEED` nor the config sets one.
pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0} already exists; pass --force to overwrite")]
    Exists(PathBuf),
    #[error("config {path}: {msg}")]
    Config { path: String, msg: String },
    #[error("checkpoint does not match the corpus: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            _ => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransferSettings {
    /// Sentences averaged per value.
    pub list_size: usize,
}

impl Default for TransferSettings {
    fn default() -> Self {
        TransferSettings { list_size: 100 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    pub scheme: Scheme,
    pub metrics: ZConfig,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            scheme: Scheme::Probs,
            metrics: ZConfig::default(),
        }
    }
}

/// Everything a run needs, read from one TOML file. The top-level `seed`
/// feeds corpus generation, training and metric sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub grammar: GrammarConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub transfer: TransferSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: DEFAULT_SEED,
            grammar: GrammarConfig::desk(),
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
            transfer: TransferSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &str) -> Result<Self, CliError> {
        let raw: toml::Table = toml::from_str(text).map_err(|e| CliError::Config {
            path: path.into(),
            msg: e.to_string(),
        })?;
        for section in [&["train"][..], &["eval", "metrics"][..]] {
            let mut t = Some(&raw);
            for key in section {
                t = t.and_then(|t| t.get(*key)).and_then(|v| v.as_table());
            }
            if t.is_some_and(|t| t.contains_key("seed")) {
                return Err(CliError::Config {
                    path: path.into(),
                    msg: format!("set the seed at the top level, not under [{}]", section.join(".")),
                });
            }
        }
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config {
            path: path.into(),
            msg: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::Config {
                    path: p.display().to_string(),
                    msg: e.to_string(),
                })?;
                RunConfig::from_toml(&text, &p.display().to_string())
            }
        }
    }

    /// Pushes the top-level seed into every component and validates.
    pub fn resolve(mut self, seed: Option<u64>) -> Result<Self, CliError> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.train.seed = self.seed;
        self.eval.metrics.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let config_err = |msg: String| CliError::Config {
            path: "<resolved>".into(),
            msg,
        };
        GrammarSpec::from_config(self.grammar.clone())?;
        self.train.validate()?;
        if self.eval.metrics.num_points < 5 || self.eval.metrics.pairs_per_point == 0 {
            return Err(config_err("eval needs num_points >= 5 and pairs_per_point >= 1".into()));
        }
        let lr = self.eval.metrics.learning_rate;
        if lr.is_nan() || lr <= 0.0 || self.eval.metrics.epochs == 0 {
            return Err(config_err(
                "eval classifier needs a positive learning rate and epochs".into(),
            ));
        }
        if self.transfer.list_size == 0 {
            return Err(config_err("transfer.list_size must be at least 1".into()));
        }
        Ok(())
    }

    /// TOML text that [`RunConfig::from_toml`] accepts: the per-component
    /// seed copies are left out.
    pub fn to_toml(&self) -> String {
        let mut t = toml::Table::try_from(self).expect("config serializes");
        for path in [&["train"][..], &["eval", "metrics"][..]] {
            let mut cur = &mut t;
            for key in path {
                cur = cur
                    .get_mut(*key)
                    .and_then(|v| v.as_table_mut())
                    .expect("section present");
            }
            cur.remove("seed");
        }
        toml::to_string(&t).expect("table serializes")
    }
}

#[derive(Debug, Parser)]
#[command(name = "dctc", version, about = "Discrete disentangled sentence VAE toolkit")]
pub struct Cli {
    /// TOML run config; defaults apply when absent.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice; falls back to DCTC_SEED, then the config.
    #[arg(long, global = true, env = "DCTC_SEED")]
    pub seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    GenerateData(GenerateArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Score a checkpoint: MIG, Z-diff, Z-min-var and reconstruction.
    Eval(EvalArgs),
    /// Decode every category of a latent for one sentence.
    Traverse(TraverseArgs),
    /// Move sentences between two values of a factor by latent arithmetic.
    Transfer(TransferArgs),
    /// Inspect the run config.
    #[command(subcommand)]
    Config(ConfigCommand),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum FactorSet {
    Desk,
    #[value(name = "full-table-1")]
    FullTable,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Output directory; defaults to the config's corpus path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Factor set, replacing the config's grammar factors.
    #[arg(long, value_enum)]
    pub factors: Option<FactorSet>,
    /// Size of the verb/object inventory.
    #[arg(long)]
    pub verbobj: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "dctc" => Ok(Mode::Dctc),
        "gamma-zero" | "gamma-zero-ablation" => Ok(Mode::GammaZero),
        "beta-kl" => Ok(Mode::BetaKl),
        _ => Err(format!("unknown mode `{s}` (dctc, gamma-zero, beta-kl)")),
    }
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Corpus directory; defaults to the config's corpus path.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SchemeArg {
    Probs,
    Hard,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub source: CheckpointArgs,
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    /// Report path; defaults to `eval_report.json` beside the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also score exact one-hot codes of the true factors.
    #[arg(long)]
    pub self_test: bool,
}

#[derive(Debug, Args)]
pub struct TraverseArgs {
    #[command(flatten)]
    pub source: CheckpointArgs,
    /// Input sentence (space-separated tokens).
    #[arg(long, conflicts_with = "index")]
    pub sentence: Option<String>,
    /// Input as a corpus row index.
    #[arg(long)]
    pub index: Option<usize>,
    /// Latent name or index.
    #[arg(long, conflicts_with = "all", required_unless_present = "all")]
    pub latent: Option<String>,
    /// Traverse every latent and print one verdict per latent.
    #[arg(long)]
    pub all: bool,
    /// Also write the tables as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TransferArgs {
    #[command(flatten)]
    pub source: CheckpointArgs,
    #[arg(long)]
    pub factor: String,
    #[arg(long = "from")]
    pub from_value: String,
    #[arg(long = "to")]
    pub to_value: String,
    /// Sentences averaged per value; defaults to the config's list size.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum ConfigCommand {
    /// Validate the config and print it fully resolved.
    Check,
    /// Print the default config.
    Default,
}

/// Parses `args` and runs the command, writing human output to `out`.
pub fn run<I, T, W>(args: I, out: &mut W) -> Result<(), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
    W: Write,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            write!(out, "{e}")?;
            return Ok(());
        }
        Err(e) => return Err(CliError::Usage(e.to_string())),
    };
    let base = RunConfig::load(cli.config.as_deref())?;
    let ctx = Ctx {
        force: cli.force,
        seed: cli.seed,
    };
    match cli.command {
        Command::GenerateData(a) => generate(base, &ctx, a, out),
        Command::Train(a) => train(base, &ctx, a, out),
        Command::Eval(a) => eval(base, &ctx, a, out),
        Command::Traverse(a) => traverse(base, &ctx, a, out),
        Command::Transfer(a) => transfer(base, &ctx, a, out),
        Command::Config(ConfigCommand::Check) => {
            let cfg = base.resolve(ctx.seed)?;
            writeln!(out, "# config ok")?;
            write!(out, "{}", cfg.to_toml())?;
            Ok(())
        }
        Command::Config(ConfigCommand::Default) => {
            write!(out, "{}", RunConfig::default().to_toml())?;
            Ok(())
        }
    }
}

struct Ctx {
    force: bool,
    seed: Option<u64>,
}

impl Ctx {
    fn claim(&self, path: &Path) -> Result<(), CliError> {
        if path.exists() && !self.force {
            return Err(CliError::Exists(path.to_path_buf()));
        }
        Ok(())
    }

    fn write(&self, path: &Path, body: &str) -> Result<(), CliError> {
        self.claim(path)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, body)?;
        Ok(())
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

fn generate<W: Write>(base: RunConfig, ctx: &Ctx, a: GenerateArgs, out: &mut W) -> Result<(), CliError> {
    let mut cfg = base;
    match a.factors {
        Some(FactorSet::Desk) => cfg.grammar.factors = GrammarConfig::desk().factors,
        Some(FactorSet::FullTable) => {
            cfg.grammar.factors = GrammarConfig::full_table(cfg.grammar.verb_object_count).factors
        }
        None => {}
    }
    if let Some(n) = a.verbobj {
        cfg.grammar.verb_object_count = n;
    }
    let cfg = cfg.resolve(ctx.seed)?;
    let dir = a.out.unwrap_or_else(|| cfg.train.corpus.clone());
    for name in ["corpus.tsv", "vocab.tsv", "grammar.toml"] {
        ctx.claim(&dir.join(name))?;
    }
    let spec = GrammarSpec::from_config(cfg.grammar.clone())?;
    let corpus = generate_corpus(&spec, cfg.seed)?;
    corpus.write_dir(&dir)?;
    writeln!(
        out,
        "generated {} sentences over {} factors (vocabulary {}, seed {}) in {}",
        corpus.len(),
        spec.factors().len(),
        corpus.vocab.len(),
        cfg.seed,
        dir.display()
    )?;
    Ok(())
}

fn train<W: Write>(base: RunConfig, ctx: &Ctx, a: TrainArgs, out: &mut W) -> Result<(), CliError> {
    let mut cfg = base;
    if let Some(m) = a.mode {
        cfg.train.objective.mode = m;
    }
    if let Some(c) = a.corpus {
        cfg.train.corpus = c;
    }
    if let Some(o) = a.out {
        cfg.train.output_dir = o;
    }
    if let Some(s) = a.steps {
        cfg.train.total_steps = s;
    }
    let cfg = cfg.resolve(ctx.seed)?;
    let dir = &cfg.train.output_dir;
    for p in [trainer::final_checkpoint_path(dir), trainer::report_path(dir)] {
        ctx.claim(&p)?;
    }
    let report = trainer::train(&cfg.train)?;
    write!(out, "{}", trainer::report_summary(&report))?;
    writeln!(out, "seed {} mode {}", cfg.seed, cfg.train.objective.mode)?;
    Ok(())
}

fn load_pair(cfg: &RunConfig, src: &CheckpointArgs) -> Result<(Model, Corpus), CliError> {
    let dir = src.corpus.clone().unwrap_or_else(|| cfg.train.corpus.clone());
    let corpus = Corpus::read_dir(&dir)?;
    let model = Checkpoint::load(&src.checkpoint)?.model;
    let mc = model.config();
    if mc.vocab_size != corpus.vocab.len() {
        return Err(CliError::Mismatch(format!(
            "vocabulary size {} vs corpus {}",
            mc.vocab_size,
            corpus.vocab.len()
        )));
    }
    if mc.max_sequence_length < corpus.max_tokens() {
        return Err(CliError::Mismatch(format!(
            "sequence limit {} below corpus maximum {}",
            mc.max_sequence_length,
            corpus.max_tokens()
        )));
    }
    Ok((model, corpus))
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    checkpoint: &'a Path,
    reconstruction_accuracy: f64,
    metrics: &'a MetricReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    self_test_mig: Option<f64>,
    config: &'a RunConfig,
}

fn eval<W: Write>(base: RunConfig, ctx: &Ctx, a: EvalArgs, out: &mut W) -> Result<(), CliError> {
    let mut cfg = base;
    if let Some(s) = a.scheme {
        cfg.eval.scheme = match s {
            SchemeArg::Probs => Scheme::Probs,
            SchemeArg::Hard => Scheme::Hard,
        };
    }
    let cfg = cfg.resolve(ctx.seed)?;
    let report_path = a.out.clone().unwrap_or_else(|| {
        a.source
            .checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("eval_report.json")
    });
    ctx.claim(&report_path)?;
    let (model, corpus) = load_pair(&cfg, &a.source)?;
    let metrics = metrics::evaluate_model(&model, &corpus, cfg.eval.scheme, &cfg.eval.metrics)?;
    let accuracy = trainer::evaluate_reconstruction(&model, &corpus)?;
    let self_test = if a.self_test {
        let factors = FactorMatrix::from_corpus(&corpus);
        let perfect = CodeMatrix::perfect(&factors)?;
        let score = metrics::mig(&perfect, &factors)?.score;
        let verdict = if (score - 1.0).abs() <= 1e-6 { "ok" } else { "FAILED" };
        writeln!(out, "self-test: MIG(perfect codes) = {score:.6} {verdict}")?;
        Some(score)
    } else {
        None
    };
    let body = to_json(&EvalOutput {
        checkpoint: &a.source.checkpoint,
        reconstruction_accuracy: accuracy,
        metrics: &metrics,
        self_test_mig: self_test,
        config: &cfg,
    });
    ctx.write(&report_path, &body)?;
    writeln!(out, "reconstruction accuracy {accuracy:.4}")?;
    writeln!(
        out,
        "MIG {:.4}  Z-diff {:.4}  Z-min-var {:.4}  (scheme {}, seed {})",
        metrics.mig, metrics.z_diff, metrics.z_min_var, metrics.scheme, cfg.seed
    )?;
    writeln!(out, "{}\n{}", metrics::CSV_HEADER, metrics.csv_row())?;
    writeln!(out, "report written to {}", report_path.display())?;
    Ok(())
}

fn latent_index(model: &Model, key: &str) -> Result<usize, CliError> {
    let specs = &model.config().latent_specs;
    if let Some(i) = model.config().latent_index(key) {
        return Ok(i);
    }
    match key.parse::<usize>() {
        Ok(i) if i < specs.len() => Ok(i),
        _ => Err(CliError::Usage(format!(
            "unknown latent `{key}` (latents: {})",
            specs.iter().map(|s| s.name.as_str()).collect::<Vec<_>>().join(", ")
        ))),
    }
}

#[derive(Serialize)]
struct TraverseOutput<'a> {
    tables: Vec<&'a evaltools::TraversalTable>,
    verdicts: Vec<&'a evaltools::Judgement>,
    config: &'a RunConfig,
}

fn traverse<W: Write>(base: RunConfig, ctx: &Ctx, a: TraverseArgs, out: &mut W) -> Result<(), CliError> {
    let cfg = base.resolve(ctx.seed)?;
    if let Some(p) = &a.json {
        ctx.claim(p)?;
    }
    let (model, corpus) = load_pair(&cfg, &a.source)?;
    let tokens = match (&a.sentence, a.index) {
        (Some(s), _) => evaltools::parse_sentence(&corpus.vocab, s)?,
        (None, Some(i)) if i < corpus.len() => corpus.examples[i].tokens.clone(),
        (None, Some(i)) => {
            return Err(CliError::Usage(format!(
                "index {i} outside the corpus ({} rows)",
                corpus.len()
            )))
        }
        (None, None) => corpus.examples[0].tokens.clone(),
    };
    let results = if a.all {
        evaltools::traverse_all(&model, &corpus.spec, &corpus.vocab, &tokens)?
    } else {
        let key = a.latent.as_deref().expect("clap requires --latent without --all");
        let t = evaltools::traverse(&model, &corpus.spec, &corpus.vocab, &tokens, latent_index(&model, key)?)?;
        let j = evaltools::judge_traversal(&t, None);
        vec![(t, j)]
    };
    let mut text = String::new();
    for (t, _) in &results {
        let _ = writeln!(text, "{}", t.render_text());
    }
    text.push_str(&evaltools::render_summary(&results));
    write!(out, "{text}")?;
    if let Some(p) = &a.json {
        let body = to_json(&TraverseOutput {
            tables: results.iter().map(|r| &r.0).collect(),
            verdicts: results.iter().map(|r| &r.1).collect(),
            config: &cfg,
        });
        ctx.write(p, &body)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct TransferOutput<'a> {
    report: &'a evaltools::TransferReport,
    config: &'a RunConfig,
}

fn transfer<W: Write>(base: RunConfig, ctx: &Ctx, a: TransferArgs, out: &mut W) -> Result<(), CliError> {
    let mut cfg = base;
    if let Some(m) = a.m {
        cfg.transfer.list_size = m;
    }
    let cfg = cfg.resolve(ctx.seed)?;
    if let Some(p) = &a.json {
        ctx.claim(p)?;
    }
    let (model, corpus) = load_pair(&cfg, &a.source)?;
    let job = TransferJob {
        factor: a.factor,
        source: a.from_value,
        target: a.to_value,
        list_size: cfg.transfer.list_size,
        seed: cfg.seed,
    };
    let report = evaltools::style_transfer(&model, &job, &corpus)?;
    write!(out, "{}", report.render_text())?;
    if let Some(p) = &a.json {
        ctx.write(
            p,
            &to_json(&TransferOutput {
                report: &report,
                config: &cfg,
            }),
        )?;
    }
    Ok(())
}
