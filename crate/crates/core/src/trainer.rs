//! Seeded training loop, loss log and reconstruction evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, GrammarSpec};
use crate::gumbel::{self, GumbelConfig, GumbelError};
use crate::model::{ArchConfig, Checkpoint, LatentCode, Model, ModelConfig, ModelError, RngState, TokenBatch};
use crate::numerics::{Adam, Graph, NumericsError, Tensor, Var};
use crate::objective::{self, LossBreakdown, ObjectiveConfig, ObjectiveError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step}; last good parameters saved to {saved}")]
    NonFinite { step: u64, saved: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Gumbel(#[from] GumbelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub total_steps: u64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub objective: ObjectiveConfig,
    pub gumbel: GumbelConfig,
    pub model: ArchConfig,
    /// Periodic checkpoint interval in steps; 0 keeps only the final one.
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub corpus: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for TrainConfig {
    /// Desk defaults. The capacity target is the batch-attainable budget of
    /// the default desk latents rather than the published 30 nats.
    fn default() -> Self {
        let batch_size = 64;
        let desk = GrammarSpec::desk();
        TrainConfig {
            seed: 0,
            total_steps: 30_000,
            batch_size,
            learning_rate: 1e-3,
            objective: ObjectiveConfig {
                capacity_end: round6(objective::batch_capacity_budget(&desk.cardinalities(), batch_size)),
                ..ObjectiveConfig::default()
            },
            gumbel: GumbelConfig::default(),
            model: ArchConfig::default(),
            checkpoint_every: 5_000,
            log_every: 100,
            corpus: PathBuf::from("data/desk"),
            output_dir: PathBuf::from("runs/desk"),
        }
    }
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.total_steps == 0 {
            return bad("total_steps must be positive");
        }
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.log_every == 0 {
            return bad("log_every must be positive");
        }
        self.objective.validate()?;
        self.gumbel.validate()?;
        Ok(())
    }

    /// Non-fatal configuration concerns.
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.total_steps < self.objective.capacity_anneal_steps {
            out.push(format!(
                "total_steps {} is below capacity_anneal_steps {}: the capacity never reaches its target",
                self.total_steps, self.objective.capacity_anneal_steps
            ));
        }
        out
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    pub final_loss: LossBreakdown,
    pub token_accuracy: f64,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub steps: u64,
    pub config: TrainConfig,
    pub model: ModelConfig,
    /// Excluded from the JSON so reports stay byte-identical across reruns.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

pub const LOSS_LOG_HEADER: &str = "step,recon,mi,dwkl,tc,capacity,ctc_penalty,total,tau";

fn log_row(step: u64, l: &LossBreakdown, tau: f64) -> String {
    format!(
        "{step},{},{},{},{},{},{},{},{}\n",
        l.reconstruction, l.mi, l.dwkl, l.tc, l.capacity, l.ctc_penalty, l.total, tau
    )
}

/// One parsed loss-log row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss: LossBreakdown,
    pub tau: f64,
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LogRow>, TrainError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(LOSS_LOG_HEADER) {
        return Err(TrainError::InvalidConfig(format!(
            "{} is not a loss log",
            path.display()
        )));
    }
    lines
        .map(|line| {
            let f: Vec<f64> = line
                .split(',')
                .map(|v| v.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| TrainError::InvalidConfig(format!("bad loss log row `{line}`: {e}")))?;
            if f.len() != 9 {
                return Err(TrainError::InvalidConfig(format!("bad loss log row `{line}`")));
            }
            Ok(LogRow {
                step: f[0] as u64,
                loss: LossBreakdown {
                    reconstruction: f[1],
                    mi: f[2],
                    dwkl: f[3],
                    tc: f[4],
                    capacity: f[5],
                    ctc_penalty: f[6],
                    total: f[7],
                },
                tau: f[8],
            })
        })
        .collect()
}

/// Output locations inside a run directory.
pub fn final_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("final.ckpt")
}

pub fn loss_log_path(dir: &Path) -> PathBuf {
    dir.join("loss.csv")
}

pub fn report_path(dir: &Path) -> PathBuf {
    dir.join("train_report.json")
}

/// Loads the corpus named by the config and trains on it.
pub fn train(cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    let corpus = Corpus::read_dir(&cfg.corpus)?;
    train_on(cfg, &corpus)
}

/// Per-step outcome of [`train_step`].
struct StepOutcome {
    loss: LossBreakdown,
    grads: Vec<Option<Tensor>>,
}

fn train_step(
    model: &Model,
    corpus: &Corpus,
    cfg: &TrainConfig,
    step: u64,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome, TrainError> {
    let picks: Vec<&[usize]> = (0..cfg.batch_size)
        .map(|_| corpus.examples[rng.gen_range(0..corpus.len())].tokens.as_slice())
        .collect();
    let batch = TokenBatch::new(&picks, model.config())?;
    let tau = gumbel::tau_at_step(step, &cfg.gumbel);
    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let logits = model.encode_graph(&mut g, &bound, &batch)?;
    let mut probs = Vec::with_capacity(logits.len());
    let mut samples = Vec::with_capacity(logits.len());
    for &l in &logits {
        let k = g.shape(l)[1];
        let noise: Vec<f64> = (0..batch.size())
            .flat_map(|_| gumbel::sample_gumbel_noise(k, rng))
            .collect();
        let noise = Tensor::new(vec![batch.size(), k], noise)?;
        samples.push(gumbel::gumbel_softmax(&mut g, l, &noise, tau)?);
        probs.push(g.softmax(l));
    }
    let steps = model.decode_teacher_graph(&mut g, &bound, &samples, &batch)?;
    let recon = objective::reconstruction_loss(&mut g, &steps, &batch)?;
    let kl = objective::decompose_kl_graph(&mut g, &probs, rng)?;
    let (total, loss): (Var, LossBreakdown) = objective::total_loss_graph(&mut g, recon, kl, step, &cfg.objective)?;
    if !loss.total.is_finite() {
        return Ok(StepOutcome {
            loss,
            grads: Vec::new(),
        });
    }
    g.backward(total)?;
    Ok(StepOutcome {
        loss,
        grads: bound.grads(&g),
    })
}

fn rng_for(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // stream 0 initialises the parameters
    rng.set_stream(1);
    rng
}

/// Runs the full schedule on an in-memory corpus, writing the loss log and
/// checkpoints under `cfg.output_dir`.
pub fn train_on(cfg: &TrainConfig, corpus: &Corpus) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    for w in cfg.warnings() {
        log::warn!("{w}");
    }
    let started = Instant::now();
    let model_config = cfg.model.resolve(corpus)?;
    let mut model = Model::init(model_config.clone(), cfg.seed)?;
    let mut adam = Adam::new(cfg.learning_rate);
    let mut rng = rng_for(cfg.seed);
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir)?;
    let mut log = String::from(LOSS_LOG_HEADER);
    log.push('\n');
    let mut last = LossBreakdown::default();
    for step in 0..cfg.total_steps {
        let rng_before = rng.get_word_pos();
        let outcome = train_step(&model, corpus, cfg, step, &mut rng)?;
        let finite = outcome.loss.total.is_finite();
        let stepped = finite && adam.step(model.params_mut(), &outcome.grads).is_ok();
        if !stepped {
            let saved = dir.join("last-good.ckpt");
            Checkpoint {
                model: model.clone(),
                rng: RngState {
                    seed: cfg.seed,
                    word_pos: rng_before,
                },
                step,
            }
            .save(&saved)?;
            fs::write(loss_log_path(dir), &log)?;
            let diag = format!(
                "step {step}: non-finite {} \n{:#?}\n",
                if finite { "gradient" } else { "loss" },
                outcome.loss
            );
            fs::write(dir.join("diagnostic.txt"), diag)?;
            return Err(TrainError::NonFinite {
                step,
                saved: saved.display().to_string(),
            });
        }
        last = outcome.loss;
        if step % cfg.log_every == 0 || step + 1 == cfg.total_steps {
            log.push_str(&log_row(step, &last, gumbel::tau_at_step(step, &cfg.gumbel)));
        }
        let done = step + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.total_steps {
            Checkpoint {
                model: model.clone(),
                rng: RngState {
                    seed: cfg.seed,
                    word_pos: rng.get_word_pos(),
                },
                step: done,
            }
            .save(&dir.join(format!("step-{done}.ckpt")))?;
        }
        if step % (cfg.log_every * 10) == 0 {
            log::info!(
                "step {step}: total {:.4} recon {:.4} tc {:.4} capacity {:.4}",
                last.total,
                last.reconstruction,
                last.tc,
                last.capacity
            );
        }
    }
    fs::write(loss_log_path(dir), &log)?;
    let checkpoint = final_checkpoint_path(dir);
    Checkpoint {
        model: model.clone(),
        rng: RngState {
            seed: cfg.seed,
            word_pos: rng.get_word_pos(),
        },
        step: cfg.total_steps,
    }
    .save(&checkpoint)?;
    let token_accuracy = evaluate_reconstruction(&model, corpus)?;
    let report = TrainReport {
        final_loss: last,
        token_accuracy,
        checkpoint,
        loss_log: loss_log_path(dir),
        steps: cfg.total_steps,
        config: cfg.clone(),
        model: model_config,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    fs::write(report_path(dir), report_json(&report))?;
    Ok(report)
}

pub fn report_json(report: &TrainReport) -> String {
    let mut s = serde_json::to_string_pretty(report).expect("report serializes");
    s.push('\n');
    s
}

/// Anything that maps token sequences to reconstructed token sequences
/// (generated ids after BOS, EOS included when produced).
pub trait Reconstructor {
    fn reconstruct(&self, seqs: &[&[usize]]) -> Result<Vec<Vec<usize>>, ModelError>;
}

impl Reconstructor for Model {
    /// Greedy decode from the noise-free one-hot code of each sequence.
    fn reconstruct(&self, seqs: &[&[usize]]) -> Result<Vec<Vec<usize>>, ModelError> {
        let codes: Vec<LatentCode> = self.hard_codes(seqs)?;
        self.greedy_decode_batch(&codes)
    }
}

/// Position-wise match rate of `outputs` against `targets[i][1..]`; missing
/// output positions count as mismatches.
pub fn token_accuracy(targets: &[&[usize]], outputs: &[Vec<usize>]) -> f64 {
    let mut total = 0usize;
    let mut hits = 0usize;
    for (t, o) in targets.iter().zip(outputs) {
        let want = &t[1.min(t.len())..];
        total += want.len();
        hits += want.iter().zip(o).filter(|(a, b)| a == b).count();
    }
    if total == 0 {
        return 0.0;
    }
    hits as f64 / total as f64
}

/// Token accuracy of reconstructing every corpus sentence.
pub fn evaluate_reconstruction<M: Reconstructor + ?Sized>(model: &M, corpus: &Corpus) -> Result<f64, ModelError> {
    let seqs: Vec<&[usize]> = corpus.examples.iter().map(|e| e.tokens.as_slice()).collect();
    let outputs = model.reconstruct(&seqs)?;
    Ok(token_accuracy(&seqs, &outputs))
}

/// Renders a report summary for terminals.
pub fn report_summary(report: &TrainReport) -> String {
    let mut s = String::new();
    let l = &report.final_loss;
    let _ = writeln!(s, "steps            {}", report.steps);
    let _ = writeln!(s, "token accuracy   {:.4}", report.token_accuracy);
    let _ = writeln!(
        s,
        "final loss       total {:.4} recon {:.4} mi {:.4} dwkl {:.4} tc {:.4} (capacity {:.4})",
        l.total, l.reconstruction, l.mi, l.dwkl, l.tc, l.capacity
    );
    let _ = writeln!(s, "checkpoint       {}", report.checkpoint.display());
    let _ = writeln!(s, "loss log         {}", report.loss_log.display());
    let _ = writeln!(s, "wall clock       {:.1}s", report.wall_clock_secs);
    s
}
