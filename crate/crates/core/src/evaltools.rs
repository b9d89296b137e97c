//! Latent traversal and latent-arithmetic style transfer.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, GrammarSpec, Vocabulary};
use crate::model::{LatentCode, Model, ModelError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("latent {index} out of range ({count} latents)")]
    LatentOutOfRange { index: usize, count: usize },
    #[error("words not in the vocabulary: {}", .0.join(", "))]
    UnknownWords(Vec<String>),
    #[error("unknown factor `{0}`")]
    UnknownFactor(String),
    #[error("factor `{factor}` has no value `{value}` (values: {})", .known.join(", "))]
    UnknownValue {
        factor: String,
        value: String,
        known: Vec<String>,
    },
    #[error(
        "need {need} sentences per value: `{source_value}` has {source_count}, `{target_value}` has {target_count}"
    )]
    Insufficient {
        need: usize,
        source_value: String,
        source_count: usize,
        target_value: String,
        target_count: usize,
    },
    #[error("source list size must be at least 1")]
    EmptyList,
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Decoded sentence for one category of the traversed latent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraversalRow {
    pub category: usize,
    /// Category index of every latent fed to the decoder.
    pub code: Vec<usize>,
    pub sentence: String,
    pub factors: Vec<Option<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraversalTable {
    pub input: String,
    pub input_code: Vec<usize>,
    pub latent: usize,
    pub latent_name: String,
    pub factor_names: Vec<String>,
    /// One row per category, in category order.
    pub rows: Vec<TraversalRow>,
}

fn sentence_of(vocab: &Vocabulary, ids: &[usize]) -> String {
    vocab.decode(ids).join(" ")
}

/// Splits on whitespace and maps to ids, listing vocabulary misses.
pub fn parse_sentence(vocab: &Vocabulary, text: &str) -> Result<Vec<usize>, EvalError> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let misses = vocab.misses(&words);
    if !misses.is_empty() || words.is_empty() {
        return Err(EvalError::UnknownWords(misses.into_iter().map(String::from).collect()));
    }
    Ok(vocab.encode(&words))
}

/// Decodes the sentence's hard code with latent `latent` set to every one
/// of its categories in turn; the other latents are left untouched.
pub fn traverse(
    model: &Model,
    spec: &GrammarSpec,
    vocab: &Vocabulary,
    tokens: &[usize],
    latent: usize,
) -> Result<TraversalTable, EvalError> {
    let count = model.config().latent_specs.len();
    if latent >= count {
        return Err(EvalError::LatentOutOfRange { index: latent, count });
    }
    let code = model.hard_codes(&[tokens])?.pop().expect("one code");
    let k = model.config().latent_specs[latent].cardinality;
    let variants: Vec<LatentCode> = (0..k).map(|c| code.with_category(latent, c)).collect();
    let outputs = model.greedy_decode_batch(&variants)?;
    let rows = variants
        .iter()
        .zip(&outputs)
        .enumerate()
        .map(|(c, (v, out))| {
            let words = vocab.decode(out);
            TraversalRow {
                category: c,
                code: v.indices(),
                sentence: words.join(" "),
                factors: spec.extract(&words),
            }
        })
        .collect();
    Ok(TraversalTable {
        input: sentence_of(vocab, tokens),
        input_code: code.indices(),
        latent,
        latent_name: model.config().latent_specs[latent].name.clone(),
        factor_names: spec.factors().iter().map(|f| f.name.clone()).collect(),
        rows,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Disentangled,
    Entangled,
    Inconclusive,
}

impl Verdict {
    pub fn symbol(self) -> &'static str {
        match self {
            Verdict::Disentangled => "✓",
            Verdict::Entangled => "✗",
            Verdict::Inconclusive => "?",
        }
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Verdict::Disentangled => "disentangled",
            Verdict::Entangled => "entangled",
            Verdict::Inconclusive => "inconclusive",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Judgement {
    pub verdict: Verdict,
    /// Factor the latent was judged against; `None` when inconclusive.
    pub factor: Option<usize>,
}

fn distinct(values: impl Iterator<Item = usize>) -> usize {
    let mut v: Vec<usize> = values.collect();
    v.sort_unstable();
    v.dedup();
    v.len()
}

/// Disentangled iff the mapped factor takes two or more values across the
/// rows while every other factor stays constant. Without a mapping, the
/// factor with the most distinct values is used (lowest index on ties).
/// Any unknown extraction makes the verdict inconclusive.
pub fn judge_traversal(table: &TraversalTable, mapping: Option<usize>) -> Judgement {
    let n_factors = table.factor_names.len();
    let known: Option<Vec<Vec<usize>>> = table
        .rows
        .iter()
        .map(|r| r.factors.iter().copied().collect::<Option<Vec<_>>>())
        .collect();
    let Some(known) = known.filter(|k| !k.is_empty() && n_factors > 0) else {
        return Judgement {
            verdict: Verdict::Inconclusive,
            factor: None,
        };
    };
    let diversity: Vec<usize> = (0..n_factors).map(|k| distinct(known.iter().map(|r| r[k]))).collect();
    let target = mapping.unwrap_or_else(|| {
        let best = *diversity.iter().max().expect("at least one factor");
        diversity.iter().position(|&d| d == best).expect("max exists")
    });
    let others_fixed = diversity.iter().enumerate().all(|(k, &d)| k == target || d == 1);
    let verdict = if diversity.get(target).is_some_and(|&d| d >= 2) && others_fixed {
        Verdict::Disentangled
    } else {
        Verdict::Entangled
    };
    Judgement {
        verdict,
        factor: Some(target),
    }
}

impl TraversalTable {
    /// Aligned plain-text table: the input first, then one row per category.
    pub fn render_text(&self) -> String {
        let label = |c: &str| format!("{}={}", self.latent_name, c);
        let mut left = vec!["input".to_string()];
        left.extend(self.rows.iter().map(|r| label(&r.category.to_string())));
        let width = left.iter().map(|s| s.chars().count()).max().unwrap_or(0);
        let mut out = String::new();
        let _ = writeln!(out, "{:width$}  {}", left[0], self.input);
        for (l, r) in left[1..].iter().zip(&self.rows) {
            let _ = writeln!(
                out,
                "{l:width$}  {}  [{}]",
                r.sentence,
                crate::corpus::format_factors(&r.factors)
            );
        }
        out
    }
}

/// Traversal table and verdict for every latent.
pub fn traverse_all(
    model: &Model,
    spec: &GrammarSpec,
    vocab: &Vocabulary,
    tokens: &[usize],
) -> Result<Vec<(TraversalTable, Judgement)>, EvalError> {
    (0..model.config().latent_specs.len())
        .map(|j| {
            let t = traverse(model, spec, vocab, tokens, j)?;
            let v = judge_traversal(&t, None);
            Ok((t, v))
        })
        .collect()
}

/// One verdict line per latent.
pub fn render_summary(results: &[(TraversalTable, Judgement)]) -> String {
    let mut out = String::new();
    for (t, j) in results {
        let factor = j.factor.and_then(|k| t.factor_names.get(k)).map_or("-", String::as_str);
        let _ = writeln!(
            out,
            "latent {:<16} factor {:<16} {} {}",
            t.latent_name,
            factor,
            j.verdict.symbol(),
            j.verdict
        );
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferJob {
    pub factor: String,
    pub source: String,
    pub target: String,
    /// Size of each averaged sentence list.
    pub list_size: usize,
    pub seed: u64,
}

impl TransferJob {
    pub fn new(factor: &str, source: &str, target: &str) -> Self {
        TransferJob {
            factor: factor.into(),
            source: source.into(),
            target: target.into(),
            list_size: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferPair {
    pub input: String,
    pub output: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub job: TransferJob,
    /// Sentences averaged on each side.
    pub list_size: usize,
    pub evaluated: usize,
    pub accuracy: f64,
    /// Fraction of (sentence, other factor) pairs left unchanged.
    pub retention: f64,
    pub examples: Vec<TransferPair>,
}

const EXAMPLE_PAIRS: usize = 5;

struct ResolvedJob {
    factor: usize,
    source: usize,
    target: usize,
}

fn resolve(job: &TransferJob, spec: &GrammarSpec) -> Result<ResolvedJob, EvalError> {
    let (factor, fs) = spec
        .factor_by_name(&job.factor)
        .ok_or_else(|| EvalError::UnknownFactor(job.factor.clone()))?;
    let value = |label: &str| {
        fs.value_index(label).ok_or_else(|| EvalError::UnknownValue {
            factor: job.factor.clone(),
            value: label.into(),
            known: fs.value_labels.clone(),
        })
    };
    Ok(ResolvedJob {
        factor,
        source: value(&job.source)?,
        target: value(&job.target)?,
    })
}

/// Elementwise mean of per-latent logits.
fn mean_logits(logits: &[&Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let n = logits.len() as f64;
    let mut acc: Vec<Vec<f64>> = logits[0].iter().map(|l| vec![0.0; l.len()]).collect();
    for code in logits {
        for (a, l) in acc.iter_mut().zip(code.iter()) {
            for (x, y) in a.iter_mut().zip(l) {
                *x += y;
            }
        }
    }
    acc.iter_mut().flatten().for_each(|x| *x /= n);
    acc
}

/// Adds a per-latent shift to per-latent logits.
pub fn shift_logits(logits: &[Vec<f64>], shift: &[Vec<f64>]) -> Vec<Vec<f64>> {
    logits
        .iter()
        .zip(shift)
        .map(|(l, s)| l.iter().zip(s).map(|(a, b)| a + b).collect())
        .collect()
}

/// Moves sentences from the source to the target value by adding the
/// difference of mean encoder logits (target list minus source list) to
/// each source sentence's logits, then decoding the argmax code.
pub fn style_transfer(model: &Model, job: &TransferJob, corpus: &Corpus) -> Result<TransferReport, EvalError> {
    if job.list_size == 0 {
        return Err(EvalError::EmptyList);
    }
    let r = resolve(job, &corpus.spec)?;
    // selection goes through the extractor, as for scoring
    let extracted: Vec<Vec<Option<usize>>> = (0..corpus.len())
        .map(|i| corpus.spec.extract(&corpus.words(i)))
        .collect();
    let with_value = |v: usize| -> Vec<usize> {
        (0..corpus.len())
            .filter(|&i| extracted[i][r.factor] == Some(v))
            .collect()
    };
    let (src_all, tgt_all) = (with_value(r.source), with_value(r.target));
    let available = src_all.len().min(tgt_all.len());
    if available == 0 {
        return Err(EvalError::Insufficient {
            need: 1,
            source_value: job.source.clone(),
            source_count: src_all.len(),
            target_value: job.target.clone(),
            target_count: tgt_all.len(),
        });
    }
    let m = job.list_size.min(available);
    // each list depends only on (seed, value), so equal values give equal lists
    let pick = |all: &[usize], v: usize| -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(job.seed);
        rng.set_stream(v as u64 + 1);
        let mut chosen: Vec<usize> = all.choose_multiple(&mut rng, m).copied().collect();
        chosen.sort_unstable();
        chosen
    };
    let seqs: Vec<&[usize]> = corpus.examples.iter().map(|e| e.tokens.as_slice()).collect();
    let logits = model.encode_batch(&seqs)?;
    let mean_of = |ids: &[usize]| mean_logits(&ids.iter().map(|&i| &logits[i]).collect::<Vec<_>>());
    let (tgt_mean, src_mean) = (mean_of(&pick(&tgt_all, r.target)), mean_of(&pick(&src_all, r.source)));
    let shift: Vec<Vec<f64>> = tgt_mean
        .iter()
        .zip(&src_mean)
        .map(|(t, s)| t.iter().zip(s).map(|(a, b)| a - b).collect())
        .collect();
    // an identity job is a no-op: sentences pass through untouched
    let words: Vec<Vec<String>> = if r.source == r.target {
        src_all.iter().map(|&i| corpus.words(i)).collect()
    } else {
        let src_logits: Vec<Vec<Vec<f64>>> = src_all.iter().map(|&i| logits[i].clone()).collect();
        transfer_with_shift(model, &src_logits, &shift)?
            .iter()
            .map(|o| corpus.vocab.decode(o))
            .collect()
    };
    let out_factors: Vec<Vec<Option<usize>>> = words.iter().map(|w| corpus.spec.extract(w)).collect();
    let accuracy = transfer_accuracy(&out_factors, r.factor, r.target);
    let mut kept = 0usize;
    let mut checked = 0usize;
    for (&i, out) in src_all.iter().zip(&out_factors) {
        for (k, v) in extracted[i].iter().enumerate() {
            if k != r.factor && v.is_some() {
                checked += 1;
                kept += usize::from(out[k] == *v);
            }
        }
    }
    let examples = src_all
        .iter()
        .zip(&words)
        .take(EXAMPLE_PAIRS)
        .map(|(&i, w)| TransferPair {
            input: corpus.words(i).join(" "),
            output: w.join(" "),
        })
        .collect();
    Ok(TransferReport {
        job: job.clone(),
        list_size: m,
        evaluated: src_all.len(),
        accuracy,
        retention: if checked == 0 {
            1.0
        } else {
            kept as f64 / checked as f64
        },
        examples,
    })
}

/// Greedy decodes of the argmax codes of `logits + shift`.
pub fn transfer_with_shift(
    model: &Model,
    logits: &[Vec<Vec<f64>>],
    shift: &[Vec<f64>],
) -> Result<Vec<Vec<usize>>, EvalError> {
    let codes: Vec<LatentCode> = logits
        .iter()
        .map(|l| LatentCode::hard(shift_logits(l, shift)))
        .collect();
    Ok(model.greedy_decode_batch(&codes)?)
}

/// Fraction of outputs whose extracted factor equals `target`; unknown
/// extractions count as failures.
pub fn transfer_accuracy(outputs: &[Vec<Option<usize>>], factor: usize, target: usize) -> f64 {
    if outputs.is_empty() {
        return 0.0;
    }
    let hits = outputs
        .iter()
        .filter(|f| f.get(factor).copied().flatten() == Some(target))
        .count();
    hits as f64 / outputs.len() as f64
}

impl TransferReport {
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{}: {} -> {}  accuracy {:.4}  retention {:.4}  ({} sentences, lists of {})",
            self.job.factor,
            self.job.source,
            self.job.target,
            self.accuracy,
            self.retention,
            self.evaluated,
            self.list_size
        );
        for p in &self.examples {
            let _ = writeln!(out, "  {}  =>  {}", p.input, p.output);
        }
        out
    }
}
