//! Sequence autoencoder with discrete latent heads.
//!
//! An LSTM reads the sentence; its final hidden state feeds one linear head
//! per latent variable. The (relaxed or one-hot) latent samples are
//! concatenated in head order and projected to the initial hidden and cell
//! state of an LSTM decoder, which predicts the sentence token by token.

mod checkpoint;
mod lstm;

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_VERSION};
pub use lstm::{lstm_step, LstmVars};

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, BOS, EOS, PAD};
use crate::gumbel::{self, GumbelError};
use crate::numerics::{self, Graph, NumericsError, ParamSet, Tensor, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("empty token sequence")]
    EmptySequence,
    #[error("sequence of {len} tokens exceeds the limit of {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("latent code does not match the model: {0}")]
    CodeShape(String),
    #[error("parameters do not match the config: {0}")]
    ParamShape(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint format version {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Gumbel(#[from] GumbelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentSpec {
    pub name: String,
    pub cardinality: usize,
}

/// Fully resolved architecture, echoed into every checkpoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_specs: Vec<LatentSpec>,
    pub embedding_dim: usize,
    pub encoder_hidden_dim: usize,
    pub decoder_hidden_dim: usize,
    pub vocab_size: usize,
    /// Longest token sequence, begin/end markers included.
    pub max_sequence_length: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.latent_specs.is_empty() {
            return bad("at least one latent variable is required".into());
        }
        for (j, spec) in self.latent_specs.iter().enumerate() {
            if spec.cardinality == 0 {
                return bad(format!("latent `{}` has no categories", spec.name));
            }
            if self.latent_specs[..j].iter().any(|o| o.name == spec.name) {
                return bad(format!("duplicate latent name `{}`", spec.name));
            }
        }
        for (what, v) in [
            ("embedding_dim", self.embedding_dim),
            ("encoder_hidden_dim", self.encoder_hidden_dim),
            ("decoder_hidden_dim", self.decoder_hidden_dim),
        ] {
            if v == 0 {
                return bad(format!("{what} must be positive"));
            }
        }
        if self.vocab_size <= EOS {
            return bad("vocabulary must extend past the reserved ids".into());
        }
        if self.max_sequence_length < 2 {
            return bad("max_sequence_length must allow begin and end markers".into());
        }
        Ok(())
    }

    pub fn cardinalities(&self) -> Vec<usize> {
        self.latent_specs.iter().map(|s| s.cardinality).collect()
    }

    /// Width of the concatenated code.
    pub fn code_width(&self) -> usize {
        self.latent_specs.iter().map(|s| s.cardinality).sum()
    }

    /// Column range of each latent inside the concatenated code.
    pub fn slot_ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.latent_specs
            .iter()
            .map(|s| {
                let r = start..start + s.cardinality;
                start = r.end;
                r
            })
            .collect()
    }

    pub fn latent_index(&self, name: &str) -> Option<usize> {
        self.latent_specs.iter().position(|s| s.name == name)
    }
}

/// Architecture knobs that do not depend on the corpus. Vocabulary size,
/// sequence limit and (by default) the latent layout are filled in from the
/// corpus by [`ArchConfig::resolve`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub embedding_dim: usize,
    pub encoder_hidden_dim: usize,
    pub decoder_hidden_dim: usize,
    /// One head per corpus factor with the factor's cardinality when absent.
    pub latents: Option<Vec<LatentSpec>>,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            embedding_dim: 64,
            encoder_hidden_dim: 256,
            decoder_hidden_dim: 256,
            latents: None,
        }
    }
}

impl ArchConfig {
    pub fn resolve(&self, corpus: &Corpus) -> Result<ModelConfig, ModelError> {
        let latent_specs = match &self.latents {
            Some(l) => l.clone(),
            None => corpus
                .spec
                .factors()
                .iter()
                .map(|f| LatentSpec {
                    name: f.name.clone(),
                    cardinality: f.cardinality,
                })
                .collect(),
        };
        let config = ModelConfig {
            latent_specs,
            embedding_dim: self.embedding_dim,
            encoder_hidden_dim: self.encoder_hidden_dim,
            decoder_hidden_dim: self.decoder_hidden_dim,
            vocab_size: corpus.vocab.len(),
            max_sequence_length: corpus.spec.config().max_tokens,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Per-latent logits, class probabilities and samples of one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub logits: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
    pub samples: Vec<Vec<f64>>,
}

fn one_hot(k: usize, c: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    v[c] = 1.0;
    v
}

impl LatentCode {
    /// Noise-free evaluation code: each sample is the one-hot of the most
    /// probable category.
    pub fn hard(logits: Vec<Vec<f64>>) -> Self {
        let probs: Vec<Vec<f64>> = logits.iter().map(|l| numerics::softmax(l)).collect();
        let samples = logits.iter().map(|l| one_hot(l.len(), gumbel::argmax(l))).collect();
        LatentCode { logits, probs, samples }
    }

    /// Category chosen by each sample.
    pub fn indices(&self) -> Vec<usize> {
        self.samples.iter().map(|y| gumbel::argmax(y)).collect()
    }

    /// Copy with latent `latent` forced to the one-hot of `category`.
    pub fn with_category(&self, latent: usize, category: usize) -> Self {
        let mut out = self.clone();
        let k = out.samples[latent].len();
        assert!(category < k, "category {category} out of range {k}");
        out.samples[latent] = one_hot(k, category);
        out
    }

    /// Samples concatenated in head order.
    pub fn concatenated(&self) -> Vec<f64> {
        self.samples.iter().flatten().copied().collect()
    }
}

/// Relaxed sample of every latent; with `hard` each sample is replaced by
/// the one-hot of its argmax.
pub fn sample_latents<R: Rng + ?Sized>(
    logits: &[Vec<f64>],
    tau: f64,
    rng: &mut R,
    hard: bool,
) -> Result<LatentCode, ModelError> {
    let mut probs = Vec::with_capacity(logits.len());
    let mut samples = Vec::with_capacity(logits.len());
    for l in logits {
        let noise = gumbel::sample_gumbel_noise(l.len(), rng);
        let s = gumbel::gumbel_softmax_sample(l, &noise, tau)?;
        samples.push(if hard { one_hot(l.len(), s.argmax()) } else { s.y });
        probs.push(numerics::softmax(l));
    }
    Ok(LatentCode {
        logits: logits.to_vec(),
        probs,
        samples,
    })
}

/// Padded batch of token sequences, stored time-major.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    columns: Vec<Vec<usize>>,
    lens: Vec<usize>,
}

impl TokenBatch {
    pub fn new<S: AsRef<[usize]>>(seqs: &[S], config: &ModelConfig) -> Result<Self, ModelError> {
        if seqs.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let mut lens = Vec::with_capacity(seqs.len());
        for s in seqs {
            let s = s.as_ref();
            if s.is_empty() {
                return Err(ModelError::EmptySequence);
            }
            if s.len() > config.max_sequence_length {
                return Err(ModelError::TooLong {
                    len: s.len(),
                    max: config.max_sequence_length,
                });
            }
            if let Some(&id) = s.iter().find(|&&id| id >= config.vocab_size) {
                return Err(ModelError::TokenOutOfRange {
                    id,
                    vocab: config.vocab_size,
                });
            }
            lens.push(s.len());
        }
        let width = *lens.iter().max().expect("non-empty batch");
        let columns = (0..width)
            .map(|t| seqs.iter().map(|s| s.as_ref().get(t).copied().unwrap_or(PAD)).collect())
            .collect();
        Ok(TokenBatch { columns, lens })
    }

    pub fn size(&self) -> usize {
        self.lens.len()
    }

    pub fn width(&self) -> usize {
        self.columns.len()
    }

    pub fn lens(&self) -> &[usize] {
        &self.lens
    }

    /// Token ids at position `t` across the batch, PAD past each end.
    pub fn column(&self, t: usize) -> &[usize] {
        &self.columns[t]
    }
}

#[derive(Clone, Copy, Debug)]
struct Lstm {
    w_x: usize,
    w_h: usize,
    bias: usize,
}

/// Positions of every parameter inside the [`ParamSet`].
#[derive(Clone, Debug)]
struct Layout {
    embedding: usize,
    encoder: Lstm,
    heads: Vec<(usize, usize)>,
    init_w: usize,
    init_b: usize,
    decoder: Lstm,
    out_w: usize,
    out_b: usize,
}

/// Expected parameter names and shapes for a config, in storage order.
pub fn param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (e, he, hd, v) = (
        config.embedding_dim,
        config.encoder_hidden_dim,
        config.decoder_hidden_dim,
        config.vocab_size,
    );
    let mut out = vec![
        ("embedding".to_string(), vec![v, e]),
        ("encoder.w_x".into(), vec![e, 4 * he]),
        ("encoder.w_h".into(), vec![he, 4 * he]),
        ("encoder.bias".into(), vec![1, 4 * he]),
    ];
    for spec in &config.latent_specs {
        out.push((format!("head.{}.w", spec.name), vec![he, spec.cardinality]));
        out.push((format!("head.{}.b", spec.name), vec![1, spec.cardinality]));
    }
    out.extend([
        ("init.w".to_string(), vec![config.code_width(), 2 * hd]),
        ("init.b".into(), vec![1, 2 * hd]),
        ("decoder.w_x".into(), vec![e, 4 * hd]),
        ("decoder.w_h".into(), vec![hd, 4 * hd]),
        ("decoder.bias".into(), vec![1, 4 * hd]),
        ("output.w".into(), vec![hd, v]),
        ("output.b".into(), vec![1, v]),
    ]);
    out
}

fn layout(config: &ModelConfig) -> Layout {
    let n = config.latent_specs.len();
    let heads = (0..n).map(|j| (4 + 2 * j, 5 + 2 * j)).collect();
    let base = 4 + 2 * n;
    Layout {
        embedding: 0,
        encoder: Lstm {
            w_x: 1,
            w_h: 2,
            bias: 3,
        },
        heads,
        init_w: base,
        init_b: base + 1,
        decoder: Lstm {
            w_x: base + 2,
            w_h: base + 3,
            bias: base + 4,
        },
        out_w: base + 5,
        out_b: base + 6,
    }
}

/// Parameters of one model bound into a graph, aligned with the model's
/// [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients in parameter order; `None` for parameters the loss did not
    /// reach.
    pub fn grads(&self, g: &Graph) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| g.grad(v)).collect()
    }
}

/// Evaluation batches are split into chunks of this many sentences.
const EVAL_CHUNK: usize = 512;

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamSet,
    layout: Layout,
}

impl Model {
    /// Fresh parameters: weights uniform in `±1/sqrt(fan_in)`, biases zero
    /// except LSTM forget gates at one.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, shape) in param_shapes(&config) {
            let n: usize = shape.iter().product();
            let data = if name.ends_with("bias") {
                let hidden = shape[1] / 4;
                (0..n)
                    .map(|i| if (hidden..2 * hidden).contains(&i) { 1.0 } else { 0.0 })
                    .collect()
            } else if name.ends_with(".b") {
                vec![0.0; n]
            } else {
                let fan_in = if name == "embedding" { shape[1] } else { shape[0] };
                let bound = 1.0 / (fan_in as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            params.insert(name, Tensor::new(shape, data)?);
        }
        let layout = layout(&config);
        Ok(Model { config, params, layout })
    }

    /// Wraps existing parameters after checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = param_shapes(&config);
        if expected.len() != params.len() {
            return Err(ModelError::ParamShape(format!(
                "{} parameters, config needs {}",
                params.len(),
                expected.len()
            )));
        }
        for (i, (name, shape)) in expected.iter().enumerate() {
            if params.name(i) != name || params.get(i).shape() != &shape[..] {
                return Err(ModelError::ParamShape(format!(
                    "slot {i}: found `{}` {:?}, expected `{name}` {shape:?}",
                    params.name(i),
                    params.get(i).shape()
                )));
            }
            if !params.get(i).is_finite() {
                return Err(ModelError::ParamShape(format!("`{name}` is not finite")));
            }
        }
        let layout = layout(&config);
        Ok(Model { config, params, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Registers every parameter in `g`, differentiable when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .params
            .values()
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    fn lstm(&self, b: &Bound, l: Lstm) -> LstmVars {
        LstmVars {
            w_x: b.vars[l.w_x],
            w_h: b.vars[l.w_h],
            bias: b.vars[l.bias],
        }
    }

    /// Per-latent `B x k_j` logits. Each row reads its own sequence only:
    /// past a sequence's end its state is carried over unchanged.
    pub fn encode_graph(&self, g: &mut Graph, b: &Bound, batch: &TokenBatch) -> Result<Vec<Var>, ModelError> {
        let rows = batch.size();
        let hidden = self.config.encoder_hidden_dim;
        let cell = self.lstm(b, self.layout.encoder);
        let mut h = g.constant(Tensor::zeros(&[rows, hidden]));
        let mut c = g.constant(Tensor::zeros(&[rows, hidden]));
        for t in 0..batch.width() {
            let x = g.embedding(b.vars[self.layout.embedding], batch.column(t))?;
            let (h2, c2) = lstm_step(g, &cell, x, h, c)?;
            let active: Vec<bool> = batch.lens().iter().map(|&l| t < l).collect();
            if active.iter().all(|&a| a) {
                (h, c) = (h2, c2);
            } else {
                h = g.select_rows(h2, h, &active)?;
                c = g.select_rows(c2, c, &active)?;
            }
        }
        let mut logits = Vec::with_capacity(self.layout.heads.len());
        for &(w, bias) in &self.layout.heads {
            let z = g.matmul(h, b.vars[w])?;
            logits.push(g.add_row(z, b.vars[bias])?);
        }
        Ok(logits)
    }

    /// Decoder initial `(h, c)` from per-latent `B x k_j` samples.
    fn decoder_init(&self, g: &mut Graph, b: &Bound, samples: &[Var]) -> Result<(Var, Var), ModelError> {
        let widths: Vec<usize> = samples.iter().map(|&s| g.shape(s)[1]).collect();
        if widths != self.config.cardinalities() {
            return Err(ModelError::CodeShape(format!(
                "sample widths {widths:?}, config {:?}",
                self.config.cardinalities()
            )));
        }
        let hidden = self.config.decoder_hidden_dim;
        let z = g.concat(samples)?;
        let proj = g.matmul(z, b.vars[self.layout.init_w])?;
        let proj = g.add_row(proj, b.vars[self.layout.init_b])?;
        let h = g.slice(proj, 0, hidden)?;
        let h = g.tanh(h);
        let c = g.slice(proj, hidden, 2 * hidden)?;
        Ok((h, c))
    }

    fn step_logits(
        &self,
        g: &mut Graph,
        b: &Bound,
        ids: &[usize],
        h: Var,
        c: Var,
    ) -> Result<(Var, Var, Var), ModelError> {
        let cell = self.lstm(b, self.layout.decoder);
        let x = g.embedding(b.vars[self.layout.embedding], ids)?;
        let (h, c) = lstm_step(g, &cell, x, h, c)?;
        let o = g.matmul(h, b.vars[self.layout.out_w])?;
        let o = g.add_row(o, b.vars[self.layout.out_b])?;
        Ok((o, h, c))
    }

    /// Teacher-forced `B x vocab` logits; entry `t` predicts token `t + 1`.
    pub fn decode_teacher_graph(
        &self,
        g: &mut Graph,
        b: &Bound,
        samples: &[Var],
        batch: &TokenBatch,
    ) -> Result<Vec<Var>, ModelError> {
        let (mut h, mut c) = self.decoder_init(g, b, samples)?;
        let mut out = Vec::with_capacity(batch.width().saturating_sub(1));
        for t in 0..batch.width().saturating_sub(1) {
            let (o, h2, c2) = self.step_logits(g, b, batch.column(t), h, c)?;
            (h, c) = (h2, c2);
            out.push(o);
        }
        Ok(out)
    }

    /// Per-latent logits of a single sequence.
    pub fn encode(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>, ModelError> {
        Ok(self.encode_batch(&[tokens])?.pop().expect("one row"))
    }

    /// Per-sequence, per-latent logits.
    pub fn encode_batch<S: AsRef<[usize]>>(&self, seqs: &[S]) -> Result<Vec<Vec<Vec<f64>>>, ModelError> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(EVAL_CHUNK) {
            let batch = TokenBatch::new(chunk, &self.config)?;
            let mut g = Graph::new();
            let b = self.bind(&mut g, false);
            let heads = self.encode_graph(&mut g, &b, &batch)?;
            for r in 0..chunk.len() {
                out.push(heads.iter().map(|&h| g.value(h).row(r).to_vec()).collect());
            }
        }
        Ok(out)
    }

    fn check_code(&self, code: &LatentCode) -> Result<(), ModelError> {
        let widths: Vec<usize> = code.samples.iter().map(Vec::len).collect();
        if widths != self.config.cardinalities() {
            return Err(ModelError::CodeShape(format!(
                "sample widths {widths:?}, config {:?}",
                self.config.cardinalities()
            )));
        }
        Ok(())
    }

    fn sample_vars(&self, g: &mut Graph, codes: &[&LatentCode]) -> Result<Vec<Var>, ModelError> {
        for code in codes {
            self.check_code(code)?;
        }
        let mut vars = Vec::with_capacity(self.config.latent_specs.len());
        for (j, k) in self.config.cardinalities().into_iter().enumerate() {
            let data = codes.iter().flat_map(|c| c.samples[j].iter().copied()).collect();
            vars.push(g.constant(Tensor::new(vec![codes.len(), k], data)?));
        }
        Ok(vars)
    }

    /// Teacher-forced logits for one sequence: `(len - 1) x vocab`.
    pub fn decode_teacher(&self, code: &LatentCode, tokens: &[usize]) -> Result<Tensor, ModelError> {
        let batch = TokenBatch::new(&[tokens], &self.config)?;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let samples = self.sample_vars(&mut g, &[code])?;
        let steps = self.decode_teacher_graph(&mut g, &b, &samples, &batch)?;
        let vocab = self.config.vocab_size;
        let data: Vec<f64> = steps.iter().flat_map(|&s| g.value(s).data().to_vec()).collect();
        Ok(Tensor::new(vec![steps.len(), vocab], data)?)
    }

    /// Greedy decode of one code; see [`Model::greedy_decode_batch`].
    pub fn greedy_decode(&self, code: &LatentCode) -> Result<Vec<usize>, ModelError> {
        Ok(self
            .greedy_decode_batch(std::slice::from_ref(code))?
            .pop()
            .expect("one row"))
    }

    /// Argmax decoding from BOS. Each output holds the generated ids up to and
    /// including EOS, and never more than `max_sequence_length - 1` ids.
    pub fn greedy_decode_batch(&self, codes: &[LatentCode]) -> Result<Vec<Vec<usize>>, ModelError> {
        let mut out = Vec::with_capacity(codes.len());
        for chunk in codes.chunks(EVAL_CHUNK) {
            let refs: Vec<&LatentCode> = chunk.iter().collect();
            let mut g = Graph::new();
            let b = self.bind(&mut g, false);
            let samples = self.sample_vars(&mut g, &refs)?;
            let (mut h, mut c) = self.decoder_init(&mut g, &b, &samples)?;
            let mut current = vec![BOS; chunk.len()];
            let mut seqs: Vec<Vec<usize>> = vec![Vec::new(); chunk.len()];
            let mut done = vec![false; chunk.len()];
            for _ in 0..self.config.max_sequence_length - 1 {
                let (o, h2, c2) = self.step_logits(&mut g, &b, &current, h, c)?;
                (h, c) = (h2, c2);
                let logits = g.value(o);
                for r in 0..chunk.len() {
                    if done[r] {
                        continue;
                    }
                    let next = gumbel::argmax(logits.row(r));
                    seqs[r].push(next);
                    current[r] = next;
                    done[r] = next == EOS;
                }
                if done.iter().all(|&d| d) {
                    break;
                }
            }
            out.extend(seqs);
        }
        Ok(out)
    }

    /// Noise-free one-hot codes for a list of sequences.
    pub fn hard_codes<S: AsRef<[usize]>>(&self, seqs: &[S]) -> Result<Vec<LatentCode>, ModelError> {
        Ok(self.encode_batch(seqs)?.into_iter().map(LatentCode::hard).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            latent_specs: vec![
                LatentSpec {
                    name: "a".into(),
                    cardinality: 3,
                },
                LatentSpec {
                    name: "b".into(),
                    cardinality: 2,
                },
            ],
            embedding_dim: 5,
            encoder_hidden_dim: 6,
            decoder_hidden_dim: 7,
            vocab_size: 9,
            max_sequence_length: 8,
        }
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let m = Model::init(tiny_config(), 1).unwrap();
        let logits = m.encode(&[1, 4, 5, 2]).unwrap();
        assert_eq!(logits.len(), 2);
        assert_eq!(logits[0].len(), 3);
        assert_eq!(logits[1].len(), 2);
        assert_eq!(logits, m.encode(&[1, 4, 5, 2]).unwrap());
        assert!(logits.iter().flatten().all(|v| v.is_finite() && v.abs() < 100.0));
    }

    #[test]
    fn padding_does_not_leak_into_short_rows() {
        let m = Model::init(tiny_config(), 2).unwrap();
        let short: &[usize] = &[1, 4, 2];
        let long: &[usize] = &[1, 5, 6, 7, 8, 2];
        let batched = m.encode_batch(&[short, long]).unwrap();
        assert_eq!(batched[0], m.encode(short).unwrap());
        assert_eq!(batched[1], m.encode(long).unwrap());
    }

    #[test]
    fn encode_rejects_bad_input() {
        let m = Model::init(tiny_config(), 1).unwrap();
        assert!(matches!(m.encode(&[]), Err(ModelError::EmptySequence)));
        assert!(matches!(m.encode(&[1; 9]), Err(ModelError::TooLong { len: 9, max: 8 })));
        assert!(matches!(
            m.encode(&[1, 9]),
            Err(ModelError::TokenOutOfRange { id: 9, vocab: 9 })
        ));
    }

    #[test]
    fn hard_sampling_is_one_hot_and_reproducible() {
        let logits = vec![vec![0.3, -1.0, 2.0], vec![0.0, 0.1], vec![4.0]];
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let a = sample_latents(&logits, 0.7, &mut r1, true).unwrap();
        let b = sample_latents(&logits, 0.7, &mut r2, true).unwrap();
        assert_eq!(a, b);
        for y in &a.samples {
            assert_eq!(y.iter().filter(|&&v| v == 1.0).count(), 1);
            assert_eq!(y.iter().filter(|&&v| v == 0.0).count(), y.len() - 1);
        }
        assert_eq!(a.samples[2], vec![1.0]);
        let soft = sample_latents(&logits, 0.7, &mut r1, false).unwrap();
        for (y, p) in soft.samples.iter().zip(&soft.probs) {
            assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn teacher_and_greedy_decoding() {
        let m = Model::init(tiny_config(), 3).unwrap();
        let code = LatentCode::hard(m.encode(&[1, 4, 5, 2]).unwrap());
        let logits = m.decode_teacher(&code, &[1, 4, 5, 2]).unwrap();
        assert_eq!(logits.shape(), &[3, 9]);
        let a = m.greedy_decode(&code).unwrap();
        assert_eq!(a, m.greedy_decode(&code).unwrap());
        assert!(a.len() <= 7);
        assert!(a.iter().take(a.len().saturating_sub(1)).all(|&t| t != EOS));
        let flipped = code.with_category(0, (code.indices()[0] + 1) % 3);
        let restored = flipped.with_category(0, code.indices()[0]);
        assert_eq!(m.greedy_decode(&restored).unwrap(), a);
    }

    #[test]
    fn code_shape_is_checked() {
        let m = Model::init(tiny_config(), 3).unwrap();
        let code = LatentCode::hard(vec![vec![0.0, 1.0], vec![0.0, 1.0]]);
        assert!(matches!(m.greedy_decode(&code), Err(ModelError::CodeShape(_))));
    }

    #[test]
    fn reconstruction_gradient_reaches_the_encoder() {
        let m = Model::init(tiny_config(), 4).unwrap();
        let seqs: [&[usize]; 2] = [&[1, 4, 5, 2], &[1, 6, 2]];
        let batch = TokenBatch::new(&seqs, m.config()).unwrap();
        let mut g = Graph::new();
        let b = m.bind(&mut g, true);
        let logits = m.encode_graph(&mut g, &b, &batch).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let samples: Vec<Var> = logits
            .iter()
            .map(|&l| {
                let (rows, k) = (g.shape(l)[0], g.shape(l)[1]);
                let noise: Vec<f64> = (0..rows)
                    .flat_map(|_| gumbel::sample_gumbel_noise(k, &mut rng))
                    .collect();
                let noise = Tensor::new(vec![rows, k], noise).unwrap();
                gumbel::gumbel_softmax(&mut g, l, &noise, 1.0).unwrap()
            })
            .collect();
        let steps = m.decode_teacher_graph(&mut g, &b, &samples, &batch).unwrap();
        let lsm = g.log_softmax(steps[0]);
        let picked = g.gather(lsm, batch.column(1)).unwrap();
        let loss = g.sum(picked);
        g.backward(loss).unwrap();
        let grads = b.grads(&g);
        let enc = m.params().index_of("encoder.w_x").unwrap();
        let norm: f64 = grads[enc].as_ref().unwrap().data().iter().map(|v| v * v).sum();
        assert!(norm > 0.0);
    }

    #[test]
    fn from_params_validates() {
        let m = Model::init(tiny_config(), 1).unwrap();
        let mut other = tiny_config();
        other.decoder_hidden_dim = 3;
        assert!(matches!(
            Model::from_params(other, m.params().clone()),
            Err(ModelError::ParamShape(_))
        ));
        assert!(Model::from_params(tiny_config(), m.params().clone()).is_ok());
    }
}
