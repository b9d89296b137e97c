//! Disentanglement scores over (code, true factor) pairs: mutual
//! information gap, Z-diff and Z-min-var.
//!
//! Sampling inside Z-diff and Z-min-var walks examples in a canonical
//! content order (factor vector, then code row), so the scores do not depend
//! on the order in which examples are supplied.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Corpus;
use crate::model::{Model, ModelError};
use crate::numerics::{self, Adam, Graph, NumericsError, ParamSet, Tensor};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("no paired observations left after dropping unknown entries")]
    Empty,
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("code and factor matrices have {codes} and {factors} rows")]
    RowMismatch { codes: usize, factors: usize },
    #[error("{0}")]
    Unsupported(String),
    #[error("could not find a factor value with two examples after {0} tries")]
    SingletonValues(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    /// Concatenated class-probability vectors.
    Probs,
    /// One category index per latent.
    Hard,
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Probs => "probs",
            Scheme::Hard => "hard",
        })
    }
}

/// Representation of every example; `slots[j]` are the columns of latent `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeMatrix {
    pub rows: Vec<Vec<f64>>,
    pub scheme: Scheme,
    pub slots: Vec<Range<usize>>,
}

impl CodeMatrix {
    pub fn new(rows: Vec<Vec<f64>>, scheme: Scheme, slots: Vec<Range<usize>>) -> Result<Self, MetricError> {
        let width = slots.last().map_or(0, |s| s.end);
        let contiguous = slots.iter().scan(0, |next, s| {
            let ok = s.start == *next && s.end > s.start;
            *next = s.end;
            Some(ok)
        });
        if slots.is_empty() || !contiguous.into_iter().all(|ok| ok) {
            return Err(MetricError::Unsupported("slots must partition the row".into()));
        }
        if rows.iter().any(|r| r.len() != width) {
            return Err(MetricError::Unsupported(format!("every row must have {width} columns")));
        }
        if scheme == Scheme::Hard && slots.iter().any(|s| s.len() != 1) {
            return Err(MetricError::Unsupported("hard codes use one column per latent".into()));
        }
        Ok(CodeMatrix { rows, scheme, slots })
    }

    /// Hard codes from category indices.
    pub fn from_indices(indices: &[Vec<usize>]) -> Result<Self, MetricError> {
        let n = indices.first().map_or(0, Vec::len);
        CodeMatrix::new(
            indices.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect(),
            Scheme::Hard,
            (0..n).map(|j| j..j + 1).collect(),
        )
    }

    /// Probability codes that are the exact one-hot of every known factor;
    /// unknown entries become uniform.
    pub fn perfect(factors: &FactorMatrix) -> Result<Self, MetricError> {
        let mut slots = Vec::new();
        let mut start = 0;
        for &k in &factors.cardinalities {
            slots.push(start..start + k);
            start += k;
        }
        let rows = factors
            .rows
            .iter()
            .map(|r| {
                r.iter()
                    .zip(&factors.cardinalities)
                    .flat_map(|(v, &k)| match v {
                        Some(v) => (0..k).map(|c| f64::from(u8::from(c == *v))).collect::<Vec<_>>(),
                        None => vec![1.0 / k as f64; k],
                    })
                    .collect()
            })
            .collect();
        CodeMatrix::new(rows, Scheme::Probs, slots)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn num_latents(&self) -> usize {
        self.slots.len()
    }

    /// Category index of every latent (hard scheme: the stored value;
    /// probability scheme: the argmax of the slot).
    pub fn indices(&self) -> Vec<Vec<usize>> {
        self.rows
            .iter()
            .map(|r| {
                self.slots
                    .iter()
                    .map(|s| match self.scheme {
                        Scheme::Hard => r[s.start] as usize,
                        Scheme::Probs => crate::gumbel::argmax(&r[s.clone()]),
                    })
                    .collect()
            })
            .collect()
    }

    fn slot_of(&self) -> Vec<usize> {
        let mut owner = Vec::new();
        for (j, s) in self.slots.iter().enumerate() {
            owner.extend(std::iter::repeat_n(j, s.len()));
        }
        owner
    }
}

/// True factors aligned with code rows; `None` marks an unknown value.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorMatrix {
    pub rows: Vec<Vec<Option<usize>>>,
    pub cardinalities: Vec<usize>,
    pub names: Vec<String>,
}

impl FactorMatrix {
    pub fn from_corpus(corpus: &Corpus) -> Self {
        FactorMatrix {
            rows: corpus.examples.iter().map(|e| e.factors.clone()).collect(),
            cardinalities: corpus.spec.cardinalities(),
            names: corpus.spec.factors().iter().map(|f| f.name.clone()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, k: usize) -> Vec<Option<usize>> {
        self.rows.iter().map(|r| r[k]).collect()
    }
}

/// Encodes every corpus sentence.
pub fn represent(model: &Model, corpus: &Corpus, scheme: Scheme) -> Result<CodeMatrix, MetricError> {
    let seqs: Vec<&[usize]> = corpus.examples.iter().map(|e| e.tokens.as_slice()).collect();
    let logits = model.encode_batch(&seqs)?;
    let config = model.config();
    match scheme {
        Scheme::Probs => CodeMatrix::new(
            logits
                .iter()
                .map(|heads| heads.iter().flat_map(|l| numerics::softmax(l)).collect())
                .collect(),
            Scheme::Probs,
            config.slot_ranges(),
        ),
        Scheme::Hard => CodeMatrix::from_indices(
            &logits
                .iter()
                .map(|heads| heads.iter().map(|l| crate::gumbel::argmax(l)).collect())
                .collect::<Vec<_>>(),
        ),
    }
}

/// Plug-in entropy (nats) of the known entries of a series.
pub fn entropy_discrete(x: &[Option<usize>]) -> Result<f64, MetricError> {
    let mut counts: HashMap<usize, usize> = HashMap::new();
    let mut n = 0usize;
    for v in x.iter().flatten() {
        *counts.entry(*v).or_default() += 1;
        n += 1;
    }
    if n == 0 {
        return Err(MetricError::Empty);
    }
    let mut c: Vec<usize> = counts.into_values().collect();
    c.sort_unstable();
    let n = n as f64;
    Ok(-c
        .iter()
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>())
}

/// Plug-in mutual information (nats) from the joint count table; pairs with
/// an unknown entry on either side are dropped.
pub fn mutual_info_discrete(x: &[Option<usize>], y: &[Option<usize>]) -> Result<f64, MetricError> {
    if x.len() != y.len() {
        return Err(MetricError::LengthMismatch(x.len(), y.len()));
    }
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut cx: HashMap<usize, usize> = HashMap::new();
    let mut cy: HashMap<usize, usize> = HashMap::new();
    let mut n = 0usize;
    for (a, b) in x.iter().zip(y) {
        if let (Some(a), Some(b)) = (a, b) {
            *joint.entry((*a, *b)).or_default() += 1;
            *cx.entry(*a).or_default() += 1;
            *cy.entry(*b).or_default() += 1;
            n += 1;
        }
    }
    if n == 0 {
        return Err(MetricError::Empty);
    }
    // fixed summation order keeps the value bit-stable
    let mut cells: Vec<((usize, usize), usize)> = joint.into_iter().collect();
    cells.sort_unstable();
    let n = n as f64;
    let mi: f64 = cells
        .iter()
        .map(|&((a, b), c)| {
            let c = c as f64;
            c / n * (c * n / (cx[&a] as f64 * cy[&b] as f64)).ln()
        })
        .sum();
    Ok(mi.max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorMi {
    pub factor: String,
    pub entropy: f64,
    /// MI with each latent, in latent order.
    pub mi: Vec<f64>,
    /// Normalized top-two gap; `None` when the factor was excluded.
    pub gap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MigResult {
    pub score: f64,
    pub per_factor: Vec<FactorMi>,
}

/// Mean over factors of `(I(top latent; v) - I(second latent; v)) / H(v)`,
/// with the category index of each latent as its discrete value.
/// Zero-entropy factors are excluded with a warning.
pub fn mig(codes: &CodeMatrix, factors: &FactorMatrix) -> Result<MigResult, MetricError> {
    if codes.len() != factors.len() {
        return Err(MetricError::RowMismatch {
            codes: codes.len(),
            factors: factors.len(),
        });
    }
    if codes.num_latents() < 2 {
        return Err(MetricError::Unsupported("MIG needs at least two latents".into()));
    }
    let idx = codes.indices();
    let latents: Vec<Vec<Option<usize>>> = (0..codes.num_latents())
        .map(|j| idx.iter().map(|r| Some(r[j])).collect())
        .collect();
    let mut per_factor = Vec::new();
    let mut gaps = Vec::new();
    for k in 0..factors.cardinalities.len() {
        let v = factors.column(k);
        let name = factors.names.get(k).cloned().unwrap_or_else(|| format!("factor{k}"));
        let h = entropy_discrete(&v)?;
        let mi = latents
            .iter()
            .map(|z| mutual_info_discrete(z, &v))
            .collect::<Result<Vec<_>, _>>()?;
        let gap = if h <= 1e-12 {
            log::warn!("factor `{name}` has zero entropy; excluded from MIG");
            None
        } else {
            let mut sorted = mi.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
            let g = ((sorted[0] - sorted[1]) / h).clamp(0.0, 1.0);
            gaps.push(g);
            Some(g)
        };
        per_factor.push(FactorMi {
            factor: name,
            entropy: h,
            mi,
            gap,
        });
    }
    if gaps.is_empty() {
        return Err(MetricError::Unsupported("every factor has zero entropy".into()));
    }
    Ok(MigResult {
        score: gaps.iter().sum::<f64>() / gaps.len() as f64,
        per_factor,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ZConfig {
    pub num_points: usize,
    pub pairs_per_point: usize,
    pub seed: u64,
    pub epochs: usize,
    pub learning_rate: f64,
}

impl Default for ZConfig {
    fn default() -> Self {
        ZConfig {
            num_points: 5000,
            pairs_per_point: 32,
            seed: 0,
            epochs: 200,
            learning_rate: 1e-2,
        }
    }
}

const MAX_RETRIES: usize = 1000;

/// Examples grouped by (factor, value) in canonical content order.
struct Groups {
    /// `by_factor[k]`: canonical positions of examples with factor k known.
    by_factor: Vec<Vec<usize>>,
    /// `(k, value) -> canonical positions` sharing that value.
    by_value: HashMap<(usize, usize), Vec<usize>>,
    /// Factors with at least one value shared by two examples.
    eligible: Vec<usize>,
    /// Canonical position -> original row.
    order: Vec<usize>,
}

fn cmp_rows(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| *o != Ordering::Equal)
        .unwrap_or(Ordering::Equal)
}

impl Groups {
    fn new(codes: &CodeMatrix, factors: &FactorMatrix) -> Self {
        let mut order: Vec<usize> = (0..codes.len()).collect();
        order.sort_by(|&a, &b| {
            factors.rows[a]
                .cmp(&factors.rows[b])
                .then_with(|| cmp_rows(&codes.rows[a], &codes.rows[b]))
        });
        let n_factors = factors.cardinalities.len();
        let mut by_factor = vec![Vec::new(); n_factors];
        let mut by_value: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
        for (pos, &row) in order.iter().enumerate() {
            for (k, v) in factors.rows[row].iter().enumerate() {
                if let Some(v) = v {
                    by_factor[k].push(pos);
                    by_value.entry((k, *v)).or_default().push(pos);
                }
            }
        }
        let eligible = (0..n_factors)
            .filter(|&k| {
                let values: Vec<&Vec<usize>> = by_value.iter().filter(|((f, _), _)| *f == k).map(|(_, g)| g).collect();
                values.len() >= 2 && values.iter().any(|g| g.len() >= 2)
            })
            .collect();
        Groups {
            by_factor,
            by_value,
            eligible,
            order,
        }
    }

    /// A factor, and the group of a value of it holding two or more examples.
    fn pick<R: Rng>(&self, factors: &FactorMatrix, rng: &mut R) -> Result<(usize, &[usize]), MetricError> {
        let k = *self
            .eligible
            .choose(rng)
            .ok_or_else(|| MetricError::Unsupported("no factor varies with repeated values".into()))?;
        for _ in 0..MAX_RETRIES {
            let pos = *self.by_factor[k].choose(rng).expect("eligible factor has examples");
            let v = factors.rows[self.order[pos]][k].expect("indexed by known value");
            let group = &self.by_value[&(k, v)];
            if group.len() >= 2 {
                return Ok((k, group));
            }
        }
        Err(MetricError::SingletonValues(MAX_RETRIES))
    }
}

fn check_z_inputs(codes: &CodeMatrix, factors: &FactorMatrix, cfg: &ZConfig) -> Result<(), MetricError> {
    if codes.len() != factors.len() {
        return Err(MetricError::RowMismatch {
            codes: codes.len(),
            factors: factors.len(),
        });
    }
    if cfg.num_points < 5 || cfg.pairs_per_point == 0 {
        return Err(MetricError::Unsupported(
            "need at least 5 points and 1 pair per point".into(),
        ));
    }
    Ok(())
}

/// Shuffled 80/20 split of `0..n`.
fn split<R: Rng>(n: usize, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let cut = (n * 4) / 5;
    let test = idx.split_off(cut);
    (idx, test)
}

/// Z-diff: each point fixes one factor, averages `|z1 - z2|` over pairs that
/// share its value, and is labelled by the factor; the score is the held-out
/// accuracy of a softmax-regression classifier on those features.
pub fn z_diff(codes: &CodeMatrix, factors: &FactorMatrix, cfg: &ZConfig) -> Result<f64, MetricError> {
    check_z_inputs(codes, factors, cfg)?;
    let groups = Groups::new(codes, factors);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let width = codes.rows[0].len();
    let mut features = Vec::with_capacity(cfg.num_points);
    let mut labels = Vec::with_capacity(cfg.num_points);
    for _ in 0..cfg.num_points {
        let (k, group) = groups.pick(factors, &mut rng)?;
        let mut feat = vec![0.0; width];
        for _ in 0..cfg.pairs_per_point {
            let pair: Vec<&usize> = group.choose_multiple(&mut rng, 2).collect();
            let a = &codes.rows[groups.order[*pair[0]]];
            let b = &codes.rows[groups.order[*pair[1]]];
            for ((f, x), y) in feat.iter_mut().zip(a).zip(b) {
                *f += (x - y).abs();
            }
        }
        feat.iter_mut().for_each(|f| *f /= cfg.pairs_per_point as f64);
        features.push(feat);
        labels.push(k);
    }
    let (train, test) = split(features.len(), &mut rng);
    let classes = factors.cardinalities.len();
    let model = fit_softmax_regression(&features, &labels, &train, classes, cfg)?;
    let hits = test
        .iter()
        .filter(|&&i| model.predict(&features[i]) == labels[i])
        .count();
    Ok(hits as f64 / test.len() as f64)
}

struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    fn predict(&self, x: &[f64]) -> usize {
        let classes = self.b.len();
        let scores: Vec<f64> = (0..classes)
            .map(|c| {
                self.b.data()[c]
                    + x.iter()
                        .enumerate()
                        .map(|(d, v)| v * self.w.data()[d * classes + c])
                        .sum::<f64>()
            })
            .collect();
        crate::gumbel::argmax(&scores)
    }
}

/// Full-batch multinomial logistic regression trained with Adam.
fn fit_softmax_regression(
    features: &[Vec<f64>],
    labels: &[usize],
    rows: &[usize],
    classes: usize,
    cfg: &ZConfig,
) -> Result<Linear, MetricError> {
    let width = features[0].len();
    let x = Tensor::from_rows(&rows.iter().map(|&i| features[i].clone()).collect::<Vec<_>>())?;
    let y: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
    let mut params = ParamSet::new();
    params.insert("w", Tensor::zeros(&[width, classes]));
    params.insert("b", Tensor::zeros(&[1, classes]));
    let mut adam = Adam::new(cfg.learning_rate);
    for _ in 0..cfg.epochs {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let w = g.param(params.get(0).clone());
        let b = g.param(params.get(1).clone());
        let z = g.matmul(xv, w)?;
        let z = g.add_row(z, b)?;
        let lsm = g.log_softmax(z);
        let picked = g.gather(lsm, &y)?;
        let mean = g.mean(picked);
        let loss = g.neg(mean);
        g.backward(loss)?;
        adam.step(&mut params, &[g.grad(w), g.grad(b)])?;
    }
    Ok(Linear {
        w: params.get(0).clone(),
        b: params.get(1).clone(),
    })
}

/// Z-min-var: each point fixes one factor value, takes a batch sharing it,
/// scales every code dimension by its global standard deviation and votes
/// for the latent owning the least-variance dimension. A majority-vote table
/// from latent to factor is built on the training points; the score is its
/// held-out accuracy. Constant dimensions are excluded with a warning.
/// Relative gap below which two normalized variances are a tie.
const TIE_TOLERANCE: f64 = 1e-9;

pub fn z_min_var(codes: &CodeMatrix, factors: &FactorMatrix, cfg: &ZConfig) -> Result<f64, MetricError> {
    check_z_inputs(codes, factors, cfg)?;
    let groups = Groups::new(codes, factors);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let width = codes.rows[0].len();
    let n = codes.len() as f64;
    let std: Vec<f64> = (0..width)
        .map(|d| {
            let mean = codes.rows.iter().map(|r| r[d]).sum::<f64>() / n;
            (codes.rows.iter().map(|r| (r[d] - mean).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect();
    let active: Vec<usize> = (0..width).filter(|&d| std[d] > 0.0).collect();
    if active.len() < width {
        log::warn!(
            "{} code dimensions have zero variance and are excluded from Z-min-var",
            width - active.len()
        );
    }
    if active.is_empty() {
        return Err(MetricError::Unsupported("every code dimension is constant".into()));
    }
    let owner = codes.slot_of();
    let mut votes = Vec::with_capacity(cfg.num_points);
    for _ in 0..cfg.num_points {
        let (k, group) = groups.pick(factors, &mut rng)?;
        let batch: Vec<usize> = (0..cfg.pairs_per_point)
            .map(|_| groups.order[*group.choose(&mut rng).expect("non-empty group")])
            .collect();
        let m = batch.len() as f64;
        let mut best = (f64::INFINITY, active[0]);
        for &d in &active {
            let vals: Vec<f64> = batch.iter().map(|&r| codes.rows[r][d] / std[d]).collect();
            let mean = vals.iter().sum::<f64>() / m;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
            // variances equal up to rounding count as ties, which go to the
            // lowest dimension whatever the code scale
            if var < best.0 * (1.0 - TIE_TOLERANCE) {
                best = (var, d);
            }
        }
        votes.push((owner[best.1], k));
    }
    let (train, test) = split(votes.len(), &mut rng);
    let classes = factors.cardinalities.len();
    let mut table = vec![vec![0usize; classes]; codes.num_latents()];
    let mut overall = vec![0usize; classes];
    for &i in &train {
        let (slot, k) = votes[i];
        table[slot][k] += 1;
        overall[k] += 1;
    }
    let fallback = majority(&overall);
    let lookup: Vec<usize> = table
        .iter()
        .map(|row| {
            if row.iter().all(|&c| c == 0) {
                fallback
            } else {
                majority(row)
            }
        })
        .collect();
    let hits = test.iter().filter(|&&i| lookup[votes[i].0] == votes[i].1).count();
    Ok(hits as f64 / test.len() as f64)
}

/// Index of the largest count, lowest index on ties.
fn majority(counts: &[usize]) -> usize {
    counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map_or(0, |(i, _)| i)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub z_diff: f64,
    pub z_min_var: f64,
    pub mig: f64,
    pub mig_per_factor: Vec<FactorMi>,
    /// Scheme fed to Z-diff and Z-min-var; MIG always uses hard codes.
    pub scheme: Scheme,
    pub examples: usize,
    pub z_config: ZConfig,
}

pub const CSV_HEADER: &str = "z_diff,z_min_var,mig,scheme,examples,num_points,pairs_per_point,seed";

impl MetricReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.z_diff,
            self.z_min_var,
            self.mig,
            self.scheme,
            self.examples,
            self.z_config.num_points,
            self.z_config.pairs_per_point,
            self.z_config.seed
        )
    }
}

/// All three scores. `z_codes` feeds Z-diff and Z-min-var; MIG uses the
/// category indices of `mig_codes`.
pub fn evaluate_codes(
    z_codes: &CodeMatrix,
    mig_codes: &CodeMatrix,
    factors: &FactorMatrix,
    cfg: &ZConfig,
) -> Result<MetricReport, MetricError> {
    let m = mig(mig_codes, factors)?;
    Ok(MetricReport {
        z_diff: z_diff(z_codes, factors, cfg)?,
        z_min_var: z_min_var(z_codes, factors, cfg)?,
        mig: m.score,
        mig_per_factor: m.per_factor,
        scheme: z_codes.scheme,
        examples: factors.len(),
        z_config: cfg.clone(),
    })
}

/// Scores a model on a corpus.
pub fn evaluate_model(
    model: &Model,
    corpus: &Corpus,
    scheme: Scheme,
    cfg: &ZConfig,
) -> Result<MetricReport, MetricError> {
    let factors = FactorMatrix::from_corpus(corpus);
    let hard = represent(model, corpus, Scheme::Hard)?;
    let z_codes = match scheme {
        Scheme::Hard => hard.clone(),
        Scheme::Probs => represent(model, corpus, Scheme::Probs)?,
    };
    evaluate_codes(&z_codes, &hard, &factors, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(cards: &[usize], copies: usize) -> FactorMatrix {
        let total: usize = cards.iter().product();
        let mut rows = Vec::with_capacity(total * copies);
        for _ in 0..copies {
            for mut i in 0..total {
                let mut row = vec![None; cards.len()];
                for (pos, &k) in cards.iter().enumerate().rev() {
                    row[pos] = Some(i % k);
                    i /= k;
                }
                rows.push(row);
            }
        }
        FactorMatrix {
            rows,
            cardinalities: cards.to_vec(),
            names: (0..cards.len()).map(|k| format!("f{k}")).collect(),
        }
    }

    fn random_codes(n: usize, cards: &[usize], seed: u64) -> CodeMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut slots = Vec::new();
        let mut start = 0;
        for &k in cards {
            slots.push(start..start + k);
            start += k;
        }
        let rows = (0..n)
            .map(|_| {
                cards
                    .iter()
                    .flat_map(|&k| {
                        let l: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
                        numerics::softmax(&l)
                    })
                    .collect()
            })
            .collect();
        CodeMatrix::new(rows, Scheme::Probs, slots).unwrap()
    }

    #[test]
    fn mi_basics() {
        let x: Vec<Option<usize>> = (0..300).map(|i| Some(i % 3)).collect();
        assert!((mutual_info_discrete(&x, &x).unwrap() - 3f64.ln()).abs() < 1e-12);
        let c: Vec<Option<usize>> = vec![Some(0); 300];
        assert_eq!(mutual_info_discrete(&c, &x).unwrap(), 0.0);
        let none: Vec<Option<usize>> = vec![None; 300];
        assert!(matches!(mutual_info_discrete(&none, &x), Err(MetricError::Empty)));
        assert!(mutual_info_discrete(&x[..2], &x).is_err());
    }

    #[test]
    fn mi_of_independent_series_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<Option<usize>> = (0..100_000).map(|_| Some(rng.gen_range(0..4))).collect();
        let y: Vec<Option<usize>> = (0..100_000).map(|_| Some(rng.gen_range(0..4))).collect();
        assert!(mutual_info_discrete(&x, &y).unwrap() <= 0.01);
    }

    #[test]
    fn unknown_entries_are_dropped_pairwise() {
        let x = vec![Some(0), Some(1), None, Some(1)];
        let y = vec![Some(0), Some(1), Some(0), None];
        assert!((mutual_info_discrete(&x, &y).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn mig_of_copied_factors_is_one() {
        let f = grid(&[3, 2, 2, 3, 8], 1);
        let codes = CodeMatrix::from_indices(
            &f.rows
                .iter()
                .map(|r| r.iter().map(|v| v.unwrap()).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let m = mig(&codes, &f).unwrap();
        assert!((m.score - 1.0).abs() < 1e-6);
    }

    #[test]
    fn mig_is_zero_for_a_latent_holding_two_factors() {
        // latent 0 encodes both binary factors (4 values); latent 1 constant
        let f = grid(&[2, 2], 10);
        let idx: Vec<Vec<usize>> = f
            .rows
            .iter()
            .map(|r| vec![r[0].unwrap() * 2 + r[1].unwrap(), 0])
            .collect();
        let m = mig(&CodeMatrix::from_indices(&idx).unwrap(), &f).unwrap();
        // top MI = H(v) for each factor, second = 0: gap is 1 for both
        assert!((m.score - 1.0).abs() < 1e-9);
        // two latents both copying both factors: gap 0 for each
        let idx: Vec<Vec<usize>> = f
            .rows
            .iter()
            .map(|r| {
                let v = r[0].unwrap() * 2 + r[1].unwrap();
                vec![v, v]
            })
            .collect();
        let m = mig(&CodeMatrix::from_indices(&idx).unwrap(), &f).unwrap();
        assert!(m.score.abs() < 1e-12);
        assert!(m.per_factor.iter().all(|p| p.gap == Some(0.0)));
    }

    #[test]
    fn mig_relabel_invariant_and_skips_constant_factors() {
        let mut f = grid(&[3, 2], 5);
        f.cardinalities.push(1);
        f.names.push("const".into());
        f.rows.iter_mut().for_each(|r| r.push(Some(0)));
        let idx: Vec<Vec<usize>> = f.rows.iter().map(|r| vec![r[0].unwrap(), r[1].unwrap()]).collect();
        let relabeled: Vec<Vec<usize>> = idx.iter().map(|r| vec![(r[0] + 1) % 3, 1 - r[1]]).collect();
        let a = mig(&CodeMatrix::from_indices(&idx).unwrap(), &f).unwrap();
        let b = mig(&CodeMatrix::from_indices(&relabeled).unwrap(), &f).unwrap();
        assert_eq!(a.score, b.score);
        assert_eq!(a.per_factor[2].gap, None);
        assert!((a.score - 1.0).abs() < 1e-9);
    }

    #[test]
    fn z_scores_on_perfect_codes() {
        let f = grid(&[3, 2, 2, 3, 8], 1);
        let codes = CodeMatrix::perfect(&f).unwrap();
        let cfg = ZConfig {
            num_points: 1000,
            ..ZConfig::default()
        };
        assert!(z_diff(&codes, &f, &cfg).unwrap() >= 0.99);
        assert!(z_min_var(&codes, &f, &cfg).unwrap() >= 0.99);
    }

    #[test]
    fn z_scores_on_noise_are_near_chance() {
        let f = grid(&[3, 2, 2, 3, 8], 1);
        let codes = random_codes(f.len(), &[3, 2, 2, 3, 8], 3);
        let cfg = ZConfig {
            num_points: 1000,
            ..ZConfig::default()
        };
        assert!(z_diff(&codes, &f, &cfg).unwrap() <= 0.3);
        assert!(z_min_var(&codes, &f, &cfg).unwrap() <= 0.3);
    }

    #[test]
    fn z_scores_are_seeded_and_order_free() {
        let f = grid(&[3, 2, 4], 3);
        let codes = random_codes(f.len(), &[3, 2, 4], 5);
        let cfg = ZConfig {
            num_points: 300,
            ..ZConfig::default()
        };
        let a = z_diff(&codes, &f, &cfg).unwrap();
        assert_eq!(a, z_diff(&codes, &f, &cfg).unwrap());
        let mut perm: Vec<usize> = (0..f.len()).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(0));
        let pf = FactorMatrix {
            rows: perm.iter().map(|&i| f.rows[i].clone()).collect(),
            ..f.clone()
        };
        let pc = CodeMatrix {
            rows: perm.iter().map(|&i| codes.rows[i].clone()).collect(),
            ..codes.clone()
        };
        assert_eq!(a, z_diff(&pc, &pf, &cfg).unwrap());
        assert_eq!(z_min_var(&codes, &f, &cfg).unwrap(), z_min_var(&pc, &pf, &cfg).unwrap());
    }

    #[test]
    fn z_min_var_ignores_scale_and_duplicated_columns() {
        let f = grid(&[3, 2, 4], 3);
        let codes = random_codes(f.len(), &[3, 2, 4], 6);
        let cfg = ZConfig {
            num_points: 300,
            ..ZConfig::default()
        };
        let base = z_min_var(&codes, &f, &cfg).unwrap();
        let scaled = CodeMatrix {
            rows: codes
                .rows
                .iter()
                .map(|r| r.iter().enumerate().map(|(d, v)| v * 2f64.powi(d as i32 % 4)).collect())
                .collect(),
            ..codes.clone()
        };
        assert_eq!(base, z_min_var(&scaled, &f, &cfg).unwrap());
        // repeat the last column inside the last slot
        let mut slots = codes.slots.clone();
        slots.last_mut().unwrap().end += 1;
        let dup = CodeMatrix::new(
            codes
                .rows
                .iter()
                .map(|r| {
                    let mut r = r.clone();
                    r.push(*r.last().unwrap());
                    r
                })
                .collect(),
            Scheme::Probs,
            slots,
        )
        .unwrap();
        assert_eq!(base, z_min_var(&dup, &f, &cfg).unwrap());
    }

    #[test]
    fn singleton_values_error_out() {
        let f = FactorMatrix {
            rows: vec![vec![Some(0)], vec![Some(1)], vec![Some(2)]],
            cardinalities: vec![3],
            names: vec!["f".into()],
        };
        let codes = random_codes(3, &[3], 0);
        assert!(z_diff(&codes, &f, &ZConfig::default()).is_err());
    }

    #[test]
    fn report_csv_matches_header() {
        let r = MetricReport {
            z_diff: 0.5,
            z_min_var: 0.25,
            mig: 0.125,
            mig_per_factor: vec![],
            scheme: Scheme::Probs,
            examples: 288,
            z_config: ZConfig::default(),
        };
        assert_eq!(r.csv_row().split(',').count(), CSV_HEADER.split(',').count());
        assert!(r.csv_row().starts_with("0.5,0.25,0.125,probs,288"));
    }
}
