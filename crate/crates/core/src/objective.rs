//! Training objective: reconstruction plus the three-way split of the
//! posterior-to-prior KL into index-code mutual information, dimension-wise
//! KL and total correlation, with the total correlation pulled towards a
//! scheduled capacity.
//!
//! The minibatch stands in for the data distribution. The aggregate
//! posterior `q(d)` is the batch mean of the per-example factored joints;
//! the prior is a product of uniform categoricals. Below
//! [`MAX_EXACT_SUPPORT`] joint configurations every term is computed
//! exactly; above it, `tc` and `mi` use one sampled assignment per example.
//! Every quantity is in nats and stored in minimized form.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::PAD;
use crate::model::TokenBatch;
use crate::numerics::{self, xlogx, Graph, NumericsError, Tensor, Var};

/// Largest joint support handled by exact enumeration.
pub const MAX_EXACT_SUPPORT: usize = 4096;
const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("invalid objective config: {0}")]
    InvalidConfig(String),
    #[error("need at least {needed} examples, got {got}")]
    BatchTooSmall { needed: usize, got: usize },
    #[error("example {example}, latent {latent}: {msg}")]
    NotSimplex { example: usize, latent: usize, msg: String },
    #[error("example {example} has latent widths {got:?}, expected {expected:?}")]
    Layout {
        example: usize,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("joint support {support} exceeds the enumeration limit {MAX_EXACT_SUPPORT}")]
    SupportTooLarge { support: usize },
    #[error("{positions} logit steps for a batch of width {width}")]
    StepCount { positions: usize, width: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Controlled total correlation.
    Dctc,
    /// Same objective with the total-correlation penalty switched off.
    #[serde(alias = "gamma-zero-ablation")]
    GammaZero,
    /// Plain KL weighted by `beta`.
    BetaKl,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Dctc => "dctc",
            Mode::GammaZero => "gamma-zero",
            Mode::BetaKl => "beta-kl",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveConfig {
    pub gamma: f64,
    pub capacity_start: f64,
    pub capacity_end: f64,
    pub capacity_anneal_steps: u64,
    pub mode: Mode,
    /// Only read in `beta-kl` mode.
    pub beta: f64,
}

impl Default for ObjectiveConfig {
    /// Published settings: `gamma = 50`, capacity 0 to 30 nats over 25k steps.
    fn default() -> Self {
        ObjectiveConfig {
            gamma: 50.0,
            capacity_start: 0.0,
            capacity_end: 30.0,
            capacity_anneal_steps: 25_000,
            mode: Mode::Dctc,
            beta: 1.0,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<(), ObjectiveError> {
        let bad = |m: &str| Err(ObjectiveError::InvalidConfig(m.into()));
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad("gamma must be finite and non-negative");
        }
        if !(self.capacity_start >= 0.0 && self.capacity_end.is_finite()) {
            return bad("capacities must be finite and non-negative");
        }
        if self.capacity_start > self.capacity_end {
            return bad("capacity_start exceeds capacity_end");
        }
        if self.capacity_anneal_steps == 0 {
            return bad("capacity_anneal_steps must be positive");
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad("beta must be finite and non-negative");
        }
        Ok(())
    }

    /// Weight on `|tc - C|` actually applied.
    pub fn effective_gamma(&self) -> f64 {
        match self.mode {
            Mode::Dctc => self.gamma,
            Mode::GammaZero | Mode::BetaKl => 0.0,
        }
    }
}

/// Largest total correlation a batch of `batch_size` distinct one-hot codes
/// can show under latents of the given cardinalities, floored at zero:
/// `sum_j ln k_j - ln batch_size`.
pub fn batch_capacity_budget(cardinalities: &[usize], batch_size: usize) -> f64 {
    let bits: f64 = cardinalities.iter().map(|&k| (k as f64).ln()).sum();
    (bits - (batch_size.max(1) as f64).ln()).max(0.0)
}

/// Linear ramp from `capacity_start` to `capacity_end`, clamped afterwards.
pub fn capacity_at_step(step: u64, cfg: &ObjectiveConfig) -> f64 {
    if step >= cfg.capacity_anneal_steps {
        return cfg.capacity_end;
    }
    let frac = step as f64 / cfg.capacity_anneal_steps as f64;
    cfg.capacity_start + frac * (cfg.capacity_end - cfg.capacity_start)
}

/// Per-example, per-latent class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct PosteriorBatch {
    probs: Vec<Vec<Vec<f64>>>,
    cards: Vec<usize>,
}

impl PosteriorBatch {
    pub fn new(probs: Vec<Vec<Vec<f64>>>) -> Result<Self, ObjectiveError> {
        let first = probs
            .first()
            .ok_or(ObjectiveError::BatchTooSmall { needed: 1, got: 0 })?;
        let cards: Vec<usize> = first.iter().map(Vec::len).collect();
        for (i, row) in probs.iter().enumerate() {
            let got: Vec<usize> = row.iter().map(Vec::len).collect();
            if got != cards || cards.contains(&0) {
                return Err(ObjectiveError::Layout {
                    example: i,
                    got,
                    expected: cards,
                });
            }
            for (j, p) in row.iter().enumerate() {
                let err = |msg: String| ObjectiveError::NotSimplex {
                    example: i,
                    latent: j,
                    msg,
                };
                if let Some(v) = p.iter().find(|v| **v < -SIMPLEX_TOL || !v.is_finite()) {
                    return Err(err(format!("component {v}")));
                }
                let total: f64 = p.iter().sum();
                if (total - 1.0).abs() > SIMPLEX_TOL {
                    return Err(err(format!("sums to {total}")));
                }
            }
        }
        Ok(PosteriorBatch { probs, cards })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn cardinalities(&self) -> &[usize] {
        &self.cards
    }

    pub fn rows(&self) -> &[Vec<Vec<f64>>] {
        &self.probs
    }

    pub fn support(&self) -> usize {
        self.cards.iter().product()
    }

    /// Batch-mean marginal of latent `j`.
    pub fn marginal(&self, j: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.cards[j]];
        for row in &self.probs {
            for (m, p) in m.iter_mut().zip(&row[j]) {
                *m += p;
            }
        }
        let n = self.len() as f64;
        m.iter_mut().for_each(|m| *m /= n);
        m
    }

    fn require_pair(&self) -> Result<(), ObjectiveError> {
        if self.len() < 2 {
            return Err(ObjectiveError::BatchTooSmall {
                needed: 2,
                got: self.len(),
            });
        }
        Ok(())
    }
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| xlogx(v.max(0.0))).sum::<f64>()
}

/// Index-code MI, dimension-wise KL and total correlation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KlTerms {
    pub mi: f64,
    pub dwkl: f64,
    pub tc: f64,
}

impl KlTerms {
    pub fn sum(&self) -> f64 {
        self.mi + self.dwkl + self.tc
    }
}

/// Batch mean of `KL(q(d|x) || p(d))` under the uniform product prior.
pub fn mean_kl_to_prior(batch: &PosteriorBatch) -> f64 {
    let total: f64 = batch
        .rows()
        .iter()
        .map(|row| row.iter().map(|p| (p.len() as f64).ln() - entropy(p)).sum::<f64>())
        .sum();
    total / batch.len() as f64
}

fn dwkl_exact(batch: &PosteriorBatch) -> f64 {
    (0..batch.cards.len())
        .map(|j| (batch.cards[j] as f64).ln() - entropy(&batch.marginal(j)))
        .sum()
}

/// All three terms by enumerating the joint support.
pub fn exact_kl_decomposition(batch: &PosteriorBatch) -> Result<KlTerms, ObjectiveError> {
    batch.require_pair()?;
    let support = batch.support();
    if support > MAX_EXACT_SUPPORT {
        return Err(ObjectiveError::SupportTooLarge { support });
    }
    let n = batch.len() as f64;
    let mut aggregate = vec![0.0; support];
    let mut cond_entropy = 0.0;
    let mut idx = vec![0usize; batch.cards.len()];
    for row in batch.rows() {
        cond_entropy += row.iter().map(|p| entropy(p)).sum::<f64>() / n;
        idx.iter_mut().for_each(|i| *i = 0);
        for cell in aggregate.iter_mut() {
            let q: f64 = idx.iter().zip(row).map(|(&i, p)| p[i]).product();
            *cell += q / n;
            // mixed-radix increment, last latent fastest
            for pos in (0..idx.len()).rev() {
                idx[pos] += 1;
                if idx[pos] < batch.cards[pos] {
                    break;
                }
                idx[pos] = 0;
            }
        }
    }
    let joint_entropy = entropy(&aggregate);
    let marginal_entropy: f64 = (0..batch.cards.len()).map(|j| entropy(&batch.marginal(j))).sum();
    Ok(KlTerms {
        mi: joint_entropy - cond_entropy,
        dwkl: dwkl_exact(batch),
        tc: marginal_entropy - joint_entropy,
    })
}

/// Sampled-assignment estimate with per-term standard errors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampledKl {
    pub terms: KlTerms,
    pub std_err: KlTerms,
}

fn draw<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    // rounding left `u` above the cumulative total
    p.iter().rposition(|&v| v > 0.0).unwrap_or(p.len() - 1)
}

/// Draws `draws` assignments per example from its factored posterior and
/// averages `log q(d) - sum_j log q(d_j)` (tc) and `log q(d|x) - log q(d)`
/// (mi), with `q(d)` the exact batch mixture evaluated at the draw. `dwkl`
/// only needs the marginals and is exact (zero standard error).
pub fn sampled_kl_decomposition<R: Rng + ?Sized>(
    batch: &PosteriorBatch,
    draws: usize,
    rng: &mut R,
) -> Result<SampledKl, ObjectiveError> {
    batch.require_pair()?;
    let draws = draws.max(1);
    let n_latents = batch.cards.len();
    let marginals: Vec<Vec<f64>> = (0..n_latents).map(|j| batch.marginal(j)).collect();
    let mut tc_vals = Vec::with_capacity(batch.len() * draws);
    let mut mi_vals = Vec::with_capacity(batch.len() * draws);
    for row in batch.rows() {
        for _ in 0..draws {
            let d: Vec<usize> = row.iter().map(|p| draw(p, rng)).collect();
            let aggregate: f64 = batch
                .rows()
                .iter()
                .map(|other| d.iter().zip(other).map(|(&i, p)| p[i]).product::<f64>())
                .sum::<f64>()
                / batch.len() as f64;
            let log_q = aggregate.ln();
            let log_marg: f64 = d.iter().zip(&marginals).map(|(&i, m)| m[i].ln()).sum();
            let log_cond: f64 = d.iter().zip(row).map(|(&i, p)| p[i].ln()).sum();
            tc_vals.push(log_q - log_marg);
            mi_vals.push(log_cond - log_q);
        }
    }
    let (tc, tc_se) = mean_and_se(&tc_vals);
    let (mi, mi_se) = mean_and_se(&mi_vals);
    Ok(SampledKl {
        terms: KlTerms {
            mi,
            dwkl: dwkl_exact(batch),
            tc,
        },
        std_err: KlTerms {
            mi: mi_se,
            dwkl: 0.0,
            tc: tc_se,
        },
    })
}

fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, f64::INFINITY);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Exact terms when the support allows, one sampled draw per example
/// otherwise.
pub fn decompose_kl<R: Rng + ?Sized>(batch: &PosteriorBatch, rng: &mut R) -> Result<KlTerms, ObjectiveError> {
    if batch.support() <= MAX_EXACT_SUPPORT {
        exact_kl_decomposition(batch)
    } else {
        Ok(sampled_kl_decomposition(batch, 1, rng)?.terms)
    }
}

/// Graph handles of the three terms.
#[derive(Clone, Copy, Debug)]
pub struct KlVars {
    pub mi: Var,
    pub dwkl: Var,
    pub tc: Var,
}

fn graph_layout(g: &Graph, probs: &[Var]) -> Result<(usize, Vec<usize>), ObjectiveError> {
    let first = probs
        .first()
        .ok_or(ObjectiveError::BatchTooSmall { needed: 1, got: 0 })?;
    let rows = g.shape(*first)[0];
    if rows < 2 {
        return Err(ObjectiveError::BatchTooSmall { needed: 2, got: rows });
    }
    let cards: Vec<usize> = probs.iter().map(|&p| g.shape(p)[1]).collect();
    if probs.iter().any(|&p| g.shape(p)[0] != rows) {
        return Err(NumericsError::ShapeMismatch {
            op: "decompose_kl",
            shapes: probs.iter().map(|&p| g.shape(p).to_vec()).collect(),
        }
        .into());
    }
    Ok((rows, cards))
}

/// `-sum p ln p` of every entry of `v`.
fn entropy_var(g: &mut Graph, v: Var) -> Var {
    let t = g.xlogx(v);
    let s = g.sum(t);
    g.neg(s)
}

/// Differentiable decomposition from per-latent `B x k_j` probability
/// matrices. `rng` is consulted only above [`MAX_EXACT_SUPPORT`].
pub fn decompose_kl_graph<R: Rng + ?Sized>(
    g: &mut Graph,
    probs: &[Var],
    rng: &mut R,
) -> Result<KlVars, ObjectiveError> {
    let (rows, cards) = graph_layout(g, probs)?;
    let support: usize = cards.iter().product();
    let dwkl = {
        let mut acc = g.constant(Tensor::scalar(cards.iter().map(|&k| (k as f64).ln()).sum()));
        for &p in probs {
            let m = g.mean_rows(p);
            let h = entropy_var(g, m);
            acc = g.sub(acc, h)?;
        }
        acc
    };
    let mut marginal_entropy = g.constant(Tensor::scalar(0.0));
    for &p in probs {
        let m = g.mean_rows(p);
        let h = entropy_var(g, m);
        marginal_entropy = g.add(marginal_entropy, h)?;
    }
    if support <= MAX_EXACT_SUPPORT {
        let mut joint = probs[0];
        for &p in &probs[1..] {
            joint = g.row_outer(joint, p)?;
        }
        let aggregate = g.mean_rows(joint);
        let joint_entropy = entropy_var(g, aggregate);
        let mut cond = g.constant(Tensor::scalar(0.0));
        for &p in probs {
            let h = entropy_var(g, p);
            cond = g.add(cond, h)?;
        }
        let cond = g.scale(cond, 1.0 / rows as f64);
        let mi = g.sub(joint_entropy, cond)?;
        let tc = g.sub(marginal_entropy, joint_entropy)?;
        return Ok(KlVars { mi, dwkl, tc });
    }

    // One hard draw per example, held fixed. For latent j, `pick[n, i]` is
    // the probability example n gives to the category example i drew.
    let mut picked_product: Option<Var> = None;
    let mut log_marg_sum: Option<Var> = None;
    let mut log_cond_sum: Option<Var> = None;
    for (&p, &k) in probs.iter().zip(&cards) {
        let values = g.value(p).clone();
        let d: Vec<usize> = (0..rows).map(|r| draw(values.row(r), rng)).collect();
        let mut sel = vec![0.0; k * rows];
        for (i, &c) in d.iter().enumerate() {
            sel[c * rows + i] = 1.0;
        }
        let sel = g.constant(Tensor::new(vec![k, rows], sel)?);
        let pick = g.matmul(p, sel)?;
        let marg = g.mean_rows(pick);
        let log_marg = g.log(marg);
        let own = g.gather(p, &d)?;
        let log_own = g.log(own);
        picked_product = Some(match picked_product {
            None => pick,
            Some(acc) => g.mul(acc, pick)?,
        });
        log_marg_sum = Some(match log_marg_sum {
            None => log_marg,
            Some(acc) => g.add(acc, log_marg)?,
        });
        log_cond_sum = Some(match log_cond_sum {
            None => log_own,
            Some(acc) => g.add(acc, log_own)?,
        });
    }
    let aggregate = g.mean_rows(picked_product.expect("at least one latent"));
    let log_q = g.log(aggregate);
    let log_q_total = g.sum(log_q);
    let log_marg_total = g.sum(log_marg_sum.expect("at least one latent"));
    let log_cond_total = g.sum(log_cond_sum.expect("at least one latent"));
    let tc = g.sub(log_q_total, log_marg_total)?;
    let tc = g.scale(tc, 1.0 / rows as f64);
    let mi = g.sub(log_cond_total, log_q_total)?;
    let mi = g.scale(mi, 1.0 / rows as f64);
    Ok(KlVars { mi, dwkl, tc })
}

/// Mean over the batch of the summed token negative log-likelihood. `steps[t]`
/// holds `B x vocab` logits predicting position `t + 1`; PAD targets are
/// skipped.
pub fn reconstruction_loss(g: &mut Graph, steps: &[Var], batch: &TokenBatch) -> Result<Var, ObjectiveError> {
    if steps.len() + 1 != batch.width() {
        return Err(ObjectiveError::StepCount {
            positions: steps.len(),
            width: batch.width(),
        });
    }
    let rows = batch.size();
    let mut total = g.constant(Tensor::scalar(0.0));
    for (t, &logits) in steps.iter().enumerate() {
        let targets = batch.column(t + 1);
        let lsm = g.log_softmax(logits);
        let picked = g.gather(lsm, targets)?;
        let picked = if targets.contains(&PAD) {
            let mask = targets.iter().map(|&id| f64::from(u8::from(id != PAD))).collect();
            let mask = g.constant(Tensor::new(vec![rows, 1], mask)?);
            g.mul(picked, mask)?
        } else {
            picked
        };
        let s = g.sum(picked);
        total = g.sub(total, s)?;
    }
    Ok(g.scale(total, 1.0 / rows as f64))
}

/// Summed negative log-likelihood of `targets` under `positions x vocab`
/// logits; PAD targets are skipped.
pub fn sequence_nll(logits: &Tensor, targets: &[usize]) -> f64 {
    assert_eq!(logits.rows(), targets.len(), "one logit row per target");
    targets
        .iter()
        .enumerate()
        .filter(|(_, &t)| t != PAD)
        .map(|(r, &t)| {
            let row = logits.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[t]
        })
        .sum()
}

/// One evaluation of the objective, minimized form.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub mi: f64,
    pub dwkl: f64,
    pub tc: f64,
    pub ctc_penalty: f64,
    pub capacity: f64,
    pub total: f64,
}

/// Combines the terms for `step`. In `dctc` and `gamma-zero` modes
/// `total = reconstruction + mi + dwkl + ctc_penalty`; in `beta-kl` mode
/// `total = reconstruction + beta * (mi + dwkl + tc)` and the penalty is 0.
pub fn total_loss(recon: f64, terms: KlTerms, step: u64, cfg: &ObjectiveConfig) -> LossBreakdown {
    let capacity = capacity_at_step(step, cfg);
    let (ctc_penalty, total) = match cfg.mode {
        Mode::BetaKl => (0.0, recon + cfg.beta * terms.sum()),
        Mode::Dctc | Mode::GammaZero => {
            let penalty = cfg.effective_gamma() * (terms.tc - capacity).abs();
            (penalty, recon + terms.mi + terms.dwkl + penalty)
        }
    };
    LossBreakdown {
        reconstruction: recon,
        mi: terms.mi,
        dwkl: terms.dwkl,
        tc: terms.tc,
        ctc_penalty,
        capacity,
        total,
    }
}

/// Graph counterpart of [`total_loss`]: returns the scalar to minimize and
/// its value breakdown.
pub fn total_loss_graph(
    g: &mut Graph,
    recon: Var,
    kl: KlVars,
    step: u64,
    cfg: &ObjectiveConfig,
) -> Result<(Var, LossBreakdown), ObjectiveError> {
    let terms = KlTerms {
        mi: g.value(kl.mi).item(),
        dwkl: g.value(kl.dwkl).item(),
        tc: g.value(kl.tc).item(),
    };
    let breakdown = total_loss(g.value(recon).item(), terms, step, cfg);
    let total = match cfg.mode {
        Mode::BetaKl => {
            let a = g.add(kl.mi, kl.dwkl)?;
            let kl_sum = g.add(a, kl.tc)?;
            let weighted = g.scale(kl_sum, cfg.beta);
            g.add(recon, weighted)?
        }
        Mode::Dctc | Mode::GammaZero => {
            let a = g.add(recon, kl.mi)?;
            let mut total = g.add(a, kl.dwkl)?;
            let gamma = cfg.effective_gamma();
            if gamma > 0.0 {
                let gap = g.add_scalar(kl.tc, -breakdown.capacity);
                let gap = g.abs(gap);
                let penalty = g.scale(gap, gamma);
                total = g.add(total, penalty)?;
            }
            total
        }
    };
    Ok((total, breakdown))
}

/// Softmax of every row of a per-latent logit list, as a [`PosteriorBatch`].
pub fn posterior_batch(logits: &[Vec<Vec<f64>>]) -> Result<PosteriorBatch, ObjectiveError> {
    PosteriorBatch::new(
        logits
            .iter()
            .map(|row| row.iter().map(|l| numerics::softmax(l)).collect())
            .collect(),
    )
}
