//! Gumbel-Softmax relaxation of categorical latents.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{xlogx, Graph, NumericsError, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GumbelError {
    #[error("temperature must be positive, got {0}")]
    NonPositiveTau(f64),
    #[error("categorical needs at least one class")]
    Empty,
    #[error("logits have length {logits} but noise has length {noise}")]
    LengthMismatch { logits: usize, noise: usize },
    #[error("not a probability vector: {0}")]
    NotSimplex(String),
    #[error("invalid temperature schedule: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GumbelConfig {
    pub tau_start: f64,
    pub tau_end: f64,
    pub tau_anneal_steps: u64,
    /// Discretise latents by argmax when probing a trained model.
    pub hard_eval: bool,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig {
            tau_start: 1.0,
            tau_end: 0.5,
            tau_anneal_steps: 25_000,
            hard_eval: true,
        }
    }
}

impl GumbelConfig {
    pub fn validate(&self) -> Result<(), GumbelError> {
        if !(self.tau_end > 0.0 && self.tau_start > 0.0) {
            return Err(GumbelError::InvalidConfig(format!(
                "temperatures must be positive (start {}, end {})",
                self.tau_start, self.tau_end
            )));
        }
        if self.tau_end > self.tau_start {
            return Err(GumbelError::InvalidConfig(format!(
                "tau_end {} exceeds tau_start {}",
                self.tau_end, self.tau_start
            )));
        }
        if self.tau_anneal_steps == 0 {
            return Err(GumbelError::InvalidConfig("tau_anneal_steps must be positive".into()));
        }
        Ok(())
    }
}

/// One relaxed draw: `y` is the point on the simplex, `logits` and `noise`
/// the inputs that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct RelaxedSample {
    pub y: Vec<f64>,
    pub logits: Vec<f64>,
    pub noise: Vec<f64>,
}

impl RelaxedSample {
    pub fn argmax(&self) -> usize {
        argmax(&self.y)
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Standard Gumbel variate by inversion of a uniform on (0, 1).
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

pub fn sample_gumbel_noise<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    (0..k)
        .map(|_| {
            // gen::<f64>() is on [0, 1); zero would give an infinite draw
            let mut u: f64 = rng.gen();
            while u <= 0.0 {
                u = rng.gen();
            }
            gumbel_from_uniform(u)
        })
        .collect()
}

pub fn gumbel_softmax_sample(logits: &[f64], noise: &[f64], tau: f64) -> Result<RelaxedSample, GumbelError> {
    if tau <= 0.0 || tau.is_nan() {
        return Err(GumbelError::NonPositiveTau(tau));
    }
    if logits.is_empty() {
        return Err(GumbelError::Empty);
    }
    if logits.len() != noise.len() {
        return Err(GumbelError::LengthMismatch {
            logits: logits.len(),
            noise: noise.len(),
        });
    }
    let scores: Vec<f64> = logits.iter().zip(noise).map(|(l, g)| (l + g) / tau).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(RelaxedSample {
        y: exps.iter().map(|e| e / total).collect(),
        logits: logits.to_vec(),
        noise: noise.to_vec(),
    })
}

/// Differentiable batched relaxation: `softmax((logits + noise) / tau)` row-wise.
pub fn gumbel_softmax(g: &mut Graph, logits: Var, noise: &Tensor, tau: f64) -> Result<Var, GumbelError> {
    if tau <= 0.0 || tau.is_nan() {
        return Err(GumbelError::NonPositiveTau(tau));
    }
    let noise = g.constant(noise.clone());
    let perturbed = g.add(logits, noise)?;
    let scaled = g.scale(perturbed, 1.0 / tau);
    Ok(g.softmax(scaled))
}

/// Exponential interpolation from `tau_start` to `tau_end`, constant after
/// `tau_anneal_steps`.
pub fn tau_at_step(step: u64, cfg: &GumbelConfig) -> f64 {
    if step >= cfg.tau_anneal_steps {
        return cfg.tau_end;
    }
    let frac = step as f64 / cfg.tau_anneal_steps as f64;
    cfg.tau_start * (cfg.tau_end / cfg.tau_start).powf(frac)
}

const SIMPLEX_TOL: f64 = 1e-6;

/// `KL(probs || uniform) = log k - H(probs)`.
pub fn categorical_kl_uniform(probs: &[f64]) -> Result<f64, GumbelError> {
    if probs.is_empty() {
        return Err(GumbelError::Empty);
    }
    if let Some(p) = probs.iter().find(|&&p| p < -SIMPLEX_TOL || p.is_nan()) {
        return Err(GumbelError::NotSimplex(format!("component {p}")));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(GumbelError::NotSimplex(format!("sums to {total}")));
    }
    let neg_entropy: f64 = probs.iter().map(|&p| xlogx(p.max(0.0))).sum();
    Ok(((probs.len() as f64).ln() + neg_entropy).max(0.0))
}

/// Row-wise `KL(row || uniform)` summed over rows of a probability matrix.
pub fn categorical_kl_uniform_var(g: &mut Graph, probs: Var) -> Var {
    let (rows, k) = {
        let v = g.value(probs);
        (v.rows(), v.cols())
    };
    let plogp = g.xlogx(probs);
    let s = g.sum(plogp);
    g.add_scalar(s, rows as f64 * (k as f64).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gumbel_of_half() {
        // -ln(ln 2)
        let expected = 0.366_512_920_581_664_3;
        assert!((gumbel_from_uniform(0.5) - expected).abs() < 1e-15);
    }

    #[test]
    fn noise_is_seed_deterministic() {
        let a = sample_gumbel_noise(16, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_gumbel_noise(16, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn noise_mean_is_euler_mascheroni() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 1_000_000;
        let mean: f64 = sample_gumbel_noise(n, &mut rng).iter().sum::<f64>() / n as f64;
        assert!((mean - 0.577_215_664_9).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn single_class_is_degenerate() {
        let s = gumbel_softmax_sample(&[0.3], &[1.7], 0.2).unwrap();
        assert_eq!(s.y, vec![1.0]);
    }

    #[test]
    fn symmetric_inputs_give_uniform() {
        for tau in [0.1, 1.0, 7.0] {
            let s = gumbel_softmax_sample(&[0.4; 4], &[0.2; 4], tau).unwrap();
            assert!(s.y.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        }
    }

    #[test]
    fn low_temperature_is_nearly_one_hot() {
        let s = gumbel_softmax_sample(&[5.0, 0.0, 0.0], &[0.0; 3], 0.01).unwrap();
        assert!(s.y[0] >= 1.0 - 1e-10);
    }

    #[test]
    fn mean_peak_tracks_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mean_max = |tau: f64, rng: &mut ChaCha8Rng| {
            let n = 10_000;
            let total: f64 = (0..n)
                .map(|_| {
                    let logits: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
                    let noise = sample_gumbel_noise(4, rng);
                    let y = gumbel_softmax_sample(&logits, &noise, tau).unwrap().y;
                    y.iter().copied().fold(0.0, f64::max)
                })
                .sum();
            total / n as f64
        };
        assert!(mean_max(0.1, &mut rng) >= 0.95);
        assert!(mean_max(5.0, &mut rng) <= 0.8);
    }

    #[test]
    fn rejects_bad_temperature() {
        assert!(matches!(
            gumbel_softmax_sample(&[0.0, 1.0], &[0.0, 0.0], 0.0),
            Err(GumbelError::NonPositiveTau(_))
        ));
        assert!(gumbel_softmax_sample(&[0.0, 1.0], &[0.0, 0.0], -1.0).is_err());
    }

    #[test]
    fn tau_schedule() {
        let cfg = GumbelConfig {
            tau_start: 2.0,
            tau_end: 0.5,
            tau_anneal_steps: 1000,
            hard_eval: true,
        };
        assert_eq!(tau_at_step(0, &cfg), 2.0);
        assert_eq!(tau_at_step(1000, &cfg), 0.5);
        assert_eq!(tau_at_step(5000, &cfg), 0.5);
        assert!((tau_at_step(500, &cfg) - (2.0f64 * 0.5).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        assert!(GumbelConfig::default().validate().is_ok());
        let bad = GumbelConfig {
            tau_end: 2.0,
            ..GumbelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn kl_to_uniform_values() {
        assert!(categorical_kl_uniform(&[0.25; 4]).unwrap().abs() < 1e-15);
        let one_hot = categorical_kl_uniform(&[1.0, 0.0, 0.0]).unwrap();
        assert!((one_hot - 3f64.ln()).abs() < 1e-15);
        // H(0.5, 0.25, 0.25) = 1.5 ln 2
        let expected = 3f64.ln() - 1.5 * 2f64.ln();
        let got = categorical_kl_uniform(&[0.5, 0.25, 0.25]).unwrap();
        assert!((got - expected).abs() < 1e-15);
        assert!((expected - 0.058_891_517_9).abs() < 1e-9);
        assert!(categorical_kl_uniform(&[1.2, -0.2]).is_err());
    }

    #[test]
    fn relaxed_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let logits: Vec<f64> = (0..5).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let noise = Tensor::new(vec![1, 5], sample_gumbel_noise(5, &mut rng)).unwrap();
            let weights: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let x = Tensor::new(vec![1, 5], logits).unwrap();
            let w = Tensor::new(vec![1, 5], weights).unwrap();
            let tau = rng.gen_range(0.3..2.0);
            let eval = |x: &Tensor| {
                let s = gumbel_softmax_sample(x.data(), noise.data(), tau).unwrap();
                s.y.iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>()
            };
            let mut g = Graph::new();
            let xv = g.param(x.clone());
            let y = gumbel_softmax(&mut g, xv, &noise, tau).unwrap();
            let wv = g.constant(w.clone());
            let p = g.mul(y, wv).unwrap();
            let loss = g.sum(p);
            assert!((g.value(loss).item() - eval(&x)).abs() < 1e-12);
            g.backward(loss).unwrap();
            let numeric = finite_diff_grad(eval, &x, 1e-5);
            assert!(max_relative_error(&g.grad(xv).unwrap(), &numeric, 1e-4) < 1e-4);
        }
    }

    #[test]
    fn graph_kl_matches_scalar_kl() {
        let rows = vec![vec![0.5, 0.25, 0.25], vec![0.1, 0.8, 0.1]];
        let mut g = Graph::new();
        let p = g.constant(Tensor::from_rows(&rows).unwrap());
        let kl = categorical_kl_uniform_var(&mut g, p);
        let expected: f64 = rows.iter().map(|r| categorical_kl_uniform(r).unwrap()).sum();
        assert!((g.value(kl).item() - expected).abs() < 1e-12);
    }
}
