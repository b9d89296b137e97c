//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use dctc::gumbel;
use dctc::model::{lstm_step, LstmVars};
use dctc::numerics::{finite_diff_grad, max_relative_error, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
/// Gradient coordinates smaller than this are compared absolutely.
pub const FD_FLOOR: f64 = 1e-3;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Values bounded away from zero, so `abs` stays differentiable under the
/// finite-difference probe.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.gen_range(0.1..1.5);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// A randomly shaped graph touching every differentiable operation, the
/// LSTM cell and the relaxed Gumbel-Softmax sample (with fixed noise).
pub struct RandomGraph {
    pub params: Vec<Tensor>,
    ids: Vec<usize>,
    picks: Vec<usize>,
    mask: Vec<bool>,
    noise: Tensor,
    probes: Vec<Tensor>,
    tau: f64,
}

impl RandomGraph {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = rng.gen_range(1..4);
        let c = rng.gen_range(2..5);
        let k = rng.gen_range(2..5);
        let h = rng.gen_range(1..4);
        let v = rng.gen_range(2..6);
        let params = vec![
            random(&mut rng, &[r, c], -1.0, 1.0),     // 0 a
            random(&mut rng, &[c, k], -1.0, 1.0),     // 1 b
            random(&mut rng, &[1, k], -1.0, 1.0),     // 2 row
            random(&mut rng, &[r, c], -1.0, 1.0),     // 3 c
            random(&mut rng, &[v, c], -1.0, 1.0),     // 4 table
            away_from_zero(&mut rng, &[r, c]),        // 5 abs input
            random(&mut rng, &[c, 4 * h], -0.8, 0.8), // 6 lstm w_x
            random(&mut rng, &[h, 4 * h], -0.8, 0.8), // 7 lstm w_h
            random(&mut rng, &[1, 4 * h], -0.5, 0.5), // 8 lstm bias
            random(&mut rng, &[r, h], -1.0, 1.0),     // 9 h0
            random(&mut rng, &[r, h], -1.0, 1.0),     // 10 c0
            random(&mut rng, &[r, k], -2.0, 2.0),     // 11 gumbel logits
        ];
        let noise_vals: Vec<f64> = (0..r).flat_map(|_| gumbel::sample_gumbel_noise(k, &mut rng)).collect();
        let probes = vec![
            random(&mut rng, &[r, h], -1.0, 1.0),
            random(&mut rng, &[r, h], -1.0, 1.0),
            random(&mut rng, &[r, k], -1.0, 1.0),
            random(&mut rng, &[r, c], -1.0, 1.0),
            random(&mut rng, &[r, k], -1.0, 1.0),
        ];
        RandomGraph {
            params,
            ids: (0..r).map(|_| rng.gen_range(0..v)).collect(),
            picks: (0..r).map(|_| rng.gen_range(0..k)).collect(),
            mask: (0..r).map(|_| rng.gen_bool(0.5)).collect(),
            noise: Tensor::new(vec![r, k], noise_vals).unwrap(),
            probes,
            tau: rng.gen_range(0.5..2.0),
        }
    }

    fn build(&self, g: &mut Graph, p: &[Var]) -> Var {
        let k = self.params[1].shape()[1];
        let probe = |g: &mut Graph, i: usize| g.constant(self.probes[i].clone());
        let x = g.matmul(p[0], p[1]).unwrap();
        let x = g.add_row(x, p[2]).unwrap();
        let d = g.sub(p[0], p[3]).unwrap();
        let s3 = g.sigmoid(p[3]);
        let d = g.mul(d, s3).unwrap();
        let t0 = g.tanh(p[0]);
        let t0 = g.scale(t0, 0.7);
        let y = g.add(d, t0).unwrap();
        let y = g.neg(y);
        let y = g.add_scalar(y, 0.3);
        let e = g.embedding(p[4], &self.ids).unwrap();
        let y2 = g.add(y, e).unwrap();
        let cat = g.concat(&[x, y2]).unwrap();
        let s = g.slice(cat, 1, k + 1).unwrap();
        let s = g.scale(s, 0.3);
        let ex = g.exp(s);
        let ex = g.add_scalar(ex, 1.0);
        let lg = g.log(ex);
        let ab = g.abs(p[5]);
        let sa = g.sigmoid(p[0]);
        let xl = g.xlogx(sa);
        let sm = g.softmax(x);
        let lsm = g.log_softmax(x);
        let picked = g.gather(lsm, &self.picks).unwrap();
        let ro = g.row_outer(sm, sa).unwrap();
        let sel = g.select_rows(y2, e, &self.mask).unwrap();
        let w = LstmVars {
            w_x: p[6],
            w_h: p[7],
            bias: p[8],
        };
        let (h, c) = lstm_step(g, &w, y2, p[9], p[10]).unwrap();
        let gs = gumbel::gumbel_softmax(g, p[11], &self.noise, self.tau).unwrap();

        let mut terms = Vec::new();
        terms.push(g.sum(lg));
        terms.push(g.mean(ab));
        let xs = g.sum(xl);
        terms.push(g.scale(xs, 0.5));
        let pr = probe(g, 4);
        let weighted = g.mul(lsm, pr).unwrap();
        let rows = g.sum_last(weighted);
        terms.push(g.mean(rows));
        terms.push(g.sum(picked));
        let mr = g.mean_rows(ro);
        terms.push(g.sum(mr));
        for (var, i) in [(h, 0), (c, 1), (gs, 2), (sel, 3)] {
            let pr = probe(g, i);
            let m = g.mul(var, pr).unwrap();
            terms.push(g.sum(m));
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t).unwrap();
        }
        total
    }

    fn value(&self, params: &[Tensor]) -> f64 {
        let mut g = Graph::new();
        let p: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
        let loss = self.build(&mut g, &p);
        g.value(loss).item()
    }

    /// Largest relative error between backward and central differences over
    /// every parameter coordinate.
    pub fn max_error(&self) -> f64 {
        let mut g = Graph::new();
        let p: Vec<Var> = self.params.iter().map(|t| g.param(t.clone())).collect();
        let loss = self.build(&mut g, &p);
        g.backward(loss).unwrap();
        let mut worst: f64 = 0.0;
        for (i, &var) in p.iter().enumerate() {
            let analytic = g.grad(var).expect("every parameter reaches the loss");
            let numeric = finite_diff_grad(
                |x| {
                    let mut ps = self.params.clone();
                    ps[i] = x.clone();
                    self.value(&ps)
                },
                &self.params[i],
                FD_EPS,
            );
            worst = worst.max(max_relative_error(&analytic, &numeric, FD_FLOOR));
        }
        worst
    }
}
