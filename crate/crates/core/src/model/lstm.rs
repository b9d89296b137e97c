use crate::numerics::{Graph, NumericsError, Var};

/// Graph handles of one LSTM layer. Gate columns are ordered
/// input, forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_x: Var,
    pub w_h: Var,
    pub bias: Var,
}

/// One LSTM cell update over a batch: `x` is `B x in`, `h` and `c` are
/// `B x hidden`.
pub fn lstm_step(g: &mut Graph, w: &LstmVars, x: Var, h: Var, c: Var) -> Result<(Var, Var), NumericsError> {
    let hidden = g.shape(h)[1];
    let xw = g.matmul(x, w.w_x)?;
    let hw = g.matmul(h, w.w_h)?;
    let pre = g.add(xw, hw)?;
    let gates = g.add_row(pre, w.bias)?;
    let i = g.slice(gates, 0, hidden)?;
    let i = g.sigmoid(i);
    let f = g.slice(gates, hidden, 2 * hidden)?;
    let f = g.sigmoid(f);
    let cand = g.slice(gates, 2 * hidden, 3 * hidden)?;
    let cand = g.tanh(cand);
    let o = g.slice(gates, 3 * hidden, 4 * hidden)?;
    let o = g.sigmoid(o);
    let keep = g.mul(f, c)?;
    let write = g.mul(i, cand)?;
    let c_next = g.add(keep, write)?;
    let squashed = g.tanh(c_next);
    let h_next = g.mul(o, squashed)?;
    Ok((h_next, c_next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, max_relative_error, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Loss `sum(h' * r1 + c' * r2)` of one cell, as a function of all inputs.
    fn cell_loss(inputs: &[Tensor], probes: &[Tensor; 2], grad: bool) -> (f64, Vec<Tensor>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let w = LstmVars {
            w_x: vars[0],
            w_h: vars[1],
            bias: vars[2],
        };
        let (h, c) = lstm_step(&mut g, &w, vars[3], vars[4], vars[5]).unwrap();
        let r1 = g.constant(probes[0].clone());
        let r2 = g.constant(probes[1].clone());
        let a = g.mul(h, r1).unwrap();
        let b = g.mul(c, r2).unwrap();
        let s = g.add(a, b).unwrap();
        let loss = g.sum(s);
        let value = g.value(loss).item();
        if !grad {
            return (value, vec![]);
        }
        g.backward(loss).unwrap();
        (value, vars.iter().map(|&v| g.grad(v).unwrap()).collect())
    }

    #[test]
    fn cell_gradient_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (b, d, hdim) = (3, 4, 2);
            let inputs = vec![
                random(&mut rng, &[d, 4 * hdim]),
                random(&mut rng, &[hdim, 4 * hdim]),
                random(&mut rng, &[1, 4 * hdim]),
                random(&mut rng, &[b, d]),
                random(&mut rng, &[b, hdim]),
                random(&mut rng, &[b, hdim]),
            ];
            let probes = [random(&mut rng, &[b, hdim]), random(&mut rng, &[b, hdim])];
            let (_, analytic) = cell_loss(&inputs, &probes, true);
            for (k, a) in analytic.iter().enumerate() {
                let numeric = finite_diff_grad(
                    |x| {
                        let mut probe = inputs.clone();
                        probe[k] = x.clone();
                        cell_loss(&probe, &probes, false).0
                    },
                    &inputs[k],
                    1e-5,
                );
                let err = max_relative_error(a, &numeric, 1e-4);
                assert!(err <= 1e-4, "seed {seed} input {k}: {err}");
            }
        }
    }

    #[test]
    fn zero_weights_halve_the_cell() {
        // all gates at sigmoid(0) = 1/2, candidate tanh(0) = 0
        let mut g = Graph::new();
        let w = LstmVars {
            w_x: g.constant(Tensor::zeros(&[2, 4])),
            w_h: g.constant(Tensor::zeros(&[1, 4])),
            bias: g.constant(Tensor::zeros(&[1, 4])),
        };
        let x = g.constant(Tensor::full(&[1, 2], 1.0));
        let h = g.constant(Tensor::zeros(&[1, 1]));
        let c = g.constant(Tensor::full(&[1, 1], 2.0));
        let (h2, c2) = lstm_step(&mut g, &w, x, h, c).unwrap();
        assert_eq!(g.value(c2).item(), 1.0);
        assert!((g.value(h2).item() - 0.5 * 1f64.tanh()).abs() < 1e-15);
    }
}
