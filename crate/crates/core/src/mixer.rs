//! State-conditioned monotonic mixing of per-agent Q-values.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::nn::{Bound, Linear, ParamStore};

/// Two-layer mixer whose weights are generated from the global state by
/// hypernetworks and passed through `abs`, so `∂Q_tot/∂Q_a ≥ 0`.
#[derive(Clone, Copy, Debug)]
pub struct Mixer {
    pub n_agents: usize,
    pub embed: usize,
    hyper_w1: Linear,
    hyper_b1: Linear,
    hyper_w2: Linear,
    hyper_v1: Linear,
    hyper_v2: Linear,
}

impl Mixer {
    pub fn new<R: Rng>(store: &mut ParamStore, n_agents: usize, state_dim: usize, embed: usize, rng: &mut R) -> Self {
        Mixer {
            n_agents,
            embed,
            hyper_w1: Linear::new(store, "mixer.hyper_w1", state_dim, n_agents * embed, rng),
            hyper_b1: Linear::new(store, "mixer.hyper_b1", state_dim, embed, rng),
            hyper_w2: Linear::new(store, "mixer.hyper_w2", state_dim, embed, rng),
            hyper_v1: Linear::new(store, "mixer.hyper_v1", state_dim, embed, rng),
            hyper_v2: Linear::new(store, "mixer.hyper_v2", embed, 1, rng),
        }
    }

    /// `q` is `B × n_agents` (chosen-action Q per agent), `state` is
    /// `B × state_dim`; returns `Q_tot` as `B × 1`.
    pub fn mix(&self, tape: &mut Tape<'_>, p: &Bound, q: Var, state: Var) -> Result<Var> {
        let w1 = self.hyper_w1.forward(tape, p, state)?;
        let w1 = tape.abs(w1);
        let b1 = self.hyper_b1.forward(tape, p, state)?;
        let hidden = tape.row_bmm(q, w1)?;
        let hidden = tape.add(hidden, b1)?;
        let hidden = tape.elu(hidden);

        let w2 = self.hyper_w2.forward(tape, p, state)?;
        let w2 = tape.abs(w2);
        let v = self.hyper_v1.forward(tape, p, state)?;
        let v = tape.relu(v);
        let b2 = self.hyper_v2.forward(tape, p, v)?;

        let weighted = tape.mul(hidden, w2)?;
        let y = tape.sum_cols(weighted);
        tape.add(y, b2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_many, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn eval(store: &ParamStore, mixer: &Mixer, q: &[f64], s: &[f64]) -> f64 {
        let mut t = Tape::new();
        let p = store.bind_const(&mut t);
        let qv = t.constant(Tensor::row(q));
        let sv = t.constant(Tensor::row(s));
        let y = mixer.mix(&mut t, &p, qv, sv).unwrap();
        t.value(y).item()
    }

    #[test]
    fn single_agent_linear_degenerate_case() {
        // hidden width 1 with zero hidden bias and positive input keeps ELU linear
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mixer = Mixer::new(&mut store, 1, 2, 1, &mut rng);
        store.zero_all();
        let set = |store: &mut ParamStore, name: &str, v: f64| {
            let id = store.find(name).unwrap();
            store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = v);
        };
        set(&mut store, "mixer.hyper_w1.bias", -2.0);
        set(&mut store, "mixer.hyper_w2.bias", 1.5);
        set(&mut store, "mixer.hyper_v2.bias", 0.25);
        for q in [0.5, 1.0, 4.0] {
            let y = eval(&store, &mixer, &[q], &[0.3, -0.7]);
            assert!((y - (3.0 * q + 0.25)).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_weights_are_monotone_in_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let mixer = Mixer::new(&mut store, 3, 2, 4, &mut rng);
        store.zero_all();
        for name in ["mixer.hyper_w1.bias", "mixer.hyper_w2.bias"] {
            let id = store.find(name).unwrap();
            store.get_mut(id).data_mut().iter_mut().for_each(|x| *x = 1.0);
        }
        let a = eval(&store, &mixer, &[0.1, 0.2, 0.3], &[0.0, 0.0]);
        let b = eval(&store, &mixer, &[0.3, 0.2, 0.3], &[0.0, 0.0]);
        let c = eval(&store, &mixer, &[-0.3, -0.2, -1.0], &[0.0, 0.0]);
        assert!(c < a && a < b);
        // same sum, same value
        let d = eval(&store, &mixer, &[0.3, 0.2, 0.1], &[0.0, 0.0]);
        assert!((a - d).abs() < 1e-12);
    }

    #[test]
    fn raising_one_q_never_lowers_total() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let mixer = Mixer::new(&mut store, 3, 4, 8, &mut rng);
        for _ in 0..100 {
            let s: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(-3.0..3.0)).collect();
            let base = eval(&store, &mixer, &q, &s);
            for a in 0..3 {
                let mut up = q.clone();
                up[a] += 0.1;
                assert!(eval(&store, &mixer, &up, &s) >= base);
            }
        }
    }

    #[test]
    fn mixer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mixer = Mixer::new(&mut store, 2, 3, 4, &mut rng);
        let mut inputs: Vec<Tensor> = store.blocks().iter().map(|b| b.value.clone()).collect();
        let nb = inputs.len();
        inputs.push(Tensor::from_rows(&[&[0.5, -1.0], &[2.0, 0.3]]));
        inputs.push(Tensor::from_rows(&[&[0.1, 0.7, -0.4], &[1.0, -0.2, 0.6]]));
        let report = grad_check_many(
            |t, v| {
                let p = Bound::from_vars(v[..nb].to_vec());
                let y = mixer.mix(t, &p, v[nb], v[nb + 1])?;
                let sq = t.mul(y, y)?;
                Ok(t.sum(sq))
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
