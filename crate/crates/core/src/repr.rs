//! Subtask representations: one learned vector per subtask identity, and the
//! regularizer that pushes them apart.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;
use crate::nn::{Bound, Linear, ParamStore};

/// Two-layer encoder from a one-hot subtask identity to a representation in
/// `(-1, 1)^m`. Both layers are followed by `tanh`.
#[derive(Clone, Copy, Debug)]
pub struct SubtaskEncoder {
    pub k: usize,
    pub m: usize,
    l1: Linear,
    l2: Linear,
}

impl SubtaskEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, k: usize, hidden: usize, m: usize, rng: &mut R) -> Self {
        SubtaskEncoder {
            k,
            m,
            l1: Linear::new(store, "subtask_encoder.l1", k, hidden, rng),
            l2: Linear::new(store, "subtask_encoder.l2", hidden, m, rng),
        }
    }

    /// All `k` representations as the rows of a `k × m` matrix.
    pub fn encode(&self, tape: &mut Tape<'_>, p: &Bound) -> Result<Var> {
        let ids = tape.constant(Tensor::identity(self.k));
        let h = self.l1.forward(tape, p, ids)?;
        let h = tape.tanh(h);
        let x = self.l2.forward(tape, p, h)?;
        Ok(tape.tanh(x))
    }

    /// Tape-free evaluation, for export.
    pub fn representations(&self, store: &ParamStore) -> Result<Tensor> {
        let h = self.l1.apply(store, &Tensor::identity(self.k))?.map(f64::tanh);
        Ok(self.l2.apply(store, &h)?.map(f64::tanh))
    }
}

/// `-Σ_{i≠j} ‖x_i − x_j‖²` over ordered pairs of rows.
pub fn repr_regularizer(tape: &mut Tape<'_>, reps: Var) -> Result<Var> {
    let k = tape.shape(reps)[0];
    let mut total: Option<Var> = None;
    for i in 0..k {
        let xi = tape.slice_rows(reps, i, 1)?;
        for j in (i + 1)..k {
            let xj = tape.slice_rows(reps, j, 1)?;
            let d = tape.sub(xi, xj)?;
            let sq = tape.mul(d, d)?;
            let s = tape.sum(sq);
            total = Some(match total {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
    }
    Ok(match total {
        // each unordered pair stands for (i, j) and (j, i)
        Some(acc) => tape.scale(acc, -2.0),
        None => tape.constant(Tensor::scalar(0.0)),
    })
}

/// Representations as CSV: one row per subtask, `m` columns.
pub fn representations_csv(reps: &Tensor) -> String {
    let mut out = String::new();
    out.push_str("subtask");
    for c in 0..reps.cols() {
        out.push_str(&format!(",x{c}"));
    }
    out.push('\n');
    for r in 0..reps.rows() {
        out.push_str(&r.to_string());
        for v in reps.row_slice(r) {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_many;
    use crate::nn::Bound;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(seed: u64, k: usize, m: usize) -> (ParamStore, SubtaskEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let enc = SubtaskEncoder::new(&mut store, k, 8, m, &mut rng);
        (store, enc)
    }

    fn reg_value(reps: Tensor) -> f64 {
        let mut t = Tape::new();
        let r = t.leaf(reps);
        let l = repr_regularizer(&mut t, r).unwrap();
        t.value(l).item()
    }

    #[test]
    fn zero_parameters_give_zero_representations() {
        let (mut store, enc) = encoder(0, 3, 4);
        store.zero_all();
        let reps = enc.representations(&store).unwrap();
        assert!(reps.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn regularizer_hand_values() {
        assert_eq!(reg_value(Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]])), -4.0);
        assert_eq!(reg_value(Tensor::from_rows(&[&[0.3, 0.1], &[0.3, 0.1], &[0.3, 0.1]])), 0.0);
        assert_eq!(reg_value(Tensor::row(&[0.5, -0.5])), 0.0);
    }

    #[test]
    fn random_representations_are_distinct_and_bounded() {
        for seed in 0..10 {
            let (store, enc) = encoder(seed, 4, 6);
            let reps = enc.representations(&store).unwrap();
            assert!(reps.data().iter().all(|x| x.abs() < 1.0));
            for i in 0..4 {
                for j in (i + 1)..4 {
                    assert_ne!(reps.row_slice(i), reps.row_slice(j));
                }
            }
        }
    }

    #[test]
    fn tape_and_plain_encoding_agree() {
        let (store, enc) = encoder(4, 4, 5);
        let mut t = Tape::new();
        let p = store.bind_const(&mut t);
        let r = enc.encode(&mut t, &p).unwrap();
        assert_eq!(t.value(r), &enc.representations(&store).unwrap());
    }

    #[test]
    fn regularizer_gradient_reaches_encoder() {
        let (store, enc) = encoder(5, 3, 4);
        let inputs: Vec<Tensor> = store.blocks().iter().map(|b| b.value.clone()).collect();
        let report = grad_check_many(
            |t, vars| {
                let p = Bound::from_vars(vars.to_vec());
                let reps = enc.encode(t, &p)?;
                repr_regularizer(t, reps)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn relabeling_permutes_representations() {
        let (store, enc) = encoder(6, 3, 4);
        let reps = enc.representations(&store).unwrap();
        // permuting the rows of the first weight matrix permutes identities
        let perm = [2, 0, 1];
        let mut permuted = store.clone();
        let w = store.find("subtask_encoder.l1.weight").unwrap();
        let src = store.get(w).clone();
        for (new_row, &old_row) in perm.iter().enumerate() {
            for c in 0..src.cols() {
                permuted.get_mut(w).set(new_row, c, src.get(old_row, c));
            }
        }
        let reps_p = enc.representations(&permuted).unwrap();
        for (new_row, &old_row) in perm.iter().enumerate() {
            assert_eq!(reps_p.row_slice(new_row), reps.row_slice(old_row));
        }
    }

    #[test]
    fn csv_has_k_rows() {
        let csv = representations_csv(&Tensor::from_rows(&[&[0.5, 0.25], &[-0.5, 0.0]]));
        assert_eq!(csv.lines().count(), 3);
        assert_eq!(csv.lines().nth(1).unwrap(), "0,0.5,0.25");
    }
}
