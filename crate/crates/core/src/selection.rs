//! Ability-based subtask selection: similarity logits, the selection
//! distribution, straight-through Gumbel-Softmax sampling and the temporal KL
//! smoothing term.

use rand::Rng;

use crate::autodiff::{argmax, softmax_in_place, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Lower bound applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-10;

/// Dot-product logits `x_τ · x_φᵀ`: `R × m` against `k × m` gives `R × k`.
pub fn selection_logits(tape: &mut Tape<'_>, ability: Var, reps: Var) -> Result<Var> {
    let rt = tape.transpose(reps);
    tape.matmul(ability, rt)
}

/// Row-wise softmax over the similarity logits.
pub fn selection_distribution(tape: &mut Tape<'_>, ability: Var, reps: Var) -> Result<Var> {
    let logits = selection_logits(tape, ability, reps)?;
    Ok(tape.softmax_rows(logits))
}

/// Standard Gumbel noise, `-ln(-ln U)`.
pub fn sample_gumbel<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::new(rows, cols, data).expect("sized")
}

/// Result of a straight-through draw.
#[derive(Debug)]
pub struct GumbelSample {
    /// hard one-hot rows on the forward pass, relaxed gradient on the backward
    pub one_hot: Var,
    /// relaxed sample `softmax((ln p + g) / τ)`
    pub soft: Var,
    pub selected: Vec<usize>,
}

/// Straight-Through Gumbel-Softmax over every row of `probs`, with the noise
/// supplied by the caller.
pub fn gumbel_st_sample(
    tape: &mut Tape<'_>,
    probs: Var,
    temperature: f64,
    noise: &Tensor,
) -> Result<GumbelSample> {
    if !(temperature > 0.0) {
        return Err(Error::Domain {
            op: "gumbel_st_sample",
            detail: format!("temperature {temperature} must be positive"),
        });
    }
    if !tape.value(probs).is_finite() {
        return Err(Error::Domain {
            op: "gumbel_st_sample",
            detail: "probabilities are not finite".into(),
        });
    }
    let soft = relaxed_sample(tape, probs, temperature, noise)?;
    let sv = tape.value(soft);
    let selected: Vec<usize> = (0..sv.rows()).map(|r| sv.argmax_row(r)).collect();
    let hard = one_hot_rows(&selected, sv.cols());
    let one_hot = tape.straight_through(hard, soft)?;
    Ok(GumbelSample {
        one_hot,
        soft,
        selected,
    })
}

/// `softmax((ln p + g) / τ)` without the hard forward substitution.
pub fn relaxed_sample(tape: &mut Tape<'_>, probs: Var, temperature: f64, noise: &Tensor) -> Result<Var> {
    let logp = tape.log_clamped(probs, PROB_FLOOR);
    let g = tape.constant(noise.clone());
    let perturbed = tape.add(logp, g)?;
    let scaled = tape.scale(perturbed, 1.0 / temperature);
    Ok(tape.softmax_rows(scaled))
}

pub fn one_hot_rows(selected: &[usize], k: usize) -> Tensor {
    let mut t = Tensor::zeros(selected.len(), k);
    for (r, &c) in selected.iter().enumerate() {
        t.set(r, c, 1.0);
    }
    t
}

/// Per-row `KL(p ‖ q)` as an `R × 1` column, with both logs clamped at
/// [`PROB_FLOOR`]. With `stop_grad_next`, `q` is treated as a constant.
pub fn kl_rows(tape: &mut Tape<'_>, p: Var, q: Var, stop_grad_next: bool) -> Result<Var> {
    let q = if stop_grad_next { tape.detach(q) } else { q };
    let lp = tape.log_clamped(p, PROB_FLOOR);
    let lq = tape.log_clamped(q, PROB_FLOOR);
    let d = tape.sub(lp, lq)?;
    let w = tape.mul(p, d)?;
    Ok(tape.sum_cols(w))
}

/// Temporal smoothing term: `Σ mask[r] · KL(p_t[r] ‖ p_{t+1}[r])` over every
/// consecutive pair of per-step probability blocks, divided by `normalizer`.
///
/// `steps[t]` is `R × k` for one timestep and `masks[t]` is the `R × 1` column
/// that is 1 when the pair `(t, t+1)` lies inside an episode.
pub fn temporal_kl_regularizer(
    tape: &mut Tape<'_>,
    steps: &[Var],
    masks: &[Tensor],
    normalizer: f64,
    stop_grad_next: bool,
) -> Result<Var> {
    if steps.len() < 2 {
        return Err(Error::Contract("temporal KL needs at least two timesteps".into()));
    }
    if masks.len() + 1 != steps.len() {
        return Err(Error::Contract(format!(
            "{} steps need {} pair masks, got {}",
            steps.len(),
            steps.len() - 1,
            masks.len()
        )));
    }
    let mut terms = Vec::with_capacity(masks.len());
    for (t, mask) in masks.iter().enumerate() {
        let kl = kl_rows(tape, steps[t], steps[t + 1], stop_grad_next)?;
        let m = tape.constant(mask.clone());
        terms.push(tape.mul(kl, m)?);
    }
    let all = tape.concat_rows(&terms)?;
    let s = tape.sum(all);
    Ok(tape.scale(s, 1.0 / normalizer.max(1.0)))
}

/// One agent's selection at one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectionEntry {
    pub timestep: usize,
    pub agent: usize,
    pub selected: usize,
    pub probs: Vec<f64>,
}

/// Selection history of one episode, in `(timestep, agent)` order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SelectionRecord {
    pub entries: Vec<SelectionEntry>,
}

impl SelectionRecord {
    pub fn push_step(&mut self, timestep: usize, selected: &[usize], probs: Option<&Tensor>) {
        for (agent, &s) in selected.iter().enumerate() {
            self.entries.push(SelectionEntry {
                timestep,
                agent,
                selected: s,
                probs: probs.map(|p| p.row_slice(agent).to_vec()).unwrap_or_default(),
            });
        }
    }

    /// Number of (agent, t) where the selected subtask differs from t − 1.
    pub fn switch_count(&self) -> usize {
        let mut last: std::collections::HashMap<usize, usize> = Default::default();
        let mut switches = 0;
        for e in &self.entries {
            if let Some(prev) = last.insert(e.agent, e.selected) {
                if prev != e.selected {
                    switches += 1;
                }
            }
        }
        switches
    }

    /// How many agent-steps used each subtask.
    pub fn usage(&self, k: usize) -> Vec<usize> {
        let mut u = vec![0; k];
        for e in &self.entries {
            if e.selected < k {
                u[e.selected] += 1;
            }
        }
        u
    }

    /// CSV with columns `timestep,agent,subtask,p0..p{k-1}`; `episode` is
    /// prepended when given.
    pub fn to_csv(&self, k: usize, episode: Option<usize>, header: bool) -> String {
        let mut out = String::new();
        if header {
            if episode.is_some() {
                out.push_str("episode,");
            }
            out.push_str("timestep,agent,subtask");
            for i in 0..k {
                out.push_str(&format!(",p{i}"));
            }
            out.push('\n');
        }
        for e in &self.entries {
            if let Some(ep) = episode {
                out.push_str(&format!("{ep},"));
            }
            out.push_str(&format!("{},{},{}", e.timestep, e.agent, e.selected));
            for i in 0..k {
                match e.probs.get(i) {
                    Some(p) => out.push_str(&format!(",{p}")),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Greedy selection: argmax of each probability row.
pub fn greedy_selection(probs: &Tensor) -> Vec<usize> {
    (0..probs.rows()).map(|r| argmax(probs.row_slice(r))).collect()
}

/// Plain softmax of a slice of logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut v = logits.to_vec();
    softmax_in_place(&mut v);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_ability_gives_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(&[0.0, 0.0, 1.0]));
        let reps = t.constant(Tensor::from_rows(&[&[1.0, 0.0, 0.0], &[0.0, -0.5, 0.0]]));
        let p = selection_distribution(&mut t, x, reps).unwrap();
        assert_eq!(t.value(p).data(), &[0.5, 0.5]);
    }

    #[test]
    fn four_way_softmax_reference() {
        // e/(e+3) and 1/(e+3)
        let p = softmax(&[1.0, 0.0, 0.0, 0.0]);
        assert!((p[0] - 0.475_366_886_418_671_7).abs() < 1e-12);
        assert!((p[1] - 0.174_877_704_527_109_5).abs() < 1e-12);
    }

    #[test]
    fn scaling_ability_keeps_argmax() {
        let reps = Tensor::from_rows(&[&[0.2, 0.9], &[-0.4, 0.1], &[0.7, -0.3]]);
        for c in [1.5, 3.0, 10.0] {
            let mut t = Tape::new();
            let r = t.constant(reps.clone());
            let x1 = t.constant(Tensor::row(&[0.3, 0.8]));
            let x2 = t.constant(Tensor::row(&[0.3 * c, 0.8 * c]));
            let p1 = selection_distribution(&mut t, x1, r).unwrap();
            let p2 = selection_distribution(&mut t, x2, r).unwrap();
            assert_eq!(t.value(p1).argmax_row(0), t.value(p2).argmax_row(0));
        }
    }

    #[test]
    fn zero_noise_sample_is_argmax() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::row(&[0.7, 0.2, 0.1]));
        let s = gumbel_st_sample(&mut t, p, 1.0, &Tensor::zeros(1, 3)).unwrap();
        assert_eq!(t.value(s.one_hot).data(), &[1.0, 0.0, 0.0]);
        assert_eq!(s.selected, vec![0]);
    }

    #[test]
    fn non_finite_probs_rejected() {
        let mut t = Tape::new();
        let p = t.leaf(Tensor::row(&[f64::NAN, 0.5]));
        assert!(gumbel_st_sample(&mut t, p, 1.0, &Tensor::zeros(1, 2)).is_err());
        let q = t.leaf(Tensor::row(&[0.5, 0.5]));
        assert!(gumbel_st_sample(&mut t, q, 0.0, &Tensor::zeros(1, 2)).is_err());
    }

    #[test]
    fn kl_closed_forms() {
        let mut t = Tape::new();
        let p = t.constant(Tensor::row(&[0.3, 0.7]));
        let same = kl_rows(&mut t, p, p, false).unwrap();
        assert_eq!(t.value(same).item(), 0.0);

        let eps = PROB_FLOOR;
        let p = t.constant(Tensor::row(&[1.0 - eps, eps]));
        let q = t.constant(Tensor::row(&[0.5, 0.5]));
        let kl = kl_rows(&mut t, p, q, false).unwrap();
        assert!((t.value(kl).item() - std::f64::consts::LN_2).abs() < 1e-8);
    }

    #[test]
    fn kl_stop_gradient_blocks_next_step() {
        for stop in [false, true] {
            let mut t = Tape::new();
            let p = t.leaf(Tensor::row(&[0.3, 0.7]));
            let q = t.leaf(Tensor::row(&[0.6, 0.4]));
            let kl = kl_rows(&mut t, p, q, stop).unwrap();
            let s = t.sum(kl);
            let g = t.backward(s).unwrap();
            assert!(g.get(p).is_some());
            assert_eq!(g.get(q).is_none(), stop);
        }
    }

    #[test]
    fn temporal_kl_masks_and_normalizes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_rows(&[&[0.5, 0.5], &[0.9, 0.1]]));
        let b = t.constant(Tensor::from_rows(&[&[0.5, 0.5], &[0.1, 0.9]]));
        let masked = Tensor::from_rows(&[&[1.0], &[0.0]]);
        let l = temporal_kl_regularizer(&mut t, &[a, b], &[masked], 1.0, false).unwrap();
        assert_eq!(t.value(l).item(), 0.0);
        let open = Tensor::from_rows(&[&[1.0], &[1.0]]);
        let l = temporal_kl_regularizer(&mut t, &[a, b], &[open], 2.0, false).unwrap();
        let expected = (0.9 * (0.9f64 / 0.1).ln() + 0.1 * (0.1f64 / 0.9).ln()) / 2.0;
        assert!((t.value(l).item() - expected).abs() < 1e-12);
        assert!(temporal_kl_regularizer(&mut t, &[a], &[], 1.0, false).is_err());
    }

    #[test]
    fn switch_count_and_usage() {
        let mut rec = SelectionRecord::default();
        rec.push_step(0, &[0, 1], None);
        rec.push_step(1, &[0, 0], None);
        rec.push_step(2, &[1, 0], None);
        assert_eq!(rec.switch_count(), 2);
        assert_eq!(rec.usage(2), vec![4, 2]);
        let csv = rec.to_csv(2, None, true);
        assert!(csv.starts_with("timestep,agent,subtask,p0,p1\n"));
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn gumbel_noise_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_gumbel(&mut rng, 100, 4).is_finite());
    }
}
