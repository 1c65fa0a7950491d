//! Subtask policies: a decoder turns each subtask representation into the
//! weights of a linear Q head, every agent is scored by every head, and the
//! selected head's output becomes the agent's Q-values.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamId, ParamStore};

/// Packed per-subtask head: `hidden × n_actions` weights followed by
/// `n_actions` biases, row-major, one row per subtask.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadShape {
    pub hidden: usize,
    pub n_actions: usize,
}

impl HeadShape {
    pub fn width(&self) -> usize {
        self.hidden * self.n_actions + self.n_actions
    }
}

/// Where the head parameters come from.
#[derive(Clone, Copy, Debug)]
pub enum HeadSource {
    /// single affine layer from an `m`-dim representation to a packed head
    Decoder(Linear),
    /// `k × width` block learned directly
    Free(ParamId),
}

#[derive(Clone, Copy, Debug)]
pub struct SubtaskHeads {
    pub shape: HeadShape,
    pub source: HeadSource,
}

impl SubtaskHeads {
    pub fn decoder<R: Rng>(store: &mut ParamStore, m: usize, shape: HeadShape, rng: &mut R) -> Self {
        SubtaskHeads {
            shape,
            source: HeadSource::Decoder(Linear::new(store, "subtask_decoder", m, shape.width(), rng)),
        }
    }

    pub fn free<R: Rng>(store: &mut ParamStore, k: usize, shape: HeadShape, rng: &mut R) -> Self {
        let id = store.add_uniform("subtask_heads", k, shape.width(), shape.hidden, rng);
        SubtaskHeads {
            shape,
            source: HeadSource::Free(id),
        }
    }

    /// Packed head parameters, `k × width`. `reps` is required for the decoder.
    pub fn decode_policies(&self, tape: &mut Tape<'_>, p: &Bound, reps: Option<Var>) -> Result<Var> {
        match self.source {
            HeadSource::Decoder(lin) => {
                let reps = reps.ok_or_else(|| Error::Contract("decoder needs subtask representations".into()))?;
                lin.forward(tape, p, reps)
            }
            HeadSource::Free(id) => Ok(p.get(id)),
        }
    }
}

/// `Q_{·,i} = h · W_i + b_i` for every subtask `i`; `h` is `R × hidden`, the
/// result holds one `R × n_actions` block per subtask.
pub fn per_subtask_q(tape: &mut Tape<'_>, h: Var, heads: Var, shape: HeadShape) -> Result<Vec<Var>> {
    let [k, width] = tape.shape(heads);
    if width != shape.width() || tape.shape(h)[1] != shape.hidden {
        return Err(Error::Dimension {
            op: "per_subtask_q",
            lhs: tape.shape(h),
            rhs: [k, width],
        });
    }
    let wlen = shape.hidden * shape.n_actions;
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let row = tape.slice_rows(heads, i, 1)?;
        let w = tape.slice_cols(row, 0, wlen)?;
        let w = tape.reshape(w, shape.hidden, shape.n_actions)?;
        let b = tape.slice_cols(row, wlen, shape.n_actions)?;
        let q = tape.matmul(h, w)?;
        out.push(tape.add_row(q, b)?);
    }
    Ok(out)
}

/// `Q_a = Σ_i w[a, i] · Q_{a,i}`. In hard mode every weight row must be
/// exactly one-hot, so the result is the selected head's row bit for bit.
pub fn combine_q(tape: &mut Tape<'_>, per_subtask: &[Var], weights: Var, hard: bool) -> Result<Var> {
    let [rows, k] = tape.shape(weights);
    if k != per_subtask.len() {
        return Err(Error::Dimension {
            op: "combine_q",
            lhs: [rows, k],
            rhs: [per_subtask.len(), 0],
        });
    }
    if hard {
        let w = tape.value(weights);
        for r in 0..rows {
            let row = w.row_slice(r);
            let ones = row.iter().filter(|&&x| x == 1.0).count();
            let zeros = row.iter().filter(|&&x| x == 0.0).count();
            if ones != 1 || zeros != k - 1 {
                return Err(Error::Contract(format!("selection weights of row {r} are not one-hot: {row:?}")));
            }
        }
    }
    let mut total: Option<Var> = None;
    for (i, &q) in per_subtask.iter().enumerate() {
        let wi = tape.slice_cols(weights, i, 1)?;
        let term = tape.mul_col(q, wi)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    total.ok_or_else(|| Error::Contract("combine_q needs at least one subtask".into()))
}
