//! Parameter storage and the small set of layers the networks are built from.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Identifies a block inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub value: Tensor,
}

/// Ordered, named parameter blocks.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    blocks: Vec<ParamBlock>,
}

/// Parameters of a store placed on a tape, one variable per block.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.blocks.push(ParamBlock {
            name: name.into(),
            value,
        });
        ParamId(self.blocks.len() - 1)
    }

    /// Block with entries uniform in `[-1/√fan_in, 1/√fan_in]`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
        self.add(name, Tensor::new(rows, cols, data).expect("sized"))
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.blocks[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.blocks[id.0].value
    }

    pub fn block_mut(&mut self, index: usize) -> &mut ParamBlock {
        &mut self.blocks[index]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.blocks.iter().position(|b| b.name == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.blocks.iter().map(|b| b.value.len()).sum()
    }

    /// Borrows every block onto `tape` as a trainable leaf.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>) -> Bound {
        Bound {
            vars: self.blocks.iter().map(|b| tape.leaf_ref(&b.value)).collect(),
        }
    }

    /// Borrows every block onto `tape` as a constant.
    pub fn bind_const<'a>(&'a self, tape: &mut Tape<'a>) -> Bound {
        Bound {
            vars: self.blocks.iter().map(|b| tape.constant_ref(&b.value)).collect(),
        }
    }

    /// Overwrites every value from `other`, which must have the same layout.
    pub fn copy_from(&mut self, other: &ParamStore) -> Result<()> {
        self.check_layout(other)?;
        for (dst, src) in self.blocks.iter_mut().zip(&other.blocks) {
            dst.value.data_mut().copy_from_slice(src.value.data());
        }
        Ok(())
    }

    pub fn check_layout(&self, other: &ParamStore) -> Result<()> {
        if self.blocks.len() != other.blocks.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter blocks, found {}",
                self.blocks.len(),
                other.blocks.len()
            )));
        }
        for (a, b) in self.blocks.iter().zip(&other.blocks) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "block mismatch: `{}` {:?} vs `{}` {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn zero_all(&mut self) {
        for b in &mut self.blocks {
            b.value.data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
    }
}

/// Affine map `x · W + b`, `W` is `in × out`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) -> Self {
        let w = store.add_uniform(format!("{name}.weight"), input, output, input, rng);
        let b = store.add_uniform(format!("{name}.bias"), 1, output, input, rng);
        Linear { w, b, input, output }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, p: &Bound, x: Var) -> Result<Var> {
        let xw = tape.matmul(x, p.get(self.w))?;
        tape.add_row(xw, p.get(self.b))
    }

    /// Same map applied to plain values, without a tape.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut y = x.matmul(store.get(self.w))?;
        let b = store.get(self.b);
        let c = y.cols();
        for row in y.data_mut().chunks_mut(c.max(1)) {
            for (v, bias) in row.iter_mut().zip(b.data()) {
                *v += bias;
            }
        }
        Ok(y)
    }
}

/// Gated recurrent unit with reset, update and candidate gates, in the
/// packed layout `[r | z | n]` along the columns.
#[derive(Clone, Copy, Debug)]
pub struct GruCell {
    w_input: ParamId,
    w_hidden: ParamId,
    b_input: ParamId,
    b_hidden: ParamId,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, rng: &mut R) -> Self {
        GruCell {
            w_input: store.add_uniform(format!("{name}.w_input"), input, 3 * hidden, hidden, rng),
            w_hidden: store.add_uniform(format!("{name}.w_hidden"), hidden, 3 * hidden, hidden, rng),
            b_input: store.add_uniform(format!("{name}.b_input"), 1, 3 * hidden, hidden, rng),
            b_hidden: store.add_uniform(format!("{name}.b_hidden"), 1, 3 * hidden, hidden, rng),
            hidden,
        }
    }

    /// One step: `x` is `R × input`, `h` is `R × hidden`.
    pub fn forward(&self, tape: &mut Tape<'_>, p: &Bound, x: Var, h: Var) -> Result<Var> {
        let hd = self.hidden;
        let gi = tape.matmul(x, p.get(self.w_input))?;
        let gi = tape.add_row(gi, p.get(self.b_input))?;
        let gh = tape.matmul(h, p.get(self.w_hidden))?;
        let gh = tape.add_row(gh, p.get(self.b_hidden))?;

        let rz_i = tape.slice_cols(gi, 0, 2 * hd)?;
        let rz_h = tape.slice_cols(gh, 0, 2 * hd)?;
        let rz = tape.add(rz_i, rz_h)?;
        let rz = tape.sigmoid(rz);
        let r = tape.slice_cols(rz, 0, hd)?;
        let z = tape.slice_cols(rz, hd, hd)?;

        let n_i = tape.slice_cols(gi, 2 * hd, hd)?;
        let n_h = tape.slice_cols(gh, 2 * hd, hd)?;
        let gated = tape.mul(r, n_h)?;
        let n = tape.add(n_i, gated)?;
        let n = tape.tanh(n);

        // h' = (1 - z) * n + z * h = n + z * (h - n)
        let diff = tape.sub(h, n)?;
        let carry = tape.mul(z, diff)?;
        tape.add(n, carry)
    }
}

/// Shared recurrent encoder of an agent's action-observation history:
/// affine + ReLU, a GRU cell, and an optional output projection.
#[derive(Clone, Copy, Debug)]
pub struct TrajectoryEncoder {
    pub fc: Linear,
    pub gru: GruCell,
    pub proj: Option<Linear>,
}

impl TrajectoryEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let fc = Linear::new(store, &format!("{name}.fc"), input, hidden, rng);
        let gru = GruCell::new(store, &format!("{name}.gru"), hidden, hidden, rng);
        let proj = output.map(|m| Linear::new(store, &format!("{name}.proj"), hidden, m, rng));
        TrajectoryEncoder { fc, gru, proj }
    }

    pub fn hidden(&self) -> usize {
        self.gru.hidden
    }

    /// Advances the hidden state; returns `(output, next_hidden)`. Without a
    /// projection the output is the new hidden state itself.
    pub fn step(&self, tape: &mut Tape<'_>, p: &Bound, input: Var, hidden: Var) -> Result<(Var, Var)> {
        let x = self.fc.forward(tape, p, input)?;
        let x = tape.relu(x);
        let next = self.gru.forward(tape, p, x, hidden)?;
        let out = match &self.proj {
            Some(proj) => proj.forward(tape, p, next)?,
            None => next,
        };
        Ok((out, next))
    }
}
