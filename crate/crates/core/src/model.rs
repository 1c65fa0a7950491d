//! The complete agent network: subtask representations, ability-based
//! selection, decoded subtask heads and the mixer, with every ablation mode.

use rand::{Rng, SeedableRng};

use crate::autodiff::{argmax, Tape, Tensor, Var};
use crate::config::{Ablation, RunConfig};
use crate::env::EnvSpec;
use crate::error::{Error, Result};
use crate::mixer::Mixer;
use crate::nn::{Bound, Linear, ParamStore, TrajectoryEncoder};
use crate::policy::{combine_q, per_subtask_q, HeadShape, SubtaskHeads};
use crate::repr::SubtaskEncoder;
use crate::selection::{gumbel_st_sample, one_hot_rows, relaxed_sample, selection_distribution};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub n_agents: usize,
    pub n_actions: usize,
    pub input: usize,
    pub state_dim: usize,
    pub k: usize,
    pub m: usize,
    pub hidden: usize,
    pub repr_hidden: usize,
    pub mixer_embed: usize,
}

impl ModelDims {
    pub fn new(cfg: &RunConfig, spec: &EnvSpec) -> Self {
        ModelDims {
            n_agents: spec.n_agents,
            n_actions: spec.n_actions,
            input: spec.agent_input_dim(),
            state_dim: spec.state_dim,
            k: cfg.effective_k(),
            m: cfg.m,
            hidden: cfg.hidden,
            repr_hidden: cfg.repr_hidden,
            mixer_embed: cfg.mixer_embed,
        }
    }
}

/// How the selection one-hot is produced on a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum Selector<'n> {
    /// argmax of the selection distribution
    Greedy,
    /// straight-through Gumbel sample with the given noise (`rows × k`)
    Gumbel(&'n Tensor),
    /// relaxed Gumbel-Softmax sample without the hard substitution
    Relaxed(&'n Tensor),
}

/// Recurrent state of both trajectory encoders, one row per agent.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub ability: Option<Tensor>,
    pub history: Tensor,
}

/// Output of [`Architecture::forward`] over a stack of timesteps.
#[derive(Debug)]
pub struct Forward {
    /// per-agent Q-values, `steps·R × n_actions`, step-major
    pub q: Var,
    /// selection distribution, `steps·R × k`, when the mode has one
    pub probs: Option<Var>,
    /// subtask representations `k × m`, when the mode has them
    pub reps: Option<Var>,
    pub selected: Vec<usize>,
    pub state: RecurrentState,
}

/// Which sub-networks exist and where their parameters live in the store.
#[derive(Clone, Copy, Debug)]
pub struct Architecture {
    pub dims: ModelDims,
    pub mode: Ablation,
    pub encoder: Option<SubtaskEncoder>,
    pub ability: Option<TrajectoryEncoder>,
    pub direct: Option<Linear>,
    pub history: TrajectoryEncoder,
    pub heads: SubtaskHeads,
    pub mixer: Mixer,
    /// Gumbel-Softmax temperature
    pub temperature: f64,
}

impl Architecture {
    pub fn build<R: Rng>(dims: ModelDims, mode: Ablation, rng: &mut R) -> (Self, ParamStore) {
        let mut store = ParamStore::new();
        let shared = mode.is_shared();
        let encoder = (!shared).then(|| SubtaskEncoder::new(&mut store, dims.k, dims.repr_hidden, dims.m, rng));
        let ability = (!shared && mode != Ablation::RandomSelection)
            .then(|| TrajectoryEncoder::new(&mut store, "ability", dims.input, dims.hidden, Some(dims.m), rng));
        let direct = (mode == Ablation::DirectProb).then(|| Linear::new(&mut store, "direct_logits", dims.m, dims.k, rng));
        let history = TrajectoryEncoder::new(&mut store, "history", dims.input, dims.hidden, None, rng);
        let shape = HeadShape {
            hidden: dims.hidden,
            n_actions: dims.n_actions,
        };
        let heads = if shared || mode == Ablation::NoDecoder {
            SubtaskHeads::free(&mut store, dims.k, shape, rng)
        } else {
            SubtaskHeads::decoder(&mut store, dims.m, shape, rng)
        };
        let mixer = Mixer::new(&mut store, dims.n_agents, dims.state_dim, dims.mixer_embed, rng);
        let arch = Architecture {
            dims,
            mode,
            encoder,
            ability,
            direct,
            history,
            heads,
            mixer,
            temperature: 1.0,
        };
        (arch, store)
    }

    pub fn k(&self) -> usize {
        self.dims.k
    }

    /// Whether forward passes consume Gumbel noise for selection.
    pub fn needs_noise(&self) -> bool {
        !self.mode.is_shared()
    }

    pub fn initial_state(&self, rows: usize) -> RecurrentState {
        RecurrentState {
            ability: self.ability.map(|a| Tensor::zeros(rows, a.hidden())),
            history: Tensor::zeros(rows, self.history.hidden()),
        }
    }

    /// Runs both encoders over `inputs` (one `R × input` tensor per step)
    /// and scores every step's rows with the selected subtask heads.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        p: &Bound,
        inputs: &[Tensor],
        h0: &RecurrentState,
        selector: Selector<'_>,
    ) -> Result<Forward> {
        if inputs.is_empty() {
            return Err(Error::Contract("forward needs at least one timestep".into()));
        }
        let mut h_ab = match (&self.ability, &h0.ability) {
            (Some(_), Some(h)) => Some(tape.constant(h.clone())),
            (Some(_), None) => return Err(Error::Contract("missing ability hidden state".into())),
            _ => None,
        };
        let mut h_hist = tape.constant(h0.history.clone());
        let mut abilities = Vec::with_capacity(inputs.len());
        let mut histories = Vec::with_capacity(inputs.len());
        for x in inputs {
            let x = tape.constant(x.clone());
            if let (Some(enc), Some(h)) = (&self.ability, h_ab) {
                let (out, next) = enc.step(tape, p, x, h)?;
                abilities.push(out);
                h_ab = Some(next);
            }
            let (out, next) = self.history.step(tape, p, x, h_hist)?;
            histories.push(out);
            h_hist = next;
        }
        let state = RecurrentState {
            ability: h_ab.map(|h| tape.value(h).clone()),
            history: tape.value(h_hist).clone(),
        };
        let history = tape.concat_rows(&histories)?;
        let ability = if abilities.is_empty() {
            None
        } else {
            Some(tape.concat_rows(&abilities)?)
        };
        let rows = tape.shape(history)[0];

        let reps = match &self.encoder {
            Some(enc) => Some(enc.encode(tape, p)?),
            None => None,
        };
        let probs = self.selection_probs(tape, p, ability, reps)?;
        let (weights, selected, hard) = self.selection_weights(tape, probs, rows, selector)?;
        let packed = self.heads.decode_policies(tape, p, reps)?;
        let per = per_subtask_q(tape, history, packed, self.heads.shape)?;
        let q = combine_q(tape, &per, weights, hard)?;
        Ok(Forward {
            q,
            probs,
            reps,
            selected,
            state,
        })
    }

    fn selection_probs(&self, tape: &mut Tape<'_>, p: &Bound, ability: Option<Var>, reps: Option<Var>) -> Result<Option<Var>> {
        let (Some(ability), Some(reps)) = (ability, reps) else {
            return Ok(None);
        };
        Ok(Some(match self.direct {
            Some(lin) => {
                let logits = lin.forward(tape, p, ability)?;
                tape.softmax_rows(logits)
            }
            None => selection_distribution(tape, ability, reps)?,
        }))
    }

    fn selection_weights(
        &self,
        tape: &mut Tape<'_>,
        probs: Option<Var>,
        rows: usize,
        selector: Selector<'_>,
    ) -> Result<(Var, Vec<usize>, bool)> {
        let k = self.k();
        if self.mode.is_shared() {
            return Ok((tape.constant(Tensor::filled(rows, 1, 1.0)), vec![0; rows], true));
        }
        if self.mode == Ablation::RandomSelection {
            let noise = match selector {
                Selector::Gumbel(n) | Selector::Relaxed(n) => n,
                Selector::Greedy => return Err(Error::Contract("random selection needs a noise tensor".into())),
            };
            check_noise(noise, rows, k)?;
            // argmax of i.i.d. Gumbel noise alone is uniform over subtasks
            let selected: Vec<usize> = (0..rows).map(|r| argmax(noise.row_slice(r))).collect();
            return Ok((tape.constant(one_hot_rows(&selected, k)), selected, true));
        }
        let probs = probs.ok_or_else(|| Error::Contract("selection distribution missing".into()))?;
        if self.mode == Ablation::Mixture {
            let pv = tape.value(probs);
            let selected = (0..rows).map(|r| pv.argmax_row(r)).collect();
            return Ok((probs, selected, false));
        }
        match selector {
            Selector::Greedy => {
                let pv = tape.value(probs);
                let selected: Vec<usize> = (0..rows).map(|r| pv.argmax_row(r)).collect();
                Ok((tape.constant(one_hot_rows(&selected, k)), selected, true))
            }
            Selector::Gumbel(noise) => {
                check_noise(noise, rows, k)?;
                let s = gumbel_st_sample(tape, probs, self.temperature, noise)?;
                Ok((s.one_hot, s.selected, true))
            }
            Selector::Relaxed(noise) => {
                check_noise(noise, rows, k)?;
                let soft = relaxed_sample(tape, probs, self.temperature, noise)?;
                let sv = tape.value(soft);
                let selected = (0..rows).map(|r| sv.argmax_row(r)).collect();
                Ok((soft, selected, false))
            }
        }
    }

}

fn check_noise(noise: &Tensor, rows: usize, k: usize) -> Result<()> {
    if noise.shape() != [rows, k] {
        return Err(Error::Dimension {
            op: "selection noise",
            lhs: noise.shape(),
            rhs: [rows, k],
        });
    }
    Ok(())
}

/// An architecture together with its parameter values.
#[derive(Clone, Debug)]
pub struct Model {
    pub arch: Architecture,
    pub params: ParamStore,
}

impl Model {
    /// Builds the network `cfg` describes for `spec`. The widened shared
    /// baseline gets the trajectory width that matches the full model's size.
    pub fn new<R: Rng>(cfg: &RunConfig, spec: &EnvSpec, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut dims = ModelDims::new(cfg, spec);
        if cfg.ablation == Ablation::SharedLarge {
            dims.hidden = matched_shared_hidden(cfg, spec);
        }
        let (mut arch, params) = Architecture::build(dims, cfg.ablation, rng);
        arch.temperature = cfg.temperature;
        Ok(Model { arch, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }
}

/// Parameter count of the network `cfg` describes, with `ablation` swapped in.
pub fn param_count(cfg: &RunConfig, spec: &EnvSpec, ablation: Ablation, hidden: usize) -> usize {
    let mut c = cfg.clone();
    c.ablation = ablation;
    let mut dims = ModelDims::new(&c, spec);
    dims.hidden = hidden;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    Architecture::build(dims, ablation, &mut rng).1.count()
}

/// Trajectory width for the shared baseline whose parameter count is closest
/// to the full model's.
pub fn matched_shared_hidden(cfg: &RunConfig, spec: &EnvSpec) -> usize {
    let target = param_count(cfg, spec, Ablation::None, cfg.hidden) as f64;
    let count = |h: usize| param_count(cfg, spec, Ablation::SharedBaseline, h) as f64;
    let (mut lo, mut hi) = (1usize, cfg.hidden.max(1));
    while count(hi) < target {
        lo = hi;
        hi *= 2;
    }
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if count(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if (count(lo) - target).abs() <= (count(hi) - target).abs() {
        lo
    } else {
        hi
    }
}
