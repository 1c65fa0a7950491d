//! TD targets, the composite objective, and the collect-then-update loop.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::config::{Ablation, RunConfig};
use crate::env::{make_env, EnvSpec, Environment};
use crate::error::{Error, Result};
use crate::model::{Architecture, Model, Selector};
use crate::nn::{Bound, ParamStore};
use crate::optim::{clip_grad_norm, EpsilonSchedule, RmsProp};
use crate::replay::{EpisodeBatch, ReplayBuffer};
use crate::repr::repr_regularizer;
use crate::rollout::{run_episodes, ActMode, Rollout};
use crate::selection::{sample_gumbel, temporal_kl_regularizer};

/// Coefficients and switches of the composite objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_phi: f64,
    pub lambda_h: f64,
    pub kl_stop_gradient_next: bool,
}

impl LossWeights {
    /// Coefficients from `cfg`, with the terms its ablation removes set to 0.
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(LossWeights {
            lambda_phi: if cfg.ablation.uses_repr_distance() { cfg.lambda_phi } else { 0.0 },
            lambda_h: if cfg.ablation.uses_smoothing() { cfg.lambda_h } else { 0.0 },
            kl_stop_gradient_next: cfg.kl_stop_gradient_next,
        })
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_phi", self.lambda_phi), ("lambda_h", self.lambda_h)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Loss terms on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub td: Var,
    pub phi: Option<Var>,
    pub h: Option<Var>,
}

/// Loss term values.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub td: f64,
    pub phi: f64,
    pub h: f64,
}

impl LossVars {
    pub fn values(&self, tape: &Tape<'_>) -> LossParts {
        LossParts {
            total: tape.value(self.total).item(),
            td: tape.value(self.td).item(),
            phi: self.phi.map_or(0.0, |v| tape.value(v).item()),
            h: self.h.map_or(0.0, |v| tape.value(v).item()),
        }
    }
}

/// Inputs for steps `0..steps` of a batch.
pub fn batch_inputs(batch: &EpisodeBatch, steps: usize) -> Vec<Tensor> {
    (0..steps).map(|t| batch.agent_inputs(t)).collect()
}

/// Greedy value of each agent at every step, `steps·R` entries: the max of
/// `q` over the available actions, or at `argmax_from` when given (double Q).
/// Rows without an available action are 0.
fn greedy_values(q: &Tensor, avail: &[bool], argmax_from: Option<&Tensor>) -> Vec<f64> {
    let a = q.cols();
    (0..q.rows())
        .map(|r| {
            let ok = &avail[r * a..(r + 1) * a];
            let pick_from = argmax_from.unwrap_or(q).row_slice(r);
            let mut best: Option<usize> = None;
            for i in 0..a {
                if ok[i] && best.is_none_or(|b| pick_from[i] > pick_from[b]) {
                    best = Some(i);
                }
            }
            best.map_or(0.0, |i| q.get(r, i))
        })
        .collect()
}

/// `y = r + γ (1 − terminated) Q_tot⁻(τ′, greedy u′)` for every `(t, b)`,
/// as a `T·B × 1` column. `online_q` holds the learner's Q-values for steps
/// `0..=T` when actions at `t + 1` are picked by the online network.
pub fn td_targets<R: RngCore>(
    arch: &Architecture,
    target: &ParamStore,
    batch: &EpisodeBatch,
    gamma: f64,
    online_q: Option<&Tensor>,
    rng: &mut R,
) -> Result<Tensor> {
    let (t_len, b, n, a) = (batch.max_len, batch.batch_size, batch.n_agents, batch.n_actions);
    let r = batch.rows();
    let inputs = batch_inputs(batch, t_len + 1);
    let noise = (arch.mode == Ablation::RandomSelection).then(|| sample_gumbel(rng, (t_len + 1) * r, arch.k()));
    let selector = noise.as_ref().map_or(Selector::Greedy, Selector::Gumbel);

    let mut tape = Tape::new();
    let p = target.bind_const(&mut tape);
    let out = arch.forward(&mut tape, &p, &inputs, &arch.initial_state(r), selector)?;
    let qv = tape.value(out.q);
    let next_q = Tensor::new(t_len * r, a, qv.data()[r * a..].to_vec())?;
    let next_avail = &batch.avail[r * a..];
    let pick = match online_q {
        Some(oq) => Some(Tensor::new(t_len * r, a, oq.data()[r * a..].to_vec())?),
        None => None,
    };
    let values = greedy_values(&next_q, next_avail, pick.as_ref());
    let qn = tape.constant(Tensor::new(t_len * b, n, values)?);
    let next_states = tape.constant(Tensor::new(t_len * b, batch.state_dim, batch.states[b * batch.state_dim..].to_vec())?);
    let q_tot = arch.mixer.mix(&mut tape, &p, qn, next_states)?;
    let qt = tape.value(q_tot);
    let y = (0..t_len * b)
        .map(|i| {
            let cont = if batch.terminated[i] { 0.0 } else { 1.0 };
            batch.rewards[i] + gamma * cont * qt.data()[i]
        })
        .collect();
    Tensor::new(t_len * b, 1, y)
}

/// `L_TD + λ_φ L_φ + λ_h L_h` for a batch. `targets` receives the learner's
/// Q-values for steps `0..=T` when `double_q` is set and returns the `T·B × 1`
/// TD targets.
pub fn composite_loss(
    tape: &mut Tape<'_>,
    p: &Bound,
    arch: &Architecture,
    batch: &EpisodeBatch,
    selector: Selector<'_>,
    weights: LossWeights,
    double_q: bool,
    targets: impl FnOnce(Option<&Tensor>) -> Result<Tensor>,
) -> Result<LossVars> {
    weights.validate()?;
    let (t_len, b, n) = (batch.max_len, batch.batch_size, batch.n_agents);
    let r = batch.rows();
    let steps = if double_q { t_len + 1 } else { t_len };
    let inputs = batch_inputs(batch, steps);
    let out = arch.forward(tape, p, &inputs, &arch.initial_state(r), selector)?;

    let y = targets(double_q.then(|| tape.value(out.q)))?;
    if y.shape() != [t_len * b, 1] {
        return Err(Error::Dimension {
            op: "td targets",
            lhs: y.shape(),
            rhs: [t_len * b, 1],
        });
    }

    let q_steps = if steps > t_len { tape.slice_rows(out.q, 0, t_len * r)? } else { out.q };
    let chosen = tape.gather_cols(q_steps, &batch.actions)?;
    let chosen = tape.reshape(chosen, t_len * b, n)?;
    let states = tape.constant(Tensor::new(t_len * b, batch.state_dim, batch.states[..t_len * b * batch.state_dim].to_vec())?);
    let q_tot = arch.mixer.mix(tape, p, chosen, states)?;
    let yv = tape.constant(y);
    let diff = tape.sub(q_tot, yv)?;
    let sq = tape.mul(diff, diff)?;
    let filled = tape.constant(Tensor::new(t_len * b, 1, batch.filled.clone())?);
    let masked = tape.mul(sq, filled)?;
    let s = tape.sum(masked);
    let td = tape.scale(s, 1.0 / batch.valid_steps().max(1.0));

    let mut total = td;
    let mut phi = None;
    if weights.lambda_phi > 0.0 {
        if let Some(reps) = out.reps {
            let l = repr_regularizer(tape, reps)?;
            let term = tape.scale(l, weights.lambda_phi);
            total = tape.add(total, term)?;
            phi = Some(l);
        }
    }
    let mut h = None;
    if weights.lambda_h > 0.0 && t_len >= 2 {
        if let Some(probs) = out.probs {
            let pairs = (t_len - 1) * r;
            let now = tape.slice_rows(probs, 0, pairs)?;
            let next = tape.slice_rows(probs, r, pairs)?;
            let mut mask = vec![0.0; pairs];
            let mut valid = 0.0;
            for t in 0..t_len - 1 {
                let f = batch.filled_at(t + 1);
                for bi in 0..b {
                    valid += f[bi];
                    for ag in 0..n {
                        mask[t * r + bi * n + ag] = f[bi];
                    }
                }
            }
            let mask = Tensor::new(pairs, 1, mask)?;
            let l = temporal_kl_regularizer(tape, &[now, next], &[mask], valid, weights.kl_stop_gradient_next)?;
            let term = tape.scale(l, weights.lambda_h);
            total = tape.add(total, term)?;
            h = Some(l);
        }
    }
    Ok(LossVars { total, td, phi, h })
}

/// Result of one collected episode and, when the buffer was ready, one
/// gradient step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub rollout: Rollout,
    pub loss: Option<LossParts>,
    pub grad_norm: Option<f64>,
}

/// Online and target networks, optimizer, buffer and the training
/// environment.
pub struct Learner {
    pub cfg: RunConfig,
    pub spec: EnvSpec,
    pub model: Model,
    pub target: ParamStore,
    pub buffer: ReplayBuffer,
    pub weights: LossWeights,
    pub schedule: EpsilonSchedule,
    optimizer: RmsProp,
    env: Box<dyn Environment>,
    rng: ChaCha8Rng,
    /// environment steps collected so far
    pub timesteps: u64,
    pub episodes: u64,
    pub updates: u64,
}

impl Learner {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let env = make_env(&cfg.env, cfg.gamma)?;
        let spec = env.spec().clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = Model::new(cfg, &spec, &mut rng)?;
        let target = model.params.clone();
        let optimizer = RmsProp::new(&model.params, cfg.lr, cfg.rms_alpha, cfg.rms_eps);
        Ok(Learner {
            cfg: cfg.clone(),
            spec,
            weights: LossWeights::from_config(cfg)?,
            schedule: EpsilonSchedule {
                start: cfg.epsilon_start,
                end: cfg.epsilon_end,
                horizon: cfg.epsilon_anneal,
            },
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            model,
            target,
            optimizer,
            env,
            rng,
            timesteps: 0,
            episodes: 0,
            updates: 0,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.schedule.epsilon(self.timesteps)
    }

    /// Plays one exploratory episode and stores it.
    pub fn collect(&mut self) -> Result<Rollout> {
        let seed = self.rng.next_u64();
        let mode = ActMode {
            epsilon: self.epsilon(),
            sample_subtasks: true,
        };
        let mut roll = run_episodes(&self.model, std::slice::from_mut(&mut self.env), &[seed], mode, false, &mut self.rng)?;
        let roll = roll.pop().expect("one episode");
        self.timesteps += roll.episode.len() as u64;
        self.episodes += 1;
        self.buffer.push(roll.episode.clone());
        Ok(roll)
    }

    /// One optimizer step on `batch`; returns the loss terms and the gradient
    /// norm before clipping. Parameters are untouched when the loss or any
    /// gradient is non-finite.
    pub fn update(&mut self, batch: &EpisodeBatch) -> Result<(LossParts, f64)> {
        let arch = self.model.arch;
        let k = arch.k();
        let steps = if self.cfg.double_q { batch.max_len + 1 } else { batch.max_len };
        let noise = arch.needs_noise().then(|| sample_gumbel(&mut self.rng, steps * batch.rows(), k));
        let selector = noise.as_ref().map_or(Selector::Greedy, Selector::Gumbel);
        let (gamma, weights, double_q) = (self.cfg.gamma, self.weights, self.cfg.double_q);
        let target = &self.target;
        let rng = &mut self.rng;

        let (parts, mut grads) = {
            let mut tape = Tape::new();
            let p = self.model.params.bind(&mut tape);
            let loss = composite_loss(&mut tape, &p, &arch, batch, selector, weights, double_q, |online| {
                td_targets(&arch, target, batch, gamma, online, rng)
            })?;
            let parts = loss.values(&tape);
            if !parts.total.is_finite() {
                return Err(Error::NonFiniteLoss { step: self.updates });
            }
            let mut g = tape.backward(loss.total)?;
            let grads: Vec<Tensor> = p
                .vars()
                .iter()
                .zip(self.model.params.blocks())
                .map(|(&v, b)| g.take(v).unwrap_or_else(|| Tensor::zeros(b.value.rows(), b.value.cols())))
                .collect();
            (parts, grads)
        };
        let norm = clip_grad_norm(&mut grads, self.cfg.grad_clip);
        self.optimizer.step(&mut self.model.params, &grads)?;
        self.updates += 1;
        Ok((parts, norm))
    }

    /// Collects one episode, then takes one gradient step once the buffer
    /// holds a full batch, refreshing the target network on schedule.
    pub fn train_episode(&mut self) -> Result<StepReport> {
        let rollout = self.collect()?;
        let mut loss = None;
        let mut grad_norm = None;
        if self.buffer.can_sample(self.cfg.batch_size) {
            let sample = self
                .buffer
                .sample(self.cfg.batch_size, &mut self.rng)
                .expect("buffer is ready");
            let batch = EpisodeBatch::from_episodes(&self.spec, &sample)?;
            let (parts, norm) = self.update(&batch)?;
            loss = Some(parts);
            grad_norm = Some(norm);
        }
        if self.episodes % self.cfg.target_update_interval == 0 {
            self.refresh_target()?;
        }
        Ok(StepReport {
            rollout,
            loss,
            grad_norm,
        })
    }

    pub fn refresh_target(&mut self) -> Result<()> {
        self.target.copy_from(&self.model.params)
    }
}

/// Finite-difference check of the composite loss against every parameter.
///
/// Builds the network `cfg` describes, collects `episodes` exploratory
/// episodes into one batch and compares analytic gradients with central
/// differences of step `h`. Selection uses the relaxed Gumbel-Softmax sample
/// with fixed noise: the straight-through estimator's backward pass is not
/// the derivative of its forward value, so only the relaxed path has a
/// gradient finite differences can confirm. TD targets are held fixed.
pub fn full_loss_grad_check(cfg: &RunConfig, episodes: usize, h: f64) -> Result<crate::autodiff::GradCheckReport> {
    if episodes == 0 {
        return Err(Error::Config("grad check needs at least one episode".into()));
    }
    let mut learner = Learner::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6ead);
    let mut envs = (0..episodes)
        .map(|_| make_env(&cfg.env, cfg.gamma))
        .collect::<Result<Vec<_>>>()?;
    let seeds: Vec<u64> = (0..episodes as u64).collect();
    let mode = ActMode {
        epsilon: 1.0,
        sample_subtasks: true,
    };
    let rolls = run_episodes(&learner.model, &mut envs, &seeds, mode, false, &mut rng)?;
    let eps: Vec<_> = rolls.iter().map(|r| &r.episode).collect();
    let batch = EpisodeBatch::from_episodes(&learner.spec, &eps)?;
    let arch = learner.model.arch;
    // a target network that differs from the online one
    for b in 0..learner.target.len() {
        learner.target.block_mut(b).value.data_mut().iter_mut().for_each(|x| *x *= 0.9);
    }
    let y = td_targets(&arch, &learner.target, &batch, cfg.gamma, None, &mut rng)?;
    let noise = sample_gumbel(&mut rng, batch.max_len * batch.rows(), arch.k());
    let weights = learner.weights;
    let inputs: Vec<Tensor> = learner.model.params.blocks().iter().map(|b| b.value.clone()).collect();
    crate::autodiff::grad_check_many(
        |tape, vars| {
            let p = Bound::from_vars(vars.to_vec());
            let loss = composite_loss(tape, &p, &arch, &batch, Selector::Relaxed(&noise), weights, false, |_| Ok(y.clone()))?;
            Ok(loss.total)
        },
        &inputs,
        h,
    )
}
