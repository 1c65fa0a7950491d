//! Cooperative Dec-POMDP environment contract and the toy environments used
//! for verification.

mod heterogeneous_jobs;
mod two_roles;

use std::collections::BTreeMap;

pub use heterogeneous_jobs::HeterogeneousJobs;
pub use two_roles::TwoRolesMatrix;

use crate::error::{Error, Result};

/// Sizes of a Dec-POMDP instance.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvSpec {
    pub n_agents: usize,
    pub n_actions: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub episode_limit: usize,
    pub gamma: f64,
}

impl EnvSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_agents", self.n_agents),
            ("n_actions", self.n_actions),
            ("obs_dim", self.obs_dim),
            ("state_dim", self.state_dim),
            ("episode_limit", self.episode_limit),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        Ok(())
    }

    /// Width of the per-agent network input.
    pub fn agent_input_dim(&self) -> usize {
        AgentObservationLayout::from_spec(self).width()
    }
}

/// What every agent sees after a reset or a step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub observations: Vec<Vec<f64>>,
    pub state: Vec<f64>,
    pub reward: f64,
    pub terminated: bool,
    pub avail_actions: Vec<Vec<bool>>,
}

/// Optimal return of one episode under full state information.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleReturn {
    pub discounted: f64,
    pub undiscounted: f64,
}

/// Largest number of (timestep, joint action) evaluations the oracle performs.
pub const ORACLE_BUDGET: u128 = 1_000_000;

pub trait Environment: Send {
    fn spec(&self) -> &EnvSpec;

    /// Starts a new episode; deterministic in `seed`.
    fn reset(&mut self, seed: u64) -> StepResult;

    fn step(&mut self, actions: &[usize]) -> Result<StepResult>;

    /// Exact optimum for the episode that `reset(seed)` starts.
    fn oracle_return(&self, seed: u64) -> Result<OracleReturn>;

    fn name(&self) -> &'static str;
}

/// Per-agent network input: observation, previous action, agent identity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AgentObservationLayout {
    pub obs_dim: usize,
    pub n_actions: usize,
    pub n_agents: usize,
}

impl AgentObservationLayout {
    pub fn from_spec(spec: &EnvSpec) -> Self {
        AgentObservationLayout {
            obs_dim: spec.obs_dim,
            n_actions: spec.n_actions,
            n_agents: spec.n_agents,
        }
    }

    pub fn width(&self) -> usize {
        self.obs_dim + self.n_actions + self.n_agents
    }

    /// Writes the input row for `agent` into `out` (length [`Self::width`]).
    pub fn fill(&self, obs: &[f64], prev_action: Option<usize>, agent: usize, out: &mut [f64]) {
        debug_assert_eq!(obs.len(), self.obs_dim);
        debug_assert_eq!(out.len(), self.width());
        out.iter_mut().for_each(|x| *x = 0.0);
        out[..self.obs_dim].copy_from_slice(obs);
        if let Some(a) = prev_action {
            out[self.obs_dim + a] = 1.0;
        }
        out[self.obs_dim + self.n_actions + agent] = 1.0;
    }

    pub fn build(&self, obs: &[f64], prev_action: Option<usize>, agent: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.width()];
        self.fill(obs, prev_action, agent, &mut out);
        out
    }
}

/// Optimum of a stateless repeated game by enumerating every joint action at
/// every step of a `horizon`-step episode.
pub(crate) fn repeated_game_optimum(
    spec: &EnvSpec,
    reward: impl Fn(&[usize]) -> f64,
) -> Result<OracleReturn> {
    let joint = (spec.n_actions as u128)
        .checked_pow(spec.n_agents as u32)
        .unwrap_or(u128::MAX);
    let needed = joint.saturating_mul(spec.episode_limit as u128);
    if needed > ORACLE_BUDGET {
        return Err(Error::Budget {
            needed,
            budget: ORACLE_BUDGET,
        });
    }
    let mut actions = vec![0usize; spec.n_agents];
    let mut discounted = 0.0;
    let mut undiscounted = 0.0;
    let mut weight = 1.0;
    for _ in 0..spec.episode_limit {
        let mut best = f64::NEG_INFINITY;
        actions.iter_mut().for_each(|a| *a = 0);
        loop {
            best = best.max(reward(&actions));
            if !advance(&mut actions, spec.n_actions) {
                break;
            }
        }
        discounted += weight * best;
        undiscounted += best;
        weight *= spec.gamma;
    }
    Ok(OracleReturn {
        discounted,
        undiscounted,
    })
}

/// Odometer increment over `base^len` tuples; false once it wraps.
fn advance(digits: &mut [usize], base: usize) -> bool {
    for d in digits.iter_mut() {
        *d += 1;
        if *d < base {
            return true;
        }
        *d = 0;
    }
    false
}

/// Environment name plus string parameters, as read from a run config.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EnvConfig {
    pub name: String,
    pub params: BTreeMap<String, String>,
}

fn param<T: std::str::FromStr>(cfg: &EnvConfig, key: &str, default: T) -> Result<T> {
    match cfg.params.get(key) {
        None => Ok(default),
        Some(raw) => raw
            .parse()
            .map_err(|_| Error::Config(format!("env.{key}: cannot parse `{raw}`"))),
    }
}

/// Builds the named environment. `gamma` comes from the run config.
pub fn make_env(cfg: &EnvConfig, gamma: f64) -> Result<Box<dyn Environment>> {
    let known: &[&str] = match cfg.name.as_str() {
        "heterogeneous_jobs" => &["n_agents", "n_jobs", "episode_limit", "noise_std", "overstaff_penalty"],
        "two_roles" => &["n_agents", "episode_limit"],
        other => return Err(Error::Config(format!("unknown environment `{other}`"))),
    };
    if let Some(k) = cfg.params.keys().find(|k| !known.contains(&k.as_str())) {
        return Err(Error::Config(format!("unknown parameter env.{k} for {}", cfg.name)));
    }
    match cfg.name.as_str() {
        "heterogeneous_jobs" => Ok(Box::new(HeterogeneousJobs::new(
            param(cfg, "n_agents", 4)?,
            param(cfg, "n_jobs", 2)?,
            param(cfg, "episode_limit", 25)?,
            gamma,
        )?
        .with_noise(param(cfg, "noise_std", heterogeneous_jobs::NOISE_STD)?)
        .with_overstaff_penalty(param(cfg, "overstaff_penalty", heterogeneous_jobs::OVERSTAFF_PENALTY)?))),
        _ => Ok(Box::new(TwoRolesMatrix::new(
            param(cfg, "n_agents", 2)?,
            param(cfg, "episode_limit", 10)?,
            gamma,
        )?)),
    }
}
