use super::{repeated_game_optimum, EnvSpec, Environment, OracleReturn, StepResult};
use crate::error::{Error, Result};

/// Repeated coordination game: the team scores 1 on a step exactly when half
/// of the agents pick action 0 and the other half pick action 1.
///
/// Observations are a constant bias input, so agents can only tell each other
/// apart through their identity. The state is the elapsed fraction of the
/// episode.
#[derive(Debug)]
pub struct TwoRolesMatrix {
    spec: EnvSpec,
    t: usize,
    done: bool,
}

impl TwoRolesMatrix {
    pub fn new(n_agents: usize, episode_limit: usize, gamma: f64) -> Result<Self> {
        if n_agents == 0 || n_agents % 2 != 0 {
            return Err(Error::Config(format!(
                "two_roles needs a positive even agent count, got {n_agents}"
            )));
        }
        let spec = EnvSpec {
            n_agents,
            n_actions: 2,
            obs_dim: 1,
            state_dim: 1,
            episode_limit,
            gamma,
        };
        spec.validate()?;
        Ok(TwoRolesMatrix {
            spec,
            t: 0,
            done: true,
        })
    }

    pub fn payoff(&self, actions: &[usize]) -> f64 {
        let x = actions.iter().filter(|&&a| a == 0).count();
        if 2 * x == self.spec.n_agents {
            1.0
        } else {
            0.0
        }
    }

    fn observe(&self, reward: f64) -> StepResult {
        let n = self.spec.n_agents;
        StepResult {
            observations: vec![vec![1.0]; n],
            state: vec![self.t as f64 / self.spec.episode_limit as f64],
            reward,
            terminated: self.done,
            avail_actions: vec![vec![!self.done; 2]; n],
        }
    }
}

impl Environment for TwoRolesMatrix {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn name(&self) -> &'static str {
        "two_roles"
    }

    fn reset(&mut self, _seed: u64) -> StepResult {
        self.t = 0;
        self.done = false;
        self.observe(0.0)
    }

    fn step(&mut self, actions: &[usize]) -> Result<StepResult> {
        if self.done {
            return Err(Error::Contract("step called on a terminated episode".into()));
        }
        if actions.len() != self.spec.n_agents {
            return Err(Error::Contract(format!(
                "expected {} actions, got {}",
                self.spec.n_agents,
                actions.len()
            )));
        }
        for (agent, &a) in actions.iter().enumerate() {
            if a >= 2 {
                return Err(Error::Contract(format!("agent {agent}: action {a} is not available")));
            }
        }
        let reward = self.payoff(actions);
        self.t += 1;
        self.done = self.t >= self.spec.episode_limit;
        Ok(self.observe(reward))
    }

    fn oracle_return(&self, _seed: u64) -> Result<OracleReturn> {
        repeated_game_optimum(&self.spec, |u| self.payoff(u))
    }
}
