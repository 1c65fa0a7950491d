//! Episodes, padded time-major batches, and the FIFO episode buffer.

use std::collections::VecDeque;

use rand::seq::index;
use rand::Rng;

use crate::autodiff::Tensor;
use crate::env::{AgentObservationLayout, EnvSpec};
use crate::error::{Error, Result};

/// One recorded episode of `len` transitions.
///
/// `obs`, `states` and `avail` hold `len + 1` entries (the final entry is the
/// observation after the last step); the others hold `len`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub obs: Vec<Vec<Vec<f64>>>,
    pub states: Vec<Vec<f64>>,
    pub avail: Vec<Vec<Vec<bool>>>,
    pub actions: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub terminated: Vec<bool>,
    /// oracle optimum for this episode, when the environment has one
    pub oracle: Option<f64>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn discounted_return(&self, gamma: f64) -> f64 {
        self.rewards.iter().rev().fold(0.0, |acc, r| r + gamma * acc)
    }

    pub fn total_reward(&self) -> f64 {
        self.rewards.iter().sum()
    }
}

/// Time-padded batch of episodes, laid out `[t][b][agent]...`.
#[derive(Clone, Debug)]
pub struct EpisodeBatch {
    pub batch_size: usize,
    /// longest episode in the batch; arrays with a `+1` hold `max_len + 1` steps
    pub max_len: usize,
    pub n_agents: usize,
    pub n_actions: usize,
    pub obs_dim: usize,
    pub state_dim: usize,
    pub obs: Vec<f64>,
    pub states: Vec<f64>,
    pub avail: Vec<bool>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub terminated: Vec<bool>,
    pub filled: Vec<f64>,
}

impl EpisodeBatch {
    pub fn from_episodes(spec: &EnvSpec, episodes: &[&Episode]) -> Result<Self> {
        if episodes.is_empty() {
            return Err(Error::Contract("cannot build an empty episode batch".into()));
        }
        let b = episodes.len();
        let t_max = episodes.iter().map(|e| e.len()).max().unwrap_or(0);
        if t_max == 0 {
            return Err(Error::Contract("batch contains only empty episodes".into()));
        }
        let (n, a, o, s) = (spec.n_agents, spec.n_actions, spec.obs_dim, spec.state_dim);
        let mut batch = EpisodeBatch {
            batch_size: b,
            max_len: t_max,
            n_agents: n,
            n_actions: a,
            obs_dim: o,
            state_dim: s,
            obs: vec![0.0; (t_max + 1) * b * n * o],
            states: vec![0.0; (t_max + 1) * b * s],
            avail: vec![false; (t_max + 1) * b * n * a],
            actions: vec![0; t_max * b * n],
            rewards: vec![0.0; t_max * b],
            terminated: vec![false; t_max * b],
            filled: vec![0.0; t_max * b],
        };
        for (bi, ep) in episodes.iter().enumerate() {
            for t in 0..=ep.len() {
                for ag in 0..n {
                    let base = ((t * b + bi) * n + ag) * o;
                    batch.obs[base..base + o].copy_from_slice(&ep.obs[t][ag]);
                    let abase = ((t * b + bi) * n + ag) * a;
                    batch.avail[abase..abase + a].copy_from_slice(&ep.avail[t][ag]);
                }
                let sb = (t * b + bi) * s;
                batch.states[sb..sb + s].copy_from_slice(&ep.states[t]);
            }
            for t in 0..ep.len() {
                let ab = (t * b + bi) * n;
                batch.actions[ab..ab + n].copy_from_slice(&ep.actions[t]);
                batch.rewards[t * b + bi] = ep.rewards[t];
                batch.terminated[t * b + bi] = ep.terminated[t];
                batch.filled[t * b + bi] = 1.0;
            }
        }
        Ok(batch)
    }

    pub fn rows(&self) -> usize {
        self.batch_size * self.n_agents
    }

    /// Network input for step `t` (`0..=max_len`): `B·n × width`, row `b·n + a`.
    pub fn agent_inputs(&self, t: usize) -> Tensor {
        let layout = AgentObservationLayout {
            obs_dim: self.obs_dim,
            n_actions: self.n_actions,
            n_agents: self.n_agents,
        };
        let w = layout.width();
        let (b, n, o) = (self.batch_size, self.n_agents, self.obs_dim);
        let mut data = vec![0.0; b * n * w];
        for bi in 0..b {
            for ag in 0..n {
                let row = bi * n + ag;
                let ob = ((t * b + bi) * n + ag) * o;
                let prev = (t > 0).then(|| self.actions[((t - 1) * b + bi) * n + ag]);
                layout.fill(&self.obs[ob..ob + o], prev, ag, &mut data[row * w..(row + 1) * w]);
            }
        }
        Tensor::new(b * n, w, data).expect("sized")
    }

    /// Global states at step `t`, `B × state_dim`.
    pub fn states_at(&self, t: usize) -> Tensor {
        let s = self.state_dim;
        let b = self.batch_size;
        Tensor::new(b, s, self.states[t * b * s..(t + 1) * b * s].to_vec()).expect("sized")
    }

    pub fn actions_at(&self, t: usize) -> &[usize] {
        let r = self.rows();
        &self.actions[t * r..(t + 1) * r]
    }

    pub fn avail_at(&self, t: usize) -> &[bool] {
        let w = self.rows() * self.n_actions;
        &self.avail[t * w..(t + 1) * w]
    }

    pub fn filled_at(&self, t: usize) -> &[f64] {
        &self.filled[t * self.batch_size..(t + 1) * self.batch_size]
    }

    pub fn valid_steps(&self) -> f64 {
        self.filled.iter().sum()
    }
}

/// First-in-first-out episode store.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    episodes: VecDeque<Episode>,
    pushed: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity: capacity.max(1),
            episodes: VecDeque::new(),
            pushed: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Total number of episodes ever pushed.
    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    pub fn push(&mut self, episode: Episode) {
        if self.episodes.len() == self.capacity {
            self.episodes.pop_front();
        }
        self.episodes.push_back(episode);
        self.pushed += 1;
    }

    pub fn can_sample(&self, batch_size: usize) -> bool {
        batch_size > 0 && self.episodes.len() >= batch_size
    }

    /// Uniform sample without replacement; `None` while under-filled.
    pub fn sample<R: Rng>(&self, batch_size: usize, rng: &mut R) -> Option<Vec<&Episode>> {
        if !self.can_sample(batch_size) {
            return None;
        }
        let picks = index::sample(rng, self.episodes.len(), batch_size);
        Some(picks.into_iter().map(|i| &self.episodes[i]).collect())
    }

    pub fn iter(&self) -> impl Iterator<Item = &Episode> {
        self.episodes.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dummy(len: usize, tag: f64) -> Episode {
        Episode {
            obs: vec![vec![vec![tag]; 2]; len + 1],
            states: vec![vec![tag]; len + 1],
            avail: vec![vec![vec![true; 3]; 2]; len + 1],
            actions: vec![vec![1, 2]; len],
            rewards: vec![tag; len],
            terminated: (0..len).map(|t| t + 1 == len).collect(),
            oracle: None,
        }
    }

    fn spec() -> EnvSpec {
        EnvSpec {
            n_agents: 2,
            n_actions: 3,
            obs_dim: 1,
            state_dim: 1,
            episode_limit: 10,
            gamma: 0.9,
        }
    }

    #[test]
    fn fifo_eviction_at_capacity() {
        let mut buf = ReplayBuffer::new(5000);
        for i in 0..5001 {
            buf.push(dummy(1, i as f64));
        }
        assert_eq!(buf.len(), 5000);
        assert_eq!(buf.iter().next().unwrap().rewards[0], 1.0);
        assert_eq!(buf.iter().last().unwrap().rewards[0], 5000.0);
    }

    #[test]
    fn under_filled_buffer_is_not_ready() {
        let mut buf = ReplayBuffer::new(100);
        for i in 0..31 {
            buf.push(dummy(1, i as f64));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(buf.sample(32, &mut rng).is_none());
        buf.push(dummy(1, 31.0));
        assert_eq!(buf.sample(32, &mut rng).unwrap().len(), 32);
    }

    #[test]
    fn consecutive_samples_differ_and_have_no_repeats() {
        let mut buf = ReplayBuffer::new(1000);
        for i in 0..200 {
            buf.push(dummy(1, i as f64));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tags = |s: Vec<&Episode>| s.iter().map(|e| e.rewards[0] as u32).collect::<Vec<_>>();
        let a = tags(buf.sample(32, &mut rng).unwrap());
        let b = tags(buf.sample(32, &mut rng).unwrap());
        assert_ne!(a, b);
        let mut sorted = a.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 32);

        let mut rng2 = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(a, tags(buf.sample(32, &mut rng2).unwrap()));
    }

    #[test]
    fn batch_pads_and_masks() {
        let long = dummy(3, 1.0);
        let short = dummy(1, 2.0);
        let batch = EpisodeBatch::from_episodes(&spec(), &[&long, &short]).unwrap();
        assert_eq!(batch.max_len, 3);
        assert_eq!(batch.filled, vec![1.0, 1.0, 1.0, 0.0, 1.0, 0.0]);
        assert_eq!(batch.valid_steps(), 4.0);
        let x = batch.agent_inputs(1);
        // obs, prev-action one-hot (action 1 for agent 0), identity
        assert_eq!(x.row_slice(0), &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        assert_eq!(x.row_slice(3), &[2.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
        // padding past the short episode's end is zero
        assert_eq!(batch.agent_inputs(2).row_slice(2)[0], 0.0);
        assert!(EpisodeBatch::from_episodes(&spec(), &[]).is_err());
    }

    #[test]
    fn discounted_return_folds_backwards() {
        let mut e = dummy(3, 1.0);
        e.rewards = vec![1.0, 2.0, 4.0];
        assert!((e.discounted_return(0.5) - 3.0).abs() < 1e-12);
    }
}
