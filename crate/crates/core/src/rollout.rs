//! Acting in environments: ε-greedy rollouts over a set of environments run
//! side by side, recording episodes and subtask selections.

use rand::Rng;

use crate::autodiff::{argmax, Tape, Tensor};
use crate::config::Ablation;
use crate::env::{AgentObservationLayout, Environment, StepResult};
use crate::error::{Error, Result};
use crate::model::{Model, Selector};
use crate::replay::Episode;
use crate::selection::{sample_gumbel, SelectionRecord};

/// How an episode's decisions are made.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActMode {
    /// per-agent probability of a uniformly random available action
    pub epsilon: f64,
    /// sample subtasks with Gumbel noise instead of taking the argmax
    pub sample_subtasks: bool,
}

impl ActMode {
    pub const GREEDY: ActMode = ActMode {
        epsilon: 0.0,
        sample_subtasks: false,
    };
}

/// One finished episode and the subtasks chosen along the way.
#[derive(Clone, Debug)]
pub struct Rollout {
    pub episode: Episode,
    pub selections: SelectionRecord,
    pub seed: u64,
}

/// ε-greedy choice over available actions; ties go to the lowest index.
pub fn choose_action<R: Rng>(q: &[f64], avail: &[bool], epsilon: f64, rng: &mut R) -> Result<usize> {
    let options: Vec<usize> = (0..avail.len()).filter(|&a| avail[a]).collect();
    if options.is_empty() {
        return Err(Error::Contract("no available action".into()));
    }
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return Ok(options[rng.random_range(0..options.len())]);
    }
    let masked: Vec<f64> = q
        .iter()
        .zip(avail)
        .map(|(&v, &ok)| if ok { v } else { f64::NEG_INFINITY })
        .collect();
    Ok(argmax(&masked))
}

/// Runs one episode in each environment, `envs[i]` reset with `seeds[i]`.
/// All environments advance in lockstep through one batched forward pass per
/// step; finished ones idle until the longest episode ends.
pub fn run_episodes<R: Rng>(
    model: &Model,
    envs: &mut [Box<dyn Environment>],
    seeds: &[u64],
    mode: ActMode,
    with_oracle: bool,
    rng: &mut R,
) -> Result<Vec<Rollout>> {
    if envs.is_empty() || envs.len() != seeds.len() {
        return Err(Error::Contract(format!("{} environments for {} seeds", envs.len(), seeds.len())));
    }
    let spec = envs[0].spec().clone();
    let layout = AgentObservationLayout::from_spec(&spec);
    let (n, w) = (spec.n_agents, layout.width());
    let e_count = envs.len();
    let rows = e_count * n;
    let arch = &model.arch;
    let k = arch.k();
    let random_subtasks = arch.mode == Ablation::RandomSelection;

    let mut current: Vec<StepResult> = envs.iter_mut().zip(seeds).map(|(env, &s)| env.reset(s)).collect();
    let mut episodes: Vec<Episode> = current
        .iter()
        .map(|r| Episode {
            obs: vec![r.observations.clone()],
            states: vec![r.state.clone()],
            avail: vec![r.avail_actions.clone()],
            actions: Vec::new(),
            rewards: Vec::new(),
            terminated: Vec::new(),
            oracle: None,
        })
        .collect();
    let mut records = vec![SelectionRecord::default(); e_count];
    let mut done = vec![false; e_count];
    let mut state = arch.initial_state(rows);
    let mut t = 0;

    while done.iter().any(|d| !d) {
        if t >= spec.episode_limit {
            return Err(Error::Contract(format!("episode exceeded limit {}", spec.episode_limit)));
        }
        let mut input = vec![0.0; rows * w];
        for (e, r) in current.iter().enumerate() {
            if done[e] {
                continue;
            }
            for ag in 0..n {
                let prev = episodes[e].actions.last().map(|acts| acts[ag]);
                let row = e * n + ag;
                layout.fill(&r.observations[ag], prev, ag, &mut input[row * w..(row + 1) * w]);
            }
        }
        let input = Tensor::new(rows, w, input)?;
        let noise = (arch.needs_noise() && (mode.sample_subtasks || random_subtasks)).then(|| sample_gumbel(rng, rows, k));
        let selector = match &noise {
            Some(n) => Selector::Gumbel(n),
            None => Selector::Greedy,
        };

        let (q, probs, selected, next_state) = {
            let mut tape = Tape::new();
            let p = model.params.bind_const(&mut tape);
            let out = arch.forward(&mut tape, &p, std::slice::from_ref(&input), &state, selector)?;
            let probs = out.probs.map(|v| tape.value(v).clone());
            (tape.value(out.q).clone(), probs, out.selected, out.state)
        };
        state = next_state;

        for e in 0..e_count {
            if done[e] {
                continue;
            }
            let avail = &current[e].avail_actions;
            let mut actions = Vec::with_capacity(n);
            for ag in 0..n {
                let row = e * n + ag;
                actions.push(choose_action(q.row_slice(row), &avail[ag], mode.epsilon, rng)?);
            }
            let probs_e = match &probs {
                Some(pv) => Some(Tensor::new(n, k, pv.data()[e * n * k..(e + 1) * n * k].to_vec())?),
                None => None,
            };
            records[e].push_step(t, &selected[e * n..(e + 1) * n], probs_e.as_ref());

            let next = envs[e].step(&actions)?;
            let ep = &mut episodes[e];
            ep.actions.push(actions);
            ep.rewards.push(next.reward);
            ep.terminated.push(next.terminated);
            ep.obs.push(next.observations.clone());
            ep.states.push(next.state.clone());
            ep.avail.push(next.avail_actions.clone());
            done[e] = next.terminated;
            current[e] = next;
        }
        t += 1;
    }

    let mut out = Vec::with_capacity(e_count);
    for (e, (mut episode, selections)) in episodes.into_iter().zip(records).enumerate() {
        if with_oracle {
            episode.oracle = match envs[e].oracle_return(seeds[e]) {
                Ok(o) => Some(o.discounted),
                Err(Error::Budget { .. }) => None,
                Err(err) => return Err(err),
            };
        }
        out.push(Rollout {
            episode,
            selections,
            seed: seeds[e],
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::env::make_env;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(ablation: Ablation) -> (Model, RunConfig) {
        let mut cfg = RunConfig::default();
        cfg.hidden = 8;
        cfg.m = 4;
        cfg.repr_hidden = 8;
        cfg.mixer_embed = 4;
        cfg.k = 2;
        cfg.ablation = ablation;
        cfg.env.params.insert("episode_limit".into(), "5".into());
        let env = make_env(&cfg.env, cfg.gamma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        (Model::new(&cfg, env.spec(), &mut rng).unwrap(), cfg)
    }

    fn envs(cfg: &RunConfig, count: usize) -> Vec<Box<dyn Environment>> {
        (0..count).map(|_| make_env(&cfg.env, cfg.gamma).unwrap()).collect()
    }

    #[test]
    fn greedy_rollouts_are_deterministic() {
        let (model, cfg) = setup(Ablation::None);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = run_episodes(&model, &mut envs(&cfg, 3), &[1, 2, 3], ActMode::GREEDY, true, &mut rng).unwrap();
        let b = run_episodes(&model, &mut envs(&cfg, 3), &[1, 2, 3], ActMode::GREEDY, true, &mut rng).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.episode, y.episode);
            assert_eq!(x.selections, y.selections);
            assert_eq!(x.episode.len(), 5);
            assert!(x.episode.oracle.is_some());
        }
    }

    #[test]
    fn batched_rollout_matches_single() {
        let (model, cfg) = setup(Ablation::None);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let many = run_episodes(&model, &mut envs(&cfg, 3), &[4, 5, 6], ActMode::GREEDY, false, &mut rng).unwrap();
        let one = run_episodes(&model, &mut envs(&cfg, 1), &[5], ActMode::GREEDY, false, &mut rng).unwrap();
        assert_eq!(many[1].episode, one[0].episode);
    }

    #[test]
    fn full_exploration_still_respects_availability() {
        let (model, cfg) = setup(Ablation::RandomSelection);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mode = ActMode {
            epsilon: 1.0,
            sample_subtasks: true,
        };
        let r = run_episodes(&model, &mut envs(&cfg, 2), &[7, 8], mode, false, &mut rng).unwrap();
        for roll in r {
            for (t, acts) in roll.episode.actions.iter().enumerate() {
                for (ag, &a) in acts.iter().enumerate() {
                    assert!(roll.episode.avail[t][ag][a]);
                }
            }
            assert!(roll.selections.entries.iter().all(|e| e.probs.is_empty()));
        }
    }

    #[test]
    fn greedy_choice_skips_unavailable() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(choose_action(&[5.0, 1.0, 3.0], &[false, true, true], 0.0, &mut rng).unwrap(), 2);
        assert!(choose_action(&[1.0], &[false], 0.0, &mut rng).is_err());
    }
}
