//! Training runs: the collect/update loop, periodic greedy evaluation,
//! metrics, timelines and checkpoints.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::env::make_env;
use crate::error::{Error, Result};
use crate::learner::{Learner, LossParts};
use crate::model::Model;
use crate::rollout::{run_episodes, ActMode, Rollout};

pub const METRICS_FORMAT_VERSION: u32 = 1;

/// First line of a metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsHeader {
    pub kind: String,
    pub format_version: u32,
    pub ablation: String,
    pub config_hash: String,
    pub config: String,
    pub param_count: usize,
}

/// One evaluation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub kind: String,
    pub timestep: u64,
    pub episodes: u64,
    pub updates: u64,
    pub epsilon: f64,
    /// mean loss terms over the updates since the previous record
    pub loss_td: Option<f64>,
    pub loss_phi: Option<f64>,
    pub loss_h: Option<f64>,
    pub eval_return: f64,
    pub eval_discounted_return: f64,
    pub oracle_return: Option<f64>,
    pub normalized_return: Option<f64>,
    pub switches_per_episode: f64,
    pub subtask_usage: Vec<usize>,
}

/// Greedy evaluation over a fixed set of episodes.
#[derive(Clone, Debug)]
pub struct EvalSummary {
    /// mean undiscounted return
    pub mean_return: f64,
    pub mean_discounted: f64,
    /// mean oracle (discounted) return, when every episode has one
    pub oracle: Option<f64>,
    /// total achieved over total oracle discounted return, clamped to [0, 1]
    pub normalized: Option<f64>,
    pub switches_per_episode: f64,
    pub usage: Vec<usize>,
    pub rollouts: Vec<Rollout>,
}

impl EvalSummary {
    /// Assignment timelines of every episode as one CSV.
    pub fn timeline_csv(&self, k: usize) -> String {
        let mut out = String::new();
        for (i, r) in self.rollouts.iter().enumerate() {
            out.push_str(&r.selections.to_csv(k, Some(i), i == 0));
        }
        out
    }
}

/// Environment seeds of the evaluation episodes; they depend only on the run
/// seed, so runs that share a seed are scored on the same episodes.
pub fn eval_seeds(cfg: &RunConfig, count: usize) -> Vec<u64> {
    let base = (1u64 << 40) + cfg.seed.wrapping_mul(1_000_003);
    (0..count as u64).map(|i| base.wrapping_add(i)).collect()
}

/// Plays `episodes` greedy episodes (no action noise, argmax subtasks).
/// Read-only with respect to the model.
pub fn evaluate(model: &Model, cfg: &RunConfig, episodes: usize) -> Result<EvalSummary> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let seeds = eval_seeds(cfg, episodes);
    let mut envs = (0..episodes)
        .map(|_| make_env(&cfg.env, cfg.gamma))
        .collect::<Result<Vec<_>>>()?;
    // only the random-selection ablation draws noise at evaluation time
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_e7a1);
    let rollouts = run_episodes(model, &mut envs, &seeds, ActMode::GREEDY, true, &mut rng)?;
    let n = rollouts.len() as f64;
    let mean_return = rollouts.iter().map(|r| r.episode.total_reward()).sum::<f64>() / n;
    let achieved: f64 = rollouts.iter().map(|r| r.episode.discounted_return(cfg.gamma)).sum();
    let oracle: Option<f64> = rollouts.iter().map(|r| r.episode.oracle).sum();
    let normalized = oracle.map(|o| if o > 0.0 { (achieved / o).clamp(0.0, 1.0) } else { 1.0 });
    let k = model.arch.k();
    let mut usage = vec![0; k];
    let mut switches = 0;
    for r in &rollouts {
        switches += r.selections.switch_count();
        for (u, c) in usage.iter_mut().zip(r.selections.usage(k)) {
            *u += c;
        }
    }
    Ok(EvalSummary {
        mean_return,
        mean_discounted: achieved / n,
        oracle: oracle.map(|o| o / n),
        normalized,
        switches_per_episode: switches as f64 / n,
        usage,
        rollouts,
    })
}

/// Outcome of a finished run.
pub struct TrainOutcome {
    pub learner: Learner,
    pub header: MetricsHeader,
    pub metrics: Vec<MetricsRecord>,
    pub final_eval: EvalSummary,
}

impl TrainOutcome {
    pub fn final_record(&self) -> &MetricsRecord {
        self.metrics.last().expect("a run always ends with an evaluation")
    }
}

pub fn header_for(cfg: &RunConfig, param_count: usize) -> MetricsHeader {
    MetricsHeader {
        kind: "header".into(),
        format_version: METRICS_FORMAT_VERSION,
        ablation: cfg.ablation.to_string(),
        config_hash: cfg.hash(),
        config: cfg.to_text(),
        param_count,
    }
}

#[derive(Default)]
struct LossAccumulator {
    sum: LossParts,
    count: usize,
}

impl LossAccumulator {
    fn add(&mut self, l: &LossParts) {
        self.sum.td += l.td;
        self.sum.phi += l.phi;
        self.sum.h += l.h;
        self.count += 1;
    }

    fn take(&mut self) -> Option<LossParts> {
        let c = std::mem::take(&mut self.count);
        let s = std::mem::take(&mut self.sum);
        (c > 0).then(|| LossParts {
            total: 0.0,
            td: s.td / c as f64,
            phi: s.phi / c as f64,
            h: s.h / c as f64,
        })
    }
}

/// Files a run writes under its output directory.
pub struct RunPaths {
    pub metrics: PathBuf,
    pub checkpoint: PathBuf,
    pub timeline: PathBuf,
    pub representations: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        RunPaths {
            metrics: dir.join("metrics.jsonl"),
            checkpoint: dir.join("checkpoint"),
            timeline: dir.join("timeline.csv"),
            representations: dir.join("representations.csv"),
        }
    }
}

/// Trains for `cfg.total_timesteps` environment steps, evaluating every
/// `cfg.eval_interval` steps and once more at the end. With `out_dir`, the
/// metrics stream, the latest checkpoint, the final timelines and subtask
/// representations are written there; a failing update leaves the
/// checkpoint of the last evaluation in place.
pub fn train(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let mut learner = Learner::new(cfg)?;
    let header = header_for(cfg, learner.model.param_count());
    let paths = out_dir.map(RunPaths::new);
    let mut sink = match (&paths, out_dir) {
        (Some(p), Some(dir)) => {
            fs::create_dir_all(dir)?;
            let mut w = BufWriter::new(File::create(&p.metrics)?);
            writeln!(w, "{}", serde_json::to_string(&header)?)?;
            w.flush()?;
            Some(w)
        }
        _ => None,
    };

    let mut metrics = Vec::new();
    let mut losses = LossAccumulator::default();
    let mut next_eval = cfg.eval_interval;
    let mut last = None;
    while learner.timesteps < cfg.total_timesteps {
        let report = learner.train_episode()?;
        if let Some(l) = &report.loss {
            losses.add(l);
        }
        let finished = learner.timesteps >= cfg.total_timesteps;
        if learner.timesteps >= next_eval || finished {
            while next_eval <= learner.timesteps {
                next_eval += cfg.eval_interval;
            }
            let summary = evaluate(&learner.model, cfg, cfg.eval_episodes)?;
            let record = record_for(&learner, &summary, losses.take());
            if let Some(w) = sink.as_mut() {
                writeln!(w, "{}", serde_json::to_string(&record)?)?;
                w.flush()?;
            }
            if let Some(p) = &paths {
                checkpoint::save(&p.checkpoint, cfg, &learner.model)?;
            }
            metrics.push(record);
            last = Some(summary);
        }
    }
    let final_eval = last.ok_or_else(|| Error::Config("total_timesteps must be positive".into()))?;
    if let Some(p) = &paths {
        fs::write(&p.timeline, final_eval.timeline_csv(learner.model.arch.k()))?;
        if let Some(enc) = &learner.model.arch.encoder {
            let reps = enc.representations(&learner.model.params)?;
            fs::write(&p.representations, crate::repr::representations_csv(&reps))?;
        }
    }
    Ok(TrainOutcome {
        learner,
        header,
        metrics,
        final_eval,
    })
}

fn record_for(learner: &Learner, s: &EvalSummary, loss: Option<LossParts>) -> MetricsRecord {
    MetricsRecord {
        kind: "eval".into(),
        timestep: learner.timesteps,
        episodes: learner.episodes,
        updates: learner.updates,
        epsilon: learner.epsilon(),
        loss_td: loss.map(|l| l.td),
        loss_phi: loss.map(|l| l.phi),
        loss_h: loss.map(|l| l.h),
        eval_return: s.mean_return,
        eval_discounted_return: s.mean_discounted,
        oracle_return: s.oracle,
        normalized_return: s.normalized,
        switches_per_episode: s.switches_per_episode,
        subtask_usage: s.usage.clone(),
    }
}

/// Parses a metrics stream, checking that it starts with a header and that
/// every other line is an evaluation record.
pub fn read_metrics(text: &str) -> Result<(MetricsHeader, Vec<MetricsRecord>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let first = lines.next().ok_or_else(|| Error::Evaluation("empty metrics stream".into()))?;
    let header: MetricsHeader = serde_json::from_str(first)?;
    if header.kind != "header" {
        return Err(Error::Evaluation("metrics stream does not start with a header".into()));
    }
    let mut records = Vec::new();
    for line in lines {
        let r: MetricsRecord = serde_json::from_str(line)?;
        if r.kind != "eval" {
            return Err(Error::Evaluation(format!("unexpected record kind `{}`", r.kind)));
        }
        records.push(r);
    }
    Ok((header, records))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.env.name = "two_roles".into();
        cfg.env.params.insert("episode_limit".into(), "4".into());
        cfg.k = 2;
        cfg.hidden = 4;
        cfg.m = 3;
        cfg.repr_hidden = 4;
        cfg.mixer_embed = 3;
        cfg.batch_size = 2;
        cfg
    }

    #[test]
    fn eval_seeds_depend_only_on_run_seed() {
        let mut a = tiny();
        let mut b = tiny();
        b.lambda_h = 0.5;
        assert_eq!(eval_seeds(&a, 4), eval_seeds(&b, 4));
        a.seed = 1;
        assert_ne!(eval_seeds(&a, 4), eval_seeds(&b, 4));
        assert_eq!(eval_seeds(&a, 3).len(), 3);
    }

    #[test]
    fn loss_accumulator_averages_and_resets() {
        let mut acc = LossAccumulator::default();
        assert!(acc.take().is_none());
        acc.add(&LossParts { total: 9.0, td: 1.0, phi: -2.0, h: 0.5 });
        acc.add(&LossParts { total: 9.0, td: 3.0, phi: -4.0, h: 1.5 });
        let m = acc.take().unwrap();
        assert_eq!((m.td, m.phi, m.h), (2.0, -3.0, 1.0));
        assert!(acc.take().is_none());
    }

    #[test]
    fn evaluation_needs_episodes() {
        let cfg = tiny();
        let env = make_env(&cfg.env, cfg.gamma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Model::new(&cfg, env.spec(), &mut rng).unwrap();
        assert!(evaluate(&model, &cfg, 0).is_err());
        let s = evaluate(&model, &cfg, 3).unwrap();
        assert_eq!(s.rollouts.len(), 3);
        assert_eq!(s.usage.iter().sum::<usize>(), 3 * 4 * 2);
        assert!(s.normalized.is_some_and(|v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn evaluation_points_follow_the_interval() {
        let mut cfg = tiny();
        cfg.total_timesteps = 30;
        cfg.eval_interval = 10;
        cfg.eval_episodes = 2;
        let out = train(&cfg, None).unwrap();
        let steps: Vec<u64> = out.metrics.iter().map(|r| r.timestep).collect();
        // 4-step episodes cross 10, 20 and end at 32
        assert_eq!(steps, vec![12, 20, 32]);
        assert!(out.metrics[0].loss_td.is_some());
    }
}
