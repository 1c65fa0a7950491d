//! Run configuration: a flat `key = value` text format with `--set` style
//! overrides.

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::env::EnvConfig;
use crate::error::{Error, Result};

/// Which variant of the learner to run.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Ablation {
    /// full method
    #[default]
    None,
    /// drop the temporal smoothing term
    NoSmoothing,
    /// drop the representation-distance term
    NoReprDistance,
    /// drop both regularizers
    NoRegularizers,
    /// learn head parameters directly instead of decoding them
    NoDecoder,
    /// pick subtasks uniformly at random
    RandomSelection,
    /// predict selection logits with an affine map of the ability vector
    DirectProb,
    /// weight heads by the selection probabilities instead of sampling
    Mixture,
    /// one shared head for every agent (k = 1, no selection machinery)
    SharedBaseline,
    /// shared baseline widened to the parameter count of the full method
    SharedLarge,
}

impl Ablation {
    pub const ALL: [Ablation; 10] = [
        Ablation::None,
        Ablation::NoSmoothing,
        Ablation::NoReprDistance,
        Ablation::NoRegularizers,
        Ablation::NoDecoder,
        Ablation::RandomSelection,
        Ablation::DirectProb,
        Ablation::Mixture,
        Ablation::SharedBaseline,
        Ablation::SharedLarge,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::NoSmoothing => "NP",
            Ablation::NoReprDistance => "NR",
            Ablation::NoRegularizers => "NP+NR",
            Ablation::NoDecoder => "NoDecoder",
            Ablation::RandomSelection => "RanSele",
            Ablation::DirectProb => "DireProb",
            Ablation::Mixture => "Mix",
            Ablation::SharedBaseline => "SharedBaseline",
            Ablation::SharedLarge => "QmixLarge",
        }
    }

    pub fn is_shared(self) -> bool {
        matches!(self, Ablation::SharedBaseline | Ablation::SharedLarge)
    }

    pub fn uses_smoothing(self) -> bool {
        !matches!(
            self,
            Ablation::NoSmoothing | Ablation::NoRegularizers | Ablation::RandomSelection
        ) && !self.is_shared()
    }

    pub fn uses_repr_distance(self) -> bool {
        !matches!(self, Ablation::NoReprDistance | Ablation::NoRegularizers) && !self.is_shared()
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase();
        Ablation::ALL
            .into_iter()
            .find(|a| a.name().to_ascii_lowercase() == key)
            .ok_or_else(|| {
                let names: Vec<_> = Ablation::ALL.iter().map(|a| a.name()).collect();
                Error::Config(format!("unknown ablation `{s}` (expected one of {})", names.join(", ")))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub gamma: f64,
    pub k: usize,
    pub m: usize,
    /// width of both trajectory encoders
    pub hidden: usize,
    /// hidden width of the subtask encoder
    pub repr_hidden: usize,
    pub mixer_embed: usize,
    pub lambda_phi: f64,
    pub lambda_h: f64,
    pub total_timesteps: u64,
    pub eval_interval: u64,
    pub eval_episodes: usize,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub lr: f64,
    pub rms_alpha: f64,
    pub rms_eps: f64,
    pub grad_clip: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_anneal: u64,
    /// in collected episodes
    pub target_update_interval: u64,
    pub temperature: f64,
    pub seed: u64,
    pub ablation: Ablation,
    pub double_q: bool,
    pub kl_stop_gradient_next: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: EnvConfig {
                name: "heterogeneous_jobs".into(),
                params: Default::default(),
            },
            gamma: 0.99,
            k: 4,
            m: 64,
            hidden: 64,
            repr_hidden: 64,
            mixer_embed: 32,
            lambda_phi: 1e-3,
            lambda_h: 1e-3,
            total_timesteps: 2_000_000,
            eval_interval: 10_000,
            eval_episodes: 32,
            batch_size: 32,
            buffer_capacity: 5000,
            lr: 5e-4,
            rms_alpha: 0.99,
            rms_eps: 1e-5,
            grad_clip: 10.0,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_anneal: 50_000,
            target_update_interval: 200,
            temperature: 1.0,
            seed: 0,
            ablation: Ablation::None,
            double_q: false,
            kl_stop_gradient_next: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse `{value}`")))
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::parse_text(&std::fs::read_to_string(path)?)
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if let Some(param) = key.strip_prefix("env.") {
            self.env.params.insert(param.to_string(), value.to_string());
            return Ok(());
        }
        match key {
            "env" => self.env.name = value.to_string(),
            "gamma" => self.gamma = parse(key, value)?,
            "k" => self.k = parse(key, value)?,
            "m" => self.m = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "repr_hidden" => self.repr_hidden = parse(key, value)?,
            "mixer_embed" => self.mixer_embed = parse(key, value)?,
            "lambda_phi" => self.lambda_phi = parse(key, value)?,
            "lambda_h" => self.lambda_h = parse(key, value)?,
            "total_timesteps" => self.total_timesteps = parse(key, value)?,
            "eval_interval" => self.eval_interval = parse(key, value)?,
            "eval_episodes" => self.eval_episodes = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "buffer_capacity" => self.buffer_capacity = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "rms_alpha" => self.rms_alpha = parse(key, value)?,
            "rms_eps" => self.rms_eps = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            "epsilon_start" => self.epsilon_start = parse(key, value)?,
            "epsilon_end" => self.epsilon_end = parse(key, value)?,
            "epsilon_anneal" => self.epsilon_anneal = parse(key, value)?,
            "target_update_interval" => self.target_update_interval = parse(key, value)?,
            "temperature" => self.temperature = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "ablation" => self.ablation = value.parse()?,
            "double_q" => self.double_q = parse(key, value)?,
            "kl_stop_gradient_next" => self.kl_stop_gradient_next = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: String| out.push_str(&format!("{k} = {v}\n"));
        line("env", self.env.name.clone());
        for (k, v) in &self.env.params {
            line(&format!("env.{k}"), v.clone());
        }
        line("gamma", self.gamma.to_string());
        line("k", self.k.to_string());
        line("m", self.m.to_string());
        line("hidden", self.hidden.to_string());
        line("repr_hidden", self.repr_hidden.to_string());
        line("mixer_embed", self.mixer_embed.to_string());
        line("lambda_phi", self.lambda_phi.to_string());
        line("lambda_h", self.lambda_h.to_string());
        line("total_timesteps", self.total_timesteps.to_string());
        line("eval_interval", self.eval_interval.to_string());
        line("eval_episodes", self.eval_episodes.to_string());
        line("batch_size", self.batch_size.to_string());
        line("buffer_capacity", self.buffer_capacity.to_string());
        line("lr", self.lr.to_string());
        line("rms_alpha", self.rms_alpha.to_string());
        line("rms_eps", self.rms_eps.to_string());
        line("grad_clip", self.grad_clip.to_string());
        line("epsilon_start", self.epsilon_start.to_string());
        line("epsilon_end", self.epsilon_end.to_string());
        line("epsilon_anneal", self.epsilon_anneal.to_string());
        line("target_update_interval", self.target_update_interval.to_string());
        line("temperature", self.temperature.to_string());
        line("seed", self.seed.to_string());
        line("ablation", self.ablation.to_string());
        line("double_q", self.double_q.to_string());
        line("kl_stop_gradient_next", self.kl_stop_gradient_next.to_string());
        out
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_text().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Number of subtasks the model is built with.
    pub fn effective_k(&self) -> usize {
        if self.ablation.is_shared() {
            1
        } else {
            self.k
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k", self.k as u64),
            ("m", self.m as u64),
            ("hidden", self.hidden as u64),
            ("repr_hidden", self.repr_hidden as u64),
            ("mixer_embed", self.mixer_embed as u64),
            ("total_timesteps", self.total_timesteps),
            ("eval_interval", self.eval_interval),
            ("eval_episodes", self.eval_episodes as u64),
            ("batch_size", self.batch_size as u64),
            ("buffer_capacity", self.buffer_capacity as u64),
            ("target_update_interval", self.target_update_interval),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.batch_size > self.buffer_capacity {
            return Err(Error::Config("batch_size exceeds buffer_capacity".into()));
        }
        for (name, v) in [("lambda_phi", self.lambda_phi), ("lambda_h", self.lambda_h)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.rms_alpha) || !(self.rms_eps > 0.0) {
            return Err(Error::Config("optimizer settings out of range".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        let eps_ok = |e: f64| (0.0..=1.0).contains(&e);
        if !eps_ok(self.epsilon_start) || !eps_ok(self.epsilon_end) || self.epsilon_end > self.epsilon_start {
            return Err(Error::Config("epsilon schedule must satisfy 0 ≤ end ≤ start ≤ 1".into()));
        }
        Ok(())
    }
}
