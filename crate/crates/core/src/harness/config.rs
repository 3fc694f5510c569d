//! Training configuration and its flat `section.key` representation.
//!
//! Config files are JSON objects with dotted keys, e.g.
//! `{"gp.capacity": 2000, "beta": "fixed:2"}`. Unknown keys are rejected.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::agent::{NetConfig, SafeActorConfig};
use crate::confidence::BetaConfig;
use crate::env::PendulumParams;
use crate::error::{Error, Result};
use crate::gp::sparsify::DEFAULT_QR_THRESHOLD;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GpMode {
    /// Dataset and hyperparameters are updated after every episode.
    Online,
    /// Dataset and hyperparameters are frozen after initialization.
    Fixed,
}

impl FromStr for GpMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "online" => Ok(GpMode::Online),
            "fixed" => Ok(GpMode::Fixed),
            _ => Err(Error::Config(format!("gp mode must be online or fixed, got {s:?}"))),
        }
    }
}

impl fmt::Display for GpMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GpMode::Online => "online",
            GpMode::Fixed => "fixed",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub env: String,
    pub pendulum: PendulumParams,
    pub seed: u64,
    pub total_steps: usize,
    pub episode_length: usize,
    pub updates_per_step: usize,
    /// Actor updates run as a burst at the end of each episode.
    pub actor_updates_per_episode: usize,
    pub replay_capacity: usize,
    /// Exploration noise decays linearly to zero over this fraction of training.
    pub noise_decay_fraction: f64,
    pub eval_interval: usize,
    pub eval_episodes: usize,
    /// Plain DDPG: no guard, GP or safety terms.
    pub vanilla: bool,
    pub agent: SafeActorConfig,
    pub nets: NetConfig,
    pub gp_capacity: usize,
    pub gp_mode: GpMode,
    /// Observation-noise bound σ, also the measurement-validity radius.
    pub sigma: f64,
    pub signal_variance: f64,
    pub lengthscales: Vec<f64>,
    pub gp_fit_steps: usize,
    pub qr_threshold: f64,
    pub beta: BetaConfig,
    pub init_trajectory: Option<String>,
    pub cost_threshold: f64,
    /// Critic, guard and actor updates run on the initial data before training.
    pub pretrain_updates: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            env: "pendulum".into(),
            pendulum: PendulumParams::default(),
            seed: 0,
            total_steps: 60_000,
            episode_length: crate::env::EPISODE_LENGTH,
            updates_per_step: 1,
            actor_updates_per_episode: crate::env::EPISODE_LENGTH,
            replay_capacity: 100_000,
            noise_decay_fraction: 0.5,
            eval_interval: 1000,
            eval_episodes: 5,
            vanilla: false,
            agent: SafeActorConfig::default(),
            nets: NetConfig::default(),
            gp_capacity: 2000,
            gp_mode: GpMode::Online,
            sigma: 0.1,
            signal_variance: 1.0,
            lengthscales: vec![1.0],
            gp_fit_steps: 10,
            qr_threshold: DEFAULT_QR_THRESHOLD,
            beta: BetaConfig::default(),
            init_trajectory: None,
            cost_threshold: 5.0,
            pretrain_updates: 0,
        }
    }
}

fn as_f64(key: &str, v: &Value) -> Result<f64> {
    v.as_f64()
        .ok_or_else(|| Error::Config(format!("{key}: expected a number")))
}

fn as_usize(key: &str, v: &Value) -> Result<usize> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| Error::Config(format!("{key}: expected a non-negative integer")))
}

fn as_bool(key: &str, v: &Value) -> Result<bool> {
    v.as_bool()
        .ok_or_else(|| Error::Config(format!("{key}: expected true or false")))
}

fn as_str<'a>(key: &str, v: &'a Value) -> Result<&'a str> {
    v.as_str()
        .ok_or_else(|| Error::Config(format!("{key}: expected a string")))
}

fn as_list<T, F: Fn(&Value) -> Option<T>>(key: &str, v: &Value, f: F) -> Result<Vec<T>> {
    match v {
        Value::Array(items) => items
            .iter()
            .map(|x| f(x).ok_or_else(|| Error::Config(format!("{key}: bad list element"))))
            .collect(),
        other => f(other)
            .map(|x| vec![x])
            .ok_or_else(|| Error::Config(format!("{key}: expected a list"))),
    }
}

impl TrainConfig {
    /// The effective configuration as a flat map of dotted keys.
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let entries = [
            ("env", json!(self.env)),
            ("env.reset_theta", json!(self.pendulum.reset_theta)),
            ("env.reset_theta_dot", json!(self.pendulum.reset_theta_dot)),
            ("seed", json!(self.seed)),
            ("train.total_steps", json!(self.total_steps)),
            ("train.episode_length", json!(self.episode_length)),
            ("train.updates_per_step", json!(self.updates_per_step)),
            ("train.actor_updates_per_episode", json!(self.actor_updates_per_episode)),
            ("train.replay_capacity", json!(self.replay_capacity)),
            ("train.noise_decay_fraction", json!(self.noise_decay_fraction)),
            ("train.eval_interval", json!(self.eval_interval)),
            ("train.eval_episodes", json!(self.eval_episodes)),
            ("train.vanilla", json!(self.vanilla)),
            ("agent.penalty_weight", json!(self.agent.penalty_weight)),
            ("agent.discount", json!(self.agent.discount)),
            ("agent.batch_size", json!(self.agent.batch_size)),
            ("agent.action_noise_std", json!(self.agent.action_noise_std)),
            ("net.actor_hidden", json!(self.nets.actor_hidden)),
            ("net.critic_hidden", json!(self.nets.critic_hidden)),
            ("net.actor_lr", json!(self.nets.actor_lr)),
            ("net.critic_lr", json!(self.nets.critic_lr)),
            ("net.guard_lr", json!(self.nets.guard_lr)),
            ("net.tau", json!(self.nets.tau)),
            ("net.actor_final_init", json!(self.nets.actor_final_init)),
            ("gp.capacity", json!(self.gp_capacity)),
            ("gp.mode", json!(self.gp_mode.to_string())),
            ("gp.sigma", json!(self.sigma)),
            ("gp.signal_variance", json!(self.signal_variance)),
            ("gp.lengthscales", json!(self.lengthscales)),
            ("gp.fit_steps", json!(self.gp_fit_steps)),
            ("gp.qr_threshold", json!(self.qr_threshold)),
            ("beta", json!(self.beta.to_string())),
            ("beta.rkhs_floor", json!(self.beta.rkhs_floor)),
            ("init.trajectory", json!(self.init_trajectory)),
            ("init.cost_threshold", json!(self.cost_threshold)),
            ("init.pretrain_updates", json!(self.pretrain_updates)),
        ];
        entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn keys() -> Vec<String> {
        Self::default().to_flat().into_keys().collect()
    }

    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        match key {
            "env" => self.env = as_str(key, v)?.to_string(),
            "env.reset_theta" => self.pendulum.reset_theta = as_f64(key, v)?,
            "env.reset_theta_dot" => self.pendulum.reset_theta_dot = as_f64(key, v)?,
            "seed" => self.seed = as_usize(key, v)? as u64,
            "train.total_steps" => self.total_steps = as_usize(key, v)?,
            "train.episode_length" => self.episode_length = as_usize(key, v)?,
            "train.updates_per_step" => self.updates_per_step = as_usize(key, v)?,
            "train.actor_updates_per_episode" => self.actor_updates_per_episode = as_usize(key, v)?,
            "train.replay_capacity" => self.replay_capacity = as_usize(key, v)?,
            "train.noise_decay_fraction" => self.noise_decay_fraction = as_f64(key, v)?,
            "train.eval_interval" => self.eval_interval = as_usize(key, v)?,
            "train.eval_episodes" => self.eval_episodes = as_usize(key, v)?,
            "train.vanilla" => self.vanilla = as_bool(key, v)?,
            "agent.penalty_weight" => self.agent.penalty_weight = as_f64(key, v)?,
            "agent.discount" => self.agent.discount = as_f64(key, v)?,
            "agent.batch_size" => self.agent.batch_size = as_usize(key, v)?,
            "agent.action_noise_std" => self.agent.action_noise_std = as_f64(key, v)?,
            "net.actor_hidden" => self.nets.actor_hidden = as_list(key, v, |x| x.as_u64().map(|n| n as usize))?,
            "net.critic_hidden" => self.nets.critic_hidden = as_list(key, v, |x| x.as_u64().map(|n| n as usize))?,
            "net.actor_lr" => self.nets.actor_lr = as_f64(key, v)?,
            "net.critic_lr" => self.nets.critic_lr = as_f64(key, v)?,
            "net.guard_lr" => self.nets.guard_lr = as_f64(key, v)?,
            "net.tau" => self.nets.tau = as_f64(key, v)?,
            "net.actor_final_init" => self.nets.actor_final_init = as_f64(key, v)?,
            "gp.capacity" => self.gp_capacity = as_usize(key, v)?,
            "gp.mode" => self.gp_mode = as_str(key, v)?.parse()?,
            "gp.sigma" => self.sigma = as_f64(key, v)?,
            "gp.signal_variance" => self.signal_variance = as_f64(key, v)?,
            "gp.lengthscales" => self.lengthscales = as_list(key, v, Value::as_f64)?,
            "gp.fit_steps" => self.gp_fit_steps = as_usize(key, v)?,
            "gp.qr_threshold" => self.qr_threshold = as_f64(key, v)?,
            "beta" => {
                let floor = self.beta.rkhs_floor;
                self.beta = as_str(key, v)?.parse()?;
                self.beta.rkhs_floor = floor;
            }
            "beta.rkhs_floor" => self.beta.rkhs_floor = as_f64(key, v)?,
            "init.trajectory" => {
                self.init_trajectory = match v {
                    Value::Null => None,
                    other => Some(as_str(key, other)?.to_string()),
                }
            }
            "init.cost_threshold" => self.cost_threshold = as_f64(key, v)?,
            "init.pretrain_updates" => self.pretrain_updates = as_usize(key, v)?,
            _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Sets a key from its command-line text form. The text is interpreted
    /// according to the key's current value type.
    pub fn set_str(&mut self, key: &str, text: &str) -> Result<()> {
        let current = self
            .to_flat()
            .remove(key)
            .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
        let bad = || Error::Config(format!("{key}: cannot parse {text:?}"));
        let value = match current {
            Value::Bool(_) => Value::Bool(text.parse().map_err(|_| bad())?),
            Value::Number(n) if n.is_u64() && !text.contains('.') && !text.contains('e') => {
                json!(text.parse::<u64>().map_err(|_| bad())?)
            }
            Value::Number(_) => json!(text.parse::<f64>().map_err(|_| bad())?),
            Value::Array(_) => {
                let items: Vec<Value> = text
                    .split(',')
                    .map(|t| serde_json::from_str(t.trim()).map_err(|_| bad()))
                    .collect::<Result<_>>()?;
                Value::Array(items)
            }
            Value::Null | Value::String(_) => {
                if text.is_empty() || text == "null" {
                    Value::Null
                } else {
                    Value::String(text.to_string())
                }
            }
            Value::Object(_) => return Err(bad()),
        };
        if key != "init.trajectory" && value.is_null() {
            return Err(bad());
        }
        self.set(key, &value)
    }

    pub fn apply_flat(&mut self, map: &serde_json::Map<String, Value>) -> Result<()> {
        // "beta" resets the floor, so apply it before "beta.rkhs_floor"
        let mut keys: Vec<&String> = map.keys().collect();
        keys.sort();
        for k in keys {
            self.set(k, &map[k])?;
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text)?;
        let Value::Object(map) = v else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let mut cfg = Self::default();
        cfg.apply_flat(&map)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Value {
        Value::Object(self.to_flat().into_iter().collect())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.env != "pendulum" {
            return bad("only the pendulum environment is built in");
        }
        if self.episode_length == 0 || self.eval_interval == 0 || self.eval_episodes == 0 {
            return bad("episode length and eval settings must be positive");
        }
        if self.replay_capacity == 0 || self.gp_capacity == 0 {
            return bad("capacities must be positive");
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return bad("gp.sigma must be positive");
        }
        let positive = |x: f64| x > 0.0;
        if !positive(self.signal_variance)
            || self.lengthscales.is_empty()
            || self.lengthscales.iter().any(|&l| !positive(l))
        {
            return bad("gp kernel parameters must be positive");
        }
        if !(self.qr_threshold > 0.0 && self.qr_threshold < 1.0) {
            return bad("gp.qr_threshold must lie in (0, 1)");
        }
        if !(0.0..=1.0).contains(&self.noise_decay_fraction) {
            return bad("train.noise_decay_fraction must lie in [0, 1]");
        }
        if !(self.pendulum.reset_theta >= 0.0 && self.pendulum.reset_theta_dot >= 0.0) {
            return bad("reset ranges must be non-negative");
        }
        if self.nets.actor_hidden.is_empty() || self.nets.critic_hidden.is_empty() {
            return bad("networks need at least one hidden layer");
        }
        self.agent.validate()?;
        self.beta.validate()
    }
}
