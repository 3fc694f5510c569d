//! Training loop, evaluation and run outputs.

mod config;
pub mod trajectory;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::agent::{
    filter_measurement, measurement, select_action, storage_filter, update_actor, update_critic, update_guard,
    AgentNets, ReplayBuffer, SafetyContext, Transition,
};
use crate::checkpoint::Checkpoint;
use crate::confidence;
use crate::env::{Environment, Pendulum};
use crate::error::{Error, Result};
use crate::gp::sparsify::{evict_to_capacity, remove_correlated};
use crate::gp::{fit_hyperparams, GpDataset, GpPosterior, KernelHyperparams};

pub use config::{GpMode, TrainConfig};
pub use trajectory::{load_init_trajectory, read_trajectory, rollout, split_init_data, write_trajectory, InitData};

/// Independent random streams, so e.g. disabling the guard does not shift
/// the exploration noise.
#[derive(Clone, Copy, Debug)]
#[repr(u64)]
pub enum Stream {
    Init = 0,
    Env = 1,
    Noise = 2,
    Critic = 3,
    Guard = 4,
    Actor = 5,
    Eval = 6,
}

pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecordKind {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub kind: RecordKind,
    pub step: usize,
    pub episode: usize,
    /// Training episode return, or the mean evaluation return.
    pub episode_return: f64,
    /// Catastrophes in this training episode, or across the evaluation episodes.
    pub episode_catastrophes: usize,
    pub cumulative_catastrophes: usize,
    pub catastrophe_episodes: usize,
    pub gp_size: usize,
    pub beta_value: Option<f64>,
    pub guard_loss: Option<f64>,
    pub critic_loss: Option<f64>,
    pub actor_objective: Option<f64>,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "kind,step,episode,episode_return,episode_catastrophes,cumulative_catastrophes,\
catastrophe_episodes,gp_size,beta_value,guard_loss,critic_loss,actor_objective";

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl MetricsRecord {
    /// CSV row without `wall_seconds`, so that identical runs give identical files.
    pub fn csv_row(&self) -> String {
        let kind = match self.kind {
            RecordKind::Train => "train",
            RecordKind::Eval => "eval",
        };
        format!(
            "{kind},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.episode,
            self.episode_return,
            self.episode_catastrophes,
            self.cumulative_catastrophes,
            self.catastrophe_episodes,
            self.gp_size,
            opt(self.beta_value),
            opt(self.guard_loss),
            opt(self.critic_loss),
            opt(self.actor_objective),
        )
    }
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn timing_csv(records: &[MetricsRecord]) -> String {
    let mut out = String::from("step,episode,wall_seconds\n");
    for r in records {
        let _ = writeln!(out, "{},{},{}", r.step, r.episode, r.wall_seconds);
    }
    out
}

/// One GP insertion, kept so the filters can be re-checked after the fact.
#[derive(Clone, Debug, PartialEq)]
pub struct AuditEntry {
    pub episode: usize,
    pub step: usize,
    pub z: Vec<f64>,
    pub y: f64,
    pub cost: f64,
}

impl AuditEntry {
    pub fn passes_filters(&self, sigma: f64) -> bool {
        filter_measurement(self.y, self.cost, sigma) && storage_filter(self.y, sigma)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalResult {
    pub mean_return: f64,
    pub catastrophes: usize,
}

/// Noise-free rollouts of the actor.
pub fn evaluate<E: Environment + ?Sized>(
    nets: &AgentNets,
    env: &mut E,
    episodes: usize,
    rng: &mut dyn RngCore,
) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let mut total = 0.0;
    let mut catastrophes = 0;
    for _ in 0..episodes {
        let mut s = env.reset(rng);
        for _ in 0..env.episode_length() {
            let step = env.step(&nets.policy(&s)?)?;
            total += step.reward;
            catastrophes += step.catastrophes;
            s = step.next_state;
        }
    }
    Ok(EvalResult {
        mean_return: total / episodes as f64,
        catastrophes,
    })
}

/// Largest batch of initial GP data absorbed at once.
const INIT_CHUNK: usize = 256;

/// Episode-end view used by tests and checkpoints.
#[derive(Clone, Debug)]
pub struct RunState<'a> {
    pub step: usize,
    pub episode: usize,
    pub nets: &'a AgentNets,
    pub gp: &'a GpDataset,
    pub hp: &'a KernelHyperparams,
}

pub struct Trainer<E: Environment + Clone> {
    cfg: TrainConfig,
    env: E,
    eval_env: E,
    nets: AgentNets,
    buffer: ReplayBuffer,
    gp: GpDataset,
    hp: KernelHyperparams,
    beta_value: Option<f64>,
    env_rng: ChaCha8Rng,
    noise_rng: ChaCha8Rng,
    critic_rng: ChaCha8Rng,
    guard_rng: ChaCha8Rng,
    actor_rng: ChaCha8Rng,
    step: usize,
    episode: usize,
    cumulative_catastrophes: usize,
    catastrophe_episodes: usize,
    records: Vec<MetricsRecord>,
    audit: Vec<AuditEntry>,
    started: Instant,
}

impl Trainer<Pendulum> {
    pub fn from_config(cfg: TrainConfig) -> Result<Self> {
        let env = Pendulum::new(cfg.pendulum);
        let init = match &cfg.init_trajectory {
            Some(path) => Some(load_init_trajectory(Path::new(path), cfg.cost_threshold)?),
            None => None,
        };
        Self::new(cfg, env, init)
    }
}

impl<E: Environment + Clone> Trainer<E> {
    pub fn new(cfg: TrainConfig, env: E, init: Option<InitData>) -> Result<Self> {
        cfg.validate()?;
        let sd = env.state_dim();
        let zd = sd + env.action_dim();
        let lengthscales = match cfg.lengthscales.len() {
            1 => vec![cfg.lengthscales[0]; zd],
            n if n == zd => cfg.lengthscales.clone(),
            n => {
                return Err(Error::Config(format!(
                    "gp.lengthscales has {n} entries, the GP input has {zd}"
                )));
            }
        };
        let hp = KernelHyperparams::new(cfg.signal_variance, lengthscales, cfg.sigma)?;
        let mut init_rng = stream_rng(cfg.seed, Stream::Init);
        let nets = AgentNets::new(sd, env.action_bound(), &cfg.nets, &mut init_rng);
        let mut t = Self {
            buffer: ReplayBuffer::new(cfg.replay_capacity),
            gp: GpDataset::new(cfg.gp_capacity),
            beta_value: None,
            env_rng: stream_rng(cfg.seed, Stream::Env),
            noise_rng: stream_rng(cfg.seed, Stream::Noise),
            critic_rng: stream_rng(cfg.seed, Stream::Critic),
            guard_rng: stream_rng(cfg.seed, Stream::Guard),
            actor_rng: stream_rng(cfg.seed, Stream::Actor),
            step: 0,
            episode: 0,
            cumulative_catastrophes: 0,
            catastrophe_episodes: 0,
            records: Vec::new(),
            audit: Vec::new(),
            started: Instant::now(),
            eval_env: env.clone(),
            env,
            nets,
            hp,
            cfg,
        };
        if let Some(init) = init {
            t.initialize(init)?;
        }
        if t.safety_enabled() {
            t.beta_value = Some(confidence::beta(&t.cfg.beta, &t.gp, &t.hp)?);
        }
        Ok(t)
    }

    fn safety_enabled(&self) -> bool {
        !self.cfg.vanilla
    }

    fn initialize(&mut self, init: InitData) -> Result<()> {
        if init.gp_inputs.is_empty() {
            log::warn!("no initial transition satisfies the cost threshold");
        }
        for tr in init.transitions.iter().filter(|t| t.c >= -self.cfg.cost_threshold) {
            if !tr.is_finite() {
                return Err(Error::NonFinite("initial transition"));
            }
            self.buffer.push(tr.clone());
        }
        if self.safety_enabled() {
            // absorbed in chunks to bound the gram matrix size
            let chunk = self.cfg.gp_capacity.clamp(1, INIT_CHUNK);
            let pairs: Vec<_> = init.gp_inputs.into_iter().zip(init.gp_targets).collect();
            for part in pairs.chunks(chunk) {
                self.absorb(GpDataset::from_pairs(usize::MAX, part.iter().cloned())?)?;
            }
            if !self.gp.is_empty() {
                self.hp = fit_hyperparams(&self.gp, &self.hp, self.cfg.gp_fit_steps)?;
            }
            self.beta_value = Some(confidence::beta(&self.cfg.beta, &self.gp, &self.hp)?);
        }
        self.actor_burst(self.cfg.pretrain_updates, true)?;
        Ok(())
    }

    /// Concatenates, drops linearly dependent inputs and evicts down to capacity.
    fn absorb(&mut self, staged: GpDataset) -> Result<()> {
        if staged.is_empty() {
            return Ok(());
        }
        let mut merged = self.gp.clone();
        merged.capacity = usize::MAX;
        merged.extend(&staged)?;
        let mut reduced = remove_correlated(&merged, &self.hp, self.cfg.qr_threshold);
        reduced.capacity = self.cfg.gp_capacity;
        self.gp = evict_to_capacity(&reduced, &self.hp);
        Ok(())
    }

    /// Runs `count` actor updates against a single posterior of the current
    /// GP, each preceded by critic and guard updates when `with_value_updates`.
    fn actor_burst(&mut self, count: usize, with_value_updates: bool) -> Result<(f64, usize)> {
        let safety = self.safety_enabled();
        let mut ctx = match self.beta_value {
            Some(beta) if safety => Some(SafetyContext {
                posterior: GpPosterior::new(&self.gp, &self.hp)?,
                beta,
            }),
            _ => None,
        };
        let (mut sum, mut n) = (0.0, 0usize);
        for _ in 0..count {
            if with_value_updates {
                update_critic(&self.buffer, &mut self.nets, &self.cfg.agent, &mut self.critic_rng)?;
                if safety {
                    update_guard(&self.buffer, &mut self.nets, &self.cfg.agent, &mut self.guard_rng)?;
                }
            }
            if let Some(j) = update_actor(
                &self.buffer,
                &mut self.nets,
                ctx.as_mut(),
                &self.cfg.agent,
                &mut self.actor_rng,
            )? {
                sum += j;
                n += 1;
            }
        }
        Ok((sum, n))
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    fn noise_std(&self) -> f64 {
        let horizon = self.cfg.noise_decay_fraction * self.cfg.total_steps as f64;
        if horizon <= 0.0 {
            return self.cfg.agent.action_noise_std;
        }
        self.cfg.agent.action_noise_std * (1.0 - self.step as f64 / horizon).max(0.0)
    }

    fn wrap<T>(&self, r: Result<T>) -> Result<T> {
        r.map_err(|e| Error::Training {
            episode: self.episode,
            step: self.step,
            source: Box::new(e),
        })
    }

    /// Runs one training episode (truncated at `total_steps`) and its
    /// end-of-episode GP maintenance and actor burst.
    pub fn run_episode(&mut self) -> Result<()> {
        if self.is_finished() {
            return Ok(());
        }
        let r = self.episode_inner();
        self.wrap(r)
    }

    fn episode_inner(&mut self) -> Result<()> {
        let safety = self.safety_enabled();
        let online = self.cfg.gp_mode == GpMode::Online;
        let sigma = self.cfg.sigma;
        let mut staged = GpDataset::new(usize::MAX);
        let mut s = self.env.reset(&mut self.env_rng);
        let mut ep_return = 0.0;
        let mut ep_catastrophes = 0;
        let (mut guard_loss, mut critic_loss) = (None, None);

        for t in 0..self.cfg.episode_length {
            if self.is_finished() {
                break;
            }
            let a = select_action(&s, &self.nets, self.noise_std(), &mut self.noise_rng)?;
            let out = self.env.step(&a)?;
            let tr = Transition {
                s,
                a,
                r: out.reward,
                c: out.cost,
                s_next: out.next_state,
                done: t + 1 == self.cfg.episode_length,
            };
            if !tr.is_finite() {
                return Err(Error::NonFinite("transition"));
            }
            ep_return += tr.r;
            ep_catastrophes += out.catastrophes;
            self.cumulative_catastrophes += out.catastrophes;
            if safety && online {
                let y = measurement(&tr, &self.nets)?;
                if filter_measurement(y, tr.c, sigma) && storage_filter(y, sigma) {
                    let z = tr.state_action();
                    self.audit.push(AuditEntry {
                        episode: self.episode,
                        step: self.step,
                        z: z.clone(),
                        y,
                        cost: tr.c,
                    });
                    staged.push(z, y)?;
                }
            }
            s = tr.s_next.clone();
            self.buffer.push(tr);
            for _ in 0..self.cfg.updates_per_step {
                critic_loss =
                    update_critic(&self.buffer, &mut self.nets, &self.cfg.agent, &mut self.critic_rng)?.or(critic_loss);
                if safety {
                    guard_loss = update_guard(&self.buffer, &mut self.nets, &self.cfg.agent, &mut self.guard_rng)?
                        .or(guard_loss);
                }
            }
            self.step += 1;
            if self.step.is_multiple_of(self.cfg.eval_interval) {
                self.push_eval()?;
            }
        }

        if ep_catastrophes > 0 {
            self.catastrophe_episodes += 1;
        }
        if safety && online {
            self.absorb(staged)?;
            if !self.gp.is_empty() {
                self.hp = fit_hyperparams(&self.gp, &self.hp, self.cfg.gp_fit_steps)?;
            }
        }
        if safety {
            self.beta_value = Some(confidence::beta(&self.cfg.beta, &self.gp, &self.hp)?);
        }
        let (objective_sum, objective_count) = self.actor_burst(self.cfg.actor_updates_per_episode, false)?;
        log::debug!(
            "episode {} gp {} sf2 {:.4} lengthscales {:?} beta {:?}",
            self.episode,
            self.gp.len(),
            self.hp.signal_variance,
            self.hp.lengthscales,
            self.beta_value
        );
        self.records.push(MetricsRecord {
            kind: RecordKind::Train,
            step: self.step,
            episode: self.episode,
            episode_return: ep_return,
            episode_catastrophes: ep_catastrophes,
            cumulative_catastrophes: self.cumulative_catastrophes,
            catastrophe_episodes: self.catastrophe_episodes,
            gp_size: self.gp.len(),
            beta_value: self.beta_value,
            guard_loss,
            critic_loss,
            actor_objective: (objective_count > 0).then(|| objective_sum / objective_count as f64),
            wall_seconds: self.started.elapsed().as_secs_f64(),
        });
        self.episode += 1;
        Ok(())
    }

    /// Evaluation with a fresh generator each time, so every evaluation sees
    /// the same start states.
    pub fn evaluate_now(&mut self) -> Result<EvalResult> {
        let mut rng = stream_rng(self.cfg.seed, Stream::Eval);
        evaluate(&self.nets, &mut self.eval_env, self.cfg.eval_episodes, &mut rng)
    }

    fn push_eval(&mut self) -> Result<()> {
        let res = self.evaluate_now()?;
        self.records.push(MetricsRecord {
            kind: RecordKind::Eval,
            step: self.step,
            episode: self.episode,
            episode_return: res.mean_return,
            episode_catastrophes: res.catastrophes,
            cumulative_catastrophes: self.cumulative_catastrophes,
            catastrophe_episodes: self.catastrophe_episodes,
            gp_size: self.gp.len(),
            beta_value: self.beta_value,
            guard_loss: None,
            critic_loss: None,
            actor_objective: None,
            wall_seconds: self.started.elapsed().as_secs_f64(),
        });
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.run_episode()?;
        }
        Ok(())
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn records(&self) -> &[MetricsRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<MetricsRecord> {
        self.records
    }

    pub fn audit_log(&self) -> &[AuditEntry] {
        &self.audit
    }

    pub fn nets(&self) -> &AgentNets {
        &self.nets
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn gp(&self) -> &GpDataset {
        &self.gp
    }

    pub fn hyperparams(&self) -> &KernelHyperparams {
        &self.hp
    }

    pub fn beta_value(&self) -> Option<f64> {
        self.beta_value
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            nets: self.nets.clone(),
            gp: self.gp.clone(),
            hp: self.hp.clone(),
            beta_value: self.beta_value,
            step: self.step,
            episode: self.episode,
            config: self.cfg.to_json(),
        }
    }

    pub fn state(&self) -> RunState<'_> {
        RunState {
            step: self.step,
            episode: self.episode,
            nets: &self.nets,
            gp: &self.gp,
            hp: &self.hp,
        }
    }
}

/// Runs a full training job and returns its metrics.
pub fn train(cfg: TrainConfig) -> Result<Vec<MetricsRecord>> {
    let mut trainer = Trainer::from_config(cfg)?;
    trainer.run()?;
    Ok(trainer.into_records())
}

/// Run summary: final and best evaluation returns, catastrophe totals and
/// the effective configuration.
pub fn run_summary(cfg: &TrainConfig, records: &[MetricsRecord]) -> Value {
    let evals: Vec<&MetricsRecord> = records.iter().filter(|r| r.kind == RecordKind::Eval).collect();
    let trains: Vec<&MetricsRecord> = records.iter().filter(|r| r.kind == RecordKind::Train).collect();
    let last = trains.last();
    json!({
        "seed": cfg.seed,
        "steps": last.map_or(0, |r| r.step),
        "episodes": trains.len(),
        "final_return": evals.last().map(|r| r.episode_return),
        "best_return": evals.iter().map(|r| r.episode_return).reduce(f64::max),
        "total_catastrophes": last.map_or(0, |r| r.cumulative_catastrophes),
        "catastrophe_episodes": last.map_or(0, |r| r.catastrophe_episodes),
        "gp_size": last.map_or(0, |r| r.gp_size),
        "wall_seconds": records.last().map_or(0.0, |r| r.wall_seconds),
        "config": cfg.to_json(),
    })
}

/// Writes `metrics.csv`, `timing.csv` and `summary.json` into `dir`.
pub fn write_run_outputs(dir: &Path, cfg: &TrainConfig, records: &[MetricsRecord]) -> Result<Value> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), metrics_csv(records))?;
    fs::write(dir.join("timing.csv"), timing_csv(records))?;
    let summary = run_summary(cfg, records);
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}
