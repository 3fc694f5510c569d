//! Safety-guided DDPG learner.
//!
//! Three networks are trained from one replay buffer: the actor `π(s)`, the
//! critic `Q(s, a)` on rewards and the guard `G(s, a)`, which estimates the
//! cumulative safety cost along the current policy. One-step differences of
//! the guard are the noisy measurements the GP is built from.

mod buffer;
mod objective;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{adam_step, soft_update, Activation, MlpParams, OptimizerState};

pub use buffer::{ReplayBuffer, Transition};
pub use objective::{
    actor_batch_gradient, actor_objective, actor_objective_value, safety_terms, safety_terms_dl, update_actor,
    SafetyContext,
};

/// Network sizes and optimizer settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub guard_lr: f64,
    pub tau: f64,
    /// Half-width of the uniform initialization of the actor's last layer.
    pub actor_final_init: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            actor_hidden: vec![64, 64],
            critic_hidden: vec![64, 64],
            actor_lr: 1e-4,
            critic_lr: 1e-3,
            guard_lr: 1e-3,
            tau: 0.005,
            actor_final_init: 3e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafeActorConfig {
    /// Penalty weight `M` on negative lower bounds.
    pub penalty_weight: f64,
    pub discount: f64,
    pub batch_size: usize,
    pub action_noise_std: f64,
}

impl Default for SafeActorConfig {
    fn default() -> Self {
        Self {
            penalty_weight: 20.0,
            discount: 0.99,
            batch_size: 64,
            action_noise_std: 0.1,
        }
    }
}

impl SafeActorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.penalty_weight >= 0.0 && self.penalty_weight.is_finite()) {
            return Err(Error::Config("penalty weight must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return Err(Error::Config("discount must lie in [0, 1]".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.action_noise_std.is_nan() || self.action_noise_std < 0.0 {
            return Err(Error::Config("action noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Actor, critic and guard with their target copies and optimizer states.
#[derive(Clone, Debug, PartialEq)]
pub struct AgentNets {
    pub actor: MlpParams,
    pub critic: MlpParams,
    pub guard: MlpParams,
    pub actor_target: MlpParams,
    pub critic_target: MlpParams,
    pub guard_target: MlpParams,
    pub actor_opt: OptimizerState,
    pub critic_opt: OptimizerState,
    pub guard_opt: OptimizerState,
    pub action_bound: Vec<f64>,
    pub tau: f64,
}

impl AgentNets {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_bound: Vec<f64>, cfg: &NetConfig, rng: &mut R) -> Self {
        let action_dim = action_bound.len();
        let sizes = |input: usize, hidden: &[usize], output: usize| {
            let mut v = vec![input];
            v.extend_from_slice(hidden);
            v.push(output);
            v
        };
        let actor = MlpParams::new(
            &sizes(state_dim, &cfg.actor_hidden, action_dim),
            Activation::Relu,
            Activation::Tanh,
            Some(cfg.actor_final_init),
            rng,
        );
        let q_sizes = sizes(state_dim + action_dim, &cfg.critic_hidden, 1);
        let critic = MlpParams::new(&q_sizes, Activation::Relu, Activation::Identity, Some(3e-3), rng);
        let guard = MlpParams::new(&q_sizes, Activation::Relu, Activation::Identity, Some(3e-3), rng);
        Self {
            actor_opt: OptimizerState::new(&actor, cfg.actor_lr),
            critic_opt: OptimizerState::new(&critic, cfg.critic_lr),
            guard_opt: OptimizerState::new(&guard, cfg.guard_lr),
            actor_target: actor.clone(),
            critic_target: critic.clone(),
            guard_target: guard.clone(),
            actor,
            critic,
            guard,
            action_bound,
            tau: cfg.tau,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.actor.input_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.action_bound.len()
    }

    fn scale_actions(&self, raw: &mut DMatrix<f64>) {
        for (i, mut row) in raw.row_iter_mut().enumerate() {
            row *= self.action_bound[i];
        }
    }

    /// Deterministic policy action `bound ⊙ tanh-output`.
    pub fn policy(&self, s: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .actor
            .forward(s)?
            .iter()
            .zip(&self.action_bound)
            .map(|(a, b)| a * b)
            .collect())
    }

    pub(crate) fn policy_batch(&self, actor: &MlpParams, states: &DMatrix<f64>) -> DMatrix<f64> {
        let mut a = actor.forward_batch(states);
        self.scale_actions(&mut a);
        a
    }

    pub fn q_value(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        Ok(self.critic.forward(&concat(s, a))?[0])
    }

    pub fn guard_value(&self, s: &[f64], a: &[f64]) -> Result<f64> {
        Ok(self.guard.forward(&concat(s, a))?[0])
    }

    pub fn clip_action(&self, a: &mut [f64]) {
        for (x, b) in a.iter_mut().zip(&self.action_bound) {
            *x = x.clamp(-b, *b);
        }
    }
}

pub(crate) fn concat(s: &[f64], a: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(s.len() + a.len());
    v.extend_from_slice(s);
    v.extend_from_slice(a);
    v
}

pub(crate) fn columns(rows: usize, items: impl ExactSizeIterator<Item = impl AsRef<[f64]>>) -> DMatrix<f64> {
    let n = items.len();
    let mut data = Vec::with_capacity(rows * n);
    for it in items {
        data.extend_from_slice(it.as_ref());
    }
    DMatrix::from_column_slice(rows, n, &data)
}

pub(crate) fn stack(top: &DMatrix<f64>, bottom: &DMatrix<f64>) -> DMatrix<f64> {
    let (r1, r2, n) = (top.nrows(), bottom.nrows(), top.ncols());
    DMatrix::from_fn(
        r1 + r2,
        n,
        |i, j| if i < r1 { top[(i, j)] } else { bottom[(i - r1, j)] },
    )
}

/// `y = c + G_target(s', π_target(s'))`, or just `c` on terminal transitions.
pub fn guard_target(t: &Transition, nets: &AgentNets) -> Result<f64> {
    if t.done {
        return Ok(t.c);
    }
    let a_next: Vec<f64> = nets
        .actor_target
        .forward(&t.s_next)?
        .iter()
        .zip(&nets.action_bound)
        .map(|(a, b)| a * b)
        .collect();
    Ok(t.c + nets.guard_target.forward(&concat(&t.s_next, &a_next))?[0])
}

/// `r + γ·Q_target(s', π_target(s'))`, or just `r` on terminal transitions.
pub fn critic_target(t: &Transition, nets: &AgentNets, discount: f64) -> Result<f64> {
    if t.done {
        return Ok(t.r);
    }
    let a_next: Vec<f64> = nets
        .actor_target
        .forward(&t.s_next)?
        .iter()
        .zip(&nets.action_bound)
        .map(|(a, b)| a * b)
        .collect();
    Ok(t.r + discount * nets.critic_target.forward(&concat(&t.s_next, &a_next))?[0])
}

struct Batch {
    sa: DMatrix<f64>,
    s_next: DMatrix<f64>,
    rewards: Vec<f64>,
    costs: Vec<f64>,
    done: Vec<bool>,
}

impl Batch {
    fn new(items: &[&Transition]) -> Self {
        let sd = items[0].s.len();
        let s = columns(sd, items.iter().map(|t| t.s.as_slice()));
        let a = columns(items[0].a.len(), items.iter().map(|t| t.a.as_slice()));
        Self {
            sa: stack(&s, &a),
            s_next: columns(sd, items.iter().map(|t| t.s_next.as_slice())),
            rewards: items.iter().map(|t| t.r).collect(),
            costs: items.iter().map(|t| t.c).collect(),
            done: items.iter().map(|t| t.done).collect(),
        }
    }

    /// `target_net(s', π_target(s'))` for every column.
    fn bootstrap(&self, nets: &AgentNets, target_net: &MlpParams) -> Vec<f64> {
        let a_next = nets.policy_batch(&nets.actor_target, &self.s_next);
        let out = target_net.forward_batch(&stack(&self.s_next, &a_next));
        out.row(0).iter().copied().collect()
    }
}

/// One squared-error regression step. Returns the pre-step mean loss.
fn regress(net: &mut MlpParams, opt: &mut OptimizerState, inputs: &DMatrix<f64>, targets: &[f64]) -> Result<f64> {
    let cache = net.forward_cached(inputs);
    let pred = cache.output();
    let n = targets.len() as f64;
    let mut loss = 0.0;
    let mut upstream = DMatrix::zeros(1, targets.len());
    for (j, y) in targets.iter().enumerate() {
        let e = pred[(0, j)] - y;
        loss += e * e;
        upstream[(0, j)] = 2.0 * e / n;
    }
    loss /= n;
    if !loss.is_finite() {
        return Err(Error::NonFinite("regression loss"));
    }
    let (grads, _) = net.backward_batch(&cache, &upstream);
    adam_step(net, &grads, opt)?;
    Ok(loss)
}

/// One step on `E[(G(s,a) - y)²]` with `y` from [`guard_target`]. Returns
/// `None` while the buffer is smaller than a batch.
pub fn update_guard<R: Rng + ?Sized>(
    buffer: &ReplayBuffer,
    nets: &mut AgentNets,
    cfg: &SafeActorConfig,
    rng: &mut R,
) -> Result<Option<f64>> {
    let Some(items) = buffer.sample(cfg.batch_size, rng) else {
        return Ok(None);
    };
    let batch = Batch::new(&items);
    let boot = batch.bootstrap(nets, &nets.guard_target);
    let targets: Vec<f64> = (0..items.len())
        .map(|j| {
            if batch.done[j] {
                batch.costs[j]
            } else {
                batch.costs[j] + boot[j]
            }
        })
        .collect();
    let loss = regress(&mut nets.guard, &mut nets.guard_opt, &batch.sa, &targets)?;
    soft_update(&mut nets.guard_target, &nets.guard, nets.tau)?;
    Ok(Some(loss))
}

/// One step on the Bellman error of the critic.
pub fn update_critic<R: Rng + ?Sized>(
    buffer: &ReplayBuffer,
    nets: &mut AgentNets,
    cfg: &SafeActorConfig,
    rng: &mut R,
) -> Result<Option<f64>> {
    let Some(items) = buffer.sample(cfg.batch_size, rng) else {
        return Ok(None);
    };
    let batch = Batch::new(&items);
    let boot = batch.bootstrap(nets, &nets.critic_target);
    let targets: Vec<f64> = (0..items.len())
        .map(|j| {
            if batch.done[j] {
                batch.rewards[j]
            } else {
                batch.rewards[j] + cfg.discount * boot[j]
            }
        })
        .collect();
    let loss = regress(&mut nets.critic, &mut nets.critic_opt, &batch.sa, &targets)?;
    soft_update(&mut nets.critic_target, &nets.critic, nets.tau)?;
    Ok(Some(loss))
}

/// Guard difference `G(s', π(s')) - G(s, a)` under the online networks.
pub fn measurement(t: &Transition, nets: &AgentNets) -> Result<f64> {
    let a_next = nets.policy(&t.s_next)?;
    Ok(nets.guard_value(&t.s_next, &a_next)? - nets.guard_value(&t.s, &t.a)?)
}

/// A measurement is valid when it lies within `σ` of `c` or of `-c`.
pub fn filter_measurement(g_hat: f64, c: f64, sigma: f64) -> bool {
    (g_hat - c).abs() <= sigma || (g_hat + c).abs() <= sigma
}

/// Measurements inside the `σ` ball around zero are not stored.
pub fn storage_filter(g_hat: f64, sigma: f64) -> bool {
    g_hat.abs() > sigma
}

/// `clip(π(s) + N(0, noise_std²))`.
pub fn select_action<R: Rng + ?Sized>(s: &[f64], nets: &AgentNets, noise_std: f64, rng: &mut R) -> Result<Vec<f64>> {
    let mut a = nets.policy(s)?;
    if noise_std > 0.0 {
        let normal = Normal::new(0.0, noise_std).map_err(|_| Error::Config("bad noise std".into()))?;
        for x in a.iter_mut() {
            *x += normal.sample(rng);
        }
    }
    nets.clip_action(&mut a);
    Ok(a)
}
