//! The actor's weighted-sum objective
//!
//! ```text
//! J(s) = Q(s, π(s)) - M·max(0, -l(s, π(s))) + exp(-l(s, π(s))²)
//! ```
//!
//! where `l = μ - β·σ` is the GP lower confidence bound on the guard
//! difference at `z = (s, π(s))`.

use nalgebra::DMatrix;
use rand::Rng;

use super::{columns, concat, stack, AgentNets, ReplayBuffer, SafeActorConfig};
use crate::confidence::bounds;
use crate::error::{Error, Result};
use crate::gp::GpPosterior;
use crate::nn::{adam_step, soft_update, MlpGrads};

/// GP posterior and confidence scaling used by the actor update. GP data,
/// β and hyperparameters are constants as far as the actor is concerned.
pub struct SafetyContext<'a> {
    pub posterior: GpPosterior<'a>,
    pub beta: f64,
}

/// `-M·max(0, -l) + exp(-l²)`.
pub fn safety_terms(lower: f64, penalty_weight: f64) -> f64 {
    -penalty_weight * (-lower).max(0.0) + (-lower * lower).exp()
}

/// `∂/∂l` of [`safety_terms`]; the kink at `l = 0` takes subgradient 0.
pub fn safety_terms_dl(lower: f64, penalty_weight: f64) -> f64 {
    let penalty = if lower < 0.0 { penalty_weight } else { 0.0 };
    penalty - 2.0 * lower * (-lower * lower).exp()
}

pub fn actor_objective_value(q: f64, lower: f64, penalty_weight: f64) -> f64 {
    q + safety_terms(lower, penalty_weight)
}

/// Objective at a single state. Without a safety context it is `Q(s, π(s))`.
pub fn actor_objective(
    s: &[f64],
    nets: &AgentNets,
    safety: Option<&SafetyContext<'_>>,
    cfg: &SafeActorConfig,
) -> Result<f64> {
    let a = nets.policy(s)?;
    let q = nets.q_value(s, &a)?;
    match safety {
        None => Ok(q),
        Some(ctx) => {
            let stats = ctx.posterior.predict(&concat(s, &a))?;
            let b = bounds(stats, ctx.beta);
            Ok(actor_objective_value(q, b.lower, cfg.penalty_weight))
        }
    }
}

/// Batch-mean objective over the columns of `states` and its gradient with
/// respect to the actor parameters.
pub fn actor_batch_gradient(
    states: &DMatrix<f64>,
    nets: &AgentNets,
    safety: Option<&mut SafetyContext<'_>>,
    cfg: &SafeActorConfig,
) -> Result<(f64, MlpGrads)> {
    let n = states.ncols();
    let sd = states.nrows();
    let ad = nets.action_dim();
    let inv_n = 1.0 / n as f64;

    let actor_cache = nets.actor.forward_cached(states);
    let mut actions = actor_cache.output().clone();
    nets.scale_actions(&mut actions);
    let sa = stack(states, &actions);

    let critic_cache = nets.critic.forward_cached(&sa);
    let q = critic_cache.output();
    let mut objective: f64 = q.iter().sum::<f64>() * inv_n;
    let upstream = DMatrix::from_element(1, n, inv_n);
    let (_, d_input) = nets.critic.backward_batch(&critic_cache, &upstream);
    let mut d_action = d_input.rows(sd, ad).into_owned();

    if let Some(ctx) = safety {
        let zs: Vec<Vec<f64>> = sa.column_iter().map(|c| c.iter().copied().collect()).collect();
        let preds = ctx.posterior.predict_batch_with_grad(&zs)?;
        for (j, (stats, dmean, dvar)) in preds.into_iter().enumerate() {
            let b = bounds(stats, ctx.beta);
            objective += safety_terms(b.lower, cfg.penalty_weight) * inv_n;
            let coef = safety_terms_dl(b.lower, cfg.penalty_weight) * inv_n;
            for k in 0..ad {
                // l = μ - β·sqrt(var)
                let dstd = if b.std > 0.0 { dvar[sd + k] / (2.0 * b.std) } else { 0.0 };
                d_action[(k, j)] += coef * (dmean[sd + k] - ctx.beta * dstd);
            }
        }
    }

    for (k, mut row) in d_action.row_iter_mut().enumerate() {
        row *= nets.action_bound[k];
    }
    let (grads, _) = nets.actor.backward_batch(&actor_cache, &d_action);
    Ok((objective, grads))
}

/// One ascent step on the batch-mean objective, followed by a soft update of
/// the actor target. Returns the pre-step objective, or `None` while the
/// buffer is smaller than a batch.
pub fn update_actor<R: Rng + ?Sized>(
    buffer: &ReplayBuffer,
    nets: &mut AgentNets,
    safety: Option<&mut SafetyContext<'_>>,
    cfg: &SafeActorConfig,
    rng: &mut R,
) -> Result<Option<f64>> {
    let Some(items) = buffer.sample(cfg.batch_size, rng) else {
        return Ok(None);
    };
    let states = columns(items[0].s.len(), items.iter().map(|t| t.s.as_slice()));
    let (objective, mut grads) = actor_batch_gradient(&states, nets, safety, cfg)?;
    if !objective.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite("actor gradient"));
    }
    grads.scale(-1.0);
    adam_step(&mut nets.actor, &grads, &mut nets.actor_opt)?;
    soft_update(&mut nets.actor_target, &nets.actor, nets.tau)?;
    Ok(Some(objective))
}
