//! Environments. The built-in one is an inverted pendulum swing-up task.

use std::f64::consts::PI;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One environment transition as seen by the learner.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvStep {
    pub next_state: Vec<f64>,
    pub reward: f64,
    pub cost: f64,
    /// Number of catastrophe events during this step.
    pub catastrophes: usize,
}

/// The interface the training harness drives.
pub trait Environment {
    fn name(&self) -> &'static str;
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Symmetric bound per action component: `|a_i| ≤ bound[i]`.
    fn action_bound(&self) -> Vec<f64>;
    fn episode_length(&self) -> usize;
    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<EnvStep>;
}

pub const MAX_SPEED: f64 = 8.0;
pub const MAX_TORQUE: f64 = 2.0;
pub const EPISODE_LENGTH: usize = 200;

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(theta: f64) -> f64 {
    let mut t = (theta + PI).rem_euclid(2.0 * PI) - PI;
    if t <= -PI {
        t += 2.0 * PI;
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendulumState {
    /// Angle from upright, wrapped to `(-π, π]`.
    pub theta: f64,
    pub theta_dot: f64,
}

impl PendulumState {
    pub fn new(theta: f64, theta_dot: f64) -> Self {
        Self {
            theta: wrap_angle(theta),
            theta_dot: theta_dot.clamp(-MAX_SPEED, MAX_SPEED),
        }
    }

    pub fn to_vec(self) -> Vec<f64> {
        vec![self.theta, self.theta_dot]
    }

    pub fn from_slice(s: &[f64]) -> Result<Self> {
        match s {
            [theta, theta_dot] => Ok(Self::new(*theta, *theta_dot)),
            _ => Err(Error::DimensionMismatch {
                expected: 2,
                got: s.len(),
            }),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepResult {
    pub next_state: PendulumState,
    pub reward: f64,
    pub cost: f64,
    pub catastrophe: bool,
}

/// Physical constants and reset distribution of the pendulum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PendulumParams {
    pub dt: f64,
    pub gravity: f64,
    pub mass: f64,
    pub length: f64,
    /// Initial angles are drawn from `U(-reset_theta, reset_theta)`.
    pub reset_theta: f64,
    /// Initial velocities are drawn from `U(-reset_theta_dot, reset_theta_dot)`.
    pub reset_theta_dot: f64,
}

impl Default for PendulumParams {
    fn default() -> Self {
        Self {
            dt: 0.05,
            gravity: 10.0,
            mass: 1.0,
            length: 1.0,
            reset_theta: DEFAULT_RESET_THETA,
            reset_theta_dot: DEFAULT_RESET_THETA_DOT,
        }
    }
}

/// Default reset half-range for the angle. Chosen inside the set of states
/// from which the torque limit can still prevent a fall through the bottom.
pub const DEFAULT_RESET_THETA: f64 = 0.2;
pub const DEFAULT_RESET_THETA_DOT: f64 = 0.2;

impl PendulumParams {
    /// `r = -(θ² + 0.1·θ̇² + 0.001·a²)`, i.e. `sᵀPs + aᵀUa` with
    /// `P = diag(-1, -0.1)` and `U = -0.001`.
    pub fn reward(state: PendulumState, torque: f64) -> f64 {
        let th = wrap_angle(state.theta);
        -(th * th + 0.1 * state.theta_dot * state.theta_dot + 0.001 * torque * torque)
    }

    pub fn step(&self, s: PendulumState, action: f64) -> Result<StepResult> {
        if !action.is_finite() || !s.theta.is_finite() || !s.theta_dot.is_finite() {
            return Err(Error::NonFinite("pendulum step input"));
        }
        let u = action.clamp(-MAX_TORQUE, MAX_TORQUE);
        let (g, m, l, dt) = (self.gravity, self.mass, self.length, self.dt);
        let reward = Self::reward(s, u);
        let acc = 3.0 * g / (2.0 * l) * s.theta.sin() + 3.0 / (m * l * l) * u;
        let theta_dot = (s.theta_dot + acc * dt).clamp(-MAX_SPEED, MAX_SPEED);
        let theta = wrap_angle(s.theta + theta_dot * dt);
        let next_state = PendulumState { theta, theta_dot };
        Ok(StepResult {
            next_state,
            reward,
            cost: reward,
            catastrophe: crossed_bottom(s.theta, theta),
        })
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> PendulumState {
        let theta = if self.reset_theta > 0.0 {
            rng.random_range(-self.reset_theta..self.reset_theta)
        } else {
            0.0
        };
        let theta_dot = if self.reset_theta_dot > 0.0 {
            rng.random_range(-self.reset_theta_dot..self.reset_theta_dot)
        } else {
            0.0
        };
        PendulumState::new(theta, theta_dot)
    }
}

/// Whether the shortest-arc rotation between two wrapped angles passes
/// through the downward position `±π`. Landing exactly on `±π` counts,
/// leaving it does not, so one pass is counted once.
pub fn crossed_bottom(theta_prev: f64, theta_next: f64) -> bool {
    if theta_prev.abs() == PI {
        return false;
    }
    if theta_next.abs() == PI {
        return true;
    }
    let opposite = (theta_prev < 0.0) != (theta_next < 0.0);
    opposite && theta_prev.abs() + theta_next.abs() > PI
}

/// Number of bottom crossings along consecutive states of a trajectory.
pub fn episode_catastrophes(trajectory: &[PendulumState]) -> usize {
    trajectory
        .windows(2)
        .filter(|w| crossed_bottom(w[0].theta, w[1].theta))
        .count()
}

/// Inverted pendulum with internal state, driven through [`Environment`].
#[derive(Clone, Debug)]
pub struct Pendulum {
    pub params: PendulumParams,
    state: PendulumState,
}

impl Pendulum {
    pub fn new(params: PendulumParams) -> Self {
        Self {
            params,
            state: PendulumState::new(0.0, 0.0),
        }
    }

    pub fn state(&self) -> PendulumState {
        self.state
    }

    pub fn set_state(&mut self, state: PendulumState) {
        self.state = state;
    }
}

impl Default for Pendulum {
    fn default() -> Self {
        Self::new(PendulumParams::default())
    }
}

impl Environment for Pendulum {
    fn name(&self) -> &'static str {
        "pendulum"
    }

    fn state_dim(&self) -> usize {
        2
    }

    fn action_dim(&self) -> usize {
        1
    }

    fn action_bound(&self) -> Vec<f64> {
        vec![MAX_TORQUE]
    }

    fn episode_length(&self) -> usize {
        EPISODE_LENGTH
    }

    fn reset(&mut self, rng: &mut dyn RngCore) -> Vec<f64> {
        self.state = self.params.sample_initial(rng);
        self.state.to_vec()
    }

    fn step(&mut self, action: &[f64]) -> Result<EnvStep> {
        let &[a] = action else {
            return Err(Error::DimensionMismatch {
                expected: 1,
                got: action.len(),
            });
        };
        let r = self.params.step(self.state, a)?;
        self.state = r.next_state;
        Ok(EnvStep {
            next_state: r.next_state.to_vec(),
            reward: r.reward,
            cost: r.cost,
            catastrophes: usize::from(r.catastrophe),
        })
    }
}

/// Energy-pumping swing-up with a linear balancing controller near upright.
///
/// Used to generate demonstration trajectories.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SwingUpController {
    pub energy_gain: f64,
    pub kp: f64,
    pub kd: f64,
    /// Switch to balancing once `cos θ` exceeds this.
    pub balance_cos: f64,
}

impl Default for SwingUpController {
    fn default() -> Self {
        Self {
            energy_gain: 0.5,
            kp: 10.0,
            kd: 2.0,
            balance_cos: 0.9,
        }
    }
}

impl SwingUpController {
    pub fn action(&self, s: PendulumState, params: &PendulumParams) -> f64 {
        let th = wrap_angle(s.theta);
        let u = if th.cos() > self.balance_cos {
            -(self.kp * th + self.kd * s.theta_dot)
        } else {
            // θ̈ = w² sin θ + b·u has energy ½θ̇² + w² cos θ, equal to w² upright at rest.
            let w2 = 3.0 * params.gravity / (2.0 * params.length);
            let energy = 0.5 * s.theta_dot * s.theta_dot + w2 * th.cos();
            let dir = if s.theta_dot == 0.0 { 1.0 } else { s.theta_dot.signum() };
            self.energy_gain * (w2 - energy) * dir
        };
        u.clamp(-MAX_TORQUE, MAX_TORQUE)
    }
}
