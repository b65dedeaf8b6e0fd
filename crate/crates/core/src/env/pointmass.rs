//! Point-mass dynamics and the three behavior policies.
//!
//! One step:
//!   v' = v * (1 - mu0*kappa_fric*dt) + dt * (u_max*a - kappa_grav*g0*e_y) + noise_std*xi
//!   x' = x + dt * v'
//!   r  = -|x' - goal|
//! with xi ~ N(0, I). kappa_fric scales the damping (friction analog),
//! kappa_grav the constant downward pull (gravity analog).

use crate::autodiff::RngStream;
use crate::{CoreError, Result};

pub const STATE_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct EnvParams {
    pub kappa_grav: f64,
    pub kappa_fric: f64,
    pub dt: f64,
    pub g0: f64,
    pub mu0: f64,
    pub u_max: f64,
    pub noise_std: f64,
    pub goal: [f64; 2],
    pub episode_len: usize,
}

impl Default for EnvParams {
    fn default() -> Self {
        EnvParams {
            kappa_grav: 1.0,
            kappa_fric: 1.0,
            dt: 0.05,
            g0: 1.0,
            mu0: 0.5,
            u_max: 3.0,
            noise_std: 0.05,
            goal: [0.5, 0.5],
            episode_len: 100,
        }
    }
}

impl EnvParams {
    /// Shifted copy: the conventional kappa scales are {0.1, 0.5, 1.0, 2.0, 5.0}.
    pub fn with_shift(&self, kappa_grav: f64, kappa_fric: f64) -> EnvParams {
        EnvParams { kappa_grav, kappa_fric, ..self.clone() }
    }

    pub fn damping_factor(&self) -> f64 {
        1.0 - self.mu0 * self.kappa_fric * self.dt
    }

    pub fn validate(&self) -> Result<()> {
        if self.dt <= 0.0 || self.episode_len == 0 || self.u_max <= 0.0 {
            return Err(CoreError::config("env params: dt, episode_len, u_max must be positive"));
        }
        if self.damping_factor() <= 0.0 {
            return Err(CoreError::config(format!(
                "env params: unstable damping, mu0*kappa_fric*dt = {} >= 1",
                self.mu0 * self.kappa_fric * self.dt
            )));
        }
        if self.noise_std < 0.0 {
            return Err(CoreError::config("env params: noise_std must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnvState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
}

impl EnvState {
    pub fn observe(&self) -> [f64; STATE_DIM] {
        [self.position[0], self.position[1], self.velocity[0], self.velocity[1]]
    }
}

pub fn clip_action(a: [f64; 2]) -> [f64; 2] {
    [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)]
}

/// One environment step; returns the next state and the reward.
pub fn step(
    params: &EnvParams,
    state: &EnvState,
    action: [f64; 2],
    rng: &mut RngStream,
) -> Result<(EnvState, f64)> {
    params.validate()?;
    let a = clip_action(action);
    let damping = params.damping_factor();
    let mut v = [
        state.velocity[0] * damping + params.dt * params.u_max * a[0],
        state.velocity[1] * damping
            + params.dt * (params.u_max * a[1] - params.kappa_grav * params.g0),
    ];
    if params.noise_std > 0.0 {
        v[0] += params.noise_std * rng.normal();
        v[1] += params.noise_std * rng.normal();
    }
    let x = [
        state.position[0] + params.dt * v[0],
        state.position[1] + params.dt * v[1],
    ];
    let dx = [x[0] - params.goal[0], x[1] - params.goal[1]];
    let reward = -(dx[0] * dx[0] + dx[1] * dx[1]).sqrt();
    let next = EnvState { position: x, velocity: v };
    if !next.observe().iter().all(|v| v.is_finite()) || !reward.is_finite() {
        return Err(CoreError::non_finite("env step produced non-finite state"));
    }
    Ok((next, reward))
}

/// Initial state: position uniform in [-1,1]^2, velocity zero. Identical in
/// source and target.
pub fn initial_state(rng: &mut RngStream) -> EnvState {
    EnvState {
        position: [rng.uniform_in(-1.0, 1.0), rng.uniform_in(-1.0, 1.0)],
        velocity: [0.0, 0.0],
    }
}

/// The dataset-collection and anchor policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BehaviorPolicy {
    /// Uniform in [-1,1]^2; the lower score anchor.
    RandomUniform,
    /// Loose PD gains plus action noise, no gravity compensation.
    MediumPd,
    /// Tight PD gains with gravity compensation; the upper score anchor.
    ExpertPd,
}

impl BehaviorPolicy {
    pub fn action(&self, params: &EnvParams, state: &EnvState, rng: &mut RngStream) -> [f64; 2] {
        match self {
            BehaviorPolicy::RandomUniform => {
                [rng.uniform_in(-1.0, 1.0), rng.uniform_in(-1.0, 1.0)]
            }
            BehaviorPolicy::MediumPd => {
                let (kp, kd, noise) = (1.5, 1.0, 0.4);
                let mut a = pd_raw(params, state, kp, kd, 0.0);
                a[0] += noise * rng.normal();
                a[1] += noise * rng.normal();
                clip_action(a)
            }
            BehaviorPolicy::ExpertPd => {
                let (kp, kd) = (4.0, 2.5);
                clip_action(pd_raw(params, state, kp, kd, 1.0))
            }
        }
    }

    pub fn tag(&self) -> &'static str {
        match self {
            BehaviorPolicy::RandomUniform => "random",
            BehaviorPolicy::MediumPd => "medium",
            BehaviorPolicy::ExpertPd => "expert",
        }
    }
}

fn pd_raw(params: &EnvParams, state: &EnvState, kp: f64, kd: f64, grav_comp: f64) -> [f64; 2] {
    let ex = params.goal[0] - state.position[0];
    let ey = params.goal[1] - state.position[1];
    [
        (kp * ex - kd * state.velocity[0]) / params.u_max,
        (kp * ey - kd * state.velocity[1] + grav_comp * params.kappa_grav * params.g0)
            / params.u_max,
    ]
}
