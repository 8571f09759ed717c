//! Offline training environment.
//!
//! Transitions are simulated with a fitted [`LgbnModel`] instead of the real
//! service, so an agent can collect tens of thousands of steps without waiting
//! for scaling actions to settle.

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::lgbn::LgbnModel;
use crate::slo::{weighted_delta, Observation, Slo, Variable};

/// Width of [`EnvState::features`].
pub const FEATURES: usize = 5;

/// The five scaling actions, with a stable `0..5` encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Action {
    NoOp = 0,
    PixelUp = 1,
    PixelDown = 2,
    CoresUp = 3,
    CoresDown = 4,
}

impl Action {
    pub const COUNT: usize = 5;
    pub const ALL: [Action; 5] = [
        Action::NoOp,
        Action::PixelUp,
        Action::PixelDown,
        Action::CoresUp,
        Action::CoresDown,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::NoOp => "noop",
            Action::PixelUp => "pixel_up",
            Action::PixelDown => "pixel_down",
            Action::CoresUp => "cores_up",
            Action::CoresDown => "cores_down",
        }
    }
}

/// Static shape shared by every episode of a service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub pixel_bounds: (u32, u32),
    pub pixel_step: u32,
    pub cores_step: u32,
    /// Physical cores of the device; normalizes core counts.
    pub c_phy: u32,
    /// Normalizers for the thresholds in the state vector.
    pub t_pixel_max: f64,
    pub t_fps_max: f64,
    pub episode_len: usize,
}

impl EnvConfig {
    /// Pixel values reachable from `p_min` in steps of `pixel_step`, plus `p_max`.
    pub fn pixel_grid(&self) -> Vec<u32> {
        let (lo, hi) = self.pixel_bounds;
        let mut grid: Vec<u32> = (lo..=hi).step_by(self.pixel_step.max(1) as usize).collect();
        if grid.last() != Some(&hi) {
            grid.push(hi);
        }
        grid
    }

    fn clamp_pixel(&self, pixel: i64) -> u32 {
        let (lo, hi) = self.pixel_bounds;
        pixel.clamp(i64::from(lo), i64::from(hi)) as u32
    }
}

/// SLO thresholds and core budget active while training.
///
/// `core_budget` is the most cores the service can hold: its own allocation
/// plus whatever is unclaimed on the device. With `contended` set, episodes
/// also start with part of the remaining budget held by other tenants, so the
/// policy sees states where growing is impossible.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvPhase {
    pub t_pixel: f64,
    pub t_fps: f64,
    pub core_budget: u32,
    #[serde(default)]
    pub contended: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub pixel: u32,
    pub cores: u32,
    pub c_free: u32,
    pub t_pixel: f64,
    pub t_fps: f64,
    /// Throughput observed in this state; zero right after reset.
    pub fps: f64,
}

impl EnvState {
    /// Normalized view fed to the Q-network.
    pub fn features(&self, cfg: &EnvConfig) -> [f64; FEATURES] {
        let c_phy = f64::from(cfg.c_phy.max(1));
        [
            f64::from(self.pixel) / f64::from(cfg.pixel_bounds.1.max(1)),
            f64::from(self.cores) / c_phy,
            f64::from(self.c_free) / c_phy,
            self.t_pixel / cfg.t_pixel_max,
            self.t_fps / cfg.t_fps_max,
        ]
    }

    /// Configuration after `action`, clamped to the configured bounds and the
    /// core budget. Returns `(pixel, cores)`.
    pub fn apply(&self, action: Action, cfg: &EnvConfig) -> (u32, u32) {
        let pixel = i64::from(self.pixel);
        let step = i64::from(cfg.pixel_step);
        match action {
            Action::NoOp => (self.pixel, self.cores),
            Action::PixelUp => (cfg.clamp_pixel(pixel + step), self.cores),
            Action::PixelDown => (cfg.clamp_pixel(pixel - step), self.cores),
            Action::CoresUp => (
                self.pixel,
                self.cores + cfg.cores_step.min(self.c_free),
            ),
            Action::CoresDown => (
                self.pixel,
                self.cores.saturating_sub(cfg.cores_step).max(1),
            ),
        }
    }

    pub fn observation(&self) -> Observation {
        Observation {
            pixel: f64::from(self.pixel),
            cores: f64::from(self.cores),
            fps: self.fps,
        }
    }
}

/// Re-targets the threshold-carrying SLOs of `slos` to a phase.
pub fn slos_for_phase(slos: &[Slo], phase: &EnvPhase) -> Vec<Slo> {
    slos.iter()
        .map(|q| {
            let mut q = *q;
            match q.variable {
                Variable::Pixel => q.threshold = phase.t_pixel,
                Variable::Fps => q.threshold = phase.t_fps,
                Variable::Cores => {}
            }
            q
        })
        .collect()
}

/// A gym-style environment for one service during one phase.
#[derive(Debug, Clone)]
pub struct TrainEnv {
    pub config: EnvConfig,
    pub model: LgbnModel,
    pub slos: Vec<Slo>,
    pub phase: EnvPhase,
}

impl TrainEnv {
    /// `slos` are rebound to the phase thresholds.
    pub fn new(config: EnvConfig, model: LgbnModel, slos: &[Slo], phase: EnvPhase) -> Self {
        TrainEnv {
            slos: slos_for_phase(slos, &phase),
            config,
            model,
            phase,
        }
    }

    /// Uniform start: pixel from the step grid, cores from `[1, core_budget]`.
    pub fn reset<R: Rng + ?Sized>(&self, rng: &mut R) -> EnvState {
        let grid = self.config.pixel_grid();
        let pixel = grid[rng.random_range(0..grid.len())];
        let budget = self.phase.core_budget.max(1);
        let cores = rng.random_range(1..=budget);
        let c_free = if self.phase.contended {
            rng.random_range(0..=budget - cores)
        } else {
            budget - cores
        };
        EnvState {
            pixel,
            cores,
            c_free,
            t_pixel: self.phase.t_pixel,
            t_fps: self.phase.t_fps,
            fps: 0.0,
        }
    }

    /// Start state at a given configuration.
    pub fn state_at(&self, pixel: u32, cores: u32) -> EnvState {
        let budget = self.phase.core_budget.max(1);
        let cores = cores.clamp(1, budget);
        EnvState {
            pixel: self.config.clamp_pixel(i64::from(pixel)),
            cores,
            c_free: budget - cores,
            t_pixel: self.phase.t_pixel,
            t_fps: self.phase.t_fps,
            fps: 0.0,
        }
    }

    /// One transition. The reward is the negated weighted delta of the next
    /// state, so it is never positive.
    pub fn step<R: Rng + ?Sized>(&self, state: &EnvState, action: Action, rng: &mut R) -> (EnvState, f64) {
        let (pixel, cores) = state.apply(action, &self.config);
        let fps = self.model.sample_fps(pixel, cores, rng);
        let budget = state.cores + state.c_free;
        let next = EnvState {
            pixel,
            cores,
            c_free: budget - cores,
            t_pixel: state.t_pixel,
            t_fps: state.t_fps,
            fps,
        };
        (next, self.reward(&next))
    }

    pub fn reward(&self, state: &EnvState) -> f64 {
        // All SLO variables are present in an observation and fps >= 0, so
        // the delta cannot fail here.
        -weighted_delta(&self.slos, &state.observation()).unwrap_or(f64::INFINITY)
    }
}

/// Anything that picks actions in the training environment.
pub trait Policy {
    fn choose<R: Rng + ?Sized>(&mut self, env: &TrainEnv, state: &EnvState, rng: &mut R) -> Action;
}

impl<F> Policy for F
where
    F: FnMut(&EnvState) -> Action,
{
    fn choose<R: Rng + ?Sized>(&mut self, _env: &TrainEnv, state: &EnvState, _rng: &mut R) -> Action {
        self(state)
    }
}

/// Uniformly random actions.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomPolicy;

impl Policy for RandomPolicy {
    fn choose<R: Rng + ?Sized>(&mut self, _env: &TrainEnv, _state: &EnvState, rng: &mut R) -> Action {
        Action::ALL[rng.random_range(0..Action::COUNT)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: EnvState,
    pub action: Action,
    pub reward: f64,
    pub next_state: EnvState,
}

/// Rolls `policy` for `length` steps from a fresh reset.
pub fn run_episode<P: Policy, R: Rng + ?Sized>(
    policy: &mut P,
    env: &TrainEnv,
    length: usize,
    rng: &mut R,
) -> Vec<Transition> {
    let state = env.reset(rng);
    run_from(policy, env, state, length, rng)
}

/// Rolls `policy` for `length` steps from `state`.
pub fn run_from<P: Policy, R: Rng + ?Sized>(
    policy: &mut P,
    env: &TrainEnv,
    mut state: EnvState,
    length: usize,
    rng: &mut R,
) -> Vec<Transition> {
    let mut out = Vec::with_capacity(length);
    for _ in 0..length {
        let action = policy.choose(env, &state, rng);
        let (next, reward) = env.step(&state, action, rng);
        out.push(Transition {
            state,
            action,
            reward,
            next_state: next,
        });
        state = next;
    }
    out
}
