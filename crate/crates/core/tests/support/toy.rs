#![allow(dead_code)]

// Deterministic miniature environment and exact dynamic-programming oracles.

use std::collections::BTreeMap;

use mdscale_core::env::{Action, EnvConfig, EnvPhase, EnvState, Policy, TrainEnv};
use mdscale_core::lgbn::LgbnModel;
use mdscale_core::seeded_rng;
use mdscale_core::slo::cv_service_slos;

pub const HORIZON: usize = 10;

/// Five pixel values, one to four cores, no noise.
pub fn toy_env() -> TrainEnv {
    let config = EnvConfig {
        pixel_bounds: (100, 500),
        pixel_step: 100,
        cores_step: 1,
        c_phy: 4,
        t_pixel_max: 500.0,
        t_fps_max: 20.0,
        episode_len: HORIZON,
    };
    let phase = EnvPhase {
        t_pixel: 300.0,
        t_fps: 20.0,
        core_budget: 4,
        contended: false,
    };
    let model = LgbnModel::from_coefficients(10.0, 5.0, -0.02, 0.0);
    TrainEnv::new(config, model, &cv_service_slos(300.0, 20.0).unwrap(), phase)
}

pub fn states(env: &TrainEnv) -> Vec<(u32, u32)> {
    let budget = env.phase.core_budget;
    env.config
        .pixel_grid()
        .into_iter()
        .flat_map(|p| (1..=budget).map(move |c| (p, c)))
        .collect()
}

/// Successor configuration and reward; exact because sigma is zero.
pub fn transition(env: &TrainEnv, s: (u32, u32), a: Action) -> ((u32, u32), f64) {
    let state = env.state_at(s.0, s.1);
    let (next, r) = env.step(&state, a, &mut seeded_rng(0));
    ((next.pixel, next.cores), r)
}

/// Best undiscounted `horizon`-step return from every start configuration.
pub fn optimal_returns(env: &TrainEnv, horizon: usize) -> BTreeMap<(u32, u32), f64> {
    let all = states(env);
    let mut v: BTreeMap<(u32, u32), f64> = all.iter().map(|&s| (s, 0.0)).collect();
    for _ in 0..horizon {
        let prev = v.clone();
        for &s in &all {
            let best = Action::ALL
                .iter()
                .map(|&a| {
                    let (n, r) = transition(env, s, a);
                    r + prev[&n]
                })
                .fold(f64::NEG_INFINITY, f64::max);
            v.insert(s, best);
        }
    }
    v
}

/// Infinite-horizon discounted optimal action values by value iteration.
pub fn optimal_q(env: &TrainEnv, gamma: f64) -> BTreeMap<(u32, u32), [f64; Action::COUNT]> {
    let all = states(env);
    let mut v: BTreeMap<(u32, u32), f64> = all.iter().map(|&s| (s, 0.0)).collect();
    for _ in 0..2000 {
        let prev = v.clone();
        for &s in &all {
            let best = Action::ALL
                .iter()
                .map(|&a| {
                    let (n, r) = transition(env, s, a);
                    r + gamma * prev[&n]
                })
                .fold(f64::NEG_INFINITY, f64::max);
            v.insert(s, best);
        }
    }
    all.iter()
        .map(|&s| {
            let mut q = [0.0; Action::COUNT];
            for a in Action::ALL {
                let (n, r) = transition(env, s, a);
                q[a.index()] = r + gamma * v[&n];
            }
            (s, q)
        })
        .collect()
}

/// Undiscounted return of `policy` from `start`.
pub fn rollout<P: Policy>(env: &TrainEnv, policy: &mut P, start: (u32, u32), horizon: usize) -> f64 {
    let mut rng = seeded_rng(0);
    let mut s: EnvState = env.state_at(start.0, start.1);
    let mut total = 0.0;
    for _ in 0..horizon {
        let a = policy.choose(env, &s, &mut rng);
        let (n, r) = env.step(&s, a, &mut rng);
        total += r;
        s = n;
    }
    total
}

/// Summed returns of `policy` and of the optimum over all start states.
pub fn return_gap<P: Policy>(env: &TrainEnv, policy: &mut P) -> (f64, f64) {
    let opt = optimal_returns(env, HORIZON);
    let mut got = 0.0;
    let mut best = 0.0;
    for (&s, &v) in &opt {
        got += rollout(env, policy, s, HORIZON);
        best += v;
    }
    (got, best)
}
