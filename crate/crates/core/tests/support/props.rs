#![allow(dead_code)]

// Randomized invariant checks. Each check runs `cases` generated inputs from a
// fixed-seed generator and reports the first counterexample as text.

use std::collections::BTreeMap;

use mdscale_core::agents::{gso_evaluate, vpa_step, GsoView, Lsa};
use mdscale_core::dqn::{QPolicy, TrainConfig};
use mdscale_core::env::{Action, EnvConfig, EnvPhase, EnvState, TrainEnv, FEATURES};
use mdscale_core::lgbn::{exclude_settling, LgbnModel, MetricSnapshot};
use mdscale_core::seeded_rng;
use mdscale_core::sim::{ChangeCause, GroundTruthModel, Rejection, Simulator};
use mdscale_core::slo::{
    cumulative_fulfillment, max_fulfillment, slo_fulfillment, weighted_delta, Observation, ServiceSpec,
    Slo, Variable,
};
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};

pub type Check = fn(u32) -> Result<(), String>;

/// Every check with a short name, in a stable order.
pub fn all() -> Vec<(&'static str, Check)> {
    vec![
        ("phi monotonicity", phi_monotone as Check),
        ("delta non-negative, zero iff exact", delta_zero_iff_exact),
        ("phi_sigma bound", phi_sigma_bound),
        ("weight scaling", weight_scaling),
        ("action clamping and env conservation", env_clamping),
        ("pixel up/down inverse", pixel_inverse),
        ("env determinism without noise", env_determinism),
        ("expect_fps linearity", expect_linear),
        ("exclude_settling subsequence and idempotence", exclude_settling_props),
        ("core conservation", core_conservation),
        ("settling fidelity", settling_fidelity),
        ("argmax bias invariance", argmax_bias_invariance),
        ("gso antisymmetry", gso_antisymmetry),
        ("vpa single-core steps", vpa_steps),
        ("lsa stays within grant", lsa_within_grant),
    ]
}

fn run<S>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String>
where
    S: Strategy,
{
    let config = Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

fn table_one(t_pixel: f64, t_cores: f64, t_fps: f64, w: [f64; 3]) -> Vec<Slo> {
    vec![
        Slo::greater(Variable::Pixel, t_pixel, w[0]).unwrap(),
        Slo::less(Variable::Cores, t_cores, w[1]).unwrap(),
        Slo::greater(Variable::Fps, t_fps, w[2]).unwrap(),
    ]
}

fn slo_set() -> impl Strategy<Value = Vec<Slo>> + Clone {
    (1.0..3000.0f64, 1.0..20.0f64, 1.0..60.0f64, [0.01..3.0f64, 0.01..3.0f64, 0.01..3.0f64])
        .prop_map(|(p, c, f, w)| table_one(p, c, f, w))
}

fn metrics() -> impl Strategy<Value = Observation> {
    (0.0..4000.0f64, 0.0..20.0f64, 0.0..80.0f64).prop_map(|(pixel, cores, fps)| Observation { pixel, cores, fps })
}

pub fn phi_monotone(cases: u32) -> Result<(), String> {
    let s = (1e-3..1e4f64, 0.01..5.0f64, 0.0..1e5f64, 0.0..1e5f64).prop_filter("distinct", |t| t.2 != t.3);
    run(cases, s, |(t, w, a, b)| {
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let gt = Slo::greater(Variable::Fps, t, w).unwrap();
        let lt = Slo::less(Variable::Cores, t, w).unwrap();
        prop_assert!(slo_fulfillment(&gt, lo).unwrap() < slo_fulfillment(&gt, hi).unwrap());
        prop_assert!(slo_fulfillment(&lt, lo).unwrap() > slo_fulfillment(&lt, hi).unwrap());
        Ok(())
    })
}

pub fn delta_zero_iff_exact(cases: u32) -> Result<(), String> {
    let s = (slo_set(), metrics(), [any::<bool>(), any::<bool>(), any::<bool>()]);
    run(cases, s, |(slos, mut m, exact)| {
        // Optimal points: m = t for ">" and m = 0 for "<".
        if exact[0] {
            m.pixel = slos[0].threshold;
        }
        if exact[1] {
            m.cores = 0.0;
        }
        if exact[2] {
            m.fps = slos[2].threshold;
        }
        let d = weighted_delta(&slos, &m).unwrap();
        prop_assert!(d >= 0.0);
        let all_one = slos.iter().all(|q| {
            let v = match q.variable {
                Variable::Pixel => m.pixel,
                Variable::Cores => m.cores,
                Variable::Fps => m.fps,
            };
            slo_fulfillment(q, v).unwrap() == 1.0
        });
        prop_assert_eq!(d == 0.0, all_one);
        if exact.iter().all(|&e| e) {
            prop_assert_eq!(d, 0.0);
        }
        Ok(())
    })
}

pub fn phi_sigma_bound(cases: u32) -> Result<(), String> {
    run(cases, (slo_set(), metrics()), |(slos, m)| {
        let phi = cumulative_fulfillment(&slos, &m).unwrap();
        let bound = max_fulfillment(&slos);
        prop_assert!(phi <= bound);
        let each = [
            slo_fulfillment(&slos[0], m.pixel).unwrap(),
            slo_fulfillment(&slos[1], m.cores).unwrap(),
            slo_fulfillment(&slos[2], m.fps).unwrap(),
        ];
        prop_assert_eq!(phi == bound, each.iter().all(|&f| f >= 1.0));
        Ok(())
    })
}

pub fn weight_scaling(cases: u32) -> Result<(), String> {
    run(cases, (slo_set(), metrics(), 0.01..100.0f64), |(slos, m, k)| {
        let scaled: Vec<Slo> = slos
            .iter()
            .map(|q| Slo::new(q.variable, q.relation, q.threshold, q.weight * k).unwrap())
            .collect();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs().max(1.0);
        let d = weighted_delta(&slos, &m).unwrap();
        let f = cumulative_fulfillment(&slos, &m).unwrap();
        prop_assert!(close(weighted_delta(&scaled, &m).unwrap(), k * d));
        prop_assert!(close(cumulative_fulfillment(&scaled, &m).unwrap(), k * f));
        Ok(())
    })
}

#[derive(Debug, Clone)]
struct EnvCase {
    lo: u32,
    span: u32,
    pixel_step: u32,
    cores_step: u32,
    c_phy: u32,
    budget: u32,
    contended: bool,
    sigma: f64,
    seed: u64,
}

fn env_case() -> impl Strategy<Value = EnvCase> {
    (1u32..500, 0u32..3000, 1u32..400, 1u32..4, 1u32..16, any::<bool>(), 0.0..3.0f64, any::<u64>())
        .prop_flat_map(|(lo, span, ps, cs, c_phy, contended, sigma, seed)| {
            (1..=c_phy).prop_map(move |budget| EnvCase {
                lo,
                span,
                pixel_step: ps,
                cores_step: cs,
                c_phy,
                budget,
                contended,
                sigma,
                seed,
            })
        })
}

fn build_env(c: &EnvCase) -> TrainEnv {
    let config = EnvConfig {
        pixel_bounds: (c.lo, c.lo + c.span),
        pixel_step: c.pixel_step,
        cores_step: c.cores_step,
        c_phy: c.c_phy,
        t_pixel_max: 2000.0,
        t_fps_max: 40.0,
        episode_len: 10,
    };
    let phase = EnvPhase {
        t_pixel: 800.0,
        t_fps: 30.0,
        core_budget: c.budget,
        contended: c.contended,
    };
    let model = LgbnModel::from_coefficients(5.0, 6.0, -0.01, c.sigma);
    TrainEnv::new(config, model, &table_one(800.0, 10.0, 30.0, [0.8, 0.4, 1.2]), phase)
}

pub fn env_clamping(cases: u32) -> Result<(), String> {
    run(cases, (env_case(), prop::collection::vec(0usize..5, 1..30)), |(c, actions)| {
        let env = build_env(&c);
        let mut rng = seeded_rng(c.seed);
        let mut s = env.reset(&mut rng);
        let (lo, hi) = env.config.pixel_bounds;
        let budget = s.cores + s.c_free;
        prop_assert!(budget <= c.c_phy);
        for a in actions {
            let (n, r) = env.step(&s, Action::ALL[a], &mut rng);
            prop_assert!(lo <= n.pixel && n.pixel <= hi);
            prop_assert!(n.cores >= 1);
            prop_assert_eq!(n.cores + n.c_free, budget);
            prop_assert!(n.cores + n.c_free <= c.c_phy);
            prop_assert!(r <= 0.0);
            s = n;
        }
        Ok(())
    })
}

pub fn pixel_inverse(cases: u32) -> Result<(), String> {
    run(cases, (env_case(), any::<u32>()), |(c, pick)| {
        let env = build_env(&c);
        let grid = env.config.pixel_grid();
        let pixel = grid[pick as usize % grid.len()];
        let s = env.state_at(pixel, 1);
        let (up, _) = s.apply(Action::PixelUp, &env.config);
        let (lo, hi) = env.config.pixel_bounds;
        if pixel + c.pixel_step <= hi {
            let moved = EnvState { pixel: up, ..s };
            prop_assert_eq!(moved.apply(Action::PixelDown, &env.config).0, pixel);
        }
        if pixel >= lo + c.pixel_step {
            let (down, _) = s.apply(Action::PixelDown, &env.config);
            let moved = EnvState { pixel: down, ..s };
            prop_assert_eq!(moved.apply(Action::PixelUp, &env.config).0, pixel);
        }
        Ok(())
    })
}

pub fn env_determinism(cases: u32) -> Result<(), String> {
    run(cases, (env_case(), prop::collection::vec(0usize..5, 1..20), any::<u64>()), |(mut c, actions, other)| {
        c.sigma = 0.0;
        c.contended = false;
        let env = build_env(&c);
        let start = env.state_at(c.lo, 1);
        let (mut a, mut b) = (start, start);
        let (mut ra, mut rb) = (seeded_rng(c.seed), seeded_rng(other));
        for act in actions {
            let (na, xa) = env.step(&a, Action::ALL[act], &mut ra);
            let (nb, xb) = env.step(&b, Action::ALL[act], &mut rb);
            prop_assert_eq!(na, nb);
            prop_assert_eq!(xa, xb);
            a = na;
            b = nb;
        }
        Ok(())
    })
}

pub fn expect_linear(cases: u32) -> Result<(), String> {
    let s = (-50.0..50.0f64, -10.0..10.0f64, -0.1..0.1f64, 0u32..1000, 0u32..8, 0u32..1000, 0u32..8);
    run(cases, s, |(b0, bc, bp, p1, c1, p2, c2)| {
        let m = LgbnModel::from_coefficients(b0, bc, bp, 1.0);
        let lhs = m.expect_fps(p1, c1) + m.expect_fps(p2, c2) - m.expect_fps(0, 0);
        let rhs = m.expect_fps(p1 + p2, c1 + c2);
        prop_assert!((lhs - rhs).abs() < 1e-9, "{} vs {}", lhs, rhs);
        Ok(())
    })
}

pub fn exclude_settling_props(cases: u32) -> Result<(), String> {
    let s = (
        prop::collection::btree_set(0u64..300, 0..120),
        prop::collection::btree_set(0u64..300, 0..15),
        0u64..10,
    );
    run(cases, s, |(ticks, actions, window)| {
        let snaps: Vec<MetricSnapshot> = ticks
            .iter()
            .map(|&tick| MetricSnapshot {
                service_id: "s".into(),
                tick,
                pixel: 100,
                cores: 1,
                fps: tick as f64,
            })
            .collect();
        let actions: Vec<u64> = actions.into_iter().collect();
        let once = exclude_settling(&snaps, &actions, window);
        let twice = exclude_settling(&once, &actions, window);
        prop_assert_eq!(&once, &twice);
        let mut it = snaps.iter();
        for kept in &once {
            prop_assert!(it.any(|s| s == kept), "not a subsequence");
            prop_assert!(!actions.iter().any(|&a| kept.tick > a && kept.tick <= a + window));
        }
        let dropped = snaps.len() - once.len();
        let expected = snaps
            .iter()
            .filter(|s| actions.iter().any(|&a| s.tick > a && s.tick <= a + window))
            .count();
        prop_assert_eq!(dropped, expected);
        Ok(())
    })
}

#[derive(Debug, Clone)]
enum Op {
    Scale(usize, u32, u32),
    Swap(usize, usize),
    Capacity(u32),
    Tick,
}

fn ops() -> impl Strategy<Value = Vec<Op>> {
    let op = prop_oneof![
        (0usize..3, 0u32..25, 0u32..12).prop_map(|(s, p, c)| Op::Scale(s, p * 100, c)),
        (0usize..3, 0usize..3).prop_map(|(a, b)| Op::Swap(a, b)),
        (1u32..13).prop_map(Op::Capacity),
        Just(Op::Tick),
        Just(Op::Tick),
    ];
    prop::collection::vec(op, 1..60)
}

const IDS: [&str; 3] = ["a", "b", "c"];

fn three_services(c_phy: u32, window: u64, seed: u64, truth: GroundTruthModel) -> Simulator {
    let mut sim = Simulator::new(c_phy, 0.5, window, seed).unwrap();
    for id in IDS {
        let spec = ServiceSpec {
            id: id.into(),
            slos: table_one(800.0, 10.0, 30.0, [0.8, 0.4, 1.2]),
            pixel_bounds: (100, 2000),
            pixel_step: 100,
            cores_step: 1,
        };
        sim.add_service(spec, truth, 800, 1).unwrap();
    }
    sim
}

fn allocation_consistent(sim: &Simulator) -> Result<(), TestCaseError> {
    let d = sim.device();
    let total: u32 = sim.services().iter().map(|s| s.state.cores).sum();
    prop_assert_eq!(total, d.allocated());
    prop_assert!(d.allocated() <= d.capacity());
    prop_assert!(d.capacity() <= d.c_phy());
    for s in sim.services() {
        prop_assert!(s.state.cores >= 1);
        prop_assert_eq!(d.allocation(s.id()), Some(s.state.cores));
    }
    Ok(())
}

pub fn core_conservation(cases: u32) -> Result<(), String> {
    run(cases, (3u32..13, ops(), any::<u64>()), |(c_phy, ops, seed)| {
        let mut sim = three_services(c_phy, 4, seed, GroundTruthModel::linear(5.0, 6.0, -0.01, 1.0));
        for op in ops {
            let before = sim.device().allocated();
            match op {
                Op::Scale(i, p, c) => {
                    let old = sim.service(IDS[i]).unwrap().state;
                    if sim.apply_scaling(IDS[i], p, c, ChangeCause::Agent).is_err() {
                        prop_assert_eq!(sim.service(IDS[i]).unwrap().state, old);
                        prop_assert_eq!(sim.device().allocated(), before);
                    }
                }
                Op::Swap(a, b) => {
                    let res = sim.swap_core(IDS[a], IDS[b]);
                    prop_assert_eq!(sim.device().allocated(), before);
                    if a == b {
                        prop_assert_eq!(res, Err(Rejection::SameService));
                    }
                }
                Op::Capacity(cap) => {
                    let _ = sim.set_capacity(cap.min(c_phy));
                }
                Op::Tick => {
                    sim.tick();
                }
            }
            allocation_consistent(&sim)?;
        }
        Ok(())
    })
}

pub fn settling_fidelity(cases: u32) -> Result<(), String> {
    let s = (
        0u64..8,
        prop::collection::vec((0u64..6, 1u32..21, 1u32..5), 1..25),
        any::<u64>(),
    );
    run(cases, s, |(window, requests, seed)| {
        // Distinct configurations give distinct noise-free throughput.
        let truth = GroundTruthModel::linear(1000.0, 7.0, 0.013, 0.0);
        let mut sim = three_services(12, window, seed, truth);
        let mut history: Vec<(u64, (u32, u32))> = Vec::new();
        let initial = (800u32, 1u32);
        for (gap, p, c) in requests {
            for _ in 0..gap {
                let now = sim.now();
                let snap = sim.tick().remove(0);
                let expected = history
                    .iter()
                    .rev()
                    .find(|(t, _)| *t + window <= now)
                    .map_or(initial, |(_, cfg)| *cfg);
                prop_assert_eq!(snap.fps, truth.mean_fps(expected.0, expected.1));
            }
            let now = sim.now();
            let target = (p * 100, c);
            if sim.apply_scaling("a", target.0, target.1, ChangeCause::Agent).is_ok() {
                let current = history.last().map_or(initial, |h| h.1);
                if current != target {
                    history.push((now, target));
                }
            }
        }
        Ok(())
    })
}

pub fn argmax_bias_invariance(cases: u32) -> Result<(), String> {
    let s = (any::<u64>(), prop::array::uniform5(-2.0..2.0f64), -50i32..50);
    run(cases, s, |(seed, state, shift)| {
        let mut rng = seeded_rng(seed);
        let mut policy = QPolicy::random(FEATURES, &[16, 16], &mut rng);
        let before = policy.best_action(&state).unwrap();
        let q = policy.predict_q(&state).unwrap();
        let last = policy.layers.last_mut().unwrap();
        for b in &mut last.biases {
            *b += f64::from(shift);
        }
        let shifted = policy.predict_q(&state).unwrap();
        // Rounding may merge near-ties; only clear winners must survive.
        let mut sorted = q;
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        if sorted[0] - sorted[1] > 1e-9 {
            prop_assert_eq!(policy.best_action(&state).unwrap(), before);
        }
        for i in 0..Action::COUNT {
            prop_assert!((shifted[i] - q[i] - f64::from(shift)).abs() < 1e-9);
        }
        Ok(())
    })
}

pub fn gso_antisymmetry(cases: u32) -> Result<(), String> {
    let model = (0.0..40.0f64, 0.1..10.0f64, -0.03..0.0f64)
        .prop_map(|(b0, bc, bp)| LgbnModel::from_coefficients(b0, bc, bp, 1.0));
    let side = (model, 1u32..21, 2u32..10, slo_set());
    let s = (side.clone(), side).prop_filter("fps stays non-negative", |((ma, pa, ca, _), (mb, pb, cb, _))| {
        ma.expect_fps(*pa * 100, *ca - 1) >= 0.0 && mb.expect_fps(*pb * 100, *cb - 1) >= 0.0
    });
    run(cases, s, |((ma, pa, ca, qa), (mb, pb, cb, qb))| {
        let views = [
            GsoView {
                id: "a",
                pixel: pa * 100,
                cores: ca,
                slos: &qa,
                model: &ma,
            },
            GsoView {
                id: "b",
                pixel: pb * 100,
                cores: cb,
                slos: &qb,
                model: &mb,
            },
        ];
        let props = gso_evaluate(&views);
        prop_assert_eq!(props.len(), 2);
        let both = props.iter().all(|p| p.estimated_gain > 1e-9);
        prop_assert!(!both, "{:?}", props);
        Ok(())
    })
}

pub fn vpa_steps(cases: u32) -> Result<(), String> {
    let s = (2u32..12, 1u32..6, 1.0..60.0f64, 0.0..5.0f64, 1u32..20, any::<u64>());
    run(cases, s, |(c_phy, start, t_fps, sigma, ticks, seed)| {
        let mut sim = Simulator::new(c_phy, 0.5, 4, seed).unwrap();
        let spec = ServiceSpec {
            id: "v".into(),
            slos: table_one(800.0, 10.0, t_fps, [0.8, 0.4, 1.2]),
            pixel_bounds: (100, 2000),
            pixel_step: 100,
            cores_step: 1,
        };
        sim.add_service(spec, GroundTruthModel::linear(0.0, 6.0, 0.0, sigma), 800, start.min(c_phy))
            .unwrap();
        for _ in 0..ticks {
            let before = sim.service("v").unwrap().state;
            vpa_step(&mut sim, "v");
            let after = sim.service("v").unwrap().state;
            prop_assert_eq!(after.pixel, before.pixel);
            prop_assert!(after.cores.abs_diff(before.cores) <= 1);
            prop_assert!(sim.device().allocated() <= c_phy);
            for _ in 0..5 {
                sim.tick();
            }
        }
        Ok(())
    })
}

pub fn lsa_within_grant(cases: u32) -> Result<(), String> {
    run(cases, (3u32..12, any::<u64>(), 1usize..40), |(c_phy, seed, steps)| {
        let mut sim = three_services(c_phy, 4, seed, GroundTruthModel::linear(5.0, 6.0, -0.01, 1.0));
        let mut rng = seeded_rng(seed);
        let config = EnvConfig {
            pixel_bounds: (100, 2000),
            pixel_step: 100,
            cores_step: 1,
            c_phy,
            t_pixel_max: 2000.0,
            t_fps_max: 40.0,
            episode_len: 10,
        };
        let mut agents: BTreeMap<&str, Lsa> = BTreeMap::new();
        for id in IDS {
            let mut lsa = Lsa::new(id, config.clone(), TrainConfig::default(), 4, 10);
            lsa.install(
                LgbnModel::from_coefficients(5.0, 6.0, -0.01, 1.0),
                Some(QPolicy::random(FEATURES, &[8], &mut rng)),
            );
            agents.insert(id, lsa);
        }
        for k in 0..steps {
            let id = IDS[k % 3];
            agents[id].step(&mut sim);
            allocation_consistent(&sim)?;
            sim.tick();
        }
        Ok(())
    })
}
