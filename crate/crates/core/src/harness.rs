//! Scenario runner: wires services, agents and the optimizer to the
//! simulator, runs phased experiments and aggregates the outcome.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{gso_step, vpa_step, AgentKind, DecisionRecord, Lsa, SwapProposal};
use crate::dqn::{QPolicy, TrainConfig};
use crate::env::{Action, EnvConfig, EnvPhase};
use crate::lgbn::{LgbnModel, MetricSnapshot};
use crate::sim::{ChangeCause, GroundTruthModel, SimError, Simulator};
use crate::slo::{cumulative_fulfillment, weighted_delta, Relation, ServiceSpec, Slo, Variable};
use crate::{seeded_rng, SimRng};

/// An SLO whose threshold may be left to the phases.
///
/// Pixel and fps thresholds missing here must come from every phase; a
/// missing cores threshold defaults to the device's physical cores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SloTemplate {
    pub variable: Variable,
    pub relation: Relation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub id: String,
    pub agent: AgentKind,
    pub pixel_bounds: (u32, u32),
    pub pixel_step: u32,
    pub cores_step: u32,
    pub initial_pixel: u32,
    pub initial_cores: u32,
    /// Overrides the scenario decision interval for this service's agent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision_interval: Option<u64>,
    pub slos: Vec<SloTemplate>,
    pub truth: GroundTruthModel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_pixel: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_fps: Option<f64>,
    /// Cores usable during the phase; the device's physical cores if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_cores: Option<u32>,
    pub duration: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrainSchedule {
    /// Before the first decision of every phase.
    PhaseStart,
    /// Whenever `retrain_interval` ticks passed since the last retrain.
    Interval,
}

/// Exploration before the agents take over, so the first model fit sees
/// varied configurations. Every `reconfigure_every` ticks each service gets
/// a random configuration; the initial one is restored afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WarmupConfig {
    pub ticks: u64,
    #[serde(default)]
    pub reconfigure_every: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GsoConfig {
    pub enabled: bool,
    pub min_gain: f64,
}

impl Default for GsoConfig {
    fn default() -> Self {
        GsoConfig {
            enabled: false,
            min_gain: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub c_phy: u32,
    pub tick_seconds: f64,
    pub settling_window: u64,
    pub decision_interval: u64,
    pub warmup: WarmupConfig,
    pub retrain: RetrainSchedule,
    #[serde(default)]
    pub retrain_interval: u64,
    #[serde(default)]
    pub gso: GsoConfig,
    pub seeds: Vec<u64>,
    /// Must equal the number of seeds when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repetitions: Option<usize>,
    #[serde(default)]
    pub train: TrainConfig,
    pub episode_len: usize,
    pub services: Vec<ServiceConfig>,
    pub phases: Vec<PhaseConfig>,
}

/// A rejected configuration, naming the offending field.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{field}: {message}")]
pub struct ConfigError {
    pub field: String,
    pub message: String,
}

fn bad(field: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError {
        field: field.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

impl ScenarioConfig {
    pub fn repetitions(&self) -> usize {
        self.seeds.len()
    }

    pub fn total_ticks(&self) -> u64 {
        self.warmup.ticks + self.phases.iter().map(|p| p.duration).sum::<u64>()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.c_phy == 0 {
            return Err(bad("c_phy", "must be at least 1"));
        }
        if !(self.tick_seconds > 0.0) {
            return Err(bad("tick_seconds", "must be positive"));
        }
        if self.decision_interval == 0 {
            return Err(bad("decision_interval", "must be at least 1"));
        }
        if self.settling_window >= self.decision_interval {
            return Err(bad(
                "settling_window",
                "must be shorter than the decision interval",
            ));
        }
        if self.seeds.is_empty() {
            return Err(bad("seeds", "need at least one seed"));
        }
        if let Some(r) = self.repetitions {
            if r != self.seeds.len() {
                return Err(bad(
                    "repetitions",
                    format!("{} repetitions but {} seeds", r, self.seeds.len()),
                ));
            }
        }
        if self.retrain == RetrainSchedule::Interval && self.retrain_interval == 0 {
            return Err(bad("retrain_interval", "must be at least 1"));
        }
        if !(self.gso.min_gain >= 0.0) {
            return Err(bad("gso.min_gain", "must be non-negative"));
        }
        if self.episode_len == 0 {
            return Err(bad("episode_len", "must be at least 1"));
        }
        self.train
            .validate()
            .map_err(|e| bad("train", e.to_string()))?;
        if self.services.is_empty() {
            return Err(bad("services", "need at least one service"));
        }
        if self.phases.is_empty() {
            return Err(bad("phases", "need at least one phase"));
        }
        let n = self.services.len() as u32;
        let mut ids = BTreeSet::new();
        let mut initial = 0u32;
        for (i, s) in self.services.iter().enumerate() {
            let f = |name: &str| format!("services[{i}].{name}");
            if s.id.is_empty() || !ids.insert(s.id.as_str()) {
                return Err(bad(f("id"), "must be non-empty and unique"));
            }
            let (lo, hi) = s.pixel_bounds;
            if lo == 0 || lo > hi {
                return Err(bad(f("pixel_bounds"), "need 0 < p_min <= p_max"));
            }
            if s.pixel_step == 0 {
                return Err(bad(f("pixel_step"), "must be at least 1"));
            }
            if s.cores_step == 0 {
                return Err(bad(f("cores_step"), "must be at least 1"));
            }
            if s.initial_pixel < lo || s.initial_pixel > hi {
                return Err(bad(f("initial_pixel"), "outside pixel_bounds"));
            }
            if s.initial_cores == 0 {
                return Err(bad(f("initial_cores"), "must be at least 1"));
            }
            if s.decision_interval == Some(0) {
                return Err(bad(f("decision_interval"), "must be at least 1"));
            }
            initial += s.initial_cores;
            let mut vars = BTreeSet::new();
            for (j, q) in s.slos.iter().enumerate() {
                let g = |name: &str| format!("services[{i}].slos[{j}].{name}");
                if !vars.insert(q.variable) {
                    return Err(bad(g("variable"), "duplicate SLO variable"));
                }
                if !(q.weight > 0.0) {
                    return Err(bad(g("weight"), "must be positive"));
                }
                if let Some(t) = q.threshold {
                    if !(t > 0.0) {
                        return Err(bad(g("threshold"), "must be positive"));
                    }
                }
            }
            for (k, phase) in self.phases.iter().enumerate() {
                self.resolve_slos(s, phase).map_err(|(j, msg)| {
                    bad(format!("services[{i}].slos[{j}].threshold"), format!("phase {k}: {msg}"))
                })?;
            }
        }
        if initial > self.c_phy {
            return Err(bad(
                "services",
                format!("initial cores {} exceed c_phy {}", initial, self.c_phy),
            ));
        }
        for (k, p) in self.phases.iter().enumerate() {
            let f = |name: &str| format!("phases[{k}].{name}");
            if p.duration == 0 {
                return Err(bad(f("duration"), "must be at least 1"));
            }
            for (name, t) in [("t_pixel", p.t_pixel), ("t_fps", p.t_fps)] {
                if let Some(t) = t {
                    if !(t > 0.0) {
                        return Err(bad(f(name), "must be positive"));
                    }
                }
            }
            if let Some(m) = p.max_cores {
                if m > self.c_phy {
                    return Err(bad(f("max_cores"), "exceeds c_phy"));
                }
                if m < n {
                    return Err(bad(f("max_cores"), "every service needs a core"));
                }
            }
        }
        Ok(())
    }

    /// Concrete SLOs of `service` during `phase`. The error carries the
    /// index of the SLO without a threshold.
    fn resolve_slos(&self, service: &ServiceConfig, phase: &PhaseConfig) -> Result<Vec<Slo>, (usize, String)> {
        service
            .slos
            .iter()
            .enumerate()
            .map(|(j, q)| {
                let from_phase = match q.variable {
                    Variable::Pixel => phase.t_pixel,
                    Variable::Fps => phase.t_fps,
                    Variable::Cores => None,
                };
                let threshold = from_phase
                    .or(q.threshold)
                    .or_else(|| (q.variable == Variable::Cores).then_some(f64::from(self.c_phy)))
                    .ok_or((j, String::from("no threshold given")))?;
                Slo::new(q.variable, q.relation, threshold, q.weight).map_err(|e| (j, e.to_string()))
            })
            .collect()
    }

    /// Concrete SLOs of service `i` in phase `k`.
    pub fn slos(&self, i: usize, k: usize) -> Vec<Slo> {
        self.resolve_slos(&self.services[i], &self.phases[k])
            .expect("validated configuration")
    }

    pub fn phase_capacity(&self, k: usize) -> u32 {
        self.phases[k].max_cores.unwrap_or(self.c_phy)
    }

    fn env_config(&self, s: &ServiceConfig) -> EnvConfig {
        let pick = |var: Variable, fallback: f64| {
            let phases = self.phases.iter().filter_map(|p| match var {
                Variable::Pixel => p.t_pixel,
                Variable::Fps => p.t_fps,
                Variable::Cores => None,
            });
            let own = s.slos.iter().filter(|q| q.variable == var).filter_map(|q| q.threshold);
            phases.chain(own).fold(0.0f64, f64::max).max(fallback)
        };
        EnvConfig {
            pixel_bounds: s.pixel_bounds,
            pixel_step: s.pixel_step,
            cores_step: s.cores_step,
            c_phy: self.c_phy,
            t_pixel_max: pick(Variable::Pixel, f64::from(s.pixel_bounds.1)),
            t_fps_max: pick(Variable::Fps, 1.0),
            episode_len: self.episode_len,
        }
    }

    /// Copy with every service supervised by `agent`.
    pub fn with_agent(&self, agent: AgentKind) -> Self {
        let mut c = self.clone();
        for s in &mut c.services {
            s.agent = agent;
        }
        c
    }

    pub fn with_gso(&self, enabled: bool) -> Self {
        let mut c = self.clone();
        c.gso.enabled = enabled;
        c
    }

    /// Copy running only the given seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seeds = alloc::vec![seed];
        c.repetitions = None;
        c
    }
}

/// Mean fulfillment of one service over one decision interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub phase: usize,
    pub iteration: usize,
    pub tick_start: u64,
    pub tick_end: u64,
    pub service: String,
    pub agent: AgentKind,
    pub phi_sigma: f64,
    pub delta: f64,
    pub mean_fps: f64,
    pub pixel: u32,
    pub cores: u32,
    /// No free cores at the end of the interval.
    pub exhausted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapEvent {
    pub tick: u64,
    pub from: String,
    pub to: String,
    pub estimated_gain: f64,
    /// Settled global fulfillment of the interval after the swap minus that
    /// of the interval before it.
    pub realized_gain: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainEvent {
    pub tick: u64,
    pub service: String,
    pub rows: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TickRecord {
    pub tick: u64,
    pub allocated: u32,
    pub capacity: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseMean {
    pub phase: usize,
    pub service: String,
    pub agent: AgentKind,
    pub mean: f64,
}

/// Everything one repetition produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: String,
    pub rep: usize,
    pub seed: u64,
    pub config: ScenarioConfig,
    pub iterations: Vec<IterationRecord>,
    pub swaps: Vec<SwapEvent>,
    pub decisions: Vec<DecisionRecord>,
    pub retrains: Vec<RetrainEvent>,
    pub ticks: Vec<TickRecord>,
    pub metrics: Vec<MetricSnapshot>,
    /// Decisions per action, indexed like [`Action::ALL`].
    pub action_histogram: BTreeMap<String, [u64; Action::COUNT]>,
    /// First decision point after warm-up with no free cores left.
    pub exhaustion_tick: Option<u64>,
    pub models: BTreeMap<String, LgbnModel>,
    pub policies: BTreeMap<String, QPolicy>,
}

impl RunReport {
    /// Mean per-iteration fulfillment per (phase, service).
    pub fn phase_means(&self) -> Vec<PhaseMean> {
        let mut acc: BTreeMap<(usize, &str), (AgentKind, f64, usize)> = BTreeMap::new();
        for r in &self.iterations {
            let e = acc.entry((r.phase, r.service.as_str())).or_insert((r.agent, 0.0, 0));
            e.1 += r.phi_sigma;
            e.2 += 1;
        }
        acc.into_iter()
            .map(|((phase, service), (agent, sum, n))| PhaseMean {
                phase,
                service: service.into(),
                agent,
                mean: sum / n as f64,
            })
            .collect()
    }

    pub fn phase_mean(&self, phase: usize, service: &str) -> Option<f64> {
        self.phase_means()
            .into_iter()
            .find(|m| m.phase == phase && m.service == service)
            .map(|m| m.mean)
    }

    /// Summed fulfillment of all services per (phase, iteration), in order.
    pub fn global_series(&self) -> Vec<(usize, usize, u64, f64)> {
        let mut acc: BTreeMap<(usize, usize), (u64, f64)> = BTreeMap::new();
        for r in &self.iterations {
            let e = acc.entry((r.phase, r.iteration)).or_insert((r.tick_start, 0.0));
            e.1 += r.phi_sigma;
        }
        acc.into_iter().map(|((p, i), (t, v))| (p, i, t, v)).collect()
    }

    /// Mean global fulfillment over the intervals starting at or after `tick`.
    pub fn mean_global_from(&self, tick: u64) -> Option<f64> {
        let xs: Vec<f64> = self
            .global_series()
            .into_iter()
            .filter(|&(_, _, t, _)| t >= tick)
            .map(|(_, _, _, v)| v)
            .collect();
        (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
    }

    pub fn iteration_rows(&self) -> Vec<IterationRow> {
        self.iterations
            .iter()
            .map(|r| IterationRow {
                rep: self.rep,
                phase: r.phase,
                iteration: r.iteration,
                service: r.service.clone(),
                agent: r.agent,
                phi_sigma: r.phi_sigma,
            })
            .collect()
    }
}

#[derive(Default)]
struct Accum {
    phi: f64,
    delta: f64,
    fps: f64,
    n: usize,
    settled_delta: f64,
    settled_n: usize,
}

struct OpenIteration {
    phase: usize,
    iteration: usize,
    tick_start: u64,
    per_service: Vec<Accum>,
    /// Global fulfillment per tick in which every service was settled.
    settled_global: Vec<f64>,
    decisions: Vec<usize>,
    swap: Option<usize>,
}

struct Runner<'a> {
    cfg: &'a ScenarioConfig,
    sim: Simulator,
    lsas: BTreeMap<String, Lsa>,
    rng: SimRng,
    report: RunReport,
    prev_settled_global: Option<f64>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

impl<'a> Runner<'a> {
    fn new(cfg: &'a ScenarioConfig, rep: usize, seed: u64) -> Result<Self, ScenarioError> {
        let mut sim = Simulator::new(cfg.c_phy, cfg.tick_seconds, cfg.settling_window, seed)?;
        let mut lsas = BTreeMap::new();
        for (i, s) in cfg.services.iter().enumerate() {
            let spec = ServiceSpec {
                id: s.id.clone(),
                slos: cfg.slos(i, 0),
                pixel_bounds: s.pixel_bounds,
                pixel_step: s.pixel_step,
                cores_step: s.cores_step,
            };
            sim.add_service(spec, s.truth, s.initial_pixel, s.initial_cores)?;
            if s.agent == AgentKind::Lsa {
                let mut train = cfg.train.clone();
                train.seed = train
                    .seed
                    .wrapping_add(seed.wrapping_mul(1_000_003))
                    .wrapping_add(i as u64 * 7919);
                let lsa = Lsa::new(
                    s.id.clone(),
                    cfg.env_config(s),
                    train,
                    cfg.settling_window,
                    s.decision_interval.unwrap_or(cfg.decision_interval),
                );
                lsas.insert(s.id.clone(), lsa);
            }
        }
        let report = RunReport {
            scenario: cfg.name.clone(),
            rep,
            seed,
            config: cfg.clone(),
            iterations: Vec::new(),
            swaps: Vec::new(),
            decisions: Vec::new(),
            retrains: Vec::new(),
            ticks: Vec::new(),
            metrics: Vec::new(),
            action_histogram: BTreeMap::new(),
            exhaustion_tick: None,
            models: BTreeMap::new(),
            policies: BTreeMap::new(),
        };
        Ok(Runner {
            cfg,
            sim,
            lsas,
            rng: seeded_rng(seed ^ 0x5EED_CA11_B7A7_E000),
            report,
            prev_settled_global: None,
        })
    }

    fn advance(&mut self) -> Vec<MetricSnapshot> {
        let snaps = self.sim.tick();
        self.report.ticks.push(TickRecord {
            tick: self.sim.now(),
            allocated: self.sim.device().allocated(),
            capacity: self.sim.device().capacity(),
        });
        snaps
    }

    /// Moves every service to `targets` (pixel, cores), shrinking first so
    /// growth always fits.
    fn reconfigure_all(&mut self, targets: &[(u32, u32)]) {
        let ids: Vec<String> = self.sim.services().iter().map(|s| s.id().into()).collect();
        for pass in 0..2 {
            for (id, &(pixel, cores)) in ids.iter().zip(targets) {
                let current = self.sim.service(id).map_or(0, |s| s.state.cores);
                let shrinking = cores <= current;
                if (pass == 0) == shrinking {
                    self.sim
                        .apply_scaling(id, pixel, cores, ChangeCause::Harness)
                        .expect("targets fit the device");
                }
            }
        }
    }

    fn calibrate(&mut self) {
        let n = self.sim.services().len() as u32;
        let cap = (self.sim.device().capacity() / n).max(1);
        let mut targets = Vec::new();
        for svc in self.sim.services() {
            let (lo, hi) = svc.spec.pixel_bounds;
            let steps = (hi - lo) / svc.spec.pixel_step;
            let draw = |rng: &mut SimRng| {
                let pixel = lo + rng.random_range(0..=steps) * svc.spec.pixel_step;
                (pixel, rng.random_range(1..=cap))
            };
            let mut t = draw(&mut self.rng);
            for _ in 0..16 {
                let fresh_pixel = steps == 0 || t.0 != svc.state.pixel;
                let fresh_cores = cap == 1 || t.1 != svc.state.cores;
                if fresh_pixel && fresh_cores {
                    break;
                }
                t = draw(&mut self.rng);
            }
            targets.push(t);
        }
        self.reconfigure_all(&targets);
    }

    fn warmup(&mut self) {
        let w = self.cfg.warmup;
        for t in 0..w.ticks {
            if w.reconfigure_every > 0 && t % w.reconfigure_every == 0 {
                self.calibrate();
            }
            self.advance();
        }
        if w.ticks > 0 && w.reconfigure_every > 0 {
            let initial: Vec<(u32, u32)> = self
                .sim
                .services()
                .iter()
                .map(|s| {
                    let c = self.cfg.services.iter().find(|c| c.id == s.id()).expect("configured");
                    (c.initial_pixel, c.initial_cores)
                })
                .collect();
            self.reconfigure_all(&initial);
        }
    }

    fn retrain(&mut self, id: &str) {
        let now = self.sim.now();
        let svc = self.sim.service(id).expect("registered service");
        let capacity = self.sim.device().capacity();
        let others = self.sim.services().len() as u32 - 1;
        let slos = svc.spec.slos.clone();
        let lsa = self.lsas.get_mut(id).expect("lsa exists");
        let threshold = |v: Variable, fallback: f64| {
            slos.iter().find(|q| q.variable == v).map_or(fallback, |q| q.threshold)
        };
        let phase = EnvPhase {
            t_pixel: threshold(Variable::Pixel, lsa.env_config.t_pixel_max),
            t_fps: threshold(Variable::Fps, lsa.env_config.t_fps_max),
            core_budget: capacity.saturating_sub(others).max(1),
            contended: others > 0,
        };
        let result = lsa.retrain(svc.metrics(), &svc.action_ticks(), &slos, phase, now);
        self.report.retrains.push(RetrainEvent {
            tick: now,
            service: id.into(),
            rows: svc.metrics().len(),
            error: result.err().map(|e| e.to_string()),
        });
    }

    fn start_phase(&mut self, k: usize) -> Result<(), ScenarioError> {
        self.sim.set_capacity(self.cfg.phase_capacity(k))?;
        for (i, s) in self.cfg.services.iter().enumerate() {
            let slos = self.cfg.slos(i, k);
            if let Some(svc) = self.sim.service_mut(&s.id) {
                svc.spec.slos = slos;
            }
            if s.agent == AgentKind::Vpa {
                // The baseline cannot scale pixel; it runs at the target.
                if let Some(t) = self.cfg.phases[k].t_pixel {
                    let svc = self.sim.service(&s.id).expect("registered");
                    let pixel = svc.spec.clamp_pixel(libm::round(t) as i64);
                    let cores = svc.state.cores;
                    self.sim
                        .apply_scaling(&s.id, pixel, cores, ChangeCause::Harness)
                        .expect("pixel within bounds");
                }
            }
        }
        if self.cfg.retrain == RetrainSchedule::PhaseStart {
            let ids: Vec<String> = self.lsas.keys().cloned().collect();
            for id in ids {
                self.retrain(&id);
            }
        }
        Ok(())
    }

    fn decide(&mut self, k: u64, open: &mut OpenIteration) {
        if self.cfg.retrain == RetrainSchedule::Interval {
            let now = self.sim.now();
            let due: Vec<String> = self
                .lsas
                .values()
                .filter(|l| l.last_retrain_tick().is_none_or(|t| now - t >= self.cfg.retrain_interval))
                .map(|l| l.service_id.clone())
                .collect();
            for id in due {
                self.retrain(&id);
            }
        }
        for s in &self.cfg.services {
            let interval = s.decision_interval.unwrap_or(self.cfg.decision_interval);
            if k % interval != 0 {
                continue;
            }
            let record = match s.agent {
                AgentKind::Lsa => self.lsas[&s.id].step(&mut self.sim),
                AgentKind::Vpa => vpa_step(&mut self.sim, &s.id),
                AgentKind::None => None,
            };
            if let Some(r) = record {
                let hist = self
                    .report
                    .action_histogram
                    .entry(r.service.clone())
                    .or_insert([0; Action::COUNT]);
                hist[r.action.index()] += 1;
                open.decisions.push(self.report.decisions.len());
                self.report.decisions.push(r);
            }
        }
        if self.cfg.gso.enabled {
            let models: BTreeMap<String, LgbnModel> = self
                .lsas
                .iter()
                .filter_map(|(id, l)| l.lgbn().map(|m| (id.clone(), m.clone())))
                .collect();
            if let Some(round) = gso_step(&mut self.sim, &models, self.cfg.gso.min_gain) {
                if let Some(SwapProposal {
                    from,
                    to,
                    estimated_gain,
                }) = round.executed
                {
                    open.swap = Some(self.report.swaps.len());
                    self.report.swaps.push(SwapEvent {
                        tick: round.tick,
                        from,
                        to,
                        estimated_gain,
                        realized_gain: None,
                    });
                }
            }
        }
        if self.report.exhaustion_tick.is_none() && self.sim.c_free() == 0 {
            self.report.exhaustion_tick = Some(self.sim.now());
        }
    }

    fn observe(&mut self, open: &mut OpenIteration, snaps: &[MetricSnapshot]) {
        let mut global = 0.0;
        let mut all_settled = true;
        for (svc, (acc, snap)) in self
            .sim
            .services()
            .iter()
            .zip(open.per_service.iter_mut().zip(snaps))
        {
            let obs = crate::slo::Observation {
                pixel: f64::from(snap.pixel),
                cores: f64::from(snap.cores),
                fps: snap.fps,
            };
            let phi = cumulative_fulfillment(&svc.spec.slos, &obs).unwrap_or(0.0);
            let delta = weighted_delta(&svc.spec.slos, &obs).unwrap_or(0.0);
            acc.phi += phi;
            acc.delta += delta;
            acc.fps += snap.fps;
            acc.n += 1;
            global += phi;
            if svc.pending.is_empty() {
                acc.settled_delta += delta;
                acc.settled_n += 1;
            } else {
                all_settled = false;
            }
        }
        if all_settled {
            open.settled_global.push(global);
        }
    }

    fn close(&mut self, open: OpenIteration) {
        let tick_end = self.sim.now();
        let exhausted = self.sim.c_free() == 0;
        for (svc, acc) in self.sim.services().iter().zip(&open.per_service) {
            let n = acc.n.max(1) as f64;
            let agent = self
                .cfg
                .services
                .iter()
                .find(|c| c.id == svc.id())
                .map_or(AgentKind::None, |c| c.agent);
            self.report.iterations.push(IterationRecord {
                phase: open.phase,
                iteration: open.iteration,
                tick_start: open.tick_start,
                tick_end,
                service: svc.id().into(),
                agent,
                phi_sigma: acc.phi / n,
                delta: acc.delta / n,
                mean_fps: acc.fps / n,
                pixel: svc.state.pixel,
                cores: svc.state.cores,
                exhausted,
            });
        }
        for &d in &open.decisions {
            let rec = &mut self.report.decisions[d];
            let idx = self.sim.services().iter().position(|s| s.id() == rec.service);
            if let Some(acc) = idx.map(|i| &open.per_service[i]) {
                if acc.settled_n > 0 {
                    rec.realized_delta = Some(acc.settled_delta / acc.settled_n as f64);
                }
            }
        }
        let settled = mean(&open.settled_global);
        if let Some(s) = open.swap {
            self.report.swaps[s].realized_gain = match (settled, self.prev_settled_global) {
                (Some(after), Some(before)) => Some(after - before),
                _ => None,
            };
        }
        self.prev_settled_global = settled;
    }

    fn run(mut self) -> Result<RunReport, ScenarioError> {
        self.warmup();
        let n = self.sim.services().len();
        for (k, phase) in self.cfg.phases.iter().enumerate() {
            self.start_phase(k)?;
            let mut open: Option<OpenIteration> = None;
            for t in 0..phase.duration {
                if t % self.cfg.decision_interval == 0 {
                    if let Some(o) = open.take() {
                        self.close(o);
                    }
                    let mut o = OpenIteration {
                        phase: k,
                        iteration: (t / self.cfg.decision_interval) as usize,
                        tick_start: self.sim.now(),
                        per_service: (0..n).map(|_| Accum::default()).collect(),
                        settled_global: Vec::new(),
                        decisions: Vec::new(),
                        swap: None,
                    };
                    self.decide(t, &mut o);
                    open = Some(o);
                }
                let snaps = self.advance();
                self.observe(open.as_mut().expect("opened at t = 0"), &snaps);
            }
            if let Some(o) = open.take() {
                self.close(o);
            }
        }
        for svc in self.sim.services() {
            self.report.metrics.extend_from_slice(svc.metrics());
        }
        self.report.metrics.sort_by_key(|s| s.tick);
        for (id, lsa) in &self.lsas {
            if let Some(m) = lsa.lgbn() {
                self.report.models.insert(id.clone(), m.clone());
            }
            if let Some(p) = lsa.policy() {
                self.report.policies.insert(id.clone(), p.clone());
            }
        }
        Ok(self.report)
    }
}

/// Runs one repetition with an explicit seed.
pub fn run_once(cfg: &ScenarioConfig, rep: usize, seed: u64) -> Result<RunReport, ScenarioError> {
    cfg.validate()?;
    Runner::new(cfg, rep, seed)?.run()
}

/// Runs every configured seed; one report per seed, in seed order.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<Vec<RunReport>, ScenarioError> {
    cfg.validate()?;
    cfg.seeds
        .iter()
        .enumerate()
        .map(|(rep, &seed)| Runner::new(cfg, rep, seed)?.run())
        .collect()
}

/// Single service under phased SLO and core-limit changes.
pub fn run_scenario1(cfg: &ScenarioConfig) -> Result<Vec<RunReport>, ScenarioError> {
    if cfg.services.len() != 1 {
        return Err(bad("services", "scenario 1 runs exactly one service").into());
    }
    run_scenario(cfg)
}

/// Several agent-supervised services sharing one device.
pub fn run_scenario2(cfg: &ScenarioConfig) -> Result<Vec<RunReport>, ScenarioError> {
    if cfg.services.len() < 2 {
        return Err(bad("services", "scenario 2 needs at least two services").into());
    }
    if cfg.services.iter().any(|s| s.agent != AgentKind::Lsa) {
        return Err(bad("services", "scenario 2 services are all agent-supervised").into());
    }
    run_scenario(cfg)
}

/// One per-iteration fulfillment value, the unit of the aggregate tables.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub rep: usize,
    pub phase: usize,
    pub iteration: usize,
    pub service: String,
    pub agent: AgentKind,
    pub phi_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub agent: AgentKind,
    pub service: String,
    pub phase: usize,
    pub iteration: usize,
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation across repetitions.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SummaryError {
    #[error("no rows to summarize")]
    Empty,
    #[error("repetition {rep} of {agent}/{service} has a different iteration layout")]
    Shape {
        agent: AgentKind,
        service: String,
        rep: usize,
    },
    #[error("duplicate row for repetition {rep}, phase {phase}, iteration {iteration}")]
    Duplicate {
        rep: usize,
        phase: usize,
        iteration: usize,
    },
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, libm::sqrt(var))
}

type Layout = BTreeMap<(usize, usize), f64>;

fn group(rows: &[IterationRow]) -> Result<BTreeMap<(AgentKind, String), BTreeMap<usize, Layout>>, SummaryError> {
    if rows.is_empty() {
        return Err(SummaryError::Empty);
    }
    let mut groups: BTreeMap<(AgentKind, String), BTreeMap<usize, Layout>> = BTreeMap::new();
    for r in rows {
        let layout = groups
            .entry((r.agent, r.service.clone()))
            .or_default()
            .entry(r.rep)
            .or_default();
        if layout.insert((r.phase, r.iteration), r.phi_sigma).is_some() {
            return Err(SummaryError::Duplicate {
                rep: r.rep,
                phase: r.phase,
                iteration: r.iteration,
            });
        }
    }
    for ((agent, service), reps) in &groups {
        let mut it = reps.iter();
        let (_, first) = it.next().expect("non-empty group");
        for (&rep, layout) in it {
            if !layout.keys().eq(first.keys()) {
                return Err(SummaryError::Shape {
                    agent: *agent,
                    service: service.clone(),
                    rep,
                });
            }
        }
    }
    Ok(groups)
}

/// Mean and spread per (agent, service, phase, iteration) across repetitions.
pub fn summarize(rows: &[IterationRow]) -> Result<Vec<SummaryRow>, SummaryError> {
    let groups = group(rows)?;
    let mut out = Vec::new();
    for ((agent, service), reps) in groups {
        let first = reps.values().next().expect("non-empty group");
        for &(phase, iteration) in first.keys() {
            let xs: Vec<f64> = reps.values().map(|l| l[&(phase, iteration)]).collect();
            let (mean, std) = mean_std(&xs);
            out.push(SummaryRow {
                agent,
                service: service.clone(),
                phase,
                iteration,
                n: xs.len(),
                mean,
                std,
            });
        }
    }
    Ok(out)
}

/// Per-phase means across repetitions; each repetition contributes the mean
/// of its iterations in the phase.
pub fn summarize_phases(rows: &[IterationRow]) -> Result<Vec<SummaryRow>, SummaryError> {
    let groups = group(rows)?;
    let mut out = Vec::new();
    for ((agent, service), reps) in groups {
        let first = reps.values().next().expect("non-empty group");
        let phases: BTreeSet<usize> = first.keys().map(|&(p, _)| p).collect();
        for phase in phases {
            let xs: Vec<f64> = reps
                .values()
                .map(|l| {
                    let v: Vec<f64> = l.range((phase, 0)..=(phase, usize::MAX)).map(|(_, &x)| x).collect();
                    v.iter().sum::<f64>() / v.len() as f64
                })
                .collect();
            let (mean, std) = mean_std(&xs);
            out.push(SummaryRow {
                agent,
                service: service.clone(),
                phase,
                iteration: 0,
                n: xs.len(),
                mean,
                std,
            });
        }
    }
    Ok(out)
}

/// Summary over the per-iteration rows of several reports.
pub fn summarize_reports(reports: &[RunReport]) -> Result<Vec<SummaryRow>, SummaryError> {
    let rows: Vec<IterationRow> = reports.iter().flat_map(RunReport::iteration_rows).collect();
    summarize(&rows)
}
