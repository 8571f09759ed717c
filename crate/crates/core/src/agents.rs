//! Scaling agents: the learned local agent, the core-only baseline and the
//! global optimizer that moves cores between services.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dqn::{train, QPolicy, TrainConfig, TrainError};
use crate::env::{Action, EnvConfig, EnvPhase, EnvState, TrainEnv};
use crate::lgbn::{exclude_settling, fit, FitError, LgbnModel, MetricSnapshot};
use crate::sim::{ChangeCause, Rejection, RunningService, Simulator};
use crate::slo::{
    cumulative_fulfillment, slo_fulfillment, weighted_delta, Observation, Slo, Variable, PHI_OPT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Lsa,
    Vpa,
    None,
}

impl AgentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Lsa => "lsa",
            AgentKind::Vpa => "vpa",
            AgentKind::None => "none",
        }
    }
}

impl core::fmt::Display for AgentKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentError {
    #[error("model fit failed: {0}")]
    Fit(#[from] FitError),
    #[error("policy training failed: {0}")]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Applied,
    /// The chosen action maps onto the current configuration.
    Unchanged,
    Rejected { reason: Rejection },
    /// No policy yet; the agent holds still.
    Untrained,
}

/// One agent decision, kept for the audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub tick: u64,
    pub service: String,
    pub agent: AgentKind,
    pub action: Action,
    pub from: (u32, u32),
    pub target: (u32, u32),
    pub outcome: Outcome,
    /// Delta the agent's model predicts at the target configuration.
    pub estimated_delta: Option<f64>,
    /// Mean delta observed once the change settled; filled by the harness.
    pub realized_delta: Option<f64>,
}

fn threshold(slos: &[Slo], variable: Variable, fallback: f64) -> f64 {
    slos.iter()
        .find(|q| q.variable == variable)
        .map_or(fallback, |q| q.threshold)
}

/// Model-predicted delta at `(pixel, cores)`, with fps clamped at zero.
pub fn predicted_delta(model: &LgbnModel, slos: &[Slo], pixel: u32, cores: u32) -> Option<f64> {
    let obs = Observation {
        pixel: f64::from(pixel),
        cores: f64::from(cores),
        fps: model.expect_fps(pixel, cores).max(0.0),
    };
    weighted_delta(slos, &obs).ok()
}

/// Model-predicted cumulative fulfillment at `(pixel, cores)`.
pub fn predicted_fulfillment(model: &LgbnModel, slos: &[Slo], pixel: u32, cores: u32) -> f64 {
    let obs = Observation {
        pixel: f64::from(pixel),
        cores: f64::from(cores),
        fps: model.expect_fps(pixel, cores).max(0.0),
    };
    cumulative_fulfillment(slos, &obs).unwrap_or(0.0)
}

/// Local scaling agent: an LGBN fitted on the service's own metrics and a
/// Q-policy trained against it.
#[derive(Debug, Clone)]
pub struct Lsa {
    pub service_id: String,
    pub env_config: EnvConfig,
    pub train_config: TrainConfig,
    pub settling_window: u64,
    pub decision_interval: u64,
    lgbn: Option<LgbnModel>,
    policy: Option<QPolicy>,
    last_retrain_tick: Option<u64>,
    retrains: u64,
}

impl Lsa {
    pub fn new(
        service_id: impl Into<String>,
        env_config: EnvConfig,
        train_config: TrainConfig,
        settling_window: u64,
        decision_interval: u64,
    ) -> Self {
        Lsa {
            service_id: service_id.into(),
            env_config,
            train_config,
            settling_window,
            decision_interval,
            lgbn: None,
            policy: None,
            last_retrain_tick: None,
            retrains: 0,
        }
    }

    pub fn lgbn(&self) -> Option<&LgbnModel> {
        self.lgbn.as_ref()
    }

    pub fn policy(&self) -> Option<&QPolicy> {
        self.policy.as_ref()
    }

    pub fn last_retrain_tick(&self) -> Option<u64> {
        self.last_retrain_tick
    }

    pub fn retrains(&self) -> u64 {
        self.retrains
    }

    /// Installs externally obtained models, e.g. loaded from disk.
    pub fn install(&mut self, lgbn: LgbnModel, policy: Option<QPolicy>) {
        self.lgbn = Some(lgbn);
        self.policy = policy;
    }

    /// Refits the LGBN on settled snapshots and retrains the policy.
    ///
    /// Either both models are replaced or, on error, neither is. Each retrain
    /// uses a fresh seed derived from the configured one.
    pub fn retrain(
        &mut self,
        metrics: &[MetricSnapshot],
        action_ticks: &[u64],
        slos: &[Slo],
        phase: EnvPhase,
        now: u64,
    ) -> Result<(), AgentError> {
        let data = exclude_settling(metrics, action_ticks, self.settling_window);
        let model = fit(&data)?;
        let env = TrainEnv::new(self.env_config.clone(), model.clone(), slos, phase);
        let mut cfg = self.train_config.clone();
        cfg.seed = cfg.seed.wrapping_add(self.retrains.wrapping_mul(0x9E37_79B9));
        let policy = train(&env, &cfg)?;
        self.lgbn = Some(model);
        self.policy = Some(policy);
        self.last_retrain_tick = Some(now);
        self.retrains += 1;
        Ok(())
    }

    /// The state vector the policy sees for a running service.
    pub fn observe(&self, svc: &RunningService, c_free: u32) -> EnvState {
        let slos = &svc.spec.slos;
        EnvState {
            pixel: svc.state.pixel,
            cores: svc.state.cores,
            c_free,
            t_pixel: threshold(slos, Variable::Pixel, self.env_config.t_pixel_max),
            t_fps: threshold(slos, Variable::Fps, self.env_config.t_fps_max),
            fps: svc.state.fps,
        }
    }

    /// Greedy action of the current policy.
    pub fn choose(&self, state: &EnvState) -> Option<Action> {
        let policy = self.policy.as_ref()?;
        policy.best_action(&state.features(&self.env_config)).ok()
    }

    /// Observes the service, picks an action and requests it.
    ///
    /// Growing beyond the free pool is requested anyway; the simulator's
    /// refusal turns it into a logged no-op.
    pub fn step(&self, sim: &mut Simulator) -> Option<DecisionRecord> {
        let now = sim.now();
        let c_free = sim.c_free();
        let svc = sim.service(&self.service_id)?;
        let state = self.observe(svc, c_free);
        let from = (state.pixel, state.cores);
        let mut record = DecisionRecord {
            tick: now,
            service: self.service_id.clone(),
            agent: AgentKind::Lsa,
            action: Action::NoOp,
            from,
            target: from,
            outcome: Outcome::Untrained,
            estimated_delta: None,
            realized_delta: None,
        };
        let Some(action) = self.choose(&state) else {
            return Some(record);
        };
        let target = match action {
            Action::CoresUp => (state.pixel, state.cores + self.env_config.cores_step),
            a => state.apply(a, &self.env_config),
        };
        record.action = action;
        record.target = target;
        record.estimated_delta = self
            .lgbn
            .as_ref()
            .and_then(|m| predicted_delta(m, &svc.spec.slos, target.0, target.1));
        record.outcome = if target == from {
            Outcome::Unchanged
        } else {
            match sim.apply_scaling(&self.service_id, target.0, target.1, ChangeCause::Agent) {
                Ok(()) => Outcome::Applied,
                Err(reason) => Outcome::Rejected { reason },
            }
        };
        Some(record)
    }
}

/// Baseline rule: grow while throughput misses its target and cores are
/// free, shrink while it over-delivers.
pub fn vpa_action(phi_fps: f64, cores: u32, c_free: u32) -> Action {
    if phi_fps < PHI_OPT && c_free > 0 {
        Action::CoresUp
    } else if phi_fps > PHI_OPT && cores > 1 {
        Action::CoresDown
    } else {
        Action::NoOp
    }
}

/// Applies [`vpa_action`] to service `id` based on its latest observation.
/// Services without an fps objective are left alone.
pub fn vpa_step(sim: &mut Simulator, id: &str) -> Option<DecisionRecord> {
    let now = sim.now();
    let c_free = sim.c_free();
    let svc = sim.service(id)?;
    let from = (svc.state.pixel, svc.state.cores);
    let step = svc.spec.cores_step;
    let action = svc
        .spec
        .slo(Variable::Fps)
        .and_then(|q| slo_fulfillment(q, svc.state.fps).ok())
        .map_or(Action::NoOp, |phi| vpa_action(phi, from.1, c_free));
    let target = match action {
        Action::CoresUp => (from.0, from.1 + step.min(c_free)),
        Action::CoresDown => (from.0, from.1.saturating_sub(step).max(1)),
        _ => from,
    };
    let outcome = if target == from {
        Outcome::Unchanged
    } else {
        match sim.apply_scaling(id, target.0, target.1, ChangeCause::Agent) {
            Ok(()) => Outcome::Applied,
            Err(reason) => Outcome::Rejected { reason },
        }
    };
    Some(DecisionRecord {
        tick: now,
        service: id.into(),
        agent: AgentKind::Vpa,
        action,
        from,
        target,
        outcome,
        estimated_delta: None,
        realized_delta: None,
    })
}

/// What the optimizer knows about one service.
#[derive(Debug, Clone, Copy)]
pub struct GsoView<'a> {
    pub id: &'a str,
    pub pixel: u32,
    pub cores: u32,
    pub slos: &'a [Slo],
    pub model: &'a LgbnModel,
}

impl GsoView<'_> {
    fn fulfillment(&self, cores: u32) -> f64 {
        predicted_fulfillment(self.model, self.slos, self.pixel, cores)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SwapProposal {
    pub from: String,
    pub to: String,
    pub estimated_gain: f64,
}

/// Predicted change of the summed fulfillment for every single-core move
/// between two distinct services. Donors keep at least one core.
pub fn gso_evaluate(views: &[GsoView<'_>]) -> Vec<SwapProposal> {
    let mut out = Vec::new();
    for donor in views {
        if donor.cores <= 1 {
            continue;
        }
        let loss = donor.fulfillment(donor.cores) - donor.fulfillment(donor.cores - 1);
        for receiver in views {
            if receiver.id == donor.id {
                continue;
            }
            let gain = receiver.fulfillment(receiver.cores + 1) - receiver.fulfillment(receiver.cores);
            out.push(SwapProposal {
                from: donor.id.into(),
                to: receiver.id.into(),
                estimated_gain: gain - loss,
            });
        }
    }
    out
}

/// Best proposal whose gain exceeds `min_gain`; ties keep evaluation order.
pub fn best_swap(proposals: &[SwapProposal], min_gain: f64) -> Option<&SwapProposal> {
    proposals
        .iter()
        .filter(|p| p.estimated_gain > min_gain)
        .fold(None, |best: Option<&SwapProposal>, p| match best {
            Some(b) if b.estimated_gain >= p.estimated_gain => Some(b),
            _ => Some(p),
        })
}

/// Outcome of one optimizer invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GsoRound {
    pub tick: u64,
    pub proposals: Vec<SwapProposal>,
    pub executed: Option<SwapProposal>,
}

/// Runs the optimizer when the device is exhausted. Services without a
/// fitted model are not considered.
pub fn gso_step(
    sim: &mut Simulator,
    models: &BTreeMap<String, LgbnModel>,
    min_gain: f64,
) -> Option<GsoRound> {
    if sim.c_free() > 0 {
        return None;
    }
    let views: Vec<GsoView<'_>> = sim
        .services()
        .iter()
        .filter_map(|s| {
            models.get(s.id()).map(|model| GsoView {
                id: s.id(),
                pixel: s.state.pixel,
                cores: s.state.cores,
                slos: &s.spec.slos,
                model,
            })
        })
        .collect();
    let proposals = gso_evaluate(&views);
    let chosen = best_swap(&proposals, min_gain).cloned();
    let tick = sim.now();
    let executed = chosen.filter(|p| sim.swap_core(&p.from, &p.to).is_ok());
    Some(GsoRound {
        tick,
        proposals,
        executed,
    })
}
