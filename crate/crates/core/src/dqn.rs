//! Deep Q-network written from scratch: a ReLU multilayer perceptron, a ring
//! replay buffer, a periodically synced target network and epsilon-greedy
//! exploration, trained with clipped stochastic gradient descent on the
//! squared temporal-difference error.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{Action, EnvState, Policy, TrainEnv, FEATURES};
use crate::seeded_rng;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DqnError {
    #[error("state has {got} features, network expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("layer {0} shape does not chain with its neighbours")]
    Shape(usize),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    Config(&'static str),
}

/// Fully connected layer; `weights` is row-major `outputs x inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Dense {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
        }
    }

    /// He-uniform weights, zero biases.
    fn random<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = libm::sqrt(6.0 / inputs as f64);
        let weights = (0..inputs * outputs)
            .map(|_| rng.random_range(-limit..limit))
            .collect();
        Dense {
            inputs,
            outputs,
            weights,
            biases: vec![0.0; outputs],
        }
    }

    fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, (row, b)) in out
            .iter_mut()
            .zip(self.weights.chunks_exact(self.inputs).zip(&self.biases))
        {
            *o = b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>();
        }
    }

    fn param_count(&self) -> usize {
        self.weights.len() + self.biases.len()
    }
}

/// Action-value network mapping a normalized state to one value per [`Action`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QPolicy {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub layers: Vec<Dense>,
}

impl QPolicy {
    fn widths(input_dim: usize, hidden: &[usize]) -> Vec<usize> {
        let mut w = Vec::with_capacity(hidden.len() + 2);
        w.push(input_dim);
        w.extend_from_slice(hidden);
        w.push(Action::COUNT);
        w
    }

    pub fn zeros(input_dim: usize, hidden: &[usize]) -> Self {
        let widths = Self::widths(input_dim, hidden);
        QPolicy {
            input_dim,
            hidden: hidden.to_vec(),
            layers: widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn random<R: Rng + ?Sized>(input_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let widths = Self::widths(input_dim, hidden);
        QPolicy {
            input_dim,
            hidden: hidden.to_vec(),
            layers: widths.windows(2).map(|w| Dense::random(w[0], w[1], rng)).collect(),
        }
    }

    /// Builds a network from explicit layers; ReLU sits between them.
    pub fn from_layers(layers: Vec<Dense>) -> Result<Self, DqnError> {
        let first = layers.first().ok_or(DqnError::Shape(0))?;
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.biases.len() != l.outputs {
                return Err(DqnError::Shape(i));
            }
            if i > 0 && layers[i - 1].outputs != l.inputs {
                return Err(DqnError::Shape(i));
            }
        }
        let last = layers.len() - 1;
        if layers[last].outputs != Action::COUNT {
            return Err(DqnError::Shape(last));
        }
        Ok(QPolicy {
            input_dim: first.inputs,
            hidden: layers[..last].iter().map(|l| l.outputs).collect(),
            layers,
        })
    }

    pub fn validate(&self) -> Result<(), DqnError> {
        let rebuilt = QPolicy::from_layers(self.layers.clone())?;
        if rebuilt.input_dim != self.input_dim || rebuilt.hidden != self.hidden {
            return Err(DqnError::Shape(0));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn predict_q(&self, state: &[f64]) -> Result<[f64; Action::COUNT], DqnError> {
        if state.len() != self.input_dim {
            return Err(DqnError::Dimension {
                expected: self.input_dim,
                got: state.len(),
            });
        }
        let mut cache = ForwardCache::new(self);
        Ok(self.forward(state, &mut cache))
    }

    fn forward(&self, state: &[f64], cache: &mut ForwardCache) -> [f64; Action::COUNT] {
        cache.acts[0].copy_from_slice(state);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let (done, rest) = cache.acts.split_at_mut(i + 1);
            let out = &mut rest[0];
            layer.forward_into(&done[i], out);
            if i < last {
                for v in out.iter_mut() {
                    *v = v.max(0.0);
                }
            }
        }
        let mut q = [0.0; Action::COUNT];
        q.copy_from_slice(&cache.acts[last + 1]);
        q
    }

    /// Greedy action for `state`.
    pub fn best_action(&self, state: &[f64]) -> Result<Action, DqnError> {
        Ok(greedy_action(&self.predict_q(state)?))
    }

    fn flat_params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            p.extend_from_slice(&l.weights);
            p.extend_from_slice(&l.biases);
        }
        p
    }
}

/// Argmax with ties going to the lowest action index.
pub fn greedy_action(q: &[f64; Action::COUNT]) -> Action {
    let mut best = 0;
    for i in 1..Action::COUNT {
        if q[i] > q[best] {
            best = i;
        }
    }
    Action::ALL[best]
}

/// Epsilon-greedy action selection.
pub fn act<R: Rng + ?Sized>(
    policy: &QPolicy,
    state: &[f64],
    epsilon: f64,
    rng: &mut R,
) -> Result<Action, DqnError> {
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return Ok(Action::ALL[rng.random_range(0..Action::COUNT)]);
    }
    policy.best_action(state)
}

/// Greedy rollouts of a trained network inside a [`TrainEnv`].
impl Policy for QPolicy {
    fn choose<R: Rng + ?Sized>(&mut self, env: &TrainEnv, state: &EnvState, _rng: &mut R) -> Action {
        self.best_action(&state.features(&env.config))
            .unwrap_or(Action::NoOp)
    }
}

/// Per-layer activation buffers reused across forward passes.
struct ForwardCache {
    acts: Vec<Vec<f64>>,
}

impl ForwardCache {
    fn new(policy: &QPolicy) -> Self {
        let mut acts = vec![vec![0.0; policy.input_dim]];
        acts.extend(policy.layers.iter().map(|l| vec![0.0; l.outputs]));
        ForwardCache { acts }
    }
}

/// Gradient buffers shaped like a [`QPolicy`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    layers: Vec<Dense>,
}

impl Gradients {
    fn zeros_like(policy: &QPolicy) -> Self {
        Gradients {
            layers: policy
                .layers
                .iter()
                .map(|l| Dense::zeros(l.inputs, l.outputs))
                .collect(),
        }
    }

    fn clear(&mut self) {
        for l in &mut self.layers {
            l.weights.fill(0.0);
            l.biases.fill(0.0);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w *= k);
            l.biases.iter_mut().for_each(|b| *b *= k);
        }
    }

    pub fn norm(&self) -> f64 {
        let sq: f64 = self
            .layers
            .iter()
            .map(|l| {
                l.weights.iter().map(|w| w * w).sum::<f64>() + l.biases.iter().map(|b| b * b).sum::<f64>()
            })
            .sum();
        libm::sqrt(sq)
    }

    /// Flattened in the same order as the network parameters.
    pub fn flat(&self) -> Vec<f64> {
        let mut p = Vec::new();
        for l in &self.layers {
            p.extend_from_slice(&l.weights);
            p.extend_from_slice(&l.biases);
        }
        p
    }
}

/// Stored experience; states are kept in feature form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Experience {
    pub state: [f64; FEATURES],
    pub action: Action,
    pub reward: f64,
    pub next_state: [f64; FEATURES],
}

/// Fixed-capacity ring of experiences; the oldest entry is evicted first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Experience>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity: capacity.max(1),
            items: Vec::with_capacity(capacity.max(1)),
            next: 0,
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, e: Experience) {
        if self.items.len() < self.capacity {
            self.items.push(e);
        } else {
            self.items[self.next] = e;
        }
        self.next = (self.next + 1) % self.capacity;
    }

    /// Entries from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Experience> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// Uniform sample with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Experience> {
        (0..n)
            .map(|_| self.items[rng.random_range(0..self.items.len())])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub gamma: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_steps: usize,
    pub batch_size: usize,
    pub target_sync: usize,
    pub total_steps: usize,
    pub hidden: Vec<usize>,
    pub replay_capacity: usize,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 5e-2,
            gamma: 0.95,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: 5_000,
            batch_size: 64,
            target_sync: 250,
            total_steps: 20_000,
            hidden: vec![64, 64],
            replay_capacity: 10_000,
            grad_clip: 10.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(TrainError::Config("gamma must lie in (0, 1)"));
        }
        let eps_ok = |e: f64| (0.0..=1.0).contains(&e);
        if !eps_ok(self.epsilon_start) || !eps_ok(self.epsilon_end) {
            return Err(TrainError::Config("epsilon must lie in [0, 1]"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::Config("learning_rate must be positive"));
        }
        if self.batch_size == 0 || self.replay_capacity == 0 || self.target_sync == 0 {
            return Err(TrainError::Config(
                "batch_size, replay_capacity and target_sync must be positive",
            ));
        }
        if !(self.grad_clip > 0.0) {
            return Err(TrainError::Config("grad_clip must be positive"));
        }
        Ok(())
    }

    /// Linear decay from `epsilon_start` to `epsilon_end`.
    pub fn epsilon_at(&self, step: usize) -> f64 {
        if self.epsilon_decay_steps == 0 || step >= self.epsilon_decay_steps {
            return self.epsilon_end;
        }
        let frac = step as f64 / self.epsilon_decay_steps as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac
    }
}

/// Half mean squared TD error of `batch` and its gradient w.r.t. `online`.
///
/// Targets are `r + gamma * max_a' target(s', a')`; episodes are truncated by
/// time only, so every transition bootstraps.
pub fn td_loss_and_grad(
    online: &QPolicy,
    target: &QPolicy,
    batch: &[Experience],
    gamma: f64,
) -> (f64, Gradients) {
    let mut grads = Gradients::zeros_like(online);
    let mut scratch = Scratch::new(online);
    let loss = accumulate(online, target, batch, gamma, &mut grads, &mut scratch);
    (loss, grads)
}

/// Loss only, as [`td_loss_and_grad`].
pub fn td_loss(online: &QPolicy, target: &QPolicy, batch: &[Experience], gamma: f64) -> f64 {
    let mut oc = ForwardCache::new(online);
    let mut tc = ForwardCache::new(target);
    let mut loss = 0.0;
    for e in batch {
        let y = e.reward + gamma * max(&target.forward(&e.next_state, &mut tc));
        let q = online.forward(&e.state, &mut oc)[e.action.index()];
        loss += 0.5 * (q - y) * (q - y);
    }
    loss / batch.len().max(1) as f64
}

fn max(q: &[f64; Action::COUNT]) -> f64 {
    q.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

struct Scratch {
    online: ForwardCache,
    target: ForwardCache,
    deltas: Vec<Vec<f64>>,
}

impl Scratch {
    fn new(policy: &QPolicy) -> Self {
        Scratch {
            online: ForwardCache::new(policy),
            target: ForwardCache::new(policy),
            deltas: policy.layers.iter().map(|l| vec![0.0; l.outputs]).collect(),
        }
    }
}

fn accumulate(
    online: &QPolicy,
    target: &QPolicy,
    batch: &[Experience],
    gamma: f64,
    grads: &mut Gradients,
    s: &mut Scratch,
) -> f64 {
    grads.clear();
    let inv_n = 1.0 / batch.len().max(1) as f64;
    let last = online.layers.len() - 1;
    let mut loss = 0.0;
    for e in batch {
        let y = e.reward + gamma * max(&target.forward(&e.next_state, &mut s.target));
        let q = online.forward(&e.state, &mut s.online)[e.action.index()];
        let err = q - y;
        loss += 0.5 * err * err;

        // Output delta is non-zero only for the taken action.
        s.deltas[last].fill(0.0);
        s.deltas[last][e.action.index()] = err * inv_n;
        for i in (0..=last).rev() {
            let layer = &online.layers[i];
            let input = &s.online.acts[i];
            let g = &mut grads.layers[i];
            {
                let delta = &s.deltas[i];
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    g.biases[o] += d;
                    let row = &mut g.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (gw, &x) in row.iter_mut().zip(input) {
                        *gw += d * x;
                    }
                }
            }
            if i > 0 {
                let (lower, upper) = s.deltas.split_at_mut(i);
                let delta = &upper[0];
                let prev = &mut lower[i - 1];
                prev.fill(0.0);
                for (o, &d) in delta.iter().enumerate() {
                    if d == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[o * layer.inputs..(o + 1) * layer.inputs];
                    for (p, &w) in prev.iter_mut().zip(row) {
                        *p += d * w;
                    }
                }
                // ReLU derivative of the hidden activation feeding this layer.
                for (p, &a) in prev.iter_mut().zip(input) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
        }
    }
    loss * inv_n
}

fn sgd_step(policy: &mut QPolicy, grads: &Gradients, lr: f64) {
    for (l, g) in policy.layers.iter_mut().zip(&grads.layers) {
        for (w, gw) in l.weights.iter_mut().zip(&g.weights) {
            *w -= lr * gw;
        }
        for (b, gb) in l.biases.iter_mut().zip(&g.biases) {
            *b -= lr * gb;
        }
    }
}

/// Step-wise DQN training loop over one [`TrainEnv`].
pub struct Trainer<'a> {
    env: &'a TrainEnv,
    cfg: TrainConfig,
    rng: ChaCha8Rng,
    online: QPolicy,
    target: QPolicy,
    buffer: ReplayBuffer,
    grads: Gradients,
    scratch: Scratch,
    state: EnvState,
    episode_step: usize,
    steps: usize,
    last_loss: Option<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(env: &'a TrainEnv, cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let mut rng = seeded_rng(cfg.seed);
        let online = QPolicy::random(FEATURES, &cfg.hidden, &mut rng);
        let state = env.reset(&mut rng);
        Ok(Trainer {
            env,
            target: online.clone(),
            grads: Gradients::zeros_like(&online),
            scratch: Scratch::new(&online),
            buffer: ReplayBuffer::new(cfg.replay_capacity),
            online,
            rng,
            state,
            episode_step: 0,
            steps: 0,
            last_loss: None,
            cfg,
        })
    }

    pub fn policy(&self) -> &QPolicy {
        &self.online
    }

    pub fn target(&self) -> &QPolicy {
        &self.target
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.last_loss
    }

    pub fn into_policy(self) -> QPolicy {
        self.online
    }

    /// One environment step plus, once the buffer holds a batch, one SGD update.
    pub fn step(&mut self) -> Result<(), TrainError> {
        let features = self.state.features(&self.env.config);
        let eps = self.cfg.epsilon_at(self.steps);
        let action = act(&self.online, &features, eps, &mut self.rng).unwrap_or(Action::NoOp);
        let (next, reward) = self.env.step(&self.state, action, &mut self.rng);
        self.buffer.push(Experience {
            state: features,
            action,
            reward,
            next_state: next.features(&self.env.config),
        });
        self.episode_step += 1;
        if self.episode_step >= self.env.config.episode_len.max(1) {
            self.state = self.env.reset(&mut self.rng);
            self.episode_step = 0;
        } else {
            self.state = next;
        }

        if self.buffer.len() >= self.cfg.batch_size {
            let batch = self.buffer.sample(self.cfg.batch_size, &mut self.rng);
            let loss = accumulate(
                &self.online,
                &self.target,
                &batch,
                self.cfg.gamma,
                &mut self.grads,
                &mut self.scratch,
            );
            if !loss.is_finite() {
                return Err(TrainError::Diverged {
                    step: self.steps,
                    loss,
                });
            }
            let norm = self.grads.norm();
            if norm > self.cfg.grad_clip {
                self.grads.scale(self.cfg.grad_clip / norm);
            }
            sgd_step(&mut self.online, &self.grads, self.cfg.learning_rate);
            self.last_loss = Some(loss);
        }

        self.steps += 1;
        if self.steps % self.cfg.target_sync == 0 {
            self.target.clone_from(&self.online);
        }
        Ok(())
    }
}

/// Trains a fresh network for `cfg.total_steps` steps.
pub fn train(env: &TrainEnv, cfg: &TrainConfig) -> Result<QPolicy, TrainError> {
    let mut trainer = Trainer::new(env, cfg.clone())?;
    for _ in 0..cfg.total_steps {
        trainer.step()?;
    }
    let policy = trainer.into_policy();
    if policy.flat_params().iter().any(|p| !p.is_finite()) {
        return Err(TrainError::Diverged {
            step: cfg.total_steps,
            loss: f64::NAN,
        });
    }
    Ok(policy)
}

/// Parameters of `policy`, flattened layer by layer (weights, then biases).
pub fn flat_params(policy: &QPolicy) -> Vec<f64> {
    policy.flat_params()
}

/// Overwrites the parameters of `policy` from a flat vector.
pub fn set_flat_params(policy: &mut QPolicy, params: &[f64]) {
    let mut it = params.iter().copied();
    for l in &mut policy.layers {
        for w in &mut l.weights {
            *w = it.next().unwrap_or(*w);
        }
        for b in &mut l.biases {
            *b = it.next().unwrap_or(*b);
        }
    }
}
