//! Deep Q-learning around any [`QFunction`]: replay memory, ε-greedy
//! behaviour, TD targets, the squared TD loss, gradient steps and target sync.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::Action;
use crate::error::{Error, Result};
use crate::parallel::map_chunks;
use crate::qnet::QFunction;

/// Batch elements per gradient chunk. Chunk partial sums are added in order,
/// so the result does not depend on the thread count.
pub const GRAD_CHUNK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub s: Vec<f64>,
    pub a: Action,
    pub r: f64,
    pub s_next: Vec<f64>,
    /// Terminal: no bootstrapping from `s_next`.
    pub done: bool,
}

/// FIFO ring of transitions with uniform sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    head: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::InvalidConfig("replay capacity must be positive".into()));
        }
        Ok(Self { capacity, items: Vec::new(), head: 0, inserted: 0 })
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.head] = t;
            self.head = (self.head + 1) % self.capacity;
        }
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Contents from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items[self.head..].iter().chain(&self.items[..self.head])
    }

    /// `n` draws with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if self.items.is_empty() {
            return Err(Error::EmptyBatch);
        }
        Ok((0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, n: usize) -> Self {
        let len = if matches!(kind, OptimizerKind::Adam { .. }) { n } else { 0 };
        Self { kind, m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn apply(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grad) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t as i32);
                let c2 = 1.0 - beta2.powi(self.t as i32);
                for i in 0..params.len() {
                    self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
                    self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
                    params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + eps);
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub lr: f64,
    pub batch_size: usize,
    /// Gradient steps between target-network copies.
    pub target_sync_every: u64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Fraction of the run over which ε decays linearly.
    pub epsilon_decay_fraction: f64,
    pub capacity: usize,
    pub total_episodes: usize,
    /// Transitions stored before the first gradient step.
    pub warmup: usize,
    /// Environment steps per gradient step.
    pub train_every: u64,
    pub optimizer: OptimizerKind,
    /// Rescale the gradient to at most this global norm.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            lr: 5e-4,
            batch_size: 64,
            target_sync_every: 500,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_fraction: 0.3,
            capacity: 50_000,
            total_episodes: 2000,
            warmup: 1000,
            train_every: 1,
            optimizer: OptimizerKind::Sgd,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma > 0.0
            && self.gamma < 1.0
            && self.lr >= 0.0
            && self.batch_size > 0
            && self.capacity > 0
            && self.target_sync_every > 0
            && self.train_every > 0
            && (0.0..=1.0).contains(&self.epsilon_start)
            && (0.0..=1.0).contains(&self.epsilon_end)
            && (0.0..=1.0).contains(&self.epsilon_decay_fraction);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig("training hyperparameters out of range".into()))
        }
    }

    /// ε after `progress` units of a run of `total` units.
    pub fn epsilon(&self, progress: usize, total: usize) -> f64 {
        if self.epsilon_decay_fraction <= 0.0 || total == 0 {
            return self.epsilon_end;
        }
        let f = (progress as f64 / total as f64 / self.epsilon_decay_fraction).min(1.0);
        self.epsilon_start * (1.0 - f) + self.epsilon_end * f
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in q.iter().enumerate().skip(1) {
        if v > q[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_action<Q: QFunction>(net: &Q, obs: &[f64]) -> Result<Action> {
    let q = net.forward(obs)?;
    Ok(Action::from_index(argmax(&q)).expect("network has one output per action"))
}

/// ε-greedy choice. One uniform draw decides exploration; a second picks the
/// random action.
pub fn select_action<Q: QFunction, R: Rng + ?Sized>(net: &Q, obs: &[f64], epsilon: f64, rng: &mut R) -> Result<Action> {
    if rng.random::<f64>() < epsilon {
        return Ok(Action::ALL[rng.random_range(0..Action::COUNT)]);
    }
    greedy_action(net, obs)
}

/// `r + γ·max_a′ Q(s′, a′; θ′)`, or `r` for a terminal transition.
pub fn td_target<Q: QFunction>(t: &Transition, target: &Q, gamma: f64) -> Result<f64> {
    if t.done {
        return Ok(t.r);
    }
    let q = target.forward(&t.s_next)?;
    Ok(t.r + gamma * q.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Mean squared TD error plus the network's regularization.
pub fn loss<Q: QFunction>(batch: &[&Transition], net: &Q, target: &Q, gamma: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut sq = 0.0;
    for t in batch {
        let e = net.forward(&t.s)?[t.a.index()] - td_target(t, target, gamma)?;
        sq += e * e;
    }
    Ok(sq / batch.len() as f64 + net.regularization())
}

/// [`loss`] and its gradient with respect to `net`'s parameters.
pub fn loss_and_grad<Q: QFunction>(batch: &[&Transition], net: &Q, target: &Q, gamma: f64) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = net.num_params();
    let scale = 2.0 / batch.len() as f64;
    let parts = map_chunks(batch, GRAD_CHUNK, |chunk| -> Result<(f64, Vec<f64>)> {
        let mut tape = Q::Tape::default();
        let mut grad = vec![0.0; n];
        let mut upstream = vec![0.0; net.output_width()];
        let mut sq = 0.0;
        for t in chunk {
            let y = td_target(t, target, gamma)?;
            net.forward_tape(&t.s, &mut tape)?;
            let e = Q::tape_output(&tape)[t.a.index()] - y;
            sq += e * e;
            upstream[t.a.index()] = scale * e;
            net.backward(&tape, &upstream, &mut grad);
            upstream[t.a.index()] = 0.0;
        }
        Ok((sq, grad))
    });
    let mut sq = 0.0;
    let mut grad = vec![0.0; n];
    for part in parts {
        let (s, g) = part?;
        sq += s;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    net.add_regularization_grad(&mut grad);
    Ok((sq / batch.len() as f64 + net.regularization(), grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub loss: f64,
    pub grad_norm: f64,
}

/// One optimizer step on `batch`; the target network is only read.
pub fn update<Q: QFunction>(
    net: &mut Q,
    target: &Q,
    batch: &[&Transition],
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
) -> Result<UpdateReport> {
    let (l, mut grad) = loss_and_grad(batch, net, target, cfg.gamma)?;
    let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if !l.is_finite() || !grad_norm.is_finite() {
        return Err(Error::Diverged(l));
    }
    if let Some(c) = cfg.grad_clip.filter(|&c| grad_norm > c) {
        let k = c / grad_norm;
        grad.iter_mut().for_each(|g| *g *= k);
    }
    opt.apply(net.params_mut(), &grad, cfg.lr);
    net.after_update()?;
    Ok(UpdateReport { loss: l, grad_norm })
}

/// `θ′ ← θ`.
pub fn sync_target<Q: QFunction>(net: &Q, target: &mut Q) {
    target.clone_from(net);
}

/// Online and target networks with their replay memory and optimizer.
#[derive(Clone, Debug)]
pub struct DqnAgent<Q: QFunction> {
    pub net: Q,
    pub target: Q,
    pub buffer: ReplayBuffer,
    pub optimizer: OptimizerState,
    pub cfg: TrainConfig,
    pub rng: ChaCha8Rng,
    pub env_steps: u64,
    pub grad_steps: u64,
}

impl<Q: QFunction> DqnAgent<Q> {
    pub fn new(net: Q, cfg: TrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let optimizer = OptimizerState::new(cfg.optimizer, net.num_params());
        Ok(Self {
            target: net.clone(),
            net,
            buffer: ReplayBuffer::new(cfg.capacity)?,
            optimizer,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(seed),
            env_steps: 0,
            grad_steps: 0,
        })
    }

    pub fn act(&mut self, obs: &[f64], epsilon: f64) -> Result<Action> {
        select_action(&self.net, obs, epsilon, &mut self.rng)
    }

    /// Store `t` and, past warm-up, take a gradient step on a sampled batch.
    pub fn record(&mut self, t: Transition) -> Result<Option<UpdateReport>> {
        self.buffer.push(t);
        self.env_steps += 1;
        if self.buffer.len() < self.cfg.warmup.max(1) || !self.env_steps.is_multiple_of(self.cfg.train_every) {
            return Ok(None);
        }
        let report = {
            let batch = self.buffer.sample(self.cfg.batch_size, &mut self.rng)?;
            update(&mut self.net, &self.target, &batch, &self.cfg, &mut self.optimizer)?
        };
        self.grad_steps += 1;
        if self.grad_steps.is_multiple_of(self.cfg.target_sync_every) {
            sync_target(&self.net, &mut self.target);
        }
        Ok(Some(report))
    }
}

/// Deterministic chain: action 0 moves right, action 1 moves left, the rest
/// stay. Reaching the last state pays 1 and ends the episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChainMdp {
    pub states: usize,
    pub gamma: f64,
}

impl ChainMdp {
    pub fn step(&self, s: usize, a: Action) -> (usize, f64, bool) {
        let next = match a.index() {
            0 => (s + 1).min(self.states - 1),
            1 => s.saturating_sub(1),
            _ => s,
        };
        let done = next == self.states - 1;
        (next, if done { 1.0 } else { 0.0 }, done)
    }

    pub fn encode(&self, s: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.states];
        x[s] = 1.0;
        x
    }

    /// Optimal action values of the non-terminal states.
    pub fn optimal_q(&self, tol: f64) -> Vec<[f64; Action::COUNT]> {
        let live = self.states - 1;
        let mut v = vec![0.0; self.states];
        let mut q = vec![[0.0; Action::COUNT]; live];
        loop {
            let mut delta = 0.0f64;
            for s in 0..live {
                for a in Action::ALL {
                    let (n, r, done) = self.step(s, a);
                    q[s][a.index()] = r + if done { 0.0 } else { self.gamma * v[n] };
                }
                let best = q[s].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                delta = delta.max((best - v[s]).abs());
                v[s] = best;
            }
            if delta < tol {
                return q;
            }
        }
    }
}
