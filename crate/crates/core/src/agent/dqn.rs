//! Temporal-difference update and exploration.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::network::{mse_loss_and_grad, Gradients, QNetwork, RegressionSample};
use super::replay::Transition;
use super::{AgentError, Result};

/// How the per-decision reward is formed during training.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Uses the cold/warm outcome and idle carbon observed at the pod's next event.
    #[default]
    Realized,
    /// Uses `(1 - p_k) * L_cold` and the carbon of the full keep-alive budget.
    Expected,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub capacity: usize,
    pub batch: usize,
    pub lr: f64,
    pub gamma: f64,
    pub eps_start: f64,
    pub eps_decay: f64,
    pub eps_min: f64,
    pub target_sync_interval: u64,
    pub episodes: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    /// Preference weights sampled per episode; empty means the simulation's own.
    pub lambda_set: Vec<f64>,
    pub reward_mode: RewardMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            capacity: 10_000,
            batch: 64,
            lr: 1e-3,
            gamma: 0.99,
            eps_start: 1.0,
            eps_decay: 0.95,
            eps_min: 0.05,
            target_sync_interval: 500,
            episodes: 100,
            seed: 0,
            hidden: vec![64, 64],
            lambda_set: Vec::new(),
            reward_mode: RewardMode::Realized,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AgentError::Config(m));
        if self.capacity == 0 || self.batch == 0 {
            return bad("capacity and batch must be >= 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must be in (0, 1], got {}", self.gamma));
        }
        for (name, v) in [("eps_start", self.eps_start), ("eps_decay", self.eps_decay), ("eps_min", self.eps_min)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if self.target_sync_interval == 0 {
            return bad("target_sync_interval must be >= 1".into());
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer sizes must be >= 1".into());
        }
        if let Some(l) = self.lambda_set.iter().find(|l| !(0.0..=1.0).contains(*l)) {
            return bad(format!("lambda_set entries must be in [0, 1], got {l}"));
        }
        Ok(())
    }

    pub fn layer_sizes(&self, input: usize, output: usize) -> Vec<usize> {
        let mut s = vec![input];
        s.extend(&self.hidden);
        s.push(output);
        s
    }

    /// `max(eps_min, eps_start * eps_decay^episode)`.
    pub fn epsilon(&self, episode: usize) -> f64 {
        let e = i32::try_from(episode).unwrap_or(i32::MAX);
        (self.eps_start * self.eps_decay.powi(e)).max(self.eps_min)
    }
}

/// Index of the largest value, first on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Uniform index with probability `eps`, greedy otherwise.
pub fn select_action<R: Rng + ?Sized>(net: &QNetwork, state: &[f64], eps: f64, rng: &mut R) -> Result<usize> {
    if eps > 0.0 && rng.random::<f64>() < eps {
        return Ok(rng.random_range(0..net.output_dim()));
    }
    Ok(argmax(&net.forward(state)?))
}

/// Scratch space reused across updates.
#[derive(Debug, Clone)]
pub struct TdScratch {
    grads: Gradients,
}

impl TdScratch {
    pub fn new(net: &QNetwork) -> Self {
        Self { grads: Gradients::zeros_like(net) }
    }
}

/// One gradient step of `net` toward `r + gamma * max_a' target(s', a')`
/// (just `r` for terminal transitions). Returns the loss before the step.
pub fn td_step(
    net: &mut QNetwork,
    target: &QNetwork,
    batch: &[&Transition],
    cfg: &TrainConfig,
    scratch: &mut TdScratch,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(AgentError::EmptyBatch);
    }
    let mut samples = Vec::with_capacity(batch.len());
    for t in batch {
        let y = if t.terminal {
            t.reward
        } else {
            let q = target.forward(&t.next_state)?;
            t.reward + cfg.gamma * q.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        };
        samples.push(RegressionSample { state: &t.state, action: t.action, target: y });
    }
    let loss = mse_loss_and_grad(net, &samples, &mut scratch.grads)?;
    if !loss.is_finite() {
        return Err(AgentError::NonFinite("td loss".into()));
    }
    net.sgd_step(&scratch.grads, cfg.lr);
    Ok(loss)
}
