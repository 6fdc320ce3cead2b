//! Offline training loop and the greedy inference policy.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dqn::{argmax, select_action, td_step, RewardMode, TdScratch, TrainConfig};
use super::encoder::{encode_into, state_dim, NormStats};
use super::network::QNetwork;
use super::replay::{ReplayBuffer, Transition};
use super::{AgentError, Result};
use crate::engine::{self, ActionSet, CostScales, EngineError, SimConfig};
use crate::policies::{cost_pair, DecisionContext, Policy, PolicyError, Resolution};
use crate::seed::derive_seed;
use crate::trace::{Invocation, TraceSplit};

/// Everything needed to run the learned policy.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub net: QNetwork,
    pub stats: NormStats,
    pub actions: ActionSet,
    pub scales: CostScales,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub episode: usize,
    pub lambda_carbon: f64,
    pub epsilon: f64,
    /// Mean TD loss over the episode's updates (0 when there were none).
    pub mean_loss: f64,
    pub updates: u64,
    pub train_reward: f64,
    pub train_cold_starts: u64,
    pub train_keep_alive_g: f64,
    pub val_reward: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    /// Weights from the episode with the best validation reward.
    pub model: TrainedModel,
    pub best_episode: usize,
    pub log: Vec<EpisodeLog>,
}

/// Greedy (`eps = 0`) policy over a trained network.
#[derive(Debug, Clone)]
pub struct DqnPolicy {
    model: TrainedModel,
    state: Vec<f64>,
}

impl DqnPolicy {
    pub fn new(model: TrainedModel) -> Self {
        let d = state_dim(model.actions.len());
        Self { model, state: Vec::with_capacity(d) }
    }

    pub fn model(&self) -> &TrainedModel {
        &self.model
    }

    /// Encode, forward and argmax; returns the action index.
    pub fn infer(&mut self, ctx: &DecisionContext<'_>) -> Result<usize> {
        if ctx.actions.len() != self.model.actions.len() {
            return Err(AgentError::ActionCount { model: self.model.actions.len(), config: ctx.actions.len() });
        }
        encode_into(ctx, &self.model.stats, &mut self.state)?;
        Ok(argmax(&self.model.net.forward(&self.state)?))
    }
}

impl Policy for DqnPolicy {
    fn name(&self) -> String {
        "rl".into()
    }

    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<f64, PolicyError> {
        let i = self.infer(ctx).map_err(|e| PolicyError::Agent(e.to_string()))?;
        Ok(ctx.actions.get(i))
    }
}

struct PendingStep {
    state: Vec<f64>,
    action: usize,
    reward: Option<f64>,
}

/// Exploring policy that turns resolved decisions into transitions and
/// learns online while the engine replays the training trace.
struct Learner<'a> {
    cfg: &'a TrainConfig,
    stats: &'a NormStats,
    net: QNetwork,
    target: QNetwork,
    buffer: ReplayBuffer,
    scratch: TdScratch,
    explore_rng: ChaCha8Rng,
    replay_rng: ChaCha8Rng,
    eps: f64,
    episode: usize,
    pending: Vec<Option<PendingStep>>,
    updates: u64,
    episode_losses: Vec<f64>,
    error: Option<AgentError>,
}

impl Learner<'_> {
    fn commit(&mut self, t: Transition) {
        self.buffer.push(t);
        if self.buffer.len() < self.cfg.batch || self.error.is_some() {
            return;
        }
        let batch = self.buffer.sample(self.cfg.batch, &mut self.replay_rng);
        match td_step(&mut self.net, &self.target, &batch, self.cfg, &mut self.scratch) {
            Ok(loss) => self.episode_losses.push(loss),
            Err(e) => {
                self.error = Some(AgentError::Diverged { episode: self.episode, updates: self.updates, detail: e.to_string() });
                return;
            }
        }
        self.updates += 1;
        if self.updates % self.cfg.target_sync_interval == 0 {
            self.target.clone_from(&self.net);
        }
    }

    fn decide_inner(&mut self, ctx: &DecisionContext<'_>) -> Result<usize> {
        let mut state = Vec::with_capacity(state_dim(ctx.actions.len()));
        encode_into(ctx, self.stats, &mut state)?;
        if ctx.pod_slot >= self.pending.len() {
            self.pending.resize_with(ctx.pod_slot + 1, || None);
        }
        if let Some(prev) = self.pending[ctx.pod_slot].take() {
            if let Some(reward) = prev.reward {
                self.commit(Transition {
                    state: prev.state,
                    action: prev.action,
                    reward,
                    next_state: state.clone(),
                    terminal: false,
                });
            }
        }
        if let Some(e) = self.error.take() {
            return Err(e);
        }
        let a = select_action(&self.net, &state, self.eps, &mut self.explore_rng)?;
        let reward = match self.cfg.reward_mode {
            RewardMode::Realized => None,
            RewardMode::Expected => {
                let c = cost_pair(ctx, ctx.actions.get(a)).map_err(|e| AgentError::Config(e.to_string()))?;
                let lam = ctx.lambda_carbon;
                Some(-((1.0 - lam) * ctx.scales.sigma_l * c.c_cold + lam * ctx.scales.sigma_c * c.c_carbon))
            }
        };
        self.pending[ctx.pod_slot] = Some(PendingStep { state, action: a, reward });
        Ok(a)
    }
}

impl Policy for Learner<'_> {
    fn name(&self) -> String {
        "rl-train".into()
    }

    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<f64, PolicyError> {
        let a = self.decide_inner(ctx).map_err(|e| {
            let msg = e.to_string();
            self.error = Some(e);
            PolicyError::Agent(msg)
        })?;
        Ok(ctx.actions.get(a))
    }

    fn resolve(&mut self, res: &Resolution) {
        let Some(slot) = self.pending.get_mut(res.pod_slot) else { return };
        let Some(step) = slot.as_mut() else { return };
        if step.reward.is_none() {
            step.reward = Some(-res.weighted_cost);
        }
        if res.terminal {
            let step = slot.take().expect("checked above");
            self.commit(Transition {
                state: step.state,
                action: step.action,
                reward: step.reward.unwrap_or(-res.weighted_cost),
                next_state: Vec::new(),
                terminal: true,
            });
        }
    }
}

/// Mean total reward of the greedy policy over `lambdas`.
fn validation_reward(trace: &[Invocation], model: &TrainedModel, sim: &SimConfig, lambdas: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for &lam in lambdas {
        let cfg = SimConfig { lambda_carbon: lam, ..sim.clone() };
        let run = engine::run(trace, &mut DqnPolicy::new(model.clone()), &cfg)?;
        total -= run.report.weighted_cost;
    }
    Ok(total / lambdas.len() as f64)
}

/// Trains on `split.train`, selecting weights on `split.validation`
/// (or on the training split when validation is empty).
pub fn train(split: &TraceSplit, cfg: &TrainConfig, sim: &SimConfig) -> Result<TrainOutput> {
    train_on(&split.train, &split.validation, cfg, sim)
}

pub fn train_on(training: &[Invocation], validation: &[Invocation], cfg: &TrainConfig, sim: &SimConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    sim.validate()?;
    if training.is_empty() {
        return Err(AgentError::EmptyTraining);
    }
    let validation = if validation.is_empty() { training } else { validation };
    let stats = NormStats::from_training(training, &sim.timeline)?;
    let n_actions = sim.actions.len();
    let net = QNetwork::new(&cfg.layer_sizes(state_dim(n_actions), n_actions), derive_seed(cfg.seed, "init"))?;
    let lambdas = if cfg.lambda_set.is_empty() { vec![sim.lambda_carbon] } else { cfg.lambda_set.clone() };
    let mut lambda_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "lambda"));

    let mut learner = Learner {
        cfg,
        stats: &stats,
        target: net.clone(),
        scratch: TdScratch::new(&net),
        net,
        buffer: ReplayBuffer::new(cfg.capacity),
        explore_rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "explore")),
        replay_rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "replay")),
        eps: cfg.eps_start,
        episode: 0,
        pending: Vec::new(),
        updates: 0,
        episode_losses: Vec::new(),
        error: None,
    };

    let mut best: Option<(f64, usize, QNetwork)> = None;
    let mut log = Vec::with_capacity(cfg.episodes);
    for episode in 0..cfg.episodes.max(1) {
        let lambda = lambdas[lambda_rng.random_range(0..lambdas.len())];
        learner.eps = cfg.epsilon(episode);
        learner.episode = episode;
        learner.pending.clear();
        learner.episode_losses.clear();
        let before = learner.updates;

        let ep_sim = SimConfig { lambda_carbon: lambda, ..sim.clone() };
        let run = {
            let policy: &mut dyn Policy = &mut learner;
            engine::run(training, policy, &ep_sim)
        };
        let run = match run {
            Ok(r) => match learner.error.take() {
                Some(e) => return Err(e),
                None => r,
            },
            Err(EngineError::Policy(PolicyError::Agent(msg))) => {
                return Err(learner.error.take().unwrap_or(AgentError::Config(msg)))
            }
            Err(e) => return Err(e.into()),
        };

        let candidate = TrainedModel { net: learner.net.clone(), stats, actions: sim.actions.clone(), scales: sim.scales };
        let val_reward = validation_reward(validation, &candidate, sim, &lambdas)?;
        let losses = &learner.episode_losses;
        let mean_loss = if losses.is_empty() { 0.0 } else { losses.iter().sum::<f64>() / losses.len() as f64 };
        log.push(EpisodeLog {
            episode,
            lambda_carbon: lambda,
            epsilon: learner.eps,
            mean_loss,
            updates: learner.updates - before,
            train_reward: -run.report.weighted_cost,
            train_cold_starts: run.report.cold_start_count,
            train_keep_alive_g: run.report.keep_alive_carbon_g,
            val_reward,
        });
        log::debug!("episode {episode}: lambda={lambda} eps={:.3} loss={mean_loss:.4} val={val_reward:.4}", learner.eps);
        if best.as_ref().is_none_or(|(r, _, _)| val_reward > *r) {
            best = Some((val_reward, episode, candidate.net));
        }
    }
    let (_, best_episode, net) = best.expect("at least one episode ran");
    Ok(TrainOutput {
        model: TrainedModel { net, stats, actions: sim.actions.clone(), scales: sim.scales },
        best_episode,
        log,
    })
}

pub fn write_training_log<W: Write>(w: W, log: &[EpisodeLog]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for row in log {
        out.serialize(row)?;
    }
    out.flush()?;
    Ok(())
}
