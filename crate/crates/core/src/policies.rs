//! The decision interface and the non-learned keep-alive policies.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::carbon::{to_carbon, CarbonError, EnergyProfile};
use crate::engine::{ActionSet, CostScales};

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("unknown action {0} s")]
    UnknownAction(f64),
    #[error("oracle requires the true next reuse gap")]
    MissingLookahead,
    #[error("invalid policy parameters: {0}")]
    InvalidParams(String),
    #[error("learned policy failed: {0}")]
    Agent(String),
    #[error(transparent)]
    Carbon(#[from] CarbonError),
}

pub type Result<T, E = PolicyError> = std::result::Result<T, E>;

/// Time until a pod's next arrival, measured from the completion of the
/// current invocation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NextGap {
    After(f64),
    Never,
}

/// The engine's view at a decision point.
#[derive(Debug, Clone)]
pub struct DecisionContext<'a> {
    pub pod_slot: usize,
    pub ts_ms: i64,
    /// Estimated reuse probability for each action, nondecreasing in k.
    pub reuse_p: &'a [f64],
    pub cpu_cores: f64,
    pub mem_mb: f64,
    pub l_cold_ms: f64,
    /// Intensity at the start of the keep-alive span.
    pub ci_now: f64,
    pub lambda_carbon: f64,
    pub actions: &'a ActionSet,
    pub profile: &'a EnergyProfile,
    pub scales: CostScales,
    /// Only populated for policies that ask for lookahead.
    pub next_gap: Option<NextGap>,
}

/// Feedback on a previous decision, delivered once its outcome is known
/// (the pod's next arrival, or the end of the trace).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Resolution {
    pub pod_slot: usize,
    pub action_s: f64,
    pub idle_s: f64,
    pub idle_g: f64,
    pub next_was_cold: bool,
    pub l_cold_ms: f64,
    pub weighted_cost: f64,
    pub terminal: bool,
}

/// A keep-alive decision function.
pub trait Policy {
    fn name(&self) -> String;

    /// Returns a keep-alive duration from `ctx.actions`.
    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<f64>;

    fn wants_lookahead(&self) -> bool {
        false
    }

    fn resolve(&mut self, _resolution: &Resolution) {}
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn name(&self) -> String {
        (**self).name()
    }

    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<f64> {
        (**self).decide(ctx)
    }

    fn wants_lookahead(&self) -> bool {
        (**self).wants_lookahead()
    }

    fn resolve(&mut self, resolution: &Resolution) {
        (**self).resolve(resolution)
    }
}

/// Expected latency penalty (ms) and keep-alive carbon (g) of choosing `k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostPair {
    pub c_cold: f64,
    pub c_carbon: f64,
}

pub fn cost_pair(ctx: &DecisionContext<'_>, k: f64) -> Result<CostPair> {
    let i = ctx.actions.index_of(k).ok_or(PolicyError::UnknownAction(k))?;
    Ok(cost_pair_at(ctx, i)?)
}

fn keep_alive_carbon(ctx: &DecisionContext<'_>, seconds: f64) -> Result<f64, CarbonError> {
    to_carbon(ctx.profile.idle_energy(ctx.mem_mb, ctx.cpu_cores, seconds)?, ctx.ci_now)
}

fn cost_pair_at(ctx: &DecisionContext<'_>, i: usize) -> Result<CostPair, CarbonError> {
    Ok(CostPair {
        c_cold: (1.0 - ctx.reuse_p[i]) * ctx.l_cold_ms,
        c_carbon: keep_alive_carbon(ctx, ctx.actions.get(i))?,
    })
}

fn mix(ctx: &DecisionContext<'_>, c_cold: f64, c_carbon: f64) -> f64 {
    let lam = ctx.lambda_carbon;
    (1.0 - lam) * c_cold * ctx.scales.sigma_l + lam * c_carbon * ctx.scales.sigma_c
}

/// Index of the smallest score; ties go to the smallest k.
fn argmin(scores: impl IntoIterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, s) in scores.into_iter().enumerate() {
        if s < best.1 {
            best = (i, s);
        }
    }
    best.0
}

pub fn latency_min(ctx: &DecisionContext<'_>) -> f64 {
    let i = argmin((0..ctx.actions.len()).map(|i| (1.0 - ctx.reuse_p[i]) * ctx.l_cold_ms));
    ctx.actions.get(i)
}

pub fn carbon_min(ctx: &DecisionContext<'_>) -> f64 {
    ctx.actions.min()
}

/// One-step minimizer of the preference-weighted expected cost.
pub fn weighted_greedy(ctx: &DecisionContext<'_>) -> Result<f64> {
    let mut scores = Vec::with_capacity(ctx.actions.len());
    for i in 0..ctx.actions.len() {
        let c = cost_pair_at(ctx, i)?;
        scores.push(mix(ctx, c.c_cold, c.c_carbon));
    }
    Ok(ctx.actions.get(argmin(scores)))
}

/// Perfect-knowledge choice: cold penalty only if the next gap exceeds k,
/// keep-alive carbon only for the part of k actually spent idle.
pub fn oracle_policy(ctx: &DecisionContext<'_>) -> Result<f64> {
    let gap = match ctx.next_gap {
        Some(NextGap::After(g)) => g,
        Some(NextGap::Never) => f64::INFINITY,
        None => return Err(PolicyError::MissingLookahead),
    };
    let mut scores = Vec::with_capacity(ctx.actions.len());
    for &k in ctx.actions.as_slice() {
        let cold = if gap > k { ctx.l_cold_ms } else { 0.0 };
        scores.push(mix(ctx, cold, keep_alive_carbon(ctx, gap.min(k))?));
    }
    Ok(ctx.actions.get(argmin(scores)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsoParams {
    pub swarm: usize,
    pub iters: usize,
    pub seed: u64,
    pub inertia: f64,
    pub c_personal: f64,
    pub c_global: f64,
}

impl Default for PsoParams {
    fn default() -> Self {
        Self { swarm: 16, iters: 50, seed: 0, inertia: 0.7, c_personal: 1.5, c_global: 1.5 }
    }
}

impl PsoParams {
    pub fn validate(&self) -> Result<()> {
        if self.swarm < 2 || self.iters < 1 {
            return Err(PolicyError::InvalidParams(format!(
                "pso needs swarm >= 2 and iters >= 1 (got swarm={}, iters={})",
                self.swarm, self.iters
            )));
        }
        Ok(())
    }
}

/// Reuse probability at a continuous keep-alive, linear between grid points.
fn interpolated_p(ctx: &DecisionContext<'_>, x: f64) -> f64 {
    let a = ctx.actions.as_slice();
    let p = ctx.reuse_p;
    if x <= a[0] {
        return p[0];
    }
    for j in 0..a.len() - 1 {
        if x <= a[j + 1] {
            let w = (x - a[j]) / (a[j + 1] - a[j]);
            return p[j] + w * (p[j + 1] - p[j]);
        }
    }
    p[a.len() - 1]
}

fn pso_objective(ctx: &DecisionContext<'_>, x: f64) -> Result<f64, CarbonError> {
    let c_cold = (1.0 - interpolated_p(ctx, x)) * ctx.l_cold_ms;
    Ok(mix(ctx, c_cold, keep_alive_carbon(ctx, x)?))
}

fn snap(actions: &ActionSet, x: f64) -> f64 {
    let i = argmin(actions.as_slice().iter().map(|a| (a - x).abs()));
    actions.get(i)
}

/// Global-best particle swarm over `[min k, max k]`, snapped to the grid.
/// The RNG is reseeded on every call so the result is a function of
/// `(ctx, params)`.
pub fn pso_policy(ctx: &DecisionContext<'_>, params: &PsoParams) -> Result<f64> {
    params.validate()?;
    let (lo, hi) = (ctx.actions.min(), ctx.actions.max());
    if lo == hi {
        return Ok(lo);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let vmax = 0.5 * (hi - lo);
    let mut x: Vec<f64> = (0..params.swarm).map(|_| rng.random_range(lo..=hi)).collect();
    let mut v: Vec<f64> = (0..params.swarm).map(|_| rng.random_range(-vmax..=vmax)).collect();
    let mut best_x = x.clone();
    let mut best_f = Vec::with_capacity(params.swarm);
    for &xi in &x {
        best_f.push(pso_objective(ctx, xi)?);
    }
    let g = argmin(best_f.iter().copied());
    let (mut gx, mut gf) = (best_x[g], best_f[g]);

    for _ in 0..params.iters {
        for i in 0..params.swarm {
            let (r1, r2): (f64, f64) = (rng.random(), rng.random());
            v[i] = params.inertia * v[i]
                + params.c_personal * r1 * (best_x[i] - x[i])
                + params.c_global * r2 * (gx - x[i]);
            v[i] = v[i].clamp(-vmax, vmax);
            x[i] = (x[i] + v[i]).clamp(lo, hi);
            let f = pso_objective(ctx, x[i])?;
            if f < best_f[i] {
                best_f[i] = f;
                best_x[i] = x[i];
                if f < gf {
                    gf = f;
                    gx = x[i];
                }
            }
        }
    }
    Ok(snap(ctx.actions, gx))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPolicy {
    k: f64,
}

impl FixedPolicy {
    pub fn new(k: f64, actions: &ActionSet) -> Result<Self> {
        actions.index_of(k).ok_or(PolicyError::UnknownAction(k))?;
        Ok(Self { k })
    }
}

impl Policy for FixedPolicy {
    fn name(&self) -> String {
        format!("fixed-{}s", self.k)
    }

    fn decide(&mut self, _ctx: &DecisionContext<'_>) -> Result<f64> {
        Ok(self.k)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LatencyMin;

impl Policy for LatencyMin {
    fn name(&self) -> String {
        "latency_min".into()
    }

    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<f64> {
        Ok(latency_min(ctx))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct CarbonMin;

impl Policy for CarbonMin {
    fn name(&self) -> String {
        "carbon_min".into()
    }

    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<f64> {
        Ok(carbon_min(ctx))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct WeightedGreedy;

impl Policy for WeightedGreedy {
    fn name(&self) -> String {
        "weighted_greedy".into()
    }

    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<f64> {
        weighted_greedy(ctx)
    }
}

#[derive(Debug, Clone)]
pub struct PsoPolicy {
    params: PsoParams,
}

impl PsoPolicy {
    pub fn new(params: PsoParams) -> Result<Self> {
        params.validate()?;
        Ok(Self { params })
    }
}

impl Policy for PsoPolicy {
    fn name(&self) -> String {
        "pso".into()
    }

    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<f64> {
        pso_policy(ctx, &self.params)
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePolicy;

impl Policy for OraclePolicy {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn decide(&mut self, ctx: &DecisionContext<'_>) -> Result<f64> {
        oracle_policy(ctx)
    }

    fn wants_lookahead(&self) -> bool {
        true
    }
}

/// Replays a fixed list of actions, one per decision in trace order.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    actions: Vec<f64>,
    next: usize,
}

impl ScriptedPolicy {
    pub fn new(actions: Vec<f64>) -> Self {
        Self { actions, next: 0 }
    }
}

impl Policy for ScriptedPolicy {
    fn name(&self) -> String {
        "scripted".into()
    }

    fn decide(&mut self, _ctx: &DecisionContext<'_>) -> Result<f64> {
        let k = *self
            .actions
            .get(self.next)
            .ok_or_else(|| PolicyError::InvalidParams("script exhausted".into()))?;
        self.next += 1;
        Ok(k)
    }
}

/// Names accepted in configuration and on the command line.
pub const POLICY_NAMES: [&str; 6] = ["fixed", "latency_min", "carbon_min", "pso", "oracle", "rl"];
