//! Trace-driven keep-alive simulation.
//!
//! Invocations are replayed in time order. For each one the engine decides
//! warm/cold from the pod's expiry, charges the keep-alive energy of the
//! preceding idle span, charges cold-start and execution energy, then asks
//! the policy for the next keep-alive duration.

use std::collections::{HashMap, VecDeque};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::carbon::{to_carbon, CarbonBreakdown, CarbonError, CarbonTimeline, EnergyProfile};
use crate::metrics::{self, ReportContext, SimReport};
use crate::policies::{DecisionContext, NextGap, Policy, PolicyError, Resolution};
use crate::seed::StableHasher;
use crate::trace::Invocation;

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("trace is not sorted by ts_ms at index {index}")]
    Unsorted { index: usize },
    #[error("policy `{policy}` returned {action_s} s, not in the action set {allowed:?}")]
    InvalidAction { policy: String, action_s: f64, allowed: Vec<f64> },
    #[error("empty trace")]
    EmptyTrace,
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Carbon(#[from] CarbonError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;

/// Ordered keep-alive candidates in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ActionSet(Vec<f64>);

impl ActionSet {
    pub fn new(actions: Vec<f64>) -> Result<Self> {
        if actions.is_empty() {
            return Err(EngineError::Config("action set must not be empty".into()));
        }
        if actions.iter().any(|k| !(*k > 0.0 && k.is_finite())) {
            return Err(EngineError::Config(format!("actions must be positive: {actions:?}")));
        }
        if actions.windows(2).any(|w| w[0] >= w[1]) {
            return Err(EngineError::Config(format!("actions must be strictly increasing: {actions:?}")));
        }
        Ok(Self(actions))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, index: usize) -> f64 {
        self.0[index]
    }

    pub fn index_of(&self, k: f64) -> Option<usize> {
        self.0.iter().position(|a| *a == k)
    }

    pub fn min(&self) -> f64 {
        self.0[0]
    }

    pub fn max(&self) -> f64 {
        self.0[self.0.len() - 1]
    }
}

impl Default for ActionSet {
    fn default() -> Self {
        Self(vec![1.0, 5.0, 10.0, 30.0, 60.0])
    }
}

impl TryFrom<Vec<f64>> for ActionSet {
    type Error = EngineError;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ActionSet> for Vec<f64> {
    fn from(a: ActionSet) -> Self {
        a.0
    }
}

/// Unit-balancing factors applied to the latency (ms) and carbon (g) terms
/// before they are mixed by `lambda_carbon`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostScales {
    pub sigma_l: f64,
    pub sigma_c: f64,
}

impl Default for CostScales {
    fn default() -> Self {
        Self { sigma_l: 1.0, sigma_c: 1.0 }
    }
}

impl CostScales {
    /// `sigma_l = 1 / mean cold latency` and `sigma_c = 1 / mean keep-alive
    /// carbon of a `reference_k_s` decision`, both over the training trace.
    /// Degenerate means fall back to 1.
    pub fn from_training(
        training: &[Invocation],
        profile: &EnergyProfile,
        timeline: &CarbonTimeline,
        reference_k_s: f64,
    ) -> Result<Self> {
        if training.is_empty() {
            return Ok(Self::default());
        }
        let n = training.len() as f64;
        let mean_l = training.iter().map(|i| i.cold_ms).sum::<f64>() / n;
        let mut carbon = 0.0;
        for inv in training {
            let e = profile.idle_energy(inv.mem_mb, inv.cpu_cores, reference_k_s)?;
            carbon += to_carbon(e, timeline.ci_at(inv.ts_ms)?)?;
        }
        let mean_c = carbon / n;
        let inv_or_one = |m: f64| if m > 0.0 && m.is_finite() { 1.0 / m } else { 1.0 };
        Ok(Self { sigma_l: inv_or_one(mean_l), sigma_c: inv_or_one(mean_c) })
    }
}

/// How the intensity of a span is chosen.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiMode {
    /// Intensity at the span start applies to the whole span.
    #[default]
    SpanStart,
    /// Time-weighted mean over the span, split at sample boundaries.
    Integrated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub actions: ActionSet,
    pub network_const_ms: f64,
    pub lambda_carbon: f64,
    pub profile: EnergyProfile,
    pub timeline: CarbonTimeline,
    pub window_w: usize,
    pub seed: u64,
    pub scales: CostScales,
    /// Reuse probability assumed for every k while a pod has no history.
    pub empty_history_prior: f64,
    pub ci_mode: CiMode,
}

impl SimConfig {
    pub fn new(profile: EnergyProfile, timeline: CarbonTimeline) -> Self {
        Self {
            actions: ActionSet::default(),
            network_const_ms: 0.0,
            lambda_carbon: 0.5,
            profile,
            timeline,
            window_w: 32,
            seed: 0,
            scales: CostScales::default(),
            empty_history_prior: 0.5,
            ci_mode: CiMode::SpanStart,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ActionSet::new(self.actions.0.clone())?;
        self.profile.validate()?;
        if !(self.network_const_ms >= 0.0 && self.network_const_ms.is_finite()) {
            return Err(EngineError::Config("network_const_ms must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.lambda_carbon) {
            return Err(EngineError::Config(format!("lambda_carbon must be in [0,1], got {}", self.lambda_carbon)));
        }
        if self.window_w == 0 {
            return Err(EngineError::Config("window_w must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.empty_history_prior) {
            return Err(EngineError::Config("empty_history_prior must be in [0,1]".into()));
        }
        if !(self.scales.sigma_l > 0.0 && self.scales.sigma_c > 0.0) {
            return Err(EngineError::Config("cost scales must be positive".into()));
        }
        Ok(())
    }

    fn span_ci(&self, start_ms: f64, end_ms: f64) -> Result<f64> {
        Ok(match self.ci_mode {
            CiMode::SpanStart => self.timeline.ci_at(start_ms.floor() as i64)?,
            CiMode::Integrated => self.timeline.mean_ci(start_ms, end_ms)?,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct PendingDecision {
    step: usize,
    action_s: f64,
    completion_ms: f64,
    cpu_cores: f64,
    mem_mb: f64,
    l_cold_ms: f64,
}

/// Per-pod state carried between invocations.
#[derive(Debug, Clone, PartialEq)]
pub struct PodRuntimeState {
    pub pod_id: String,
    pub function_id: String,
    /// `None` until the pod has served an invocation.
    pub warm_until_ms: Option<f64>,
    pub last_decision_s: Option<f64>,
    /// Most recent idle gaps (completion to next arrival) in seconds.
    pub reuse_history: VecDeque<f64>,
    window: usize,
    busy_until_ms: f64,
    pending: Option<PendingDecision>,
}

impl PodRuntimeState {
    pub fn new(pod_id: &str, function_id: &str, window: usize) -> Self {
        Self {
            pod_id: pod_id.to_string(),
            function_id: function_id.to_string(),
            warm_until_ms: None,
            last_decision_s: None,
            reuse_history: VecDeque::with_capacity(window),
            window: window.max(1),
            busy_until_ms: f64::NEG_INFINITY,
            pending: None,
        }
    }

    pub fn push_interval(&mut self, gap_s: f64) {
        if self.reuse_history.len() == self.window {
            self.reuse_history.pop_front();
        }
        self.reuse_history.push_back(gap_s);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Warmth {
    Warm,
    Cold,
}

/// Warm iff the pod exists and `arrival_ms <= warm_until_ms`.
pub fn classify(pod: Option<&PodRuntimeState>, arrival_ms: f64) -> Warmth {
    match pod.and_then(|p| p.warm_until_ms) {
        Some(until) if arrival_ms <= until => Warmth::Warm,
        _ => Warmth::Cold,
    }
}

/// Fraction of recorded intervals that are `<= k`, per action. An empty
/// history yields `prior` for every action.
pub fn reuse_probabilities(history: &VecDeque<f64>, actions: &ActionSet, prior: f64) -> Vec<f64> {
    if history.is_empty() {
        return vec![prior; actions.len()];
    }
    let n = history.len() as f64;
    actions
        .as_slice()
        .iter()
        .map(|&k| history.iter().filter(|&&g| g <= k).count() as f64 / n)
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseEnergy {
    pub exec_j: f64,
    pub idle_j: f64,
    pub cold_j: f64,
}

/// What happened to one invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    /// Position of the invocation in the simulated trace.
    pub index: usize,
    pub ts_ms: i64,
    pub was_cold: bool,
    /// Queueing + cold start + execution + network constant.
    pub e2e_latency_ms: f64,
    /// Wait behind a previous invocation still running on the same pod.
    pub queue_ms: f64,
    /// Keep-alive seconds charged for the idle span that ended at this arrival.
    pub idle_s_charged: f64,
    /// End-of-trace keep-alive charged for this step's own decision (only on
    /// a pod's last invocation).
    pub residual_idle_s: f64,
    pub energy: PhaseEnergy,
    pub carbon: CarbonBreakdown,
    pub action_s: f64,
    pub ci_at_decision: f64,
    /// Weighted cost of the decisions resolved at this step.
    pub weighted_cost: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimRun {
    pub report: SimReport,
    pub outcomes: Vec<StepOutcome>,
}

/// 64-bit fingerprint over the key fields of a trace.
pub fn trace_fingerprint(trace: &[Invocation]) -> String {
    let mut h = StableHasher::default();
    h.write_u64(trace.len() as u64);
    for inv in trace {
        h.write_u64(inv.ts_ms as u64);
        h.write(inv.pod_id.as_bytes());
        h.write(inv.function_id.as_bytes());
        h.write_u64(inv.exec_ms as u64);
    }
    format!("{:016x}", h.finish())
}

fn weighted(cfg: &SimConfig, cold: bool, l_cold_ms: f64, idle_g: f64) -> f64 {
    let lam = cfg.lambda_carbon;
    let cold_term = if cold { l_cold_ms * cfg.scales.sigma_l } else { 0.0 };
    (1.0 - lam) * cold_term + lam * idle_g * cfg.scales.sigma_c
}

/// Replays `trace` under `policy`.
pub fn run(trace: &[Invocation], policy: &mut dyn Policy, cfg: &SimConfig) -> Result<SimRun> {
    cfg.validate()?;
    if trace.is_empty() {
        return Err(EngineError::EmptyTrace);
    }
    if let Some(i) = trace.windows(2).position(|w| w[0].ts_ms > w[1].ts_ms) {
        return Err(EngineError::Unsorted { index: i + 1 });
    }

    let lookahead = policy.wants_lookahead();
    let next_on_pod = if lookahead { next_same_pod(trace) } else { Vec::new() };

    let mut slots: HashMap<&str, usize> = HashMap::new();
    let mut pods: Vec<PodRuntimeState> = Vec::new();
    let mut outcomes: Vec<StepOutcome> = Vec::with_capacity(trace.len());
    let mut overlaps = 0u64;
    let profile = &cfg.profile;

    for (i, inv) in trace.iter().enumerate() {
        let slot = *slots.entry(inv.pod_id.as_str()).or_insert_with(|| {
            pods.push(PodRuntimeState::new(&inv.pod_id, &inv.function_id, cfg.window_w));
            pods.len() - 1
        });
        let pod = &mut pods[slot];
        let arrival = inv.ts_ms as f64;
        let was_cold = classify(Some(pod), arrival) == Warmth::Cold;

        // (b) keep-alive span since the previous completion on this pod
        let mut idle_s = 0.0;
        let mut idle_j = 0.0;
        let mut idle_g = 0.0;
        let mut resolved_cost = 0.0;
        let mut observed_gap = None;
        if let Some(prev) = pod.pending.take() {
            let gap_s = ((arrival - prev.completion_ms) / 1000.0).max(0.0);
            idle_s = gap_s.min(prev.action_s);
            idle_j = profile.idle_energy(prev.mem_mb, prev.cpu_cores, idle_s)?;
            let ci = cfg.span_ci(prev.completion_ms, prev.completion_ms + idle_s * 1000.0)?;
            idle_g = to_carbon(idle_j, ci)?;
            resolved_cost = weighted(cfg, was_cold, prev.l_cold_ms, idle_g);
            observed_gap = Some(gap_s);
            policy.resolve(&Resolution {
                pod_slot: slot,
                action_s: prev.action_s,
                idle_s,
                idle_g,
                next_was_cold: was_cold,
                l_cold_ms: prev.l_cold_ms,
                weighted_cost: resolved_cost,
                terminal: false,
            });
        }

        let start = arrival.max(pod.busy_until_ms);
        let queue_ms = start - arrival;
        if queue_ms > 0.0 {
            overlaps += 1;
        }

        // (c) cold start, (d) execution; both priced from the arrival time so
        // that execution carbon is independent of earlier decisions
        let cold_ms = if was_cold { inv.cold_ms } else { 0.0 };
        let cold_j = if was_cold { profile.cold_energy(inv.cpu_cores, cold_ms / 1000.0)? } else { 0.0 };
        let cold_g = to_carbon(cold_j, cfg.span_ci(arrival, arrival + cold_ms)?)?;
        let exec_ms = inv.exec_ms as f64;
        let completion = start + cold_ms + exec_ms;
        let exec_j = profile.exec_energy(inv.mem_mb, inv.cpu_cores, exec_ms / 1000.0)?;
        let exec_g = to_carbon(exec_j, cfg.span_ci(arrival, arrival + exec_ms)?)?;

        // (e) next keep-alive decision
        let reuse_p = reuse_probabilities(&pod.reuse_history, &cfg.actions, cfg.empty_history_prior);
        let ci_now = cfg.timeline.ci_at(completion.floor() as i64)?;
        let next_gap = lookahead.then(|| match next_on_pod[i] {
            Some(j) => NextGap::After(((trace[j].ts_ms as f64 - completion) / 1000.0).max(0.0)),
            None => NextGap::Never,
        });
        let ctx = DecisionContext {
            pod_slot: slot,
            ts_ms: inv.ts_ms,
            reuse_p: &reuse_p,
            cpu_cores: inv.cpu_cores,
            mem_mb: inv.mem_mb,
            l_cold_ms: inv.cold_ms,
            ci_now,
            lambda_carbon: cfg.lambda_carbon,
            actions: &cfg.actions,
            profile,
            scales: cfg.scales,
            next_gap,
        };
        let action_s = policy.decide(&ctx)?;
        if cfg.actions.index_of(action_s).is_none() {
            return Err(EngineError::InvalidAction {
                policy: policy.name(),
                action_s,
                allowed: cfg.actions.as_slice().to_vec(),
            });
        }

        pod.warm_until_ms = Some(completion + action_s * 1000.0);
        pod.last_decision_s = Some(action_s);
        pod.busy_until_ms = completion;
        pod.pending = Some(PendingDecision {
            step: i,
            action_s,
            completion_ms: completion,
            cpu_cores: inv.cpu_cores,
            mem_mb: inv.mem_mb,
            l_cold_ms: inv.cold_ms,
        });
        // (f)
        if let Some(gap) = observed_gap {
            pod.push_interval(gap);
        }

        outcomes.push(StepOutcome {
            index: i,
            ts_ms: inv.ts_ms,
            was_cold,
            e2e_latency_ms: queue_ms + cold_ms + inv.exec_ms as f64 + cfg.network_const_ms,
            queue_ms,
            idle_s_charged: idle_s,
            residual_idle_s: 0.0,
            energy: PhaseEnergy { exec_j, idle_j, cold_j },
            carbon: CarbonBreakdown::new(exec_g, idle_g, cold_g),
            action_s,
            ci_at_decision: ci_now,
            weighted_cost: resolved_cost,
        });
    }

    // residual keep-alive of every pod's final decision
    for (slot, pod) in pods.iter_mut().enumerate() {
        let Some(prev) = pod.pending.take() else { continue };
        let idle_s = prev.action_s;
        let idle_j = profile.idle_energy(prev.mem_mb, prev.cpu_cores, idle_s)?;
        let ci = cfg.span_ci(prev.completion_ms, prev.completion_ms + idle_s * 1000.0)?;
        let idle_g = to_carbon(idle_j, ci)?;
        let cost = weighted(cfg, false, prev.l_cold_ms, idle_g);
        let out = &mut outcomes[prev.step];
        out.residual_idle_s = idle_s;
        out.energy.idle_j += idle_j;
        out.carbon.accumulate(&CarbonBreakdown::new(0.0, idle_g, 0.0));
        out.weighted_cost += cost;
        policy.resolve(&Resolution {
            pod_slot: slot,
            action_s: prev.action_s,
            idle_s,
            idle_g,
            next_was_cold: false,
            l_cold_ms: prev.l_cold_ms,
            weighted_cost: cost,
            terminal: true,
        });
    }

    let ctx = ReportContext {
        policy: policy.name(),
        lambda_carbon: cfg.lambda_carbon,
        scales: cfg.scales,
        seed: cfg.seed,
        network_const_ms: cfg.network_const_ms,
        window_w: cfg.window_w,
        actions: cfg.actions.clone(),
        trace_fingerprint: trace_fingerprint(trace),
        overlap_warnings: overlaps,
    };
    let report = metrics::aggregate(&outcomes, &ctx)?;
    Ok(SimRun { report, outcomes })
}

/// For each index, the index of the next invocation on the same pod.
pub fn next_same_pod(trace: &[Invocation]) -> Vec<Option<usize>> {
    let mut next = vec![None; trace.len()];
    let mut seen: HashMap<&str, usize> = HashMap::new();
    for (i, inv) in trace.iter().enumerate().rev() {
        next[i] = seen.insert(inv.pod_id.as_str(), i);
    }
    next
}

pub const OUTCOME_COLUMNS: [&str; 13] = [
    "ts_ms",
    "function_id",
    "pod_id",
    "was_cold",
    "e2e_ms",
    "idle_s",
    "exec_j",
    "idle_j",
    "cold_j",
    "exec_g",
    "idle_g",
    "cold_g",
    "action_s",
];

/// Writes the outcome stream; `idle_s` includes any end-of-trace residual.
pub fn write_outcomes_csv<W: Write>(w: W, trace: &[Invocation], outcomes: &[StepOutcome]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(OUTCOME_COLUMNS)?;
    for o in outcomes {
        let inv = &trace[o.index];
        out.write_record([
            o.ts_ms.to_string(),
            inv.function_id.clone(),
            inv.pod_id.clone(),
            o.was_cold.to_string(),
            o.e2e_latency_ms.to_string(),
            (o.idle_s_charged + o.residual_idle_s).to_string(),
            o.energy.exec_j.to_string(),
            o.energy.idle_j.to_string(),
            o.energy.cold_j.to_string(),
            o.carbon.exec_g.to_string(),
            o.carbon.idle_g.to_string(),
            o.carbon.cold_g.to_string(),
            o.action_s.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policies::FixedPolicy;

    fn inv(ts_ms: i64, pod: &str, exec_ms: i64, cold_ms: f64) -> Invocation {
        Invocation {
            ts_ms,
            function_id: format!("fn-{pod}"),
            pod_id: pod.to_string(),
            cpu_cores: 1.0,
            mem_mb: 100.0,
            exec_ms,
            runtime_tag: "python".into(),
            trigger_tag: "http".into(),
            cold_ms,
        }
    }

    fn cfg() -> SimConfig {
        SimConfig::new(EnergyProfile::new(3.0, 0.001, 0.2, 6.37).unwrap(), CarbonTimeline::constant(500.0).unwrap())
    }

    fn fixed(k: f64) -> FixedPolicy {
        FixedPolicy::new(k, &ActionSet::default()).unwrap()
    }

    #[test]
    fn reuse_within_keep_alive_is_warm() {
        // completion of the first call at 100 ms (cold 100, exec 0)
        let trace = [inv(0, "a", 0, 100.0), inv(3000, "a", 0, 100.0)];
        let run = run(&trace, &mut fixed(5.0), &cfg()).unwrap();
        assert!(run.outcomes[0].was_cold);
        assert!(!run.outcomes[1].was_cold);
        assert!((run.outcomes[1].idle_s_charged - 2.9).abs() < 1e-12);
    }

    #[test]
    fn instant_calls_charge_the_whole_gap() {
        let trace = [inv(0, "a", 0, 0.0), inv(3000, "a", 0, 0.0)];
        let run = run(&trace, &mut fixed(5.0), &cfg()).unwrap();
        assert!(!run.outcomes[1].was_cold);
        assert_eq!(run.outcomes[1].idle_s_charged, 3.0);
    }

    #[test]
    fn exec_carbon_ignores_decisions() {
        let mut c = cfg();
        c.timeline = CarbonTimeline::new(vec![(0, 100.0), (32_000, 900.0)]).unwrap();
        // under k=1 the second call is cold and its execution starts after the step
        let trace = [inv(0, "a", 10, 5000.0), inv(30_000, "a", 10, 5000.0)];
        let short = run(&trace, &mut fixed(1.0), &c).unwrap();
        let long = run(&trace, &mut fixed(60.0), &c).unwrap();
        assert_ne!(short.report.cold_start_count, long.report.cold_start_count);
        assert_eq!(short.report.exec_carbon_g.to_bits(), long.report.exec_carbon_g.to_bits());
    }

    #[test]
    fn gap_beyond_keep_alive_is_cold_and_charges_full_timeout() {
        let trace = [inv(0, "a", 0, 100.0), inv(10_000, "a", 0, 100.0)];
        let run = run(&trace, &mut fixed(5.0), &cfg()).unwrap();
        assert!(run.outcomes[1].was_cold);
        assert_eq!(run.outcomes[1].idle_s_charged, 5.0);
        assert_eq!(run.report.cold_start_count, 2);
    }

    #[test]
    fn single_invocation_charges_residual() {
        let trace = [inv(0, "a", 20, 100.0)];
        let c = cfg();
        let run = run(&trace, &mut fixed(60.0), &c).unwrap();
        let o = &run.outcomes[0];
        assert_eq!(o.residual_idle_s, 60.0);
        // 0.2 * (3 + 0.1) W * 60 s = 37.2 J at 500 g/kWh
        assert!((o.energy.idle_j - 37.2).abs() < 1e-9);
        assert!((o.carbon.idle_g - 37.2 / 3.6e6 * 500.0).abs() < 1e-15);
    }

    #[test]
    fn classify_tie_and_unseen() {
        let mut pod = PodRuntimeState::new("p", "f", 4);
        assert_eq!(classify(None, 0.0), Warmth::Cold);
        assert_eq!(classify(Some(&pod), 0.0), Warmth::Cold);
        pod.warm_until_ms = Some(5000.0);
        assert_eq!(classify(Some(&pod), 5000.0), Warmth::Warm);
        assert_eq!(classify(Some(&pod), 5001.0), Warmth::Cold);
    }

    #[test]
    fn reuse_probability_counts() {
        let h: VecDeque<f64> = [2.0, 8.0, 40.0].into_iter().collect();
        let p = reuse_probabilities(&h, &ActionSet::default(), 0.5);
        assert_eq!(p, vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 2.0 / 3.0, 1.0]);
        let empty = VecDeque::new();
        assert_eq!(reuse_probabilities(&empty, &ActionSet::default(), 0.5), vec![0.5; 5]);
    }

    #[test]
    fn history_window_is_bounded() {
        let mut pod = PodRuntimeState::new("p", "f", 3);
        for g in 0..10 {
            pod.push_interval(g as f64);
        }
        assert_eq!(pod.reuse_history.iter().copied().collect::<Vec<_>>(), vec![7.0, 8.0, 9.0]);
    }

    #[test]
    fn unsorted_trace_rejected() {
        let trace = [inv(10, "a", 0, 1.0), inv(5, "a", 0, 1.0)];
        assert!(matches!(run(&trace, &mut fixed(5.0), &cfg()), Err(EngineError::Unsorted { index: 1 })));
    }

    struct Rogue;
    impl Policy for Rogue {
        fn name(&self) -> String {
            "rogue".into()
        }
        fn decide(&mut self, _ctx: &DecisionContext<'_>) -> Result<f64, PolicyError> {
            Ok(7.0)
        }
    }

    #[test]
    fn out_of_set_action_rejected() {
        let trace = [inv(0, "a", 0, 1.0)];
        assert!(matches!(run(&trace, &mut Rogue, &cfg()), Err(EngineError::InvalidAction { .. })));
    }

    #[test]
    fn overlapping_calls_are_serialized_and_counted() {
        let trace = [inv(0, "a", 1000, 100.0), inv(500, "a", 1000, 100.0)];
        let run = run(&trace, &mut fixed(1.0), &cfg()).unwrap();
        assert!(!run.outcomes[1].was_cold);
        assert_eq!(run.outcomes[1].queue_ms, 600.0);
        assert_eq!(run.outcomes[1].idle_s_charged, 0.0);
        assert_eq!(run.report.overlap_warnings, 1);
    }

    #[test]
    fn integrated_mode_splits_hour_boundary() {
        let mut c = cfg();
        c.timeline = CarbonTimeline::new(vec![(0, 100.0), (3_600_000, 300.0)]).unwrap();
        c.ci_mode = CiMode::Integrated;
        // residual idle of 60 s straddling the boundary by 30 s each side
        let trace = [inv(3_570_000, "a", 0, 1.0)];
        let out = run(&trace, &mut fixed(60.0), &c).unwrap();
        let o = &out.outcomes[0];
        let expected = o.energy.idle_j / 3.6e6 * ((29.999 * 100.0 + 30.001 * 300.0) / 60.0);
        assert!((o.carbon.idle_g - expected).abs() / expected < 1e-9);
    }

    #[test]
    fn action_set_validation() {
        assert!(ActionSet::new(vec![]).is_err());
        assert!(ActionSet::new(vec![5.0, 1.0]).is_err());
        assert!(ActionSet::new(vec![0.0, 1.0]).is_err());
        let a = ActionSet::new(vec![1.0, 30.0]).unwrap();
        assert_eq!(a.index_of(30.0), Some(1));
        assert_eq!(a.index_of(5.0), None);
    }

    #[test]
    fn outcome_csv_has_header_and_rows() {
        let trace = [inv(0, "a", 0, 1.0), inv(100, "b", 0, 1.0)];
        let r = run(&trace, &mut fixed(1.0), &cfg()).unwrap();
        let mut buf = Vec::new();
        write_outcomes_csv(&mut buf, &trace, &r.outcomes).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("ts_ms,function_id,pod_id,was_cold,e2e_ms,idle_s,"));
        assert_eq!(text.lines().count(), 3);
    }
}
