//! Trace-driven simulation of serverless pod keep-alive with per-phase
//! energy and carbon accounting, baseline policies, and a DQN agent.

pub mod agent;
pub mod carbon;
pub mod engine;
pub mod metrics;
pub mod policies;
pub mod seed;
pub mod trace;

pub use carbon::{to_carbon, CarbonBreakdown, CarbonTimeline, EnergyProfile};
pub use engine::{run, ActionSet, CiMode, CostScales, SimConfig, SimRun, StepOutcome};
pub use metrics::{CompareRow, SimReport, SweepRow};
pub use policies::{DecisionContext, NextGap, Policy, PolicyError};
pub use trace::{ColdStartTable, Invocation, SyntheticSpec, TraceSplit};
pub use agent::{DqnPolicy, NormStats, QNetwork, TrainConfig, TrainedModel};
