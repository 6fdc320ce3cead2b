//! Decision context to network input.

use serde::{Deserialize, Serialize};

use super::{AgentError, Result};
use crate::carbon::CarbonTimeline;
use crate::policies::DecisionContext;
use crate::trace::Invocation;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: f64,
    pub std: f64,
}

impl Standardizer {
    /// Population statistics; a degenerate spread becomes 1.
    pub fn fit(values: impl IntoIterator<Item = f64>) -> Self {
        let (mut n, mut sum, mut sq) = (0.0, 0.0, 0.0);
        for v in values {
            n += 1.0;
            sum += v;
            sq += v * v;
        }
        if n == 0.0 {
            return Self { mean: 0.0, std: 1.0 };
        }
        let mean = sum / n;
        let var = (sq / n - mean * mean).max(0.0);
        let std = var.sqrt();
        Self { mean, std: if std > 1e-12 && std.is_finite() { std } else { 1.0 } }
    }

    pub fn apply(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }
}

/// Feature statistics from the training split. Latency is standardized
/// after `ln(1 + ms)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mem: Standardizer,
    pub cpu: Standardizer,
    pub log_cold: Standardizer,
    pub ci: Standardizer,
}

impl NormStats {
    /// Intensity statistics are taken at the training arrival times.
    pub fn from_training(training: &[Invocation], timeline: &CarbonTimeline) -> Result<Self> {
        if training.is_empty() {
            return Err(AgentError::EmptyTraining);
        }
        let ci = training.iter().map(|i| timeline.ci_at(i.ts_ms)).collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            mem: Standardizer::fit(training.iter().map(|i| i.mem_mb)),
            cpu: Standardizer::fit(training.iter().map(|i| i.cpu_cores)),
            log_cold: Standardizer::fit(training.iter().map(|i| i.cold_ms.ln_1p())),
            ci: Standardizer::fit(ci),
        })
    }

    pub fn identity() -> Self {
        let id = Standardizer { mean: 0.0, std: 1.0 };
        Self { mem: id, cpu: id, log_cold: id, ci: id }
    }
}

/// Input width for `n_actions` actions.
pub fn state_dim(n_actions: usize) -> usize {
    n_actions + 5
}

/// `[p_1..p_n, mem, cpu, ln(1+L_cold), ci, lambda]`, written into `out`.
pub fn encode_into(ctx: &DecisionContext<'_>, stats: &NormStats, out: &mut Vec<f64>) -> Result<()> {
    out.clear();
    out.extend_from_slice(ctx.reuse_p);
    out.push(stats.mem.apply(ctx.mem_mb));
    out.push(stats.cpu.apply(ctx.cpu_cores));
    out.push(stats.log_cold.apply(ctx.l_cold_ms.ln_1p()));
    out.push(stats.ci.apply(ctx.ci_now));
    out.push(ctx.lambda_carbon);
    if let Some(i) = out.iter().position(|v| !v.is_finite()) {
        return Err(AgentError::NonFinite(format!("state feature {i}")));
    }
    Ok(())
}

pub fn encode(ctx: &DecisionContext<'_>, stats: &NormStats) -> Result<Vec<f64>> {
    let mut v = Vec::with_capacity(state_dim(ctx.reuse_p.len()));
    encode_into(ctx, stats, &mut v)?;
    Ok(v)
}
