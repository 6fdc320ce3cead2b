//! Run configuration file.
//!
//! Relative paths are resolved against the directory of the config file.
//! Every seed in a run is derived from `sim.seed`, so `train.seed` and
//! `trace.synthetic.seed` are overwritten during resolution.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use keepalive_core::agent::TrainConfig;
use keepalive_core::engine::CiMode;
use keepalive_core::seed::derive_seed;
use keepalive_core::trace::{ColdStatistic, SyntheticSpec};
use keepalive_core::EnergyProfile;
use serde::{Deserialize, Serialize};

/// The commented example shipped with the crate.
pub const EXAMPLE: &str = include_str!("../example.toml");

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub trace: TraceSection,
    pub carbon: CarbonSection,
    pub sim: SimSection,
    pub policy: PolicySection,
    pub train: TrainConfig,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceSection {
    /// Trace CSV; exclusive with `synthetic`.
    pub path: Option<PathBuf>,
    /// Cold-start log CSV used to build the latency table of a trace file.
    pub cold_log: Option<PathBuf>,
    pub cold_statistic: ColdStatistic,
    /// Latency used when a trace file has no cold-start log, or the log is empty.
    pub cold_default_ms: f64,
    pub synthetic: Option<SyntheticSpec>,
    /// Train, validation and test shares of the pods.
    pub split: [f64; 3],
}

impl Default for TraceSection {
    fn default() -> Self {
        Self {
            path: None,
            cold_log: None,
            cold_statistic: ColdStatistic::Mean,
            cold_default_ms: 1000.0,
            synthetic: None,
            split: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CarbonSection {
    /// Intensity CSV (`hour_start_iso8601,ci_g_per_kwh`); a constant
    /// `constant_ci` when absent.
    pub timeline: Option<PathBuf>,
    /// Unix milliseconds of trace time 0. Unset aligns trace time 0 with the
    /// first timeline sample.
    pub trace_epoch_ms: Option<i64>,
    pub constant_ci: f64,
    /// Bundled preset name, ignored when `custom` is set.
    pub profile: String,
    pub custom: Option<EnergyProfile>,
    pub ci_mode: CiMode,
}

impl Default for CarbonSection {
    fn default() -> Self {
        Self {
            timeline: None,
            trace_epoch_ms: None,
            constant_ci: 400.0,
            profile: "m5-xeon".into(),
            custom: None,
            ci_mode: CiMode::SpanStart,
        }
    }
}

impl CarbonSection {
    pub fn energy_profile(&self) -> anyhow::Result<EnergyProfile> {
        match self.custom {
            Some(p) => {
                p.validate()?;
                Ok(p)
            }
            None => EnergyProfile::preset(&self.profile).with_context(|| {
                format!("known presets: {}", EnergyProfile::preset_names().join(", "))
            }),
        }
    }
}

/// Part of the trace a simulation replays.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Slice {
    #[default]
    All,
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub actions: Vec<f64>,
    pub network_const_ms: f64,
    pub window_w: usize,
    pub lambda_carbon: f64,
    /// Root seed of the run.
    pub seed: u64,
    pub empty_history_prior: f64,
    /// Keep-alive duration whose mean carbon normalizes the carbon term.
    pub scale_reference_k_s: f64,
    pub slice: Slice,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            actions: vec![1.0, 5.0, 10.0, 30.0, 60.0],
            network_const_ms: 0.0,
            window_w: 32,
            lambda_carbon: 0.5,
            seed: 0,
            empty_history_prior: 0.5,
            scale_reference_k_s: 60.0,
            slice: Slice::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub name: String,
    /// Timeout of the `fixed` policy.
    pub k: f64,
    /// Model file of the `rl` policy.
    pub model: Option<PathBuf>,
    pub pso_swarm: usize,
    pub pso_iters: usize,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self { name: "fixed".into(), k: 60.0, model: None, pso_swarm: 16, pso_iters: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// `error`, `warn`, `info`, `debug` or `trace`.
    pub verbosity: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out"), verbosity: "info".into() }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.rebase_paths(base);
        Ok(cfg)
    }

    fn rebase_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [&mut self.trace.path, &mut self.trace.cold_log, &mut self.carbon.timeline, &mut self.policy.model]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
        fix(&mut self.output.dir);
    }

    /// Fans the root seed out to every component and checks cross-section
    /// consistency.
    pub fn resolve(&mut self) -> anyhow::Result<()> {
        let root = self.sim.seed;
        self.train.seed = derive_seed(root, "agent");
        if let Some(spec) = &mut self.trace.synthetic {
            spec.seed = derive_seed(root, "trace");
        }
        match (&self.trace.path, &self.trace.synthetic) {
            (Some(_), Some(_)) => bail!("[trace] takes either `path` or `synthetic`, not both"),
            (None, None) => bail!("[trace] needs `path` or a `synthetic` table"),
            _ => {}
        }
        if self.trace.synthetic.is_some() && self.trace.cold_log.is_some() {
            bail!("`trace.cold_log` only applies to trace files");
        }
        self.train.validate()?;
        Ok(())
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.sim.seed, "split")
    }

    pub fn policy_seed(&self) -> u64 {
        derive_seed(self.sim.seed, "policy")
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }
}
