//! Model file.
//!
//! A single JSON object:
//!
//! ```text
//! {
//!   "format": "keepalive-dqn",
//!   "version": 1,
//!   "actions": [1.0, 5.0, ...],            // seconds, one per output
//!   "scales": { "sigma_l": .., "sigma_c": .. },
//!   "norm": { "mem": {"mean": .., "std": ..}, "cpu": .., "log_cold": .., "ci": .. },
//!   "layers": [ { "inputs": d, "outputs": h, "weights": [..], "biases": [..] }, ... ]
//! }
//! ```
//!
//! `weights` is `outputs x inputs` in row-major order. Floats are written
//! with shortest round-trip formatting, so a reload is bit-identical.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::encoder::{state_dim, NormStats};
use super::network::{Dense, QNetwork};
use super::train::TrainedModel;
use super::{AgentError, Result};
use crate::engine::{ActionSet, CostScales};

pub const MODEL_FORMAT: &str = "keepalive-dqn";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format: String,
    version: u32,
    actions: Vec<f64>,
    scales: CostScales,
    norm: NormStats,
    layers: Vec<Dense>,
}

#[derive(Deserialize)]
struct Header {
    format: String,
    version: u32,
}

pub fn write_model<W: Write>(mut w: W, model: &TrainedModel) -> Result<()> {
    let file = ModelFile {
        format: MODEL_FORMAT.into(),
        version: MODEL_VERSION,
        actions: model.actions.as_slice().to_vec(),
        scales: model.scales,
        norm: model.stats,
        layers: model.net.layers().to_vec(),
    };
    serde_json::to_writer(&mut w, &file).map_err(|e| AgentError::Io(e.into()))?;
    writeln!(w)?;
    Ok(())
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_model(&mut buf, model)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Parses a model; `expected_actions` (if any) must match its output width.
pub fn read_model<R: Read>(mut r: R, expected_actions: Option<usize>) -> Result<TrainedModel> {
    let mut text = String::new();
    r.read_to_string(&mut text).map_err(|e| AgentError::Corrupt(e.to_string()))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| AgentError::Corrupt(e.to_string()))?;
    if header.format != MODEL_FORMAT {
        return Err(AgentError::Corrupt(format!("unexpected format tag `{}`", header.format)));
    }
    if header.version != MODEL_VERSION {
        return Err(AgentError::Version { found: header.version, supported: MODEL_VERSION });
    }
    let file: ModelFile = serde_json::from_str(&text).map_err(|e| AgentError::Corrupt(e.to_string()))?;
    let actions = ActionSet::new(file.actions).map_err(|e| AgentError::Corrupt(e.to_string()))?;
    if let Some(n) = expected_actions {
        if n != actions.len() {
            return Err(AgentError::ActionCount { model: actions.len(), config: n });
        }
    }
    let net = QNetwork::from_layers(file.layers)?;
    if net.output_dim() != actions.len() || net.input_dim() != state_dim(actions.len()) {
        return Err(AgentError::Corrupt(format!(
            "network {:?} does not fit {} actions",
            net.sizes(),
            actions.len()
        )));
    }
    Ok(TrainedModel { net, stats: file.norm, actions, scales: file.scales })
}

pub fn load_model(path: &Path, expected_actions: Option<usize>) -> Result<TrainedModel> {
    let f = fs::File::open(path)?;
    read_model(std::io::BufReader::new(f), expected_actions)
}
