//! JSON scenario files.
//!
//! ```json
//! {
//!   "n": 1, "m": 1,
//!   "F": [[1.0]], "Q": [[1.0]], "x0_mean": [0.0], "P0": [[1.0]],
//!   "agents": [ { "id": 1, "H": [[1.0]], "R": [[1.0]] } ],
//!   "edges": []
//! }
//! ```
//!
//! `edges` holds `[from, to]` pairs; agent ids are 1-based and may appear in
//! any order in `agents`.

use std::fs;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::linalg::{from_rows, to_rows};
use crate::model::{
    validate, AgentId, AgentObservation, ModelError, NetworkGraph, StateSpaceNetwork, SystemModel,
    ValidationReport,
};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {error}")]
    Io { path: String, error: std::io::Error },
    #[error("malformed scenario JSON: {0}")]
    Parse(serde_json::Error),
    #[error("malformed scenario: {0}")]
    Structure(String),
    #[error("invalid scenario: {0}")]
    Invalid(ValidationReport),
}

impl From<serde_json::Error> for ScenarioError {
    fn from(e: serde_json::Error) -> Self {
        ScenarioError::Parse(e)
    }
}

impl From<ModelError> for ScenarioError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Invalid(r) => ScenarioError::Invalid(r),
            other => ScenarioError::Structure(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentEntry {
    pub id: usize,
    #[serde(rename = "H")]
    pub h: Vec<Vec<f64>>,
    #[serde(rename = "R")]
    pub r: Vec<Vec<f64>>,
}

/// On-disk form of a [`StateSpaceNetwork`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub n: usize,
    pub m: usize,
    #[serde(rename = "F")]
    pub f: Vec<Vec<f64>>,
    #[serde(rename = "Q")]
    pub q: Vec<Vec<f64>>,
    pub x0_mean: Vec<f64>,
    #[serde(rename = "P0")]
    pub p0: Vec<Vec<f64>>,
    pub agents: Vec<AgentEntry>,
    #[serde(default)]
    pub edges: Vec<[usize; 2]>,
}

impl ScenarioFile {
    /// Structural conversion only; call [`validate`] for the model invariants.
    pub fn to_model(&self) -> Result<StateSpaceNetwork, ScenarioError> {
        let mat = |what: &str, rows: &[Vec<f64>]| {
            from_rows(rows).map_err(|e| ScenarioError::Structure(format!("{what}: {e}")))
        };
        let system = SystemModel {
            n: self.n,
            f: mat("F", &self.f)?,
            q: mat("Q", &self.q)?,
            x0_mean: DVector::from_vec(self.x0_mean.clone()),
            p0: mat("P0", &self.p0)?,
        };

        let mut entries: Vec<&AgentEntry> = self.agents.iter().collect();
        entries.sort_by_key(|a| a.id);
        let mut agents = Vec::with_capacity(entries.len());
        for (pos, e) in entries.iter().enumerate() {
            if e.id != pos + 1 {
                return Err(ScenarioError::Structure(format!(
                    "agent ids must be exactly 1..={}; found id {} at sorted position {}",
                    self.m,
                    e.id,
                    pos + 1
                )));
            }
            agents.push(AgentObservation::new(
                AgentId(e.id),
                mat(&format!("H of agent {}", e.id), &e.h)?,
                mat(&format!("R of agent {}", e.id), &e.r)?,
            ));
        }

        let edges: Vec<_> = self.edges.iter().map(|&[a, b]| (AgentId(a), AgentId(b))).collect();
        let graph = NetworkGraph::from_edges(self.m, &edges)?;
        Ok(StateSpaceNetwork::new(system, agents, graph))
    }

    pub fn from_model(model: &StateSpaceNetwork) -> Self {
        let sys = &model.system;
        ScenarioFile {
            description: None,
            n: sys.n,
            m: model.m(),
            f: to_rows(&sys.f),
            q: to_rows(&sys.q),
            x0_mean: sys.x0_mean.iter().copied().collect(),
            p0: to_rows(&sys.p0),
            agents: model
                .agents
                .iter()
                .map(|a| AgentEntry { id: a.id.0, h: to_rows(&a.h), r: to_rows(&a.r) })
                .collect(),
            edges: model.graph.edges().iter().map(|&(a, b)| [a.0, b.0]).collect(),
        }
    }
}

/// Parses and validates a scenario document.
pub fn parse_scenario(text: &str) -> Result<StateSpaceNetwork, ScenarioError> {
    let file: ScenarioFile = serde_json::from_str(text)?;
    let model = file.to_model()?;
    let report = validate(&model);
    if !report.is_valid() {
        return Err(ScenarioError::Invalid(report));
    }
    Ok(model)
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<StateSpaceNetwork, ScenarioError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)
        .map_err(|error| ScenarioError::Io { path: path.display().to_string(), error })?;
    parse_scenario(&text)
}

/// Hex SHA-256 of the canonical JSON form of the model. Descriptions,
/// whitespace and agent ordering in the source file do not affect it.
pub fn scenario_hash(model: &StateSpaceNetwork) -> String {
    let canonical = serde_json::to_vec(&ScenarioFile::from_model(model))
        .expect("scenario serialization cannot fail");
    hex::encode(Sha256::digest(&canonical))
}
