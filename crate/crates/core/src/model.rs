//! The state-space-network model: shared LTI dynamics, per-agent linear
//! sensors, and the directed communication graph between agents.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

/// 1-based agent identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AgentId(pub usize);

impl AgentId {
    /// Zero-based position in agent-ordered collections.
    pub fn index(self) -> usize {
        self.0 - 1
    }

    pub fn from_index(idx: usize) -> Self {
        AgentId(idx + 1)
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "agent {}", self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("{id} out of range (network has {m} agents)")]
    AgentOutOfRange { id: AgentId, m: usize },
    #[error("invalid model: {0}")]
    Invalid(ValidationReport),
}

/// Shared dynamics `x_k = F x_{k-1} + w_{k-1}` with `w ~ N(0, Q)` and
/// prior `x_0 ~ N(x0_mean, P0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    pub n: usize,
    pub f: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub x0_mean: DVector<f64>,
    pub p0: DMatrix<f64>,
}

impl SystemModel {
    pub fn new(f: DMatrix<f64>, q: DMatrix<f64>, x0_mean: DVector<f64>, p0: DMatrix<f64>) -> Self {
        SystemModel { n: f.nrows(), f, q, x0_mean, p0 }
    }
}

/// Sensor of one agent: `z_{i,k} = H_i x_k + v_{i,k}`, `v ~ N(0, R_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentObservation {
    pub id: AgentId,
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl AgentObservation {
    pub fn new(id: AgentId, h: DMatrix<f64>, r: DMatrix<f64>) -> Self {
        AgentObservation { id, h, r }
    }

    /// Measurement dimension `p_i`.
    pub fn p(&self) -> usize {
        self.h.nrows()
    }
}

/// Directed graph stored as its adjacency matrix: `a(i, j) = 1` iff agent `i`
/// receives from agent `j` (edge `j → i`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkGraph {
    m: usize,
    adjacency: Vec<u32>,
}

impl NetworkGraph {
    pub fn empty(m: usize) -> Self {
        NetworkGraph { m, adjacency: vec![0; m * m] }
    }

    /// Raw adjacency entries, row-major. Entries are not checked here; see
    /// [`validate`].
    pub fn from_adjacency(m: usize, adjacency: Vec<u32>) -> Self {
        assert_eq!(adjacency.len(), m * m, "adjacency must be m×m");
        NetworkGraph { m, adjacency }
    }

    /// Builds the graph from `(from, to)` pairs. Repeated edges accumulate, so
    /// a duplicated edge shows up as a non-binary entry during validation.
    pub fn from_edges(m: usize, edges: &[(AgentId, AgentId)]) -> Result<Self, ModelError> {
        let mut g = NetworkGraph::empty(m);
        for &(from, to) in edges {
            for id in [from, to] {
                if id.0 == 0 || id.0 > m {
                    return Err(ModelError::AgentOutOfRange { id, m });
                }
            }
            g.adjacency[to.index() * m + from.index()] += 1;
        }
        Ok(g)
    }

    /// Adds both directions for every pair.
    pub fn undirected(m: usize, pairs: &[(AgentId, AgentId)]) -> Result<Self, ModelError> {
        let both: Vec<_> = pairs.iter().flat_map(|&(a, b)| [(a, b), (b, a)]).collect();
        Self::from_edges(m, &both)
    }

    /// Directed chain `1 → 2 → … → m`.
    pub fn chain(m: usize) -> Self {
        let edges: Vec<_> = (1..m).map(|i| (AgentId(i), AgentId(i + 1))).collect();
        Self::from_edges(m, &edges).expect("chain ids are in range")
    }

    pub fn complete(m: usize) -> Self {
        let mut g = NetworkGraph::empty(m);
        for i in 0..m {
            for j in 0..m {
                if i != j {
                    g.adjacency[i * m + j] = 1;
                }
            }
        }
        g
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Zero-based adjacency entry `a_ij`.
    pub fn entry(&self, i: usize, j: usize) -> u32 {
        self.adjacency[i * self.m + j]
    }

    pub fn set_entry(&mut self, i: usize, j: usize, v: u32) {
        self.adjacency[i * self.m + j] = v;
    }

    /// Directed edges as `(from, to)` pairs in row-major order of the adjacency.
    pub fn edges(&self) -> Vec<(AgentId, AgentId)> {
        let mut out = Vec::new();
        for i in 0..self.m {
            for j in 0..self.m {
                for _ in 0..self.entry(i, j) {
                    out.push((AgentId::from_index(j), AgentId::from_index(i)));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().filter(|&&a| a != 0).count()
    }

    fn check(&self, id: AgentId) -> Result<(), ModelError> {
        if id.0 == 0 || id.0 > self.m {
            Err(ModelError::AgentOutOfRange { id, m: self.m })
        } else {
            Ok(())
        }
    }

    /// Agents that send to `id`, ascending.
    pub fn open_neighborhood(&self, id: AgentId) -> Result<Vec<AgentId>, ModelError> {
        self.check(id)?;
        let i = id.index();
        Ok((0..self.m)
            .filter(|&j| j != i && self.entry(i, j) != 0)
            .map(AgentId::from_index)
            .collect())
    }

    /// `{id}` together with its open neighborhood, ascending.
    pub fn closed_neighborhood(&self, id: AgentId) -> Result<Vec<AgentId>, ModelError> {
        let mut out = self.open_neighborhood(id)?;
        let pos = out.partition_point(|&j| j < id);
        out.insert(pos, id);
        Ok(out)
    }
}

/// Free-function form of [`NetworkGraph::open_neighborhood`].
pub fn open_neighborhood(graph: &NetworkGraph, id: AgentId) -> Result<Vec<AgentId>, ModelError> {
    graph.open_neighborhood(id)
}

/// Free-function form of [`NetworkGraph::closed_neighborhood`].
pub fn closed_neighborhood(graph: &NetworkGraph, id: AgentId) -> Result<Vec<AgentId>, ModelError> {
    graph.closed_neighborhood(id)
}

/// Dynamics, sensors and graph bundled together. Agents are ordered by id.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpaceNetwork {
    pub system: SystemModel,
    pub agents: Vec<AgentObservation>,
    pub graph: NetworkGraph,
}

impl StateSpaceNetwork {
    pub fn new(system: SystemModel, agents: Vec<AgentObservation>, graph: NetworkGraph) -> Self {
        StateSpaceNetwork { system, agents, graph }
    }

    pub fn n(&self) -> usize {
        self.system.n
    }

    pub fn m(&self) -> usize {
        self.graph.m()
    }

    pub fn agent(&self, id: AgentId) -> Result<&AgentObservation, ModelError> {
        self.graph.check(id)?;
        self.agents
            .get(id.index())
            .ok_or(ModelError::AgentOutOfRange { id, m: self.agents.len() })
    }

    pub fn ids(&self) -> impl Iterator<Item = AgentId> + '_ {
        (0..self.agents.len()).map(AgentId::from_index)
    }

    /// Total measurement dimension `Σ p_i`.
    pub fn total_measurement_dim(&self) -> usize {
        self.agents.iter().map(AgentObservation::p).sum()
    }

    /// Returns the model if [`validate`] finds nothing, else the report.
    pub fn validated(self) -> Result<Self, ModelError> {
        let report = validate(&self);
        if report.is_valid() {
            Ok(self)
        } else {
            Err(ModelError::Invalid(report))
        }
    }
}

/// One broken model invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    ZeroStateDimension,
    Dimension { what: String, expected: String, found: String },
    NotSymmetric(String),
    NotPsd(String),
    NotPositiveDefinite(String),
    NonFinite(String),
    EmptyMeasurement(AgentId),
    AgentOrder { position: usize, found: AgentId },
    AgentCount { graph: usize, agents: usize },
    SelfLoop(AgentId),
    NonBinaryAdjacency { row: AgentId, col: AgentId, value: u32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::ZeroStateDimension => write!(f, "state dimension n must be positive"),
            Violation::Dimension { what, expected, found } => {
                write!(f, "{what} has dimension {found}, expected {expected}")
            }
            Violation::NotSymmetric(what) => write!(f, "{what} not symmetric"),
            Violation::NotPsd(what) => write!(f, "{what} not PSD"),
            Violation::NotPositiveDefinite(what) => write!(f, "{what} not positive definite"),
            Violation::NonFinite(what) => write!(f, "{what} has non-finite entries"),
            Violation::EmptyMeasurement(id) => write!(f, "{id} has an empty measurement (p = 0)"),
            Violation::AgentOrder { position, found } => {
                write!(f, "observation #{} carries id {}, expected {}", position + 1, found.0, position + 1)
            }
            Violation::AgentCount { graph, agents } => {
                write!(f, "graph has {graph} agents but {agents} observations were given")
            }
            Violation::SelfLoop(id) => write!(f, "self-loop at agent {}", id.0),
            Violation::NonBinaryAdjacency { row, col, value } => write!(
                f,
                "adjacency entry ({}, {}) is {value}, expected 0 or 1",
                row.0, col.0
            ),
        }
    }
}

/// Every violation found by [`validate`]; empty when the model is consistent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    /// Human-readable messages, one per violation.
    pub fn messages(&self) -> Vec<String> {
        self.violations.iter().map(ToString::to_string).collect()
    }

    /// True when any message contains `needle`.
    pub fn mentions(&self, needle: &str) -> bool {
        self.messages().iter().any(|m| m.contains(needle))
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.messages().join("; "))
    }
}

fn shape(m: &DMatrix<f64>) -> String {
    format!("{}×{}", m.nrows(), m.ncols())
}

fn check_matrix(
    out: &mut Vec<Violation>,
    what: &str,
    m: &DMatrix<f64>,
    rows: usize,
    cols: usize,
) -> bool {
    if m.iter().any(|v| !v.is_finite()) {
        out.push(Violation::NonFinite(what.to_string()));
        return false;
    }
    if m.shape() != (rows, cols) {
        out.push(Violation::Dimension {
            what: what.to_string(),
            expected: format!("{rows}×{cols}"),
            found: shape(m),
        });
        return false;
    }
    true
}

fn check_covariance(out: &mut Vec<Violation>, what: &str, m: &DMatrix<f64>, n: usize, strict: bool) {
    if !check_matrix(out, what, m, n, n) {
        return;
    }
    if !linalg::is_symmetric(m) {
        out.push(Violation::NotSymmetric(what.to_string()));
    }
    if strict {
        if !linalg::is_positive_definite(m) {
            out.push(Violation::NotPositiveDefinite(what.to_string()));
        }
    } else if !linalg::is_psd(m) {
        out.push(Violation::NotPsd(what.to_string()));
    }
}

/// Collects every invariant violation of the model. Never fails.
pub fn validate(model: &StateSpaceNetwork) -> ValidationReport {
    let mut v = Vec::new();
    let sys = &model.system;
    let n = sys.n;
    if n == 0 {
        v.push(Violation::ZeroStateDimension);
    }
    check_matrix(&mut v, "F", &sys.f, n, n);
    check_covariance(&mut v, "Q", &sys.q, n, false);
    check_covariance(&mut v, "P0", &sys.p0, n, false);
    if sys.x0_mean.iter().any(|x| !x.is_finite()) {
        v.push(Violation::NonFinite("x0_mean".into()));
    } else if sys.x0_mean.len() != n {
        v.push(Violation::Dimension {
            what: "x0_mean".into(),
            expected: n.to_string(),
            found: sys.x0_mean.len().to_string(),
        });
    }

    let m = model.graph.m();
    if model.agents.len() != m {
        v.push(Violation::AgentCount { graph: m, agents: model.agents.len() });
    }
    for (pos, obs) in model.agents.iter().enumerate() {
        if obs.id != AgentId::from_index(pos) {
            v.push(Violation::AgentOrder { position: pos, found: obs.id });
        }
        let p = obs.p();
        if p == 0 {
            v.push(Violation::EmptyMeasurement(obs.id));
            continue;
        }
        let label = obs.id.0;
        check_matrix(&mut v, &format!("H of agent {label}"), &obs.h, p, n);
        check_covariance(&mut v, &format!("R of agent {label}"), &obs.r, p, true);
    }

    for i in 0..m {
        for j in 0..m {
            let a = model.graph.entry(i, j);
            if i == j && a != 0 {
                v.push(Violation::SelfLoop(AgentId::from_index(i)));
            } else if a > 1 {
                v.push(Violation::NonBinaryAdjacency {
                    row: AgentId::from_index(i),
                    col: AgentId::from_index(j),
                    value: a,
                });
            }
        }
    }
    ValidationReport { violations: v }
}
