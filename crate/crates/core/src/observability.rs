//! Observability of the state through each agent's reachable sensors.
//!
//! Agent `i` can reconstruct the state when the observability matrices of
//! every agent with a directed walk to `i` (itself included) jointly have
//! rank `n`. The walk structure comes from the connectivity matrix
//! `I + A + … + A^{m-1}`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::linalg::{self, vstack};
use crate::model::{AgentId, AgentObservation, ModelError, NetworkGraph, StateSpaceNetwork, SystemModel};

/// `[H; HF; …; HF^{n-1}]`.
pub fn local_observability_matrix(system: &SystemModel, obs: &AgentObservation) -> DMatrix<f64> {
    let n = system.n;
    let mut blocks = Vec::with_capacity(n);
    let mut block = obs.h.clone();
    for q in 0..n {
        if q > 0 {
            block = &block * &system.f;
        }
        blocks.push(block.clone());
    }
    vstack(&blocks, n)
}

/// Local observability matrices of all agents stacked in id order.
pub fn global_observability_matrix(model: &StateSpaceNetwork) -> DMatrix<f64> {
    let blocks: Vec<_> = model
        .agents
        .iter()
        .map(|a| local_observability_matrix(&model.system, a))
        .collect();
    vstack(&blocks, model.n())
}

/// Walk counts `I + A + … + A^{m-1}` in saturating `u128` arithmetic.
///
/// Entry `(i, j)` counts directed walks of length `< m` from `j` to `i`.
/// Counts that would overflow are pinned at `u128::MAX`; zero/non-zero is
/// always exact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectivityMatrix {
    pub m: usize,
    pub entries: Vec<Vec<u128>>,
    pub saturated: bool,
}

impl ConnectivityMatrix {
    /// Zero-based entry.
    pub fn get(&self, i: usize, j: usize) -> u128 {
        self.entries[i][j]
    }

    /// Row of agent `id` (the weights applied to each agent's block).
    pub fn row(&self, id: AgentId) -> &[u128] {
        &self.entries[id.index()]
    }

    pub fn is_positive(&self) -> bool {
        self.entries.iter().flatten().all(|&v| v > 0)
    }
}

pub fn connectivity_matrix(graph: &NetworkGraph) -> ConnectivityMatrix {
    let m = graph.m();
    let mut saturated = false;
    let mut total = vec![vec![0u128; m]; m];
    let mut power = vec![vec![0u128; m]; m];
    for i in 0..m {
        total[i][i] = 1;
        power[i][i] = 1;
    }
    for _ in 1..m {
        let mut next = vec![vec![0u128; m]; m];
        for i in 0..m {
            for l in 0..m {
                let p = power[i][l];
                if p == 0 {
                    continue;
                }
                for j in 0..m {
                    let a = graph.entry(l, j) as u128;
                    if a == 0 {
                        continue;
                    }
                    let (prod, o1) = p.overflowing_mul(a);
                    let (sum, o2) = next[i][j].overflowing_add(prod);
                    if o1 || o2 {
                        saturated = true;
                        next[i][j] = u128::MAX;
                    } else {
                        next[i][j] = sum;
                    }
                }
            }
        }
        for i in 0..m {
            for j in 0..m {
                let (sum, o) = total[i][j].overflowing_add(next[i][j]);
                if o {
                    saturated = true;
                    total[i][j] = u128::MAX;
                } else {
                    total[i][j] = sum;
                }
            }
        }
        power = next;
    }
    ConnectivityMatrix { m, entries: total, saturated }
}

/// Every agent reachable from every other.
pub fn is_connected(graph: &NetworkGraph) -> bool {
    connectivity_matrix(graph).is_positive()
}

fn weighted_stack(model: &StateSpaceNetwork, weights: &[u128]) -> DMatrix<f64> {
    let blocks: Vec<_> = model
        .agents
        .iter()
        .zip(weights)
        .map(|(a, &w)| local_observability_matrix(&model.system, a) * (w as f64))
        .collect();
    vstack(&blocks, model.n())
}

/// Global observability blocks scaled by the agent's connectivity row. Zero
/// blocks are kept so the shape is always `(n Σ p_j) × n`.
pub fn distributed_observability_matrix(
    model: &StateSpaceNetwork,
    id: AgentId,
) -> Result<DMatrix<f64>, ModelError> {
    model.agent(id)?;
    let conn = connectivity_matrix(&model.graph);
    Ok(weighted_stack(model, conn.row(id)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentObservability {
    pub agent: AgentId,
    pub rank: usize,
    pub gramian_rank: usize,
    pub distributedly_observable: bool,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        with = "crate::linalg::opt_rows"
    )]
    pub matrix: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservabilityReport {
    pub n: usize,
    pub local_ranks: Vec<usize>,
    pub global_rank: usize,
    pub connectivity: ConnectivityMatrix,
    pub connected: bool,
    pub per_agent: Vec<AgentObservability>,
    pub all_agents_observable: bool,
}

impl ObservabilityReport {
    pub fn unobservable_agents(&self) -> Vec<AgentId> {
        self.per_agent
            .iter()
            .filter(|a| !a.distributedly_observable)
            .map(|a| a.agent)
            .collect()
    }
}

/// Runs every observability check. With `keep_matrices` the dense
/// distributed observability matrices are kept in the report.
pub fn analyze_with(model: &StateSpaceNetwork, keep_matrices: bool) -> ObservabilityReport {
    let n = model.n();
    let local_ranks = model
        .agents
        .iter()
        .map(|a| linalg::rank(&local_observability_matrix(&model.system, a)))
        .collect();
    let global_rank = linalg::rank(&global_observability_matrix(model));
    let connectivity = connectivity_matrix(&model.graph);
    let connected = connectivity.is_positive();
    let per_agent: Vec<_> = model
        .ids()
        .map(|id| {
            // Rank on 0/1 block indicators: same rank as the walk-count
            // weighting, without large counts swamping the SVD threshold.
            let indicators: Vec<u128> = connectivity.row(id).iter().map(|&w| u128::from(w > 0)).collect();
            let o = weighted_stack(model, &indicators);
            let rank = linalg::rank(&o);
            let gramian_rank = linalg::rank(&(o.transpose() * &o));
            let o = keep_matrices.then(|| weighted_stack(model, connectivity.row(id)));
            AgentObservability {
                agent: id,
                rank,
                gramian_rank,
                distributedly_observable: rank == n,
                matrix: o,
            }
        })
        .collect();
    let all_agents_observable = per_agent.iter().all(|a| a.distributedly_observable);
    ObservabilityReport {
        n,
        local_ranks,
        global_rank,
        connectivity,
        connected,
        per_agent,
        all_agents_observable,
    }
}

pub fn analyze(model: &StateSpaceNetwork) -> ObservabilityReport {
    analyze_with(model, false)
}
