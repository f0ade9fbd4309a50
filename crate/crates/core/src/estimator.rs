//! Online per-agent filter.
//!
//! One round per time step: every agent predicts, sends its prediction and
//! its raw measurement along each outgoing edge, then filters with the
//! stacked innovation built from its inbox.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::gain::{build_all_structures, GainError, GainPartition, InnovationStructure};
use crate::model::{AgentId, StateSpaceNetwork, SystemModel};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolError {
    #[error("{agent} is missing the message from {from}")]
    MissingMessage { agent: AgentId, from: AgentId },
    #[error("{agent} received more than one message from {from}")]
    DuplicateMessage { agent: AgentId, from: AgentId },
    #[error("{agent} received a message from {from}, which is not an in-neighbor")]
    UnexpectedSender { agent: AgentId, from: AgentId },
    #[error("message from {from} addressed to {to} was delivered to {agent}")]
    Misaddressed { agent: AgentId, from: AgentId, to: AgentId },
    #[error("{agent}: {what}")]
    Dimension { agent: AgentId, what: String },
    #[error("agents are not at the same step (expected k = {expected}, {agent} is at {found})")]
    OutOfStep { agent: AgentId, expected: usize, found: usize },
    #[error(transparent)]
    Gain(#[from] GainError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub agent: AgentId,
    pub k: usize,
    pub x_pred: DVector<f64>,
    pub x_filt: DVector<f64>,
}

impl AgentState {
    /// Both estimates at the prior mean, `k = 0`.
    pub fn initial(agent: AgentId, x0_mean: &DVector<f64>) -> Self {
        AgentState { agent, k: 0, x_pred: x0_mean.clone(), x_filt: x0_mean.clone() }
    }
}

/// What travels along edge `from → to` during a round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMessage {
    pub from: AgentId,
    pub to: AgentId,
    pub x_pred: DVector<f64>,
    pub z: DVector<f64>,
}

/// Measurement residuals over the closed neighborhood, then consensus
/// residuals over the open neighborhood, both in ascending id order.
#[derive(Debug, Clone, PartialEq)]
pub struct InnovationVector(pub DVector<f64>);

impl InnovationVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `x̂⁻_k = F x̂⁺_{k-1}` and advances `k`.
pub fn predict(state: &AgentState, system: &SystemModel) -> AgentState {
    AgentState {
        agent: state.agent,
        k: state.k + 1,
        x_pred: &system.f * &state.x_filt,
        x_filt: state.x_filt.clone(),
    }
}

/// Resolves the inbox into one message per in-neighbor, in `open` order.
fn sort_inbox<'m>(
    state: &AgentState,
    inbox: &'m [RoundMessage],
    structure: &InnovationStructure,
) -> Result<Vec<&'m RoundMessage>, ProtocolError> {
    let agent = state.agent;
    let mut slots: Vec<Option<&RoundMessage>> = vec![None; structure.open.len()];
    for msg in inbox {
        if msg.to != agent {
            return Err(ProtocolError::Misaddressed { agent, from: msg.from, to: msg.to });
        }
        let pos = structure
            .open
            .binary_search(&msg.from)
            .map_err(|_| ProtocolError::UnexpectedSender { agent, from: msg.from })?;
        if slots[pos].replace(msg).is_some() {
            return Err(ProtocolError::DuplicateMessage { agent, from: msg.from });
        }
    }
    slots
        .into_iter()
        .zip(&structure.open)
        .map(|(s, &from)| s.ok_or(ProtocolError::MissingMessage { agent, from }))
        .collect()
}

pub fn assemble_innovation(
    state: &AgentState,
    inbox: &[RoundMessage],
    own_measurement: &DVector<f64>,
    structure: &InnovationStructure,
    model: &StateSpaceNetwork,
) -> Result<InnovationVector, ProtocolError> {
    let agent = state.agent;
    let n = model.n();
    let msgs = sort_inbox(state, inbox, structure)?;
    let mut y = DVector::zeros(structure.rows());
    let x = &state.x_pred;

    for ((&j, &off), &p) in structure
        .closed
        .iter()
        .zip(&structure.measurement_offsets)
        .zip(&structure.measurement_dims)
    {
        let z = if j == agent {
            own_measurement
        } else {
            let pos = structure.open.binary_search(&j).expect("closed minus self is open");
            &msgs[pos].z
        };
        if z.len() != p {
            return Err(ProtocolError::Dimension {
                agent,
                what: format!("measurement of {j} has length {}, expected {p}", z.len()),
            });
        }
        let h = &model.agents[j.index()].h;
        y.rows_mut(off, p).copy_from(&(z - h * x));
    }
    for (msg, &off) in msgs.iter().zip(&structure.consensus_offsets) {
        if msg.x_pred.len() != n {
            return Err(ProtocolError::Dimension {
                agent,
                what: format!("prediction from {} has length {}, expected {n}", msg.from, msg.x_pred.len()),
            });
        }
        y.rows_mut(off, n).copy_from(&(&msg.x_pred - x));
    }
    Ok(InnovationVector(y))
}

/// `x̂⁺ = x̂⁻ + K y`.
pub fn filter_update(
    state: &AgentState,
    y: &InnovationVector,
    gain: &DMatrix<f64>,
) -> Result<AgentState, ProtocolError> {
    if gain.ncols() != y.len() || gain.nrows() != state.x_pred.len() {
        return Err(ProtocolError::Dimension {
            agent: state.agent,
            what: format!(
                "gain is {}×{} but innovation has length {} and state {}",
                gain.nrows(),
                gain.ncols(),
                y.len(),
                state.x_pred.len()
            ),
        });
    }
    Ok(AgentState {
        agent: state.agent,
        k: state.k,
        x_pred: state.x_pred.clone(),
        x_filt: &state.x_pred + gain * &y.0,
    })
}

/// The same update written as separate consensus and innovation sums:
/// `x̂⁻_i + Σ_{j∈Ω_i} B_ij (x̂⁻_j − x̂⁻_i) + Σ_{j∈Ω̄_i} M_ij (z_j − H_j x̂⁻_i)`.
pub fn filter_update_weighted(
    state: &AgentState,
    inbox: &[RoundMessage],
    own_measurement: &DVector<f64>,
    weights: &GainPartition,
    structure: &InnovationStructure,
    model: &StateSpaceNetwork,
) -> Result<AgentState, ProtocolError> {
    let msgs = sort_inbox(state, inbox, structure)?;
    let x = &state.x_pred;
    let mut consensus = DVector::zeros(x.len());
    for ((j, b), msg) in weights.consensus.iter().zip(&msgs) {
        debug_assert_eq!(*j, msg.from);
        consensus += b * (&msg.x_pred - x);
    }
    let mut innovation = DVector::zeros(x.len());
    for (j, mw) in &weights.measurement {
        let z = if *j == state.agent {
            own_measurement
        } else {
            &msgs[structure.open.binary_search(j).expect("in-neighbor")].z
        };
        innovation += mw * (z - &model.agents[j.index()].h * x);
    }
    Ok(AgentState {
        agent: state.agent,
        k: state.k,
        x_pred: x.clone(),
        x_filt: x + consensus + innovation,
    })
}

/// Result of one exchange round.
#[derive(Debug, Clone)]
pub struct RoundOutput {
    pub states: Vec<AgentState>,
    pub innovations: Vec<InnovationVector>,
    pub messages: usize,
}

/// The whole network of agents driven synchronously.
#[derive(Debug, Clone)]
pub struct DistributedEstimator<'a> {
    model: &'a StateSpaceNetwork,
    structures: Vec<InnovationStructure>,
}

impl<'a> DistributedEstimator<'a> {
    pub fn new(model: &'a StateSpaceNetwork) -> Result<Self, GainError> {
        Ok(DistributedEstimator { model, structures: build_all_structures(model)? })
    }

    pub fn model(&self) -> &StateSpaceNetwork {
        self.model
    }

    pub fn structures(&self) -> &[InnovationStructure] {
        &self.structures
    }

    pub fn initial_states(&self) -> Vec<AgentState> {
        self.model
            .ids()
            .map(|id| AgentState::initial(id, &self.model.system.x0_mean))
            .collect()
    }

    /// Predict, exchange along every edge, filter. `measurements[i]` is agent
    /// `i+1`'s measurement at the new step and `gains[i]` its gain.
    pub fn run_round(
        &self,
        states: &[AgentState],
        measurements: &[DVector<f64>],
        gains: &[DMatrix<f64>],
    ) -> Result<RoundOutput, ProtocolError> {
        let model = self.model;
        let m = model.m();
        if states.len() != m || measurements.len() != m || gains.len() != m {
            return Err(ProtocolError::Dimension {
                agent: AgentId(1),
                what: format!(
                    "round needs {m} states, measurements and gains; got {}, {}, {}",
                    states.len(),
                    measurements.len(),
                    gains.len()
                ),
            });
        }
        let k0 = states[0].k;
        if let Some(s) = states.iter().find(|s| s.k != k0) {
            return Err(ProtocolError::OutOfStep { agent: s.agent, expected: k0, found: s.k });
        }

        let predicted: Vec<AgentState> = states.iter().map(|s| predict(s, &model.system)).collect();

        let mut inboxes: Vec<Vec<RoundMessage>> = vec![Vec::new(); m];
        let mut messages = 0;
        for (from, to) in model.graph.edges() {
            inboxes[to.index()].push(RoundMessage {
                from,
                to,
                x_pred: predicted[from.index()].x_pred.clone(),
                z: measurements[from.index()].clone(),
            });
            messages += 1;
        }

        let mut next = Vec::with_capacity(m);
        let mut innovations = Vec::with_capacity(m);
        for (idx, state) in predicted.iter().enumerate() {
            let y = assemble_innovation(state, &inboxes[idx], &measurements[idx], &self.structures[idx], model)?;
            next.push(filter_update(state, &y, &gains[idx])?);
            innovations.push(y);
        }
        Ok(RoundOutput { states: next, innovations, messages })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gain::{build_innovation_structure, partition_gain, riccati_recursion};
    use crate::model::{AgentObservation, NetworkGraph};
    use approx::assert_relative_eq;

    fn mat(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    fn vecn(v: &[f64]) -> DVector<f64> {
        DVector::from_row_slice(v)
    }

    fn chain_model() -> StateSpaceNetwork {
        let sys = SystemModel::new(
            mat(2, 2, &[1.0, 1.0, 0.0, 1.0]),
            DMatrix::identity(2, 2) * 0.01,
            DVector::zeros(2),
            DMatrix::identity(2, 2),
        );
        let agents = vec![
            AgentObservation::new(AgentId(1), mat(1, 2, &[1.0, 0.0]), mat(1, 1, &[1.0])),
            AgentObservation::new(AgentId(2), mat(1, 2, &[1.0, 0.0]), mat(1, 1, &[1.0])),
            AgentObservation::new(AgentId(3), mat(1, 2, &[0.0, 1.0]), mat(1, 1, &[1.0])),
        ];
        StateSpaceNetwork::new(sys, agents, NetworkGraph::chain(3))
    }

    #[test]
    fn predict_examples() {
        let s = AgentState { agent: AgentId(1), k: 0, x_pred: vecn(&[0.0, 0.0]), x_filt: vecn(&[1.0, 2.0]) };
        let sys = |f: DMatrix<f64>| SystemModel::new(f, DMatrix::zeros(2, 2), DVector::zeros(2), DMatrix::zeros(2, 2));
        assert_eq!(predict(&s, &sys(DMatrix::identity(2, 2))).x_pred, vecn(&[1.0, 2.0]));
        let p = predict(&s, &sys(mat(2, 2, &[1.0, 1.0, 0.0, 1.0])));
        assert_eq!(p.x_pred, vecn(&[3.0, 2.0]));
        assert_eq!(p.k, 1);
        assert_eq!(predict(&s, &sys(DMatrix::zeros(2, 2))).x_pred, vecn(&[0.0, 0.0]));
    }

    #[test]
    fn isolated_innovation_is_own_residual() {
        let model = chain_model();
        let s = build_innovation_structure(&model, AgentId(1)).unwrap();
        let st = AgentState { agent: AgentId(1), k: 1, x_pred: vecn(&[0.5, 1.0]), x_filt: vecn(&[0.0, 0.0]) };
        let y = assemble_innovation(&st, &[], &vecn(&[2.0]), &s, &model).unwrap();
        assert_eq!(y.0, vecn(&[1.5]));
    }

    #[test]
    fn exact_consensus_gives_zero_innovation() {
        let model = chain_model();
        let s = build_innovation_structure(&model, AgentId(3)).unwrap();
        let x = vecn(&[0.3, -0.7]);
        let st = AgentState { agent: AgentId(3), k: 1, x_pred: x.clone(), x_filt: x.clone() };
        let msg = RoundMessage { from: AgentId(2), to: AgentId(3), x_pred: x.clone(), z: vecn(&[0.3]) };
        let y = assemble_innovation(&st, &[msg], &vecn(&[-0.7]), &s, &model).unwrap();
        assert_eq!(y.0, DVector::zeros(4));
    }

    #[test]
    fn protocol_errors_name_the_agent() {
        let model = chain_model();
        let s = build_innovation_structure(&model, AgentId(3)).unwrap();
        let st = AgentState::initial(AgentId(3), &DVector::zeros(2));
        let z = vecn(&[0.0]);
        let err = assemble_innovation(&st, &[], &z, &s, &model).unwrap_err();
        assert_eq!(err, ProtocolError::MissingMessage { agent: AgentId(3), from: AgentId(2) });
        assert!(err.to_string().contains("agent 3"));

        let msg = RoundMessage { from: AgentId(2), to: AgentId(3), x_pred: DVector::zeros(2), z: z.clone() };
        let err = assemble_innovation(&st, &[msg.clone(), msg.clone()], &z, &s, &model).unwrap_err();
        assert!(matches!(err, ProtocolError::DuplicateMessage { .. }));

        let stray = RoundMessage { from: AgentId(1), ..msg.clone() };
        let err = assemble_innovation(&st, &[stray], &z, &s, &model).unwrap_err();
        assert!(matches!(err, ProtocolError::UnexpectedSender { .. }));

        let wrong_to = RoundMessage { to: AgentId(2), ..msg };
        let err = assemble_innovation(&st, &[wrong_to], &z, &s, &model).unwrap_err();
        assert!(matches!(err, ProtocolError::Misaddressed { .. }));
    }

    #[test]
    fn filter_update_edge_cases() {
        let st = AgentState { agent: AgentId(1), k: 1, x_pred: vecn(&[1.0, 2.0]), x_filt: vecn(&[0.0, 0.0]) };
        let y = InnovationVector(vecn(&[3.0]));
        assert_eq!(filter_update(&st, &y, &DMatrix::zeros(2, 1)).unwrap().x_filt, st.x_pred);
        let zero = InnovationVector(DVector::zeros(1));
        assert_eq!(filter_update(&st, &zero, &mat(2, 1, &[0.4, 0.1])).unwrap().x_filt, st.x_pred);
        assert!(filter_update(&st, &y, &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn scalar_first_step_uses_two_thirds() {
        let sys = SystemModel::new(mat(1, 1, &[1.0]), mat(1, 1, &[1.0]), DVector::zeros(1), mat(1, 1, &[1.0]));
        let model = StateSpaceNetwork::new(
            sys,
            vec![AgentObservation::new(AgentId(1), mat(1, 1, &[1.0]), mat(1, 1, &[1.0]))],
            NetworkGraph::empty(1),
        );
        let sched = riccati_recursion(&model, 1).unwrap();
        let est = DistributedEstimator::new(&model).unwrap();
        let mut init = est.initial_states();
        init[0].x_filt = vecn(&[0.9]);
        let out = est.run_round(&init, &[vecn(&[2.1])], &sched.steps[0].matrices()).unwrap();
        assert_relative_eq!(out.states[0].x_filt[0], 0.9 + (2.0 / 3.0) * (2.1 - 0.9), epsilon = 1e-15);
        assert_eq!(out.messages, 0);
    }

    #[test]
    fn chain_round_counts_edges_and_matches_weighted_form() {
        let model = chain_model();
        let sched = riccati_recursion(&model, 3).unwrap();
        let est = DistributedEstimator::new(&model).unwrap();
        let mut states = est.initial_states();
        states[1].x_filt = vecn(&[0.2, -0.1]);
        let z = vec![vecn(&[0.5]), vecn(&[0.4]), vecn(&[-0.2])];
        let gains = sched.steps[2].matrices();
        let out = est.run_round(&states, &z, &gains).unwrap();
        assert_eq!(out.messages, 2);

        let pred = predict(&states[2], &model.system);
        let inbox = [RoundMessage {
            from: AgentId(2),
            to: AgentId(3),
            x_pred: &model.system.f * &states[1].x_filt,
            z: z[1].clone(),
        }];
        let part = partition_gain(&gains[2], &est.structures()[2]).unwrap();
        let w = filter_update_weighted(&pred, &inbox, &z[2], &part, &est.structures()[2], &model).unwrap();
        assert_relative_eq!(w.x_filt, out.states[2].x_filt, epsilon = 1e-14);
    }

    #[test]
    fn out_of_step_agents_rejected() {
        let model = chain_model();
        let est = DistributedEstimator::new(&model).unwrap();
        let mut states = est.initial_states();
        states[2].k = 4;
        let z = vec![vecn(&[0.0]); 3];
        let gains: Vec<_> = est.structures().iter().map(|s| DMatrix::zeros(2, s.rows())).collect();
        assert!(matches!(
            est.run_round(&states, &z, &gains),
            Err(ProtocolError::OutOfStep { .. })
        ));
    }
}
