//! Offline synthesis of the minimum-MSE distributed gains.
//!
//! Each agent stacks its closed neighborhood's measurement residuals and the
//! disagreement with each in-neighbor's prediction into one innovation
//! vector `y_i = H̃_i ε⁻_i + δ_i`. The MMSE gain is `Σ_{x,y_i} Σ_{y_i}⁺`, and
//! both covariances depend on the cross-covariances `P⁻_ij` between agents'
//! prediction errors. Those are tracked exactly by propagating the full
//! `nm × nm` network error covariance: prediction adds `Q` to every block
//! (the process noise is common to all agents) and filtering applies the
//! linear error map
//!
//! ```text
//! ε⁺_i = (I − K_i H̃_i − Σ_{j∈Ω_i} B_ij) ε⁻_i + Σ_{j∈Ω_i} B_ij ε⁻_j − Σ_{j∈Ω̄_i} M_ij v_j
//! ```
//!
//! which is valid for any gain, not just the optimal one.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, symmetrize, PINV_REL_TOL, PSD_REL_TOL};
use crate::model::{AgentId, ModelError, StateSpaceNetwork, SystemModel};
use crate::observability;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("innovation covariance of {agent} at step {k} is not PSD (min eigenvalue {min_eigenvalue:e})")]
    NumericalFailure { k: usize, agent: AgentId, min_eigenvalue: f64 },
}

/// Row layout of an agent's stacked innovation and its matrix `H̃_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct InnovationStructure {
    pub agent: AgentId,
    /// Measurement blocks, ascending id, the agent itself included.
    pub closed: Vec<AgentId>,
    /// Consensus blocks, ascending id.
    pub open: Vec<AgentId>,
    pub h_tilde: DMatrix<f64>,
    pub measurement_offsets: Vec<usize>,
    pub measurement_dims: Vec<usize>,
    pub consensus_offsets: Vec<usize>,
    n: usize,
}

impl InnovationStructure {
    /// Innovation length `Σ_{j∈Ω̄_i} p_j + n |Ω_i|`.
    pub fn rows(&self) -> usize {
        self.h_tilde.nrows()
    }

    /// Rows taken by the measurement blocks.
    pub fn measurement_rows(&self) -> usize {
        self.measurement_dims.iter().sum()
    }

    pub fn n(&self) -> usize {
        self.n
    }
}

pub fn build_innovation_structure(
    model: &StateSpaceNetwork,
    id: AgentId,
) -> Result<InnovationStructure, GainError> {
    let n = model.n();
    let closed = model.graph.closed_neighborhood(id)?;
    let open = model.graph.open_neighborhood(id)?;
    let mut measurement_offsets = Vec::with_capacity(closed.len());
    let mut measurement_dims = Vec::with_capacity(closed.len());
    let mut row = 0;
    for &j in &closed {
        let p = model.agent(j)?.p();
        measurement_offsets.push(row);
        measurement_dims.push(p);
        row += p;
    }
    let consensus_offsets: Vec<usize> = (0..open.len()).map(|a| row + a * n).collect();
    let total = row + n * open.len();
    let mut h_tilde = DMatrix::zeros(total, n);
    for (&j, &off) in closed.iter().zip(&measurement_offsets) {
        let h = &model.agent(j)?.h;
        h_tilde.view_mut((off, 0), h.shape()).copy_from(h);
    }
    Ok(InnovationStructure {
        agent: id,
        closed,
        open,
        h_tilde,
        measurement_offsets,
        measurement_dims,
        consensus_offsets,
        n,
    })
}

/// Innovation layouts of every agent, in id order.
pub fn build_all_structures(model: &StateSpaceNetwork) -> Result<Vec<InnovationStructure>, GainError> {
    model.ids().map(|id| build_innovation_structure(model, id)).collect()
}

/// Joint covariance of all agents' errors as an `nm × nm` matrix of `n × n`
/// blocks; block `(i, j)` is `E[ε_i ε_jᵀ]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkCovariance {
    pub n: usize,
    pub m: usize,
    #[serde(with = "crate::linalg::rows")]
    pub matrix: DMatrix<f64>,
}

impl NetworkCovariance {
    /// Every block equal to `p0`: all agents start from the same prior.
    pub fn initial(n: usize, m: usize, p0: &DMatrix<f64>) -> Self {
        let mut matrix = DMatrix::zeros(n * m, n * m);
        for i in 0..m {
            for j in 0..m {
                matrix.view_mut((i * n, j * n), (n, n)).copy_from(p0);
            }
        }
        NetworkCovariance { n, m, matrix }
    }

    pub fn block(&self, i: AgentId, j: AgentId) -> DMatrix<f64> {
        let n = self.n;
        self.matrix.view((i.index() * n, j.index() * n), (n, n)).clone_owned()
    }

    /// Diagonal block `P_i`.
    pub fn agent(&self, i: AgentId) -> DMatrix<f64> {
        self.block(i, i)
    }

    pub fn trace(&self, i: AgentId) -> f64 {
        let n = self.n;
        (0..n).map(|d| self.matrix[(i.index() * n + d, i.index() * n + d)]).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.matrix.iter().all(|v| v.is_finite())
    }
}

/// `Σ_{ε_i,δ_i}` and `Δ_i` for one agent and step.
#[derive(Debug, Clone, PartialEq)]
pub struct InnovationNoiseStats {
    pub sigma_eps_delta: DMatrix<f64>,
    pub delta: DMatrix<f64>,
}

fn check_dims(p: &NetworkCovariance, model: &StateSpaceNetwork) -> Result<(), GainError> {
    if p.n != model.n() || p.m != model.m() || p.matrix.shape() != (p.n * p.m, p.n * p.m) {
        return Err(GainError::DimensionMismatch(format!(
            "network covariance is {}×{} with n={}, m={}; model has n={}, m={}",
            p.matrix.nrows(),
            p.matrix.ncols(),
            p.n,
            p.m,
            model.n(),
            model.m()
        )));
    }
    Ok(())
}

pub fn innovation_noise_stats(
    p_minus: &NetworkCovariance,
    structure: &InnovationStructure,
    model: &StateSpaceNetwork,
) -> Result<InnovationNoiseStats, GainError> {
    check_dims(p_minus, model)?;
    if structure.n() != model.n() {
        return Err(GainError::DimensionMismatch("structure built for another model".into()));
    }
    let n = model.n();
    let i = structure.agent;
    let cols = structure.rows();
    let p_i = p_minus.agent(i);

    let mut sigma = DMatrix::zeros(n, cols);
    for (&j, &off) in structure.open.iter().zip(&structure.consensus_offsets) {
        let b = &p_i - p_minus.block(i, j);
        sigma.view_mut((0, off), (n, n)).copy_from(&b);
    }

    let mut delta = DMatrix::zeros(cols, cols);
    for ((&j, &off), &p) in structure
        .closed
        .iter()
        .zip(&structure.measurement_offsets)
        .zip(&structure.measurement_dims)
    {
        delta.view_mut((off, off), (p, p)).copy_from(&model.agent(j)?.r);
    }
    for (&j, &oj) in structure.open.iter().zip(&structure.consensus_offsets) {
        for (&l, &ol) in structure.open.iter().zip(&structure.consensus_offsets) {
            let d = &p_i - p_minus.block(j, i) - p_minus.block(i, l) + p_minus.block(j, l);
            delta.view_mut((oj, ol), (n, n)).copy_from(&d);
        }
    }
    linalg::symmetrize_mut(&mut delta);
    Ok(InnovationNoiseStats { sigma_eps_delta: sigma, delta })
}

/// An agent's gain for one step together with the covariances it was built from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentGain {
    pub agent: AgentId,
    #[serde(with = "crate::linalg::rows")]
    pub gain: DMatrix<f64>,
    #[serde(with = "crate::linalg::rows")]
    pub sigma_xy: DMatrix<f64>,
    #[serde(with = "crate::linalg::rows")]
    pub sigma_y: DMatrix<f64>,
}

/// Column blocks of a gain: innovation weights `M_ij` (closed neighborhood)
/// and consensus weights `B_ij` (open neighborhood).
#[derive(Debug, Clone, PartialEq)]
pub struct GainPartition {
    pub measurement: Vec<(AgentId, DMatrix<f64>)>,
    pub consensus: Vec<(AgentId, DMatrix<f64>)>,
}

impl GainPartition {
    pub fn measurement_weight(&self, j: AgentId) -> Option<&DMatrix<f64>> {
        self.measurement.iter().find(|(a, _)| *a == j).map(|(_, m)| m)
    }

    pub fn consensus_weight(&self, j: AgentId) -> Option<&DMatrix<f64>> {
        self.consensus.iter().find(|(a, _)| *a == j).map(|(_, m)| m)
    }
}

/// Splits a gain into its `M_ij` / `B_ij` blocks.
pub fn partition_gain(
    gain: &DMatrix<f64>,
    structure: &InnovationStructure,
) -> Result<GainPartition, GainError> {
    let n = structure.n();
    if gain.shape() != (n, structure.rows()) {
        return Err(GainError::DimensionMismatch(format!(
            "gain of {} is {}×{}, innovation layout needs {}×{}",
            structure.agent,
            gain.nrows(),
            gain.ncols(),
            n,
            structure.rows()
        )));
    }
    let measurement = structure
        .closed
        .iter()
        .zip(&structure.measurement_offsets)
        .zip(&structure.measurement_dims)
        .map(|((&j, &off), &p)| (j, gain.view((0, off), (n, p)).clone_owned()))
        .collect();
    let consensus = structure
        .open
        .iter()
        .zip(&structure.consensus_offsets)
        .map(|(&j, &off)| (j, gain.view((0, off), (n, n)).clone_owned()))
        .collect();
    Ok(GainPartition { measurement, consensus })
}

/// `Σ_{x,y_i}`, `Σ_{y_i}` and the MMSE gain `Σ_{x,y_i} Σ_{y_i}⁺`.
///
/// `k` only labels errors.
pub fn optimal_gain(
    p_minus: &NetworkCovariance,
    structure: &InnovationStructure,
    stats: &InnovationNoiseStats,
    k: usize,
) -> Result<AgentGain, GainError> {
    let rows = structure.rows();
    let n = structure.n();
    if stats.sigma_eps_delta.shape() != (n, rows) || stats.delta.shape() != (rows, rows) {
        return Err(GainError::DimensionMismatch(
            "innovation noise statistics do not match the innovation layout".into(),
        ));
    }
    let p_i = p_minus.agent(structure.agent);
    let ht = &structure.h_tilde;
    let se = &stats.sigma_eps_delta;
    let sigma_xy = &p_i * ht.transpose() + se;
    let cross = ht * se;
    let sigma_y = symmetrize(&(ht * &p_i * ht.transpose() + &stats.delta + &cross + cross.transpose()));

    let ev = linalg::symmetric_eigenvalues(&sigma_y);
    if let (Some(&min), Some(&max)) = (ev.first(), ev.last()) {
        let scale = max.abs().max(min.abs());
        if !min.is_finite() || min < -PSD_REL_TOL * (1.0 + scale) {
            return Err(GainError::NumericalFailure { k, agent: structure.agent, min_eigenvalue: min });
        }
    }
    let gain = linalg::right_pinv_solve(&sigma_xy, &sigma_y, PINV_REL_TOL);
    Ok(AgentGain { agent: structure.agent, gain, sigma_xy, sigma_y })
}

/// Filter covariance at an optimal gain, `P⁻_i − K_i Σ_{x,y_i}ᵀ`. Only valid at
/// the optimum; used to cross-check the network propagation.
pub fn optimal_filter_covariance(p_minus_i: &DMatrix<f64>, gain: &AgentGain) -> DMatrix<f64> {
    symmetrize(&(p_minus_i - &gain.gain * gain.sigma_xy.transpose()))
}

/// `P⁻_ij = F P⁺_ij Fᵀ + Q` for every block pair.
pub fn propagate_predict(p_plus: &NetworkCovariance, system: &SystemModel) -> NetworkCovariance {
    let n = p_plus.n;
    let m = p_plus.m;
    let f = &system.f;
    let ft = f.transpose();
    let mut out = DMatrix::zeros(n * m, n * m);
    for i in 0..m {
        for j in i..m {
            let b = p_plus.matrix.view((i * n, j * n), (n, n));
            let pb = f * b * &ft + &system.q;
            out.view_mut((i * n, j * n), (n, n)).copy_from(&pb);
            if i != j {
                out.view_mut((j * n, i * n), (n, n)).copy_from(&pb.transpose());
            }
        }
    }
    NetworkCovariance { n, m, matrix: out }
}

/// Row blocks of the filter error map for one agent: `ε⁺_i = T_i ε⁻ + N_i v`,
/// with `ε⁻` all agents' prediction errors stacked and `v` all measurement
/// noises stacked in id order.
#[derive(Debug, Clone)]
pub struct ErrorMapRow {
    pub t: DMatrix<f64>,
    pub noise: DMatrix<f64>,
}

fn measurement_offsets_global(model: &StateSpaceNetwork) -> Vec<usize> {
    let mut off = Vec::with_capacity(model.m());
    let mut acc = 0;
    for a in &model.agents {
        off.push(acc);
        acc += a.p();
    }
    off
}

pub fn error_map_row(
    gain: &DMatrix<f64>,
    structure: &InnovationStructure,
    model: &StateSpaceNetwork,
) -> Result<ErrorMapRow, GainError> {
    let n = model.n();
    let m = model.m();
    let part = partition_gain(gain, structure)?;
    let offsets = measurement_offsets_global(model);
    let i = structure.agent.index();

    let mut t = DMatrix::zeros(n, n * m);
    let mut own = DMatrix::identity(n, n) - gain * &structure.h_tilde;
    for (j, b) in &part.consensus {
        own -= b;
        t.view_mut((0, j.index() * n), (n, n)).copy_from(b);
    }
    t.view_mut((0, i * n), (n, n)).copy_from(&own);

    let mut noise = DMatrix::zeros(n, model.total_measurement_dim());
    for (j, mw) in &part.measurement {
        noise.view_mut((0, offsets[j.index()]), mw.shape()).copy_from(&(-mw));
    }
    Ok(ErrorMapRow { t, noise })
}

fn measurement_noise_net(model: &StateSpaceNetwork) -> DMatrix<f64> {
    let total = model.total_measurement_dim();
    let mut r = DMatrix::zeros(total, total);
    let mut off = 0;
    for a in &model.agents {
        r.view_mut((off, off), a.r.shape()).copy_from(&a.r);
        off += a.p();
    }
    r
}

/// `P⁺_net = T P⁻_net Tᵀ + N R_net Nᵀ` for arbitrary gains (one per agent, id order).
pub fn propagate_filter(
    p_minus: &NetworkCovariance,
    gains: &[DMatrix<f64>],
    structures: &[InnovationStructure],
    model: &StateSpaceNetwork,
) -> Result<NetworkCovariance, GainError> {
    check_dims(p_minus, model)?;
    let n = model.n();
    let m = model.m();
    if gains.len() != m || structures.len() != m {
        return Err(GainError::DimensionMismatch(format!(
            "expected {m} gains and layouts, got {} and {}",
            gains.len(),
            structures.len()
        )));
    }
    let mut t = DMatrix::zeros(n * m, n * m);
    let mut noise = DMatrix::zeros(n * m, model.total_measurement_dim());
    for (idx, (g, s)) in gains.iter().zip(structures).enumerate() {
        let row = error_map_row(g, s, model)?;
        t.view_mut((idx * n, 0), row.t.shape()).copy_from(&row.t);
        noise.view_mut((idx * n, 0), row.noise.shape()).copy_from(&row.noise);
    }
    let r = measurement_noise_net(model);
    // Large gains along nearly singular innovation directions amplify
    // rounding in the null space of P⁻; projecting keeps P⁺ a covariance.
    let matrix = linalg::clamp_psd(&(&t * &p_minus.matrix * t.transpose() + &noise * r * noise.transpose()));
    Ok(NetworkCovariance { n, m, matrix })
}

/// Filter covariance of a single agent under an arbitrary gain, holding the
/// prediction covariance fixed.
pub fn agent_filter_covariance(
    p_minus: &NetworkCovariance,
    gain: &DMatrix<f64>,
    structure: &InnovationStructure,
    model: &StateSpaceNetwork,
) -> Result<DMatrix<f64>, GainError> {
    check_dims(p_minus, model)?;
    let row = error_map_row(gain, structure, model)?;
    let r = measurement_noise_net(model);
    Ok(symmetrize(
        &(&row.t * &p_minus.matrix * row.t.transpose() + &row.noise * r * row.noise.transpose()),
    ))
}

/// Prediction and filter covariances at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceStep {
    pub k: usize,
    pub minus: NetworkCovariance,
    pub plus: NetworkCovariance,
}

/// Gains of all agents at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleStep {
    pub k: usize,
    pub gains: Vec<AgentGain>,
}

impl ScheduleStep {
    pub fn matrices(&self) -> Vec<DMatrix<f64>> {
        self.gains.iter().map(|g| g.gain.clone()).collect()
    }
}

/// Stateful driver of the covariance/gain recursion.
#[derive(Debug, Clone)]
pub struct RiccatiIteration<'a> {
    model: &'a StateSpaceNetwork,
    structures: Vec<InnovationStructure>,
    k: usize,
    plus: NetworkCovariance,
}

impl<'a> RiccatiIteration<'a> {
    pub fn new(model: &'a StateSpaceNetwork) -> Result<Self, GainError> {
        let structures = build_all_structures(model)?;
        let plus = NetworkCovariance::initial(model.n(), model.m(), &model.system.p0);
        Ok(RiccatiIteration { model, structures, k: 0, plus })
    }

    pub fn structures(&self) -> &[InnovationStructure] {
        &self.structures
    }

    pub fn current(&self) -> &NetworkCovariance {
        &self.plus
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Advances one step: predict, per-agent optimal gains, filter.
    pub fn step(&mut self) -> Result<(ScheduleStep, CovarianceStep), GainError> {
        let k = self.k + 1;
        let minus = propagate_predict(&self.plus, &self.model.system);
        let model = self.model;
        let gains: Vec<AgentGain> = self
            .structures
            .par_iter()
            .map(|s| {
                let stats = innovation_noise_stats(&minus, s, model)?;
                optimal_gain(&minus, s, &stats, k)
            })
            .collect::<Result<_, _>>()?;
        let mats: Vec<_> = gains.iter().map(|g| g.gain.clone()).collect();
        let plus = propagate_filter(&minus, &mats, &self.structures, model)?;
        self.k = k;
        self.plus = plus.clone();
        Ok((ScheduleStep { k, gains }, CovarianceStep { k, minus, plus }))
    }
}

/// Time-varying gains plus, optionally, the steady-state section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainSchedule {
    pub format: String,
    pub scenario_hash: String,
    pub n: usize,
    pub m: usize,
    pub steps: Vec<ScheduleStep>,
    #[serde(skip)]
    pub covariances: Vec<CovarianceStep>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steady_state: Option<SteadyState>,
}

pub const GAINS_FORMAT: &str = "distkf-gains/1";

impl GainSchedule {
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    pub fn step(&self, k: usize) -> Option<&ScheduleStep> {
        k.checked_sub(1).and_then(|idx| self.steps.get(idx))
    }
}

/// Finite-horizon recursion from the common prior for `steps` steps.
pub fn riccati_recursion(model: &StateSpaceNetwork, steps: usize) -> Result<GainSchedule, GainError> {
    let mut it = RiccatiIteration::new(model)?;
    let mut sched = Vec::with_capacity(steps);
    let mut covs = Vec::with_capacity(steps);
    for _ in 0..steps {
        let (s, c) = it.step()?;
        sched.push(s);
        covs.push(c);
    }
    Ok(GainSchedule {
        format: GAINS_FORMAT.to_string(),
        scenario_hash: crate::scenario::scenario_hash(model),
        n: model.n(),
        m: model.m(),
        steps: sched,
        covariances: covs,
        steady_state: None,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyStateOptions {
    /// Relative Frobenius change per block below which the iteration stops.
    pub tol: f64,
    pub max_iter: usize,
    /// Stop early once any agent's covariance trace exceeds this multiple of
    /// `1 + max(tr P0, tr Q)`.
    pub divergence_factor: f64,
}

impl Default for SteadyStateOptions {
    fn default() -> Self {
        SteadyStateOptions { tol: 1e-10, max_iter: 10_000, divergence_factor: 1e8 }
    }
}

/// Fixed point of the recursion (or the last iterate when it did not converge).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteadyState {
    pub converged: bool,
    pub diverged: bool,
    pub iterations: usize,
    pub final_change: f64,
    pub all_agents_observable: bool,
    #[serde(with = "crate::linalg::vec_rows")]
    pub gains: Vec<DMatrix<f64>>,
    #[serde(with = "crate::linalg::vec_rows")]
    pub p_plus: Vec<DMatrix<f64>>,
    #[serde(with = "crate::linalg::vec_rows")]
    pub p_minus: Vec<DMatrix<f64>>,
    /// `ρ(F − K_i H̃_i F)` per agent.
    pub spectral_radii: Vec<f64>,
    /// Spectral radius of the full network filter-error transition
    /// `T (I_m ⊗ F)`, which also accounts for the consensus feedback.
    pub network_spectral_radius: f64,
}

impl SteadyState {
    pub fn traces(&self) -> Vec<f64> {
        self.p_plus.iter().map(|p| p.trace()).collect()
    }
}

fn max_block_change(prev: &NetworkCovariance, next: &NetworkCovariance) -> f64 {
    let n = prev.n;
    let mut worst = 0.0_f64;
    for i in 0..prev.m {
        for j in 0..prev.m {
            let a = prev.matrix.view((i * n, j * n), (n, n));
            let b = next.matrix.view((i * n, j * n), (n, n));
            let diff = (b - a).norm();
            let scale = b.norm();
            let rel = if scale > 0.0 { diff / scale } else { diff };
            worst = worst.max(rel);
        }
    }
    worst
}

/// `ρ(F − K_i H̃_i F)`.
pub fn agent_spectral_radius(system: &SystemModel, gain: &DMatrix<f64>, structure: &InnovationStructure) -> f64 {
    let f = &system.f;
    linalg::spectral_radius(&(f - gain * &structure.h_tilde * f))
}

/// Spectral radius of the network filter-error transition under the given gains.
pub fn network_spectral_radius(
    model: &StateSpaceNetwork,
    gains: &[DMatrix<f64>],
    structures: &[InnovationStructure],
) -> Result<f64, GainError> {
    let n = model.n();
    let m = model.m();
    let mut t = DMatrix::zeros(n * m, n * m);
    for (idx, (g, s)) in gains.iter().zip(structures).enumerate() {
        let row = error_map_row(g, s, model)?;
        t.view_mut((idx * n, 0), row.t.shape()).copy_from(&row.t);
    }
    let mut fblk = DMatrix::zeros(n * m, n * m);
    for i in 0..m {
        fblk.view_mut((i * n, i * n), (n, n)).copy_from(&model.system.f);
    }
    Ok(linalg::spectral_radius(&(t * fblk)))
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    linalg::spectral_radius(m)
}

/// Iterates the recursion to its fixed point.
///
/// Models that are not distributedly observable everywhere are still
/// iterated (with a warning) so divergence can be studied.
pub fn steady_state(model: &StateSpaceNetwork, opts: SteadyStateOptions) -> Result<SteadyState, GainError> {
    let observable = observability::analyze(model).all_agents_observable;
    if !observable {
        log::warn!("model is not distributedly observable at every agent; the recursion may diverge");
    }
    let sys = &model.system;
    let limit = opts.divergence_factor * (1.0 + sys.p0.trace().max(sys.q.trace()));

    let mut it = RiccatiIteration::new(model)?;
    let mut last: Option<(ScheduleStep, CovarianceStep)> = None;
    let mut converged = false;
    let mut diverged = false;
    let mut change = f64::INFINITY;
    while it.k() < opts.max_iter {
        let prev = it.current().clone();
        let (s, c) = it.step()?;
        let finite = c.plus.is_finite() && s.gains.iter().all(|g| g.gain.iter().all(|v| v.is_finite()));
        if !finite {
            diverged = true;
            break;
        }
        change = max_block_change(&prev, &c.plus);
        let blown = model.ids().any(|id| c.plus.trace(id) > limit);
        last = Some((s, c));
        if blown {
            diverged = true;
            break;
        }
        if it.k() > 1 && change < opts.tol {
            converged = true;
            break;
        }
    }

    let structures = it.structures().to_vec();
    let (gains, p_plus, p_minus) = match &last {
        Some((s, c)) => (
            s.matrices(),
            model.ids().map(|id| c.plus.agent(id)).collect(),
            model.ids().map(|id| c.minus.agent(id)).collect(),
        ),
        None => {
            let zero: Vec<_> = structures.iter().map(|s| DMatrix::zeros(s.n(), s.rows())).collect();
            let p0: Vec<_> = model.ids().map(|_| sys.p0.clone()).collect();
            (zero, p0.clone(), p0)
        }
    };
    let spectral_radii = gains
        .iter()
        .zip(&structures)
        .map(|(g, s)| agent_spectral_radius(sys, g, s))
        .collect();
    let network_spectral_radius = network_spectral_radius(model, &gains, &structures)?;
    Ok(SteadyState {
        converged,
        diverged,
        iterations: it.k(),
        final_change: change,
        all_agents_observable: observable,
        gains,
        p_plus,
        p_minus,
        spectral_radii,
        network_spectral_radius,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{AgentObservation, NetworkGraph};
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    fn mat(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    fn scalar(f: f64) -> StateSpaceNetwork {
        let sys = SystemModel::new(mat(1, 1, &[f]), mat(1, 1, &[1.0]), DVector::zeros(1), mat(1, 1, &[1.0]));
        StateSpaceNetwork::new(
            sys,
            vec![AgentObservation::new(AgentId(1), mat(1, 1, &[1.0]), mat(1, 1, &[1.0]))],
            NetworkGraph::empty(1),
        )
    }

    fn two_agents(edges: &[(usize, usize)]) -> StateSpaceNetwork {
        let sys = SystemModel::new(
            mat(2, 2, &[1.0, 0.1, 0.0, 0.95]),
            DMatrix::identity(2, 2) * 0.1,
            DVector::zeros(2),
            DMatrix::identity(2, 2),
        );
        let edges: Vec<_> = edges.iter().map(|&(a, b)| (AgentId(a), AgentId(b))).collect();
        StateSpaceNetwork::new(
            sys,
            vec![
                AgentObservation::new(AgentId(1), mat(1, 2, &[1.0, 0.0]), mat(1, 1, &[0.5])),
                AgentObservation::new(AgentId(2), mat(1, 2, &[0.0, 1.0]), mat(1, 1, &[0.3])),
            ],
            NetworkGraph::from_edges(2, &edges).unwrap(),
        )
    }

    #[test]
    fn isolated_structure_is_own_sensor() {
        let model = two_agents(&[]);
        let s = build_innovation_structure(&model, AgentId(1)).unwrap();
        assert_eq!(s.h_tilde, model.agents[0].h);
        assert!(s.open.is_empty());
    }

    #[test]
    fn structure_with_one_in_neighbor() {
        let model = two_agents(&[(2, 1)]);
        let s = build_innovation_structure(&model, AgentId(1)).unwrap();
        assert_eq!(s.h_tilde, mat(4, 2, &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]));
        assert_eq!(s.measurement_offsets, vec![0, 1]);
        assert_eq!(s.consensus_offsets, vec![2]);
    }

    #[test]
    fn complete_graph_row_count() {
        let mut model = two_agents(&[]);
        model.agents.push(AgentObservation::new(AgentId(3), mat(2, 2, &[1.0, 1.0, 0.0, 2.0]), DMatrix::identity(2, 2)));
        model.graph = NetworkGraph::complete(3);
        let s = build_innovation_structure(&model, AgentId(2)).unwrap();
        assert_eq!(s.rows(), 1 + 1 + 2 + 2 * 2);
        assert_eq!(s.closed, vec![AgentId(1), AgentId(2), AgentId(3)]);
    }

    #[test]
    fn identical_priors_give_zero_consensus_statistics() {
        let model = two_agents(&[(2, 1), (1, 2)]);
        let p0 = NetworkCovariance::initial(2, 2, &model.system.p0);
        let minus = propagate_predict(&p0, &model.system);
        let s = build_innovation_structure(&model, AgentId(1)).unwrap();
        let st = innovation_noise_stats(&minus, &s, &model).unwrap();
        assert_eq!(st.sigma_eps_delta.amax(), 0.0);
        assert_eq!(st.delta.view((2, 2), (2, 2)).amax(), 0.0);
        assert_eq!(st.delta[(0, 0)], 0.5);
        assert_eq!(st.delta[(1, 1)], 0.3);
    }

    #[test]
    fn isolated_stats_are_just_r() {
        let model = two_agents(&[]);
        let p0 = NetworkCovariance::initial(2, 2, &model.system.p0);
        let minus = propagate_predict(&p0, &model.system);
        let s = build_innovation_structure(&model, AgentId(2)).unwrap();
        let st = innovation_noise_stats(&minus, &s, &model).unwrap();
        assert_eq!(st.sigma_eps_delta, DMatrix::zeros(2, 1));
        assert_eq!(st.delta, model.agents[1].r);
    }

    #[test]
    fn scalar_first_gain_is_two_thirds() {
        let model = scalar(1.0);
        let sched = riccati_recursion(&model, 1).unwrap();
        assert_eq!(sched.steps.len(), 1);
        assert_relative_eq!(sched.steps[0].gains[0].gain[(0, 0)], 2.0 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(sched.covariances[0].minus.matrix[(0, 0)], 2.0, epsilon = 1e-15);
        assert_relative_eq!(sched.covariances[0].plus.matrix[(0, 0)], 2.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn scalar_steady_state_is_golden_ratio_conjugate() {
        let ss = steady_state(&scalar(1.0), SteadyStateOptions::default()).unwrap();
        let p = (5.0_f64.sqrt() - 1.0) / 2.0;
        assert!(ss.converged);
        assert_relative_eq!(ss.p_plus[0][(0, 0)], p, epsilon = 1e-10);
        let k = (p + 1.0) / (p + 2.0);
        assert_relative_eq!(ss.gains[0][(0, 0)], k, epsilon = 1e-10);
        assert_relative_eq!(ss.spectral_radii[0], 1.0 - k, epsilon = 1e-10);
    }

    #[test]
    fn unstable_scalar_is_stabilized() {
        let ss = steady_state(&scalar(1.05), SteadyStateOptions::default()).unwrap();
        assert!(ss.converged);
        assert!(ss.spectral_radii[0] < 1.0);
    }

    #[test]
    fn predict_with_zero_dynamics_is_q() {
        let mut model = two_agents(&[(1, 2)]);
        model.system.f = DMatrix::zeros(2, 2);
        let p = NetworkCovariance::initial(2, 2, &(DMatrix::identity(2, 2) * 7.0));
        let minus = propagate_predict(&p, &model.system);
        for i in model.ids() {
            for j in model.ids() {
                assert_eq!(minus.block(i, j), model.system.q);
            }
        }
    }

    #[test]
    fn zero_gains_leave_covariance_unchanged() {
        let model = two_agents(&[(1, 2), (2, 1)]);
        let structures = build_all_structures(&model).unwrap();
        let mut sched = riccati_recursion(&model, 3).unwrap();
        let minus = sched.covariances.pop().unwrap().minus;
        let zeros: Vec<_> = structures.iter().map(|s| DMatrix::zeros(2, s.rows())).collect();
        let plus = propagate_filter(&minus, &zeros, &structures, &model).unwrap();
        assert_relative_eq!(plus.matrix, minus.matrix, epsilon = 1e-15);
    }

    #[test]
    fn isolated_gain_is_classical_kalman_gain() {
        let model = two_agents(&[]);
        let sched = riccati_recursion(&model, 4).unwrap();
        let minus = &sched.covariances[3].minus;
        for id in model.ids() {
            let p = minus.agent(id);
            let a = &model.agents[id.index()];
            let s = &a.h * &p * a.h.transpose() + &a.r;
            let k = &p * a.h.transpose() * s.try_inverse().unwrap();
            assert_relative_eq!(sched.steps[3].gains[id.index()].gain, k, epsilon = 1e-13);
        }
    }

    #[test]
    fn partition_rejects_wrong_shape() {
        let model = two_agents(&[(2, 1)]);
        let s = build_innovation_structure(&model, AgentId(1)).unwrap();
        assert!(partition_gain(&DMatrix::zeros(2, 3), &s).is_err());
        let p = partition_gain(&DMatrix::from_fn(2, 4, |r, c| (r * 4 + c) as f64), &s).unwrap();
        assert_eq!(p.measurement_weight(AgentId(2)).unwrap(), &mat(2, 1, &[1.0, 5.0]));
        assert_eq!(p.consensus_weight(AgentId(2)).unwrap(), &mat(2, 2, &[2.0, 3.0, 6.0, 7.0]));
    }

    #[test]
    fn stats_reject_mismatched_covariance() {
        let model = two_agents(&[(2, 1)]);
        let s = build_innovation_structure(&model, AgentId(1)).unwrap();
        let wrong = NetworkCovariance::initial(2, 3, &DMatrix::identity(2, 2));
        assert!(matches!(
            innovation_noise_stats(&wrong, &s, &model),
            Err(GainError::DimensionMismatch(_))
        ));
    }
}
