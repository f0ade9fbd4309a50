//! Ground truth and sensor simulation, a centralized Kalman filter baseline,
//! and the Monte Carlo harness that checks the analytic covariances.
//!
//! # Random streams
//!
//! All randomness comes from ChaCha20 (`rand_chacha::ChaCha20Rng`). A run with
//! seed `s` seeds the generator with `seed_from_u64(s)`; each noise source
//! gets its own stream id (0: initial state, 1: process noise, `2 + i`:
//! measurement noise of the agent with zero-based index `i`), and step `k`
//! starts at word position `k · 2^20` of that stream. Draws are therefore
//! independent across sources and steps, and any sample can be regenerated
//! without replaying the others. Standard normals come from
//! `rand_distr::StandardNormal`.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::estimator::{AgentState, DistributedEstimator, ProtocolError};
use crate::gain::{
    agent_spectral_radius, network_spectral_radius, propagate_filter, propagate_predict,
    CovarianceStep, GainError, GainSchedule, NetworkCovariance, SteadyState,
};
use crate::linalg::{self, covariance_factor};
use crate::model::{AgentId, StateSpaceNetwork, SystemModel};

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error(transparent)]
    Gain(#[from] GainError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("gain plan covers {available} steps but the horizon is {horizon}")]
    HorizonTooLong { available: usize, horizon: usize },
    #[error("at least one Monte Carlo run is required")]
    NoRuns,
    #[error("cannot write output: {0}")]
    Io(std::io::Error),
    #[error("cannot write CSV: {0}")]
    Csv(csv::Error),
}

impl From<std::io::Error> for SimulationError {
    fn from(e: std::io::Error) -> Self {
        SimulationError::Io(e)
    }
}

impl From<csv::Error> for SimulationError {
    fn from(e: csv::Error) -> Self {
        SimulationError::Csv(e)
    }
}

/// Noise source identifiers for stream splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseSource {
    Initial,
    Process,
    Measurement(usize),
}

impl NoiseSource {
    fn stream_id(self) -> u64 {
        match self {
            NoiseSource::Initial => 0,
            NoiseSource::Process => 1,
            NoiseSource::Measurement(i) => 2 + i as u64,
        }
    }
}

const WORDS_PER_STEP: u128 = 1 << 20;

/// Generator for one (seed, source, step) triple.
pub fn noise_stream(seed: u64, source: NoiseSource, k: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(source.stream_id());
    rng.set_word_pos(k as u128 * WORDS_PER_STEP);
    rng
}

/// Draws from `N(mean, L Lᵀ)`.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    mean: DVector<f64>,
    factor: DMatrix<f64>,
}

impl GaussianSampler {
    pub fn new(mean: DVector<f64>, cov: &DMatrix<f64>) -> Self {
        GaussianSampler { mean, factor: covariance_factor(cov) }
    }

    pub fn zero_mean(cov: &DMatrix<f64>) -> Self {
        Self::new(DVector::zeros(cov.nrows()), cov)
    }

    pub fn sample(&self, rng: &mut ChaCha20Rng) -> DVector<f64> {
        let xi = DVector::from_fn(self.factor.ncols(), |_, _| StandardNormal.sample(rng));
        &self.mean + &self.factor * xi
    }
}

/// Samplers for every noise source of a model.
#[derive(Debug, Clone)]
struct NoiseModel {
    initial: GaussianSampler,
    process: GaussianSampler,
    measurement: Vec<GaussianSampler>,
}

impl NoiseModel {
    fn new(model: &StateSpaceNetwork) -> Self {
        let sys = &model.system;
        NoiseModel {
            initial: GaussianSampler::new(sys.x0_mean.clone(), &sys.p0),
            process: GaussianSampler::zero_mean(&sys.q),
            measurement: model.agents.iter().map(|a| GaussianSampler::zero_mean(&a.r)).collect(),
        }
    }

    fn initial_state(&self, seed: u64) -> DVector<f64> {
        self.initial.sample(&mut noise_stream(seed, NoiseSource::Initial, 0))
    }

    /// `x_k` from `x_{k-1}`.
    fn advance(&self, sys: &SystemModel, x: &DVector<f64>, seed: u64, k: usize) -> DVector<f64> {
        let w = self.process.sample(&mut noise_stream(seed, NoiseSource::Process, k));
        &sys.f * x + w
    }

    fn measure(&self, model: &StateSpaceNetwork, x: &DVector<f64>, seed: u64, k: usize) -> Vec<DVector<f64>> {
        model
            .agents
            .iter()
            .zip(&self.measurement)
            .enumerate()
            .map(|(i, (a, s))| {
                let v = s.sample(&mut noise_stream(seed, NoiseSource::Measurement(i), k));
                &a.h * x + v
            })
            .collect()
    }
}

/// `x_0, …, x_K` with `x_0 ~ N(x̄_0, P0)` and `x_k = F x_{k-1} + w_{k-1}`.
pub fn generate_truth(system: &SystemModel, horizon: usize, seed: u64) -> Vec<DVector<f64>> {
    let init = GaussianSampler::new(system.x0_mean.clone(), &system.p0);
    let process = GaussianSampler::zero_mean(&system.q);
    let mut xs = Vec::with_capacity(horizon + 1);
    xs.push(init.sample(&mut noise_stream(seed, NoiseSource::Initial, 0)));
    for k in 1..=horizon {
        let w = process.sample(&mut noise_stream(seed, NoiseSource::Process, k));
        xs.push(&system.f * &xs[k - 1] + w);
    }
    xs
}

/// `z[k][i] = H_i x_k + v_{i,k}` for every `k` in the truth sequence
/// (including `k = 0`, which the filters never use).
pub fn generate_measurements(
    truth: &[DVector<f64>],
    model: &StateSpaceNetwork,
    seed: u64,
) -> Vec<Vec<DVector<f64>>> {
    let noise = NoiseModel::new(model);
    truth
        .iter()
        .enumerate()
        .map(|(k, x)| noise.measure(model, x, seed, k))
        .collect()
}

/// Which gains the agents use at each step.
#[derive(Debug, Clone, PartialEq)]
pub enum GainPlan {
    /// `steps[k-1][i]` is agent `i+1`'s gain at step `k`.
    TimeVarying(Vec<Vec<DMatrix<f64>>>),
    /// The same gains at every step.
    Constant(Vec<DMatrix<f64>>),
}

impl GainPlan {
    pub fn from_schedule(schedule: &GainSchedule) -> Self {
        GainPlan::TimeVarying(schedule.steps.iter().map(|s| s.matrices()).collect())
    }

    pub fn steady(ss: &SteadyState) -> Self {
        GainPlan::Constant(ss.gains.clone())
    }

    pub fn gains_at(&self, k: usize) -> Option<&[DMatrix<f64>]> {
        match self {
            GainPlan::TimeVarying(steps) => k.checked_sub(1).and_then(|i| steps.get(i)).map(Vec::as_slice),
            GainPlan::Constant(g) => Some(g),
        }
    }

    pub fn covers(&self, horizon: usize) -> Result<(), SimulationError> {
        match self {
            GainPlan::TimeVarying(steps) if steps.len() < horizon => {
                Err(SimulationError::HorizonTooLong { available: steps.len(), horizon })
            }
            _ => Ok(()),
        }
    }

    fn last(&self, horizon: usize) -> Option<&[DMatrix<f64>]> {
        match self {
            GainPlan::TimeVarying(steps) => steps.get(horizon.min(steps.len()).checked_sub(1)?).map(Vec::as_slice),
            GainPlan::Constant(g) => Some(g),
        }
    }
}

/// One simulated realization.
#[derive(Debug, Clone)]
pub struct SimulationTrace {
    pub seed: u64,
    pub horizon: usize,
    pub x_true: Vec<DVector<f64>>,
    /// `z[k][i]`, `k = 0..=K`.
    pub z: Vec<Vec<DVector<f64>>>,
    /// `estimates[k][i]`, `k = 0..=K`.
    pub estimates: Vec<Vec<AgentState>>,
    /// `x_k − x̂⁻_{i,k}`.
    pub eps_minus: Vec<Vec<DVector<f64>>>,
    /// `x_k − x̂⁺_{i,k}`.
    pub eps_plus: Vec<Vec<DVector<f64>>>,
    /// `innovations[k][i]`; empty at `k = 0`.
    pub innovations: Vec<Vec<DVector<f64>>>,
    /// Centralized filter estimates `x̂⁺_k`.
    pub central: Vec<DVector<f64>>,
    pub messages_per_round: usize,
}

/// Per-step callback data for streaming runs.
struct StepView<'a> {
    k: usize,
    x: &'a DVector<f64>,
    states: &'a [AgentState],
    innovations: &'a [crate::estimator::InnovationVector],
}

fn run_streaming(
    est: &DistributedEstimator<'_>,
    noise: &NoiseModel,
    plan: &GainPlan,
    horizon: usize,
    seed: u64,
    mut on_step: impl FnMut(StepView<'_>),
) -> Result<usize, SimulationError> {
    let model = est.model();
    let mut x = noise.initial_state(seed);
    let mut states = est.initial_states();
    let mut messages = 0;
    on_step(StepView { k: 0, x: &x, states: &states, innovations: &[] });
    for k in 1..=horizon {
        x = noise.advance(&model.system, &x, seed, k);
        let z = noise.measure(model, &x, seed, k);
        let gains = plan
            .gains_at(k)
            .ok_or(SimulationError::HorizonTooLong { available: k - 1, horizon })?;
        let out = est.run_round(&states, &z, gains)?;
        messages = out.messages;
        states = out.states;
        on_step(StepView { k, x: &x, states: &states, innovations: &out.innovations });
    }
    Ok(messages)
}

/// Simulates one realization of truth, measurements, the distributed
/// estimator and the centralized baseline.
pub fn simulate(
    model: &StateSpaceNetwork,
    plan: &GainPlan,
    horizon: usize,
    seed: u64,
) -> Result<SimulationTrace, SimulationError> {
    plan.covers(horizon)?;
    let est = DistributedEstimator::new(model)?;
    let noise = NoiseModel::new(model);
    let mut x_true = Vec::with_capacity(horizon + 1);
    let mut estimates = Vec::with_capacity(horizon + 1);
    let mut eps_minus = Vec::with_capacity(horizon + 1);
    let mut eps_plus = Vec::with_capacity(horizon + 1);
    let mut innovations = Vec::with_capacity(horizon + 1);
    let messages = run_streaming(&est, &noise, plan, horizon, seed, |v| {
        x_true.push(v.x.clone());
        eps_minus.push(v.states.iter().map(|s| v.x - &s.x_pred).collect());
        eps_plus.push(v.states.iter().map(|s| v.x - &s.x_filt).collect());
        innovations.push(v.innovations.iter().map(|y| y.0.clone()).collect());
        estimates.push(v.states.to_vec());
        debug_assert_eq!(v.k + 1, x_true.len());
    })?;
    let z = generate_measurements(&x_true, model, seed);
    let central = centralized_kf(model, &z, horizon).x_filt;
    Ok(SimulationTrace {
        seed,
        horizon,
        x_true,
        z,
        estimates,
        eps_minus,
        eps_plus,
        innovations,
        central,
        messages_per_round: messages,
    })
}

/// Centralized Kalman filter over all sensors stacked.
#[derive(Debug, Clone)]
pub struct CentralizedEstimate {
    /// `k = 0..=K`
    pub x_filt: Vec<DVector<f64>>,
    /// `k = 0..=K`; entry 0 is the prior.
    pub p_plus: Vec<DMatrix<f64>>,
    /// `k = 1..=K` at index `k-1`.
    pub p_minus: Vec<DMatrix<f64>>,
    pub gains: Vec<DMatrix<f64>>,
}

fn stacked_sensor(model: &StateSpaceNetwork) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = model.n();
    let hs: Vec<_> = model.agents.iter().map(|a| a.h.clone()).collect();
    let h = linalg::vstack(&hs, n);
    let total = h.nrows();
    let mut r = DMatrix::zeros(total, total);
    let mut off = 0;
    for a in &model.agents {
        r.view_mut((off, off), a.r.shape()).copy_from(&a.r);
        off += a.p();
    }
    (h, r)
}

/// Covariance and gain sequence of the centralized filter.
pub fn centralized_covariances(model: &StateSpaceNetwork, horizon: usize) -> CentralizedEstimate {
    let sys = &model.system;
    let n = sys.n;
    let (h, r) = stacked_sensor(model);
    let mut p = sys.p0.clone();
    let mut p_plus = vec![p.clone()];
    let mut p_minus = Vec::with_capacity(horizon);
    let mut gains = Vec::with_capacity(horizon);
    for _ in 1..=horizon {
        let pm = linalg::symmetrize(&(&sys.f * &p * sys.f.transpose() + &sys.q));
        let s = linalg::symmetrize(&(&h * &pm * h.transpose() + &r));
        let k = linalg::right_pinv_solve(&(&pm * h.transpose()), &s, linalg::PINV_REL_TOL);
        let a = DMatrix::identity(n, n) - &k * &h;
        p = linalg::symmetrize(&(&a * &pm * a.transpose() + &k * &r * k.transpose()));
        p_minus.push(pm);
        p_plus.push(p.clone());
        gains.push(k);
    }
    CentralizedEstimate { x_filt: Vec::new(), p_plus, p_minus, gains }
}

/// Runs the centralized filter on `measurements[k][i]` for `k = 1..=horizon`.
pub fn centralized_kf(
    model: &StateSpaceNetwork,
    measurements: &[Vec<DVector<f64>>],
    horizon: usize,
) -> CentralizedEstimate {
    let mut out = centralized_covariances(model, horizon);
    let (h, _) = stacked_sensor(model);
    let f = &model.system.f;
    let mut x = model.system.x0_mean.clone();
    out.x_filt.push(x.clone());
    for k in 1..=horizon {
        let z: Vec<f64> = measurements[k].iter().flat_map(|v| v.iter().copied()).collect();
        let z = DVector::from_vec(z);
        let xp = f * &x;
        x = &xp + &out.gains[k - 1] * (z - &h * &xp);
        out.x_filt.push(x.clone());
    }
    out
}

/// Network covariances under an arbitrary gain plan, `k = 1..=horizon`.
pub fn analytic_covariances(
    model: &StateSpaceNetwork,
    plan: &GainPlan,
    horizon: usize,
) -> Result<Vec<CovarianceStep>, SimulationError> {
    plan.covers(horizon)?;
    let structures = crate::gain::build_all_structures(model)?;
    let mut plus = NetworkCovariance::initial(model.n(), model.m(), &model.system.p0);
    let mut out = Vec::with_capacity(horizon);
    for k in 1..=horizon {
        let minus = propagate_predict(&plus, &model.system);
        let gains = plan.gains_at(k).expect("coverage checked");
        plus = propagate_filter(&minus, gains, &structures, model)?;
        out.push(CovarianceStep { k, minus, plus: plus.clone() });
    }
    Ok(out)
}

/// Raw Monte Carlo moments, summed over runs.
#[derive(Debug, Clone)]
pub struct MonteCarloStats {
    pub runs: usize,
    pub horizon: usize,
    pub n: usize,
    pub m: usize,
    /// Per `k = 0..=K`: `Σ ε⁺` stacked over agents (length `nm`).
    pub sum_error: Vec<DVector<f64>>,
    /// Per `k = 0..=K`: `Σ ε⁺ ε⁺ᵀ` (`nm × nm`).
    pub sum_outer: Vec<DMatrix<f64>>,
    /// Per `k = 0..=K`, per agent: `Σ ‖ε⁺_i‖²`.
    pub sum_sq_norm: Vec<Vec<f64>>,
    /// Per `k = 1..=K`, per agent: `Σ y` component-wise.
    pub innov_sum: Vec<Vec<DVector<f64>>>,
    /// Per `k = 1..=K`, per agent: `Σ y²` component-wise.
    pub innov_sq: Vec<Vec<DVector<f64>>>,
    /// Per `k = 1..=K`, per agent: `Σ y_k y_{k-1}` component-wise (zero at `k = 1`).
    pub innov_lag: Vec<Vec<DVector<f64>>>,
}

impl MonteCarloStats {
    fn zeros(model: &StateSpaceNetwork, horizon: usize, rows: &[usize]) -> Self {
        let n = model.n();
        let m = model.m();
        let per_agent = || rows.iter().map(|&r| DVector::zeros(r)).collect::<Vec<_>>();
        MonteCarloStats {
            runs: 0,
            horizon,
            n,
            m,
            sum_error: vec![DVector::zeros(n * m); horizon + 1],
            sum_outer: vec![DMatrix::zeros(n * m, n * m); horizon + 1],
            sum_sq_norm: vec![vec![0.0; m]; horizon + 1],
            innov_sum: (0..horizon).map(|_| per_agent()).collect(),
            innov_sq: (0..horizon).map(|_| per_agent()).collect(),
            innov_lag: (0..horizon).map(|_| per_agent()).collect(),
        }
    }

    fn merge(&mut self, other: &MonteCarloStats) {
        self.runs += other.runs;
        for (a, b) in self.sum_error.iter_mut().zip(&other.sum_error) {
            *a += b;
        }
        for (a, b) in self.sum_outer.iter_mut().zip(&other.sum_outer) {
            *a += b;
        }
        for (a, b) in self.sum_sq_norm.iter_mut().zip(&other.sum_sq_norm) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (dst, src) in [
            (&mut self.innov_sum, &other.innov_sum),
            (&mut self.innov_sq, &other.innov_sq),
            (&mut self.innov_lag, &other.innov_lag),
        ] {
            for (a, b) in dst.iter_mut().zip(src) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        }
    }

    /// Empirical `E[ε⁺_k ε⁺_kᵀ]` over the network.
    pub fn error_covariance(&self, k: usize) -> NetworkCovariance {
        NetworkCovariance { n: self.n, m: self.m, matrix: &self.sum_outer[k] / self.runs as f64 }
    }

    /// Empirical mean of `ε⁺_{i,k}`.
    pub fn mean_error(&self, k: usize, agent: AgentId) -> DVector<f64> {
        self.sum_error[k].rows(agent.index() * self.n, self.n) / self.runs as f64
    }

    /// Standard error of each component of the mean of `ε⁺_{i,k}`.
    pub fn mean_standard_error(&self, k: usize, agent: AgentId) -> DVector<f64> {
        let nr = self.runs as f64;
        let mean = self.mean_error(k, agent);
        DVector::from_fn(self.n, |d, _| {
            let idx = agent.index() * self.n + d;
            let second = self.sum_outer[k][(idx, idx)] / nr;
            ((second - mean[d] * mean[d]).max(0.0) / nr).sqrt()
        })
    }

    pub fn mse(&self, k: usize, agent: AgentId) -> f64 {
        self.sum_sq_norm[k][agent.index()] / self.runs as f64
    }
}

/// Lag-1 autocorrelation of one agent's innovation components, expressed as
/// z-scores (`r √N`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WhitenessStats {
    pub agent: AgentId,
    /// Largest |z| over measurement components and `k = 2..=K`.
    pub max_abs_z_measurement: f64,
    /// Largest |z| over consensus components; `None` without in-neighbors.
    pub max_abs_z_consensus: Option<f64>,
    /// Largest |z| of the innovation mean over all components and steps.
    pub max_abs_z_mean: f64,
}

fn whiteness(stats: &MonteCarloStats, structures: &[crate::gain::InnovationStructure]) -> Vec<WhitenessStats> {
    let nr = stats.runs as f64;
    structures
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let meas_rows = s.measurement_rows();
            let mut zm: f64 = 0.0;
            let mut zc: Option<f64> = None;
            let mut zmean: f64 = 0.0;
            for k in 1..=stats.horizon {
                let sum = &stats.innov_sum[k - 1][i];
                let sq = &stats.innov_sq[k - 1][i];
                for c in 0..s.rows() {
                    let mean = sum[c] / nr;
                    let var = (sq[c] / nr - mean * mean).max(0.0);
                    if var > 0.0 {
                        zmean = zmean.max((mean / (var / nr).sqrt()).abs());
                    }
                    if k < 2 {
                        continue;
                    }
                    let lag = stats.innov_lag[k - 1][i][c];
                    let prev = stats.innov_sq[k - 2][i][c];
                    let denom = (sq[c] * prev).sqrt();
                    if denom <= 0.0 {
                        continue;
                    }
                    let z = (lag / denom * nr.sqrt()).abs();
                    if c < meas_rows {
                        zm = zm.max(z);
                    } else {
                        zc = Some(zc.map_or(z, |v| v.max(z)));
                    }
                }
            }
            WhitenessStats {
                agent: s.agent,
                max_abs_z_measurement: zm,
                max_abs_z_consensus: zc,
                max_abs_z_mean: zmean,
            }
        })
        .collect()
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub k: usize,
    pub agent: usize,
    pub empirical_mse: f64,
    pub analytic_trace_p_plus: f64,
    pub centralized_trace_p_plus: f64,
}

/// Aggregated Monte Carlo results.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub runs: usize,
    pub horizon: usize,
    pub base_seed: u64,
    /// `ρ(F − K_i H̃_i F)` at the gains of the final step.
    pub spectral_radii: Vec<f64>,
    pub network_spectral_radius: f64,
    /// Set when the gains came from a steady-state computation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steady_state_converged: Option<bool>,
    pub whiteness: Vec<WhitenessStats>,
    pub final_empirical_mse: Vec<f64>,
    pub final_analytic_trace: Vec<f64>,
    pub final_centralized_trace: f64,
    #[serde(skip)]
    pub rows: Vec<MetricsRow>,
    #[serde(skip)]
    pub analytic: Vec<CovarianceStep>,
    #[serde(skip)]
    pub stats: Option<MonteCarloStats>,
}

impl MetricsSummary {
    pub fn row(&self, k: usize, agent: AgentId) -> Option<&MetricsRow> {
        let m = self.final_analytic_trace.len();
        k.checked_sub(1).and_then(|kk| self.rows.get(kk * m + agent.index()))
    }

    pub fn stats(&self) -> &MonteCarloStats {
        self.stats.as_ref().expect("summary built by monte_carlo")
    }

    /// CSV with header `k,agent,empirical_mse,analytic_trace_P_plus,centralized_trace_P_plus`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), SimulationError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "agent", "empirical_mse", "analytic_trace_P_plus", "centralized_trace_P_plus"])?;
        for r in &self.rows {
            w.write_record([
                r.k.to_string(),
                r.agent.to_string(),
                r.empirical_mse.to_string(),
                r.analytic_trace_p_plus.to_string(),
                r.centralized_trace_p_plus.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs per chunk. Chunks are the unit of parallel work and are reduced in
/// index order, so results do not depend on the thread count.
const CHUNK: usize = 256;

/// Independent runs with seeds `base_seed + r`, `r = 0..runs`.
pub fn monte_carlo(
    model: &StateSpaceNetwork,
    plan: &GainPlan,
    horizon: usize,
    runs: usize,
    base_seed: u64,
) -> Result<MetricsSummary, SimulationError> {
    if runs == 0 {
        return Err(SimulationError::NoRuns);
    }
    plan.covers(horizon)?;
    let est = DistributedEstimator::new(model)?;
    let noise = NoiseModel::new(model);
    let rows: Vec<usize> = est.structures().iter().map(|s| s.rows()).collect();
    let n = model.n();

    let chunks = runs.div_ceil(CHUNK);
    let partials: Vec<MonteCarloStats> = (0..chunks)
        .into_par_iter()
        .map(|c| -> Result<MonteCarloStats, SimulationError> {
            let mut acc = MonteCarloStats::zeros(model, horizon, &rows);
            let mut prev_innov: Vec<DVector<f64>> = rows.iter().map(|&r| DVector::zeros(r)).collect();
            let mut err = DVector::zeros(n * model.m());
            for r in (c * CHUNK)..((c + 1) * CHUNK).min(runs) {
                let seed = base_seed.wrapping_add(r as u64);
                run_streaming(&est, &noise, plan, horizon, seed, |v| {
                    let k = v.k;
                    for (i, s) in v.states.iter().enumerate() {
                        let mut e = err.rows_mut(i * n, n);
                        e.copy_from(v.x);
                        e -= &s.x_filt;
                    }
                    acc.sum_error[k] += &err;
                    acc.sum_outer[k].ger(1.0, &err, &err, 1.0);
                    for i in 0..v.states.len() {
                        acc.sum_sq_norm[k][i] += err.rows(i * n, n).norm_squared();
                    }
                    if k >= 1 {
                        for (i, y) in v.innovations.iter().enumerate() {
                            acc.innov_sum[k - 1][i] += &y.0;
                            acc.innov_sq[k - 1][i] += y.0.component_mul(&y.0);
                            if k >= 2 {
                                acc.innov_lag[k - 1][i] += y.0.component_mul(&prev_innov[i]);
                            }
                            prev_innov[i].copy_from(&y.0);
                        }
                    }
                })?;
                acc.runs += 1;
            }
            Ok(acc)
        })
        .collect::<Result<_, _>>()?;

    let mut total = MonteCarloStats::zeros(model, horizon, &rows);
    for p in &partials {
        total.merge(p);
    }

    let analytic = analytic_covariances(model, plan, horizon)?;
    let central = centralized_covariances(model, horizon);
    let m = model.m();
    let mut table = Vec::with_capacity(horizon * m);
    for k in 1..=horizon {
        for id in model.ids() {
            table.push(MetricsRow {
                k,
                agent: id.0,
                empirical_mse: total.mse(k, id),
                analytic_trace_p_plus: analytic[k - 1].plus.trace(id),
                centralized_trace_p_plus: central.p_plus[k].trace(),
            });
        }
    }

    let (spectral_radii, net_rho) = match plan.last(horizon) {
        Some(g) => (
            g.iter()
                .zip(est.structures())
                .map(|(g, s)| agent_spectral_radius(&model.system, g, s))
                .collect(),
            network_spectral_radius(model, g, est.structures())?,
        ),
        None => (Vec::new(), f64::NAN),
    };

    let white = whiteness(&total, est.structures());
    let final_empirical_mse = model.ids().map(|id| total.mse(horizon, id)).collect();
    let final_analytic_trace = model
        .ids()
        .map(|id| analytic.last().map_or(model.system.p0.trace(), |c| c.plus.trace(id)))
        .collect();
    Ok(MetricsSummary {
        runs,
        horizon,
        base_seed,
        spectral_radii,
        network_spectral_radius: net_rho,
        steady_state_converged: None,
        whiteness: white,
        final_empirical_mse,
        final_analytic_trace,
        final_centralized_trace: central.p_plus[horizon].trace(),
        rows: table,
        analytic,
        stats: Some(total),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gain::riccati_recursion;
    use crate::model::{AgentObservation, NetworkGraph};
    use approx::assert_relative_eq;

    fn mat(r: usize, c: usize, v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(r, c, v)
    }

    fn scalar_model() -> StateSpaceNetwork {
        let sys = SystemModel::new(mat(1, 1, &[1.0]), mat(1, 1, &[1.0]), DVector::zeros(1), mat(1, 1, &[1.0]));
        StateSpaceNetwork::new(
            sys,
            vec![AgentObservation::new(AgentId(1), mat(1, 1, &[1.0]), mat(1, 1, &[1.0]))],
            NetworkGraph::empty(1),
        )
    }

    #[test]
    fn noiseless_truth_is_deterministic_orbit() {
        let f = mat(2, 2, &[0.9, 0.2, -0.1, 1.0]);
        let x0 = DVector::from_row_slice(&[1.0, -2.0]);
        let sys = SystemModel::new(f.clone(), DMatrix::zeros(2, 2), x0.clone(), DMatrix::zeros(2, 2));
        let xs = generate_truth(&sys, 5, 7);
        let mut x = x0;
        for (k, xk) in xs.iter().enumerate() {
            if k > 0 {
                x = &f * x;
            }
            assert_relative_eq!(xk, &x, epsilon = 1e-14);
        }
    }

    #[test]
    fn same_seed_same_truth() {
        let sys = scalar_model().system;
        assert_eq!(generate_truth(&sys, 20, 3), generate_truth(&sys, 20, 3));
        assert_ne!(generate_truth(&sys, 20, 3), generate_truth(&sys, 20, 4));
    }

    #[test]
    fn streams_are_positioned_independently() {
        let mut a = noise_stream(1, NoiseSource::Process, 3);
        let mut b = noise_stream(1, NoiseSource::Process, 3);
        let mut c = noise_stream(1, NoiseSource::Measurement(0), 3);
        let x: f64 = StandardNormal.sample(&mut a);
        let y: f64 = StandardNormal.sample(&mut b);
        let z: f64 = StandardNormal.sample(&mut c);
        assert_eq!(x, y);
        assert_ne!(x, z);
    }

    #[test]
    fn simulate_error_definitions_hold_exactly() {
        let model = scalar_model();
        let sched = riccati_recursion(&model, 10).unwrap();
        let tr = simulate(&model, &GainPlan::from_schedule(&sched), 10, 11).unwrap();
        for k in 0..=10 {
            assert_eq!(tr.eps_plus[k][0], &tr.x_true[k] - &tr.estimates[k][0].x_filt);
            assert_eq!(tr.eps_minus[k][0], &tr.x_true[k] - &tr.estimates[k][0].x_pred);
        }
        // m = 1: the distributed filter is the centralized filter
        for k in 0..=10 {
            assert_relative_eq!(tr.central[k], tr.estimates[k][0].x_filt, epsilon = 1e-12);
        }
        assert_eq!(tr.innovations[0].len(), 0);
    }

    #[test]
    fn centralized_scalar_converges_to_fixed_point() {
        let c = centralized_covariances(&scalar_model(), 40);
        assert_relative_eq!(c.p_plus[40][(0, 0)], (5.0_f64.sqrt() - 1.0) / 2.0, epsilon = 1e-6);
    }

    #[test]
    fn single_run_summary_is_squared_error() {
        let model = scalar_model();
        let sched = riccati_recursion(&model, 5).unwrap();
        let plan = GainPlan::from_schedule(&sched);
        let summary = monte_carlo(&model, &plan, 5, 1, 99).unwrap();
        let tr = simulate(&model, &plan, 5, 99).unwrap();
        for k in 1..=5 {
            let e = tr.eps_plus[k][0][0];
            assert_relative_eq!(summary.row(k, AgentId(1)).unwrap().empirical_mse, e * e, epsilon = 1e-15);
        }
    }

    #[test]
    fn plan_must_cover_horizon() {
        let model = scalar_model();
        let sched = riccati_recursion(&model, 3).unwrap();
        let err = monte_carlo(&model, &GainPlan::from_schedule(&sched), 4, 10, 0).unwrap_err();
        assert!(matches!(err, SimulationError::HorizonTooLong { available: 3, horizon: 4 }));
        assert!(matches!(
            monte_carlo(&model, &GainPlan::from_schedule(&sched), 3, 0, 0),
            Err(SimulationError::NoRuns)
        ));
    }

    #[test]
    fn csv_layout() {
        let model = scalar_model();
        let sched = riccati_recursion(&model, 2).unwrap();
        let s = monte_carlo(&model, &GainPlan::from_schedule(&sched), 2, 3, 0).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "k,agent,empirical_mse,analytic_trace_P_plus,centralized_trace_P_plus");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,1,"));
    }
}
