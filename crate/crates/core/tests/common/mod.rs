#![allow(dead_code)]

use distkf_core::{
    load_scenario, AgentId, AgentObservation, NetworkGraph, StateSpaceNetwork, SystemModel,
};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn scenario(name: &str) -> StateSpaceNetwork {
    let path = format!("{}/../../scenarios/{name}.json", env!("CARGO_MANIFEST_DIR"));
    load_scenario(&path).unwrap_or_else(|e| panic!("{path}: {e}"))
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

pub fn random_vector(rng: &mut impl Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

/// `A Aᵀ + floor·I`.
pub fn random_spd(rng: &mut impl Rng, n: usize, floor: f64) -> DMatrix<f64> {
    let a = random_matrix(rng, n, n);
    &a * a.transpose() + DMatrix::identity(n, n) * floor
}

pub fn random_graph(rng: &mut impl Rng, m: usize, edge_prob: f64) -> NetworkGraph {
    let mut g = NetworkGraph::empty(m);
    for i in 0..m {
        for j in 0..m {
            if i != j && rng.random_bool(edge_prob) {
                g.set_entry(i, j, 1);
            }
        }
    }
    g
}

/// Random model whose dynamics have spectral radius at most `rho_max`.
pub fn random_model(rng: &mut impl Rng, n: usize, m: usize, edge_prob: f64) -> StateSpaceNetwork {
    let mut f = random_matrix(rng, n, n);
    let rho = distkf_core::gain::spectral_radius(&f);
    if rho > 1.1 {
        f *= 1.1 / rho;
    }
    let sys = SystemModel::new(
        f,
        random_spd(rng, n, 0.1),
        random_vector(rng, n),
        random_spd(rng, n, 0.5),
    );
    let agents = (1..=m)
        .map(|id| {
            let p = rng.random_range(1..=2);
            AgentObservation::new(AgentId(id), random_matrix(rng, p, n), random_spd(rng, p, 0.2))
        })
        .collect();
    StateSpaceNetwork::new(sys, agents, random_graph(rng, m, edge_prob))
}

pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}
