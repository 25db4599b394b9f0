//! Gossip mixing matrices.
//!
//! A mixing matrix `Π` is symmetric, doubly stochastic and has a positive
//! diagonal (every agent keeps part of its own state). Its second-largest
//! eigenvalue magnitude controls how fast repeated gossip contracts
//! disagreement; [`spectral_report`] exposes `ρ = max(|λ₂|, |λ_N|)²` and the
//! spectral gap `1 − √ρ`.
//!
//! Built-in topologies all use uniform weights `1/|Nb(i)|` over a regular
//! graph, which makes them doubly stochastic by construction. Irregular
//! graphs must be supplied as an explicit matrix.

use std::collections::VecDeque;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::lowrank::{symmetric_eigenvalues, Mat};

/// Tolerance on row/column sums and symmetry.
pub const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TopologyKind {
    FullyConnected,
    Ring,
    Bipartite,
    Torus,
    Star,
    Custom,
}

impl FromStr for TopologyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fully_connected" | "fc" => Ok(Self::FullyConnected),
            "ring" => Ok(Self::Ring),
            "bipartite" => Ok(Self::Bipartite),
            "torus" => Ok(Self::Torus),
            "star" => Ok(Self::Star),
            "custom" => Ok(Self::Custom),
            other => Err(Error::Parse(format!(
                "unknown topology {other:?} (expected fully_connected|ring|bipartite|torus|star|custom)"
            ))),
        }
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::FullyConnected => "fully_connected",
            Self::Ring => "ring",
            Self::Bipartite => "bipartite",
            Self::Torus => "torus",
            Self::Star => "star",
            Self::Custom => "custom",
        })
    }
}

/// A validated symmetric doubly stochastic matrix with cached neighborhoods.
#[derive(Clone, Debug, PartialEq)]
pub struct MixingMatrix {
    kind: TopologyKind,
    weights: Mat,
    neighborhoods: Vec<Vec<usize>>,
}

impl MixingMatrix {
    /// Validates `weights` and wraps it.
    pub fn from_weights(weights: Mat, kind: TopologyKind) -> Result<Self> {
        validate_weights(&weights)?;
        let n = weights.rows();
        let neighborhoods = (0..n)
            .map(|i| (0..n).filter(|&j| weights[(i, j)] > 0.0).collect())
            .collect();
        Ok(Self {
            kind,
            weights,
            neighborhoods,
        })
    }

    /// No communication: every agent keeps its own state.
    pub fn identity(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Topology("n_agents must be at least 1".into()));
        }
        Self::from_weights(Mat::identity(n), TopologyKind::Custom)
    }

    /// Parses an `N x N` CSV matrix.
    pub fn from_csv(text: &str) -> Result<Self> {
        Self::from_weights(Mat::from_csv(text)?, TopologyKind::Custom)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    pub fn n_agents(&self) -> usize {
        self.weights.rows()
    }

    pub fn weights(&self) -> &Mat {
        &self.weights
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[(i, j)]
    }

    /// Indices `j` with `π_ij > 0`, ascending; always contains `i`.
    pub fn neighborhood(&self, i: usize) -> Result<&[usize]> {
        self.neighborhoods
            .get(i)
            .map(Vec::as_slice)
            .ok_or_else(|| {
                Error::Input(format!(
                    "agent index {i} out of range for {} agents",
                    self.n_agents()
                ))
            })
    }

    /// Number of directed edges `i -> j` with `i != j` and `π_ij > 0`.
    pub fn directed_edges(&self) -> usize {
        self.neighborhoods.iter().map(|nb| nb.len() - 1).sum()
    }

    /// `y_i = Σ_j π_ij x_j` for a vector with one entry per agent.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_agents())
            .map(|i| {
                self.neighborhoods[i]
                    .iter()
                    .map(|&j| self.weights[(i, j)] * x[j])
                    .sum()
            })
            .collect()
    }
}

fn validate_weights(w: &Mat) -> Result<()> {
    let n = w.rows();
    if w.cols() != n {
        return Err(Error::Validation(format!(
            "mixing matrix must be square, got {}x{}",
            w.rows(),
            w.cols()
        )));
    }
    for i in 0..n {
        for j in 0..n {
            let v = w[(i, j)];
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Validation(format!(
                    "entry ({i}, {j}) = {v} outside [0, 1]"
                )));
            }
            if (v - w[(j, i)]).abs() > STOCHASTIC_TOL {
                return Err(Error::Validation(format!(
                    "not symmetric at ({i}, {j}): {v} vs {}",
                    w[(j, i)]
                )));
            }
        }
        if w[(i, i)] <= 0.0 {
            return Err(Error::Validation(format!(
                "diagonal entry ({i}, {i}) must be positive"
            )));
        }
        let row: f64 = w.row(i).iter().sum();
        let col: f64 = (0..n).map(|k| w[(k, i)]).sum();
        if (row - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::Validation(format!("row {i} sums to {row}")));
        }
        if (col - 1.0).abs() > STOCHASTIC_TOL {
            return Err(Error::Validation(format!("column {i} sums to {col}")));
        }
    }
    Ok(())
}

/// Builds a built-in topology. Torus sizes must be perfect squares; use
/// [`build_torus`] for rectangular grids.
pub fn build_topology(kind: TopologyKind, n_agents: usize) -> Result<MixingMatrix> {
    if n_agents == 0 {
        return Err(Error::Topology("n_agents must be at least 1".into()));
    }
    let n = n_agents;
    match kind {
        TopologyKind::FullyConnected | TopologyKind::Star => {
            let w = Mat::from_fn(n, n, |_, _| 1.0 / n as f64);
            MixingMatrix::from_weights(w, kind)
        }
        TopologyKind::Ring => {
            let nbs = (0..n)
                .map(|i| vec![(i + n - 1) % n, i, (i + 1) % n])
                .collect();
            uniform_over(nbs, kind)
        }
        TopologyKind::Bipartite => {
            if !n.is_multiple_of(2) {
                return Err(Error::Topology(format!(
                    "bipartite requires an even number of agents, got {n}"
                )));
            }
            let half = n / 2;
            let nbs = (0..n)
                .map(|i| {
                    let other = if i < half { half..n } else { 0..half };
                    std::iter::once(i).chain(other).collect()
                })
                .collect();
            uniform_over(nbs, kind)
        }
        TopologyKind::Torus => {
            let side = (n as f64).sqrt().round() as usize;
            if side * side != n {
                return Err(Error::Topology(format!(
                    "torus requires a perfect-square number of agents or explicit grid dims, got {n}"
                )));
            }
            build_torus(side, side)
        }
        TopologyKind::Custom => Err(Error::Topology(
            "custom topologies are loaded from a matrix file".into(),
        )),
    }
}

/// Wrap-around `rows x cols` grid; each agent talks to its four grid
/// neighbours (fewer when a dimension is below 3 and neighbours coincide).
pub fn build_torus(rows: usize, cols: usize) -> Result<MixingMatrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::Topology(format!(
            "torus grid dims must be positive, got {rows}x{cols}"
        )));
    }
    let id = |r: usize, c: usize| r * cols + c;
    let nbs = (0..rows * cols)
        .map(|i| {
            let (r, c) = (i / cols, i % cols);
            vec![
                i,
                id((r + rows - 1) % rows, c),
                id((r + 1) % rows, c),
                id(r, (c + cols - 1) % cols),
                id(r, (c + 1) % cols),
            ]
        })
        .collect();
    uniform_over(nbs, TopologyKind::Torus)
}

/// Uniform weights over each (deduplicated) neighbourhood.
fn uniform_over(neighborhoods: Vec<Vec<usize>>, kind: TopologyKind) -> Result<MixingMatrix> {
    let n = neighborhoods.len();
    let mut w = Mat::zeros(n, n);
    for (i, mut nb) in neighborhoods.into_iter().enumerate() {
        nb.sort_unstable();
        nb.dedup();
        let p = 1.0 / nb.len() as f64;
        for j in nb {
            w[(i, j)] = p;
        }
    }
    MixingMatrix::from_weights(w, kind)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpectralReport {
    pub rho: f64,
    pub spectral_gap: f64,
    pub connected: bool,
}

/// `ρ = max(|λ₂|, |λ_N|)²` from the full spectrum. Disconnected graphs have a
/// repeated unit eigenvalue, so `ρ = 1` exactly.
pub fn spectral_report(m: &MixingMatrix) -> Result<SpectralReport> {
    validate_weights(m.weights())?;
    let n = m.n_agents();
    let connected = is_connected(m);
    let eig = symmetric_eigenvalues(m.weights())?;
    if (eig[0] - 1.0).abs() > 1e-10 {
        return Err(Error::Validation(format!(
            "largest eigenvalue {} is not 1",
            eig[0]
        )));
    }
    let rho = if n == 1 {
        0.0
    } else if !connected {
        1.0
    } else {
        eig[1].abs().max(eig[n - 1].abs()).powi(2).min(1.0)
    };
    Ok(SpectralReport {
        rho,
        spectral_gap: 1.0 - rho.sqrt(),
        connected,
    })
}

/// Breadth-first search over nonzero off-diagonal weights.
fn is_connected(m: &MixingMatrix) -> bool {
    let n = m.n_agents();
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0]);
    seen[0] = true;
    while let Some(i) = queue.pop_front() {
        for &j in &m.neighborhoods[i] {
            if !seen[j] {
                seen[j] = true;
                queue.push_back(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn fully_connected_ten() {
        let m = build_topology(TopologyKind::FullyConnected, 10).unwrap();
        assert!(m.weights().as_slice().iter().all(|&w| w == 0.1));
        let rep = spectral_report(&m).unwrap();
        assert!(rep.rho.abs() < 1e-12);
        assert!(rep.connected);
    }

    #[test]
    fn ring_three_is_uniform() {
        let m = build_topology(TopologyKind::Ring, 3).unwrap();
        assert!(m.weights().as_slice().iter().all(|&w| w == 1.0 / 3.0));
    }

    #[test]
    fn ring_five_rows() {
        let m = build_topology(TopologyKind::Ring, 5).unwrap();
        assert_eq!(m.weights().row(0), &[1.0 / 3.0, 1.0 / 3.0, 0.0, 0.0, 1.0 / 3.0]);
        assert_eq!(m.neighborhood(0).unwrap(), &[0, 1, 4]);
        assert!(m.neighborhood(5).is_err());
    }

    #[test]
    fn ring_four_rho() {
        let rep = spectral_report(&build_topology(TopologyKind::Ring, 4).unwrap()).unwrap();
        assert!((rep.rho - 1.0 / 9.0).abs() < 1e-10);
        assert!((rep.spectral_gap - 2.0 / 3.0).abs() < 1e-10);
    }

    #[test]
    fn small_rings() {
        let one = build_topology(TopologyKind::Ring, 1).unwrap();
        assert_eq!(one.weights().as_slice(), &[1.0]);
        assert_eq!(spectral_report(&one).unwrap().rho, 0.0);
        let two = build_topology(TopologyKind::Ring, 2).unwrap();
        assert!(two.weights().as_slice().iter().all(|&w| w == 0.5));
    }

    #[test]
    fn identity_is_disconnected() {
        let rep = spectral_report(&MixingMatrix::identity(5).unwrap()).unwrap();
        assert_eq!(rep.rho, 1.0);
        assert!(!rep.connected);
        assert_eq!(rep.spectral_gap, 0.0);
    }

    #[test]
    fn fully_connected_neighborhood() {
        let m = build_topology(TopologyKind::FullyConnected, 3).unwrap();
        assert_eq!(m.neighborhood(1).unwrap(), &[0, 1, 2]);
    }

    #[test]
    fn custom_matrix_neighborhood() {
        let m = MixingMatrix::from_csv("0.5,0.5,0\n0.5,0.5,0\n0,0,1\n").unwrap();
        assert_eq!(m.neighborhood(0).unwrap(), &[0, 1]);
        assert!(!spectral_report(&m).unwrap().connected);
    }

    #[test]
    fn size_constraints() {
        assert!(matches!(
            build_topology(TopologyKind::Bipartite, 5),
            Err(Error::Topology(_))
        ));
        assert!(matches!(
            build_topology(TopologyKind::Torus, 8),
            Err(Error::Topology(_))
        ));
        assert!(build_torus(2, 4).is_ok());
        assert!(build_topology(TopologyKind::Ring, 0).is_err());
    }

    #[test]
    fn rejects_invalid_custom_matrices() {
        assert!(matches!(
            MixingMatrix::from_csv("0.6,0.4\n0.5,0.5\n"),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            MixingMatrix::from_csv("0.0,1.0\n1.0,0.0\n"),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            MixingMatrix::from_csv("0.7,0.3\n0.3,0.8\n"),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn bipartite_and_torus_are_regular_and_connected() {
        for m in [
            build_topology(TopologyKind::Bipartite, 8).unwrap(),
            build_topology(TopologyKind::Torus, 16).unwrap(),
            build_torus(3, 5).unwrap(),
        ] {
            let deg = m.neighborhood(0).unwrap().len();
            assert!((0..m.n_agents()).all(|i| m.neighborhood(i).unwrap().len() == deg));
            let rep = spectral_report(&m).unwrap();
            assert!(rep.connected && rep.rho < 1.0);
        }
    }

    #[test]
    fn consensus_contracts_zero_mean_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for (kind, n) in [
            (TopologyKind::Ring, 8),
            (TopologyKind::FullyConnected, 8),
            (TopologyKind::Bipartite, 8),
            (TopologyKind::Torus, 9),
            (TopologyKind::Star, 6),
        ] {
            let m = build_topology(kind, n).unwrap();
            let root = spectral_report(&m).unwrap().rho.sqrt();
            for _ in 0..100 {
                let mut x: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
                let mean = x.iter().sum::<f64>() / n as f64;
                x.iter_mut().for_each(|v| *v -= mean);
                let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
                assert!(norm(&m.apply(&x)) <= root * norm(&x) + 1e-10, "{kind}");
            }
        }
    }

    #[test]
    fn construction_is_deterministic() {
        let a = build_topology(TopologyKind::Torus, 36).unwrap();
        let b = build_topology(TopologyKind::Torus, 36).unwrap();
        assert_eq!(a, b);
    }
}
