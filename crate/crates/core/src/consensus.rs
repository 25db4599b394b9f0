//! Gossip merge operators.
//!
//! All operators are synchronous: every output is computed from the same
//! pre-round snapshot and written to a fresh list. Neighbour sums run in
//! ascending agent order starting from zero, so an agent whose only
//! neighbour is itself (weight 1) gets its own state back bit-for-bit.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::adapter::AdapterPair;
use crate::error::{input, Error, Result};
use crate::lowrank::{factor_split, spectral_norm, tsvd, Mat, SplitMode};
use crate::topology::MixingMatrix;

/// Singular values at or below this fraction of `σ₁` are treated as absent
/// when refactorizing a product.
pub const NULL_COMPONENT_TOL: f64 = 1e-14;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConsensusMode {
    /// Average `A` and `B` separately (DLoRA).
    Individual,
    /// Average the products `BA`, then truncate and refactor (DeCAF).
    ProductTsvd,
    /// Average only `B`; all agents share one frozen `A`.
    FrozenA,
    /// No communication.
    None,
}

impl FromStr for ConsensusMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "individual" => Ok(Self::Individual),
            "product_tsvd" => Ok(Self::ProductTsvd),
            "frozen_a" => Ok(Self::FrozenA),
            "none" => Ok(Self::None),
            other => Err(Error::Parse(format!("unknown consensus mode {other:?}"))),
        }
    }
}

impl fmt::Display for ConsensusMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Individual => "individual",
            Self::ProductTsvd => "product_tsvd",
            Self::FrozenA => "frozen_a",
            Self::None => "none",
        })
    }
}

/// `Σ_{j ∈ Nb(i)} π_ij · X_j`, accumulated in ascending `j`.
pub fn neighbor_sum<'a>(m: &MixingMatrix, i: usize, item: impl Fn(usize) -> &'a Mat) -> Mat {
    let nb = &m.neighborhood(i).expect("agent index checked by caller");
    let first = item(nb[0]);
    let mut out = Mat::zeros(first.rows(), first.cols());
    for &j in nb.iter() {
        out.axpy(m.weight(i, j), item(j));
    }
    out
}

/// `Σ_{j ∈ Nb(i)} π_ij · Bʲ Aʲ`, accumulated in ascending `j`.
pub fn neighbor_product_sum(states: &[AdapterPair], m: &MixingMatrix, i: usize) -> Mat {
    let nb = m.neighborhood(i).expect("agent index checked by caller");
    let mut out = Mat::zeros(states[0].d(), states[0].k());
    for &j in nb {
        out.axpy(m.weight(i, j), &states[j].b.matmul(&states[j].a));
    }
    out
}

pub(crate) fn check_states(states: &[AdapterPair], m: &MixingMatrix) -> Result<()> {
    if states.len() != m.n_agents() {
        return input(format!(
            "{} states for a {}-agent mixing matrix",
            states.len(),
            m.n_agents()
        ));
    }
    for s in &states[1..] {
        states[0].a.check_same_shape(&s.a, "consensus A")?;
        states[0].b.check_same_shape(&s.b, "consensus B")?;
    }
    Ok(())
}

/// `Aⁱ ← Σ π_ij Aʲ`, `Bⁱ ← Σ π_ij Bʲ`.
pub fn individual_consensus(states: &[AdapterPair], m: &MixingMatrix) -> Result<Vec<AdapterPair>> {
    check_states(states, m)?;
    Ok((0..states.len())
        .into_par_iter()
        .map(|i| AdapterPair {
            a: neighbor_sum(m, i, |j| &states[j].a),
            b: neighbor_sum(m, i, |j| &states[j].b),
            eta: states[i].eta,
        })
        .collect())
}

/// `Bⁱ ← Σ π_ij Bʲ`; `A` is left untouched. All agents must share one `A`.
pub fn frozen_a_consensus(states: &[AdapterPair], m: &MixingMatrix) -> Result<Vec<AdapterPair>> {
    check_states(states, m)?;
    for (j, s) in states.iter().enumerate().skip(1) {
        let gap = s.a.sub(&states[0].a).frobenius_sq().sqrt();
        if gap > 1e-12 {
            return Err(Error::Contract(format!(
                "frozen-A consensus requires a shared A; agent {j} differs from agent 0 by {gap:e}"
            )));
        }
    }
    Ok((0..states.len())
        .into_par_iter()
        .map(|i| AdapterPair {
            a: states[i].a.clone(),
            b: neighbor_sum(m, i, |j| &states[j].b),
            eta: states[i].eta,
        })
        .collect())
}

/// Rank-`r` factors `(A, B)` of a `d x k` matrix.
///
/// Components whose singular value is numerically zero (at most
/// [`NULL_COMPONENT_TOL`]·σ₁, or all of them when the matrix is zero) get a
/// unit-norm `A` row along the matching right singular vector and a zero `B`
/// column. Their contribution to `BA` is zero either way, but a zero `A` row
/// would also zero the gradient of the matching `B` column and the component
/// could never be trained again.
pub fn refactor(product: &Mat, r: usize, split: SplitMode) -> Result<(Mat, Mat, f64)> {
    let t = tsvd(product, r)?;
    let (mut a, mut b) = factor_split(&t, split);
    let top = t.sigma_r[0];
    for j in 0..r {
        if top == 0.0 || t.sigma_r[j] <= NULL_COMPONENT_TOL * top {
            for col in 0..a.cols() {
                a[(j, col)] = t.v_r[(col, j)];
            }
            for row in 0..b.rows() {
                b[(row, j)] = 0.0;
            }
        }
    }
    Ok((a, b, t.tail_energy))
}

/// Rank-`r` factors `(A, B)` of a `d x k` matrix by plain truncation and
/// split, without the null-component completion of [`refactor`].
pub fn refactor_raw(product: &Mat, r: usize, split: SplitMode) -> Result<(Mat, Mat)> {
    Ok(factor_split(&tsvd(product, r)?, split))
}

/// Per-agent TSVD diagnostics from one product-consensus round.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TsvdRound {
    /// `‖Σπ BʲAʲ − B_out A_out‖_F`.
    pub measured: f64,
    /// `√((|Nb(i)|−1)·r)·c²` with `c` the largest neighbour factor `σ₁`.
    pub bound: f64,
}

/// Slack granted to the approximation bound for floating-point rounding.
pub fn bound_slack(product_norm: f64) -> f64 {
    1e-12 * (1.0 + product_norm)
}

/// `√((|Nb(i)|−1)·r)·c²`.
pub fn tsvd_error_bound(neighborhood_size: usize, r: usize, c: f64) -> f64 {
    (((neighborhood_size - 1) * r) as f64).sqrt() * c * c
}

fn neighbor_factor_bound(states: &[AdapterPair], nb: &[usize]) -> f64 {
    nb.iter()
        .map(|&j| spectral_norm(&states[j].a).max(spectral_norm(&states[j].b)))
        .fold(0.0, f64::max)
}

fn product_merge(
    states: &[AdapterPair],
    m: &MixingMatrix,
    i: usize,
    split: SplitMode,
) -> Result<(AdapterPair, TsvdRound)> {
    let r = states[i].rank();
    let product = neighbor_product_sum(states, m, i);
    let (a, b, _) = refactor(&product, r, split)?;
    let measured = product.sub(&b.matmul(&a)).frobenius_sq().sqrt();
    let nb = m.neighborhood(i)?;
    let bound = tsvd_error_bound(nb.len(), r, neighbor_factor_bound(states, nb));
    if measured > bound + bound_slack(product.frobenius_sq().sqrt()) {
        return Err(Error::Contract(format!(
            "truncation error {measured:e} exceeds bound {bound:e} at agent {i}"
        )));
    }
    Ok((
        AdapterPair {
            a,
            b,
            eta: states[i].eta,
        },
        TsvdRound { measured, bound },
    ))
}

/// Product consensus plus the per-agent truncation diagnostics.
///
/// Returns a contract error if any agent's truncation error exceeds the
/// approximation bound.
pub fn product_consensus_with_report(
    states: &[AdapterPair],
    m: &MixingMatrix,
    split: SplitMode,
) -> Result<(Vec<AdapterPair>, Vec<TsvdRound>)> {
    check_states(states, m)?;
    let merged = (0..states.len())
        .into_par_iter()
        .map(|i| product_merge(states, m, i, split))
        .collect::<Result<Vec<_>>>()?;
    Ok(merged.into_iter().unzip())
}

/// `(Aⁱ, Bⁱ) ← T_r(Σ π_ij BʲAʲ)` split back into factors.
pub fn product_consensus_tsvd(
    states: &[AdapterPair],
    m: &MixingMatrix,
    split: SplitMode,
) -> Result<Vec<AdapterPair>> {
    Ok(product_consensus_with_report(states, m, split)?.0)
}

/// Measured truncation error and its bound for agent `i`.
pub fn tsvd_round_error(states: &[AdapterPair], m: &MixingMatrix, i: usize) -> Result<(f64, f64)> {
    check_states(states, m)?;
    m.neighborhood(i)?;
    let (_, round) = product_merge(states, m, i, SplitMode::Balanced)?;
    Ok((round.measured, round.bound))
}

/// Dispatches on `mode`. `None` returns the states unchanged.
pub fn apply(
    mode: ConsensusMode,
    states: &[AdapterPair],
    m: &MixingMatrix,
    split: SplitMode,
) -> Result<Vec<AdapterPair>> {
    match mode {
        ConsensusMode::Individual => individual_consensus(states, m),
        ConsensusMode::ProductTsvd => product_consensus_tsvd(states, m, split),
        ConsensusMode::FrozenA => frozen_a_consensus(states, m),
        ConsensusMode::None => {
            check_states(states, m)?;
            Ok(states.to_vec())
        }
    }
}
