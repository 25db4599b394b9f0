//! Measured quantities and bounds.
//!
//! - Interference: `‖Σπ BʲAʲ − (ΣπBʲ)(ΣπAʲ)‖_F`, the gap between merging
//!   products and multiplying merged factors. Its maximum over agents is the
//!   per-round consensus difference between the two merge rules.
//! - The closed-form consensus-difference bound and the adapter-space
//!   smoothness constant `L̂`, plus an empirical smoothness probe.
//! - CSV serialization of the per-iteration records and the communication
//!   ledger.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::adapter::{mean_adapter, AdapterPair, FrozenBase};
use crate::consensus::{check_states, neighbor_product_sum, neighbor_sum};
use crate::error::{input, Error, Result};
use crate::lowrank::Mat;
use crate::objective::{AgentDataset, GlobalObjective};
use crate::rng::{stream, Purpose};
use crate::topology::MixingMatrix;

/// Interference at agent `i`.
pub fn interference(states: &[AdapterPair], m: &MixingMatrix, i: usize) -> Result<f64> {
    check_states(states, m)?;
    m.neighborhood(i)?;
    Ok(interference_unchecked(states, m, i))
}

fn interference_unchecked(states: &[AdapterPair], m: &MixingMatrix, i: usize) -> f64 {
    let products = neighbor_product_sum(states, m, i);
    let a = neighbor_sum(m, i, |j| &states[j].a);
    let b = neighbor_sum(m, i, |j| &states[j].b);
    products.sub(&b.matmul(&a)).frobenius_sq().sqrt()
}

/// Maximum interference over all agents.
pub fn interference_max(states: &[AdapterPair], m: &MixingMatrix) -> Result<f64> {
    check_states(states, m)?;
    Ok((0..states.len())
        .map(|i| interference_unchecked(states, m, i))
        .fold(0.0, f64::max))
}

/// Consensus difference between product and individual merging for one
/// round; the same quantity as [`interference_max`].
pub fn consensus_diff(states: &[AdapterPair], m: &MixingMatrix) -> Result<f64> {
    interference_max(states, m)
}

/// `‖∇f(v̄)‖²` at the mean adapter for the global full-batch objective.
pub fn avg_grad_norm_sq(base: &FrozenBase, states: &[AdapterPair], datasets: &[AgentDataset]) -> Result<f64> {
    avg_grad_norm_sq_with(base, states, &GlobalObjective::new(datasets)?)
}

pub fn avg_grad_norm_sq_with(base: &FrozenBase, states: &[AdapterPair], global: &GlobalObjective) -> Result<f64> {
    let mean = mean_adapter(states)?;
    let (ga, gb) = global.grad_adapter(base, &mean)?;
    Ok(ga.frobenius_sq() + gb.frobenius_sq())
}

/// Closed-form bound on the consensus difference:
/// `2αGηc/(√r(1−√ρ)) + (ρ^{T/2}·c + q)·q` with `q = αηcG/(r(1−√ρ))`.
/// `t` may be `f64::INFINITY` for the asymptotic value.
pub fn consensus_diff_bound(alpha: f64, g: f64, eta: f64, c: f64, r: usize, rho: f64, t: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&rho) {
        return Err(Error::Input(format!(
            "rho must lie in [0, 1) for the consensus bound, got {rho}"
        )));
    }
    if r == 0 {
        return input("rank must be positive");
    }
    let gap = 1.0 - rho.sqrt();
    let rf = r as f64;
    let q = alpha * eta * c * g / (rf * gap);
    let decay = if rho == 0.0 { 0.0 } else { rho.powf(t / 2.0) };
    Ok(2.0 * alpha * g * eta * c / (rf.sqrt() * gap) + (decay * c + q) * q)
}

/// `L̂ = η(2·L·C·√r·c + G)/r`.
pub fn smoothness_constant(l: f64, big_c: f64, c: f64, g: f64, eta: f64, r: usize) -> Result<f64> {
    if r == 0 {
        return input("rank must be positive");
    }
    let rf = r as f64;
    Ok(eta * (2.0 * l * big_c * rf.sqrt() * c + g) / rf)
}

/// `C = ηc/√r`, the bound on `‖ΔW‖` implied by factor bounds `c`.
pub fn default_big_c(eta: f64, c: f64, r: usize) -> f64 {
    eta * c / (r as f64).sqrt()
}

/// Largest step size allowed by the convergence condition:
/// `(1−√ρ)/(4√2·L̂)`.
pub fn step_size_limit(rho: f64, l_hat: f64) -> f64 {
    (1.0 - rho.sqrt()) / (4.0 * std::f64::consts::SQRT_2 * l_hat)
}

/// Which coordinates the smoothness probe perturbs and measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SmoothnessScope {
    /// Perturb and measure both factors.
    Both,
    /// Perturb only `B` (A fixed) and measure only the `B` gradient.
    BOnly,
}

/// Largest observed `‖∇f(w) − ∇f(w')‖ / ‖w − w'‖` over `n_pairs` random
/// pairs drawn from the ball of the given radius around `center`.
pub fn empirical_smoothness(
    base: &FrozenBase,
    datasets: &[AgentDataset],
    center: &AdapterPair,
    n_pairs: usize,
    radius: f64,
    scope: SmoothnessScope,
    seed: u64,
) -> Result<f64> {
    if n_pairs == 0 {
        return input("n_pairs must be at least 1");
    }
    if !(radius.is_finite() && radius > 0.0) {
        return input(format!("radius must be positive, got {radius}"));
    }
    let global = GlobalObjective::new(datasets)?;
    let mut rng = stream(seed, Purpose::Probe, 1, 0);
    let sample = |rng: &mut rand_chacha::ChaCha8Rng| -> AdapterPair {
        let mut za = Mat::from_fn(center.a.rows(), center.a.cols(), |_, _| rng.sample(StandardNormal));
        let zb = Mat::from_fn(center.b.rows(), center.b.cols(), |_, _| rng.sample(StandardNormal));
        if scope == SmoothnessScope::BOnly {
            za = Mat::zeros(za.rows(), za.cols());
        }
        let norm = (za.frobenius_sq() + zb.frobenius_sq()).sqrt();
        let len = radius * rng.random::<f64>() / norm;
        let mut p = center.clone();
        p.a.axpy(len, &za);
        p.b.axpy(len, &zb);
        p
    };
    let mut best: f64 = 0.0;
    for _ in 0..n_pairs {
        let w1 = sample(&mut rng);
        let w2 = sample(&mut rng);
        let dist = (w1.a.sub(&w2.a).frobenius_sq() + w1.b.sub(&w2.b).frobenius_sq()).sqrt();
        if dist == 0.0 {
            continue;
        }
        let (ga1, gb1) = global.grad_adapter(base, &w1)?;
        let (ga2, gb2) = global.grad_adapter(base, &w2)?;
        let mut diff = gb1.sub(&gb2).frobenius_sq();
        if scope == SmoothnessScope::Both {
            diff += ga1.sub(&ga2).frobenius_sq();
        }
        best = best.max(diff.sqrt() / dist);
    }
    Ok(best)
}

/// One sampled iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub iter: u64,
    /// Mean over agents of the global objective at each agent's adapter.
    pub global_loss: f64,
    /// `fⁱ(wⁱ)` on the agent's own full dataset.
    pub per_agent_losses: Vec<f64>,
    pub avg_grad_norm_sq: f64,
    pub disagreement: f64,
    pub interference_max: Option<f64>,
    pub tsvd_error_max: Option<f64>,
    pub tsvd_bound_max: Option<f64>,
    pub consensus_diff: Option<f64>,
    pub consensus_diff_bound: Option<f64>,
    /// Cumulative bytes exchanged up to and including this iteration.
    pub comm_bytes: u64,
}

pub const METRICS_HEADER: &str = "iter,global_loss,per_agent_losses,avg_grad_norm_sq,disagreement,\
interference_max,tsvd_error_max,tsvd_bound_max,consensus_diff,consensus_diff_bound,comm_bytes";

/// 16 significant digits in scientific notation; `inf`/`nan` spelled out.
pub fn fmt_num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.15e}")
    } else if x.is_nan() {
        "nan".into()
    } else if x > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_num).unwrap_or_default()
}

/// Metrics CSV with header. Per-agent losses are `;`-joined in one column;
/// fields that only exist on communication iterations are empty otherwise.
pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in records {
        let losses: Vec<String> = r.per_agent_losses.iter().map(|&v| fmt_num(v)).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.iter,
            fmt_num(r.global_loss),
            losses.join(";"),
            fmt_num(r.avg_grad_norm_sq),
            fmt_num(r.disagreement),
            fmt_opt(r.interference_max),
            fmt_opt(r.tsvd_error_max),
            fmt_opt(r.tsvd_bound_max),
            fmt_opt(r.consensus_diff),
            fmt_opt(r.consensus_diff_bound),
            r.comm_bytes
        );
    }
    s
}

/// One communication round.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundRecord {
    pub iter: u64,
    pub directed_edges: usize,
    pub bytes: u64,
    pub cumulative_bytes: u64,
    /// Interference of the pre-merge states (max over agents).
    pub consensus_diff: f64,
    pub tsvd_error_max: Option<f64>,
    pub tsvd_bound_max: Option<f64>,
}

pub const LEDGER_HEADER: &str =
    "iter,directed_edges,bytes,cumulative_bytes,consensus_diff,tsvd_error_max,tsvd_bound_max";

pub fn ledger_csv(rounds: &[RoundRecord]) -> String {
    let mut s = String::from(LEDGER_HEADER);
    s.push('\n');
    for r in rounds {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.iter,
            r.directed_edges,
            r.bytes,
            r.cumulative_bytes,
            fmt_num(r.consensus_diff),
            fmt_opt(r.tsvd_error_max),
            fmt_opt(r.tsvd_bound_max)
        );
    }
    s
}
