//! Local update rules.
//!
//! Each optimizer turns a gradient into a step `Δ` that depends only on the
//! gradient and the agent's own buffers, never on the parameters. The trainer
//! computes `Δ`, runs consensus on the parameters, then adds `Δ` to the
//! merged parameters — the "descend from the post-consensus state" structure
//! of the decentralized algorithms.
//!
//! - SGD: `Δ = −α·g`.
//! - Momentum SGD: `V ← βV − α·g`, `Δ = V` for both factors.
//! - Adam (tracked second moment): `M ← β₁M + (1−β₁)g`, `V_t = h_t(g₁..g_t)`,
//!   `Û ← Û + V_t − V_{t−1}`, `Δ = −α·M ⊘ √max(Û, ε)`. Û is additionally
//!   mixed across agents on communication rounds so that it tracks the
//!   network-average second moment. There is no bias correction.

use std::fmt;
use std::str::FromStr;

use crate::adapter::AdapterPair;
use crate::consensus::{check_states, neighbor_sum, refactor_raw, ConsensusMode};
use crate::error::{Error, Result};
use crate::lowrank::{Mat, SplitMode};
use crate::topology::MixingMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Msgd,
    Adam,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(Self::Sgd),
            "msgd" => Ok(Self::Msgd),
            "adam" => Ok(Self::Adam),
            other => Err(Error::Parse(format!(
                "unknown optimizer {other:?} (expected sgd|msgd|adam)"
            ))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sgd => "sgd",
            Self::Msgd => "msgd",
            Self::Adam => "adam",
        })
    }
}

/// Second-moment rule `h_t` of the Adam variant.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AdamHt {
    /// `V_t = max(V_{t−1}, β₂V_{t−1} + (1−β₂)g⊙g)`.
    #[default]
    Amsgrad,
    /// `V_t = β₂V_{t−1} + (1−β₂)g⊙g`.
    Ema,
}

impl FromStr for AdamHt {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "amsgrad" => Ok(Self::Amsgrad),
            "ema" => Ok(Self::Ema),
            other => Err(Error::Parse(format!(
                "unknown adam_ht {other:?} (expected amsgrad|ema)"
            ))),
        }
    }
}

impl fmt::Display for AdamHt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Amsgrad => "amsgrad",
            Self::Ema => "ema",
        })
    }
}

/// Optimizer hyperparameters other than the (scheduled) step size.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptHyper {
    pub kind: OptimizerKind,
    pub beta: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub adam_ht: AdamHt,
}

impl Default for OptHyper {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            beta: 0.9,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            adam_ht: AdamHt::Amsgrad,
        }
    }
}

impl OptHyper {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Per-agent optimizer buffers, shaped like the adapter factors.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    /// Momentum velocities.
    pub v_a: Mat,
    pub v_b: Mat,
    /// Adam first moments.
    pub m_a: Mat,
    pub m_b: Mat,
    /// Adam second-moment trackers `V_t`.
    pub vt_a: Mat,
    pub vt_b: Mat,
    /// Consensus-tracked second moments `Û`.
    pub uhat_a: Mat,
    pub uhat_b: Mat,
}

impl OptState {
    pub fn zeros(p: &AdapterPair) -> Self {
        let za = Mat::zeros(p.a.rows(), p.a.cols());
        let zb = Mat::zeros(p.b.rows(), p.b.cols());
        Self {
            v_a: za.clone(),
            v_b: zb.clone(),
            m_a: za.clone(),
            m_b: zb.clone(),
            vt_a: za.clone(),
            vt_b: zb.clone(),
            uhat_a: za,
            uhat_b: zb,
        }
    }
}

/// A step `Δ` for both factors, to be added to the (merged) parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub a: Mat,
    pub b: Mat,
}

impl Step {
    /// `p + Δ`.
    pub fn apply(&self, p: &AdapterPair) -> AdapterPair {
        let mut out = p.clone();
        out.a.axpy(1.0, &self.a);
        out.b.axpy(1.0, &self.b);
        out
    }
}

/// `a ← a − α·g_A`, `b ← b − α·g_B`.
pub fn sgd_step(p: &AdapterPair, ga: &Mat, gb: &Mat, alpha: f64) -> AdapterPair {
    sgd_direction(ga, gb, alpha).apply(p)
}

fn sgd_direction(ga: &Mat, gb: &Mat, alpha: f64) -> Step {
    Step {
        a: ga.scale(-alpha),
        b: gb.scale(-alpha),
    }
}

fn momentum_direction(ga: &Mat, gb: &Mat, alpha: f64, beta: f64, state: &mut OptState) -> Step {
    let update = |v: &Mat, g: &Mat| v.zip_with(g, "momentum", |v, g| beta * v - alpha * g);
    state.v_a = update(&state.v_a, ga);
    state.v_b = update(&state.v_b, gb);
    Step {
        a: state.v_a.clone(),
        b: state.v_b.clone(),
    }
}

/// `V ← βV − α·g`, then `a ← a + V_A`, `b ← b + V_B`.
pub fn msgd_step(p: &AdapterPair, ga: &Mat, gb: &Mat, alpha: f64, beta: f64, state: &mut OptState) -> AdapterPair {
    momentum_direction(ga, gb, alpha, beta, state).apply(p)
}

/// Updates `M`, `V` and `Û` for one gradient and returns the Adam step built
/// from the current (pre-merge) `Û`.
fn adam_direction(ga: &Mat, gb: &Mat, alpha: f64, hyper: &OptHyper, state: &mut OptState) -> Step {
    let (b1, b2, eps) = (hyper.beta1, hyper.beta2, hyper.epsilon);
    let first = |m: &Mat, g: &Mat| m.zip_with(g, "adam M", |m, g| b1 * m + (1.0 - b1) * g);
    let second = |v: &Mat, g: &Mat| {
        v.zip_with(g, "adam V", |v, g| {
            let ema = b2 * v + (1.0 - b2) * g * g;
            match hyper.adam_ht {
                AdamHt::Amsgrad => v.max(ema),
                AdamHt::Ema => ema,
            }
        })
    };
    state.m_a = first(&state.m_a, ga);
    state.m_b = first(&state.m_b, gb);
    let vt_a = second(&state.vt_a, ga);
    let vt_b = second(&state.vt_b, gb);
    state.uhat_a = state.uhat_a.add(&vt_a.sub(&state.vt_a));
    state.uhat_b = state.uhat_b.add(&vt_b.sub(&state.vt_b));
    state.vt_a = vt_a;
    state.vt_b = vt_b;
    let dir = |m: &Mat, u: &Mat| m.zip_with(u, "adam step", |m, u| -alpha * m / u.max(eps).sqrt());
    Step {
        a: dir(&state.m_a, &state.uhat_a),
        b: dir(&state.m_b, &state.uhat_b),
    }
}

/// One Adam step without communication.
pub fn adam_step(
    p: &AdapterPair,
    ga: &Mat,
    gb: &Mat,
    alpha: f64,
    hyper: &OptHyper,
    state: &mut OptState,
) -> AdapterPair {
    adam_direction(ga, gb, alpha, hyper, state).apply(p)
}

/// Computes the step for the configured optimizer, updating its buffers.
pub fn direction(ga: &Mat, gb: &Mat, alpha: f64, hyper: &OptHyper, state: &mut OptState) -> Step {
    match hyper.kind {
        OptimizerKind::Sgd => sgd_direction(ga, gb, alpha),
        OptimizerKind::Msgd => momentum_direction(ga, gb, alpha, hyper.beta, state),
        OptimizerKind::Adam => adam_direction(ga, gb, alpha, hyper, state),
    }
}

/// Mixes the Adam `Û` buffers across agents with the same rule used for the
/// parameters. Momentum velocities are never communicated.
pub fn consensus_opt_buffers(
    states: &mut [OptState],
    m: &MixingMatrix,
    mode: ConsensusMode,
    r: usize,
    split: SplitMode,
) -> Result<()> {
    if states.len() != m.n_agents() {
        return Err(Error::Input(format!(
            "{} optimizer states for a {}-agent mixing matrix",
            states.len(),
            m.n_agents()
        )));
    }
    // Reuse the adapter shape checks by viewing Û as an adapter pair.
    let views: Vec<AdapterPair> = states
        .iter()
        .map(|s| AdapterPair {
            a: s.uhat_a.clone(),
            b: s.uhat_b.clone(),
            eta: 1.0,
        })
        .collect();
    check_states(&views, m)?;
    let n = states.len();
    match mode {
        ConsensusMode::None => {}
        ConsensusMode::Individual => {
            let merged: Vec<(Mat, Mat)> = (0..n)
                .map(|i| {
                    (
                        neighbor_sum(m, i, |j| &views[j].a),
                        neighbor_sum(m, i, |j| &views[j].b),
                    )
                })
                .collect();
            for (s, (a, b)) in states.iter_mut().zip(merged) {
                s.uhat_a = a;
                s.uhat_b = b;
            }
        }
        ConsensusMode::FrozenA => {
            let merged: Vec<Mat> = (0..n).map(|i| neighbor_sum(m, i, |j| &views[j].b)).collect();
            for (s, b) in states.iter_mut().zip(merged) {
                s.uhat_b = b;
            }
        }
        ConsensusMode::ProductTsvd => {
            let merged = (0..n)
                .map(|i| {
                    let product = crate::consensus::neighbor_product_sum(&views, m, i);
                    refactor_raw(&product, r, split)
                })
                .collect::<Result<Vec<_>>>()?;
            for (s, (a, b)) in states.iter_mut().zip(merged) {
                s.uhat_a = a;
                s.uhat_b = b;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{build_topology, TopologyKind};

    fn scalar(v: f64) -> Mat {
        Mat::from_vec(1, 1, vec![v]).unwrap()
    }

    fn scalar_pair(a: f64, b: f64) -> AdapterPair {
        AdapterPair::new(scalar(a), scalar(b), 1.0).unwrap()
    }

    #[test]
    fn sgd_cases() {
        let p = scalar_pair(2.0, 3.0);
        assert_eq!(sgd_step(&p, &scalar(0.0), &scalar(0.0), 0.1), p);
        let q = sgd_step(&p, &scalar(15.0), &scalar(10.0), 0.1);
        assert!((q.a[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((q.b[(0, 0)] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn sgd_two_step_hand_trace() {
        // f = ½(ab·x − y)² with x = y = 1, starting at a = 2, b = 3, α = 0.01.
        let grads = |p: &AdapterPair| {
            let (a, b) = (p.a[(0, 0)], p.b[(0, 0)]);
            let res = a * b - 1.0;
            (scalar(b * res), scalar(a * res))
        };
        let mut p = scalar_pair(2.0, 3.0);
        for _ in 0..2 {
            let (ga, gb) = grads(&p);
            p = sgd_step(&p, &ga, &gb, 0.01);
        }
        // Step 1: a = 2 − 0.15 = 1.85, b = 3 − 0.10 = 2.90; residual 4.365.
        let (a1, b1) = (1.85, 2.9);
        let res1 = a1 * b1 - 1.0;
        let expect_a = a1 - 0.01 * b1 * res1;
        let expect_b = b1 - 0.01 * a1 * res1;
        assert!((p.a[(0, 0)] - expect_a).abs() < 1e-12);
        assert!((p.b[(0, 0)] - expect_b).abs() < 1e-12);
    }

    #[test]
    fn msgd_without_momentum_is_sgd() {
        let p = scalar_pair(2.0, 3.0);
        let mut state = OptState::zeros(&p);
        let (ga, gb) = (scalar(0.37), scalar(-1.3));
        let m = msgd_step(&p, &ga, &gb, 0.05, 0.0, &mut state);
        assert_eq!(m, sgd_step(&p, &ga, &gb, 0.05));
    }

    #[test]
    fn msgd_velocity_sequence() {
        let mut p = scalar_pair(0.0, 0.0);
        let mut state = OptState::zeros(&p);
        let mut seen = Vec::new();
        for _ in 0..3 {
            p = msgd_step(&p, &scalar(1.0), &scalar(1.0), 0.1, 0.9, &mut state);
            seen.push(state.v_a[(0, 0)]);
        }
        for (got, want) in seen.iter().zip([-0.1, -0.19, -0.271]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn msgd_velocity_decays_without_gradient() {
        let p = scalar_pair(0.0, 0.0);
        let mut state = OptState::zeros(&p);
        state.v_a = scalar(1.0);
        msgd_step(&p, &scalar(0.0), &scalar(0.0), 0.1, 0.5, &mut state);
        msgd_step(&p, &scalar(0.0), &scalar(0.0), 0.1, 0.5, &mut state);
        assert_eq!(state.v_a[(0, 0)], 0.25);
    }

    #[test]
    fn adam_first_step_closed_form() {
        let hyper = OptHyper {
            kind: OptimizerKind::Adam,
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 0.04,
            ..OptHyper::default()
        };
        for g in [3.0, -0.1] {
            let p = scalar_pair(1.0, 1.0);
            let mut state = OptState::zeros(&p);
            let q = adam_step(&p, &scalar(g), &scalar(g), 0.1, &hyper, &mut state);
            let expect = 1.0 - 0.1 * g / g.abs().max(0.2);
            assert!((q.a[(0, 0)] - expect).abs() < 1e-15);
            assert_eq!(state.uhat_a, scalar(g * g));
        }
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let hyper = OptHyper {
            kind: OptimizerKind::Adam,
            ..OptHyper::default()
        };
        let mut p = scalar_pair(1.0, -2.0);
        let start = p.clone();
        let mut state = OptState::zeros(&p);
        for _ in 0..5 {
            p = adam_step(&p, &scalar(0.0), &scalar(0.0), 0.1, &hyper, &mut state);
        }
        assert_eq!(p, start);
    }

    #[test]
    fn adam_floor_holds() {
        let hyper = OptHyper {
            kind: OptimizerKind::Adam,
            adam_ht: AdamHt::Ema,
            epsilon: 1e-3,
            ..OptHyper::default()
        };
        let p = scalar_pair(1.0, 1.0);
        let mut state = OptState::zeros(&p);
        let mut q = p;
        for t in 0..20 {
            let g = if t < 3 { 1.0 } else { 0.0 };
            let before = q.clone();
            q = adam_step(&q, &scalar(g), &scalar(g), 0.01, &hyper, &mut state);
            let u = state.uhat_a[(0, 0)].max(1e-3);
            let implied = (before.a[(0, 0)] - q.a[(0, 0)]) / 0.01;
            assert!((implied - state.m_a[(0, 0)] / u.sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn stacked_problems_update_blockwise() {
        let hyper = OptHyper {
            kind: OptimizerKind::Adam,
            ..OptHyper::default()
        };
        let stacked = AdapterPair::new(
            Mat::from_vec(1, 2, vec![1.0, -0.5]).unwrap(),
            Mat::from_vec(1, 1, vec![0.3]).unwrap(),
            1.0,
        )
        .unwrap();
        let ga = Mat::from_vec(1, 2, vec![0.7, -2.0]).unwrap();
        let mut st = OptState::zeros(&stacked);
        let out = adam_step(&stacked, &ga, &scalar(0.4), 0.05, &hyper, &mut st);
        for (col, (a0, g)) in [(1.0, 0.7), (-0.5, -2.0)].into_iter().enumerate() {
            let p = scalar_pair(a0, 0.3);
            let mut s = OptState::zeros(&p);
            let q = adam_step(&p, &scalar(g), &scalar(0.4), 0.05, &hyper, &mut s);
            assert_eq!(q.a[(0, 0)], out.a[(0, col)]);
        }
    }

    #[test]
    fn buffer_consensus_modes() {
        let p = scalar_pair(0.0, 0.0);
        let mut states = vec![OptState::zeros(&p), OptState::zeros(&p)];
        states[0].uhat_a = scalar(1.0);
        states[1].uhat_a = scalar(3.0);
        states[0].v_a = scalar(5.0);
        let id = MixingMatrix::identity(2).unwrap();
        let before = states.clone();
        consensus_opt_buffers(&mut states, &id, ConsensusMode::Individual, 1, SplitMode::Balanced).unwrap();
        assert_eq!(states, before);

        let fc = build_topology(TopologyKind::FullyConnected, 2).unwrap();
        consensus_opt_buffers(&mut states, &fc, ConsensusMode::Individual, 1, SplitMode::Balanced).unwrap();
        assert_eq!(states[0].uhat_a, scalar(2.0));
        assert_eq!(states[1].uhat_a, scalar(2.0));
        assert_eq!(states[0].v_a, scalar(5.0));

        let same = states.clone();
        consensus_opt_buffers(&mut states, &fc, ConsensusMode::Individual, 1, SplitMode::Balanced).unwrap();
        assert_eq!(states, same);
    }

    #[test]
    fn hyper_validation() {
        assert!(OptHyper::default().validate().is_ok());
        assert!(OptHyper { beta: 1.0, ..OptHyper::default() }.validate().is_err());
        assert!(OptHyper { epsilon: 0.0, ..OptHyper::default() }.validate().is_err());
    }
}
