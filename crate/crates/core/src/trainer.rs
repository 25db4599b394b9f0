//! The synchronous decentralized training loop.
//!
//! Iteration `t = 1..=T` for every agent:
//! 1. draw a mini-batch and compute `(g_A, g_B)` at the current state and
//!    turn it into an optimizer step;
//! 2. if `t mod τ = 0`, merge the adapters with the algorithm's consensus
//!    rule (and, for Adam, the tracked second moments);
//! 3. add the step to the merged state.
//!
//! All randomness comes from streams keyed by `(seed, purpose, agent, t)`,
//! agent work runs in parallel, and every reduction runs in ascending agent
//! order, so a run is bit-identical for any thread count. Measurements never
//! draw from training streams.

use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::adapter::{adapter_disagreement, init_adapter, gaussian_mat, AdapterPair, FrozenBase};
use crate::config::{Algorithm, GradPoint, RunConfig};
use crate::consensus::{self, ConsensusMode};
use crate::error::{Error, Result};
use crate::lowrank::Mat;
use crate::metrics::{
    avg_grad_norm_sq_with, default_big_c, interference_max, smoothness_constant, step_size_limit,
    consensus_diff_bound, MetricsRecord, RoundRecord,
};
use crate::objective::{
    adapter_grads_from_w, estimate_constants, factor_bound, full_grad_w, full_loss, generate_data,
    grad_w, sample_batch, AgentDataset, Constants, GlobalObjective, Task,
};
use crate::optimizer::{consensus_opt_buffers, direction, OptState, OptimizerKind, Step};
use crate::rng::{stream, Purpose};
use crate::topology::{build_topology, build_torus, spectral_report, MixingMatrix, TopologyKind};

/// Bytes per transmitted matrix entry.
const BYTES_PER_ENTRY: u64 = 8;

/// Entries beyond this magnitude are treated as divergence: their products
/// overflow long before they become non-finite themselves.
pub const DIVERGENCE_LIMIT: f64 = 1e100;

fn out_of_range(m: &Mat) -> bool {
    m.as_slice().iter().any(|x| x.is_nan() || x.abs() > DIVERGENCE_LIMIT)
}

/// Warning prefix for the step-size condition.
pub const STEP_SIZE_WARNING: &str = "step size exceeds (1−√ρ)/(4√2·L̂)";

#[derive(Clone, Debug, Serialize)]
pub struct RunSummary {
    /// Topology actually used for mixing (FedAvg forces fully connected,
    /// local training uses no communication).
    pub effective_topology: String,
    pub rho: f64,
    pub spectral_gap: f64,
    pub final_global_loss: f64,
    pub final_per_agent_losses: Vec<f64>,
    pub final_avg_grad_norm_sq: f64,
    /// Estimated at the final states.
    pub constants: Constants,
    /// Largest `‖∇_W fⁱ‖_F` observed at any sampled iteration or probe.
    pub trajectory_g: f64,
    /// Largest factor `σ₁` observed at any sampled iteration.
    pub trajectory_c: f64,
    /// `L̂` from trajectory constants.
    pub l_hat: f64,
    /// `(1−√ρ)/(4√2·L̂)`; infinite when there is no communication.
    pub step_size_limit: f64,
    pub step_size_ok: bool,
    pub comm_rounds: u64,
    pub comm_bytes_total: u64,
    /// Sampled iterations of an SGD run within the step-size condition where
    /// the measured consensus difference exceeded its closed-form bound.
    pub bound_violations: u64,
    pub wall_time_secs: f64,
}

/// The first sampled iteration whose consensus difference exceeded its
/// bound, with every agent's factors at that point for offline inspection.
#[derive(Clone, Debug)]
pub struct BoundViolation {
    pub iter: u64,
    pub consensus_diff: f64,
    pub bound: f64,
    pub states: Vec<AdapterPair>,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub config: RunConfig,
    pub metrics: Vec<MetricsRecord>,
    /// One record per communication round.
    pub rounds: Vec<RoundRecord>,
    pub final_states: Vec<AdapterPair>,
    pub summary: RunSummary,
    /// Non-fatal diagnostics (step-size condition, bound violations).
    pub warnings: Vec<String>,
    pub first_bound_violation: Option<BoundViolation>,
}

/// Builds the mixing matrix named by the config, ignoring algorithm
/// overrides.
pub fn configured_mixing(config: &RunConfig) -> Result<MixingMatrix> {
    let n = config.n_agents;
    let m = match config.topology {
        TopologyKind::Torus => match (config.torus_rows, config.torus_cols) {
            (Some(rows), Some(cols)) => build_torus(rows, cols)?,
            _ => build_topology(TopologyKind::Torus, n)?,
        },
        TopologyKind::Custom => {
            let path = config
                .topology_file
                .as_ref()
                .ok_or_else(|| Error::Config("topology = custom requires topology.file".into()))?;
            MixingMatrix::load_csv(path)?
        }
        kind => build_topology(kind, n)?,
    };
    if m.n_agents() != n {
        return Err(Error::Config(format!(
            "mixing matrix has {} agents but n_agents = {n}",
            m.n_agents()
        )));
    }
    Ok(m)
}

/// Runs a configuration end to end.
pub fn run(config: &RunConfig) -> Result<RunResult> {
    run_observed(config, &mut |_| {})
}

/// Like [`run`], calling `observer` with each metrics record as it is sampled.
pub fn run_observed(config: &RunConfig, observer: &mut dyn FnMut(&MetricsRecord)) -> Result<RunResult> {
    config.validate()?;
    let mixing = if config.algorithm.forces_fully_connected() {
        build_topology(TopologyKind::FullyConnected, config.n_agents)?
    } else if config.algorithm.consensus_mode() == ConsensusMode::None {
        MixingMatrix::identity(config.n_agents)?
    } else {
        configured_mixing(config)?
    };
    run_with_mixing_observed(config, &mixing, observer)
}

/// Runs with an explicit mixing matrix. Local variants still skip
/// communication but measure interference against `mixing`.
pub fn run_with_mixing(config: &RunConfig, mixing: &MixingMatrix) -> Result<RunResult> {
    run_with_mixing_observed(config, mixing, &mut |_| {})
}

/// Like [`run_with_mixing`], with a per-record observer.
pub fn run_with_mixing_observed(
    config: &RunConfig,
    mixing: &MixingMatrix,
    observer: &mut dyn FnMut(&MetricsRecord),
) -> Result<RunResult> {
    config.validate()?;
    if mixing.n_agents() != config.n_agents {
        return Err(Error::Config(format!(
            "mixing matrix has {} agents but n_agents = {}",
            mixing.n_agents(),
            config.n_agents
        )));
    }
    let started = Instant::now();
    let task = generate_data(&config.task, config.n_agents, config.eta, config.seed)?;
    let Task { mut base, datasets, .. } = task;
    let states = initial_states(config, &mut base)?;
    let mut sim = Simulation::new(config, mixing, base, datasets, states)?;
    sim.run(observer)?;
    sim.finish(started)
}

fn initial_states(config: &RunConfig, base: &mut FrozenBase) -> Result<Vec<AdapterPair>> {
    let (d, k, r) = (config.task.d, config.task.k, config.r);
    if config.algorithm.freezes_a() {
        let a0 = gaussian_mat(r, k, config.sigma_init, &mut stream(config.seed, Purpose::SharedA, 0, 0));
        base.a0 = Some(a0.clone());
        (0..config.n_agents)
            .map(|_| AdapterPair::new(a0.clone(), Mat::zeros(d, r), config.eta))
            .collect()
    } else {
        (0..config.n_agents)
            .map(|i| {
                init_adapter(
                    d,
                    k,
                    r,
                    config.sigma_init,
                    config.eta,
                    &mut stream(config.seed, Purpose::Init, i as u64, 0),
                )
            })
            .collect()
    }
}

struct Simulation<'a> {
    config: &'a RunConfig,
    mixing: &'a MixingMatrix,
    mode: ConsensusMode,
    rho: f64,
    spectral_gap: f64,
    base: FrozenBase,
    datasets: Vec<AgentDataset>,
    global: GlobalObjective,
    states: Vec<AdapterPair>,
    opt: Vec<OptState>,
    metrics: Vec<MetricsRecord>,
    rounds: Vec<RoundRecord>,
    comm_bytes: u64,
    traj_g: f64,
    traj_c: f64,
    /// Largest eigenvalue of any agent's input covariance.
    input_l: f64,
    warnings: Vec<String>,
    bound_violations: u64,
    first_violation: Option<BoundViolation>,
}

/// Diagnostics from the most recent communication round.
struct RoundInfo {
    consensus_diff: f64,
    tsvd_error_max: Option<f64>,
    tsvd_bound_max: Option<f64>,
}

impl<'a> Simulation<'a> {
    fn new(
        config: &'a RunConfig,
        mixing: &'a MixingMatrix,
        base: FrozenBase,
        datasets: Vec<AgentDataset>,
        states: Vec<AdapterPair>,
    ) -> Result<Self> {
        let mode = config.algorithm.consensus_mode();
        if mode == ConsensusMode::FrozenA && base.a0.is_none() {
            return Err(Error::Config("frozen-A consensus requires a shared A₀".into()));
        }
        let report = spectral_report(mixing)?;
        let global = GlobalObjective::new(&datasets)?;
        let opt = states.iter().map(OptState::zeros).collect();
        let input_l = crate::objective::input_smoothness(&datasets)?;
        let mut sim = Self {
            config,
            mixing,
            mode,
            rho: report.rho,
            spectral_gap: report.spectral_gap,
            base,
            datasets,
            global,
            states,
            opt,
            metrics: Vec::new(),
            rounds: Vec::new(),
            comm_bytes: 0,
            traj_g: 0.0,
            traj_c: 0.0,
            input_l,
            warnings: Vec::new(),
            bound_violations: 0,
            first_violation: None,
        };
        sim.update_trajectory_constants()?;
        sim.check_step_size("initial constants");
        Ok(sim)
    }

    /// Bytes one agent sends to one neighbour per round.
    fn bytes_per_edge(&self) -> u64 {
        let (d, k, r) = (self.config.task.d, self.config.task.k, self.config.r);
        let entries = match self.mode {
            ConsensusMode::FrozenA => d * r,
            _ => (d + k) * r,
        };
        entries as u64 * BYTES_PER_ENTRY
    }

    fn run(&mut self, observer: &mut dyn FnMut(&MetricsRecord)) -> Result<()> {
        let cfg = self.config;
        let mut last_round: Option<RoundInfo> = None;
        for t in 1..=cfg.iters {
            let alpha = cfg.schedule.at(cfg.alpha, t, cfg.iters);
            let communicate = t % cfg.tau == 0;
            let mut steps = None;
            if cfg.grad_point == GradPoint::PreConsensus {
                steps = Some(self.local_steps(t, alpha)?);
            }
            if communicate {
                last_round = Some(self.communicate(t)?);
            }
            let steps = match steps {
                Some(s) => s,
                None => self.local_steps(t, alpha)?,
            };
            self.states = self
                .states
                .par_iter()
                .zip(&steps)
                .map(|(p, s)| s.apply(p))
                .collect();
            if let Some(i) = self.diverged_agent() {
                return Err(Error::Diverged(format!(
                    "iteration {t}, agent {i} has non-finite or exploding values; reduce alpha"
                )));
            }
            if t % cfg.metric_interval == 0 || t == cfg.iters {
                let round = if communicate { last_round.as_ref() } else { None };
                let record = self.measure(t, round)?;
                observer(&record);
                self.metrics.push(record);
            }
        }
        Ok(())
    }

    /// First agent whose factors or optimizer buffers left the finite range.
    fn diverged_agent(&self) -> Option<usize> {
        self.states.iter().zip(&self.opt).position(|(p, o)| {
            [&p.a, &p.b, &o.v_a, &o.v_b, &o.m_a, &o.m_b, &o.uhat_a, &o.uhat_b]
                .into_iter()
                .any(out_of_range)
        })
    }

    /// Mini-batch gradients at the current states, turned into steps.
    fn local_steps(&mut self, t: u64, alpha: f64) -> Result<Vec<Step>> {
        let cfg = self.config;
        let hyper = cfg.hyper();
        let freeze_a = cfg.algorithm.freezes_a();
        let base = &self.base;
        let datasets = &self.datasets;
        self.states
            .par_iter()
            .zip(self.opt.par_iter_mut())
            .enumerate()
            .map(|(i, (p, opt))| {
                let data = &datasets[i];
                let mut rng = stream(cfg.seed, Purpose::Batch, i as u64, t);
                let batch = sample_batch(data.len(), cfg.batch_size, &mut rng)?;
                let gw = grad_w(base, p, data, &batch)?;
                let (mut ga, gb) = adapter_grads_from_w(p, &gw);
                if freeze_a {
                    ga = Mat::zeros(ga.rows(), ga.cols());
                }
                let mut step = direction(&ga, &gb, alpha, &hyper, opt);
                if freeze_a {
                    step.a = Mat::zeros(step.a.rows(), step.a.cols());
                }
                Ok(step)
            })
            .collect()
    }

    fn communicate(&mut self, t: u64) -> Result<RoundInfo> {
        let consensus_diff = interference_max(&self.states, self.mixing)?;
        let mut info = RoundInfo {
            consensus_diff,
            tsvd_error_max: None,
            tsvd_bound_max: None,
        };
        if self.mode == ConsensusMode::None {
            return Ok(info);
        }
        let split = self.config.split_mode;
        self.states = match self.mode {
            ConsensusMode::ProductTsvd => {
                let (merged, report) =
                    consensus::product_consensus_with_report(&self.states, self.mixing, split)?;
                info.tsvd_error_max = Some(report.iter().map(|r| r.measured).fold(0.0, f64::max));
                info.tsvd_bound_max = Some(report.iter().map(|r| r.bound).fold(0.0, f64::max));
                merged
            }
            mode => consensus::apply(mode, &self.states, self.mixing, split)?,
        };
        if self.config.optimizer == OptimizerKind::Adam {
            consensus_opt_buffers(&mut self.opt, self.mixing, self.mode, self.config.r, split)?;
        }
        let edges = self.mixing.directed_edges();
        let bytes = edges as u64 * self.bytes_per_edge();
        self.comm_bytes += bytes;
        self.rounds.push(RoundRecord {
            iter: t,
            directed_edges: edges,
            bytes,
            cumulative_bytes: self.comm_bytes,
            consensus_diff: info.consensus_diff,
            tsvd_error_max: info.tsvd_error_max,
            tsvd_bound_max: info.tsvd_bound_max,
        });
        Ok(info)
    }

    /// Updates the running maxima of `‖∇_W fⁱ‖_F` and factor `σ₁`.
    fn update_trajectory_constants(&mut self) -> Result<()> {
        let base = &self.base;
        let g = self
            .states
            .par_iter()
            .zip(&self.datasets)
            .map(|(p, data)| Ok(full_grad_w(base, p, data)?.frobenius_sq().sqrt()))
            .collect::<Result<Vec<f64>>>()?
            .into_iter()
            .fold(0.0, f64::max);
        self.traj_g = self.traj_g.max(g);
        self.traj_c = self.traj_c.max(factor_bound(&self.states));
        Ok(())
    }

    fn measure(&mut self, t: u64, round: Option<&RoundInfo>) -> Result<MetricsRecord> {
        self.update_trajectory_constants()?;
        let base = &self.base;
        let global = &self.global;
        let losses = self
            .states
            .par_iter()
            .zip(&self.datasets)
            .map(|(p, data)| Ok((global.loss(base, p)?, full_loss(base, p, data)?)))
            .collect::<Result<Vec<(f64, f64)>>>()?;
        let global_loss = losses.iter().map(|l| l.0).sum::<f64>() / losses.len() as f64;
        let bound = round.map(|_| {
            consensus_diff_bound(
                self.config.alpha,
                self.traj_g,
                self.config.eta,
                self.traj_c,
                self.config.r,
                self.rho,
                t as f64,
            )
            .unwrap_or(f64::INFINITY)
        });
        let record = MetricsRecord {
            iter: t,
            global_loss,
            per_agent_losses: losses.iter().map(|l| l.1).collect(),
            avg_grad_norm_sq: avg_grad_norm_sq_with(base, &self.states, global)?,
            disagreement: adapter_disagreement(&self.states)?,
            interference_max: round.map(|r| r.consensus_diff),
            tsvd_error_max: round.and_then(|r| r.tsvd_error_max),
            tsvd_bound_max: round.and_then(|r| r.tsvd_bound_max),
            consensus_diff: round.map(|r| r.consensus_diff),
            consensus_diff_bound: bound,
            comm_bytes: self.comm_bytes,
        };
        if let (Some(cd), Some(b)) = (record.consensus_diff, bound) {
            self.monitor_bound(t, cd, b);
        }
        Ok(record)
    }

    /// The consensus-difference bound is a monitored property: it is derived
    /// for plain SGD under the step-size condition, so only those runs are
    /// checked, and a violation is recorded rather than raised.
    fn monitor_bound(&mut self, t: u64, consensus_diff: f64, bound: f64) {
        let applies = self.config.optimizer == OptimizerKind::Sgd
            && self.config.alpha <= self.step_limit(self.l_hat(self.input_l));
        if !applies || consensus_diff <= bound {
            return;
        }
        self.bound_violations += 1;
        if self.first_violation.is_none() {
            self.warnings.push(format!(
                "consensus difference {consensus_diff:e} exceeds its bound {bound:e} at iteration {t}"
            ));
            self.first_violation = Some(BoundViolation {
                iter: t,
                consensus_diff,
                bound,
                states: self.states.clone(),
            });
        }
    }

    fn l_hat(&self, l: f64) -> f64 {
        let (eta, r, c) = (self.config.eta, self.config.r, self.traj_c);
        smoothness_constant(l, default_big_c(eta, c, r), c, self.traj_g, eta, r)
            .expect("rank validated")
    }

    fn step_limit(&self, l_hat: f64) -> f64 {
        if self.rho >= 1.0 {
            f64::INFINITY
        } else {
            step_size_limit(self.rho, l_hat)
        }
    }

    fn check_step_size(&mut self, stage: &str) {
        let limit = self.step_limit(self.l_hat(self.input_l));
        if self.config.alpha > limit {
            self.warnings.push(format!(
                "{STEP_SIZE_WARNING}: alpha = {} > {limit:.6e} ({stage})",
                self.config.alpha
            ));
        }
    }

    fn finish(mut self, started: Instant) -> Result<RunResult> {
        let constants = estimate_constants(
            &self.base,
            &self.states,
            &self.datasets,
            self.config.batch_size,
            self.config.n_probes,
            self.config.seed,
        )?;
        self.update_trajectory_constants()?;
        self.traj_g = self.traj_g.max(constants.g);
        self.check_step_size("trajectory constants");
        let l_hat = self.l_hat(constants.l);
        let limit = self.step_limit(l_hat);
        let last = self.metrics.last().expect("at least one sampled iteration");
        let summary = RunSummary {
            effective_topology: effective_topology(self.config, self.mixing),
            rho: self.rho,
            spectral_gap: self.spectral_gap,
            final_global_loss: last.global_loss,
            final_per_agent_losses: last.per_agent_losses.clone(),
            final_avg_grad_norm_sq: last.avg_grad_norm_sq,
            constants,
            trajectory_g: self.traj_g,
            trajectory_c: self.traj_c,
            l_hat,
            step_size_limit: limit,
            step_size_ok: self.config.alpha <= limit,
            comm_rounds: self.rounds.len() as u64,
            comm_bytes_total: self.comm_bytes,
            bound_violations: self.bound_violations,
            wall_time_secs: started.elapsed().as_secs_f64(),
        };
        Ok(RunResult {
            config: self.config.clone(),
            metrics: self.metrics,
            rounds: self.rounds,
            final_states: self.states,
            summary,
            warnings: self.warnings,
            first_bound_violation: self.first_violation,
        })
    }
}

fn effective_topology(config: &RunConfig, mixing: &MixingMatrix) -> String {
    match config.algorithm {
        Algorithm::Local | Algorithm::LocalFa => "none".into(),
        _ if config.algorithm.forces_fully_connected() => "fully_connected".into(),
        _ => mixing.kind().to_string(),
    }
}

/// One run per value of `axis`, all other settings (including the seed)
/// held fixed. Results are tagged with the value.
pub fn sweep(base: &RunConfig, axis: &str, values: &[String]) -> Result<Vec<(String, RunResult)>> {
    let key = RunConfig::sweep_key(axis)?;
    values
        .iter()
        .map(|v| {
            let mut cfg = base.clone();
            cfg.set(key, v)?;
            Ok((v.clone(), run(&cfg)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::metrics_csv;

    fn small(algorithm: Algorithm) -> RunConfig {
        RunConfig {
            algorithm,
            iters: 30,
            metric_interval: 7,
            n_agents: 4,
            ..RunConfig::default()
        }
    }

    #[test]
    fn metric_rows_round_up() {
        let res = run(&small(Algorithm::Dlora)).unwrap();
        assert_eq!(res.metrics.len(), 5);
        assert_eq!(res.metrics.last().unwrap().iter, 30);
    }

    #[test]
    fn communication_follows_tau() {
        let mut cfg = small(Algorithm::Dlora);
        cfg.tau = 3;
        let res = run(&cfg).unwrap();
        let iters: Vec<u64> = res.rounds.iter().map(|r| r.iter).collect();
        assert_eq!(iters, (1..=10).map(|i| 3 * i).collect::<Vec<_>>());
    }

    #[test]
    fn frozen_a_keeps_shared_a() {
        let res = run(&small(Algorithm::DloraFa)).unwrap();
        let a0 = &res.final_states[0].a;
        assert!(res.final_states.iter().all(|p| &p.a == a0));
        assert!(res.rounds.iter().all(|r| r.consensus_diff <= 1e-12));
        assert_eq!(res.rounds[0].bytes, 12 * 16 * 4 * 8);
    }

    #[test]
    fn local_never_communicates() {
        let res = run(&small(Algorithm::Local)).unwrap();
        assert!(res.rounds.is_empty());
        assert_eq!(res.summary.comm_bytes_total, 0);
        assert!(res.metrics.iter().all(|m| m.consensus_diff == Some(0.0) || m.consensus_diff.is_none()));
    }

    #[test]
    fn reruns_are_bit_identical() {
        let cfg = small(Algorithm::Decaf);
        let a = metrics_csv(&run(&cfg).unwrap().metrics);
        let b = metrics_csv(&run(&cfg).unwrap().metrics);
        assert_eq!(a, b);
    }

    #[test]
    fn sweep_tags_results() {
        let out = sweep(&small(Algorithm::Dlora), "r", &["1".into(), "2".into()]).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[1].1.final_states[0].rank(), 2);
        assert!(sweep(&small(Algorithm::Dlora), "eta", &["1".into()]).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let mut cfg = small(Algorithm::Dlora);
        cfg.alpha = 1e6;
        cfg.sigma_init = 1.0;
        assert!(matches!(run(&cfg), Err(Error::Diverged(_))));
    }
}
