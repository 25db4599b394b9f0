//! Synthetic per-agent objectives.
//!
//! Each agent solves a linear matrix regression
//! `fⁱ(W) = (1/2n)·Σ_s ‖W x_s − y_s‖²` with `W = W₀ + (η/r)·B·A`. The loss is
//! convex in `W` but not jointly convex in `(A, B)`, and every constant the
//! convergence analysis assumes (smoothness, gradient bound, noise variance,
//! data diversity) can be measured directly.
//!
//! Full-batch quantities go through the sufficient statistics
//! `C = XᵀX/n`, `P = YᵀX/n`, `s = ‖Y‖²/n`, so a full gradient costs
//! `O(d·k²)` regardless of the sample count.

use std::fmt::Write as _;

use rand::Rng;
use rand_distr::Exp1;
use serde::Serialize;

use crate::adapter::{delta_w, effective_weight, gaussian_mat, mean_adapter, AdapterPair, FrozenBase};
use crate::error::{input, Error, Result};
use crate::lowrank::{spectral_norm, symmetric_eigenvalues, Mat};
use crate::rng::{stream, Purpose};

/// Synthetic regression task description.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskSpec {
    /// Output dimension (rows of `W`).
    pub d: usize,
    /// Input dimension (columns of `W`).
    pub k: usize,
    pub n_samples: usize,
    /// `h ∈ [0, 1]`: 0 gives every agent the same ground truth, 1 gives
    /// fully independent per-agent ground truths.
    pub heterogeneity: f64,
    pub noise_std: f64,
    pub ground_truth_rank: usize,
    /// Spectral norm of every drawn target update `W* − W₀`.
    pub signal_norm: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            d: 16,
            k: 12,
            n_samples: 256,
            heterogeneity: 0.0,
            noise_std: 0.0,
            ground_truth_rank: 4,
            signal_norm: 1.0,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k == 0 {
            return Err(Error::Config(format!(
                "task dims must be positive, got d={} k={}",
                self.d, self.k
            )));
        }
        if self.n_samples == 0 {
            return Err(Error::Config("task.n_samples must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.heterogeneity) {
            return Err(Error::Config(format!(
                "task.heterogeneity must lie in [0, 1], got {}",
                self.heterogeneity
            )));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config(format!(
                "task.noise_std must be nonnegative, got {}",
                self.noise_std
            )));
        }
        if self.ground_truth_rank == 0 || self.ground_truth_rank > self.d.min(self.k) {
            return Err(Error::Config(format!(
                "task.ground_truth_rank must lie in 1..={}, got {}",
                self.d.min(self.k),
                self.ground_truth_rank
            )));
        }
        if !(self.signal_norm.is_finite() && self.signal_norm > 0.0) {
            return Err(Error::Config(format!(
                "task.signal_norm must be positive, got {}",
                self.signal_norm
            )));
        }
        Ok(())
    }
}

/// Sufficient statistics of a least-squares dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadStats {
    /// `XᵀX / n`, `k x k`.
    pub cxx: Mat,
    /// `YᵀX / n`, `d x k`.
    pub pyx: Mat,
    /// `‖Y‖_F² / n`.
    pub syy: f64,
}

impl QuadStats {
    fn from_data(x: &Mat, y: &Mat) -> Self {
        let inv = 1.0 / x.rows() as f64;
        Self {
            cxx: x.t_matmul(x).scale(inv),
            pyx: y.t_matmul(x).scale(inv),
            syy: y.frobenius_sq() * inv,
        }
    }

    fn mean(all: &[&QuadStats]) -> Self {
        let inv = 1.0 / all.len() as f64;
        let mut cxx = Mat::zeros(all[0].cxx.rows(), all[0].cxx.cols());
        let mut pyx = Mat::zeros(all[0].pyx.rows(), all[0].pyx.cols());
        let mut syy = 0.0;
        for s in all {
            cxx.axpy(1.0, &s.cxx);
            pyx.axpy(1.0, &s.pyx);
            syy += s.syy;
        }
        Self {
            cxx: cxx.scale(inv),
            pyx: pyx.scale(inv),
            syy: syy * inv,
        }
    }

    /// `½ tr(W C Wᵀ) − tr(W Pᵀ) + ½ s`, clamped at 0 against cancellation.
    pub fn loss(&self, w: &Mat) -> f64 {
        let wc = w.matmul(&self.cxx);
        let quad: f64 = wc.as_slice().iter().zip(w.as_slice()).map(|(a, b)| a * b).sum();
        let cross: f64 = w.as_slice().iter().zip(self.pyx.as_slice()).map(|(a, b)| a * b).sum();
        (0.5 * quad - cross + 0.5 * self.syy).max(0.0)
    }

    /// `W C − P`.
    pub fn grad(&self, w: &Mat) -> Mat {
        w.matmul(&self.cxx).sub(&self.pyx)
    }
}

/// One agent's private samples.
#[derive(Clone, Debug)]
pub struct AgentDataset {
    /// `n x k`, one sample per row.
    inputs: Mat,
    /// `n x d`.
    targets: Mat,
    noise_std: f64,
    stats: QuadStats,
}

impl AgentDataset {
    pub fn new(inputs: Mat, targets: Mat, noise_std: f64) -> Result<Self> {
        if inputs.rows() != targets.rows() {
            return input(format!(
                "{} inputs but {} targets",
                inputs.rows(),
                targets.rows()
            ));
        }
        if !inputs.is_finite() || !targets.is_finite() {
            return input("dataset contains non-finite values");
        }
        let stats = QuadStats::from_data(&inputs, &targets);
        Ok(Self {
            inputs,
            targets,
            noise_std,
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn inputs(&self) -> &Mat {
        &self.inputs
    }

    pub fn targets(&self) -> &Mat {
        &self.targets
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    pub fn stats(&self) -> &QuadStats {
        &self.stats
    }

    /// One row per sample: `k` input columns followed by `d` target columns.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# k={} d={} noise_std={:?}",
            self.inputs.cols(),
            self.targets.cols(),
            self.noise_std
        );
        let joined = Mat::from_fn(self.len(), self.inputs.cols() + self.targets.cols(), |i, j| {
            if j < self.inputs.cols() {
                self.inputs[(i, j)]
            } else {
                self.targets[(i, j - self.inputs.cols())]
            }
        });
        s.push_str(&joined.to_csv());
        s
    }

    /// Inverse of [`AgentDataset::to_csv`]; `k` splits inputs from targets.
    pub fn from_csv(text: &str, k: usize, noise_std: f64) -> Result<Self> {
        let joined = Mat::from_csv(text)?;
        if k == 0 || k >= joined.cols() {
            return Err(Error::Parse(format!(
                "cannot split {} columns into k={k} inputs and at least one target",
                joined.cols()
            )));
        }
        let x = Mat::from_fn(joined.rows(), k, |i, j| joined[(i, j)]);
        let y = Mat::from_fn(joined.rows(), joined.cols() - k, |i, j| joined[(i, j + k)]);
        Self::new(x, y, noise_std)
    }
}

/// A generated multi-agent task.
#[derive(Clone, Debug)]
pub struct Task {
    pub base: FrozenBase,
    pub datasets: Vec<AgentDataset>,
    /// Shared ground truth `W*`.
    pub global_target: Mat,
    /// Per-agent ground truth `W*ᵢ`.
    pub agent_targets: Vec<Mat>,
}

/// Draws a rank-`r*` update `(η/r*)·B*·A*` rescaled to the task's signal norm.
fn draw_update(task_spec: &TaskSpec, eta: f64, rng: &mut impl Rng) -> Mat {
    let rs = task_spec.ground_truth_rank;
    let b = gaussian_mat(task_spec.d, rs, 1.0, rng);
    let a = gaussian_mat(rs, task_spec.k, 1.0, rng);
    let raw = b.matmul(&a).scale(eta / rs as f64);
    let norm = spectral_norm(&raw);
    raw.scale(task_spec.signal_norm / norm)
}

/// Generates the base weight, ground truths and per-agent datasets.
///
/// All agents share one input design `X` (drawn once); they differ through
/// their ground truth `W*ᵢ = (1−h)·W* + h·W*⁽ⁱ⁾` and independent label noise.
/// With `h = 0` and no noise every agent therefore holds the same data.
pub fn generate_data(task_spec: &TaskSpec, n_agents: usize, eta: f64, seed: u64) -> Result<Task> {
    task_spec.validate()?;
    if n_agents == 0 {
        return Err(Error::Config("n_agents must be at least 1".into()));
    }
    let w0 = gaussian_mat(
        task_spec.d,
        task_spec.k,
        1.0 / (task_spec.k as f64).sqrt(),
        &mut stream(seed, Purpose::Base, 0, 0),
    );
    let mut data_rng = stream(seed, Purpose::Data, 0, 0);
    let global_target = w0.add(&draw_update(task_spec, eta, &mut data_rng));
    let x = gaussian_mat(task_spec.n_samples, task_spec.k, 1.0, &mut data_rng);

    let h = task_spec.heterogeneity;
    let mut datasets = Vec::with_capacity(n_agents);
    let mut agent_targets = Vec::with_capacity(n_agents);
    for i in 0..n_agents {
        let mut rng = stream(seed, Purpose::AgentData, i as u64, 0);
        let own = w0.add(&draw_update(task_spec, eta, &mut rng));
        let target = global_target.scale(1.0 - h).add(&own.scale(h));
        let mut y = x.matmul_t(&target);
        if task_spec.noise_std > 0.0 {
            y.axpy(1.0, &gaussian_mat(y.rows(), y.cols(), task_spec.noise_std, &mut rng));
        }
        datasets.push(AgentDataset::new(x.clone(), y, task_spec.noise_std)?);
        agent_targets.push(target);
    }
    Ok(Task {
        base: FrozenBase { w0, a0: None },
        datasets,
        global_target,
        agent_targets,
    })
}

fn check_batch(data: &AgentDataset, batch: &[usize]) -> Result<()> {
    if batch.is_empty() {
        return input("empty batch");
    }
    if let Some(&bad) = batch.iter().find(|&&s| s >= data.len()) {
        return input(format!(
            "batch index {bad} out of range for {} samples",
            data.len()
        ));
    }
    Ok(())
}

/// Residuals `W x_s − y_s` for the batch, one row per sample.
fn residuals(w: &Mat, data: &AgentDataset, batch: &[usize]) -> Mat {
    let d = w.rows();
    let mut out = Mat::zeros(batch.len(), d);
    for (row, &s) in batch.iter().enumerate() {
        let x = data.inputs.row(s);
        let y = data.targets.row(s);
        for i in 0..d {
            let wx: f64 = w.row(i).iter().zip(x).map(|(a, b)| a * b).sum();
            out[(row, i)] = wx - y[i];
        }
    }
    out
}

fn batch_inputs(data: &AgentDataset, batch: &[usize]) -> Mat {
    Mat::from_fn(batch.len(), data.inputs.cols(), |row, j| data.inputs[(batch[row], j)])
}

/// `(1/2|S|)·Σ_{s∈S} ‖W x_s − y_s‖²` at `W = W₀ + ΔW`.
pub fn loss(base: &FrozenBase, p: &AdapterPair, data: &AgentDataset, batch: &[usize]) -> Result<f64> {
    check_batch(data, batch)?;
    let w = effective_weight(base, p)?;
    Ok(residuals(&w, data, batch).frobenius_sq() / (2.0 * batch.len() as f64))
}

/// `(1/|S|)·Σ_{s∈S} (W x_s − y_s) x_sᵀ`.
pub fn grad_w(base: &FrozenBase, p: &AdapterPair, data: &AgentDataset, batch: &[usize]) -> Result<Mat> {
    check_batch(data, batch)?;
    let w = effective_weight(base, p)?;
    Ok(grad_w_at(&w, data, batch))
}

fn grad_w_at(w: &Mat, data: &AgentDataset, batch: &[usize]) -> Mat {
    let r = residuals(w, data, batch);
    r.t_matmul(&batch_inputs(data, batch))
        .scale(1.0 / batch.len() as f64)
}

/// Chain rule: `g_A = (η/r)·Bᵀ·∇_W f`, `g_B = (η/r)·∇_W f·Aᵀ`.
pub fn adapter_grads_from_w(p: &AdapterPair, gw: &Mat) -> (Mat, Mat) {
    let s = p.scale();
    (p.b.t_matmul(gw).scale(s), gw.matmul_t(&p.a).scale(s))
}

pub fn grad_adapter(
    base: &FrozenBase,
    p: &AdapterPair,
    data: &AgentDataset,
    batch: &[usize],
) -> Result<(Mat, Mat)> {
    let gw = grad_w(base, p, data, batch)?;
    Ok(adapter_grads_from_w(p, &gw))
}

/// Full-dataset loss through the sufficient statistics.
pub fn full_loss(base: &FrozenBase, p: &AdapterPair, data: &AgentDataset) -> Result<f64> {
    Ok(data.stats.loss(&effective_weight(base, p)?))
}

/// Full-dataset weight gradient through the sufficient statistics.
pub fn full_grad_w(base: &FrozenBase, p: &AdapterPair, data: &AgentDataset) -> Result<Mat> {
    Ok(data.stats.grad(&effective_weight(base, p)?))
}

/// The global objective `f = (1/N)·Σᵢ fⁱ` over full datasets.
#[derive(Clone, Debug)]
pub struct GlobalObjective {
    stats: QuadStats,
}

impl GlobalObjective {
    pub fn new(datasets: &[AgentDataset]) -> Result<Self> {
        if datasets.is_empty() {
            return input("no datasets");
        }
        let all: Vec<&QuadStats> = datasets.iter().map(|d| &d.stats).collect();
        Ok(Self {
            stats: QuadStats::mean(&all),
        })
    }

    pub fn loss(&self, base: &FrozenBase, p: &AdapterPair) -> Result<f64> {
        Ok(self.stats.loss(&effective_weight(base, p)?))
    }

    pub fn grad_w(&self, base: &FrozenBase, p: &AdapterPair) -> Result<Mat> {
        Ok(self.stats.grad(&effective_weight(base, p)?))
    }

    pub fn grad_adapter(&self, base: &FrozenBase, p: &AdapterPair) -> Result<(Mat, Mat)> {
        Ok(adapter_grads_from_w(p, &self.grad_w(base, p)?))
    }
}

/// Uniform sample of `batch_size` distinct indices, returned ascending.
pub fn sample_batch(n: usize, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if batch_size == 0 || batch_size > n {
        return input(format!("batch size {batch_size} out of range 1..={n}"));
    }
    if batch_size == n {
        return Ok((0..n).collect());
    }
    let mut idx = rand::seq::index::sample(rng, n, batch_size).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

/// Gradient-Lipschitz ratio of `f(W) = ½‖W‖_F²` in adapter coordinates along
/// `w_t = (t·I, t·I)` with `W₀ = 0`, unit scale `η/r = 1` and `d x d` factors:
/// `‖∇f(w_t) − ∇f(0)‖ / ‖w_t − 0‖`. It grows like `t²`, so the adapter-space
/// objective is not globally smooth even though `f` is.
pub fn nonsmoothness_ratio(t: f64, d: usize) -> Result<f64> {
    if !(t.is_finite() && t > 0.0) {
        return input(format!("t must be positive, got {t}"));
    }
    if d == 0 {
        return input("dimension must be positive");
    }
    let grad = |p: &AdapterPair| {
        // ∇_W ½‖W‖² = W.
        let w = delta_w(p);
        adapter_grads_from_w(p, &w)
    };
    // Square factors have rank d, so η = d gives the unit scale η/r = 1.
    let eta = d as f64;
    let at_t = AdapterPair::new(Mat::identity(d).scale(t), Mat::identity(d).scale(t), eta)?;
    let at_0 = AdapterPair::new(Mat::zeros(d, d), Mat::zeros(d, d), eta)?;
    let (ga_t, gb_t) = grad(&at_t);
    let (ga_0, gb_0) = grad(&at_0);
    let num = ga_t.sub(&ga_0).frobenius_sq() + gb_t.sub(&gb_0).frobenius_sq();
    let den = at_t.a.sub(&at_0.a).frobenius_sq() + at_t.b.sub(&at_0.b).frobenius_sq();
    Ok((num / den).sqrt())
}

/// Measured stand-ins for the analysis constants. All values are empirical:
/// maxima over the probe points actually visited, not global bounds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Constants {
    pub label: &'static str,
    /// Largest eigenvalue of any agent's input covariance (exact for the
    /// quadratic loss).
    pub l: f64,
    /// Largest `‖∇_W fⁱ‖_F` over probes and agents.
    pub g: f64,
    /// Largest `σ₁` over all agents' factors.
    pub c: f64,
    /// Square root of the largest mini-batch gradient variance.
    pub zeta: f64,
    /// Square root of the largest mean squared deviation of agent gradients
    /// from the global gradient.
    pub kappa: f64,
}

/// Largest eigenvalue of any agent's input covariance.
pub fn input_smoothness(datasets: &[AgentDataset]) -> Result<f64> {
    let mut l: f64 = 0.0;
    for data in datasets {
        l = l.max(symmetric_eigenvalues(&data.stats.cxx)?[0]);
    }
    Ok(l)
}

/// Largest `σ₁(Aⁱ)`, `σ₁(Bⁱ)` over the given states.
pub fn factor_bound(states: &[AdapterPair]) -> f64 {
    states
        .iter()
        .map(|s| spectral_norm(&s.a).max(spectral_norm(&s.b)))
        .fold(0.0, f64::max)
}

/// Mini-batch variance of the adapter gradient for one agent at `p`:
/// `((n−b)/(n−1))/b` times the per-sample variance.
fn minibatch_variance(base: &FrozenBase, p: &AdapterPair, data: &AgentDataset, batch_size: usize) -> Result<f64> {
    let n = data.len();
    if n <= 1 || batch_size >= n {
        return Ok(0.0);
    }
    let all: Vec<usize> = (0..n).collect();
    let w = effective_weight(base, p)?;
    let r = residuals(&w, data, &all);
    let s2 = p.scale() * p.scale();
    let mut second_moment = 0.0;
    for s in 0..n {
        let res = r.row(s);
        let x = data.inputs.row(s);
        let x_sq: f64 = x.iter().map(|v| v * v).sum();
        let res_sq: f64 = res.iter().map(|v| v * v).sum();
        // Per-sample factors are rank one: ‖Bᵀr xᵀ‖ = ‖Bᵀr‖·‖x‖ and ‖r (Ax)ᵀ‖ = ‖r‖·‖Ax‖.
        let btr: f64 = (0..p.rank())
            .map(|j| (0..p.d()).map(|i| p.b[(i, j)] * res[i]).sum::<f64>().powi(2))
            .sum();
        let ax: f64 = (0..p.rank())
            .map(|j| p.a.row(j).iter().zip(x).map(|(a, b)| a * b).sum::<f64>().powi(2))
            .sum();
        second_moment += s2 * (btr * x_sq + res_sq * ax);
    }
    second_moment /= n as f64;
    let (ga, gb) = adapter_grads_from_w(p, &grad_w_at(&w, data, &all));
    let per_sample = (second_moment - ga.frobenius_sq() - gb.frobenius_sq()).max(0.0);
    let b = batch_size as f64;
    Ok((n as f64 - b) / (n as f64 - 1.0) / b * per_sample)
}

/// Estimates `L, G, c, ζ, κ` at probe points: every agent state, the mean
/// adapter, and `n_probes` random convex combinations of the agent states.
pub fn estimate_constants(
    base: &FrozenBase,
    states: &[AdapterPair],
    datasets: &[AgentDataset],
    batch_size: usize,
    n_probes: usize,
    seed: u64,
) -> Result<Constants> {
    if n_probes < 2 {
        return input(format!("n_probes must be at least 2, got {n_probes}"));
    }
    if states.len() != datasets.len() || states.is_empty() {
        return input(format!(
            "{} states but {} datasets",
            states.len(),
            datasets.len()
        ));
    }
    let n = states.len();
    let mut probes: Vec<AdapterPair> = states.to_vec();
    probes.push(mean_adapter(states)?);
    let mut rng = stream(seed, Purpose::Probe, 0, 0);
    for _ in 0..n_probes {
        let raw: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
        let total: f64 = raw.iter().sum();
        let mut a = Mat::zeros(states[0].a.rows(), states[0].a.cols());
        let mut b = Mat::zeros(states[0].b.rows(), states[0].b.cols());
        for (s, w) in states.iter().zip(&raw) {
            a.axpy(w / total, &s.a);
            b.axpy(w / total, &s.b);
        }
        probes.push(AdapterPair::new(a, b, states[0].eta)?);
    }

    let mut g: f64 = 0.0;
    let mut kappa_sq: f64 = 0.0;
    for p in &probes {
        let grads = datasets
            .iter()
            .map(|data| full_grad_w(base, p, data))
            .collect::<Result<Vec<_>>>()?;
        for gw in &grads {
            g = g.max(gw.frobenius_sq().sqrt());
        }
        let adapter: Vec<(Mat, Mat)> = grads.iter().map(|gw| adapter_grads_from_w(p, gw)).collect();
        let mut mean_a = Mat::zeros(p.a.rows(), p.a.cols());
        let mut mean_b = Mat::zeros(p.b.rows(), p.b.cols());
        for (ga, gb) in &adapter {
            mean_a.axpy(1.0 / n as f64, ga);
            mean_b.axpy(1.0 / n as f64, gb);
        }
        let dev: f64 = adapter
            .iter()
            .map(|(ga, gb)| ga.sub(&mean_a).frobenius_sq() + gb.sub(&mean_b).frobenius_sq())
            .sum::<f64>()
            / n as f64;
        kappa_sq = kappa_sq.max(dev);
    }

    let mut zeta_sq: f64 = 0.0;
    for (p, data) in states.iter().zip(datasets) {
        zeta_sq = zeta_sq.max(minibatch_variance(base, p, data, batch_size)?);
    }

    Ok(Constants {
        label: "empirical",
        l: input_smoothness(datasets)?,
        g,
        c: factor_bound(states),
        zeta: zeta_sq.sqrt(),
        kappa: kappa_sq.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::init_adapter;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_case() -> (FrozenBase, AdapterPair, AgentDataset) {
        let base = FrozenBase {
            w0: Mat::zeros(1, 1),
            a0: None,
        };
        let p = AdapterPair::new(
            Mat::from_rows(&[vec![1.0]]).unwrap(),
            Mat::from_rows(&[vec![1.0]]).unwrap(),
            1.0,
        )
        .unwrap();
        let data = AgentDataset::new(
            Mat::from_rows(&[vec![2.0]]).unwrap(),
            Mat::from_rows(&[vec![1.0]]).unwrap(),
            0.0,
        )
        .unwrap();
        (base, p, data)
    }

    #[test]
    fn scalar_loss_and_gradient() {
        let (base, p, data) = scalar_case();
        assert_eq!(loss(&base, &p, &data, &[0]).unwrap(), 0.5);
        assert_eq!(grad_w(&base, &p, &data, &[0]).unwrap()[(0, 0)], 2.0);
        assert_eq!(full_loss(&base, &p, &data).unwrap(), 0.5);
        assert!(loss(&base, &p, &data, &[]).is_err());
        assert!(loss(&base, &p, &data, &[1]).is_err());
    }

    #[test]
    fn scalar_adapter_gradient() {
        let base = FrozenBase {
            w0: Mat::zeros(1, 1),
            a0: None,
        };
        let p = AdapterPair::new(
            Mat::from_rows(&[vec![2.0]]).unwrap(),
            Mat::from_rows(&[vec![3.0]]).unwrap(),
            1.0,
        )
        .unwrap();
        let data = AgentDataset::new(
            Mat::from_rows(&[vec![1.0]]).unwrap(),
            Mat::from_rows(&[vec![1.0]]).unwrap(),
            0.0,
        )
        .unwrap();
        let (ga, gb) = grad_adapter(&base, &p, &data, &[0]).unwrap();
        assert_eq!(ga[(0, 0)], 15.0);
        assert_eq!(gb[(0, 0)], 10.0);
    }

    #[test]
    fn zero_b_gives_zero_a_gradient() {
        let task = generate_data(&TaskSpec::default(), 1, 1.0, 3).unwrap();
        let p = init_adapter(16, 12, 4, 0.1, 1.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (ga, gb) = grad_adapter(&task.base, &p, &task.datasets[0], &[0, 1, 2]).unwrap();
        assert_eq!(ga, Mat::zeros(4, 12));
        assert!(gb.frobenius_sq() > 0.0);
    }

    #[test]
    fn generation_is_deterministic_and_iid_at_zero_heterogeneity() {
        let task_spec = TaskSpec::default();
        let a = generate_data(&task_spec, 3, 1.0, 9).unwrap();
        let b = generate_data(&task_spec, 3, 1.0, 9).unwrap();
        assert_eq!(a.datasets[1].targets(), b.datasets[1].targets());
        for t in &a.agent_targets {
            assert_eq!(t, &a.global_target);
        }
        let delta = a.global_target.sub(&a.base.w0);
        assert!((spectral_norm(&delta) - task_spec.signal_norm).abs() < 1e-12);
    }

    #[test]
    fn heterogeneity_separates_targets() {
        let task_spec = TaskSpec {
            heterogeneity: 0.8,
            ..TaskSpec::default()
        };
        let task = generate_data(&task_spec, 2, 1.0, 1).unwrap();
        assert!(task.agent_targets[0].max_abs_diff(&task.agent_targets[1]) > 1e-3);
    }

    #[test]
    fn stats_path_matches_residual_path() {
        let task_spec = TaskSpec {
            noise_std: 0.1,
            heterogeneity: 0.3,
            ..TaskSpec::default()
        };
        let task = generate_data(&task_spec, 2, 1.0, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = init_adapter(16, 12, 4, 0.3, 1.0, &mut rng).unwrap();
        p.b = gaussian_mat(16, 4, 0.3, &mut rng);
        let data = &task.datasets[1];
        let all: Vec<usize> = (0..data.len()).collect();
        let direct = loss(&task.base, &p, data, &all).unwrap();
        let fast = full_loss(&task.base, &p, data).unwrap();
        assert!((direct - fast).abs() <= 1e-12 * (1.0 + direct));
        let gd = grad_w(&task.base, &p, data, &all).unwrap();
        let gf = full_grad_w(&task.base, &p, data).unwrap();
        assert!(gd.max_abs_diff(&gf) <= 1e-12);
    }

    #[test]
    fn batch_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert_eq!(sample_batch(5, 5, &mut rng).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(sample_batch(5, 1, &mut rng).unwrap().len(), 1);
        let b = sample_batch(100, 10, &mut rng).unwrap();
        assert!(b.windows(2).all(|w| w[0] < w[1]));
        assert!(sample_batch(5, 0, &mut rng).is_err());
        assert!(sample_batch(5, 6, &mut rng).is_err());
        let x = sample_batch(50, 7, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let y = sample_batch(50, 7, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn nonsmoothness_closed_form() {
        assert!((nonsmoothness_ratio(1.0, 3).unwrap() - 1.0).abs() < 1e-12);
        assert!((nonsmoothness_ratio(2.0, 5).unwrap() - 4.0).abs() < 1e-12);
        assert!(nonsmoothness_ratio(0.0, 3).is_err());
    }

    #[test]
    fn constants_vanish_for_identical_agents_with_full_batches() {
        let task = generate_data(&TaskSpec::default(), 3, 1.0, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = init_adapter(16, 12, 4, 0.2, 1.0, &mut rng).unwrap();
        p.b = gaussian_mat(16, 4, 0.2, &mut rng);
        let states = vec![p.clone(), p.clone(), p];
        let c = estimate_constants(&task.base, &states, &task.datasets, 256, 4, 0).unwrap();
        assert!(c.kappa < 1e-12);
        assert_eq!(c.zeta, 0.0);
        assert!(c.g > 0.0);
        assert_eq!(c.label, "empirical");
    }

    #[test]
    fn fresh_init_factor_bound_comes_from_a() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = init_adapter(16, 12, 4, 0.02, 1.0, &mut rng).unwrap();
        assert_eq!(factor_bound(std::slice::from_ref(&p)), spectral_norm(&p.a));
        assert!(factor_bound(&[p]) > 0.0);
    }

    #[test]
    fn dataset_csv_round_trip() {
        let task = generate_data(&TaskSpec { n_samples: 5, noise_std: 0.2, ..TaskSpec::default() }, 1, 1.0, 1).unwrap();
        let d = &task.datasets[0];
        let back = AgentDataset::from_csv(&d.to_csv(), 12, 0.2).unwrap();
        assert_eq!(back.inputs(), d.inputs());
        assert_eq!(back.targets(), d.targets());
    }
}
