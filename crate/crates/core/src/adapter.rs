//! LoRA adapter state.
//!
//! An adapter replaces a frozen `d x k` weight `W₀` by `W₀ + ΔW` with
//! `ΔW = (η/r)·B·A`, where `A` is `r x k` and `B` is `d x r`. The analysis
//! treats the pair as one flattened vector `v = (A, B)`; all norms here are
//! chosen so that `‖v‖² = ‖A‖_F² + ‖B‖_F²`.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{input, Error, Result};
use crate::lowrank::Mat;

#[derive(Clone, Debug, PartialEq)]
pub struct AdapterPair {
    /// `r x k`.
    pub a: Mat,
    /// `d x r`.
    pub b: Mat,
    /// Scaling factor `η`.
    pub eta: f64,
}

impl AdapterPair {
    pub fn new(a: Mat, b: Mat, eta: f64) -> Result<Self> {
        if a.rows() != b.cols() {
            return Err(Error::Shape {
                op: "adapter pair (A rows vs B cols)",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        if !(eta.is_finite() && eta > 0.0) {
            return input(format!("eta must be positive, got {eta}"));
        }
        Ok(Self { a, b, eta })
    }

    /// Adapter rank `r`.
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    /// Output dimension `d`.
    pub fn d(&self) -> usize {
        self.b.rows()
    }

    /// Input dimension `k`.
    pub fn k(&self) -> usize {
        self.a.cols()
    }

    /// `η / r`.
    pub fn scale(&self) -> f64 {
        self.eta / self.rank() as f64
    }

    /// `‖A‖_F² + ‖B‖_F²`.
    pub fn norm_sq(&self) -> f64 {
        self.a.frobenius_sq() + self.b.frobenius_sq()
    }

    pub fn is_finite(&self) -> bool {
        self.a.is_finite() && self.b.is_finite()
    }

    fn check_compatible(&self, other: &AdapterPair) -> Result<()> {
        self.a.check_same_shape(&other.a, "adapter A")?;
        self.b.check_same_shape(&other.b, "adapter B")
    }
}

/// Pre-trained weights and, for the frozen-A variants, the shared `A₀`.
#[derive(Clone, Debug)]
pub struct FrozenBase {
    pub w0: Mat,
    pub a0: Option<Mat>,
}

/// `A` with i.i.d. `N(0, σ²)` entries and `B = 0`, so `ΔW = 0`.
pub fn init_adapter(
    d: usize,
    k: usize,
    r: usize,
    sigma: f64,
    eta: f64,
    rng: &mut impl Rng,
) -> Result<AdapterPair> {
    if r == 0 || r > d.min(k) {
        return input(format!("rank {r} out of range 1..={} for d={d}, k={k}", d.min(k)));
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return input(format!("sigma must be nonnegative, got {sigma}"));
    }
    let a = gaussian_mat(r, k, sigma, rng);
    AdapterPair::new(a, Mat::zeros(d, r), eta)
}

/// Matrix with i.i.d. `N(0, σ²)` entries, drawn row-major.
pub fn gaussian_mat(rows: usize, cols: usize, sigma: f64, rng: &mut impl Rng) -> Mat {
    Mat::from_fn(rows, cols, |_, _| {
        let z: f64 = rng.sample(StandardNormal);
        sigma * z
    })
}

/// `ΔW = (η/r)·B·A`.
pub fn delta_w(p: &AdapterPair) -> Mat {
    p.b.matmul(&p.a).scale(p.scale())
}

/// `W₀ + ΔW`.
pub fn effective_weight(base: &FrozenBase, p: &AdapterPair) -> Result<Mat> {
    if base.w0.shape() != (p.d(), p.k()) {
        return Err(Error::Shape {
            op: "effective_weight",
            lhs: base.w0.shape(),
            rhs: (p.d(), p.k()),
        });
    }
    Ok(base.w0.add(&delta_w(p)))
}

/// Arithmetic mean `(Ā, B̄)`. Agents are summed in list order.
pub fn mean_adapter(states: &[AdapterPair]) -> Result<AdapterPair> {
    let first = states
        .first()
        .ok_or_else(|| Error::Input("empty adapter list".into()))?;
    let mut a = Mat::zeros(first.a.rows(), first.a.cols());
    let mut b = Mat::zeros(first.b.rows(), first.b.cols());
    for s in states {
        first.check_compatible(s)?;
        a.axpy(1.0, &s.a);
        b.axpy(1.0, &s.b);
    }
    let inv = 1.0 / states.len() as f64;
    AdapterPair::new(a.scale(inv), b.scale(inv), first.eta)
}

/// `(1/N)·Σᵢ (‖Aⁱ − Ā‖_F² + ‖Bⁱ − B̄‖_F²)`.
pub fn adapter_disagreement(states: &[AdapterPair]) -> Result<f64> {
    let mean = mean_adapter(states)?;
    let total: f64 = states
        .iter()
        .map(|s| s.a.sub(&mean.a).frobenius_sq() + s.b.sub(&mean.b).frobenius_sq())
        .sum();
    Ok(total / states.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lowrank::{frobenius_norm, svd_full};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn init_has_zero_b_and_zero_delta() {
        let p = init_adapter(4, 3, 2, 0.02, 1.0, &mut rng(7)).unwrap();
        assert_eq!(p.b, Mat::zeros(4, 2));
        assert_eq!(delta_w(&p), Mat::zeros(4, 3));
        assert_eq!(p.a.shape(), (2, 3));
    }

    #[test]
    fn init_with_zero_sigma() {
        let p = init_adapter(4, 3, 2, 0.0, 1.0, &mut rng(7)).unwrap();
        assert!(p.a.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_is_deterministic_and_checked() {
        let a = init_adapter(5, 6, 3, 0.1, 1.0, &mut rng(1)).unwrap();
        let b = init_adapter(5, 6, 3, 0.1, 1.0, &mut rng(1)).unwrap();
        assert_eq!(a, b);
        assert!(init_adapter(2, 3, 3, 0.1, 1.0, &mut rng(1)).is_err());
    }

    #[test]
    fn delta_w_hand_case() {
        let a = Mat::from_rows(&[vec![1.0, -1.0]]).unwrap();
        let b = Mat::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let p = AdapterPair::new(a, b, 2.0).unwrap();
        let expect = Mat::from_rows(&[vec![2.0, -2.0], vec![2.0, -2.0]]).unwrap();
        assert_eq!(delta_w(&p), expect);
    }

    #[test]
    fn delta_w_rank_is_bounded() {
        let mut g = rng(3);
        let p = AdapterPair::new(gaussian_mat(3, 10, 1.0, &mut g), gaussian_mat(9, 3, 1.0, &mut g), 1.0)
            .unwrap();
        let sigma = svd_full(&delta_w(&p)).unwrap().sigma;
        let tail: f64 = sigma[3..].iter().map(|s| s * s).sum::<f64>().sqrt();
        assert!(tail < 1e-10 * sigma[0]);
    }

    #[test]
    fn delta_w_is_bilinear() {
        let mut g = rng(8);
        let p = AdapterPair::new(gaussian_mat(2, 5, 1.0, &mut g), gaussian_mat(4, 2, 1.0, &mut g), 1.5)
            .unwrap();
        let mut q = p.clone();
        q.a = q.a.scale(-3.5);
        let lhs = delta_w(&q);
        let rhs = delta_w(&p).scale(-3.5);
        assert!(lhs.max_abs_diff(&rhs) <= 1e-12 * (1.0 + frobenius_norm(&rhs)));
    }

    #[test]
    fn effective_weight_cases() {
        let mut g = rng(2);
        let w0 = gaussian_mat(4, 3, 1.0, &mut g);
        let fresh = init_adapter(4, 3, 2, 0.02, 1.0, &mut g).unwrap();
        let base = FrozenBase { w0: w0.clone(), a0: None };
        assert_eq!(effective_weight(&base, &fresh).unwrap(), w0);

        let p = AdapterPair::new(gaussian_mat(2, 3, 1.0, &mut g), gaussian_mat(4, 2, 1.0, &mut g), 1.0)
            .unwrap();
        let zero = FrozenBase { w0: Mat::zeros(4, 3), a0: None };
        assert_eq!(effective_weight(&zero, &p).unwrap(), delta_w(&p));

        let mut q = p.clone();
        q.eta *= 2.0;
        q.b = q.b.scale(0.5);
        let diff = effective_weight(&base, &p).unwrap().max_abs_diff(&effective_weight(&base, &q).unwrap());
        assert!(diff < 1e-14);

        let wrong = FrozenBase { w0: Mat::zeros(3, 3), a0: None };
        assert!(matches!(effective_weight(&wrong, &p), Err(Error::Shape { .. })));
    }

    #[test]
    fn disagreement_cases() {
        let mut g = rng(5);
        let p = AdapterPair::new(gaussian_mat(2, 3, 1.0, &mut g), gaussian_mat(4, 2, 1.0, &mut g), 1.0)
            .unwrap();
        assert_eq!(adapter_disagreement(&[p.clone(), p.clone()]).unwrap(), 0.0);
        assert_eq!(adapter_disagreement(std::slice::from_ref(&p)).unwrap(), 0.0);
        let mut q = p.clone();
        q.a = q.a.scale(-1.0);
        let got = adapter_disagreement(&[p.clone(), q]).unwrap();
        assert!((got - p.a.frobenius_sq()).abs() < 1e-12);
        assert!(adapter_disagreement(&[]).is_err());
    }

    #[test]
    fn gaussian_norm_diagnostic() {
        // ‖A₀‖_F ≤ r + √(kr) with high probability for unit-variance entries.
        let (r, k) = (4, 12);
        let bound = r as f64 + ((k * r) as f64).sqrt();
        let hits = (0..100)
            .filter(|&s| frobenius_norm(&gaussian_mat(r, k, 1.0, &mut rng(s))) <= bound)
            .count();
        assert!(hits >= 95, "{hits}/100 draws within the bound");
    }
}
