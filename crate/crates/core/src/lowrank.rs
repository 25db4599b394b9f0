//! Dense linear algebra for the simulator.
//!
//! Everything here works on small row-major `f64` matrices: adapter factors
//! are at most a few thousand entries per side, so the kernels favour
//! accuracy and determinism over blocking or SIMD.
//!
//! The SVD is a one-sided (Hestenes) Jacobi iteration. It orthogonalizes the
//! columns of a working copy by plane rotations until every pair satisfies
//! `|<a_p, a_q>| <= tol * |a_p| * |a_q|`; the column norms are then the
//! singular values. Output vectors follow a fixed sign convention so that
//! repeated runs produce bit-identical factors.

use std::fmt::Write as _;
use std::ops::{Index, IndexMut};

use crate::error::{input, Error, Result};

/// Relative off-diagonal threshold below which a Jacobi rotation is skipped.
const JACOBI_TOL: f64 = 1e-14;
const MAX_SWEEPS: usize = 100;

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major data, checking length and finiteness.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return input(format!("matrix dimensions must be positive, got {rows}x{cols}"));
        }
        if data.len() != rows * cols {
            return input(format!(
                "expected {} entries for a {rows}x{cols} matrix, got {}",
                rows * cols,
                data.len()
            ));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return input(format!(
                "non-finite entry at ({}, {})",
                pos / cols,
                pos % cols
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n_cols) {
            return input("ragged rows");
        }
        Self::from_vec(n_rows, n_cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self * rhs`.
    pub fn matmul(&self, rhs: &Mat) -> Mat {
        assert_eq!(
            self.cols, rhs.rows,
            "matmul shape mismatch: {:?} * {:?}",
            self.shape(),
            rhs.shape()
        );
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (l, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(l)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `selfᵀ * rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Mat) -> Mat {
        assert_eq!(
            self.rows, rhs.rows,
            "t_matmul shape mismatch: {:?}ᵀ * {:?}",
            self.shape(),
            rhs.shape()
        );
        let mut out = Mat::zeros(self.cols, rhs.cols);
        for l in 0..self.rows {
            let rhs_row = rhs.row(l);
            for (i, &a) in self.row(l).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self * rhsᵀ` without materializing the transpose.
    pub fn matmul_t(&self, rhs: &Mat) -> Mat {
        assert_eq!(
            self.cols, rhs.cols,
            "matmul_t shape mismatch: {:?} * {:?}ᵀ",
            self.shape(),
            rhs.shape()
        );
        Mat::from_fn(self.rows, rhs.rows, |i, j| dot(self.row(i), rhs.row(j)))
    }

    pub fn add(&self, rhs: &Mat) -> Mat {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Mat) -> Mat {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(&self, rhs: &Mat, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Mat {
        assert_eq!(
            self.shape(),
            rhs.shape(),
            "{op} shape mismatch: {:?} vs {:?}",
            self.shape(),
            rhs.shape()
        );
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    /// `self += s * rhs`.
    pub fn axpy(&mut self, s: f64, rhs: &Mat) {
        assert_eq!(self.shape(), rhs.shape(), "axpy shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a += s * b;
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, rhs: &Mat) -> f64 {
        assert_eq!(self.shape(), rhs.shape());
        self.data
            .iter()
            .zip(&rhs.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn check_same_shape(&self, rhs: &Mat, op: &'static str) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::Shape {
                op,
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        }
        Ok(())
    }

    /// Comma-separated rows, each value printed in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for i in 0..self.rows {
            for (j, v) in self.row(i).iter().enumerate() {
                if j > 0 {
                    s.push(',');
                }
                let _ = write!(s, "{v:?}");
            }
            s.push('\n');
        }
        s
    }

    /// Parses the format written by [`Mat::to_csv`]. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn from_csv(text: &str) -> Result<Mat> {
        let mut rows = Vec::new();
        for (line_no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split(',')
                .map(|tok| {
                    tok.trim().parse::<f64>().map_err(|e| {
                        Error::Parse(format!("line {}: {:?}: {e}", line_no + 1, tok.trim()))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        if rows.is_empty() {
            return Err(Error::Parse("empty matrix".into()));
        }
        Mat::from_rows(&rows)
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn frobenius_norm(m: &Mat) -> f64 {
    m.frobenius_sq().sqrt()
}

/// Largest singular value. Returns NaN for non-finite input.
pub fn spectral_norm(m: &Mat) -> f64 {
    match singular_values(m) {
        Ok(s) => s[0],
        Err(_) => f64::NAN,
    }
}

/// Thin singular value decomposition `M = U diag(sigma) Vᵀ`.
///
/// For an `m x n` input with `p = min(m, n)`: `u` is `m x p`, `v` is `n x p`,
/// and `sigma` has `p` entries in non-increasing order.
#[derive(Clone, Debug)]
pub struct Svd {
    pub u: Mat,
    pub sigma: Vec<f64>,
    pub v: Mat,
}

impl Svd {
    pub fn reconstruct(&self) -> Mat {
        scaled_product(&self.u, &self.sigma, &self.v)
    }
}

/// `U diag(s) Vᵀ`.
fn scaled_product(u: &Mat, s: &[f64], v: &Mat) -> Mat {
    let us = Mat::from_fn(u.rows(), s.len(), |i, j| u[(i, j)] * s[j]);
    us.matmul_t(v)
}

pub fn singular_values(m: &Mat) -> Result<Vec<f64>> {
    Ok(svd_full(m)?.sigma)
}

pub fn svd_full(m: &Mat) -> Result<Svd> {
    if !m.is_finite() {
        return input("svd of a matrix with non-finite entries");
    }
    if m.rows() >= m.cols() {
        let (u, sigma, v) = jacobi_tall(m);
        Ok(normalize_signs(Svd { u, sigma, v }))
    } else {
        // Mᵀ = U' S V'ᵀ  =>  M = V' S U'ᵀ
        let (u_t, sigma, v_t) = jacobi_tall(&m.transpose());
        Ok(normalize_signs(Svd {
            u: v_t,
            sigma,
            v: u_t,
        }))
    }
}

/// One-sided Jacobi on a matrix with `rows >= cols`.
fn jacobi_tall(m: &Mat) -> (Mat, Vec<f64>, Mat) {
    let (rows, n) = m.shape();
    // Column-major working copies so each rotation touches contiguous memory.
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| m.col(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut w, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = w.iter().map(|col| dot(col, col).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable: equal singular values keep input column order.
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let s = norms[j];
        if s > 0.0 && s.is_finite() {
            u_cols.push(w[j].iter().map(|x| x / s).collect());
        } else {
            u_cols.push(vec![0.0; rows]);
            pending.push(slot);
        }
    }
    for slot in pending {
        u_cols[slot] = orthonormal_complement(&u_cols, slot, rows);
    }

    let sigma: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    let u = Mat::from_fn(rows, n, |i, j| u_cols[j][i]);
    let v_mat = Mat::from_fn(n, n, |i, slot| v[order[slot]][i]);
    (u, sigma, v_mat)
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = cols.split_at_mut(q);
    let (cp, cq) = (&mut head[p], &mut tail[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Unit vector orthogonal to every column of `cols` except `skip` (which is
/// the zero placeholder being filled). Tries standard basis vectors in order.
fn orthonormal_complement(cols: &[Vec<f64>], skip: usize, len: usize) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for e in 0..len {
        let mut cand = vec![0.0; len];
        cand[e] = 1.0;
        // Two Gram-Schmidt passes.
        for _ in 0..2 {
            for (idx, col) in cols.iter().enumerate() {
                if idx == skip {
                    continue;
                }
                let proj = dot(&cand, col);
                for (c, &x) in cand.iter_mut().zip(col) {
                    *c -= proj * x;
                }
            }
        }
        let norm = dot(&cand, &cand).sqrt();
        if norm > 0.5 {
            return cand.into_iter().map(|x| x / norm).collect();
        }
        if best.as_ref().is_none_or(|(b, _)| norm > *b) {
            best = Some((norm, cand));
        }
    }
    let (norm, cand) = best.expect("complement search over an empty space");
    cand.into_iter().map(|x| x / norm).collect()
}

/// Flip each singular pair so the largest-magnitude entry of the left vector
/// is positive (first such entry on ties).
fn normalize_signs(mut svd: Svd) -> Svd {
    for j in 0..svd.sigma.len() {
        let mut pivot = 0;
        let mut best = -1.0;
        for i in 0..svd.u.rows() {
            let a = svd.u[(i, j)].abs();
            if a > best {
                best = a;
                pivot = i;
            }
        }
        if svd.u[(pivot, j)] < 0.0 {
            for i in 0..svd.u.rows() {
                svd.u[(i, j)] = -svd.u[(i, j)];
            }
            for i in 0..svd.v.rows() {
                svd.v[(i, j)] = -svd.v[(i, j)];
            }
        }
    }
    svd
}

/// Best rank-`r` approximation `U_r diag(sigma_r) V_rᵀ` of a matrix.
#[derive(Clone, Debug)]
pub struct TsvdResult {
    pub u_r: Mat,
    pub sigma_r: Vec<f64>,
    pub v_r: Mat,
    /// Sum of squared discarded singular values.
    pub tail_energy: f64,
}

impl TsvdResult {
    pub fn rank(&self) -> usize {
        self.sigma_r.len()
    }

    pub fn reconstruct(&self) -> Mat {
        scaled_product(&self.u_r, &self.sigma_r, &self.v_r)
    }

    /// Frobenius distance between the input and its truncation.
    pub fn approximation_error(&self) -> f64 {
        self.tail_energy.sqrt()
    }
}

pub fn tsvd(m: &Mat, r: usize) -> Result<TsvdResult> {
    let p = m.rows().min(m.cols());
    if r == 0 || r > p {
        return input(format!(
            "truncation rank {r} out of range 1..={p} for a {}x{} matrix",
            m.rows(),
            m.cols()
        ));
    }
    let svd = svd_full(m)?;
    let tail_energy = svd.sigma[r..].iter().map(|s| s * s).sum();
    Ok(TsvdResult {
        u_r: Mat::from_fn(m.rows(), r, |i, j| svd.u[(i, j)]),
        sigma_r: svd.sigma[..r].to_vec(),
        v_r: Mat::from_fn(m.cols(), r, |i, j| svd.v[(i, j)]),
        tail_energy,
    })
}

/// How a truncated SVD is split back into adapter factors `(A, B)` with
/// `B A = U_r Σ_r V_rᵀ`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SplitMode {
    /// `A = (V_r Σ^{1/2})ᵀ`, `B = U_r Σ^{1/2}`: both factors share the spectrum.
    #[default]
    Balanced,
    /// `A = V_rᵀ`, `B = U_r Σ_r`.
    SigmaLeft,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balanced" => Ok(Self::Balanced),
            "sigma_left" => Ok(Self::SigmaLeft),
            other => Err(Error::Parse(format!(
                "unknown split mode {other:?} (expected balanced|sigma_left)"
            ))),
        }
    }
}

impl std::fmt::Display for SplitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Balanced => "balanced",
            Self::SigmaLeft => "sigma_left",
        })
    }
}

/// Returns `(A, B)` with `A: r x k` and `B: d x r`.
pub fn factor_split(t: &TsvdResult, mode: SplitMode) -> (Mat, Mat) {
    let r = t.rank();
    let (left, right): (Vec<f64>, Vec<f64>) = match mode {
        SplitMode::Balanced => {
            let root: Vec<f64> = t.sigma_r.iter().map(|s| s.sqrt()).collect();
            (root.clone(), root)
        }
        SplitMode::SigmaLeft => (t.sigma_r.clone(), vec![1.0; r]),
    };
    let b = Mat::from_fn(t.u_r.rows(), r, |i, j| t.u_r[(i, j)] * left[j]);
    let a = Mat::from_fn(r, t.v_r.rows(), |i, j| t.v_r[(j, i)] * right[i]);
    (a, b)
}

/// Eigenvalues of a symmetric matrix in non-increasing order, via cyclic
/// Jacobi rotations.
pub fn symmetric_eigenvalues(m: &Mat) -> Result<Vec<f64>> {
    let n = m.rows();
    if m.cols() != n {
        return Err(Error::Shape {
            op: "symmetric_eigenvalues",
            lhs: m.shape(),
            rhs: (n, n),
        });
    }
    if !m.is_finite() {
        return input("eigenvalues of a matrix with non-finite entries");
    }
    let mut a = m.clone();
    let scale = frobenius_norm(&a).max(f64::MIN_POSITIVE);
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[(k, p)], a[(k, q)]);
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    eig.sort_by(|x, y| y.total_cmp(x));
    Ok(eig)
}
