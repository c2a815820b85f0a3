//! Dense vector and matrix arithmetic shared by every other module.
//!
//! Everything here works on `f64`. Matrices are small (at most a few dozen
//! rows) so storage is a plain row-major `Vec<f64>` with no BLAS behind it.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero-norm vector has no direction")]
    ZeroVector,
    #[error("matrix has no non-zero singular direction")]
    ZeroMatrix,
    #[error("requested rank {0} is out of range")]
    InvalidRank(usize),
    #[error("non-finite value produced")]
    NonFinite,
}

pub type Result<T> = std::result::Result<T, NumericsError>;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(NumericsError::DimensionMismatch { expected: rows * cols, got: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a `d × m` matrix whose columns are the given vectors.
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let cols = columns.len();
        let rows = columns.first().map_or(0, Vec::len);
        let mut m = Self::zeros(rows, cols);
        for (j, c) in columns.iter().enumerate() {
            if c.len() != rows {
                return Err(NumericsError::DimensionMismatch { expected: rows, got: c.len() });
            }
            for (i, &v) in c.iter().enumerate() {
                m.set(i, j, v);
            }
        }
        Ok(m)
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
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn add_at(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] += v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(NumericsError::DimensionMismatch { expected: self.cols, got: other.rows });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materialising the transpose.
    pub fn tmatmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(NumericsError::DimensionMismatch { expected: self.rows, got: other.rows });
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            for i in 0..self.cols {
                let a = self.get(k, i);
                for j in 0..other.cols {
                    out.add_at(i, j, a * other.get(k, j));
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(NumericsError::DimensionMismatch { expected: self.cols, got: v.len() });
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    /// `selfᵀ · v`.
    pub fn tmatvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.rows {
            return Err(NumericsError::DimensionMismatch { expected: self.rows, got: v.len() });
        }
        let mut out = vec![0.0; self.cols];
        for (r, &vr) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(r)) {
                *o += a * vr;
            }
        }
        Ok(out)
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn scale(a: &[f64], s: f64) -> Vec<f64> {
    a.iter().map(|x| x * s).collect()
}

/// `y += s · x`
#[inline]
pub fn axpy(y: &mut [f64], s: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += s * xi;
    }
}

pub fn mean_vector(vectors: &[Vec<f64>]) -> Vec<f64> {
    let d = vectors.first().map_or(0, Vec::len);
    let mut m = vec![0.0; d];
    for v in vectors {
        axpy(&mut m, 1.0, v);
    }
    let n = vectors.len().max(1) as f64;
    m.iter_mut().for_each(|x| *x /= n);
    m
}

pub fn normalize(a: &[f64]) -> Result<Vec<f64>> {
    let n = norm(a);
    if n == 0.0 || !n.is_finite() {
        return Err(NumericsError::ZeroVector);
    }
    Ok(scale(a, 1.0 / n))
}

/// Pulls `upstream` (a gradient w.r.t. `a / ‖a‖`) back to `a`.
pub fn normalize_backward(a: &[f64], upstream: &[f64]) -> Vec<f64> {
    let n = norm(a);
    let unit = scale(a, 1.0 / n);
    let along = dot(&unit, upstream);
    upstream.iter().zip(&unit).map(|(g, u)| (g - u * along) / n).collect()
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(NumericsError::DimensionMismatch { expected: u.len(), got: v.len() });
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(NumericsError::ZeroVector);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Eigen-decomposition of a real symmetric matrix.
///
/// Eigenvalues are sorted in descending order; `vectors` holds the matching
/// unit eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
}

/// Cyclic Jacobi rotations on a symmetric matrix.
///
/// Only the upper triangle is read. Sweeps stop once the off-diagonal mass
/// falls below `1e-30` relative to the Frobenius norm or after 100 sweeps.
pub fn sym_eigen(a: &Matrix) -> Result<SymEigen> {
    let n = a.rows();
    if a.cols() != n {
        return Err(NumericsError::DimensionMismatch { expected: n, got: a.cols() });
    }
    let mut m = a.clone();
    for i in 0..n {
        for j in 0..i {
            m.set(i, j, m.get(j, i));
        }
    }
    let mut v = Matrix::identity(n);
    let total = m.frobenius_sq();
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m.get(p, q) * m.get(p, q);
            }
        }
        if off <= 1e-30 * total || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(j, j).total_cmp(&m.get(i, i)).then(i.cmp(&j)));
    let values: Vec<f64> = order.iter().map(|&i| m.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, dst, v.get(r, src));
        }
    }
    if !values.iter().all(|x| x.is_finite()) || !vectors.is_finite() {
        return Err(NumericsError::NonFinite);
    }
    Ok(SymEigen { values, vectors })
}

/// Eigenvalues below this fraction of the largest one count as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Orthonormal basis of the dominant column space of `x`.
#[derive(Debug, Clone)]
pub struct BasisResult {
    /// `d × k_eff` with orthonormal columns.
    pub basis: Matrix,
    /// Columns actually returned; smaller than requested when `x` is rank deficient.
    pub k: usize,
    pub rank_reduced: bool,
    /// Eigen-decomposition of the `m × m` Gram matrix `xᵀx` used to build the basis.
    pub gram: SymEigen,
}

/// Numerical rank of a Gram spectrum sorted in descending order.
pub fn spectral_rank(values: &[f64]) -> usize {
    let top = values.first().copied().unwrap_or(0.0);
    if top <= 0.0 {
        return 0;
    }
    values.iter().take_while(|&&v| v > RANK_TOLERANCE * top).count()
}

/// Top-`k` orthonormal basis of the span of the columns of `x` (`d × m`).
///
/// Works on the `m × m` Gram matrix: with `xᵀx = V Λ Vᵀ`, the left singular
/// vectors are `x vᵢ / √λᵢ`. When `k` exceeds the numerical rank it is
/// reduced to the rank and `rank_reduced` is set.
pub fn orthonormal_basis(x: &Matrix, k: usize) -> Result<BasisResult> {
    if k == 0 || k > x.cols() {
        return Err(NumericsError::InvalidRank(k));
    }
    let (basis, gram, k_eff) = basis_from_gram(x, k)?;
    if k_eff == 0 {
        return Err(NumericsError::ZeroMatrix);
    }
    Ok(BasisResult { basis, k: k_eff, rank_reduced: k_eff < k, gram })
}

/// Shared by [`orthonormal_basis`] and the subspace head, which accepts rank 0.
pub(crate) fn basis_from_gram(x: &Matrix, k: usize) -> Result<(Matrix, SymEigen, usize)> {
    let gram = sym_eigen(&x.tmatmul(x)?)?;
    let rank = spectral_rank(&gram.values);
    let k_eff = k.min(rank);
    let d = x.rows();
    let mut basis = Matrix::zeros(d, k_eff);
    for j in 0..k_eff {
        let vj = gram.vectors.column(j);
        let mut col = x.matvec(&vj)?;
        let s = 1.0 / gram.values[j].sqrt();
        col.iter_mut().for_each(|c| *c *= s);
        // One re-orthogonalisation pass against earlier columns keeps SᵀS = I
        // tight even for poorly separated eigenvalues.
        for prev in 0..j {
            let pc = basis.column(prev);
            let proj = dot(&pc, &col);
            axpy(&mut col, -proj, &pc);
        }
        let n = norm(&col);
        if n == 0.0 {
            return Err(NumericsError::NonFinite);
        }
        col.iter_mut().for_each(|c| *c /= n);
        // largest-magnitude entry positive
        let mut idx = 0;
        for (i, c) in col.iter().enumerate() {
            if c.abs() > col[idx].abs() {
                idx = i;
            }
        }
        let sign = if col[idx] < 0.0 { -1.0 } else { 1.0 };
        for (i, c) in col.iter().enumerate() {
            basis.set(i, j, sign * c);
        }
    }
    Ok((basis, gram, k_eff))
}

/// `‖v − S Sᵀ v‖²` for a basis with orthonormal columns.
pub fn project_residual(s: &Matrix, v: &[f64]) -> Result<f64> {
    if v.len() != s.rows() {
        return Err(NumericsError::DimensionMismatch { expected: s.rows(), got: v.len() });
    }
    let coeffs = s.tmatvec(v)?;
    let proj = s.matvec(&coeffs)?;
    let r: f64 = v.iter().zip(&proj).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(r.max(0.0))
}

/// Central-difference gradient of `f` at `p`.
pub fn finite_diff_grad<F>(mut f: F, p: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    assert!(h > 0.0, "step must be positive");
    let mut work = p.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = work[i];
        work[i] = orig + h;
        let fp = f(&work);
        work[i] = orig - h;
        let fm = f(&work);
        work[i] = orig;
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

/// Largest component-wise relative error between two gradients.
///
/// Each component uses `|a − b| / max(|a|, |b|, floor)` so that entries that
/// are both essentially zero do not blow up the ratio.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        let data = (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(r, c, data).unwrap()
    }

    fn orthonormality_error(s: &Matrix) -> f64 {
        let g = s.tmatmul(s).unwrap();
        let mut worst: f64 = 0.0;
        for i in 0..g.rows() {
            for j in 0..g.cols() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g.get(i, j) - target).abs());
            }
        }
        worst
    }

    #[test]
    fn identity_columns_give_identity_plane() {
        let x = Matrix::from_columns(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let b = orthonormal_basis(&x, 2).unwrap();
        assert_eq!(b.k, 2);
        assert!(orthonormality_error(&b.basis) < 1e-12);
        for v in [vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]] {
            assert!(project_residual(&b.basis, &v).unwrap() < 1e-12);
        }
        assert!((project_residual(&b.basis, &[0.0, 0.0, 2.0]).unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn repeated_column_rank_one() {
        let c = vec![3.0, -4.0, 0.0];
        let x = Matrix::from_columns(&[c.clone(), c.clone(), c.clone()]).unwrap();
        let b = orthonormal_basis(&x, 1).unwrap();
        let col = b.basis.column(0);
        let expected = normalize(&c).unwrap();
        let same = col.iter().zip(&expected).all(|(a, e)| (a - e).abs() < 1e-12);
        let flipped = col.iter().zip(&expected).all(|(a, e)| (a + e).abs() < 1e-12);
        assert!(same || flipped);
        // sign rule: largest-magnitude entry (-4/5) must end up positive
        assert!(col[1] > 0.0);
    }

    #[test]
    fn rank_reduction_is_flagged() {
        let c = vec![1.0, 2.0, 3.0, 4.0];
        let x = Matrix::from_columns(&[c.clone(), scale(&c, 2.0), scale(&c, -1.0)]).unwrap();
        let b = orthonormal_basis(&x, 3).unwrap();
        assert_eq!(b.k, 1);
        assert!(b.rank_reduced);
    }

    #[test]
    fn zero_matrix_errors() {
        let x = Matrix::zeros(4, 3);
        assert_eq!(orthonormal_basis(&x, 2).unwrap_err(), NumericsError::ZeroMatrix);
        assert!(matches!(orthonormal_basis(&x, 0), Err(NumericsError::InvalidRank(0))));
    }

    #[test]
    fn residual_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_matrix(&mut rng, 6, 3);
        let b = orthonormal_basis(&x, 3).unwrap();
        let in_span = b.basis.matvec(&[0.3, -1.2, 0.7]).unwrap();
        assert!(project_residual(&b.basis, &in_span).unwrap() < 1e-10);

        let s = Matrix::from_columns(&[vec![1.0, 0.0, 0.0]]).unwrap();
        assert!((project_residual(&s, &[0.0, 2.0, -1.0]).unwrap() - 5.0).abs() < 1e-15);
        assert!(matches!(
            project_residual(&s, &[1.0, 2.0]),
            Err(NumericsError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn residual_matches_elementwise_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random_matrix(&mut rng, 7, 4);
        let s = orthonormal_basis(&x, 2).unwrap().basis;
        let v: Vec<f64> = (0..7).map(|_| rng.random_range(-2.0..2.0)).collect();
        // explicit P = S Sᵀ, then ‖(I − P) v‖² entry by entry
        let mut expected = 0.0;
        for i in 0..7 {
            let mut pv = 0.0;
            for j in 0..7 {
                let mut pij = 0.0;
                for c in 0..2 {
                    pij += s.get(i, c) * s.get(j, c);
                }
                pv += pij * v[j];
            }
            expected += (v[i] - pv).powi(2);
        }
        assert!((project_residual(&s, &v).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine_sim(&[1.0, 2.0], &[1.0, 2.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((cosine_sim(&[1.0, 2.0], &[-1.0, -2.0]).unwrap() + 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_sim(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - 2f64.sqrt() / 2.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(NumericsError::ZeroVector));
    }

    #[test]
    fn finite_difference_examples() {
        let g = finite_diff_grad(|p| p[0] * p[0], &[3.0], 1e-4);
        assert!((g[0] - 6.0).abs() < 1e-6);
        let g = finite_diff_grad(|_| 4.2, &[1.0, -2.0, 0.5], 1e-4);
        assert!(g.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn sym_eigen_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_matrix(&mut rng, 6, 4);
        let g = a.tmatmul(&a).unwrap();
        let e = sym_eigen(&g).unwrap();
        assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
        for i in 0..4 {
            for j in 0..4 {
                let mut r = 0.0;
                for k in 0..4 {
                    r += e.vectors.get(i, k) * e.values[k] * e.vectors.get(j, k);
                }
                assert!((r - g.get(i, j)).abs() < 1e-12);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        fn matrix_strategy() -> impl Strategy<Value = (Matrix, usize)> {
            (3usize..10, 1usize..7).prop_flat_map(|(d, m)| {
                let m = m.min(d);
                (prop::collection::vec(-3.0f64..3.0, d * m), 1..=m).prop_map(move |(data, k)| {
                    (Matrix::from_vec(d, m, data).unwrap(), k)
                })
            })
        }

        proptest! {
            #[test]
            fn basis_is_orthonormal((x, k) in matrix_strategy()) {
                if let Ok(b) = orthonormal_basis(&x, k) {
                    prop_assert!(orthonormality_error(&b.basis) < 1e-8);
                }
            }

            #[test]
            fn pythagoras((x, k) in matrix_strategy(), seed in any::<u64>()) {
                if let Ok(b) = orthonormal_basis(&x, k) {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let v: Vec<f64> = (0..x.rows()).map(|_| rng.random_range(-2.0..2.0)).collect();
                    let r = project_residual(&b.basis, &v).unwrap();
                    let coeffs = b.basis.tmatvec(&v).unwrap();
                    let p = b.basis.matvec(&coeffs).unwrap();
                    prop_assert!((r + norm_sq(&p) - norm_sq(&v)).abs() < 1e-8);
                }
            }

            #[test]
            fn residual_invariant_to_column_mixing(seed in any::<u64>(), angle in 0.0f64..std::f64::consts::TAU) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = random_matrix(&mut rng, 6, 4);
                let s = orthonormal_basis(&x, 2).unwrap().basis;
                let (c, sn) = (angle.cos(), angle.sin());
                let rot = Matrix::from_vec(2, 2, vec![c, -sn, sn, c]).unwrap();
                let mixed = s.matmul(&rot).unwrap();
                let v: Vec<f64> = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
                let a = project_residual(&s, &v).unwrap();
                let b = project_residual(&mixed, &v).unwrap();
                prop_assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
