//! Few-shot heads: the subspace (DSN) head, a prototype baseline and the
//! subspace separation penalty.
//!
//! A class subspace is built from the mean-centred support matrix
//! `X = [f₁ − μ, …, f_m − μ]` (`d × m`). With the Gram eigen-decomposition
//! `XᵀX = V Λ Vᵀ` the projector onto the top-`k` subspace is
//! `S Sᵀ = X M Xᵀ` where `M = V_k Λ_k⁻¹ V_kᵀ`. Gradients are propagated
//! through that factorisation, so the only spectral derivative needed is
//! the one of `M` with respect to the small `m × m` Gram matrix.

use crate::numerics::{self, basis_from_gram, Matrix, NumericsError, SymEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum HeadError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("subspace dimension {k} not available from {shots} supports")]
    InvalidRank { k: usize, shots: usize },
    #[error("support set is empty")]
    EmptySupport,
}

pub type Result<T> = std::result::Result<T, HeadError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassTag {
    Positive,
    Negative,
}

#[derive(Debug, Clone)]
pub struct SubspaceBasis {
    pub mean: Vec<f64>,
    /// `d × k` with orthonormal columns.
    pub basis: Matrix,
    pub class_tag: ClassTag,
    /// Set when the supports had fewer independent directions than requested.
    pub rank_reduced: bool,
    centered: Matrix,
    gram: SymEigen,
    mixing: Matrix,
}

impl SubspaceBasis {
    pub fn k(&self) -> usize {
        self.basis.cols()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn shots(&self) -> usize {
        self.centered.cols()
    }

    /// `‖(q − μ) − S Sᵀ (q − μ)‖²`
    pub fn residual(&self, q: &[f64]) -> Result<f64> {
        if q.len() != self.dim() {
            return Err(NumericsError::DimensionMismatch { expected: self.dim(), got: q.len() }.into());
        }
        let c = numerics::sub(q, &self.mean);
        if self.k() == 0 {
            return Ok(numerics::norm_sq(&c));
        }
        Ok(numerics::project_residual(&self.basis, &c)?)
    }

    pub fn grad_accumulator(&self) -> SubspaceGrad {
        SubspaceGrad {
            mean: vec![0.0; self.dim()],
            centered: Matrix::zeros(self.dim(), self.shots()),
            mixing: Matrix::zeros(self.shots(), self.shots()),
        }
    }

    /// Back-propagates `upstream · ∂residual(q)`; returns the gradient with
    /// respect to `q` and records the support-side part in `acc`.
    pub fn residual_backward(&self, q: &[f64], upstream: f64, acc: &mut SubspaceGrad) -> Vec<f64> {
        let c = numerics::sub(q, &self.mean);
        let z = self.centered.tmatvec(&c).expect("dims");
        let mz = self.mixing.matvec(&z).expect("dims");
        let xmz = self.centered.matvec(&mz).expect("dims");
        let dc: Vec<f64> = c.iter().zip(&xmz).map(|(ci, pi)| upstream * 2.0 * (ci - pi)).collect();
        for i in 0..self.dim() {
            for j in 0..self.shots() {
                acc.centered.add_at(i, j, -2.0 * upstream * c[i] * mz[j]);
            }
        }
        for a in 0..self.shots() {
            for b in 0..self.shots() {
                acc.mixing.add_at(a, b, -upstream * z[a] * z[b]);
            }
        }
        numerics::axpy(&mut acc.mean, -1.0, &dc);
        dc
    }

    /// Converts the accumulated adjoints into gradients for each support feature.
    pub fn support_gradients(&self, acc: &SubspaceGrad) -> Vec<Vec<f64>> {
        let m = self.shots();
        let d = self.dim();
        let k = self.k();
        let v = &self.gram.vectors;
        let lam = &self.gram.values;

        let mut xbar = acc.centered.clone();
        if k > 0 {
            let mut mbar = Matrix::zeros(m, m);
            for a in 0..m {
                for b in 0..m {
                    mbar.set(a, b, 0.5 * (acc.mixing.get(a, b) + acc.mixing.get(b, a)));
                }
            }
            let f = |i: usize| if i < k { 1.0 / lam[i] } else { 0.0 };
            let scale = lam[0].abs().max(f64::MIN_POSITIVE);
            let mut kmat = Matrix::zeros(m, m);
            for i in 0..m {
                for j in 0..m {
                    let val = if i == j {
                        if i < k { -1.0 / (lam[i] * lam[i]) } else { 0.0 }
                    } else if i < k && j < k {
                        -1.0 / (lam[i] * lam[j])
                    } else if i >= k && j >= k {
                        0.0
                    } else {
                        let gap = lam[i] - lam[j];
                        if gap.abs() < 1e-14 * scale { 0.0 } else { (f(i) - f(j)) / gap }
                    };
                    kmat.set(i, j, val);
                }
            }
            // Ḡ = V (K ∘ Vᵀ M̄ V) Vᵀ
            let inner = v.tmatmul(&mbar.matmul(v).expect("dims")).expect("dims");
            let mut hadamard = Matrix::zeros(m, m);
            for i in 0..m {
                for j in 0..m {
                    hadamard.set(i, j, kmat.get(i, j) * inner.get(i, j));
                }
            }
            let gbar = v.matmul(&hadamard).expect("dims").matmul(&v.transpose()).expect("dims");
            // G = XᵀX
            let xg = self.centered.matmul(&gbar).expect("dims");
            for i in 0..d {
                for j in 0..m {
                    xbar.add_at(i, j, 2.0 * xg.get(i, j));
                }
            }
        }

        let mut col_mean = vec![0.0; d];
        for j in 0..m {
            for (i, cm) in col_mean.iter_mut().enumerate() {
                *cm += xbar.get(i, j);
            }
        }
        let inv_m = 1.0 / m as f64;
        (0..m)
            .map(|j| {
                (0..d)
                    .map(|i| xbar.get(i, j) - inv_m * col_mean[i] + inv_m * acc.mean[i])
                    .collect()
            })
            .collect()
    }
}

/// Adjoints of the quantities a [`SubspaceBasis`] is a function of.
#[derive(Debug, Clone)]
pub struct SubspaceGrad {
    mean: Vec<f64>,
    centered: Matrix,
    mixing: Matrix,
}

/// Builds the class subspace of a support set.
///
/// `k = 0` gives a mean-only subspace; larger `k` is clipped to the numerical
/// rank of the centred supports (flagged through `rank_reduced`).
pub fn build_subspace(features: &[Vec<f64>], k: usize, class_tag: ClassTag) -> Result<SubspaceBasis> {
    if features.is_empty() {
        return Err(HeadError::EmptySupport);
    }
    let m = features.len();
    if k >= m {
        return Err(HeadError::InvalidRank { k, shots: m });
    }
    let mean = numerics::mean_vector(features);
    let centered_cols: Vec<Vec<f64>> = features.iter().map(|f| numerics::sub(f, &mean)).collect();
    let centered = Matrix::from_columns(&centered_cols)?;
    let (basis, gram, k_eff) = basis_from_gram(&centered, k)?;
    let mut mixing = Matrix::zeros(m, m);
    for i in 0..k_eff {
        let inv = 1.0 / gram.values[i];
        for a in 0..m {
            for b in 0..m {
                mixing.add_at(a, b, inv * gram.vectors.get(a, i) * gram.vectors.get(b, i));
            }
        }
    }
    Ok(SubspaceBasis { mean, basis, class_tag, rank_reduced: k_eff < k, centered, gram, mixing })
}

/// Negative squared residuals `(logit_pos, logit_neg)`.
pub fn dsn_logits(pos: &SubspaceBasis, neg: &SubspaceBasis, q: &[f64]) -> Result<(f64, f64)> {
    Ok((-pos.residual(q)?, -neg.residual(q)?))
}

pub fn proto_logits(pos: &[Vec<f64>], neg: &[Vec<f64>], q: &[f64]) -> Result<(f64, f64)> {
    if pos.is_empty() || neg.is_empty() {
        return Err(HeadError::EmptySupport);
    }
    let mp = numerics::mean_vector(pos);
    let mn = numerics::mean_vector(neg);
    if q.len() != mp.len() || q.len() != mn.len() {
        return Err(NumericsError::DimensionMismatch { expected: mp.len(), got: q.len() }.into());
    }
    Ok((-numerics::norm_sq(&numerics::sub(q, &mp)), -numerics::norm_sq(&numerics::sub(q, &mn))))
}

/// `‖S_Pᵀ S_N‖²_F`
pub fn aux_loss(pos: &SubspaceBasis, neg: &SubspaceBasis) -> f64 {
    if pos.k() == 0 || neg.k() == 0 {
        return 0.0;
    }
    pos.basis.tmatmul(&neg.basis).expect("same feature dim").frobenius_sq()
}

/// Back-propagates `upstream · ∂aux_loss` into both accumulators.
///
/// Uses `aux = tr(M_P C M_N Cᵀ)` with `C = X_Pᵀ X_N`.
pub fn aux_loss_backward(
    pos: &SubspaceBasis,
    neg: &SubspaceBasis,
    upstream: f64,
    acc_pos: &mut SubspaceGrad,
    acc_neg: &mut SubspaceGrad,
) {
    if pos.k() == 0 || neg.k() == 0 || upstream == 0.0 {
        return;
    }
    let c = pos.centered.tmatmul(&neg.centered).expect("dims");
    let ct = c.transpose();
    let dm_pos = c.matmul(&neg.mixing).and_then(|t| t.matmul(&ct)).expect("dims");
    let dm_neg = ct.matmul(&pos.mixing).and_then(|t| t.matmul(&c)).expect("dims");
    let cbar = pos.mixing.matmul(&c).and_then(|t| t.matmul(&neg.mixing)).expect("dims");
    let dx_pos = neg.centered.matmul(&cbar.transpose()).expect("dims");
    let dx_neg = pos.centered.matmul(&cbar).expect("dims");
    add_scaled(&mut acc_pos.mixing, &dm_pos, upstream);
    add_scaled(&mut acc_neg.mixing, &dm_neg, upstream);
    add_scaled(&mut acc_pos.centered, &dx_pos, 2.0 * upstream);
    add_scaled(&mut acc_neg.centered, &dx_neg, 2.0 * upstream);
}

fn add_scaled(dst: &mut Matrix, src: &Matrix, s: f64) {
    for (d, v) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s * v;
    }
}
