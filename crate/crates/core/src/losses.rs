//! Scalar objectives, their gradients, and the supervised/unsupervised schedule.
//!
//! Two-way logits are `[positive, negative]` throughout.

use crate::numerics::{self, NumericsError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Logits = [f64; 2];

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("query set is empty")]
    EmptyQueries,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid schedule config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, LossError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub lambda: f64,
    /// Iteration scale `N`; the trainer overwrites it with the planned iteration count when 0.
    pub n_scale: f64,
    pub offset: f64,
    pub gamma: f64,
    pub xi: f64,
    pub tau: f64,
    pub conf_threshold: f64,
    /// L2-normalise features before the contrastive dot products.
    pub normalize_contrastive: bool,
    /// Average the pseudo-label loss over confident queries only instead of all augmented ones.
    pub renormalize_masked: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            n_scale: 0.0,
            offset: 0.5,
            gamma: 0.3,
            xi: 0.03,
            tau: 0.07,
            conf_threshold: 0.9,
            normalize_contrastive: true,
            renormalize_masked: false,
        }
    }
}

impl ScheduleConfig {
    /// `lambda = 0` is accepted so the unsupervised branch can be switched off;
    /// `conf_threshold = 1` likewise masks every query.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(LossError::InvalidConfig(m.to_string()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be > 0");
        }
        if !(self.conf_threshold > 0.0 && self.conf_threshold <= 1.0) {
            return bad("conf_threshold must lie in (0, 1]");
        }
        if !(self.n_scale >= 1.0 && self.n_scale.is_finite()) {
            return bad("n_scale must be >= 1");
        }
        if !self.offset.is_finite() || !self.gamma.is_finite() || !self.xi.is_finite() {
            return bad("offset, gamma and xi must be finite");
        }
        Ok(())
    }
}

pub fn softmax(l: Logits) -> Logits {
    let m = l[0].max(l[1]);
    let (a, b) = ((l[0] - m).exp(), (l[1] - m).exp());
    let s = a + b;
    [a / s, b / s]
}

pub fn log_softmax(l: Logits) -> Logits {
    let m = l[0].max(l[1]);
    let lse = m + ((l[0] - m).exp() + (l[1] - m).exp()).ln();
    [l[0] - lse, l[1] - lse]
}

fn class_index(label: bool) -> usize {
    if label { 0 } else { 1 }
}

/// Mean cross-entropy over queries.
pub fn ce_loss(logits: &[Logits], labels: &[bool]) -> Result<f64> {
    ce_loss_grad(logits, labels).map(|(l, _)| l)
}

pub fn ce_loss_grad(logits: &[Logits], labels: &[bool]) -> Result<(f64, Vec<Logits>)> {
    if logits.is_empty() {
        return Err(LossError::EmptyQueries);
    }
    if logits.len() != labels.len() {
        return Err(LossError::LengthMismatch(logits.len(), labels.len()));
    }
    let inv = 1.0 / logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (l, &y) in logits.iter().zip(labels) {
        let c = class_index(y);
        loss -= log_softmax(*l)[c];
        let mut g = softmax(*l);
        g[c] -= 1.0;
        grad.push([g[0] * inv, g[1] * inv]);
    }
    Ok((loss * inv, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveOutput {
    pub loss: f64,
    /// Items without a same-label partner; they contribute nothing.
    pub partnerless: Vec<usize>,
    /// Gradient w.r.t. the raw (pre-normalisation) features.
    pub grad: Vec<Vec<f64>>,
}

/// Supervised contrastive loss, summed over items.
///
/// The weight `1/|X(i)|` counts `i` itself; the positive sum skips it.
pub fn contrastive_loss(features: &[Vec<f64>], labels: &[usize], tau: f64, normalize: bool) -> Result<f64> {
    contrastive_loss_grad(features, labels, tau, normalize).map(|o| o.loss)
}

pub fn contrastive_loss_grad(
    features: &[Vec<f64>],
    labels: &[usize],
    tau: f64,
    normalize: bool,
) -> Result<ContrastiveOutput> {
    if features.len() != labels.len() {
        return Err(LossError::LengthMismatch(features.len(), labels.len()));
    }
    let t = features.len();
    let f: Vec<Vec<f64>> = if normalize {
        features.iter().map(|v| numerics::normalize(v)).collect::<std::result::Result<_, _>>()?
    } else {
        features.to_vec()
    };

    let mut sim = vec![vec![0.0; t]; t];
    for i in 0..t {
        for a in i + 1..t {
            let s = numerics::dot(&f[i], &f[a]) / tau;
            sim[i][a] = s;
            sim[a][i] = s;
        }
    }

    let mut loss = 0.0;
    let mut partnerless = Vec::new();
    // dL/ds_ia, not symmetric
    let mut ds = vec![vec![0.0; t]; t];
    for i in 0..t {
        let partners = (0..t).filter(|&x| x != i && labels[x] == labels[i]).count();
        if partners == 0 {
            partnerless.push(i);
            continue;
        }
        let n_i = (partners + 1) as f64;
        let max = (0..t).filter(|&a| a != i).map(|a| sim[i][a]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..t).filter(|&a| a != i).map(|a| (sim[i][a] - max).exp()).sum();
        let lse = max + denom.ln();
        for x in 0..t {
            if x != i && labels[x] == labels[i] {
                loss -= (sim[i][x] - lse) / n_i;
                ds[i][x] -= 1.0 / n_i;
            }
        }
        let w = partners as f64 / n_i;
        for a in 0..t {
            if a != i {
                ds[i][a] += w * (sim[i][a] - lse).exp();
            }
        }
    }

    let d = f.first().map_or(0, Vec::len);
    let mut grad_f = vec![vec![0.0; d]; t];
    for i in 0..t {
        for a in 0..t {
            let g = ds[i][a] / tau;
            if g != 0.0 {
                numerics::axpy(&mut grad_f[i], g, &f[a]);
                numerics::axpy(&mut grad_f[a], g, &f[i]);
            }
        }
    }
    let grad = if normalize {
        features.iter().zip(&grad_f).map(|(x, g)| numerics::normalize_backward(x, g)).collect()
    } else {
        grad_f
    };
    Ok(ContrastiveOutput { loss, partnerless, grad })
}

/// Queries whose teacher confidence reaches `threshold`; a threshold of 1 or more passes nothing.
pub fn confidence_mask(teacher_probs: &[Logits], threshold: f64) -> Vec<bool> {
    teacher_probs
        .iter()
        .map(|p| threshold < 1.0 && p[0].max(p[1]) >= threshold)
        .collect()
}

pub fn entropy(p: Logits) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|x| -x * x.ln()).sum()
}

/// Soft cross-entropy against teacher distributions on confident queries.
pub fn soft_ce_loss(teacher_probs: &[Logits], student_logits: &[Logits], mask: &[bool], renormalize: bool) -> f64 {
    soft_ce_loss_grad(teacher_probs, student_logits, mask, renormalize).0
}

pub fn soft_ce_loss_grad(
    teacher_probs: &[Logits],
    student_logits: &[Logits],
    mask: &[bool],
    renormalize: bool,
) -> (f64, Vec<Logits>) {
    let mut grad = vec![[0.0; 2]; student_logits.len()];
    let active = mask.iter().filter(|&&m| m).count();
    if active == 0 {
        return (0.0, grad);
    }
    let denom = if renormalize { active } else { student_logits.len() } as f64;
    let mut loss = 0.0;
    for (q, ((t, s), &m)) in teacher_probs.iter().zip(student_logits).zip(mask).enumerate() {
        if !m {
            continue;
        }
        let ls = log_softmax(*s);
        loss -= t[0] * ls[0] + t[1] * ls[1];
        let p = softmax(*s);
        let tsum = t[0] + t[1];
        grad[q] = [(tsum * p[0] - t[0]) / denom, (tsum * p[1] - t[1]) / denom];
    }
    (loss / denom, grad)
}

/// `(α, β)` at iteration `n`.
pub fn schedule_weights(n: u64, cfg: &ScheduleConfig) -> (f64, f64) {
    let x = n as f64 / cfg.n_scale - cfg.offset;
    (1.0 / (1.0 + x.exp()), cfg.lambda / (1.0 + (-x).exp()))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub ce: f64,
    pub cts: f64,
    pub aux: f64,
    pub unsup: f64,
}

/// Coefficients multiplying each component in the total loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub ce: f64,
    pub cts: f64,
    pub aux: f64,
    pub unsup: f64,
}

pub fn loss_weights(n: u64, cfg: &ScheduleConfig) -> LossWeights {
    let (alpha, beta) = schedule_weights(n, cfg);
    LossWeights { alpha, beta, ce: alpha, cts: alpha * cfg.gamma, aux: alpha * cfg.xi, unsup: beta }
}

pub fn total_loss(c: &LossComponents, n: u64, cfg: &ScheduleConfig) -> f64 {
    let (alpha, beta) = schedule_weights(n, cfg);
    alpha * (c.ce + cfg.gamma * c.cts + cfg.xi * c.aux) + beta * c.unsup
}
