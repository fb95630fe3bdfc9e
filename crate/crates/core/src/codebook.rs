//! The online clustered codebook.
//!
//! Codes live in raw space; assignment and every loss work on ℓ2-normalized
//! vectors. Per batch the training loop calls, in order: [`quantize`],
//! [`vq_loss`] and [`contrastive_loss`] for gradients, then
//! [`Codebook::update_usage`] and [`Codebook::reinit_codes`].
//!
//! Usage is tracked as an exponential moving average of the assignment
//! fraction,
//!
//! ```text
//! N_k <- gamma * N_k + (1 - gamma) * n_k / token_total
//! ```
//!
//! and a code is pulled toward the centroid of its batch features with weight
//! `alpha_k = exp(-N_k * K * 10 / (1 - gamma))`, so a code at average usage
//! (`N_k ~ 1/K`) stays put and a dead code (`N_k = 0`) is replaced outright.

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, l2_normalize, l2_normalize_backward, log_sum_exp, Matrix};
use crate::seed::{self, tag};

/// Sharpness of the reinitialization factor.
pub const REINIT_SHARPNESS: f64 = 10.0;

/// Default cap on contrastive negatives per token.
pub const DEFAULT_MAX_NEGATIVES: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    codes: Matrix,
    usage: Vec<f64>,
}

impl Codebook {
    /// Codebook with the given code vectors and zero usage.
    pub fn new(codes: Matrix) -> Result<Self> {
        Self::with_usage(codes.clone(), vec![0.0; codes.rows()])
    }

    pub fn with_usage(codes: Matrix, usage: Vec<f64>) -> Result<Self> {
        if codes.rows() == 0 {
            return Err(Error::invalid("codebook needs at least one code"));
        }
        if usage.len() != codes.rows() {
            return Err(Error::DimensionMismatch { expected: codes.rows(), found: usage.len() });
        }
        if !codes.is_finite() {
            return Err(Error::NonFinite("codebook codes".into()));
        }
        if usage.iter().any(|u| !(0.0..=1.0).contains(u)) {
            return Err(Error::invalid("usage must lie in [0, 1]"));
        }
        Ok(Self { codes, usage })
    }

    /// `k` codes with standard normal entries.
    pub fn random(k: usize, d: usize, seed: u64) -> Result<Self> {
        let mut rng = seed::rng(seed, &[tag::INIT, 0xC0DE]);
        let data = (0..k * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        Self::new(Matrix::from_vec(k, d, data)?)
    }

    pub fn size(&self) -> usize {
        self.codes.rows()
    }

    pub fn dim(&self) -> usize {
        self.codes.cols()
    }

    pub fn codes(&self) -> &Matrix {
        &self.codes
    }

    pub fn codes_mut(&mut self) -> &mut Matrix {
        &mut self.codes
    }

    pub fn usage(&self) -> &[f64] {
        &self.usage
    }

    /// EMA usage update from one batch's assignment counts.
    pub fn update_usage(&mut self, q: &QuantizeResult, gamma: f64) -> Result<()> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::invalid(format!("gamma {gamma} outside (0, 1)")));
        }
        if q.token_total == 0 {
            return Err(Error::EmptyInput("batch has no tokens".into()));
        }
        if q.assignment_counts.len() != self.size() {
            return Err(Error::DimensionMismatch {
                expected: self.size(),
                found: q.assignment_counts.len(),
            });
        }
        let total = q.token_total as f64;
        for (n, &count) in self.usage.iter_mut().zip(&q.assignment_counts) {
            *n = (gamma * *n + (1.0 - gamma) * count as f64 / total).clamp(0.0, 1.0);
        }
        Ok(())
    }

    /// Reinitialization weight of every code for the current usage.
    pub fn reinit_factors(&self, gamma: f64) -> Vec<f64> {
        let k = self.size() as f64;
        self.usage
            .iter()
            .map(|n| (-n * k * REINIT_SHARPNESS / (1.0 - gamma)).exp().clamp(0.0, 1.0))
            .collect()
    }

    /// Pulls each code toward its batch centroid by its reinitialization
    /// factor. Returns the factors used.
    pub fn reinit_codes(&mut self, q: &QuantizeResult, gamma: f64) -> Result<Vec<f64>> {
        if q.token_total == 0 {
            return Err(Error::EmptyInput("reinit on an empty batch".into()));
        }
        let alphas = self.reinit_factors(gamma);
        let centroids = feature_centroids(self, q)?;
        for (k, (&a, target)) in alphas.iter().zip(centroids.iter_rows()).enumerate() {
            if a == 0.0 {
                continue;
            }
            for (v, &t) in self.codes.row_mut(k).iter_mut().zip(target) {
                *v = (1.0 - a) * *v + a * t;
            }
        }
        Ok(alphas)
    }
}

/// Per-code reinitialization targets: the mean of the normalized features
/// assigned to the code, or for an unassigned code the normalized batch
/// feature most similar to it.
pub fn feature_centroids(cb: &Codebook, q: &QuantizeResult) -> Result<Matrix> {
    let k = cb.size();
    let d = cb.dim();
    let mut sums = Matrix::zeros(k, d);
    for (t, &idx) in q.indices.iter().enumerate() {
        axpy(1.0, q.normed_features.row(t), sums.row_mut(idx));
    }
    for code in 0..k {
        let n = q.assignment_counts[code];
        if n > 0 {
            let inv = 1.0 / n as f64;
            sums.row_mut(code).iter_mut().for_each(|v| *v *= inv);
        } else {
            let v = l2_normalize(cb.codes.row(code))?;
            let mut best = 0;
            let mut best_sim = f64::NEG_INFINITY;
            for (t, u) in q.normed_features.iter_rows().enumerate() {
                let s = dot(u, &v);
                if s > best_sim {
                    best_sim = s;
                    best = t;
                }
            }
            sums.row_mut(code).copy_from_slice(q.normed_features.row(best));
        }
    }
    Ok(sums)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeResult {
    pub indices: Vec<usize>,
    /// ℓ2(e_t), one row per token.
    pub normed_features: Matrix,
    /// ℓ2(v_{z_t}), one row per token.
    pub normed_codes: Matrix,
    pub assignment_counts: Vec<usize>,
    pub token_total: usize,
}

/// Assigns each token to the code of highest cosine similarity, lowest index
/// on ties.
pub fn quantize(features: &Matrix, cb: &Codebook) -> Result<QuantizeResult> {
    if features.cols() != cb.dim() {
        return Err(Error::DimensionMismatch { expected: cb.dim(), found: features.cols() });
    }
    if !features.is_finite() {
        return Err(Error::NonFinite("features".into()));
    }
    let normed_book = normalize_rows(cb.codes())?;
    let normed_features = normalize_rows(features)?;
    let t = features.rows();
    let mut indices = Vec::with_capacity(t);
    let mut counts = vec![0usize; cb.size()];
    let mut normed_codes = Matrix::zeros(t, cb.dim());
    for (i, u) in normed_features.iter_rows().enumerate() {
        let mut best = 0;
        let mut best_sim = f64::NEG_INFINITY;
        for (k, v) in normed_book.iter_rows().enumerate() {
            let s = dot(u, v);
            if s > best_sim {
                best_sim = s;
                best = k;
            }
        }
        indices.push(best);
        counts[best] += 1;
        normed_codes.row_mut(i).copy_from_slice(normed_book.row(best));
    }
    Ok(QuantizeResult { indices, normed_features, normed_codes, assignment_counts: counts, token_total: t })
}

pub(crate) fn normalize_rows(m: &Matrix) -> Result<Matrix> {
    let mut out = m.zeros_like();
    for (i, r) in m.iter_rows().enumerate() {
        out.row_mut(i).copy_from_slice(&l2_normalize(r)?);
    }
    Ok(out)
}

/// Value and gradients of the straight-through VQ loss.
#[derive(Debug, Clone)]
pub struct VqLoss {
    pub value: f64,
    /// `Σ ‖ℓ2(e) − sg[ℓ2(v)]‖²`; the only term that reaches the features.
    pub commitment: f64,
    /// `Σ ‖sg[ℓ2(e)] − ℓ2(v)‖²`; the only term that reaches the codes.
    pub codebook_term: f64,
    /// Gradient w.r.t. the raw features `e`.
    pub grad_features: Matrix,
    /// Gradient w.r.t. the raw code vectors.
    pub grad_codes: Matrix,
}

pub fn vq_loss(features: &Matrix, cb: &Codebook, q: &QuantizeResult) -> Result<VqLoss> {
    check_batch(features, cb, q)?;
    let mut grad_features = features.zeros_like();
    let mut grad_codes = cb.codes().zeros_like();
    let mut commitment = 0.0;
    let mut codebook_term = 0.0;
    for (t, &k) in q.indices.iter().enumerate() {
        let ue = q.normed_features.row(t);
        let uv = q.normed_codes.row(t);
        let diff: Vec<f64> = ue.iter().zip(uv).map(|(a, b)| a - b).collect();
        let sq = dot(&diff, &diff);
        commitment += sq;
        codebook_term += sq;
        let g_ue: Vec<f64> = diff.iter().map(|d| 2.0 * d).collect();
        grad_features
            .row_mut(t)
            .copy_from_slice(&l2_normalize_backward(features.row(t), &g_ue));
        let g_uv: Vec<f64> = diff.iter().map(|d| -2.0 * d).collect();
        axpy(1.0, &l2_normalize_backward(cb.codes().row(k), &g_uv), grad_codes.row_mut(k));
    }
    Ok(VqLoss { value: commitment + codebook_term, commitment, codebook_term, grad_features, grad_codes })
}

/// Backward pass of the straight-through quantizer: the quantized output is
/// `ℓ2(v_z)` forward, but gradients pass to `e` as if it were `ℓ2(e)`.
pub fn straight_through_backward(features: &Matrix, grad_quantized: &Matrix) -> Matrix {
    let mut out = features.zeros_like();
    for t in 0..features.rows() {
        out.row_mut(t)
            .copy_from_slice(&l2_normalize_backward(features.row(t), grad_quantized.row(t)));
    }
    out
}

#[derive(Debug, Clone)]
pub struct ContrastiveLoss {
    pub value: f64,
    pub grad_features: Matrix,
    pub grad_codes: Matrix,
    /// Tokens that had at least one negative.
    pub active_tokens: usize,
}

/// Negatives for token `t`: batch tokens assigned to another code, capped at
/// `max_negatives` by uniform subsampling. Depends only on the assignment and
/// the seed, never on feature values.
pub fn select_negatives(indices: &[usize], t: usize, max_negatives: usize, seed: u64) -> Vec<usize> {
    let k = indices[t];
    let pool: Vec<usize> = (0..indices.len()).filter(|&j| indices[j] != k).collect();
    if pool.len() <= max_negatives {
        return pool;
    }
    let mut rng = seed::rng(seed, &[tag::NEGATIVES, t as u64]);
    let mut picked: Vec<usize> =
        sample(&mut rng, pool.len(), max_negatives).into_iter().map(|i| pool[i]).collect();
    picked.sort_unstable();
    picked
}

/// InfoNCE-style loss pulling each token toward its assigned code and away
/// from features assigned elsewhere. The positive term is part of the
/// denominator. Averaged over all tokens; tokens without negatives add 0.
pub fn contrastive_loss(
    features: &Matrix,
    cb: &Codebook,
    q: &QuantizeResult,
    tau: f64,
    max_negatives: usize,
    seed: u64,
) -> Result<ContrastiveLoss> {
    check_batch(features, cb, q)?;
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature {tau} must be positive")));
    }
    let normed_book = normalize_rows(cb.codes())?;
    let code_norms: Vec<f64> = cb.codes().iter_rows().map(crate::linalg::norm).collect();
    let feat_norms: Vec<f64> = features.iter_rows().map(crate::linalg::norm).collect();
    let t_total = q.token_total;
    let scale = 1.0 / t_total as f64;
    let mut grad_features = features.zeros_like();
    let mut grad_codes = cb.codes().zeros_like();
    let mut value = 0.0;
    let mut active = 0;
    for t in 0..t_total {
        let negs = select_negatives(&q.indices, t, max_negatives, seed);
        if negs.is_empty() {
            continue;
        }
        active += 1;
        let k = q.indices[t];
        let uv = normed_book.row(k);
        let members: Vec<usize> = std::iter::once(t).chain(negs.iter().copied()).collect();
        let sims: Vec<f64> = members.iter().map(|&j| dot(q.normed_features.row(j), uv)).collect();
        let logits: Vec<f64> = sims.iter().map(|s| s / tau).collect();
        let lse = log_sum_exp(&logits);
        value += lse - logits[0];
        for (slot, (&j, &s)) in members.iter().zip(&sims).enumerate() {
            let p = (logits[slot] - lse).exp();
            let ds = if slot == 0 { p - 1.0 } else { p } / tau * scale;
            let ue = q.normed_features.row(j);
            // d cos(v, e)/dv = (ue - s uv)/|v|, symmetric for e.
            let gv = grad_codes.row_mut(k);
            for ((g, a), b) in gv.iter_mut().zip(ue).zip(uv) {
                *g += ds * (a - s * b) / code_norms[k];
            }
            let ge = grad_features.row_mut(j);
            for ((g, a), b) in ge.iter_mut().zip(uv).zip(ue) {
                *g += ds * (a - s * b) / feat_norms[j];
            }
        }
    }
    Ok(ContrastiveLoss { value: value * scale, grad_features, grad_codes, active_tokens: active })
}

/// Total codebook objective: tokenizer loss plus weighted contrastive loss.
pub fn codebook_total_loss(l_tok: f64, l_contra: f64, lambda_contra: f64) -> f64 {
    l_tok + lambda_contra * l_contra
}

fn check_batch(features: &Matrix, cb: &Codebook, q: &QuantizeResult) -> Result<()> {
    if features.cols() != cb.dim() {
        return Err(Error::DimensionMismatch { expected: cb.dim(), found: features.cols() });
    }
    if features.rows() != q.token_total || q.indices.len() != q.token_total {
        return Err(Error::DimensionMismatch { expected: q.token_total, found: features.rows() });
    }
    if let Some(&bad) = q.indices.iter().find(|&&i| i >= cb.size()) {
        return Err(Error::invalid(format!("code index {bad} out of range")));
    }
    Ok(())
}
