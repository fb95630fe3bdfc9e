//! Dual-source self-distillation losses.
//!
//! Tokenizer side: alignment of the estimator with the teacher, and an anchor
//! keeping normalized encoder outputs near the frozen encoder's. Model side:
//! masked-prediction cross-entropy plus the same normalized-distance anchor on
//! representations. Every function returns its value together with the
//! gradient w.r.t. the trainable input; the other input is a constant.

use crate::error::{Error, Result};
use crate::linalg::{cosine, cosine_grad_a, l2_normalize, l2_normalize_backward, log_sum_exp, Matrix};

#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Matrix,
}

/// Negated sum of row-wise cosine similarities between estimator output `o`
/// and teacher output `teacher`.
pub fn alignment_loss(o: &Matrix, teacher: &Matrix) -> Result<LossGrad> {
    same_shape(o, teacher)?;
    let mut grad = o.zeros_like();
    let mut value = 0.0;
    for t in 0..o.rows() {
        value -= cosine(o.row(t), teacher.row(t))?;
        for (g, c) in grad.row_mut(t).iter_mut().zip(cosine_grad_a(o.row(t), teacher.row(t))) {
            *g = -c;
        }
    }
    Ok(LossGrad { value, grad })
}

/// `weight * Σ_t ‖ℓ2(x_t) − ℓ2(anchor_t)‖²` with gradient w.r.t. `x`.
///
/// A zero weight short-circuits to zero without touching the rows.
pub fn normalized_anchor_loss(x: &Matrix, anchor: &Matrix, weight: f64) -> Result<LossGrad> {
    same_shape(x, anchor)?;
    if !(weight >= 0.0) {
        return Err(Error::invalid(format!("regularization weight {weight} must be >= 0")));
    }
    let mut grad = x.zeros_like();
    if weight == 0.0 {
        return Ok(LossGrad { value: 0.0, grad });
    }
    let mut value = 0.0;
    for t in 0..x.rows() {
        let u = l2_normalize(x.row(t))?;
        let ua = l2_normalize(anchor.row(t))?;
        let diff: Vec<f64> = u.iter().zip(&ua).map(|(a, b)| a - b).collect();
        value += diff.iter().map(|d| d * d).sum::<f64>();
        let g_u: Vec<f64> = diff.iter().map(|d| 2.0 * weight * d).collect();
        grad.row_mut(t).copy_from_slice(&l2_normalize_backward(x.row(t), &g_u));
    }
    Ok(LossGrad { value: weight * value, grad })
}

/// Keeps the current tokenizer encoder output `e` near the frozen encoder's `e_bar`.
pub fn tokenizer_reg_loss(e: &Matrix, e_bar: &Matrix, lambda_reg: f64) -> Result<LossGrad> {
    normalized_anchor_loss(e, e_bar, lambda_reg)
}

pub fn tokenizer_total_loss(l1: f64, l2: f64, l3: f64) -> f64 {
    l1 + l2 + l3
}

/// Model-side batch: logits at masked positions plus full-length representations.
#[derive(Debug, Clone)]
pub struct ModelBatchOutputs {
    /// One row of K scores per masked position, in `mask` order.
    pub logits: Matrix,
    pub targets: Vec<usize>,
    pub mask: Vec<usize>,
    pub student_reps: Matrix,
    pub frozen_reps: Matrix,
}

#[derive(Debug, Clone)]
pub struct MamLoss {
    pub value: f64,
    pub cross_entropy: f64,
    pub distill: f64,
    pub grad_logits: Matrix,
    pub grad_reps: Matrix,
}

/// Masked-prediction cross-entropy over masked positions plus
/// `mu_reg`-weighted distillation over every position.
pub fn mam_loss(m: &ModelBatchOutputs, mu_reg: f64) -> Result<MamLoss> {
    let k = m.logits.cols();
    if m.logits.rows() != m.targets.len() || m.mask.len() != m.targets.len() {
        return Err(Error::DimensionMismatch { expected: m.mask.len(), found: m.logits.rows() });
    }
    if let Some(&bad) = m.targets.iter().find(|&&z| z >= k) {
        return Err(Error::invalid(format!("target {bad} out of range for {k} classes")));
    }
    if let Some(&bad) = m.mask.iter().find(|&&p| p >= m.student_reps.rows()) {
        return Err(Error::invalid(format!("masked position {bad} out of range")));
    }
    if !m.logits.is_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    let mut grad_logits = m.logits.zeros_like();
    let mut ce = 0.0;
    for (i, &z) in m.targets.iter().enumerate() {
        let row = m.logits.row(i);
        let lse = log_sum_exp(row);
        ce += lse - row[z];
        for (g, &l) in grad_logits.row_mut(i).iter_mut().zip(row) {
            *g = (l - lse).exp();
        }
        grad_logits.row_mut(i)[z] -= 1.0;
    }
    let d = normalized_anchor_loss(&m.student_reps, &m.frozen_reps, mu_reg)?;
    Ok(MamLoss {
        value: ce + d.value,
        cross_entropy: ce,
        distill: d.value,
        grad_logits,
        grad_reps: d.grad,
    })
}

fn same_shape(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows() != b.rows() {
        return Err(Error::DimensionMismatch { expected: a.rows(), found: b.rows() });
    }
    if a.cols() != b.cols() {
        return Err(Error::DimensionMismatch { expected: a.cols(), found: b.cols() });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn alignment_extremes() {
        let o = m(&[&[1.0, 2.0], &[-3.0, 0.5], &[0.2, 0.2]]);
        assert!((alignment_loss(&o, &o).unwrap().value + 3.0).abs() < 1e-12);
        let perp = m(&[&[-2.0, 1.0], &[0.5, 3.0], &[0.2, -0.2]]);
        assert!(alignment_loss(&o, &perp).unwrap().value.abs() < 1e-12);
        assert!(alignment_loss(&m(&[&[0.0, 0.0]]), &m(&[&[1.0, 0.0]])).is_err());
    }

    #[test]
    fn reg_loss_examples() {
        let e = m(&[&[1.0, 2.0, 3.0]]);
        assert_eq!(tokenizer_reg_loss(&e, &e, 1e6).unwrap().value, 0.0);
        let l = tokenizer_reg_loss(&m(&[&[2.0, 0.0]]), &m(&[&[0.0, 5.0]]), 1.0).unwrap();
        assert!((l.value - 2.0).abs() < 1e-15);
        assert!(tokenizer_reg_loss(&e, &e, -1.0).is_err());
    }

    #[test]
    fn total_is_sum() {
        assert_eq!(tokenizer_total_loss(0.0, 0.0, 0.0), 0.0);
        assert_eq!(tokenizer_total_loss(-3.0, 4.0, 2.0), 3.0);
    }

    #[test]
    fn uniform_logits() {
        let reps = m(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 1.0], &[2.0, -1.0]]);
        let out = ModelBatchOutputs {
            logits: Matrix::zeros(3, 4),
            targets: vec![0, 3, 1],
            mask: vec![0, 1, 3],
            student_reps: reps.clone(),
            frozen_reps: reps,
        };
        let l = mam_loss(&out, 1e6).unwrap();
        assert!((l.value - 3.0 * 4f64.ln()).abs() < 1e-12);
        assert!((l.value - 4.1589).abs() < 1e-4);
    }

    #[test]
    fn confident_logits_drive_ce_to_zero() {
        let reps = m(&[&[1.0, 0.0]]);
        let mut prev = f64::INFINITY;
        for margin in [1.0, 10.0, 40.0] {
            let out = ModelBatchOutputs {
                logits: m(&[&[margin, 0.0, 0.0]]),
                targets: vec![0],
                mask: vec![0],
                student_reps: reps.clone(),
                frozen_reps: reps.clone(),
            };
            let l = mam_loss(&out, 1.0).unwrap().value;
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-15);
    }

    #[test]
    fn target_out_of_range() {
        let reps = m(&[&[1.0, 0.0]]);
        let out = ModelBatchOutputs {
            logits: Matrix::zeros(1, 2),
            targets: vec![2],
            mask: vec![0],
            student_reps: reps.clone(),
            frozen_reps: reps,
        };
        assert!(mam_loss(&out, 0.0).is_err());
    }
}
