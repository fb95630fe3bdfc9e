//! Retention and plasticity metrics, codebook diagnostics and linear probes.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, log_sum_exp, Matrix};
use crate::seed::{self, tag};

/// Relative drop of `current` against `baseline`, in percent. Negative when
/// the current model scores higher.
pub fn forgetting_rate(map_baseline: f64, map_current: f64) -> Result<f64> {
    if !(map_baseline > 0.0) {
        return Err(Error::invalid(format!("baseline mAP {map_baseline} must be positive")));
    }
    Ok((map_baseline - map_current) / map_baseline * 100.0)
}

/// Rounds half away from zero at `decimals` places.
pub fn round_to(x: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (x * s).round() / s
}

/// Average precision of one ranking, in [0, 1]. `None` without positives.
///
/// Clips are ranked by descending score with a stable sort, so equal scores
/// keep their input order.
pub fn average_precision(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| acc / hits as f64)
}

/// Macro-averaged average precision over classes with at least one
/// positive, in percent. `scores` and `labels` are clip × class.
pub fn mean_average_precision(scores: &Matrix, labels: &[Vec<bool>]) -> Result<f64> {
    if labels.len() != scores.rows() {
        return Err(Error::DimensionMismatch { expected: scores.rows(), found: labels.len() });
    }
    if let Some(row) = labels.iter().find(|r| r.len() != scores.cols()) {
        return Err(Error::DimensionMismatch { expected: scores.cols(), found: row.len() });
    }
    let mut total = 0.0;
    let mut classes = 0usize;
    for c in 0..scores.cols() {
        let col: Vec<f64> = (0..scores.rows()).map(|i| scores.get(i, c)).collect();
        let pos: Vec<bool> = labels.iter().map(|r| r[c]).collect();
        if let Some(ap) = average_precision(&col, &pos) {
            total += ap;
            classes += 1;
        }
    }
    if classes == 0 {
        return Err(Error::EmptyInput("no class has a positive label".into()));
    }
    Ok(total / classes as f64 * 100.0)
}

/// Macro-F1 over every class that occurs in either `predictions` or
/// `labels`, in percent.
pub fn macro_f1(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: labels.len(), found: predictions.len() });
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("no predictions".into()));
    }
    let classes: BTreeSet<usize> = predictions.iter().chain(labels).copied().collect();
    let mut sum = 0.0;
    for &c in &classes {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for (&p, &y) in predictions.iter().zip(labels) {
            match (p == c, y == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
        if tp > 0 {
            sum += 2.0 * tp as f64 / (2 * tp + fp + fneg) as f64;
        }
    }
    Ok(sum / classes.len() as f64 * 100.0)
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::DimensionMismatch { expected: labels.len(), found: predictions.len() });
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("no predictions".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64 * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CodebookHealth {
    /// Fraction of codes with at least one assignment.
    pub utilization: f64,
    /// `exp(entropy)` of the empirical assignment distribution.
    pub perplexity: f64,
}

pub fn codebook_health(codebook_size: usize, assignments: &[usize]) -> Result<CodebookHealth> {
    if assignments.is_empty() {
        return Err(Error::EmptyInput("assignment log is empty".into()));
    }
    let mut counts = vec![0usize; codebook_size];
    for &a in assignments {
        *counts
            .get_mut(a)
            .ok_or_else(|| Error::invalid(format!("code {a} out of range")))? += 1;
    }
    let n = assignments.len() as f64;
    let used = counts.iter().filter(|&&c| c > 0).count();
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum();
    Ok(CodebookHealth { utilization: used as f64 / codebook_size as f64, perplexity: entropy.exp() })
}

/// How the probe turns scores into a loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeKind {
    /// Softmax over classes, one label per example.
    Multiclass,
    /// Independent sigmoid per class, multi-hot labels.
    Multilabel,
}

/// Linear classifier on frozen features. Inputs are standardized with the
/// training-set statistics before the affine map.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub kind: ProbeKind,
    pub weights: Matrix,
    pub bias: Vec<f64>,
    mean: Vec<f64>,
    scale: Vec<f64>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    pub tolerance: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { learning_rate: 0.5, max_iters: 500, tolerance: 1e-6, weight_decay: 1e-4 }
    }
}

impl LinearProbe {
    /// Fits a softmax probe by full-batch gradient descent.
    pub fn fit_multiclass(x: &Matrix, y: &[usize], classes: usize, seed: u64, cfg: &ProbeConfig) -> Result<Self> {
        if y.len() != x.rows() {
            return Err(Error::DimensionMismatch { expected: x.rows(), found: y.len() });
        }
        if y.iter().any(|&c| c >= classes) {
            return Err(Error::invalid("label out of range"));
        }
        let distinct: BTreeSet<usize> = y.iter().copied().collect();
        if distinct.len() < 2 {
            return Err(Error::invalid("probe training set needs at least two classes"));
        }
        let targets: Vec<Vec<f64>> = y
            .iter()
            .map(|&c| (0..classes).map(|k| if k == c { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::fit(ProbeKind::Multiclass, x, &targets, classes, seed, cfg)
    }

    /// Fits one-vs-rest sigmoid probes for multi-hot labels.
    pub fn fit_multilabel(x: &Matrix, y: &[Vec<bool>], seed: u64, cfg: &ProbeConfig) -> Result<Self> {
        if y.len() != x.rows() {
            return Err(Error::DimensionMismatch { expected: x.rows(), found: y.len() });
        }
        let classes = y.first().map_or(0, Vec::len);
        if classes == 0 || y.iter().any(|r| r.len() != classes) {
            return Err(Error::invalid("multi-hot labels must share a positive width"));
        }
        let distinct: BTreeSet<&Vec<bool>> = y.iter().collect();
        if distinct.len() < 2 {
            return Err(Error::invalid("probe training set needs at least two label sets"));
        }
        let targets: Vec<Vec<f64>> =
            y.iter().map(|r| r.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).collect();
        Self::fit(ProbeKind::Multilabel, x, &targets, classes, seed, cfg)
    }

    fn fit(kind: ProbeKind, x: &Matrix, targets: &[Vec<f64>], classes: usize, seed: u64, cfg: &ProbeConfig) -> Result<Self> {
        let n = x.rows();
        let d = x.cols();
        if n == 0 {
            return Err(Error::EmptyInput("probe training set is empty".into()));
        }
        if !x.is_finite() {
            return Err(Error::NonFinite("probe features".into()));
        }
        let mean = x.row_mean();
        let mut scale = vec![0.0; d];
        for r in x.iter_rows() {
            for (s, (v, m)) in scale.iter_mut().zip(r.iter().zip(&mean)) {
                *s += (v - m) * (v - m);
            }
        }
        for s in &mut scale {
            let sd = (*s / n as f64).sqrt();
            *s = if sd > 1e-12 { 1.0 / sd } else { 0.0 };
        }
        let mut rng = seed::rng(seed, &[tag::PROBE]);
        let weights =
            Matrix::from_vec(classes, d, (0..classes * d).map(|_| rng.random_range(-0.01..0.01)).collect())?;
        let mut probe = Self { kind, weights, bias: vec![0.0; classes], mean, scale, iterations: 0 };
        let z: Vec<Vec<f64>> = x.iter_rows().map(|r| probe.standardize(r)).collect();

        let mut prev = f64::INFINITY;
        for it in 0..cfg.max_iters {
            let mut gw = Matrix::zeros(classes, d);
            let mut gb = vec![0.0; classes];
            let mut loss = 0.0;
            for (zi, ti) in z.iter().zip(targets) {
                let s = probe.raw_scores(zi);
                let (l, resid) = match kind {
                    ProbeKind::Multiclass => {
                        let lse = log_sum_exp(&s);
                        let l: f64 = s.iter().zip(ti).map(|(v, t)| t * (lse - v)).sum();
                        let r: Vec<f64> = s.iter().zip(ti).map(|(v, t)| (v - lse).exp() - t).collect();
                        (l, r)
                    }
                    ProbeKind::Multilabel => {
                        let l: f64 = s.iter().zip(ti).map(|(v, t)| softplus(*v) - t * v).sum();
                        let r: Vec<f64> = s.iter().zip(ti).map(|(v, t)| sigmoid(*v) - t).collect();
                        (l, r)
                    }
                };
                loss += l;
                for (c, rc) in resid.iter().enumerate() {
                    gb[c] += rc;
                    for (g, v) in gw.row_mut(c).iter_mut().zip(zi) {
                        *g += rc * v;
                    }
                }
            }
            let inv = 1.0 / n as f64;
            let wd = cfg.weight_decay;
            loss = loss * inv + 0.5 * wd * dot(probe.weights.as_slice(), probe.weights.as_slice());
            for (w, g) in probe.weights.as_mut_slice().iter_mut().zip(gw.as_slice()) {
                *w -= cfg.learning_rate * (g * inv + wd * *w);
            }
            for (b, g) in probe.bias.iter_mut().zip(&gb) {
                *b -= cfg.learning_rate * g * inv;
            }
            probe.iterations = it + 1;
            if !loss.is_finite() {
                return Err(Error::NonFinite("probe loss".into()));
            }
            if (prev - loss).abs() < cfg.tolerance {
                break;
            }
            prev = loss;
        }
        Ok(probe)
    }

    fn standardize(&self, r: &[f64]) -> Vec<f64> {
        r.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) * s).collect()
    }

    fn raw_scores(&self, z: &[f64]) -> Vec<f64> {
        self.weights.iter_rows().zip(&self.bias).map(|(w, b)| dot(w, z) + b).collect()
    }

    /// Class scores for every row of `x`.
    pub fn scores(&self, x: &Matrix) -> Matrix {
        let rows: Vec<Vec<f64>> = x.iter_rows().map(|r| self.raw_scores(&self.standardize(r))).collect();
        let mut m = Matrix::zeros(x.rows(), self.bias.len());
        for (i, r) in rows.iter().enumerate() {
            m.row_mut(i).copy_from_slice(r);
        }
        m
    }

    pub fn predict(&self, x: &Matrix) -> Vec<usize> {
        let s = self.scores(x);
        s.iter_rows()
            .map(|r| {
                let mut best = 0;
                for (c, v) in r.iter().enumerate() {
                    if *v > r[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeScore {
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// Fits a multiclass probe on the training split and scores the test split.
pub fn linear_probe(
    train_x: &Matrix,
    train_y: &[usize],
    test_x: &Matrix,
    test_y: &[usize],
    classes: usize,
    seed: u64,
) -> Result<ProbeScore> {
    let probe = LinearProbe::fit_multiclass(train_x, train_y, classes, seed, &ProbeConfig::default())?;
    let pred = probe.predict(test_x);
    Ok(ProbeScore { accuracy: accuracy(&pred, test_y)?, macro_f1: macro_f1(&pred, test_y)? })
}

/// Fits a multi-label probe on the training split and returns test mAP.
pub fn retention_map(
    train_x: &Matrix,
    train_y: &[Vec<bool>],
    test_x: &Matrix,
    test_y: &[Vec<bool>],
    seed: u64,
) -> Result<f64> {
    let probe = LinearProbe::fit_multilabel(train_x, train_y, seed, &ProbeConfig::default())?;
    mean_average_precision(&probe.scores(test_x), test_y)
}

/// One evaluation of one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub stage: u32,
    pub retention_map: f64,
    pub baseline_map: f64,
    pub forgetting_rate: f64,
    pub probes: Vec<DomainProbe>,
    pub codebook: CodebookHealth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainProbe {
    pub domain: String,
    pub accuracy: f64,
    pub macro_f1: f64,
}

/// One line of an evaluation file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub label: String,
    pub stage: u32,
    pub metric: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<String>,
    pub value: f64,
}

impl EvalReport {
    pub fn records(&self) -> Vec<MetricRecord> {
        let rec = |metric: &str, domain: Option<&str>, value: f64| MetricRecord {
            label: self.label.clone(),
            stage: self.stage,
            metric: metric.into(),
            domain: domain.map(str::to_string),
            value,
        };
        let mut out = vec![
            rec("retention_map", None, self.retention_map),
            rec("baseline_map", None, self.baseline_map),
            rec("forgetting_rate", None, self.forgetting_rate),
            rec("codebook_utilization", None, self.codebook.utilization),
            rec("codebook_perplexity", None, self.codebook.perplexity),
        ];
        for p in &self.probes {
            out.push(rec("probe_accuracy", Some(&p.domain), p.accuracy));
            out.push(rec("probe_macro_f1", Some(&p.domain), p.macro_f1));
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        self.records()
            .iter()
            .map(|r| serde_json::to_string(r).expect("metric record serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut recs = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let r: MetricRecord = serde_json::from_str(line)
                .map_err(|e| Error::Malformed(format!("eval line {}: {e}", n + 1)))?;
            recs.push(r);
        }
        let first = recs.first().ok_or_else(|| Error::EmptyInput("evaluation file is empty".into()))?;
        let (label, stage) = (first.label.clone(), first.stage);
        let get = |m: &str| {
            recs.iter()
                .find(|r| r.metric == m)
                .map(|r| r.value)
                .ok_or_else(|| Error::Malformed(format!("missing metric {m}")))
        };
        let mut probes: Vec<DomainProbe> = Vec::new();
        for r in &recs {
            let Some(domain) = &r.domain else { continue };
            let idx = match probes.iter().position(|p| &p.domain == domain) {
                Some(i) => i,
                None => {
                    probes.push(DomainProbe { domain: domain.clone(), accuracy: f64::NAN, macro_f1: f64::NAN });
                    probes.len() - 1
                }
            };
            match r.metric.as_str() {
                "probe_accuracy" => probes[idx].accuracy = r.value,
                "probe_macro_f1" => probes[idx].macro_f1 = r.value,
                _ => {}
            }
        }
        Ok(Self {
            label,
            stage,
            retention_map: get("retention_map")?,
            baseline_map: get("baseline_map")?,
            forgetting_rate: get("forgetting_rate")?,
            probes,
            codebook: CodebookHealth {
                utilization: get("codebook_utilization")?,
                perplexity: get("codebook_perplexity")?,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fr_examples() {
        assert!((round_to(forgetting_rate(34.8, 34.9).unwrap(), 1) + 0.3).abs() < 1e-12);
        assert!((round_to(forgetting_rate(34.8, 14.7).unwrap(), 2) - 57.76).abs() < 1e-12);
        assert_eq!(forgetting_rate(12.0, 12.0).unwrap(), 0.0);
        assert!(forgetting_rate(0.0, 1.0).is_err());
    }

    #[test]
    fn ap_examples() {
        let scores = Matrix::from_vec(3, 1, vec![0.9, 0.5, 0.1]).unwrap();
        let labels = vec![vec![true], vec![false], vec![true]];
        let m = mean_average_precision(&scores, &labels).unwrap();
        assert!((m - 500.0 / 6.0).abs() < 1e-9);
        let perfect = vec![vec![true], vec![true], vec![false]];
        assert!((mean_average_precision(&scores, &perfect).unwrap() - 100.0).abs() < 1e-12);
        let none = vec![vec![false]; 3];
        assert!(mean_average_precision(&scores, &none).is_err());
    }

    #[test]
    fn f1_examples() {
        assert_eq!(macro_f1(&[0, 1, 2], &[0, 1, 2]).unwrap(), 100.0);
        let n = 5;
        let labels: Vec<usize> = (0..2 * n).map(|i| i / n).collect();
        let f = macro_f1(&vec![0; 2 * n], &labels).unwrap();
        assert!((f - 100.0 / 3.0).abs() < 1e-9);
        assert!(macro_f1(&[], &[]).is_err());
    }

    #[test]
    fn health_examples() {
        let uniform: Vec<usize> = (0..64).collect();
        let h = codebook_health(64, &uniform).unwrap();
        assert_eq!(h.utilization, 1.0);
        assert!((h.perplexity - 64.0).abs() < 1e-9);
        let h = codebook_health(8, &[3; 10]).unwrap();
        assert_eq!(h.utilization, 1.0 / 8.0);
        assert!((h.perplexity - 1.0).abs() < 1e-12);
        assert!(codebook_health(8, &[]).is_err());
    }

    #[test]
    fn eval_report_round_trips() {
        let r = EvalReport {
            label: "full".into(),
            stage: 2,
            retention_map: 61.5,
            baseline_map: 62.0,
            forgetting_rate: forgetting_rate(62.0, 61.5).unwrap(),
            probes: vec![DomainProbe { domain: "music".into(), accuracy: 90.0, macro_f1: 88.5 }],
            codebook: CodebookHealth { utilization: 0.5, perplexity: 20.0 },
        };
        assert_eq!(EvalReport::from_jsonl(&r.to_jsonl()).unwrap(), r);
    }
}
