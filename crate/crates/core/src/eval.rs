//! Evaluation of a trained state: retention probe-mAP on held-out general
//! data, per-domain probes, and codebook health.

use rand::seq::SliceRandom;

use crate::codebook::quantize;
use crate::corpus::{ClipLabels, CorpusPool};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::metrics::{
    codebook_health, forgetting_rate, linear_probe, mean_average_precision, DomainProbe, EvalReport, LinearProbe, ProbeConfig,
};
use crate::seed::{self, tag};
use crate::trainer::Learner;

/// Fraction of each labelled pool held out for probe testing.
pub const TEST_FRACTION: f64 = 0.3;

/// A labelled pool with a fixed train/test split.
#[derive(Debug, Clone)]
pub struct ProbeTask {
    pub pool: CorpusPool,
    pub labels: ClipLabels,
    pub classes: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ProbeTask {
    pub fn new(pool: CorpusPool, labels: ClipLabels, seed: u64) -> Result<Self> {
        if labels.len() != pool.len() {
            return Err(Error::DimensionMismatch { expected: pool.len(), found: labels.len() });
        }
        if pool.len() < 4 {
            return Err(Error::EmptyInput(format!("pool {} is too small to split", pool.name())));
        }
        let classes = labels.iter().flatten().max().map_or(0, |m| m + 1);
        let (train, test) = split(pool.len(), seed);
        Ok(Self { pool, labels, classes, train, test })
    }

    fn rows(&self, emb: &Matrix, idx: &[usize]) -> Matrix {
        let mut m = Matrix::zeros(idx.len(), emb.cols());
        for (r, &i) in idx.iter().enumerate() {
            m.row_mut(r).copy_from_slice(emb.row(i));
        }
        m
    }

    fn multi_hot(&self, idx: &[usize]) -> Vec<Vec<bool>> {
        idx.iter()
            .map(|&i| (0..self.classes).map(|c| self.labels[i].contains(&c)).collect())
            .collect()
    }

    fn primary(&self, idx: &[usize]) -> Result<Vec<usize>> {
        idx.iter()
            .map(|&i| {
                self.labels[i]
                    .first()
                    .copied()
                    .ok_or_else(|| Error::Malformed(format!("clip {} has no label", self.pool.clip(i).id)))
            })
            .collect()
    }

    /// Fits the multi-label retention head on `learner`'s embeddings of the
    /// training split.
    pub fn fit_head(&self, learner: &Learner, seed: u64) -> Result<LinearProbe> {
        let emb = learner.embed(&self.pool)?;
        LinearProbe::fit_multilabel(&self.rows(&emb, &self.train), &self.multi_hot(&self.train), seed, &ProbeConfig::default())
    }

    /// mAP (percent) of a fixed head on `learner`'s embeddings of the held-out
    /// split.
    pub fn retention(&self, learner: &Learner, head: &LinearProbe) -> Result<f64> {
        let emb = learner.embed(&self.pool)?;
        mean_average_precision(&head.scores(&self.rows(&emb, &self.test)), &self.multi_hot(&self.test))
    }

    /// Single-label probe on each clip's first label.
    pub fn probe(&self, learner: &Learner, seed: u64) -> Result<DomainProbe> {
        let emb = learner.embed(&self.pool)?;
        let s = linear_probe(
            &self.rows(&emb, &self.train),
            &self.primary(&self.train)?,
            &self.rows(&emb, &self.test),
            &self.primary(&self.test)?,
            self.classes,
            seed,
        )?;
        Ok(DomainProbe { domain: self.pool.name().to_string(), accuracy: s.accuracy, macro_f1: s.macro_f1 })
    }
}

/// Seeded shuffle split: the first `TEST_FRACTION` of the permutation is the
/// test set. Both halves come back sorted.
pub fn split(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, &[tag::PROBE, 0]));
    let n_test = ((n as f64 * TEST_FRACTION).round() as usize).clamp(1, n - 1);
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    (train, test)
}

/// The retention reference: a head fitted on the base state's embeddings and
/// the mAP it scores on them.
#[derive(Debug, Clone)]
pub struct Baseline {
    pub head: LinearProbe,
    pub map: f64,
}

pub fn retention_baseline(base: &Learner, retention: &ProbeTask) -> Result<Baseline> {
    let head = retention.fit_head(base, seed::derive(base.config.seed, &[tag::PROBE, 1]))?;
    let map = retention.retention(base, &head)?;
    Ok(Baseline { head, map })
}

/// Evaluates `learner`. Retention is the base head's mAP on the current
/// embeddings, so representation drift that breaks the old head counts as
/// forgetting; the domain probes are refitted.
pub fn evaluate(
    learner: &Learner,
    label: &str,
    retention: &ProbeTask,
    domains: &[ProbeTask],
    baseline: &Baseline,
) -> Result<EvalReport> {
    let probe_seed = seed::derive(learner.config.seed, &[tag::PROBE, 1]);
    let map = retention.retention(learner, &baseline.head)?;
    let baseline = baseline.map;
    let probes = domains.iter().map(|d| d.probe(learner, probe_seed)).collect::<Result<Vec<_>>>()?;
    let mut assignments = Vec::new();
    for task in std::iter::once(retention).chain(domains) {
        for c in task.pool.clips() {
            let e = learner.tokenizer.infer(&c.features, None)?.reps;
            assignments.extend(quantize(&e, &learner.codebook)?.indices);
        }
    }
    Ok(EvalReport {
        label: label.to_string(),
        stage: learner.stage,
        retention_map: map,
        baseline_map: baseline,
        forgetting_rate: forgetting_rate(baseline, map)?,
        probes,
        codebook: codebook_health(learner.codebook.size(), &assignments)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_partitions() {
        let (train, test) = split(20, 3);
        assert_eq!(test.len(), 6);
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
        assert_eq!(split(20, 3), (train, test));
    }
}
