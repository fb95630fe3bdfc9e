//! Desk-scale forgetting experiment: base pre-training on a general pool,
//! one adaptation stage on a shifted domain, retention measured by probe mAP
//! on held-out general clips.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::corpus::{generate_domain_with_labels, ClipLabels, CorpusPool, DomainSpec};
use crate::error::Result;
use crate::eval::{evaluate, retention_baseline, ProbeTask};
use crate::metrics::EvalReport;
use crate::seed::{self, tag};
use crate::trainer::{Learner, StageSummary, TrainConfig, Variant};

#[derive(Debug, Clone)]
pub struct Scenario {
    pub general: (CorpusPool, ClipLabels),
    pub domain: (CorpusPool, ClipLabels),
}

/// Shape of the synthetic scenario.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScenarioShape {
    pub dim: usize,
    pub general_clusters: usize,
    pub general_clips: usize,
    pub domain_clusters: usize,
    pub domain_clips: usize,
    pub t_min: usize,
    pub t_max: usize,
    /// Length of the offset between the two domains' cluster centres.
    pub shift: f64,
    pub spread: f64,
    pub covscale: f64,
}

impl Default for ScenarioShape {
    fn default() -> Self {
        Self {
            dim: 16,
            general_clusters: 8,
            general_clips: 160,
            domain_clusters: 6,
            domain_clips: 96,
            t_min: 6,
            t_max: 10,
            shift: 6.0,
            spread: 1.5,
            covscale: 0.5,
        }
    }
}

fn means(rng: &mut impl Rng, k: usize, d: usize, spread: f64, offset: &[f64]) -> Vec<Vec<f64>> {
    (0..k)
        .map(|_| {
            (0..d)
                .map(|j| offset[j] + spread * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

/// General pool (multi-hot, two components per clip) and a domain pool whose
/// centres are displaced by `shift` along a random direction.
pub fn desk_scenario(shape: &ScenarioShape, seed: u64) -> Result<Scenario> {
    let d = shape.dim;
    let mut rng = seed::rng(seed, &[tag::GENERATE, u64::MAX]);
    let zero = vec![0.0; d];
    let general_means = means(&mut rng, shape.general_clusters, d, shape.spread, &zero);
    let dir: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    let n = crate::linalg::norm(&dir);
    let offset: Vec<f64> = dir.iter().map(|x| x / n * shape.shift).collect();
    let domain_means = means(&mut rng, shape.domain_clusters, d, shape.spread, &offset);
    let general = generate_domain_with_labels(&DomainSpec {
        name: "general".into(),
        cluster_covscale: vec![shape.covscale; general_means.len()],
        cluster_means: general_means,
        clip_count: shape.general_clips,
        t_min: shape.t_min,
        t_max: shape.t_max,
        seed: seed::derive(seed, &[tag::GENERATE, 1]),
        clusters_per_clip: 2,
    })?;
    let domain = generate_domain_with_labels(&DomainSpec {
        name: "shifted".into(),
        cluster_covscale: vec![shape.covscale; domain_means.len()],
        cluster_means: domain_means,
        clip_count: shape.domain_clips,
        t_min: shape.t_min,
        t_max: shape.t_max,
        seed: seed::derive(seed, &[tag::GENERATE, 2]),
        clusters_per_clip: 1,
    })?;
    Ok(Scenario { general, domain })
}

/// Configuration used by the desk-scale experiments. The published learning
/// rate barely moves a freshly initialized toy net in a few epochs, so these
/// runs use a larger one.
pub fn desk_config(seed: u64) -> TrainConfig {
    TrainConfig { learning_rate: 1e-2, epochs: 10, batch_size: 16, seed, ..TrainConfig::default() }
}

#[derive(Debug, Clone)]
pub struct VariantResult {
    pub variant: Variant,
    pub report: EvalReport,
    pub summary: StageSummary,
}

#[derive(Debug, Clone)]
pub struct AblationRun {
    pub baseline: EvalReport,
    pub results: Vec<VariantResult>,
}

impl AblationRun {
    pub fn fr(&self, v: Variant) -> Option<f64> {
        self.results.iter().find(|r| r.variant == v).map(|r| r.report.forgetting_rate)
    }
}

/// Pre-trains once on the general pool, then adapts a copy of the base state
/// under each variant and evaluates retention against the base.
pub fn run_ablation(scenario: &Scenario, config: &TrainConfig, variants: &[Variant]) -> Result<AblationRun> {
    let probe_seed = seed::derive(config.seed, &[tag::PROBE, 2]);
    let retention = ProbeTask::new(scenario.general.0.clone(), scenario.general.1.clone(), probe_seed)?;
    let domain_task = ProbeTask::new(scenario.domain.0.clone(), scenario.domain.1.clone(), probe_seed)?;
    let domains = [domain_task];
    let (base, base_out) = Learner::pretrain(config.clone(), &scenario.general.0)?;
    let reference = retention_baseline(&base, &retention)?;
    let baseline = evaluate(&base, "base", &retention, &domains, &reference)?;
    let mut results = Vec::with_capacity(variants.len());
    for &v in variants {
        let mut l = base.clone();
        l.config = v.apply(config);
        let out = l.adapt(&scenario.domain.0, &scenario.general.0, &base_out.adaptive)?;
        let report = evaluate(&l, v.name(), &retention, &domains, &reference)?;
        results.push(VariantResult { variant: v, report, summary: out.summary });
    }
    Ok(AblationRun { baseline, results })
}

/// Two-regime stream for the codebook collapse experiment: regime A is the
/// general pool of the desk scenario, regime B the shifted domain.
pub fn collapse_config(seed: u64, mechanisms: bool) -> TrainConfig {
    TrainConfig {
        reinit: mechanisms,
        contrastive: mechanisms,
        sampling: false,
        codebook_size: 64,
        ..desk_config(seed)
    }
}

/// Epoch-level codebook perplexity over a run that trains on regime A, then
/// switches to regime B. One value per tokenizer epoch, A first.
pub fn collapse_run(scenario: &Scenario, config: &TrainConfig) -> Result<Vec<f64>> {
    let (mut learner, base) = Learner::pretrain(config.clone(), &scenario.general.0)?;
    let out = learner.adapt(&scenario.domain.0, &scenario.general.0, &base.adaptive)?;
    Ok(base
        .records
        .iter()
        .chain(&out.records)
        .filter(|r| r.name == "epoch_perplexity")
        .map(|r| r.value)
        .collect())
}
