//! Task-relevant stratified sampling.
//!
//! The task pool is clustered (k-means over pooled clip embeddings), a
//! query set is drawn from every cluster in proportion to its size, and the
//! queries pull their nearest clips out of the general pool and the
//! accumulated adaptive pool. The union, together with a stratified share of
//! the task pool itself, is the next stage's training set.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::Rng;

use crate::corpus::{CorpusPool, FeatureClip};
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, sq_dist, Matrix};
use crate::seed::{self, tag};

#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    pub k: usize,
    pub centroids: Matrix,
    /// Cluster id of each clip, in pool order.
    pub assignment: Vec<usize>,
    pub sizes: Vec<usize>,
    pub iterations: usize,
}

impl Clustering {
    /// Pool indices of the clips in cluster `c`, ascending.
    pub fn members(&self, c: usize) -> Vec<usize> {
        self.assignment.iter().enumerate().filter(|(_, &a)| a == c).map(|(i, _)| i).collect()
    }
}

/// k-means over pooled clip embeddings: seeded k-means++ seeding, then Lloyd
/// iterations until the assignment stops changing or `max_iters` is reached.
pub fn cluster_corpus(pool: &CorpusPool, k: usize, seed: u64, max_iters: usize) -> Result<Clustering> {
    kmeans(pool.pooled(), pool.dim(), k, seed, max_iters)
}

pub fn kmeans(points: &[Vec<f64>], dim: usize, k: usize, seed: u64, max_iters: usize) -> Result<Clustering> {
    let n = points.len();
    if n == 0 {
        return Err(Error::EmptyInput("cannot cluster an empty pool".into()));
    }
    if k == 0 || k > n {
        return Err(Error::invalid(format!("cluster count {k} must be in 1..={n}")));
    }
    let mut rng = seed::rng(seed, &[tag::SAMPLER, 0]);
    let mut centroids = Matrix::zeros(k, dim);
    centroids.row_mut(0).copy_from_slice(&points[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, centroids.row(0))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(&points[pick]);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centroids.row(c)));
        }
    }

    let mut assignment = vec![usize::MAX; n];
    let mut iterations = 0;
    for _ in 0..max_iters.max(1) {
        iterations += 1;
        let mut changed = false;
        for (i, p) in points.iter().enumerate() {
            let a = nearest(&centroids, p);
            if a != assignment[i] {
                assignment[i] = a;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Matrix::zeros(k, dim);
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignment) {
            axpy(1.0, p, sums.row_mut(a));
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
    }
    let mut sizes = vec![0usize; k];
    for &a in &assignment {
        sizes[a] += 1;
    }
    Ok(Clustering { k, centroids, assignment, sizes, iterations })
}

fn nearest(centroids: &Matrix, p: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, row) in centroids.iter_rows().enumerate() {
        let d = sq_dist(p, row);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    best
}

/// Largest-remainder apportionment of `total` proportional to `sizes`.
/// Remainder ties go to the lower index.
pub fn allocate_strata(sizes: &[usize], total: usize) -> Result<Vec<usize>> {
    let sum: usize = sizes.iter().sum();
    if total > sum {
        return Err(Error::Infeasible(format!("cannot draw {total} from strata totalling {sum}")));
    }
    if total == 0 {
        return Ok(vec![0; sizes.len()]);
    }
    let (t, s) = (total as u128, sum as u128);
    let mut alloc: Vec<usize> = sizes.iter().map(|&n| (t * n as u128 / s) as usize).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    let rem = |i: usize| t * sizes[i] as u128 % s;
    order.sort_by(|&a, &b| rem(b).cmp(&rem(a)).then(a.cmp(&b)));
    let mut left = total - alloc.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if alloc[i] < sizes[i] {
            alloc[i] += 1;
            left -= 1;
        }
    }
    Ok(alloc)
}

/// Uniform sampling without replacement inside each stratum. Returns pool
/// indices, grouped by stratum and ascending within each.
pub fn sample_queries(clustering: &Clustering, allocations: &[usize], seed: u64) -> Result<Vec<usize>> {
    if allocations.len() != clustering.k {
        return Err(Error::DimensionMismatch { expected: clustering.k, found: allocations.len() });
    }
    let mut out = Vec::with_capacity(allocations.iter().sum());
    for (c, &want) in allocations.iter().enumerate() {
        let members = clustering.members(c);
        if want > members.len() {
            return Err(Error::Infeasible(format!(
                "stratum {c} has {} clips, {want} requested",
                members.len()
            )));
        }
        let mut rng = seed::rng(seed, &[tag::SAMPLER, 1, c as u64]);
        let mut picked: Vec<usize> =
            sample(&mut rng, members.len(), want).into_iter().map(|i| members[i]).collect();
        picked.sort_unstable();
        out.extend(picked);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Retrieved {
    pub index: usize,
    pub id: String,
    pub score: f64,
}

/// Relevance of `candidate`: its best cosine similarity to any query.
pub fn query_score(candidate: &[f64], queries: &[Vec<f64>]) -> f64 {
    queries.iter().map(|q| dot(candidate, q)).fold(f64::NEG_INFINITY, f64::max)
}

/// Top-`m` clips of `pool` by [`query_score`], ties by ascending id.
pub fn retrieve(queries: &[Vec<f64>], pool: &CorpusPool, m: usize) -> Result<Vec<Retrieved>> {
    retrieve_excluding(queries, pool, m, &HashSet::new())
}

/// As [`retrieve`], skipping clips whose id is in `exclude`.
pub fn retrieve_excluding(
    queries: &[Vec<f64>],
    pool: &CorpusPool,
    m: usize,
    exclude: &HashSet<String>,
) -> Result<Vec<Retrieved>> {
    if pool.is_empty() {
        return Err(Error::EmptyInput(format!("pool {} is empty", pool.name())));
    }
    if queries.is_empty() {
        return Err(Error::EmptyInput("no queries".into()));
    }
    let mut scored: Vec<Retrieved> = pool
        .clips()
        .iter()
        .zip(pool.pooled())
        .enumerate()
        .filter(|(_, (c, _))| !exclude.contains(&c.id))
        .map(|(i, (c, p))| Retrieved { index: i, id: c.id.clone(), score: query_score(p, queries) })
        .collect();
    if m > scored.len() {
        return Err(Error::Infeasible(format!(
            "{m} clips requested from {} eligible in {}",
            scored.len(),
            pool.name()
        )));
    }
    scored.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
    scored.truncate(m);
    Ok(scored)
}

/// Share of the budget given to each source. Must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ratios {
    pub task: f64,
    pub general: f64,
    pub adaptive: f64,
}

impl Default for Ratios {
    fn default() -> Self {
        Self { task: 0.5, general: 0.25, adaptive: 0.25 }
    }
}

impl Ratios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.task, self.general, self.adaptive];
        if parts.iter().any(|r| !(*r >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("ratios {parts:?} must be non-negative and sum to 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingConfig {
    pub budget: usize,
    pub ratios: Ratios,
    pub clusters: usize,
    /// Query-set size as a fraction of the task pool.
    pub query_fraction: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl SamplingConfig {
    pub fn new(budget: usize, seed: u64) -> Self {
        Self { budget, ratios: Ratios::default(), clusters: 8, query_fraction: 0.1, max_iters: 100, seed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Task,
    General,
    Adaptive,
}

impl Source {
    pub fn as_str(&self) -> &'static str {
        match self {
            Source::Task => "task",
            Source::General => "general",
            Source::Adaptive => "adaptive",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub source: Source,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveDataset {
    pub pool: CorpusPool,
    pub manifest: Vec<ManifestEntry>,
    /// Pool indices of the task queries.
    pub queries: Vec<usize>,
    pub stage: u32,
}

impl AdaptiveDataset {
    pub fn count(&self, source: Source) -> usize {
        self.manifest.iter().filter(|e| e.source == source).count()
    }

    /// One `id<TAB>source<TAB>score` line per clip.
    pub fn manifest_text(&self) -> String {
        let mut s = String::new();
        for e in &self.manifest {
            let _ = writeln!(s, "{}\t{}\t{:.6}", e.id, e.source.as_str(), e.score);
        }
        s
    }
}

/// Assembles the next stage's training set from the task pool plus clips
/// retrieved from the general and adaptive pools.
pub fn build_adaptive_dataset(
    task: &CorpusPool,
    general: &CorpusPool,
    adaptive: &CorpusPool,
    cfg: &SamplingConfig,
    stage: u32,
) -> Result<AdaptiveDataset> {
    cfg.ratios.validate()?;
    if task.is_empty() {
        return Err(Error::EmptyInput("task pool is empty".into()));
    }
    let b = cfg.budget;
    let mut n_general = (cfg.ratios.general * b as f64 + 1e-9).floor() as usize;
    let mut n_adaptive = (cfg.ratios.adaptive * b as f64 + 1e-9).floor() as usize;
    if adaptive.is_empty() {
        n_general += n_adaptive;
        n_adaptive = 0;
    }
    let n_task = b
        .checked_sub(n_general + n_adaptive)
        .ok_or_else(|| Error::Infeasible("ratios exceed budget".into()))?;
    if n_task > task.len() {
        return Err(Error::Infeasible(format!("{n_task} task clips requested, pool has {}", task.len())));
    }

    let k = cfg.clusters.min(task.len());
    let clustering = cluster_corpus(task, k, seed::derive(cfg.seed, &[stage as u64, 0]), cfg.max_iters)?;
    let n_queries = ((cfg.query_fraction * task.len() as f64).ceil() as usize).clamp(1, task.len());
    let queries = sample_queries(
        &clustering,
        &allocate_strata(&clustering.sizes, n_queries)?,
        seed::derive(cfg.seed, &[stage as u64, 1]),
    )?;
    let query_vecs: Vec<Vec<f64>> = queries.iter().map(|&i| task.pooled()[i].clone()).collect();

    let task_pick = sample_queries(
        &clustering,
        &allocate_strata(&clustering.sizes, n_task)?,
        seed::derive(cfg.seed, &[stage as u64, 2]),
    )?;

    let mut clips: Vec<FeatureClip> = Vec::with_capacity(b);
    let mut manifest = Vec::with_capacity(b);
    let mut taken: HashSet<String> = HashSet::with_capacity(b);
    for &i in &task_pick {
        let c = task.clip(i);
        taken.insert(c.id.clone());
        manifest.push(ManifestEntry {
            id: c.id.clone(),
            source: Source::Task,
            score: query_score(&task.pooled()[i], &query_vecs),
        });
        clips.push(c.clone());
    }

    // Adaptive first so that any shortfall there can fall back to general.
    let mut adaptive_hits = Vec::new();
    if n_adaptive > 0 {
        let eligible = adaptive.clips().iter().filter(|c| !taken.contains(&c.id)).count();
        let m = n_adaptive.min(eligible);
        n_general += n_adaptive - m;
        adaptive_hits = retrieve_excluding(&query_vecs, adaptive, m, &taken)?;
        taken.extend(adaptive_hits.iter().map(|r| r.id.clone()));
    }
    if n_general > 0 {
        for r in retrieve_excluding(&query_vecs, general, n_general, &taken)? {
            taken.insert(r.id.clone());
            clips.push(general.clip(r.index).clone());
            manifest.push(ManifestEntry { id: r.id, source: Source::General, score: r.score });
        }
    }
    for r in adaptive_hits {
        clips.push(adaptive.clip(r.index).clone());
        manifest.push(ManifestEntry { id: r.id, source: Source::Adaptive, score: r.score });
    }
    debug_assert_eq!(clips.len(), b);
    let pool = CorpusPool::new(format!("{}-stage{stage}", task.name()), task.dim(), clips)?;
    Ok(AdaptiveDataset { pool, manifest, queries, stage })
}
