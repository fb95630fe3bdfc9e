//! Synthetic multi-domain clip corpora and the SNRF pool file format.
//!
//! A domain is a Gaussian mixture over token features. Each clip is assigned a
//! set of mixture components (its labels) and every token is drawn from one of
//! them. Pools are immutable once built; growing a pool produces a new one.
//!
//! SNRF layout, all integers unsigned 32-bit little endian:
//!
//! ```text
//! "SNRF" | version | clip count | D
//! per clip: id len | id (UTF-8) | domain len | domain (UTF-8) | T | T*D f32 LE, row major
//! ```

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm, Matrix, MIN_NORM};
use crate::seed::{self, tag};

pub const POOL_MAGIC: [u8; 4] = *b"SNRF";
pub const POOL_VERSION: u32 = 1;

/// A clip: `T` token-feature vectors of dimension `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureClip {
    pub id: String,
    pub domain: String,
    pub features: Matrix,
}

impl FeatureClip {
    pub fn new(id: impl Into<String>, domain: impl Into<String>, features: Matrix) -> Result<Self> {
        let clip = Self { id: id.into(), domain: domain.into(), features };
        if clip.features.rows() == 0 {
            return Err(Error::invalid(format!("clip {} has no tokens", clip.id)));
        }
        if !clip.features.is_finite() {
            return Err(Error::NonFinite(format!("clip {}", clip.id)));
        }
        Ok(clip)
    }

    #[inline]
    pub fn tokens(&self) -> usize {
        self.features.rows()
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    /// ℓ2-normalized token mean. A clip whose mean vanishes pools to the zero
    /// vector, which has similarity 0 with everything.
    pub fn pooled(&self) -> Vec<f64> {
        let mean = self.features.row_mean();
        let n = norm(&mean);
        if n < MIN_NORM {
            return vec![0.0; mean.len()];
        }
        mean.iter().map(|v| v / n).collect()
    }
}

/// A named, immutable collection of clips with cached pooled embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusPool {
    name: String,
    dim: usize,
    clips: Vec<FeatureClip>,
    pooled: Vec<Vec<f64>>,
}

impl CorpusPool {
    pub fn new(name: impl Into<String>, dim: usize, clips: Vec<FeatureClip>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(clips.len());
        for c in &clips {
            if c.dim() != dim {
                return Err(Error::DimensionMismatch { expected: dim, found: c.dim() });
            }
            if !seen.insert(c.id.as_str()) {
                return Err(Error::invalid(format!("duplicate clip id {}", c.id)));
            }
        }
        let pooled = clips.iter().map(FeatureClip::pooled).collect();
        Ok(Self { name: name.into(), dim, clips, pooled })
    }

    pub fn empty(name: impl Into<String>, dim: usize) -> Self {
        Self { name: name.into(), dim, clips: Vec::new(), pooled: Vec::new() }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }

    pub fn clips(&self) -> &[FeatureClip] {
        &self.clips
    }

    pub fn pooled(&self) -> &[Vec<f64>] {
        &self.pooled
    }

    pub fn clip(&self, i: usize) -> &FeatureClip {
        &self.clips[i]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.clips.iter().position(|c| c.id == id)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index_of(id).is_some()
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// New pool holding `self`'s clips followed by every clip of `extra` whose
    /// id is not already present.
    pub fn extended(&self, extra: &[FeatureClip]) -> Result<Self> {
        let have: HashSet<&str> = self.clips.iter().map(|c| c.id.as_str()).collect();
        let mut clips = self.clips.clone();
        let mut added = HashSet::new();
        for c in extra {
            if !have.contains(c.id.as_str()) && added.insert(c.id.clone()) {
                clips.push(c.clone());
            }
        }
        Self::new(self.name.clone(), self.dim, clips)
    }

    /// Pool restricted to the clips at `indices`, in that order.
    pub fn subset(&self, name: impl Into<String>, indices: &[usize]) -> Result<Self> {
        let clips = indices.iter().map(|&i| self.clips[i].clone()).collect();
        Self::new(name, self.dim, clips)
    }
}

/// Parameters of one synthetic domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    /// One mean per mixture component; all of the same dimension.
    pub cluster_means: Vec<Vec<f64>>,
    /// Isotropic covariance scale per component (covariance = scale * I).
    pub cluster_covscale: Vec<f64>,
    pub clip_count: usize,
    pub t_min: usize,
    pub t_max: usize,
    pub seed: u64,
    /// Components mixed within one clip. 1 gives single-label clips.
    #[serde(default = "one")]
    pub clusters_per_clip: usize,
}

fn one() -> usize {
    1
}

impl DomainSpec {
    pub fn dim(&self) -> usize {
        self.cluster_means.first().map_or(0, Vec::len)
    }

    pub fn cluster_count(&self) -> usize {
        self.cluster_means.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cluster_means.is_empty() {
            return Err(Error::invalid("domain needs at least one cluster"));
        }
        let d = self.dim();
        if d == 0 {
            return Err(Error::invalid("cluster means must be non-empty"));
        }
        if let Some(m) = self.cluster_means.iter().find(|m| m.len() != d) {
            return Err(Error::DimensionMismatch { expected: d, found: m.len() });
        }
        if self.cluster_covscale.len() != self.cluster_means.len() {
            return Err(Error::DimensionMismatch {
                expected: self.cluster_means.len(),
                found: self.cluster_covscale.len(),
            });
        }
        if self.cluster_covscale.iter().any(|s| !(*s >= 0.0) || !s.is_finite()) {
            return Err(Error::invalid("covscale must be finite and non-negative"));
        }
        if self.cluster_means.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cluster means".into()));
        }
        if self.clip_count == 0 {
            return Err(Error::invalid("clip count must be positive"));
        }
        if self.t_min == 0 || self.t_max < self.t_min {
            return Err(Error::invalid(format!("bad token range {}..={}", self.t_min, self.t_max)));
        }
        if self.clusters_per_clip == 0 || self.clusters_per_clip > self.cluster_count() {
            return Err(Error::invalid("clusters_per_clip must be in 1..=cluster count"));
        }
        Ok(())
    }
}

/// Multi-hot ground truth for a generated pool: the mixture components each
/// clip was drawn from, sorted ascending.
pub type ClipLabels = Vec<Vec<usize>>;

/// Generates the pool described by `spec`. Pure function of the spec.
pub fn generate_domain(spec: &DomainSpec) -> Result<CorpusPool> {
    generate_domain_with_labels(spec).map(|(p, _)| p)
}

pub fn generate_domain_with_labels(spec: &DomainSpec) -> Result<(CorpusPool, ClipLabels)> {
    spec.validate()?;
    let d = spec.dim();
    let k = spec.cluster_count();
    let width = digits(spec.clip_count);
    let mut assign_rng = seed::rng(spec.seed, &[tag::ASSIGN]);
    let mut clips = Vec::with_capacity(spec.clip_count);
    let mut labels = Vec::with_capacity(spec.clip_count);
    for c in 0..spec.clip_count {
        let t = assign_rng.random_range(spec.t_min..=spec.t_max);
        let mut comps = sample(&mut assign_rng, k, spec.clusters_per_clip).into_vec();
        comps.sort_unstable();
        // Token draws get their own stream per clip so that changing one clip's
        // length does not perturb the others.
        let mut rng = seed::rng(spec.seed, &[tag::GENERATE, c as u64]);
        let mut feats = Matrix::zeros(t, d);
        for i in 0..t {
            let comp = comps[rng.random_range(0..comps.len())];
            let std = spec.cluster_covscale[comp].sqrt();
            let mean = &spec.cluster_means[comp];
            for (j, slot) in feats.row_mut(i).iter_mut().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                *slot = mean[j] + std * z;
            }
        }
        let id = format!("{}-{:0width$}", spec.name, c, width = width);
        clips.push(FeatureClip::new(id, spec.name.clone(), feats)?);
        labels.push(comps);
    }
    Ok((CorpusPool::new(spec.name.clone(), d, clips)?, labels))
}

/// Generates several domains, requiring a common feature dimension.
pub fn generate_domains(specs: &[DomainSpec]) -> Result<Vec<(CorpusPool, ClipLabels)>> {
    let mut out: Vec<(CorpusPool, ClipLabels)> = Vec::with_capacity(specs.len());
    for s in specs {
        if let Some((first, _)) = out.first() {
            if s.dim() != first.dim() {
                return Err(Error::DimensionMismatch { expected: first.dim(), found: s.dim() });
            }
        }
        out.push(generate_domain_with_labels(s)?);
    }
    Ok(out)
}

fn digits(n: usize) -> usize {
    n.saturating_sub(1).max(1).to_string().len().max(4)
}

/// Serializes `pool` into SNRF bytes.
pub fn encode_pool(pool: &CorpusPool) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&POOL_MAGIC);
    put_u32(&mut buf, POOL_VERSION);
    put_u32(&mut buf, to_u32(pool.len(), "clip count")?);
    put_u32(&mut buf, to_u32(pool.dim(), "dimension")?);
    for c in pool.clips() {
        put_str(&mut buf, &c.id)?;
        put_str(&mut buf, &c.domain)?;
        put_u32(&mut buf, to_u32(c.tokens(), "token count")?);
        for &v in c.features.as_slice() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(buf)
}

/// Parses SNRF bytes. The pool is named `name`.
pub fn decode_pool(bytes: &[u8], name: &str) -> Result<CorpusPool> {
    let mut r = Reader::new(bytes);
    let magic = r.magic()?;
    if magic != POOL_MAGIC {
        return Err(Error::BadMagic { expected: POOL_MAGIC, found: magic });
    }
    let version = r.u32("version")?;
    if version != POOL_VERSION {
        return Err(Error::VersionMismatch { expected: POOL_VERSION, found: version });
    }
    let count = r.u32("clip count")? as usize;
    let dim = r.u32("dimension")? as usize;
    let mut clips = Vec::with_capacity(count.min(1 << 20));
    for i in 0..count {
        let id = r.string(&format!("clip {i} id"))?;
        let domain = r.string(&format!("clip {i} domain"))?;
        let t = r.u32(&format!("clip {i} token count"))? as usize;
        let n = t
            .checked_mul(dim)
            .ok_or_else(|| Error::Malformed(format!("clip {i} size overflows")))?;
        let raw = r.take(n.saturating_mul(4), &format!("clip {i} features"))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        clips.push(FeatureClip::new(id, domain, Matrix::from_vec(t, dim, data)?)?);
    }
    if !r.is_done() {
        return Err(Error::Malformed(format!("{} trailing bytes", r.remaining())));
    }
    CorpusPool::new(name, dim, clips)
}

pub fn save_pool(pool: &CorpusPool, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_pool(pool)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

/// Loads an SNRF file; the pool takes the file stem as its name.
pub fn load_pool(path: impl AsRef<Path>) -> Result<CorpusPool> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("pool");
    decode_pool(&bytes, name)
}

/// Writes the multi-hot labels of `pool` as `id<TAB>c1,c2,...` lines.
pub fn save_labels(pool: &CorpusPool, labels: &ClipLabels, path: impl AsRef<Path>) -> Result<()> {
    if labels.len() != pool.len() {
        return Err(Error::DimensionMismatch { expected: pool.len(), found: labels.len() });
    }
    let mut out = String::new();
    for (c, l) in pool.clips().iter().zip(labels) {
        let joined: Vec<String> = l.iter().map(usize::to_string).collect();
        out.push_str(&format!("{}\t{}\n", c.id, joined.join(",")));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Reads a labels file and orders it to match `pool`.
pub fn load_labels(pool: &CorpusPool, path: impl AsRef<Path>) -> Result<ClipLabels> {
    let text = fs::read_to_string(path)?;
    let mut by_id = std::collections::HashMap::new();
    for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| Error::Malformed(format!("labels line {}: missing tab", n + 1)))?;
        let labels = rest
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Malformed(format!("labels line {}: {e}", n + 1)))?;
        by_id.insert(id.to_string(), labels);
    }
    pool.clips()
        .iter()
        .map(|c| {
            by_id
                .get(&c.id)
                .cloned()
                .ok_or_else(|| Error::Malformed(format!("no labels for clip {}", c.id)))
        })
        .collect()
}

fn to_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::invalid(format!("{what} {n} does not fit in 32 bits")))
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_str(buf: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(buf, to_u32(s.len(), "string length")?);
    buf.extend_from_slice(s.as_bytes());
    Ok(())
}

/// Bounds-checked little-endian reader shared by the pool and checkpoint codecs.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated(format!("{what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self) -> Result<[u8; 4]> {
        let b = self.take(4, "magic")?;
        Ok([b[0], b[1], b[2], b[3]])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        self.u64(what).map(f64::from_bits)
    }

    pub(crate) fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Malformed(format!("{what}: invalid UTF-8")))
    }

    pub(crate) fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}
