//! Training configuration and its flat `key = value` text form.

use std::fmt::Write as _;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::sampler::{Ratios, SamplingConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda_reg: f64,
    pub mu_reg: f64,
    pub lambda_contra: f64,
    pub gamma: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mask_ratio: f64,
    pub codebook_size: usize,
    pub dim: usize,
    pub hidden: usize,
    pub max_negatives: usize,
    pub seed: u64,
    /// Soft reinitialization of underused codes.
    pub reinit: bool,
    /// Contrastive code loss.
    pub contrastive: bool,
    /// Build each stage's data by stratified retrieval instead of using the
    /// raw domain pool.
    pub sampling: bool,
    /// Stage dataset size; 0 means "same as the domain pool".
    pub budget: usize,
    pub ratio_task: f64,
    pub ratio_general: f64,
    pub ratio_adaptive: f64,
    pub clusters: usize,
    pub query_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_reg: 1e6,
            mu_reg: 1e6,
            lambda_contra: 10.0,
            gamma: 0.9,
            tau: 0.3,
            learning_rate: 1e-4,
            epochs: 10,
            batch_size: 32,
            mask_ratio: 0.75,
            codebook_size: 64,
            dim: 16,
            hidden: 32,
            max_negatives: 256,
            seed: 0,
            reinit: true,
            contrastive: true,
            sampling: true,
            budget: 0,
            ratio_task: 0.5,
            ratio_general: 0.25,
            ratio_adaptive: 0.25,
            clusters: 8,
            query_fraction: 0.1,
        }
    }
}

/// Named ablations matching the method comparison: the full method, without
/// the clustered codebook, without stratified sampling, without both, and
/// plain resumed training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Full,
    NoCodebook,
    NoSampling,
    NoCodebookNoSampling,
    Dcpt,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Full, Variant::NoCodebook, Variant::NoSampling, Variant::NoCodebookNoSampling, Variant::Dcpt];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoCodebook => "no-codebook",
            Variant::NoSampling => "no-sampling",
            Variant::NoCodebookNoSampling => "no-both",
            Variant::Dcpt => "dcpt",
        }
    }

    pub fn apply(&self, cfg: &TrainConfig) -> TrainConfig {
        let mut c = cfg.clone();
        match self {
            Variant::Full => {}
            Variant::NoCodebook => {
                c.reinit = false;
                c.contrastive = false;
            }
            Variant::NoSampling => c.sampling = false,
            Variant::NoCodebookNoSampling => {
                c.reinit = false;
                c.contrastive = false;
                c.sampling = false;
            }
            Variant::Dcpt => c = c.dcpt(),
        }
        c
    }
}

impl TrainConfig {
    /// Direct continual pre-training: no sampling, no codebook mechanisms, no
    /// distillation anchors.
    pub fn dcpt(&self) -> Self {
        Self {
            reinit: false,
            contrastive: false,
            sampling: false,
            lambda_reg: 0.0,
            mu_reg: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be positive, got {v}")))
            }
        };
        let nonneg = |v: f64, name: &str| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::invalid(format!("{name} must be non-negative, got {v}")))
            }
        };
        nonneg(self.lambda_reg, "lambda_reg")?;
        nonneg(self.mu_reg, "mu_reg")?;
        nonneg(self.lambda_contra, "lambda_contra")?;
        pos(self.tau, "tau")?;
        pos(self.learning_rate, "learning_rate")?;
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::invalid(format!("gamma must be in (0, 1), got {}", self.gamma)));
        }
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return Err(Error::invalid(format!("mask_ratio must be in (0, 1), got {}", self.mask_ratio)));
        }
        for (v, name) in [
            (self.epochs, "epochs"),
            (self.batch_size, "batch_size"),
            (self.codebook_size, "codebook_size"),
            (self.dim, "dim"),
            (self.hidden, "hidden"),
            (self.clusters, "clusters"),
        ] {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        pos(self.query_fraction, "query_fraction")?;
        self.ratios().validate()
    }

    pub fn ratios(&self) -> Ratios {
        Ratios { task: self.ratio_task, general: self.ratio_general, adaptive: self.ratio_adaptive }
    }

    pub fn sampling_config(&self, budget: usize) -> SamplingConfig {
        SamplingConfig {
            budget,
            ratios: self.ratios(),
            clusters: self.clusters,
            query_fraction: self.query_fraction,
            max_iters: 100,
            seed: self.seed,
        }
    }

    /// Canonical text form: every key, fixed order, values printed so that
    /// parsing them back gives identical bits.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lambda_reg", fmt_f64(self.lambda_reg)),
            ("mu_reg", fmt_f64(self.mu_reg)),
            ("lambda_contra", fmt_f64(self.lambda_contra)),
            ("gamma", fmt_f64(self.gamma)),
            ("tau", fmt_f64(self.tau)),
            ("learning_rate", fmt_f64(self.learning_rate)),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("mask_ratio", fmt_f64(self.mask_ratio)),
            ("codebook_size", self.codebook_size.to_string()),
            ("dim", self.dim.to_string()),
            ("hidden", self.hidden.to_string()),
            ("max_negatives", self.max_negatives.to_string()),
            ("seed", self.seed.to_string()),
            ("reinit", self.reinit.to_string()),
            ("contrastive", self.contrastive.to_string()),
            ("sampling", self.sampling.to_string()),
            ("budget", self.budget.to_string()),
            ("ratio_task", fmt_f64(self.ratio_task)),
            ("ratio_general", fmt_f64(self.ratio_general)),
            ("ratio_adaptive", fmt_f64(self.ratio_adaptive)),
            ("clusters", self.clusters.to_string()),
            ("query_fraction", fmt_f64(self.query_fraction)),
        ]
    }

    /// SHA-256 of [`TrainConfig::to_text`].
    pub fn digest(&self) -> [u8; 32] {
        digest_text(&self.to_text())
    }

    /// Sets one key from its text value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "lambda_reg" => self.lambda_reg = parse(key, v)?,
            "mu_reg" => self.mu_reg = parse(key, v)?,
            "lambda_contra" => self.lambda_contra = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "tau" => self.tau = parse(key, v)?,
            "learning_rate" | "lr" => self.learning_rate = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "mask_ratio" => self.mask_ratio = parse(key, v)?,
            "codebook_size" => self.codebook_size = parse(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "max_negatives" => self.max_negatives = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "reinit" => self.reinit = parse(key, v)?,
            "contrastive" => self.contrastive = parse(key, v)?,
            "sampling" => self.sampling = parse(key, v)?,
            "budget" => self.budget = parse(key, v)?,
            "ratio_task" => self.ratio_task = parse(key, v)?,
            "ratio_general" => self.ratio_general = parse(key, v)?,
            "ratio_adaptive" => self.ratio_adaptive = parse(key, v)?,
            "clusters" => self.clusters = parse(key, v)?,
            "query_fraction" => self.query_fraction = parse(key, v)?,
            other => return Err(Error::Malformed(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`. `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Malformed(format!("config line {}: expected key = value", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }
}

pub(crate) fn digest_text(text: &str) -> [u8; 32] {
    let d = Sha256::digest(text.as_bytes());
    let mut out = [0u8; 32];
    out.copy_from_slice(&d);
    out
}

fn fmt_f64(v: f64) -> String {
    // Debug formatting is the shortest string that round-trips.
    format!("{v:?}")
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| Error::Malformed(format!("config key {key}: {e}")))
}
