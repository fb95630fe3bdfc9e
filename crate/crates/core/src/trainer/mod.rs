//! Continual adaptation loop.
//!
//! A stage runs in two sequential phases over the stage dataset:
//!
//! 1. **Tokenizer phase.** The tokenizer encoder, the estimator and the code
//!    vectors minimize alignment + VQ + anchor + weighted contrastive loss;
//!    after every batch the code usage EMA is updated and underused codes are
//!    pulled toward their batch centroids.
//! 2. **Model phase.** Targets are re-quantized with the updated tokenizer and
//!    the model minimizes masked-prediction cross-entropy plus the
//!    representation anchor.
//!
//! The frozen snapshot taken at stage start supplies every anchor and the
//! alignment teacher. Stage 0 is base pre-training: both anchors are off
//! because there is no previous model to stay close to.

mod adam;
mod checkpoint;
mod config;

use serde::{Deserialize, Serialize};
use rand::seq::SliceRandom;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{TrainConfig, Variant};

use crate::codebook::{contrastive_loss, quantize, straight_through_backward, vq_loss, Codebook, QuantizeResult};
use crate::corpus::{CorpusPool, FeatureClip};
use crate::distill::{alignment_loss, mam_loss, tokenizer_reg_loss, ModelBatchOutputs};
use crate::encoder::{make_mask, take_snapshot, MaskPlan, NetShape, Snapshot, ToyNet};
use crate::error::{Error, Result};
use crate::linalg::{axpy, l2_normalize, sq_dist, Matrix};
use crate::metrics::{codebook_health, CodebookHealth};
use crate::sampler::{build_adaptive_dataset, AdaptiveDataset};
use crate::seed::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Tokenizer,
    Model,
    Done,
}

impl Phase {
    fn code(self) -> u32 {
        match self {
            Phase::Tokenizer => 0,
            Phase::Model => 1,
            Phase::Done => 2,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(Phase::Tokenizer),
            1 => Ok(Phase::Model),
            2 => Ok(Phase::Done),
            _ => Err(Error::Malformed(format!("unknown phase code {c}"))),
        }
    }
}

/// Where a stage stands: the phase being run and the epochs it has finished.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Progress {
    pub phase: Phase,
    pub epoch: u32,
}

/// Per-group optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizers {
    pub tokenizer: AdamState,
    pub estimator: AdamState,
    pub codes: AdamState,
    pub model: AdamState,
}

/// One metric line of a stage report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: u32,
    pub phase: Phase,
    pub epoch: u32,
    pub batch: u32,
    pub name: String,
    pub value: f64,
}

pub fn records_to_jsonl(records: &[StageRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("stage record serializes") + "\n")
        .collect()
}

/// Losses and gradients of the tokenizer objective on one batch.
#[derive(Debug, Clone)]
pub struct TokenizerStep {
    pub alignment: f64,
    pub vq: f64,
    pub anchor: f64,
    pub contrastive: f64,
    pub total: f64,
    pub quantized: QuantizeResult,
    pub grad_tokenizer: Vec<f64>,
    pub grad_estimator: Vec<f64>,
    pub grad_codes: Matrix,
}

/// Losses and gradient of the model objective on one batch.
#[derive(Debug, Clone)]
pub struct ModelStep {
    pub cross_entropy: f64,
    pub distill: f64,
    pub total: f64,
    pub grad_model: Vec<f64>,
}

/// Summary emitted at the end of a stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub stage: u32,
    pub dataset_size: usize,
    pub final_tokenizer_loss: f64,
    pub final_model_loss: f64,
    pub codebook: CodebookHealth,
    /// Mean ‖ℓ2(e) − ℓ2(ē)‖ over dataset tokens.
    pub tokenizer_drift: f64,
    /// Mean ‖ℓ2(r) − ℓ2(r̄)‖ over dataset tokens.
    pub model_drift: f64,
}

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub dataset: CorpusPool,
    /// Present when the dataset came from stratified retrieval.
    pub retrieval: Option<AdaptiveDataset>,
    pub adaptive: CorpusPool,
    pub records: Vec<StageRecord>,
    pub summary: StageSummary,
}

/// All trainable state of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub config: TrainConfig,
    pub stage: u32,
    pub tokenizer: ToyNet,
    pub estimator: ToyNet,
    pub model: ToyNet,
    pub codebook: Codebook,
    pub optim: Optimizers,
    pub progress: Progress,
    pub snapshot: Option<Snapshot>,
}

impl Learner {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (d, h, k) = (config.dim, config.hidden, config.codebook_size);
        let s = config.seed;
        let tokenizer = ToyNet::init(NetShape { input: d, hidden: h, output: d, logits: 0 }, seed::derive(s, &[tag::INIT, 1]));
        let estimator = ToyNet::init(NetShape { input: d, hidden: h, output: d, logits: 0 }, seed::derive(s, &[tag::INIT, 2]));
        let model = ToyNet::init(NetShape { input: d, hidden: h, output: d, logits: k }, seed::derive(s, &[tag::INIT, 3]));
        let codebook = Codebook::random(k, d, seed::derive(s, &[tag::INIT, 4]))?;
        let optim = Optimizers {
            tokenizer: AdamState::new(tokenizer.params().len()),
            estimator: AdamState::new(estimator.params().len()),
            codes: AdamState::new(k * d),
            model: AdamState::new(model.params().len()),
        };
        Ok(Self {
            config,
            stage: 0,
            tokenizer,
            estimator,
            model,
            codebook,
            optim,
            progress: Progress { phase: Phase::Done, epoch: 0 },
            snapshot: None,
        })
    }

    /// Anchor weights in force: zero during base pre-training.
    pub fn anchor_weights(&self) -> (f64, f64) {
        if self.stage == 0 {
            (0.0, 0.0)
        } else {
            (self.config.lambda_reg, self.config.mu_reg)
        }
    }

    /// Freezes the current nets and codebook and resets progress to the start
    /// of `stage`.
    pub fn begin_stage(&mut self, stage: u32) {
        self.stage = stage;
        self.snapshot = Some(take_snapshot(&self.tokenizer, &self.model, &self.codebook, stage));
        self.progress = Progress { phase: Phase::Tokenizer, epoch: 0 };
    }

    fn snapshot(&self) -> Result<&Snapshot> {
        self.snapshot.as_ref().ok_or_else(|| Error::invalid("no snapshot: call begin_stage first"))
    }

    fn check_dim(&self, clip: &FeatureClip) -> Result<()> {
        if clip.dim() != self.config.dim {
            return Err(Error::DimensionMismatch { expected: self.config.dim, found: clip.dim() });
        }
        Ok(())
    }

    /// Tokenizer objective on a batch, with gradients for every trainable
    /// tokenizer-side tensor. Does not modify `self`.
    pub fn tokenizer_objective(&self, clips: &[&FeatureClip], negatives_seed: u64) -> Result<TokenizerStep> {
        let snap = self.snapshot()?;
        let (lambda_reg, _) = self.anchor_weights();
        let d = self.config.dim;
        let total_tokens: usize = clips.iter().map(|c| c.tokens()).sum();
        let mut enc = Matrix::zeros(total_tokens, d);
        let mut frozen = Matrix::zeros(total_tokens, d);
        let mut fwds = Vec::with_capacity(clips.len());
        let mut at = 0;
        for c in clips {
            self.check_dim(c)?;
            let f = self.tokenizer.forward(&c.features, None)?;
            let fe = snap.tokenizer().infer(&c.features, None)?;
            for t in 0..c.tokens() {
                enc.row_mut(at + t).copy_from_slice(f.reps.row(t));
                frozen.row_mut(at + t).copy_from_slice(fe.reps.row(t));
            }
            at += c.tokens();
            fwds.push(f);
        }

        let q = quantize(&enc, &self.codebook)?;
        let vq = vq_loss(&enc, &self.codebook, &q)?;
        let anchor = tokenizer_reg_loss(&enc, &frozen, lambda_reg)?;
        let mut grad_enc = vq.grad_features.clone();
        axpy(1.0, anchor.grad.as_slice(), grad_enc.as_mut_slice());
        let mut grad_codes = vq.grad_codes.clone();

        let mut contra_value = 0.0;
        if self.config.contrastive && self.config.lambda_contra > 0.0 {
            let lc = contrastive_loss(&enc, &self.codebook, &q, self.config.tau, self.config.max_negatives, negatives_seed)?;
            contra_value = lc.value;
            axpy(self.config.lambda_contra, lc.grad_features.as_slice(), grad_enc.as_mut_slice());
            axpy(self.config.lambda_contra, lc.grad_codes.as_slice(), grad_codes.as_mut_slice());
        }

        let mut alignment = 0.0;
        let mut grad_estimator = vec![0.0; self.estimator.params().len()];
        at = 0;
        for c in clips {
            let t = c.tokens();
            let mut quantized = Matrix::zeros(t, d);
            let mut e_clip = Matrix::zeros(t, d);
            for i in 0..t {
                quantized.row_mut(i).copy_from_slice(q.normed_codes.row(at + i));
                e_clip.row_mut(i).copy_from_slice(enc.row(at + i));
            }
            let teacher = snap.model().infer(&c.features, None)?.reps;
            let fo = self.estimator.forward(&quantized, None)?;
            let l1 = alignment_loss(&fo.reps, &teacher)?;
            alignment += l1.value;
            let g = self.estimator.backward(&fo, Some(&l1.grad), None)?;
            axpy(1.0, &g.params, &mut grad_estimator);
            let through = straight_through_backward(&e_clip, &g.input);
            for i in 0..t {
                axpy(1.0, through.row(i), grad_enc.row_mut(at + i));
            }
            at += t;
        }

        let mut grad_tokenizer = vec![0.0; self.tokenizer.params().len()];
        at = 0;
        for (c, f) in clips.iter().zip(&fwds) {
            let t = c.tokens();
            let mut g = Matrix::zeros(t, d);
            for i in 0..t {
                g.row_mut(i).copy_from_slice(grad_enc.row(at + i));
            }
            let back = self.tokenizer.backward(f, Some(&g), None)?;
            axpy(1.0, &back.params, &mut grad_tokenizer);
            at += t;
        }

        let l_tok = crate::distill::tokenizer_total_loss(alignment, vq.value, anchor.value);
        let lambda_contra = if self.config.contrastive { self.config.lambda_contra } else { 0.0 };
        let total = crate::codebook::codebook_total_loss(l_tok, contra_value, lambda_contra);
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("tokenizer loss at stage {}", self.stage)));
        }
        Ok(TokenizerStep {
            alignment,
            vq: vq.value,
            anchor: anchor.value,
            contrastive: contra_value,
            total,
            quantized: q,
            grad_tokenizer,
            grad_estimator,
            grad_codes,
        })
    }

    /// Code index targets for `clip` under the current tokenizer.
    pub fn targets(&self, clip: &FeatureClip) -> Result<Vec<usize>> {
        let e = self.tokenizer.infer(&clip.features, None)?.reps;
        Ok(quantize(&e, &self.codebook)?.indices)
    }

    /// Model objective on a batch. Does not modify `self`.
    pub fn model_objective(&self, clips: &[&FeatureClip], targets: &[Vec<usize>], masks: &[MaskPlan]) -> Result<ModelStep> {
        let snap = self.snapshot()?;
        let (_, mu_reg) = self.anchor_weights();
        let k = self.config.codebook_size;
        let mut grad_model = vec![0.0; self.model.params().len()];
        let (mut ce, mut distill) = (0.0, 0.0);
        for ((c, z), plan) in clips.iter().zip(targets).zip(masks) {
            self.check_dim(c)?;
            let f = self.model.forward(&c.features, Some(plan))?;
            let frozen = snap.model().infer(&c.features, Some(plan))?.reps;
            let logits_all = f.logits.as_ref().ok_or_else(|| Error::invalid("model has no logit head"))?;
            let mask = plan.positions().to_vec();
            let mut logits = Matrix::zeros(mask.len(), k);
            for (i, &p) in mask.iter().enumerate() {
                logits.row_mut(i).copy_from_slice(logits_all.row(p));
            }
            let out = ModelBatchOutputs {
                logits,
                targets: mask.iter().map(|&p| z[p]).collect(),
                mask: mask.clone(),
                student_reps: f.reps.clone(),
                frozen_reps: frozen,
            };
            let l = mam_loss(&out, mu_reg)?;
            ce += l.cross_entropy;
            distill += l.distill;
            let mut grad_logits = Matrix::zeros(c.tokens(), k);
            for (i, &p) in mask.iter().enumerate() {
                grad_logits.row_mut(p).copy_from_slice(l.grad_logits.row(i));
            }
            let back = self.model.backward(&f, Some(&l.grad_reps), Some(&grad_logits))?;
            axpy(1.0, &back.params, &mut grad_model);
        }
        let total = ce + distill;
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("model loss at stage {}", self.stage)));
        }
        Ok(ModelStep { cross_entropy: ce, distill, total, grad_model })
    }

    fn batches(&self, n: usize, phase: Phase, epoch: u32) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = seed::rng(self.config.seed, &[tag::SHUFFLE, self.stage as u64, phase.code() as u64, epoch as u64]);
        order.shuffle(&mut rng);
        order.chunks(self.config.batch_size).map(<[usize]>::to_vec).collect()
    }

    fn tokenizer_epoch(&mut self, data: &CorpusPool, log: &mut Vec<StageRecord>) -> Result<()> {
        let epoch = self.progress.epoch;
        let mut epoch_assignments = Vec::new();
        let batches = self.batches(data.len(), Phase::Tokenizer, epoch);
        let n_batches = batches.len();
        for (b, idx) in batches.into_iter().enumerate() {
            let clips: Vec<&FeatureClip> = idx.iter().map(|&i| data.clip(i)).collect();
            let neg_seed = seed::derive(self.config.seed, &[tag::NEGATIVES, self.stage as u64, epoch as u64, b as u64]);
            let step = self.tokenizer_objective(&clips, neg_seed)?;
            let lr = self.config.learning_rate;
            adam_step(self.tokenizer.params_mut(), &step.grad_tokenizer, &mut self.optim.tokenizer, lr)?;
            adam_step(self.estimator.params_mut(), &step.grad_estimator, &mut self.optim.estimator, lr)?;
            adam_step(self.codebook.codes_mut().as_mut_slice(), step.grad_codes.as_slice(), &mut self.optim.codes, lr)?;
            self.codebook.update_usage(&step.quantized, self.config.gamma)?;
            if self.config.reinit {
                self.codebook.reinit_codes(&step.quantized, self.config.gamma)?;
            }
            let health = codebook_health(self.codebook.size(), &step.quantized.indices)?;
            epoch_assignments.extend_from_slice(&step.quantized.indices);
            let rec = |name: &str, value: f64| StageRecord {
                stage: self.stage,
                phase: Phase::Tokenizer,
                epoch,
                batch: b as u32,
                name: name.into(),
                value,
            };
            log.extend([
                rec("alignment", step.alignment),
                rec("vq", step.vq),
                rec("anchor", step.anchor),
                rec("contrastive", step.contrastive),
                rec("total", step.total),
                rec("perplexity", health.perplexity),
            ]);
        }
        let health = codebook_health(self.codebook.size(), &epoch_assignments)?;
        log.push(StageRecord {
            stage: self.stage,
            phase: Phase::Tokenizer,
            epoch,
            batch: n_batches as u32,
            name: "epoch_perplexity".into(),
            value: health.perplexity,
        });
        Ok(())
    }

    /// Mask for dataset clip `index` in the current model epoch.
    pub fn mask_for(&self, clip: &FeatureClip, epoch: u32, index: usize) -> Result<MaskPlan> {
        make_mask(
            clip.tokens(),
            self.config.mask_ratio,
            seed::derive(self.config.seed, &[tag::MASK, self.stage as u64, epoch as u64, index as u64]),
        )
    }

    fn model_epoch(&mut self, data: &CorpusPool, log: &mut Vec<StageRecord>) -> Result<()> {
        let epoch = self.progress.epoch;
        let targets: Vec<Vec<usize>> = data.clips().iter().map(|c| self.targets(c)).collect::<Result<_>>()?;
        for (b, idx) in self.batches(data.len(), Phase::Model, epoch).into_iter().enumerate() {
            let clips: Vec<&FeatureClip> = idx.iter().map(|&i| data.clip(i)).collect();
            let z: Vec<Vec<usize>> = idx.iter().map(|&i| targets[i].clone()).collect();
            let masks: Vec<MaskPlan> =
                idx.iter().map(|&i| self.mask_for(data.clip(i), epoch, i)).collect::<Result<_>>()?;
            let step = self.model_objective(&clips, &z, &masks)?;
            adam_step(self.model.params_mut(), &step.grad_model, &mut self.optim.model, self.config.learning_rate)?;
            let rec = |name: &str, value: f64| StageRecord {
                stage: self.stage,
                phase: Phase::Model,
                epoch,
                batch: b as u32,
                name: name.into(),
                value,
            };
            log.extend([
                rec("cross_entropy", step.cross_entropy),
                rec("distill", step.distill),
                rec("total", step.total),
            ]);
        }
        Ok(())
    }

    /// Runs up to `max_epochs` epochs (all remaining when `None`) of the
    /// current stage on `data`. Returns true once the stage is complete.
    pub fn run(&mut self, data: &CorpusPool, max_epochs: Option<usize>, log: &mut Vec<StageRecord>) -> Result<bool> {
        let epochs = self.config.epochs as u32;
        let mut budget = max_epochs.unwrap_or(usize::MAX);
        while self.progress.phase != Phase::Done && budget > 0 {
            if data.is_empty() {
                self.progress = Progress { phase: Phase::Done, epoch: 0 };
                break;
            }
            match self.progress.phase {
                Phase::Tokenizer => self.tokenizer_epoch(data, log)?,
                Phase::Model => self.model_epoch(data, log)?,
                Phase::Done => unreachable!(),
            }
            budget -= 1;
            self.progress.epoch += 1;
            if self.progress.epoch == epochs {
                self.progress = match self.progress.phase {
                    Phase::Tokenizer => Progress { phase: Phase::Model, epoch: 0 },
                    _ => Progress { phase: Phase::Done, epoch: 0 },
                };
            }
        }
        Ok(self.progress.phase == Phase::Done)
    }

    /// The stage's training data: stratified retrieval when sampling is on,
    /// otherwise the domain pool itself.
    pub fn stage_dataset(&self, domain: &CorpusPool, general: &CorpusPool, adaptive: &CorpusPool, stage: u32) -> Result<(CorpusPool, Option<AdaptiveDataset>)> {
        if !self.config.sampling {
            return Ok((domain.clone(), None));
        }
        let budget = if self.config.budget == 0 { domain.len() } else { self.config.budget };
        let ds = build_adaptive_dataset(domain, general, adaptive, &self.config.sampling_config(budget), stage)?;
        Ok((ds.pool.clone(), Some(ds)))
    }

    /// Base pre-training on the general pool (stage 0).
    pub fn pretrain(config: TrainConfig, general: &CorpusPool) -> Result<(Self, StageOutcome)> {
        let mut learner = Self::new(config)?;
        learner.begin_stage(0);
        let mut records = Vec::new();
        learner.run(general, None, &mut records)?;
        let summary = learner.summarize(general, &records)?;
        let adaptive = CorpusPool::empty("adaptive", general.dim());
        Ok((learner, StageOutcome { dataset: general.clone(), retrieval: None, adaptive, records, summary }))
    }

    /// One continual stage: snapshot, dataset, tokenizer phase, model phase,
    /// adaptive-pool update, summary.
    pub fn adapt(&mut self, domain: &CorpusPool, general: &CorpusPool, adaptive: &CorpusPool) -> Result<StageOutcome> {
        if self.snapshot.is_none() {
            return Err(Error::invalid("adapt needs a pre-trained base state"));
        }
        let stage = self.stage + 1;
        self.begin_stage(stage);
        let (dataset, retrieval) = self.stage_dataset(domain, general, adaptive, stage)?;
        let mut records = Vec::new();
        self.run(&dataset, None, &mut records)?;
        let summary = self.summarize(&dataset, &records)?;
        let adaptive = adaptive.extended(dataset.clips())?;
        Ok(StageOutcome { dataset, retrieval, adaptive, records, summary })
    }

    fn summarize(&self, data: &CorpusPool, records: &[StageRecord]) -> Result<StageSummary> {
        let snap = self.snapshot()?;
        let last = |phase: Phase| {
            records
                .iter()
                .rev()
                .find(|r| r.phase == phase && r.name == "total")
                .map_or(f64::NAN, |r| r.value)
        };
        let mut assignments = Vec::new();
        let (mut tok_drift, mut model_drift, mut n) = (0.0, 0.0, 0usize);
        for c in data.clips() {
            let e = self.tokenizer.infer(&c.features, None)?.reps;
            let eb = snap.tokenizer().infer(&c.features, None)?.reps;
            let r = self.model.infer(&c.features, None)?.reps;
            let rb = snap.model().infer(&c.features, None)?.reps;
            assignments.extend(quantize(&e, &self.codebook)?.indices);
            for t in 0..c.tokens() {
                tok_drift += sq_dist(&l2_normalize(e.row(t))?, &l2_normalize(eb.row(t))?).sqrt();
                model_drift += sq_dist(&l2_normalize(r.row(t))?, &l2_normalize(rb.row(t))?).sqrt();
                n += 1;
            }
        }
        let codebook = if assignments.is_empty() {
            CodebookHealth { utilization: 0.0, perplexity: 0.0 }
        } else {
            codebook_health(self.codebook.size(), &assignments)?
        };
        let denom = n.max(1) as f64;
        Ok(StageSummary {
            stage: self.stage,
            dataset_size: data.len(),
            final_tokenizer_loss: last(Phase::Tokenizer),
            final_model_loss: last(Phase::Model),
            codebook,
            tokenizer_drift: tok_drift / denom,
            model_drift: model_drift / denom,
        })
    }

    /// Mean-pooled model representation of every clip, one row per clip.
    pub fn embed(&self, pool: &CorpusPool) -> Result<Matrix> {
        let mut out = Matrix::zeros(pool.len(), self.config.dim);
        for (i, c) in pool.clips().iter().enumerate() {
            let r = self.model.infer(&c.features, None)?.reps;
            out.row_mut(i).copy_from_slice(&r.row_mean());
        }
        Ok(out)
    }
}
