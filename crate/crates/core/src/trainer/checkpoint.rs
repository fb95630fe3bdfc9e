//! SNRC checkpoint codec.
//!
//! Layout, little-endian:
//!
//! ```text
//! "SNRC" | u32 version | u32 len + config text | 32-byte SHA-256 of the text
//! u32 stage | u32 phase | u32 epoch
//! tokenizer, estimator, model nets | codebook | 4 Adam states
//! u8 has_snapshot [+ tokenizer, model nets | codebook | u32 stage]
//! ```
//!
//! Every f64 is stored as its raw bits, so a load restores the state exactly.

use std::path::Path;

use super::{config::digest_text, AdamState, Learner, Optimizers, Phase, Progress, TrainConfig};
use crate::codebook::Codebook;
use crate::corpus::Reader;
use crate::encoder::{take_snapshot, NetShape, ToyNet};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SNRC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, vs: &[f64]) {
    put_u64(buf, vs.len() as u64);
    for v in vs {
        put_u64(buf, v.to_bits());
    }
}

fn read_f64s(r: &mut Reader<'_>, what: &str) -> Result<Vec<f64>> {
    let n = r.u64(what)? as usize;
    if n.saturating_mul(8) > r.remaining() {
        return Err(Error::Truncated(format!("{what}: {n} values declared")));
    }
    (0..n).map(|_| r.f64(what)).collect()
}

fn put_net(buf: &mut Vec<u8>, net: &ToyNet) {
    let s = net.shape();
    for v in [s.input, s.hidden, s.output, s.logits] {
        put_u32(buf, v as u32);
    }
    put_f64s(buf, net.params());
}

fn read_net(r: &mut Reader<'_>, what: &str) -> Result<ToyNet> {
    let shape = NetShape {
        input: r.u32(what)? as usize,
        hidden: r.u32(what)? as usize,
        output: r.u32(what)? as usize,
        logits: r.u32(what)? as usize,
    };
    let params = read_f64s(r, what)?;
    ToyNet::from_params(shape, params).map_err(|e| Error::Malformed(format!("{what}: {e}")))
}

fn put_codebook(buf: &mut Vec<u8>, cb: &Codebook) {
    put_u32(buf, cb.size() as u32);
    put_u32(buf, cb.dim() as u32);
    put_f64s(buf, cb.codes().as_slice());
    put_f64s(buf, cb.usage());
}

fn read_codebook(r: &mut Reader<'_>) -> Result<Codebook> {
    let k = r.u32("codebook size")? as usize;
    let d = r.u32("codebook dim")? as usize;
    let codes = read_f64s(r, "codes")?;
    let usage = read_f64s(r, "usage")?;
    let codes = Matrix::from_vec(k, d, codes).map_err(|e| Error::Malformed(format!("codes: {e}")))?;
    Codebook::with_usage(codes, usage).map_err(|e| Error::Malformed(format!("codebook: {e}")))
}

fn put_adam(buf: &mut Vec<u8>, s: &AdamState) {
    put_u64(buf, s.step);
    for v in [s.beta1, s.beta2, s.eps] {
        put_u64(buf, v.to_bits());
    }
    put_f64s(buf, &s.m);
    put_f64s(buf, &s.v);
}

fn read_adam(r: &mut Reader<'_>, expected: usize, what: &str) -> Result<AdamState> {
    let step = r.u64(what)?;
    let (beta1, beta2, eps) = (r.f64(what)?, r.f64(what)?, r.f64(what)?);
    let m = read_f64s(r, what)?;
    let v = read_f64s(r, what)?;
    if m.len() != expected || v.len() != expected {
        return Err(Error::Malformed(format!("{what}: moment length does not match parameters")));
    }
    Ok(AdamState { m, v, step, beta1, beta2, eps })
}

pub fn encode_checkpoint(l: &Learner) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    let text = l.config.to_text();
    put_u32(&mut buf, text.len() as u32);
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&digest_text(&text));
    put_u32(&mut buf, l.stage);
    put_u32(&mut buf, l.progress.phase.code());
    put_u32(&mut buf, l.progress.epoch);
    put_net(&mut buf, &l.tokenizer);
    put_net(&mut buf, &l.estimator);
    put_net(&mut buf, &l.model);
    put_codebook(&mut buf, &l.codebook);
    for s in [&l.optim.tokenizer, &l.optim.estimator, &l.optim.codes, &l.optim.model] {
        put_adam(&mut buf, s);
    }
    match &l.snapshot {
        None => buf.push(0),
        Some(s) => {
            buf.push(1);
            put_net(&mut buf, s.tokenizer());
            put_net(&mut buf, s.model());
            put_codebook(&mut buf, s.codebook());
            put_u32(&mut buf, s.stage());
        }
    }
    buf
}

/// Decodes a checkpoint. When `expected` is given, its config digest must
/// match the stored one.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&TrainConfig>) -> Result<Learner> {
    let mut r = Reader::new(bytes);
    let magic = r.magic()?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { expected: CHECKPOINT_MAGIC, found: magic });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { expected: CHECKPOINT_VERSION, found: version });
    }
    let text = r.string("config")?;
    let stored = r.take(32, "config digest")?;
    if digest_text(&text) != stored {
        return Err(Error::DigestMismatch);
    }
    if let Some(cfg) = expected {
        if cfg.digest() != stored {
            return Err(Error::DigestMismatch);
        }
    }
    let config = TrainConfig::from_text(&text)?;
    let stage = r.u32("stage")?;
    let phase = Phase::from_code(r.u32("phase")?)?;
    let epoch = r.u32("epoch")?;
    let tokenizer = read_net(&mut r, "tokenizer")?;
    let estimator = read_net(&mut r, "estimator")?;
    let model = read_net(&mut r, "model")?;
    let codebook = read_codebook(&mut r)?;
    let optim = Optimizers {
        tokenizer: read_adam(&mut r, tokenizer.params().len(), "tokenizer optimizer")?,
        estimator: read_adam(&mut r, estimator.params().len(), "estimator optimizer")?,
        codes: read_adam(&mut r, codebook.size() * codebook.dim(), "code optimizer")?,
        model: read_adam(&mut r, model.params().len(), "model optimizer")?,
    };
    let snapshot = match r.take(1, "snapshot flag")?[0] {
        0 => None,
        1 => {
            let t = read_net(&mut r, "snapshot tokenizer")?;
            let m = read_net(&mut r, "snapshot model")?;
            let cb = read_codebook(&mut r)?;
            let s = r.u32("snapshot stage")?;
            Some(take_snapshot(&t, &m, &cb, s))
        }
        f => return Err(Error::Malformed(format!("snapshot flag {f}"))),
    };
    if !r.is_done() {
        return Err(Error::Malformed(format!("{} trailing bytes", r.remaining())));
    }
    Ok(Learner {
        config,
        stage,
        tokenizer,
        estimator,
        model,
        codebook,
        optim,
        progress: Progress { phase, epoch },
        snapshot,
    })
}

pub fn save_checkpoint(l: &Learner, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(l))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>, expected: Option<&TrainConfig>) -> Result<Learner> {
    decode_checkpoint(&std::fs::read(path)?, expected)
}
