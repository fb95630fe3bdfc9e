//! Small manually differentiated encoders.
//!
//! One architecture, [`ToyNet`], plays three roles: the tokenizer encoder, the
//! tokenizer estimator and the masked-prediction model. For tokens `x_t`
//! (masked ones replaced by a learned mask embedding):
//!
//! ```text
//! a_t   = W_in x_t + b_in            h_t = tanh(a_t)
//! c     = tanh(mean_{u unmasked} a_u)
//! z_t   = W_self h_t + W_ctx c + b_mix
//! rep_t = W_out z_t + b_out          logit_t = W_logit z_t + b_logit
//! ```
//!
//! The context mean is what lets masked positions see their neighbours. All
//! parameters live in one flat vector so the optimizer and checkpoint code can
//! treat every net the same way.

use std::ops::Range;

use rand::seq::index::sample;
use rand::Rng;

use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, Matrix};
use crate::seed::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetShape {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    /// Width of the logit head; 0 means no head.
    pub logits: usize,
}

impl NetShape {
    pub fn param_count(&self) -> usize {
        Layout::new(*self).total
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    w_in: Range<usize>,
    b_in: Range<usize>,
    w_self: Range<usize>,
    w_ctx: Range<usize>,
    b_mix: Range<usize>,
    w_out: Range<usize>,
    b_out: Range<usize>,
    w_logit: Range<usize>,
    b_logit: Range<usize>,
    mask: Range<usize>,
    total: usize,
}

impl Layout {
    fn new(s: NetShape) -> Self {
        let mut at = 0;
        let mut next = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let w_in = next(s.hidden * s.input);
        let b_in = next(s.hidden);
        let w_self = next(s.hidden * s.hidden);
        let w_ctx = next(s.hidden * s.hidden);
        let b_mix = next(s.hidden);
        let w_out = next(s.output * s.hidden);
        let b_out = next(s.output);
        let w_logit = next(s.logits * s.hidden);
        let b_logit = next(s.logits);
        let mask = next(s.input);
        Self { w_in, b_in, w_self, w_ctx, b_mix, w_out, b_out, w_logit, b_logit, mask, total: at }
    }
}

/// Named parameter block of a [`ToyNet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    InputWeight,
    InputBias,
    SelfWeight,
    ContextWeight,
    MixBias,
    OutputWeight,
    OutputBias,
    LogitWeight,
    LogitBias,
    MaskEmbedding,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyNet {
    shape: NetShape,
    layout: Layout,
    params: Vec<f64>,
}

impl ToyNet {
    pub fn zeros(shape: NetShape) -> Self {
        let layout = Layout::new(shape);
        let params = vec![0.0; layout.total];
        Self { shape, layout, params }
    }

    /// Every parameter drawn from uniform(-0.1, 0.1).
    pub fn init(shape: NetShape, seed: u64) -> Self {
        let mut net = Self::zeros(shape);
        let mut rng = seed::rng(seed, &[tag::INIT]);
        net.params.iter_mut().for_each(|p| *p = rng.random_range(-0.1..0.1));
        net
    }

    pub fn from_params(shape: NetShape, params: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(shape);
        if params.len() != layout.total {
            return Err(Error::DimensionMismatch { expected: layout.total, found: params.len() });
        }
        Ok(Self { shape, layout, params })
    }

    pub fn shape(&self) -> NetShape {
        self.shape
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn block(&self, b: Block) -> &[f64] {
        &self.params[self.range(b)]
    }

    pub fn block_mut(&mut self, b: Block) -> &mut [f64] {
        let r = self.range(b);
        &mut self.params[r]
    }

    fn range(&self, b: Block) -> Range<usize> {
        let l = &self.layout;
        match b {
            Block::InputWeight => l.w_in.clone(),
            Block::InputBias => l.b_in.clone(),
            Block::SelfWeight => l.w_self.clone(),
            Block::ContextWeight => l.w_ctx.clone(),
            Block::MixBias => l.b_mix.clone(),
            Block::OutputWeight => l.w_out.clone(),
            Block::OutputBias => l.b_out.clone(),
            Block::LogitWeight => l.w_logit.clone(),
            Block::LogitBias => l.b_logit.clone(),
            Block::MaskEmbedding => l.mask.clone(),
        }
    }

    /// Forward pass that keeps the activations needed by [`ToyNet::backward`].
    pub fn forward(&self, x: &Matrix, mask: Option<&MaskPlan>) -> Result<Forward> {
        self.run(x, mask, true)
    }

    /// Forward pass without a cache, for evaluation.
    pub fn infer(&self, x: &Matrix, mask: Option<&MaskPlan>) -> Result<Forward> {
        self.run(x, mask, false)
    }

    fn run(&self, x: &Matrix, mask: Option<&MaskPlan>, keep: bool) -> Result<Forward> {
        let s = self.shape;
        if x.cols() != s.input {
            return Err(Error::DimensionMismatch { expected: s.input, found: x.cols() });
        }
        let t = x.rows();
        if t == 0 {
            return Err(Error::EmptyInput("clip has no tokens".into()));
        }
        let masked = match mask {
            Some(plan) => {
                if plan.len() != t {
                    return Err(Error::DimensionMismatch { expected: t, found: plan.len() });
                }
                plan.flags.clone()
            }
            None => vec![false; t],
        };
        let p = &self.params;
        let l = &self.layout;

        let mut xin = x.clone();
        for (i, &m) in masked.iter().enumerate() {
            if m {
                xin.row_mut(i).copy_from_slice(&p[l.mask.clone()]);
            }
        }

        let mut a = Matrix::zeros(t, s.hidden);
        let mut h = Matrix::zeros(t, s.hidden);
        for i in 0..t {
            let xi = xin.row(i);
            for j in 0..s.hidden {
                let w = &p[l.w_in.start + j * s.input..l.w_in.start + (j + 1) * s.input];
                let v = dot(w, xi) + p[l.b_in.start + j];
                a.set(i, j, v);
                h.set(i, j, v.tanh());
            }
        }

        let mut context: Vec<usize> = (0..t).filter(|&i| !masked[i]).collect();
        if context.is_empty() {
            // Everything masked: fall back to all positions.
            context = (0..t).collect();
        }
        let mut ctx_pre = vec![0.0; s.hidden];
        for &u in &context {
            axpy(1.0, a.row(u), &mut ctx_pre);
        }
        let inv = 1.0 / context.len() as f64;
        ctx_pre.iter_mut().for_each(|v| *v *= inv);
        let c: Vec<f64> = ctx_pre.iter().map(|v| v.tanh()).collect();

        let ctx_term = matvec(&p[l.w_ctx.clone()], s.hidden, s.hidden, &c);
        let mut z = Matrix::zeros(t, s.hidden);
        for i in 0..t {
            let zi = z.row_mut(i);
            let own = matvec(&p[l.w_self.clone()], s.hidden, s.hidden, h.row(i));
            for j in 0..s.hidden {
                zi[j] = own[j] + ctx_term[j] + p[l.b_mix.start + j];
            }
        }

        let reps = head(&z, &p[l.w_out.clone()], &p[l.b_out.clone()], s.output);
        let logits = (s.logits > 0).then(|| head(&z, &p[l.w_logit.clone()], &p[l.b_logit.clone()], s.logits));

        let cache = keep.then(|| Cache { xin, masked, context, h, c, z });
        Ok(Forward { reps, logits, cache })
    }

    /// Reverse-mode gradients for the forward pass that produced `fwd`.
    ///
    /// `grad_reps` and `grad_logits` are upstream gradients of the
    /// representation and logit outputs; either may be omitted (treated as
    /// zero). Returns parameter gradients in the flat layout of
    /// [`ToyNet::params`] and the gradient w.r.t. the unmasked input tokens.
    pub fn backward(&self, fwd: &Forward, grad_reps: Option<&Matrix>, grad_logits: Option<&Matrix>) -> Result<Gradients> {
        let cache = fwd.cache.as_ref().ok_or(Error::MissingCache)?;
        let s = self.shape;
        let l = &self.layout;
        let p = &self.params;
        let t = cache.h.rows();
        let mut g = vec![0.0; l.total];

        let mut dz = Matrix::zeros(t, s.hidden);
        if let Some(gr) = grad_reps {
            check(gr, t, s.output)?;
            head_backward(gr, &cache.z, &p[l.w_out.clone()], &mut g, l.w_out.start, l.b_out.start, &mut dz);
        }
        if let Some(gl) = grad_logits {
            if s.logits == 0 {
                return Err(Error::invalid("net has no logit head"));
            }
            check(gl, t, s.logits)?;
            head_backward(gl, &cache.z, &p[l.w_logit.clone()], &mut g, l.w_logit.start, l.b_logit.start, &mut dz);
        }

        let hd = s.hidden;
        let mut dh = Matrix::zeros(t, hd);
        let mut dc = vec![0.0; hd];
        for i in 0..t {
            let dzi = dz.row(i);
            for j in 0..hd {
                let d = dzi[j];
                if d == 0.0 {
                    continue;
                }
                g[l.b_mix.start + j] += d;
                let ws = l.w_self.start + j * hd;
                let wc = l.w_ctx.start + j * hd;
                axpy(d, cache.h.row(i), &mut g[ws..ws + hd]);
                axpy(d, &cache.c, &mut g[wc..wc + hd]);
                axpy(d, &p[ws..ws + hd], dh.row_mut(i));
                axpy(d, &p[wc..wc + hd], &mut dc);
            }
        }

        let inv = 1.0 / cache.context.len() as f64;
        let dctx: Vec<f64> = dc.iter().zip(&cache.c).map(|(d, c)| d * (1.0 - c * c) * inv).collect();
        let mut da = Matrix::zeros(t, hd);
        for i in 0..t {
            for (j, v) in da.row_mut(i).iter_mut().enumerate() {
                let hij = cache.h.get(i, j);
                *v = dh.get(i, j) * (1.0 - hij * hij);
            }
        }
        for &u in &cache.context {
            axpy(1.0, &dctx, da.row_mut(u));
        }

        let mut dx = Matrix::zeros(t, s.input);
        for i in 0..t {
            let dai = da.row(i);
            let xi = cache.xin.row(i);
            for j in 0..hd {
                let d = dai[j];
                if d == 0.0 {
                    continue;
                }
                g[l.b_in.start + j] += d;
                let w = l.w_in.start + j * s.input;
                axpy(d, xi, &mut g[w..w + s.input]);
                axpy(d, &p[w..w + s.input], dx.row_mut(i));
            }
        }
        for (i, &m) in cache.masked.iter().enumerate() {
            if m {
                let grad = dx.row(i).to_vec();
                axpy(1.0, &grad, &mut g[l.mask.clone()]);
                dx.row_mut(i).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok(Gradients { params: g, input: dx })
    }
}

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows).map(|j| dot(&w[j * cols..(j + 1) * cols], x)).collect()
}

fn head(z: &Matrix, w: &[f64], b: &[f64], out: usize) -> Matrix {
    let hd = z.cols();
    let mut y = Matrix::zeros(z.rows(), out);
    for i in 0..z.rows() {
        let zi = z.row(i);
        for (o, slot) in y.row_mut(i).iter_mut().enumerate() {
            *slot = dot(&w[o * hd..(o + 1) * hd], zi) + b[o];
        }
    }
    y
}

fn head_backward(gy: &Matrix, z: &Matrix, w: &[f64], g: &mut [f64], w_at: usize, b_at: usize, dz: &mut Matrix) {
    let hd = z.cols();
    for i in 0..z.rows() {
        for (o, &d) in gy.row(i).iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            g[b_at + o] += d;
            axpy(d, z.row(i), &mut g[w_at + o * hd..w_at + (o + 1) * hd]);
            axpy(d, &w[o * hd..(o + 1) * hd], dz.row_mut(i));
        }
    }
}

fn check(m: &Matrix, rows: usize, cols: usize) -> Result<()> {
    if m.rows() != rows {
        return Err(Error::DimensionMismatch { expected: rows, found: m.rows() });
    }
    if m.cols() != cols {
        return Err(Error::DimensionMismatch { expected: cols, found: m.cols() });
    }
    Ok(())
}

#[derive(Debug, Clone)]
struct Cache {
    xin: Matrix,
    masked: Vec<bool>,
    context: Vec<usize>,
    h: Matrix,
    c: Vec<f64>,
    z: Matrix,
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub reps: Matrix,
    pub logits: Option<Matrix>,
    cache: Option<Cache>,
}

impl Forward {
    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Matrix,
}

/// Which token positions of a clip are hidden from the model.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    flags: Vec<bool>,
    positions: Vec<usize>,
}

impl MaskPlan {
    pub fn from_positions(t: usize, positions: &[usize]) -> Result<Self> {
        let mut flags = vec![false; t];
        for &p in positions {
            if p >= t {
                return Err(Error::invalid(format!("mask position {p} out of range for {t} tokens")));
            }
            flags[p] = true;
        }
        let positions = (0..t).filter(|&i| flags[i]).collect();
        Ok(Self { flags, positions })
    }

    /// Masked positions in ascending order.
    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn is_masked(&self, t: usize) -> bool {
        self.flags[t]
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }
}

/// Masks `ceil(ratio * t)` positions chosen uniformly without replacement.
pub fn make_mask(t: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if t == 0 {
        return Err(Error::EmptyInput("cannot mask a clip with no tokens".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("mask ratio {ratio} outside (0, 1)")));
    }
    let count = ((ratio * t as f64).ceil() as usize).clamp(1, t);
    let mut rng = seed::rng(seed, &[tag::MASK]);
    let picked = sample(&mut rng, t, count).into_vec();
    MaskPlan::from_positions(t, &picked)
}

/// Frozen copies of the tokenizer encoder, model and codebook taken at the
/// start of a stage.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    tokenizer: ToyNet,
    model: ToyNet,
    codebook: Codebook,
    stage: u32,
}

impl Snapshot {
    pub fn tokenizer(&self) -> &ToyNet {
        &self.tokenizer
    }

    pub fn model(&self) -> &ToyNet {
        &self.model
    }

    pub fn codebook(&self) -> &Codebook {
        &self.codebook
    }

    pub fn stage(&self) -> u32 {
        self.stage
    }
}

pub fn take_snapshot(tokenizer: &ToyNet, model: &ToyNet, codebook: &Codebook, stage: u32) -> Snapshot {
    Snapshot { tokenizer: tokenizer.clone(), model: model.clone(), codebook: codebook.clone(), stage }
}
