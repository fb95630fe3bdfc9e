//! Finite-difference gradient suites and brute-force oracles shared by the
//! integration tests and the acceptance runner.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sonar_core::codebook::{contrastive_loss, quantize, select_negatives, vq_loss, Codebook, QuantizeResult};
use sonar_core::corpus::{CorpusPool, DomainSpec, FeatureClip, generate_domain};
use sonar_core::distill::{alignment_loss, mam_loss, tokenizer_reg_loss, ModelBatchOutputs};
use sonar_core::encoder::{MaskPlan, NetShape, ToyNet};
use sonar_core::linalg::Matrix;
use sonar_core::trainer::{Learner, TrainConfig};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const GRAD_SEEDS: u64 = 20;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_7e57)
}

pub fn random_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

// ---------------------------------------------------------------- vectors

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn unit(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    v.iter().map(|x| x / n).collect()
}

pub fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// ‖a − n‖ / max(‖a‖, ‖n‖), with a tiny floor so exact zeros compare equal.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = sq(analytic, numeric).sqrt();
    let scale = dot(analytic, analytic).sqrt().max(dot(numeric, numeric).sqrt()).max(1e-10);
    diff / scale
}

/// Central differences of `f` at `x`.
pub fn numeric_grad(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + FD_STEP;
            let up = f(&p);
            p[i] = orig - FD_STEP;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn mat(rows: usize, cols: usize, data: &[f64]) -> Matrix {
    Matrix::from_vec(rows, cols, data.to_vec()).unwrap()
}

/// Quantization with the assignment pinned to `indices`, recomputing the
/// normalized rows from the given features and codes.
pub fn pinned(features: &Matrix, codes: &Matrix, indices: &[usize]) -> QuantizeResult {
    let t = features.rows();
    let d = features.cols();
    let mut nf = Matrix::zeros(t, d);
    let mut nc = Matrix::zeros(t, d);
    let mut counts = vec![0; codes.rows()];
    for (i, &k) in indices.iter().enumerate() {
        nf.row_mut(i).copy_from_slice(&unit(features.row(i)));
        nc.row_mut(i).copy_from_slice(&unit(codes.row(k)));
        counts[k] += 1;
    }
    QuantizeResult { indices: indices.to_vec(), normed_features: nf, normed_codes: nc, assignment_counts: counts, token_total: t }
}

// ---------------------------------------------------------- per-equation suites

/// Alignment loss w.r.t. the estimator output.
pub fn grad_alignment(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (t, d) = (r.random_range(1..6), r.random_range(2..7));
    let o = random_matrix(&mut r, t, d);
    let teacher = random_matrix(&mut r, t, d);
    let analytic = alignment_loss(&o, &teacher).unwrap().grad;
    let num = numeric_grad(o.as_slice(), |x| {
        (0..t)
            .map(|i| -dot(&unit(&x[i * d..(i + 1) * d]), &unit(teacher.row(i))))
            .sum()
    });
    rel_err(analytic.as_slice(), &num)
}

fn vq_instance(seed: u64) -> (Matrix, Codebook, QuantizeResult) {
    let mut r = rng(seed);
    let (t, d, k) = (r.random_range(2..9), r.random_range(2..6), r.random_range(2..6));
    let e = random_matrix(&mut r, t, d);
    let cb = Codebook::new(random_matrix(&mut r, k, d)).unwrap();
    let q = quantize(&e, &cb).unwrap();
    (e, cb, q)
}

/// VQ loss, feature path: only the commitment term, codes held constant.
pub fn grad_vq_features(seed: u64) -> f64 {
    let (e, cb, q) = vq_instance(seed);
    let d = e.cols();
    let analytic = vq_loss(&e, &cb, &q).unwrap().grad_features;
    let num = numeric_grad(e.as_slice(), |x| {
        (0..e.rows()).map(|i| sq(&unit(&x[i * d..(i + 1) * d]), q.normed_codes.row(i))).sum()
    });
    rel_err(analytic.as_slice(), &num)
}

/// VQ loss, code path: only the codebook term, features held constant.
pub fn grad_vq_codes(seed: u64) -> f64 {
    let (e, cb, q) = vq_instance(seed);
    let d = e.cols();
    let analytic = vq_loss(&e, &cb, &q).unwrap().grad_codes;
    let num = numeric_grad(cb.codes().as_slice(), |v| {
        q.indices
            .iter()
            .enumerate()
            .map(|(i, &k)| sq(q.normed_features.row(i), &unit(&v[k * d..(k + 1) * d])))
            .sum()
    });
    rel_err(analytic.as_slice(), &num)
}

/// Tokenizer anchor w.r.t. the live encoder output.
pub fn grad_tokenizer_reg(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (t, d) = (r.random_range(1..6), r.random_range(2..7));
    let e = random_matrix(&mut r, t, d);
    let e_bar = random_matrix(&mut r, t, d);
    let lambda = r.random_range(0.1..5.0);
    let analytic = tokenizer_reg_loss(&e, &e_bar, lambda).unwrap().grad;
    let num = numeric_grad(e.as_slice(), |x| {
        lambda * (0..t).map(|i| sq(&unit(&x[i * d..(i + 1) * d]), &unit(e_bar.row(i)))).sum::<f64>()
    });
    rel_err(analytic.as_slice(), &num)
}

fn mam_instance(seed: u64) -> (ModelBatchOutputs, f64) {
    let mut r = rng(seed);
    let (t, d, k) = (r.random_range(2..8), r.random_range(2..6), r.random_range(2..6));
    let n_mask = r.random_range(1..=t);
    let mask: Vec<usize> = rand::seq::index::sample(&mut r, t, n_mask).into_vec();
    let targets = (0..n_mask).map(|_| r.random_range(0..k)).collect();
    let logits = random_matrix(&mut r, n_mask, k);
    let student = random_matrix(&mut r, t, d);
    let frozen = random_matrix(&mut r, t, d);
    let mu = r.random_range(0.1..5.0);
    (ModelBatchOutputs { logits, targets, mask, student_reps: student, frozen_reps: frozen }, mu)
}

/// Masked-prediction cross-entropy w.r.t. the logits.
pub fn grad_mam_ce(seed: u64) -> f64 {
    let (m, mu) = mam_instance(seed);
    let k = m.logits.cols();
    let analytic = mam_loss(&m, mu).unwrap().grad_logits;
    let num = numeric_grad(m.logits.as_slice(), |x| {
        m.targets
            .iter()
            .enumerate()
            .map(|(i, &z)| {
                let row = &x[i * k..(i + 1) * k];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                max + row.iter().map(|l| (l - max).exp()).sum::<f64>().ln() - row[z]
            })
            .sum()
    });
    rel_err(analytic.as_slice(), &num)
}

/// Representation distillation term w.r.t. the student representations.
pub fn grad_mam_distill(seed: u64) -> f64 {
    let (m, mu) = mam_instance(seed);
    let d = m.student_reps.cols();
    let analytic = mam_loss(&m, mu).unwrap().grad_reps;
    let num = numeric_grad(m.student_reps.as_slice(), |x| {
        mu * (0..m.student_reps.rows())
            .map(|i| sq(&unit(&x[i * d..(i + 1) * d]), &unit(m.frozen_reps.row(i))))
            .sum::<f64>()
    });
    rel_err(analytic.as_slice(), &num)
}

/// Contrastive loss from its definition, with the assignment pinned.
pub fn contrastive_oracle(e: &[f64], v: &[f64], d: usize, indices: &[usize], tau: f64, max_neg: usize, seed: u64) -> f64 {
    let t = indices.len();
    let mut total = 0.0;
    for i in 0..t {
        let negs = select_negatives(indices, i, max_neg, seed);
        if negs.is_empty() {
            continue;
        }
        let k = indices[i];
        let uv = unit(&v[k * d..(k + 1) * d]);
        let s = |j: usize| dot(&unit(&e[j * d..(j + 1) * d]), &uv) / tau;
        let pos = s(i);
        let denom: f64 = pos.exp() + negs.iter().map(|&j| s(j).exp()).sum::<f64>();
        total += denom.ln() - pos;
    }
    total / t as f64
}

fn contrastive_instance(seed: u64) -> (Matrix, Codebook, Vec<usize>, f64, usize) {
    let mut r = rng(seed);
    let (t, d, k) = (r.random_range(3..10), r.random_range(2..6), r.random_range(2..5));
    let e = random_matrix(&mut r, t, d);
    let cb = Codebook::new(random_matrix(&mut r, k, d)).unwrap();
    let indices = quantize(&e, &cb).unwrap().indices;
    let tau = r.random_range(0.2..1.0);
    let max_neg = r.random_range(1..6);
    (e, cb, indices, tau, max_neg)
}

/// Contrastive loss w.r.t. features and codes; returns the larger error.
pub fn grad_contrastive(seed: u64) -> f64 {
    let (e, cb, indices, tau, max_neg) = contrastive_instance(seed);
    let d = e.cols();
    let q = pinned(&e, cb.codes(), &indices);
    let l = contrastive_loss(&e, &cb, &q, tau, max_neg, seed).unwrap();
    let v = cb.codes().as_slice().to_vec();
    let num_e = numeric_grad(e.as_slice(), |x| contrastive_oracle(x, &v, d, &indices, tau, max_neg, seed));
    let num_v = numeric_grad(&v, |x| contrastive_oracle(e.as_slice(), x, d, &indices, tau, max_neg, seed));
    rel_err(l.grad_features.as_slice(), &num_e).max(rel_err(l.grad_codes.as_slice(), &num_v))
}

// ------------------------------------------------------------- end to end

pub fn tiny_pool(seed: u64, clips: usize, dim: usize) -> CorpusPool {
    let mut r = rng(seed);
    let means = (0..3).map(|_| (0..dim).map(|_| r.random_range(-2.0..2.0)).collect()).collect();
    generate_domain(&DomainSpec {
        name: format!("p{seed}"),
        cluster_means: means,
        cluster_covscale: vec![0.5; 3],
        clip_count: clips,
        t_min: 2,
        t_max: 4,
        seed,
        clusters_per_clip: 1,
    })
    .unwrap()
}

/// A stage-1 learner whose live nets differ from the snapshot, so every
/// anchor has a non-zero gradient.
pub fn perturbed_learner(seed: u64) -> Learner {
    let cfg = TrainConfig {
        dim: 3,
        hidden: 4,
        codebook_size: 4,
        lambda_reg: 2.0,
        mu_reg: 3.0,
        lambda_contra: 1.5,
        max_negatives: 5,
        seed,
        ..TrainConfig::default()
    };
    let mut l = Learner::new(cfg).unwrap();
    let mut r = rng(seed ^ 77);
    // Larger weights than the default init so the nets are visibly non-linear.
    for p in l.tokenizer.params_mut().iter_mut().chain(l.estimator.params_mut()).chain(l.model.params_mut()) {
        *p = r.random_range(-0.8..0.8);
    }
    l.begin_stage(1);
    for p in l.tokenizer.params_mut().iter_mut().chain(l.model.params_mut()) {
        *p += r.random_range(-0.2..0.2);
    }
    l
}

fn tokenizer_outputs(l: &Learner, clips: &[&FeatureClip]) -> Matrix {
    let d = l.config.dim;
    let rows: Vec<Vec<f64>> = clips
        .iter()
        .flat_map(|c| {
            let e = l.tokenizer.infer(&c.features, None).unwrap().reps;
            (0..e.rows()).map(move |i| e.row(i).to_vec()).collect::<Vec<_>>()
        })
        .collect();
    let mut m = Matrix::zeros(rows.len(), d);
    for (i, r) in rows.iter().enumerate() {
        m.row_mut(i).copy_from_slice(r);
    }
    m
}

/// The tokenizer objective with every stop-gradient replaced by its value at
/// the reference state: FD of this surrogate is the straight-through gradient.
struct TokenizerSurrogate {
    indices: Vec<usize>,
    u0: Matrix,
    c0: Matrix,
    neg_seed: u64,
}

impl TokenizerSurrogate {
    fn new(l: &Learner, clips: &[&FeatureClip], neg_seed: u64) -> Self {
        let e = tokenizer_outputs(l, clips);
        let q = quantize(&e, &l.codebook).unwrap();
        Self { indices: q.indices, u0: q.normed_features, c0: q.normed_codes, neg_seed }
    }

    fn value(&self, l: &Learner, clips: &[&FeatureClip]) -> f64 {
        let cfg = &l.config;
        let d = cfg.dim;
        let snap = l.snapshot.as_ref().unwrap();
        let e = tokenizer_outputs(l, clips);
        let codes = l.codebook.codes();
        let mut vq = 0.0;
        let mut anchor = 0.0;
        let mut at = 0;
        let mut align = 0.0;
        for c in clips {
            let eb = snap.tokenizer().infer(&c.features, None).unwrap().reps;
            let teacher = snap.model().infer(&c.features, None).unwrap().reps;
            let mut qst = Matrix::zeros(c.tokens(), d);
            for i in 0..c.tokens() {
                let t = at + i;
                let u = unit(e.row(t));
                let cv = unit(codes.row(self.indices[t]));
                vq += sq(&u, self.c0.row(t)) + sq(self.u0.row(t), &cv);
                anchor += cfg.lambda_reg * sq(&u, &unit(eb.row(i)));
                for j in 0..d {
                    qst.row_mut(i)[j] = u[j] + (self.c0.get(t, j) - self.u0.get(t, j));
                }
            }
            let o = l.estimator.infer(&qst, None).unwrap().reps;
            for i in 0..c.tokens() {
                align -= dot(&unit(o.row(i)), &unit(teacher.row(i)));
            }
            at += c.tokens();
        }
        let contra = contrastive_oracle(e.as_slice(), codes.as_slice(), d, &self.indices, cfg.tau, cfg.max_negatives, self.neg_seed);
        align + vq + anchor + cfg.lambda_contra * contra
    }
}

/// Full tokenizer objective through the toy encoder, estimator and codes.
/// Returns the worst error over the three parameter groups.
pub fn grad_end_to_end_tokenizer(seed: u64) -> f64 {
    let l = perturbed_learner(seed);
    let pool = tiny_pool(seed, 3, l.config.dim);
    let clips: Vec<&FeatureClip> = pool.clips().iter().collect();
    let neg_seed = seed.wrapping_mul(31);
    let step = l.tokenizer_objective(&clips, neg_seed).unwrap();
    let sur = TokenizerSurrogate::new(&l, &clips, neg_seed);
    let mut probe = l.clone();
    let tok = numeric_grad(l.tokenizer.params(), |p| {
        probe.tokenizer.params_mut().copy_from_slice(p);
        sur.value(&probe, &clips)
    });
    probe = l.clone();
    let est = numeric_grad(l.estimator.params(), |p| {
        probe.estimator.params_mut().copy_from_slice(p);
        sur.value(&probe, &clips)
    });
    probe = l.clone();
    let codes = numeric_grad(l.codebook.codes().as_slice(), |p| {
        probe.codebook.codes_mut().as_mut_slice().copy_from_slice(p);
        sur.value(&probe, &clips)
    });
    rel_err(&step.grad_tokenizer, &tok)
        .max(rel_err(&step.grad_estimator, &est))
        .max(rel_err(step.grad_codes.as_slice(), &codes))
}

/// Full model objective through the toy encoder (mask embedding included).
pub fn grad_end_to_end_model(seed: u64) -> f64 {
    let l = perturbed_learner(seed);
    let pool = tiny_pool(seed, 3, l.config.dim);
    let clips: Vec<&FeatureClip> = pool.clips().iter().collect();
    let mut r = rng(seed ^ 99);
    let k = l.config.codebook_size;
    let targets: Vec<Vec<usize>> = clips.iter().map(|c| (0..c.tokens()).map(|_| r.random_range(0..k)).collect()).collect();
    let masks: Vec<MaskPlan> = clips
        .iter()
        .map(|c| {
            let n = r.random_range(1..=c.tokens());
            let pos = rand::seq::index::sample(&mut r, c.tokens(), n).into_vec();
            MaskPlan::from_positions(c.tokens(), &pos).unwrap()
        })
        .collect();
    let step = l.model_objective(&clips, &targets, &masks).unwrap();
    let mut probe = l.clone();
    let num = numeric_grad(l.model.params(), |p| {
        probe.model.params_mut().copy_from_slice(p);
        probe.model_objective(&clips, &targets, &masks).unwrap().total
    });
    rel_err(&step.grad_model, &num)
}

/// Toy encoder w.r.t. its input tokens under a random mask, through both
/// heads with random upstream gradients.
pub fn grad_encoder_input(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (t, d, h, k) = (r.random_range(2..7), r.random_range(2..5), r.random_range(2..6), r.random_range(2..5));
    let shape = NetShape { input: d, hidden: h, output: d, logits: k };
    let params = (0..shape.param_count()).map(|_| r.random_range(-0.8..0.8)).collect();
    let net = ToyNet::from_params(shape, params).unwrap();
    let x = random_matrix(&mut r, t, d);
    let n = r.random_range(0..t);
    let plan = MaskPlan::from_positions(t, &rand::seq::index::sample(&mut r, t, n).into_vec()).unwrap();
    let wr = random_matrix(&mut r, t, d);
    let wl = random_matrix(&mut r, t, k);
    let f = net.forward(&x, Some(&plan)).unwrap();
    let analytic = net.backward(&f, Some(&wr), Some(&wl)).unwrap().input;
    let num = numeric_grad(x.as_slice(), |v| {
        let o = net.infer(&mat(t, d, v), Some(&plan)).unwrap();
        dot(o.reps.as_slice(), wr.as_slice()) + dot(o.logits.as_ref().unwrap().as_slice(), wl.as_slice())
    });
    rel_err(analytic.as_slice(), &num)
}

pub type Suite = (&'static str, fn(u64) -> f64);

pub const GRADIENT_SUITES: [Suite; 10] = [
    ("alignment", grad_alignment),
    ("vq feature path", grad_vq_features),
    ("vq code path", grad_vq_codes),
    ("tokenizer anchor", grad_tokenizer_reg),
    ("mam cross-entropy", grad_mam_ce),
    ("mam distillation", grad_mam_distill),
    ("contrastive", grad_contrastive),
    ("end-to-end tokenizer", grad_end_to_end_tokenizer),
    ("end-to-end model", grad_end_to_end_model),
    ("encoder input path", grad_encoder_input),
];

/// Worst error of `suite` over `GRAD_SEEDS` seeds.
pub fn worst(suite: fn(u64) -> f64) -> f64 {
    (0..GRAD_SEEDS).map(suite).fold(0.0, f64::max)
}

// ------------------------------------------------------------------ oracles

/// Brute-force nearest code by cosine, lowest index on ties.
pub fn quantize_oracle(e: &Matrix, codes: &Matrix) -> Vec<usize> {
    (0..e.rows())
        .map(|t| {
            let u = unit(e.row(t));
            let sims: Vec<f64> = (0..codes.rows()).map(|k| dot(&u, &unit(codes.row(k)))).collect();
            let best = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            sims.iter().position(|&s| s == best).unwrap()
        })
        .collect()
}

/// Ids of the top-`m` clips by max cosine of the pooled mean to any query,
/// ties by id.
pub fn retrieve_oracle(queries: &[Vec<f64>], pool: &CorpusPool, m: usize) -> Vec<(String, f64)> {
    let mut scored: Vec<(String, f64)> = pool
        .clips()
        .iter()
        .map(|c| {
            let p = unit(&c.features.row_mean());
            let s = queries.iter().map(|q| dot(&p, q)).fold(f64::NEG_INFINITY, f64::max);
            (c.id.clone(), s)
        })
        .collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    scored.truncate(m);
    scored
}

/// Exhaustive search over all feasible allocations for the one closest to
/// proportional in squared error, preferring lexicographically larger
/// allocations among equals.
pub fn allocate_oracle(sizes: &[usize], total: usize) -> Vec<usize> {
    let s: usize = sizes.iter().sum();
    let mut best: Option<(u128, Vec<usize>)> = None;
    let mut cur = vec![0; sizes.len()];
    fn rec(i: usize, left: usize, sizes: &[usize], s: usize, total: usize, cur: &mut Vec<usize>, best: &mut Option<(u128, Vec<usize>)>) {
        if i == sizes.len() {
            if left != 0 {
                return;
            }
            let cost: u128 = cur
                .iter()
                .zip(sizes)
                .map(|(&a, &si)| {
                    let diff = (a * s) as i128 - (total * si) as i128;
                    (diff * diff) as u128
                })
                .sum();
            let better = match best {
                None => true,
                Some((c, v)) => cost < *c || (cost == *c && cur.as_slice() > v.as_slice()),
            };
            if better {
                *best = Some((cost, cur.clone()));
            }
            return;
        }
        for a in 0..=sizes[i].min(left) {
            cur[i] = a;
            rec(i + 1, left - a, sizes, s, total, cur, best);
        }
        cur[i] = 0;
    }
    rec(0, total, sizes, s, total, &mut cur, &mut best);
    best.unwrap().1
}

/// mAP from the rank-by-rank definition: a positive's rank counts every
/// strictly higher score plus equal scores earlier in clip order.
pub fn map_oracle(scores: &Matrix, labels: &[Vec<bool>]) -> Option<f64> {
    let n = scores.rows();
    let mut total = 0.0;
    let mut classes = 0;
    for c in 0..scores.cols() {
        let rank = |i: usize| {
            1 + (0..n)
                .filter(|&j| scores.get(j, c) > scores.get(i, c) || (scores.get(j, c) == scores.get(i, c) && j < i))
                .count()
        };
        let pos: Vec<usize> = (0..n).filter(|&i| labels[i][c]).collect();
        if pos.is_empty() {
            continue;
        }
        let ap: f64 = pos
            .iter()
            .map(|&i| {
                let r = rank(i);
                let hits = pos.iter().filter(|&&j| rank(j) <= r).count();
                hits as f64 / r as f64
            })
            .sum::<f64>()
            / pos.len() as f64;
        total += ap;
        classes += 1;
    }
    (classes > 0).then(|| 100.0 * total / classes as f64)
}

/// Macro-F1 over every class that appears in predictions or labels.
pub fn f1_oracle(pred: &[usize], labels: &[usize]) -> f64 {
    let mut classes: Vec<usize> = pred.iter().chain(labels).copied().collect();
    classes.sort_unstable();
    classes.dedup();
    let f1s: Vec<f64> = classes
        .iter()
        .map(|&c| {
            let tp = pred.iter().zip(labels).filter(|(&p, &l)| p == c && l == c).count() as f64;
            let fp = pred.iter().zip(labels).filter(|(&p, &l)| p == c && l != c).count() as f64;
            let fne = pred.iter().zip(labels).filter(|(&p, &l)| p != c && l == c).count() as f64;
            if tp == 0.0 { 0.0 } else { 2.0 * tp / (2.0 * tp + fp + fne) }
        })
        .collect();
    100.0 * f1s.iter().sum::<f64>() / f1s.len() as f64
}

pub fn matrix(rows: usize, cols: usize, data: &[f64]) -> Matrix {
    mat(rows, cols, data)
}

// ------------------------------------------------------- oracle campaigns

/// Each campaign runs `n` random instances and returns the number of
/// disagreements with its oracle.
pub fn campaign_quantize(n: u64) -> usize {
    (0..n)
        .filter(|&s| {
            let mut r = rng(s + 10_000);
            let (t, d, k) = (r.random_range(1..40), r.random_range(1..8), r.random_range(1..=64));
            let e = random_matrix(&mut r, t, d);
            let mut codes = random_matrix(&mut r, k, d);
            if k > 1 && r.random_bool(0.3) {
                // Duplicate a code to exercise the lowest-index tie rule.
                let row = codes.row(0).to_vec();
                codes.row_mut(k - 1).copy_from_slice(&row);
            }
            let cb = Codebook::new(codes.clone()).unwrap();
            let q = quantize(&e, &cb).unwrap();
            let counts_ok = q.assignment_counts.iter().sum::<usize>() == t;
            q.indices != quantize_oracle(&e, &codes) || !counts_ok
        })
        .count()
}

pub fn campaign_retrieve(n: u64) -> usize {
    (0..n)
        .filter(|&s| {
            let mut r = rng(s + 20_000);
            let d = r.random_range(2..6);
            let clips = r.random_range(1..=1000);
            let pool = tiny_pool(s + 20_000, clips, d);
            let nq = r.random_range(1..5);
            let queries: Vec<Vec<f64>> = (0..nq).map(|_| unit(&(0..d).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<_>>())).collect();
            let m = r.random_range(0..=clips);
            let got = sonar_core::sampler::retrieve(&queries, &pool, m).unwrap();
            let want = retrieve_oracle(&queries, &pool, m);
            got.len() != want.len()
                || got.iter().zip(&want).any(|(g, (id, score))| {
                    // Ids must agree unless two scores are equal to rounding.
                    (g.score - score).abs() > 1e-12 || (&g.id != id && (g.score - score).abs() > 0.0)
                })
        })
        .count()
}

pub fn campaign_allocate(n: u64) -> usize {
    (0..n)
        .filter(|&s| {
            let mut r = rng(s + 30_000);
            let strata = r.random_range(1..5);
            let sizes: Vec<usize> = (0..strata).map(|_| r.random_range(0..7)).collect();
            let total = r.random_range(0..=sizes.iter().sum::<usize>());
            sonar_core::sampler::allocate_strata(&sizes, total).unwrap() != allocate_oracle(&sizes, total)
        })
        .count()
}

pub fn campaign_map(n: u64) -> usize {
    (0..n)
        .filter(|&s| {
            let mut r = rng(s + 40_000);
            let (clips, classes) = (r.random_range(1..25), r.random_range(1..6));
            // Coarse scores so that ties are common.
            let scores = Matrix::from_vec(clips, classes, (0..clips * classes).map(|_| r.random_range(0..5) as f64).collect()).unwrap();
            let mut labels: Vec<Vec<bool>> = (0..clips).map(|_| (0..classes).map(|_| r.random_bool(0.3)).collect()).collect();
            labels[0][0] = true;
            let want = map_oracle(&scores, &labels).unwrap();
            let got = sonar_core::metrics::mean_average_precision(&scores, &labels).unwrap();
            (got - want).abs() > 1e-9
        })
        .count()
}

pub fn campaign_f1(n: u64) -> usize {
    (0..n)
        .filter(|&s| {
            let mut r = rng(s + 50_000);
            let (len, classes) = (r.random_range(1..60), r.random_range(1..7));
            let pred: Vec<usize> = (0..len).map(|_| r.random_range(0..classes)).collect();
            let labels: Vec<usize> = (0..len).map(|_| r.random_range(0..classes)).collect();
            let got = sonar_core::metrics::macro_f1(&pred, &labels).unwrap();
            (got - f1_oracle(&pred, &labels)).abs() > 1e-9
        })
        .count()
}

// ------------------------------------------------------------ fuzz inputs

/// Random pool with f32-representable features, unicode ids and a random
/// shape, including single-token clips.
pub fn fuzz_pool(seed: u64) -> CorpusPool {
    let mut r = rng(seed + 60_000);
    let d = r.random_range(1..6);
    let n = r.random_range(0..8);
    let clips = (0..n)
        .map(|i| {
            let t = r.random_range(1..5);
            let data = (0..t * d).map(|_| r.random_range(-1e3f32..1e3f32) as f64).collect();
            FeatureClip::new(format!("clip-{i}-é{}", r.random_range(0..100)), "dömain", Matrix::from_vec(t, d, data).unwrap()).unwrap()
        })
        .collect();
    CorpusPool::new("fuzz", d, clips).unwrap()
}

/// Random learner state: random config values, random parameters, random
/// optimizer moments, with or without a snapshot.
pub fn fuzz_learner(seed: u64) -> Learner {
    let mut r = rng(seed + 70_000);
    let cfg = TrainConfig {
        dim: r.random_range(1..5),
        hidden: r.random_range(1..6),
        codebook_size: r.random_range(1..9),
        learning_rate: r.random_range(1e-5..1e-1),
        gamma: r.random_range(0.01..0.99),
        seed: r.random(),
        reinit: r.random_bool(0.5),
        ..TrainConfig::default()
    };
    let mut l = Learner::new(cfg).unwrap();
    if r.random_bool(0.7) {
        l.begin_stage(r.random_range(0..5));
    }
    for p in l.model.params_mut() {
        *p = r.random_range(-10.0..10.0);
    }
    for v in l.optim.model.v.iter_mut() {
        *v = r.random_range(0.0..1.0);
    }
    l.optim.model.step = r.random_range(0..1000);
    l.progress.epoch = r.random_range(0..10);
    l
}

// --------------------------------------------------------- training checks

pub fn small_shape() -> sonar_core::experiment::ScenarioShape {
    sonar_core::experiment::ScenarioShape {
        dim: 8,
        general_clusters: 4,
        general_clips: 40,
        domain_clusters: 3,
        domain_clips: 24,
        t_min: 3,
        t_max: 6,
        ..Default::default()
    }
}

pub fn small_config(seed: u64) -> TrainConfig {
    TrainConfig { dim: 8, hidden: 12, codebook_size: 16, epochs: 10, batch_size: 8, ..sonar_core::experiment::desk_config(seed) }
}

/// Two identical pretrain + adapt runs produce bit-identical checkpoints and
/// logs.
pub fn determinism_check(seed: u64) -> bool {
    let sc = sonar_core::experiment::desk_scenario(&small_shape(), seed).unwrap();
    let run = || {
        let (mut l, base) = Learner::pretrain(small_config(seed), &sc.general.0).unwrap();
        let out = l.adapt(&sc.domain.0, &sc.general.0, &base.adaptive).unwrap();
        (sonar_core::trainer::encode_checkpoint(&l), sonar_core::trainer::records_to_jsonl(&out.records))
    };
    run() == run()
}

/// Stops a continual stage after `cut` epochs, round-trips the state through
/// checkpoint bytes, finishes, and compares with an uninterrupted stage.
pub fn resume_check(seed: u64, cut: usize) -> bool {
    let sc = sonar_core::experiment::desk_scenario(&small_shape(), seed).unwrap();
    let (base, out) = Learner::pretrain(small_config(seed), &sc.general.0).unwrap();

    let mut whole = base.clone();
    let full = whole.adapt(&sc.domain.0, &sc.general.0, &out.adaptive).unwrap();

    let mut part = base.clone();
    part.begin_stage(1);
    let (data, _) = part.stage_dataset(&sc.domain.0, &sc.general.0, &out.adaptive, 1).unwrap();
    let mut log = Vec::new();
    let done = part.run(&data, Some(cut), &mut log).unwrap();
    let bytes = sonar_core::trainer::encode_checkpoint(&part);
    let mut resumed = sonar_core::trainer::decode_checkpoint(&bytes, Some(&part.config)).unwrap();
    if !done {
        resumed.run(&data, None, &mut log).unwrap();
    }
    resumed == whole
        && sonar_core::trainer::encode_checkpoint(&resumed) == sonar_core::trainer::encode_checkpoint(&whole)
        && log == full.records
}

// ------------------------------------------------------- retention table

pub const TABLE_BASELINE: f64 = 34.8;

/// (block, method, printed mAP, printed FR, printed decimals) for the EMO,
/// FMA and FreeSound blocks of the retention table.
pub const RETENTION_TABLE: [(&str, &str, f64, f64, i32); 15] = [
    ("EMO", "DCPT", 13.7, 60.6, 1),
    ("EMO", "SONAR", 34.9, -0.3, 1),
    ("EMO", "- Clustered Codebook", 34.6, 0.6, 1),
    ("EMO", "- Stratified Sampling", 34.7, 0.3, 1),
    ("EMO", "- Both Above", 34.3, 1.4, 1),
    ("FMA", "DCPT", 14.7, 57.76, 2),
    ("FMA", "SONAR", 34.7, 0.3, 1),
    ("FMA", "- Clustered Codebook", 34.2, 1.7, 1),
    ("FMA", "- Stratified Sampling", 34.4, 1.2, 1),
    ("FMA", "- Both Above", 33.8, 2.9, 1),
    ("FreeSound", "DCPT", 13.6, 60.9, 1),
    ("FreeSound", "SONAR", 34.7, 0.3, 1),
    ("FreeSound", "- Clustered Codebook", 34.3, 1.4, 1),
    ("FreeSound", "- Stratified Sampling", 34.4, 1.2, 1),
    ("FreeSound", "- Both Above", 33.9, 2.6, 1),
];

pub fn round_to(x: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (x * s).round() / s
}

/// Entries whose FR does not round to the printed value, as
/// (block, method, computed, printed).
pub fn table_mismatches() -> Vec<(&'static str, &'static str, f64, f64)> {
    RETENTION_TABLE
        .iter()
        .filter_map(|&(block, method, map, fr, dec)| {
            let got = sonar_core::metrics::forgetting_rate(TABLE_BASELINE, map).unwrap();
            ((round_to(got, dec) - fr).abs() > 1e-9).then_some((block, method, got, fr))
        })
        .collect()
}
