//! Two-stage training.
//!
//! The alignment stage teaches the projector to map passage embeddings to
//! vectors from which the frozen LM can reconstruct the passage text. The
//! ranking stage trains projector and LM with a teacher-forced ListMLE loss on
//! the embeddings-only prompt, the same loss on a prompt that also carries the
//! passage text, and a KL term pulling the former's step distributions toward
//! the latter's.

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lm::{
    assemble_align_input, assemble_rank_input, draw_align_variant, lm_tokenize, LmTrace,
    MixedInputSequence, Origin, PrefixSource, PromptTemplate, ToyLm,
};
use crate::model::{Model, Stage};
use crate::numerics::{dot, log_softmax, matmul, matmul_nt, matmul_tn, Matrix, ParamSet, Rng};
use crate::projector::ProjectorTrace;
use crate::retrieval::{words, Corpus, Passage, Query};

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentSample {
    pub text: String,
    pub tokens: Vec<u32>,
    pub embedding: Vec<f64>,
}

impl AlignmentSample {
    /// Encodes `text` with the frozen encoder; the reconstruction target is
    /// its first `max_tokens` words.
    pub fn new(model: &Model, text: &str, max_tokens: usize) -> Result<Self> {
        let mut tokens = lm_tokenize(text, model.lm.cfg.vocab_size);
        tokens.truncate(max_tokens);
        if tokens.is_empty() {
            return Err(Error::invalid("empty reconstruction target"));
        }
        Ok(Self {
            text: text.to_string(),
            tokens,
            embedding: model.encoder.encode(text)?.values,
        })
    }
}

struct AlignTape {
    seq: MixedInputSequence,
    proj_trace: ProjectorTrace,
    lm_trace: LmTrace,
    first_row: usize,
    rows: Matrix,
    probs: Matrix,
    loss: f64,
}

fn align_forward(model: &Model, sample: &AlignmentSample, template: &PromptTemplate, variant: usize) -> Result<AlignTape> {
    let t = sample.tokens.len();
    if t == 0 {
        return Err(Error::invalid("empty reconstruction target"));
    }
    let (projected, proj_trace) = model.projector.forward(&Matrix::row_vector(&sample.embedding))?;
    let mut seq = assemble_align_input(&model.lm, template, variant, &projected)?;
    let first_row = seq.len() - 1;
    seq.push_text(&model.lm, &sample.tokens[..t - 1], Origin::Content)?;
    let (hidden, lm_trace) = model.lm.forward_trace(&seq)?;
    let mut rows = Matrix::zeros(0, hidden.cols());
    for r in first_row..first_row + t {
        rows.push_row(hidden.row(r))?;
    }
    let logits = matmul(&rows, &model.lm.vocab_head.value)?;
    let mut probs = Matrix::zeros(t, logits.cols());
    let mut loss = 0.0;
    for (i, &target) in sample.tokens.iter().enumerate() {
        let ls = log_softmax(logits.row(i))?;
        loss -= ls[target as usize];
        for (p, l) in probs.row_mut(i).iter_mut().zip(&ls) {
            *p = l.exp();
        }
    }
    Ok(AlignTape {
        seq,
        proj_trace,
        lm_trace,
        first_row,
        rows,
        probs,
        loss,
    })
}

/// Summed token negative log-likelihood of reconstructing the sample's text
/// from its projected embedding under alignment prompt `variant`.
pub fn alignment_loss(model: &Model, sample: &AlignmentSample, variant: usize) -> Result<f64> {
    Ok(align_forward(model, sample, &PromptTemplate::align(), variant)?.loss)
}

/// As [`alignment_loss`], also accumulating gradients into trainable
/// parameters.
pub fn alignment_loss_backward(model: &mut Model, sample: &AlignmentSample, variant: usize) -> Result<f64> {
    let tape = align_forward(model, sample, &PromptTemplate::align(), variant)?;
    let mut d_logits = tape.probs.clone();
    for (i, &target) in sample.tokens.iter().enumerate() {
        d_logits.row_mut(i)[target as usize] -= 1.0;
    }
    if model.lm.vocab_head.trainable {
        model.lm.vocab_head.accumulate(&matmul_tn(&tape.rows, &d_logits)?)?;
    }
    let d_rows = matmul_nt(&d_logits, &model.lm.vocab_head.value)?;
    let mut d_hidden = Matrix::zeros(tape.seq.len(), model.lm.cfg.d_model);
    for i in 0..d_rows.rows() {
        d_hidden.row_mut(tape.first_row + i).copy_from_slice(d_rows.row(i));
    }
    let d_inputs = model.lm.backward(&tape.lm_trace, &d_hidden)?;
    let d_projected = model.lm.scatter_input_grads(&tape.seq, &d_inputs, 1)?;
    model.projector.backward(&tape.proj_trace, &d_projected)?;
    Ok(tape.loss)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankSample {
    pub query: Query,
    pub passages: Vec<Passage>,
    /// Encoder embeddings, one row per passage.
    pub embeddings: Matrix,
    /// LM word tokens of each passage's text.
    pub contents: Vec<Vec<u32>>,
    /// Passage indices, best first.
    pub golden: Vec<usize>,
}

fn check_permutation(golden: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if golden.len() != n || golden.iter().any(|&g| g >= n || std::mem::replace(&mut seen[g], true)) {
        return Err(Error::invalid("golden ranking is not a permutation of the passages"));
    }
    Ok(())
}

impl RankSample {
    pub fn new(model: &Model, query: Query, passages: Vec<Passage>, golden: Vec<usize>) -> Result<Self> {
        if passages.is_empty() {
            return Err(Error::invalid("rank sample without passages"));
        }
        check_permutation(&golden, passages.len())?;
        let mut embeddings = Matrix::zeros(0, model.encoder.dim());
        let mut contents = Vec::with_capacity(passages.len());
        for p in &passages {
            embeddings.push_row(&model.encoder.encode(&p.text)?.values)?;
            contents.push(lm_tokenize(&p.text, model.lm.cfg.vocab_size));
        }
        Ok(Self {
            query,
            passages,
            embeddings,
            contents,
            golden,
        })
    }

    pub fn from_record(model: &Model, record: RankRecord) -> Result<Self> {
        Self::new(model, record.query, record.passages, record.golden)
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    /// Passage ids in golden order.
    pub fn golden_ids(&self) -> Vec<&str> {
        self.golden.iter().map(|&g| self.passages[g].id.as_str()).collect()
    }
}

/// One line of a ranking-stage dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRecord {
    pub query: Query,
    pub passages: Vec<Passage>,
    pub golden: Vec<usize>,
}

pub fn read_rank_records(reader: impl BufRead) -> Result<Vec<RankRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RankRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        check_permutation(&rec.golden, rec.passages.len()).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_rank_records(mut w: impl Write, records: &[RankRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Ranking prompts used in training: embeddings only, and embeddings plus text.
#[derive(Clone, Debug)]
pub struct RankTemplates {
    pub embedding: PromptTemplate,
    pub content: PromptTemplate,
}

impl Default for RankTemplates {
    fn default() -> Self {
        Self {
            embedding: PromptTemplate::rank_embedding(),
            content: PromptTemplate::rank_content(),
        }
    }
}

/// Prompt followed by the golden ranking's first `n - 1` passages.
pub fn teacher_forced_sequence(
    lm: &ToyLm,
    template: &PromptTemplate,
    sample: &RankSample,
    projected: &Matrix,
) -> Result<MixedInputSequence> {
    let contents = Some(sample.contents.as_slice());
    let mut seq = assemble_rank_input(lm, template, &sample.query.text, projected, contents)?;
    for &g in &sample.golden[..sample.len() - 1] {
        seq.push_passage(projected, g, Origin::RankedSpecial(PrefixSource::Golden))?;
    }
    Ok(seq)
}

struct BranchTape {
    seq: MixedInputSequence,
    trace: LmTrace,
    first_row: usize,
    hidden: Matrix,
    /// Step `i` log-probabilities over golden[i..].
    log_probs: Vec<Vec<f64>>,
}

fn branch_forward(lm: &ToyLm, template: &PromptTemplate, sample: &RankSample, projected: &Matrix) -> Result<BranchTape> {
    let n = sample.len();
    let seq = teacher_forced_sequence(lm, template, sample, projected)?;
    let first_row = seq.len() - n;
    let (hidden, trace) = lm.forward_trace(&seq)?;
    let mut log_probs = Vec::with_capacity(n);
    for i in 0..n {
        let h = hidden.row(first_row + i);
        let logits: Vec<f64> = sample.golden[i..].iter().map(|&c| dot(h, projected.row(c))).collect();
        log_probs.push(log_softmax(&logits)?);
    }
    Ok(BranchTape {
        seq,
        trace,
        first_row,
        hidden,
        log_probs,
    })
}

/// Back-propagates step-logit gradients `d_logits[i][j]` (for golden[i + j])
/// through one branch. Returns the gradient w.r.t. the projected embeddings.
fn branch_backward(
    lm: &mut ToyLm,
    tape: &BranchTape,
    golden: &[usize],
    projected: &Matrix,
    d_logits: &[Vec<f64>],
) -> Result<Matrix> {
    let n = golden.len();
    let d = lm.cfg.d_model;
    let mut d_hidden = Matrix::zeros(tape.seq.len(), d);
    let mut d_projected = Matrix::zeros(n, d);
    for (i, dz) in d_logits.iter().enumerate() {
        let row = tape.first_row + i;
        let h = tape.hidden.row(row).to_vec();
        for (j, &g) in dz.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let c = golden[i + j];
            for (a, b) in d_hidden.row_mut(row).iter_mut().zip(projected.row(c)) {
                *a += g * b;
            }
            for (a, b) in d_projected.row_mut(c).iter_mut().zip(&h) {
                *a += g * b;
            }
        }
    }
    let d_inputs = lm.backward(&tape.trace, &d_hidden)?;
    let d_in = lm.scatter_input_grads(&tape.seq, &d_inputs, n)?;
    d_projected.add_assign(&d_in)?;
    Ok(d_projected)
}

/// Per-sample ranking-stage loss terms, unweighted, plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankLosses {
    pub rank: f64,
    pub content: f64,
    pub kl: f64,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rank: f64,
    pub content: f64,
    pub kl: f64,
    /// Number of leading list steps that contribute; `None` uses the whole
    /// list. Truncation keeps ties at the bottom of a graded ranking from
    /// adding gradient noise.
    pub depth: Option<usize>,
}

impl LossWeights {
    /// `L_rank + L_content + alpha * L_kl`.
    pub fn combined(alpha: f64) -> Self {
        Self {
            rank: 1.0,
            content: 1.0,
            kl: alpha,
            depth: None,
        }
    }

    pub const RANK: Self = Self { rank: 1.0, content: 0.0, kl: 0.0, depth: None };
    pub const CONTENT: Self = Self { rank: 0.0, content: 1.0, kl: 0.0, depth: None };
    pub const KL: Self = Self { rank: 0.0, content: 0.0, kl: 1.0, depth: None };
}

fn kl_step(p_log: &[f64], q_log: &[f64]) -> f64 {
    p_log.iter().zip(q_log).map(|(lp, lq)| lp.exp() * (lp - lq)).sum()
}

struct RankTape {
    proj_trace: ProjectorTrace,
    projected: Matrix,
    embed: Option<(BranchTape, Vec<Vec<f64>>)>,
    content: Option<(BranchTape, Vec<Vec<f64>>)>,
}

fn rank_forward(
    model: &Model,
    templates: &RankTemplates,
    sample: &RankSample,
    weights: LossWeights,
) -> Result<(RankLosses, RankTape)> {
    check_permutation(&sample.golden, sample.len())?;
    let (projected, proj_trace) = model.projector.forward(&sample.embeddings)?;
    let need_embed = weights.rank != 0.0 || weights.kl != 0.0;
    let need_content = weights.content != 0.0 || weights.kl != 0.0;
    let embed = need_embed
        .then(|| branch_forward(&model.lm, &templates.embedding, sample, &projected))
        .transpose()?;
    let content = need_content
        .then(|| branch_forward(&model.lm, &templates.content, sample, &projected))
        .transpose()?;

    let depth = weights.depth.unwrap_or(usize::MAX);
    let mut losses = RankLosses::default();
    if let Some(e) = &embed {
        losses.rank = -e.log_probs.iter().take(depth).map(|lp| lp[0]).sum::<f64>();
    }
    if let Some(c) = &content {
        losses.content = -c.log_probs.iter().take(depth).map(|lp| lp[0]).sum::<f64>();
    }
    if let (Some(e), Some(c)) = (&embed, &content) {
        losses.kl = e.log_probs.iter().zip(&c.log_probs).take(depth).map(|(p, q)| kl_step(p, q)).sum();
    }
    losses.total = weights.rank * losses.rank + weights.content * losses.content + weights.kl * losses.kl;

    // Step-logit gradients. For KL(p || q) with p from the embeddings-only
    // branch: d/dz_p = p * (ln p - ln q - KL) and d/dz_q = q - p.
    let embed_grads = embed.as_ref().map(|e| {
        e.log_probs
            .iter()
            .take(depth)
            .enumerate()
            .map(|(i, lp)| {
                let p: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
                let mut g: Vec<f64> = p.iter().map(|pi| weights.rank * pi).collect();
                g[0] -= weights.rank;
                if let (Some(c), true) = (&content, weights.kl != 0.0) {
                    let lq = &c.log_probs[i];
                    let kl = kl_step(lp, lq);
                    for (j, gj) in g.iter_mut().enumerate() {
                        *gj += weights.kl * p[j] * (lp[j] - lq[j] - kl);
                    }
                }
                g
            })
            .collect::<Vec<_>>()
    });
    let content_grads = content.as_ref().map(|c| {
        c.log_probs
            .iter()
            .take(depth)
            .enumerate()
            .map(|(i, lq)| {
                let q: Vec<f64> = lq.iter().map(|l| l.exp()).collect();
                let mut g: Vec<f64> = q.iter().map(|qi| weights.content * qi).collect();
                g[0] -= weights.content;
                if let (Some(e), true) = (&embed, weights.kl != 0.0) {
                    for (j, gj) in g.iter_mut().enumerate() {
                        *gj += weights.kl * (q[j] - e.log_probs[i][j].exp());
                    }
                }
                g
            })
            .collect::<Vec<_>>()
    });
    Ok((
        losses,
        RankTape {
            proj_trace,
            projected,
            embed: embed.zip(embed_grads),
            content: content.zip(content_grads),
        },
    ))
}

/// Loss terms for `sample` under `weights`, without gradients.
pub fn rank_objective(model: &Model, templates: &RankTemplates, sample: &RankSample, weights: LossWeights) -> Result<RankLosses> {
    Ok(rank_forward(model, templates, sample, weights)?.0)
}

/// Loss terms for `sample`, accumulating gradients of the weighted total.
pub fn rank_objective_backward(
    model: &mut Model,
    templates: &RankTemplates,
    sample: &RankSample,
    weights: LossWeights,
) -> Result<RankLosses> {
    let (losses, tape) = rank_forward(model, templates, sample, weights)?;
    let mut d_projected = Matrix::zeros(sample.len(), model.lm.cfg.d_model);
    for (branch, dz) in [&tape.embed, &tape.content].into_iter().flatten() {
        d_projected.add_assign(&branch_backward(&mut model.lm, branch, &sample.golden, &tape.projected, dz)?)?;
    }
    model.projector.backward(&tape.proj_trace, &d_projected)?;
    Ok(losses)
}

pub fn listmle_rank_loss(model: &Model, templates: &RankTemplates, sample: &RankSample) -> Result<f64> {
    Ok(rank_objective(model, templates, sample, LossWeights::RANK)?.rank)
}

pub fn content_rank_loss(model: &Model, templates: &RankTemplates, sample: &RankSample) -> Result<f64> {
    Ok(rank_objective(model, templates, sample, LossWeights::CONTENT)?.content)
}

pub fn kl_distill_loss(model: &Model, templates: &RankTemplates, sample: &RankSample) -> Result<f64> {
    Ok(rank_objective(model, templates, sample, LossWeights::KL)?.kl)
}

pub fn combined_loss(model: &Model, templates: &RankTemplates, sample: &RankSample, alpha: f64) -> Result<RankLosses> {
    rank_objective(model, templates, sample, LossWeights::combined(alpha))
}

/// Teacher-forced distribution at 0-based `step` over the golden tail
/// `golden[step..]`.
pub fn rank_step_distribution(
    model: &Model,
    templates: &RankTemplates,
    sample: &RankSample,
    step: usize,
    include_content: bool,
) -> Result<Vec<f64>> {
    if step >= sample.len() {
        return Err(Error::invalid(format!("step {step} out of range for {} passages", sample.len())));
    }
    let (projected, _) = model.projector.forward(&sample.embeddings)?;
    let template = if include_content { &templates.content } else { &templates.embedding };
    let tape = branch_forward(&model.lm, template, sample, &projected)?;
    Ok(tape.log_probs[step].iter().map(|l| l.exp()).collect())
}

/// Deterministic relevance scores used to derive golden rankings.
pub trait TeacherScorer {
    fn score(&self, query: &str, passage: &str) -> f64;
}

impl<F: Fn(&str, &str) -> f64> TeacherScorer for F {
    fn score(&self, query: &str, passage: &str) -> f64 {
        self(query, passage)
    }
}

/// Sum of IDF weights of the distinct query words present in the passage.
#[derive(Clone, Debug)]
pub struct LexicalTeacher {
    idf: HashMap<String, f64>,
    unseen_idf: f64,
}

impl LexicalTeacher {
    pub fn from_corpus(corpus: &Corpus) -> Self {
        let n = corpus.len() as f64;
        let mut df: HashMap<String, usize> = HashMap::new();
        for p in corpus.passages() {
            let unique: HashSet<String> = words(&p.text).into_iter().collect();
            for w in unique {
                *df.entry(w).or_default() += 1;
            }
        }
        let idf_of = |df: f64| (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
        Self {
            idf: df.into_iter().map(|(w, d)| (w, idf_of(d as f64))).collect(),
            unseen_idf: idf_of(0.0),
        }
    }
}

impl TeacherScorer for LexicalTeacher {
    fn score(&self, query: &str, passage: &str) -> f64 {
        let present: HashSet<String> = words(passage).into_iter().collect();
        let mut seen = HashSet::new();
        words(query)
            .into_iter()
            .filter(|w| present.contains(w) && seen.insert(w.clone()))
            .map(|w| *self.idf.get(&w).unwrap_or(&self.unseen_idf))
            .sum()
    }
}

/// Passage indices by descending teacher score; ties keep original order.
pub fn make_golden_ranking(query: &Query, passages: &[Passage], teacher: &dyn TeacherScorer) -> Vec<usize> {
    let scores: Vec<f64> = passages.iter().map(|p| teacher.score(&query.text, &p.text)).collect();
    let mut order: Vec<usize> = (0..passages.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Randomly reorders the passages, re-indexing the golden ranking so it names
/// the same passages in the same order.
pub fn augment_shuffle(sample: &RankSample, rng: &mut Rng) -> RankSample {
    let n = sample.len();
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    permute_sample(sample, &perm)
}

/// New position `k` holds old passage `perm[k]`.
pub fn permute_sample(sample: &RankSample, perm: &[usize]) -> RankSample {
    let mut inverse = vec![0; perm.len()];
    for (k, &old) in perm.iter().enumerate() {
        inverse[old] = k;
    }
    let mut embeddings = Matrix::zeros(0, sample.embeddings.cols());
    for &old in perm {
        embeddings
            .push_row(sample.embeddings.row(old))
            .expect("rows share the embedding width");
    }
    RankSample {
        query: sample.query.clone(),
        passages: perm.iter().map(|&o| sample.passages[o].clone()).collect(),
        embeddings,
        contents: perm.iter().map(|&o| sample.contents[o].clone()).collect(),
        golden: sample.golden.iter().map(|&g| inverse[g]).collect(),
    }
}

/// Drops samples whose content-carrying teacher-forced sequence would not fit
/// in the LM's context. Returns the kept samples and the number dropped.
pub fn filter_by_length(lm: &ToyLm, templates: &RankTemplates, samples: Vec<RankSample>) -> Result<(Vec<RankSample>, usize)> {
    let mut kept = Vec::with_capacity(samples.len());
    let mut dropped = 0;
    for s in samples {
        let zeros = Matrix::zeros(s.len(), lm.cfg.d_model);
        match assemble_rank_input(lm, &templates.content, &s.query.text, &zeros, Some(&s.contents)) {
            Ok(_) => kept.push(s),
            Err(Error::WindowTooLarge { .. }) => dropped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok((kept, dropped))
}

/// Adam with bias correction. Moments are kept per parameter, in visit order.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut dyn ParamSet) {
        self.t += 1;
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0;
        params.visit_mut(&mut |_, p| {
            if ms.len() <= idx {
                ms.push(Matrix::zeros(p.value.rows(), p.value.cols()));
                vs.push(Matrix::zeros(p.value.rows(), p.value.cols()));
            }
            if p.trainable {
                let m = ms[idx].data_mut();
                let v = vs[idx].data_mut();
                let g = p.grad.data();
                let w = p.value.data_mut();
                for k in 0..w.len() {
                    m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                    v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                    w[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                }
            }
            idx += 1;
        });
    }
}

/// Scales trainable gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(params: &mut dyn ParamSet, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    params.visit(&mut |_, p| {
        if p.trainable {
            sq += p.grad.frobenius_sq();
        }
    });
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        params.visit_mut(&mut |_, p| p.grad.scale(s));
    }
    norm
}

fn scale_grads(params: &mut dyn ParamSet, s: f64) {
    params.visit_mut(&mut |_, p| p.grad.scale(s));
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage: Stage,
    /// Weight of the KL term.
    pub alpha: f64,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    pub clip_norm: f64,
    /// Reshuffle each sample's passage order every epoch.
    pub shuffle_passages: bool,
    /// Leading list steps scored by the ranking losses; `None` scores all.
    #[serde(default)]
    pub list_depth: Option<usize>,
}

impl TrainConfig {
    pub fn align() -> Self {
        Self {
            stage: Stage::Align,
            alpha: 0.0,
            lr: 1e-4,
            batch: 128,
            epochs: 1,
            seed: 0,
            clip_norm: 1.0,
            shuffle_passages: false,
            list_depth: None,
        }
    }

    pub fn rank() -> Self {
        Self {
            stage: Stage::Rank,
            alpha: 0.2,
            lr: 2e-5,
            batch: 32,
            epochs: 1,
            seed: 0,
            clip_norm: 1.0,
            shuffle_passages: true,
            list_depth: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::invalid("alpha must be non-negative"));
        }
        if !(self.lr >= 0.0) || self.batch == 0 || !(self.clip_norm > 0.0) {
            return Err(Error::invalid("lr must be non-negative, batch and clip_norm positive"));
        }
        if self.stage == Stage::Untrained {
            return Err(Error::invalid("training stage must be align or rank"));
        }
        if self.list_depth == Some(0) {
            return Err(Error::invalid("list depth must be positive"));
        }
        Ok(())
    }
}

/// Mean losses of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub step: usize,
    pub stage: Stage,
    pub total: f64,
    pub rank: f64,
    pub content: f64,
    /// Already multiplied by alpha.
    pub kl: f64,
}

pub const LOSS_LOG_HEADER: &str = "step\tstage\tloss_total\tloss_rank\tloss_content\tloss_kl";

fn log_step(log: &mut Option<&mut dyn Write>, s: &StepLoss) -> Result<()> {
    if let Some(w) = log.as_deref_mut() {
        let stage = match s.stage {
            Stage::Align => "align",
            Stage::Rank => "rank",
            Stage::Untrained => "none",
        };
        writeln!(w, "{}\t{stage}\t{:.6}\t{:.6}\t{:.6}\t{:.6}", s.step, s.total, s.rank, s.content, s.kl)?;
    }
    Ok(())
}

fn batches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

/// Alignment stage: only the projector is updated.
pub fn train_align(
    model: &mut Model,
    samples: &[AlignmentSample],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<StepLoss>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("empty alignment dataset"));
    }
    model.set_trainable(false);
    model.projector.set_trainable(true);
    let template = PromptTemplate::align();
    let mut rng = Rng::labeled(cfg.seed, "train-align");
    let mut adam = Adam::new(cfg.lr);
    let mut history = Vec::new();
    for _ in 0..cfg.epochs {
        for batch in batches(samples.len(), cfg.batch, &mut rng) {
            model.zero_grad();
            let mut total = 0.0;
            for &i in &batch {
                let variant = draw_align_variant(&template, &mut rng);
                total += alignment_loss_backward(model, &samples[i], variant)?;
            }
            let step = history.len() + 1;
            let mean = total / batch.len() as f64;
            if !mean.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            scale_grads(model, 1.0 / batch.len() as f64);
            clip_grad_norm(model, cfg.clip_norm);
            adam.step(model);
            let s = StepLoss {
                step,
                stage: Stage::Align,
                total: mean,
                rank: 0.0,
                content: 0.0,
                kl: 0.0,
            };
            log_step(&mut log, &s)?;
            history.push(s);
        }
    }
    Ok(history)
}

/// Ranking stage: projector and LM are updated, the encoder stays frozen.
pub fn train_rank(
    model: &mut Model,
    templates: &RankTemplates,
    samples: &[RankSample],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<StepLoss>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::invalid("empty ranking dataset"));
    }
    model.set_trainable(true);
    model.encoder.set_trainable(false);
    let weights = LossWeights {
        depth: cfg.list_depth,
        ..LossWeights::combined(cfg.alpha)
    };
    let mut rng = Rng::labeled(cfg.seed, "train-rank");
    let mut adam = Adam::new(cfg.lr);
    let mut history = Vec::new();
    for _ in 0..cfg.epochs {
        for batch in batches(samples.len(), cfg.batch, &mut rng) {
            model.zero_grad();
            let mut sum = RankLosses::default();
            for &i in &batch {
                let shuffled;
                let sample = if cfg.shuffle_passages {
                    shuffled = augment_shuffle(&samples[i], &mut rng);
                    &shuffled
                } else {
                    &samples[i]
                };
                let l = rank_objective_backward(model, templates, sample, weights)?;
                sum.rank += l.rank;
                sum.content += l.content;
                sum.kl += l.kl;
                sum.total += l.total;
            }
            let step = history.len() + 1;
            let b = batch.len() as f64;
            if !sum.total.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            scale_grads(model, 1.0 / b);
            clip_grad_norm(model, cfg.clip_norm);
            adam.step(model);
            let s = StepLoss {
                step,
                stage: Stage::Rank,
                total: sum.total / b,
                rank: sum.rank / b,
                content: sum.content / b,
                kl: cfg.alpha * sum.kl / b,
            };
            log_step(&mut log, &s)?;
            history.push(s);
        }
    }
    Ok(history)
}
