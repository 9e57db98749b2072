//! Greedy decoding constrained to the not-yet-ranked candidates, and the
//! back-to-front sliding window that ranks long lists with it.
//!
//! Each step scores the remaining candidates by the dot product of the last
//! hidden state with their projected embeddings, emits the best one, and feeds
//! that same projected vector back as the next input position.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::TokenStats;
use crate::lm::{assemble_rank_input, KvCache, MixedInputSequence, Origin, PrefixSource, PromptTemplate, ToyLm};
use crate::numerics::{dot, softmax, Matrix};
use crate::projector::Projector;

/// Probabilities over `remaining` (in the given order) from the unnormalized
/// scores `h · projected[c]`.
pub fn score_remaining(h: &[f64], remaining: &[usize], projected: &Matrix) -> Result<Vec<f64>> {
    if remaining.is_empty() {
        return Err(Error::EmptyDistribution);
    }
    let logits = remaining
        .iter()
        .map(|&c| {
            if c >= projected.rows() {
                return Err(Error::invalid(format!("candidate {c} out of range")));
            }
            Ok(dot(h, projected.row(c)))
        })
        .collect::<Result<Vec<_>>>()?;
    softmax(&logits)
}

/// Supplies next-step scores over all `n` candidates given what has been
/// emitted so far. Entries for already-emitted candidates are ignored.
pub trait StepScorer {
    fn step_scores(&mut self, emitted: &[usize]) -> Result<Vec<f64>>;
}

/// A fixed table: row `i` holds the scores used at step `i`.
pub struct TableScorer(pub Vec<Vec<f64>>);

impl StepScorer for TableScorer {
    fn step_scores(&mut self, emitted: &[usize]) -> Result<Vec<f64>> {
        self.0
            .get(emitted.len())
            .cloned()
            .ok_or_else(|| Error::invalid("score table has too few steps"))
    }
}

#[derive(Clone, Debug)]
pub struct DecodingState {
    pub remaining: Vec<usize>,
    pub ranked: Vec<usize>,
}

impl DecodingState {
    pub fn new(n: usize) -> Self {
        Self {
            remaining: (0..n).collect(),
            ranked: Vec::with_capacity(n),
        }
    }

    /// Best remaining candidate under `scores`; ties go to the lowest index.
    fn select(&mut self, scores: &[f64]) -> Result<(usize, f64)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for (slot, &c) in self.remaining.iter().enumerate() {
            let s = *scores
                .get(c)
                .ok_or_else(|| Error::invalid("scorer returned too few scores"))?;
            if s.is_nan() {
                return Err(Error::NonFinite(format!("score of candidate {c}")));
            }
            if best.is_none_or(|(_, bc, bs)| s > bs || (s == bs && c < bc)) {
                best = Some((slot, c, s));
            }
        }
        let (slot, c, s) = best.ok_or(Error::EmptyDistribution)?;
        self.remaining.remove(slot);
        self.ranked.push(c);
        Ok((c, s))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankEntry {
    pub candidate: usize,
    /// Window pass that last placed this candidate.
    pub pass: usize,
    /// Decoding step within that pass.
    pub step: usize,
    /// Score at selection time; only comparable within one pass.
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingList {
    pub entries: Vec<RankEntry>,
}

impl RankingList {
    pub fn order(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.candidate).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_permutation_of(&self, n: usize) -> bool {
        let mut seen = vec![false; n];
        self.entries.len() == n
            && self
                .entries
                .iter()
                .all(|e| e.candidate < n && !std::mem::replace(&mut seen[e.candidate], true))
    }
}

/// Runs greedy constrained decoding for `n` candidates.
pub fn dc_decode_with(scorer: &mut dyn StepScorer, n: usize) -> Result<RankingList> {
    if n == 0 {
        return Err(Error::invalid("no candidates to decode"));
    }
    let mut state = DecodingState::new(n);
    let mut entries = Vec::with_capacity(n);
    for step in 0..n {
        let scores = scorer.step_scores(&state.ranked)?;
        let (candidate, score) = state.select(&scores)?;
        entries.push(RankEntry {
            candidate,
            pass: 0,
            step,
            score,
        });
    }
    Ok(RankingList { entries })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    /// Append each selection to a key/value cache.
    #[default]
    Incremental,
    /// Re-run the whole sequence every step.
    Recompute,
}

/// Scores candidates with the LM, feeding back its own previous selections.
pub struct LmSession<'a> {
    lm: &'a ToyLm,
    projected: &'a Matrix,
    seq: MixedInputSequence,
    cache: KvCache,
    mode: DecodeMode,
    fed: usize,
    prompt_len: usize,
    pub stats: TokenStats,
}

impl<'a> LmSession<'a> {
    pub fn new(lm: &'a ToyLm, projected: &'a Matrix, prompt: MixedInputSequence, mode: DecodeMode) -> Self {
        let prompt_len = prompt.len();
        Self {
            lm,
            projected,
            seq: prompt,
            cache: KvCache::new(&lm.cfg),
            mode,
            fed: 0,
            prompt_len,
            stats: TokenStats::default(),
        }
    }

    /// The prompt followed by every fed-back selection.
    pub fn sequence(&self) -> &MixedInputSequence {
        &self.seq
    }

    pub fn into_sequence(self) -> MixedInputSequence {
        self.seq
    }
}

impl StepScorer for LmSession<'_> {
    fn step_scores(&mut self, emitted: &[usize]) -> Result<Vec<f64>> {
        let started = Instant::now();
        let first = self.fed == 0 && emitted.is_empty() && self.cache.is_empty();
        for &c in &emitted[self.fed..] {
            self.seq
                .push_passage(self.projected, c, Origin::RankedSpecial(PrefixSource::Predicted))?;
        }
        let hidden = match self.mode {
            DecodeMode::Recompute => self.lm.forward(&self.seq)?,
            DecodeMode::Incremental => {
                let done = self.cache.len();
                let fresh = self.seq.vectors.rows() - done;
                let mut rows = Matrix::zeros(0, self.lm.cfg.d_model);
                for r in done..done + fresh {
                    rows.push_row(self.seq.vectors.row(r))?;
                }
                self.lm.forward_cached(&rows, &mut self.cache)?
            }
        };
        self.fed = emitted.len();
        let h = hidden.row(hidden.rows() - 1);
        let scores = (0..self.projected.rows())
            .map(|c| dot(h, self.projected.row(c)))
            .collect();
        let elapsed = started.elapsed().as_secs_f64();
        if first {
            self.stats.processed += self.prompt_len;
            self.stats.prefill_seconds += elapsed;
        } else {
            self.stats.decode_seconds += elapsed;
        }
        self.stats.generated += 1;
        Ok(scores)
    }
}

pub struct DecodeOutput {
    pub ranking: RankingList,
    pub stats: TokenStats,
    pub sequence: MixedInputSequence,
}

/// Ranks the candidates of an assembled embeddings-only prompt.
pub fn dc_decode(
    lm: &ToyLm,
    projected: &Matrix,
    prompt: MixedInputSequence,
    mode: DecodeMode,
) -> Result<DecodeOutput> {
    let n = projected.rows();
    let mut session = LmSession::new(lm, projected, prompt, mode);
    let ranking = dc_decode_with(&mut session, n)?;
    let mut stats = session.stats;
    stats.passes = 1;
    Ok(DecodeOutput {
        ranking,
        stats,
        sequence: session.into_sequence(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSchedule {
    pub n: usize,
    pub w: usize,
    pub s: usize,
}

impl WindowSchedule {
    pub fn new(n: usize, w: usize, s: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("no candidates to rerank"));
        }
        if w == 0 || s == 0 {
            return Err(Error::invalid("window and step must be positive"));
        }
        if s > w {
            return Err(Error::invalid(format!("step {s} exceeds window {w}")));
        }
        Ok(Self { n, w, s })
    }

    pub fn passes(&self) -> usize {
        if self.w >= self.n {
            1
        } else {
            1 + (self.n - self.w).div_ceil(self.s)
        }
    }

    /// Half-open `[start, end)` windows in processing order, from the back of
    /// the list to the front. The last window always starts at 0.
    pub fn windows(&self) -> Vec<(usize, usize)> {
        if self.w >= self.n {
            return vec![(0, self.n)];
        }
        let mut out = Vec::with_capacity(self.passes());
        let mut start = self.n - self.w;
        loop {
            out.push((start, start + self.w));
            if start == 0 {
                break;
            }
            start = start.saturating_sub(self.s);
        }
        out
    }
}

/// Reorders one window of candidates (given as indices into the full list).
pub trait WindowRanker {
    /// Returns the window's candidates best first, as `RankEntry`s whose
    /// `candidate` fields are the passed-in ids.
    fn rank_window(&mut self, window: &[usize], pass: usize) -> Result<Vec<RankEntry>>;
}

/// Reranks `n` candidates, initially in first-stage order `0..n`.
pub fn sliding_window_rerank(ranker: &mut dyn WindowRanker, schedule: &WindowSchedule) -> Result<RankingList> {
    let n = schedule.n;
    let mut order: Vec<usize> = (0..n).collect();
    let mut provenance: Vec<Option<RankEntry>> = vec![None; n];
    for (pass, (start, end)) in schedule.windows().into_iter().enumerate() {
        let window = order[start..end].to_vec();
        let ranked = ranker.rank_window(&window, pass)?;
        let mut seen: Vec<usize> = ranked.iter().map(|e| e.candidate).collect();
        seen.sort_unstable();
        let mut expect = window.clone();
        expect.sort_unstable();
        if seen != expect {
            return Err(Error::invalid("window ranker did not return a permutation"));
        }
        for (slot, entry) in ranked.into_iter().enumerate() {
            order[start + slot] = entry.candidate;
            provenance[entry.candidate] = Some(RankEntry { pass, ..entry });
        }
    }
    let entries = order
        .into_iter()
        .map(|c| {
            provenance[c].unwrap_or(RankEntry {
                candidate: c,
                pass: 0,
                step: 0,
                score: f64::NAN,
            })
        })
        .collect();
    Ok(RankingList { entries })
}

/// Window ranker backed by the projector and LM.
pub struct LmWindowRanker<'a> {
    pub lm: &'a ToyLm,
    pub projector: &'a Projector,
    pub template: &'a PromptTemplate,
    pub query: &'a str,
    /// Encoder embeddings of all candidates, in first-stage order.
    pub embeddings: &'a Matrix,
    pub mode: DecodeMode,
    pub stats: TokenStats,
    /// Assembled sequences of every pass, kept when `keep_sequences` is set.
    pub sequences: Vec<MixedInputSequence>,
    pub keep_sequences: bool,
}

impl<'a> LmWindowRanker<'a> {
    pub fn new(
        lm: &'a ToyLm,
        projector: &'a Projector,
        template: &'a PromptTemplate,
        query: &'a str,
        embeddings: &'a Matrix,
    ) -> Self {
        Self {
            lm,
            projector,
            template,
            query,
            embeddings,
            mode: DecodeMode::Incremental,
            stats: TokenStats::default(),
            sequences: Vec::new(),
            keep_sequences: false,
        }
    }
}

impl WindowRanker for LmWindowRanker<'_> {
    fn rank_window(&mut self, window: &[usize], pass: usize) -> Result<Vec<RankEntry>> {
        let mut sub = Matrix::zeros(0, self.embeddings.cols());
        for &c in window {
            sub.push_row(self.embeddings.row(c))?;
        }
        let (projected, _) = self.projector.forward(&sub)?;
        let prompt = assemble_rank_input(self.lm, self.template, self.query, &projected, None)?;
        let out = dc_decode(self.lm, &projected, prompt, self.mode)?;
        self.stats.absorb(&out.stats);
        if self.keep_sequences {
            self.sequences.push(out.sequence);
        }
        Ok(out
            .ranking
            .entries
            .into_iter()
            .map(|e| RankEntry {
                candidate: window[e.candidate],
                pass,
                ..e
            })
            .collect())
    }
}
