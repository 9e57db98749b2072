//! Miniature decoder-only transformer, prompt templates, and assembly of
//! mixed token / passage-embedding input sequences.
//!
//! A passage enters the model as a single position whose input vector is the
//! projector output for that passage's embedding. The same vector is used as
//! the passage's "output embedding" when decoding is constrained to the
//! remaining candidates.
//!
//! The forward pass is shared between training (full sequence, with a trace
//! for the hand-written backward pass) and inference (incremental, with a
//! key/value cache). Because attention is causal, running a prefix and then
//! appending rows produces the same hidden states as one full pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    gelu, gelu_grad, glorot, matmul, matmul_nt, matmul_tn, LayerNorm, LayerNormCache, Linear,
    Matrix, ParamSet, Parameter, Rng,
};
use crate::retrieval::{hash_word, words};

pub const BOS: u32 = 0;
pub const LBRACKET: u32 = 1;
pub const RBRACKET: u32 = 2;
/// Ids below this are reserved; hashed words occupy `[RESERVED, vocab_size)`.
pub const RESERVED: u32 = 3;

/// Bumped whenever a bundled template's text changes.
pub const TEMPLATE_VERSION: u32 = 1;

const ALIGN_TEMPLATES: &str = include_str!("../templates/align.txt");
const RANK_EMBEDDING_TEMPLATE: &str = include_str!("../templates/rank_embedding.txt");
const RANK_CONTENT_TEMPLATE: &str = include_str!("../templates/rank_content.txt");

/// Every word appearing in the bundled templates.
pub fn template_vocabulary() -> Vec<String> {
    let mut all = Vec::new();
    for text in [ALIGN_TEMPLATES, RANK_EMBEDDING_TEMPLATE, RANK_CONTENT_TEMPLATE] {
        all.extend(words(text));
    }
    all.sort();
    all.dedup();
    all
}

pub fn lm_token(word: &str, vocab_size: usize) -> u32 {
    RESERVED + hash_word(word, vocab_size - RESERVED as usize)
}

/// Word tokens of free text (queries, passage content, reconstruction targets).
pub fn lm_tokenize(text: &str, vocab_size: usize) -> Vec<u32> {
    words(text).iter().map(|w| lm_token(w, vocab_size)).collect()
}

/// Tokens of template literal text: words plus bracket tokens.
fn literal_tokens(text: &str, vocab_size: usize) -> Vec<u32> {
    let mut out = Vec::new();
    let mut word = String::new();
    let flush = |word: &mut String, out: &mut Vec<u32>| {
        if !word.is_empty() {
            out.push(lm_token(&word.to_lowercase(), vocab_size));
            word.clear();
        }
    };
    for c in text.chars() {
        if c.is_alphanumeric() {
            word.push(c);
            continue;
        }
        flush(&mut word, &mut out);
        match c {
            '[' => out.push(LBRACKET),
            ']' => out.push(RBRACKET),
            _ => {}
        }
    }
    flush(&mut word, &mut out);
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Piece {
    Literal(String),
    /// `{{n}}`, the number of passages in the window
    Count,
    /// `{{i}}`, 1-based passage number
    Number,
    Query,
    Embedding,
    Content,
    Text,
}

fn parse_pieces(text: &str) -> Result<Vec<Piece>> {
    let mut pieces = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find("{{") {
        if open > 0 {
            pieces.push(Piece::Literal(rest[..open].to_string()));
        }
        let close = rest[open..]
            .find("}}")
            .ok_or_else(|| Error::Format(format!("unterminated placeholder in `{text}`")))?;
        let name = &rest[open + 2..open + close];
        pieces.push(match name {
            "n" => Piece::Count,
            "i" => Piece::Number,
            "query" => Piece::Query,
            "embedding" => Piece::Embedding,
            "content" => Piece::Content,
            "text" => Piece::Text,
            other => return Err(Error::Format(format!("unknown placeholder `{other}`"))),
        });
        rest = &rest[open + close + 2..];
    }
    if !rest.is_empty() {
        pieces.push(Piece::Literal(rest.to_string()));
    }
    Ok(pieces)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateKind {
    Align,
    RankEmbeddingOnly,
    RankEmbeddingPlusContent,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TemplateBody {
    Rank {
        header: Vec<Piece>,
        item: Vec<Piece>,
        footer: Vec<Piece>,
    },
    Align {
        variants: Vec<Vec<Piece>>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PromptTemplate {
    pub kind: TemplateKind,
    pub body: TemplateBody,
}

impl PromptTemplate {
    /// The embeddings-only ranking prompt used for inference.
    pub fn rank_embedding() -> Self {
        Self::parse_rank(TemplateKind::RankEmbeddingOnly, RANK_EMBEDDING_TEMPLATE)
            .expect("bundled template parses")
    }

    /// The ranking prompt carrying each passage's text after its special token.
    pub fn rank_content() -> Self {
        Self::parse_rank(TemplateKind::RankEmbeddingPlusContent, RANK_CONTENT_TEMPLATE)
            .expect("bundled template parses")
    }

    pub fn align() -> Self {
        Self::parse_align(ALIGN_TEMPLATES).expect("bundled template parses")
    }

    /// Parses a ranking template: header, then a `{{#each}}` ... `{{/each}}`
    /// block repeated per passage, then footer.
    pub fn parse_rank(kind: TemplateKind, text: &str) -> Result<Self> {
        let (header, rest) = text
            .split_once("{{#each}}")
            .ok_or_else(|| Error::Format("rank template lacks {{#each}}".into()))?;
        let (item, footer) = rest
            .split_once("{{/each}}")
            .ok_or_else(|| Error::Format("rank template lacks {{/each}}".into()))?;
        let item = parse_pieces(item)?;
        if item.iter().filter(|p| **p == Piece::Embedding).count() != 1 {
            return Err(Error::Format("item block needs exactly one {{embedding}}".into()));
        }
        let has_content = item.contains(&Piece::Content);
        if has_content != (kind == TemplateKind::RankEmbeddingPlusContent) {
            return Err(Error::Format("{{content}} must appear iff the template carries content".into()));
        }
        Ok(Self {
            kind,
            body: TemplateBody::Rank {
                header: parse_pieces(header)?,
                item,
                footer: parse_pieces(footer)?,
            },
        })
    }

    /// One variant per non-empty line, each with exactly one `{{embedding}}`.
    pub fn parse_align(text: &str) -> Result<Self> {
        let variants = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(parse_pieces)
            .collect::<Result<Vec<_>>>()?;
        if variants.is_empty()
            || variants
                .iter()
                .any(|v| v.iter().filter(|p| **p == Piece::Embedding).count() != 1)
        {
            return Err(Error::Format("each align variant needs one {{embedding}}".into()));
        }
        Ok(Self {
            kind: TemplateKind::Align,
            body: TemplateBody::Align { variants },
        })
    }

    pub fn variant_count(&self) -> usize {
        match &self.body {
            TemplateBody::Align { variants } => variants.len(),
            TemplateBody::Rank { .. } => 1,
        }
    }

    /// Tokens of a rendered prompt that do not depend on the query or the
    /// passages: BOS plus header and footer text (counts render as one token).
    pub fn fixed_len(&self, vocab_size: usize) -> usize {
        let count = |pieces: &[Piece]| -> usize {
            pieces
                .iter()
                .map(|p| match p {
                    Piece::Literal(s) => literal_tokens(s, vocab_size).len(),
                    Piece::Count | Piece::Number => 1,
                    _ => 0,
                })
                .sum()
        };
        match &self.body {
            TemplateBody::Rank { header, footer, .. } => 1 + count(header) + count(footer),
            TemplateBody::Align { .. } => 0,
        }
    }

    /// How many times the query is rendered into one prompt.
    pub fn query_occurrences(&self) -> usize {
        match &self.body {
            TemplateBody::Rank { header, item, footer } => {
                let q = |ps: &[Piece]| ps.iter().filter(|p| **p == Piece::Query).count();
                q(header) + q(footer) + q(item)
            }
            TemplateBody::Align { .. } => 0,
        }
    }

    /// Template tokens added per listed passage, excluding the passage's own
    /// special position and content.
    pub fn item_scaffold_len(&self, vocab_size: usize) -> usize {
        match &self.body {
            TemplateBody::Rank { item, .. } => item
                .iter()
                .map(|p| match p {
                    Piece::Literal(s) => literal_tokens(s, vocab_size).len(),
                    Piece::Number | Piece::Count => 1,
                    _ => 0,
                })
                .sum(),
            TemplateBody::Align { .. } => 0,
        }
    }
}

/// Whether a fed-back ranked token came from the golden list (training) or the
/// model's own previous choice (inference).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrefixSource {
    Golden,
    Predicted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    Instruction,
    Query,
    PassageSpecial,
    Content,
    RankedSpecial(PrefixSource),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Token(u32),
    /// Candidate index into the projected-embedding matrix.
    Passage(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Position {
    pub origin: Origin,
    pub slot: Slot,
    pub passage_of: Option<usize>,
}

/// LM-space input vectors with per-position provenance.
#[derive(Clone, Debug)]
pub struct MixedInputSequence {
    pub vectors: Matrix,
    pub positions: Vec<Position>,
}

impl MixedInputSequence {
    fn new(d: usize) -> Self {
        Self {
            vectors: Matrix::zeros(0, d),
            positions: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn count(&self, origin: Origin) -> usize {
        self.positions.iter().filter(|p| p.origin == origin).count()
    }

    fn push_token(&mut self, lm: &ToyLm, id: u32, origin: Origin, passage_of: Option<usize>) -> Result<()> {
        self.vectors.push_row(lm.token_table.value.row(id as usize))?;
        self.positions.push(Position {
            origin,
            slot: Slot::Token(id),
            passage_of,
        });
        Ok(())
    }

    fn push_tokens(&mut self, lm: &ToyLm, ids: &[u32], origin: Origin, passage_of: Option<usize>) -> Result<()> {
        for &id in ids {
            self.push_token(lm, id, origin, passage_of)?;
        }
        Ok(())
    }

    /// Appends a candidate's projected vector.
    pub fn push_passage(&mut self, projected: &Matrix, candidate: usize, origin: Origin) -> Result<()> {
        if candidate >= projected.rows() {
            return Err(Error::invalid(format!("candidate {candidate} out of range")));
        }
        self.vectors.push_row(projected.row(candidate))?;
        self.positions.push(Position {
            origin,
            slot: Slot::Passage(candidate),
            passage_of: Some(candidate),
        });
        Ok(())
    }

    /// Appends word tokens for `text` (reconstruction targets).
    pub fn push_text(&mut self, lm: &ToyLm, text_ids: &[u32], origin: Origin) -> Result<()> {
        self.push_tokens(lm, text_ids, origin, None)
    }
}

fn render_pieces(
    seq: &mut MixedInputSequence,
    lm: &ToyLm,
    pieces: &[Piece],
    ctx: &RenderCtx<'_>,
    projected: &Matrix,
) -> Result<()> {
    let v = lm.cfg.vocab_size;
    for piece in pieces {
        match piece {
            Piece::Literal(s) => seq.push_tokens(lm, &literal_tokens(s, v), Origin::Instruction, None)?,
            Piece::Count => seq.push_tokens(lm, &[lm_token(&ctx.n.to_string(), v)], Origin::Instruction, None)?,
            Piece::Number => {
                let i = ctx.item.map_or(0, |i| i + 1);
                seq.push_tokens(lm, &[lm_token(&i.to_string(), v)], Origin::Instruction, None)?
            }
            Piece::Query => seq.push_tokens(lm, ctx.query, Origin::Query, None)?,
            Piece::Embedding => {
                let c = ctx.item.unwrap_or(0);
                seq.push_passage(projected, c, Origin::PassageSpecial)?
            }
            Piece::Content => {
                let c = ctx
                    .item
                    .ok_or_else(|| Error::Format("{{content}} outside item block".into()))?;
                let ids = ctx
                    .contents
                    .and_then(|cs| cs.get(c))
                    .ok_or_else(|| Error::invalid("content template needs passage contents"))?;
                seq.push_tokens(lm, ids, Origin::Content, Some(c))?
            }
            Piece::Text => {
                return Err(Error::Format("{{text}} is only valid in reconstruction targets".into()))
            }
        }
    }
    Ok(())
}

struct RenderCtx<'a> {
    n: usize,
    item: Option<usize>,
    query: &'a [u32],
    contents: Option<&'a [Vec<u32>]>,
}

/// Builds the ranking prompt for `projected.rows()` candidates.
///
/// `contents` holds per-candidate word tokens and is required iff the template
/// carries content. The prompt plus the `n - 1` ranked tokens fed back during
/// decoding must fit within `max_seq`.
pub fn assemble_rank_input(
    lm: &ToyLm,
    template: &PromptTemplate,
    query: &str,
    projected: &Matrix,
    contents: Option<&[Vec<u32>]>,
) -> Result<MixedInputSequence> {
    let TemplateBody::Rank { header, item, footer } = &template.body else {
        return Err(Error::invalid("rank assembly needs a rank template"));
    };
    let n = projected.rows();
    if n == 0 {
        return Err(Error::invalid("no candidates to rank"));
    }
    if projected.cols() != lm.cfg.d_model {
        return Err(Error::DimensionMismatch {
            expected: lm.cfg.d_model,
            got: projected.cols(),
        });
    }
    if template.kind == TemplateKind::RankEmbeddingPlusContent && contents.map_or(true, |c| c.len() != n) {
        return Err(Error::invalid("content template needs one content entry per candidate"));
    }
    let query_ids = lm_tokenize(query, lm.cfg.vocab_size);
    let mut seq = MixedInputSequence::new(lm.cfg.d_model);
    seq.push_token(lm, BOS, Origin::Instruction, None)?;
    let mut ctx = RenderCtx {
        n,
        item: None,
        query: &query_ids,
        contents,
    };
    render_pieces(&mut seq, lm, header, &ctx, projected)?;
    for c in 0..n {
        ctx.item = Some(c);
        render_pieces(&mut seq, lm, item, &ctx, projected)?;
    }
    ctx.item = None;
    render_pieces(&mut seq, lm, footer, &ctx, projected)?;
    let total = seq.len() + n - 1;
    if total > lm.cfg.max_seq {
        return Err(Error::WindowTooLarge {
            len: total,
            max: lm.cfg.max_seq,
        });
    }
    Ok(seq)
}

/// Builds the reconstruction prompt for one text embedding (row 0 of
/// `projected`) using alignment variant `variant`, ending right before the
/// reconstruction target.
pub fn assemble_align_input(
    lm: &ToyLm,
    template: &PromptTemplate,
    variant: usize,
    projected: &Matrix,
) -> Result<MixedInputSequence> {
    let TemplateBody::Align { variants } = &template.body else {
        return Err(Error::invalid("align assembly needs an align template"));
    };
    let pieces = variants
        .get(variant)
        .ok_or_else(|| Error::invalid(format!("no align variant {variant}")))?;
    let v = lm.cfg.vocab_size;
    let mut seq = MixedInputSequence::new(lm.cfg.d_model);
    seq.push_token(lm, BOS, Origin::Instruction, None)?;
    seq.push_tokens(lm, &literal_tokens("User:", v), Origin::Instruction, None)?;
    let ctx = RenderCtx {
        n: 1,
        item: None,
        query: &[],
        contents: None,
    };
    render_pieces(&mut seq, lm, pieces, &ctx, projected)?;
    seq.push_tokens(lm, &literal_tokens("Assistant:", v), Origin::Instruction, None)?;
    Ok(seq)
}

/// Draws an alignment prompt variant uniformly.
pub fn draw_align_variant(template: &PromptTemplate, rng: &mut Rng) -> usize {
    rng.index(template.variant_count())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            vocab_size: 2048,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ff: 256,
            max_seq: 512,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= RESERVED as usize + 1 {
            return Err(Error::invalid("vocab_size too small"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::invalid("d_model must be divisible by n_heads"));
        }
        if self.n_layers == 0 || self.max_seq == 0 || self.d_ff == 0 {
            return Err(Error::invalid("layers, d_ff and max_seq must be positive"));
        }
        Ok(())
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln1: LayerNorm,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub ln2: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
}

impl Block {
    fn new(rng: &mut Rng, cfg: &LmConfig) -> Self {
        let d = cfg.d_model;
        Self {
            ln1: LayerNorm::new(d),
            wq: Linear::new(rng, d, d),
            wk: Linear::new(rng, d, d),
            wv: Linear::new(rng, d, d),
            wo: Linear::new(rng, d, d),
            ln2: LayerNorm::new(d),
            ff1: Linear::new(rng, d, cfg.d_ff),
            ff2: Linear::new(rng, cfg.d_ff, d),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Parameter)) {
        f(&format!("{prefix}.ln1.gain"), &self.ln1.gain);
        f(&format!("{prefix}.ln1.bias"), &self.ln1.bias);
        self.wq.visit(&format!("{prefix}.wq"), f);
        self.wk.visit(&format!("{prefix}.wk"), f);
        self.wv.visit(&format!("{prefix}.wv"), f);
        self.wo.visit(&format!("{prefix}.wo"), f);
        f(&format!("{prefix}.ln2.gain"), &self.ln2.gain);
        f(&format!("{prefix}.ln2.bias"), &self.ln2.bias);
        self.ff1.visit(&format!("{prefix}.ff1"), f);
        self.ff2.visit(&format!("{prefix}.ff2"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f(&format!("{prefix}.ln1.gain"), &mut self.ln1.gain);
        f(&format!("{prefix}.ln1.bias"), &mut self.ln1.bias);
        self.wq.visit_mut(&format!("{prefix}.wq"), f);
        self.wk.visit_mut(&format!("{prefix}.wk"), f);
        self.wv.visit_mut(&format!("{prefix}.wv"), f);
        self.wo.visit_mut(&format!("{prefix}.wo"), f);
        f(&format!("{prefix}.ln2.gain"), &mut self.ln2.gain);
        f(&format!("{prefix}.ln2.bias"), &mut self.ln2.bias);
        self.ff1.visit_mut(&format!("{prefix}.ff1"), f);
        self.ff2.visit_mut(&format!("{prefix}.ff2"), f);
    }
}

/// Per-layer keys and values of every position processed so far.
#[derive(Clone, Debug)]
pub struct KvCache {
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
    len: usize,
}

impl KvCache {
    pub fn new(cfg: &LmConfig) -> Self {
        Self {
            keys: (0..cfg.n_layers).map(|_| Matrix::zeros(0, cfg.d_model)).collect(),
            values: (0..cfg.n_layers).map(|_| Matrix::zeros(0, cfg.d_model)).collect(),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

struct BlockTrace {
    ln1: LayerNormCache,
    normed1: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    probs: Vec<Matrix>,
    concat: Matrix,
    ln2: LayerNormCache,
    normed2: Matrix,
    ff_pre: Matrix,
    ff_act: Matrix,
}

/// Forward intermediates of a full-sequence pass.
pub struct LmTrace {
    blocks: Vec<BlockTrace>,
    final_ln: Option<LayerNormCache>,
    len: usize,
}

#[derive(Clone, Debug)]
pub struct ToyLm {
    pub cfg: LmConfig,
    pub token_table: Parameter,
    pub pos_table: Parameter,
    pub blocks: Vec<Block>,
    pub final_ln: LayerNorm,
    /// d_model × vocab_size, no bias, untied from `token_table`.
    pub vocab_head: Parameter,
}

fn head_cols(m: &Matrix, start: usize, width: usize) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), width);
    for r in 0..m.rows() {
        out.row_mut(r).copy_from_slice(&m.row(r)[start..start + width]);
    }
    out
}

fn write_head_cols(dst: &mut Matrix, start: usize, src: &Matrix) {
    let w = src.cols();
    for r in 0..src.rows() {
        dst.row_mut(r)[start..start + w].copy_from_slice(src.row(r));
    }
}

impl ToyLm {
    pub fn new(rng: &mut Rng, cfg: LmConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let std = 1.0 / (d as f64).sqrt();
        let token_table = Parameter::new(rng.matrix_normal(cfg.vocab_size, d, std));
        let pos_table = Parameter::new(rng.matrix_normal(cfg.max_seq, d, 0.5 * std));
        let blocks = (0..cfg.n_layers).map(|_| Block::new(rng, &cfg)).collect();
        let vocab_head = Parameter::new(glorot(rng, d, cfg.vocab_size));
        Ok(Self {
            cfg,
            token_table,
            pos_table,
            blocks,
            final_ln: LayerNorm::new(d),
            vocab_head,
        })
    }

    /// Hidden states for every position of `seq`, computed from scratch.
    pub fn forward(&self, seq: &MixedInputSequence) -> Result<Matrix> {
        let mut cache = KvCache::new(&self.cfg);
        self.forward_cached(&seq.vectors, &mut cache)
    }

    /// Processes `inputs` as the next positions after those already in `cache`
    /// and returns their hidden states.
    pub fn forward_cached(&self, inputs: &Matrix, cache: &mut KvCache) -> Result<Matrix> {
        self.run(inputs, cache, None)
    }

    /// Full-sequence pass that records what [`ToyLm::backward`] needs.
    pub fn forward_trace(&self, seq: &MixedInputSequence) -> Result<(Matrix, LmTrace)> {
        let mut cache = KvCache::new(&self.cfg);
        let mut trace = LmTrace {
            blocks: Vec::with_capacity(self.blocks.len()),
            final_ln: None,
            len: seq.len(),
        };
        let h = self.run(&seq.vectors, &mut cache, Some(&mut trace))?;
        Ok((h, trace))
    }

    fn run(&self, inputs: &Matrix, cache: &mut KvCache, mut trace: Option<&mut LmTrace>) -> Result<Matrix> {
        let d = self.cfg.d_model;
        let start = cache.len;
        let m = inputs.rows();
        if inputs.cols() != d {
            return Err(Error::DimensionMismatch { expected: d, got: inputs.cols() });
        }
        if start + m > self.cfg.max_seq {
            return Err(Error::WindowTooLarge {
                len: start + m,
                max: self.cfg.max_seq,
            });
        }
        debug_assert!(trace.is_none() || start == 0);
        let heads = self.cfg.n_heads;
        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = inputs.clone();
        for r in 0..m {
            let pos = self.pos_table.value.row(start + r);
            for (xv, pv) in x.row_mut(r).iter_mut().zip(pos) {
                *xv += pv;
            }
        }

        for (l, block) in self.blocks.iter().enumerate() {
            let (normed1, ln1) = block.ln1.forward(&x);
            let q = block.wq.forward(&normed1)?;
            let k = block.wk.forward(&normed1)?;
            let v = block.wv.forward(&normed1)?;
            for r in 0..m {
                cache.keys[l].push_row(k.row(r))?;
                cache.values[l].push_row(v.row(r))?;
            }
            let keys = &cache.keys[l];
            let values = &cache.values[l];
            let total = keys.rows();

            let mut concat = Matrix::zeros(m, d);
            let mut probs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = head_cols(&q, h * dh, dh);
                let kh = head_cols(keys, h * dh, dh);
                let vh = head_cols(values, h * dh, dh);
                let mut p = matmul_nt(&qh, &kh)?;
                for i in 0..m {
                    let visible = start + i + 1;
                    let row = p.row_mut(i);
                    let mut max = f64::NEG_INFINITY;
                    for s in row[..visible].iter_mut() {
                        *s *= scale;
                        max = max.max(*s);
                    }
                    let mut sum = 0.0;
                    for s in row[..visible].iter_mut() {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    for s in row[..visible].iter_mut() {
                        *s /= sum;
                    }
                    row[visible..total].iter_mut().for_each(|s| *s = 0.0);
                }
                let oh = matmul(&p, &vh)?;
                write_head_cols(&mut concat, h * dh, &oh);
                if trace.is_some() {
                    probs.push(p);
                }
            }
            let attn = block.wo.forward(&concat)?;
            x.add_assign(&attn)?;

            let (normed2, ln2) = block.ln2.forward(&x);
            let ff_pre = block.ff1.forward(&normed2)?;
            let mut ff_act = ff_pre.clone();
            ff_act.data_mut().iter_mut().for_each(|z| *z = gelu(*z));
            let ff_out = block.ff2.forward(&ff_act)?;
            x.add_assign(&ff_out)?;

            if let Some(t) = trace.as_deref_mut() {
                t.blocks.push(BlockTrace {
                    ln1,
                    normed1,
                    q,
                    k,
                    v,
                    probs,
                    concat,
                    ln2,
                    normed2,
                    ff_pre,
                    ff_act,
                });
            }
        }
        let (hidden, final_ln) = self.final_ln.forward(&x);
        if let Some(t) = trace {
            t.final_ln = Some(final_ln);
        }
        cache.len += m;
        if !hidden.is_finite() {
            return Err(Error::NonFinite("hidden states".into()));
        }
        Ok(hidden)
    }

    /// Back-propagates `d_hidden` (L × d) through a traced pass. Accumulates
    /// gradients of trainable LM parameters (including positional rows) and
    /// returns the gradient with respect to the input vectors.
    pub fn backward(&mut self, trace: &LmTrace, d_hidden: &Matrix) -> Result<Matrix> {
        let heads = self.cfg.n_heads;
        let dh = self.cfg.head_dim();
        let d = self.cfg.d_model;
        let scale = 1.0 / (dh as f64).sqrt();
        let len = trace.len;
        if d_hidden.shape() != (len, d) {
            return Err(Error::ShapeMismatch {
                op: "lm_backward",
                left: d_hidden.shape(),
                right: (len, d),
            });
        }

        let final_ln = trace
            .final_ln
            .as_ref()
            .ok_or_else(|| Error::invalid("incomplete trace"))?;
        let mut dx = self.final_ln.backward(final_ln, d_hidden);
        for (block, bt) in self.blocks.iter_mut().zip(&trace.blocks).rev() {
            // feed-forward residual branch
            let mut d_pre = block.ff2.backward(&bt.ff_act, &dx)?;
            for (g, z) in d_pre.data_mut().iter_mut().zip(bt.ff_pre.data()) {
                *g *= gelu_grad(*z);
            }
            let d_norm2 = block.ff1.backward(&bt.normed2, &d_pre)?;
            let mut dx_mid = block.ln2.backward(&bt.ln2, &d_norm2);
            dx_mid.add_assign(&dx)?;

            // attention residual branch
            let d_concat = block.wo.backward(&bt.concat, &dx_mid)?;
            let mut dq = Matrix::zeros(len, d);
            let mut dk = Matrix::zeros(len, d);
            let mut dv = Matrix::zeros(len, d);
            for h in 0..heads {
                let p = &bt.probs[h];
                let d_out = head_cols(&d_concat, h * dh, dh);
                let qh = head_cols(&bt.q, h * dh, dh);
                let kh = head_cols(&bt.k, h * dh, dh);
                let vh = head_cols(&bt.v, h * dh, dh);
                let mut ds = matmul_nt(&d_out, &vh)?;
                let dvh = matmul_tn(p, &d_out)?;
                for i in 0..len {
                    let pr = p.row(i);
                    let row = ds.row_mut(i);
                    let inner: f64 = row[..=i].iter().zip(&pr[..=i]).map(|(a, b)| a * b).sum();
                    for j in 0..len {
                        row[j] = if j <= i { pr[j] * (row[j] - inner) * scale } else { 0.0 };
                    }
                }
                let dqh = matmul(&ds, &kh)?;
                let dkh = matmul_tn(&ds, &qh)?;
                write_head_cols(&mut dq, h * dh, &dqh);
                write_head_cols(&mut dk, h * dh, &dkh);
                write_head_cols(&mut dv, h * dh, &dvh);
            }
            let mut d_norm1 = block.wq.backward(&bt.normed1, &dq)?;
            d_norm1.add_assign(&block.wk.backward(&bt.normed1, &dk)?)?;
            d_norm1.add_assign(&block.wv.backward(&bt.normed1, &dv)?)?;
            let mut dx_in = block.ln1.backward(&bt.ln1, &d_norm1);
            dx_in.add_assign(&dx_mid)?;
            dx = dx_in;
        }
        for r in 0..len {
            self.pos_table.accumulate_row(r, dx.row(r));
        }
        Ok(dx)
    }

    /// Routes input-vector gradients of `seq`: token positions into the token
    /// table, passage positions into the returned `n_candidates × d` matrix.
    pub fn scatter_input_grads(
        &mut self,
        seq: &MixedInputSequence,
        d_inputs: &Matrix,
        n_candidates: usize,
    ) -> Result<Matrix> {
        let mut d_passages = Matrix::zeros(n_candidates, self.cfg.d_model);
        for (i, pos) in seq.positions.iter().enumerate() {
            match pos.slot {
                Slot::Token(id) => self.token_table.accumulate_row(id as usize, d_inputs.row(i)),
                Slot::Passage(c) => {
                    if c >= n_candidates {
                        return Err(Error::invalid(format!("candidate {c} out of range")));
                    }
                    for (a, b) in d_passages.row_mut(c).iter_mut().zip(d_inputs.row(i)) {
                        *a += b;
                    }
                }
            }
        }
        Ok(d_passages)
    }

    pub fn vocab_logits(&self, h: &[f64]) -> Result<Vec<f64>> {
        if h.len() != self.cfg.d_model {
            return Err(Error::DimensionMismatch {
                expected: self.cfg.d_model,
                got: h.len(),
            });
        }
        Ok(matmul(&Matrix::row_vector(h), &self.vocab_head.value)?.into_vec())
    }
}

impl ParamSet for ToyLm {
    fn visit(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        f("lm.token_table", &self.token_table);
        f("lm.pos_table", &self.pos_table);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("lm.block{i}"), f);
        }
        f("lm.final_ln.gain", &self.final_ln.gain);
        f("lm.final_ln.bias", &self.final_ln.bias);
        f("lm.vocab_head", &self.vocab_head);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f("lm.token_table", &mut self.token_table);
        f("lm.pos_table", &mut self.pos_table);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("lm.block{i}"), f);
        }
        f("lm.final_ln.gain", &mut self.final_ln.gain);
        f("lm.final_ln.bias", &mut self.final_ln.bias);
        f("lm.vocab_head", &mut self.vocab_head);
    }
}
