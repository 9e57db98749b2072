//! Glue between retrieval, training and reranking used by the command line
//! and by end-to-end runs on synthetic data.

use serde::{Deserialize, Serialize};

use crate::decoding::{sliding_window_rerank, DecodeMode, LmWindowRanker, RankingList, WindowSchedule};
use crate::error::{Error, Result};
use crate::evaluation::{ndcg_at_k, Gain, Qrels, RunFile, TokenStats};
use crate::lm::PromptTemplate;
use crate::model::{Model, ModelConfig};
use crate::numerics::Matrix;
use crate::retrieval::{Backend, Corpus, Hit, Passage, Query, Retriever};
use crate::synthetic::{generate, KeywordTeacher, SyntheticConfig, SyntheticData};
use crate::training::{
    filter_by_length, make_golden_ranking, train_align, train_rank, AlignmentSample, RankRecord, RankSample,
    RankTemplates, StepLoss, TeacherScorer, TrainConfig,
};

/// Alignment samples for every encodable passage.
pub fn alignment_samples(model: &Model, passages: &[Passage], max_tokens: usize) -> Result<Vec<AlignmentSample>> {
    let mut out = Vec::with_capacity(passages.len());
    for p in passages {
        match AlignmentSample::new(model, &p.text, max_tokens) {
            Ok(s) => out.push(s),
            Err(Error::UnencodableText) | Err(Error::InvalidArgument(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// First-stage candidates for each query, ordered by the teacher.
pub fn rank_records(
    retriever: &Retriever,
    queries: &[Query],
    k: usize,
    backend: Backend,
    teacher: &dyn TeacherScorer,
) -> Result<Vec<RankRecord>> {
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        let hits = retriever.retrieve_topk(q, k, backend)?;
        if hits.is_empty() {
            continue;
        }
        let passages: Vec<Passage> = hits.into_iter().map(|h| h.passage).collect();
        let golden = make_golden_ranking(q, &passages, teacher);
        out.push(RankRecord {
            query: q.clone(),
            passages,
            golden,
        });
    }
    Ok(out)
}

/// Reorders first-stage `hits` with the model.
pub fn rerank_hits(
    model: &Model,
    template: &PromptTemplate,
    query: &Query,
    hits: &[Hit],
    w: usize,
    s: usize,
) -> Result<(RankingList, TokenStats)> {
    let schedule = WindowSchedule::new(hits.len(), w, s)?;
    let mut embeddings = Matrix::zeros(0, model.encoder.dim());
    for h in hits {
        embeddings.push_row(&h.embedding.values)?;
    }
    let mut ranker = LmWindowRanker::new(&model.lm, &model.projector, template, &query.text, &embeddings);
    ranker.mode = DecodeMode::Incremental;
    let ranking = sliding_window_rerank(&mut ranker, &schedule)?;
    Ok((ranking, ranker.stats))
}

pub struct RerankOutput {
    pub first_stage: RunFile,
    pub reranked: RunFile,
    pub stats: TokenStats,
}

/// Retrieves the top `k` for each query and reranks them.
pub fn rerank_queries(
    model: &Model,
    retriever: &Retriever,
    queries: &[Query],
    k: usize,
    backend: Backend,
    w: usize,
    s: usize,
) -> Result<RerankOutput> {
    let template = PromptTemplate::rank_embedding();
    let mut first_stage = RunFile::new(format!("{backend:?}").to_lowercase());
    let mut reranked = RunFile::new("rerank");
    let mut stats = TokenStats::default();
    for q in queries {
        let hits = retriever.retrieve_topk(q, k, backend)?;
        if hits.is_empty() {
            continue;
        }
        first_stage.insert(&q.id, hits.iter().map(|h| (h.passage.id.clone(), h.score)).collect())?;
        let (ranking, st) = rerank_hits(model, &template, q, &hits, w, s)?;
        stats.absorb(&st);
        let n = ranking.len();
        reranked.insert(
            &q.id,
            ranking
                .order()
                .into_iter()
                .enumerate()
                .map(|(rank, c)| (hits[c].passage.id.clone(), (n - rank) as f64))
                .collect(),
        )?;
    }
    Ok(RerankOutput {
        first_stage,
        reranked,
        stats,
    })
}

/// Settings of one end-to-end synthetic run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: SyntheticConfig,
    pub model: ModelConfig,
    pub encoder_seed: u64,
    pub seed: u64,
    pub align: TrainConfig,
    pub rank: TrainConfig,
    pub skip_align: bool,
    /// Candidates per training list.
    pub train_k: usize,
    /// Candidates reranked per evaluation query.
    pub eval_k: usize,
    pub w: usize,
    pub s: usize,
    pub align_max_tokens: usize,
    /// Training corpora whose passages feed the alignment stage.
    pub align_corpora: usize,
}

impl ExperimentConfig {
    /// Settings of the bundled synthetic end-to-end run: a one-layer LM over a
    /// 256-dim encoder, trained on fresh corpora so that it cannot memorize
    /// per-passage scores.
    pub fn acceptance() -> Self {
        let d = 32;
        Self {
            data: SyntheticConfig {
                train_corpora: 700,
                ..SyntheticConfig::default()
            },
            model: ModelConfig {
                d_enc: 256,
                lm: crate::lm::LmConfig {
                    vocab_size: 2048,
                    d_model: d,
                    n_layers: 1,
                    n_heads: 2,
                    d_ff: 4 * d,
                    max_seq: 512,
                },
                ..ModelConfig::default()
            },
            encoder_seed: 0,
            seed: 1,
            align: TrainConfig {
                lr: 1e-3,
                batch: 16,
                epochs: 1,
                ..TrainConfig::align()
            },
            rank: TrainConfig {
                lr: 3e-3,
                batch: 8,
                epochs: 1,
                list_depth: Some(3),
                ..TrainConfig::rank()
            },
            skip_align: false,
            train_k: 20,
            eval_k: 20,
            w: 20,
            s: 10,
            align_max_tokens: 12,
            align_corpora: 10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub first_stage_ndcg: f64,
    pub reranked_ndcg: f64,
    pub per_query_first: Vec<f64>,
    pub per_query_reranked: Vec<f64>,
    pub align_log: Vec<StepLoss>,
    pub rank_log: Vec<StepLoss>,
    pub dropped_samples: usize,
    pub model: Model,
}

/// Generates data, trains both stages, reranks the evaluation queries' dense
/// top-k, and scores both orderings with NDCG@10.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let data: SyntheticData = generate(&cfg.data)?;
    let mut model = Model::new(&cfg.model, cfg.encoder_seed, cfg.seed)?;

    let align_log = if cfg.skip_align {
        Vec::new()
    } else {
        let passages: Vec<Passage> = data
            .train
            .iter()
            .take(cfg.align_corpora)
            .flat_map(|split| split.passages.iter().cloned())
            .collect();
        let samples = alignment_samples(&model, &passages, cfg.align_max_tokens)?;
        train_align(&mut model, &samples, &TrainConfig { seed: cfg.seed, ..cfg.align }, None)?
    };

    let teacher = KeywordTeacher::new(&data.keywords);
    let mut records = Vec::new();
    for split in &data.train {
        let retriever = Retriever::build(Corpus::new(split.passages.clone())?, model.encoder.clone())?;
        records.extend(rank_records(&retriever, &split.queries, cfg.train_k, Backend::Dense, &teacher)?);
    }
    let samples = records
        .into_iter()
        .map(|r| RankSample::from_record(&model, r))
        .collect::<Result<Vec<_>>>()?;
    let templates = RankTemplates::default();
    let (samples, dropped_samples) = filter_by_length(&model.lm, &templates, samples)?;
    let rank_log = train_rank(&mut model, &templates, &samples, &TrainConfig { seed: cfg.seed, ..cfg.rank }, None)?;

    let eval = &data.eval;
    let retriever = Retriever::build(Corpus::new(eval.passages.clone())?, model.encoder.clone())?;
    let out = rerank_queries(&model, &retriever, &eval.queries, cfg.eval_k, Backend::Dense, cfg.w, cfg.s)?;
    let first = ndcg_at_k(&out.first_stage, &eval.qrels, 10, Gain::Exponential)?;
    let reranked = ndcg_at_k(&out.reranked, &eval.qrels, 10, Gain::Exponential)?;
    Ok(ExperimentReport {
        first_stage_ndcg: first.mean,
        reranked_ndcg: reranked.mean,
        per_query_first: first.per_query.values().copied().collect(),
        per_query_reranked: reranked.per_query.values().copied().collect(),
        align_log,
        rank_log,
        dropped_samples,
        model,
    })
}

/// Evaluates `run` against `qrels` with exponential-gain NDCG@10.
pub fn mean_ndcg10(run: &RunFile, qrels: &Qrels) -> Result<f64> {
    Ok(ndcg_at_k(run, qrels, 10, Gain::Exponential)?.mean)
}
