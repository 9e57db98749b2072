//! Command-line surface: argument parsing, JSON config merging, on-disk
//! artifacts and run manifests.
//!
//! Every option may also come from `--config file.json`, an object keyed by
//! the option's snake_case name. Flags given on the command line win.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::checkpoint::Checkpoint;
use crate::error::Error;
use crate::evaluation::{
    median, ndcg_at_k, paired_ttest, predict_cost, read_qrels, read_run, write_efficiency_report, write_qrels,
    write_run, CostMode, CostModel, EfficiencyRow, Gain, RunFile, TokenStats, DEFAULT_GEN_PER_PASSAGE,
};
use crate::decoding::WindowSchedule;
use crate::lm::{lm_tokenize, LmConfig, PromptTemplate};
use crate::model::{Model, ModelConfig, Stage};
use crate::numerics::{Activation, Rng};
use crate::pipeline::{alignment_samples, rank_records, rerank_hits};
use crate::retrieval::{
    read_corpus, read_embeddings, read_queries, write_corpus, write_embeddings, write_queries, Backend,
    Corpus, Hit, Pooling, Query, Retriever, ToyEncoder, DEFAULT_ENCODER_DIM, DEFAULT_HASH_SIZE,
};
use crate::synthetic::{generate, KeywordTeacher, SyntheticConfig};
use crate::training::{
    filter_by_length, read_rank_records, train_align, train_rank, write_rank_records, RankSample, RankTemplates,
    TrainConfig, LOSS_LOG_HEADER,
};

pub const DEFAULT_W: usize = 20;
pub const DEFAULT_S: usize = 10;
pub const DEFAULT_K: usize = 100;
pub const DEFAULT_ALPHA: f64 = 0.2;

/// Failure of a command, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad or missing arguments; exit code 1.
    Usage(String),
    /// Unreadable, malformed or inconsistent inputs; exit code 2.
    Data(Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Data(e) => write!(f, "error: {e}"),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Data(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

#[derive(Debug, Parser)]
#[command(name = "embrank", version, about = "Listwise passage reranking with passage embeddings as LM tokens")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build BM25 and dense indexes for a JSONL corpus.
    Index(IndexArgs),
    /// First-stage retrieval into a run file.
    Retrieve(RetrieveArgs),
    /// Train the projector to map embeddings into the LM input space.
    TrainAlign(TrainAlignArgs),
    /// Train projector and LM to rank candidate lists.
    TrainRank(TrainRankArgs),
    /// Rerank first-stage candidates with a trained checkpoint.
    Rerank(RerankArgs),
    /// NDCG@k of a run file, optionally tested against a baseline run.
    Eval(EvalArgs),
    /// Measure reranking cost and compare it with the closed-form model.
    Bench(BenchArgs),
    /// Write the planted-relevance synthetic corpus and training files.
    GenSynthetic(GenSyntheticArgs),
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct EncoderArgs {
    /// Hash buckets of the encoder vocabulary.
    #[arg(long)]
    pub hash_size: Option<usize>,
    /// Encoder embedding width.
    #[arg(long)]
    pub d_enc: Option<usize>,
    /// mean or cls.
    #[arg(long)]
    pub pooling: Option<Pooling>,
    #[arg(long)]
    pub encoder_seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct LmArgs {
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
    #[arg(long)]
    pub max_seq: Option<usize>,
    /// Projector activation: gelu, tanh or identity.
    #[arg(long)]
    pub activation: Option<Activation>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct IndexArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// JSONL corpus of {"id","text"} lines.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub encoder: EncoderArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct RetrieveArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Output run file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
    /// dense or bm25.
    #[arg(long)]
    pub backend: Option<Backend>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct TrainAlignArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Index whose encoder the model adopts.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// JSONL passages to reconstruct.
    #[arg(long)]
    pub passages: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Reconstruction target length in words.
    #[arg(long)]
    pub max_tokens: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub lm: LmArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct TrainRankArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Align-stage checkpoint to continue from.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Start from fresh weights built on `--index` instead of an aligned checkpoint.
    #[arg(long)]
    #[serde(default)]
    pub no_align: bool,
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// JSONL rank records: query, candidates and teacher order.
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Weight of the distillation term.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Leading list positions scored by the ranking losses.
    #[arg(long)]
    pub list_depth: Option<usize>,
    /// Keep each record's candidate order fixed across epochs.
    #[arg(long)]
    #[serde(default)]
    pub no_shuffle: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub train: TrainArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub lm: LmArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct WindowArgs {
    /// Window size.
    #[arg(long)]
    pub w: Option<usize>,
    /// Window step.
    #[arg(long)]
    pub s: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct RerankArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Rank-stage checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// First-stage run to rerank; retrieved from the index when absent.
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Candidates reranked per query.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub backend: Option<Backend>,
    #[command(flatten)]
    #[serde(flatten)]
    pub window: WindowArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long)]
    pub qrels: Option<PathBuf>,
    /// Second run for a paired t-test.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Cutoff depth.
    #[arg(long)]
    pub k: Option<usize>,
    /// exponential or linear.
    #[arg(long)]
    pub gain: Option<String>,
    /// JSON report path; printed to stdout either way.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct BenchArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<PathBuf>,
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Candidates per query.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Queries timed per repetition; all when absent.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Generated tokens per passage assumed for text-mode listwise output.
    #[arg(long)]
    pub gen_per_passage: Option<f64>,
    /// Output TSV report.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub window: WindowArgs,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
pub struct GenSyntheticArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub queries: Option<usize>,
    #[arg(long)]
    pub train_corpora: Option<usize>,
    #[arg(long)]
    pub passage_len: Option<usize>,
    /// Candidates per training record.
    #[arg(long)]
    pub train_k: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub encoder: EncoderArgs,
}

/// Overlays the JSON object in `config` under `args`: every option left
/// unset on the command line takes the file's value.
pub fn merge_config<T: Serialize + DeserializeOwned>(args: &T, config: Option<&Path>) -> CliResult<T> {
    let Some(path) = config else {
        return serde_json::from_value(serde_json::to_value(args)?).map_err(|e| usage(e.to_string()));
    };
    let text = fs::read_to_string(path).map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
    let file: Value =
        serde_json::from_str(&text).map_err(|e| usage(format!("config {} is not JSON: {e}", path.display())))?;
    let Value::Object(file) = file else {
        return Err(usage(format!("config {} must hold a JSON object", path.display())));
    };
    let Value::Object(mut merged) = serde_json::to_value(args)? else {
        unreachable!("argument structs serialize to objects")
    };
    for (key, value) in file {
        match merged.get(&key) {
            None => return Err(usage(format!("unknown config key `{key}`"))),
            Some(Value::Null) | Some(Value::Bool(false)) => {
                merged.insert(key, value);
            }
            Some(_) => {}
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| usage(format!("bad config value: {e}")))
}

fn required<'a, T>(v: &'a Option<T>, flag: &str) -> CliResult<&'a T> {
    v.as_ref().ok_or_else(|| usage(format!("missing required option --{flag}")))
}

fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path)?;
    Ok(crate::model::hex(&Sha256::digest(&bytes)))
}

/// Content hashes of a file, or of every file directly inside a directory.
fn hash_entries(path: &Path, out: &mut BTreeMap<String, String>) -> CliResult<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for p in entries.into_iter().filter(|p| p.is_file() && !is_manifest(p)) {
            out.insert(p.display().to_string(), sha256_file(&p)?);
        }
    } else {
        out.insert(path.display().to_string(), sha256_file(path)?);
    }
    Ok(())
}

fn is_manifest(p: &Path) -> bool {
    p.file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with("manifest.json"))
}

/// Provenance record written next to every artifact.
#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub details: Value,
}

/// `<file>.manifest.json`, or `manifest.json` inside an output directory.
pub fn manifest_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("manifest.json")
    } else {
        let mut name = out.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    }
}

fn write_manifest(
    command: &str,
    config: &impl Serialize,
    seed: Option<u64>,
    inputs: &[&Path],
    outputs: &[&Path],
    details: Value,
) -> CliResult<()> {
    let mut m = Manifest {
        command: command.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: serde_json::to_value(config)?,
        seed,
        inputs: BTreeMap::new(),
        outputs: BTreeMap::new(),
        details,
    };
    for p in inputs {
        hash_entries(p, &mut m.inputs)?;
    }
    for p in outputs {
        hash_entries(p, &mut m.outputs)?;
    }
    let path = manifest_path(outputs[0]);
    let mut f = BufWriter::new(File::create(&path)?);
    serde_json::to_writer_pretty(&mut f, &m)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}

fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Data(Error::invalid(format!("cannot open {}: {e}", path.display()))))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Encoder settings stored with an index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub hash_size: usize,
    pub d_enc: usize,
    pub pooling: Pooling,
    pub encoder_seed: u64,
}

impl EncoderSpec {
    fn from_args(a: &EncoderArgs) -> Self {
        Self {
            hash_size: a.hash_size.unwrap_or(DEFAULT_HASH_SIZE),
            d_enc: a.d_enc.unwrap_or(DEFAULT_ENCODER_DIM),
            pooling: a.pooling.unwrap_or(Pooling::Mean),
            encoder_seed: a.encoder_seed.unwrap_or(0),
        }
    }

    pub fn build(&self) -> CliResult<ToyEncoder> {
        if self.hash_size == 0 || self.d_enc == 0 {
            return Err(usage("hash_size and d_enc must be positive"));
        }
        Ok(ToyEncoder::new(
            &mut Rng::labeled(self.encoder_seed, "encoder"),
            self.hash_size,
            self.d_enc,
            self.pooling,
        ))
    }
}

pub const INDEX_ENCODER: &str = "encoder.json";
pub const INDEX_CORPUS: &str = "corpus.jsonl";
pub const INDEX_BM25: &str = "bm25.json";
pub const INDEX_EMBEDDINGS: &str = "embeddings.jsonl";

/// An index directory loaded back into memory.
pub struct IndexDir {
    pub spec: EncoderSpec,
    pub retriever: Retriever,
}

impl IndexDir {
    pub fn load(dir: &Path) -> CliResult<Self> {
        let spec: EncoderSpec = serde_json::from_reader(open(&dir.join(INDEX_ENCODER))?)?;
        let corpus = read_corpus(open(&dir.join(INDEX_CORPUS))?)?;
        let vectors = read_embeddings(open(&dir.join(INDEX_EMBEDDINGS))?)?;
        if vectors.matrix.cols() != spec.d_enc {
            return Err(Error::DimensionMismatch {
                expected: spec.d_enc,
                got: vectors.matrix.cols(),
            }
            .into());
        }
        let retriever = Retriever::with_vectors(corpus, spec.build()?, vectors)?;
        Ok(Self { spec, retriever })
    }

    fn check_model(&self, ckpt: &Checkpoint) -> CliResult<()> {
        let m = &ckpt.meta;
        let theirs = EncoderSpec {
            hash_size: m.hash_size,
            d_enc: m.d_enc,
            pooling: m.pooling,
            encoder_seed: m.encoder_seed,
        };
        if theirs != self.spec {
            return Err(Error::invalid(format!(
                "checkpoint encoder {theirs:?} does not match the index encoder {:?}; rebuild the index with matching encoder options",
                self.spec
            ))
            .into());
        }
        Ok(())
    }

    /// Candidates of `ranking` that exist in the index, best first.
    fn hits_for(&self, ranking: &[(String, f64)], k: usize) -> CliResult<Vec<Hit>> {
        let r = &self.retriever;
        ranking
            .iter()
            .take(k)
            .map(|(pid, score)| {
                let row = r.corpus.index_of(pid).ok_or_else(|| Error::UnknownPassage(pid.clone()))?;
                Ok(Hit {
                    passage: r.corpus.passages()[row].clone(),
                    embedding: r.vectors.embedding(row),
                    score: *score,
                })
            })
            .collect()
    }
}

fn lm_config(a: &LmArgs) -> LmConfig {
    let d = LmConfig::default();
    LmConfig {
        vocab_size: a.vocab_size.unwrap_or(d.vocab_size),
        d_model: a.d_model.unwrap_or(d.d_model),
        n_layers: a.n_layers.unwrap_or(d.n_layers),
        n_heads: a.n_heads.unwrap_or(d.n_heads),
        d_ff: a.d_ff.unwrap_or(d.d_ff),
        max_seq: a.max_seq.unwrap_or(d.max_seq),
    }
}

fn fresh_model(index: &IndexDir, lm: &LmArgs, seed: u64) -> CliResult<Model> {
    let cfg = ModelConfig {
        hash_size: index.spec.hash_size,
        d_enc: index.spec.d_enc,
        pooling: index.spec.pooling,
        activation: lm.activation.unwrap_or(Activation::Gelu),
        lm: lm_config(lm),
    };
    cfg.lm.validate().map_err(|e| usage(e.to_string()))?;
    Ok(Model::with_encoder(index.retriever.encoder.clone(), &cfg, seed)?)
}

fn train_config(base: TrainConfig, a: &TrainArgs) -> TrainConfig {
    TrainConfig {
        seed: a.seed.unwrap_or(base.seed),
        lr: a.lr.unwrap_or(base.lr),
        batch: a.batch.unwrap_or(base.batch),
        epochs: a.epochs.unwrap_or(base.epochs),
        clip_norm: a.clip_norm.unwrap_or(base.clip_norm),
        ..base
    }
}

fn window(a: &WindowArgs) -> CliResult<(usize, usize)> {
    let w = a.w.unwrap_or(DEFAULT_W);
    let s = a.s.unwrap_or(DEFAULT_S);
    if s == 0 || s > w {
        return Err(usage(format!("window needs w >= s >= 1, got w={w} s={s}")));
    }
    Ok((w, s))
}

fn parse_gain(g: Option<&str>) -> CliResult<Gain> {
    match g.unwrap_or("exponential") {
        "exponential" => Ok(Gain::Exponential),
        "linear" => Ok(Gain::Linear),
        other => Err(usage(format!("unknown gain `{other}`; use exponential or linear"))),
    }
}

fn load_stage(path: &Path, need: Stage, command: &str, hint: &str) -> CliResult<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.meta.stage < need {
        let have = stage_name(ckpt.meta.stage);
        return Err(Error::StageOrder(format!(
            "{command} needs a {}-stage checkpoint but {} has only completed `{have}`; {hint}",
            stage_name(need),
            path.display()
        ))
        .into());
    }
    Ok(ckpt)
}

fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::Untrained => "untrained",
        Stage::Align => "align",
        Stage::Rank => "rank",
    }
}

pub fn cmd_index(args: &IndexArgs) -> CliResult<()> {
    let a = merge_config(args, args.config.as_deref())?;
    let corpus_path = required(&a.corpus, "corpus")?;
    let out = required(&a.out, "out")?;
    let spec = EncoderSpec::from_args(&a.encoder);
    let encoder = spec.build()?;
    let corpus = read_corpus(open(corpus_path)?)?;
    let retriever = Retriever::build(corpus, encoder)?;
    fs::create_dir_all(out)?;

    let mut f = create(&out.join(INDEX_ENCODER))?;
    serde_json::to_writer_pretty(&mut f, &spec)?;
    f.write_all(b"\n")?;
    f.flush()?;
    let mut f = create(&out.join(INDEX_CORPUS))?;
    write_corpus(&mut f, &retriever.corpus)?;
    f.flush()?;
    let mut f = create(&out.join(INDEX_BM25))?;
    serde_json::to_writer(&mut f, &retriever.bm25)?;
    f.write_all(b"\n")?;
    f.flush()?;
    let mut f = create(&out.join(INDEX_EMBEDDINGS))?;
    write_embeddings(&mut f, &retriever.vectors.ids, &retriever.vectors.matrix)?;
    f.flush()?;

    write_manifest(
        "index",
        &a,
        Some(spec.encoder_seed),
        &[corpus_path],
        &[out],
        json!({ "passages": retriever.corpus.len(), "d_enc": spec.d_enc }),
    )
}

pub fn cmd_retrieve(args: &RetrieveArgs) -> CliResult<()> {
    let a = merge_config(args, args.config.as_deref())?;
    let index_dir = required(&a.index, "index")?;
    let queries_path = required(&a.queries, "queries")?;
    let out = required(&a.out, "out")?;
    let k = a.k.unwrap_or(DEFAULT_K);
    let backend = a.backend.unwrap_or(Backend::Dense);
    let index = IndexDir::load(index_dir)?;
    let queries = read_queries(open(queries_path)?)?;
    let mut run = RunFile::new(backend_tag(backend));
    for q in &queries {
        let hits = index.retriever.retrieve_topk(q, k, backend)?;
        if !hits.is_empty() {
            run.insert(&q.id, hits.iter().map(|h| (h.passage.id.clone(), h.score)).collect())?;
        }
    }
    let mut f = create(out)?;
    write_run(&mut f, &run)?;
    f.flush()?;
    write_manifest(
        "retrieve",
        &a,
        None,
        &[index_dir, queries_path],
        &[out],
        json!({ "queries": run.rankings.len(), "k": k }),
    )
}

fn backend_tag(b: Backend) -> &'static str {
    match b {
        Backend::Bm25 => "bm25",
        Backend::Dense => "dense",
    }
}

fn loss_log_path(out: &Path) -> PathBuf {
    let mut name = out.as_os_str().to_owned();
    name.push(".loss.tsv");
    PathBuf::from(name)
}

pub fn cmd_train_align(args: &TrainAlignArgs) -> CliResult<()> {
    let a = merge_config(args, args.config.as_deref())?;
    let index_dir = required(&a.index, "index")?;
    let passages_path = required(&a.passages, "passages")?;
    let out = required(&a.out, "out")?;
    let index = IndexDir::load(index_dir)?;
    let cfg = train_config(TrainConfig::align(), &a.train);
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let mut model = fresh_model(&index, &a.lm, cfg.seed)?;
    let passages = read_corpus(open(passages_path)?)?;
    let samples = alignment_samples(&model, passages.passages(), a.max_tokens.unwrap_or(32))?;
    let log_path = loss_log_path(out);
    let mut log = create(&log_path)?;
    writeln!(log, "{LOSS_LOG_HEADER}")?;
    let history = train_align(&mut model, &samples, &cfg, Some(&mut log))?;
    log.flush()?;
    Checkpoint::from_model(&model, Stage::Align, cfg.seed, index.spec.encoder_seed)?.save(out)?;
    write_manifest(
        "train-align",
        &a,
        Some(cfg.seed),
        &[index_dir, passages_path],
        &[out, &log_path],
        json!({
            "train_config": cfg,
            "samples": samples.len(),
            "steps": history.len(),
            "final_loss": history.last().map(|s| s.total),
        }),
    )
}

pub fn cmd_train_rank(args: &TrainRankArgs) -> CliResult<()> {
    let a = merge_config(args, args.config.as_deref())?;
    let records_path = required(&a.records, "records")?;
    let out = required(&a.out, "out")?;
    let base = TrainConfig {
        alpha: a.alpha.unwrap_or(DEFAULT_ALPHA),
        list_depth: a.list_depth,
        shuffle_passages: !a.no_shuffle,
        ..TrainConfig::rank()
    };
    let mut inputs: Vec<&Path> = vec![records_path];
    let (mut model, encoder_seed, mut cfg) = match (&a.checkpoint, a.no_align) {
        (Some(_), true) => return Err(usage("--no-align starts from fresh weights; drop --checkpoint")),
        (None, false) => {
            return Err(usage(
                "train-rank needs an align-stage checkpoint (--checkpoint); run train-align first, or pass --no-align with --index to skip alignment",
            ))
        }
        (Some(path), false) => {
            let ckpt = load_stage(path, Stage::Align, "train-rank", "run train-align first")?;
            inputs.push(path);
            let cfg = train_config(TrainConfig { seed: ckpt.meta.seed, ..base }, &a.train);
            (ckpt.to_model()?, ckpt.meta.encoder_seed, cfg)
        }
        (None, true) => {
            let index_dir = required(&a.index, "index")?;
            let index = IndexDir::load(index_dir)?;
            inputs.push(index_dir);
            let cfg = train_config(base, &a.train);
            (fresh_model(&index, &a.lm, cfg.seed)?, index.spec.encoder_seed, cfg)
        }
    };
    cfg.stage = Stage::Rank;
    cfg.validate().map_err(|e| usage(e.to_string()))?;

    let records = read_rank_records(open(records_path)?)?;
    let samples = records
        .into_iter()
        .map(|r| RankSample::from_record(&model, r))
        .collect::<crate::Result<Vec<_>>>()?;
    let templates = RankTemplates::default();
    let (samples, dropped) = filter_by_length(&model.lm, &templates, samples)?;
    if samples.is_empty() && dropped > 0 {
        return Err(Error::invalid(format!(
            "all {dropped} rank records exceed max_seq {}; raise --max-seq",
            model.lm.cfg.max_seq
        ))
        .into());
    }
    let log_path = loss_log_path(out);
    let mut log = create(&log_path)?;
    writeln!(log, "{LOSS_LOG_HEADER}")?;
    let history = train_rank(&mut model, &templates, &samples, &cfg, Some(&mut log))?;
    log.flush()?;
    Checkpoint::from_model(&model, Stage::Rank, cfg.seed, encoder_seed)?.save(out)?;
    write_manifest(
        "train-rank",
        &a,
        Some(cfg.seed),
        &inputs,
        &[out, &log_path],
        json!({
            "train_config": cfg,
            "samples": samples.len(),
            "dropped_too_long": dropped,
            "steps": history.len(),
            "final_loss": history.last().map(|s| s.total),
        }),
    )
}

/// First-stage rankings: from a run file when given, else retrieved.
fn first_stage(
    index: &IndexDir,
    queries: &[Query],
    run: Option<&Path>,
    k: usize,
    backend: Backend,
) -> CliResult<Vec<(Query, Vec<Hit>)>> {
    let run = run.map(|p| open(p).and_then(|r| Ok(read_run(r)?))).transpose()?;
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        let hits = match &run {
            Some(run) => match run.rankings.get(&q.id) {
                Some(ranking) => index.hits_for(ranking, k)?,
                None => Vec::new(),
            },
            None => index.retriever.retrieve_topk(q, k, backend)?,
        };
        if !hits.is_empty() {
            out.push((q.clone(), hits));
        }
    }
    Ok(out)
}

pub fn cmd_rerank(args: &RerankArgs) -> CliResult<()> {
    let a = merge_config(args, args.config.as_deref())?;
    let ckpt_path = required(&a.checkpoint, "checkpoint")?;
    let index_dir = required(&a.index, "index")?;
    let queries_path = required(&a.queries, "queries")?;
    let out = required(&a.out, "out")?;
    let (w, s) = window(&a.window)?;
    let k = a.k.unwrap_or(DEFAULT_K);
    let backend = a.backend.unwrap_or(Backend::Dense);

    let ckpt = load_stage(ckpt_path, Stage::Rank, "rerank", "run train-rank first")?;
    let index = IndexDir::load(index_dir)?;
    index.check_model(&ckpt)?;
    let model = ckpt.to_model()?;
    let queries = read_queries(open(queries_path)?)?;
    let lists = first_stage(&index, &queries, a.run.as_deref(), k, backend)?;

    let template = PromptTemplate::rank_embedding();
    let mut run = RunFile::new("rerank");
    let mut stats = TokenStats::default();
    for (q, hits) in &lists {
        let (ranking, st) = rerank_hits(&model, &template, q, hits, w, s)?;
        stats.absorb(&st);
        let n = ranking.len();
        let ranked = ranking
            .order()
            .into_iter()
            .enumerate()
            .map(|(r, c)| (hits[c].passage.id.clone(), (n - r) as f64))
            .collect();
        run.insert(&q.id, ranked)?;
    }
    let mut f = create(out)?;
    write_run(&mut f, &run)?;
    f.flush()?;

    let mut inputs: Vec<&Path> = vec![ckpt_path, index_dir, queries_path];
    if let Some(r) = &a.run {
        inputs.push(r);
    }
    let per_query = |v: f64| if lists.is_empty() { 0.0 } else { v / lists.len() as f64 };
    write_manifest(
        "rerank",
        &a,
        Some(ckpt.meta.seed),
        &inputs,
        &[out],
        json!({
            "queries": lists.len(),
            "k": k,
            "w": w,
            "s": s,
            "passes": stats.passes,
            "passes_per_query": per_query(stats.passes as f64),
            "processed": stats.processed,
            "generated": stats.generated,
        }),
    )
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub mean: f64,
    pub queries: usize,
    pub per_query: BTreeMap<String, f64>,
    pub no_relevant: Vec<String>,
    pub unjudged: Vec<String>,
    pub baseline_mean: Option<f64>,
    pub ttest: Option<crate::evaluation::TTest>,
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    let a = merge_config(args, args.config.as_deref())?;
    let run_path = required(&a.run, "run")?;
    let qrels_path = required(&a.qrels, "qrels")?;
    let k = a.k.unwrap_or(10);
    if k == 0 {
        return Err(usage("k must be at least 1"));
    }
    let gain = parse_gain(a.gain.as_deref())?;
    let qrels = read_qrels(open(qrels_path)?)?;
    let run = read_run(open(run_path)?)?;
    let rep = ndcg_at_k(&run, &qrels, k, gain)?;
    let (baseline_mean, ttest) = match &a.baseline {
        Some(p) => {
            let base = ndcg_at_k(&read_run(open(p)?)?, &qrels, k, gain)?;
            // Pair on queries scored in both runs.
            let (x, y): (Vec<f64>, Vec<f64>) = rep
                .per_query
                .iter()
                .filter_map(|(q, v)| base.per_query.get(q).map(|b| (*v, *b)))
                .unzip();
            (Some(base.mean), Some(paired_ttest(&x, &y)?))
        }
        None => (None, None),
    };
    let report = EvalReport {
        k,
        mean: rep.mean,
        queries: rep.per_query.len(),
        per_query: rep.per_query,
        no_relevant: rep.no_relevant,
        unjudged: rep.unjudged,
        baseline_mean,
        ttest,
    };
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(out) = &a.out {
        let mut f = create(out)?;
        writeln!(f, "{text}")?;
        f.flush()?;
        let mut inputs: Vec<&Path> = vec![run_path, qrels_path];
        if let Some(b) = &a.baseline {
            inputs.push(b);
        }
        write_manifest("eval", &a, None, &inputs, &[out], json!({ "mean": report.mean }))?;
    }
    Ok(())
}

fn mean_len(texts: impl Iterator<Item = usize>) -> f64 {
    let (sum, n) = texts.fold((0usize, 0usize), |(s, n), l| (s + l, n + 1));
    if n == 0 {
        0.0
    } else {
        sum as f64 / n as f64
    }
}

pub fn cmd_bench(args: &BenchArgs) -> CliResult<()> {
    let a = merge_config(args, args.config.as_deref())?;
    let ckpt_path = required(&a.checkpoint, "checkpoint")?;
    let index_dir = required(&a.index, "index")?;
    let queries_path = required(&a.queries, "queries")?;
    let out = required(&a.out, "out")?;
    let (w, s) = window(&a.window)?;
    let n = a.n.unwrap_or(DEFAULT_K);
    let reps = a.reps.unwrap_or(5);
    if reps == 0 || n == 0 {
        return Err(usage("n and reps must be positive"));
    }

    let ckpt = load_stage(ckpt_path, Stage::Rank, "bench", "run train-rank first")?;
    let index = IndexDir::load(index_dir)?;
    index.check_model(&ckpt)?;
    let model = ckpt.to_model()?;
    let mut queries = read_queries(open(queries_path)?)?;
    if let Some(l) = a.limit {
        queries.truncate(l);
    }
    let lists = first_stage(&index, &queries, None, n, Backend::Dense)?;
    if lists.is_empty() {
        return Err(Error::invalid("no query retrieved any candidate").into());
    }
    let template = PromptTemplate::rank_embedding();

    let mut prefill = Vec::with_capacity(reps);
    let mut decode = Vec::with_capacity(reps);
    let mut wall = Vec::with_capacity(reps);
    let mut stats = TokenStats::default();
    for _ in 0..reps {
        stats = TokenStats::default();
        let t = Instant::now();
        for (q, hits) in &lists {
            let (_, st) = rerank_hits(&model, &template, q, hits, w, s)?;
            stats.absorb(&st);
        }
        wall.push(t.elapsed().as_secs_f64());
        prefill.push(stats.prefill_seconds);
        decode.push(stats.decode_seconds);
    }
    let nq = lists.len() as f64;
    let prefill_s = median(&prefill).unwrap_or(0.0) / nq;
    let decode_s = median(&decode).unwrap_or(0.0) / nq;
    let measured_processed = stats.processed as f64 / nq;
    let measured_generated = stats.generated as f64 / nq;

    let vocab = model.lm.cfg.vocab_size;
    let n_eff = lists.iter().map(|(_, h)| h.len()).max().unwrap_or(0);
    let schedule = WindowSchedule::new(n_eff, w, s)?;
    let query_tokens = mean_len(lists.iter().map(|(q, _)| lm_tokenize(&q.text, vocab).len()));
    let passage_tokens = mean_len(index.retriever.corpus.passages().iter().map(|p| lm_tokenize(&p.text, vocab).len()));
    let emb_model = CostModel::for_template(CostMode::Embedding, &template, vocab, query_tokens, 0.0);
    let mut text_model = CostModel::for_template(
        CostMode::Text,
        &PromptTemplate::rank_content(),
        vocab,
        query_tokens,
        passage_tokens,
    );
    text_model.gen_per_passage = a.gen_per_passage.unwrap_or(DEFAULT_GEN_PER_PASSAGE);
    let emb_pred = predict_cost(&emb_model, &schedule)?;
    let text_pred = predict_cost(&text_model, &schedule)?;

    // Text-mode seconds scale the measured per-position rates.
    let per_processed = if measured_processed > 0.0 { prefill_s / measured_processed } else { 0.0 };
    let per_generated = if measured_generated > 0.0 { decode_s / measured_generated } else { 0.0 };
    let rows = vec![
        EfficiencyRow {
            system: "embedding-measured".into(),
            n: n_eff,
            w,
            s,
            processed: measured_processed,
            generated: measured_generated,
            prefill_s,
            decode_s,
        },
        EfficiencyRow {
            system: "embedding-model".into(),
            n: n_eff,
            w,
            s,
            processed: emb_pred.processed,
            generated: emb_pred.generated,
            prefill_s: per_processed * emb_pred.processed,
            decode_s: per_generated * emb_pred.generated,
        },
        EfficiencyRow {
            system: "text-model".into(),
            n: n_eff,
            w,
            s,
            processed: text_pred.processed,
            generated: text_pred.generated,
            prefill_s: per_processed * text_pred.processed,
            decode_s: per_generated * text_pred.generated,
        },
    ];
    let footer = format!(
        "per-query means over {} queries; seconds are the median of {reps} repetitions\n\
         text-model rows are predicted from the closed-form cost model, not measured;\n\
         their seconds apply the measured per-position rates",
        lists.len()
    );
    let mut f = create(out)?;
    write_efficiency_report(&mut f, &rows, Some(&footer))?;
    f.flush()?;
    write_manifest(
        "bench",
        &a,
        Some(ckpt.meta.seed),
        &[ckpt_path, index_dir, queries_path],
        &[out],
        json!({
            "reps": reps,
            "queries": lists.len(),
            "passes_per_query": schedule.passes(),
            "wall_seconds": wall,
        }),
    )
}

pub fn cmd_gen_synthetic(args: &GenSyntheticArgs) -> CliResult<()> {
    let a = merge_config(args, args.config.as_deref())?;
    let out = required(&a.out, "out")?;
    let d = SyntheticConfig::default();
    let spec = EncoderSpec::from_args(&a.encoder);
    let cfg = SyntheticConfig {
        seed: a.seed.unwrap_or(d.seed),
        queries: a.queries.unwrap_or(d.queries),
        train_corpora: a.train_corpora.unwrap_or(d.train_corpora),
        passage_len: a.passage_len.unwrap_or(d.passage_len),
        encoder_hash_size: spec.hash_size,
        ..d
    };
    let train_k = a.train_k.unwrap_or(DEFAULT_W);
    let data = generate(&cfg).map_err(|e| usage(e.to_string()))?;
    let encoder = spec.build()?;
    let teacher = KeywordTeacher::new(&data.keywords);
    let mut records = Vec::new();
    for split in &data.train {
        let retriever = Retriever::build(Corpus::new(split.passages.clone())?, encoder.clone())?;
        records.extend(rank_records(&retriever, &split.queries, train_k, Backend::Dense, &teacher)?);
    }

    fs::create_dir_all(out)?;
    let files = [
        "corpus.jsonl",
        "queries.jsonl",
        "qrels.txt",
        "train_passages.jsonl",
        "train_rank.jsonl",
    ];
    let paths: Vec<PathBuf> = files.iter().map(|f| out.join(f)).collect();
    let mut f = create(&paths[0])?;
    write_corpus(&mut f, &Corpus::new(data.eval.passages.clone())?)?;
    f.flush()?;
    let mut f = create(&paths[1])?;
    write_queries(&mut f, &data.eval.queries)?;
    f.flush()?;
    let mut f = create(&paths[2])?;
    write_qrels(&mut f, &data.eval.qrels)?;
    f.flush()?;
    let mut f = create(&paths[3])?;
    write_corpus(&mut f, &Corpus::new(data.train_passages().cloned().collect())?)?;
    f.flush()?;
    let mut f = create(&paths[4])?;
    write_rank_records(&mut f, &records)?;
    f.flush()?;

    write_manifest(
        "gen-synthetic",
        &a,
        Some(cfg.seed),
        &[],
        &[out],
        json!({ "synthetic": cfg, "encoder": spec, "rank_records": records.len() }),
    )
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Index(a) => cmd_index(&a),
        Command::Retrieve(a) => cmd_retrieve(&a),
        Command::TrainAlign(a) => cmd_train_align(&a),
        Command::TrainRank(a) => cmd_train_rank(&a),
        Command::Rerank(a) => cmd_rerank(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Bench(a) => cmd_bench(&a),
        Command::GenSynthetic(a) => cmd_gen_synthetic(&a),
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}
