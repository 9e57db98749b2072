//! First-stage retrieval: corpus I/O, a BM25 inverted index, a frozen
//! hashing embedding-bag encoder, and an exact dot-product vector index.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, l2_norm, Matrix, ParamSet, Parameter, Rng};

pub const DEFAULT_HASH_SIZE: usize = 2048;
pub const DEFAULT_ENCODER_DIM: usize = 64;

/// Lowercased alphanumeric runs of `text`.
pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
        .collect()
}

/// 64-bit FNV-1a.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn hash_word(word: &str, hash_size: usize) -> u32 {
    (fnv1a(word.as_bytes()) % hash_size as u64) as u32
}

/// Lowercase, split on non-alphanumerics, hash each word into `[0, hash_size)`.
pub fn tokenize(text: &str, hash_size: usize) -> Vec<u32> {
    words(text)
        .iter()
        .map(|w| hash_word(w, hash_size))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
}

/// Passages with unique ids, in file order.
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    passages: Vec<Passage>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(passages: Vec<Passage>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            if p.text.trim().is_empty() {
                return Err(Error::invalid(format!("passage `{}` has empty text", p.id)));
            }
            if by_id.insert(p.id.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate passage id `{}`", p.id)));
            }
        }
        Ok(Self { passages, by_id })
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }

    pub fn get(&self, id: &str) -> Option<&Passage> {
        self.index_of(id).map(|i| &self.passages[i])
    }
}

fn read_jsonl<T: serde::de::DeserializeOwned>(reader: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

fn write_jsonl<T: Serialize>(mut w: impl Write, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_corpus(reader: impl BufRead) -> Result<Corpus> {
    Corpus::new(read_jsonl(reader)?)
}

pub fn write_corpus(w: impl Write, corpus: &Corpus) -> Result<()> {
    write_jsonl(w, corpus.passages())
}

pub fn read_queries(reader: impl BufRead) -> Result<Vec<Query>> {
    let qs: Vec<Query> = read_jsonl(reader)?;
    if let Some(q) = qs.iter().find(|q| q.text.trim().is_empty()) {
        return Err(Error::invalid(format!("query `{}` has empty text", q.id)));
    }
    Ok(qs)
}

pub fn write_queries(w: impl Write, queries: &[Query]) -> Result<()> {
    write_jsonl(w, queries)
}

/// A unit-norm vector produced by the encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
}

impl Embedding {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn dot(&self, other: &Embedding) -> f64 {
        dot(&self.values, &other.values)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EmbeddingHeader {
    dim: usize,
    count: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EmbeddingRecord {
    id: String,
    values: Vec<f64>,
}

/// Precomputed-embeddings file: a `{"dim","count"}` header line, then one
/// `{"id","values"}` line per passage.
pub fn write_embeddings(mut w: impl Write, ids: &[String], rows: &Matrix) -> Result<()> {
    serde_json::to_writer(
        &mut w,
        &EmbeddingHeader {
            dim: rows.cols(),
            count: ids.len(),
        },
    )?;
    w.write_all(b"\n")?;
    for (i, id) in ids.iter().enumerate() {
        serde_json::to_writer(
            &mut w,
            &EmbeddingRecord {
                id: id.clone(),
                values: rows.row(i).to_vec(),
            },
        )?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_embeddings(reader: impl BufRead) -> Result<VectorIndex> {
    let mut lines = reader.lines();
    let header: EmbeddingHeader = match lines.next() {
        Some(l) => serde_json::from_str(&l?).map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?,
        None => return Err(Error::Parse { line: 1, message: "missing header".into() }),
    };
    let mut ids = Vec::with_capacity(header.count);
    let mut matrix = Matrix::zeros(0, header.dim);
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 2,
            message: e.to_string(),
        })?;
        if rec.values.len() != header.dim {
            return Err(Error::Parse {
                line: i + 2,
                message: format!("expected {} values, got {}", header.dim, rec.values.len()),
            });
        }
        ids.push(rec.id);
        matrix.push_row(&rec.values)?;
    }
    if ids.len() != header.count {
        return Err(Error::Parse {
            line: ids.len() + 1,
            message: format!("header promised {} embeddings, found {}", header.count, ids.len()),
        });
    }
    VectorIndex::new(ids, matrix)
}

/// Okapi BM25 over lowercased words.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Bm25Index {
    pub k1: f64,
    pub b: f64,
    /// term -> (passage index, term frequency), ascending passage index
    pub postings: BTreeMap<String, Vec<(usize, u32)>>,
    pub doc_ids: Vec<String>,
    pub doc_lengths: Vec<usize>,
    pub avgdl: f64,
}

impl Bm25Index {
    pub const DEFAULT_K1: f64 = 0.9;
    pub const DEFAULT_B: f64 = 0.4;

    pub fn build(corpus: &Corpus) -> Result<Self> {
        Self::with_params(corpus, Self::DEFAULT_K1, Self::DEFAULT_B)
    }

    pub fn with_params(corpus: &Corpus, k1: f64, b: f64) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut postings: BTreeMap<String, Vec<(usize, u32)>> = BTreeMap::new();
        let mut doc_lengths = Vec::with_capacity(corpus.len());
        for (i, p) in corpus.passages().iter().enumerate() {
            let ws = words(&p.text);
            doc_lengths.push(ws.len());
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for w in ws {
                *tf.entry(w).or_default() += 1;
            }
            for (term, f) in tf {
                postings.entry(term).or_default().push((i, f));
            }
        }
        let avgdl = doc_lengths.iter().sum::<usize>() as f64 / doc_lengths.len() as f64;
        Ok(Self {
            k1,
            b,
            postings,
            doc_ids: corpus.passages().iter().map(|p| p.id.clone()).collect(),
            doc_lengths,
            avgdl,
        })
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }

    pub fn idf(&self, df: usize) -> f64 {
        let n = self.len() as f64;
        let df = df as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    fn term_score(&self, tf: u32, dl: usize) -> f64 {
        let tf = f64::from(tf);
        let norm = 1.0 - self.b + self.b * dl as f64 / self.avgdl;
        tf * (self.k1 + 1.0) / (tf + self.k1 * norm)
    }

    /// BM25 score of the passage with id `passage_id` for `query` text.
    pub fn score(&self, query: &str, passage_id: &str) -> Result<f64> {
        let doc = self
            .doc_ids
            .iter()
            .position(|d| d == passage_id)
            .ok_or_else(|| Error::UnknownPassage(passage_id.to_string()))?;
        let mut score = 0.0;
        for term in words(query) {
            if let Some(list) = self.postings.get(&term) {
                if let Ok(pos) = list.binary_search_by_key(&doc, |&(d, _)| d) {
                    score += self.idf(list.len()) * self.term_score(list[pos].1, self.doc_lengths[doc]);
                }
            }
        }
        Ok(score)
    }

    /// Scores for every passage, in corpus order.
    pub fn score_all(&self, query: &str) -> Vec<f64> {
        let mut scores = vec![0.0; self.len()];
        for term in words(query) {
            if let Some(list) = self.postings.get(&term) {
                let idf = self.idf(list.len());
                for &(d, tf) in list {
                    scores[d] += idf * self.term_score(tf, self.doc_lengths[d]);
                }
            }
        }
        scores
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Average of token rows.
    Mean,
    /// Reserved prefix row plus token rows.
    Cls,
}

impl std::str::FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "cls" => Ok(Pooling::Cls),
            other => Err(Error::invalid(format!("unknown pooling `{other}`"))),
        }
    }
}

/// Frozen hashing embedding-bag encoder. Row `hash_size` is the reserved
/// prefix row used by [`Pooling::Cls`].
#[derive(Clone, Debug)]
pub struct ToyEncoder {
    pub vocab_hash_size: usize,
    pub pooling: Pooling,
    pub table: Parameter,
}

impl ToyEncoder {
    pub fn new(rng: &mut Rng, vocab_hash_size: usize, dim: usize, pooling: Pooling) -> Self {
        let mut table = rng.matrix_normal(vocab_hash_size + 1, dim, 1.0 / (dim as f64).sqrt());
        // Held at checkpoint precision so a fresh encoder and a reloaded one
        // embed identically.
        table.data_mut().iter_mut().for_each(|v| *v = f64::from(*v as f32));
        Self {
            vocab_hash_size,
            pooling,
            table: Parameter::frozen(table),
        }
    }

    pub fn from_table(table: Matrix, pooling: Pooling) -> Result<Self> {
        if table.rows() < 2 {
            return Err(Error::invalid("encoder table needs at least two rows"));
        }
        Ok(Self {
            vocab_hash_size: table.rows() - 1,
            pooling,
            table: Parameter::frozen(table),
        })
    }

    pub fn dim(&self) -> usize {
        self.table.value.cols()
    }

    pub fn encode(&self, text: &str) -> Result<Embedding> {
        let ids = tokenize(text, self.vocab_hash_size);
        if ids.is_empty() {
            return Err(Error::UnencodableText);
        }
        let mut acc = vec![0.0; self.dim()];
        for &id in &ids {
            axpy(1.0, self.table.value.row(id as usize), &mut acc);
        }
        match self.pooling {
            Pooling::Mean => acc.iter_mut().for_each(|v| *v /= ids.len() as f64),
            Pooling::Cls => axpy(1.0, self.table.value.row(self.vocab_hash_size), &mut acc),
        }
        let norm = l2_norm(&acc);
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::UnencodableText);
        }
        acc.iter_mut().for_each(|v| *v /= norm);
        Ok(Embedding { values: acc })
    }

    /// Encodes each passage's text, stacked in corpus order.
    pub fn encode_corpus(&self, corpus: &Corpus) -> Result<Matrix> {
        let mut m = Matrix::zeros(0, self.dim());
        for p in corpus.passages() {
            m.push_row(&self.encode(&p.text)?.values)?;
        }
        Ok(m)
    }
}

impl ParamSet for ToyEncoder {
    fn visit(&self, f: &mut dyn FnMut(&str, &Parameter)) {
        f("encoder.table", &self.table);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Parameter)) {
        f("encoder.table", &mut self.table);
    }
}

/// Exact dot-product index over unit-norm rows.
#[derive(Clone, Debug)]
pub struct VectorIndex {
    pub ids: Vec<String>,
    pub matrix: Matrix,
}

impl VectorIndex {
    pub fn new(ids: Vec<String>, matrix: Matrix) -> Result<Self> {
        if ids.len() != matrix.rows() {
            return Err(Error::ShapeMismatch {
                op: "vector_index",
                left: (ids.len(), 1),
                right: matrix.shape(),
            });
        }
        Ok(Self { ids, matrix })
    }

    pub fn build(encoder: &ToyEncoder, corpus: &Corpus) -> Result<Self> {
        let ids = corpus.passages().iter().map(|p| p.id.clone()).collect();
        Self::new(ids, encoder.encode_corpus(corpus)?)
    }

    pub fn embedding(&self, row: usize) -> Embedding {
        Embedding {
            values: self.matrix.row(row).to_vec(),
        }
    }

    pub fn scores(&self, q: &Embedding) -> Vec<f64> {
        (0..self.matrix.rows())
            .map(|r| dot(self.matrix.row(r), &q.values))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    Bm25,
    Dense,
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bm25" => Ok(Backend::Bm25),
            "dense" => Ok(Backend::Dense),
            other => Err(Error::invalid(format!("unknown backend `{other}`"))),
        }
    }
}

/// One retrieved candidate.
#[derive(Clone, Debug)]
pub struct Hit {
    pub passage: Passage,
    pub embedding: Embedding,
    pub score: f64,
}

/// Corpus plus both first-stage indexes.
#[derive(Clone, Debug)]
pub struct Retriever {
    pub corpus: Corpus,
    pub bm25: Bm25Index,
    pub encoder: ToyEncoder,
    pub vectors: VectorIndex,
}

impl Retriever {
    pub fn build(corpus: Corpus, encoder: ToyEncoder) -> Result<Self> {
        let bm25 = Bm25Index::build(&corpus)?;
        let vectors = VectorIndex::build(&encoder, &corpus)?;
        Ok(Self {
            corpus,
            bm25,
            encoder,
            vectors,
        })
    }

    /// Uses stored embeddings instead of re-encoding the corpus.
    pub fn with_vectors(corpus: Corpus, encoder: ToyEncoder, vectors: VectorIndex) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if vectors.ids.len() != corpus.len()
            || vectors.ids.iter().zip(corpus.passages()).any(|(a, p)| *a != p.id)
        {
            return Err(Error::invalid("embedding ids do not match corpus order"));
        }
        let bm25 = Bm25Index::build(&corpus)?;
        Ok(Self {
            corpus,
            bm25,
            encoder,
            vectors,
        })
    }

    /// Top `k` passages by descending score, ties by ascending passage id.
    pub fn retrieve_topk(&self, query: &Query, k: usize, backend: Backend) -> Result<Vec<Hit>> {
        if self.corpus.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let scores = match backend {
            Backend::Bm25 => self.bm25.score_all(&query.text),
            Backend::Dense => self.vectors.scores(&self.encoder.encode(&query.text)?),
        };
        let passages = self.corpus.passages();
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .unwrap_or(Ordering::Equal)
                .then_with(|| passages[a].id.cmp(&passages[b].id))
        });
        order.truncate(k.min(order.len()));
        Ok(order
            .into_iter()
            .map(|i| Hit {
                passage: passages[i].clone(),
                embedding: self.vectors.embedding(i),
                score: scores[i],
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(texts: &[&str]) -> Corpus {
        Corpus::new(
            texts
                .iter()
                .enumerate()
                .map(|(i, t)| Passage {
                    id: format!("d{i}"),
                    title: None,
                    text: t.to_string(),
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn tokenize_basics() {
        assert!(tokenize("", 2048).is_empty());
        let t = tokenize("Hello, hello", 2048);
        assert_eq!(t.len(), 2);
        assert_eq!(t[0], t[1]);
        assert!(t.iter().all(|&x| x < 2048));
    }

    #[test]
    fn tokenize_snapshot() {
        // Frozen after first implementation; guards the hash and word splitter.
        assert_eq!(
            tokenize("The quick brown fox jumps over 13 lazy dogs.", 2048),
            vec![1404, 1436, 1487, 910, 1754, 111, 1469, 815, 1454]
        );
    }

    #[test]
    fn bm25_no_indexed_terms_scores_zero() {
        let idx = Bm25Index::build(&corpus(&["alpha beta", "gamma"])).unwrap();
        assert_eq!(idx.score("zeta eta", "d0").unwrap(), 0.0);
        assert!(matches!(idx.score("alpha", "nope"), Err(Error::UnknownPassage(_))));
    }

    #[test]
    fn bm25_single_doc_matches_hand_formula() {
        let idx = Bm25Index::build(&corpus(&["apple banana apple"])).unwrap();
        let (k1, b) = (0.9, 0.4);
        // N=1, df=1: idf = ln(1 + 0.5/1.5); dl = avgdl = 3.
        let idf = (1.0f64 + 0.5 / 1.5).ln();
        let tf_part = |tf: f64| tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b));
        let expected = idf * tf_part(2.0) + idf * tf_part(1.0) + idf * tf_part(2.0);
        // The query repeats "apple", so its term contributes twice.
        let got = idx.score("apple banana apple", "d0").unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn bm25_prefers_containing_doc() {
        let idx = Bm25Index::build(&corpus(&["red car", "blue boat"])).unwrap();
        assert!(idx.score("boat", "d1").unwrap() > idx.score("boat", "d0").unwrap());
    }

    #[test]
    fn encode_single_token_is_normalized_row() {
        let enc = ToyEncoder::new(&mut Rng::new(1), 64, 8, Pooling::Mean);
        let e = enc.encode("word").unwrap();
        let row = enc.table.value.row(hash_word("word", 64) as usize);
        let n = l2_norm(row);
        for (a, b) in e.values.iter().zip(row) {
            assert!((a - b / n).abs() < 1e-15);
        }
        assert_eq!(e, enc.encode("word").unwrap());
        assert!(matches!(enc.encode(" ,, "), Err(Error::UnencodableText)));
    }

    #[test]
    fn encode_two_tokens_mean_pooling() {
        let enc = ToyEncoder::new(&mut Rng::new(2), 64, 8, Pooling::Mean);
        let a = enc.table.value.row(hash_word("alpha", 64) as usize);
        let b = enc.table.value.row(hash_word("omega", 64) as usize);
        let mean: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x + y) / 2.0).collect();
        let n = l2_norm(&mean);
        let e = enc.encode("alpha omega").unwrap();
        for (x, m) in e.values.iter().zip(&mean) {
            assert!((x - m / n).abs() < 1e-14);
        }
    }

    #[test]
    fn cls_pooling_includes_prefix_row() {
        let enc = ToyEncoder::new(&mut Rng::new(2), 64, 8, Pooling::Cls);
        let a = enc.encode("alpha").unwrap();
        let b = enc.encode("omega").unwrap();
        assert!((l2_norm(&a.values) - 1.0).abs() < 1e-12);
        // The shared prefix row pulls unrelated texts together.
        assert!(a.dot(&b) > -1.0 && a != b);
    }

    #[test]
    fn dense_identical_query_ranks_first() {
        let c = corpus(&["one two three", "four five six", "seven eight nine"]);
        let enc = ToyEncoder::new(&mut Rng::new(3), 2048, 16, Pooling::Mean);
        let r = Retriever::build(c, enc).unwrap();
        let q = Query { id: "q".into(), text: "four five six".into() };
        let hits = r.retrieve_topk(&q, 10, Backend::Dense).unwrap();
        assert_eq!(hits.len(), 3);
        assert_eq!(hits[0].passage.id, "d1");
        assert!((hits[0].score - 1.0).abs() < 1e-9);
        assert!(hits.windows(2).all(|w| w[0].score >= w[1].score));
        for h in &hits {
            assert!((l2_norm(&h.embedding.values) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn topk_matches_exhaustive_sort() {
        let texts: Vec<String> = (0..10)
            .map(|i| format!("w{} w{} common w{}", i % 3, i % 5, i))
            .collect();
        let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
        let enc = ToyEncoder::new(&mut Rng::new(4), 2048, 16, Pooling::Mean);
        let r = Retriever::build(corpus(&refs), enc.clone()).unwrap();
        let q = Query { id: "q".into(), text: "w1 common w4".into() };
        for backend in [Backend::Dense, Backend::Bm25] {
            let hits = r.retrieve_topk(&q, 3, backend).unwrap();
            // Brute force: score every passage independently, then sort.
            let qe = enc.encode(&q.text).unwrap();
            let mut all: Vec<(f64, String)> = refs
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let id = format!("d{i}");
                    let s = match backend {
                        Backend::Dense => enc.encode(t).unwrap().dot(&qe),
                        Backend::Bm25 => r.bm25.score(&q.text, &id).unwrap(),
                    };
                    (s, id)
                })
                .collect();
            all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
            let expect: Vec<&String> = all.iter().take(3).map(|x| &x.1).collect();
            let got: Vec<&String> = hits.iter().map(|h| &h.passage.id).collect();
            assert_eq!(got, expect, "{backend:?}");
        }
    }

    #[test]
    fn stored_and_fresh_embeddings_agree() {
        let c = corpus(&["a b c", "d e f"]);
        let enc = ToyEncoder::new(&mut Rng::new(8), 512, 8, Pooling::Mean);
        let idx = VectorIndex::build(&enc, &c).unwrap();
        let mut buf = Vec::new();
        write_embeddings(&mut buf, &idx.ids, &idx.matrix).unwrap();
        let back = read_embeddings(buf.as_slice()).unwrap();
        assert_eq!(back.ids, idx.ids);
        assert_eq!(back.matrix, idx.matrix);
        assert_eq!(back.embedding(1), enc.encode("d e f").unwrap());
    }

    #[test]
    fn corpus_parse_errors_carry_line_numbers() {
        let data = "{\"id\":\"a\",\"text\":\"x\"}\n{not json}\n";
        match read_corpus(data.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(matches!(Bm25Index::build(&Corpus::default()), Err(Error::EmptyCorpus)));
    }
}
