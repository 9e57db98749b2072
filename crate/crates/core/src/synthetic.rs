//! Planted-relevance synthetic corpora.
//!
//! Words are salted pseudo-words from three disjoint pools: keywords, which
//! carry relevance; fillers, which appear in queries without adding
//! relevance; and noise. Each query has a few keywords and a few fillers. A
//! passage's grade for a query is the number of that query's keywords it
//! contains. Every query owns one passage per grade plus distractors that
//! carry all of its fillers, which attract an embedding retriever.
//!
//! Training data comes as many small corpora built the same way from the
//! shared pools. Keywords recur across corpora in new combinations, so a
//! passage's relevance can only be read off the query, never memorised.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::Qrels;
use crate::lm::{lm_token, template_vocabulary};
use crate::numerics::Rng;
use crate::retrieval::{hash_word, words, Passage, Query};
use crate::training::TeacherScorer;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    /// Queries per corpus; each owns `passages_per_query` planted passages.
    pub queries: usize,
    pub passages_per_query: usize,
    /// Independent training corpora.
    pub train_corpora: usize,
    pub keyword_pool: usize,
    pub filler_pool: usize,
    pub noise_pool: usize,
    pub query_keywords: usize,
    pub query_fillers: usize,
    /// Mean passage length in words.
    pub passage_len: usize,
    /// Hash sizes whose buckets the generated words must not share.
    pub encoder_hash_size: usize,
    pub lm_vocab_size: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            queries: 40,
            passages_per_query: 5,
            train_corpora: 25,
            keyword_pool: 120,
            filler_pool: 100,
            noise_pool: 40,
            query_keywords: 3,
            query_fillers: 3,
            passage_len: 10,
            encoder_hash_size: 2048,
            lm_vocab_size: 2048,
        }
    }
}

/// One corpus with its queries and graded judgments.
#[derive(Clone, Debug)]
pub struct SyntheticSplit {
    pub passages: Vec<Passage>,
    pub queries: Vec<Query>,
    pub qrels: Qrels,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub eval: SyntheticSplit,
    pub train: Vec<SyntheticSplit>,
    /// The relevance-carrying words.
    pub keywords: Vec<String>,
}

impl SyntheticData {
    pub fn train_passages(&self) -> impl Iterator<Item = &Passage> {
        self.train.iter().flat_map(|s| &s.passages)
    }
}

/// Scores a passage by the number of distinct query keywords it contains,
/// which reproduces the planted grades.
#[derive(Clone, Debug)]
pub struct KeywordTeacher {
    keywords: HashSet<String>,
}

impl KeywordTeacher {
    pub fn new(keywords: &[String]) -> Self {
        Self {
            keywords: keywords.iter().cloned().collect(),
        }
    }
}

impl TeacherScorer for KeywordTeacher {
    fn score(&self, query: &str, passage: &str) -> f64 {
        let present: HashSet<String> = words(passage).into_iter().collect();
        let asked: HashSet<String> = words(query).into_iter().filter(|w| self.keywords.contains(w)).collect();
        asked.iter().filter(|w| present.contains(*w)).count() as f64
    }
}

struct Pools {
    keywords: Vec<String>,
    fillers: Vec<String>,
    noise: Vec<String>,
}

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

fn pseudo_word(rng: &mut Rng, syllables: usize) -> String {
    (0..syllables)
        .map(|_| format!("{}{}", ONSETS[rng.index(ONSETS.len())], VOWELS[rng.index(VOWELS.len())]))
        .collect()
}

fn make_pools(cfg: &SyntheticConfig, rng: &mut Rng) -> Result<Pools> {
    let total = cfg.keyword_pool + cfg.filler_pool + cfg.noise_pool;
    let mut seen_words: HashSet<String> = template_vocabulary().into_iter().collect();
    let mut enc_buckets: HashSet<u32> = HashSet::new();
    let mut lm_buckets: HashSet<u32> = seen_words
        .iter()
        .map(|w| lm_token(w, cfg.lm_vocab_size))
        .collect();
    let mut out = Vec::with_capacity(total);
    let mut attempts = 0;
    while out.len() < total {
        attempts += 1;
        if attempts > 200 * total {
            return Err(Error::invalid("could not draw enough collision-free words; enlarge the hash sizes"));
        }
        let w = pseudo_word(rng, 3);
        let e = hash_word(&w, cfg.encoder_hash_size);
        let l = lm_token(&w, cfg.lm_vocab_size);
        if seen_words.contains(&w) || enc_buckets.contains(&e) || lm_buckets.contains(&l) {
            continue;
        }
        seen_words.insert(w.clone());
        enc_buckets.insert(e);
        lm_buckets.insert(l);
        out.push(w);
    }
    let noise = out.split_off(cfg.keyword_pool + cfg.filler_pool);
    let fillers = out.split_off(cfg.keyword_pool);
    Ok(Pools {
        keywords: out,
        fillers,
        noise,
    })
}

fn pick<'a>(pool: &'a [String], k: usize, rng: &mut Rng) -> Vec<&'a String> {
    rng.sample_indices(pool.len(), k).into_iter().map(|i| &pool[i]).collect()
}

/// Builds one corpus whose queries have pairwise disjoint keyword sets.
fn make_split(cfg: &SyntheticConfig, pools: &Pools, prefix: &str, rng: &mut Rng) -> SyntheticSplit {
    let mut order: Vec<usize> = (0..pools.keywords.len()).collect();
    rng.shuffle(&mut order);
    let keyword_sets: Vec<Vec<String>> = order
        .chunks(cfg.query_keywords)
        .take(cfg.queries)
        .map(|c| c.iter().map(|&i| pools.keywords[i].clone()).collect())
        .collect();

    let mut passages = Vec::new();
    let mut queries = Vec::new();
    for (qi, keywords) in keyword_sets.iter().enumerate() {
        let fillers: Vec<String> = pick(&pools.fillers, cfg.query_fillers, rng).into_iter().cloned().collect();
        // Topic words lead and generic words trail, as in typed queries.
        let qwords: Vec<String> = keywords.iter().chain(&fillers).cloned().collect();
        queries.push(Query {
            id: format!("{prefix}q{qi}"),
            text: qwords.join(" "),
        });
        for pi in 0..cfg.passages_per_query {
            // Grades descend from all keywords down to none; the rest are
            // distractors carrying every filler of the query.
            let shared = cfg.query_keywords.saturating_sub(pi);
            let mut body: Vec<String> = pick(keywords, shared, rng).into_iter().cloned().collect();
            if shared == 0 {
                body.extend(fillers.iter().cloned());
            }
            let len = cfg.passage_len - 2 + rng.index(5);
            while body.len() < len {
                body.push(pools.noise[rng.index(pools.noise.len())].clone());
            }
            rng.shuffle(&mut body);
            passages.push(Passage {
                id: format!("{prefix}d{qi}_{pi}"),
                title: None,
                text: body.join(" "),
            });
        }
    }
    rng.shuffle(&mut passages);
    let qrels = grade_split(&passages, &queries, &keyword_sets);
    SyntheticSplit { passages, queries, qrels }
}

/// Grade of every (query, passage) pair with a positive keyword overlap.
fn grade_split(passages: &[Passage], queries: &[Query], keyword_sets: &[Vec<String>]) -> Qrels {
    let mut qrels = Qrels::default();
    let passage_words: Vec<HashSet<String>> = passages
        .iter()
        .map(|p| words(&p.text).into_iter().collect())
        .collect();
    for (q, kws) in queries.iter().zip(keyword_sets) {
        for (p, pw) in passages.iter().zip(&passage_words) {
            let g = kws.iter().filter(|k| pw.contains(*k)).count() as u32;
            if g > 0 {
                qrels.insert(&q.id, &p.id, g);
            }
        }
    }
    qrels
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    if cfg.queries == 0 || cfg.passages_per_query == 0 || cfg.query_keywords == 0 {
        return Err(Error::invalid("synthetic corpus needs queries, passages and keywords"));
    }
    if cfg.query_keywords * cfg.queries > cfg.keyword_pool || cfg.query_fillers > cfg.filler_pool {
        return Err(Error::invalid("keyword pool too small for disjoint queries"));
    }
    if cfg.passage_len < 2 + cfg.query_keywords + cfg.query_fillers || cfg.noise_pool == 0 {
        return Err(Error::invalid("passages too short for planted words"));
    }
    let mut rng = Rng::labeled(cfg.seed, "synthetic");
    let pools = make_pools(cfg, &mut rng)?;
    let eval = make_split(cfg, &pools, "", &mut rng);
    let train = (0..cfg.train_corpora)
        .map(|i| make_split(cfg, &pools, &format!("train{i}-"), &mut rng))
        .collect();
    Ok(SyntheticData {
        eval,
        train,
        keywords: pools.keywords,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_sizes_and_determinism() {
        let cfg = SyntheticConfig::default();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.eval.passages.len(), 200);
        assert_eq!(a.eval.queries.len(), 40);
        assert_eq!(a.eval.passages, b.eval.passages);
        assert_eq!(a.eval.qrels, b.eval.qrels);
        assert_eq!(a.train.len(), cfg.train_corpora);
        assert_eq!(a.train_passages().count(), 200 * cfg.train_corpora);
        let other = generate(&SyntheticConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.eval.passages, other.eval.passages);
    }

    #[test]
    fn each_query_has_a_fully_relevant_passage() {
        let data = generate(&SyntheticConfig::default()).unwrap();
        for q in &data.eval.queries {
            let grades = &data.eval.qrels.grades[&q.id];
            assert_eq!(grades.values().max(), Some(&3));
            assert_eq!(grades.values().filter(|&&g| g == 3).count(), 1);
        }
    }

    #[test]
    fn words_do_not_collide_in_hash_buckets() {
        let cfg = SyntheticConfig::default();
        let data = generate(&cfg).unwrap();
        let mut all: HashSet<String> = HashSet::new();
        for p in data.eval.passages.iter().chain(data.train_passages()) {
            all.extend(words(&p.text));
        }
        let buckets: HashSet<u32> = all.iter().map(|w| lm_token(w, cfg.lm_vocab_size)).collect();
        assert_eq!(buckets.len(), all.len());
    }

    #[test]
    fn keyword_teacher_reproduces_grades() {
        let data = generate(&SyntheticConfig::default()).unwrap();
        let teacher = KeywordTeacher::new(&data.keywords);
        for split in std::iter::once(&data.eval).chain(&data.train[..2]) {
            for q in &split.queries {
                for p in &split.passages {
                    assert_eq!(teacher.score(&q.text, &p.text) as u32, split.qrels.grade(&q.id, &p.id));
                }
            }
        }
    }

    #[test]
    fn rejects_impossible_configs() {
        let cfg = SyntheticConfig {
            keyword_pool: 10,
            ..SyntheticConfig::default()
        };
        assert!(generate(&cfg).is_err());
    }
}
