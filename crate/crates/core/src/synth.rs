//! Synthetic word-level benchmark: keyword passages with paraphrased queries.
//!
//! Every passage owns a handful of keywords drawn from a shared pool, so
//! keywords recur across passages and a query must combine several of them
//! to single out its passage. Train and held-out queries target the same
//! passages with independent keyword draws.

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{write_corpus, write_qrels, write_queries, CorpusStore, Passage, Qrels, Query};
use crate::error::{Error, Result};

const ONSETS: [&str; 14] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const NUCLEI: [&str; 5] = ["a", "e", "i", "o", "u"];
const FILLERS: [&str; 24] = [
    "the", "of", "and", "in", "to", "is", "was", "for", "on", "by", "with", "as", "at", "from", "that", "which", "its",
    "an", "are", "were", "has", "this", "also", "near",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub passages: usize,
    pub train_queries: usize,
    pub heldout_queries: usize,
    pub pool_size: usize,
    pub keywords_per_passage: usize,
    pub title_words: usize,
    pub body_words: usize,
    pub pseudo_queries: usize,
    pub query_keywords: usize,
    /// Off-topic pool words mixed into each query.
    pub query_noise: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            passages: 200,
            train_queries: 100,
            heldout_queries: 100,
            pool_size: 400,
            keywords_per_passage: 8,
            title_words: 2,
            body_words: 24,
            pseudo_queries: 2,
            query_keywords: 3,
            query_noise: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthBenchmark {
    pub store: CorpusStore,
    pub train: Vec<Query>,
    pub train_qrels: Qrels,
    pub heldout: Vec<Query>,
    pub heldout_qrels: Qrels,
}

/// Deterministic pool of distinct two- and three-syllable words.
pub fn word_pool(n: usize, rng: &mut impl Rng) -> Vec<String> {
    let syl: Vec<String> = ONSETS
        .iter()
        .flat_map(|o| NUCLEI.iter().map(move |v| format!("{o}{v}")))
        .collect();
    let mut words = BTreeSet::new();
    while words.len() < n {
        let k = if rng.gen_bool(0.5) { 2 } else { 3 };
        let w: String = (0..k).map(|_| syl[rng.gen_range(0..syl.len())].as_str()).collect();
        words.insert(w);
    }
    let mut v: Vec<String> = words.into_iter().collect();
    v.shuffle(rng);
    v
}

fn query_text(keywords: &[String], pool: &[String], cfg: &SynthConfig, rng: &mut impl Rng) -> String {
    let mut words: Vec<&str> = keywords
        .choose_multiple(rng, cfg.query_keywords.min(keywords.len()))
        .map(String::as_str)
        .collect();
    for _ in 0..cfg.query_noise {
        words.push(pool[rng.gen_range(0..pool.len())].as_str());
    }
    words.shuffle(rng);
    words.join(" ")
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthBenchmark> {
    if cfg.passages == 0 || cfg.keywords_per_passage < cfg.title_words.max(1) {
        return Err(Error::Config("synthetic corpus needs passages and enough keywords for a title".into()));
    }
    if cfg.pool_size < cfg.keywords_per_passage {
        return Err(Error::Config("word pool smaller than keywords per passage".into()));
    }
    if cfg.train_queries > cfg.passages || cfg.heldout_queries > cfg.passages {
        return Err(Error::Config("more queries than passages".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let pool = word_pool(cfg.pool_size, &mut rng);

    let mut titles = BTreeSet::new();
    let mut keywords: Vec<Vec<String>> = Vec::with_capacity(cfg.passages);
    let mut passages = Vec::with_capacity(cfg.passages);
    for i in 0..cfg.passages {
        let kw: Vec<String> = loop {
            let kw: Vec<String> = pool
                .choose_multiple(&mut rng, cfg.keywords_per_passage)
                .cloned()
                .collect();
            if titles.insert(kw[..cfg.title_words].join(" ")) {
                break kw;
            }
        };
        let title = kw[..cfg.title_words].join(" ");
        let mut body: Vec<&str> = kw.iter().map(String::as_str).collect();
        while body.len() < cfg.body_words {
            body.push(FILLERS[rng.gen_range(0..FILLERS.len())]);
        }
        body[cfg.title_words.min(1)..].shuffle(&mut rng);
        let pq: Vec<String> = (0..cfg.pseudo_queries)
            .map(|_| query_text(&kw, &pool, &SynthConfig { query_noise: 0, ..cfg.clone() }, &mut rng))
            .collect();
        passages.push(Passage::new(format!("p{i:04}"), title, body.join(" ")).with_pseudo_queries(pq));
        keywords.push(kw);
    }

    let mut make = |prefix: &str, n: usize| {
        let mut qs = Vec::with_capacity(n);
        let mut qrels = Qrels::default();
        for (i, kw) in keywords.iter().enumerate().take(n) {
            let qid = format!("{prefix}{i:04}");
            qs.push(Query {
                qid: qid.clone(),
                text: query_text(kw, &pool, cfg, &mut rng),
            });
            qrels.insert(qid, format!("p{i:04}"), 1);
        }
        (qs, qrels)
    };
    let (train, train_qrels) = make("t", cfg.train_queries);
    let (heldout, heldout_qrels) = make("h", cfg.heldout_queries);
    Ok(SynthBenchmark {
        store: CorpusStore::new(passages)?,
        train,
        train_qrels,
        heldout,
        heldout_qrels,
    })
}

impl SynthBenchmark {
    /// Writes `corpus.jsonl`, `train.tsv`, `train.qrels`, `heldout.tsv`, `heldout.qrels`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_corpus(&dir.join("corpus.jsonl"), &self.store)?;
        write_queries(&dir.join("train.tsv"), &self.train)?;
        write_qrels(&dir.join("train.qrels"), &self.train_qrels)?;
        write_queries(&dir.join("heldout.tsv"), &self.heldout)?;
        write_qrels(&dir.join("heldout.qrels"), &self.heldout_qrels)?;
        Ok(())
    }
}
