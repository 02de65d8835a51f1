//! Passages, query/qrels files, multiview identifiers and training samples.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, PathContext, Result};
use crate::vocab::{TokenId, Vocab};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub id: String,
    pub title: String,
    #[serde(rename = "text")]
    pub body: String,
    #[serde(default)]
    pub pseudo_queries: Vec<String>,
}

impl Passage {
    pub fn new(id: impl Into<String>, title: impl Into<String>, body: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            title: title.into(),
            body: body.into(),
            pseudo_queries: Vec::new(),
        }
    }

    pub fn with_pseudo_queries<I, S>(mut self, qs: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.pseudo_queries = qs.into_iter().map(Into::into).collect();
        self
    }
}

#[derive(Debug, Clone, Default)]
pub struct CorpusStore {
    passages: Vec<Passage>,
    by_id: HashMap<String, usize>,
}

impl CorpusStore {
    pub fn new(passages: Vec<Passage>) -> Result<Self> {
        let mut by_id = HashMap::with_capacity(passages.len());
        for (i, p) in passages.iter().enumerate() {
            if p.body.is_empty() {
                return Err(Error::EmptyBody(p.id.clone()));
            }
            if by_id.insert(p.id.clone(), i).is_some() {
                return Err(Error::DuplicateId(p.id.clone()));
            }
        }
        Ok(Self { passages, by_id })
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn get(&self, ordinal: usize) -> Option<&Passage> {
        self.passages.get(ordinal)
    }

    pub fn lookup(&self, id: &str) -> Option<&Passage> {
        self.by_id.get(id).map(|&i| &self.passages[i])
    }

    pub fn ordinal(&self, id: &str) -> Option<usize> {
        self.by_id.get(id).copied()
    }
}

/// Reads a corpus file with one JSON record per line. Blank lines are skipped.
pub fn load_corpus(path: &Path) -> Result<CorpusStore> {
    let reader = BufReader::new(File::open(path).at(path)?);
    let mut passages = Vec::new();
    let mut seen = BTreeSet::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Passage = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg: e.to_string(),
        })?;
        if !seen.insert(p.id.clone()) {
            return Err(Error::DuplicateId(p.id));
        }
        passages.push(p);
    }
    CorpusStore::new(passages)
}

pub fn write_corpus(path: &Path, store: &CorpusStore) -> Result<()> {
    let mut out = String::new();
    for p in store.passages() {
        out.push_str(&serde_json::to_string(p).map_err(|e| Error::format("corpus", e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out).at(path)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub qid: String,
    pub text: String,
}

/// Reads `qid<TAB>query text` lines.
pub fn load_queries(path: &Path) -> Result<Vec<Query>> {
    let raw = std::fs::read_to_string(path).at(path)?;
    let mut out = Vec::new();
    for (n, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (qid, text) = line.split_once('\t').ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg: "expected `qid<TAB>text`".into(),
        })?;
        out.push(Query {
            qid: qid.to_string(),
            text: text.to_string(),
        });
    }
    Ok(out)
}

pub fn write_queries(path: &Path, queries: &[Query]) -> Result<()> {
    let mut out = String::new();
    for q in queries {
        out.push_str(&format!("{}\t{}\n", q.qid, q.text));
    }
    std::fs::write(path, out).at(path)?;
    Ok(())
}

/// Relevance judgments: qid → passage id → relevance grade.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, i32>>,
}

impl Qrels {
    pub fn insert(&mut self, qid: impl Into<String>, pid: impl Into<String>, rel: i32) {
        self.judgments
            .entry(qid.into())
            .or_default()
            .insert(pid.into(), rel);
    }

    pub fn contains_query(&self, qid: &str) -> bool {
        self.judgments.contains_key(qid)
    }

    /// Passage ids judged with relevance > 0.
    pub fn positives(&self, qid: &str) -> BTreeSet<&str> {
        self.judgments
            .get(qid)
            .map(|m| {
                m.iter()
                    .filter(|(_, &r)| r > 0)
                    .map(|(p, _)| p.as_str())
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.judgments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.judgments.is_empty()
    }
}

/// Reads whitespace-separated `qid 0 passage_id relevance` lines.
pub fn load_qrels(path: &Path) -> Result<Qrels> {
    let raw = std::fs::read_to_string(path).at(path)?;
    let mut qrels = Qrels::default();
    for (n, line) in raw.lines().enumerate() {
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg: msg.to_string(),
        };
        if cols.len() != 4 {
            return Err(bad("expected `qid 0 passage_id relevance`"));
        }
        let rel: i32 = cols[3].parse().map_err(|_| bad("relevance is not an integer"))?;
        qrels.insert(cols[0], cols[2], rel);
    }
    Ok(qrels)
}

pub fn write_qrels(path: &Path, qrels: &Qrels) -> Result<()> {
    let mut out = String::new();
    for (qid, m) in &qrels.judgments {
        for (pid, rel) in m {
            out.push_str(&format!("{qid} 0 {pid} {rel}\n"));
        }
    }
    std::fs::write(path, out).at(path)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    Title,
    Substring,
    PseudoQuery,
}

impl View {
    pub const ALL: [View; 3] = [View::Title, View::Substring, View::PseudoQuery];

    /// The prefix-marker token announcing this view.
    pub fn marker(self, vocab: &Vocab) -> TokenId {
        let s = vocab.specials();
        match self {
            View::Title => s.title,
            View::Substring => s.substr,
            View::PseudoQuery => s.pseudoq,
        }
    }

    pub fn from_marker(token: TokenId, vocab: &Vocab) -> Option<View> {
        View::ALL.into_iter().find(|v| v.marker(vocab) == token)
    }

    pub fn name(self) -> &'static str {
        match self {
            View::Title => "title",
            View::Substring => "substring",
            View::PseudoQuery => "pseudoquery",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Identifier {
    pub view: View,
    pub text: String,
    pub tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleConfig {
    /// Substring span length range `[min, max]`, in tokens.
    pub substring_len: (usize, usize),
    /// Identifiers drawn per view for each (query, positive) pair.
    pub samples_per_view: usize,
    /// Use the first sentence of the body when a passage has no pseudo-queries.
    pub pseudo_query_fallback: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            substring_len: (10, 40),
            samples_per_view: 1,
            pseudo_query_fallback: false,
        }
    }
}

/// First sentence of `body`: everything up to and including the first `.`, `?` or `!`.
pub fn first_sentence(body: &str) -> &str {
    match body.find(['.', '?', '!']) {
        Some(i) => body[..=i].trim(),
        None => body.trim(),
    }
}

pub(crate) fn pseudo_queries_of<'a>(p: &'a Passage, cfg: &SampleConfig) -> Vec<&'a str> {
    if p.pseudo_queries.is_empty() && cfg.pseudo_query_fallback {
        let s = first_sentence(&p.body);
        if s.is_empty() {
            vec![]
        } else {
            vec![s]
        }
    } else {
        p.pseudo_queries.iter().map(String::as_str).collect()
    }
}

pub fn extract_identifiers<R: Rng + ?Sized>(
    p: &Passage,
    view: View,
    k: usize,
    rng: &mut R,
    cfg: &SampleConfig,
    vocab: &Vocab,
) -> Result<Vec<Identifier>> {
    if k == 0 {
        return Err(Error::Config("identifier count k must be at least 1".into()));
    }
    let make = |text: String| {
        let tokens = vocab.encode(&text);
        Identifier { view, text, tokens }
    };
    let out = match view {
        View::Title => {
            if p.title.is_empty() {
                vec![]
            } else {
                vec![make(p.title.clone())]
            }
        }
        View::Substring => {
            let body = vocab.encode(&p.body);
            let (lmin, lmax) = cfg.substring_len;
            if body.len() < lmin.max(1) {
                vec![make(p.body.clone())]
            } else {
                let hi = lmax.max(lmin).min(body.len());
                let lo = lmin.max(1).min(hi);
                (0..k)
                    .map(|_| {
                        let len = rng.gen_range(lo..=hi);
                        let start = rng.gen_range(0..=body.len() - len);
                        let span = &body[start..start + len];
                        Identifier {
                            view,
                            text: vocab.decode(span),
                            tokens: span.to_vec(),
                        }
                    })
                    .collect()
            }
        }
        View::PseudoQuery => {
            let pqs = pseudo_queries_of(p, cfg);
            if pqs.len() <= k {
                pqs.into_iter().map(|q| make(q.to_string())).collect()
            } else {
                let mut picks = rand::seq::index::sample(rng, pqs.len(), k).into_vec();
                picks.sort_unstable();
                picks.into_iter().map(|i| make(pqs[i].to_string())).collect()
            }
        }
    };
    Ok(out)
}

/// One teacher-forced training pair: query, view marker, EOS-terminated identifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenSample {
    pub query_tokens: Vec<TokenId>,
    pub view: View,
    pub prefix: TokenId,
    pub target_tokens: Vec<TokenId>,
}

pub fn make_gen_samples<R: Rng + ?Sized>(
    query: &str,
    positive: &Passage,
    rng: &mut R,
    cfg: &SampleConfig,
    vocab: &Vocab,
) -> Result<Vec<GenSample>> {
    let query_tokens = vocab.encode(query);
    let eos = vocab.specials().eos;
    let k = cfg.samples_per_view.max(1);
    let mut samples = Vec::new();
    for view in View::ALL {
        for id in extract_identifiers(positive, view, k, rng, cfg, vocab)? {
            if id.tokens.is_empty() {
                continue;
            }
            let mut target_tokens = id.tokens;
            target_tokens.push(eos);
            samples.push(GenSample {
                query_tokens: query_tokens.clone(),
                view,
                prefix: view.marker(vocab),
                target_tokens,
            });
        }
    }
    samples.shuffle(rng);
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{build_vocab, Granularity, VocabConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn passage() -> Passage {
        Passage::new("p1", "Prime Rate", "the prime rate is the interest rate banks charge")
            .with_pseudo_queries(["what is prime rate"])
    }

    fn vocab_for(p: &Passage) -> Vocab {
        let s = CorpusStore::new(vec![p.clone()]).unwrap();
        build_vocab(&s, [], &VocabConfig::default()).unwrap()
    }

    #[test]
    fn loads_three_records() {
        let f = write_tmp(concat!(
            r#"{"id":"a","title":"A","text":"alpha"}"#,
            "\n",
            r#"{"id":"b","title":"B","text":"beta","pseudo_queries":["bee"]}"#,
            "\n",
            r#"{"id":"c","title":"C","text":"gamma"}"#,
            "\n"
        ));
        let s = load_corpus(f.path()).unwrap();
        assert_eq!(s.len(), 3);
        let b = s.lookup("b").unwrap();
        assert_eq!(b.pseudo_queries, vec!["bee"]);
    }

    #[test]
    fn duplicate_id_is_named() {
        let f = write_tmp(concat!(
            r#"{"id":"a","title":"A","text":"x"}"#,
            "\n",
            r#"{"id":"a","title":"A2","text":"y"}"#,
            "\n"
        ));
        match load_corpus(f.path()) {
            Err(Error::DuplicateId(id)) => assert_eq!(id, "a"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn parse_error_reports_line() {
        let f = write_tmp("{\"id\":\"a\",\"title\":\"A\",\"text\":\"x\"}\nnot json\n");
        match load_corpus(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_file_gives_empty_store() {
        let f = write_tmp("");
        assert!(load_corpus(f.path()).unwrap().is_empty());
    }

    #[test]
    fn queries_and_qrels_parse() {
        let q = write_tmp("q1\twhat is rate\nq2\tbanana\n");
        let qs = load_queries(q.path()).unwrap();
        assert_eq!(qs[1].text, "banana");
        let r = write_tmp("q1 0 p1 1\nq1 0 p2 0\nq2 0 p3 2\n");
        let qrels = load_qrels(r.path()).unwrap();
        assert_eq!(qrels.positives("q1").into_iter().collect::<Vec<_>>(), vec!["p1"]);
        assert_eq!(qrels.positives("q2").len(), 1);
        assert!(qrels.positives("q9").is_empty());
    }

    #[test]
    fn title_view_ignores_k() {
        let p = passage();
        let v = vocab_for(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ids =
            extract_identifiers(&p, View::Title, 5, &mut rng, &SampleConfig::default(), &v).unwrap();
        assert_eq!(ids.len(), 1);
        assert_eq!(ids[0].text, "Prime Rate");
        assert_eq!(ids[0].view, View::Title);
    }

    #[test]
    fn short_body_substring_is_whole_body() {
        let p = Passage::new("x", "t", "abcde");
        let v = vocab_for(&p);
        let cfg = SampleConfig {
            substring_len: (8, 20),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ids = extract_identifiers(&p, View::Substring, 3, &mut rng, &cfg, &v).unwrap();
        assert_eq!(ids.len(), 1);
        assert_eq!(ids[0].text, "abcde");
    }

    #[test]
    fn pseudo_query_view_takes_min_of_k_and_available() {
        let p = passage().with_pseudo_queries(["one", "two"]);
        let v = vocab_for(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = SampleConfig::default();
        let ids = extract_identifiers(&p, View::PseudoQuery, 5, &mut rng, &cfg, &v).unwrap();
        assert_eq!(ids.len(), 2);
        let one = extract_identifiers(&p, View::PseudoQuery, 1, &mut rng, &cfg, &v).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn fallback_pseudo_query_is_first_sentence() {
        let p = Passage::new("x", "t", "First bit. Second bit.");
        let v = vocab_for(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = SampleConfig {
            pseudo_query_fallback: true,
            ..Default::default()
        };
        let ids = extract_identifiers(&p, View::PseudoQuery, 2, &mut rng, &cfg, &v).unwrap();
        assert_eq!(ids[0].text, "First bit.");
    }

    #[test]
    fn zero_k_rejected() {
        let p = passage();
        let v = vocab_for(&p);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(
            extract_identifiers(&p, View::Title, 0, &mut rng, &SampleConfig::default(), &v)
                .is_err()
        );
    }

    #[test]
    fn gen_samples_cover_views() {
        let p = passage();
        let v = vocab_for(&p);
        let cfg = SampleConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = make_gen_samples("prime rate?", &p, &mut rng, &cfg, &v).unwrap();
        assert_eq!(s.len(), 3);
        let prefixes: BTreeSet<_> = s.iter().map(|x| x.prefix).collect();
        assert_eq!(prefixes.len(), 3);
        for x in &s {
            assert_eq!(*x.target_tokens.last().unwrap(), v.specials().eos);
            assert_eq!(x.prefix, x.view.marker(&v));
        }

        let no_pq = Passage::new("y", "Prime Rate", p.body.clone());
        let s2 = make_gen_samples("q", &no_pq, &mut rng, &cfg, &v).unwrap();
        assert_eq!(s2.len(), 2);
    }

    #[test]
    fn gen_samples_deterministic_per_seed() {
        let p = passage();
        let v = vocab_for(&p);
        let cfg = SampleConfig::default();
        let a = make_gen_samples("q", &p, &mut ChaCha8Rng::seed_from_u64(9), &cfg, &v).unwrap();
        let b = make_gen_samples("q", &p, &mut ChaCha8Rng::seed_from_u64(9), &cfg, &v).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn word_mode_substrings_are_contained() {
        let p = passage();
        let s = CorpusStore::new(vec![p.clone()]).unwrap();
        let cfg_v = VocabConfig {
            granularity: Granularity::Word,
            min_count: 1,
        };
        let v = build_vocab(&s, [], &cfg_v).unwrap();
        let cfg = SampleConfig {
            substring_len: (2, 4),
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for id in extract_identifiers(&p, View::Substring, 20, &mut rng, &cfg, &v).unwrap() {
            assert!(p.body.contains(&id.text), "{:?}", id.text);
            assert!((2..=4).contains(&id.tokens.len()));
        }
    }
}
