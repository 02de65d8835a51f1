//! Six-column retrieval run files: `qid Q0 passage_id rank score tag`.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, PathContext, Result};

/// Ranked passages per query, best first.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Run {
    pub tag: String,
    pub lists: BTreeMap<String, Vec<(String, f64)>>,
}

impl Run {
    pub fn new(tag: impl Into<String>) -> Self {
        Self {
            tag: tag.into(),
            lists: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, qid: impl Into<String>, ranking: Vec<(String, f64)>) {
        self.lists.insert(qid.into(), ranking);
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (qid, list) in &self.lists {
            for (i, (pid, score)) in list.iter().enumerate() {
                out.push_str(&format!("{qid} Q0 {pid} {} {score} {}\n", i + 1, self.tag));
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).at(path)?;
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rows: BTreeMap<String, Vec<(usize, String, f64)>> = BTreeMap::new();
        let mut tag = String::new();
        for (n, line) in text.lines().enumerate() {
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.is_empty() {
                continue;
            }
            let bad = |m: &str| Error::format("run", format!("line {}: {m}", n + 1));
            if cols.len() != 6 {
                return Err(bad("expected six columns"));
            }
            let rank: usize = cols[3].parse().map_err(|_| bad("rank is not an integer"))?;
            let score: f64 = cols[4].parse().map_err(|_| bad("score is not a number"))?;
            tag = cols[5].to_string();
            rows.entry(cols[0].to_string())
                .or_default()
                .push((rank, cols[2].to_string(), score));
        }
        let mut run = Run::new(tag);
        for (qid, mut v) in rows {
            v.sort_by_key(|r| r.0);
            run.insert(qid, v.into_iter().map(|(_, p, s)| (p, s)).collect());
        }
        Ok(run)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).at(path)?)
    }
}
