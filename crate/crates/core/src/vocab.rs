//! Token vocabulary shared by the index and the sequence model.
//!
//! Content tokens occupy ids `0..k`; the seven special tokens follow at
//! `k..k + 7`. Content tokens are looked up by string, special tokens only
//! through [`Specials`], so a corpus word spelled `<eos>` never aliases the
//! real end-of-sequence token.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::CorpusStore;
use crate::error::{Error, PathContext, Result};

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Granularity {
    /// One token per Unicode scalar value.
    #[default]
    Char,
    /// One token per whitespace-separated word; decoding joins with a single space.
    Word,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabConfig {
    pub granularity: Granularity,
    /// Tokens seen fewer times than this map to UNK.
    pub min_count: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            granularity: Granularity::Char,
            min_count: 1,
        }
    }
}

pub const SPECIAL_NAMES: [&str; 7] = [
    "<bos>", "<eos>", "<sep>", "<unk>", "<title>", "<substr>", "<pseudoq>",
];

/// Ids of the special tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Specials {
    pub bos: TokenId,
    pub eos: TokenId,
    pub sep: TokenId,
    pub unk: TokenId,
    pub title: TokenId,
    pub substr: TokenId,
    pub pseudoq: TokenId,
}

impl Specials {
    fn starting_at(base: TokenId) -> Self {
        Self {
            bos: base,
            eos: base + 1,
            sep: base + 2,
            unk: base + 3,
            title: base + 4,
            substr: base + 5,
            pseudoq: base + 6,
        }
    }

    pub fn is_marker(&self, t: TokenId) -> bool {
        t == self.title || t == self.substr || t == self.pseudoq
    }
}

#[derive(Debug, Clone)]
pub struct Vocab {
    granularity: Granularity,
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    specials: Specials,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    granularity: Granularity,
    tokens: Vec<String>,
}

impl Vocab {
    /// Builds a vocabulary from explicit content tokens (deduplicated, order kept).
    pub fn from_tokens<I, S>(granularity: Granularity, content: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens = Vec::new();
        let mut index = HashMap::new();
        for tok in content {
            let tok = tok.into();
            if !index.contains_key(&tok) {
                index.insert(tok.clone(), tokens.len() as TokenId);
                tokens.push(tok);
            }
        }
        let specials = Specials::starting_at(tokens.len() as TokenId);
        tokens.extend(SPECIAL_NAMES.iter().map(|s| s.to_string()));
        Self {
            granularity,
            tokens,
            index,
            specials,
        }
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn specials(&self) -> &Specials {
        &self.specials
    }

    /// Total number of token ids, special tokens included.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn content_len(&self) -> usize {
        self.specials.bos as usize
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn split(granularity: Granularity, text: &str) -> Vec<String> {
        match granularity {
            Granularity::Char => text.chars().map(String::from).collect(),
            Granularity::Word => text.split_whitespace().map(String::from).collect(),
        }
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        let unk = self.specials.unk;
        match self.granularity {
            Granularity::Char => {
                let mut buf = [0u8; 4];
                text.chars()
                    .map(|c| self.id(c.encode_utf8(&mut buf)).unwrap_or(unk))
                    .collect()
            }
            Granularity::Word => text
                .split_whitespace()
                .map(|w| self.id(w).unwrap_or(unk))
                .collect(),
        }
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        let parts = ids.iter().map(|&id| self.token(id).unwrap_or("<?>"));
        match self.granularity {
            Granularity::Char => parts.collect(),
            Granularity::Word => parts.collect::<Vec<_>>().join(" "),
        }
    }

    /// Stable 64-bit fingerprint used to tie index and checkpoint files to a vocabulary.
    pub fn hash(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(match self.granularity {
            Granularity::Char => b"char",
            Granularity::Word => b"word",
        });
        for t in &self.tokens {
            h.update((t.len() as u64).to_le_bytes());
            h.update(t.as_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabFile {
            granularity: self.granularity,
            tokens: self.tokens[..self.content_len()].to_vec(),
        };
        let json = serde_json::to_string_pretty(&file)
            .map_err(|e| Error::format("vocabulary", e.to_string()))?;
        std::fs::write(path, json).at(path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path).at(path)?;
        let file: VocabFile =
            serde_json::from_str(&raw).map_err(|e| Error::format("vocabulary", e.to_string()))?;
        Ok(Self::from_tokens(file.granularity, file.tokens))
    }
}

/// Collects every token of the corpus and of `extra_texts` (query-side text).
///
/// Content tokens are ordered by first appearance in a lexicographic sort so
/// the result does not depend on corpus order.
pub fn build_vocab<'a, I>(store: &CorpusStore, extra_texts: I, cfg: &VocabConfig) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a str>,
{
    if store.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut add = |text: &str| {
        for tok in Vocab::split(cfg.granularity, text) {
            *counts.entry(tok).or_default() += 1;
        }
    };
    for p in store.passages() {
        add(&p.title);
        add(&p.body);
        for q in &p.pseudo_queries {
            add(q);
        }
    }
    for t in extra_texts {
        add(t);
    }
    let min = cfg.min_count.max(1);
    Ok(Vocab::from_tokens(
        cfg.granularity,
        counts.into_iter().filter(|(_, c)| *c >= min).map(|(t, _)| t),
    ))
}
