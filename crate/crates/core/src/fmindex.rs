//! FM-index over the identifier text of a corpus.
//!
//! Every passage contributes one unit per title, body and pseudo-query. A unit
//! is laid out as `marker tokens.. SEP`, where `marker` is the view's prefix
//! token. The index is built over the *reversed* text, so backward search
//! consumes a pattern left to right and the symbols of the BWT inside a
//! pattern's interval are exactly the tokens that can follow it.

use std::collections::BTreeSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::corpus::{pseudo_queries_of, CorpusStore, SampleConfig, View};
use crate::error::{Error, PathContext, Result};
use crate::vocab::{TokenId, Vocab};

const MAGIC: &[u8; 8] = b"GRFMIDX\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IndexConfig {
    /// Every `sa_sample_rate`-th text position keeps its suffix-array entry.
    pub sa_sample_rate: usize,
}

impl Default for IndexConfig {
    fn default() -> Self {
        Self { sa_sample_rate: 32 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UnitEntry {
    pub passage: u32,
    pub view: View,
}

/// The concatenated unit text plus its unit table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexedText {
    pub tokens: Vec<TokenId>,
    pub units: Vec<UnitEntry>,
    /// Offset of each unit's marker token in `tokens`.
    pub unit_starts: Vec<u32>,
    pub passage_ids: Vec<String>,
}

impl IndexedText {
    pub fn from_store(store: &CorpusStore, vocab: &Vocab, sample_cfg: &SampleConfig) -> Self {
        let sep = vocab.specials().sep;
        let mut text = IndexedText {
            tokens: Vec::new(),
            units: Vec::new(),
            unit_starts: Vec::new(),
            passage_ids: store.passages().iter().map(|p| p.id.clone()).collect(),
        };
        for (ord, p) in store.passages().iter().enumerate() {
            let mut push = |view: View, body: &str| {
                text.unit_starts.push(text.tokens.len() as u32);
                text.units.push(UnitEntry {
                    passage: ord as u32,
                    view,
                });
                text.tokens.push(view.marker(vocab));
                text.tokens.extend(vocab.encode(body).into_iter().filter(|&t| t != sep));
                text.tokens.push(sep);
            };
            if !p.title.is_empty() {
                push(View::Title, &p.title);
            }
            push(View::Substring, &p.body);
            for q in pseudo_queries_of(p, sample_cfg) {
                push(View::PseudoQuery, q);
            }
        }
        text
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Unit ordinal containing text position `pos`.
    pub fn unit_at(&self, pos: usize) -> usize {
        unit_at(&self.unit_starts, pos)
    }

    /// End (exclusive) of unit `u`, SEP included.
    pub fn unit_end(&self, u: usize) -> usize {
        unit_end(&self.unit_starts, self.tokens.len(), u)
    }
}

fn unit_at(starts: &[u32], pos: usize) -> usize {
    starts.partition_point(|&s| s as usize <= pos) - 1
}

fn unit_end(starts: &[u32], n: usize, u: usize) -> usize {
    starts.get(u + 1).map_or(n, |&s| s as usize)
}

/// Half-open range of BWT rows whose suffixes start with a pattern.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interval {
    pub lo: usize,
    pub hi: usize,
}

impl Interval {
    pub fn is_empty(&self) -> bool {
        self.hi <= self.lo
    }

    pub fn len(&self) -> usize {
        self.hi.saturating_sub(self.lo)
    }
}

/// A located unit: which passage and under which view.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Hit {
    pub passage_id: String,
    pub view: View,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FmIndex {
    /// Text length (tokens), sentinel excluded.
    n: usize,
    /// Internal alphabet size: vocabulary size + 1 (symbol 0 is the sentinel).
    sigma: usize,
    /// BWT of `reverse(text) ++ [sentinel]`, internal symbols.
    bwt: Vec<u32>,
    /// `c[s]` = number of internal symbols smaller than `s`; length `sigma + 1`.
    c: Vec<u64>,
    occ_step: usize,
    /// Row-major `(rows / occ_step + 1) × sigma` checkpoint counts.
    occ: Vec<u32>,
    sample_rate: usize,
    sampled_bits: Vec<u64>,
    sampled_rank: Vec<u32>,
    sa_samples: Vec<u32>,
    units: Vec<UnitEntry>,
    unit_starts: Vec<u32>,
    passage_ids: Vec<String>,
    vocab_hash: u64,
}

pub fn build_index(
    store: &CorpusStore,
    vocab: &Vocab,
    sample_cfg: &SampleConfig,
    cfg: &IndexConfig,
) -> Result<FmIndex> {
    if store.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let text = IndexedText::from_store(store, vocab, sample_cfg);
    FmIndex::from_text(&text, vocab.len(), vocab.hash(), cfg)
}

/// Suffix array by prefix doubling; `s` must end with a unique smallest symbol.
pub fn suffix_array(s: &[u32]) -> Vec<u32> {
    let n = s.len();
    let mut sa: Vec<u32> = (0..n as u32).collect();
    let mut rank: Vec<u64> = s.iter().map(|&x| x as u64).collect();
    let mut tmp = vec![0u64; n];
    let mut k = 1usize;
    loop {
        let key = |i: u32| {
            let i = i as usize;
            let second = if i + k < n { rank[i + k] + 1 } else { 0 };
            (rank[i], second)
        };
        sa.sort_unstable_by_key(|&i| key(i));
        tmp[sa[0] as usize] = 0;
        for w in 1..n {
            let bump = (key(sa[w - 1]) != key(sa[w])) as u64;
            tmp[sa[w] as usize] = tmp[sa[w - 1] as usize] + bump;
        }
        std::mem::swap(&mut rank, &mut tmp);
        if n == 0 || rank[sa[n - 1] as usize] as usize == n - 1 {
            break;
        }
        k *= 2;
    }
    sa
}

impl FmIndex {
    pub fn from_text(
        text: &IndexedText,
        vocab_size: usize,
        vocab_hash: u64,
        cfg: &IndexConfig,
    ) -> Result<Self> {
        if text.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        if cfg.sa_sample_rate == 0 {
            return Err(Error::Config("sa_sample_rate must be at least 1".into()));
        }
        let n = text.tokens.len();
        let sigma = vocab_size + 1;
        let mut rev: Vec<u32> = Vec::with_capacity(n + 1);
        for &t in text.tokens.iter().rev() {
            if t as usize >= vocab_size {
                return Err(Error::OutOfVocab {
                    token: t,
                    size: vocab_size,
                });
            }
            rev.push(t + 1);
        }
        rev.push(0);
        let sa = suffix_array(&rev);
        let rows = n + 1;
        let bwt: Vec<u32> = sa
            .iter()
            .map(|&p| if p == 0 { rev[n] } else { rev[p as usize - 1] })
            .collect();

        let mut counts = vec![0u64; sigma];
        for &s in &bwt {
            counts[s as usize] += 1;
        }
        let mut c = vec![0u64; sigma + 1];
        for s in 0..sigma {
            c[s + 1] = c[s] + counts[s];
        }

        let occ_step = sigma.next_power_of_two().clamp(64, 4096);
        let blocks = rows / occ_step + 1;
        let mut occ = vec![0u32; blocks * sigma];
        let mut running = vec![0u32; sigma];
        for (i, &s) in bwt.iter().enumerate() {
            if i % occ_step == 0 {
                let b = i / occ_step;
                occ[b * sigma..(b + 1) * sigma].copy_from_slice(&running);
            }
            running[s as usize] += 1;
        }
        if rows % occ_step == 0 {
            let b = rows / occ_step;
            occ[b * sigma..(b + 1) * sigma].copy_from_slice(&running);
        }

        let rate = cfg.sa_sample_rate;
        let mut sampled_bits = vec![0u64; rows.div_ceil(64)];
        let mut sa_samples = Vec::new();
        for (row, &p) in sa.iter().enumerate() {
            if p as usize % rate == 0 {
                sampled_bits[row / 64] |= 1 << (row % 64);
                sa_samples.push(p);
            }
        }
        let mut sampled_rank = Vec::with_capacity(sampled_bits.len());
        let mut acc = 0u32;
        for w in &sampled_bits {
            sampled_rank.push(acc);
            acc += w.count_ones();
        }

        Ok(Self {
            n,
            sigma,
            bwt,
            c,
            occ_step,
            occ,
            sample_rate: rate,
            sampled_bits,
            sampled_rank,
            sa_samples,
            units: text.units.clone(),
            unit_starts: text.unit_starts.clone(),
            passage_ids: text.passage_ids.clone(),
            vocab_hash,
        })
    }

    /// Number of tokens in the indexed text.
    pub fn text_len(&self) -> usize {
        self.n
    }

    pub fn vocab_size(&self) -> usize {
        self.sigma - 1
    }

    pub fn vocab_hash(&self) -> u64 {
        self.vocab_hash
    }

    pub fn passage_ids(&self) -> &[String] {
        &self.passage_ids
    }

    pub fn units(&self) -> &[UnitEntry] {
        &self.units
    }

    /// Occurrences of internal symbol `s` in `bwt[..i]`.
    fn occ(&self, s: usize, i: usize) -> usize {
        let b = i / self.occ_step;
        let base = self.occ[b * self.sigma + s] as usize;
        base + self.bwt[b * self.occ_step..i]
            .iter()
            .filter(|&&x| x as usize == s)
            .count()
    }

    fn lf(&self, row: usize) -> usize {
        let s = self.bwt[row] as usize;
        self.c[s] as usize + self.occ(s, row)
    }

    /// Interval of the empty pattern (all rows, sentinel row included).
    pub fn full_interval(&self) -> Interval {
        Interval {
            lo: 0,
            hi: self.n + 1,
        }
    }

    /// Narrows `iv` (interval of some pattern `P`) to the interval of `P · token`.
    pub fn extend(&self, iv: Interval, token: TokenId) -> Interval {
        let s = token as usize + 1;
        if s >= self.sigma || iv.is_empty() {
            return Interval { lo: 0, hi: 0 };
        }
        let base = self.c[s] as usize;
        Interval {
            lo: base + self.occ(s, iv.lo),
            hi: base + self.occ(s, iv.hi),
        }
    }

    pub fn interval(&self, pattern: &[TokenId]) -> Interval {
        let mut iv = self.full_interval();
        for &t in pattern {
            iv = self.extend(iv, t);
            if iv.is_empty() {
                break;
            }
        }
        iv
    }

    /// Occurrences of `pattern`; the empty pattern occurs `text_len()` times.
    pub fn count(&self, pattern: &[TokenId]) -> usize {
        if pattern.is_empty() {
            return self.n;
        }
        self.interval(pattern).len()
    }

    /// Tokens that follow some occurrence of the pattern behind `iv`, with counts,
    /// in ascending token order.
    pub fn successors_of(&self, iv: Interval) -> Vec<(TokenId, usize)> {
        if iv.is_empty() {
            return Vec::new();
        }
        if iv.len() <= 2 * self.sigma {
            let mut tally: Vec<(u32, usize)> = Vec::new();
            let mut seen: std::collections::HashMap<u32, usize> = std::collections::HashMap::new();
            for &s in &self.bwt[iv.lo..iv.hi] {
                if s == 0 {
                    continue;
                }
                match seen.get(&s) {
                    Some(&slot) => tally[slot].1 += 1,
                    None => {
                        seen.insert(s, tally.len());
                        tally.push((s, 1));
                    }
                }
            }
            tally.sort_unstable();
            tally.into_iter().map(|(s, c)| (s - 1, c)).collect()
        } else {
            (1..self.sigma)
                .filter_map(|s| {
                    let c = self.occ(s, iv.hi) - self.occ(s, iv.lo);
                    (c > 0).then_some((s as TokenId - 1, c))
                })
                .collect()
        }
    }

    pub fn successors(&self, prefix: &[TokenId]) -> Vec<(TokenId, usize)> {
        self.successors_of(self.interval(prefix))
    }

    /// Suffix-array value (position in the reversed text) of BWT row `row`.
    fn sa_value(&self, mut row: usize) -> usize {
        let mut steps = 0;
        loop {
            let (w, b) = (row / 64, row % 64);
            let word = self.sampled_bits[w];
            if word >> b & 1 == 1 {
                let rank = self.sampled_rank[w] as usize + (word & ((1u64 << b) - 1)).count_ones() as usize;
                return self.sa_samples[rank] as usize + steps;
            }
            row = self.lf(row);
            steps += 1;
        }
    }

    /// Start positions (in the forward text) of every occurrence of `pattern`, ascending.
    pub fn occurrences(&self, pattern: &[TokenId]) -> Vec<usize> {
        if pattern.is_empty() {
            return (0..self.n).collect();
        }
        let iv = self.interval(pattern);
        let k = pattern.len();
        let mut out: Vec<usize> = (iv.lo..iv.hi)
            .map(|row| self.n - self.sa_value(row) - k)
            .collect();
        out.sort_unstable();
        out
    }

    /// Units fully containing at least one occurrence of `pattern`, as unit ordinals.
    pub fn locate_units(&self, pattern: &[TokenId]) -> Vec<usize> {
        let k = pattern.len();
        let mut units = BTreeSet::new();
        for start in self.occurrences(pattern) {
            let u = unit_at(&self.unit_starts, start);
            if start + k <= unit_end(&self.unit_starts, self.n, u) {
                units.insert(u);
            }
        }
        units.into_iter().collect()
    }

    /// `(passage, view)` pairs whose unit contains `pattern`.
    pub fn locate(&self, pattern: &[TokenId]) -> BTreeSet<Hit> {
        self.locate_units(pattern)
            .into_iter()
            .map(|u| {
                let e = self.units[u];
                Hit {
                    passage_id: self.passage_ids[e.passage as usize].clone(),
                    view: e.view,
                }
            })
            .collect()
    }

    /// Passage ordinals whose units contain `pattern`, ascending and deduplicated.
    pub fn locate_passages(&self, pattern: &[TokenId]) -> Vec<u32> {
        let mut ps: Vec<u32> = self
            .locate_units(pattern)
            .into_iter()
            .map(|u| self.units[u].passage)
            .collect();
        ps.dedup();
        ps
    }

    /// Recovers the forward text by walking LF from the sentinel row.
    pub fn reconstruct_text(&self) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(self.n);
        let mut row = 0;
        for _ in 0..self.n {
            out.push(self.bwt[row] - 1);
            row = self.lf(row);
        }
        out
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&self.vocab_hash.to_le_bytes())?;
        for v in [self.n, self.sigma, self.occ_step, self.sample_rate] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        write_u32s(w, b"BWT ", &self.bwt)?;
        write_u32s(w, b"OCC ", &self.occ)?;
        let c: Vec<u8> = self.c.iter().flat_map(|v| v.to_le_bytes()).collect();
        write_section(w, b"CCNT", &c)?;
        let bits: Vec<u8> = self.sampled_bits.iter().flat_map(|v| v.to_le_bytes()).collect();
        write_section(w, b"SMPB", &bits)?;
        write_u32s(w, b"SMPV", &self.sa_samples)?;
        let mut units = Vec::with_capacity(self.units.len() * 9);
        for (e, s) in self.units.iter().zip(&self.unit_starts) {
            units.extend_from_slice(&e.passage.to_le_bytes());
            units.push(view_code(e.view));
            units.extend_from_slice(&s.to_le_bytes());
        }
        write_section(w, b"UNIT", &units)?;
        let mut ids = Vec::new();
        for id in &self.passage_ids {
            ids.extend_from_slice(&(id.len() as u32).to_le_bytes());
            ids.extend_from_slice(id.as_bytes());
        }
        write_section(w, b"PIDS", &ids)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(r: &mut R, vocab: &Vocab) -> Result<Self> {
        let bad = |m: &str| Error::format("index", m);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let hash = read_u64(r)?;
        if hash != vocab.hash() {
            return Err(Error::VocabMismatch {
                expected: vocab.hash(),
                found: hash,
            });
        }
        let n = read_u64(r)? as usize;
        let sigma = read_u64(r)? as usize;
        let occ_step = read_u64(r)? as usize;
        let sample_rate = read_u64(r)? as usize;
        if sigma != vocab.len() + 1 {
            return Err(bad("alphabet size does not match vocabulary"));
        }
        let bwt = bytes_to_u32s(&read_section(r, b"BWT ")?);
        let occ = bytes_to_u32s(&read_section(r, b"OCC ")?);
        let c: Vec<u64> = read_section(r, b"CCNT")?
            .chunks_exact(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let sampled_bits: Vec<u64> = read_section(r, b"SMPB")?
            .chunks_exact(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let sa_samples = bytes_to_u32s(&read_section(r, b"SMPV")?);
        let raw_units = read_section(r, b"UNIT")?;
        if raw_units.len() % 9 != 0 {
            return Err(bad("unit table length"));
        }
        let mut units = Vec::new();
        let mut unit_starts = Vec::new();
        for ch in raw_units.chunks_exact(9) {
            units.push(UnitEntry {
                passage: u32::from_le_bytes(ch[0..4].try_into().unwrap()),
                view: view_from_code(ch[4]).ok_or_else(|| bad("unknown view code"))?,
            });
            unit_starts.push(u32::from_le_bytes(ch[5..9].try_into().unwrap()));
        }
        let raw_ids = read_section(r, b"PIDS")?;
        let mut passage_ids = Vec::new();
        let mut at = 0;
        while at < raw_ids.len() {
            let len = u32::from_le_bytes(
                raw_ids
                    .get(at..at + 4)
                    .ok_or_else(|| bad("truncated passage id"))?
                    .try_into()
                    .unwrap(),
            ) as usize;
            let s = raw_ids
                .get(at + 4..at + 4 + len)
                .ok_or_else(|| bad("truncated passage id"))?;
            passage_ids.push(String::from_utf8(s.to_vec()).map_err(|_| bad("passage id is not utf-8"))?);
            at += 4 + len;
        }
        if bwt.len() != n + 1
            || c.len() != sigma + 1
            || occ.len() != ((n + 1) / occ_step.max(1) + 1) * sigma
            || sampled_bits.len() != (n + 1).div_ceil(64)
        {
            return Err(bad("section lengths inconsistent with header"));
        }
        let mut sampled_rank = Vec::with_capacity(sampled_bits.len());
        let mut acc = 0u32;
        for w in &sampled_bits {
            sampled_rank.push(acc);
            acc += w.count_ones();
        }
        if acc as usize != sa_samples.len() {
            return Err(bad("sample count mismatch"));
        }
        Ok(Self {
            n,
            sigma,
            bwt,
            c,
            occ_step,
            occ,
            sample_rate,
            sampled_bits,
            sampled_rank,
            sa_samples,
            units,
            unit_starts,
            passage_ids,
            vocab_hash: hash,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).at(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path, vocab: &Vocab) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path).at(path)?);
        Self::read_from(&mut f, vocab)
    }
}

fn view_code(v: View) -> u8 {
    match v {
        View::Title => 0,
        View::Substring => 1,
        View::PseudoQuery => 2,
    }
}

fn view_from_code(c: u8) -> Option<View> {
    match c {
        0 => Some(View::Title),
        1 => Some(View::Substring),
        2 => Some(View::PseudoQuery),
        _ => None,
    }
}

fn write_section<W: Write>(w: &mut W, tag: &[u8; 4], data: &[u8]) -> Result<()> {
    w.write_all(tag)?;
    w.write_all(&(data.len() as u64).to_le_bytes())?;
    w.write_all(data)?;
    Ok(())
}

fn write_u32s<W: Write>(w: &mut W, tag: &[u8; 4], data: &[u32]) -> Result<()> {
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_section(w, tag, &bytes)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_section<R: Read>(r: &mut R, tag: &[u8; 4]) -> Result<Vec<u8>> {
    let mut t = [0u8; 4];
    r.read_exact(&mut t)?;
    if &t != tag {
        return Err(Error::format(
            "index",
            format!(
                "expected section {:?}, found {:?}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(&t)
            ),
        ));
    }
    let len = read_u64(r)? as usize;
    let mut data = vec![0u8; len];
    r.read_exact(&mut data)?;
    Ok(data)
}

fn bytes_to_u32s(b: &[u8]) -> Vec<u32> {
    b.chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}
