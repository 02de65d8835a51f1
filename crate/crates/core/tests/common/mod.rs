//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use genret::corpus::{make_gen_samples, CorpusStore, GenSample, Passage, Qrels, SampleConfig, View};
use genret::decoder::{generate_all_views, DecodeConfig, ScoredIdentifier};
use genret::fmindex::{IndexedText, UnitEntry};
use genret::pipeline::ablation_variants;
use genret::ranker::{
    aggregate_scores, combined_loss, listwise_loss, margin_rank_loss, CombinedOutcome, IdentifierScoring, LossConfig,
    PairStrategy, RankedList, Scorer, TermOutcome,
};
use genret::seqmodel::{gen_loss_and_grad, ModelConfig, SeqModel};
use genret::{build_index, build_vocab, FmIndex, IndexConfig, Run, TokenId, Vocab, VocabConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// ---- naive text scanning ----

pub fn naive_occurrences(text: &[u32], pat: &[u32]) -> Vec<usize> {
    if pat.is_empty() {
        return (0..text.len()).collect();
    }
    if pat.len() > text.len() {
        return vec![];
    }
    (0..=text.len() - pat.len())
        .filter(|&i| &text[i..i + pat.len()] == pat)
        .collect()
}

pub fn naive_successors(text: &[u32], pat: &[u32]) -> Vec<(u32, usize)> {
    let mut m: BTreeMap<u32, usize> = BTreeMap::new();
    for i in naive_occurrences(text, pat) {
        if let Some(&t) = text.get(i + pat.len()) {
            *m.entry(t).or_default() += 1;
        }
    }
    m.into_iter().collect()
}

/// Units with an occurrence that starts and ends inside them.
pub fn naive_locate_units(text: &IndexedText, pat: &[u32]) -> Vec<usize> {
    let mut out = Vec::new();
    for u in 0..text.units.len() {
        let lo = text.unit_starts[u] as usize;
        let hi = text.unit_starts.get(u + 1).map_or(text.tokens.len(), |&s| s as usize);
        let unit = &text.tokens[lo..hi];
        if pat.is_empty() || (pat.len() <= unit.len() && unit.windows(pat.len()).any(|w| w == pat)) {
            out.push(u);
        }
    }
    out
}

/// Random unit-structured text over `sigma` symbols.
pub fn random_text<R: Rng>(rng: &mut R, sigma: u32, units: usize, max_unit: usize) -> IndexedText {
    let mut t = IndexedText {
        tokens: vec![],
        units: vec![],
        unit_starts: vec![],
        passage_ids: vec![],
    };
    let mut passage = 0u32;
    for u in 0..units {
        if u == 0 || rng.gen_bool(0.5) {
            t.passage_ids.push(format!("p{passage}"));
            passage += 1;
        }
        t.unit_starts.push(t.tokens.len() as u32);
        let view = [View::Title, View::Substring, View::PseudoQuery][rng.gen_range(0..3)];
        t.units.push(UnitEntry {
            passage: passage - 1,
            view,
        });
        let len = rng.gen_range(1..=max_unit);
        for _ in 0..len {
            t.tokens.push(rng.gen_range(0..sigma));
        }
    }
    t
}

// ---- corpus fixtures ----

pub fn word_corpus() -> CorpusStore {
    CorpusStore::new(vec![
        Passage::new("p0", "prime rate", "the prime rate is the rate banks charge")
            .with_pseudo_queries(["what is the prime rate"]),
        Passage::new("p1", "rate cap", "a rate cap limits the rate on a loan")
            .with_pseudo_queries(["rate cap on loans", "loan rate limit"]),
        Passage::new("p2", "bank run", "a bank run is when depositors withdraw at once"),
        Passage::new("p3", "loan shark", "a loan shark charges a high rate")
            .with_pseudo_queries(["illegal lender"]),
        Passage::new("p4", "", "banks charge fees on a loan"),
    ])
    .unwrap()
}

pub struct Fixture {
    pub store: CorpusStore,
    pub vocab: Vocab,
    pub index: FmIndex,
    pub model: SeqModel,
}

pub fn fixture(store: CorpusStore, vocab_cfg: VocabConfig, extra: &[&str], embed: usize, hidden: usize, seed: u64) -> Fixture {
    let vocab = build_vocab(&store, extra.iter().copied(), &vocab_cfg).unwrap();
    let index = build_index(&store, &vocab, &SampleConfig::default(), &IndexConfig::default()).unwrap();
    let model = SeqModel::new(ModelConfig {
        vocab_size: vocab.len(),
        embed_dim: embed,
        hidden_dim: hidden,
        max_seq_len: 64,
        seed,
        ..Default::default()
    })
    .unwrap();
    Fixture {
        store,
        vocab,
        index,
        model,
    }
}

pub fn word_fixture(seed: u64) -> Fixture {
    fixture(
        word_corpus(),
        VocabConfig {
            granularity: genret::Granularity::Word,
            min_count: 1,
        },
        &["which rate do banks charge", "loan limits"],
        6,
        8,
        seed,
    )
}

/// Per-passage unit contents, in passage order: `(view, tokens)`.
pub fn unit_contents(store: &CorpusStore, vocab: &Vocab) -> Vec<Vec<(View, Vec<TokenId>)>> {
    store
        .passages()
        .iter()
        .map(|p| {
            let mut u = Vec::new();
            if !p.title.is_empty() {
                u.push((View::Title, vocab.encode(&p.title)));
            }
            u.push((View::Substring, vocab.encode(&p.body)));
            for q in &p.pseudo_queries {
                u.push((View::PseudoQuery, vocab.encode(q)));
            }
            u
        })
        .collect()
}

fn contains(hay: &[TokenId], needle: &[TokenId]) -> bool {
    !needle.is_empty() && needle.len() <= hay.len() && hay.windows(needle.len()).any(|w| w == needle)
}

pub fn identifier_matches(units: &[(View, Vec<TokenId>)], id: &ScoredIdentifier) -> bool {
    if id.tokens.is_empty() {
        return false;
    }
    match id.view {
        View::Substring => units.iter().any(|(_, t)| contains(t, &id.tokens)),
        v => units.iter().any(|(uv, t)| *uv == v && *t == id.tokens),
    }
}

/// Scores every passage by scanning every identifier; returns `(passage id, score)` best first.
pub fn brute_force_rank(
    store: &CorpusStore,
    vocab: &Vocab,
    ids: &[ScoredIdentifier],
    cap: usize,
    scoring: IdentifierScoring,
) -> Vec<(String, f64)> {
    let f = |lp: f64| match scoring {
        IdentifierScoring::LogProb => lp,
        IdentifierScoring::Prob => lp.exp(),
    };
    let mut out = Vec::new();
    for (p, units) in store.passages().iter().zip(unit_contents(store, vocab)) {
        let mut matched: Vec<&ScoredIdentifier> = ids.iter().filter(|i| identifier_matches(&units, i)).collect();
        if matched.is_empty() {
            continue;
        }
        matched.sort_by(|a, b| {
            f(b.score)
                .partial_cmp(&f(a.score))
                .unwrap()
                .then(a.view.cmp(&b.view))
                .then(a.tokens.cmp(&b.tokens))
        });
        let mut s = 0.0;
        for m in matched.iter().take(cap) {
            s += f(m.score);
        }
        out.push((p.id.clone(), s));
    }
    out.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    out
}

// ---- finite differences ----

/// Central differences of `f` on `coords`; returns the vector relative error against `grad`.
pub fn fd_rel_error(f: impl Fn(&[f64]) -> f64, theta: &[f64], grad: &[f64], coords: &[usize], eps: f64) -> f64 {
    let mut num = 0.0;
    let mut a2 = 0.0;
    let mut f2 = 0.0;
    let mut th = theta.to_vec();
    for &i in coords {
        let orig = th[i];
        th[i] = orig + eps;
        let up = f(&th);
        th[i] = orig - eps;
        let down = f(&th);
        th[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        num += (grad[i] - fd).powi(2);
        a2 += grad[i].powi(2);
        f2 += fd.powi(2);
    }
    let denom = a2.sqrt().max(f2.sqrt());
    if denom < 1e-12 {
        0.0
    } else {
        num.sqrt() / denom
    }
}

pub fn coords<R: Rng>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    if n <= k {
        return (0..n).collect();
    }
    let mut s = BTreeSet::new();
    while s.len() < k {
        s.insert(rng.gen_range(0..n));
    }
    s.into_iter().collect()
}

// ---- metric script ----

pub struct ScriptMetrics {
    pub hits: f64,
    pub recall: f64,
    pub mrr: f64,
}

/// Straight-line metric computation over judged queries with at least one positive.
pub fn metric_script(run: &Run, qrels: &Qrels, k: usize) -> ScriptMetrics {
    let mut n = 0usize;
    let (mut h, mut r, mut m) = (0.0, 0.0, 0.0);
    for (qid, list) in &run.lists {
        let pos = qrels.positives(qid);
        if pos.is_empty() {
            continue;
        }
        n += 1;
        let mut found = 0usize;
        let mut first: Option<usize> = None;
        for (i, (pid, _)) in list.iter().enumerate() {
            if i >= k {
                break;
            }
            if pos.contains(pid.as_str()) {
                found += 1;
                if first.is_none() {
                    first = Some(i + 1);
                }
            }
        }
        if found > 0 {
            h += 1.0;
        }
        r += found as f64 / pos.len() as f64;
        if let Some(f) = first {
            m += 1.0 / f as f64;
        }
    }
    if n == 0 {
        return ScriptMetrics {
            hits: 0.0,
            recall: 0.0,
            mrr: 0.0,
        };
    }
    ScriptMetrics {
        hits: h / n as f64,
        recall: r / n as f64,
        mrr: m / n as f64,
    }
}

pub fn random_run_qrels<R: Rng>(rng: &mut R) -> (Run, Qrels) {
    let n_pass = rng.gen_range(5..40);
    let mut run = Run::new("t");
    let mut qrels = Qrels::default();
    for q in 0..rng.gen_range(1..15) {
        let qid = format!("q{q}");
        let mut pids: Vec<usize> = (0..n_pass).collect();
        for i in (1..pids.len()).rev() {
            pids.swap(i, rng.gen_range(0..=i));
        }
        let len = rng.gen_range(0..=n_pass);
        let list: Vec<(String, f64)> = pids[..len]
            .iter()
            .enumerate()
            .map(|(i, p)| (format!("d{p}"), 100.0 - i as f64))
            .collect();
        run.insert(qid.clone(), list);
        match rng.gen_range(0..6) {
            0 => {}
            1 => qrels.insert(qid.clone(), "d0", 0),
            _ => {
                for _ in 0..rng.gen_range(1..4) {
                    qrels.insert(qid.clone(), format!("d{}", rng.gen_range(0..n_pass)), rng.gen_range(1..3));
                }
            }
        }
    }
    (run, qrels)
}

// ---- gradient checks ----

pub const FD_EPS: f64 = 1e-4;
pub const FD_TOL: f64 = 1e-3;

pub struct GradCase {
    pub name: String,
    pub params: usize,
    pub rel_err: f64,
}

const QUERIES: [&str; 6] = [
    "which rate do banks charge",
    "loan limits",
    "prime rate",
    "what is a bank run",
    "loan shark rate",
    "rate cap on loans",
];

fn with_params(m: &SeqModel, theta: &[f64]) -> SeqModel {
    let mut m = m.clone();
    m.params_mut().copy_from_slice(theta);
    m
}

/// Half the coordinates from the gradient's support, half uniformly.
fn check_coords(rng: &mut ChaCha8Rng, grad: &[f64], k: usize) -> Vec<usize> {
    let mut support: Vec<usize> = (0..grad.len()).filter(|&i| grad[i] != 0.0).collect();
    support.shuffle(rng);
    support.truncate(k / 2);
    let mut all: BTreeSet<usize> = support.into_iter().collect();
    all.extend(coords(rng, grad.len(), k / 2));
    all.into_iter().collect()
}

/// Retrieved list with at least two entries, and one positive that is not first.
fn list_and_positive(f: &Fixture, m: &SeqModel, query: &[TokenId], scoring: IdentifierScoring, rng: &mut ChaCha8Rng) -> Option<(RankedList, String)> {
    let decode = DecodeConfig {
        beam: 4,
        max_len: 4,
        ..Default::default()
    };
    let ids = generate_all_views(m, &f.index, &f.vocab, query, &decode).ok()?;
    let list = aggregate_scores("q", &ids, &f.index, &f.vocab, 6, scoring);
    if list.len() < 2 {
        return None;
    }
    let pos = list.entries[rng.gen_range(1..list.len())].passage_id.clone();
    Some((list, pos))
}

/// Finite-difference checks of every loss term on `n` random model/query/flag draws.
pub fn gradient_cases(n: usize, seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut draw = 0u64;
    let mut config = 0usize;
    while config < n {
        draw += 1;
        let mut f = word_fixture(seed.wrapping_mul(1000) + draw);
        for p in f.model.params_mut() {
            *p += rng.gen_range(-0.3..0.3);
        }
        let m = f.model.clone();
        let scoring = if rng.gen_bool(0.5) { IdentifierScoring::Prob } else { IdentifierScoring::LogProb };
        let qtext = QUERIES[rng.gen_range(0..QUERIES.len())];
        let query = f.vocab.encode(qtext);
        let Some((list, pos_id)) = list_and_positive(&f, &m, &query, scoring, &mut rng) else {
            continue;
        };
        config += 1;
        let positives: BTreeSet<&str> = [pos_id.as_str()].into_iter().collect();
        let mut batch: Vec<GenSample> = Vec::new();
        for p in f.store.passages().choose_multiple(&mut rng, 2) {
            batch.extend(make_gen_samples(qtext, p, &mut rng, &SampleConfig { substring_len: (1, 3), ..Default::default() }, &f.vocab).unwrap());
        }
        let theta = m.params().to_vec();
        // Smallest margin that keeps every pair's hinge active, so no kink lies near theta.
        let scorer = Scorer::new(&m, &f.vocab, scoring);
        let scores: Vec<f64> = list.entries.iter().map(|e| scorer.passage_score(&query, e).unwrap()).collect();
        let spread = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let margin = spread + 1.0;
        let term_seed: u64 = rng.gen();
        let k_neg = rng.gen_range(1..4);
        let lambda = rng.gen_range(0.5..2.0);
        let tag = |t: &str| format!("{t} #{config} ({scoring:?})");
        let mut push = |name: String, grad: Vec<f64>, loss_at: &dyn Fn(&[f64]) -> f64, rng: &mut ChaCha8Rng| {
            let c = check_coords(rng, &grad, 120);
            out.push(GradCase {
                name,
                params: theta.len(),
                rel_err: fd_rel_error(loss_at, &theta, &grad, &c, FD_EPS),
            });
        };

        let (_, g) = gen_loss_and_grad(&m, &batch).unwrap();
        push(tag("gen"), g, &|th| gen_loss_and_grad(&with_params(&m, th), &batch).unwrap().0, &mut rng);

        for (name, strategy) in [("rank1", PairStrategy::TopTop), ("rank2", PairStrategy::RandomRandom)] {
            let eval = |model: &SeqModel, grad: Option<(&mut [f64], f64)>| {
                let s = Scorer::new(model, &f.vocab, scoring);
                let mut r = ChaCha8Rng::seed_from_u64(term_seed);
                match margin_rank_loss(&s, &query, &list, &positives, strategy, margin, &mut r, grad).unwrap() {
                    TermOutcome::Computed(v) => v,
                    TermOutcome::Skipped(why) => panic!("{why:?}"),
                }
            };
            let mut g = vec![0.0; theta.len()];
            eval(&m, Some((&mut g, 1.0)));
            push(tag(name), g, &|th| eval(&with_params(&m, th), None), &mut rng);
        }

        let eval = |model: &SeqModel, grad: Option<(&mut [f64], f64)>| {
            let s = Scorer::new(model, &f.vocab, scoring);
            let mut r = ChaCha8Rng::seed_from_u64(term_seed);
            match listwise_loss(&s, &query, &list, &positives, k_neg, &mut r, grad).unwrap() {
                TermOutcome::Computed(v) => v,
                TermOutcome::Skipped(why) => panic!("{why:?}"),
            }
        };
        let mut g = vec![0.0; theta.len()];
        eval(&m, Some((&mut g, 1.0)));
        push(tag("listwise"), g, &|th| eval(&with_params(&m, th), None), &mut rng);

        let variants = ablation_variants(&LossConfig::desk());
        let (vname, base) = &variants[config % variants.len()];
        let cfg = LossConfig {
            margin,
            lambda,
            listwise_negatives: k_neg,
            scoring,
            ..base.clone()
        };
        let eval = |model: &SeqModel| {
            let mut r = ChaCha8Rng::seed_from_u64(term_seed);
            match combined_loss(model, &f.vocab, &query, &list, &positives, &batch, &cfg, &mut r).unwrap() {
                CombinedOutcome::Computed(c) => c,
                CombinedOutcome::Skipped(why) => panic!("{why:?}"),
            }
        };
        let g = eval(&m).grad;
        push(tag(&format!("composite[{vname}]")), g, &|th| eval(&with_params(&m, th)).loss, &mut rng);
    }
    out
}

// ---- retrieval fixtures ----

pub struct Indexed {
    pub store: CorpusStore,
    pub vocab: Vocab,
    pub index: FmIndex,
}

pub fn synth_indexed(passages: usize, seed: u64) -> Indexed {
    let b = genret::synth::generate(&genret::SynthConfig {
        passages,
        train_queries: 0,
        heldout_queries: 0,
        seed,
        ..Default::default()
    })
    .unwrap();
    let vocab = build_vocab(
        &b.store,
        std::iter::empty::<&str>(),
        &VocabConfig {
            granularity: genret::Granularity::Word,
            min_count: 1,
        },
    )
    .unwrap();
    let index = build_index(&b.store, &vocab, &SampleConfig::default(), &IndexConfig::default()).unwrap();
    Indexed {
        store: b.store,
        vocab,
        index,
    }
}

/// Identifiers drawn from real titles, pseudo-queries and body spans, plus
/// unmatched noise; scores come from a small grid so ties are common.
pub fn random_identifiers<R: Rng>(rng: &mut R, ix: &Indexed, n: usize) -> Vec<ScoredIdentifier> {
    let units = unit_contents(&ix.store, &ix.vocab);
    let content = ix.vocab.content_len() as u32;
    (0..n)
        .map(|_| {
            let view = View::ALL[rng.gen_range(0..3)];
            let pu = &units[rng.gen_range(0..units.len())];
            let (_, toks) = &pu[rng.gen_range(0..pu.len())];
            let tokens: Vec<TokenId> = match rng.gen_range(0..4) {
                0 => (0..rng.gen_range(1..4)).map(|_| rng.gen_range(0..content)).collect(),
                1 => toks.clone(),
                _ => {
                    let a = rng.gen_range(0..toks.len());
                    let b = rng.gen_range(a + 1..=toks.len().min(a + 4));
                    toks[a..b].to_vec()
                }
            };
            let score = -(rng.gen_range(0..40) as f64) * 0.25;
            ScoredIdentifier {
                view,
                text: ix.vocab.decode(&tokens),
                tokens,
                score,
            }
        })
        .collect()
}
