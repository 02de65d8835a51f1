//! Passage ranking from generated identifiers, rank losses and the
//! learning-to-rank training phase.
//!
//! A passage's score is the sum of the scores of the predicted identifiers it
//! contains, keeping at most `identifier_cap` of them. Beam search is not
//! differentiable, so the losses re-score each selected passage's matched
//! identifiers by teacher forcing under the current parameters and
//! backpropagate through those sequence log-probabilities.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{make_gen_samples, CorpusStore, GenSample, Qrels, Query, SampleConfig, View};
use crate::decoder::{generate_all_views, DecodeConfig, ScoredIdentifier};
use crate::error::{Error, Result};
use crate::fmindex::FmIndex;
use crate::metrics::{evaluate, EvalResult};
use crate::runfile::Run;
use crate::seqmodel::{apply_update, gen_loss_and_grad, OptimState, SeqModel};
use crate::vocab::{TokenId, Vocab};

/// How a generated identifier's log-probability becomes its ranking score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum IdentifierScoring {
    /// The raw sequence log-probability (≤ 0).
    LogProb,
    /// The sequence probability, `exp(log-probability)`.
    #[default]
    Prob,
}

impl IdentifierScoring {
    pub fn apply(self, logprob: f64) -> f64 {
        match self {
            IdentifierScoring::LogProb => logprob,
            IdentifierScoring::Prob => logprob.exp(),
        }
    }

    /// d apply / d logprob
    pub fn derivative(self, logprob: f64) -> f64 {
        match self {
            IdentifierScoring::LogProb => 1.0,
            IdentifierScoring::Prob => logprob.exp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub margin: f64,
    pub lambda: f64,
    pub identifier_cap: usize,
    pub top_k: usize,
    pub rank1: bool,
    pub rank2: bool,
    pub gen: bool,
    pub listwise: bool,
    pub listwise_negatives: usize,
    pub scoring: IdentifierScoring,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl LossConfig {
    pub fn desk() -> Self {
        Self {
            margin: 3.0,
            lambda: 1.0,
            identifier_cap: 40,
            top_k: 20,
            rank1: true,
            rank2: true,
            gen: true,
            listwise: false,
            listwise_negatives: 19,
            scoring: IdentifierScoring::default(),
        }
    }

    pub fn paper() -> Self {
        Self {
            margin: 500.0,
            lambda: 1000.0,
            top_k: 200,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Config("margin and lambda must be non-negative".into()));
        }
        if self.identifier_cap == 0 || self.top_k == 0 {
            return Err(Error::Config("identifier_cap and top_k must be at least 1".into()));
        }
        if !(self.rank1 || self.rank2 || self.gen || self.listwise) {
            return Err(Error::Config("every loss term is disabled".into()));
        }
        Ok(())
    }

    fn uses_rank_terms(&self) -> bool {
        self.rank1 || self.rank2 || self.listwise
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEntry {
    pub passage_id: String,
    pub score: f64,
    /// Identifiers credited to this passage, best first, at most `identifier_cap`.
    pub matched: Vec<ScoredIdentifier>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub qid: String,
    pub entries: Vec<RankedEntry>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn truncate(&mut self, k: usize) {
        self.entries.truncate(k);
    }

    pub fn ranking(&self) -> Vec<(String, f64)> {
        self.entries.iter().map(|e| (e.passage_id.clone(), e.score)).collect()
    }
}

/// The index pattern an identifier must match: whole units for titles and
/// pseudo-queries, any span for substrings.
pub fn identifier_pattern(id: &ScoredIdentifier, vocab: &Vocab) -> Vec<TokenId> {
    match id.view {
        View::Substring => id.tokens.clone(),
        View::Title | View::PseudoQuery => {
            let mut p = Vec::with_capacity(id.tokens.len() + 2);
            p.push(id.view.marker(vocab));
            p.extend_from_slice(&id.tokens);
            p.push(vocab.specials().sep);
            p
        }
    }
}

/// Best-first order for identifiers credited to one passage.
pub fn matched_order(scoring: IdentifierScoring) -> impl Fn(&ScoredIdentifier, &ScoredIdentifier) -> std::cmp::Ordering {
    move |a, b| {
        scoring
            .apply(b.score)
            .partial_cmp(&scoring.apply(a.score))
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.view.cmp(&b.view))
            .then_with(|| a.tokens.cmp(&b.tokens))
    }
}

/// Sums capped identifier scores per passage; ties go to the smaller passage id.
pub fn aggregate_scores(
    qid: &str,
    ids: &[ScoredIdentifier],
    ix: &FmIndex,
    vocab: &Vocab,
    cap: usize,
    scoring: IdentifierScoring,
) -> RankedList {
    let mut per_passage: BTreeMap<u32, Vec<ScoredIdentifier>> = BTreeMap::new();
    for id in ids {
        if id.tokens.is_empty() {
            continue;
        }
        for p in ix.locate_passages(&identifier_pattern(id, vocab)) {
            per_passage.entry(p).or_default().push(id.clone());
        }
    }
    let order = matched_order(scoring);
    let mut entries: Vec<RankedEntry> = per_passage
        .into_iter()
        .map(|(p, mut matched)| {
            matched.sort_by(&order);
            matched.truncate(cap);
            let score = matched.iter().map(|m| scoring.apply(m.score)).sum();
            RankedEntry {
                passage_id: ix.passage_ids()[p as usize].clone(),
                score,
                matched,
            }
        })
        .collect();
    sort_entries(&mut entries);
    RankedList {
        qid: qid.to_string(),
        entries,
    }
}

pub fn sort_entries(entries: &mut [RankedEntry]) {
    entries.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.passage_id.cmp(&b.passage_id))
    });
}

/// Trims a query so that it plus the longest identifier fits the model.
pub fn fit_query(mut tokens: Vec<TokenId>, m: &SeqModel, max_target: usize) -> Vec<TokenId> {
    let room = m.config().max_seq_len.saturating_sub(3 + max_target + 1);
    tokens.truncate(room);
    tokens
}

/// Clips a generation sample to the decode length and the model's context.
pub fn fit_sample(mut s: GenSample, m: &SeqModel, vocab: &Vocab, max_target: usize) -> GenSample {
    s.query_tokens = fit_query(s.query_tokens, m, max_target);
    if s.target_tokens.len() > max_target + 1 {
        s.target_tokens.truncate(max_target);
        s.target_tokens.push(vocab.specials().eos);
    }
    s
}

pub fn retrieve(
    m: &SeqModel,
    ix: &FmIndex,
    vocab: &Vocab,
    qid: &str,
    query: &[TokenId],
    decode: &DecodeConfig,
    cfg: &LossConfig,
) -> Result<RankedList> {
    let ids = generate_all_views(m, ix, vocab, query, decode)?;
    let mut list = aggregate_scores(qid, &ids, ix, vocab, cfg.identifier_cap, cfg.scoring);
    list.truncate(cfg.top_k);
    Ok(list)
}

/// Retrieves every query in parallel; output order follows `queries`.
pub fn retrieve_all(
    m: &SeqModel,
    ix: &FmIndex,
    vocab: &Vocab,
    queries: &[Query],
    decode: &DecodeConfig,
    cfg: &LossConfig,
) -> Result<Vec<RankedList>> {
    queries
        .par_iter()
        .map(|q| {
            let toks = fit_query(vocab.encode(&q.text), m, decode.max_len);
            retrieve(m, ix, vocab, &q.qid, &toks, decode, cfg)
        })
        .collect()
}

pub fn lists_to_run(lists: &[RankedList], tag: &str) -> Run {
    let mut run = Run::new(tag);
    for l in lists {
        run.insert(l.qid.clone(), l.ranking());
    }
    run
}

/// `max(0, s_neg − s_pos + margin)`
pub fn margin_loss(s_pos: f64, s_neg: f64, margin: f64) -> f64 {
    (s_neg - s_pos + margin).max(0.0)
}

/// `−log(e^{s_pos} / (e^{s_pos} + Σ e^{s_neg}))`, computed with max subtraction.
pub fn infonce_loss(s_pos: f64, s_negs: &[f64]) -> f64 {
    let max = s_negs.iter().copied().fold(s_pos, f64::max);
    let denom: f64 = (s_pos - max).exp() + s_negs.iter().map(|s| (s - max).exp()).sum::<f64>();
    -(s_pos - max - denom.ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairStrategy {
    /// Highest-scored positive against highest-scored negative.
    TopTop,
    /// A uniformly random positive against a uniformly random negative.
    RandomRandom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SkipReason {
    NoPositive,
    NoNegative,
}

/// Re-scores passages under the current parameters.
pub struct Scorer<'a> {
    pub model: &'a SeqModel,
    pub vocab: &'a Vocab,
    pub scoring: IdentifierScoring,
    pub length_penalty: f64,
}

impl<'a> Scorer<'a> {
    pub fn new(model: &'a SeqModel, vocab: &'a Vocab, scoring: IdentifierScoring) -> Self {
        Self {
            model,
            vocab,
            scoring,
            length_penalty: 0.0,
        }
    }

    fn target(&self, id: &ScoredIdentifier) -> Vec<TokenId> {
        let mut t = id.tokens.clone();
        t.push(self.vocab.specials().eos);
        t
    }

    fn norm(&self, len_with_eos: usize) -> f64 {
        if self.length_penalty == 0.0 {
            1.0
        } else {
            1.0 / (len_with_eos as f64).powf(self.length_penalty)
        }
    }

    /// Teacher-forced (normalized) log-probability of one identifier.
    pub fn identifier_logprob(&self, query: &[TokenId], id: &ScoredIdentifier) -> Result<f64> {
        let t = self.target(id);
        let lp = self.model.score_sequence(query, id.view.marker(self.vocab), &t)?.total;
        Ok(lp * self.norm(t.len()))
    }

    /// `s(q, p)` recomputed from the entry's matched identifiers.
    pub fn passage_score(&self, query: &[TokenId], entry: &RankedEntry) -> Result<f64> {
        let mut s = 0.0;
        for id in &entry.matched {
            s += self.scoring.apply(self.identifier_logprob(query, id)?);
        }
        Ok(s)
    }

    /// Adds `weight · ∂s(q, p)/∂θ` into `grad`.
    pub fn backprop(&self, query: &[TokenId], entry: &RankedEntry, weight: f64, grad: &mut [f64]) -> Result<()> {
        if weight == 0.0 {
            return Ok(());
        }
        for id in &entry.matched {
            let t = self.target(id);
            let scale = self.norm(t.len());
            let lp = self.identifier_logprob(query, id)?;
            let w = weight * self.scoring.derivative(lp) * scale;
            self.model
                .accumulate_grad(query, id.view.marker(self.vocab), &t, w, grad)?;
        }
        Ok(())
    }
}

fn split_list<'l>(list: &'l RankedList, positives: &BTreeSet<&str>) -> (Vec<&'l RankedEntry>, Vec<&'l RankedEntry>) {
    list.entries
        .iter()
        .partition(|e| positives.contains(e.passage_id.as_str()))
}

/// Picks `(positive, negative)` entries from the list.
pub fn select_pair<'l, R: Rng + ?Sized>(
    list: &'l RankedList,
    positives: &BTreeSet<&str>,
    strategy: PairStrategy,
    rng: &mut R,
) -> std::result::Result<(&'l RankedEntry, &'l RankedEntry), SkipReason> {
    let (pos, neg) = split_list(list, positives);
    if pos.is_empty() {
        return Err(SkipReason::NoPositive);
    }
    if neg.is_empty() {
        return Err(SkipReason::NoNegative);
    }
    Ok(match strategy {
        PairStrategy::TopTop => (pos[0], neg[0]),
        PairStrategy::RandomRandom => (
            pos[rng.gen_range(0..pos.len())],
            neg[rng.gen_range(0..neg.len())],
        ),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TermOutcome {
    Computed(f64),
    Skipped(SkipReason),
}

/// Margin rank loss over a sampled pair; adds `scale · ∂loss/∂θ` into `grad` when given.
#[allow(clippy::too_many_arguments)]
pub fn margin_rank_loss<R: Rng + ?Sized>(
    scorer: &Scorer<'_>,
    query: &[TokenId],
    list: &RankedList,
    positives: &BTreeSet<&str>,
    strategy: PairStrategy,
    margin: f64,
    rng: &mut R,
    grad: Option<(&mut [f64], f64)>,
) -> Result<TermOutcome> {
    let (p, n) = match select_pair(list, positives, strategy, rng) {
        Ok(pair) => pair,
        Err(reason) => return Ok(TermOutcome::Skipped(reason)),
    };
    let s_pos = scorer.passage_score(query, p)?;
    let s_neg = scorer.passage_score(query, n)?;
    let loss = margin_loss(s_pos, s_neg, margin);
    if let Some((g, scale)) = grad {
        if loss > 0.0 {
            scorer.backprop(query, n, scale, g)?;
            scorer.backprop(query, p, -scale, g)?;
        }
    }
    Ok(TermOutcome::Computed(loss))
}

/// InfoNCE over the highest-scored positive and up to `k_neg` random negatives.
pub fn listwise_loss<R: Rng + ?Sized>(
    scorer: &Scorer<'_>,
    query: &[TokenId],
    list: &RankedList,
    positives: &BTreeSet<&str>,
    k_neg: usize,
    rng: &mut R,
    grad: Option<(&mut [f64], f64)>,
) -> Result<TermOutcome> {
    let (pos, neg) = split_list(list, positives);
    let Some(&p) = pos.first() else {
        return Ok(TermOutcome::Skipped(SkipReason::NoPositive));
    };
    let mut negs: Vec<&RankedEntry> = neg;
    negs.shuffle(rng);
    negs.truncate(k_neg);
    let s_pos = scorer.passage_score(query, p)?;
    let s_negs = negs
        .iter()
        .map(|e| scorer.passage_score(query, e))
        .collect::<Result<Vec<_>>>()?;
    let loss = infonce_loss(s_pos, &s_negs);
    if let Some((g, scale)) = grad {
        let max = s_negs.iter().copied().fold(s_pos, f64::max);
        let denom: f64 = (s_pos - max).exp() + s_negs.iter().map(|s| (s - max).exp()).sum::<f64>();
        let p_pos = (s_pos - max).exp() / denom;
        scorer.backprop(query, p, scale * (p_pos - 1.0), g)?;
        for (e, s) in negs.iter().zip(&s_negs) {
            scorer.backprop(query, e, scale * (s - max).exp() / denom, g)?;
        }
    }
    Ok(TermOutcome::Computed(loss))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub rank1: f64,
    pub rank2: f64,
    pub listwise: f64,
    pub gen: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CombinedOutcome {
    Computed(CombinedLoss),
    Skipped(SkipReason),
}

/// `rank1 + rank2 + listwise + λ·gen`, each term present only when enabled.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss<R: Rng + ?Sized>(
    m: &SeqModel,
    vocab: &Vocab,
    query: &[TokenId],
    list: &RankedList,
    positives: &BTreeSet<&str>,
    gen_batch: &[GenSample],
    cfg: &LossConfig,
    rng: &mut R,
) -> Result<CombinedOutcome> {
    cfg.validate()?;
    if cfg.uses_rank_terms() {
        let (pos, neg) = split_list(list, positives);
        if pos.is_empty() {
            return Ok(CombinedOutcome::Skipped(SkipReason::NoPositive));
        }
        if neg.is_empty() && (cfg.rank1 || cfg.rank2) {
            return Ok(CombinedOutcome::Skipped(SkipReason::NoNegative));
        }
    }
    let scorer = Scorer::new(m, vocab, cfg.scoring);
    let mut grad = vec![0.0; m.num_params()];
    let mut out = CombinedLoss {
        loss: 0.0,
        grad: Vec::new(),
        rank1: 0.0,
        rank2: 0.0,
        listwise: 0.0,
        gen: 0.0,
    };
    let computed = |t: TermOutcome| match t {
        TermOutcome::Computed(v) => v,
        TermOutcome::Skipped(_) => unreachable!("preconditions checked above"),
    };
    if cfg.rank1 {
        out.rank1 = computed(margin_rank_loss(
            &scorer, query, list, positives, PairStrategy::TopTop, cfg.margin, rng,
            Some((&mut grad, 1.0)),
        )?);
    }
    if cfg.rank2 {
        out.rank2 = computed(margin_rank_loss(
            &scorer, query, list, positives, PairStrategy::RandomRandom, cfg.margin, rng,
            Some((&mut grad, 1.0)),
        )?);
    }
    if cfg.listwise {
        out.listwise = computed(listwise_loss(
            &scorer, query, list, positives, cfg.listwise_negatives, rng,
            Some((&mut grad, 1.0)),
        )?);
    }
    if cfg.gen && cfg.lambda > 0.0 {
        if gen_batch.is_empty() {
            if !cfg.uses_rank_terms() {
                return Err(Error::Config("generation-only loss needs a non-empty sample batch".into()));
            }
        } else {
            let (l, g) = gen_loss_and_grad(m, gen_batch)?;
            out.gen = l;
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += cfg.lambda * b;
            }
        }
    }
    out.loss = out.rank1 + out.rank2 + out.listwise + cfg.lambda * out.gen;
    out.grad = grad;
    Ok(CombinedOutcome::Computed(out))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LtrConfig {
    pub loss: LossConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Taken from the experiment seed; not a config-file key.
    #[serde(skip)]
    pub seed: u64,
    /// Generation samples also include one pseudo-query pair per positive passage.
    pub index_pairs: bool,
}

impl Default for LtrConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::desk(),
            epochs: 3,
            batch_size: 4,
            lr: 1e-3,
            seed: 0,
            index_pairs: true,
        }
    }
}

/// Queries, judgments and the corpus their positives live in.
#[derive(Clone, Copy)]
pub struct QuerySet<'a> {
    pub store: &'a CorpusStore,
    pub queries: &'a [Query],
    pub qrels: &'a Qrels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSnapshot {
    pub hits1: f64,
    pub hits5: f64,
    pub hits20: f64,
    pub mrr10: f64,
    pub positives_top5: usize,
}

impl From<&EvalResult> for MetricSnapshot {
    fn from(e: &EvalResult) -> Self {
        Self {
            hits1: e.hits_at(1),
            hits5: e.hits_at(5),
            hits20: e.hits_at(20),
            mrr10: e.mrr10,
            positives_top5: e.positives_top5(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_rank1: f64,
    pub mean_rank2: f64,
    pub mean_listwise: f64,
    pub mean_gen: f64,
    pub used_queries: usize,
    pub skipped_no_positive: usize,
    pub skipped_no_negative: usize,
    pub updates: usize,
    pub heldout: Option<MetricSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

/// Retrieves, evaluates and returns the run plus its metrics.
pub fn evaluate_model(
    m: &SeqModel,
    ix: &FmIndex,
    vocab: &Vocab,
    set: QuerySet<'_>,
    decode: &DecodeConfig,
    cfg: &LossConfig,
) -> Result<(Vec<RankedList>, EvalResult)> {
    let lists = retrieve_all(m, ix, vocab, set.queries, decode, cfg)?;
    let eval = evaluate(&lists_to_run(&lists, "eval"), set.qrels, cfg.top_k);
    Ok((lists, eval))
}

fn gen_samples_for<R: Rng + ?Sized>(
    q: &Query,
    set: QuerySet<'_>,
    vocab: &Vocab,
    sample: &SampleConfig,
    index_pairs: bool,
    rng: &mut R,
) -> Result<Vec<GenSample>> {
    let mut out = Vec::new();
    for pid in set.qrels.positives(&q.qid) {
        let p = set
            .store
            .lookup(pid)
            .ok_or_else(|| Error::UnknownPassage(pid.to_string()))?;
        out.extend(make_gen_samples(&q.text, p, rng, sample, vocab)?);
        if index_pairs {
            if let Some(pq) = p.pseudo_queries.choose(rng) {
                out.extend(make_gen_samples(pq, p, rng, sample, vocab)?);
            }
        }
    }
    Ok(out)
}

/// Continues training `m` on passage rank losses built from its own retrieval lists.
#[allow(clippy::too_many_arguments)]
pub fn train_ltr(
    mut m: SeqModel,
    ix: &FmIndex,
    vocab: &Vocab,
    train: QuerySet<'_>,
    heldout: Option<QuerySet<'_>>,
    decode: &DecodeConfig,
    sample: &SampleConfig,
    cfg: &LtrConfig,
) -> Result<(SeqModel, TrainReport)> {
    cfg.loss.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut optim = OptimState::new(m.num_params(), cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();

    for epoch in 1..=cfg.epochs {
        let snapshot = m.clone();
        let lists = retrieve_all(&snapshot, ix, vocab, train.queries, decode, &cfg.loss)?;
        let mut order: Vec<usize> = (0..train.queries.len()).collect();
        order.shuffle(&mut rng);

        let mut rec = EpochRecord {
            epoch,
            mean_loss: 0.0,
            mean_rank1: 0.0,
            mean_rank2: 0.0,
            mean_listwise: 0.0,
            mean_gen: 0.0,
            used_queries: 0,
            skipped_no_positive: 0,
            skipped_no_negative: 0,
            updates: 0,
            heldout: None,
        };
        for chunk in order.chunks(cfg.batch_size) {
            let seeds: Vec<u64> = chunk.iter().map(|_| rng.gen()).collect();
            let outcomes: Vec<Result<CombinedOutcome>> = chunk
                .par_iter()
                .zip(&seeds)
                .map(|(&qi, &seed)| {
                    let mut qrng = ChaCha8Rng::seed_from_u64(seed);
                    let q = &train.queries[qi];
                    let toks = fit_query(vocab.encode(&q.text), &m, decode.max_len);
                    let samples = if cfg.loss.gen {
                        gen_samples_for(q, train, vocab, sample, cfg.index_pairs, &mut qrng)?
                            .into_iter()
                            .filter(|s| decode.views.contains(&s.view))
                            .map(|s| fit_sample(s, &m, vocab, decode.max_len))
                            .collect()
                    } else {
                        Vec::new()
                    };
                    let positives = train.qrels.positives(&q.qid);
                    combined_loss(&m, vocab, &toks, &lists[qi], &positives, &samples, &cfg.loss, &mut qrng)
                })
                .collect();
            let mut grad = vec![0.0; m.num_params()];
            let mut used = 0usize;
            for o in outcomes {
                match o? {
                    CombinedOutcome::Skipped(SkipReason::NoPositive) => rec.skipped_no_positive += 1,
                    CombinedOutcome::Skipped(SkipReason::NoNegative) => rec.skipped_no_negative += 1,
                    CombinedOutcome::Computed(c) => {
                        used += 1;
                        rec.mean_loss += c.loss;
                        rec.mean_rank1 += c.rank1;
                        rec.mean_rank2 += c.rank2;
                        rec.mean_listwise += c.listwise;
                        rec.mean_gen += c.gen;
                        for (a, b) in grad.iter_mut().zip(&c.grad) {
                            *a += b;
                        }
                    }
                }
            }
            if used > 0 {
                let inv = 1.0 / used as f64;
                grad.iter_mut().for_each(|g| *g *= inv);
                apply_update(&mut m, &mut optim, &grad)?;
                rec.updates += 1;
                rec.used_queries += used;
            }
        }
        if rec.used_queries == 0 {
            return Err(Error::NoUsableQueries(format!(
                "epoch {epoch}: all {} queries skipped ({} without a retrieved positive, {} without a negative)",
                train.queries.len(),
                rec.skipped_no_positive,
                rec.skipped_no_negative
            )));
        }
        let n = rec.used_queries as f64;
        rec.mean_loss /= n;
        rec.mean_rank1 /= n;
        rec.mean_rank2 /= n;
        rec.mean_listwise /= n;
        rec.mean_gen /= n;
        if let Some(h) = heldout {
            let (_, e) = evaluate_model(&m, ix, vocab, h, decode, &cfg.loss)?;
            rec.heldout = Some(MetricSnapshot::from(&e));
        }
        report.epochs.push(rec);
    }
    Ok((m, report))
}
