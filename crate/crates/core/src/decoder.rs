//! FM-index constrained beam search over identifier views.
//!
//! Title and pseudo-query identifiers are whole units: the hypothesis is
//! searched as `marker tokens..` and may only finish where the unit's SEP
//! follows. Substring identifiers start anywhere and may finish after any
//! non-empty span.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::corpus::View;
use crate::error::Result;
use crate::fmindex::{FmIndex, Interval};
use crate::seqmodel::{DecodeState, SeqModel};
use crate::vocab::{TokenId, Vocab};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    /// Beam width per view.
    pub beam: usize,
    pub max_len: usize,
    /// Finished scores are divided by `(len + 1)^length_penalty`; 0 keeps raw sums.
    pub length_penalty: f64,
    /// Identifier views to decode; substring-only approximates a SEAL-style base.
    pub views: Vec<View>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 15,
            max_len: 40,
            length_penalty: 0.0,
            views: View::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamHypothesis {
    pub tokens: Vec<TokenId>,
    pub logprob: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredIdentifier {
    pub view: View,
    pub text: String,
    pub tokens: Vec<TokenId>,
    /// Log-probability of `tokens` followed by EOS, length-normalized per config.
    pub score: f64,
}

/// Score order: higher score first, then ascending token sequence.
pub fn score_order(a_score: f64, a_tokens: &[TokenId], b_score: f64, b_tokens: &[TokenId]) -> Ordering {
    b_score
        .partial_cmp(&a_score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_tokens.cmp(b_tokens))
}

struct Live {
    tokens: Vec<TokenId>,
    logprob: f64,
    state: DecodeState,
    interval: Interval,
}

enum Move {
    Finish,
    Extend(TokenId),
}

struct Candidate {
    parent: usize,
    mv: Move,
    score: f64,
    key: Vec<TokenId>,
}

fn normalized(logprob: f64, len_with_eos: usize, penalty: f64) -> f64 {
    if penalty == 0.0 {
        logprob
    } else {
        logprob / (len_with_eos as f64).powf(penalty)
    }
}

/// Allowed continuation tokens and whether the hypothesis may finish here.
fn expansions(
    ix: &FmIndex,
    vocab: &Vocab,
    view: View,
    iv: Interval,
    len: usize,
    max_len: usize,
) -> (Vec<TokenId>, bool) {
    let sp = vocab.specials();
    let succ = ix.successors_of(iv);
    let can_finish = len > 0
        && match view {
            View::Substring => true,
            View::Title | View::PseudoQuery => succ.iter().any(|&(t, _)| t == sp.sep),
        };
    if len >= max_len {
        return (Vec::new(), can_finish);
    }
    let cont = succ
        .into_iter()
        .map(|(t, _)| t)
        .filter(|&t| t != sp.sep && !sp.is_marker(t) && t != sp.eos && t != sp.bos)
        .collect();
    (cont, can_finish)
}

/// Beam search whose every hypothesis is a string present in the index under `view`.
pub fn constrained_beam_search(
    m: &SeqModel,
    ix: &FmIndex,
    vocab: &Vocab,
    query: &[TokenId],
    view: View,
    cfg: &DecodeConfig,
) -> Result<Vec<ScoredIdentifier>> {
    let b = cfg.beam.max(1);
    let max_len = cfg.max_len.max(1);
    let eos = vocab.specials().eos;
    let marker = view.marker(vocab);
    let start_iv = match view {
        View::Substring => ix.full_interval(),
        View::Title | View::PseudoQuery => ix.interval(&[marker]),
    };
    if start_iv.is_empty() {
        return Ok(Vec::new());
    }
    let mut live = vec![Live {
        tokens: Vec::new(),
        logprob: 0.0,
        state: m.start(query, marker)?,
        interval: start_iv,
    }];
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    let mut finished_scores: Vec<f64> = Vec::new();

    while !live.is_empty() {
        let mut cands = Vec::new();
        for (i, h) in live.iter().enumerate() {
            let (cont, can_finish) = expansions(ix, vocab, view, h.interval, h.tokens.len(), max_len);
            if can_finish {
                let mut key = h.tokens.clone();
                key.push(eos);
                let lp = h.logprob + h.state.logprobs[eos as usize];
                cands.push(Candidate {
                    parent: i,
                    mv: Move::Finish,
                    score: normalized(lp, key.len(), cfg.length_penalty),
                    key,
                });
            }
            for t in cont {
                let mut key = h.tokens.clone();
                key.push(t);
                cands.push(Candidate {
                    parent: i,
                    mv: Move::Extend(t),
                    score: h.logprob + h.state.logprobs[t as usize],
                    key,
                });
            }
        }
        cands.sort_by(|a, b| score_order(a.score, &a.key, b.score, &b.key));
        cands.truncate(b);

        let mut next = Vec::new();
        for c in cands {
            let h = &live[c.parent];
            match c.mv {
                Move::Finish => {
                    finished_scores.push(c.score);
                    finished.push(BeamHypothesis {
                        tokens: h.tokens.clone(),
                        logprob: h.logprob + h.state.logprobs[eos as usize],
                        finished: true,
                    });
                }
                Move::Extend(t) => next.push(Live {
                    logprob: c.score,
                    state: m.step(&h.state, t),
                    interval: ix.extend(h.interval, t),
                    tokens: c.key,
                }),
            }
        }
        live = next;

        // Raw log-probabilities only decrease, so once `b` finished hypotheses
        // beat every live one nothing live can enter the result.
        if cfg.length_penalty == 0.0 && finished_scores.len() >= b && !live.is_empty() {
            let mut fs = finished_scores.clone();
            fs.sort_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
            let best_live = live.iter().map(|h| h.logprob).fold(f64::NEG_INFINITY, f64::max);
            if best_live < fs[b - 1] {
                break;
            }
        }
    }

    let mut out: Vec<ScoredIdentifier> = finished
        .into_iter()
        .zip(finished_scores)
        .map(|(h, score)| ScoredIdentifier {
            view,
            text: vocab.decode(&h.tokens),
            tokens: h.tokens,
            score,
        })
        .collect();
    out.sort_by(|a, b| score_order(a.score, &a.tokens, b.score, &b.tokens));
    out.truncate(b);
    Ok(out)
}

/// Per-view beams over `cfg.views`, deduplicated on `(view, text)`.
pub fn generate_all_views(
    m: &SeqModel,
    ix: &FmIndex,
    vocab: &Vocab,
    query: &[TokenId],
    cfg: &DecodeConfig,
) -> Result<Vec<ScoredIdentifier>> {
    let mut out: Vec<ScoredIdentifier> = Vec::new();
    let mut seen: BTreeMap<(View, String), usize> = BTreeMap::new();
    for &view in &cfg.views {
        for id in constrained_beam_search(m, ix, vocab, query, view, cfg)? {
            dedup_push(&mut out, &mut seen, id);
        }
    }
    Ok(out)
}

pub(crate) fn dedup_push(
    out: &mut Vec<ScoredIdentifier>,
    seen: &mut BTreeMap<(View, String), usize>,
    id: ScoredIdentifier,
) {
    match seen.get(&(id.view, id.text.clone())) {
        Some(&i) => {
            if id.score > out[i].score {
                out[i] = id;
            }
        }
        None => {
            seen.insert((id.view, id.text.clone()), out.len());
            out.push(id);
        }
    }
}

/// Deduplicates identifiers on `(view, text)`, keeping the highest score and first position.
pub fn dedup_identifiers(ids: Vec<ScoredIdentifier>) -> Vec<ScoredIdentifier> {
    let mut out = Vec::new();
    let mut seen = BTreeMap::new();
    for id in ids {
        dedup_push(&mut out, &mut seen, id);
    }
    out
}
