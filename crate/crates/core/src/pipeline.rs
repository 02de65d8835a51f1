//! Experiment orchestration: datasets, the generation phase, the rank phase
//! and the loss-variant grid.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::corpus::{load_corpus, load_qrels, load_queries, make_gen_samples, CorpusStore, GenSample, Passage, Qrels, Query};
use crate::error::{Error, Result};
use crate::fmindex::{build_index, FmIndex};
use crate::metrics::EvalResult;
use crate::ranker::{evaluate_model, fit_sample, train_ltr, LossConfig, MetricSnapshot, QuerySet, RankedList, TrainReport};
use crate::seqmodel::{apply_update, gen_loss_and_grad, OptimState, SeqModel};
use crate::synth;
use crate::vocab::{build_vocab, Vocab};

#[derive(Debug, Clone)]
pub struct Dataset {
    pub store: CorpusStore,
    pub vocab: Vocab,
    pub index: FmIndex,
    pub train: Vec<Query>,
    pub train_qrels: Qrels,
    pub heldout: Vec<Query>,
    pub heldout_qrels: Qrels,
}

impl Dataset {
    /// Builds the vocabulary (corpus plus query text) and the index.
    pub fn from_parts(
        store: CorpusStore,
        train: Vec<Query>,
        train_qrels: Qrels,
        heldout: Vec<Query>,
        heldout_qrels: Qrels,
        cfg: &ExperimentConfig,
    ) -> Result<Self> {
        let texts = train.iter().chain(&heldout).map(|q| q.text.as_str());
        let vocab = build_vocab(&store, texts, &cfg.vocab)?;
        let index = build_index(&store, &vocab, &cfg.sample, &cfg.index)?;
        Ok(Self {
            store,
            vocab,
            index,
            train,
            train_qrels,
            heldout,
            heldout_qrels,
        })
    }

    pub fn from_synth(cfg: &ExperimentConfig) -> Result<Self> {
        let b = synth::generate(&cfg.synth)?;
        Self::from_parts(b.store, b.train, b.train_qrels, b.heldout, b.heldout_qrels, cfg)
    }

    /// Loads corpus and query files named in `cfg.paths`; held-out files are optional.
    pub fn from_paths(cfg: &ExperimentConfig) -> Result<Self> {
        let (store, train, train_qrels, heldout, heldout_qrels) = load_files(cfg)?;
        Self::from_parts(store, train, train_qrels, heldout, heldout_qrels, cfg)
    }

    /// Like [`Dataset::from_paths`], but reuses a saved vocabulary and index when both exist.
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let (vp, ip) = (cfg.paths.vocab_path(), cfg.paths.index_path());
        if !(vp.exists() && ip.exists()) {
            return Self::from_paths(cfg);
        }
        let (store, train, train_qrels, heldout, heldout_qrels) = load_files(cfg)?;
        let vocab = Vocab::load(&vp)?;
        let index = FmIndex::load(&ip, &vocab)?;
        if index.passage_ids().len() != store.len() {
            return Err(Error::format("index", "passage count differs from the corpus; rebuild the index"));
        }
        Ok(Self {
            store,
            vocab,
            index,
            train,
            train_qrels,
            heldout,
            heldout_qrels,
        })
    }

    pub fn train_set(&self) -> QuerySet<'_> {
        QuerySet {
            store: &self.store,
            queries: &self.train,
            qrels: &self.train_qrels,
        }
    }

    pub fn heldout_set(&self) -> Option<QuerySet<'_>> {
        (!self.heldout.is_empty()).then(|| QuerySet {
            store: &self.store,
            queries: &self.heldout,
            qrels: &self.heldout_qrels,
        })
    }
}

type Files = (CorpusStore, Vec<Query>, Qrels, Vec<Query>, Qrels);

fn load_files(cfg: &ExperimentConfig) -> Result<Files> {
    let p = &cfg.paths;
    let store = load_corpus(&required(&p.corpus, "paths.corpus")?)?;
    let train = load_queries(&required(&p.train_queries, "paths.train_queries")?)?;
    let train_qrels = load_qrels(&required(&p.train_qrels, "paths.train_qrels")?)?;
    let (heldout, heldout_qrels) = if p.heldout_queries.as_os_str().is_empty() {
        (Vec::new(), Qrels::default())
    } else {
        (
            load_queries(&p.heldout_queries)?,
            load_qrels(&required(&p.heldout_qrels, "paths.heldout_qrels")?)?,
        )
    };
    Ok((store, train, train_qrels, heldout, heldout_qrels))
}

fn required(p: &Path, key: &str) -> Result<std::path::PathBuf> {
    if p.as_os_str().is_empty() {
        Err(Error::Config(format!("`{key}` is not set")))
    } else {
        Ok(p.to_path_buf())
    }
}

pub fn init_model(ds: &Dataset, cfg: &ExperimentConfig) -> Result<SeqModel> {
    SeqModel::for_vocab(cfg.model_config(ds.vocab.len()), &ds.vocab)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenEpoch {
    pub epoch: usize,
    pub mean_loss: f64,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GenReport {
    pub epochs: Vec<GenEpoch>,
}

/// Fresh identifier samples for every (train query, positive) pair, plus
/// one pseudo-query pair per passage when `index_pairs` is set.
pub fn epoch_samples(ds: &Dataset, m: &SeqModel, cfg: &ExperimentConfig, rng: &mut ChaCha8Rng) -> Result<Vec<GenSample>> {
    let mut pairs: Vec<(&str, &Passage)> = Vec::new();
    for q in &ds.train {
        for pid in ds.train_qrels.positives(&q.qid) {
            let p = ds
                .store
                .lookup(pid)
                .ok_or_else(|| Error::UnknownPassage(pid.to_string()))?;
            pairs.push((q.text.as_str(), p));
        }
    }
    if cfg.generate.index_pairs {
        for p in ds.store.passages() {
            if let Some(pq) = p.pseudo_queries.choose(rng) {
                pairs.push((pq.as_str(), p));
            }
        }
    }
    let decode = cfg.decode_config();
    let mut out = Vec::new();
    for (text, p) in pairs {
        for s in make_gen_samples(text, p, rng, &cfg.sample, &ds.vocab)? {
            if decode.views.contains(&s.view) {
                out.push(fit_sample(s, m, &ds.vocab, decode.max_len));
            }
        }
    }
    Ok(out)
}

/// Learning-to-generate: minibatch Adam on the generation loss, with a
/// per-epoch linear learning-rate decay.
pub fn train_generate(mut m: SeqModel, ds: &Dataset, cfg: &ExperimentConfig) -> Result<(SeqModel, OptimState, GenReport)> {
    let g = &cfg.generate;
    let mut optim = OptimState::new(m.num_params(), g.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6765_6e65);
    let mut report = GenReport::default();
    let decay_epochs = g.epochs.saturating_sub(1).max(1) as f64;
    for epoch in 1..=g.epochs {
        let frac = (epoch - 1) as f64 / decay_epochs;
        optim.lr = g.lr * (1.0 - frac * (1.0 - g.final_lr_scale));
        let mut samples = epoch_samples(ds, &m, cfg, &mut rng)?;
        if samples.is_empty() {
            return Err(Error::NoUsableQueries("no (query, positive) pairs yield training samples".into()));
        }
        samples.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in samples.chunks(g.batch_size) {
            let (loss, grad) = gen_loss_and_grad(&m, batch)?;
            apply_update(&mut m, &mut optim, &grad)?;
            total += loss * batch.len() as f64;
        }
        report.epochs.push(GenEpoch {
            epoch,
            mean_loss: total / samples.len() as f64,
            samples: samples.len(),
        });
    }
    Ok((m, optim, report))
}

pub fn train_rank(m: SeqModel, ds: &Dataset, cfg: &ExperimentConfig) -> Result<(SeqModel, TrainReport)> {
    train_ltr(
        m,
        &ds.index,
        &ds.vocab,
        ds.train_set(),
        ds.heldout_set(),
        &cfg.decode_config(),
        &cfg.sample,
        &cfg.ltr_config(),
    )
}

pub fn evaluate_on(m: &SeqModel, ds: &Dataset, set: QuerySet<'_>, cfg: &ExperimentConfig) -> Result<(Vec<RankedList>, EvalResult)> {
    evaluate_model(m, &ds.index, &ds.vocab, set, &cfg.decode_config(), &cfg.rank.loss)
}

/// Named loss-flag variants of the grid.
pub fn ablation_variants(base: &LossConfig) -> Vec<(&'static str, LossConfig)> {
    let with = |rank1: bool, rank2: bool, gen: bool, listwise: bool| LossConfig {
        rank1,
        rank2,
        gen,
        listwise,
        ..base.clone()
    };
    vec![
        ("full", with(true, true, true, false)),
        ("w/o rank", with(false, false, true, false)),
        ("w/o gen", with(true, true, false, false)),
        ("w/o rank1", with(false, true, true, false)),
        ("w/o rank2", with(true, false, true, false)),
        ("listwise", with(false, false, true, true)),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub metrics: MetricSnapshot,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub baseline: MetricSnapshot,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "{:<12} {:>8} {:>8} {:>8} {:>8} {:>6} {:>10}\n",
            "variant", "hits@1", "hits@5", "hits@20", "mrr@10", "top5", "loss"
        );
        let line = |name: &str, m: &MetricSnapshot, loss: Option<f64>| {
            format!(
                "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>6} {:>10}\n",
                name,
                m.hits1,
                m.hits5,
                m.hits20,
                m.mrr10,
                m.positives_top5,
                loss.map_or("-".to_string(), |l| format!("{l:.4}"))
            )
        };
        s.push_str(&line("pre-rank", &self.baseline, None));
        for r in &self.rows {
            s.push_str(&line(&r.name, &r.metrics, Some(r.final_loss)));
        }
        s
    }
}

/// Runs the rank phase once per variant from the same generation-phase model.
pub fn ablate(m: &SeqModel, ds: &Dataset, cfg: &ExperimentConfig) -> Result<AblationTable> {
    let set = ds
        .heldout_set()
        .ok_or_else(|| Error::Config("the loss-variant grid needs held-out queries".into()))?;
    let (_, base) = evaluate_on(m, ds, set, cfg)?;
    let mut rows = Vec::new();
    for (name, loss) in ablation_variants(&cfg.rank.loss) {
        let mut c = cfg.clone();
        c.rank.loss = loss;
        let (trained, report) = train_rank(m.clone(), ds, &c)?;
        let (_, e) = evaluate_on(&trained, ds, set, &c)?;
        rows.push(AblationRow {
            name: name.to_string(),
            metrics: MetricSnapshot::from(&e),
            final_loss: report.epochs.last().map_or(0.0, |r| r.mean_loss),
        });
    }
    Ok(AblationTable {
        baseline: MetricSnapshot::from(&base),
        rows,
    })
}
