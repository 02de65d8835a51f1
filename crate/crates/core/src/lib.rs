pub mod config;
pub mod corpus;
pub mod decoder;
pub mod error;
pub mod fmindex;
pub mod metrics;
pub mod pipeline;
pub mod ranker;
pub mod runfile;
pub mod seqmodel;
pub mod synth;
pub mod vocab;

pub use config::{BaseModel, ExperimentConfig, Mode};
pub use corpus::{CorpusStore, GenSample, Identifier, Passage, Qrels, Query, SampleConfig, View};
pub use decoder::{constrained_beam_search, generate_all_views, DecodeConfig, ScoredIdentifier};
pub use error::{Error, Result};
pub use fmindex::{build_index, FmIndex, IndexConfig};
pub use metrics::{evaluate, EvalResult};
pub use ranker::{
    aggregate_scores, retrieve, train_ltr, IdentifierScoring, LossConfig, LtrConfig, QuerySet, RankedList,
    TrainReport,
};
pub use pipeline::Dataset;
pub use runfile::Run;
pub use seqmodel::{ModelConfig, OptimState, SeqModel};
pub use synth::{SynthBenchmark, SynthConfig};
pub use vocab::{build_vocab, Granularity, TokenId, Vocab, VocabConfig};
