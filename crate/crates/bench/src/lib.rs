//! Benchmark fixtures.

use genret::pipeline::init_model;
use genret::{Dataset, ExperimentConfig, Mode, SeqModel};

/// Desk-preset synthetic dataset with `passages` passages.
pub fn desk_dataset(passages: usize) -> (ExperimentConfig, Dataset) {
    let mut cfg = ExperimentConfig::preset(Mode::Desk);
    cfg.synth.passages = passages;
    cfg.synth.train_queries = cfg.synth.train_queries.min(passages);
    cfg.synth.heldout_queries = cfg.synth.heldout_queries.min(passages);
    let ds = Dataset::from_synth(&cfg).expect("synthetic dataset");
    (cfg, ds)
}

/// An untrained desk-shape model; decoding cost does not depend on training.
pub fn desk_model(cfg: &ExperimentConfig, ds: &Dataset) -> SeqModel {
    init_model(ds, cfg).expect("model")
}
