use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use genret::corpus::{load_queries, Query};
use genret::metrics::histogram_comparison;
use genret::pipeline::{self, Dataset};
use genret::ranker::{lists_to_run, retrieve_all, RankedList};
use genret::{evaluate, ExperimentConfig, FmIndex, Mode, Run, SeqModel, View, Vocab};

#[derive(Parser)]
#[command(name = "genret", version, about = "Generative passage retrieval with a learning-to-rank phase")]
struct Cli {
    /// TOML experiment config
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set rank.loss.margin=2.0`
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum ViewArg {
    Title,
    Substring,
    Pseudoquery,
}

impl From<ViewArg> for View {
    fn from(v: ViewArg) -> Self {
        match v {
            ViewArg::Title => View::Title,
            ViewArg::Substring => View::Substring,
            ViewArg::Pseudoquery => View::PseudoQuery,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the synthetic desk benchmark and a config pointing at it
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the vocabulary and FM-index from the configured corpus
    BuildIndex,
    /// Learning-to-generate phase
    TrainGenerate,
    /// Learning-to-rank phase, starting from the generation checkpoint
    TrainRank {
        /// Checkpoint to start from (default: the generation checkpoint)
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Retrieve passages and write a six-column run file
    Retrieve {
        #[arg(long)]
        out: PathBuf,
        /// Queries TSV (default: held-out queries, else train queries)
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Model checkpoint (default: rank checkpoint if present, else generation checkpoint)
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        beam: Option<usize>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long, default_value = "genret")]
        tag: String,
        /// Also write per-passage matched identifiers as JSON lines
        #[arg(long)]
        explain: Option<PathBuf>,
    },
    /// Score a run file against qrels
    Evaluate {
        #[arg(long)]
        run: PathBuf,
        /// Qrels file (default: held-out qrels from the config)
        #[arg(long)]
        qrels: Option<PathBuf>,
        /// Report path (default: `<run>.eval.txt`)
        #[arg(long)]
        report: Option<PathBuf>,
        /// Histogram depth (default: top_k)
        #[arg(long)]
        depth: Option<usize>,
    },
    /// Run the rank phase once per loss variant and tabulate held-out metrics
    Ablate {
        #[arg(long)]
        init: Option<PathBuf>,
    },
    /// Debug queries against the saved index
    InspectIndex {
        #[command(subcommand)]
        query: Inspect,
    },
}

#[derive(Subcommand)]
enum Inspect {
    /// Text length, vocabulary and unit counts
    Stats,
    /// Occurrences of a token pattern
    Count {
        text: String,
        #[arg(long, value_enum, default_value = "substring")]
        view: ViewArg,
    },
    /// Tokens that may follow a pattern, with counts
    Successors {
        text: String,
        #[arg(long, value_enum, default_value = "substring")]
        view: ViewArg,
    },
    /// Passages containing a pattern
    Locate {
        text: String,
        #[arg(long, value_enum, default_value = "substring")]
        view: ViewArg,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<genret::Error>() {
                Some(genret::Error::Config(_)) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut sets = cli.set.clone();
    if let Some(s) = cli.seed {
        sets.push(format!("seed={s}"));
    }
    let mode = cli.mode.map(|m| match m {
        ModeArg::Desk => Mode::Desk,
        ModeArg::Paper => Mode::Paper,
    });
    Ok(ExperimentConfig::load(cli.config.as_deref(), mode, &sets)?)
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_artifacts(cfg: &ExperimentConfig) -> anyhow::Result<(Vocab, FmIndex)> {
    let (vp, ip) = (cfg.paths.vocab_path(), cfg.paths.index_path());
    if !vp.exists() || !ip.exists() {
        bail!("no vocabulary/index at {} and {}; run build-index first", vp.display(), ip.display());
    }
    let vocab = Vocab::load(&vp)?;
    let index = FmIndex::load(&ip, &vocab)?;
    Ok((vocab, index))
}

fn load_model(path: &Path, vocab: &Vocab) -> anyhow::Result<SeqModel> {
    let (m, _) = SeqModel::load(path, vocab).with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(m)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = load_config(&cli)?;
    let out_dir = cfg.paths.out_dir();
    match cli.cmd {
        Cmd::Synth { out } => {
            let bench = genret::synth::generate(&genret::SynthConfig {
                seed: cfg.seed,
                ..cfg.synth.clone()
            })?;
            bench.write_to(&out)?;
            let mut c = cfg.clone();
            c.paths.corpus = out.join("corpus.jsonl");
            c.paths.train_queries = out.join("train.tsv");
            c.paths.train_qrels = out.join("train.qrels");
            c.paths.heldout_queries = out.join("heldout.tsv");
            c.paths.heldout_qrels = out.join("heldout.qrels");
            c.paths.out_dir = out.join("out");
            c.synth.seed = cfg.seed;
            write(&out.join("genret.toml"), &c.to_toml())?;
            println!(
                "wrote {} passages, {} train and {} held-out queries to {}",
                bench.store.len(),
                bench.train.len(),
                bench.heldout.len(),
                out.display()
            );
        }
        Cmd::BuildIndex => {
            let ds = Dataset::from_paths(&cfg).context("loading the configured corpus and queries")?;
            fs::create_dir_all(&out_dir)?;
            ds.vocab.save(&cfg.paths.vocab_path())?;
            ds.index.save(&cfg.paths.index_path())?;
            println!(
                "indexed {} passages: {} symbols, vocabulary {}",
                ds.store.len(),
                ds.index.text_len(),
                ds.vocab.len()
            );
        }
        Cmd::TrainGenerate => {
            let ds = Dataset::load(&cfg).context("loading the configured corpus, queries and index")?;
            let m = pipeline::init_model(&ds, &cfg)?;
            let (m, optim, report) = pipeline::train_generate(m, &ds, &cfg)?;
            fs::create_dir_all(&out_dir)?;
            m.save(&cfg.paths.gen_checkpoint_path(), ds.vocab.hash(), Some(&optim))?;
            write(&out_dir.join("generate_report.json"), &serde_json::to_string_pretty(&report)?)?;
            for e in &report.epochs {
                println!("epoch {} loss {:.4} samples {}", e.epoch, e.mean_loss, e.samples);
            }
        }
        Cmd::TrainRank { init } => {
            let ds = Dataset::load(&cfg).context("loading the configured corpus, queries and index")?;
            let init = init.unwrap_or_else(|| cfg.paths.gen_checkpoint_path());
            let m = load_model(&init, &ds.vocab)?;
            let eval_set = ds.heldout_set().unwrap_or_else(|| ds.train_set());
            let (_, before) = pipeline::evaluate_on(&m, &ds, eval_set, &cfg)?;
            let (m, report) = pipeline::train_rank(m, &ds, &cfg)?;
            let (_, after) = pipeline::evaluate_on(&m, &ds, eval_set, &cfg)?;
            fs::create_dir_all(&out_dir)?;
            m.save(&cfg.paths.rank_checkpoint_path(), ds.vocab.hash(), None)?;
            write(&out_dir.join("rank_report.json"), &serde_json::to_string_pretty(&report)?)?;
            write(
                &out_dir.join("rank_histogram.txt"),
                &histogram_comparison(&before.histogram, &after.histogram),
            )?;
            for e in &report.epochs {
                println!(
                    "epoch {} loss {:.4} used {} skipped {}+{}",
                    e.epoch, e.mean_loss, e.used_queries, e.skipped_no_positive, e.skipped_no_negative
                );
            }
            println!(
                "mrr@10 {:.4} -> {:.4}, positives in top 5 {} -> {}",
                before.mrr10,
                after.mrr10,
                before.positives_top5(),
                after.positives_top5()
            );
        }
        Cmd::Retrieve {
            out,
            queries,
            checkpoint,
            beam,
            top_k,
            tag,
            explain,
        } => {
            let (vocab, index) = load_artifacts(&cfg)?;
            let ckpt = checkpoint.unwrap_or_else(|| {
                let r = cfg.paths.rank_checkpoint_path();
                if r.exists() {
                    r
                } else {
                    cfg.paths.gen_checkpoint_path()
                }
            });
            let m = load_model(&ckpt, &vocab)?;
            let qpath = queries.unwrap_or_else(|| {
                if cfg.paths.heldout_queries.as_os_str().is_empty() {
                    cfg.paths.train_queries.clone()
                } else {
                    cfg.paths.heldout_queries.clone()
                }
            });
            if qpath.as_os_str().is_empty() {
                return Err(genret::Error::Config("no query file given or configured".into()).into());
            }
            let qs: Vec<Query> = load_queries(&qpath).with_context(|| format!("reading queries {}", qpath.display()))?;
            let mut decode = cfg.decode_config();
            let mut loss = cfg.rank.loss.clone();
            if let Some(b) = beam {
                decode.beam = b;
            }
            if let Some(k) = top_k {
                loss.top_k = k;
            }
            if decode.beam == 0 || loss.top_k == 0 {
                return Err(genret::Error::Config("beam and top-k must be at least 1".into()).into());
            }
            let lists = retrieve_all(&m, &index, &vocab, &qs, &decode, &loss)?;
            let run = lists_to_run(&lists, &tag);
            write(&out, &run.to_text())?;
            if let Some(path) = explain {
                write(&path, &explain_lines(&lists)?)?;
            }
            println!("wrote {} rankings to {}", lists.len(), out.display());
        }
        Cmd::Evaluate {
            run,
            qrels,
            report,
            depth,
        } => {
            let r = Run::load(&run).with_context(|| format!("reading run {}", run.display()))?;
            let qpath = qrels.unwrap_or_else(|| cfg.paths.heldout_qrels.clone());
            if qpath.as_os_str().is_empty() {
                return Err(genret::Error::Config("no qrels file given or configured".into()).into());
            }
            let q = genret::corpus::load_qrels(&qpath).with_context(|| format!("reading qrels {}", qpath.display()))?;
            let e = evaluate(&r, &q, depth.unwrap_or(cfg.rank.loss.top_k));
            let text = e.report();
            let rpath = report.unwrap_or_else(|| {
                let mut p = run.clone().into_os_string();
                p.push(".eval.txt");
                PathBuf::from(p)
            });
            write(&rpath, &text)?;
            emit(&text);
        }
        Cmd::Ablate { init } => {
            let ds = Dataset::load(&cfg).context("loading the configured corpus, queries and index")?;
            let init = init.unwrap_or_else(|| cfg.paths.gen_checkpoint_path());
            let m = load_model(&init, &ds.vocab)?;
            let table = pipeline::ablate(&m, &ds, &cfg)?;
            fs::create_dir_all(&out_dir)?;
            let text = table.to_text();
            write(&out_dir.join("ablation.txt"), &text)?;
            write(&out_dir.join("ablation.json"), &serde_json::to_string_pretty(&table)?)?;
            print!("{text}");
        }
        Cmd::InspectIndex { query } => {
            let (vocab, index) = load_artifacts(&cfg)?;
            let pattern = |text: &str, view: ViewArg| {
                let view = View::from(view);
                let toks = vocab.encode(text);
                if view == View::Substring {
                    toks
                } else {
                    std::iter::once(view.marker(&vocab)).chain(toks).collect()
                }
            };
            match query {
                Inspect::Stats => {
                    println!("symbols {}", index.text_len());
                    println!("vocabulary {}", index.vocab_size());
                    println!("passages {}", index.passage_ids().len());
                    println!("units {}", index.units().len());
                }
                Inspect::Count { text, view } => println!("{}", index.count(&pattern(&text, view))),
                Inspect::Successors { text, view } => {
                    let mut s = String::new();
                    for (t, c) in index.successors(&pattern(&text, view)) {
                        s.push_str(&format!("{}\t{c}\n", vocab.token(t).unwrap_or("?")));
                    }
                    emit(&s);
                }
                Inspect::Locate { text, view } => {
                    let mut p = pattern(&text, view);
                    if View::from(view) != View::Substring {
                        p.push(vocab.specials().sep);
                    }
                    let mut s = String::new();
                    for h in index.locate(&p) {
                        s.push_str(&format!("{}\t{}\n", h.passage_id, h.view));
                    }
                    emit(&s);
                }
            }
        }
    }
    Ok(())
}

/// Prints to stdout, tolerating a closed pipe.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn explain_lines(lists: &[RankedList]) -> anyhow::Result<String> {
    let mut s = String::new();
    for l in lists {
        for (rank, e) in l.entries.iter().enumerate() {
            let row = serde_json::json!({
                "qid": l.qid,
                "rank": rank + 1,
                "passage_id": e.passage_id,
                "score": e.score,
                "matched": e.matched,
            });
            s.push_str(&serde_json::to_string(&row)?);
            s.push('\n');
        }
    }
    Ok(s)
}
