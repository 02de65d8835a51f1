#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

pub const SMALL: [&str; 9] = [
    "synth.passages=40",
    "synth.train_queries=20",
    "synth.heldout_queries=20",
    "model.embed_dim=8",
    "model.hidden_dim=16",
    "generate.epochs=3",
    "rank.epochs=2",
    "decode.beam=5",
    "decode.max_len=8",
];

pub fn genret(args: &[&str], threads: usize) -> Output {
    Command::new(env!("CARGO_BIN_EXE_genret"))
        .args(args)
        .env("RAYON_NUM_THREADS", threads.to_string())
        .output()
        .expect("spawn genret")
}

pub fn ok(args: &[&str], threads: usize) -> Output {
    let out = genret(args, threads);
    assert!(
        out.status.success(),
        "genret {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Runs synth through evaluate in `dir`; returns every produced artifact except the config.
pub fn run_pipeline(dir: &Path, seed: u64, threads: usize, ablate: bool) -> BTreeMap<String, Vec<u8>> {
    let d = dir.to_str().unwrap();
    let seed = seed.to_string();
    let mut synth = vec!["synth", "--out", d, "--seed", &seed];
    for s in SMALL {
        synth.extend(["--set", s]);
    }
    ok(&synth, threads);
    let cfg = dir.join("genret.toml");
    let cfg = cfg.to_str().unwrap();
    let run = dir.join("run.txt");
    let explain = dir.join("explain.jsonl");
    ok(&["build-index", "--config", cfg], threads);
    ok(&["train-generate", "--config", cfg], threads);
    ok(&["train-rank", "--config", cfg], threads);
    ok(
        &[
            "retrieve",
            "--config",
            cfg,
            "--out",
            run.to_str().unwrap(),
            "--explain",
            explain.to_str().unwrap(),
        ],
        threads,
    );
    ok(&["evaluate", "--config", cfg, "--run", run.to_str().unwrap()], threads);
    if ablate {
        ok(&["ablate", "--config", cfg, "--set", "rank.epochs=1"], threads);
    }
    let mut files = BTreeMap::new();
    collect(dir, dir, &mut files);
    files.remove("genret.toml");
    files
}

fn collect(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            collect(root, &p, out);
        } else {
            let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            out.insert(rel, fs::read(&p).unwrap());
        }
    }
}

/// Names of artifacts whose bytes differ between two runs.
pub fn differing(a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) -> Vec<String> {
    let names: std::collections::BTreeSet<&String> = a.keys().chain(b.keys()).collect();
    names.into_iter().filter(|n| a.get(*n) != b.get(*n)).cloned().collect()
}
