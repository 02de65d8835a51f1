//! Small autoregressive sequence model with exact gradients.
//!
//! The model is decoder-only: it reads `BOS query.. SEP marker` and then
//! predicts the identifier tokens one by one. The context network is a single
//! GRU layer followed by a softmax output projection. Backpropagation through
//! time is written out by hand; `tests/gradients.rs` checks it against
//! central finite differences.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::GenSample;
use crate::error::{Error, PathContext, Result};
use crate::vocab::{TokenId, Vocab};

const MAGIC: &[u8; 8] = b"GRCKPT\0\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    #[default]
    Gru,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub arch: Arch,
    /// Longest input the model accepts: `1 + |query| + 2 + |target|`.
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            embed_dim: 32,
            hidden_dim: 64,
            arch: Arch::Gru,
            max_seq_len: 256,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(format!(
                "model dimensions must be positive (vocab {}, embed {}, hidden {})",
                self.vocab_size, self.embed_dim, self.hidden_dim
            )));
        }
        if self.max_seq_len < 4 {
            return Err(Error::Config("max_seq_len must be at least 4".into()));
        }
        Ok(())
    }
}

/// Offsets of each parameter block inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Layout {
    emb: usize,
    wz: usize,
    wr: usize,
    wn: usize,
    uz: usize,
    ur: usize,
    un: usize,
    bz: usize,
    br: usize,
    bn: usize,
    wo: usize,
    bo: usize,
    total: usize,
}

impl Layout {
    fn new(v: usize, e: usize, h: usize) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let o = at;
            at += n;
            o
        };
        let emb = take(v * e);
        let wz = take(e * h);
        let wr = take(e * h);
        let wn = take(e * h);
        let uz = take(h * h);
        let ur = take(h * h);
        let un = take(h * h);
        let bz = take(h);
        let br = take(h);
        let bn = take(h);
        let wo = take(h * v);
        let bo = take(v);
        Self {
            emb,
            wz,
            wr,
            wn,
            uz,
            ur,
            un,
            bz,
            br,
            bn,
            wo,
            bo,
            total: at,
        }
    }
}

/// Named parameter blocks, in storage order.
pub const BLOCKS: [&str; 12] = [
    "embedding", "w_z", "w_r", "w_n", "u_z", "u_r", "u_n", "b_z", "b_r", "b_n", "out_w", "out_b",
];

#[derive(Debug, Clone, PartialEq)]
pub struct SeqModel {
    cfg: ModelConfig,
    layout: Layout,
    params: Vec<f64>,
}

/// Teacher-forced log-likelihood of a target sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqScore {
    pub total: f64,
    pub per_token: Vec<f64>,
}

/// Hidden state and next-token log-distribution during incremental decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeState {
    pub hidden: Vec<f64>,
    pub logprobs: Vec<f64>,
}

struct StepCache {
    token: TokenId,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    n: Vec<f64>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `out[j] += Σ_i x[i] · w[i * cols + j]`
#[inline]
fn matvec_add(x: &[f64], w: &[f64], cols: usize, out: &mut [f64]) {
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * cols..(i + 1) * cols];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xi * wv;
        }
    }
}

/// `dx[i] += Σ_j w[i * cols + j] · d[j]` and `dw[i * cols + j] += x[i] · d[j]`
#[inline]
fn matvec_backward(x: &[f64], w: &[f64], d: &[f64], cols: usize, dx: Option<&mut [f64]>, dw: &mut [f64]) {
    for (i, &xi) in x.iter().enumerate() {
        if xi != 0.0 {
            let drow = &mut dw[i * cols..(i + 1) * cols];
            for (g, &dj) in drow.iter_mut().zip(d) {
                *g += xi * dj;
            }
        }
    }
    if let Some(dx) = dx {
        for (i, dxi) in dx.iter_mut().enumerate() {
            let row = &w[i * cols..(i + 1) * cols];
            *dxi += row.iter().zip(d).map(|(a, b)| a * b).sum::<f64>();
        }
    }
}

/// Log-softmax with max subtraction.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

impl SeqModel {
    /// Deterministic initialization: weights uniform in `±0.1/√fan_in`, biases zero.
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (v, e, h) = (cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim);
        let layout = Layout::new(v, e, h);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut fill = |start: usize, len: usize, fan_in: usize| {
            let a = 0.1 / (fan_in as f64).sqrt();
            for p in &mut params[start..start + len] {
                *p = rng.gen_range(-a..a);
            }
        };
        fill(layout.emb, v * e, 1);
        fill(layout.wz, e * h, e);
        fill(layout.wr, e * h, e);
        fill(layout.wn, e * h, e);
        fill(layout.uz, h * h, h);
        fill(layout.ur, h * h, h);
        fill(layout.un, h * h, h);
        fill(layout.wo, h * v, h);
        Ok(Self {
            cfg,
            layout,
            params,
        })
    }

    /// Initializes a model for `vocab`, rejecting a config sized for another vocabulary.
    pub fn for_vocab(cfg: ModelConfig, vocab: &Vocab) -> Result<Self> {
        if cfg.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "model vocab_size {} does not match vocabulary size {}",
                cfg.vocab_size,
                vocab.len()
            )));
        }
        Self::new(cfg)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// `(name, offset, len)` for every parameter block.
    pub fn blocks(&self) -> Vec<(&'static str, usize, usize)> {
        let l = &self.layout;
        let starts = [l.emb, l.wz, l.wr, l.wn, l.uz, l.ur, l.un, l.bz, l.br, l.bn, l.wo, l.bo, l.total];
        BLOCKS
            .iter()
            .enumerate()
            .map(|(i, &name)| (name, starts[i], starts[i + 1] - starts[i]))
            .collect()
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let (_, off, len) = self.blocks().into_iter().find(|b| b.0 == name)?;
        Some(&mut self.params[off..off + len])
    }

    fn check_tokens(&self, toks: &[TokenId]) -> Result<()> {
        let v = self.cfg.vocab_size;
        match toks.iter().find(|&&t| t as usize >= v) {
            Some(&t) => Err(Error::OutOfVocab { token: t, size: v }),
            None => Ok(()),
        }
    }

    /// Model input up to and including the view marker.
    fn context(&self, query: &[TokenId], prefix: TokenId, bos: TokenId, sep: TokenId) -> Vec<TokenId> {
        let mut ctx = Vec::with_capacity(query.len() + 3);
        ctx.push(bos);
        ctx.extend_from_slice(query);
        ctx.push(sep);
        ctx.push(prefix);
        ctx
    }

    // The special ids sit right after the content tokens, in a fixed order.
    fn bos_sep(&self) -> (TokenId, TokenId) {
        let base = (self.cfg.vocab_size - crate::vocab::SPECIAL_NAMES.len()) as TokenId;
        (base, base + 2)
    }

    fn validate_input(&self, query: &[TokenId], prefix: TokenId, target: &[TokenId]) -> Result<()> {
        if self.cfg.vocab_size < crate::vocab::SPECIAL_NAMES.len() {
            return Err(Error::Config("vocabulary too small to hold special tokens".into()));
        }
        self.check_tokens(query)?;
        self.check_tokens(&[prefix])?;
        self.check_tokens(target)?;
        let len = query.len() + 3 + target.len();
        if len > self.cfg.max_seq_len {
            return Err(Error::TooLong {
                len,
                max: self.cfg.max_seq_len,
            });
        }
        Ok(())
    }

    fn gru_step(&self, h_prev: &[f64], token: TokenId) -> StepCache {
        let (e, hd) = (self.cfg.embed_dim, self.cfg.hidden_dim);
        let l = &self.layout;
        let p = &self.params;
        let x = &p[l.emb + token as usize * e..l.emb + (token as usize + 1) * e];
        let mut az = p[l.bz..l.bz + hd].to_vec();
        let mut ar = p[l.br..l.br + hd].to_vec();
        let mut an = p[l.bn..l.bn + hd].to_vec();
        matvec_add(x, &p[l.wz..l.wz + e * hd], hd, &mut az);
        matvec_add(x, &p[l.wr..l.wr + e * hd], hd, &mut ar);
        matvec_add(x, &p[l.wn..l.wn + e * hd], hd, &mut an);
        matvec_add(h_prev, &p[l.uz..l.uz + hd * hd], hd, &mut az);
        matvec_add(h_prev, &p[l.ur..l.ur + hd * hd], hd, &mut ar);
        let z: Vec<f64> = az.iter().map(|&a| sigmoid(a)).collect();
        let r: Vec<f64> = ar.iter().map(|&a| sigmoid(a)).collect();
        let rh: Vec<f64> = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
        matvec_add(&rh, &p[l.un..l.un + hd * hd], hd, &mut an);
        let n: Vec<f64> = an.iter().map(|&a| a.tanh()).collect();
        StepCache {
            token,
            h_prev: h_prev.to_vec(),
            z,
            r,
            n,
        }
    }

    fn next_hidden(c: &StepCache) -> Vec<f64> {
        c.z.iter()
            .zip(&c.n)
            .zip(&c.h_prev)
            .map(|((&z, &n), &h)| (1.0 - z) * n + z * h)
            .collect()
    }

    fn output_logprobs(&self, h: &[f64]) -> Vec<f64> {
        let (v, l) = (self.cfg.vocab_size, &self.layout);
        let mut logits = self.params[l.bo..l.bo + v].to_vec();
        matvec_add(h, &self.params[l.wo..l.wo + h.len() * v], v, &mut logits);
        log_softmax(&logits)
    }

    /// Runs the context and returns the distribution over the first identifier token.
    pub fn start(&self, query: &[TokenId], prefix: TokenId) -> Result<DecodeState> {
        self.validate_input(query, prefix, &[])?;
        let (bos, sep) = self.bos_sep();
        let mut h = vec![0.0; self.cfg.hidden_dim];
        for t in self.context(query, prefix, bos, sep) {
            h = Self::next_hidden(&self.gru_step(&h, t));
        }
        let logprobs = self.output_logprobs(&h);
        Ok(DecodeState { hidden: h, logprobs })
    }

    /// Feeds `token` and returns the distribution over the next one.
    pub fn step(&self, state: &DecodeState, token: TokenId) -> DecodeState {
        let h = Self::next_hidden(&self.gru_step(&state.hidden, token));
        let logprobs = self.output_logprobs(&h);
        DecodeState { hidden: h, logprobs }
    }

    /// Teacher-forced `log p(target_j | query, marker, target_<j)` for every j.
    pub fn score_sequence(&self, query: &[TokenId], prefix: TokenId, target: &[TokenId]) -> Result<SeqScore> {
        self.validate_input(query, prefix, target)?;
        if target.is_empty() {
            return Ok(SeqScore {
                total: 0.0,
                per_token: vec![],
            });
        }
        let mut state = self.start(query, prefix)?;
        let mut per_token = Vec::with_capacity(target.len());
        for (j, &t) in target.iter().enumerate() {
            per_token.push(state.logprobs[t as usize]);
            if j + 1 < target.len() {
                state = self.step(&state, t);
            }
        }
        Ok(SeqScore {
            total: per_token.iter().sum(),
            per_token,
        })
    }

    /// Log-distributions at every position after the view marker, for the given target prefix.
    pub fn position_logprobs(&self, query: &[TokenId], prefix: TokenId, target: &[TokenId]) -> Result<Vec<Vec<f64>>> {
        self.validate_input(query, prefix, target)?;
        let mut state = self.start(query, prefix)?;
        let mut out = vec![state.logprobs.clone()];
        for &t in target {
            state = self.step(&state, t);
            out.push(state.logprobs.clone());
        }
        Ok(out)
    }

    /// Adds `weight · ∂(Σ_j log p(target_j))/∂θ` into `grad` and returns the log-likelihood.
    pub fn accumulate_grad(
        &self,
        query: &[TokenId],
        prefix: TokenId,
        target: &[TokenId],
        weight: f64,
        grad: &mut [f64],
    ) -> Result<f64> {
        self.validate_input(query, prefix, target)?;
        if grad.len() != self.layout.total {
            return Err(Error::Shape {
                expected: self.layout.total,
                found: grad.len(),
            });
        }
        if target.is_empty() {
            return Ok(0.0);
        }
        let (e, hd, v) = (self.cfg.embed_dim, self.cfg.hidden_dim, self.cfg.vocab_size);
        let l = self.layout;
        let p = &self.params;
        let (bos, sep) = self.bos_sep();
        let mut inputs = self.context(query, prefix, bos, sep);
        let first_pred = inputs.len() - 1;
        inputs.extend_from_slice(&target[..target.len() - 1]);

        let mut caches = Vec::with_capacity(inputs.len());
        let mut hiddens = Vec::with_capacity(inputs.len());
        let mut h = vec![0.0; hd];
        for &t in &inputs {
            let c = self.gru_step(&h, t);
            h = Self::next_hidden(&c);
            caches.push(c);
            hiddens.push(h.clone());
        }

        // dlogits at each prediction step, plus the log-likelihood.
        let mut total = 0.0;
        let mut dh_out: Vec<Vec<f64>> = vec![vec![0.0; hd]; inputs.len()];
        for (j, &y) in target.iter().enumerate() {
            let step = first_pred + j;
            let lp = self.output_logprobs(&hiddens[step]);
            total += lp[y as usize];
            let mut d: Vec<f64> = lp.iter().map(|&x| -weight * x.exp()).collect();
            d[y as usize] += weight;
            for (g, &dv) in grad[l.bo..l.bo + v].iter_mut().zip(&d) {
                *g += dv;
            }
            matvec_backward(
                &hiddens[step],
                &p[l.wo..l.wo + hd * v],
                &d,
                v,
                Some(&mut dh_out[step]),
                &mut grad[l.wo..l.wo + hd * v],
            );
        }

        let mut dh_next = vec![0.0; hd];
        for step in (0..inputs.len()).rev() {
            let c = &caches[step];
            let dh: Vec<f64> = dh_next.iter().zip(&dh_out[step]).map(|(a, b)| a + b).collect();
            let mut dh_prev = vec![0.0; hd];
            let mut da_z = vec![0.0; hd];
            let mut da_n = vec![0.0; hd];
            for k in 0..hd {
                let dn = dh[k] * (1.0 - c.z[k]);
                let dz = dh[k] * (c.h_prev[k] - c.n[k]);
                dh_prev[k] += dh[k] * c.z[k];
                da_n[k] = dn * (1.0 - c.n[k] * c.n[k]);
                da_z[k] = dz * c.z[k] * (1.0 - c.z[k]);
            }
            let rh: Vec<f64> = c.r.iter().zip(&c.h_prev).map(|(a, b)| a * b).collect();
            let mut d_rh = vec![0.0; hd];
            matvec_backward(&rh, &p[l.un..l.un + hd * hd], &da_n, hd, Some(&mut d_rh), &mut grad[l.un..l.un + hd * hd]);
            let mut da_r = vec![0.0; hd];
            for k in 0..hd {
                dh_prev[k] += d_rh[k] * c.r[k];
                let dr = d_rh[k] * c.h_prev[k];
                da_r[k] = dr * c.r[k] * (1.0 - c.r[k]);
            }
            matvec_backward(&c.h_prev, &p[l.uz..l.uz + hd * hd], &da_z, hd, Some(&mut dh_prev), &mut grad[l.uz..l.uz + hd * hd]);
            matvec_backward(&c.h_prev, &p[l.ur..l.ur + hd * hd], &da_r, hd, Some(&mut dh_prev), &mut grad[l.ur..l.ur + hd * hd]);
            for k in 0..hd {
                grad[l.bz + k] += da_z[k];
                grad[l.br + k] += da_r[k];
                grad[l.bn + k] += da_n[k];
            }
            let tok = c.token as usize;
            let x = &p[l.emb + tok * e..l.emb + (tok + 1) * e];
            let mut dx = vec![0.0; e];
            matvec_backward(x, &p[l.wz..l.wz + e * hd], &da_z, hd, Some(&mut dx), &mut grad[l.wz..l.wz + e * hd]);
            matvec_backward(x, &p[l.wr..l.wr + e * hd], &da_r, hd, Some(&mut dx), &mut grad[l.wr..l.wr + e * hd]);
            matvec_backward(x, &p[l.wn..l.wn + e * hd], &da_n, hd, Some(&mut dx), &mut grad[l.wn..l.wn + e * hd]);
            for (g, d) in grad[l.emb + tok * e..l.emb + (tok + 1) * e].iter_mut().zip(&dx) {
                *g += d;
            }
            dh_next = dh_prev;
        }
        Ok(total)
    }

    pub fn save(&self, path: &Path, vocab_hash: u64, optim: Option<&OptimState>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).at(path)?);
        self.write_to(&mut f, vocab_hash, optim)?;
        f.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W, vocab_hash: u64, optim: Option<&OptimState>) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let cfg = serde_json::to_vec(&self.cfg).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        w.write_all(&(cfg.len() as u32).to_le_bytes())?;
        w.write_all(&cfg)?;
        w.write_all(&vocab_hash.to_le_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        write_f64s(w, &self.params)?;
        match optim {
            None => w.write_all(&[0u8])?,
            Some(o) => {
                w.write_all(&[1u8])?;
                w.write_all(&o.step.to_le_bytes())?;
                for x in [o.lr, o.beta1, o.beta2, o.eps] {
                    w.write_all(&x.to_le_bytes())?;
                }
                write_f64s(w, &o.m)?;
                write_f64s(w, &o.v)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path, vocab: &Vocab) -> Result<(Self, Option<OptimState>)> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path).at(path)?);
        Self::read_from(&mut f, vocab)
    }

    pub fn read_from<R: Read>(r: &mut R, vocab: &Vocab) -> Result<(Self, Option<OptimState>)> {
        let bad = |m: &str| Error::format("checkpoint", m);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic bytes"));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != VERSION {
            return Err(bad("unsupported version"));
        }
        r.read_exact(&mut b4)?;
        let mut cfg_raw = vec![0u8; u32::from_le_bytes(b4) as usize];
        r.read_exact(&mut cfg_raw)?;
        let cfg: ModelConfig = serde_json::from_slice(&cfg_raw).map_err(|e| bad(&e.to_string()))?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let hash = u64::from_le_bytes(b8);
        if hash != vocab.hash() {
            return Err(Error::VocabMismatch {
                expected: vocab.hash(),
                found: hash,
            });
        }
        r.read_exact(&mut b8)?;
        let n = u64::from_le_bytes(b8) as usize;
        let mut model = Self::for_vocab(cfg, vocab)?;
        if n != model.params.len() {
            return Err(Error::Shape {
                expected: model.params.len(),
                found: n,
            });
        }
        model.params = read_f64s(r, n)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let optim = match flag[0] {
            0 => None,
            1 => {
                r.read_exact(&mut b8)?;
                let step = u64::from_le_bytes(b8);
                let h = read_f64s(r, 4)?;
                Some(OptimState {
                    step,
                    lr: h[0],
                    beta1: h[1],
                    beta2: h[2],
                    eps: h[3],
                    m: read_f64s(r, n)?,
                    v: read_f64s(r, n)?,
                })
            }
            _ => return Err(bad("unknown optimizer flag")),
        };
        Ok((model, optim))
    }
}

fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    let bytes: Vec<u8> = xs.iter().flat_map(|x| x.to_le_bytes()).collect();
    w.write_all(&bytes)?;
    Ok(())
}

fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Mean teacher-forced negative log-likelihood over `batch` and its exact gradient.
pub fn gen_loss_and_grad(m: &SeqModel, batch: &[GenSample]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Config("generation batch is empty".into()));
    }
    let w = -1.0 / batch.len() as f64;
    let parts: Vec<Result<(f64, Vec<f64>)>> = batch
        .par_iter()
        .map(|s| {
            let mut g = vec![0.0; m.num_params()];
            let ll = m.accumulate_grad(&s.query_tokens, s.prefix, &s.target_tokens, w, &mut g)?;
            Ok((ll, g))
        })
        .collect();
    let mut grad = vec![0.0; m.num_params()];
    let mut loss = 0.0;
    for part in parts {
        let (ll, g) = part?;
        loss += w * ll;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss, grad))
}

/// Mean negative log-likelihood of `batch`, without gradient.
pub fn gen_loss(m: &SeqModel, batch: &[GenSample]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("generation batch is empty".into()));
    }
    let mut total = 0.0;
    for s in batch {
        total += m.score_sequence(&s.query_tokens, s.prefix, &s.target_tokens)?.total;
    }
    Ok(-total / batch.len() as f64)
}

/// Adam moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimState {
    pub fn new(num_params: usize, lr: f64) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam step. A gradient with any non-finite entry is rejected untouched.
pub fn apply_update(m: &mut SeqModel, o: &mut OptimState, grad: &[f64]) -> Result<()> {
    let n = m.num_params();
    for len in [grad.len(), o.m.len(), o.v.len()] {
        if len != n {
            return Err(Error::Shape {
                expected: n,
                found: len,
            });
        }
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(i));
    }
    o.step += 1;
    let t = o.step as i32;
    let c1 = 1.0 - o.beta1.powi(t);
    let c2 = 1.0 - o.beta2.powi(t);
    for (((p, &g), mm), vv) in m.params.iter_mut().zip(grad).zip(&mut o.m).zip(&mut o.v) {
        *mm = o.beta1 * *mm + (1.0 - o.beta1) * g;
        *vv = o.beta2 * *vv + (1.0 - o.beta2) * g * g;
        let mhat = *mm / c1;
        let vhat = *vv / c2;
        *p -= o.lr * mhat / (vhat.sqrt() + o.eps);
    }
    Ok(())
}
