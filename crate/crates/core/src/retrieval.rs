//! Dense query/key matching and value retrieval.
//!
//! For each query location the similarity row is
//! `[1, exp(q·k_1), …, exp(q·k_N)] / C` with `C = 1 + Σ exp(q·k_j)`; entry 0 is
//! the no-match column. Three readers consume it:
//! - `Voting`: top-K candidates, each `[value ∥ query]`, pass an input bottleneck,
//!   one multi-head self-attention block whose attention never points a token at
//!   itself, an output bottleneck, and a max over candidates;
//! - `TopkMlp`: the same candidates through an independent per-token MLP, then max;
//! - `Softmax`: the row-weighted sum of all values.
//!
//! Candidate index 0 gathers a learned null value.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure, DmvError, Result};
use crate::numerics::{init_linear, normal, ParamSet, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMode {
    Voting,
    Softmax,
    TopkMlp,
}

impl RetrievalMode {
    pub const ALL: [RetrievalMode; 3] = [RetrievalMode::Voting, RetrievalMode::Softmax, RetrievalMode::TopkMlp];

    pub fn as_str(&self) -> &'static str {
        match self {
            RetrievalMode::Voting => "voting",
            RetrievalMode::Softmax => "softmax",
            RetrievalMode::TopkMlp => "topk_mlp",
        }
    }
}

impl fmt::Display for RetrievalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RetrievalMode {
    type Err = DmvError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "voting" => Ok(RetrievalMode::Voting),
            "softmax" => Ok(RetrievalMode::Softmax),
            "topk_mlp" => Ok(RetrievalMode::TopkMlp),
            other => Err(DmvError::Contract(format!(
                "unknown retrieval mode `{other}` (expected voting, softmax or topk_mlp)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub mode: RetrievalMode,
    /// Candidates per query location.
    pub k: usize,
    pub heads: usize,
    pub attn_width: usize,
    pub ffn_width: usize,
    /// Hidden width of the per-candidate MLP in `topk_mlp` mode.
    pub mlp_width: usize,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        RetrievalConfig { mode: RetrievalMode::Voting, k: 4, heads: 8, attn_width: 64, ffn_width: 128, mlp_width: 64 }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.k >= 1, "K must be at least 1, got {}", self.k);
        ensure!(self.heads >= 1 && self.attn_width % self.heads == 0, "{} heads do not divide attention width {}", self.heads, self.attn_width);
        Ok(())
    }
}

pub fn init_params(
    params: &mut ParamSet,
    cfg: &RetrievalConfig,
    key_channels: usize,
    value_channels: usize,
    rng: &mut impl Rng,
) {
    params.insert("retrieval.null", normal(&[1, value_channels], 0.1, rng));
    let tok = key_channels + value_channels;
    match cfg.mode {
        RetrievalMode::Voting => {
            let d = cfg.attn_width;
            init_linear(params, "retrieval.vote.in", tok, d, rng);
            for name in ["q", "k", "v"] {
                init_linear(params, &format!("retrieval.vote.{name}"), d, d, rng);
            }
            // Residual branches start near identity.
            params.insert("retrieval.vote.o.w", normal(&[d, d], 0.1 / (d as f64).sqrt(), rng));
            params.insert("retrieval.vote.o.b", Tensor::zeros(&[d]));
            init_linear(params, "retrieval.vote.ffn1", d, cfg.ffn_width, rng);
            params.insert("retrieval.vote.ffn2.w", normal(&[d, cfg.ffn_width], 0.1 / (cfg.ffn_width as f64).sqrt(), rng));
            params.insert("retrieval.vote.ffn2.b", Tensor::zeros(&[d]));
            init_linear(params, "retrieval.vote.out", d, value_channels, rng);
        }
        RetrievalMode::TopkMlp => {
            init_linear(params, "retrieval.mlp.l1", tok, cfg.mlp_width, rng);
            init_linear(params, "retrieval.mlp.l2", cfg.mlp_width, cfg.mlp_width, rng);
            init_linear(params, "retrieval.mlp.l3", cfg.mlp_width, value_channels, rng);
        }
        RetrievalMode::Softmax => {}
    }
}

fn linear(tape: &mut Tape, params: &ParamSet, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(&format!("{name}.w"), params.get(&format!("{name}.w"))?);
    let b = tape.param(&format!("{name}.b"), params.get(&format!("{name}.b"))?);
    tape.linear(x, w, Some(b))
}

/// Similarity rows for `queries: [L, C]` against `keys: [C, N]` → `[L, N + 1]`.
pub fn similarity_rows(tape: &mut Tape, queries: Var, keys: Var) -> Result<Var> {
    ensure!(tape.shape(keys)[1] > 0, "similarity needs at least one memory key");
    let logits = tape.matmul(queries, keys)?;
    let l = tape.shape(queries)[0];
    let zero = tape.constant(Tensor::zeros(&[l, 1]));
    let padded = tape.concat(&[zero, logits], 1)?;
    // softmax_row subtracts the row max before exponentiating.
    tape.softmax_row(padded)
}

/// Similarity row of a single query vector against key vectors.
pub fn similarity_row(query: &[f64], keys: &[Vec<f64>]) -> Result<Vec<f64>> {
    ensure!(!keys.is_empty(), "similarity needs at least one memory key");
    let c = query.len();
    ensure!(keys.iter().all(|k| k.len() == c), "key width differs from query width {c}");
    let mut tape = Tape::new();
    let q = tape.constant(Tensor::new(&[1, c], query.to_vec())?);
    let mut kt = vec![0.0; c * keys.len()];
    for (j, k) in keys.iter().enumerate() {
        for (i, v) in k.iter().enumerate() {
            kt[i * keys.len() + j] = *v;
        }
    }
    let k = tape.constant(Tensor::new(&[c, keys.len()], kt)?);
    let s = similarity_rows(&mut tape, q, k)?;
    Ok(tape.value(s).data().to_vec())
}

/// Top-K entries of one similarity row.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    /// Row indices in descending score order; 0 is the no-match entry.
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

/// Indices of the `k` largest entries, larger score first, lower index first on ties.
/// `k` larger than the row is clamped to the row length.
pub fn top_k(row: &[f64], k: usize) -> Result<Vec<usize>> {
    ensure!(k >= 1, "K must be at least 1, got {k}");
    let k = if k > row.len() {
        log::warn!("K = {k} exceeds the {} available entries; clamping", row.len());
        row.len()
    } else {
        k
    };
    let order = |a: &usize, b: &usize| row[*b].total_cmp(&row[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..row.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_by(order);
    Ok(idx)
}

pub fn select_candidates(row: &[f64], k: usize) -> Result<CandidateSet> {
    let indices = top_k(row, k)?;
    let scores = indices.iter().map(|&i| row[i]).collect();
    Ok(CandidateSet { indices, scores })
}

/// Voting network over `tokens: [L·K, D_tok]` (K consecutive tokens per location) → `[L, C_v]`.
pub fn vote(tape: &mut Tape, params: &ParamSet, cfg: &RetrievalConfig, tokens: Var, k: usize) -> Result<Var> {
    ensure!(k >= 1, "voting needs at least one candidate");
    let n = tape.shape(tokens)[0];
    ensure!(n % k == 0, "{n} tokens do not split into groups of {k}");
    let l = n / k;
    let (d, heads) = (cfg.attn_width, cfg.heads);
    let dh = d / heads;

    let h = linear(tape, params, "retrieval.vote.in", tokens)?;
    let h = tape.relu(h)?;
    let split = |tape: &mut Tape, x: Var| -> Result<Var> {
        let x = tape.reshape(x, &[l, k, heads, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        tape.reshape(x, &[l * heads, k, dh])
    };
    let q = linear(tape, params, "retrieval.vote.q", h)?;
    let q = split(tape, q)?;
    let kk = linear(tape, params, "retrieval.vote.k", h)?;
    let kk = split(tape, kk)?;
    let v = linear(tape, params, "retrieval.vote.v", h)?;
    let v = split(tape, v)?;
    let logits = tape.batch_matmul(q, kk, false, true)?;
    let logits = tape.affine(logits, 1.0 / (dh as f64).sqrt(), 0.0)?;
    // A lone candidate has nobody else to attend to; keep its self link.
    let att = if k >= 2 { tape.softmax_row_masked_diag(logits)? } else { tape.softmax_row(logits)? };
    let mixed = tape.batch_matmul(att, v, false, false)?;
    let mixed = tape.reshape(mixed, &[l, heads, k, dh])?;
    let mixed = tape.permute(mixed, &[0, 2, 1, 3])?;
    let mixed = tape.reshape(mixed, &[l * k, d])?;
    let o = linear(tape, params, "retrieval.vote.o", mixed)?;
    let a = tape.add(h, o)?;
    let f = linear(tape, params, "retrieval.vote.ffn1", a)?;
    let f = tape.relu(f)?;
    let f = linear(tape, params, "retrieval.vote.ffn2", f)?;
    let a = tape.add(a, f)?;
    let out = linear(tape, params, "retrieval.vote.out", a)?;
    let cv = tape.shape(out)[1];
    let out = tape.reshape(out, &[l, k, cv])?;
    tape.max_over_axis(out, 1)
}

/// Independent per-candidate MLP then max, `[L·K, D_tok]` → `[L, C_v]`.
pub fn topk_mlp(tape: &mut Tape, params: &ParamSet, tokens: Var, k: usize) -> Result<Var> {
    let n = tape.shape(tokens)[0];
    ensure!(k >= 1 && n % k == 0, "{n} tokens do not split into groups of {k}");
    let h = linear(tape, params, "retrieval.mlp.l1", tokens)?;
    let h = tape.relu(h)?;
    let h = linear(tape, params, "retrieval.mlp.l2", h)?;
    let h = tape.relu(h)?;
    let out = linear(tape, params, "retrieval.mlp.l3", h)?;
    let cv = tape.shape(out)[1];
    let out = tape.reshape(out, &[n / k, k, cv])?;
    tape.max_over_axis(out, 1)
}

/// `[C, H, W]` → `[H·W, C]`.
fn to_rows(tape: &mut Tape, map: Var) -> Result<Var> {
    let s = tape.shape(map).to_vec();
    let flat = tape.reshape(map, &[s[0], s[1] * s[2]])?;
    tape.permute(flat, &[1, 0])
}

/// Retrieve a `[C_v, H, W]` map for `query: [C_k, H, W]` from memory slot tensors.
pub fn retrieve(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &RetrievalConfig,
    query: Var,
    keys: &[Var],
    values: &[Var],
) -> Result<Var> {
    ensure!(!keys.is_empty(), "retrieval from an empty memory");
    ensure!(keys.len() == values.len(), "{} keys but {} values", keys.len(), values.len());
    let qs = tape.shape(query).to_vec();
    ensure!(qs.len() == 3, "query must be [C, H, W], got {:?}", qs);
    let (ck, hw) = (qs[0], qs[1] * qs[2]);
    for (&k, &v) in keys.iter().zip(values) {
        ensure!(tape.shape(k) == qs.as_slice(), "key {:?} does not match query {:?}", tape.shape(k), qs);
        ensure!(tape.shape(v)[1..] == qs[1..], "value {:?} differs spatially from query {:?}", tape.shape(v), qs);
    }
    let cv = tape.shape(values[0])[0];

    let q_rows = to_rows(tape, query)?;
    let key_cols: Vec<Var> = keys
        .iter()
        .map(|&k| tape.reshape(k, &[ck, hw]))
        .collect::<Result<_>>()?;
    let key_mat = tape.concat(&key_cols, 1)?;
    let sim = similarity_rows(tape, q_rows, key_mat)?;

    let mut value_rows = Vec::with_capacity(values.len() + 1);
    value_rows.push(tape.param("retrieval.null", params.get("retrieval.null")?));
    for &v in values {
        value_rows.push(to_rows(tape, v)?);
    }
    let value_mat = tape.concat(&value_rows, 0)?;

    let retrieved = match cfg.mode {
        RetrievalMode::Softmax => tape.matmul(sim, value_mat)?,
        RetrievalMode::Voting | RetrievalMode::TopkMlp => {
            let width = tape.shape(sim)[1];
            let k = cfg.k.min(width);
            if cfg.k > width {
                log::warn!("K = {} exceeds the {width} similarity entries; clamping", cfg.k);
            }
            let sim_vals = tape.value(sim).data().to_vec();
            let mut picks = Vec::with_capacity(hw * k);
            let mut owners = Vec::with_capacity(hw * k);
            for (i, row) in sim_vals.chunks(width).enumerate() {
                picks.extend(top_k(row, k)?);
                owners.extend(std::iter::repeat_n(i, k));
            }
            let cand = tape.gather_rows(value_mat, &picks)?;
            let qrep = tape.gather_rows(q_rows, &owners)?;
            let tokens = tape.concat(&[cand, qrep], 1)?;
            if cfg.mode == RetrievalMode::Voting {
                vote(tape, params, cfg, tokens, k)?
            } else {
                topk_mlp(tape, params, tokens, k)?
            }
        }
    };
    let cols = tape.permute(retrieved, &[1, 0])?;
    tape.reshape(cols, &[cv, qs[1], qs[2]])
}
