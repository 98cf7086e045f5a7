//! Minimal decoder-only transformer with exposed attention maps.
//!
//! Each layer applies causal multi-head attention and a gated FFN, both with
//! residual connections:
//!
//! ```text
//! y = x + concat_h(softmax_causal(x Wq_h (x Wk_h)ᵀ / √d_k) x Wv_h) Wo
//! z = y + (silu(y Wgate) ⊙ (y Wup)) Wdown
//! ```
//!
//! Logits are `h_L · Whead`. There is no normalization and no positional
//! encoding. Everything runs in f64.

use std::fs;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::store::{self, attn_name, ffn_name, HeadRef, Tensor, TensorStore};

/// Token ids of one input sequence.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, cfg: &ModelConfig) -> Result<Self> {
        let seq = Self { ids };
        seq.validate(cfg)?;
        Ok(seq)
    }

    /// Wraps ids without checking them against a config.
    pub fn new_unchecked(ids: Vec<usize>) -> Self {
        Self { ids }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.ids.is_empty() || self.ids.len() > cfg.max_seq_len {
            return Err(Error::InvalidArgument(format!(
                "sequence length {} outside [1, {}]",
                self.ids.len(),
                cfg.max_seq_len
            )));
        }
        if let Some(&bad) = self.ids.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::TokenOutOfRange(bad, cfg.vocab_size));
        }
        Ok(())
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Input/target pair for next-token prediction: `(ids[..n-1], ids[1..])`.
    pub fn shifted(&self) -> Option<(TokenSequence, TokenSequence)> {
        if self.ids.len() < 2 {
            return None;
        }
        let n = self.ids.len();
        Some((
            TokenSequence::new_unchecked(self.ids[..n - 1].to_vec()),
            TokenSequence::new_unchecked(self.ids[1..].to_vec()),
        ))
    }
}

/// Reads newline-delimited sequences of whitespace-separated token ids.
pub fn read_sequences(path: impl AsRef<Path>) -> Result<Vec<TokenSequence>> {
    let text = fs::read_to_string(path)?;
    parse_sequences(&text)
}

pub fn parse_sequences(text: &str) -> Result<Vec<TokenSequence>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|line| {
            line.split_whitespace()
                .map(|t| {
                    t.parse::<usize>()
                        .map_err(|_| Error::InvalidArgument(format!("bad token id `{t}`")))
                })
                .collect::<Result<Vec<_>>>()
                .map(TokenSequence::new_unchecked)
        })
        .collect()
}

pub fn format_sequences(seqs: &[TokenSequence]) -> String {
    let mut out = String::new();
    for seq in seqs {
        let line: Vec<String> = seq.ids.iter().map(usize::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone)]
struct LayerWeights {
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
    gate: Array2<f64>,
    up: Array2<f64>,
    down: Array2<f64>,
}

/// Engine weights unpacked from a store.
#[derive(Debug, Clone)]
pub struct Weights {
    cfg: ModelConfig,
    embed: Array2<f64>,
    head_out: Array2<f64>,
    layers: Vec<LayerWeights>,
}

impl Weights {
    pub fn from_store(store: &TensorStore, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, h, f, v) = (cfg.embed_dim, cfg.heads_per_layer, cfg.ffn_dim, cfg.vocab_size);
        let layers = (0..cfg.num_layers)
            .map(|l| {
                Ok(LayerWeights {
                    wq: store.matrix(&attn_name(l, "wq"), d, h * cfg.head_dim_q)?,
                    wk: store.matrix(&attn_name(l, "wk"), d, h * cfg.head_dim_k)?,
                    wv: store.matrix(&attn_name(l, "wv"), d, h * cfg.head_dim_v)?,
                    wo: store.matrix(&attn_name(l, "wo"), h * cfg.head_dim_v, d)?,
                    gate: store.matrix(&ffn_name(l, "gate"), d, f)?,
                    up: store.matrix(&ffn_name(l, "up"), d, f)?,
                    down: store.matrix(&ffn_name(l, "down"), f, d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: *cfg,
            embed: store.matrix(store::EMBED_NAME, v, d)?,
            head_out: store.matrix(store::HEAD_OUT_NAME, d, v)?,
            layers,
        })
    }
}

/// Output of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// L × vocab
    pub logits: Array2<f64>,
    /// L × L causal attention map per head, indexed `layer * H + head`.
    pub attention_maps: Vec<Array2<f64>>,
    /// Residual-stream input of each layer, L × D.
    pub layer_inputs: Vec<Array2<f64>>,
    heads_per_layer: usize,
}

impl ForwardTrace {
    pub fn attention_map(&self, h: HeadRef) -> &Array2<f64> {
        &self.attention_maps[h.layer * self.heads_per_layer + h.head]
    }
}

/// Row-wise softmax over the causal prefix; entries above the diagonal are exactly 0.
fn causal_softmax(scores: &mut Array2<f64>) {
    for (i, mut row) in scores.axis_iter_mut(Axis(0)).enumerate() {
        let max = row.iter().take(i + 1).copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, v) in row.iter_mut().enumerate() {
            if j <= i {
                *v = (*v - max).exp();
                sum += *v;
            } else {
                *v = 0.0;
            }
        }
        row.iter_mut().take(i + 1).for_each(|v| *v /= sum);
    }
}

/// Attention map of one head given its layer input and its q/k projections.
pub fn head_attention_map(x: ArrayView2<'_, f64>, wq: ArrayView2<'_, f64>, wk: ArrayView2<'_, f64>) -> Array2<f64> {
    let q = x.dot(&wq);
    let k = x.dot(&wk);
    attention_from_qk(&q, &k)
}

fn attention_from_qk(q: &Array2<f64>, k: &Array2<f64>) -> Array2<f64> {
    let scale = 1.0 / (k.ncols() as f64).sqrt();
    let mut scores = q.dot(&k.t()) * scale;
    causal_softmax(&mut scores);
    scores
}

fn silu(g: f64) -> f64 {
    g / (1.0 + (-g).exp())
}

fn sigmoid(g: f64) -> f64 {
    1.0 / (1.0 + (-g).exp())
}

struct HeadCache {
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
}

struct LayerCache {
    x: Array2<f64>,
    heads: Vec<HeadCache>,
    concat: Array2<f64>,
    y: Array2<f64>,
    gate: Array2<f64>,
    up: Array2<f64>,
    act: Array2<f64>,
}

struct Cache {
    layers: Vec<LayerCache>,
    last: Array2<f64>,
}

fn forward_cached(w: &Weights, x: &TokenSequence) -> Result<(ForwardTrace, Cache)> {
    let cfg = &w.cfg;
    x.validate(cfg)?;
    let n = x.len();
    let (dq, dk, dv) = (cfg.head_dim_q, cfg.head_dim_k, cfg.head_dim_v);
    let mut hidden = Array2::zeros((n, cfg.embed_dim));
    for (t, &id) in x.ids().iter().enumerate() {
        hidden.row_mut(t).assign(&w.embed.row(id));
    }
    let mut maps = Vec::with_capacity(cfg.total_heads());
    let mut inputs = Vec::with_capacity(cfg.num_layers);
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for lw in &w.layers {
        let xin = hidden;
        let mut concat = Array2::zeros((n, cfg.heads_per_layer * dv));
        let mut heads = Vec::with_capacity(cfg.heads_per_layer);
        for h in 0..cfg.heads_per_layer {
            let q = xin.dot(&lw.wq.slice(s![.., h * dq..(h + 1) * dq]));
            let k = xin.dot(&lw.wk.slice(s![.., h * dk..(h + 1) * dk]));
            let v = xin.dot(&lw.wv.slice(s![.., h * dv..(h + 1) * dv]));
            let a = attention_from_qk(&q, &k);
            concat.slice_mut(s![.., h * dv..(h + 1) * dv]).assign(&a.dot(&v));
            maps.push(a);
            heads.push(HeadCache { q, k, v });
        }
        let y = &xin + &concat.dot(&lw.wo);
        let gate = y.dot(&lw.gate);
        let up = y.dot(&lw.up);
        let act = Array2::from_shape_fn(gate.dim(), |ij| silu(gate[ij]) * up[ij]);
        hidden = &y + &act.dot(&lw.down);
        inputs.push(xin.clone());
        layers.push(LayerCache { x: xin, heads, concat, y, gate, up, act });
    }
    let logits = hidden.dot(&w.head_out);
    Ok((
        ForwardTrace {
            logits,
            attention_maps: maps,
            layer_inputs: inputs,
            heads_per_layer: cfg.heads_per_layer,
        },
        Cache { layers, last: hidden },
    ))
}

/// Runs the model on one sequence.
pub fn forward(store: &TensorStore, cfg: &ModelConfig, x: &TokenSequence) -> Result<ForwardTrace> {
    let w = Weights::from_store(store, cfg)?;
    forward_with(&w, x)
}

pub fn forward_with(w: &Weights, x: &TokenSequence) -> Result<ForwardTrace> {
    forward_cached(w, x).map(|(t, _)| t)
}

fn log_softmax_row(row: ndarray::ArrayView1<'_, f64>) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v - lse).collect()
}

/// Mean next-token cross-entropy of the logits against `targets`.
pub fn cross_entropy(trace: &ForwardTrace, targets: &TokenSequence) -> Result<f64> {
    let logits = &trace.logits;
    if targets.len() != logits.nrows() {
        return Err(Error::LengthMismatch(targets.len(), logits.nrows()));
    }
    let vocab = logits.ncols();
    let mut total = 0.0;
    for (row, &t) in logits.axis_iter(Axis(0)).zip(targets.ids()) {
        if t >= vocab {
            return Err(Error::TokenOutOfRange(t, vocab));
        }
        total -= log_softmax_row(row)[t];
    }
    Ok(total / targets.len() as f64)
}

/// Gradient of the mean cross-entropy w.r.t. every weight, as a store with
/// the same names and shapes (f64).
pub fn backward(store: &TensorStore, cfg: &ModelConfig, x: &TokenSequence, targets: &TokenSequence) -> Result<TensorStore> {
    let w = Weights::from_store(store, cfg)?;
    Ok(loss_and_grad(&w, x, targets)?.1.into_store(&w.cfg))
}

/// Per-tensor gradients mirroring [`Weights`].
#[derive(Debug, Clone)]
pub struct Gradients {
    embed: Array2<f64>,
    head_out: Array2<f64>,
    layers: Vec<LayerWeights>,
}

impl Gradients {
    fn zeros(w: &Weights) -> Self {
        let z = |m: &Array2<f64>| Array2::zeros(m.dim());
        Self {
            embed: z(&w.embed),
            head_out: z(&w.head_out),
            layers: w
                .layers
                .iter()
                .map(|l| LayerWeights {
                    wq: z(&l.wq),
                    wk: z(&l.wk),
                    wv: z(&l.wv),
                    wo: z(&l.wo),
                    gate: z(&l.gate),
                    up: z(&l.up),
                    down: z(&l.down),
                })
                .collect(),
        }
    }

    fn matrices_mut(&mut self) -> impl Iterator<Item = &mut Array2<f64>> {
        std::iter::once(&mut self.embed)
            .chain(std::iter::once(&mut self.head_out))
            .chain(self.layers.iter_mut().flat_map(|l| {
                [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo, &mut l.gate, &mut l.up, &mut l.down]
            }))
    }

    fn matrices(&self) -> impl Iterator<Item = &Array2<f64>> {
        std::iter::once(&self.embed)
            .chain(std::iter::once(&self.head_out))
            .chain(self.layers.iter().flat_map(|l| [&l.wq, &l.wk, &l.wv, &l.wo, &l.gate, &l.up, &l.down]))
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.matrices_mut().zip(other.matrices()) {
            a.scaled_add(scale, b);
        }
    }

    pub fn into_store(self, cfg: &ModelConfig) -> TensorStore {
        let mut out = TensorStore::new(Some(*cfg));
        out.insert(store::EMBED_NAME, Tensor::from_matrix(&self.embed));
        out.insert(store::HEAD_OUT_NAME, Tensor::from_matrix(&self.head_out));
        for (l, g) in self.layers.iter().enumerate() {
            for (proj, m) in [("wq", &g.wq), ("wk", &g.wk), ("wv", &g.wv), ("wo", &g.wo)] {
                out.insert(attn_name(l, proj), Tensor::from_matrix(m));
            }
            for (proj, m) in [("gate", &g.gate), ("up", &g.up), ("down", &g.down)] {
                out.insert(ffn_name(l, proj), Tensor::from_matrix(m));
            }
        }
        out
    }
}

/// Loss and gradient for one sequence.
pub fn loss_and_grad(w: &Weights, x: &TokenSequence, targets: &TokenSequence) -> Result<(f64, Gradients)> {
    let (trace, cache) = forward_cached(w, x)?;
    let loss = cross_entropy(&trace, targets)?;
    let cfg = &w.cfg;
    let n = x.len();
    let (dq, dk, dv) = (cfg.head_dim_q, cfg.head_dim_k, cfg.head_dim_v);
    let mut g = Gradients::zeros(w);

    // d(mean CE)/d logits = (softmax - onehot) / n
    let mut dlogits = trace.logits.clone();
    for (mut row, &t) in dlogits.axis_iter_mut(Axis(0)).zip(targets.ids()) {
        let ls = log_softmax_row(row.view());
        for (v, l) in row.iter_mut().zip(ls) {
            *v = l.exp();
        }
        row[t] -= 1.0;
        row.mapv_inplace(|v| v / n as f64);
    }
    g.head_out = cache.last.t().dot(&dlogits);
    let mut dh = dlogits.dot(&w.head_out.t());

    for (l, (lw, lc)) in w.layers.iter().zip(&cache.layers).enumerate().rev() {
        let gl = &mut g.layers[l];
        // FFN
        let dz = dh;
        gl.down = lc.act.t().dot(&dz);
        let dact = dz.dot(&lw.down.t());
        let mut dgate = Array2::zeros(lc.gate.dim());
        let mut dup = Array2::zeros(lc.up.dim());
        for ((i, j), &da) in dact.indexed_iter() {
            let gv = lc.gate[(i, j)];
            let sg = sigmoid(gv);
            dup[(i, j)] = da * gv * sg;
            dgate[(i, j)] = da * lc.up[(i, j)] * sg * (1.0 + gv * (1.0 - sg));
        }
        gl.gate = lc.y.t().dot(&dgate);
        gl.up = lc.y.t().dot(&dup);
        let dy = &dz + &dgate.dot(&lw.gate.t()) + &dup.dot(&lw.up.t());

        // Attention
        gl.wo = lc.concat.t().dot(&dy);
        let dconcat = dy.dot(&lw.wo.t());
        let mut dx = dy;
        let scale = 1.0 / (dk as f64).sqrt();
        for (h, hc) in lc.heads.iter().enumerate() {
            let a = &trace.attention_maps[l * cfg.heads_per_layer + h];
            let dout = dconcat.slice(s![.., h * dv..(h + 1) * dv]);
            let da = dout.dot(&hc.v.t());
            let dvv = a.t().dot(&dout);
            let mut ds = Array2::zeros((n, n));
            for i in 0..n {
                let dot: f64 = (0..=i).map(|j| da[(i, j)] * a[(i, j)]).sum();
                for j in 0..=i {
                    ds[(i, j)] = a[(i, j)] * (da[(i, j)] - dot) * scale;
                }
            }
            let dqh = ds.dot(&hc.k);
            let dkh = ds.t().dot(&hc.q);
            gl.wq.slice_mut(s![.., h * dq..(h + 1) * dq]).assign(&lc.x.t().dot(&dqh));
            gl.wk.slice_mut(s![.., h * dk..(h + 1) * dk]).assign(&lc.x.t().dot(&dkh));
            gl.wv.slice_mut(s![.., h * dv..(h + 1) * dv]).assign(&lc.x.t().dot(&dvv));
            dx += &dqh.dot(&lw.wq.slice(s![.., h * dq..(h + 1) * dq]).t());
            dx += &dkh.dot(&lw.wk.slice(s![.., h * dk..(h + 1) * dk]).t());
            dx += &dvv.dot(&lw.wv.slice(s![.., h * dv..(h + 1) * dv]).t());
        }
        dh = dx;
    }
    for (t, &id) in x.ids().iter().enumerate() {
        let mut row = g.embed.row_mut(id);
        row += &dh.row(t);
    }
    Ok((loss, g))
}

/// Mean loss and gradient over a batch of `(input, target)` pairs.
///
/// Sequences are processed in parallel and reduced in batch order, so the
/// result does not depend on the thread count.
pub fn batch_loss_and_grad(w: &Weights, batch: &[(TokenSequence, TokenSequence)]) -> Result<(f64, Gradients)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let parts = batch
        .par_iter()
        .map(|(x, t)| loss_and_grad(w, x, t))
        .collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / batch.len() as f64;
    let mut total = Gradients::zeros(w);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add_scaled(g, scale);
    }
    Ok((loss * scale, total))
}
