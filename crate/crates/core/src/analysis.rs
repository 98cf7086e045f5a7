//! Agreement between weight-based and attention-map-based head matching.

use std::collections::BTreeSet;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::engine::{self, ForwardTrace, TokenSequence, Weights};
use crate::error::{Error, Result};
use crate::sharing::{build_candidate_buffer, target_pairs, Candidate, CandidateBuffer};
use crate::similarity::{attention_map_similarity, MatchFunction};
use crate::store::{HeadRef, TensorStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegreeReport {
    pub k: usize,
    /// Top-k pairs ranked by weight similarity.
    pub set_weight: Vec<Candidate>,
    /// Top-k pairs ranked by mean attention-map similarity.
    pub set_attn: Vec<Candidate>,
    pub intersection: usize,
    /// `intersection / k`
    pub overlap_ratio: f64,
    /// `intersection / #inputs`, kept for comparison with published figures.
    pub raw_degree: f64,
}

fn traces(store: &TensorStore, cfg: &ModelConfig, inputs: &[TokenSequence]) -> Result<Vec<ForwardTrace>> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("no input sequences".into()));
    }
    let w = Weights::from_store(store, cfg)?;
    inputs.par_iter().map(|x| engine::forward_with(&w, x)).collect()
}

/// Mean over inputs of the attention-map cosine between every pair of heads,
/// indexed `layer * H + head` on both axes.
pub fn head_similarity_matrix(store: &TensorStore, cfg: &ModelConfig, inputs: &[TokenSequence]) -> Result<Array2<f64>> {
    let traces = traces(store, cfg, inputs)?;
    head_similarity_from_traces(&traces, cfg.total_heads())
}

fn head_similarity_from_traces(traces: &[ForwardTrace], m: usize) -> Result<Array2<f64>> {
    let n = traces.len() as f64;
    let rows = (0..m)
        .into_par_iter()
        .map(|a| {
            (0..m)
                .map(|b| {
                    let mut sum = 0.0;
                    for t in traces {
                        sum += attention_map_similarity(&t.attention_maps[a], &t.attention_maps[b])?;
                    }
                    Ok(sum / n)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Array2::from_shape_vec((m, m), rows.concat()).expect("m x m values"))
}

/// Layer-by-layer similarity: mean over inputs and head index `h` of the
/// cosine between head `h` of layer p and head `h` of layer q.
pub fn layer_similarity_matrix(store: &TensorStore, cfg: &ModelConfig, inputs: &[TokenSequence]) -> Result<Array2<f64>> {
    let traces = traces(store, cfg, inputs)?;
    let (l, h) = (cfg.num_layers, cfg.heads_per_layer);
    let denom = (traces.len() * h) as f64;
    let mut out = Array2::zeros((l, l));
    for p in 0..l {
        for q in 0..l {
            let mut sum = 0.0;
            for t in &traces {
                for head in 0..h {
                    sum += attention_map_similarity(
                        t.attention_map(HeadRef::new(p, head)),
                        t.attention_map(HeadRef::new(q, head)),
                    )?;
                }
            }
            out[(p, q)] = sum / denom;
        }
    }
    Ok(out)
}

/// Candidate buffer built from mean attention-map similarity instead of
/// weights: same earlier-layer search and tie-break as the weight buffer.
pub fn attention_candidate_buffer(store: &TensorStore, cfg: &ModelConfig, inputs: &[TokenSequence]) -> Result<CandidateBuffer> {
    if cfg.num_layers < 2 {
        return Err(Error::TooFewLayers(cfg.num_layers));
    }
    let sim = head_similarity_matrix(store, cfg, inputs)?;
    let h = cfg.heads_per_layer;
    let entries = (h..cfg.total_heads())
        .map(|this| {
            let earlier = (this / h) * h;
            let mut best = 0;
            for other in 1..earlier {
                if sim[(this, other)] > sim[(this, best)] {
                    best = other;
                }
            }
            Candidate {
                this: HeadRef::new(this / h, this % h),
                best: HeadRef::new(best / h, best % h),
                score: sim[(this, best)],
            }
        })
        .collect();
    Ok(CandidateBuffer { entries })
}

/// The `k` highest-scoring candidates, ties broken by ascending `this`.
pub fn top_k(buf: &CandidateBuffer, k: usize) -> Vec<Candidate> {
    let mut ranked = buf.entries.clone();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.this.cmp(&b.this)));
    ranked.truncate(k);
    ranked
}

/// Compares the top-k head pairs chosen by weight similarity with those
/// chosen by attention-map similarity on `inputs`.
pub fn matched_degree(
    store: &TensorStore,
    cfg: &ModelConfig,
    inputs: &[TokenSequence],
    alpha: f64,
    f: MatchFunction,
) -> Result<DegreeReport> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::AlphaOutOfRange(alpha));
    }
    let weight_buf = build_candidate_buffer(store, cfg, f)?;
    let k = target_pairs(cfg, alpha).min(weight_buf.entries.len());
    if k == 0 {
        return Err(Error::InvalidArgument(format!("ratio {alpha} selects no head pairs")));
    }
    let attn_buf = attention_candidate_buffer(store, cfg, inputs)?;
    let set_weight = top_k(&weight_buf, k);
    let set_attn = top_k(&attn_buf, k);
    let key = |c: &Candidate| (c.best, c.this);
    let a: BTreeSet<_> = set_weight.iter().map(key).collect();
    let intersection = set_attn.iter().filter(|c| a.contains(&key(c))).count();
    Ok(DegreeReport {
        k,
        set_weight,
        set_attn,
        intersection,
        overlap_ratio: intersection as f64 / k as f64,
        raw_degree: intersection as f64 / inputs.len() as f64,
    })
}
