//! DirectShare: match every head against strictly earlier layers, rank the
//! candidates, and tie the top-N pairs.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::similarity::{all_head_features, concat_columns_flat, cosine, MatchFunction};
use crate::store::{self, ffn_name, HeadRef, TensorStore};

/// Best earlier-layer match for one head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub this: HeadRef,
    pub best: HeadRef,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CandidateBuffer {
    pub entries: Vec<Candidate>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharePair {
    pub keep: HeadRef,
    pub replace: HeadRef,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FfnPair {
    pub keep: usize,
    pub replace: usize,
}

/// The tied pairs selected by DirectShare.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharePlan {
    pub pairs: Vec<SharePair>,
    pub ratio: f64,
    pub match_function: MatchFunction,
    #[serde(default)]
    pub ffn_layers: Vec<FfnPair>,
}

impl SharePlan {
    pub fn empty(match_function: MatchFunction) -> Self {
        Self {
            pairs: Vec::new(),
            ratio: 0.0,
            match_function,
            ffn_layers: Vec::new(),
        }
    }

    /// Checks the plan's structural invariants against `cfg`.
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let mismatch = |msg: String| Err(Error::PlanConfigMismatch(msg));
        let mut replaced = BTreeSet::new();
        for p in &self.pairs {
            for h in [p.keep, p.replace] {
                if h.check(cfg).is_err() {
                    return mismatch(format!("head {h} is outside the model"));
                }
            }
            if p.keep.layer >= p.replace.layer {
                return mismatch(format!(
                    "keep {} must be in an earlier layer than replace {}",
                    p.keep, p.replace
                ));
            }
            if !replaced.insert(p.replace) {
                return mismatch(format!("head {} is replaced twice", p.replace));
            }
        }
        let mut replaced = BTreeSet::new();
        for p in &self.ffn_layers {
            if p.keep >= cfg.num_layers || p.replace >= cfg.num_layers {
                return mismatch(format!("FFN layer pair {}->{} is outside the model", p.keep, p.replace));
            }
            if p.keep >= p.replace {
                return mismatch(format!("FFN keep layer {} must precede {}", p.keep, p.replace));
            }
            if !replaced.insert(p.replace) {
                return mismatch(format!("FFN layer {} is replaced twice", p.replace));
            }
        }
        Ok(())
    }
}

/// Number of pairs selected for ratio `alpha`, counting every head of the model.
pub fn target_pairs(cfg: &ModelConfig, alpha: f64) -> usize {
    (alpha * cfg.total_heads() as f64).round() as usize
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::AlphaOutOfRange(alpha));
    }
    Ok(())
}

/// For every head outside layer 0, finds the highest-scoring head in any
/// earlier layer. Equal scores resolve to the lexicographically smallest head.
pub fn build_candidate_buffer(store: &TensorStore, cfg: &ModelConfig, f: MatchFunction) -> Result<CandidateBuffer> {
    if cfg.num_layers < 2 {
        return Err(Error::TooFewLayers(cfg.num_layers));
    }
    let feats = all_head_features(store, cfg, f)?;
    let h = cfg.heads_per_layer;
    let entries = (h..cfg.total_heads())
        .into_par_iter()
        .map(|this| {
            let earlier = (this / h) * h;
            let mut best = 0;
            let mut best_score = feats[this].score(&feats[0])?.0;
            for other in 1..earlier {
                let s = feats[this].score(&feats[other])?.0;
                if s > best_score {
                    best = other;
                    best_score = s;
                }
            }
            Ok(Candidate {
                this: HeadRef::new(this / h, this % h),
                best: HeadRef::new(best / h, best % h),
                score: best_score,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CandidateBuffer { entries })
}

/// Takes the `round(alpha * L * H)` best candidates, clamped to the buffer size.
pub fn select_top_n(buf: &CandidateBuffer, cfg: &ModelConfig, alpha: f64, f: MatchFunction) -> Result<SharePlan> {
    check_alpha(alpha)?;
    let n = target_pairs(cfg, alpha).min(buf.entries.len());
    let mut ranked = buf.entries.clone();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.this.cmp(&b.this)));
    Ok(SharePlan {
        pairs: ranked
            .into_iter()
            .take(n)
            .map(|c| SharePair {
                keep: c.best,
                replace: c.this,
            })
            .collect(),
        ratio: alpha,
        match_function: f,
        ffn_layers: Vec::new(),
    })
}

/// Whole-FFN-block match score: cosine of `gate‖up‖downᵀ`, flattened row-major.
pub fn ffn_match(store: &TensorStore, cfg: &ModelConfig, layer_i: usize, layer_j: usize) -> Result<f64> {
    if layer_i == layer_j || layer_i >= cfg.num_layers || layer_j >= cfg.num_layers {
        return Err(Error::InvalidArgument(format!(
            "FFN layers {layer_i} and {layer_j} must be distinct and below {}",
            cfg.num_layers
        )));
    }
    let a = ffn_features(store, cfg, layer_i)?;
    let b = ffn_features(store, cfg, layer_j)?;
    cosine(&a, &b)
}

fn ffn_features(store: &TensorStore, cfg: &ModelConfig, layer: usize) -> Result<Vec<f64>> {
    let (d, f) = (cfg.embed_dim, cfg.ffn_dim);
    let gate = store.matrix(&ffn_name(layer, "gate"), d, f)?;
    let up = store.matrix(&ffn_name(layer, "up"), d, f)?;
    let down_t = store.matrix(&ffn_name(layer, "down"), f, d)?.reversed_axes();
    Ok(concat_columns_flat(&[&gate, &up, &down_t]))
}

/// FFN analogue of DirectShare at whole-layer granularity: each layer after
/// the first is matched to its best earlier layer, and the top
/// `round(ratio * L)` matches are kept.
pub fn select_ffn_layers(store: &TensorStore, cfg: &ModelConfig, ratio: f64) -> Result<Vec<FfnPair>> {
    check_alpha(ratio)?;
    if cfg.num_layers < 2 {
        return Err(Error::TooFewLayers(cfg.num_layers));
    }
    let feats = (0..cfg.num_layers)
        .into_par_iter()
        .map(|l| ffn_features(store, cfg, l))
        .collect::<Result<Vec<_>>>()?;
    let mut ranked = Vec::with_capacity(cfg.num_layers - 1);
    for this in 1..cfg.num_layers {
        let mut best = 0;
        let mut best_score = cosine(&feats[this], &feats[0])?;
        for other in 1..this {
            let s = cosine(&feats[this], &feats[other])?;
            if s > best_score {
                best = other;
                best_score = s;
            }
        }
        ranked.push((this, best, best_score));
    }
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    let n = ((ratio * cfg.num_layers as f64).round() as usize).min(ranked.len());
    Ok(ranked
        .into_iter()
        .take(n)
        .map(|(replace, keep, _)| FfnPair { keep, replace })
        .collect())
}

/// Full DirectShare selection: candidate matching plus top-N, and optionally whole-FFN layers.
pub fn direct_share_plan(
    store: &TensorStore,
    cfg: &ModelConfig,
    alpha: f64,
    f: MatchFunction,
    ffn_ratio: Option<f64>,
) -> Result<SharePlan> {
    check_alpha(alpha)?;
    let buf = build_candidate_buffer(store, cfg, f)?;
    let mut plan = select_top_n(&buf, cfg, alpha, f)?;
    if let Some(r) = ffn_ratio {
        plan.ffn_layers = select_ffn_layers(store, cfg, r)?;
    }
    Ok(plan)
}

/// Ties every planned pair by copying the kept head's q, k, v and output
/// slices over the replaced head's. Pairs are applied in ascending `replace`
/// order, so a kept head that was itself replaced passes on its new values.
pub fn apply_share_plan(store: &TensorStore, cfg: &ModelConfig, plan: &SharePlan) -> Result<TensorStore> {
    plan.validate(cfg)?;
    let mut out = store.clone();
    let mut pairs = plan.pairs.clone();
    pairs.sort_by_key(|p| p.replace);
    for p in pairs {
        store::copy_head(&mut out, cfg, p.keep, p.replace)?;
    }
    let mut ffn = plan.ffn_layers.clone();
    ffn.sort_by_key(|p| p.replace);
    for p in ffn {
        store::copy_ffn(&mut out, p.keep, p.replace)?;
    }
    Ok(out)
}
