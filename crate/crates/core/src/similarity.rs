//! Cosine similarities between attention maps and between head weights.

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::store::{head_slices, HeadRef, HeadSlices, TensorStore};

/// Norm below which a vector counts as zero.
pub const ZERO_NORM: f64 = 1e-30;

/// Cosine similarity accumulated in f64.
///
/// Computed as `u·v / sqrt(|u|²|v|²)` with all three sums taken in one pass,
/// so identical inputs score exactly 1.0.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::LengthMismatch(u.len(), v.len()));
    }
    let (mut dot, mut uu, mut vv) = (0.0f64, 0.0f64, 0.0f64);
    for (&a, &b) in u.iter().zip(v) {
        dot += a * b;
        uu += a * a;
        vv += b * b;
    }
    if uu.sqrt() < ZERO_NORM || vv.sqrt() < ZERO_NORM {
        return Err(Error::ZeroVector);
    }
    Ok((dot / (uu * vv).sqrt()).clamp(-1.0, 1.0))
}

/// Cosine similarity of two attention maps, flattened row-major.
pub fn attention_map_similarity(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!(
            "attention maps {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    let flat_a: Vec<f64> = a.iter().copied().collect();
    let flat_b: Vec<f64> = b.iter().copied().collect();
    cosine(&flat_a, &flat_b)
}

/// Which head matrices a match score compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub enum MatchFunction {
    #[serde(rename = "q")]
    QOnly,
    #[serde(rename = "k")]
    KOnly,
    #[serde(rename = "v")]
    VOnly,
    /// Three independent scores; the combined score is their mean.
    #[serde(rename = "separate")]
    QKVSeparate,
    #[serde(rename = "qkv")]
    QKVConcat,
    /// `wq‖wk`, the default.
    #[default]
    #[serde(rename = "qk")]
    QKConcat,
}

impl MatchFunction {
    pub const ALL: [MatchFunction; 6] = [
        MatchFunction::QOnly,
        MatchFunction::KOnly,
        MatchFunction::VOnly,
        MatchFunction::QKVSeparate,
        MatchFunction::QKVConcat,
        MatchFunction::QKConcat,
    ];

    pub fn flag(self) -> &'static str {
        match self {
            MatchFunction::QOnly => "q",
            MatchFunction::KOnly => "k",
            MatchFunction::VOnly => "v",
            MatchFunction::QKVSeparate => "separate",
            MatchFunction::QKVConcat => "qkv",
            MatchFunction::QKConcat => "qk",
        }
    }
}

impl fmt::Display for MatchFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.flag())
    }
}

impl FromStr for MatchFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MatchFunction::ALL
            .into_iter()
            .find(|m| m.flag() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown match function `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerMatrix {
    pub q: f64,
    pub k: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchScore {
    pub pair: (HeadRef, HeadRef),
    pub score: f64,
    /// Only set for [`MatchFunction::QKVSeparate`].
    pub per_matrix: Option<PerMatrix>,
}

/// Row-major flattening of the column-wise concatenation of `mats`.
pub fn concat_columns_flat(mats: &[&Array2<f64>]) -> Vec<f64> {
    let rows = mats.first().map_or(0, |m| m.nrows());
    let width: usize = mats.iter().map(|m| m.ncols()).sum();
    let mut out = Vec::with_capacity(rows * width);
    for r in 0..rows {
        for m in mats {
            out.extend(m.row(r).iter().copied());
        }
    }
    out
}

/// The vectors a match function compares for one head.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadFeatures(Vec<Vec<f64>>);

impl HeadFeatures {
    pub fn new(slices: &HeadSlices, f: MatchFunction) -> Self {
        let flat = |m: &Array2<f64>| concat_columns_flat(&[m]);
        HeadFeatures(match f {
            MatchFunction::QOnly => vec![flat(&slices.wq)],
            MatchFunction::KOnly => vec![flat(&slices.wk)],
            MatchFunction::VOnly => vec![flat(&slices.wv)],
            MatchFunction::QKConcat => vec![concat_columns_flat(&[&slices.wq, &slices.wk])],
            MatchFunction::QKVConcat => {
                vec![concat_columns_flat(&[&slices.wq, &slices.wk, &slices.wv])]
            }
            MatchFunction::QKVSeparate => {
                vec![flat(&slices.wq), flat(&slices.wk), flat(&slices.wv)]
            }
        })
    }

    /// Combined score and, for three-vector features, the per-matrix scores.
    pub fn score(&self, other: &HeadFeatures) -> Result<(f64, Option<PerMatrix>)> {
        match (&self.0[..], &other.0[..]) {
            ([a], [b]) => Ok((cosine(a, b)?, None)),
            ([aq, ak, av], [bq, bk, bv]) => {
                let per = PerMatrix {
                    q: cosine(aq, bq)?,
                    k: cosine(ak, bk)?,
                    v: cosine(av, bv)?,
                };
                Ok(((per.q + per.k + per.v) / 3.0, Some(per)))
            }
            _ => Err(Error::InvalidArgument(
                "features built with different match functions".into(),
            )),
        }
    }
}

/// Features of every head, indexed as `layer * heads_per_layer + head`.
pub fn all_head_features(store: &TensorStore, cfg: &ModelConfig, f: MatchFunction) -> Result<Vec<HeadFeatures>> {
    let heads: Vec<HeadRef> = HeadRef::all(cfg).collect();
    heads
        .par_iter()
        .map(|&h| head_slices(store, cfg, h).map(|s| HeadFeatures::new(&s, f)))
        .collect()
}

/// Match score between two distinct heads.
pub fn match_score(
    store: &TensorStore,
    cfg: &ModelConfig,
    i: HeadRef,
    j: HeadRef,
    f: MatchFunction,
) -> Result<MatchScore> {
    if i == j {
        return Err(Error::SameHead(i));
    }
    let fi = HeadFeatures::new(&head_slices(store, cfg, i)?, f);
    let fj = HeadFeatures::new(&head_slices(store, cfg, j)?, f);
    let (score, per_matrix) = fi.score(&fj)?;
    Ok(MatchScore {
        pair: (i, j),
        score,
        per_matrix,
    })
}

/// Scores of every unordered head pair `i < j`, in lexicographic order.
pub fn pairwise_scores(store: &TensorStore, cfg: &ModelConfig, f: MatchFunction) -> Result<Vec<MatchScore>> {
    let heads: Vec<HeadRef> = HeadRef::all(cfg).collect();
    let feats = all_head_features(store, cfg, f)?;
    let rows: Vec<Vec<MatchScore>> = (0..heads.len())
        .into_par_iter()
        .map(|a| {
            ((a + 1)..heads.len())
                .map(|b| {
                    let (score, per_matrix) = feats[a].score(&feats[b])?;
                    Ok(MatchScore {
                        pair: (heads[a], heads[b]),
                        score,
                        per_matrix,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(rows.into_iter().flatten().collect())
}
