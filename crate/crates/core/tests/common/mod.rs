//! Independent oracles shared by the integration tests. Nothing here calls
//! into the code paths it checks beyond reading raw tensor values.

#![allow(dead_code)]

use headshare_core::store::{attn_name, ffn_name, TensorStore};
use headshare_core::{HeadRef, ModelConfig};

pub fn raw(store: &TensorStore, name: &str) -> (Vec<f64>, usize) {
    let t = store.get(name).unwrap();
    (t.data().to_f64_vec(), t.shape()[1])
}

/// Columns `[start, start+width)` of a row-major matrix, as a row-major Vec.
pub fn column_block(data: &[f64], cols: usize, start: usize, width: usize) -> Vec<Vec<f64>> {
    let rows = data.len() / cols;
    (0..rows)
        .map(|r| (0..width).map(|c| data[r * cols + start + c]).collect())
        .collect()
}

/// Vector a match function compares, built by index arithmetic from the fused tensors.
pub fn match_vectors(store: &TensorStore, cfg: &ModelConfig, h: HeadRef, mats: &[&str]) -> Vec<f64> {
    let blocks: Vec<Vec<Vec<f64>>> = mats
        .iter()
        .map(|m| {
            let (data, cols) = raw(store, &attn_name(h.layer, m));
            let width = cols / cfg.heads_per_layer;
            column_block(&data, cols, h.head * width, width)
        })
        .collect();
    let mut out = Vec::new();
    for r in 0..cfg.embed_dim {
        for b in &blocks {
            out.extend_from_slice(&b[r]);
        }
    }
    out
}

/// `u·v / sqrt(|u|²|v|²)` with each sum accumulated left to right, clamped to [-1, 1].
pub fn cosine_oracle(u: &[f64], v: &[f64]) -> f64 {
    assert_eq!(u.len(), v.len());
    let mut dot = 0.0;
    for i in 0..u.len() {
        dot += u[i] * v[i];
    }
    let mut uu = 0.0;
    for x in u {
        uu += x * x;
    }
    let mut vv = 0.0;
    for x in v {
        vv += x * x;
    }
    (dot / (uu * vv).sqrt()).clamp(-1.0, 1.0)
}

pub fn oracle_score(store: &TensorStore, cfg: &ModelConfig, i: HeadRef, j: HeadRef, mats: &[&str]) -> f64 {
    cosine_oracle(&match_vectors(store, cfg, i, mats), &match_vectors(store, cfg, j, mats))
}

fn matmul(a: &[Vec<f64>], b: &[f64], b_cols: usize) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| {
            (0..b_cols)
                .map(|c| row.iter().enumerate().map(|(k, x)| x * b[k * b_cols + c]).sum())
                .collect()
        })
        .collect()
}

/// Straight-line forward pass returning the logits and per-head attention maps.
pub fn oracle_forward(store: &TensorStore, cfg: &ModelConfig, ids: &[usize]) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let n = ids.len();
    let d = cfg.embed_dim;
    let (embed, _) = raw(store, "embed.tok");
    let mut h: Vec<Vec<f64>> = ids.iter().map(|&t| embed[t * d..(t + 1) * d].to_vec()).collect();
    let mut maps = Vec::new();
    for l in 0..cfg.num_layers {
        let (wq, qc) = raw(store, &attn_name(l, "wq"));
        let (wk, kc) = raw(store, &attn_name(l, "wk"));
        let (wv, vc) = raw(store, &attn_name(l, "wv"));
        let (wo, _) = raw(store, &attn_name(l, "wo"));
        let q = matmul(&h, &wq, qc);
        let k = matmul(&h, &wk, kc);
        let v = matmul(&h, &wv, vc);
        let mut concat = vec![vec![0.0; vc]; n];
        for head in 0..cfg.heads_per_layer {
            let (dq, dv) = (cfg.head_dim_q, cfg.head_dim_v);
            let mut a = vec![vec![0.0; n]; n];
            for i in 0..n {
                let mut s = vec![f64::NEG_INFINITY; n];
                for j in 0..=i {
                    let mut acc = 0.0;
                    for c in 0..dq {
                        acc += q[i][head * dq + c] * k[j][head * dq + c];
                    }
                    s[j] = acc / (dq as f64).sqrt();
                }
                let m = s[..=i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s[..=i].iter().map(|x| (x - m).exp()).sum();
                for j in 0..=i {
                    a[i][j] = (s[j] - m).exp() / z;
                }
            }
            for i in 0..n {
                for c in 0..dv {
                    concat[i][head * dv + c] = (0..n).map(|j| a[i][j] * v[j][head * dv + c]).sum();
                }
            }
            maps.push(a);
        }
        let attn = matmul(&concat, &wo, d);
        let y: Vec<Vec<f64>> = h.iter().zip(&attn).map(|(x, o)| x.iter().zip(o).map(|(a, b)| a + b).collect()).collect();
        let (wg, fc) = raw(store, &ffn_name(l, "gate"));
        let (wu, _) = raw(store, &ffn_name(l, "up"));
        let (wd, _) = raw(store, &ffn_name(l, "down"));
        let g = matmul(&y, &wg, fc);
        let u = matmul(&y, &wu, fc);
        let act: Vec<Vec<f64>> = g
            .iter()
            .zip(&u)
            .map(|(gr, ur)| gr.iter().zip(ur).map(|(&gv, &uv)| gv / (1.0 + (-gv).exp()) * uv).collect())
            .collect();
        let ffn = matmul(&act, &wd, d);
        h = y.iter().zip(&ffn).map(|(x, o)| x.iter().zip(o).map(|(a, b)| a + b).collect()).collect();
    }
    let (wout, vocab) = raw(store, "head.out");
    (matmul(&h, &wout, vocab), maps)
}

/// Mean cross-entropy using compensated summation and no max shift.
pub fn oracle_cross_entropy(logits: &[Vec<f64>], targets: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &t) in logits.iter().zip(targets) {
        let (mut sum, mut comp) = (0.0f64, 0.0f64);
        for &x in row {
            let y = x.exp() - comp;
            let s = sum + y;
            comp = (s - sum) - y;
            sum = s;
        }
        total += sum.ln() - row[t];
    }
    total / targets.len() as f64
}

pub fn oracle_loss(store: &TensorStore, cfg: &ModelConfig, ids: &[usize], targets: &[usize]) -> f64 {
    oracle_cross_entropy(&oracle_forward(store, cfg, ids).0, targets)
}

/// Norm-wise relative error `‖a − b‖ / max(‖a‖, ‖b‖)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Central differences of `f` w.r.t. every entry of tensor `name`.
pub fn finite_difference(store: &TensorStore, name: &str, eps: f64, f: impl Fn(&TensorStore) -> f64) -> Vec<f64> {
    let n = store.get(name).unwrap().len();
    let mut work = store.clone();
    (0..n)
        .map(|i| {
            let orig = work.get(name).unwrap().as_f64_slice().unwrap()[i];
            work.get_mut(name).unwrap().as_f64_slice_mut().unwrap()[i] = orig + eps;
            let up = f(&work);
            work.get_mut(name).unwrap().as_f64_slice_mut().unwrap()[i] = orig - eps;
            let down = f(&work);
            work.get_mut(name).unwrap().as_f64_slice_mut().unwrap()[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// Exhaustive argmax over all heads in strictly earlier layers, smallest head on ties.
pub fn oracle_candidates(store: &TensorStore, cfg: &ModelConfig, mats: &[&str]) -> Vec<(HeadRef, HeadRef, f64)> {
    let mut out = Vec::new();
    for l in 1..cfg.num_layers {
        for h in 0..cfg.heads_per_layer {
            let this = HeadRef::new(l, h);
            let mut best: Option<(HeadRef, f64)> = None;
            for l2 in 0..l {
                for h2 in 0..cfg.heads_per_layer {
                    let other = HeadRef::new(l2, h2);
                    let s = oracle_score(store, cfg, this, other, mats);
                    if best.is_none_or(|(_, b)| s > b) {
                        best = Some((other, s));
                    }
                }
            }
            let (b, s) = best.unwrap();
            out.push((this, b, s));
        }
    }
    out
}
