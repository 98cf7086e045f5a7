//! PostShare: train with a penalty that pulls the q/k/v matrices of each
//! planned head pair together, then tie them with [`crate::sharing`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::engine::{self, TokenSequence, Weights};
use crate::error::{Error, Result};
use crate::sharing::{apply_share_plan, SharePlan};
use crate::store::{attn_name, HeadRef, Tensor, TensorData, TensorStore};
use crate::toy;

/// Pair differences with a norm below this get a zero subgradient.
pub const GRAD_NORM_GUARD: f64 = 1e-12;

/// How each pair difference enters the regularizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegNorm {
    /// `‖Wi − Wj‖₂` (Frobenius, unsquared).
    #[default]
    Frobenius,
    /// `‖Wi − Wj‖₂²`, for ablation.
    Squared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PostShareConfig {
    pub gamma: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub steps: usize,
    /// 0 disables checkpoints.
    pub checkpoint_every: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub reg: RegOptions,
}

impl Default for PostShareConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.95,
            epsilon: 1e-8,
            steps: 100,
            checkpoint_every: 0,
            batch_size: 8,
            seed: 0,
            reg: RegOptions::default(),
        }
    }
}

impl PostShareConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(Error::InvalidArgument(format!("gamma {} must be finite and >= 0", self.gamma)));
        }
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("steps and batch_size must be >= 1".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidArgument(format!("learning rate {} is invalid", self.learning_rate)));
        }
        Ok(())
    }
}

/// Weights plus Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub weights: TensorStore,
    pub first_moment: TensorStore,
    pub second_moment: TensorStore,
    pub step: usize,
}

impl TrainState {
    /// Fresh state; weights are widened to f64.
    pub fn new(weights: &TensorStore) -> Self {
        let mut w = weights.zeros_like();
        for (name, t) in weights.iter() {
            let dst = w.get_mut(name).expect("same names");
            *dst = Tensor::new(t.shape().to_vec(), TensorData::F64(t.data().to_f64_vec()))
                .expect("shape unchanged");
        }
        Self {
            first_moment: weights.zeros_like(),
            second_moment: weights.zeros_like(),
            weights: w,
            step: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub task: f64,
    pub reg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub task: f64,
    pub reg: f64,
    pub total: f64,
}

const REG_PROJECTIONS: [&str; 3] = ["wq", "wk", "wv"];
const REG_PROJECTIONS_WITH_OUTPUT: [&str; 4] = ["wq", "wk", "wv", "wo"];

/// Regularizer variant. The default is the q/k/v Frobenius form; adding the
/// output projection is an ablation, since tying also copies `wo`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RegOptions {
    pub norm: RegNorm,
    #[serde(default)]
    pub include_output: bool,
}

impl RegOptions {
    fn projections(&self) -> &'static [&'static str] {
        if self.include_output {
            &REG_PROJECTIONS_WITH_OUTPUT
        } else {
            &REG_PROJECTIONS
        }
    }
}

/// Flat indices of `head`'s block inside the fused `proj` tensor: a column
/// block for wq/wk/wv, a row block for wo. Also checks the tensor shape.
fn block_indices(store: &TensorStore, cfg: &ModelConfig, head: HeadRef, proj: &str) -> Result<Vec<usize>> {
    let name = attn_name(head.layer, proj);
    let t = store.get(&name)?;
    let h = cfg.heads_per_layer;
    let d = cfg.embed_dim;
    let width = match proj {
        "wq" => cfg.head_dim_q,
        "wk" => cfg.head_dim_k,
        _ => cfg.head_dim_v,
    };
    if proj == "wo" {
        if t.shape() != [h * width, d] {
            return Err(Error::ShapeMismatch(name));
        }
        return Ok((head.head * width * d..(head.head + 1) * width * d).collect());
    }
    if t.shape() != [d, h * width] {
        return Err(Error::ShapeMismatch(name));
    }
    Ok((0..d)
        .flat_map(|r| (0..width).map(move |c| r * h * width + head.head * width + c))
        .collect())
}

fn gather(store: &TensorStore, head: HeadRef, proj: &str, idx: &[usize]) -> Result<Vec<f64>> {
    let data = store.get(&attn_name(head.layer, proj))?.data().to_f64_vec();
    Ok(idx.iter().map(|&i| data[i]).collect())
}

fn diff_norm_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `(1/|N|) Σ_pairs Σ_{q,k,v} ‖W_keep − W_replace‖₂`.
pub fn weight_similarity_loss(store: &TensorStore, cfg: &ModelConfig, plan: &SharePlan) -> Result<f64> {
    weight_similarity_loss_with(store, cfg, plan, RegOptions::default())
}

pub fn weight_similarity_loss_with(store: &TensorStore, cfg: &ModelConfig, plan: &SharePlan, opts: RegOptions) -> Result<f64> {
    if plan.pairs.is_empty() {
        return Err(Error::EmptyPlan);
    }
    plan.validate(cfg)?;
    let mut total = 0.0;
    for p in &plan.pairs {
        for &proj in opts.projections() {
            let a = gather(store, p.keep, proj, &block_indices(store, cfg, p.keep, proj)?)?;
            let b = gather(store, p.replace, proj, &block_indices(store, cfg, p.replace, proj)?)?;
            let sq = diff_norm_sq(&a, &b);
            total += match opts.norm {
                RegNorm::Frobenius => sq.sqrt(),
                RegNorm::Squared => sq,
            };
        }
    }
    Ok(total / plan.pairs.len() as f64)
}

/// Analytic gradient of the regularizer, as a zero-initialised store with
/// contributions only in the paired heads' blocks.
pub fn weight_similarity_grad(store: &TensorStore, cfg: &ModelConfig, plan: &SharePlan, opts: RegOptions) -> Result<TensorStore> {
    if plan.pairs.is_empty() {
        return Err(Error::EmptyPlan);
    }
    plan.validate(cfg)?;
    let mut grad = store.zeros_like();
    let scale = 1.0 / plan.pairs.len() as f64;
    for p in &plan.pairs {
        for &proj in opts.projections() {
            let keep_idx = block_indices(store, cfg, p.keep, proj)?;
            let replace_idx = block_indices(store, cfg, p.replace, proj)?;
            let a = gather(store, p.keep, proj, &keep_idx)?;
            let b = gather(store, p.replace, proj, &replace_idx)?;
            let factor = match opts.norm {
                RegNorm::Frobenius => {
                    let n = diff_norm_sq(&a, &b).sqrt();
                    if n < GRAD_NORM_GUARD {
                        continue;
                    }
                    scale / n
                }
                RegNorm::Squared => 2.0 * scale,
            };
            for (head, idx, sign) in [(p.keep, &keep_idx, 1.0), (p.replace, &replace_idx, -1.0)] {
                let g = grad
                    .get_mut(&attn_name(head.layer, proj))?
                    .as_f64_slice_mut()
                    .expect("zeros_like is f64");
                for (k, &i) in idx.iter().enumerate() {
                    g[i] += sign * factor * (a[k] - b[k]);
                }
            }
        }
    }
    Ok(grad)
}

/// Mean task loss over a batch plus `gamma` times the regularizer.
pub fn combined_loss(
    store: &TensorStore,
    cfg: &ModelConfig,
    plan: &SharePlan,
    batch: &[(TokenSequence, TokenSequence)],
    gamma: f64,
) -> Result<LossParts> {
    combined_loss_with(store, cfg, plan, batch, gamma, RegOptions::default())
}

pub fn combined_loss_with(
    store: &TensorStore,
    cfg: &ModelConfig,
    plan: &SharePlan,
    batch: &[(TokenSequence, TokenSequence)],
    gamma: f64,
    opts: RegOptions,
) -> Result<LossParts> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let w = Weights::from_store(store, cfg)?;
    let losses = batch
        .par_iter()
        .map(|(x, t)| engine::forward_with(&w, x).and_then(|tr| engine::cross_entropy(&tr, t)))
        .collect::<Result<Vec<_>>>()?;
    let task = losses.iter().sum::<f64>() / batch.len() as f64;
    let reg = weight_similarity_loss_with(store, cfg, plan, opts)?;
    Ok(LossParts {
        total: task + gamma * reg,
        task,
        reg,
    })
}

/// Draws `size` corpus sequences uniformly with replacement and shifts them
/// into next-token `(input, target)` pairs.
pub fn sample_batch(
    corpus: &[TokenSequence],
    rng: &mut ChaCha8Rng,
    size: usize,
) -> Result<Vec<(TokenSequence, TokenSequence)>> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    (0..size)
        .map(|_| {
            let seq = &corpus[rng.random_range(0..corpus.len())];
            seq.shifted()
                .ok_or_else(|| Error::InvalidArgument("corpus sequences need at least 2 tokens".into()))
        })
        .collect()
}

/// One Adam update of every tensor in `state` with gradient `grad`.
pub fn adam_step(state: &mut TrainState, grad: &TensorStore, pscfg: &PostShareConfig) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - pscfg.beta1.powi(t);
    let bc2 = 1.0 - pscfg.beta2.powi(t);
    let lr = pscfg.learning_rate;
    for (name, g) in grad.iter() {
        let g = g.as_f64_slice().expect("gradients are f64");
        let w = state.weights.get_mut(name)?.as_f64_slice_mut().expect("train weights are f64");
        let m = state.first_moment.get_mut(name)?.as_f64_slice_mut().expect("moments are f64");
        let v = state.second_moment.get_mut(name)?.as_f64_slice_mut().expect("moments are f64");
        for i in 0..g.len() {
            m[i] = pscfg.beta1 * m[i] + (1.0 - pscfg.beta1) * g[i];
            v[i] = pscfg.beta2 * v[i] + (1.0 - pscfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            w[i] -= lr * m_hat / (v_hat.sqrt() + pscfg.epsilon);
        }
    }
    Ok(())
}

fn add_into(dst: &mut TensorStore, src: &TensorStore, scale: f64) -> Result<()> {
    for (name, s) in src.iter() {
        let s = s.as_f64_slice().expect("gradients are f64");
        let d = dst.get_mut(name)?.as_f64_slice_mut().expect("gradients are f64");
        for (a, b) in d.iter_mut().zip(s) {
            *a += scale * b;
        }
    }
    Ok(())
}

/// Runs `pscfg.steps` Adam updates on the combined loss.
///
/// `on_checkpoint` is called after every `checkpoint_every`-th step. Returns
/// the per-step losses, measured at the weights each update started from.
pub fn postshare_train(
    state: &mut TrainState,
    cfg: &ModelConfig,
    plan: &SharePlan,
    corpus: &[TokenSequence],
    pscfg: &PostShareConfig,
    on_checkpoint: impl FnMut(&TrainState) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    if plan.pairs.is_empty() {
        return Err(Error::EmptyPlan);
    }
    plan.validate(cfg)?;
    train_loop(state, cfg, Some(plan), corpus, pscfg, on_checkpoint)
}

/// Task-loss-only training (`gamma` is ignored, `reg` is logged as 0). Used
/// to give toy checkpoints some structure before sharing.
pub fn task_train(
    state: &mut TrainState,
    cfg: &ModelConfig,
    corpus: &[TokenSequence],
    pscfg: &PostShareConfig,
    on_checkpoint: impl FnMut(&TrainState) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    train_loop(state, cfg, None, corpus, pscfg, on_checkpoint)
}

fn train_loop(
    state: &mut TrainState,
    cfg: &ModelConfig,
    plan: Option<&SharePlan>,
    corpus: &[TokenSequence],
    pscfg: &PostShareConfig,
    mut on_checkpoint: impl FnMut(&TrainState) -> Result<()>,
) -> Result<Vec<LossRecord>> {
    pscfg.validate()?;
    for seq in corpus {
        seq.validate(cfg)?;
    }
    let mut rng = toy::rng(pscfg.seed);
    let mut log = Vec::with_capacity(pscfg.steps);
    for _ in 0..pscfg.steps {
        let batch = sample_batch(corpus, &mut rng, pscfg.batch_size)?;
        let w = Weights::from_store(&state.weights, cfg)?;
        let (task, grads) = engine::batch_loss_and_grad(&w, &batch)?;
        let mut grad = grads.into_store(cfg);
        let (reg, gamma) = match plan {
            Some(plan) => {
                let reg = weight_similarity_loss_with(&state.weights, cfg, plan, pscfg.reg)?;
                if pscfg.gamma != 0.0 {
                    let reg_grad = weight_similarity_grad(&state.weights, cfg, plan, pscfg.reg)?;
                    add_into(&mut grad, &reg_grad, pscfg.gamma)?;
                }
                (reg, pscfg.gamma)
            }
            None => (0.0, 0.0),
        };
        let total = task + gamma * reg;
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss(state.step));
        }
        log.push(LossRecord {
            step: state.step,
            task,
            reg,
            total,
        });
        adam_step(state, &grad, pscfg)?;
        if pscfg.checkpoint_every > 0 && state.step % pscfg.checkpoint_every == 0 {
            on_checkpoint(state)?;
        }
    }
    Ok(log)
}

/// Mean absolute logit change caused by tying `plan` on `store`, over `inputs`.
pub fn tie_perturbation(store: &TensorStore, cfg: &ModelConfig, plan: &SharePlan, inputs: &[TokenSequence]) -> Result<f64> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("no inputs".into()));
    }
    let tied = apply_share_plan(store, cfg, plan)?;
    let base = Weights::from_store(store, cfg)?;
    let tied = Weights::from_store(&tied, cfg)?;
    let per_input = inputs
        .par_iter()
        .map(|x| {
            let a = engine::forward_with(&base, x)?.logits;
            let b = engine::forward_with(&tied, x)?.logits;
            Ok(((&a - &b).mapv(f64::abs).sum(), a.len()))
        })
        .collect::<Result<Vec<_>>>()?;
    let (sum, count) = per_input
        .into_iter()
        .fold((0.0, 0usize), |(s, c), (ds, dc)| (s + ds, c + dc));
    Ok(sum / count as f64)
}
