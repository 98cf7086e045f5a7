//! Analytic parameter accounting for a share plan.
//!
//! Only parameter counts are reported. Measured GPU memory depends on the
//! runtime allocator and is not modelled.

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::sharing::SharePlan;

pub const MEMORY_NOTE: &str =
    "parameter counts only; allocator-dependent GPU memory is not modelled";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSavings {
    pub mha_saved: u64,
    pub ffn_saved: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub total_params: u64,
    pub shared_params_saved: u64,
    pub effective_params: u64,
    pub ratio_vs_base: f64,
    pub per_block: BlockSavings,
}

/// Savings from tying `plan` on a model of `base_total` parameters.
pub fn memory_report(cfg: &ModelConfig, plan: &SharePlan, base_total: u64) -> Result<MemoryReport> {
    plan.validate(cfg)?;
    memory_report_for_counts(cfg, plan.pairs.len(), plan.ffn_layers.len(), base_total)
}

/// Same arithmetic as [`memory_report`] from pair counts alone.
pub fn memory_report_for_counts(cfg: &ModelConfig, head_pairs: usize, ffn_pairs: usize, base_total: u64) -> Result<MemoryReport> {
    cfg.validate()?;
    if head_pairs > cfg.total_heads() - cfg.heads_per_layer || ffn_pairs >= cfg.num_layers.max(1) {
        return Err(Error::PlanConfigMismatch(format!(
            "{head_pairs} head pairs / {ffn_pairs} FFN pairs exceed what the model can tie"
        )));
    }
    let block = cfg.block_params();
    if base_total < block {
        return Err(Error::InvalidArgument(format!(
            "base total {base_total} is below the {block} attention+FFN parameters of the config"
        )));
    }
    let per_block = BlockSavings {
        mha_saved: head_pairs as u64 * cfg.params_per_head(),
        ffn_saved: ffn_pairs as u64 * cfg.params_per_ffn(),
    };
    let saved = per_block.mha_saved + per_block.ffn_saved;
    let effective = base_total - saved;
    Ok(MemoryReport {
        total_params: base_total,
        shared_params_saved: saved,
        effective_params: effective,
        ratio_vs_base: effective as f64 / base_total as f64,
        per_block,
    })
}
