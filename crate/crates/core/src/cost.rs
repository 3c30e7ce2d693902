//! Closed-form multiply-accumulate count of the pruned forward pass.
//!
//! One MAC counts as one FLOP. Only matrix products are counted (patch
//! projection, QKV, attention logits, attention x values, output
//! projection, MLP, classifier head); normalisation, softmax, GELU, bias
//! adds and the fusion weighted sum are not. This is the same convention
//! the instrumented kernel in [`crate::tensor`] follows, so for any config
//! the analytic total equals the counted total of a real forward pass.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::ModelConfig;
use crate::pruning::{keep_count, IndicatorKind};

/// Cost of one block, in MACs, when attention sees `attn_tokens` and the
/// MLP sees `mlp_tokens`.
pub fn block_macs_split(attn_tokens: u64, mlp_tokens: u64, cfg: &ModelConfig) -> u64 {
    let n = attn_tokens;
    let d = cfg.embed_dim as u64;
    let dq = cfg.qkv_dim as u64;
    let hidden = cfg.mlp_hidden() as u64;
    let qkv = 3 * n * d * dq;
    let logits = n * n * dq;
    let weighted_values = n * n * dq;
    let out_proj = n * dq * d;
    let mlp = 2 * mlp_tokens * d * hidden;
    qkv + logits + weighted_values + out_proj + mlp
}

/// Cost of a block that does not prune.
pub fn block_macs(tokens: u64, cfg: &ModelConfig) -> u64 {
    block_macs_split(tokens, tokens, cfg)
}

pub fn embedding_macs(cfg: &ModelConfig) -> u64 {
    (cfg.num_patches() * cfg.patch_dim() * cfg.embed_dim) as u64
}

pub fn head_macs(cfg: &ModelConfig) -> u64 {
    (cfg.embed_dim * cfg.num_classes) as u64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCost {
    /// 1-indexed block position.
    pub block: usize,
    /// Tokens entering the block (class and fusion included).
    pub tokens_in: usize,
    /// Tokens seen by the MLP; smaller than `tokens_in` only at pruning blocks.
    pub tokens_mlp: usize,
    pub macs: u64,
}

/// Token counts of one pruning stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub block: usize,
    pub candidates: usize,
    pub kept: usize,
    pub pruned: usize,
    pub fusion_appended: bool,
    pub tokens_after: usize,
}

/// Walks the pruning schedule without touching any tensors.
///
/// Candidates at a stage are all non-class tokens present, so a fusion
/// token from an earlier stage is counted as one.
pub fn stage_schedule(cfg: &ModelConfig) -> Vec<StageCounts> {
    let mut candidates = cfg.num_patches();
    let mut out = Vec::with_capacity(cfg.prune_block_indices.len());
    for &block in &cfg.prune_block_indices {
        let kept = if cfg.indicator == IndicatorKind::None {
            candidates
        } else {
            keep_count(cfg.keep_rate, candidates)
        };
        let pruned = candidates - kept;
        let fusion_appended = cfg.fusion_enabled && pruned > 0;
        let after = kept + usize::from(fusion_appended);
        out.push(StageCounts {
            block,
            candidates,
            kept,
            pruned,
            fusion_appended,
            tokens_after: 1 + after,
        });
        candidates = after;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub per_block: Vec<BlockCost>,
    pub stages: Vec<StageCounts>,
    pub embedding_macs: u64,
    pub head_macs: u64,
    pub total_macs: u64,
    pub total_gflops: f64,
    pub config_echo: ModelConfig,
}

impl FlopsReport {
    pub fn block_total(&self) -> u64 {
        self.per_block.iter().map(|b| b.macs).sum()
    }

    /// Human-readable breakdown.
    pub fn render(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        let _ = writeln!(s, "# MAC count (1 MAC = 1 FLOP; matmuls only)");
        let _ = writeln!(s, "embedding          {:>14}", self.embedding_macs);
        for b in &self.per_block {
            let _ = writeln!(
                s,
                "block {:>2}  n={:>4}/{:<4} {:>14}",
                b.block, b.tokens_in, b.tokens_mlp, b.macs
            );
        }
        let _ = writeln!(s, "head               {:>14}", self.head_macs);
        let _ = writeln!(
            s,
            "total              {:>14}  ({:.2} GFLOPs)",
            self.total_macs, self.total_gflops
        );
        s
    }
}

pub fn model_gflops(cfg: &ModelConfig) -> Result<FlopsReport> {
    cfg.validate()?;
    let schedule = stage_schedule(cfg);
    let mut tokens = 1 + cfg.num_patches();
    let mut per_block = Vec::with_capacity(cfg.depth);
    for block in 1..=cfg.depth {
        let mlp_tokens = schedule
            .iter()
            .find(|s| s.block == block)
            .map_or(tokens, |s| s.tokens_after);
        per_block.push(BlockCost {
            block,
            tokens_in: tokens,
            tokens_mlp: mlp_tokens,
            macs: block_macs_split(tokens as u64, mlp_tokens as u64, cfg),
        });
        tokens = mlp_tokens;
    }
    let embedding = embedding_macs(cfg);
    let head = head_macs(cfg);
    let total = embedding + head + per_block.iter().map(|b| b.macs).sum::<u64>();
    Ok(FlopsReport {
        per_block,
        stages: schedule,
        embedding_macs: embedding,
        head_macs: head,
        total_macs: total,
        total_gflops: total as f64 / 1e9,
        config_echo: cfg.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_token_block() {
        let cfg = ModelConfig::deit_small();
        let d = 384u64;
        assert_eq!(block_macs(1, &cfg), 3 * d * d + 2 * d + d * d + 2 * 4 * d * d);
    }

    #[test]
    fn superlinear_in_tokens() {
        let cfg = ModelConfig::deit_small();
        for n in [1u64, 10, 197] {
            assert!(block_macs(2 * n, &cfg) > 2 * block_macs(n, &cfg));
        }
    }

    #[test]
    fn report_totals_add_up() {
        let cfg = ModelConfig {
            fusion_enabled: true,
            ..ModelConfig::deit_small()
        };
        let r = model_gflops(&cfg).unwrap();
        assert_eq!(r.total_macs, r.block_total() + r.embedding_macs + r.head_macs);
        assert_eq!(r.per_block.len(), 12);
        assert_eq!(r.per_block[3].tokens_in, 197);
        assert_eq!(r.per_block[3].tokens_mlp, 139);
        assert_eq!(r.per_block[4].tokens_in, 139);
    }

    #[test]
    fn schedule_without_fusion() {
        let s = stage_schedule(&ModelConfig::deit_small());
        let kept: Vec<_> = s.iter().map(|s| s.kept).collect();
        assert_eq!(kept, vec![137, 96, 67]);
        assert_eq!(s[0].pruned, 59);
    }

    #[test]
    fn schedule_with_fusion_counts_fusion_as_candidate() {
        let cfg = ModelConfig {
            fusion_enabled: true,
            ..ModelConfig::deit_small()
        };
        let s = stage_schedule(&cfg);
        assert_eq!(s[1].candidates, 138);
        assert_eq!(s[1].kept, 97);
        assert_eq!(s[2].candidates, 98);
    }

    #[test]
    fn none_indicator_keeps_everything() {
        let cfg = ModelConfig::deit_small().without_pruning();
        let r = model_gflops(&cfg).unwrap();
        assert!(r.per_block.iter().all(|b| b.tokens_in == 197 && b.tokens_mlp == 197));
    }
}
