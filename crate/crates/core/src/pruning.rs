//! Patch-importance indicators, top-k partitioning and patch fusion.
//!
//! Every indicator reduces the per-head class-token attention (`H x N`,
//! class column already removed) to one score per candidate token:
//!
//! - `mean`: average over heads (the EViT baseline)
//! - `variance`: population variance over heads, `(1/H) sum_h (a_h - mean)^2`
//! - `medad`: `median_h |a_h - median_h(a_h)|`
//!
//! The variance uses the squared deviation. Written without the square the
//! sum of deviations from the mean is identically zero.
//!
//! Medians of an even number of heads take the midpoint of the two central
//! order statistics, for both the inner and the outer median.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ClassAttention;

pub const DEFAULT_TEMPERATURE: f64 = 0.25;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndicatorKind {
    None,
    Mean,
    Variance,
    Medad,
}

impl IndicatorKind {
    pub const ALL: [IndicatorKind; 4] = [
        IndicatorKind::None,
        IndicatorKind::Mean,
        IndicatorKind::Variance,
        IndicatorKind::Medad,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            IndicatorKind::None => "none",
            IndicatorKind::Mean => "mean",
            IndicatorKind::Variance => "variance",
            IndicatorKind::Medad => "medad",
        }
    }
}

impl fmt::Display for IndicatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IndicatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        IndicatorKind::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown indicator `{s}` (none, mean, variance, medad)"))
    }
}

/// One importance score per candidate token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndicatorScores {
    pub kind: IndicatorKind,
    pub scores: Vec<f32>,
    /// Token index each score refers to.
    pub candidate_indices: Vec<usize>,
}

impl IndicatorScores {
    /// Scores over candidates `0..scores.len()`.
    pub fn new(kind: IndicatorKind, scores: Vec<f32>) -> Self {
        let candidate_indices = (0..scores.len()).collect();
        IndicatorScores {
            kind,
            scores,
            candidate_indices,
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Partition of the candidate tokens. `kept` and `pruned` hold token
/// indices (taken from `scores.candidate_indices`) in ascending order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneDecision {
    pub kept: Vec<usize>,
    pub pruned: Vec<usize>,
    pub scores: IndicatorScores,
    pub fusion_token_built: bool,
}

impl PruneDecision {
    /// Score of each pruned token, aligned with `pruned`.
    pub fn pruned_scores(&self) -> Vec<f32> {
        self.pruned
            .iter()
            .map(|t| {
                let pos = self
                    .scores
                    .candidate_indices
                    .iter()
                    .position(|c| c == t)
                    .expect("pruned token is a candidate");
                self.scores.scores[pos]
            })
            .collect()
    }
}

/// Number of candidates retained: `max(1, floor(r * n + 0.5))`.
pub fn keep_count(keep_rate: f64, candidates: usize) -> usize {
    let k = (keep_rate * candidates as f64 + 0.5).floor() as usize;
    k.clamp(1, candidates.max(1))
}

fn check_attention(attn: &ClassAttention) -> Result<()> {
    if attn.heads() == 0 || attn.candidates() == 0 {
        return Err(Error::Pruning(format!(
            "empty class attention ({} heads x {} candidates)",
            attn.heads(),
            attn.candidates()
        )));
    }
    Ok(())
}

fn per_candidate<F>(attn: &ClassAttention, kind: IndicatorKind, f: F) -> Result<IndicatorScores>
where
    F: FnMut(&mut [f64]) -> f64,
{
    check_attention(attn)?;
    let mut f = f;
    let heads = attn.per_head();
    let mut column = vec![0.0f64; heads.rows()];
    let scores = (0..heads.cols())
        .map(|j| {
            for (h, slot) in column.iter_mut().enumerate() {
                *slot = heads.get(h, j) as f64;
            }
            f(&mut column) as f32
        })
        .collect();
    Ok(IndicatorScores {
        kind,
        scores,
        candidate_indices: attn.candidate_indices().to_vec(),
    })
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Median via quickselect; reorders `values`.
fn median_in_place(values: &mut [f64]) -> f64 {
    let n = values.len();
    let mid = n / 2;
    let (left, upper, _) = values.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = left.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

pub fn mean_score(attn: &ClassAttention) -> Result<IndicatorScores> {
    per_candidate(attn, IndicatorKind::Mean, |col| mean(col))
}

pub fn variance_score(attn: &ClassAttention) -> Result<IndicatorScores> {
    per_candidate(attn, IndicatorKind::Variance, |col| {
        let m = mean(col);
        col.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / col.len() as f64
    })
}

pub fn medad_score(attn: &ClassAttention) -> Result<IndicatorScores> {
    per_candidate(attn, IndicatorKind::Medad, |col| {
        let med = median_in_place(col);
        for a in col.iter_mut() {
            *a = (*a - med).abs();
        }
        median_in_place(col)
    })
}

/// Dispatches on `kind`. `None` yields all-zero scores, which with the
/// index tie-break keeps the earliest candidates.
pub fn score(kind: IndicatorKind, attn: &ClassAttention) -> Result<IndicatorScores> {
    match kind {
        IndicatorKind::None => {
            check_attention(attn)?;
            Ok(IndicatorScores {
                kind,
                scores: vec![0.0; attn.candidates()],
                candidate_indices: attn.candidate_indices().to_vec(),
            })
        }
        IndicatorKind::Mean => mean_score(attn),
        IndicatorKind::Variance => variance_score(attn),
        IndicatorKind::Medad => medad_score(attn),
    }
}

/// Keeps the `keep_count(keep_rate, N)` highest-scoring candidates.
/// Equal scores favour the lower candidate position.
pub fn select_topk(scores: IndicatorScores, keep_rate: f64) -> Result<PruneDecision> {
    if !(keep_rate > 0.0 && keep_rate <= 1.0) {
        return Err(Error::Pruning(format!(
            "keep rate {keep_rate} outside (0, 1]"
        )));
    }
    if scores.is_empty() {
        return Err(Error::Pruning("no candidates to select from".into()));
    }
    if scores.scores.len() != scores.candidate_indices.len() {
        return Err(Error::Pruning(format!(
            "{} scores for {} candidates",
            scores.scores.len(),
            scores.candidate_indices.len()
        )));
    }
    let n = scores.len();
    let k = keep_count(keep_rate, n);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores.scores[b]
            .partial_cmp(&scores.scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep_mask = vec![false; n];
    for &pos in &order[..k] {
        keep_mask[pos] = true;
    }
    let (kept, pruned): (Vec<_>, Vec<_>) = (0..n).partition(|&pos| keep_mask[pos]);
    let to_tokens =
        |v: Vec<usize>| -> Vec<usize> { v.into_iter().map(|p| scores.candidate_indices[p]).collect() };

    Ok(PruneDecision {
        kept: to_tokens(kept),
        pruned: to_tokens(pruned),
        scores,
        fusion_token_built: false,
    })
}

/// `softmax(a_j / T)` over the pruned set.
pub fn fusion_weights(scores: &[f32], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) {
        return Err(Error::Pruning(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let logits: Vec<f64> = scores.iter().map(|&a| a as f64 / temperature).collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Temperature-weighted sum of the pruned token rows. Returns `None` when
/// nothing was pruned.
pub fn fuse<R: AsRef<[f32]>>(
    pruned_tokens: &[R],
    pruned_scores: &[f32],
    temperature: f64,
) -> Result<Option<Vec<f32>>> {
    if pruned_tokens.len() != pruned_scores.len() {
        return Err(Error::Pruning(format!(
            "{} pruned tokens but {} scores",
            pruned_tokens.len(),
            pruned_scores.len()
        )));
    }
    let weights = fusion_weights(pruned_scores, temperature)?;
    let Some(first) = pruned_tokens.first() else {
        return Ok(None);
    };
    let width = first.as_ref().len();
    let mut acc = vec![0.0f64; width];
    for (row, w) in pruned_tokens.iter().zip(&weights) {
        let row = row.as_ref();
        if row.len() != width {
            return Err(Error::shape(
                "fuse",
                format!("token of width {}, expected {width}", row.len()),
            ));
        }
        for (a, &x) in acc.iter_mut().zip(row) {
            *a += w * x as f64;
        }
    }
    Ok(Some(acc.into_iter().map(|a| a as f32).collect()))
}
