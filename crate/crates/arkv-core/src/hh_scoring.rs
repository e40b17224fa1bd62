//! Heavy-hitter importance scores over the non-window keys.
//!
//! Each key's score is the mean of its windowed attention weights plus a
//! gamma-weighted population variance. For grouped-query attention the
//! moments are pooled over the query heads of each KV group, then averaged
//! across groups so one score vector aligns with the shared KV entries.

use crate::error::{CoreError, Result};

/// Assignment of query heads to KV groups: head `h` belongs to group
/// `h / (n_query_heads / n_groups)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupMap {
    pub n_query_heads: usize,
    pub n_groups: usize,
}

impl GroupMap {
    pub fn new(n_query_heads: usize, n_groups: usize) -> Result<Self> {
        if n_groups == 0 || n_query_heads == 0 || n_query_heads % n_groups != 0 {
            return Err(CoreError::Config(format!(
                "{n_query_heads} query heads not divisible into {n_groups} KV groups"
            )));
        }
        Ok(GroupMap { n_query_heads, n_groups })
    }

    pub fn heads_per_group(&self) -> usize {
        self.n_query_heads / self.n_groups
    }
}

/// Per-key importance scores for one layer, aligned with the key axis of
/// the window they were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct HhScoreVector {
    pub layer_id: usize,
    pub scores: Vec<f64>,
}

impl HhScoreVector {
    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

/// Score every key of the window: `S_k = mu_k + gamma * sigma2_k`.
///
/// Moments are pooled over `(h, q)` samples within each KV group
/// (population variance), then averaged across groups.
pub fn hh_scores(
    window: &crate::attn_stats::AttnWindow,
    gamma: f64,
    group_map: &GroupMap,
) -> Result<HhScoreVector> {
    if window.heads != group_map.n_query_heads {
        return Err(CoreError::InvalidArgument(format!(
            "window has {} heads but group map expects {}",
            window.heads, group_map.n_query_heads
        )));
    }
    if window.queries == 0 || window.keys == 0 {
        return Err(CoreError::InvalidArgument(
            "empty attention window".to_string(),
        ));
    }
    let hpg = group_map.heads_per_group();
    let samples = (hpg * window.queries) as f64;
    let mut scores = vec![0.0f64; window.keys];
    for g in 0..group_map.n_groups {
        for (k, score) in scores.iter_mut().enumerate() {
            let mut sum = 0.0f64;
            let mut sum_sq = 0.0f64;
            for h in g * hpg..(g + 1) * hpg {
                for q in 0..window.queries {
                    let w = window.at(h, q, k) as f64;
                    sum += w;
                    sum_sq += w * w;
                }
            }
            let mean = sum / samples;
            let var = (sum_sq / samples - mean * mean).max(0.0);
            *score += mean + gamma * var;
        }
    }
    let inv_groups = 1.0 / group_map.n_groups as f64;
    for s in &mut scores {
        *s *= inv_groups;
    }
    Ok(HhScoreVector { layer_id: window.layer_id, scores })
}

/// Blend a fresh score vector into a running one: `S~ = beta*S~ + (1-beta)*S`.
///
/// Score vectors from different steps cover different key sets, so blending
/// is aligned by absolute position; fresh keys with no history start at
/// their fresh value.
pub fn smooth_scores(
    previous: &std::collections::HashMap<usize, f64>,
    fresh: &HhScoreVector,
    fresh_positions: &[usize],
    beta: f64,
) -> HhScoreVector {
    debug_assert_eq!(fresh.scores.len(), fresh_positions.len());
    let scores = fresh
        .scores
        .iter()
        .zip(fresh_positions)
        .map(|(&s, pos)| match previous.get(pos) {
            Some(&old) => beta * old + (1.0 - beta) * s,
            None => s,
        })
        .collect();
    HhScoreVector { layer_id: fresh.layer_id, scores }
}

/// Indices of the `b` highest scores, ties broken by lower position first.
/// The returned set is sorted ascending by position.
pub fn top_b(scores: &[f64], b: usize) -> Result<Vec<usize>> {
    if b > scores.len() {
        return Err(CoreError::InvalidArgument(format!(
            "top-b of {b} from {} scores",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &c| {
        scores[c]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&c))
    });
    let mut picked: Vec<usize> = order[..b].to_vec();
    picked.sort_unstable();
    Ok(picked)
}
