//! Tri-state reassignment: pick the keep set by heavy-hitter rank with a
//! slack factor, split it into original and quantized slots under the layer
//! budget, evict the rest, and always re-protect the recency window.

use crate::error::{CoreError, Result};
use crate::hh_scoring::HhScoreVector;
use crate::kv_store::{LayerBudget, QuantizedEntry, TokenEntry, TriStateCache};
use crate::quant::{dequantize_token, quantize_token};

/// Partition of the current cache rows `[0, K)` into the three states.
/// Indices are sequence-order row offsets, not absolute positions; the
/// last W rows are always in `originals`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TailorPlan {
    pub layer_id: usize,
    pub originals: Vec<usize>,
    pub quantize: Vec<usize>,
    pub evict: Vec<usize>,
}

impl TailorPlan {
    /// Total rows covered by the plan.
    pub fn len(&self) -> usize {
        self.originals.len() + self.quantize.len() + self.evict.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// State-change counts from applying one plan.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TailorCounts {
    pub kept_original: usize,
    pub kept_quantized: usize,
    pub promoted: usize,
    pub demoted: usize,
    pub evicted: usize,
}

/// Rank eligible rows by score descending, older position first on ties.
fn rank_eligible(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Build the tri-state partition for a cache of `k` rows.
///
/// The eligible region is `[0, K-W)`; `scores` must cover exactly that
/// region. The keep set is the top `floor(alpha * (K-W))` eligible rows;
/// the highest-ranked of those fill the original quota beyond the window,
/// the next fill the quantized quota (bounded by budget feasibility), and
/// everything else is evicted. When the original quota alone covers the
/// whole cache strictly under budget, the plan keeps every row at full
/// precision.
pub fn build_plan(
    scores: &HhScoreVector,
    k: usize,
    budget: &LayerBudget,
    alpha: f64,
) -> Result<TailorPlan> {
    let window = budget.window;
    if k <= window {
        return Err(CoreError::InvalidArgument(format!(
            "cache of {k} rows cannot be tailored with window {window}"
        )));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(CoreError::InvalidArgument(format!(
            "alpha must be in (0, 1], got {alpha}"
        )));
    }
    let original_cap = budget.original_tokens_cap();
    if original_cap < window {
        return Err(CoreError::Config(format!(
            "original quota {original_cap} below window {window}"
        )));
    }
    let eligible = k - window;
    if scores.scores.len() != eligible {
        return Err(CoreError::InvalidArgument(format!(
            "expected {eligible} scores for {k} rows, got {}",
            scores.scores.len()
        )));
    }

    let window_rows: Vec<usize> = (eligible..k).collect();
    let o_extra_cap = original_cap - window;

    // No pressure: the whole cache fits at full precision strictly under
    // the budget, so nothing is quantized or evicted.
    if o_extra_cap >= eligible && 2 * (k as u64) < budget.total.half_units() {
        let mut originals: Vec<usize> = (0..eligible).collect();
        originals.extend(window_rows);
        return Ok(TailorPlan {
            layer_id: scores.layer_id,
            originals,
            quantize: Vec::new(),
            evict: Vec::new(),
        });
    }

    let ranking = rank_eligible(&scores.scores);
    let keep = (alpha * eligible as f64).floor() as usize;
    let n_original = keep.min(o_extra_cap);
    // Feasibility: 2*(W + n_original) + n_quant half-units must stay within
    // the total.
    let feasible_quant = budget
        .total
        .half_units()
        .saturating_sub(2 * (window + n_original) as u64) as usize;
    let n_quant = (keep - n_original)
        .min(budget.quant_tokens_cap())
        .min(feasible_quant);

    let mut originals: Vec<usize> = ranking[..n_original].to_vec();
    let mut quantize: Vec<usize> = ranking[n_original..n_original + n_quant].to_vec();
    let mut evict: Vec<usize> = ranking[n_original + n_quant..].to_vec();
    originals.extend(window_rows);
    originals.sort_unstable();
    quantize.sort_unstable();
    evict.sort_unstable();

    Ok(TailorPlan {
        layer_id: scores.layer_id,
        originals,
        quantize,
        evict,
    })
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Target {
    Original,
    Quantize,
    Evict,
}

/// Execute a plan against the cache: quantize demoted rows, dequantize
/// promoted rows (lossy: values re-materialize from their codes), drop
/// evicted rows, preserve sequence order.
pub fn apply_plan(cache: &mut TriStateCache, plan: &TailorPlan) -> Result<TailorCounts> {
    let k = cache.len();
    if plan.len() != k {
        return Err(CoreError::Integrity(format!(
            "plan covers {} rows but cache holds {k}",
            plan.len()
        )));
    }
    let mut target: Vec<Option<Target>> = vec![None; k];
    let mut assign = |rows: &[usize], t: Target| -> Result<()> {
        for &r in rows {
            if r >= k {
                return Err(CoreError::Integrity(format!(
                    "plan references row {r} outside cache of {k}"
                )));
            }
            if target[r].is_some() {
                return Err(CoreError::Integrity(format!(
                    "plan assigns row {r} to more than one state"
                )));
            }
            target[r] = Some(t);
        }
        Ok(())
    };
    assign(&plan.originals, Target::Original)?;
    assign(&plan.quantize, Target::Quantize)?;
    assign(&plan.evict, Target::Evict)?;

    let positions = cache.positions();
    let cost = *cache.cost_model();
    let (old_originals, old_quantized) = cache.take_entries();

    let mut counts = TailorCounts::default();
    let mut new_originals: Vec<TokenEntry> = Vec::new();
    let mut new_quantized: Vec<QuantizedEntry> = Vec::new();

    for entry in old_originals {
        let row = positions.binary_search(&entry.position).expect("own position");
        match target[row].expect("plan partitions all rows") {
            Target::Original => {
                counts.kept_original += 1;
                new_originals.push(entry);
            }
            Target::Quantize => {
                counts.demoted += 1;
                new_quantized.push(quantize_token(&entry, &cost)?);
            }
            Target::Evict => counts.evicted += 1,
        }
    }
    for entry in old_quantized {
        let row = positions.binary_search(&entry.position).expect("own position");
        match target[row].expect("plan partitions all rows") {
            Target::Original => {
                counts.promoted += 1;
                new_originals.push(dequantize_token(&entry, &cost));
            }
            Target::Quantize => {
                counts.kept_quantized += 1;
                new_quantized.push(entry);
            }
            Target::Evict => counts.evicted += 1,
        }
    }
    new_originals.sort_by_key(|e| e.position);
    new_quantized.sort_by_key(|e| e.position);
    cache.replace_entries(new_originals, new_quantized, counts.evicted);
    Ok(counts)
}
