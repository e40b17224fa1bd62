//! Windowed attention statistics and per-layer budget allocation.
//!
//! During prefill, the last W queries' post-softmax attention over the
//! non-window keys is reduced to a key-mass distribution per layer. Its
//! entropy, variance, and kurtosis combine into a layer score whose
//! normalized ratio decides how much of the budget holds full-precision
//! tokens versus quantized ones.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::kv_store::{LayerBudget, TokenEquiv};

/// Floor applied to each statistic before the score product.
pub const STAT_EPSILON: f64 = 1e-6;
/// Below this variance the distribution is treated as uniform and
/// kurtosis is pinned to 1.
pub const VARIANCE_FLOOR: f64 = 1e-12;

/// Post-softmax attention tensor for one layer, row-major `[h][q][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnTensor {
    pub layer_id: usize,
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
    pub weights: Vec<f32>,
}

impl AttnTensor {
    pub fn new(layer_id: usize, heads: usize, queries: usize, keys: usize, weights: Vec<f32>) -> Result<Self> {
        if weights.len() != heads * queries * keys {
            return Err(CoreError::InvalidArgument(format!(
                "attention tensor [{heads}][{queries}][{keys}] needs {} weights, got {}",
                heads * queries * keys,
                weights.len()
            )));
        }
        Ok(AttnTensor { layer_id, heads, queries, keys, weights })
    }

    #[inline]
    pub fn at(&self, h: usize, q: usize, k: usize) -> f32 {
        self.weights[(h * self.queries + q) * self.keys + k]
    }
}

/// Window-constrained attention slice: the last `queries` queries over the
/// first `keys` keys (the region eligible for quantization/eviction).
#[derive(Debug, Clone, PartialEq)]
pub struct AttnWindow {
    pub layer_id: usize,
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
    weights: Vec<f32>,
}

impl AttnWindow {
    /// Build a window directly from row-major `[h][q][k]` weights.
    pub fn from_weights(layer_id: usize, heads: usize, queries: usize, keys: usize, weights: Vec<f32>) -> Result<Self> {
        if weights.len() != heads * queries * keys {
            return Err(CoreError::InvalidArgument(format!(
                "window [{heads}][{queries}][{keys}] needs {} weights, got {}",
                heads * queries * keys,
                weights.len()
            )));
        }
        Ok(AttnWindow { layer_id, heads, queries, keys, weights })
    }

    #[inline]
    pub fn at(&self, h: usize, q: usize, k: usize) -> f32 {
        self.weights[(h * self.queries + q) * self.keys + k]
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }
}

/// Restrict a full attention tensor to queries `[Q-W, Q)` and keys `[0, K-W)`.
pub fn slice_window(full: &AttnTensor, window: usize) -> Result<AttnWindow> {
    if full.queries <= window || full.keys <= window {
        return Err(CoreError::WindowTooLarge {
            window,
            queries: full.queries,
            keys: full.keys,
        });
    }
    let q0 = full.queries - window;
    let k_extent = full.keys - window;
    let mut weights = Vec::with_capacity(full.heads * window * k_extent);
    for h in 0..full.heads {
        for q in q0..full.queries {
            for k in 0..k_extent {
                weights.push(full.at(h, q, k));
            }
        }
    }
    AttnWindow::from_weights(full.layer_id, full.heads, window, k_extent, weights)
}

/// Normalized key-mass distribution: raw windowed weights summed over heads
/// and queries, normalized once by the grand total.
pub fn key_mass(window: &AttnWindow) -> Result<Vec<f64>> {
    let mut mass = vec![0.0f64; window.keys];
    for h in 0..window.heads {
        for q in 0..window.queries {
            for (k, m) in mass.iter_mut().enumerate() {
                *m += window.at(h, q, k) as f64;
            }
        }
    }
    let total: f64 = mass.iter().sum();
    if total <= 0.0 {
        return Err(CoreError::DegenerateDistribution);
    }
    for m in &mut mass {
        *m /= total;
    }
    Ok(mass)
}

/// Entropy/variance/kurtosis of one layer's key-mass distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AttnStats {
    pub layer_id: usize,
    pub entropy: f64,
    pub variance: f64,
    pub kurtosis: f64,
}

/// Statistics of a key distribution `p` over `n >= 2` keys.
///
/// Entropy uses natural log with `0 ln 0 = 0`. Variance and kurtosis are
/// central moments around the uniform mean `1/n`; kurtosis is pinned to 1
/// when the variance falls below [`VARIANCE_FLOOR`] (uniform attention).
pub fn compute_stats(p: &[f64], layer_id: usize) -> Result<AttnStats> {
    let n = p.len();
    if n < 2 {
        return Err(CoreError::InvalidArgument(format!(
            "stats need at least 2 keys, got {n}"
        )));
    }
    let mean = 1.0 / n as f64;
    let mut entropy = 0.0;
    let mut m2 = 0.0;
    let mut m4 = 0.0;
    for &pk in p {
        if pk > 0.0 {
            entropy -= pk * pk.ln();
        }
        let d = pk - mean;
        let d2 = d * d;
        m2 += d2;
        m4 += d2 * d2;
    }
    let variance = m2 / n as f64;
    let fourth = m4 / n as f64;
    let kurtosis = if variance < VARIANCE_FLOOR {
        1.0
    } else {
        fourth / (variance * variance)
    };
    Ok(AttnStats { layer_id, entropy, variance, kurtosis })
}

/// Temperatures for the three statistics plus the observation window size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OqConfig {
    pub tau1: f64,
    pub tau2: f64,
    pub tau3: f64,
    pub window: usize,
}

impl Default for OqConfig {
    fn default() -> Self {
        OqConfig {
            tau1: 7.774,
            tau2: 5.407,
            tau3: 5.528,
            window: 32,
        }
    }
}

impl OqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau1 <= 0.0 || self.tau2 <= 0.0 || self.tau3 <= 0.0 {
            return Err(CoreError::Config(format!(
                "temperatures must be strictly positive, got ({}, {}, {})",
                self.tau1, self.tau2, self.tau3
            )));
        }
        Ok(())
    }
}

/// Layer score `q = H^(1/tau1) * V^(1/tau2) * K^(1/tau3)` with each
/// statistic floored at [`STAT_EPSILON`].
pub fn oq_score(stats: &AttnStats, cfg: &OqConfig) -> f64 {
    let h = stats.entropy.max(STAT_EPSILON);
    let v = stats.variance.max(STAT_EPSILON);
    let k = stats.kurtosis.max(STAT_EPSILON);
    h.powf(1.0 / cfg.tau1) * v.powf(1.0 / cfg.tau2) * k.powf(1.0 / cfg.tau3)
}

/// Normalize scores by their maximum; the argmax layer(s) get exactly 1.
pub fn oq_ratios(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::MIN, f64::max);
    assert!(max > 0.0, "all layer scores zero after epsilon clamping");
    scores.iter().map(|&q| q / max).collect()
}

/// Which budget split formula derives the per-layer original quota.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetSplit {
    /// Reserve W window slots first, then split the remainder:
    /// original = W + floor(rho * (B - W)).
    #[default]
    WindowReserved,
    /// Split the whole budget: original = clamp(floor(rho * B), W, B).
    WholeBudget,
}

/// Derive each layer's quota pair from its ratio.
///
/// Under either split the quotas exhaust the budget exactly:
/// original_quota + quant_quota = B in token-equivalents.
pub fn allocate_budgets(
    ratios: &[f64],
    budget_tokens: usize,
    window: usize,
    split: BudgetSplit,
) -> Result<Vec<LayerBudget>> {
    if budget_tokens <= window {
        return Err(CoreError::Config(format!(
            "budget {budget_tokens} must exceed window {window}"
        )));
    }
    ratios
        .iter()
        .map(|&rho| {
            let original_tokens = match split {
                BudgetSplit::WindowReserved => {
                    window + (rho * (budget_tokens - window) as f64).floor() as usize
                }
                BudgetSplit::WholeBudget => {
                    ((rho * budget_tokens as f64).floor() as usize).clamp(window, budget_tokens)
                }
            };
            let quant_tokens = 2 * (budget_tokens - original_tokens);
            LayerBudget::new(
                TokenEquiv::from_original_tokens(budget_tokens),
                TokenEquiv::from_original_tokens(original_tokens),
                TokenEquiv::from_quantized_tokens(quant_tokens),
                window,
            )
        })
        .collect()
}

/// Per-layer scores, ratios, and budgets computed once at the end of
/// prefill and immutable afterwards.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OqAllocation {
    scores: Vec<f64>,
    ratios: Vec<f64>,
    budgets: Vec<LayerBudget>,
}

impl OqAllocation {
    /// Run the score -> ratio -> budget pipeline over per-layer stats.
    pub fn from_stats(
        stats: &[AttnStats],
        cfg: &OqConfig,
        budget_tokens: usize,
        split: BudgetSplit,
    ) -> Result<Self> {
        cfg.validate()?;
        let scores: Vec<f64> = stats.iter().map(|s| oq_score(s, cfg)).collect();
        let ratios = oq_ratios(&scores);
        let budgets = allocate_budgets(&ratios, budget_tokens, cfg.window, split)?;
        Ok(OqAllocation { scores, ratios, budgets })
    }

    /// Uniform allocation (every layer at ratio 1). Used when the prompt is
    /// too short for meaningful statistics, and by the origin-only and
    /// quant-only strategies.
    pub fn uniform(
        n_layers: usize,
        budget_tokens: usize,
        window: usize,
        rho: f64,
        split: BudgetSplit,
    ) -> Result<Self> {
        let ratios = vec![rho; n_layers];
        let budgets = allocate_budgets(&ratios, budget_tokens, window, split)?;
        Ok(OqAllocation {
            scores: vec![rho; n_layers],
            ratios,
            budgets,
        })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn ratios(&self) -> &[f64] {
        &self.ratios
    }

    pub fn budgets(&self) -> &[LayerBudget] {
        &self.budgets
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(h: usize, q: usize, k: usize, fill: impl Fn(usize, usize, usize) -> f32) -> AttnTensor {
        let mut w = Vec::with_capacity(h * q * k);
        for hi in 0..h {
            for qi in 0..q {
                for ki in 0..k {
                    w.push(fill(hi, qi, ki));
                }
            }
        }
        AttnTensor::new(7, h, q, k, w).unwrap()
    }

    #[test]
    fn slice_shape_small() {
        let full = tensor(1, 4, 4, |_, q, k| (q * 4 + k) as f32);
        let win = slice_window(&full, 2).unwrap();
        assert_eq!((win.heads, win.queries, win.keys), (1, 2, 2));
        // Queries {2,3} x keys {0,1}.
        assert_eq!(win.at(0, 0, 0), 8.0);
        assert_eq!(win.at(0, 0, 1), 9.0);
        assert_eq!(win.at(0, 1, 0), 12.0);
        assert_eq!(win.at(0, 1, 1), 13.0);
        assert_eq!(win.layer_id, 7);
    }

    #[test]
    fn slice_window_equal_to_queries_errors() {
        let full = tensor(1, 4, 8, |_, _, _| 0.1);
        assert!(matches!(
            slice_window(&full, 4),
            Err(CoreError::WindowTooLarge { .. })
        ));
    }

    #[test]
    fn slice_shape_wide() {
        let full = tensor(2, 40, 100, |_, _, _| 0.01);
        let win = slice_window(&full, 32).unwrap();
        assert_eq!((win.heads, win.queries, win.keys), (2, 32, 68));
    }

    #[test]
    fn key_mass_uniform() {
        let full = tensor(1, 6, 6, |_, _, _| 0.125);
        let win = slice_window(&full, 2).unwrap();
        let p = key_mass(&win).unwrap();
        assert_eq!(p.len(), 4);
        for pk in p {
            assert!((pk - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn key_mass_one_hot() {
        let win = AttnWindow::from_weights(0, 1, 2, 4, vec![
            0.0, 0.0, 0.3, 0.0, //
            0.0, 0.0, 0.2, 0.0,
        ])
        .unwrap();
        let p = key_mass(&win).unwrap();
        assert_eq!(p, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn key_mass_two_heads() {
        // Head sums per key: [1,3] and [2,2] -> totals [3,5] -> p = [3/8, 5/8].
        let win = AttnWindow::from_weights(0, 2, 1, 2, vec![
            1.0, 3.0, //
            2.0, 2.0,
        ])
        .unwrap();
        let p = key_mass(&win).unwrap();
        assert!((p[0] - 0.375).abs() < 1e-12);
        assert!((p[1] - 0.625).abs() < 1e-12);
    }

    #[test]
    fn key_mass_all_zero_errors() {
        let win = AttnWindow::from_weights(0, 1, 1, 3, vec![0.0; 3]).unwrap();
        assert!(matches!(key_mass(&win), Err(CoreError::DegenerateDistribution)));
    }

    #[test]
    fn stats_uniform() {
        let s = compute_stats(&[0.25; 4], 0).unwrap();
        assert!((s.entropy - 4.0f64.ln()).abs() < 1e-9);
        assert_eq!(s.variance, 0.0);
        assert_eq!(s.kurtosis, 1.0);
    }

    #[test]
    fn stats_one_hot() {
        let s = compute_stats(&[1.0, 0.0, 0.0, 0.0], 0).unwrap();
        assert_eq!(s.entropy, 0.0);
        assert!((s.variance - 0.1875).abs() < 1e-12);
        assert!(s.kurtosis >= 1.0);
    }

    #[test]
    fn stats_mixed_entropy() {
        let s = compute_stats(&[0.5, 0.25, 0.125, 0.125], 0).unwrap();
        assert!((s.entropy - 1.213_008).abs() < 1e-6);
    }

    #[test]
    fn stats_reject_single_key() {
        assert!(compute_stats(&[1.0], 0).is_err());
    }

    #[test]
    fn score_identity() {
        let stats = AttnStats { layer_id: 0, entropy: 1.0, variance: 1.0, kurtosis: 1.0 };
        let cfg = OqConfig { tau1: 3.0, tau2: 9.9, tau3: 0.4, window: 32 };
        assert_eq!(oq_score(&stats, &cfg), 1.0);
    }

    #[test]
    fn score_single_factor() {
        let stats = AttnStats {
            layer_id: 0,
            entropy: std::f64::consts::E,
            variance: 1.0,
            kurtosis: 1.0,
        };
        let cfg = OqConfig { tau1: 1.0, tau2: 5.0, tau3: 5.0, window: 32 };
        assert!((oq_score(&stats, &cfg) - std::f64::consts::E).abs() < 1e-12);
    }

    #[test]
    fn score_tuned_temperatures() {
        let stats = AttnStats { layer_id: 0, entropy: 1.386294, variance: 0.01, kurtosis: 2.0 };
        let cfg = OqConfig::default();
        let expected = 1.386294f64.powf(1.0 / 7.774)
            * 0.01f64.powf(1.0 / 5.407)
            * 2.0f64.powf(1.0 / 5.528);
        let got = oq_score(&stats, &cfg);
        assert!((got - expected).abs() < 1e-12);
        // Frozen from a high-precision evaluation of the same product.
        assert!((got - 0.504_442_911).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn ratios_normalize_by_max() {
        assert_eq!(oq_ratios(&[2.0, 4.0, 1.0]), vec![0.5, 1.0, 0.25]);
        assert_eq!(oq_ratios(&[3.0]), vec![1.0]);
        assert_eq!(oq_ratios(&[1.0, 1.0, 1.0]), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn budgets_max_layer_all_original() {
        let b = allocate_budgets(&[1.0], 512, 32, BudgetSplit::WindowReserved).unwrap();
        assert_eq!(b[0].original_tokens_cap(), 512);
        assert_eq!(b[0].quant_tokens_cap(), 0);
    }

    #[test]
    fn budgets_half_ratio() {
        let b = allocate_budgets(&[0.5], 512, 32, BudgetSplit::WindowReserved).unwrap();
        assert_eq!(b[0].original_tokens_cap(), 272);
        assert_eq!(b[0].quant_tokens_cap(), 480);
        assert_eq!(b[0].total, TokenEquiv::from_original_tokens(512));
    }

    #[test]
    fn budgets_floor_case() {
        let b = allocate_budgets(&[1e-9], 512, 32, BudgetSplit::WindowReserved).unwrap();
        assert_eq!(b[0].original_tokens_cap(), 32);
        assert_eq!(b[0].quant_tokens_cap(), 960);
    }

    #[test]
    fn budgets_reject_window_ge_budget() {
        assert!(allocate_budgets(&[1.0], 32, 32, BudgetSplit::WindowReserved).is_err());
    }

    #[test]
    fn whole_budget_split_clamps_to_window() {
        let b = allocate_budgets(&[0.01], 512, 32, BudgetSplit::WholeBudget).unwrap();
        assert_eq!(b[0].original_tokens_cap(), 32);
        let b = allocate_budgets(&[0.5], 512, 32, BudgetSplit::WholeBudget).unwrap();
        assert_eq!(b[0].original_tokens_cap(), 256);
        assert_eq!(b[0].quant_tokens_cap(), 512);
    }

    #[test]
    fn allocation_pipeline_ties_all_one() {
        let stats = vec![
            AttnStats { layer_id: 0, entropy: 1.0, variance: 0.01, kurtosis: 2.0 },
            AttnStats { layer_id: 1, entropy: 1.0, variance: 0.01, kurtosis: 2.0 },
        ];
        let alloc =
            OqAllocation::from_stats(&stats, &OqConfig::default(), 128, BudgetSplit::WindowReserved)
                .unwrap();
        assert_eq!(alloc.ratios(), &[1.0, 1.0]);
        assert_eq!(alloc.budgets()[0].original_tokens_cap(), 128);
    }
}
