//! Tri-state KV cache: full-precision entries, quantized entries with
//! per-token scales, a protected recency window, and exact token-equivalent
//! budget accounting.
//!
//! Budget arithmetic is done in integer half-units (an original token costs
//! 2 half-units, a quantized token 1) so the budget invariant is exact
//! rather than tolerance-based.

use serde::Serialize;

use crate::error::{CoreError, Result};

/// Token-equivalent quantity stored as integer half-units.
///
/// One original token = 1.0 token-equivalents = 2 half-units.
/// One quantized token = 0.5 token-equivalents = 1 half-unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize)]
pub struct TokenEquiv(u64);

impl TokenEquiv {
    pub const ZERO: TokenEquiv = TokenEquiv(0);

    pub fn from_half_units(hu: u64) -> Self {
        TokenEquiv(hu)
    }

    pub fn from_original_tokens(n: usize) -> Self {
        TokenEquiv(2 * n as u64)
    }

    pub fn from_quantized_tokens(n: usize) -> Self {
        TokenEquiv(n as u64)
    }

    pub fn half_units(self) -> u64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 2.0
    }
}

impl std::ops::Add for TokenEquiv {
    type Output = TokenEquiv;
    fn add(self, rhs: TokenEquiv) -> TokenEquiv {
        TokenEquiv(self.0 + rhs.0)
    }
}

impl std::fmt::Display for TokenEquiv {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{}", self.0 / 2, if self.0 % 2 == 0 { "0" } else { "5" })
    }
}

/// Full-precision cache entry for one token across all KV heads.
///
/// `key` and `value` are flat `[n_kv_heads * d_head]` vectors, head-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEntry {
    pub position: usize,
    pub key: Vec<f32>,
    pub value: Vec<f32>,
}

/// 8-bit entry with one symmetric scale per KV head per tensor.
///
/// Codes lie in [-127, 127]; scales are strictly positive (an all-zero
/// vector gets scale 1 and all-zero codes).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedEntry {
    pub position: usize,
    pub key_codes: Vec<i8>,
    pub key_scales: Vec<f32>,
    pub value_codes: Vec<i8>,
    pub value_scales: Vec<f32>,
}

/// Byte and token-equivalent costs per cached token, derived from the model
/// shape. The 2-byte full-precision element cost is an accounting convention
/// (bf16-class storage); values are held as f32 in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostModel {
    pub d_head: usize,
    pub n_kv_heads: usize,
}

impl CostModel {
    pub fn new(d_head: usize, n_kv_heads: usize) -> Self {
        CostModel { d_head, n_kv_heads }
    }

    /// Flat K or V vector length for one token.
    pub fn kv_len(&self) -> usize {
        self.d_head * self.n_kv_heads
    }

    /// 2 bytes/element for K and V.
    pub fn bytes_original(&self) -> u64 {
        4 * (self.d_head * self.n_kv_heads) as u64
    }

    /// 1 byte/element for K and V plus two 4-byte scales per KV head.
    pub fn bytes_quantized(&self) -> u64 {
        2 * (self.d_head * self.n_kv_heads) as u64 + 8 * self.n_kv_heads as u64
    }
}

/// Per-layer quotas in token-equivalents plus the protected window size.
///
/// `original_quota` includes the window (window tokens are pre-reserved at
/// full precision); `quant_quota`'s half-unit count equals the number of
/// quantized tokens it admits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerBudget {
    pub total: TokenEquiv,
    pub original_quota: TokenEquiv,
    pub quant_quota: TokenEquiv,
    pub window: usize,
}

impl LayerBudget {
    pub fn new(
        total: TokenEquiv,
        original_quota: TokenEquiv,
        quant_quota: TokenEquiv,
        window: usize,
    ) -> Result<Self> {
        if original_quota.half_units() + quant_quota.half_units() > total.half_units() {
            return Err(CoreError::Config(format!(
                "quota overflow: original {original_quota} + quant {quant_quota} > total {total}"
            )));
        }
        if original_quota.half_units() < 2 * window as u64 {
            return Err(CoreError::Config(format!(
                "original quota {original_quota} cannot cover window of {window} tokens"
            )));
        }
        Ok(LayerBudget {
            total,
            original_quota,
            quant_quota,
            window,
        })
    }

    /// Budget that can never trigger a tailor within `max_tokens` appends.
    pub fn unbounded(max_tokens: usize) -> Self {
        let total = TokenEquiv::from_original_tokens(max_tokens + 1);
        LayerBudget {
            total,
            original_quota: total,
            quant_quota: TokenEquiv::ZERO,
            window: 0,
        }
    }

    /// Max original tokens (window included).
    pub fn original_tokens_cap(&self) -> usize {
        (self.original_quota.half_units() / 2) as usize
    }

    /// Max quantized tokens.
    pub fn quant_tokens_cap(&self) -> usize {
        self.quant_quota.half_units() as usize
    }
}

/// Cache usage snapshot in both accounting units.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CacheUsage {
    pub token_equiv: TokenEquiv,
    pub bytes: u64,
    pub n_original: usize,
    pub n_quantized: usize,
}

/// Per-layer tri-state store. `originals` and `quantized` are each kept in
/// ascending position order and their position sets are disjoint; the W
/// highest positions present are always in `originals`.
#[derive(Debug, Clone)]
pub struct TriStateCache {
    pub layer_id: usize,
    originals: Vec<TokenEntry>,
    quantized: Vec<QuantizedEntry>,
    budget: LayerBudget,
    cost: CostModel,
    evicted_total: usize,
}

impl TriStateCache {
    pub fn new(layer_id: usize, budget: LayerBudget, cost: CostModel) -> Self {
        TriStateCache {
            layer_id,
            originals: Vec::new(),
            quantized: Vec::new(),
            budget,
            cost,
            evicted_total: 0,
        }
    }

    pub fn budget(&self) -> &LayerBudget {
        &self.budget
    }

    pub fn cost_model(&self) -> &CostModel {
        &self.cost
    }

    pub fn window(&self) -> usize {
        self.budget.window
    }

    pub fn n_original(&self) -> usize {
        self.originals.len()
    }

    pub fn n_quantized(&self) -> usize {
        self.quantized.len()
    }

    /// Total tokens currently cached.
    pub fn len(&self) -> usize {
        self.originals.len() + self.quantized.len()
    }

    pub fn is_empty(&self) -> bool {
        self.originals.is_empty() && self.quantized.is_empty()
    }

    /// Cumulative count of tokens evicted over the cache's lifetime.
    pub fn evicted_total(&self) -> usize {
        self.evicted_total
    }

    pub fn originals(&self) -> &[TokenEntry] {
        &self.originals
    }

    pub fn quantized(&self) -> &[QuantizedEntry] {
        &self.quantized
    }

    /// Highest position present, if any. The window is never evicted, so
    /// this always equals the last appended position.
    pub fn max_position(&self) -> Option<usize> {
        let o = self.originals.last().map(|e| e.position);
        let q = self.quantized.last().map(|e| e.position);
        o.into_iter().chain(q).max()
    }

    /// All cached positions in ascending order.
    pub fn positions(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        let mut oi = self.originals.iter().peekable();
        let mut qi = self.quantized.iter().peekable();
        loop {
            match (oi.peek(), qi.peek()) {
                (Some(o), Some(q)) => {
                    if o.position < q.position {
                        out.push(oi.next().unwrap().position);
                    } else {
                        out.push(qi.next().unwrap().position);
                    }
                }
                (Some(_), None) => out.push(oi.next().unwrap().position),
                (None, Some(_)) => out.push(qi.next().unwrap().position),
                (None, None) => break,
            }
        }
        out
    }

    /// Append a new full-precision token at the end of the sequence.
    ///
    /// The position must be exactly one past the current max (or 0 for an
    /// empty cache); anything else is a sequencing error. No tailor runs
    /// here.
    pub fn append_token(&mut self, entry: TokenEntry) -> Result<()> {
        let expected = self.max_position().map_or(0, |p| p + 1);
        if entry.position != expected {
            return Err(CoreError::Sequencing {
                expected,
                got: entry.position,
            });
        }
        let want = self.cost.kv_len();
        if entry.key.len() != want || entry.value.len() != want {
            return Err(CoreError::Integrity(format!(
                "entry vectors must have length {want}, got key {} / value {}",
                entry.key.len(),
                entry.value.len()
            )));
        }
        self.originals.push(entry);
        Ok(())
    }

    /// Current usage in token-equivalents and bytes.
    pub fn usage(&self) -> CacheUsage {
        let n_o = self.originals.len();
        let n_q = self.quantized.len();
        CacheUsage {
            token_equiv: TokenEquiv::from_original_tokens(n_o)
                + TokenEquiv::from_quantized_tokens(n_q),
            bytes: n_o as u64 * self.cost.bytes_original()
                + n_q as u64 * self.cost.bytes_quantized(),
            n_original: n_o,
            n_quantized: n_q,
        }
    }

    /// True once usage has reached the budget total.
    pub fn needs_tailor(&self) -> bool {
        self.usage().token_equiv >= self.budget.total
    }

    /// Take ownership of all entries, leaving the cache empty. The tailor
    /// uses this to rebuild the stores without cloning vectors.
    pub(crate) fn take_entries(&mut self) -> (Vec<TokenEntry>, Vec<QuantizedEntry>) {
        (
            std::mem::take(&mut self.originals),
            std::mem::take(&mut self.quantized),
        )
    }

    /// Replace the stored entries wholesale. Used by the tailor when
    /// applying a plan; both inputs must already be position-sorted and
    /// disjoint. `evicted` counts toward the lifetime eviction total.
    pub(crate) fn replace_entries(
        &mut self,
        originals: Vec<TokenEntry>,
        quantized: Vec<QuantizedEntry>,
        evicted: usize,
    ) {
        debug_assert!(originals.windows(2).all(|w| w[0].position < w[1].position));
        debug_assert!(quantized.windows(2).all(|w| w[0].position < w[1].position));
        self.originals = originals;
        self.quantized = quantized;
        self.evicted_total += evicted;
    }

    /// Move the original entry holding `position` into the quantized store.
    /// Used by the quant-only strategy's eager path.
    pub(crate) fn demote_to_quantized(&mut self, position: usize) -> Result<()> {
        let idx = self
            .originals
            .iter()
            .position(|e| e.position == position)
            .ok_or_else(|| {
                CoreError::Integrity(format!("position {position} not in originals"))
            })?;
        let entry = self.originals.remove(idx);
        let qe = crate::quant::quantize_token(&entry, &self.cost)?;
        let at = self
            .quantized
            .partition_point(|e| e.position < qe.position);
        self.quantized.insert(at, qe);
        Ok(())
    }
}
