//! Per-token symmetric 8-bit quantization with one scale per KV head per
//! tensor, plus pre-attention reconstruction that merges original and
//! quantized entries into one contiguous, sequence-ordered KV view.

use crate::error::{CoreError, Result};
use crate::kv_store::{CostModel, QuantizedEntry, TokenEntry, TriStateCache};

/// Quantize one head's slice: scale = max(|x|)/127, codes round-to-nearest-even.
/// An all-zero slice gets scale 1 so the scale stays strictly positive.
fn quantize_head(x: &[f32], codes: &mut Vec<i8>) -> f32 {
    let max_abs = x.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let scale = if max_abs == 0.0 { 1.0 } else { max_abs / 127.0 };
    for &v in x {
        let c = (v / scale).round_ties_even().clamp(-127.0, 127.0);
        codes.push(c as i8);
    }
    scale
}

/// Quantize a full-precision entry, independently per KV head and per
/// tensor (K and V get separate scales).
pub fn quantize_token(entry: &TokenEntry, cost: &CostModel) -> Result<QuantizedEntry> {
    if entry.key.iter().chain(entry.value.iter()).any(|v| !v.is_finite()) {
        return Err(CoreError::NonFinite("token entry"));
    }
    let d = cost.d_head;
    let mut key_codes = Vec::with_capacity(entry.key.len());
    let mut value_codes = Vec::with_capacity(entry.value.len());
    let mut key_scales = Vec::with_capacity(cost.n_kv_heads);
    let mut value_scales = Vec::with_capacity(cost.n_kv_heads);
    for h in 0..cost.n_kv_heads {
        key_scales.push(quantize_head(&entry.key[h * d..(h + 1) * d], &mut key_codes));
        value_scales.push(quantize_head(&entry.value[h * d..(h + 1) * d], &mut value_codes));
    }
    Ok(QuantizedEntry {
        position: entry.position,
        key_codes,
        key_scales,
        value_codes,
        value_scales,
    })
}

fn dequantize_head(codes: &[i8], scale: f32, out: &mut Vec<f32>) {
    for &c in codes {
        out.push(c as f32 * scale);
    }
}

/// Reverse of [`quantize_token`]: x̃ = code * scale, per head.
pub fn dequantize_token(qe: &QuantizedEntry, cost: &CostModel) -> TokenEntry {
    let d = cost.d_head;
    let mut key = Vec::with_capacity(qe.key_codes.len());
    let mut value = Vec::with_capacity(qe.value_codes.len());
    for h in 0..cost.n_kv_heads {
        dequantize_head(&qe.key_codes[h * d..(h + 1) * d], qe.key_scales[h], &mut key);
        dequantize_head(&qe.value_codes[h * d..(h + 1) * d], qe.value_scales[h], &mut value);
    }
    TokenEntry {
        position: qe.position,
        key,
        value,
    }
}

/// Contiguous sequence-ordered KV view over a tri-state cache.
///
/// `keys`/`values` are row-major `[len][kv_len]`; `positions` carries the
/// absolute sequence index of each row so attention can use correct
/// relative positions after evictions.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructedKv {
    pub keys: Vec<f32>,
    pub values: Vec<f32>,
    pub positions: Vec<usize>,
    pub row_len: usize,
}

impl ReconstructedKv {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn key_row(&self, row: usize) -> &[f32] {
        &self.keys[row * self.row_len..(row + 1) * self.row_len]
    }

    pub fn value_row(&self, row: usize) -> &[f32] {
        &self.values[row * self.row_len..(row + 1) * self.row_len]
    }
}

/// Merge originals and quantized entries into one position-sorted view,
/// dequantizing quantized rows on the fly.
pub fn reconstruct(cache: &TriStateCache) -> ReconstructedKv {
    let cost = *cache.cost_model();
    let row_len = cost.kv_len();
    let n = cache.len();
    let mut keys = Vec::with_capacity(n * row_len);
    let mut values = Vec::with_capacity(n * row_len);
    let mut positions = Vec::with_capacity(n);

    let originals = cache.originals();
    let quantized = cache.quantized();
    let (mut oi, mut qi) = (0, 0);
    while oi < originals.len() || qi < quantized.len() {
        let take_original = match (originals.get(oi), quantized.get(qi)) {
            (Some(o), Some(q)) => o.position < q.position,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if take_original {
            let e = &originals[oi];
            keys.extend_from_slice(&e.key);
            values.extend_from_slice(&e.value);
            positions.push(e.position);
            oi += 1;
        } else {
            let e = dequantize_token(&quantized[qi], &cost);
            keys.extend(e.key);
            values.extend(e.value);
            positions.push(e.position);
            qi += 1;
        }
    }
    ReconstructedKv {
        keys,
        values,
        positions,
        row_len,
    }
}
