//! Analytic prefill and KV-cache cost of a model with `m` of its `K`
//! attention layers linearized.
//!
//! Prefill cost is `(K − m)·n²·d + m·n·d` abstract units. KV-cache bytes are
//! `2 · bs · n · d · (g/h) · (K − m) · bytes_per_elem`, i.e. keys and values
//! for every remaining attention layer. Sizes are displayed in binary GiB
//! (2³⁰ bytes); with that convention the familiar 8B-class numbers
//! (bs = 64, d = 4096, h = 32, g = 8, K = 32, fp16) come out as
//! 4 GiB at n = 512 and 1000 GiB at n = 128000.

use serde::{Deserialize, Serialize};

use crate::error::{NblError, Result};

pub const GIB: f64 = (1u64 << 30) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferenceProfile {
    pub layers: u64,
    pub linearized: u64,
    pub context: u64,
    pub d_model: u64,
    pub batch: u64,
    pub heads: u64,
    pub kv_groups: u64,
    pub bytes_per_elem: u64,
}

impl InferenceProfile {
    /// Batch 64, d = 4096, 32 heads in 8 KV groups, 32 layers, 2-byte elements.
    pub fn llama_8b_like(context: u64, linearized: u64) -> Self {
        InferenceProfile {
            layers: 32,
            linearized,
            context,
            d_model: 4096,
            batch: 64,
            heads: 32,
            kv_groups: 8,
            bytes_per_elem: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("context", self.context),
            ("d_model", self.d_model),
            ("batch", self.batch),
            ("heads", self.heads),
            ("kv_groups", self.kv_groups),
            ("bytes_per_elem", self.bytes_per_elem),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(NblError::InvalidConfig(format!("{name} must be at least 1")));
        }
        if self.linearized > self.layers {
            return Err(NblError::InvalidConfig(format!(
                "cannot linearize {} of {} layers",
                self.linearized, self.layers
            )));
        }
        if !self.heads.is_multiple_of(self.kv_groups) {
            return Err(NblError::InvalidConfig(format!(
                "kv_groups ({}) must divide heads ({})",
                self.kv_groups, self.heads
            )));
        }
        if !(self.d_model * self.kv_groups).is_multiple_of(self.heads) {
            return Err(NblError::InvalidConfig("d_model · g / h must be an integer".into()));
        }
        Ok(())
    }

    pub fn with_linearized(self, linearized: u64) -> Self {
        InferenceProfile { linearized, ..self }
    }
}

/// `(K − m)·n²·d + m·n·d`.
pub fn prefill_cost(p: &InferenceProfile) -> Result<u128> {
    p.validate()?;
    let (k, m, n, d) = (p.layers as u128, p.linearized as u128, p.context as u128, p.d_model as u128);
    Ok((k - m) * n * n * d + m * n * d)
}

/// `cost(m = 0) / cost(m)`; tends to `K / (K − m)` as the context grows.
pub fn prefill_speedup(p: &InferenceProfile) -> Result<f64> {
    let base = prefill_cost(&p.with_linearized(0))?;
    let cost = prefill_cost(p)?;
    Ok(base as f64 / cost as f64)
}

/// `K / (K − m)`, or infinity when every layer is linearized.
pub fn asymptotic_speedup(p: &InferenceProfile) -> f64 {
    if p.linearized >= p.layers {
        f64::INFINITY
    } else {
        p.layers as f64 / (p.layers - p.linearized) as f64
    }
}

pub fn kv_cache_bytes(p: &InferenceProfile) -> Result<u128> {
    p.validate()?;
    let kv_width = (p.d_model * p.kv_groups / p.heads) as u128;
    Ok(2 * p.batch as u128
        * p.context as u128
        * kv_width
        * (p.layers - p.linearized) as u128
        * p.bytes_per_elem as u128)
}

pub fn kv_cache_gib(p: &InferenceProfile) -> Result<f64> {
    Ok(kv_cache_bytes(p)? as f64 / GIB)
}

/// `d³ + tokens·d²`, the cost of calibrating one layer of width `d`
/// on `tokens = s·t` calibration tokens.
pub fn calibration_cost(d_model: u64, tokens: u64) -> u128 {
    let d = d_model as u128;
    d * d * d + tokens as u128 * d * d
}

/// KV-cache sizes in GiB, one row per context length and one column per `m`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheTable {
    pub base: InferenceProfile,
    pub contexts: Vec<u64>,
    pub linearized: Vec<u64>,
    pub gib: Vec<Vec<f64>>,
}

pub fn cache_table(base: &InferenceProfile, contexts: &[u64], linearized: &[u64]) -> Result<CacheTable> {
    if contexts.is_empty() || linearized.is_empty() {
        return Err(NblError::InvalidArgument("cache table needs at least one context and one m".into()));
    }
    let gib = contexts
        .iter()
        .map(|&n| {
            linearized
                .iter()
                .map(|&m| kv_cache_gib(&InferenceProfile { context: n, linearized: m, ..*base }))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CacheTable {
        base: *base,
        contexts: contexts.to_vec(),
        linearized: linearized.to_vec(),
        gib,
    })
}

impl CacheTable {
    pub fn cell_text(&self, row: usize, col: usize) -> String {
        format!("{:.1}", self.gib[row][col])
    }

    /// Aligned text, GiB with one decimal.
    pub fn render(&self) -> String {
        let mut header = vec!["Context".to_string()];
        header.extend(self.linearized.iter().map(|&m| {
            if m == 0 {
                "Original (GiB)".to_string()
            } else {
                format!("NBL-{m} (GiB)")
            }
        }));
        let mut rows = vec![header];
        for (i, n) in self.contexts.iter().enumerate() {
            let mut row = vec![n.to_string()];
            row.extend((0..self.linearized.len()).map(|j| self.cell_text(i, j)));
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in rows {
            let line: Vec<String> = row.iter().zip(&widths).map(|(cell, w)| format!("{cell:>w$}")).collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefill_extremes() {
        let p = InferenceProfile::llama_8b_like(2048, 0);
        assert_eq!(prefill_cost(&p).unwrap(), 32 * 2048 * 2048 * 4096);
        assert_eq!(prefill_cost(&p.with_linearized(32)).unwrap(), 32 * 2048 * 4096);
    }

    #[test]
    fn prefill_ratio_k32_m8() {
        let p = InferenceProfile::llama_8b_like(2048, 8);
        let want = (32.0 * 2048.0) / (24.0 * 2048.0 + 8.0);
        assert!((prefill_speedup(&p).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn speedup_shape() {
        let p = InferenceProfile::llama_8b_like(512, 8);
        assert!(prefill_speedup(&p.with_linearized(0)).unwrap() == 1.0);
        let short = prefill_speedup(&p).unwrap();
        let long = prefill_speedup(&InferenceProfile { context: 4096, ..p }).unwrap();
        assert!(long > short);
        assert!(long < asymptotic_speedup(&p));
        assert!((asymptotic_speedup(&p) - 4.0 / 3.0).abs() < 1e-15);
        // All layers linear: ratio is exactly n.
        let all = InferenceProfile { linearized: 32, ..p };
        assert!((prefill_speedup(&all).unwrap() - 512.0).abs() < 1e-9);
    }

    #[test]
    fn kv_cache_reference_values() {
        assert_eq!(kv_cache_gib(&InferenceProfile::llama_8b_like(512, 0)).unwrap(), 4.0);
        assert_eq!(kv_cache_gib(&InferenceProfile::llama_8b_like(512, 12)).unwrap(), 2.5);
        assert_eq!(kv_cache_gib(&InferenceProfile::llama_8b_like(128_000, 16)).unwrap(), 500.0);
    }

    #[test]
    fn kv_cache_is_linear_in_remaining_layers() {
        let a = kv_cache_bytes(&InferenceProfile::llama_8b_like(1000, 0)).unwrap();
        let b = kv_cache_bytes(&InferenceProfile::llama_8b_like(1000, 16)).unwrap();
        assert_eq!(a, 2 * b);
        let doubled = kv_cache_bytes(&InferenceProfile { batch: 128, ..InferenceProfile::llama_8b_like(1000, 0) }).unwrap();
        assert_eq!(doubled, 2 * a);
    }

    #[test]
    fn invalid_profiles() {
        let p = InferenceProfile::llama_8b_like(512, 0);
        assert!(InferenceProfile { linearized: 33, ..p }.validate().is_err());
        assert!(InferenceProfile { kv_groups: 3, ..p }.validate().is_err());
        assert!(InferenceProfile { batch: 0, ..p }.validate().is_err());
        assert!(kv_cache_bytes(&InferenceProfile { heads: 0, ..p }).is_err());
    }

    #[test]
    fn table_shapes() {
        let base = InferenceProfile::llama_8b_like(0, 0);
        let single = cache_table(&base, &[1024], &[8]).unwrap();
        assert_eq!(single.gib, vec![vec![6.0]]);
        let original = cache_table(&base, &[512, 1024], &[0]).unwrap();
        assert_eq!(original.gib, vec![vec![4.0], vec![8.0]]);
        assert!(cache_table(&base, &[], &[0]).is_err());
        let text = original.render();
        assert!(text.lines().next().unwrap().contains("Original (GiB)"));
        assert!(text.contains("4.0") && text.contains("8.0"));
    }

    #[test]
    fn calibration_cost_formula() {
        assert_eq!(calibration_cost(4, 10), 64 + 160);
    }
}
