//! Analytic FLOP counts, wall-clock latency metering, and exact byte
//! accounting of parameters and decoding buffers.
//!
//! FLOPs follow the 2-per-multiply-accumulate convention and count matrix
//! products only; element-wise work (norms, activations, softmax) is left
//! out except for the heads' sigmoid squash, which is charged a fixed
//! [`SQUASH_FLOPS`] per head.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};

/// Charged per head per token for `lo + (hi - lo) * sigmoid(z)`.
pub const SQUASH_FLOPS: u64 = 4;

/// Multiply-accumulates of both heads for one token:
/// `(d·dh + dh) + ((d+1)·dh + dh)`.
pub fn head_macs_per_token(d_model: usize, d_head: usize) -> u64 {
    let (d, dh) = (d_model as u64, d_head as u64);
    (d * dh + dh) + ((d + 1) * dh + dh)
}

pub fn head_flops_per_token(d_model: usize, d_head: usize) -> u64 {
    2 * head_macs_per_token(d_model, d_head) + 2 * SQUASH_FLOPS
}

/// Backbone MACs to produce the token at 0-based position `pos` (context of
/// `pos + 1` tokens): per layer `4d²` projections, `2·d·d_ff` MLP and
/// `2·(pos+1)·d` attention, plus the `d·V` output projection.
pub fn backbone_macs_at(arch: &BackboneConfig, pos: usize) -> u64 {
    let d = arch.d_model as u64;
    let per_layer = 4 * d * d + 2 * d * arch.d_ff as u64 + 2 * (pos as u64 + 1) * d;
    arch.n_layers as u64 * per_layer + d * arch.vocab as u64
}

/// Total FLOPs for `seq_len` tokens, heads optionally included.
pub fn flops_estimate(
    arch: &BackboneConfig,
    d_head: usize,
    seq_len: usize,
    heads_enabled: bool,
) -> u64 {
    let backbone: u64 = (0..seq_len).map(|p| 2 * backbone_macs_at(arch, p)).sum();
    let heads = if heads_enabled {
        seq_len as u64 * head_flops_per_token(arch.d_model, d_head)
    } else {
        0
    };
    backbone + heads
}

/// Fraction of total FLOPs spent in the heads.
pub fn head_share(arch: &BackboneConfig, d_head: usize, seq_len: usize) -> f64 {
    let with = flops_estimate(arch, d_head, seq_len, true) as f64;
    let without = flops_estimate(arch, d_head, seq_len, false) as f64;
    (with - without) / with
}

/// Exact sizes in bytes of what a single generation keeps resident.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub backbone_params: usize,
    pub head_params: usize,
    /// Cached keys and values for a full context.
    pub kv_cache: usize,
    /// Activation scratch plus the sampling distribution.
    pub buffers: usize,
}

impl MemoryReport {
    pub fn total(&self) -> usize {
        self.backbone_params + self.head_params + self.kv_cache + self.buffers
    }
}

pub fn memory_report(
    arch: &BackboneConfig,
    backbone_params: usize,
    head_params: usize,
) -> MemoryReport {
    let f = std::mem::size_of::<f32>();
    let d = arch.d_model;
    MemoryReport {
        backbone_params: backbone_params * f,
        head_params: head_params * f,
        kv_cache: 2 * arch.n_layers * arch.max_len * d * f,
        // x, a, q, k, v, att, proj, hidden; ff; scores; logits; distribution.
        buffers: (8 * d + arch.d_ff + arch.max_len + 2 * arch.vocab) * f,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub mean_seconds: f64,
    pub baseline_mean_seconds: f64,
    /// `(candidate - baseline) / baseline`; negative when the candidate is
    /// faster.
    pub overhead: f64,
    pub repetitions: usize,
}

/// Wall-clock comparison of two closures. Each runs once as warm-up, then
/// `repetitions` times, alternating so slow drifts hit both equally.
pub fn latency_measure<A, B>(
    mut candidate: A,
    mut baseline: B,
    repetitions: usize,
) -> Result<Latency>
where
    A: FnMut() -> Result<()>,
    B: FnMut() -> Result<()>,
{
    if repetitions < 3 {
        return Err(Error::usage(format!(
            "latency needs at least 3 repetitions, got {repetitions}"
        )));
    }
    candidate()?;
    baseline()?;
    // Alternating which side goes first spreads slow machine-level drift
    // evenly over both means.
    let (mut tc, mut tb) = (0.0, 0.0);
    for rep in 0..repetitions {
        if rep % 2 == 0 {
            tc += time(&mut candidate)?;
            tb += time(&mut baseline)?;
        } else {
            tb += time(&mut baseline)?;
            tc += time(&mut candidate)?;
        }
    }
    let n = repetitions as f64;
    let (mc, mb) = (tc / n, tb / n);
    Ok(Latency {
        mean_seconds: mc,
        baseline_mean_seconds: mb,
        overhead: (mc - mb) / mb,
        repetitions,
    })
}

fn time(f: &mut impl FnMut() -> Result<()>) -> Result<f64> {
    let t0 = Instant::now();
    f()?;
    Ok(t0.elapsed().as_secs_f64())
}
