//! Temperature scaling, the differentiable nucleus mask used for training,
//! and the hard nucleus truncation used at inference.
//!
//! The soft mask works in sorted order: with `c` the exclusive cumulative
//! sum of the descending probabilities, `m = exp(-alpha * relu(c - p))`.
//! Tokens whose preceding mass is still below `p` keep weight exactly 1;
//! the boundary token included. As `alpha` grows the mask converges to the
//! indicator of the standard nucleus.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{descending_perm, inverse_perm, softmax_slice, NodeId, Tensor, ValueGraph};

pub const DEFAULT_ALPHA: f64 = 30.0;
pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SoftMaskConfig {
    /// Decay steepness past the threshold.
    pub alpha: f64,
    /// Renormalization stabilizer.
    pub epsilon: f64,
}

impl Default for SoftMaskConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl SoftMaskConfig {
    pub fn new(alpha: f64, epsilon: f64) -> Result<Self> {
        let cfg = Self { alpha, epsilon };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::domain(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::domain(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::domain(format!("temperature must be > 0, got {t}")));
    }
    Ok(())
}

fn check_top_p(p: f64) -> Result<()> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::domain(format!("top-p must lie in (0, 1], got {p}")));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Graph builders (differentiable)
// ---------------------------------------------------------------------------

/// `softmax(logits / t)` where `t` is a scalar node.
pub fn temperature_scale_node(g: &mut ValueGraph, logits: NodeId, t: NodeId) -> Result<NodeId> {
    check_temperature(g.scalar_value(t))?;
    let scaled = g.div_scalar(logits, t)?;
    Ok(g.softmax(scaled))
}

/// Soft nucleus mask in vocabulary order. The sort permutation is taken
/// from the current forward values and held fixed for the backward pass.
pub fn soft_topp_mask_node(
    g: &mut ValueGraph,
    probs: NodeId,
    p: NodeId,
    cfg: &SoftMaskConfig,
) -> Result<NodeId> {
    cfg.validate()?;
    check_top_p(g.scalar_value(p))?;
    let perm = descending_perm(g.value(probs));
    let inv = inverse_perm(&perm);
    let sorted = g.gather(probs, perm)?;
    let cum = g.exclusive_cumsum(sorted);
    let over = g.sub_scalar(cum, p)?;
    let over = g.relu(over);
    let decay = g.affine(over, -cfg.alpha, 0.0);
    let mask_sorted = g.exp(decay);
    g.gather(mask_sorted, inv)
}

/// `(probs * mask) / (sum(probs * mask) + eps)`.
pub fn renormalize_node(
    g: &mut ValueGraph,
    probs: NodeId,
    mask: NodeId,
    epsilon: f64,
) -> Result<NodeId> {
    if g.value(mask).iter().all(|&m| m == 0.0) {
        return Err(Error::Degenerate("mask is identically zero".into()));
    }
    let kept = g.mul(probs, mask)?;
    let total = g.sum(kept);
    if g.scalar_value(total) <= 0.0 {
        return Err(Error::Degenerate(
            "mask removes all probability mass".into(),
        ));
    }
    let denom = g.affine(total, 1.0, epsilon);
    g.div_scalar(kept, denom)
}

/// Temperature scaling, soft mask, and renormalization as one graph.
pub fn soft_pipeline_node(
    g: &mut ValueGraph,
    logits: NodeId,
    t: NodeId,
    p: NodeId,
    cfg: &SoftMaskConfig,
) -> Result<NodeId> {
    let probs = temperature_scale_node(g, logits, t)?;
    let mask = soft_topp_mask_node(g, probs, p, cfg)?;
    renormalize_node(g, probs, mask, cfg.epsilon)
}

// ---------------------------------------------------------------------------
// Tensor-level entry points
// ---------------------------------------------------------------------------

fn to_tensor(g: &ValueGraph, id: NodeId) -> Tensor {
    Tensor::from_vec(g.value(id).iter().map(|&x| x as f32).collect())
}

/// `stable_softmax(logits / t)`.
pub fn temperature_scale(logits: &Tensor, t: f64) -> Result<Tensor> {
    check_temperature(t)?;
    Ok(Tensor::from_vec(softmax_slice(logits.data(), t)?))
}

pub fn soft_topp_mask(probs: &Tensor, p: f64, cfg: &SoftMaskConfig) -> Result<Tensor> {
    probs.check_finite()?;
    let mut g = ValueGraph::new();
    let pn = g.vector(probs.to_f64());
    let pp = g.scalar(p);
    let m = soft_topp_mask_node(&mut g, pn, pp, cfg)?;
    Ok(to_tensor(&g, m))
}

pub fn renormalize(probs: &Tensor, mask: &Tensor, epsilon: f64) -> Result<Tensor> {
    if probs.len() != mask.len() {
        return Err(Error::usage("probs and mask lengths differ"));
    }
    probs.check_finite()?;
    mask.check_finite()?;
    let mut g = ValueGraph::new();
    let pn = g.vector(probs.to_f64());
    let mn = g.vector(mask.to_f64());
    let out = renormalize_node(&mut g, pn, mn, epsilon)?;
    Ok(to_tensor(&g, out))
}

pub fn soft_pipeline(logits: &Tensor, t: f64, p: f64, cfg: &SoftMaskConfig) -> Result<Tensor> {
    logits.check_finite()?;
    if logits.is_empty() {
        return Err(Error::usage("empty logits"));
    }
    let mut g = ValueGraph::new();
    let l = g.vector(logits.to_f64());
    let tn = g.scalar(t);
    let pn = g.scalar(p);
    let out = soft_pipeline_node(&mut g, l, tn, pn, cfg)?;
    Ok(to_tensor(&g, out))
}

/// Standard nucleus truncation: keep the shortest descending prefix whose
/// inclusive mass reaches `p` (the boundary token stays), zero the rest,
/// renormalize.
pub fn hard_topp(probs: &Tensor, p: f64) -> Result<Tensor> {
    check_top_p(p)?;
    probs.check_finite()?;
    let mut out = probs.data().to_vec();
    hard_topp_in_place(&mut out, p);
    Ok(Tensor::from_vec(out))
}

/// In-place variant used by the sampler. `p >= 1` leaves `probs` untouched.
///
/// Tokens are popped from a max-heap in the same order a stable descending
/// sort would produce (ties go to the lower index), so only the nucleus is
/// ever ordered.
pub(crate) fn hard_topp_in_place(probs: &mut [f32], p: f64) -> usize {
    if p >= 1.0 {
        return probs.len();
    }
    // Non-negative floats order like their bit patterns.
    let mut heap: BinaryHeap<(u32, Reverse<u32>)> = probs
        .iter()
        .enumerate()
        .map(|(i, &x)| (x.to_bits(), Reverse(i as u32)))
        .collect();
    let mut kept = Vec::new();
    let mut cum = 0.0f64;
    while let Some((_, Reverse(i))) = heap.pop() {
        cum += probs[i as usize] as f64;
        kept.push(i as usize);
        if cum >= p {
            break;
        }
    }
    let kept_mass: f64 = kept.iter().map(|&i| probs[i] as f64).sum();
    let values: Vec<f32> = kept
        .iter()
        .map(|&i| (probs[i] as f64 / kept_mass) as f32)
        .collect();
    probs.iter_mut().for_each(|x| *x = 0.0);
    for (&i, &v) in kept.iter().zip(&values) {
        probs[i] = v;
    }
    kept.len()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{argmax, stable_softmax};
    use crate::rng::CounterRng;
    use proptest::prelude::*;

    fn t(xs: &[f32]) -> Tensor {
        Tensor::from_vec(xs.to_vec())
    }

    fn close(a: &[f32], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((*x as f64 - y).abs() < tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn temperature_examples() {
        let l = t(&[2.0, 1.0, 0.0]);
        close(
            temperature_scale(&l, 1.0).unwrap().data(),
            &[0.66524, 0.24473, 0.09003],
            1e-5,
        );
        assert_eq!(
            temperature_scale(&l, 1.0).unwrap(),
            stable_softmax(&l).unwrap()
        );
        let cold = temperature_scale(&l, 0.01).unwrap();
        assert!(cold.data()[0] as f64 > 1.0 - 1e-10);
        assert!(matches!(temperature_scale(&l, 0.0), Err(Error::Domain(_))));
        assert!(matches!(temperature_scale(&l, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn mask_worked_example() {
        let m = soft_topp_mask(&t(&[0.5, 0.3, 0.2]), 0.6, &SoftMaskConfig::default()).unwrap();
        close(m.data(), &[1.0, 1.0, (-6.0f64).exp()], 1e-6);
        assert_eq!(m.data()[0], 1.0);
        assert_eq!(m.data()[1], 1.0);
    }

    #[test]
    fn mask_unsorts_to_vocabulary_order() {
        let m = soft_topp_mask(&t(&[0.2, 0.5, 0.3]), 0.6, &SoftMaskConfig::default()).unwrap();
        close(m.data(), &[(-6.0f64).exp(), 1.0, 1.0], 1e-6);
    }

    #[test]
    fn mask_at_p_one_is_all_ones() {
        let m = soft_topp_mask(&t(&[0.5, 0.3, 0.2]), 1.0, &SoftMaskConfig::default()).unwrap();
        assert!(m.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn mask_rejects_bad_p() {
        let p = t(&[0.5, 0.5]);
        let cfg = SoftMaskConfig::default();
        assert!(matches!(
            soft_topp_mask(&p, 0.0, &cfg),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            soft_topp_mask(&p, 1.01, &cfg),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn renormalize_examples() {
        let probs = t(&[0.5, 0.3, 0.2]);
        let ones = renormalize(&probs, &t(&[1.0, 1.0, 1.0]), 1e-8).unwrap();
        close(ones.data(), &[0.5, 0.3, 0.2], 1e-7);

        let m = t(&[1.0, 1.0, 0.0024788]);
        let out = renormalize(&probs, &m, 1e-8).unwrap();
        close(out.data(), &[0.62461, 0.37477, 0.00062], 1e-5);

        let one_hot = renormalize(&probs, &t(&[0.0, 1.0, 0.0]), 1e-8).unwrap();
        close(one_hot.data(), &[0.0, 1.0, 0.0], 1e-7);

        assert!(matches!(
            renormalize(&probs, &t(&[0.0, 0.0, 0.0]), 1e-8),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn pipeline_examples() {
        let cfg = SoftMaskConfig::default();
        let l = t(&[0.3, -1.7, 2.2, 0.0]);
        let a = soft_pipeline(&l, 1.0, 1.0, &cfg).unwrap();
        let b = stable_softmax(&l).unwrap();
        close(a.data(), &b.to_f64(), 1e-6);

        let shift = 4.0f32;
        let l = t(&[
            0.5f32.ln() + shift,
            0.3f32.ln() + shift,
            0.2f32.ln() + shift,
        ]);
        let out = soft_pipeline(&l, 1.0, 0.6, &cfg).unwrap();
        close(out.data(), &[0.62461, 0.37477, 0.00062], 1e-5);
    }

    #[test]
    fn hard_topp_examples() {
        let out = hard_topp(&t(&[0.5, 0.3, 0.2]), 0.6).unwrap();
        close(out.data(), &[0.625, 0.375, 0.0], 1e-7);
        let p = t(&[0.1, 0.6, 0.3]);
        assert_eq!(hard_topp(&p, 1.0).unwrap(), p);
        let oh = t(&[0.0, 1.0, 0.0, 0.0]);
        for q in [0.05, 0.5, 0.99, 1.0] {
            assert_eq!(hard_topp(&oh, q).unwrap(), oh);
        }
    }

    #[test]
    fn single_token_vocabulary() {
        let cfg = SoftMaskConfig::default();
        let l = t(&[3.0]);
        assert_eq!(
            soft_topp_mask(&t(&[1.0]), 0.3, &cfg).unwrap().data(),
            &[1.0]
        );
        let out = soft_pipeline(&l, 0.7, 0.2, &cfg).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-7);
        assert_eq!(hard_topp(&t(&[1.0]), 0.2).unwrap().data(), &[1.0]);
    }

    // Nucleus membership from the hard path, derived independently of the
    // soft mask: a token is in the nucleus iff its probability is non-zero
    // after truncation.
    #[test]
    fn huge_alpha_recovers_nucleus_indicator() {
        let mut rng = CounterRng::new(11);
        let cfg = SoftMaskConfig::new(1e6, 1e-8).unwrap();
        let mut checked = 0;
        while checked < 100 {
            let v = 2 + rng.below(30) as usize;
            let logits: Vec<f32> = (0..v).map(|_| (rng.normal() * 2.0) as f32).collect();
            let probs = stable_softmax(&t(&logits)).unwrap();
            let p = rng.uniform(0.2, 0.95);
            let (sorted, _) = crate::numerics::sort_descending(&probs).unwrap();
            let c = crate::numerics::exclusive_cumsum(&sorted).unwrap();
            if c.data().iter().any(|&ci| (ci as f64 - p).abs() < 1e-4) {
                continue;
            }
            let mask = soft_topp_mask(&probs, p, &cfg).unwrap();
            let hard = hard_topp(&probs, p).unwrap();
            for (m, h) in mask.data().iter().zip(hard.data()) {
                let member = *h > 0.0;
                if member {
                    assert_eq!(*m, 1.0);
                } else {
                    assert!(*m < 1e-30, "mask {m} outside nucleus");
                }
            }
            checked += 1;
        }
    }

    fn arb_case() -> impl Strategy<Value = (Vec<f32>, f64, f64)> {
        (
            prop::collection::vec(-6.0f32..6.0, 1..40),
            0.2f64..2.0,
            0.05f64..1.0,
        )
    }

    /// Full-sort nucleus used as the oracle for the heap-based version.
    fn hard_topp_by_sorting(probs: &[f32], p: f64) -> Vec<f32> {
        let perm = descending_perm(probs);
        let mut cum = 0.0f64;
        let mut keep = perm.len();
        for (k, &i) in perm.iter().enumerate() {
            cum += probs[i] as f64;
            if cum >= p {
                keep = k + 1;
                break;
            }
        }
        let mass: f64 = perm[..keep].iter().map(|&i| probs[i] as f64).sum();
        let mut out = vec![0.0; probs.len()];
        for &i in &perm[..keep] {
            out[i] = (probs[i] as f64 / mass) as f32;
        }
        out
    }

    proptest! {
        #[test]
        fn heap_nucleus_matches_full_sort(
            raw in proptest::collection::vec(0u8..6, 1..40),
            p in 0.01f64..0.999,
        ) {
            // Few distinct values, so ties are common.
            let total: f64 = raw.iter().map(|&r| r as f64 + 0.5).sum();
            let probs: Vec<f32> = raw.iter().map(|&r| ((r as f64 + 0.5) / total) as f32).collect();
            let mut fast = probs.clone();
            hard_topp_in_place(&mut fast, p);
            let slow = hard_topp_by_sorting(&probs, p);
            prop_assert_eq!(
                fast.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                slow.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }

        #[test]
        fn pipeline_is_probability_vector_with_stable_argmax((logits, temp, p) in arb_case(), alpha in 1.0f64..200.0) {
            let cfg = SoftMaskConfig::new(alpha, 1e-8).unwrap();
            let out = soft_pipeline(&t(&logits), temp, p, &cfg).unwrap();
            let sum: f64 = out.data().iter().map(|&x| x as f64).sum();
            prop_assert!((sum - 1.0).abs() < 1e-6);
            prop_assert!(out.data().iter().all(|&x| x >= 0.0));
            prop_assert_eq!(argmax(out.data()), argmax(&logits));
        }

        #[test]
        fn mask_is_one_inside_and_below_one_outside((logits, temp, p) in arb_case()) {
            let probs = temperature_scale(&t(&logits), temp).unwrap();
            let mask = soft_topp_mask(&probs, p, &SoftMaskConfig::default()).unwrap();
            let perm = descending_perm(probs.data());
            let mut cum = 0.0f64;
            for &i in &perm {
                if cum < p {
                    prop_assert_eq!(mask.data()[i], 1.0);
                } else if cum - p > 1e-6 {
                    prop_assert!(mask.data()[i] < 1.0);
                }
                prop_assert!(mask.data()[i] > 0.0 || cum - p > 1.0);
                cum += probs.data()[i] as f64;
            }
            prop_assert_eq!(mask.data()[argmax(probs.data())], 1.0);
        }

        #[test]
        fn mask_non_increasing_in_alpha((logits, temp, p) in arb_case(), a1 in 1.0f64..100.0, da in 0.0f64..100.0) {
            let probs = temperature_scale(&t(&logits), temp).unwrap();
            let lo = soft_topp_mask(&probs, p, &SoftMaskConfig::new(a1, 1e-8).unwrap()).unwrap();
            let hi = soft_topp_mask(&probs, p, &SoftMaskConfig::new(a1 + da, 1e-8).unwrap()).unwrap();
            for (x, y) in lo.data().iter().zip(hi.data()) {
                prop_assert!(y <= x);
            }
        }
    }
}
