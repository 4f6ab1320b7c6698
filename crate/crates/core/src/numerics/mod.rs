//! Dense tensors, a reverse-mode value graph, and the handful of vector
//! primitives the decoding pipeline is built from.

pub mod container;
pub mod fdcheck;
pub mod graph;
pub mod tensor;

pub use container::{read_tensors, write_tensors};
pub use fdcheck::{finite_difference_check, FdReport};
pub use graph::{Gradients, NodeId, ValueGraph};
pub use tensor::{argmax, Tensor};

use crate::error::{Error, Result};
use tensor::check_finite;

/// Softmax with max-subtraction; sums are accumulated in `f64`.
pub fn stable_softmax(logits: &Tensor) -> Result<Tensor> {
    Ok(Tensor::from_vec(softmax_slice(logits.data(), 1.0)?))
}

/// `softmax(xs / temperature)` over a raw slice.
pub(crate) fn softmax_slice(xs: &[f32], temperature: f64) -> Result<Vec<f32>> {
    if xs.is_empty() {
        return Err(Error::usage("softmax over an empty vector"));
    }
    check_finite(xs)?;
    let inv_t = 1.0 / temperature;
    let max = xs.iter().fold(f32::NEG_INFINITY, |m, &x| m.max(x)) as f64;
    let exps: Vec<f64> = xs
        .iter()
        .map(|&x| ((x as f64 - max) * inv_t).exp())
        .collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|&e| (e / sum) as f32).collect())
}

/// Stable descending sort. `perm[k]` is the original index of the value now
/// at sorted position `k`.
pub fn sort_descending(values: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    check_finite(values.data())?;
    let perm = descending_perm(values.data());
    let sorted = perm.iter().map(|&i| values.data()[i]).collect();
    Ok((Tensor::from_vec(sorted), perm))
}

pub(crate) fn descending_perm<T: PartialOrd + Copy>(xs: &[T]) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..xs.len()).collect();
    // sort_by is stable, so equal values keep their original order.
    perm.sort_by(|&a, &b| {
        xs[b]
            .partial_cmp(&xs[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    perm
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (k, &i) in perm.iter().enumerate() {
        inv[i] = k;
    }
    inv
}

/// `out[i] = values[0] + ... + values[i-1]`, `out[0] = 0`.
pub fn exclusive_cumsum(values: &Tensor) -> Result<Tensor> {
    check_finite(values.data())?;
    let mut acc = 0.0f64;
    let out = values
        .data()
        .iter()
        .map(|&x| {
            let c = acc;
            acc += x as f64;
            c as f32
        })
        .collect();
    Ok(Tensor::from_vec(out))
}
