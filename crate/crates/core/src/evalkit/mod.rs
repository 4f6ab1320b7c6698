//! Measurement protocols: pass@1 by oversampling, the unbiased pass@k
//! estimator, two-stage static grid search, control-consistency statistics,
//! and efficiency accounting ([`efficiency`]). [`bench`] runs decoding modes
//! over task sets and aggregates the outcomes.

pub mod bench;
pub mod efficiency;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::decoding::GenerationTrace;
use crate::error::{Error, Result};

/// Correctness of one sampled completion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub problem: usize,
    pub seed: u64,
    pub sample: usize,
    pub correct: bool,
    /// The checker failed on this sample; it counts as incorrect.
    pub flagged: bool,
}

/// Mean and population standard deviation of per-seed accuracy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PassAt1 {
    pub mean: f64,
    pub std: f64,
    pub per_seed: Vec<(u64, f64)>,
}

/// Per-seed accuracy over all problems and samples, summarized across seeds.
/// Every `(problem, seed)` cell must hold the same number of samples.
pub fn pass_at_1(outcomes: &[SampleOutcome]) -> Result<PassAt1> {
    if outcomes.is_empty() {
        return Err(Error::usage("pass@1 of an empty outcome set"));
    }
    let mut cells: BTreeMap<(usize, u64), usize> = BTreeMap::new();
    let mut seeds: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
    for o in outcomes {
        *cells.entry((o.problem, o.seed)).or_default() += 1;
        let e = seeds.entry(o.seed).or_default();
        e.0 += o.correct as usize;
        e.1 += 1;
    }
    let first = *cells.values().next().expect("nonempty");
    if let Some(((p, s), n)) = cells.iter().find(|(_, &n)| n != first) {
        return Err(Error::usage(format!(
            "ragged sample counts: problem {p} seed {s} has {n}, expected {first}"
        )));
    }
    let per_seed: Vec<(u64, f64)> = seeds
        .iter()
        .map(|(&s, &(c, n))| (s, c as f64 / n as f64))
        .collect();
    let (mean, std) = mean_std(per_seed.iter().map(|&(_, a)| a));
    Ok(PassAt1 {
        mean,
        std,
        per_seed,
    })
}

/// Mean and population standard deviation.
pub fn mean_std(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = xs.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.clone().sum::<f64>() / n as f64;
    let var = xs.map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

fn binomial(n: u64, k: u64) -> Option<u128> {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // acc * (n - i) is divisible by (i + 1) at every step.
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

/// Unbiased pass@k from `c` correct out of `n` samples:
/// `1 - C(n - c, k) / C(n, k)`.
///
/// While `C(n, k)` is exactly representable in `f64` the result is the
/// correctly rounded value of that ratio; beyond that a telescoping product
/// is used.
pub fn pass_at_k(n: u64, c: u64, k: u64) -> Result<f64> {
    if c > n {
        return Err(Error::usage(format!("c = {c} exceeds n = {n}")));
    }
    if k == 0 || k > n {
        return Err(Error::usage(format!("k = {k} must lie in 1..={n}")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    const EXACT: u128 = 1 << 53;
    if let (Some(total), Some(miss)) = (binomial(n, k), binomial(n - c, k)) {
        if total <= EXACT {
            return Ok((total - miss) as f64 / total as f64);
        }
    }
    let mut miss = 1.0f64;
    for i in (n - c + 1)..=n {
        miss *= 1.0 - k as f64 / i as f64;
    }
    Ok(1.0 - miss)
}

/// Both stages of a static grid search.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSearchResult {
    /// `(T, score)` at `P = 1.0`.
    pub stage1: Vec<(f64, f64)>,
    pub t_star: f64,
    /// `(P, score)` at `T = t_star`.
    pub stage2: Vec<(f64, f64)>,
    pub p_star: f64,
    pub best_score: f64,
}

/// Temperature first at `P = 1.0` (ties go to the smaller `T`), then top-p at
/// the chosen temperature (ties go to the larger `P`).
pub fn grid_search<F>(mut eval_fn: F, t_grid: &[f64], p_grid: &[f64]) -> Result<GridSearchResult>
where
    F: FnMut(f64, f64) -> Result<f64>,
{
    if t_grid.is_empty() || p_grid.is_empty() {
        return Err(Error::usage("grid search needs nonempty grids"));
    }
    let mut eval = |t: f64, p: f64| -> Result<f64> {
        let s = eval_fn(t, p).map_err(|e| e.context(format!("grid point T={t} P={p}")))?;
        if s.is_nan() {
            return Err(Error::domain(format!("score is NaN at T={t} P={p}")));
        }
        Ok(s)
    };
    let mut stage1 = Vec::with_capacity(t_grid.len());
    for &t in t_grid {
        stage1.push((t, eval(t, 1.0)?));
    }
    let t_star = pick(&stage1, |a, b| a < b);
    let mut stage2 = Vec::with_capacity(p_grid.len());
    for &p in p_grid {
        stage2.push((p, eval(t_star, p)?));
    }
    let p_star = pick(&stage2, |a, b| a > b);
    let best_score = stage2
        .iter()
        .find(|&&(p, _)| p == p_star)
        .map(|&(_, s)| s)
        .expect("p_star is in the table");
    Ok(GridSearchResult {
        stage1,
        t_star,
        stage2,
        p_star,
        best_score,
    })
}

/// Highest score; among equal scores the value preferred by `better`.
fn pick(table: &[(f64, f64)], better: impl Fn(f64, f64) -> bool) -> f64 {
    let mut best = table[0];
    for &(x, s) in &table[1..] {
        if s > best.1 || (s == best.1 && better(x, best.0)) {
            best = (x, s);
        }
    }
    best.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Low,
    High,
}

/// How commanded generations moved relative to their baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    pub delta_t: f64,
    pub delta_p: f64,
    /// Percent of prompts whose mean moved strictly in the commanded
    /// direction.
    pub consistency_t: f64,
    pub consistency_p: f64,
    pub prompts: usize,
}

/// Pairs `base[i]` with `cmd[i]` and compares per-prompt mean `T̂` and `P̂`
/// over generated tokens.
pub fn control_consistency(
    base: &[GenerationTrace],
    cmd: &[GenerationTrace],
    direction: Direction,
) -> Result<Consistency> {
    if base.len() != cmd.len() {
        return Err(Error::usage(format!(
            "{} baseline traces but {} commanded traces",
            base.len(),
            cmd.len()
        )));
    }
    if base.is_empty() {
        return Err(Error::usage("no prompts to compare"));
    }
    let sign = match direction {
        Direction::High => 1.0,
        Direction::Low => -1.0,
    };
    let (mut dt, mut dp, mut ct, mut cp) = (0.0, 0.0, 0usize, 0usize);
    for (i, (b, c)) in base.iter().zip(cmd).enumerate() {
        if b.tokens.is_empty() || c.tokens.is_empty() {
            return Err(Error::usage(format!("prompt {i} has an empty generation")));
        }
        let t = c.mean_t() - b.mean_t();
        let p = c.mean_p() - b.mean_p();
        dt += t;
        dp += p;
        ct += (sign * t > 0.0) as usize;
        cp += (sign * p > 0.0) as usize;
    }
    let n = base.len() as f64;
    Ok(Consistency {
        delta_t: dt / n,
        delta_p: dp / n,
        consistency_t: 100.0 * ct as f64 / n,
        consistency_p: 100.0 * cp as f64 / n,
        prompts: base.len(),
    })
}
