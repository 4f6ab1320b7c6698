//! Head training through the soft top-p pipeline.
//!
//! Each step draws a batch of kept trace records, predicts `(T̂, P̂)` with the
//! heads, pushes the frozen logits through [`soft_pipeline_node`], and
//! minimizes the mean (optionally DFT-weighted) cross-entropy of the target.
//! Only head parameters are leaves of the graph; backbone outputs enter as
//! constants, so nothing upstream of the heads can change.
//!
//! Control training uses the hinge ranking objective in
//! [`control_ranking_loss`] over triples of hidden-state sequences that
//! differ only in their command token.

pub mod optim;

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::synth::{Command, Grammar};
use crate::backbone::traces::TraceRecord;
use crate::backbone::{toy_transformer_forward, BackboneParams};
use crate::error::{Error, Result};
use crate::heads::{HeadNodes, HeadParams};
use crate::numerics::{NodeId, Tensor, ValueGraph};
use crate::rng::{derive_seed, CounterRng};
use crate::soft_topp::{soft_pipeline_node, SoftMaskConfig};

use optim::{optimizer_step, AdamState, AdamW};

/// Added inside the log so a zero-probability target has a finite loss.
pub const CE_EPS: f64 = 1e-12;

fn check_target(v: usize, target: u32) -> Result<()> {
    if target as usize >= v {
        return Err(Error::usage(format!(
            "target {target} out of range for vocabulary {v}"
        )));
    }
    Ok(())
}

/// `-ln(p_tilde[target] + 1e-12)`.
pub fn ce_loss(p_tilde: &Tensor, target: u32) -> Result<f64> {
    check_target(p_tilde.len(), target)?;
    Ok(-(p_tilde.data()[target as usize] as f64 + CE_EPS).ln())
}

/// Graph form of [`ce_loss`] for a `[V]` distribution node.
pub fn ce_node(g: &mut ValueGraph, p_tilde: NodeId, target: u32) -> Result<NodeId> {
    check_target(g.value(p_tilde).len(), target)?;
    let p = g.gather(p_tilde, vec![target as usize])?;
    let lp = g.ln_eps(p, CE_EPS);
    Ok(g.affine(lp, -1.0, 0.0))
}

/// Dynamic fine-tuning weight: the target's final probability, used as a
/// constant multiplier (no gradient flows through it).
pub fn dft_weight(p_tilde: &Tensor, target: u32) -> Result<f64> {
    check_target(p_tilde.len(), target)?;
    Ok(p_tilde.data()[target as usize] as f64)
}

/// Keep flags for easy-token masking. Records whose greedy prediction already
/// matches the target are dropped independently with probability `fraction`;
/// all other records are kept.
pub fn easy_token_mask(
    records: &[TraceRecord],
    fraction: f64,
    rng: &mut CounterRng,
) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::usage(format!(
            "easy_mask_fraction must lie in [0, 1), got {fraction}"
        )));
    }
    Ok(records
        .iter()
        .map(|r| !(r.greedy_match && fraction > 0.0 && rng.bernoulli(fraction)))
        .collect())
}

/// Per-position `(T̂, P̂)` predictions.
pub type Preds = [(f64, f64)];

/// Hinge ranking objective: for every position and for each of `T̂` and
/// `P̂`, `max(0, margin - (high - base)) + max(0, margin - (base - low))`,
/// summed.
pub fn control_ranking_loss(base: &Preds, high: &Preds, low: &Preds, margin: f64) -> Result<f64> {
    if base.len() != high.len() || base.len() != low.len() {
        return Err(Error::usage(format!(
            "ranking loss needs equal lengths, got base {} high {} low {}",
            base.len(),
            high.len(),
            low.len()
        )));
    }
    let hinge = |x: f64| (margin - x).max(0.0);
    let mut total = 0.0;
    for i in 0..base.len() {
        let (b, h, l) = (base[i], high[i], low[i]);
        total += hinge(h.0 - b.0) + hinge(b.0 - l.0);
        total += hinge(h.1 - b.1) + hinge(b.1 - l.1);
    }
    Ok(total)
}

/// Graph form of [`control_ranking_loss`] over equally shaped prediction
/// nodes (one per condition, for one parameter).
pub fn ranking_node(
    g: &mut ValueGraph,
    base: NodeId,
    high: NodeId,
    low: NodeId,
    margin: f64,
) -> Result<NodeId> {
    let up = g.sub(high, base)?;
    let up = g.affine(up, -1.0, margin);
    let up = g.relu(up);
    let down = g.sub(base, low)?;
    let down = g.affine(down, -1.0, margin);
    let down = g.relu(down);
    let both = g.add(up, down)?;
    Ok(g.sum(both))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub easy_mask_fraction: f64,
    pub dft_enabled: bool,
    pub alpha: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            steps: 400,
            batch_size: 64,
            easy_mask_fraction: 0.6,
            dft_enabled: true,
            alpha: crate::soft_topp::DEFAULT_ALPHA,
            epsilon: crate::soft_topp::DEFAULT_EPSILON,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }

    pub fn mask(&self) -> Result<SoftMaskConfig> {
        SoftMaskConfig::new(self.alpha, self.epsilon)
    }

    pub fn validate(&self) -> Result<()> {
        self.mask()?;
        if self.batch_size == 0 {
            return Err(Error::usage("batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.easy_mask_fraction) {
            return Err(Error::usage(format!(
                "easy_mask_fraction must lie in [0, 1), got {}",
                self.easy_mask_fraction
            )));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::usage("lr must be non-negative"));
        }
        Ok(())
    }
}

/// One line of a loss curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub loss: f64,
    #[serde(rename = "mean_T")]
    pub mean_t: f64,
    #[serde(rename = "mean_P")]
    pub mean_p: f64,
}

pub fn write_curve_jsonl(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut out = Vec::new();
    for p in curve {
        serde_json::to_writer(&mut out, p).expect("curve point serializes");
        out.push(b'\n');
    }
    std::fs::File::create(path)?.write_all(&out)?;
    Ok(())
}

/// Mean per-record objective over `records` given one `(T, P)` node pair per
/// record.
fn objective(
    g: &mut ValueGraph,
    records: &[&TraceRecord],
    preds: &[(NodeId, NodeId)],
    mask: &SoftMaskConfig,
    dft: bool,
) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(records.len());
    for (r, &(t, p)) in records.iter().zip(preds) {
        let logits = g.constant(vec![r.logits.len()], r.logits.to_f64())?;
        let pt = soft_pipeline_node(g, logits, t, p, mask)?;
        let ce = ce_node(g, pt, r.target)?;
        let term = if dft {
            let w = g.value(pt)[r.target as usize];
            g.affine(ce, w, 0.0)
        } else {
            ce
        };
        terms.push(term);
    }
    let all = g.concat(&terms);
    Ok(g.mean(all))
}

/// The training objective with both heads replaced by constants.
pub fn constant_objective(
    records: &[TraceRecord],
    t: f64,
    p: f64,
    config: &TrainConfig,
) -> Result<f64> {
    let mut g = ValueGraph::new();
    let tn = g.constant(vec![], vec![t])?;
    let pn = g.constant(vec![], vec![p])?;
    let refs: Vec<&TraceRecord> = records.iter().collect();
    let preds = vec![(tn, pn); refs.len()];
    let loss = objective(&mut g, &refs, &preds, &config.mask()?, config.dft_enabled)?;
    Ok(g.scalar_value(loss))
}

/// Registers a batch's hidden states and returns the head outputs as
/// per-record scalar nodes plus the raw `[B, 1]` nodes.
fn predict_batch(
    g: &mut ValueGraph,
    nodes: &HeadNodes,
    hidden: Vec<f64>,
    rows: usize,
    d: usize,
) -> Result<(Vec<(NodeId, NodeId)>, NodeId, NodeId)> {
    let h = g.constant(vec![rows, d], hidden)?;
    let t = nodes.temperature(g, h)?;
    let p = nodes.top_p(g, h, t)?;
    let mut preds = Vec::with_capacity(rows);
    for b in 0..rows {
        let tb = g.gather(t, vec![b])?;
        let pb = g.gather(p, vec![b])?;
        preds.push((tb, pb));
    }
    Ok((preds, t, p))
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub heads: HeadParams,
    pub curve: Vec<CurvePoint>,
}

fn check_dims(heads: &HeadParams, records: &[TraceRecord]) -> Result<()> {
    let d = heads.d_model();
    if let Some((i, r)) = records
        .iter()
        .enumerate()
        .find(|(_, r)| r.hidden.len() != d)
    {
        return Err(Error::usage(format!(
            "record {i} has hidden size {}, heads expect {d}",
            r.hidden.len()
        )));
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

/// Trains `init` on trace records. Easy-token drops are redrawn at the start
/// of every pass over the data; batches are consecutive slices of a shuffled
/// list of the kept records.
pub fn train_heads(
    records: &[TraceRecord],
    init: &HeadParams,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if records.is_empty() {
        return Err(Error::usage("cannot train on an empty dataset"));
    }
    check_dims(init, records)?;
    let mask = config.mask()?;
    let hyper = config.optimizer();
    let d = init.d_model();
    let mut heads = init.clone();
    let mut flat = heads.to_flat();
    let mut state = AdamState::new(flat.len());
    let mut rng = CounterRng::new(derive_seed(config.seed, 0x7472));
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0usize;
    let mut curve = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        if cursor >= order.len() {
            loop {
                let keep = easy_token_mask(records, config.easy_mask_fraction, &mut rng)?;
                order = (0..records.len()).filter(|&i| keep[i]).collect();
                epoch += 1;
                if !order.is_empty() {
                    break;
                }
            }
            rng.shuffle(&mut order);
            cursor = 0;
        }
        let end = (cursor + config.batch_size).min(order.len());
        let batch: Vec<&TraceRecord> = order[cursor..end].iter().map(|&i| &records[i]).collect();
        let batch_id = cursor / config.batch_size;
        cursor = end;

        let mut g = ValueGraph::new();
        let nodes = HeadNodes::bind(&mut g, &heads);
        let hidden: Vec<f64> = batch.iter().flat_map(|r| r.hidden.to_f64()).collect();
        let (preds, t, p) = predict_batch(&mut g, &nodes, hidden, batch.len(), d)?;
        let loss = objective(&mut g, &batch, &preds, &mask, config.dft_enabled)?;
        let value = g.scalar_value(loss);
        if !value.is_finite() {
            return Err(Error::Numerical {
                step,
                msg: format!("loss is {value} on batch {batch_id} of epoch {epoch}"),
            });
        }
        let grads = g.backward(loss)?;
        optimizer_step(&mut flat, &nodes.flat_grad(&grads), &mut state, &hyper)?;
        heads.set_flat(&flat)?;
        curve.push(CurvePoint {
            step,
            loss: value,
            mean_t: mean(g.value(t)),
            mean_p: mean(g.value(p)),
        });
    }
    Ok(TrainReport { heads, curve })
}

// ---------------------------------------------------------------------------
// Control training
// ---------------------------------------------------------------------------

/// Hidden states of one token sequence read under the three command
/// conditions. Row `i` of every tensor is the same position.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlTriple {
    pub base: Tensor,
    pub high: Tensor,
    pub low: Tensor,
    pub margin: f64,
}

impl ControlTriple {
    pub fn positions(&self) -> usize {
        self.base.shape()[0]
    }

    fn validate(&self, d: usize) -> Result<()> {
        let s = self.base.shape();
        if s.len() != 2 || s[1] != d || self.high.shape() != s || self.low.shape() != s {
            return Err(Error::usage(format!(
                "control triple shapes {:?} / {:?} / {:?} do not match [n, {d}]",
                s,
                self.high.shape(),
                self.low.shape()
            )));
        }
        if !(self.margin > 0.0) {
            return Err(Error::usage("ranking margin must be positive"));
        }
        Ok(())
    }
}

/// Builds `n` triples from task sequences of length `len`. Each body is
/// sampled under the low-diversity command so it is valid under all three;
/// only the command token at position 0 differs between conditions.
pub fn build_control_triples(
    backbone: &BackboneParams,
    grammar: &Grammar,
    n: usize,
    len: usize,
    margin: f64,
    seed: u64,
) -> Result<Vec<ControlTriple>> {
    let mut rng = CounterRng::new(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let body = grammar.sample(Command::Low, len, &mut rng);
        let hidden = |cmd: Command| -> Result<Tensor> {
            let mut seq = body.clone();
            seq[0] = cmd.token();
            Ok(toy_transformer_forward(&seq, backbone)?.0)
        };
        out.push(ControlTriple {
            base: hidden(Command::None)?,
            high: hidden(Command::High)?,
            low: hidden(Command::Low)?,
            margin,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    pub lr: f64,
    pub steps: usize,
    /// Triples per optimizer step.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 100,
            batch_size: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct ControlReport {
    pub heads: HeadParams,
    pub curve: Vec<ControlPoint>,
}

/// Mean per-triple ranking loss as a graph node.
fn control_objective(
    g: &mut ValueGraph,
    nodes: &HeadNodes,
    triples: &[&ControlTriple],
) -> Result<NodeId> {
    let mut terms = Vec::with_capacity(triples.len());
    for tr in triples {
        let mut tp = Vec::with_capacity(3);
        for h in [&tr.base, &tr.high, &tr.low] {
            let hn = g.constant(h.shape().to_vec(), h.to_f64())?;
            let t = nodes.temperature(g, hn)?;
            let p = nodes.top_p(g, hn, t)?;
            tp.push((t, p));
        }
        let lt = ranking_node(g, tp[0].0, tp[1].0, tp[2].0, tr.margin)?;
        let lp = ranking_node(g, tp[0].1, tp[1].1, tp[2].1, tr.margin)?;
        terms.push(g.add(lt, lp)?);
    }
    let all = g.concat(&terms);
    Ok(g.mean(all))
}

/// Per-position predictions of `heads` for every row of `hidden`.
pub fn predict_rows(heads: &HeadParams, hidden: &Tensor) -> Result<Vec<(f64, f64)>> {
    let d = heads.d_model();
    if hidden.shape().len() != 2 || hidden.shape()[1] != d {
        return Err(Error::usage(format!(
            "hidden rows must be [n, {d}], got {:?}",
            hidden.shape()
        )));
    }
    (0..hidden.shape()[0])
        .map(|i| heads.predict(hidden.row(i)))
        .collect()
}

/// [`control_ranking_loss`] of `heads` on one triple.
pub fn triple_loss(heads: &HeadParams, triple: &ControlTriple) -> Result<f64> {
    control_ranking_loss(
        &predict_rows(heads, &triple.base)?,
        &predict_rows(heads, &triple.high)?,
        &predict_rows(heads, &triple.low)?,
        triple.margin,
    )
}

/// Fine-tunes heads on the ranking objective alone.
pub fn control_train(
    triples: &[ControlTriple],
    init: &HeadParams,
    config: &ControlConfig,
) -> Result<ControlReport> {
    if triples.is_empty() {
        return Err(Error::usage("no control triples"));
    }
    if config.batch_size == 0 {
        return Err(Error::usage("batch_size must be >= 1"));
    }
    for tr in triples {
        tr.validate(init.d_model())?;
    }
    let hyper = AdamW {
        lr: config.lr,
        ..AdamW::default()
    };
    let mut heads = init.clone();
    let mut flat = heads.to_flat();
    let mut state = AdamState::new(flat.len());
    let mut rng = CounterRng::new(derive_seed(config.seed, 0x6374));
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        if cursor >= order.len() {
            order = (0..triples.len()).collect();
            rng.shuffle(&mut order);
            cursor = 0;
        }
        let end = (cursor + config.batch_size).min(order.len());
        let batch: Vec<&ControlTriple> = order[cursor..end].iter().map(|&i| &triples[i]).collect();
        cursor = end;
        let mut g = ValueGraph::new();
        let nodes = HeadNodes::bind(&mut g, &heads);
        let loss = control_objective(&mut g, &nodes, &batch)?;
        let value = g.scalar_value(loss);
        if !value.is_finite() {
            return Err(Error::Numerical {
                step,
                msg: format!("ranking loss is {value}"),
            });
        }
        let grads = g.backward(loss)?;
        optimizer_step(&mut flat, &nodes.flat_grad(&grads), &mut state, &hyper)?;
        heads.set_flat(&flat)?;
        curve.push(ControlPoint { step, loss: value });
    }
    Ok(ControlReport { heads, curve })
}
