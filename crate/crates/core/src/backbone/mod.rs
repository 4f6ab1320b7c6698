//! A tiny causal transformer that plays the role of the frozen base model,
//! the synthetic task it is pretrained on, and the trace files that decouple
//! head training from the backbone.
//!
//! Architecture: learned token and position embeddings, `n_layers` pre-norm
//! blocks (multi-head causal self-attention, then a ReLU MLP), a final layer
//! norm whose output is the hidden state `h_t` the heads read, and an untied
//! output projection to logits.
//!
//! Two forward implementations exist. [`BackboneNodes::forward`] records a
//! differentiable graph over a batch and is used for pretraining.
//! [`DecodeState`] runs one token at a time in `f32` with cached keys and
//! values and is used everywhere else; [`toy_transformer_forward`] is just
//! repeated decode steps.

pub mod synth;
pub mod traces;

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{container, NodeId, Tensor, ValueGraph};
use crate::paramfile;
use crate::rng::{derive_seed, CounterRng};
use crate::training::optim::{optimizer_step, AdamState, AdamW};

use synth::{Command, Grammar, SynthTaskSpec};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub vocab: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            vocab: 128,
            max_len: 64,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab", self.vocab),
            ("max_len", self.max_len),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::usage(format!("backbone {name} must be >= 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::usage(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Width of one attention head.
    pub fn attn_width(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

const LAYER_NAMES: [&str; 12] = [
    "ln1.g", "ln1.b", "wq", "wk", "wv", "wo", "ln2.g", "ln2.b", "w1", "b1", "w2", "b2",
];

impl Layer {
    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ln2_g,
            &self.ln2_b,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 12] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<Layer>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub w_out: Tensor,
    pub b_out: Tensor,
}

fn uniform(rng: &mut CounterRng, shape: Vec<usize>, bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-bound, bound) as f32).collect();
    Tensor::new(shape, data).expect("shape matches")
}

fn filled(shape: Vec<usize>, x: f32) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, vec![x; n]).expect("shape matches")
}

impl BackboneParams {
    /// Seeded initialization: projections uniform in `±1/sqrt(fan_in)`
    /// (residual-branch outputs shrunk by `1/sqrt(2 n_layers)`), embeddings
    /// uniform in `±0.1`, layer-norm gains 1 and biases 0.
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let BackboneConfig {
            vocab: v,
            max_len,
            d_model: d,
            d_ff,
            n_layers,
            ..
        } = config;
        let mut rng = CounterRng::new(seed);
        let in_d = 1.0 / (d as f64).sqrt();
        let in_ff = 1.0 / (d_ff as f64).sqrt();
        let resid = 1.0 / (2.0 * n_layers as f64).sqrt();
        let tok_emb = uniform(&mut rng, vec![v, d], 0.1);
        let pos_emb = uniform(&mut rng, vec![max_len, d], 0.1);
        let layers = (0..n_layers)
            .map(|_| Layer {
                ln1_g: filled(vec![d], 1.0),
                ln1_b: filled(vec![d], 0.0),
                wq: uniform(&mut rng, vec![d, d], in_d),
                wk: uniform(&mut rng, vec![d, d], in_d),
                wv: uniform(&mut rng, vec![d, d], in_d),
                wo: uniform(&mut rng, vec![d, d], in_d * resid),
                ln2_g: filled(vec![d], 1.0),
                ln2_b: filled(vec![d], 0.0),
                w1: uniform(&mut rng, vec![d, d_ff], in_d),
                b1: filled(vec![d_ff], 0.0),
                w2: uniform(&mut rng, vec![d_ff, d], in_ff * resid),
                b2: filled(vec![d], 0.0),
            })
            .collect();
        Ok(Self {
            config,
            tok_emb,
            pos_emb,
            layers,
            lnf_g: filled(vec![d], 1.0),
            lnf_b: filled(vec![d], 0.0),
            w_out: uniform(&mut rng, vec![d, v], in_d),
            b_out: filled(vec![v], 0.0),
        })
    }

    /// Every tensor with its canonical name, in storage order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_NAMES.iter().zip(layer.tensors()) {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("lnf.g".into(), &self.lnf_g));
        out.push(("lnf.b".into(), &self.lnf_b));
        out.push(("w_out".into(), &self.w_out));
        out.push(("b_out".into(), &self.b_out));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.extend([
            &mut self.lnf_g,
            &mut self.lnf_b,
            &mut self.w_out,
            &mut self.b_out,
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn byte_size(&self) -> usize {
        4 * self.param_count()
    }

    pub fn to_flat(&self) -> Vec<f32> {
        self.named_tensors()
            .iter()
            .flat_map(|(_, t)| t.data().iter().copied())
            .collect()
    }

    pub fn set_flat(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::usage(format!(
                "expected {} backbone parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// The weight-file encoding of every tensor, back to back.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.byte_size() + 64 * 16);
        for (_, t) in self.named_tensors() {
            container::encode_tensor(t, &mut buf);
        }
        buf
    }

    /// SHA-256 of [`Self::to_bytes`], hex encoded.
    pub fn checksum(&self) -> String {
        let digest = Sha256::digest(self.to_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named = self.named_tensors();
        let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        paramfile::save(
            path,
            "backbone",
            &refs,
            serde_json::to_value(self.config).unwrap(),
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (mut set, meta) = paramfile::load(path, "backbone")?;
        let config: BackboneConfig =
            serde_json::from_value(meta).map_err(|e| Error::FormatLine {
                line: 1,
                msg: format!("backbone metadata: {e}"),
            })?;
        let mut params = Self::init(config, 0)?;
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let t = paramfile::take(&mut set, name)?;
            if t.shape() != slot.shape() {
                return Err(Error::usage(format!(
                    "tensor {name} has shape {:?}, config implies {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if let Some((extra, _)) = set.first() {
            return Err(Error::usage(format!("unexpected tensor {extra}")));
        }
        Ok(params)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(Error::usage(format!(
                "token id {t} out of range for vocab {}",
                self.config.vocab
            )));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::usage(format!(
                "sequence of {} tokens exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        Ok(())
    }
}

/// Backbone parameters that can no longer be modified. The checksum taken at
/// freezing time lets callers prove a training run left them untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBackbone {
    params: BackboneParams,
    checksum: String,
}

impl FrozenBackbone {
    pub fn freeze(params: BackboneParams) -> Self {
        let checksum = params.checksum();
        Self { params, checksum }
    }

    pub fn params(&self) -> &BackboneParams {
        &self.params
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.params.config
    }

    /// Checksum recorded when the parameters were frozen.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// Recomputes the checksum from the current bytes.
    pub fn verify(&self) -> Result<()> {
        let now = self.params.checksum();
        if now != self.checksum {
            return Err(Error::usage(format!(
                "frozen backbone changed: checksum {now} != {}",
                self.checksum
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::freeze(BackboneParams::load(path)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.params.save(path)
    }

    pub fn into_params(self) -> BackboneParams {
        self.params
    }
}

// ---------------------------------------------------------------------------
// Incremental f32 forward
// ---------------------------------------------------------------------------

fn layer_norm_into(x: &[f32], g: &[f32], b: &[f32], out: &mut [f32]) {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + LN_EPS).sqrt();
    for i in 0..x.len() {
        out[i] = ((x[i] as f64 - mean) * inv) as f32 * g[i] + b[i];
    }
}

/// `out = bias + x W` for row-major `W: [x.len(), out.len()]`.
fn linear_into(x: &[f32], w: &[f32], bias: Option<&[f32]>, out: &mut [f32]) {
    let n = out.len();
    match bias {
        Some(b) => out.copy_from_slice(b),
        None => out.iter_mut().for_each(|o| *o = 0.0),
    }
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * n..(i + 1) * n];
        out.iter_mut().zip(row).for_each(|(o, &wv)| *o += xi * wv);
    }
}

/// Per-sequence decoding state: cached keys and values of every layer plus
/// scratch buffers, so a step allocates nothing.
#[derive(Clone, Debug)]
pub struct DecodeState<'a> {
    params: &'a BackboneParams,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
    x: Vec<f32>,
    a: Vec<f32>,
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
    att: Vec<f32>,
    proj: Vec<f32>,
    ff: Vec<f32>,
    scores: Vec<f32>,
    hidden: Vec<f32>,
    logits: Vec<f32>,
}

impl<'a> DecodeState<'a> {
    pub fn new(params: &'a BackboneParams) -> Self {
        let c = &params.config;
        let d = c.d_model;
        Self {
            params,
            keys: vec![Vec::with_capacity(c.max_len * d); c.n_layers],
            values: vec![Vec::with_capacity(c.max_len * d); c.n_layers],
            len: 0,
            x: vec![0.0; d],
            a: vec![0.0; d],
            q: vec![0.0; d],
            k: vec![0.0; d],
            v: vec![0.0; d],
            att: vec![0.0; d],
            proj: vec![0.0; d],
            ff: vec![0.0; c.d_ff],
            scores: vec![0.0; c.max_len],
            hidden: vec![0.0; d],
            logits: vec![0.0; c.vocab],
        }
    }

    /// Tokens consumed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Final hidden state after the last step.
    pub fn hidden(&self) -> &[f32] {
        &self.hidden
    }

    /// Next-token logits after the last step.
    pub fn logits(&self) -> &[f32] {
        &self.logits
    }

    /// Feeds one token at position `len()`.
    pub fn step(&mut self, token: u32) -> Result<()> {
        let p = self.params;
        let c = &p.config;
        if token as usize >= c.vocab {
            return Err(Error::usage(format!(
                "token id {token} out of range for vocab {}",
                c.vocab
            )));
        }
        if self.len >= c.max_len {
            return Err(Error::usage(format!(
                "context of {} tokens is full",
                c.max_len
            )));
        }
        let d = c.d_model;
        let dh = c.attn_width();
        let scale = 1.0 / (dh as f32).sqrt();
        let pos = self.len;
        let te = p.tok_emb.row(token as usize);
        let pe = p.pos_emb.row(pos);
        for i in 0..d {
            self.x[i] = te[i] + pe[i];
        }
        for (li, layer) in p.layers.iter().enumerate() {
            layer_norm_into(&self.x, layer.ln1_g.data(), layer.ln1_b.data(), &mut self.a);
            linear_into(&self.a, layer.wq.data(), None, &mut self.q);
            linear_into(&self.a, layer.wk.data(), None, &mut self.k);
            linear_into(&self.a, layer.wv.data(), None, &mut self.v);
            self.keys[li].extend_from_slice(&self.k);
            self.values[li].extend_from_slice(&self.v);
            let (keys, values) = (&self.keys[li], &self.values[li]);
            let n = pos + 1;
            for h in 0..c.n_heads {
                let cols = h * dh..(h + 1) * dh;
                let q = &self.q[cols.clone()];
                let scores = &mut self.scores[..n];
                for (j, s) in scores.iter_mut().enumerate() {
                    let kj = &keys[j * d + cols.start..j * d + cols.end];
                    *s = q.iter().zip(kj).map(|(a, b)| a * b).sum::<f32>() * scale;
                }
                let max = scores.iter().fold(f32::NEG_INFINITY, |m, &s| m.max(s));
                let mut sum = 0.0f64;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s as f64;
                }
                let inv = (1.0 / sum) as f32;
                let out = &mut self.att[cols.clone()];
                out.iter_mut().for_each(|o| *o = 0.0);
                for (j, &s) in scores.iter().enumerate() {
                    let w = s * inv;
                    let vj = &values[j * d + cols.start..j * d + cols.end];
                    out.iter_mut().zip(vj).for_each(|(o, &x)| *o += w * x);
                }
            }
            linear_into(&self.att, layer.wo.data(), None, &mut self.proj);
            self.x
                .iter_mut()
                .zip(&self.proj)
                .for_each(|(x, &y)| *x += y);

            layer_norm_into(&self.x, layer.ln2_g.data(), layer.ln2_b.data(), &mut self.a);
            linear_into(
                &self.a,
                layer.w1.data(),
                Some(layer.b1.data()),
                &mut self.ff,
            );
            self.ff.iter_mut().for_each(|z| *z = z.max(0.0));
            linear_into(
                &self.ff,
                layer.w2.data(),
                Some(layer.b2.data()),
                &mut self.proj,
            );
            self.x
                .iter_mut()
                .zip(&self.proj)
                .for_each(|(x, &y)| *x += y);
        }
        layer_norm_into(&self.x, p.lnf_g.data(), p.lnf_b.data(), &mut self.hidden);
        linear_into(
            &self.hidden,
            p.w_out.data(),
            Some(p.b_out.data()),
            &mut self.logits,
        );
        self.len += 1;
        Ok(())
    }
}

/// Hidden states `[L, d_model]` and logits `[L, V]` for every position of
/// `tokens`. Position `t` depends only on `tokens[..=t]`.
pub fn toy_transformer_forward(
    tokens: &[u32],
    params: &BackboneParams,
) -> Result<(Tensor, Tensor)> {
    params.check_tokens(tokens)?;
    let c = &params.config;
    let mut hidden = Vec::with_capacity(tokens.len() * c.d_model);
    let mut logits = Vec::with_capacity(tokens.len() * c.vocab);
    let mut st = DecodeState::new(params);
    for &t in tokens {
        st.step(t)?;
        hidden.extend_from_slice(st.hidden());
        logits.extend_from_slice(st.logits());
    }
    Ok((
        Tensor::new(vec![tokens.len(), c.d_model], hidden)?,
        Tensor::new(vec![tokens.len(), c.vocab], logits)?,
    ))
}

// ---------------------------------------------------------------------------
// Differentiable batch forward
// ---------------------------------------------------------------------------

struct LayerNodes {
    ids: [NodeId; 12],
}

/// Backbone tensors registered in a [`ValueGraph`].
pub struct BackboneNodes {
    config: BackboneConfig,
    all: Vec<NodeId>,
    tok_emb: NodeId,
    pos_emb: NodeId,
    layers: Vec<LayerNodes>,
    lnf: [NodeId; 2],
    out: [NodeId; 2],
}

impl BackboneNodes {
    /// Registers every tensor as a leaf (`trainable`) or as a constant.
    pub fn bind(g: &mut ValueGraph, params: &BackboneParams, trainable: bool) -> Self {
        let all: Vec<NodeId> = params
            .named_tensors()
            .into_iter()
            .map(|(_, t)| {
                let (shape, value) = (t.shape().to_vec(), t.to_f64());
                if trainable {
                    g.leaf(shape, value)
                } else {
                    g.constant(shape, value)
                }
                .expect("tensor shapes are consistent")
            })
            .collect();
        Self::from_ids(params.config, all)
    }

    /// Wraps ids laid out like [`BackboneParams::named_tensors`].
    pub fn from_ids(config: BackboneConfig, all: Vec<NodeId>) -> Self {
        let layers = (0..config.n_layers)
            .map(|i| {
                let mut ids = [all[0]; 12];
                ids.copy_from_slice(&all[2 + 12 * i..2 + 12 * (i + 1)]);
                LayerNodes { ids }
            })
            .collect();
        let n = all.len();
        Self {
            config,
            tok_emb: all[0],
            pos_emb: all[1],
            layers,
            lnf: [all[n - 4], all[n - 3]],
            out: [all[n - 2], all[n - 1]],
            all,
        }
    }

    /// Node ids in the order of [`BackboneParams::named_tensors`].
    pub fn ids(&self) -> &[NodeId] {
        &self.all
    }

    fn norm(g: &mut ValueGraph, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let z = g.layer_norm(x, LN_EPS);
        let z = g.mul_row(z, gain)?;
        g.add_row(z, bias)
    }

    /// Forward over a batch of equal-length sequences. Returns hidden states
    /// `[B*L, d_model]` and logits `[B*L, V]`, sequence-major.
    pub fn forward(&self, g: &mut ValueGraph, batch: &[Vec<u32>]) -> Result<(NodeId, NodeId)> {
        let c = self.config;
        let len = batch.first().map_or(0, Vec::len);
        if len == 0 || batch.iter().any(|s| s.len() != len) {
            return Err(Error::usage(
                "batch sequences must be nonempty and of equal length",
            ));
        }
        let d = c.d_model;
        let dh = c.attn_width();
        let mut tokens = Vec::with_capacity(batch.len() * len);
        for s in batch {
            if len > c.max_len {
                return Err(Error::usage(format!(
                    "sequence exceeds max_len {}",
                    c.max_len
                )));
            }
            tokens.extend(s.iter().map(|&t| t as usize));
        }
        let positions: Vec<usize> = (0..batch.len()).flat_map(|_| 0..len).collect();
        let te = g.embed_rows(self.tok_emb, tokens)?;
        let pe = g.embed_rows(self.pos_emb, positions)?;
        let mut x = g.add(te, pe)?;
        let scale = 1.0 / (dh as f64).sqrt();
        for layer in &self.layers {
            let [ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, w1, b1, w2, b2] = layer.ids;
            let a = Self::norm(g, x, ln1_g, ln1_b)?;
            let q = g.matmul(a, wq)?;
            let k = g.matmul(a, wk)?;
            let v = g.matmul(a, wv)?;
            let mut seqs = Vec::with_capacity(batch.len());
            for b in 0..batch.len() {
                let rows: Vec<usize> = (b * len..(b + 1) * len).collect();
                let qb = g.embed_rows(q, rows.clone())?;
                let kb = g.embed_rows(k, rows.clone())?;
                let vb = g.embed_rows(v, rows)?;
                let mut heads = Vec::with_capacity(c.n_heads);
                for h in 0..c.n_heads {
                    let (lo, hi) = (h * dh, (h + 1) * dh);
                    let qh = g.slice_cols(qb, lo, hi)?;
                    let kh = g.slice_cols(kb, lo, hi)?;
                    let vh = g.slice_cols(vb, lo, hi)?;
                    let s = g.matmul_nt(qh, kh)?;
                    let s = g.affine(s, scale, 0.0);
                    let w = g.causal_softmax(s)?;
                    heads.push(g.matmul(w, vh)?);
                }
                seqs.push(g.concat_cols(&heads)?);
            }
            let att = g.concat(&seqs);
            let att = g.reshape(att, vec![batch.len() * len, d])?;
            let proj = g.matmul(att, wo)?;
            x = g.add(x, proj)?;

            let a = Self::norm(g, x, ln2_g, ln2_b)?;
            let f = g.matmul(a, w1)?;
            let f = g.add_row(f, b1)?;
            let f = g.relu(f);
            let f = g.matmul(f, w2)?;
            let f = g.add_row(f, b2)?;
            x = g.add(x, f)?;
        }
        let hidden = Self::norm(g, x, self.lnf[0], self.lnf[1])?;
        let logits = g.matmul(hidden, self.out[0])?;
        let logits = g.add_row(logits, self.out[1])?;
        Ok((hidden, logits))
    }
}

/// Mean next-token cross-entropy of a batch, as a graph node.
fn lm_loss(g: &mut ValueGraph, nodes: &BackboneNodes, batch: &[Vec<u32>]) -> Result<NodeId> {
    let len = batch[0].len();
    let v = nodes.config.vocab;
    let (_, logits) = nodes.forward(g, batch)?;
    let logp = g.log_softmax(logits);
    let mut idx = Vec::with_capacity(batch.len() * (len - 1));
    for (b, seq) in batch.iter().enumerate() {
        for t in 0..len - 1 {
            idx.push((b * len + t) * v + seq[t + 1] as usize);
        }
    }
    let n = idx.len() as f64;
    let picked = g.gather(logp, idx)?;
    let total = g.sum(picked);
    Ok(g.affine(total, -1.0 / n, 0.0))
}

/// Mean next-token cross-entropy of `batch` under `params`.
pub fn lm_loss_value(params: &BackboneParams, batch: &[Vec<u32>]) -> Result<f64> {
    let mut g = ValueGraph::new();
    let nodes = BackboneNodes::bind(&mut g, params, false);
    let loss = lm_loss(&mut g, &nodes, batch)?;
    Ok(g.scalar_value(loss))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub backbone: BackboneConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: AdamW,
    pub seed: u64,
    /// Relative frequencies of the none / high / low commands.
    pub command_mix: [f64; 3],
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneConfig::default(),
            steps: 300,
            batch_size: 16,
            optimizer: AdamW {
                lr: 3e-3,
                ..AdamW::default()
            },
            seed: 0,
            command_mix: [0.5, 0.25, 0.25],
        }
    }
}

impl PretrainConfig {
    /// The weights pretraining starts from.
    pub fn initial_params(&self) -> Result<BackboneParams> {
        BackboneParams::init(self.backbone, derive_seed(self.seed, 0))
    }

    fn mix(&self) -> [(Command, f64); 3] {
        [
            (Command::None, self.command_mix[0]),
            (Command::High, self.command_mix[1]),
            (Command::Low, self.command_mix[2]),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainPoint {
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub backbone: FrozenBackbone,
    /// Training loss of every step's batch.
    pub curve: Vec<PretrainPoint>,
    /// Loss on a fixed held-out batch before the first step and after the last.
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Trains a fresh backbone on sequences drawn from `spec` and freezes it.
pub fn pretrain_backbone(spec: &SynthTaskSpec, config: &PretrainConfig) -> Result<PretrainReport> {
    let bc = config.backbone;
    bc.validate()?;
    if spec.vocab != bc.vocab {
        return Err(Error::usage(format!(
            "task vocab {} differs from backbone vocab {}",
            spec.vocab, bc.vocab
        )));
    }
    if spec.seq_len > bc.max_len {
        return Err(Error::usage(format!(
            "task seq_len {} exceeds backbone max_len {}",
            spec.seq_len, bc.max_len
        )));
    }
    if config.batch_size == 0 {
        return Err(Error::usage("batch_size must be >= 1"));
    }
    let grammar = Grammar::new(spec)?;
    let mix = config.mix();
    synth::check_mix(&mix)?;
    let mut params = config.initial_params()?;
    let mut data_rng = CounterRng::new(derive_seed(config.seed, 1));
    let mut held_rng = CounterRng::new(derive_seed(config.seed, 2));
    let held: Vec<Vec<u32>> = (0..config.batch_size)
        .map(|_| {
            let cmd = synth::pick_command(&mix, &mut held_rng);
            grammar.sample(cmd, spec.seq_len, &mut held_rng)
        })
        .collect();
    let initial_loss = lm_loss_value(&params, &held)?;

    let mut flat = params.to_flat();
    let mut state = AdamState::new(flat.len());
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch: Vec<Vec<u32>> = (0..config.batch_size)
            .map(|_| {
                let cmd = synth::pick_command(&mix, &mut data_rng);
                grammar.sample(cmd, spec.seq_len, &mut data_rng)
            })
            .collect();
        let mut g = ValueGraph::new();
        let nodes = BackboneNodes::bind(&mut g, &params, true);
        let loss = lm_loss(&mut g, &nodes, &batch)?;
        let value = g.scalar_value(loss);
        if !value.is_finite() {
            return Err(Error::Numerical {
                step,
                msg: format!("pretraining loss is {value}"),
            });
        }
        let grads = g.backward(loss)?;
        let flat_grad: Vec<f64> = nodes.ids().iter().flat_map(|&id| grads.get(id)).collect();
        optimizer_step(&mut flat, &flat_grad, &mut state, &config.optimizer)?;
        params.set_flat(&flat)?;
        curve.push(PretrainPoint { step, loss: value });
    }
    let final_loss = lm_loss_value(&params, &held)?;
    Ok(PretrainReport {
        backbone: FrozenBackbone::freeze(params),
        curve,
        initial_loss,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            vocab: 11,
            max_len: 8,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 12,
        }
    }

    #[test]
    fn config_validation() {
        assert!(BackboneConfig::default().validate().is_ok());
        let bad = BackboneConfig {
            n_heads: 3,
            ..BackboneConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Usage(_))));
    }

    #[test]
    fn default_param_count() {
        let p = BackboneParams::init(BackboneConfig::default(), 0).unwrap();
        let d = 64;
        let per_layer = 4 * d + 4 * d * d + 2 * d * 256 + 256 + d;
        let expected = 128 * d + 64 * d + 2 * per_layer + 2 * d + d * 128 + 128;
        assert_eq!(p.param_count(), expected);
    }

    #[test]
    fn out_of_range_token_is_usage_error() {
        let p = BackboneParams::init(tiny(), 0).unwrap();
        assert!(matches!(
            toy_transformer_forward(&[1, 11], &p),
            Err(Error::Usage(_))
        ));
        let long = vec![0u32; 9];
        assert!(toy_transformer_forward(&long, &p).is_err());
    }

    #[test]
    fn causal_and_deterministic() {
        let p = BackboneParams::init(tiny(), 3).unwrap();
        let (h1, l1) = toy_transformer_forward(&[1, 2, 3, 4, 5], &p).unwrap();
        let (h2, _) = toy_transformer_forward(&[1, 2, 3, 9, 0, 7], &p).unwrap();
        let (h3, l3) = toy_transformer_forward(&[1, 2, 3, 4, 5], &p).unwrap();
        for t in 0..3 {
            assert_eq!(h1.row(t), h2.row(t));
        }
        assert_ne!(h1.row(3), h2.row(3));
        assert_eq!(h1, h3);
        assert_eq!(l1, l3);
    }

    #[test]
    fn graph_forward_matches_incremental() {
        let p = BackboneParams::init(tiny(), 9).unwrap();
        let batch = vec![vec![1u32, 5, 2, 7, 3, 10], vec![0, 0, 4, 8, 9, 6]];
        let mut g = ValueGraph::new();
        let nodes = BackboneNodes::bind(&mut g, &p, false);
        let (h, l) = nodes.forward(&mut g, &batch).unwrap();
        for (b, seq) in batch.iter().enumerate() {
            let (fh, fl) = toy_transformer_forward(seq, &p).unwrap();
            for (x, y) in fh
                .data()
                .iter()
                .zip(&g.value(h)[b * 6 * 8..(b + 1) * 6 * 8])
            {
                assert!((*x as f64 - y).abs() < 1e-4, "{x} vs {y}");
            }
            for (x, y) in fl
                .data()
                .iter()
                .zip(&g.value(l)[b * 6 * 11..(b + 1) * 6 * 11])
            {
                assert!((*x as f64 - y).abs() < 1e-4, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn lm_gradient_matches_finite_differences() {
        let p = BackboneParams::init(tiny(), 4).unwrap();
        let batch = vec![vec![1u32, 5, 2, 7, 3], vec![0, 4, 8, 9, 6]];
        let mut g = ValueGraph::new();
        let nodes = BackboneNodes::bind(&mut g, &p, true);
        let loss = lm_loss(&mut g, &nodes, &batch).unwrap();
        let grads = g.backward(loss).unwrap();
        let analytic: Vec<f64> = nodes.ids().iter().flat_map(|&id| grads.get(id)).collect();
        let flat: Vec<f64> = p.to_flat().iter().map(|&x| x as f64).collect();
        // Probe a spread of coordinates in f64 through the graph itself.
        let eval = |x: &[f64]| {
            let mut g = ValueGraph::new();
            let ids: Vec<NodeId> = p
                .named_tensors()
                .iter()
                .scan(0, |off, (_, t)| {
                    let n = t.len();
                    let id = g
                        .leaf(t.shape().to_vec(), x[*off..*off + n].to_vec())
                        .unwrap();
                    *off += n;
                    Some(id)
                })
                .collect();
            let nodes = BackboneNodes::from_ids(p.config, ids);
            let loss = lm_loss(&mut g, &nodes, &batch).unwrap();
            g.scalar_value(loss)
        };
        let h = 1e-6;
        for i in (0..flat.len()).step_by(flat.len() / 40) {
            let mut xp = flat.clone();
            xp[i] += h;
            let mut xm = flat.clone();
            xm[i] -= h;
            let fd = (eval(&xp) - eval(&xm)) / (2.0 * h);
            let err = (analytic[i] - fd).abs() / (fd.abs() + 1e-6);
            assert!(err < 1e-4, "coordinate {i}: {} vs {fd}", analytic[i]);
        }
    }

    #[test]
    fn zero_steps_returns_init() {
        let spec = SynthTaskSpec::alternating(11, 8, 2, 1, 2);
        let cfg = PretrainConfig {
            backbone: tiny(),
            steps: 0,
            batch_size: 2,
            ..PretrainConfig::default()
        };
        let rep = pretrain_backbone(&spec, &cfg).unwrap();
        let init = BackboneParams::init(tiny(), derive_seed(cfg.seed, 0)).unwrap();
        assert_eq!(rep.backbone.params(), &init);
        assert!(rep.curve.is_empty());
        assert_eq!(rep.initial_loss, rep.final_loss);
    }

    #[test]
    fn short_pretraining_reduces_loss() {
        let spec = SynthTaskSpec::alternating(11, 8, 2, 1, 2);
        let cfg = PretrainConfig {
            backbone: tiny(),
            steps: 60,
            batch_size: 8,
            ..PretrainConfig::default()
        };
        let rep = pretrain_backbone(&spec, &cfg).unwrap();
        assert!(
            rep.final_loss < rep.initial_loss,
            "{rep:?}",
            rep = (rep.initial_loss, rep.final_loss)
        );
        rep.backbone.verify().unwrap();
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.adk");
        let p = BackboneParams::init(tiny(), 5).unwrap();
        p.save(&path).unwrap();
        let q = BackboneParams::load(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(p.checksum(), q.checksum());
        assert_eq!(p.checksum().len(), 64);
    }

    #[test]
    fn frozen_checksum_detects_changes() {
        let p = BackboneParams::init(tiny(), 5).unwrap();
        let frozen = FrozenBackbone::freeze(p);
        frozen.verify().unwrap();
        let mut params = frozen.clone().into_params();
        params.b_out.data_mut()[0] += 1.0;
        let tampered = FrozenBackbone {
            params,
            checksum: frozen.checksum().to_string(),
        };
        assert!(tampered.verify().is_err());
    }
}
