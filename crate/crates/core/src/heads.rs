//! Temperature and top-p prediction heads.
//!
//! Both heads are two-layer ReLU MLPs over the backbone's final hidden state.
//! The top-p head additionally receives the temperature the first head just
//! predicted, appended as one extra input feature, so gradients of anything
//! downstream of `P̂` also reach the temperature head through that path.
//! Outputs are squashed with scaled sigmoids into fixed open intervals.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, NodeId, Tensor, ValueGraph};
use crate::paramfile;
use crate::rng::CounterRng;

/// Prediction at zero hidden input for a freshly initialized head pair.
pub const INIT_TEMPERATURE: f64 = 1.0;
pub const INIT_TOP_P: f64 = 0.99;

/// Output ranges of the two heads.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Squash {
    pub t_min: f64,
    pub t_max: f64,
    pub p_min: f64,
    pub p_max: f64,
}

impl Default for Squash {
    fn default() -> Self {
        Self {
            t_min: 0.05,
            t_max: 2.0,
            p_min: 0.1,
            p_max: 1.0,
        }
    }
}

impl Squash {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.t_min && self.t_min < self.t_max && self.t_max.is_finite()) {
            return Err(Error::usage(format!(
                "temperature range must satisfy 0 < t_min < t_max, got ({}, {})",
                self.t_min, self.t_max
            )));
        }
        if !(0.0 < self.p_min && self.p_min < self.p_max && self.p_max <= 1.0) {
            return Err(Error::usage(format!(
                "top-p range must satisfy 0 < p_min < p_max <= 1, got ({}, {})",
                self.p_min, self.p_max
            )));
        }
        Ok(())
    }

    pub fn temperature(&self, z: f64) -> f64 {
        self.t_min + (self.t_max - self.t_min) * sigmoid(z)
    }

    pub fn top_p(&self, z: f64) -> f64 {
        self.p_min + (self.p_max - self.p_min) * sigmoid(z)
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// `relu(x W1 + b1) W2 + b2` with a scalar output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    /// `[d_in, d_hidden]`
    pub w1: Tensor,
    /// `[d_hidden]`
    pub b1: Tensor,
    /// `[d_hidden, 1]`
    pub w2: Tensor,
    /// `[1]`
    pub b2: Tensor,
}

impl Mlp {
    fn init(d_in: usize, d_hidden: usize, rng: &mut CounterRng) -> Self {
        let bound1 = 1.0 / (d_in as f64).sqrt();
        let bound2 = 1.0 / (d_hidden as f64).sqrt();
        let w1 = (0..d_in * d_hidden)
            .map(|_| rng.uniform(-bound1, bound1) as f32)
            .collect();
        let w2 = (0..d_hidden)
            .map(|_| rng.uniform(-bound2, bound2) as f32)
            .collect();
        Self {
            w1: Tensor::new(vec![d_in, d_hidden], w1).unwrap(),
            b1: Tensor::zeros(vec![d_hidden]),
            w2: Tensor::new(vec![d_hidden, 1], w2).unwrap(),
            b2: Tensor::zeros(vec![1]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn d_hidden(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Pre-squash output, evaluated in `f64`.
    fn forward(&self, x: &[f64]) -> f64 {
        let dh = self.d_hidden();
        let w1 = self.w1.data();
        let mut hidden: Vec<f64> = self.b1.data().iter().map(|&b| b as f64).collect();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &w1[i * dh..(i + 1) * dh];
            hidden
                .iter_mut()
                .zip(row)
                .for_each(|(h, &w)| *h += xi * w as f64);
        }
        let out: f64 = hidden
            .iter()
            .zip(self.w2.data())
            .map(|(&h, &w)| h.max(0.0) * w as f64)
            .sum();
        out + self.b2.data()[0] as f64
    }

    /// Single-precision pre-squash output over `x` followed by the optional
    /// `extra` feature (the last row of `w1`).
    fn forward_f32(&self, x: &[f32], extra: Option<f32>) -> f32 {
        let dh = self.d_hidden();
        let w1 = self.w1.data();
        let mut hidden = self.b1.data().to_vec();
        let inputs = x.iter().copied().chain(extra);
        for (row, xi) in w1.chunks_exact(dh).zip(inputs) {
            hidden.iter_mut().zip(row).for_each(|(h, &w)| *h += xi * w);
        }
        let out: f32 = hidden
            .iter()
            .zip(self.w2.data())
            .map(|(&h, &w)| h.max(0.0) * w)
            .sum();
        out + self.b2.data()[0]
    }

    fn tensors(&self) -> [&Tensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub temp: Mlp,
    pub topp: Mlp,
    pub squash: Squash,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeadMeta {
    d_model: usize,
    d_head: usize,
    squash: Squash,
}

const TENSOR_NAMES: [&str; 8] = [
    "temp.w1", "temp.b1", "temp.w2", "temp.b2", "topp.w1", "topp.b1", "topp.w2", "topp.b2",
];

/// Seeded initialization. First-layer and output weights are drawn from
/// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`, hidden biases start at zero, and the
/// output biases are solved so a zero hidden state predicts
/// `(INIT_TEMPERATURE, INIT_TOP_P)`.
pub fn init_heads(d_model: usize, d_head: usize, squash: Squash, seed: u64) -> Result<HeadParams> {
    if d_model == 0 || d_head == 0 {
        return Err(Error::usage(format!(
            "head dimensions must be >= 1, got d_model={d_model} d_head={d_head}"
        )));
    }
    squash.validate()?;
    if !(squash.t_min < INIT_TEMPERATURE && INIT_TEMPERATURE < squash.t_max) {
        return Err(Error::usage("temperature range must contain 1.0"));
    }
    let p_target = INIT_TOP_P.min(squash.p_min + 0.99 * (squash.p_max - squash.p_min));
    let mut rng = CounterRng::new(seed);
    let mut temp = Mlp::init(d_model, d_head, &mut rng);
    let mut topp = Mlp::init(d_model + 1, d_head, &mut rng);

    let t_unit = (INIT_TEMPERATURE - squash.t_min) / (squash.t_max - squash.t_min);
    temp.b2.data_mut()[0] = logit(t_unit) as f32;
    let t_hat = squash.temperature(temp.forward(&vec![0.0; d_model]));

    let mut x = vec![0.0; d_model + 1];
    x[d_model] = t_hat;
    let base = topp.forward(&x);
    let p_unit = (p_target - squash.p_min) / (squash.p_max - squash.p_min);
    topp.b2.data_mut()[0] = (logit(p_unit) - base) as f32;

    Ok(HeadParams { temp, topp, squash })
}

impl HeadParams {
    pub fn d_model(&self) -> usize {
        self.temp.d_in()
    }

    pub fn d_head(&self) -> usize {
        self.temp.d_hidden()
    }

    pub fn temp_param_count(&self) -> usize {
        self.temp.param_count()
    }

    pub fn topp_param_count(&self) -> usize {
        self.topp.param_count()
    }

    pub fn param_count(&self) -> usize {
        self.temp_param_count() + self.topp_param_count()
    }

    pub fn byte_size(&self) -> usize {
        self.param_count() * std::mem::size_of::<f32>()
    }

    fn check_hidden(&self, h: &[f32]) -> Result<()> {
        if h.len() != self.d_model() {
            return Err(Error::usage(format!(
                "hidden state has {} features, heads expect {}",
                h.len(),
                self.d_model()
            )));
        }
        Ok(())
    }

    /// `T̂ = t_min + (t_max - t_min) * sigmoid(mlp(h))`.
    pub fn temperature(&self, h: &[f32]) -> Result<f64> {
        self.check_hidden(h)?;
        let x: Vec<f64> = h.iter().map(|&v| v as f64).collect();
        Ok(self.squash.temperature(self.temp.forward(&x)))
    }

    /// `P̂ = p_min + (p_max - p_min) * sigmoid(mlp([h; T̂]))`.
    pub fn top_p(&self, h: &[f32], t_hat: f64) -> Result<f64> {
        self.check_hidden(h)?;
        if !t_hat.is_finite() {
            return Err(Error::domain("temperature input is not finite"));
        }
        let mut x: Vec<f64> = h.iter().map(|&v| v as f64).collect();
        x.push(t_hat);
        Ok(self.squash.top_p(self.topp.forward(&x)))
    }

    /// Both predictions, with the temperature feeding the top-p head.
    pub fn predict(&self, h: &[f32]) -> Result<(f64, f64)> {
        let t = self.temperature(h)?;
        Ok((t, self.top_p(h, t)?))
    }

    /// [`predict`](Self::predict) in single precision, as used by the
    /// sampler. Agrees with the `f64` path to float rounding.
    pub fn predict_f32(&self, h: &[f32]) -> Result<(f32, f32)> {
        self.check_hidden(h)?;
        crate::numerics::tensor::check_finite(h)?;
        let t = self
            .squash
            .temperature(self.temp.forward_f32(h, None) as f64) as f32;
        let p = self.squash.top_p(self.topp.forward_f32(h, Some(t)) as f64) as f32;
        Ok((t, p))
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.temp
            .tensors()
            .into_iter()
            .chain(self.topp.tensors())
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let [a, b, c, d] = self.temp.tensors_mut();
        let [e, f, g, h] = self.topp.tensors_mut();
        vec![a, b, c, d, e, f, g, h]
    }

    /// All parameters in a fixed order (temp w1, b1, w2, b2, then topp).
    pub fn to_flat(&self) -> Vec<f32> {
        self.tensors()
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn to_flat_f64(&self) -> Vec<f64> {
        self.to_flat().into_iter().map(|x| x as f64).collect()
    }

    pub fn set_flat(&mut self, flat: &[f32]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::usage(format!(
                "flat parameter vector has {} entries, heads hold {}",
                flat.len(),
                self.param_count()
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

    pub fn save(&self, path: &Path) -> Result<()> {
        let named: Vec<(&str, &Tensor)> =
            TENSOR_NAMES.iter().copied().zip(self.tensors()).collect();
        let meta = HeadMeta {
            d_model: self.d_model(),
            d_head: self.d_head(),
            squash: self.squash,
        };
        paramfile::save(path, "heads", &named, serde_json::to_value(meta).unwrap())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (mut set, meta) = paramfile::load(path, "heads")?;
        let meta: HeadMeta = serde_json::from_value(meta).map_err(|e| Error::FormatLine {
            line: 1,
            msg: format!("heads metadata: {e}"),
        })?;
        meta.squash.validate()?;
        let mut take = |n| paramfile::take(&mut set, n);
        let temp = Mlp {
            w1: take("temp.w1")?,
            b1: take("temp.b1")?,
            w2: take("temp.w2")?,
            b2: take("temp.b2")?,
        };
        let topp = Mlp {
            w1: take("topp.w1")?,
            b1: take("topp.b1")?,
            w2: take("topp.w2")?,
            b2: take("topp.b2")?,
        };
        let heads = HeadParams {
            temp,
            topp,
            squash: meta.squash,
        };
        let (d, dh) = (meta.d_model, meta.d_head);
        let shapes_ok = heads.temp.w1.shape() == [d, dh]
            && heads.temp.b1.shape() == [dh]
            && heads.temp.w2.shape() == [dh, 1]
            && heads.temp.b2.shape() == [1]
            && heads.topp.w1.shape() == [d + 1, dh]
            && heads.topp.b1.shape() == [dh]
            && heads.topp.w2.shape() == [dh, 1]
            && heads.topp.b2.shape() == [1];
        if !shapes_ok {
            return Err(Error::usage(format!(
                "head tensors do not match d_model={d} d_head={dh}"
            )));
        }
        Ok(heads)
    }
}

/// Free-function form of [`HeadParams::temperature`].
pub fn temp_head_forward(h: &Tensor, params: &HeadParams) -> Result<f64> {
    params.temperature(h.data())
}

/// Free-function form of [`HeadParams::top_p`].
pub fn topp_head_forward(h: &Tensor, t_hat: f64, params: &HeadParams) -> Result<f64> {
    params.top_p(h.data(), t_hat)
}

// ---------------------------------------------------------------------------
// Graph binding
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug)]
struct MlpNodes {
    w1: NodeId,
    b1: NodeId,
    w2: NodeId,
    b2: NodeId,
}

impl MlpNodes {
    /// `x: [B, d_in] -> [B, 1]` pre-squash outputs.
    fn forward(&self, g: &mut ValueGraph, x: NodeId) -> Result<NodeId> {
        let z = g.matmul(x, self.w1)?;
        let z = g.add_row(z, self.b1)?;
        let z = g.relu(z);
        let o = g.matmul(z, self.w2)?;
        g.add_row(o, self.b2)
    }

    fn ids(&self) -> [NodeId; 4] {
        [self.w1, self.b1, self.w2, self.b2]
    }
}

/// Head parameters registered as leaves of a [`ValueGraph`].
#[derive(Clone, Copy, Debug)]
pub struct HeadNodes {
    temp: MlpNodes,
    topp: MlpNodes,
    squash: Squash,
    d_model: usize,
}

impl HeadNodes {
    pub fn bind(g: &mut ValueGraph, params: &HeadParams) -> Self {
        Self::bind_flat(g, params, &params.to_flat_f64()).expect("own layout")
    }

    /// Registers `flat` (laid out like [`HeadParams::to_flat`] for `shape`)
    /// as leaves; lets finite-difference probes run entirely in `f64`.
    pub fn bind_flat(g: &mut ValueGraph, shape: &HeadParams, flat: &[f64]) -> Result<Self> {
        if flat.len() != shape.param_count() {
            return Err(Error::usage("flat head parameters have the wrong length"));
        }
        let mut off = 0;
        let mut ids = Vec::with_capacity(8);
        for t in shape.tensors() {
            let n = t.len();
            ids.push(g.leaf(t.shape().to_vec(), flat[off..off + n].to_vec())?);
            off += n;
        }
        let mlp = |s: &[NodeId]| MlpNodes {
            w1: s[0],
            b1: s[1],
            w2: s[2],
            b2: s[3],
        };
        Ok(Self {
            temp: mlp(&ids[0..4]),
            topp: mlp(&ids[4..8]),
            squash: shape.squash,
            d_model: shape.d_model(),
        })
    }

    fn check_batch(&self, g: &ValueGraph, h: NodeId) -> Result<()> {
        let shape = g.shape(h);
        let features = *shape.last().unwrap_or(&0);
        if shape.len() != 2 || features != self.d_model {
            return Err(Error::usage(format!(
                "hidden batch must be [B, {}], got {:?}",
                self.d_model, shape
            )));
        }
        Ok(())
    }

    /// Temperatures for a `[B, d_model]` batch, shape `[B, 1]`.
    pub fn temperature(&self, g: &mut ValueGraph, h: NodeId) -> Result<NodeId> {
        self.check_batch(g, h)?;
        let z = self.temp.forward(g, h)?;
        let s = g.sigmoid(z);
        let q = &self.squash;
        Ok(g.affine(s, q.t_max - q.t_min, q.t_min))
    }

    /// Top-p values for a `[B, d_model]` batch given `[B, 1]` temperatures.
    pub fn top_p(&self, g: &mut ValueGraph, h: NodeId, t_hat: NodeId) -> Result<NodeId> {
        self.check_batch(g, h)?;
        let x = g.concat_cols(&[h, t_hat])?;
        let z = self.topp.forward(g, x)?;
        let s = g.sigmoid(z);
        let q = &self.squash;
        Ok(g.affine(s, q.p_max - q.p_min, q.p_min))
    }

    /// Gradient with respect to every head parameter, in flat layout.
    pub fn flat_grad(&self, grads: &Gradients) -> Vec<f64> {
        self.temp
            .ids()
            .into_iter()
            .chain(self.topp.ids())
            .flat_map(|id| grads.get(id))
            .collect()
    }
}
