//! Inference-time sampler.
//!
//! At every step the backbone's last hidden state and logits are turned into
//! a sampling distribution according to a [`DecodeMode`]. In `AutoDeco` mode
//! the heads predict `(T̂, P̂)` and the distribution is
//! `hard_topp(softmax(logits / T̂), P̂)`; the soft mask is never used here.
//!
//! Randomness comes from one [`CounterRng`] per generation, seeded by the
//! caller. Greedy decoding draws nothing from it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneParams, DecodeState};
use crate::error::{Error, Result};
use crate::heads::HeadParams;
use crate::numerics::{argmax, softmax_slice};
use crate::rng::CounterRng;
use crate::soft_topp::hard_topp_in_place;

/// How each step's distribution is formed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DecodeMode {
    /// Always the argmax token.
    Greedy,
    /// Plain sampling at `T = 1`, `P = 1`.
    Default,
    /// Fixed caller-supplied temperature and top-p.
    Static { temperature: f32, top_p: f32 },
    /// Per-token values predicted by the heads.
    #[serde(rename = "autodeco")]
    AutoDeco,
}

impl DecodeMode {
    pub fn name(&self) -> &'static str {
        match self {
            DecodeMode::Greedy => "greedy",
            DecodeMode::Default => "default",
            DecodeMode::Static { .. } => "static",
            DecodeMode::AutoDeco => "autodeco",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let DecodeMode::Static { temperature, top_p } = *self {
            if !(temperature > 0.0 && temperature.is_finite()) {
                return Err(Error::usage(format!(
                    "static temperature must be positive, got {temperature}"
                )));
            }
            if !(top_p > 0.0 && top_p <= 1.0) {
                return Err(Error::usage(format!(
                    "static top-p must lie in (0, 1], got {top_p}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamSource {
    Predicted,
    Static,
    Greedy,
    Default,
}

/// The `(T̂, P̂)` used for one step. Greedy steps record `T̂ = 0` as a marker
/// for the zero-temperature limit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodingParams {
    pub t_hat: f32,
    pub p_hat: f32,
    pub source: ParamSource,
}

impl DecodingParams {
    fn resolve(h: &[f32], heads: Option<&HeadParams>, mode: &DecodeMode) -> Result<Self> {
        mode.validate()?;
        Ok(match *mode {
            DecodeMode::Greedy => Self {
                t_hat: 0.0,
                p_hat: 1.0,
                source: ParamSource::Greedy,
            },
            DecodeMode::Default => Self {
                t_hat: 1.0,
                p_hat: 1.0,
                source: ParamSource::Default,
            },
            DecodeMode::Static { temperature, top_p } => Self {
                t_hat: temperature,
                p_hat: top_p,
                source: ParamSource::Static,
            },
            DecodeMode::AutoDeco => {
                let heads = heads.ok_or_else(|| Error::usage("autodeco mode requires heads"))?;
                let (t_hat, p_hat) = heads.predict_f32(h)?;
                Self {
                    t_hat,
                    p_hat,
                    source: ParamSource::Predicted,
                }
            }
        })
    }
}

/// The distribution a step samples from, with the parameters that shaped it.
/// Greedy mode yields the one-hot limit distribution.
pub fn step_distribution(
    h: &[f32],
    logits: &[f32],
    heads: Option<&HeadParams>,
    mode: &DecodeMode,
) -> Result<(Vec<f32>, DecodingParams)> {
    let params = DecodingParams::resolve(h, heads, mode)?;
    if logits.is_empty() {
        return Err(Error::usage("empty logits"));
    }
    if params.source == ParamSource::Greedy {
        crate::numerics::tensor::check_finite(logits)?;
        let mut probs = vec![0.0; logits.len()];
        probs[argmax(logits)] = 1.0;
        return Ok((probs, params));
    }
    let mut probs = softmax_slice(logits, params.t_hat as f64)?;
    hard_topp_in_place(&mut probs, params.p_hat as f64);
    Ok((probs, params))
}

/// Inverse-CDF draw in vocabulary order. Zero-probability entries are never
/// returned.
fn sample_index(probs: &[f32], rng: &mut CounterRng) -> usize {
    let total: f64 = probs.iter().map(|&p| p as f64).sum();
    let u = rng.next_f64() * total;
    let mut acc = 0.0f64;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        acc += p as f64;
        last = i;
        if u < acc {
            return i;
        }
    }
    last
}

/// Result of one decoding step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Step {
    pub token: u32,
    pub params: DecodingParams,
    /// Log-probability of `token` under the distribution it was drawn from.
    pub log_prob: f32,
}

/// One decoding step. `rng` may be `None` only in greedy mode.
pub fn decode_step(
    h: &[f32],
    logits: &[f32],
    heads: Option<&HeadParams>,
    mode: &DecodeMode,
    rng: Option<&mut CounterRng>,
) -> Result<Step> {
    let (probs, params) = step_distribution(h, logits, heads, mode)?;
    let token = match (mode, rng) {
        (DecodeMode::Greedy, _) => argmax(&probs),
        (_, Some(rng)) => sample_index(&probs, rng),
        (_, None) => return Err(Error::usage("sampling modes need a random stream")),
    };
    Ok(Step {
        token: token as u32,
        params,
        log_prob: (probs[token] as f64).ln() as f32,
    })
}

/// Everything needed to replay and inspect one generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationTrace {
    pub mode: DecodeMode,
    pub seed: u64,
    pub prompt: Vec<u32>,
    pub tokens: Vec<u32>,
    pub params: Vec<DecodingParams>,
    pub log_probs: Vec<f32>,
}

impl GenerationTrace {
    pub fn validate(&self) -> Result<()> {
        if self.tokens.len() != self.params.len() || self.tokens.len() != self.log_probs.len() {
            return Err(Error::usage(format!(
                "trace lists differ in length: {} tokens, {} params, {} log-probs",
                self.tokens.len(),
                self.params.len(),
                self.log_probs.len()
            )));
        }
        Ok(())
    }

    pub fn mean_t(&self) -> f64 {
        mean(self.params.iter().map(|p| p.t_hat as f64))
    }

    pub fn mean_p(&self) -> f64 {
        mean(self.params.iter().map(|p| p.p_hat as f64))
    }

    /// Prompt followed by the generated tokens.
    pub fn full_sequence(&self) -> Vec<u32> {
        let mut s = self.prompt.clone();
        s.extend(&self.tokens);
        s
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Generation settings shared by every call in a batch of samples.
#[derive(Clone, Copy, Debug)]
pub struct Generator<'a> {
    pub backbone: &'a BackboneParams,
    pub heads: Option<&'a HeadParams>,
    pub mode: DecodeMode,
    pub max_len: usize,
    pub stop_token: Option<u32>,
}

impl<'a> Generator<'a> {
    fn check(&self, prompt: &[u32]) -> Result<()> {
        self.mode.validate()?;
        if prompt.is_empty() {
            return Err(Error::usage("prompt must be nonempty"));
        }
        if self.max_len == 0 {
            return Err(Error::usage("max_len must be >= 1"));
        }
        let ctx = self.backbone.config.max_len;
        if prompt.len() + self.max_len - 1 > ctx {
            return Err(Error::usage(format!(
                "prompt of {} tokens plus {} generated exceeds the {ctx}-token context",
                prompt.len(),
                self.max_len
            )));
        }
        match (self.mode, self.heads) {
            (DecodeMode::AutoDeco, None) => {
                return Err(Error::usage("autodeco mode requires heads"))
            }
            (_, Some(h)) if h.d_model() != self.backbone.config.d_model => {
                return Err(Error::usage(format!(
                    "heads expect d_model {}, backbone has {}",
                    h.d_model(),
                    self.backbone.config.d_model
                )))
            }
            _ => {}
        }
        Ok(())
    }

    /// Generates up to `max_len` tokens after `prompt`, stopping early after
    /// emitting `stop_token`.
    pub fn generate(&self, prompt: &[u32], seed: u64) -> Result<GenerationTrace> {
        self.check(prompt)?;
        let mut state = DecodeState::new(self.backbone);
        for &t in prompt {
            state.step(t)?;
        }
        let mut rng = CounterRng::new(seed);
        let mut trace = GenerationTrace {
            mode: self.mode,
            seed,
            prompt: prompt.to_vec(),
            tokens: Vec::with_capacity(self.max_len),
            params: Vec::with_capacity(self.max_len),
            log_probs: Vec::with_capacity(self.max_len),
        };
        for i in 0..self.max_len {
            let step = decode_step(
                state.hidden(),
                state.logits(),
                self.heads,
                &self.mode,
                Some(&mut rng),
            )?;
            trace.tokens.push(step.token);
            trace.params.push(step.params);
            trace.log_probs.push(step.log_prob);
            if Some(step.token) == self.stop_token || i + 1 == self.max_len {
                break;
            }
            state.step(step.token)?;
        }
        Ok(trace)
    }
}

/// Free-function form of [`Generator::generate`].
pub fn generate(
    prompt: &[u32],
    backbone: &BackboneParams,
    heads: Option<&HeadParams>,
    mode: DecodeMode,
    max_len: usize,
    stop_token: Option<u32>,
    seed: u64,
) -> Result<GenerationTrace> {
    Generator {
        backbone,
        heads,
        mode,
        max_len,
        stop_token,
    }
    .generate(prompt, seed)
}

/// Writes a trace as pretty-printed JSON. Traces whose lists disagree in
/// length are refused.
pub fn export_trace(trace: &GenerationTrace, path: &Path) -> Result<()> {
    trace.validate()?;
    let text = serde_json::to_string_pretty(trace).expect("trace serializes");
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn parse_trace(text: &str) -> Result<GenerationTrace> {
    let trace: GenerationTrace = serde_json::from_str(text).map_err(|e| Error::FormatLine {
        line: e.line(),
        msg: e.to_string(),
    })?;
    trace.validate().map_err(|e| Error::FormatLine {
        line: 1,
        msg: e.to_string(),
    })?;
    Ok(trace)
}

pub fn import_trace(path: &Path) -> Result<GenerationTrace> {
    parse_trace(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::heads::{init_heads, Squash};

    fn tiny_backbone() -> BackboneParams {
        BackboneParams::init(
            BackboneConfig {
                vocab: 12,
                max_len: 16,
                d_model: 8,
                n_heads: 2,
                n_layers: 1,
                d_ff: 16,
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn rng_golden_values() {
        let mut rng = CounterRng::new(42);
        let got: Vec<u64> = (0..8).map(|_| rng.next_u64()).collect();
        assert_eq!(
            got,
            [
                0x5927_3471_198f_a887,
                0x4923_8aa4_169d_f72b,
                0x7e54_361f_64fc_90f6,
                0x5e2e_306a_96ce_f6e2,
                0xd35f_a509_9687_0be2,
                0x1138_9694_1403_52a9,
                0x7d70_6ac4_29bf_aecb,
                0x443a_b608_768d_def1,
            ]
        );
    }

    #[test]
    fn greedy_picks_argmax_without_rng() {
        for _ in 0..3 {
            let s = decode_step(&[], &[2.0, 1.0, 0.0], None, &DecodeMode::Greedy, None).unwrap();
            assert_eq!(s.token, 0);
            assert_eq!(s.params.t_hat, 0.0);
            assert_eq!(s.params.source, ParamSource::Greedy);
        }
    }

    #[test]
    fn mode_head_mismatch() {
        assert!(matches!(
            decode_step(&[0.0], &[1.0, 2.0], None, &DecodeMode::AutoDeco, None),
            Err(Error::Usage(_))
        ));
        let bad = DecodeMode::Static {
            temperature: 0.0,
            top_p: 0.5,
        };
        assert!(bad.validate().is_err());
        let bb = tiny_backbone();
        let heads = init_heads(5, 4, Squash::default(), 0).unwrap();
        assert!(generate(&[1], &bb, Some(&heads), DecodeMode::AutoDeco, 3, None, 0).is_err());
    }

    #[test]
    fn same_seed_same_token() {
        let logits = [0.3, 0.1, 0.5, -0.2];
        let draw = |seed| {
            let mut rng = CounterRng::new(seed);
            decode_step(&[], &logits, None, &DecodeMode::Default, Some(&mut rng))
                .unwrap()
                .token
        };
        assert_eq!(draw(7), draw(7));
    }

    #[test]
    fn static_one_one_equals_default() {
        let logits = [0.3f32, 1.1, -0.5, 0.0, 2.0];
        let (a, _) = step_distribution(&[], &logits, None, &DecodeMode::Default).unwrap();
        let st = DecodeMode::Static {
            temperature: 1.0,
            top_p: 1.0,
        };
        let (b, _) = step_distribution(&[], &logits, None, &st).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn generation_lengths_and_determinism() {
        let bb = tiny_backbone();
        let heads = init_heads(8, 8, Squash::default(), 2).unwrap();
        let one = generate(&[1, 2], &bb, Some(&heads), DecodeMode::AutoDeco, 1, None, 3).unwrap();
        assert_eq!(one.tokens.len(), 1);
        let a = generate(
            &[1, 2],
            &bb,
            Some(&heads),
            DecodeMode::AutoDeco,
            10,
            None,
            3,
        )
        .unwrap();
        let b = generate(
            &[1, 2],
            &bb,
            Some(&heads),
            DecodeMode::AutoDeco,
            10,
            None,
            3,
        )
        .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.tokens.len(), 10);
        let g1 = generate(&[1, 2], &bb, None, DecodeMode::Greedy, 10, None, 1).unwrap();
        let g2 = generate(&[1, 2], &bb, None, DecodeMode::Greedy, 10, None, 999).unwrap();
        assert_eq!(g1.tokens, g2.tokens);
        assert!(generate(&[1; 10], &bb, None, DecodeMode::Greedy, 8, None, 0).is_err());
        assert!(generate(&[], &bb, None, DecodeMode::Greedy, 8, None, 0).is_err());
    }

    #[test]
    fn stop_token_ends_generation() {
        let bb = tiny_backbone();
        let g = generate(&[1, 2], &bb, None, DecodeMode::Greedy, 10, None, 0).unwrap();
        let stop = g.tokens[0];
        let s = generate(&[1, 2], &bb, None, DecodeMode::Greedy, 10, Some(stop), 0).unwrap();
        assert_eq!(s.tokens, vec![stop]);
    }

    #[test]
    fn export_rejects_ragged_and_import_reports_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        let mut t = GenerationTrace {
            mode: DecodeMode::Default,
            seed: 1,
            prompt: vec![0],
            tokens: vec![3, 4],
            params: vec![
                DecodingParams {
                    t_hat: 1.0,
                    p_hat: 1.0,
                    source: ParamSource::Default
                };
                2
            ],
            log_probs: vec![-0.5],
        };
        assert!(matches!(export_trace(&t, &path), Err(Error::Usage(_))));
        t.log_probs.push(-1.25);
        export_trace(&t, &path).unwrap();
        assert_eq!(import_trace(&path).unwrap(), t);
        match parse_trace("{\n  \"mode\": {\"kind\": \"default\"},\n  \"seed\": oops\n}") {
            Err(Error::FormatLine { line: 3, .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn empty_generation_round_trips() {
        let t = GenerationTrace {
            mode: DecodeMode::Greedy,
            seed: 0,
            prompt: vec![1],
            tokens: vec![],
            params: vec![],
            log_probs: vec![],
        };
        let text = serde_json::to_string(&t).unwrap();
        assert_eq!(parse_trace(&text).unwrap(), t);
    }

    #[test]
    fn mode_json_names() {
        let s = serde_json::to_string(&DecodeMode::AutoDeco).unwrap();
        assert_eq!(s, r#"{"kind":"autodeco"}"#);
        let p = DecodingParams {
            t_hat: 0.5,
            p_hat: 0.9,
            source: ParamSource::Predicted,
        };
        assert!(serde_json::to_string(&p).unwrap().contains("\"predicted\""));
    }
}
