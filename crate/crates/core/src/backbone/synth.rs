//! Synthetic next-token task with a known mix of deterministic and
//! stochastic positions.
//!
//! Token ids `0..3` are command tokens and always sit at position 0. The rest
//! of the vocabulary is split into a "deterministic" half and an "answer"
//! half. A deterministic position carries `det_map[prev]`; a stochastic
//! position draws uniformly from the first `k` entries of `answers[prev]`,
//! where `k` is the answer-set size `s` (no command), `2s` (high-diversity
//! command) or `s/2` (low-diversity command).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, CounterRng};

pub const COMMAND_TOKENS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    None,
    High,
    Low,
}

impl Command {
    pub fn token(self) -> u32 {
        match self {
            Command::None => 0,
            Command::High => 1,
            Command::Low => 2,
        }
    }

    pub fn from_token(t: u32) -> Option<Self> {
        match t {
            0 => Some(Command::None),
            1 => Some(Command::High),
            2 => Some(Command::Low),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthTaskSpec {
    pub vocab: usize,
    pub seq_len: usize,
    /// Size `s` of the answer set at stochastic positions.
    pub answer_set_size: usize,
    pub deterministic_positions: Vec<usize>,
    pub stochastic_positions: Vec<usize>,
    /// Seeds the token maps (the "rules" of the task).
    pub grammar_seed: u64,
    /// Seeds sequence sampling.
    pub rng_seed: u64,
}

impl Default for SynthTaskSpec {
    fn default() -> Self {
        Self::alternating(128, 64, 4, 7, 0)
    }
}

impl SynthTaskSpec {
    /// Even positions deterministic, odd positions stochastic.
    pub fn alternating(
        vocab: usize,
        seq_len: usize,
        answer_set_size: usize,
        grammar_seed: u64,
        rng_seed: u64,
    ) -> Self {
        Self {
            vocab,
            seq_len,
            answer_set_size,
            deterministic_positions: (0..seq_len).step_by(2).collect(),
            stochastic_positions: (1..seq_len).step_by(2).collect(),
            grammar_seed,
            rng_seed,
        }
    }

    pub fn with_rng_seed(&self, seed: u64) -> Self {
        Self {
            rng_seed: seed,
            ..self.clone()
        }
    }

    fn det_range(&self) -> std::ops::Range<u32> {
        let n = (self.vocab - COMMAND_TOKENS) / 2;
        COMMAND_TOKENS as u32..(COMMAND_TOKENS + n) as u32
    }

    fn answer_range(&self) -> std::ops::Range<u32> {
        self.det_range().end..self.vocab as u32
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len < 2 {
            return Err(Error::usage("seq_len must be at least 2"));
        }
        if self.vocab < COMMAND_TOKENS + 2 {
            return Err(Error::usage(format!(
                "vocab must be at least {}",
                COMMAND_TOKENS + 2
            )));
        }
        if self.answer_set_size < 2 {
            return Err(Error::usage("answer_set_size must be >= 2"));
        }
        let answers = self.answer_range().len();
        if self.answer_set_size > answers {
            return Err(Error::usage(format!(
                "answer_set_size {} exceeds the {} answer tokens available in vocab {}",
                self.answer_set_size, answers, self.vocab
            )));
        }
        let mut seen = vec![0u8; self.seq_len];
        for &p in self
            .deterministic_positions
            .iter()
            .chain(&self.stochastic_positions)
        {
            if p >= self.seq_len {
                return Err(Error::usage(format!("position {p} is beyond seq_len")));
            }
            seen[p] += 1;
        }
        if let Some(p) = seen.iter().position(|&c| c != 1) {
            return Err(Error::usage(format!(
                "position sets must partition 0..{}; position {p} appears {} times",
                self.seq_len, seen[p]
            )));
        }
        if !self.deterministic_positions.contains(&0) {
            return Err(Error::usage(
                "position 0 holds the command token and must be deterministic",
            ));
        }
        Ok(())
    }

    pub fn is_deterministic(&self, position: usize) -> bool {
        self.deterministic_positions.contains(&position)
    }

    pub fn answer_set_size_for(&self, cmd: Command) -> usize {
        let s = self.answer_set_size;
        match cmd {
            Command::None => s,
            Command::High => (2 * s).min(self.answer_range().len()),
            Command::Low => (s / 2).max(1),
        }
    }
}

/// The token maps implied by a spec's grammar seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Grammar {
    spec: SynthTaskSpec,
    det_map: Vec<u32>,
    answers: Vec<Vec<u32>>,
    det_lookup: Vec<bool>,
}

impl Grammar {
    pub fn new(spec: &SynthTaskSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = CounterRng::new(derive_seed(spec.grammar_seed, 0x6772_616d));
        let det = spec.det_range();
        let ans: Vec<u32> = spec.answer_range().collect();
        let k = spec.answer_set_size_for(Command::High);
        let mut det_map = Vec::with_capacity(spec.vocab);
        let mut answers = Vec::with_capacity(spec.vocab);
        for _ in 0..spec.vocab {
            det_map.push(det.start + rng.below(det.len() as u64) as u32);
            let mut pool = ans.clone();
            rng.shuffle(&mut pool);
            pool.truncate(k);
            answers.push(pool);
        }
        // All command tokens share the rules of the first, so a body is
        // interchangeable across commands from position 1 on.
        for c in 1..COMMAND_TOKENS {
            det_map[c] = det_map[0];
            answers[c] = answers[0].clone();
        }
        let det_lookup = (0..spec.seq_len)
            .map(|p| spec.is_deterministic(p))
            .collect();
        Ok(Self {
            spec: spec.clone(),
            det_map,
            answers,
            det_lookup,
        })
    }

    pub fn spec(&self) -> &SynthTaskSpec {
        &self.spec
    }

    pub fn is_deterministic(&self, position: usize) -> bool {
        self.det_lookup.get(position).copied().unwrap_or(false)
    }

    /// The unique token a deterministic position takes after `prev`.
    pub fn deterministic_next(&self, prev: u32) -> u32 {
        self.det_map[prev as usize]
    }

    /// Valid answers at a stochastic position after `prev`.
    pub fn answers(&self, prev: u32, cmd: Command) -> &[u32] {
        &self.answers[prev as usize][..self.spec.answer_set_size_for(cmd)]
    }

    /// Samples one sequence of `len` tokens (at most `seq_len`).
    pub fn sample(&self, cmd: Command, len: usize, rng: &mut CounterRng) -> Vec<u32> {
        let len = len.min(self.spec.seq_len);
        let mut seq = Vec::with_capacity(len);
        seq.push(cmd.token());
        for pos in 1..len {
            let prev = seq[pos - 1];
            let tok = if self.is_deterministic(pos) {
                self.deterministic_next(prev)
            } else {
                let a = self.answers(prev, cmd);
                a[rng.below(a.len() as u64) as usize]
            };
            seq.push(tok);
        }
        seq
    }

    /// Whether `tokens[pos]` is a legal continuation of `tokens[..pos]`
    /// under the command in `tokens[0]`.
    pub fn is_valid_at(&self, tokens: &[u32], pos: usize) -> bool {
        if pos == 0 || pos >= tokens.len() || pos >= self.spec.seq_len {
            return false;
        }
        let Some(cmd) = Command::from_token(tokens[0]) else {
            return false;
        };
        let (prev, tok) = (tokens[pos - 1], tokens[pos]);
        if prev as usize >= self.spec.vocab {
            return false;
        }
        if self.is_deterministic(pos) {
            tok == self.deterministic_next(prev)
        } else {
            self.answers(prev, cmd).contains(&tok)
        }
    }

    /// Every token in `tokens[start..start + len]` is legal.
    pub fn span_is_valid(&self, tokens: &[u32], start: usize, len: usize) -> bool {
        start + len <= tokens.len() && (start..start + len).all(|p| self.is_valid_at(tokens, p))
    }
}

/// `n` sequences of the base task (no command), fully determined by the
/// spec's two seeds.
pub fn generate_synth_dataset(spec: &SynthTaskSpec, n: usize) -> Result<Vec<Vec<u32>>> {
    generate_with_commands(spec, n, &[(Command::None, 1.0)])
}

/// Like [`generate_synth_dataset`] with each sequence's command drawn from
/// `mix` (weights need not be normalized).
pub fn generate_with_commands(
    spec: &SynthTaskSpec,
    n: usize,
    mix: &[(Command, f64)],
) -> Result<Vec<Vec<u32>>> {
    let grammar = Grammar::new(spec)?;
    check_mix(mix)?;
    let mut rng = CounterRng::new(spec.rng_seed);
    Ok((0..n)
        .map(|_| {
            let cmd = pick_command(mix, &mut rng);
            grammar.sample(cmd, spec.seq_len, &mut rng)
        })
        .collect())
}

pub(crate) fn check_mix(mix: &[(Command, f64)]) -> Result<()> {
    let total: f64 = mix.iter().map(|(_, w)| w).sum();
    if mix.is_empty() || !(total > 0.0) || mix.iter().any(|(_, w)| !(*w >= 0.0)) {
        return Err(Error::usage(
            "command mix needs non-negative weights with a positive sum",
        ));
    }
    Ok(())
}

/// Draws a command from a weighted mix. A single-entry mix consumes no
/// randomness.
pub(crate) fn pick_command(mix: &[(Command, f64)], rng: &mut CounterRng) -> Command {
    if mix.len() == 1 {
        return mix[0].0;
    }
    let total: f64 = mix.iter().map(|(_, w)| w).sum();
    let mut u = rng.next_f64() * total;
    for &(c, w) in mix {
        if u < w {
            return c;
        }
        u -= w;
    }
    mix[mix.len() - 1].0
}
