//! Oversampled benchmark runs: every (mode, task, problem, seed, sample)
//! cell generates one completion, a [`Checker`] grades it, and the outcomes
//! are folded into per-seed accuracies and mean ± std summaries.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::synth::{Command, Grammar};
use crate::backbone::BackboneParams;
use crate::decoding::{DecodeMode, Generator};
use crate::error::{Error, Result};
use crate::heads::HeadParams;
use crate::rng::{derive_seed, CounterRng};

use super::{pass_at_1, SampleOutcome};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Problem {
    pub id: usize,
    pub prompt: Vec<u32>,
    /// Number of tokens to generate; these form the graded answer span.
    pub gen_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSet {
    pub name: String,
    pub problems: Vec<Problem>,
}

/// Grades a generated answer span. An `Err` means the checker itself could
/// not decide; the benchmark records that sample as incorrect and flagged.
pub trait Checker {
    fn check(&self, problem: &Problem, generated: &[u32]) -> Result<bool>;
}

/// The answer span is correct when it has the requested length and every
/// token is a legal continuation under the prompt's command.
impl Checker for Grammar {
    fn check(&self, problem: &Problem, generated: &[u32]) -> Result<bool> {
        let first = *problem
            .prompt
            .first()
            .ok_or_else(|| Error::usage(format!("problem {} has an empty prompt", problem.id)))?;
        if Command::from_token(first).is_none() {
            return Err(Error::domain(format!(
                "problem {}: prompt starts with {first}, not a command token",
                problem.id
            )));
        }
        if generated.len() != problem.gen_len {
            return Ok(false);
        }
        let mut full = problem.prompt.clone();
        full.extend_from_slice(generated);
        Ok(self.span_is_valid(&full, problem.prompt.len(), problem.gen_len))
    }
}

/// `n` prompts of `prompt_len` tokens drawn from the grammar under `cmd`,
/// each asking for `gen_len` more tokens.
pub fn synth_task_set(
    grammar: &Grammar,
    name: &str,
    n: usize,
    prompt_len: usize,
    gen_len: usize,
    cmd: Command,
    seed: u64,
) -> Result<TaskSet> {
    let seq_len = grammar.spec().seq_len;
    if prompt_len == 0 || gen_len == 0 || prompt_len + gen_len > seq_len {
        return Err(Error::usage(format!(
            "prompt_len {prompt_len} + gen_len {gen_len} must be positive and fit in {seq_len}"
        )));
    }
    let mut rng = CounterRng::new(seed);
    let problems = (0..n)
        .map(|id| Problem {
            id,
            prompt: grammar.sample(cmd, prompt_len, &mut rng),
            gen_len,
        })
        .collect();
    Ok(TaskSet {
        name: name.to_string(),
        problems,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub n_seeds: usize,
    pub samples_per_seed: usize,
    pub base_seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            n_seeds: 8,
            samples_per_seed: 16,
            base_seed: 0,
        }
    }
}

/// Stable, human-readable label; static modes carry their values.
pub fn mode_label(mode: &DecodeMode) -> String {
    match mode {
        DecodeMode::Static { temperature, top_p } => format!("static(T={temperature},P={top_p})"),
        m => m.name().to_string(),
    }
}

/// Seed for one sample: a stream per seed index, then per (problem, sample).
pub fn sample_seed(
    base: u64,
    seed_index: usize,
    problem: usize,
    sample: usize,
    samples: usize,
) -> u64 {
    derive_seed(
        derive_seed(base, seed_index as u64),
        (problem * samples + sample) as u64,
    )
}

/// Generates and grades every sample of one mode on one task.
pub fn evaluate_mode(
    task: &TaskSet,
    mode: DecodeMode,
    backbone: &BackboneParams,
    heads: Option<&HeadParams>,
    checker: &dyn Checker,
    cfg: &BenchConfig,
) -> Result<Vec<SampleOutcome>> {
    if cfg.n_seeds == 0 || cfg.samples_per_seed == 0 {
        return Err(Error::usage("n_seeds and samples_per_seed must be >= 1"));
    }
    let mut out = Vec::with_capacity(task.problems.len() * cfg.n_seeds * cfg.samples_per_seed);
    for problem in &task.problems {
        let gen = Generator {
            backbone,
            heads,
            mode,
            max_len: problem.gen_len,
            stop_token: None,
        };
        for s in 0..cfg.n_seeds {
            for j in 0..cfg.samples_per_seed {
                let seed = sample_seed(cfg.base_seed, s, problem.id, j, cfg.samples_per_seed);
                let trace = gen.generate(&problem.prompt, seed).map_err(|e| {
                    e.context(format!(
                        "task {} problem {} seed {s}",
                        task.name, problem.id
                    ))
                })?;
                let (correct, flagged) = match checker.check(problem, &trace.tokens) {
                    Ok(c) => (c, false),
                    Err(_) => (false, true),
                };
                out.push(SampleOutcome {
                    problem: problem.id,
                    seed: s as u64,
                    sample: j,
                    correct,
                    flagged,
                });
            }
        }
    }
    Ok(out)
}

/// One JSON line of results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "lowercase")]
pub enum ResultLine {
    Seed {
        task: String,
        mode: String,
        seed: u64,
        accuracy: f64,
    },
    Summary {
        task: String,
        mode: String,
        mean: f64,
        std: f64,
        outcomes: usize,
        flagged: usize,
    },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub lines: Vec<ResultLine>,
    pub outcomes: Vec<(String, String, Vec<SampleOutcome>)>,
}

impl BenchReport {
    pub fn summaries(&self) -> impl Iterator<Item = &ResultLine> {
        self.lines
            .iter()
            .filter(|l| matches!(l, ResultLine::Summary { .. }))
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for l in &self.lines {
            writeln!(
                f,
                "{}",
                serde_json::to_string(l).expect("result line serializes")
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Runs every mode over every task. Tasks without problems contribute no
/// lines.
pub fn run_benchmark(
    tasks: &[TaskSet],
    modes: &[DecodeMode],
    backbone: &BackboneParams,
    heads: Option<&HeadParams>,
    checker: &dyn Checker,
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    let mut report = BenchReport::default();
    for mode in modes {
        let label = mode_label(mode);
        for task in tasks.iter().filter(|t| !t.problems.is_empty()) {
            let outcomes = evaluate_mode(task, *mode, backbone, heads, checker, cfg)?;
            let p = pass_at_1(&outcomes)?;
            for &(seed, accuracy) in &p.per_seed {
                report.lines.push(ResultLine::Seed {
                    task: task.name.clone(),
                    mode: label.clone(),
                    seed,
                    accuracy,
                });
            }
            report.lines.push(ResultLine::Summary {
                task: task.name.clone(),
                mode: label.clone(),
                mean: p.mean,
                std: p.std,
                outcomes: outcomes.len(),
                flagged: outcomes.iter().filter(|o| o.flagged).count(),
            });
            report
                .outcomes
                .push((task.name.clone(), label.clone(), outcomes));
        }
    }
    Ok(report)
}
