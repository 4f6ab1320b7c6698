//! The `autodeco` command line.
//!
//! Every subcommand reads one JSON config (all keys optional, unknown keys
//! rejected), applies flag overrides, writes the result to
//! `<out>/resolved_config.json`, and then runs. Rerunning with
//! `--config <out>/resolved_config.json` reproduces the run exactly.
//!
//! Exit codes: 0 success, 1 usage, 2 data or format, 3 numerical failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use autodeco_core::backbone::synth::{generate_synth_dataset, Command, Grammar, SynthTaskSpec};
use autodeco_core::backbone::traces::{build_traces, load_trace_dataset, write_trace_dataset};
use autodeco_core::backbone::{pretrain_backbone, FrozenBackbone, PretrainConfig};
use autodeco_core::decoding::{export_trace, DecodeMode, Generator};
use autodeco_core::evalkit::bench::{
    evaluate_mode, run_benchmark, synth_task_set, BenchConfig, TaskSet,
};
use autodeco_core::evalkit::{grid_search, pass_at_1};
use autodeco_core::heads::{init_heads, HeadParams, Squash};
use autodeco_core::training::{
    build_control_triples, control_train, train_heads, write_curve_jsonl, ControlConfig,
    TrainConfig,
};
use autodeco_core::{Error, ErrorKind, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "autodeco",
    version,
    about = "Train and evaluate per-token decoding heads"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// JSON config file; omitted keys take their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides every seed in the config. Without it the config's seeds
    /// (default 0) are used.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeName>,
    /// Temperature for `--mode static`.
    #[arg(long, global = true)]
    temp: Option<f32>,
    /// Top-p for `--mode static`.
    #[arg(long = "top-p", global = true)]
    top_p: Option<f32>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out", value_name = "DIR")]
    out: PathBuf,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Cmd {
    /// Pretrain a backbone on the synthetic task.
    Pretrain,
    /// Train temperature and top-p heads on backbone traces.
    Train,
    /// Fine-tune heads with the control ranking loss.
    ControlTrain,
    /// Generate traces from a prompt.
    Sample,
    /// Oversampled pass@1 for a list of modes.
    Eval,
    /// Two-stage static temperature / top-p search.
    Grid,
    /// Write a trace dataset and, optionally, a task file.
    Export,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum ModeName {
    Greedy,
    Default,
    Static,
    Autodeco,
}

/// Parses `args` (including the program name), runs, and returns the exit
/// code. Diagnostics go to stderr as a single line.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e.kind() {
        ErrorKind::Usage => EXIT_USAGE,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Numerical => EXIT_NUMERICAL,
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match cli.command {
        Cmd::Pretrain => execute(cli, cmd_pretrain),
        Cmd::Train => execute(cli, cmd_train),
        Cmd::ControlTrain => execute(cli, cmd_control_train),
        Cmd::Sample => execute(cli, cmd_sample),
        Cmd::Eval => execute(cli, cmd_eval),
        Cmd::Grid => execute(cli, cmd_grid),
        Cmd::Export => execute(cli, cmd_export),
    }
}

/// A subcommand's config: loaded, overridden by flags, snapshotted, run.
trait RunConfig: Serialize + DeserializeOwned + Default {
    fn apply_flags(&mut self, cli: &Cli) -> Result<()>;
}

fn execute<C: RunConfig>(cli: &Cli, body: fn(&C, &Path) -> Result<()>) -> Result<()> {
    let mut cfg: C = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::from(e).context(format!("--config {}", path.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| Error::usage(format!("config {}: {e}", path.display())))?
        }
        None => C::default(),
    };
    cfg.apply_flags(cli)?;
    fs::create_dir_all(&cli.out)?;
    let snapshot = serde_json::to_string_pretty(&cfg).expect("config serializes");
    fs::write(cli.out.join("resolved_config.json"), snapshot + "\n")?;
    body(&cfg, &cli.out)
}

fn no_mode_flags(cli: &Cli) -> Result<()> {
    if cli.mode.is_some() || cli.temp.is_some() || cli.top_p.is_some() {
        return Err(Error::usage(
            "--mode, --temp and --top-p only apply to sample and eval",
        ));
    }
    Ok(())
}

fn mode_from_flags(cli: &Cli) -> Result<Option<DecodeMode>> {
    let statics = (cli.temp, cli.top_p);
    let mode = match cli.mode {
        None if statics == (None, None) => return Ok(None),
        None => return Err(Error::usage("--temp and --top-p require --mode static")),
        Some(ModeName::Static) => match statics {
            (Some(temperature), Some(top_p)) => DecodeMode::Static { temperature, top_p },
            _ => {
                return Err(Error::usage(
                    "--mode static requires both --temp and --top-p",
                ))
            }
        },
        Some(_) if statics != (None, None) => {
            return Err(Error::usage(
                "--temp and --top-p only apply to --mode static",
            ))
        }
        Some(ModeName::Greedy) => DecodeMode::Greedy,
        Some(ModeName::Default) => DecodeMode::Default,
        Some(ModeName::Autodeco) => DecodeMode::AutoDeco,
    };
    mode.validate()?;
    Ok(Some(mode))
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| Error::usage(format!("missing required key `{key}`")))
}

fn load_backbone(path: &Option<PathBuf>) -> Result<FrozenBackbone> {
    let p = required(path, "backbone")?;
    FrozenBackbone::load(p).map_err(|e| e.context(format!("`backbone` ({})", p.display())))
}

fn load_heads(path: &Option<PathBuf>, key: &str) -> Result<HeadParams> {
    let p = required(path, key)?;
    HeadParams::load(p).map_err(|e| e.context(format!("`{key}` ({})", p.display())))
}

fn load_optional_heads(path: &Option<PathBuf>) -> Result<Option<HeadParams>> {
    path.as_ref().map(|_| load_heads(path, "heads")).transpose()
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).expect("record serializes");
        buf.push(b'\n');
    }
    fs::write(path, buf)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainRun {
    pub task: SynthTaskSpec,
    pub pretrain: PretrainConfig,
}

impl RunConfig for PretrainRun {
    fn apply_flags(&mut self, cli: &Cli) -> Result<()> {
        no_mode_flags(cli)?;
        if let Some(s) = cli.seed {
            self.pretrain.seed = s;
        }
        Ok(())
    }
}

fn cmd_pretrain(cfg: &PretrainRun, out: &Path) -> Result<()> {
    cfg.pretrain
        .initial_params()?
        .save(&out.join("backbone_init.bin"))?;
    let report = pretrain_backbone(&cfg.task, &cfg.pretrain)?;
    report.backbone.save(&out.join("backbone.bin"))?;
    write_jsonl(&out.join("pretrain_curve.jsonl"), &report.curve)?;
    println!(
        "pretrained {} steps: held-out loss {:.4} -> {:.4}, checksum {}",
        report.curve.len(),
        report.initial_loss,
        report.final_loss,
        report.backbone.checksum()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainRun {
    pub backbone: Option<PathBuf>,
    /// Existing trace dataset; when absent, traces are built by running the
    /// backbone over `n_sequences` samples of `task`.
    pub traces: Option<PathBuf>,
    pub task: SynthTaskSpec,
    pub n_sequences: usize,
    pub d_head: usize,
    pub squash: Squash,
    pub train: TrainConfig,
}

impl Default for TrainRun {
    fn default() -> Self {
        Self {
            backbone: None,
            traces: None,
            task: SynthTaskSpec::default(),
            n_sequences: 64,
            d_head: 64,
            squash: Squash::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig for TrainRun {
    fn apply_flags(&mut self, cli: &Cli) -> Result<()> {
        no_mode_flags(cli)?;
        if let Some(s) = cli.seed {
            self.train.seed = s;
        }
        Ok(())
    }
}

fn cmd_train(cfg: &TrainRun, out: &Path) -> Result<()> {
    let (records, d_model) = match &cfg.traces {
        Some(p) => {
            let ds = load_trace_dataset(p)
                .map_err(|e| e.context(format!("`traces` ({})", p.display())))?;
            for issue in &ds.issues {
                eprintln!("warning: {}: {}", p.display(), issue.message);
            }
            let d = ds.records.first().map(|r| r.hidden.len()).ok_or_else(|| {
                Error::usage(format!("`traces` ({}) holds no records", p.display()))
            })?;
            (ds.records, d)
        }
        None => {
            let bb = load_backbone(&cfg.backbone)?;
            let seqs = generate_synth_dataset(&cfg.task, cfg.n_sequences)?;
            (build_traces(bb.params(), &seqs, 0)?, bb.config().d_model)
        }
    };
    let init = init_heads(d_model, cfg.d_head, cfg.squash, cfg.train.seed)?;
    init.save(&out.join("heads_init.bin"))?;
    let report = train_heads(&records, &init, &cfg.train)?;
    report.heads.save(&out.join("heads.bin"))?;
    write_curve_jsonl(&out.join("train_curve.jsonl"), &report.curve)?;
    if let (Some(first), Some(last)) = (report.curve.first(), report.curve.last()) {
        println!(
            "trained {} steps on {} records: loss {:.4} -> {:.4}, mean T {:.3}, mean P {:.3}",
            report.curve.len(),
            records.len(),
            first.loss,
            last.loss,
            last.mean_t,
            last.mean_p
        );
    } else {
        println!("0 steps: heads.bin equals heads_init.bin");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// control-train
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlTrainRun {
    pub backbone: Option<PathBuf>,
    pub heads: Option<PathBuf>,
    pub task: SynthTaskSpec,
    pub n_triples: usize,
    pub triple_len: usize,
    pub margin: f64,
    pub control: ControlConfig,
}

impl Default for ControlTrainRun {
    fn default() -> Self {
        Self {
            backbone: None,
            heads: None,
            task: SynthTaskSpec::default(),
            n_triples: 100,
            triple_len: 16,
            margin: 0.1,
            control: ControlConfig::default(),
        }
    }
}

impl RunConfig for ControlTrainRun {
    fn apply_flags(&mut self, cli: &Cli) -> Result<()> {
        no_mode_flags(cli)?;
        if let Some(s) = cli.seed {
            self.control.seed = s;
        }
        Ok(())
    }
}

fn cmd_control_train(cfg: &ControlTrainRun, out: &Path) -> Result<()> {
    let bb = load_backbone(&cfg.backbone)?;
    let heads = load_heads(&cfg.heads, "heads")?;
    let grammar = Grammar::new(&cfg.task)?;
    let triples = build_control_triples(
        bb.params(),
        &grammar,
        cfg.n_triples,
        cfg.triple_len,
        cfg.margin,
        cfg.control.seed,
    )?;
    let report = control_train(&triples, &heads, &cfg.control)?;
    report.heads.save(&out.join("heads.bin"))?;
    write_jsonl(&out.join("control_curve.jsonl"), &report.curve)?;
    if let (Some(first), Some(last)) = (report.curve.first(), report.curve.last()) {
        println!(
            "control-trained {} steps on {} triples: ranking loss {:.4} -> {:.4}",
            report.curve.len(),
            triples.len(),
            first.loss,
            last.loss
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleRun {
    pub backbone: Option<PathBuf>,
    pub heads: Option<PathBuf>,
    pub prompt: Vec<u32>,
    pub max_len: usize,
    /// Number of traces; trace `i` uses seed `seed + i`.
    pub n: usize,
    pub stop_token: Option<u32>,
    pub mode: DecodeMode,
    pub seed: u64,
}

impl Default for SampleRun {
    fn default() -> Self {
        Self {
            backbone: None,
            heads: None,
            prompt: vec![Command::None.token()],
            max_len: 16,
            n: 1,
            stop_token: None,
            mode: DecodeMode::Default,
            seed: 0,
        }
    }
}

impl RunConfig for SampleRun {
    fn apply_flags(&mut self, cli: &Cli) -> Result<()> {
        if let Some(m) = mode_from_flags(cli)? {
            self.mode = m;
        }
        if let Some(s) = cli.seed {
            self.seed = s;
        }
        Ok(())
    }
}

fn cmd_sample(cfg: &SampleRun, out: &Path) -> Result<()> {
    let bb = load_backbone(&cfg.backbone)?;
    let heads = load_optional_heads(&cfg.heads)?;
    let gen = Generator {
        backbone: bb.params(),
        heads: heads.as_ref(),
        mode: cfg.mode,
        max_len: cfg.max_len,
        stop_token: cfg.stop_token,
    };
    for i in 0..cfg.n {
        let seed = cfg.seed.wrapping_add(i as u64);
        let trace = gen.generate(&cfg.prompt, seed)?;
        let path = out.join(format!("trace_{i:03}.json"));
        export_trace(&trace, &path)?;
        println!(
            "{}: {} tokens, mean T {:.4}, mean P {:.4}",
            path.display(),
            trace.tokens.len(),
            trace.mean_t(),
            trace.mean_p()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// eval and grid
// ---------------------------------------------------------------------------

/// Synthetic prompts drawn from the task grammar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthTasks {
    pub name: String,
    pub n_problems: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub command: Command,
    pub seed: u64,
}

impl Default for SynthTasks {
    fn default() -> Self {
        Self {
            name: "synth".into(),
            n_problems: 16,
            prompt_len: 8,
            gen_len: 16,
            command: Command::None,
            seed: 77,
        }
    }
}

impl SynthTasks {
    fn build(&self, grammar: &Grammar) -> Result<TaskSet> {
        synth_task_set(
            grammar,
            &self.name,
            self.n_problems,
            self.prompt_len,
            self.gen_len,
            self.command,
            self.seed,
        )
    }
}

/// Task sets from `tasks_file` (a JSON array of task sets) when given,
/// otherwise generated from `synth`.
fn task_sets(
    file: &Option<PathBuf>,
    synth: &SynthTasks,
    grammar: &Grammar,
) -> Result<Vec<TaskSet>> {
    let Some(p) = file else {
        return Ok(vec![synth.build(grammar)?]);
    };
    let text = fs::read_to_string(p)
        .map_err(|e| Error::from(e).context(format!("`tasks_file` ({})", p.display())))?;
    let sets: Vec<TaskSet> = if text.trim().is_empty() {
        Vec::new()
    } else {
        serde_json::from_str(&text).map_err(|e| Error::FormatLine {
            line: e.line(),
            msg: format!("`tasks_file` ({}): {e}", p.display()),
        })?
    };
    if sets.iter().all(|t| t.problems.is_empty()) {
        eprintln!(
            "warning: task file {} has no problems; tables will be empty",
            p.display()
        );
    }
    Ok(sets)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalRun {
    pub backbone: Option<PathBuf>,
    pub heads: Option<PathBuf>,
    /// Grammar used to grade answers.
    pub task: SynthTaskSpec,
    pub tasks_file: Option<PathBuf>,
    pub synth: SynthTasks,
    pub modes: Vec<DecodeMode>,
    pub bench: BenchConfig,
}

impl Default for EvalRun {
    fn default() -> Self {
        Self {
            backbone: None,
            heads: None,
            task: SynthTaskSpec::default(),
            tasks_file: None,
            synth: SynthTasks::default(),
            modes: vec![
                DecodeMode::Greedy,
                DecodeMode::Default,
                DecodeMode::AutoDeco,
            ],
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig for EvalRun {
    fn apply_flags(&mut self, cli: &Cli) -> Result<()> {
        if let Some(m) = mode_from_flags(cli)? {
            self.modes = vec![m];
        }
        if let Some(s) = cli.seed {
            self.bench.base_seed = s;
        }
        Ok(())
    }
}

fn cmd_eval(cfg: &EvalRun, out: &Path) -> Result<()> {
    let bb = load_backbone(&cfg.backbone)?;
    let heads = load_optional_heads(&cfg.heads)?;
    let grammar = Grammar::new(&cfg.task)?;
    let tasks = task_sets(&cfg.tasks_file, &cfg.synth, &grammar)?;
    let report = run_benchmark(
        &tasks,
        &cfg.modes,
        bb.params(),
        heads.as_ref(),
        &grammar,
        &cfg.bench,
    )?;
    report.write_jsonl(&out.join("results.jsonl"))?;
    let mut stdout = std::io::stdout().lock();
    for line in report.summaries() {
        writeln!(
            stdout,
            "{}",
            serde_json::to_string(line).expect("summary serializes")
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridRun {
    pub backbone: Option<PathBuf>,
    pub task: SynthTaskSpec,
    pub tasks_file: Option<PathBuf>,
    pub synth: SynthTasks,
    pub t_grid: Vec<f64>,
    pub p_grid: Vec<f64>,
    pub bench: BenchConfig,
}

impl Default for GridRun {
    fn default() -> Self {
        let grid: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        Self {
            backbone: None,
            task: SynthTaskSpec::default(),
            tasks_file: None,
            synth: SynthTasks::default(),
            t_grid: grid.clone(),
            p_grid: grid,
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig for GridRun {
    fn apply_flags(&mut self, cli: &Cli) -> Result<()> {
        no_mode_flags(cli)?;
        if let Some(s) = cli.seed {
            self.bench.base_seed = s;
        }
        Ok(())
    }
}

fn cmd_grid(cfg: &GridRun, out: &Path) -> Result<()> {
    let bb = load_backbone(&cfg.backbone)?;
    let grammar = Grammar::new(&cfg.task)?;
    let tasks = task_sets(&cfg.tasks_file, &cfg.synth, &grammar)?;
    let tasks: Vec<&TaskSet> = tasks.iter().filter(|t| !t.problems.is_empty()).collect();
    if tasks.is_empty() {
        return Err(Error::usage("grid search needs at least one problem"));
    }
    // Score = pass@1 averaged over task sets.
    let eval = |t: f64, p: f64| -> Result<f64> {
        let mode = DecodeMode::Static {
            temperature: t as f32,
            top_p: p as f32,
        };
        let mut total = 0.0;
        for task in &tasks {
            let outcomes = evaluate_mode(task, mode, bb.params(), None, &grammar, &cfg.bench)?;
            total += pass_at_1(&outcomes)?.mean;
        }
        Ok(total / tasks.len() as f64)
    };
    let result = grid_search(eval, &cfg.t_grid, &cfg.p_grid)?;
    let text = serde_json::to_string_pretty(&result).expect("grid result serializes");
    fs::write(out.join("grid.json"), text + "\n")?;
    println!("stage 1 (P = 1.0):");
    for (t, s) in &result.stage1 {
        println!("  T = {t:<5} score {s:.4}");
    }
    println!("stage 2 (T = {}):", result.t_star);
    for (p, s) in &result.stage2 {
        println!("  P = {p:<5} score {s:.4}");
    }
    println!(
        "chosen T* = {}, P* = {}, score {:.4}",
        result.t_star, result.p_star, result.best_score
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// export
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportRun {
    pub backbone: Option<PathBuf>,
    pub task: SynthTaskSpec,
    pub n_sequences: usize,
    pub first_id: u32,
    /// Also write `tasks.json` for `eval` and `grid`.
    pub tasks: Option<SynthTasks>,
}

impl Default for ExportRun {
    fn default() -> Self {
        Self {
            backbone: None,
            task: SynthTaskSpec::default(),
            n_sequences: 64,
            first_id: 0,
            tasks: None,
        }
    }
}

impl RunConfig for ExportRun {
    fn apply_flags(&mut self, cli: &Cli) -> Result<()> {
        no_mode_flags(cli)?;
        if let Some(s) = cli.seed {
            self.task.rng_seed = s;
        }
        Ok(())
    }
}

fn cmd_export(cfg: &ExportRun, out: &Path) -> Result<()> {
    let bb = load_backbone(&cfg.backbone)?;
    let seqs = generate_synth_dataset(&cfg.task, cfg.n_sequences)?;
    let records = build_traces(bb.params(), &seqs, cfg.first_id)?;
    write_trace_dataset(&out.join("traces.adkt"), &records)?;
    println!("wrote {} trace records", records.len());
    if let Some(t) = &cfg.tasks {
        let set = t.build(&Grammar::new(&cfg.task)?)?;
        let text = serde_json::to_string_pretty(&vec![set]).expect("tasks serialize");
        fs::write(out.join("tasks.json"), text + "\n")?;
    }
    Ok(())
}
