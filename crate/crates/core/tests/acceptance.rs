//! Acceptance run: one PASS/FAIL line per criterion, exit status nonzero if
//! any criterion fails. Criteria 4, 6 and 7 share one pretrained backbone
//! and one set of trained heads, built once up front.

use std::path::Path;
use std::time::{Duration, Instant};

use autodeco_core::backbone::synth::{generate_synth_dataset, Command, Grammar, SynthTaskSpec};
use autodeco_core::backbone::traces::{build_traces, decode_traces, encode_traces};
use autodeco_core::backbone::{
    pretrain_backbone, BackboneConfig, BackboneParams, FrozenBackbone, PretrainConfig,
};
use autodeco_core::decoding::{
    export_trace, generate, import_trace, step_distribution, DecodeMode, GenerationTrace,
};
use autodeco_core::evalkit::bench::{evaluate_mode, synth_task_set, BenchConfig};
use autodeco_core::evalkit::efficiency::{head_share, latency_measure};
use autodeco_core::evalkit::{
    control_consistency, grid_search, pass_at_1, pass_at_k, Direction, PassAt1,
};
use autodeco_core::heads::{init_heads, HeadNodes, HeadParams, Squash};
use autodeco_core::numerics::{
    exclusive_cumsum, sort_descending, stable_softmax, Tensor, ValueGraph,
};
use autodeco_core::rng::CounterRng;
use autodeco_core::soft_topp::{
    hard_topp, soft_pipeline, soft_pipeline_node, temperature_scale, SoftMaskConfig,
};
use autodeco_core::training::{
    build_control_triples, ce_node, control_train, train_heads, ControlConfig, TrainConfig,
};
use autodeco_core::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { pass, detail })
}

/// Backbone and heads trained on the default synthetic task.
struct Fixture {
    spec: SynthTaskSpec,
    grammar: Grammar,
    backbone: FrozenBackbone,
    heads: HeadParams,
    build_time: Duration,
}

fn build_fixture() -> Result<Fixture> {
    let t0 = Instant::now();
    let spec = SynthTaskSpec::default();
    let backbone = pretrain_backbone(&spec, &PretrainConfig::default())?.backbone;
    let seqs = generate_synth_dataset(&spec.with_rng_seed(5), 64)?;
    let records = build_traces(backbone.params(), &seqs, 0)?;
    let init = init_heads(backbone.config().d_model, 64, Squash::default(), 1)?;
    let heads = train_heads(&records, &init, &TrainConfig::default())?.heads;
    Ok(Fixture {
        grammar: Grammar::new(&spec)?,
        spec,
        backbone,
        heads,
        build_time: t0.elapsed(),
    })
}

fn random_logits(rng: &mut CounterRng, v: usize, scale: f64) -> Vec<f32> {
    (0..v).map(|_| (rng.normal() * scale) as f32).collect()
}

fn tv(a: &[f32], b: &[f32]) -> f64 {
    0.5 * a
        .iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .sum::<f64>()
}

// ---------------------------------------------------------------------------
// 1. soft / hard equivalence
// ---------------------------------------------------------------------------

fn criterion_1() -> Result<Outcome> {
    let steep = SoftMaskConfig::new(1e6, 1e-8)?;
    let mut rng = CounterRng::new(101);
    let (mut worst, mut excluded, mut kept) = (0.0f64, 0usize, 0usize);
    for v in [8usize, 64, 1024] {
        let mut accepted = 0;
        while accepted < 100 {
            let logits = Tensor::from_vec(random_logits(&mut rng, v, 2.0));
            let t = rng.uniform(0.2, 2.0);
            let p = rng.uniform(0.1, 0.99);
            let probs = temperature_scale(&logits, t)?;
            let (sorted, _) = sort_descending(&probs)?;
            let cum = exclusive_cumsum(&sorted)?;
            if cum.data().iter().any(|&c| (c as f64 - p).abs() < 1e-4) {
                excluded += 1;
                continue;
            }
            let soft = soft_pipeline(&logits, t, p, &steep)?;
            let hard = hard_topp(&probs, p)?;
            worst = worst.max(tv(soft.data(), hard.data()));
            accepted += 1;
            kept += 1;
        }
    }
    verdict(
        worst < 1e-4,
        format!("max TV {worst:.2e} over {kept} distributions ({excluded} boundary cases redrawn), tol 1e-4"),
    )
}

// ---------------------------------------------------------------------------
// 2. differentiability
// ---------------------------------------------------------------------------

struct Probe {
    logits: Vec<f64>,
    hidden: Vec<f64>,
    target: u32,
    heads: HeadParams,
}

const PROBE_D: usize = 6;
const PROBE_DH: usize = 5;
const PROBE_V: usize = 10;
const KINK: f64 = 1e-3;

fn random_probe(rng: &mut CounterRng, seed: u64) -> Result<Probe> {
    let mut heads = init_heads(PROBE_D, PROBE_DH, Squash::default(), seed)?;
    let flat: Vec<f32> = heads
        .to_flat()
        .iter()
        .map(|&w| w + (0.3 * rng.normal()) as f32)
        .collect();
    heads.set_flat(&flat)?;
    Ok(Probe {
        logits: (0..PROBE_V).map(|_| 2.0 * rng.normal()).collect(),
        hidden: (0..PROBE_D).map(|_| rng.normal()).collect(),
        target: rng.below(PROBE_V as u64) as u32,
        heads,
    })
}

/// Pre-activations of both heads' hidden layers at this probe.
fn preactivations(p: &Probe, t_hat: f64) -> Vec<f64> {
    let layer = |w1: &Tensor, b1: &Tensor, x: &[f64]| -> Vec<f64> {
        let dh = b1.len();
        (0..dh)
            .map(|j| {
                b1.data()[j] as f64
                    + x.iter()
                        .enumerate()
                        .map(|(i, &xi)| xi * w1.data()[i * dh + j] as f64)
                        .sum::<f64>()
            })
            .collect()
    };
    let mut x = p.hidden.clone();
    let mut z = layer(&p.heads.temp.w1, &p.heads.temp.b1, &x);
    x.push(t_hat);
    z.extend(layer(&p.heads.topp.w1, &p.heads.topp.b1, &x));
    z
}

/// Kink-free when all ReLU inputs, sorted-probability gaps and
/// cumulative-mass distances to `P̂` clear the margin.
fn kink_free(p: &Probe, t: f64, top_p: f64) -> Result<bool> {
    if !(0.2..=2.0).contains(&t) || !(0.3..=0.95).contains(&top_p) {
        return Ok(false);
    }
    if preactivations(p, t).iter().any(|z| z.abs() < KINK) {
        return Ok(false);
    }
    let logits = Tensor::from_vec(p.logits.iter().map(|&x| x as f32).collect());
    let (sorted, _) = sort_descending(&temperature_scale(&logits, t)?)?;
    let cum = exclusive_cumsum(&sorted)?;
    let gaps_ok = sorted
        .data()
        .windows(2)
        .all(|w| (w[0] - w[1]) as f64 > 1e-6);
    Ok(gaps_ok && cum.data().iter().all(|&c| (c as f64 - top_p).abs() > KINK))
}

/// CE of the soft pipeline driven directly by `(T, P)`.
fn loss_tp(p: &Probe, x: &[f64], mask: &SoftMaskConfig) -> Result<(f64, Vec<f64>)> {
    let mut g = ValueGraph::new();
    let t = g.scalar(x[0]);
    let pp = g.scalar(x[1]);
    let l = g.constant(vec![PROBE_V], p.logits.clone())?;
    let out = soft_pipeline_node(&mut g, l, t, pp, mask)?;
    let ce = ce_node(&mut g, out, p.target)?;
    let grads = g.backward(ce)?;
    Ok((g.scalar_value(ce), vec![grads.scalar(t), grads.scalar(pp)]))
}

/// CE of the soft pipeline driven by the heads, as a function of all head
/// weights.
fn loss_heads(p: &Probe, flat: &[f64], mask: &SoftMaskConfig) -> Result<(f64, Vec<f64>)> {
    let mut g = ValueGraph::new();
    let nodes = HeadNodes::bind_flat(&mut g, &p.heads, flat)?;
    let h = g.constant(vec![1, PROBE_D], p.hidden.clone())?;
    let t = nodes.temperature(&mut g, h)?;
    let pp = nodes.top_p(&mut g, h, t)?;
    let t = g.gather(t, vec![0])?;
    let pp = g.gather(pp, vec![0])?;
    let l = g.constant(vec![PROBE_V], p.logits.clone())?;
    let out = soft_pipeline_node(&mut g, l, t, pp, mask)?;
    let ce = ce_node(&mut g, out, p.target)?;
    let grads = g.backward(ce)?;
    Ok((g.scalar_value(ce), nodes.flat_grad(&grads)))
}

/// Normwise relative error `max|a - n| / max|n|` of the analytic gradient
/// against central differences.
fn fd_error(f: impl Fn(&[f64]) -> Result<(f64, Vec<f64>)>, x: &[f64], step: f64) -> Result<f64> {
    let (_, analytic) = f(x)?;
    let mut probe = x.to_vec();
    let (mut diff, mut scale) = (0.0f64, 0.0f64);
    for i in 0..x.len() {
        probe[i] = x[i] + step;
        let up = f(&probe)?.0;
        probe[i] = x[i] - step;
        let down = f(&probe)?.0;
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * step);
        diff = diff.max((analytic[i] - numeric).abs());
        scale = scale.max(numeric.abs());
    }
    Ok(diff / scale.max(1e-300))
}

fn criterion_2() -> Result<Outcome> {
    let mask = SoftMaskConfig::default();
    let mut rng = CounterRng::new(202);
    let (mut worst_tp, mut worst_w, mut probes, mut rejected) = (0.0f64, 0.0f64, 0usize, 0usize);
    let mut seed = 0;
    while probes < 1000 {
        seed += 1;
        let p = random_probe(&mut rng, seed)?;
        let h32: Vec<f32> = p.hidden.iter().map(|&x| x as f32).collect();
        let (t, top_p) = p.heads.predict(&h32)?;
        if !kink_free(&p, t, top_p)? {
            rejected += 1;
            continue;
        }
        worst_tp = worst_tp.max(fd_error(|x| loss_tp(&p, x, &mask), &[t, top_p], 1e-5)?);
        worst_w = worst_w.max(fd_error(
            |x| loss_heads(&p, x, &mask),
            &p.heads.to_flat_f64(),
            1e-5,
        )?);
        probes += 1;
    }
    let worst = worst_tp.max(worst_w);
    verdict(
        worst < 1e-4,
        format!(
            "{probes} probes ({rejected} near kinks skipped): max rel error {worst_tp:.2e} on (T, P), {worst_w:.2e} on {} head weights, tol 1e-4",
            init_heads(PROBE_D, PROBE_DH, Squash::default(), 0)?.param_count()
        ),
    )
}

// ---------------------------------------------------------------------------
// 3. identity reductions
// ---------------------------------------------------------------------------

fn criterion_3(fx: &Fixture) -> Result<Outcome> {
    let mut rng = CounterRng::new(303);
    let mask = SoftMaskConfig::default();
    let mut worst_pipe = 0.0f64;
    for v in [8usize, 64, 1024] {
        for _ in 0..100 {
            let logits = Tensor::from_vec(random_logits(&mut rng, v, 3.0));
            let a = soft_pipeline(&logits, 1.0, 1.0, &mask)?;
            let b = stable_softmax(&logits)?;
            for (x, y) in a.data().iter().zip(b.data()) {
                worst_pipe = worst_pipe.max((x - y).abs() as f64);
            }
        }
    }

    // Static (1, 1) against default: same step distributions and, given the
    // same seeds, the same generations.
    let stat = DecodeMode::Static {
        temperature: 1.0,
        top_p: 1.0,
    };
    let mut dist_equal = true;
    for _ in 0..100 {
        let logits = random_logits(&mut rng, 128, 3.0);
        let (a, _) = step_distribution(&[], &logits, None, &stat)?;
        let (b, _) = step_distribution(&[], &logits, None, &DecodeMode::Default)?;
        dist_equal &= a == b;
    }
    let bb = fx.backbone.params();
    let mut gens_equal = true;
    for seed in 0..20 {
        let prompt = [Command::None.token(), 3 + seed as u32];
        let a = generate(&prompt, bb, None, stat, 24, None, seed)?;
        let b = generate(&prompt, bb, None, DecodeMode::Default, 24, None, seed)?;
        gens_equal &= a.tokens == b.tokens && a.log_probs == b.log_probs;
    }

    // Untrained heads at zero hidden input, and the distribution they induce.
    let (mut dt, mut dp, mut worst_tv) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..20 {
        let h = init_heads(64, 64, Squash::default(), seed)?;
        let (t, p) = h.predict(&[0.0; 64])?;
        dt = dt.max((t - 1.0).abs());
        dp = dp.max((p - 1.0).abs());
        for _ in 0..5 {
            let logits = random_logits(&mut rng, 128, 3.0);
            let (a, _) = step_distribution(&[0.0; 64], &logits, Some(&h), &DecodeMode::AutoDeco)?;
            let (b, _) = step_distribution(&[0.0; 64], &logits, None, &DecodeMode::Default)?;
            worst_tv = worst_tv.max(tv(&a, &b));
        }
    }
    let pass = worst_pipe < 1e-6 && dist_equal && gens_equal && dt < 0.05 && dp < 0.02;
    verdict(
        pass,
        format!(
            "pipeline(1,1) vs softmax {worst_pipe:.1e} (tol 1e-6); static(1,1)==default: dists {dist_equal}, generations {gens_equal}; init heads |T-1| {dt:.1e} (tol 0.05), |P-1| {dp:.1e} (tol 0.02), TV to default {worst_tv:.3}"
        ),
    )
}

// ---------------------------------------------------------------------------
// 4. learned adaptivity
// ---------------------------------------------------------------------------

fn criterion_4(fx: &Fixture) -> Result<Outcome> {
    let t0 = Instant::now();
    let bb = fx.backbone.params();
    let held = generate_synth_dataset(&fx.spec.with_rng_seed(6), 32)?;
    let (mut sums, mut counts) = ([0.0f64; 2], [0usize; 2]);
    for r in build_traces(bb, &held, 0)? {
        let (t, _) = fx.heads.predict(r.hidden.data())?;
        let k = fx.grammar.is_deterministic(r.position as usize) as usize;
        sums[k] += t;
        counts[k] += 1;
    }
    let (t_stoch, t_det) = (sums[0] / counts[0] as f64, sums[1] / counts[1] as f64);

    let task = synth_task_set(&fx.grammar, "synth", 16, 8, 16, Command::None, 77)?;
    let cfg = BenchConfig::default();
    let eval = |mode: DecodeMode| -> Result<PassAt1> {
        pass_at_1(&evaluate_mode(
            &task,
            mode,
            bb,
            Some(&fx.heads),
            &fx.grammar,
            &cfg,
        )?)
    };
    let auto = eval(DecodeMode::AutoDeco)?;
    let default = eval(DecodeMode::Default)?;
    let grid: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
    let search = grid_search(
        |t, p| {
            Ok(eval(DecodeMode::Static {
                temperature: t as f32,
                top_p: p as f32,
            })?
            .mean)
        },
        &grid,
        &grid,
    )?;
    let best = eval(DecodeMode::Static {
        temperature: search.t_star as f32,
        top_p: search.p_star as f32,
    })?;
    let slack = auto.std.max(best.std);
    let elapsed = t0.elapsed() + fx.build_time;
    let pass = t_stoch - t_det >= 0.2
        && auto.mean >= best.mean - slack
        && elapsed < Duration::from_secs(15 * 60);
    verdict(
        pass,
        format!(
            "mean T stochastic {t_stoch:.3} vs deterministic {t_det:.3} (gap {:.3}, need 0.2); pass@1 autodeco {:.4}±{:.4}, grid best (T={}, P={}) {:.4}±{:.4}, default {:.4}±{:.4}; {:.0}s incl. training",
            t_stoch - t_det,
            auto.mean,
            auto.std,
            search.t_star,
            search.p_star,
            best.mean,
            best.std,
            default.mean,
            default.std,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 5. estimator exactness
// ---------------------------------------------------------------------------

fn criterion_5() -> Result<Outcome> {
    let mut checked = 0;
    let mut mismatches = 0;
    for n in 1..=12u32 {
        for c in 0..=n {
            for k in 1..=n {
                // Samples 0..c are correct; count size-k subsets that hit one.
                let (mut hit, mut total) = (0u64, 0u64);
                for mask in 0u32..(1 << n) {
                    if mask.count_ones() == k {
                        total += 1;
                        hit += (mask & ((1 << c) - 1) != 0) as u64;
                    }
                }
                let brute = hit as f64 / total as f64;
                if pass_at_k(n as u64, c as u64, k as u64)? != brute {
                    mismatches += 1;
                }
                checked += 1;
            }
        }
    }
    verdict(
        mismatches == 0,
        format!(
            "{checked} (n, c, k) triples with n <= 12, {mismatches} differ from subset enumeration"
        ),
    )
}

// ---------------------------------------------------------------------------
// 6. control training
// ---------------------------------------------------------------------------

fn criterion_6(fx: &Fixture) -> Result<Outcome> {
    let t0 = Instant::now();
    let bb = fx.backbone.params();
    let triples = build_control_triples(bb, &fx.grammar, 100, 16, 0.1, 3)?;
    let heads = control_train(&triples, &fx.heads, &ControlConfig::default())?.heads;
    let held = synth_task_set(&fx.grammar, "held-out", 100, 4, 12, Command::None, 991)?;
    let run = |cmd: Option<Command>| -> Result<Vec<GenerationTrace>> {
        held.problems
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut prompt = p.prompt.clone();
                if let Some(c) = cmd {
                    prompt[0] = c.token();
                }
                generate(
                    &prompt,
                    bb,
                    Some(&heads),
                    DecodeMode::AutoDeco,
                    12,
                    None,
                    i as u64,
                )
            })
            .collect()
    };
    let base = run(None)?;
    let low = control_consistency(&base, &run(Some(Command::Low))?, Direction::Low)?;
    let high = control_consistency(&base, &run(Some(Command::High))?, Direction::High)?;
    let elapsed = t0.elapsed();
    let pass = low.consistency_t >= 95.0
        && high.consistency_t >= 95.0
        && low.consistency_p >= 85.0
        && high.consistency_p >= 85.0
        && elapsed < Duration::from_secs(600);
    verdict(
        pass,
        format!(
            "low: dT {:+.3} ({:.0}%), dP {:+.3} ({:.0}%); high: dT {:+.3} ({:.0}%), dP {:+.3} ({:.0}%); need T >= 95%, P >= 85%; {:.1}s",
            low.delta_t, low.consistency_t, low.delta_p, low.consistency_p,
            high.delta_t, high.consistency_t, high.delta_p, high.consistency_p,
            elapsed.as_secs_f64()
        ),
    )
}

// ---------------------------------------------------------------------------
// 7. efficiency accounting
// ---------------------------------------------------------------------------

fn criterion_7(fx: &Fixture) -> Result<Outcome> {
    let share = |d: usize, d_head: usize| {
        let arch = BackboneConfig {
            vocab: 128,
            max_len: 1024,
            d_model: d,
            n_heads: 8,
            n_layers: 2,
            d_ff: 4 * d,
        };
        head_share(&arch, d_head, 1000)
    };
    let shares: Vec<f64> = [512, 1024].iter().map(|&d| share(d, 64)).collect();
    let wide: Vec<f64> = [512, 1024].iter().map(|&d| share(d, d)).collect();

    let bb = fx.backbone.params();
    let prompts: Vec<Vec<u32>> = synth_task_set(&fx.grammar, "lat", 16, 4, 48, Command::None, 5)?
        .problems
        .into_iter()
        .map(|p| p.prompt)
        .collect();
    let gen_all = |mode: DecodeMode| {
        let prompts = &prompts;
        move || -> Result<()> {
            for (i, p) in prompts.iter().enumerate() {
                generate(p, bb, Some(&fx.heads), mode, 48, None, i as u64)?;
            }
            Ok(())
        }
    };
    let lat = latency_measure(
        gen_all(DecodeMode::AutoDeco),
        gen_all(DecodeMode::Default),
        10,
    )?;
    let pass = shares.iter().all(|&s| s < 0.02) && lat.overhead < 0.25;
    verdict(
        pass,
        format!(
            "head FLOPs share at d_head=64: {:.2}% (d=512), {:.2}% (d=1024), need < 2% [d_head=d_model: {:.1}%, {:.1}%]; toy latency overhead {:+.1}% ({:.2} ms vs {:.2} ms), need < 25%",
            100.0 * shares[0],
            100.0 * shares[1],
            100.0 * wide[0],
            100.0 * wide[1],
            100.0 * lat.overhead,
            1e3 * lat.mean_seconds,
            1e3 * lat.baseline_mean_seconds
        ),
    )
}

// ---------------------------------------------------------------------------
// 8. determinism and formats
// ---------------------------------------------------------------------------

fn same_bytes(a: &Path, b: &Path) -> bool {
    std::fs::read(a).ok() == std::fs::read(b).ok()
}

fn cli(args: &[&str]) -> i32 {
    let mut full = vec!["autodeco"];
    full.extend_from_slice(args);
    autodeco_cli::run(full)
}

fn criterion_8(fx: &Fixture) -> Result<Outcome> {
    let tmp = tempfile::tempdir()?;
    let dir = tmp.path();
    let mut failures: Vec<String> = Vec::new();

    // Weight files.
    let bb_path = dir.join("backbone.bin");
    fx.backbone.save(&bb_path)?;
    let back = FrozenBackbone::load(&bb_path)?;
    let bits = |v: Vec<f32>| v.into_iter().map(f32::to_bits).collect::<Vec<_>>();
    if bits(back.params().to_flat()) != bits(fx.backbone.params().to_flat())
        || back.checksum() != fx.backbone.checksum()
    {
        failures.push("backbone weights".into());
    }
    let resaved = dir.join("backbone2.bin");
    back.save(&resaved)?;
    if !same_bytes(&bb_path, &resaved) {
        failures.push("backbone re-save".into());
    }
    let heads_path = dir.join("heads.bin");
    fx.heads.save(&heads_path)?;
    if bits(HeadParams::load(&heads_path)?.to_flat()) != bits(fx.heads.to_flat()) {
        failures.push("head weights".into());
    }
    let raw = BackboneParams::load(&bb_path)?;
    if raw.to_bytes() != fx.backbone.params().to_bytes() {
        failures.push("backbone bytes".into());
    }

    // Trace dataset.
    let seqs = generate_synth_dataset(&fx.spec.with_rng_seed(8), 16)?;
    let records = build_traces(fx.backbone.params(), &seqs, 0)?;
    let bytes = encode_traces(&records)?;
    let decoded = decode_traces(&bytes)?;
    if decoded.records != records
        || !decoded.issues.is_empty()
        || encode_traces(&decoded.records)? != bytes
    {
        failures.push("trace dataset".into());
    }

    // Generation traces.
    for (i, mode) in [
        DecodeMode::Greedy,
        DecodeMode::AutoDeco,
        DecodeMode::Static {
            temperature: 0.7,
            top_p: 0.9,
        },
    ]
    .into_iter()
    .enumerate()
    {
        let trace = generate(
            &[0, 5],
            fx.backbone.params(),
            Some(&fx.heads),
            mode,
            20,
            None,
            40 + i as u64,
        )?;
        let path = dir.join(format!("trace{i}.json"));
        export_trace(&trace, &path)?;
        let back = import_trace(&path)?;
        let lp = |t: &GenerationTrace| t.log_probs.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if back != trace || lp(&back) != lp(&trace) {
            failures.push(format!("generation trace ({})", mode.name()));
        }
    }

    // Same-seed CLI reruns, every subcommand, on a tiny configuration.
    let task = serde_json::json!({"vocab": 16, "seq_len": 8, "answer_set_size": 2,
        "deterministic_positions": [0, 2, 4, 6], "stochastic_positions": [1, 3, 5, 7], "grammar_seed": 3});
    let p = |x: &Path| x.to_str().expect("utf-8 path").to_string();
    let pre = dir.join("a_pretrain");
    let bb = p(&pre.join("backbone.bin"));
    let heads = p(&dir.join("a_train").join("heads.bin"));
    let tasks = p(&dir.join("a_export").join("tasks.json"));
    let configs = [
        (
            "pretrain",
            serde_json::json!({"task": task, "pretrain": {"backbone": {"vocab": 16, "max_len": 8,
            "d_model": 8, "n_heads": 2, "n_layers": 1, "d_ff": 16}, "steps": 4, "batch_size": 4}}),
        ),
        (
            "export",
            serde_json::json!({"backbone": bb, "task": task, "n_sequences": 6,
            "tasks": {"n_problems": 2, "prompt_len": 3, "gen_len": 4}}),
        ),
        (
            "train",
            serde_json::json!({"backbone": bb, "task": task, "n_sequences": 6, "d_head": 4,
            "train": {"steps": 5, "batch_size": 8}}),
        ),
        (
            "control-train",
            serde_json::json!({"backbone": bb, "heads": heads, "task": task, "n_triples": 4,
            "triple_len": 6, "control": {"steps": 3, "batch_size": 2}}),
        ),
        (
            "sample",
            serde_json::json!({"backbone": bb, "heads": heads, "prompt": [0, 5], "max_len": 5, "n": 2,
            "mode": {"kind": "autodeco"}}),
        ),
        (
            "eval",
            serde_json::json!({"backbone": bb, "heads": heads, "task": task, "tasks_file": tasks,
            "bench": {"n_seeds": 2, "samples_per_seed": 3}}),
        ),
        (
            "grid",
            serde_json::json!({"backbone": bb, "task": task, "tasks_file": tasks, "t_grid": [0.5, 1.0],
            "p_grid": [0.5, 1.0], "bench": {"n_seeds": 2, "samples_per_seed": 2}}),
        ),
    ];
    for (cmd, cfg) in &configs {
        let cfg_path = dir.join(format!("{cmd}.json"));
        std::fs::write(&cfg_path, cfg.to_string())?;
        let outs: Vec<_> = ["a", "b"]
            .iter()
            .map(|t| dir.join(format!("{t}_{cmd}")))
            .collect();
        let codes: Vec<i32> = outs
            .iter()
            .map(|o| {
                cli(&[
                    cmd,
                    "--config",
                    &p(&cfg_path),
                    "--seed",
                    "17",
                    "--out",
                    &p(o),
                ])
            })
            .collect();
        let mut names: Vec<_> = std::fs::read_dir(&outs[0])?
            .map(|e| e.map(|e| e.file_name()))
            .collect::<std::io::Result<_>>()?;
        names.sort();
        let identical = names
            .iter()
            .all(|n| same_bytes(&outs[0].join(n), &outs[1].join(n)));
        if codes != [0, 0] || !identical || names.len() < 2 {
            failures.push(format!("cli {cmd} (exit codes {codes:?})"));
        }
    }

    verdict(
        failures.is_empty(),
        if failures.is_empty() {
            "weights, trace datasets and generation traces round-trip bit-exactly; 7 CLI subcommands rerun byte-identically".into()
        } else {
            format!("failed: {}", failures.join(", "))
        },
    )
}

// ---------------------------------------------------------------------------

fn main() {
    let names = [
        "soft/hard equivalence",
        "differentiability",
        "identity reductions",
        "learned adaptivity",
        "estimator exactness",
        "control training",
        "efficiency accounting",
        "determinism & formats",
    ];
    let fixture = build_fixture();
    let mut all_pass = true;
    for (i, name) in names.iter().enumerate() {
        let t0 = Instant::now();
        let outcome = match (i + 1, &fixture) {
            (1, _) => criterion_1(),
            (2, _) => criterion_2(),
            (5, _) => criterion_5(),
            (_, Err(e)) => Err(autodeco_core::Error::usage(format!("fixture failed: {e}"))),
            (3, Ok(fx)) => criterion_3(fx),
            (4, Ok(fx)) => criterion_4(fx),
            (6, Ok(fx)) => criterion_6(fx),
            (7, Ok(fx)) => criterion_7(fx),
            (_, Ok(fx)) => criterion_8(fx),
        };
        let secs = t0.elapsed().as_secs_f64();
        let (pass, detail) = match outcome {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        all_pass &= pass;
        println!(
            "criterion {} [{}] {name}: {detail} ({secs:.1}s)",
            i + 1,
            if pass { "PASS" } else { "FAIL" }
        );
    }
    if !all_pass {
        std::process::exit(1);
    }
}
