//! Implementations behind the CLI subcommands. The binary stays thin; tests
//! and examples call straight into these.

use std::path::{Path, PathBuf};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{CsvWriter, RunMetrics};
use crate::model::{ForwardOptions, Model, SpanMode};
use crate::rng::Rng;
use crate::selftest::run_selftest;
use crate::tensor::tape::Tape;
use crate::train::{run_batch, train_loop, OptimState, TaskStream};

/// Exit codes shared by every subcommand.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_SELFTEST: i32 = 3;

pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub resume: Option<PathBuf>,
}

pub fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let (mut cfg, start_step, model, opt) = match (&args.resume, &args.config) {
        (Some(ckpt_path), _) => {
            let ck = checkpoint::load(ckpt_path)?;
            eprintln!("resuming from {} at step {}", ckpt_path.display(), ck.step);
            (ck.config, ck.step, Some(ck.model), Some(ck.optimizer))
        }
        (None, Some(config_path)) => {
            let (cfg, defaulted) = RunConfig::load(config_path)?;
            if !defaulted.is_empty() {
                eprintln!("defaults applied for: {}", defaulted.join(", "));
            }
            (cfg, 0, None, None)
        }
        (None, None) => {
            return Err(Error::Config("train needs --config or --resume".into()));
        }
    };

    let stream = cfg.build_task()?;
    let mut model = match model {
        Some(m) => m,
        None => Model::new(cfg.model.clone(), cfg.seed)?,
    };

    let run_dir = cfg.resolved_run_dir();
    let resuming = start_step > 0;
    prepare_run_dir(&run_dir, resuming)?;
    std::fs::write(run_dir.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;

    let csv_path = run_dir.join("metrics.csv");
    let mut csv = if resuming && csv_path.exists() {
        CsvWriter::append_to(&csv_path)?
    } else {
        CsvWriter::create(&csv_path)?
    };

    let cfg_echo = cfg.clone();
    let run_dir2 = run_dir.clone();
    let out = train_loop(
        &mut model,
        stream.as_ref(),
        &cfg.train,
        move |row: &RunMetrics, model: &Model, opt: &OptimState| {
            csv.append(row)?;
            println!(
                "step {} task_loss {:.4} metric {:.3} avg_mem {:.1} avg_span {:.1}",
                row.step, row.task_loss, row.metric, row.avg_mem, row.avg_span
            );
            let path = run_dir2.join(format!("ckpt_{:08}.bin", row.step));
            checkpoint::save(&path, &cfg_echo, model, opt, row.step)?;
            retain_last_checkpoints(&run_dir2, 2)?;
            Ok(())
        },
        start_step,
        opt,
    )?;
    if let Some(step) = out.halted_at {
        eprintln!("halted on non-finite loss at step {step}");
        return Ok(EXIT_NUMERIC);
    }
    Ok(EXIT_OK)
}

fn prepare_run_dir(dir: &Path, resuming: bool) -> Result<()> {
    if dir.exists() {
        let occupied = std::fs::read_dir(dir)?.next().is_some();
        if occupied && !resuming {
            return Err(Error::Config(format!(
                "run directory {} is not empty (resume or pick another)",
                dir.display()
            )));
        }
    } else {
        std::fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn retain_last_checkpoints(dir: &Path, keep: usize) -> Result<()> {
    let mut ckpts: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ckpt_") && n.ends_with(".bin"))
        })
        .collect();
    ckpts.sort();
    let n = ckpts.len();
    for p in ckpts.into_iter().take(n.saturating_sub(keep)) {
        std::fs::remove_file(p)?;
    }
    Ok(())
}

pub struct EvalArgs {
    pub checkpoint: PathBuf,
    /// Overrides the task embedded in the checkpoint.
    pub task_config: Option<PathBuf>,
    pub max_span_override: Option<usize>,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<RunMetrics> {
    let ck = checkpoint::load(&args.checkpoint)?;
    let mut cfg = ck.config;
    if let Some(path) = &args.task_config {
        let (other, _) = RunConfig::load(path)?;
        cfg.task = other.task;
        cfg.seed = other.seed;
    }
    let mut probe = cfg.clone();
    let stream = probe.build_task()?;
    let mut model = ck.model;

    let span_override = match (args.max_span_override, model.cfg.mode) {
        (Some(_), SpanMode::FixedSpan) => {
            eprintln!("fixed-span checkpoint: --max-span-override ignored");
            None
        }
        (Some(cap), SpanMode::ExpireSpan) => {
            let l = model.cfg.max_span;
            if cap > l {
                eprintln!("--max-span-override {cap} exceeds trained max span {l}; clamping");
            }
            Some(cap.min(l) as f64)
        }
        (None, _) => None,
    };

    let row = eval_stream(&mut model, stream.as_ref(), ck.step, span_override)?;
    Ok(row)
}

/// Evaluate a model on a stream's eval set with an optional span cap.
pub fn eval_stream(
    model: &mut Model,
    stream: &dyn TaskStream,
    step: usize,
    span_override: Option<f64>,
) -> Result<RunMetrics> {
    let mut rng = Rng::new(0);
    let opts = ForwardOptions { span_override, ..ForwardOptions::default() };
    let eval = stream.eval_set();
    let t0 = std::time::Instant::now();
    let out = run_batch(model, &eval, &opts, &mut rng, false)?;
    let elapsed = t0.elapsed().as_secs_f64() * 1e3;
    let metric = if stream.exact_match_metric() {
        out.exact_samples as f64 / out.samples.max(1) as f64
    } else {
        out.correct_tokens as f64 / out.scored_tokens.max(1) as f64
    };
    Ok(RunMetrics {
        step,
        task_loss: out.task_loss_nats,
        span_loss: out.span_loss,
        bpb: stream.reports_bpb().then(|| crate::metrics::bits_per_byte(out.task_loss_nats)),
        metric,
        avg_mem: out.support_total as f64 / out.support_rows.max(1) as f64,
        peak_mem: out.peak_bank,
        ms_per_batch: elapsed,
        avg_span: if out.span_count > 0 { out.span_sum / out.span_count as f64 } else { 0.0 },
        lr: 0.0,
    })
}

pub struct AnalyzeArgs {
    pub checkpoint: PathBuf,
    pub input: PathBuf,
    pub output: Option<PathBuf>,
}

/// Per-token, per-layer span trace for a trained expire-mode model.
pub fn cmd_analyze(args: &AnalyzeArgs) -> Result<String> {
    let ck = checkpoint::load(&args.checkpoint)?;
    let mut model = ck.model;
    if model.cfg.mode != SpanMode::ExpireSpan {
        return Err(Error::Config("no spans to analyze: checkpoint is fixed-span".into()));
    }
    let tokens = read_input_tokens(&args.input, &ck.config, model.cfg.vocab_size)?;
    let csv = span_trace_csv(&mut model, &tokens)?;
    if let Some(out) = &args.output {
        std::fs::write(out, &csv)?;
    }
    Ok(csv)
}

/// Forward a token stream and export CSV rows (layer, position, token, span).
pub fn span_trace_csv(model: &mut Model, tokens: &[usize]) -> Result<String> {
    let mut rng = Rng::new(0);
    let mut rows = String::from("layer,position,token,span\n");
    let mut per_layer: Vec<Vec<f64>> = vec![Vec::new(); model.cfg.n_layers];
    model.reset_state();
    for chunk in tokens.chunks(model.cfg.block_size) {
        model.prune_banks(model.next_position());
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let out = model.forward_block(
            &mut tape,
            &bound,
            chunk,
            &ForwardOptions::default(),
            &mut rng,
            true,
        )?;
        for (l, lt) in out.trace.unwrap().layers.iter().enumerate() {
            per_layer[l].extend_from_slice(&lt.fresh_spans);
        }
        model.detach_banks(&tape);
    }
    for (l, spans) in per_layer.iter().enumerate() {
        for (pos, (tok, span)) in tokens.iter().zip(spans).enumerate() {
            rows.push_str(&format!("{l},{pos},{tok},{span}\n"));
        }
    }
    Ok(rows)
}

/// Input tokens: a JSON array of ids, or raw bytes mapped through the
/// char-lm vocabulary when the checkpoint was trained on one.
fn read_input_tokens(path: &Path, cfg: &RunConfig, vocab: usize) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path)?;
    if let Ok(ids) = serde_json::from_slice::<Vec<usize>>(&bytes) {
        if let Some(bad) = ids.iter().find(|&&t| t >= vocab) {
            return Err(Error::Config(format!("token id {bad} out of vocab {vocab}")));
        }
        return Ok(ids);
    }
    match &cfg.task {
        crate::config::TaskConfig::CharLm(c) => {
            let t = crate::tasks::charlm::CharLmTask::from_config(c)?;
            let mut map = [usize::MAX; 256];
            for (i, &b) in t.vocab.iter().enumerate() {
                map[b as usize] = i;
            }
            bytes
                .iter()
                .map(|&b| {
                    let id = map[b as usize];
                    if id == usize::MAX {
                        Err(Error::Config(format!("byte {b:#x} not in training vocabulary")))
                    } else {
                        Ok(id)
                    }
                })
                .collect()
        }
        _ => Err(Error::Config(
            "input is not a JSON token array and the checkpoint is not char-lm".into(),
        )),
    }
}

/// Run the invariant suite, print one line per check, return the exit code.
pub fn cmd_selftest() -> i32 {
    let t0 = std::time::Instant::now();
    let reports = run_selftest(false);
    let mut ok = true;
    for r in &reports {
        println!("[{}] {} — {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        ok &= r.passed;
    }
    println!(
        "selftest: {}/{} checks passed in {:.1}s",
        reports.iter().filter(|r| r.passed).count(),
        reports.len(),
        t0.elapsed().as_secs_f64()
    );
    if ok {
        EXIT_OK
    } else {
        EXIT_SELFTEST
    }
}
